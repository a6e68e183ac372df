//! Image sets, simulations and file formats.

mod box1;
mod digits;
mod formats;
mod imageset;
mod phantoms;

pub use box1::{box1_domains, corrupt_box1, pad_to, split_halves, DEFAULT_NOISE_SIGMA};
pub use digits::{render_digit, synthetic_digits, DIGIT_SIZE};
pub use formats::{
    byte_to_unit, decode_pgm, decode_set_container, encode_idx_images, encode_idx_labels,
    encode_pgm, encode_set_container, load_idx, load_manifest, load_set, parse_idx_images,
    parse_idx_labels, read_pgm, save_dataset, save_dataset_with_notes, unit_to_byte, write_pgm,
    DatasetManifest, MANIFEST_FILE,
};
pub use imageset::{ImageSet, SetEntry};
pub use phantoms::{
    apply_site_effect, generate_phantoms, BiasField, RegionalOffset, SiteEffectSpec,
};
