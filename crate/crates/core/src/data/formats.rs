//! IDX, PGM and image-set container I/O.

use std::path::Path;

use super::imageset::{ImageSet, SetEntry};
use crate::error::{ensure, Error, Result};
use crate::ndtensor::{decode_container, write_container, DType, Tensor};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], off: usize) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(off as u64, "truncated IDX header"))
}

/// Raw IDX image payload: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::format(
            0,
            format!("bad IDX image magic {magic:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("IDX image payload truncated: need {need} bytes"),
        ));
    }
    Ok((n, rows, cols, &bytes[16..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::format(
            0,
            format!("bad IDX label magic {magic:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4)? as usize;
    if bytes.len() < 8 + n {
        return Err(Error::format(
            bytes.len() as u64,
            "IDX label payload truncated",
        ));
    }
    Ok(&bytes[8..8 + n])
}

/// Byte intensity to `[-1, 1]`.
pub fn byte_to_unit(b: u8) -> f64 {
    f64::from(b) / 127.5 - 1.0
}

/// `[-1, 1]` to the nearest byte.
pub fn unit_to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Load an IDX image file (and optional label file) as an image set with
/// values scaled from `[0, 255]` to `[-1, 1]`.
pub fn load_idx(images: &Path, labels: Option<&Path>, domain: &str) -> Result<ImageSet> {
    let bytes = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let (n, rows, cols, px) = parse_idx_images(&bytes)?;
    let imgs = px
        .chunks_exact(rows * cols)
        .map(|c| {
            Tensor::new(
                &[1, rows, cols],
                c.iter().map(|&b| byte_to_unit(b)).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = match labels {
        None => None,
        Some(p) => {
            let lb = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            let l = parse_idx_labels(&lb)?;
            ensure!(l.len() == n, Invalid, "{} labels for {} images", l.len(), n);
            Some(l.iter().map(|&b| u32::from(b)).collect())
        }
    };
    ImageSet::new(
        imgs,
        domain,
        labels,
        None,
        format!("idx:{}", images.display()),
    )
}

/// Encode images as an IDX image file (values quantized to bytes).
pub fn encode_idx_images(set: &ImageSet) -> Vec<u8> {
    let (h, w) = set.image_shape().unwrap_or((0, 0));
    let mut out = Vec::with_capacity(16 + set.len() * h * w);
    for v in [IDX_IMAGES, set.len() as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for im in set.images() {
        out.extend(im.data().iter().map(|&v| unit_to_byte(v)));
    }
    out
}

pub fn encode_idx_labels(labels: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

/// 8-bit binary PGM of a `[1, H, W]` image.
pub fn encode_pgm(image: &Tensor) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| unit_to_byte(v)));
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::format(start as u64, "truncated PGM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos)?;
    if magic != "P5" {
        return Err(Error::format(
            0,
            format!("not a binary PGM (magic {magic:?})"),
        ));
    }
    let num = |pos: &mut usize| -> Result<usize> {
        let at = *pos;
        token(pos)?
            .parse::<usize>()
            .map_err(|_| Error::format(at as u64, "malformed PGM header number"))
    };
    let w = num(&mut pos)?;
    let h = num(&mut pos)?;
    let maxval = num(&mut pos)?;
    if maxval != 255 {
        return Err(Error::format(
            pos as u64,
            format!("unsupported PGM maxval {maxval}"),
        ));
    }
    pos += 1; // single whitespace byte before the raster
    let px = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| Error::format(bytes.len() as u64, "truncated PGM raster"))?;
    Tensor::new(&[1, h, w], px.iter().map(|&b| byte_to_unit(b)).collect())
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pgm(image)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    decode_pgm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Write the images of `set` as one `[N, 1, H, W]` f64 container.
pub fn encode_set_container(set: &ImageSet) -> Result<Vec<u8>> {
    let stacked = if set.is_empty() {
        Tensor::zeros(&[0, 1, 0, 0])
    } else {
        set.batch(&(0..set.len()).collect::<Vec<_>>())?
    };
    let mut buf = Vec::new();
    write_container(&mut buf, &stacked, DType::F64).expect("in-memory write");
    Ok(buf)
}

pub fn decode_set_container(bytes: &[u8], entry: &SetEntry) -> Result<ImageSet> {
    let (t, _) = decode_container(bytes)?;
    ensure!(
        t.ndim() == 4 && t.shape()[1] == 1,
        Dimension,
        "image container must be [N, 1, H, W], got {:?}",
        t.shape()
    );
    let images = (0..t.shape()[0]).map(|i| t.index_axis0(i)).collect();
    ImageSet::new(
        images,
        entry.domain.clone(),
        entry.labels.clone(),
        entry.ids.clone(),
        entry.provenance.clone(),
    )
}

/// Dataset directory manifest.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub sets: Vec<SetEntry>,
    /// Free-form provenance of the whole directory (method, model hash...).
    #[serde(default, skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub notes: std::collections::BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Save named sets into `dir` (containers + `manifest.json`), plus PGM
/// previews of up to `previews` images per set under `images/`.
pub fn save_dataset(
    dir: &Path,
    sets: &[(&str, &ImageSet)],
    previews: usize,
) -> Result<DatasetManifest> {
    save_dataset_with_notes(dir, sets, previews, Default::default())
}

pub fn save_dataset_with_notes(
    dir: &Path,
    sets: &[(&str, &ImageSet)],
    previews: usize,
    notes: std::collections::BTreeMap<String, String>,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (name, set) in sets {
        let file = format!("{name}.ntn");
        let path = dir.join(&file);
        std::fs::write(&path, encode_set_container(set)?).map_err(|e| Error::io(&path, e))?;
        if previews > 0 {
            let img_dir = dir.join("images").join(name);
            std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
            for (i, im) in set.images().iter().take(previews).enumerate() {
                write_pgm(&img_dir.join(format!("{i:05}.pgm")), im)?;
            }
        }
        entries.push(SetEntry {
            name: (*name).to_string(),
            path: file,
            domain: set.domain.clone(),
            labels: set.content_labels.clone(),
            ids: set.subject_ids.clone(),
            provenance: set.provenance.clone(),
        });
    }
    let manifest = DatasetManifest {
        schema_version: 1,
        sets: entries,
        notes,
    };
    let mpath = dir.join(MANIFEST_FILE);
    std::fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?)
        .map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Load one named set from a dataset directory.
pub fn load_set(dir: &Path, name: &str) -> Result<ImageSet> {
    let manifest = load_manifest(dir)?;
    let entry = manifest
        .sets
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| {
            Error::Config(format!(
                "dataset {} has no set named {name:?}",
                dir.display()
            ))
        })?;
    let path = dir.join(&entry.path);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    decode_set_container(&bytes, entry)
}
