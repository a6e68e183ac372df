use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ImageSet;
use crate::error::{ensure, Error, Result};
use crate::ndtensor::{AdamConfig, AdamState, Tensor};
use crate::nets::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Network};
use crate::rng::derive_seed;

pub const DEFAULT_LAMBDA_CYCLE: f64 = 0.2;

/// Architecture and optimizer settings shared by both GAN pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub adam: AdamConfig,
    pub lambda_cycle: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            adam: AdamConfig::gan(),
            lambda_cycle: DEFAULT_LAMBDA_CYCLE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        ensure!(
            self.lambda_cycle > 0.0 && self.lambda_cycle.is_finite(),
            Config,
            "lambda_cycle must be positive, got {}",
            self.lambda_cycle
        );
        let a = &self.adam;
        ensure!(
            a.lr > 0.0
                && (0.0..1.0).contains(&a.beta1)
                && (0.0..1.0).contains(&a.beta2)
                && a.eps > 0.0,
            Config,
            "invalid Adam settings {a:?}"
        );
        ensure!(
            self.generator.in_channels == self.discriminator.in_channels,
            Config,
            "generator and discriminator channel counts differ"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "x_to_y")]
    XToY,
    #[serde(rename = "y_to_x")]
    YToX,
}

impl Direction {
    pub fn reverse(self) -> Self {
        match self {
            Self::XToY => Self::YToX,
            Self::YToX => Self::XToY,
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x_to_y" | "x2y" | "xy" => Ok(Self::XToY),
            "y_to_x" | "y2x" | "yx" => Ok(Self::YToX),
            _ => Err(Error::Config(format!(
                "unknown direction {s:?} (use x_to_y or y_to_x)"
            ))),
        }
    }
}

/// Two generators, two discriminators and their optimizers.
///
/// `g` maps X to Y and is judged by `d_y`; `f` maps Y to X and is judged by
/// `d_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonizationModel {
    pub config: ModelConfig,
    pub g: Generator,
    pub f: Generator,
    pub d_y: Discriminator,
    pub d_x: Discriminator,
    pub adam_g: AdamState,
    pub adam_f: AdamState,
    pub adam_d_y: AdamState,
    pub adam_d_x: AdamState,
    pub step: u64,
}

/// Images per inference batch.
const INFER_BATCH: usize = 16;

impl HarmonizationModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let g = Generator::new(config.generator.clone(), derive_seed(seed, "G"))?;
        let f = Generator::new(config.generator.clone(), derive_seed(seed, "F"))?;
        let d_y = Discriminator::new(config.discriminator.clone(), derive_seed(seed, "D_Y"))?;
        let d_x = Discriminator::new(config.discriminator.clone(), derive_seed(seed, "D_X"))?;
        let adam = |n: &dyn Network| AdamState::new(n.params(), config.adam);
        Ok(Self {
            adam_g: adam(&g),
            adam_f: adam(&f),
            adam_d_y: adam(&d_y),
            adam_d_x: adam(&d_x),
            g,
            f,
            d_y,
            d_x,
            config,
            step: 0,
        })
    }

    pub fn lambda_cycle(&self) -> f64 {
        self.config.lambda_cycle
    }

    pub fn generator(&self, direction: Direction) -> &Generator {
        match direction {
            Direction::XToY => &self.g,
            Direction::YToX => &self.f,
        }
    }

    /// Networks with their checkpoint prefixes.
    pub fn networks(&self) -> [(&'static str, &dyn Network, &AdamState); 4] {
        [
            ("G", &self.g, &self.adam_g),
            ("F", &self.f, &self.adam_f),
            ("D_Y", &self.d_y, &self.adam_d_y),
            ("D_X", &self.d_x, &self.adam_d_x),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.networks().iter().all(|(_, n, _)| n.all_finite())
    }

    /// SHA-256 over step, every parameter, running statistic and Adam moment.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.step.to_le_bytes());
        h.update(self.config.lambda_cycle.to_le_bytes());
        for (prefix, net, adam) in self.networks() {
            h.update(prefix.as_bytes());
            for (name, t) in net.state() {
                h.update(name.as_bytes());
                hash_tensor(&mut h, t);
            }
            h.update(adam.step_count.to_le_bytes());
            for t in adam.m.iter().chain(&adam.v) {
                hash_tensor(&mut h, t);
            }
        }
        format!("{:x}", h.finalize())
    }

    fn check_usable(&self) -> Result<()> {
        ensure!(
            self.step > 0,
            Invalid,
            "model has not been trained (step 0); train or load a checkpoint first"
        );
        if !self.all_finite() {
            return Err(Error::NonFinite(
                "model has non-finite parameters or statistics".into(),
            ));
        }
        Ok(())
    }

    fn map_batches(&self, net: &Generator, images: &ImageSet) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(images.len());
        let idx: Vec<usize> = (0..images.len()).collect();
        for chunk in idx.chunks(INFER_BATCH) {
            let y = net.infer(&images.batch(chunk)?)?;
            out.extend((0..chunk.len()).map(|i| y.index_axis0(i)));
        }
        Ok(out)
    }

    fn check_shape(&self, images: &ImageSet) -> Result<()> {
        if let Some((h, w)) = images.image_shape() {
            ensure!(
                h % 4 == 0 && w % 4 == 0,
                Dimension,
                "model needs image sides divisible by 4, got {h}x{w}"
            );
        }
        Ok(())
    }

    /// Apply `G` (X to Y) or `F` (Y to X) in inference mode.
    pub fn transform(&self, images: &ImageSet, direction: Direction) -> Result<ImageSet> {
        self.check_usable()?;
        self.check_shape(images)?;
        let out = self.map_batches(self.generator(direction), images)?;
        let mut set = images.with_images(
            out,
            format!(
                "{} | harmonized {direction:?} model {}",
                images.provenance,
                &self.hash()[..12]
            ),
        )?;
        set.domain = match direction {
            Direction::XToY => "Y",
            Direction::YToX => "X",
        }
        .into();
        Ok(set)
    }

    /// Per-image `|back(forward(v)) - v|`.
    pub fn round_trip_error(&self, images: &ImageSet, direction: Direction) -> Result<Vec<f64>> {
        self.check_usable()?;
        self.check_shape(images)?;
        let set = ImageSet::new(
            self.map_batches(self.generator(direction), images)?,
            "mid",
            None,
            None,
            "",
        )?;
        let back = self.map_batches(self.generator(direction.reverse()), &set)?;
        Ok(images
            .images()
            .iter()
            .zip(&back)
            .map(|(a, b)| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(p, q)| (p - q).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect())
    }
}

fn hash_tensor(h: &mut Sha256, t: &Tensor) {
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
}
