//! U-Net mapping a cover to per-pixel change probabilities.
//!
//! Blocks 1–8 halve the resolution (stride-2 convolution) and blocks 9–15
//! double it (nearest upsampling then convolution); every block is two 3×3
//! convolutions, each followed by batch norm and LeakyReLU. The output of
//! block `i` (1 ≤ i ≤ 7) is concatenated with that of block `16 - i` and
//! fed to block `17 - i`; block 16 is a stride-2 transposed convolution
//! followed by a sigmoid.
//!
//! Downsampling rounds up, so any size is accepted; each upsampled tensor
//! is cropped to its skip partner and the final map to the input size. For
//! sides divisible by 256 no cropping happens.

use std::path::Path;

use fluxsteg_nn::graph::Binding;
use fluxsteg_nn::{archive, BatchNorm2d, Conv2d, ConvTranspose2d, Graph, Mode, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::ProbabilityMap;
use crate::image::ImageGray;

pub const DOWN_BLOCKS: usize = 8;
pub const UP_BLOCKS: usize = 7;

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("skip index {0} outside 1..=7")]
    SkipIndex(usize),
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("non-finite activation after {layer}")]
    NonFinite { layer: String },
    #[error("image of {got:?} does not match batch size {expected:?}")]
    Shape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error(transparent)]
    Archive(#[from] archive::ArchiveError),
    #[error("checkpoint metadata: {0}")]
    Meta(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub down_blocks: usize,
    pub up_blocks: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub leaky_slope: f64,
    /// Outputs are clamped to `[prob_floor, 1 - prob_floor]`.
    pub prob_floor: f64,
    pub init_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            down_blocks: DOWN_BLOCKS,
            up_blocks: UP_BLOCKS,
            base_channels: 16,
            max_channels: 128,
            leaky_slope: 0.2,
            prob_floor: 1e-6,
            init_seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        if self.down_blocks != DOWN_BLOCKS || self.up_blocks != UP_BLOCKS {
            return Err(GeneratorError::Config(format!(
                "the topology is fixed at {DOWN_BLOCKS} down and {UP_BLOCKS} up blocks"
            )));
        }
        if !(self.prob_floor > 0.0 && self.prob_floor <= 0.01) {
            return Err(GeneratorError::Config(format!(
                "prob_floor {} outside (0, 0.01]",
                self.prob_floor
            )));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(GeneratorError::Config("channel widths".into()));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(GeneratorError::Config(format!("leaky_slope {}", self.leaky_slope)));
        }
        Ok(())
    }

    /// Output channels of down block `i` (1-based).
    fn channels(&self, i: usize) -> usize {
        (self.base_channels << (i - 1).min(20)).min(self.max_channels)
    }
}

/// Block `first` and block `second` are concatenated and feed block
/// `target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkipConnection {
    pub first: usize,
    pub second: usize,
    pub target: usize,
}

pub fn skip_topology(i: usize) -> Result<SkipConnection, GeneratorError> {
    if !(1..=7).contains(&i) {
        return Err(GeneratorError::SkipIndex(i));
    }
    Ok(SkipConnection {
        first: i,
        second: 16 - i,
        target: 17 - i,
    })
}

#[derive(Debug, Clone)]
struct Unit {
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Debug, Clone)]
struct Block {
    a: Unit,
    b: Unit,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub store: ParamStore,
    blocks: Vec<Block>,
    deconv: ConvTranspose2d,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self, GeneratorError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let mut unit = |store: &mut ParamStore, name: String, cin, cout, stride| Unit {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, 3, stride, 1, false, &mut rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
        };
        let mut blocks = Vec::with_capacity(15);
        let mut cin = 1;
        for i in 1..=DOWN_BLOCKS {
            let c = config.channels(i);
            blocks.push(Block {
                a: unit(&mut store, format!("block{i:02}.a"), cin, c, 2),
                b: unit(&mut store, format!("block{i:02}.b"), c, c, 1),
            });
            cin = c;
        }
        for j in DOWN_BLOCKS + 1..=DOWN_BLOCKS + UP_BLOCKS {
            let input = if j == 9 {
                config.channels(8)
            } else {
                // concat(block 17 - j, block j - 1)
                config.channels(17 - j) + config.channels(16 - (j - 1))
            };
            let c = config.channels(16 - j);
            blocks.push(Block {
                a: unit(&mut store, format!("block{j:02}.a"), input, c, 1),
                b: unit(&mut store, format!("block{j:02}.b"), c, c, 1),
            });
        }
        let final_in = config.channels(1) * 2;
        let deconv = ConvTranspose2d::new(&mut store, "block16.deconv", final_in, 1, 4, 2, 1, true, &mut rng);
        Ok(Self {
            config,
            store,
            blocks,
            deconv,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    fn unit(&self, g: &mut Graph, p: &Binding, u: &Unit, x: Var, mode: Mode) -> Var {
        let h = u.conv.forward(g, p, x);
        let h = u.bn.forward(g, p, h, mode);
        g.leaky_relu(h, self.config.leaky_slope)
    }

    fn check(g: &Graph, v: Var, layer: impl FnOnce() -> String) -> Result<(), GeneratorError> {
        if g.value(v).all_finite() {
            Ok(())
        } else {
            Err(GeneratorError::NonFinite { layer: layer() })
        }
    }

    /// Total change probability `[N, 1, H, W]` for normalized covers
    /// `x` in `[0, 1]`.
    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var, GeneratorError> {
        let p = g.bind(&self.store);
        let (_, _, height, width) = g.value(x).dims4();
        let mut outs: Vec<Var> = Vec::with_capacity(15);
        let mut h = x;
        for (i, block) in self.blocks.iter().enumerate() {
            let index = i + 1;
            let input = if index <= DOWN_BLOCKS {
                h
            } else {
                let joined = if index == 9 {
                    outs[7]
                } else {
                    let s = skip_topology(17 - index).expect("valid index");
                    g.concat(&[outs[s.first - 1], outs[s.second - 1]], 1)
                };
                let up = g.upsample2x(joined);
                let (_, _, th, tw) = g.value(outs[16 - index - 1]).dims4();
                let (_, _, uh, uw) = g.value(up).dims4();
                if (uh, uw) == (th, tw) {
                    up
                } else {
                    g.crop(up, 0, 0, th, tw)
                }
            };
            let a = self.unit(g, &p, &block.a, input, mode);
            h = self.unit(g, &p, &block.b, a, mode);
            Self::check(g, h, || format!("block {index}"))?;
            outs.push(h);
        }
        let s = skip_topology(1).expect("valid index");
        let joined = g.concat(&[outs[s.first - 1], outs[s.second - 1]], 1);
        let d = self.deconv.forward(g, &p, joined);
        let (_, _, dh, dw) = g.value(d).dims4();
        let d = if (dh, dw) == (height, width) {
            d
        } else {
            g.crop(d, 0, 0, height, width)
        };
        let prob = g.sigmoid(d);
        let floor = self.config.prob_floor;
        let prob = g.clamp(prob, floor, 1.0 - floor);
        Self::check(g, prob, || "block 16".into())?;
        Ok(prob)
    }

    /// Probability map of one cover with running batch-norm statistics.
    pub fn probability_map(&self, cover: &ImageGray) -> Result<ProbabilityMap, GeneratorError> {
        let mut maps = self.probability_maps(std::slice::from_ref(cover), Mode::Eval)?;
        Ok(maps.pop().expect("one map"))
    }

    pub fn probability_maps(&self, covers: &[ImageGray], mode: Mode) -> Result<Vec<ProbabilityMap>, GeneratorError> {
        let x = images_to_tensor(covers, 1.0 / 255.0)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = self.forward(&mut g, xv, mode)?;
        let (h, w) = covers[0].shape();
        Ok(g.value(out)
            .data()
            .chunks(h * w)
            .map(|p| ProbabilityMap::symmetric(h, w, p).expect("clamped into (0, 1)"))
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), GeneratorError> {
        let meta = serde_json::json!({"arch": "unet-generator", "config": self.config});
        Ok(archive::save(path, &meta, &self.store)?)
    }

    pub fn load(path: &Path) -> Result<Self, GeneratorError> {
        let a = archive::load(path)?;
        if a.meta.get("arch").and_then(|v| v.as_str()) != Some("unet-generator") {
            return Err(GeneratorError::Meta("not a generator checkpoint".into()));
        }
        let config: GeneratorConfig = serde_json::from_value(a.meta["config"].clone())
            .map_err(|e| GeneratorError::Meta(e.to_string()))?;
        let mut g = Self::new(config)?;
        a.load_into(&mut g.store)?;
        Ok(g)
    }
}

/// Stack same-sized images into `[N, 1, H, W]`, scaled by `scale`.
pub fn images_to_tensor(images: &[ImageGray], scale: f64) -> Result<Tensor, GeneratorError> {
    let first = images
        .first()
        .ok_or_else(|| GeneratorError::Config("empty batch".into()))?;
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.shape() != (h, w) {
            return Err(GeneratorError::Shape {
                expected: (h, w),
                got: img.shape(),
            });
        }
        data.extend(img.pixels().iter().map(|&v| v as f64 * scale));
    }
    Ok(Tensor::new(&[images.len(), 1, h, w], data))
}
