//! Frozen backbone handle and decoder-activation capture.
//!
//! Decoder blocks are numbered `1..=decoder_block_count` from the deepest
//! (lowest resolution) block up toward the output. With the ADM layout of six
//! levels and three blocks per level, block 6 and block 8 of the 256×256 model
//! both sit at 32×32 (1024 and 512 channels).
//!
//! An activation is the block's own output: after its residual sum and any
//! upsampling layer it contains, before the next block concatenates a skip.

use std::sync::Arc;

use log::debug;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{param, Error, Result};
use crate::nn::Params;
use crate::optim::Adam;
use crate::schedule::NoiseSchedule;
use crate::unet::{Unet, UnetConfig};

pub const CAPTURE_POINT: &str =
    "decoder block output after residual sum and in-block upsampling, before next skip concatenation";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneDescriptor {
    pub input_resolution: usize,
    pub decoder_block_count: usize,
    /// Row `b - 1` describes block `b`.
    pub geometry: Vec<BlockGeometry>,
    pub schedule: NoiseSchedule,
    pub weights_fingerprint: String,
    pub capture_point: String,
}

impl BackboneDescriptor {
    pub fn block(&self, index: usize) -> Result<BlockGeometry> {
        if index == 0 || index > self.decoder_block_count {
            return param(format!(
                "block {index} outside 1..={}",
                self.decoder_block_count
            ));
        }
        Ok(self.geometry[index - 1])
    }

    pub fn check_spec(&self, spec: BlockSpec) -> Result<()> {
        self.block(spec.block)?;
        if spec.timestep > self.schedule.steps() {
            return param(format!(
                "timestep {} outside 0..={}",
                spec.timestep,
                self.schedule.steps()
            ));
        }
        Ok(())
    }
}

pub fn geometry_table(config: &UnetConfig) -> Vec<BlockGeometry> {
    config
        .decoder_geometry()
        .into_iter()
        .map(|(channels, size)| BlockGeometry {
            channels,
            height: size,
            width: size,
        })
        .collect()
}

/// A decoder block at a diffusion timestep (`0` = clean image).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockSpec {
    pub block: usize,
    pub timestep: usize,
}

impl BlockSpec {
    pub fn new(block: usize, timestep: usize) -> Self {
        Self { block, timestep }
    }
}

impl std::fmt::Display for BlockSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "b{}_t{}", self.block, self.timestep)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderActivation {
    pub spec: BlockSpec,
    /// `C×H×W`
    pub data: Array3<f32>,
}

impl DecoderActivation {
    pub fn channels(&self) -> usize {
        self.data.dim().0
    }
    pub fn height(&self) -> usize {
        self.data.dim().1
    }
    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Toy,
    Pretrained,
}

/// Immutable handle to a UNet and its descriptor. Cloning is cheap.
#[derive(Debug, Clone)]
pub struct Backbone {
    net: Arc<Unet>,
    descriptor: BackboneDescriptor,
    kind: BackboneKind,
}

pub fn fingerprint(net: &Unet) -> String {
    let mut hasher = Sha256::new();
    for (name, p) in net.named_params() {
        hasher.update(name.as_bytes());
        for d in p.shape() {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in p.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

/// Maps a 1-based timestep onto the network's 0-based conditioning index.
pub fn model_timestep(t: usize) -> f32 {
    t.saturating_sub(1) as f32
}

/// Standard-normal noise for one image, fully determined by `seed`.
pub fn seeded_noise(shape: (usize, usize, usize), seed: u64) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn(shape, || rng.sample::<f32, _>(StandardNormal))
}

impl Backbone {
    pub(crate) fn from_parts(net: Unet, schedule: NoiseSchedule, kind: BackboneKind) -> Self {
        let cfg = net.config();
        let descriptor = BackboneDescriptor {
            input_resolution: cfg.image_size,
            decoder_block_count: cfg.decoder_block_count(),
            geometry: geometry_table(cfg),
            schedule,
            weights_fingerprint: fingerprint(&net),
            capture_point: CAPTURE_POINT.to_string(),
        };
        Self {
            net: Arc::new(net),
            descriptor,
            kind,
        }
    }

    /// Desk-scale UNet with deterministic weights for `seed`.
    pub fn toy(resolution: usize, base_channels: usize, seed: u64) -> Result<Self> {
        if resolution < 32 || !resolution.is_power_of_two() {
            return param(format!(
                "toy backbone resolution must be a power of two >= 32, got {resolution}"
            ));
        }
        if base_channels == 0 || base_channels % 8 != 0 {
            return param(format!(
                "toy backbone base channels must be a positive multiple of 8, got {base_channels}"
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Unet::new(UnetConfig::toy(resolution, base_channels), &mut rng)?;
        Ok(Self::from_parts(net, NoiseSchedule::default(), BackboneKind::Toy))
    }

    pub fn descriptor(&self) -> &BackboneDescriptor {
        &self.descriptor
    }

    pub fn kind(&self) -> BackboneKind {
        self.kind
    }

    pub fn net(&self) -> &Unet {
        &self.net
    }

    /// Recomputes the weight hash from the live parameters.
    pub fn current_fingerprint(&self) -> String {
        fingerprint(&self.net)
    }

    /// Noises `x0` to the shared timestep of `blocks` with seeded noise, runs one
    /// forward pass and returns the requested decoder activations in request order.
    pub fn collect_activations(
        &self,
        x0: &Array3<f32>,
        blocks: &[BlockSpec],
        epsilon_seed: u64,
    ) -> Result<Vec<DecoderActivation>> {
        let Some(first) = blocks.first() else {
            return Ok(vec![]);
        };
        if blocks.iter().any(|b| b.timestep != first.timestep) {
            return param("all block specs in one call must share a timestep");
        }
        for b in blocks {
            self.descriptor.check_spec(*b)?;
        }
        let res = self.descriptor.input_resolution;
        if x0.dim() != (3, res, res) {
            return param(format!(
                "image shape {:?} does not match backbone input 3x{res}x{res}",
                x0.dim()
            ));
        }
        let t = first.timestep;
        let eps = seeded_noise(x0.dim(), epsilon_seed);
        let x_t = self.descriptor.schedule.forward_noise(x0, t, &eps)?;
        let mut wanted: Vec<usize> = blocks.iter().map(|b| b.block - 1).collect();
        wanted.sort_unstable();
        wanted.dedup();
        let feats = self.net.decoder_features(&x_t, model_timestep(t), &wanted)?;
        Ok(blocks
            .iter()
            .map(|spec| {
                let pos = wanted.binary_search(&(spec.block - 1)).unwrap();
                DecoderActivation {
                    spec: *spec,
                    data: feats[pos].clone(),
                }
            })
            .collect())
    }

    /// Denoising (ε-prediction) pretraining of a toy backbone. Returns a new
    /// frozen handle and the per-step loss trace; `self` is left untouched.
    pub fn train_toy(&self, images: &[Array3<f32>], opts: &DenoiseTraining) -> Result<(Backbone, Vec<f32>)> {
        if self.kind != BackboneKind::Toy {
            return Err(Error::Immutable(
                "pretrained backbones cannot be trained".into(),
            ));
        }
        if opts.steps == 0 {
            return Ok((self.clone(), vec![]));
        }
        if images.is_empty() {
            return param("denoise training needs at least one image");
        }
        let schedule = &self.descriptor.schedule;
        let mut net = (*self.net).clone();
        let mut opt = Adam::new(opts.learning_rate, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut trace = Vec::with_capacity(opts.steps);
        let batch = opts.batch_size.max(1);
        for step in 0..opts.steps {
            let mut total = net.zeroed();
            let mut loss_sum = 0.0f32;
            for _ in 0..batch {
                let x0 = &images[rng.random_range(0..images.len())];
                let t = rng.random_range(1..=schedule.steps());
                let eps = seeded_noise(x0.dim(), rng.random());
                let x_t = schedule.forward_noise(x0, t, &eps)?;
                let (loss, grad) = net.eps_loss_grad(&x_t, model_timestep(t), &eps)?;
                loss_sum += loss;
                for ((_, mut acc), (_, g)) in total.named_params_mut().into_iter().zip(grad.named_params()) {
                    acc += &g;
                }
            }
            let scale = 1.0 / batch as f32;
            let grads = total
                .named_params_mut()
                .into_iter()
                .map(|(_, mut g)| {
                    g.mapv_inplace(|v| v * scale);
                    g.to_owned()
                })
                .collect::<Vec<_>>();
            opt.step(
                net.named_params_mut().into_iter().map(|(_, p)| p).collect(),
                grads.iter().map(|g| g.view()).collect(),
            );
            trace.push(loss_sum * scale);
            if step % 50 == 0 {
                debug!("denoise step {step}: loss {}", loss_sum * scale);
            }
        }
        Ok((
            Backbone::from_parts(net, schedule.clone(), BackboneKind::Toy),
            trace,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiseTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for DenoiseTraining {
    fn default() -> Self {
        Self {
            steps: 0,
            batch_size: 4,
            learning_rate: 2e-4,
            seed: 0,
        }
    }
}

/// `[0, 255]` RGB → `[-1, 1]` channel-first array.
pub fn image_to_array(img: &image::RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 127.5 - 1.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_is_deterministic() {
        let a = Backbone::toy(64, 8, 7).unwrap();
        let b = Backbone::toy(64, 8, 7).unwrap();
        let c = Backbone::toy(64, 8, 8).unwrap();
        assert_eq!(a.descriptor().weights_fingerprint, b.descriptor().weights_fingerprint);
        assert_ne!(a.descriptor().weights_fingerprint, c.descriptor().weights_fingerprint);
    }

    #[test]
    fn toy_geometry_contract() {
        let b = Backbone::toy(64, 8, 7).unwrap();
        let d = b.descriptor();
        assert_eq!(d.decoder_block_count, 18);
        assert_eq!(d.geometry.len(), 18);
        for w in d.geometry.windows(2) {
            assert!(w[1].height >= w[0].height);
            assert!(w[1].channels <= w[0].channels);
        }
        // each stage transition doubles the spatial size
        let sizes: Vec<usize> = d.geometry.iter().map(|g| g.height).collect();
        let mut stages = sizes.clone();
        stages.dedup();
        assert_eq!(stages, vec![2, 4, 8, 16, 32, 64]);
        for w in stages.windows(2) {
            assert_eq!(w[1], 2 * w[0]);
        }
    }

    #[test]
    fn bad_resolution() {
        assert!(matches!(Backbone::toy(33, 8, 0), Err(Error::Param(_))));
        assert!(matches!(Backbone::toy(16, 8, 0), Err(Error::Param(_))));
    }

    #[test]
    fn activations_match_descriptor_and_are_deterministic() {
        let b = Backbone::toy(64, 8, 7).unwrap();
        let x = seeded_noise((3, 64, 64), 1).mapv(|v| v.clamp(-1.0, 1.0));
        let specs = [BlockSpec::new(6, 100), BlockSpec::new(8, 100)];
        let acts = b.collect_activations(&x, &specs, 3).unwrap();
        for a in &acts {
            let g = b.descriptor().block(a.spec.block).unwrap();
            assert_eq!(a.data.dim(), (g.channels, g.height, g.width));
        }
        let again = b.collect_activations(&x, &specs, 3).unwrap();
        assert_eq!(acts, again);
        assert_eq!(b.current_fingerprint(), b.descriptor().weights_fingerprint);
    }

    #[test]
    fn mixed_timesteps_rejected() {
        let b = Backbone::toy(32, 8, 7).unwrap();
        let x = Array3::zeros((3, 32, 32));
        let err = b
            .collect_activations(&x, &[BlockSpec::new(6, 100), BlockSpec::new(8, 200)], 0)
            .unwrap_err();
        assert!(matches!(err, Error::Param(_)));
        assert!(b.collect_activations(&Array3::zeros((3, 64, 64)), &[BlockSpec::new(6, 100)], 0).is_err());
        assert!(b.collect_activations(&x, &[BlockSpec::new(19, 100)], 0).is_err());
        assert!(b.collect_activations(&x, &[BlockSpec::new(1, 1001)], 0).is_err());
    }

    #[test]
    fn zero_training_steps_is_noop() {
        let b = Backbone::toy(32, 8, 7).unwrap();
        let (b2, trace) = b.train_toy(&[], &DenoiseTraining::default()).unwrap();
        assert!(trace.is_empty());
        assert_eq!(b2.descriptor().weights_fingerprint, b.descriptor().weights_fingerprint);
    }
}
