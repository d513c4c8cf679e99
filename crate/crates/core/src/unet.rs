//! Diffusion UNet in the ADM (guided-diffusion) layout.
//!
//! Module structure and parameter names follow the guided-diffusion
//! `UNetModel` exactly (`input_blocks.{i}.{j}`, `middle_block.{j}`,
//! `output_blocks.{i}.{j}`, `time_embed.{0,2}`, `out.{0,2}`), so a converted
//! checkpoint maps tensor-for-tensor. The toy configuration drops attention,
//! scale-shift norm and resblock up/down; only that subset supports training.
//!
//! Decoder blocks are the entries of `output_blocks`. Public block indices are
//! 1-based from the deepest block upward, i.e. block `b` is `output_blocks[b-1]`,
//! and a captured activation is that block's output (after its residual sum and
//! any upsampling it contains, before the next block's skip concatenation).

use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::nn::{
    avg_pool2, join, silu, silu_backward, silu_vec, timestep_embedding, upsample_nearest2,
    upsample_nearest2_backward, Conv2d, GroupNorm, GroupNormCache, Linear, Params,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub model_channels: usize,
    pub out_channels: usize,
    pub num_res_blocks: usize,
    pub channel_mult: Vec<usize>,
    /// Downsampling factors at which attention layers are inserted.
    pub attention_ds: Vec<usize>,
    pub middle_attention: bool,
    /// Channels per head; `0` means use `num_heads` directly.
    pub num_head_channels: usize,
    pub num_heads: usize,
    pub resblock_updown: bool,
    pub conv_resample: bool,
    pub use_scale_shift_norm: bool,
    pub norm_groups: usize,
}

impl UnetConfig {
    /// Reduced UNet with the ADM decoder-stage pattern: six resolution levels,
    /// two residual blocks per level, eighteen decoder blocks, no attention.
    pub fn toy(resolution: usize, base_channels: usize) -> Self {
        Self {
            image_size: resolution,
            in_channels: 3,
            model_channels: base_channels,
            out_channels: 3,
            num_res_blocks: 2,
            channel_mult: vec![1, 1, 2, 2, 4, 4],
            attention_ds: vec![],
            middle_attention: false,
            num_head_channels: 0,
            num_heads: 1,
            resblock_updown: false,
            conv_resample: true,
            use_scale_shift_norm: false,
            norm_groups: 8,
        }
    }

    /// The ImageNet 256×256 unconditional guided-diffusion model.
    pub fn adm_256_uncond() -> Self {
        Self {
            image_size: 256,
            in_channels: 3,
            model_channels: 256,
            out_channels: 6,
            num_res_blocks: 2,
            channel_mult: vec![1, 1, 2, 2, 4, 4],
            attention_ds: vec![8, 16, 32],
            middle_attention: true,
            num_head_channels: 64,
            num_heads: 4,
            resblock_updown: true,
            conv_resample: true,
            use_scale_shift_norm: true,
            norm_groups: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_mult.len();
        if levels == 0 || self.num_res_blocks == 0 {
            return param("unet needs at least one level and one residual block");
        }
        let ds_max = 1usize << (levels - 1);
        if self.image_size == 0 || self.image_size % ds_max != 0 {
            return param(format!(
                "image size {} not divisible by deepest downsampling factor {ds_max}",
                self.image_size
            ));
        }
        for m in &self.channel_mult {
            let ch = m * self.model_channels;
            if ch == 0 || ch % self.norm_groups != 0 {
                return param(format!("{ch} channels not divisible into {} groups", self.norm_groups));
            }
        }
        Ok(())
    }

    pub fn decoder_block_count(&self) -> usize {
        self.channel_mult.len() * (self.num_res_blocks + 1)
    }

    /// `(channels, spatial size)` of each decoder block output, deepest first.
    pub fn decoder_geometry(&self) -> Vec<(usize, usize)> {
        let levels = self.channel_mult.len();
        let mut ds = 1usize << (levels - 1);
        let mut out = Vec::new();
        for level in (0..levels).rev() {
            for i in 0..=self.num_res_blocks {
                let ch = self.model_channels * self.channel_mult[level];
                if level > 0 && i == self.num_res_blocks {
                    ds /= 2;
                }
                out.push((ch, self.image_size / ds));
            }
        }
        out
    }

    pub fn time_embed_dim(&self) -> usize {
        self.model_channels * 4
    }

    pub fn trainable(&self) -> bool {
        self.attention_ds.is_empty()
            && !self.middle_attention
            && !self.resblock_updown
            && !self.use_scale_shift_norm
    }

    fn heads_for(&self, ch: usize) -> usize {
        if self.num_head_channels > 0 {
            ch / self.num_head_channels
        } else {
            self.num_heads
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Resample {
    None,
    Up,
    Down,
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    in_norm: GroupNorm,
    in_conv: Conv2d,
    emb: Linear,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    skip: Option<Conv2d>,
    resample: Resample,
    scale_shift: bool,
}

struct ResCache {
    x: Array3<f32>,
    gn1: GroupNormCache,
    a1: Array3<f32>,
    s1: Array3<f32>,
    gn2: GroupNormCache,
    a2: Array3<f32>,
    s2: Array3<f32>,
}

impl ResBlock {
    fn new(
        rng: &mut impl Rng,
        cfg: &UnetConfig,
        cin: usize,
        cout: usize,
        resample: Resample,
    ) -> Self {
        let emb_out = if cfg.use_scale_shift_norm { 2 * cout } else { cout };
        Self {
            in_norm: GroupNorm::new(cin, cfg.norm_groups),
            in_conv: Conv2d::new(rng, cin, cout, 3, 1),
            emb: Linear::new(rng, cfg.time_embed_dim(), emb_out),
            out_norm: GroupNorm::new(cout, cfg.norm_groups),
            out_conv: Conv2d::new(rng, cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv2d::new(rng, cin, cout, 1, 1)),
            resample,
            scale_shift: cfg.use_scale_shift_norm,
        }
    }

    fn resample(&self, x: &Array3<f32>) -> Array3<f32> {
        match self.resample {
            Resample::None => x.clone(),
            Resample::Up => upsample_nearest2(x),
            Resample::Down => avg_pool2(x),
        }
    }

    fn forward(&self, x: &Array3<f32>, emb_act: &Array1<f32>) -> Array3<f32> {
        let h = silu(&self.in_norm.forward(x));
        let (h, x) = if self.resample == Resample::None {
            (h, x.clone())
        } else {
            (self.resample(&h), self.resample(x))
        };
        let mut h = self.in_conv.forward(&h);
        let e = self.emb.forward(emb_act);
        let cout = h.dim().0;
        let h = if self.scale_shift {
            let scale = e.slice(s![..cout]).to_owned().insert_axis(Axis(1)).insert_axis(Axis(2));
            let shift = e.slice(s![cout..]).to_owned().insert_axis(Axis(1)).insert_axis(Axis(2));
            let n = self.out_norm.forward(&h);
            let n = n * &(scale + 1.0) + &shift;
            self.out_conv.forward(&silu(&n))
        } else {
            h += &e.view().insert_axis(Axis(1)).insert_axis(Axis(2));
            self.out_conv.forward(&silu(&self.out_norm.forward(&h)))
        };
        match &self.skip {
            Some(conv) => conv.forward(&x) + &h,
            None => x + &h,
        }
    }

    fn forward_train(&self, x: &Array3<f32>, emb_act: &Array1<f32>) -> (Array3<f32>, ResCache) {
        debug_assert!(self.resample == Resample::None && !self.scale_shift);
        let (a1, gn1) = self.in_norm.forward_train(x);
        let s1 = silu(&a1);
        let mut h = self.in_conv.forward(&s1);
        let e = self.emb.forward(emb_act);
        h += &e.view().insert_axis(Axis(1)).insert_axis(Axis(2));
        let (a2, gn2) = self.out_norm.forward_train(&h);
        let s2 = silu(&a2);
        let h = self.out_conv.forward(&s2);
        let out = match &self.skip {
            Some(conv) => conv.forward(x) + &h,
            None => x + &h,
        };
        let cache = ResCache {
            x: x.clone(),
            gn1,
            a1,
            s1,
            gn2,
            a2,
            s2,
        };
        (out, cache)
    }

    fn backward(
        &self,
        cache: &ResCache,
        dy: &Array3<f32>,
        emb_act: &Array1<f32>,
        grad: &mut ResBlock,
        d_emb_act: &mut Array1<f32>,
    ) -> Array3<f32> {
        let ds2 = self.out_conv.backward(&cache.s2, dy, &mut grad.out_conv);
        let da2 = silu_backward(&cache.a2, &ds2);
        let dh = self.out_norm.backward(&cache.gn2, &da2, &mut grad.out_norm);
        let de = dh.sum_axis(Axis(2)).sum_axis(Axis(1));
        *d_emb_act += &self.emb.backward(emb_act, &de, &mut grad.emb);
        let ds1 = self.in_conv.backward(&cache.s1, &dh, &mut grad.in_conv);
        let da1 = silu_backward(&cache.a1, &ds1);
        let mut dx = self.in_norm.backward(&cache.gn1, &da1, &mut grad.in_norm);
        match (&self.skip, grad.skip.as_mut()) {
            (Some(conv), Some(g)) => dx += &conv.backward(&cache.x, dy, g),
            _ => dx += dy,
        }
        dx
    }

    fn visit_names(&self) -> [&'static str; 6] {
        [
            "in_layers.0",
            "in_layers.2",
            "emb_layers.1",
            "out_layers.0",
            "out_layers.3",
            "skip_connection",
        ]
    }
}

impl Params<f32> for ResBlock {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f32>)>) {
        let n = self.visit_names();
        self.in_norm.visit(&join(prefix, n[0]), out);
        self.in_conv.visit(&join(prefix, n[1]), out);
        self.emb.visit(&join(prefix, n[2]), out);
        self.out_norm.visit(&join(prefix, n[3]), out);
        self.out_conv.visit(&join(prefix, n[4]), out);
        if let Some(skip) = &self.skip {
            skip.visit(&join(prefix, n[5]), out);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f32>)>) {
        let n = self.visit_names();
        self.in_norm.visit_mut(&join(prefix, n[0]), out);
        self.in_conv.visit_mut(&join(prefix, n[1]), out);
        self.emb.visit_mut(&join(prefix, n[2]), out);
        self.out_norm.visit_mut(&join(prefix, n[3]), out);
        self.out_conv.visit_mut(&join(prefix, n[4]), out);
        if let Some(skip) = &mut self.skip {
            skip.visit_mut(&join(prefix, n[5]), out);
        }
    }
}

/// 1×1 convolution over a flattened `C×T` sequence (`weight` is `out × in × 1`).
#[derive(Debug, Clone)]
struct Conv1x1 {
    weight: ndarray::Array3<f32>,
    bias: Array1<f32>,
}

impl Conv1x1 {
    fn new(rng: &mut impl Rng, cin: usize, cout: usize) -> Self {
        let bound = 1.0 / (cin as f32).sqrt();
        Self {
            weight: ndarray::Array3::from_shape_fn((cout, cin, 1), |_| rng.random_range(-bound..=bound)),
            bias: Array1::from_shape_fn(cout, |_| rng.random_range(-bound..=bound)),
        }
    }

    fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let (o, i, _) = self.weight.dim();
        let w = self.weight.view().into_shape_with_order((o, i)).unwrap();
        w.dot(x) + &self.bias.view().insert_axis(Axis(1))
    }
}

impl Params<f32> for Conv1x1 {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f32>)>) {
        out.push((join(prefix, "weight"), self.weight.view().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view().into_dyn()));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f32>)>) {
        out.push((join(prefix, "weight"), self.weight.view_mut().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view_mut().into_dyn()));
    }
}

/// Spatial self-attention with the legacy QKV head ordering.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    norm: GroupNorm,
    qkv: Conv1x1,
    proj_out: Conv1x1,
    heads: usize,
}

impl AttentionBlock {
    fn new(rng: &mut impl Rng, cfg: &UnetConfig, ch: usize) -> Self {
        Self {
            norm: GroupNorm::new(ch, cfg.norm_groups),
            qkv: Conv1x1::new(rng, ch, 3 * ch),
            proj_out: Conv1x1::new(rng, ch, ch),
            heads: cfg.heads_for(ch).max(1),
        }
    }

    fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        let (c, h, w) = x.dim();
        let t = h * w;
        let xn = self.norm.forward(x).into_shape_with_order((c, t)).unwrap();
        let qkv = self.qkv.forward(&xn);
        let ch = c / self.heads;
        let scale = 1.0 / (ch as f32).sqrt().sqrt();
        let mut a = Array2::<f32>::zeros((c, t));
        for head in 0..self.heads {
            // legacy layout: each head owns a contiguous [q; k; v] slab of 3·ch rows
            let base = head * 3 * ch;
            let q = qkv.slice(s![base..base + ch, ..]).mapv(|v| v * scale);
            let k = qkv.slice(s![base + ch..base + 2 * ch, ..]).mapv(|v| v * scale);
            let v = qkv.slice(s![base + 2 * ch..base + 3 * ch, ..]);
            let mut weight = q.t().dot(&k);
            for mut row in weight.rows_mut() {
                let m = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|v| (v - m).exp());
                let z = row.sum();
                row.mapv_inplace(|v| v / z);
            }
            let out = v.dot(&weight.t());
            a.slice_mut(s![head * ch..(head + 1) * ch, ..]).assign(&out);
        }
        let hproj = self.proj_out.forward(&a);
        x + &hproj.into_shape_with_order((c, h, w)).unwrap()
    }
}

impl Params<f32> for AttentionBlock {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f32>)>) {
        self.norm.visit(&join(prefix, "norm"), out);
        self.qkv.visit(&join(prefix, "qkv"), out);
        self.proj_out.visit(&join(prefix, "proj_out"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f32>)>) {
        self.norm.visit_mut(&join(prefix, "norm"), out);
        self.qkv.visit_mut(&join(prefix, "qkv"), out);
        self.proj_out.visit_mut(&join(prefix, "proj_out"), out);
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Conv(Conv2d),
    Res(ResBlock),
    Attn(AttentionBlock),
    /// strided conv (`op`) or 2×2 average pool
    Down(Option<Conv2d>),
    /// nearest ×2 followed by an optional conv (`conv`)
    Up(Option<Conv2d>),
}

enum LayerCache {
    Conv(Array3<f32>),
    Res(ResCache),
    Down(Array3<f32>),
    Up(Array3<f32>),
}

impl Layer {
    fn forward(&self, x: &Array3<f32>, emb_act: &Array1<f32>) -> Array3<f32> {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::Res(r) => r.forward(x, emb_act),
            Layer::Attn(a) => a.forward(x),
            Layer::Down(Some(c)) => c.forward(x),
            Layer::Down(None) => avg_pool2(x),
            Layer::Up(Some(c)) => c.forward(&upsample_nearest2(x)),
            Layer::Up(None) => upsample_nearest2(x),
        }
    }

    fn forward_train(&self, x: &Array3<f32>, emb_act: &Array1<f32>) -> (Array3<f32>, LayerCache) {
        match self {
            Layer::Conv(c) => (c.forward(x), LayerCache::Conv(x.clone())),
            Layer::Res(r) => {
                let (y, cache) = r.forward_train(x, emb_act);
                (y, LayerCache::Res(cache))
            }
            Layer::Down(_) => (self.forward(x, emb_act), LayerCache::Down(x.clone())),
            Layer::Up(Some(c)) => {
                let up = upsample_nearest2(x);
                (c.forward(&up), LayerCache::Up(up))
            }
            Layer::Up(None) => (upsample_nearest2(x), LayerCache::Up(Array3::zeros((0, 0, 0)))),
            Layer::Attn(_) => unreachable!("attention layers are not trainable"),
        }
    }

    fn backward(
        &self,
        cache: &LayerCache,
        dy: &Array3<f32>,
        emb_act: &Array1<f32>,
        grad: &mut Layer,
        d_emb_act: &mut Array1<f32>,
    ) -> Array3<f32> {
        match (self, cache, grad) {
            (Layer::Conv(c), LayerCache::Conv(x), Layer::Conv(g)) => c.backward(x, dy, g),
            (Layer::Res(r), LayerCache::Res(rc), Layer::Res(g)) => {
                r.backward(rc, dy, emb_act, g, d_emb_act)
            }
            (Layer::Down(Some(c)), LayerCache::Down(x), Layer::Down(Some(g))) => c.backward(x, dy, g),
            (Layer::Down(None), LayerCache::Down(_), _) => crate::nn::avg_pool2_backward(dy),
            (Layer::Up(Some(c)), LayerCache::Up(up), Layer::Up(Some(g))) => {
                upsample_nearest2_backward(&c.backward(up, dy, g))
            }
            (Layer::Up(None), _, _) => upsample_nearest2_backward(dy),
            _ => unreachable!("layer/cache/grad structure mismatch"),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f32>)>) {
        match self {
            Layer::Conv(c) => c.visit(prefix, out),
            Layer::Res(r) => r.visit(prefix, out),
            Layer::Attn(a) => a.visit(prefix, out),
            Layer::Down(Some(c)) => c.visit(&join(prefix, "op"), out),
            Layer::Up(Some(c)) => c.visit(&join(prefix, "conv"), out),
            Layer::Down(None) | Layer::Up(None) => {}
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f32>)>) {
        match self {
            Layer::Conv(c) => c.visit_mut(prefix, out),
            Layer::Res(r) => r.visit_mut(prefix, out),
            Layer::Attn(a) => a.visit_mut(prefix, out),
            Layer::Down(Some(c)) => c.visit_mut(&join(prefix, "op"), out),
            Layer::Up(Some(c)) => c.visit_mut(&join(prefix, "conv"), out),
            Layer::Down(None) | Layer::Up(None) => {}
        }
    }
}

type Block = Vec<Layer>;

fn block_forward(block: &Block, x: &Array3<f32>, emb_act: &Array1<f32>) -> Array3<f32> {
    let mut h = block[0].forward(x, emb_act);
    for layer in &block[1..] {
        h = layer.forward(&h, emb_act);
    }
    h
}

fn block_forward_train(
    block: &Block,
    x: &Array3<f32>,
    emb_act: &Array1<f32>,
) -> (Array3<f32>, Vec<LayerCache>) {
    let mut caches = Vec::with_capacity(block.len());
    let mut h = x.clone();
    for layer in block {
        let (y, c) = layer.forward_train(&h, emb_act);
        caches.push(c);
        h = y;
    }
    (h, caches)
}

fn block_backward(
    block: &Block,
    caches: &[LayerCache],
    dy: Array3<f32>,
    emb_act: &Array1<f32>,
    grad: &mut Block,
    d_emb_act: &mut Array1<f32>,
) -> Array3<f32> {
    let mut d = dy;
    for ((layer, cache), g) in block.iter().zip(caches).zip(grad.iter_mut()).rev() {
        d = layer.backward(cache, &d, emb_act, g, d_emb_act);
    }
    d
}

fn visit_block<'a>(block: &'a Block, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f32>)>) {
    for (j, layer) in block.iter().enumerate() {
        layer.visit(&join(prefix, &j.to_string()), out);
    }
}

fn visit_block_mut<'a>(
    block: &'a mut Block,
    prefix: &str,
    out: &mut Vec<(String, ArrayViewMutD<'a, f32>)>,
) {
    for (j, layer) in block.iter_mut().enumerate() {
        layer.visit_mut(&join(prefix, &j.to_string()), out);
    }
}

#[derive(Debug, Clone)]
pub struct Unet {
    config: UnetConfig,
    time_embed: (Linear, Linear),
    input_blocks: Vec<Block>,
    middle_block: Block,
    output_blocks: Vec<Block>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl Unet {
    pub fn new(config: UnetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let mc = cfg.model_channels;
        let ted = cfg.time_embed_dim();
        let time_embed = (Linear::new(rng, mc, ted), Linear::new(rng, ted, ted));

        let mut ch = mc * cfg.channel_mult[0];
        let input_ch = ch;
        let mut input_blocks: Vec<Block> = vec![vec![Layer::Conv(Conv2d::new(rng, cfg.in_channels, ch, 3, 1))]];
        let mut chans = vec![ch];
        let mut ds = 1;
        let levels = cfg.channel_mult.len();
        for (level, &mult) in cfg.channel_mult.iter().enumerate() {
            for _ in 0..cfg.num_res_blocks {
                let out = mult * mc;
                let mut layers = vec![Layer::Res(ResBlock::new(rng, cfg, ch, out, Resample::None))];
                ch = out;
                if cfg.attention_ds.contains(&ds) {
                    layers.push(Layer::Attn(AttentionBlock::new(rng, cfg, ch)));
                }
                input_blocks.push(layers);
                chans.push(ch);
            }
            if level + 1 != levels {
                let down = if cfg.resblock_updown {
                    Layer::Res(ResBlock::new(rng, cfg, ch, ch, Resample::Down))
                } else if cfg.conv_resample {
                    Layer::Down(Some(Conv2d::new(rng, ch, ch, 3, 2)))
                } else {
                    Layer::Down(None)
                };
                input_blocks.push(vec![down]);
                chans.push(ch);
                ds *= 2;
            }
        }

        let mut middle_block = vec![Layer::Res(ResBlock::new(rng, cfg, ch, ch, Resample::None))];
        if cfg.middle_attention {
            middle_block.push(Layer::Attn(AttentionBlock::new(rng, cfg, ch)));
        }
        middle_block.push(Layer::Res(ResBlock::new(rng, cfg, ch, ch, Resample::None)));

        let mut output_blocks = Vec::new();
        for (level, &mult) in cfg.channel_mult.iter().enumerate().rev() {
            for i in 0..=cfg.num_res_blocks {
                let skip_ch = chans.pop().expect("skip channel bookkeeping");
                let out = mc * mult;
                let mut layers = vec![Layer::Res(ResBlock::new(rng, cfg, ch + skip_ch, out, Resample::None))];
                ch = out;
                if cfg.attention_ds.contains(&ds) {
                    layers.push(Layer::Attn(AttentionBlock::new(rng, cfg, ch)));
                }
                if level > 0 && i == cfg.num_res_blocks {
                    let up = if cfg.resblock_updown {
                        Layer::Res(ResBlock::new(rng, cfg, ch, ch, Resample::Up))
                    } else if cfg.conv_resample {
                        Layer::Up(Some(Conv2d::new(rng, ch, ch, 3, 1)))
                    } else {
                        Layer::Up(None)
                    };
                    layers.push(up);
                    ds /= 2;
                }
                output_blocks.push(layers);
            }
        }
        let out_norm = GroupNorm::new(ch, cfg.norm_groups);
        let out_conv = Conv2d::new(rng, input_ch, cfg.out_channels, 3, 1);
        Ok(Self {
            config,
            time_embed,
            input_blocks,
            middle_block,
            output_blocks,
            out_norm,
            out_conv,
        })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.config
    }

    fn embed(&self, t: f32) -> (Array1<f32>, Array1<f32>, Array1<f32>) {
        let sin = timestep_embedding(t, self.config.model_channels);
        let pre = self.time_embed.0.forward(&sin);
        let emb = self.time_embed.1.forward(&silu_vec(&pre));
        (sin, pre, emb)
    }

    fn check_input(&self, x: &Array3<f32>) -> Result<()> {
        let c = &self.config;
        if x.dim() != (c.in_channels, c.image_size, c.image_size) {
            return param(format!(
                "input shape {:?} does not match {}x{}x{}",
                x.dim(),
                c.in_channels,
                c.image_size,
                c.image_size
            ));
        }
        Ok(())
    }

    /// Runs the network on `x` at model timestep `t`, returning the outputs of
    /// the requested decoder blocks (0-based `output_blocks` indices, sorted
    /// ascending). Evaluation stops after the last requested block.
    pub fn decoder_features(&self, x: &Array3<f32>, t: f32, blocks: &[usize]) -> Result<Vec<Array3<f32>>> {
        self.check_input(x)?;
        let last = match blocks.iter().max() {
            Some(&b) if b < self.output_blocks.len() => b,
            Some(&b) => return param(format!("decoder block {b} out of range")),
            None => return Ok(vec![]),
        };
        let (_, _, emb) = self.embed(t);
        let emb_act = silu_vec(&emb);
        let mut hs = Vec::with_capacity(self.input_blocks.len());
        let mut h = x.clone();
        for block in &self.input_blocks {
            h = block_forward(block, &h, &emb_act);
            hs.push(h.clone());
        }
        h = block_forward(&self.middle_block, &h, &emb_act);
        let mut captured = Vec::new();
        for (i, block) in self.output_blocks.iter().enumerate().take(last + 1) {
            let skip = hs.pop().expect("skip stack");
            let cat = concatenate(Axis(0), &[h.view(), skip.view()]).unwrap();
            h = block_forward(block, &cat, &emb_act);
            if blocks.contains(&i) {
                captured.push(h.clone());
            }
        }
        Ok(captured)
    }

    /// Full network output (noise prediction, plus variance channels if learned).
    pub fn forward(&self, x: &Array3<f32>, t: f32) -> Result<Array3<f32>> {
        self.check_input(x)?;
        let (_, _, emb) = self.embed(t);
        let emb_act = silu_vec(&emb);
        let mut hs = Vec::new();
        let mut h = x.clone();
        for block in &self.input_blocks {
            h = block_forward(block, &h, &emb_act);
            hs.push(h.clone());
        }
        h = block_forward(&self.middle_block, &h, &emb_act);
        for block in &self.output_blocks {
            let skip = hs.pop().expect("skip stack");
            let cat = concatenate(Axis(0), &[h.view(), skip.view()]).unwrap();
            h = block_forward(block, &cat, &emb_act);
        }
        Ok(self.out_conv.forward(&silu(&self.out_norm.forward(&h))))
    }

    /// Mean squared error between predicted and true noise for one noised
    /// sample, with the gradient of that loss for every parameter.
    pub fn eps_loss_grad(&self, x_t: &Array3<f32>, t: f32, eps: &Array3<f32>) -> Result<(f32, Unet)> {
        if !self.config.trainable() {
            return param("this UNet configuration has no backward pass");
        }
        self.check_input(x_t)?;
        let (sin, pre, emb) = self.embed(t);
        let emb_act = silu_vec(&emb);

        let mut in_caches = Vec::new();
        let mut skip_ch = Vec::new();
        let mut hs = Vec::new();
        let mut h = x_t.clone();
        for block in &self.input_blocks {
            let (y, c) = block_forward_train(block, &h, &emb_act);
            in_caches.push(c);
            skip_ch.push(y.dim().0);
            hs.push(y.clone());
            h = y;
        }
        let (mut h, mid_cache) = block_forward_train(&self.middle_block, &h, &emb_act);
        let mut out_caches = Vec::new();
        let mut split = Vec::new();
        for block in &self.output_blocks {
            let skip = hs.pop().unwrap();
            split.push(h.dim().0);
            let cat = concatenate(Axis(0), &[h.view(), skip.view()]).unwrap();
            let (y, c) = block_forward_train(block, &cat, &emb_act);
            out_caches.push(c);
            h = y;
        }
        let (a, gn_cache) = self.out_norm.forward_train(&h);
        let s_act = silu(&a);
        let out = self.out_conv.forward(&s_act);
        let pred = out.slice(s![..eps.dim().0, .., ..]);
        let n = eps.len() as f32;
        let diff = &pred - eps;
        let loss = diff.mapv(|v| v * v).sum() / n;

        let mut grad = self.zeroed();
        let mut d_out = Array3::<f32>::zeros(out.dim());
        d_out
            .slice_mut(s![..eps.dim().0, .., ..])
            .assign(&diff.mapv(|v| 2.0 * v / n));
        let mut d_emb_act = Array1::<f32>::zeros(emb_act.len());
        let ds = self.out_conv.backward(&s_act, &d_out, &mut grad.out_conv);
        let da = silu_backward(&a, &ds);
        let mut dh = self.out_norm.backward(&gn_cache, &da, &mut grad.out_norm);

        let mut d_skips: Vec<Option<Array3<f32>>> = vec![None; self.input_blocks.len()];
        let n_in = self.input_blocks.len();
        for (i, block) in self.output_blocks.iter().enumerate().rev() {
            let dcat = block_backward(
                block,
                &out_caches[i],
                dh,
                &emb_act,
                &mut grad.output_blocks[i],
                &mut d_emb_act,
            );
            let hc = split[i];
            dh = dcat.slice(s![..hc, .., ..]).to_owned();
            // output block i consumed the skip pushed by input block n_in-1-i
            d_skips[n_in - 1 - i] = Some(dcat.slice(s![hc.., .., ..]).to_owned());
        }
        let mut d = block_backward(
            &self.middle_block,
            &mid_cache,
            dh,
            &emb_act,
            &mut grad.middle_block,
            &mut d_emb_act,
        );
        for i in (0..n_in).rev() {
            if let Some(ds) = d_skips[i].take() {
                d += &ds;
            }
            d = block_backward(
                &self.input_blocks[i],
                &in_caches[i],
                d,
                &emb_act,
                &mut grad.input_blocks[i],
                &mut d_emb_act,
            );
        }
        let d_emb = silu_backward(&emb, &d_emb_act);
        let d_pre_act = self
            .time_embed
            .1
            .backward(&silu_vec(&pre), &d_emb, &mut grad.time_embed.1);
        let d_pre = silu_backward(&pre, &d_pre_act);
        self.time_embed.0.backward(&sin, &d_pre, &mut grad.time_embed.0);
        Ok((loss, grad))
    }
}

impl Params<f32> for Unet {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f32>)>) {
        self.time_embed.0.visit(&join(prefix, "time_embed.0"), out);
        self.time_embed.1.visit(&join(prefix, "time_embed.2"), out);
        for (i, b) in self.input_blocks.iter().enumerate() {
            visit_block(b, &join(prefix, &format!("input_blocks.{i}")), out);
        }
        visit_block(&self.middle_block, &join(prefix, "middle_block"), out);
        for (i, b) in self.output_blocks.iter().enumerate() {
            visit_block(b, &join(prefix, &format!("output_blocks.{i}")), out);
        }
        self.out_norm.visit(&join(prefix, "out.0"), out);
        self.out_conv.visit(&join(prefix, "out.2"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f32>)>) {
        self.time_embed.0.visit_mut(&join(prefix, "time_embed.0"), out);
        self.time_embed.1.visit_mut(&join(prefix, "time_embed.2"), out);
        for (i, b) in self.input_blocks.iter_mut().enumerate() {
            visit_block_mut(b, &join(prefix, &format!("input_blocks.{i}")), out);
        }
        visit_block_mut(&mut self.middle_block, &join(prefix, "middle_block"), out);
        for (i, b) in self.output_blocks.iter_mut().enumerate() {
            visit_block_mut(b, &join(prefix, &format!("output_blocks.{i}")), out);
        }
        self.out_norm.visit_mut(&join(prefix, "out.0"), out);
        self.out_conv.visit_mut(&join(prefix, "out.2"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adm_geometry() {
        let cfg = UnetConfig::adm_256_uncond();
        let g = cfg.decoder_geometry();
        assert_eq!(g.len(), 18);
        assert_eq!(g[0], (1024, 8));
        assert_eq!(g[5], (1024, 32)); // block 6
        assert_eq!(g[7], (512, 32)); // block 8
        assert_eq!(g[17], (256, 256));
    }

    #[test]
    fn toy_geometry_matches_actual_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = UnetConfig::toy(32, 8);
        let net = Unet::new(cfg.clone(), &mut rng).unwrap();
        let x = Array3::from_shape_fn((3, 32, 32), |_| rng.random_range(-1.0f32..1.0));
        let all: Vec<usize> = (0..18).collect();
        let feats = net.decoder_features(&x, 10.0, &all).unwrap();
        for (f, (c, s)) in feats.iter().zip(cfg.decoder_geometry()) {
            assert_eq!(f.dim(), (c, s, s));
        }
        assert_eq!(net.forward(&x, 10.0).unwrap().dim(), (3, 32, 32));
    }

    #[test]
    fn adm_parameter_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = UnetConfig::adm_256_uncond();
        // shrink widths but keep the structural switches
        cfg.model_channels = 32;
        cfg.norm_groups = 8;
        cfg.num_head_channels = 16;
        cfg.image_size = 64;
        let net = Unet::new(cfg, &mut rng).unwrap();
        let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
        for want in [
            "time_embed.0.weight",
            "input_blocks.0.0.weight",
            "input_blocks.3.0.in_layers.0.weight",
            "middle_block.1.qkv.weight",
            "output_blocks.2.2.emb_layers.1.weight",
            "out.2.bias",
        ] {
            assert!(names.iter().any(|n| n == want), "missing {want}");
        }
        let x = Array3::zeros((3, 64, 64));
        assert_eq!(net.forward(&x, 3.0).unwrap().dim(), (6, 64, 64));
    }

    #[test]
    fn eps_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Unet::new(UnetConfig::toy(32, 8), &mut rng).unwrap();
        let x = Array3::from_shape_fn((3, 32, 32), |_| rng.random_range(-1.0f32..1.0));
        let eps = Array3::from_shape_fn((3, 32, 32), |_| rng.random_range(-1.0f32..1.0));
        let (_, grad) = net.eps_loss_grad(&x, 40.0, &eps).unwrap();
        let names = ["out.2.bias", "output_blocks.4.0.in_layers.2.weight", "input_blocks.1.0.emb_layers.1.bias", "time_embed.0.weight"];
        for name in names {
            let idx = 1;
            let analytic = grad
                .named_params()
                .into_iter()
                .find(|(n, _)| n == name)
                .unwrap()
                .1
                .iter()
                .nth(idx)
                .copied()
                .unwrap();
            let h = 1e-2f32;
            let eval = |delta: f32| {
                let mut n2 = net.clone();
                for (n, mut p) in n2.named_params_mut() {
                    if n == name {
                        *p.iter_mut().nth(idx).unwrap() += delta;
                    }
                }
                let out = n2.forward(&x, 40.0).unwrap();
                (&out - &eps).mapv(|v| (v * v) as f64).sum() / eps.len() as f64
            };
            let numeric = ((eval(h) - eval(-h)) / (2.0 * h as f64)) as f32;
            let tol = 0.05 * analytic.abs().max(numeric.abs()) + 1e-4;
            assert!((analytic - numeric).abs() < tol, "{name}: {analytic} vs {numeric}");
        }
    }
}
