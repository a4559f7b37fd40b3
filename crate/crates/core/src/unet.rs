//! Shared-bottleneck two-channel U-Net.
//!
//! Image and mask enter as one 2-channel tensor and leave through one
//! output head, so every feature, including the deepest one, is shared by
//! both modalities. Layout per level: `res_blocks_per_level` residual blocks
//! (self-attention after each on attended levels), then a stride-2
//! convolution except at the deepest level. The middle is
//! res → attention → res at the bottleneck resolution `H / 2^(levels−1)`.
//! The decoder mirrors the encoder with one extra block per level, each
//! consuming a concatenated encoder skip, and upsamples by nearest
//! neighbour followed by a convolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{ConditionToken, EmbeddingCache, Embedder, DEFAULT_Z_BINS};
use crate::error::{Error, Result};
use crate::nn::{
    silu, silu_backward, upsample2x, upsample2x_backward, Act, AttentionCache, Conv2d, GroupNorm, GroupNormCache,
    Init, Linear, Params, SelfAttention,
};
use crate::real::Real;

pub const IN_CHANNELS: usize = 2;
pub const OUT_CHANNELS: usize = 2;
const WEIGHT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub image_size: usize,
    pub level_channels: Vec<usize>,
    pub res_blocks_per_level: usize,
    pub norm_groups: usize,
    /// Number of deepest levels that carry self-attention.
    pub attention_levels: usize,
    pub attention_head_channels: usize,
    pub embedding_width: usize,
    pub pe_width: usize,
    #[serde(default = "default_z_bins")]
    pub z_bins: usize,
}

fn default_z_bins() -> usize {
    DEFAULT_Z_BINS
}

impl UNetConfig {
    /// 160×160 slices, channels [64, 128, 256, 256].
    pub fn full() -> Self {
        Self {
            image_size: 160,
            level_channels: vec![64, 128, 256, 256],
            res_blocks_per_level: 2,
            norm_groups: 32,
            attention_levels: 2,
            attention_head_channels: 32,
            embedding_width: 256,
            pe_width: 128,
            z_bins: DEFAULT_Z_BINS,
        }
    }

    /// 32×32 desk-scale variant, channels [16, 32, 64, 64].
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            level_channels: vec![16, 32, 64, 64],
            res_blocks_per_level: 2,
            norm_groups: 8,
            attention_levels: 2,
            attention_head_channels: 32,
            embedding_width: 64,
            pe_width: 32,
            z_bins: DEFAULT_Z_BINS,
        }
    }

    pub fn levels(&self) -> usize {
        self.level_channels.len()
    }

    pub fn has_attention(&self, level: usize) -> bool {
        level + self.attention_levels >= self.levels()
    }

    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> (self.levels() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.levels();
        if levels == 0 {
            return Err(Error::Config("unet.level_channels must not be empty".into()));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << (levels - 1)) {
            return Err(Error::Config(format!(
                "unet.image_size {} must be divisible by 2^{}",
                self.image_size,
                levels - 1
            )));
        }
        if self.res_blocks_per_level == 0 || self.norm_groups == 0 || self.attention_head_channels == 0 {
            return Err(Error::Config(
                "unet.res_blocks_per_level, norm_groups and attention_head_channels must be positive".into(),
            ));
        }
        if self.attention_levels > levels {
            return Err(Error::Config(format!(
                "unet.attention_levels {} exceeds level count {levels}",
                self.attention_levels
            )));
        }
        if self.embedding_width == 0 || self.pe_width == 0 || !self.pe_width.is_multiple_of(2) {
            return Err(Error::Config("unet.embedding_width must be positive and unet.pe_width even".into()));
        }
        if self.z_bins == 0 {
            return Err(Error::Config("unet.z_bins must be positive".into()));
        }
        for (i, &c) in self.level_channels.iter().enumerate() {
            if c == 0 || c % self.norm_groups != 0 {
                return Err(Error::Config(format!(
                    "unet.level_channels[{i}] = {c} is not divisible by norm_groups {}",
                    self.norm_groups
                )));
            }
            if self.has_attention(i) && c % self.attention_head_channels != 0 {
                return Err(Error::Config(format!(
                    "unet.level_channels[{i}] = {c} is not divisible by attention_head_channels {}",
                    self.attention_head_channels
                )));
            }
        }
        Ok(())
    }

    /// Channel bookkeeping shared by the builder and [`param_count`].
    fn walk(&self, mut visit: impl FnMut(Block)) {
        let ch = &self.level_channels;
        let levels = ch.len();
        let nres = self.res_blocks_per_level;
        visit(Block::ConvIn(ch[0]));
        let mut skips = vec![ch[0]];
        let mut cur = ch[0];
        for (i, &c) in ch.iter().enumerate() {
            for _ in 0..nres {
                visit(Block::Res(cur, c));
                if self.has_attention(i) {
                    visit(Block::Attn(c));
                }
                cur = c;
                skips.push(c);
            }
            if i + 1 < levels {
                visit(Block::Down(c));
                skips.push(c);
            }
        }
        visit(Block::Res(cur, cur));
        visit(Block::Attn(cur));
        visit(Block::Res(cur, cur));
        for i in (0..levels).rev() {
            let c = ch[i];
            for _ in 0..=nres {
                let skip = skips.pop().expect("skip stack balanced");
                visit(Block::Res(cur + skip, c));
                if self.has_attention(i) {
                    visit(Block::Attn(c));
                }
                cur = c;
            }
            if i > 0 {
                visit(Block::Up(c));
            }
        }
        visit(Block::Out(cur));
    }
}

enum Block {
    ConvIn(usize),
    Res(usize, usize),
    Attn(usize),
    Down(usize),
    Up(usize),
    Out(usize),
}

/// Learnable scalars in the full denoiser (embeddings included), counted
/// from the architecture description alone.
pub fn param_count(cfg: &UNetConfig) -> usize {
    let d = cfg.embedding_width;
    let mut total = Embedder::param_count(d, cfg.pe_width);
    cfg.walk(|b| {
        total += match b {
            Block::ConvIn(c) => Conv2d::param_count(IN_CHANNELS, c, 3),
            Block::Res(cin, cout) => ResBlock::param_count(cin, cout, d),
            Block::Attn(c) => SelfAttention::param_count(c),
            Block::Down(c) | Block::Up(c) => Conv2d::param_count(c, c, 3),
            Block::Out(c) => GroupNorm::param_count(c) + Conv2d::param_count(c, OUT_CHANNELS, 3),
        }
    });
    total
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    cout: usize,
}

#[derive(Debug, Clone)]
struct ResCache<T> {
    x: Act<T>,
    n1: GroupNormCache<T>,
    pre1: Act<T>,
    a1: Act<T>,
    n2: GroupNormCache<T>,
    pre2: Act<T>,
    a2: Act<T>,
}

impl ResBlock {
    fn new<T: Real, R: Rng + ?Sized>(p: &mut Params<T>, name: &str, cin: usize, cout: usize, cfg: &UNetConfig, rng: &mut R) -> Self {
        let init = Init::Normal(WEIGHT_STD);
        let g = cfg.norm_groups;
        Self {
            norm1: GroupNorm::new(p, &format!("{name}.norm1"), g, cin, rng),
            conv1: Conv2d::new(p, &format!("{name}.conv1"), cin, cout, 3, 1, init, rng),
            emb_proj: Linear::new(p, &format!("{name}.emb"), cfg.embedding_width, cout, init, rng),
            norm2: GroupNorm::new(p, &format!("{name}.norm2"), g, cout, rng),
            conv2: Conv2d::new(p, &format!("{name}.conv2"), cout, cout, 3, 1, init, rng),
            skip: (cin != cout).then(|| Conv2d::new(p, &format!("{name}.skip"), cin, cout, 1, 1, init, rng)),
            cout,
        }
    }

    /// Hand count: two norms, two 3×3 convolutions, the embedding projection
    /// and a 1×1 shortcut when the width changes.
    pub fn param_count(cin: usize, cout: usize, d: usize) -> usize {
        let skip = if cin != cout { Conv2d::param_count(cin, cout, 1) } else { 0 };
        GroupNorm::param_count(cin)
            + Conv2d::param_count(cin, cout, 3)
            + Linear::param_count(d, cout)
            + GroupNorm::param_count(cout)
            + Conv2d::param_count(cout, cout, 3)
            + skip
    }

    fn forward<T: Real>(&self, p: &Params<T>, x: Act<T>, semb: &[T]) -> (Act<T>, ResCache<T>) {
        let (pre1, n1) = self.norm1.forward(p, &x);
        let a1 = Act::from_vec(pre1.c, pre1.b, pre1.h, pre1.w, silu(&pre1.data));
        let mut h = self.conv1.forward(p, &a1);
        let eproj = self.emb_proj.forward(p, semb, x.b);
        for c in 0..self.cout {
            for b in 0..x.b {
                let shift = eproj[b * self.cout + c];
                h.plane_mut(c, b).iter_mut().for_each(|v| *v += shift);
            }
        }
        let (pre2, n2) = self.norm2.forward(p, &h);
        let a2 = Act::from_vec(pre2.c, pre2.b, pre2.h, pre2.w, silu(&pre2.data));
        let mut out = self.conv2.forward(p, &a2);
        match &self.skip {
            Some(conv) => out.add_assign(&conv.forward(p, &x)),
            None => out.add_assign(&x),
        }
        (
            out,
            ResCache {
                x,
                n1,
                pre1,
                a1,
                n2,
                pre2,
                a2,
            },
        )
    }

    fn backward<T: Real>(&self, p: &Params<T>, c: &ResCache<T>, dy: &Act<T>, semb: &[T], dsemb: &mut [T], g: &mut Params<T>) -> Act<T> {
        let da2 = self.conv2.backward(p, &c.a2, dy, g);
        let dpre2 = Act::from_vec(da2.c, da2.b, da2.h, da2.w, silu_backward(&c.pre2.data, &da2.data));
        let dh = self.norm2.backward(p, &c.n2, &dpre2, g);
        let rows = dy.b;
        let mut deproj = vec![T::ZERO; rows * self.cout];
        for ch in 0..self.cout {
            for b in 0..rows {
                deproj[b * self.cout + ch] = dh.plane(ch, b).iter().copied().sum();
            }
        }
        let ds = self.emb_proj.backward(p, semb, &deproj, rows, g);
        for (a, b) in dsemb.iter_mut().zip(ds) {
            *a += b;
        }
        let da1 = self.conv1.backward(p, &c.a1, &dh, g);
        let dpre1 = Act::from_vec(da1.c, da1.b, da1.h, da1.w, silu_backward(&c.pre1.data, &da1.data));
        let mut dx = self.norm1.backward(p, &c.n1, &dpre1, g);
        match &self.skip {
            Some(conv) => dx.add_assign(&conv.backward(p, &c.x, dy, g)),
            None => dx.add_assign(dy),
        }
        dx
    }
}

#[derive(Debug, Clone)]
struct Stage {
    res: ResBlock,
    attn: Option<SelfAttention>,
}

#[derive(Debug, Clone)]
struct StageCache<T> {
    res: ResCache<T>,
    attn: Option<AttentionCache<T>>,
}

impl Stage {
    fn forward<T: Real>(&self, p: &Params<T>, x: Act<T>, semb: &[T]) -> (Act<T>, StageCache<T>) {
        let (h, res) = self.res.forward(p, x, semb);
        match &self.attn {
            Some(a) => {
                let (h2, ac) = a.forward(p, &h);
                (h2, StageCache { res, attn: Some(ac) })
            }
            None => (h, StageCache { res, attn: None }),
        }
    }

    fn backward<T: Real>(&self, p: &Params<T>, c: &StageCache<T>, dy: Act<T>, semb: &[T], dsemb: &mut [T], g: &mut Params<T>) -> Act<T> {
        let dh = match (&self.attn, &c.attn) {
            (Some(a), Some(ac)) => a.backward(p, ac, &dy, g),
            _ => dy,
        };
        self.res.backward(p, &c.res, &dh, semb, dsemb, g)
    }
}

#[derive(Debug, Clone)]
struct DownLevel {
    stages: Vec<Stage>,
    down: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct UpLevel {
    stages: Vec<Stage>,
    up: Option<Conv2d>,
}

/// The U-Net body taking an already-built embedding `e`.
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    conv_in: Conv2d,
    downs: Vec<DownLevel>,
    mid: [Stage; 2],
    ups: Vec<UpLevel>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

/// Activations kept from [`UNet::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct UNetTape<T> {
    x: Act<T>,
    semb: Vec<T>,
    e: Vec<T>,
    skips: Vec<Act<T>>,
    down: Vec<Vec<StageCache<T>>>,
    mid: Vec<StageCache<T>>,
    up: Vec<Vec<StageCache<T>>>,
    up_inputs: Vec<Option<Act<T>>>,
    norm_out: GroupNormCache<T>,
    pre_out: Act<T>,
    act_out: Act<T>,
    bottleneck: (usize, usize, usize),
}

impl<T> UNetTape<T> {
    /// `(channels, height, width)` of the deepest feature map.
    pub fn bottleneck_dims(&self) -> (usize, usize, usize) {
        self.bottleneck
    }
}

impl UNet {
    fn new<T: Real, R: Rng + ?Sized>(p: &mut Params<T>, cfg: &UNetConfig, rng: &mut R) -> Self {
        let init = Init::Normal(WEIGHT_STD);
        let ch = &cfg.level_channels;
        let levels = ch.len();
        let nres = cfg.res_blocks_per_level;
        let attn = |p: &mut Params<T>, name: String, c: usize, rng: &mut R| {
            SelfAttention::new(p, &name, c, cfg.norm_groups, cfg.attention_head_channels, init, rng)
        };
        let conv_in = Conv2d::new(p, "conv_in", IN_CHANNELS, ch[0], 3, 1, init, rng);
        let mut skips = vec![ch[0]];
        let mut cur = ch[0];
        let mut downs = Vec::with_capacity(levels);
        for (i, &c) in ch.iter().enumerate() {
            let mut stages = Vec::with_capacity(nres);
            for j in 0..nres {
                let name = format!("down.{i}.{j}");
                let res = ResBlock::new(p, &format!("{name}.res"), cur, c, cfg, rng);
                let attn = cfg.has_attention(i).then(|| attn(p, format!("{name}.attn"), c, rng));
                stages.push(Stage { res, attn });
                cur = c;
                skips.push(c);
            }
            let down = (i + 1 < levels).then(|| {
                skips.push(c);
                Conv2d::new(p, &format!("down.{i}.downsample"), c, c, 3, 2, init, rng)
            });
            downs.push(DownLevel { stages, down });
        }
        let mid = [
            Stage {
                res: ResBlock::new(p, "mid.0.res", cur, cur, cfg, rng),
                attn: Some(attn(p, "mid.0.attn".into(), cur, rng)),
            },
            Stage {
                res: ResBlock::new(p, "mid.1.res", cur, cur, cfg, rng),
                attn: None,
            },
        ];
        let mut ups = Vec::with_capacity(levels);
        for i in (0..levels).rev() {
            let c = ch[i];
            let mut stages = Vec::with_capacity(nres + 1);
            for j in 0..=nres {
                let skip = skips.pop().expect("skip stack balanced");
                let name = format!("up.{i}.{j}");
                let res = ResBlock::new(p, &format!("{name}.res"), cur + skip, c, cfg, rng);
                let attn = cfg.has_attention(i).then(|| attn(p, format!("{name}.attn"), c, rng));
                stages.push(Stage { res, attn });
                cur = c;
            }
            let up = (i > 0).then(|| Conv2d::new(p, &format!("up.{i}.upsample"), c, c, 3, 1, init, rng));
            ups.push(UpLevel { stages, up });
        }
        let norm_out = GroupNorm::new(p, "norm_out", cfg.norm_groups, cur, rng);
        let conv_out = Conv2d::new(p, "conv_out", cur, OUT_CHANNELS, 3, 1, Init::Zeros, rng);
        Self {
            config: cfg.clone(),
            conv_in,
            downs,
            mid,
            ups,
            norm_out,
            conv_out,
        }
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Runs the network on `x_t` (`2×B×H×W`) with embeddings `e` (`[B, d]`).
    pub fn forward<T: Real>(&self, p: &Params<T>, x: &Act<T>, e: &[T]) -> Result<(Act<T>, UNetTape<T>)> {
        let cfg = &self.config;
        if x.c != IN_CHANNELS || x.h != cfg.image_size || x.w != cfg.image_size {
            return Err(Error::Shape(format!(
                "unet expects {IN_CHANNELS}x{s}x{s} inputs, got {}x{}x{}",
                x.c,
                x.h,
                x.w,
                s = cfg.image_size
            )));
        }
        if e.len() != x.b * cfg.embedding_width {
            return Err(Error::Shape(format!(
                "embedding has {} values, expected {} rows of width {}",
                e.len(),
                x.b,
                cfg.embedding_width
            )));
        }
        let semb = silu(e);
        let mut h = self.conv_in.forward(p, x);
        let mut skips = vec![h.clone()];
        let mut down = Vec::with_capacity(self.downs.len());
        for level in &self.downs {
            let mut caches = Vec::with_capacity(level.stages.len());
            for stage in &level.stages {
                let (next, c) = stage.forward(p, h, &semb);
                h = next;
                skips.push(h.clone());
                caches.push(c);
            }
            if let Some(conv) = &level.down {
                h = conv.forward(p, &h);
                skips.push(h.clone());
            }
            down.push(caches);
        }
        let bottleneck = (h.c, h.h, h.w);
        let mut mid = Vec::with_capacity(2);
        for stage in &self.mid {
            let (next, c) = stage.forward(p, h, &semb);
            h = next;
            mid.push(c);
        }
        let mut stack = skips.clone();
        let mut up = Vec::with_capacity(self.ups.len());
        let mut up_inputs = Vec::with_capacity(self.ups.len());
        for level in &self.ups {
            let mut caches = Vec::with_capacity(level.stages.len());
            for stage in &level.stages {
                let skip = stack.pop().expect("skip stack balanced");
                let (next, c) = stage.forward(p, h.concat_channels(&skip), &semb);
                h = next;
                caches.push(c);
            }
            up.push(caches);
            match &level.up {
                Some(conv) => {
                    let u = upsample2x(&h);
                    h = conv.forward(p, &u);
                    up_inputs.push(Some(u));
                }
                None => up_inputs.push(None),
            }
        }
        let (pre_out, norm_out) = self.norm_out.forward(p, &h);
        let act_out = Act::from_vec(pre_out.c, pre_out.b, pre_out.h, pre_out.w, silu(&pre_out.data));
        let y = self.conv_out.forward(p, &act_out);
        if !y.all_finite() {
            return Err(Error::Numeric("non-finite values in denoiser output".into()));
        }
        Ok((
            y,
            UNetTape {
                x: x.clone(),
                semb,
                e: e.to_vec(),
                skips,
                down,
                mid,
                up,
                up_inputs,
                norm_out,
                pre_out,
                act_out,
                bottleneck,
            },
        ))
    }

    /// Accumulates parameter gradients for upstream gradient `dy` and
    /// returns the gradient w.r.t. the embedding `e`.
    pub fn backward<T: Real>(&self, p: &Params<T>, tape: &UNetTape<T>, dy: &Act<T>, g: &mut Params<T>) -> Vec<T> {
        let semb = &tape.semb;
        let mut dsemb = vec![T::ZERO; semb.len()];
        let da = self.conv_out.backward(p, &tape.act_out, dy, g);
        let dpre = Act::from_vec(da.c, da.b, da.h, da.w, silu_backward(&tape.pre_out.data, &da.data));
        let mut dh = self.norm_out.backward(p, &tape.norm_out, &dpre, g);

        let mut dskips: Vec<Option<Act<T>>> = vec![None; tape.skips.len()];
        // The decoder popped skips from the end; replay that order in reverse.
        let mut next_skip = tape.skips.len() - self.ups.iter().map(|l| l.stages.len()).sum::<usize>();
        for ((level, caches), up_in) in self.ups.iter().zip(&tape.up).zip(&tape.up_inputs).rev() {
            if let (Some(conv), Some(u)) = (&level.up, up_in) {
                dh = upsample2x_backward(&conv.backward(p, u, &dh, g));
            }
            for (stage, cache) in level.stages.iter().zip(caches).rev() {
                let dcat = stage.backward(p, cache, dh, semb, &mut dsemb, g);
                let skip_c = tape.skips[next_skip].c;
                let main_c = dcat.c - skip_c;
                let (dmain, dskip) = dcat.split_channels(main_c);
                dskips[next_skip] = Some(dskip);
                next_skip += 1;
                dh = dmain;
            }
        }
        for (stage, cache) in self.mid.iter().zip(&tape.mid).rev() {
            dh = stage.backward(p, cache, dh, semb, &mut dsemb, g);
        }
        let mut idx = tape.skips.len();
        for (level, caches) in self.downs.iter().zip(&tape.down).rev() {
            if let Some(conv) = &level.down {
                idx -= 1;
                if let Some(ds) = &dskips[idx] {
                    dh.add_assign(ds);
                }
                dh = conv.backward(p, &tape.skips[idx - 1], &dh, g);
            }
            for (stage, cache) in level.stages.iter().zip(caches).rev() {
                idx -= 1;
                if let Some(ds) = &dskips[idx] {
                    dh.add_assign(ds);
                }
                dh = stage.backward(p, cache, dh, semb, &mut dsemb, g);
            }
        }
        debug_assert_eq!(idx, 1);
        if let Some(ds) = &dskips[0] {
            dh.add_assign(ds);
        }
        self.conv_in.backward(p, &tape.x, &dh, g);
        silu_backward(&tape.e, &dsemb)
    }
}

/// Embedding pathway plus U-Net: `f_θ(x_t, t, c)`.
#[derive(Debug, Clone)]
pub struct JointDenoiser {
    pub embedder: Embedder,
    pub unet: UNet,
}

#[derive(Debug, Clone)]
pub struct DenoiserTape<T> {
    pub embedding: EmbeddingCache<T>,
    pub unet: UNetTape<T>,
}

impl JointDenoiser {
    /// Lays out the architecture and registers freshly initialized
    /// parameters in a new store.
    pub fn build<T: Real, R: Rng + ?Sized>(cfg: &UNetConfig, timesteps: usize, rng: &mut R) -> Result<(Self, Params<T>)> {
        cfg.validate()?;
        let mut p = Params::new();
        let embedder = Embedder::new(&mut p, cfg.embedding_width, cfg.pe_width, cfg.z_bins, timesteps, rng)?;
        let unet = UNet::new(&mut p, cfg, rng);
        Ok((Self { embedder, unet }, p))
    }

    /// Architecture only, for attaching to parameters loaded from disk.
    pub fn layout(cfg: &UNetConfig, timesteps: usize) -> Result<(Self, Params<f32>)> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        Self::build::<f32, _>(cfg, timesteps, &mut rng)
    }

    pub fn config(&self) -> &UNetConfig {
        self.unet.config()
    }

    pub fn forward<T: Real>(
        &self,
        p: &Params<T>,
        x: &Act<T>,
        ts: &[usize],
        tokens: &[ConditionToken],
    ) -> Result<(Act<T>, DenoiserTape<T>)> {
        if ts.len() != x.b {
            return Err(Error::Shape(format!("{} timesteps for batch of {}", ts.len(), x.b)));
        }
        let (e, embedding) = self.embedder.forward(p, ts, tokens)?;
        let (y, unet) = self.unet.forward(p, x, &e)?;
        Ok((y, DenoiserTape { embedding, unet }))
    }

    /// Gradients of `<dy, f_θ(x)>` w.r.t. every parameter, summed over the batch.
    pub fn backward<T: Real>(&self, p: &Params<T>, tape: &DenoiserTape<T>, dy: &Act<T>) -> Result<Params<T>> {
        let mut g = p.zeros_like();
        let de = self.unet.backward(p, &tape.unet, dy, &mut g);
        self.embedder.backward(p, &tape.embedding, &de, &mut g);
        if !g.all_finite() {
            return Err(Error::Numeric("non-finite parameter gradients".into()));
        }
        Ok(g)
    }
}
