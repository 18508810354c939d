//! Multi-view denoising UNet.
//!
//! Each residual block runs a per-view 2D path and a cross-view 3D path
//! (3×3×3 over view, height, width) and blends them as
//! `σ(α)·O_2D + σ(1−α)·O_3D + skip`. Low-resolution levels add joint
//! self-attention over the tokens of all views. Condition latents are
//! concatenated to the noisy latents and enter through a stem convolution
//! whose condition columns start at zero.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::layers::{
    avgpool2, avgpool2_backward, scale_shift, scale_shift_backward, silu_set, silu_set_backward, upsample2,
    upsample2_backward,
};
use crate::nn::{
    silu_backward, silu_vec, timestep_embedding, Attention, AttentionCache, Conv2d, Conv3d, GroupNorm,
    GroupNormCache, Linear, ParamEntry, ParamStore,
};
use crate::rng::{derived_rng, Rng};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::LatentSet;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },
}

fn default_groups() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MvUnetConfig {
    pub in_channels: usize,
    pub cond_channels: usize,
    pub base_width: usize,
    pub level_widths: Vec<usize>,
    pub n_levels: usize,
    pub attention_levels: BTreeSet<usize>,
    pub blend_alpha: f64,
    pub heads: usize,
    pub timestep_embed_dim: usize,
    #[serde(default = "default_groups")]
    pub groups: usize,
}

impl MvUnetConfig {
    /// 48×64-scale network used by the default run configuration.
    pub fn desk() -> Self {
        MvUnetConfig {
            in_channels: 3,
            cond_channels: 3,
            base_width: 16,
            level_widths: vec![16, 32, 64],
            n_levels: 3,
            attention_levels: [1, 2].into_iter().collect(),
            blend_alpha: 0.5,
            heads: 2,
            timestep_embed_dim: 64,
            groups: 8,
        }
    }

    /// Two-level, 8-wide network for fast tests.
    pub fn tiny() -> Self {
        MvUnetConfig {
            in_channels: 3,
            cond_channels: 3,
            base_width: 8,
            level_widths: vec![8, 8],
            n_levels: 2,
            attention_levels: [1].into_iter().collect(),
            blend_alpha: 0.5,
            heads: 2,
            timestep_embed_dim: 8,
            groups: 4,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.n_levels < 2 {
            return bad(format!("n_levels must be >= 2, got {}", self.n_levels));
        }
        if self.level_widths.len() != self.n_levels {
            return bad(format!(
                "{} level widths for {} levels",
                self.level_widths.len(),
                self.n_levels
            ));
        }
        if self.in_channels == 0 || self.cond_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.groups == 0 || self.heads == 0 {
            return bad("groups and heads must be positive".into());
        }
        for &w in self.level_widths.iter().chain(std::iter::once(&self.base_width)) {
            if w == 0 || w % self.groups != 0 {
                return bad(format!("width {w} must be a positive multiple of {} groups", self.groups));
            }
        }
        if self.attention_levels.contains(&0) {
            return bad("attention is not allowed at level 0 (full resolution)".into());
        }
        if let Some(&l) = self.attention_levels.iter().find(|&&l| l >= self.n_levels) {
            return bad(format!("attention level {l} out of range"));
        }
        let attn_widths = self
            .attention_levels
            .iter()
            .map(|&l| self.level_widths[l])
            .chain(std::iter::once(self.level_widths[self.n_levels - 1]));
        for w in attn_widths {
            if w % self.heads != 0 {
                return bad(format!("width {w} not divisible by {} heads", self.heads));
            }
        }
        if self.timestep_embed_dim < 2 || !self.timestep_embed_dim.is_multiple_of(2) {
            return bad(format!("timestep_embed_dim {} must be even", self.timestep_embed_dim));
        }
        if !self.blend_alpha.is_finite() {
            return bad("blend_alpha must be finite".into());
        }
        Ok(())
    }

    /// `(σ(α), σ(1−α))`.
    pub fn blend_weights(&self) -> (f64, f64) {
        (sigmoid(self.blend_alpha), sigmoid(1.0 - self.blend_alpha))
    }

    /// Spatial sizes must survive `n_levels − 1` halvings.
    pub fn size_multiple(&self) -> usize {
        1 << (self.n_levels - 1)
    }
}

#[derive(Debug, Clone)]
enum BranchConv {
    Planar(Conv2d),
    Volumetric(Conv3d),
}

impl BranchConv {
    fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &LatentSet<T>) -> LatentSet<T> {
        match self {
            BranchConv::Planar(c) => c.forward(p, x),
            BranchConv::Volumetric(c) => c.forward(p, x),
        }
    }

    fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut ParamStore<T>,
        x: &LatentSet<T>,
        dy: &LatentSet<T>,
    ) -> LatentSet<T> {
        match self {
            BranchConv::Planar(c) => c.backward(p, g, x, dy),
            BranchConv::Volumetric(c) => c.backward(p, g, x, dy),
        }
    }
}

/// norm → SiLU → conv → norm → scale/shift(t) → SiLU → conv
#[derive(Debug, Clone)]
struct Branch {
    norm1: GroupNorm,
    conv1: BranchConv,
    norm2: GroupNorm,
    film: Linear,
    conv2: BranchConv,
}

#[derive(Debug, Clone)]
struct BranchCache<T> {
    n1: GroupNormCache<T>,
    a1: LatentSet<T>,
    h1: LatentSet<T>,
    n2: GroupNormCache<T>,
    z2: LatentSet<T>,
    ss: Vec<T>,
    m: LatentSet<T>,
    s2: LatentSet<T>,
}

impl Branch {
    fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &LatentSet<T>, temb: &[T]) -> (LatentSet<T>, BranchCache<T>) {
        let (a1, n1) = self.norm1.forward(p, x);
        let h1 = silu_set(&a1);
        let c1 = self.conv1.forward(p, &h1);
        let (z2, n2) = self.norm2.forward(p, &c1);
        let ss = self.film.forward(p, temb);
        let m = scale_shift(&z2, &ss);
        let s2 = silu_set(&m);
        let out = self.conv2.forward(p, &s2);
        (
            out,
            BranchCache {
                n1,
                a1,
                h1,
                n2,
                z2,
                ss,
                m,
                s2,
            },
        )
    }

    /// Returns `(dx, d_temb)`.
    fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut ParamStore<T>,
        c: &BranchCache<T>,
        temb: &[T],
        dy: &LatentSet<T>,
    ) -> (LatentSet<T>, Vec<T>) {
        let ds2 = self.conv2.backward(p, g, &c.s2, dy);
        let dm = silu_set_backward(&c.m, &ds2);
        let (dz2, dss) = scale_shift_backward(&c.z2, &c.ss, &dm);
        let dtemb = self.film.backward(p, g, temb, &dss);
        let dc1 = self.norm2.backward(p, g, &c.n2, &dz2);
        let dh1 = self.conv1.backward(p, g, &c.h1, &dc1);
        let da1 = silu_set_backward(&c.a1, &dh1);
        (self.norm1.backward(p, g, &c.n1, &da1), dtemb)
    }
}

/// Spatial-3D residual block.
#[derive(Debug, Clone)]
pub struct ResBlock {
    spatial: Branch,
    volumetric: Branch,
    skip: Option<Conv2d>,
    pub cin: usize,
    pub cout: usize,
    /// `(σ(α), σ(1−α))`.
    pub blend: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct ResBlockCache<T> {
    x: LatentSet<T>,
    spatial: BranchCache<T>,
    volumetric: BranchCache<T>,
}

/// Separately reported block terms.
#[derive(Debug, Clone)]
pub struct ResBlockParts<T> {
    pub spatial: LatentSet<T>,
    pub volumetric: LatentSet<T>,
    pub skip: LatentSet<T>,
    pub blend: (f64, f64),
    pub output: LatentSet<T>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        temb_dim: usize,
        groups: usize,
        alpha: f64,
        rng: &mut Rng,
    ) -> Self {
        let branch = |store: &mut ParamStore<T>, tag: &str, rng: &mut Rng, volumetric: bool| {
            let prefix = format!("{name}.{tag}");
            let conv = |store: &mut ParamStore<T>, n: &str, ci: usize, rng: &mut Rng| {
                if volumetric {
                    BranchConv::Volumetric(Conv3d::new(store, &format!("{prefix}.{n}"), ci, cout, rng))
                } else {
                    BranchConv::Planar(Conv2d::new(store, &format!("{prefix}.{n}"), ci, cout, 3, rng))
                }
            };
            Branch {
                norm1: GroupNorm::new(store, &format!("{prefix}.norm1"), cin, groups),
                conv1: conv(store, "conv1", cin, rng),
                norm2: GroupNorm::new(store, &format!("{prefix}.norm2"), cout, groups),
                film: Linear::new(store, &format!("{prefix}.film"), temb_dim, 2 * cout, rng),
                conv2: conv(store, "conv2", cout, rng),
            }
        };
        let spatial = branch(store, "spatial", rng, false);
        let volumetric = branch(store, "volumetric", rng, true);
        // the 3D path starts as the 2D path on the centre view slice
        for (c2, c3) in [(&spatial.conv1, &volumetric.conv1), (&spatial.conv2, &volumetric.conv2)] {
            if let (BranchConv::Planar(a), BranchConv::Volumetric(b)) = (c2, c3) {
                b.init_from_2d(store, a, 1e-3, rng);
            }
        }
        for (a, b) in [(spatial.film.w, volumetric.film.w), (spatial.film.b, volumetric.film.b)] {
            let src = store.get(a).to_vec();
            store.get_mut(b).copy_from_slice(&src);
        }
        let skip = (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, rng));
        ResBlock {
            spatial,
            volumetric,
            skip,
            cin,
            cout,
            blend: (sigmoid(alpha), sigmoid(1.0 - alpha)),
        }
    }

    pub fn forward_parts<T: Scalar>(&self, p: &ParamStore<T>, x: &LatentSet<T>, temb: &[T]) -> ResBlockParts<T> {
        let (o2, _) = self.spatial.forward(p, x, temb);
        let (o3, _) = self.volumetric.forward(p, x, temb);
        let skip = match &self.skip {
            Some(c) => c.forward(p, x),
            None => x.clone(),
        };
        let output = self.combine(&o2, &o3, &skip);
        ResBlockParts {
            spatial: o2,
            volumetric: o3,
            skip,
            blend: self.blend,
            output,
        }
    }

    fn combine<T: Scalar>(&self, o2: &LatentSet<T>, o3: &LatentSet<T>, skip: &LatentSet<T>) -> LatentSet<T> {
        let (w2, w3) = (T::from_f64_lossy(self.blend.0), T::from_f64_lossy(self.blend.1));
        let mut out = skip.clone();
        out.axpy(w2, o2);
        out.axpy(w3, o3);
        out
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: &LatentSet<T>,
        temb: &[T],
    ) -> (LatentSet<T>, ResBlockCache<T>) {
        let (o2, spatial) = self.spatial.forward(p, x, temb);
        let (o3, volumetric) = self.volumetric.forward(p, x, temb);
        let skip = match &self.skip {
            Some(c) => c.forward(p, x),
            None => x.clone(),
        };
        (
            self.combine(&o2, &o3, &skip),
            ResBlockCache {
                x: x.clone(),
                spatial,
                volumetric,
            },
        )
    }

    /// Returns `dx` and accumulates into `dtemb`.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut ParamStore<T>,
        c: &ResBlockCache<T>,
        temb: &[T],
        dy: &LatentSet<T>,
        dtemb: &mut [T],
    ) -> LatentSet<T> {
        let d2 = dy.scaled(T::from_f64_lossy(self.blend.0));
        let d3 = dy.scaled(T::from_f64_lossy(self.blend.1));
        let (mut dx, dt2) = self.spatial.backward(p, g, &c.spatial, temb, &d2);
        let (dx3, dt3) = self.volumetric.backward(p, g, &c.volumetric, temb, &d3);
        dx.add_assign(&dx3);
        match &self.skip {
            Some(conv) => dx.add_assign(&conv.backward(p, g, &c.x, dy)),
            None => dx.add_assign(dy),
        }
        for ((d, a), b) in dtemb.iter_mut().zip(&dt2).zip(&dt3) {
            *d += *a + *b;
        }
        dx
    }

    /// Parameter names of the 3D path (for ablations and tests).
    pub fn volumetric_prefix(name: &str) -> String {
        format!("{name}.volumetric.")
    }
}

#[derive(Debug, Clone)]
struct Stage {
    res: ResBlock,
    attn: Option<Attention>,
}

#[derive(Debug, Clone)]
struct Arch {
    stem: Conv2d,
    t1: Linear,
    t2: Linear,
    enc: Vec<Stage>,
    mid1: ResBlock,
    mid_attn: Attention,
    mid2: ResBlock,
    dec: Vec<Stage>,
    head_norm: GroupNorm,
    head: Conv2d,
}

impl Arch {
    fn build<T: Scalar>(cfg: &MvUnetConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Self {
        let e = cfg.timestep_embed_dim;
        let g = cfg.groups;
        let a = cfg.blend_alpha;
        let w = &cfg.level_widths;
        let nl = cfg.n_levels;
        let stem = Conv2d::new(store, "stem", cfg.in_channels + cfg.cond_channels, cfg.base_width, 3, rng);
        {
            let cin = cfg.in_channels + cfg.cond_channels;
            let ws = store.get_mut(stem.w);
            for co in 0..cfg.base_width {
                for ci in cfg.in_channels..cin {
                    ws[(co * cin + ci) * 9..(co * cin + ci + 1) * 9].fill(T::zero());
                }
            }
        }
        let t1 = Linear::new(store, "time.lin1", e, e, rng);
        let t2 = Linear::new(store, "time.lin2", e, e, rng);
        let attn = |store: &mut ParamStore<T>, name: String, c: usize, rng: &mut Rng| {
            Attention::new(store, &name, c, cfg.heads, g, rng)
        };
        let mut enc = Vec::with_capacity(nl);
        let mut ch = cfg.base_width;
        for l in 0..nl {
            let res = ResBlock::new(store, &format!("enc.{l}.res"), ch, w[l], e, g, a, rng);
            let at = cfg.attention_levels.contains(&l).then(|| attn(store, format!("enc.{l}.attn"), w[l], rng));
            enc.push(Stage { res, attn: at });
            ch = w[l];
        }
        let mid1 = ResBlock::new(store, "mid.res1", ch, ch, e, g, a, rng);
        let mid_attn = attn(store, "mid.attn".into(), ch, rng);
        let mid2 = ResBlock::new(store, "mid.res2", ch, ch, e, g, a, rng);
        let mut dec: Vec<Option<Stage>> = vec![None; nl];
        for l in (0..nl).rev() {
            let res = ResBlock::new(store, &format!("dec.{l}.res"), ch + w[l], w[l], e, g, a, rng);
            let at = cfg.attention_levels.contains(&l).then(|| attn(store, format!("dec.{l}.attn"), w[l], rng));
            dec[l] = Some(Stage { res, attn: at });
            ch = w[l];
        }
        let head_norm = GroupNorm::new(store, "head.norm", ch, g);
        let head = Conv2d::new(store, "head.conv", ch, cfg.in_channels, 3, rng);
        Arch {
            stem,
            t1,
            t2,
            enc,
            mid1,
            mid_attn,
            mid2,
            dec: dec.into_iter().map(|s| s.expect("every level built")).collect(),
            head_norm,
            head,
        }
    }
}

/// Network weights plus the layout that addresses them.
#[derive(Debug, Clone)]
pub struct MvUnet<T> {
    pub config: MvUnetConfig,
    pub params: ParamStore<T>,
    arch: Arch,
}

pub type MvUnetParams<T> = MvUnet<T>;

struct TimeCache<T> {
    e0: Vec<T>,
    u1: Vec<T>,
    a1: Vec<T>,
    u2: Vec<T>,
    act: Vec<T>,
}

/// Activations kept for the backward pass.
pub struct ForwardCache<T> {
    input: LatentSet<T>,
    time: TimeCache<T>,
    enc: Vec<(ResBlockCache<T>, Option<AttentionCache<T>>)>,
    mid: (ResBlockCache<T>, AttentionCache<T>, ResBlockCache<T>),
    /// Indexed by level.
    dec: Vec<Option<(ResBlockCache<T>, Option<AttentionCache<T>>)>>,
    dec_split: Vec<usize>,
    head_norm: GroupNormCache<T>,
    head_a: LatentSet<T>,
    head_in: LatentSet<T>,
}

impl<T: Scalar> MvUnet<T> {
    /// Deterministic in `seed`.
    pub fn init(config: MvUnetConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = derived_rng(seed, 0x6e65_7477);
        let arch = Arch::build(&config, &mut store, &mut rng);
        Ok(MvUnet {
            config,
            params: store,
            arch,
        })
    }

    pub fn count_parameters(&self) -> usize {
        self.params.n_scalars()
    }

    /// Stem weight slice acting on condition channels.
    pub fn cond_stem_weights(&self) -> Vec<T> {
        let cin = self.config.in_channels + self.config.cond_channels;
        let w = self.params.get(self.arch.stem.w);
        let mut out = Vec::new();
        for co in 0..self.config.base_width {
            for ci in self.config.in_channels..cin {
                out.extend_from_slice(&w[(co * cin + ci) * 9..(co * cin + ci + 1) * 9]);
            }
        }
        out
    }

    /// The first encoder block, for inspection.
    pub fn first_block(&self) -> &ResBlock {
        &self.arch.enc[0].res
    }

    pub fn mid_attention(&self) -> &Attention {
        &self.arch.mid_attn
    }

    /// Time-embedding features fed to every block's modulation.
    pub fn time_features(&self, k: usize) -> Vec<T> {
        self.time_forward(k).act
    }

    fn time_forward(&self, k: usize) -> TimeCache<T> {
        let p = &self.params;
        let e0 = timestep_embedding(k, self.config.timestep_embed_dim);
        let u1 = self.arch.t1.forward(p, &e0);
        let a1 = silu_vec(&u1);
        let u2 = self.arch.t2.forward(p, &a1);
        let act = silu_vec(&u2);
        TimeCache { e0, u1, a1, u2, act }
    }

    pub fn check_shapes(&self, noisy: &LatentSet<T>, cond: &LatentSet<T>) -> Result<(), ModelError> {
        let c = &self.config;
        let err = |m: String| Err(ModelError::Shape(m));
        if noisy.n_views == 0 {
            return err("empty view set".into());
        }
        if noisy.channels != c.in_channels || cond.channels != c.cond_channels {
            return err(format!(
                "channels {}+{} expected {}+{}",
                noisy.channels, cond.channels, c.in_channels, c.cond_channels
            ));
        }
        if (noisy.n_views, noisy.height, noisy.width) != (cond.n_views, cond.height, cond.width) {
            return err(format!("noisy {:?} vs cond {:?}", noisy.shape(), cond.shape()));
        }
        let m = c.size_multiple();
        if !noisy.height.is_multiple_of(m) || !noisy.width.is_multiple_of(m) {
            return err(format!(
                "{}x{} not divisible by {m}",
                noisy.height, noisy.width
            ));
        }
        Ok(())
    }

    /// Predicted noise for `noisy` at timestep `k` given condition latents.
    pub fn forward(&self, noisy: &LatentSet<T>, cond: &LatentSet<T>, k: usize) -> Result<LatentSet<T>, ModelError> {
        self.forward_train(noisy, cond, k).map(|(y, _)| y)
    }

    pub fn forward_train(
        &self,
        noisy: &LatentSet<T>,
        cond: &LatentSet<T>,
        k: usize,
    ) -> Result<(LatentSet<T>, ForwardCache<T>), ModelError> {
        self.check_shapes(noisy, cond)?;
        let p = &self.params;
        let a = &self.arch;
        let nl = self.config.n_levels;
        let time = self.time_forward(k);
        let temb = &time.act;
        let input = LatentSet::concat_channels(noisy, cond);
        let mut h = a.stem.forward(p, &input);
        let mut enc = Vec::with_capacity(nl);
        let mut skips = Vec::with_capacity(nl);
        for (l, st) in a.enc.iter().enumerate() {
            let (y, rc) = st.res.forward(p, &h, temb);
            h = y;
            let ac = st.attn.as_ref().map(|at| {
                let (y, c) = at.forward(p, &h);
                h = y;
                c
            });
            enc.push((rc, ac));
            skips.push(h.clone());
            if l + 1 < nl {
                h = avgpool2(&h);
            }
        }
        let (y, m1) = a.mid1.forward(p, &h, temb);
        let (y, ma) = a.mid_attn.forward(p, &y);
        let (y, m2) = a.mid2.forward(p, &y, temb);
        h = y;
        let mut dec: Vec<Option<_>> = (0..nl).map(|_| None).collect();
        let mut dec_split = vec![0; nl];
        for l in (0..nl).rev() {
            let st = &a.dec[l];
            dec_split[l] = h.channels;
            let x = LatentSet::concat_channels(&h, &skips[l]);
            let (y, rc) = st.res.forward(p, &x, temb);
            h = y;
            let ac = st.attn.as_ref().map(|at| {
                let (y, c) = at.forward(p, &h);
                h = y;
                c
            });
            dec[l] = Some((rc, ac));
            if l > 0 {
                h = upsample2(&h);
            }
        }
        let (head_a, head_norm) = a.head_norm.forward(p, &h);
        let head_in = silu_set(&head_a);
        let out = a.head.forward(p, &head_in);
        Ok((
            out,
            ForwardCache {
                input,
                time,
                enc,
                mid: (m1, ma, m2),
                dec,
                dec_split,
                head_norm,
                head_a,
                head_in,
            },
        ))
    }

    /// Accumulates parameter gradients into `g` and returns
    /// `(d_noisy, d_cond)`.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        dout: &LatentSet<T>,
        g: &mut ParamStore<T>,
    ) -> (LatentSet<T>, LatentSet<T>) {
        let p = &self.params;
        let a = &self.arch;
        let nl = self.config.n_levels;
        let temb = &cache.time.act;
        let mut dtemb = vec![T::zero(); temb.len()];

        let dhead_in = a.head.backward(p, g, &cache.head_in, dout);
        let dhead_a = silu_set_backward(&cache.head_a, &dhead_in);
        let mut dh = a.head_norm.backward(p, g, &cache.head_norm, &dhead_a);

        let mut dskips: Vec<Option<LatentSet<T>>> = vec![None; nl];
        for l in 0..nl {
            let st = &a.dec[l];
            let (rc, ac) = cache.dec[l].as_ref().expect("decoder cache");
            if l > 0 {
                dh = upsample2_backward(&dh);
            }
            if let (Some(at), Some(c)) = (&st.attn, ac) {
                dh = at.backward(p, g, c, &dh);
            }
            let dx = st.res.backward(p, g, rc, temb, &dh, &mut dtemb);
            let (dprev, dskip) = dx.split_channels(cache.dec_split[l]);
            dskips[l] = Some(dskip);
            dh = dprev;
        }

        let (m1, ma, m2) = &cache.mid;
        dh = a.mid2.backward(p, g, m2, temb, &dh, &mut dtemb);
        dh = a.mid_attn.backward(p, g, ma, &dh);
        dh = a.mid1.backward(p, g, m1, temb, &dh, &mut dtemb);

        for l in (0..nl).rev() {
            let st = &a.enc[l];
            if l + 1 < nl {
                dh = avgpool2_backward(&dh);
            }
            dh.add_assign(dskips[l].as_ref().expect("skip grad"));
            let (rc, ac) = &cache.enc[l];
            if let (Some(at), Some(c)) = (&st.attn, ac) {
                dh = at.backward(p, g, c, &dh);
            }
            dh = st.res.backward(p, g, rc, temb, &dh, &mut dtemb);
        }
        let din = a.stem.backward(p, g, &cache.input, &dh);

        let t = &cache.time;
        let du2 = silu_backward(&t.u2, &dtemb);
        let da1 = a.t2.backward(p, g, &t.a1, &du2);
        let du1 = silu_backward(&t.u1, &da1);
        a.t1.backward(p, g, &t.e0, &du1);

        din.split_channels(self.config.in_channels)
    }

    pub fn cast<U: Scalar>(&self) -> MvUnet<U> {
        MvUnet {
            config: self.config.clone(),
            params: self.params.cast(),
            arch: self.arch.clone(),
        }
    }

    /// Replaces weights with a same-layout store.
    pub fn with_params(mut self, params: ParamStore<T>) -> Result<Self, ModelError> {
        if !params.same_layout(&self.params) {
            return Err(ModelError::Shape("parameter layout differs from config".into()));
        }
        self.params = params;
        Ok(self)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut out = Vec::new();
        write_header(&mut out, T::BYTES, &self.config);
        write_store(&mut out, &self.params);
        write_file(path, &out)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = read_file(path)?;
        let mut r = Reader::new(&bytes, path);
        let (width, config) = r.header()?;
        if width != T::BYTES {
            return Err(r.err(format!("stored {width}-byte scalars, expected {}", T::BYTES)));
        }
        let params = r.store::<T>()?;
        let net = MvUnet::<T>::init(config, 0)?;
        net.with_params(params)
    }
}

const MAGIC: &[u8; 8] = b"MVRCKPT\0";
const VERSION: u32 = 1;

pub fn write_header(out: &mut Vec<u8>, scalar_bytes: usize, config: &MvUnetConfig) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(scalar_bytes as u32).to_le_bytes());
    let json = serde_json::to_vec(config).expect("config serializes");
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
}

pub fn write_store<T: Scalar>(out: &mut Vec<u8>, store: &ParamStore<T>) {
    out.extend_from_slice(&(store.entries.len() as u32).to_le_bytes());
    for e in &store.entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &e.data {
            v.write_le(out);
        }
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ModelError> {
    let err = |e: std::io::Error| ModelError::Checkpoint {
        path: path.display().to_string(),
        detail: e.to_string(),
    };
    let mut f = std::fs::File::create(path).map_err(err)?;
    f.write_all(bytes).map_err(err)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| ModelError::Checkpoint {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
    Ok(bytes)
}

/// Cursor over checkpoint bytes.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Reader { bytes, pos: 0, path }
    }

    pub fn err(&self, detail: String) -> ModelError {
        ModelError::Checkpoint {
            path: self.path.display().to_string(),
            detail,
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub fn header(&mut self) -> Result<(usize, MvUnetConfig), ModelError> {
        if self.take(8)? != MAGIC {
            return Err(self.err("bad magic".into()));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(self.err(format!("unsupported version {version}")));
        }
        let width = self.u32()? as usize;
        let n = self.u64()? as usize;
        let json = self.take(n)?;
        let config: MvUnetConfig =
            serde_json::from_slice(json).map_err(|e| self.err(format!("config: {e}")))?;
        Ok((width, config))
    }

    pub fn store<T: Scalar>(&mut self) -> Result<ParamStore<T>, ModelError> {
        let n = self.u32()? as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let len = self.u32()? as usize;
            let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| self.err("name not utf-8".into()))?;
            let nd = self.u32()? as usize;
            let shape = (0..nd).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let count: usize = shape.iter().product();
            let raw = self.take(count * T::BYTES)?;
            let data = raw.chunks(T::BYTES).map(T::read_le).collect();
            entries.push(ParamEntry { name, shape, data });
        }
        Ok(ParamStore { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn inputs(n: usize, seed: u64) -> (LatentSet<f64>, LatentSet<f64>) {
        let mut rng = rng_from_seed(seed);
        (LatentSet::randn(n, 3, 8, 8, &mut rng), LatentSet::randn(n, 3, 8, 8, &mut rng))
    }

    #[test]
    fn config_rules() {
        assert!(MvUnetConfig::desk().validate().is_ok());
        assert!(MvUnetConfig::tiny().validate().is_ok());
        let mut c = MvUnetConfig::tiny();
        c.attention_levels.insert(0);
        assert!(matches!(MvUnet::<f32>::init(c, 0), Err(ModelError::Config(_))));
        let mut c = MvUnetConfig::tiny();
        c.n_levels = 1;
        c.level_widths = vec![8];
        assert!(c.validate().is_err());
        let mut c = MvUnetConfig::tiny();
        c.level_widths = vec![8, 6];
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_seeded_and_zeroes_condition_stem() {
        let a = MvUnet::<f32>::init(MvUnetConfig::tiny(), 3).unwrap();
        let b = MvUnet::<f32>::init(MvUnetConfig::tiny(), 3).unwrap();
        let c = MvUnet::<f32>::init(MvUnetConfig::tiny(), 4).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
        assert!(a.cond_stem_weights().iter().all(|v| *v == 0.0));
        assert!(!a.cond_stem_weights().is_empty());
    }

    #[test]
    fn no_cross_attention_parameters() {
        let net = MvUnet::<f32>::init(MvUnetConfig::desk(), 0).unwrap();
        assert!(net.params.entries.iter().all(|e| !e.name.contains("cross")));
    }

    #[test]
    fn runs_for_various_view_counts() {
        let net = MvUnet::<f64>::init(MvUnetConfig::tiny(), 1).unwrap();
        for n in [1, 2, 4, 8] {
            let (x, c) = inputs(n, n as u64);
            let y = net.forward(&x, &c, 5).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.is_finite());
        }
    }

    #[test]
    fn shape_errors() {
        let net = MvUnet::<f64>::init(MvUnetConfig::tiny(), 1).unwrap();
        let (x, _) = inputs(2, 0);
        let (_, c) = inputs(3, 0);
        assert!(matches!(net.forward(&x, &c, 0), Err(ModelError::Shape(_))));
        let mut rng = rng_from_seed(0);
        let odd = LatentSet::randn(1, 3, 7, 8, &mut rng);
        assert!(net.forward(&odd, &odd, 0).is_err());
    }

    #[test]
    fn zero_init_blocks_condition_gradient() {
        let net = MvUnet::<f64>::init(MvUnetConfig::tiny(), 2).unwrap();
        let (x, c) = inputs(2, 9);
        let (y, cache) = net.forward_train(&x, &c, 7).unwrap();
        let mut g = net.params.zeros_like();
        let (dx, dc) = net.backward(&cache, &y, &mut g);
        assert!(dc.data.iter().all(|v| *v == 0.0));
        assert!(dx.data.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn backward_matches_differences() {
        let net = MvUnet::<f64>::init(MvUnetConfig::tiny(), 5).unwrap();
        let mut net = net;
        // give the condition path a non-zero slice so its gradient is exercised
        let mut rng = rng_from_seed(1);
        for e in &mut net.params.entries {
            for v in &mut e.data {
                *v += 0.05 * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng);
            }
        }
        let (x, c) = inputs(3, 10);
        let mut rng = rng_from_seed(11);
        let target = LatentSet::<f64>::randn(3, 3, 8, 8, &mut rng);
        let loss = |n: &MvUnet<f64>| -> f64 {
            let y = n.forward(&x, &c, 13).unwrap();
            y.data.iter().zip(&target.data).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum()
        };
        let (y, cache) = net.forward_train(&x, &c, 13).unwrap();
        let mut dy = y.clone();
        dy.axpy(-1.0, &target);
        let mut g = net.params.zeros_like();
        net.backward(&cache, &dy, &mut g);
        let total = net.params.n_scalars();
        let mut rng = rng_from_seed(12);
        for _ in 0..20 {
            let i = rand::Rng::random_range(&mut rng, 0..total);
            let (id, off) = net.params.locate(i);
            let h = 1e-5;
            let orig = net.params.get(id)[off];
            net.params.get_mut(id)[off] = orig + h;
            let lp = loss(&net);
            net.params.get_mut(id)[off] = orig - h;
            let lm = loss(&net);
            net.params.get_mut(id)[off] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = g.get(id)[off];
            let name = &net.params.entries[id.0].name;
            assert!(
                (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-6),
                "{name}[{off}]: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = MvUnet::<f32>::init(MvUnetConfig::tiny(), 8).unwrap();
        let path = dir.path().join("m.ckpt");
        net.save(&path).unwrap();
        let back = MvUnet::<f32>::load(&path).unwrap();
        assert_eq!(back.params, net.params);
        assert_eq!(back.config, net.config);
        assert!(MvUnet::<f64>::load(&path).is_err());
        std::fs::write(&path, b"garbage").unwrap();
        assert!(MvUnet::<f32>::load(&path).is_err());
    }

    #[test]
    fn blend_weights_follow_alpha() {
        let net = MvUnet::<f64>::init(MvUnetConfig::tiny(), 0).unwrap();
        let (a, b) = net.first_block().blend;
        assert!((a - 0.622_459_331_201_854_6).abs() < 1e-12 && (a - b).abs() < 1e-15);
        let mut c = MvUnetConfig::tiny();
        c.blend_alpha = 2.0;
        let (a, b) = c.blend_weights();
        assert!((a - sigmoid(2.0)).abs() < 1e-15 && (b - sigmoid(-1.0)).abs() < 1e-15);
    }

    #[test]
    fn conv_parameter_count_scales_with_width() {
        let conv_count = |n: &MvUnet<f32>| -> usize {
            n.params.entries.iter().filter(|e| e.shape.len() >= 4).map(|e| e.data.len()).sum()
        };
        let mut c = MvUnetConfig::desk();
        c.base_width = 8;
        c.level_widths = vec![8, 16, 32];
        let small = MvUnet::<f32>::init(c.clone(), 0).unwrap();
        c.base_width = 16;
        c.level_widths = vec![16, 32, 64];
        let big = MvUnet::<f32>::init(c, 0).unwrap();
        let ratio = conv_count(&big) as f64 / conv_count(&small) as f64;
        assert!((ratio / 4.0 - 1.0).abs() < 0.1, "ratio {ratio}");
        assert!(big.count_parameters() > conv_count(&big));
    }
}
