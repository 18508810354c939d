//! Linear-β DDPM schedule, forward noising, the ε-matching objective over
//! jointly noised view sets, and DDIM-family samplers.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Image;
use crate::degradations::{from_planes, resize_planes};
use crate::mv_unet::{ModelError, MvUnet};
use crate::nn::ParamStore;
use crate::rng::{rng_from_seed, Rng};
use crate::scalar::Scalar;
use crate::tensor::LatentSet;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    #[inline]
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k]
    }
}

/// Linearly spaced `β_k` from `beta_start` to `beta_end`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule, DiffusionError> {
    if steps < 2 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::Contract(format!(
            "need T >= 2 and 0 < beta_start <= beta_end < 1, got T={steps}, [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|k| beta_start + (beta_end - beta_start) * k as f64 / (steps - 1) as f64)
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    if alpha_bars[0] <= 0.99 || alpha_bars[steps - 1] >= 0.05 {
        return Err(DiffusionError::Contract(format!(
            "schedule endpoints alpha_bar_0={} alpha_bar_T-1={} outside (0.99, 1) / (0, 0.05)",
            alpha_bars[0],
            alpha_bars[steps - 1]
        )));
    }
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

/// `β ∈ [1e-4, 0.02]` at `T = 1000`, with both endpoints scaled by
/// `1000/T` for shorter chains so the terminal `ᾱ` stays near zero.
pub fn scaled_linear_schedule(steps: usize) -> Result<NoiseSchedule, DiffusionError> {
    let s = 1000.0 / steps as f64;
    make_schedule(steps, 1e-4 * s, 0.02 * s)
}

/// `√ᾱ_k·x0 + √(1−ᾱ_k)·ε`.
pub fn q_sample<T: Scalar>(
    x0: &LatentSet<T>,
    k: usize,
    eps: &LatentSet<T>,
    sched: &NoiseSchedule,
) -> Result<LatentSet<T>, DiffusionError> {
    if x0.shape() != eps.shape() {
        return Err(DiffusionError::Contract(format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
    }
    if k >= sched.steps() {
        return Err(DiffusionError::Contract(format!("timestep {k} >= {}", sched.steps())));
    }
    let ab = sched.alpha_bar(k);
    let (a, b) = (T::from_f64_lossy(ab.sqrt()), T::from_f64_lossy((1.0 - ab).sqrt()));
    let mut out = x0.clone();
    out.data.iter_mut().zip(&eps.data).for_each(|(x, e)| *x = a * *x + b * *e);
    Ok(out)
}

/// Anything that predicts the added noise.
pub trait EpsModel<T: Scalar> {
    fn predict(&self, noisy: &LatentSet<T>, cond: &LatentSet<T>, k: usize) -> Result<LatentSet<T>, DiffusionError>;
}

impl<T: Scalar> EpsModel<T> for MvUnet<T> {
    fn predict(&self, noisy: &LatentSet<T>, cond: &LatentSet<T>, k: usize) -> Result<LatentSet<T>, DiffusionError> {
        Ok(self.forward(noisy, cond, k)?)
    }
}

/// One draw of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSample {
    pub loss: f64,
    /// Timestep shared by every view of the set.
    pub k: usize,
}

struct Draw<T> {
    k: usize,
    eps: LatentSet<T>,
    noisy: LatentSet<T>,
}

fn draw<T: Scalar>(x0: &LatentSet<T>, sched: &NoiseSchedule, rng: &mut Rng) -> Result<Draw<T>, DiffusionError> {
    let k = rng.random_range(0..sched.steps());
    let eps = LatentSet::randn(x0.n_views, x0.channels, x0.height, x0.width, rng);
    let noisy = q_sample(x0, k, &eps, sched)?;
    Ok(Draw { k, eps, noisy })
}

fn masked_mse<T: Scalar>(pred: &LatentSet<T>, eps: &LatentSet<T>, mask: Option<&LatentSet<T>>) -> (f64, f64) {
    match mask {
        None => {
            let s: f64 = pred.data.iter().zip(&eps.data).map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2)).sum();
            (s / pred.data.len() as f64, pred.data.len() as f64)
        }
        Some(m) => {
            let (mut s, mut n) = (0.0, 0.0);
            for ((a, b), w) in pred.data.iter().zip(&eps.data).zip(&m.data) {
                let w = w.to_f64_lossy();
                s += w * (a.to_f64_lossy() - b.to_f64_lossy()).powi(2);
                n += w;
            }
            (if n > 0.0 { s / n } else { 0.0 }, n)
        }
    }
}

/// Mean squared error between the drawn noise and the model's estimate;
/// `mask` (same shape, 0/1) restricts the average.
pub fn training_loss<T: Scalar>(
    model: &impl EpsModel<T>,
    x0: &LatentSet<T>,
    cond: &LatentSet<T>,
    mask: Option<&LatentSet<T>>,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<LossSample, DiffusionError> {
    if let Some(m) = mask {
        if m.shape() != x0.shape() {
            return Err(DiffusionError::Contract("mask shape differs from target".into()));
        }
    }
    let d = draw(x0, sched, rng)?;
    let pred = model.predict(&d.noisy, cond, d.k)?;
    Ok(LossSample {
        loss: masked_mse(&pred, &d.eps, mask).0,
        k: d.k,
    })
}

/// [`training_loss`] plus its parameter gradient, accumulated into `grads`.
/// Consumes the same random draws.
pub fn training_loss_grad<T: Scalar>(
    model: &MvUnet<T>,
    x0: &LatentSet<T>,
    cond: &LatentSet<T>,
    mask: Option<&LatentSet<T>>,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    grads: &mut ParamStore<T>,
) -> Result<LossSample, DiffusionError> {
    let d = draw(x0, sched, rng)?;
    let (pred, cache) = model.forward_train(&d.noisy, cond, d.k)?;
    let (loss, n) = masked_mse(&pred, &d.eps, mask);
    let mut dout = pred.zeros_like();
    if n > 0.0 {
        let scale = 2.0 / n;
        for (i, g) in dout.data.iter_mut().enumerate() {
            let w = mask.map_or(1.0, |m| m.data[i].to_f64_lossy());
            *g = T::from_f64_lossy(scale * w * (pred.data[i] - d.eps.data[i]).to_f64_lossy());
        }
    }
    model.backward(&cache, &dout, grads);
    Ok(LossSample { loss, k: d.k })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Stochastic posterior steps (η = 1).
    Ancestral,
    /// η = 0 updates.
    #[serde(alias = "ddim")]
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub n_steps: usize,
    pub seed: u64,
    /// Clamp each clean-signal estimate to `[-1, 1]`.
    #[serde(default)]
    pub clip_denoised: bool,
}

impl SamplerSpec {
    pub fn deterministic(n_steps: usize, seed: u64) -> Self {
        SamplerSpec {
            kind: SamplerKind::Deterministic,
            n_steps,
            seed,
            clip_denoised: false,
        }
    }
}

/// `T−1 − ⌊i·T/n⌋` for `i = 0..n`: strictly decreasing, starting at `T−1`.
pub fn sampling_timesteps(steps: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| steps - 1 - i * steps / n).collect()
}

/// Denoises pure noise into latents shaped like `cond` with
/// `out_channels` channels.
pub fn sample<T: Scalar>(
    model: &impl EpsModel<T>,
    cond: &LatentSet<T>,
    out_channels: usize,
    spec: &SamplerSpec,
    sched: &NoiseSchedule,
) -> Result<LatentSet<T>, DiffusionError> {
    if spec.n_steps == 0 || spec.n_steps > sched.steps() {
        return Err(DiffusionError::Contract(format!(
            "n_steps {} outside [1, {}]",
            spec.n_steps,
            sched.steps()
        )));
    }
    let mut rng = rng_from_seed(spec.seed);
    let mut x = LatentSet::randn(cond.n_views, out_channels, cond.height, cond.width, &mut rng);
    let ts = sampling_timesteps(sched.steps(), spec.n_steps);
    for (i, &t) in ts.iter().enumerate() {
        let ab = sched.alpha_bar(t);
        let ab_prev = ts.get(i + 1).map_or(1.0, |&p| sched.alpha_bar(p));
        let eps = model.predict(&x, cond, t)?;
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut x0: Vec<f64> = x
            .data
            .iter()
            .zip(&eps.data)
            .map(|(xv, ev)| (xv.to_f64_lossy() - sb * ev.to_f64_lossy()) / sa)
            .collect();
        let mut e: Vec<f64> = eps.data.iter().map(|v| v.to_f64_lossy()).collect();
        if spec.clip_denoised {
            for ((x0v, ev), xv) in x0.iter_mut().zip(e.iter_mut()).zip(&x.data) {
                *x0v = x0v.clamp(-1.0, 1.0);
                *ev = (xv.to_f64_lossy() - sa * *x0v) / sb;
            }
        }
        let sigma = match spec.kind {
            SamplerKind::Deterministic => 0.0,
            SamplerKind::Ancestral => ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).max(0.0).sqrt(),
        };
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let noise = (sigma > 0.0).then(|| LatentSet::<T>::randn(x.n_views, x.channels, x.height, x.width, &mut rng));
        for (j, xv) in x.data.iter_mut().enumerate() {
            let mut v = ab_prev.sqrt() * x0[j] + dir * e[j];
            if let Some(z) = &noise {
                v += sigma * z.data[j].to_f64_lossy();
            }
            *xv = T::from_f64_lossy(v);
        }
    }
    Ok(x)
}

/// Codec latents in `[0, 1]` to the `[-1, 1]` range the diffusion process runs in.
pub fn to_signed<T: Scalar>(mut latents: LatentSet<T>) -> LatentSet<T> {
    let (two, one) = (T::from_f64_lossy(2.0), T::one());
    latents.data.iter_mut().for_each(|v| *v = two * *v - one);
    latents
}

/// Inverse of [`to_signed`].
pub fn from_signed<T: Scalar>(mut latents: LatentSet<T>) -> LatentSet<T> {
    let half = T::from_f64_lossy(0.5);
    latents.data.iter_mut().for_each(|v| *v = (*v + T::one()) * half);
    latents
}

/// Maps images to model latents and back.
pub trait Codec<T: Scalar> {
    fn encode(&self, images: &[Image]) -> LatentSet<T>;
    fn decode(&self, latents: &LatentSet<T>, height: usize, width: usize) -> Vec<Image>;
    /// Latent spatial size for an image size.
    fn latent_size(&self, height: usize, width: usize) -> (usize, usize);
}

/// Latents are the pixels themselves.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl<T: Scalar> Codec<T> for IdentityCodec {
    fn encode(&self, images: &[Image]) -> LatentSet<T> {
        LatentSet::from_images(images)
    }

    fn decode(&self, latents: &LatentSet<T>, _height: usize, _width: usize) -> Vec<Image> {
        latents.to_images()
    }

    fn latent_size(&self, height: usize, width: usize) -> (usize, usize) {
        (height, width)
    }
}

/// 2×2 area downsampling on encode, bicubic ×2 on decode.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityDs2Codec;

impl<T: Scalar> Codec<T> for IdentityDs2Codec {
    fn encode(&self, images: &[Image]) -> LatentSet<T> {
        let full: LatentSet<T> = LatentSet::from_images(images);
        crate::nn::layers::avgpool2(&full)
    }

    fn decode(&self, latents: &LatentSet<T>, height: usize, width: usize) -> Vec<Image> {
        let p = latents.plane();
        (0..latents.n_views)
            .map(|v| {
                let planes: Vec<Vec<f64>> = (0..latents.channels)
                    .map(|c| latents.view(v)[c * p..(c + 1) * p].iter().map(|x| x.to_f64_lossy()).collect())
                    .collect();
                let up = resize_planes(&planes, latents.height, latents.width, height, width);
                from_planes(&up, height, width)
            })
            .collect()
    }

    fn latent_size(&self, height: usize, width: usize) -> (usize, usize) {
        (height / 2, width / 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    #[default]
    Identity,
    IdentityDs2,
}

impl CodecKind {
    pub fn encode<T: Scalar>(self, images: &[Image]) -> LatentSet<T> {
        match self {
            CodecKind::Identity => IdentityCodec.encode(images),
            CodecKind::IdentityDs2 => IdentityDs2Codec.encode(images),
        }
    }

    pub fn decode<T: Scalar>(self, latents: &LatentSet<T>, height: usize, width: usize) -> Vec<Image> {
        match self {
            CodecKind::Identity => IdentityCodec.decode(latents, height, width),
            CodecKind::IdentityDs2 => IdentityDs2Codec.decode(latents, height, width),
        }
    }
}

/// Encode the degraded set, sample in the signed latent range, decode, clip
/// to `[0, 1]`.
pub fn restore<T: Scalar>(
    model: &MvUnet<T>,
    codec: CodecKind,
    degraded: &[Image],
    spec: &SamplerSpec,
    sched: &NoiseSchedule,
) -> Result<Vec<Image>, DiffusionError> {
    let first = degraded
        .first()
        .ok_or_else(|| DiffusionError::Contract("empty view set".into()))?;
    if degraded.iter().any(|im| !im.same_shape(first)) {
        return Err(DiffusionError::Contract("degraded images differ in shape".into()));
    }
    let cond = to_signed(codec.encode::<T>(degraded));
    let x = from_signed(sample(model, &cond, model.config.in_channels, spec, sched)?);
    Ok(codec.decode(&x, first.height, first.width))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mv_unet::MvUnetConfig;

    /// Returns the noise consistent with a known clean signal.
    struct Oracle<'a> {
        x0: &'a LatentSet<f64>,
        sched: &'a NoiseSchedule,
    }

    impl EpsModel<f64> for Oracle<'_> {
        fn predict(&self, x: &LatentSet<f64>, _c: &LatentSet<f64>, k: usize) -> Result<LatentSet<f64>, DiffusionError> {
            let ab = self.sched.alpha_bar(k);
            let mut out = x.clone();
            for (o, x0) in out.data.iter_mut().zip(&self.x0.data) {
                *o = (*o - ab.sqrt() * x0) / (1.0 - ab).sqrt();
            }
            Ok(out)
        }
    }

    struct Constant(f64);

    impl EpsModel<f64> for Constant {
        fn predict(&self, x: &LatentSet<f64>, _c: &LatentSet<f64>, _k: usize) -> Result<LatentSet<f64>, DiffusionError> {
            let mut o = x.clone();
            o.data.iter_mut().for_each(|v| *v = self.0);
            Ok(o)
        }
    }

    #[test]
    fn default_schedule_values() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar(0) - 0.9999).abs() < 1e-15);
        // independent product in log space
        let log: f64 = (0..1000).map(|k| (1.0 - (1e-4 + (0.02 - 1e-4) * k as f64 / 999.0)).ln()).sum();
        assert!((s.alpha_bar(999) - log.exp()).abs() < 1e-12);
        assert!((s.alpha_bar(999) - 4.0e-5).abs() < 1e-6, "{}", s.alpha_bar(999));
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn schedule_contracts() {
        assert!(make_schedule(100, 0.0, 0.02).is_err());
        assert!(make_schedule(100, 0.03, 0.02).is_err());
        assert!(make_schedule(100, 1e-4, 1.0).is_err());
        // unscaled betas over a short chain leave too much signal
        assert!(make_schedule(200, 1e-4, 0.02).is_err());
        let s = scaled_linear_schedule(200).unwrap();
        assert!(s.alpha_bar(0) > 0.99 && s.alpha_bar(199) < 0.05);
    }

    #[test]
    fn q_sample_inverts() {
        let s = scaled_linear_schedule(200).unwrap();
        let mut rng = rng_from_seed(0);
        let x0 = LatentSet::<f64>::randn(2, 3, 4, 4, &mut rng);
        let eps = LatentSet::<f64>::randn(2, 3, 4, 4, &mut rng);
        for k in [0, 50, 199] {
            let xk = q_sample(&x0, k, &eps, &s).unwrap();
            let ab = s.alpha_bar(k);
            for ((x, e), want) in xk.data.iter().zip(&eps.data).zip(&x0.data) {
                assert!(((x - (1.0 - ab).sqrt() * e) / ab.sqrt() - want).abs() < 1e-6);
            }
        }
        let bad = LatentSet::<f64>::zeros(1, 3, 4, 4);
        assert!(q_sample(&x0, 0, &bad, &s).is_err());
    }

    #[test]
    fn q_sample_preserves_variance() {
        let s = scaled_linear_schedule(200).unwrap();
        let mut rng = rng_from_seed(1);
        let x0 = LatentSet::<f64>::randn(1, 1, 100, 100, &mut rng);
        let eps = LatentSet::<f64>::randn(1, 1, 100, 100, &mut rng);
        for k in [10, 100, 190] {
            let xk = q_sample(&x0, k, &eps, &s).unwrap();
            let n = xk.data.len() as f64;
            let m = xk.data.iter().sum::<f64>() / n;
            let v = xk.data.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            assert!((v - 1.0).abs() < 0.02 * 1.5, "var {v}");
        }
    }

    #[test]
    fn oracle_sampler_recovers_signal() {
        let s = scaled_linear_schedule(200).unwrap();
        let mut rng = rng_from_seed(2);
        let x0 = LatentSet::<f64>::randn(2, 3, 4, 4, &mut rng);
        let oracle = Oracle { x0: &x0, sched: &s };
        for n in [1, 5, 25, 200] {
            for kind in [SamplerKind::Deterministic, SamplerKind::Ancestral] {
                let spec = SamplerSpec {
                    kind,
                    n_steps: n,
                    seed: 3,
                    clip_denoised: false,
                };
                let out = sample(&oracle, &x0, 3, &spec, &s).unwrap();
                for (a, b) in out.data.iter().zip(&x0.data) {
                    assert!((a - b).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn single_step_is_one_jump() {
        let s = scaled_linear_schedule(200).unwrap();
        let cond = LatentSet::<f64>::zeros(1, 1, 2, 2);
        let out = sample(&Constant(0.5), &cond, 1, &SamplerSpec::deterministic(1, 9), &s).unwrap();
        let x = LatentSet::<f64>::randn(1, 1, 2, 2, &mut rng_from_seed(9));
        let ab = s.alpha_bar(199);
        for (o, xv) in out.data.iter().zip(&x.data) {
            assert!((o - (xv - (1.0 - ab).sqrt() * 0.5) / ab.sqrt()).abs() < 1e-12);
        }
        assert_eq!(sampling_timesteps(200, 1), vec![199]);
        assert_eq!(sampling_timesteps(10, 10), (0..10).rev().collect::<Vec<_>>());
        assert_eq!(sampling_timesteps(200, 4), vec![199, 149, 99, 49]);
    }

    #[test]
    fn oracle_loss_is_zero_and_constant_loss_matches_monte_carlo() {
        let s = scaled_linear_schedule(200).unwrap();
        let mut rng = rng_from_seed(4);
        let x0 = LatentSet::<f64>::randn(2, 3, 4, 4, &mut rng);
        let oracle = Oracle { x0: &x0, sched: &s };
        let l = training_loss(&oracle, &x0, &x0, None, &s, &mut rng).unwrap();
        assert!(l.loss < 1e-20);
        // E(ε − c)² = 1 + c²
        let c = 0.3;
        let n = 400;
        let losses: Vec<f64> = (0..n)
            .map(|_| training_loss(&Constant(c), &x0, &x0, None, &s, &mut rng).unwrap().loss)
            .collect();
        let mean = losses.iter().sum::<f64>() / n as f64;
        let sd = (losses.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((mean - (1.0 + c * c)).abs() < 3.0 * sd / (n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let s = scaled_linear_schedule(200).unwrap();
        let mut net = MvUnet::<f64>::init(MvUnetConfig::tiny(), 1).unwrap();
        let mut rng = rng_from_seed(5);
        let x0 = LatentSet::<f64>::randn(2, 3, 8, 8, &mut rng);
        let cond = LatentSet::<f64>::randn(2, 3, 8, 8, &mut rng);
        let mut mask = x0.zeros_like();
        mask.data.iter_mut().enumerate().for_each(|(i, m)| *m = (i % 3 != 0) as u8 as f64);
        let mut g = net.params.zeros_like();
        let base = training_loss_grad(&net, &x0, &cond, Some(&mask), &s, &mut rng_from_seed(6), &mut g).unwrap();
        let loss = |n: &MvUnet<f64>| training_loss(n, &x0, &cond, Some(&mask), &s, &mut rng_from_seed(6)).unwrap();
        assert_eq!(loss(&net), base);
        let total = net.params.n_scalars();
        for i in (0..total).step_by(total / 20) {
            let (id, off) = net.params.locate(i);
            let h = 1e-5;
            let orig = net.params.get(id)[off];
            net.params.get_mut(id)[off] = orig + h;
            let lp = loss(&net).loss;
            net.params.get_mut(id)[off] = orig - h;
            let lm = loss(&net).loss;
            net.params.get_mut(id)[off] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = g.get(id)[off];
            assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-7), "{i}: {fd} vs {an}");
        }
    }

    #[test]
    fn codecs_round_trip_and_resize() {
        let im = Image::from_fn(8, 12, 3, |y, x, c| ((y * 12 + x) * 3 + c) as f64 / 400.0).quantized();
        let lat: LatentSet<f32> = CodecKind::Identity.encode(std::slice::from_ref(&im));
        assert_eq!(CodecKind::Identity.decode(&lat, 8, 12)[0], im);
        let lat: LatentSet<f32> = CodecKind::IdentityDs2.encode(&[im.clone(), im.clone()]);
        assert_eq!(lat.shape(), [2, 3, 4, 6]);
        let back = CodecKind::IdentityDs2.decode(&lat, 8, 12);
        assert_eq!((back[1].height, back[1].width), (8, 12));
    }

    #[test]
    fn restore_runs_for_more_views_than_trained() {
        let s = scaled_linear_schedule(200).unwrap();
        let net = MvUnet::<f32>::init(MvUnetConfig::tiny(), 0).unwrap();
        let ims: Vec<Image> = (0..8).map(|i| Image::filled(8, 8, 3, i as f32 / 8.0)).collect();
        let spec = SamplerSpec::deterministic(3, 1);
        let a = restore(&net, CodecKind::Identity, &ims, &spec, &s).unwrap();
        let b = restore(&net, CodecKind::Identity, &ims, &spec, &s).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a, b);
        assert!(a.iter().all(|im| im.data.iter().all(|v| (0.0..=1.0).contains(v))));
    }
}
