//! Training loop: view-set sampling with order shuffling, per-task
//! degradation, Adam steps on the noise-matching loss, checkpoints and a
//! loss log.
//!
//! Every step draws its randomness from `derived_rng(seed, step)`, so a run
//! resumed from a checkpoint (weights, moments, step) replays the
//! uninterrupted run exactly.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{DataError, DepthMap, Image, Scene, ViewSet};
use crate::degradations::{degrade_viewset, BlurParams, DegradationTask, DegradeError};
use crate::diffusion::{
    scaled_linear_schedule, to_signed, training_loss_grad, CodecKind, DiffusionError, NoiseSchedule,
};
use crate::mv_unet::{read_file, write_file, write_header, write_store, ModelError, MvUnet, MvUnetConfig, Reader};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{derived_rng, Rng};
use crate::scalar::Scalar;
use crate::tensor::LatentSet;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step} (k={k}, sets {sets:?})")]
    NonFinite { step: u64, k: usize, sets: Vec<String> },
    #[error("no anchor with {needed} candidates after {tries} draws")]
    NoValidSet { needed: usize, tries: usize },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Degrade(#[from] DegradeError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// What the network learns to produce from what.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainTask {
    Deblur(BlurParams),
    Sr { factor: usize },
    /// Depth latents conditioned on clean RGB.
    Depth,
}

impl TrainTask {
    pub fn degradation(&self) -> Option<DegradationTask> {
        match *self {
            TrainTask::Deblur(p) => Some(DegradationTask::Deblur(p)),
            TrainTask::Sr { factor } => Some(DegradationTask::Sr { factor }),
            TrainTask::Depth => None,
        }
    }
}

fn default_diffusion_steps() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_sets: usize,
    pub views_per_set: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub task: TrainTask,
    pub seed: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    #[serde(default)]
    pub codec: CodecKind,
    #[serde(default = "default_diffusion_steps")]
    pub diffusion_steps: usize,
    pub model: MvUnetConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.views_per_set == 0 || self.views_per_set > crate::dataio::MAX_SET_VIEWS {
            return bad(format!("views_per_set {} outside 1..=16", self.views_per_set));
        }
        if self.batch_sets == 0 {
            return bad("batch_sets must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        if let TrainTask::Deblur(p) = &self.task {
            p.validate()?;
        }
        self.model.validate()?;
        if self.model.in_channels != 3 || self.model.cond_channels != 3 {
            return bad("image tasks use 3 latent and 3 condition channels".into());
        }
        scaled_linear_schedule(self.diffusion_steps)?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, TrainError> {
        Ok(scaled_linear_schedule(self.diffusion_steps)?)
    }
}

/// Anchor → candidate lists for one scene.
pub type ViewLists = BTreeMap<usize, Vec<usize>>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub clean: ViewSet,
    pub degraded: ViewSet,
}

const MAX_SET_TRIES: usize = 100;

/// Picks a scene and an anchor, draws `n − 1` of the anchor's candidates,
/// shuffles the order and degrades every view independently.
pub fn sample_training_set(
    scenes: &[Scene],
    lists: &[ViewLists],
    n: usize,
    task: &TrainTask,
    rng: &mut Rng,
) -> Result<TrainingSet, TrainError> {
    if scenes.is_empty() || scenes.len() != lists.len() {
        return Err(TrainError::Config("need one view list per scene".into()));
    }
    for _ in 0..MAX_SET_TRIES {
        let s = rng.random_range(0..scenes.len());
        let anchors: Vec<usize> = lists[s].keys().copied().collect();
        let Some(&anchor) = anchors.choose(rng) else {
            continue;
        };
        let cands = &lists[s][&anchor];
        if cands.len() + 1 < n {
            continue;
        }
        let mut views: Vec<usize> = std::iter::once(anchor)
            .chain(cands.choose_multiple(rng, n - 1).copied())
            .collect();
        views.shuffle(rng);
        let clean = scenes[s].view_set(&views)?;
        let seed: u64 = rng.random();
        let degraded = match task.degradation() {
            Some(t) => degrade_viewset(&clean, &t, seed)?,
            None => clean.clone(),
        };
        return Ok(TrainingSet { clean, degraded });
    }
    Err(TrainError::NoValidSet {
        needed: n.saturating_sub(1),
        tries: MAX_SET_TRIES,
    })
}

/// Maps valid depths to `[0, 1]` through the 2nd–98th percentile range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthNormalization {
    pub lo: f64,
    pub hi: f64,
}

/// Linear-interpolated percentile of sorted values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    } else {
        sorted[i]
    }
}

impl DepthNormalization {
    pub fn fit(depths: &[DepthMap]) -> Result<Self, TrainError> {
        let mut vals: Vec<f64> = depths
            .iter()
            .flat_map(|d| d.depth.iter().zip(&d.valid).filter(|(_, v)| **v).map(|(x, _)| *x as f64))
            .collect();
        if vals.is_empty() {
            return Err(TrainError::Data(DataError::Invalid("depth map has no valid pixels".into())));
        }
        vals.sort_by(f64::total_cmp);
        Ok(DepthNormalization {
            lo: percentile(&vals, 2.0),
            hi: percentile(&vals, 98.0),
        })
    }

    pub fn degenerate(&self) -> bool {
        self.hi - self.lo < 1e-6
    }

    pub fn encode_value(&self, d: f64) -> f64 {
        if self.degenerate() {
            0.5
        } else {
            ((d - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
        }
    }

    pub fn decode_value(&self, v: f64) -> f64 {
        if self.degenerate() {
            self.lo
        } else {
            self.lo + v * (self.hi - self.lo)
        }
    }
}

/// Three identical channels; invalid pixels are 0.
pub fn depth_task_encode(depth: &DepthMap, norm: &DepthNormalization) -> Image {
    Image::from_fn(depth.height, depth.width, 3, |y, x, _| {
        depth.at(y, x).map_or(0.0, |d| norm.encode_value(d))
    })
}

/// Channel mean mapped back to meters; every pixel is marked valid.
pub fn depth_task_decode(image: &Image, norm: &DepthNormalization) -> DepthMap {
    let gray: Vec<f32> = (0..image.height * image.width)
        .map(|i| {
            let px = &image.data[i * image.channels..(i + 1) * image.channels];
            let v = px.iter().map(|v| *v as f64).sum::<f64>() / image.channels as f64;
            norm.decode_value(v) as f32
        })
        .collect();
    DepthMap::from_values(image.height, image.width, gray)
}

/// `(target, condition, mask)` latents for one set; target and condition are
/// in the signed diffusion range.
pub fn set_latents<T: Scalar>(
    set: &TrainingSet,
    task: &TrainTask,
    codec: CodecKind,
) -> Result<(LatentSet<T>, LatentSet<T>, Option<LatentSet<T>>), TrainError> {
    match task {
        TrainTask::Depth => {
            let depths = set
                .clean
                .depths
                .as_ref()
                .ok_or_else(|| TrainError::Config("depth task needs scene depth".into()))?;
            let norm = DepthNormalization::fit(depths)?;
            let targets: Vec<Image> = depths.iter().map(|d| depth_task_encode(d, &norm)).collect();
            let masks: Vec<Image> = depths
                .iter()
                .map(|d| Image::from_fn(d.height, d.width, 3, |y, x, _| d.at(y, x).is_some() as u8 as f64))
                .collect();
            let mut mask: LatentSet<T> = codec.encode(&masks);
            // a latent counts only if every pixel behind it is valid
            mask.data.iter_mut().for_each(|m| *m = if *m >= T::one() { T::one() } else { T::zero() });
            Ok((
                to_signed(codec.encode(&targets)),
                to_signed(codec.encode(&set.degraded.images)),
                Some(mask),
            ))
        }
        _ => Ok((
            to_signed(codec.encode(&set.clean.images)),
            to_signed(codec.encode(&set.degraded.images)),
            None,
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub k: usize,
}

const HISTORY: usize = 1024;

#[derive(Debug, Clone)]
pub struct TrainState<T> {
    /// Completed optimizer steps.
    pub step: u64,
    pub model: MvUnet<T>,
    pub adam: Adam<T>,
    /// Most recent step records.
    pub history: VecDeque<StepRecord>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self, TrainError> {
        let model = MvUnet::init(cfg.model.clone(), cfg.seed)?;
        let adam = Adam::new(cfg.optimizer, &model.params);
        Ok(TrainState {
            step: 0,
            model,
            adam,
            history: VecDeque::with_capacity(HISTORY),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut out = Vec::new();
        write_header(&mut out, T::BYTES, &self.model.config);
        write_store(&mut out, &self.model.params);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        let c = self.adam.config;
        for v in [c.beta1, c.beta2, c.eps] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        write_store(&mut out, &self.adam.m);
        write_store(&mut out, &self.adam.v);
        Ok(write_file(path, &out)?)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = read_file(path)?;
        let mut r = Reader::new(&bytes, path);
        let (width, config) = r.header()?;
        if width != T::BYTES {
            return Err(r.err(format!("stored {width}-byte scalars, expected {}", T::BYTES)).into());
        }
        let params = r.store::<T>()?;
        let model = MvUnet::<T>::init(config, 0)?.with_params(params)?;
        let step = r.u64()?;
        let t = r.u64()?;
        let mut f = [0.0; 3];
        for v in &mut f {
            *v = f64::from_bits(r.u64()?);
        }
        let m = r.store::<T>()?;
        let v = r.store::<T>()?;
        if !r.at_end() || !m.same_layout(&model.params) || !v.same_layout(&model.params) {
            return Err(r.err("optimizer state does not match parameters".into()).into());
        }
        Ok(TrainState {
            step,
            model,
            adam: Adam {
                config: AdamConfig {
                    beta1: f[0],
                    beta2: f[1],
                    eps: f[2],
                },
                m,
                v,
                t,
            },
            history: VecDeque::with_capacity(HISTORY),
        })
    }
}

/// Binds a config to its data.
pub struct Trainer<'a> {
    pub cfg: &'a TrainConfig,
    pub scenes: &'a [Scene],
    pub lists: &'a [ViewLists],
    sched: NoiseSchedule,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a TrainConfig, scenes: &'a [Scene], lists: &'a [ViewLists]) -> Result<Self, TrainError> {
        cfg.validate()?;
        if scenes.is_empty() {
            return Err(TrainError::Config("no training scenes".into()));
        }
        if lists.iter().all(|l| l.values().all(|c| c.len() + 1 < cfg.views_per_set)) {
            return Err(TrainError::NoValidSet {
                needed: cfg.views_per_set - 1,
                tries: 0,
            });
        }
        Ok(Trainer {
            cfg,
            scenes,
            lists,
            sched: cfg.schedule()?,
        })
    }

    /// One optimizer step over `batch_sets` sets.
    pub fn step<T: Scalar>(&self, state: &mut TrainState<T>) -> Result<StepRecord, TrainError> {
        let cfg = self.cfg;
        let mut rng = derived_rng(cfg.seed, state.step);
        let mut grads = state.model.params.zeros_like();
        let mut total = 0.0;
        let mut first_k = 0;
        let mut ids = Vec::new();
        for b in 0..cfg.batch_sets {
            let set = sample_training_set(self.scenes, self.lists, cfg.views_per_set, &cfg.task, &mut rng)?;
            ids.push(format!("{}:{:?}", set.clean.scene_id, set.clean.view_indices));
            let (x0, cond, mask) = set_latents::<T>(&set, &cfg.task, cfg.codec)?;
            let s = training_loss_grad(&state.model, &x0, &cond, mask.as_ref(), &self.sched, &mut rng, &mut grads)?;
            if !s.loss.is_finite() {
                return Err(TrainError::NonFinite {
                    step: state.step,
                    k: s.k,
                    sets: ids,
                });
            }
            if b == 0 {
                first_k = s.k;
            }
            total += s.loss;
        }
        let inv = T::from_f64_lossy(1.0 / cfg.batch_sets as f64);
        for e in &mut grads.entries {
            e.data.iter_mut().for_each(|g| *g *= inv);
        }
        if !grads.all_finite() {
            return Err(TrainError::NonFinite {
                step: state.step,
                k: first_k,
                sets: ids,
            });
        }
        state.adam.step(&mut state.model.params, &grads, cfg.learning_rate);
        let rec = StepRecord {
            step: state.step,
            loss: total / cfg.batch_sets as f64,
            k: first_k,
        };
        state.step += 1;
        if state.history.len() == HISTORY {
            state.history.pop_front();
        }
        state.history.push_back(rec);
        Ok(rec)
    }

    /// Runs until `state.step == until`, appending to `loss.csv` and writing
    /// checkpoints under `out_dir` when given.
    pub fn run<T: Scalar>(
        &self,
        state: &mut TrainState<T>,
        until: u64,
        out_dir: Option<&Path>,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<(), TrainError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| TrainError::Io { path, source }
        };
        let mut log = match out_dir {
            Some(dir) => {
                let ck = dir.join("checkpoints");
                fs::create_dir_all(&ck).map_err(io(&ck))?;
                let path = dir.join("loss.csv");
                let fresh = state.step == 0 || !path.exists();
                let mut f = fs::OpenOptions::new()
                    .create(true)
                    .append(!fresh)
                    .write(true)
                    .truncate(fresh)
                    .open(&path)
                    .map_err(io(&path))?;
                if fresh {
                    writeln!(f, "step,loss,k").map_err(io(&path))?;
                }
                Some((f, path))
            }
            None => None,
        };
        while state.step < until {
            let rec = self.step(state)?;
            on_step(&rec);
            if let Some((f, path)) = &mut log {
                writeln!(f, "{},{},{}", rec.step, rec.loss, rec.k).map_err(io(path))?;
            }
            let every = self.cfg.checkpoint_every;
            let due = (every > 0 && state.step.is_multiple_of(every)) || state.step == until;
            if let (Some(dir), true) = (out_dir, due) {
                state.save(&checkpoint_path(dir, state.step))?;
            }
        }
        Ok(())
    }
}

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join("checkpoints").join(format!("step_{step:07}.ckpt"))
}

/// Latest `step_*.ckpt` under `run_dir/checkpoints`.
pub fn latest_checkpoint(run_dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = fs::read_dir(run_dir.join("checkpoints"))
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    found.sort();
    found.pop()
}

/// Fresh run of `cfg.iterations` steps.
pub fn train<T: Scalar>(
    scenes: &[Scene],
    lists: &[ViewLists],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainState<T>, TrainError> {
    let trainer = Trainer::new(cfg, scenes, lists)?;
    let mut state = TrainState::new(cfg)?;
    trainer.run(&mut state, cfg.iterations, out_dir, |_| {})?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic_scene, SyntheticSpec};
    use crate::rng::rng_from_seed;

    fn scene() -> (Scene, ViewLists) {
        let s = generate_synthetic_scene(&SyntheticSpec {
            n_views: 6,
            resolution: (16, 16),
            seed: 1,
        })
        .unwrap();
        // every other view is a candidate, so sets are always available
        let lists: ViewLists = (0..6).map(|a| (a, (0..6).filter(|&c| c != a).collect())).collect();
        (s, lists)
    }

    fn tiny_cfg(task: TrainTask) -> TrainConfig {
        TrainConfig {
            iterations: 3,
            batch_sets: 1,
            views_per_set: 2,
            learning_rate: 1e-3,
            optimizer: AdamConfig::default(),
            task,
            seed: 7,
            checkpoint_every: 2,
            codec: CodecKind::Identity,
            diffusion_steps: 50,
            model: MvUnetConfig::tiny(),
        }
    }

    #[test]
    fn single_view_sets_and_determinism() {
        let (s, l) = scene();
        let task = TrainTask::Sr { factor: 2 };
        let a = sample_training_set(std::slice::from_ref(&s), std::slice::from_ref(&l), 1, &task, &mut rng_from_seed(3)).unwrap();
        assert_eq!(a.clean.len(), 1);
        let b = sample_training_set(std::slice::from_ref(&s), std::slice::from_ref(&l), 1, &task, &mut rng_from_seed(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.clean.images, a.degraded.images);
    }

    #[test]
    fn anchor_position_is_uniform() {
        let (s, _) = scene();
        // anchor 0 only, so the anchor's slot is observable
        let lists: ViewLists = [(0, vec![1, 2, 3, 4, 5])].into_iter().collect();
        let scenes = [s];
        let mut rng = rng_from_seed(5);
        let mut counts = [0usize; 4];
        let n = 10_000;
        for _ in 0..n {
            let set = sample_training_set(&scenes, std::slice::from_ref(&lists), 4, &TrainTask::Depth, &mut rng).unwrap();
            let pos = set.clean.view_indices.iter().position(|&v| v == 0).unwrap();
            counts[pos] += 1;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((f - 0.25).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn short_lists_are_rejected() {
        let (s, _) = scene();
        let lists: ViewLists = [(0, vec![1])].into_iter().collect();
        let r = sample_training_set(&[s], &[lists], 4, &TrainTask::Depth, &mut rng_from_seed(0));
        assert!(matches!(r, Err(TrainError::NoValidSet { .. })));
    }

    #[test]
    fn depth_codec_round_trip_and_rules() {
        let d = DepthMap::from_values(4, 5, (0..20).map(|i| 1.0 + 0.1 * i as f32).collect());
        let norm = DepthNormalization::fit(std::slice::from_ref(&d)).unwrap();
        let img = depth_task_encode(&d, &norm);
        let back = depth_task_decode(&img, &norm);
        for i in 0..20 {
            let v = d.depth[i] as f64;
            if v >= norm.lo && v <= norm.hi {
                assert!((back.depth[i] as f64 - v).abs() < 1e-4);
            }
        }
        assert_eq!(img.get(3, 4, 0), 1.0);
        assert_eq!(img.get(0, 0, 1), 0.0);
        let flat = DepthMap::from_values(3, 3, vec![2.5; 9]);
        let n = DepthNormalization::fit(std::slice::from_ref(&flat)).unwrap();
        assert!(depth_task_encode(&flat, &n).data.iter().all(|v| *v == 0.5));
        let empty = DepthMap::from_values(2, 2, vec![0.0; 4]);
        assert!(DepthNormalization::fit(&[empty]).is_err());
    }

    #[test]
    fn percentile_matches_linear_interpolation() {
        let v: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        assert_eq!(percentile(&v, 2.0), 2.0);
        assert_eq!(percentile(&[1.0, 2.0], 50.0), 1.5);
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let (s, l) = scene();
        let mut cfg = tiny_cfg(TrainTask::Sr { factor: 2 });
        cfg.learning_rate = 0.0;
        let st = train::<f32>(&[s], &[l], &cfg, None).unwrap();
        let fresh = MvUnet::<f32>::init(cfg.model.clone(), cfg.seed).unwrap();
        assert_eq!(st.model.params, fresh.params);
        assert_eq!(st.step, 3);
    }

    #[test]
    fn resume_replays_uninterrupted_run() {
        let (s, l) = scene();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(TrainTask::Deblur(BlurParams {
            size_mean: 3.0,
            size_std: 0.5,
            intensity_min: 0.0,
            intensity_max: 1.0,
        }));
        cfg.iterations = 5;
        let scenes = [s];
        let lists = [l];
        let tr = Trainer::new(&cfg, &scenes, &lists).unwrap();
        let mut full = TrainState::<f32>::new(&cfg).unwrap();
        let mut recs = Vec::new();
        tr.run(&mut full, 5, Some(dir.path()), |r| recs.push(*r)).unwrap();
        let mut resumed = TrainState::<f32>::load(&checkpoint_path(dir.path(), 2)).unwrap();
        assert_eq!(resumed.step, 2);
        let mut again = Vec::new();
        tr.run(&mut resumed, 5, None, |r| again.push(*r)).unwrap();
        assert_eq!(&recs[2..], &again[..]);
        assert_eq!(resumed.model.params, full.model.params);
        assert_eq!(latest_checkpoint(dir.path()).unwrap(), checkpoint_path(dir.path(), 5));
        let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.starts_with("step,loss,k\n0,"));
    }

    #[test]
    fn depth_task_masks_invalid_pixels() {
        let (mut s, l) = scene();
        for v in &mut s.views {
            for i in 0..40 {
                v.depth.valid[i] = false;
                v.depth.depth[i] = 0.0;
            }
        }
        let set = sample_training_set(&[s], &[l], 2, &TrainTask::Depth, &mut rng_from_seed(1)).unwrap();
        assert_eq!(set.clean.images, set.degraded.images);
        let (x0, cond, mask) = set_latents::<f64>(&set, &TrainTask::Depth, CodecKind::Identity).unwrap();
        let mask = mask.unwrap();
        assert_eq!(cond.shape(), x0.shape());
        for v in 0..2 {
            for c in 0..3 {
                let plane = &mask.view(v)[c * 256..(c + 1) * 256];
                let target = &x0.view(v)[c * 256..(c + 1) * 256];
                assert!(plane[..40].iter().all(|m| *m == 0.0));
                assert!(plane[40..].iter().all(|m| *m == 1.0));
                assert!(target[..40].iter().all(|t| *t == -1.0));
            }
        }
        let mut g = MvUnet::<f64>::init(MvUnetConfig::tiny(), 0).unwrap().params.zeros_like();
        let net = MvUnet::<f64>::init(MvUnetConfig::tiny(), 0).unwrap();
        let sched = scaled_linear_schedule(50).unwrap();
        let r = training_loss_grad(&net, &x0, &cond, Some(&mask), &sched, &mut rng_from_seed(2), &mut g).unwrap();
        assert!(r.loss.is_finite() && g.all_finite());
    }
}
