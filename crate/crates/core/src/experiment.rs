//! Dataset → training → ensemble evaluation, end to end.

use crate::data::{window_sequences, Dataset, DatasetKind, SyntheticSpec};
use crate::diffusion::{NoiseSchedule, VarianceMode, DEFAULT_COSINE_OFFSET};
use crate::error::{Error, Result};
use crate::metrics::{crps_video, CrpsReport};
use crate::nn::{BlockConfig, DiffusionModel, ParamStore, Profile, RvdNet};
use crate::tensor::Tensor;
use crate::train::{generate, SampleConfig, StepStats, TrainConfig, Trainer};

/// Concatenate `(context, future)` pairs into `[p + q, C, H, W]` clips.
pub fn training_windows(videos: &[Tensor<f32>], p: usize, q: usize, stride: usize) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::new();
    for v in videos {
        for (c, f) in window_sequences(v, p, q, stride)? {
            out.push(Tensor::concat_axis0(&[c, f])?);
        }
    }
    Ok(out)
}

/// One `(context, future)` pair per test video, taken from its start.
pub fn test_windows(videos: &[Tensor<f32>], p: usize, q: usize, limit: usize) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
    videos
        .iter()
        .take(limit)
        .map(|v| {
            window_sequences(v, p, q, 1)?
                .into_iter()
                .next()
                .ok_or_else(|| Error::invalid("test video too short"))
        })
        .collect()
}

/// Seed of ensemble member `member` for test window `window`.
pub fn sample_seed(seed: u64, window: usize, member: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((window as u64) << 20 | member as u64)
}

/// Draw `ensemble` forecasts per window and score each against its future.
pub fn evaluate<M: DiffusionModel<f32>>(
    model: &M,
    params: &ParamStore<f32>,
    windows: &[(Tensor<f32>, Tensor<f32>)],
    sched: &NoiseSchedule,
    sample: &SampleConfig,
    ensemble: usize,
    seed: u64,
) -> Result<Vec<CrpsReport>> {
    windows
        .iter()
        .enumerate()
        .map(|(wi, (ctx, fut))| {
            let seeds: Vec<u64> = (0..ensemble).map(|m| sample_seed(seed, wi, m)).collect();
            let videos = generate(model, params, ctx, sched, sample, &seeds)?;
            crps_video(&videos, fut, false)
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// A complete desk-scale run.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub dataset: DatasetKind,
    pub data: SyntheticSpec,
    pub data_seed: u64,
    pub train: TrainConfig,
    pub diffusion_steps: usize,
    pub variance_mode: VarianceMode,
    pub ensemble_size: usize,
    pub eval_windows: usize,
}

impl ExperimentConfig {
    /// Bouncing ball, 16×16, N = 100, p = 2, q = 6.
    pub fn desk_ball(seed: u64) -> Self {
        Self {
            profile: Profile::Desk,
            dataset: DatasetKind::Ball,
            data: synthetic_spec(16, 8),
            data_seed: DATA_SEED,
            train: TrainConfig {
                seed,
                ..TrainConfig::desk()
            },
            diffusion_steps: 100,
            variance_mode: VarianceMode::SqrtPosterior,
            ensemble_size: 8,
            eval_windows: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub losses: Vec<f64>,
    pub reports: Vec<CrpsReport>,
    pub params: ParamStore<f32>,
}

impl ExperimentResult {
    pub fn scalars(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.scalar).collect()
    }

    pub fn median_crps(&self) -> f64 {
        median(&self.scalars())
    }

    /// Per-frame CRPS averaged over test windows.
    pub fn per_frame(&self) -> Vec<f64> {
        let q = self.reports.first().map_or(0, |r| r.per_frame.len());
        (0..q)
            .map(|t| self.reports.iter().map(|r| r.per_frame[t]).sum::<f64>() / self.reports.len() as f64)
            .collect()
    }
}

/// Seed of the synthetic train/test videos, shared by every run.
pub const DATA_SEED: u64 = 7;

/// Synthetic sizes for frames of side `size` and windows of `window` frames.
pub fn synthetic_spec(size: usize, window: usize) -> SyntheticSpec {
    SyntheticSpec {
        train_videos: 256,
        test_videos: 8,
        train_frames: window.max(12),
        test_frames: window,
        height: size,
        width: size,
    }
}

/// Load or generate the dataset and build a fresh trainer for it.
pub fn prepare(cfg: &ExperimentConfig) -> Result<(Dataset, Trainer)> {
    let (p, q) = (cfg.train.context_len, cfg.train.future_len);
    let ds = match &cfg.dataset {
        DatasetKind::Dir(dir) => Dataset::load(dir)?,
        kind => Dataset::synthetic(kind, cfg.data_seed, cfg.data)?,
    };
    let frame = ds.frame_shape();
    let block = BlockConfig::profile(cfg.profile, frame[0]);
    let (net, params) = RvdNet::build(&block, &frame, cfg.train.seed)?;
    let sched = NoiseSchedule::cosine(cfg.diffusion_steps, DEFAULT_COSINE_OFFSET)?;
    let windows = training_windows(&ds.train, p, q, 1)?;
    let trainer = Trainer::new(net, params, sched, cfg.train.clone(), windows)?;
    Ok((ds, trainer))
}

/// Build data and model from `cfg`, train, then score test forecasts.
pub fn run_experiment(cfg: &ExperimentConfig, mut on_step: impl FnMut(&StepStats)) -> Result<ExperimentResult> {
    let (p, q) = (cfg.train.context_len, cfg.train.future_len);
    let (ds, mut trainer) = prepare(cfg)?;
    let mut losses = Vec::with_capacity(cfg.train.max_steps as usize);
    for _ in 0..cfg.train.max_steps {
        let s = trainer.step()?;
        on_step(&s);
        losses.push(s.loss);
    }
    let sample = SampleConfig {
        future_len: q,
        residual: cfg.train.residual,
        variance_mode: cfg.variance_mode,
    };
    let tests = test_windows(&ds.test, p, q, cfg.eval_windows)?;
    let reports = evaluate(&trainer.net, &trainer.params, &tests, &trainer.sched, &sample, cfg.ensemble_size, cfg.train.seed)?;
    Ok(ExperimentResult {
        losses,
        reports,
        params: trainer.params,
    })
}
