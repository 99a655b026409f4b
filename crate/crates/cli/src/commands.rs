use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rvd_core::data::Dataset;
use rvd_core::diagnostics::{run_selfcheck, CheckRecord, SelfcheckOptions};
use rvd_core::diffusion::DEFAULT_COSINE_OFFSET;
use rvd_core::experiment::prepare;
use rvd_core::metrics::{crps_video, export_score_map, report_csv};
use rvd_core::tensor_file::{read_tensor, read_tensor_file, write_tensor, write_tensor_file};
use rvd_core::train::generate;
use rvd_core::{BlockConfig, NoiseSchedule, RvdNet, SampleConfig, Tensor, VarianceMode};
use serde_json::json;

use crate::{CliError, RunConfig};

type CliResult<T = ()> = Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Usage(format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

/// Test hooks for failure paths.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainHooks {
    /// Poison one parameter with NaN right before this step runs.
    pub inject_nan_at: Option<u64>,
}

/// Train from a config; writes `loss.csv`, `schedule.csv`, periodic
/// checkpoints under `checkpoints/` and the final `checkpoint.rvtf`.
pub fn train(cfg: &RunConfig, hooks: TrainHooks) -> CliResult<PathBuf> {
    let exp = cfg.experiment()?;
    let (ds, mut trainer) = prepare(&exp)?;
    let out = &cfg.out_dir;
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    trainer.sched.write_csv(&out.join("schedule.csv"))?;

    let loss_path = out.join("loss.csv");
    let mut log = std::io::BufWriter::new(fs::File::create(&loss_path).map_err(io_err(&loss_path))?);
    writeln!(log, "step,loss,lr,wall_ms").map_err(io_err(&loss_path))?;
    let frame = ds.frame_shape();
    let save = |trainer: &rvd_core::Trainer, path: &Path| -> CliResult {
        let mut set = trainer.checkpoint();
        set.set_meta("profile", cfg.profile.as_str());
        set.set_meta("frame_shape", shape_str(&frame));
        write_tensor_file(path, &set)?;
        Ok(())
    };

    let start = Instant::now();
    let mut result = Ok(());
    for step in 0..cfg.max_steps {
        if hooks.inject_nan_at == Some(step) {
            trainer.params.values_mut()[0].data_mut()[0] = f32::NAN;
        }
        let stats = match trainer.step() {
            Ok(s) => s,
            Err(e) => {
                result = Err(CliError::Core(e));
                break;
            }
        };
        writeln!(log, "{},{},{},{}", stats.step, stats.loss, stats.lr, start.elapsed().as_millis()).map_err(io_err(&loss_path))?;
        if cfg.checkpoint_every > 0 && stats.step % cfg.checkpoint_every == 0 {
            save(&trainer, &ckpt_dir.join(format!("step_{:06}.rvtf", stats.step)))?;
        }
    }
    log.flush().map_err(io_err(&loss_path))?;
    result?;
    let final_path = out.join("checkpoint.rvtf");
    save(&trainer, &final_path)?;
    Ok(final_path)
}

/// Load `p` context frames from a TensorFile video or `test:<index>`. For
/// test videos the matching future is returned too.
fn load_context(cfg: &RunConfig, source: &str) -> CliResult<(Tensor<f32>, Option<Tensor<f32>>)> {
    let (p, q) = (cfg.context_len, cfg.future_len);
    let video = match source.strip_prefix("test:") {
        Some(idx) => {
            let idx: usize = idx
                .parse()
                .map_err(|_| CliError::Usage(format!("bad test index in `{source}`")))?;
            let exp = cfg.experiment()?;
            let ds = match &exp.dataset {
                rvd_core::DatasetKind::Dir(d) => Dataset::load(d)?,
                kind => Dataset::synthetic(kind, exp.data_seed, exp.data)?,
            };
            ds.test
                .get(idx)
                .cloned()
                .ok_or_else(|| CliError::Usage(format!("test index {idx} out of range ({} videos)", ds.test.len())))?
        }
        None => read_tensor(Path::new(source))?,
    };
    if video.rank() != 4 || video.shape()[0] < p {
        return Err(CliError::Usage(format!(
            "context source must be [T >= {p}, C, H, W], got {:?}",
            video.shape()
        )));
    }
    let truth = if source.starts_with("test:") && video.shape()[0] >= p + q {
        Some(video.slice_axis0(p, q)?)
    } else {
        None
    };
    Ok((video.slice_axis0(0, p)?, truth))
}

/// Sample `samples` futures for one context. Writes
/// `samples/sample_NNN.rvtf`, `samples/manifest.json` and, for test
/// contexts, `truth.rvtf`.
pub fn generate_cmd(cfg: &RunConfig, checkpoint: &Path, source: &str, samples: usize) -> CliResult<Vec<PathBuf>> {
    if samples == 0 {
        return Err(CliError::Usage("--samples must be >= 1".into()));
    }
    let set = read_tensor_file(checkpoint)?;
    let (context, truth) = load_context(cfg, source)?;
    let frame = context.shape()[1..].to_vec();
    if let Ok(saved) = set.meta("frame_shape") {
        if saved != shape_str(&frame) {
            return Err(CliError::Usage(format!("checkpoint frames are {saved}, context frames are {}", shape_str(&frame))));
        }
    }
    for (key, want) in [("profile", cfg.profile.as_str().to_string()), ("steps", cfg.steps.to_string()), ("mode", cfg.mode.as_str().to_string())] {
        if let Ok(saved) = set.meta(key) {
            if saved != want {
                return Err(CliError::Usage(format!("checkpoint has {key}={saved}, config has {want}")));
            }
        }
    }
    let (net, mut params) = RvdNet::build(&BlockConfig::profile(cfg.profile, frame[0]), &frame, cfg.seed)?;
    params.import(&set, "param/")?;
    let sched = NoiseSchedule::cosine(cfg.steps, DEFAULT_COSINE_OFFSET)?;
    let sc = SampleConfig {
        future_len: cfg.future_len,
        residual: cfg.residual()?,
        variance_mode: cfg.variance_mode,
    };
    let seeds: Vec<u64> = (0..samples as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    let videos = generate(&net, &params, &context, &sched, &sc, &seeds)?;

    let dir = cfg.out_dir.join("samples");
    create_dir(&dir)?;
    let mut entries = Vec::with_capacity(samples);
    let mut paths = Vec::with_capacity(samples);
    for (i, (v, seed)) in videos.iter().zip(&seeds).enumerate() {
        let name = format!("sample_{i:03}.rvtf");
        let path = dir.join(&name);
        write_tensor(&path, &v.clamp(-1.0, 1.0))?;
        entries.push(json!({ "file": name, "seed": seed, "shape": v.shape() }));
        paths.push(path);
    }
    let manifest = json!({
        "checkpoint": checkpoint.display().to_string(),
        "context_source": source,
        "context_frames": cfg.context_len,
        "samples": entries,
    });
    let mpath = dir.join("manifest.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest).expect("manifest is valid json") + "\n").map_err(io_err(&mpath))?;
    if let Some(t) = truth {
        write_tensor(&cfg.out_dir.join("truth.rvtf"), &t)?;
    }
    Ok(paths)
}

/// Score every `*.rvtf` in `ensemble_dir` against `truth`. Writes
/// `crps.csv` and per-frame score maps; returns the scalar CRPS.
pub fn eval_crps(ensemble_dir: &Path, truth_path: &Path, out_dir: &Path) -> CliResult<f64> {
    let truth = read_tensor(truth_path)?;
    let mut files: Vec<PathBuf> = fs::read_dir(ensemble_dir)
        .map_err(io_err(ensemble_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "rvtf"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("no .rvtf files in {}", ensemble_dir.display())));
    }
    let ensemble = files.iter().map(|f| read_tensor(f)).collect::<Result<Vec<_>, _>>()?;
    let report = crps_video(&ensemble, &truth, true)?;

    let maps = out_dir.join("maps");
    create_dir(&maps)?;
    let csv = out_dir.join("crps.csv");
    fs::write(&csv, report_csv(&report)).map_err(io_err(&csv))?;
    for t in 0..report.per_frame.len() {
        export_score_map(&report, t, &maps.join(format!("frame_{t:03}")))?;
    }
    Ok(report.scalar)
}

fn record_json(r: &CheckRecord) -> serde_json::Value {
    json!({
        "check": r.name,
        "passed": r.passed,
        "value": r.value,
        "tolerance": r.tolerance,
        "cases": r.cases,
        "elapsed_ms": r.elapsed.as_secs_f64() * 1e3,
        "detail": r.detail,
    })
}

/// Run every diagnostic, writing one JSON object per check to `out`.
pub fn selfcheck(opts: &SelfcheckOptions, out: &mut impl Write) -> CliResult {
    let mut write_err = None;
    let records = run_selfcheck(opts, |r| {
        if let Err(e) = writeln!(out, "{}", record_json(r)).and_then(|_| out.flush()) {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(CliError::Usage(format!("writing report: {e}")));
    }
    let failed: Vec<String> = records.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    let summary = json!({
        "summary": {
            "checks": records.len(),
            "failed": failed,
            "variance_mode": opts.variance_mode.as_str(),
        }
    });
    writeln!(out, "{summary}").map_err(|e| CliError::Usage(format!("writing report: {e}")))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Selfcheck(failed))
    }
}

/// Write the configured dataset as `dataset/{train,test}/seq_NNNNN.rvtf`.
pub fn export_dataset(cfg: &RunConfig) -> CliResult<PathBuf> {
    let exp = cfg.experiment()?;
    let ds = match &exp.dataset {
        rvd_core::DatasetKind::Dir(d) => Dataset::load(d)?,
        kind => Dataset::synthetic(kind, exp.data_seed, exp.data)?,
    };
    let root = cfg.out_dir.join("dataset");
    for (split, videos) in [("train", &ds.train), ("test", &ds.test)] {
        let dir = root.join(split);
        create_dir(&dir)?;
        for (i, v) in videos.iter().enumerate() {
            write_tensor(&dir.join(format!("seq_{i:05}.rvtf")), v)?;
        }
    }
    Ok(root)
}

/// Parse a `n:beta` tamper spec.
pub fn parse_tamper(s: &str) -> Result<(usize, f64), String> {
    let (n, b) = s.split_once(':').ok_or("expected n:beta")?;
    Ok((n.parse().map_err(|e| format!("{e}"))?, b.parse().map_err(|e| format!("{e}"))?))
}

pub fn parse_variance_mode(s: &str) -> Result<VarianceMode, String> {
    s.parse().map_err(|e: rvd_core::Error| e.to_string())
}
