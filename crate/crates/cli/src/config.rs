//! Flat `key=value` run configuration.

use std::path::PathBuf;
use std::str::FromStr;

use rvd_core::data::DatasetKind;
use rvd_core::experiment::{synthetic_spec, ExperimentConfig, DATA_SEED};
use rvd_core::{FlowMode, Profile, ResidualConfig, TrainConfig, VarianceMode};

use crate::CliError;

/// Every key a config file may set.
pub const KEYS: &[&str] = &[
    "profile",
    "dataset",
    "mode",
    "N",
    "sigma",
    "context_len",
    "future_len",
    "batch_size",
    "max_steps",
    "lr_initial",
    "lr_final",
    "seed",
    "ensemble_size",
    "variance_mode",
    "out_dir",
    "checkpoint_every",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub dataset: DatasetKind,
    pub mode: FlowMode,
    /// Diffusion depth `N`.
    pub steps: usize,
    pub sigma: f64,
    pub context_len: usize,
    pub future_len: usize,
    pub batch_size: usize,
    pub max_steps: u64,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub seed: u64,
    pub ensemble_size: usize,
    pub variance_mode: VarianceMode,
    pub out_dir: PathBuf,
    /// Write a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    raw.parse()
        .map_err(|e| CliError::Usage(format!("config key `{key}`: cannot parse `{raw}`: {e}")))
}

impl RunConfig {
    /// Parse config text. Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut seen = std::collections::BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value, got `{line}`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(CliError::Usage(format!("config line {}: unknown key `{key}`", lineno + 1)));
            }
            if seen.insert(key.to_string(), value.to_string()).is_some() {
                return Err(CliError::Usage(format!("config line {}: duplicate key `{key}`", lineno + 1)));
            }
        }
        let get = |k: &str| seen.get(k).map(String::as_str);

        let profile: Profile = get("profile").map_or(Ok(Profile::Desk), |v| parse_value("profile", v))?;
        let desk = profile == Profile::Desk;
        // Desk runs use a short chain and a faster learning rate.
        let (default_n, default_lr) = if desk { (100, (1e-3, 4e-4)) } else { (1600, (5e-5, 2e-5)) };
        let train = TrainConfig::desk();
        let out_dir = get("out_dir")
            .filter(|v| !v.is_empty())
            .ok_or_else(|| CliError::Usage("config key `out_dir` is required".into()))?;

        let cfg = Self {
            profile,
            dataset: get("dataset").map_or(Ok(DatasetKind::Ball), |v| parse_value("dataset", v))?,
            mode: get("mode").map_or(Ok(FlowMode::Rvd), |v| parse_value("mode", v))?,
            steps: get("N").map_or(Ok(default_n), |v| parse_value("N", v))?,
            sigma: get("sigma").map_or(Ok(2.0), |v| parse_value("sigma", v))?,
            context_len: get("context_len").map_or(Ok(train.context_len), |v| parse_value("context_len", v))?,
            future_len: get("future_len").map_or(Ok(train.future_len), |v| parse_value("future_len", v))?,
            batch_size: get("batch_size").map_or(Ok(train.batch_size), |v| parse_value("batch_size", v))?,
            max_steps: get("max_steps").map_or(Ok(train.max_steps), |v| parse_value("max_steps", v))?,
            lr_initial: get("lr_initial").map_or(Ok(default_lr.0), |v| parse_value("lr_initial", v))?,
            lr_final: get("lr_final").map_or(Ok(default_lr.1), |v| parse_value("lr_final", v))?,
            seed: get("seed").map_or(Ok(0), |v| parse_value("seed", v))?,
            ensemble_size: get("ensemble_size").map_or(Ok(8), |v| parse_value("ensemble_size", v))?,
            variance_mode: get("variance_mode").map_or(Ok(VarianceMode::SqrtPosterior), |v| parse_value("variance_mode", v))?,
            out_dir: PathBuf::from(out_dir),
            checkpoint_every: get("checkpoint_every").map_or(Ok(500), |v| parse_value("checkpoint_every", v))?,
        };
        cfg.experiment()?.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if cfg.steps == 0 {
            return Err(CliError::Usage("config key `N` must be >= 1".into()));
        }
        if cfg.ensemble_size == 0 {
            return Err(CliError::Usage("config key `ensemble_size` must be >= 1".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn residual(&self) -> Result<ResidualConfig, CliError> {
        ResidualConfig::new(self.sigma, self.mode).map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn experiment(&self) -> Result<ExperimentConfig, CliError> {
        Ok(ExperimentConfig {
            profile: self.profile,
            dataset: self.dataset.clone(),
            data: synthetic_spec(self.profile.frame_size(), self.context_len + self.future_len),
            data_seed: DATA_SEED,
            train: TrainConfig {
                context_len: self.context_len,
                future_len: self.future_len,
                batch_size: self.batch_size,
                lr_initial: self.lr_initial,
                lr_final: self.lr_final,
                max_steps: self.max_steps,
                seed: self.seed,
                residual: self.residual()?,
            },
            diffusion_steps: self.steps,
            variance_mode: self.variance_mode,
            ensemble_size: self.ensemble_size,
            eval_windows: usize::MAX,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_every_key_but_out_dir() {
        let c = RunConfig::parse("out_dir = /tmp/x\n").unwrap();
        assert_eq!(c.profile, Profile::Desk);
        assert_eq!(c.steps, 100);
        assert_eq!((c.context_len, c.future_len), (2, 6));
        assert_eq!(c.out_dir, PathBuf::from("/tmp/x"));
        let large = RunConfig::parse("profile=64\nout_dir=o").unwrap();
        assert_eq!(large.steps, 1600);
        assert_eq!((large.lr_initial, large.lr_final), (5e-5, 2e-5));
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "",
            "profile=desk",
            "out_dir=o\nlearning_rate=1",
            "out_dir=o\nout_dir=p",
            "out_dir=o\nmode=both",
            "out_dir=o\nN=0",
            "out_dir=o\nlr_initial=1e-4\nlr_final=1e-3",
            "out_dir=o\nbatch_size",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(CliError::Usage(_))), "{text:?}");
        }
    }

    #[test]
    fn comments_and_dir_datasets() {
        let c = RunConfig::parse("# run\n\nout_dir=o\ndataset=dir:/data/v\nmode=vd\n").unwrap();
        assert_eq!(c.dataset, DatasetKind::Dir(PathBuf::from("/data/v")));
        assert_eq!(c.mode, FlowMode::Vd);
    }
}
