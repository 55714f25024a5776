//! Run configuration: defaults, an optional JSON file, then command-line flags.

use std::path::{Path, PathBuf};

use robfpca::pipeline::DEFAULT_KAPPAS;
use robfpca::simulation::{ReproduceOptions, SimConfig};
use robfpca::{FitConfig, Kernel, LossChoice, Loss, LossFamily};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    pub threads: Option<usize>,
    /// Input dataset for `fit` and `scores`.
    pub data: Option<PathBuf>,
    pub rescale_time: bool,
    pub fit: FitConfig,
    pub simulate: SimConfig,
    pub reproduce: ReproduceOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from("out"),
            threads: None,
            data: None,
            rescale_time: false,
            fit: FitConfig::default(),
            simulate: SimConfig::default(),
            reproduce: ReproduceOptions::default(),
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct GlobalArgs {
    /// JSON run configuration; flags given on the command line take precedence
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// square, local-smooth-abs, log-cosh, arctan-integral (or rho0..rho3), or tuned
    #[arg(long, global = true)]
    pub loss: Option<String>,
    /// Smoothing half-width for local-smooth-abs; a comma list of candidates with --loss tuned
    #[arg(long, global = true, value_delimiter = ',')]
    pub kappa: Option<Vec<f64>>,
    /// tricube or epanechnikov
    #[arg(long, global = true)]
    pub kernel: Option<String>,
    #[arg(long, global = true)]
    pub grid_size: Option<usize>,
    #[arg(long, global = true)]
    pub folds: Option<usize>,
    /// Estimate the mean and covariance on separate halves of the subjects
    #[arg(long, global = true)]
    pub split_sample: bool,
    /// Map observed times linearly onto [0, 1]
    #[arg(long, global = true)]
    pub rescale_time: bool,
}

pub fn parse_loss(name: &str, kappas: Option<&[f64]>) -> Result<LossChoice, CliError> {
    let lower = name.trim().to_ascii_lowercase();
    if matches!(lower.as_str(), "tuned" | "rho1-tuned") {
        let k = kappas.map(<[f64]>::to_vec).unwrap_or_else(|| DEFAULT_KAPPAS.to_vec());
        return Ok(LossChoice::TunedKappa(k));
    }
    let family: LossFamily = lower.parse()?;
    let kappa = match kappas {
        None => 1.0,
        Some([k]) => *k,
        Some(_) if family != LossFamily::LocalSmoothAbs => 1.0,
        Some(ks) => return Err(CliError::Input(format!("{family} takes one kappa, got {}", ks.len()))),
    };
    Ok(LossChoice::Fixed(Loss::new(family, kappa)?))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    /// Defaults, overridden by the config file, overridden by flags.
    pub fn resolve(args: &GlobalArgs) -> Result<Self, CliError> {
        let mut cfg = match &args.config {
            Some(p) => Self::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = args.seed {
            cfg.fit.seed = s;
            cfg.simulate.seed = s;
            cfg.reproduce.seed = s;
        }
        if let Some(o) = &args.out {
            cfg.out = o.clone();
        }
        if args.threads.is_some() {
            cfg.threads = args.threads;
        }
        match (&args.loss, &args.kappa) {
            (Some(l), k) => cfg.fit.loss = parse_loss(l, k.as_deref())?,
            (None, Some(k)) => {
                cfg.reproduce.kappas = k.clone();
                cfg.fit.loss = match &cfg.fit.loss {
                    LossChoice::TunedKappa(_) => LossChoice::TunedKappa(k.clone()),
                    LossChoice::Fixed(l) if l.family == LossFamily::LocalSmoothAbs => {
                        parse_loss("local-smooth-abs", Some(k))?
                    }
                    other => other.clone(),
                };
            }
            (None, None) => {}
        }
        if let (Some(_), Some(k)) = (&args.loss, &args.kappa) {
            cfg.reproduce.kappas = k.clone();
        }
        if let Some(k) = &args.kernel {
            let kernel: Kernel = k.parse()?;
            cfg.fit.smoother.kernel = kernel;
            cfg.reproduce.kernel = kernel;
        }
        if let Some(g) = args.grid_size {
            cfg.fit.grid_size = g;
            cfg.reproduce.grid_size = g;
        }
        if let Some(f) = args.folds {
            cfg.fit.folds = f;
            cfg.reproduce.folds = f;
        }
        if args.split_sample {
            cfg.fit.split_sample = true;
        }
        if args.rescale_time {
            cfg.rescale_time = true;
        }
        Ok(cfg)
    }

    pub fn echo(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"fit": {"grid_size": 51, "folds": 3}, "simulate": {"n": 40}}"#).unwrap();
        let args = GlobalArgs { config: Some(path), folds: Some(5), ..Default::default() };
        let cfg = RunConfig::resolve(&args).unwrap();
        assert_eq!(cfg.fit.grid_size, 51);
        assert_eq!(cfg.fit.folds, 5);
        assert_eq!(cfg.simulate.n, 40);
        assert_eq!(cfg.simulate.m, SimConfig::default().m);
    }

    #[test]
    fn echo_round_trips() {
        let args = GlobalArgs { loss: Some("tuned".into()), kappa: Some(vec![0.1, 1.0]), seed: Some(4), ..Default::default() };
        let cfg = RunConfig::resolve(&args).unwrap();
        let back: RunConfig = serde_json::from_str(&cfg.echo()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fit.loss, LossChoice::TunedKappa(vec![0.1, 1.0]));
    }

    #[test]
    fn loss_names() {
        assert_eq!(parse_loss("rho0", None).unwrap(), LossChoice::Fixed(Loss::SQUARE));
        assert_eq!(
            parse_loss("local-smooth-abs", Some(&[0.01])).unwrap(),
            LossChoice::Fixed(Loss::local_smooth_abs(0.01).unwrap())
        );
        assert!(parse_loss("rho1", Some(&[0.1, 1.0])).is_err());
        assert!(parse_loss("huber", None).is_err());
        assert!(parse_loss("rho1", Some(&[-1.0])).is_err());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"grid": 3}"#).unwrap();
        assert!(RunConfig::resolve(&GlobalArgs { config: Some(path), ..Default::default() }).is_err());
    }
}
