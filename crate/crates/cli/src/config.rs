//! Run configuration: built-in defaults, overridden by an optional
//! `key = value` file, overridden by command-line flags.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use amfir::amd::DistillMode;
use amfir::ami::FusionMode;
use amfir::asi::{AsiForce, ReliabilityMode};
use amfir::dataset::{EpisodeConfig, SyntheticSpec};
use amfir::encoder::{Hyper, DEFAULT_GAMMA, DEFAULT_LAMBDA, DEFAULT_PROJ_DIM};
use amfir::metric::DistanceMode;
use clap::Args;
use serde::Serialize;

use crate::CliError;

pub const DEFAULT_TRAIN_EPISODES: usize = 2000;
pub const DEFAULT_EVAL_EPISODES: usize = 600;

macro_rules! run_config {
    ($( $(#[$doc:meta])* $field:ident : $ty:ty = $default:expr ),+ $(,)?) => {
        #[derive(Clone, Debug, PartialEq, Serialize)]
        pub struct RunConfig {
            $( $(#[$doc])* pub $field: $ty, )+
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $field: $default, )+ }
            }
        }

        /// Flags shared by every verb. Unset flags fall back to the config
        /// file, then to the defaults.
        #[derive(Args, Clone, Debug, Default)]
        pub struct RunFlags {
            /// Optional `key = value` configuration file.
            #[arg(long, global = true)]
            pub config: Option<PathBuf>,
            $( $(#[$doc])* #[arg(long, global = true)] pub $field: Option<<$ty as ConfigValue>::Flag>, )+
        }

        impl RunConfig {
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
                match key.trim().replace('-', "_").as_str() {
                    $( stringify!($field) => {
                        self.$field = <$ty as ConfigValue>::parse(value)
                            .map_err(|e| CliError::Config(format!("{key}: {e}")))?;
                    } )+
                    other => return Err(CliError::Config(format!("unknown config key `{other}`"))),
                }
                Ok(())
            }

            fn apply_flags(&mut self, flags: &RunFlags) {
                $( if let Some(v) = &flags.$field {
                    self.$field = <$ty as ConfigValue>::from_flag(v.clone());
                } )+
            }
        }
    };
}

/// How a config field is read from a flag and from the config file.
pub trait ConfigValue: Sized {
    type Flag: Clone + Send + Sync + 'static;
    fn parse(s: &str) -> Result<Self, String>;
    fn from_flag(flag: Self::Flag) -> Self;
}

macro_rules! plain_value {
    ($($ty:ty),+) => {$(
        impl ConfigValue for $ty {
            type Flag = $ty;
            fn parse(s: &str) -> Result<Self, String> {
                parse_str(s)
            }
            fn from_flag(flag: Self) -> Self {
                flag
            }
        }
    )+};
}

fn parse_str<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: Display,
{
    s.trim().parse().map_err(|e: T::Err| e.to_string())
}

plain_value!(usize, u64, f64, DistanceMode, ReliabilityMode, FusionMode, DistillMode, AsiForce);

impl ConfigValue for Option<PathBuf> {
    type Flag = PathBuf;
    fn parse(s: &str) -> Result<Self, String> {
        Ok(Some(PathBuf::from(s.trim())))
    }
    fn from_flag(flag: PathBuf) -> Self {
        Some(flag)
    }
}

impl ConfigValue for Option<usize> {
    type Flag = usize;
    fn parse(s: &str) -> Result<Self, String> {
        parse_str(s).map(Some)
    }
    fn from_flag(flag: usize) -> Self {
        Some(flag)
    }
}

/// Comma-separated seed list.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedList(pub Vec<u64>);

impl FromStr for SeedList {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let seeds = s
            .split(',')
            .map(|p| p.trim().parse::<u64>().map_err(|e| format!("seed `{p}`: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        if seeds.is_empty() {
            return Err("empty seed list".into());
        }
        Ok(SeedList(seeds))
    }
}

plain_value!(SeedList);

run_config! {
    /// Input dataset (training set for `train` and `ablate`).
    data: Option<PathBuf> = None,
    /// Evaluation dataset for `ablate`; when absent `--data` is split by class.
    eval_data: Option<PathBuf> = None,
    /// Model file (written by `train`, read by `eval`).
    model: Option<PathBuf> = None,
    /// Metrics output file.
    metrics: Option<PathBuf> = None,
    /// Per-episode loss / free-energy trace output.
    trace: Option<PathBuf> = None,
    /// Output file for `generate` and `ablate`.
    out: Option<PathBuf> = None,
    /// `split` output for the training classes.
    train_out: Option<PathBuf> = None,
    /// `split` output for the held-out classes.
    test_out: Option<PathBuf> = None,
    n_way: usize = 5,
    k_shot: usize = 1,
    q_per_class: usize = 5,
    /// Episode count (training for `train`/`ablate`, evaluation for `eval`).
    episodes: Option<usize> = None,
    /// Evaluation episodes for `ablate` and the held-in summary of `train`.
    eval_episodes: usize = DEFAULT_EVAL_EPISODES,
    lambda: f64 = DEFAULT_LAMBDA,
    /// SGD learning rate.
    lr: f64 = DEFAULT_GAMMA,
    proj_dim: usize = DEFAULT_PROJ_DIM,
    reliability: ReliabilityMode = ReliabilityMode::default(),
    distance: DistanceMode = DistanceMode::default(),
    fusion: FusionMode = FusionMode::default(),
    distill: DistillMode = DistillMode::default(),
    asi_force: AsiForce = AsiForce::default(),
    /// Minimum free-energy gap for a query to join distillation.
    asi_margin: f64 = 0.0,
    seed: u64 = 0,
    /// Seeds of the ablation grid.
    seeds: SeedList = SeedList(vec![0, 1, 2]),
    classes: usize = SyntheticSpec::default().num_classes,
    per_class: usize = SyntheticSpec::default().per_class,
    dim_rgb: usize = SyntheticSpec::default().dim_rgb,
    dim_flow: usize = SyntheticSpec::default().dim_flow,
    sep: f64 = SyntheticSpec::default().sep,
    sigma_low: f64 = SyntheticSpec::default().sigma_low,
    sigma_high: f64 = SyntheticSpec::default().sigma_high,
    p_rgb_dominant: f64 = SyntheticSpec::default().p_rgb_dominant,
    /// Fraction of classes assigned to the training side by `split`.
    train_fraction: f64 = 0.7,
}

impl RunConfig {
    pub fn resolve(flags: &RunFlags) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &flags.config {
            cfg.apply_file(path)?;
        }
        cfg.apply_flags(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("{}:{}: expected key = value", path.display(), i + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |m: &str| Err(CliError::Config(m.to_string()));
        if self.n_way == 0 || self.k_shot == 0 || self.q_per_class == 0 || self.eval_episodes == 0 {
            return fail("counts must be >= 1");
        }
        if self.proj_dim == 0 {
            return fail("proj-dim must be >= 1");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return fail("lambda must be >= 0");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail("lr must be > 0");
        }
        if !(self.asi_margin.is_finite() && self.asi_margin >= 0.0) {
            return fail("asi-margin must be >= 0");
        }
        Ok(())
    }

    pub fn episode(&self) -> EpisodeConfig {
        EpisodeConfig {
            n_way: self.n_way,
            k_shot: self.k_shot,
            q_per_class: self.q_per_class,
        }
    }

    pub fn hyper(&self) -> Hyper {
        Hyper {
            d_proj: self.proj_dim,
            lambda: self.lambda,
            gamma: self.lr,
            reliability_mode: self.reliability,
            distance_mode: self.distance,
            distill_mode: self.distill,
            asi_force: self.asi_force,
            asi_margin: self.asi_margin,
        }
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.classes,
            per_class: self.per_class,
            dim_rgb: self.dim_rgb,
            dim_flow: self.dim_flow,
            sep: self.sep,
            sigma_low: self.sigma_low,
            sigma_high: self.sigma_high,
            p_rgb_dominant: self.p_rgb_dominant,
            seed: self.seed,
        }
    }

    pub fn train_episodes(&self) -> usize {
        self.episodes.unwrap_or(DEFAULT_TRAIN_EPISODES)
    }

    pub fn eval_run_episodes(&self) -> usize {
        self.episodes.unwrap_or(DEFAULT_EVAL_EPISODES)
    }

    pub fn require<'a>(&self, path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
        path.as_deref()
            .ok_or_else(|| CliError::Config(format!("missing required --{flag}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_defaults_and_flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# grid\nlambda = 0.5\nn-way = 3\nfusion = mean\nseeds = 4, 5\n").unwrap();
        let flags = RunFlags {
            config: Some(path),
            n_way: Some(4),
            ..RunFlags::default()
        };
        let cfg = RunConfig::resolve(&flags).unwrap();
        assert_eq!(cfg.lambda, 0.5);
        assert_eq!(cfg.n_way, 4);
        assert_eq!(cfg.fusion, FusionMode::Mean);
        assert_eq!(cfg.seeds, SeedList(vec![4, 5]));
        assert_eq!(cfg.lr, 1e-3);
    }

    #[test]
    fn unknown_key_and_bad_values_are_config_errors() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("nope", "1"), Err(CliError::Config(_))));
        assert!(matches!(cfg.set("distill", "sideways"), Err(CliError::Config(_))));
        cfg.set("distill", "t-rgb").unwrap();
        assert_eq!(cfg.distill, DistillMode::TRgb);
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn episode_defaults_depend_on_verb() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train_episodes(), 2000);
        assert_eq!(cfg.eval_run_episodes(), 600);
    }
}
