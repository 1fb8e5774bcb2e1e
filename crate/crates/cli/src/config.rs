//! Run configuration: one TOML file plus command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use adacal::search::DEFAULT_MU;
use adacal::{ConfidenceKind, EnergyMode, EnergyModel, ExitParams, GridSpec, SyntheticKind};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{CliError, Stage};

/// Where the samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Generated in memory from `RunConfig::seed`.
    Synthetic {
        kind: SyntheticKind,
        count: usize,
        classes: usize,
        sample_shape: Vec<usize>,
        noise: f64,
    },
    /// IDX image and label files.
    Idx { images: PathBuf, labels: PathBuf },
    /// CSV with the label in the first column.
    Csv {
        path: PathBuf,
        sample_shape: Vec<usize>,
        classes: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Leading samples used for training and calibration; the rest are the
    /// evaluation split.
    pub train: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Training samples captured for calibration.
    pub samples: usize,
    pub grid_count: usize,
    pub low_percentile: f64,
    pub high_percentile: f64,
    pub calibrate_bias: bool,
    /// Initial membrane as a fraction of the threshold.
    pub initial_membrane: f64,
    /// Timesteps at which the unevenness report is measured.
    pub unevenness_timesteps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub phi_candidates: Vec<u32>,
    pub rho_candidates: Vec<u32>,
    pub e_target: EnergyTarget,
    pub s_target: SensitivityTarget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    pub mu: f64,
    pub mode: EnergyMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExitConfig {
    pub alpha_base: f64,
    pub beta: f64,
    pub delta: f64,
    pub confidence: ConfidenceKind,
    /// Timestep cap of adaptive inference; 0 means `timesteps`.
    pub t_max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Timesteps of the accuracy-vs-T curves.
    pub timesteps: Vec<usize>,
}

/// Everything a command needs. Paths are relative to the working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory holding every artifact and report.
    pub out: PathBuf,
    pub timesteps: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub calibration: CalibrationConfig,
    pub search: SearchConfig,
    pub energy: EnergyConfig,
    pub exit: ExitConfig,
    pub report: ReportConfig,
}

/// Energy budget of the burst search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EnergyTarget {
    Absolute(f64),
    /// Measured energy of every layer at the same burst cap.
    UniformPhi(u32),
}

/// Sensitivity budget of the compression search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SensitivityTarget {
    Absolute(f64),
    /// Multiple of the uncompressed (`rho = 1` everywhere) sensitivity sum.
    Relative(f64),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic {
                kind: SyntheticKind::Blobs,
                count: 6000,
                classes: 10,
                sample_shape: vec![64],
                noise: 0.35,
            },
            train: 3000,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![128, 64, 32],
            epochs: 20,
            lr: 0.05,
            batch_size: 32,
        }
    }
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        let GridSpec::Geometric {
            count,
            low_percentile,
            high_percentile,
        } = GridSpec::default()
        else {
            unreachable!("default grid is geometric")
        };
        CalibrationConfig {
            samples: 512,
            grid_count: count,
            low_percentile,
            high_percentile,
            calibrate_bias: false,
            initial_membrane: 0.5,
            unevenness_timesteps: 8,
        }
    }
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            phi_candidates: vec![1, 2, 3, 4],
            rho_candidates: vec![1, 2, 4],
            e_target: EnergyTarget::UniformPhi(2),
            s_target: SensitivityTarget::Relative(1.5),
        }
    }
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            mu: DEFAULT_MU,
            mode: EnergyMode::SpikeCount,
        }
    }
}

impl Default for ExitConfig {
    fn default() -> Self {
        let p = ExitParams::default();
        ExitConfig {
            alpha_base: p.alpha_base,
            beta: p.beta,
            delta: p.delta,
            confidence: p.confidence,
            t_max: 0,
        }
    }
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            timesteps: vec![1, 2, 4, 8, 16, 32],
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("run"),
            timesteps: 4,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            calibration: CalibrationConfig::default(),
            search: SearchConfig::default(),
            energy: EnergyConfig::default(),
            exit: ExitConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

/// Values given on the command line; each one replaces the file value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub timesteps: Option<usize>,
    pub mu: Option<f64>,
    pub energy_mode: Option<EnergyMode>,
    pub e_target: Option<EnergyTarget>,
    pub s_target: Option<SensitivityTarget>,
    pub alpha_base: Option<f64>,
    pub beta: Option<f64>,
    pub delta: Option<f64>,
}

impl RunConfig {
    /// Reads `path`, or starts from the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::user(Stage::Config, format!("cannot read {}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::user(Stage::Config, e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($src:ident => $($dst:tt)+) => {
                if let Some(v) = o.$src.clone() {
                    self.$($dst)+ = v;
                }
            };
        }
        set!(seed => seed);
        set!(out => out);
        set!(timesteps => timesteps);
        set!(mu => energy.mu);
        set!(energy_mode => energy.mode);
        set!(e_target => search.e_target);
        set!(s_target => search.s_target);
        set!(alpha_base => exit.alpha_base);
        set!(beta => exit.beta);
        set!(delta => exit.delta);
    }

    /// Checks every numeric field against its documented range.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::user(Stage::Config, msg));
        if self.timesteps == 0 || self.timesteps > 4096 {
            return bad(format!("timesteps {} outside 1..=4096", self.timesteps));
        }
        if self.data.train == 0 {
            return bad("data.train must be > 0".into());
        }
        if let DataSource::Synthetic { count, .. } = &self.data.source {
            if self.data.train >= *count {
                return bad(format!(
                    "data.train {} leaves no evaluation samples out of {count}",
                    self.data.train
                ));
            }
        }
        if self.model.epochs == 0 || self.model.batch_size == 0 {
            return bad("model.epochs and model.batch_size must be > 0".into());
        }
        if !(self.model.lr.is_finite() && self.model.lr >= 0.0) {
            return bad(format!("model.lr {} must be finite and >= 0", self.model.lr));
        }
        let c = &self.calibration;
        if c.samples == 0 || c.grid_count == 0 || c.unevenness_timesteps == 0 {
            return bad("calibration.samples, grid_count and unevenness_timesteps must be > 0".into());
        }
        if !(0.0..=1.0).contains(&c.low_percentile)
            || !(0.0..=1.0).contains(&c.high_percentile)
            || c.low_percentile > c.high_percentile
        {
            return bad("calibration percentiles must satisfy 0 <= low <= high <= 1".into());
        }
        if !(0.0..=1.0).contains(&c.initial_membrane) {
            return bad(format!("initial_membrane {} outside [0, 1]", c.initial_membrane));
        }
        for (name, cands) in [
            ("phi_candidates", &self.search.phi_candidates),
            ("rho_candidates", &self.search.rho_candidates),
        ] {
            if cands.is_empty() || cands.contains(&0) {
                return bad(format!("search.{name} must be nonempty and positive"));
            }
        }
        if !(self.energy.mu.is_finite() && self.energy.mu > 0.0) {
            return bad(format!("energy.mu {} must be > 0", self.energy.mu));
        }
        if !(self.exit.delta.is_finite() && self.exit.delta > 0.0) {
            return bad(format!("exit.delta {} must be > 0", self.exit.delta));
        }
        if !(self.exit.alpha_base.is_finite() && self.exit.beta.is_finite()) {
            return bad("exit.alpha_base and exit.beta must be finite".into());
        }
        if self.report.timesteps.is_empty() || self.report.timesteps.contains(&0) {
            return bad("report.timesteps must be nonempty and positive".into());
        }
        match self.search.e_target {
            EnergyTarget::Absolute(v) if !(v > 0.0) => return bad(format!("e_target {v} must be > 0")),
            EnergyTarget::UniformPhi(0) => return bad("e_target uniform-phi needs phi >= 1".into()),
            _ => {}
        }
        match self.search.s_target {
            SensitivityTarget::Absolute(v) | SensitivityTarget::Relative(v) if !(v > 0.0) => {
                return bad(format!("s_target {v} must be > 0"))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn t_max(&self) -> usize {
        if self.exit.t_max == 0 {
            self.timesteps
        } else {
            self.exit.t_max
        }
    }

    pub fn energy_model(&self) -> Result<EnergyModel, CliError> {
        EnergyModel::new(self.energy.mu, self.energy.mode).map_err(|e| CliError::from_core(Stage::Config, e))
    }

    pub fn exit_params(&self) -> ExitParams {
        ExitParams {
            alpha_base: self.exit.alpha_base,
            beta: self.exit.beta,
            delta: self.exit.delta,
            confidence: self.exit.confidence,
        }
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec::Geometric {
            count: self.calibration.grid_count,
            low_percentile: self.calibration.low_percentile,
            high_percentile: self.calibration.high_percentile,
        }
    }

    // Seeds of the individual stages, all derived from the one run seed.
    pub fn data_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn init_seed(&self) -> u64 {
        self.seed.wrapping_add(3)
    }

    pub fn train_seed(&self) -> u64 {
        self.seed
    }

    pub fn cache_seed(&self) -> u64 {
        self.seed
    }
}

impl fmt::Display for EnergyTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnergyTarget::Absolute(v) => write!(f, "{v:e}"),
            EnergyTarget::UniformPhi(p) => write!(f, "uniform-phi:{p}"),
        }
    }
}

impl FromStr for EnergyTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if let Some(p) = s.strip_prefix("uniform-phi:") {
            return p
                .parse()
                .map(EnergyTarget::UniformPhi)
                .map_err(|_| format!("bad burst cap in {s:?}"));
        }
        s.parse()
            .map(EnergyTarget::Absolute)
            .map_err(|_| format!("expected a number or uniform-phi:<n>, got {s:?}"))
    }
}

impl fmt::Display for SensitivityTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SensitivityTarget::Absolute(v) => write!(f, "{v:e}"),
            SensitivityTarget::Relative(m) => write!(f, "{m}x"),
        }
    }
}

impl FromStr for SensitivityTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if let Some(m) = s.strip_suffix('x') {
            return m
                .parse()
                .map(SensitivityTarget::Relative)
                .map_err(|_| format!("bad multiple in {s:?}"));
        }
        s.parse()
            .map(SensitivityTarget::Absolute)
            .map_err(|_| format!("expected a number or <m>x, got {s:?}"))
    }
}

/// Numbers stay numbers in the file; the other forms are strings.
#[derive(Deserialize)]
#[serde(untagged)]
enum NumOrText {
    Num(f64),
    Text(String),
}

macro_rules! serde_target {
    ($ty:ident, $abs:path) => {
        impl Serialize for $ty {
            fn serialize<Z: Serializer>(&self, s: Z) -> Result<Z::Ok, Z::Error> {
                match self {
                    $abs(v) => s.serialize_f64(*v),
                    other => s.serialize_str(&other.to_string()),
                }
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                match NumOrText::deserialize(d)? {
                    NumOrText::Num(v) => Ok($abs(v)),
                    NumOrText::Text(t) => t.parse().map_err(serde::de::Error::custom),
                }
            }
        }
    };
}

serde_target!(EnergyTarget, EnergyTarget::Absolute);
serde_target!(SensitivityTarget, SensitivityTarget::Absolute);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::from_toml("timesteps = 8\n[search]\ns_target = \"2x\"\n").unwrap();
        assert_eq!(cfg.timesteps, 8);
        assert_eq!(cfg.search.s_target, SensitivityTarget::Relative(2.0));
        assert_eq!(cfg.search.e_target, EnergyTarget::UniformPhi(2));
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("timestep = 8\n").is_err());
    }

    #[test]
    fn flags_win() {
        let mut cfg = RunConfig::from_toml("seed = 5\n[exit]\nbeta = 0.1\n").unwrap();
        cfg.apply(&Overrides {
            seed: Some(9),
            beta: Some(0.0),
            e_target: Some("1e-5".parse().unwrap()),
            ..Overrides::default()
        });
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.exit.beta, 0.0);
        assert_eq!(cfg.search.e_target, EnergyTarget::Absolute(1e-5));
    }

    #[test]
    fn target_forms() {
        assert_eq!("uniform-phi:3".parse::<EnergyTarget>(), Ok(EnergyTarget::UniformPhi(3)));
        assert_eq!("1.5x".parse::<SensitivityTarget>(), Ok(SensitivityTarget::Relative(1.5)));
        assert_eq!("0.2".parse::<SensitivityTarget>(), Ok(SensitivityTarget::Absolute(0.2)));
        assert!("phi:2".parse::<EnergyTarget>().is_err());
        let cfg = RunConfig::from_toml("[search]\ne_target = 2e-5\n").unwrap();
        assert_eq!(cfg.search.e_target, EnergyTarget::Absolute(2e-5));
    }

    #[test]
    fn out_of_range_values_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.exit.delta = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.search.phi_candidates = vec![0, 1];
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.data.train = 6000;
        assert!(cfg.validate().is_err());
    }
}
