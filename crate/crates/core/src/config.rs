//! Experiment configuration: flat dotted keys, diff-able text form.
//!
//! A config file is a sequence of `key = value` lines (`#` starts a comment).
//! Keys are flat and dotted (`optimizer.lr`), every field has a default, and
//! the fully resolved form can be echoed back out so each run records exactly
//! what it ran with. Command-line overrides reuse [`ExperimentConfig::apply`].

use crate::error::{CoreError, Result};
use crate::topology::{FreezeMode, GrowthPolicy, InitConfig, NetworkKind};
use crate::trainer::OptimizerConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumConfig {
    /// Accuracy threshold of the success criterion.
    pub threshold: f64,
    /// Fresh sequences per task per evaluation.
    pub eval_sequences: usize,
    pub freeze_old_heads: bool,
    pub freeze_old_tau: bool,
    /// Stop early once this task is solved (0 = run all epochs).
    pub stop_n: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            threshold: 0.98,
            eval_sequences: 100,
            freeze_old_heads: true,
            freeze_old_tau: true,
            stop_n: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrowthConfig {
    pub duplicate_recurrent: bool,
    pub duplicate_feedforward: bool,
    pub freeze_mode: FreezeMode,
}

impl Default for GrowthConfig {
    fn default() -> Self {
        Self {
            duplicate_recurrent: true,
            duplicate_feedforward: true,
            freeze_mode: FreezeMode::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub ac_max_lag: usize,
    /// Activity-series length for effective-timescale estimation.
    pub horizon: usize,
    /// Perturbation magnitudes; includes 0 so curves anchor at the
    /// unperturbed network.
    pub eps_grid: Vec<f64>,
    pub n_repeats: usize,
    /// Evaluation sequences per task per perturbation repeat.
    pub n_eval: usize,
}

fn default_eps_grid() -> Vec<f64> {
    // Log-spaced from 1e-3 to 3, with an exact zero in front.
    let points = 13usize;
    let lo = 1e-3f64.ln();
    let hi = 3f64.ln();
    let mut grid = vec![0.0];
    for i in 0..points {
        let f = i as f64 / (points - 1) as f64;
        grid.push((lo + f * (hi - lo)).exp());
    }
    grid
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            ac_max_lag: 200,
            horizon: 100_000,
            eps_grid: default_eps_grid(),
            n_repeats: 10,
            n_eval: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneralizeConfig {
    pub k_max: usize,
    pub epochs: usize,
}

impl Default for GeneralizeConfig {
    fn default() -> Self {
        Self { k_max: 5, epochs: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub architecture: NetworkKind,
    /// Neurons per module (modular) or reservoir size (non-modular).
    pub size: usize,
    pub alpha: f64,
    pub init: InitConfig,
    pub optimizer: OptimizerConfig,
    pub curriculum: CurriculumConfig,
    pub growth: GrowthConfig,
    pub analysis: AnalysisConfig,
    pub generalize: GeneralizeConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            architecture: NetworkKind::Modular,
            size: 10,
            alpha: 0.01,
            init: InitConfig::default(),
            optimizer: OptimizerConfig::default(),
            curriculum: CurriculumConfig::default(),
            growth: GrowthConfig::default(),
            analysis: AnalysisConfig::default(),
            generalize: GeneralizeConfig::default(),
            seeds: vec![1, 2, 3],
        }
    }
}

fn bad(key: &str, message: impl Into<String>) -> CoreError {
    CoreError::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| bad(key, format!("expected {what}, got `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(bad(key, format!("expected true/false, got `{other}`"))),
    }
}

impl ExperimentConfig {
    /// Apply one `key = value` override.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "architecture" => {
                self.architecture = match v {
                    "modular" => NetworkKind::Modular,
                    "non-modular" => NetworkKind::NonModular,
                    other => {
                        return Err(bad(key, format!("expected modular|non-modular, got `{other}`")))
                    }
                }
            }
            "size" => self.size = parse_num(key, v, "a positive integer")?,
            "alpha" => self.alpha = parse_num(key, v, "a real in (0,1)")?,
            "init.tau_low" => self.init.tau_low = parse_num(key, v, "a real >= 1")?,
            "init.tau_high" => self.init.tau_high = parse_num(key, v, "a real")?,
            "optimizer.lr" => self.optimizer.lr = parse_num(key, v, "a real > 0")?,
            "optimizer.batch_size" => self.optimizer.batch_size = parse_num(key, v, "an integer")?,
            "optimizer.batches_per_epoch" => {
                self.optimizer.batches_per_epoch = parse_num(key, v, "an integer")?
            }
            "optimizer.max_epochs" => self.optimizer.max_epochs = parse_num(key, v, "an integer")?,
            "optimizer.grad_clip" => {
                self.optimizer.grad_clip = if v == "none" {
                    None
                } else {
                    Some(parse_num(key, v, "a real or `none`")?)
                }
            }
            "curriculum.threshold" => self.curriculum.threshold = parse_num(key, v, "a real")?,
            "curriculum.eval_sequences" => {
                self.curriculum.eval_sequences = parse_num(key, v, "an integer")?
            }
            "curriculum.freeze_old_heads" => {
                self.curriculum.freeze_old_heads = parse_bool(key, v)?
            }
            "curriculum.freeze_old_tau" => self.curriculum.freeze_old_tau = parse_bool(key, v)?,
            "curriculum.stop_n" => self.curriculum.stop_n = parse_num(key, v, "an integer")?,
            "growth.duplicate_recurrent" => {
                self.growth.duplicate_recurrent = parse_bool(key, v)?
            }
            "growth.duplicate_feedforward" => {
                self.growth.duplicate_feedforward = parse_bool(key, v)?
            }
            "growth.freeze_mode" => {
                self.growth.freeze_mode = match v {
                    "none" => FreezeMode::None,
                    "recurrent" => FreezeMode::Recurrent,
                    "feedforward" => FreezeMode::Feedforward,
                    other => {
                        return Err(bad(
                            key,
                            format!("expected none|recurrent|feedforward, got `{other}`"),
                        ))
                    }
                }
            }
            "analysis.ac_max_lag" => self.analysis.ac_max_lag = parse_num(key, v, "an integer")?,
            "analysis.horizon" => self.analysis.horizon = parse_num(key, v, "an integer")?,
            "analysis.eps_grid" => {
                let mut grid = Vec::new();
                for part in v.split(',') {
                    grid.push(parse_num(key, part, "a comma-separated list of reals")?);
                }
                self.analysis.eps_grid = grid;
            }
            "analysis.n_repeats" => self.analysis.n_repeats = parse_num(key, v, "an integer")?,
            "analysis.n_eval" => self.analysis.n_eval = parse_num(key, v, "an integer")?,
            "generalize.k_max" => self.generalize.k_max = parse_num(key, v, "an integer")?,
            "generalize.epochs" => self.generalize.epochs = parse_num(key, v, "an integer")?,
            "seeds" => {
                let mut seeds = Vec::new();
                for part in v.split(',') {
                    seeds.push(parse_num(key, part, "a comma-separated list of integers")?);
                }
                self.seeds = seeds;
            }
            other => return Err(bad(other, "unknown key")),
        }
        Ok(())
    }

    /// Parse a flat-key config file; unknown keys and malformed values are
    /// reported with the offending key.
    pub fn from_flat_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CoreError::Config {
                    key: format!("line {}", lineno + 1),
                    message: format!("expected `key = value`, got `{line}`"),
                });
            };
            cfg.apply(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(bad("size", "must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(bad("alpha", "must lie in (0, 1)"));
        }
        if !(self.init.tau_low >= 1.0 && self.init.tau_high >= self.init.tau_low) {
            return Err(bad("init.tau_low", "need 1 <= tau_low <= tau_high"));
        }
        if self.optimizer.lr < 0.0 {
            return Err(bad("optimizer.lr", "must be >= 0"));
        }
        if self.optimizer.batch_size == 0 || self.optimizer.batches_per_epoch == 0 {
            return Err(bad("optimizer.batch_size", "batch sizes must be positive"));
        }
        if !(self.curriculum.threshold > 0.5 && self.curriculum.threshold < 1.0) {
            return Err(bad("curriculum.threshold", "must lie in (0.5, 1)"));
        }
        if self.curriculum.eval_sequences == 0 {
            return Err(bad("curriculum.eval_sequences", "must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(bad("seeds", "need at least one seed"));
        }
        if self.analysis.eps_grid.iter().any(|&e| e < 0.0) {
            return Err(bad("analysis.eps_grid", "epsilons must be >= 0"));
        }
        if self.growth.freeze_mode != FreezeMode::None
            && self.architecture != NetworkKind::Modular
        {
            return Err(bad("growth.freeze_mode", "freeze modes require a modular network"));
        }
        Ok(())
    }

    /// Fully resolved key/value pairs, sorted, suitable for echoing into
    /// output files.
    pub fn to_flat(&self) -> Vec<(String, String)> {
        let grid = self
            .analysis
            .eps_grid
            .iter()
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let seeds = self
            .seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut pairs = vec![
            ("alpha".to_string(), self.alpha.to_string()),
            ("analysis.ac_max_lag".to_string(), self.analysis.ac_max_lag.to_string()),
            ("analysis.eps_grid".to_string(), grid),
            ("analysis.horizon".to_string(), self.analysis.horizon.to_string()),
            ("analysis.n_eval".to_string(), self.analysis.n_eval.to_string()),
            ("analysis.n_repeats".to_string(), self.analysis.n_repeats.to_string()),
            ("architecture".to_string(), self.architecture.as_str().to_string()),
            (
                "curriculum.eval_sequences".to_string(),
                self.curriculum.eval_sequences.to_string(),
            ),
            (
                "curriculum.freeze_old_heads".to_string(),
                self.curriculum.freeze_old_heads.to_string(),
            ),
            (
                "curriculum.freeze_old_tau".to_string(),
                self.curriculum.freeze_old_tau.to_string(),
            ),
            ("curriculum.stop_n".to_string(), self.curriculum.stop_n.to_string()),
            ("curriculum.threshold".to_string(), self.curriculum.threshold.to_string()),
            ("generalize.epochs".to_string(), self.generalize.epochs.to_string()),
            ("generalize.k_max".to_string(), self.generalize.k_max.to_string()),
            (
                "growth.duplicate_feedforward".to_string(),
                self.growth.duplicate_feedforward.to_string(),
            ),
            (
                "growth.duplicate_recurrent".to_string(),
                self.growth.duplicate_recurrent.to_string(),
            ),
            ("growth.freeze_mode".to_string(), self.growth.freeze_mode.as_str().to_string()),
            ("init.tau_high".to_string(), self.init.tau_high.to_string()),
            ("init.tau_low".to_string(), self.init.tau_low.to_string()),
            (
                "optimizer.batch_size".to_string(),
                self.optimizer.batch_size.to_string(),
            ),
            (
                "optimizer.batches_per_epoch".to_string(),
                self.optimizer.batches_per_epoch.to_string(),
            ),
            (
                "optimizer.grad_clip".to_string(),
                self.optimizer
                    .grad_clip
                    .map_or("none".to_string(), |c| c.to_string()),
            ),
            ("optimizer.lr".to_string(), self.optimizer.lr.to_string()),
            ("optimizer.max_epochs".to_string(), self.optimizer.max_epochs.to_string()),
            ("seeds".to_string(), seeds),
            ("size".to_string(), self.size.to_string()),
        ];
        pairs.sort();
        pairs
    }

    pub fn growth_policy(&self) -> GrowthPolicy {
        GrowthPolicy {
            duplicate_recurrent: self.growth.duplicate_recurrent,
            duplicate_feedforward: self.growth.duplicate_feedforward,
            freeze_mode: self.growth.freeze_mode,
            freeze_old_heads: self.curriculum.freeze_old_heads,
            freeze_old_tau: self.curriculum.freeze_old_tau,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_flat_text() {
        let cfg = ExperimentConfig::default();
        let text: String = cfg
            .to_flat()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        let parsed = ExperimentConfig::from_flat_text(&text).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn overrides_and_comments() {
        let text = "# a comment\narchitecture = non-modular\nsize = 54  # inline\nseeds = 4,5\n";
        let cfg = ExperimentConfig::from_flat_text(text).unwrap();
        assert_eq!(cfg.architecture, NetworkKind::NonModular);
        assert_eq!(cfg.size, 54);
        assert_eq!(cfg.seeds, vec![4, 5]);
    }

    #[test]
    fn unknown_key_reports_path() {
        let err = ExperimentConfig::from_flat_text("optimizer.momentum = 0.9\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("optimizer.momentum"), "{msg}");
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(ExperimentConfig::from_flat_text("size = many\n").is_err());
        assert!(ExperimentConfig::from_flat_text("alpha = 1.5\n").is_err());
        assert!(ExperimentConfig::from_flat_text("size\n").is_err());
        assert!(ExperimentConfig::from_flat_text(
            "architecture = non-modular\ngrowth.freeze_mode = recurrent\n"
        )
        .is_err());
    }

    #[test]
    fn grad_clip_none_round_trips() {
        let cfg = ExperimentConfig::from_flat_text("optimizer.grad_clip = none\n").unwrap();
        assert_eq!(cfg.optimizer.grad_clip, None);
        let pairs = cfg.to_flat();
        let clip = pairs.iter().find(|(k, _)| k == "optimizer.grad_clip").unwrap();
        assert_eq!(clip.1, "none");
    }

    #[test]
    fn default_eps_grid_spans_the_documented_range() {
        let grid = AnalysisConfig::default().eps_grid;
        assert_eq!(grid[0], 0.0);
        assert!((grid[1] - 1e-3).abs() < 1e-12);
        assert!((grid.last().unwrap() - 3.0).abs() < 1e-12);
        assert!(grid.windows(2).all(|w| w[0] < w[1]));
    }
}
