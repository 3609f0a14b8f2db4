//! Flat `section.key=value` configuration files and the experiment
//! configuration they describe.
//!
//! ```text
//! # comment
//! chain.T=1000
//! amend.a=10
//! run.seeds=1,2,3
//! ```
//!
//! Overrides use the same `key=value` syntax and are applied after the file.
//! A few short aliases are accepted (`a`, `T`, `N`, `seeds`, `variant`).

use std::fmt::Write as _;
use std::path::Path;

use crate::data::BenchmarkSpec;
use crate::detect::DetectorKind;
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::network::TrainConfig;
use crate::synthesis::{ChainConfig, Regularizer, DEFAULT_BETA_F};
use crate::textio::{self, fmt_f64};

/// Whether synthesis may look at the ID training data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Data-free regularizer; the training set is never shown to synthesis.
    CaMinus,
    /// Reconstruction regularizer anchored on training samples.
    CaPlus,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::CaMinus => "ca_minus",
            Variant::CaPlus => "ca_plus",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ca_minus" | "ca-" => Ok(Variant::CaMinus),
            "ca_plus" | "ca+" => Ok(Variant::CaPlus),
            other => Err(Error::invalid(format!(
                "unknown variant {other:?} (expected ca_minus or ca_plus)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkSpec,
    pub train: TrainConfig,
    /// Chain settings; `seed` is replaced per run seed.
    pub chain: ChainConfig,
    /// Number of chains `N`.
    pub chains: usize,
    pub beta_tv: f64,
    pub beta_l2: f64,
    pub beta_f: f64,
    pub beta_mse: f64,
    /// Weight exponent `a`.
    pub a: f64,
    pub distill: DistillConfig,
    pub detectors: Vec<DetectorKind>,
    pub seeds: Vec<u64>,
    pub variant: Variant,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = Self {
            benchmark: BenchmarkSpec::default(),
            train: TrainConfig::default(),
            chain: ChainConfig::default(),
            chains: 32,
            beta_tv: 1e-3,
            beta_l2: 3e-8,
            beta_f: DEFAULT_BETA_F,
            beta_mse: 1.0,
            a: 10.0,
            distill: DistillConfig::default(),
            detectors: vec![
                DetectorKind::Msp,
                DetectorKind::odin_default(),
                DetectorKind::energy_default(),
                DetectorKind::Ca,
            ],
            seeds: vec![1, 2, 3],
            variant: Variant::CaMinus,
        };
        cfg.sync_regularizer();
        cfg
    }
}

impl ExperimentConfig {
    /// Sets `chain.regularizer` from the variant and the β fields.
    pub fn sync_regularizer(&mut self) {
        self.chain.regularizer = match self.variant {
            Variant::CaMinus => Regularizer::DataFree {
                beta_tv: self.beta_tv,
                beta_l2: self.beta_l2,
                beta_f: self.beta_f,
            },
            Variant::CaPlus => Regularizer::Reconstruction {
                beta_mse: self.beta_mse,
            },
        };
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.chain.validate()?;
        self.distill.validate()?;
        if self.chains == 0 {
            return Err(Error::invalid("chain.N must be ≥ 1"));
        }
        if !(self.a >= 0.0) || !self.a.is_finite() {
            return Err(Error::invalid(format!(
                "amend.a must be ≥ 0, got {}",
                self.a
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("run.seeds must list at least one seed"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::invalid("run.seeds contains duplicates"));
        }
        if self.detectors.is_empty() {
            return Err(Error::invalid(
                "detect.detectors must name at least one detector",
            ));
        }
        for d in &self.detectors {
            d.validate()?;
        }
        let expected = match self.variant {
            Variant::CaMinus => "data_free",
            Variant::CaPlus => "reconstruction",
        };
        if self.chain.regularizer.name() != expected {
            return Err(Error::invalid(format!(
                "variant {} requires the {expected} regularizer, found {}",
                self.variant.as_str(),
                self.chain.regularizer.name()
            )));
        }
        Ok(())
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = canonical_key(key);
        let bad = |what: &str| Error::invalid(format!("{key}: expected {what}, got {value:?}"));
        let f = || {
            value
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad("a number"))
        };
        let u = || {
            value
                .parse::<usize>()
                .map_err(|_| bad("a non-negative integer"))
        };
        let b = || match value {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            _ => Err(bad("true or false")),
        };
        let widths = || {
            value
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad("comma-separated widths"))
        };
        match key.as_str() {
            "benchmark.classes" => self.benchmark.classes = u()?,
            "benchmark.dim" => self.benchmark.dim = u()?,
            "benchmark.separation" => self.benchmark.separation = f()?,
            "benchmark.train_size" => self.benchmark.train_size = u()?,
            "benchmark.test_size" => self.benchmark.test_size = u()?,
            "benchmark.near_size" => self.benchmark.near_size = u()?,
            "benchmark.far_size" => self.benchmark.far_size = u()?,
            "benchmark.far_range" => self.benchmark.far_range = f()?,
            "train.epochs" => self.train.epochs = u()?,
            "train.batch_size" => self.train.batch_size = u()?,
            "train.learning_rate" => self.train.learning_rate = f()?,
            "train.momentum" => self.train.momentum = f()?,
            "train.weight_decay" => self.train.weight_decay = f()?,
            "train.hidden" => self.train.hidden = widths()?,
            "chain.T" => self.chain.horizon = u()?,
            "chain.N" => self.chains = u()?,
            "chain.rho" => self.chain.rho = f()?,
            "chain.eta" => self.chain.eta = f()?,
            "chain.record_stride" => self.chain.record_stride = u()?,
            "chain.beta_tv" => self.beta_tv = f()?,
            "chain.beta_l2" => self.beta_l2 = f()?,
            "chain.beta_f" => self.beta_f = f()?,
            "chain.beta_mse" => self.beta_mse = f()?,
            "amend.a" => self.a = f()?,
            "distill.epochs" => self.distill.epochs = u()?,
            "distill.batch_size" => self.distill.batch_size = u()?,
            "distill.learning_rate" => self.distill.learning_rate = f()?,
            "distill.momentum" => self.distill.momentum = f()?,
            "distill.reverse_kl" => self.distill.reverse_kl = b()?,
            "distill.hidden" => {
                self.distill.hidden = if value == "same" {
                    None
                } else {
                    Some(widths()?)
                }
            }
            "detect.detectors" => {
                let previous = self.detectors.clone();
                self.detectors = value
                    .split(',')
                    .map(|name| {
                        let fresh = DetectorKind::from_name(name)?;
                        // Keep hyperparameters already set for this detector.
                        Ok(previous
                            .iter()
                            .find(|d| d.name() == fresh.name())
                            .copied()
                            .unwrap_or(fresh))
                    })
                    .collect::<Result<_>>()?;
            }
            "detect.odin_temperature" | "detect.odin_epsilon" => {
                let v = f()?;
                let (mut t, mut e) = match DetectorKind::odin_default() {
                    DetectorKind::Odin {
                        temperature,
                        epsilon,
                    } => (temperature, epsilon),
                    _ => unreachable!(),
                };
                if let Some(DetectorKind::Odin {
                    temperature,
                    epsilon,
                }) = self.detectors.iter().find(|d| d.name() == "odin")
                {
                    (t, e) = (*temperature, *epsilon);
                }
                if key == "detect.odin_temperature" {
                    t = v;
                } else {
                    e = v;
                }
                self.replace_detector(DetectorKind::Odin {
                    temperature: t,
                    epsilon: e,
                });
            }
            "detect.energy_temperature" => {
                self.replace_detector(DetectorKind::Energy { temperature: f()? })
            }
            "run.seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<u64>()
                            .map_err(|_| bad("comma-separated seeds"))
                    })
                    .collect::<Result<_>>()?
            }
            "run.variant" => self.variant = Variant::parse(value)?,
            _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
        }
        self.sync_regularizer();
        Ok(())
    }

    fn replace_detector(&mut self, kind: DetectorKind) {
        if let Some(d) = self.detectors.iter_mut().find(|d| d.name() == kind.name()) {
            *d = kind;
        }
    }

    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = textio::split_kv(line, path, i + 1)?;
            cfg.set(k, v)
                .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&textio::read(path)?, &path.display().to_string())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Full config as a loadable file. `overrides` are recorded as comments.
    pub fn to_text(&self, overrides: &[String]) -> String {
        let mut s = String::new();
        for o in overrides {
            let _ = writeln!(s, "# override: {o}");
        }
        let b = &self.benchmark;
        let kv: Vec<(&str, String)> = vec![
            ("benchmark.classes", b.classes.to_string()),
            ("benchmark.dim", b.dim.to_string()),
            ("benchmark.separation", fmt_f64(b.separation)),
            ("benchmark.train_size", b.train_size.to_string()),
            ("benchmark.test_size", b.test_size.to_string()),
            ("benchmark.near_size", b.near_size.to_string()),
            ("benchmark.far_size", b.far_size.to_string()),
            ("benchmark.far_range", fmt_f64(b.far_range)),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.learning_rate", fmt_f64(self.train.learning_rate)),
            ("train.momentum", fmt_f64(self.train.momentum)),
            ("train.weight_decay", fmt_f64(self.train.weight_decay)),
            ("train.hidden", join_widths(&self.train.hidden)),
            ("chain.T", self.chain.horizon.to_string()),
            ("chain.N", self.chains.to_string()),
            ("chain.rho", fmt_f64(self.chain.rho)),
            ("chain.eta", fmt_f64(self.chain.eta)),
            ("chain.record_stride", self.chain.record_stride.to_string()),
            ("chain.beta_tv", fmt_f64(self.beta_tv)),
            ("chain.beta_l2", fmt_f64(self.beta_l2)),
            ("chain.beta_f", fmt_f64(self.beta_f)),
            ("chain.beta_mse", fmt_f64(self.beta_mse)),
            ("amend.a", fmt_f64(self.a)),
            ("distill.epochs", self.distill.epochs.to_string()),
            ("distill.batch_size", self.distill.batch_size.to_string()),
            ("distill.learning_rate", fmt_f64(self.distill.learning_rate)),
            ("distill.momentum", fmt_f64(self.distill.momentum)),
            ("distill.reverse_kl", self.distill.reverse_kl.to_string()),
            (
                "distill.hidden",
                self.distill
                    .hidden
                    .as_deref()
                    .map_or("same".into(), join_widths),
            ),
            (
                "detect.detectors",
                self.detectors
                    .iter()
                    .map(|d| d.name())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
        ];
        for (k, v) in kv {
            let _ = writeln!(s, "{k}={v}");
        }
        for d in &self.detectors {
            match d {
                DetectorKind::Odin {
                    temperature,
                    epsilon,
                } => {
                    let _ = writeln!(s, "detect.odin_temperature={}", fmt_f64(*temperature));
                    let _ = writeln!(s, "detect.odin_epsilon={}", fmt_f64(*epsilon));
                }
                DetectorKind::Energy { temperature } => {
                    let _ = writeln!(s, "detect.energy_temperature={}", fmt_f64(*temperature));
                }
                _ => {}
            }
        }
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "run.seeds={}", seeds.join(","));
        let _ = writeln!(s, "run.variant={}", self.variant.as_str());
        s
    }
}

fn join_widths(w: &[usize]) -> String {
    w.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn canonical_key(key: &str) -> String {
    match key.trim() {
        "a" => "amend.a",
        "T" | "chain.horizon" => "chain.T",
        "N" | "chain.chains" => "chain.N",
        "rho" => "chain.rho",
        "eta" => "chain.eta",
        "seeds" => "run.seeds",
        "variant" => "run.variant",
        "train.lr" => "train.learning_rate",
        "distill.lr" => "distill.learning_rate",
        other => other,
    }
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.chain.horizon, 1000);
        assert_eq!(c.a, 10.0);
    }

    #[test]
    fn parse_with_comments_and_aliases() {
        let text = "# desk run\n\nchain.T=200\na=1\nrun.seeds = 4,5\nvariant=ca_plus\ndetect.detectors=msp,ca\n";
        let c = ExperimentConfig::parse(text, "x.cfg").unwrap();
        assert_eq!(c.chain.horizon, 200);
        assert_eq!(c.a, 1.0);
        assert_eq!(c.seeds, vec![4, 5]);
        assert_eq!(c.variant, Variant::CaPlus);
        assert_eq!(
            c.chain.regularizer,
            Regularizer::Reconstruction { beta_mse: 1.0 }
        );
        assert_eq!(c.detectors, vec![DetectorKind::Msp, DetectorKind::Ca]);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_key_names_line() {
        let e = ExperimentConfig::parse("chain.T=5\nchain.bogus=1\n", "x.cfg").unwrap_err();
        let msg = e.to_string();
        assert!(
            msg.contains("x.cfg:2") && msg.contains("chain.bogus"),
            "{msg}"
        );
        assert!(ExperimentConfig::parse("no equals sign\n", "x.cfg").is_err());
        assert!(ExperimentConfig::parse("a=ten\n", "x.cfg").is_err());
    }

    #[test]
    fn snapshot_reloads_identically() {
        let mut c = ExperimentConfig::default();
        c.apply_overrides(&[
            "a=0.1".into(),
            "detect.odin_temperature=10".into(),
            "chain.beta_f=0".into(),
        ])
        .unwrap();
        let text = c.to_text(&["a=0.1".into()]);
        assert!(text.starts_with("# override: a=0.1\n"));
        assert_eq!(ExperimentConfig::parse(&text, "snap").unwrap(), c);
    }

    #[test]
    fn bad_overrides() {
        let mut c = ExperimentConfig::default();
        assert!(c.apply_overrides(&["a".into()]).is_err());
        assert!(c.apply_overrides(&["run.variant=ca".into()]).is_err());
        c.apply_overrides(&["run.seeds=1,1".into()]).unwrap();
        assert!(c.validate().is_err());
    }
}
