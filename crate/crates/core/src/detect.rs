//! OOD detectors. Every score is oriented so that higher means more likely
//! out-of-distribution.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{softmax_row, Graph, Tensor};
use crate::data::Mixture;
use crate::distill::binary_classify;
use crate::error::{Error, Result};
use crate::network::{self, argmax, max_of, Mlp};
use crate::par::{self, Execution};
use crate::textio::{self, fmt_f64};

/// Rows scored per work item when scoring in parallel.
const SCORE_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DetectorKind {
    Msp,
    Odin {
        temperature: f64,
        epsilon: f64,
    },
    Energy {
        temperature: f64,
    },
    /// Confidence of the distilled auxiliary network.
    Ca,
}

impl DetectorKind {
    pub fn odin_default() -> Self {
        DetectorKind::Odin {
            temperature: 1000.0,
            epsilon: 1e-3,
        }
    }

    pub fn energy_default() -> Self {
        DetectorKind::Energy { temperature: 1.0 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DetectorKind::Msp => "msp",
            DetectorKind::Odin { .. } => "odin",
            DetectorKind::Energy { .. } => "energy",
            DetectorKind::Ca => "ca",
        }
    }

    /// Parses `msp`, `odin`, `energy`, `ca` with default hyperparameters.
    pub fn from_name(name: &str) -> Result<Self> {
        match name.trim() {
            "msp" => Ok(DetectorKind::Msp),
            "odin" => Ok(Self::odin_default()),
            "energy" => Ok(Self::energy_default()),
            "ca" => Ok(DetectorKind::Ca),
            other => Err(Error::invalid(format!(
                "unknown detector {other:?} (expected msp, odin, energy or ca)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DetectorKind::Odin {
                temperature,
                epsilon,
            } if !(temperature > 0.0) || !(epsilon >= 0.0) => Err(Error::invalid(format!(
                "odin needs τ > 0 and ε ≥ 0, got τ={temperature}, ε={epsilon}"
            ))),
            DetectorKind::Energy { temperature } if !(temperature > 0.0) => Err(Error::invalid(
                format!("energy needs τ > 0, got {temperature}"),
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DetectorKind::Odin {
                temperature,
                epsilon,
            } => write!(f, "odin(τ={temperature}, ε={epsilon})"),
            DetectorKind::Energy { temperature } => write!(f, "energy(τ={temperature})"),
            other => f.write_str(other.name()),
        }
    }
}

/// `1 − max_y P(y|x)` per row.
pub fn score_msp(net: &Mlp, x: &Tensor) -> Result<Vec<f64>> {
    Ok(net.confidence(x)?.into_iter().map(|c| 1.0 - c).collect())
}

/// Temperature-scaled MSP after a signed-gradient input perturbation that
/// raises the temperature-scaled confidence of the predicted class.
pub fn score_odin(net: &Mlp, x: &Tensor, temperature: f64, epsilon: f64) -> Result<Vec<f64>> {
    DetectorKind::Odin {
        temperature,
        epsilon,
    }
    .validate()?;
    let perturbed = if epsilon == 0.0 {
        x.clone()
    } else {
        odin_perturb(net, x, temperature, epsilon)?
    };
    let mut logits = net.logits(&perturbed)?;
    let k = net.classes();
    Ok(logits
        .values_mut()
        .chunks_mut(k)
        .map(|row| {
            row.iter_mut().for_each(|v| *v /= temperature);
            softmax_row(row);
            1.0 - max_of(row)
        })
        .collect())
}

fn odin_perturb(net: &Mlp, x: &Tensor, temperature: f64, epsilon: f64) -> Result<Tensor> {
    let x = if x.shape().len() == 1 {
        Tensor::matrix(1, x.len(), x.values().to_vec())?
    } else {
        x.clone()
    };
    let predicted: Vec<usize> = {
        let l = net.logits(&x)?;
        (0..l.rows()).map(|i| argmax(l.row(i))).collect()
    };
    let mut g = Graph::new();
    let vars = net.register(&mut g, false);
    let xv = g.leaf(x.clone().requires_grad());
    let fw = network::forward_graph(&mut g, &vars, xv)?;
    let scaled = g.scale(fw.logits, 1.0 / temperature)?;
    let ls = g.log_softmax(scaled)?;
    let oh = g.constant(network::one_hot(&predicted, net.classes()));
    let picked = g.mul(ls, oh)?;
    // Rows are independent, so the gradient of the sum is the per-row gradient.
    let total = g.sum(picked)?;
    let grad = g.gradients(total, &[xv])?.remove(0);
    let mut out = x;
    // x − ε·sign(−∇ log S) = x + ε·sign(∇ log S)
    for (v, gv) in out.values_mut().iter_mut().zip(&grad) {
        *v += epsilon * sign(*gv);
    }
    Ok(out)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `−τ·log Σ_y exp(logit_y/τ)`.
pub fn score_energy(net: &Mlp, x: &Tensor, temperature: f64) -> Result<Vec<f64>> {
    DetectorKind::Energy { temperature }.validate()?;
    let logits = net.logits(x)?;
    Ok((0..logits.rows())
        .map(|i| energy_of(logits.row(i), temperature))
        .collect())
}

pub fn energy_of(logits: &[f64], temperature: f64) -> f64 {
    let m = max_of(logits) / temperature;
    let s: f64 = logits.iter().map(|l| (l / temperature - m).exp()).sum();
    -temperature * (m + s.ln())
}

/// `P_φ(OOD|x) = 1 − max_y P_φ(y|x)`.
pub fn score_ca(aux: &Mlp, x: &Tensor) -> Result<Vec<f64>> {
    Ok(binary_classify(aux, x)?
        .into_iter()
        .map(|(_, ood)| ood)
        .collect())
}

/// Scores `x` with `kind`. `aux` is required for [`DetectorKind::Ca`] only.
pub fn score(
    kind: &DetectorKind,
    standard: &Mlp,
    aux: Option<&Mlp>,
    x: &Tensor,
) -> Result<Vec<f64>> {
    kind.validate()?;
    match *kind {
        DetectorKind::Msp => score_msp(standard, x),
        DetectorKind::Odin {
            temperature,
            epsilon,
        } => score_odin(standard, x, temperature, epsilon),
        DetectorKind::Energy { temperature } => score_energy(standard, x, temperature),
        DetectorKind::Ca => score_ca(
            aux.ok_or_else(|| Error::invalid("ca detector needs an auxiliary network"))?,
            x,
        ),
    }
}

/// [`score`] over row chunks, possibly in parallel. Output order matches `x`.
pub fn score_batch(
    kind: &DetectorKind,
    standard: &Mlp,
    aux: Option<&Mlp>,
    x: &Tensor,
    exec: Execution,
) -> Result<Vec<f64>> {
    let n = x.rows();
    let starts: Vec<usize> = (0..n).step_by(SCORE_CHUNK).collect();
    let parts = par::map_slice(exec, &starts, |&s| {
        let idx: Vec<usize> = (s..(s + SCORE_CHUNK).min(n)).collect();
        score(kind, standard, aux, &network::gather_rows(x, &idx))
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Scores and ground truth for one detector on one mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub detector: DetectorKind,
    pub scores: Vec<f64>,
    pub is_ood: Vec<bool>,
    /// Fingerprint of the scored mixture.
    pub dataset: String,
}

impl ScoreSet {
    pub fn compute(
        kind: &DetectorKind,
        standard: &Mlp,
        aux: Option<&Mlp>,
        mixture: &Mixture,
        exec: Execution,
    ) -> Result<Self> {
        Ok(Self {
            detector: *kind,
            scores: score_batch(kind, standard, aux, &mixture.features, exec)?,
            is_ood: mixture.is_ood.clone(),
            dataset: mixture.fingerprint(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != self.is_ood.len() {
            return Err(Error::Shape(format!(
                "{} scores vs {} flags",
                self.scores.len(),
                self.is_ood.len()
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("#ca-scores v1\n");
        let _ = writeln!(s, "detector={}", self.detector.name());
        match self.detector {
            DetectorKind::Odin {
                temperature,
                epsilon,
            } => {
                let _ = writeln!(s, "temperature={}", fmt_f64(temperature));
                let _ = writeln!(s, "epsilon={}", fmt_f64(epsilon));
            }
            DetectorKind::Energy { temperature } => {
                let _ = writeln!(s, "temperature={}", fmt_f64(temperature));
            }
            _ => {}
        }
        let _ = writeln!(s, "dataset={}", self.dataset);
        let _ = writeln!(s, "rows={}", self.scores.len());
        s.push_str("---\nscore,is_ood\n");
        for (v, o) in self.scores.iter().zip(&self.is_ood) {
            let _ = writeln!(s, "{},{}", fmt_f64(*v), u8::from(*o));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        textio::write(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&textio::read(path)?, &path.display().to_string())
    }

    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, "#ca-scores v1")) => {}
            _ => return Err(Error::parse(path, 1, "expected \"#ca-scores v1\"")),
        }
        let mut kv = textio::KvBlock::new(path);
        let mut saw_sep = false;
        for (ln, line) in lines.by_ref() {
            if line.trim() == "---" {
                saw_sep = true;
                break;
            }
            kv.push(ln, line)?;
        }
        if !saw_sep {
            return Err(Error::parse(path, 1, "missing \"---\" separator"));
        }
        let (dl, name) = kv.get("detector")?;
        let detector = match name {
            "msp" => DetectorKind::Msp,
            "ca" => DetectorKind::Ca,
            "odin" => DetectorKind::Odin {
                temperature: kv.f64("temperature")?,
                epsilon: kv.f64("epsilon")?,
            },
            "energy" => DetectorKind::Energy {
                temperature: kv.f64("temperature")?,
            },
            other => {
                return Err(Error::parse(
                    path,
                    dl,
                    format!("unknown detector {other:?}"),
                ))
            }
        };
        let rows: usize = kv.num("rows")?;
        let mut scores = Vec::with_capacity(rows);
        let mut is_ood = Vec::with_capacity(rows);
        for (ln, line) in lines {
            let line = line.trim();
            if line.is_empty() || line == "score,is_ood" {
                continue;
            }
            let (s, o) = line
                .split_once(',')
                .ok_or_else(|| Error::parse(path, ln, "expected score,is_ood"))?;
            scores.push(textio::parse_f64(s, path, ln)?);
            is_ood.push(match o.trim() {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::parse(
                        path,
                        ln,
                        format!("is_ood must be 0 or 1, got {other:?}"),
                    ))
                }
            });
        }
        if scores.len() != rows {
            return Err(Error::parse(
                path,
                1,
                format!("header says {rows} rows, found {}", scores.len()),
            ));
        }
        Ok(Self {
            detector,
            scores,
            is_ood,
            dataset: kv.get("dataset")?.1.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> Mlp {
        Mlp::new(&[3, 6, 4], 2).unwrap()
    }

    fn inputs() -> Tensor {
        Tensor::matrix(3, 3, vec![0.1, -2.0, 1.0, 3.0, 0.0, 0.5, -1.0, -1.0, 2.0]).unwrap()
    }

    #[test]
    fn uniform_msp_two_classes() {
        let mut n = Mlp::new(&[2, 3, 2], 0).unwrap();
        n.zero_output_layer();
        let x = Tensor::matrix(1, 2, vec![4.0, -1.0]).unwrap();
        assert_eq!(score_msp(&n, &x).unwrap(), vec![0.5]);
    }

    #[test]
    fn odin_reduces_to_msp() {
        let (n, x) = (net(), inputs());
        assert_eq!(
            score_odin(&n, &x, 1.0, 0.0).unwrap(),
            score_msp(&n, &x).unwrap()
        );
    }

    #[test]
    fn odin_high_temperature_flattens() {
        let (n, x) = (net(), inputs());
        for s in score_odin(&n, &x, 1e9, 0.0).unwrap() {
            assert!((s - 0.75).abs() < 1e-6);
        }
    }

    #[test]
    fn odin_perturbation_raises_confidence() {
        let (n, x) = (net(), inputs());
        let plain = score_odin(&n, &x, 1.0, 0.0).unwrap();
        let moved = score_odin(&n, &x, 1.0, 1e-2).unwrap();
        for (p, m) in plain.iter().zip(&moved) {
            assert!(m <= p, "{m} > {p}");
        }
    }

    #[test]
    fn energy_closed_form_and_shift() {
        assert!((energy_of(&[0.0; 10], 1.0) + 10f64.ln()).abs() < 1e-15);
        let a = energy_of(&[1.0, 2.0, -0.5], 1.0);
        let b = energy_of(&[4.0, 5.0, 2.5], 1.0);
        assert!((b - (a - 3.0)).abs() < 1e-12);
        assert!(energy_of(&[1.0, 2.5, -0.5], 1.0) < a);
    }

    #[test]
    fn ca_requires_aux() {
        let (n, x) = (net(), inputs());
        assert!(score(&DetectorKind::Ca, &n, None, &x).is_err());
        assert_eq!(
            score(&DetectorKind::Ca, &n, Some(&n), &x).unwrap(),
            score_msp(&n, &x).unwrap()
        );
    }

    #[test]
    fn batch_matches_direct() {
        let n = net();
        let x = Tensor::matrix(
            600,
            3,
            (0..1800)
                .map(|i| ((i * 37) % 101) as f64 / 25.0 - 2.0)
                .collect(),
        )
        .unwrap();
        for kind in [
            DetectorKind::Msp,
            DetectorKind::odin_default(),
            DetectorKind::energy_default(),
        ] {
            let direct = score(&kind, &n, None, &x).unwrap();
            assert_eq!(
                score_batch(&kind, &n, None, &x, Execution::Sequential).unwrap(),
                direct
            );
            assert_eq!(
                score_batch(&kind, &n, None, &x, Execution::Parallel).unwrap(),
                direct
            );
        }
    }

    #[test]
    fn invalid_hyperparameters() {
        assert!(DetectorKind::Odin {
            temperature: 0.0,
            epsilon: 0.0
        }
        .validate()
        .is_err());
        assert!(DetectorKind::Odin {
            temperature: 1.0,
            epsilon: -1.0
        }
        .validate()
        .is_err());
        assert!(DetectorKind::Energy { temperature: -1.0 }
            .validate()
            .is_err());
        assert!(DetectorKind::from_name("gradnorm").is_err());
    }
}
