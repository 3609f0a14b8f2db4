//! AUROC, detection error and ID accuracy. Scores follow the "higher = more
//! OOD" convention throughout.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::Mlp;
use crate::textio::fmt_f64;

fn split_counts(scores: &[f64], is_ood: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != is_ood.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} flags",
            scores.len(),
            is_ood.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores must be finite".into()));
    }
    let n_ood = is_ood.iter().filter(|&&b| b).count();
    let n_id = scores.len() - n_ood;
    if n_ood == 0 || n_id == 0 {
        return Err(Error::invalid(format!(
            "need at least one ID and one OOD sample (got {n_id} ID, {n_ood} OOD)"
        )));
    }
    Ok((n_id, n_ood))
}

fn sorted_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    idx
}

/// `P(score_OOD > score_ID) + ½·P(tie)` via Mann–Whitney ranks with midrank
/// tie handling.
pub fn auroc(scores: &[f64], is_ood: &[bool]) -> Result<f64> {
    let (n_id, n_ood) = split_counts(scores, is_ood)?;
    let idx = sorted_order(scores);
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j share their average.
        let mid = (i + 1 + j) as f64 / 2.0;
        let oods = idx[i..j].iter().filter(|&&k| is_ood[k]).count();
        rank_sum += mid * oods as f64;
        i = j;
    }
    let (p, q) = (n_ood as f64, n_id as f64);
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * q))
}

/// Minimum over thresholds `δ` of `½·P(ID score > δ) + ½·P(OOD score ≤ δ)`,
/// scanning ±∞ and every midpoint between adjacent distinct scores.
pub fn detection_error(scores: &[f64], is_ood: &[bool]) -> Result<f64> {
    let (n_id, n_ood) = split_counts(scores, is_ood)?;
    let idx = sorted_order(scores);
    // δ = −∞: every ID sample is flagged.
    let (mut id_le, mut ood_le) = (0usize, 0usize);
    let err = |id_le: usize, ood_le: usize| {
        0.5 * (n_id - id_le) as f64 / n_id as f64 + 0.5 * ood_le as f64 / n_ood as f64
    };
    let mut best = err(0, 0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if is_ood[idx[j]] {
                ood_le += 1;
            } else {
                id_le += 1;
            }
            j += 1;
        }
        // δ between this group and the next (or +∞ after the last).
        best = best.min(err(id_le, ood_le));
        i = j;
    }
    Ok(best)
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn accuracy(net: &Mlp, data: &Dataset) -> Result<f64> {
    let labels = data.labels()?;
    if data.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let pred = net.argmax(&data.features)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Evaluation of one detector on one ID/OOD mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub detector: String,
    pub mixture: String,
    pub auroc: f64,
    pub detection_error: f64,
    pub id_accuracy: Option<f64>,
    pub n_id: usize,
    pub n_ood: usize,
    pub seed: u64,
    pub fingerprint: String,
}

pub const REPORT_CSV_HEADER: &str =
    "seed,detector,mixture,auroc,detection_error,id_accuracy,n_id,n_ood,fingerprint";

impl EvalReport {
    pub fn evaluate(
        detector: &str,
        mixture: &str,
        scores: &[f64],
        is_ood: &[bool],
        id_accuracy: Option<f64>,
        seed: u64,
        fingerprint: &str,
    ) -> Result<Self> {
        let (n_id, n_ood) = split_counts(scores, is_ood)?;
        Ok(Self {
            detector: detector.to_string(),
            mixture: mixture.to_string(),
            auroc: auroc(scores, is_ood)?,
            detection_error: detection_error(scores, is_ood)?,
            id_accuracy,
            n_id,
            n_ood,
            seed,
            fingerprint: fingerprint.to_string(),
        })
    }

    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "detector: {}", self.detector);
        let _ = writeln!(s, "mixture: {}", self.mixture);
        let _ = writeln!(s, "auroc: {}", fmt_f64(self.auroc));
        let _ = writeln!(s, "detection_error: {}", fmt_f64(self.detection_error));
        if let Some(a) = self.id_accuracy {
            let _ = writeln!(s, "id_accuracy: {}", fmt_f64(a));
        }
        let _ = writeln!(s, "n_id: {}", self.n_id);
        let _ = writeln!(s, "n_ood: {}", self.n_ood);
        let _ = writeln!(s, "seed: {}", self.seed);
        let _ = writeln!(s, "fingerprint: {}", self.fingerprint);
        s
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.detector,
            self.mixture,
            fmt_f64(self.auroc),
            fmt_f64(self.detection_error),
            self.id_accuracy.map(fmt_f64).unwrap_or_default(),
            self.n_id,
            self.n_ood,
            self.fingerprint
        )
    }
}
