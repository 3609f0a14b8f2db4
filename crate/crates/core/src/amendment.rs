//! Time-dependent blending of predicted label distributions with the uniform
//! distribution: `Q = (1 − α(t))·U + α(t)·P` with `α(t) = (t/T)^a`.

use crate::error::{Error, Result};
use crate::network::Mlp;
use crate::synthesis::Trajectory;

/// `α(t) = (t/T)^a` with `0^0 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightFunction {
    pub a: f64,
    pub horizon: usize,
}

impl WeightFunction {
    pub fn new(a: f64, horizon: usize) -> Result<Self> {
        if !(a >= 0.0) || !a.is_finite() {
            return Err(Error::invalid(format!(
                "weight exponent a must be ≥ 0, got {a}"
            )));
        }
        if horizon == 0 {
            return Err(Error::invalid("max transition time T must be ≥ 1"));
        }
        Ok(Self { a, horizon })
    }

    pub fn at(&self, t: usize) -> Result<f64> {
        alpha(t, self.a, self.horizon)
    }
}

pub fn alpha(t: usize, a: f64, horizon: usize) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::invalid("max transition time T must be ≥ 1"));
    }
    if t > horizon {
        return Err(Error::invalid(format!("t={t} outside [0, {horizon}]")));
    }
    if !(a >= 0.0) || !a.is_finite() {
        return Err(Error::invalid(format!(
            "weight exponent a must be ≥ 0, got {a}"
        )));
    }
    // powf(0, 0) is 1, which is the convention we want for a = 0.
    Ok((t as f64 / horizon as f64).powf(a))
}

/// Amended target for one trajectory record.
#[derive(Debug, Clone, PartialEq)]
pub struct AmendedTarget {
    pub chain_id: usize,
    pub t: usize,
    pub q: Vec<f64>,
}

/// `q_y = (1 − w)/K + w·p_y` for a precomputed weight `w = α(t)`.
pub fn blend(p: &[f64], w: f64) -> Result<Vec<f64>> {
    let sum: f64 = p.iter().sum();
    if p.is_empty() || (sum - 1.0).abs() > 1e-6 || p.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::invalid(format!(
            "not a probability vector (sum {sum})"
        )));
    }
    let floor = (1.0 - w) / p.len() as f64;
    Ok(p.iter().map(|pv| floor + w * pv).collect())
}

pub fn amend(p: &[f64], t: usize, a: f64, horizon: usize) -> Result<Vec<f64>> {
    blend(p, alpha(t, a, horizon)?)
}

/// One amended target per trajectory record, using the network's current
/// predictions on the recorded samples.
pub fn amend_trajectory(traj: &Trajectory, net: &Mlp, a: f64) -> Result<Vec<AmendedTarget>> {
    let horizon = traj.config.horizon;
    let weight = WeightFunction::new(a, horizon)?;
    if traj.dim() != net.input_dim() {
        return Err(Error::Shape(format!(
            "trajectory width {} for a network expecting {}",
            traj.dim(),
            net.input_dim()
        )));
    }
    let p = net.predict(&traj.features()?)?;
    traj.records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(AmendedTarget {
                chain_id: r.chain_id,
                t: r.t,
                q: blend(p.row(i), weight.at(r.t)?)?,
            })
        })
        .collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_endpoints_and_linear_case() {
        assert_eq!(alpha(0, 10.0, 1000).unwrap(), 0.0);
        assert_eq!(alpha(1000, 10.0, 1000).unwrap(), 1.0);
        assert_eq!(alpha(500, 1.0, 1000).unwrap(), 0.5);
        for t in [0, 1, 999, 1000] {
            assert_eq!(alpha(t, 0.0, 1000).unwrap(), 1.0);
        }
        assert!(alpha(1001, 1.0, 1000).is_err());
        assert!(alpha(1, -0.5, 10).is_err());
    }

    #[test]
    fn alpha_is_monotone_in_t() {
        for a in [0.1, 1.0, 10.0, 100.0] {
            let v: Vec<f64> = (0..=50).map(|t| alpha(t, a, 50).unwrap()).collect();
            assert!(v.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn amend_endpoints() {
        let p = [0.7, 0.2, 0.1];
        assert_eq!(amend(&p, 0, 3.0, 10).unwrap(), vec![1.0 / 3.0; 3]);
        assert_eq!(amend(&p, 10, 3.0, 10).unwrap(), p.to_vec());
    }

    #[test]
    fn convex_blend_arithmetic() {
        let mut p = vec![0.0; 10];
        p[0] = 1.0;
        let q = blend(&p, 0.5).unwrap();
        assert!((q[0] - 0.55).abs() < 1e-15);
        assert!(q[1..].iter().all(|v| (v - 0.05).abs() < 1e-15));
    }

    #[test]
    fn unnormalized_input_rejected() {
        assert!(amend(&[0.5, 0.6], 1, 1.0, 2).is_err());
    }

    #[test]
    fn max_amended_confidence_monotone_in_t() {
        let p = [0.6, 0.3, 0.1];
        let m: Vec<f64> = (0..=20)
            .map(|t| {
                amend(&p, t, 2.0, 20)
                    .unwrap()
                    .into_iter()
                    .fold(0.0, f64::max)
            })
            .collect();
        assert!(m.windows(2).all(|w| w[0] <= w[1]));
    }
}
