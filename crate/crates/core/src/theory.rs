//! Closed forms of the generalization bound for the distilled binary
//! classifier and the numeric identities it rests on.
//!
//! ```text
//! φ(a)  = (a+1)(2a+1)/a²
//! bound = 620 R² ln(32M) K² φ(a) / (4 T √(M³) (K−1)²)  +  9/√(Nδ),   M = N(T+1)
//! ```

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::textio::fmt_f64;

pub fn phi(a: f64) -> Result<f64> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::Domain(format!("φ(a) needs a > 0, got {a}")));
    }
    Ok((a + 1.0) * (2.0 * a + 1.0) / (a * a))
}

/// Analytic derivative `dφ/da = (−3a − 2)/a³`.
pub fn phi_derivative(a: f64) -> Result<f64> {
    phi(a)?;
    Ok((-3.0 * a - 2.0) / (a * a * a))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundInputs {
    /// Number of chains.
    pub chains: usize,
    /// Maximum transition time.
    pub horizon: usize,
    /// Radius of the hypothesis ball.
    pub radius: f64,
    pub classes: usize,
    pub delta: f64,
    pub a: f64,
}

impl BoundInputs {
    /// `M = N(T+1)`.
    pub fn samples(&self) -> usize {
        self.chains * (self.horizon + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.horizon == 0 {
            return Err(Error::invalid("bound needs N ≥ 1 and T ≥ 1"));
        }
        if !(self.radius > 0.0) {
            return Err(Error::invalid(format!(
                "radius must be positive, got {}",
                self.radius
            )));
        }
        if self.classes < 2 {
            return Err(Error::invalid("bound needs K ≥ 2"));
        }
        // δ = 1 is admitted: it makes the confidence term degenerate but finite.
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::invalid(format!(
                "delta must lie in (0, 1], got {}",
                self.delta
            )));
        }
        phi(self.a).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bound {
    pub phi: f64,
    /// Margin/complexity term, linear in `φ(a)`.
    pub complexity: f64,
    /// `9/√(Nδ)`.
    pub confidence: f64,
}

impl Bound {
    pub fn total(&self) -> f64 {
        self.complexity + self.confidence
    }
}

pub fn bound(inputs: &BoundInputs) -> Result<Bound> {
    inputs.validate()?;
    let m = inputs.samples() as f64;
    let k = inputs.classes as f64;
    let t = inputs.horizon as f64;
    let phi = phi(inputs.a)?;
    let complexity = 620.0 * inputs.radius * inputs.radius * (32.0 * m).ln() * k * k * phi
        / (4.0 * t * (m * m * m).sqrt() * (k - 1.0) * (k - 1.0));
    let confidence = 9.0 / (inputs.chains as f64 * inputs.delta).sqrt();
    Ok(Bound {
        phi,
        complexity,
        confidence,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneCheck {
    pub decreasing: bool,
    /// First adjacent pair `(a_i, a_{i+1})` where φ failed to decrease.
    pub worst_pair: Option<(f64, f64)>,
    /// Largest relative error between central differences and `dφ/da`.
    pub max_slope_rel_error: f64,
    pub slopes_negative: bool,
}

/// Central difference of `φ` at `a` with a step proportional to `a`.
pub fn phi_slope_fd(a: f64) -> Result<f64> {
    let h = 1e-5 * a;
    Ok((phi(a + h)? - phi(a - h)?) / (2.0 * h))
}

pub fn check_phi_monotone(grid: &[f64]) -> Result<MonotoneCheck> {
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("grid must be strictly ascending"));
    }
    let values = grid.iter().map(|&a| phi(a)).collect::<Result<Vec<_>>>()?;
    let worst_pair = grid
        .windows(2)
        .zip(values.windows(2))
        .find(|(_, v)| !(v[1] < v[0]))
        .map(|(g, _)| (g[0], g[1]));
    let mut max_rel = 0.0f64;
    let mut negative = true;
    for &a in grid {
        let exact = phi_derivative(a)?;
        let fd = phi_slope_fd(a)?;
        max_rel = max_rel.max(((fd - exact) / exact).abs());
        negative &= exact < 0.0 && fd < 0.0;
    }
    Ok(MonotoneCheck {
        decreasing: worst_pair.is_none() && negative,
        worst_pair,
        max_slope_rel_error: max_rel,
        slopes_negative: negative,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SumCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Compares `Σ_{t=0}^{T} (1 − (t/T)^a)²` with its integral estimate
/// `2Ta² / ((a+1)(2a+1))`.
pub fn check_sum_bound(a: f64, horizon: usize) -> Result<SumCheck> {
    if !(a > 0.0) || horizon == 0 {
        return Err(Error::invalid(format!(
            "sum check needs a > 0 and T ≥ 1 (got {a}, {horizon})"
        )));
    }
    let t_max = horizon as f64;
    // Kahan summation: the terms span many orders of magnitude for large a.
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for t in 0..=horizon {
        let v = 1.0 - (t as f64 / t_max).powf(a);
        let y = v * v - comp;
        let s = sum + y;
        comp = (s - sum) - y;
        sum = s;
    }
    let rhs = 2.0 * t_max * a * a / ((a + 1.0) * (2.0 * a + 1.0));
    Ok(SumCheck {
        lhs: sum,
        rhs,
        holds: sum >= rhs,
    })
}

/// `r_t = 1 − (1 − 1/K)·α_t`.
pub fn target_value(classes: usize, alpha_t: f64) -> Result<f64> {
    if classes < 2 || !(0.0..=1.0).contains(&alpha_t) {
        return Err(Error::invalid(format!(
            "target value needs K ≥ 2, α ∈ [0,1] (got {classes}, {alpha_t})"
        )));
    }
    Ok(1.0 - (1.0 - 1.0 / classes as f64) * alpha_t)
}

/// `a,phi,complexity,confidence,bound` rows for a grid of exponents.
pub fn bound_table(base: &BoundInputs, grid: &[f64]) -> Result<String> {
    let mut s = String::from("a,phi,complexity,confidence,bound\n");
    for &a in grid {
        let b = bound(&BoundInputs { a, ..*base })?;
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            fmt_f64(a),
            fmt_f64(b.phi),
            fmt_f64(b.complexity),
            fmt_f64(b.confidence),
            fmt_f64(b.total())
        );
    }
    Ok(s)
}
