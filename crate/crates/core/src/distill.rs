//! Distillation of amended targets into an auxiliary network, and the binary
//! ID/OOD classifier read off its softmax.

use crate::amendment::AmendedTarget;
use crate::autodiff::{Graph, Tensor, Var};
use crate::data;
use crate::error::{Error, Result};
use crate::network::{self, gather_rows, max_of, shuffled, Mlp, Sgd};
use crate::synthesis::Trajectory;

/// Floor applied to amended targets before taking their log.
pub const Q_FLOOR: f64 = 1e-12;

fn check_prob(v: &[f64], what: &str) -> Result<()> {
    let sum: f64 = v.iter().sum();
    if v.is_empty() || (sum - 1.0).abs() > 1e-6 || v.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::invalid(format!(
            "{what} is not a probability vector (sum {sum})"
        )));
    }
    Ok(())
}

/// `KL(p ‖ q) = Σ p·log(p/q)` with `0·log 0 = 0` and `q` floored at
/// [`Q_FLOOR`].
pub fn kl_loss(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "KL between lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    check_prob(p, "p")?;
    check_prob(q, "q")?;
    Ok(p.iter()
        .zip(q)
        .filter(|(pv, _)| **pv > 0.0)
        .map(|(pv, qv)| pv * (pv.ln() - qv.max(Q_FLOOR).ln()))
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Minimize `KL(Q ‖ P_φ)` instead of `KL(P_φ ‖ Q)`.
    pub reverse_kl: bool,
    /// Hidden widths of the auxiliary network; `None` copies the standard
    /// network's.
    pub hidden: Option<Vec<usize>>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            reverse_kl: false,
            hidden: None,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::invalid(
                "distill: epochs, batch_size and learning_rate must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("distill: momentum must be in [0, 1)"));
        }
        if self.hidden.as_ref().is_some_and(|h| h.contains(&0)) {
            return Err(Error::invalid("distill: hidden widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Distilled {
    pub network: Mlp,
    pub initial_kl: f64,
    pub final_kl: f64,
    pub epoch_losses: Vec<f64>,
}

/// Mean KL of `net` against `targets` over the rows of `x`.
pub fn mean_kl(net: &Mlp, x: &Tensor, targets: &Tensor, reverse: bool) -> Result<f64> {
    let p = net.predict(x)?;
    let mut total = 0.0;
    for i in 0..p.rows() {
        total += if reverse {
            kl_loss(targets.row(i), p.row(i))?
        } else {
            kl_loss(p.row(i), targets.row(i))?
        };
    }
    Ok(total / p.rows() as f64)
}

/// Batch loss and parameter gradients.
fn kl_step(
    net: &Mlp,
    x: &Tensor,
    log_q: &Tensor,
    q: &Tensor,
    reverse: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let vars = net.register(&mut g, true);
    let xv = g.constant(x.clone());
    let fw = network::forward_graph(&mut g, &vars, xv)?;
    let log_p = g.log_softmax(fw.logits)?;
    let lq = g.constant(log_q.clone());
    let per_entry = if reverse {
        // Σ q (log q − log p); the q log q part is constant but kept so the
        // reported loss is the divergence itself.
        let qc = g.constant(q.clone());
        let gap = g.sub(lq, log_p)?;
        g.mul(qc, gap)?
    } else {
        let p = g.softmax(fw.logits)?;
        let gap = g.sub(log_p, lq)?;
        g.mul(p, gap)?
    };
    let s = g.sum(per_entry)?;
    let loss = g.scale(s, 1.0 / x.rows() as f64)?;
    let value = g.value(loss)?.item();
    let params: Vec<Var> = vars
        .weights
        .iter()
        .zip(&vars.biases)
        .flat_map(|(w, b)| [*w, *b])
        .collect();
    Ok((value, g.gradients(loss, &params)?))
}

fn target_matrix(targets: &[AmendedTarget], classes: usize) -> Result<(Tensor, Tensor)> {
    let mut q = Vec::with_capacity(targets.len() * classes);
    for t in targets {
        if t.q.len() != classes {
            return Err(Error::Shape(format!(
                "target of length {} for {classes} classes",
                t.q.len()
            )));
        }
        check_prob(&t.q, "amended target")?;
        q.extend_from_slice(&t.q);
    }
    let log_q = q.iter().map(|v| v.max(Q_FLOOR).ln()).collect();
    Ok((
        Tensor::matrix(targets.len(), classes, q)?,
        Tensor::matrix(targets.len(), classes, log_q)?,
    ))
}

/// Trains a fresh auxiliary network so that `P_φ(·|x̂)` matches the amended
/// target of every trajectory record.
pub fn distill(
    traj: &Trajectory,
    targets: &[AmendedTarget],
    standard_dims: &[usize],
    cfg: &DistillConfig,
) -> Result<Distilled> {
    cfg.validate()?;
    if traj.is_empty() {
        return Err(Error::invalid("cannot distill from an empty trajectory"));
    }
    if targets.len() != traj.len() {
        return Err(Error::Shape(format!(
            "{} targets for {} records",
            targets.len(),
            traj.len()
        )));
    }
    for (i, (r, t)) in traj.records.iter().zip(targets).enumerate() {
        if r.chain_id != t.chain_id || r.t != t.t {
            return Err(Error::invalid(format!(
                "target {i} is for (chain {}, t {}) but record is (chain {}, t {})",
                t.chain_id, t.t, r.chain_id, r.t
            )));
        }
    }
    let x = traj.features()?;
    distill_arrays(&x, targets, standard_dims, cfg)
}

/// Same as [`distill`] on raw `[n, d]` inputs.
pub fn distill_arrays(
    x: &Tensor,
    targets: &[AmendedTarget],
    standard_dims: &[usize],
    cfg: &DistillConfig,
) -> Result<Distilled> {
    cfg.validate()?;
    if standard_dims.len() < 2 {
        return Err(Error::invalid(
            "standard network dims need at least input and output",
        ));
    }
    let classes = *standard_dims.last().unwrap();
    if x.cols() != standard_dims[0] {
        return Err(Error::Shape(format!(
            "inputs of width {} for network width {}",
            x.cols(),
            standard_dims[0]
        )));
    }
    let (q, log_q) = target_matrix(targets, classes)?;
    let dims = match &cfg.hidden {
        None => standard_dims.to_vec(),
        Some(h) => {
            let mut d = vec![standard_dims[0]];
            d.extend(h);
            d.push(classes);
            d
        }
    };
    let mut net = Mlp::new(&dims, data::derive_seed(cfg.seed, 21))?;
    let mut rng = data::rng(data::derive_seed(cfg.seed, 22));
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum, 0.0);
    let initial_kl = mean_kl(&net, x, &q, cfg.reverse_kl)?;
    let n = x.rows();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = shuffled(n, &mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xb = gather_rows(x, batch);
            let (lb, qb) = (gather_rows(&log_q, batch), gather_rows(&q, batch));
            let (loss, grads) = kl_step(&net, &xb, &lb, &qb, cfg.reverse_kl)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "distillation loss is {loss} at epoch {epoch}"
                )));
            }
            total += loss * batch.len() as f64;
            sgd.step(net.params_mut(), &grads);
        }
        epoch_losses.push(total / n as f64);
    }
    let final_kl = mean_kl(&net, x, &q, cfg.reverse_kl)?;
    Ok(Distilled {
        network: net,
        initial_kl,
        final_kl,
        epoch_losses,
    })
}

/// `(p_id, p_ood)` per row, where `p_id = max_y P_φ(y|x)`.
pub fn binary_classify(aux: &Mlp, x: &Tensor) -> Result<Vec<(f64, f64)>> {
    let p = aux.predict(x)?;
    Ok((0..p.rows())
        .map(|i| {
            let id = max_of(p.row(i));
            (id, 1.0 - id)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_loss(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let v = kl_loss(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        assert!(kl_loss(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(kl_loss(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn kl_tolerates_zero_target() {
        let v = kl_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(v.is_finite() && v > 10.0);
    }

    #[test]
    fn uniform_aux_binary_split() {
        let mut net = Mlp::new(&[3, 5, 10], 0).unwrap();
        net.zero_output_layer();
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap();
        for (id, ood) in binary_classify(&net, &x).unwrap() {
            assert!((id - 0.1).abs() < 1e-15 && (ood - 0.9).abs() < 1e-15);
            assert_eq!(id + ood, 1.0);
        }
    }

    #[test]
    fn overfits_single_sample() {
        let x = Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap();
        let q = vec![0.9, 0.05, 0.05];
        let targets = [AmendedTarget {
            chain_id: 0,
            t: 0,
            q: q.clone(),
        }];
        let cfg = DistillConfig {
            epochs: 400,
            batch_size: 1,
            learning_rate: 0.05,
            ..Default::default()
        };
        let out = distill_arrays(&x, &targets, &[2, 8, 3], &cfg).unwrap();
        let p = out.network.predict(&x).unwrap();
        let tv: f64 = p
            .row(0)
            .iter()
            .zip(&q)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.05, "tv {tv}");
        assert!(out.final_kl < out.initial_kl);
    }

    #[test]
    fn deterministic_given_seed() {
        let x = Tensor::matrix(3, 2, vec![0.0, 1.0, 1.0, 0.0, -1.0, -1.0]).unwrap();
        let targets: Vec<AmendedTarget> = (0..3)
            .map(|i| AmendedTarget {
                chain_id: i,
                t: 0,
                q: vec![0.5, 0.5],
            })
            .collect();
        let cfg = DistillConfig {
            epochs: 5,
            seed: 4,
            ..Default::default()
        };
        let a = distill_arrays(&x, &targets, &[2, 4, 2], &cfg).unwrap();
        let b = distill_arrays(&x, &targets, &[2, 4, 2], &cfg).unwrap();
        assert_eq!(a.network, b.network);
        let wide = DistillConfig {
            hidden: Some(vec![7]),
            ..cfg
        };
        let c = distill_arrays(&x, &targets, &[2, 4, 2], &wide).unwrap();
        assert_eq!(c.network.layer_dims(), &[2, 7, 2]);
    }

    #[test]
    fn reverse_direction_also_fits() {
        let x = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let targets = [AmendedTarget {
            chain_id: 0,
            t: 0,
            q: vec![0.2, 0.8],
        }];
        let cfg = DistillConfig {
            epochs: 300,
            batch_size: 1,
            reverse_kl: true,
            ..Default::default()
        };
        let out = distill_arrays(&x, &targets, &[2, 4, 2], &cfg).unwrap();
        assert!(out.final_kl < 1e-3, "{}", out.final_kl);
    }
}
