//! Markov-chain synthesis of OOD-to-ID trajectories.
//!
//! Each chain starts from `x₀ ~ N(0, I)` and repeatedly applies
//!
//! ```text
//! x_t = x_{t−1} + ρ·∇ log P(y | x_{t−1}) − ρ·∇R(x_{t−1}) + η·z,   z ~ N(0, I)
//! ```
//!
//! for a target label `y` fixed per chain. Both gradients come from one
//! backward pass over `G(x) = −log P(y|x) + R(x)`. The regularizer is either
//! data-free (total variation, l2 and hidden-feature statistics) or a
//! reconstruction penalty towards a real training sample.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::amendment::AmendedTarget;
use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::network::{self, ActivationStats, Mlp};
use crate::par::{self, Execution};
use crate::textio::{self, fmt_f64, join_f64};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularizer {
    None,
    /// Total variation, squared l2 norm, and hidden pre-activation statistics.
    DataFree {
        beta_tv: f64,
        beta_l2: f64,
        beta_f: f64,
    },
    /// Mean squared error to a randomly chosen training sample.
    Reconstruction {
        beta_mse: f64,
    },
}

/// Default weight of the feature-statistics term. The per-sample variance
/// term is quartic in the pre-activations, and weights of 0.1 and above make
/// chains diverge within ten steps at `ρ = 0.05` on standardized inputs.
pub const DEFAULT_BETA_F: f64 = 0.01;

impl Regularizer {
    pub fn data_free_default() -> Self {
        Regularizer::DataFree {
            beta_tv: 1e-3,
            beta_l2: 3e-8,
            beta_f: DEFAULT_BETA_F,
        }
    }

    pub fn reconstruction_default() -> Self {
        Regularizer::Reconstruction { beta_mse: 1.0 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Regularizer::None => "none",
            Regularizer::DataFree { .. } => "data_free",
            Regularizer::Reconstruction { .. } => "reconstruction",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    /// Maximum transition time `T`.
    pub horizon: usize,
    /// Step magnitude `ρ`.
    pub rho: f64,
    /// Noise scale `η`.
    pub eta: f64,
    pub regularizer: Regularizer,
    pub seed: u64,
    /// Record every k-th state, plus `t = 0` and `t = T`.
    pub record_stride: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            horizon: 1000,
            rho: 0.05,
            eta: 0.01,
            regularizer: Regularizer::data_free_default(),
            seed: 0,
            record_stride: 1,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::invalid("chain: T must be ≥ 1"));
        }
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::invalid(format!(
                "chain: rho must be > 0, got {}",
                self.rho
            )));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::invalid(format!(
                "chain: eta must be ≥ 0, got {}",
                self.eta
            )));
        }
        if self.record_stride == 0 || self.record_stride > self.horizon {
            return Err(Error::invalid(format!(
                "chain: record_stride must be in [1, T], got {}",
                self.record_stride
            )));
        }
        let betas: &[f64] = match &self.regularizer {
            Regularizer::None => &[],
            Regularizer::DataFree {
                beta_tv,
                beta_l2,
                beta_f,
            } => &[*beta_tv, *beta_l2, *beta_f],
            Regularizer::Reconstruction { beta_mse } => &[*beta_mse],
        };
        if betas.iter().any(|b| !(*b >= 0.0)) {
            return Err(Error::invalid(
                "chain: regularizer coefficients must be ≥ 0",
            ));
        }
        Ok(())
    }

    pub fn is_recorded(&self, t: usize) -> bool {
        t == 0 || t == self.horizon || t.is_multiple_of(self.record_stride)
    }

    pub fn recorded_times(&self) -> Vec<usize> {
        (0..=self.horizon)
            .filter(|&t| self.is_recorded(t))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub chain_id: usize,
    pub t: usize,
    pub x: Vec<f64>,
    pub target: usize,
    /// Index of the reconstruction anchor in the ID training set.
    pub anchor: Option<usize>,
}

/// All recorded chain states, grouped by chain and ordered by time.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
    pub config: ChainConfig,
    pub chains: usize,
    pub classes: usize,
    pub network_fingerprint: String,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.x.len())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records as an `[n, d]` matrix.
    pub fn features(&self) -> Result<Tensor> {
        let d = self.dim();
        let mut v = Vec::with_capacity(self.len() * d);
        for r in &self.records {
            v.extend_from_slice(&r.x);
        }
        Tensor::matrix(self.len(), d, v)
    }

    /// Records at a given time.
    pub fn at_time(&self, t: usize) -> impl Iterator<Item = &TrajectoryRecord> {
        self.records.iter().filter(move |r| r.t == t)
    }
}

/// Standard-normal start state, deterministic per `(seed, chain_id)`.
pub fn init_chain(seed: u64, chain_id: usize, dim: usize) -> Vec<f64> {
    let mut rng = chain_rng(seed, chain_id);
    draw_normal(&mut rng, dim)
}

fn chain_rng(seed: u64, chain_id: usize) -> ChaCha8Rng {
    data::rng(seed ^ chain_id as u64)
}

fn draw_normal(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// `[d, d−1]` matrix whose product with a row vector gives adjacent
/// differences `x_{j+1} − x_j`.
fn difference_matrix(dim: usize) -> Tensor {
    let mut m = Tensor::zeros(vec![dim, dim - 1]);
    let v = m.values_mut();
    for j in 0..dim - 1 {
        v[j * (dim - 1) + j] = -1.0;
        v[(j + 1) * (dim - 1) + j] = 1.0;
    }
    m
}

/// Records `R(x)` on `g`. `pre` are the hidden pre-activations of `x`.
fn record_regularizer(
    g: &mut Graph,
    x: Var,
    pre: &[Var],
    regularizer: &Regularizer,
    stats: Option<&ActivationStats>,
    anchor: Option<&[f64]>,
) -> Result<Option<Var>> {
    let dim = g.value(x)?.cols();
    match *regularizer {
        Regularizer::None => Ok(None),
        Regularizer::Reconstruction { beta_mse } => {
            let anchor = anchor
                .ok_or_else(|| Error::invalid("reconstruction regularizer needs an anchor"))?;
            if anchor.len() != dim {
                return Err(Error::Shape(format!(
                    "anchor of width {} for samples of width {dim}",
                    anchor.len()
                )));
            }
            let a = g.constant(Tensor::matrix(1, dim, anchor.to_vec())?);
            let diff = g.sub(x, a)?;
            let sq = g.square(diff)?;
            let mse = g.mean(sq)?;
            Ok(Some(g.scale(mse, beta_mse)?))
        }
        Regularizer::DataFree {
            beta_tv,
            beta_l2,
            beta_f,
        } => {
            let mut terms = Vec::new();
            if dim > 1 {
                let d = g.constant(difference_matrix(dim));
                let diffs = g.matmul(x, d)?;
                let sq = g.square(diffs)?;
                let tv = g.sum(sq)?;
                terms.push(g.scale(tv, beta_tv)?);
            }
            let sq = g.square(x)?;
            let l2 = g.sum(sq)?;
            terms.push(g.scale(l2, beta_l2)?);
            if beta_f > 0.0 {
                let stats = stats.ok_or_else(|| {
                    Error::invalid("feature regularizer needs activation statistics")
                })?;
                if stats.layers.len() != pre.len() {
                    return Err(Error::Shape(format!(
                        "{} stat layers for {} hidden layers",
                        stats.layers.len(),
                        pre.len()
                    )));
                }
                for (z, ls) in pre.iter().zip(&stats.layers) {
                    let rows = g.value(*z)?.rows();
                    let mu = g.constant(Tensor::vector(ls.mean.clone())?);
                    let var = g.constant(Tensor::vector(ls.var.clone())?);
                    // Single-sample moments: the deviation from the running mean
                    // and its square, which estimates the per-unit variance.
                    let dev = g.sub(*z, mu)?;
                    let dev_sq = g.square(dev)?;
                    let mean_term = g.sum(dev_sq)?;
                    let var_gap = g.sub(dev_sq, var)?;
                    let var_gap_sq = g.square(var_gap)?;
                    let var_term = g.sum(var_gap_sq)?;
                    let both = g.add(mean_term, var_term)?;
                    let both = g.scale(both, beta_f / rows as f64)?;
                    terms.push(both);
                }
            }
            let mut total = terms[0];
            for t in &terms[1..] {
                total = g.add(total, *t)?;
            }
            Ok(Some(total))
        }
    }
}

/// Data-free regularizer value `R⁻(x)` for a single sample.
pub fn reg_data_free(
    x: &[f64],
    net: &Mlp,
    stats: Option<&ActivationStats>,
    beta_tv: f64,
    beta_l2: f64,
    beta_f: f64,
) -> Result<f64> {
    if x.len() != net.input_dim() {
        return Err(Error::Shape(format!(
            "sample of width {} for network width {}",
            x.len(),
            net.input_dim()
        )));
    }
    let mut g = Graph::new();
    let vars = net.register(&mut g, false);
    let xv = g.constant(Tensor::matrix(1, x.len(), x.to_vec())?);
    let fw = network::forward_graph(&mut g, &vars, xv)?;
    let reg = Regularizer::DataFree {
        beta_tv,
        beta_l2,
        beta_f,
    };
    let r =
        record_regularizer(&mut g, xv, &fw.pre_activations, &reg, stats, None)?.expect("data-free");
    Ok(g.value(r)?.item())
}

/// Reconstruction regularizer value `R⁺(x) = β·mean_j (x_j − anchor_j)²`.
pub fn reg_reconstruction(x: &[f64], anchor: &[f64], beta_mse: f64) -> Result<f64> {
    if x.len() != anchor.len() || x.is_empty() {
        return Err(Error::Shape(format!(
            "sample width {} vs anchor width {}",
            x.len(),
            anchor.len()
        )));
    }
    let mse = x
        .iter()
        .zip(anchor)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    Ok(beta_mse * mse)
}

/// Gradient of `G(x) = −log P(y|x) + R(x)` with respect to `x`.
pub fn objective_gradient(
    x: &[f64],
    target: usize,
    net: &Mlp,
    regularizer: &Regularizer,
    stats: Option<&ActivationStats>,
    anchor: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if target >= net.classes() {
        return Err(Error::invalid(format!(
            "target {target} ≥ classes {}",
            net.classes()
        )));
    }
    if x.len() != net.input_dim() {
        return Err(Error::Shape(format!(
            "sample of width {} for network width {}",
            x.len(),
            net.input_dim()
        )));
    }
    let mut g = Graph::new();
    let vars = net.register(&mut g, false);
    let xv = g.leaf(Tensor::matrix(1, x.len(), x.to_vec())?.requires_grad());
    let fw = network::forward_graph(&mut g, &vars, xv)?;
    let ls = g.log_softmax(fw.logits)?;
    let oh = g.constant(network::one_hot(&[target], net.classes()));
    let picked = g.mul(ls, oh)?;
    let log_p = g.sum(picked)?;
    let mut objective = g.neg(log_p)?;
    if let Some(r) =
        record_regularizer(&mut g, xv, &fw.pre_activations, regularizer, stats, anchor)?
    {
        objective = g.add(objective, r)?;
    }
    Ok(g.gradients(objective, &[xv])?.remove(0))
}

/// One transition `x_t = x_{t−1} − ρ·∇G(x_{t−1}) + η·z`.
#[allow(clippy::too_many_arguments)]
pub fn chain_step(
    x: &[f64],
    target: usize,
    net: &Mlp,
    cfg: &ChainConfig,
    stats: Option<&ActivationStats>,
    anchor: Option<&[f64]>,
    noise: &[f64],
    t: usize,
) -> Result<Vec<f64>> {
    let grad = objective_gradient(x, target, net, &cfg.regularizer, stats, anchor).map_err(
        |e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("chain step t={t}: {msg}")),
            other => other,
        },
    )?;
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "non-finite gradient at chain step t={t}"
        )));
    }
    let next: Vec<f64> = x
        .iter()
        .zip(&grad)
        .zip(noise)
        .map(|((xv, gv), zv)| xv - cfg.rho * gv + cfg.eta * zv)
        .collect();
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("chain diverged at t={t}")));
    }
    Ok(next)
}

fn run_chain(
    chain_id: usize,
    net: &Mlp,
    stats: Option<&ActivationStats>,
    cfg: &ChainConfig,
    id_data: Option<&Dataset>,
) -> Result<Vec<TrajectoryRecord>> {
    let dim = net.input_dim();
    let mut rng = chain_rng(cfg.seed, chain_id);
    let mut x = draw_normal(&mut rng, dim);
    let (target, anchor) = match cfg.regularizer {
        Regularizer::Reconstruction { .. } => {
            let ds = id_data.ok_or_else(|| Error::invalid("reconstruction chains need ID data"))?;
            let labels = ds.labels()?;
            let i = rng.random_range(0..ds.len());
            (labels[i], Some(i))
        }
        _ => (rng.random_range(0..net.classes()), None),
    };
    let anchor_x = anchor.map(|i| id_data.unwrap().features.row(i));
    let mut out = Vec::with_capacity(cfg.horizon / cfg.record_stride + 2);
    out.push(TrajectoryRecord {
        chain_id,
        t: 0,
        x: x.clone(),
        target,
        anchor,
    });
    for t in 1..=cfg.horizon {
        let z = draw_normal(&mut rng, dim);
        x = chain_step(&x, target, net, cfg, stats, anchor_x, &z, t)
            .map_err(|e| annotate(e, chain_id))?;
        if cfg.is_recorded(t) {
            out.push(TrajectoryRecord {
                chain_id,
                t,
                x: x.clone(),
                target,
                anchor,
            });
        }
    }
    Ok(out)
}

fn annotate(e: Error, chain_id: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("chain {chain_id}: {m}")),
        other => other,
    }
}

/// Runs `chains` independent chains and merges them in chain order.
pub fn synthesize(
    net: &Mlp,
    stats: Option<&ActivationStats>,
    chains: usize,
    cfg: &ChainConfig,
    id_data: Option<&Dataset>,
) -> Result<Trajectory> {
    synthesize_with(net, stats, chains, cfg, id_data, Execution::default())
}

pub fn synthesize_with(
    net: &Mlp,
    stats: Option<&ActivationStats>,
    chains: usize,
    cfg: &ChainConfig,
    id_data: Option<&Dataset>,
    exec: Execution,
) -> Result<Trajectory> {
    cfg.validate()?;
    if chains == 0 {
        return Err(Error::invalid("need at least one chain"));
    }
    if let Regularizer::Reconstruction { .. } = cfg.regularizer {
        match id_data {
            Some(ds) if !ds.is_empty() => {
                if ds.dim() != net.input_dim() {
                    return Err(Error::Shape(format!(
                        "ID data of width {} for network width {}",
                        ds.dim(),
                        net.input_dim()
                    )));
                }
                ds.labels()?;
            }
            _ => {
                return Err(Error::invalid(
                    "reconstruction regularizer needs a non-empty ID dataset",
                ))
            }
        }
    }
    if let (Regularizer::DataFree { beta_f, .. }, None) = (cfg.regularizer, stats) {
        if beta_f > 0.0 {
            return Err(Error::invalid(
                "feature regularizer needs activation statistics",
            ));
        }
    }
    let per_chain = par::map_range(exec, chains, |i| run_chain(i, net, stats, cfg, id_data));
    let mut records = Vec::with_capacity(chains * (cfg.horizon + 1));
    for r in per_chain {
        records.extend(r?);
    }
    Ok(Trajectory {
        records,
        config: cfg.clone(),
        chains,
        classes: net.classes(),
        network_fingerprint: net.fingerprint(),
    })
}

/// Mean `max_y P(y|x)` over chains at every recorded time.
pub fn confidence_curve(traj: &Trajectory, net: &Mlp) -> Result<Vec<(usize, f64)>> {
    if traj.is_empty() {
        return Err(Error::invalid("empty trajectory"));
    }
    let conf = net.confidence(&traj.features()?)?;
    let times = traj.config.recorded_times();
    let mut sums = vec![(0.0, 0usize); traj.config.horizon + 1];
    for (r, c) in traj.records.iter().zip(conf) {
        sums[r.t].0 += c;
        sums[r.t].1 += 1;
    }
    Ok(times
        .into_iter()
        .filter(|&t| sums[t].1 > 0)
        .map(|t| (t, sums[t].0 / sums[t].1 as f64))
        .collect())
}

// ---------------------------------------------------------------------------
// Trajectory file:
//
//   #ca-trajectory v1
//   key=value header lines (chain config, network fingerprint, amendment)
//   ---
//   chain_id,t,y,anchor,x...[,q...]

const TRAJECTORY_MAGIC: &str = "#ca-trajectory v1";

/// Amended targets stored alongside a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredAmendment {
    pub a: f64,
    pub targets: Vec<AmendedTarget>,
}

pub fn trajectory_to_string(
    traj: &Trajectory,
    amended: Option<&StoredAmendment>,
) -> Result<String> {
    let c = &traj.config;
    let mut s = format!("{TRAJECTORY_MAGIC}\n");
    let _ = writeln!(s, "horizon={}", c.horizon);
    let _ = writeln!(s, "rho={}", fmt_f64(c.rho));
    let _ = writeln!(s, "eta={}", fmt_f64(c.eta));
    let _ = writeln!(s, "regularizer={}", c.regularizer.name());
    match c.regularizer {
        Regularizer::None => {}
        Regularizer::DataFree {
            beta_tv,
            beta_l2,
            beta_f,
        } => {
            let _ = writeln!(s, "beta_tv={}", fmt_f64(beta_tv));
            let _ = writeln!(s, "beta_l2={}", fmt_f64(beta_l2));
            let _ = writeln!(s, "beta_f={}", fmt_f64(beta_f));
        }
        Regularizer::Reconstruction { beta_mse } => {
            let _ = writeln!(s, "beta_mse={}", fmt_f64(beta_mse));
        }
    }
    let _ = writeln!(s, "seed={}", c.seed);
    let _ = writeln!(s, "record_stride={}", c.record_stride);
    let _ = writeln!(s, "chains={}", traj.chains);
    let _ = writeln!(s, "classes={}", traj.classes);
    let _ = writeln!(s, "dim={}", traj.dim());
    let _ = writeln!(s, "records={}", traj.len());
    let _ = writeln!(s, "network={}", traj.network_fingerprint);
    if let Some(am) = amended {
        if am.targets.len() != traj.len() {
            return Err(Error::Shape(format!(
                "{} amended targets for {} records",
                am.targets.len(),
                traj.len()
            )));
        }
        let _ = writeln!(s, "amended_a={}", fmt_f64(am.a));
        let _ = writeln!(s, "amended_columns={}", traj.classes);
    } else {
        let _ = writeln!(s, "amended_columns=0");
    }
    s.push_str("---\n");
    for (i, r) in traj.records.iter().enumerate() {
        let anchor = r.anchor.map_or("-1".to_string(), |a| a.to_string());
        let _ = write!(
            s,
            "{},{},{},{},{}",
            r.chain_id,
            r.t,
            r.target,
            anchor,
            join_f64(&r.x, ",")
        );
        if let Some(am) = amended {
            let q = &am.targets[i];
            if q.chain_id != r.chain_id || q.t != r.t {
                return Err(Error::invalid(format!(
                    "amended target {i} is not aligned with its record"
                )));
            }
            let _ = write!(s, ",{}", join_f64(&q.q, ","));
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn save_trajectory(
    traj: &Trajectory,
    amended: Option<&StoredAmendment>,
    path: &Path,
) -> Result<()> {
    textio::write(path, &trajectory_to_string(traj, amended)?)
}

pub fn load_trajectory(path: &Path) -> Result<(Trajectory, Option<StoredAmendment>)> {
    parse_trajectory(&textio::read(path)?, &path.display().to_string())
}

pub fn parse_trajectory(text: &str, path: &str) -> Result<(Trajectory, Option<StoredAmendment>)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim() == TRAJECTORY_MAGIC => {}
        _ => {
            return Err(Error::parse(
                path,
                1,
                format!("expected {TRAJECTORY_MAGIC:?}"),
            ))
        }
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
        return Err(Error::parse(
            path,
            1,
            "missing \"---\" separator after header",
        ));
    }
    let regularizer = match kv.get("regularizer")? {
        (_, "none") => Regularizer::None,
        (_, "data_free") => Regularizer::DataFree {
            beta_tv: kv.f64("beta_tv")?,
            beta_l2: kv.f64("beta_l2")?,
            beta_f: kv.f64("beta_f")?,
        },
        (_, "reconstruction") => Regularizer::Reconstruction {
            beta_mse: kv.f64("beta_mse")?,
        },
        (l, other) => {
            return Err(Error::parse(
                path,
                l,
                format!("unknown regularizer {other:?}"),
            ))
        }
    };
    let config = ChainConfig {
        horizon: kv.num("horizon")?,
        rho: kv.f64("rho")?,
        eta: kv.f64("eta")?,
        regularizer,
        seed: kv.num("seed")?,
        record_stride: kv.num("record_stride")?,
    };
    config
        .validate()
        .map_err(|e| Error::parse(path, 2, e.to_string()))?;
    let chains: usize = kv.num("chains")?;
    let classes: usize = kv.num("classes")?;
    let dim: usize = kv.num("dim")?;
    let n: usize = kv.num("records")?;
    let q_cols: usize = kv.num("amended_columns")?;
    if q_cols != 0 && q_cols != classes {
        return Err(Error::parse(
            path,
            kv.get("amended_columns")?.0,
            "amended_columns must be 0 or K",
        ));
    }
    let mut records = Vec::with_capacity(n);
    let mut targets = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 4 + dim + q_cols {
            return Err(Error::parse(
                path,
                ln,
                format!("expected {} columns, got {}", 4 + dim + q_cols, cells.len()),
            ));
        }
        let chain_id: usize = textio::parse_num(cells[0], path, ln)?;
        let t: usize = textio::parse_num(cells[1], path, ln)?;
        let target: usize = textio::parse_num(cells[2], path, ln)?;
        let anchor: i64 = textio::parse_num(cells[3], path, ln)?;
        if chain_id >= chains || t > config.horizon || target >= classes {
            return Err(Error::parse(
                path,
                ln,
                "chain id, time or label out of range",
            ));
        }
        let x = cells[4..4 + dim]
            .iter()
            .map(|c| textio::parse_f64(c, path, ln))
            .collect::<Result<Vec<_>>>()?;
        if q_cols > 0 {
            let q = cells[4 + dim..]
                .iter()
                .map(|c| textio::parse_f64(c, path, ln))
                .collect::<Result<Vec<_>>>()?;
            targets.push(AmendedTarget { chain_id, t, q });
        }
        records.push(TrajectoryRecord {
            chain_id,
            t,
            x,
            target,
            anchor: (anchor >= 0).then_some(anchor as usize),
        });
    }
    if records.len() != n {
        return Err(Error::parse(
            path,
            1,
            format!("header says {n} records, found {}", records.len()),
        ));
    }
    let amended = if q_cols > 0 {
        Some(StoredAmendment {
            a: kv.f64("amended_a")?,
            targets,
        })
    } else {
        None
    };
    Ok((
        Trajectory {
            records,
            config,
            chains,
            classes,
            network_fingerprint: kv.get("network")?.1.to_string(),
        },
        amended,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net() -> Mlp {
        Mlp::new(&[3, 8, 3], 5).unwrap()
    }

    #[test]
    fn data_free_terms() {
        let net = Mlp::new(&[2, 4, 2], 1).unwrap();
        assert_eq!(
            reg_data_free(&[0.3, -0.7], &net, None, 0.0, 0.0, 0.0).unwrap(),
            0.0
        );
        assert_eq!(
            reg_data_free(&[3.0, 4.0], &net, None, 0.0, 1.0, 0.0).unwrap(),
            25.0
        );
        assert_eq!(
            reg_data_free(&[2.0, 2.0], &net, None, 1.0, 0.0, 0.0).unwrap(),
            0.0
        );
        assert_eq!(
            reg_data_free(&[2.0, 5.0], &net, None, 1.0, 0.0, 0.0).unwrap(),
            9.0
        );
        assert!(reg_data_free(&[1.0, 1.0], &net, None, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn reconstruction_terms() {
        assert_eq!(
            reg_reconstruction(&[1.0, 2.0], &[1.0, 2.0], 3.0).unwrap(),
            0.0
        );
        assert_eq!(
            reg_reconstruction(&[1.0, 1.0], &[0.0, 0.0], 1.0).unwrap(),
            1.0
        );
        let a = reg_reconstruction(&[0.2, -1.0], &[1.0, 0.5], 1.0).unwrap();
        assert_eq!(
            reg_reconstruction(&[0.2, -1.0], &[1.0, 0.5], 2.0).unwrap(),
            2.0 * a
        );
        assert!(reg_reconstruction(&[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn init_chain_is_deterministic_per_chain() {
        assert_eq!(init_chain(3, 1, 5), init_chain(3, 1, 5));
        assert_ne!(init_chain(3, 1, 5), init_chain(3, 2, 5));
    }

    #[test]
    fn zero_step_is_identity() {
        let net = small_net();
        let cfg = ChainConfig {
            rho: 1e-300,
            eta: 0.0,
            regularizer: Regularizer::None,
            ..Default::default()
        };
        let x = vec![0.4, -0.2, 1.0];
        let next = chain_step(&x, 1, &net, &cfg, None, None, &[0.5, 0.5, 0.5], 1).unwrap();
        assert_eq!(next, x);
    }

    #[test]
    fn uniform_network_moves_only_by_regularizer() {
        let mut net = small_net();
        net.zero_output_layer();
        let reg = Regularizer::DataFree {
            beta_tv: 0.0,
            beta_l2: 1.0,
            beta_f: 0.0,
        };
        let cfg = ChainConfig {
            rho: 0.1,
            eta: 0.0,
            regularizer: reg,
            ..Default::default()
        };
        let x = vec![1.0, -2.0, 0.5];
        let next = chain_step(&x, 0, &net, &cfg, None, None, &[0.0; 3], 1).unwrap();
        for (n, v) in next.iter().zip(&x) {
            assert!((n - (v - 0.1 * 2.0 * v)).abs() < 1e-15);
        }
    }

    #[test]
    fn record_counts_follow_stride() {
        let net = small_net();
        let cfg = ChainConfig {
            horizon: 10,
            regularizer: Regularizer::None,
            ..Default::default()
        };
        let tr = synthesize(&net, None, 4, &cfg, None).unwrap();
        assert_eq!(tr.len(), 44);
        let cfg2 = ChainConfig {
            record_stride: 10,
            ..cfg.clone()
        };
        let tr2 = synthesize(&net, None, 3, &cfg2, None).unwrap();
        assert_eq!(tr2.len(), 6);
        assert!(tr2.records.iter().all(|r| r.t == 0 || r.t == 10));
        let cfg3 = ChainConfig {
            record_stride: 4,
            ..cfg
        };
        assert_eq!(cfg3.recorded_times(), vec![0, 4, 8, 10]);
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let net = small_net();
        let cfg = ChainConfig {
            horizon: 20,
            regularizer: Regularizer::None,
            seed: 9,
            ..Default::default()
        };
        let a = synthesize_with(&net, None, 5, &cfg, None, Execution::Sequential).unwrap();
        let b = synthesize_with(&net, None, 5, &cfg, None, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records[0].x, init_chain(9, 0, 3));
    }

    #[test]
    fn reconstruction_needs_data() {
        let net = small_net();
        let cfg = ChainConfig {
            horizon: 2,
            regularizer: Regularizer::reconstruction_default(),
            ..Default::default()
        };
        assert!(synthesize(&net, None, 1, &cfg, None).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            ChainConfig {
                horizon: 0,
                ..Default::default()
            },
            ChainConfig {
                rho: 0.0,
                ..Default::default()
            },
            ChainConfig {
                eta: -1.0,
                ..Default::default()
            },
            ChainConfig {
                record_stride: 1001,
                ..Default::default()
            },
            ChainConfig {
                regularizer: Regularizer::Reconstruction { beta_mse: -1.0 },
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
