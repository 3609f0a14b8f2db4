//! The standard classifier: a ReLU MLP with a softmax head, trained by
//! minibatch SGD on cross-entropy. Also hosts the checkpoint format shared
//! with the auxiliary network.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::autodiff::{self, Graph, Tensor, Var};
use crate::data::{self, Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::textio::{self, join_f64, join_usize};

/// Multi-layer perceptron. Weights are stored `[in, out]`, biases `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// Graph handles for an [`Mlp`]'s parameters.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

/// Output of a recorded forward pass.
#[derive(Debug, Clone)]
pub struct GraphForward {
    pub logits: Var,
    /// Pre-activations of every hidden layer, in order.
    pub pre_activations: Vec<Var>,
}

impl Mlp {
    /// He-normal weights, zero biases.
    pub fn new(layer_dims: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(layer_dims)?;
        let mut rng = data::rng(seed);
        for w in &mut net.weights {
            let fan_in = w.shape()[0] as f64;
            let sd = (2.0 / fan_in).sqrt();
            for v in w.values_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = sd * z;
            }
        }
        Ok(net)
    }

    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::invalid(format!("invalid layer dims {layer_dims:?}")));
        }
        if *layer_dims.last().unwrap() < 2 {
            return Err(Error::invalid("a classifier needs at least 2 classes"));
        }
        let weights = layer_dims
            .windows(2)
            .map(|w| Tensor::zeros(vec![w[0], w[1]]))
            .collect();
        let biases = layer_dims[1..]
            .iter()
            .map(|&d| Tensor::zeros(vec![d]))
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
        })
    }

    pub fn from_parts(
        layer_dims: Vec<usize>,
        weights: Vec<Tensor>,
        biases: Vec<Tensor>,
    ) -> Result<Self> {
        let net = Self::zeros(&layer_dims)?;
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.shape() != net.weights[l].shape() || b.shape() != net.biases[l].shape() {
                return Err(Error::Shape(format!(
                    "layer {l}: weight {:?}/bias {:?} do not match dims {layer_dims:?}",
                    w.shape(),
                    b.shape()
                )));
            }
        }
        if weights.len() != net.weights.len() || biases.len() != net.biases.len() {
            return Err(Error::Shape(format!(
                "parameter count does not match dims {layer_dims:?}"
            )));
        }
        Ok(Self {
            layer_dims,
            weights,
            biases,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn hidden_dims(&self) -> &[usize] {
        &self.layer_dims[1..self.layer_dims.len() - 1]
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    /// Zeroes the output layer so every prediction is uniform.
    pub fn zero_output_layer(&mut self) {
        let last = self.weights.len() - 1;
        self.weights[last]
            .values_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        self.biases[last]
            .values_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// Short hex digest of the architecture and parameter bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for d in &self.layer_dims {
            h.update((*d as u64).to_le_bytes());
        }
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for v in w.values().iter().chain(b.values()) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize()[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let d = if x.shape().len() == 1 {
            x.len()
        } else {
            x.cols()
        };
        if d != self.input_dim() {
            return Err(Error::Shape(format!(
                "input of shape {:?} for a network expecting width {}",
                x.shape(),
                self.input_dim()
            )));
        }
        Ok(x.rows())
    }

    /// Logits and hidden pre-activations without recording a graph.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let n = self.check_input(x)?;
        let mut h = x.values().to_vec();
        let mut pre = Vec::with_capacity(self.weights.len() - 1);
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (k, m) = (w.shape()[0], w.shape()[1]);
            let mut out = vec![0.0; n * m];
            autodiff::matmul_into(&h, w.values(), n, k, m, &mut out);
            for row in out.chunks_mut(m) {
                row.iter_mut().zip(b.values()).for_each(|(o, bv)| *o += bv);
            }
            if l + 1 < self.weights.len() {
                pre.push(Tensor::matrix(n, m, out.clone())?);
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = out;
        }
        let logits = Tensor::matrix(n, self.classes(), h)?;
        if !logits.is_finite() {
            return Err(Error::NonFinite(
                "network produced non-finite logits".into(),
            ));
        }
        Ok((logits, pre))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.0)
    }

    /// Row-wise `P(y|x)`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut p = self.logits(x)?;
        let k = self.classes();
        p.values_mut().chunks_mut(k).for_each(autodiff::softmax_row);
        Ok(p)
    }

    /// `max_y P(y|x)` per row.
    pub fn confidence(&self, x: &Tensor) -> Result<Vec<f64>> {
        let p = self.predict(x)?;
        Ok((0..p.rows()).map(|i| max_of(p.row(i))).collect())
    }

    pub fn argmax(&self, x: &Tensor) -> Result<Vec<usize>> {
        let p = self.logits(x)?;
        Ok((0..p.rows()).map(|i| argmax(p.row(i))).collect())
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> MlpVars {
        let mut reg = |t: &Tensor| {
            if trainable {
                g.leaf(t.clone().requires_grad())
            } else {
                g.constant(t.clone())
            }
        };
        let weights = self.weights.iter().map(&mut reg).collect();
        let biases = self.biases.iter().map(&mut reg).collect();
        MlpVars { weights, biases }
    }
}

pub fn max_of(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Records `x → logits` on `g`.
pub fn forward_graph(g: &mut Graph, vars: &MlpVars, x: Var) -> Result<GraphForward> {
    let layers = vars.weights.len();
    let mut h = x;
    let mut pre = Vec::with_capacity(layers - 1);
    for l in 0..layers {
        let z = g.matmul(h, vars.weights[l])?;
        let z = g.add(z, vars.biases[l])?;
        if l + 1 < layers {
            pre.push(z);
            h = g.relu(z)?;
        } else {
            h = z;
        }
    }
    Ok(GraphForward {
        logits: h,
        pre_activations: pre,
    })
}

/// Constant one-hot `[n, k]` matrix.
pub(crate) fn one_hot(labels: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![labels.len(), k]);
    for (i, &y) in labels.iter().enumerate() {
        t.values_mut()[i * k + y] = 1.0;
    }
    t
}

/// Heavy-ball SGD with L2 weight decay folded into the gradient.
pub(crate) struct Sgd {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub(crate) fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub(crate) fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f64>]) {
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((w, gv), vv) in p.values_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                let d = gv + self.weight_decay * *w;
                *vv = self.momentum * *vv + d;
                *w -= self.lr * *vv;
            }
        }
    }
}

/// Minibatch order for one epoch.
pub(crate) fn shuffled(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

pub(crate) fn gather_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let d = x.cols();
    let mut v = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        v.extend_from_slice(x.row(i));
    }
    Tensor::matrix(idx.len(), d, v).expect("non-empty batch")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            hidden: vec![64, 64],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::invalid(
                "train: epochs, batch_size and learning_rate must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(
                "train: momentum must be in [0,1), weight_decay ≥ 0",
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("train: hidden widths must be positive"));
        }
        Ok(())
    }
}

/// Per-hidden-layer moving averages of pre-activation mean and variance.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    pub layers: Vec<LayerStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of samples folded into the averages.
    pub count: usize,
}

/// Decay of the activation-statistics moving average.
pub const STATS_DECAY: f64 = 0.9;

impl ActivationStats {
    fn update(&mut self, pre: &[Tensor]) {
        let first = self.layers.is_empty();
        for (l, z) in pre.iter().enumerate() {
            let (n, m) = (z.rows(), z.cols());
            let mut mean = vec![0.0; m];
            for i in 0..n {
                mean.iter_mut().zip(z.row(i)).for_each(|(a, v)| *a += v);
            }
            mean.iter_mut().for_each(|a| *a /= n as f64);
            let mut var = vec![0.0; m];
            for i in 0..n {
                for ((s, v), mu) in var.iter_mut().zip(z.row(i)).zip(&mean) {
                    *s += (v - mu) * (v - mu);
                }
            }
            var.iter_mut().for_each(|s| *s /= n as f64);
            if first {
                self.layers.push(LayerStats {
                    mean,
                    var,
                    count: n,
                });
            } else {
                let ls = &mut self.layers[l];
                let blend = |old: &mut Vec<f64>, new: &[f64]| {
                    old.iter_mut()
                        .zip(new)
                        .for_each(|(o, v)| *o = STATS_DECAY * *o + (1.0 - STATS_DECAY) * v)
                };
                blend(&mut ls.mean, &mean);
                blend(&mut ls.var, &var);
                ls.count += n;
            }
        }
    }

    pub fn matches(&self, net: &Mlp) -> bool {
        self.layers.len() == net.hidden_dims().len()
            && self
                .layers
                .iter()
                .zip(net.hidden_dims())
                .all(|(l, &w)| l.mean.len() == w && l.var.len() == w)
    }
}

#[derive(Debug, Clone)]
pub struct TrainedNetwork {
    pub network: Mlp,
    pub stats: ActivationStats,
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Mean cross-entropy and its parameter gradients on one batch.
fn cross_entropy_step(
    net: &Mlp,
    x: &Tensor,
    labels: &[usize],
) -> Result<(f64, Vec<Vec<f64>>, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = net.register(&mut g, true);
    let xv = g.constant(x.clone());
    let fw = forward_graph(&mut g, &vars, xv)?;
    let ls = g.log_softmax(fw.logits)?;
    let oh = g.constant(one_hot(labels, net.classes()));
    let picked = g.mul(ls, oh)?;
    let s = g.sum(picked)?;
    let loss = g.scale(s, -1.0 / labels.len() as f64)?;
    let value = g.value(loss)?.item();
    let params: Vec<Var> = vars
        .weights
        .iter()
        .zip(&vars.biases)
        .flat_map(|(w, b)| [*w, *b])
        .collect();
    let grads = g.gradients(loss, &params)?;
    let pre = fw
        .pre_activations
        .iter()
        .map(|v| g.value(*v).cloned())
        .collect::<Result<Vec<_>>>()?;
    Ok((value, grads, pre))
}

/// Trains the standard network on labeled ID data (already standardized).
/// Activation statistics are accumulated over the final epoch.
pub fn train_standard(data: &Dataset, cfg: &TrainConfig) -> Result<TrainedNetwork> {
    cfg.validate()?;
    data.validate()?;
    let labels = data.labels()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if data.classes < 2 {
        return Err(Error::invalid("training set needs at least 2 classes"));
    }
    let mut dims = vec![data.dim()];
    dims.extend(&cfg.hidden);
    dims.push(data.classes);
    let mut net = Mlp::new(&dims, data::derive_seed(cfg.seed, 11))?;
    let mut rng = data::rng(data::derive_seed(cfg.seed, 12));
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let mut stats = ActivationStats { layers: Vec::new() };
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let order = shuffled(data.len(), &mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = gather_rows(&data.features, batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, grads, pre) = cross_entropy_step(&net, &x, &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss is {loss} at epoch {epoch}"
                )));
            }
            total += loss * batch.len() as f64;
            sgd.step(net.params_mut(), &grads);
            if epoch + 1 == cfg.epochs {
                stats.update(&pre);
            }
        }
        epoch_losses.push(total / data.len() as f64);
    }

    let pred = net.argmax(&data.features)?;
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(TrainedNetwork {
        network: net,
        stats,
        seed: cfg.seed,
        epoch_losses,
        train_accuracy: correct as f64 / data.len() as f64,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetworkKind {
    Standard,
    Auxiliary,
}

impl NetworkKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NetworkKind::Standard => "standard",
            NetworkKind::Auxiliary => "auxiliary",
        }
    }
}

/// Everything needed to reload a network: parameters, activation statistics
/// (standard networks), the training seed, and the input standardizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: NetworkKind,
    pub network: Mlp,
    pub stats: Option<ActivationStats>,
    pub seed: u64,
    pub standardizer: Option<Standardizer>,
}

const CHECKPOINT_MAGIC: &str = "#ca-checkpoint v1";

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let net = &self.network;
        let mut s = format!("{CHECKPOINT_MAGIC}\n");
        s += &format!("kind={}\n", self.kind.as_str());
        s += &format!("layer_dims={}\n", join_usize(net.layer_dims(), ","));
        s += &format!("classes={}\n", net.classes());
        s += &format!("seed={}\n", self.seed);
        s += &format!("fingerprint={}\n", net.fingerprint());
        if let Some(st) = &self.standardizer {
            s += &format!("standardizer.mean={}\n", join_f64(&st.mean, ","));
            s += &format!("standardizer.std={}\n", join_f64(&st.std, ","));
        }
        for (l, (w, b)) in net.weights.iter().zip(&net.biases).enumerate() {
            s += &format!("weight.{l}={}\n", join_f64(w.values(), ","));
            s += &format!("bias.{l}={}\n", join_f64(b.values(), ","));
        }
        if let Some(stats) = &self.stats {
            for (l, ls) in stats.layers.iter().enumerate() {
                s += &format!("stats.{l}.count={}\n", ls.count);
                s += &format!("stats.{l}.mean={}\n", join_f64(&ls.mean, ","));
                s += &format!("stats.{l}.var={}\n", join_f64(&ls.var, ","));
            }
        }
        s
    }

    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l.trim() == CHECKPOINT_MAGIC => {}
            _ => {
                return Err(Error::parse(
                    path,
                    1,
                    format!("expected {CHECKPOINT_MAGIC:?}"),
                ))
            }
        }
        let mut kv = textio::KvBlock::new(path);
        for (ln, line) in lines {
            if !line.trim().is_empty() {
                kv.push(ln, line)?;
            }
        }
        let kind = match kv.get("kind")? {
            (_, "standard") => NetworkKind::Standard,
            (_, "auxiliary") => NetworkKind::Auxiliary,
            (l, other) => return Err(Error::parse(path, l, format!("unknown kind {other:?}"))),
        };
        let (l, dims) = kv.get("layer_dims")?;
        let dims = textio::parse_usize_list(dims, path, l)?;
        let floats = |key: &str| -> Result<Vec<f64>> {
            let (l, v) = kv.get(key)?;
            textio::parse_f64_list(v, ',', path, l)
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, w) in dims.windows(2).enumerate() {
            weights.push(
                Tensor::matrix(w[0], w[1], floats(&format!("weight.{l}"))?).map_err(|e| {
                    Error::parse(
                        path,
                        kv.get(&format!("weight.{l}")).unwrap().0,
                        e.to_string(),
                    )
                })?,
            );
            biases.push(Tensor::vector(floats(&format!("bias.{l}"))?).map_err(|e| {
                Error::parse(path, kv.get(&format!("bias.{l}")).unwrap().0, e.to_string())
            })?);
        }
        let network = Mlp::from_parts(dims, weights, biases)?;
        let classes: usize = kv.num("classes")?;
        if classes != network.classes() {
            return Err(Error::parse(
                path,
                kv.get("classes")?.0,
                "classes disagrees with layer_dims",
            ));
        }
        let standardizer = match kv.find("standardizer.mean") {
            Some(_) => Some(Standardizer {
                mean: floats("standardizer.mean")?,
                std: floats("standardizer.std")?,
            }),
            None => None,
        };
        let hidden = network.hidden_dims().len();
        let stats = if kv.find("stats.0.mean").is_some() {
            let layers = (0..hidden)
                .map(|l| {
                    Ok(LayerStats {
                        mean: floats(&format!("stats.{l}.mean"))?,
                        var: floats(&format!("stats.{l}.var"))?,
                        count: kv.num(&format!("stats.{l}.count"))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let stats = ActivationStats { layers };
            if !stats.matches(&network) {
                return Err(Error::parse(
                    path,
                    1,
                    "activation statistics do not match layer widths",
                ));
            }
            Some(stats)
        } else {
            None
        };
        if let Some((l, fp)) = kv.find("fingerprint") {
            if fp != network.fingerprint() {
                return Err(Error::parse(path, l, "parameter fingerprint mismatch"));
            }
        }
        Ok(Self {
            kind,
            network,
            stats,
            seed: kv.num("seed")?,
            standardizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        textio::write(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&textio::read(path)?, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_gaussian_blobs;

    #[test]
    fn zero_output_layer_predicts_uniform() {
        let mut net = Mlp::new(&[3, 5, 4], 1).unwrap();
        net.zero_output_layer();
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 3.0, 3.0]).unwrap();
        let p = net.predict(&x).unwrap();
        assert!(p.values().iter().all(|&v| v == 0.25));
        assert_eq!(net.confidence(&x).unwrap(), vec![0.25, 0.25]);
    }

    #[test]
    fn batch_of_one_matches_row_of_batch() {
        let net = Mlp::new(&[4, 8, 3], 2).unwrap();
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..4).map(|j| (i * 4 + j) as f64 * 0.1 - 1.0).collect())
            .collect();
        let batch = net.predict(&Tensor::from_rows(&rows).unwrap()).unwrap();
        let single = net
            .predict(&Tensor::from_rows(&rows[..1]).unwrap())
            .unwrap();
        assert_eq!(single.row(0), batch.row(0));
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let net = Mlp::new(&[4, 8, 3], 2).unwrap();
        assert!(matches!(
            net.predict(&Tensor::zeros(vec![2, 5])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn graph_and_plain_forward_agree_bitwise() {
        let net = Mlp::new(&[3, 6, 6, 2], 9).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.3, -0.1, 2.0, -1.0, 0.0, 0.7]).unwrap();
        let mut g = Graph::new();
        let vars = net.register(&mut g, false);
        let xv = g.constant(x.clone());
        let fw = forward_graph(&mut g, &vars, xv).unwrap();
        assert_eq!(g.value(fw.logits).unwrap(), &net.logits(&x).unwrap());
    }

    #[test]
    fn memorizes_a_single_point() {
        let ds = Dataset {
            name: "one".into(),
            features: Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap(),
            labels: Some(vec![2]),
            classes: 3,
            seed: 0,
            generator: "manual".into(),
        };
        let cfg = TrainConfig {
            epochs: 100,
            batch_size: 1,
            hidden: vec![8],
            ..Default::default()
        };
        let t = train_standard(&ds, &cfg).unwrap();
        assert_eq!(t.network.argmax(&ds.features).unwrap(), vec![2]);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let mut ds = gen_gaussian_blobs(2, 10, 2, 4.0, 0).unwrap();
        ds.labels.as_mut().unwrap()[3] = 5;
        assert!(train_standard(&ds, &TrainConfig::default()).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let ds = gen_gaussian_blobs(3, 60, 4, 4.0, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            seed: 17,
            hidden: vec![8],
            ..Default::default()
        };
        let a = train_standard(&ds, &cfg).unwrap();
        let b = train_standard(&ds, &cfg).unwrap();
        assert_eq!(a.network, b.network);
        assert_eq!(a.stats, b.stats);
    }

    #[test]
    fn stats_means_within_observed_range() {
        let mut rng = data::rng(4);
        let mut stats = ActivationStats { layers: Vec::new() };
        let (mut lo, mut hi) = (vec![f64::INFINITY; 3], vec![f64::NEG_INFINITY; 3]);
        for b in 0..25 {
            let vals: Vec<f64> = (0..8 * 3)
                .map(|_| rng.random_range(-1.0..4.0) + b as f64 * 0.1)
                .collect();
            let z = Tensor::matrix(8, 3, vals).unwrap();
            for i in 0..8 {
                for j in 0..3 {
                    lo[j] = f64::min(lo[j], z.row(i)[j]);
                    hi[j] = f64::max(hi[j], z.row(i)[j]);
                }
            }
            stats.update(std::slice::from_ref(&z));
        }
        let ls = &stats.layers[0];
        assert_eq!(ls.count, 200);
        for j in 0..3 {
            assert!(lo[j] <= ls.mean[j] && ls.mean[j] <= hi[j]);
            assert!(ls.var[j] >= 0.0);
        }

        let ds = gen_gaussian_blobs(3, 90, 4, 4.0, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            seed: 2,
            hidden: vec![6, 5],
            ..Default::default()
        };
        let t = train_standard(&ds, &cfg).unwrap();
        assert!(t.stats.matches(&t.network));
        assert!(t.stats.layers.iter().all(|l| l.count == 90));
    }

    #[test]
    fn checkpoint_round_trips() {
        let ds = gen_gaussian_blobs(3, 30, 4, 4.0, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            seed: 5,
            hidden: vec![7],
            ..Default::default()
        };
        let t = train_standard(&ds, &cfg).unwrap();
        let ck = Checkpoint {
            kind: NetworkKind::Standard,
            network: t.network,
            stats: Some(t.stats),
            seed: 5,
            standardizer: Some(Standardizer::fit(&ds.features)),
        };
        let back = Checkpoint::parse(&ck.to_text(), "mem").unwrap();
        assert_eq!(back, ck);
        let tampered = ck.to_text().replace("bias.0=", "bias.0=1.0,");
        assert!(Checkpoint::parse(&tampered, "mem").is_err());
    }
}
