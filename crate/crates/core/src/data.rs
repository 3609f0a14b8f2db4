//! Synthetic ID/OOD benchmarks, standardization, and the dataset CSV format.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::textio::{self, fmt_f64};

/// Mixes a base seed with a stream tag (splitmix64 finalizer) so that
/// independent stages draw from decorrelated generators.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `n × d`.
    pub features: Tensor,
    /// Present for labeled sets; values in `[0, classes)`.
    pub labels: Option<Vec<usize>>,
    pub classes: usize,
    pub seed: u64,
    /// Generator description, e.g. `blobs(classes=4;separation=6)`.
    pub generator: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("dataset {} is unlabeled", self.name)))
    }

    pub fn validate(&self) -> Result<()> {
        if !self.features.is_finite() {
            return Err(Error::NonFinite(format!(
                "dataset {} has non-finite features",
                self.name
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.len() {
                return Err(Error::Shape(format!(
                    "{} labels for {} rows",
                    labels.len(),
                    self.len()
                )));
            }
            if let Some(bad) = labels.iter().find(|&&y| y >= self.classes) {
                return Err(Error::invalid(format!(
                    "label {bad} out of range for {} classes",
                    self.classes
                )));
            }
        }
        Ok(())
    }
}

/// Cluster centers with pairwise distance `separation`: a regular simplex
/// when `d ≥ K`, otherwise a regular polygon in the first two coordinates.
pub fn blob_centers(classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    if classes <= dim {
        let scale = separation / std::f64::consts::SQRT_2;
        let offset = scale / classes as f64;
        (0..classes)
            .map(|k| {
                let mut c = vec![0.0; dim];
                for (j, v) in c.iter_mut().enumerate().take(classes) {
                    *v = if j == k { scale - offset } else { -offset };
                }
                c
            })
            .collect()
    } else {
        let r = separation / (2.0 * (std::f64::consts::PI / classes as f64).sin());
        (0..classes)
            .map(|k| {
                let th = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
                let mut c = vec![0.0; dim];
                c[0] = r * th.cos();
                c[1] = r * th.sin();
                c
            })
            .collect()
    }
}

/// Unit direction orthogonal to the blob centers' span when one exists.
fn shift_direction(classes: usize, dim: usize) -> Vec<f64> {
    let mut u = vec![0.0; dim];
    if dim > classes || (classes > dim && dim > 2) {
        u[dim - 1] = 1.0;
    } else {
        u.iter_mut().for_each(|v| *v = 1.0 / (dim as f64).sqrt());
    }
    u
}

fn check_blob_args(classes: usize, n: usize, dim: usize, separation: f64) -> Result<()> {
    if classes < 2 || n < classes || dim < 2 || separation.is_nan() || separation <= 0.0 {
        return Err(Error::invalid(format!(
            "blobs need K ≥ 2, n ≥ K, d ≥ 2, separation > 0 (got K={classes}, n={n}, d={dim}, separation={separation})"
        )));
    }
    Ok(())
}

fn sample_blobs(centers: &[Vec<f64>], n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = rng(seed);
    let (k, d) = (centers.len(), centers[0].len());
    let mut values = Vec::with_capacity(n * d);
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    for &y in &labels {
        for &c in &centers[y] {
            let z: f64 = rng.sample(StandardNormal);
            values.push(c + z);
        }
    }
    (Tensor::matrix(n, d, values).expect("sized"), labels)
}

/// `K` unit-covariance Gaussian clusters with balanced labels (`i mod K`).
pub fn gen_gaussian_blobs(
    classes: usize,
    n: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    check_blob_args(classes, n, dim, separation)?;
    let centers = blob_centers(classes, dim, separation);
    let (features, labels) = sample_blobs(&centers, n, seed);
    Ok(Dataset {
        name: "blobs".into(),
        features,
        labels: Some(labels),
        classes,
        seed,
        generator: format!(
            "blobs(classes={classes};dim={dim};separation={})",
            fmt_f64(separation)
        ),
    })
}

/// Unlabeled blobs whose centers are moved by `shift` along a direction
/// orthogonal to the ID centers: close to the ID clusters but not on them.
pub fn gen_shifted_blobs(
    classes: usize,
    n: usize,
    dim: usize,
    separation: f64,
    shift: f64,
    seed: u64,
) -> Result<Dataset> {
    check_blob_args(classes, n, dim, separation)?;
    let u = shift_direction(classes, dim);
    let centers: Vec<Vec<f64>> = blob_centers(classes, dim, separation)
        .into_iter()
        .map(|c| c.iter().zip(&u).map(|(c, u)| c + shift * u).collect())
        .collect();
    let (features, _) = sample_blobs(&centers, n, seed);
    Ok(Dataset {
        name: "shifted_blobs".into(),
        features,
        labels: None,
        classes,
        seed,
        generator: format!(
            "shifted_blobs(classes={classes};dim={dim};separation={};shift={})",
            fmt_f64(separation),
            fmt_f64(shift)
        ),
    })
}

/// Two interleaved half circles: outer centered at the origin, inner at
/// `(1, 0.5)`, both of radius 1, jittered by `N(0, noise²)`.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 || noise.is_nan() || noise < 0.0 {
        return Err(Error::invalid(format!(
            "two moons need n ≥ 2, noise ≥ 0 (got {n}, {noise})"
        )));
    }
    let mut rng = rng(seed);
    let n_outer = n.div_ceil(2);
    let n_inner = n - n_outer;
    let angle = |i: usize, m: usize| {
        if m <= 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (m - 1) as f64
        }
    };
    let mut values = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n_outer {
        let th = angle(i, n_outer);
        values.extend([th.cos(), th.sin()]);
        labels.push(0);
    }
    for i in 0..n_inner {
        let th = angle(i, n_inner);
        values.extend([1.0 - th.cos(), 0.5 - th.sin()]);
        labels.push(1);
    }
    if noise > 0.0 {
        for v in &mut values {
            let z: f64 = rng.sample(StandardNormal);
            *v += noise * z;
        }
    }
    Ok(Dataset {
        name: "two_moons".into(),
        features: Tensor::matrix(n, 2, values)?,
        labels: Some(labels),
        classes: 2,
        seed,
        generator: format!("two_moons(noise={})", fmt_f64(noise)),
    })
}

/// Unlabeled uniform samples on `[-range, range]^d`.
pub fn gen_uniform_far(n: usize, dim: usize, range: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || dim == 0 || range.is_nan() || range <= 0.0 {
        return Err(Error::invalid(format!(
            "uniform box needs n, d ≥ 1 and range > 0 (got {range})"
        )));
    }
    let mut rng = rng(seed);
    let values = (0..n * dim)
        .map(|_| rng.random_range(-range..=range))
        .collect();
    Ok(Dataset {
        name: "uniform_far".into(),
        features: Tensor::matrix(n, dim, values)?,
        labels: None,
        classes: 0,
        seed,
        generator: format!("uniform(range={})", fmt_f64(range)),
    })
}

/// Features plus ground-truth OOD flags: the ID block first, then the OOD block.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub features: Tensor,
    pub is_ood: Vec<bool>,
}

impl Mixture {
    pub fn n_ood(&self) -> usize {
        self.is_ood.iter().filter(|&&b| b).count()
    }

    pub fn n_id(&self) -> usize {
        self.is_ood.len() - self.n_ood()
    }

    /// Digest of the features and flags.
    pub fn fingerprint(&self) -> String {
        let mut v = self.features.values().to_vec();
        v.extend(self.is_ood.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        textio::digest_f64(&v)
    }
}

pub fn assemble_mixture(id_test: &Dataset, ood: &Dataset) -> Result<Mixture> {
    if id_test.dim() != ood.dim() {
        return Err(Error::Shape(format!(
            "mixture of width {} (ID) and {} (OOD)",
            id_test.dim(),
            ood.dim()
        )));
    }
    if id_test.is_empty() || ood.is_empty() {
        return Err(Error::invalid(
            "a mixture needs at least one ID and one OOD sample",
        ));
    }
    let mut values = id_test.features.values().to_vec();
    values.extend_from_slice(ood.features.values());
    let mut is_ood = vec![false; id_test.len()];
    is_ood.resize(id_test.len() + ood.len(), true);
    Ok(Mixture {
        features: Tensor::matrix(is_ood.len(), id_test.dim(), values)?,
        is_ood,
    })
}

/// Per-coordinate affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor) -> Self {
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.mean.len() {
            return Err(Error::Shape(format!(
                "standardizer of width {} applied to width {}",
                self.mean.len(),
                x.cols()
            )));
        }
        let d = self.mean.len();
        let values = x
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect();
        Tensor::new(x.shape().to_vec(), values)
    }

    pub fn apply_dataset(&self, ds: &Dataset) -> Result<Dataset> {
        Ok(Dataset {
            features: self.apply(&ds.features)?,
            ..ds.clone()
        })
    }
}

/// Sizes and geometry of the desk-scale near/far benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub near_size: usize,
    pub far_size: usize,
    pub far_range: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            dim: 8,
            separation: 6.0,
            train_size: 800,
            test_size: 400,
            near_size: 400,
            far_size: 400,
            far_range: 10.0,
        }
    }
}

/// Raw (unstandardized) benchmark splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub id_train: Dataset,
    pub id_test: Dataset,
    pub near_ood: Dataset,
    pub far_ood: Dataset,
}

impl BenchmarkSpec {
    /// Every split uses its own derived seed, so train and test are
    /// independent draws.
    pub fn generate(&self, seed: u64) -> Result<Benchmark> {
        let s = |tag| derive_seed(seed, tag);
        let mut id_train = gen_gaussian_blobs(
            self.classes,
            self.train_size,
            self.dim,
            self.separation,
            s(1),
        )?;
        id_train.name = "id_train".into();
        let mut id_test = gen_gaussian_blobs(
            self.classes,
            self.test_size,
            self.dim,
            self.separation,
            s(2),
        )?;
        id_test.name = "id_test".into();
        let mut near_ood = gen_shifted_blobs(
            self.classes,
            self.near_size,
            self.dim,
            self.separation,
            self.separation / 2.0,
            s(3),
        )?;
        near_ood.name = "near_ood".into();
        let mut far_ood = gen_uniform_far(self.far_size, self.dim, self.far_range, s(4))?;
        far_ood.name = "far_ood".into();
        Ok(Benchmark {
            id_train,
            id_test,
            near_ood,
            far_ood,
        })
    }
}

impl Benchmark {
    /// Standardizes every split with statistics of the ID training split.
    pub fn standardized(&self) -> Result<(Benchmark, Standardizer)> {
        let st = Standardizer::fit(&self.id_train.features);
        Ok((
            Benchmark {
                id_train: st.apply_dataset(&self.id_train)?,
                id_test: st.apply_dataset(&self.id_test)?,
                near_ood: st.apply_dataset(&self.near_ood)?,
                far_ood: st.apply_dataset(&self.far_ood)?,
            },
            st,
        ))
    }
}

// ---------------------------------------------------------------------------
// Persistence.
//
//   #dataset name=<name> n=<n> d=<d> classes=<K> seed=<seed> generator=<config>
//   <label>,<x0>,<x1>,...        (label -1 for unlabeled rows)

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    textio::write(path, &dataset_to_string(ds))
}

pub fn dataset_to_string(ds: &Dataset) -> String {
    let mut s = format!(
        "#dataset name={} n={} d={} classes={} seed={} generator={}\n",
        ds.name,
        ds.len(),
        ds.dim(),
        ds.classes,
        ds.seed,
        ds.generator
    );
    for i in 0..ds.len() {
        match &ds.labels {
            Some(l) => s.push_str(&l[i].to_string()),
            None => s.push_str("-1"),
        }
        for v in ds.features.row(i) {
            s.push(',');
            s.push_str(&fmt_f64(*v));
        }
        s.push('\n');
    }
    s
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    parse_dataset(&textio::read(path)?, &path.display().to_string())
}

pub fn parse_dataset(text: &str, path: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty file, expected #dataset header"))?;
    let rest = header
        .strip_prefix("#dataset ")
        .ok_or_else(|| Error::parse(path, 1, "header must start with \"#dataset \""))?;
    let mut kv = textio::KvBlock::new(path);
    for tok in rest.split_whitespace() {
        kv.push(1, tok)?;
    }
    let n: usize = kv.num("n")?;
    let d: usize = kv.num("d")?;
    let classes: usize = kv.num("classes")?;
    let seed: u64 = kv.num("seed")?;
    let name = kv.get("name")?.1.to_string();
    let generator = kv.get("generator")?.1.to_string();
    if d == 0 {
        return Err(Error::parse(path, 1, "d must be positive"));
    }

    let mut values = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut unlabeled = 0usize;
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut cells = line.split(',');
        let label: i64 = textio::parse_num(cells.next().unwrap_or(""), path, ln)?;
        let row = cells
            .map(|c| textio::parse_f64(c, path, ln))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != d {
            return Err(Error::parse(
                path,
                ln,
                format!("expected {d} features, got {}", row.len()),
            ));
        }
        if label < 0 {
            unlabeled += 1;
        } else if label as usize >= classes {
            return Err(Error::parse(
                path,
                ln,
                format!("label {label} ≥ classes {classes}"),
            ));
        }
        labels.push(label);
        values.extend(row);
    }
    if labels.len() != n {
        return Err(Error::parse(
            path,
            1,
            format!("header says n={n}, found {} rows", labels.len()),
        ));
    }
    if n == 0 {
        return Err(Error::parse(path, 1, "dataset has no rows"));
    }
    let labels = match unlabeled {
        0 => Some(labels.into_iter().map(|l| l as usize).collect()),
        u if u == n => None,
        _ => return Err(Error::parse(path, 1, "mixed labeled and unlabeled rows")),
    };
    Ok(Dataset {
        name,
        features: Tensor::matrix(n, d, values)?,
        labels,
        classes,
        seed,
        generator,
    })
}

/// Imports an arbitrary headered CSV whose first column is an integer label
/// (`-1` or empty for unlabeled) and whose remaining columns are features.
/// `classes` is inferred as `max label + 1`.
pub fn import_csv(path: &Path, name: &str) -> Result<Dataset> {
    let text = textio::read(path)?;
    let p = path.display().to_string();
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(&p, 1, "empty file"))?;
    let d = header.split(',').count().saturating_sub(1);
    if d == 0 {
        return Err(Error::parse(
            &p,
            1,
            "header needs a label column and at least one feature",
        ));
    }
    let mut values = Vec::new();
    let mut labels: Vec<Option<usize>> = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut cells = line.split(',');
        let lab = cells.next().unwrap_or("").trim();
        let label = if lab.is_empty() || lab == "-1" {
            None
        } else {
            Some(textio::parse_num::<usize>(lab, &p, ln)?)
        };
        let row = cells
            .map(|c| textio::parse_f64(c, &p, ln))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != d {
            return Err(Error::parse(
                &p,
                ln,
                format!("expected {d} features, got {}", row.len()),
            ));
        }
        labels.push(label);
        values.extend(row);
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::parse(&p, 1, "no data rows"));
    }
    let labels: Option<Vec<usize>> = labels.into_iter().collect();
    let classes = labels
        .as_ref()
        .map_or(0, |l| l.iter().max().map_or(0, |m| m + 1));
    Ok(Dataset {
        name: name.to_string(),
        features: Tensor::matrix(n, d, values)?,
        labels,
        classes,
        seed: 0,
        generator: format!(
            "import({})",
            path.file_name().map_or("?".into(), |f| f.to_string_lossy())
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simplex_centers_are_equidistant() {
        for (k, d) in [(2, 2), (4, 8), (4, 4), (5, 3), (6, 2)] {
            let c = blob_centers(k, d, 6.0);
            for i in 0..k {
                let j = (i + 1) % k;
                let dist: f64 = c[i]
                    .iter()
                    .zip(&c[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!((dist - 6.0).abs() < 1e-9, "K={k} d={d}: {dist}");
            }
        }
    }

    #[test]
    fn blobs_are_balanced_and_reproducible() {
        let a = gen_gaussian_blobs(3, 10, 4, 5.0, 9).unwrap();
        let b = gen_gaussian_blobs(3, 10, 4, 5.0, 9).unwrap();
        assert_eq!(a, b);
        let labels = a.labels().unwrap();
        let counts: Vec<usize> = (0..3)
            .map(|k| labels.iter().filter(|&&y| y == k).count())
            .collect();
        assert_eq!(counts, vec![4, 3, 3]);
    }

    #[test]
    fn blob_sample_means_near_centers() {
        let (k, n, d) = (4, 4000, 8);
        let ds = gen_gaussian_blobs(k, n, d, 6.0, 3).unwrap();
        let centers = blob_centers(k, d, 6.0);
        let labels = ds.labels().unwrap();
        let tol = 4.0 / ((n / k) as f64).sqrt();
        for (c, center) in centers.iter().enumerate() {
            let mut mean = vec![0.0; d];
            let mut m = 0;
            for i in (0..n).filter(|&i| labels[i] == c) {
                mean.iter_mut()
                    .zip(ds.features.row(i))
                    .for_each(|(a, v)| *a += v);
                m += 1;
            }
            for (a, cv) in mean.iter().zip(center) {
                assert!((a / m as f64 - cv).abs() < tol);
            }
        }
    }

    #[test]
    fn blob_argument_errors() {
        assert!(gen_gaussian_blobs(1, 10, 2, 1.0, 0).is_err());
        assert!(gen_gaussian_blobs(2, 1, 2, 1.0, 0).is_err());
        assert!(gen_gaussian_blobs(2, 10, 1, 1.0, 0).is_err());
        assert!(gen_gaussian_blobs(2, 10, 2, 0.0, 0).is_err());
    }

    #[test]
    fn noiseless_moons_lie_on_unit_half_circles() {
        let ds = gen_two_moons(101, 0.0, 1).unwrap();
        let labels = ds.labels().unwrap();
        for (i, &label) in labels.iter().enumerate() {
            let r = ds.features.row(i);
            let (cx, cy) = if label == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
            let rad = ((r[0] - cx).powi(2) + (r[1] - cy).powi(2)).sqrt();
            assert!((rad - 1.0).abs() < 1e-12);
            assert!((-1.5..=2.5).contains(&r[0]) && (-1.0..=1.5).contains(&r[1]));
        }
        let ones = labels.iter().filter(|&&y| y == 1).count();
        assert!((ones as i64 - (ds.len() - ones) as i64).abs() <= 1);
    }

    #[test]
    fn uniform_box_bounds_and_mean() {
        let (n, d, range) = (5000, 3, 10.0);
        let ds = gen_uniform_far(n, d, range, 4).unwrap();
        assert!(ds.features.values().iter().all(|v| v.abs() <= range));
        for j in 0..d {
            let m: f64 = (0..n).map(|i| ds.features.row(i)[j]).sum::<f64>() / n as f64;
            assert!(m.abs() < 4.0 * range / (3.0 * n as f64).sqrt());
        }
        assert_eq!(ds, gen_uniform_far(n, d, range, 4).unwrap());
    }

    #[test]
    fn mixture_counts_and_errors() {
        let id = gen_gaussian_blobs(2, 100, 3, 4.0, 1).unwrap();
        let ood = gen_uniform_far(50, 3, 5.0, 2).unwrap();
        let m = assemble_mixture(&id, &ood).unwrap();
        assert_eq!((m.features.rows(), m.n_ood(), m.n_id()), (150, 50, 100));
        assert!(m.is_ood[..100].iter().all(|&b| !b));
        let wide = gen_uniform_far(5, 4, 5.0, 2).unwrap();
        assert!(assemble_mixture(&id, &wide).is_err());
    }

    #[test]
    fn standardized_train_split_has_unit_moments() {
        let b = BenchmarkSpec::default().generate(5).unwrap();
        let (s, _) = b.standardized().unwrap();
        let x = &s.id_train.features;
        for j in 0..x.cols() {
            let col: Vec<f64> = (0..x.rows()).map(|i| x.row(i)[j]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let v = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / col.len() as f64;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
        }
        assert_ne!(b.id_train.features, b.id_test.features);
    }

    #[test]
    fn dataset_round_trip_and_header_errors() {
        let ds = gen_gaussian_blobs(3, 30, 4, 2.5, 77).unwrap();
        let text = dataset_to_string(&ds);
        assert_eq!(parse_dataset(&text, "mem").unwrap(), ds);
        let far = gen_uniform_far(7, 2, 1.0, 1).unwrap();
        assert_eq!(parse_dataset(&dataset_to_string(&far), "mem").unwrap(), far);

        let err = parse_dataset("label,a,b\n0,1,2\n", "x.csv")
            .unwrap_err()
            .to_string();
        assert!(err.starts_with("x.csv:1:"), "{err}");
        let bad_row = text.replacen("\n0,", "\n0,zz,", 1);
        let err = parse_dataset(&bad_row, "y.csv").unwrap_err().to_string();
        assert!(err.starts_with("y.csv:2:"), "{err}");
    }
}
