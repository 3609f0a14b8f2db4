//! End-to-end runs: train, synthesize, amend, distill, score and evaluate,
//! repeated over seeds, plus the ablations over `a` and `T`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::amendment::{amend_trajectory, AmendedTarget};
use crate::config::{ExperimentConfig, Variant};
use crate::data::{self, assemble_mixture, derive_seed, Benchmark, Mixture, Standardizer};
use crate::detect::{DetectorKind, ScoreSet};
use crate::distill::{distill, DistillConfig, Distilled};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport, REPORT_CSV_HEADER};
use crate::network::{train_standard, Checkpoint, NetworkKind, TrainedNetwork};
use crate::par::{self, Execution};
use crate::synthesis::{self, save_trajectory, StoredAmendment, Trajectory};
use crate::textio::{self, fmt_f64};

pub const MIXTURES: [&str; 2] = ["near", "far"];

/// Standardized benchmark and trained standard network for one seed.
#[derive(Debug, Clone)]
pub struct SeedSetup {
    pub seed: u64,
    /// Splits as generated, before standardization.
    pub raw: Benchmark,
    pub bench: Benchmark,
    pub standardizer: Standardizer,
    pub trained: TrainedNetwork,
    pub id_accuracy: f64,
    pub near: Mixture,
    pub far: Mixture,
}

impl SeedSetup {
    pub fn mixture(&self, name: &str) -> &Mixture {
        if name == "near" {
            &self.near
        } else {
            &self.far
        }
    }
}

/// Seed of the chain stage for run seed `seed`.
pub fn chain_seed(seed: u64) -> u64 {
    derive_seed(seed, 31)
}

/// Seed of the distillation stage for run seed `seed`.
pub fn distill_seed_for(seed: u64) -> u64 {
    derive_seed(seed, 41)
}

pub fn setup_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedSetup> {
    let raw = cfg
        .benchmark
        .generate(seed)
        .map_err(Error::stage(seed, "data"))?;
    let (bench, standardizer) = raw.standardized().map_err(Error::stage(seed, "data"))?;
    let train = crate::network::TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let trained = train_standard(&bench.id_train, &train).map_err(Error::stage(seed, "train"))?;
    let id_accuracy =
        metrics::accuracy(&trained.network, &bench.id_test).map_err(Error::stage(seed, "train"))?;
    let near =
        assemble_mixture(&bench.id_test, &bench.near_ood).map_err(Error::stage(seed, "data"))?;
    let far =
        assemble_mixture(&bench.id_test, &bench.far_ood).map_err(Error::stage(seed, "data"))?;
    Ok(SeedSetup {
        seed,
        raw,
        bench,
        standardizer,
        trained,
        id_accuracy,
        near,
        far,
    })
}

/// Runs the chains for one seed. Only the CA⁺ variant sees the training set.
pub fn synthesize_seed(
    cfg: &ExperimentConfig,
    setup: &SeedSetup,
    exec: Execution,
) -> Result<Trajectory> {
    let chain = synthesis::ChainConfig {
        seed: chain_seed(setup.seed),
        ..cfg.chain.clone()
    };
    let id_data = match cfg.variant {
        Variant::CaPlus => Some(&setup.bench.id_train),
        Variant::CaMinus => None,
    };
    synthesis::synthesize_with(
        &setup.trained.network,
        Some(&setup.trained.stats),
        cfg.chains,
        &chain,
        id_data,
        exec,
    )
    .map_err(Error::stage(setup.seed, "synthesize"))
}

pub fn distill_seed(
    cfg: &ExperimentConfig,
    setup: &SeedSetup,
    traj: &Trajectory,
    a: f64,
) -> Result<(Vec<AmendedTarget>, Distilled)> {
    let seed = setup.seed;
    let targets =
        amend_trajectory(traj, &setup.trained.network, a).map_err(Error::stage(seed, "amend"))?;
    let dcfg = DistillConfig {
        seed: distill_seed_for(seed),
        ..cfg.distill.clone()
    };
    let out = distill(traj, &targets, setup.trained.network.layer_dims(), &dcfg)
        .map_err(Error::stage(seed, "distill"))?;
    Ok((targets, out))
}

/// Scores every configured detector on both mixtures.
pub fn evaluate_seed(
    cfg: &ExperimentConfig,
    setup: &SeedSetup,
    aux: Option<&Distilled>,
    exec: Execution,
) -> Result<Vec<(String, ScoreSet, EvalReport)>> {
    let seed = setup.seed;
    let standard = &setup.trained.network;
    let aux_net = aux.map(|d| &d.network);
    let mut out = Vec::new();
    for det in &cfg.detectors {
        for mix in MIXTURES {
            let set = ScoreSet::compute(det, standard, aux_net, setup.mixture(mix), exec)
                .map_err(Error::stage(seed, "score"))?;
            let scorer = match det {
                DetectorKind::Ca => aux_net.map(|n| n.fingerprint()).unwrap_or_default(),
                _ => standard.fingerprint(),
            };
            let report = EvalReport::evaluate(
                det.name(),
                mix,
                &set.scores,
                &set.is_ood,
                Some(setup.id_accuracy),
                seed,
                &scorer,
            )
            .map_err(Error::stage(seed, "evaluate"))?;
            out.push((format!("{}-{mix}", det.name()), set, report));
        }
    }
    Ok(out)
}

/// Mean CA AUROC on the near and far mixtures.
pub fn ca_auroc(setup: &SeedSetup, aux: &Distilled) -> Result<(f64, f64)> {
    let mut v = [0.0; 2];
    for (i, mix) in MIXTURES.iter().enumerate() {
        let m = setup.mixture(mix);
        let s = crate::detect::score_ca(&aux.network, &m.features)?;
        v[i] = metrics::auroc(&s, &m.is_ood)?;
    }
    Ok((v[0], v[1]))
}

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub reports: Vec<EvalReport>,
    pub confidence: Vec<(usize, f64)>,
    pub train_accuracy: f64,
    pub initial_kl: Option<f64>,
    pub final_kl: Option<f64>,
}

fn needs_aux(cfg: &ExperimentConfig) -> bool {
    cfg.detectors.contains(&DetectorKind::Ca)
}

/// Whole pipeline for one seed, writing artifacts under `dir` if given.
pub fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    dir: Option<&Path>,
    exec: Execution,
) -> Result<SeedResult> {
    let setup = setup_seed(cfg, seed)?;
    let traj = synthesize_seed(cfg, &setup, exec)?;
    let confidence = synthesis::confidence_curve(&traj, &setup.trained.network)
        .map_err(Error::stage(seed, "synthesize"))?;
    let distilled = if needs_aux(cfg) {
        Some(distill_seed(cfg, &setup, &traj, cfg.a)?)
    } else {
        None
    };
    let evals = evaluate_seed(cfg, &setup, distilled.as_ref().map(|d| &d.1), exec)?;

    if let Some(dir) = dir {
        write_seed_artifacts(
            dir,
            &setup,
            &traj,
            cfg.a,
            distilled.as_ref(),
            &evals,
            &confidence,
        )
        .map_err(Error::stage(seed, "write"))?;
    }
    Ok(SeedResult {
        seed,
        reports: evals.into_iter().map(|(_, _, r)| r).collect(),
        confidence,
        train_accuracy: setup.trained.train_accuracy,
        initial_kl: distilled.as_ref().map(|d| d.1.initial_kl),
        final_kl: distilled.as_ref().map(|d| d.1.final_kl),
    })
}

fn write_seed_artifacts(
    dir: &Path,
    setup: &SeedSetup,
    traj: &Trajectory,
    a: f64,
    distilled: Option<&(Vec<AmendedTarget>, Distilled)>,
    evals: &[(String, ScoreSet, EvalReport)],
    confidence: &[(usize, f64)],
) -> Result<()> {
    let raw = &setup.raw;
    for ds in [&raw.id_train, &raw.id_test, &raw.near_ood, &raw.far_ood] {
        data::save_dataset(ds, &dir.join("data").join(format!("{}.csv", ds.name)))?;
    }
    Checkpoint {
        kind: NetworkKind::Standard,
        network: setup.trained.network.clone(),
        stats: Some(setup.trained.stats.clone()),
        seed: setup.seed,
        standardizer: Some(setup.standardizer.clone()),
    }
    .save(&dir.join("standard.ckpt"))?;
    let amended = distilled.map(|(targets, _)| StoredAmendment {
        a,
        targets: targets.clone(),
    });
    save_trajectory(traj, amended.as_ref(), &dir.join("trajectory.txt"))?;
    if let Some((_, d)) = distilled {
        Checkpoint {
            kind: NetworkKind::Auxiliary,
            network: d.network.clone(),
            stats: None,
            seed: setup.seed,
            standardizer: Some(setup.standardizer.clone()),
        }
        .save(&dir.join("auxiliary.ckpt"))?;
    }
    let mut csv = format!("{REPORT_CSV_HEADER}\n");
    for (name, set, report) in evals {
        set.save(&dir.join("scores").join(format!("{name}.txt")))?;
        textio::write(
            &dir.join("reports").join(format!("{name}.txt")),
            &report.to_text(),
        )?;
        csv.push_str(&report.csv_row());
        csv.push('\n');
    }
    textio::write(&dir.join("reports.csv"), &csv)?;
    textio::write(
        &dir.join("confidence.csv"),
        &curve_csv("t", "mean_confidence", confidence),
    )
}

/// `t,mean_confidence` rows.
pub fn confidence_csv(points: &[(usize, f64)]) -> String {
    curve_csv("t", "mean_confidence", points)
}

fn curve_csv(x: &str, y: &str, points: &[(usize, f64)]) -> String {
    let mut s = format!("{x},{y}\n");
    for (t, v) in points {
        let _ = writeln!(s, "{t},{}", fmt_f64(*v));
    }
    s
}

/// Mean and sample standard deviation over seeds for one detector/mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub detector: String,
    pub mixture: String,
    pub seeds: Vec<u64>,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub detection_error_mean: f64,
    pub detection_error_std: f64,
    pub id_accuracy_mean: f64,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug)]
pub struct RunSummary {
    pub outcomes: Vec<(u64, Result<SeedResult>)>,
    pub aggregates: Vec<Aggregate>,
}

impl RunSummary {
    pub fn succeeded(&self) -> impl Iterator<Item = &SeedResult> {
        self.outcomes.iter().filter_map(|(_, r)| r.as_ref().ok())
    }

    pub fn failed(&self) -> impl Iterator<Item = (u64, &Error)> {
        self.outcomes
            .iter()
            .filter_map(|(s, r)| r.as_ref().err().map(|e| (*s, e)))
    }

    pub fn aggregate(&self, detector: &str, mixture: &str) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.detector == detector && a.mixture == mixture)
    }

    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("scope,seed,detector,mixture,auroc,detection_error,id_accuracy,status\n");
        for (seed, outcome) in &self.outcomes {
            match outcome {
                Ok(r) => {
                    for rep in &r.reports {
                        let _ = writeln!(
                            s,
                            "seed,{seed},{},{},{},{},{},ok",
                            rep.detector,
                            rep.mixture,
                            fmt_f64(rep.auroc),
                            fmt_f64(rep.detection_error),
                            rep.id_accuracy.map(fmt_f64).unwrap_or_default()
                        );
                    }
                }
                Err(e) => {
                    let msg = e.to_string().replace([',', '\n'], ";");
                    let _ = writeln!(s, "seed,{seed},,,,,,failed: {msg}");
                }
            }
        }
        for a in &self.aggregates {
            let seeds: Vec<String> = a.seeds.iter().map(u64::to_string).collect();
            let status = format!("seeds={}", seeds.join(" "));
            let _ = writeln!(
                s,
                "mean,,{},{},{},{},{},{status}",
                a.detector,
                a.mixture,
                fmt_f64(a.auroc_mean),
                fmt_f64(a.detection_error_mean),
                fmt_f64(a.id_accuracy_mean)
            );
            let _ = writeln!(
                s,
                "std,,{},{},{},{},,{status}",
                a.detector,
                a.mixture,
                fmt_f64(a.auroc_std),
                fmt_f64(a.detection_error_std)
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let ok: Vec<String> = self.succeeded().map(|r| r.seed.to_string()).collect();
        let _ = writeln!(
            s,
            "seeds ok: {}",
            if ok.is_empty() {
                "none".into()
            } else {
                ok.join(", ")
            }
        );
        for (seed, e) in self.failed() {
            let _ = writeln!(s, "seed {seed} FAILED: {e}");
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<10} {:<8} {:>18} {:>18}",
            "detector", "mixture", "AUROC", "detection error"
        );
        for a in &self.aggregates {
            let _ = writeln!(
                s,
                "{:<10} {:<8} {:>18} {:>18}",
                a.detector,
                a.mixture,
                format!("{:.4} ± {:.4}", a.auroc_mean, a.auroc_std),
                format!(
                    "{:.4} ± {:.4}",
                    a.detection_error_mean, a.detection_error_std
                )
            );
        }
        if let Some(acc) = self.aggregates.first().map(|a| a.id_accuracy_mean) {
            let _ = writeln!(s, "\nID test accuracy: {acc:.4}");
        }
        s
    }
}

fn aggregate(cfg: &ExperimentConfig, outcomes: &[(u64, Result<SeedResult>)]) -> Vec<Aggregate> {
    let mut out = Vec::new();
    for det in &cfg.detectors {
        for mix in MIXTURES {
            let rows: Vec<&EvalReport> = outcomes
                .iter()
                .filter_map(|(_, r)| r.as_ref().ok())
                .flat_map(|r| r.reports.iter())
                .filter(|r| r.detector == det.name() && r.mixture == mix)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let col = |f: fn(&EvalReport) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (am, asd) = mean_std(&col(|r| r.auroc));
            let (dm, dsd) = mean_std(&col(|r| r.detection_error));
            let (acc, _) = mean_std(&col(|r| r.id_accuracy.unwrap_or(f64::NAN)));
            out.push(Aggregate {
                detector: det.name().to_string(),
                mixture: mix.to_string(),
                seeds: rows.iter().map(|r| r.seed).collect(),
                auroc_mean: am,
                auroc_std: asd,
                detection_error_mean: dm,
                detection_error_std: dsd,
                id_accuracy_mean: acc,
            });
        }
    }
    out
}

/// Paths written by [`run`].
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub config: PathBuf,
    pub seed_dirs: Vec<PathBuf>,
    pub summary_csv: PathBuf,
    pub summary_txt: PathBuf,
    pub confidence_csv: PathBuf,
}

pub fn seed_dir(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed-{seed}"))
}

/// Runs every seed. A failing seed is reported in the summary and does not
/// stop the others.
pub fn run(cfg: &ExperimentConfig, exec: Execution) -> Result<RunSummary> {
    run_impl(cfg, None, exec)
}

/// [`run`] plus the on-disk layout: config snapshot, one directory per seed,
/// `summary.csv`, `summary.txt` and the seed-averaged `confidence.csv`.
pub fn run_to_dir(
    cfg: &ExperimentConfig,
    overrides: &[String],
    dir: &Path,
    exec: Execution,
) -> Result<(RunSummary, RunArtifacts)> {
    cfg.validate()?;
    let config = dir.join("config.cfg");
    textio::write(&config, &cfg.to_text(overrides))?;
    let summary = run_impl(cfg, Some(dir), exec)?;
    let summary_csv = dir.join("summary.csv");
    let summary_txt = dir.join("summary.txt");
    textio::write(&summary_csv, &summary.to_csv())?;
    textio::write(&summary_txt, &summary.to_text())?;
    let confidence_csv = dir.join("confidence.csv");
    let curves: Vec<&Vec<(usize, f64)>> = summary.succeeded().map(|r| &r.confidence).collect();
    if let Some(first) = curves.first() {
        let mean: Vec<(usize, f64)> = first
            .iter()
            .enumerate()
            .map(|(i, (t, _))| {
                (
                    *t,
                    curves.iter().map(|c| c[i].1).sum::<f64>() / curves.len() as f64,
                )
            })
            .collect();
        textio::write(&confidence_csv, &curve_csv("t", "mean_confidence", &mean))?;
    }
    let seed_dirs = cfg.seeds.iter().map(|&s| seed_dir(dir, s)).collect();
    Ok((
        summary,
        RunArtifacts {
            dir: dir.to_path_buf(),
            config,
            seed_dirs,
            summary_csv,
            summary_txt,
            confidence_csv,
        },
    ))
}

fn run_impl(cfg: &ExperimentConfig, dir: Option<&Path>, exec: Execution) -> Result<RunSummary> {
    cfg.validate()?;
    let results = par::map_slice(exec, &cfg.seeds, |&seed| {
        let sd = dir.map(|d| seed_dir(d, seed));
        run_seed(cfg, seed, sd.as_deref(), exec)
    });
    let outcomes: Vec<(u64, Result<SeedResult>)> = cfg.seeds.iter().copied().zip(results).collect();
    let aggregates = aggregate(cfg, &outcomes);
    Ok(RunSummary {
        outcomes,
        aggregates,
    })
}

/// One row of an ablation table, averaged over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub value: f64,
    pub auroc_near: f64,
    pub auroc_far: f64,
    /// Mean of the near and far AUROC.
    pub auroc: f64,
    /// `(seed, near, far)` for every seed.
    pub per_seed: Vec<(u64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub parameter: &'static str,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    fn from_per_seed(
        parameter: &'static str,
        grid: &[f64],
        per_seed: &[(u64, Vec<(f64, f64)>)],
    ) -> Self {
        let rows = grid
            .iter()
            .enumerate()
            .map(|(i, &value)| {
                let cells: Vec<(u64, f64, f64)> =
                    per_seed.iter().map(|(s, v)| (*s, v[i].0, v[i].1)).collect();
                let n = cells.len() as f64;
                let near = cells.iter().map(|c| c.1).sum::<f64>() / n;
                let far = cells.iter().map(|c| c.2).sum::<f64>() / n;
                AblationRow {
                    value,
                    auroc_near: near,
                    auroc_far: far,
                    auroc: (near + far) / 2.0,
                    per_seed: cells,
                }
            })
            .collect();
        Self { parameter, rows }
    }

    pub fn row(&self, value: f64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.value == value)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{},auroc_near,auroc_far,auroc\n", self.parameter);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                fmt_f64(r.value),
                fmt_f64(r.auroc_near),
                fmt_f64(r.auroc_far),
                fmt_f64(r.auroc)
            );
        }
        s
    }

    pub fn per_seed_csv(&self) -> String {
        let mut s = format!("seed,{},auroc_near,auroc_far\n", self.parameter);
        for r in &self.rows {
            for (seed, near, far) in &r.per_seed {
                let _ = writeln!(
                    s,
                    "{seed},{},{},{}",
                    fmt_f64(r.value),
                    fmt_f64(*near),
                    fmt_f64(*far)
                );
            }
        }
        s
    }
}

fn collect_seeds<T>(seeds: &[u64], results: Vec<Result<T>>) -> Result<Vec<(u64, T)>> {
    seeds
        .iter()
        .copied()
        .zip(results)
        .map(|(s, r)| r.map(|v| (s, v)))
        .collect()
}

/// CA AUROC for every `a` in `grid`. Each seed synthesizes once; the same
/// trajectory is amended and distilled for every `a`.
pub fn ablation_a(cfg: &ExperimentConfig, grid: &[f64], exec: Execution) -> Result<AblationTable> {
    cfg.validate()?;
    if grid.is_empty() || grid.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
        return Err(Error::invalid("a grid must be non-empty with values ≥ 0"));
    }
    let results = par::map_slice(exec, &cfg.seeds, |&seed| {
        let setup = setup_seed(cfg, seed)?;
        let traj = synthesize_seed(cfg, &setup, exec)?;
        grid.iter()
            .map(|&a| {
                let (_, d) = distill_seed(cfg, &setup, &traj, a)?;
                ca_auroc(&setup, &d).map_err(Error::stage(seed, "evaluate"))
            })
            .collect::<Result<Vec<_>>>()
    });
    Ok(AblationTable::from_per_seed(
        "a",
        grid,
        &collect_seeds(&cfg.seeds, results)?,
    ))
}

/// CA AUROC for every horizon `T` in `grid`, rerunning synthesis per `T`.
pub fn ablation_t(
    cfg: &ExperimentConfig,
    grid: &[usize],
    exec: Execution,
) -> Result<AblationTable> {
    cfg.validate()?;
    if grid.is_empty() || grid.contains(&0) {
        return Err(Error::invalid("T grid must be non-empty with values ≥ 1"));
    }
    let results = par::map_slice(exec, &cfg.seeds, |&seed| {
        let setup = setup_seed(cfg, seed)?;
        grid.iter()
            .map(|&horizon| {
                let mut c = cfg.clone();
                c.chain.horizon = horizon;
                c.chain.record_stride = c.chain.record_stride.min(horizon);
                let traj = synthesize_seed(&c, &setup, exec)?;
                let (_, d) = distill_seed(&c, &setup, &traj, c.a)?;
                ca_auroc(&setup, &d).map_err(Error::stage(seed, "evaluate"))
            })
            .collect::<Result<Vec<_>>>()
    });
    let g: Vec<f64> = grid.iter().map(|&t| t as f64).collect();
    Ok(AblationTable::from_per_seed(
        "T",
        &g,
        &collect_seeds(&cfg.seeds, results)?,
    ))
}

/// Writes `<name>.csv` and `<name>_seeds.csv` for an ablation table.
pub fn write_ablation(table: &AblationTable, dir: &Path, name: &str) -> Result<()> {
    textio::write(&dir.join(format!("{name}.csv")), &table.to_csv())?;
    textio::write(
        &dir.join(format!("{name}_seeds.csv")),
        &table.per_seed_csv(),
    )
}
