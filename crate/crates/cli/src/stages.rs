//! One function per subcommand. Stage commands share a working directory:
//!
//! ```text
//! <out>/data/{id_train,id_test,near_ood,far_ood}.csv   gen-data (raw, unstandardized)
//! <out>/standard.ckpt                                   train
//! <out>/trajectory.txt, <out>/confidence.csv            synthesize (amend adds targets)
//! <out>/auxiliary.ckpt                                  distill
//! <out>/scores/<detector>-<mixture>.txt                 score
//! <out>/reports/..., <out>/reports.csv                  eval
//! ```
//!
//! This is the same layout `run` writes under each `seed-<s>` directory, and
//! with the same seed and config the stages reproduce its files.

use std::fs;
use std::path::{Path, PathBuf};

use ca_core::amendment::amend_trajectory;
use ca_core::data::{assemble_mixture, load_dataset, save_dataset, Dataset, Mixture, Standardizer};
use ca_core::detect::{DetectorKind, ScoreSet};
use ca_core::distill::{distill as distill_trajectory, DistillConfig};
use ca_core::experiment::{self, MIXTURES};
use ca_core::metrics::{self, EvalReport, REPORT_CSV_HEADER};
use ca_core::network::{train_standard, Checkpoint, NetworkKind, TrainConfig};
use ca_core::plot::emit_plots;
use ca_core::synthesis::{
    confidence_curve, load_trajectory, save_trajectory, synthesize_with, ChainConfig,
    StoredAmendment,
};
use ca_core::theory::{bound as eval_bound, BoundInputs};

use crate::{require, Ctx, Failure};

type Out = Result<(), Failure>;

fn write_file(path: &Path, contents: &str) -> Out {
    let io = |e: std::io::Error| Failure::Runtime(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::write(path, contents).map_err(io)
}

fn data_path(ctx: &Ctx, split: &str) -> PathBuf {
    ctx.path("data").join(format!("{split}.csv"))
}

fn load_split(ctx: &Ctx, split: &str) -> Result<Dataset, Failure> {
    let p = data_path(ctx, split);
    require(&p)?;
    Ok(load_dataset(&p)?)
}

fn load_checkpoint(ctx: &Ctx, name: &str, kind: NetworkKind) -> Result<Checkpoint, Failure> {
    let p = ctx.path(name);
    require(&p)?;
    let ck = Checkpoint::load(&p)?;
    if ck.kind != kind {
        return Err(Failure::Runtime(format!(
            "{}: expected a {} checkpoint",
            p.display(),
            kind.as_str()
        )));
    }
    if ck.seed != ctx.seed {
        ctx.warn(format!(
            "{} was written for seed {}, running with seed {}",
            p.display(),
            ck.seed,
            ctx.seed
        ));
    }
    Ok(ck)
}

fn standardizer(ck: &Checkpoint) -> Result<&Standardizer, Failure> {
    ck.standardizer
        .as_ref()
        .ok_or_else(|| Failure::Runtime("checkpoint carries no input standardizer".into()))
}

fn mixtures(ctx: &Ctx, st: &Standardizer) -> Result<Vec<(&'static str, Mixture)>, Failure> {
    let id = st.apply_dataset(&load_split(ctx, "id_test")?)?;
    let mut out = Vec::new();
    for mix in MIXTURES {
        let ood = st.apply_dataset(&load_split(ctx, &format!("{mix}_ood"))?)?;
        out.push((mix, assemble_mixture(&id, &ood)?));
    }
    Ok(out)
}

pub fn gen_data(ctx: &Ctx) -> Out {
    let bench = ctx.cfg.benchmark.generate(ctx.seed)?;
    println!("{:<10} {:>6} {:>4}", "split", "rows", "dim");
    for ds in [
        &bench.id_train,
        &bench.id_test,
        &bench.near_ood,
        &bench.far_ood,
    ] {
        save_dataset(ds, &data_path(ctx, &ds.name))?;
        println!("{:<10} {:>6} {:>4}", ds.name, ds.len(), ds.dim());
    }
    ctx.info(format!("wrote {}", ctx.path("data").display()));
    Ok(())
}

pub fn train(ctx: &Ctx) -> Out {
    let raw = load_split(ctx, "id_train")?;
    let st = Standardizer::fit(&raw.features);
    let data = st.apply_dataset(&raw)?;
    let cfg = TrainConfig {
        seed: ctx.seed,
        ..ctx.cfg.train.clone()
    };
    ctx.info(format!(
        "training {} epochs on {} rows",
        cfg.epochs,
        data.len()
    ));
    let trained = train_standard(&data, &cfg)?;
    println!("train accuracy: {:.4}", trained.train_accuracy);
    if let Some(loss) = trained.epoch_losses.last() {
        println!("final loss: {loss:.6}");
    }
    if data_path(ctx, "id_test").exists() {
        let test = st.apply_dataset(&load_split(ctx, "id_test")?)?;
        println!(
            "ID test accuracy: {:.4}",
            metrics::accuracy(&trained.network, &test)?
        );
    }
    Checkpoint {
        kind: NetworkKind::Standard,
        network: trained.network,
        stats: Some(trained.stats),
        seed: ctx.seed,
        standardizer: Some(st),
    }
    .save(&ctx.path("standard.ckpt"))?;
    Ok(())
}

pub fn synthesize(ctx: &Ctx) -> Out {
    let ck = load_checkpoint(ctx, "standard.ckpt", NetworkKind::Standard)?;
    let cfg = &ctx.cfg;
    let chain = ChainConfig {
        seed: experiment::chain_seed(ctx.seed),
        ..cfg.chain.clone()
    };
    let id_train = match cfg.variant {
        ca_core::config::Variant::CaPlus => {
            Some(standardizer(&ck)?.apply_dataset(&load_split(ctx, "id_train")?)?)
        }
        ca_core::config::Variant::CaMinus => None,
    };
    ctx.info(format!(
        "{} chains x {} steps, regularizer {}",
        cfg.chains,
        chain.horizon,
        chain.regularizer.name()
    ));
    let traj = synthesize_with(
        &ck.network,
        ck.stats.as_ref(),
        cfg.chains,
        &chain,
        id_train.as_ref(),
        ctx.exec,
    )?;
    let curve = confidence_curve(&traj, &ck.network)?;
    save_trajectory(&traj, None, &ctx.path("trajectory.txt"))?;
    write_file(
        &ctx.path("confidence.csv"),
        &experiment::confidence_csv(&curve),
    )?;
    println!("records: {}", traj.len());
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        println!("mean confidence t={}: {:.4}", first.0, first.1);
        println!("mean confidence t={}: {:.4}", last.0, last.1);
    }
    Ok(())
}

pub fn amend(ctx: &Ctx, a: f64) -> Out {
    let ck = load_checkpoint(ctx, "standard.ckpt", NetworkKind::Standard)?;
    let path = ctx.path("trajectory.txt");
    require(&path)?;
    let (traj, _) = load_trajectory(&path)?;
    let targets = amend_trajectory(&traj, &ck.network, a)?;
    save_trajectory(&traj, Some(&StoredAmendment { a, targets }), &path)?;
    println!("amended {} records with a={a}", traj.len());
    Ok(())
}

pub fn distill(ctx: &Ctx) -> Out {
    let ck = load_checkpoint(ctx, "standard.ckpt", NetworkKind::Standard)?;
    let path = ctx.path("trajectory.txt");
    require(&path)?;
    let (traj, stored) = load_trajectory(&path)?;
    let stored = stored.ok_or_else(|| {
        Failure::Usage(format!(
            "{} has no amended targets (run amend first)",
            path.display()
        ))
    })?;
    let cfg = DistillConfig {
        seed: experiment::distill_seed_for(ctx.seed),
        ..ctx.cfg.distill.clone()
    };
    ctx.info(format!("distilling {} records, a={}", traj.len(), stored.a));
    let d = distill_trajectory(&traj, &stored.targets, ck.network.layer_dims(), &cfg)?;
    println!("initial KL: {:.6}", d.initial_kl);
    println!("final KL: {:.6}", d.final_kl);
    Checkpoint {
        kind: NetworkKind::Auxiliary,
        network: d.network,
        stats: None,
        seed: ctx.seed,
        standardizer: ck.standardizer,
    }
    .save(&ctx.path("auxiliary.ckpt"))?;
    Ok(())
}

fn detectors(ctx: &Ctx, names: &[String]) -> Result<Vec<DetectorKind>, Failure> {
    if names.is_empty() {
        return Ok(ctx.cfg.detectors.clone());
    }
    names
        .iter()
        .map(|n| {
            let kind = DetectorKind::from_name(n).map_err(|e| Failure::Usage(e.to_string()))?;
            // Configured hyperparameters win over the defaults.
            Ok(ctx
                .cfg
                .detectors
                .iter()
                .copied()
                .find(|d| d.name() == kind.name())
                .unwrap_or(kind))
        })
        .collect()
}

pub fn score(ctx: &Ctx, names: &[String]) -> Out {
    let kinds = detectors(ctx, names)?;
    let ck = load_checkpoint(ctx, "standard.ckpt", NetworkKind::Standard)?;
    let aux = if kinds.contains(&DetectorKind::Ca) {
        Some(load_checkpoint(
            ctx,
            "auxiliary.ckpt",
            NetworkKind::Auxiliary,
        )?)
    } else {
        None
    };
    let mixes = mixtures(ctx, standardizer(&ck)?)?;
    for kind in &kinds {
        for (mix, m) in &mixes {
            let set = ScoreSet::compute(
                kind,
                &ck.network,
                aux.as_ref().map(|c| &c.network),
                m,
                ctx.exec,
            )?;
            let p = ctx
                .path("scores")
                .join(format!("{}-{mix}.txt", kind.name()));
            set.save(&p)?;
            println!("{}", p.display());
        }
    }
    Ok(())
}

pub fn eval(ctx: &Ctx) -> Out {
    let dir = ctx.path("scores");
    require(&dir)?;
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    if files.is_empty() {
        return Err(Failure::Usage(format!(
            "no score files in {}",
            dir.display()
        )));
    }
    // Same detector-major order as `run`.
    let rank = |p: &PathBuf| {
        let stem = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let det = stem.split_once('-').map_or(stem.as_str(), |(d, _)| d);
        let det_rank = ctx
            .cfg
            .detectors
            .iter()
            .position(|d| d.name() == det)
            .unwrap_or(usize::MAX);
        let mix_rank = MIXTURES
            .iter()
            .position(|m| stem.ends_with(&format!("-{m}")))
            .unwrap_or(usize::MAX);
        (det_rank, mix_rank, stem)
    };
    files.sort_by_key(rank);

    let standard = ctx.path("standard.ckpt");
    let std_ck = if standard.exists() {
        Some(Checkpoint::load(&standard)?)
    } else {
        None
    };
    let aux_path = ctx.path("auxiliary.ckpt");
    let aux_ck = if aux_path.exists() {
        Some(Checkpoint::load(&aux_path)?)
    } else {
        None
    };
    let id_accuracy = match &std_ck {
        Some(ck) if data_path(ctx, "id_test").exists() => {
            let test = standardizer(ck)?.apply_dataset(&load_split(ctx, "id_test")?)?;
            Some(metrics::accuracy(&ck.network, &test)?)
        }
        _ => None,
    };

    let mut csv = format!("{REPORT_CSV_HEADER}\n");
    println!(
        "{:<10} {:<8} {:>8} {:>16}",
        "detector", "mixture", "AUROC", "detection error"
    );
    for f in &files {
        let set = ScoreSet::load(f)?;
        let stem = f
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mix = stem.rsplit_once('-').map_or("unknown", |(_, m)| m);
        let scorer = match set.detector {
            DetectorKind::Ca => aux_ck.as_ref(),
            _ => std_ck.as_ref(),
        }
        .map(|c| c.network.fingerprint())
        .unwrap_or_default();
        let report = EvalReport::evaluate(
            set.detector.name(),
            mix,
            &set.scores,
            &set.is_ood,
            id_accuracy,
            ctx.seed,
            &scorer,
        )?;
        write_file(
            &ctx.path("reports").join(format!("{stem}.txt")),
            &report.to_text(),
        )?;
        csv.push_str(&report.csv_row());
        csv.push('\n');
        println!(
            "{:<10} {:<8} {:>8.4} {:>16.4}",
            report.detector, report.mixture, report.auroc, report.detection_error
        );
    }
    if let Some(acc) = id_accuracy {
        println!("\nID test accuracy: {acc:.4}");
    }
    write_file(&ctx.path("reports.csv"), &csv)
}

pub fn run(ctx: &Ctx) -> Out {
    ctx.info(format!(
        "run: seeds {:?}, {} chains x {} steps, a={}",
        ctx.cfg.seeds, ctx.cfg.chains, ctx.cfg.chain.horizon, ctx.cfg.a
    ));
    let (summary, art) = experiment::run_to_dir(&ctx.cfg, &ctx.overrides, &ctx.out, ctx.exec)?;
    print!("{}", summary.to_text());
    ctx.info(format!("wrote {}", art.summary_csv.display()));
    let failed: Vec<String> = summary
        .failed()
        .map(|(s, e)| format!("seed {s}: {e}"))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "{} of {} seeds failed; {}",
            failed.len(),
            ctx.cfg.seeds.len(),
            failed.join("; ")
        )))
    }
}

fn print_ablation(table: &experiment::AblationTable) {
    println!(
        "{:>10} {:>10} {:>10} {:>10}",
        table.parameter, "near", "far", "mean"
    );
    for r in &table.rows {
        println!(
            "{:>10} {:>10.4} {:>10.4} {:>10.4}",
            r.value, r.auroc_near, r.auroc_far, r.auroc
        );
    }
}

pub fn ablate_a(ctx: &Ctx, grid: &[f64]) -> Out {
    ctx.info(format!(
        "ablation over a = {grid:?}, seeds {:?}",
        ctx.cfg.seeds
    ));
    let table = experiment::ablation_a(&ctx.cfg, grid, ctx.exec)?;
    write_file(
        &ctx.path("ablation_a.cfg"),
        &ctx.cfg.to_text(&ctx.overrides),
    )?;
    experiment::write_ablation(&table, &ctx.out, "ablation_a")?;
    print_ablation(&table);
    Ok(())
}

pub fn ablate_t(ctx: &Ctx, grid: &[usize]) -> Out {
    ctx.info(format!(
        "ablation over T = {grid:?}, seeds {:?}",
        ctx.cfg.seeds
    ));
    let table = experiment::ablation_t(&ctx.cfg, grid, ctx.exec)?;
    write_file(
        &ctx.path("ablation_t.cfg"),
        &ctx.cfg.to_text(&ctx.overrides),
    )?;
    experiment::write_ablation(&table, &ctx.out, "ablation_t")?;
    print_ablation(&table);
    Ok(())
}

pub fn curves(ctx: &Ctx) -> Out {
    for p in emit_plots(&ctx.out)? {
        println!("{}", p.display());
    }
    Ok(())
}

/// Rounds away binary noise: `2.3100000000000005` prints as `2.31`.
fn short(v: f64) -> String {
    let s = format!("{v:.12}");
    if v != 0.0 && (v.abs() < 1e-4 || v.abs() >= 1e9) {
        return format!("{v:.6e}");
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

pub fn bound(
    a: f64,
    chains: usize,
    horizon: usize,
    radius: f64,
    classes: usize,
    delta: f64,
) -> Out {
    let inputs = BoundInputs {
        chains,
        horizon,
        radius,
        classes,
        delta,
        a,
    };
    let b = eval_bound(&inputs).map_err(|e| Failure::Usage(e.to_string()))?;
    println!("phi(a)={}", short(b.phi));
    println!("M=N(T+1)={}", inputs.samples());
    println!("complexity_term={}", short(b.complexity));
    println!("confidence_term={}", short(b.confidence));
    println!("bound={}", short(b.total()));
    Ok(())
}
