//! Command-line surface: train, attack, certify, diagnose, corrupt-eval,
//! report. Exit codes: 0 success, 1 usage/config error, 2 runtime failure.

use crate::attacks::adversarial_accuracy;
use crate::certify::{
    clever_score, max_invariant_perturbation, orbit_gradient_norms, suppression_diagnostic,
    theorem1_check, CertRadius, BISECT_TOL,
};
use crate::config::{attack_kind_name, RunConfig};
use crate::data::{corrupt, Dataset};
use crate::error::{Error, Result};
use crate::report::{
    read_rows, report_digest, summarize, write_summary_csv, ReportRow, ReportWriter,
};
use crate::train::{evaluate, train};
use crate::zoo::Model;
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const DIAG_SCHEMA: &str = "equirobust-diagnostics-v1";

#[derive(Parser, Debug)]
#[command(name = "equirobust", version, about = "Equivariant-robustness laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides the config's out_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed override applied to every stochastic component.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker-thread cap (determinism preserved via derived seeds).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train every configured (model, seed) pair; writes checkpoints and logs.
    Train(Common),
    /// Evaluate a checkpoint against the configured attack grid.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// CLEVER scores and max-invariant-perturbation records for a checkpoint.
    Certify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Orbit-gradient and suppression diagnostics for a checkpoint.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Corrupt-then-attack grid (corruption kinds x severities x epsilons).
    CorruptEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render summary tables and plot data from a run directory.
    Report(Common),
}

pub fn run(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints --help/--version through the same path
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let common = match &cli.command {
        Command::Train(c) | Command::Report(c) => c,
        Command::Attack { common, .. }
        | Command::Certify { common, .. }
        | Command::Diagnose { common, .. }
        | Command::CorruptEval { common, .. } => common,
    };
    let mut cfg = match RunConfig::load(&common.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    if let Some(n) = common.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match &cli.command {
        Command::Train(_) => cmd_train(&cfg),
        Command::Attack { checkpoint, .. } => cmd_attack(&cfg, checkpoint),
        Command::Certify { checkpoint, .. } => cmd_certify(&cfg, checkpoint),
        Command::Diagnose { checkpoint, .. } => cmd_diagnose(&cfg, checkpoint),
        Command::CorruptEval { checkpoint, .. } => cmd_corrupt_eval(&cfg, checkpoint),
        Command::Report(_) => cmd_report(&cfg),
    };
    match result {
        Ok(()) => 0,
        Err(Error::Config(e)) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    cfg.write_snapshot(&cfg.out_dir)?;
    Ok(cfg.out_dir.clone())
}

/// Run metadata (the only place timestamps appear; report digests stay
/// timestamp-free).
fn write_run_meta(out: &Path, cfg: &RunConfig, command: &str) -> Result<()> {
    let meta = json!({
        "schema": "equirobust-runmeta-v1",
        "run_id": cfg.run_id,
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seeds": cfg.train.seeds,
        "unix_time": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    });
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("run-meta.jsonl"))?;
    writeln!(f, "{meta}")?;
    Ok(())
}

fn report_writer(out: &Path) -> Result<ReportWriter> {
    ReportWriter::append(&out.join("report.jsonl"))
}

fn diag_writer(out: &Path) -> Result<std::fs::File> {
    Ok(std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("diagnostics.jsonl"))?)
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model> {
    let model = Model::load(checkpoint)?;
    if model.spec().num_classes != cfg.dataset.num_classes {
        return Err(Error::Config(format!(
            "checkpoint has {} classes but the dataset section declares {}",
            model.spec().num_classes,
            cfg.dataset.num_classes
        )));
    }
    Ok(model)
}

fn base_row(cfg: &RunConfig, ds: &Dataset, model: &Model, metric: &str, value: f64) -> ReportRow {
    ReportRow::new(
        &cfg.run_id,
        &ds.digest(),
        model.spec().architecture_id.as_str(),
        model.spec().depth,
        metric,
        value,
    )
    .with_seed(model.spec().seed)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    write_run_meta(&out, cfg, "train")?;
    let (train_ds, eval_ds) = cfg.load_datasets()?;
    let specs = cfg.resolve_specs()?;
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let mut report = report_writer(&out)?;
    for spec in &specs {
        for &seed in &cfg.train.seeds {
            let (model, log) = train(spec, &train_ds, &cfg.train, seed, Some(&ckpt_dir))?;
            let log_path = out.join(format!(
                "train-{}-d{}-s{}.jsonl",
                spec.architecture_id.as_str(),
                spec.depth,
                seed
            ));
            let mut f = std::fs::File::create(&log_path)?;
            for e in &log.epochs {
                let line = serde_json::to_string(e)
                    .map_err(|err| Error::invalid(format!("log serialization: {err}")))?;
                writeln!(f, "{line}")?;
            }
            let (acc, loss) = evaluate(&model, &eval_ds)?;
            report.write_row(&base_row(cfg, &eval_ds, &model, "clean_accuracy", acc))?;
            report.write_row(&base_row(cfg, &eval_ds, &model, "clean_loss", loss))?;
            println!(
                "trained {} d{} seed {}: clean accuracy {:.4}, digest {}",
                spec.architecture_id.as_str(),
                spec.depth,
                seed,
                acc,
                model.state_digest()
            );
        }
    }
    Ok(())
}

pub fn cmd_attack(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let out = prepare_out(cfg)?;
    write_run_meta(&out, cfg, "attack")?;
    let (_, eval_ds) = cfg.load_datasets()?;
    let model = load_model(cfg, checkpoint)?;
    let mut report = report_writer(&out)?;
    let mut per_kind: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for atk in cfg.attack.configs()? {
        let name = attack_kind_name(atk.kind);
        let rows = adversarial_accuracy(&model, &eval_ds, &atk, &cfg.attack.eps_grid)?;
        for &(eps, acc) in &rows {
            let metric = if eps == 0.0 { "clean_accuracy" } else { "adv_accuracy" };
            let mut row = base_row(cfg, &eval_ds, &model, metric, acc);
            if eps > 0.0 {
                row = row.with_attack(name, eps);
            }
            report.write_row(&row)?;
            println!("{name} eps={eps:.4}: accuracy {acc:.4}");
        }
        per_kind.push((name.to_string(), rows));
    }
    // a first-order attack should not beat its iterated refinement
    if let (Some((_, f)), Some((_, p))) = (
        per_kind.iter().find(|(n, _)| n == "fgsm"),
        per_kind.iter().find(|(n, _)| n == "pgd"),
    ) {
        for ((eps, fa), (_, pa)) in f.iter().zip(p) {
            if pa > fa {
                eprintln!("warning: PGD accuracy {pa:.4} exceeds FGSM {fa:.4} at eps={eps:.4}");
            }
        }
    }
    Ok(())
}

pub fn cmd_certify(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    if cfg.certify.n_samples == 0 {
        return Err(Error::Config("certify.n_samples must be positive".into()));
    }
    let out = prepare_out(cfg)?;
    write_run_meta(&out, cfg, "certify")?;
    let (_, eval_ds) = cfg.load_datasets()?;
    let model = load_model(cfg, checkpoint)?;
    let ccfg = cfg.certify.clever()?;
    let mut diag = diag_writer(&out)?;
    let mut report = report_writer(&out)?;
    let n = cfg.certify.n_samples.min(eval_ds.len());
    let mut clever_vals = Vec::new();
    let mut invariant_vals = Vec::new();
    let atk = crate::attacks::AttackConfig::fgsm(cfg.certify.max_eps);
    for i in 0..n {
        let x = eval_ds.image(i);
        let score = clever_score(&model, &x, &ccfg)?;
        let eps_min = score.eps_min.bounded();
        writeln!(
            diag,
            "{}",
            json!({
                "schema": DIAG_SCHEMA,
                "record": "clever",
                "sample": i,
                "predicted": score.predicted,
                "eps_min": eps_min,
                "unbounded": matches!(score.eps_min, CertRadius::Unbounded),
            })
        )?;
        if let Some(v) = eps_min {
            clever_vals.push(v);
        }
        let label = eval_ds.labels[i];
        if score.predicted == label {
            let eps =
                max_invariant_perturbation(&model, &x, label, &atk, cfg.certify.max_eps, BISECT_TOL)?;
            invariant_vals.push(eps);
            writeln!(
                diag,
                "{}",
                json!({
                    "schema": DIAG_SCHEMA,
                    "record": "max_invariant",
                    "sample": i,
                    "label": label,
                    "eps": eps,
                })
            )?;
        }
    }
    if let Some(med) = median(&mut clever_vals) {
        report.write_row(&base_row(cfg, &eval_ds, &model, "clever_eps_min_median", med))?;
        println!("clever eps_min median {med:.6} over {n} samples");
    }
    if let Some(med) = median(&mut invariant_vals) {
        report.write_row(&base_row(cfg, &eval_ds, &model, "max_invariant_eps_median", med))?;
        println!(
            "max-invariant eps median {med:.6} over {} correctly classified samples",
            invariant_vals.len()
        );
    }
    Ok(())
}

pub fn cmd_diagnose(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    if cfg.diagnose.probe == 0 {
        return Err(Error::Config("diagnose.probe must be positive".into()));
    }
    let out = prepare_out(cfg)?;
    write_run_meta(&out, cfg, "diagnose")?;
    let (_, eval_ds) = cfg.load_datasets()?;
    let model = load_model(cfg, checkpoint)?;
    let d = &cfg.diagnose;
    let mut diag = diag_writer(&out)?;
    let mut report = report_writer(&out)?;
    let n = d.probe.min(eval_ds.len());
    let equivariant = model.spec().architecture_id.is_fully_equivariant();
    let mut t1_max: f64 = 0.0;
    let mut ratios = Vec::new();
    for i in 0..n {
        let x = eval_ds.image(i);
        if equivariant {
            let t1 = theorem1_check(&model, &x, 1.0, d.theorem1_tolerance)?;
            t1_max = t1_max.max(t1.max_deviation);
            writeln!(
                diag,
                "{}",
                json!({
                    "schema": DIAG_SCHEMA,
                    "record": "theorem1",
                    "sample": i,
                    "max_deviation": t1.max_deviation,
                    "tolerance": t1.tolerance,
                    "passed": t1.passed,
                })
            )?;
        } else {
            // report-only path: no theorem hypothesis to assert
            let norms = orbit_gradient_norms(&model, &x, 1.0)?;
            writeln!(
                diag,
                "{}",
                json!({
                    "schema": DIAG_SCHEMA,
                    "record": "orbit_norms",
                    "sample": i,
                    "norms": norms,
                })
            )?;
        }
        let sup = suppression_diagnostic(&model, &x, d.angle_deg, d.trials, d.step, d.seed)?;
        ratios.push(sup.ratio);
        writeln!(
            diag,
            "{}",
            json!({
                "schema": DIAG_SCHEMA,
                "record": "suppression",
                "sample": i,
                "ratio": sup.ratio,
                "on_orbit_change": sup.on_orbit_change,
                "off_orbit_change_mean": sup.off_orbit_change_mean,
            })
        )?;
    }
    if equivariant {
        report.write_row(&base_row(cfg, &eval_ds, &model, "theorem1_max_deviation", t1_max))?;
        println!("theorem1 max deviation {t1_max:.3e} over {n} probes");
    }
    let mut sorted = ratios.clone();
    if let Some(med) = median(&mut sorted) {
        report.write_row(&base_row(cfg, &eval_ds, &model, "suppression_ratio_median", med))?;
        println!("suppression ratio median {med:.4} over {n} probes");
    }
    Ok(())
}

pub fn cmd_corrupt_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let out = prepare_out(cfg)?;
    write_run_meta(&out, cfg, "corrupt-eval")?;
    let (_, eval_ds) = cfg.load_datasets()?;
    let model = load_model(cfg, checkpoint)?;
    let mut report = report_writer(&out)?;
    let mut eps: Vec<f64> = cfg.corruptions.eps.clone();
    eps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eps.dedup();
    // order of operations: corrupt first, then attack the corrupted input
    for cspec in cfg.corruptions.specs()? {
        let corrupted = corrupt(&eval_ds, &cspec)?;
        let positive: Vec<f64> = eps.iter().copied().filter(|&e| e > 0.0).collect();
        let rows = if positive.is_empty() {
            let (acc, _) = evaluate(&model, &corrupted)?;
            vec![(0.0, acc)]
        } else {
            let atk = crate::attacks::AttackConfig::fgsm(positive[0]);
            adversarial_accuracy(&model, &corrupted, &atk, &positive)?
        };
        for (e, acc) in rows {
            if !eps.contains(&e) {
                continue;
            }
            report.write_row(
                &base_row(cfg, &eval_ds, &model, "corrupt_adv_accuracy", acc)
                    .with_attack("fgsm", e)
                    .with_corruption(cspec.kind.as_str(), cspec.severity),
            )?;
            println!(
                "{} severity {} eps={:.4}: accuracy {:.4}",
                cspec.kind.as_str(),
                cspec.severity,
                e,
                acc
            );
        }
    }
    Ok(())
}

pub fn cmd_report(cfg: &RunConfig) -> Result<()> {
    let path = cfg.out_dir.join("report.jsonl");
    if !path.exists() {
        return Err(Error::invalid(format!(
            "no report rows at {} (run train/attack first)",
            path.display()
        )));
    }
    let rows = read_rows(&path)?;
    if rows.is_empty() {
        return Err(Error::invalid(format!("{} is empty", path.display())));
    }
    let summary = summarize(&rows);
    write_summary_csv(&summary, &cfg.out_dir.join("summary.csv"))?;
    let digest = report_digest(&path)?;
    println!("rows {} summary-groups {} digest {digest}", rows.len(), summary.len());
    Ok(())
}

fn median(vals: &mut Vec<f64>) -> Option<f64> {
    if vals.is_empty() {
        return None;
    }
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(vals[vals.len() / 2])
}
