use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use dir_learn_core::backdoor::Strategy;
use dir_learn_core::config::{set_path, validate_config, Datasets, TrainConfig, Variant};
use dir_learn_core::data::MultiDomainDataset;
use dir_learn_core::eval::{self, evaluate_retrieval, export_latents, per_domain_accuracy, probe_report, project_2d, write_latent_csv};
use dir_learn_core::gradcheck;
use dir_learn_core::losses::write_loss_rows;
use dir_learn_core::model::{sidecar_path, ModelBundle};
use dir_learn_core::scm::{self, DiscreteScm};
use dir_learn_core::trainer::{classification_accuracy, train_with, AblationTable, EpochMetrics, StepReport, SweepCell, SweepTable};

/// Gradient checks pass below this relative error.
const GRADCHECK_TOL: f64 = 1e-4;
const SCM_TOL: f64 = 1e-12;

#[derive(Parser)]
#[command(name = "dir-learn", version, about = "Disentangled domain-invariant representation learning with backdoor adjustment")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON document merged over the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Bundled profile the config is resolved against.
    #[arg(long, global = true, default_value = "synthetic-smoke")]
    profile: String,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving every artifact.
    #[arg(long, global = true, default_value = "runs/latest")]
    out: PathBuf,
    /// Directory holding the four MNIST IDX files.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    variant: Option<String>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    strategy: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<u32>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the datasets and cache them under --out.
    PrepareData,
    /// Train one model.
    Train,
    /// Train all four variants over several seeds.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Also sweep every adjustment strategy over --ks with the dir variant.
        #[arg(long)]
        sweep: bool,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        ks: Vec<usize>,
        /// Skip the four-variant table, for sweep-only runs.
        #[arg(long)]
        no_table: bool,
    },
    /// Score a checkpoint: test accuracy and retrieval protocols.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        splits: usize,
    },
    /// Compare observational, interventional and backdoor distributions.
    ScmVerify {
        /// SCM JSON document; defaults to the bundled confounded example.
        #[arg(long)]
        scm: Option<PathBuf>,
    },
    /// Write latent CSVs and k-NN probe accuracies for a checkpoint.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference gradient checks of every primitive and loss.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
}

/// A user-input problem detected by the CLI itself.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn is_validation(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<Usage>().is_some() || c.downcast_ref::<dir_learn_core::Error>().is_some_and(|e| e.is_validation())
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let c = &cli.common;
    match &cli.command {
        Command::PrepareData => prepare_data(c),
        Command::Train => train_cmd(c),
        Command::Ablate { seeds, sweep, ks, no_table } => ablate(c, seeds, *sweep, ks, *no_table),
        Command::Eval { checkpoint, splits } => eval_cmd(c, checkpoint, *splits),
        Command::ScmVerify { scm } => scm_verify(scm.as_deref()),
        Command::ExportEmbeddings { checkpoint } => export_embeddings(c, checkpoint),
        Command::Gradcheck { instances } => gradcheck_cmd(c, *instances),
    }
}

/// Reads --config (or `{}`), applies flag overrides and resolves it.
fn resolve_config(c: &Common) -> Result<(TrainConfig, Value)> {
    resolve_from(c, c.config.as_deref())
}

fn resolve_from(c: &Common, config: Option<&Path>) -> Result<(TrainConfig, Value)> {
    let mut doc = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str::<Value>(&text).map_err(|e| usage(format!("config {} is not valid JSON: {e}", p.display())))?
        }
        None => json!({}),
    };
    if let Some(seed) = c.seed {
        set_path(&mut doc, "seed", json!(seed));
    }
    if let Some(v) = &c.variant {
        let v: Variant = v.parse()?;
        set_path(&mut doc, "variant", json!(v));
    }
    if let Some(k) = c.k {
        set_path(&mut doc, "ba.k", json!(k));
    }
    if let Some(s) = &c.strategy {
        let s: Strategy = s.parse()?;
        set_path(&mut doc, "ba.strategy", json!(s));
    }
    if let Some(e) = c.epochs {
        set_path(&mut doc, "epochs", json!(e));
    }
    let cfg = validate_config(&doc, &c.profile)?;
    let resolved = serde_json::to_value(&cfg)?;
    Ok((cfg, resolved))
}

fn build_data(cfg: &TrainConfig, c: &Common) -> Result<Datasets> {
    Ok(cfg.data.build(c.data_dir.as_deref())?)
}

fn make_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn log(msg: impl AsRef<str>) {
    eprintln!("[dir-learn] {}", msg.as_ref());
}

fn prepare_data(c: &Common) -> Result<ExitCode> {
    let (cfg, _) = resolve_config(c)?;
    let data = build_data(&cfg, c)?;
    let root = c.out.join("data");
    let mut summary = serde_json::Map::new();
    for (name, ds) in [("train", &data.train), ("test", &data.test), ("heldout", &data.heldout)] {
        let dir = root.join(name);
        ds.save_cache(&dir)?;
        let back = MultiDomainDataset::load_cache(&dir)?;
        if back.pixels != ds.pixels || back.identities != ds.identities || back.domains != ds.domains {
            anyhow::bail!("cache round-trip mismatch for {name}");
        }
        summary.insert(
            name.into(),
            json!({ "samples": ds.len(), "domains": ds.domain_tags, "pixels_sha256": sha256_file(&dir.join("pixels.bin"))? }),
        );
        println!("{name}: {} samples in {}", ds.len(), dir.display());
    }
    write_json(&root.join("summary.json"), &Value::Object(summary))?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct RunManifest<'a> {
    config_path: Option<String>,
    profile: &'a str,
    resolved_config: &'a Value,
    seed: u64,
    out: String,
    data_dir: Option<String>,
    artifacts: serde_json::Map<String, Value>,
}

/// Trains one config, streaming epoch and step logs into `out`.
fn train_into(cfg: &TrainConfig, data: &Datasets, out: &Path, label: &str) -> Result<(ModelBundle, Vec<EpochMetrics>)> {
    make_out(out)?;
    write_json(&out.join("config.json"), cfg)?;
    let mut metrics = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    let mut losses = BufWriter::new(File::create(out.join("losses.jsonl"))?);
    let started = Instant::now();
    let state = train_with(cfg, &data.train, Some(&data.test), |m: &EpochMetrics, steps: &[StepReport]| {
        serde_json::to_writer(&mut metrics, m)?;
        metrics.write_all(b"\n")?;
        metrics.flush()?;
        for st in steps {
            write_loss_rows(&mut losses, st.step, 1, &st.phase1.reports())?;
            write_loss_rows(&mut losses, st.step, 2, &st.phase2.reports())?;
        }
        losses.flush()?;
        log(format!(
            "{label} epoch {}/{} lr {:.2e} p1 {:.4} p2 {:.4} train {:.4} test {:.4} ({:.0}s)",
            m.epoch + 1,
            cfg.epochs,
            m.lr,
            m.phase1_total,
            m.phase2_total,
            m.train_accuracy,
            m.test_accuracy.unwrap_or(f64::NAN),
            started.elapsed().as_secs_f64()
        ));
        Ok(())
    })?;
    let ckpt = out.join("model.ckpt");
    state.bundle.save(&ckpt)?;
    Ok((state.bundle, state.log))
}

fn train_cmd(c: &Common) -> Result<ExitCode> {
    let (cfg, resolved) = resolve_config(c)?;
    let data = build_data(&cfg, c)?;
    let (bundle, log_rows) = train_into(&cfg, &data, &c.out, cfg.variant.as_str())?;
    let test_accuracy = classification_accuracy(&bundle, &data.test)?;
    println!("test accuracy {:.4}", test_accuracy);
    if let Some(last) = log_rows.last() {
        println!("final train accuracy {:.4}", last.train_accuracy);
    }
    let mut artifacts = serde_json::Map::new();
    for name in ["config.json", "metrics.jsonl", "losses.jsonl", "model.ckpt", "model.json"] {
        artifacts.insert(name.into(), json!(sha256_file(&c.out.join(name))?));
    }
    debug_assert_eq!(sidecar_path(&c.out.join("model.ckpt")), c.out.join("model.json"));
    let manifest = RunManifest {
        config_path: c.config.as_ref().map(|p| p.display().to_string()),
        profile: &c.profile,
        resolved_config: &resolved,
        seed: cfg.seed,
        out: c.out.display().to_string(),
        data_dir: c.data_dir.as_ref().map(|p| p.display().to_string()),
        artifacts,
    };
    write_json(&c.out.join("manifest.json"), &manifest)?;
    Ok(ExitCode::SUCCESS)
}

fn append_line(path: &Path, value: &Value) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(value)?)?;
    Ok(())
}

fn ablate(c: &Common, seeds: &[u64], sweep: bool, ks: &[usize], no_table: bool) -> Result<ExitCode> {
    if seeds.is_empty() {
        return Err(usage("--seeds needs at least one seed"));
    }
    if sweep && ks.is_empty() {
        return Err(usage("--ks needs at least one value"));
    }
    if no_table && !sweep {
        return Err(usage("--no-table only makes sense with --sweep"));
    }
    let (base, resolved) = resolve_config(c)?;
    let data = build_data(&base, c)?;
    make_out(&c.out)?;
    write_json(&c.out.join("config.json"), &resolved)?;
    let progress = c.out.join("progress.jsonl");
    fs::write(&progress, "")?;

    if !no_table {
        let mut per_variant = Vec::new();
        for v in Variant::ALL {
            let mut accs = Vec::new();
            for &seed in seeds {
                let cfg = TrainConfig {
                    variant: v,
                    seed,
                    ..base.clone()
                };
                cfg.validate()?;
                let label = format!("{}-seed{seed}", v.as_str());
                let (bundle, _) = train_into(&cfg, &data, &c.out.join("runs").join(&label), &label)?;
                let acc = classification_accuracy(&bundle, &data.test)?;
                append_line(&progress, &json!({"variant": v, "seed": seed, "test_accuracy": acc}))?;
                log(format!("{label} test accuracy {acc:.4}"));
                accs.push(acc);
            }
            per_variant.push((v, accs));
        }
        let table = AblationTable::from_accuracies(seeds.to_vec(), per_variant);
        write_json(&c.out.join("ablation.json"), &table)?;
        fs::write(c.out.join("ablation.txt"), table.to_text())?;
        print!("{}", table.to_text());
    }

    if sweep {
        let mut cells = Vec::new();
        for s in Strategy::ALL {
            for &k in ks {
                let mut accs = Vec::new();
                for &seed in seeds {
                    let mut cfg = TrainConfig {
                        variant: Variant::Dir,
                        seed,
                        ..base.clone()
                    };
                    cfg.ba.strategy = s;
                    cfg.ba.k = k;
                    cfg.validate()?;
                    let label = format!("{}-k{k}-seed{seed}", s.as_str());
                    let (bundle, _) = train_into(&cfg, &data, &c.out.join("sweep").join(&label), &label)?;
                    let acc = classification_accuracy(&bundle, &data.test)?;
                    append_line(&progress, &json!({"strategy": s, "k": k, "seed": seed, "test_accuracy": acc}))?;
                    log(format!("{label} test accuracy {acc:.4}"));
                    accs.push(acc);
                }
                let mean = accs.iter().sum::<f64>() / accs.len() as f64;
                cells.push(SweepCell {
                    strategy: s,
                    k,
                    accuracies: accs,
                    mean,
                });
            }
        }
        let table = SweepTable {
            seeds: seeds.to_vec(),
            ks: ks.to_vec(),
            cells,
        };
        write_json(&c.out.join("sweep.json"), &table)?;
        fs::write(c.out.join("sweep.txt"), table.to_text())?;
        print!("{}", table.to_text());
    }
    Ok(ExitCode::SUCCESS)
}

/// Config for a checkpoint: --config when given, else the run's config.json.
fn checkpoint_config(c: &Common, checkpoint: &Path) -> Result<TrainConfig> {
    let beside = checkpoint.parent().map(|d| d.join("config.json"));
    let path = match (&c.config, beside) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(p)) if p.exists() => Some(p),
        _ => None,
    };
    Ok(resolve_from(c, path.as_deref())?.0)
}

fn load_checkpoint(checkpoint: &Path) -> Result<ModelBundle> {
    if !checkpoint.exists() {
        return Err(usage(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    ModelBundle::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))
}

fn eval_cmd(c: &Common, checkpoint: &Path, splits: usize) -> Result<ExitCode> {
    if splits == 0 {
        return Err(usage("--splits must be positive"));
    }
    let bundle = load_checkpoint(checkpoint)?;
    let cfg = checkpoint_config(c, checkpoint)?;
    if cfg.bundle_spec() != bundle.spec {
        return Err(usage("checkpoint architecture does not match the resolved config"));
    }
    let data = build_data(&cfg, c)?;
    let test_accuracy = classification_accuracy(&bundle, &data.test)?;
    let per_domain = per_domain_accuracy(&bundle, &data.test)?;
    let per_domain: serde_json::Map<String, Value> = per_domain
        .into_iter()
        .map(|(d, a)| (data.test.domain_tags.get(d).cloned().unwrap_or_else(|| d.to_string()), json!(a)))
        .collect();
    let retrieval = evaluate_retrieval(&bundle, splits, cfg.seed)?;
    make_out(&c.out)?;
    let report = json!({
        "checkpoint": checkpoint.display().to_string(),
        "test_accuracy": test_accuracy,
        "per_domain_accuracy": per_domain,
        "retrieval": retrieval,
        "wda": retrieval.wda,
        "threads": eval::thread_count(),
    });
    write_json(&c.out.join("eval.json"), &report)?;
    println!("test accuracy {test_accuracy:.4}");
    for d in &retrieval.datasets {
        println!(
            "{:<6} probe {:>4} gallery {:>5} rank1 {:.4} mAP {:.4}",
            d.protocol.as_str(),
            d.probe_size,
            d.gallery_size,
            d.mean.rank_k[&1],
            d.mean.map
        );
    }
    println!("WDA {:.4}", retrieval.wda);
    Ok(ExitCode::SUCCESS)
}

fn fmt_row(p: &[f64]) -> String {
    p.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

fn scm_verify(path: Option<&Path>) -> Result<ExitCode> {
    let model = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?;
            DiscreteScm::from_json(&text).map_err(|e| usage(format!("invalid SCM {}: {e}", p.display())))?
        }
        None => DiscreteScm::confounded_example(),
    };
    let report = scm::verify(&model, SCM_TOL)?;
    println!("{:<4} {:<28} {:<28} {:<28}", "s", "P(Y|S=s)", "P(Y|do(S=s))", "backdoor");
    for r in &report.rows {
        let obs = r.observational.as_deref().map(fmt_row).unwrap_or_else(|| "undefined".into());
        println!("{:<4} {:<28} {:<28} {:<28}", r.s, obs, fmt_row(&r.interventional), fmt_row(&r.backdoor));
    }
    println!("max |backdoor - interventional| = {:.3e}", report.max_backdoor_gap);
    let confounded = report
        .rows
        .iter()
        .any(|r| r.observational.as_ref().is_some_and(|o| o.iter().zip(&r.interventional).any(|(a, b)| (a - b).abs() > SCM_TOL)));
    println!("observational differs from interventional: {}", if confounded { "yes" } else { "no" });
    println!("verdict: {}", if report.pass { "PASS" } else { "FAIL" });
    Ok(if report.pass { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn export_embeddings(c: &Common, checkpoint: &Path) -> Result<ExitCode> {
    let bundle = load_checkpoint(checkpoint)?;
    let cfg = checkpoint_config(c, checkpoint)?;
    if cfg.bundle_spec() != bundle.spec {
        return Err(usage("checkpoint architecture does not match the resolved config"));
    }
    let data = build_data(&cfg, c)?;
    let dir = c.out.join("embeddings");
    make_out(&dir)?;
    for (name, ds) in [("train", &data.train), ("test", &data.test), ("heldout", &data.heldout)] {
        let (s, v) = export_latents(&bundle, ds)?;
        for (which, lat) in [("s", s), ("v", v)] {
            let path = dir.join(format!("{name}_{which}.csv"));
            write_latent_csv(File::create(&path)?, &project_2d(&lat)?, &ds.identities, &ds.domains)?;
        }
    }
    let probes = probe_report(&bundle, &data.train, &data.heldout)?;
    write_json(&dir.join("probes.json"), &probes)?;
    println!(
        "domain-from-v {:.4} class-from-s {:.4} class-from-v {:.4} domain-from-s {:.4}",
        probes.domain_from_v, probes.class_from_s, probes.class_from_v, probes.domain_from_s
    );
    Ok(ExitCode::SUCCESS)
}

fn gradcheck_cmd(c: &Common, instances: usize) -> Result<ExitCode> {
    if instances == 0 {
        return Err(usage("--instances must be positive"));
    }
    let started = Instant::now();
    let results = gradcheck::run_suite(instances, c.seed.unwrap_or(0))?;
    let mut worst: f64 = 0.0;
    for r in &results {
        let ok = r.max_rel_error < GRADCHECK_TOL;
        println!("{:<28} {:>4} instances  max rel err {:.3e}  {}", r.name, r.instances, r.max_rel_error, if ok { "ok" } else { "FAIL" });
        worst = worst.max(r.max_rel_error);
    }
    let pass = results.iter().all(|r| r.max_rel_error < GRADCHECK_TOL);
    println!(
        "{} checks, max relative error {:.3e}, {:.1}s: {}",
        results.len(),
        worst,
        started.elapsed().as_secs_f64(),
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(2) })
}
