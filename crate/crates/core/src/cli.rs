//! Command-line front end: `gen`, `pretrain`, `train`, `eval` and `ablate`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

use crate::error::{Result, UfpsError};
use crate::federation::{
    load_checkpoint, pretrain_teachers, run_with, save_checkpoint, CheckpointHeader, RunConfig,
};
use crate::labels::{LabelMap, Provenance};
use crate::model;
use crate::pseudolabel::{teacher_predict, Teacher, TeacherSet};
use crate::report::{evaluate_client, summarize, write_metrics_csv, write_summary, MetricRow};
use crate::synthdata::{benchmark_with, write_samples, Benchmark, ClientDataset, NUM_FOREGROUND};

pub const SEED_ENV: &str = "UFPS_SEED";

#[derive(Parser, Debug)]
#[command(name = "ufps", version, about = "Federated partially-supervised segmentation simulator")]
struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config and UFPS_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "ufps-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    /// The trained global model.
    Global,
    /// Each client's pretrained teacher alone.
    Solo,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the benchmark datasets.
    Gen,
    /// Pretrain one teacher per client.
    Pretrain,
    /// Run federated training (pretraining teachers first if needed).
    Train,
    /// Evaluate a trained model on every client's test split.
    Eval {
        /// Fill holes and drop small components before scoring.
        #[arg(long)]
        post: bool,
        #[arg(long, value_enum, default_value = "global")]
        model: ModelKind,
        /// Run id written to the metrics; defaults to the output directory name.
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Train and evaluate once per value of one config key.
    Ablate {
        /// Dotted config path, for example `scheduler.kind`.
        key: String,
        /// Comma-separated values.
        values: String,
        #[arg(long)]
        post: bool,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on configuration errors, 2 otherwise.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                1
            } else {
                2
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_path(p)?,
        None => RunConfig::default(),
    };
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| UfpsError::Config(format!("{SEED_ENV}={v:?} is not a seed")))?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| UfpsError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| UfpsError::io(path, e))
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    create_dir(&cli.out)?;
    match &cli.command {
        Command::Gen => gen(&cfg, &cli.out),
        Command::Pretrain => {
            let bench = benchmark_with(cfg.seed, cfg.split)?;
            pretrain(&cfg, &bench, &cli.out).map(|_| ())
        }
        Command::Train => {
            let bench = benchmark_with(cfg.seed, cfg.split)?;
            train(&cfg, &bench, &cli.out)
        }
        Command::Eval { post, model, run_id } => {
            let bench = benchmark_with(cfg.seed, cfg.split)?;
            let run_id = run_id.clone().unwrap_or_else(|| dir_name(&cli.out));
            let rows = evaluate(&bench, &cli.out, *model, &run_id, *post)?;
            emit(&cli.out, &rows)
        }
        Command::Ablate { key, values, post } => ablate(&cfg, &cli.out, key, values, *post),
    }
}

fn dir_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

fn gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let bench = benchmark_with(cfg.seed, cfg.split)?;
    for c in bench.all_clients() {
        for (name, d) in [("train", &c.train), ("val", &c.val), ("test", &c.test)] {
            let path = out.join(format!("client{}_{name}.ufps", c.spec.client_id));
            write_samples(&path, &d.samples, NUM_FOREGROUND)?;
        }
    }
    let specs: Vec<_> = bench.all_clients().map(|c| &c.spec).collect();
    write_text(
        &out.join("clients.json"),
        &serde_json::to_string_pretty(&specs).expect("specs serialise"),
    )
}

fn teacher_path(out: &Path, client: usize) -> PathBuf {
    out.join(format!("teacher{client}.ckpt"))
}

fn train_sets(bench: &Benchmark) -> (Vec<&ClientDataset>, Vec<&ClientDataset>) {
    (
        bench.clients.iter().map(|c| &c.train).collect(),
        bench.clients.iter().map(|c| &c.val).collect(),
    )
}

fn pretrain(cfg: &RunConfig, bench: &Benchmark, out: &Path) -> Result<TeacherSet> {
    let (train, _) = train_sets(bench);
    let teachers = pretrain_teachers(&train, cfg)?;
    let hash = cfg.hash();
    for (t, d) in teachers.teachers().iter().zip(&train) {
        let mut header = CheckpointHeader::new(&hash, 0, t.params.layout());
        header.owned = Some(t.owned);
        save_checkpoint(&teacher_path(out, d.client_id), &header, &t.params)?;
    }
    write_text(&out.join("config.json"), &cfg.to_json())?;
    Ok(teachers)
}

/// Teachers saved under `out` by a run with the same configuration.
fn load_teachers(bench: &Benchmark, out: &Path, hash: Option<&str>) -> Result<Option<TeacherSet>> {
    let mut teachers = Vec::new();
    for c in &bench.clients {
        let path = teacher_path(out, c.spec.client_id);
        if !path.exists() {
            return Ok(None);
        }
        let (header, params) = load_checkpoint(&path)?;
        if hash.is_some_and(|h| h != header.config_hash) {
            return Ok(None);
        }
        let owned = header.owned.ok_or_else(|| UfpsError::Format {
            path: path.clone(),
            reason: "teacher checkpoint lists no classes".into(),
        })?;
        teachers.push(Teacher { params, owned });
    }
    TeacherSet::ascending(teachers).map(Some)
}

fn train(cfg: &RunConfig, bench: &Benchmark, out: &Path) -> Result<()> {
    let hash = cfg.hash();
    let teachers = if cfg.modules.pseudo_labels {
        match load_teachers(bench, out, Some(&hash))? {
            Some(t) => Some(t),
            None => Some(pretrain(cfg, bench, out)?),
        }
    } else {
        None
    };
    let (train, val) = train_sets(bench);
    let mut log = String::from("round,client,val_dice,train_loss\n");
    let art = run_with(cfg, &train, &val, teachers.as_ref(), |r| {
        for (k, d) in train.iter().enumerate() {
            log.push_str(&format!(
                "{},{},{},{}\n",
                r.round, d.client_id, r.val_dice[k], r.train_loss[k]
            ));
        }
    })?;
    write_text(&out.join("history.csv"), &log)?;
    write_text(&out.join("config.json"), &cfg.to_json())?;
    let layout = art.final_global.layout();
    save_checkpoint(
        &out.join("global.ckpt"),
        &CheckpointHeader::new(&hash, art.best_round, layout),
        &art.best_global,
    )?;
    save_checkpoint(
        &out.join("final.ckpt"),
        &CheckpointHeader::new(&hash, cfg.rounds, layout),
        &art.final_global,
    )
}

fn evaluate(
    bench: &Benchmark,
    out: &Path,
    kind: ModelKind,
    run_id: &str,
    post: bool,
) -> Result<Vec<MetricRow>> {
    let classes: Vec<u8> = (1..=NUM_FOREGROUND as u8).collect();
    let mut rows = Vec::new();
    match kind {
        ModelKind::Global => {
            let (header, params) = load_checkpoint(&out.join("global.ckpt"))?;
            for c in bench.all_clients() {
                rows.extend(evaluate_client(
                    run_id,
                    header.round,
                    c.spec.client_id,
                    &c.test.samples,
                    &classes,
                    post,
                    |img| {
                        let pred = model::predict(&params, img)?;
                        LabelMap::uniform(img.width(), img.height(), pred, Provenance::Pseudo)
                    },
                )?);
            }
        }
        ModelKind::Solo => {
            let teachers = load_teachers(bench, out, None)?.ok_or_else(|| {
                UfpsError::Config(format!("no teacher checkpoints in {}", out.display()))
            })?;
            // Each in-federation client scores its own teacher on its own test split.
            for (c, t) in bench.clients.iter().zip(teachers.teachers()) {
                rows.extend(evaluate_client(
                    run_id,
                    0,
                    c.spec.client_id,
                    &c.test.samples,
                    &classes,
                    post,
                    |img| teacher_predict(t, img).map(|(m, _)| m),
                )?);
            }
        }
    }
    Ok(rows)
}

fn emit(out: &Path, rows: &[MetricRow]) -> Result<()> {
    write_metrics_csv(&out.join("metrics.csv"), rows)?;
    write_summary(&out.join("summary.json"), &summarize(rows))
}

/// Returns `cfg` with the dotted `key` set to `raw`, parsed as JSON when
/// possible and as a string otherwise.
pub fn override_key(cfg: &RunConfig, key: &str, raw: &str) -> Result<RunConfig> {
    let mut doc = serde_json::to_value(cfg).expect("config serialises");
    let mut slot = &mut doc;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| UfpsError::Config(format!("unknown config key {key:?}")))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let updated: RunConfig = serde_json::from_value(doc)
        .map_err(|e| UfpsError::Config(format!("{key}={raw}: {e}")))?;
    updated.validate()?;
    Ok(updated)
}

fn ablate(cfg: &RunConfig, out: &Path, key: &str, values: &str, post: bool) -> Result<()> {
    let variants = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| Ok((v.to_string(), override_key(cfg, key, v)?)))
        .collect::<Result<Vec<_>>>()?;
    if variants.is_empty() {
        return Err(UfpsError::Config("ablate needs at least one value".into()));
    }
    let bench = benchmark_with(cfg.seed, cfg.split)?;
    let mut all_rows = Vec::new();
    for (value, variant) in variants {
        let run_id = format!("{key}={value}");
        let dir = out.join(&run_id);
        create_dir(&dir)?;
        train(&variant, &bench, &dir)?;
        let rows = evaluate(&bench, &dir, ModelKind::Global, &run_id, post)?;
        emit(&dir, &rows)?;
        all_rows.extend(rows);
    }
    emit(out, &all_rows)
}
