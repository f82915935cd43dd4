//! `mil`: generate synthetic benchmarks, train methods over a modality
//! sequence, evaluate checkpoints and aggregate reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mil_core::checkpoint::{load_checkpoint, load_manifest as load_checkpoint_manifest, save_checkpoint};
use mil_core::data::{generate_benchmark, load_manifest, BenchmarkSpec, DatasetManifest, PhaseDataset};
use mil_core::evaluation::{average_accuracy, eval_accuracy, late_fusion_accuracy, EvalReport};
use mil_core::trainer::{run_sequence, PhaseEnd, RunHooks, TrainReport};
use mil_core::{Method, MilError, ModelConfig, Result};

#[derive(Parser)]
#[command(name = "mil", version, about = "Modality-incremental learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic benchmark.
    Generate(GenerateArgs),
    /// Train a method over the phase sequence and evaluate it.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on a dataset.
    Eval(EvalArgs),
    /// Aggregate finished runs into comparison tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Benchmark spec (JSON); defaults to the built-in desk benchmark.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite an existing dataset.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory or manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    /// Falls back to MIL_SEED, then to the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated modality names.
    #[arg(long, value_delimiter = ',')]
    phase_order: Option<Vec<String>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lambda_align: Option<f64>,
    #[arg(long)]
    lambda_g: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory produced by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint phase; defaults to the last one.
    #[arg(long)]
    phase: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories produced by `train`.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write per-epoch loss curves.
    #[arg(long)]
    curves: bool,
}

/// Experiment file: model hyperparameters plus optional run settings that
/// command-line flags override.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExperimentConfig {
    model: ModelConfig,
    method: Option<String>,
    data: Option<PathBuf>,
    phase_order: Option<Vec<String>>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| MilError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| MilError::json(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| MilError::json(path, e))?;
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| MilError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| MilError::io(path, e))
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(p) => read_json::<BenchmarkSpec>(p)?,
        None => BenchmarkSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    generate_benchmark(&spec, &args.out, args.force)?;
    println!("{}", args.out.join(mil_core::data::MANIFEST_FILE).display());
    Ok(())
}

fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("MIL_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| MilError::config("MIL_SEED", format!("not an unsigned integer: {v:?}"))),
        Err(_) => Ok(fallback),
    }
}

fn phase_datasets(manifest: &DatasetManifest, order: &[String]) -> Result<Vec<PhaseDataset>> {
    let mut seen = std::collections::BTreeSet::new();
    for m in order {
        if !seen.insert(m) {
            return Err(MilError::config("phase_order", format!("modality {m:?} listed twice")));
        }
        manifest.modality(m)?;
    }
    order.iter().map(|m| manifest.load_phase(m)).collect()
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut exp = match &args.config {
        Some(p) => read_json::<ExperimentConfig>(p)?,
        None => ExperimentConfig::default(),
    };
    let cfg = &mut exp.model;
    cfg.seed = resolve_seed(args.seed, cfg.seed)?;
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.lambda_align {
        cfg.lambda_align = v;
    }
    if let Some(v) = args.lambda_g {
        cfg.lambda_g = v;
    }
    let method_id = args
        .method
        .or(exp.method.clone())
        .ok_or_else(|| MilError::config("method", format!("missing --method; valid methods: {}", Method::valid_ids())))?;
    let method: Method = method_id.parse()?;
    let data = args
        .data
        .or(exp.data.clone())
        .ok_or_else(|| MilError::config("data", "missing --data"))?;
    let manifest = load_manifest(&data)?;
    if cfg.num_classes != manifest.num_classes {
        cfg.num_classes = manifest.num_classes;
    }
    cfg.validate()?;
    let order = args
        .phase_order
        .or(exp.phase_order.clone())
        .unwrap_or_else(|| manifest.modality_names());
    let phases = phase_datasets(&manifest, &order)?;
    let paired = match manifest.paired_test_ids {
        Some(_) => Some(manifest.load_paired_test(&order)?),
        None => None,
    };

    let out = &args.out;
    let ckpt_dir = out.join("checkpoints");
    let reports_dir = out.join("reports");
    let mut on_phase_end = |end: &PhaseEnd| -> Result<()> {
        save_checkpoint(end.model, &ckpt_dir, end.phase, end.modality)?;
        write_json(&reports_dir.join(format!("train_phase_{}.json", end.phase)), end.report)?;
        let last = end.report.epochs.last();
        eprintln!(
            "phase {} ({}): loss {:.4}, val {:.2}%",
            end.phase,
            end.modality,
            last.map_or(f64::NAN, |e| e.total),
            last.map_or(f64::NAN, |e| e.val_accuracy)
        );
        Ok(())
    };
    let hooks = RunHooks {
        on_step: None,
        on_phase_end: Some(&mut on_phase_end),
    };
    let outcome = run_sequence(method, &phases, &exp.model, paired.as_ref(), hooks)?;
    let eval = outcome.eval;
    write_json(&reports_dir.join("eval.json"), &eval)?;
    let tables = out.join("tables");
    write_text(&tables.join("s_matrix.csv"), &eval.s_csv())?;
    write_text(&tables.join("summary.md"), &eval.markdown())?;
    write_text(&tables.join("loss_curves.csv"), &loss_curves(method.as_str(), &outcome.reports))?;
    print!("{}", eval.markdown());
    Ok(())
}

fn loss_curves(run: &str, reports: &[TrainReport]) -> String {
    let mut out = String::from("run,phase,modality,epoch,cls,align,direct,contrastive,distribution,penalty,total,val_accuracy\n");
    for r in reports {
        for e in &r.epochs {
            out.push_str(&format!(
                "{run},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.phase, r.modality, e.epoch, e.cls, e.align, e.direct, e.contrastive, e.distribution, e.penalty, e.total, e.val_accuracy
            ));
        }
    }
    out
}

#[derive(Serialize)]
struct EvalOutput {
    phase: usize,
    accuracy: Vec<(String, f64)>,
    average: f64,
    a_multi: Option<f64>,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = args.run.join("checkpoints");
    let phase = match args.phase {
        Some(p) => p,
        None => (1..)
            .take_while(|p| ckpt.join(format!("phase_{p}.json")).exists())
            .last()
            .ok_or_else(|| MilError::Data(format!("no checkpoints under {}", ckpt.display())))?,
    };
    let model = load_checkpoint(&ckpt, phase)?;
    let manifest = load_manifest(&args.data)?;
    // modalities seen up to `phase`, in training order
    let order: Vec<String> = (1..=phase)
        .map(|p| load_checkpoint_manifest(&ckpt, p).map(|m| m.modality))
        .collect::<Result<_>>()?;
    let mut accuracy = Vec::new();
    for m in &order {
        let test = manifest.load_split(m, mil_core::data::SplitKind::Test)?;
        accuracy.push((m.clone(), eval_accuracy(&model, m, &test)?));
    }
    let average = accuracy.iter().map(|(_, a)| a).sum::<f64>() / accuracy.len() as f64;
    let a_multi = match manifest.paired_test_ids {
        Some(_) => Some(late_fusion_accuracy(&model, &manifest.load_paired_test(&order)?, model.config.fusion)?),
        None => None,
    };
    let out = EvalOutput {
        phase,
        accuracy,
        average,
        a_multi,
    };
    println!("{}", serde_json::to_string_pretty(&out).expect("serialisable"));
    Ok(())
}

fn load_run(dir: &Path) -> Result<EvalReport> {
    let path = dir.join("reports").join("eval.json");
    let report: EvalReport = read_json(&path).map_err(|e| MilError::Data(format!("run {}: {e}", dir.display())))?;
    for m in 1..=report.s.phases() {
        let aa = average_accuracy(&report.s, m)?;
        let stored = report.aa.get(m - 1).copied().unwrap_or(f64::NAN);
        if !((aa - stored).abs() <= 1e-6) {
            return Err(MilError::Data(format!(
                "run {}: AA_{m} stored as {stored}, S-matrix gives {aa}",
                dir.display()
            )));
        }
    }
    Ok(report)
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let mut runs = Vec::new();
    for dir in &args.runs {
        runs.push((dir.clone(), load_run(dir)?));
    }
    let phases = runs.iter().map(|(_, r)| r.s.phases()).max().unwrap_or(0);
    let mut csv = String::from("run,method,seed,AA,A_multi");
    let mut md = String::from("| run | method | seed | AA | A_multi |");
    for m in 1..=phases {
        for n in 1..=m {
            csv.push_str(&format!(",S{m}{n}"));
            md.push_str(&format!(" S{m}{n} |"));
        }
    }
    csv.push('\n');
    md.push_str("\n|---|---|---|---|---|");
    for _ in 0..phases * (phases + 1) / 2 {
        md.push_str("---|");
    }
    md.push('\n');
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.2}"));
    for (dir, r) in &runs {
        let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        let aa = fmt(r.final_aa());
        let am = fmt(r.a_multi);
        csv.push_str(&format!("{name},{},{},{aa},{am}", r.method, r.seed));
        md.push_str(&format!("| {name} | {} | {} | {aa} | {am} |", r.method, r.seed));
        for m in 1..=phases {
            for n in 1..=m {
                let v = fmt(r.s.get(m, n));
                csv.push_str(&format!(",{v}"));
                md.push_str(&format!(" {v} |"));
            }
        }
        csv.push('\n');
        md.push('\n');
    }
    let tables = args.out.join("tables");
    write_text(&tables.join("comparison.csv"), &csv)?;
    write_text(&tables.join("comparison.md"), &md)?;
    if args.curves {
        let mut all = String::new();
        for (i, (dir, r)) in runs.iter().enumerate() {
            let mut reports = Vec::new();
            for p in 1..=r.s.phases() {
                let path = dir.join("reports").join(format!("train_phase_{p}.json"));
                reports.push(read_json::<TrainReport>(&path).map_err(|e| MilError::Data(format!("run {}: {e}", dir.display())))?);
            }
            let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
            let body = loss_curves(&name, &reports);
            all.push_str(if i == 0 { &body } else { body.split_once('\n').map_or("", |(_, b)| b) });
        }
        write_text(&tables.join("loss_curves.csv"), &all)?;
    }
    print!("{md}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
