//! `bagscan`: synthetic data, training, evaluation, split protocols,
//! baseline comparison and verification from the command line.

mod settings;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use bagscan::checkpoint::{load_checkpoint, save_checkpoint};
use bagscan::classifier::ModelKind;
use bagscan::data::{dataset_stats, gen_synthetic, load_manifest, Dataset, SynthConfig};
use bagscan::numerics::{DEFAULT_PINV_ITERS, EXACT_PINV_ITERS};
use bagscan::training::report::{history_csv, metrics_block, scores_csv, shuffled_block, temporal_block};
use bagscan::training::{
    evaluate, run_plan, run_shuffled, run_temporal, split_shuffled, split_temporal, SplitPlan, TrainConfig,
    DEFAULT_REPETITIONS,
};
use bagscan::verify::{attention_suite, entropy_suite, gradcheck_suite, Check, CURVE_MS};

use settings::{resolve, synth_settings, train_config, train_defaults, Settings};

const RESOLVED_CONFIG: &str = "resolved_config.txt";

#[derive(Parser)]
#[command(name = "bagscan", version, about = "Bag-level malware classification over instance embeddings")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (bag files, manifest, witness sidecar).
    GenSynth(GenSynthArgs),
    /// Train one model on a split of a manifest and save a checkpoint.
    Train(TrainArgs),
    /// Score a manifest (or one role of a saved split) with a checkpoint.
    Evaluate(EvaluateArgs),
    /// Repeated shuffled 80/10/10 splits; reports per-run and mean metrics.
    ProtocolShuffled(ProtocolArgs),
    /// Train on 2019, test on 2020; reports realized proportions.
    ProtocolTemporal(ProtocolArgs),
    /// Train every model kind on the same split and tabulate test metrics.
    CompareBaselines(CompareArgs),
    /// Run the verification oracles.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// key=value settings file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, visible_alias = "num-bags")]
    bags: Option<usize>,
    #[arg(long, visible_alias = "d")]
    dim: Option<usize>,
    #[arg(long)]
    bag_size_min: Option<usize>,
    #[arg(long)]
    bag_size_max: Option<usize>,
    #[arg(long)]
    witness_rate: Option<f64>,
    #[arg(long)]
    signal_shift: Option<f64>,
    #[arg(long)]
    correlation_strength: Option<f64>,
    #[arg(long)]
    positive_fraction: Option<f64>,
    #[arg(long)]
    train_year_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Flags mirroring the training configuration.
#[derive(Args, Default)]
struct TrainFlags {
    /// key=value settings file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// cmil, baseline-random, baseline-addition or baseline-average.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lookahead_k: Option<usize>,
    #[arg(long)]
    lookahead_alpha: Option<f64>,
    #[arg(long)]
    adam_beta1: Option<f64>,
    #[arg(long)]
    adam_beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    num_blocks: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    landmarks: Option<usize>,
    #[arg(long)]
    pinv_iters: Option<usize>,
    /// Comma-separated hidden widths of the readout MLP.
    #[arg(long)]
    readout_hidden: Option<String>,
    #[arg(long)]
    category_scale: Option<f64>,
    #[arg(long)]
    weight_std: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum SplitKind {
    /// Shuffled 80/10/10, first repetition.
    Shuffled,
    /// 2019 train (minus validation), 2020 test.
    Temporal,
    /// Every record is training data; no validation or test.
    All,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "shuffled")]
    split: SplitKind,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `split.csv` written by `train`; restricts scoring to `--role`.
    #[arg(long)]
    split_file: Option<PathBuf>,
    #[arg(long, default_value = "test", requires = "split_file")]
    role: String,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct ProtocolArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Shuffled protocol only.
    #[arg(long)]
    repetitions: Option<u64>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "shuffled")]
    split: SplitKind,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    gradcheck: bool,
    #[arg(long)]
    attn: bool,
    #[arg(long)]
    entropy: bool,
    /// Landmark counts of the attention error curve (repeatable).
    #[arg(long = "m", value_delimiter = ',')]
    m: Vec<usize>,
    /// Pseudo-inverse iterations for the error curve.
    #[arg(long, default_value_t = DEFAULT_PINV_ITERS)]
    pinv_iters: usize,
    /// Random joints in the entropy suite.
    #[arg(long, default_value_t = 1000)]
    joints: u64,
    /// Report the deliberately corrupted softmax backward rule as an
    /// ordinary gradient check (it fails).
    #[arg(long)]
    corrupt: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report to `<out>/verify.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl TrainFlags {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        let mut put = |k: &'static str, x: Option<String>| {
            if let Some(x) = x {
                v.push((k, x));
            }
        };
        put("model", self.model.clone());
        put("learning_rate", self.learning_rate.map(|x| x.to_string()));
        put("epochs", self.epochs.map(|x| x.to_string()));
        put("lookahead_k", self.lookahead_k.map(|x| x.to_string()));
        put("lookahead_alpha", self.lookahead_alpha.map(|x| x.to_string()));
        put("adam_beta1", self.adam_beta1.map(|x| x.to_string()));
        put("adam_beta2", self.adam_beta2.map(|x| x.to_string()));
        put("adam_eps", self.adam_eps.map(|x| x.to_string()));
        put("batch_size", self.batch_size.map(|x| x.to_string()));
        put("seed", self.seed.map(|x| x.to_string()));
        put("threshold", self.threshold.map(|x| x.to_string()));
        put("num_blocks", self.num_blocks.map(|x| x.to_string()));
        put("heads", self.heads.map(|x| x.to_string()));
        put("landmarks", self.landmarks.map(|x| x.to_string()));
        put("pinv_iters", self.pinv_iters.map(|x| x.to_string()));
        put("readout_hidden", self.readout_hidden.clone());
        put("category_scale", self.category_scale.map(|x| x.to_string()));
        put("weight_std", self.weight_std.map(|x| x.to_string()));
        v
    }

    fn resolve(&self, extra: Settings) -> Result<(TrainConfig, Settings)> {
        let mut defaults = train_defaults();
        defaults.extend(extra);
        let merged = resolve(defaults, self.config.as_deref(), self.overrides())?;
        let config = train_config(&merged)?;
        Ok((config, merged))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_resolved(dir: &Path, command: &str, mut s: Settings) -> Result<()> {
    s.insert("command".into(), command.into());
    write(dir, RESOLVED_CONFIG, &settings::render(&s))
}

fn path_setting(p: &Path) -> String {
    p.display().to_string()
}

fn cmd_gen_synth(a: &GenSynthArgs) -> Result<()> {
    let flag = |k: &'static str, v: Option<String>| v.map(|v| (k, v));
    let flags: Vec<(&str, String)> = [
        flag("num_bags", a.bags.map(|x| x.to_string())),
        flag("d", a.dim.map(|x| x.to_string())),
        flag("bag_size_min", a.bag_size_min.map(|x| x.to_string())),
        flag("bag_size_max", a.bag_size_max.map(|x| x.to_string())),
        flag("witness_rate", a.witness_rate.map(|x| x.to_string())),
        flag("signal_shift", a.signal_shift.map(|x| x.to_string())),
        flag("correlation_strength", a.correlation_strength.map(|x| x.to_string())),
        flag("positive_fraction", a.positive_fraction.map(|x| x.to_string())),
        flag("train_year_fraction", a.train_year_fraction.map(|x| x.to_string())),
        flag("seed", a.seed.map(|x| x.to_string())),
    ]
    .into_iter()
    .flatten()
    .collect();
    let merged = resolve(synth_settings(&SynthConfig::default()), a.config.as_deref(), flags)?;
    let config = settings::synth_config(&merged)?;
    let (manifest, bags) = gen_synthetic(&config, &a.out)?;
    write_resolved(&a.out, "gen-synth", merged)?;
    let witnesses: usize = bags.iter().map(|b| b.witness_count()).sum();
    println!("out={}", a.out.display());
    println!("{}", dataset_stats(&manifest)?);
    println!("witnesses={witnesses}");
    Ok(())
}

fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let m = load_manifest(manifest)?;
    info!("loading {} bags from {}", m.len(), manifest.display());
    Ok(Dataset::load(m)?)
}

fn plan_for(split: SplitKind, dataset: &Dataset, seed: u64) -> Result<(SplitPlan, String)> {
    Ok(match split {
        SplitKind::Shuffled => (split_shuffled(&dataset.manifest, seed, 1)?, "shuffled".into()),
        SplitKind::Temporal => (split_temporal(&dataset.manifest)?.plan, "temporal".into()),
        SplitKind::All => (
            SplitPlan {
                train: (0..dataset.len()).collect(),
                ..SplitPlan::fixed(0, 0, 0)
            },
            "all".into(),
        ),
    })
}

fn split_csv(plan: &SplitPlan, dataset: &Dataset) -> String {
    let mut rows: Vec<(&str, &str)> = Vec::new();
    for (role, idx) in [("train", &plan.train), ("validation", &plan.validation), ("test", &plan.test)] {
        rows.extend(idx.iter().map(|&i| (dataset.bags[i].app_id.as_str(), role)));
    }
    rows.sort();
    let mut out = String::from("app_id,role\n");
    for (id, role) in rows {
        out.push_str(&format!("{id},{role}\n"));
    }
    out
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let dataset = load_dataset(&a.manifest)?;
    let extra = Settings::from([
        ("manifest".into(), path_setting(&a.manifest)),
        ("split".into(), format!("{:?}", a.split).to_lowercase()),
    ]);
    let (config, merged) = a.train.resolve(extra)?;
    let (plan, _) = plan_for(a.split, &dataset, config.seed)?;
    create_dir(&a.out)?;
    write_resolved(&a.out, "train", merged)?;
    let outcome = bagscan::training::train(&config, &dataset.subset(&plan.train), &dataset.subset(&plan.validation))?;
    save_checkpoint(&outcome.best, a.out.join("checkpoint.bin"))?;
    write(&a.out, "history.csv", &history_csv(&outcome))?;
    write(&a.out, "split.csv", &split_csv(&plan, &dataset))?;
    println!("model={}", config.model);
    println!("best_epoch={}", outcome.best_epoch);
    if !plan.test.is_empty() {
        let eval = evaluate(&outcome.best, &dataset.subset(&plan.test), config.threshold)?;
        write(&a.out, "test_scores.csv", &scores_csv(&eval))?;
        write(&a.out, "test_metrics.txt", &metrics_block(&eval))?;
        print!("{}", metrics_block(&eval));
    }
    Ok(())
}

fn read_roles(path: &Path, role: &str) -> Result<HashSet<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some("app_id,role") {
        bail!("{} is not a split file (expected header app_id,role)", path.display());
    }
    Ok(lines
        .filter_map(|l| l.split_once(','))
        .filter(|(_, r)| *r == role)
        .map(|(id, _)| id.to_owned())
        .collect())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let dataset = load_dataset(&a.manifest)?;
    let selected: Vec<usize> = match &a.split_file {
        Some(path) => {
            let ids = read_roles(path, &a.role)?;
            (0..dataset.len()).filter(|&i| ids.contains(&dataset.bags[i].app_id)).collect()
        }
        None => (0..dataset.len()).collect(),
    };
    if selected.is_empty() {
        bail!("no records selected for evaluation");
    }
    let eval = evaluate(&model, &dataset.subset(&selected), a.threshold)?;
    create_dir(&a.out)?;
    let mut s = Settings::from([
        ("checkpoint".into(), path_setting(&a.checkpoint)),
        ("manifest".into(), path_setting(&a.manifest)),
        ("threshold".into(), a.threshold.to_string()),
        ("model".into(), model.kind().to_string()),
    ]);
    if let Some(p) = &a.split_file {
        s.insert("split_file".into(), path_setting(p));
        s.insert("role".into(), a.role.clone());
    }
    write_resolved(&a.out, "evaluate", s)?;
    write(&a.out, "scores.csv", &scores_csv(&eval))?;
    write(&a.out, "metrics.txt", &metrics_block(&eval))?;
    print!("{}", metrics_block(&eval));
    Ok(())
}

fn cmd_protocol_shuffled(a: &ProtocolArgs) -> Result<()> {
    let dataset = load_dataset(&a.manifest)?;
    let reps = a.repetitions.unwrap_or(DEFAULT_REPETITIONS);
    let extra = Settings::from([
        ("manifest".into(), path_setting(&a.manifest)),
        ("repetitions".into(), reps.to_string()),
    ]);
    let (config, merged) = a.train.resolve(extra)?;
    create_dir(&a.out)?;
    write_resolved(&a.out, "protocol-shuffled", merged)?;
    let report = run_shuffled(&config, &dataset, reps)?;
    for run in &report.runs {
        write(&a.out, &format!("scores_rep{:02}.csv", run.plan.repetition), &scores_csv(&run.evaluation))?;
    }
    let block = shuffled_block(&report);
    write(&a.out, "report.txt", &block)?;
    print!("{block}");
    Ok(())
}

fn cmd_protocol_temporal(a: &ProtocolArgs) -> Result<()> {
    if a.repetitions.is_some() {
        bail!("--repetitions applies to protocol-shuffled only");
    }
    let dataset = load_dataset(&a.manifest)?;
    let extra = Settings::from([("manifest".into(), path_setting(&a.manifest))]);
    let (config, merged) = a.train.resolve(extra)?;
    let report = run_temporal(&config, &dataset)?;
    create_dir(&a.out)?;
    write_resolved(&a.out, "protocol-temporal", merged)?;
    write(&a.out, "scores.csv", &scores_csv(&report.run.evaluation))?;
    let block = temporal_block(&report);
    write(&a.out, "report.txt", &block)?;
    print!("{block}");
    Ok(())
}

fn cmd_compare(a: &CompareArgs) -> Result<()> {
    if a.train.model.is_some() {
        bail!("compare-baselines trains every model kind; drop --model");
    }
    let dataset = load_dataset(&a.manifest)?;
    let extra = Settings::from([
        ("manifest".into(), path_setting(&a.manifest)),
        ("split".into(), format!("{:?}", a.split).to_lowercase()),
    ]);
    let (config, mut merged) = a.train.resolve(extra)?;
    merged.remove("model");
    if a.split == SplitKind::All {
        bail!("compare-baselines needs a test split (shuffled or temporal)");
    }
    let (plan, _) = plan_for(a.split, &dataset, config.seed)?;
    create_dir(&a.out)?;
    write_resolved(&a.out, "compare-baselines", merged)?;
    let mut table = String::from("model,accuracy,precision,recall,f1,tp,fp,tn,fn\n");
    for kind in ModelKind::ALL {
        let run = run_plan(&TrainConfig { model: kind, ..config.clone() }, &dataset, &plan)?;
        let m = run.evaluation.metrics;
        table.push_str(&format!(
            "{kind},{:.2},{:.2},{:.2},{:.2},{},{},{},{}\n",
            m.accuracy, m.precision, m.recall, m.f1, m.tp, m.fp, m.tn, m.fn_
        ));
        write(&a.out, &format!("scores_{kind}.csv"), &scores_csv(&run.evaluation))?;
    }
    write(&a.out, "comparison.csv", &table)?;
    print!("{table}");
    Ok(())
}

/// Returns whether every check passed.
fn cmd_verify(a: &VerifyArgs) -> Result<bool> {
    let all = !(a.gradcheck || a.attn || a.entropy);
    let mut checks: Vec<Check> = Vec::new();
    let mut lines = Vec::new();
    if all || a.gradcheck {
        checks.extend(gradcheck_suite(a.seed, a.corrupt)?);
    }
    if all || a.attn {
        let ms = if a.m.is_empty() { CURVE_MS.to_vec() } else { a.m.clone() };
        let (c, curve) = attention_suite(a.seed, &ms, a.pinv_iters)?;
        for (m, e) in &curve {
            lines.push(format!("curve m={m} pinv_iters={} mean_rel_err={e:.6e}", a.pinv_iters));
        }
        lines.push(format!("exact end point uses pinv_iters={EXACT_PINV_ITERS}"));
        checks.extend(c);
    }
    if all || a.entropy {
        checks.extend(entropy_suite(a.seed, a.joints)?);
    }
    lines.extend(checks.iter().map(Check::to_string));
    let passed = checks.iter().filter(|c| c.passed).count();
    lines.push(format!("summary: {passed}/{} checks passed", checks.len()));
    let text = lines.join("\n") + "\n";
    print!("{text}");
    if let Some(out) = &a.out {
        create_dir(out)?;
        write(out, "verify.txt", &text)?;
    }
    Ok(passed == checks.len())
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::GenSynth(a) => cmd_gen_synth(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Evaluate(a) => cmd_evaluate(a).map(|_| true),
        Command::ProtocolShuffled(a) => cmd_protocol_shuffled(a).map(|_| true),
        Command::ProtocolTemporal(a) => cmd_protocol_temporal(a).map(|_| true),
        Command::CompareBaselines(a) => cmd_compare(a).map(|_| true),
        Command::Verify(a) => cmd_verify(a),
    }
}

/// Joins the cause chain, skipping causes already quoted by their parent.
fn error_chain(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    let mut last = out.clone();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !last.contains(&text) {
            out.push_str(": ");
            out.push_str(&text);
        }
        last = text;
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            ExitCode::from(2)
        }
    }
}
