//! Command-line front end. Exit codes: 0 success, 1 failed check or run,
//! 2 usage or configuration error.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::attention::OperatorKind;
use crate::checkpoint::write_checkpoint;
use crate::compare::{combined_csv, load_run, render_summary, summarize, summary_csv, TRACE_CSV, TRACE_JSON};
use crate::data::{generate_corpus, theoretical_floor, CorpusSpec, MaskMode, TOY_CORPUS_SEQUENCES};
use crate::error::{Error, Result};
use crate::manifest::RunManifest;
use crate::model::{build_model, count_params, ModelConfig};
use crate::train::{train, RunTrace, TrainConfig};
use crate::verify::{run_suite, savings_percent, CheckResult, Suite, REFERENCE_COUNTS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "symattn", version, about = "Symmetric and pairwise attention: counts, checks, toy MLM training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print parameter counts and savings relative to the original operator.
    Params(ParamsArgs),
    /// Run invariant suites and report the worst error of each.
    Verify(VerifyArgs),
    /// Pre-train a small encoder on a synthetic Markov corpus.
    Train(TrainArgs),
    /// Summarize training runs that share seed and schedule.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Selector {
    Small,
    Base,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OperatorChoice {
    Original,
    Symmetric,
    Pairwise,
    All,
}

impl OperatorChoice {
    fn kinds(self) -> Vec<OperatorKind> {
        match self {
            Self::Original => vec![OperatorKind::Original],
            Self::Symmetric => vec![OperatorKind::Symmetric],
            Self::Pairwise => vec![OperatorKind::Pairwise],
            Self::All => OperatorKind::ALL.to_vec(),
        }
    }
}

/// Architecture overrides shared by `params custom` and `train`.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelFlags {
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub intermediate: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub max_positions: Option<usize>,
    #[arg(long)]
    pub type_vocab: Option<usize>,
}

impl ModelFlags {
    fn apply(&self, mut c: ModelConfig) -> ModelConfig {
        c.n_layers = self.layers.unwrap_or(c.n_layers);
        c.n_heads = self.heads.unwrap_or(c.n_heads);
        c.hidden = self.hidden.unwrap_or(c.hidden);
        c.intermediate = self.intermediate.unwrap_or(c.intermediate);
        c.vocab_size = self.vocab.unwrap_or(c.vocab_size);
        c.max_positions = self.max_positions.unwrap_or(c.max_positions);
        c.type_vocab_size = self.type_vocab.unwrap_or(c.type_vocab_size);
        c
    }
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// `custom` starts from bert-base and applies the architecture flags.
    #[arg(value_enum)]
    pub selector: Selector,
    #[arg(long, value_enum, default_value = "all")]
    pub operator: OperatorChoice,
    #[command(flatten)]
    pub model: ModelFlags,
    /// Also write the table as CSV (with a `.manifest.json` beside it).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Exit 1 unless preset counts equal the golden totals; for `custom`,
    /// unless the closed form equals the scalars `build_model` allocates.
    #[arg(long)]
    pub check: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SuiteChoice {
    Algebra,
    Gradients,
    Counts,
    All,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(value_enum)]
    pub suite: SuiteChoice,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Toy recipe peak lr 3e-3; without it the schedule peaks at 1e-4. The
    /// model and corpus default to the toy shapes either way.
    #[arg(long)]
    pub toy: bool,
    #[arg(long, value_enum, default_value = "original")]
    pub operator: OperatorChoice,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub peak_lr: Option<f64>,
    /// Defaults to 5% of `--steps`.
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub mask_prob: Option<f64>,
    #[arg(long, value_enum)]
    pub mask_mode: Option<MaskModeChoice>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub eval_batches: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub markov_order: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Corpus size, including the held-out tail.
    #[arg(long)]
    pub sequences: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MaskModeChoice {
    Bert,
    AllMask,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Run directories or their trace CSVs (a `trace.json` must sit beside each).
    #[arg(required = true, num_args = 2..)]
    pub runs: Vec<PathBuf>,
    /// Directory for `comparison.csv`, `summary.csv` and `manifest.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match &cli.command {
        Command::Params(a) => cmd_params(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Compare(a) => cmd_compare(a).map(|_| true),
    };
    match outcome {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Incompatible(_) => EXIT_USAGE,
                _ => EXIT_FAILURE,
            }
        }
    }
}

/// `28795194` → `28,795,194`.
pub fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn params_config(a: &ParamsArgs, kind: OperatorKind) -> ModelConfig {
    match a.selector {
        Selector::Small => ModelConfig::bert_small(kind),
        Selector::Base => ModelConfig::bert_base(kind),
        Selector::Custom => a.model.apply(ModelConfig::bert_base(kind)),
    }
}

/// Returns `Ok(false)` when `--check` finds a discrepancy.
pub fn cmd_params(a: &ParamsArgs) -> Result<bool> {
    let label = match a.selector {
        Selector::Small => "bert-small",
        Selector::Base => "bert-base",
        Selector::Custom => "custom",
    };
    let original = count_params(&params_config(a, OperatorKind::Original))?;
    let mut ok = true;
    let mut csv = String::from("config,operator,params,savings_pct\n");
    println!("{:<11} {:<10} {:>14} {:>9}", "config", "operator", "params", "saved");
    for kind in a.operator.kinds() {
        let config = params_config(a, kind);
        let count = count_params(&config)?;
        let saved = if kind == OperatorKind::Original {
            "-".to_string()
        } else {
            savings_percent(count, original)
        };
        println!("{label:<11} {:<10} {:>14} {saved:>9}", kind.as_str(), thousands(count));
        csv.push_str(&format!("{label},{kind},{count},{}\n", saved.trim_end_matches('%')));
        if a.check {
            let expected = REFERENCE_COUNTS.iter().find(|(p, k, _)| *p == label && *k == kind).map(|t| t.2);
            let reference = match expected {
                Some(v) => v,
                None => build_model(&config, 0)?.allocated_scalars(),
            };
            if reference != count {
                eprintln!("check failed: {label} {kind}: {count} != {reference}");
                ok = false;
            }
        }
    }
    if let Some(path) = &a.csv {
        fs::write(path, &csv)?;
        let configs: Vec<ModelConfig> = a.operator.kinds().into_iter().map(|k| params_config(a, k)).collect();
        let mut manifest = RunManifest::new("params", None, json!({ "selector": label, "models": configs }));
        manifest.outputs.push(path.display().to_string());
        fs::write(
            sidecar(path),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
    }
    if a.check {
        println!("check: {}", if ok { "PASS" } else { "FAIL" });
    }
    Ok(ok)
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

pub fn cmd_verify(a: &VerifyArgs) -> Result<bool> {
    let suites = match a.suite {
        SuiteChoice::Algebra => vec![Suite::Algebra],
        SuiteChoice::Gradients => vec![Suite::Gradients],
        SuiteChoice::Counts => vec![Suite::Counts],
        SuiteChoice::All => vec![Suite::Algebra, Suite::Gradients, Suite::Counts],
    };
    let mut results: Vec<CheckResult> = Vec::new();
    for suite in suites {
        println!("== {suite:?}");
        for r in run_suite(suite)? {
            println!("{r}");
            results.push(r);
        }
    }
    let passed = results.iter().filter(|r| r.pass).count();
    println!("{passed}/{} checks passed", results.len());
    Ok(passed == results.len())
}

/// Everything `train` needs, resolved from flags.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusSpec,
    pub n_sequences: usize,
}

pub fn resolve_train(a: &TrainArgs) -> Result<TrainPlan> {
    let kind = match a.operator {
        OperatorChoice::All => {
            return Err(Error::Config("train takes a single operator; run once per operator".into()))
        }
        other => other.kinds()[0],
    };
    let mut model = a.model.apply(ModelConfig::toy(kind));
    model.dropout = a.dropout.unwrap_or(model.dropout);
    let mut train = if a.toy { TrainConfig::toy(a.seed) } else { TrainConfig { seed: a.seed, ..TrainConfig::default() } };
    if let Some(steps) = a.steps {
        train.steps = steps;
        train.warmup_steps = (steps as f64 * 0.05).round() as usize;
    }
    train.warmup_steps = a.warmup_steps.unwrap_or(train.warmup_steps);
    train.batch_size = a.batch_size.unwrap_or(train.batch_size);
    train.peak_lr = a.peak_lr.unwrap_or(train.peak_lr);
    train.weight_decay = a.weight_decay.unwrap_or(train.weight_decay);
    train.mask_prob = a.mask_prob.unwrap_or(train.mask_prob);
    train.eval_every = a.eval_every.unwrap_or(train.eval_every);
    train.eval_batches = a.eval_batches.unwrap_or(train.eval_batches);
    if let Some(m) = a.mask_mode {
        train.mask_mode = match m {
            MaskModeChoice::Bert => MaskMode::Bert,
            MaskModeChoice::AllMask => MaskMode::AllMask,
        };
    }
    let mut corpus = CorpusSpec::toy(a.seed);
    corpus.vocab_size = model.vocab_size;
    corpus.seq_len = a.seq_len.unwrap_or(corpus.seq_len.min(model.max_positions));
    corpus.markov_order = a.markov_order.unwrap_or(corpus.markov_order);
    corpus.transition_temperature = a.temperature.unwrap_or(corpus.transition_temperature);
    let n_sequences = a
        .sequences
        .unwrap_or(TOY_CORPUS_SEQUENCES.max(2 * train.eval_batches * train.batch_size));
    model.validate()?;
    train.validate()?;
    corpus.validate()?;
    Ok(TrainPlan {
        model,
        train,
        corpus,
        n_sequences,
    })
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CORPUS_FILE: &str = "corpus.bin";

/// Writes `trace.csv`, `trace.json`, `checkpoint.bin`, `corpus.bin` and
/// `manifest.json` into `--out`.
pub fn cmd_train(a: &TrainArgs) -> Result<RunTrace> {
    let plan = resolve_train(a)?;
    fs::create_dir_all(&a.out)?;
    let corpus = generate_corpus(&plan.corpus, plan.n_sequences)?;
    let mut model = build_model(&plan.model, a.seed)?;
    eprintln!(
        "training {} for {} steps (corpus floor {:.4} nats)",
        plan.model.operator,
        plan.train.steps,
        theoretical_floor(&plan.corpus)?
    );
    let trace = train(&mut model, &corpus, &plan.train)?;

    let out = &a.out;
    fs::write(out.join(TRACE_CSV), trace.to_csv())?;
    fs::write(out.join(TRACE_JSON), trace.to_json()? + "\n")?;
    write_checkpoint(&model, BufWriter::new(File::create(out.join(CHECKPOINT_FILE))?))?;
    corpus.write_to(BufWriter::new(File::create(out.join(CORPUS_FILE))?))?;
    let mut manifest = RunManifest::new(
        "train",
        Some(a.seed),
        json!({
            "model": plan.model,
            "train": plan.train,
            "corpus": plan.corpus,
            "n_sequences": plan.n_sequences,
            "lr_schedule": trace.meta.lr_schedule,
        }),
    );
    manifest.outputs = [TRACE_CSV, TRACE_JSON, CHECKPOINT_FILE, CORPUS_FILE].map(String::from).to_vec();
    manifest.write(out)?;

    for r in &trace.records {
        println!("step {:>6}  train {:>10.6}  eval {:>10.6}  lr {:.3e}", r.step, r.train_loss, r.eval_loss, r.lr);
    }
    println!("batch digest: {}", trace.meta.data_digest);
    println!(
        "eval loss {:.6} -> {:.6} in {:.1}s",
        trace.initial_eval(),
        trace.final_eval(),
        trace.meta.wall_clock_secs
    );
    Ok(trace)
}

pub fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let runs = a.runs.iter().map(|p| load_run(p)).collect::<Result<Vec<_>>>()?;
    let rows = summarize(&runs)?;
    print!("{}", render_summary(&rows));
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("comparison.csv"), combined_csv(&runs))?;
        fs::write(out.join("summary.csv"), summary_csv(&rows))?;
        let mut manifest = RunManifest::new(
            "compare",
            Some(runs[0].meta.train.seed),
            json!({ "runs": a.runs, "convergence_fraction": 0.95, "plateau_margin": 0.05 }),
        );
        manifest.outputs = vec!["comparison.csv".into(), "summary.csv".into()];
        manifest.write(out)?;
    }
    Ok(())
}
