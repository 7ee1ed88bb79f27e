mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lmrcbt::kv::KvMap;
use lmrcbt::Error;

#[derive(Parser)]
#[command(name = "lmrcbt", version, about = "Unaligned multimodal emotion recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate seeded synthetic train/val/test sets.
    Synth(SynthCmd),
    /// Train on a dataset directory and write the best checkpoint.
    Train(TrainCmd),
    /// Evaluate a checkpoint on one dataset file.
    Eval(EvalCmd),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckCmd),
    /// Parameter ledger of a configuration.
    Params(ParamsCmd),
    /// Train and compare the ablation variants.
    Ablate(AblateCmd),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Named preset (mosei, mosi, iemocap or a -like synthetic variant).
    #[arg(long)]
    profile: Option<String>,
    /// Flat key=value file with model., train. and synth. keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; drives the data, init and shuffle streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Any configuration key, e.g. `--set model.ff_dim=128`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct ModelFlags {
    #[arg(long, value_name = "L|V|A")]
    fusion_target: Option<String>,
    #[arg(long, value_name = "bilstm|conv1d")]
    text_encoder: Option<String>,
    #[arg(long, value_name = "feature|time")]
    fusion_axis: Option<String>,
    #[arg(long)]
    d_f: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f64>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct SynthFlags {
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
}

#[derive(Args)]
pub struct SynthCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    synth: SynthFlags,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args)]
pub struct TrainCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
    /// Directory holding train.mmds and val.mmds.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    /// No per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
pub struct EvalCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    /// An MMDS file, or a dataset directory combined with --split.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Report file; defaults to eval_<data>.json beside the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args)]
pub struct GradcheckCmd {
    #[arg(value_enum, default_value = "all")]
    scope: ScopeArg,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    /// Flip the sign of one backward rule.
    #[arg(long, hide = true, value_name = "OP")]
    inject_fault: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScopeArg {
    Ops,
    Layers,
    Model,
    All,
}

#[derive(Args)]
pub struct ParamsCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args)]
pub struct AblateCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
    /// Directory holding train.mmds, val.mmds and test.mmds.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    /// Comma-separated variant names; defaults to the five standard arms.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

impl Common {
    fn overrides(&self, seed_sections: &[&str]) -> lmrcbt::Result<KvMap> {
        let mut m = KvMap::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set {s:?}: expected KEY=VALUE")))?;
            m.insert(k.trim().to_string(), v.trim().to_string());
        }
        if let Some(seed) = self.seed {
            for sec in seed_sections {
                m.insert(format!("{sec}.seed"), seed.to_string());
            }
        }
        Ok(m)
    }
}

fn put<T: ToString>(m: &mut KvMap, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        m.insert(key.to_string(), v.to_string());
    }
}

impl ModelFlags {
    fn apply(&self, m: &mut KvMap) {
        put(m, "model.fusion_target", &self.fusion_target);
        put(m, "model.text_encoder", &self.text_encoder);
        put(m, "model.fusion_axis", &self.fusion_axis);
        put(m, "model.d_f", &self.d_f);
        put(m, "model.heads", &self.heads);
        put(m, "model.depth", &self.depth);
    }
}

impl TrainFlags {
    fn apply(&self, m: &mut KvMap) {
        put(m, "train.epochs", &self.epochs);
        put(m, "train.lr", &self.lr);
        put(m, "train.batch_size", &self.batch_size);
        put(m, "train.grad_clip", &self.grad_clip);
    }
}

impl SynthFlags {
    fn apply(&self, m: &mut KvMap) {
        put(m, "synth.n_train", &self.n_train);
        put(m, "synth.n_val", &self.n_val);
        put(m, "synth.n_test", &self.n_test);
        put(m, "synth.noise_sigma", &self.noise_sigma);
    }
}

/// 2 configuration or validation, 3 data or schema, 4 numeric abort.
fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::Spec(_) | Error::Contract(_) => 2,
        Error::Numeric { .. } | Error::NumericAbort { .. } => 4,
        _ => 3,
    }
}

pub const GRADCHECK_FAILED: u8 = 5;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(c) => commands::synth(c),
        Command::Train(c) => commands::train(c),
        Command::Eval(c) => commands::eval(c),
        Command::Gradcheck(c) => commands::gradcheck(c),
        Command::Params(c) => commands::params(c),
        Command::Ablate(c) => commands::ablate(c),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
