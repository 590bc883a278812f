#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmgpl::Error;

mod commands;

#[derive(Parser)]
#[command(name = "mmgpl", version, about = "Multimodal graph prompt learning on volumetric data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Layered run configuration: defaults < MMGPL_SEED < --config file < flags.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// JSON file of dotted keys, e.g. {"graph.tau": 0.1}
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. --set train.arm=BW (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Master seed; defaults to $MMGPL_SEED, then the config file, then 0
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted-signal synthetic dataset with its concept bank
    GenData {
        /// SynthSpec JSON; omitted fields keep their defaults
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Ask a text-generation endpoint for K concepts per class
    FetchConcepts {
        #[arg(long, value_delimiter = ',', required = true)]
        classes: Vec<String>,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        /// Overrides concept_endpoint from the config
        #[arg(long)]
        endpoint: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train on every subject of a dataset and write a checkpoint
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long, required_unless_present = "print_config")]
        out: Option<PathBuf>,
        /// Print the effective configuration and exit
        #[arg(long)]
        print_config: bool,
    },
    /// Evaluate a checkpoint; prints one metrics CSV row
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Cross-validated ablation over the four arms
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Token-weight heat map of one subject (CSV + one PGM per slice)
    ExportHeatmap {
        #[command(flatten)]
        sel: SubjectArgs,
    },
    /// Token graph edge list and token × concept similarity of one subject
    ExportGraph {
        #[command(flatten)]
        sel: SubjectArgs,
        /// Drop edges below this weight
        #[arg(long, default_value_t = 0.0)]
        threshold: f32,
    },
    /// Class → activated category → concept counts for a Sankey diagram
    ExportConceptFlows {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
pub struct SubjectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub subject: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub bank: Option<PathBuf>,
}

fn exit_code(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config(_) | Error::Partition { .. } => ("config", 2),
        Error::Data(_) | Error::Bank { .. } | Error::Io { .. } | Error::Json(_) => ("data", 3),
        Error::Fetch(_) | Error::Network(_) => ("network", 4),
        Error::Numeric(_) | Error::Diff(_) => ("numeric", 5),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { spec, out, seed } => commands::gen_data(spec, out, seed),
        Command::FetchConcepts {
            classes,
            k,
            out,
            endpoint,
            cfg,
        } => commands::fetch(&classes, k, out, endpoint, &cfg),
        Command::Train {
            cfg,
            data,
            bank,
            out,
            print_config,
        } => commands::train(&cfg, data, bank, out, print_config),
        Command::Eval { ckpt, data, bank } => commands::eval(ckpt, data, bank),
        Command::Ablate { cfg, data, bank, out } => commands::ablate(&cfg, data, bank, out),
        Command::ExportHeatmap { sel } => commands::export_heatmap(&sel),
        Command::ExportGraph { sel, threshold } => commands::export_graph(&sel, threshold),
        Command::ExportConceptFlows { ckpt, data, bank, out } => commands::export_flows(ckpt, data, bank, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = exit_code(&e);
            let message = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("{}", serde_json::json!({ "error": kind, "code": code, "message": message }));
            ExitCode::from(code)
        }
    }
}
