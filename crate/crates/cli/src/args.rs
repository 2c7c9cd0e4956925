use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "overdilute", version, about = "Over-dilution analysis and NATR training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Dilution factors, receptive fields and histograms of a dataset.
    Analyze(AnalyzeArgs),
    /// Train one model per seed and summarise.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Class-key synthetic attributes on top of a labelled base graph.
    Synth(SynthArgs),
    /// Write the bundled Cora-ML-sized stand-in dataset.
    GenBase(GenBaseArgs),
    /// Re-execute the command recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub hops: usize,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    /// Trained checkpoint for Jacobian-based factors.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Number of nodes (lowest ids) probed by the Jacobian oracle.
    #[arg(long, default_value_t = 32)]
    pub oracle_nodes: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Link,
    Nodeclass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Replace encoder self-attention by its FFN block only.
    MlpEncoder,
    /// Train on the final decoder output only.
    NoAux,
    /// Jumping-knowledge readout for baselines.
    Jk,
}

#[derive(Args, Debug, Clone)]
pub struct SplitArgs {
    /// Link split ratios train,valid,test.
    #[arg(long, default_value = "0.85,0.05,0.10")]
    pub split: String,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "natr-gcn")]
    pub model: String,
    #[arg(long, value_enum, default_value_t = TaskArg::Link)]
    pub task: TaskArg,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0")]
    pub seeds: String,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0.005)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
    #[arg(long, default_value_t = 2)]
    pub enc_layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 512)]
    pub d_ffn: usize,
    #[arg(long, default_value_t = 1)]
    pub gat_heads: usize,
    #[arg(long, default_value_t = 2)]
    pub sgc_k: usize,
    #[arg(long, default_value = "none")]
    pub lambda: String,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub ablate: Vec<Ablation>,
    #[arg(long, default_value_t = 2000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 200)]
    pub patience: usize,
    /// 10000 epochs with patience 1000.
    #[arg(long)]
    pub paper_protocol: bool,
    /// Add Hits@K on the Q1/Q4 dilution edge subsets.
    #[arg(long)]
    pub subsets: bool,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub subsets: bool,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Labelled base dataset providing topology and classes.
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub keys_per_class: usize,
    #[arg(long, default_value_t = 0.8)]
    pub p_key: f64,
    #[arg(long, default_value_t = 0.2)]
    pub p_nonkey: f64,
    /// Total attributes including the key block.
    #[arg(long, default_value_t = overdilute::data::CORA_LIKE_ATTRIBUTES)]
    pub total_attributes: usize,
    /// Node split sizes train,valid,test.
    #[arg(long, default_value = "1000,210,1785")]
    pub splits: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenBaseArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RerunArgs {
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> anyhow::Result<Vec<T>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| anyhow::anyhow!("bad {what} entry `{x}` in `{s}`"))
        })
        .collect()
}
