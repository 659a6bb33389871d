use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod report;

/// Box-regression losses, routing attention and detection metrics.
#[derive(Debug, Parser)]
#[command(name = "detnum", version)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores). Results do
    /// not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score a detections file against a directory of label files.
    Eval(EvalArgs),
    /// Instance counts and inverse-frequency class weights of a label directory.
    DatasetStats(StatsArgs),
    /// Seeded train/val split of a label directory.
    Split(SplitArgs),
    /// Box-fitting benchmark comparing regression losses.
    LossBench(BenchArgs),
    /// Run routing attention on a feature-map file.
    BraDemo(BraArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Write a small synthetic label set with its manifest.
    GenMinidata(MinidataArgs),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of ground-truth label files.
    #[arg(long)]
    pub labels: PathBuf,
    /// Detections file, one `image_id category_id confidence cx cy w h` per line.
    #[arg(long)]
    pub detections: PathBuf,
    /// IoU threshold for the per-category table.
    #[arg(long, default_value_t = 0.5)]
    pub iou_threshold: f64,
    /// Also write the report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Directory receiving `train.txt` and `val.txt`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub ratio_train: usize,
    #[arg(long, default_value_t = 1)]
    pub ratio_val: usize,
}

#[derive(Debug, Args)]
pub struct WiouArgs {
    #[arg(long, default_value_t = 1.9)]
    pub alpha: f64,
    #[arg(long, default_value_t = 3.0)]
    pub delta: f64,
    #[arg(long, default_value_t = 0.5)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.01)]
    pub momentum: f64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub problems: usize,
    /// Comma-separated loss keywords: l1, iou, giou, wiou1, wiou2, wiou3.
    #[arg(long, default_value = "iou,giou,wiou1,wiou2,wiou3")]
    pub losses: String,
    #[arg(long, default_value_t = detnum::bench::DEFAULT_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = detnum::bench::DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    #[command(flatten)]
    pub wiou: WiouArgs,
    /// Directory for `results.csv`, `summary.csv` and traces.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Problem ids whose per-iteration traces are written (needs --out).
    #[arg(long, value_delimiter = ',')]
    pub trace_ids: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct BraArgs {
    /// Feature map: header `H W C`, then H*W*C numbers in row-major order.
    #[arg(long)]
    pub input: PathBuf,
    /// Output feature map.
    #[arg(long)]
    pub out: PathBuf,
    /// Routing dump, one `region: routed regions` line per region.
    #[arg(long)]
    pub routing: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub regions: usize,
    #[arg(long, default_value_t = 1)]
    pub topk: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    /// Logit scale (default 1/sqrt(C/heads)).
    #[arg(long)]
    pub scale: Option<f64>,
    /// Seed for the random projections.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use identity projections instead of random ones.
    #[arg(long)]
    pub identity: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random cases per checked op.
    #[arg(long, default_value_t = 500)]
    pub cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MinidataArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub images: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Eval(a) => commands::eval(a),
        Command::DatasetStats(a) => commands::dataset_stats(a),
        Command::Split(a) => commands::split(a),
        Command::LossBench(a) => commands::loss_bench(a, cli.threads),
        Command::BraDemo(a) => commands::bra_demo(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::GenMinidata(a) => commands::gen_minidata(a),
    };
    match result {
        Ok(commands::Outcome::Ok) => ExitCode::SUCCESS,
        Ok(commands::Outcome::CheckFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
