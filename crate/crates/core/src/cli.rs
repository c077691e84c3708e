//! Command-line driver.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::anchors::item_entropy;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::CliConfig;
use crate::corpus::{
    augment, generate_synthetic, load_sessions, preprocess, remap_to_vocab, split_by_session,
    write_sessions, SessionFormat, SynthConfig,
};
use crate::error::{Error, Result};
use crate::graph::{build_graph, save_graph};
use crate::metrics::{evaluate_ranker, item_tables, Metrics, ModelRanker, PopRanker, SPopRanker};
use crate::train::{train_with_progress, RefreshMode};

const PRECEDENCE: &str = "Settings resolve as: command-line flags, then the --config file, then built-in defaults.";

#[derive(Parser, Debug)]
#[command(name = "gsnias", version, about = "Session-based next-item recommendation", after_help = PRECEDENCE)]
struct Cli {
    /// Random seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (1 gives the reference single-threaded run)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// key = value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter rare items and short sessions; optionally split off a test set
    Preprocess(PreprocessArgs),
    /// Write the co-occurrence item graph as an edge list
    BuildGraph(GraphArgs),
    /// Print items ranked by entropy
    Entropy(EntropyArgs),
    /// Generate a category-structured synthetic corpus
    Synth(SynthArgs),
    /// Train a model and write a checkpoint
    Train(TrainArgs),
    /// Score held-out sessions with a checkpoint and the popularity baselines
    Evaluate(EvalArgs),
    /// Write the propagated item embeddings or anchor encodings
    DumpEmbeddings(DumpArgs),
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output corpus (training part when splitting)
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    min_item_freq: Option<usize>,
    #[arg(long)]
    min_session_len: Option<usize>,
    /// Also write a held-out split here
    #[arg(long)]
    test_out: Option<PathBuf>,
    #[arg(long)]
    test_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct GraphArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EntropyArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of items to print (all when omitted)
    #[arg(long)]
    top: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    items: usize,
    #[arg(long, default_value_t = 5)]
    categories: usize,
    #[arg(long, default_value_t = 5000)]
    sessions: usize,
    #[arg(long, default_value_t = 0.9)]
    p_same: f64,
    #[arg(long, default_value_t = 2)]
    min_len: usize,
    #[arg(long, default_value_t = 10)]
    max_len: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path to write
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    anchors: Option<usize>,
    #[arg(long)]
    neighbors: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    /// per_step or per_epoch
    #[arg(long)]
    refresh: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    cutoff: Option<usize>,
    /// JSON summary path (defaults to <out>/metrics.json when `out` is configured)
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// `a` for propagated item embeddings, `b` for anchor encodings
    #[arg(long, default_value = "a")]
    table: String,
}

/// Parses `argv` (including the program name), runs the stage and returns
/// the process exit code.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let threads = cli.threads.unwrap_or(0);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return 1;
        }
    };
    let stdout = std::io::stdout();
    match pool.install(|| dispatch(cli, &mut stdout.lock())) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn required(p: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.ok_or_else(|| Error::Config(format!("missing {what}: pass the flag or set it in --config")))
}

fn read_corpus(path: &Path) -> Result<crate::corpus::SessionCorpus> {
    load_sessions(path, SessionFormat::from_path(path))
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    match cli.command {
        Command::Preprocess(a) => {
            let data = required(a.data.or(cfg.data), "--data")?;
            let min_freq = a.min_item_freq.unwrap_or(cfg.min_item_freq);
            let min_len = a.min_session_len.unwrap_or(cfg.min_session_len);
            let corpus = preprocess(&read_corpus(&data)?, min_freq, min_len)?;
            match a.test_out {
                None => write_sessions(&corpus, &a.out, SessionFormat::from_path(&a.out)),
                Some(test_out) => {
                    let frac = a.test_fraction.unwrap_or(cfg.test_fraction);
                    let (train, test) = split_by_session(&corpus, frac, cfg.train.seed)?;
                    write_sessions(&train, &a.out, SessionFormat::from_path(&a.out))?;
                    write_sessions(&test, &test_out, SessionFormat::from_path(&test_out))
                }
            }
        }
        Command::BuildGraph(a) => {
            let data = required(a.data.or(cfg.data), "--data")?;
            let path = required(a.out.or(cfg.graph), "--out")?;
            let graph = build_graph(&read_corpus(&data)?, a.window.unwrap_or(cfg.train.window))?;
            save_graph(&graph, &path)
        }
        Command::Entropy(a) => {
            let data = required(a.data.or(cfg.data), "--data")?;
            let corpus = read_corpus(&data)?;
            let table = item_entropy(&corpus)?;
            let ranking = table.ranking();
            let top = a.top.unwrap_or(ranking.len()).min(ranking.len());
            let mut text = String::new();
            for &i in &ranking[..top] {
                let label = corpus.vocab.label(i).unwrap_or_default();
                text += &format!("{label}\t{}\t{}\n", table.entropy[i], table.session_count[i]);
            }
            write_out(out, &text)
        }
        Command::Synth(a) => {
            let synth = SynthConfig {
                seed: cli.seed.unwrap_or(SynthConfig::default().seed),
                n_items: a.items,
                n_categories: a.categories,
                n_sessions: a.sessions,
                len_range: (a.min_len, a.max_len),
                p_same_category: a.p_same,
            };
            let corpus = generate_synthetic(&synth)?;
            write_sessions(&corpus, &a.out, SessionFormat::from_path(&a.out))
        }
        Command::Train(a) => {
            let t = &mut cfg.train;
            let overrides = [
                (a.dim, &mut t.dim),
                (a.batch_size, &mut t.batch_size),
                (a.epochs, &mut t.epochs),
                (a.layers, &mut t.layers),
                (a.iterations, &mut t.iterations),
                (a.anchors, &mut t.anchors),
                (a.neighbors, &mut t.neighbors),
                (a.window, &mut t.window),
            ];
            for (flag, slot) in overrides {
                if let Some(v) = flag {
                    *slot = v;
                }
            }
            if let Some(lr) = a.lr {
                t.lr = lr;
            }
            if let Some(r) = &a.refresh {
                t.refresh = r.parse::<RefreshMode>()?;
            }
            let data = required(a.data.or(cfg.data), "--data")?;
            let path = required(a.checkpoint.or(cfg.checkpoint), "--checkpoint")?;
            let corpus = read_corpus(&data)?;
            let ckpt = train_with_progress(&cfg.train, &corpus, |r| {
                eprintln!("epoch {}\tlr {}\tloss {}", r.epoch, r.lr, r.mean_loss);
            })?;
            save_checkpoint(&ckpt, &path)
        }
        Command::Evaluate(a) => {
            let path = required(a.checkpoint.or(cfg.checkpoint), "--checkpoint")?;
            let test_path = required(a.test.or(cfg.test), "--test")?;
            let k = a.cutoff.unwrap_or(cfg.cutoff);
            let ckpt = load_checkpoint(&path)?;
            let test = remap_to_vocab(&read_corpus(&test_path)?, &ckpt.vocab);
            let examples = augment(&test, ckpt.config.max_session_len);
            let model = evaluate_ranker(&ModelRanker::new(&ckpt)?, &examples, k)?;
            let pop = evaluate_ranker(&PopRanker::from_counts(ckpt.item_counts.clone()), &examples, k)?;
            let spop = evaluate_ranker(&SPopRanker::from_counts(ckpt.item_counts.clone()), &examples, k)?;
            write_out(out, &metric_lines(&model, &pop, &spop))?;
            let summary = a.summary.or_else(|| cfg.out.map(|d| d.join("metrics.json")));
            if let Some(p) = summary {
                let json = summary_json(&model, &pop, &spop);
                std::fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?;
            }
            Ok(())
        }
        Command::DumpEmbeddings(a) => {
            let path = required(a.checkpoint.or(cfg.checkpoint), "--checkpoint")?;
            let ckpt = load_checkpoint(&path)?;
            let (h_a, h_b) = item_tables(&ckpt)?;
            let table = match a.table.as_str() {
                "a" => h_a,
                "b" => h_b,
                other => return Err(Error::Config(format!("unknown table {other:?} (expected a or b)"))),
            };
            let mut text = format!("{} {}\n", table.rows(), table.cols());
            for i in 0..table.rows() {
                text += ckpt.vocab.label(i).unwrap_or_default();
                for v in table.row(i) {
                    text += &format!(" {v}");
                }
                text.push('\n');
            }
            std::fs::write(&a.out, text).map_err(|e| Error::io(&a.out, e))
        }
    }
}

fn metric_lines(model: &Metrics, pop: &Metrics, spop: &Metrics) -> String {
    let k = model.k;
    let mut s = String::new();
    for (prefix, m) in [("", model), ("pop_", pop), ("spop_", spop)] {
        s += &format!("{prefix}hr@{k}\t{}\n", m.hr_at_k);
        s += &format!("{prefix}mrr@{k}\t{}\n", m.mrr_at_k);
    }
    s += &format!("n_evaluated\t{}\n", model.n_evaluated);
    s += &format!("n_skipped\t{}\n", model.n_skipped);
    s
}

fn summary_json(model: &Metrics, pop: &Metrics, spop: &Metrics) -> String {
    let m = |x: &Metrics| serde_json::json!({ "hr": x.hr_at_k, "mrr": x.mrr_at_k });
    let v = serde_json::json!({
        "cutoff": model.k,
        "n_evaluated": model.n_evaluated,
        "n_skipped": model.n_skipped,
        "model": m(model),
        "pop": m(pop),
        "spop": m(spop),
    });
    serde_json::to_string_pretty(&v).expect("plain JSON values serialize")
}
