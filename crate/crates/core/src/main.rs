use clap::{Parser, Subcommand};
use docseg::data::{discover_split, export_patches, load_page, synth, ClassEncoding, Split};
use docseg::eval::evaluate_dirs;
use docseg::runner::{run, RunInvocation};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "docseg", version, about = "Configuration-driven page segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, validate and test one experiment: `run experiment=<file> [key=value | +key=value]...`
    Run {
        /// Configuration root holding `experiment/` and the group directories.
        #[arg(long, env = "DOCSEG_CONFIG_DIR", default_value = "configs")]
        config_dir: PathBuf,
        /// Directory receiving timestamped run directories.
        #[arg(long, env = "DOCSEG_RUNS_DIR", default_value = "runs")]
        runs_dir: PathBuf,
        #[arg(required = true, num_args = 1.., value_name = "TOKEN")]
        tokens: Vec<String>,
    },
    /// Score predicted label images against ground truth.
    Evaluate {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        /// Exclude ground-truth boundary pixels from the counts.
        #[arg(long)]
        ignore_boundary: bool,
        /// File receiving `key=value` summary lines.
        #[arg(long, default_value = "summary.txt")]
        summary: PathBuf,
    },
    /// Write a synthetic 8-class corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        train: usize,
        #[arg(long, default_value_t = 1)]
        val: usize,
        #[arg(long, default_value_t = 1)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cut the train and val pages of a corpus into grid patches on disk;
    /// test pages are copied whole.
    Precrop {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        crop_size: usize,
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
    },
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run { config_dir, runs_dir, tokens } => {
            let mut inv = match RunInvocation::from_tokens(&tokens) {
                Ok(inv) => inv,
                Err(e) => return fail(e.exit_code() as u8, e),
            };
            inv.config_dir = config_dir;
            inv.runs_dir = runs_dir;
            match run(&inv) {
                Ok(m) => {
                    println!("{}", m.run_dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e.exit_code() as u8, e),
            }
        }
        Command::Evaluate { pred_dir, gt_dir, ignore_boundary, summary } => {
            match evaluate_dirs(&pred_dir, &gt_dir, &ClassEncoding::hisdb(), ignore_boundary) {
                Ok(report) => {
                    print!("{}", report.to_text());
                    if let Err(e) = std::fs::write(&summary, report.to_summary()) {
                        return fail(5, format!("{}: {e}", summary.display()));
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(5, e),
            }
        }
        Command::Synth { out, size, train, val, test, seed } => {
            match synth::write_corpus(&out, &synth::SynthConfig { size, train, val, test, seed }) {
                Ok(n) => {
                    println!("wrote {n} pages to {}", out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(3, e),
            }
        }
        Command::Precrop { input, out, crop_size, overlap } => {
            let enc = ClassEncoding::hisdb();
            let mut total = 0;
            for split in [Split::Train, Split::Val] {
                let pages = match discover_split(&input, split)
                    .and_then(|recs| recs.iter().map(|r| load_page(r, &enc)).collect::<Result<Vec<_>, _>>())
                {
                    Ok(p) => p,
                    Err(e) => return fail(3, e),
                };
                match export_patches(&pages, crop_size, overlap, &enc, &out.join(split.dir_name())) {
                    Ok(w) => total += w.len(),
                    Err(e) => return fail(3, e),
                }
            }
            let test_dir = out.join(Split::Test.dir_name());
            for rec in discover_split(&input, Split::Test).unwrap_or_default() {
                for (src, sub) in [(&rec.image_path, "data"), (&rec.gt_path, "gt")] {
                    let dst = test_dir.join(sub);
                    let copied = std::fs::create_dir_all(&dst).and_then(|_| std::fs::copy(src, dst.join(src.file_name().unwrap_or_default())));
                    if let Err(e) = copied {
                        return fail(3, format!("{}: {e}", src.display()));
                    }
                }
            }
            println!("wrote {total} patches to {}", out.display());
            ExitCode::SUCCESS
        }
    }
}
