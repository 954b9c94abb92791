//! Command-line entry point. Exit codes: 0 success, 2 configuration error,
//! 3 backend error, 4 metric error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use convis::app::{self, ResponseFile, RunConfig};
use convis::experiment::Method;
use convis::Result;

#[derive(Parser)]
#[command(
    name = "convis",
    version,
    about = "Contrastive decoding against reconstructed images",
    after_help = "Exit codes: 0 success, 2 configuration error, 3 backend error, 4 metric error.\n\
                  Logging: set CONVIS_LOG to error, warn, info, debug or trace."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration field, e.g. `--set settings.convis.alpha=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, extra: Vec<String>) -> Result<RunConfig> {
        let mut all = self.overrides.clone();
        all.extend(extra);
        RunConfig::load(self.config.as_deref(), &all)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Decode one response and write response.json (plus trace.jsonl for convis).
    Decode {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Image reference passed to register_image.
        #[arg(long)]
        image: String,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        method: Option<Method>,
        /// Shorthand for `--set settings.convis.alpha=<A>`.
        #[arg(long)]
        alpha: Option<f64>,
        /// Output directory; defaults to the configured one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Caption a corpus with every configured method and seed and write report.csv/json.
    Benchmark {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert a trace.jsonl into step,token,kl CSV.
    KlPlot {
        trace: PathBuf,
        /// Write here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Record a backend transcript, either of one decode or as a proxy server.
    Record {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Transcript file to write.
        #[arg(long)]
        transcript: PathBuf,
        /// Decode this image while recording.
        #[arg(long, required_unless_present = "listen")]
        image: Option<String>,
        /// Serve the configured backend on this address and record all traffic.
        #[arg(long, conflicts_with = "image")]
        listen: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run a decode against a transcript and check it matches.
    ReplayVerify {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long)]
        image: String,
        /// A response.json the replay must reproduce.
        #[arg(long)]
        expect: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Decode {
            cfg,
            image,
            prompt,
            method,
            alpha,
            out,
        } => {
            let mut extra = Vec::new();
            if let Some(m) = method {
                extra.push(format!("method={m}"));
            }
            if let Some(a) = alpha {
                extra.push(format!("settings.convis.alpha={a}"));
            }
            if let Some(p) = prompt {
                extra.push(format!("prompt={}", serde_json::Value::String(p)));
            }
            let cfg = cfg.load(extra)?;
            setup_threads(&cfg);
            let outcome = app::run_decode(&cfg, cfg.open_backend()?, &image)?;
            outcome.write(out.as_deref().unwrap_or(&cfg.output_dir))?;
            println!("{}", outcome.response.text);
        }
        Command::Benchmark { cfg, out } => {
            let cfg = cfg.load(Vec::new())?;
            setup_threads(&cfg);
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let report = app::run_benchmark(&cfg, cfg.open_backend()?, Some(&dir))?;
            print!("{}", report.to_csv()?);
        }
        Command::KlPlot { trace, out } => {
            let csv = app::kl_plot(&trace)?;
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Record {
            cfg,
            transcript,
            image,
            listen,
            out,
        } => {
            let cfg = cfg.load(Vec::new())?;
            if let Some(addr) = listen {
                let server = app::record_proxy(&cfg, &addr, &transcript)?;
                eprintln!("recording {} on {}", cfg.backend_label(), server.url());
                server.join();
            } else {
                let image = image.expect("clap requires --image without --listen");
                let outcome = app::record_decode(&cfg, &image, &transcript)?;
                outcome.write(out.as_deref().unwrap_or(&cfg.output_dir))?;
                println!("{}", outcome.response.text);
            }
        }
        Command::ReplayVerify {
            cfg,
            transcript,
            image,
            expect,
        } => {
            let cfg = cfg.load(Vec::new())?;
            let expected: Option<ResponseFile> = match expect {
                Some(p) => Some(
                    serde_json::from_str(&std::fs::read_to_string(&p)?)
                        .map_err(|e| convis::Error::Config(format!("{}: {e}", p.display())))?,
                ),
                None => None,
            };
            let report = app::replay_verify(&cfg, &transcript, &image, expected.as_ref())?;
            println!("{}", serde_json::to_string(&report)?);
        }
    }
    Ok(())
}

fn setup_threads(cfg: &RunConfig) {
    if cfg.parallelism > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.parallelism)
            .build_global()
        {
            log::warn!("could not size the thread pool: {e}");
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CONVIS_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(app::EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(app::exit_code(&e) as u8)
        }
    }
}
