use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stfuse::config::RunConfig;
use stfuse::patch::Stream;
use stfuse::pipeline::{self, AblationRow, EvalOutcome};
use stfuse::score::ScoreSource;

/// Object-centric dual-stream video anomaly detection.
#[derive(Parser)]
#[command(name = "stfuse", version)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override any config key, e.g. `--set train.spatial.epochs=5`. Repeatable.
    #[arg(short, long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    #[arg(long, global = true)]
    data_root: Option<PathBuf>,

    /// Also settable through STFUSE_CACHE_ROOT.
    #[arg(long, global = true)]
    cache_root: Option<PathBuf>,

    #[arg(long, global = true)]
    checkpoints: Option<PathBuf>,

    #[arg(long, global = true)]
    reports: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Synth,
    /// Compute flow, crop targets and write the patch cache.
    Preprocess,
    /// Train one stream.
    Train {
        #[arg(long)]
        stream: Stream,
        /// Train the memory-free variant used by the ablation.
        #[arg(long)]
        no_memory: bool,
    },
    /// Score the test split and write scores.csv.
    Score,
    /// Compute the AUC and write the report.
    Eval {
        /// Also compare networks with memory on and off (needs the --no-memory checkpoints).
        #[arg(long)]
        ablation: bool,
    },
    /// Write score-versus-label plots.
    Plot,
    /// Run every stage in order.
    Run {
        #[arg(long)]
        ablation: bool,
    },
    /// Print the effective configuration as TOML.
    Config,
}

fn resolve_config(cli: &Cli) -> stfuse::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let mut cfg = RunConfig::default();
            cfg.apply_env();
            cfg
        }
    };
    for assignment in &cli.set {
        cfg = cfg.with_override(assignment)?;
    }
    let paths = &mut cfg.paths;
    for (flag, slot) in [
        (&cli.data_root, &mut paths.data_root),
        (&cli.cache_root, &mut paths.cache_root),
        (&cli.checkpoints, &mut paths.checkpoints),
        (&cli.reports, &mut paths.reports),
    ] {
        if let Some(p) = flag {
            *slot = p.clone();
        }
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn print_eval(outcome: &EvalOutcome) {
    let s = &outcome.summary;
    println!("frames: {} ({} anomalous)", s.frames, s.anomalous_frames);
    for (video, auc) in &s.per_video_auc {
        match auc {
            Some(a) => println!("  {video}: AUC {a:.4}"),
            None => println!("  {video}: AUC undefined (single class)"),
        }
    }
    println!("AUC: {:.4}", s.auc);
    if let Some(rows) = &outcome.ablation {
        print_ablation(rows);
    }
}

fn print_ablation(rows: &[AblationRow]) {
    println!("{:<10} {:<8} {:>8}", "network", "memory", "AUC");
    for r in rows {
        let network = match r.network {
            ScoreSource::Appearance => "spatial",
            ScoreSource::Motion => "temporal",
            ScoreSource::Dual => "dual",
        };
        println!("{network:<10} {:<8} {:>8.4}", if r.memory { "on" } else { "off" }, r.auc);
    }
}

fn run(cli: &Cli) -> stfuse::Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Synth => {
            let m = pipeline::cmd_synth(&cfg)?;
            for (split, videos) in &m.splits {
                let anomalous: usize = videos.iter().map(|v| v.anomalous_frames).sum();
                println!("{}: {} videos, {anomalous} anomalous frames", split.as_str(), videos.len());
            }
        }
        Command::Preprocess => {
            let m = pipeline::cmd_preprocess(&cfg)?;
            for (split, keys) in &m.groups {
                println!("{}: {} frame groups", split.as_str(), keys.len());
            }
        }
        Command::Train { stream, no_memory } => {
            let ckpt = pipeline::cmd_train(&cfg, *stream, !no_memory)?;
            if let Some(last) = ckpt.history.last() {
                println!("{stream}: {} epochs, final loss {:.6}", last.epoch, last.total);
            }
        }
        Command::Score => {
            let series = pipeline::cmd_score(&cfg)?;
            println!("scored {} frames", series.rows.len());
        }
        Command::Eval { ablation } => print_eval(&pipeline::cmd_eval(&cfg, *ablation)?),
        Command::Plot => {
            for p in pipeline::cmd_plot(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Run { ablation } => print_eval(&pipeline::run_all(&cfg, *ablation)?),
        Command::Config => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("stfuse").chain(args.iter().copied())).unwrap()
    }

    fn exit_code(args: &[&str]) -> i32 {
        run(&parse(args)).map_or_else(|e| e.exit_code(), |()| 0)
    }

    #[test]
    fn flags_override_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 3\n[paths]\nreports = \"from-file\"\n[train.spatial]\nepochs = 4\n").unwrap();
        let p = path.to_str().unwrap();
        let cfg = resolve_config(&parse(&["-c", p, "--reports", "from-flag", "config"])).unwrap();
        assert_eq!(cfg.paths.reports, PathBuf::from("from-flag"));
        assert_eq!((cfg.seed, cfg.train.spatial.epochs), (3, 4));
        let cfg = resolve_config(&parse(&["-c", p, "--seed", "9", "--set", "train.spatial.epochs=2", "config"])).unwrap();
        assert_eq!((cfg.seed, cfg.train.spatial.epochs), (9, 2));
    }

    #[test]
    fn config_errors_exit_with_2() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[model]\nlatent = 4\n").unwrap();
        assert_eq!(exit_code(&["-c", path.to_str().unwrap(), "config"]), 2);
        assert_eq!(exit_code(&["--set", "ingest.train_n=0", "config"]), 2);
        assert_eq!(exit_code(&["-c", "/nonexistent/run.toml", "config"]), 2);
    }

    #[test]
    fn missing_stage_outputs_exit_with_3() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_str().unwrap();
        let paths = [
            format!("--data-root={root}/data"),
            format!("--cache-root={root}/cache"),
            format!("--checkpoints={root}/ckpt"),
            format!("--reports={root}/reports"),
        ];
        for cmd in [&["preprocess"][..], &["train", "--stream", "temporal"], &["score"], &["eval"], &["plot"]] {
            let mut args: Vec<&str> = paths.iter().map(String::as_str).collect();
            args.extend_from_slice(cmd);
            assert_eq!(exit_code(&args), 3, "{cmd:?}");
        }
    }

    #[test]
    fn tiny_run_with_ablation() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_str().unwrap();
        let args = [
            format!("--data-root={root}/data"),
            format!("--cache-root={root}/cache"),
            format!("--checkpoints={root}/ckpt"),
            format!("--reports={root}/reports"),
            "--set=corpus.train_videos=1".into(),
            "--set=corpus.test_videos=1".into(),
            "--set=corpus.frames_per_video=10".into(),
            "--set=corpus.span_length=[2, 4]".into(),
            "--set=ingest.horn_schunck.iterations=10".into(),
            "--set=model.channels=[2, 2, 2, 2]".into(),
            "--set=model.latent_dim=4".into(),
            "--set=model.memory_slots=4".into(),
            "--set=train.spatial.epochs=1".into(),
            "--set=train.temporal.epochs=1".into(),
            "run".into(),
            "--ablation".into(),
        ];
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        assert_eq!(exit_code(&args), 0);
        let table = std::fs::read_to_string(dir.path().join("reports/ablation.csv")).unwrap();
        assert_eq!(table.lines().count(), 7);
        assert!(table.starts_with("network,memory,auc\nspatial,on,"));
    }
}
