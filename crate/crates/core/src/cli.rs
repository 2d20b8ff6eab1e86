//! Command-line entry point.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::analytics::{
    analyze_events, analyze_heatmap, compare_variants, is_heatmap, write_heatmap, ComparisonReport,
    MetricsReport, UtilizationMatrix,
};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mamoe::{EventReader, ExpertPartition, Variant};
use crate::model::{model_grad_check, Model};
use crate::trainer::{model_from_checkpoint, Checkpoint, DirSink, TaskKind, Trainer};

pub const SEED_ENV: &str = "MAMOE_SEED";
/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "mamoe", version, about = "Modality-aware MoE toy model: training and routing analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one stage, writing logs and checkpoints to DIR.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint (same stage) or start stage 2 from a
        /// stage-1 checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compute routing entropy, Gini and mask violations from an event log
    /// or a heatmap CSV.
    Analyze {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Take the expert partition from this config instead of guessing a
        /// half split.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also report the mean per-token entropy of the gate weights.
        #[arg(long)]
        per_token: bool,
    },
    /// Train several variants over several seeds and compare routing.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "mamoe,vanilla,no_shared,dense")]
        variants: Vec<Variant>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Write the full comparison as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference check of the model's gradients.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        /// Coordinates probed per tensor; 0 probes all.
        #[arg(long, default_value_t = 8)]
        coords: usize,
    },
    /// Write a modality × expert utilization heatmap.
    Heatmap {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code: 0 success, 1 usage error, 2 runtime failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let seed = std::env::var(SEED_ENV).ok();
    let mut stdout = std::io::stdout().lock();
    match execute(cli.command, seed.as_deref(), &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn load_config(path: &Path, seed: Option<&str>) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::from_path(path)?;
    cfg.override_seed(seed)?;
    cfg.validate()?;
    Ok(cfg)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn say(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> Result<()> {
    out.write_fmt(text).and_then(|_| out.write_all(b"\n")).map_err(|e| Error::io("<stdout>", e))
}

fn partition_from(config: Option<&Path>) -> Result<Option<ExpertPartition>> {
    config
        .map(|p| ModelConfig::from_path(p).and_then(|c| c.partition()))
        .transpose()
}

fn execute(cmd: Command, seed: Option<&str>, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            stage,
            out: dir,
            resume,
        } => train(&config, stage, &dir, resume.as_deref(), seed, out),
        Command::Analyze {
            events,
            report,
            config,
            per_token,
        } => {
            let part = partition_from(config.as_deref())?;
            let r = if is_heatmap(open(&events)?)? {
                analyze_heatmap(open(&events)?, part.as_ref())?
            } else {
                analyze_events(open(&events)?, part.as_ref(), per_token)?
            };
            let mut w = create(&report)?;
            w.write_all(r.to_json()?.as_bytes())
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&report, e))?;
            print_report(&r, out)
        }
        Command::Ablate {
            config,
            variants,
            seeds,
            report,
        } => {
            let cfg = load_config(&config, seed)?;
            let r = compare_variants(&cfg, &variants, &seeds)?;
            if let Some(path) = report {
                let mut w = create(&path)?;
                let text = serde_json::to_string_pretty(&r)?;
                w.write_all(text.as_bytes())
                    .and_then(|_| w.flush())
                    .map_err(|e| Error::io(&path, e))?;
            }
            print_comparison(&r, out)
        }
        Command::Gradcheck { config, eps, coords } => {
            let cfg = load_config(&config, seed)?;
            let model = Model::new(cfg)?;
            let tasks = crate::trainer::TaskSpec::new(
                model.config.seed,
                model.config.training.seq_len,
                model.config.v_text,
                model.config.code_vocab,
            )?;
            let asr = tasks.eval_batch(TaskKind::PseudoAsr, 1)?;
            let tts = tasks.eval_batch(TaskKind::PseudoTts, 1)?;
            let seqs = [asr.seqs, tts.seqs].concat();
            let targets = [asr.targets, tts.targets].concat();
            let limit = (coords > 0).then_some(coords);
            let r = model_grad_check(&model, &seqs, &targets, eps, limit)?;
            for g in &r.groups {
                say(
                    out,
                    format_args!("{:<20} {:>6} coords  max_rel_err {:.3e}  ({})", g.group, g.coords_checked, g.max_rel_err, g.worst_param),
                )?;
            }
            say(out, format_args!("routing flips: {}", r.routing_flips))?;
            say(out, format_args!("max_rel_err {:.3e}", r.max_rel_err()))?;
            if r.max_rel_err() < GRADCHECK_TOL {
                Ok(())
            } else {
                Err(Error::Evaluation(format!(
                    "gradient check failed: {:.3e} >= {GRADCHECK_TOL:e}",
                    r.max_rel_err()
                )))
            }
        }
        Command::Heatmap { events, out: path, config } => {
            let part = partition_from(config.as_deref())?;
            let mut u = UtilizationMatrix::default();
            for e in EventReader::new(open(&events)?)? {
                u.record(&e?);
            }
            if u.total() == 0 {
                return Err(Error::NoEvents(events.display().to_string()));
            }
            if let Some(p) = &part {
                if u.n_experts() > p.n_experts() {
                    return Err(Error::Argument(format!(
                        "events reference expert {} but the config has {} experts",
                        u.n_experts() - 1,
                        p.n_experts()
                    )));
                }
                u.ensure_experts(p.n_experts());
            }
            write_heatmap(create(&path)?, &u, true)?;
            let counts = counts_path(&path);
            write_heatmap(create(&counts)?, &u, false)?;
            say(
                out,
                format_args!("wrote {} and {} ({} selections)", path.display(), counts.display(), u.total()),
            )
        }
    }
}

/// `<stem>.counts.csv` next to the heatmap.
pub fn counts_path(heatmap: &Path) -> PathBuf {
    let stem = heatmap.file_stem().map_or_else(|| "heatmap".into(), |s| s.to_string_lossy());
    heatmap.with_file_name(format!("{stem}.counts.csv"))
}

fn train(
    config: &Path,
    stage: u8,
    dir: &Path,
    resume: Option<&Path>,
    seed: Option<&str>,
    out: &mut dyn Write,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let (mut trainer, mut sink) = match resume {
        None => (Trainer::from_config(cfg, stage)?, DirSink::create(dir)?),
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.stage == stage {
                let t = Trainer::from_checkpoint(&ckpt)?;
                let sink = DirSink::resume(dir, ckpt.step)?;
                (t, sink)
            } else if ckpt.stage == 1 && stage == 2 {
                let mut model = model_from_checkpoint(&ckpt)?;
                model.config.training = cfg.training;
                (Trainer::new(model, 2)?, DirSink::create(dir)?)
            } else {
                return Err(Error::Argument(format!(
                    "cannot run stage {stage} from a stage-{} checkpoint",
                    ckpt.stage
                )));
            }
        }
    };
    let start = trainer.step;
    let history = trainer.run_stage(&mut sink)?;
    let last = history.last();
    say(
        out,
        format_args!(
            "stage {stage}: steps {start}..{}  final loss {}  ->  {}",
            trainer.step,
            last.map_or("n/a".into(), |m| format!("{:.4}", m.loss)),
            dir.display()
        ),
    )
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn print_report(r: &MetricsReport, out: &mut dyn Write) -> Result<()> {
    say(out, format_args!("{:>8} {:>10} {:>10} {:>8} {:>10}", "step", "H(text)", "H(audio)", "gini", "violations"))?;
    let rows = r.checkpoints.iter().map(|c| (c.step.to_string(), c));
    for (label, c) in rows.chain(std::iter::once(("all".to_string(), &r.overall))) {
        say(
            out,
            format_args!(
                "{:>8} {:>10} {:>10} {:>8.4} {:>10}",
                label,
                fmt_opt(c.entropy_text),
                fmt_opt(c.entropy_audio),
                c.gini_overall,
                c.violations
            ),
        )?;
    }
    Ok(())
}

fn print_comparison(r: &ComparisonReport, out: &mut dyn Write) -> Result<()> {
    say(
        out,
        format_args!(
            "{:<10} {:>10} {:>10} {:>8} {:>10} {:>10}",
            "variant", "probe", "asr", "gini", "H(text)", "H(audio)"
        ),
    )?;
    for s in &r.summary {
        say(
            out,
            format_args!(
                "{:<10} {:>10.4} {:>10.4} {:>8} {:>10} {:>10}",
                s.variant.to_string(),
                s.mean_final_probe_loss,
                s.mean_final_asr_loss,
                fmt_opt(s.mean_final_gini),
                fmt_opt(s.mean_final_entropy_text),
                fmt_opt(s.mean_final_entropy_audio)
            ),
        )?;
    }
    for w in &r.winners {
        say(out, format_args!("best {:<20} {} ({:.4})", w.metric, w.variant, w.value))?;
    }
    Ok(())
}
