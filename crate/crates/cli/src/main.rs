use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vimf::blocks::{FftMode, Variant};
use vimf::harness::checkpoint;
use vimf::harness::data::{synth_dataset, Split, SynthTaskSpec};
use vimf::harness::metrics::write_log;
use vimf::harness::train::{evaluate, train, TrainConfig};
use vimf::harness::verify;
use vimf::model::{fft_macs, scan_macs};
use vimf::{Error, Model, ModelConfig};

#[derive(Parser, Debug)]
#[command(name = "vimf", version, about = "Vision state-space models with frequency fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on the synthetic frequency-tone task and write a metrics log.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        /// Save the trained model here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in oracle and identity suite.
    Verify {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter and multiply-accumulate counts by module.
    Count {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Op-count scaling of the token mixers against sequence length.
    Bench {
        #[arg(long, default_value_t = 192)]
        dim: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Scale {
    /// 64×64, depth 4, width 32.
    Desk,
    /// 224×224, depth 24, width 192.
    Tiny,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// JSON model config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long, value_parser = parse_fft_mode)]
    fft_mode: Option<FftMode>,
    #[arg(long)]
    pos_embed: Option<OnOff>,
    /// Fraction of blocks carrying frequency fusion.
    #[arg(long)]
    proportion: Option<f64>,
    /// Preset used when no config file is given.
    #[arg(long)]
    scale: Option<Scale>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

fn parse_fft_mode(s: &str) -> Result<FftMode, String> {
    s.parse::<FftMode>().map_err(|e| e.to_string())
}

impl ModelArgs {
    fn resolve(&self, default_scale: Scale) -> vimf::Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(p) => ModelConfig::from_json(&fs::read_to_string(p)?)?,
            None => {
                let v = self.variant.unwrap_or(Variant::VimF);
                match self.scale.unwrap_or(default_scale) {
                    Scale::Desk => ModelConfig::desk(v),
                    Scale::Tiny => ModelConfig::tiny(v),
                }
            }
        };
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(m) = self.fft_mode {
            cfg.fft_mode = m;
        }
        if let Some(p) = self.pos_embed {
            cfg.use_pos_embed = matches!(p, OnOff::On);
        }
        if let Some(p) = self.proportion {
            cfg.f_block_proportion = p;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Like `resolve`, but every failure is reported as a config error.
    fn config(&self, default_scale: Scale) -> vimf::Result<ModelConfig> {
        self.resolve(default_scale).map_err(|e| match e {
            e @ (Error::Config(_) | Error::Io(_)) => e,
            other => Error::Config(other.to_string()),
        })
    }
}

/// Writes to `--out` if given, else stdout.
fn sink(out: &Option<PathBuf>) -> io::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn grouped(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn task_for(cfg: &ModelConfig, seed: u64) -> SynthTaskSpec {
    SynthTaskSpec {
        resolution: cfg.image_size,
        channels: cfg.in_channels,
        num_classes: cfg.num_classes,
        ..SynthTaskSpec::desk(seed)
    }
}

fn run(cli: Cli) -> vimf::Result<bool> {
    match cli.command {
        Command::Train {
            model,
            steps,
            lr,
            batch,
            checkpoint: ckpt,
        } => {
            let cfg = model.config(Scale::Desk)?;
            let spec = task_for(&cfg, model.seed);
            let train_set = synth_dataset(&spec, Split::Train)?;
            let test_set = synth_dataset(&spec, Split::Test)?;
            let mut m = Model::build(&cfg, model.seed)?;
            let tc = TrainConfig {
                steps,
                batch_size: batch,
                lr,
                seed: model.seed,
            };
            let log = train(&mut m, &train_set, &tc)?;
            write_log(sink(&model.out)?, &log)?;
            let ev = evaluate(&m, &test_set)?;
            eprintln!("held-out accuracy {:.4}, mean loss {:.4}", ev.accuracy, ev.mean_loss);
            if let Some(p) = ckpt {
                checkpoint::save(&m, p)?;
            }
            Ok(true)
        }
        Command::Eval { checkpoint: p, seed, out } => {
            let m = checkpoint::load(p)?;
            let test_set = synth_dataset(&task_for(&m.cfg, seed), Split::Test)?;
            let ev = evaluate(&m, &test_set)?;
            let mut w = sink(&out)?;
            writeln!(w, "samples {}\naccuracy {:.4}\nmean_loss {:.6}", ev.samples, ev.accuracy, ev.mean_loss)?;
            Ok(true)
        }
        Command::Verify { out } => {
            let results = verify::run_all();
            let mut w = sink(&out)?;
            write!(w, "{}", verify::render_table(&results))?;
            let failed = results.iter().filter(|r| !r.passed).count();
            writeln!(w, "{} passed, {failed} failed", results.len() - failed)?;
            Ok(failed == 0)
        }
        Command::Count { model } => {
            let cfg = model.config(Scale::Tiny)?;
            let m = Model::build(&cfg, model.seed)?;
            let params = m.count_params();
            let macs = m.estimate_macs();
            let mut w = sink(&model.out)?;
            writeln!(w, "{:<24} {:>14} {:>18}", "module", "params", "MACs")?;
            for (key, n) in &params.by_module {
                writeln!(w, "{key:<24} {:>14} {:>18}", grouped(*n as u64), grouped(macs.module(key)))?;
            }
            writeln!(w, "{:<24} {:>14} {:>18}", "total", grouped(params.total as u64), grouped(macs.total))?;
            writeln!(w, "stem subtotal: {} params", grouped(params.module("embed") as u64))?;
            Ok(true)
        }
        Command::Bench { dim, out } => {
            let mut w = sink(&out)?;
            let (d_inner, n) = (2 * dim, 16);
            writeln!(
                w,
                "{:>6} {:>16} {:>16} {:>16} {:>16} {:>10}",
                "tokens", "scan", "fft/channel·D", "linear attn", "softmax attn", "amp µs"
            )?;
            for side in [4usize, 8, 14, 16, 28, 32] {
                let l = side * side;
                let grid = vimf::Tensor::full(&[dim, side, side], 0.5);
                let t = Instant::now();
                let _ = vimf::fft::amp2d_per_channel(&grid)?;
                let us = t.elapsed().as_secs_f64() * 1e6;
                writeln!(
                    w,
                    "{l:>6} {:>16} {:>16} {:>16} {:>16} {us:>10.0}",
                    grouped(2 * scan_macs(l, d_inner, n)),
                    grouped(fft_macs(l) * dim as u64),
                    grouped(2 * (l * dim * dim) as u64),
                    grouped(2 * (l * l * dim) as u64),
                )?;
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ (Error::Config(_) | Error::Json(_) | Error::Io(_) | Error::ConfigMismatch(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
