//! Command-line harness: dataset synthesis, training, evaluation,
//! gradient checking, flop benchmarking, and response-map export.
//!
//! Exit codes: 0 success, 1 usage error, 2 failed check, 3 IO or parse
//! error.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use eagr::bench::run_bench;
use eagr::checkpoint::Checkpoint;
use eagr::config::parse_config_file;
use eagr::data::SynthConfig;
use eagr::error::Error;
use eagr::gradcheck;
use eagr::net::Ablation;
use eagr::pnm;
use eagr::train::{checkpoint_from, evaluate, net_from_checkpoint, response_map, train, Dataset};

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = a.trim().parse().map_err(|_| format!("bad extent {a:?}"))?;
    let w = b.trim().parse().map_err(|_| format!("bad extent {b:?}"))?;
    if h == 0 || w == 0 {
        return Err("extents must be positive".into());
    }
    Ok((h, w))
}

#[derive(Parser)]
#[command(
    name = "eagr",
    version,
    about = "Edge-aware graph reasoning for segmentation: training and analysis harness"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic face-like dataset on disk.
    Synth {
        /// Output directory for image/label pairs and the manifest.
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Canvas size as HxW.
        #[arg(long, value_parser = parse_size, default_value = "32x32")]
        size: (usize, usize),
        /// Gaussian pixel-noise standard deviation.
        #[arg(long, default_value_t = 0.03)]
        noise: f64,
    },
    /// Train a network on a synthesized dataset.
    Train {
        /// Dataset directory (from `synth`).
        #[arg(long)]
        data: PathBuf,
        /// key=value config file.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Ablation: baseline, no-edge, no-reasoning or no-ba.
        #[arg(long)]
        ablate: Option<String>,
        /// Run-log output path (default: checkpoint path + .log).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Optional held-out set evaluated after every epoch.
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Verify every backward rule against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds to sweep.
        #[arg(long, default_value_t = 20)]
        reps: usize,
    },
    /// Compare reasoning-block flops and wall time against the dense
    /// non-local baseline.
    Bench {
        #[arg(long, value_parser = parse_size, default_value = "48x48")]
        size: (usize, usize),
        #[arg(long, default_value_t = 64)]
        channels: usize,
        /// Reduced projection channel count.
        #[arg(long, default_value_t = 32)]
        t: usize,
        /// Vertex feature width.
        #[arg(long, default_value_t = 128)]
        k: usize,
        #[arg(long, value_parser = parse_size, default_value = "6x6")]
        grid: (usize, usize),
        #[arg(long, value_parser = parse_size, default_value = "4x4")]
        sel: (usize, usize),
        /// Wall-clock repetitions (minimum 5, medians reported).
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export the response map of one graph vertex as a PGM image
    /// (darker pixels respond more).
    Respmap {
        #[arg(long)]
        ckpt: PathBuf,
        /// Input image (PPM written by `synth`).
        #[arg(long)]
        image: PathBuf,
        /// Vertex index inside the high-level block.
        #[arg(long)]
        vertex: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Cmd) -> Result<ExitCode, Error> {
    match cmd {
        Cmd::Synth {
            out,
            count,
            seed,
            size,
            noise,
        } => {
            let mut cfg = SynthConfig::with_size(size.0, size.1, seed);
            cfg.noise_std = noise;
            let data = Dataset::synthesize(&cfg, count)?;
            data.save(&out)?;
            println!(
                "wrote {} samples of {}x{} to {}",
                count,
                size.0,
                size.1,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Train {
            data,
            config,
            out,
            ablate,
            log,
            eval_data,
        } => {
            let (cfg, opts) = parse_config_file(&config)?;
            let ablation = match ablate.as_deref() {
                None => Ablation::None,
                Some(flag) => Ablation::parse(flag)?,
            };
            let train_set = Dataset::load(&data)?;
            let eval_set = eval_data.map(|d| Dataset::load(&d)).transpose()?;
            let started = Instant::now();
            let (params, run_log) = train(&train_set, eval_set.as_ref(), &cfg, &opts, ablation)?;
            let ckpt = checkpoint_from(&params, &cfg, ablation)?;
            ckpt.save(&out)?;
            let log_path = log.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".log");
                PathBuf::from(p)
            });
            std::fs::write(&log_path, run_log.render()).map_err(|e| Error::io(&log_path, e))?;
            let first = run_log.steps.first();
            let last = run_log.steps.last();
            println!(
                "trained {} epochs ({} steps) in {:.1}s",
                opts.epochs,
                run_log.steps.len(),
                started.elapsed().as_secs_f64()
            );
            if let (Some(a), Some(b)) = (first, last) {
                println!("l_total: {:.6} -> {:.6}", a.l_total, b.l_total);
            }
            if let Some((epoch, report)) = run_log.epochs.last() {
                println!("epoch {epoch} eval: {}", report.to_record());
            }
            println!("checkpoint: {}", out.display());
            println!("run log:    {}", log_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval { data, ckpt } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let (params, cfg, ablation) = net_from_checkpoint(&checkpoint)?;
            let set = Dataset::load(&data)?;
            let report = evaluate(&set, &params, &cfg, ablation)?;
            print!("{}", report.to_kv());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Gradcheck { seed, reps } => {
            let started = Instant::now();
            let reports = gradcheck::run_suite(seed, reps)?;
            let mut all_ok = true;
            println!(
                "{:<24} {:>14} {:>10} {:>8}",
                "check", "worst rel err", "tol", "status"
            );
            for r in &reports {
                let ok = r.passed();
                all_ok &= ok;
                println!(
                    "{:<24} {:>14.3e} {:>10.0e} {:>8}",
                    r.name,
                    r.worst_rel_err,
                    r.tol,
                    if ok { "pass" } else { "FAIL" }
                );
            }
            println!(
                "{} checks x {} seeds in {:.2}s",
                reports.len(),
                reps,
                started.elapsed().as_secs_f64()
            );
            Ok(if all_ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            })
        }
        Cmd::Bench {
            size,
            channels,
            t,
            k,
            grid,
            sel,
            runs,
            seed,
        } => {
            let report = run_bench(size.0, size.1, channels, t, k, grid, sel, runs, seed)?;
            print!("{report}");
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Respmap {
            ckpt,
            image,
            vertex,
            out,
        } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let (params, cfg, ablation) = net_from_checkpoint(&checkpoint)?;
            let img = pnm::read_ppm(&image)?;
            let rm = response_map(&params, &cfg, &img, vertex, ablation)?;
            println!(
                "vertex {vertex}: projection row sums to {:.12} (expected 1) over {}x{} grid",
                rm.row_sum, rm.grid.0, rm.grid.1
            );
            pnm::write_pgm(&rm.gray, &out)?;
            println!("wrote response map to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version requests are successful exits; everything
            // else is a usage error
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
