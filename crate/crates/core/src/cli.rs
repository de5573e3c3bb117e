//! Command-line front end: `ssc <subcommand> [flags]`.
//!
//! Exit codes: 0 on success, 1 when the library reports an error, 2 on bad
//! usage.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ablation::{AblationRunner, Preset};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::Evaluator;
use crate::grid::io::{load_grid, save_grid};
use crate::mae::{argmax_grid, depth_axis, train_mae, MaeItem, MaeNet};
use crate::nn::suite::{gradient_suite, SUITE_TOLERANCE};
use crate::stage1::{prepare_input, prepare_sample, train_stage1, LossParts, Stage1Net, TrainTrace};
use crate::synth::{load_dataset, make_sample, save_sample, scene_dir, Sample};
use crate::visibility::VisibilityMask;

#[derive(Debug, Parser)]
#[command(name = "ssc", about = "Visibility-aware semantic scene completion on synthetic voxel scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration file (`key = value` with sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for network initialization, shuffling and noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Depth relaxation of the visibility partition, meters ("inf" for
    /// out-of-view only).
    #[arg(long = "theta-d", value_parser = parse_theta)]
    theta_d: Option<f64>,
    /// Horizontal noise range, voxels.
    #[arg(long)]
    rh: Option<usize>,
    /// Depth noise range, voxels.
    #[arg(long)]
    rd: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render synthetic scenes into scene directories.
    GenData {
        /// Inclusive seed range `a..b`, or a single seed.
        #[arg(long, value_parser = parse_seeds)]
        seeds: SeedRange,
        #[command(flatten)]
        common: Common,
    },
    /// Train the visible-region network.
    TrainStage1 {
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the completion network on top of a trained stage 1.
    TrainStage2 {
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint.
        #[arg(long)]
        stage1: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Predict full grids for every scene of a dataset.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
        /// Stage-2 checkpoint; without it only visible voxels are labeled.
        #[arg(long)]
        stage2: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score predictions against ground truth.
    Eval {
        /// A grid file, or a directory of scene directories holding pred.vgrd.
        #[arg(long)]
        pred: PathBuf,
        /// A grid file, or a dataset directory.
        #[arg(long)]
        gt: PathBuf,
        /// Visibility mask for single-file mode.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run an ablation table.
    Ablate {
        #[arg(long, value_parser = ["table3", "table4", "table5"])]
        preset: String,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct SeedRange {
    first: u64,
    last: u64,
}

fn parse_seeds(s: &str) -> std::result::Result<SeedRange, String> {
    let (a, b) = match s.split_once("..") {
        Some((a, b)) => (a, b.strip_prefix('=').unwrap_or(b)),
        None => (s, s),
    };
    let first: u64 = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
    let last: u64 = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
    if last < first {
        return Err(format!("empty seed range {s}"));
    }
    Ok(SeedRange { first, last })
}

fn parse_theta(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = if s == "inf" { f64::INFINITY } else { s.parse().map_err(|e| format!("{s:?}: {e}"))? };
    if !(v >= 0.0) {
        return Err(format!("theta-d must be >= 0, got {s}"));
    }
    Ok(v)
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code. Output goes to stdout, errors to stderr.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(t) = common.theta_d {
        cfg.stage1.theta_d = t;
    }
    if let Some(r) = common.rh {
        cfg.noise.r_h = r;
    }
    if let Some(r) = common.rd {
        cfg.noise.r_d = r;
    }
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn seed_of(cfg: &RunConfig) -> u64 {
    cfg.seeds[0]
}

fn run(cmd: Command) -> Result<String> {
    match cmd {
        Command::GenData { seeds, common } => {
            let cfg = load_config(&common)?;
            let out = common.out.clone().unwrap_or(cfg.data_dir.clone());
            std::fs::create_dir_all(&out)?;
            for seed in seeds.first..=seeds.last {
                save_sample(&out, &make_sample(&cfg.scene, seed)?)?;
            }
            Ok(format!("wrote {} scenes to {}\n", seeds.last - seeds.first + 1, out.display()))
        }
        Command::TrainStage1 { data, common } => {
            let cfg = load_config(&common)?;
            let samples = load_dataset(&data)?;
            let inputs = samples.iter().map(|s| prepare_sample(&cfg.stage1, &cfg.scene.meta, s)).collect::<Result<Vec<_>>>()?;
            let seed = seed_of(&cfg);
            let mut net = Stage1Net::new(cfg.stage1, seed);
            let trace = train_stage1(&inputs, &mut net, &crate::stage1::TrainOptions { seed, ..cfg.stage1_opts })?;
            write_outputs(&cfg, &net, "stage1", &trace)
        }
        Command::TrainStage2 { data, stage1, common } => {
            let cfg = load_config(&common)?;
            let samples = load_dataset(&data)?;
            let seed = seed_of(&cfg);
            let mut s1 = Stage1Net::new(cfg.stage1, seed);
            load_checkpoint(&mut s1, &stage1)?;
            let mut items = Vec::with_capacity(samples.len());
            for s in &samples {
                let input = prepare_sample(&cfg.stage1, &cfg.scene.meta, s)?;
                let context = if cfg.mae.context_channels > 0 { Some(s1.forward(&input)?.f3d2) } else { None };
                items.push(MaeItem {
                    visible_labels: s.grid.clone(),
                    mask: input.mask.clone(),
                    gt: s.grid.clone(),
                    context,
                    depth_axis: depth_axis(&s.camera),
                });
            }
            let mut mae = MaeNet::new(cfg.mae, seed);
            let trace = train_mae(&items, &mut mae, &cfg.noise, &crate::stage1::TrainOptions { seed, ..cfg.mae_opts })?;
            write_outputs(&cfg, &mae, "stage2", &trace)
        }
        Command::Infer { data, stage1, stage2, common } => {
            let cfg = load_config(&common)?;
            let samples = load_dataset(&data)?;
            let seed = seed_of(&cfg);
            let mut s1 = Stage1Net::new(cfg.stage1, seed);
            load_checkpoint(&mut s1, &stage1)?;
            let mut mae = match &stage2 {
                Some(p) => {
                    let mut m = MaeNet::new(cfg.mae, seed);
                    load_checkpoint(&mut m, p)?;
                    Some(m)
                }
                None => None,
            };
            std::fs::create_dir_all(&cfg.out_dir)?;
            for s in &samples {
                let pred = infer_one(&cfg, &mut s1, mae.as_mut(), s)?;
                let dir = scene_dir(&cfg.out_dir, s.seed);
                std::fs::create_dir_all(&dir)?;
                save_grid(&pred.0, dir.join("pred.vgrd"))?;
                pred.1.save(dir.join("visibility.vmsk"))?;
            }
            Ok(format!("wrote {} predictions to {}\n", samples.len(), cfg.out_dir.display()))
        }
        Command::Eval { pred, gt, mask, common } => {
            let cfg = load_config(&common)?;
            let mut ev = Evaluator::new(cfg.scene.num_classes);
            if pred.is_dir() {
                if mask.is_some() {
                    return Err(Error::Config("--mask applies to single grid files only".into()));
                }
                for s in load_dataset(&gt)? {
                    let dir = scene_dir(&pred, s.seed);
                    let p = load_grid(dir.join("pred.vgrd"))?;
                    let m_path = dir.join("visibility.vmsk");
                    let m = if m_path.exists() { Some(VisibilityMask::load(m_path)?) } else { None };
                    ev.add(&p, &s.grid, m.as_ref())?;
                }
            } else {
                let m = mask.map(VisibilityMask::load).transpose()?;
                ev.add(&load_grid(&pred)?, &load_grid(&gt)?, m.as_ref())?;
            }
            let report = ev.report();
            if let Some(out) = &common.out {
                std::fs::create_dir_all(out)?;
                std::fs::write(out.join("report.txt"), report.to_text())?;
                std::fs::write(out.join("report.csv"), report.to_csv())?;
            }
            Ok(report.to_text())
        }
        Command::Ablate { preset, common } => {
            let mut cfg = match &common.config {
                Some(_) => load_config(&common)?,
                None => {
                    let mut c = RunConfig::for_preset("bench")?;
                    if let Some(s) = common.seed {
                        c.seeds = vec![s];
                    }
                    c
                }
            };
            let preset = Preset::parse(&preset).expect("clap restricts the preset names");
            if let Some(o) = &common.out {
                cfg.out_dir = o.clone();
            }
            let report = AblationRunner::new(cfg.ablation())?.run(preset)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            std::fs::write(cfg.out_dir.join(format!("{}.txt", preset.name())), report.to_text())?;
            std::fs::write(cfg.out_dir.join(format!("{}.csv", preset.name())), report.to_csv())?;
            Ok(report.to_text())
        }
        Command::Gradcheck { common } => {
            let entries = gradient_suite(common.seed.unwrap_or(0))?;
            let mut s = String::new();
            let mut failed = 0;
            for e in &entries {
                let ok = e.passed();
                failed += usize::from(!ok);
                let status = if ok { "ok" } else { "FAIL" };
                let _ = writeln!(s, "{:<18} {:<17} {:<16} {:.2e} {status}", e.op, e.wrt, format!("{:?}", e.shape), e.check.max_rel_error);
            }
            if failed > 0 {
                eprint!("{s}");
                return Err(Error::Contract(format!("{failed} gradient checks above {SUITE_TOLERANCE}")));
            }
            let _ = writeln!(s, "all {} checks below {SUITE_TOLERANCE}", entries.len());
            Ok(s)
        }
    }
}

/// Stage-1 labels on visible voxels, completed by stage 2 when given.
fn infer_one(cfg: &RunConfig, s1: &mut Stage1Net, mae: Option<&mut MaeNet>, s: &Sample) -> Result<(crate::grid::VoxelGrid, VisibilityMask)> {
    let input = prepare_input(&cfg.stage1, &cfg.scene.meta, &s.camera, s.image.to_tensor(), s.depth.clone(), None)?;
    let out = s1.forward(&input)?;
    let pred = match mae {
        Some(m) => {
            let context = (cfg.mae.context_channels > 0).then_some(&out.f3d2);
            let logits = m.forward(&out.o_v, &out.mask, cfg.noise.highest_level(), context)?;
            argmax_grid(&logits, &out.o_v)
        }
        None => out.o_v.clone(),
    };
    Ok((pred, out.mask))
}

fn trace_csv(trace: &TrainTrace) -> String {
    let mut s = String::from("step,total,ce,geo,sem,depth\n");
    for (i, (l, p)) in trace.losses.iter().zip(&trace.parts).enumerate() {
        let LossParts { ce, geo, sem, depth } = p;
        let _ = writeln!(s, "{i},{l},{ce},{geo},{sem},{depth}");
    }
    s
}

fn write_outputs(cfg: &RunConfig, net: &dyn crate::nn::Module, stage: &str, trace: &TrainTrace) -> Result<String> {
    let out: &Path = &cfg.out_dir;
    std::fs::create_dir_all(out)?;
    save_checkpoint(net, out.join(format!("{stage}.ckpt")))?;
    std::fs::write(out.join(format!("{stage}_losses.csv")), trace_csv(trace))?;
    std::fs::write(out.join("config.txt"), cfg.to_text())?;
    let last = trace.losses.last().copied().unwrap_or(f64::NAN);
    Ok(format!("{stage}: {} steps, final loss {last:.4}, checkpoint in {}\n", trace.losses.len(), out.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_ranges() {
        assert_eq!(parse_seeds("0..99"), Ok(SeedRange { first: 0, last: 99 }));
        assert_eq!(parse_seeds("3..=4"), Ok(SeedRange { first: 3, last: 4 }));
        assert_eq!(parse_seeds("7"), Ok(SeedRange { first: 7, last: 7 }));
        assert!(parse_seeds("5..2").is_err());
        assert!(parse_seeds("a..b").is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(cli_main(["ssc", "frobnicate"]), 2);
        assert_eq!(cli_main(["ssc", "eval", "--pred", "a", "--gt", "b", "--bogus"]), 2);
        assert_eq!(cli_main(["ssc", "ablate", "--preset", "table9"]), 2);
        assert_eq!(cli_main(["ssc", "gen-data", "--seeds", "9..1"]), 2);
        assert_eq!(cli_main(["ssc", "--help"]), 0);
    }

    #[test]
    fn library_errors_exit_1() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing.vgrd");
        let m = missing.to_str().unwrap();
        assert_eq!(cli_main(["ssc", "eval", "--pred", m, "--gt", m]), 1);
    }
}
