//! Command-line front end: generates synthetic clips, trains the pruning
//! heads, runs the pipeline with full artifact dumps, and drives the
//! standing experiments. All heavy lifting lives in the library; this
//! binary parses arguments, resolves the configuration, and writes files.
//!
//! Exit codes: 0 on success, 2 for configuration/usage/I-O problems, 3
//! for numerical failures (diverged training, failed gradient check).

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use vpp_core::config::{analytic_pkr, resolve_schedule, PipelineConfig};
use vpp_core::error::{Result, VppError};
use vpp_core::gradcheck::check_all;
use vpp_core::io::{image_to_gray, write_pgm};
use vpp_core::losses::DEFAULT_TRAIN_STEPS;
use vpp_core::metrics::compute_ioi;
use vpp_core::pipeline::{
    ablate_position, ablation_csv, analytic_flop_ledger, benchmark_suite, coverage_vs_random,
    dense_flops_per_frame, flops_csv, init_vit, mask_shading, masks_csv, run_video,
    scene_switch_experiment, scene_switch_suite, train_heads, PipelineHeads,
};
use vpp_core::synth::{generate, SynthScenario};

#[derive(Parser)]
#[command(
    name = "vpp",
    version,
    about = "Video patch pruning on a miniature vision transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Arguments shared by every subcommand. The seed is deliberately
/// mandatory: every stream in the system derives from it, and an
/// accidental default would masquerade as a reproducibility guarantee.
#[derive(Args)]
struct Common {
    /// Master seed for all random streams (backbone init, heads, decisions).
    #[arg(long)]
    seed: u64,
    /// Pipeline configuration file (`key = value` lines); defaults apply
    /// for every key the file omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single-key override applied after the file, `--set key=value`;
    /// repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn build(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::from_config_str(&fs::read_to_string(path)?)?,
            None => PipelineConfig::default(),
        };
        for kv in &self.set {
            let (key, value) = kv.split_once('=').ok_or_else(|| {
                VppError::Parse(format!("override {kv:?} is not of the form key=value"))
            })?;
            cfg.apply_override(key.trim(), value.trim())?;
        }
        cfg.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the five-clip synthetic benchmark as PGM frames with
    /// per-patch ground truth.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Output directory (one subdirectory per clip).
        #[arg(long, default_value = "out/clips")]
        out_dir: PathBuf,
        /// Prepend three blank warmup frames to every clip.
        #[arg(long)]
        switch: bool,
    },
    /// Train the pruning heads on the benchmark suite and write a
    /// checkpoint plus per-step loss curves.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out/train")]
        out_dir: PathBuf,
        /// Optimizer steps (defaults to the configured budget).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run the pipeline over one clip and dump every artifact: masks,
    /// per-patch survival shading, cost ledger, coverage summary.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out/run")]
        out_dir: PathBuf,
        /// Trained-head checkpoint; freshly initialized heads when absent.
        #[arg(long)]
        heads: Option<PathBuf>,
        /// Scenario file to run; benchmark clip 0 when absent.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Train and evaluate the four stage layouts (full / image-only /
    /// constant-cardinality / dense) at one density goal.
    AblatePosition {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out/ablation")]
        out_dir: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Measure how fast masks re-lock onto content after blank warmup
    /// frames, against the density-matched random baseline.
    SceneSwitch {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out/switch")]
        out_dir: PathBuf,
        /// Trained-head checkpoint; freshly initialized heads when absent.
        #[arg(long)]
        heads: Option<PathBuf>,
    },
    /// Finite-difference check of the head gradients on random instances;
    /// exits 3 if any parameter misses tolerance.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Print the analytic cost ledger of the configured schedule next to
    /// the dense reference.
    Flops {
        #[command(flatten)]
        common: Common,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = dispatch(cli.command) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { common, out_dir, switch } => cmd_generate(&common, &out_dir, switch),
        Command::Train { common, out_dir, steps } => cmd_train(&common, &out_dir, steps),
        Command::Run { common, out_dir, heads, scenario } => {
            cmd_run(&common, &out_dir, heads.as_deref(), scenario.as_deref())
        }
        Command::AblatePosition { common, out_dir, steps } => {
            cmd_ablate(&common, &out_dir, steps)
        }
        Command::SceneSwitch { common, out_dir, heads } => {
            cmd_switch(&common, &out_dir, heads.as_deref())
        }
        Command::Gradcheck { common, instances, tolerance } => {
            cmd_gradcheck(&common, instances, tolerance)
        }
        Command::Flops { common } => cmd_flops(&common),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn suite_for(cfg: &PipelineConfig, switch: bool) -> Vec<SynthScenario> {
    let mut suite = if switch {
        scene_switch_suite(cfg.seed)
    } else {
        benchmark_suite(cfg.seed)
    };
    for s in &mut suite {
        s.grid = cfg.vit.grid;
        s.patch_size = cfg.vit.patch_size;
    }
    suite
}

fn cmd_generate(common: &Common, out_dir: &Path, switch: bool) -> Result<()> {
    let cfg = common.build()?;
    for (i, scenario) in suite_for(&cfg, switch).iter().enumerate() {
        let clip_dir = out_dir.join(format!("clip_{i}"));
        fs::create_dir_all(&clip_dir)?;
        let video = generate(scenario)?;
        write_text(&clip_dir.join("scenario.cfg"), &scenario.to_config_string())?;
        let mut gt = String::from("frame,instance,patch\n");
        for (t, frame) in video.frames.iter().enumerate() {
            let gray = image_to_gray(frame);
            write_pgm(&clip_dir.join(format!("frame_{t:03}.pgm")), frame.width, frame.height, &gray)?;
            for inst in &video.gt[t] {
                for (patch, &covered) in inst.patches.iter().enumerate() {
                    if covered {
                        gt.push_str(&format!("{t},{},{patch}\n", inst.instance));
                    }
                }
            }
        }
        write_text(&clip_dir.join("gt.csv"), &gt)?;
        println!(
            "clip_{i}: {} frames, {} instances -> {}",
            video.frames.len(),
            scenario.instances.len(),
            clip_dir.display()
        );
    }
    Ok(())
}

fn cmd_train(common: &Common, out_dir: &Path, steps: Option<usize>) -> Result<()> {
    let cfg = common.build()?;
    let sched = resolve_schedule(&cfg)?;
    let weights = init_vit(&cfg)?;
    let mut heads = PipelineHeads::new(&cfg, &sched)?;
    let videos = suite_for(&cfg, false)
        .iter()
        .map(generate)
        .collect::<Result<Vec<_>>>()?;
    let steps = steps.unwrap_or(if cfg.train_steps > 0 { cfg.train_steps } else { DEFAULT_TRAIN_STEPS });
    let report = train_heads(&cfg, &sched, &weights, &mut heads, &videos, steps)?;

    fs::create_dir_all(out_dir)?;
    heads.save(&out_dir.join("heads.bin"))?;
    write_text(&out_dir.join("curves.csv"), &report.curves_csv)?;
    write_text(&out_dir.join("config.cfg"), &cfg.to_config_string())?;

    println!("trained {steps} steps on {} clips", videos.len());
    println!("goal keep ratio {:.4} | analytic {:.4} | realized {:.4}", cfg.goal_pkr, analytic_pkr(&cfg, &sched), report.final_pkr);
    for (k, (&d, &t)) in report.stage_densities.iter().zip(&sched.sm_targets).enumerate() {
        println!("stage {k}: density {d:.4} target {t:.4}");
    }
    if let Some(p) = report.map_p_mean {
        println!("early-stage keep probability mean {p:.4} target {:.4}", sched.kappa_init);
    }
    println!("artifacts -> {}", out_dir.display());
    Ok(())
}

fn load_or_init_heads(
    cfg: &PipelineConfig,
    sched: &vpp_core::mapsm::SparsitySchedule,
    path: Option<&Path>,
) -> Result<PipelineHeads> {
    match path {
        Some(p) => PipelineHeads::load(p, cfg, sched),
        None => PipelineHeads::new(cfg, sched),
    }
}

fn cmd_run(
    common: &Common,
    out_dir: &Path,
    heads_path: Option<&Path>,
    scenario_path: Option<&Path>,
) -> Result<()> {
    let cfg = common.build()?;
    let sched = resolve_schedule(&cfg)?;
    let weights = init_vit(&cfg)?;
    let heads = load_or_init_heads(&cfg, &sched, heads_path)?;
    let scenario = match scenario_path {
        Some(p) => SynthScenario::from_config_str(&fs::read_to_string(p)?)?,
        None => suite_for(&cfg, false).remove(0),
    };
    let video = generate(&scenario)?;
    let art = run_video(&cfg, &sched, &weights, &heads, &video, 0)?;

    fs::create_dir_all(out_dir)?;
    write_text(&out_dir.join("masks.csv"), &masks_csv(&art))?;
    let dense = video.frames.len() as f64 * dense_flops_per_frame(&cfg.vit);
    write_text(&out_dir.join("flops.csv"), &flops_csv(&art.flops, dense))?;
    for (t, frame_masks) in art.masks.iter().enumerate() {
        let (w, h, px) = mask_shading(frame_masks, &cfg.vit)?;
        write_pgm(&out_dir.join(format!("shading_{t:03}.pgm")), w, h, &px)?;
    }

    let ioi = compute_ioi(&art.masks, &video.gt)?;
    let (ours, random) = coverage_vs_random(&cfg, &art, &video, 10)?;
    println!("keep ratio {:.4} (goal {:.4})", art.pkr.mean, cfg.goal_pkr);
    println!("coverage {ours:.4} vs density-matched random {random:.4}");
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "coverage by size: small {} | medium {} | large {}",
        fmt(ioi.small),
        fmt(ioi.medium),
        fmt(ioi.large)
    );
    println!("flops {:.3e} vs dense {dense:.3e} ({:.1}% saved)", art.flops.total(), 100.0 * (1.0 - art.flops.total() / dense));
    if art.degenerate_events > 0 {
        println!("note: {} stage applications hit the all-drop repair", art.degenerate_events);
    }
    println!("artifacts -> {}", out_dir.display());
    Ok(())
}

fn cmd_ablate(common: &Common, out_dir: &Path, steps: Option<usize>) -> Result<()> {
    let cfg = common.build()?;
    let steps = steps.unwrap_or(if cfg.train_steps > 0 { cfg.train_steps } else { DEFAULT_TRAIN_STEPS });
    let rows = ablate_position(&cfg, &suite_for(&cfg, false), steps)?;
    fs::create_dir_all(out_dir)?;
    let csv = ablation_csv(&rows);
    write_text(&out_dir.join("ablation.csv"), &csv)?;
    print!("{csv}");
    println!("artifacts -> {}", out_dir.display());
    Ok(())
}

fn cmd_switch(common: &Common, out_dir: &Path, heads_path: Option<&Path>) -> Result<()> {
    let cfg = common.build()?;
    let sched = resolve_schedule(&cfg)?;
    let weights = init_vit(&cfg)?;
    let heads = load_or_init_heads(&cfg, &sched, heads_path)?;
    fs::create_dir_all(out_dir)?;
    for (i, scenario) in suite_for(&cfg, true).iter().enumerate() {
        let video = generate(scenario)?;
        let report = scene_switch_experiment(&cfg, &sched, &weights, &heads, &video)?;
        write_text(&out_dir.join(format!("switch_clip_{i}.csv")), &report.csv())?;
        let after = report.onset + 1;
        let line = match (report.ioi.get(after), report.random_ioi.get(after)) {
            (Some(Some(a)), Some(Some(b))) => {
                format!("coverage {a:.4} vs random {b:.4} one frame after onset")
            }
            _ => "clip too short to score the post-onset frame".to_string(),
        };
        println!("clip_{i}: onset at frame {}, {line}", report.onset);
    }
    println!("artifacts -> {}", out_dir.display());
    Ok(())
}

fn cmd_gradcheck(common: &Common, instances: usize, tolerance: f64) -> Result<()> {
    let cfg = common.build()?;
    let report = check_all(cfg.seed, instances, tolerance)?;
    print!("{}", report.csv());
    if report.all_pass() {
        println!("gradient check passed: {} instances within {tolerance:e}", instances);
        Ok(())
    } else {
        Err(VppError::Numerical(format!(
            "{} of {} gradient checks exceeded {tolerance:e}",
            report.failures().len(),
            report.entries.len()
        )))
    }
}

fn cmd_flops(common: &Common) -> Result<()> {
    let cfg = common.build()?;
    let sched = resolve_schedule(&cfg)?;
    let ledger = analytic_flop_ledger(&cfg, &sched)?;
    print!("{}", flops_csv(&ledger, dense_flops_per_frame(&cfg.vit)));
    Ok(())
}
