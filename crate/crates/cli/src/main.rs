//! Command-line front end for scene generation, refinement, baselines,
//! evaluation, bound diagnostics and batch experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use mvdiff::baselines::write_graph_csv;
use mvdiff::diffusion::{run_denoising, vlb_terms, NoiseSchedule};
use mvdiff::geometry::generate_scene;
use mvdiff::geometry::io::{load_scene, save_scene};
use mvdiff::harness::{
    build_prior, make_surrogate, perturbed_prior, read_poses, run_baselines, run_experiment,
    summary_header, summary_row, trial_rng, vlb_csv, write_method_summary, write_poses,
    ExperimentConfig, PriorKind, Stream, SurrogateKind,
};
use mvdiff::metrics::{evaluate, write_pairs_csv};

#[derive(Parser, Debug)]
#[command(
    name = "mvdiff",
    version,
    about = "Multiview registration refinement by SE(3)^N diffusion"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config file (brace-structured text).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Worker threads for independent trials.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["oracle", "kabsch"])]
    surrogate: Option<String>,
    #[arg(long, global = true, value_parser = ["perturbed", "attention", "baseline"])]
    prior: Option<String>,
    /// Disable the stochastic term of the reverse steps.
    #[arg(long, global = true)]
    noise_off: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene directory.
    Gen {
        /// Fixed scan count (overrides the config range).
        #[arg(long)]
        scans: Option<usize>,
    },
    /// Refine a prior for a scene directory.
    Denoise {
        #[arg(long)]
        scene: PathBuf,
        /// Pose file to use as the prior instead of building one.
        #[arg(long)]
        prior_file: Option<PathBuf>,
    },
    /// Pairwise registration plus synchronization for a scene directory.
    Baseline {
        #[arg(long)]
        scene: PathBuf,
    },
    /// Compare two pose files.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Variational-bound terms for a scene directory.
    Vlb {
        #[arg(long)]
        scene: PathBuf,
    },
    /// Full experiment from a config.
    Run,
}

fn resolve_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.diffusion.seed = s;
    }
    if let Some(t) = c.trials {
        cfg.trials = t;
    }
    if let Some(o) = &c.out {
        cfg.output = o.clone();
    }
    if let Some(s) = &c.surrogate {
        cfg.surrogate.kind = SurrogateKind::parse(s)?;
    }
    if let Some(p) = &c.prior {
        cfg.prior.kind = PriorKind::parse(p)?;
    }
    if c.noise_off {
        cfg.diffusion.reverse_noise = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    let out = cfg.output.clone();
    match cli.command {
        Command::Gen { scans } => {
            let mut scene_cfg = cfg.scene.clone();
            if let Some(n) = scans {
                scene_cfg = scene_cfg.with_scans(n);
            }
            scene_cfg.seed = cfg.seed;
            let scene = generate_scene(&scene_cfg, &mut trial_rng(cfg.seed, 0, Stream::Scene))?;
            save_scene(&out, &scene)?;
            write_poses(&out.join("gt.txt"), &scene.gt)?;
            println!("wrote {} scans to {}", scene.len(), out.display());
        }
        Command::Denoise { scene, prior_file } => {
            let scene = load_scene(&scene)?;
            let prior = match prior_file {
                Some(p) => read_poses(&p)?,
                None => build_prior(&cfg, &scene, &mut trial_rng(cfg.seed, 0, Stream::Prior))?,
            };
            let schedule = NoiseSchedule::cosine(cfg.diffusion.train_steps)?;
            let surrogate = make_surrogate(&cfg.surrogate, &scene)?;
            let mut rng = trial_rng(cfg.seed, 0, Stream::Diffusion);
            let traj = run_denoising(
                &scene,
                &prior,
                surrogate.as_ref(),
                &schedule,
                &cfg.diffusion,
                &mut rng,
            )?;
            let refined = traj.last().expect("non-empty trajectory");
            ensure_dir(&out)?;
            write_poses(&out.join("prior.txt"), &prior)?;
            write_poses(&out.join("refined.txt"), refined)?;
            let traj_dir = out.join("trajectory");
            ensure_dir(&traj_dir)?;
            for (k, p) in traj.iter().enumerate() {
                write_poses(&traj_dir.join(format!("step_{k:03}.txt")), p)?;
            }
            let th = &cfg.thresholds;
            let rp = evaluate(&prior, &scene.gt, th)?;
            let rr = evaluate(refined, &scene.gt, th)?;
            write_pairs_csv(&out.join("pairs_prior.csv"), &rp.pairs)?;
            write_pairs_csv(&out.join("pairs_refined.csv"), &rr.pairs)?;
            write_method_summary(
                &out.join("summary.csv"),
                th,
                &[("prior", &rp), ("refined", &rr)],
            )?;
            println!(
                "prior RE {:.4} deg TE {:.4} m -> refined RE {:.6} deg TE {:.6} m",
                rp.re_mean, rp.te_mean, rr.re_mean, rr.te_mean
            );
        }
        Command::Baseline { scene } => {
            let scene = load_scene(&scene)?;
            let mut rng = trial_rng(cfg.seed, 0, Stream::Baseline);
            let (graph, sync, chain) = run_baselines(&scene, &cfg.baseline.graph, &mut rng)?;
            ensure_dir(&out)?;
            write_graph_csv(&out.join("graph.csv"), &graph)?;
            write_poses(&out.join("sync.txt"), &sync)?;
            write_poses(&out.join("chain.txt"), &chain)?;
            let th = &cfg.thresholds;
            let rs = evaluate(&sync, &scene.gt, th)?;
            let rc = evaluate(&chain, &scene.gt, th)?;
            write_pairs_csv(&out.join("pairs_sync.csv"), &rs.pairs)?;
            write_pairs_csv(&out.join("pairs_chain.csv"), &rc.pairs)?;
            write_method_summary(
                &out.join("summary.csv"),
                th,
                &[("sync", &rs), ("chain", &rc)],
            )?;
            println!(
                "{} edges; sync RE {:.4} deg TE {:.4} m; chain RE {:.4} deg TE {:.4} m",
                graph.edges.len(),
                rs.re_mean,
                rs.te_mean,
                rc.re_mean,
                rc.te_mean
            );
        }
        Command::Eval { pred, gt } => {
            let report = evaluate(&read_poses(&pred)?, &read_poses(&gt)?, &cfg.thresholds)?;
            println!("{}", summary_header(&cfg.thresholds).join(","));
            println!("{}", summary_row("pred", "0", &report).join(","));
            if cli.common.out.is_some() {
                ensure_dir(&out)?;
                write_pairs_csv(&out.join("pairs.csv"), &report.pairs)?;
                write_method_summary(
                    &out.join("summary.csv"),
                    &cfg.thresholds,
                    &[("pred", &report)],
                )?;
            }
        }
        Command::Vlb { scene } => {
            let scene = load_scene(&scene)?;
            let prior = perturbed_prior(
                &scene.gt,
                cfg.prior.rot_deg,
                cfg.prior.trans_m,
                &mut trial_rng(cfg.seed, 0, Stream::Prior),
            )?;
            let schedule = NoiseSchedule::cosine(cfg.diffusion.train_steps)?;
            let surrogate = make_surrogate(&cfg.surrogate, &scene)?;
            let mut rng = trial_rng(cfg.seed, 0, Stream::Diffusion);
            let terms = vlb_terms(
                &scene,
                &scene.gt,
                &prior,
                surrogate.as_ref(),
                &schedule,
                cfg.diffusion.gamma,
                &mut rng,
            )?;
            ensure_dir(&out)?;
            let path = out.join("vlb.csv");
            fs::write(&path, vlb_csv(&terms, schedule.steps()))
                .with_context(|| format!("writing {}", path.display()))?;
            println!(
                "residual {:.6e}  denoising sum {:.6e}  prior matching {:.6e}",
                terms.residual_term,
                terms.denoising_sum(),
                terms.prior_matching_term
            );
        }
        Command::Run => {
            let report = run_experiment(&cfg, cli.common.jobs)?;
            println!(
                "{} trials ok, {} failed; report in {}",
                report.results.len(),
                report.failures.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.common.jobs == 0 {
        eprintln!("error: --jobs must be at least 1");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
