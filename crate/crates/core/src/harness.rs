//! Batch experiments: scene generation, prior construction, diffusion
//! refinement, baselines, evaluation and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{attention_poses, AAConfig, DEFAULT_TOKEN_LEVEL};
use crate::baselines::{
    align_gauge, build_pairwise_graph, chain_init, synchronize, EdgeWeighting, GraphMode,
    GraphOptions, PoseGraph,
};
use crate::conf::{format_f64, Block, Value};
use crate::diffusion::{
    run_denoising, DiffusionConfig, NoiseScales, NoiseSchedule, PoseSet, VlbTerms,
};
use crate::error::{Error, Result};
use crate::geometry::io::{scene_config_from_block, scene_config_to_block};
use crate::geometry::{generate_scene, Scene, SceneConfig};
use crate::lie::sample_random_pose;
use crate::metrics::{
    evaluate, summarize_pairs, total_loss, write_pairs_csv, EvalReport, LossBreakdown, LossConfig,
    MetricThresholds,
};
use crate::surrogate::{KabschSurrogate, OracleSurrogate, Surrogate};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Independent random stream for one purpose within one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Scene = 1,
    Prior = 2,
    Diffusion = 3,
    Baseline = 4,
}

/// Counter-mode keyed stream: the 32-byte seed packs master seed, trial
/// index and purpose, so streams never share a ChaCha key.
pub fn trial_rng(master: u64, trial: u64, stream: Stream) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&master.to_le_bytes());
    seed[8..16].copy_from_slice(&trial.to_le_bytes());
    seed[16..24].copy_from_slice(&(stream as u64).to_le_bytes());
    seed[24..].copy_from_slice(b"mvdiff01");
    ChaCha8Rng::from_seed(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SurrogateKind {
    #[default]
    Oracle,
    Kabsch,
}

impl SurrogateKind {
    pub fn name(&self) -> &'static str {
        match self {
            SurrogateKind::Oracle => "oracle",
            SurrogateKind::Kabsch => "kabsch",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(SurrogateKind::Oracle),
            "kabsch" => Ok(SurrogateKind::Kabsch),
            other => Err(Error::Parse(format!(
                "unknown surrogate `{other}` (oracle, kabsch)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PriorKind {
    #[default]
    Perturbed,
    Attention,
    Baseline,
}

impl PriorKind {
    pub fn name(&self) -> &'static str {
        match self {
            PriorKind::Perturbed => "perturbed",
            PriorKind::Attention => "attention",
            PriorKind::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "perturbed" => Ok(PriorKind::Perturbed),
            "attention" => Ok(PriorKind::Attention),
            "baseline" => Ok(PriorKind::Baseline),
            other => Err(Error::Parse(format!(
                "unknown prior `{other}` (perturbed, attention, baseline)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateConfig {
    pub kind: SurrogateKind,
    /// Tangent-space noise added to oracle residuals.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorConfig {
    pub kind: PriorKind,
    /// RMS rotation angle of the perturbation, degrees.
    pub rot_deg: f64,
    /// RMS translation offset of the perturbation, metres.
    pub trans_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub enabled: bool,
    pub graph: GraphOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub trials: usize,
    pub output: PathBuf,
    pub scene: SceneConfig,
    pub diffusion: DiffusionConfig,
    pub surrogate: SurrogateConfig,
    pub prior: PriorConfig,
    pub attention: AAConfig,
    pub token_level: usize,
    pub baseline: BaselineConfig,
    pub loss: LossConfig,
    pub thresholds: MetricThresholds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            trials: 1,
            output: PathBuf::from("mvdiff-out"),
            scene: SceneConfig::default(),
            diffusion: DiffusionConfig::default(),
            surrogate: SurrogateConfig {
                kind: SurrogateKind::Oracle,
                noise: 0.0,
            },
            prior: PriorConfig {
                kind: PriorKind::Perturbed,
                rot_deg: 20.0,
                trans_m: 0.5,
            },
            attention: AAConfig::default(),
            token_level: DEFAULT_TOKEN_LEVEL,
            baseline: BaselineConfig {
                enabled: true,
                graph: GraphOptions::default(),
            },
            loss: LossConfig::default(),
            thresholds: MetricThresholds::default(),
        }
    }
}

fn mode_name(m: GraphMode) -> &'static str {
    match m {
        GraphMode::Full => "full",
        GraphMode::OverlapPruned => "pruned",
    }
}

fn weighting_name(w: EdgeWeighting) -> &'static str {
    match w {
        EdgeWeighting::Overlap => "overlap",
        EdgeWeighting::Uniform => "uniform",
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials < 1 {
            return Err(Error::InvalidArgument("trials must be at least 1".into()));
        }
        self.scene.validate()?;
        self.diffusion.validate()?;
        self.attention.validate()?;
        self.loss.validate()?;
        self.thresholds.validate()?;
        if self.surrogate.noise.is_nan()
            || self.surrogate.noise < 0.0
            || self.prior.rot_deg.is_nan()
            || self.prior.rot_deg < 0.0
            || self.prior.trans_m.is_nan()
            || self.prior.trans_m < 0.0
        {
            return Err(Error::InvalidArgument(
                "noise and perturbation scales must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Reads a config file; absent keys keep their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let root = Block::parse(text)?;
        root.expect_keys(
            "config",
            &[
                "seed",
                "trials",
                "output",
                "scene",
                "diffusion",
                "surrogate",
                "prior",
                "attention",
                "baseline",
                "loss",
                "metrics",
            ],
        )?;
        let mut c = ExperimentConfig::default();
        c.seed = root.u64_or("seed", c.seed)?;
        c.trials = root.usize_or("trials", c.trials)?;
        c.output = PathBuf::from(root.str_or("output", &c.output.to_string_lossy())?);
        if let Some(b) = root.block("scene")? {
            c.scene = scene_config_from_block(b, &c.scene)?;
        }
        if let Some(b) = root.block("diffusion")? {
            b.expect_keys(
                "diffusion",
                &[
                    "gamma",
                    "train_steps",
                    "inference_steps",
                    "seed",
                    "reverse_noise",
                    "stochastic_init",
                    "rot_noise_scale",
                    "trans_noise_scale",
                ],
            )?;
            let d = &mut c.diffusion;
            d.gamma = b.f64_or("gamma", d.gamma)?;
            d.train_steps = b.usize_or("train_steps", d.train_steps)?;
            d.inference_steps = b.usize_or("inference_steps", d.inference_steps)?;
            d.seed = b.u64_or("seed", d.seed)?;
            d.reverse_noise = b.bool_or("reverse_noise", d.reverse_noise)?;
            d.stochastic_init = b.bool_or("stochastic_init", d.stochastic_init)?;
            d.noise_scales = NoiseScales {
                rotation: b.f64_or("rot_noise_scale", d.noise_scales.rotation)?,
                translation: b.f64_or("trans_noise_scale", d.noise_scales.translation)?,
            };
        }
        if let Some(b) = root.block("surrogate")? {
            b.expect_keys("surrogate", &["kind", "noise"])?;
            c.surrogate.kind = SurrogateKind::parse(&b.str_or("kind", c.surrogate.kind.name())?)?;
            c.surrogate.noise = b.f64_or("noise", c.surrogate.noise)?;
        }
        if let Some(b) = root.block("prior")? {
            b.expect_keys("prior", &["kind", "rot_deg", "trans_m"])?;
            c.prior.kind = PriorKind::parse(&b.str_or("kind", c.prior.kind.name())?)?;
            c.prior.rot_deg = b.f64_or("rot_deg", c.prior.rot_deg)?;
            c.prior.trans_m = b.f64_or("trans_m", c.prior.trans_m)?;
        }
        if let Some(b) = root.block("attention")? {
            b.expect_keys(
                "attention",
                &["layers", "heads", "dim", "seed", "token_level"],
            )?;
            let a = &mut c.attention;
            a.layers = b.usize_or("layers", a.layers)?;
            a.heads = b.usize_or("heads", a.heads)?;
            a.dim = b.usize_or("dim", a.dim)?;
            a.seed = b.u64_or("seed", a.seed)?;
            c.token_level = b.usize_or("token_level", c.token_level)?;
        }
        if let Some(b) = root.block("baseline")? {
            b.expect_keys(
                "baseline",
                &["enabled", "mode", "weighting", "noise", "outlier_rate"],
            )?;
            let g = &mut c.baseline.graph;
            c.baseline.enabled = b.bool_or("enabled", c.baseline.enabled)?;
            g.mode = match b.str_or("mode", mode_name(g.mode))?.as_str() {
                "full" => GraphMode::Full,
                "pruned" => GraphMode::OverlapPruned,
                other => {
                    return Err(Error::Parse(format!(
                        "unknown graph mode `{other}` (full, pruned)"
                    )))
                }
            };
            g.weighting = match b.str_or("weighting", weighting_name(g.weighting))?.as_str() {
                "overlap" => EdgeWeighting::Overlap,
                "uniform" => EdgeWeighting::Uniform,
                other => {
                    return Err(Error::Parse(format!(
                        "unknown weighting `{other}` (overlap, uniform)"
                    )))
                }
            };
            g.noise_scale = b.f64_or("noise", g.noise_scale)?;
            g.outlier_rate = b.f64_or("outlier_rate", g.outlier_rate)?;
        }
        if let Some(b) = root.block("loss")? {
            b.expect_keys("loss", &["gamma_t", "gamma_p", "huber_beta"])?;
            c.loss.gamma_t = b.f64_or("gamma_t", c.loss.gamma_t)?;
            c.loss.gamma_p = b.f64_or("gamma_p", c.loss.gamma_p)?;
            c.loss.huber_beta = b.f64_or("huber_beta", c.loss.huber_beta)?;
        }
        if let Some(b) = root.block("metrics")? {
            b.expect_keys(
                "metrics",
                &["rotation", "translation", "rr_rot", "rr_trans"],
            )?;
            let t = &mut c.thresholds;
            if let Some(v) = b.get("rotation") {
                t.rotation = v.as_f64_list()?;
            }
            if let Some(v) = b.get("translation") {
                t.translation = v.as_f64_list()?;
            }
            t.rr_rot = b.f64_or("rr_rot", t.rr_rot)?;
            t.rr_trans = b.f64_or("rr_trans", t.rr_trans)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The fully resolved config, in the same syntax [`Self::from_text`] reads.
    pub fn to_block(&self) -> Block {
        let mut root = Block::new();
        root.set("seed", Value::int(self.seed))
            .set("trials", Value::int(self.trials as u64))
            .set("output", Value::str(self.output.to_string_lossy()))
            .set("scene", Value::Block(scene_config_to_block(&self.scene)));

        let d = &self.diffusion;
        let mut b = Block::new();
        b.set("gamma", Value::num(d.gamma))
            .set("train_steps", Value::int(d.train_steps as u64))
            .set("inference_steps", Value::int(d.inference_steps as u64))
            .set("seed", Value::int(d.seed))
            .set("reverse_noise", Value::Bool(d.reverse_noise))
            .set("stochastic_init", Value::Bool(d.stochastic_init))
            .set("rot_noise_scale", Value::num(d.noise_scales.rotation))
            .set("trans_noise_scale", Value::num(d.noise_scales.translation));
        root.set("diffusion", Value::Block(b));

        let mut b = Block::new();
        b.set("kind", Value::str(self.surrogate.kind.name()))
            .set("noise", Value::num(self.surrogate.noise));
        root.set("surrogate", Value::Block(b));

        let mut b = Block::new();
        b.set("kind", Value::str(self.prior.kind.name()))
            .set("rot_deg", Value::num(self.prior.rot_deg))
            .set("trans_m", Value::num(self.prior.trans_m));
        root.set("prior", Value::Block(b));

        let a = &self.attention;
        let mut b = Block::new();
        b.set("layers", Value::int(a.layers as u64))
            .set("heads", Value::int(a.heads as u64))
            .set("dim", Value::int(a.dim as u64))
            .set("seed", Value::int(a.seed))
            .set("token_level", Value::int(self.token_level as u64));
        root.set("attention", Value::Block(b));

        let g = &self.baseline.graph;
        let mut b = Block::new();
        b.set("enabled", Value::Bool(self.baseline.enabled))
            .set("mode", Value::str(mode_name(g.mode)))
            .set("weighting", Value::str(weighting_name(g.weighting)))
            .set("noise", Value::num(g.noise_scale))
            .set("outlier_rate", Value::num(g.outlier_rate));
        root.set("baseline", Value::Block(b));

        let mut b = Block::new();
        b.set("gamma_t", Value::num(self.loss.gamma_t))
            .set("gamma_p", Value::num(self.loss.gamma_p))
            .set("huber_beta", Value::num(self.loss.huber_beta));
        root.set("loss", Value::Block(b));

        let t = &self.thresholds;
        let mut b = Block::new();
        b.set("rotation", Value::num_list(&t.rotation))
            .set("translation", Value::num_list(&t.translation))
            .set("rr_rot", Value::num(t.rr_rot))
            .set("rr_trans", Value::num(t.rr_trans));
        root.set("metrics", Value::Block(b));
        root
    }
}

/// Ground truth right-multiplied by random perturbations whose RMS rotation
/// angle and RMS translation are `rot_deg` and `trans_m`.
pub fn perturbed_prior<R: rand::Rng + ?Sized>(
    gt: &PoseSet,
    rot_deg: f64,
    trans_m: f64,
    rng: &mut R,
) -> Result<PoseSet> {
    let per_axis = 3f64.sqrt();
    let poses = gt
        .iter()
        .map(|g| {
            Ok(g.compose(&sample_random_pose(
                rng,
                rot_deg.to_radians() / per_axis,
                trans_m / per_axis,
            )?))
        })
        .collect::<Result<Vec<_>>>()?;
    PoseSet::new(poses)
}

pub fn make_surrogate(cfg: &SurrogateConfig, scene: &Scene) -> Result<Box<dyn Surrogate>> {
    Ok(match cfg.kind {
        SurrogateKind::Oracle => Box::new(OracleSurrogate {
            gt: scene.gt.clone(),
            noise_scale: cfg.noise,
        }),
        SurrogateKind::Kabsch => Box::new(KabschSurrogate::from_scene(scene)?),
    })
}

/// Pairwise graph plus its synchronized and chained solutions, gauge-aligned to scan 0 of the ground truth.
pub fn run_baselines<R: rand::Rng + ?Sized>(
    scene: &Scene,
    opts: &GraphOptions,
    rng: &mut R,
) -> Result<(PoseGraph, PoseSet, PoseSet)> {
    let graph = build_pairwise_graph(scene, opts, rng)?;
    let sync = align_gauge(&synchronize(&graph)?, &scene.gt)?;
    let chain = align_gauge(&chain_init(&graph)?, &scene.gt)?;
    Ok((graph, sync, chain))
}

pub fn build_prior(cfg: &ExperimentConfig, scene: &Scene, rng: &mut ChaCha8Rng) -> Result<PoseSet> {
    match cfg.prior.kind {
        PriorKind::Perturbed => {
            perturbed_prior(&scene.gt, cfg.prior.rot_deg, cfg.prior.trans_m, rng)
        }
        PriorKind::Attention => {
            let raw = attention_poses(&scene.scans, &cfg.attention, cfg.token_level)?;
            align_gauge(&raw, &scene.gt)
        }
        PriorKind::Baseline => Ok(run_baselines(scene, &cfg.baseline.graph, rng)?.1),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub method: String,
    pub poses: PoseSet,
    pub report: EvalReport,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial: usize,
    pub n_scans: usize,
    pub gt: PoseSet,
    pub methods: Vec<MethodResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialFailure {
    pub trial: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub results: Vec<TrialResult>,
    pub failures: Vec<TrialFailure>,
}

impl ExperimentReport {
    pub fn method(&self, trial: usize, method: &str) -> Option<&MethodResult> {
        self.results
            .iter()
            .find(|r| r.trial == trial)
            .and_then(|r| r.methods.iter().find(|m| m.method == method))
    }
}

fn method_result(
    name: &str,
    poses: PoseSet,
    scene: &Scene,
    cfg: &ExperimentConfig,
) -> Result<MethodResult> {
    Ok(MethodResult {
        method: name.to_string(),
        report: evaluate(&poses, &scene.gt, &cfg.thresholds)?,
        loss: total_loss(&poses, &scene.gt, scene, &cfg.loss)?,
        poses,
    })
}

/// Runs one trial with streams keyed by `(cfg.seed, trial)`.
pub fn run_trial(cfg: &ExperimentConfig, trial: usize) -> Result<TrialResult> {
    let t = trial as u64;
    let scene = generate_scene(&cfg.scene, &mut trial_rng(cfg.seed, t, Stream::Scene))?;
    let mut prior_rng = trial_rng(cfg.seed, t, Stream::Prior);
    let prior = build_prior(cfg, &scene, &mut prior_rng)?;

    let schedule = NoiseSchedule::cosine(cfg.diffusion.train_steps)?;
    let surrogate = make_surrogate(&cfg.surrogate, &scene)?;
    let mut diff_rng = trial_rng(cfg.seed, t, Stream::Diffusion);
    let trajectory = run_denoising(
        &scene,
        &prior,
        surrogate.as_ref(),
        &schedule,
        &cfg.diffusion,
        &mut diff_rng,
    )?;
    let refined = trajectory
        .into_iter()
        .last()
        .expect("trajectory has at least one state");

    let mut methods = vec![
        method_result("prior", prior, &scene, cfg)?,
        method_result("refined", refined, &scene, cfg)?,
    ];
    if cfg.baseline.enabled {
        let (_, sync, chain) = run_baselines(
            &scene,
            &cfg.baseline.graph,
            &mut trial_rng(cfg.seed, t, Stream::Baseline),
        )?;
        methods.push(method_result("sync", sync, &scene, cfg)?);
        methods.push(method_result("chain", chain, &scene, cfg)?);
    }
    Ok(TrialResult {
        trial,
        n_scans: scene.len(),
        gt: scene.gt,
        methods,
    })
}

/// Runs all trials on up to `jobs` threads; the outcome does not depend on `jobs`.
pub fn run_trials(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentReport> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<TrialResult>> = pool.install(|| {
        (0..cfg.trials)
            .into_par_iter()
            .map(|k| run_trial(cfg, k))
            .collect()
    });
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (trial, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(r) => results.push(r),
            Err(e) => {
                log::warn!("trial {trial} failed: {e}");
                failures.push(TrialFailure {
                    trial,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(ExperimentReport { results, failures })
}

/// Runs the experiment and writes its report under `cfg.output`.
///
/// Fails only when every trial fails; partial failures are listed in `failures.csv`.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentReport> {
    let report = run_trials(cfg, jobs)?;
    if report.results.is_empty() {
        fs::create_dir_all(&cfg.output).map_err(|e| Error::io(&cfg.output, e))?;
        write_failures(&cfg.output, &report.failures)?;
        return Err(Error::AllTrialsFailed {
            failures: report.failures.len(),
            first: report
                .failures
                .first()
                .map(|f| f.message.clone())
                .unwrap_or_default(),
        });
    }
    emit_report(&report, cfg, &cfg.output)?;
    Ok(report)
}

fn threshold_label(x: f64) -> String {
    format!("{x}")
}

pub fn summary_header(th: &MetricThresholds) -> Vec<String> {
    let mut h: Vec<String> = [
        "method", "trial", "RE_mean", "RE_med", "TE_mean", "TE_med", "RR",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend(
        th.rotation
            .iter()
            .map(|x| format!("ecdf_rot_{}", threshold_label(*x))),
    );
    h.extend(
        th.translation
            .iter()
            .map(|x| format!("ecdf_trans_{}", threshold_label(*x))),
    );
    h
}

/// One summary row; RR and ECDF entries are percentages.
pub fn summary_row(method: &str, trial: &str, r: &EvalReport) -> Vec<String> {
    let mut row = vec![
        method.to_string(),
        trial.to_string(),
        format_f64(r.re_mean),
        format_f64(r.re_median),
        format_f64(r.te_mean),
        format_f64(r.te_median),
        format_f64(100.0 * r.rr),
    ];
    row.extend(
        r.ecdf_rot
            .iter()
            .chain(&r.ecdf_trans)
            .map(|f| format_f64(100.0 * f)),
    );
    row
}

fn write_csv(path: &Path, rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A stand-alone summary table for single-scene commands (trial column `0`).
pub fn write_method_summary(
    path: &Path,
    th: &MetricThresholds,
    entries: &[(&str, &EvalReport)],
) -> Result<()> {
    let rows = std::iter::once(summary_header(th))
        .chain(entries.iter().map(|(m, r)| summary_row(m, "0", r)));
    write_csv(path, rows)
}

fn write_failures(dir: &Path, failures: &[TrialFailure]) -> Result<()> {
    let path = dir.join("failures.csv");
    let rows = std::iter::once(vec!["trial".to_string(), "error".to_string()]).chain(
        failures
            .iter()
            .map(|f| vec![f.trial.to_string(), f.message.clone()]),
    );
    write_csv(&path, rows)
}

pub fn trial_dir(out: &Path, trial: usize) -> PathBuf {
    out.join("trials").join(format!("trial_{trial:04}"))
}

pub fn write_poses(path: &Path, poses: &PoseSet) -> Result<()> {
    fs::write(path, poses.to_text()).map_err(|e| Error::io(path, e))
}

pub fn read_poses(path: &Path) -> Result<PoseSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PoseSet::from_text(&text).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Writes `summary.csv`, `ecdf.csv`, `run_manifest`, and per-trial pose, pair
/// and loss files. Nothing is written when there is no method result.
pub fn emit_report(report: &ExperimentReport, cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    if report.results.iter().all(|r| r.methods.is_empty()) {
        return Err(Error::InvalidArgument("no method results to report".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let th = &cfg.thresholds;

    let mut summary = vec![summary_header(th)];
    let mut ecdf = vec![["method", "trial", "axis", "threshold", "percent"]
        .map(String::from)
        .to_vec()];
    let mut pooled: Vec<(String, Vec<crate::metrics::PairError>)> = Vec::new();
    for r in &report.results {
        let dir = trial_dir(out, r.trial);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_poses(&dir.join("gt.txt"), &r.gt)?;
        let mut losses = vec![["method", "total", "rotation", "translation", "point"]
            .map(String::from)
            .to_vec()];
        for m in &r.methods {
            summary.push(summary_row(&m.method, &r.trial.to_string(), &m.report));
            push_ecdf_rows(&mut ecdf, &m.method, &r.trial.to_string(), &m.report, th);
            write_pairs_csv(
                &dir.join(format!("pairs_{}.csv", m.method)),
                &m.report.pairs,
            )?;
            write_poses(&dir.join(format!("poses_{}.txt", m.method)), &m.poses)?;
            losses.push(vec![
                m.method.clone(),
                format_f64(m.loss.total),
                format_f64(m.loss.rotation),
                format_f64(m.loss.translation),
                format_f64(m.loss.point),
            ]);
            match pooled.iter_mut().find(|(k, _)| *k == m.method) {
                Some((_, v)) => v.extend(m.report.pairs.iter().copied()),
                None => pooled.push((m.method.clone(), m.report.pairs.clone())),
            }
        }
        write_csv(&dir.join("loss.csv"), losses)?;
    }
    for (method, pairs) in pooled {
        let agg = summarize_pairs(pairs, th);
        push_ecdf_rows(&mut ecdf, &method, "all", &agg, th);
    }
    write_csv(&out.join("summary.csv"), summary)?;
    write_csv(&out.join("ecdf.csv"), ecdf)?;
    if !report.failures.is_empty() {
        write_failures(out, &report.failures)?;
    }

    let mut manifest = Block::new();
    manifest
        .set("tool", Value::str("mvdiff"))
        .set("version", Value::str(TOOL_VERSION))
        .set("trials_ok", Value::int(report.results.len() as u64))
        .set("trials_failed", Value::int(report.failures.len() as u64))
        .set("config", Value::Block(cfg.to_block()));
    let path = out.join("run_manifest");
    fs::write(&path, manifest.to_string()).map_err(|e| Error::io(&path, e))
}

fn push_ecdf_rows(
    rows: &mut Vec<Vec<String>>,
    method: &str,
    trial: &str,
    r: &EvalReport,
    th: &MetricThresholds,
) {
    let axes = [
        ("rotation", &th.rotation, &r.ecdf_rot),
        ("translation", &th.translation, &r.ecdf_trans),
    ];
    for (axis, ths, fr) in axes {
        for (x, f) in ths.iter().zip(fr.iter()) {
            rows.push(vec![
                method.to_string(),
                trial.to_string(),
                axis.to_string(),
                format_f64(*x),
                format_f64(100.0 * f),
            ]);
        }
    }
}

/// VLB terms as CSV rows `term,t,value`.
pub fn vlb_csv(terms: &VlbTerms, steps: usize) -> String {
    let mut s = String::from("term,t,value\n");
    let _ = writeln!(s, "residual,1,{}", format_f64(terms.residual_term));
    for (k, v) in terms.denoising_terms.iter().enumerate() {
        let _ = writeln!(s, "denoising,{},{}", k + 2, format_f64(*v));
    }
    let _ = writeln!(
        s,
        "prior_matching,{steps},{}",
        format_f64(terms.prior_matching_term)
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            trials: 3,
            output: dir.to_path_buf(),
            scene: SceneConfig {
                world_points: 1500,
                min_scans: 3,
                max_scans: 5,
                ..SceneConfig::default()
            },
            ..ExperimentConfig::default()
        };
        cfg.diffusion.reverse_noise = false;
        cfg
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = ExperimentConfig {
            seed: u64::MAX - 3,
            ..ExperimentConfig::default()
        };
        cfg.prior.kind = PriorKind::Baseline;
        cfg.baseline.graph.mode = GraphMode::OverlapPruned;
        cfg.thresholds.rr_trans = 0.25;
        let text = cfg.to_block().to_string();
        assert_eq!(ExperimentConfig::from_text(&text).unwrap(), cfg);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(ExperimentConfig::from_text("sede = 3").is_err());
        assert!(ExperimentConfig::from_text("prior { kind = \"fuser\" }").is_err());
        assert!(ExperimentConfig::from_text("trials = 0").is_err());
        let c = ExperimentConfig::from_text("trials = 4\nsurrogate { kind = \"kabsch\" }").unwrap();
        assert_eq!((c.trials, c.surrogate.kind), (4, SurrogateKind::Kabsch));
    }

    #[test]
    fn streams_are_distinct_and_stable() {
        use rand::RngCore;
        let mut a = trial_rng(1, 0, Stream::Scene);
        let mut b = trial_rng(1, 0, Stream::Prior);
        let mut c = trial_rng(1, 1, Stream::Scene);
        let mut a2 = trial_rng(1, 0, Stream::Scene);
        let x = a.next_u64();
        assert_ne!(x, b.next_u64());
        assert_ne!(x, c.next_u64());
        assert_eq!(x, a2.next_u64());
    }

    #[test]
    fn oracle_experiment_recovers_and_reports() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_cfg(dir.path());
        let report = run_experiment(&cfg, 2).unwrap();
        assert!(report.failures.is_empty());
        for r in &report.results {
            let refined = report.method(r.trial, "refined").unwrap();
            assert!(refined.report.re_mean < 1e-6 && refined.report.te_mean < 1e-6);
            let prior = report.method(r.trial, "prior").unwrap();
            assert!(prior.report.re_mean > 1.0);
        }
        let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 1 + 3 * 4);
        assert!(dir.path().join("run_manifest").exists());
        assert!(trial_dir(dir.path(), 2).join("pairs_refined.csv").exists());
    }

    #[test]
    fn summary_matches_pair_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_cfg(dir.path());
        cfg.trials = 1;
        cfg.baseline.enabled = false;
        let report = run_experiment(&cfg, 1).unwrap();
        let pairs =
            crate::metrics::read_pairs_csv(&trial_dir(dir.path(), 0).join("pairs_prior.csv"))
                .unwrap();
        let again = summarize_pairs(pairs, &cfg.thresholds);
        let orig = &report.method(0, "prior").unwrap().report;
        assert_eq!(
            summary_row("prior", "0", &again),
            summary_row("prior", "0", orig)
        );
    }

    #[test]
    fn empty_report_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let report = ExperimentReport {
            results: vec![],
            failures: vec![],
        };
        assert!(emit_report(&report, &ExperimentConfig::default(), &out).is_err());
        assert!(!out.exists());
    }
}
