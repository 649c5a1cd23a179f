//! Training losses on relative poses and the evaluation metrics: per-pair
//! rotation/translation errors, ECDF rows and registration recall.

use std::path::Path;

use nalgebra::Vector3;

use crate::diffusion::PoseSet;
use crate::error::{Error, Result};
use crate::geometry::Scene;
use crate::lie::{rotation_angle, RigidTransform, Rotation};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub gamma_t: f64,
    pub gamma_p: f64,
    /// Huber transition, metres.
    pub huber_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma_t: 0.1,
            gamma_p: 0.1,
            huber_beta: 0.06,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_t >= 0.0 && self.gamma_p >= 0.0) {
            return Err(Error::InvalidArgument(
                "loss weights must be non-negative".into(),
            ));
        }
        if !(self.huber_beta > 0.0 && self.huber_beta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "huber beta must be positive, got {}",
                self.huber_beta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricThresholds {
    /// Degrees.
    pub rotation: Vec<f64>,
    /// Metres.
    pub translation: Vec<f64>,
    pub rr_rot: f64,
    pub rr_trans: f64,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        MetricThresholds {
            rotation: vec![3.0, 5.0, 10.0, 30.0, 45.0],
            translation: vec![0.05, 0.1, 0.25, 0.5, 0.75],
            rr_rot: 15.0,
            rr_trans: 0.3,
        }
    }
}

impl MetricThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, list) in [
            ("rotation", &self.rotation),
            ("translation", &self.translation),
        ] {
            if list.iter().any(|x| !x.is_finite()) || list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(format!(
                    "{name} thresholds must be finite and strictly increasing"
                )));
            }
        }
        if !(self.rr_rot.is_finite() && self.rr_trans.is_finite()) {
            return Err(Error::InvalidArgument(
                "recall thresholds must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// `T_{i←j} = T_i⁻¹·T_j` for all ordered pairs `i ≠ j`, row-major in `(i, j)`.
pub fn pairwise_relative(p: &PoseSet) -> Vec<(usize, usize, RigidTransform)> {
    let inv: Vec<RigidTransform> = p.iter().map(|t| t.inverse()).collect();
    let n = p.len();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1));
    for (i, ti) in inv.iter().enumerate() {
        for j in 0..n {
            if i != j {
                out.push((i, j, ti.compose(&p[j])));
            }
        }
    }
    out
}

/// Geodesic angle between two rotations, radians in `[0, π]`.
pub fn rot_geodesic_loss(r_pred: &Rotation, r_gt: &Rotation) -> f64 {
    rotation_angle(&(r_gt.matrix().transpose() * r_pred.matrix()))
}

/// Huber penalty on the Euclidean translation error.
pub fn trans_huber_loss(t_pred: &Vector3<f64>, t_gt: &Vector3<f64>, beta: f64) -> f64 {
    let e = (t_pred - t_gt).norm();
    if e <= beta {
        0.5 * e * e
    } else {
        beta * (e - 0.5 * beta)
    }
}

/// Mean L1 distance between points mapped by the predicted and true transforms.
pub fn pointwise_loss(
    rel_pred: &RigidTransform,
    rel_gt: &RigidTransform,
    pts: &[Vector3<f64>],
) -> Result<f64> {
    if pts.is_empty() {
        return Err(Error::InvalidArgument(
            "pointwise loss needs at least one point".into(),
        ));
    }
    let terms: Vec<f64> = pts
        .iter()
        .map(|p| (rel_pred.apply(p) - rel_gt.apply(p)).lp_norm(1))
        .collect();
    Ok(pairwise_sum(&terms) / pts.len() as f64)
}

/// Recursive pairwise summation; order-fixed so results do not depend on scheduling.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub rotation: f64,
    pub translation: f64,
    pub point: f64,
}

/// Averages rotation, weighted Huber and weighted point terms over all ordered pairs.
pub fn total_loss(
    pred: &PoseSet,
    gt: &PoseSet,
    scene: &Scene,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    pred.ensure_same_len(gt, "total_loss")?;
    if pred.len() < 2 {
        return Err(Error::InvalidArgument(
            "total loss needs at least two scans".into(),
        ));
    }
    if scene.len() != pred.len() {
        return Err(Error::InvalidArgument(format!(
            "{} poses for {} scans",
            pred.len(),
            scene.len()
        )));
    }
    let rp = pairwise_relative(pred);
    let rg = pairwise_relative(gt);
    let mut rot = Vec::with_capacity(rp.len());
    let mut trans = Vec::with_capacity(rp.len());
    let mut point = Vec::with_capacity(rp.len());
    for ((_, j, a), (_, _, b)) in rp.iter().zip(&rg) {
        rot.push(rot_geodesic_loss(&a.rotation, &b.rotation));
        trans.push(trans_huber_loss(
            &a.translation,
            &b.translation,
            cfg.huber_beta,
        ));
        point.push(pointwise_loss(a, b, &scene.scans[*j].points)?);
    }
    let m = rp.len() as f64;
    let rotation = pairwise_sum(&rot) / m;
    let translation = pairwise_sum(&trans) / m;
    let point = pairwise_sum(&point) / m;
    Ok(LossBreakdown {
        total: rotation + cfg.gamma_t * translation + cfg.gamma_p * point,
        rotation,
        translation,
        point,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairError {
    pub i: usize,
    pub j: usize,
    pub re_deg: f64,
    pub te: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub pairs: Vec<PairError>,
    /// Fraction of pairs with RE at or under each rotation threshold.
    pub ecdf_rot: Vec<f64>,
    pub ecdf_trans: Vec<f64>,
    pub re_mean: f64,
    pub re_median: f64,
    pub te_mean: f64,
    pub te_median: f64,
    /// Fraction of pairs within both recall thresholds.
    pub rr: f64,
}

/// Fraction of `values` at or under each threshold.
pub fn ecdf(values: &[f64], thresholds: &[f64]) -> Vec<f64> {
    let n = values.len().max(1) as f64;
    thresholds
        .iter()
        .map(|th| values.iter().filter(|v| **v <= *th).count() as f64 / n)
        .collect()
}

pub fn registration_recall(pairs: &[PairError], rr_rot: f64, rr_trans: f64) -> f64 {
    let hits = pairs
        .iter()
        .filter(|p| p.re_deg <= rr_rot && p.te <= rr_trans)
        .count();
    hits as f64 / pairs.len().max(1) as f64
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Summarizes a list of per-pair errors.
pub fn summarize_pairs(pairs: Vec<PairError>, th: &MetricThresholds) -> EvalReport {
    let re: Vec<f64> = pairs.iter().map(|p| p.re_deg).collect();
    let te: Vec<f64> = pairs.iter().map(|p| p.te).collect();
    let n = pairs.len().max(1) as f64;
    EvalReport {
        ecdf_rot: ecdf(&re, &th.rotation),
        ecdf_trans: ecdf(&te, &th.translation),
        re_mean: pairwise_sum(&re) / n,
        re_median: median(&re),
        te_mean: pairwise_sum(&te) / n,
        te_median: median(&te),
        rr: registration_recall(&pairs, th.rr_rot, th.rr_trans),
        pairs,
    }
}

/// Relative-pose errors of `pred` against `gt` over all ordered pairs.
pub fn evaluate(pred: &PoseSet, gt: &PoseSet, th: &MetricThresholds) -> Result<EvalReport> {
    th.validate()?;
    pred.ensure_same_len(gt, "evaluate")?;
    if pred.len() < 2 {
        return Err(Error::InvalidArgument(
            "evaluation needs at least two scans".into(),
        ));
    }
    let pairs = pairwise_relative(pred)
        .into_iter()
        .zip(pairwise_relative(gt))
        .map(|((i, j, a), (_, _, b))| PairError {
            i,
            j,
            re_deg: rot_geodesic_loss(&a.rotation, &b.rotation).to_degrees(),
            te: (a.translation - b.translation).norm(),
        })
        .collect();
    Ok(summarize_pairs(pairs, th))
}

pub fn write_pairs_csv(path: &Path, pairs: &[PairError]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["i", "j", "re_deg", "te_m"])
        .map_err(|e| Error::csv(path, e))?;
    for p in pairs {
        w.write_record([
            p.i.to_string(),
            p.j.to_string(),
            format!("{:.17e}", p.re_deg),
            format!("{:.17e}", p.te),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pairs_csv(path: &Path) -> Result<Vec<PairError>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let field = |k: usize| {
            rec.get(k)
                .ok_or_else(|| Error::Parse(format!("{}: short row", path.display())))
        };
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
        };
        let idx = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
        };
        out.push(PairError {
            i: idx(field(0)?)?,
            j: idx(field(1)?)?,
            re_deg: num(field(2)?)?,
            te: num(field(3)?)?,
        });
    }
    Ok(out)
}
