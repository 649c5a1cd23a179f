//! Classical pipeline: independent pairwise registration followed by pose
//! synchronization (spectral rotations, linear translations), and a
//! spanning-tree chaining baseline.

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use rand::Rng;

use crate::diffusion::PoseSet;
use crate::error::{Error, Result};
use crate::geometry::Scene;
use crate::lie::{project_to_so3, sample_uniform_rotation, RigidTransform, Rotation, Twist};
use crate::surrogate::kabsch_align;

const MAX_EIGEN_ITERS: usize = 10_000;
/// Each subspace iteration applies the shifted operator this many times.
const POWER_SQUARINGS: usize = 6;
const EIGEN_TOL: f64 = 1e-12;

/// Relative measurement `T_{i←j}` mapping scan `j` coordinates into scan `i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub rel: RigidTransform,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraph {
    pub n: usize,
    pub edges: Vec<Edge>,
}

impl PoseGraph {
    pub fn new(n: usize, edges: Vec<Edge>) -> Result<Self> {
        for e in &edges {
            if e.i == e.j {
                return Err(Error::Graph(format!("self edge at scan {}", e.i)));
            }
            if e.i >= n || e.j >= n {
                return Err(Error::Index {
                    index: e.i.max(e.j),
                    lo: 0,
                    hi: n.saturating_sub(1),
                });
            }
            if !(e.weight > 0.0 && e.weight.is_finite()) {
                return Err(Error::Graph(format!(
                    "edge ({}, {}) has weight {}",
                    e.i, e.j, e.weight
                )));
            }
        }
        Ok(PoseGraph { n, edges })
    }

    /// Exact measurements between every pair of `poses`, unit weights.
    pub fn exact_full(poses: &PoseSet) -> Self {
        let n = poses.len();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                edges.push(Edge {
                    i,
                    j,
                    rel: poses[i].inverse().compose(&poses[j]),
                    weight: 1.0,
                });
            }
        }
        PoseGraph { n, edges }
    }

    /// Neighbours of every node, sorted by index, with the edge measurement
    /// oriented as `T_{a←b}` for the pair `(a, b)`.
    fn adjacency(&self) -> Vec<Vec<(usize, RigidTransform)>> {
        let mut adj = vec![Vec::new(); self.n];
        for e in &self.canonical_edges() {
            adj[e.i].push((e.j, e.rel));
            adj[e.j].push((e.i, e.rel.inverse()));
        }
        for a in &mut adj {
            a.sort_by_key(|(k, _)| *k);
        }
        adj
    }

    /// Edges oriented `i < j` and sorted, so assembly is independent of input order.
    fn canonical_edges(&self) -> Vec<Edge> {
        let mut edges: Vec<Edge> = self
            .edges
            .iter()
            .map(|e| {
                if e.i < e.j {
                    *e
                } else {
                    Edge {
                        i: e.j,
                        j: e.i,
                        rel: e.rel.inverse(),
                        weight: e.weight,
                    }
                }
            })
            .collect();
        edges.sort_by(|a, b| {
            (a.i, a.j)
                .cmp(&(b.i, b.j))
                .then(a.weight.total_cmp(&b.weight))
                .then_with(|| {
                    a.rel
                        .to_row()
                        .iter()
                        .zip(b.rel.to_row())
                        .fold(std::cmp::Ordering::Equal, |o, (x, y)| {
                            o.then(x.total_cmp(&y))
                        })
                })
        });
        edges
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return false;
        }
        let adj = self.adjacency();
        let mut seen = vec![false; self.n];
        seen[0] = true;
        let mut queue = VecDeque::from([0]);
        while let Some(a) = queue.pop_front() {
            for (b, _) in &adj[a] {
                if !seen[*b] {
                    seen[*b] = true;
                    queue.push_back(*b);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    fn ensure_connected(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Graph(format!(
                "pose graph needs at least two scans, got {}",
                self.n
            )));
        }
        if !self.is_connected() {
            return Err(Error::Graph("pose graph is disconnected".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GraphMode {
    /// Every pair with enough shared points.
    #[default]
    Full,
    /// Only pairs whose overlap reaches the scene's threshold.
    OverlapPruned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EdgeWeighting {
    #[default]
    Overlap,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphOptions {
    pub mode: GraphMode,
    pub weighting: EdgeWeighting,
    /// Scale of the tangent-space perturbation applied to each estimate.
    pub noise_scale: f64,
    pub outlier_rate: f64,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions {
            mode: GraphMode::Full,
            weighting: EdgeWeighting::Overlap,
            noise_scale: 0.0,
            outlier_rate: 0.0,
        }
    }
}

/// Pairwise Kabsch estimates on shared world ids, optionally perturbed and
/// corrupted by outliers. Pairs sharing fewer than three points are skipped.
pub fn build_pairwise_graph<R: Rng + ?Sized>(
    scene: &Scene,
    opts: &GraphOptions,
    rng: &mut R,
) -> Result<PoseGraph> {
    if !(0.0..=1.0).contains(&opts.outlier_rate) {
        return Err(Error::InvalidArgument(format!(
            "outlier rate {} outside [0, 1]",
            opts.outlier_rate
        )));
    }
    if opts.noise_scale.is_nan() || opts.noise_scale < 0.0 {
        return Err(Error::InvalidArgument(
            "noise scale must be non-negative".into(),
        ));
    }
    let index: Vec<HashMap<u64, usize>> = scene
        .scans
        .iter()
        .map(|s| s.ids.iter().enumerate().map(|(k, id)| (*id, k)).collect())
        .collect();
    let threshold = scene.config.overlap_threshold;
    let room = scene.config.room;
    let n = scene.len();
    let mut edges = Vec::new();
    for (i, idx_i) in index.iter().enumerate() {
        for j in i + 1..n {
            let overlap = scene.overlap[i][j].max(scene.overlap[j][i]);
            if opts.mode == GraphMode::OverlapPruned && overlap < threshold {
                continue;
            }
            let (mut p, mut q) = (Vec::new(), Vec::new());
            for (k, id) in scene.scans[j].ids.iter().enumerate() {
                if let Some(&m) = idx_i.get(id) {
                    p.push(scene.scans[j].points[k]);
                    q.push(scene.scans[i].points[m]);
                }
            }
            if p.len() < 3 {
                continue;
            }
            let mut rel = match kabsch_align(&p, &q, None) {
                Ok(t) => t,
                Err(Error::Degenerate(_)) => continue,
                Err(e) => return Err(e),
            };
            if opts.noise_scale > 0.0 {
                rel = RigidTransform::exp(&Twist::sample(rng, opts.noise_scale, opts.noise_scale))
                    .compose(&rel);
            }
            if opts.outlier_rate > 0.0 && rng.random::<f64>() < opts.outlier_rate {
                let t = Vector3::new(
                    rng.random_range(0.0..room[0]),
                    rng.random_range(0.0..room[1]),
                    rng.random_range(0.0..room[2]),
                );
                rel = RigidTransform::new(sample_uniform_rotation(rng), t);
            }
            let weight = match opts.weighting {
                EdgeWeighting::Overlap => overlap,
                EdgeWeighting::Uniform => 1.0,
            };
            edges.push(Edge { i, j, rel, weight });
        }
    }
    let g = PoseGraph::new(n, edges)?;
    if !g.is_connected() {
        return Err(Error::Graph(
            "selected pairs leave the pose graph disconnected".into(),
        ));
    }
    Ok(g)
}

/// Orthonormal basis of the top-3 eigenspace of the symmetric PSD matrix `b`.
fn top3_subspace(b: &DMatrix<f64>, scale: f64, start: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut p = b / scale;
    for _ in 0..POWER_SQUARINGS {
        p = &p * &p;
        p = (&p + p.transpose()) * 0.5;
    }
    let mut q = start.qr().q();
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_EIGEN_ITERS {
        q = (&p * &q).qr().q();
        let bq = b * &q;
        let theta = q.transpose() * &bq;
        let eig = SymmetricEigen::new((&theta + theta.transpose()) * 0.5);
        q = &q * &eig.eigenvectors;
        let bq = &bq * &eig.eigenvectors;
        residual = (bq - &q * DMatrix::from_diagonal(&eig.eigenvalues)).norm();
        if residual <= EIGEN_TOL * scale {
            return Ok(q);
        }
    }
    Err(Error::Numerical {
        message: format!("rotation eigenspace did not converge in {MAX_EIGEN_ITERS} iterations"),
        residual,
    })
}

/// Spectral rotation synchronization plus weighted least-squares
/// translations, gauge-fixed so that scan 0 is the identity.
pub fn synchronize(g: &PoseGraph) -> Result<PoseSet> {
    g.ensure_connected()?;
    let n = g.n;
    let edges = g.canonical_edges();

    // Connection Laplacian: blocks d_i·I on the diagonal, −w·R_{i←j} off it.
    let mut lap = DMatrix::<f64>::zeros(3 * n, 3 * n);
    for e in &edges {
        let r = e.rel.rotation.matrix();
        for a in 0..3 {
            lap[(3 * e.i + a, 3 * e.i + a)] += e.weight;
            lap[(3 * e.j + a, 3 * e.j + a)] += e.weight;
            for b in 0..3 {
                lap[(3 * e.i + a, 3 * e.j + b)] -= e.weight * r[(a, b)];
                lap[(3 * e.j + b, 3 * e.i + a)] -= e.weight * r[(a, b)];
            }
        }
    }
    let bound = (0..3 * n)
        .map(|r| lap.row(r).abs().sum())
        .fold(0.0, f64::max);
    let shifted = DMatrix::identity(3 * n, 3 * n) * bound - &lap;
    let start = DMatrix::from_fn(3 * n, 3, |r, c| if r % 3 == c { 1.0 } else { 0.0 });
    let mut q = top3_subspace(&shifted, bound, start)?;

    let det_sum: f64 = (0..n)
        .map(|i| q.fixed_view::<3, 3>(3 * i, 0).determinant())
        .sum();
    if det_sum < 0.0 {
        q.column_mut(2).neg_mut();
    }
    // Block i of the eigenbasis approximates R_iᵀ·A for a common orthogonal A.
    let raw = (0..n)
        .map(|i| {
            let block: Matrix3<f64> = q.fixed_view::<3, 3>(3 * i, 0).into_owned();
            project_to_so3(&block.transpose()).map_err(|e| e.at_index(i))
        })
        .collect::<Result<Vec<Rotation>>>()?;
    let anchor = raw[0].transpose();
    let mut rotations: Vec<Rotation> = raw.iter().map(|r| anchor.compose(r)).collect();
    rotations[0] = Rotation::identity();

    // Translations: R_i·t_{i←j} = t_j − t_i with t_0 fixed at the origin.
    let m = 3 * (n - 1);
    let mut a = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    for e in &edges {
        let c = rotations[e.i].matrix() * e.rel.translation * e.weight;
        for k in 0..3 {
            if e.j > 0 {
                let jj = 3 * (e.j - 1) + k;
                a[(jj, jj)] += e.weight;
                rhs[jj] += c[k];
            }
            if e.i > 0 {
                let ii = 3 * (e.i - 1) + k;
                a[(ii, ii)] += e.weight;
                rhs[ii] -= c[k];
            }
            if e.i > 0 && e.j > 0 {
                let (ii, jj) = (3 * (e.i - 1) + k, 3 * (e.j - 1) + k);
                a[(ii, jj)] -= e.weight;
                a[(jj, ii)] -= e.weight;
            }
        }
    }
    let t = a
        .cholesky()
        .ok_or_else(|| Error::Numerical {
            message: "translation normal equations are singular".into(),
            residual: f64::NAN,
        })?
        .solve(&rhs);
    let poses = (0..n)
        .map(|i| {
            let ti = if i == 0 {
                Vector3::zeros()
            } else {
                Vector3::new(t[3 * (i - 1)], t[3 * (i - 1) + 1], t[3 * (i - 1) + 2])
            };
            RigidTransform::new(rotations[i], ti)
        })
        .collect();
    PoseSet::new(poses)
}

/// Composes edge measurements along a breadth-first spanning tree rooted at scan 0.
pub fn chain_init(g: &PoseGraph) -> Result<PoseSet> {
    g.ensure_connected()?;
    let adj = g.adjacency();
    let mut poses: Vec<Option<RigidTransform>> = vec![None; g.n];
    poses[0] = Some(RigidTransform::identity());
    let mut queue = VecDeque::from([0]);
    while let Some(a) = queue.pop_front() {
        let ta = poses[a].expect("visited node has a pose");
        for (b, rel) in &adj[a] {
            if poses[*b].is_none() {
                poses[*b] = Some(ta.compose(rel));
                queue.push_back(*b);
            }
        }
    }
    PoseSet::new(
        poses
            .into_iter()
            .map(|p| p.expect("connected graph"))
            .collect(),
    )
}

/// Left-multiplies `poses` so that scan 0 coincides with `reference[0]`.
pub fn align_gauge(poses: &PoseSet, reference: &PoseSet) -> Result<PoseSet> {
    poses.ensure_same_len(reference, "align_gauge")?;
    Ok(poses.left_multiply(&reference[0].compose(&poses[0].inverse())))
}

pub fn write_graph_csv(path: &Path, g: &PoseGraph) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut header = vec!["i".to_string(), "j".to_string(), "weight".to_string()];
    header.extend((0..12).map(|k| format!("p{k}")));
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for e in &g.edges {
        let mut rec = vec![
            e.i.to_string(),
            e.j.to_string(),
            format!("{:.17e}", e.weight),
        ];
        rec.extend(e.rel.to_row().iter().map(|x| format!("{x:.17e}")));
        w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_graph_csv(path: &Path, n: usize) -> Result<PoseGraph> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut edges = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        if rec.len() != 15 {
            return Err(Error::Parse(format!(
                "{}: expected 15 fields, got {}",
                path.display(),
                rec.len()
            )));
        }
        let bad = |e: &dyn std::fmt::Display| Error::Parse(format!("{}: {e}", path.display()));
        let i = rec[0].parse::<usize>().map_err(|e| bad(&e))?;
        let j = rec[1].parse::<usize>().map_err(|e| bad(&e))?;
        let weight = rec[2].parse::<f64>().map_err(|e| bad(&e))?;
        let row = (3..15)
            .map(|k| rec[k].parse::<f64>().map_err(|e| bad(&e)))
            .collect::<Result<Vec<_>>>()?;
        edges.push(Edge {
            i,
            j,
            rel: RigidTransform::from_row(&row)?,
            weight,
        });
    }
    PoseGraph::new(n, edges)
}
