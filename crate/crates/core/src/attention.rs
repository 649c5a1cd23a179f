//! Forward-only geometric alternating attention over superpoint tokens.
//!
//! Tokens are rows of a matrix. A stack of pre-norm transformer blocks
//! alternates between attention restricted to each scan's tokens and
//! attention over all scans jointly. No block depends on scan order, so the
//! whole stack and the pose head are permutation equivariant.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffusion::PoseSet;
use crate::error::{Error, Result};
use crate::geometry::{
    sinusoidal_encode, voxel_downsample_hierarchy, PointCloud, DEFAULT_BASE_VOXEL, DEFAULT_LEVELS,
};
use crate::lie::{project_to_so3, RigidTransform};

const LN_EPS: f64 = 1e-5;
const FFN_EXPANSION: usize = 4;
const REFINE_BLOCKS: usize = 2;
/// Hierarchy level used for tokens unless configured otherwise.
pub const DEFAULT_TOKEN_LEVEL: usize = 3;

/// Per-scan token matrices stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    features: DMatrix<f64>,
    bounds: Vec<usize>,
}

impl TokenSet {
    pub fn from_scans(scans: Vec<DMatrix<f64>>) -> Result<Self> {
        let d = scans
            .first()
            .map(|m| m.ncols())
            .ok_or_else(|| Error::InvalidArgument("token set needs at least one scan".into()))?;
        if d == 0 {
            return Err(Error::InvalidArgument(
                "token width must be positive".into(),
            ));
        }
        let mut bounds = vec![0];
        for (i, m) in scans.iter().enumerate() {
            if m.ncols() != d {
                return Err(Error::InvalidArgument(format!(
                    "scan {i}: token width {} != {d}",
                    m.ncols()
                )));
            }
            bounds.push(bounds[i] + m.nrows());
        }
        let mut features = DMatrix::zeros(bounds[scans.len()], d);
        for (i, m) in scans.iter().enumerate() {
            features.rows_mut(bounds[i], m.nrows()).copy_from(m);
        }
        Ok(TokenSet { features, bounds })
    }

    pub fn n_scans(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn scan_len(&self, i: usize) -> usize {
        self.bounds[i + 1] - self.bounds[i]
    }

    pub fn scan(&self, i: usize) -> DMatrix<f64> {
        self.features
            .rows(self.bounds[i], self.scan_len(i))
            .into_owned()
    }

    pub fn scans(&self) -> Vec<DMatrix<f64>> {
        (0..self.n_scans()).map(|i| self.scan(i)).collect()
    }

    /// Scan `k` of the result is scan `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<TokenSet> {
        let scans = self.scans();
        TokenSet::from_scans(perm.iter().map(|&p| scans[p].clone()).collect())
    }

    fn with_features(&self, features: DMatrix<f64>) -> TokenSet {
        TokenSet {
            features,
            bounds: self.bounds.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AAConfig {
    /// Total block count; blocks alternate intra, cross, intra, ...
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for AAConfig {
    fn default() -> Self {
        AAConfig {
            layers: 4,
            heads: 4,
            dim: 96,
            seed: 0,
        }
    }
}

impl AAConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.layers.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "layer count {} must be even",
                self.layers
            )));
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    pub wo: DMatrix<f64>,
    pub ffn_in: DMatrix<f64>,
    pub ffn_out: DMatrix<f64>,
    pub norm_attn: DVector<f64>,
    pub norm_ffn: DVector<f64>,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub blocks: Vec<BlockWeights>,
    pub refine: Vec<BlockWeights>,
    /// Maps `[centroid, spread]` superpoint features to token width.
    pub embed: DMatrix<f64>,
    pub trans_hidden: DMatrix<f64>,
    pub trans_out: DMatrix<f64>,
    pub rot_hidden: DMatrix<f64>,
    pub rot_out: DMatrix<f64>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        std * rng.sample::<f64, _>(StandardNormal)
    })
}

impl BlockWeights {
    fn sample(rng: &mut ChaCha8Rng, dim: usize, heads: usize) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let hidden = FFN_EXPANSION * dim;
        BlockWeights {
            wq: normal_matrix(rng, dim, dim, std),
            wk: normal_matrix(rng, dim, dim, std),
            wv: normal_matrix(rng, dim, dim, std),
            wo: normal_matrix(rng, dim, dim, std),
            ffn_in: normal_matrix(rng, dim, hidden, std),
            ffn_out: normal_matrix(rng, hidden, dim, std),
            norm_attn: DVector::from_element(dim, 1.0),
            norm_ffn: DVector::from_element(dim, 1.0),
            heads,
        }
    }

    fn check(&self, dim: usize, what: &str) -> Result<()> {
        let hidden = FFN_EXPANSION * dim;
        let ok = [&self.wq, &self.wk, &self.wv, &self.wo]
            .iter()
            .all(|m| m.shape() == (dim, dim))
            && self.ffn_in.shape() == (dim, hidden)
            && self.ffn_out.shape() == (hidden, dim)
            && self.norm_attn.len() == dim
            && self.norm_ffn.len() == dim
            && self.heads > 0
            && dim.is_multiple_of(self.heads);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "{what}: weight shapes do not match width {dim}"
            )))
        }
    }
}

impl AttentionWeights {
    /// Deterministic scaled-normal weights (stdev `1/√d`) drawn from `cfg.seed`.
    pub fn generate(cfg: &AAConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let std = 1.0 / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let blocks = (0..cfg.layers)
            .map(|_| BlockWeights::sample(&mut rng, d, cfg.heads))
            .collect();
        let refine = (0..REFINE_BLOCKS)
            .map(|_| BlockWeights::sample(&mut rng, d, cfg.heads))
            .collect();
        Ok(AttentionWeights {
            blocks,
            refine,
            embed: normal_matrix(&mut rng, 6, d, std),
            trans_hidden: normal_matrix(&mut rng, d, d, std),
            trans_out: normal_matrix(&mut rng, d, 3, std),
            rot_hidden: normal_matrix(&mut rng, d, d, std),
            rot_out: normal_matrix(&mut rng, d, 9, std),
        })
    }

    pub fn dim(&self) -> usize {
        self.embed.ncols()
    }
}

fn layer_norm(x: &DMatrix<f64>, gain: &DVector<f64>) -> DMatrix<f64> {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (k, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gain[k];
        }
    }
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

fn multi_head_attention(x: &DMatrix<f64>, w: &BlockWeights) -> DMatrix<f64> {
    let q = x * &w.wq;
    let k = x * &w.wk;
    let v = x * &w.wv;
    let dh = x.ncols() / w.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = DMatrix::zeros(x.nrows(), x.ncols());
    for h in 0..w.heads {
        let qh = q.columns(h * dh, dh);
        let kh = k.columns(h * dh, dh);
        let vh = v.columns(h * dh, dh);
        let attn = softmax_rows(&((qh * kh.transpose()) * scale));
        concat.columns_mut(h * dh, dh).copy_from(&(attn * vh));
    }
    concat * &w.wo
}

/// One pre-norm transformer block applied to a single token pool.
fn block(x: &DMatrix<f64>, w: &BlockWeights) -> DMatrix<f64> {
    let mut y = x + multi_head_attention(&layer_norm(x, &w.norm_attn), w);
    let mut hidden = layer_norm(&y, &w.norm_ffn) * &w.ffn_in;
    hidden.apply(|v| *v = v.max(0.0));
    y += hidden * &w.ffn_out;
    y
}

fn intra_block(tokens: &TokenSet, w: &BlockWeights) -> TokenSet {
    let mut out = tokens.features.clone();
    for i in 0..tokens.n_scans() {
        let n = tokens.scan_len(i);
        if n == 0 {
            continue;
        }
        let y = block(&tokens.scan(i), w);
        out.rows_mut(tokens.bounds[i], n).copy_from(&y);
    }
    tokens.with_features(out)
}

fn cross_block(tokens: &TokenSet, w: &BlockWeights) -> TokenSet {
    if tokens.features.nrows() == 0 {
        return tokens.clone();
    }
    tokens.with_features(block(&tokens.features, w))
}

/// Runs the alternating stack: even blocks attend within scans, odd blocks across all scans.
pub fn alternating_attention(
    tokens: &TokenSet,
    w: &AttentionWeights,
    cfg: &AAConfig,
) -> Result<TokenSet> {
    cfg.validate()?;
    if tokens.dim() != cfg.dim {
        return Err(Error::InvalidArgument(format!(
            "token width {} != config width {}",
            tokens.dim(),
            cfg.dim
        )));
    }
    if w.blocks.len() < cfg.layers {
        return Err(Error::InvalidArgument(format!(
            "{} layers requested, {} weight blocks available",
            cfg.layers,
            w.blocks.len()
        )));
    }
    let mut x = tokens.clone();
    for (l, bw) in w.blocks.iter().take(cfg.layers).enumerate() {
        bw.check(cfg.dim, &format!("layer {l}"))?;
        x = if l % 2 == 0 {
            intra_block(&x, bw)
        } else {
            cross_block(&x, bw)
        };
    }
    Ok(x)
}

fn mlp_head(x: &DMatrix<f64>, hidden: &DMatrix<f64>, out: &DMatrix<f64>) -> DMatrix<f64> {
    let mut h = x * hidden;
    h.apply(|v| *v = v.max(0.0));
    h * out
}

/// Per-scan pose head: refinement blocks, mean pooling, then translation and
/// 9-number rotation proxy projected onto SO(3).
pub fn regress_poses(tokens: &TokenSet, w: &AttentionWeights) -> Result<PoseSet> {
    let d = tokens.dim();
    for (k, bw) in w.refine.iter().enumerate() {
        bw.check(d, &format!("refinement block {k}"))?;
    }
    if w.trans_hidden.shape() != (d, d)
        || w.rot_hidden.shape() != (d, d)
        || w.trans_out.shape() != (d, 3)
        || w.rot_out.shape() != (d, 9)
    {
        return Err(Error::InvalidArgument(format!(
            "pose head shapes do not match width {d}"
        )));
    }
    let mut poses = Vec::with_capacity(tokens.n_scans());
    for i in 0..tokens.n_scans() {
        if tokens.scan_len(i) == 0 {
            return Err(Error::InvalidArgument(format!("scan {i} has no tokens")));
        }
        let mut x = tokens.scan(i);
        for bw in &w.refine {
            x = block(&x, bw);
        }
        let pooled = DMatrix::from_fn(1, d, |_, c| x.column(c).mean());
        let t = mlp_head(&pooled, &w.trans_hidden, &w.trans_out);
        let r = mlp_head(&pooled, &w.rot_hidden, &w.rot_out);
        let proxy = Matrix3::from_fn(|a, b| r[(0, 3 * a + b)]);
        let rotation = project_to_so3(&proxy).map_err(|e| match e {
            Error::Degenerate(m) => Error::Degenerate(format!("scan {i}: {m}")),
            other => other,
        })?;
        poses.push(RigidTransform::new(
            rotation,
            Vector3::new(t[(0, 0)], t[(0, 1)], t[(0, 2)]),
        ));
    }
    PoseSet::new(poses)
}

/// Superpoint tokens for each scan: an embedding of centroid and spread plus
/// the sinusoidal encoding of the centroid.
pub fn build_tokens(scans: &[PointCloud], level: usize, w: &AttentionWeights) -> Result<TokenSet> {
    let d = w.dim();
    let levels = DEFAULT_LEVELS.max(level.max(1));
    let mut out = Vec::with_capacity(scans.len());
    for (i, cloud) in scans.iter().enumerate() {
        let sp = voxel_downsample_hierarchy(cloud, DEFAULT_BASE_VOXEL, levels)?;
        let lv = sp.level(level).ok_or_else(|| {
            Error::InvalidArgument(format!("scan {i}: no hierarchy level {level}"))
        })?;
        let raw = DMatrix::from_fn(lv.centroids.len(), 6, |r, c| {
            if c < 3 {
                lv.centroids[r][c]
            } else {
                lv.spread[r][c - 3]
            }
        });
        out.push(raw * &w.embed + sinusoidal_encode(&lv.centroids, d)?);
    }
    TokenSet::from_scans(out)
}

/// Full feed-forward pose estimate from raw scans.
pub fn attention_poses(scans: &[PointCloud], cfg: &AAConfig, level: usize) -> Result<PoseSet> {
    let w = AttentionWeights::generate(cfg)?;
    let tokens = build_tokens(scans, level, &w)?;
    regress_poses(&alternating_attention(&tokens, &w, cfg)?, &w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> AAConfig {
        AAConfig {
            layers: 2,
            heads: 2,
            dim: 12,
            seed: 5,
        }
    }

    fn random_tokens(seed: u64, sizes: &[usize], d: usize) -> TokenSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TokenSet::from_scans(
            sizes
                .iter()
                .map(|&n| normal_matrix(&mut rng, n, d, 1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn empty_stack_is_identity() {
        let cfg = AAConfig {
            layers: 0,
            ..small_cfg()
        };
        let w = AttentionWeights::generate(&cfg).unwrap();
        let t = random_tokens(1, &[3, 4], 12);
        assert_eq!(alternating_attention(&t, &w, &cfg).unwrap(), t);
    }

    #[test]
    fn single_scan_cross_equals_intra() {
        let w = AttentionWeights::generate(&small_cfg()).unwrap();
        let t = random_tokens(2, &[7], 12);
        assert_eq!(intra_block(&t, &w.blocks[0]), cross_block(&t, &w.blocks[0]));
    }

    #[test]
    fn intra_block_does_not_mix_scans() {
        let w = AttentionWeights::generate(&small_cfg()).unwrap();
        let t = random_tokens(3, &[4, 5, 3], 12);
        let mut scans = t.scans();
        scans[1].fill(0.0);
        let zeroed = TokenSet::from_scans(scans).unwrap();
        let a = intra_block(&t, &w.blocks[0]);
        let b = intra_block(&zeroed, &w.blocks[0]);
        assert_eq!(a.scan(0), b.scan(0));
        assert_eq!(a.scan(2), b.scan(2));
    }

    #[test]
    fn softmax_rows_are_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = normal_matrix(&mut rng, 6, 9, 30.0);
        let p = softmax_rows(&x);
        for row in p.row_iter() {
            assert!(row.iter().all(|v| *v >= 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_scans_get_identical_poses() {
        let cfg = small_cfg();
        let w = AttentionWeights::generate(&cfg).unwrap();
        let t = random_tokens(6, &[5], 12);
        let twice = TokenSet::from_scans(vec![t.scan(0), t.scan(0)]).unwrap();
        let out = regress_poses(&alternating_attention(&twice, &w, &cfg).unwrap(), &w).unwrap();
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn output_rotations_are_valid() {
        let cfg = small_cfg();
        let w = AttentionWeights::generate(&cfg).unwrap();
        for seed in 0..20 {
            let t = random_tokens(seed, &[3, 6, 2], 12);
            let poses = regress_poses(&alternating_attention(&t, &w, &cfg).unwrap(), &w).unwrap();
            for p in poses.iter() {
                let r = p.rotation.matrix();
                assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-9);
                assert!((r.determinant() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn config_and_shape_errors() {
        assert!(AAConfig {
            layers: 3,
            ..small_cfg()
        }
        .validate()
        .is_err());
        assert!(AAConfig {
            heads: 5,
            ..small_cfg()
        }
        .validate()
        .is_err());
        let cfg = small_cfg();
        let w = AttentionWeights::generate(&cfg).unwrap();
        let t = random_tokens(1, &[3], 6);
        assert!(alternating_attention(&t, &w, &cfg).is_err());
    }

    #[test]
    fn weights_are_deterministic() {
        let cfg = small_cfg();
        assert_eq!(
            AttentionWeights::generate(&cfg).unwrap(),
            AttentionWeights::generate(&cfg).unwrap()
        );
        let other = AAConfig { seed: 6, ..cfg };
        assert_ne!(
            AttentionWeights::generate(&cfg).unwrap(),
            AttentionWeights::generate(&other).unwrap()
        );
    }
}
