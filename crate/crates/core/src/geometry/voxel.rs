//! Stride-2 voxel pooling hierarchy producing superpoints.
//!
//! Level 0 bins the input into `base_voxel` cells. Each further level bins
//! the previous level's centroids into cells twice as wide. Centroids are
//! always the mean of the original member points.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use super::PointCloud;
use crate::error::{Error, Result};

pub const DEFAULT_BASE_VOXEL: f64 = 0.2;
pub const DEFAULT_LEVELS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct SuperpointLevel {
    pub voxel: f64,
    pub centroids: Vec<Vector3<f64>>,
    /// Covariance eigenvalues of each superpoint's member points, descending.
    pub spread: Vec<Vector3<f64>>,
    /// Input point indices of each superpoint.
    pub members: Vec<Vec<usize>>,
}

/// Levels `0..=levels`, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpointSet {
    pub levels: Vec<SuperpointLevel>,
}

impl SuperpointSet {
    pub fn level(&self, l: usize) -> Option<&SuperpointLevel> {
        self.levels.get(l)
    }

    pub fn coarsest(&self) -> &SuperpointLevel {
        self.levels
            .last()
            .expect("hierarchy has at least one level")
    }
}

fn cell_of(p: &Vector3<f64>, voxel: f64) -> (i64, i64, i64) {
    (
        (p.x / voxel).floor() as i64,
        (p.y / voxel).floor() as i64,
        (p.z / voxel).floor() as i64,
    )
}

fn summarize(points: &[Vector3<f64>], members: Vec<Vec<usize>>, voxel: f64) -> SuperpointLevel {
    let mut centroids = Vec::with_capacity(members.len());
    let mut spread = Vec::with_capacity(members.len());
    for m in &members {
        let n = m.len() as f64;
        let c = m.iter().fold(Vector3::zeros(), |acc, &k| acc + points[k]) / n;
        let cov = m.iter().fold(Matrix3::zeros(), |acc, &k| {
            let d = points[k] - c;
            acc + d * d.transpose()
        }) / n;
        let mut eig: Vec<f64> = SymmetricEigen::new(cov)
            .eigenvalues
            .iter()
            .map(|e| e.max(0.0))
            .collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        centroids.push(c);
        spread.push(Vector3::new(eig[0], eig[1], eig[2]));
    }
    SuperpointLevel {
        voxel,
        centroids,
        spread,
        members,
    }
}

pub fn voxel_downsample_hierarchy(
    cloud: &PointCloud,
    base_voxel: f64,
    levels: usize,
) -> Result<SuperpointSet> {
    if !(base_voxel > 0.0 && base_voxel.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "voxel size must be positive, got {base_voxel}"
        )));
    }
    if levels < 1 {
        return Err(Error::InvalidArgument(
            "hierarchy needs at least one pooling level".into(),
        ));
    }
    let points = &cloud.points;

    let mut cells: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
    for (k, p) in points.iter().enumerate() {
        cells.entry(cell_of(p, base_voxel)).or_default().push(k);
    }
    let mut out = vec![summarize(points, cells.into_values().collect(), base_voxel)];

    for l in 1..=levels {
        let voxel = base_voxel * (1u64 << l) as f64;
        let prev = &out[l - 1];
        let mut cells: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
        for (s, c) in prev.centroids.iter().enumerate() {
            cells.entry(cell_of(c, voxel)).or_default().push(s);
        }
        let members = cells
            .into_values()
            .map(|children| {
                let mut m: Vec<usize> = children
                    .iter()
                    .flat_map(|&s| prev.members[s].iter().copied())
                    .collect();
                m.sort_unstable();
                m
            })
            .collect();
        out.push(summarize(points, members, voxel));
    }
    Ok(SuperpointSet { levels: out })
}
