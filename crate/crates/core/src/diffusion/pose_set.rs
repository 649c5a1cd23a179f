use std::ops::Index;

use crate::error::{Error, Result};
use crate::lie::RigidTransform;

/// An ordered tuple of per-scan poses, an element of SE(3)^N with `N ≥ 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSet(Vec<RigidTransform>);

impl PoseSet {
    pub fn new(poses: Vec<RigidTransform>) -> Result<Self> {
        if poses.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a pose set needs at least 2 poses, got {}",
                poses.len()
            )));
        }
        Ok(PoseSet(poses))
    }

    pub fn identity(n: usize) -> Result<Self> {
        PoseSet::new(vec![RigidTransform::identity(); n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, RigidTransform> {
        self.0.iter()
    }

    pub fn as_slice(&self) -> &[RigidTransform] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<RigidTransform> {
        self.0
    }

    /// `G ∘ T_i` for every pose: a change of world frame.
    pub fn left_multiply(&self, g: &RigidTransform) -> PoseSet {
        PoseSet(self.0.iter().map(|t| g.compose(t)).collect())
    }

    /// Reorders poses so that output slot `k` holds input pose `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> PoseSet {
        PoseSet(perm.iter().map(|&k| self.0[k]).collect())
    }

    pub(crate) fn ensure_same_len(&self, other: &PoseSet, what: &str) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::InvalidArgument(format!(
                "{what}: pose set lengths differ ({} vs {})",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    /// One transform per line, 12 numbers each.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.0 {
            out.push_str(&t.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let poses = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .enumerate()
            .map(|(i, l)| {
                l.parse::<RigidTransform>()
                    .map_err(|e| Error::Parse(format!("pose {i}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        PoseSet::new(poses)
    }
}

impl Index<usize> for PoseSet {
    type Output = RigidTransform;

    fn index(&self, i: usize) -> &RigidTransform {
        &self.0[i]
    }
}

impl<'a> IntoIterator for &'a PoseSet {
    type Item = &'a RigidTransform;
    type IntoIter = std::slice::Iter<'a, RigidTransform>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}
