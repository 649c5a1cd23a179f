use std::collections::{HashMap, HashSet};

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffusion::PoseSet;
use crate::error::{Error, Result};
use crate::lie::{RigidTransform, Rotation};

const MAX_RETRIES: usize = 100;

/// Points with persistent world identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub ids: Vec<u64>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>, ids: Vec<u64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("point cloud is empty".into()));
        }
        if points.len() != ids.len() {
            return Err(Error::InvalidArgument(format!(
                "{} points but {} ids",
                points.len(),
                ids.len()
            )));
        }
        if points.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidArgument(
                "point cloud has non-finite coordinates".into(),
            ));
        }
        let unique: HashSet<u64> = ids.iter().copied().collect();
        if unique.len() != ids.len() {
            return Err(Error::InvalidArgument("point ids are not unique".into()));
        }
        Ok(PointCloud { points, ids })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            ids: self.ids.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// Scan count is drawn uniformly from `min_scans..=max_scans`.
    pub min_scans: usize,
    pub max_scans: usize,
    pub world_points: usize,
    /// Room dimensions along x, y, z; the room spans `[0, room]`.
    pub room: [f64; 3],
    /// A scan sees every world point within this distance of its camera center.
    pub view_radius: f64,
    /// Standard deviation of the Gaussian noise added to local scan coordinates.
    pub point_noise: f64,
    /// Scans `i`, `j` are adjacent when either overlap ratio reaches this value.
    pub overlap_threshold: f64,
    /// Upper bound on the rotation angle of camera orientations.
    pub max_view_angle: f64,
    pub min_scan_points: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            min_scans: 2,
            max_scans: 50,
            world_points: 6000,
            room: [8.0, 6.0, 3.0],
            view_radius: 3.0,
            point_noise: 0.01,
            overlap_threshold: 0.1,
            max_view_angle: std::f64::consts::FRAC_PI_2,
            min_scan_points: 20,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn with_scans(mut self, n: usize) -> Self {
        self.min_scans = n;
        self.max_scans = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.min_scans < 2 || self.max_scans > 50 || self.min_scans > self.max_scans {
            return bad(format!(
                "scan count range {}..={} must lie within 2..=50",
                self.min_scans, self.max_scans
            ));
        }
        if self.world_points == 0 || self.min_scan_points < 3 {
            return bad("world_points must be positive and min_scan_points at least 3".into());
        }
        if !self.room.iter().all(|&x| x > 0.0 && x.is_finite()) {
            return bad(format!(
                "room dimensions must be positive, got {:?}",
                self.room
            ));
        }
        if self.view_radius.is_nan()
            || self.view_radius <= 0.0
            || self.point_noise.is_nan()
            || self.point_noise < 0.0
        {
            return bad("view_radius must be positive and point_noise non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.overlap_threshold) {
            return bad(format!(
                "overlap_threshold {} outside [0, 1]",
                self.overlap_threshold
            ));
        }
        if !(0.0..std::f64::consts::PI).contains(&self.max_view_angle) {
            return bad(format!(
                "max_view_angle {} outside [0, pi)",
                self.max_view_angle
            ));
        }
        Ok(())
    }
}

/// Local-frame scans of a shared world with ground-truth poses (local → world).
#[derive(Debug, Clone)]
pub struct Scene {
    pub scans: Vec<PointCloud>,
    pub gt: PoseSet,
    pub world: PointCloud,
    pub overlap: Vec<Vec<f64>>,
    pub config: SceneConfig,
    world_index: HashMap<u64, usize>,
}

impl Scene {
    pub fn new(
        scans: Vec<PointCloud>,
        gt: PoseSet,
        world: PointCloud,
        config: SceneConfig,
    ) -> Result<Self> {
        if scans.len() != gt.len() {
            return Err(Error::InvalidArgument(format!(
                "{} scans but {} ground-truth poses",
                scans.len(),
                gt.len()
            )));
        }
        let world_index: HashMap<u64, usize> = world
            .ids
            .iter()
            .enumerate()
            .map(|(k, &id)| (id, k))
            .collect();
        for (i, scan) in scans.iter().enumerate() {
            if let Some(id) = scan.ids.iter().find(|id| !world_index.contains_key(id)) {
                return Err(Error::InvalidArgument(format!(
                    "scan {i} references unknown world id {id}"
                )));
            }
        }
        let overlap = overlap_matrix(&scans);
        Ok(Scene {
            scans,
            gt,
            world,
            overlap,
            config,
            world_index,
        })
    }

    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    pub fn world_point(&self, id: u64) -> Option<&Vector3<f64>> {
        self.world_index.get(&id).map(|&k| &self.world.points[k])
    }

    /// Whether the overlap graph (edge where either ratio ≥ `threshold`) is connected.
    pub fn is_connected(&self, threshold: f64) -> bool {
        overlap_connected(&self.overlap, threshold)
    }

    /// Scenes with scans reordered so that slot `k` holds scan `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Scene {
        let scans = perm.iter().map(|&k| self.scans[k].clone()).collect();
        Scene::new(
            scans,
            self.gt.permuted(perm),
            self.world.clone(),
            self.config.clone(),
        )
        .expect("permutation of a valid scene")
    }
}

pub fn overlap_matrix(scans: &[PointCloud]) -> Vec<Vec<f64>> {
    let sets: Vec<HashSet<u64>> = scans
        .iter()
        .map(|s| s.ids.iter().copied().collect())
        .collect();
    (0..scans.len())
        .map(|i| {
            (0..scans.len())
                .map(|j| ratio(&scans[i].ids, &sets[j]))
                .collect()
        })
        .collect()
}

fn ratio(ids: &[u64], other: &HashSet<u64>) -> f64 {
    if ids.is_empty() {
        return 0.0;
    }
    ids.iter().filter(|id| other.contains(id)).count() as f64 / ids.len() as f64
}

fn overlap_connected(overlap: &[Vec<f64>], threshold: f64) -> bool {
    let n = overlap.len();
    if n == 0 {
        return false;
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            if !seen[j] && (overlap[i][j] >= threshold || overlap[j][i] >= threshold) {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Fraction of scan `i`'s world ids also present in scan `j`.
pub fn overlap_ratio(scene: &Scene, i: usize, j: usize) -> Result<f64> {
    let n = scene.len();
    if i >= n || j >= n {
        return Err(Error::Index {
            index: i.max(j),
            lo: 0,
            hi: n.saturating_sub(1),
        });
    }
    Ok(scene.overlap[i][j])
}

/// Applies pose `i` to every point of scan `i`.
pub fn transform_scene(scene: &Scene, poses: &PoseSet) -> Result<Vec<PointCloud>> {
    if poses.len() != scene.len() {
        return Err(Error::InvalidArgument(format!(
            "transform_scene: {} poses for {} scans",
            poses.len(),
            scene.len()
        )));
    }
    Ok(scene
        .scans
        .iter()
        .zip(poses.iter())
        .map(|(scan, pose)| scan.transformed(pose))
        .collect())
}

/// An axis-aligned box `[lo, hi]` whose faces are sampled as surfaces.
struct BoxSurface {
    lo: Vector3<f64>,
    hi: Vector3<f64>,
}

impl BoxSurface {
    fn face_areas(&self) -> [f64; 6] {
        let d = self.hi - self.lo;
        let (xy, xz, yz) = (d.x * d.y, d.x * d.z, d.y * d.z);
        [yz, yz, xz, xz, xy, xy]
    }

    fn sample_face<R: Rng + ?Sized>(&self, face: usize, rng: &mut R) -> Vector3<f64> {
        let u: f64 = rng.random();
        let v: f64 = rng.random();
        let lerp = |k: usize, s: f64| self.lo[k] + s * (self.hi[k] - self.lo[k]);
        let axis = face / 2;
        let fixed = if face.is_multiple_of(2) {
            self.lo[axis]
        } else {
            self.hi[axis]
        };
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let mut p = Vector3::zeros();
        p[axis] = fixed;
        p[a] = lerp(a, u);
        p[b] = lerp(b, v);
        p
    }
}

fn sample_world<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> PointCloud {
    let room = Vector3::from(cfg.room);
    let mut boxes = vec![BoxSurface {
        lo: Vector3::zeros(),
        hi: room,
    }];
    // A few furniture-like boxes standing on the floor.
    for _ in 0..4 {
        let size = Vector3::new(
            rng.random_range(0.4..1.5_f64).min(room.x * 0.4),
            rng.random_range(0.4..1.5_f64).min(room.y * 0.4),
            rng.random_range(0.3..1.2_f64).min(room.z * 0.6),
        );
        let x = rng.random_range(0.0..(room.x - size.x));
        let y = rng.random_range(0.0..(room.y - size.y));
        boxes.push(BoxSurface {
            lo: Vector3::new(x, y, 0.0),
            hi: Vector3::new(x + size.x, y + size.y, size.z),
        });
    }
    let faces: Vec<(usize, usize, f64)> = boxes
        .iter()
        .enumerate()
        .flat_map(|(b, bx)| {
            bx.face_areas()
                .into_iter()
                .enumerate()
                .map(move |(f, a)| (b, f, a))
        })
        .collect();
    let total: f64 = faces.iter().map(|f| f.2).sum();

    let mut points = Vec::with_capacity(cfg.world_points);
    for _ in 0..cfg.world_points {
        let mut pick = rng.random::<f64>() * total;
        let mut chosen = faces[faces.len() - 1];
        for f in &faces {
            if pick < f.2 {
                chosen = *f;
                break;
            }
            pick -= f.2;
        }
        points.push(boxes[chosen.0].sample_face(chosen.1, rng));
    }
    let ids = (0..cfg.world_points as u64).collect();
    PointCloud { points, ids }
}

fn sample_camera<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> RigidTransform {
    let axis = Vector3::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    )
    .normalize();
    let angle = rng.random::<f64>() * cfg.max_view_angle;
    let rotation = Rotation::exp(&(axis * angle));
    let margin = |extent: f64| (0.5_f64).min(extent * 0.25);
    let center = Vector3::new(
        rng.random_range(margin(cfg.room[0])..cfg.room[0] - margin(cfg.room[0])),
        rng.random_range(margin(cfg.room[1])..cfg.room[1] - margin(cfg.room[1])),
        rng.random_range(margin(cfg.room[2])..cfg.room[2] - margin(cfg.room[2])),
    );
    RigidTransform::new(rotation, center)
}

/// Samples a world of box surfaces and `N` radius-limited scans of it.
///
/// Camera sets are resampled until every scan has at least
/// `min_scan_points` points and the overlap graph is connected.
pub fn generate_scene<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Result<Scene> {
    cfg.validate()?;
    let world = sample_world(cfg, rng);
    let n = rng.random_range(cfg.min_scans..=cfg.max_scans);
    let radius_sq = cfg.view_radius * cfg.view_radius;

    for _ in 0..MAX_RETRIES {
        let cameras: Vec<RigidTransform> = (0..n).map(|_| sample_camera(cfg, rng)).collect();
        let mut scans = Vec::with_capacity(n);
        let mut too_small = false;
        for cam in &cameras {
            let to_local = cam.inverse();
            let mut points = Vec::new();
            let mut ids = Vec::new();
            for (p, &id) in world.points.iter().zip(&world.ids) {
                if (p - cam.translation).norm_squared() <= radius_sq {
                    let noise = Vector3::new(
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                    ) * cfg.point_noise;
                    points.push(to_local.apply(p) + noise);
                    ids.push(id);
                }
            }
            if points.len() < cfg.min_scan_points {
                too_small = true;
            }
            scans.push(PointCloud { points, ids });
        }
        if too_small {
            continue;
        }
        let overlap = overlap_matrix(&scans);
        if !overlap_connected(&overlap, cfg.overlap_threshold) {
            continue;
        }
        let gt = PoseSet::new(cameras)?;
        return Scene::new(scans, gt, world, cfg.clone());
    }
    Err(Error::Generation(format!(
        "no connected overlap graph for {n} scans after {MAX_RETRIES} attempts; \
         increase view_radius (currently {}) or lower overlap_threshold",
        cfg.view_radius
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::sample_random_pose;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(n: usize) -> SceneConfig {
        SceneConfig {
            world_points: 1500,
            ..SceneConfig::default().with_scans(n)
        }
    }

    #[test]
    fn full_visibility_gives_full_overlap() {
        let cfg = SceneConfig {
            view_radius: 20.0,
            ..small_cfg(2)
        };
        let scene = generate_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(overlap_ratio(&scene, 0, 1).unwrap(), 1.0);
        assert_eq!(overlap_ratio(&scene, 1, 0).unwrap(), 1.0);
        assert_eq!(scene.scans[0].len(), cfg.world_points);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg(5);
        let a = generate_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = generate_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.scans, b.scans);
        assert_eq!(a.gt, b.gt);
        assert_eq!(a.world, b.world);
    }

    #[test]
    fn gt_poses_reproduce_world_within_noise() {
        let cfg = SceneConfig {
            point_noise: 0.0,
            ..small_cfg(4)
        };
        let scene = generate_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let moved = transform_scene(&scene, &scene.gt).unwrap();
        for cloud in &moved {
            for (p, id) in cloud.points.iter().zip(&cloud.ids) {
                assert!((p - scene.world_point(*id).unwrap()).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn identity_transform_leaves_scans_unchanged() {
        let scene = generate_scene(&small_cfg(3), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let moved = transform_scene(&scene, &PoseSet::identity(3).unwrap()).unwrap();
        assert_eq!(moved, scene.scans);
        assert!(transform_scene(&scene, &PoseSet::identity(2).unwrap()).is_err());
    }

    #[test]
    fn gauge_transform_commutes_with_scene_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scene = generate_scene(&small_cfg(3), &mut rng).unwrap();
        let g = sample_random_pose(&mut rng, 1.0, 3.0).unwrap();
        let direct = transform_scene(&scene, &scene.gt.left_multiply(&g)).unwrap();
        let via_gt = transform_scene(&scene, &scene.gt).unwrap();
        for (a, b) in direct.iter().zip(&via_gt) {
            for (p, q) in a.points.iter().zip(&b.points) {
                assert!((p - g.apply(q)).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn overlap_ratio_counts_shared_ids() {
        let p = |k: usize| vec![Vector3::zeros(); k];
        let a = PointCloud::new(p(4), vec![0, 1, 2, 3]).unwrap();
        let b = PointCloud::new(p(4), vec![2, 3, 4, 5]).unwrap();
        let c = PointCloud::new(p(2), vec![8, 9]).unwrap();
        let world = PointCloud::new(p(10), (0..10).collect()).unwrap();
        let scene = Scene::new(
            vec![a, b, c],
            PoseSet::identity(3).unwrap(),
            world,
            SceneConfig::default(),
        )
        .unwrap();
        assert_eq!(overlap_ratio(&scene, 0, 0).unwrap(), 1.0);
        assert_eq!(overlap_ratio(&scene, 0, 1).unwrap(), 0.5);
        assert_eq!(overlap_ratio(&scene, 0, 2).unwrap(), 0.0);
        assert!(overlap_ratio(&scene, 0, 3).is_err());
        assert!(!scene.is_connected(0.1));
    }

    #[test]
    fn rejects_invalid_clouds_and_configs() {
        assert!(PointCloud::new(vec![], vec![]).is_err());
        assert!(PointCloud::new(vec![Vector3::zeros(); 2], vec![1, 1]).is_err());
        assert!(PointCloud::new(vec![Vector3::new(f64::NAN, 0.0, 0.0)], vec![1]).is_err());
        assert!(SceneConfig::default().with_scans(1).validate().is_err());
        assert!(SceneConfig::default().with_scans(51).validate().is_err());
    }

    #[test]
    fn unreachable_connectivity_is_reported() {
        let cfg = SceneConfig {
            view_radius: 0.05,
            min_scan_points: 3,
            ..small_cfg(6)
        };
        let err = generate_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
    }
}
