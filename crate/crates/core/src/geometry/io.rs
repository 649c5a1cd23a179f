//! Scene directories: a `manifest` in brace-structured text plus
//! `scan_<i>.csv` and `world.csv` files with header `id,x,y,z`.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use super::{PointCloud, Scene, SceneConfig};
use crate::conf::{format_f64, Block, Value};
use crate::diffusion::PoseSet;
use crate::error::{Error, Result};
use crate::lie::RigidTransform;

const FORMAT_TAG: &str = "mvdiff-scene";

pub fn scene_config_to_block(cfg: &SceneConfig) -> Block {
    let mut b = Block::new();
    b.set("min_scans", Value::int(cfg.min_scans as u64))
        .set("max_scans", Value::int(cfg.max_scans as u64))
        .set("world_points", Value::int(cfg.world_points as u64))
        .set("room", Value::num_list(&cfg.room))
        .set("view_radius", Value::num(cfg.view_radius))
        .set("point_noise", Value::num(cfg.point_noise))
        .set("overlap_threshold", Value::num(cfg.overlap_threshold))
        .set("max_view_angle", Value::num(cfg.max_view_angle))
        .set("min_scan_points", Value::int(cfg.min_scan_points as u64))
        .set("seed", Value::int(cfg.seed));
    b
}

/// Missing keys fall back to `base`.
pub fn scene_config_from_block(b: &Block, base: &SceneConfig) -> Result<SceneConfig> {
    b.expect_keys(
        "scene",
        &[
            "scans",
            "min_scans",
            "max_scans",
            "world_points",
            "room",
            "view_radius",
            "point_noise",
            "overlap_threshold",
            "max_view_angle",
            "min_scan_points",
            "seed",
        ],
    )?;
    let mut cfg = base.clone();
    if b.get("scans").is_some() {
        let n = b.usize_or("scans", 0)?;
        cfg.min_scans = n;
        cfg.max_scans = n;
    }
    cfg.min_scans = b.usize_or("min_scans", cfg.min_scans)?;
    cfg.max_scans = b.usize_or("max_scans", cfg.max_scans)?;
    cfg.world_points = b.usize_or("world_points", cfg.world_points)?;
    if let Some(v) = b.get("room") {
        let r = v.as_f64_list()?;
        if r.len() != 3 {
            return Err(Error::Parse(format!(
                "room needs 3 numbers, got {}",
                r.len()
            )));
        }
        cfg.room = [r[0], r[1], r[2]];
    }
    cfg.view_radius = b.f64_or("view_radius", cfg.view_radius)?;
    cfg.point_noise = b.f64_or("point_noise", cfg.point_noise)?;
    cfg.overlap_threshold = b.f64_or("overlap_threshold", cfg.overlap_threshold)?;
    cfg.max_view_angle = b.f64_or("max_view_angle", cfg.max_view_angle)?;
    cfg.min_scan_points = b.usize_or("min_scan_points", cfg.min_scan_points)?;
    cfg.seed = b.u64_or("seed", cfg.seed)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn pose_rows_value(poses: &PoseSet) -> Value {
    Value::List(
        poses
            .iter()
            .map(|t| {
                Value::List(
                    t.to_row()
                        .iter()
                        .map(|x| Value::Number(format!("{x:.16e}")))
                        .collect(),
                )
            })
            .collect(),
    )
}

pub fn pose_rows_from_value(v: &Value) -> Result<PoseSet> {
    let Value::List(rows) = v else {
        return Err(Error::Parse("pose rows must be a list".into()));
    };
    let poses = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            RigidTransform::from_row(&r.as_f64_list()?)
                .map_err(|e| Error::Parse(format!("pose {i}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    PoseSet::new(poses)
}

pub fn write_cloud_csv(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["id", "x", "y", "z"])
        .map_err(|e| Error::csv(path, e))?;
    for (p, id) in cloud.points.iter().zip(&cloud.ids) {
        w.write_record([
            id.to_string(),
            format_f64(p.x),
            format_f64(p.y),
            format_f64(p.z),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_cloud_csv(path: &Path) -> Result<PointCloud> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let header = r.headers().map_err(|e| Error::csv(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["id", "x", "y", "z"] {
        return Err(Error::Parse(format!(
            "{}: expected header id,x,y,z",
            path.display()
        )));
    }
    let mut points = Vec::new();
    let mut ids = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let bad = || Error::Parse(format!("{}: bad record {}", path.display(), line + 2));
        let id: u64 = rec
            .get(0)
            .ok_or_else(bad)?
            .trim()
            .parse()
            .map_err(|_| bad())?;
        let mut xyz = [0.0; 3];
        for (k, slot) in xyz.iter_mut().enumerate() {
            *slot = rec
                .get(k + 1)
                .ok_or_else(bad)?
                .trim()
                .parse()
                .map_err(|_| bad())?;
        }
        ids.push(id);
        points.push(Vector3::from(xyz));
    }
    PointCloud::new(points, ids).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn save_scene(dir: &Path, scene: &Scene) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Block::new();
    manifest
        .set("format", Value::str(FORMAT_TAG))
        .set("version", Value::int(1))
        .set("n_scans", Value::int(scene.len() as u64))
        .set("config", Value::Block(scene_config_to_block(&scene.config)))
        .set("gt_poses", pose_rows_value(&scene.gt));
    let path = dir.join("manifest");
    fs::write(&path, manifest.to_string()).map_err(|e| Error::io(&path, e))?;
    write_cloud_csv(&dir.join("world.csv"), &scene.world)?;
    for (i, scan) in scene.scans.iter().enumerate() {
        write_cloud_csv(&dir.join(format!("scan_{i}.csv")), scan)?;
    }
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let path = dir.join("manifest");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = Block::parse(&text)?;
    let tag = manifest.str_or("format", "")?;
    if tag != FORMAT_TAG {
        return Err(Error::Parse(format!(
            "{}: not a scene manifest (format {tag:?})",
            path.display()
        )));
    }
    let n = manifest.usize_or("n_scans", 0)?;
    let config = match manifest.block("config")? {
        Some(b) => scene_config_from_block(b, &SceneConfig::default())?,
        None => SceneConfig::default(),
    };
    let gt = pose_rows_from_value(
        manifest
            .get("gt_poses")
            .ok_or_else(|| Error::Parse("manifest lacks gt_poses".into()))?,
    )?;
    if gt.len() != n {
        return Err(Error::Parse(format!(
            "manifest lists {n} scans but {} poses",
            gt.len()
        )));
    }
    let world = read_cloud_csv(&dir.join("world.csv"))?;
    let scans = (0..n)
        .map(|i| read_cloud_csv(&dir.join(format!("scan_{i}.csv"))))
        .collect::<Result<Vec<_>>>()?;
    Scene::new(scans, gt, world, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::generate_scene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scene_directory_round_trip_is_lossless() {
        let cfg = SceneConfig {
            world_points: 800,
            ..SceneConfig::default().with_scans(3)
        };
        let scene = generate_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_scene(dir.path(), &scene).unwrap();
        let back = load_scene(dir.path()).unwrap();
        assert_eq!(back.scans, scene.scans);
        assert_eq!(back.world, scene.world);
        assert_eq!(back.gt, scene.gt);
        assert_eq!(back.config, scene.config);
        assert_eq!(back.overlap, scene.overlap);
    }

    #[test]
    fn missing_manifest_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_scene(dir.path()), Err(Error::Io { .. })));
    }
}
