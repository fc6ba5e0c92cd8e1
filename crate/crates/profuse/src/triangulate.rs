//! Seed extraction from confident correspondences and Gaussian
//! initialization.
//!
//! Each accepted correspondence is triangulated as the midpoint of the
//! shortest segment between the two back-projected pixel rays; seeds are
//! deduplicated on a voxel grid and turned into isotropic Gaussians.

use std::collections::HashMap;

use nalgebra::{Point3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene_model::{Camera, Gaussian, GaussianScene, ViewSet, WarpField};

/// Triangulation outcome for a single ray pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TriResult {
    Point(Vector3<f64>),
    /// Rays near-parallel: sine of the angle below 1e-4.
    NearParallel,
    /// Midpoint behind one of the cameras.
    BehindCamera,
}

/// One triangulated correspondence.
#[derive(Debug, Clone)]
pub struct SeedPoint {
    pub position: Vector3<f64>,
    /// (view, pixel) support in both images.
    pub support: [(usize, (f64, f64)); 2],
    /// Min of the pair's warp confidences.
    pub confidence: f64,
    pub color: [f32; 3],
}

#[derive(Debug, Clone, Default)]
pub struct ExtractStats {
    pub sampled: usize,
    pub low_confidence: usize,
    pub out_of_image: usize,
    pub near_parallel: usize,
    pub behind_camera: usize,
    pub accepted: usize,
    pub after_dedup: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    pub tau_alpha: f64,
    pub stride: usize,
    pub dedup_radius: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            tau_alpha: 0.6,
            stride: 4,
            dedup_radius: 0.02,
        }
    }
}

fn ray_closest_midpoint(
    o1: Point3<f64>,
    d1: Vector3<f64>,
    o2: Point3<f64>,
    d2: Vector3<f64>,
) -> Option<Vector3<f64>> {
    if d1.cross(&d2).norm() < 1e-4 {
        return None;
    }
    let a = o2 - o1;
    let b = d1.dot(&d2);
    let denom = 1.0 - b * b;
    let t1 = (a.dot(&d1) - b * a.dot(&d2)) / denom;
    let t2 = (b * a.dot(&d1) - a.dot(&d2)) / denom;
    let p1 = o1.coords + d1 * t1;
    let p2 = o2.coords + d2 * t2;
    Some((p1 + p2) * 0.5)
}

/// Midpoint of the shortest segment between the rays through two pixels.
///
/// The two rays are ordered canonically before any arithmetic, so swapping
/// the arguments returns a bit-identical result.
pub fn triangulate_pair(
    cam_i: &Camera,
    pix_i: (f64, f64),
    cam_j: &Camera,
    pix_j: (f64, f64),
) -> TriResult {
    let (o1, d1) = cam_i.pixel_ray(pix_i.0, pix_i.1);
    let (o2, d2) = cam_j.pixel_ray(pix_j.0, pix_j.1);
    let key = |o: &Point3<f64>, d: &Vector3<f64>| {
        [o.x, o.y, o.z, d.x, d.y, d.z]
    };
    let k1 = key(&o1, &d1);
    let k2 = key(&o2, &d2);
    let mid = if k1 <= k2 {
        ray_closest_midpoint(o1, d1, o2, d2)
    } else {
        ray_closest_midpoint(o2, d2, o1, d1)
    };
    match mid {
        None => TriResult::NearParallel,
        Some(p) => {
            let pw = Point3::from(p);
            if cam_i.to_camera(&pw).z <= 0.0 || cam_j.to_camera(&pw).z <= 0.0 {
                TriResult::BehindCamera
            } else {
                TriResult::Point(p)
            }
        }
    }
}

fn color_at(views: &ViewSet, view: usize, u: f64, v: f64) -> [f32; 3] {
    let cam = &views.cameras[view];
    let x = (u.floor() as i64).clamp(0, cam.width as i64 - 1) as usize;
    let y = (v.floor() as i64).clamp(0, cam.height as i64 - 1) as usize;
    match &views.colors[view] {
        Some(buf) => {
            let idx = (y * cam.width + x) * 3;
            [buf[idx], buf[idx + 1], buf[idx + 2]]
        }
        None => [0.5, 0.5, 0.5],
    }
}

/// Sample each warp field on a stride grid, triangulate confident
/// correspondences, and deduplicate by voxel grid (highest-confidence
/// representative per voxel).
pub fn extract_seeds(
    views: &ViewSet,
    warps: &[WarpField],
    config: &ExtractConfig,
) -> Result<(Vec<SeedPoint>, ExtractStats)> {
    let mut stats = ExtractStats::default();
    let reverse: HashMap<(usize, usize), &WarpField> = warps
        .iter()
        .map(|w| ((w.src_view, w.dst_view), w))
        .collect();
    let mut seeds = Vec::new();
    for warp in warps {
        let (j, i) = (warp.src_view, warp.dst_view);
        let cam_j = &views.cameras[j];
        let cam_i = &views.cameras[i];
        let rev = reverse.get(&(i, j));
        for y in (0..warp.h).step_by(config.stride.max(1)) {
            for x in (0..warp.w).step_by(config.stride.max(1)) {
                stats.sampled += 1;
                let alpha = warp.confidence.at(x, y) as f64;
                if alpha < config.tau_alpha {
                    stats.low_confidence += 1;
                    continue;
                }
                let (u, v) = warp.dst_coord(x, y);
                if !cam_i.in_image(u, v) {
                    stats.out_of_image += 1;
                    continue;
                }
                let pix_j = (x as f64 + 0.5, y as f64 + 0.5);
                match triangulate_pair(cam_i, (u, v), cam_j, pix_j) {
                    TriResult::NearParallel => stats.near_parallel += 1,
                    TriResult::BehindCamera => stats.behind_camera += 1,
                    TriResult::Point(p) => {
                        // Min over both directions of the correspondence.
                        let alpha_rev = rev
                            .map(|r| {
                                let rx = (u.floor() as i64).clamp(0, r.w as i64 - 1) as usize;
                                let ry = (v.floor() as i64).clamp(0, r.h as i64 - 1) as usize;
                                r.confidence.at(rx, ry) as f64
                            })
                            .unwrap_or(alpha);
                        stats.accepted += 1;
                        seeds.push(SeedPoint {
                            position: p,
                            support: [(i, (u, v)), (j, pix_j)],
                            confidence: alpha.min(alpha_rev),
                            color: color_at(views, i, u, v),
                        });
                    }
                }
            }
        }
    }
    if seeds.is_empty() {
        return Err(Error::EmptyScene);
    }

    // Voxel-grid dedup keyed on floor(position / radius).
    let r = config.dedup_radius;
    let key = |p: &Vector3<f64>| -> (i64, i64, i64) {
        if r.is_infinite() {
            (0, 0, 0)
        } else {
            (
                (p.x / r).floor() as i64,
                (p.y / r).floor() as i64,
                (p.z / r).floor() as i64,
            )
        }
    };
    let mut best: HashMap<(i64, i64, i64), usize> = HashMap::new();
    for (idx, s) in seeds.iter().enumerate() {
        let k = key(&s.position);
        match best.get(&k) {
            Some(&prev) if seeds[prev].confidence >= s.confidence => {}
            _ => {
                best.insert(k, idx);
            }
        }
    }
    let mut kept: Vec<usize> = best.into_values().collect();
    kept.sort_unstable();
    let deduped: Vec<SeedPoint> = kept.into_iter().map(|i| seeds[i].clone()).collect();
    stats.after_dedup = deduped.len();
    Ok((deduped, stats))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub scale_factor: f64,
    /// Neighbor distance used when fewer than 4 seeds exist.
    pub fallback_distance: f64,
    pub opacity: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            scale_factor: 0.5,
            fallback_distance: 0.05,
            opacity: 0.8,
        }
    }
}

/// One isotropic Gaussian per seed; scale is `scale_factor` times the
/// distance to the seed's 3rd-nearest neighbor.
pub fn init_gaussians(seeds: &[SeedPoint], config: &InitConfig) -> Result<GaussianScene> {
    if seeds.is_empty() {
        return Err(Error::EmptyScene);
    }
    let n = seeds.len();
    let knn3 = |i: usize| -> f64 {
        let mut d: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (seeds[j].position - seeds[i].position).norm())
            .collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        d[2]
    };
    let gaussians = seeds
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let dist = if n < 4 { config.fallback_distance } else { knn3(i) };
            let scale = (config.scale_factor * dist).max(1e-9);
            Gaussian {
                position: s.position,
                scale: Vector3::new(scale, scale, scale),
                rotation: UnitQuaternion::identity(),
                opacity: config.opacity,
                color: s.color,
            }
        })
        .collect();
    Ok(GaussianScene {
        gaussians,
        descriptors: None,
        descriptor_dim: 0,
        labeled: None,
    })
}
