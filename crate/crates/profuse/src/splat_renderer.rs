//! Minimal forward Gaussian splatting pass.
//!
//! No image synthesis: the renderer's product is, per pixel, the list of
//! top-K contributing Gaussians with blending weights `w = T * alpha`, where
//! `T` is the transmittance of the Gaussians in front. Visibility masks are
//! derived by thresholding accumulated weight.
//!
//! Two paths exist: a naive per-pixel compositor that scans every projected
//! Gaussian (the reference), and a bbox-binned path that must match it
//! exactly in hit identity and within 1e-6 in weights.

use std::path::Path;

use nalgebra::{Matrix2, Matrix3, Point3};
use rayon::prelude::*;

use crate::container_io::{read_records, write_records, Tensor};
use crate::error::{Error, Result};
use crate::scene_model::{Camera, Gaussian, GaussianScene, Grid2, RenderConfig};

const NEAR_PLANE: f64 = 0.01;
const ALPHA_MAX: f64 = 0.999;

/// One retained per-pixel contribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub gaussian: u32,
    pub weight: f64,
    pub depth: f64,
}

/// Per-pixel top-K hits, each pixel's list ordered by depth ascending.
#[derive(Debug, Clone)]
pub struct PixelHits {
    pub h: usize,
    pub w: usize,
    pub top_k: usize,
    pub hits: Vec<Vec<Hit>>,
}

impl PixelHits {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[Hit] {
        &self.hits[y * self.w + x]
    }

    /// Accumulated weight of the retained hits at a pixel.
    pub fn weight_sum(&self, x: usize, y: usize) -> f64 {
        self.at(x, y).iter().map(|h| h.weight).sum()
    }
}

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedGaussian {
    pub index: u32,
    pub mean: (f64, f64),
    pub cov: Matrix2<f64>,
    /// Inverse covariance, precomputed for Mahalanobis evaluation.
    pub cov_inv: Matrix2<f64>,
    pub depth: f64,
    /// Conservative footprint radius at the configured sigma cutoff.
    pub radius: f64,
    pub opacity: f64,
}

/// EWA-style perspective projection of one Gaussian.
///
/// Returns `None` (cull) when the mean is at or behind the near plane, the
/// footprint lies entirely outside the image, or the projected covariance is
/// degenerate.
pub fn project_gaussian(
    g: &Gaussian,
    cam: &Camera,
    index: u32,
    sigma_cutoff: f64,
) -> Option<ProjectedGaussian> {
    let pc = cam.to_camera(&Point3::from(g.position));
    if pc.z <= NEAR_PLANE {
        return None;
    }
    let (fx, fy) = (cam.fx(), cam.fy());
    let u = fx * pc.x / pc.z + cam.cx();
    let v = fy * pc.y / pc.z + cam.cy();

    // Affine Jacobian of the projection at the mean.
    let j = nalgebra::Matrix2x3::new(
        fx / pc.z,
        0.0,
        -fx * pc.x / (pc.z * pc.z),
        0.0,
        fy / pc.z,
        -fy * pc.y / (pc.z * pc.z),
    );
    let r_wc: Matrix3<f64> = cam.rotation_wc();
    let cov_cam = r_wc * g.covariance() * r_wc.transpose();
    let cov = j * cov_cam * j.transpose();

    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    if det <= 1e-18 {
        return None;
    }
    let cov_inv = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;

    // Largest eigenvalue of the 2x2 covariance bounds the footprint.
    let mid = 0.5 * (cov[(0, 0)] + cov[(1, 1)]);
    let disc = (mid * mid - det).max(0.0).sqrt();
    let radius = sigma_cutoff * (mid + disc).max(0.0).sqrt();

    if u + radius < 0.0
        || v + radius < 0.0
        || u - radius >= cam.width as f64
        || v - radius >= cam.height as f64
    {
        return None;
    }
    Some(ProjectedGaussian {
        index,
        mean: (u, v),
        cov,
        cov_inv,
        depth: pc.z,
        radius,
        opacity: g.opacity,
    })
}

/// Composite one pixel front-to-back over depth-sorted candidates.
///
/// Returns the full (untruncated) hit list in depth order plus the
/// accumulated alpha `1 - prod(1 - alpha_t)`.
fn compose_pixel(
    px: f64,
    py: f64,
    candidates: &[ProjectedGaussian],
    cfg: &RenderConfig,
) -> (Vec<Hit>, f64) {
    let sigma2 = cfg.sigma_cutoff * cfg.sigma_cutoff;
    let mut full = Vec::new();
    let mut transmittance = 1.0;
    for p in candidates {
        let dx = px - p.mean.0;
        let dy = py - p.mean.1;
        let d2 = p.cov_inv[(0, 0)] * dx * dx
            + (p.cov_inv[(0, 1)] + p.cov_inv[(1, 0)]) * dx * dy
            + p.cov_inv[(1, 1)] * dy * dy;
        if d2 > sigma2 || d2 < 0.0 {
            continue;
        }
        let alpha = (p.opacity * (-0.5 * d2).exp()).min(ALPHA_MAX);
        if alpha < cfg.alpha_cutoff {
            continue;
        }
        full.push(Hit {
            gaussian: p.index,
            weight: transmittance * alpha,
            depth: p.depth,
        });
        transmittance *= 1.0 - alpha;
    }
    (full, 1.0 - transmittance)
}

/// Keep the configured top-K hits of a full depth-ordered list, returning
/// them in depth order.
fn retain_top_k(full: Vec<Hit>, cfg: &RenderConfig) -> Vec<Hit> {
    if full.len() <= cfg.top_k {
        return full;
    }
    if !cfg.top_k_by_weight {
        let mut v = full;
        v.truncate(cfg.top_k);
        return v;
    }
    let mut order: Vec<usize> = (0..full.len()).collect();
    order.sort_by(|&a, &b| {
        full[b]
            .weight
            .partial_cmp(&full[a].weight)
            .unwrap()
            .then(full[a].gaussian.cmp(&full[b].gaussian))
    });
    let mut keep: Vec<usize> = order[..cfg.top_k].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| full[i]).collect()
}

fn project_all(scene: &GaussianScene, cam: &Camera, cfg: &RenderConfig) -> Vec<ProjectedGaussian> {
    let mut projected: Vec<ProjectedGaussian> = scene
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(n, g)| project_gaussian(g, cam, n as u32, cfg.sigma_cutoff))
        .collect();
    // Depth ties broken by gaussian index so output is deterministic.
    projected.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap()
            .then(a.index.cmp(&b.index))
    });
    projected
}

/// Reference compositor: every pixel scans the full depth-sorted list.
pub fn render_hits_naive(scene: &GaussianScene, cam: &Camera, cfg: &RenderConfig) -> PixelHits {
    let projected = project_all(scene, cam, cfg);
    let (h, w) = (cam.height, cam.width);
    let hits: Vec<Vec<Hit>> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            let projected = &projected;
            (0..w).map(move |x| {
                let (full, _) =
                    compose_pixel(x as f64 + 0.5, y as f64 + 0.5, projected, cfg);
                retain_top_k(full, cfg)
            })
        })
        .collect();
    PixelHits {
        h,
        w,
        top_k: cfg.top_k,
        hits,
    }
}

/// Accelerated compositor: candidates are binned by screen bounding box
/// before per-pixel compositing. Must match [`render_hits_naive`] in hit
/// identity exactly and in weights within 1e-6.
pub fn render_hits(scene: &GaussianScene, cam: &Camera, cfg: &RenderConfig) -> PixelHits {
    let projected = project_all(scene, cam, cfg);
    let (h, w) = (cam.height, cam.width);

    // Per-row candidate index lists. Candidates are pushed in depth order,
    // so each row list stays depth-sorted.
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); h];
    for (pi, p) in projected.iter().enumerate() {
        let y0 = ((p.mean.1 - p.radius - 0.5).floor().max(0.0)) as usize;
        let y1 = ((p.mean.1 + p.radius - 0.5).ceil()).min(h as f64 - 1.0);
        if y1 < 0.0 {
            continue;
        }
        for row in rows.iter_mut().take(y1 as usize + 1).skip(y0) {
            row.push(pi as u32);
        }
    }

    let hits: Vec<Vec<Hit>> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            let projected = &projected;
            let row = &rows[y];
            (0..w).map(move |x| {
                let px = x as f64 + 0.5;
                let py = y as f64 + 0.5;
                let candidates: Vec<ProjectedGaussian> = row
                    .iter()
                    .map(|&pi| projected[pi as usize])
                    .filter(|p| (px - p.mean.0).abs() <= p.radius)
                    .collect();
                let (full, _) = compose_pixel(px, py, &candidates, cfg);
                retain_top_k(full, cfg)
            })
        })
        .collect();
    PixelHits {
        h,
        w,
        top_k: cfg.top_k,
        hits,
    }
}

/// Full per-pixel compositing sums, for conservation checks:
/// `(sum of all untruncated weights, 1 - prod(1 - alpha))` per pixel.
pub fn full_weight_sums(scene: &GaussianScene, cam: &Camera, cfg: &RenderConfig) -> Vec<(f64, f64)> {
    let projected = project_all(scene, cam, cfg);
    let mut out = Vec::with_capacity(cam.height * cam.width);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let (full, acc) = compose_pixel(x as f64 + 0.5, y as f64 + 0.5, &projected, cfg);
            out.push((full.iter().map(|h| h.weight).sum(), acc));
        }
    }
    out
}

/// Pixel is visible when the retained hit weights accumulate past the
/// threshold.
pub fn visibility_mask(hits: &PixelHits, threshold: f64) -> Grid2<bool> {
    Grid2 {
        h: hits.h,
        w: hits.w,
        data: hits
            .hits
            .iter()
            .map(|list| list.iter().map(|h| h.weight).sum::<f64>() >= threshold)
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// Hits container (debug output)

/// Write per-pixel hits as a record file. Indices fit a u16 plane when the
/// scene has at most 65535 Gaussians; larger scenes store separate hi/lo
/// u16 planes.
pub fn write_hits(path: &Path, hits: &PixelHits) -> Result<()> {
    let (h, w, k) = (hits.h, hits.w, hits.top_k);
    let mut counts = vec![0u16; h * w];
    let mut weights = vec![0f32; h * w * k];
    let mut idx = vec![0u32; h * w * k];
    let mut max_index = 0u32;
    for (p, list) in hits.hits.iter().enumerate() {
        counts[p] = list.len() as u16;
        for (t, hit) in list.iter().enumerate() {
            weights[p * k + t] = hit.weight as f32;
            idx[p * k + t] = hit.gaussian;
            max_index = max_index.max(hit.gaussian);
        }
    }
    let shape3 = vec![h as u64, w as u64, k as u64];
    let mut records = vec![
        ("counts", Tensor::u16(vec![h as u64, w as u64], counts)),
        ("weights", Tensor::f32(shape3.clone(), weights)),
    ];
    if max_index <= u16::MAX as u32 {
        records.push((
            "indices",
            Tensor::u16(shape3, idx.iter().map(|&v| v as u16).collect()),
        ));
    } else {
        records.push((
            "indices_lo",
            Tensor::u16(shape3.clone(), idx.iter().map(|&v| (v & 0xffff) as u16).collect()),
        ));
        records.push((
            "indices_hi",
            Tensor::u16(shape3, idx.iter().map(|&v| (v >> 16) as u16).collect()),
        ));
    }
    write_records(path, &records)
}

/// Read a hits record file written by [`write_hits`]. Depths are not stored;
/// hit order within a pixel is the stored (depth) order.
pub fn read_hits(path: &Path) -> Result<PixelHits> {
    let records = read_records(path)?;
    let get = |name: &str| -> Result<&Tensor> {
        records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Manifest(format!("record '{name}' missing from {}", path.display())))
    };
    let counts_t = get("counts")?;
    let (h, w) = (counts_t.shape[0] as usize, counts_t.shape[1] as usize);
    let counts = counts_t.as_u16()?;
    let weights_t = get("weights")?;
    let k = weights_t.shape[2] as usize;
    let weights = weights_t.as_f32()?;
    let indices: Vec<u32> = if let Ok(t) = get("indices") {
        t.as_u16()?.iter().map(|&v| v as u32).collect()
    } else {
        let lo = get("indices_lo")?.as_u16()?;
        let hi = get("indices_hi")?.as_u16()?;
        lo.iter()
            .zip(hi)
            .map(|(&l, &h)| (l as u32) | ((h as u32) << 16))
            .collect()
    };
    let mut hits = Vec::with_capacity(h * w);
    for p in 0..h * w {
        let c = counts[p] as usize;
        hits.push(
            (0..c)
                .map(|t| Hit {
                    gaussian: indices[p * k + t],
                    weight: weights[p * k + t] as f64,
                    depth: t as f64,
                })
                .collect(),
        );
    }
    Ok(PixelHits { h, w, top_k: k, hits })
}
