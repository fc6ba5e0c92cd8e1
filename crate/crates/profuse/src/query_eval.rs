//! Embedding queries against a fused scene: 3D active-set selection,
//! per-view activation masks, selection metrics, and point-cloud label
//! transfer through a spatial kernel.

use nalgebra::{Matrix3, Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pq_index::{decode_raw, search, PQCodebook, PQCodes};
use crate::scene_model::{dot_f32, normalize_f32, GaussianScene, Grid2, QueryConfig};
use crate::splat_renderer::PixelHits;

/// A normalized query vector.
#[derive(Debug, Clone)]
pub struct QueryEmbedding {
    pub vector: Vec<f32>,
}

impl QueryEmbedding {
    /// Normalizes the raw embedding; rejects zero vectors.
    pub fn new(mut raw: Vec<f32>) -> Result<Self> {
        let norm = dot_f32(&raw, &raw).sqrt();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::Config("query embedding has zero norm".into()));
        }
        normalize_f32(&mut raw);
        Ok(Self { vector: raw })
    }
}

/// Point-cloud transfer parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    /// Candidate Gaussians per vertex, by center distance.
    pub knn_k: usize,
    /// Mahalanobis gate in standard deviations under the full ellipsoid.
    pub mahal_sigma: f64,
    /// Softmax temperature over per-candidate class logits.
    pub temperature: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            knn_k: 64,
            mahal_sigma: 3.0,
            temperature: 1.0,
        }
    }
}

/// Active Gaussians with their cosine scores, ascending by index.
#[derive(Debug, Clone, Default)]
pub struct ActiveSet {
    pub entries: Vec<(u32, f64)>,
}

impl ActiveSet {
    pub fn indicator(&self, n: usize) -> Vec<bool> {
        let mut flags = vec![false; n];
        for &(g, _) in &self.entries {
            flags[g as usize] = true;
        }
        flags
    }
}

/// Exact brute-force selection over stored descriptors. Reference path and
/// the oracle for the quantized one.
pub fn select_gaussians_exact(
    scene: &GaussianScene,
    query: &QueryEmbedding,
    tau_act: f64,
) -> ActiveSet {
    let labeled = scene.labeled.as_deref();
    let entries = (0..scene.gaussians.len())
        .filter(|&g| labeled.map_or(true, |l| l[g]))
        .filter_map(|g| {
            let d = scene.descriptor_row(g)?;
            let s = dot_f32(&query.vector, d);
            (s >= tau_act).then_some((g as u32, s))
        })
        .collect();
    ActiveSet { entries }
}

/// Quantized selection: PQ shortlist, then re-score with decoded
/// full-precision descriptors and threshold at `tau_act`.
pub fn select_gaussians(
    scene: &GaussianScene,
    codebook: &PQCodebook,
    codes: &PQCodes,
    query: &QueryEmbedding,
    config: &QueryConfig,
) -> ActiveSet {
    let labeled = scene.labeled.as_deref();
    let shortlist = search(codebook, codes, &query.vector, config.shortlist_size);
    let mut entries: Vec<(u32, f64)> = shortlist
        .into_iter()
        .filter(|&(g, _)| labeled.map_or(true, |l| l[g as usize]))
        .filter_map(|(g, _)| {
            let mut dec = decode_raw(codebook, codes, g as usize);
            normalize_f32(&mut dec);
            let s = dot_f32(&query.vector, &dec);
            (s >= config.tau_act).then_some((g, s))
        })
        .collect();
    entries.sort_by_key(|&(g, _)| g);
    ActiveSet { entries }
}

/// Per-pixel activation: sum of retained blending weights over active
/// Gaussians, thresholded at `gamma`.
pub fn activation_mask(active: &[bool], hits: &PixelHits, gamma: f64) -> Grid2<bool> {
    let mut mask = Grid2::new(hits.h, hits.w);
    for y in 0..hits.h {
        for x in 0..hits.w {
            let a: f64 = hits
                .at(x, y)
                .iter()
                .filter(|hit| active[hit.gaussian as usize])
                .map(|hit| hit.weight)
                .sum();
            mask.set(x, y, a >= gamma);
        }
    }
    mask
}

pub fn mask_iou(pred: &Grid2<bool>, gt: &Grid2<bool>) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in pred.data.iter().zip(&gt.data) {
        inter += (*p && *g) as usize;
        union += (*p || *g) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// One query-frame evaluation pair: a query, the view's hits, and the
/// ground-truth mask in that view.
pub struct EvalPair<'a> {
    pub query: &'a QueryEmbedding,
    pub hits: &'a PixelHits,
    pub gt: &'a Grid2<bool>,
}

/// Default threshold grid: 0.5 to 0.95 inclusive, step 0.025.
pub fn default_tau_grid() -> Vec<f64> {
    (0..=18).map(|i| 0.5 + 0.025 * i as f64).collect()
}

fn mean_iou_at_tau(scene: &GaussianScene, pairs: &[EvalPair<'_>], tau: f64, gamma: f64) -> f64 {
    let n = scene.gaussians.len();
    let total: f64 = pairs
        .iter()
        .map(|pair| {
            let active = select_gaussians_exact(scene, pair.query, tau).indicator(n);
            mask_iou(&activation_mask(&active, pair.hits, gamma), pair.gt)
        })
        .sum();
    total / pairs.len() as f64
}

/// Exhaustive sweep of the activation threshold; ties go to the smaller τ.
pub fn grid_search_tau(
    scene: &GaussianScene,
    pairs: &[EvalPair<'_>],
    grid: &[f64],
    gamma: f64,
) -> Result<(f64, f64)> {
    if pairs.is_empty() || grid.is_empty() {
        return Err(Error::Config("grid search needs at least one labeled query and one τ".into()));
    }
    let mut best = (grid[0], f64::NEG_INFINITY);
    for &tau in grid {
        let miou = mean_iou_at_tau(scene, pairs, tau, gamma);
        if miou > best.1 {
            best = (tau, miou);
        }
    }
    Ok(best)
}

/// Mean IoU and the fraction of pairs at or above `acc_threshold`.
pub fn miou_macc(
    pred: &[Grid2<bool>],
    gt: &[Grid2<bool>],
    acc_threshold: f64,
) -> Result<(f64, f64)> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Config(format!(
            "mismatched evaluation pair lists: {} predictions vs {} references",
            pred.len(),
            gt.len()
        )));
    }
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| mask_iou(p, g)).collect();
    let miou = ious.iter().sum::<f64>() / ious.len() as f64;
    let macc = ious.iter().filter(|&&v| v >= acc_threshold).count() as f64 / ious.len() as f64;
    Ok((miou, macc))
}

/// Per-vertex transfer result: class distribution plus the argmax, or None
/// when no candidate survives the spatial gate.
#[derive(Debug, Clone)]
pub struct PointLabels {
    pub probs: Vec<Option<Vec<f64>>>,
    pub labels: Vec<Option<usize>>,
}

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Labels free-space points from nearby Gaussians: K nearest by center,
/// gated by the full-ellipsoid Mahalanobis distance, weighted by the
/// Gaussian falloff times opacity, with class scores pooled as a
/// renormalized weighted sum of per-candidate softmaxes.
pub fn transfer_to_points(
    scene: &GaussianScene,
    points: &[Point3<f64>],
    class_embeddings: &[Vec<f32>],
    config: &TransferConfig,
) -> Result<PointLabels> {
    if class_embeddings.is_empty() {
        return Err(Error::Config("point transfer needs class embeddings".into()));
    }
    let n = scene.gaussians.len();
    let c = class_embeddings.len();
    let labeled = scene.labeled.as_deref();

    // Candidate precomputation: inverse covariances and per-class logits.
    let cov_inv: Vec<Option<Matrix3<f64>>> = scene
        .gaussians
        .iter()
        .map(|g| g.covariance().try_inverse())
        .collect();
    let logits: Vec<Option<Vec<f64>>> = (0..n)
        .map(|g| {
            if labeled.map_or(false, |l| !l[g]) {
                return None;
            }
            let d = scene.descriptor_row(g)?;
            Some(class_embeddings.iter().map(|e| dot_f32(d, e)).collect())
        })
        .collect();

    let per_vertex: Vec<(Option<Vec<f64>>, Option<usize>)> = points
        .par_iter()
        .map(|p| {
            // K nearest centers; ties by index via stable ordering.
            let mut by_dist: Vec<(f64, usize)> = (0..n)
                .map(|g| ((scene.gaussians[g].position - p.coords).norm_squared(), g))
                .collect();
            by_dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            by_dist.truncate(config.knn_k);

            let mut probs = vec![0f64; c];
            let mut total_w = 0f64;
            for &(_, g) in &by_dist {
                let (Some(inv), Some(lg)) = (cov_inv[g].as_ref(), logits[g].as_ref()) else {
                    continue;
                };
                let delta: Vector3<f64> = p.coords - scene.gaussians[g].position;
                let d2 = (delta.transpose() * inv * delta)[(0, 0)];
                if d2 < 0.0 || d2.sqrt() > config.mahal_sigma {
                    continue;
                }
                let w = (-0.5 * d2).exp() * scene.gaussians[g].opacity;
                let sm = softmax(lg, config.temperature);
                for (acc, &pr) in probs.iter_mut().zip(&sm) {
                    *acc += w * pr;
                }
                total_w += w;
            }
            if total_w <= 0.0 {
                return (None, None);
            }
            for v in probs.iter_mut() {
                *v /= total_w;
            }
            let label = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i);
            (Some(probs), label)
        })
        .collect();

    let (probs, labels) = per_vertex.into_iter().unzip();
    Ok(PointLabels { probs, labels })
}

/// Activation mask written as a u8 image plus a text summary line.
pub fn mask_to_grid_u8(mask: &Grid2<bool>) -> Vec<u8> {
    mask.data.iter().map(|&b| b as u8).collect()
}

/// Renders per-pair metric rows and the aggregate line for reports.
pub fn metrics_report(ious: &[f64], acc_threshold: f64) -> String {
    let mut out = String::new();
    for (i, iou) in ious.iter().enumerate() {
        out.push_str(&format!("pair {i:4}  iou {iou:.4}\n"));
    }
    let miou = ious.iter().sum::<f64>() / ious.len().max(1) as f64;
    let macc = ious.iter().filter(|&&v| v >= acc_threshold).count() as f64 / ious.len().max(1) as f64;
    out.push_str(&format!(
        "mIoU {:.4}  mAcc@{:.2} {:.4}  ({} pairs)\n",
        miou,
        acc_threshold,
        macc,
        ious.len()
    ));
    out
}
