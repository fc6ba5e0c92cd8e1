//! Feature registration: pool proposal descriptors from mask masses and
//! scatter-accumulate them onto Gaussians with visibility weights.
//!
//! The whole stage is gather-scatter only: no gradients, no render
//! supervision. Accumulation runs in double precision per view and shards
//! are merged in view-id order, so the result is deterministic for a given
//! view order and agrees within 1e-6 under any permutation.

use rayon::prelude::*;

use crate::matchgraph::ProposalSet;
use crate::scene_model::{normalize_f32, GaussianScene, Grid2, ViewSet};
use crate::splat_renderer::PixelHits;

/// Mass-weighted pooled descriptor of one proposal.
#[derive(Debug, Clone)]
pub struct ProposalDescriptor {
    pub proposal: usize,
    /// Unit-norm pooled embedding; `None` marks a degenerate proposal whose
    /// member masses are all zero.
    pub descriptor: Option<Vec<f32>>,
    pub total_mass: f64,
}

/// Total renderer contribution integrated over the mask pixels.
pub fn mask_mass(hits: &PixelHits, mask: &Grid2<bool>) -> f64 {
    assert_eq!(hits.h, mask.h);
    assert_eq!(hits.w, mask.w);
    let mut mass = 0.0;
    for (list, &inside) in hits.hits.iter().zip(&mask.data) {
        if inside {
            mass += list.iter().map(|h| h.weight).sum::<f64>();
        }
    }
    mass
}

/// Pool one proposal's member embeddings weighted by the given per-member
/// masses.
pub fn proposal_descriptor(
    set: &ProposalSet,
    proposal: usize,
    views: &ViewSet,
    member_masses: &[f64],
) -> ProposalDescriptor {
    let p = &set.proposals[proposal];
    assert_eq!(p.members.len(), member_masses.len());
    let d = views.descriptor_dim;
    let mut acc = vec![0f64; d];
    let mut total_mass = 0.0;
    for (member, &mass) in p.members.iter().zip(member_masses) {
        total_mass += mass;
        let emb = views.masks[member.view].embedding(member.mask);
        for (a, &e) in acc.iter_mut().zip(emb) {
            *a += mass * e as f64;
        }
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    let descriptor = (norm > 0.0).then(|| {
        let mut row: Vec<f32> = acc.iter().map(|&v| (v / norm) as f32).collect();
        normalize_f32(&mut row);
        row
    });
    ProposalDescriptor {
        proposal,
        descriptor,
        total_mass,
    }
}

/// Compute every proposal descriptor, with masses taken from the per-view
/// top-K hits.
pub fn all_proposal_descriptors(
    set: &ProposalSet,
    views: &ViewSet,
    hits: &[PixelHits],
) -> Vec<ProposalDescriptor> {
    // Mass per mask, computed once per member.
    set.proposals
        .iter()
        .enumerate()
        .map(|(pid, p)| {
            let masses: Vec<f64> = p
                .members
                .iter()
                .map(|m| {
                    let mask = views.masks[m.view].binary_mask(m.mask);
                    mask_mass(&hits[m.view], &mask)
                })
                .collect();
            proposal_descriptor(set, pid, views, &masses)
        })
        .collect()
}

/// Per-view pixel-wise proposal-id map: proposal id + 1 of the mask that
/// contains the pixel, 0 for pixels outside all masks or in masks that
/// belong to no proposal.
pub fn build_proposal_maps(views: &ViewSet, set: &ProposalSet) -> Vec<Grid2<u16>> {
    views
        .masks
        .iter()
        .map(|ms| {
            let table = &set.lookup[ms.view_id];
            Grid2 {
                h: ms.label_map.h,
                w: ms.label_map.w,
                data: ms
                    .label_map
                    .data
                    .iter()
                    .map(|&label| table[label as usize])
                    .collect(),
            }
        })
        .collect()
}

/// Scatter proposal descriptors onto Gaussians:
/// `A[g] += w * f_m, S[g] += w` over every valid pixel-hit pair, then
/// `f_g = normalize(A[g] / max(S[g], eps))`. Untouched Gaussians get a zero
/// descriptor and `labeled = false`.
pub fn register_features(
    scene: &GaussianScene,
    views: &ViewSet,
    set: &ProposalSet,
    hits: &[PixelHits],
    epsilon: f64,
) -> GaussianScene {
    let d = views.descriptor_dim;
    let n = scene.len();
    let descriptors = all_proposal_descriptors(set, views, hits);
    let maps = build_proposal_maps(views, set);

    // Thread-local per-view shards, merged in view-id order.
    let shards: Vec<(Vec<f64>, Vec<f64>)> = (0..views.len())
        .into_par_iter()
        .map(|v| {
            let mut a = vec![0f64; n * d];
            let mut s = vec![0f64; n];
            let map = &maps[v];
            for (pix, list) in hits[v].hits.iter().enumerate() {
                let pid = map.data[pix];
                if pid == 0 {
                    continue;
                }
                let Some(fm) = descriptors[pid as usize - 1].descriptor.as_deref() else {
                    continue;
                };
                for hit in list {
                    let g = hit.gaussian as usize;
                    let w = hit.weight;
                    s[g] += w;
                    let row = &mut a[g * d..(g + 1) * d];
                    for (acc, &f) in row.iter_mut().zip(fm) {
                        *acc += w * f as f64;
                    }
                }
            }
            (a, s)
        })
        .collect();

    let mut a = vec![0f64; n * d];
    let mut s = vec![0f64; n];
    for (sa, ss) in shards {
        for (dst, src) in a.iter_mut().zip(&sa) {
            *dst += src;
        }
        for (dst, src) in s.iter_mut().zip(&ss) {
            *dst += src;
        }
    }

    let mut out_desc = vec![0f32; n * d];
    let mut labeled = vec![false; n];
    for g in 0..n {
        if s[g] <= 0.0 {
            continue;
        }
        let denom = s[g].max(epsilon);
        let mut row: Vec<f32> = a[g * d..(g + 1) * d]
            .iter()
            .map(|&v| (v / denom) as f32)
            .collect();
        let norm = normalize_f32(&mut row);
        if norm > 0.0 {
            labeled[g] = true;
            out_desc[g * d..(g + 1) * d].copy_from_slice(&row);
        }
    }
    GaussianScene {
        gaussians: scene.gaussians.clone(),
        descriptors: Some(out_desc),
        descriptor_dim: d,
        labeled: Some(labeled),
    }
}
