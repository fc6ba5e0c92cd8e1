//! Cross-view mask clustering: build the mask graph under warped,
//! confidence-gated IoU with mutual agreement, then extract proposals as
//! connected components.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;

use crate::container_io::{read_records, write_records, Tensor};
use crate::error::{Error, Result};
use crate::scene_model::{ClusterConfig, Grid2, ViewSet, WarpField};

/// One mask node (view, mask id); mask ids are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MaskNode {
    pub view: usize,
    pub mask: u16,
}

/// One 3D context proposal: a filtered connected component of the mask graph.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub members: Vec<MaskNode>,
    pub views: BTreeSet<usize>,
}

/// Disjoint proposals plus per-view lookup tables (mask id -> proposal id + 1,
/// 0 = no proposal).
#[derive(Debug, Clone, Default)]
pub struct ProposalSet {
    pub proposals: Vec<Proposal>,
    pub lookup: Vec<Vec<u16>>,
}

impl ProposalSet {
    /// Proposal id of a mask, if any.
    pub fn proposal_of(&self, node: MaskNode) -> Option<usize> {
        let v = self.lookup[node.view][node.mask as usize];
        if v == 0 {
            None
        } else {
            Some(v as usize - 1)
        }
    }
}

/// Forward-splat a binary mask through a per-pixel warp with bilinear
/// distribution to the four surrounding destination pixels. Out-of-image
/// targets are dropped.
pub fn warp_mask(mask: &Grid2<bool>, warp: &WarpField) -> Grid2<f32> {
    let mut out = Grid2::<f32>::new(warp.h, warp.w);
    for y in 0..mask.h {
        for x in 0..mask.w {
            if !mask.at(x, y) {
                continue;
            }
            let (u, v) = warp.dst_coord(x, y);
            // Pixel centers sit at integer + 0.5.
            let fu = u - 0.5;
            let fv = v - 0.5;
            let x0 = fu.floor();
            let y0 = fv.floor();
            let wx = fu - x0;
            let wy = fv - y0;
            let (x0, y0) = (x0 as i64, y0 as i64);
            let contributions = [
                (x0, y0, (1.0 - wx) * (1.0 - wy)),
                (x0 + 1, y0, wx * (1.0 - wy)),
                (x0, y0 + 1, (1.0 - wx) * wy),
                (x0 + 1, y0 + 1, wx * wy),
            ];
            for (cx, cy, w) in contributions {
                if w > 0.0 && out.in_bounds(cx, cy) {
                    let idx = cy as usize * out.w + cx as usize;
                    out.data[idx] += w as f32;
                }
            }
        }
    }
    out
}

/// Binarize a soft mask at the given threshold.
pub fn binarize(soft: &Grid2<f32>, threshold: f32) -> Grid2<bool> {
    Grid2 {
        h: soft.h,
        w: soft.w,
        data: soft.data.iter().map(|&v| v >= threshold).collect(),
    }
}

/// Elementwise confidence gate: `[alpha >= tau_alpha] AND vis_mask`.
pub fn gate(warp: &WarpField, tau_alpha: f64, vis_mask: &Grid2<bool>) -> Grid2<bool> {
    assert_eq!(warp.h, vis_mask.h);
    assert_eq!(warp.w, vis_mask.w);
    Grid2 {
        h: warp.h,
        w: warp.w,
        data: warp
            .confidence
            .data
            .iter()
            .zip(&vis_mask.data)
            .map(|(&a, &v)| (a as f64) >= tau_alpha && v)
            .collect(),
    }
}

/// IoU of two binary masks restricted to the gate; 0 when the gated union
/// is empty.
pub fn gated_iou(mask_a: &Grid2<bool>, warped_b: &Grid2<bool>, gate: &Grid2<bool>) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for i in 0..mask_a.data.len() {
        if !gate.data[i] {
            continue;
        }
        let a = mask_a.data[i];
        let b = warped_b.data[i];
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn tight_box(mask: &Grid2<bool>) -> Option<(usize, usize, usize, usize)> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let mut any = false;
    for y in 0..mask.h {
        for x in 0..mask.w {
            if mask.at(x, y) {
                any = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    any.then_some((x0, y0, x1, y1))
}

/// IoU of the tight axis-aligned bounding boxes; 0 when either mask is empty.
pub fn bbox_iou(mask_a: &Grid2<bool>, warped_b: &Grid2<bool>) -> f64 {
    let (Some(a), Some(b)) = (tight_box(mask_a), tight_box(warped_b)) else {
        return 0.0;
    };
    let ix0 = a.0.max(b.0);
    let iy0 = a.1.max(b.1);
    let ix1 = a.2.min(b.2);
    let iy1 = a.3.min(b.3);
    let inter = ix1.saturating_sub(ix0) * iy1.saturating_sub(iy0);
    let area_a = (a.2 - a.0) * (a.3 - a.1);
    let area_b = (b.2 - b.0) * (b.3 - b.1);
    let union = area_a + area_b - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Evaluate the mutual gates of one unordered view pair and return the
/// passing edges. Both directions are tested from a single visit.
fn pair_edges(
    views: &ViewSet,
    i: usize,
    j: usize,
    warp_ji: &WarpField,
    warp_ij: &WarpField,
    vis_masks: &[Grid2<bool>],
    config: &ClusterConfig,
) -> Vec<(MaskNode, MaskNode)> {
    // The gate for overlaps evaluated in view i must live on view i's pixel
    // grid; that is the confidence of the i->j field, not the j->i one.
    let gate_ji = gate(warp_ij, config.tau_alpha, &vis_masks[i]);
    let gate_ij = gate(warp_ji, config.tau_alpha, &vis_masks[j]);
    let masks_i: Vec<Grid2<bool>> = (1..=views.masks[i].mask_count() as u16)
        .map(|k| views.masks[i].binary_mask(k))
        .collect();
    let masks_j: Vec<Grid2<bool>> = (1..=views.masks[j].mask_count() as u16)
        .map(|k| views.masks[j].binary_mask(k))
        .collect();
    let warped_j_in_i: Vec<Grid2<bool>> = masks_j
        .iter()
        .map(|m| binarize(&warp_mask(m, warp_ji), 0.5))
        .collect();
    let warped_i_in_j: Vec<Grid2<bool>> = masks_i
        .iter()
        .map(|m| binarize(&warp_mask(m, warp_ij), 0.5))
        .collect();

    let mut edges = Vec::new();
    for (a, mask_a) in masks_i.iter().enumerate() {
        for (b, mask_b) in masks_j.iter().enumerate() {
            let o_iajb = gated_iou(mask_a, &warped_j_in_i[b], &gate_ji);
            if o_iajb < config.tau_iou {
                continue;
            }
            let o_jbia = gated_iou(mask_b, &warped_i_in_j[a], &gate_ij);
            if o_jbia < config.tau_iou {
                continue;
            }
            let b_iajb = bbox_iou(mask_a, &warped_j_in_i[b]);
            let b_jbia = bbox_iou(mask_b, &warped_i_in_j[a]);
            if b_iajb >= config.tau_box && b_jbia >= config.tau_box {
                edges.push((
                    MaskNode {
                        view: i,
                        mask: (a + 1) as u16,
                    },
                    MaskNode {
                        view: j,
                        mask: (b + 1) as u16,
                    },
                ));
            }
        }
    }
    edges
}

/// Build the undirected cross-view mask graph over the given unordered view
/// pairs. Warps must exist in both directions for every pair.
pub fn build_graph(
    views: &ViewSet,
    warps: &HashMap<(usize, usize), WarpField>,
    vis_masks: &[Grid2<bool>],
    pairs: &[(usize, usize)],
    config: &ClusterConfig,
) -> Result<Vec<(MaskNode, MaskNode)>> {
    for &(i, j) in pairs {
        if !warps.contains_key(&(j, i)) {
            return Err(Error::MissingWarp { src: j, dst: i });
        }
        if !warps.contains_key(&(i, j)) {
            return Err(Error::MissingWarp { src: i, dst: j });
        }
    }
    let mut edges: Vec<(MaskNode, MaskNode)> = pairs
        .par_iter()
        .flat_map_iter(|&(i, j)| {
            pair_edges(
                views,
                i,
                j,
                &warps[&(j, i)],
                &warps[&(i, j)],
                vis_masks,
                config,
            )
        })
        .collect();
    // Canonical edge orientation and order: output is independent of pair
    // visiting order and thread count.
    for e in edges.iter_mut() {
        if e.1 < e.0 {
            *e = (e.1, e.0);
        }
    }
    edges.sort_unstable();
    edges.dedup();
    Ok(edges)
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    fn new(len: usize) -> Self {
        Self {
            parent: (0..len).collect(),
            size: vec![1; len],
        }
    }

    fn find(&mut self, mut id: usize) -> usize {
        while self.parent[id] != id {
            self.parent[id] = self.parent[self.parent[id]];
            id = self.parent[id];
        }
        id
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
    }
}

/// Connected components of the edge list, filtered by the size gates and
/// ordered by smallest member node.
pub fn extract_proposals(
    edges: &[(MaskNode, MaskNode)],
    views: &ViewSet,
    config: &ClusterConfig,
) -> ProposalSet {
    // Flat node index per (view, mask).
    let mut offsets = Vec::with_capacity(views.len());
    let mut total = 0usize;
    for ms in &views.masks {
        offsets.push(total);
        total += ms.mask_count();
    }
    let flat = |n: MaskNode| offsets[n.view] + n.mask as usize - 1;
    let unflat = |mut idx: usize| -> MaskNode {
        let mut view = views.len() - 1;
        for (v, &off) in offsets.iter().enumerate() {
            if idx < off {
                view = v - 1;
                break;
            }
        }
        if idx >= offsets[views.len() - 1] {
            view = views.len() - 1;
        }
        idx -= offsets[view];
        MaskNode {
            view,
            mask: (idx + 1) as u16,
        }
    };

    let mut uf = UnionFind::new(total);
    for &(a, b) in edges {
        uf.union(flat(a), flat(b));
    }
    let mut components: HashMap<usize, Vec<MaskNode>> = HashMap::new();
    for idx in 0..total {
        let root = uf.find(idx);
        components.entry(root).or_default().push(unflat(idx));
    }
    let mut proposals: Vec<Proposal> = components
        .into_values()
        .filter_map(|mut members| {
            members.sort_unstable();
            let views_set: BTreeSet<usize> = members.iter().map(|m| m.view).collect();
            (members.len() >= config.s_min && views_set.len() >= config.v_min).then_some(
                Proposal {
                    members,
                    views: views_set,
                },
            )
        })
        .collect();
    proposals.sort_by_key(|p| p.members[0]);

    let mut lookup: Vec<Vec<u16>> = views
        .masks
        .iter()
        .map(|ms| vec![0u16; ms.mask_count() + 1])
        .collect();
    for (pid, p) in proposals.iter().enumerate() {
        for m in &p.members {
            lookup[m.view][m.mask as usize] = (pid + 1) as u16;
        }
    }
    ProposalSet { proposals, lookup }
}

// ---------------------------------------------------------------------------
// Proposal file

/// Write a proposal set: member table plus per-view u16 lookup maps.
pub fn write_proposals(path: &Path, set: &ProposalSet) -> Result<()> {
    let mut members = Vec::new();
    let mut count = 0u64;
    for (pid, p) in set.proposals.iter().enumerate() {
        for m in &p.members {
            members.extend([m.view as u16, m.mask, (pid + 1) as u16]);
            count += 1;
        }
    }
    let mut records = vec![("members", Tensor::u16(vec![count, 3], members))];
    let lookup_names: Vec<String> = (0..set.lookup.len())
        .map(|v| format!("lookup_{v}"))
        .collect();
    for (v, table) in set.lookup.iter().enumerate() {
        records.push((
            lookup_names[v].as_str(),
            Tensor::u16(vec![table.len() as u64], table.clone()),
        ));
    }
    write_records(path, &records)
}

/// Read a proposal set written by [`write_proposals`].
pub fn read_proposals(path: &Path) -> Result<ProposalSet> {
    let records = read_records(path)?;
    let members_t = records
        .iter()
        .find(|(n, _)| n == "members")
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Manifest(format!("record 'members' missing from {}", path.display())))?;
    let rows = members_t.shape[0] as usize;
    let data = members_t.as_u16()?;
    let mut by_pid: HashMap<u16, Vec<MaskNode>> = HashMap::new();
    for r in 0..rows {
        let view = data[r * 3] as usize;
        let mask = data[r * 3 + 1];
        let pid = data[r * 3 + 2];
        by_pid.entry(pid).or_default().push(MaskNode { view, mask });
    }
    let mut pids: Vec<u16> = by_pid.keys().copied().collect();
    pids.sort_unstable();
    let proposals: Vec<Proposal> = pids
        .iter()
        .map(|pid| {
            let mut members = by_pid.remove(pid).unwrap();
            members.sort_unstable();
            let views = members.iter().map(|m| m.view).collect();
            Proposal { members, views }
        })
        .collect();
    let mut lookup = Vec::new();
    for (name, t) in &records {
        if let Some(rest) = name.strip_prefix("lookup_") {
            let v: usize = rest
                .parse()
                .map_err(|_| Error::Manifest(format!("bad lookup record name {name}")))?;
            if lookup.len() <= v {
                lookup.resize(v + 1, Vec::new());
            }
            lookup[v] = t.as_u16()?.to_vec();
        }
    }
    Ok(ProposalSet { proposals, lookup })
}
