//! End-to-end acceptance suite. Each test prints one pass/fail line for its
//! criterion; all thresholds are fixed here, not configurable.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::Matrix4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use profuse::cli::{
    load_all_hits, load_views_and_warps, run_pipeline, stage_cluster, stage_hits, stage_register,
    Artifacts, PipelineConfig,
};
use profuse::container_io::read_scene;
use profuse::matchgraph::{
    binarize, build_graph, extract_proposals, read_proposals, warp_mask, MaskNode, Proposal,
    ProposalSet,
};
use profuse::pq_index::{adc_score, adc_table, decode_raw, encode, search, train};
use profuse::query_eval::{
    default_tau_grid, grid_search_tau, miou_macc, transfer_to_points, EvalPair, QueryEmbedding,
    TransferConfig,
};
use profuse::scene_model::{
    dot_f32, normalize_f32, Camera, ClusterConfig, Gaussian, GaussianScene, Grid2, MaskSet,
    RenderConfig, ViewSet, WarpField,
};
use profuse::splat_renderer::{full_weight_sums, render_hits, render_hits_naive, Hit, PixelHits};
use profuse::synth::{generate, GroundTruth, NoiseSpec, SynthSpec};
use profuse::triangulate::{extract_seeds, init_gaussians, ExtractConfig, InitConfig};

fn verdict(criterion: &str, ok: bool) {
    println!("criterion {criterion}: {}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {criterion} failed");
}

// ---------------------------------------------------------------------------
// Shared fixtures and scoring helpers

fn in_memory_pipeline(
    spec: &SynthSpec,
    render: &RenderConfig,
    cluster_cfg: &ClusterConfig,
) -> (
    ViewSet,
    HashMap<(usize, usize), WarpField>,
    GroundTruth,
    GaussianScene,
    Vec<PixelHits>,
    ProposalSet,
    GaussianScene,
) {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, gt) = generate(spec, dir.path()).unwrap();
    let (views, warps) = load_views_and_warps(&manifest).unwrap();
    let mut warp_list: Vec<(&(usize, usize), &WarpField)> = warps.iter().collect();
    warp_list.sort_by_key(|(k, _)| **k);
    let warp_vec: Vec<WarpField> = warp_list.iter().map(|(_, w)| (*w).clone()).collect();
    let (seeds, _) = extract_seeds(&views, &warp_vec, &ExtractConfig::default()).unwrap();
    let scene = init_gaussians(&seeds, &InitConfig::default()).unwrap();
    let hits = stage_hits(&scene, &views, render);
    let set = stage_cluster(&views, &warps, &hits, cluster_cfg, 0.5).unwrap();
    let sem = stage_register(&scene, &views, &set, &hits);
    (views, warps, gt, scene, hits, set, sem)
}

/// Argmax object label per labeled Gaussian by cosine against the canonical
/// object embeddings; None for unlabeled rows.
fn argmax_labels(sem: &GaussianScene, gt: &GroundTruth) -> Vec<Option<usize>> {
    let labeled = sem.labeled.as_ref().unwrap();
    (0..sem.len())
        .map(|g| {
            if !labeled[g] {
                return None;
            }
            let d = sem.descriptor_row(g).unwrap();
            (0..gt.objects.len())
                .map(|o| (o, dot_f32(d, gt.object_embedding(o))))
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(o, _)| o)
        })
        .collect()
}

/// Fraction of labeled Gaussians whose argmax label matches the nearest true
/// surface, plus the labeled count.
fn label_accuracy(sem: &GaussianScene, gt: &GroundTruth) -> (f64, usize) {
    let pred = argmax_labels(sem, gt);
    let mut labeled = 0usize;
    let mut correct = 0usize;
    for (g, p) in pred.iter().enumerate() {
        let Some(p) = p else { continue };
        labeled += 1;
        if *p == gt.nearest_object(&sem.gaussians[g].position) {
            correct += 1;
        }
    }
    (correct as f64 / labeled.max(1) as f64, labeled)
}

/// Per-proposal majority-object fraction over member masks.
fn proposal_purities(set: &ProposalSet, gt: &GroundTruth) -> Vec<f64> {
    set.proposals
        .iter()
        .map(|p| {
            let mut counts: HashMap<u16, usize> = HashMap::new();
            for m in &p.members {
                let obj = gt.mask_to_object[m.view][m.mask as usize - 1];
                *counts.entry(obj).or_insert(0) += 1;
            }
            let max = counts.values().copied().max().unwrap_or(0);
            max as f64 / p.members.len() as f64
        })
        .collect()
}

// ---------------------------------------------------------------------------
// 1. Zero-noise recovery

#[test]
fn acceptance_1_zero_noise_recovery() {
    let started = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let dir = tempfile::tempdir().unwrap();
    // 3 spheres, 4 views, D=16, seed 7; denser seed grid for point transfer.
    let mut cfg = PipelineConfig::default();
    cfg.extract.stride = 2;
    let report = pool
        .install(|| run_pipeline(&cfg, dir.path(), true, false))
        .unwrap();
    assert_eq!(report.ran.len(), 6);
    let elapsed = started.elapsed();

    let art = Artifacts::new(dir.path());
    let gt = profuse::synth::load_ground_truth(&art.gt()).unwrap();
    let set = read_proposals(&art.proposals()).unwrap();
    let sem = read_scene(&art.scene_sem()).unwrap();

    // Exactly one pure proposal per visible object.
    let mut objects_hit = vec![0usize; gt.objects.len()];
    let purities = proposal_purities(&set, &gt);
    let pure = purities.iter().all(|&p| p == 1.0);
    for p in &set.proposals {
        let obj = gt.mask_to_object[p.members[0].view][p.members[0].mask as usize - 1];
        objects_hit[obj as usize] += 1;
    }
    let one_per_object = objects_hit.iter().all(|&c| c == 1);

    let (acc, labeled) = label_accuracy(&sem, &gt);
    assert!(labeled > 0);

    // Point transfer on true surface points.
    let mut points = Vec::new();
    let mut truth = Vec::new();
    for v in 0..gt.object_ids.len() {
        let ids = &gt.object_ids[v];
        let pts = &gt.surface_points[v];
        for (i, &id) in ids.data.iter().enumerate() {
            if id > 0 && i % 7 == 0 {
                points.push(nalgebra::Point3::new(
                    pts[i * 3] as f64,
                    pts[i * 3 + 1] as f64,
                    pts[i * 3 + 2] as f64,
                ));
                truth.push(id as usize - 1);
            }
        }
    }
    let classes: Vec<Vec<f32>> = (0..gt.objects.len())
        .map(|o| gt.object_embedding(o).to_vec())
        .collect();
    let transfer =
        transfer_to_points(&sem, &points, &classes, &TransferConfig::default()).unwrap();
    let transfer_correct = transfer
        .labels
        .iter()
        .zip(&truth)
        .filter(|(l, &t)| **l == Some(t))
        .count();
    let transfer_acc = transfer_correct as f64 / points.len() as f64;

    println!(
        "zero-noise: proposals={} purity_all_1={pure} one_per_object={one_per_object} \
         gaussian_acc={acc:.4} transfer_acc={transfer_acc:.4} elapsed={:.1}s",
        set.proposals.len(),
        elapsed.as_secs_f64()
    );
    verdict(
        "1 (zero-noise recovery)",
        pure && one_per_object
            && set.proposals.len() == gt.objects.len()
            && acc >= 0.95
            && transfer_acc >= 0.95
            && elapsed.as_secs_f64() < 60.0,
    );
}

// ---------------------------------------------------------------------------
// 2. Clustering oracle equivalence

fn random_mask_fixture(seed: u64) -> (ViewSet, HashMap<(usize, usize), WarpField>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (32usize, 32usize);
    let n_views = rng.gen_range(2..=4);
    let mut masks = Vec::new();
    let dim = 4usize;
    for v in 0..n_views {
        let mut label_map = Grid2::<u16>::new(h, w);
        let n_masks = rng.gen_range(1..=8usize);
        for m in 0..n_masks {
            let x0 = rng.gen_range(0..w - 4);
            let y0 = rng.gen_range(0..h - 4);
            let x1 = (x0 + rng.gen_range(3..12)).min(w);
            let y1 = (y0 + rng.gen_range(3..12)).min(h);
            for y in y0..y1 {
                for x in x0..x1 {
                    label_map.set(x, y, (m + 1) as u16);
                }
            }
        }
        masks.push(MaskSet {
            view_id: v,
            label_map,
            embeddings: vec![0.0; n_masks * dim],
            dim,
        });
    }
    // Identity camera per view; clustering never projects, it only needs
    // counts to line up.
    let cameras = (0..n_views)
        .map(|_| Camera::new(30.0, 30.0, 16.0, 16.0, Matrix4::identity(), w, h))
        .collect();
    let views = ViewSet {
        cameras,
        masks,
        colors: vec![None; n_views],
        descriptor_dim: dim,
    };
    // Integer-shift warps, consistent in both directions, with random
    // confidence fields.
    let mut warps = HashMap::new();
    for i in 0..n_views {
        for j in 0..n_views {
            if i == j {
                continue;
            }
            let (tx, ty) = if i < j {
                (rng.gen_range(-3..=3) as f64, rng.gen_range(-3..=3) as f64)
            } else {
                let fwd = &warps[&(j, i)] as &WarpField;
                let (u0, v0) = fwd.dst_coord(0, 0);
                (-(u0 - 0.5), -(v0 - 0.5))
            };
            let mut warp = vec![0f32; 2 * h * w];
            let mut conf = Grid2::<f32>::new(h, w);
            for y in 0..h {
                for x in 0..w {
                    warp[y * w + x] = (x as f64 + 0.5 + tx) as f32;
                    warp[h * w + y * w + x] = (y as f64 + 0.5 + ty) as f32;
                    conf.set(x, y, rng.gen::<f32>());
                }
            }
            warps.insert(
                (i, j),
                WarpField {
                    src_view: i,
                    dst_view: j,
                    warp,
                    h,
                    w,
                    confidence: conf,
                },
            );
        }
    }
    (views, warps)
}

/// Plain nested-loop reference: explicit gate/IoU arithmetic, adjacency-list
/// components via BFS, no parallelism, no canonicalization tricks.
fn oracle_proposals(
    views: &ViewSet,
    warps: &HashMap<(usize, usize), WarpField>,
    cfg: &ClusterConfig,
) -> (Vec<(MaskNode, MaskNode)>, Vec<Vec<MaskNode>>) {
    let gate_of = |warp: &WarpField| -> Vec<bool> {
        warp.confidence
            .data
            .iter()
            .map(|&c| c as f64 >= cfg.tau_alpha)
            .collect()
    };
    let gated_iou = |a: &Grid2<bool>, b: &Grid2<bool>, g: &[bool]| -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for i in 0..a.data.len() {
            if !g[i] {
                continue;
            }
            inter += (a.data[i] && b.data[i]) as usize;
            union += (a.data[i] || b.data[i]) as usize;
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    };
    let bbox = |m: &Grid2<bool>| -> Option<(usize, usize, usize, usize)> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        let mut any = false;
        for y in 0..m.h {
            for x in 0..m.w {
                if m.at(x, y) {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        any.then_some((x0, y0, x1, y1))
    };
    let bbox_iou = |a: &Grid2<bool>, b: &Grid2<bool>| -> f64 {
        let (Some(ba), Some(bb)) = (bbox(a), bbox(b)) else {
            return 0.0;
        };
        let ix = ba.2.min(bb.2).saturating_sub(ba.0.max(bb.0));
        let iy = ba.3.min(bb.3).saturating_sub(ba.1.max(bb.1));
        let inter = ix * iy;
        let union = (ba.2 - ba.0) * (ba.3 - ba.1) + (bb.2 - bb.0) * (bb.3 - bb.1) - inter;
        inter as f64 / union as f64
    };

    let n = views.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let warp_ji = &warps[&(j, i)];
            let warp_ij = &warps[&(i, j)];
            // Certainty for overlaps scored in view i is the confidence of
            // the field laid out on view i's grid.
            let g_ji = gate_of(warp_ij);
            let g_ij = gate_of(warp_ji);
            for a in 1..=views.masks[i].mask_count() as u16 {
                for b in 1..=views.masks[j].mask_count() as u16 {
                    let ma = views.masks[i].binary_mask(a);
                    let mb = views.masks[j].binary_mask(b);
                    let wb = binarize(&warp_mask(&mb, warp_ji), 0.5);
                    let wa = binarize(&warp_mask(&ma, warp_ij), 0.5);
                    if gated_iou(&ma, &wb, &g_ji) >= cfg.tau_iou
                        && gated_iou(&mb, &wa, &g_ij) >= cfg.tau_iou
                        && bbox_iou(&ma, &wb) >= cfg.tau_box
                        && bbox_iou(&mb, &wa) >= cfg.tau_box
                    {
                        edges.push((
                            MaskNode { view: i, mask: a },
                            MaskNode { view: j, mask: b },
                        ));
                    }
                }
            }
        }
    }

    // Connected components by BFS over an adjacency map.
    let mut adj: HashMap<MaskNode, Vec<MaskNode>> = HashMap::new();
    for &(a, b) in &edges {
        adj.entry(a).or_default().push(b);
        adj.entry(b).or_default().push(a);
    }
    let mut all_nodes: Vec<MaskNode> = Vec::new();
    for (v, ms) in views.masks.iter().enumerate() {
        for m in 1..=ms.mask_count() as u16 {
            all_nodes.push(MaskNode { view: v, mask: m });
        }
    }
    let mut seen: Vec<MaskNode> = Vec::new();
    let mut components = Vec::new();
    for node in all_nodes {
        if seen.contains(&node) {
            continue;
        }
        let mut queue = vec![node];
        let mut comp = Vec::new();
        while let Some(cur) = queue.pop() {
            if seen.contains(&cur) {
                continue;
            }
            seen.push(cur);
            comp.push(cur);
            if let Some(next) = adj.get(&cur) {
                queue.extend(next.iter().copied());
            }
        }
        comp.sort();
        let views_in: std::collections::BTreeSet<usize> = comp.iter().map(|n| n.view).collect();
        if comp.len() >= cfg.s_min && views_in.len() >= cfg.v_min {
            components.push(comp);
        }
    }
    components.sort();
    (edges, components)
}

#[test]
fn acceptance_2_clustering_oracle_equivalence() {
    let cfg = ClusterConfig::default();
    let mut all_ok = true;
    for seed in 0..22u64 {
        let (views, warps) = random_mask_fixture(1000 + seed);
        let vis: Vec<Grid2<bool>> = views
            .masks
            .iter()
            .map(|m| Grid2::from_vec(m.label_map.h, m.label_map.w, vec![true; m.label_map.data.len()]))
            .collect();
        let n = views.len();
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                pairs.push((i, j));
            }
        }
        let mut edges = build_graph(&views, &warps, &vis, &pairs, &cfg).unwrap();
        let set = extract_proposals(&edges, &views, &cfg);
        let (mut oracle_edges_v, oracle_comps) = oracle_proposals(&views, &warps, &cfg);
        edges.sort();
        oracle_edges_v.sort();
        let mut got_comps: Vec<Vec<MaskNode>> = set
            .proposals
            .iter()
            .map(|p: &Proposal| {
                let mut m = p.members.clone();
                m.sort();
                m
            })
            .collect();
        got_comps.sort();
        if edges != oracle_edges_v || got_comps != oracle_comps {
            eprintln!("fixture seed {seed}: mismatch against oracle");
            all_ok = false;
        }
    }
    verdict("2 (clustering oracle equivalence)", all_ok);
}

// ---------------------------------------------------------------------------
// 3. Compositing conservation

fn random_scene(rng: &mut ChaCha8Rng) -> GaussianScene {
    let n = rng.gen_range(1..=50);
    let gaussians = (0..n)
        .map(|_| Gaussian {
            position: nalgebra::Vector3::new(
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(2.0..6.0),
            ),
            scale: nalgebra::Vector3::new(
                rng.gen_range(0.02..0.4),
                rng.gen_range(0.02..0.4),
                rng.gen_range(0.02..0.4),
            ),
            rotation: nalgebra::UnitQuaternion::from_euler_angles(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            ),
            opacity: rng.gen_range(0.05..1.0),
            color: [0.5; 3],
        })
        .collect();
    GaussianScene {
        gaussians,
        descriptors: None,
        descriptor_dim: 0,
        labeled: None,
    }
}

#[test]
fn acceptance_3_compositing_conservation() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let cam = Camera::new(40.0, 40.0, 16.0, 16.0, Matrix4::identity(), 32, 32);
    let mut worst_conservation = 0f64;
    let mut worst_weight_diff = 0f64;
    let mut all_ok = true;
    for _ in 0..100 {
        let scene = random_scene(&mut rng);
        let cfg = RenderConfig {
            top_k: 64,
            ..RenderConfig::default()
        };
        // Conservation of the untruncated composite.
        for (sum, acc) in full_weight_sums(&scene, &cam, &cfg) {
            worst_conservation = worst_conservation.max((sum - acc).abs());
        }
        // Accelerated vs naive: identical hit identities, weights to 1e-6.
        let fast = render_hits(&scene, &cam, &cfg);
        let slow = render_hits_naive(&scene, &cam, &cfg);
        for (a, b) in fast.hits.iter().zip(&slow.hits) {
            if a.len() != b.len() {
                all_ok = false;
                continue;
            }
            for (ha, hb) in a.iter().zip(b) {
                if ha.gaussian != hb.gaussian {
                    all_ok = false;
                }
                worst_weight_diff = worst_weight_diff.max((ha.weight - hb.weight).abs());
            }
        }
        // Transmittance monotonicity: alphas reconstructed from the
        // depth-ordered weights stay in [0, 1], so T never increases.
        for list in &fast.hits {
            let mut t = 1.0f64;
            for hit in list.iter() {
                let alpha = hit.weight / t;
                if !(0.0..=0.999 + 1e-9).contains(&alpha) {
                    all_ok = false;
                }
                t *= 1.0 - alpha;
            }
        }
    }
    println!(
        "conservation worst |Σω −(1−∏(1−α))| = {worst_conservation:.2e}, \
         naive-vs-fast worst weight diff = {worst_weight_diff:.2e}"
    );
    verdict(
        "3 (compositing conservation)",
        all_ok && worst_conservation <= 1e-5 && worst_weight_diff <= 1e-6,
    );
}

// ---------------------------------------------------------------------------
// 4. Top-K insensitivity

#[test]
fn acceptance_4_top_k_insensitivity() {
    let spec = SynthSpec {
        noise: NoiseSpec {
            warp_jitter_px: 1.0,
            confidence_corruption: 0.1,
            ..NoiseSpec::default()
        },
        seed: 11,
        ..SynthSpec::default()
    };
    let k10 = RenderConfig {
        top_k: 10,
        ..RenderConfig::default()
    };
    let k40 = RenderConfig {
        top_k: 40,
        ..RenderConfig::default()
    };
    let (views, _warps, gt, scene, hits10, set, sem10) =
        in_memory_pipeline(&spec, &k10, &ClusterConfig::default());
    let _ = hits10;
    let hits40 = stage_hits(&scene, &views, &k40);
    let sem40 = stage_register(&scene, &views, &set, &hits40);

    let l10 = argmax_labels(&sem10, &gt);
    let l40 = argmax_labels(&sem40, &gt);
    let mut both = 0usize;
    let mut agree = 0usize;
    for (a, b) in l10.iter().zip(&l40) {
        if let (Some(a), Some(b)) = (a, b) {
            both += 1;
            agree += (a == b) as usize;
        }
    }
    let rate = agree as f64 / both.max(1) as f64;
    println!("top-K agreement K=10 vs K=40: {agree}/{both} = {rate:.4}");
    verdict("4 (top-K insensitivity)", both > 0 && rate >= 0.98);
}

// ---------------------------------------------------------------------------
// 5. PQ retrieval

#[test]
fn acceptance_5_pq_retrieval() {
    let (_views, _warps, gt, _scene, _hits, _set, sem) = in_memory_pipeline(
        &SynthSpec::default(),
        &RenderConfig::default(),
        &ClusterConfig::default(),
    );
    let n = sem.len();
    let d = sem.descriptor_dim;
    let rows = sem.descriptors.as_ref().unwrap();

    let codebook = train(rows, n, d, d / 8, 25, 0).unwrap();
    let codes = encode(&codebook, rows, n);

    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut queries: Vec<Vec<f32>> = (0..gt.objects.len())
        .map(|o| gt.object_embedding(o).to_vec())
        .collect();
    for _ in 0..20 {
        let mut q: Vec<f32> = (0..d)
            .map(|_| {
                let v: f64 = rng.sample(rand_distr::StandardNormal);
                v as f32
            })
            .collect();
        normalize_f32(&mut q);
        queries.push(q);
    }

    // recall@128 of the exact top-10.
    let mut recall_sum = 0f64;
    for q in &queries {
        let mut exact: Vec<(u32, f64)> = (0..n)
            .map(|g| (g as u32, dot_f32(q, &rows[g * d..(g + 1) * d])))
            .collect();
        exact.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let top10: Vec<u32> = exact.iter().take(10).map(|(g, _)| *g).collect();
        let shortlist: Vec<u32> = search(&codebook, &codes, q, 128)
            .into_iter()
            .map(|(g, _)| g)
            .collect();
        let hit = top10.iter().filter(|g| shortlist.contains(g)).count();
        recall_sum += hit as f64 / 10.0;
    }
    let recall = recall_sum / queries.len() as f64;

    // ADC equals the decoded dot product.
    let mut worst_adc = 0f64;
    let table = adc_table(&codebook, &queries[0]);
    for g in 0..n {
        let adc = adc_score(&codebook, &codes, &table, g);
        let direct = dot_f32(&queries[0], &decode_raw(&codebook, &codes, g));
        worst_adc = worst_adc.max((adc - direct).abs());
    }

    // m=1 with k >= distinct rows reproduces the exact ranking.
    let labeled = sem.labeled.as_ref().unwrap();
    let mut distinct: Vec<&[f32]> = Vec::new();
    for g in 0..n {
        if !labeled[g] {
            continue;
        }
        let row = &rows[g * d..(g + 1) * d];
        if !distinct.contains(&row) {
            distinct.push(row);
        }
        if distinct.len() == 200 {
            break;
        }
    }
    let flat: Vec<f32> = distinct.iter().flat_map(|r| r.iter().copied()).collect();
    let m1 = train(&flat, distinct.len(), d, 1, 25, 0).unwrap();
    let m1_codes = encode(&m1, &flat, distinct.len());
    let mut m1_exact_ok = true;
    for q in queries.iter().take(5) {
        let got: Vec<u32> = search(&m1, &m1_codes, q, distinct.len())
            .into_iter()
            .map(|(g, _)| g)
            .collect();
        let mut exact: Vec<(u32, f64)> = (0..distinct.len())
            .map(|g| (g as u32, dot_f32(q, distinct[g])))
            .collect();
        exact.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let exact_idx: Vec<u32> = exact.into_iter().map(|(g, _)| g).collect();
        if got != exact_idx {
            m1_exact_ok = false;
        }
    }

    println!(
        "pq: recall@128 of exact top-10 = {recall:.4} over {} queries, worst ADC diff {worst_adc:.2e}, \
         m=1 exact ranking: {m1_exact_ok} ({} distinct rows)",
        queries.len(),
        distinct.len()
    );
    verdict(
        "5 (pq retrieval)",
        recall >= 0.95 && worst_adc <= 1e-6 && m1_exact_ok,
    );
}

// ---------------------------------------------------------------------------
// 6. Metric correctness

#[test]
fn acceptance_6_metric_correctness() {
    // Hand-built three-pair fixture on 1x8 grids:
    //   pair 0: identical masks               -> IoU 1.0
    //   pair 1: inter {3,4}, union {0..7}     -> IoU 0.25
    //   pair 2: disjoint                      -> IoU 0.0
    let row = |on: &[usize]| {
        let mut g = Grid2::<bool>::new(1, 8);
        for &x in on {
            g.set(x, 0, true);
        }
        g
    };
    let pred = vec![row(&[0, 1, 2]), row(&[0, 1, 2, 3, 4]), row(&[0, 1])];
    let gt = vec![row(&[0, 1, 2]), row(&[3, 4, 5, 6, 7]), row(&[6, 7])];
    let (miou, macc) = miou_macc(&pred, &gt, 0.25).unwrap();
    // Hand computation: mean(1, 0.25, 0) and 2 of 3 pairs >= 0.25.
    let metrics_ok = miou == (1.0 + 0.25 + 0.0) / 3.0 && macc == 2.0 / 3.0;

    // Grid search against an independent exhaustive reimplementation.
    let unit = |v: Vec<f32>| {
        let mut v = v;
        normalize_f32(&mut v);
        v
    };
    let descriptors = [unit(vec![1.0, 0.0]), unit(vec![0.8, 0.6]), unit(vec![0.6, 0.8])];
    let scene = GaussianScene {
        gaussians: (0..3)
            .map(|i| Gaussian {
                position: nalgebra::Vector3::new(i as f64, 0.0, 0.0),
                scale: nalgebra::Vector3::new(0.1, 0.1, 0.1),
                rotation: nalgebra::UnitQuaternion::identity(),
                opacity: 1.0,
                color: [0.5; 3],
            })
            .collect(),
        descriptors: Some(descriptors.concat()),
        descriptor_dim: 2,
        labeled: Some(vec![true; 3]),
    };
    let query = QueryEmbedding::new(vec![1.0, 0.0]).unwrap();
    // Two pixels: {g0, g1} and {g2}.
    let hits = PixelHits {
        h: 1,
        w: 2,
        top_k: 2,
        hits: vec![
            vec![
                Hit { gaussian: 0, weight: 0.5, depth: 1.0 },
                Hit { gaussian: 1, weight: 0.3, depth: 2.0 },
            ],
            vec![Hit { gaussian: 2, weight: 0.7, depth: 1.0 }],
        ],
    };
    let mut gt2 = Grid2::<bool>::new(1, 2);
    gt2.set(0, 0, true);
    let pairs = [EvalPair { query: &query, hits: &hits, gt: &gt2 }];
    let grid = default_tau_grid();
    let gamma = 0.5;
    let (tau, best) = grid_search_tau(&scene, &pairs, &grid, gamma).unwrap();

    // Independent reimplementation: brute force thresholding, manual
    // activation sums, manual IoU, first-maximum argmax.
    let mut ref_tau = grid[0];
    let mut ref_best = f64::NEG_INFINITY;
    for &t in &grid {
        let active: Vec<bool> = (0..3)
            .map(|g| dot_f32(&query.vector, &descriptors[g]) >= t)
            .collect();
        let mut pred = Grid2::<bool>::new(1, 2);
        for x in 0..2 {
            let a: f64 = hits.hits[x]
                .iter()
                .filter(|h| active[h.gaussian as usize])
                .map(|h| h.weight)
                .sum();
            pred.set(x, 0, a >= gamma);
        }
        let mut inter = 0usize;
        let mut union = 0usize;
        for i in 0..2 {
            inter += (pred.data[i] && gt2.data[i]) as usize;
            union += (pred.data[i] || gt2.data[i]) as usize;
        }
        let iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
        if iou > ref_best {
            ref_best = iou;
            ref_tau = t;
        }
    }
    let grid_ok = tau == ref_tau && best == ref_best;

    println!("metrics: miou/macc exact = {metrics_ok}, grid search vs duplicate = {grid_ok} (τ={tau:.3})");
    verdict("6 (metric correctness)", metrics_ok && grid_ok);
}

// ---------------------------------------------------------------------------
// 7. Determinism and order independence

fn dir_files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

#[test]
fn acceptance_7_determinism_and_order_independence() {
    let cfg = PipelineConfig::default();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    run_pipeline(&cfg, dir_a.path(), true, false).unwrap();
    run_pipeline(&cfg, dir_b.path(), true, false).unwrap();
    let files_a = dir_files(dir_a.path());
    let files_b = dir_files(dir_b.path());
    let byte_identical = files_a.len() == files_b.len()
        && files_a
            .iter()
            .zip(&files_b)
            .all(|(a, b)| a.0 == b.0 && a.1 == b.1);

    // Registration under view permutation and varying worker counts.
    let art = Artifacts::new(dir_a.path());
    let (views, _) = load_views_and_warps(&art.manifest()).unwrap();
    let scene = read_scene(&art.scene()).unwrap();
    let set = read_proposals(&art.proposals()).unwrap();
    let hits = load_all_hits(|v| art.hits(v), views.len()).unwrap();
    let baseline = stage_register(&scene, &views, &set, &hits);

    let perm = [2usize, 0, 3, 1];
    let mut newpos = vec![0usize; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        newpos[old] = new;
    }
    let perm_views = ViewSet {
        cameras: perm.iter().map(|&o| views.cameras[o].clone()).collect(),
        masks: perm
            .iter()
            .enumerate()
            .map(|(new, &o)| {
                let mut m = views.masks[o].clone();
                m.view_id = new;
                m
            })
            .collect(),
        colors: perm.iter().map(|&o| views.colors[o].clone()).collect(),
        descriptor_dim: views.descriptor_dim,
    };
    let perm_set = ProposalSet {
        proposals: set
            .proposals
            .iter()
            .map(|p| Proposal {
                members: p
                    .members
                    .iter()
                    .map(|m| MaskNode {
                        view: newpos[m.view],
                        mask: m.mask,
                    })
                    .collect(),
                views: p.views.iter().map(|&v| newpos[v]).collect(),
            })
            .collect(),
        lookup: perm.iter().map(|&o| set.lookup[o].clone()).collect(),
    };
    let perm_hits: Vec<PixelHits> = perm.iter().map(|&o| hits[o].clone()).collect();
    let permuted = stage_register(&scene, &perm_views, &perm_set, &perm_hits);

    let diff = |a: &GaussianScene, b: &GaussianScene| -> f64 {
        a.descriptors
            .as_ref()
            .unwrap()
            .iter()
            .zip(b.descriptors.as_ref().unwrap())
            .map(|(x, y)| (x - y).abs() as f64)
            .fold(0.0, f64::max)
    };
    let perm_diff = diff(&baseline, &permuted);
    let perm_ok = perm_diff <= 1e-6 && baseline.labeled == permuted.labeled;

    let mut pool_ok = true;
    let mut pool_diff = 0f64;
    for threads in [1usize, 4, 8] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let got = pool.install(|| stage_register(&scene, &views, &set, &hits));
        pool_diff = pool_diff.max(diff(&baseline, &got));
        pool_ok &= got.labeled == baseline.labeled;
    }
    pool_ok &= pool_diff <= 1e-6;

    println!(
        "determinism: byte_identical={byte_identical}, permutation diff {perm_diff:.2e}, \
         pool diff {pool_diff:.2e}"
    );
    verdict(
        "7 (determinism and order independence)",
        byte_identical && perm_ok && pool_ok,
    );
}

// ---------------------------------------------------------------------------
// 8. Noise robustness regression

#[test]
fn acceptance_8_noise_robustness() {
    let spec = SynthSpec {
        noise: NoiseSpec {
            warp_jitter_px: 2.0,
            mask_dropout: 0.2,
            ..NoiseSpec::default()
        },
        seed: 21,
        ..SynthSpec::default()
    };
    let (_views, _warps, gt, _scene, _hits, set, sem) =
        in_memory_pipeline(&spec, &RenderConfig::default(), &ClusterConfig::default());

    let purities = proposal_purities(&set, &gt);
    let purity = purities.iter().sum::<f64>() / purities.len().max(1) as f64;
    let (acc, labeled) = label_accuracy(&sem, &gt);

    println!(
        "noise robustness: {} proposals, mean purity {purity:.4}, argmax accuracy {acc:.4} \
         over {labeled} labeled gaussians",
        set.proposals.len()
    );
    verdict(
        "8 (noise robustness regression)",
        !set.proposals.is_empty() && purity >= 0.9 && acc >= 0.85,
    );
}
