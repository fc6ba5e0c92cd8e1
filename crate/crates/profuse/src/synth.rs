//! Procedural multi-view scene generator with exact ground truth.
//!
//! Objects are opaque analytic primitives (spheres or axis-aligned boxes),
//! so silhouettes, depths, and co-visibility are exact. Cameras sit on a
//! ring looking at the origin. Warps are exact reprojections of true surface
//! points plus optional jitter; confidences are 1 where the correspondence
//! is co-visible and 0 elsewhere, with optional random corruption.
//!
//! Per-view rng streams are derived from (seed, purpose, view), so the
//! output is byte-identical regardless of generation order.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container_io::{
    read_tensor, write_tensor, ManifestView, ManifestWarp, SceneManifest, Tensor,
};
use crate::error::{Error, Result};
use crate::scene_model::{normalize_f32, Camera, Grid2, ViewSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Sphere,
    Box,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Std dev of additive warp jitter, in pixels.
    pub warp_jitter_px: f64,
    /// Per-pixel probability of replacing the confidence with uniform noise.
    pub confidence_corruption: f64,
    /// Per-(view, object) probability of dropping the mask.
    pub mask_dropout: f64,
    /// Std dev of additive embedding noise before renormalization.
    pub embed_sigma: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            warp_jitter_px: 0.0,
            confidence_corruption: 0.0,
            mask_dropout: 0.0,
            embed_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub object_count: usize,
    pub object_kind: ObjectKind,
    pub embedding_dim: usize,
    pub view_count: usize,
    pub width: usize,
    pub height: usize,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            object_count: 3,
            object_kind: ObjectKind::Sphere,
            embedding_dim: 16,
            view_count: 4,
            width: 64,
            height: 64,
            noise: NoiseSpec::default(),
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.object_count < 1 {
            return Err(Error::Config("object_count must be >= 1".into()));
        }
        if self.view_count < 2 {
            return Err(Error::Config("view_count must be >= 2".into()));
        }
        if self.embedding_dim < 2 {
            return Err(Error::Config("embedding_dim must be >= 2".into()));
        }
        let n = &self.noise;
        if n.warp_jitter_px < 0.0
            || n.confidence_corruption < 0.0
            || n.mask_dropout < 0.0
            || n.embed_sigma < 0.0
        {
            return Err(Error::Config("noise parameters must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthObject {
    pub kind: ObjectKind,
    pub center: [f64; 3],
    /// Sphere radius, or the uniform half-extent of the box.
    pub radius: f64,
    pub color: [f32; 3],
}

impl SynthObject {
    fn center_v(&self) -> Vector3<f64> {
        Vector3::new(self.center[0], self.center[1], self.center[2])
    }

    /// Nearest positive ray intersection parameter, if any.
    fn raycast(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let c = self.center_v();
        match self.kind {
            ObjectKind::Sphere => {
                let oc = origin.coords - c;
                let b = dir.dot(&oc);
                let disc = b * b - (oc.norm_squared() - self.radius * self.radius);
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                (t > 1e-6).then_some(t)
            }
            ObjectKind::Box => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for axis in 0..3 {
                    let o = origin.coords[axis] - c[axis];
                    let d = dir[axis];
                    if d.abs() < 1e-12 {
                        if o.abs() > self.radius {
                            return None;
                        }
                        continue;
                    }
                    let ta = (-self.radius - o) / d;
                    let tb = (self.radius - o) / d;
                    t0 = t0.max(ta.min(tb));
                    t1 = t1.min(ta.max(tb));
                }
                (t0 <= t1 && t0 > 1e-6).then_some(t0)
            }
        }
    }

    /// Unsigned distance from a point to the object surface.
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        let q = p - self.center_v();
        match self.kind {
            ObjectKind::Sphere => (q.norm() - self.radius).abs(),
            ObjectKind::Box => {
                let d = q.abs() - Vector3::repeat(self.radius);
                let outside = Vector3::new(d.x.max(0.0), d.y.max(0.0), d.z.max(0.0)).norm();
                let inside = d.max().min(0.0);
                (outside + inside).abs()
            }
        }
    }
}

/// Exact scene knowledge kept alongside the generated files.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub objects: Vec<SynthObject>,
    /// Row-major object_count x D canonical unit embeddings.
    pub object_embeddings: Vec<f32>,
    pub dim: usize,
    /// Per view: 0-based object index per mask id (index k-1 for mask k).
    pub mask_to_object: Vec<Vec<u16>>,
    /// Per view: object index + 1 per pixel, 0 = background.
    pub object_ids: Vec<Grid2<u16>>,
    /// Per view: H x W x 3 true surface points (zeros at background).
    pub surface_points: Vec<Vec<f32>>,
    pub used_seed: u64,
    pub retries: u32,
}

impl GroundTruth {
    pub fn object_embedding(&self, obj: usize) -> &[f32] {
        &self.object_embeddings[obj * self.dim..(obj + 1) * self.dim]
    }

    /// Index of the object whose surface is nearest to a point.
    pub fn nearest_object(&self, p: &Vector3<f64>) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, o) in self.objects.iter().enumerate() {
            let d = o.surface_distance(p);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Analytic silhouette of one object in one view.
    pub fn silhouette(&self, view: usize, obj: usize) -> Grid2<bool> {
        let ids = &self.object_ids[view];
        Grid2 {
            h: ids.h,
            w: ids.w,
            data: ids.data.iter().map(|&v| v as usize == obj + 1).collect(),
        }
    }
}

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

const PALETTE: [[f32; 3]; 8] = [
    [0.90, 0.25, 0.20],
    [0.20, 0.65, 0.90],
    [0.30, 0.80, 0.30],
    [0.95, 0.75, 0.15],
    [0.70, 0.30, 0.85],
    [0.95, 0.50, 0.10],
    [0.15, 0.80, 0.75],
    [0.85, 0.40, 0.60],
];

fn look_at_camera(center: Point3<f64>, target: Point3<f64>, width: usize, height: usize) -> Camera {
    let forward = (target - center).normalize();
    let up = if forward.cross(&Vector3::y()).norm() < 1e-6 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let x = up.cross(&forward).normalize();
    let y = forward.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), forward.transpose()]);
    let t = -r * center.coords;
    let mut w2c = Matrix4::identity();
    w2c.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    w2c.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    let f = 1.25 * width as f64;
    Camera::new(
        f,
        f,
        width as f64 / 2.0,
        height as f64 / 2.0,
        w2c,
        width,
        height,
    )
}

fn place_objects(spec: &SynthSpec, seed: u64) -> Vec<SynthObject> {
    let mut rng = stream(seed, 0xA1);
    let mut objects: Vec<SynthObject> = Vec::new();
    while objects.len() < spec.object_count {
        let radius = 0.30 + 0.15 * rng.gen::<f64>();
        let center = Vector3::new(
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
        );
        let ok = objects.iter().all(|o| {
            (o.center_v() - center).norm() > o.radius + radius + 0.25
        });
        if ok {
            let idx = objects.len();
            objects.push(SynthObject {
                kind: spec.object_kind,
                center: [center.x, center.y, center.z],
                radius,
                color: PALETTE[idx % PALETTE.len()],
            });
        }
    }
    objects
}

fn object_embeddings(spec: &SynthSpec, seed: u64) -> Vec<f32> {
    let mut rng = stream(seed, 0xB2);
    loop {
        let mut emb = Vec::with_capacity(spec.object_count * spec.embedding_dim);
        for _ in 0..spec.object_count {
            let mut row: Vec<f32> = (0..spec.embedding_dim).map(|_| normal(&mut rng) as f32).collect();
            normalize_f32(&mut row);
            emb.extend(row);
        }
        let d = spec.embedding_dim;
        let distinct = (0..spec.object_count).all(|a| {
            (a + 1..spec.object_count).all(|b| {
                crate::scene_model::dot_f32(&emb[a * d..(a + 1) * d], &emb[b * d..(b + 1) * d])
                    < 0.99
            })
        });
        if distinct {
            return emb;
        }
    }
}

fn cameras_for(spec: &SynthSpec) -> Vec<Camera> {
    (0..spec.view_count)
        .map(|v| {
            let angle = 2.0 * std::f64::consts::PI * v as f64 / spec.view_count as f64;
            let height = 0.8 + 0.25 * ((v % 3) as f64 - 1.0);
            let center = Point3::new(4.0 * angle.cos(), height, 4.0 * angle.sin());
            look_at_camera(center, Point3::origin(), spec.width, spec.height)
        })
        .collect()
}

fn layout_degenerate(objects: &[SynthObject], cameras: &[Camera]) -> Option<String> {
    for (oi, obj) in objects.iter().enumerate() {
        let dirs: Vec<Vector3<f64>> = cameras
            .iter()
            .map(|c| (c.center().coords - obj.center_v()).normalize())
            .collect();
        let collinear = dirs
            .iter()
            .skip(1)
            .all(|d| d.cross(&dirs[0]).norm() < 1e-6);
        if collinear {
            return Some(format!("all camera centers collinear with object {oi}"));
        }
    }
    None
}

struct ViewGeometry {
    object_ids: Grid2<u16>,
    points: Vec<f32>,
    depth: Vec<f64>,
}

fn raycast_view(cam: &Camera, objects: &[SynthObject]) -> ViewGeometry {
    let (h, w) = (cam.height, cam.width);
    let mut object_ids = Grid2::<u16>::new(h, w);
    let mut points = vec![0f32; h * w * 3];
    let mut depth = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let (origin, dir) = cam.pixel_ray(x as f64 + 0.5, y as f64 + 0.5);
            let mut best: Option<(f64, usize)> = None;
            for (oi, obj) in objects.iter().enumerate() {
                if let Some(t) = obj.raycast(&origin, &dir) {
                    if best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, oi));
                    }
                }
            }
            if let Some((t, oi)) = best {
                let p = origin.coords + dir * t;
                object_ids.set(x, y, (oi + 1) as u16);
                let idx = (y * w + x) * 3;
                points[idx] = p.x as f32;
                points[idx + 1] = p.y as f32;
                points[idx + 2] = p.z as f32;
                depth[y * w + x] = cam.to_camera(&Point3::from(p)).z;
            }
        }
    }
    ViewGeometry {
        object_ids,
        points,
        depth,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GtSidecar {
    used_seed: u64,
    retries: u32,
    dim: usize,
    objects: Vec<SynthObject>,
    mask_to_object: Vec<Vec<u16>>,
    embeddings_file: String,
    points_files: Vec<String>,
    object_id_files: Vec<String>,
}

/// Generate a full scene under `out_dir`: manifest, per-view masks,
/// embeddings, colors, all ordered-pair warps, and a ground-truth sidecar.
/// Returns the manifest path and the in-memory ground truth.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<(PathBuf, GroundTruth)> {
    spec.validate()?;
    let mut seed = spec.seed;
    let mut retries = 0u32;
    let (objects, cameras) = loop {
        let objects = place_objects(spec, seed);
        let cameras = cameras_for(spec);
        match layout_degenerate(&objects, &cameras) {
            None => break (objects, cameras),
            Some(reason) => {
                retries += 1;
                if retries > 8 {
                    return Err(Error::DegenerateLayout { seed, reason });
                }
                seed = seed.wrapping_add(1);
            }
        }
    };
    let emb = object_embeddings(spec, seed);
    let d = spec.embedding_dim;
    let (h, w) = (spec.height, spec.width);
    let n_views = spec.view_count;

    let geometry: Vec<ViewGeometry> = cameras.iter().map(|c| raycast_view(c, &objects)).collect();

    // Per-view masks with dropout, colors, and embeddings.
    let mut mask_to_object: Vec<Vec<u16>> = Vec::with_capacity(n_views);
    let mut manifest_views = Vec::with_capacity(n_views);
    for (v, geo) in geometry.iter().enumerate() {
        let mut rng = stream(seed, 0xC3 + v as u64);
        let visible: Vec<bool> = (0..objects.len())
            .map(|oi| geo.object_ids.data.iter().any(|&id| id as usize == oi + 1))
            .collect();
        let kept: Vec<usize> = (0..objects.len())
            .filter(|&oi| {
                let dropped = rng.gen::<f64>() < spec.noise.mask_dropout;
                visible[oi] && !dropped
            })
            .collect();
        // Dense relabeling 1..K over kept objects.
        let mut object_to_mask = vec![0u16; objects.len() + 1];
        let mut m2o = Vec::with_capacity(kept.len());
        for (mi, &oi) in kept.iter().enumerate() {
            object_to_mask[oi + 1] = (mi + 1) as u16;
            m2o.push(oi as u16);
        }
        let label_map: Vec<u16> = geo
            .object_ids
            .data
            .iter()
            .map(|&id| object_to_mask[id as usize])
            .collect();

        let mut embeddings = Vec::with_capacity(kept.len() * d);
        for &oi in &kept {
            let mut row: Vec<f32> = emb[oi * d..(oi + 1) * d]
                .iter()
                .map(|&e| e + (spec.noise.embed_sigma * normal(&mut rng)) as f32)
                .collect();
            normalize_f32(&mut row);
            embeddings.extend(row);
        }

        let colors: Vec<f32> = geo
            .object_ids
            .data
            .iter()
            .flat_map(|&id| {
                if id == 0 {
                    [0.0, 0.0, 0.0]
                } else {
                    objects[id as usize - 1].color
                }
            })
            .collect();

        let mask_file = format!("masks_{v:03}.pf");
        let emb_file = format!("emb_{v:03}.pf");
        let color_file = format!("color_{v:03}.pf");
        write_tensor(
            &out_dir.join(&mask_file),
            &Tensor::u16(vec![h as u64, w as u64], label_map),
        )?;
        write_tensor(
            &out_dir.join(&emb_file),
            &Tensor::f32(vec![kept.len() as u64, d as u64], embeddings),
        )?;
        write_tensor(
            &out_dir.join(&color_file),
            &Tensor::f32(vec![h as u64, w as u64, 3], colors),
        )?;

        let cam = &cameras[v];
        let w2c: Vec<f64> = cam.world_to_camera.transpose().as_slice().to_vec();
        manifest_views.push(ManifestView {
            id: v,
            width: w,
            height: h,
            fx: cam.fx(),
            fy: cam.fy(),
            cx: cam.cx(),
            cy: cam.cy(),
            world_to_camera: w2c,
            mask_file,
            embedding_file: emb_file,
            color_file: Some(color_file),
        });
        mask_to_object.push(m2o);
    }

    // Warps for every ordered pair (src j -> dst i).
    let mut manifest_warps = Vec::new();
    for j in 0..n_views {
        for i in 0..n_views {
            if i == j {
                continue;
            }
            let mut rng = stream(seed, 0xD4 + (j * n_views + i) as u64);
            let cam_i = &cameras[i];
            let geo_j = &geometry[j];
            let geo_i = &geometry[i];
            let mut warp = vec![0f32; 2 * h * w];
            let mut conf = vec![0f32; h * w];
            for y in 0..h {
                for x in 0..w {
                    let idx = y * w + x;
                    let oid = geo_j.object_ids.data[idx];
                    let mut base_conf = 0f32;
                    if oid != 0 {
                        let p = Point3::new(
                            geo_j.points[idx * 3] as f64,
                            geo_j.points[idx * 3 + 1] as f64,
                            geo_j.points[idx * 3 + 2] as f64,
                        );
                        if let Some((u, v2, z)) = cam_i.project(&p) {
                            let mut uu = u;
                            let mut vv = v2;
                            if spec.noise.warp_jitter_px > 0.0 {
                                uu += spec.noise.warp_jitter_px * normal(&mut rng);
                                vv += spec.noise.warp_jitter_px * normal(&mut rng);
                            }
                            warp[idx] = uu as f32;
                            warp[h * w + idx] = vv as f32;
                            if cam_i.in_image(u, v2) {
                                let px = (u.floor() as i64).clamp(0, w as i64 - 1) as usize;
                                let py = (v2.floor() as i64).clamp(0, h as i64 - 1) as usize;
                                let same = geo_i.object_ids.at(px, py) == oid;
                                let depth_ok =
                                    (geo_i.depth[py * w + px] - z).abs() < 0.05 * z.max(1e-6);
                                if same && depth_ok {
                                    base_conf = 1.0;
                                }
                            }
                        }
                    }
                    if spec.noise.confidence_corruption > 0.0
                        && rng.gen::<f64>() < spec.noise.confidence_corruption
                    {
                        base_conf = rng.gen::<f32>();
                    }
                    conf[idx] = base_conf;
                }
            }
            let warp_file = format!("warp_{j:03}_{i:03}.pf");
            let conf_file = format!("conf_{j:03}_{i:03}.pf");
            write_tensor(
                &out_dir.join(&warp_file),
                &Tensor::f32(vec![2, h as u64, w as u64], warp),
            )?;
            write_tensor(
                &out_dir.join(&conf_file),
                &Tensor::f32(vec![h as u64, w as u64], conf),
            )?;
            manifest_warps.push(ManifestWarp {
                src: j,
                dst: i,
                warp_file,
                confidence_file: conf_file,
            });
        }
    }

    let manifest = SceneManifest {
        descriptor_dim: d,
        views: manifest_views,
        warps: manifest_warps,
    };
    let manifest_path = out_dir.join("manifest.json");
    manifest.save(&manifest_path)?;

    // Ground-truth sidecar.
    let mut points_files = Vec::new();
    let mut object_id_files = Vec::new();
    for (v, geo) in geometry.iter().enumerate() {
        let pf = format!("gt_points_{v:03}.pf");
        let of = format!("gt_objects_{v:03}.pf");
        write_tensor(
            &out_dir.join(&pf),
            &Tensor::f32(vec![h as u64, w as u64, 3], geo.points.clone()),
        )?;
        write_tensor(
            &out_dir.join(&of),
            &Tensor::u16(vec![h as u64, w as u64], geo.object_ids.data.clone()),
        )?;
        points_files.push(pf);
        object_id_files.push(of);
    }
    write_tensor(
        &out_dir.join("gt_embeddings.pf"),
        &Tensor::f32(vec![objects.len() as u64, d as u64], emb.clone()),
    )?;
    let sidecar = GtSidecar {
        used_seed: seed,
        retries,
        dim: d,
        objects: objects.clone(),
        mask_to_object: mask_to_object.clone(),
        embeddings_file: "gt_embeddings.pf".into(),
        points_files,
        object_id_files,
    };
    let text = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::Manifest(format!("gt sidecar: {e}")))?;
    std::fs::write(out_dir.join("gt.json"), text).map_err(|e| Error::Io {
        path: out_dir.join("gt.json"),
        source: e,
    })?;

    let gt = GroundTruth {
        objects,
        object_embeddings: emb,
        dim: d,
        mask_to_object,
        object_ids: geometry.iter().map(|g| g.object_ids.clone()).collect(),
        surface_points: geometry.into_iter().map(|g| g.points).collect(),
        used_seed: seed,
        retries,
    };
    Ok((manifest_path, gt))
}

/// Load the ground-truth sidecar written by [`generate`].
pub fn load_ground_truth(gt_json: &Path) -> Result<GroundTruth> {
    let text = std::fs::read_to_string(gt_json).map_err(|e| Error::Io {
        path: gt_json.to_path_buf(),
        source: e,
    })?;
    let sidecar: GtSidecar =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("gt sidecar: {e}")))?;
    let base = gt_json.parent().unwrap_or(Path::new("."));
    let emb_t = read_tensor(&base.join(&sidecar.embeddings_file))?;
    let mut object_ids = Vec::new();
    let mut surface_points = Vec::new();
    for (pf, of) in sidecar.points_files.iter().zip(&sidecar.object_id_files) {
        let points_t = read_tensor(&base.join(pf))?;
        let ids_t = read_tensor(&base.join(of))?;
        let (h, w) = (ids_t.shape[0] as usize, ids_t.shape[1] as usize);
        object_ids.push(Grid2::from_vec(h, w, ids_t.as_u16()?.to_vec()));
        surface_points.push(points_t.as_f32()?.to_vec());
    }
    Ok(GroundTruth {
        objects: sidecar.objects,
        object_embeddings: emb_t.as_f32()?.to_vec(),
        dim: sidecar.dim,
        mask_to_object: sidecar.mask_to_object,
        object_ids,
        surface_points,
        used_seed: sidecar.used_seed,
        retries: sidecar.retries,
    })
}

/// Rank the other views against a reference by
/// `cos(dir_ref, dir_j) - lambda * dist / dist_max` and return the top `k`.
pub fn select_neighbors(views: &ViewSet, reference: usize, k: usize, lambda: f64) -> Vec<usize> {
    let cam_ref = &views.cameras[reference];
    let dir_ref = cam_ref.view_dir();
    let center_ref = cam_ref.center();
    let others: Vec<usize> = (0..views.len()).filter(|&v| v != reference).collect();
    let dist_max = others
        .iter()
        .map(|&v| (views.cameras[v].center() - center_ref).norm())
        .fold(0.0f64, f64::max);
    let mut scored: Vec<(f64, usize)> = others
        .into_iter()
        .map(|v| {
            let cam = &views.cameras[v];
            let cos = dir_ref.dot(&cam.view_dir());
            let dist = (cam.center() - center_ref).norm();
            let dist_term = if dist_max > 0.0 { dist / dist_max } else { 0.0 };
            (cos - lambda * dist_term, v)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, v)| v).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container_io::load_manifest;
    use tempfile::tempdir;

    #[test]
    fn zero_noise_masks_map_one_object_each() {
        let dir = tempdir().unwrap();
        let spec = SynthSpec {
            object_count: 3,
            view_count: 4,
            embedding_dim: 16,
            seed: 7,
            ..Default::default()
        };
        let (manifest_path, gt) = generate(&spec, dir.path()).unwrap();
        let (views, _) = load_manifest(&manifest_path).unwrap();
        assert_eq!(views.len(), 4);
        for v in 0..4 {
            let k = views.masks[v].mask_count();
            assert_eq!(gt.mask_to_object[v].len(), k);
            // Zero noise: each mask's embedding equals its object embedding.
            for m in 0..k {
                let obj = gt.mask_to_object[v][m] as usize;
                let e = &views.masks[v].embeddings[m * 16..(m + 1) * 16];
                let cos = crate::scene_model::dot_f32(e, gt.object_embedding(obj));
                assert!(cos > 1.0 - 1e-6);
            }
        }
    }

    #[test]
    fn zero_noise_warps_reproject_exactly() {
        let dir = tempdir().unwrap();
        let spec = SynthSpec::default();
        let (manifest_path, gt) = generate(&spec, dir.path()).unwrap();
        let (views, warp_descs) = load_manifest(&manifest_path).unwrap();
        let desc = warp_descs.iter().find(|d| d.src == 1 && d.dst == 0).unwrap();
        let warp = crate::container_io::load_warp(desc, 64, 64).unwrap();
        let cam0 = &views.cameras[0];
        let mut checked = 0;
        for y in 0..64 {
            for x in 0..64 {
                if warp.confidence.at(x, y) < 1.0 {
                    continue;
                }
                let idx = (y * 64 + x) * 3;
                let p = Point3::new(
                    gt.surface_points[1][idx] as f64,
                    gt.surface_points[1][idx + 1] as f64,
                    gt.surface_points[1][idx + 2] as f64,
                );
                let (u, v, _) = cam0.project(&p).unwrap();
                let (wu, wv) = warp.dst_coord(x, y);
                assert!((u - wu).abs() < 1e-3 && (v - wv).abs() < 1e-3);
                checked += 1;
            }
        }
        assert!(checked > 100, "expected a co-visible region, got {checked}");
    }

    #[test]
    fn determinism_byte_identical() {
        let spec = SynthSpec::default();
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        generate(&spec, d1.path()).unwrap();
        generate(&spec, d2.path()).unwrap();
        let mut names: Vec<String> = std::fs::read_dir(d1.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert!(!names.is_empty());
        for name in names {
            let a = std::fs::read(d1.path().join(&name)).unwrap();
            let b = std::fs::read(d2.path().join(&name)).unwrap();
            assert_eq!(a, b, "file {name} differs between runs");
        }
    }

    #[test]
    fn mask_dropout_removes_about_half() {
        let dir = tempdir().unwrap();
        let spec = SynthSpec {
            object_count: 4,
            view_count: 8,
            noise: NoiseSpec {
                mask_dropout: 0.5,
                ..Default::default()
            },
            seed: 11,
            ..Default::default()
        };
        let (_, gt) = generate(&spec, dir.path()).unwrap();
        let total: usize = gt.mask_to_object.iter().map(|v| v.len()).sum();
        // 32 (view, object) slots; not all objects are visible everywhere,
        // so compare against the visible count bound instead of 32.
        assert!(total >= 8 && total <= 24, "kept {total} masks");
    }

    #[test]
    fn ring_neighbors_are_adjacent() {
        let spec = SynthSpec {
            view_count: 6,
            ..Default::default()
        };
        let cams = cameras_for(&spec);
        // Flatten heights so the ring is exactly symmetric.
        let cams: Vec<Camera> = cams
            .iter()
            .enumerate()
            .map(|(v, _)| {
                let angle = 2.0 * std::f64::consts::PI * v as f64 / 6.0;
                look_at_camera(
                    Point3::new(4.0 * angle.cos(), 0.0, 4.0 * angle.sin()),
                    Point3::origin(),
                    64,
                    64,
                )
            })
            .collect();
        let views = ViewSet {
            cameras: cams,
            masks: vec![],
            colors: vec![],
            descriptor_dim: 16,
        };
        // Brute-force oracle over the score formula.
        let sel = select_neighbors(&views, 0, 2, 0.5);
        let mut sel_sorted = sel.clone();
        sel_sorted.sort_unstable();
        assert_eq!(sel_sorted, vec![1, 5]);
        let all = select_neighbors(&views, 0, 5, 0.5);
        assert_eq!(all.len(), 5);
    }

    #[test]
    fn colocated_camera_same_direction_ranks_first() {
        let c0 = look_at_camera(Point3::new(4.0, 0.0, 0.0), Point3::origin(), 64, 64);
        // Same center, opposite direction.
        let c1 = look_at_camera(Point3::new(4.0, 0.0, 0.0), Point3::new(8.0, 0.0, 0.0), 64, 64);
        let c2 = look_at_camera(Point3::new(4.0, 0.0, 1e-9), Point3::origin(), 64, 64);
        let views = ViewSet {
            cameras: vec![c0, c1, c2],
            masks: vec![],
            colors: vec![],
            descriptor_dim: 16,
        };
        let sel = select_neighbors(&views, 0, 1, 0.5);
        assert_eq!(sel, vec![2]);
    }

    #[test]
    fn ground_truth_sidecar_roundtrip() {
        let dir = tempdir().unwrap();
        let spec = SynthSpec::default();
        let (_, gt) = generate(&spec, dir.path()).unwrap();
        let back = load_ground_truth(&dir.path().join("gt.json")).unwrap();
        assert_eq!(back.objects.len(), gt.objects.len());
        assert_eq!(back.object_embeddings, gt.object_embeddings);
        assert_eq!(back.mask_to_object, gt.mask_to_object);
        assert_eq!(back.object_ids[0].data, gt.object_ids[0].data);
    }
}
