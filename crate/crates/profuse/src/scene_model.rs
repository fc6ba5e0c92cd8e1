//! Core domain types shared by every pipeline stage.
//!
//! All types are immutable values after construction and safe to share
//! across concurrent readers. Validation is a reporting operation: it
//! returns the list of violated invariants instead of failing.

use nalgebra::{Matrix3, Matrix4, Point3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// Dense row-major 2D buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2<T> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Grid2<T> {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![T::default(); h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), h * w);
        Self { h, w, data }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> T {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.w + x] = v;
    }

    #[inline]
    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h
    }
}

/// Posed pinhole camera.
///
/// Continuous image coordinates place the center of pixel `(ix, iy)` at
/// `(ix + 0.5, iy + 0.5)`.
#[derive(Debug, Clone)]
pub struct Camera {
    /// Upper-triangular intrinsics (fx, fy on the diagonal, cx, cy in the
    /// last column).
    pub intrinsics: Matrix3<f64>,
    /// Rigid world-to-camera transform.
    pub world_to_camera: Matrix4<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        world_to_camera: Matrix4<f64>,
        width: usize,
        height: usize,
    ) -> Self {
        let intrinsics = Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0);
        Self {
            intrinsics,
            world_to_camera,
            width,
            height,
        }
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }
    pub fn fy(&self) -> f64 {
        self.intrinsics[(1, 1)]
    }
    pub fn cx(&self) -> f64 {
        self.intrinsics[(0, 2)]
    }
    pub fn cy(&self) -> f64 {
        self.intrinsics[(1, 2)]
    }

    /// World-to-camera rotation block.
    pub fn rotation_wc(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Point3<f64> {
        let r = self.rotation_wc();
        let t = Vector3::new(
            self.world_to_camera[(0, 3)],
            self.world_to_camera[(1, 3)],
            self.world_to_camera[(2, 3)],
        );
        Point3::from(-(r.transpose() * t))
    }

    /// Unit viewing direction (camera +z axis) in world coordinates.
    pub fn view_dir(&self) -> Vector3<f64> {
        self.rotation_wc().transpose() * Vector3::new(0.0, 0.0, 1.0)
    }

    /// Transform a world point into camera coordinates.
    pub fn to_camera(&self, p: &Point3<f64>) -> Point3<f64> {
        let r = self.rotation_wc();
        let t = Vector3::new(
            self.world_to_camera[(0, 3)],
            self.world_to_camera[(1, 3)],
            self.world_to_camera[(2, 3)],
        );
        Point3::from(r * p.coords + t)
    }

    /// Project a world point to continuous pixel coordinates and depth.
    /// Returns `None` for points at or behind the camera plane.
    pub fn project(&self, p: &Point3<f64>) -> Option<(f64, f64, f64)> {
        let pc = self.to_camera(p);
        if pc.z <= 1e-9 {
            return None;
        }
        let u = self.fx() * pc.x / pc.z + self.cx();
        let v = self.fy() * pc.y / pc.z + self.cy();
        Some((u, v, pc.z))
    }

    /// Ray through a continuous pixel coordinate: (origin, unit direction)
    /// in world coordinates.
    pub fn pixel_ray(&self, u: f64, v: f64) -> (Point3<f64>, Vector3<f64>) {
        let dir_cam = Vector3::new((u - self.cx()) / self.fx(), (v - self.cy()) / self.fy(), 1.0);
        let dir = (self.rotation_wc().transpose() * dir_cam).normalize();
        (self.center(), dir)
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

/// One anisotropic Gaussian primitive.
#[derive(Debug, Clone)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    /// Per-axis standard deviations (world units), strictly positive.
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub opacity: f64,
    pub color: [f32; 3],
}

impl Gaussian {
    /// Full world-space covariance R diag(scale^2) R^T.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation.to_rotation_matrix().into_inner();
        let d = Matrix3::from_diagonal(&self.scale.component_mul(&self.scale));
        r * d * r.transpose()
    }
}

/// Gaussian scene with optional registered unit descriptors.
#[derive(Debug, Clone, Default)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian>,
    /// Row-major N x D descriptor matrix. Labeled rows are unit norm,
    /// unlabeled rows are all-zero.
    pub descriptors: Option<Vec<f32>>,
    pub descriptor_dim: usize,
    /// Per-Gaussian flag; false means the Gaussian was never touched by a
    /// valid proposal pixel and carries a zero descriptor.
    pub labeled: Option<Vec<bool>>,
}

impl GaussianScene {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn descriptor_row(&self, n: usize) -> Option<&[f32]> {
        let d = self.descriptor_dim;
        self.descriptors.as_ref().map(|m| &m[n * d..(n + 1) * d])
    }
}

/// Per-view mask dictionary: a dense label map plus one embedding per mask.
///
/// Label 0 is reserved for "no mask"; mask k (1-based) owns the pixels with
/// label k and embedding row k-1.
#[derive(Debug, Clone)]
pub struct MaskSet {
    pub view_id: usize,
    pub label_map: Grid2<u16>,
    /// Row-major K x D, unit rows.
    pub embeddings: Vec<f32>,
    pub dim: usize,
}

impl MaskSet {
    pub fn mask_count(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.embeddings.len() / self.dim
        }
    }

    pub fn embedding(&self, mask_id: u16) -> &[f32] {
        let k = (mask_id as usize) - 1;
        &self.embeddings[k * self.dim..(k + 1) * self.dim]
    }

    /// Binary support of mask `mask_id` (1-based).
    pub fn binary_mask(&self, mask_id: u16) -> Grid2<bool> {
        Grid2 {
            h: self.label_map.h,
            w: self.label_map.w,
            data: self.label_map.data.iter().map(|&l| l == mask_id).collect(),
        }
    }
}

/// Dense per-pixel subpixel warp from `src_view` into `dst_view`, with a
/// confidence map in [0,1]. Warp coordinates are destination continuous
/// pixel coordinates (pixel-center origin at 0.5).
#[derive(Debug, Clone)]
pub struct WarpField {
    pub src_view: usize,
    pub dst_view: usize,
    /// 2 x H x W: plane 0 = destination u, plane 1 = destination v.
    pub warp: Vec<f32>,
    pub h: usize,
    pub w: usize,
    pub confidence: Grid2<f32>,
}

impl WarpField {
    #[inline]
    pub fn dst_coord(&self, x: usize, y: usize) -> (f64, f64) {
        let idx = y * self.w + x;
        (self.warp[idx] as f64, self.warp[self.h * self.w + idx] as f64)
    }
}

/// Posed views plus per-view mask dictionaries and optional per-pixel color.
#[derive(Debug, Clone, Default)]
pub struct ViewSet {
    pub cameras: Vec<Camera>,
    pub masks: Vec<MaskSet>,
    /// Optional per-view H x W x 3 color buffer (row-major, rgb).
    pub colors: Vec<Option<Vec<f32>>>,
    pub descriptor_dim: usize,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
}

/// Thresholds and size gates for cross-view mask clustering.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub tau_alpha: f64,
    pub tau_iou: f64,
    pub tau_box: f64,
    pub s_min: usize,
    pub v_min: usize,
    pub neighbors_k: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            tau_alpha: 0.6,
            tau_iou: 0.5,
            tau_box: 0.5,
            s_min: 2,
            v_min: 2,
            neighbors_k: 2,
        }
    }
}

/// Forward-splat rendering controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    /// Hits retained per pixel.
    pub top_k: usize,
    /// Minimum per-Gaussian alpha for a hit to count.
    pub alpha_cutoff: f64,
    /// Mahalanobis radius of the 2D footprint.
    pub sigma_cutoff: f64,
    /// Keep the K largest-weight hits; when false, keep the first K by depth.
    pub top_k_by_weight: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            top_k: 10,
            alpha_cutoff: 1.0 / 255.0,
            sigma_cutoff: 3.0,
            top_k_by_weight: true,
        }
    }
}

/// Query-time selection controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueryConfig {
    /// Cosine activation threshold on re-scored Gaussians.
    pub tau_act: f64,
    /// Silhouette threshold on accumulated pixel activation.
    pub gamma: f64,
    /// PQ candidates retrieved before full-precision re-scoring.
    pub shortlist_size: usize,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            tau_act: 0.85,
            gamma: 0.5,
            shortlist_size: 128,
        }
    }
}

/// One invariant violation found by a validation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Index of the offending element (gaussian, view, or row).
    pub index: usize,
    pub field: &'static str,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}] {}: {}", self.index, self.field, self.detail)
    }
}

/// Check every scene invariant; returns the empty vec for a valid scene.
pub fn validate_scene(scene: &GaussianScene) -> Vec<Violation> {
    let mut out = Vec::new();
    for (n, g) in scene.gaussians.iter().enumerate() {
        if g.scale.iter().any(|&s| !(s > 0.0)) {
            out.push(Violation {
                index: n,
                field: "scale",
                detail: format!("components must be positive, got {:?}", g.scale),
            });
        }
        let qn = g.rotation.as_ref().norm();
        if (qn - 1.0).abs() > 1e-6 {
            out.push(Violation {
                index: n,
                field: "rotation",
                detail: format!("quaternion norm {qn} not unit"),
            });
        }
        if !(0.0..=1.0).contains(&g.opacity) {
            out.push(Violation {
                index: n,
                field: "opacity",
                detail: format!("opacity {} outside [0,1]", g.opacity),
            });
        }
        if !g.position.iter().all(|v| v.is_finite()) {
            out.push(Violation {
                index: n,
                field: "position",
                detail: "non-finite position".into(),
            });
        }
    }
    if let Some(desc) = &scene.descriptors {
        let d = scene.descriptor_dim;
        if d == 0 || desc.len() != scene.len() * d {
            out.push(Violation {
                index: 0,
                field: "descriptors",
                detail: format!(
                    "descriptor count {} does not match {} gaussians x dim {}",
                    desc.len(),
                    scene.len(),
                    d
                ),
            });
        } else {
            for n in 0..scene.len() {
                let row = &desc[n * d..(n + 1) * d];
                let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
                let labeled = scene.labeled.as_ref().map_or(true, |l| l[n]);
                if labeled {
                    if (norm - 1.0).abs() > 1e-5 {
                        out.push(Violation {
                            index: n,
                            field: "descriptors",
                            detail: format!("row norm {norm} not unit"),
                        });
                    }
                } else if norm > 1e-5 {
                    out.push(Violation {
                        index: n,
                        field: "descriptors",
                        detail: format!("unlabeled row has norm {norm}, expected zero"),
                    });
                }
            }
        }
    }
    out
}

/// Check camera invariants.
pub fn validate_camera(cam: &Camera, index: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    if !(cam.fx() > 0.0) || !(cam.fy() > 0.0) {
        out.push(Violation {
            index,
            field: "intrinsics",
            detail: format!("focal lengths must be positive: fx={}, fy={}", cam.fx(), cam.fy()),
        });
    }
    if cam.width < 1 || cam.height < 1 {
        out.push(Violation {
            index,
            field: "size",
            detail: format!("{}x{} below 1x1", cam.width, cam.height),
        });
    }
    let r = cam.rotation_wc();
    let err = (r * r.transpose() - Matrix3::identity()).abs().max();
    if err > 1e-6 {
        out.push(Violation {
            index,
            field: "world_to_camera",
            detail: format!("rotation block not orthonormal (max deviation {err:.2e})"),
        });
    }
    out
}

/// Check mask-set invariants (dense labels, unit embedding rows).
pub fn validate_mask_set(ms: &MaskSet) -> Vec<Violation> {
    let mut out = Vec::new();
    let k = ms.mask_count();
    if let Some(&bad) = ms.label_map.data.iter().find(|&&l| (l as usize) > k) {
        out.push(Violation {
            index: ms.view_id,
            field: "label_map",
            detail: format!("label {bad} exceeds mask count {k}"),
        });
    }
    for row in 0..k {
        let e = &ms.embeddings[row * ms.dim..(row + 1) * ms.dim];
        let norm = e.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-5 {
            out.push(Violation {
                index: ms.view_id,
                field: "embeddings",
                detail: format!("mask {} embedding norm {norm} not unit", row + 1),
            });
        }
    }
    out
}

/// L2-normalize in place; returns the original norm.
pub fn normalize_f32(v: &mut [f32]) -> f64 {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    }
    norm
}

/// Cosine of two equal-length f32 vectors, accumulated in f64.
pub fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum::<f64>()
}
