//! Bit-exact file formats and scene-manifest handling.
//!
//! # Tensor container (normative)
//!
//! A single tensor is stored as:
//!
//! ```text
//! magic   8 bytes  "PFTENSR1"
//! dtype   u32 LE   1 = f32, 2 = u16, 3 = u8
//! ndim    u32 LE
//! shape   ndim x u64 LE
//! payload row-major, little-endian
//! ```
//!
//! A record file concatenates named tensors:
//!
//! ```text
//! magic   8 bytes  "PFRECRD1"
//! count   u32 LE
//! per record: name_len u32 LE, name (utf-8), tensor container as above
//! ```
//!
//! Warp coordinates are stored in destination-pixel units with the origin at
//! the pixel center: the center of pixel `(ix, iy)` is `(ix + 0.5, iy + 0.5)`.
//!
//! Manifests are JSON for human inspection. All referenced paths are
//! relative to the manifest's directory. View ids must be dense `0..N`.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene_model::{
    validate_camera, validate_mask_set, Camera, Gaussian, GaussianScene, Grid2, MaskSet, ViewSet,
    WarpField,
};

const TENSOR_MAGIC: &[u8; 8] = b"PFTENSR1";
const RECORD_MAGIC: &[u8; 8] = b"PFRECRD1";

/// Element type codes of the container format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    U16 = 2,
    U8 = 3,
}

/// Decoded tensor payload.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U16(Vec<u16>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U16(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::U16(_) => Dtype::U16,
            TensorData::U8(_) => Dtype::U8,
        }
    }
}

/// Shape + payload pair as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(shape: Vec<u64>, data: Vec<f32>) -> Self {
        Self {
            shape,
            data: TensorData::F32(data),
        }
    }

    pub fn u16(shape: Vec<u64>, data: Vec<u16>) -> Self {
        Self {
            shape,
            data: TensorData::U16(data),
        }
    }

    pub fn u8(shape: Vec<u64>, data: Vec<u8>) -> Self {
        Self {
            shape,
            data: TensorData::U8(data),
        }
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product::<u64>() as usize
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(Error::Manifest(format!(
                "expected f32 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn as_u16(&self) -> Result<&[u16]> {
        match &self.data {
            TensorData::U16(v) => Ok(v),
            other => Err(Error::Manifest(format!(
                "expected u16 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            other => Err(Error::Manifest(format!(
                "expected u8 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    fn check(&self) -> Result<()> {
        let expected = self.element_count();
        if self.data.len() != expected {
            return Err(Error::ShapeMismatch {
                shape: self.shape.clone(),
                expected,
                found: self.data.len(),
            });
        }
        Ok(())
    }

    fn encode(&self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(TENSOR_MAGIC);
        buf.extend_from_slice(&(self.data.dtype() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &dim in &self.shape {
            buf.extend_from_slice(&dim.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => {
                for &x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::U16(v) => {
                for &x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::U8(v) => buf.extend_from_slice(v),
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::PayloadShort {
                path: self.path.clone(),
                expected: self.pos + n,
                found: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn expect_magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        let found = self.take(8)?;
        if found != magic {
            return Err(Error::BadMagic {
                path: self.path.clone(),
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    fn tensor(&mut self) -> Result<Tensor> {
        self.expect_magic(TENSOR_MAGIC)?;
        let dtype = self.u32()?;
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()?);
        }
        let count = shape.iter().product::<u64>() as usize;
        let data = match dtype {
            1 => {
                let bytes = self.take(count * 4)?;
                TensorData::F32(
                    bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            2 => {
                let bytes = self.take(count * 2)?;
                TensorData::U16(
                    bytes
                        .chunks_exact(2)
                        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            3 => TensorData::U8(self.take(count)?.to_vec()),
            code => {
                return Err(Error::UnknownDtype {
                    path: self.path.clone(),
                    code,
                })
            }
        };
        Ok(Tensor { shape, data })
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(bytes).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Write a single tensor container file.
pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    tensor.check()?;
    let mut buf = Vec::with_capacity(24 + tensor.data.len() * 4);
    tensor.encode(&mut buf);
    write_bytes(path, &buf)
}

/// Read a single tensor container file; exact inverse of [`write_tensor`].
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let buf = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut cur = Cursor {
        buf: &buf,
        pos: 0,
        path: path.to_path_buf(),
    };
    let t = cur.tensor()?;
    Ok(t)
}

/// Write a record file of named tensors in the given order.
pub fn write_records(path: &Path, records: &[(&str, Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(RECORD_MAGIC);
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, tensor) in records {
        tensor.check()?;
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        tensor.encode(&mut buf);
    }
    write_bytes(path, &buf)
}

/// Read a record file, preserving record order.
pub fn read_records(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut cur = Cursor {
        buf: &buf,
        pos: 0,
        path: path.to_path_buf(),
    };
    cur.expect_magic(RECORD_MAGIC)?;
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8_lossy(cur.take(name_len)?).into_owned();
        out.push((name, cur.tensor()?));
    }
    Ok(out)
}

fn find_record<'a>(records: &'a [(String, Tensor)], name: &str, path: &Path) -> Result<&'a Tensor> {
    records
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Manifest(format!("record '{name}' missing from {}", path.display())))
}

// ---------------------------------------------------------------------------
// Scene manifest

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestView {
    pub id: usize,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 4x4 rigid transform.
    pub world_to_camera: Vec<f64>,
    pub mask_file: String,
    pub embedding_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color_file: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestWarp {
    pub src: usize,
    pub dst: usize,
    pub warp_file: String,
    pub confidence_file: String,
}

/// Top-level scene manifest document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub descriptor_dim: usize,
    pub views: Vec<ManifestView>,
    pub warps: Vec<ManifestWarp>,
}

impl SceneManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Manifest(format!("serialize: {e}")))?;
        write_bytes(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
    }
}

/// Resolved descriptor of one warp-pair file set, loadable lazily.
#[derive(Debug, Clone)]
pub struct WarpPairDesc {
    pub src: usize,
    pub dst: usize,
    pub warp_path: PathBuf,
    pub confidence_path: PathBuf,
}

fn require_exists(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
        });
    }
    Ok(())
}

/// Load a warp field referenced by a manifest, validating shapes.
pub fn load_warp(desc: &WarpPairDesc, h: usize, w: usize) -> Result<WarpField> {
    let warp_t = read_tensor(&desc.warp_path)?;
    if warp_t.shape != [2, h as u64, w as u64] {
        return Err(Error::Manifest(format!(
            "warp {} has shape {:?}, expected [2,{h},{w}]",
            desc.warp_path.display(),
            warp_t.shape
        )));
    }
    let conf_t = read_tensor(&desc.confidence_path)?;
    if conf_t.shape != [h as u64, w as u64] {
        return Err(Error::Manifest(format!(
            "confidence {} has shape {:?}, expected [{h},{w}]",
            desc.confidence_path.display(),
            conf_t.shape
        )));
    }
    let warp = warp_t.as_f32()?.to_vec();
    if warp.iter().any(|v| !v.is_finite()) {
        return Err(Error::Manifest(format!(
            "warp {} contains non-finite coordinates",
            desc.warp_path.display()
        )));
    }
    let conf = conf_t.as_f32()?.to_vec();
    if conf.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Manifest(format!(
            "confidence {} outside [0,1]",
            desc.confidence_path.display()
        )));
    }
    Ok(WarpField {
        src_view: desc.src,
        dst_view: desc.dst,
        warp,
        h,
        w,
        confidence: Grid2::from_vec(h, w, conf),
    })
}

/// Load and fully validate a manifest; warp fields stay lazy.
pub fn load_manifest(path: &Path) -> Result<(ViewSet, Vec<WarpPairDesc>)> {
    let manifest = SceneManifest::load(path)?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let d = manifest.descriptor_dim;
    if d < 1 {
        return Err(Error::Manifest("descriptor_dim must be >= 1".into()));
    }

    let mut ids = HashSet::new();
    for v in &manifest.views {
        if !ids.insert(v.id) {
            return Err(Error::Manifest(format!("duplicate view id {}", v.id)));
        }
    }
    for (i, v) in manifest.views.iter().enumerate() {
        if v.id != i {
            return Err(Error::Manifest(format!(
                "view ids must be dense 0..N in order; position {i} has id {}",
                v.id
            )));
        }
    }

    let mut views = ViewSet {
        descriptor_dim: d,
        ..ViewSet::default()
    };
    for v in &manifest.views {
        if v.world_to_camera.len() != 16 {
            return Err(Error::Manifest(format!(
                "view {}: world_to_camera must have 16 entries",
                v.id
            )));
        }
        let w2c = Matrix4::from_row_slice(&v.world_to_camera);
        let cam = Camera::new(v.fx, v.fy, v.cx, v.cy, w2c, v.width, v.height);
        let cam_report = validate_camera(&cam, v.id);
        if !cam_report.is_empty() {
            return Err(Error::Manifest(format!(
                "view {}: {}",
                v.id, cam_report[0]
            )));
        }

        let mask_path = base.join(&v.mask_file);
        require_exists(&mask_path)?;
        let mask_t = read_tensor(&mask_path)?;
        if mask_t.shape != [v.height as u64, v.width as u64] {
            return Err(Error::Manifest(format!(
                "view {}: mask shape {:?} does not match image {}x{}",
                v.id, mask_t.shape, v.height, v.width
            )));
        }
        let label_map = Grid2::from_vec(v.height, v.width, mask_t.as_u16()?.to_vec());

        let emb_path = base.join(&v.embedding_file);
        require_exists(&emb_path)?;
        let emb_t = read_tensor(&emb_path)?;
        if emb_t.shape.len() != 2 || emb_t.shape[1] != d as u64 {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: emb_t.shape.last().copied().unwrap_or(0) as usize,
                context: format!("embedding file for view {}", v.id),
            });
        }
        let mask_set = MaskSet {
            view_id: v.id,
            label_map,
            embeddings: emb_t.as_f32()?.to_vec(),
            dim: d,
        };
        let ms_report = validate_mask_set(&mask_set);
        if !ms_report.is_empty() {
            return Err(Error::Manifest(format!("view {}: {}", v.id, ms_report[0])));
        }

        let color = match &v.color_file {
            Some(cf) => {
                let color_path = base.join(cf);
                require_exists(&color_path)?;
                let color_t = read_tensor(&color_path)?;
                if color_t.shape != [v.height as u64, v.width as u64, 3] {
                    return Err(Error::Manifest(format!(
                        "view {}: color shape {:?}, expected [{},{},3]",
                        v.id, color_t.shape, v.height, v.width
                    )));
                }
                Some(color_t.as_f32()?.to_vec())
            }
            None => None,
        };

        views.cameras.push(cam);
        views.masks.push(mask_set);
        views.colors.push(color);
    }

    let mut warp_descs = Vec::with_capacity(manifest.warps.len());
    for wp in &manifest.warps {
        if wp.src >= views.len() || wp.dst >= views.len() {
            return Err(Error::Manifest(format!(
                "warp pair ({}, {}) references unknown view",
                wp.src, wp.dst
            )));
        }
        let warp_path = base.join(&wp.warp_file);
        let conf_path = base.join(&wp.confidence_file);
        require_exists(&warp_path)?;
        require_exists(&conf_path)?;
        warp_descs.push(WarpPairDesc {
            src: wp.src,
            dst: wp.dst,
            warp_path,
            confidence_path: conf_path,
        });
    }
    Ok((views, warp_descs))
}

// ---------------------------------------------------------------------------
// Gaussian scene files

/// Write a Gaussian scene as a record file.
pub fn write_scene(path: &Path, scene: &GaussianScene) -> Result<()> {
    let n = scene.len() as u64;
    let mut positions = Vec::with_capacity(scene.len() * 3);
    let mut scales = Vec::with_capacity(scene.len() * 3);
    let mut rotations = Vec::with_capacity(scene.len() * 4);
    let mut opacities = Vec::with_capacity(scene.len());
    let mut colors = Vec::with_capacity(scene.len() * 3);
    for g in &scene.gaussians {
        positions.extend(g.position.iter().map(|&v| v as f32));
        scales.extend(g.scale.iter().map(|&v| v as f32));
        let q = g.rotation.as_ref();
        rotations.extend([q.w as f32, q.i as f32, q.j as f32, q.k as f32]);
        opacities.push(g.opacity as f32);
        colors.extend_from_slice(&g.color);
    }
    let mut records = vec![
        ("positions", Tensor::f32(vec![n, 3], positions)),
        ("scales", Tensor::f32(vec![n, 3], scales)),
        ("rotations", Tensor::f32(vec![n, 4], rotations)),
        ("opacities", Tensor::f32(vec![n], opacities)),
        ("colors", Tensor::f32(vec![n, 3], colors)),
    ];
    if let Some(desc) = &scene.descriptors {
        records.push((
            "descriptors",
            Tensor::f32(vec![n, scene.descriptor_dim as u64], desc.clone()),
        ));
        let labeled = scene
            .labeled
            .clone()
            .unwrap_or_else(|| vec![true; scene.len()]);
        records.push((
            "labeled",
            Tensor::u8(vec![n], labeled.iter().map(|&b| b as u8).collect()),
        ));
    }
    write_records(path, &records)
}

/// Read a Gaussian scene record file.
pub fn read_scene(path: &Path) -> Result<GaussianScene> {
    let records = read_records(path)?;
    let positions = find_record(&records, "positions", path)?;
    let n = positions.shape[0] as usize;
    let positions = positions.as_f32()?;
    let scales = find_record(&records, "scales", path)?.as_f32()?;
    let rotations = find_record(&records, "rotations", path)?.as_f32()?;
    let opacities = find_record(&records, "opacities", path)?.as_f32()?;
    let colors = find_record(&records, "colors", path)?.as_f32()?;
    let mut gaussians = Vec::with_capacity(n);
    for i in 0..n {
        let q = &rotations[i * 4..i * 4 + 4];
        gaussians.push(Gaussian {
            position: Vector3::new(
                positions[i * 3] as f64,
                positions[i * 3 + 1] as f64,
                positions[i * 3 + 2] as f64,
            ),
            scale: Vector3::new(
                scales[i * 3] as f64,
                scales[i * 3 + 1] as f64,
                scales[i * 3 + 2] as f64,
            ),
            rotation: UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                q[0] as f64,
                q[1] as f64,
                q[2] as f64,
                q[3] as f64,
            )),
            opacity: opacities[i] as f64,
            color: [colors[i * 3], colors[i * 3 + 1], colors[i * 3 + 2]],
        });
    }
    let (descriptors, descriptor_dim, labeled) =
        match records.iter().find(|(name, _)| name == "descriptors") {
            Some((_, t)) => {
                let dim = t.shape[1] as usize;
                let labeled = find_record(&records, "labeled", path)?
                    .as_u8()?
                    .iter()
                    .map(|&b| b != 0)
                    .collect();
                (Some(t.as_f32()?.to_vec()), dim, Some(labeled))
            }
            None => (None, 0, None),
        };
    Ok(GaussianScene {
        gaussians,
        descriptors,
        descriptor_dim,
        labeled,
    })
}
