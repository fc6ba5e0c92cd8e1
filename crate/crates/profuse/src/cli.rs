//! Pipeline orchestration and the `profuse` command-line front end.
//!
//! Stages run in a fixed order (synth → init → hits → cluster → register →
//! index); `run` skips a stage when its content stamp matches the current
//! config and all of its outputs are still present.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container_io::{
    load_manifest, load_warp, read_scene, read_tensor, write_scene, write_tensor, Tensor,
};
use crate::error::{Error, Result};
use crate::matchgraph::{build_graph, extract_proposals, read_proposals, write_proposals, ProposalSet};
use crate::pq_index::{encode, read_index, train, write_index};
use crate::query_eval::{
    activation_mask, default_tau_grid, grid_search_tau, mask_iou, metrics_report,
    select_gaussians, transfer_to_points, EvalPair, QueryEmbedding, TransferConfig,
};
use crate::register::register_features;
use crate::scene_model::{ClusterConfig, GaussianScene, Grid2, QueryConfig, RenderConfig, ViewSet, WarpField};
use crate::splat_renderer::{read_hits, render_hits, visibility_mask, write_hits, PixelHits};
use crate::synth::{generate, load_ground_truth, SynthSpec};
use crate::triangulate::{extract_seeds, init_gaussians, ExtractConfig, InitConfig};

/// Product-quantization stage parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PqParams {
    /// Subvector count; 0 picks D/8 when divisible, else D/4.
    pub m: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for PqParams {
    fn default() -> Self {
        Self {
            m: 0,
            iters: 25,
            seed: 0,
        }
    }
}

impl PqParams {
    pub fn resolve_m(&self, dim: usize) -> usize {
        if self.m > 0 {
            self.m
        } else if dim % 8 == 0 {
            dim / 8
        } else {
            dim / 4
        }
    }
}

/// Whole-pipeline configuration; unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub synth: SynthSpec,
    pub extract: ExtractConfig,
    pub init: InitConfig,
    pub render: RenderConfig,
    pub cluster: ClusterConfig,
    pub query: QueryConfig,
    pub transfer: TransferConfig,
    pub pq: PqParams,
    /// Accumulated-weight threshold for per-view visibility masks.
    pub vis_threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            extract: ExtractConfig::default(),
            init: InitConfig::default(),
            render: RenderConfig::default(),
            cluster: ClusterConfig::default(),
            query: QueryConfig::default(),
            transfer: TransferConfig::default(),
            pq: PqParams::default(),
            vis_threshold: 0.5,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.synth.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Artifact layout

pub struct Artifacts {
    pub root: PathBuf,
}

impl Artifacts {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("synth/manifest.json")
    }
    pub fn gt(&self) -> PathBuf {
        self.root.join("synth/gt.json")
    }
    pub fn scene(&self) -> PathBuf {
        self.root.join("scene.pf")
    }
    pub fn hits_dir(&self) -> PathBuf {
        self.root.join("hits")
    }
    pub fn hits(&self, view: usize) -> PathBuf {
        self.hits_dir().join(format!("hits_{view}.pf"))
    }
    pub fn proposals(&self) -> PathBuf {
        self.root.join("proposals.pf")
    }
    pub fn scene_sem(&self) -> PathBuf {
        self.root.join("scene_sem.pf")
    }
    pub fn index(&self) -> PathBuf {
        self.root.join("index.pf")
    }
    fn stamp(&self, stage: &str) -> PathBuf {
        self.root.join(".stamps").join(stage)
    }
}

// ---------------------------------------------------------------------------
// Shared loading helpers

/// Loads the view set plus every warp field keyed by (src, dst).
pub fn load_views_and_warps(manifest: &Path) -> Result<(ViewSet, HashMap<(usize, usize), WarpField>)> {
    let (views, descs) = load_manifest(manifest)?;
    let mut warps = HashMap::new();
    for d in &descs {
        let cam = &views.cameras[d.src];
        warps.insert((d.src, d.dst), load_warp(d, cam.height, cam.width)?);
    }
    Ok((views, warps))
}

pub fn load_all_hits(art_hits: impl Fn(usize) -> PathBuf, views: usize) -> Result<Vec<PixelHits>> {
    (0..views).map(|v| read_hits(&art_hits(v))).collect()
}

fn unordered_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((i, j));
        }
    }
    pairs
}

// ---------------------------------------------------------------------------
// Stage bodies (shared between `run` and the per-stage subcommands)

pub fn stage_init(
    views: &ViewSet,
    warps: &HashMap<(usize, usize), WarpField>,
    extract: &ExtractConfig,
    init: &InitConfig,
) -> Result<GaussianScene> {
    let warp_list: Vec<WarpField> = {
        let mut keys: Vec<&(usize, usize)> = warps.keys().collect();
        keys.sort();
        keys.into_iter().map(|k| warps[k].clone()).collect()
    };
    let (seeds, _stats) = extract_seeds(views, &warp_list, extract)?;
    init_gaussians(&seeds, init)
}

pub fn stage_hits(scene: &GaussianScene, views: &ViewSet, render: &RenderConfig) -> Vec<PixelHits> {
    views
        .cameras
        .iter()
        .map(|cam| render_hits(scene, cam, render))
        .collect()
}

pub fn stage_cluster(
    views: &ViewSet,
    warps: &HashMap<(usize, usize), WarpField>,
    hits: &[PixelHits],
    cluster: &ClusterConfig,
    vis_threshold: f64,
) -> Result<ProposalSet> {
    let vis: Vec<Grid2<bool>> = hits.iter().map(|h| visibility_mask(h, vis_threshold)).collect();
    let pairs = unordered_pairs(views.len());
    let edges = build_graph(views, warps, &vis, &pairs, cluster)?;
    Ok(extract_proposals(&edges, views, cluster))
}

pub fn stage_register(
    scene: &GaussianScene,
    views: &ViewSet,
    set: &ProposalSet,
    hits: &[PixelHits],
) -> GaussianScene {
    register_features(scene, views, set, hits, 1e-8)
}

pub fn stage_index(scene_sem: &GaussianScene, pq: &PqParams) -> Result<(crate::pq_index::PQCodebook, crate::pq_index::PQCodes)> {
    let d = scene_sem.descriptor_dim;
    let descriptors = scene_sem
        .descriptors
        .as_ref()
        .ok_or_else(|| Error::Config("scene has no registered descriptors".into()))?;
    let m = pq.resolve_m(d);
    let codebook = train(descriptors, scene_sem.len(), d, m, pq.iters, pq.seed)?;
    let codes = encode(&codebook, descriptors, scene_sem.len());
    Ok((codebook, codes))
}

// ---------------------------------------------------------------------------
// Full pipeline with stage skipping

#[derive(Debug, Default)]
pub struct PipelineReport {
    pub geometry: Duration,
    pub semantics: Duration,
    pub indexing: Duration,
    pub ran: Vec<String>,
    pub skipped: Vec<String>,
}

impl PipelineReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "geometry  {:8.3}s", self.geometry.as_secs_f64());
        let _ = writeln!(out, "semantics {:8.3}s", self.semantics.as_secs_f64());
        let _ = writeln!(out, "indexing  {:8.3}s", self.indexing.as_secs_f64());
        if !self.skipped.is_empty() {
            let _ = writeln!(out, "skipped: {}", self.skipped.join(", "));
        }
        out
    }
}

fn config_hash(cfg: &PipelineConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(&json);
    format!("{:x}", hasher.finalize())
}

fn stage_stamp(root: &Path, cfg_hash: &str, stage: &str, upstream: &str, inputs: &[PathBuf]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(cfg_hash.as_bytes());
    hasher.update(stage.as_bytes());
    hasher.update(upstream.as_bytes());
    for path in inputs {
        // Hash paths relative to the output root so two runs into different
        // directories produce identical stamps.
        let rel = path.strip_prefix(root).unwrap_or(path);
        hasher.update(rel.to_string_lossy().as_bytes());
        match fs::read(path) {
            Ok(bytes) => hasher.update(&bytes),
            Err(_) => hasher.update(b"<missing>"),
        }
    }
    format!("{:x}", hasher.finalize())
}

/// Every regular file under a directory, sorted for stable hashing.
fn dir_inputs(dir: &Path) -> Vec<PathBuf> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(entries) = fs::read_dir(&d) else { continue };
        for entry in entries.flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    files
}

fn stamp_matches(art: &Artifacts, stage: &str, want: &str, outputs: &[PathBuf]) -> bool {
    if !outputs.iter().all(|p| p.exists()) {
        return false;
    }
    fs::read_to_string(art.stamp(stage)).map(|s| s == want).unwrap_or(false)
}

fn write_stamp(art: &Artifacts, stage: &str, value: &str) -> Result<()> {
    let path = art.stamp(stage);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(&path, value).map_err(|e| Error::Io { path, source: e })
}

fn staged<T>(stage: &str, body: impl FnOnce() -> Result<T>) -> Result<T> {
    body().map_err(|e| Error::Stage {
        stage: stage.to_string(),
        source: Box::new(e),
    })
}

/// Runs every stage in order under `out_dir`, reusing artifacts whose stamp
/// still matches the config unless `force`.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: &Path, force: bool, verbose: bool) -> Result<PipelineReport> {
    let art = Artifacts::new(out_dir);
    fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let cfg_hash = config_hash(cfg);
    let mut report = PipelineReport::default();
    let mut upstream = String::new();

    let run_stage = |stage: &str,
                         inputs: &[PathBuf],
                         outputs: &[PathBuf],
                         report: &mut PipelineReport,
                         upstream: &mut String,
                         bucket: fn(&mut PipelineReport) -> &mut Duration,
                         body: &mut dyn FnMut() -> Result<()>|
     -> Result<()> {
        let want = stage_stamp(out_dir, &cfg_hash, stage, upstream, inputs);
        *upstream = want.clone();
        if !force && stamp_matches(&art, stage, &want, outputs) {
            if verbose {
                eprintln!("[{stage}] up to date, skipping");
            }
            report.skipped.push(stage.to_string());
            return Ok(());
        }
        if verbose {
            eprintln!("[{stage}] running");
        }
        let t0 = Instant::now();
        staged(stage, || body())?;
        *bucket(report) += t0.elapsed();
        report.ran.push(stage.to_string());
        write_stamp(&art, stage, &want)
    };

    run_stage(
        "synth",
        &[],
        &[art.manifest(), art.gt()],
        &mut report,
        &mut upstream,
        |r| &mut r.geometry,
        &mut || {
            generate(&cfg.synth, &art.root.join("synth")).map(|_| ())
        },
    )?;

    run_stage(
        "init",
        &dir_inputs(&art.root.join("synth")),
        &[art.scene()],
        &mut report,
        &mut upstream,
        |r| &mut r.geometry,
        &mut || {
            let (views, warps) = load_views_and_warps(&art.manifest())?;
            let scene = stage_init(&views, &warps, &cfg.extract, &cfg.init)?;
            write_scene(&art.scene(), &scene)
        },
    )?;

    run_stage(
        "hits",
        &{
            let mut inputs = dir_inputs(&art.root.join("synth"));
            inputs.push(art.scene());
            inputs
        },
        &{
            let n = cfg.synth.view_count;
            (0..n).map(|v| art.hits(v)).collect::<Vec<_>>()
        },
        &mut report,
        &mut upstream,
        |r| &mut r.geometry,
        &mut || {
            let (views, _) = load_views_and_warps(&art.manifest())?;
            let scene = read_scene(&art.scene())?;
            fs::create_dir_all(art.hits_dir()).map_err(|e| Error::Io {
                path: art.hits_dir(),
                source: e,
            })?;
            for (v, hits) in stage_hits(&scene, &views, &cfg.render).iter().enumerate() {
                write_hits(&art.hits(v), hits)?;
            }
            Ok(())
        },
    )?;

    run_stage(
        "cluster",
        &{
            let mut inputs = dir_inputs(&art.root.join("synth"));
            inputs.extend(dir_inputs(&art.hits_dir()));
            inputs
        },
        &[art.proposals()],
        &mut report,
        &mut upstream,
        |r| &mut r.semantics,
        &mut || {
            let (views, warps) = load_views_and_warps(&art.manifest())?;
            let hits = load_all_hits(|v| art.hits(v), views.len())?;
            let set = stage_cluster(&views, &warps, &hits, &cfg.cluster, cfg.vis_threshold)?;
            write_proposals(&art.proposals(), &set)
        },
    )?;

    run_stage(
        "register",
        &{
            let mut inputs = dir_inputs(&art.root.join("synth"));
            inputs.extend(dir_inputs(&art.hits_dir()));
            inputs.push(art.scene());
            inputs.push(art.proposals());
            inputs
        },
        &[art.scene_sem()],
        &mut report,
        &mut upstream,
        |r| &mut r.semantics,
        &mut || {
            let (views, _) = load_views_and_warps(&art.manifest())?;
            let scene = read_scene(&art.scene())?;
            let set = read_proposals(&art.proposals())?;
            let hits = load_all_hits(|v| art.hits(v), views.len())?;
            let sem = stage_register(&scene, &views, &set, &hits);
            write_scene(&art.scene_sem(), &sem)
        },
    )?;

    run_stage(
        "index",
        &[art.scene_sem()],
        &[art.index()],
        &mut report,
        &mut upstream,
        |r| &mut r.indexing,
        &mut || {
            let sem = read_scene(&art.scene_sem())?;
            let (codebook, codes) = stage_index(&sem, &cfg.pq)?;
            write_index(&art.index(), &codebook, &codes)
        },
    )?;

    Ok(report)
}

// ---------------------------------------------------------------------------
// Command line

#[derive(Parser, Debug)]
#[command(name = "profuse", about = "Semantic fusion for 3D Gaussian scenes", version)]
pub struct Cli {
    /// Pipeline configuration file (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker-thread cap; 0 leaves the pool at its default size.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Overrides the synthesis seed from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Rerun every stage even when stamps are current.
    #[arg(long, global = true)]
    pub force: bool,
    /// Per-stage progress on stderr.
    #[arg(long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct ManifestArg {
    /// Scene manifest produced by `synth` (or hand-written).
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene with ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Triangulate correspondence seeds into an initial Gaussian scene.
    Init {
        #[command(flatten)]
        manifest: ManifestArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render per-pixel top-K hit lists for every view.
    Hits {
        #[command(flatten)]
        manifest: ManifestArg,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Cluster per-view masks into cross-view proposals.
    Cluster {
        #[command(flatten)]
        manifest: ManifestArg,
        #[arg(long)]
        hits_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Register proposal descriptors onto Gaussians.
    Register {
        #[command(flatten)]
        manifest: ManifestArg,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        hits_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a product-quantization index over registered descriptors.
    Index {
        #[arg(long)]
        scene: PathBuf,
        /// Subvector count; 0 = automatic.
        #[arg(long, default_value_t = 0)]
        m: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer one embedding query as a per-view activation mask.
    Query {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        embedding: PathBuf,
        #[arg(long)]
        view: usize,
        #[arg(long)]
        hits_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Object-selection metrics against synthetic ground truth.
    EvalSelect {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        hits_dir: PathBuf,
    },
    /// Point-cloud label transfer, optionally scored against true labels.
    EvalPoints {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        classes: PathBuf,
        #[arg(long)]
        gt_labels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage under one output directory.
    Run {
        #[arg(long)]
        out: PathBuf,
    },
}

fn hits_path(dir: &Path, view: usize) -> PathBuf {
    dir.join(format!("hits_{view}.pf"))
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.synth.seed = seed;
    }
    Ok(cfg)
}

/// Dispatches a parsed command line; the error (if any) decides the exit
/// code in `main`.
pub fn dispatch(cli: &Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let cfg = load_config(cli)?;

    match &cli.command {
        Command::Synth { out } => {
            let (manifest, gt) = generate(&cfg.synth, out)?;
            println!("manifest: {}", manifest.display());
            println!("objects: {}  retries: {}", gt.objects.len(), gt.retries);
        }
        Command::Init { manifest, out } => {
            let (views, warps) = load_views_and_warps(&manifest.manifest)?;
            let scene = stage_init(&views, &warps, &cfg.extract, &cfg.init)?;
            write_scene(out, &scene)?;
            println!("gaussians: {}", scene.len());
        }
        Command::Hits {
            manifest,
            scene,
            out_dir,
        } => {
            let (views, _) = load_views_and_warps(&manifest.manifest)?;
            let scene = read_scene(scene)?;
            fs::create_dir_all(out_dir).map_err(|e| Error::Io {
                path: out_dir.clone(),
                source: e,
            })?;
            for (v, hits) in stage_hits(&scene, &views, &cfg.render).iter().enumerate() {
                write_hits(&hits_path(out_dir, v), hits)?;
            }
            println!("views rendered: {}", views.len());
        }
        Command::Cluster {
            manifest,
            hits_dir,
            out,
        } => {
            let (views, warps) = load_views_and_warps(&manifest.manifest)?;
            let hits = load_all_hits(|v| hits_path(hits_dir, v), views.len())?;
            let set = stage_cluster(&views, &warps, &hits, &cfg.cluster, cfg.vis_threshold)?;
            write_proposals(out, &set)?;
            println!("proposals: {}", set.proposals.len());
        }
        Command::Register {
            manifest,
            scene,
            proposals,
            hits_dir,
            out,
        } => {
            let (views, _) = load_views_and_warps(&manifest.manifest)?;
            let scene = read_scene(scene)?;
            let set = read_proposals(proposals)?;
            let hits = load_all_hits(|v| hits_path(hits_dir, v), views.len())?;
            let sem = stage_register(&scene, &views, &set, &hits);
            let labeled = sem.labeled.as_ref().map_or(0, |l| l.iter().filter(|&&b| b).count());
            write_scene(out, &sem)?;
            println!("labeled gaussians: {labeled}/{}", sem.len());
        }
        Command::Index { scene, m, out } => {
            let sem = read_scene(scene)?;
            let mut pq = cfg.pq.clone();
            if *m > 0 {
                pq.m = *m;
            }
            let (codebook, codes) = stage_index(&sem, &pq)?;
            write_index(out, &codebook, &codes)?;
            println!("index: m={} k={} n={}", codebook.m, codebook.k, codes.n);
        }
        Command::Query {
            scene,
            index,
            embedding,
            view,
            hits_dir,
            out,
        } => {
            let sem = read_scene(scene)?;
            let (codebook, codes) = read_index(index)?;
            let q = QueryEmbedding::new(read_tensor(embedding)?.as_f32()?.to_vec())?;
            let hits = read_hits(&hits_path(hits_dir, *view))?;
            let active = select_gaussians(&sem, &codebook, &codes, &q, &cfg.query);
            let flags = active.indicator(sem.len());
            let mask = activation_mask(&flags, &hits, cfg.query.gamma);
            let data: Vec<u8> = mask.data.iter().map(|&b| b as u8).collect();
            write_tensor(out, &Tensor::u8(vec![mask.h as u64, mask.w as u64], data))?;
            println!(
                "active gaussians: {}  mask pixels: {}",
                active.entries.len(),
                mask.data.iter().filter(|&&b| b).count()
            );
        }
        Command::EvalSelect {
            scene,
            gt,
            hits_dir,
        } => {
            let sem = read_scene(scene)?;
            let gt = load_ground_truth(gt)?;
            let views = gt.object_ids.len();
            let hits = load_all_hits(|v| hits_path(hits_dir, v), views)?;

            let queries: Vec<QueryEmbedding> = (0..gt.objects.len())
                .map(|o| QueryEmbedding::new(gt.object_embedding(o).to_vec()))
                .collect::<Result<_>>()?;
            let mut pairs = Vec::new();
            for (o, q) in queries.iter().enumerate() {
                for v in 0..views {
                    pairs.push((q, v, gt.silhouette(v, o)));
                }
            }
            let pair_refs: Vec<EvalPair<'_>> = pairs
                .iter()
                .map(|(q, v, sil)| EvalPair {
                    query: q,
                    hits: &hits[*v],
                    gt: sil,
                })
                .collect();
            let (tau, miou) = grid_search_tau(&sem, &pair_refs, &default_tau_grid(), cfg.query.gamma)?;
            let ious: Vec<f64> = pair_refs
                .iter()
                .map(|p| {
                    let active = crate::query_eval::select_gaussians_exact(&sem, p.query, tau)
                        .indicator(sem.len());
                    mask_iou(&activation_mask(&active, p.hits, cfg.query.gamma), p.gt)
                })
                .collect();
            println!("tau: {tau:.3} (grid-searched, mean IoU {miou:.4})");
            print!("{}", metrics_report(&ious, 0.25));
        }
        Command::EvalPoints {
            scene,
            points,
            classes,
            gt_labels,
            out,
        } => {
            let sem = read_scene(scene)?;
            let pts_t = read_tensor(points)?;
            let pts_f = pts_t.as_f32()?;
            let pts: Vec<nalgebra::Point3<f64>> = pts_f
                .chunks_exact(3)
                .map(|c| nalgebra::Point3::new(c[0] as f64, c[1] as f64, c[2] as f64))
                .collect();
            let cls_t = read_tensor(classes)?;
            let (c, d) = (cls_t.shape[0] as usize, cls_t.shape[1] as usize);
            let cls_f = cls_t.as_f32()?;
            let class_rows: Vec<Vec<f32>> = (0..c).map(|i| cls_f[i * d..(i + 1) * d].to_vec()).collect();

            let result = transfer_to_points(&sem, &pts, &class_rows, &cfg.transfer)?;
            let labeled = result.labels.iter().filter(|l| l.is_some()).count();
            println!("labeled vertices: {labeled}/{}", pts.len());
            if let Some(gt_path) = gt_labels {
                let gt = read_tensor(gt_path)?.as_u16()?.to_vec();
                let correct = result
                    .labels
                    .iter()
                    .zip(&gt)
                    .filter(|(l, &g)| **l == Some(g as usize))
                    .count();
                println!(
                    "accuracy: {:.4} ({correct}/{} vertices; unlabeled count as errors)",
                    correct as f64 / pts.len() as f64,
                    pts.len()
                );
            }
            if let Some(out) = out {
                let labels: Vec<u16> = result
                    .labels
                    .iter()
                    .map(|l| l.map(|v| v as u16 + 1).unwrap_or(0))
                    .collect();
                write_tensor(out, &Tensor::u16(vec![labels.len() as u64], labels))?;
            }
        }
        Command::Run { out } => {
            let report = run_pipeline(&cfg, out, cli.force, cli.verbose)?;
            print!("{}", report.render());
        }
    }
    Ok(())
}

/// Maps an error to the documented exit code: 2 for configuration/input
/// problems, 3 for stage failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Manifest(_) => 2,
        _ => 3,
    }
}
