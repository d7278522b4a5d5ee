//! End-to-end forward pass: features → depth → lifted points → voxel grid →
//! residual refinement → one Gaussian per occupied voxel.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    build_cost_volume, extract_features, regress_depth, sample_depth_hypotheses, upsample_depth, DepthSpacing,
    FeatureExtractorSpec, FeatureKind, FeatureMap,
};
use crate::gaussian::{
    decode_gaussians, ColorCopyConstants, GaussianActivation, GaussianHead, GaussianSet, ParamLayout,
};
use crate::geometry::{CameraView, DepthMap};
use crate::metrics::{combined_loss, compute_image_metrics, ImageMetrics, LossConfig};
use crate::render::{render_with, RenderOptions, DEFAULT_TILE};
use crate::sparse::{residual_refine, Activation, SparseTensor};
use crate::unet::{SparseUNet, UNetSpec};
use crate::voxel::{lift_views, voxelize};
use crate::weights::WeightBlob;

/// Version of the JSON configuration layout.
pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    #[serde(default = "default_feature_kind")]
    pub kind: FeatureKind,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_scale")]
    pub scale: usize,
    #[serde(default)]
    pub seed: u64,
    /// One feature file per input view, for `external-file`.
    #[serde(default)]
    pub files: Vec<PathBuf>,
}

fn default_feature_kind() -> FeatureKind {
    FeatureKind::GradientDescriptor
}
fn default_channels() -> usize {
    8
}
fn default_scale() -> usize {
    1
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            kind: default_feature_kind(),
            channels: default_channels(),
            scale: default_scale(),
            seed: 0,
            files: Vec::new(),
        }
    }
}

impl FeatureConfig {
    pub fn extractor(&self) -> FeatureExtractorSpec {
        FeatureExtractorSpec {
            kind: self.kind.clone(),
            channels: self.channels,
            scale: self.scale,
            seed: self.seed,
            files: self.files.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthConfig {
    #[serde(default = "default_hypotheses")]
    pub num_hypotheses: usize,
    #[serde(default)]
    pub spacing: DepthSpacing,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_near")]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
    /// Skip estimation and lift with the views' ground-truth depth.
    #[serde(default)]
    pub use_gt: bool,
    /// Neighbor views matched against each reference, nearest camera first.
    #[serde(default = "default_neighbors")]
    pub neighbors: usize,
}

fn default_hypotheses() -> usize {
    32
}
fn default_temperature() -> f64 {
    0.05
}
fn default_near() -> f64 {
    0.5
}
fn default_far() -> f64 {
    10.0
}
fn default_neighbors() -> usize {
    2
}

impl Default for DepthConfig {
    fn default() -> Self {
        DepthConfig {
            num_hypotheses: default_hypotheses(),
            spacing: DepthSpacing::default(),
            temperature: default_temperature(),
            near: default_near(),
            far: default_far(),
            use_gt: false,
            neighbors: default_neighbors(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelConfig {
    #[serde(default = "default_voxel_size")]
    pub size: f64,
}

fn default_voxel_size() -> f64 {
    0.1
}

impl Default for VoxelConfig {
    fn default() -> Self {
        VoxelConfig {
            size: default_voxel_size(),
        }
    }
}

/// Refinement network. Without `weights_path` or `seed` the weights are
/// zero, which makes the refinement an exact identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Channel width per level; defaults to `[C, 2C, 4C]`.
    #[serde(default)]
    pub levels: Option<Vec<usize>>,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub weights_path: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_true() -> bool {
    true
}
fn default_blocks() -> usize {
    2
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            enabled: true,
            levels: None,
            blocks: default_blocks(),
            activation: Activation::Relu,
            weights_path: None,
            seed: None,
        }
    }
}

impl UNetConfig {
    pub fn spec(&self, channels: usize) -> UNetSpec {
        let mut spec = UNetSpec::default_for(channels);
        if let Some(levels) = &self.levels {
            spec.levels = levels.clone();
        }
        spec.blocks_per_level = self.blocks;
        spec.activation = self.activation;
        spec
    }

    pub fn weights(&self, spec: &UNetSpec) -> Result<WeightBlob> {
        let layout = spec.weight_layout();
        match (&self.weights_path, self.seed) {
            (Some(_), Some(_)) => Err(Error::Config("unet: give weights_path or seed, not both".into())),
            (Some(path), None) => WeightBlob::read(path),
            (None, Some(seed)) => Ok(WeightBlob::kaiming_uniform(&layout, seed)),
            (None, None) => Ok(WeightBlob::zeros(&layout)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorCopyConfig {
    #[serde(default = "default_offset_logit")]
    pub offset_logit: f32,
    #[serde(default = "default_opacity_logit")]
    pub opacity_logit: f32,
    #[serde(default = "default_log_scale")]
    pub log_scale: f32,
}

fn default_offset_logit() -> f32 {
    ColorCopyConstants::default().offset_logit
}
fn default_opacity_logit() -> f32 {
    ColorCopyConstants::default().opacity_logit
}
fn default_log_scale() -> f32 {
    ColorCopyConstants::default().log_scale
}

impl Default for ColorCopyConfig {
    fn default() -> Self {
        ColorCopyConfig {
            offset_logit: default_offset_logit(),
            opacity_logit: default_opacity_logit(),
            log_scale: default_log_scale(),
        }
    }
}

/// Gaussian head. Without `weights_path` or `seed` the color-copy head is
/// used: feature channels 0..3 become the base color, the rest are constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    #[serde(default)]
    pub sh_degree: usize,
    #[serde(default = "default_multiplier")]
    pub offset_radius_multiplier: f64,
    #[serde(default)]
    pub symmetric_offset: bool,
    #[serde(default)]
    pub weights_path: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub color_copy: ColorCopyConfig,
}

fn default_multiplier() -> f64 {
    3.0
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            sh_degree: 0,
            offset_radius_multiplier: default_multiplier(),
            symmetric_offset: false,
            weights_path: None,
            seed: None,
            color_copy: ColorCopyConfig::default(),
        }
    }
}

impl HeadConfig {
    pub fn weights(&self, channels: usize, layout: ParamLayout) -> Result<WeightBlob> {
        match (&self.weights_path, self.seed) {
            (Some(_), Some(_)) => Err(Error::Config("head: give weights_path or seed, not both".into())),
            (Some(path), None) => WeightBlob::read(path),
            (None, Some(seed)) => Ok(WeightBlob::kaiming_uniform(
                &GaussianHead::weight_layout(channels, layout),
                seed,
            )),
            (None, None) => {
                let c = self.color_copy;
                GaussianHead::color_copy_blob(
                    channels,
                    layout,
                    &ColorCopyConstants {
                        offset_logit: c.offset_logit,
                        opacity_logit: c.opacity_logit,
                        log_scale: c.log_scale,
                    },
                )
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    #[serde(default = "default_tile")]
    pub tile: usize,
    #[serde(default)]
    pub bg: [f64; 3],
}

fn default_tile() -> usize {
    DEFAULT_TILE
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            tile: DEFAULT_TILE,
            bg: [0.0; 3],
        }
    }
}

impl RenderConfig {
    pub fn options(&self) -> RenderOptions {
        RenderOptions {
            tile: self.tile,
            background: self.bg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub feature: FeatureConfig,
    #[serde(default)]
    pub depth: DepthConfig,
    #[serde(default)]
    pub voxel: VoxelConfig,
    #[serde(default)]
    pub unet: UNetConfig,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub render: RenderConfig,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.feature.extractor().validate()?;
        let d = &self.depth;
        if !d.use_gt {
            if d.num_hypotheses == 0 {
                return Err(Error::Config("depth.num_hypotheses must be ≥1".into()));
            }
            if !(d.near > 0.0 && d.near < d.far && d.far.is_finite()) {
                return Err(Error::Config(format!(
                    "need 0 < depth.near < depth.far, got {} / {}",
                    d.near, d.far
                )));
            }
            if !(d.temperature > 0.0) {
                return Err(Error::Config("depth.temperature must be positive".into()));
            }
            if d.neighbors == 0 {
                return Err(Error::Config("depth.neighbors must be ≥1".into()));
            }
        }
        if !(self.voxel.size > 0.0 && self.voxel.size.is_finite()) {
            return Err(Error::Config(format!(
                "voxel.size must be positive, got {}",
                self.voxel.size
            )));
        }
        if self.unet.enabled {
            self.unet.spec(self.feature.channels).validate()?;
        }
        ParamLayout::new(self.head.sh_degree).map_err(|e| Error::Config(e.to_string()))?;
        GaussianActivation::new(
            self.voxel.size,
            self.head.offset_radius_multiplier,
            self.head.symmetric_offset,
        )?;
        if self.loss.perceptual {
            return Err(Error::Config("loss.perceptual is not available in this engine".into()));
        }
        if self.render.tile == 0 {
            return Err(Error::Config("render.tile must be ≥1".into()));
        }
        Ok(())
    }
}

/// Wall-clock seconds per stage. Kept out of the serialized diagnostics so
/// those stay byte-identical across runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub stages: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub input_views: usize,
    pub width: usize,
    pub height: usize,
    pub depth_source: String,
    /// Lifted points `M`.
    pub points: usize,
    pub occupied_voxels: usize,
    pub gaussians: usize,
    /// Gaussians per input view.
    pub pgs: f64,
    pub voxel_size: f64,
    pub decoder_enabled: bool,
    #[serde(skip)]
    pub timings: StageTimings,
}

/// Everything a run produces, including the intermediate depth maps.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub gaussians: GaussianSet,
    pub diagnostics: Diagnostics,
    pub depths: Vec<DepthMap>,
}

fn stage<T>(name: &'static str, timings: &mut StageTimings, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| e.in_stage(name))?;
    timings.stages.push((name.to_string(), start.elapsed().as_secs_f64()));
    Ok(out)
}

/// Up to `k` other views ordered by camera-center distance, then index.
fn nearest_views(views: &[CameraView], r: usize, k: usize) -> Vec<usize> {
    let c = views[r].camera.center();
    let mut others: Vec<(f64, usize)> = (0..views.len())
        .filter(|&i| i != r)
        .map(|i| ((views[i].camera.center() - c).norm(), i))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    others.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Plane-sweep depth per view. Matching runs on per-cell normalized copies of
/// the features so scores compare direction, not brightness.
fn estimate_depths(views: &[CameraView], features: &[FeatureMap], cfg: &DepthConfig) -> Result<Vec<DepthMap>> {
    let hyps = sample_depth_hypotheses(cfg.near, cfg.far, cfg.num_hypotheses, cfg.spacing)?;
    let features: Vec<FeatureMap> = features.iter().map(FeatureMap::normalized).collect();
    (0..views.len())
        .map(|r| {
            let neighbors: Vec<_> = nearest_views(views, r, cfg.neighbors)
                .into_iter()
                .map(|i| (&features[i], &views[i].camera))
                .collect();
            let cv = build_cost_volume(&features[r], &neighbors, &views[r].camera, &hyps)?;
            let coarse = regress_depth(&cv, cfg.temperature)?;
            upsample_depth(&coarse, views[r].camera.width(), views[r].camera.height())
        })
        .collect()
}

fn check_views(views: &[CameraView], cfg: &PipelineConfig) -> Result<()> {
    let min = if cfg.depth.use_gt { 1 } else { 2 };
    if views.len() < min {
        return Err(Error::InvalidInput(format!(
            "pipeline needs at least {min} views, got {}",
            views.len()
        )));
    }
    let (w, h) = (views[0].camera.width(), views[0].camera.height());
    for (i, v) in views.iter().enumerate() {
        v.validate()?;
        if v.camera.width() != w || v.camera.height() != h {
            return Err(Error::InvalidInput(format!("view {i} is not {w}x{h}")));
        }
        if cfg.depth.use_gt && v.gt_depth.is_none() {
            return Err(Error::InvalidInput(format!(
                "depth.use_gt is set but view {i} has no depth"
            )));
        }
    }
    Ok(())
}

pub fn run_pipeline(views: &[CameraView], cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    check_views(views, cfg).map_err(|e| e.in_stage("input"))?;
    let mut t = StageTimings::default();
    let extractor = cfg.feature.extractor();

    let features: Vec<FeatureMap> = stage("features", &mut t, || {
        views
            .iter()
            .enumerate()
            .map(|(i, v)| extract_features(v, i, &extractor))
            .collect()
    })?;
    let depths = if cfg.depth.use_gt {
        views.iter().map(|v| v.gt_depth.clone().expect("checked")).collect()
    } else {
        stage("depth", &mut t, || estimate_depths(views, &features, &cfg.depth))?
    };
    let cloud = stage("lift", &mut t, || lift_views(views, &features, &depths))?;
    let grid = stage("voxelize", &mut t, || voxelize(&cloud, cfg.voxel.size))?;
    let v = SparseTensor::from_grid(&grid);
    let refined = if cfg.unet.enabled && !v.is_empty() {
        stage("refine", &mut t, || {
            let spec = cfg.unet.spec(v.channels);
            let net = SparseUNet::new(spec.clone(), &cfg.unet.weights(&spec)?)?;
            residual_refine(&v, &net.forward(&v)?)
        })?
    } else {
        v
    };
    let gaussians = stage("decode", &mut t, || {
        let layout = ParamLayout::new(cfg.head.sh_degree)?;
        let blob = cfg.head.weights(refined.channels, layout)?;
        let raw = GaussianHead::from_blob(refined.channels, layout, &blob)?.decode(&refined)?;
        let act = GaussianActivation::new(
            cfg.voxel.size,
            cfg.head.offset_radius_multiplier,
            cfg.head.symmetric_offset,
        )?;
        Ok(decode_gaussians(&raw, &act))
    })?;

    let diagnostics = Diagnostics {
        input_views: views.len(),
        width: views[0].camera.width(),
        height: views[0].camera.height(),
        depth_source: if cfg.depth.use_gt { "ground-truth" } else { "estimated" }.into(),
        points: cloud.len(),
        occupied_voxels: grid.len(),
        gaussians: gaussians.len(),
        pgs: gaussians.len() as f64 / views.len() as f64,
        voxel_size: cfg.voxel.size,
        decoder_enabled: cfg.unet.enabled,
        timings: t,
    };
    Ok(PipelineOutput {
        gaussians,
        diagnostics,
        depths,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub index: usize,
    #[serde(flatten)]
    pub metrics: ImageMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub targets: Vec<TargetMetrics>,
    pub mean: ImageMetrics,
    pub loss: f64,
    pub gaussians: usize,
    /// Present when the number of input views is known.
    pub pgs: Option<f64>,
}

impl EvalReport {
    /// Fixed-width text table, one row per target plus the mean.
    pub fn table(&self) -> String {
        let mut s = format!("{:>8} {:>12} {:>9} {:>7}\n", "target", "mse", "psnr", "ssim");
        let row =
            |name: &str, m: &ImageMetrics| format!("{name:>8} {:>12.6e} {:>9.3} {:>7.4}\n", m.mse, m.psnr, m.ssim);
        for t in &self.targets {
            s += &row(&t.index.to_string(), &t.metrics);
        }
        s += &row("mean", &self.mean);
        s += &format!("gaussians {}", self.gaussians);
        if let Some(pgs) = self.pgs {
            s += &format!("  pgs {pgs:.2}");
        }
        s.push('\n');
        s
    }
}

/// Renders `set` from every target camera and scores it against the target image.
pub fn evaluate(
    set: &GaussianSet,
    targets: &[CameraView],
    input_views: Option<usize>,
    render: &RenderConfig,
    loss: &LossConfig,
) -> Result<EvalReport> {
    if targets.is_empty() {
        return Err(Error::InvalidInput("evaluation needs at least one target view".into()));
    }
    let opts = render.options();
    let renders: Vec<_> = targets
        .iter()
        .map(|t| render_with(set, &t.camera, &opts).image.rgb)
        .collect();
    let per: Vec<TargetMetrics> = renders
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(index, (r, t))| {
            Ok(TargetMetrics {
                index,
                metrics: compute_image_metrics(r, &t.image)?,
            })
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| per.iter().map(|t| f(&t.metrics)).sum::<f64>() / n;
    let refs: Vec<_> = targets.iter().map(|t| t.image.clone()).collect();
    Ok(EvalReport {
        mean: ImageMetrics {
            mse: mean(|m| m.mse),
            psnr: mean(|m| m.psnr),
            ssim: mean(|m| m.ssim),
        },
        loss: combined_loss(&renders, &refs, loss)?,
        gaussians: set.len(),
        pgs: input_views.filter(|&n| n > 0).map(|n| set.len() as f64 / n as f64),
        targets: per,
    })
}
