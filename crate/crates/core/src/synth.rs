//! Analytic multi-view scenes with exact ground-truth depth.
//!
//! Plane and sphere scenes are ray-cast per pixel center against a seeded
//! procedural 3D texture. The `gaussian-garden` scene is a random ground-truth
//! Gaussian set rendered with the splatting rasterizer; its depth is the
//! blend-weighted splat depth wherever the accumulated alpha exceeds ½.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bytes::Reader;
use crate::error::{Error, Result};
use crate::gaussian::{export_ply, Gaussian3D, GaussianSet, SH_C0};
use crate::geometry::{Camera, CameraFile, CameraView, DepthMap, Extrinsics, Intrinsics};
use crate::image::Image;
use crate::render::{render_with, RenderOptions};
use crate::voxel::VoxelKey;

const DEPTH_MAGIC: &[u8; 4] = b"VSDP";
/// Minimum accumulated alpha for a garden pixel to carry ground-truth depth.
const GARDEN_DEPTH_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    TexturedWall,
    TwoPlanes,
    Sphere,
    GaussianGarden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraPose {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    #[serde(default = "default_down")]
    pub down: [f64; 3],
}

fn default_down() -> [f64; 3] {
    [0.0, 1.0, 0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub kind: SceneKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_size")]
    pub width: usize,
    #[serde(default = "default_size")]
    pub height: usize,
    /// Focal length in pixels (fx = fy); the principal point is the image center.
    #[serde(default = "default_focal")]
    pub focal: f64,
    /// Depth of the main surface along +z.
    #[serde(default = "default_depth")]
    pub depth: f64,
    #[serde(default = "default_near")]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
    /// Explicit rig; when empty, `rig_count` cameras spaced `rig_baseline`
    /// apart along x look straight down +z.
    #[serde(default)]
    pub cameras: Vec<CameraPose>,
    #[serde(default = "default_rig_count")]
    pub rig_count: usize,
    #[serde(default = "default_baseline")]
    pub rig_baseline: f64,
}

fn default_size() -> usize {
    64
}
fn default_focal() -> f64 {
    64.0
}
fn default_depth() -> f64 {
    2.0
}
fn default_near() -> f64 {
    0.5
}
fn default_far() -> f64 {
    8.0
}
fn default_rig_count() -> usize {
    4
}
fn default_baseline() -> f64 {
    0.3
}

impl SceneSpec {
    pub fn new(kind: SceneKind, seed: u64) -> Self {
        SceneSpec {
            kind,
            seed,
            width: default_size(),
            height: default_size(),
            focal: default_focal(),
            depth: default_depth(),
            near: default_near(),
            far: default_far(),
            cameras: Vec::new(),
            rig_count: default_rig_count(),
            rig_baseline: default_baseline(),
        }
    }

    pub fn poses(&self) -> Vec<CameraPose> {
        if !self.cameras.is_empty() {
            return self.cameras.clone();
        }
        let n = self.rig_count;
        (0..n)
            .map(|i| {
                let x = (i as f64 - (n as f64 - 1.0) / 2.0) * self.rig_baseline;
                CameraPose {
                    eye: [x, 0.0, 0.0],
                    target: [x, 0.0, self.depth],
                    down: default_down(),
                }
            })
            .collect()
    }

    pub fn build_cameras(&self) -> Result<Vec<Camera>> {
        let k = Intrinsics::new(
            self.focal,
            self.focal,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height,
        )
        .map_err(|e| Error::Spec(e.to_string()))?;
        self.poses()
            .iter()
            .map(|p| {
                Extrinsics::look_at(Vector3::from(p.eye), Vector3::from(p.target), Vector3::from(p.down))
                    .map(|e| Camera::new(k, e))
                    .map_err(|e| Error::Spec(e.to_string()))
            })
            .collect()
    }

    fn validate(&self, cameras: &[Camera]) -> Result<()> {
        if cameras.len() < 2 {
            return Err(Error::Spec("a scene needs at least two cameras".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Spec(format!(
                "need 0 < near < far, got {} / {}",
                self.near, self.far
            )));
        }
        if !(self.depth > 0.0) {
            return Err(Error::Spec("scene depth must be positive".into()));
        }
        let anchor = Vector3::new(0.0, 0.0, self.depth);
        for (i, cam) in cameras.iter().enumerate() {
            let z = cam.extrinsics.world_to_camera(&anchor).z;
            if z <= self.near {
                return Err(Error::Spec(format!(
                    "scene geometry is behind or too close to camera {i} (z = {z})"
                )));
            }
        }
        Ok(())
    }
}

/// Sum of seeded sinusoids, one set per color channel, in `[0, 1]`.
#[derive(Debug, Clone)]
struct Texture {
    waves: [Vec<(Vector3<f64>, f64, f64)>; 3],
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, waves: usize, freq: (f64, f64)) -> Self {
        let mut channel = || {
            (0..waves)
                .map(|_| {
                    let dir = Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-0.3..0.3),
                    );
                    let k = dir.normalize() * rng.gen_range(freq.0..freq.1);
                    (k, rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.3..1.0))
                })
                .collect::<Vec<_>>()
        };
        Texture {
            waves: [channel(), channel(), channel()],
        }
    }

    fn sample(&self, p: &Vector3<f64>) -> [f64; 3] {
        let mut rgb = [0.0; 3];
        for (c, waves) in self.waves.iter().enumerate() {
            let total: f64 = waves.iter().map(|w| w.2).sum();
            let s: f64 = waves.iter().map(|(k, phase, amp)| amp * (k.dot(p) + phase).sin()).sum();
            rgb[c] = (0.5 + 0.45 * s / total).clamp(0.0, 1.0);
        }
        rgb
    }
}

/// Analytic surfaces: z-planes (optionally bounded by `x_max`) and spheres.
enum Surface {
    Plane { z: f64, x_max: f64 },
    Sphere { center: Vector3<f64>, radius: f64 },
}

impl Surface {
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match self {
            Surface::Plane { z, x_max } => {
                if dir.z.abs() < 1e-12 {
                    return None;
                }
                let t = (z - origin.z) / dir.z;
                (t > 0.0 && origin.x + t * dir.x <= *x_max).then_some(t)
            }
            Surface::Sphere { center, radius } => {
                let oc = origin - center;
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let a = dir.norm_squared();
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / a;
                (t > 0.0).then_some(t)
            }
        }
    }
}

/// Synthesized views plus the generating Gaussians for garden scenes.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub views: Vec<CameraView>,
    pub ground_truth: Option<GaussianSet>,
}

pub fn synthesize(spec: &SceneSpec) -> Result<SynthScene> {
    let cameras = spec.build_cameras()?;
    spec.validate(&cameras)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.kind {
        SceneKind::GaussianGarden => synthesize_garden(spec, &cameras, &mut rng),
        kind => {
            let texture = Texture::new(&mut rng, 6, (3.0, 20.0));
            let d = spec.depth;
            let surfaces = match kind {
                SceneKind::TexturedWall => vec![Surface::Plane {
                    z: d,
                    x_max: f64::INFINITY,
                }],
                SceneKind::TwoPlanes => vec![
                    Surface::Plane {
                        z: 0.75 * d,
                        x_max: 0.0,
                    },
                    Surface::Plane {
                        z: 1.5 * d,
                        x_max: f64::INFINITY,
                    },
                ],
                SceneKind::Sphere => vec![
                    Surface::Sphere {
                        center: Vector3::new(0.0, 0.0, d),
                        radius: 0.3 * d,
                    },
                    Surface::Plane {
                        z: 1.6 * d,
                        x_max: f64::INFINITY,
                    },
                ],
                SceneKind::GaussianGarden => unreachable!(),
            };
            let views = cameras
                .iter()
                .map(|cam| raycast_view(cam, &surfaces, &texture))
                .collect::<Result<_>>()?;
            Ok(SynthScene {
                views,
                ground_truth: None,
            })
        }
    }
}

fn raycast_view(cam: &Camera, surfaces: &[Surface], texture: &Texture) -> Result<CameraView> {
    let (w, h) = (cam.width(), cam.height());
    let k = &cam.intrinsics;
    let origin = cam.center();
    let pixels: Vec<([f64; 3], Option<f64>)> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (u, v) = ((i % w) as f64, (i / w) as f64);
            let dir_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
            let dir = cam.extrinsics.rotation * dir_cam;
            let hit = surfaces
                .iter()
                .filter_map(|s| s.intersect(&origin, &dir))
                .min_by(f64::total_cmp);
            match hit {
                // dir_cam has unit z, so the ray parameter is the z-depth
                Some(t) => (texture.sample(&(origin + dir * t)), Some(t)),
                None => ([0.0; 3], None),
            }
        })
        .collect();
    let image = Image::new(w, h, pixels.iter().flat_map(|p| p.0).collect())?;
    let depth = DepthMap::new(
        w,
        h,
        pixels.iter().map(|p| p.1.unwrap_or(0.0)).collect(),
        pixels.iter().map(|p| p.1.is_some()).collect(),
    )?;
    CameraView::new(image, *cam, Some(depth))
}

fn garden_gaussians(spec: &SceneSpec, cameras: &[Camera], rng: &mut ChaCha8Rng) -> GaussianSet {
    let texture = Texture::new(rng, 4, (1.0, 4.0));
    let d = spec.depth;
    let max_off = cameras
        .iter()
        .map(|c| c.center().x.abs().max(c.center().y.abs()))
        .fold(0.0, f64::max);
    let half = d * (spec.width.max(spec.height) as f64 / 2.0) / spec.focal + max_off + 0.3 * d;
    let spacing = 0.04 * d;
    let n = (2.0 * half / spacing).ceil() as i32;
    let sh_of = |rgb: [f64; 3]| rgb.iter().map(|c| (c - 0.5) / SH_C0).collect::<Vec<_>>();
    let mut set = GaussianSet::new(0);
    let mut id = 0;
    for iy in 0..=n {
        for ix in 0..=n {
            let center = Vector3::new(
                -half + ix as f64 * spacing + rng.gen_range(-0.2..0.2) * spacing,
                -half + iy as f64 * spacing + rng.gen_range(-0.2..0.2) * spacing,
                d + rng.gen_range(-0.01..0.01) * d,
            );
            let g = Gaussian3D {
                center,
                opacity_logit: rng.gen_range(2.0..4.0),
                log_scale: Vector3::new((0.6 * spacing).ln(), (0.6 * spacing).ln(), (0.15 * spacing).ln()),
                rotation: [1.0, 0.0, 0.0, 0.0],
                sh: sh_of(texture.sample(&center)),
            };
            set.push(&g, VoxelKey::new(id, 0, 0));
            id += 1;
        }
    }
    // foreground blobs
    for _ in 0..12 {
        let center = Vector3::new(
            rng.gen_range(-0.6..0.6) * half,
            rng.gen_range(-0.6..0.6) * half,
            d * rng.gen_range(0.7..0.85),
        );
        let q: Vector3<f64> = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize()
            * rng.gen_range(0.0..0.5);
        let w: f64 = (1.0 - q.norm_squared()).sqrt();
        let s = 0.06 * d;
        let g = Gaussian3D {
            center,
            opacity_logit: rng.gen_range(2.0..3.0),
            log_scale: Vector3::new(
                (s * rng.gen_range(0.7..1.3)).ln(),
                (s * rng.gen_range(0.7..1.3)).ln(),
                (s * rng.gen_range(0.3..0.6)).ln(),
            ),
            rotation: [w, q.x, q.y, q.z],
            sh: sh_of([
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.1..0.9),
            ]),
        };
        set.push(&g, VoxelKey::new(id, 0, 0));
        id += 1;
    }
    set
}

fn synthesize_garden(spec: &SceneSpec, cameras: &[Camera], rng: &mut ChaCha8Rng) -> Result<SynthScene> {
    let set = garden_gaussians(spec, cameras, rng);
    let views = cameras
        .iter()
        .map(|cam| {
            let out = render_with(&set, cam, &RenderOptions::default());
            let valid: Vec<bool> = out
                .image
                .alpha
                .iter()
                .zip(&out.depth)
                .map(|(&a, &z)| a > GARDEN_DEPTH_ALPHA && z > 0.0)
                .collect();
            let values = out
                .depth
                .iter()
                .zip(&valid)
                .map(|(&z, &v)| if v { z } else { 0.0 })
                .collect();
            let depth = DepthMap::new(cam.width(), cam.height(), values, valid)?;
            CameraView::new(out.image.rgb, *cam, Some(depth))
        })
        .collect::<Result<_>>()?;
    Ok(SynthScene {
        views,
        ground_truth: Some(set),
    })
}

/// Deterministic split: the last `m` views become targets.
pub fn hold_out<T: Clone>(views: &[T], m: usize) -> Result<(Vec<T>, Vec<T>)> {
    if m >= views.len() {
        return Err(Error::InvalidInput(format!(
            "cannot hold out {m} of {} views",
            views.len()
        )));
    }
    let split = views.len() - m;
    Ok((views[..split].to_vec(), views[split..].to_vec()))
}

// --- scene files ---

pub fn encode_depth(d: &DepthMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + d.values.len() * 4);
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(d.height as u32).to_le_bytes());
    out.extend_from_slice(&(d.width as u32).to_le_bytes());
    for (v, ok) in d.values.iter().zip(&d.valid) {
        let z = if *ok { *v as f32 } else { 0.0 };
        out.extend_from_slice(&z.to_le_bytes());
    }
    out
}

/// Zero or non-finite samples decode as invalid.
pub fn decode_depth(bytes: &[u8]) -> Result<DepthMap> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != DEPTH_MAGIC {
        return Err(Error::Format("missing VSDP header".into()));
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let mut values = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for _ in 0..w * h {
        let z = r.f32()? as f64;
        let ok = z > 0.0 && z.is_finite();
        values.push(if ok { z } else { 0.0 });
        valid.push(ok);
    }
    r.finish()?;
    DepthMap::new(w, h, values, valid)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn view_stem(i: usize) -> String {
    format!("view_{i:03}")
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneManifest {
    pub views: usize,
    pub files: Vec<String>,
}

/// Writes `view_NNN.{ppm,json,depth}` per view, the optional ground truth
/// and `manifest.json`. Returns the manifest.
pub fn write_scene(dir: &Path, views: &[CameraView], ground_truth: Option<&GaussianSet>) -> Result<SceneManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for (i, view) in views.iter().enumerate() {
        let stem = view_stem(i);
        view.image.write_ppm(&dir.join(format!("{stem}.ppm")))?;
        let cam = serde_json::to_string_pretty(&view.camera.to_json()).expect("camera serializes");
        write_file(&dir.join(format!("{stem}.json")), cam.as_bytes())?;
        files.push(format!("{stem}.ppm"));
        files.push(format!("{stem}.json"));
        if let Some(d) = &view.gt_depth {
            write_file(&dir.join(format!("{stem}.depth")), &encode_depth(d))?;
            files.push(format!("{stem}.depth"));
        }
    }
    if let Some(gt) = ground_truth {
        export_ply(gt, None, &dir.join("ground_truth.ply"))?;
        files.push("ground_truth.ply".into());
    }
    let manifest = SceneManifest {
        views: views.len(),
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join("manifest.json"), text.as_bytes())?;
    Ok(manifest)
}

/// Loads every `view_NNN.ppm` with its camera (and depth, if present), in index order.
pub fn read_scene(dir: &Path) -> Result<Vec<CameraView>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let stem = name.strip_suffix(".ppm")?;
            stem.starts_with("view_").then(|| stem.to_string())
        })
        .collect();
    stems.sort();
    stems
        .iter()
        .map(|stem| {
            let path = |ext: &str| -> PathBuf { dir.join(format!("{stem}.{ext}")) };
            let image = Image::read_ppm(&path("ppm"))?;
            let cam_path = path("json");
            let text = std::fs::read_to_string(&cam_path).map_err(|e| Error::io(&cam_path, e))?;
            let file: CameraFile =
                serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", cam_path.display())))?;
            let camera = Camera::try_from(file).map_err(|e| Error::Format(format!("{}: {e}", cam_path.display())))?;
            let depth_path = path("depth");
            let gt_depth = if depth_path.exists() {
                let bytes = std::fs::read(&depth_path).map_err(|e| Error::io(&depth_path, e))?;
                Some(decode_depth(&bytes)?)
            } else {
                None
            };
            CameraView::new(image, camera, gt_depth).map_err(|e| Error::Format(format!("{stem}: {e}")))
        })
        .collect()
}
