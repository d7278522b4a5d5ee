//! Tile-based CPU splatting of a [`GaussianSet`] into an RGB image.
//!
//! Each Gaussian is projected with the local affine (EWA) approximation,
//! binned into 16×16 tiles, sorted per tile by camera depth and
//! alpha-composited front to back.

use nalgebra::{Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use crate::gaussian::{Gaussian3D, GaussianSet};
use crate::geometry::{project_point, Camera};
use crate::image::Image;
use crate::voxel::VoxelKey;

pub const DEFAULT_TILE: usize = 16;
/// Isotropic screen-space dilation added to every projected covariance (px²).
pub const COV_DILATION: f64 = 0.3;
pub const NEAR_PLANE: f64 = 0.01;
pub const MAX_ALPHA: f64 = 0.99;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;

const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// View-dependent color from SH coefficients (coefficient-major RGB triples),
/// offset by ½ and clamped to `[0, 1]`.
pub fn sh_to_rgb(sh: &[f64], degree: usize, dir: &Vector3<f64>) -> [f64; 3] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut basis = vec![crate::gaussian::SH_C0];
    if degree >= 1 {
        basis.extend([-SH_C1 * y, SH_C1 * z, -SH_C1 * x]);
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        basis.extend([
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]);
        if degree >= 3 {
            basis.extend([
                SH_C3[0] * y * (3.0 * xx - yy),
                SH_C3[1] * x * y * z,
                SH_C3[2] * y * (4.0 * zz - xx - yy),
                SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
                SH_C3[4] * x * (4.0 * zz - xx - yy),
                SH_C3[5] * z * (xx - yy),
                SH_C3[6] * x * (xx - 3.0 * yy),
            ]);
        }
    }
    let mut rgb = [0.5; 3];
    for (k, b) in basis.iter().enumerate() {
        for (c, out) in rgb.iter_mut().enumerate() {
            *out += b * sh[k * 3 + c];
        }
    }
    rgb.map(|v| v.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedSplat {
    pub mean2d: [f64; 2],
    /// Symmetric 2×2 covariance `[a, b, c]` = `[[a, b], [b, c]]`, dilation included.
    pub cov2d: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    /// Pixel extent of the 3σ footprint.
    pub radius: f64,
}

impl ProjectedSplat {
    fn conic(&self) -> [f64; 3] {
        let [a, b, c] = self.cov2d;
        let det = a * c - b * b;
        [c / det, -b / det, a / det]
    }
}

/// Screen-space projection, or `None` if the Gaussian is culled (behind the
/// near plane or entirely outside the image).
pub fn project_gaussian(g: &Gaussian3D, sh_degree: usize, cam: &Camera) -> Option<ProjectedSplat> {
    let (u, v, depth) = project_point(&g.center, cam).ok()?;
    if depth <= NEAR_PLANE {
        return None;
    }
    let k = &cam.intrinsics;
    let pc = cam.extrinsics.world_to_camera(&g.center);
    let jac = Matrix2x3::new(
        k.fx / pc.z,
        0.0,
        -k.fx * pc.x / (pc.z * pc.z),
        0.0,
        k.fy / pc.z,
        -k.fy * pc.y / (pc.z * pc.z),
    );
    let w: Matrix3<f64> = cam.extrinsics.rotation.transpose();
    let cov_cam = w * g.covariance() * w.transpose();
    let cov = jac * cov_cam * jac.transpose();
    let (a, b, c) = (
        cov[(0, 0)] + COV_DILATION,
        0.5 * (cov[(0, 1)] + cov[(1, 0)]),
        cov[(1, 1)] + COV_DILATION,
    );
    let det = a * c - b * b;
    if !(det > 0.0) {
        return None;
    }
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = (3.0 * lambda_max.sqrt()).ceil();
    if u + radius < 0.0 || v + radius < 0.0 || u - radius > (k.width - 1) as f64 || v - radius > (k.height - 1) as f64 {
        return None;
    }
    let dir = (g.center - cam.center()).normalize();
    Some(ProjectedSplat {
        mean2d: [u, v],
        cov2d: [a, b, c],
        depth,
        color: sh_to_rgb(&g.sh, sh_degree, &dir),
        opacity: g.opacity(),
        radius,
    })
}

/// Final image plus accumulated alpha, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub rgb: Image,
    pub alpha: Vec<f64>,
}

/// Renderer output with per-pixel bookkeeping buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub image: RenderedImage,
    /// `Σ α'ᵢ Tᵢ` per pixel.
    pub weight_sum: Vec<f64>,
    /// Transmittance left after compositing.
    pub transmittance: Vec<f64>,
    /// Blend-weighted mean camera depth; 0 where nothing was hit.
    pub depth: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub tile: usize,
    pub background: [f64; 3],
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            tile: DEFAULT_TILE,
            background: [0.0; 3],
        }
    }
}

struct Entry {
    splat: ProjectedSplat,
    conic: [f64; 3],
    key: VoxelKey,
    center_bits: [u32; 3],
    index: usize,
}

pub fn render(set: &GaussianSet, cam: &Camera, background: [f64; 3]) -> RenderedImage {
    render_with(
        set,
        cam,
        &RenderOptions {
            tile: DEFAULT_TILE,
            background,
        },
    )
    .image
}

pub fn render_with(set: &GaussianSet, cam: &Camera, opts: &RenderOptions) -> RenderOutput {
    let (w, h) = (cam.width(), cam.height());
    let tile = opts.tile.max(1);
    let entries: Vec<Option<Entry>> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            project_gaussian(&set.get(i), set.sh_degree, cam).map(|splat| Entry {
                conic: splat.conic(),
                splat,
                key: set.keys[i],
                center_bits: set.centers[i].map(f32::to_bits),
                index: i,
            })
        })
        .collect();

    let (tiles_x, tiles_y) = (w.div_ceil(tile), h.div_ceil(tile));
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for e in entries.iter().flatten() {
        let [u, v] = e.splat.mean2d;
        let r = e.splat.radius;
        let tx0 = ((u - r).max(0.0) as usize / tile).min(tiles_x - 1);
        let tx1 = ((u + r).min((w - 1) as f64).max(0.0) as usize / tile).min(tiles_x - 1);
        let ty0 = ((v - r).max(0.0) as usize / tile).min(tiles_y - 1);
        let ty1 = ((v + r).min((h - 1) as f64).max(0.0) as usize / tile).min(tiles_y - 1);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                bins[ty * tiles_x + tx].push(e.index as u32);
            }
        }
    }

    let order = |a: &Entry, b: &Entry| {
        a.splat
            .depth
            .total_cmp(&b.splat.depth)
            .then(a.key.cmp(&b.key))
            .then(a.center_bits.cmp(&b.center_bits))
            .then(a.index.cmp(&b.index))
    };

    let tiles: Vec<TileBuffers> = bins
        .par_iter_mut()
        .enumerate()
        .map(|(t, bin)| {
            bin.sort_unstable_by(|&a, &b| {
                order(
                    entries[a as usize].as_ref().unwrap(),
                    entries[b as usize].as_ref().unwrap(),
                )
            });
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let x0 = tx * tile;
            let y0 = ty * tile;
            let tw = tile.min(w - x0);
            let th = tile.min(h - y0);
            let mut buf = TileBuffers::new(tw * th);
            for py in 0..th {
                for px in 0..tw {
                    let (x, y) = ((x0 + px) as f64, (y0 + py) as f64);
                    let mut t_acc = 1.0;
                    let mut rgb = [0.0; 3];
                    let mut wsum = 0.0;
                    let mut zsum = 0.0;
                    for &gi in bin.iter() {
                        let e = entries[gi as usize].as_ref().unwrap();
                        let dx = x - e.splat.mean2d[0];
                        let dy = y - e.splat.mean2d[1];
                        // footprint is clipped to the radius box, independent of tiling
                        if dx.abs() > e.splat.radius || dy.abs() > e.splat.radius {
                            continue;
                        }
                        let [ca, cb, cc] = e.conic;
                        let power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy;
                        if power > 0.0 {
                            continue;
                        }
                        let alpha = (e.splat.opacity * power.exp()).min(MAX_ALPHA);
                        let wgt = alpha * t_acc;
                        for (o, c) in rgb.iter_mut().zip(e.splat.color) {
                            *o += c * wgt;
                        }
                        wsum += wgt;
                        zsum += e.splat.depth * wgt;
                        t_acc *= 1.0 - alpha;
                        if t_acc < MIN_TRANSMITTANCE {
                            break;
                        }
                    }
                    let n = py * tw + px;
                    for c in 0..3 {
                        buf.rgb[n * 3 + c] = (rgb[c] + t_acc * opts.background[c]).clamp(0.0, 1.0);
                    }
                    buf.alpha[n] = 1.0 - t_acc;
                    buf.weight[n] = wsum;
                    buf.trans[n] = t_acc;
                    buf.depth[n] = if wsum > 0.0 { zsum / wsum } else { 0.0 };
                }
            }
            buf
        })
        .collect();

    let mut out = RenderOutput {
        image: RenderedImage {
            rgb: Image::filled(w, h, [0.0; 3]),
            alpha: vec![0.0; w * h],
        },
        weight_sum: vec![0.0; w * h],
        transmittance: vec![0.0; w * h],
        depth: vec![0.0; w * h],
    };
    for (t, buf) in tiles.iter().enumerate() {
        let (x0, y0) = ((t % tiles_x) * tile, (t / tiles_x) * tile);
        let tw = tile.min(w - x0);
        for (n, a) in buf.alpha.iter().enumerate() {
            let (x, y) = (x0 + n % tw, y0 + n / tw);
            let p = y * w + x;
            out.image.rgb.data[p * 3..p * 3 + 3].copy_from_slice(&buf.rgb[n * 3..n * 3 + 3]);
            out.image.alpha[p] = *a;
            out.weight_sum[p] = buf.weight[n];
            out.transmittance[p] = buf.trans[n];
            out.depth[p] = buf.depth[n];
        }
    }
    out
}

struct TileBuffers {
    rgb: Vec<f64>,
    alpha: Vec<f64>,
    weight: Vec<f64>,
    trans: Vec<f64>,
    depth: Vec<f64>,
}

impl TileBuffers {
    fn new(n: usize) -> Self {
        TileBuffers {
            rgb: vec![0.0; n * 3],
            alpha: vec![0.0; n],
            weight: vec![0.0; n],
            trans: vec![0.0; n],
            depth: vec![0.0; n],
        }
    }
}
