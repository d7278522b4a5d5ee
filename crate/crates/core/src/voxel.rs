//! Lifting pixels to world points and average-pooling them into a sparse voxel grid.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::{unproject_pixel, CameraView, DepthMap};

const GRID_MAGIC: &[u8; 4] = b"VSVG";
/// Relative slack within which `x / v_s` counts as an exact half for rounding.
const HALF_TIE_EPS: f64 = 1e-9;

/// Integer voxel coordinates. Ordered lexicographically by `(i, j, k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct VoxelKey {
    pub i: i32,
    pub j: i32,
    pub k: i32,
}

impl VoxelKey {
    pub const fn new(i: i32, j: i32, k: i32) -> Self {
        VoxelKey { i, j, k }
    }

    pub fn offset(self, d: [i32; 3]) -> Self {
        VoxelKey::new(self.i + d[0], self.j + d[1], self.k + d[2])
    }

    pub fn as_array(self) -> [i32; 3] {
        [self.i, self.j, self.k]
    }
}

/// Round to nearest, exact halves away from zero. A quotient within
/// `HALF_TIE_EPS` (relative) of a half counts as that half, so decimal inputs
/// such as `0.15 / 0.1` tie-break like their exact values.
fn round_half_away(q: f64) -> i32 {
    let base = q.trunc();
    let frac = (q - base).abs();
    let tol = HALF_TIE_EPS * q.abs().max(1.0);
    let r = if (frac - 0.5).abs() <= tol {
        base + q.signum()
    } else {
        q.round()
    };
    r as i32
}

pub fn voxel_index(p: &Vector3<f64>, voxel_size: f64) -> VoxelKey {
    VoxelKey::new(
        round_half_away(p.x / voxel_size),
        round_half_away(p.y / voxel_size),
        round_half_away(p.z / voxel_size),
    )
}

/// Cell center; the fixed point of [`voxel_index`].
pub fn voxel_center(key: VoxelKey, voxel_size: f64) -> Vector3<f64> {
    Vector3::new(
        key.i as f64 * voxel_size,
        key.j as f64 * voxel_size,
        key.k as f64 * voxel_size,
    )
}

/// World points carrying a feature vector, tagged with the view and pixel they came from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeaturedPointCloud {
    pub channels: usize,
    pub positions: Vec<Vector3<f64>>,
    /// `len × channels`, row-major.
    pub features: Vec<f64>,
    pub source_view: Vec<u32>,
    /// Row-major pixel index within the source view.
    pub source_pixel: Vec<u32>,
}

impl FeaturedPointCloud {
    pub fn new(channels: usize) -> Self {
        FeaturedPointCloud {
            channels,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn push(&mut self, position: Vector3<f64>, feature: &[f64], view: u32, pixel: u32) {
        debug_assert_eq!(feature.len(), self.channels);
        self.positions.push(position);
        self.features.extend_from_slice(feature);
        self.source_view.push(view);
        self.source_pixel.push(pixel);
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.features.len() != n * self.channels || self.source_view.len() != n || self.source_pixel.len() != n {
            return Err(Error::InvalidInput("point cloud buffers disagree in length".into()));
        }
        if self.positions.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidInput("point cloud has non-finite positions".into()));
        }
        Ok(())
    }
}

/// One world point per valid depth pixel per view. Feature maps coarser than
/// the image are bilinearly upsampled first so every pixel owns a feature.
pub fn lift_views(views: &[CameraView], features: &[FeatureMap], depths: &[DepthMap]) -> Result<FeaturedPointCloud> {
    if views.len() != features.len() || views.len() != depths.len() {
        return Err(Error::InvalidInput(format!(
            "lift_views got {} views, {} feature maps, {} depth maps",
            views.len(),
            features.len(),
            depths.len()
        )));
    }
    let channels = features.first().map_or(0, |f| f.channels);
    if features.iter().any(|f| f.channels != channels) {
        return Err(Error::InvalidInput("feature maps differ in channel count".into()));
    }
    let per_view: Vec<FeaturedPointCloud> = views
        .par_iter()
        .zip(features.par_iter())
        .zip(depths.par_iter())
        .enumerate()
        .map(|(vi, ((view, fmap), depth))| {
            let (w, h) = (view.camera.width(), view.camera.height());
            if depth.width != w || depth.height != h {
                return Err(Error::InvalidInput(format!(
                    "depth map {vi} is not at full image resolution"
                )));
            }
            let full = fmap.upsample_to(w, h)?;
            let mut cloud = FeaturedPointCloud::new(channels);
            for y in 0..h {
                for x in 0..w {
                    if let Some(d) = depth.get(x, y) {
                        let p = unproject_pixel(x as f64, y as f64, d, &view.camera)?;
                        cloud.push(p, full.cell(x, y), vi as u32, (y * w + x) as u32);
                    }
                }
            }
            Ok(cloud)
        })
        .collect::<Result<_>>()?;
    let mut cloud = FeaturedPointCloud::new(channels);
    for part in per_view {
        cloud.positions.extend(part.positions);
        cloud.features.extend(part.features);
        cloud.source_view.extend(part.source_view);
        cloud.source_pixel.extend(part.source_pixel);
    }
    Ok(cloud)
}

/// Occupied voxels sorted by key, each with the mean feature of its points.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelGrid {
    pub voxel_size: f64,
    pub channels: usize,
    pub keys: Vec<VoxelKey>,
    /// `keys.len() × channels`.
    pub features: Vec<f64>,
    pub counts: Vec<u32>,
}

impl SparseVoxelGrid {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn find(&self, key: VoxelKey) -> Option<usize> {
        self.keys.binary_search(&key).ok()
    }

    pub fn total_count(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(GRID_MAGIC);
        out.extend_from_slice(&(self.voxel_size as f32).to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        out.extend_from_slice(&(self.keys.len() as u64).to_le_bytes());
        for (n, key) in self.keys.iter().enumerate() {
            for c in key.as_array() {
                out.extend_from_slice(&c.to_le_bytes());
            }
            out.extend_from_slice(&self.counts[n].to_le_bytes());
            for v in self.feature(n) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = crate::bytes::Reader::new(bytes);
        if r.take(4)? != GRID_MAGIC {
            return Err(Error::Format("missing VSVG header".into()));
        }
        let voxel_size = r.f32()? as f64;
        let channels = r.u32()? as usize;
        let count = r.u64()? as usize;
        let mut grid = SparseVoxelGrid {
            voxel_size,
            channels,
            keys: Vec::with_capacity(count.min(1 << 24)),
            features: Vec::new(),
            counts: Vec::new(),
        };
        for _ in 0..count {
            grid.keys.push(VoxelKey::new(r.i32()?, r.i32()?, r.i32()?));
            grid.counts.push(r.u32()?);
            for _ in 0..channels {
                grid.features.push(r.f32()? as f64);
            }
        }
        r.finish()?;
        Ok(grid)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(path, e))
    }
}

/// Pairwise (cascade) summation of `n` values produced by `get`.
fn pairwise_sum(n: usize, get: &impl Fn(usize) -> f64, start: usize) -> f64 {
    if n <= 8 {
        return (start..start + n).map(get).sum();
    }
    let half = n / 2;
    pairwise_sum(half, get, start) + pairwise_sum(n - half, get, start + half)
}

fn point_order(cloud: &FeaturedPointCloud, keys: &[VoxelKey], a: usize, b: usize) -> Ordering {
    keys[a]
        .cmp(&keys[b])
        .then(cloud.source_view[a].cmp(&cloud.source_view[b]))
        .then(cloud.source_pixel[a].cmp(&cloud.source_pixel[b]))
        // only reached for untagged duplicates; compare contents for a total order
        .then_with(|| {
            let fa = cloud.feature(a).iter().map(|v| v.to_bits());
            let fb = cloud.feature(b).iter().map(|v| v.to_bits());
            fa.cmp(fb)
        })
        .then_with(|| {
            let pa = cloud.positions[a].iter().map(|v| v.to_bits());
            let pb = cloud.positions[b].iter().map(|v| v.to_bits());
            pa.cmp(pb)
        })
}

/// Average-pools point features per voxel. Points are sorted by
/// `(key, source view, source pixel)` before accumulation, so the result is
/// bit-identical under any permutation of the input and any thread count.
pub fn voxelize(cloud: &FeaturedPointCloud, voxel_size: f64) -> Result<SparseVoxelGrid> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    cloud.validate()?;
    let c = cloud.channels;
    let keys: Vec<VoxelKey> = cloud.positions.par_iter().map(|p| voxel_index(p, voxel_size)).collect();
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    order.par_sort_unstable_by(|&a, &b| point_order(cloud, &keys, a, b));

    let mut runs = Vec::new();
    let mut start = 0;
    for n in 1..=order.len() {
        if n == order.len() || keys[order[n]] != keys[order[start]] {
            runs.push((start, n));
            start = n;
        }
    }
    let pooled: Vec<(VoxelKey, u32, Vec<f64>)> = runs
        .par_iter()
        .map(|&(s, e)| {
            let members = &order[s..e];
            let inv = 1.0 / members.len() as f64;
            let feat = (0..c)
                .map(|ch| pairwise_sum(members.len(), &|m| cloud.features[members[m] * c + ch], 0) * inv)
                .collect();
            (keys[members[0]], members.len() as u32, feat)
        })
        .collect();

    let mut grid = SparseVoxelGrid {
        voxel_size,
        channels: c,
        keys: Vec::with_capacity(pooled.len()),
        features: Vec::with_capacity(pooled.len() * c),
        counts: Vec::with_capacity(pooled.len()),
    };
    for (key, count, feat) in pooled {
        grid.keys.push(key);
        grid.counts.push(count);
        grid.features.extend(feat);
    }
    Ok(grid)
}
