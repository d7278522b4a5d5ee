//! Per-view feature maps, plane-sweep cost volumes and depth regression.
//!
//! The learned image backbone is replaced by [`FeatureExtractorSpec`]: a
//! deterministic gradient descriptor, a seeded random patch projection, or
//! features loaded from a `VSFM` file.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{warp_feature, Camera, CameraView, DepthMap};

const FEATURE_MAGIC: &[u8; 4] = b"VSFM";
/// Per-pixel descriptor length of the gradient extractor: centered RGB
/// (`I − ½`) + (gx, gy) per channel.
pub const GRADIENT_BASE_CHANNELS: usize = 9;

/// Dense `height × width × channels` grid at `1/scale` of the image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub scale: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize, scale: usize) -> Self {
        FeatureMap {
            width,
            height,
            channels,
            scale,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, scale: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || scale == 0 {
            return Err(Error::InvalidInput("feature map needs ≥1 channel and scale ≥1".into()));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidInput(format!(
                "feature buffer has {} values, expected {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(FeatureMap {
            width,
            height,
            channels,
            scale,
            data,
        })
    }

    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn cell_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    fn same_shape(&self, other: &FeatureMap) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.channels == other.channels
            && self.scale == other.scale
    }

    /// Copy with every cell rescaled to norm `√C`, so `⟨a, b⟩ / C` is the
    /// cosine of the two cells. All-zero cells stay zero.
    pub fn normalized(&self) -> FeatureMap {
        let c = self.channels;
        let target = (c as f64).sqrt();
        let mut out = self.clone();
        out.data.par_chunks_mut(c).for_each(|cell| {
            let norm = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                cell.iter_mut().for_each(|v| *v *= target / norm);
            }
        });
        out
    }

    /// Bilinear resampling to full image resolution (`scale` = 1).
    pub fn upsample_to(&self, width: usize, height: usize) -> Result<FeatureMap> {
        if self.scale == 1 && self.width == width && self.height == height {
            return Ok(self.clone());
        }
        let s = check_ratio(self.width, self.height, width, height)?;
        let c = self.channels;
        let mut data = vec![0.0; width * height * c];
        data.par_chunks_mut(width * c).enumerate().for_each(|(y, row)| {
            for x in 0..width {
                let out = &mut row[x * c..(x + 1) * c];
                for (sx, sy, wgt) in bilinear_taps(x, y, s, self.width, self.height) {
                    for (o, f) in out.iter_mut().zip(self.cell(sx, sy)) {
                        *o += wgt * f;
                    }
                }
            }
        });
        FeatureMap::from_data(width, height, c, 1, data)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        for dim in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], scale: usize) -> Result<FeatureMap> {
        if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
            return Err(Error::Format("missing VSFM header".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (h, w, c) = (dim(0), dim(1), dim(2));
        let payload = &bytes[16..];
        if payload.len() != h * w * c * 4 {
            return Err(Error::Format(format!(
                "VSFM payload is {} bytes, header implies {h}x{w}x{c} floats",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        FeatureMap::from_data(w, h, c, scale, data).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(path, e))
    }
}

fn check_ratio(src_w: usize, src_h: usize, dst_w: usize, dst_h: usize) -> Result<usize> {
    if src_w == 0
        || src_h == 0
        || !dst_w.is_multiple_of(src_w)
        || !dst_h.is_multiple_of(src_h)
        || dst_w / src_w != dst_h / src_h
    {
        return Err(Error::InvalidInput(format!(
            "cannot upsample {src_w}x{src_h} to {dst_w}x{dst_h}: ratio must be one integer"
        )));
    }
    Ok(dst_w / src_w)
}

/// Bilinear taps (source cell, weight) for full-resolution pixel `(x, y)`
/// when the source grid cell `i` is centered on pixel `s·i + (s−1)/2`.
/// Zero-weight taps are dropped.
fn bilinear_taps(
    x: usize,
    y: usize,
    s: usize,
    src_w: usize,
    src_h: usize,
) -> impl Iterator<Item = (usize, usize, f64)> {
    let shift = (s as f64 - 1.0) / 2.0;
    let axis = |p: usize, n: usize| {
        let t = ((p as f64 - shift) / s as f64).clamp(0.0, (n - 1) as f64);
        let i0 = t.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        let a = t - i0 as f64;
        [(i0, 1.0 - a), (i1, a)]
    };
    let ax = axis(x, src_w);
    let ay = axis(y, src_h);
    ay.into_iter()
        .flat_map(move |(sy, wy)| ax.into_iter().map(move |(sx, wx)| (sx, sy, wx * wy)))
        .filter(|&(_, _, w)| w != 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    /// Intensity plus central-difference gradients per color channel.
    GradientDescriptor,
    /// Seeded fixed linear map applied to each `scale × scale` RGB patch.
    RandomProjection,
    /// One `VSFM` file per view.
    ExternalFile,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractorSpec {
    pub kind: FeatureKind,
    pub channels: usize,
    pub scale: usize,
    pub seed: u64,
    /// Per-view files for [`FeatureKind::ExternalFile`], indexed like the views.
    pub files: Vec<PathBuf>,
}

impl FeatureExtractorSpec {
    pub fn gradient(channels: usize, scale: usize) -> Self {
        FeatureExtractorSpec {
            kind: FeatureKind::GradientDescriptor,
            channels,
            scale,
            seed: 0,
            files: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("feature channels must be ≥1".into()));
        }
        if ![1, 2, 4, 8].contains(&self.scale) {
            return Err(Error::Config(format!(
                "feature scale must be 1, 2, 4 or 8, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

/// Deterministic feature extraction for view number `view_index`.
pub fn extract_features(view: &CameraView, view_index: usize, spec: &FeatureExtractorSpec) -> Result<FeatureMap> {
    spec.validate()?;
    let img = &view.image;
    if img.width == 0 || img.height == 0 {
        return Err(Error::InvalidInput("empty image".into()));
    }
    let s = spec.scale;
    if !img.width.is_multiple_of(s) || !img.height.is_multiple_of(s) {
        return Err(Error::InvalidInput(format!(
            "image {}x{} not divisible by feature scale {s}",
            img.width, img.height
        )));
    }
    let (w, h) = (img.width / s, img.height / s);
    match spec.kind {
        FeatureKind::GradientDescriptor => Ok(gradient_descriptor(view, spec.channels, s)),
        FeatureKind::RandomProjection => Ok(random_projection(view, spec.channels, s, spec.seed)),
        FeatureKind::ExternalFile => {
            let path = spec
                .files
                .get(view_index)
                .ok_or_else(|| Error::Format(format!("no feature file for view {view_index}")))?;
            let bytes = std::fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            let map = FeatureMap::decode(&bytes, s)?;
            if map.width != w || map.height != h || map.channels != spec.channels {
                return Err(Error::Format(format!(
                    "{} is {}x{}x{}, expected {w}x{h}x{}",
                    path.display(),
                    map.height,
                    map.width,
                    map.channels,
                    spec.channels
                )));
            }
            Ok(map)
        }
    }
}

fn gradient_descriptor(view: &CameraView, channels: usize, s: usize) -> FeatureMap {
    let img = &view.image;
    let (iw, ih) = (img.width, img.height);
    let at = |x: isize, y: isize, ch: usize| {
        let x = x.clamp(0, iw as isize - 1) as usize;
        let y = y.clamp(0, ih as isize - 1) as usize;
        img.data[(y * iw + x) * 3 + ch]
    };
    let base = |x: usize, y: usize| {
        let (xi, yi) = (x as isize, y as isize);
        let mut d = [0.0; GRADIENT_BASE_CHANNELS];
        for ch in 0..3 {
            d[ch] = at(xi, yi, ch) - 0.5;
            d[3 + 2 * ch] = (at(xi + 1, yi, ch) - at(xi - 1, yi, ch)) / 2.0;
            d[4 + 2 * ch] = (at(xi, yi + 1, ch) - at(xi, yi - 1, ch)) / 2.0;
        }
        d
    };
    let (w, h) = (iw / s, ih / s);
    let used = channels.min(GRADIENT_BASE_CHANNELS);
    let norm = 1.0 / (s * s) as f64;
    let mut data = vec![0.0; w * h * channels];
    data.par_chunks_mut(w * channels).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let mut acc = [0.0; GRADIENT_BASE_CHANNELS];
            for py in y * s..(y + 1) * s {
                for px in x * s..(x + 1) * s {
                    for (a, v) in acc.iter_mut().zip(base(px, py)) {
                        *a += v;
                    }
                }
            }
            let cell = &mut row[x * channels..(x + 1) * channels];
            for (o, a) in cell[..used].iter_mut().zip(acc) {
                *o = a * norm;
            }
        }
    });
    FeatureMap {
        width: w,
        height: h,
        channels,
        scale: s,
        data,
    }
}

fn random_projection(view: &CameraView, channels: usize, s: usize, seed: u64) -> FeatureMap {
    let img = &view.image;
    let fan_in = 3 * s * s;
    let bound = (3.0 / fan_in as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj: Vec<f64> = (0..channels * fan_in).map(|_| rng.gen_range(-bound..bound)).collect();
    let (w, h) = (img.width / s, img.height / s);
    let mut data = vec![0.0; w * h * channels];
    data.par_chunks_mut(w * channels).enumerate().for_each(|(y, row)| {
        let mut patch = vec![0.0; fan_in];
        for x in 0..w {
            for py in 0..s {
                for px in 0..s {
                    let p = img.pixel(x * s + px, y * s + py);
                    patch[(py * s + px) * 3..(py * s + px) * 3 + 3].copy_from_slice(&p);
                }
            }
            for (c, o) in row[x * channels..(x + 1) * channels].iter_mut().enumerate() {
                *o = proj[c * fan_in..(c + 1) * fan_in]
                    .iter()
                    .zip(&patch)
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
    });
    FeatureMap {
        width: w,
        height: h,
        channels,
        scale: s,
        data,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DepthSpacing {
    Linear,
    #[default]
    Inverse,
}

/// `count` candidate depths from `near` to `far`, both endpoints exact.
pub fn sample_depth_hypotheses(near: f64, far: f64, count: usize, spacing: DepthSpacing) -> Result<Vec<f64>> {
    if !(near > 0.0 && near < far && far.is_finite()) {
        return Err(Error::InvalidRange(format!(
            "need 0 < near < far, got near={near}, far={far}"
        )));
    }
    if count < 2 {
        return Err(Error::InvalidRange(format!("need at least 2 hypotheses, got {count}")));
    }
    let last = (count - 1) as f64;
    let mut depths: Vec<f64> = (0..count)
        .map(|m| {
            let t = m as f64 / last;
            match spacing {
                DepthSpacing::Linear => near + t * (far - near),
                DepthSpacing::Inverse => 1.0 / (1.0 / near + t * (1.0 / far - 1.0 / near)),
            }
        })
        .collect();
    depths[0] = near;
    depths[count - 1] = far;
    Ok(depths)
}

/// Matching scores `height × width × depths`, depth index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub width: usize,
    pub height: usize,
    pub scale: usize,
    pub depths: Vec<f64>,
    pub scores: Vec<f64>,
}

impl CostVolume {
    pub fn new(width: usize, height: usize, scale: usize, depths: Vec<f64>, scores: Vec<f64>) -> Result<Self> {
        if depths.len() < 2 || depths.windows(2).any(|p| !(p[0] < p[1])) {
            return Err(Error::InvalidInput(
                "need ≥2 strictly increasing depth hypotheses".into(),
            ));
        }
        if scores.len() != width * height * depths.len() || scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(
                "cost volume scores must be finite and match the grid".into(),
            ));
        }
        Ok(CostVolume {
            width,
            height,
            scale,
            depths,
            scores,
        })
    }

    pub fn scores_at(&self, x: usize, y: usize) -> &[f64] {
        let d = self.depths.len();
        let i = (y * self.width + x) * d;
        &self.scores[i..i + d]
    }
}

/// Plane-sweep cost volume: mean over neighbors of the channel-normalized dot
/// product between the reference feature and the neighbor feature warped to
/// each hypothesized depth. Invalid warps are left out of the mean; a cell with
/// no valid neighbor scores zero.
pub fn build_cost_volume(
    reference: &FeatureMap,
    neighbors: &[(&FeatureMap, &Camera)],
    ref_cam: &Camera,
    hypotheses: &[f64],
) -> Result<CostVolume> {
    if neighbors.is_empty() {
        return Err(Error::InvalidInput("cost volume needs at least one neighbor".into()));
    }
    if neighbors.iter().any(|(f, _)| !f.same_shape(reference)) {
        return Err(Error::InvalidInput(
            "neighbor feature maps differ in shape from the reference".into(),
        ));
    }
    let (w, h, c) = (reference.width, reference.height, reference.channels);
    let d = hypotheses.len();
    // per hypothesis: score plane, computed in parallel over depths
    let planes: Vec<Vec<f64>> = hypotheses
        .par_iter()
        .map(|&depth| -> Result<Vec<f64>> {
            let warped: Vec<_> = neighbors
                .iter()
                .map(|(f, cam)| warp_feature(f, cam, ref_cam, depth))
                .collect::<Result<_>>()?;
            let mut plane = vec![0.0; w * h];
            let mut terms = Vec::with_capacity(neighbors.len());
            for (idx, out) in plane.iter_mut().enumerate() {
                let r = &reference.data[idx * c..(idx + 1) * c];
                terms.clear();
                for wf in &warped {
                    if wf.valid[idx] {
                        let n = &wf.map.data[idx * c..(idx + 1) * c];
                        terms.push(r.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / c as f64);
                    }
                }
                if !terms.is_empty() {
                    // order-independent over neighbors
                    terms.sort_by(f64::total_cmp);
                    *out = terms.iter().sum::<f64>() / terms.len() as f64;
                }
            }
            Ok(plane)
        })
        .collect::<Result<_>>()?;
    let mut scores = vec![0.0; w * h * d];
    for (m, plane) in planes.iter().enumerate() {
        for (idx, s) in plane.iter().enumerate() {
            scores[idx * d + m] = *s;
        }
    }
    CostVolume::new(w, h, reference.scale, hypotheses.to_vec(), scores)
}

/// Softargmax depth at cost-volume resolution.
pub fn regress_depth(cv: &CostVolume, temperature: f64) -> Result<DepthMap> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidInput(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let n = cv.width * cv.height;
    let values: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let s = &cv.scores[idx * cv.depths.len()..(idx + 1) * cv.depths.len()];
            let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = s.iter().map(|v| ((v - max) / temperature).exp()).collect();
            let total: f64 = weights.iter().sum();
            let depth = weights.iter().zip(&cv.depths).map(|(w, d)| w * d).sum::<f64>() / total;
            // rounding must not leave the hypothesis range
            depth.clamp(cv.depths[0], cv.depths[cv.depths.len() - 1])
        })
        .collect();
    DepthMap::new(cv.width, cv.height, values, vec![true; n])
}

/// Bilinear upsampling by an integer factor. A pixel stays valid only if every
/// source cell contributing to it is valid.
pub fn upsample_depth(d: &DepthMap, width: usize, height: usize) -> Result<DepthMap> {
    let s = check_ratio(d.width, d.height, width, height)?;
    if s == 1 {
        return Ok(d.clone());
    }
    let n = width * height;
    let (values, valid): (Vec<f64>, Vec<bool>) = (0..n)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % width, i / width);
            let mut v = 0.0;
            let mut ok = true;
            for (sx, sy, wgt) in bilinear_taps(x, y, s, d.width, d.height) {
                let j = sy * d.width + sx;
                ok &= d.valid[j];
                v += wgt * d.values[j];
            }
            if ok {
                (v, true)
            } else {
                (0.0, false)
            }
        })
        .unzip();
    DepthMap::new(width, height, values, valid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Extrinsics, Intrinsics};
    use crate::image::Image;
    use approx::assert_abs_diff_eq;

    fn view_of(img: Image) -> CameraView {
        let k = Intrinsics::new(
            32.0,
            32.0,
            (img.width as f64 - 1.0) / 2.0,
            (img.height as f64 - 1.0) / 2.0,
            img.width,
            img.height,
        )
        .unwrap();
        CameraView::new(img, Camera::new(k, Extrinsics::identity()), None).unwrap()
    }

    fn checkerboard(size: usize, square: usize) -> Image {
        let mut img = Image::filled(size, size, [0.0; 3]);
        for y in 0..size {
            for x in 0..size {
                let v = ((x / square + y / square) % 2) as f64;
                img.set_pixel(x, y, [v, v, v]);
            }
        }
        img
    }

    #[test]
    fn constant_image_has_zero_gradients() {
        let view = view_of(Image::filled(16, 16, [0.75; 3]));
        let f = extract_features(&view, 0, &FeatureExtractorSpec::gradient(9, 2)).unwrap();
        for y in 0..f.height {
            for x in 0..f.width {
                let c = f.cell(x, y);
                assert_eq!(&c[..3], &[0.25; 3]);
                assert!(c[3..].iter().all(|&g| g == 0.0));
            }
        }
    }

    #[test]
    fn checkerboard_gradients_on_boundaries_only() {
        let img = checkerboard(32, 4);
        let view = view_of(img.clone());
        let f = extract_features(&view, 0, &FeatureExtractorSpec::gradient(9, 1)).unwrap();
        // oracle: a pixel is on a boundary iff a 4-neighbor has another color
        for y in 0..32 {
            for x in 0..32 {
                let v = img.pixel(x, y)[0];
                let differs = |nx: isize, ny: isize| {
                    (0..32).contains(&nx) && (0..32).contains(&ny) && img.pixel(nx as usize, ny as usize)[0] != v
                };
                let (xi, yi) = (x as isize, y as isize);
                let boundary = differs(xi - 1, yi) || differs(xi + 1, yi) || differs(xi, yi - 1) || differs(xi, yi + 1);
                let energy: f64 = f.cell(x, y)[3..].iter().map(|g| g * g).sum();
                assert_eq!(energy > 0.0, boundary, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn extractors_are_deterministic() {
        let view = view_of(checkerboard(16, 2));
        for kind in [FeatureKind::GradientDescriptor, FeatureKind::RandomProjection] {
            let spec = FeatureExtractorSpec {
                kind,
                channels: 12,
                scale: 2,
                seed: 42,
                files: vec![],
            };
            let a = extract_features(&view, 0, &spec).unwrap();
            let b = extract_features(&view, 0, &spec).unwrap();
            assert_eq!(a, b);
            assert_eq!((a.width, a.height, a.channels), (8, 8, 12));
        }
    }

    #[test]
    fn random_projection_depends_on_seed() {
        let view = view_of(checkerboard(8, 2));
        let mut spec = FeatureExtractorSpec {
            kind: FeatureKind::RandomProjection,
            channels: 4,
            scale: 1,
            seed: 1,
            files: vec![],
        };
        let a = extract_features(&view, 0, &spec).unwrap();
        spec.seed = 2;
        assert_ne!(a, extract_features(&view, 0, &spec).unwrap());
    }

    #[test]
    fn invalid_extractor_specs() {
        let view = view_of(Image::filled(12, 12, [0.0; 3]));
        let mut spec = FeatureExtractorSpec::gradient(4, 3);
        assert!(matches!(extract_features(&view, 0, &spec), Err(Error::Config(_))));
        spec.scale = 8;
        assert!(matches!(extract_features(&view, 0, &spec), Err(Error::InvalidInput(_))));
        spec.channels = 0;
        assert!(extract_features(&view, 0, &spec).is_err());
    }

    #[test]
    fn external_file_features() {
        let dir = tempfile::tempdir().unwrap();
        let view = view_of(Image::filled(8, 8, [0.0; 3]));
        let map = FeatureMap::from_data(4, 4, 2, 2, (0..32).map(|v| v as f64 * 0.5).collect()).unwrap();
        let good = dir.path().join("good.vsfm");
        map.write(&good).unwrap();
        let mut spec = FeatureExtractorSpec {
            kind: FeatureKind::ExternalFile,
            channels: 2,
            scale: 2,
            seed: 0,
            files: vec![good.clone()],
        };
        assert_eq!(extract_features(&view, 0, &spec).unwrap(), map);
        // wrong channel count
        spec.channels = 3;
        assert!(matches!(extract_features(&view, 0, &spec), Err(Error::Format(_))));
        // missing file
        spec.channels = 2;
        spec.files = vec![dir.path().join("missing.vsfm")];
        assert!(matches!(extract_features(&view, 0, &spec), Err(Error::Format(_))));
        // truncated payload
        let bad = dir.path().join("bad.vsfm");
        std::fs::write(&bad, &map.encode()[..20]).unwrap();
        spec.files = vec![bad];
        assert!(matches!(extract_features(&view, 0, &spec), Err(Error::Format(_))));
    }

    #[test]
    fn hypotheses_linear_and_inverse() {
        assert_eq!(
            sample_depth_hypotheses(1.0, 3.0, 3, DepthSpacing::Linear).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        let inv = sample_depth_hypotheses(1.0, 3.0, 3, DepthSpacing::Inverse).unwrap();
        assert_eq!(inv[0], 1.0);
        assert_abs_diff_eq!(inv[1], 1.5, epsilon = 1e-12);
        assert_eq!(inv[2], 3.0);
        for spacing in [DepthSpacing::Linear, DepthSpacing::Inverse] {
            assert_eq!(sample_depth_hypotheses(0.7, 9.1, 2, spacing).unwrap(), vec![0.7, 9.1]);
        }
    }

    #[test]
    fn hypotheses_reject_bad_range() {
        assert!(matches!(
            sample_depth_hypotheses(3.0, 1.0, 4, DepthSpacing::Linear),
            Err(Error::InvalidRange(_))
        ));
        assert!(matches!(
            sample_depth_hypotheses(1.0, 1.0, 4, DepthSpacing::Linear),
            Err(Error::InvalidRange(_))
        ));
        assert!(sample_depth_hypotheses(0.0, 1.0, 4, DepthSpacing::Inverse).is_err());
        assert!(sample_depth_hypotheses(1.0, 2.0, 1, DepthSpacing::Inverse).is_err());
    }

    fn one_cell_volume(scores: Vec<f64>, depths: Vec<f64>) -> CostVolume {
        CostVolume::new(1, 1, 1, depths, scores).unwrap()
    }

    #[test]
    fn softargmax_saturates_to_plane() {
        let depths = vec![1.0, 1.7, 2.3, 4.0];
        for m in 0..4 {
            let scores = (0..4).map(|i| if i == m { 10.0 } else { -10.0 }).collect();
            let d = regress_depth(&one_cell_volume(scores, depths.clone()), 0.05).unwrap();
            assert_abs_diff_eq!(d.values[0], depths[m], epsilon = 1e-3);
            assert!(d.valid[0]);
        }
    }

    #[test]
    fn softargmax_uniform_scores_is_mean() {
        let d = regress_depth(&one_cell_volume(vec![0.3; 3], vec![1.0, 2.0, 3.0]), 0.05).unwrap();
        assert_abs_diff_eq!(d.values[0], 2.0, epsilon = 1e-12);
        assert!(regress_depth(&one_cell_volume(vec![0.3; 3], vec![1.0, 2.0, 3.0]), 0.0).is_err());
    }

    #[test]
    fn upsample_identity_and_constant() {
        let d = DepthMap::new(2, 2, vec![1.0, 2.0, 3.0, 4.0], vec![true; 4]).unwrap();
        assert_eq!(upsample_depth(&d, 2, 2).unwrap(), d);
        let c = DepthMap::constant(3, 2, 1.25);
        let up = upsample_depth(&c, 12, 8).unwrap();
        assert!(up.values.iter().all(|&v| (v - 1.25).abs() < 1e-15));
        assert!(matches!(upsample_depth(&c, 7, 8), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn upsample_bilinear_matches_direct_formula() {
        let d = DepthMap::new(2, 2, vec![1.0, 2.0, 3.0, 4.0], vec![true; 4]).unwrap();
        let up = upsample_depth(&d, 4, 4).unwrap();
        // oracle: pixel p samples source coordinate (p - 0.5) / 2, clamped to [0, 1]
        let src = |p: usize| ((p as f64 - 0.5) / 2.0).clamp(0.0, 1.0);
        for y in 0..4 {
            for x in 0..4 {
                let (u, v) = (src(x), src(y));
                let expect = 1.0 * (1.0 - u) * (1.0 - v) + 2.0 * u * (1.0 - v) + 3.0 * (1.0 - u) * v + 4.0 * u * v;
                assert_abs_diff_eq!(up.values[y * 4 + x], expect, epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!(up.values[4 + 1], 1.75, epsilon = 1e-12);
        assert_abs_diff_eq!(up.values[2 * 4 + 2], 3.25, epsilon = 1e-12);
    }

    #[test]
    fn upsample_validity_is_conservative() {
        let d = DepthMap::new(2, 2, vec![1.0, 2.0, 3.0, 0.0], vec![true, true, true, false]).unwrap();
        let up = upsample_depth(&d, 4, 4).unwrap();
        assert!(up.valid[0]);
        assert!(!up.valid[4 + 1]); // touches the invalid corner
        assert!(!up.valid[15]);
    }
}
