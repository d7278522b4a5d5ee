//! Pinhole camera model and the pixel/world transforms shared by every stage.
//!
//! Conventions:
//! - integer pixel coordinates address pixel centers;
//! - depth is z-depth in the camera frame;
//! - extrinsics are stored camera-to-world (`p_world = R p_cam + T`), with
//!   camera axes x right, y down, z forward.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::image::Image;

const ROTATION_TOL: f64 = 1e-9;
/// Slack allowed when deciding whether a reprojected sample is in bounds.
const BOUNDS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("image size must be non-zero".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::InvalidInput(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics of the grid obtained by averaging `scale`×`scale` pixel
    /// blocks. Cell `x` of that grid is centered on pixel `scale·x + (scale−1)/2`.
    pub fn downscaled(&self, scale: usize) -> Intrinsics {
        let s = scale as f64;
        let shift = (s - 1.0) / 2.0;
        Intrinsics {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: (self.cx - shift) / s,
            cy: (self.cy - shift) / s,
            width: self.width / scale,
            height: self.height / scale,
        }
    }

    fn inverse_apply(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    /// Camera-to-world rotation.
    pub rotation: Matrix3<f64>,
    /// Camera center in world coordinates.
    pub translation: Vector3<f64>,
}

impl Extrinsics {
    pub fn identity() -> Self {
        Extrinsics {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let e = Extrinsics { rotation, translation };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if ortho > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidInput(format!(
                "rotation is not proper orthonormal (|RᵀR−I|={ortho:e}, det={det})"
            )));
        }
        if !self.translation.iter().all(|t| t.is_finite()) {
            return Err(Error::InvalidInput("translation must be finite".into()));
        }
        Ok(())
    }

    /// Camera looking from `eye` toward `target`; `down` fixes the image y axis.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, down: Vector3<f64>) -> Result<Self> {
        let z = target - eye;
        if z.norm() == 0.0 {
            return Err(Error::InvalidInput("eye and target coincide".into()));
        }
        let z = z.normalize();
        let x = down.cross(&z);
        if x.norm() < 1e-12 {
            return Err(Error::InvalidInput("down vector parallel to viewing direction".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_columns(&[x, y, z]);
        Extrinsics::new(rotation, eye)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

/// Intrinsics and extrinsics of one view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, extrinsics: Extrinsics) -> Self {
        Camera { intrinsics, extrinsics }
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn center(&self) -> Vector3<f64> {
        self.extrinsics.translation
    }

    /// Same pose, intrinsics of the `scale`-downsampled grid.
    pub fn downscaled(&self, scale: usize) -> Camera {
        Camera {
            intrinsics: self.intrinsics.downscaled(scale),
            extrinsics: self.extrinsics,
        }
    }

    pub fn to_json(&self) -> CameraFile {
        CameraFile::from(self)
    }
}

/// On-disk camera description.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CameraFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Camera-to-world rotation, row-major.
    #[serde(rename = "R")]
    pub r: [f64; 9],
    #[serde(rename = "T")]
    pub t: [f64; 3],
}

impl From<&Camera> for CameraFile {
    fn from(cam: &Camera) -> Self {
        let k = &cam.intrinsics;
        let r = &cam.extrinsics.rotation;
        let mut rows = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rows[i * 3 + j] = r[(i, j)];
            }
        }
        let t = cam.extrinsics.translation;
        CameraFile {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            r: rows,
            t: [t.x, t.y, t.z],
        }
    }
}

impl TryFrom<CameraFile> for Camera {
    type Error = Error;

    fn try_from(f: CameraFile) -> Result<Camera> {
        let intrinsics = Intrinsics::new(f.fx, f.fy, f.cx, f.cy, f.width, f.height)?;
        let rotation = Matrix3::from_row_slice(&f.r);
        let extrinsics = Extrinsics::new(rotation, Vector3::from(f.t))?;
        Ok(Camera::new(intrinsics, extrinsics))
    }
}

/// Per-pixel depth with a validity mask. Row-major, `width × height`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        let d = DepthMap {
            width,
            height,
            values,
            valid,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        DepthMap {
            width,
            height,
            values: vec![depth; width * height],
            valid: vec![true; width * height],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        if self.values.len() != n || self.valid.len() != n {
            return Err(Error::InvalidInput(format!(
                "depth map buffers do not match {}x{}",
                self.width, self.height
            )));
        }
        if let Some(i) = (0..n).find(|&i| self.valid[i] && !(self.values[i] > 0.0 && self.values[i].is_finite())) {
            return Err(Error::InvalidInput(format!(
                "depth map has non-positive valid depth {} at index {i}",
                self.values[i]
            )));
        }
        Ok(())
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// One input image with its camera and optional ground-truth depth.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub image: Image,
    pub camera: Camera,
    pub gt_depth: Option<DepthMap>,
}

impl CameraView {
    pub fn new(image: Image, camera: Camera, gt_depth: Option<DepthMap>) -> Result<Self> {
        let view = CameraView {
            image,
            camera,
            gt_depth,
        };
        view.validate()?;
        Ok(view)
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.camera.width(), self.camera.height());
        if self.image.width != w || self.image.height != h {
            return Err(Error::InvalidInput(format!(
                "image is {}x{} but intrinsics say {w}x{h}",
                self.image.width, self.image.height
            )));
        }
        if let Some(d) = &self.gt_depth {
            if d.width != w || d.height != h {
                return Err(Error::InvalidInput("ground-truth depth size mismatch".into()));
            }
            d.validate()?;
        }
        Ok(())
    }
}

/// World point seen at pixel `(u, v)` with z-depth `depth`.
pub fn unproject_pixel(u: f64, v: f64, depth: f64, cam: &Camera) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::InvalidInput(format!("depth must be positive, got {depth}")));
    }
    let p_cam = cam.intrinsics.inverse_apply(u, v) * depth;
    Ok(cam.extrinsics.camera_to_world(&p_cam))
}

/// Pixel coordinates and z-depth of a world point.
pub fn project_point(p: &Vector3<f64>, cam: &Camera) -> Result<(f64, f64, f64)> {
    let pc = cam.extrinsics.world_to_camera(p);
    if !(pc.z > 0.0) {
        return Err(Error::BehindCamera { depth: pc.z });
    }
    let k = &cam.intrinsics;
    Ok((k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy, pc.z))
}

/// Source features resampled onto the reference grid, with a per-cell flag
/// marking samples whose reprojection fell inside the source map.
#[derive(Debug, Clone)]
pub struct WarpedFeatures {
    pub map: FeatureMap,
    pub valid: Vec<bool>,
}

/// Bilinear sample of a feature map at continuous cell coordinates.
/// Returns `false` (and leaves `out` zeroed) when the sample lies outside.
pub(crate) fn sample_bilinear(map: &FeatureMap, u: f64, v: f64, out: &mut [f64]) -> bool {
    out.iter_mut().for_each(|o| *o = 0.0);
    let (w, h) = (map.width as f64, map.height as f64);
    if !(u >= -BOUNDS_EPS && u <= w - 1.0 + BOUNDS_EPS && v >= -BOUNDS_EPS && v <= h - 1.0 + BOUNDS_EPS) {
        return false;
    }
    let u = u.clamp(0.0, w - 1.0);
    let v = v.clamp(0.0, h - 1.0);
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let x1 = (x0 + 1).min(map.width - 1);
    let y1 = (y0 + 1).min(map.height - 1);
    let ax = u - x0 as f64;
    let ay = v - y0 as f64;
    let taps = [
        (x0, y0, (1.0 - ax) * (1.0 - ay)),
        (x1, y0, ax * (1.0 - ay)),
        (x0, y1, (1.0 - ax) * ay),
        (x1, y1, ax * ay),
    ];
    for (x, y, wgt) in taps {
        if wgt == 0.0 {
            continue;
        }
        for (o, f) in out.iter_mut().zip(map.cell(x, y)) {
            *o += wgt * f;
        }
    }
    true
}

/// Plane-sweep warp: for every reference cell, back-project to the
/// fronto-parallel plane at `depth_plane` (reference camera z) and sample the
/// source map at the reprojection. Cameras are full-resolution; the feature
/// grid geometry is derived from each map's scale factor.
pub fn warp_feature(src: &FeatureMap, src_cam: &Camera, ref_cam: &Camera, depth_plane: f64) -> Result<WarpedFeatures> {
    if !(depth_plane > 0.0) {
        return Err(Error::InvalidInput(format!(
            "depth plane must be positive, got {depth_plane}"
        )));
    }
    let src_grid = src_cam.downscaled(src.scale);
    let ref_grid = ref_cam.downscaled(src.scale);
    let (w, h, c) = (src.width, src.height, src.channels);
    if ref_grid.width() != w || ref_grid.height() != h {
        return Err(Error::InvalidInput("reference and source grids differ in size".into()));
    }
    let mut data = vec![0.0; w * h * c];
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let p = unproject_pixel(x as f64, y as f64, depth_plane, &ref_grid)?;
            let Ok((u, v, _)) = project_point(&p, &src_grid) else {
                continue;
            };
            valid[idx] = sample_bilinear(src, u, v, &mut data[idx * c..(idx + 1) * c]);
        }
    }
    let map = FeatureMap::from_data(w, h, c, src.scale, data)?;
    Ok(WarpedFeatures { map, valid })
}
