//! Per-voxel Gaussian decoding: a linear head over refined voxel features
//! followed by the center/opacity/scale/rotation activations.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::sparse::{submanifold_conv, ConvWeights, KernelSize, SparseTensor};
use crate::voxel::{voxel_center, VoxelKey};
use crate::weights::{NamedTensor, WeightBlob};

/// Zeroth-order real spherical harmonic, `1 / (2·sqrt(π))`.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const MAX_SH_DEGREE: usize = 3;
const LOG_SCALE_MIN: f64 = -10.0;
const LOG_SCALE_MAX: f64 = 3.0;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Index layout of one raw parameter vector:
/// offset (3) | opacity (1) | log-scale (3) | quaternion wxyz (4) | SH (3·(L+1)²).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub sh_degree: usize,
}

impl ParamLayout {
    pub const OFFSET: usize = 0;
    pub const OPACITY: usize = 3;
    pub const SCALE: usize = 4;
    pub const ROTATION: usize = 7;
    pub const SH: usize = 11;

    pub fn new(sh_degree: usize) -> Result<Self> {
        if sh_degree > MAX_SH_DEGREE {
            return Err(Error::Config(format!("SH degree {sh_degree} exceeds {MAX_SH_DEGREE}")));
        }
        Ok(ParamLayout { sh_degree })
    }

    pub fn sh_coeffs(&self) -> usize {
        (self.sh_degree + 1) * (self.sh_degree + 1)
    }

    /// Values per voxel; never zero.
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        Self::SH + 3 * self.sh_coeffs()
    }
}

/// Raw head outputs, one row of `layout.len()` values per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGaussianParams {
    pub layout: ParamLayout,
    pub keys: Vec<VoxelKey>,
    pub values: Vec<f64>,
}

impl RawGaussianParams {
    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.layout.len();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// Linear 1×1×1 head mapping `channels` voxel features to raw parameters.
#[derive(Debug, Clone)]
pub struct GaussianHead {
    pub layout: ParamLayout,
    pub channels: usize,
    weights: ConvWeights,
}

impl GaussianHead {
    pub fn weight_layout(channels: usize, layout: ParamLayout) -> Vec<(String, Vec<usize>)> {
        vec![
            ("head.weight".into(), vec![1, channels, layout.len()]),
            ("head.bias".into(), vec![layout.len()]),
        ]
    }

    pub fn from_blob(channels: usize, layout: ParamLayout, blob: &WeightBlob) -> Result<Self> {
        let expected = Self::weight_layout(channels, layout);
        blob.check_layout(&expected)?;
        let w = blob.expect("head.weight", &expected[0].1)?.to_f64();
        let b = blob.expect("head.bias", &expected[1].1)?.to_f64();
        let weights = ConvWeights::new(KernelSize::One, channels, layout.len(), w, Some(b))
            .map_err(|e| Error::WeightLoad(e.to_string()))?;
        Ok(GaussianHead {
            layout,
            channels,
            weights,
        })
    }

    /// Head that copies feature channels 0..3 into the SH DC term. Those
    /// channels hold centered intensity `I − ½`, so the decoded color equals
    /// the pooled RGB. Every other parameter is a
    /// constant bias.
    pub fn color_copy_blob(channels: usize, layout: ParamLayout, constants: &ColorCopyConstants) -> Result<WeightBlob> {
        if channels < 3 {
            return Err(Error::Config(
                "color-copy head needs at least 3 feature channels".into(),
            ));
        }
        let p = layout.len();
        let mut weight = NamedTensor::zeros("head.weight", &[1, channels, p]);
        let mut bias = NamedTensor::zeros("head.bias", &[p]);
        for c in 0..3 {
            weight.data[c * p + ParamLayout::SH + c] = (1.0 / SH_C0) as f32;
        }
        for a in 0..3 {
            bias.data[ParamLayout::OFFSET + a] = constants.offset_logit;
            bias.data[ParamLayout::SCALE + a] = constants.log_scale;
        }
        bias.data[ParamLayout::OPACITY] = constants.opacity_logit;
        bias.data[ParamLayout::ROTATION] = 1.0;
        Ok(WeightBlob {
            tensors: vec![weight, bias],
        })
    }

    pub fn decode(&self, grid: &SparseTensor) -> Result<RawGaussianParams> {
        if grid.channels != self.channels {
            return Err(Error::WeightLoad(format!(
                "head expects {} channels, grid has {}",
                self.channels, grid.channels
            )));
        }
        let out = submanifold_conv(grid, &self.weights)?;
        Ok(RawGaussianParams {
            layout: self.layout,
            keys: out.coords,
            values: out.feats,
        })
    }
}

/// Constant biases used by [`GaussianHead::color_copy_blob`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorCopyConstants {
    pub offset_logit: f32,
    pub opacity_logit: f32,
    /// Pre-clamp log-scale in voxel units.
    pub log_scale: f32,
}

impl Default for ColorCopyConstants {
    fn default() -> Self {
        ColorCopyConstants {
            offset_logit: -30.0,
            opacity_logit: 4.0,
            log_scale: -0.5,
        }
    }
}

/// One raw parameter vector per occupied voxel.
pub fn decode_raw(grid: &SparseTensor, head_weights: &WeightBlob, layout: ParamLayout) -> Result<RawGaussianParams> {
    GaussianHead::from_blob(grid.channels, layout, head_weights)?.decode(grid)
}

/// Activated Gaussian. Opacity and scale are kept in their pre-activation
/// (logit / log) form, which is also what the PLY format stores.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian3D {
    pub center: Vector3<f64>,
    pub opacity_logit: f64,
    pub log_scale: Vector3<f64>,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    /// `(L+1)²` RGB triples, coefficient-major.
    pub sh: Vec<f64>,
}

impl Gaussian3D {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let [w, x, y, z] = self.rotation;
        UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
            .to_rotation_matrix()
            .into_inner()
    }

    /// `R diag(scale²) Rᵀ`
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let s = self.scale();
        let m = r * Matrix3::from_diagonal(&s);
        m * m.transpose()
    }
}

/// How the raw offset maps into the voxel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianActivation {
    pub voxel_size: f64,
    /// Offset radius `r` in world units.
    pub radius: f64,
    /// Use `r·(σ(x) − ½)` instead of `r·σ(x)`.
    pub symmetric_offset: bool,
}

impl GaussianActivation {
    /// Radius `multiplier × voxel_size`.
    pub fn new(voxel_size: f64, multiplier: f64, symmetric_offset: bool) -> Result<Self> {
        let radius = multiplier * voxel_size;
        if !(voxel_size > 0.0 && radius > 0.0) {
            return Err(Error::Config(format!(
                "offset radius must be positive (voxel size {voxel_size}, multiplier {multiplier})"
            )));
        }
        Ok(GaussianActivation {
            voxel_size,
            radius,
            symmetric_offset,
        })
    }
}

/// Center = `r·σ(μ̄) + voxel center`, opacity = `σ(ᾱ)`,
/// scale = `exp(clamp(s̄, −10, 3))·v_s`, rotation = `q̄/|q̄|` (identity for `q̄ = 0`).
pub fn activate(raw: &[f64], layout: ParamLayout, key: VoxelKey, act: &GaussianActivation) -> Gaussian3D {
    debug_assert_eq!(raw.len(), layout.len());
    let base = voxel_center(key, act.voxel_size);
    let shift = if act.symmetric_offset { 0.5 } else { 0.0 };
    let center = Vector3::from_fn(|a, _| base[a] + act.radius * (sigmoid(raw[ParamLayout::OFFSET + a]) - shift));
    let ln_vs = act.voxel_size.ln();
    let log_scale = Vector3::from_fn(|a, _| raw[ParamLayout::SCALE + a].clamp(LOG_SCALE_MIN, LOG_SCALE_MAX) + ln_vs);
    let q = &raw[ParamLayout::ROTATION..ParamLayout::ROTATION + 4];
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rotation = if norm > 1e-12 && norm.is_finite() {
        [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm]
    } else {
        [1.0, 0.0, 0.0, 0.0]
    };
    Gaussian3D {
        center,
        opacity_logit: raw[ParamLayout::OPACITY],
        log_scale,
        rotation,
        sh: raw[ParamLayout::SH..].to_vec(),
    }
}

/// Flat f32 storage of decoded Gaussians, ordered by voxel key.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianSet {
    pub sh_degree: usize,
    pub centers: Vec<[f32; 3]>,
    pub opacity_logits: Vec<f32>,
    pub log_scales: Vec<[f32; 3]>,
    pub rotations: Vec<[f32; 4]>,
    /// `len × 3·(L+1)²`, coefficient-major RGB triples.
    pub sh: Vec<f32>,
    pub keys: Vec<VoxelKey>,
}

impl GaussianSet {
    pub fn new(sh_degree: usize) -> Self {
        GaussianSet {
            sh_degree,
            ..Default::default()
        }
    }

    pub fn sh_len(&self) -> usize {
        3 * (self.sh_degree + 1) * (self.sh_degree + 1)
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn push(&mut self, g: &Gaussian3D, key: VoxelKey) {
        debug_assert_eq!(g.sh.len(), self.sh_len());
        self.centers.push(g.center.map(|v| v as f32).into());
        self.opacity_logits.push(g.opacity_logit as f32);
        self.log_scales.push(g.log_scale.map(|v| v as f32).into());
        self.rotations.push(g.rotation.map(|v| v as f32));
        self.sh.extend(g.sh.iter().map(|&v| v as f32));
        self.keys.push(key);
    }

    pub fn sh_of(&self, i: usize) -> &[f32] {
        let n = self.sh_len();
        &self.sh[i * n..(i + 1) * n]
    }

    /// Gaussian `i` widened back to f64.
    pub fn get(&self, i: usize) -> Gaussian3D {
        let q = self.rotations[i].map(|v| v as f64);
        Gaussian3D {
            center: Vector3::from(self.centers[i].map(|v| v as f64)),
            opacity_logit: self.opacity_logits[i] as f64,
            log_scale: Vector3::from(self.log_scales[i].map(|v| v as f64)),
            rotation: q,
            sh: self.sh_of(i).iter().map(|&v| v as f64).collect(),
        }
    }

    /// Copy with the Gaussians reordered by `perm` (new index `n` takes old `perm[n]`).
    pub fn permuted(&self, perm: &[usize]) -> GaussianSet {
        let mut out = GaussianSet::new(self.sh_degree);
        for &i in perm {
            out.centers.push(self.centers[i]);
            out.opacity_logits.push(self.opacity_logits[i]);
            out.log_scales.push(self.log_scales[i]);
            out.rotations.push(self.rotations[i]);
            out.sh.extend_from_slice(self.sh_of(i));
            out.keys.push(self.keys[i]);
        }
        out
    }

    pub fn summary(&self) -> GaussianSummary {
        let mut min = [f32::INFINITY; 3];
        let mut max = [f32::NEG_INFINITY; 3];
        for c in &self.centers {
            for a in 0..3 {
                min[a] = min[a].min(c[a]);
                max[a] = max[a].max(c[a]);
            }
        }
        let mut histogram = [0u64; 10];
        for &l in &self.opacity_logits {
            let a = sigmoid(l as f64);
            histogram[((a * 10.0) as usize).min(9)] += 1;
        }
        GaussianSummary {
            count: self.len(),
            bbox: (!self.is_empty()).then_some(BoundingBox {
                min: min.map(f64::from),
                max: max.map(f64::from),
            }),
            opacity_histogram: histogram,
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct BoundingBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

/// Machine-readable overview of a Gaussian set. `opacity_histogram[d]` counts
/// Gaussians with opacity in `[d/10, (d+1)/10)`.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GaussianSummary {
    pub count: usize,
    pub bbox: Option<BoundingBox>,
    pub opacity_histogram: [u64; 10],
}

/// Decodes and activates every voxel into a Gaussian set.
pub fn decode_gaussians(raw: &RawGaussianParams, act: &GaussianActivation) -> GaussianSet {
    let mut set = GaussianSet::new(raw.layout.sh_degree);
    for (i, key) in raw.keys.iter().enumerate() {
        set.push(&activate(raw.row(i), raw.layout, *key, act), *key);
    }
    set
}

// --- PLY ---

fn ply_properties(sh_degree: usize) -> Vec<String> {
    let rest = 3 * ((sh_degree + 1) * (sh_degree + 1) - 1);
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..rest).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

const KEY_PROPERTIES: [&str; 3] = ["voxel_i", "voxel_j", "voxel_k"];

/// Binary little-endian PLY in the layout common to 3DGS tools, plus integer
/// voxel provenance. `input_views` is recorded as a header comment.
pub fn encode_ply(set: &GaussianSet, input_views: Option<usize>) -> Result<Vec<u8>> {
    if set.is_empty() {
        return Err(Error::InvalidInput("refusing to export an empty Gaussian set".into()));
    }
    let props = ply_properties(set.sh_degree);
    let mut header = String::from("ply\nformat binary_little_endian 1.0\ncomment generated by volsplat\n");
    if let Some(n) = input_views {
        header += &format!("comment input_views {n}\n");
    }
    header += &format!("element vertex {}\n", set.len());
    for p in &props {
        header += &format!("property float {p}\n");
    }
    for p in KEY_PROPERTIES {
        header += &format!("property int {p}\n");
    }
    header += "end_header\n";
    let mut out = header.into_bytes();
    let coeffs = (set.sh_degree + 1) * (set.sh_degree + 1);
    for i in 0..set.len() {
        let mut row: Vec<f32> = Vec::with_capacity(props.len());
        row.extend(set.centers[i]);
        row.extend([0.0; 3]);
        let sh = set.sh_of(i);
        row.extend(&sh[..3]);
        // f_rest is channel-major: all R coefficients, then G, then B
        for c in 0..3 {
            row.extend((1..coeffs).map(|k| sh[k * 3 + c]));
        }
        row.push(set.opacity_logits[i]);
        row.extend(set.log_scales[i]);
        row.extend(set.rotations[i]);
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in set.keys[i].as_array() {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn export_ply(set: &GaussianSet, input_views: Option<usize>, path: &Path) -> Result<()> {
    let bytes = encode_ply(set, input_views)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Parsed PLY plus the `input_views` comment if present.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyGaussians {
    pub set: GaussianSet,
    pub input_views: Option<usize>,
}

pub fn decode_ply(bytes: &[u8]) -> Result<PlyGaussians> {
    let marker = b"end_header\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::Format("PLY header has no end_header".into()))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::Format("PLY header is not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(Error::Format("not a PLY file".into()));
    }
    let mut count = None;
    let mut props: Vec<(String, String)> = Vec::new();
    let mut input_views = None;
    let mut in_vertex = false;
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", ..] => return Err(Error::Format(format!("unsupported PLY format line {line:?}"))),
            ["comment", "input_views", n] => input_views = n.parse().ok(),
            ["comment", ..] | [] => {}
            ["element", "vertex", n] => {
                count = Some(
                    n.parse::<usize>()
                        .map_err(|_| Error::Format("bad vertex count".into()))?,
                );
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", ty, name] if in_vertex => props.push((ty.to_string(), name.to_string())),
            ["property", ..] if in_vertex => return Err(Error::Format(format!("unsupported property {line:?}"))),
            _ => {}
        }
    }
    let count = count.ok_or_else(|| Error::Format("PLY has no vertex element".into()))?;
    for (ty, name) in &props {
        if !matches!(ty.as_str(), "float" | "int") {
            return Err(Error::Format(format!("property {name} has unsupported type {ty}")));
        }
    }
    let rest = props.iter().filter(|(_, n)| n.starts_with("f_rest_")).count();
    let sh_degree = (0..=MAX_SH_DEGREE)
        .find(|l| 3 * ((l + 1) * (l + 1) - 1) == rest)
        .ok_or_else(|| Error::Format(format!("{rest} f_rest properties match no SH degree")))?;
    let col = |name: &str| {
        props
            .iter()
            .position(|(_, n)| n == name)
            .ok_or_else(|| Error::Format(format!("PLY lacks property {name}")))
    };
    let float_cols = ply_properties(sh_degree)
        .iter()
        .map(|n| col(n))
        .collect::<Result<Vec<_>>>()?;
    let key_cols: [Option<usize>; 3] = KEY_PROPERTIES.map(|n| col(n).ok());

    let stride = props.len() * 4;
    let body = &bytes[end + marker.len()..];
    if body.len() != count * stride {
        return Err(Error::Format(format!(
            "PLY body is {} bytes, expected {count} × {stride}",
            body.len()
        )));
    }
    let mut set = GaussianSet::new(sh_degree);
    let coeffs = (sh_degree + 1) * (sh_degree + 1);
    for rec in body.chunks_exact(stride) {
        let word = |c: usize| -> [u8; 4] { rec[c * 4..c * 4 + 4].try_into().unwrap() };
        let f = |k: usize| f32::from_le_bytes(word(float_cols[k]));
        set.centers.push([f(0), f(1), f(2)]);
        let mut sh = vec![0.0f32; 3 * coeffs];
        sh[..3].copy_from_slice(&[f(6), f(7), f(8)]);
        for c in 0..3 {
            for k in 1..coeffs {
                sh[k * 3 + c] = f(9 + c * (coeffs - 1) + (k - 1));
            }
        }
        set.sh.extend(sh);
        let o = 9 + 3 * (coeffs - 1);
        set.opacity_logits.push(f(o));
        set.log_scales.push([f(o + 1), f(o + 2), f(o + 3)]);
        set.rotations.push([f(o + 4), f(o + 5), f(o + 6), f(o + 7)]);
        let key = key_cols.map(|c| c.map_or(0, |c| i32::from_le_bytes(word(c))));
        set.keys.push(VoxelKey::new(key[0], key[1], key[2]));
    }
    Ok(PlyGaussians { set, input_views })
}

pub fn import_ply(path: &Path) -> Result<PlyGaussians> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ply(&bytes)
}
