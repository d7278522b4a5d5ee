//! Sparse voxel tensors and the three sparse 3D convolution flavours used by
//! the refinement U-Net.
//!
//! Coordinates are expressed in units of the tensor's own level: a stride-2
//! tensor's `(1, 0, 0)` sits at fine coordinate `(2, 0, 0)`. Kernel taps are
//! visited in a fixed offset order so every output is a deterministic sum.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::voxel::{SparseVoxelGrid, VoxelKey};

#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor {
    pub coords: Vec<VoxelKey>,
    /// `coords.len() × channels`, row-major.
    pub feats: Vec<f64>,
    pub channels: usize,
    pub stride: u32,
}

impl SparseTensor {
    pub fn new(coords: Vec<VoxelKey>, feats: Vec<f64>, channels: usize, stride: u32) -> Result<Self> {
        let t = SparseTensor {
            coords,
            feats,
            channels,
            stride,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feats.len() != self.coords.len() * self.channels {
            return Err(Error::InvalidInput(format!(
                "{} coords × {} channels does not match {} feature values",
                self.coords.len(),
                self.channels,
                self.feats.len()
            )));
        }
        if !self.stride.is_power_of_two() {
            return Err(Error::InvalidInput(format!(
                "stride {} is not a power of two",
                self.stride
            )));
        }
        let mut seen = std::collections::HashSet::with_capacity(self.coords.len());
        if !self.coords.iter().all(|c| seen.insert(*c)) {
            return Err(Error::InvalidInput("duplicate coordinates in sparse tensor".into()));
        }
        Ok(())
    }

    pub fn from_grid(grid: &SparseVoxelGrid) -> Self {
        SparseTensor {
            coords: grid.keys.clone(),
            feats: grid.features.clone(),
            channels: grid.channels,
            stride: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feat(&self, i: usize) -> &[f64] {
        &self.feats[i * self.channels..(i + 1) * self.channels]
    }

    pub fn index(&self) -> HashMap<VoxelKey, usize> {
        self.coords.iter().enumerate().map(|(i, c)| (*c, i)).collect()
    }

    /// Channel-wise concatenation `[self, other]` over identical coordinates.
    pub fn concat(&self, other: &SparseTensor) -> Result<SparseTensor> {
        if self.coords != other.coords {
            return Err(Error::InvalidInput("concat needs identical coordinates".into()));
        }
        let c = self.channels + other.channels;
        let mut feats = Vec::with_capacity(self.len() * c);
        for i in 0..self.len() {
            feats.extend_from_slice(self.feat(i));
            feats.extend_from_slice(other.feat(i));
        }
        Ok(SparseTensor {
            coords: self.coords.clone(),
            feats,
            channels: c,
            stride: self.stride,
        })
    }
}

/// Residual update `V' = V + R` on identical coordinates. Zero residual entries
/// leave the input value untouched (bit-for-bit, including signed zeros).
pub fn residual_refine(v: &SparseTensor, r: &SparseTensor) -> Result<SparseTensor> {
    if v.coords != r.coords || v.channels != r.channels {
        return Err(Error::InvalidInput(
            "residual field does not match voxel coordinates".into(),
        ));
    }
    let feats = v
        .feats
        .iter()
        .zip(&r.feats)
        .map(|(&a, &b)| if b == 0.0 { a } else { a + b })
        .collect();
    Ok(SparseTensor {
        coords: v.coords.clone(),
        feats,
        channels: v.channels,
        stride: v.stride,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelSize {
    One,
    Three,
}

impl KernelSize {
    pub fn volume(self) -> usize {
        match self {
            KernelSize::One => 1,
            KernelSize::Three => 27,
        }
    }

    /// Kernel offsets in weight order: `(dx, dy, dz)` with `dz` fastest.
    pub fn offsets(self) -> Vec<[i32; 3]> {
        match self {
            KernelSize::One => vec![[0, 0, 0]],
            KernelSize::Three => (-1..=1)
                .flat_map(|dx| (-1..=1).flat_map(move |dy| (-1..=1).map(move |dz| [dx, dy, dz])))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    Submanifold,
    StridedDown,
    TransposedUp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: KernelSize,
    pub mode: ConvMode,
    pub has_bias: bool,
    pub activation: Activation,
}

impl ConvLayerSpec {
    pub fn weight_shape(&self) -> [usize; 3] {
        [self.kernel.volume(), self.in_channels, self.out_channels]
    }
}

/// Kernel weights laid out `[offset][in][out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub kernel: KernelSize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl ConvWeights {
    pub fn new(
        kernel: KernelSize,
        in_channels: usize,
        out_channels: usize,
        weight: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Config("convolution channel counts must be ≥1".into()));
        }
        if weight.len() != kernel.volume() * in_channels * out_channels {
            return Err(Error::Config(format!(
                "weight has {} values, expected {}×{in_channels}×{out_channels}",
                weight.len(),
                kernel.volume()
            )));
        }
        if bias.as_ref().is_some_and(|b| b.len() != out_channels) {
            return Err(Error::Config("bias length differs from output channels".into()));
        }
        Ok(ConvWeights {
            kernel,
            in_channels,
            out_channels,
            weight,
            bias,
        })
    }

    pub fn zeros(kernel: KernelSize, in_channels: usize, out_channels: usize) -> Self {
        ConvWeights {
            kernel,
            in_channels,
            out_channels,
            weight: vec![0.0; kernel.volume() * in_channels * out_channels],
            bias: Some(vec![0.0; out_channels]),
        }
    }

    fn check_input(&self, x: &SparseTensor) -> Result<()> {
        if x.channels != self.in_channels {
            return Err(Error::Config(format!(
                "layer expects {} input channels, tensor has {}",
                self.in_channels, x.channels
            )));
        }
        Ok(())
    }

    fn init(&self, out: &mut [f64]) {
        match &self.bias {
            Some(b) => out.copy_from_slice(b),
            None => out.iter_mut().for_each(|o| *o = 0.0),
        }
    }

    /// `out += W[tap]ᵀ · x`
    fn accumulate(&self, tap: usize, x: &[f64], out: &mut [f64]) {
        let (ci, co) = (self.in_channels, self.out_channels);
        let w = &self.weight[tap * ci * co..(tap + 1) * ci * co];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, wv) in out.iter_mut().zip(&w[i * co..(i + 1) * co]) {
                *o += xi * wv;
            }
        }
    }
}

fn apply_activation(feats: &mut [f64], activation: Activation) {
    if activation == Activation::Relu {
        feats.iter_mut().for_each(|v| *v = v.max(0.0));
    }
}

/// Convolution whose output sites are exactly the input sites.
pub fn submanifold_conv(x: &SparseTensor, w: &ConvWeights) -> Result<SparseTensor> {
    w.check_input(x)?;
    let index = x.index();
    let offsets = w.kernel.offsets();
    let co = w.out_channels;
    let mut feats = vec![0.0; x.len() * co];
    feats.par_chunks_mut(co).enumerate().for_each(|(n, out)| {
        w.init(out);
        let site = x.coords[n];
        for (tap, d) in offsets.iter().enumerate() {
            if let Some(&m) = index.get(&site.offset(*d)) {
                w.accumulate(tap, x.feat(m), out);
            }
        }
    });
    Ok(SparseTensor {
        coords: x.coords.clone(),
        feats,
        channels: co,
        stride: x.stride,
    })
}

fn half_floor(k: VoxelKey) -> VoxelKey {
    VoxelKey::new(k.i.div_euclid(2), k.j.div_euclid(2), k.k.div_euclid(2))
}

/// Stride-2 convolution. Output sites are the distinct `floor(coord / 2)`;
/// output `o` gathers input sites `2·o + δ` over the kernel offsets `δ`.
pub fn strided_down(x: &SparseTensor, w: &ConvWeights) -> Result<SparseTensor> {
    w.check_input(x)?;
    let mut coords: Vec<VoxelKey> = x.coords.iter().map(|&c| half_floor(c)).collect();
    coords.sort_unstable();
    coords.dedup();
    let index = x.index();
    let offsets = w.kernel.offsets();
    let co = w.out_channels;
    let mut feats = vec![0.0; coords.len() * co];
    feats.par_chunks_mut(co).enumerate().for_each(|(n, out)| {
        w.init(out);
        let o = coords[n];
        let base = VoxelKey::new(2 * o.i, 2 * o.j, 2 * o.k);
        for (tap, d) in offsets.iter().enumerate() {
            if let Some(&m) = index.get(&base.offset(*d)) {
                w.accumulate(tap, x.feat(m), out);
            }
        }
    });
    Ok(SparseTensor {
        coords,
        feats,
        channels: co,
        stride: x.stride * 2,
    })
}

/// Transposed stride-2 convolution onto the given finer sites: target `t`
/// receives `W[δ]ᵀ·x(o)` from every occupied coarse site with `t = 2·o + δ`.
/// Sites without a contributing neighbor receive the bias only.
pub fn transposed_up(x: &SparseTensor, target_coords: &[VoxelKey], w: &ConvWeights) -> Result<SparseTensor> {
    w.check_input(x)?;
    if x.stride < 2 {
        return Err(Error::InvalidInput("cannot upsample a stride-1 tensor".into()));
    }
    let index = x.index();
    let offsets = w.kernel.offsets();
    let co = w.out_channels;
    let mut feats = vec![0.0; target_coords.len() * co];
    feats.par_chunks_mut(co).enumerate().for_each(|(n, out)| {
        w.init(out);
        let t = target_coords[n];
        for (tap, d) in offsets.iter().enumerate() {
            let s = t.offset([-d[0], -d[1], -d[2]]);
            if s.i % 2 != 0 || s.j % 2 != 0 || s.k % 2 != 0 {
                continue;
            }
            if let Some(&m) = index.get(&VoxelKey::new(s.i / 2, s.j / 2, s.k / 2)) {
                w.accumulate(tap, x.feat(m), out);
            }
        }
    });
    Ok(SparseTensor {
        coords: target_coords.to_vec(),
        feats,
        channels: co,
        stride: x.stride / 2,
    })
}

/// A convolution together with its mode and activation.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub spec: ConvLayerSpec,
    pub weights: ConvWeights,
}

impl ConvLayer {
    pub fn forward(&self, x: &SparseTensor, target: Option<&[VoxelKey]>) -> Result<SparseTensor> {
        let mut y = match self.spec.mode {
            ConvMode::Submanifold => submanifold_conv(x, &self.weights)?,
            ConvMode::StridedDown => strided_down(x, &self.weights)?,
            ConvMode::TransposedUp => {
                let target =
                    target.ok_or_else(|| Error::InvalidInput("transposed layer needs target coordinates".into()))?;
                transposed_up(x, target, &self.weights)?
            }
        };
        apply_activation(&mut y.feats, self.spec.activation);
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(coords: &[[i32; 3]], channels: usize, feats: Vec<f64>, stride: u32) -> SparseTensor {
        SparseTensor::new(
            coords.iter().map(|c| VoxelKey::new(c[0], c[1], c[2])).collect(),
            feats,
            channels,
            stride,
        )
        .unwrap()
    }

    fn identity_kernel(c: usize) -> ConvWeights {
        let mut w = ConvWeights::zeros(KernelSize::Three, c, c);
        for i in 0..c {
            w.weight[13 * c * c + i * c + i] = 1.0;
        }
        w
    }

    #[test]
    fn center_tap_is_offset_13() {
        assert_eq!(KernelSize::Three.offsets()[13], [0, 0, 0]);
        assert_eq!(KernelSize::Three.offsets()[14], [0, 0, 1]);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = tensor(
            &[[0, 0, 0], [1, 0, 0], [0, 2, -1]],
            2,
            vec![1.0, -2.0, 3.5, 0.25, -1.0, 9.0],
            1,
        );
        let y = submanifold_conv(&x, &identity_kernel(2)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn isolated_voxel_uses_center_tap_only() {
        let x = tensor(&[[4, 4, 4]], 1, vec![2.0], 1);
        let w = ConvWeights::new(
            KernelSize::Three,
            1,
            1,
            (0..27).map(|v| v as f64).collect(),
            Some(vec![0.5]),
        )
        .unwrap();
        let y = submanifold_conv(&x, &w).unwrap();
        assert_eq!(y.feats, vec![13.0 * 2.0 + 0.5]);
    }

    #[test]
    fn strided_examples() {
        let x = tensor(&[[0, 0, 0], [1, 1, 1]], 1, vec![1.0, 1.0], 1);
        let y = strided_down(&x, &ConvWeights::zeros(KernelSize::Three, 1, 1)).unwrap();
        assert_eq!(y.coords, vec![VoxelKey::new(0, 0, 0)]);
        assert_eq!(y.stride, 2);

        let x = tensor(&[[5, 3, 7]], 1, vec![1.0], 1);
        let y = strided_down(&x, &ConvWeights::zeros(KernelSize::Three, 1, 1)).unwrap();
        assert_eq!(y.coords, vec![VoxelKey::new(2, 1, 3)]);

        let x = tensor(&[[-1, -2, -3]], 1, vec![1.0], 1);
        let y = strided_down(&x, &ConvWeights::zeros(KernelSize::Three, 1, 1)).unwrap();
        assert_eq!(y.coords, vec![VoxelKey::new(-1, -1, -2)]);
    }

    #[test]
    fn transposed_hits_targets_and_bias() {
        let coarse = tensor(&[[0, 0, 0]], 2, vec![1.0, 1.0], 2);
        let targets: Vec<_> = [[0, 0, 0], [1, 1, 0], [5, 5, 5]]
            .iter()
            .map(|c| VoxelKey::new(c[0], c[1], c[2]))
            .collect();
        let mut w = ConvWeights::zeros(KernelSize::Three, 2, 3);
        w.bias = Some(vec![0.5, -1.0, 2.0]);
        let y = transposed_up(&coarse, &targets, &w).unwrap();
        assert_eq!(y.coords, targets);
        assert_eq!(y.stride, 1);
        assert!(y.feats.chunks(3).all(|f| f == [0.5, -1.0, 2.0]));
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let x = tensor(&[[0, 0, 0]], 2, vec![1.0, 2.0], 1);
        assert!(matches!(
            submanifold_conv(&x, &identity_kernel(3)),
            Err(Error::Config(_))
        ));
        assert!(ConvWeights::new(KernelSize::Three, 1, 1, vec![0.0; 26], None).is_err());
    }

    #[test]
    fn residual_examples() {
        let v = tensor(&[[0, 0, 0], [1, 0, 0]], 2, vec![1.0, -0.0, 2.0, 3.0], 1);
        let zero = tensor(&[[0, 0, 0], [1, 0, 0]], 2, vec![0.0; 4], 1);
        let same = residual_refine(&v, &zero).unwrap();
        assert!(same.feats.iter().zip(&v.feats).all(|(a, b)| a.to_bits() == b.to_bits()));
        let r = tensor(&[[0, 0, 0], [1, 0, 0]], 2, vec![0.5, 1.0, -2.0, 0.0], 1);
        assert_eq!(residual_refine(&zero, &r).unwrap().feats, r.feats);
        let moved = tensor(&[[0, 0, 1], [1, 0, 0]], 2, vec![0.0; 4], 1);
        assert!(matches!(residual_refine(&v, &moved), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn tensor_invariants() {
        assert!(SparseTensor::new(vec![VoxelKey::default(); 2], vec![0.0; 2], 1, 1).is_err());
        assert!(SparseTensor::new(vec![VoxelKey::default()], vec![0.0; 1], 1, 3).is_err());
        assert!(SparseTensor::new(vec![VoxelKey::default()], vec![0.0; 2], 1, 1).is_err());
    }
}
