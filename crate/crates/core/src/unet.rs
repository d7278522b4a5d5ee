//! Symmetric sparse 3D U-Net predicting a residual field on the occupied voxels.
//!
//! Encoder level `l` runs `blocks` submanifold 3×3×3 convolutions (level 0
//! first maps the input width to `levels[0]`); levels below the first are
//! entered through a stride-2 convolution. The decoder mirrors it with a
//! transposed convolution onto the saved encoder sites, a channel concat with
//! the skip, a 1×1×1 fusion convolution and `blocks` more convolutions. A final
//! linear 1×1×1 layer maps back to the input width.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::sparse::{Activation, ConvLayer, ConvLayerSpec, ConvMode, ConvWeights, KernelSize, SparseTensor};
use crate::weights::WeightBlob;

#[derive(Debug, Clone, PartialEq)]
pub struct UNetSpec {
    pub in_channels: usize,
    /// Channel width per level, finest first.
    pub levels: Vec<usize>,
    pub blocks_per_level: usize,
    pub activation: Activation,
}

impl UNetSpec {
    /// Three levels `[C, 2C, 4C]`, two blocks per level, ReLU.
    pub fn default_for(channels: usize) -> Self {
        UNetSpec {
            in_channels: channels,
            levels: vec![channels, 2 * channels, 4 * channels],
            blocks_per_level: 2,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.len() < 2 {
            return Err(Error::Config("U-Net needs at least two levels".into()));
        }
        if self.in_channels == 0 || self.levels.contains(&0) {
            return Err(Error::Config("U-Net channel widths must be positive".into()));
        }
        if self.blocks_per_level == 0 {
            return Err(Error::Config("U-Net needs at least one block per level".into()));
        }
        Ok(())
    }

    fn layer(
        &self,
        cin: usize,
        cout: usize,
        kernel: KernelSize,
        mode: ConvMode,
        activation: Activation,
    ) -> ConvLayerSpec {
        ConvLayerSpec {
            in_channels: cin,
            out_channels: cout,
            kernel,
            mode,
            has_bias: true,
            activation,
        }
    }

    /// Layers in execution order.
    pub fn layers(&self) -> Vec<(String, ConvLayerSpec)> {
        use ConvMode::*;
        use KernelSize::*;
        let act = self.activation;
        let w = &self.levels;
        let mut out = Vec::new();
        for (l, &width) in w.iter().enumerate() {
            if l > 0 {
                out.push((format!("down{l}"), self.layer(w[l - 1], width, Three, StridedDown, act)));
            }
            for b in 0..self.blocks_per_level {
                let cin = if l == 0 && b == 0 { self.in_channels } else { width };
                out.push((
                    format!("enc{l}.conv{b}"),
                    self.layer(cin, width, Three, Submanifold, act),
                ));
            }
        }
        for l in (0..w.len() - 1).rev() {
            out.push((format!("up{l}"), self.layer(w[l + 1], w[l], Three, TransposedUp, act)));
            out.push((format!("fuse{l}"), self.layer(2 * w[l], w[l], One, Submanifold, act)));
            for b in 0..self.blocks_per_level {
                out.push((
                    format!("dec{l}.conv{b}"),
                    self.layer(w[l], w[l], Three, Submanifold, act),
                ));
            }
        }
        out.push((
            "out".into(),
            self.layer(w[0], self.in_channels, One, Submanifold, Activation::None),
        ));
        out
    }

    /// Tensor names and shapes a matching [`WeightBlob`] must contain.
    pub fn weight_layout(&self) -> Vec<(String, Vec<usize>)> {
        self.layers()
            .into_iter()
            .flat_map(|(name, spec)| {
                [
                    (format!("{name}.weight"), spec.weight_shape().to_vec()),
                    (format!("{name}.bias"), vec![spec.out_channels]),
                ]
            })
            .collect()
    }
}

/// Instantiated network with immutable weights.
#[derive(Debug, Clone)]
pub struct SparseUNet {
    spec: UNetSpec,
    layers: HashMap<String, ConvLayer>,
}

impl SparseUNet {
    pub fn new(spec: UNetSpec, weights: &WeightBlob) -> Result<Self> {
        spec.validate()?;
        weights.check_layout(&spec.weight_layout())?;
        let mut layers = HashMap::new();
        for (name, ls) in spec.layers() {
            let w = weights.expect(&format!("{name}.weight"), &ls.weight_shape())?.to_f64();
            let b = weights.expect(&format!("{name}.bias"), &[ls.out_channels])?.to_f64();
            let weights = ConvWeights::new(ls.kernel, ls.in_channels, ls.out_channels, w, Some(b))?;
            layers.insert(name, ConvLayer { spec: ls, weights });
        }
        Ok(SparseUNet { spec, layers })
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    fn run(&self, name: &str, x: &SparseTensor, target: Option<&[crate::voxel::VoxelKey]>) -> Result<SparseTensor> {
        self.layers[name].forward(x, target)
    }

    /// Residual field `R` on exactly the input sites.
    pub fn forward(&self, x: &SparseTensor) -> Result<SparseTensor> {
        if x.stride != 1 {
            return Err(Error::InvalidInput(format!(
                "U-Net input must have stride 1, got {}",
                x.stride
            )));
        }
        if x.channels != self.spec.in_channels {
            return Err(Error::Config(format!(
                "U-Net built for {} channels, input has {}",
                self.spec.in_channels, x.channels
            )));
        }
        let depth = self.spec.levels.len();
        let blocks = self.spec.blocks_per_level;
        let mut skips = Vec::with_capacity(depth);
        let mut h = x.clone();
        for l in 0..depth {
            if l > 0 {
                h = self.run(&format!("down{l}"), &h, None)?;
            }
            for b in 0..blocks {
                h = self.run(&format!("enc{l}.conv{b}"), &h, None)?;
            }
            skips.push(h.clone());
        }
        for l in (0..depth - 1).rev() {
            let skip = &skips[l];
            h = self.run(&format!("up{l}"), &h, Some(&skip.coords))?;
            h = h.concat(skip)?;
            h = self.run(&format!("fuse{l}"), &h, None)?;
            for b in 0..blocks {
                h = self.run(&format!("dec{l}.conv{b}"), &h, None)?;
            }
        }
        self.run("out", &h, None)
    }
}

/// One-shot forward pass.
pub fn unet_forward(x: &SparseTensor, spec: &UNetSpec, weights: &WeightBlob) -> Result<SparseTensor> {
    SparseUNet::new(spec.clone(), weights)?.forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::VoxelKey;

    fn small_spec() -> UNetSpec {
        UNetSpec {
            in_channels: 2,
            levels: vec![3, 4],
            blocks_per_level: 1,
            activation: Activation::Relu,
        }
    }

    fn input() -> SparseTensor {
        let coords = [[0, 0, 0], [1, 0, 0], [3, 2, 1], [-2, 1, 0]]
            .iter()
            .map(|c| VoxelKey::new(c[0], c[1], c[2]))
            .collect();
        SparseTensor::new(coords, vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5, 1.0, 1.0], 2, 1).unwrap()
    }

    #[test]
    fn default_layout_names() {
        let spec = UNetSpec::default_for(4);
        let names: Vec<_> = spec.layers().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            [
                "enc0.conv0",
                "enc0.conv1",
                "down1",
                "enc1.conv0",
                "enc1.conv1",
                "down2",
                "enc2.conv0",
                "enc2.conv1",
                "up1",
                "fuse1",
                "dec1.conv0",
                "dec1.conv1",
                "up0",
                "fuse0",
                "dec0.conv0",
                "dec0.conv1",
                "out"
            ]
        );
        let layout = spec.weight_layout();
        assert_eq!(layout[0], ("enc0.conv0.weight".to_string(), vec![27, 4, 4]));
        assert_eq!(layout.last().unwrap(), &("out.bias".to_string(), vec![4]));
    }

    #[test]
    fn zero_weights_zero_residual() {
        let spec = small_spec();
        let r = unet_forward(&input(), &spec, &WeightBlob::zeros(&spec.weight_layout())).unwrap();
        assert_eq!(r.coords, input().coords);
        assert!(r.feats.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_weights_are_deterministic_and_preserve_sites() {
        let spec = UNetSpec::default_for(2);
        let blob = WeightBlob::kaiming_uniform(&spec.weight_layout(), 5);
        let a = unet_forward(&input(), &spec, &blob).unwrap();
        let b = unet_forward(&input(), &spec, &blob).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.coords, input().coords);
        assert_eq!(a.channels, 2);
        assert!(a.feats.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn mismatched_weights_rejected() {
        let spec = small_spec();
        let other = UNetSpec {
            levels: vec![3, 5],
            ..small_spec()
        };
        let blob = WeightBlob::zeros(&other.weight_layout());
        assert!(matches!(
            unet_forward(&input(), &spec, &blob),
            Err(Error::WeightLoad(_))
        ));
    }

    #[test]
    fn spec_validation() {
        let mut spec = small_spec();
        spec.levels = vec![3];
        assert!(spec.validate().is_err());
        spec.levels = vec![3, 0];
        assert!(spec.validate().is_err());
        let mut strided = input();
        strided.stride = 2;
        let s = small_spec();
        assert!(unet_forward(&strided, &s, &WeightBlob::zeros(&s.weight_layout())).is_err());
    }
}
