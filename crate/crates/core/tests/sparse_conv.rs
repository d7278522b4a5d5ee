mod oracles;

use oracles::*;
use proptest::prelude::*;
use rand::Rng;
use volsplat_core::sparse::{
    residual_refine, strided_down, submanifold_conv, transposed_up, Activation, KernelSize, SparseTensor,
};
use volsplat_core::unet::{unet_forward, UNetSpec};
use volsplat_core::voxel::VoxelKey;
use volsplat_core::weights::WeightBlob;

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "entry {i}: {x} vs {y}");
    }
}

#[test]
fn submanifold_matches_dense_oracle() {
    let mut r = rng(1);
    for trial in 0..20 {
        let extent = r.gen_range(2..=16);
        let (ci, co) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let density = r.gen_range(0.02..0.2);
        let x = random_tensor(&mut r, extent, density, ci, 1);
        let kernel = if trial % 4 == 0 {
            KernelSize::One
        } else {
            KernelSize::Three
        };
        let w = random_weights(&mut r, kernel, ci, co, true);
        let y = submanifold_conv(&x, &w).unwrap();
        assert_eq!(y.coords, x.coords);
        assert_close(&y.feats, &dense_submanifold(&x, &w), 1e-9);
    }
}

#[test]
fn strided_and_transposed_match_dense_oracles() {
    let mut r = rng(2);
    for _ in 0..10 {
        let extent = r.gen_range(2..=12);
        let x = random_tensor(&mut r, extent, 0.15, 3, 1);
        let w = random_weights(&mut r, KernelSize::Three, 3, 2, true);
        let y = strided_down(&x, &w).unwrap();
        let (sites, feats) = dense_strided(&x, &w);
        let mut ours: Vec<(VoxelKey, Vec<f64>)> = y
            .coords
            .iter()
            .enumerate()
            .map(|(n, c)| (*c, y.feat(n).to_vec()))
            .collect();
        ours.sort_by_key(|e| e.0);
        assert_eq!(ours.iter().map(|e| e.0).collect::<Vec<_>>(), sites);
        assert_close(&ours.into_iter().flat_map(|e| e.1).collect::<Vec<_>>(), &feats, 1e-9);
        assert_eq!(y.stride, 2);

        let up_w = random_weights(&mut r, KernelSize::Three, 2, 3, true);
        let up = transposed_up(&y, &x.coords, &up_w).unwrap();
        assert_eq!(up.coords, x.coords);
        assert_eq!(up.stride, 1);
        assert_close(&up.feats, &dense_transposed(&y, &x.coords, &up_w), 1e-9);
    }
}

#[test]
fn strided_transposed_adjoint_identity() {
    let mut r = rng(3);
    for _ in 0..20 {
        let (ci, co) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let extent = r.gen_range(2..=16);
        let x = random_tensor(&mut r, extent, 0.1, ci, 1);
        let w = random_weights(&mut r, KernelSize::Three, ci, co, false);
        let dx = strided_down(&x, &w).unwrap();
        let y_feats: Vec<f64> = (0..dx.feats.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y = SparseTensor::new(dx.coords.clone(), y_feats, co, 2).unwrap();
        let uy = transposed_up(&y, &x.coords, &transpose_taps(&w)).unwrap();
        let lhs = dot(&dx.feats, &y.feats);
        let rhs = dot(&x.feats, &uy.feats);
        assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }
}

/// Two-level U-Net written out layer by layer with the dense oracles.
fn oracle_two_level(x: &SparseTensor, spec: &UNetSpec, blob: &WeightBlob) -> Vec<f64> {
    let layer = |name: &str| {
        let (_, ls) = spec.layers().into_iter().find(|(n, _)| n == name).unwrap();
        volsplat_core::sparse::ConvWeights::new(
            ls.kernel,
            ls.in_channels,
            ls.out_channels,
            blob.get(&format!("{name}.weight")).unwrap().to_f64(),
            Some(blob.get(&format!("{name}.bias")).unwrap().to_f64()),
        )
        .unwrap()
    };
    let relu = |v: Vec<f64>| v.into_iter().map(|a| a.max(0.0)).collect::<Vec<_>>();
    let sub = |t: &SparseTensor, name: &str| {
        let w = layer(name);
        SparseTensor::new(
            t.coords.clone(),
            relu(dense_submanifold(t, &w)),
            w.out_channels,
            t.stride,
        )
        .unwrap()
    };
    let e0 = sub(x, "enc0.conv0");
    let wd = layer("down1");
    let (sites, feats) = dense_strided(&e0, &wd);
    let d1 = SparseTensor::new(sites, relu(feats), wd.out_channels, 2).unwrap();
    let e1 = sub(&d1, "enc1.conv0");
    let wu = layer("up0");
    let up = SparseTensor::new(
        e0.coords.clone(),
        relu(dense_transposed(&e1, &e0.coords, &wu)),
        wu.out_channels,
        1,
    )
    .unwrap();
    let cat = up.concat(&e0).unwrap();
    let fused = sub(&cat, "fuse0");
    let dec = sub(&fused, "dec0.conv0");
    dense_submanifold(&dec, &layer("out"))
}

#[test]
fn two_level_unet_matches_composed_oracle() {
    let mut r = rng(4);
    let spec = UNetSpec {
        in_channels: 2,
        levels: vec![3, 4],
        blocks_per_level: 1,
        activation: Activation::Relu,
    };
    for seed in 0..5 {
        let x = random_tensor(&mut r, 8, 0.2, 2, 1);
        let blob = WeightBlob::kaiming_uniform(&spec.weight_layout(), seed);
        let ours = unet_forward(&x, &spec, &blob).unwrap();
        assert_eq!(ours.coords, x.coords);
        // weights are f32 but both paths widen them identically
        assert_close(&ours.feats, &oracle_two_level(&x, &spec, &blob), 1e-9);
    }
}

#[test]
fn zero_unet_keeps_grid_bit_exact() {
    let mut r = rng(5);
    let spec = UNetSpec::default_for(3);
    let x = random_tensor(&mut r, 10, 0.1, 3, 1);
    let res = unet_forward(&x, &spec, &WeightBlob::zeros(&spec.weight_layout())).unwrap();
    assert_eq!(residual_refine(&x, &res).unwrap(), x);
}

fn linear_spec() -> UNetSpec {
    UNetSpec {
        in_channels: 2,
        levels: vec![2, 3, 4],
        blocks_per_level: 1,
        activation: Activation::None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn linear_unet_without_bias_is_linear(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let spec = linear_spec();
        let mut blob = WeightBlob::kaiming_uniform(&spec.weight_layout(), seed);
        for t in &mut blob.tensors {
            if t.name.ends_with(".bias") {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut r = rng(seed);
        let x = random_tensor(&mut r, 6, 0.3, 2, 1);
        let y_feats: Vec<f64> = (0..x.feats.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y = SparseTensor::new(x.coords.clone(), y_feats, 2, 1).unwrap();
        let mix_feats = x.feats.iter().zip(&y.feats).map(|(p, q)| a * p + b * q).collect();
        let mix = SparseTensor::new(x.coords.clone(), mix_feats, 2, 1).unwrap();
        let fx = unet_forward(&x, &spec, &blob).unwrap();
        let fy = unet_forward(&y, &spec, &blob).unwrap();
        let fm = unet_forward(&mix, &spec, &blob).unwrap();
        for n in 0..fm.feats.len() {
            let expect = a * fx.feats[n] + b * fy.feats[n];
            prop_assert!((fm.feats[n] - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn submanifold_preserves_sites(seed in 0u64..1000, extent in 1i32..8) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, extent, 0.3, 2, 1);
        let w = random_weights(&mut r, KernelSize::Three, 2, 3, true);
        let y = submanifold_conv(&x, &w).unwrap();
        prop_assert_eq!(y.coords, x.coords);
    }
}
