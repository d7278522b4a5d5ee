//! Brute-force reference implementations and random generators shared by the
//! integration tests. Nothing here reuses the engine's hashing, sorting or
//! tiling code paths.

#![allow(dead_code)]

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volsplat_core::image::Image;
use volsplat_core::sparse::{ConvWeights, KernelSize, SparseTensor};
use volsplat_core::voxel::{voxel_index, FeaturedPointCloud, VoxelKey};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// --- dense convolution ---

/// Dense box covering all coordinates plus a margin, zero where unoccupied.
pub struct Dense {
    lo: [i32; 3],
    dims: [usize; 3],
    channels: usize,
    data: Vec<f64>,
}

impl Dense {
    pub fn from_sparse(x: &SparseTensor, margin: i32) -> Dense {
        let mut lo = [i32::MAX; 3];
        let mut hi = [i32::MIN; 3];
        for c in &x.coords {
            for (a, v) in c.as_array().into_iter().enumerate() {
                lo[a] = lo[a].min(v - margin);
                hi[a] = hi[a].max(v + margin);
            }
        }
        let dims = [0, 1, 2].map(|a| (hi[a] - lo[a] + 1).max(0) as usize);
        let mut d = Dense {
            lo,
            dims,
            channels: x.channels,
            data: vec![0.0; dims.iter().product::<usize>() * x.channels],
        };
        for (n, c) in x.coords.iter().enumerate() {
            let at = d.offset(*c).expect("inside box");
            d.data[at..at + x.channels].copy_from_slice(x.feat(n));
        }
        d
    }

    fn offset(&self, k: VoxelKey) -> Option<usize> {
        let p = k.as_array();
        let mut idx = 0usize;
        for a in 0..3 {
            let r = p[a] - self.lo[a];
            if r < 0 || r as usize >= self.dims[a] {
                return None;
            }
            idx = idx * self.dims[a] + r as usize;
        }
        Some(idx * self.channels)
    }

    /// Feature at `k`, zeros outside the box.
    pub fn at(&self, k: VoxelKey) -> Vec<f64> {
        match self.offset(k) {
            Some(i) => self.data[i..i + self.channels].to_vec(),
            None => vec![0.0; self.channels],
        }
    }
}

fn taps(kernel: KernelSize) -> Vec<[i32; 3]> {
    let mut out = Vec::new();
    match kernel {
        KernelSize::One => out.push([0, 0, 0]),
        KernelSize::Three => {
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
    }
    out
}

/// `bias + Σ_taps W[tap]ᵀ · x(site(tap))` for an explicit list of input sites.
fn dense_gather(w: &ConvWeights, inputs: impl Fn(usize) -> Vec<f64>) -> Vec<f64> {
    let (ci, co) = (w.in_channels, w.out_channels);
    let mut out = w.bias.clone().unwrap_or_else(|| vec![0.0; co]);
    for t in 0..w.kernel.volume() {
        let x = inputs(t);
        for o in 0..co {
            for i in 0..ci {
                out[o] += x[i] * w.weight[(t * ci + i) * co + o];
            }
        }
    }
    out
}

pub fn dense_submanifold(x: &SparseTensor, w: &ConvWeights) -> Vec<f64> {
    let dense = Dense::from_sparse(x, 1);
    let taps = taps(w.kernel);
    x.coords
        .iter()
        .flat_map(|c| dense_gather(w, |t| dense.at(c.offset(taps[t]))))
        .collect()
}

/// Dense stride-2 convolution evaluated on every coarse site that covers an
/// occupied input: returns `(sites, features)`.
pub fn dense_strided(x: &SparseTensor, w: &ConvWeights) -> (Vec<VoxelKey>, Vec<f64>) {
    let dense = Dense::from_sparse(x, 2);
    let taps = taps(w.kernel);
    let mut sites: Vec<VoxelKey> = x
        .coords
        .iter()
        .map(|c| {
            let p = c.as_array().map(|v| (v as f64 / 2.0).floor() as i32);
            VoxelKey::new(p[0], p[1], p[2])
        })
        .collect();
    sites.sort();
    sites.dedup();
    let feats = sites
        .iter()
        .flat_map(|o| {
            let base = VoxelKey::new(2 * o.i, 2 * o.j, 2 * o.k);
            dense_gather(w, |t| dense.at(base.offset(taps[t])))
        })
        .collect();
    (sites, feats)
}

/// Dense transposed convolution: scatter every coarse site into the fine grid,
/// then read the requested targets.
pub fn dense_transposed(x: &SparseTensor, targets: &[VoxelKey], w: &ConvWeights) -> Vec<f64> {
    let (ci, co) = (w.in_channels, w.out_channels);
    let taps = taps(w.kernel);
    let mut acc: BTreeMap<VoxelKey, Vec<f64>> = BTreeMap::new();
    for (n, o) in x.coords.iter().enumerate() {
        let xin = x.feat(n);
        for (t, d) in taps.iter().enumerate() {
            let site = VoxelKey::new(2 * o.i + d[0], 2 * o.j + d[1], 2 * o.k + d[2]);
            let slot = acc.entry(site).or_insert_with(|| vec![0.0; co]);
            for o in 0..co {
                for i in 0..ci {
                    slot[o] += xin[i] * w.weight[(t * ci + i) * co + o];
                }
            }
        }
    }
    let bias = w.bias.clone().unwrap_or_else(|| vec![0.0; co]);
    targets
        .iter()
        .flat_map(|t| {
            let v = acc.get(t).cloned().unwrap_or_else(|| vec![0.0; co]);
            v.iter().zip(&bias).map(|(a, b)| a + b).collect::<Vec<_>>()
        })
        .collect()
}

/// Same kernel with input and output channels swapped per tap.
pub fn transpose_taps(w: &ConvWeights) -> ConvWeights {
    let (ci, co) = (w.in_channels, w.out_channels);
    let mut weight = vec![0.0; w.weight.len()];
    for t in 0..w.kernel.volume() {
        for i in 0..ci {
            for o in 0..co {
                weight[(t * co + o) * ci + i] = w.weight[(t * ci + i) * co + o];
            }
        }
    }
    ConvWeights::new(w.kernel, co, ci, weight, None).unwrap()
}

pub fn random_weights(rng: &mut ChaCha8Rng, kernel: KernelSize, ci: usize, co: usize, bias: bool) -> ConvWeights {
    let weight = (0..kernel.volume() * ci * co)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let bias = bias.then(|| (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect());
    ConvWeights::new(kernel, ci, co, weight, bias).unwrap()
}

/// Random occupancy inside an `extent³` box, at least one site.
pub fn random_tensor(rng: &mut ChaCha8Rng, extent: i32, density: f64, channels: usize, stride: u32) -> SparseTensor {
    let mut coords = Vec::new();
    for i in 0..extent {
        for j in 0..extent {
            for k in 0..extent {
                if rng.gen_bool(density) {
                    coords.push(VoxelKey::new(i - extent / 2, j - extent / 2, k - extent / 2));
                }
            }
        }
    }
    if coords.is_empty() {
        coords.push(VoxelKey::new(0, 0, 0));
    }
    let feats = (0..coords.len() * channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
    SparseTensor::new(coords, feats, channels, stride).unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// --- voxel pooling ---

/// Group-by mean with a plain map and sequential sums.
pub fn groupby_mean(cloud: &FeaturedPointCloud, voxel_size: f64) -> BTreeMap<VoxelKey, (Vec<f64>, u32)> {
    let mut groups: BTreeMap<VoxelKey, (Vec<f64>, u32)> = BTreeMap::new();
    for n in 0..cloud.len() {
        let key = voxel_index(&cloud.positions[n], voxel_size);
        let e = groups.entry(key).or_insert_with(|| (vec![0.0; cloud.channels], 0));
        for (a, f) in e.0.iter_mut().zip(cloud.feature(n)) {
            *a += f;
        }
        e.1 += 1;
    }
    for (sum, count) in groups.values_mut() {
        sum.iter_mut().for_each(|v| *v /= *count as f64);
    }
    groups
}

pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize, channels: usize, extent: f64) -> FeaturedPointCloud {
    let mut cloud = FeaturedPointCloud::new(channels);
    for i in 0..n {
        let p = Vector3::new(
            rng.gen_range(-extent..extent),
            rng.gen_range(-extent..extent),
            rng.gen_range(-extent..extent),
        );
        let f: Vec<f64> = (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
        cloud.push(p, &f, (i % 4) as u32, i as u32);
    }
    cloud
}

// --- metrics ---

/// SSIM straight from the definition: one weighted window per output pixel.
pub fn naive_ssim(a: &Image, b: &Image) -> f64 {
    let k = 11usize;
    let sigma = 1.5f64;
    let mut win = vec![0.0; k * k];
    for y in 0..k {
        for x in 0..k {
            let (dx, dy) = (x as f64 - 5.0, y as f64 - 5.0);
            win[y * k + x] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }
    let s: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for ch in 0..3 {
        let mut acc = 0.0;
        let mut n = 0;
        for y0 in 0..=a.height - k {
            for x0 in 0..=a.width - k {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in 0..k {
                    for x in 0..k {
                        let w = win[y * k + x];
                        let pa = a.pixel(x0 + x, y0 + y)[ch];
                        let pb = b.pixel(x0 + x, y0 + y)[ch];
                        ma += w * pa;
                        mb += w * pb;
                        saa += w * pa * pa;
                        sbb += w * pb * pb;
                        sab += w * pa * pb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1;
            }
        }
        total += acc / n as f64;
    }
    total / 3.0
}

pub fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image::new(w, h, (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

// --- PLY ---

/// Minimal PLY reader: header lines, then fixed-size little-endian records.
pub struct PlyTable {
    pub comments: Vec<String>,
    pub count: usize,
    pub properties: Vec<(String, String)>,
    pub rows: Vec<Vec<f64>>,
}

impl PlyTable {
    pub fn column(&self, name: &str) -> Vec<f64> {
        let c = self
            .properties
            .iter()
            .position(|p| p.1 == name)
            .unwrap_or_else(|| panic!("no column {name}"));
        self.rows.iter().map(|r| r[c]).collect()
    }
}

pub fn parse_ply(bytes: &[u8]) -> PlyTable {
    let marker = b"end_header\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .expect("header end")
        + marker.len();
    let header = std::str::from_utf8(&bytes[..end]).unwrap();
    let mut lines = header.lines();
    assert_eq!(lines.next(), Some("ply"));
    assert_eq!(lines.next(), Some("format binary_little_endian 1.0"));
    let mut table = PlyTable {
        comments: Vec::new(),
        count: 0,
        properties: Vec::new(),
        rows: Vec::new(),
    };
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["comment", rest @ ..] => table.comments.push(rest.join(" ")),
            ["element", "vertex", n] => table.count = n.parse().unwrap(),
            ["property", ty, name] => table.properties.push((ty.to_string(), name.to_string())),
            ["end_header"] => break,
            other => panic!("unexpected header line {other:?}"),
        }
    }
    let mut body = &bytes[end..];
    for _ in 0..table.count {
        let mut row = Vec::new();
        for (ty, _) in &table.properties {
            let (word, rest) = body.split_at(4);
            body = rest;
            let w: [u8; 4] = word.try_into().unwrap();
            row.push(match ty.as_str() {
                "float" => f32::from_le_bytes(w) as f64,
                "int" => i32::from_le_bytes(w) as f64,
                t => panic!("unexpected type {t}"),
            });
        }
        table.rows.push(row);
    }
    assert!(body.is_empty(), "trailing bytes after records");
    table
}
