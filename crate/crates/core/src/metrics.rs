//! Image quality metrics and the photometric training objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
/// Default weight of the perceptual term.
pub const DEFAULT_LAMBDA: f64 = 0.05;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::InvalidInput(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `−10·log10(mse)` for unit-range images, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP)
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a single-channel plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, win: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = win.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|i| win[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| win[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM over RGB with an 11×11 Gaussian window (σ = 1.5) evaluated on
/// the valid region; the window shrinks for images smaller than 11 pixels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = (a.width, a.height);
    if w == 0 || h == 0 {
        return Err(Error::InvalidInput("SSIM of an empty image".into()));
    }
    let mut size = SSIM_WINDOW.min(w).min(h);
    if size % 2 == 0 {
        size -= 1;
    }
    let win = gaussian_window(size);
    let mut total = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = a.data.iter().skip(c).step_by(3).copied().collect();
        let pb: Vec<f64> = b.data.iter().skip(c).step_by(3).copied().collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
        let (mu_a, ..) = filter_valid(&pa, w, h, &win);
        let (mu_b, ..) = filter_valid(&pb, w, h, &win);
        let (saa, ..) = filter_valid(&prod(&pa, &pa), w, h, &win);
        let (sbb, ..) = filter_valid(&prod(&pb, &pb), w, h, &win);
        let (sab, ..) = filter_valid(&prod(&pa, &pb), w, h, &win);
        let n = mu_a.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += acc / n as f64;
    }
    Ok(total / 3.0)
}

pub fn compute_image_metrics(a: &Image, b: &Image) -> Result<ImageMetrics> {
    let m = mse(a, b)?;
    let s = if a.data == b.data { 1.0 } else { ssim(a, b)? };
    Ok(ImageMetrics {
        mse: m,
        psnr: psnr_from_mse(m),
        ssim: s,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// The perceptual term needs a pretrained network, which this engine
    /// does not ship; enabling it is rejected.
    #[serde(default)]
    pub perceptual: bool,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: DEFAULT_LAMBDA,
            perceptual: false,
        }
    }
}

/// `Σ_m MSE(render_m, ref_m) + λ·perceptual`, with the perceptual term disabled (0).
pub fn combined_loss(renders: &[Image], refs: &[Image], cfg: &LossConfig) -> Result<f64> {
    if renders.len() != refs.len() {
        return Err(Error::InvalidInput(format!(
            "{} renders but {} references",
            renders.len(),
            refs.len()
        )));
    }
    if cfg.perceptual {
        return Err(Error::Config(
            "perceptual loss term is not available in this engine".into(),
        ));
    }
    let mut total = 0.0;
    for (r, t) in renders.iter().zip(refs) {
        total += mse(r, t)?;
    }
    Ok(total + cfg.lambda * 0.0)
}
