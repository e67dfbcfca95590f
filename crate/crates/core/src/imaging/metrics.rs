use ndarray::{s, Array2, ArrayView2};

use super::ImageBuffer;
use crate::error::{Error, Result};

pub const SSIM_WINDOW_SIZE: usize = 11;
pub const SSIM_WINDOW_SIGMA: f64 = 1.5;

/// Stabilisers `C1 = (k1 L)²`, `C2 = (k2 L)²`.
#[derive(Debug, Clone, Copy)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConstants {
    fn default() -> Self {
        let range = 1.0;
        Self {
            c1: (0.01 * range) * (0.01f64 * range),
            c2: (0.03 * range) * (0.03f64 * range),
        }
    }
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

fn check_same(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if a.data().dim() != b.data().dim() {
        return Err(Error::shape(format!(
            "images differ in shape: {:?} vs {:?}",
            a.data().dim(),
            b.data().dim()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; identical inputs give `+inf`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, peak: f64) -> Result<f64> {
    check_same(a, b)?;
    Ok(psnr_from_mse(mse(a.view().iter().copied(), b.view().iter().copied()), peak))
}

pub fn psnr_arrays(a: &[f32], b: &[f32], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("psnr inputs must be non-empty and equal length"));
    }
    Ok(psnr_from_mse(mse(a.iter().copied(), b.iter().copied()), peak))
}

fn mse(a: impl Iterator<Item = f32>, b: impl Iterator<Item = f32>) -> f64 {
    let (sum, n) = a
        .zip(b)
        .fold((0.0f64, 0usize), |(s, n), (x, y)| (s + (x as f64 - y as f64).powi(2), n + 1));
    sum / n as f64
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Mean SSIM over all valid 11×11 Gaussian windows and channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_same(a, b)?;
    if a.width() < SSIM_WINDOW_SIZE || a.height() < SSIM_WINDOW_SIZE {
        return Err(Error::domain(format!(
            "ssim needs at least {0}x{0} pixels, got {1}x{2}",
            SSIM_WINDOW_SIZE,
            a.width(),
            a.height()
        )));
    }
    let taps = gaussian_window(SSIM_WINDOW_SIZE, SSIM_WINDOW_SIGMA);
    let k = SsimConstants::default();
    let mut total = 0.0;
    for c in 0..a.channels() {
        let x = a.channel(c).mapv(f64::from);
        let y = b.channel(c).mapv(f64::from);
        let mu_x = filter_valid(x.view(), &taps);
        let mu_y = filter_valid(y.view(), &taps);
        let xx = filter_valid((&x * &x).view(), &taps);
        let yy = filter_valid((&y * &y).view(), &taps);
        let xy = filter_valid((&x * &y).view(), &taps);
        let mut acc = 0.0;
        for i in 0..mu_x.len() {
            let (mx, my) = (mu_x.as_slice().unwrap()[i], mu_y.as_slice().unwrap()[i]);
            let vx = xx.as_slice().unwrap()[i] - mx * mx;
            let vy = yy.as_slice().unwrap()[i] - my * my;
            let cxy = xy.as_slice().unwrap()[i] - mx * my;
            acc += ((2.0 * mx * my + k.c1) * (2.0 * cxy + k.c2))
                / ((mx * mx + my * my + k.c1) * (vx + vy + k.c2));
        }
        total += acc / mu_x.len() as f64;
    }
    Ok(total / a.channels() as f64)
}

/// Separable correlation without padding.
fn filter_valid(img: ArrayView2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = taps.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            tmp[[y, x]] = (0..n).map(|i| taps[i] * img[[y, x + i]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[[y, x]] = (0..n).map(|i| taps[i] * tmp[[y + i, x]]).sum();
        }
    }
    out
}

/// `(x0, y0, width, height)` of the centred 80% evaluation window.
pub fn central_crop_window(width: usize, height: usize) -> Result<(usize, usize, usize, usize)> {
    if width < 10 || height < 10 {
        return Err(Error::domain(format!(
            "central crop needs at least 10x10, got {width}x{height}"
        )));
    }
    let cw = width * 4 / 5;
    let ch = height * 4 / 5;
    Ok(((width - cw) / 2, (height - ch) / 2, cw, ch))
}

pub fn central_crop_eval_region(image: &ImageBuffer) -> Result<ImageBuffer> {
    let (x0, y0, cw, ch) = central_crop_window(image.width(), image.height())?;
    ImageBuffer::new(image.view().slice(s![y0..y0 + ch, x0..x0 + cw, ..]).to_owned())
}
