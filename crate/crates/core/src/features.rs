//! Deterministic multi-scale feature pyramid, pixel-aligned sampling and
//! multi-view pooling.
//!
//! The pyramid is a fixed Gaussian-derivative filter bank with the channel
//! counts of a three-level FPN: `H/4 × W/4 × 32`, `H/2 × W/2 × 16` and
//! `H × W × 8`. Each level is computed on its own image, obtained from the
//! finer one by a σ = 1 Gaussian blur and 2× decimation (pixel `j` of a coarse
//! level sits on pixel `2j` of the finer one).
//!
//! Channel layout (`θ` runs over 0°, 45°, 90°, 135°):
//!
//! | level | channels |
//! |-------|----------|
//! | 3 (full)    | R G B L, ∂θ at σ=1 |
//! | 2 (half)    | R G B L, ∂θ at σ=1, ∂θ at σ=2, ∂²θ at σ=1 |
//! | 1 (quarter) | R G B L, ∂θ and ∂²θ at σ=1 and σ=2, ∂x ∂y of R G B at σ=1 and σ=2 |

use nalgebra::Vector3;
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::costvolume::{DepthHypotheses, WarpedVolume};
use crate::error::{Error, Result};
use crate::geometry::sample_bilinear;

pub const LEVEL1_CHANNELS: usize = 32;
pub const LEVEL2_CHANNELS: usize = 16;
pub const LEVEL3_CHANNELS: usize = 8;
/// Extra dimensions appended to each sampled feature by [`ray_delta`].
pub const RAY_DELTA_DIMS: usize = 4;

/// Scale applied to colour and luminance channels.
pub const COLOR_GAIN: f32 = 12.0;
/// Scale applied to derivative channels (per-pixel slopes are small).
pub const DERIVATIVE_GAIN: f32 = 48.0;

/// Extra scale per level (quarter, half, full). Fine-stage planes are
/// closely spaced, so level 2 needs larger cost contrasts to keep the
/// softmax from flattening.
pub const LEVEL_GAINS: [f32; 3] = [1.0, 5.0, 1.0];

const LUMA: [f32; 3] = [0.2126, 0.7152, 0.0722];
const H: f32 = std::f32::consts::FRAC_1_SQRT_2;
/// (cos θ, sin θ), exact at the axes.
const ORIENTATIONS: [(f32, f32); 4] = [(1.0, 0.0), (H, H), (0.0, 1.0), (-H, H)];

/// Reflective padding added so both dimensions divide by four.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    /// `H/4 × W/4 × 32`
    pub level1: Array3<f32>,
    /// `H/2 × W/2 × 16`
    pub level2: Array3<f32>,
    /// `H × W × 8`
    pub level3: Array3<f32>,
    pub padding: Padding,
}

impl FeaturePyramid {
    /// Level by cascade stage: 1 = quarter resolution, 3 = full.
    pub fn level(&self, level: usize) -> &Array3<f32> {
        match level {
            1 => &self.level1,
            2 => &self.level2,
            3 => &self.level3,
            _ => panic!("pyramid level {level} out of range 1..=3"),
        }
    }
}

pub fn extract_pyramid(image: ArrayView3<f32>) -> Result<FeaturePyramid> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::shape(format!("pyramid input must be RGB, got {c} channels")));
    }
    if let Some(v) = image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::domain(format!("pyramid input must lie in [0, 1], found {v}")));
    }
    if h < 4 || w < 4 {
        return Err(Error::domain("pyramid input must be at least 4x4"));
    }
    let (padded, padding) = pad_to_multiple(image, padding_for(w, h));

    let full = padded;
    let half = decimate(&blur3(&full, 1.0));
    let quarter = decimate(&blur3(&half, 1.0));

    Ok(FeaturePyramid {
        level1: level_features(&quarter, LEVEL1_CHANNELS) * LEVEL_GAINS[0],
        level2: level_features(&half, LEVEL2_CHANNELS) * LEVEL_GAINS[1],
        level3: level_features(&full, LEVEL3_CHANNELS) * LEVEL_GAINS[2],
        padding,
    })
}

/// Symmetric padding bringing `width × height` to multiples of four.
pub fn padding_for(width: usize, height: usize) -> Padding {
    let ph = (4 - height % 4) % 4;
    let pw = (4 - width % 4) % 4;
    Padding {
        top: ph / 2,
        bottom: ph - ph / 2,
        left: pw / 2,
        right: pw - pw / 2,
    }
}

fn pad_to_multiple(image: ArrayView3<f32>, pad: Padding) -> (Array3<f32>, Padding) {
    let (h, w, c) = image.dim();
    let (ph, pw) = (pad.top + pad.bottom, pad.left + pad.right);
    if ph == 0 && pw == 0 {
        return (image.to_owned(), pad);
    }
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        if n == 1 {
            return 0;
        }
        while i < 0 || i >= n {
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * (n - 1) - i;
            }
        }
        i as usize
    };
    let out = Array3::from_shape_fn((h + ph, w + pw, c), |(y, x, ch)| {
        let sy = reflect(y as isize - pad.top as isize, h);
        let sx = reflect(x as isize - pad.left as isize, w);
        image[[sy, sx, ch]]
    });
    (out, pad)
}

fn gaussian_taps(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as usize;
    let taps: Vec<f32> = (0..=2 * r)
        .map(|i| {
            let x = i as f32 - r as f32;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f32 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// One-sided taps `k[1..=r]` of an odd derivative kernel, normalised to unit
/// response on a unit ramp: `Σ 2 i k[i] = 1`.
fn first_derivative_taps(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as usize;
    let raw: Vec<f32> = (1..=r)
        .map(|i| {
            let x = i as f32;
            x * (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let norm: f32 = raw.iter().enumerate().map(|(i, k)| 2.0 * (i + 1) as f32 * k).sum();
    raw.into_iter().map(|k| k / norm).collect()
}

/// One-sided taps of an even second-derivative kernel applied as
/// `Σ k[i] (p[x+i] + p[x-i] - 2 p[x])`, normalised to unit response on
/// `x²/2`: `Σ i² k[i] = 1`.
fn second_derivative_taps(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as usize;
    let s2 = sigma * sigma;
    let raw: Vec<f32> = (1..=r)
        .map(|i| {
            let x = i as f32;
            (x * x / s2 - 1.0) / s2 * (-x * x / (2.0 * s2)).exp()
        })
        .collect();
    let norm: f32 = raw.iter().enumerate().map(|(i, k)| ((i + 1) * (i + 1)) as f32 * k).sum();
    raw.into_iter().map(|k| k / norm).collect()
}

#[derive(Clone, Copy)]
enum Kernel<'a> {
    Smooth(&'a [f32]),
    Odd(&'a [f32]),
    Even(&'a [f32]),
}

/// 1-D filter along `axis` (0 = rows/v, 1 = columns/u) using in-image taps
/// only: smoothing weights are renormalised and a derivative tap pair that
/// straddles the border is replaced by its one-sided counterpart, so edge
/// responses estimate the same quantity as interior ones.
fn filter(img: ArrayView2<f32>, kernel: Kernel<'_>, axis: usize) -> Array2<f32> {
    let (h, w) = img.dim();
    let n = if axis == 0 { h } else { w } as isize;
    let at = |y: usize, x: usize, off: isize| -> Option<f32> {
        let (i, j) = if axis == 0 { (y as isize + off, x as isize) } else { (y as isize, x as isize + off) };
        let pos = if axis == 0 { i } else { j };
        (0..n).contains(&pos).then(|| img[[i as usize, j as usize]])
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let c = at(y, x, 0).expect("centre tap");
        match kernel {
            Kernel::Smooth(taps) => {
                let r = (taps.len() / 2) as isize;
                let (mut acc, mut norm) = (0.0, 0.0);
                for (i, t) in taps.iter().enumerate() {
                    if let Some(v) = at(y, x, i as isize - r) {
                        acc += t * v;
                        norm += t;
                    }
                }
                acc / norm
            }
            Kernel::Odd(taps) => taps
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let o = i as isize + 1;
                    t * match (at(y, x, o), at(y, x, -o)) {
                        (Some(a), Some(b)) => a - b,
                        (Some(a), None) => 2.0 * (a - c),
                        (None, Some(b)) => 2.0 * (c - b),
                        (None, None) => 0.0,
                    }
                })
                .sum(),
            Kernel::Even(taps) => taps
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let o = i as isize + 1;
                    t * match (at(y, x, o), at(y, x, -o)) {
                        (Some(a), Some(b)) => (a - c) + (b - c),
                        (Some(a), None) | (None, Some(a)) => 2.0 * (a - c),
                        (None, None) => 0.0,
                    }
                })
                .sum(),
        }
    })
}

fn blur3(img: &Array3<f32>, sigma: f32) -> Array3<f32> {
    let taps = gaussian_taps(sigma);
    let mut out = Array3::<f32>::zeros(img.raw_dim());
    for c in 0..img.dim().2 {
        let ch = img.index_axis(Axis(2), c);
        let b = filter(filter(ch, Kernel::Smooth(&taps), 1).view(), Kernel::Smooth(&taps), 0);
        out.index_axis_mut(Axis(2), c).assign(&b);
    }
    out
}

fn decimate(img: &Array3<f32>) -> Array3<f32> {
    img.slice(s![..;2, ..;2, ..]).to_owned()
}

/// Spatial derivatives of one scalar image at one scale.
struct Derivatives {
    dx: Array2<f32>,
    dy: Array2<f32>,
    dxx: Array2<f32>,
    dyy: Array2<f32>,
    dxy: Array2<f32>,
}

fn derivatives(img: ArrayView2<f32>, sigma: f32, second: bool) -> Derivatives {
    let g = gaussian_taps(sigma);
    let d1 = first_derivative_taps(sigma);
    let dx = filter(filter(img, Kernel::Odd(&d1), 1).view(), Kernel::Smooth(&g), 0);
    let dy = filter(filter(img, Kernel::Odd(&d1), 0).view(), Kernel::Smooth(&g), 1);
    let (dxx, dyy, dxy) = if second {
        let d2 = second_derivative_taps(sigma);
        (
            filter(filter(img, Kernel::Even(&d2), 1).view(), Kernel::Smooth(&g), 0),
            filter(filter(img, Kernel::Even(&d2), 0).view(), Kernel::Smooth(&g), 1),
            filter(filter(img, Kernel::Odd(&d1), 1).view(), Kernel::Odd(&d1), 0),
        )
    } else {
        let z = Array2::zeros(img.raw_dim());
        (z.clone(), z.clone(), z)
    };
    Derivatives { dx, dy, dxx, dyy, dxy }
}

fn steer_first(d: &Derivatives, (c, s): (f32, f32)) -> Array2<f32> {
    &d.dx * c + &d.dy * s
}

fn steer_second(d: &Derivatives, (c, s): (f32, f32)) -> Array2<f32> {
    &d.dxx * (c * c) + &d.dxy * (2.0 * c * s) + &d.dyy * (s * s)
}

fn level_features(img: &Array3<f32>, channels: usize) -> Array3<f32> {
    let (h, w, _) = img.dim();
    let mut planes: Vec<Array2<f32>> = Vec::with_capacity(channels);
    let lum = Array2::from_shape_fn((h, w), |(y, x)| {
        LUMA[0] * img[[y, x, 0]] + LUMA[1] * img[[y, x, 1]] + LUMA[2] * img[[y, x, 2]]
    });
    for c in 0..3 {
        planes.push(img.index_axis(Axis(2), c).to_owned() * COLOR_GAIN);
    }
    planes.push(&lum * COLOR_GAIN);

    let need_second = channels > LEVEL3_CHANNELS;
    let s1 = derivatives(lum.view(), 1.0, need_second);
    for o in ORIENTATIONS {
        planes.push(steer_first(&s1, o) * DERIVATIVE_GAIN);
    }
    if channels >= LEVEL2_CHANNELS {
        let s2 = derivatives(lum.view(), 2.0, channels >= LEVEL1_CHANNELS);
        for o in ORIENTATIONS {
            planes.push(steer_first(&s2, o) * DERIVATIVE_GAIN);
        }
        for o in ORIENTATIONS {
            planes.push(steer_second(&s1, o) * DERIVATIVE_GAIN);
        }
        if channels >= LEVEL1_CHANNELS {
            for o in ORIENTATIONS {
                planes.push(steer_second(&s2, o) * DERIVATIVE_GAIN);
            }
            for sigma in [1.0, 2.0] {
                for c in 0..3 {
                    let d = derivatives(img.index_axis(Axis(2), c), sigma, false);
                    planes.push(&d.dx * DERIVATIVE_GAIN);
                    planes.push(&d.dy * DERIVATIVE_GAIN);
                }
            }
        }
    }
    debug_assert_eq!(planes.len(), channels);
    let mut out = Array3::<f32>::zeros((h, w, channels));
    for (c, p) in planes.iter().enumerate() {
        out.index_axis_mut(Axis(2), c).assign(p);
    }
    out
}

/// Bilinear samples of an `h × w × F` map; out-of-range points give a zero
/// vector and `false`.
pub fn sample_features(map: ArrayView3<f32>, coords: &[(f64, f64)]) -> (Array2<f32>, Vec<bool>) {
    let f = map.dim().2;
    let mut out = Array2::<f32>::zeros((coords.len(), f));
    let mut valid = Vec::with_capacity(coords.len());
    let mut buf = vec![0.0f32; f];
    for (i, &(x, y)) in coords.iter().enumerate() {
        let ok = x.is_finite() && y.is_finite() && sample_bilinear(&map, x, y, &mut buf);
        if ok {
            out.row_mut(i).as_slice_mut().unwrap().copy_from_slice(&buf);
        }
        valid.push(ok);
    }
    (out, valid)
}

/// Direction-difference augmentation `(d_src - d_tgt, d_src · d_tgt)`.
pub fn ray_delta(d_src: &Vector3<f64>, d_tgt: &Vector3<f64>) -> [f32; 4] {
    let diff = d_src - d_tgt;
    let dot = d_src.dot(d_tgt).clamp(-1.0, 1.0);
    [diff.x as f32, diff.y as f32, diff.z as f32, dot as f32]
}

/// A source feature sampled at the projection of one target-pixel 3-D point.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelAlignedFeature {
    pub feature: Vec<f32>,
    pub ray_delta: [f32; 4],
    pub valid: bool,
}

impl PixelAlignedFeature {
    pub fn invalid(dims: usize) -> Self {
        Self {
            feature: vec![0.0; dims],
            ray_delta: [0.0; 4],
            valid: false,
        }
    }

    /// Sampled feature followed by the ray delta.
    pub fn augmented(&self) -> impl Iterator<Item = f32> + '_ {
        self.feature.iter().copied().chain(self.ray_delta.iter().copied())
    }

    pub fn augmented_len(&self) -> usize {
        self.feature.len() + RAY_DELTA_DIMS
    }
}

/// Per-pixel `concat(mean, variance)` of augmented features over the valid views.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeatures {
    /// `pixels × 2(F + 4)`
    pub values: Array2<f32>,
    pub valid: Vec<bool>,
}

/// Pool `views[view][pixel]` into one feature per pixel. Population variance.
pub fn pool_views(views: &[Vec<PixelAlignedFeature>]) -> Result<PooledFeatures> {
    let first = views
        .first()
        .ok_or_else(|| Error::domain("pool_views needs at least one view"))?;
    let pixels = first.len();
    if views.iter().any(|v| v.len() != pixels) {
        return Err(Error::shape("all views must cover the same pixels"));
    }
    let dims = first.first().map(|f| f.augmented_len()).unwrap_or(RAY_DELTA_DIMS);
    let mut values = Array2::<f32>::zeros((pixels, 2 * dims));
    let mut valid = vec![false; pixels];
    let mut mean = vec![0.0f64; dims];
    let mut var = vec![0.0f64; dims];
    for p in 0..pixels {
        mean.iter_mut().for_each(|m| *m = 0.0);
        var.iter_mut().for_each(|m| *m = 0.0);
        let mut n = 0usize;
        for view in views {
            let f = &view[p];
            if f.augmented_len() != dims {
                return Err(Error::shape("feature dimensions differ between views"));
            }
            if !f.valid {
                continue;
            }
            n += 1;
            for (m, v) in mean.iter_mut().zip(f.augmented()) {
                *m += v as f64;
            }
        }
        if n == 0 {
            continue;
        }
        valid[p] = true;
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for view in views {
            let f = &view[p];
            if !f.valid {
                continue;
            }
            for ((s, m), v) in var.iter_mut().zip(&mean).zip(f.augmented()) {
                *s += (v as f64 - m).powi(2);
            }
        }
        let mut row = values.row_mut(p);
        for d in 0..dims {
            row[d] = mean[d] as f32;
            row[dims + d] = (var[d] / n as f64) as f32;
        }
    }
    Ok(PooledFeatures { values, valid })
}

/// Mean over valid views of a set of warped volumes, `D × h × w × F`.
pub fn view_averaged_volume(volumes: &[WarpedVolume]) -> Result<ndarray::Array4<f32>> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::domain("need at least one warped volume"))?;
    let dim = first.values.dim();
    if volumes.iter().any(|v| v.values.dim() != dim) {
        return Err(Error::shape("warped volumes differ in shape"));
    }
    let (d, h, w, f) = dim;
    let mut out = ndarray::Array4::<f32>::zeros(dim);
    for k in 0..d {
        for y in 0..h {
            for x in 0..w {
                let n = volumes.iter().filter(|v| v.mask[[k, y, x]]).count();
                if n == 0 {
                    continue;
                }
                for c in 0..f {
                    let s: f32 = volumes
                        .iter()
                        .filter(|v| v.mask[[k, y, x]])
                        .map(|v| v.values[[k, y, x, c]])
                        .sum();
                    out[[k, y, x, c]] = s / n as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Sample result of [`grid_features`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridSamples {
    /// `queries × F`
    pub values: Array2<f32>,
    /// Queries whose depth fell outside the hypothesis range and was clamped.
    pub clamped: Vec<bool>,
}

/// Trilinear samples of a view-averaged volume at `(x, y, depth)` queries in
/// volume pixel coordinates. The depth axis is located per texel by linear
/// interpolation between that texel's hypothesis planes; spatial coordinates
/// are clamped to the grid.
pub fn grid_features(
    averaged: ndarray::ArrayView4<f32>,
    hyp: &DepthHypotheses,
    queries: &[(f64, f64, f64)],
) -> Result<GridSamples> {
    let (d, h, w, f) = averaged.dim();
    if hyp.planes() != d || hyp.height() != h || hyp.width() != w {
        return Err(Error::shape("hypotheses do not match the volume"));
    }
    let mut values = Array2::<f32>::zeros((queries.len(), f));
    let mut clamped = vec![false; queries.len()];
    for (q, &(x, y, z)) in queries.iter().enumerate() {
        let x = x.clamp(0.0, (w - 1) as f64);
        let y = y.clamp(0.0, (h - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let corners = [
            (y0, x0, (1.0 - fx) * (1.0 - fy)),
            (y0, x1, fx * (1.0 - fy)),
            (y1, x0, (1.0 - fx) * fy),
            (y1, x1, fx * fy),
        ];
        let mut acc = vec![0.0f64; f];
        for (cy, cx, wgt) in corners {
            if wgt == 0.0 {
                continue;
            }
            let (k, t, was_clamped) = hyp.locate(cy, cx, z);
            clamped[q] |= was_clamped;
            let k1 = (k + 1).min(d - 1);
            for c in 0..f {
                let a = averaged[[k, cy, cx, c]] as f64;
                let b = averaged[[k1, cy, cx, c]] as f64;
                acc[c] += wgt * ((1.0 - t) * a + t * b);
            }
        }
        for (o, a) in values.row_mut(q).iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    Ok(GridSamples { values, clamped })
}
