//! Plane-sweep depth estimation: hypotheses, warped feature volumes, variance
//! costs, soft-argmax depth regression and the two-stage cascade.

use ndarray::{s, Array2, Array3, Array4, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeaturePyramid, Padding};
use crate::geometry::{sample_bilinear, HomographyFamily, Viewpoint};

/// Smallest admissible lower bound of a refined depth interval.
pub const DEPTH_EPSILON: f64 = 1e-3;
pub const SIGMA_SPATIAL: f64 = 1.0;
pub const SIGMA_DEPTH: f64 = 0.5;

/// Per-pixel depth planes, `D × h × w`, strictly increasing along `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthHypotheses {
    planes: Array3<f64>,
}

impl DepthHypotheses {
    pub fn new(planes: Array3<f64>) -> Result<Self> {
        let (d, h, w) = planes.dim();
        if d < 2 {
            return Err(Error::domain(format!("need at least 2 depth planes, got {d}")));
        }
        for y in 0..h {
            for x in 0..w {
                let col = planes.slice(s![.., y, x]);
                if !(col[0] > 0.0) || col.windows(2).into_iter().any(|p| !(p[1] > p[0])) {
                    return Err(Error::domain(format!(
                        "planes at ({x}, {y}) must be positive and strictly increasing"
                    )));
                }
            }
        }
        Ok(Self { planes })
    }

    /// The same plane list at every pixel.
    pub fn uniform_planes(planes: &[f64], height: usize, width: usize) -> Result<Self> {
        let d = planes.len();
        Self::new(Array3::from_shape_fn((d, height, width), |(k, _, _)| planes[k]))
    }

    pub fn planes(&self) -> usize {
        self.planes.dim().0
    }

    pub fn height(&self) -> usize {
        self.planes.dim().1
    }

    pub fn width(&self) -> usize {
        self.planes.dim().2
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.planes
    }

    #[inline]
    pub fn at(&self, k: usize, y: usize, x: usize) -> f64 {
        self.planes[[k, y, x]]
    }

    /// `(L_1, L_D)` at a pixel.
    pub fn range(&self, y: usize, x: usize) -> (f64, f64) {
        (self.planes[[0, y, x]], self.planes[[self.planes() - 1, y, x]])
    }

    /// Fractional plane coordinate of depth `z` at a pixel as `(k, t)` with
    /// `z = (1 - t) L_k + t L_{k+1}`; out-of-range depths are clamped and
    /// reported.
    pub fn locate(&self, y: usize, x: usize, z: f64) -> (usize, f64, bool) {
        let d = self.planes();
        let col = self.planes.slice(s![.., y, x]);
        if !(z > col[0]) {
            return (0, 0.0, z < col[0] || z.is_nan());
        }
        if z >= col[d - 1] {
            return (d - 1, 0.0, z > col[d - 1]);
        }
        let mut k = 0;
        while col[k + 1] <= z {
            k += 1;
        }
        (k, (z - col[k]) / (col[k + 1] - col[k]), false)
    }

    /// Spacing of the plane pair bracketing `z` at a pixel.
    pub fn spacing_at(&self, y: usize, x: usize, z: f64) -> f64 {
        let (k, _, _) = self.locate(y, x, z);
        let k = k.min(self.planes() - 2);
        self.planes[[k + 1, y, x]] - self.planes[[k, y, x]]
    }
}

/// `d` planes uniform in inverse depth over `[near, far]`.
pub fn inverse_depth_planes(near: f64, far: f64, d: usize) -> Result<Vec<f64>> {
    if !(near > 0.0 && far > near && far.is_finite()) {
        return Err(Error::domain(format!(
            "depth range must satisfy 0 < near < far, got [{near}, {far}]"
        )));
    }
    if d < 2 {
        return Err(Error::domain(format!("need at least 2 depth planes, got {d}")));
    }
    let (a, b) = (1.0 / near, 1.0 / far);
    Ok((0..d)
        .map(|i| {
            if i == 0 {
                near
            } else if i == d - 1 {
                far
            } else {
                1.0 / (a + (b - a) * i as f64 / (d - 1) as f64)
            }
        })
        .collect())
}

pub fn uniform_hypotheses(near: f64, far: f64, d: usize, height: usize, width: usize) -> Result<DepthHypotheses> {
    DepthHypotheses::uniform_planes(&inverse_depth_planes(near, far, d)?, height, width)
}

/// Regressed depth with its spread and confidence interval.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub depth: Array2<f64>,
    pub sigma: Array2<f64>,
    /// `h × w × 2`: `[L̂ - λσ̂, L̂ + λσ̂]`.
    pub interval: Array3<f64>,
    pub valid: Array2<bool>,
}

impl DepthMap {
    pub fn height(&self) -> usize {
        self.depth.dim().0
    }

    pub fn width(&self) -> usize {
        self.depth.dim().1
    }

    /// Bilinear upsampling by an integer factor (pixel `j` of this map sits
    /// on pixel `factor * j` of the result). A pixel stays valid only when
    /// every contributing texel is valid.
    pub fn upsampled(&self, factor: usize, height: usize, width: usize, lambda: f64) -> DepthMap {
        let (h, w) = self.depth.dim();
        let mut depth = Array2::zeros((height, width));
        let mut sigma = Array2::zeros((height, width));
        let mut valid = Array2::from_elem((height, width), false);
        for y in 0..height {
            for x in 0..width {
                let fy = (y as f64 / factor as f64).min((h - 1) as f64);
                let fx = (x as f64 / factor as f64).min((w - 1) as f64);
                let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                let mut ok = true;
                let (mut dv, mut sv) = (0.0, 0.0);
                for (yy, xx, wt) in [
                    (y0, x0, (1.0 - tx) * (1.0 - ty)),
                    (y0, x1, tx * (1.0 - ty)),
                    (y1, x0, (1.0 - tx) * ty),
                    (y1, x1, tx * ty),
                ] {
                    if wt == 0.0 {
                        continue;
                    }
                    ok &= self.valid[[yy, xx]];
                    dv += wt * self.depth[[yy, xx]];
                    sv += wt * self.sigma[[yy, xx]];
                }
                depth[[y, x]] = dv;
                sigma[[y, x]] = sv;
                valid[[y, x]] = ok;
            }
        }
        let interval = interval_from(&depth, &sigma, lambda);
        DepthMap { depth, sigma, interval, valid }
    }

    /// Pixels whose spread exceeds `fraction` of their hypothesis range.
    pub fn low_confidence(&self, hyp: &DepthHypotheses, fraction: f64) -> Array2<bool> {
        Array2::from_shape_fn(self.depth.raw_dim(), |(y, x)| {
            let (lo, hi) = hyp.range(y, x);
            !self.valid[[y, x]] || self.sigma[[y, x]] > fraction * (hi - lo)
        })
    }
}

fn interval_from(depth: &Array2<f64>, sigma: &Array2<f64>, lambda: f64) -> Array3<f64> {
    let (h, w) = depth.dim();
    Array3::from_shape_fn((h, w, 2), |(y, x, i)| {
        let off = lambda * sigma[[y, x]];
        if i == 0 {
            depth[[y, x]] - off
        } else {
            depth[[y, x]] + off
        }
    })
}

/// Fine-stage planes: `d` planes uniform in depth over `[L̂ − λσ̂, L̂ + λσ̂]`,
/// the width floored at `floor[y, x]` (one coarse spacing) and the lower bound
/// clamped to [`DEPTH_EPSILON`]. Invalid pixels fall back to `fallback`.
pub fn refine_hypotheses(
    prev: &DepthMap,
    floor: &Array2<f64>,
    lambda: f64,
    d: usize,
    fallback: &[f64],
) -> Result<DepthHypotheses> {
    if d < 2 {
        return Err(Error::domain(format!("need at least 2 depth planes, got {d}")));
    }
    if !(lambda > 0.0) {
        return Err(Error::domain(format!("lambda must be positive, got {lambda}")));
    }
    let (h, w) = prev.depth.dim();
    if floor.dim() != (h, w) {
        return Err(Error::shape("floor map does not match the depth map"));
    }
    if fallback.len() != d {
        return Err(Error::shape("fallback plane list must have d entries"));
    }
    let mut planes = Array3::<f64>::zeros((d, h, w));
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = if prev.valid[[y, x]] {
                interval_bounds(prev.depth[[y, x]], prev.sigma[[y, x]], lambda, floor[[y, x]])
            } else {
                (fallback[0], fallback[d - 1])
            };
            for k in 0..d {
                planes[[k, y, x]] = if prev.valid[[y, x]] {
                    lo + (hi - lo) * k as f64 / (d - 1) as f64
                } else {
                    fallback[k]
                };
            }
        }
    }
    DepthHypotheses::new(planes)
}

/// `[lo, hi]` of one refined interval.
pub fn interval_bounds(depth: f64, sigma: f64, lambda: f64, floor: f64) -> (f64, f64) {
    let floor = floor.max(DEPTH_EPSILON);
    let half = (lambda * sigma).max(0.5 * floor);
    let lo = (depth - half).max(DEPTH_EPSILON);
    let hi = (depth + half).max(lo + floor);
    (lo, hi)
}

/// Source features warped onto the target's depth planes, `D × h × w × F`.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedVolume {
    pub values: Array4<f32>,
    /// `D × h × w`; false where the sample fell outside the source image or
    /// behind the source camera.
    pub mask: Array3<bool>,
}

/// Sweep `features` of the source through the target's planes. Both
/// viewpoints must describe the feature-map grid.
pub fn warp_volume(
    features: ArrayView3<f32>,
    src: &Viewpoint,
    tgt: &Viewpoint,
    hyp: &DepthHypotheses,
) -> Result<WarpedVolume> {
    let (fh, fw, f) = features.dim();
    if (fh, fw) != (src.height, src.width) {
        return Err(Error::shape(format!(
            "feature map is {fw}x{fh} but source viewpoint is {}x{}",
            src.width, src.height
        )));
    }
    let (d, h, w) = (hyp.planes(), hyp.height(), hyp.width());
    if (h, w) != (tgt.height, tgt.width) {
        return Err(Error::shape("hypotheses do not match the target grid"));
    }
    let fam = HomographyFamily::new(src, tgt)?;
    let slices: Vec<(Array3<f32>, Array2<bool>)> = (0..d)
        .into_par_iter()
        .map(|k| {
            let mut vals = Array3::<f32>::zeros((h, w, f));
            let mut mask = Array2::from_elem((h, w), false);
            let mut buf = vec![0.0f32; f];
            for y in 0..h {
                for x in 0..w {
                    let z = hyp.at(k, y, x);
                    if let Some((u, v)) = fam.transfer(x as f64, y as f64, z) {
                        if sample_bilinear(&features, u, v, &mut buf) {
                            vals.slice_mut(s![y, x, ..])
                                .iter_mut()
                                .zip(&buf)
                                .for_each(|(o, b)| *o = *b);
                            mask[[y, x]] = true;
                        }
                    }
                }
            }
            (vals, mask)
        })
        .collect();
    let mut values = Array4::<f32>::zeros((d, h, w, f));
    let mut mask = Array3::from_elem((d, h, w), false);
    for (k, (v, m)) in slices.into_iter().enumerate() {
        values.index_axis_mut(Axis(0), k).assign(&v);
        mask.index_axis_mut(Axis(0), k).assign(&m);
    }
    Ok(WarpedVolume { values, mask })
}

/// Per-voxel population variance of warped features over valid views.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub values: Array4<f32>,
    /// Number of valid views per voxel.
    pub view_count: Array3<u16>,
}

impl CostVolume {
    /// Voxels supported by fewer than two views carry no photo-consistency.
    pub fn low_confidence(&self) -> Array3<bool> {
        self.view_count.mapv(|n| n < 2)
    }

    /// Pixels with at least one voxel seen by two or more views.
    pub fn pixel_support(&self) -> Array2<bool> {
        let (_, h, w) = self.view_count.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            self.view_count.slice(s![.., y, x]).iter().any(|&n| n >= 2)
        })
    }
}

pub fn build_cost_volume(warped: &[WarpedVolume]) -> Result<CostVolume> {
    let first = warped
        .first()
        .ok_or_else(|| Error::domain("cost volume needs at least one view"))?;
    let dim = first.values.dim();
    if warped
        .iter()
        .any(|v| v.values.dim() != dim || v.mask.dim() != (dim.0, dim.1, dim.2))
    {
        return Err(Error::shape("warped volumes differ in shape"));
    }
    let (d, h, w, f) = dim;
    let slices: Vec<(Array3<f32>, Array2<u16>)> = (0..d)
        .into_par_iter()
        .map(|k| {
            let mut vals = Array3::<f32>::zeros((h, w, f));
            let mut count = Array2::<u16>::zeros((h, w));
            let mut mean = vec![0.0f64; f];
            let mut var = vec![0.0f64; f];
            for y in 0..h {
                for x in 0..w {
                    let views: Vec<&WarpedVolume> =
                        warped.iter().filter(|v| v.mask[[k, y, x]]).collect();
                    let n = views.len();
                    count[[y, x]] = n as u16;
                    if n == 0 {
                        continue;
                    }
                    mean.iter_mut().for_each(|m| *m = 0.0);
                    var.iter_mut().for_each(|m| *m = 0.0);
                    for v in &views {
                        for c in 0..f {
                            mean[c] += v.values[[k, y, x, c]] as f64;
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= n as f64);
                    for v in &views {
                        for c in 0..f {
                            var[c] += (v.values[[k, y, x, c]] as f64 - mean[c]).powi(2);
                        }
                    }
                    for c in 0..f {
                        vals[[y, x, c]] = (var[c] / n as f64) as f32;
                    }
                }
            }
            (vals, count)
        })
        .collect();
    let mut values = Array4::<f32>::zeros(dim);
    let mut view_count = Array3::<u16>::zeros((d, h, w));
    for (k, (v, c)) in slices.into_iter().enumerate() {
        values.index_axis_mut(Axis(0), k).assign(&v);
        view_count.index_axis_mut(Axis(0), k).assign(&c);
    }
    Ok(CostVolume { values, view_count })
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Smooth `vol` along `axis` with replicated borders.
fn smooth_axis(vol: &Array3<f64>, taps: &[f64], axis: usize) -> Array3<f64> {
    let dim = vol.dim();
    let n = [dim.0, dim.1, dim.2][axis] as isize;
    let r = (taps.len() / 2) as isize;
    Array3::from_shape_fn(dim, |(k, y, x)| {
        let mut idx = [k, y, x];
        let centre = idx[axis] as isize;
        let mut acc = 0.0;
        for (i, t) in taps.iter().enumerate() {
            idx[axis] = (centre + i as isize - r).clamp(0, n - 1) as usize;
            acc += t * vol[idx];
        }
        acc
    })
}

/// Deterministic stand-in for a learned regulariser: logits are the negated
/// channel-mean cost, Gaussian-smoothed in 3-D and scaled by `tau`.
///
/// Voxels seen by fewer than two views take the worst valid cost of their
/// pixel; a pixel with no supported voxel gets all-zero logits.
pub fn regularize(cv: &CostVolume, tau: f64) -> Result<Array3<f32>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::domain(format!("temperature must be positive, got {tau}")));
    }
    let (d, h, w, f) = cv.values.dim();
    let mut mean = Array3::<f64>::zeros((d, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut worst: Option<f64> = None;
            for k in 0..d {
                let m = cv.values.slice(s![k, y, x, ..]).iter().map(|&v| v as f64).sum::<f64>() / f as f64;
                mean[[k, y, x]] = m;
                if cv.view_count[[k, y, x]] >= 2 {
                    worst = Some(worst.map_or(m, |w: f64| w.max(m)));
                }
            }
            let fill = worst.unwrap_or(0.0);
            for k in 0..d {
                if cv.view_count[[k, y, x]] < 2 {
                    mean[[k, y, x]] = fill;
                }
            }
            if worst.is_none() {
                mean.slice_mut(s![.., y, x]).fill(0.0);
            }
        }
    }
    let spatial = gaussian_taps(SIGMA_SPATIAL);
    let depth = gaussian_taps(SIGMA_DEPTH);
    let smoothed = smooth_axis(&smooth_axis(&smooth_axis(&mean, &spatial, 2), &spatial, 1), &depth, 0);
    let mut logits = smoothed.mapv(|c| (-tau * c) as f32);
    // Unsupported pixels: exactly uniform.
    for y in 0..h {
        for x in 0..w {
            if cv.view_count.slice(s![.., y, x]).iter().all(|&n| n < 2) {
                logits.slice_mut(s![.., y, x]).fill(0.0);
            }
        }
    }
    Ok(logits)
}

/// Per-pixel softmax over planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVolume {
    pub values: Array3<f64>,
}

pub fn softmax_depth(logits: &Array3<f32>) -> Result<ProbabilityVolume> {
    if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::domain(format!("logits must be finite, found {v}")));
    }
    let (d, h, w) = logits.dim();
    let mut p = Array3::<f64>::zeros((d, h, w));
    for y in 0..h {
        for x in 0..w {
            let col = logits.slice(s![.., y, x]);
            let m = col.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let mut sum = 0.0;
            for k in 0..d {
                let e = (col[k] as f64 - m).exp();
                p[[k, y, x]] = e;
                sum += e;
            }
            for k in 0..d {
                p[[k, y, x]] /= sum;
            }
        }
    }
    Ok(ProbabilityVolume { values: p })
}

/// Expected depth, its standard deviation and the `λ` confidence interval.
pub fn depth_from_probability(logits: &Array3<f32>, hyp: &DepthHypotheses, lambda: f64) -> Result<DepthMap> {
    let (d, h, w) = logits.dim();
    if d < 2 {
        return Err(Error::domain("need at least 2 depth planes"));
    }
    if (d, h, w) != hyp.values().dim() {
        return Err(Error::shape("logits do not match the hypotheses"));
    }
    let p = softmax_depth(logits)?.values;
    let mut depth = Array2::<f64>::zeros((h, w));
    let mut sigma = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut mu = 0.0;
            for k in 0..d {
                mu += p[[k, y, x]] * hyp.at(k, y, x);
            }
            let (lo, hi) = hyp.range(y, x);
            let mu = mu.clamp(lo, hi);
            let mut var = 0.0;
            for k in 0..d {
                var += p[[k, y, x]] * (hyp.at(k, y, x) - mu).powi(2);
            }
            depth[[y, x]] = mu;
            sigma[[y, x]] = var.max(0.0).sqrt();
        }
    }
    let interval = interval_from(&depth, &sigma, lambda);
    Ok(DepthMap {
        depth,
        sigma,
        interval,
        valid: Array2::from_elem((h, w), true),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeConfig {
    pub near: f64,
    pub far: f64,
    pub coarse_planes: usize,
    pub fine_planes: usize,
    pub lambda: f64,
    pub tau: f64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            near: 1.0,
            far: 10.0,
            coarse_planes: 16,
            fine_planes: 8,
            lambda: 1.5,
            tau: 10.0,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        inverse_depth_planes(self.near, self.far, self.coarse_planes)?;
        if self.fine_planes < 2 {
            return Err(Error::domain("fine stage needs at least 2 planes"));
        }
        if !(self.lambda > 0.0 && self.tau > 0.0) {
            return Err(Error::domain("lambda and tau must be positive"));
        }
        Ok(())
    }
}

/// Cascade parameters without the depth range, which usually comes from the
/// dataset manifest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeSettings {
    pub coarse_planes: usize,
    pub fine_planes: usize,
    pub lambda: f64,
    pub tau: f64,
}

impl Default for CascadeSettings {
    fn default() -> Self {
        let c = CascadeConfig::default();
        Self {
            coarse_planes: c.coarse_planes,
            fine_planes: c.fine_planes,
            lambda: c.lambda,
            tau: c.tau,
        }
    }
}

impl CascadeSettings {
    pub fn with_range(&self, near: f64, far: f64) -> CascadeConfig {
        CascadeConfig {
            near,
            far,
            coarse_planes: self.coarse_planes,
            fine_planes: self.fine_planes,
            lambda: self.lambda,
            tau: self.tau,
        }
    }
}

/// A source image's camera and feature pyramid.
#[derive(Debug, Clone, Copy)]
pub struct SourceView<'a> {
    pub viewpoint: &'a Viewpoint,
    pub pyramid: &'a FeaturePyramid,
}

/// Everything the cascade computes; the fine stage is what rendering uses.
#[derive(Debug, Clone)]
pub struct CascadeOutput {
    pub coarse: DepthMap,
    pub coarse_hypotheses: DepthHypotheses,
    pub fine: DepthMap,
    pub fine_hypotheses: DepthHypotheses,
    /// One per source, at half resolution, level-2 features.
    pub fine_volumes: Vec<WarpedVolume>,
    /// Fine depth upsampled to the target's full resolution.
    pub full: DepthMap,
    /// Padding applied to reach dimensions divisible by four.
    pub padding: Padding,
}

/// The viewpoint of a padded image at pyramid `level` (1 = quarter).
pub fn level_viewpoint(vp: &Viewpoint, padding: Padding, level: usize) -> Viewpoint {
    let mut padded = *vp;
    padded.intrinsics.cx += padding.left as f64;
    padded.intrinsics.cy += padding.top as f64;
    padded.width += padding.left + padding.right;
    padded.height += padding.top + padding.bottom;
    let factor = 1usize << (3 - level);
    padded.decimated(factor)
}

pub fn cascade_depth(sources: &[SourceView<'_>], target: &Viewpoint, cfg: &CascadeConfig) -> Result<CascadeOutput> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(Error::domain("cascade needs at least one source view"));
    }
    let padding = crate::features::padding_for(target.width, target.height);

    // Stage 1: quarter resolution, planes over the full scene range.
    let tgt1 = level_viewpoint(target, padding, 1);
    let coarse_planes = inverse_depth_planes(cfg.near, cfg.far, cfg.coarse_planes)?;
    let hyp1 = DepthHypotheses::uniform_planes(&coarse_planes, tgt1.height, tgt1.width)?;
    let vols1 = sources
        .iter()
        .map(|s| {
            let vp = level_viewpoint(s.viewpoint, s.pyramid.padding, 1);
            warp_volume(s.pyramid.level1.view(), &vp, &tgt1, &hyp1)
        })
        .collect::<Result<Vec<_>>>()?;
    let cv1 = build_cost_volume(&vols1)?;
    let mut coarse = depth_from_probability(&regularize(&cv1, cfg.tau)?, &hyp1, cfg.lambda)?;
    coarse.valid = cv1.pixel_support();

    // Stage 2: half resolution, per-pixel planes around the coarse estimate.
    let tgt2 = level_viewpoint(target, padding, 2);
    let up = coarse.upsampled(2, tgt2.height, tgt2.width, cfg.lambda);
    let floor = Array2::from_shape_fn(up.depth.raw_dim(), |(y, x)| {
        let (cy, cx) = ((y / 2).min(tgt1.height - 1), (x / 2).min(tgt1.width - 1));
        hyp1.spacing_at(cy, cx, up.depth[[y, x]])
    });
    let fallback = inverse_depth_planes(cfg.near, cfg.far, cfg.fine_planes)?;
    let hyp2 = refine_hypotheses(&up, &floor, cfg.lambda, cfg.fine_planes, &fallback)?;
    let vols2 = sources
        .iter()
        .map(|s| {
            let vp = level_viewpoint(s.viewpoint, s.pyramid.padding, 2);
            warp_volume(s.pyramid.level2.view(), &vp, &tgt2, &hyp2)
        })
        .collect::<Result<Vec<_>>>()?;
    let cv2 = build_cost_volume(&vols2)?;
    let mut fine = depth_from_probability(&regularize(&cv2, cfg.tau)?, &hyp2, cfg.lambda)?;
    fine.valid = cv2.pixel_support();

    let full_padded = fine.upsampled(2, tgt2.height * 2, tgt2.width * 2, cfg.lambda);
    let crop = |a: &Array2<f64>| {
        a.slice(s![padding.top..padding.top + target.height, padding.left..padding.left + target.width])
            .to_owned()
    };
    let full = DepthMap {
        depth: crop(&full_padded.depth),
        sigma: crop(&full_padded.sigma),
        interval: full_padded
            .interval
            .slice(s![padding.top..padding.top + target.height, padding.left..padding.left + target.width, ..])
            .to_owned(),
        valid: full_padded
            .valid
            .slice(s![padding.top..padding.top + target.height, padding.left..padding.left + target.width])
            .to_owned(),
    };

    Ok(CascadeOutput {
        coarse,
        coarse_hypotheses: hyp1,
        fine,
        fine_hypotheses: hyp2,
        fine_volumes: vols2,
        full,
        padding,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, CameraPose};
    use nalgebra::Vector3;
    use proptest::prelude::*;

    #[test]
    fn inverse_depth_examples() {
        assert!(inverse_depth_planes(1.0, 1.0, 4).is_err());
        assert!(inverse_depth_planes(1.0, 2.0, 1).is_err());
        assert_eq!(inverse_depth_planes(1.0, 3.0, 2).unwrap(), vec![1.0, 3.0]);
        let p = inverse_depth_planes(1.0, 2.0, 3).unwrap();
        assert!((p[1] - 4.0 / 3.0).abs() < 1e-12);
        for (z, inv) in p.iter().zip([1.0, 0.75, 0.5]) {
            assert!((1.0 / z - inv).abs() < 1e-12);
        }
    }

    fn map1(depth: f64, sigma: f64) -> DepthMap {
        let d = Array2::from_elem((1, 1), depth);
        let s = Array2::from_elem((1, 1), sigma);
        DepthMap {
            interval: interval_from(&d, &s, 1.5),
            depth: d,
            sigma: s,
            valid: Array2::from_elem((1, 1), true),
        }
    }

    #[test]
    fn refine_examples() {
        let fb = [1.0, 2.0, 3.0, 4.0];
        let floor = Array2::from_elem((1, 1), 0.1);
        let h = refine_hypotheses(&map1(2.0, 0.5), &floor, 1.5, 4, &fb).unwrap();
        assert!((h.range(0, 0).0 - 1.25).abs() < 1e-12);
        assert!((h.range(0, 0).1 - 2.75).abs() < 1e-12);

        let h = refine_hypotheses(&map1(2.0, 0.0), &floor, 1.5, 4, &fb).unwrap();
        let (lo, hi) = h.range(0, 0);
        assert!((hi - lo - 0.1).abs() < 1e-12);
        assert!((0.5 * (lo + hi) - 2.0).abs() < 1e-12);

        let h = refine_hypotheses(&map1(0.1, 1.0), &floor, 1.5, 4, &fb).unwrap();
        assert_eq!(h.range(0, 0).0, DEPTH_EPSILON);
        assert!(h.range(0, 0).1 > 0.1);
    }

    #[test]
    fn variance_cost_examples() {
        let vol = |v: f32, m: bool| WarpedVolume {
            values: Array4::from_elem((1, 1, 1, 1), v),
            mask: Array3::from_elem((1, 1, 1), m),
        };
        let cv = build_cost_volume(&[vol(1.0, true), vol(3.0, true)]).unwrap();
        assert_eq!(cv.values[[0, 0, 0, 0]], 1.0);
        let cv = build_cost_volume(&[vol(2.0, true), vol(2.0, true)]).unwrap();
        assert_eq!(cv.values[[0, 0, 0, 0]], 0.0);
        let cv = build_cost_volume(&[vol(1.0, true), vol(100.0, false), vol(3.0, true)]).unwrap();
        assert_eq!(cv.values[[0, 0, 0, 0]], 1.0);
        assert_eq!(cv.view_count[[0, 0, 0]], 2);
        let cv = build_cost_volume(&[vol(5.0, true)]).unwrap();
        assert_eq!(cv.values[[0, 0, 0, 0]], 0.0);
        assert!(cv.low_confidence()[[0, 0, 0]]);
        assert!(build_cost_volume(&[]).is_err());
    }

    #[test]
    fn masked_variance_matches_bruteforce() {
        let mut s = 3u64;
        let mut rnd = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 40) as f32 / (1u64 << 24) as f32
        };
        let vols: Vec<WarpedVolume> = (0..3)
            .map(|_| WarpedVolume {
                values: Array4::from_shape_fn((3, 4, 5, 2), |_| rnd()),
                mask: Array3::from_shape_fn((3, 4, 5), |_| rnd() > 0.3),
            })
            .collect();
        let cv = build_cost_volume(&vols).unwrap();
        for ((k, y, x, c), got) in cv.values.indexed_iter() {
            let vals: Vec<f64> = vols
                .iter()
                .filter(|v| v.mask[[k, y, x]])
                .map(|v| v.values[[k, y, x, c]] as f64)
                .collect();
            let expect = if vals.is_empty() {
                0.0
            } else {
                let n = vals.len() as f64;
                let sq: f64 = vals.iter().map(|v| v * v).sum::<f64>() / n;
                let m: f64 = vals.iter().sum::<f64>() / n;
                sq - m * m
            };
            assert!((*got as f64 - expect).abs() < 1e-6);
        }
    }

    fn cost_from(mean: &Array3<f32>) -> CostVolume {
        let (d, h, w) = mean.dim();
        CostVolume {
            values: mean.clone().into_shape_with_order((d, h, w, 1)).unwrap(),
            view_count: Array3::from_elem((d, h, w), 2),
        }
    }

    #[test]
    fn regularizer_examples() {
        let zero = cost_from(&Array3::zeros((4, 3, 3)));
        assert!(regularize(&zero, 10.0).unwrap().iter().all(|&v| v == 0.0));

        let mut field = Array3::from_elem((5, 5, 5), 1.0f32);
        field[[2, 2, 2]] = 0.0;
        let cv = cost_from(&field);
        let l = regularize(&cv, 10.0).unwrap();
        let best = l.indexed_iter().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(best, (2, 2, 2));
        // hand convolution: the spike's logit gain is the product of the
        // three central taps
        let g = |s: f64| gaussian_taps(s)[(3.0 * s).ceil() as usize];
        let expect = -10.0 * (1.0 - g(1.0) * g(1.0) * g(0.5));
        assert!((l[[2, 2, 2]] as f64 - expect).abs() < 1e-5);

        let l2 = regularize(&cv, 20.0).unwrap();
        for (a, b) in l.iter().zip(l2.iter()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn unsupported_voxels_are_pessimistic() {
        let mut field = Array3::from_elem((3, 1, 1), 0.5f32);
        field[[0, 0, 0]] = 0.2;
        let mut cv = cost_from(&field);
        cv.values[[2, 0, 0, 0]] = 0.0;
        cv.view_count[[2, 0, 0]] = 1;
        let l = regularize(&cv, 10.0).unwrap();
        assert!(l[[2, 0, 0]] < l[[0, 0, 0]]);
        cv.view_count.fill(1);
        assert!(regularize(&cv, 10.0).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn regression_examples() {
        let hyp = DepthHypotheses::uniform_planes(&[1.0, 2.0, 3.0], 1, 1).unwrap();
        let eq = Array3::<f32>::zeros((3, 1, 1));
        let m = depth_from_probability(&eq, &hyp, 1.5).unwrap();
        assert!((m.depth[[0, 0]] - 2.0).abs() < 1e-12);
        assert!((m.sigma[[0, 0]] - (2.0f64 / 3.0).sqrt()).abs() < 1e-9);

        let mut onehot = Array3::<f32>::from_elem((3, 1, 1), -1e4);
        onehot[[1, 0, 0]] = 0.0;
        let m = depth_from_probability(&onehot, &hyp, 1.5).unwrap();
        assert_eq!(m.depth[[0, 0]], 2.0);
        assert_eq!(m.sigma[[0, 0]], 0.0);

        let quarter = Array3::from_shape_vec((3, 1, 1), vec![0.0f32, 2f32.ln(), 0.0]).unwrap();
        let m = depth_from_probability(&quarter, &hyp, 1.5).unwrap();
        assert!((m.depth[[0, 0]] - 2.0).abs() < 1e-6);
        assert!((m.sigma[[0, 0]] - 0.5f64.sqrt()).abs() < 1e-6);

        let mut bad = eq.clone();
        bad[[0, 0, 0]] = f32::NAN;
        assert!(depth_from_probability(&bad, &hyp, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn softmax_and_regression_invariants(
            logits in proptest::collection::vec(-20.0f32..20.0, 6),
            shift in -50.0f32..50.0,
            base in 0.5f64..3.0,
        ) {
            let planes: Vec<f64> = (0..6).map(|k| base + 0.3 * k as f64 + 0.05 * (k * k) as f64).collect();
            let hyp = DepthHypotheses::uniform_planes(&planes, 1, 1).unwrap();
            let l = Array3::from_shape_vec((6, 1, 1), logits.clone()).unwrap();
            let p = softmax_depth(&l).unwrap().values;
            prop_assert!((p.sum() - 1.0).abs() < 1e-6);
            let shifted = l.mapv(|v| v + shift);
            let q = softmax_depth(&shifted).unwrap().values;
            for (a, b) in p.iter().zip(q.iter()) {
                prop_assert!((a - b).abs() < 1e-5);
            }
            let m = depth_from_probability(&l, &hyp, 1.5).unwrap();
            let (lo, hi) = hyp.range(0, 0);
            prop_assert!(m.depth[[0, 0]] >= lo && m.depth[[0, 0]] <= hi);
            prop_assert!(m.sigma[[0, 0]] <= (hi - lo) / 2.0 + 1e-9);
            prop_assert!(m.interval[[0, 0, 0]] <= m.depth[[0, 0]] && m.depth[[0, 0]] <= m.interval[[0, 0, 1]]);
            let floor = Array2::from_elem((1, 1), planes[1] - planes[0]);
            let fine = refine_hypotheses(&m, &floor, 1.5, 8, &inverse_depth_planes(1.0, 5.0, 8).unwrap()).unwrap();
            let (flo, fhi) = fine.range(0, 0);
            prop_assert!(flo <= m.depth[[0, 0]] && m.depth[[0, 0]] <= fhi);
        }

        #[test]
        fn sharpening_collapses_spread(logits in proptest::collection::vec(-3.0f32..3.0, 5)) {
            let hyp = DepthHypotheses::uniform_planes(&[1.0, 1.5, 2.0, 2.5, 3.0], 1, 1).unwrap();
            let mut sorted = logits.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            prop_assume!(sorted[0] - sorted[1] > 0.05);
            let sharp = Array3::from_shape_vec((5, 1, 1), logits.iter().map(|v| v * 2000.0).collect()).unwrap();
            let m = depth_from_probability(&sharp, &hyp, 1.5).unwrap();
            prop_assert!(m.sigma[[0, 0]] < 1e-6);
        }
    }

    fn rig() -> (Viewpoint, Viewpoint) {
        let k = CameraIntrinsics::new(40.0, 40.0, 23.5, 15.5).unwrap();
        let tgt = Viewpoint::new(k, CameraPose::identity(), 48, 32).unwrap();
        let src = Viewpoint::new(
            k,
            CameraPose::new(nalgebra::Matrix3::identity(), Vector3::new(-0.3, 0.0, 0.0)).unwrap(),
            48,
            32,
        )
        .unwrap();
        (src, tgt)
    }

    #[test]
    fn warp_at_true_depth_aligns_plane_texture() {
        // Source sees a fronto-parallel plane at z = 2: shift of fx * b / z px.
        let (src, tgt) = rig();
        let img = |shift: f64| {
            Array3::from_shape_fn((32, 48, 1), |(y, x, _)| {
                let u = x as f64 + shift;
                (0.3 * u).sin() as f32 + 0.1 * y as f32
            })
        };
        let src_map = img(6.0);
        let tgt_map = img(0.0);
        let hyp = DepthHypotheses::uniform_planes(&[1.5, 2.0, 3.0], 32, 48).unwrap();
        let vol = warp_volume(src_map.view(), &src, &tgt, &hyp).unwrap();
        for y in 0..32 {
            for x in 8..48 {
                assert!(vol.mask[[1, y, x]]);
                assert!((vol.values[[1, y, x, 0]] - tgt_map[[y, x, 0]]).abs() < 1e-5);
            }
        }
        assert!(!vol.mask[[1, 0, 0]]);
    }

    #[test]
    fn textureless_scene_is_low_confidence() {
        let (src, tgt) = rig();
        let img = Array3::from_elem((32, 48, 3), 0.5f32);
        let pyr = crate::features::extract_pyramid(img.view()).unwrap();
        let srcs = [SourceView { viewpoint: &src, pyramid: &pyr }, SourceView { viewpoint: &tgt, pyramid: &pyr }];
        let cfg = CascadeConfig { near: 1.0, far: 6.0, ..Default::default() };
        let out = cascade_depth(&srcs, &tgt, &cfg).unwrap();
        let low = out.coarse.low_confidence(&out.coarse_hypotheses, 0.2);
        let frac = low.iter().filter(|&&b| b).count() as f64 / low.len() as f64;
        assert!(frac > 0.9, "low-confidence fraction {frac}");
        assert_eq!(out.full.depth.dim(), (32, 48));
    }
}
