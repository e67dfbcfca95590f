//! Underwater image formation: direction encoding, the medium subnet, the
//! per-pixel imaging equation and its inverse, view blending and
//! re-composition of the underwater image.
//!
//! For one channel with clear radiance `c`, depth `z`, attenuation `σa`,
//! backscatter coefficient `σb` and water colour `B`:
//!
//! ```text
//! ĉ = c · exp(−σa z) + B · (1 − exp(−σb z))
//! ```

use nalgebra::Vector3;
use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SH_LEVEL: usize = 4;
pub const MAX_SH_LEVEL: usize = 5;
pub const MEDIUM_HIDDEN: [usize; 2] = [128, 64];
pub const MEDIUM_OUTPUTS: usize = 9;
pub const COLOR_HIDDEN: usize = 24;
/// Restoration is refused below this transmission.
pub const MIN_TRANSMISSION: f64 = 1e-8;
/// Logit offset that removes a view from the blend softmax.
pub const MASKED_LOGIT: f32 = -1e9;

/// Real spherical-harmonic basis, degrees `0..level`, `level²` values.
pub fn sh_basis(d: &Vector3<f64>, level: usize, out: &mut [f64]) {
    assert!((1..=MAX_SH_LEVEL).contains(&level), "SH level must be in 1..={MAX_SH_LEVEL}");
    assert!(out.len() >= level * level);
    let (x, y, z) = (d.x, d.y, d.z);
    out[0] = 0.282_094_791_773_878_14;
    if level == 1 {
        return;
    }
    let c1 = 0.488_602_511_902_919_9;
    out[1] = -c1 * y;
    out[2] = c1 * z;
    out[3] = -c1 * x;
    if level == 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[4] = 1.092_548_430_592_079_2 * x * y;
    out[5] = -1.092_548_430_592_079_2 * y * z;
    out[6] = 0.315_391_565_252_520_05 * (3.0 * zz - 1.0);
    out[7] = -1.092_548_430_592_079_2 * x * z;
    out[8] = 0.546_274_215_296_039_6 * (xx - yy);
    if level == 3 {
        return;
    }
    out[9] = -0.590_043_589_926_643_5 * y * (3.0 * xx - yy);
    out[10] = 2.890_611_442_640_554 * x * y * z;
    out[11] = -0.457_045_799_464_465_8 * y * (5.0 * zz - 1.0);
    out[12] = 0.373_176_332_590_115_4 * z * (5.0 * zz - 3.0);
    out[13] = -0.457_045_799_464_465_8 * x * (5.0 * zz - 1.0);
    out[14] = 1.445_305_721_320_277 * z * (xx - yy);
    out[15] = -0.590_043_589_926_643_5 * x * (xx - 3.0 * yy);
    if level == 4 {
        return;
    }
    out[16] = 2.503_342_941_796_704_6 * x * y * (xx - yy);
    out[17] = -1.770_130_769_779_930_4 * y * z * (3.0 * xx - yy);
    out[18] = 0.946_174_695_757_560_1 * x * y * (7.0 * zz - 1.0);
    out[19] = -0.669_046_543_557_289_2 * y * z * (7.0 * zz - 3.0);
    out[20] = 0.105_785_546_915_204_31 * (35.0 * zz * zz - 30.0 * zz + 3.0);
    out[21] = -0.669_046_543_557_289_2 * x * z * (7.0 * zz - 3.0);
    out[22] = 0.473_087_347_878_780_04 * (xx - yy) * (7.0 * zz - 1.0);
    out[23] = -1.770_130_769_779_930_4 * x * z * (xx - 3.0 * yy);
    out[24] = 0.625_835_735_449_176_1 * (xx * (xx - 3.0 * yy) - yy * (3.0 * xx - yy));
}

fn check_unit(d: &Vector3<f64>) -> Result<()> {
    let n = d.norm();
    if !((n - 1.0).abs() <= 1e-6) {
        return Err(Error::domain(format!("direction norm {n} is not 1")));
    }
    Ok(())
}

/// Encode a list of unit directions as an `n × level²` matrix.
pub fn sh_encode_rows(dirs: &[Vector3<f64>], level: usize) -> Result<Array2<f32>> {
    if !(1..=MAX_SH_LEVEL).contains(&level) {
        return Err(Error::domain(format!("SH level must be in 1..={MAX_SH_LEVEL}, got {level}")));
    }
    let b = level * level;
    let mut out = Array2::<f32>::zeros((dirs.len(), b));
    let mut buf = [0.0f64; MAX_SH_LEVEL * MAX_SH_LEVEL];
    for (i, d) in dirs.iter().enumerate() {
        check_unit(d)?;
        sh_basis(d, level, &mut buf);
        for j in 0..b {
            out[[i, j]] = buf[j] as f32;
        }
    }
    Ok(out)
}

/// Encode an `H × W × 3` direction map as `H × W × level²`.
pub fn sh_encode(directions: ArrayView3<f64>, level: usize) -> Result<Array3<f32>> {
    let (h, w, c) = directions.dim();
    if c != 3 {
        return Err(Error::shape("directions must have 3 components"));
    }
    let dirs: Vec<Vector3<f64>> = directions
        .outer_iter()
        .flat_map(|row| {
            row.outer_iter()
                .map(|d| Vector3::new(d[0], d[1], d[2]))
                .collect::<Vec<_>>()
        })
        .collect();
    let rows = sh_encode_rows(&dirs, level)?;
    let b = level * level;
    Ok(rows.into_shape_with_order((h, w, b)).expect("row count matches"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `in × out`; applied as `x · W + b`.
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Uniform in `±1/√fan_in`, zero bias.
    pub fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let k = 1.0 / (inputs as f32).sqrt();
        Self {
            weight: Array2::from_shape_fn((inputs, outputs), |_| rng.random_range(-k..=k)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn forward(&self, x: ArrayView2<f32>) -> Result<Array2<f32>> {
        if x.dim().1 != self.weight.dim().0 {
            return Err(Error::domain(format!(
                "layer expects {} inputs, got {}",
                self.weight.dim().0,
                x.dim().1
            )));
        }
        Ok(x.dot(&self.weight) + &self.bias)
    }
}

fn relu(mut a: Array2<f32>) -> Array2<f32> {
    a.mapv_inplace(|v| v.max(0.0));
    a
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Direction-conditioned decoder `level² → 128 → 64 → 9`.
#[derive(Debug, Clone, PartialEq)]
pub struct MediumSubnetWeights {
    pub level: usize,
    pub layers: [DenseLayer; 3],
}

impl MediumSubnetWeights {
    pub fn zeros(level: usize) -> Self {
        let b = level * level;
        Self {
            level,
            layers: [
                DenseLayer::zeros(b, MEDIUM_HIDDEN[0]),
                DenseLayer::zeros(MEDIUM_HIDDEN[0], MEDIUM_HIDDEN[1]),
                DenseLayer::zeros(MEDIUM_HIDDEN[1], MEDIUM_OUTPUTS),
            ],
        }
    }

    pub fn init<R: Rng>(level: usize, rng: &mut R) -> Self {
        let b = level * level;
        Self {
            level,
            layers: [
                DenseLayer::init(b, MEDIUM_HIDDEN[0], rng),
                DenseLayer::init(MEDIUM_HIDDEN[0], MEDIUM_HIDDEN[1], rng),
                DenseLayer::init(MEDIUM_HIDDEN[1], MEDIUM_OUTPUTS, rng),
            ],
        }
    }

    /// Raw 9-vector `s_base` per encoded row.
    pub fn base_output(&self, encoded: ArrayView2<f32>) -> Result<Array2<f32>> {
        if encoded.dim().1 != self.level * self.level {
            return Err(Error::domain(format!(
                "encoding has {} channels, subnet expects {}",
                encoded.dim().1,
                self.level * self.level
            )));
        }
        let h1 = relu(self.layers[0].forward(encoded)?);
        let h2 = relu(self.layers[1].forward(h1.view())?);
        self.layers[2].forward(h2.view())
    }
}

/// Medium coefficients at one pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelMedium {
    pub sigma_atten: [f64; 3],
    pub sigma_bs: [f64; 3],
    pub c_bs: [f64; 3],
}

impl PixelMedium {
    pub fn from_base(s: &[f32]) -> Self {
        let f = |i: usize| s[i] as f64;
        Self {
            sigma_atten: [softplus(f(0)), softplus(f(1)), softplus(f(2))],
            sigma_bs: [softplus(f(3)), softplus(f(4)), softplus(f(5))],
            c_bs: [sigmoid(f(6)), sigmoid(f(7)), sigmoid(f(8))],
        }
    }

    pub fn clear_water() -> Self {
        Self {
            sigma_atten: [0.0; 3],
            sigma_bs: [0.0; 3],
            c_bs: [0.0; 3],
        }
    }
}

/// Per-pixel medium maps, each `H × W × 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct MediumParams {
    pub sigma_atten: Array3<f32>,
    pub sigma_bs: Array3<f32>,
    pub c_bs: Array3<f32>,
}

impl MediumParams {
    pub fn uniform(height: usize, width: usize, m: &PixelMedium) -> Self {
        let fill = |v: &[f64; 3]| Array3::from_shape_fn((height, width, 3), |(_, _, c)| v[c] as f32);
        Self {
            sigma_atten: fill(&m.sigma_atten),
            sigma_bs: fill(&m.sigma_bs),
            c_bs: fill(&m.c_bs),
        }
    }

    pub fn at(&self, y: usize, x: usize) -> PixelMedium {
        let g = |a: &Array3<f32>| [a[[y, x, 0]] as f64, a[[y, x, 1]] as f64, a[[y, x, 2]] as f64];
        PixelMedium {
            sigma_atten: g(&self.sigma_atten),
            sigma_bs: g(&self.sigma_bs),
            c_bs: g(&self.c_bs),
        }
    }

    /// Per-channel means of the three maps.
    pub fn channel_means(&self) -> PixelMedium {
        let m = |a: &Array3<f32>| {
            let v = a.mean_axis(Axis(0)).unwrap().mean_axis(Axis(0)).unwrap();
            [v[0] as f64, v[1] as f64, v[2] as f64]
        };
        PixelMedium {
            sigma_atten: m(&self.sigma_atten),
            sigma_bs: m(&self.sigma_bs),
            c_bs: m(&self.c_bs),
        }
    }
}

pub fn medium_forward(encoded: ArrayView3<f32>, weights: &MediumSubnetWeights) -> Result<MediumParams> {
    let (h, w, b) = encoded.dim();
    let rows = encoded
        .to_owned()
        .into_shape_with_order((h * w, b))
        .map_err(|e| Error::shape(e.to_string()))?;
    let base = weights.base_output(rows.view())?;
    let mut p = MediumParams::uniform(h, w, &PixelMedium::clear_water());
    for (i, row) in base.outer_iter().enumerate() {
        let m = PixelMedium::from_base(row.as_slice().expect("contiguous row"));
        let (y, x) = (i / w, i % w);
        for c in 0..3 {
            p.sigma_atten[[y, x, c]] = m.sigma_atten[c] as f32;
            p.sigma_bs[[y, x, c]] = m.sigma_bs[c] as f32;
            p.c_bs[[y, x, c]] = m.c_bs[c] as f32;
        }
    }
    Ok(p)
}

/// Which coefficient drives the backscatter exponent during re-composition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackscatterExponent {
    /// `1 − exp(−σb z)`, consistent with the per-pixel imaging equation.
    #[default]
    Backscatter,
    /// `1 − exp(−σa z)`, the alternative composition formula.
    Attenuation,
}

pub fn render_pixel(c_clr: [f64; 3], m: &PixelMedium, z: f64) -> Result<[f64; 3]> {
    if !(z >= 0.0) {
        return Err(Error::domain(format!("depth must be non-negative, got {z}")));
    }
    let mut out = [0.0; 3];
    for c in 0..3 {
        out[c] = c_clr[c] * (-m.sigma_atten[c] * z).exp() + m.c_bs[c] * (1.0 - (-m.sigma_bs[c] * z).exp());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Restored {
    /// Clamped to `[0, 1]`.
    pub clear: [f64; 3],
    pub raw: [f64; 3],
    /// Transmission fell below [`MIN_TRANSMISSION`] in some channel; the
    /// values were computed with the transmission floored there.
    pub ill_conditioned: bool,
}

pub fn restore_pixel(c_hat: [f64; 3], m: &PixelMedium, z: f64) -> Result<Restored> {
    if !(z >= 0.0) {
        return Err(Error::domain(format!("depth must be non-negative, got {z}")));
    }
    let mut raw = [0.0; 3];
    let mut ill = false;
    for c in 0..3 {
        let t = (-m.sigma_atten[c] * z).exp();
        ill |= t < MIN_TRANSMISSION;
        raw[c] = (c_hat[c] - m.c_bs[c] * (1.0 - (-m.sigma_bs[c] * z).exp())) / t.max(MIN_TRANSMISSION);
    }
    Ok(Restored {
        clear: raw.map(|v| v.clamp(0.0, 1.0)),
        raw,
        ill_conditioned: ill,
    })
}

/// Colour-blending MLP `in → 24 → ReLU → 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorMlpWeights {
    pub layers: [DenseLayer; 2],
}

impl ColorMlpWeights {
    pub fn zeros(inputs: usize) -> Self {
        Self {
            layers: [DenseLayer::zeros(inputs, COLOR_HIDDEN), DenseLayer::zeros(COLOR_HIDDEN, 1)],
        }
    }

    pub fn init<R: Rng>(inputs: usize, rng: &mut R) -> Self {
        Self {
            layers: [DenseLayer::init(inputs, COLOR_HIDDEN, rng), DenseLayer::init(COLOR_HIDDEN, 1, rng)],
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].weight.dim().0
    }

    /// One logit per input row.
    pub fn logits(&self, x: ArrayView2<f32>) -> Result<Array1<f32>> {
        let h = relu(self.layers[0].forward(x)?);
        Ok(self.layers[1].forward(h.view())?.column(0).to_owned())
    }
}

/// Softmax over views; views flagged invalid get weight 0. All-invalid
/// input yields all zeros.
pub fn softmax_views(logits: &[f32], valid: &[bool]) -> Vec<f32> {
    let m = logits
        .iter()
        .zip(valid)
        .filter(|(_, v)| **v)
        .map(|(l, _)| *l as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return vec![0.0; logits.len()];
    }
    let e: Vec<f64> = logits
        .iter()
        .zip(valid)
        .map(|(l, v)| if *v { (*l as f64 - m).exp() } else { 0.0 })
        .collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| (v / s) as f32).collect()
}

/// Blend weights for one target pixel from `concat(f_img, f_grid, f_i)`.
pub fn blend_weights(
    f_img: &[f32],
    f_grid: &[f32],
    f_views: &[&[f32]],
    valid: &[bool],
    mlp: &ColorMlpWeights,
) -> Result<Vec<f32>> {
    if f_views.len() != valid.len() || f_views.is_empty() {
        return Err(Error::domain("need one validity flag per view and at least one view"));
    }
    let dims = f_img.len() + f_grid.len() + f_views[0].len();
    if dims != mlp.inputs() || f_views.iter().any(|f| f.len() != f_views[0].len()) {
        return Err(Error::domain(format!(
            "colour MLP expects {} inputs, features give {dims}",
            mlp.inputs()
        )));
    }
    let mut x = Array2::<f32>::zeros((f_views.len(), dims));
    for (i, f) in f_views.iter().enumerate() {
        let row = f_img.iter().chain(f_grid).chain(f.iter());
        x.row_mut(i).iter_mut().zip(row).for_each(|(o, v)| *o = *v);
    }
    let logits = mlp.logits(x.view())?;
    Ok(softmax_views(logits.as_slice().unwrap(), valid))
}

/// `Σ_i w_i · clear_i`; weights are `N × H × W`, images `H × W × 3`.
pub fn blend_clear(clear_src: &[ArrayView3<f32>], weights: &Array3<f32>) -> Result<Array3<f32>> {
    let (n, h, w) = weights.dim();
    if clear_src.len() != n {
        return Err(Error::shape(format!("{} images for {n} weight maps", clear_src.len())));
    }
    if clear_src.iter().any(|c| c.dim() != (h, w, 3)) {
        return Err(Error::shape("source images must match the weight maps"));
    }
    let mut out = Array3::<f32>::zeros((h, w, 3));
    for (i, src) in clear_src.iter().enumerate() {
        let wi = weights.index_axis(Axis(0), i);
        for y in 0..h {
            for x in 0..w {
                let wt = wi[[y, x]];
                for c in 0..3 {
                    out[[y, x, c]] += wt * src[[y, x, c]];
                }
            }
        }
    }
    Ok(out)
}

/// The underwater image and its two components.
#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub image: Array3<f32>,
    pub attenuated: Array3<f32>,
    pub backscatter: Array3<f32>,
}

/// `Î = c_clr · exp(−σa L̂) + B · (1 − exp(−σ L̂))` with `Î` formed as the
/// exact f32 sum of its components.
pub fn compose_underwater(
    clear: ArrayView3<f32>,
    params: &MediumParams,
    depth: ArrayView2<f64>,
    exponent: BackscatterExponent,
) -> Result<Composite> {
    let (h, w, c) = clear.dim();
    if c != 3 || depth.dim() != (h, w) || params.sigma_atten.dim() != (h, w, 3) {
        return Err(Error::shape("clear image, medium maps and depth must agree"));
    }
    let mut attenuated = Array3::<f32>::zeros((h, w, 3));
    let mut backscatter = Array3::<f32>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let z = depth[[y, x]];
            if !(z >= 0.0) {
                return Err(Error::domain(format!("depth at ({x}, {y}) is {z}")));
            }
            for ch in 0..3 {
                let sa = params.sigma_atten[[y, x, ch]] as f64;
                let sb = match exponent {
                    BackscatterExponent::Backscatter => params.sigma_bs[[y, x, ch]] as f64,
                    BackscatterExponent::Attenuation => sa,
                };
                attenuated[[y, x, ch]] = (clear[[y, x, ch]] as f64 * (-sa * z).exp()) as f32;
                backscatter[[y, x, ch]] = (params.c_bs[[y, x, ch]] as f64 * (1.0 - (-sb * z).exp())) as f32;
            }
        }
    }
    let image = &attenuated + &backscatter;
    Ok(Composite {
        image,
        attenuated,
        backscatter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{SeedTree, Stream};
    use proptest::prelude::*;
    use rand::Rng;

    /// Real SH from associated Legendre functions (Condon-Shortley phase) and
    /// trigonometric azimuth terms.
    fn sh_oracle(d: &Vector3<f64>, l: i32, m: i32) -> f64 {
        let theta = d.z.clamp(-1.0, 1.0).acos();
        let phi = d.y.atan2(d.x);
        let am = m.unsigned_abs() as i32;
        let ct = theta.cos();
        let st = theta.sin();
        // P_m^m, then upward recurrence in l
        let mut pmm = 1.0;
        for i in 1..=am {
            pmm *= -(2 * i - 1) as f64 * st;
        }
        let p = if l == am {
            pmm
        } else {
            let mut p0 = pmm;
            let mut p1 = ct * (2 * am + 1) as f64 * pmm;
            for ll in am + 2..=l {
                let p2 = ((2 * ll - 1) as f64 * ct * p1 - (ll + am - 1) as f64 * p0) / (ll - am) as f64;
                p0 = p1;
                p1 = p2;
            }
            p1
        };
        let fact = |n: i32| (1..=n).map(|v| v as f64).product::<f64>();
        let k = ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI) * fact(l - am) / fact(l + am)).sqrt();
        if m == 0 {
            k * p
        } else if m > 0 {
            std::f64::consts::SQRT_2 * k * (am as f64 * phi).cos() * p
        } else {
            std::f64::consts::SQRT_2 * k * (am as f64 * phi).sin() * p
        }
    }

    #[test]
    fn sh_examples() {
        let mut out = [0.0; 25];
        sh_basis(&Vector3::new(0.0, 0.0, 1.0), 2, &mut out);
        assert!((out[0] - 0.2820948).abs() < 1e-7);
        assert_eq!(out[1], 0.0);
        assert_eq!(out[3], 0.0);
        assert!((out[2] - (3.0 / (4.0 * std::f64::consts::PI)).sqrt()).abs() < 1e-12);
        assert!(sh_encode_rows(&[Vector3::new(0.0, 0.0, 1.1)], 4).is_err());
        assert!(sh_encode_rows(&[Vector3::z()], 0).is_err());
        let enc = sh_encode(Array3::from_shape_fn((2, 3, 3), |(_, _, c)| if c == 2 { 1.0 } else { 0.0 }).view(), 4).unwrap();
        assert_eq!(enc.dim(), (2, 3, 16));
    }

    proptest! {
        #[test]
        fn sh_matches_legendre_oracle(theta in 0.0f64..std::f64::consts::PI, phi in -3.14f64..3.14) {
            let d = Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
            let mut out = [0.0; 25];
            sh_basis(&d, 5, &mut out);
            let mut i = 0;
            for l in 0..5 {
                for m in -l..=l {
                    prop_assert!((out[i] - sh_oracle(&d, l, m)).abs() < 1e-10, "l={} m={}", l, m);
                    i += 1;
                }
            }
        }

        #[test]
        fn imaging_equation_properties(
            c in 0.0f64..1.0, b in 0.0f64..1.0,
            sa in 0.0f64..1.0, sb in 0.0f64..1.0, z in 0.0f64..5.0, dz in 0.0f64..3.0,
        ) {
            let m = PixelMedium { sigma_atten: [sa; 3], sigma_bs: [sb; 3], c_bs: [b; 3] };
            let near = render_pixel([c; 3], &m, z).unwrap()[0];
            let far = render_pixel([c; 3], &m, z + dz).unwrap()[0];
            prop_assert!(near >= 0.0);
            // the convex-blend bound needs attenuation at least as strong as backscatter
            if sa >= sb {
                prop_assert!(near <= c.max(b) + 1e-12);
            }
            if sa == sb {
                if c >= b { prop_assert!(far <= near + 1e-12); } else { prop_assert!(far >= near - 1e-12); }
            }
            if z * sa <= 5.0 {
                let back = restore_pixel([near; 3], &m, z).unwrap();
                prop_assert!((back.raw[0] - c).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn render_restore_examples() {
        let ln2 = std::f64::consts::LN_2;
        let m = PixelMedium { sigma_atten: [ln2; 3], sigma_bs: [ln2; 3], c_bs: [0.5; 3] };
        let r = render_pixel([1.0; 3], &m, 1.0).unwrap();
        assert!(r.iter().all(|v| (v - 0.75).abs() < 1e-12));
        let c = restore_pixel([0.75; 3], &m, 1.0).unwrap();
        assert!(c.clear.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert_eq!(render_pixel([0.3, 0.4, 0.5], &m, 0.0).unwrap(), [0.3, 0.4, 0.5]);
        assert_eq!(restore_pixel([0.3, 0.4, 0.5], &m, 0.0).unwrap().raw, [0.3, 0.4, 0.5]);
        let inf = render_pixel([0.9; 3], &m, 1e6 / ln2).unwrap();
        assert!(inf.iter().all(|v| (v - 0.5).abs() < 1e-6));
        assert!(render_pixel([0.1; 3], &m, -1.0).is_err());
        let bad = restore_pixel([0.5; 3], &m, 40.0).unwrap();
        assert!(bad.ill_conditioned);
        assert!(bad.clear.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_subnet_gives_neutral_medium() {
        let w = MediumSubnetWeights::zeros(4);
        let enc = Array3::from_elem((2, 2, 16), 0.3f32);
        let p = medium_forward(enc.view(), &w).unwrap();
        assert!(p.sigma_atten.iter().all(|v| (*v as f64 - 2f64.ln()).abs() < 1e-6));
        assert!(p.sigma_bs.iter().all(|v| (*v as f64 - 2f64.ln()).abs() < 1e-6));
        assert!(p.c_bs.iter().all(|v| *v == 0.5));
        assert!(medium_forward(Array3::zeros((1, 1, 9)).view(), &w).is_err());
    }

    #[test]
    fn subnet_forward_matches_hand_evaluation() {
        let mut rng = SeedTree::new(5).stream(Stream::Test);
        let mut w = MediumSubnetWeights::init(2, &mut rng);
        for l in w.layers.iter_mut() {
            l.bias.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        }
        let d = Vector3::new(0.3, -0.4, 0.5f64).normalize();
        let mut basis = [0.0; 25];
        sh_basis(&d, 2, &mut basis);
        let x: Vec<f64> = basis[..4].iter().map(|&v| v as f32 as f64).collect();
        let dense = |x: &[f64], l: &DenseLayer, act: bool| -> Vec<f64> {
            (0..l.weight.dim().1)
                .map(|j| {
                    let s: f64 = x.iter().enumerate().map(|(i, v)| v * l.weight[[i, j]] as f64).sum::<f64>() + l.bias[j] as f64;
                    if act { s.max(0.0) } else { s }
                })
                .collect()
        };
        let h1 = dense(&x, &w.layers[0], true);
        let h2 = dense(&h1, &w.layers[1], true);
        let s = dense(&h2, &w.layers[2], false);
        let dirs = Array3::from_shape_fn((1, 2, 3), |(_, _, c)| d[c]);
        let p = medium_forward(sh_encode(dirs.view(), 2).unwrap().view(), &w).unwrap();
        for c in 0..3 {
            assert!((p.sigma_atten[[0, 0, c]] as f64 - softplus(s[c])).abs() < 1e-6);
            assert!((p.sigma_bs[[0, 0, c]] as f64 - softplus(s[3 + c])).abs() < 1e-6);
            assert!((p.c_bs[[0, 0, c]] as f64 - sigmoid(s[6 + c])).abs() < 1e-6);
        }
        assert_eq!(p.at(0, 0), p.at(0, 1));
    }

    #[test]
    fn blending_examples() {
        assert_eq!(softmax_views(&[0.7], &[true]), vec![1.0]);
        let w = softmax_views(&[0.0, 3f32.ln()], &[true, true]);
        assert!((w[0] - 0.25).abs() < 1e-7 && (w[1] - 0.75).abs() < 1e-7);
        assert_eq!(softmax_views(&[5.0, 1.0], &[false, true]), vec![0.0, 1.0]);

        let mut rng = SeedTree::new(1).stream(Stream::Test);
        let mlp = ColorMlpWeights::init(6, &mut rng);
        let f = [0.1f32, 0.2];
        let w = blend_weights(&f, &f, &[&f, &f], &[true, true], &mlp).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
        assert!(blend_weights(&f, &f, &[&f[..1]], &[true], &mlp).is_err());

        let a = Array3::<f32>::zeros((1, 1, 3));
        let b = Array3::<f32>::ones((1, 1, 3));
        let eq = Array3::from_elem((2, 1, 1), 0.5f32);
        assert_eq!(blend_clear(&[a.view(), b.view()], &eq).unwrap()[[0, 0, 1]], 0.5);
        let p = Array3::from_elem((1, 1, 3), 0.2f32);
        let q = Array3::from_elem((1, 1, 3), 0.6f32);
        let w = Array3::from_shape_vec((2, 1, 1), vec![0.25f32, 0.75]).unwrap();
        assert!((blend_clear(&[p.view(), q.view()], &w).unwrap()[[0, 0, 0]] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn composition_identity_and_zero_depth() {
        let clear = Array3::from_shape_fn((3, 4, 3), |(y, x, c)| 0.1 * (y + x + c) as f32 % 1.0);
        let m = PixelMedium { sigma_atten: [0.4, 0.25, 0.15], sigma_bs: [0.15, 0.25, 0.35], c_bs: [0.1, 0.3, 0.45] };
        let params = MediumParams::uniform(3, 4, &m);
        let depth = Array2::from_shape_fn((3, 4), |(y, x)| 1.0 + 0.3 * (x + y) as f64);
        for mode in [BackscatterExponent::Backscatter, BackscatterExponent::Attenuation] {
            let out = compose_underwater(clear.view(), &params, depth.view(), mode).unwrap();
            for ((i, a), b) in out.image.iter().zip(out.attenuated.iter()).zip(out.backscatter.iter()) {
                assert_eq!(*i, a + b);
            }
        }
        let out = compose_underwater(clear.view(), &params, Array2::zeros((3, 4)).view(), BackscatterExponent::Backscatter).unwrap();
        assert_eq!(out.image, clear);
        assert!(out.backscatter.iter().all(|&v| v == 0.0));
        let out = compose_underwater(clear.view(), &params, depth.view(), BackscatterExponent::Backscatter).unwrap();
        let expect = render_pixel([clear[[1, 2, 0]] as f64, clear[[1, 2, 1]] as f64, clear[[1, 2, 2]] as f64], &m, depth[[1, 2]]).unwrap();
        for c in 0..3 {
            assert!((out.image[[1, 2, c]] as f64 - expect[c]).abs() < 1e-6);
        }
    }
}
