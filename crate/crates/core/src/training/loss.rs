use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::imaging::{gaussian_window, SsimConstants, SSIM_WINDOW_SIGMA, SSIM_WINDOW_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the D-SSIM term.
    pub lambda_loss: f64,
    /// Stabiliser in the relative reconstruction loss.
    pub epsilon: f64,
    /// Replace the relative reconstruction term with plain L1.
    pub use_l1_variant: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_loss: 0.2,
            epsilon: 1e-3,
            use_l1_variant: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_loss) {
            return Err(Error::Config(format!("lambda_loss must lie in [0, 1], got {}", self.lambda_loss)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

fn check_same_shape(a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Domain(format!(
            "prediction {:?} and target {:?} differ in shape",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean of `((pred − truth) / (sg(pred) + ε))²`.
///
/// The stop-gradient denominator is floored at zero before adding `ε`, so
/// a negative prediction cannot drive it through zero.
pub fn recon_loss<'t>(pred: Var<'t>, truth: Var<'t>, epsilon: f64) -> Result<Var<'t>> {
    check_same_shape(&pred, &truth)?;
    let eps = epsilon as f32;
    let denom = pred.tape().constant(pred.value().map(|v| v.max(0.0) + eps));
    pred.sub(truth)?.div(denom)?.square()?.mean_all()
}

/// Mean absolute error.
pub fn l1_loss<'t>(pred: Var<'t>, truth: Var<'t>) -> Result<Var<'t>> {
    check_same_shape(&pred, &truth)?;
    let d = pred.sub(truth)?;
    d.relu()?.add(d.neg()?.relu()?)?.mean_all()
}

/// `(1 − SSIM) / 2` for `[C, H, W]` images, valid 11×11 Gaussian windows,
/// averaged over windows and channels.
pub fn dssim_loss<'t>(pred: Var<'t>, truth: Var<'t>) -> Result<Var<'t>> {
    check_same_shape(&pred, &truth)?;
    let shape = pred.shape();
    if shape.len() != 3 || shape[1] < SSIM_WINDOW_SIZE || shape[2] < SSIM_WINDOW_SIZE {
        return Err(Error::Domain(format!(
            "dssim needs [C, H, W] images of at least {0}x{0}, got {shape:?}",
            SSIM_WINDOW_SIZE
        )));
    }
    let tape = pred.tape();
    let taps = gaussian_window(SSIM_WINDOW_SIZE, SSIM_WINDOW_SIGMA);
    let n = SSIM_WINDOW_SIZE;
    let kernel = Tensor::new(&[n, n], (0..n * n).map(|i| (taps[i / n] * taps[i % n]) as f32).collect())?;
    let k = tape.constant(kernel);
    let c = SsimConstants::default();
    let (c1, c2) = (c.c1 as f32, c.c2 as f32);

    let blur = |v: Var<'t>| v.conv2d(k, 0);
    let mu_x = blur(pred)?;
    let mu_y = blur(truth)?;
    let mu_xx = mu_x.square()?;
    let mu_yy = mu_y.square()?;
    let mu_xy = mu_x.mul(mu_y)?;
    let var_x = blur(pred.square()?)?.sub(mu_xx)?;
    let var_y = blur(truth.square()?)?.sub(mu_yy)?;
    let cov = blur(pred.mul(truth)?)?.sub(mu_xy)?;

    let num = mu_xy.scale(2.0)?.add_scalar(c1)?.mul(cov.scale(2.0)?.add_scalar(c2)?)?;
    let den = mu_xx.add(mu_yy)?.add_scalar(c1)?.mul(var_x.add(var_y)?.add_scalar(c2)?)?;
    let ssim = num.div(den)?.mean_all()?;
    ssim.neg()?.add_scalar(1.0)?.scale(0.5)
}

/// The three loss terms of one evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'t> {
    /// Relative reconstruction loss, or L1 under the variant.
    pub recon: Var<'t>,
    pub dssim: Var<'t>,
    pub total: Var<'t>,
}

/// `(1 − λ)·recon + λ·dssim` over `[C, H, W]` images.
pub fn total_loss<'t>(pred: Var<'t>, truth: Var<'t>, cfg: &LossConfig) -> Result<LossTerms<'t>> {
    let recon = if cfg.use_l1_variant {
        l1_loss(pred, truth)?
    } else {
        recon_loss(pred, truth, cfg.epsilon)?
    };
    let dssim = dssim_loss(pred, truth)?;
    let lambda = cfg.lambda_loss as f32;
    let total = recon.scale(1.0 - lambda)?.add(dssim.scale(lambda)?)?;
    Ok(LossTerms { recon, dssim, total })
}
