use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Gathered, BLEND_INPUT_DIMS};
use crate::autodiff::{load_checkpoint, save_checkpoint, Checkpoint, ParameterSet, Tape, Tensor, Var};
use crate::costvolume::CascadeSettings;
use crate::error::{Error, Result};
use crate::medium::{
    sh_encode_rows, BackscatterExponent, ColorMlpWeights, DenseLayer, MediumSubnetWeights, DEFAULT_SH_LEVEL,
    MASKED_LOGIT, MAX_SH_LEVEL,
};

/// Architecture and inference switches stored alongside the weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub sh_level: usize,
    pub exponent: BackscatterExponent,
    /// Replace restoration and re-composition by direct blending of the
    /// underwater source colours.
    pub ablate_medium: bool,
    pub cascade: CascadeSettings,
    /// Source views used when rendering or restoring a single view.
    pub inference_views: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            sh_level: DEFAULT_SH_LEVEL,
            exponent: BackscatterExponent::default(),
            ablate_medium: false,
            cascade: CascadeSettings::default(),
            inference_views: 4,
        }
    }
}

impl ModelSettings {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_SH_LEVEL).contains(&self.sh_level) {
            return Err(Error::Config(format!("sh_level must lie in 1..={MAX_SH_LEVEL}, got {}", self.sh_level)));
        }
        if self.inference_views < 2 {
            return Err(Error::Config("inference_views must be at least 2".into()));
        }
        self.cascade.with_range(1.0, 2.0).validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Trained medium subnet and colour MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub settings: ModelSettings,
    pub medium: MediumSubnetWeights,
    pub color: ColorMlpWeights,
}

fn layer_names(prefix: &str, i: usize) -> (String, String) {
    (format!("{prefix}.{i}.weight"), format!("{prefix}.{i}.bias"))
}

fn push_layer(params: &mut ParameterSet, prefix: &str, i: usize, l: &DenseLayer) -> Result<()> {
    let (w, b) = layer_names(prefix, i);
    params.insert(w, Tensor::from_array(&l.weight))?;
    params.insert(b, Tensor::from_array(&l.bias))
}

fn read_layer(params: &ParameterSet, prefix: &str, i: usize, inputs: usize, outputs: usize) -> Result<DenseLayer> {
    let (wn, bn) = layer_names(prefix, i);
    let get = |n: &str, shape: &[usize]| -> Result<Vec<f32>> {
        let t = params
            .get(n)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks {n}")))?;
        if t.shape() != shape {
            return Err(Error::Config(format!("{n} has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t.data().to_vec())
    };
    Ok(DenseLayer {
        weight: Array2::from_shape_vec((inputs, outputs), get(&wn, &[inputs, outputs])?)
            .map_err(|e| Error::shape(e.to_string()))?,
        bias: Array1::from(get(&bn, &[outputs])?),
    })
}

impl Model {
    pub fn init<R: Rng>(settings: ModelSettings, rng: &mut R) -> Result<Self> {
        settings.validate()?;
        let medium = MediumSubnetWeights::init(settings.sh_level, rng);
        let color = ColorMlpWeights::init(BLEND_INPUT_DIMS, rng);
        Ok(Self { settings, medium, color })
    }

    pub fn to_params(&self) -> Result<ParameterSet> {
        let mut p = ParameterSet::new();
        for (i, l) in self.medium.layers.iter().enumerate() {
            push_layer(&mut p, "medium", i, l)?;
        }
        for (i, l) in self.color.layers.iter().enumerate() {
            push_layer(&mut p, "color", i, l)?;
        }
        Ok(p)
    }

    pub fn from_params(settings: ModelSettings, params: &ParameterSet) -> Result<Self> {
        settings.validate()?;
        let shape = MediumSubnetWeights::zeros(settings.sh_level);
        let mut medium = shape.clone();
        for (i, l) in shape.layers.iter().enumerate() {
            let (a, b) = l.weight.dim();
            medium.layers[i] = read_layer(params, "medium", i, a, b)?;
        }
        let shape = ColorMlpWeights::zeros(BLEND_INPUT_DIMS);
        let mut color = shape.clone();
        for (i, l) in shape.layers.iter().enumerate() {
            let (a, b) = l.weight.dim();
            color.layers[i] = read_layer(params, "color", i, a, b)?;
        }
        Ok(Self { settings, medium, color })
    }
}

#[derive(Serialize)]
struct CheckpointMeta<'a, T> {
    model: ModelSettings,
    #[serde(skip_serializing_if = "Option::is_none")]
    run: Option<&'a T>,
}

#[derive(Deserialize)]
struct StoredMeta {
    model: ModelSettings,
}

/// Save parameters with optimiser state; `run` is any extra record (the
/// training configuration, usually) stored in the metadata.
pub fn save_model<T: Serialize>(path: &Path, settings: &ModelSettings, params: &ParameterSet, run: Option<&T>) -> Result<()> {
    let meta = CheckpointMeta { model: *settings, run };
    let metadata = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
    save_checkpoint(
        path,
        &Checkpoint {
            metadata,
            params: params.clone(),
        },
    )
}

pub fn load_model(path: &Path) -> Result<(Model, ParameterSet)> {
    let ckpt = load_checkpoint(path)?;
    let meta: StoredMeta = toml::from_str(&ckpt.metadata).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        offset: 0,
        message: format!("checkpoint metadata: {}", e.message()),
    })?;
    let model = Model::from_params(meta.model, &ckpt.params)?;
    Ok((model, ckpt.params))
}

fn dense<'t>(tape: &'t Tape, params: &ParameterSet, prefix: &str, i: usize, x: Var<'t>) -> Result<Var<'t>> {
    let (w, b) = layer_names(prefix, i);
    x.matmul(tape.parameter(params, &w)?)?.add(tape.parameter(params, &b)?)
}

fn column<'t>(tape: &'t Tape, values: impl Iterator<Item = f32>, rows: usize, cols: usize) -> Result<Var<'t>> {
    Ok(tape.constant(Tensor::new(&[rows, cols], values.collect())?))
}

/// Differentiable forward pass for gathered pixels.
pub struct RenderGraph<'t> {
    /// `P × 3` predicted underwater colour.
    pub image: Var<'t>,
    /// `P × 3` blended clear colour (equal to `image` under ablation).
    pub clear: Var<'t>,
    /// `N × P` blend weights.
    pub weights: Var<'t>,
}

/// Build the rendering graph: medium subnet on target and source rays,
/// raw restoration of every source sample, learned blend and re-composition.
pub fn render_graph<'t>(
    tape: &'t Tape,
    params: &ParameterSet,
    settings: &ModelSettings,
    g: &Gathered,
) -> Result<RenderGraph<'t>> {
    let (n, p) = (g.views, g.pixels);

    let x = tape.constant(Tensor::from_array(&g.blend_input));
    let hidden = dense(tape, params, "color", 0, x)?.relu()?;
    let logits = dense(tape, params, "color", 1, hidden)?.reshape(&[n, p])?;
    let mask = Tensor::new(
        &[n, p],
        g.source_valid.iter().map(|&v| if v { 0.0 } else { MASKED_LOGIT }).collect(),
    )?;
    let weights = logits.add(tape.constant(mask))?.softmax(0)?;
    let w3 = weights.reshape(&[n, p, 1])?;

    let observed = tape.constant(Tensor::new(
        &[n, p, 3],
        g.source_color.iter().flat_map(|c| c.iter().copied()).collect(),
    )?);

    if settings.ablate_medium {
        let image = w3.mul(observed)?.sum(0)?;
        return Ok(RenderGraph {
            image,
            clear: image,
            weights,
        });
    }

    let mut dirs = g.target_dirs.clone();
    dirs.extend_from_slice(&g.source_dirs);
    let enc = tape.constant(Tensor::from_array(&sh_encode_rows(&dirs, settings.sh_level)?));
    let h1 = dense(tape, params, "medium", 0, enc)?.relu()?;
    let h2 = dense(tape, params, "medium", 1, h1)?.relu()?;
    let base = dense(tape, params, "medium", 2, h2)?;
    let m = p + n * p;
    let sigma_a = base.slice(1, 0, 3)?.softplus()?;
    let sigma_b = base.slice(1, 3, 6)?.softplus()?;
    let water = base.slice(1, 6, 9)?.sigmoid()?;

    // sources: c = (ĉ − B(1 − e^{−σb z})) · e^{σa z}
    let zs = column(tape, g.source_depth.iter().map(|&z| z as f32), n * p, 1)?;
    let sa_s = sigma_a.slice(0, p, m)?;
    let sb_s = sigma_b.slice(0, p, m)?;
    let b_s = water.slice(0, p, m)?;
    let veil_s = b_s.mul(sb_s.mul(zs)?.neg()?.exp()?.neg()?.add_scalar(1.0)?)?;
    let clear_s = observed
        .reshape(&[n * p, 3])?
        .sub(veil_s)?
        .mul(sa_s.mul(zs)?.exp()?)?
        .reshape(&[n, p, 3])?;
    let clear = w3.mul(clear_s)?.sum(0)?;

    // target: Î = c · e^{−σa L} + B(1 − e^{−σ L})
    let zt = column(tape, g.target_depth.iter().map(|&z| z as f32), p, 1)?;
    let sa_t = sigma_a.slice(0, 0, p)?;
    let sb_t = match settings.exponent {
        BackscatterExponent::Backscatter => sigma_b.slice(0, 0, p)?,
        BackscatterExponent::Attenuation => sa_t,
    };
    let b_t = water.slice(0, 0, p)?;
    let attenuated = clear.mul(sa_t.mul(zt)?.neg()?.exp()?)?;
    let backscatter = b_t.mul(sb_t.mul(zt)?.neg()?.exp()?.neg()?.add_scalar(1.0)?)?;
    let image = attenuated.add(backscatter)?;
    Ok(RenderGraph { image, clear, weights })
}
