//! Losses, the per-scene optimisation of the medium subnet and colour MLP,
//! and inference (novel views and restoration).
//!
//! Each iteration picks a target view and 2–4 source views, estimates the
//! target depth with the plane-sweep cascade (treated as a constant), and
//! renders a random patch: every source sample is restored with the medium
//! predicted for its ray, the restorations are blended with learned
//! weights, and the blend is re-composed into an underwater colour that is
//! compared with the observed target.

mod inference;
mod loss;
mod model;
mod scene;

pub use inference::{render_novel_view, restore_view, NovelView, RestoredView};
pub use loss::{dssim_loss, l1_loss, recon_loss, total_loss, LossConfig, LossTerms};
pub use model::{load_model, render_graph, save_model, Model, ModelSettings, RenderGraph};
pub use scene::{
    all_pixels, gather, nearest_views, target_geometry, Gathered, TargetGeometry, ViewData, BLEND_INPUT_DIMS,
    GRID_FEATURE_DIMS, IMAGE_FEATURE_DIMS, VIEW_FEATURE_DIMS,
};

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, ParameterSet, Tape, Tensor};
use crate::error::{Error, Result};
use crate::imaging::Dataset;
use crate::rng::{SeedTree, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Initial Adam step size, decayed along a cosine to `final_learning_rate`.
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    /// Probabilities of using 2, 3 and 4 source views.
    pub view_count_probs: [f64; 3],
    pub patch_size: usize,
    pub seed: u64,
    pub model: ModelSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            learning_rate: 5e-3,
            final_learning_rate: 5e-4,
            view_count_probs: [0.1, 0.8, 0.1],
            patch_size: 32,
            seed: 0,
            model: ModelSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        let p = &self.view_count_probs;
        if p.iter().any(|v| !(*v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("view_count_probs must be non-negative and sum to 1, got {p:?}")));
        }
        if !(self.learning_rate > 0.0 && self.final_learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.patch_size < crate::imaging::SSIM_WINDOW_SIZE {
            return Err(Error::Config(format!(
                "patch_size must be at least {}, got {}",
                crate::imaging::SSIM_WINDOW_SIZE,
                self.patch_size
            )));
        }
        self.model.validate()
    }

    /// Cosine decay from `learning_rate` at iteration 0 to
    /// `final_learning_rate` at the last iteration.
    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        if self.iterations <= 1 {
            return self.learning_rate;
        }
        let t = iteration as f64 / (self.iterations - 1) as f64;
        self.final_learning_rate
            + 0.5 * (self.learning_rate - self.final_learning_rate) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Loss values of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub recon: f64,
    pub dssim: f64,
    pub total: f64,
}

pub fn write_loss_csv(path: &Path, trace: &[LossRecord]) -> Result<()> {
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::Config(format!("{other:?}")),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in trace {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    /// Final parameters with optimiser state, ready for a checkpoint.
    pub params: ParameterSet,
    pub trace: Vec<LossRecord>,
}

/// Train on the non-held-out views of a loaded dataset.
pub fn train_scene(dataset: &Dataset, cfg: &TrainConfig, loss_cfg: &LossConfig) -> Result<TrainOutput> {
    let views = dataset
        .training_indices()
        .into_iter()
        .map(|i| ViewData::from_loaded(&dataset.views[i]))
        .collect::<Result<Vec<_>>>()?;
    train_views(&views, dataset.manifest.near, dataset.manifest.far, cfg, loss_cfg)
}

/// Up to this many `(target, sources)` cascade results are kept between
/// iterations.
const GEOMETRY_CACHE_LIMIT: usize = 512;

pub fn train_views(
    views: &[ViewData],
    near: f64,
    far: f64,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if views.len() < 5 {
        return Err(Error::Domain(format!("training needs at least 5 posed images, got {}", views.len())));
    }
    let (h, w) = (views[0].viewpoint.height, views[0].viewpoint.width);
    let ps = cfg.patch_size;
    if ps > h || ps > w {
        return Err(Error::Config(format!("patch_size {ps} exceeds the {w}x{h} images")));
    }
    let cascade = cfg.model.cascade.with_range(near, far);
    cascade.validate()?;

    let seeds = SeedTree::new(cfg.seed);
    let model = Model::init(cfg.model, &mut seeds.stream(Stream::WeightInit))?;
    let mut params = model.to_params()?;
    let mut view_rng = seeds.stream(Stream::ViewSampling);
    let mut patch_rng = seeds.stream(Stream::PatchSampling);
    let mut cache: HashMap<(usize, Vec<usize>), TargetGeometry> = HashMap::new();
    let mut trace = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let target = view_rng.random_range(0..views.len());
        let u: f64 = view_rng.random();
        let p = &cfg.view_count_probs;
        let n = if u < p[0] {
            2
        } else if u < p[0] + p[1] {
            3
        } else {
            4
        }
        .min(views.len() - 1);
        let mut chosen: Vec<usize> = sample(&mut view_rng, views.len() - 1, n)
            .into_iter()
            .map(|i| if i >= target { i + 1 } else { i })
            .collect();
        chosen.sort_unstable();
        let x0 = patch_rng.random_range(0..=w - ps);
        let y0 = patch_rng.random_range(0..=h - ps);

        let sources: Vec<&ViewData> = chosen.iter().map(|&i| &views[i]).collect();
        let key = (target, chosen.clone());
        if !cache.contains_key(&key) {
            if cache.len() >= GEOMETRY_CACHE_LIMIT {
                cache.clear();
            }
            let geom = target_geometry(&sources, &views[target].viewpoint, &cascade)?;
            cache.insert(key.clone(), geom);
        }
        let geom = &cache[&key];

        let context = |e: Error| match e {
            Error::NonFinite(m) => Error::NonFinite(format!(
                "iteration {it}, target view {target}, patch at ({x0}, {y0}): {m}"
            )),
            other => other,
        };
        let coords: Vec<(usize, usize)> = (y0..y0 + ps).flat_map(|y| (x0..x0 + ps).map(move |x| (x, y))).collect();
        let gathered = gather(&sources, &views[target].viewpoint, geom, &coords)?;
        let tape = Tape::new();
        let terms = patch_loss(&tape, &params, &cfg.model, &gathered, &views[target], loss_cfg).map_err(context)?;
        let record = LossRecord {
            iteration: it,
            recon: terms.recon.item()? as f64,
            dssim: terms.dssim.item()? as f64,
            total: terms.total.item()? as f64,
        };
        if !record.total.is_finite() {
            return Err(context(Error::NonFinite(format!("loss is {}", record.total))));
        }
        tape.backward(terms.total).map_err(context)?;
        params.accumulate(&tape);
        let adam = AdamConfig {
            lr: cfg.learning_rate_at(it),
            ..AdamConfig::default()
        };
        adam_step(&mut params, &adam);
        trace.push(record);
        if it % 250 == 0 || it + 1 == cfg.iterations {
            log::debug!("iteration {it}: loss {:.5}", record.total);
        }
    }

    let model = Model::from_params(cfg.model, &params)?;
    Ok(TrainOutput { model, params, trace })
}

/// Render the gathered square patch and compare it with the observed target.
/// Pixels without a valid depth or source sample are replaced by the truth
/// so they contribute nothing.
pub fn patch_loss<'t>(
    tape: &'t Tape,
    params: &ParameterSet,
    settings: &ModelSettings,
    g: &Gathered,
    target: &ViewData,
    loss_cfg: &LossConfig,
) -> Result<LossTerms<'t>> {
    let side = (g.pixels as f64).sqrt() as usize;
    if side * side != g.pixels {
        return Err(Error::domain("patch must be square"));
    }
    let graph = render_graph(tape, params, settings, g)?;
    let truth: Vec<f32> = g
        .coords
        .iter()
        .flat_map(|&(x, y)| (0..3).map(move |c| (x, y, c)))
        .map(|(x, y, c)| target.image[[y, x, c]])
        .collect();
    let truth = tape.constant(Tensor::new(&[g.pixels, 3], truth)?);
    let m: Vec<f32> = g.pixel_valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let keep = tape.constant(Tensor::new(&[g.pixels, 1], m.clone())?);
    let fill = tape.constant(Tensor::new(&[g.pixels, 1], m.iter().map(|v| 1.0 - v).collect())?);
    let pred = graph.image.mul(keep)?.add(truth.mul(fill)?)?;
    let to_chw = |v: crate::autodiff::Var<'t>| v.transpose()?.reshape(&[3, side, side]);
    total_loss(to_chw(pred)?, to_chw(truth)?, loss_cfg)
}
