use ndarray::{Array2, Array3, ArrayView3};

use super::model::Model;
use super::scene::{all_pixels, gather, target_geometry, ViewData};
use crate::costvolume::DepthMap;
use crate::error::{Error, Result};
use crate::geometry::{ray_directions, Viewpoint};
use crate::medium::{
    blend_clear, compose_underwater, medium_forward, restore_pixel, sh_encode, sh_encode_rows, softmax_views,
    MediumParams, PixelMedium,
};

/// Full inference output for one target view.
#[derive(Debug, Clone)]
pub struct NovelView {
    /// Underwater rendering, `attenuated + backscatter` exactly.
    pub image: Array3<f32>,
    /// Blended medium-free colour.
    pub clear: Array3<f32>,
    pub attenuated: Array3<f32>,
    pub backscatter: Array3<f32>,
    pub depth: DepthMap,
    pub medium: MediumParams,
    /// Pixels with a valid depth seen by at least one source.
    pub valid: Array2<bool>,
}

fn target_medium(model: &Model, target: &Viewpoint) -> Result<MediumParams> {
    if model.settings.ablate_medium {
        return Ok(MediumParams::uniform(target.height, target.width, &PixelMedium::clear_water()));
    }
    let enc = sh_encode(ray_directions(target).view(), model.settings.sh_level)?;
    medium_forward(enc.view(), &model.medium)
}

pub fn render_novel_view(
    model: &Model,
    sources: &[&ViewData],
    target: &Viewpoint,
    near: f64,
    far: f64,
) -> Result<NovelView> {
    if sources.len() < 2 {
        return Err(Error::domain("novel-view rendering needs at least 2 source views"));
    }
    let cfg = model.settings.cascade.with_range(near, far);
    let geom = target_geometry(sources, target, &cfg)?;
    let (h, w) = (target.height, target.width);
    let g = gather(sources, target, &geom, &all_pixels(w, h))?;
    let (n, p) = (g.views, g.pixels);

    let logits = model.color.logits(g.blend_input.view())?;
    let mut weights = Array3::<f32>::zeros((n, h, w));
    let mut buf = vec![0.0f32; n];
    let mut ok = vec![false; n];
    for pi in 0..p {
        for i in 0..n {
            buf[i] = logits[i * p + pi];
            ok[i] = g.source_valid[i * p + pi];
        }
        for (i, wt) in softmax_views(&buf, &ok).into_iter().enumerate() {
            weights[[i, pi / w, pi % w]] = wt;
        }
    }

    let medium = target_medium(model, target)?;
    let mut per_view = vec![Array3::<f32>::zeros((h, w, 3)); n];
    if model.settings.ablate_medium {
        for (i, img) in per_view.iter_mut().enumerate() {
            for pi in 0..p {
                for c in 0..3 {
                    img[[pi / w, pi % w, c]] = g.source_color[i * p + pi][c];
                }
            }
        }
    } else {
        let enc = sh_encode_rows(&g.source_dirs, model.settings.sh_level)?;
        let base = model.medium.base_output(enc.view())?;
        for (i, img) in per_view.iter_mut().enumerate() {
            for pi in 0..p {
                let k = i * p + pi;
                if !g.source_valid[k] {
                    continue;
                }
                let m = PixelMedium::from_base(base.row(k).as_slice().expect("contiguous"));
                let c = g.source_color[k].map(f64::from);
                let r = restore_pixel(c, &m, g.source_depth[k])?;
                for ch in 0..3 {
                    img[[pi / w, pi % w, ch]] = r.clear[ch] as f32;
                }
            }
        }
    }
    let views: Vec<ArrayView3<f32>> = per_view.iter().map(|a| a.view()).collect();
    let clear = blend_clear(&views, &weights)?;
    let valid = Array2::from_shape_vec((h, w), g.pixel_valid.clone()).map_err(|e| Error::shape(e.to_string()))?;

    if model.settings.ablate_medium {
        return Ok(NovelView {
            image: clear.clone(),
            attenuated: clear.clone(),
            backscatter: Array3::zeros((h, w, 3)),
            clear,
            depth: geom.depth,
            medium,
            valid,
        });
    }
    let comp = compose_underwater(clear.view(), &medium, geom.depth.depth.view(), model.settings.exponent)?;
    Ok(NovelView {
        image: comp.image,
        clear,
        attenuated: comp.attenuated,
        backscatter: comp.backscatter,
        depth: geom.depth,
        medium,
        valid,
    })
}

/// Medium-free version of an observed view.
#[derive(Debug, Clone)]
pub struct RestoredView {
    /// Clamped to `[0, 1]`.
    pub clear: Array3<f32>,
    pub depth: DepthMap,
    pub medium: MediumParams,
    /// Pixels whose transmission fell below the restoration floor.
    pub ill_conditioned: usize,
}

/// Invert the imaging equation for an observed image, with depth estimated
/// from `sources` and the medium predicted along the target's rays.
pub fn restore_view(
    model: &Model,
    sources: &[&ViewData],
    target: &Viewpoint,
    observed: ArrayView3<f32>,
    near: f64,
    far: f64,
) -> Result<RestoredView> {
    let (h, w) = (target.height, target.width);
    if observed.dim() != (h, w, 3) {
        return Err(Error::shape("observed image does not match the target view"));
    }
    if sources.is_empty() {
        return Err(Error::domain("restoration needs at least one source view for depth"));
    }
    let cfg = model.settings.cascade.with_range(near, far);
    let geom = target_geometry(sources, target, &cfg)?;
    let medium = target_medium(model, target)?;
    let mut clear = Array3::<f32>::zeros((h, w, 3));
    let mut ill = 0;
    for y in 0..h {
        for x in 0..w {
            let c = [0, 1, 2].map(|ch| observed[[y, x, ch]] as f64);
            let r = restore_pixel(c, &medium.at(y, x), geom.depth.depth[[y, x]])?;
            ill += r.ill_conditioned as usize;
            for ch in 0..3 {
                clear[[y, x, ch]] = r.clear[ch] as f32;
            }
        }
    }
    Ok(RestoredView {
        clear,
        depth: geom.depth,
        medium,
        ill_conditioned: ill,
    })
}
