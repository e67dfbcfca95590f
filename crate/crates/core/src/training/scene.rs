use nalgebra::Vector3;
use ndarray::{Array2, Array3};

use crate::costvolume::{cascade_depth, CascadeConfig, DepthMap, SourceView};
use crate::error::{Error, Result};
use crate::features::{
    extract_pyramid, grid_features, pool_views, ray_delta, view_averaged_volume, FeaturePyramid,
    PixelAlignedFeature, LEVEL2_CHANNELS, LEVEL3_CHANNELS, RAY_DELTA_DIMS,
};
use crate::geometry::{pixel_direction, project, sample_bilinear, unproject, Viewpoint};
use crate::imaging::LoadedView;

/// Per-view source feature width: level-3 feature plus ray delta.
pub const VIEW_FEATURE_DIMS: usize = LEVEL3_CHANNELS + RAY_DELTA_DIMS;
/// Pooled mean and variance of the per-view features.
pub const IMAGE_FEATURE_DIMS: usize = 2 * VIEW_FEATURE_DIMS;
pub const GRID_FEATURE_DIMS: usize = LEVEL2_CHANNELS;
/// Colour-MLP input width: `f_img ‖ f_grid ‖ f_i`.
pub const BLEND_INPUT_DIMS: usize = IMAGE_FEATURE_DIMS + GRID_FEATURE_DIMS + VIEW_FEATURE_DIMS;

/// A posed underwater image with its feature pyramid.
#[derive(Debug, Clone)]
pub struct ViewData {
    pub viewpoint: Viewpoint,
    /// `H × W × 3`
    pub image: Array3<f32>,
    pub pyramid: FeaturePyramid,
}

impl ViewData {
    pub fn new(viewpoint: Viewpoint, image: Array3<f32>) -> Result<Self> {
        if image.dim() != (viewpoint.height, viewpoint.width, 3) {
            return Err(Error::shape(format!(
                "image {:?} does not match a {}x{} RGB view",
                image.dim(),
                viewpoint.width,
                viewpoint.height
            )));
        }
        let pyramid = extract_pyramid(image.view())?;
        Ok(Self {
            viewpoint,
            image,
            pyramid,
        })
    }

    pub fn from_loaded(view: &LoadedView) -> Result<Self> {
        if view.image.channels() != 3 {
            return Err(Error::shape(format!("view {} is not RGB", view.name)));
        }
        Self::new(view.viewpoint.clone(), view.image.data().clone())
    }
}

/// Depth and volume features of a target view estimated from a source set.
#[derive(Debug, Clone)]
pub struct TargetGeometry {
    /// Full-resolution fine depth.
    pub depth: DepthMap,
    /// `H × W × 16` samples of the view-averaged fine volume at `(u, v, L̂)`.
    pub grid: Array3<f32>,
}

pub fn target_geometry(sources: &[&ViewData], target: &Viewpoint, cfg: &CascadeConfig) -> Result<TargetGeometry> {
    let views: Vec<SourceView<'_>> = sources
        .iter()
        .map(|s| SourceView {
            viewpoint: &s.viewpoint,
            pyramid: &s.pyramid,
        })
        .collect();
    let out = cascade_depth(&views, target, cfg)?;
    let averaged = view_averaged_volume(&out.fine_volumes)?;
    let (h, w) = (target.height, target.width);
    let pad = out.padding;
    let queries: Vec<(f64, f64, f64)> = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            (
                (x + pad.left) as f64 / 2.0,
                (y + pad.top) as f64 / 2.0,
                out.full.depth[[y, x]],
            )
        })
        .collect();
    let samples = grid_features(averaged.view(), &out.fine_hypotheses, &queries)?;
    let grid = samples
        .values
        .into_shape_with_order((h, w, GRID_FEATURE_DIMS))
        .map_err(|e| Error::shape(e.to_string()))?;
    Ok(TargetGeometry { depth: out.full, grid })
}

/// Everything the rendering graph needs for a set of target pixels.
/// Per-source arrays are view-major: entry `i * pixels + p`.
#[derive(Debug, Clone)]
pub struct Gathered {
    pub views: usize,
    pub pixels: usize,
    pub coords: Vec<(usize, usize)>,
    pub target_dirs: Vec<Vector3<f64>>,
    pub target_depth: Vec<f64>,
    /// Target depth valid and seen by at least one source.
    pub pixel_valid: Vec<bool>,
    pub source_dirs: Vec<Vector3<f64>>,
    /// Camera depth of the target point in each source; 0 when invalid.
    pub source_depth: Vec<f64>,
    pub source_color: Vec<[f32; 3]>,
    pub source_valid: Vec<bool>,
    /// `(views · pixels) × BLEND_INPUT_DIMS`
    pub blend_input: Array2<f32>,
}

/// Collect per-pixel source samples and blend features for `coords`
/// (`(x, y)` target pixels).
pub fn gather(
    sources: &[&ViewData],
    target: &Viewpoint,
    geometry: &TargetGeometry,
    coords: &[(usize, usize)],
) -> Result<Gathered> {
    let n = sources.len();
    if n == 0 {
        return Err(Error::domain("need at least one source view"));
    }
    let p = coords.len();
    let mut g = Gathered {
        views: n,
        pixels: p,
        coords: coords.to_vec(),
        target_dirs: Vec::with_capacity(p),
        target_depth: Vec::with_capacity(p),
        pixel_valid: vec![false; p],
        source_dirs: vec![Vector3::z(); n * p],
        source_depth: vec![0.0; n * p],
        source_color: vec![[0.0; 3]; n * p],
        source_valid: vec![false; n * p],
        blend_input: Array2::zeros((n * p, BLEND_INPUT_DIMS)),
    };
    let mut per_view: Vec<Vec<PixelAlignedFeature>> = vec![Vec::with_capacity(p); n];
    let mut color = [0.0f32; 3];
    let mut feat = vec![0.0f32; LEVEL3_CHANNELS];

    for (pi, &(x, y)) in coords.iter().enumerate() {
        if x >= target.width || y >= target.height {
            return Err(Error::domain(format!("pixel ({x}, {y}) outside the target")));
        }
        let d_t = pixel_direction(target, x as f64, y as f64);
        let z_t = geometry.depth.depth[[y, x]];
        g.target_dirs.push(d_t);
        g.target_depth.push(z_t);
        let depth_ok = geometry.depth.valid[[y, x]] && z_t > 0.0;
        let world = if depth_ok {
            Some(unproject(target, (x as f64, y as f64), z_t)?)
        } else {
            None
        };
        for (vi, src) in sources.iter().enumerate() {
            let k = vi * p + pi;
            let mut f = PixelAlignedFeature::invalid(LEVEL3_CHANNELS);
            if let Some(xw) = world {
                let proj = project(&src.viewpoint, &xw)?;
                let (u, v) = (proj.pixel.x, proj.pixel.y);
                if proj.depth > 0.0 && sample_bilinear(&src.image.view(), u, v, &mut color) {
                    let pad = src.pyramid.padding;
                    let ok = sample_bilinear(
                        &src.pyramid.level3.view(),
                        u + pad.left as f64,
                        v + pad.top as f64,
                        &mut feat,
                    );
                    debug_assert!(ok);
                    let d_s = pixel_direction(&src.viewpoint, u, v);
                    g.source_dirs[k] = d_s;
                    g.source_depth[k] = proj.depth;
                    g.source_color[k] = color;
                    g.source_valid[k] = true;
                    f = PixelAlignedFeature {
                        feature: feat.clone(),
                        ray_delta: ray_delta(&d_s, &d_t),
                        valid: true,
                    };
                }
            }
            g.pixel_valid[pi] |= g.source_valid[k];
            per_view[vi].push(f);
        }
    }

    let pooled = pool_views(&per_view)?;
    for pi in 0..p {
        let (x, y) = coords[pi];
        for vi in 0..n {
            let mut row = g.blend_input.row_mut(vi * p + pi);
            let row = row.as_slice_mut().expect("contiguous");
            row[..IMAGE_FEATURE_DIMS].copy_from_slice(pooled.values.row(pi).as_slice().unwrap());
            for c in 0..GRID_FEATURE_DIMS {
                row[IMAGE_FEATURE_DIMS + c] = geometry.grid[[y, x, c]];
            }
            for (o, v) in row[IMAGE_FEATURE_DIMS + GRID_FEATURE_DIMS..]
                .iter_mut()
                .zip(per_view[vi][pi].augmented())
            {
                *o = v;
            }
        }
    }
    Ok(g)
}

/// All pixels of a `width × height` view in row-major order.
pub fn all_pixels(width: usize, height: usize) -> Vec<(usize, usize)> {
    (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).collect()
}

/// The `k` views whose camera centres lie closest to `target`'s, skipping
/// views that share its centre.
pub fn nearest_views(views: &[ViewData], target: &Viewpoint, k: usize) -> Vec<usize> {
    let c = target.center();
    let mut order: Vec<(f64, usize)> = views
        .iter()
        .enumerate()
        .map(|(i, v)| ((v.viewpoint.center() - c).norm(), i))
        .filter(|(d, _)| *d > 1e-9)
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().take(k).map(|(_, i)| i).collect()
}
