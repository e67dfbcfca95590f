//! Ground-truth scenes and the exact forward renderer used to verify the
//! pipeline.
//!
//! A scene is a set of world-frame surfaces facing the cameras along +z, a
//! procedural texture evaluated on world `(x, y)`, a water medium and a rig
//! of posed cameras. Rendering casts one ray through each pixel centre and
//! evaluates the imaging equation in double precision.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose, Viewpoint};
use crate::imaging::{
    read_image, write_depth, write_image, DatasetManifest, ImageBuffer, PngEncoding, ViewRecord,
};
use crate::medium::PixelMedium;
use crate::rng::{SeedTree, Stream};

/// A planar patch `z = z + slope_y · y` over a world `(x, y)` rectangle;
/// missing bounds extend it to infinity along that axis. Zero slope gives a
/// fronto-parallel plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneRegion {
    pub z: f64,
    #[serde(default)]
    pub slope_y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_range: Option<[f64; 2]>,
    /// Multiplies the texture colour.
    #[serde(default = "unit_tint")]
    pub tint: [f64; 3],
}

fn unit_tint() -> [f64; 3] {
    [1.0; 3]
}

impl PlaneRegion {
    fn contains(&self, x: f64, y: f64) -> bool {
        let inside = |r: &Option<[f64; 2]>, v: f64| r.is_none_or(|[a, b]| v >= a && v <= b);
        inside(&self.x_range, x) && inside(&self.y_range, y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneGeometry {
    /// Piecewise planar patches; the nearest hit wins.
    Planes { planes: Vec<PlaneRegion> },
    /// Surface `z = base + amplitude · sin(frequency · x) · cos(frequency · y)`.
    HeightField { base: f64, amplitude: f64, frequency: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    /// Smoothed checkerboard of two colours modulated by multi-octave value
    /// noise.
    CheckerNoise {
        cell: f64,
        color_a: [f64; 3],
        color_b: [f64; 3],
        noise_scale: f64,
        noise_amplitude: f64,
    },
    /// An image stretched over the world rectangle `extent = [x0, y0, x1, y1]`
    /// and clamped outside it.
    Image { path: PathBuf, extent: [f64; 4] },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MediumVariation {
    Constant,
    /// Both scattering coefficients scale by `1 + slope · (d · axis)` for the
    /// unit viewing ray `d`, floored at zero.
    DirectionLinear { axis: [f64; 3], slope: f64 },
}

/// Ground-truth water medium.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MediumSpec {
    pub sigma_atten: [f64; 3],
    pub sigma_bs: [f64; 3],
    pub c_bs: [f64; 3],
    pub variation: MediumVariation,
}

impl Default for MediumSpec {
    fn default() -> Self {
        Self {
            sigma_atten: [0.4, 0.25, 0.15],
            sigma_bs: [0.15, 0.25, 0.35],
            c_bs: [0.10, 0.30, 0.45],
            variation: MediumVariation::Constant,
        }
    }
}

impl MediumSpec {
    pub fn clear_water() -> Self {
        Self {
            sigma_atten: [0.0; 3],
            sigma_bs: [0.0; 3],
            c_bs: [0.0; 3],
            variation: MediumVariation::Constant,
        }
    }

    /// Coefficients seen along the unit world ray `dir`.
    pub fn at(&self, dir: &Vector3<f64>) -> PixelMedium {
        let k = match self.variation {
            MediumVariation::Constant => 1.0,
            MediumVariation::DirectionLinear { axis, slope } => {
                (1.0 + slope * dir.dot(&Vector3::from(axis))).max(0.0)
            }
        };
        PixelMedium {
            sigma_atten: self.sigma_atten.map(|v| v * k),
            sigma_bs: self.sigma_bs.map(|v| v * k),
            c_bs: self.c_bs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.sigma_atten.iter().chain(&self.sigma_bs);
        if all.clone().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("medium.sigma_atten and medium.sigma_bs must be finite and >= 0".into()));
        }
        if self.c_bs.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("medium.c_bs must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Cameras on a forward-facing arc: camera `i` sits at
/// `(x_i, arc_height · sin(π i / (n−1)), standoff_i)`, with `x_i` evenly
/// spread over `[-half_width, half_width]`, looking at `look_at`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub count: usize,
    pub half_width: f64,
    pub arc_height: f64,
    /// World z of each camera centre; cycled if shorter than `count`.
    pub standoffs: Vec<f64>,
    pub look_at: [f64; 3],
    /// Focal length of a camera at the mean distance from `look_at`.
    pub focal: f64,
    /// Scale each camera's focal length with its distance to `look_at`, so
    /// all cameras frame the same region of the look-at plane.
    #[serde(default)]
    pub constant_framing: bool,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            count: 8,
            half_width: 0.75,
            arc_height: 0.15,
            standoffs: vec![0.0, -0.9, -0.3, -1.0, -0.5, -0.1, -0.8, -0.4],
            look_at: [0.0, 0.0, 4.0],
            focal: 80.0,
            constant_framing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub geometry: SceneGeometry,
    pub texture: Texture,
    pub medium: MediumSpec,
    pub cameras: CameraRig,
    /// Indices of views excluded from training.
    pub held_out: Vec<usize>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            width: 96,
            height: 64,
            geometry: SceneGeometry::Planes { planes: terrace(2.0, 4.0, [-0.4, 0.6]) },
            texture: Texture::CheckerNoise {
                cell: 0.8,
                color_a: [0.85, 0.75, 0.55],
                color_b: [0.25, 0.45, 0.35],
                noise_scale: 3.0,
                noise_amplitude: 0.5,
            },
            medium: MediumSpec::default(),
            cameras: CameraRig::default(),
            held_out: vec![4],
        }
    }
}

/// Far plane above `ramp[0]`, near plane below `ramp[1]` (world `y` grows
/// downwards in the default rig), joined by a sloped strip.
pub fn terrace(near_z: f64, far_z: f64, ramp: [f64; 2]) -> Vec<PlaneRegion> {
    let slope = (near_z - far_z) / (ramp[1] - ramp[0]);
    vec![
        PlaneRegion {
            z: far_z,
            slope_y: 0.0,
            x_range: None,
            y_range: Some([f64::NEG_INFINITY, ramp[0]]),
            tint: [0.85, 1.0, 1.0],
        },
        PlaneRegion {
            z: far_z - slope * ramp[0],
            slope_y: slope,
            x_range: None,
            y_range: Some(ramp),
            tint: [1.0; 3],
        },
        PlaneRegion {
            z: near_z,
            slope_y: 0.0,
            x_range: None,
            y_range: Some([ramp[1], f64::INFINITY]),
            tint: [1.0, 0.9, 0.8],
        },
    ]
}

impl SceneSpec {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            offset: e.span().map(|s| s.start as u64).unwrap_or(0),
            message: e.message().to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::Config(format!(
                "width and height must be at least 16, got {}x{}",
                self.width, self.height
            )));
        }
        self.medium.validate()?;
        let rig = &self.cameras;
        if rig.count < 2 {
            return Err(Error::Config("cameras.count must be at least 2".into()));
        }
        if rig.standoffs.is_empty() {
            return Err(Error::Config("cameras.standoffs must not be empty".into()));
        }
        if !(rig.focal > 0.0) {
            return Err(Error::Config("cameras.focal must be positive".into()));
        }
        if let Some(&i) = self.held_out.iter().find(|&&i| i >= rig.count) {
            return Err(Error::Config(format!("held_out index {i} exceeds camera count {}", rig.count)));
        }
        match &self.geometry {
            SceneGeometry::Planes { planes } => {
                if planes.is_empty() {
                    return Err(Error::Config("geometry.planes must not be empty".into()));
                }
                if planes.iter().any(|p| !p.z.is_finite() || !p.slope_y.is_finite()) {
                    return Err(Error::Config("geometry.planes z and slope_y must be finite".into()));
                }
                if planes.iter().any(|p| {
                    let (lo, hi) = plane_z_bounds(p);
                    !(lo.is_finite() && hi.is_finite())
                }) {
                    return Err(Error::Config("geometry.planes with slope_y need a finite y_range".into()));
                }
            }
            SceneGeometry::HeightField { base, amplitude, frequency } => {
                if !(base.is_finite() && amplitude.is_finite() && frequency.is_finite()) || *amplitude < 0.0 {
                    return Err(Error::Config("geometry height field parameters must be finite".into()));
                }
            }
        }
        if let Texture::CheckerNoise { cell, noise_scale, .. } = &self.texture {
            if !(*cell > 0.0 && *noise_scale > 0.0) {
                return Err(Error::Config("texture.cell and texture.noise_scale must be positive".into()));
            }
        }
        let views = self.viewpoints()?;
        for (i, vp) in views.iter().enumerate() {
            let z_max = self.surface_z_max();
            if vp.center().z >= self.surface_z_min() || !z_max.is_finite() {
                return Err(Error::Config(format!("camera {i} is not in front of the scene")));
            }
        }
        Ok(())
    }

    fn surface_z_min(&self) -> f64 {
        match &self.geometry {
            SceneGeometry::Planes { planes } => planes.iter().map(|p| plane_z_bounds(p).0).fold(f64::INFINITY, f64::min),
            SceneGeometry::HeightField { base, amplitude, .. } => base - amplitude,
        }
    }

    fn surface_z_max(&self) -> f64 {
        match &self.geometry {
            SceneGeometry::Planes { planes } => planes.iter().map(|p| plane_z_bounds(p).1).fold(f64::NEG_INFINITY, f64::max),
            SceneGeometry::HeightField { base, amplitude, .. } => base + amplitude,
        }
    }

    pub fn viewpoints(&self) -> Result<Vec<Viewpoint>> {
        let rig = &self.cameras;
        let target = Vector3::from(rig.look_at);
        let eyes: Vec<Vector3<f64>> = (0..rig.count)
            .map(|i| {
                let s = i as f64 / (rig.count - 1) as f64;
                Vector3::new(
                    -rig.half_width + 2.0 * rig.half_width * s,
                    rig.arc_height * (std::f64::consts::PI * s).sin(),
                    rig.standoffs[i % rig.standoffs.len()],
                )
            })
            .collect();
        let mean_dist = eyes.iter().map(|e| (target - e).norm()).sum::<f64>() / eyes.len() as f64;
        eyes.iter()
            .map(|eye| {
                let f = if rig.constant_framing {
                    rig.focal * (target - eye).norm() / mean_dist
                } else {
                    rig.focal
                };
                let k = CameraIntrinsics::new(f, f, (self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)?;
                let pose = CameraPose::look_at(*eye, target, -Vector3::y())?;
                Viewpoint::new(k, pose, self.width, self.height)
            })
            .collect()
    }
}

/// Depth range of a patch; a sloped patch must have a bounded `y` range.
fn plane_z_bounds(p: &PlaneRegion) -> (f64, f64) {
    if p.slope_y == 0.0 {
        return (p.z, p.z);
    }
    let [a, b] = p.y_range.unwrap_or([f64::NEG_INFINITY, f64::INFINITY]);
    let (za, zb) = (p.z + p.slope_y * a, p.z + p.slope_y * b);
    (za.min(zb), za.max(zb))
}

/// Texture sampler with its noise lattice drawn from the scene seed.
struct TextureField {
    texture: Texture,
    lattice: Vec<f64>,
    image: Option<ImageBuffer>,
}

const LATTICE: usize = 64;
const OCTAVES: usize = 3;

impl TextureField {
    fn new(spec: &SceneSpec) -> Result<Self> {
        let mut rng = SeedTree::new(spec.seed).stream(Stream::Texture);
        let lattice = (0..LATTICE * LATTICE * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let image = match &spec.texture {
            Texture::Image { path, .. } => Some(read_image(path)?),
            _ => None,
        };
        Ok(Self {
            texture: spec.texture.clone(),
            lattice,
            image,
        })
    }

    /// Smooth value noise in `[-1, 1]` per channel.
    fn noise(&self, x: f64, y: f64, c: usize) -> f64 {
        let (fx, fy) = (x.floor(), y.floor());
        let (tx, ty) = (x - fx, y - fy);
        let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
        let at = |i: f64, j: f64| {
            let i = (i as i64).rem_euclid(LATTICE as i64) as usize;
            let j = (j as i64).rem_euclid(LATTICE as i64) as usize;
            self.lattice[(j * LATTICE + i) * 3 + c]
        };
        let top = at(fx, fy) * (1.0 - sx) + at(fx + 1.0, fy) * sx;
        let bottom = at(fx, fy + 1.0) * (1.0 - sx) + at(fx + 1.0, fy + 1.0) * sx;
        top * (1.0 - sy) + bottom * sy
    }

    fn color(&self, x: f64, y: f64) -> [f64; 3] {
        match &self.texture {
            Texture::CheckerNoise {
                cell,
                color_a,
                color_b,
                noise_scale,
                noise_amplitude,
            } => {
                let s = (std::f64::consts::PI * x / cell).sin() * (std::f64::consts::PI * y / cell).sin();
                let mix = 0.5 + 0.5 * (1.5 * s).tanh() / 1.5f64.tanh();
                let mut out = [0.0; 3];
                for c in 0..3 {
                    let mut n = 0.0;
                    let mut amp = 1.0;
                    let mut freq = *noise_scale;
                    for _ in 0..OCTAVES {
                        n += amp * self.noise(x * freq, y * freq, c);
                        amp *= 0.5;
                        freq *= 2.0;
                    }
                    let base = color_a[c] * mix + color_b[c] * (1.0 - mix);
                    out[c] = base * (1.0 + noise_amplitude * n / 1.75);
                }
                out
            }
            Texture::Image { extent, .. } => {
                let img = self.image.as_ref().expect("image texture loaded");
                let (w, h) = (img.width() as f64, img.height() as f64);
                let u = ((x - extent[0]) / (extent[2] - extent[0]) * (w - 1.0)).clamp(0.0, w - 1.0);
                let v = ((y - extent[1]) / (extent[3] - extent[1]) * (h - 1.0)).clamp(0.0, h - 1.0);
                let (u0, v0) = (u.floor() as usize, v.floor() as usize);
                let (u1, v1) = ((u0 + 1).min(img.width() - 1), (v0 + 1).min(img.height() - 1));
                let (fu, fv) = (u - u0 as f64, v - v0 as f64);
                let d = img.view();
                let ch = img.channels();
                [0, 1, 2].map(|c| {
                    let c = c.min(ch - 1);
                    let g = |yy: usize, xx: usize| d[[yy, xx, c]] as f64;
                    (g(v0, u0) * (1.0 - fu) + g(v0, u1) * fu) * (1.0 - fv) + (g(v1, u0) * (1.0 - fu) + g(v1, u1) * fu) * fv
                })
            }
        }
    }
}

/// Oracle output for one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleView {
    /// `H × W × 3`
    pub underwater: Array3<f64>,
    pub clear: Array3<f64>,
    /// Camera-frame depth; rays that miss use the far fallback.
    pub depth: Array2<f64>,
    pub coverage: Array2<bool>,
}

/// Depth assigned to rays that hit nothing.
const MISS_DEPTH_FACTOR: f64 = 2.0;

struct Hit {
    depth: f64,
    world: Vector3<f64>,
    tint: [f64; 3],
}

fn cast(spec: &SceneSpec, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    // `dir` has unit camera-z component, so the ray parameter is camera depth.
    match &spec.geometry {
        SceneGeometry::Planes { planes } => {
            let mut best: Option<Hit> = None;
            for p in planes {
                // (o + t d).z = z + slope · (o + t d).y
                let denom = dir.z - p.slope_y * dir.y;
                if denom.abs() < 1e-12 {
                    continue;
                }
                let t = (p.z + p.slope_y * origin.y - origin.z) / denom;
                if t <= 0.0 || best.as_ref().is_some_and(|b| b.depth <= t) {
                    continue;
                }
                let x = origin + dir * t;
                if p.contains(x.x, x.y) {
                    best = Some(Hit {
                        depth: t,
                        world: x,
                        tint: p.tint,
                    });
                }
            }
            best
        }
        SceneGeometry::HeightField { base, amplitude, frequency } => {
            let f = |x: &Vector3<f64>| x.z - (base + amplitude * (frequency * x.x).sin() * (frequency * x.y).cos());
            let t_max = ((base + amplitude + 1.0 - origin.z) / dir.z.max(1e-6)).max(1e-3);
            let steps = 512;
            let mut prev_t = 0.0;
            let mut prev_f = f(origin);
            if prev_f >= 0.0 {
                return None;
            }
            for i in 1..=steps {
                let t = t_max * i as f64 / steps as f64;
                let v = f(&(origin + dir * t));
                if v >= 0.0 {
                    let (mut lo, mut hi) = (prev_t, t);
                    for _ in 0..60 {
                        let mid = 0.5 * (lo + hi);
                        if f(&(origin + dir * mid)) < 0.0 {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    let t = 0.5 * (lo + hi);
                    return Some(Hit {
                        depth: t,
                        world: origin + dir * t,
                        tint: [1.0; 3],
                    });
                }
                prev_t = t;
                prev_f = v;
            }
            let _ = prev_f;
            None
        }
    }
}

fn render_with(spec: &SceneSpec, tex: &TextureField, vp: &Viewpoint) -> OracleView {
    let (h, w) = (vp.height, vp.width);
    let mut out = OracleView {
        underwater: Array3::zeros((h, w, 3)),
        clear: Array3::zeros((h, w, 3)),
        depth: Array2::zeros((h, w)),
        coverage: Array2::from_elem((h, w), false),
    };
    let origin = vp.center();
    let rt = vp.pose.rotation().transpose();
    let k = &vp.intrinsics;
    let miss_depth = MISS_DEPTH_FACTOR * (spec.surface_z_max() - origin.z).max(1.0);
    for v in 0..h {
        for u in 0..w {
            let dir = rt * Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
            let unit = dir.normalize();
            let (z, clear) = match cast(spec, &origin, &dir) {
                Some(hit) => {
                    out.coverage[[v, u]] = true;
                    let c = tex.color(hit.world.x, hit.world.y);
                    (hit.depth, [0, 1, 2].map(|i| (c[i] * hit.tint[i]).clamp(0.02, 0.98)))
                }
                None => (miss_depth, [0.0; 3]),
            };
            let m = spec.medium.at(&unit);
            out.depth[[v, u]] = z;
            for c in 0..3 {
                out.clear[[v, u, c]] = clear[c];
                out.underwater[[v, u, c]] =
                    clear[c] * (-m.sigma_atten[c] * z).exp() + m.c_bs[c] * (1.0 - (-m.sigma_bs[c] * z).exp());
            }
        }
    }
    out
}

/// Render one camera of `spec` exactly.
pub fn oracle_render(spec: &SceneSpec, vp: &Viewpoint) -> Result<OracleView> {
    spec.validate()?;
    let tex = TextureField::new(spec)?;
    Ok(render_with(spec, &tex, vp))
}

/// A generated dataset and where it was written.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest_path: PathBuf,
    pub manifest: DatasetManifest,
    pub viewpoints: Vec<Viewpoint>,
    pub views: Vec<OracleView>,
    pub medium: MediumSpec,
}

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MEDIUM_FILE: &str = "medium.toml";
pub const SCENE_FILE: &str = "scene.toml";

fn to_buffer(a: &Array3<f64>) -> Result<ImageBuffer> {
    ImageBuffer::new(a.mapv(|v| v as f32))
}

/// Render every camera and write images, depth maps, the ground-truth
/// medium, the scene spec and (last) the manifest.
pub fn generate_dataset(spec: &SceneSpec, out_dir: &Path) -> Result<SyntheticDataset> {
    spec.validate()?;
    let tex = TextureField::new(spec)?;
    let viewpoints = spec.viewpoints()?;
    let views: Vec<OracleView> = viewpoints.par_iter().map(|vp| render_with(spec, &tex, vp)).collect();

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(views.len());
    let (mut near, mut far) = (f64::INFINITY, 0.0f64);
    for (i, (vp, view)) in viewpoints.iter().zip(&views).enumerate() {
        let name = format!("view_{i:02}");
        let image = PathBuf::from(format!("{name}.png"));
        let clear = PathBuf::from(format!("{name}_clear.png"));
        let depth = PathBuf::from(format!("{name}_depth.pfm"));
        write_image(&out_dir.join(&image), &to_buffer(&view.underwater)?, PngEncoding::Linear16)?;
        write_image(&out_dir.join(&clear), &to_buffer(&view.clear)?, PngEncoding::Linear16)?;
        let stored = Array2::from_shape_fn(view.depth.dim(), |(y, x)| {
            if view.coverage[[y, x]] {
                view.depth[[y, x]] as f32
            } else {
                0.0
            }
        });
        write_depth(&out_dir.join(&depth), &stored)?;
        for (d, c) in view.depth.iter().zip(&view.coverage) {
            if *c {
                near = near.min(*d);
                far = far.max(*d);
            }
        }
        let mut rec = ViewRecord::from_viewpoint(name, image, vp);
        rec.clear = Some(clear);
        rec.depth = Some(depth);
        rec.held_out = spec.held_out.contains(&i);
        records.push(rec);
    }
    if !near.is_finite() {
        return Err(Error::Config("no camera sees any scene geometry".into()));
    }
    let manifest = DatasetManifest {
        near: 0.8 * near,
        far: 1.25 * far,
        views: records,
    };

    let medium_path = out_dir.join(MEDIUM_FILE);
    fs::write(&medium_path, toml::to_string(&spec.medium).expect("medium serialises"))
        .map_err(|e| Error::io(&medium_path, e))?;
    let scene_path = out_dir.join(SCENE_FILE);
    fs::write(&scene_path, spec.to_toml()).map_err(|e| Error::io(&scene_path, e))?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    manifest.save(&manifest_path)?;

    Ok(SyntheticDataset {
        manifest_path,
        manifest,
        viewpoints,
        views,
        medium: spec.medium,
    })
}

/// Read the ground-truth medium record written by [`generate_dataset`].
pub fn load_medium(path: &Path) -> Result<MediumSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: MediumSpec = toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        offset: e.span().map(|s| s.start as u64).unwrap_or(0),
        message: e.message().to_string(),
    })?;
    m.validate()?;
    Ok(m)
}
