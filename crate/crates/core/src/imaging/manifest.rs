use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{read_depth, read_image, ImageBuffer};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose, Viewpoint};

/// One posed image. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub name: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clear: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<PathBuf>,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    /// Excluded from training and used for novel-view evaluation.
    #[serde(default)]
    pub held_out: bool,
}

impl ViewRecord {
    pub fn viewpoint(&self) -> Result<Viewpoint> {
        let k = CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy)?;
        let r = Matrix3::from_row_slice(&self.rotation);
        let pose = CameraPose::new(r, Vector3::from(self.translation))?;
        Viewpoint::new(k, pose, self.width, self.height)
    }

    pub fn from_viewpoint(name: impl Into<String>, image: PathBuf, vp: &Viewpoint) -> Self {
        let r = vp.pose.rotation();
        let mut rotation = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rotation[i * 3 + j] = r[(i, j)];
            }
        }
        let t = vp.pose.translation();
        Self {
            name: name.into(),
            image,
            clear: None,
            depth: None,
            width: vp.width,
            height: vp.height,
            fx: vp.intrinsics.fx,
            fy: vp.intrinsics.fy,
            cx: vp.intrinsics.cx,
            cy: vp.intrinsics.cy,
            rotation,
            translation: [t.x, t.y, t.z],
            held_out: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Scene depth range used to seed the plane sweep.
    pub near: f64,
    pub far: f64,
    pub views: Vec<ViewRecord>,
}

impl DatasetManifest {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            offset: e.span().map(|s| s.start as u64).unwrap_or(0),
            message: e.message().to_string(),
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::Config(format!(
                "manifest depth range must satisfy 0 < near < far, got [{}, {}]",
                self.near, self.far
            )));
        }
        for v in &self.views {
            v.viewpoint()
                .map_err(|e| Error::Config(format!("view {}: {e}", v.name)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    /// Write via a temporary file so readers never observe a partial manifest.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("toml.partial");
        fs::write(&tmp, self.to_toml()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct LoadedView {
    pub name: String,
    pub viewpoint: Viewpoint,
    pub image: ImageBuffer,
    pub clear: Option<ImageBuffer>,
    pub depth: Option<Array2<f32>>,
    pub held_out: bool,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub views: Vec<LoadedView>,
}

impl Dataset {
    pub fn training_indices(&self) -> Vec<usize> {
        (0..self.views.len()).filter(|&i| !self.views[i].held_out).collect()
    }

    pub fn held_out_indices(&self) -> Vec<usize> {
        (0..self.views.len()).filter(|&i| self.views[i].held_out).collect()
    }
}

/// Parse a manifest and load every file it references.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut views = Vec::with_capacity(manifest.views.len());
    for rec in &manifest.views {
        let viewpoint = rec.viewpoint()?;
        let image = read_image(&root.join(&rec.image))?;
        if image.width() != rec.width || image.height() != rec.height {
            return Err(Error::Config(format!(
                "view {}: image is {}x{} but manifest says {}x{}",
                rec.name,
                image.width(),
                image.height(),
                rec.width,
                rec.height
            )));
        }
        let clear = rec
            .clear
            .as_ref()
            .map(|p| read_image(&root.join(p)))
            .transpose()?;
        let depth = rec
            .depth
            .as_ref()
            .map(|p| read_depth(&root.join(p)))
            .transpose()?;
        views.push(LoadedView {
            name: rec.name.clone(),
            viewpoint,
            image,
            clear,
            depth,
            held_out: rec.held_out,
        });
    }
    Ok(Dataset {
        root,
        manifest,
        views,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> ViewRecord {
        let vp = Viewpoint::new(
            CameraIntrinsics::new(90.0, 90.0, 47.5, 31.5).unwrap(),
            CameraPose::look_at(
                Vector3::new(0.3, -0.1, 0.2),
                Vector3::new(0.0, 0.0, 3.0),
                -Vector3::y(),
            )
            .unwrap(),
            96,
            64,
        )
        .unwrap();
        ViewRecord::from_viewpoint("v0", "v0.png".into(), &vp)
    }

    #[test]
    fn toml_roundtrip_preserves_pose_bits() {
        let m = DatasetManifest {
            near: 1.5,
            far: 5.0,
            views: vec![record()],
        };
        let text = m.to_toml();
        assert!(text.contains("[[views]]"));
        let back = DatasetManifest::from_toml(&text, Path::new("m.toml")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_bad_range_and_pose() {
        let mut m = DatasetManifest {
            near: 2.0,
            far: 1.0,
            views: vec![record()],
        };
        assert!(m.validate().is_err());
        m.far = 3.0;
        m.views[0].rotation[0] = 2.0;
        assert!(m.validate().is_err());
    }

    #[test]
    fn parse_error_has_offset() {
        let err = DatasetManifest::from_toml("near = 1.0\nfar = [", Path::new("x.toml")).unwrap_err();
        assert!(matches!(err, Error::Parse { offset, .. } if offset > 0));
    }
}
