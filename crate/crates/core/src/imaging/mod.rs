//! Image and depth I/O, dataset manifests and quality metrics.

mod manifest;
mod metrics;
mod pfm;
mod png_io;

pub use manifest::{load_dataset, Dataset, DatasetManifest, LoadedView, ViewRecord};
pub use metrics::{
    central_crop_eval_region, central_crop_window, gaussian_window, psnr, psnr_arrays, ssim,
    SsimConstants, SSIM_WINDOW_SIGMA, SSIM_WINDOW_SIZE,
};
pub use pfm::{read_depth, write_depth};
pub use png_io::{linear_to_srgb, read_image, srgb_to_linear, write_image, PngEncoding};

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

/// Linear-light image, `height × width × channels`, channels 1 or 3.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    data: Array3<f32>,
}

impl ImageBuffer {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::shape("image dimensions must be at least 1"));
        }
        if c != 1 && c != 3 {
            return Err(Error::shape(format!("image must have 1 or 3 channels, got {c}")));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image contains {bad}")));
        }
        Ok(Self { data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(Array3::from_elem((height, width, channels), value))
    }

    pub fn from_gray(map: ArrayView2<f32>) -> Result<Self> {
        let (h, w) = map.dim();
        Self::new(map.to_owned().into_shape_with_order((h, w, 1)).expect("contiguous"))
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn view(&self) -> ArrayView3<'_, f32> {
        self.data.view()
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<f32> {
        self.data
    }

    /// First channel as a 2-D map.
    pub fn channel(&self, c: usize) -> Array2<f32> {
        self.data.index_axis(ndarray::Axis(2), c).to_owned()
    }
}
