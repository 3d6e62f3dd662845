//! Point clouds and camera views — the raw inputs of the pipeline.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::math;

pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<Vec3>,
    colors: Option<Vec<Vec3>>,
}

impl PointCloud {
    pub fn new(positions: Vec<Vec3>, colors: Option<Vec<Vec3>>) -> Result<Self> {
        if positions.is_empty() {
            return Err(invalid("point cloud must contain at least one point"));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("point positions must be finite"));
        }
        if let Some(colors) = &colors {
            if colors.len() != positions.len() {
                return Err(invalid(format!(
                    "color count {} does not match point count {}",
                    colors.len(),
                    positions.len()
                )));
            }
            if colors.iter().flatten().any(|&c| !(0.0..=1.0).contains(&c)) {
                return Err(invalid("color components must lie in [0, 1]"));
            }
        }
        Ok(PointCloud { positions, colors })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees at least one point
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn colors(&self) -> Option<&[Vec3]> {
        self.colors.as_deref()
    }

    /// Componentwise (min, max) over all positions.
    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let mut min = self.positions[0];
        let mut max = self.positions[0];
        for p in &self.positions {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        (min, max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// One camera with a world-to-camera rigid pose and an H×W×C sample buffer
/// (C = 3 for RGB, C = d_f for lifted feature maps). An optional H×W depth
/// buffer enables occlusion testing.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub intrinsics: Intrinsics,
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    image: Vec<f64>,
    depth: Option<Vec<f64>>,
}

pub const ROTATION_TOLERANCE: f64 = 1e-6;

impl CameraView {
    pub fn new(
        intrinsics: Intrinsics,
        rotation: [[f64; 3]; 3],
        translation: Vec3,
        width: usize,
        height: usize,
        channels: usize,
        image: Vec<f64>,
    ) -> Result<Self> {
        if intrinsics.fx <= 0.0 || intrinsics.fy <= 0.0 {
            return Err(invalid("focal lengths must be positive"));
        }
        if width == 0 || height == 0 {
            return Err(invalid("image dimensions must be >= 1"));
        }
        if channels == 0 {
            return Err(invalid("channel count must be >= 1"));
        }
        if image.len() != width * height * channels {
            return Err(invalid(format!(
                "image buffer length {} does not match {height}x{width}x{channels}",
                image.len()
            )));
        }
        check_orthonormal(&rotation)?;
        Ok(CameraView {
            intrinsics,
            rotation,
            translation,
            width,
            height,
            channels,
            image,
            depth: None,
        })
    }

    /// Builds from a row-major 4×4 world-to-camera matrix.
    pub fn from_matrix(
        intrinsics: Intrinsics,
        matrix: [[f64; 4]; 4],
        width: usize,
        height: usize,
        channels: usize,
        image: Vec<f64>,
    ) -> Result<Self> {
        if matrix[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(invalid("last row of the extrinsic matrix must be [0,0,0,1]"));
        }
        let rotation = [
            [matrix[0][0], matrix[0][1], matrix[0][2]],
            [matrix[1][0], matrix[1][1], matrix[1][2]],
            [matrix[2][0], matrix[2][1], matrix[2][2]],
        ];
        let translation = [matrix[0][3], matrix[1][3], matrix[2][3]];
        CameraView::new(intrinsics, rotation, translation, width, height, channels, image)
    }

    pub fn with_depth(mut self, depth: Vec<f64>) -> Result<Self> {
        if depth.len() != self.width * self.height {
            return Err(invalid("depth buffer length does not match image dimensions"));
        }
        self.depth = Some(depth);
        Ok(self)
    }

    pub fn has_depth(&self) -> bool {
        self.depth.is_some()
    }

    pub fn image(&self) -> &[f64] {
        &self.image
    }

    /// Pinhole projection: p = R·x + t; requires p_z > 0.
    /// Returns (u, v, depth).
    pub fn project(&self, x: Vec3) -> Option<(f64, f64, f64)> {
        let r = &self.rotation;
        let t = &self.translation;
        let px = r[0][0] * x[0] + r[0][1] * x[1] + r[0][2] * x[2] + t[0];
        let py = r[1][0] * x[0] + r[1][1] * x[1] + r[1][2] * x[2] + t[1];
        let pz = r[2][0] * x[0] + r[2][1] * x[1] + r[2][2] * x[2] + t[2];
        if pz <= 0.0 {
            return None;
        }
        let u = self.intrinsics.fx * px / pz + self.intrinsics.cx;
        let v = self.intrinsics.fy * py / pz + self.intrinsics.cy;
        Some((u, v, pz))
    }

    /// Nearest-pixel sample at continuous coordinates; None when the rounded
    /// pixel falls outside the image.
    pub fn sample_nearest(&self, u: f64, v: f64) -> Option<&[f64]> {
        let col = math::round(u);
        let row = math::round(v);
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
            return None;
        }
        let (col, row) = (col as usize, row as usize);
        let start = (row * self.width + col) * self.channels;
        Some(&self.image[start..start + self.channels])
    }

    pub fn depth_at(&self, u: f64, v: f64) -> Option<f64> {
        let depth = self.depth.as_ref()?;
        let col = math::round(u);
        let row = math::round(v);
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
            return None;
        }
        Some(depth[row as usize * self.width + col as usize])
    }
}

fn check_orthonormal(r: &[[f64; 3]; 3]) -> Result<()> {
    // RᵀR must equal I within tolerance.
    for i in 0..3 {
        for j in 0..3 {
            let mut dot = 0.0;
            for k in 0..3 {
                dot += r[k][i] * r[k][j];
            }
            let expected = if i == j { 1.0 } else { 0.0 };
            if math::abs(dot - expected) > ROTATION_TOLERANCE {
                return Err(invalid("non-orthonormal rotation"));
            }
        }
    }
    Ok(())
}
