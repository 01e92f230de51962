use std::fmt::Write as _;

use super::DepthSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::invalid(format!("bad intrinsics fx={fx} fy={fy}")));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy })
    }

    /// Roughly 60 degrees horizontal field of view, centered.
    pub fn for_image(height: usize, width: usize) -> Self {
        let f = width as f64 * 0.866;
        CameraIntrinsics {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub colors: Vec<[u8; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// ASCII PLY with `x y z red green blue` vertices.
    pub fn to_ply(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
            self.len()
        );
        for (p, c) in self.points.iter().zip(&self.colors) {
            let _ = writeln!(s, "{} {} {} {} {} {}", p[0] as f32, p[1] as f32, p[2] as f32, c[0], c[1], c[2]);
        }
        s
    }
}

/// Unprojects every valid pixel of `depth` (`[1, H, W]`, zero = invalid)
/// with colors from `rgb` (`[3, H, W]` in `[0, 1]`).
pub fn depth_to_pointcloud(depth: &Tensor<f32>, rgb: &Tensor<f32>, k: &CameraIntrinsics) -> Result<PointCloud> {
    let sample = DepthSample::new("cloud", rgb.clone(), depth.clone())?;
    let (h, w) = (sample.height(), sample.width());
    let hw = h * w;
    let mut cloud = PointCloud {
        points: Vec::new(),
        colors: Vec::new(),
    };
    for v in 0..h {
        for u in 0..w {
            let p = v * w + u;
            if !sample.mask()[p] {
                continue;
            }
            let d = depth.data()[p] as f64;
            cloud.points.push([(u as f64 - k.cx) * d / k.fx, (v as f64 - k.cy) * d / k.fy, d]);
            let byte = |c: usize| (rgb.data()[c * hw + p] as f64 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8;
            cloud.colors.push([byte(0), byte(1), byte(2)]);
        }
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unprojection() {
        let k = CameraIntrinsics::new(2.0, 2.0, 1.0, 1.0).unwrap();
        let depth = Tensor::new([1, 2, 4], vec![0.0, 2.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let cloud = depth_to_pointcloud(&depth, &Tensor::full([3, 2, 4], 1.0), &k).unwrap();
        assert_eq!(cloud.len(), 2);
        // pixel (u=1, v=0) sits half a focal length above the axis at depth 2
        assert_eq!(cloud.points[0], [0.0, -1.0, 2.0]);
        // u = cx + fx = 3, depth 1
        assert_eq!(cloud.points[1][0], 1.0);
        assert_eq!(cloud.colors[0], [255, 255, 255]);
    }

    #[test]
    fn principal_point() {
        let k = CameraIntrinsics::new(10.0, 10.0, 1.0, 1.0).unwrap();
        let depth = Tensor::full([1, 3, 3], 2.0);
        let cloud = depth_to_pointcloud(&depth, &Tensor::zeros([3, 3, 3]), &k).unwrap();
        assert_eq!(cloud.len(), 9);
        assert_eq!(cloud.points[4], [0.0, 0.0, 2.0]);
    }

    #[test]
    fn ply_header() {
        let cloud = PointCloud {
            points: vec![[0.0, 0.5, 2.0]],
            colors: vec![[1, 2, 3]],
        };
        let text = cloud.to_ply();
        assert!(text.contains("element vertex 1\n"));
        assert!(text.ends_with("end_header\n0 0.5 2 1 2 3\n"));
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
    }
}
