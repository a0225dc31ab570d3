//! Depth images, pinhole back-projection, capture preprocessing and
//! training-time augmentation.

use rand::Rng;

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// Crop applied by [`preprocess_capture`], in pixels.
pub const CROP_WIDTH: usize = 560;
pub const CROP_HEIGHT: usize = 400;
/// Pixel stride applied after cropping (70 × 50 = 3500 samples).
pub const DOWNSAMPLE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Config(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }
}

/// Row-major depth map in meters; 0 marks an invalid pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f32>,
    pub intrinsics: CameraIntrinsics,
    pub label: Option<usize>,
}

impl DepthImage {
    pub fn new(
        width: usize,
        height: usize,
        depth: Vec<f32>,
        intrinsics: CameraIntrinsics,
    ) -> Result<Self> {
        if depth.len() != width * height {
            return Err(Error::Shape {
                op: "depth image",
                left: vec![height, width],
                right: vec![depth.len()],
            });
        }
        if let Some(index) = depth.iter().position(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::Data {
                index,
                reason: format!("depth {} is not a finite non-negative value", depth[index]),
            });
        }
        intrinsics.validate()?;
        Ok(Self {
            width,
            height,
            depth,
            intrinsics,
            label: None,
        })
    }

    pub fn at(&self, u: usize, v: usize) -> f32 {
        self.depth[v * self.width + u]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub label: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, label: Option<usize>) -> Self {
        Self { points, label }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.points.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }
}

/// Back-project every valid pixel: `x = (u - cx)·z / fx`, `y = (v - cy)·z / fy`.
/// Points come out in row-major scan order.
pub fn project_depth_map(img: &DepthImage) -> Result<PointCloud> {
    let k = img.intrinsics;
    k.validate()?;
    let mut points = Vec::new();
    for v in 0..img.height {
        for u in 0..img.width {
            let z = img.at(u, v) as f64;
            if z > 0.0 {
                points.push([
                    (u as f64 - k.cx) * z / k.fx,
                    (v as f64 - k.cy) * z / k.fy,
                    z,
                ]);
            }
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(PointCloud::new(points, img.label))
}

/// Center crop to `width × height`, shifting the principal point by the crop offset.
pub fn crop_center(img: &DepthImage, width: usize, height: usize) -> Result<DepthImage> {
    if img.width < width || img.height < height {
        return Err(Error::ImageTooSmall {
            width: img.width,
            height: img.height,
            crop_w: width,
            crop_h: height,
        });
    }
    let ox = (img.width - width) / 2;
    let oy = (img.height - height) / 2;
    let mut depth = Vec::with_capacity(width * height);
    for v in oy..oy + height {
        depth.extend_from_slice(&img.depth[v * img.width + ox..v * img.width + ox + width]);
    }
    let k = img.intrinsics;
    Ok(DepthImage {
        width,
        height,
        depth,
        intrinsics: CameraIntrinsics {
            cx: k.cx - ox as f64,
            cy: k.cy - oy as f64,
            ..k
        },
        label: img.label,
    })
}

/// Keep the top-left pixel of every `stride × stride` block. Intrinsics are
/// rescaled so the kept pixels project to the same 3D points.
pub fn subsample(img: &DepthImage, stride: usize) -> DepthImage {
    let width = img.width.div_ceil(stride);
    let height = img.height.div_ceil(stride);
    let mut depth = Vec::with_capacity(width * height);
    for v in (0..img.height).step_by(stride) {
        for u in (0..img.width).step_by(stride) {
            depth.push(img.at(u, v));
        }
    }
    let s = stride as f64;
    let k = img.intrinsics;
    DepthImage {
        width,
        height,
        depth,
        intrinsics: CameraIntrinsics {
            fx: k.fx / s,
            fy: k.fy / s,
            cx: k.cx / s,
            cy: k.cy / s,
        },
        label: img.label,
    }
}

/// Crop to 560×400, keep every 8th pixel on both axes, then back-project.
/// Colour never enters the pipeline.
pub fn preprocess_capture(img: &DepthImage) -> Result<PointCloud> {
    let cropped = crop_center(img, CROP_WIDTH, CROP_HEIGHT)?;
    project_depth_map(&subsample(&cropped, DOWNSAMPLE))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Random rotation about the vertical (camera y) axis, angle in `[0, 2π)`.
    pub rotate: bool,
    /// Probability of mirroring the horizontal (camera x) coordinate.
    pub mirror_prob: f64,
    /// Independent per-point removal probability.
    pub removal_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate: true,
            mirror_prob: 0.5,
            removal_prob: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            rotate: false,
            mirror_prob: 0.0,
            removal_prob: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.rotate && self.mirror_prob == 0.0 && self.removal_prob == 0.0
    }
}

/// Rotate about the vertical axis through the centroid.
pub fn rotate_about_vertical(pc: &PointCloud, angle: f64) -> PointCloud {
    let c = pc.centroid();
    let (s, co) = angle.sin_cos();
    let points = pc
        .points
        .iter()
        .map(|p| {
            let (dx, dz) = (p[0] - c[0], p[2] - c[2]);
            [c[0] + co * dx + s * dz, p[1], c[2] - s * dx + co * dz]
        })
        .collect();
    PointCloud::new(points, pc.label)
}

/// Negate the horizontal coordinate about the centroid.
pub fn mirror_horizontal(pc: &PointCloud) -> PointCloud {
    let cx = pc.centroid()[0];
    let points = pc.points.iter().map(|p| [2.0 * cx - p[0], p[1], p[2]]).collect();
    PointCloud::new(points, pc.label)
}

/// Drop each point with probability `p`. If every point would be dropped the
/// cloud is returned unchanged.
pub fn remove_points<R: Rng + ?Sized>(pc: &PointCloud, p: f64, rng: &mut R) -> PointCloud {
    if p <= 0.0 {
        return pc.clone();
    }
    let kept: Vec<Point3> = pc.points.iter().copied().filter(|_| rng.gen::<f64>() >= p).collect();
    if kept.is_empty() {
        return pc.clone();
    }
    PointCloud::new(kept, pc.label)
}

/// Rotation, then mirror, then point removal.
pub fn augment_cloud<R: Rng + ?Sized>(pc: &PointCloud, rng: &mut R, cfg: &AugmentConfig) -> PointCloud {
    let mut out = pc.clone();
    if cfg.rotate {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        out = rotate_about_vertical(&out, angle);
    }
    if cfg.mirror_prob > 0.0 && rng.gen::<f64>() < cfg.mirror_prob {
        out = mirror_horizontal(&out);
    }
    remove_points(&out, cfg.removal_prob, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(width: usize, height: usize, z: f32, k: CameraIntrinsics) -> DepthImage {
        DepthImage::new(width, height, vec![z; width * height], k).unwrap()
    }

    #[test]
    fn principal_point_lies_on_axis() {
        let k = CameraIntrinsics::new(500.0, 500.0, 2.0, 1.0).unwrap();
        let mut img = image(4, 3, 0.0, k);
        img.depth[1 * 4 + 2] = 1.5;
        let pc = project_depth_map(&img).unwrap();
        assert_eq!(pc.points, vec![[0.0, 0.0, 1.5]]);
    }

    #[test]
    fn direct_projection() {
        let k = CameraIntrinsics::new(500.0, 500.0, 280.0, 200.0).unwrap();
        let mut img = image(560, 400, 0.0, k);
        img.depth[200 * 560 + 530] = 2.0;
        let pc = project_depth_map(&img).unwrap();
        assert_eq!(pc.len(), 1);
        let p = pc.points[0];
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1].abs() < 1e-12 && p[2] == 2.0);
    }

    #[test]
    fn all_invalid_is_error() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        assert!(matches!(project_depth_map(&image(3, 3, 0.0, k)), Err(Error::EmptyCloud)));
    }

    #[test]
    fn reprojection_recovers_pixels() {
        let k = CameraIntrinsics::new(520.0, 515.5, 313.2, 241.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let depth: Vec<f32> = (0..64 * 48)
            .map(|i| if i % 7 == 0 { 0.0 } else { rng.gen_range(0.5..5.0) })
            .collect();
        let img = DepthImage::new(64, 48, depth, k).unwrap();
        let pc = project_depth_map(&img).unwrap();
        let valid: Vec<(usize, usize)> = (0..48)
            .flat_map(|v| (0..64).map(move |u| (u, v)))
            .filter(|&(u, v)| img.at(u, v) > 0.0)
            .collect();
        assert_eq!(valid.len(), pc.len());
        for (p, (u, v)) in pc.points.iter().zip(valid) {
            assert!((p[0] * k.fx / p[2] + k.cx - u as f64).abs() < 1e-9);
            assert!((p[1] * k.fy / p[2] + k.cy - v as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn preprocess_counts_and_crop_offset() {
        let k = CameraIntrinsics::new(525.0, 525.0, 319.5, 239.5).unwrap();
        let img = image(640, 480, 1.0, k);
        let cropped = crop_center(&img, CROP_WIDTH, CROP_HEIGHT).unwrap();
        assert_eq!(cropped.intrinsics.cx, 319.5 - 40.0);
        assert_eq!(cropped.intrinsics.cy, 239.5 - 40.0);
        assert_eq!(preprocess_capture(&img).unwrap().len(), 3500);

        let mut holes = img.clone();
        holes.depth[40 * 640 + 40] = 0.0; // first kept pixel
        assert_eq!(preprocess_capture(&holes).unwrap().len(), 3499);

        let exact = image(560, 400, 1.0, k);
        assert_eq!(preprocess_capture(&exact).unwrap().len(), 3500);
    }

    #[test]
    fn preprocess_matches_full_resolution_projection() {
        let k = CameraIntrinsics::new(525.0, 520.0, 319.5, 239.5).unwrap();
        let depth: Vec<f32> = (0..640 * 480).map(|i| 1.0 + (i % 13) as f32 * 0.1).collect();
        let img = DepthImage::new(640, 480, depth, k).unwrap();
        let pc = preprocess_capture(&img).unwrap();
        // Point (a, b) of the subsampled grid comes from pixel (40 + 8a, 40 + 8b).
        let (a, b) = (17, 9);
        let (u, v) = (40 + 8 * a, 40 + 8 * b);
        let z = img.at(u, v) as f64;
        let p = pc.points[b * 70 + a];
        assert!((p[0] - (u as f64 - k.cx) * z / k.fx).abs() < 1e-12);
        assert!((p[1] - (v as f64 - k.cy) * z / k.fy).abs() < 1e-12);
    }

    #[test]
    fn too_small_for_crop() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        assert!(matches!(
            preprocess_capture(&image(320, 240, 1.0, k)),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    fn centered(points: Vec<Point3>) -> PointCloud {
        PointCloud::new(points, None)
    }

    #[test]
    fn half_turn_and_mirror() {
        let pc = centered(vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
        let r = rotate_about_vertical(&pc, std::f64::consts::PI);
        assert!((r.points[0][0] + 1.0).abs() < 1e-12 && r.points[0][2].abs() < 1e-12);

        let pc = centered(vec![[1.0, 2.0, 3.0], [-1.0, -2.0, -3.0]]);
        assert_eq!(mirror_horizontal(&pc).points[0], [-1.0, 2.0, 3.0]);
    }

    #[test]
    fn removal_rate() {
        let pc = centered(vec![[0.0; 3]; 100_000]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let kept = remove_points(&pc, 0.2, &mut rng).len() as f64 / 1e5;
        assert!((0.79..=0.81).contains(&kept), "{kept}");
    }

    #[test]
    fn removal_never_empties() {
        let pc = centered(vec![[0.0; 3]; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert!(!remove_points(&pc, 0.99, &mut rng).is_empty());
        }
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let pc = centered(vec![[0.3, 1.0, 2.0], [4.0, -1.0, 0.5]]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(augment_cloud(&pc, &mut rng, &AugmentConfig::disabled()), pc);
        let turned = rotate_about_vertical(&pc, 0.0);
        for (a, b) in turned.points.iter().zip(&pc.points) {
            assert!((0..3).all(|k| (a[k] - b[k]).abs() < 1e-12));
        }
    }
}
