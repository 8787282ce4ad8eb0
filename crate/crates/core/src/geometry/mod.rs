//! Point clouds, synthetic shape generation, augmentation and view projection.

mod augment;
mod shapes;
pub mod spcd;
mod views;

use serde::{Deserialize, Serialize};

pub use augment::{augment, AugmentConfig, RotationMode};
pub use shapes::{gen_shape, ColorRule, FamilyKind, ShapeFamily, ShapeSpec};
pub use views::{project_views, ViewFeature, DEFAULT_GRID, DEFAULT_VIEWS, VIEW_ELEVATION_DEG};

/// Mid-gray, used when a shape carries no color.
pub const UNIFORM_COLOR: [f64; 3] = [0.5, 0.5, 0.5];

/// Channels per point: xyz + rgb.
pub const CHANNELS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub pos: [f64; 3],
    pub rgb: [f64; 3],
}

impl Point {
    pub fn new(pos: [f64; 3], rgb: [f64; 3]) -> Self {
        Self { pos, rgb }
    }

    pub fn norm(&self) -> f64 {
        norm3(&self.pos)
    }

    pub fn channels(&self) -> [f64; CHANNELS] {
        let [x, y, z] = self.pos;
        let [r, g, b] = self.rgb;
        [x, y, z, r, g, b]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub shape_id: String,
    pub class_id: String,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, shape_id: impl Into<String>, class_id: impl Into<String>) -> Self {
        Self {
            points,
            shape_id: shape_id.into(),
            class_id: class_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for (acc, v) in c.iter_mut().zip(p.pos) {
                *acc += v;
            }
        }
        let n = self.points.len().max(1) as f64;
        c.map(|v| v / n)
    }

    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(Point::norm).fold(0.0, f64::max)
    }

    /// Checks the structural invariants: non-empty, finite coordinates,
    /// colors in [0, 1].
    pub fn validate(&self) -> crate::Result<()> {
        if self.points.is_empty() {
            return Err(crate::Error::param("point cloud has no points"));
        }
        for (i, p) in self.points.iter().enumerate() {
            if p.pos.iter().any(|v| !v.is_finite()) {
                return Err(crate::Error::param(format!("point {i} has a non-finite coordinate")));
            }
            if p.rgb.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(crate::Error::param(format!("point {i} has a color outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Rounds every channel through `f32`, matching what the SPCD format stores.
    pub fn round_to_f32(&self) -> PointCloud {
        let r = |v: f64| f64::from(v as f32);
        let points = self
            .points
            .iter()
            .map(|p| Point::new(p.pos.map(r), p.rgb.map(r)))
            .collect();
        PointCloud::new(points, self.shape_id.clone(), self.class_id.clone())
    }

    /// Rotation about the vertical (+z) axis.
    pub fn rotated_yaw(&self, angle: f64) -> PointCloud {
        let rot = yaw_matrix(angle);
        self.rotated(&rot)
    }

    pub(crate) fn rotated(&self, rot: &[[f64; 3]; 3]) -> PointCloud {
        let points = self
            .points
            .iter()
            .map(|p| Point::new(mat_vec(rot, &p.pos), p.rgb))
            .collect();
        PointCloud::new(points, self.shape_id.clone(), self.class_id.clone())
    }
}

/// Centers the cloud at the origin and scales it so the farthest point has
/// norm 1. An all-coincident cloud collapses to the origin.
pub fn normalize(cloud: &PointCloud) -> PointCloud {
    let c = cloud.centroid();
    let mut points: Vec<Point> = cloud
        .points
        .iter()
        .map(|p| Point::new([p.pos[0] - c[0], p.pos[1] - c[1], p.pos[2] - c[2]], p.rgb))
        .collect();
    let max = points.iter().map(Point::norm).fold(0.0, f64::max);
    if max >= 1e-9 {
        let s = 1.0 / max;
        for p in &mut points {
            p.pos = p.pos.map(|v| v * s);
        }
        // Rounding can leave the farthest point a few ulps outside the unit ball.
        loop {
            let m = points.iter().map(Point::norm).fold(0.0, f64::max);
            if m <= 1.0 {
                break;
            }
            let shrink = (1.0 - f64::EPSILON) / m;
            for p in &mut points {
                p.pos = p.pos.map(|v| v * shrink);
            }
        }
    } else {
        for p in &mut points {
            p.pos = [0.0; 3];
        }
    }
    PointCloud::new(points, cloud.shape_id.clone(), cloud.class_id.clone())
}

pub(crate) fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub(crate) fn mat_vec(m: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub(crate) fn yaw_matrix(angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}
