use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{mat_vec, yaw_matrix, Point, PointCloud};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    None,
    YawOnly,
    FullSo3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub dropout_rate: f64,
    pub scale_range: [f64; 2],
    pub shift_max: f64,
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
    pub rotation: RotationMode,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            dropout_rate: 0.1,
            scale_range: [0.9, 1.1],
            shift_max: 0.05,
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
            rotation: RotationMode::YawOnly,
        }
    }
}

impl AugmentConfig {
    /// Leaves every cloud untouched.
    pub fn identity() -> Self {
        Self {
            dropout_rate: 0.0,
            scale_range: [1.0, 1.0],
            shift_max: 0.0,
            jitter_sigma: 0.0,
            jitter_clip: 0.0,
            rotation: RotationMode::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::param(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate)));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::param(format!("scale_range must satisfy 0 < lo <= hi, got [{lo}, {hi}]")));
        }
        for (name, v) in [
            ("shift_max", self.shift_max),
            ("jitter_sigma", self.jitter_sigma),
            ("jitter_clip", self.jitter_clip),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Applies dropout, scaling, shift, jitter and rotation, in that order.
/// Stages whose configuration is the identity consume no randomness and
/// leave coordinates bit-for-bit unchanged.
pub fn augment(cloud: &PointCloud, cfg: &AugmentConfig, seed: u64) -> Result<PointCloud> {
    cfg.validate()?;
    let mut rng = crate::seed::rng(seed);

    let mut points: Vec<Point> = if cfg.dropout_rate > 0.0 {
        let kept: Vec<Point> = cloud
            .points
            .iter()
            .filter(|_| rng.random::<f64>() >= cfg.dropout_rate)
            .copied()
            .collect();
        if kept.is_empty() && !cloud.points.is_empty() {
            vec![cloud.points[rng.random_range(0..cloud.points.len())]]
        } else {
            kept
        }
    } else {
        cloud.points.clone()
    };

    let [lo, hi] = cfg.scale_range;
    if lo != 1.0 || hi != 1.0 {
        let s = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        for p in &mut points {
            p.pos = p.pos.map(|v| v * s);
        }
    }

    if cfg.shift_max > 0.0 {
        let m = cfg.shift_max;
        let offset: [f64; 3] = std::array::from_fn(|_| rng.random_range(-m..=m));
        for p in &mut points {
            for k in 0..3 {
                p.pos[k] += offset[k];
            }
        }
    }

    if cfg.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.jitter_sigma).map_err(|e| Error::param(e.to_string()))?;
        let clip = cfg.jitter_clip;
        for p in &mut points {
            for k in 0..3 {
                p.pos[k] += normal.sample(&mut rng).clamp(-clip, clip);
            }
        }
    }

    let rot = match cfg.rotation {
        RotationMode::None => None,
        RotationMode::YawOnly => Some(yaw_matrix(rng.random_range(0.0..TAU))),
        RotationMode::FullSo3 => Some(random_rotation(&mut rng)),
    };
    if let Some(rot) = rot {
        for p in &mut points {
            p.pos = mat_vec(&rot, &p.pos);
        }
    }

    Ok(PointCloud::new(points, cloud.shape_id.clone(), cloud.class_id.clone()))
}

/// Uniform rotation from a uniform unit quaternion (Shoemake).
fn random_rotation<R: Rng>(rng: &mut R) -> [[f64; 3]; 3] {
    let u1: f64 = rng.random();
    let u2 = rng.random_range(0.0..TAU);
    let u3 = rng.random_range(0.0..TAU);
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let (w, x, y, z) = (a * u2.sin(), a * u2.cos(), b * u3.sin(), b * u3.cos());
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}
