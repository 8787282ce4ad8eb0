use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::{Error, Result};

pub const DEFAULT_VIEWS: usize = 12;
pub const DEFAULT_GRID: usize = 16;
pub const VIEW_ELEVATION_DEG: f64 = 30.0;

/// Flattened, L1-normalized occupancy histogram of one orthographic view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewFeature {
    pub view_index: usize,
    pub descriptor: Vec<f64>,
}

impl ViewFeature {
    pub fn dim(&self) -> usize {
        self.descriptor.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.descriptor.is_empty() {
            return Err(Error::param("view descriptor is empty"));
        }
        if self.descriptor.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::param("view descriptor entries must be finite and non-negative"));
        }
        let sum: f64 = self.descriptor.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::param(format!("view descriptor must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// Projects the cloud orthographically onto `n_views` image planes whose
/// cameras sit at 30 degrees elevation and evenly spaced azimuths, and
/// bins each projection into a `grid` x `grid` histogram over [-1, 1]^2.
pub fn project_views(cloud: &PointCloud, n_views: usize, grid: usize) -> Result<Vec<ViewFeature>> {
    if n_views == 0 {
        return Err(Error::param("n_views must be at least 1"));
    }
    if grid == 0 {
        return Err(Error::param("grid must be at least 1"));
    }
    if cloud.is_empty() {
        return Err(Error::param("cannot project an empty cloud"));
    }
    let (se, ce) = VIEW_ELEVATION_DEG.to_radians().sin_cos();
    let inv = 1.0 / cloud.len() as f64;
    let cells = grid as f64;
    let bin = |t: f64| (((t + 1.0) * 0.5 * cells).floor().max(0.0) as usize).min(grid - 1);

    let views = (0..n_views)
        .map(|v| {
            let az = std::f64::consts::TAU * v as f64 / n_views as f64;
            let (sa, ca) = az.sin_cos();
            let right = [-sa, ca, 0.0];
            let up = [-se * ca, -se * sa, ce];
            let mut hist = vec![0.0; grid * grid];
            for p in &cloud.points {
                let u = p.pos[0] * right[0] + p.pos[1] * right[1];
                let w = p.pos[0] * up[0] + p.pos[1] * up[1] + p.pos[2] * up[2];
                // Row 0 is the top of the image.
                let row = grid - 1 - bin(w);
                hist[row * grid + bin(u)] += 1.0;
            }
            for h in &mut hist {
                *h *= inv;
            }
            ViewFeature {
                view_index: v,
                descriptor: hist,
            }
        })
        .collect();
    Ok(views)
}
