use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Point, PointCloud, UNIFORM_COLOR};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    Sphere,
    Box,
    Cylinder,
    Torus,
    Superellipsoid,
}

impl FamilyKind {
    pub const ALL: [FamilyKind; 5] = [
        FamilyKind::Sphere,
        FamilyKind::Box,
        FamilyKind::Cylinder,
        FamilyKind::Torus,
        FamilyKind::Superellipsoid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::Sphere => "sphere",
            FamilyKind::Box => "box",
            FamilyKind::Cylinder => "cylinder",
            FamilyKind::Torus => "torus",
            FamilyKind::Superellipsoid => "superellipsoid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::param(format!("unknown shape family `{s}`")))
    }
}

/// Parametric surface families. All are centered at the origin with +z up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ShapeFamily {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
    /// Closed cylinder (side plus both caps) along z.
    Cylinder { radius: f64, half_height: f64 },
    /// Ring torus around the z axis; requires `minor_radius < major_radius`.
    Torus { major_radius: f64, minor_radius: f64 },
    /// `e1` shapes the vertical profile, `e2` the horizontal one; both in (0, 4].
    Superellipsoid { radii: [f64; 3], e1: f64, e2: f64 },
}

impl ShapeFamily {
    pub fn kind(&self) -> FamilyKind {
        match self {
            ShapeFamily::Sphere { .. } => FamilyKind::Sphere,
            ShapeFamily::Box { .. } => FamilyKind::Box,
            ShapeFamily::Cylinder { .. } => FamilyKind::Cylinder,
            ShapeFamily::Torus { .. } => FamilyKind::Torus,
            ShapeFamily::Superellipsoid { .. } => FamilyKind::Superellipsoid,
        }
    }

    /// Largest |z| of the unstretched surface.
    pub fn half_height(&self) -> f64 {
        match self {
            ShapeFamily::Sphere { radius } => *radius,
            ShapeFamily::Box { half_extents } => half_extents[2],
            ShapeFamily::Cylinder { half_height, .. } => *half_height,
            ShapeFamily::Torus { minor_radius, .. } => *minor_radius,
            ShapeFamily::Superellipsoid { radii, .. } => radii[2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ColorRule {
    Constant { rgb: [f64; 3] },
    /// Linear blend from `low` to `high` along one axis, over the cloud's extent.
    AxisGradient { axis: usize, low: [f64; 3], high: [f64; 3] },
}

impl Default for ColorRule {
    fn default() -> Self {
        ColorRule::Constant { rgb: UNIFORM_COLOR }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    #[serde(flatten)]
    pub family: ShapeFamily,
    /// Per-axis stretch applied after surface sampling.
    pub stretch: [f64; 3],
    /// Horizontal scale varies linearly with height, from `1 - taper` at the
    /// bottom of the shape to `1 + taper` at the top. Must lie in (-1, 1).
    #[serde(default)]
    pub taper: f64,
    pub color: ColorRule,
}

impl ShapeSpec {
    pub fn new(family: ShapeFamily) -> Self {
        Self {
            family,
            stretch: [1.0; 3],
            taper: 0.0,
            color: ColorRule::default(),
        }
    }

    pub fn with_stretch(mut self, stretch: [f64; 3]) -> Self {
        self.stretch = stretch;
        self
    }

    pub fn with_taper(mut self, taper: f64) -> Self {
        self.taper = taper;
        self
    }

    pub fn with_color(mut self, color: ColorRule) -> Self {
        self.color = color;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::param(format!("{name} must be positive and finite, got {v}")))
            }
        };
        match &self.family {
            ShapeFamily::Sphere { radius } => positive("radius", *radius)?,
            ShapeFamily::Box { half_extents } => {
                for &h in half_extents {
                    positive("half extent", h)?;
                }
            }
            ShapeFamily::Cylinder { radius, half_height } => {
                positive("radius", *radius)?;
                positive("half height", *half_height)?;
            }
            ShapeFamily::Torus {
                major_radius,
                minor_radius,
            } => {
                positive("major radius", *major_radius)?;
                positive("minor radius", *minor_radius)?;
                if minor_radius >= major_radius {
                    return Err(Error::param("torus minor radius must be below major radius"));
                }
            }
            ShapeFamily::Superellipsoid { radii, e1, e2 } => {
                for &r in radii {
                    positive("radius", r)?;
                }
                for (name, e) in [("e1", *e1), ("e2", *e2)] {
                    if !(e.is_finite() && e > 0.0 && e <= 4.0) {
                        return Err(Error::param(format!("{name} must lie in (0, 4], got {e}")));
                    }
                }
            }
        }
        for &s in &self.stretch {
            positive("stretch", s)?;
        }
        if !(self.taper.is_finite() && self.taper.abs() < 1.0) {
            return Err(Error::param(format!("taper must lie in (-1, 1), got {}", self.taper)));
        }
        let check_rgb = |rgb: &[f64; 3]| {
            if rgb.iter().all(|c| (0.0..=1.0).contains(c)) {
                Ok(())
            } else {
                Err(Error::param("color channels must lie in [0, 1]"))
            }
        };
        match &self.color {
            ColorRule::Constant { rgb } => check_rgb(rgb)?,
            ColorRule::AxisGradient { axis, low, high } => {
                if *axis > 2 {
                    return Err(Error::param(format!("gradient axis must be 0..=2, got {axis}")));
                }
                check_rgb(low)?;
                check_rgb(high)?;
            }
        }
        Ok(())
    }
}

/// Samples `n_points` points on the surface described by `spec`.
pub fn gen_shape(spec: &ShapeSpec, n_points: usize, seed: u64) -> Result<PointCloud> {
    if n_points == 0 {
        return Err(Error::param("n_points must be at least 1"));
    }
    spec.validate()?;
    let mut rng = crate::seed::rng(seed);
    let mut positions: Vec<[f64; 3]> = (0..n_points)
        .map(|_| sample_surface(&spec.family, &mut rng))
        .collect();
    let half_height = spec.family.half_height();
    for p in &mut positions {
        let widen = 1.0 + spec.taper * (p[2] / half_height).clamp(-1.0, 1.0);
        p[0] *= widen;
        p[1] *= widen;
        for k in 0..3 {
            p[k] *= spec.stretch[k];
        }
    }
    let colors = color_points(&spec.color, &positions);
    let points = positions
        .into_iter()
        .zip(colors)
        .map(|(pos, rgb)| Point::new(pos, rgb))
        .collect();
    Ok(PointCloud::new(points, "", spec.family.kind().name()))
}

fn sample_surface<R: Rng>(family: &ShapeFamily, rng: &mut R) -> [f64; 3] {
    match *family {
        ShapeFamily::Sphere { radius } => {
            let d = unit_direction(rng);
            d.map(|v| v * radius)
        }
        ShapeFamily::Box { half_extents: [hx, hy, hz] } => {
            // Face pairs weighted by area.
            let areas = [hy * hz, hx * hz, hx * hy];
            let total: f64 = areas.iter().sum();
            let pick = rng.random::<f64>() * total;
            let axis = if pick < areas[0] {
                0
            } else if pick < areas[0] + areas[1] {
                1
            } else {
                2
            };
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let h = [hx, hy, hz];
            let mut p = [0.0; 3];
            for k in 0..3 {
                p[k] = if k == axis {
                    sign * h[k]
                } else {
                    rng.random_range(-h[k]..=h[k])
                };
            }
            p
        }
        ShapeFamily::Cylinder { radius, half_height } => {
            let side = TAU * radius * 2.0 * half_height;
            let caps = 2.0 * PI * radius * radius;
            let theta = rng.random_range(0.0..TAU);
            if rng.random::<f64>() * (side + caps) < side {
                let z = rng.random_range(-half_height..=half_height);
                [radius * theta.cos(), radius * theta.sin(), z]
            } else {
                let r = radius * rng.random::<f64>().sqrt();
                let z = if rng.random::<bool>() { half_height } else { -half_height };
                [r * theta.cos(), r * theta.sin(), z]
            }
        }
        ShapeFamily::Torus {
            major_radius: big,
            minor_radius: small,
        } => loop {
            // Area element is proportional to (R + r cos v).
            let u = rng.random_range(0.0..TAU);
            let v = rng.random_range(0.0..TAU);
            let accept = rng.random::<f64>() * (big + small);
            let ring = big + small * v.cos();
            if accept <= ring {
                break [ring * u.cos(), ring * u.sin(), small * v.sin()];
            }
        },
        ShapeFamily::Superellipsoid { radii, e1, e2 } => {
            let eta = rng.random_range(-1.0f64..=1.0).asin().clamp(-FRAC_PI_2, FRAC_PI_2);
            let omega = rng.random_range(-PI..PI);
            let ce = signed_pow(eta.cos(), e1);
            [
                radii[0] * ce * signed_pow(omega.cos(), e2),
                radii[1] * ce * signed_pow(omega.sin(), e2),
                radii[2] * signed_pow(eta.sin(), e1),
            ]
        }
    }
}

fn signed_pow(v: f64, e: f64) -> f64 {
    v.signum() * v.abs().powf(e)
}

fn unit_direction<R: Rng>(rng: &mut R) -> [f64; 3] {
    // Marsaglia's method.
    loop {
        let a = rng.random_range(-1.0f64..1.0);
        let b = rng.random_range(-1.0f64..1.0);
        let s = a * a + b * b;
        if s < 1.0 && s > 0.0 {
            let f = 2.0 * (1.0 - s).sqrt();
            break [a * f, b * f, 1.0 - 2.0 * s];
        }
    }
}

fn color_points(rule: &ColorRule, positions: &[[f64; 3]]) -> Vec<[f64; 3]> {
    match rule {
        ColorRule::Constant { rgb } => vec![*rgb; positions.len()],
        ColorRule::AxisGradient { axis, low, high } => {
            let (lo, hi) = positions
                .iter()
                .map(|p| p[*axis])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            let span = hi - lo;
            positions
                .iter()
                .map(|p| {
                    let t = if span > 0.0 { ((p[*axis] - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
                    [0, 1, 2].map(|k| (low[k] + t * (high[k] - low[k])).clamp(0.0, 1.0))
                })
                .collect()
        }
    }
}
