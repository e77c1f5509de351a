use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::geometry::linalg::{self, Vec3};
use crate::geometry::PointCloud;

/// Primitive family available for non-exact substitutes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Box,
    Sphere,
}

/// A primitive substitute part: box full side lengths, or a sphere diameter
/// replicated three times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub kind: PrimitiveKind,
    pub size: Vec3,
    pub part_type: String,
}

/// Exact part geometry in its local frame, centered at the origin.
/// Cylinders run along local z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Box { size: Vec3 },
    Cylinder { radius: f64, height: f64 },
    Sphere { diameter: f64 },
}

impl Shape {
    /// Full side lengths of the local bounding box.
    pub fn extents(&self) -> Vec3 {
        match *self {
            Shape::Box { size } => size,
            Shape::Cylinder { radius, height } => [2.0 * radius, 2.0 * radius, height],
            Shape::Sphere { diameter } => [diameter; 3],
        }
    }

    pub fn scaled(&self, s: f64) -> Shape {
        match *self {
            Shape::Box { size } => Shape::Box { size: linalg::scale(size, s) },
            Shape::Cylinder { radius, height } => Shape::Cylinder { radius: radius * s, height: height * s },
            Shape::Sphere { diameter } => Shape::Sphere { diameter: diameter * s },
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Shape::Box { size: [a, b, c] } => 2.0 * (a * b + b * c + a * c),
            Shape::Cylinder { radius: r, height: h } => std::f64::consts::TAU * r * (r + h),
            Shape::Sphere { diameter: d } => std::f64::consts::PI * d * d,
        }
    }

    /// Whether a local-frame point lies strictly inside, by more than `margin`.
    pub fn contains_strictly(&self, p: Vec3, margin: f64) -> bool {
        match *self {
            Shape::Box { size } => (0..3).all(|k| p[k].abs() < size[k] / 2.0 - margin),
            Shape::Cylinder { radius, height } => {
                let r = radius - margin;
                r > 0.0 && p[0] * p[0] + p[1] * p[1] < r * r && p[2].abs() < height / 2.0 - margin
            }
            Shape::Sphere { diameter } => {
                let r = diameter / 2.0 - margin;
                r > 0.0 && linalg::norm(p) < r
            }
        }
    }

    /// One point uniformly distributed over the surface.
    pub fn sample_surface(&self, rng: &mut impl Rng) -> Vec3 {
        match *self {
            Shape::Box { size } => sample_box(size, rng),
            Shape::Cylinder { radius, height } => {
                let side = height;
                let cap = radius / 2.0;
                // side area 2πrh against two caps of πr² each
                let u = rng.gen::<f64>() * (side + 2.0 * cap);
                let theta = rng.gen::<f64>() * std::f64::consts::TAU;
                let (s, c) = theta.sin_cos();
                if u < side {
                    [radius * c, radius * s, (rng.gen::<f64>() - 0.5) * height]
                } else {
                    let rr = radius * rng.gen::<f64>().sqrt();
                    let z = if u < side + cap { height / 2.0 } else { -height / 2.0 };
                    [rr * c, rr * s, z]
                }
            }
            Shape::Sphere { diameter } => sample_sphere(diameter / 2.0, rng),
        }
    }

    pub fn sample_cloud(&self, n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
        (0..n).map(|_| self.sample_surface(rng)).collect()
    }
}

fn sample_box(size: Vec3, rng: &mut impl Rng) -> Vec3 {
    let [a, b, c] = size;
    // faces normal to x, y, z
    let areas = [b * c, a * c, a * b];
    let u = rng.gen::<f64>() * (areas[0] + areas[1] + areas[2]);
    let axis = if u < areas[0] {
        0
    } else if u < areas[0] + areas[1] {
        1
    } else {
        2
    };
    let mut p = [0.0; 3];
    for (k, v) in p.iter_mut().enumerate() {
        *v = (rng.gen::<f64>() - 0.5) * size[k];
    }
    p[axis] = if rng.gen::<bool>() { size[axis] / 2.0 } else { -size[axis] / 2.0 };
    p
}

fn sample_sphere(r: f64, rng: &mut impl Rng) -> Vec3 {
    loop {
        let g: Vec3 = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = linalg::norm(g);
        if n > 1e-12 {
            return linalg::scale(g, r / n);
        }
    }
}

impl PartSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.size.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(())
        } else {
            Err(DataError::InvalidSpec(format!("part sizes must be positive and finite, got {:?}", self.size)))
        }
    }

    pub fn shape(&self) -> Shape {
        match self.kind {
            PrimitiveKind::Box => Shape::Box { size: self.size },
            PrimitiveKind::Sphere => Shape::Sphere { diameter: self.size[0] },
        }
    }
}

/// `n_p` points uniformly on the surface of the primitive, centered at origin.
pub fn generate_primitive(spec: &PartSpec, n_p: usize, rng: &mut impl Rng) -> Result<PointCloud, DataError> {
    spec.validate()?;
    if n_p < 8 {
        return Err(DataError::InvalidSpec(format!("need at least 8 points per part, got {n_p}")));
    }
    Ok(PointCloud::new(spec.shape().sample_cloud(n_p, rng))?)
}
