use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::shapes::Shape;
use super::DataError;
use crate::geometry::linalg::{self, Vec3};
use crate::geometry::{Pose, Rotation};

/// Built-in structure templates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Table4,
    Stool,
    Lamp,
    Shelf,
    Chair,
    Tframe,
}

impl Template {
    pub const ALL: [Template; 6] =
        [Template::Table4, Template::Stool, Template::Lamp, Template::Shelf, Template::Chair, Template::Tframe];

    pub fn name(self) -> &'static str {
        match self {
            Template::Table4 => "table4",
            Template::Stool => "stool",
            Template::Lamp => "lamp",
            Template::Shelf => "shelf",
            Template::Chair => "chair",
            Template::Tframe => "tframe",
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Template {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Template::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| DataError::UnknownTemplate(s.to_string()))
    }
}

/// One part of a template instance, placed in the (unnormalized) world.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacedPart {
    pub shape: Shape,
    pub part_type: &'static str,
    pub pose: Pose,
}

fn at(shape: Shape, part_type: &'static str, t: Vec3) -> PlacedPart {
    PlacedPart { shape, part_type, pose: Pose::new(Rotation::IDENTITY, t) }
}

fn leg(radius: f64, height: f64) -> Shape {
    Shape::Cylinder { radius, height }
}

/// How far legs and joints sink into the part they attach to.
const OVERLAP: f64 = 0.01;

/// Random instance of `template`, before normalization. Z is up.
pub fn instantiate(template: Template, rng: &mut impl Rng) -> Vec<PlacedPart> {
    match template {
        Template::Table4 => {
            let w = rng.gen_range(0.9..1.2);
            let d = w * rng.gen_range(0.5..0.72);
            let t = rng.gen_range(0.04..0.07);
            let r = rng.gen_range(0.025..0.04);
            let h = rng.gen_range(0.55..0.8);
            let inset = rng.gen_range(0.06..0.1);
            let mut parts = vec![at(Shape::Box { size: [w, d, t] }, "top", [0.0, 0.0, h + t / 2.0 - OVERLAP])];
            for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
                let p = [sx * (w / 2.0 - inset), sy * (d / 2.0 - inset), h / 2.0];
                parts.push(at(leg(r, h), "leg", p));
            }
            parts
        }
        Template::Stool => {
            let rt = rng.gen_range(0.22..0.32);
            let t = rng.gen_range(0.04..0.07);
            let r = rng.gen_range(0.02..0.032);
            let h = rng.gen_range(0.45..0.7);
            let ring = rt * rng.gen_range(0.6..0.75);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let mut parts = vec![at(Shape::Cylinder { radius: rt, height: t }, "seat", [0.0, 0.0, h + t / 2.0 - OVERLAP])];
            for k in 0..3 {
                let a = phase + k as f64 * std::f64::consts::TAU / 3.0;
                parts.push(at(leg(r, h), "leg", [ring * a.cos(), ring * a.sin(), h / 2.0]));
            }
            parts
        }
        Template::Lamp => {
            let rb = rng.gen_range(0.15..0.24);
            let tb = rng.gen_range(0.03..0.06);
            let rp = rng.gen_range(0.015..0.03);
            let hp = rng.gen_range(0.6..0.95);
            let ds = rng.gen_range(0.25..0.4);
            let pole_z = tb + hp / 2.0 - OVERLAP;
            let pole_top = tb - OVERLAP + hp;
            vec![
                at(Shape::Cylinder { radius: rb, height: tb }, "base", [0.0, 0.0, tb / 2.0]),
                at(leg(rp, hp), "pole", [0.0, 0.0, pole_z]),
                at(Shape::Sphere { diameter: ds }, "shade", [0.0, 0.0, pole_top + ds / 2.0 - 2.0 * OVERLAP]),
            ]
        }
        Template::Shelf => {
            let boards = rng.gen_range(2..=4usize);
            let inner = rng.gen_range(0.6..0.9);
            let depth = rng.gen_range(0.25..0.38);
            let height = rng.gen_range(0.85..1.1);
            let ts = rng.gen_range(0.03..0.05);
            let tb = rng.gen_range(0.02..0.035);
            let side = Shape::Box { size: [ts, depth, height] };
            let x = inner / 2.0 + ts / 2.0 - OVERLAP;
            let mut parts = vec![at(side, "side", [-x, 0.0, height / 2.0]), at(side, "side", [x, 0.0, height / 2.0])];
            for b in 0..boards {
                let z = tb / 2.0 + (height - tb) * b as f64 / (boards - 1) as f64;
                parts.push(at(Shape::Box { size: [inner, depth * 0.98, tb] }, "board", [0.0, 0.0, z]));
            }
            parts
        }
        Template::Chair => {
            let w = rng.gen_range(0.42..0.55);
            let d = w * rng.gen_range(0.75..0.85);
            let t = rng.gen_range(0.04..0.06);
            let r = rng.gen_range(0.018..0.028);
            let h = rng.gen_range(0.4..0.5);
            let bh = rng.gen_range(0.4..0.6);
            let bt = rng.gen_range(0.03..0.045);
            let tilt = rng.gen_range(0.0..0.2);
            let inset = rng.gen_range(0.03..0.05);
            let seat_z = h + t / 2.0 - OVERLAP;
            let mut parts = vec![at(Shape::Box { size: [w, d, t] }, "seat", [0.0, 0.0, seat_z])];
            // back leans backwards (towards +y) about its bottom edge
            let rot = Rotation::from_axis_angle([1.0, 0.0, 0.0], -tilt);
            let hinge = [0.0, d / 2.0 - bt / 2.0, seat_z + t / 2.0 - OVERLAP];
            let center = linalg::add(hinge, rot.apply([0.0, 0.0, bh / 2.0]));
            parts.push(PlacedPart { shape: Shape::Box { size: [w, bt, bh] }, part_type: "back", pose: Pose::new(rot, center) });
            for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
                let p = [sx * (w / 2.0 - inset), sy * (d / 2.0 - inset), h / 2.0];
                parts.push(at(leg(r, h), "leg", p));
            }
            parts
        }
        Template::Tframe => {
            let len = rng.gen_range(0.8..1.1);
            let bw = rng.gen_range(0.06..0.09);
            let bd = bw * rng.gen_range(1.4..1.8);
            let ph = rng.gen_range(0.5..0.85);
            let pw = rng.gen_range(0.05..0.08);
            let pd = pw * rng.gen_range(1.3..1.7);
            vec![
                at(Shape::Box { size: [len, bw, bd] }, "beam", [0.0, 0.0, ph + bd / 2.0 - OVERLAP]),
                at(Shape::Box { size: [pd, pw, ph] }, "post", [0.0, 0.0, ph / 2.0]),
            ]
        }
    }
}

/// World-space axis-aligned bounds of a placed part.
pub fn placed_bounds(p: &PlacedPart) -> (Vec3, Vec3) {
    let half = linalg::scale(p.shape.extents(), 0.5);
    let m = p.pose.rotation.matrix();
    let mut reach = [0.0; 3];
    for (i, r) in reach.iter_mut().enumerate() {
        *r = (0..3).map(|j| m[i][j].abs() * half[j]).sum();
    }
    (linalg::sub(p.pose.translation, reach), linalg::add(p.pose.translation, reach))
}
