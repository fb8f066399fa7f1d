use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Rng;

/// Problem-template families. Each has a closed-form oracle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    TriangleAngles,
    ParallelTransversal,
    CircleInscribed,
    MidpointLength,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::TriangleAngles,
        Family::ParallelTransversal,
        Family::CircleInscribed,
        Family::MidpointLength,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::TriangleAngles => "triangle_angles",
            Family::ParallelTransversal => "parallel_transversal",
            Family::CircleInscribed => "circle_inscribed",
            Family::MidpointLength => "midpoint_length",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown diagram family {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub name: String,
    pub x: f64,
    pub y: f64,
}

/// Angle at `vertex` between rays towards `ray1` and `ray2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleMark {
    pub vertex: String,
    pub ray1: String,
    pub ray2: String,
    pub degrees: f64,
}

impl AngleMark {
    /// Conventional three-letter name, e.g. `ABC` for the angle at `B`.
    pub fn name(&self) -> String {
        format!("{}{}{}", self.ray1, self.vertex, self.ray2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub center: String,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Anchor {
    Point(String),
    /// Three-letter angle name.
    Angle(String),
}

/// Extra text drawn into the diagram. Point names are always drawn and are
/// not repeated here.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub text: String,
    pub anchor: Anchor,
}

/// `point` is the midpoint of segment `a b`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Midpoint {
    pub point: String,
    pub a: String,
    pub b: String,
}

/// A stated segment length in abstract units (not diagram coordinates).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentLength {
    pub a: String,
    pub b: String,
    pub value: f64,
}

pub type Segment = (String, String);

/// Symbolic geometric scene in the unit square, y pointing up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagramSpec {
    pub family: Option<Family>,
    pub points: Vec<Point>,
    pub segments: Vec<Segment>,
    pub angles: Vec<AngleMark>,
    pub circles: Vec<Circle>,
    pub parallel_marks: Vec<(Segment, Segment)>,
    pub midpoints: Vec<Midpoint>,
    pub lengths: Vec<SegmentLength>,
    pub labels: Vec<Label>,
}

pub const MIN_POINT_DISTANCE: f64 = 0.05;
pub const ANGLE_TOLERANCE_DEG: f64 = 0.5;

impl DiagramSpec {
    pub fn empty() -> Self {
        DiagramSpec {
            family: None,
            points: vec![],
            segments: vec![],
            angles: vec![],
            circles: vec![],
            parallel_marks: vec![],
            midpoints: vec![],
            lengths: vec![],
            labels: vec![],
        }
    }

    pub fn point(&self, name: &str) -> Option<&Point> {
        self.points.iter().find(|p| p.name == name)
    }

    fn require(&self, name: &str) -> Result<&Point> {
        self.point(name)
            .ok_or_else(|| Error::Validation(format!("unknown point {name:?}")))
    }

    pub fn angle(&self, name: &str) -> Option<&AngleMark> {
        self.angles.iter().find(|a| a.name() == name)
    }

    /// Angle in degrees at `vertex` between `ray1` and `ray2`, from coordinates.
    pub fn measure_angle(&self, vertex: &str, ray1: &str, ray2: &str) -> Result<f64> {
        let v = self.require(vertex)?;
        let a = self.require(ray1)?;
        let b = self.require(ray2)?;
        Ok(angle_between((a.x - v.x, a.y - v.y), (b.x - v.x, b.y - v.y)))
    }

    pub fn distance(&self, a: &str, b: &str) -> Result<f64> {
        let p = self.require(a)?;
        let q = self.require(b)?;
        Ok(((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt())
    }

    /// Checks every type invariant.
    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for p in &self.points {
            if !names.insert(p.name.as_str()) {
                return Err(Error::Validation(format!("duplicate point {}", p.name)));
            }
            if !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y) {
                return Err(Error::Validation(format!("point {} outside unit square", p.name)));
            }
        }
        for (i, p) in self.points.iter().enumerate() {
            for q in &self.points[i + 1..] {
                let d = ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt();
                if d < MIN_POINT_DISTANCE {
                    return Err(Error::Validation(format!(
                        "points {} and {} are {d:.3} apart",
                        p.name, q.name
                    )));
                }
            }
        }
        for (a, b) in self.segments.iter().chain(self.parallel_marks.iter().flat_map(|(s, t)| [s, t])) {
            self.require(a)?;
            self.require(b)?;
        }
        for ang in &self.angles {
            if !(ang.degrees > 0.0 && ang.degrees < 180.0) {
                return Err(Error::Validation(format!("angle {} = {} outside (0, 180)", ang.name(), ang.degrees)));
            }
            let measured = self.measure_angle(&ang.vertex, &ang.ray1, &ang.ray2)?;
            if (measured - ang.degrees).abs() > ANGLE_TOLERANCE_DEG {
                return Err(Error::Validation(format!(
                    "angle {} stored {} but measures {measured:.3}",
                    ang.name(),
                    ang.degrees
                )));
            }
        }
        for c in &self.circles {
            self.require(&c.center)?;
        }
        for m in &self.midpoints {
            self.require(&m.point)?;
            self.require(&m.a)?;
            self.require(&m.b)?;
        }
        for l in &self.lengths {
            self.require(&l.a)?;
            self.require(&l.b)?;
        }
        for l in &self.labels {
            match &l.anchor {
                Anchor::Point(p) => {
                    self.require(p)?;
                }
                Anchor::Angle(a) => {
                    if self.angle(a).is_none() {
                        return Err(Error::Validation(format!("label anchored to unknown angle {a}")));
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn angle_between(u: (f64, f64), v: (f64, f64)) -> f64 {
    let dot = u.0 * v.0 + u.1 * v.1;
    let cross = u.0 * v.1 - u.1 * v.0;
    cross.abs().atan2(dot).to_degrees()
}

fn pt(name: &str, x: f64, y: f64) -> Point {
    Point {
        name: name.into(),
        x,
        y,
    }
}

fn seg(a: &str, b: &str) -> Segment {
    (a.into(), b.into())
}

fn mark(vertex: &str, ray1: &str, ray2: &str, degrees: f64) -> AngleMark {
    AngleMark {
        vertex: vertex.into(),
        ray1: ray1.into(),
        ray2: ray2.into(),
        degrees,
    }
}

/// Draws a random valid diagram of the given family. Deterministic per rng state.
pub fn sample_diagram(rng: &mut Rng, family: Family) -> DiagramSpec {
    let spec = match family {
        Family::TriangleAngles => triangle(rng),
        Family::ParallelTransversal => parallel(rng),
        Family::CircleInscribed => circle(rng),
        Family::MidpointLength => midpoint(rng),
    };
    debug_assert!(spec.validate().is_ok(), "{:?}", spec.validate());
    spec
}

/// Parses a family name then samples.
pub fn sample_diagram_named(rng: &mut Rng, family: &str) -> Result<DiagramSpec> {
    Ok(sample_diagram(rng, family.parse()?))
}

/// Multiples of 5 in `lo..=hi`.
fn multiple_of_five(rng: &mut Rng, lo: u32, hi: u32) -> f64 {
    let k = lo / 5 + rng.below(((hi - lo) / 5 + 1) as usize) as u32;
    (k * 5) as f64
}

fn triangle(rng: &mut Rng) -> DiagramSpec {
    let (a, b) = loop {
        let a = multiple_of_five(rng, 30, 100);
        let b = multiple_of_five(rng, 30, 100);
        if 180.0 - a - b >= 25.0 {
            break (a, b);
        }
    };
    let c = 180.0 - a - b;
    // B at the origin, C on the x axis; A from the base angles at B and C.
    let (tb, tc) = (b.to_radians().tan(), c.to_radians().tan());
    let ax = tc / (tb + tc);
    let ay = tb * ax;
    let raw = [(ax, ay), (0.0, 0.0), (1.0, 0.0)];
    let (min_x, max_x) = raw.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let max_y = raw.iter().fold(0.0f64, |m, p| m.max(p.1));
    let extent = (max_x - min_x).max(max_y);
    let size = rng.uniform_in(0.6, 0.8);
    let s = size / extent;
    let ox = rng.uniform_in(0.1, 0.9 - (max_x - min_x) * s) - min_x * s;
    let oy = rng.uniform_in(0.1, 0.9 - max_y * s);
    let place = |p: (f64, f64)| (ox + p.0 * s, oy + p.1 * s);
    let (pa, pb, pc) = (place(raw[0]), place(raw[1]), place(raw[2]));
    DiagramSpec {
        family: Some(Family::TriangleAngles),
        points: vec![pt("A", pa.0, pa.1), pt("B", pb.0, pb.1), pt("C", pc.0, pc.1)],
        segments: vec![seg("A", "B"), seg("B", "C"), seg("C", "A")],
        angles: vec![mark("A", "C", "B", a), mark("B", "A", "C", b), mark("C", "B", "A", c)],
        ..DiagramSpec::empty()
    }
}

fn parallel(rng: &mut Rng) -> DiagramSpec {
    let x = multiple_of_five(rng, 40, 140);
    // Keep the transversal's horizontal run short enough that E and F both
    // land in the middle band of the picture.
    let gap = rng.uniform_in(0.35, 0.5).min(0.55 * x.to_radians().tan().abs());
    let mid = rng.uniform_in(0.45, 0.55);
    let (top, bottom) = (mid + gap / 2.0, mid - gap / 2.0);
    let dx = -gap / x.to_radians().tan();
    let lo = 0.2f64.max(0.2 - dx);
    let hi = 0.8f64.min(0.8 - dx);
    let ex = rng.uniform_in(lo, hi);
    let fx = ex + dx;
    DiagramSpec {
        family: Some(Family::ParallelTransversal),
        points: vec![
            pt("A", 0.1, top),
            pt("B", 0.9, top),
            pt("C", 0.1, bottom),
            pt("D", 0.9, bottom),
            pt("E", ex, top),
            pt("F", fx, bottom),
        ],
        segments: vec![seg("A", "B"), seg("C", "D"), seg("E", "F")],
        angles: vec![mark("E", "A", "F", x), mark("F", "E", "D", x)],
        parallel_marks: vec![(seg("A", "B"), seg("C", "D"))],
        labels: vec![
            Label {
                text: "1".into(),
                anchor: Anchor::Angle("AEF".into()),
            },
            Label {
                text: "2".into(),
                anchor: Anchor::Angle("EFD".into()),
            },
        ],
        ..DiagramSpec::empty()
    }
}

fn circle(rng: &mut Rng) -> DiagramSpec {
    // Even multiples of five keep the inscribed angle a whole number.
    let central = 2.0 * multiple_of_five(rng, 20, 80);
    let (cx, cy, r) = (0.5, 0.5, rng.uniform_in(0.3, 0.38));
    let phi = rng.uniform_in(0.0, 360.0);
    let on = |deg: f64| {
        let t = deg.to_radians();
        (cx + r * t.cos(), cy + r * t.sin())
    };
    let a = on(phi);
    let b = on(phi + central);
    let c = on(phi + central + (360.0 - central) * rng.uniform_in(0.35, 0.65));
    DiagramSpec {
        family: Some(Family::CircleInscribed),
        points: vec![
            pt("O", cx, cy),
            pt("A", a.0, a.1),
            pt("B", b.0, b.1),
            pt("C", c.0, c.1),
        ],
        segments: vec![seg("O", "A"), seg("O", "B"), seg("C", "A"), seg("C", "B")],
        angles: vec![mark("O", "A", "B", central), mark("C", "A", "B", central / 2.0)],
        circles: vec![Circle {
            center: "O".into(),
            radius: r,
        }],
        ..DiagramSpec::empty()
    }
}

fn midpoint(rng: &mut Rng) -> DiagramSpec {
    let whole = 2.0 * (10 + rng.below(31)) as f64;
    let theta = rng.uniform_in(0.0, std::f64::consts::PI);
    let half_len = rng.uniform_in(0.25, 0.38);
    let (dx, dy) = (half_len * theta.cos(), half_len * theta.sin());
    let (mx, my) = (0.5, 0.5);
    DiagramSpec {
        family: Some(Family::MidpointLength),
        points: vec![
            pt("A", mx - dx, my - dy),
            pt("M", mx, my),
            pt("B", mx + dx, my + dy),
        ],
        segments: vec![seg("A", "B")],
        midpoints: vec![Midpoint {
            point: "M".into(),
            a: "A".into(),
            b: "B".into(),
        }],
        lengths: vec![SegmentLength {
            a: "A".into(),
            b: "B".into(),
            value: whole,
        }],
        ..DiagramSpec::empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_family_is_valid_over_many_seeds() {
        for fam in Family::ALL {
            for s in 0..300 {
                let spec = sample_diagram(&mut Rng::new(s), fam);
                spec.validate().unwrap_or_else(|e| panic!("{fam} seed {s}: {e}"));
            }
        }
    }

    #[test]
    fn triangle_has_three_angles_summing_to_180() {
        for s in 0..50 {
            let spec = sample_diagram(&mut Rng::new(s), Family::TriangleAngles);
            assert_eq!(spec.points.len(), 3);
            assert_eq!(spec.segments.len(), 3);
            assert_eq!(spec.angles.len(), 3);
            let sum: f64 = spec.angles.iter().map(|a| a.degrees).sum();
            assert!((sum - 180.0).abs() <= 0.5);
            let measured: f64 = spec
                .angles
                .iter()
                .map(|a| spec.measure_angle(&a.vertex, &a.ray1, &a.ray2).unwrap())
                .sum();
            assert!((measured - 180.0).abs() < 1e-9);
        }
    }

    #[test]
    fn inscribed_angle_is_half_the_central_angle() {
        for s in 0..50 {
            let spec = sample_diagram(&mut Rng::new(s), Family::CircleInscribed);
            let central = spec.angle("AOB").unwrap().degrees;
            let inscribed = spec.angle("ACB").unwrap().degrees;
            assert_eq!(central, 2.0 * inscribed);
        }
    }

    #[test]
    fn same_seed_same_spec() {
        for fam in Family::ALL {
            assert_eq!(sample_diagram(&mut Rng::new(3), fam), sample_diagram(&mut Rng::new(3), fam));
        }
    }

    #[test]
    fn unknown_family_is_config_error() {
        assert!(matches!(
            sample_diagram_named(&mut Rng::new(0), "hexagon_area"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn validation_catches_broken_invariants() {
        let mut spec = sample_diagram(&mut Rng::new(1), Family::TriangleAngles);
        spec.angles[0].degrees += 5.0;
        assert!(spec.validate().is_err());

        let mut spec = sample_diagram(&mut Rng::new(1), Family::TriangleAngles);
        spec.segments.push(seg("A", "Z"));
        assert!(spec.validate().is_err());

        let mut spec = sample_diagram(&mut Rng::new(1), Family::MidpointLength);
        spec.points[1].x = spec.points[0].x + 0.01;
        spec.points[1].y = spec.points[0].y;
        assert!(spec.validate().is_err());
    }
}
