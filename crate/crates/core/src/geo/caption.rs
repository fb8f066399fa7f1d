//! Template captions. Grammar, one clause per sentence, in this order:
//!
//! ```text
//! Points A upper left, B bottom, ...
//! Segments AB, BC, ...
//! Circle centered at O.
//! AB parallel to CD.
//! M midpoint of AB.
//! AB is 28.
//! Angle CAB is 50 degrees.
//! Label 1 at angle AEF.        (or: Label x at point P.)
//! ```
//!
//! Clauses with nothing to report are omitted.

use super::spec::{Anchor, DiagramSpec};
use crate::error::{Error, Result};

/// Symbolic content of a diagram, without coordinates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Elements {
    pub points: Vec<(String, String)>,
    pub segments: Vec<String>,
    pub circles: Vec<String>,
    pub parallels: Vec<(String, String)>,
    pub midpoints: Vec<(String, String)>,
    pub lengths: Vec<(String, String)>,
    pub angles: Vec<(String, String)>,
    pub labels: Vec<(String, String)>,
}

/// Coarse 3×3 position word for a unit-square coordinate.
pub fn position_word(x: f64, y: f64) -> &'static str {
    let col = if x < 1.0 / 3.0 { 0 } else if x > 2.0 / 3.0 { 2 } else { 1 };
    let row = if y > 2.0 / 3.0 { 0 } else if y < 1.0 / 3.0 { 2 } else { 1 };
    [
        ["upper left", "top", "upper right"],
        ["left", "center", "right"],
        ["lower left", "bottom", "lower right"],
    ][row][col]
}

/// Formats a value without a trailing ".0" when it is whole.
pub fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        let s = format!("{v:.2}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

pub fn elements_of(spec: &DiagramSpec) -> Elements {
    let anchor = |a: &Anchor| match a {
        Anchor::Point(p) => format!("point {p}"),
        Anchor::Angle(n) => format!("angle {n}"),
    };
    Elements {
        points: spec
            .points
            .iter()
            .map(|p| (p.name.clone(), position_word(p.x, p.y).to_string()))
            .collect(),
        segments: spec.segments.iter().map(|(a, b)| format!("{a}{b}")).collect(),
        circles: spec.circles.iter().map(|c| c.center.clone()).collect(),
        parallels: spec
            .parallel_marks
            .iter()
            .map(|(s, t)| (format!("{}{}", s.0, s.1), format!("{}{}", t.0, t.1)))
            .collect(),
        midpoints: spec
            .midpoints
            .iter()
            .map(|m| (m.point.clone(), format!("{}{}", m.a, m.b)))
            .collect(),
        lengths: spec
            .lengths
            .iter()
            .map(|l| (format!("{}{}", l.a, l.b), fmt_num(l.value)))
            .collect(),
        angles: spec.angles.iter().map(|a| (a.name(), fmt_num(a.degrees))).collect(),
        labels: spec.labels.iter().map(|l| (l.text.clone(), anchor(&l.anchor))).collect(),
    }
}

pub fn caption_of(spec: &DiagramSpec) -> String {
    render(&elements_of(spec))
}

fn render(e: &Elements) -> String {
    let mut out: Vec<String> = Vec::new();
    if !e.points.is_empty() {
        let list: Vec<String> = e.points.iter().map(|(n, w)| format!("{n} {w}")).collect();
        out.push(format!("Points {}.", list.join(", ")));
    }
    if !e.segments.is_empty() {
        out.push(format!("Segments {}.", e.segments.join(", ")));
    }
    out.extend(e.circles.iter().map(|c| format!("Circle centered at {c}.")));
    out.extend(e.parallels.iter().map(|(a, b)| format!("{a} parallel to {b}.")));
    out.extend(e.midpoints.iter().map(|(m, s)| format!("{m} midpoint of {s}.")));
    out.extend(e.lengths.iter().map(|(s, v)| format!("{s} is {v}.")));
    out.extend(e.angles.iter().map(|(n, v)| format!("Angle {n} is {v} degrees.")));
    out.extend(e.labels.iter().map(|(t, a)| format!("Label {t} at {a}.")));
    out.join(" ")
}

/// Inverse of [`caption_of`] at the symbolic level.
pub fn parse_caption(text: &str) -> Result<Elements> {
    let bad = |s: &str| Error::Validation(format!("unrecognized caption clause {s:?}"));
    let mut e = Elements::default();
    for clause in text.split_terminator(". ").flat_map(|c| c.strip_suffix('.').or(Some(c))) {
        let words: Vec<&str> = clause.split(' ').collect();
        if let Some(rest) = clause.strip_prefix("Points ") {
            for item in rest.split(", ") {
                let (name, word) = item.split_once(' ').ok_or_else(|| bad(clause))?;
                e.points.push((name.to_string(), word.to_string()));
            }
        } else if let Some(rest) = clause.strip_prefix("Segments ") {
            e.segments.extend(rest.split(", ").map(str::to_string));
        } else if let Some(c) = clause.strip_prefix("Circle centered at ") {
            e.circles.push(c.to_string());
        } else if let [a, "parallel", "to", b] = words[..] {
            e.parallels.push((a.into(), b.into()));
        } else if let [m, "midpoint", "of", s] = words[..] {
            e.midpoints.push((m.into(), s.into()));
        } else if let ["Angle", n, "is", v, "degrees"] = words[..] {
            e.angles.push((n.into(), v.into()));
        } else if let [s, "is", v] = words[..] {
            e.lengths.push((s.into(), v.into()));
        } else if let ["Label", t, "at", kind, a] = words[..] {
            e.labels.push((t.into(), format!("{kind} {a}")));
        } else {
            return Err(bad(clause));
        }
    }
    Ok(e)
}
