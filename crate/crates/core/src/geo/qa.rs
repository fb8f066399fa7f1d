//! Multiple-choice questions with chain-of-thought targets.

use serde::{Deserialize, Serialize};

use super::caption::fmt_num;
use super::spec::{DiagramSpec, Family};
use crate::error::{Error, Result};
use crate::tensor::Rng;

pub const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

/// Fixed instruction closing every prompt.
pub const INSTRUCTION: &str = "Answer with the letter.";

const ANGLE_OFFSETS: [f64; 8] = [-20.0, -15.0, -10.0, -5.0, 5.0, 10.0, 15.0, 20.0];
const LENGTH_FACTORS: [f64; 8] = [0.6, 0.7, 0.8, 0.9, 1.1, 1.2, 1.3, 1.4];

/// The quantity a question asks for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Three-letter angle name, ray1 + vertex + ray2.
    Angle(String),
    /// Segment endpoints.
    Length(String, String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaQuestion {
    pub question: String,
    pub choices: Vec<f64>,
    pub cot: Vec<String>,
    pub answer: char,
    pub oracle_value: f64,
    pub target: Target,
}

impl QaQuestion {
    /// Question, enumerated choices and the fixed instruction.
    pub fn prompt(&self) -> String {
        prompt_text(&self.question, &self.choices)
    }

    pub fn cot_text(&self) -> String {
        self.cot.join(" ")
    }
}

pub fn prompt_text(question: &str, choices: &[f64]) -> String {
    let opts: Vec<String> = LETTERS
        .iter()
        .zip(choices)
        .map(|(l, v)| format!("{} ({l})", fmt_num(*v)))
        .collect();
    format!("{question} {}. {INSTRUCTION}", opts.join(", "))
}

pub fn letter_index(letter: char) -> Option<usize> {
    LETTERS.iter().position(|&l| l == letter)
}

/// Builds a question for a sampled diagram.
pub fn qa_of(spec: &DiagramSpec, rng: &mut Rng) -> Result<QaQuestion> {
    let family = spec
        .family
        .ok_or_else(|| Error::Internal("diagram has no template family".into()))?;
    let angle = |name: &str| -> Result<f64> {
        spec.angle(name)
            .map(|a| a.degrees)
            .ok_or_else(|| Error::Internal(format!("{family} diagram lacks angle {name}")))
    };
    let (question, steps, value, target) = match family {
        Family::TriangleAngles => {
            let names = ["CAB", "ABC", "BCA"];
            let ask = rng.below(3);
            let given: Vec<usize> = (0..3).filter(|&i| i != ask).collect();
            let v = |i: usize| angle(names[i]).map(fmt_num);
            let vertex = |i: usize| &names[i][1..2];
            let value = 180.0 - angle(names[given[0]])? - angle(names[given[1]])?;
            (
                format!(
                    "In triangle ABC, angle {} is {} and angle {} is {}. Find angle {}.",
                    vertex(given[0]),
                    v(given[0])?,
                    vertex(given[1]),
                    v(given[1])?,
                    vertex(ask)
                ),
                vec![format!(
                    "The angles sum to 180, so {} = 180 - {} - {} = {}.",
                    vertex(ask),
                    v(given[0])?,
                    v(given[1])?,
                    fmt_num(value)
                )],
                value,
                Target::Angle(names[ask].to_string()),
            )
        }
        Family::ParallelTransversal => {
            let x = angle("AEF")?;
            let (given, ask, name) = if rng.below(2) == 0 { (1, 2, "EFD") } else { (2, 1, "AEF") };
            (
                format!("AB is parallel to CD. Angle {given} is {}. Find angle {ask}.", fmt_num(x)),
                vec![format!(
                    "Angles {given} and {ask} are alternate angles, so angle {ask} = {}.",
                    fmt_num(x)
                )],
                x,
                Target::Angle(name.to_string()),
            )
        }
        Family::CircleInscribed => {
            let central = angle("AOB")?;
            let value = central / 2.0;
            (
                format!("O is the center of the circle. Angle AOB is {}. Find angle ACB.", fmt_num(central)),
                vec![format!(
                    "ACB is half of AOB, so ACB = {} / 2 = {}.",
                    fmt_num(central),
                    fmt_num(value)
                )],
                value,
                Target::Angle("ACB".to_string()),
            )
        }
        Family::MidpointLength => {
            let whole = spec
                .lengths
                .first()
                .map(|l| l.value)
                .ok_or_else(|| Error::Internal("midpoint diagram lacks a length".into()))?;
            let value = whole / 2.0;
            (
                format!("M is the midpoint of AB and AB is {}. Find AM.", fmt_num(whole)),
                vec![format!("AM = AB / 2 = {} / 2 = {}.", fmt_num(whole), fmt_num(value))],
                value,
                Target::Length("A".into(), "M".into()),
            )
        }
    };
    let distractors = match target {
        Target::Angle(_) => angle_distractors(value, rng),
        Target::Length(..) => length_distractors(value, rng),
    };
    let slot = rng.below(4);
    let mut choices = distractors;
    choices.insert(slot, value);
    let answer = LETTERS[slot];
    // The derivation ends on the value; tagging it with its label the same way
    // the prompt lists choices makes the letter a copy from the prompt.
    let mut cot = steps;
    if let Some(last) = cot.last_mut() {
        last.pop();
        last.push_str(&format!(" ({answer})."));
    }
    cot.push(format!("The answer is ({answer})."));
    let q = QaQuestion {
        question,
        choices,
        cot,
        answer,
        oracle_value: value,
        target,
    };
    verify(spec, &q)?;
    Ok(q)
}

fn angle_distractors(value: f64, rng: &mut Rng) -> Vec<f64> {
    let mut pool: Vec<f64> = ANGLE_OFFSETS
        .iter()
        .map(|o| value + o)
        .filter(|v| *v > 0.0 && *v < 180.0)
        .collect();
    rng.shuffle(&mut pool);
    pool.truncate(3);
    pool
}

fn length_distractors(value: f64, rng: &mut Rng) -> Vec<f64> {
    let mut pool: Vec<f64> = Vec::new();
    for f in LENGTH_FACTORS {
        let v = (value * f).round();
        if v > 0.0 && v != value && !pool.contains(&v) {
            pool.push(v);
        }
    }
    rng.shuffle(&mut pool);
    pool.truncate(3);
    pool
}

/// Recomputes the asked quantity from the diagram coordinates.
pub fn geometric_value(spec: &DiagramSpec, target: &Target) -> Result<f64> {
    match target {
        Target::Angle(name) => {
            let c: Vec<String> = name.chars().map(String::from).collect();
            if c.len() != 3 {
                return Err(Error::Validation(format!("bad angle name {name}")));
            }
            spec.measure_angle(&c[1], &c[0], &c[2])
        }
        Target::Length(a, b) => {
            // Coordinates carry no unit, so scale by a stated length.
            let known = spec
                .lengths
                .first()
                .ok_or_else(|| Error::Validation("no stated length to scale by".into()))?;
            let unit = known.value / spec.distance(&known.a, &known.b)?;
            Ok(spec.distance(a, b)? * unit)
        }
    }
}

/// Checks a question against an independent recomputation from coordinates.
pub fn verify(spec: &DiagramSpec, q: &QaQuestion) -> Result<()> {
    let fail = |m: String| Err(Error::Internal(m));
    if q.choices.len() != 4 {
        return fail(format!("expected 4 choices, got {}", q.choices.len()));
    }
    let measured = geometric_value(spec, &q.target)?;
    if (measured - q.oracle_value).abs() > 1e-6 {
        return fail(format!("oracle {} but geometry gives {measured}", q.oracle_value));
    }
    let Some(idx) = letter_index(q.answer) else {
        return fail(format!("answer {} is not a letter A-D", q.answer));
    };
    let hits = q.choices.iter().filter(|c| (**c - measured).abs() < 1e-6).count();
    if hits != 1 || (q.choices[idx] - measured).abs() >= 1e-6 {
        return fail(format!("choices {:?} do not single out {measured}", q.choices));
    }
    for i in 0..4 {
        for j in i + 1..4 {
            if q.choices[i] == q.choices[j] {
                return fail(format!("duplicate choice {}", q.choices[i]));
            }
        }
    }
    if !q.cot.last().is_some_and(|s| s.contains(&format!("({})", q.answer))) {
        return fail("final step does not state the answer letter".into());
    }
    Ok(())
}
