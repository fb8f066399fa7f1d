//! Zero-shot multiple-choice evaluation with regex answer extraction.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::LazyLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::qa::{letter_index, prompt_text, LETTERS};
use crate::geo::{QaRecord, RasterImage};
use crate::model::{generate, ModelParams};

/// Generation budget per item; the longest templated rationale is ~70 characters.
pub const MAX_NEW_TOKENS: usize = 96;

/// Prompt templates used at evaluation time, by name. `{question}` and
/// `{choices}` are substituted.
pub const PROMPT_TEMPLATES: &[(&str, &str)] = &[("zero_shot", "{question} {choices}. Answer with the letter.")];

/// Recognized answer statements. The phrase is case-insensitive; a bare
/// letter must be upper case so that "the answer is a ..." is not read as A.
static ANSWER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(concat!(
        r"(?i:answer\s+is)\s*\(([A-Da-d])\)",
        r"|(?i:answer\s+is)\s+([A-D])\b",
        r"|(?i:answer)\s*:\s*\(?([A-D])\)?\b",
        r"|\(([A-Da-d])\)\s*\.?\s*$",
    ))
    .expect("answer regex")
});

/// Letter of the last recognized answer statement, if any.
pub fn extract_answer(text: &str) -> Option<char> {
    ANSWER.captures_iter(text).last().and_then(|c| {
        c.iter()
            .skip(1)
            .flatten()
            .next()
            .and_then(|m| m.as_str().chars().next())
            .map(|ch| ch.to_ascii_uppercase())
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub id: String,
    pub image: RasterImage,
    pub question: String,
    pub choices: Vec<f64>,
    pub gold: char,
}

impl EvalItem {
    pub fn from_record(r: &QaRecord) -> Result<Self> {
        if letter_index(r.qa.answer).is_none() || r.qa.choices.len() != 4 {
            return Err(Error::Validation(format!("{}: gold must be A-D with four choices", r.id)));
        }
        Ok(EvalItem {
            id: r.id.clone(),
            image: r.image.clone(),
            question: r.qa.question.clone(),
            choices: r.qa.choices.clone(),
            gold: r.qa.answer,
        })
    }

    pub fn prompt(&self) -> String {
        prompt_text(&self.question, &self.choices)
    }
}

/// Produces a response for an item; implemented by the model and by test doubles.
pub trait Responder: Sync {
    fn respond(&self, item: &EvalItem) -> Result<String>;
}

impl Responder for ModelParams {
    fn respond(&self, item: &EvalItem) -> Result<String> {
        generate(self, &item.image, &item.prompt(), MAX_NEW_TOKENS)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub id: String,
    pub gold: char,
    pub generated: Option<String>,
    pub error: Option<String>,
    pub extracted: Option<char>,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub items: Vec<ItemResult>,
}

impl EvalReport {
    pub fn n(&self) -> usize {
        self.items.len()
    }

    pub fn correct(&self) -> usize {
        self.items.iter().filter(|i| i.correct).count()
    }

    pub fn accuracy(&self) -> f64 {
        self.correct() as f64 / self.n() as f64
    }

    pub fn footer(&self) -> String {
        format!(
            "n={}\ncorrect={}\ntop1_accuracy={:.4}\n",
            self.n(),
            self.correct(),
            self.accuracy()
        )
    }

    pub fn to_text(&self) -> Result<String> {
        if self.items.is_empty() {
            return Err(Error::Usage("refusing to write an empty evaluation report".into()));
        }
        let mut s = String::new();
        for item in &self.items {
            let line = serde_json::to_string(item).map_err(|e| Error::Internal(e.to_string()))?;
            let _ = writeln!(s, "{line}");
        }
        s.push_str(&self.footer());
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = self.to_text()?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut items = Vec::new();
        let mut footer = (None, None);
        for (i, line) in text.lines().enumerate() {
            let perr = |msg: String| Error::Parse { line: i + 1, msg };
            if let Some(v) = line.strip_prefix("n=") {
                footer.0 = Some(v.parse::<usize>().map_err(|e| perr(e.to_string()))?);
            } else if let Some(v) = line.strip_prefix("correct=") {
                footer.1 = Some(v.parse::<usize>().map_err(|e| perr(e.to_string()))?);
            } else if line.starts_with("top1_accuracy=") || line.trim().is_empty() {
            } else {
                items.push(serde_json::from_str::<ItemResult>(line).map_err(|e| perr(e.to_string()))?);
            }
        }
        let report = EvalReport { items };
        if footer != (Some(report.n()), Some(report.correct())) {
            return Err(Error::Validation("report footer disagrees with its items".into()));
        }
        Ok(report)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        EvalReport::parse(&text)
    }
}

/// Scores one response against the gold letter.
pub fn score(item: &EvalItem, response: Result<String>) -> ItemResult {
    let (generated, error) = match response {
        Ok(t) => (Some(t), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let extracted = generated.as_deref().and_then(extract_answer);
    ItemResult {
        id: item.id.clone(),
        gold: item.gold,
        correct: extracted == Some(item.gold),
        generated,
        error,
        extracted,
    }
}

/// Runs every item; per-item failures are recorded and scored incorrect.
pub fn evaluate(model: &impl Responder, items: &[EvalItem]) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Usage("evaluation needs at least one item".into()));
    }
    let results = items.par_iter().map(|it| score(it, model.respond(it))).collect();
    Ok(EvalReport { items: results })
}

/// Zero-shot check: a prompt must carry no worked answer.
pub fn is_zero_shot(prompt: &str) -> bool {
    extract_answer(prompt).is_none()
        && !prompt.to_ascii_lowercase().contains("the answer is")
        && LETTERS.iter().all(|l| prompt.matches(&format!("({l})")).count() == 1)
}
