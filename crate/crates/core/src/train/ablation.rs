use std::fmt::Write as _;

use super::pipeline::{run_stages, Corpora};
use super::{advanced, preliminary, Preset, StagePlan, TrainReport};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalItem};
use crate::model::{Group, Mode, ModelConfig, ModelParams};
use crate::tensor::Rng;

/// One configuration of the vision-encoder / LLM training-strategy study.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    /// Which study the row belongs to: "vision", "llm" or "no-stage-1".
    pub study: &'static str,
    pub method: &'static str,
    /// Vision-encoder mode in stage 1; `None` skips stage 1.
    pub stage1_vision: Option<Mode>,
    pub stage2_vision: Mode,
    pub llm: Mode,
}

fn mode_label(m: Mode) -> &'static str {
    match m {
        Mode::Frozen => "Freeze",
        Mode::Full => "Full Fine-tune",
        Mode::Lora => "LoRA",
    }
}

impl AblationRow {
    /// e.g. "Full Fine-tune / LoRA".
    pub fn label(&self) -> String {
        let s1 = self.stage1_vision.map_or("-", mode_label);
        format!("{s1} / {}", mode_label(self.stage2_vision))
    }

    /// The two-stage configuration used for the headline model.
    pub fn is_reference(&self) -> bool {
        self.stage1_vision == Some(Mode::Full) && self.stage2_vision == Mode::Lora && self.llm == Mode::Full
    }

    /// Stage plans for this row, derived from the preset and capped at
    /// `max_steps` per stage.
    pub fn plans(&self, preset: Preset, max_steps: Option<usize>) -> Vec<StagePlan> {
        let mut s2 = advanced(preset);
        s2.vision = self.stage2_vision;
        s2.llm = self.llm;
        s2.max_steps = max_steps;
        let mut plans = Vec::new();
        if let Some(m) = self.stage1_vision {
            let mut s1 = preliminary(preset);
            s1.vision = m;
            s1.max_steps = max_steps;
            if m == Mode::Lora {
                s1.lora = s2.lora.clone();
            }
            plans.push(s1);
        }
        plans.push(s2);
        plans
    }
}

/// The nine unique rows: six vision-strategy rows, the frozen-LLM variant and
/// the two extra no-stage-1 rows. The no-stage-1 LoRA row is shared.
pub fn ablation_rows() -> Vec<AblationRow> {
    use Mode::*;
    let row = |study, method, s1, s2, llm| AblationRow {
        study,
        method,
        stage1_vision: s1,
        stage2_vision: s2,
        llm,
    };
    vec![
        row("vision", "1", None, Lora, Full),
        row("vision", "2", Some(Frozen), Lora, Full),
        row("vision", "3", Some(Lora), Lora, Full),
        row("vision", "4", Some(Full), Full, Full),
        row("vision", "5", Some(Full), Frozen, Full),
        row("vision", "EAGLE", Some(Full), Lora, Full),
        row("llm", "EAGLE*", Some(Full), Lora, Frozen),
        row("no-stage-1", "2", None, Full, Full),
        row("no-stage-1", "3", None, Frozen, Full),
    ]
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub row: AblationRow,
    pub accuracy: f64,
    pub reports: Vec<TrainReport>,
}

impl AblationResult {
    /// `stage:group` for every frozen group whose checksum moved.
    pub fn freeze_violations(&self) -> Vec<String> {
        self.reports
            .iter()
            .flat_map(|r| r.frozen_violations().into_iter().map(move |g| format!("{}:{}", r.stage, g.as_str())))
            .collect()
    }

    /// Groups frozen in at least one stage, for the table.
    fn frozen_groups(&self) -> String {
        let mut out = Vec::new();
        for r in &self.reports {
            for g in Group::ALL {
                if r.modes[g as usize] == Mode::Frozen {
                    out.push(format!("{}:{}", &r.stage[..1], g.as_str()));
                }
            }
        }
        out.join(",")
    }
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub results: Vec<AblationResult>,
}

impl AblationTable {
    pub fn all_frozen_intact(&self) -> bool {
        self.results.iter().all(|r| r.freeze_violations().is_empty())
    }

    /// Aligned text table, one line per configuration.
    pub fn render(&self) -> String {
        let header = ["study", "method", "stage 1 / stage 2 vision", "llm", "frozen", "freeze_check", "accuracy"];
        let rows: Vec<[String; 7]> = self
            .results
            .iter()
            .map(|r| {
                [
                    r.row.study.to_string(),
                    r.row.method.to_string(),
                    r.row.label(),
                    mode_label(r.row.llm).to_string(),
                    r.frozen_groups(),
                    if r.freeze_violations().is_empty() { "ok".into() } else { r.freeze_violations().join(",") },
                    format!("{:.4}", r.accuracy),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut s = String::new();
        let line = |s: &mut String, cells: Vec<&str>| {
            let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(s, "{}", parts.join("  ").trim_end());
        };
        line(&mut s, header.to_vec());
        line(&mut s, widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().iter().map(String::as_str).collect());
        for r in &rows {
            line(&mut s, r.iter().map(String::as_str).collect());
        }
        s
    }
}

/// Knobs for one ablation sweep.
#[derive(Clone, Debug)]
pub struct AblationSetup {
    pub model: ModelConfig,
    pub preset: Preset,
    pub seed: u64,
    pub max_steps: Option<usize>,
}

/// Trains and evaluates every row from the same seed.
pub fn ablation_matrix(
    setup: &AblationSetup,
    corpora: &Corpora,
    eval_items: &[EvalItem],
    mut on_row: impl FnMut(&AblationResult),
) -> Result<AblationTable> {
    if eval_items.is_empty() {
        return Err(Error::Config("ablation needs evaluation items".into()));
    }
    let rng = Rng::new(setup.seed);
    let mut results = Vec::new();
    for row in ablation_rows() {
        let mut params = ModelParams::new(setup.model.clone(), &rng.split("init"))?;
        let plans = row.plans(setup.preset, setup.max_steps);
        let reports = run_stages(&mut params, &plans, corpora, &rng.split("train"), None, &mut ())?;
        let accuracy = evaluate(&params, eval_items)?.accuracy();
        let result = AblationResult { row, accuracy, reports };
        on_row(&result);
        results.push(result);
    }
    Ok(AblationTable { results })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn nine_unique_rows_with_one_reference() {
        let rows = ablation_rows();
        assert_eq!(rows.len(), 9);
        let keys: HashSet<_> = rows.iter().map(|r| (r.stage1_vision, r.stage2_vision, r.llm)).collect();
        assert_eq!(keys.len(), 9);
        let refs: Vec<_> = rows.iter().filter(|r| r.is_reference()).collect();
        assert_eq!(refs.len(), 1);
        assert_eq!(refs[0].label(), "Full Fine-tune / LoRA");
        assert_eq!(rows[0].label(), "- / LoRA");
    }

    #[test]
    fn row_plans_follow_the_modes() {
        let rows = ablation_rows();
        let p = rows[4].plans(Preset::Large, Some(50));
        assert_eq!(p.len(), 2);
        assert_eq!((p[1].vision, p[1].projector, p[1].llm), (Mode::Frozen, Mode::Full, Mode::Full));
        assert_eq!(p[0].max_steps, Some(50));
        let p = rows[2].plans(Preset::Desk, None);
        assert_eq!(p[0].vision, Mode::Lora);
        p[0].validate().unwrap();
        assert_eq!(rows[8].plans(Preset::Desk, None).len(), 1);
        assert_eq!(rows[6].plans(Preset::Desk, None)[1].llm, Mode::Frozen);
    }
}
