use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::OptimizerState;
use crate::error::{Error, Result};
use crate::lora::{inject, merge_group, LoraConfig};
use crate::model::{Group, Mode, ModelParams};
use crate::tensor::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    Caption,
    Qa,
}

/// Trainability of each group plus the optimization recipe for one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub name: String,
    pub vision: Mode,
    pub projector: Mode,
    pub llm: Mode,
    pub epochs: usize,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub min_lr: f64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    pub corpus: CorpusKind,
    /// Stops the stage early; `None` runs every epoch to completion.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl StagePlan {
    pub fn mode(&self, g: Group) -> Mode {
        match g {
            Group::Vision => self.vision,
            Group::Projector => self.projector,
            Group::Llm => self.llm,
        }
    }

    pub fn set_mode(&mut self, g: Group, m: Mode) {
        match g {
            Group::Vision => self.vision = m,
            Group::Projector => self.projector = m,
            Group::Llm => self.llm = m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("stage {}: {m}", self.name)));
        if Group::ALL.iter().any(|&g| self.mode(g) == Mode::Lora) {
            match &self.lora {
                None => return bad("LoRA mode requires a lora section".into()),
                Some(l) => l.validate()?,
            }
        }
        if !(0.0..=0.5).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio {} outside [0, 0.5]", self.warmup_ratio));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.peak_lr >= 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.peak_lr {
            return bad(format!("need 0 <= min_lr <= peak_lr, got {} and {}", self.min_lr, self.peak_lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} is negative", self.weight_decay));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        Ok(())
    }

    /// Total optimizer steps for a corpus of `n` records.
    pub fn total_steps(&self, n: usize) -> usize {
        let full = self.epochs * n.div_ceil(self.batch_size);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// Hyper-parameter families for the two stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Full-scale learning rates, epochs and LoRA shape.
    Large,
    /// Tuned so the toy model learns within a CPU budget.
    Desk,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "large" | "paper_preset" => Ok(Preset::Large),
            "desk" | "desk_preset" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset {s:?}"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Large => "large",
            Preset::Desk => "desk",
        })
    }
}

/// Stage 1: vision encoder and projector trained on captions, LLM frozen.
pub fn preliminary(preset: Preset) -> StagePlan {
    let (epochs, peak_lr) = match preset {
        Preset::Large => (1, 1e-5),
        Preset::Desk => (1, 1e-3),
    };
    StagePlan {
        name: "preliminary".into(),
        vision: Mode::Full,
        projector: Mode::Full,
        llm: Mode::Frozen,
        epochs,
        peak_lr,
        batch_size: 8,
        warmup_ratio: 0.03,
        weight_decay: 0.0,
        min_lr: 0.0,
        grad_clip: None,
        lora: None,
        corpus: CorpusKind::Caption,
        max_steps: None,
    }
}

/// Stage 2: LoRA on the vision encoder, projector and LLM fully tuned on QA.
pub fn advanced(preset: Preset) -> StagePlan {
    let (epochs, peak_lr, lora) = match preset {
        Preset::Large => (2, 3e-5, LoraConfig::large()),
        Preset::Desk => (2, 1e-3, LoraConfig::default()),
    };
    StagePlan {
        name: "advanced".into(),
        vision: Mode::Lora,
        projector: Mode::Full,
        llm: Mode::Full,
        epochs,
        peak_lr,
        batch_size: 8,
        warmup_ratio: 0.03,
        weight_decay: 0.0,
        min_lr: 0.0,
        grad_clip: None,
        lora: Some(lora),
        corpus: CorpusKind::Qa,
        max_steps: None,
    }
}

/// Sets group modes for a stage. Adapters left by an earlier stage are first
/// folded into their base weights, then fresh adapters are injected for every
/// LoRA group. Returns an optimizer covering exactly the new trainable set.
pub fn apply_stage_plan(params: &mut ModelParams, plan: &StagePlan, rng: &Rng) -> Result<OptimizerState> {
    plan.validate()?;
    for g in Group::ALL {
        merge_group(params, g)?;
        params.set_mode(g, plan.mode(g));
    }
    for g in Group::ALL {
        if plan.mode(g) == Mode::Lora {
            let cfg = plan.lora.as_ref().expect("validated");
            inject(params, g, cfg, &rng.split(g.as_str()))?;
        }
    }
    OptimizerState::for_params(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn presets_have_expected_modes() {
        let p = preliminary(Preset::Large);
        assert_eq!((p.vision, p.projector, p.llm), (Mode::Full, Mode::Full, Mode::Frozen));
        assert_eq!(p.peak_lr, 1e-5);
        let a = advanced(Preset::Large);
        assert_eq!((a.vision, a.projector, a.llm), (Mode::Lora, Mode::Full, Mode::Full));
        assert_eq!((a.epochs, a.peak_lr), (2, 3e-5));
        assert_eq!(a.lora.as_ref().unwrap().rank, 64);
    }

    #[test]
    fn lora_mode_without_config_is_rejected() {
        let mut a = advanced(Preset::Desk);
        a.lora = None;
        let mut p = ModelParams::new(ModelConfig::tiny(), &Rng::new(0)).unwrap();
        assert!(matches!(apply_stage_plan(&mut p, &a, &Rng::new(1)), Err(Error::Config(_))));
        let mut b = advanced(Preset::Desk);
        b.warmup_ratio = 0.6;
        assert!(b.validate().is_err());
    }

    #[test]
    fn optimizer_covers_exactly_the_trainable_set() {
        let mut p = ModelParams::new(ModelConfig::default(), &Rng::new(0)).unwrap();
        let opt = apply_stage_plan(&mut p, &advanced(Preset::Desk), &Rng::new(1)).unwrap();
        let keys: Vec<&String> = opt.keys().collect();
        assert!(keys.iter().any(|k| k.ends_with(".lora_a")));
        assert!(keys.iter().all(|k| !k.starts_with("vision.") || k.contains(".lora_")));
        assert!(keys.iter().any(|k| k.starts_with("llm.")));
        assert_eq!(keys.len(), p.trainable_keys().len());
    }

    #[test]
    fn reapplying_lora_merges_old_adapters() {
        let mut p = ModelParams::new(ModelConfig::default(), &Rng::new(0)).unwrap();
        let plan = advanced(Preset::Desk);
        apply_stage_plan(&mut p, &plan, &Rng::new(1)).unwrap();
        for a in p.adapters_mut().values_mut() {
            a.b.data_mut().iter_mut().for_each(|v| *v = 0.01);
        }
        let before = p.group_checksum(Group::Vision);
        apply_stage_plan(&mut p, &plan, &Rng::new(2)).unwrap();
        assert_ne!(p.group_checksum(Group::Vision), before);
        assert!(p.adapters().values().all(|a| a.b.data().iter().all(|&v| v == 0.0)));
    }
}
