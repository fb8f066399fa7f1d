use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{advanced, preliminary, run_stage, CorpusKind, Preset, StageObserver, StagePlan, TrainReport};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::geo::{read_corpus, CaptionRecord, QaRecord};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub captions: PathBuf,
    pub qa: PathBuf,
    /// Held-out QA items; only `eval` and `ablate` need it.
    #[serde(default)]
    pub eval: Option<PathBuf>,
}

/// Everything a training run needs, usually read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default = "default_preset")]
    pub preset: Preset,
    #[serde(default)]
    pub model: ModelConfig,
    pub data: DataPaths,
    #[serde(default)]
    pub skip_preliminary: bool,
    /// Overrides the preset's stage-1 plan.
    #[serde(default)]
    pub preliminary: Option<StagePlan>,
    /// Overrides the preset's stage-2 plan.
    #[serde(default)]
    pub advanced: Option<StagePlan>,
}

fn default_preset() -> Preset {
    Preset::Desk
}

impl RunConfig {
    /// Desk preset reading `captions.jsonl`, `qa.jsonl` and `eval.jsonl` from `data_dir`.
    pub fn with_data_dir(data_dir: &Path, out_dir: &Path) -> Self {
        RunConfig {
            seed: 0,
            out_dir: out_dir.to_path_buf(),
            preset: Preset::Desk,
            model: ModelConfig::default(),
            data: DataPaths {
                captions: data_dir.join("captions.jsonl"),
                qa: data_dir.join("qa.jsonl"),
                eval: Some(data_dir.join("eval.jsonl")),
            },
            skip_preliminary: false,
            preliminary: None,
            advanced: None,
        }
    }

    /// Parses TOML; relative paths are taken relative to `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.out_dir);
        fix(&mut cfg.data.captions);
        fix(&mut cfg.data.qa);
        if let Some(e) = cfg.data.eval.as_mut() {
            fix(e);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(e.to_string()))
    }

    /// The stage plans in execution order.
    pub fn plans(&self) -> Vec<StagePlan> {
        let mut plans = Vec::new();
        if !self.skip_preliminary {
            plans.push(self.preliminary.clone().unwrap_or_else(|| preliminary(self.preset)));
        }
        plans.push(self.advanced.clone().unwrap_or_else(|| advanced(self.preset)));
        plans
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for p in self.plans() {
            p.validate()?;
        }
        Ok(())
    }

    /// Fails fast if an input file is missing.
    pub fn check_paths(&self, need_eval: bool) -> Result<()> {
        let mut paths = vec![("data.captions", &self.data.captions), ("data.qa", &self.data.qa)];
        if need_eval {
            match &self.data.eval {
                Some(e) => paths.push(("data.eval", e)),
                None => return Err(Error::Config("data.eval is required".into())),
            }
        }
        for (field, p) in paths {
            if !p.is_file() {
                return Err(Error::Config(format!("{field}: {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct Corpora {
    pub captions: Vec<CaptionRecord>,
    pub qa: Vec<QaRecord>,
}

impl Corpora {
    pub fn load(data: &DataPaths) -> Result<Self> {
        Ok(Corpora {
            captions: read_corpus(&data.captions)?,
            qa: read_corpus(&data.qa)?,
        })
    }
}

/// Checkpoints `<name>.ckpt` after each epoch so an interrupted stage leaves
/// the last completed epoch on disk.
struct EpochCheckpoints<'a, O> {
    path: Option<PathBuf>,
    inner: &'a mut O,
}

impl<O: StageObserver> StageObserver for EpochCheckpoints<'_, O> {
    fn step(&mut self, step: usize, total: usize, loss: f64) {
        self.inner.step(step, total, loss);
    }

    fn epoch_end(&mut self, epoch: usize, params: &ModelParams) -> Result<()> {
        if let Some(p) = &self.path {
            checkpoint::save(params, p)?;
        }
        self.inner.epoch_end(epoch, params)
    }
}

pub fn checkpoint_path(out: &Path, stage: &str) -> PathBuf {
    out.join(format!("{stage}.ckpt"))
}

/// Runs `plans` in order on `params`. With `out`, each stage writes its
/// checkpoint and report there.
pub fn run_stages(
    params: &mut ModelParams,
    plans: &[StagePlan],
    corpora: &Corpora,
    rng: &Rng,
    out: Option<&Path>,
    observer: &mut impl StageObserver,
) -> Result<Vec<TrainReport>> {
    for p in plans {
        p.validate()?;
    }
    if let Some(o) = out {
        std::fs::create_dir_all(o).map_err(|e| Error::io(o, e))?;
    }
    let mut reports = Vec::with_capacity(plans.len());
    for plan in plans {
        let stage_rng = rng.split(&plan.name);
        let mut obs = EpochCheckpoints {
            path: out.map(|o| checkpoint_path(o, &plan.name)),
            inner: observer,
        };
        let report = match plan.corpus {
            CorpusKind::Caption => run_stage(params, &corpora.captions, plan, &stage_rng, &mut obs)?,
            CorpusKind::Qa => run_stage(params, &corpora.qa, plan, &stage_rng, &mut obs)?,
        };
        if let Some(o) = out {
            checkpoint::save(params, &checkpoint_path(o, &plan.name))?;
            report.write(o)?;
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Stage 1 on captions then stage 2 on QA, from a fresh initialization.
pub fn run_pipeline(
    config: &RunConfig,
    corpora: &Corpora,
    observer: &mut impl StageObserver,
) -> Result<(ModelParams, Vec<TrainReport>)> {
    config.validate()?;
    let plans = config.plans();
    for p in &plans {
        let empty = match p.corpus {
            CorpusKind::Caption => corpora.captions.is_empty(),
            CorpusKind::Qa => corpora.qa.is_empty(),
        };
        if empty {
            return Err(Error::Config(format!("stage {} has no {:?} records", p.name, p.corpus)));
        }
    }
    let rng = Rng::new(config.seed);
    let mut params = ModelParams::new(config.model.clone(), &rng.split("init"))?;
    let reports = run_stages(&mut params, &plans, corpora, &rng.split("train"), Some(&config.out_dir), observer)?;
    Ok((params, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_overrides_and_relative_paths() {
        let text = r#"
seed = 9
out_dir = "runs/a"
preset = "large"
skip_preliminary = true

[data]
captions = "d/captions.jsonl"
qa = "/abs/qa.jsonl"

[model]
llm_layers = 2
"#;
        let cfg = RunConfig::from_toml(text, Path::new("/base")).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.out_dir, Path::new("/base/runs/a"));
        assert_eq!(cfg.data.captions, Path::new("/base/d/captions.jsonl"));
        assert_eq!(cfg.data.qa, Path::new("/abs/qa.jsonl"));
        assert_eq!(cfg.model.llm_layers, 2);
        assert_eq!(cfg.model.llm_dim, ModelConfig::default().llm_dim);
        let plans = cfg.plans();
        assert_eq!(plans.len(), 1);
        assert_eq!(plans[0].peak_lr, 3e-5);
    }

    #[test]
    fn bad_fields_are_config_errors() {
        let base = Path::new("/");
        assert!(matches!(RunConfig::from_toml("out_dir = 3", base), Err(Error::Config(_))));
        let unknown = "out_dir = \"o\"\nbogus = 1\n[data]\ncaptions = \"c\"\nqa = \"q\"\n";
        assert!(matches!(RunConfig::from_toml(unknown, base), Err(Error::Config(_))));
        let bad_warmup = "out_dir = \"o\"\n[data]\ncaptions = \"c\"\nqa = \"q\"\n[advanced]\nname = \"advanced\"\nvision = \"full\"\nprojector = \"full\"\nllm = \"full\"\nepochs = 1\npeak_lr = 0.001\nbatch_size = 8\nwarmup_ratio = 0.9\ncorpus = \"qa\"\n";
        let err = RunConfig::from_toml(bad_warmup, base).unwrap_err();
        assert!(err.to_string().contains("warmup_ratio"), "{err}");
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::with_data_dir(Path::new("/d"), Path::new("/o"));
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap(), Path::new("/x")).unwrap();
        assert_eq!(back, cfg);
    }
}
