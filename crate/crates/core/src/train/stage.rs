use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use super::loss::{loss_and_grads, Grads};
use super::{adamw_step, apply_stage_plan, lr_at, StagePlan};
use crate::error::{Error, Result};
use crate::geo::Example;
use crate::model::{Group, Mode, ModelParams};
use crate::tensor::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub stage: String,
    pub modes: [Mode; 3],
    /// Batch loss at every optimizer step.
    pub losses: Vec<f64>,
    pub wall_secs: f64,
    pub checksums_before: BTreeMap<Group, String>,
    pub checksums_after: BTreeMap<Group, String>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    /// Frozen groups whose checksum changed during the stage.
    pub fn frozen_violations(&self) -> Vec<Group> {
        Group::ALL
            .into_iter()
            .filter(|&g| self.modes[g as usize] == Mode::Frozen)
            .filter(|g| self.checksums_before[g] != self.checksums_after[g])
            .collect()
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "stage {}", self.stage);
        for g in Group::ALL {
            let _ = writeln!(
                s,
                "  {:<9} {:<6} {} -> {}",
                g.as_str(),
                self.modes[g as usize].as_str(),
                &self.checksums_before[&g][..12],
                &self.checksums_after[&g][..12]
            );
        }
        let _ = writeln!(s, "  steps {}", self.losses.len());
        if let (Some(first), Some(last)) = (self.losses.first(), self.losses.last()) {
            let _ = writeln!(s, "  loss {first:.6} -> {last:.6}");
        }
        let _ = writeln!(s, "  wall {:.1}s", self.wall_secs);
        s
    }

    /// One `step loss` pair per line, losses at full precision.
    pub fn trace(&self) -> String {
        self.losses
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{i} {l:?}\n"))
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let txt = dir.join(format!("{}_report.txt", self.stage));
        std::fs::write(&txt, self.summary()).map_err(|e| Error::io(&txt, e))?;
        let tr = dir.join(format!("{}_loss.txt", self.stage));
        std::fs::write(&tr, self.trace()).map_err(|e| Error::io(&tr, e))
    }
}

fn clip(grads: &mut Grads, max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|(_, g)| g.iter_mut().for_each(|v| *v *= s));
    }
}

/// Progress callbacks for [`run_stage`]. `()` ignores everything.
pub trait StageObserver {
    fn step(&mut self, _step: usize, _total: usize, _loss: f64) {}

    /// Called after every completed epoch, e.g. to checkpoint.
    fn epoch_end(&mut self, _epoch: usize, _params: &ModelParams) -> Result<()> {
        Ok(())
    }
}

impl StageObserver for () {}

/// Applies `plan`, then runs its epochs over `corpus`: a fresh permutation per
/// epoch, one AdamW step per batch at the scheduled rate.
pub fn run_stage<E: Example>(
    params: &mut ModelParams,
    corpus: &[E],
    plan: &StagePlan,
    rng: &Rng,
    observer: &mut impl StageObserver,
) -> Result<TrainReport> {
    if corpus.is_empty() {
        return Err(Error::Config(format!("stage {}: corpus is empty", plan.name)));
    }
    let mut opt = apply_stage_plan(params, plan, &rng.split("lora"))?;
    let checksums_before = params.checksums();
    let start = Instant::now();
    let total = plan.total_steps(corpus.len());
    let mut losses = Vec::with_capacity(total);
    params.set_training(true);
    let mut step = 0;
    'epochs: for epoch in 0..plan.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        rng.split("shuffle").split_index(epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(plan.batch_size) {
            if step >= total {
                break 'epochs;
            }
            let batch: Vec<&E> = chunk.iter().map(|&i| &corpus[i]).collect();
            let dropout = rng.split("dropout").split_index(step as u64);
            let result = loss_and_grads(params, &batch, Some(&dropout));
            let (loss, mut grads) = match result {
                Ok(r) => r,
                Err(e) => {
                    params.set_training(false);
                    return Err(e);
                }
            };
            if let Some(c) = plan.grad_clip {
                clip(&mut grads, c);
            }
            for (key, g) in grads {
                params.tensor_by_key_mut(&key)?.accumulate_grad(&g)?;
            }
            adamw_step(&mut opt, params, lr_at(step, total, plan)?, plan.weight_decay)?;
            losses.push(loss);
            observer.step(step, total, loss);
            step += 1;
        }
        params.set_training(false);
        observer.epoch_end(epoch, params)?;
        params.set_training(true);
    }
    params.set_training(false);
    Ok(TrainReport {
        stage: plan.name.clone(),
        modes: params.modes(),
        losses,
        wall_secs: start.elapsed().as_secs_f64(),
        checksums_before,
        checksums_after: params.checksums(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::RasterImage;
    use crate::model::ModelConfig;
    use crate::train::{advanced, preliminary, Preset};

    struct Toy(RasterImage, &'static str);

    impl Example for Toy {
        fn image(&self) -> &RasterImage {
            &self.0
        }
        fn input_text(&self) -> String {
            "Describe.".into()
        }
        fn target_text(&self) -> String {
            self.1.into()
        }
    }

    fn corpus() -> Vec<Toy> {
        (0..6)
            .map(|i| {
                let mut r = Rng::new(i);
                let img = RasterImage::from_pixels(16, (0..256).map(|_| r.uniform()).collect()).unwrap();
                Toy(img, ["AB is 4.", "Angle 1 is 30."][i as usize % 2])
            })
            .collect()
    }

    fn small(plan: StagePlan) -> StagePlan {
        let mut plan = StagePlan {
            batch_size: 2,
            epochs: 3,
            max_steps: Some(6),
            ..plan
        };
        if let Some(l) = plan.lora.as_mut() {
            l.rank = 2;
        }
        plan
    }

    #[test]
    fn zero_steps_leave_params_unchanged() {
        let mut p = ModelParams::new(ModelConfig::tiny(), &Rng::new(0)).unwrap();
        let before = p.clone();
        let plan = StagePlan {
            max_steps: Some(0),
            ..preliminary(Preset::Desk)
        };
        let r = run_stage(&mut p, &corpus(), &plan, &Rng::new(1), &mut ()).unwrap();
        assert!(r.losses.is_empty());
        assert_eq!(p.tensors(), before.tensors());
    }

    #[test]
    fn frozen_llm_is_bit_identical() {
        let mut p = ModelParams::new(ModelConfig::tiny(), &Rng::new(0)).unwrap();
        let r = run_stage(&mut p, &corpus(), &small(preliminary(Preset::Desk)), &Rng::new(1), &mut ()).unwrap();
        assert_eq!(r.losses.len(), 6);
        assert!(r.frozen_violations().is_empty());
        assert_eq!(r.checksums_before[&Group::Llm], r.checksums_after[&Group::Llm]);
        assert_ne!(r.checksums_before[&Group::Vision], r.checksums_after[&Group::Vision]);
    }

    #[test]
    fn same_seed_same_trace() {
        let run = || {
            let mut p = ModelParams::new(ModelConfig::tiny(), &Rng::new(0)).unwrap();
            let r = run_stage(&mut p, &corpus(), &small(advanced(Preset::Desk)), &Rng::new(7), &mut ()).unwrap();
            (r.losses, p)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(pa, pb);
    }

    #[test]
    fn epoch_hook_fires_and_empty_corpus_fails() {
        struct Count(usize, usize);
        impl StageObserver for Count {
            fn step(&mut self, _: usize, _: usize, _: f64) {
                self.0 += 1;
            }
            fn epoch_end(&mut self, _: usize, p: &ModelParams) -> Result<()> {
                assert!(!p.training());
                self.1 += 1;
                Ok(())
            }
        }
        let mut p = ModelParams::new(ModelConfig::tiny(), &Rng::new(0)).unwrap();
        let plan = StagePlan {
            batch_size: 3,
            epochs: 2,
            ..preliminary(Preset::Desk)
        };
        let mut c = Count(0, 0);
        run_stage(&mut p, &corpus(), &plan, &Rng::new(1), &mut c).unwrap();
        assert_eq!((c.0, c.1), (4, 2));
        let empty: Vec<Toy> = Vec::new();
        assert!(matches!(run_stage(&mut p, &empty, &plan, &Rng::new(1), &mut ()), Err(Error::Config(_))));
    }
}
