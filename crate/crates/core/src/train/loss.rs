//! Masked next-token loss over a batch, with gradients summed in a fixed
//! order regardless of how examples are scheduled across threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geo::Example;
use crate::model::{ExampleGraph, ModelParams, TextLayout, Vocabulary};
use crate::tensor::{Rng, Tensor};

/// Gradients of trainable tensors, in [`ModelParams::trainable_keys`] order.
pub type Grads = Vec<(String, Vec<f64>)>;

fn layout<E: Example + ?Sized>(vocab: &Vocabulary, ex: &E) -> Result<TextLayout> {
    TextLayout::new(vocab, &ex.input_text(), &ex.target_text())
}

/// Mean over target positions of one example, and optionally its gradients
/// scaled by `seed`.
pub fn example_loss<E: Example + ?Sized>(
    params: &ModelParams,
    ex: &E,
    dropout: Option<Rng>,
    seed: Option<f64>,
) -> Result<(f64, Grads)> {
    let l = layout(&Vocabulary::new(), ex)?;
    let mut eg = ExampleGraph::build(params, ex.image(), &l.ids, dropout)?;
    let loss = eg.graph.cross_entropy(eg.logits, &l.targets, &l.loss_mask)?;
    let value = eg.graph.scalar(loss);
    let Some(seed) = seed else {
        return Ok((value, Vec::new()));
    };
    eg.graph.backward_with_seed(loss, seed)?;
    let mut grads = Vec::with_capacity(eg.leaves.len());
    for (key, v) in &eg.leaves {
        let g = eg
            .graph
            .grad(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; eg.graph.value(*v).len()]);
        grads.push((key.clone(), g));
    }
    Ok((value, grads))
}

/// Batch loss: the mean of per-example means. Returned as a scalar tensor.
pub fn autoregressive_loss<E: Example>(params: &ModelParams, batch: &[E]) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::EmptyLoss);
    }
    let losses: Vec<f64> = batch
        .par_iter()
        .map(|ex| example_loss(params, ex, None, None).map(|r| r.0))
        .collect::<Result<_>>()?;
    Ok(Tensor::scalar(losses.iter().sum::<f64>() / batch.len() as f64))
}

/// Batch loss plus gradients summed over examples (each scaled by 1/B).
/// `dropout` seeds per-example adapter dropout when training.
pub fn loss_and_grads<E: Example>(params: &ModelParams, batch: &[&E], dropout: Option<&Rng>) -> Result<(f64, Grads)> {
    if batch.is_empty() {
        return Err(Error::EmptyLoss);
    }
    let scale = 1.0 / batch.len() as f64;
    let per: Vec<(f64, Grads)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| example_loss(params, *ex, dropout.map(|r| r.split_index(i as u64)), Some(scale)))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut acc: Grads = Vec::new();
    for (loss, grads) in per {
        total += loss;
        if acc.is_empty() {
            acc = grads;
            continue;
        }
        for ((k, a), (k2, g)) in acc.iter_mut().zip(grads) {
            debug_assert_eq!(*k, k2);
            a.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
        }
    }
    Ok((total * scale, acc))
}

/// Denominator floor of the relative error, as in [`crate::tensor::grad_check`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Outcome of [`loss_grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Coordinates whose gradient exceeds the floor, i.e. checked relatively.
    pub coords_above_floor: usize,
    /// Largest `|a - n|` over the checked coordinates.
    pub max_abs_error: f64,
    /// Key and flat index of the worst coordinate.
    pub worst: (String, usize),
    /// Analytic and numeric gradient at the worst coordinate.
    pub worst_values: (f64, f64),
}

/// Compares backward gradients of the single-example loss with central
/// differences at `per_tensor` coordinates of every trainable tensor: the
/// largest-gradient coordinate plus random ones, or all of them when
/// `per_tensor` covers the tensor. Relative error is
/// `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn loss_grad_check<E: Example>(
    params: &ModelParams,
    ex: &E,
    step: f64,
    per_tensor: usize,
    rng: &Rng,
) -> Result<GradCheckReport> {
    if !(step > 0.0) || per_tensor == 0 {
        return Err(Error::Usage("grad check needs step > 0 and at least one coordinate".into()));
    }
    let (_, grads) = example_loss(params, ex, None, Some(1.0))?;
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        coords_above_floor: 0,
        max_abs_error: 0.0,
        worst: (String::new(), 0),
        worst_values: (0.0, 0.0),
    };
    for (key, g) in &grads {
        let mut r = rng.split(key);
        let argmax = (0..g.len()).fold(0, |b, i| if g[i].abs() > g[b].abs() { i } else { b });
        let coords: Vec<usize> = if per_tensor >= g.len() {
            (0..g.len()).collect()
        } else {
            std::iter::once(argmax).chain((1..per_tensor).map(|_| r.below(g.len()))).collect()
        };
        for i in coords {
            let orig = probe.tensor_by_key(key)?.data()[i];
            probe.tensor_by_key_mut(key)?.data_mut()[i] = orig + step;
            let plus = example_loss(&probe, ex, None, None)?.0;
            probe.tensor_by_key_mut(key)?.data_mut()[i] = orig - step;
            let minus = example_loss(&probe, ex, None, None)?.0;
            probe.tensor_by_key_mut(key)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let abs = (g[i] - numeric).abs();
            let rel = abs / g[i].abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.coords_checked += 1;
            report.coords_above_floor += usize::from(g[i].abs() > GRAD_CHECK_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.0.is_empty() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = (key.clone(), i);
                report.worst_values = (g[i], numeric);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::RasterImage;
    use crate::model::{ModelConfig, Mode, Group};

    pub(crate) struct Toy {
        pub image: RasterImage,
        pub input: String,
        pub target: String,
    }

    impl Example for Toy {
        fn image(&self) -> &RasterImage {
            &self.image
        }
        fn input_text(&self) -> String {
            self.input.clone()
        }
        fn target_text(&self) -> String {
            self.target.clone()
        }
    }

    fn toy(seed: u64, target: &str) -> Toy {
        let mut r = Rng::new(seed);
        Toy {
            image: RasterImage::from_pixels(16, (0..256).map(|_| r.uniform()).collect()).unwrap(),
            input: "Find x.".into(),
            target: target.into(),
        }
    }

    #[test]
    fn batch_loss_is_mean_of_single_losses() {
        let p = ModelParams::new(ModelConfig::tiny(), &Rng::new(1)).unwrap();
        let batch = vec![toy(1, "ab"), toy(2, "The answer is (C)."), toy(3, "7")];
        let whole = autoregressive_loss(&p, &batch).unwrap().data()[0];
        let singles: Vec<f64> = batch
            .iter()
            .map(|b| autoregressive_loss(&p, std::slice::from_ref(b)).unwrap().data()[0])
            .collect();
        assert!((whole - singles.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_head_gives_ln_vocab() {
        let mut p = ModelParams::new(ModelConfig::tiny(), &Rng::new(1)).unwrap();
        p.get_mut("llm.head.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let loss = autoregressive_loss(&p, &[toy(1, "B")]).unwrap().data()[0];
        // "B" then EOS: two uniform positions, each ln 80.
        assert!((loss - 80f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn grads_only_for_trainable_tensors() {
        let mut p = ModelParams::new(ModelConfig::tiny(), &Rng::new(1)).unwrap();
        p.set_mode(Group::Projector, Mode::Full);
        let b = toy(4, "xy");
        let (_, grads) = loss_and_grads(&p, &[&b], None).unwrap();
        assert!(!grads.is_empty());
        assert!(grads.iter().all(|(k, _)| k.starts_with("projector.")));
        assert_eq!(grads.len(), p.trainable_keys().len());
    }

    #[test]
    fn whole_model_gradients_match_finite_differences() {
        use crate::train::{advanced, apply_stage_plan, Preset};
        let mut p = ModelParams::new(ModelConfig::tiny(), &Rng::new(2)).unwrap();
        let mut plan = advanced(Preset::Desk);
        plan.vision = Mode::Full;
        apply_stage_plan(&mut p, &plan, &Rng::new(0)).unwrap();
        let r = loss_grad_check(&p, &toy(4, "AB is 4."), 1e-4, 3, &Rng::new(1)).unwrap();
        // Truncation at h = 1e-4 is O(h²); rounding noise swamps the relative
        // error only on gradients near the floor.
        assert!(r.max_abs_error < 1e-6, "{r:?}");
        assert!(r.coords_checked > 50 && r.coords_above_floor > 30, "{r:?}");
    }
}
