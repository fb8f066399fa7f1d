//! Low-rank adapters: `W x + (alpha / r) · B (A drop(x))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Group, ModelParams};
use crate::tensor::kernels::gemm;
use crate::tensor::{Rng, Tensor};

const A_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Substrings matched against parameter names within the group.
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 16.0,
            dropout: 0.05,
            targets: vec!["attn.q.weight".into(), "attn.v.weight".into()],
        }
    }
}

impl LoraConfig {
    /// Rank 64, alpha 16, dropout 0.05.
    pub fn large() -> Self {
        LoraConfig {
            rank: 64,
            ..LoraConfig::default()
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora rank must be positive".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("lora alpha must be positive, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("lora dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("lora targets are empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub base_name: String,
    /// `[r × d_in]`
    pub a: Tensor,
    /// `[d_out × r]`
    pub b: Tensor,
    pub alpha: f64,
    pub dropout: f64,
}

impl LoraAdapter {
    /// Fresh adapter for a `[d_out × d_in]` matrix: `A ~ N(0, 0.02)`, `B = 0`.
    pub fn new(base_name: &str, d_out: usize, d_in: usize, config: &LoraConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if config.rank > d_out.min(d_in) {
            return Err(Error::Rank {
                name: base_name.to_string(),
                rank: config.rank,
                limit: d_out.min(d_in),
            });
        }
        Ok(LoraAdapter {
            base_name: base_name.to_string(),
            a: Tensor::randn(&[config.rank, d_in], A_STD, rng),
            b: Tensor::zeros(&[d_out, config.rank]),
            alpha: config.alpha,
            dropout: config.dropout,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub(crate) fn check_against(&self, w: &Tensor) -> Result<()> {
        let r = self.rank();
        let ok = w.shape().len() == 2
            && self.a.shape() == [r, w.cols()]
            && self.b.shape() == [w.rows(), r];
        if ok {
            Ok(())
        } else {
            Err(Error::shape("lora", w.shape(), &[self.b.rows(), self.a.cols()]))
        }
    }

    /// `scaling · B · A`, shaped like the base matrix.
    pub fn delta(&self) -> Vec<f64> {
        let (d_out, r, d_in) = (self.b.rows(), self.rank(), self.a.cols());
        let mut ba = vec![0.0; d_out * d_in];
        gemm(self.b.data(), self.a.data(), &mut ba, d_out, r, d_in);
        let s = self.scaling();
        ba.iter_mut().for_each(|v| *v *= s);
        ba
    }
}

/// Attaches adapters to every matrix of `group` whose name contains one of
/// the target patterns. Returns the adapted base names.
pub fn inject(params: &mut ModelParams, group: Group, config: &LoraConfig, rng: &Rng) -> Result<Vec<String>> {
    config.validate()?;
    let names: Vec<String> = params
        .group_names(group)
        .into_iter()
        .filter(|n| config.targets.iter().any(|t| n.contains(t.as_str())))
        .map(str::to_string)
        .collect();
    if names.is_empty() {
        return Err(Error::Config(format!(
            "lora targets {:?} match nothing in group {group}",
            config.targets
        )));
    }
    let mut fresh = Vec::with_capacity(names.len());
    for name in &names {
        let w = params.get(name)?;
        if w.shape().len() != 2 {
            return Err(Error::Config(format!("lora target {name} is not a matrix")));
        }
        let adapter = LoraAdapter::new(name, w.rows(), w.cols(), config, &mut rng.split(name))?;
        fresh.push(adapter);
    }
    for a in fresh {
        params.adapters_mut().insert(a.base_name.clone(), a);
    }
    Ok(names)
}

/// `W + scaling · B · A`.
pub fn merge(adapter: &LoraAdapter, w: &Tensor) -> Result<Tensor> {
    adapter.check_against(w)?;
    let data = w.data().iter().zip(adapter.delta()).map(|(x, d)| x + d).collect();
    Tensor::new(w.shape().to_vec(), data)
}

/// `W_merged − scaling · B · A`.
pub fn unmerge(adapter: &LoraAdapter, w_merged: &Tensor) -> Result<Tensor> {
    adapter.check_against(w_merged)?;
    let data = w_merged.data().iter().zip(adapter.delta()).map(|(x, d)| x - d).collect();
    Tensor::new(w_merged.shape().to_vec(), data)
}

/// Folds every adapter of `group` into its base matrix and drops it.
pub fn merge_group(params: &mut ModelParams, group: Group) -> Result<usize> {
    let bases: Vec<String> = params
        .adapters()
        .keys()
        .filter(|b| Group::of(b) == Some(group))
        .cloned()
        .collect();
    for base in &bases {
        let adapter = params.adapters_mut().remove(base).expect("listed above");
        let merged = merge(&adapter, params.get(base)?)?;
        *params.get_mut(base)? = merged;
    }
    Ok(bases.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn scaling_is_alpha_over_rank() {
        assert_eq!(LoraConfig::large().scaling(), 0.25);
        assert_eq!(LoraConfig::default().scaling(), 2.0);
    }

    #[test]
    fn query_value_targets_on_two_layers_give_four_adapters() {
        let mut c = ModelConfig::tiny();
        c.vis_layers = 2;
        let mut p = ModelParams::new(c, &Rng::new(0)).unwrap();
        let cfg = LoraConfig {
            rank: 2,
            ..LoraConfig::default()
        };
        let names = inject(&mut p, Group::Vision, &cfg, &Rng::new(1)).unwrap();
        assert_eq!(names.len(), 4);
        for a in p.adapters().values() {
            assert!(a.b.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn unmatched_targets_and_oversized_rank_are_rejected() {
        let mut p = ModelParams::new(ModelConfig::tiny(), &Rng::new(0)).unwrap();
        let cfg = LoraConfig {
            targets: vec!["nothing.here".into()],
            ..LoraConfig::default()
        };
        assert!(matches!(inject(&mut p, Group::Vision, &cfg, &Rng::new(1)), Err(Error::Config(_))));
        let cfg = LoraConfig {
            rank: 9,
            ..LoraConfig::default()
        };
        assert!(matches!(inject(&mut p, Group::Vision, &cfg, &Rng::new(1)), Err(Error::Rank { .. })));
    }

    fn random_adapter(seed: u64) -> (LoraAdapter, Tensor) {
        let mut rng = Rng::new(seed);
        let cfg = LoraConfig {
            rank: 3,
            ..LoraConfig::default()
        };
        let mut a = LoraAdapter::new("w", 5, 7, &cfg, &mut rng).unwrap();
        a.b = Tensor::randn(&[5, 3], 1.0, &mut rng);
        (a, Tensor::randn(&[5, 7], 1.0, &mut rng))
    }

    #[test]
    fn zero_b_merge_is_identity() {
        let (mut a, w) = random_adapter(3);
        a.b = Tensor::zeros(&[5, 3]);
        assert_eq!(merge(&a, &w).unwrap(), w);
        assert_eq!(unmerge(&a, &w).unwrap(), w);
    }

    #[test]
    fn merged_matches_two_path_product() {
        for seed in 0..20 {
            let (a, w) = random_adapter(seed);
            let merged = merge(&a, &w).unwrap();
            let x = Tensor::randn(&[7], 1.0, &mut Rng::new(seed + 99));
            for o in 0..5 {
                let m: f64 = (0..7).map(|i| merged.at(o, i) * x.data()[i]).sum();
                let base: f64 = (0..7).map(|i| w.at(o, i) * x.data()[i]).sum();
                let ax: Vec<f64> = (0..3).map(|r| (0..7).map(|i| a.a.at(r, i) * x.data()[i]).sum()).collect();
                let bax: f64 = (0..3).map(|r| a.b.at(o, r) * ax[r]).sum();
                assert!((m - (base + a.scaling() * bax)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (a, _) = random_adapter(1);
        assert!(merge(&a, &Tensor::zeros(&[7, 5])).is_err());
    }

    proptest::proptest! {
        #[test]
        fn unmerge_inverts_merge(seed in 0u64..100) {
            let (a, w) = random_adapter(seed);
            let back = unmerge(&a, &merge(&a, &w).unwrap()).unwrap();
            for (x, y) in back.data().iter().zip(w.data()) {
                proptest::prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
