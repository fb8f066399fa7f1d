use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// AdamW moment buffers for the tensors trainable under the active plan.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    /// Zeroed buffers for every currently trainable tensor.
    pub fn for_params(params: &ModelParams) -> Result<Self> {
        let mut m = BTreeMap::new();
        for key in params.trainable_keys() {
            m.insert(key.clone(), vec![0.0; params.tensor_by_key(&key)?.len()]);
        }
        Ok(OptimizerState {
            v: m.clone(),
            m,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.m.keys()
    }
}

/// One bias-corrected AdamW update with decoupled weight decay, then clears
/// the gradients it consumed.
pub fn adamw_step(opt: &mut OptimizerState, params: &mut ModelParams, lr: f64, weight_decay: f64) -> Result<()> {
    for key in opt.m.keys() {
        if params.tensor_by_key(key)?.grad().is_none() {
            return Err(Error::Usage(format!("no gradient for trainable tensor {key}")));
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let (b1, b2, eps) = (opt.beta1, opt.beta2, opt.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (key, m) in opt.m.iter_mut() {
        let v = opt.v.get_mut(key).expect("moment buffers share keys");
        let tensor = params.tensor_by_key_mut(key)?;
        let g = tensor.take_grad().expect("checked above");
        for (i, w) in tensor.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            *w -= lr * (update + weight_decay * *w);
        }
    }
    Ok(())
}
