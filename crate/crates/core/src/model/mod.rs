//! Toy vision-language model: patch transformer, two-layer projector and a
//! causal character-level decoder, all parameters in one named store.

mod forward;
mod infer;
pub mod vocab;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use forward::{
    encode_image, forward, patchify, project, AttentionRecord, ExampleGraph, LayerAttention, TextLayout,
};
pub use infer::{generate, generate_ids, greedy_decode, Generator};
pub use vocab::Vocabulary;

use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::tensor::{Rng, Tensor};

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub vis_dim: usize,
    pub vis_layers: usize,
    pub vis_heads: usize,
    pub llm_dim: usize,
    pub llm_layers: usize,
    pub llm_heads: usize,
    pub proj_hidden: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            vis_dim: 64,
            vis_layers: 2,
            vis_heads: 4,
            llm_dim: 128,
            llm_layers: 4,
            llm_heads: 4,
            proj_hidden: 128,
            vocab_size: 80,
            max_seq_len: 320,
        }
    }
}

impl ModelConfig {
    /// A very small model for gradient checks and unit tests.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 16,
            patch_size: 8,
            vis_dim: 8,
            vis_layers: 1,
            vis_heads: 2,
            llm_dim: 8,
            llm_layers: 1,
            llm_heads: 2,
            proj_hidden: 8,
            vocab_size: 80,
            max_seq_len: 64,
        }
    }

    pub fn num_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// Rows before the first text token: IMG, patches, SEP.
    pub fn prefix_len(&self) -> usize {
        self.num_patches() + 2
    }

    /// Longest text (in tokens) that still fits after the visual prefix.
    pub fn max_text_len(&self) -> usize {
        self.max_seq_len.saturating_sub(self.prefix_len())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        for (name, dim, heads) in [
            ("vis", self.vis_dim, self.vis_heads),
            ("llm", self.llm_dim, self.llm_heads),
        ] {
            if dim == 0 || heads == 0 || dim % heads != 0 {
                return bad(format!("{name}_dim {dim} is not divisible by {name}_heads {heads}"));
            }
        }
        if self.vis_layers == 0 || self.llm_layers == 0 || self.proj_hidden == 0 {
            return bad("layer counts and proj_hidden must be positive".into());
        }
        let vocab = Vocabulary::new().size();
        if self.vocab_size != vocab {
            return bad(format!("vocab_size must be {vocab}, got {}", self.vocab_size));
        }
        if self.max_seq_len < self.prefix_len() + 2 {
            return bad(format!(
                "max_seq_len {} leaves no room for text after {} visual rows",
                self.max_seq_len,
                self.prefix_len()
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Vision,
    Projector,
    Llm,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Vision, Group::Projector, Group::Llm];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Vision => "vision",
            Group::Projector => "projector",
            Group::Llm => "llm",
        }
    }

    /// Group owning a parameter, read from its name prefix.
    pub fn of(name: &str) -> Option<Group> {
        let head = name.split('.').next()?;
        Group::ALL.into_iter().find(|g| g.as_str() == head)
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter group {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Frozen,
    Full,
    Lora,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Frozen => "frozen",
            Mode::Full => "full",
            Mode::Lora => "lora",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" | "freeze" => Ok(Mode::Frozen),
            "full" => Ok(Mode::Full),
            "lora" => Ok(Mode::Lora),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

/// Suffixes naming an adapter's factors in the trainable-key namespace.
pub const LORA_A: &str = ".lora_a";
pub const LORA_B: &str = ".lora_b";

/// All model weights, keyed by dotted name. The first name component is the
/// group, so every tensor belongs to exactly one group by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
    modes: [Mode; 3],
    adapters: BTreeMap<String, LoraAdapter>,
    training: bool,
}

impl ModelParams {
    /// Random initialization; every tensor draws from its own named stream.
    pub fn new(config: ModelConfig, rng: &Rng) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in param_shapes(&config) {
            let t = init_tensor(&name, &shape, &config, &mut rng.split(&name));
            tensors.insert(name, t);
        }
        Ok(ModelParams {
            config,
            tensors,
            modes: [Mode::Frozen; 3],
            adapters: BTreeMap::new(),
            training: false,
        })
    }

    /// Reassembles a store from parts; used by checkpoint loading.
    pub fn from_parts(
        config: ModelConfig,
        tensors: BTreeMap<String, Tensor>,
        modes: [Mode; 3],
        adapters: BTreeMap<String, LoraAdapter>,
    ) -> Result<Self> {
        config.validate()?;
        let expected = param_shapes(&config);
        if expected.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &expected {
            match tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => return Err(Error::shape("parameter", t.shape(), shape)),
                None => return Err(Error::Config(format!("missing tensor {name}"))),
            }
        }
        for (base, a) in &adapters {
            let w = tensors
                .get(base)
                .ok_or_else(|| Error::Config(format!("adapter for unknown tensor {base}")))?;
            a.check_against(w)?;
        }
        Ok(ModelParams {
            config,
            tensors,
            modes,
            adapters,
            training: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Internal(format!("no parameter named {name}")))
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Internal(format!("no parameter named {name}")))
    }

    /// Names of the tensors in one group, sorted.
    pub fn group_names(&self, group: Group) -> Vec<&str> {
        self.tensors
            .keys()
            .filter(|n| Group::of(n) == Some(group))
            .map(String::as_str)
            .collect()
    }

    pub fn mode(&self, group: Group) -> Mode {
        self.modes[group.index()]
    }

    pub fn modes(&self) -> [Mode; 3] {
        self.modes
    }

    pub(crate) fn set_mode(&mut self, group: Group, mode: Mode) {
        self.modes[group.index()] = mode;
    }

    pub fn adapters(&self) -> &BTreeMap<String, LoraAdapter> {
        &self.adapters
    }

    pub(crate) fn adapters_mut(&mut self) -> &mut BTreeMap<String, LoraAdapter> {
        &mut self.adapters
    }

    pub fn adapter(&self, base: &str) -> Option<&LoraAdapter> {
        self.adapters.get(base)
    }

    /// Enables adapter dropout.
    pub fn set_training(&mut self, on: bool) {
        self.training = on;
    }

    pub fn training(&self) -> bool {
        self.training
    }

    /// Whether a base tensor is updated under the current modes.
    pub fn is_trainable(&self, name: &str) -> bool {
        Group::of(name).is_some_and(|g| self.mode(g) == Mode::Full)
    }

    /// Keys of every tensor the optimizer updates: base names of Full
    /// groups, then adapter factors of LoRA groups.
    pub fn trainable_keys(&self) -> Vec<String> {
        let mut keys: Vec<String> = self
            .tensors
            .keys()
            .filter(|n| self.is_trainable(n))
            .cloned()
            .collect();
        for base in self.adapters.keys() {
            if Group::of(base).is_some_and(|g| self.mode(g) == Mode::Lora) {
                keys.push(format!("{base}{LORA_A}"));
                keys.push(format!("{base}{LORA_B}"));
            }
        }
        keys
    }

    /// Resolves a trainable key to its tensor.
    pub fn tensor_by_key(&self, key: &str) -> Result<&Tensor> {
        if let Some(base) = key.strip_suffix(LORA_A) {
            return self.adapter_or_err(base).map(|a| &a.a);
        }
        if let Some(base) = key.strip_suffix(LORA_B) {
            return self.adapter_or_err(base).map(|a| &a.b);
        }
        self.get(key)
    }

    pub(crate) fn tensor_by_key_mut(&mut self, key: &str) -> Result<&mut Tensor> {
        let missing = || Error::Internal(format!("no adapter for {key}"));
        if let Some(base) = key.strip_suffix(LORA_A) {
            return self.adapters.get_mut(base).map(|a| &mut a.a).ok_or_else(missing);
        }
        if let Some(base) = key.strip_suffix(LORA_B) {
            return self.adapters.get_mut(base).map(|a| &mut a.b).ok_or_else(missing);
        }
        self.get_mut(key)
    }

    fn adapter_or_err(&self, base: &str) -> Result<&LoraAdapter> {
        self.adapters
            .get(base)
            .ok_or_else(|| Error::Internal(format!("no adapter for {base}")))
    }

    /// SHA-256 over the names and values of a group's base tensors.
    pub fn group_checksum(&self, group: Group) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for name in self.group_names(group) {
            h.update(name.as_bytes());
            for v in self.tensors[name].data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        crate::tensor::hex(&h.finalize())
    }

    pub fn checksums(&self) -> BTreeMap<Group, String> {
        Group::ALL.into_iter().map(|g| (g, self.group_checksum(g))).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

fn block_shapes(prefix: &str, layers: usize, dim: usize, out: &mut Vec<(String, Vec<usize>)>) {
    for l in 0..layers {
        let p = format!("{prefix}.layers.{l}");
        for ln in ["ln1", "ln2"] {
            out.push((format!("{p}.{ln}.gain"), vec![dim]));
            out.push((format!("{p}.{ln}.bias"), vec![dim]));
        }
        for m in ["q", "k", "v", "o"] {
            out.push((format!("{p}.attn.{m}.weight"), vec![dim, dim]));
            out.push((format!("{p}.attn.{m}.bias"), vec![dim]));
        }
        out.push((format!("{p}.mlp.fc1.weight"), vec![4 * dim, dim]));
        out.push((format!("{p}.mlp.fc1.bias"), vec![4 * dim]));
        out.push((format!("{p}.mlp.fc2.weight"), vec![dim, 4 * dim]));
        out.push((format!("{p}.mlp.fc2.bias"), vec![dim]));
    }
    out.push((format!("{prefix}.ln_final.gain"), vec![dim]));
    out.push((format!("{prefix}.ln_final.bias"), vec![dim]));
}

/// Every parameter name with its shape.
pub fn param_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = vec![
        ("vision.patch_embed.weight".to_string(), vec![c.vis_dim, c.patch_dim()]),
        ("vision.patch_embed.bias".to_string(), vec![c.vis_dim]),
        ("vision.pos_embed".to_string(), vec![c.num_patches(), c.vis_dim]),
    ];
    block_shapes("vision", c.vis_layers, c.vis_dim, &mut out);
    out.extend([
        ("projector.fc1.weight".to_string(), vec![c.proj_hidden, c.vis_dim]),
        ("projector.fc1.bias".to_string(), vec![c.proj_hidden]),
        ("projector.fc2.weight".to_string(), vec![c.llm_dim, c.proj_hidden]),
        ("projector.fc2.bias".to_string(), vec![c.llm_dim]),
        ("llm.tok_embed".to_string(), vec![c.vocab_size, c.llm_dim]),
        ("llm.pos_embed".to_string(), vec![c.max_seq_len, c.llm_dim]),
    ]);
    block_shapes("llm", c.llm_layers, c.llm_dim, &mut out);
    out.push(("llm.head.weight".to_string(), vec![c.vocab_size, c.llm_dim]));
    out
}

fn init_tensor(name: &str, shape: &[usize], c: &ModelConfig, rng: &mut Rng) -> Tensor {
    if name.ends_with(".gain") {
        return Tensor::from_fn(shape, |_| 1.0);
    }
    if name.ends_with(".bias") {
        return Tensor::zeros(shape);
    }
    let layers = if name.starts_with("vision.") { c.vis_layers } else { c.llm_layers };
    let residual_out = name.ends_with("attn.o.weight") || name.ends_with("mlp.fc2.weight");
    let std = if residual_out {
        INIT_STD / ((2 * layers) as f64).sqrt()
    } else {
        INIT_STD
    };
    Tensor::randn(shape, std, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_has_64_patches() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.num_patches(), 64);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ModelConfig::default();
        c.patch_size = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.llm_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.max_seq_len = 60;
        assert!(c.validate().is_err());
    }

    #[test]
    fn groups_partition_every_tensor() {
        let p = ModelParams::new(ModelConfig::tiny(), &Rng::new(0)).unwrap();
        let total: usize = Group::ALL.iter().map(|&g| p.group_names(g).len()).sum();
        assert_eq!(total, p.tensors().len());
        for n in p.tensors().keys() {
            assert!(Group::of(n).is_some(), "{n}");
        }
    }

    #[test]
    fn init_follows_the_recipe() {
        let p = ModelParams::new(ModelConfig::default(), &Rng::new(1)).unwrap();
        assert!(p.get("llm.layers.0.ln1.gain").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(p.get("llm.layers.0.attn.q.bias").unwrap().data().iter().all(|&v| v == 0.0));
        let std = |name: &str| {
            let d = p.get(name).unwrap().data();
            (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt()
        };
        assert!((std("llm.layers.0.mlp.fc1.weight") - 0.02).abs() < 0.001);
        assert!((std("llm.layers.0.mlp.fc2.weight") - 0.02 / 8f64.sqrt()).abs() < 0.0005);
    }

    #[test]
    fn fresh_model_trains_nothing() {
        let p = ModelParams::new(ModelConfig::tiny(), &Rng::new(0)).unwrap();
        assert!(p.trainable_keys().is_empty());
    }
}
