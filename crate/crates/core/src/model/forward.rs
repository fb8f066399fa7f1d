use std::collections::HashMap;

use super::vocab::{Vocabulary, BOS, EOS, IMG, PAD, SEP};
use super::{Group, Mode, ModelParams, LN_EPS, LORA_A, LORA_B};
use crate::error::{Error, Result};
use crate::geo::RasterImage;
use crate::tensor::{Graph, Rng, Tensor, Var};

/// Splits a square image into non-overlapping `p×p` patches, row-major, each
/// flattened row-major.
pub fn patchify(image: &RasterImage, p: usize) -> Result<Tensor> {
    let s = image.side();
    if p == 0 || s == 0 || s % p != 0 {
        return Err(Error::shape("patchify", &[s, s], &[p, p]));
    }
    let n = s / p;
    let mut data = Vec::with_capacity(s * s);
    for py in 0..n {
        for px in 0..n {
            for y in 0..p {
                for x in 0..p {
                    data.push(image.get(px * p + x, py * p + y));
                }
            }
        }
    }
    Tensor::new(vec![n * n, p * p], data)
}

/// Head-wise softmax weights of each vision layer, `[heads × T × T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub tokens: usize,
    pub layers: Vec<LayerAttention>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerAttention {
    pub heads: usize,
    pub probs: Vec<f64>,
}

impl AttentionRecord {
    /// Row `i` of head `h` in `layer`.
    pub fn row(&self, layer: usize, h: usize, i: usize) -> &[f64] {
        let t = self.tokens;
        &self.layers[layer].probs[(h * t + i) * t..(h * t + i + 1) * t]
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_error(&self) -> f64 {
        let t = self.tokens;
        self.layers
            .iter()
            .flat_map(|l| l.probs.chunks(t))
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Token ids of one training text: `BOS input \n target EOS`, with next-token
/// targets and a mask selecting the target positions.
#[derive(Clone, Debug, PartialEq)]
pub struct TextLayout {
    pub ids: Vec<usize>,
    pub targets: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl TextLayout {
    pub fn new(vocab: &Vocabulary, input: &str, target: &str) -> Result<Self> {
        if target.is_empty() {
            return Err(Error::EmptyLoss);
        }
        let mut ids = Self::prompt(vocab, input)?;
        let first_target = ids.len();
        ids.extend(vocab.encode(target)?);
        ids.push(EOS);
        let n = ids.len();
        let targets = (0..n).map(|j| if j + 1 < n { ids[j + 1] } else { PAD }).collect();
        let loss_mask = (0..n).map(|j| j + 1 >= first_target && j + 1 < n).collect();
        Ok(TextLayout { ids, targets, loss_mask })
    }

    /// `BOS input \n`, the generation prefix.
    pub fn prompt(vocab: &Vocabulary, input: &str) -> Result<Vec<usize>> {
        let mut ids = vec![BOS];
        ids.extend(vocab.encode(input)?);
        ids.push(vocab.id('\n').expect("newline is in the vocabulary"));
        Ok(ids)
    }
}

/// A built forward pass with everything needed for backward.
pub struct ExampleGraph {
    pub graph: Graph,
    /// `[text_len × vocab]`
    pub logits: Var,
    /// Attention nodes of the vision layers, in order.
    pub vision_attention: Vec<Var>,
    /// Trainable leaves, keyed as in [`ModelParams::trainable_keys`].
    pub leaves: Vec<(String, Var)>,
}

impl ExampleGraph {
    /// Builds the full multimodal forward. `dropout` supplies adapter dropout
    /// masks when the params are in training mode.
    pub fn build(params: &ModelParams, image: &RasterImage, tokens: &[usize], dropout: Option<Rng>) -> Result<Self> {
        let c = params.config();
        if tokens.is_empty() {
            return Err(Error::Usage("forward needs at least one text token".into()));
        }
        let total = c.prefix_len() + tokens.len();
        if total > c.max_seq_len {
            return Err(Error::Length {
                len: total,
                max: c.max_seq_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::Usage(format!("token id {bad} outside vocabulary of {}", c.vocab_size)));
        }
        let mut b = Builder::new(params, dropout);
        let (vis, attn) = b.vision(image)?;
        let proj = b.projector(vis)?;
        let logits = b.decoder(proj, tokens)?;
        Ok(ExampleGraph {
            graph: b.g,
            logits,
            vision_attention: attn,
            leaves: b.leaves,
        })
    }

    pub fn attention_record(&self) -> AttentionRecord {
        record_from(&self.graph, &self.vision_attention)
    }
}

fn record_from(g: &Graph, attn: &[Var]) -> AttentionRecord {
    let tokens = attn.first().map_or(0, |&v| g.shape(v)[0]);
    let layers = attn
        .iter()
        .map(|&v| {
            let (heads, probs) = g.attention_probs(v).expect("attention node");
            LayerAttention {
                heads,
                probs: probs.to_vec(),
            }
        })
        .collect();
    AttentionRecord { tokens, layers }
}

/// Next-token logits for every text position, `[len × vocab]`.
pub fn forward(params: &ModelParams, image: &RasterImage, tokens: &[usize]) -> Result<Tensor> {
    let eg = ExampleGraph::build(params, image, tokens, None)?;
    Ok(eg.graph.tensor(eg.logits).clone().with_requires_grad(false))
}

/// Visual tokens `[T_v × vis_dim]` and the captured attention.
pub fn encode_image(params: &ModelParams, image: &RasterImage) -> Result<(Tensor, AttentionRecord)> {
    let mut b = Builder::new(params, None);
    let (vis, attn) = b.vision(image)?;
    let rec = record_from(&b.g, &attn);
    Ok((b.g.tensor(vis).clone().with_requires_grad(false), rec))
}

/// Maps visual tokens into the decoder embedding space.
pub fn project(params: &ModelParams, visual: &Tensor) -> Result<Tensor> {
    let c = params.config();
    if visual.shape().len() != 2 || visual.cols() != c.vis_dim {
        return Err(Error::shape("project", visual.shape(), &[visual.rows(), c.vis_dim]));
    }
    let mut b = Builder::new(params, None);
    let x = b.g.constant(visual.clone());
    let out = b.projector(x)?;
    Ok(b.g.tensor(out).clone().with_requires_grad(false))
}

pub(crate) struct Builder<'a> {
    p: &'a ModelParams,
    pub(crate) g: Graph,
    leaves: Vec<(String, Var)>,
    cache: HashMap<String, Var>,
    dropout: Option<Rng>,
}

impl<'a> Builder<'a> {
    pub(crate) fn new(p: &'a ModelParams, dropout: Option<Rng>) -> Self {
        Builder {
            p,
            g: Graph::new(),
            leaves: Vec::new(),
            cache: HashMap::new(),
            dropout: dropout.filter(|_| p.training()),
        }
    }

    fn leaf(&mut self, key: &str) -> Result<Var> {
        if let Some(&v) = self.cache.get(key) {
            return Ok(v);
        }
        let t = self.p.tensor_by_key(key)?.clone();
        let trainable = match key.strip_suffix(LORA_A).or_else(|| key.strip_suffix(LORA_B)) {
            Some(base) => Group::of(base).is_some_and(|g| self.p.mode(g) == Mode::Lora),
            None => self.p.is_trainable(key),
        };
        let v = if trainable {
            let v = self.g.param(t);
            self.leaves.push((key.to_string(), v));
            v
        } else {
            self.g.constant(t)
        };
        self.cache.insert(key.to_string(), v);
        Ok(v)
    }

    fn linear(&mut self, x: Var, prefix: &str, bias: bool) -> Result<Var> {
        let wname = format!("{prefix}.weight");
        let w = self.leaf(&wname)?;
        let b = if bias { Some(self.leaf(&format!("{prefix}.bias"))?) } else { None };
        let y = self.g.linear(x, w, b)?;
        let Some(adapter) = self.p.adapter(&wname) else {
            return Ok(y);
        };
        let (p, scaling) = (adapter.dropout, adapter.scaling());
        let xin = match self.dropout.as_mut() {
            Some(rng) if p > 0.0 => {
                let keep: Vec<bool> = (0..self.g.value(x).len()).map(|_| rng.uniform() >= p).collect();
                self.g.dropout_with_mask(x, &keep, p)?
            }
            _ => x,
        };
        let a = self.leaf(&format!("{wname}{LORA_A}"))?;
        let bm = self.leaf(&format!("{wname}{LORA_B}"))?;
        let h = self.g.linear(xin, a, None)?;
        let u = self.g.linear(h, bm, None)?;
        let u = self.g.scale(u, scaling);
        self.g.add(y, u)
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gain = self.leaf(&format!("{prefix}.gain"))?;
        let bias = self.leaf(&format!("{prefix}.bias"))?;
        self.g.layer_norm(x, gain, bias, LN_EPS)
    }

    /// Pre-norm block; returns the new residual stream and the attention node.
    fn block(&mut self, x: Var, prefix: &str, heads: usize, causal: bool) -> Result<(Var, Var)> {
        let h = self.layer_norm(x, &format!("{prefix}.ln1"))?;
        let q = self.linear(h, &format!("{prefix}.attn.q"), true)?;
        let k = self.linear(h, &format!("{prefix}.attn.k"), true)?;
        let v = self.linear(h, &format!("{prefix}.attn.v"), true)?;
        let a = self.g.attention(q, k, v, heads, causal)?;
        let o = self.linear(a, &format!("{prefix}.attn.o"), true)?;
        let x = self.g.add(x, o)?;
        let h = self.layer_norm(x, &format!("{prefix}.ln2"))?;
        let m = self.linear(h, &format!("{prefix}.mlp.fc1"), true)?;
        let m = self.g.gelu(m);
        let m = self.linear(m, &format!("{prefix}.mlp.fc2"), true)?;
        Ok((self.g.add(x, m)?, a))
    }

    pub(crate) fn vision(&mut self, image: &RasterImage) -> Result<(Var, Vec<Var>)> {
        let c = self.p.config().clone();
        if image.side() != c.image_size {
            return Err(Error::shape(
                "encode_image",
                &[image.side(), image.side()],
                &[c.image_size, c.image_size],
            ));
        }
        let patches = self.g.constant(patchify(image, c.patch_size)?);
        let x = self.linear(patches, "vision.patch_embed", true)?;
        let pos = self.leaf("vision.pos_embed")?;
        let mut x = self.g.add(x, pos)?;
        let mut attn = Vec::with_capacity(c.vis_layers);
        for l in 0..c.vis_layers {
            let (nx, a) = self.block(x, &format!("vision.layers.{l}"), c.vis_heads, false)?;
            x = nx;
            attn.push(a);
        }
        Ok((self.layer_norm(x, "vision.ln_final")?, attn))
    }

    pub(crate) fn projector(&mut self, x: Var) -> Result<Var> {
        let h = self.linear(x, "projector.fc1", true)?;
        let h = self.g.gelu(h);
        self.linear(h, "projector.fc2", true)
    }

    fn decoder(&mut self, visual: Var, tokens: &[usize]) -> Result<Var> {
        let c = self.p.config().clone();
        let table = self.leaf("llm.tok_embed")?;
        let img = self.g.embedding(table, &[IMG])?;
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        ids.push(SEP);
        ids.extend_from_slice(tokens);
        let text = self.g.embedding(table, &ids)?;
        let seq = self.g.concat_rows(&[img, visual, text])?;
        let total = self.g.shape(seq)[0];
        let pos_table = self.leaf("llm.pos_embed")?;
        let pos = self.g.slice_rows(pos_table, 0, total)?;
        let mut x = self.g.add(seq, pos)?;
        for l in 0..c.llm_layers {
            x = self.block(x, &format!("llm.layers.{l}"), c.llm_heads, true)?.0;
        }
        let text_rows = self.g.slice_rows(x, c.prefix_len(), tokens.len())?;
        let h = self.layer_norm(text_rows, "llm.ln_final")?;
        self.linear(h, "llm.head", false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> ModelParams {
        ModelParams::new(ModelConfig::tiny(), &Rng::new(7)).unwrap()
    }

    fn image(seed: u64, side: usize) -> RasterImage {
        let mut r = Rng::new(seed);
        RasterImage::from_pixels(side, (0..side * side).map(|_| r.uniform()).collect()).unwrap()
    }

    #[test]
    fn patch_counts() {
        let t = patchify(&RasterImage::blank(8), 4).unwrap();
        assert_eq!(t.shape(), [4, 16]);
        // 336 / 14 = 24 patches per side.
        let t = patchify(&RasterImage::blank(336), 14).unwrap();
        assert_eq!(t.rows(), 576);
        assert!(patchify(&RasterImage::blank(10), 4).is_err());
    }

    #[test]
    fn constant_image_gives_identical_patches() {
        let img = RasterImage::from_pixels(8, vec![0.5; 64]).unwrap();
        let t = patchify(&img, 4).unwrap();
        for r in 1..4 {
            assert_eq!(t.row(r), t.row(0));
        }
    }

    #[test]
    fn patch_layout_is_row_major() {
        let img = RasterImage::from_pixels(4, (0..16).map(|i| i as f64 / 15.0).collect()).unwrap();
        let t = patchify(&img, 2).unwrap();
        let expect = [0, 1, 4, 5].map(|i| i as f64 / 15.0);
        assert_eq!(t.row(0), expect);
        let expect = [2, 3, 6, 7].map(|i| i as f64 / 15.0);
        assert_eq!(t.row(1), expect);
    }

    #[test]
    fn encode_image_shape_rows_and_determinism() {
        let p = ModelParams::new(ModelConfig::default(), &Rng::new(1)).unwrap();
        let img = image(2, 32);
        let (v, rec) = encode_image(&p, &img).unwrap();
        assert_eq!(v.shape(), [64, 64]);
        assert_eq!(rec.layers.len(), 2);
        assert!(rec.max_row_error() < 1e-9);
        let (v2, rec2) = encode_image(&p, &img).unwrap();
        assert_eq!(v, v2);
        assert_eq!(rec, rec2);
        assert!(encode_image(&p, &image(2, 16)).is_err());
    }

    #[test]
    fn projector_with_zero_weights_outputs_zero() {
        let mut p = tiny();
        for name in ["projector.fc1.weight", "projector.fc2.weight"] {
            let t = p.get_mut(name).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::randn(&[4, 8], 1.0, &mut Rng::new(3));
        let y = project(&p, &x).unwrap();
        assert_eq!(y.shape(), [4, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(project(&p, &Tensor::zeros(&[4, 5])).is_err());
    }

    #[test]
    fn logits_have_one_row_per_text_token() {
        let p = tiny();
        let logits = forward(&p, &image(1, 16), &[0, 10, 11, 12, 1]).unwrap();
        assert_eq!(logits.shape(), [5, 80]);
    }

    #[test]
    fn overflow_is_a_length_error() {
        let p = tiny();
        let too_long = vec![10; 64];
        assert!(matches!(forward(&p, &image(1, 16), &too_long), Err(Error::Length { .. })));
    }

    #[test]
    fn pad_after_eos_does_not_touch_earlier_logits() {
        let p = tiny();
        let img = image(4, 16);
        let a = forward(&p, &img, &[0, 20, 21, EOS, PAD, PAD]).unwrap();
        let b = forward(&p, &img, &[0, 20, 21, EOS, 30, 44]).unwrap();
        assert_eq!(a.data()[..4 * 80], b.data()[..4 * 80]);
    }

    #[test]
    fn image_changes_logits() {
        let p = ModelParams::new(ModelConfig::tiny(), &Rng::new(11)).unwrap();
        let a = forward(&p, &image(1, 16), &[0, 20]).unwrap();
        let b = forward(&p, &image(2, 16), &[0, 20]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn layout_masks_only_target_positions() {
        let v = Vocabulary::new();
        let l = TextLayout::new(&v, "ab", "cd").unwrap();
        // BOS a b \n c d EOS
        assert_eq!(l.ids.len(), 7);
        assert_eq!(l.loss_mask, [false, false, false, true, true, true, false]);
        assert_eq!(l.targets[3], v.id('c').unwrap());
        assert_eq!(l.targets[5], EOS);
        assert!(matches!(TextLayout::new(&v, "ab", ""), Err(Error::EmptyLoss)));
    }
}
