//! Tape-free decoding. The visual prefix and prompt are run once; each new
//! token then costs one row through the decoder, reusing cached keys and
//! values of earlier positions.

use std::collections::HashMap;

use super::forward::{encode_image, project, TextLayout};
use super::vocab::{Vocabulary, EOS, IMG, SEP};
use super::{ModelParams, LN_EPS};
use crate::error::{Error, Result};
use crate::geo::RasterImage;
use crate::tensor::graph::{gelu, softmax_in_place};
use crate::tensor::kernels::{gemm, transpose};

/// Anything that maps the tokens generated so far to next-token logits.
pub trait LogitModel {
    fn next_logits(&mut self, generated: &[usize]) -> Result<Vec<f64>>;
}

impl<F: FnMut(&[usize]) -> Result<Vec<f64>>> LogitModel for F {
    fn next_logits(&mut self, generated: &[usize]) -> Result<Vec<f64>> {
        self(generated)
    }
}

/// Greedy argmax decoding; ties go to the lower id. Stops after EOS (not
/// included in the output) or `max_new` tokens.
pub fn greedy_decode(model: &mut impl LogitModel, max_new: usize) -> Result<Vec<usize>> {
    if max_new == 0 {
        return Err(Error::Usage("max_new must be at least 1".into()));
    }
    let mut out = Vec::new();
    while out.len() < max_new {
        let logits = model.next_logits(&out)?;
        let next = logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        if next == EOS {
            break;
        }
        out.push(next);
    }
    Ok(out)
}

/// Greedy completion of `prompt` for `image`.
pub fn generate(params: &ModelParams, image: &RasterImage, prompt: &str, max_new: usize) -> Result<String> {
    let vocab = Vocabulary::new();
    let ids = generate_ids(params, image, &TextLayout::prompt(&vocab, prompt)?, max_new)?;
    Ok(vocab.decode(&ids))
}

pub fn generate_ids(params: &ModelParams, image: &RasterImage, prompt_ids: &[usize], max_new: usize) -> Result<Vec<usize>> {
    let mut g = Generator::new(params, image, prompt_ids)?;
    greedy_decode(&mut g, max_new)
}

struct Layer {
    k: Vec<f64>,
    v: Vec<f64>,
}

/// Cached decoding state for one image and prompt.
pub struct Generator<'a> {
    p: &'a ModelParams,
    weights: HashMap<String, Vec<f64>>,
    layers: Vec<Layer>,
    len: usize,
    fed: usize,
    last_logits: Vec<f64>,
}

impl<'a> Generator<'a> {
    pub fn new(p: &'a ModelParams, image: &RasterImage, prompt_ids: &[usize]) -> Result<Self> {
        let c = p.config();
        if prompt_ids.is_empty() {
            return Err(Error::Usage("empty prompt".into()));
        }
        let (vis, _) = encode_image(p, image)?;
        let proj = project(p, &vis)?;
        let mut gen = Generator {
            p,
            weights: HashMap::new(),
            layers: (0..c.llm_layers)
                .map(|_| Layer {
                    k: Vec::new(),
                    v: Vec::new(),
                })
                .collect(),
            len: 0,
            fed: 0,
            last_logits: Vec::new(),
        };
        gen.prepare_weights()?;
        let d = c.llm_dim;
        let mut rows = Vec::with_capacity((c.prefix_len() + prompt_ids.len()) * d);
        rows.extend_from_slice(gen.embed_row(IMG)?);
        rows.extend_from_slice(proj.data());
        rows.extend_from_slice(gen.embed_row(SEP)?);
        for &t in prompt_ids {
            rows.extend_from_slice(gen.embed_row(t)?);
        }
        gen.run(rows)?;
        Ok(gen)
    }

    /// Transposed decoder weights with adapters folded in.
    fn prepare_weights(&mut self) -> Result<()> {
        for (name, t) in self.p.tensors() {
            if !name.starts_with("llm.") || !name.ends_with(".weight") {
                continue;
            }
            let data = match self.p.adapter(name) {
                Some(a) => t.data().iter().zip(a.delta()).map(|(w, d)| w + d).collect(),
                None => t.data().to_vec(),
            };
            self.weights.insert(name.clone(), transpose(&data, t.rows(), t.cols()));
        }
        Ok(())
    }

    fn embed_row(&self, id: usize) -> Result<&[f64]> {
        let t = self.p.get("llm.tok_embed")?;
        if id >= t.rows() {
            return Err(Error::Usage(format!("token id {id} outside vocabulary")));
        }
        Ok(t.row(id))
    }

    fn linear(&self, x: &[f64], n: usize, prefix: &str, bias: bool) -> Result<Vec<f64>> {
        let w = self.p.get(&format!("{prefix}.weight"))?;
        let (d_out, d_in) = (w.rows(), w.cols());
        let wt = &self.weights[&format!("{prefix}.weight")];
        let mut out = vec![0.0; n * d_out];
        gemm(x, wt, &mut out, n, d_in, d_out);
        if bias {
            let b = self.p.get(&format!("{prefix}.bias"))?.data();
            for row in out.chunks_mut(d_out) {
                for (o, bv) in row.iter_mut().zip(b) {
                    *o += bv;
                }
            }
        }
        Ok(out)
    }

    fn layer_norm(&self, x: &[f64], prefix: &str) -> Result<Vec<f64>> {
        let gain = self.p.get(&format!("{prefix}.gain"))?.data();
        let bias = self.p.get(&format!("{prefix}.bias"))?.data();
        let d = gain.len();
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            out.extend(row.iter().enumerate().map(|(c, v)| (v - mean) * rstd * gain[c] + bias[c]));
        }
        Ok(out)
    }

    /// Pushes `rows` (token embeddings, `[n × d]`) through the decoder and
    /// leaves the logits of the last row in `last_logits`.
    fn run(&mut self, mut x: Vec<f64>) -> Result<()> {
        let c = self.p.config().clone();
        let d = c.llm_dim;
        let n = x.len() / d;
        if self.len + n > c.max_seq_len {
            return Err(Error::Length {
                len: self.len + n,
                max: c.max_seq_len,
            });
        }
        let pos = self.p.get("llm.pos_embed")?;
        for (i, row) in x.chunks_mut(d).enumerate() {
            for (v, p) in row.iter_mut().zip(pos.row(self.len + i)) {
                *v += p;
            }
        }
        let heads = c.llm_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..c.llm_layers {
            let pre = format!("llm.layers.{l}");
            let h = self.layer_norm(&x, &format!("{pre}.ln1"))?;
            let q = self.linear(&h, n, &format!("{pre}.attn.q"), true)?;
            let k = self.linear(&h, n, &format!("{pre}.attn.k"), true)?;
            let v = self.linear(&h, n, &format!("{pre}.attn.v"), true)?;
            let cache = &mut self.layers[l];
            cache.k.extend_from_slice(&k);
            cache.v.extend_from_slice(&v);
            let mut att = vec![0.0; n * d];
            let mut scores = Vec::with_capacity(self.len + n);
            for i in 0..n {
                let visible = self.len + i + 1;
                for hd in 0..heads {
                    let qi = &q[i * d + hd * dh..i * d + (hd + 1) * dh];
                    scores.clear();
                    for j in 0..visible {
                        let kj = &cache.k[j * d + hd * dh..j * d + (hd + 1) * dh];
                        let mut s = 0.0;
                        for e in 0..dh {
                            s += qi[e] * kj[e];
                        }
                        scores.push(s * scale);
                    }
                    softmax_in_place(&mut scores);
                    let out = &mut att[i * d + hd * dh..i * d + (hd + 1) * dh];
                    for (j, &pj) in scores.iter().enumerate() {
                        let vj = &cache.v[j * d + hd * dh..j * d + (hd + 1) * dh];
                        for e in 0..dh {
                            out[e] += pj * vj[e];
                        }
                    }
                }
            }
            let o = self.linear(&att, n, &format!("{pre}.attn.o"), true)?;
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let h = self.layer_norm(&x, &format!("{pre}.ln2"))?;
            let mut m = self.linear(&h, n, &format!("{pre}.mlp.fc1"), true)?;
            m.iter_mut().for_each(|v| *v = gelu(*v));
            let m = self.linear(&m, n, &format!("{pre}.mlp.fc2"), true)?;
            x.iter_mut().zip(&m).for_each(|(a, b)| *a += b);
        }
        self.len += n;
        let last = self.layer_norm(&x[(n - 1) * d..], "llm.ln_final")?;
        self.last_logits = self.linear(&last, 1, "llm.head", false)?;
        Ok(())
    }
}

impl LogitModel for Generator<'_> {
    fn next_logits(&mut self, generated: &[usize]) -> Result<Vec<f64>> {
        if generated.len() < self.fed {
            return Err(Error::Usage("generated tokens cannot shrink".into()));
        }
        if generated.len() > self.fed {
            let mut rows = Vec::new();
            for &t in &generated[self.fed..] {
                rows.extend_from_slice(self.embed_row(t)?);
            }
            self.run(rows)?;
            self.fed = generated.len();
        }
        Ok(self.last_logits.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ModelConfig};
    use crate::tensor::Rng;

    fn setup() -> (ModelParams, RasterImage) {
        let p = ModelParams::new(ModelConfig::tiny(), &Rng::new(5)).unwrap();
        let mut r = Rng::new(9);
        let img = RasterImage::from_pixels(16, (0..256).map(|_| r.uniform()).collect()).unwrap();
        (p, img)
    }

    #[test]
    fn cached_logits_match_full_forward() {
        let (p, img) = setup();
        let tokens = [0usize, 12, 40, 41, 8, 60];
        let full = forward(&p, &img, &tokens).unwrap();
        let mut g = Generator::new(&p, &img, &tokens[..2]).unwrap();
        for t in 2..=tokens.len() {
            let logits = g.next_logits(&tokens[2..t]).unwrap();
            for (a, b) in logits.iter().zip(full.row(t - 1)) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b} at {t}");
            }
        }
    }

    #[test]
    fn eos_heavy_logits_give_empty_completion() {
        let mut m = |_: &[usize]| -> Result<Vec<f64>> {
            let mut l = vec![0.0; 80];
            l[EOS] = 30.0;
            Ok(l)
        };
        assert!(greedy_decode(&mut m, 10).unwrap().is_empty());
    }

    #[test]
    fn rigged_logits_spell_b() {
        let v = Vocabulary::new();
        let b = v.id('B').unwrap();
        let mut m = |gen: &[usize]| -> Result<Vec<f64>> {
            let mut l = vec![0.0; 80];
            l[if gen.is_empty() { b } else { EOS }] = 5.0;
            Ok(l)
        };
        let ids = greedy_decode(&mut m, 10).unwrap();
        assert_eq!(v.decode(&ids), "B");
        assert!(greedy_decode(&mut m, 0).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let (p, img) = setup();
        let a = generate(&p, &img, "Find x.", 8).unwrap();
        let b = generate(&p, &img, "Find x.", 8).unwrap();
        assert_eq!(a, b);
        assert!(matches!(generate(&p, &img, "∠", 8), Err(Error::Tokenize('∠'))));
    }
}
