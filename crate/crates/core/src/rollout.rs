//! Attention rollout over the vision encoder and PPM heatmaps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geo::raster::header_fields;
use crate::geo::RasterImage;
use crate::model::AttentionRecord;
use crate::tensor::kernels::gemm;
use crate::tensor::Tensor;

/// Row-sum slack accepted on captured attention.
const STOCHASTIC_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutMap {
    /// `[T × T]`, row-stochastic.
    pub matrix: Tensor,
}

impl RolloutMap {
    pub fn tokens(&self) -> usize {
        self.matrix.rows()
    }

    pub fn max_row_error(&self) -> f64 {
        (0..self.tokens())
            .map(|i| (self.matrix.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn normalize_rows(m: &mut [f64], t: usize) {
    for row in m.chunks_mut(t) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
}

/// Head-averaged, residual-corrected attention multiplied through the layers,
/// later layers on the left.
pub fn rollout(record: &AttentionRecord) -> Result<RolloutMap> {
    let t = record.tokens;
    if record.layers.is_empty() || t == 0 {
        return Err(Error::Validation("rollout needs at least one captured layer".into()));
    }
    let mut acc: Option<Vec<f64>> = None;
    for (l, layer) in record.layers.iter().enumerate() {
        if layer.heads == 0 || layer.probs.len() != layer.heads * t * t {
            return Err(Error::shape("rollout", &[layer.probs.len()], &[layer.heads, t, t]));
        }
        for (r, row) in layer.probs.chunks(t).enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::Validation(format!(
                    "layer {l} head {} row {} is not stochastic (sum {s})",
                    r / t,
                    r % t
                )));
            }
        }
        let mut a = vec![0.0; t * t];
        for h in layer.probs.chunks(t * t) {
            a.iter_mut().zip(h).for_each(|(x, y)| *x += y);
        }
        let inv = 1.0 / layer.heads as f64;
        for (i, v) in a.iter_mut().enumerate() {
            *v = 0.5 * *v * inv + if i / t == i % t { 0.5 } else { 0.0 };
        }
        normalize_rows(&mut a, t);
        acc = Some(match acc {
            None => a,
            Some(prev) => {
                let mut out = vec![0.0; t * t];
                gemm(&a, &prev, &mut out, t, t, t);
                out
            }
        });
    }
    let matrix = Tensor::new(vec![t, t], acc.expect("at least one layer"))?;
    Ok(RolloutMap { matrix })
}

/// Row `query` (default: last token) restricted to the patch columns
/// `patches` and renormalized.
pub fn patch_saliency(map: &RolloutMap, query: Option<usize>, patches: std::ops::Range<usize>) -> Result<Vec<f64>> {
    let t = map.tokens();
    let q = query.unwrap_or(t - 1);
    if q >= t {
        return Err(Error::Usage(format!("query token {q} out of range for {t} tokens")));
    }
    if patches.is_empty() || patches.end > t {
        return Err(Error::Usage(format!("patch columns {patches:?} out of range for {t} tokens")));
    }
    let row = &map.matrix.row(q)[patches];
    let s: f64 = row.iter().sum();
    if !(s > 0.0) {
        return Err(Error::Validation(format!("query {q} places no weight on any patch")));
    }
    Ok(row.iter().map(|v| v / s).collect())
}

/// Grayscale base with a per-pixel overlay in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapImage {
    pub base: RasterImage,
    pub overlay: Vec<f64>,
    /// Per-patch weights the overlay was upsampled from.
    pub weights: Vec<f64>,
}

impl HeatmapImage {
    /// Interleaved RGB bytes; red is blended in with alpha `0.5 · overlay`.
    pub fn rgb(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(3 * self.overlay.len());
        for (&g, &o) in self.base.pixels().iter().zip(&self.overlay) {
            let a = 0.5 * o;
            for target in [1.0, 0.0, 0.0] {
                out.push((((1.0 - a) * g + a * target) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let s = self.base.side();
        let mut out = format!("P6\n{s} {s}\n255\n").into_bytes();
        out.extend(self.rgb());
        out
    }

    pub fn sidecar(&self) -> String {
        let mut s = String::new();
        for (i, w) in self.weights.iter().enumerate() {
            let _ = writeln!(s, "{i} {w:.6}");
        }
        s
    }

    /// Writes `<id>_rollout.ppm` and the `<id>_rollout.txt` weight listing.
    pub fn write(&self, dir: &Path, id: &str) -> Result<PathBuf> {
        let ppm = dir.join(format!("{id}_rollout.ppm"));
        std::fs::write(&ppm, self.to_ppm()).map_err(|e| Error::io(&ppm, e))?;
        let txt = dir.join(format!("{id}_rollout.txt"));
        std::fs::write(&txt, self.sidecar()).map_err(|e| Error::io(&txt, e))?;
        Ok(ppm)
    }
}

/// Parses a P6 file into `(width, height, rgb)`.
pub fn read_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |msg: &str| Error::Parse {
        line: 0,
        msg: format!("ppm: {msg}"),
    };
    let (f, offset) = header_fields(bytes, 4).ok_or_else(|| bad("truncated header"))?;
    if f[0] != "P6" || f[3] != "255" {
        return Err(bad("expected P6 with maxval 255"));
    }
    let w: usize = f[1].parse().map_err(|_| bad("width"))?;
    let h: usize = f[2].parse().map_err(|_| bad("height"))?;
    let body = &bytes[offset..];
    if body.len() != 3 * w * h {
        return Err(bad("payload length"));
    }
    Ok((w, h, body.to_vec()))
}

/// Nearest-neighbour upsampling of a square patch grid onto the image.
pub fn render_heatmap(image: &RasterImage, weights: &[f64]) -> Result<HeatmapImage> {
    let s = image.side();
    let g = (weights.len() as f64).sqrt().round() as usize;
    if g == 0 || g * g != weights.len() || s % g != 0 {
        return Err(Error::shape("render_heatmap", &[weights.len()], &[g * g]));
    }
    let max = weights.iter().copied().fold(0.0, f64::max);
    let norm: Vec<f64> = if max > 0.0 {
        weights.iter().map(|w| w.max(0.0) / max).collect()
    } else {
        vec![0.0; weights.len()]
    };
    let block = s / g;
    let overlay = (0..s * s).map(|i| norm[(i / s / block) * g + (i % s) / block]).collect();
    Ok(HeatmapImage {
        base: image.clone(),
        overlay,
        weights: weights.to_vec(),
    })
}
