//! Flat binary checkpoints.
//!
//! ```text
//! "EAGLEFORGE1"  u64-LE header length  header text  f64-LE payload
//! ```
//!
//! Header lines: `config <json>`, `mode <group> <mode>`,
//! `adapter <base> <alpha> <dropout>`, and `tensor <name> <group> <AxB> <offset>`
//! where offset counts bytes from the start of the payload. Adapter factors
//! are listed with group `lora`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::model::{Group, ModelConfig, ModelParams, Mode, LORA_A, LORA_B};
use crate::tensor::Tensor;

pub const MAGIC: &[u8] = b"EAGLEFORGE1";

fn corrupt(field: &str) -> Error {
    Error::Checkpoint { field: field.to_string() }
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

pub fn to_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    let mut header = String::new();
    let config = serde_json::to_string(params.config()).map_err(|e| Error::Internal(e.to_string()))?;
    let _ = writeln!(header, "config {config}");
    for g in Group::ALL {
        let _ = writeln!(header, "mode {} {}", g.as_str(), params.mode(g).as_str());
    }
    for (base, a) in params.adapters() {
        let _ = writeln!(header, "adapter {base} {:?} {:?}", a.alpha, a.dropout);
    }
    let mut entries: Vec<(String, String, &Tensor)> = params
        .tensors()
        .iter()
        .map(|(n, t)| (n.clone(), Group::of(n).expect("grouped name").as_str().to_string(), t))
        .collect();
    for (base, a) in params.adapters() {
        entries.push((format!("{base}{LORA_A}"), "lora".into(), &a.a));
        entries.push((format!("{base}{LORA_B}"), "lora".into(), &a.b));
    }
    let mut payload = Vec::new();
    for (name, group, t) in &entries {
        let _ = writeln!(header, "tensor {name} {group} {} {}", shape_text(t.shape()), payload.len());
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// One `tensor` header entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Parsed header, before the payload is interpreted.
#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub config: ModelConfig,
    pub modes: [Mode; 3],
    pub adapters: Vec<(String, f64, f64)>,
    pub tensors: Vec<TensorEntry>,
}

fn parse_header(text: &str) -> Result<Header> {
    let mut config = None;
    let mut modes: [Option<Mode>; 3] = [None; 3];
    let mut adapters = Vec::new();
    let mut tensors = Vec::new();
    for line in text.lines() {
        let (kind, rest) = line.split_once(' ').ok_or_else(|| corrupt("header"))?;
        match kind {
            "config" => config = Some(serde_json::from_str(rest).map_err(|_| corrupt("config"))?),
            "mode" => {
                let (g, m) = rest.split_once(' ').ok_or_else(|| corrupt("mode"))?;
                let g: Group = g.parse().map_err(|_| corrupt("mode"))?;
                modes[g as usize] = Some(m.parse().map_err(|_| corrupt("mode"))?);
            }
            "adapter" => {
                let f: Vec<&str> = rest.split(' ').collect();
                let [base, alpha, dropout] = f[..] else {
                    return Err(corrupt("adapter"));
                };
                let alpha = alpha.parse().map_err(|_| corrupt("adapter"))?;
                let dropout = dropout.parse().map_err(|_| corrupt("adapter"))?;
                adapters.push((base.to_string(), alpha, dropout));
            }
            "tensor" => {
                let f: Vec<&str> = rest.split(' ').collect();
                let [name, group, shape, offset] = f[..] else {
                    return Err(corrupt("tensor"));
                };
                let shape = shape
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| corrupt("shape"))?;
                tensors.push(TensorEntry {
                    name: name.to_string(),
                    group: group.to_string(),
                    shape,
                    offset: offset.parse().map_err(|_| corrupt("offset"))?,
                });
            }
            _ => return Err(corrupt("header")),
        }
    }
    let config = config.ok_or_else(|| corrupt("config"))?;
    let modes = [modes[0], modes[1], modes[2]];
    let modes = match modes {
        [Some(a), Some(b), Some(c)] => [a, b, c],
        _ => return Err(corrupt("mode")),
    };
    Ok(Header {
        config,
        modes,
        adapters,
        tensors,
    })
}

/// Splits raw bytes into the parsed header and the payload.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("magic"));
    }
    let rest = &bytes[MAGIC.len()..];
    let len_bytes: [u8; 8] = rest.get(..8).and_then(|b| b.try_into().ok()).ok_or_else(|| corrupt("header_length"))?;
    let hlen = u64::from_le_bytes(len_bytes) as usize;
    let body = &rest[8..];
    if hlen > body.len() {
        return Err(corrupt("header_length"));
    }
    let text = std::str::from_utf8(&body[..hlen]).map_err(|_| corrupt("header"))?;
    Ok((parse_header(text)?, &body[hlen..]))
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let (header, payload) = read_header(bytes)?;
    let mut expected_offset = 0;
    let mut tensors = BTreeMap::new();
    let mut factors: BTreeMap<String, Tensor> = BTreeMap::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected_offset {
            return Err(corrupt("offset"));
        }
        let end = e.offset + 8 * n;
        let raw = payload.get(e.offset..end).ok_or_else(|| corrupt("payload"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|_| corrupt("shape"))?;
        expected_offset = end;
        if e.group == "lora" {
            factors.insert(e.name.clone(), t);
        } else {
            if Group::of(&e.name).map(Group::as_str) != Some(e.group.as_str()) {
                return Err(corrupt("group"));
            }
            tensors.insert(e.name.clone(), t);
        }
    }
    if expected_offset != payload.len() {
        return Err(corrupt("payload"));
    }
    let mut adapters = BTreeMap::new();
    for (base, alpha, dropout) in header.adapters {
        let a = factors.remove(&format!("{base}{LORA_A}")).ok_or_else(|| corrupt("adapter"))?;
        let b = factors.remove(&format!("{base}{LORA_B}")).ok_or_else(|| corrupt("adapter"))?;
        adapters.insert(
            base.clone(),
            LoraAdapter {
                base_name: base,
                a,
                b,
                alpha,
                dropout,
            },
        );
    }
    if !factors.is_empty() {
        return Err(corrupt("adapter"));
    }
    ModelParams::from_parts(header.config, tensors, header.modes, adapters).map_err(|_| corrupt("tensor"))
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    let bytes = to_bytes(params)?;
    // Write then rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
