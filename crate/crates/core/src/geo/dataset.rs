//! Writes the caption, QA and held-out evaluation corpora plus a manifest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::corpus::{generate_captions, generate_qa, write_corpus};
use super::spec::Family;
use crate::error::{Error, Result};
use crate::tensor::{hex, Rng};

pub const CAPTIONS_FILE: &str = "captions.jsonl";
pub const QA_FILE: &str = "qa.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub captions: usize,
    pub qa: usize,
    pub eval: usize,
    pub families: Vec<Family>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            captions: 2000,
            qa: 4000,
            eval: 400,
            families: Family::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec: DatasetSpec,
    /// SHA-256 of each corpus file and its images, keyed by corpus file name.
    pub files: BTreeMap<String, String>,
    /// SHA-256 over the per-file digests.
    pub checksum: String,
}

fn digest_corpus(dir: &Path, file: &str, ids: impl Iterator<Item = String>) -> Result<String> {
    let mut h = Sha256::new();
    let path = dir.join(file);
    h.update(std::fs::read(&path).map_err(|e| Error::io(&path, e))?);
    for id in ids {
        let img = dir.join("images").join(format!("{id}.pgm"));
        h.update(std::fs::read(&img).map_err(|e| Error::io(&img, e))?);
    }
    Ok(hex(&h.finalize()))
}

/// Generates and writes all three corpora into `dir`. The evaluation items
/// come from their own seed stream and id prefix, disjoint from training.
pub fn write_dataset(dir: &Path, spec: &DatasetSpec, seed: u64) -> Result<Manifest> {
    if spec.families.is_empty() {
        return Err(Error::Usage("at least one diagram family is required".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rng = Rng::new(seed);
    let captions = generate_captions(spec.captions, &spec.families, &rng.split("captions"), "cap-")?;
    write_corpus(&captions, &dir.join(CAPTIONS_FILE))?;
    let qa = generate_qa(spec.qa, &spec.families, &rng.split("qa"), "qa-")?;
    write_corpus(&qa, &dir.join(QA_FILE))?;
    let eval = generate_qa(spec.eval, &spec.families, &rng.split("eval"), "eval-")?;
    write_corpus(&eval, &dir.join(EVAL_FILE))?;

    let mut files = BTreeMap::new();
    files.insert(CAPTIONS_FILE.to_string(), digest_corpus(dir, CAPTIONS_FILE, captions.iter().map(|r| r.id.clone()))?);
    files.insert(QA_FILE.to_string(), digest_corpus(dir, QA_FILE, qa.iter().map(|r| r.id.clone()))?);
    files.insert(EVAL_FILE.to_string(), digest_corpus(dir, EVAL_FILE, eval.iter().map(|r| r.id.clone()))?);
    let mut h = Sha256::new();
    for d in files.values() {
        h.update(d.as_bytes());
    }
    let manifest = Manifest {
        seed,
        spec: spec.clone(),
        files,
        checksum: hex(&h.finalize()),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{read_corpus, QaRecord};

    #[test]
    fn same_seed_same_manifest_and_disjoint_eval() {
        let spec = DatasetSpec {
            captions: 6,
            qa: 8,
            eval: 4,
            families: Family::ALL.to_vec(),
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = write_dataset(a.path(), &spec, 5).unwrap();
        let mb = write_dataset(b.path(), &spec, 5).unwrap();
        assert_eq!(ma, mb);
        let mc = write_dataset(b.path(), &spec, 6).unwrap();
        assert_ne!(ma.checksum, mc.checksum);
        let qa: Vec<QaRecord> = read_corpus(&a.path().join(QA_FILE)).unwrap();
        let eval: Vec<QaRecord> = read_corpus(&a.path().join(EVAL_FILE)).unwrap();
        assert_eq!((qa.len(), eval.len()), (8, 4));
        assert!(eval.iter().all(|e| e.id.starts_with("eval-")));
    }
}
