//! Caption and QA records, corpus generation, and the JSONL file format.
//!
//! One JSON object per line. Images live next to the corpus file as P5 PGM
//! files under `images/`, referenced by a relative `image_path`.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::caption::caption_of;
use super::qa::{qa_of, QaQuestion};
use super::raster::{rasterize, RasterImage};
use super::spec::{sample_diagram, DiagramSpec, Family};
use crate::error::{Error, Result};
use crate::tensor::Rng;

/// Input sentence paired with every caption target.
pub const CAPTION_PROMPT: &str = "Describe the figure.";
pub const IMAGE_SIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub family: Family,
    pub image_path: String,
    pub caption: String,
    pub spec: DiagramSpec,
    #[serde(skip, default = "RasterImage::placeholder")]
    pub image: RasterImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub family: Family,
    pub image_path: String,
    #[serde(flatten)]
    pub qa: QaQuestion,
    pub spec: DiagramSpec,
    #[serde(skip, default = "RasterImage::placeholder")]
    pub image: RasterImage,
}

/// Anything with an image, an input sentence and a target sentence.
pub trait Example: Sync {
    fn image(&self) -> &RasterImage;
    fn input_text(&self) -> String;
    fn target_text(&self) -> String;
}

impl Example for CaptionRecord {
    fn image(&self) -> &RasterImage {
        &self.image
    }
    fn input_text(&self) -> String {
        CAPTION_PROMPT.to_string()
    }
    fn target_text(&self) -> String {
        self.caption.clone()
    }
}

impl Example for QaRecord {
    fn image(&self) -> &RasterImage {
        &self.image
    }
    fn input_text(&self) -> String {
        self.qa.prompt()
    }
    fn target_text(&self) -> String {
        self.qa.cot_text()
    }
}

/// Records that carry an image stored beside the corpus file.
pub trait Stored: Serialize + DeserializeOwned + Send {
    fn image_path(&self) -> &str;
    fn image_slot(&mut self) -> &mut RasterImage;
    fn image_ref(&self) -> &RasterImage;
}

macro_rules! stored {
    ($t:ty) => {
        impl Stored for $t {
            fn image_path(&self) -> &str {
                &self.image_path
            }
            fn image_slot(&mut self) -> &mut RasterImage {
                &mut self.image
            }
            fn image_ref(&self) -> &RasterImage {
                &self.image
            }
        }
    };
}
stored!(CaptionRecord);
stored!(QaRecord);

fn family_for(i: usize, families: &[Family]) -> Family {
    families[i % families.len()]
}

/// `n` caption records, families in round-robin order. Record `i` draws from
/// its own stream split off `rng`, so output is independent of scheduling.
pub fn generate_captions(n: usize, families: &[Family], rng: &Rng, prefix: &str) -> Result<Vec<CaptionRecord>> {
    check_families(families)?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let family = family_for(i, families);
            let mut r = rng.split_index(i as u64);
            let spec = sample_diagram(&mut r, family);
            let id = format!("{prefix}{i:05}");
            Ok(CaptionRecord {
                image_path: format!("images/{id}.pgm"),
                image: rasterize(&spec, IMAGE_SIDE)?,
                caption: caption_of(&spec),
                family,
                spec,
                id,
            })
        })
        .collect()
}

pub fn generate_qa(n: usize, families: &[Family], rng: &Rng, prefix: &str) -> Result<Vec<QaRecord>> {
    check_families(families)?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let family = family_for(i, families);
            let mut r = rng.split_index(i as u64);
            let spec = sample_diagram(&mut r, family);
            let qa = qa_of(&spec, &mut r)?;
            let id = format!("{prefix}{i:05}");
            Ok(QaRecord {
                image_path: format!("images/{id}.pgm"),
                image: rasterize(&spec, IMAGE_SIDE)?,
                qa,
                family,
                spec,
                id,
            })
        })
        .collect()
}

fn check_families(families: &[Family]) -> Result<()> {
    if families.is_empty() {
        return Err(Error::Config("at least one family is required".into()));
    }
    Ok(())
}

/// Writes the JSONL file and one PGM per record under the file's directory.
pub fn write_corpus<T: Stored>(records: &[T], path: &Path) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        r.image_ref().write_pgm(&dir.join(r.image_path()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads records back, loading each image. Errors name the 1-based line.
pub fn read_corpus<T: Stored>(path: &Path) -> Result<Vec<T>> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: T = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let img = RasterImage::read_pgm(&dir.join(rec.image_path()))?;
        *rec.image_slot() = img;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let rng = Rng::new(11);
        let a = generate_qa(40, &Family::ALL, &rng, "q").unwrap();
        let b = generate_qa(40, &Family::ALL, &rng, "q").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|r| r.family == Family::CircleInscribed).count(), 10);
    }

    #[test]
    fn round_trip_and_line_numbered_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa.jsonl");
        let recs = generate_qa(12, &Family::ALL, &Rng::new(3), "q").unwrap();
        write_corpus(&recs, &path).unwrap();
        let back: Vec<QaRecord> = read_corpus(&path).unwrap();
        assert_eq!(back, recs);

        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[6] = "{not json";
        std::fs::write(&path, lines.join("\n")).unwrap();
        match read_corpus::<QaRecord>(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_corpus::<CaptionRecord>(&path).unwrap().is_empty());
    }
}
