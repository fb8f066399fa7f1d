//! Procedural geometry diagrams, captions and multiple-choice questions.

pub mod caption;
pub mod corpus;
pub mod dataset;
mod font;
pub mod qa;
pub mod raster;
pub mod spec;

pub use caption::{caption_of, parse_caption, Elements};
pub use corpus::{
    generate_captions, generate_qa, read_corpus, write_corpus, CaptionRecord, Example, QaRecord, Stored,
    CAPTION_PROMPT, IMAGE_SIDE,
};
pub use dataset::{write_dataset, DatasetSpec, Manifest, CAPTIONS_FILE, EVAL_FILE, MANIFEST_FILE, QA_FILE};
pub use qa::{qa_of, verify, QaQuestion, Target};
pub use raster::{rasterize, RasterImage};
pub use spec::{sample_diagram, sample_diagram_named, DiagramSpec, Family};
