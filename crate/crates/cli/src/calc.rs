//! Generator inference on a single expression.

use std::path::Path;
use std::time::Instant;

use neurocalc::checkpoint::load_model;
use neurocalc::data::png::encode_network_png;
use neurocalc::data::sampler::render_triples;
use neurocalc::data::{GlyphAtlas, Split, Triple};
use neurocalc::eval::{parse_answer_image, ParsedAnswer};
use neurocalc::rng::StreamRng;
use neurocalc::{Model, ModelKind};
use serde::{Deserialize, Serialize};

/// Expression canvases at inference time use the held-out glyph split.
pub const INFERENCE_GLYPHS: Split = Split::Test;

/// Generator plus the evaluation classifier, both in eval mode.
pub struct Calculator {
    pub generator: Model,
    pub classifier: Model,
    pub atlas: GlyphAtlas,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalcResponse {
    pub answer_png_base64: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parsed_value: Option<i64>,
    pub well_formed: bool,
    pub true_value: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    pub latency_ms: f64,
}

pub struct Answer {
    pub png: Vec<u8>,
    pub parsed: ParsedAnswer,
    pub true_value: i64,
}

impl Answer {
    pub fn correct(&self) -> Option<bool> {
        self.parsed.value.map(|v| v == self.true_value)
    }
}

#[derive(Debug)]
pub enum LoadError {
    Missing(std::path::PathBuf),
    Invalid(neurocalc::Error),
}

impl std::fmt::Display for LoadError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LoadError::Missing(p) => write!(f, "checkpoint {} not found", p.display()),
            LoadError::Invalid(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for LoadError {}

pub fn load_kind(kind: ModelKind, path: &Path) -> Result<Model, LoadError> {
    if !path.is_file() {
        return Err(LoadError::Missing(path.to_path_buf()));
    }
    let mut m: Model = load_model(kind, path).map_err(LoadError::Invalid)?;
    m.freeze();
    Ok(m)
}

impl Calculator {
    pub fn load(generator: &Path, classifier: &Path, atlas: GlyphAtlas) -> Result<Self, LoadError> {
        Ok(Self {
            generator: load_kind(ModelKind::Generator, generator)?,
            classifier: load_kind(ModelKind::Classifier, classifier)?,
            atlas,
        })
    }

    /// Renders `triple`, runs the generator, and reads the answer back.
    pub fn answer(&self, triple: Triple, rng: &mut StreamRng) -> neurocalc::Result<Answer> {
        let batch = render_triples(&self.atlas, &[triple], INFERENCE_GLYPHS, rng);
        let out = self.generator.predict(&batch.expressions)?;
        let parsed = parse_answer_image(&self.classifier, &out)?;
        Ok(Answer {
            png: encode_network_png(&out)?,
            parsed,
            true_value: triple.result(),
        })
    }

    pub fn respond(&self, triple: Triple, rng: &mut StreamRng) -> neurocalc::Result<CalcResponse> {
        use base64::Engine;
        let start = Instant::now();
        let a = self.answer(triple, rng)?;
        Ok(CalcResponse {
            answer_png_base64: base64::engine::general_purpose::STANDARD.encode(&a.png),
            parsed_value: a.parsed.value,
            well_formed: a.parsed.well_formed,
            true_value: a.true_value,
            correct: a.correct(),
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}
