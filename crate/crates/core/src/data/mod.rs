//! MNIST loading, glyph synthesis, and expression rendering.

pub mod atlas;
pub mod glyphs;
pub mod idx;
pub mod layout;
pub mod mnist;
pub mod png;
pub mod sampler;

pub use atlas::{DigitPool, GlyphAtlas, GlyphSource, Split, ATLAS_SEED};
pub use glyphs::{synthesize_operator_glyph, OperatorKind};
pub use idx::{parse_idx, parse_idx_images, parse_idx_labels, IdxData, IdxImages};
pub use layout::{all_triples, answer_classes, Glyph, Operator, Triple, BLANK_CLASS, MINUS_CLASS};
pub use mnist::{fetch_mnist, load_mnist, FetchReport, MnistSplit};
pub use sampler::{
    fixed_subset, render_batch, render_triple, render_triples, sample_expression, sample_triple,
    split_of, split_triples, Batch, ExpressionSample, TripleSource,
};
