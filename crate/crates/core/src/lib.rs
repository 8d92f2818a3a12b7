//! Evidence-chain synthesis for grounded video question answering.

pub mod dataio;
pub mod distill;
pub mod hashing;
pub mod metrics;
pub mod pipeline;
pub mod pool;
pub mod prompts;
pub mod review;
pub mod scalar;
pub mod scorer;
pub mod search;
pub mod segmenter;
pub mod span;
pub mod types;

pub use scalar::{Rational, Scalar};
pub use span::{Span, SpanError};

/// Span in seconds.
pub type TimeSpan = Span<f64>;
/// Span with exact rational endpoints.
pub type ExactSpan = Span<Rational>;
/// Span with single-precision endpoints.
pub type TimeSpanF32 = Span<f32>;
