//! Pattern-level suppression of over-used phrasing in language model output.
//!
//! - [`pattern`]: banlists of phrases, n-grams and regexes, and the scanner.
//! - [`sampler`]: backtracking generation over any [`backend::Backend`].
//! - [`profiler`]: over-representation profiles against a human baseline.
//! - [`ftpo`]: preference data from backtracking events, and the tuning loss.
//! - [`metrics`]: suppression and lexical-diversity measurements.

pub mod backend;
pub mod pattern;
pub mod sampler;
pub mod text;
pub mod ftpo;
pub mod profiler;
pub mod metrics;
