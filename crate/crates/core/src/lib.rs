//! Mixed-precision embedding compression for recommendation models.
//!
//! Features are bucketed into frequency groups. A differentiable search
//! picks a quantization width per group (zero drops the group), the model is
//! retrained at those widths, and the table is written to a bit-packed store
//! with a dequantizing lookup.
//!
//! ```
//! use mpe_core::quant::{quantize_scalar, BitWidth};
//!
//! let b = BitWidth::new(3).unwrap();
//! let (value, code) = quantize_scalar(0.37, 0.1, 0.0, b).unwrap();
//! assert_eq!(code, 3);
//! assert!((value - 0.3).abs() < 1e-12);
//! ```

pub mod catalog;
pub mod checkpoint;
pub mod error;
pub mod packfmt;
pub mod quant;
pub mod search;
pub mod synth;
pub mod trainer;

pub use catalog::{CatalogHash, Dataset, FeatureCatalog, GroupAssignment, Samples, Schema, Split};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use packfmt::{CompressionReport, PackedTable};
pub use quant::{BitWidth, QuantizerParams};
pub use search::{CandidateSet, GroupPrecisionState, SampledPrecision};
pub use synth::{SynthData, SynthSpec};
pub use trainer::{Phase, TrainConfig};
