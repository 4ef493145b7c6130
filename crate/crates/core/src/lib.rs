//! Product-quantization retrieval trained with clipped contrastive learning.
//!
//! Pipeline: precomputed two-view features go through a trainable linear
//! projection head, are L2-normalized, split into `M` segments and softly
//! assigned to `M` codebooks of `K` codewords. The contrastive objective drops
//! the `eta` most similar negatives of every query before forming the
//! denominator, which keeps likely false negatives out of the gradient. After
//! training every database item is hard-quantized to `M` one-byte indices and
//! queries are answered with a per-query lookup table scan.
//!
//! Modules:
//! - [`quantizer`]: segmenting, soft and hard quantization
//! - [`objective`]: vanilla and clipped contrastive losses, codeword regularizer
//! - [`trainer`]: parameters, analytic gradients, Adam epoch loop
//! - [`retrieval`]: code database, lookup tables, top-k scan
//! - [`evaluation`]: relevance, AP@R and mAP@R
//! - [`store`]: feature files, manifests, snapshots, database files
//! - [`synth`]: synthetic clustered feature sets for tests and demos
//! - [`cli`]: the `clipq` command line

pub mod cli;
pub mod error;
pub mod evaluation;
pub mod objective;
pub mod quantizer;
pub mod retrieval;
pub mod store;
pub mod synth;
pub mod trainer;

mod linalg;

pub use error::{Error, Result};
