//! Factorization self-attention (FaSA) and the FaViT backbone family.
//!
//! The crate is built on a small reverse-mode tensor engine ([`tensor`])
//! with multiply-accumulate instrumentation, and ships independent
//! reference implementations ([`oracle`]) plus analytical cost formulas
//! ([`flops`]) used to check the mechanism.

pub mod attnmap;
pub mod check;
pub mod error;
pub mod fasa;
pub mod flops;
pub mod model;
pub mod oracle;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use fasa::{FasaConfig, FasaParams, Fusion, GroupTrace};
pub use model::{ModelParams, VariantSpec};
pub use params::{Initializer, ParamStore};
pub use tensor::{IndexGrid, Tape, Tensor, Var};
