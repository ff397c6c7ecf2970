//! Fisher information of parametric hidden Markov models.

pub mod cli;
pub mod ergodicity;
pub mod error;
pub mod estimation;
pub mod fisher;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod mc;
pub mod model;
pub mod sensitivity;
pub mod stationary;

pub use error::{Error, Result};
pub use model::{build_catalog_model, CatalogModel, Family, ParamHmm};
