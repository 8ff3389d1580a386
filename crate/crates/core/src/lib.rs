//! Gumbel-Softmax Sparsespeech: unsupervised acoustic unit discovery with a
//! memory-augmented recurrent autoencoder, plus ABX and CTC-probe evaluation.

pub mod abx;
pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod ctc;
pub mod error;
pub mod gumbel;
pub mod model;
pub mod nn;
pub mod objectives;

pub use error::{Error, Result};
