//! Reconstruction of quasi-dynamic interaction networks from expression data
//! indexed by total expression, and GLMY path homology of the resulting
//! weighted digraphs.

pub mod allometry;
pub mod cluster;
pub mod error;
pub mod glmy;
pub mod ingest;
pub mod network;
pub mod optim;
pub mod persist;
pub mod pipeline;
pub mod qdode;
pub mod select;
pub mod synthetic;

pub use error::{Error, Result};
