//! Federated averaging over hash-compressed models.
//!
//! Every participant stores and trains a small *real* parameter vector per
//! layer; the full-size *virtual* weights used in computation are gathered
//! from it through a seeded index map shared by all participants. Only
//! increments of the real vectors cross the wire, so the upload per round
//! shrinks with the compression ratio.

pub mod data;
pub mod error;
pub mod experiment;
pub mod federated;
pub mod hashing;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod schema;
pub mod transport;
pub mod verify;

pub use error::{Error, Result};
pub use experiment::{MetricsRecord, Mode, RunArtifacts, RunConfig};
pub use hashing::{expand, make_index_map, scatter_grad, IndexMap, IndexMaps};
pub use model::{Batch, ModelKind, ModelSpec};
pub use params::{Params, Real, RealParams, RoundIncrement};
pub use schema::{build_schema, fnv1a64, Gamma, LayerSchema, LayerSpec, ParameterSchema};
pub use transport::{TransportConfig, WireMessage};
