//! Inference over trained checkpoints, shared by the HTTP service and the CLI.
//!
//! [`Engine`] holds one immutable model snapshot and answers completion and
//! instance-probability requests with serializable responses. The HTTP layer
//! in [`http`] serializes the same values, so a CLI printing
//! `serde_json::to_string(&response)` emits the service's response body byte
//! for byte.

pub mod api;
pub mod engine;
pub mod http;

pub use api::{ApiError, CompleteRequest, CompleteResponse, Health, ImageInfo, InstancesRequest, InstancesResponse};
pub use engine::{rank_instances, Engine, EngineError, ModelSlot, NOISE_ID};
