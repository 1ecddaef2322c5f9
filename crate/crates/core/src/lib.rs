//! Streaming agent loop over serialized clinical event bundles.
//!
//! Relational clinical tables become typed events ([`ingest`]), coalesced
//! into hourly bundles and rendered as sectioned text ([`bundler`]). A
//! dual-memory state ([`memory`]) is advanced bundle by bundle by four
//! prompted roles over a pluggable chat backend ([`backend`], [`agents`]).
//! Rules are induced offline from failures ([`reflector`]) and everything is
//! scored prequentially ([`eval`]).

pub mod agents;
pub mod backend;
pub mod bundler;
pub mod corpus;
pub mod eval;
pub mod ingest;
pub mod memory;
pub mod reflector;
pub mod synth;
pub mod text;
