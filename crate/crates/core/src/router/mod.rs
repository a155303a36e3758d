//! Prototype-based routing: query embedding, per-route prototype banks and a
//! registry that picks the nearest bank.

mod bank;
pub mod kmeans;

pub use bank::{
    build_bank, embed_query, embed_query_ids, BankConfig, BankProvenance, BankRegistry, PrototypeBank, QueryEmbedding,
    RouteDecision,
};
pub use kmeans::{kmeans, KMeansConfig, KMeansResult};
