//! Core of the ragforge RAG debugging engine.

pub mod corpus;
pub mod embedder;
mod fsutil;
mod http;
pub mod index;
pub mod llm;
pub mod engine;
pub mod evalstore;
pub mod project;
