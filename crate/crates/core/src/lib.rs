//! Functional 3D scene graphs from posed RGB-D sequences.
//!
//! Objects and the interactive elements that operate them are detected per
//! frame, fused into 3D candidates, described with vision-language models,
//! and connected by element→object functional edges.

pub mod backend;
pub mod canonical;
pub mod description;
pub mod detection;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod graph;
pub mod ply;
pub mod prompts;
pub mod reasoning;
pub mod scene;
