//! Issue-to-patch pipeline for Python repositories.
//!
//! Localization narrows a repository down in three steps. Retrieval over
//! method documents and a file-map query produce candidate files. A
//! schematic-guided selection keeps at most a couple of them. A per-file
//! pass then picks the definitions to rewrite. Editing regenerates whole
//! definitions at several sampling temperatures and splices them back by
//! syntax-tree spans. Every candidate is validated against the full test
//! suite.

pub mod editor;
pub mod engine;
pub mod indexer;
pub mod llm;
pub mod localizer;
pub mod pipeline;
pub mod validator;
pub mod vector;
pub mod workspace;
