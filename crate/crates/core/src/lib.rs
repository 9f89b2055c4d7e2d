//! Translate multi-file C projects into compilable Rust with an LLM in the loop.
//!
//! The pipeline runs in two phases. The preprocessing phase merges each C
//! compilation unit with its quoted includes, uniquifies static names, strips
//! redundant declarations, reorders code elements so definitions precede their
//! references, and extracts conditional-compilation macros into build-script
//! feature records. The translation phase segments each merged module into
//! translation units sized for the backend's context window, drives the LLM
//! through translate / compile / repair cycles with context-supplementing
//! metadata prompts, and reports line and element compilation coverage.
//!
//! Modules map onto the pipeline stages:
//!
//! - [`c_model`]: lexical analysis of C source (element scanning, include
//!   graph, call graph, conditional blocks, declaration pairing)
//! - [`preprocess`]: include merging, static uniquification, declaration
//!   stripping, topological reordering, cfg-macro extraction
//! - [`segment`]: translation-unit planning and the dynamic resize policy
//! - [`metadata`]: the JSON metadata store and context selection
//! - [`prompts`]: prompt building, token budgeting, multipart assembly
//! - [`llm_backend`]: chat backends, the replay backend, conversation memory
//! - [`orchestrator`]: workspace generation, compile-repair loop, coverage
//! - [`cli`]: command implementations shared by the `seamstress` binary

pub mod c_model;
pub mod cli;
pub mod llm_backend;
pub mod metadata;
pub mod orchestrator;
pub mod preprocess;
pub mod prompts;
pub mod segment;
mod text;

pub use text::MaskedSource;
