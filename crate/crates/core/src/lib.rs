//! Cross-domain sequential recommendation over two item domains.
//!
//! Items are embedded once by a (frozen) text-embedding provider, adapted into
//! model space, and encoded alongside two per-domain local threads. Users are
//! profiled hierarchically by a chat provider and the profile embedding is
//! aligned with the shared-thread user state during training.

#![allow(clippy::needless_range_loop)]

pub mod corpus;
pub mod evaluator;
pub mod gateway;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod profiler;
pub mod semantic;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
