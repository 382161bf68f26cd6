//! Exploratory-counseling dialogue engine.
//!
//! A turn flows through four stages: the state builder extracts cognitive
//! errors, formulation spans and a theory-of-mind state from the user
//! utterance; memory folds them into a conservative six-slot formulation and a
//! running summary; the strategy planner picks MI behavioral codes; and the
//! response generator drafts a reply whose question is chosen from the most
//! under-specified slots and revised by a critic. Every model call goes through
//! [`gateway::Gateway`], which validates structured output and retries.

#[macro_use]
mod macros;

pub mod config;
pub mod domain;
pub mod engine;
pub mod gateway;
pub mod memory;
pub mod metrics;
pub mod replay;
pub mod response;
pub mod schema;
pub mod session;
pub mod state_builder;
pub mod strategy;
pub mod text;
