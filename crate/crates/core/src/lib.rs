//! cartlab: a workbench for evaluating and optimizing multi-agent conversational
//! shopping assistants.
//!
//! The crate is organized around a fully deterministic pipeline:
//!
//! - [`worldsim`] — the grocery world: stores, catalogs, carts, and the tool
//!   calls agents execute against it.
//! - [`tracemodel`] — the canonical episode record (turns, tool calls, item
//!   attempts, store history) and its JSON wire format.
//! - [`goals`] — deterministic extraction of what the user asked for from the
//!   dialogue (item requests, budget, dietary statements).
//! - [`rubric`] — the four-domain check rubric: conditional activation and
//!   aggregation of boolean verdicts into trace scores.
//! - [`judge`] — verdict producers: a rule-based oracle judge, an LLM-backed
//!   judge over prompt templates, agreement measurement, and judge calibration.
//! - [`usersim`] — the hybrid simulated user: replay logged turns while agent
//!   actions stay equivalent, synthesize persona responses after divergence.
//! - [`agentruntime`] — the orchestrator + sub-agent system under test,
//!   parametrized by a prompt bundle with a bounded shared context.
//! - [`optimizer`] — per-node prompt search over invocation datasets and joint
//!   bundle optimization via re-simulation with a safety veto.
//! - [`backend`] — the pluggable completion interface isolating all
//!   nondeterminism: HTTP client, scripted mock, record/replay cassette.
//! - [`fixtures`] — planted worlds, personas, and the hand-labeled trace suite
//!   used by tests and the bundled demo configuration.
//!
//! Everything outside of `backend::HttpBackend` is pure computation: given the
//! same inputs and seed, every pipeline stage produces byte-identical output.

pub mod agentruntime;
pub mod backend;
pub mod fixtures;
pub mod goals;
pub mod judge;
pub mod optimizer;
pub mod rubric;
pub mod tracemodel;
pub mod usersim;
pub mod worldsim;
