//! Networked farming of fitness evaluations: the coordination server, its
//! client, the worker loop and the master-side remote evaluator.

pub mod client;
pub mod journal;
pub mod remote;
pub mod server;
pub mod worker;

pub use client::{ClaimOutcome, Client, ClientError};
pub use remote::RemoteEvaluator;
pub use server::{LeasePolicy, ServerConfig, ServerHandle};
pub use worker::{follow, run_worker, WorkerConfig, WorkerError, WorkerSummary};
