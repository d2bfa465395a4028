//! Distributed production system for large simulation and processing
//! datasets: steering documents, a parameter expression language, a
//! job/task lifecycle with timeouts and retries, a bookkeeping store, an
//! RPC protocol, queueing backends, pilots and task graphs.

pub mod dagengine;
pub mod expr;
pub mod lifecycle;
pub mod par;
pub mod steering;
pub mod datastore;
pub mod digest;
pub mod rpc;
pub mod storage;
pub mod config;
pub mod gridplugins;
pub mod taskmodules;
pub mod daemons;
pub mod pilot;
pub mod cli;
