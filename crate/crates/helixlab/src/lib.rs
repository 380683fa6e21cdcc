//! helixlab — a desk-scale workbench for helical number representations and
//! the Clock addition circuit in small transformers.
//!
//! The crate trains small autoregressive transformers on single-token
//! arithmetic tasks, captures and re-injects activations at named sites, fits
//! generalized helices (and baseline structures) to number representations,
//! and runs the full causal toolkit on top: activation patching, fit
//! patching, direct-effect path patching, attribution patching, subspace
//! ablation, head categorization, neuron-level preactivation modeling, and
//! error analysis. Results are emitted as CSV tables and self-contained SVG
//! figures.
//!
//! The primary interface is the library plus the runnable programs under
//! `examples/`; a thin `helixlab` binary exposes the same entry points as
//! subcommands for scripted runs.
//!
//! Quick tour:
//!
//! ```no_run
//! use helixlab::model::{ModelConfig, TaskSpec, TrainConfig, train_task};
//!
//! let task = TaskSpec::add_mod(7);
//! let config = ModelConfig::tiny(&task, 0);
//! let outcome = train_task(&config, &task, &TrainConfig::quick()).unwrap();
//! println!("train acc = {}", outcome.final_train_accuracy);
//! ```

pub mod causal;
pub mod error;
pub mod manifold;
pub mod model;
pub mod neurons;
pub mod numerics;
pub mod pipeline;
pub mod report;
pub mod synthetic;
pub mod trace;

pub use error::{Error, Result};

/// Initialize the global thread pool from `HELIXLAB_THREADS`.
///
/// Call once at process start. A missing or unparseable variable leaves the
/// default pool (one thread per core). Returns the configured cap, if any.
pub fn init_threads() -> Option<usize> {
    let cap: usize = std::env::var("HELIXLAB_THREADS").ok()?.parse().ok()?;
    let cap = cap.max(1);
    // Ignore the error if a pool was already built (e.g. by a test harness).
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cap).build_global();
    Some(cap)
}
