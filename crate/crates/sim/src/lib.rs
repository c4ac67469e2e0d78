//! Seeded discrete-event simulation of ReCraft clusters.
//!
//! [`sim::run`] drives real protocol engines through a scripted scenario under
//! a fault-injecting network and returns a [`trace::Trace`]. The oracles in
//! [`safety`], [`liveness`] and [`linearizability`] then judge the trace.

pub mod fuzz;
pub mod linearizability;
pub mod liveness;
pub mod mutation;
pub mod oracle;
pub mod probe;
pub mod safety;
pub mod scenario;
pub mod scripts;
pub mod sim;
pub mod trace;

pub use scenario::Scenario;
pub use sim::run;
pub use trace::Trace;
