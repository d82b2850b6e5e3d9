//! Zone-based privacy enforcement for mobile devices.
//!
//! A premise is split into detection zones, each watched by an FVU. The
//! premise console compiles policies and pushes them to its FVUs, which
//! interrogate devices entering their zone, enforce whatever settings deviate,
//! and report outcomes back. Consoles of different premises share a replicated
//! directory. [`sim`] runs the whole system as a deterministic discrete-event
//! simulation over authenticated binary frames.

pub mod console;
pub mod device;
pub mod egos;
pub mod fvu;
pub mod geometry;
pub mod policy;
pub mod protocol;
pub mod scenario;
pub mod sim;
pub mod time;

pub use scenario::{load_scenario, parse_scenario};
pub use sim::{check_breach_bound, run_scenario, RunOutput, RunReport, Scenario, ScenarioError};
pub use time::SimTime;
