//! Goal-aware modelling of web browsing sessions.
//!
//! Goals from a three-layer taxonomy are embedded in the Poincaré ball
//! ([`goal_embed`]); a weakly supervised estimator maps page visits into the
//! same space ([`page_encoder`]); attention blocks build visit, session and
//! personal representations ([`session_model`]) that drive in-session
//! recommendation, revisitation prediction and goal-based grouping
//! ([`tasks`]). [`metrics`] and [`dataio`] cover evaluation and logs.

pub mod dataio;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod goal_embed;
pub mod manifold;
pub mod metrics;
pub mod nn;
pub mod page_encoder;
pub mod session_model;
pub mod tasks;
pub mod taxonomy;

pub use error::{GowebError, Result};
