//! Parametric hand model acting as the prior network.

mod head;
mod lbs;
pub mod synthetic;
mod template;

pub use head::{build_prior_head, init_prior_head, PriorDistribution, PriorNodes};
pub use lbs::{build_lbs, lbs_forward, rest_coords, LbsNodes};
pub use template::HandTemplate;
