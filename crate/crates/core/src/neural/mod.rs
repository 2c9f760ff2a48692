//! Multilayer perceptrons, initialization, Adam, and a Lipschitz probe.

mod adam;
mod lipschitz;
mod mlp;

pub use adam::Adam;
pub use lipschitz::empirical_lipschitz;
pub use mlp::{BoundMlp, Mlp};

/// Hidden width of every network.
pub const HIDDEN: usize = 64;
