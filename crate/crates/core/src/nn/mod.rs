//! Minimal differentiable substrate: flat parameter vectors, MLP layers,
//! softmax cross-entropy, SGD with momentum and a finite-difference checker.

mod gradcheck;
mod loss;
mod mlp;
mod optim;
mod params;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use loss::{softmax_cross_entropy, softmax_rows, softmax_xent_rows};
pub use mlp::{forward, Activation, Mlp, MlpCache, MlpSpec};
pub use optim::{cosine_lr, OptimizerState, SgdConfig};
pub use params::{LayoutEntry, ParamVector};
