//! Losses, the combined objective, optimization, gradient verification and
//! checkpoints.

mod checkpoint;
mod gradcheck;
mod loss;
mod objective;
mod optim;
mod run;


pub use checkpoint::*;
pub use gradcheck::*;
pub use loss::*;
pub use objective::*;
pub use optim::*;
pub use run::*;
