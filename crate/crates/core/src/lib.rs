pub mod bimatrix;
pub mod discounted;
pub mod ergodic;
mod error;
pub mod fixtures;
pub mod linalg;
pub mod markov;
pub mod mc;
pub mod model;
mod par;

pub use error::{Error, Result};
pub use model::{GameSpec, MarkovProfile, MixedAction, Player, StationaryProfile};
