//! Multi-task curriculum transfer for cross-domain attribute recognition.
//!
//! A shared five-block NIN trunk feeds one fully-connected branch per
//! attribute. Training first fits the network on clean source renders,
//! then copies it into a target network and adapts it to cluttered target
//! renders with a softmax loss plus a cross-domain triplet embedding loss,
//! keeping everything but target conv5 and the FC layers frozen.


pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradsuite;

pub mod losses;
pub mod metrics;

pub mod model;
pub mod optim;
pub mod trainer;
mod rng;
pub mod schema;


pub use error::{CoreError, Result};
pub use schema::{Attribute, AttributeSchema};
