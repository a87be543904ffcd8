//! Neural-network building blocks on top of the autodiff tape: parameter
//! store, initializers, conv/linear/batchnorm layers, the attention
//! integrator, the projection head, optimizers, the learning-rate schedule,
//! and checkpoint serialization.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod init;
pub mod layers;
pub mod optim;
pub mod params;
pub mod projection;
pub mod schedule;

pub use attention::AttentionIntegrator;
pub use backbone::{Backbone, BackboneConfig};
pub use init::kaiming_uniform;
pub use layers::{BatchNorm2d, Conv2d, Linear};
pub use optim::{Adam, Optimizer, SgdNesterov};
pub use params::{Mounted, ParamId, ParamStore};
pub use projection::ProjectionHead;
pub use schedule::LrSchedule;
