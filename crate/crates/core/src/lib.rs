//! Three-view instance discrimination for self-supervised image representations.
//!
//! Each source image yields two core views from a conservative augmentation
//! pipeline and one auxiliary view from a larger, riskier operation pool. A
//! shared encoder embeds all three views and the GNT-Xent loss contrasts the
//! three positive pairs against their in-batch negatives. Everything needed to
//! train and evaluate at desk scale lives here:
//!
//! * [`tensor`]: dense arrays with a reverse-mode tape and finite-difference checks
//! * [`augment`]: basic and auxiliary augmentation producing [`augment::ViewTriplet`]s
//! * [`model`]: the small convolutional encoder and its checkpoint container
//! * [`loss`]: GNT-Xent and NT-Xent with analytic similarity-level gradients
//! * [`optim`]: SGD with momentum, Adam, cosine and step learning-rate schedules
//! * [`data`]: CIFAR-10 binary reader, synthetic datasets, minibatch sampling
//! * [`eval`]: weighted kNN and linear evaluation
//! * [`train`]: experiment configs, ablation presets and the training loop
//! * [`gradcheck`]: the finite-difference suite behind the `gradcheck` command

pub mod augment;
pub mod data;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod optim;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
