//! Generator, K-class discriminator, and the training losses.

mod arch;
mod disc;
mod gen;
pub mod gradcheck;
pub mod losses;

pub use arch::{DiscArch, DiscLayerSpec, GenArch};
pub use disc::{DiscCache, DiscOutput, Discriminator};
pub use gen::{GenCache, Generator};
pub use gradcheck::{grad_check, GradCheckReport, LossKind};
pub use losses::{
    loss_feature_matching, loss_feature_matching_with_grad, loss_supervised,
    loss_supervised_with_grad, loss_unsupervised, loss_unsupervised_with_grad,
    unsupervised_terms, LossBundle,
};
