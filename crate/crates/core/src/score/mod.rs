//! Score models: an analytic Gaussian-random-field score and the mean-bypass U-net.

mod gaussian;
pub mod unet;

pub use gaussian::GaussianFieldScore;
pub use unet::{BypassKind, UNetConfig, UNetScore};

use crate::error::Result;
use crate::fields::Field;

/// Approximation of `grad_x log p_t(x)` for the noised channels of a field.
///
/// Implementations must be safe for concurrent read-only evaluation.
pub trait ScoreModel: Sync {
    /// Channels the model produces a score for, in output order.
    fn noised_channels(&self) -> &[String];

    /// Context channels the model reads; they must be present in the input.
    fn context_channels(&self) -> &[String];

    /// Scores every sample of `x` at its own time `t[sample]`. The output holds
    /// the channels of [`ScoreModel::noised_channels`].
    fn evaluate(&self, x: &Field, t: &[f64]) -> Result<Field>;
}
