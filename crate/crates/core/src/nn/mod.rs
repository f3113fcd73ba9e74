//! Parameterized layers: convolutions, GELU, Switchable Normalization and
//! depth attention, plus the parameter registry they draw from.

mod activation;
mod conv;
mod depth_attention;
mod params;
mod switch_norm;

pub use activation::gelu;
pub use conv::{Conv2d, ConvTranspose2d};
pub use depth_attention::{scale_channels, DepthAttention};
pub use params::{Bound, BufferId, Init, ParamEntry, ParamId, ParamRegistry};
pub use switch_norm::{switch_norm, BatchStats, SwitchNorm, SN_EPS, SN_MOMENTUM};

/// Train mode uses batch statistics and reports them for running-average
/// updates; eval mode uses the stored running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
