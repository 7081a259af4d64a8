//! Numerical kernels for the recognition model: the per-page variance
//! regularizer, loss composition, local/global self-attention with fusion,
//! and a greedy character decoder harness.
//!
//! Dense arrays are `ndarray` arrays of `f64`; [`RealArray`] is the dynamic
//! rank form used at serialization boundaries.

mod attention;
mod decode;
mod loss;
mod weights;

pub use attention::{
    attention_weights, fuse, global_attend, local_embed, scaled_dot_attention, softmax_rows,
    AttentionConfig, Linear, LocalGlobalEncoder,
};
pub use decode::{greedy_decode, CharVocab, Token};
pub use loss::{
    sequence_cross_entropy, sequence_cross_entropy_logits, total_loss, variance_loss,
    variance_loss_grad, BoxGrad, LossBreakdown, LossTerms, LossWeights,
};
pub use weights::{Tensor, WeightFile};

/// Row-major dense array of any rank.
pub type RealArray = ndarray::ArrayD<f64>;
