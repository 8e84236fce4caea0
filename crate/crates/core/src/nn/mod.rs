//! Minimal reverse-mode differentiation and the layers the labeling model is
//! built from. Everything is `f64`.

mod graph;
mod layers;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, PatchGeometry, Var};
pub use layers::{
    gcn_layer, propagation_matrix, ConvEncoder, LayerNorm, Linear, Mlp, MultiHeadAttention,
    TransformerBlock, LAYER_NORM_EPS,
};
pub use params::{Initializer, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
