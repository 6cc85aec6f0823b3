//! A deliberately small reverse-mode autodiff library for f32 image tensors.
//!
//! It supports exactly the operations a compact diffusion U-Net needs:
//! convolutions, group normalization, SiLU, nearest upsampling, channel
//! concatenation, token reshuffling and multi-head attention. Each op stores
//! what its hand-derived backward rule needs on a [`Graph`]; a single
//! [`Graph::backward`] sweep returns parameter gradients.
//!
//! ```
//! use autograd::{Graph, ParamStore, Tensor};
//!
//! let mut store = ParamStore::new();
//! let w = store.add("w", Tensor::new(&[2, 1], vec![3.0, -1.0]), 0);
//! let mut g = Graph::new(&store);
//! let x = g.input(Tensor::new(&[1, 2], vec![1.0, 2.0]));
//! let wv = g.param(w);
//! let y = g.linear(x, wv, None);
//! assert_eq!(g.value(y).data(), &[1.0]);
//! let grads = g.backward(y, Tensor::full(&[1, 1], 1.0));
//! assert_eq!(grads.params.get(w).unwrap().data(), &[1.0, 2.0]);
//! ```

mod graph;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{Adam, Grads, Param, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}
