//! Quantization-aware training with adaptive step sizes.
//!
//! The crate provides, in rough dependency order:
//!
//! - [`tensor`] / [`graph`] / [`ops`]: a dense f64 tensor with reverse-mode
//!   autodiff and the layer operations small CNNs need,
//! - [`quant`]: uniform and adaptive (per-sample step) fake quantization with
//!   straight-through gradients, plus power-of-two and power-of-sqrt-two
//!   level sets for weights,
//! - [`adapter`]: the small trained module that turns activation statistics
//!   into the per-sample step factor,
//! - [`layers`] / [`model`]: quantized conv/linear layers and the desk-scale
//!   model zoo,
//! - [`train`] / [`data`]: SGD with cosine decay, augmentation, datasets,
//! - [`intinfer`]: integer-only inference for sqrt-two coded weights via
//!   shifts and a lookup table,
//! - [`analysis`]: parameter/OPS accounting and quantization diagnostics.
//!
//! The crate is `no_std`-compatible (with `alloc`); file IO, the CLI and the
//! on-disk formats live in the companion `asq-cli` crate. The optional
//! `parallel` feature (implies `std`) parallelizes the convolution kernels
//! over the batch without changing any result bit.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod adapter;
pub mod analysis;
pub mod data;
pub mod error;
pub mod graph;
pub mod intinfer;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod ops;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{BackwardArgs, BackwardFn, Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) mod testutil {
    use crate::tensor::Tensor;
    use alloc::vec::Vec;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| r.random_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Central finite differences of a scalar-valued function with respect
    /// to `inputs[wrt]`.
    pub fn fd_grad(
        inputs: &[Tensor],
        wrt: usize,
        h: f64,
        mut f: impl FnMut(&[Tensor]) -> f64,
    ) -> Tensor {
        let mut grad = Tensor::zeros(inputs[wrt].shape().to_vec());
        for idx in 0..inputs[wrt].numel() {
            let mut plus: Vec<Tensor> = inputs.to_vec();
            plus[wrt].data_mut()[idx] += h;
            let fp = f(&plus);
            let mut minus: Vec<Tensor> = inputs.to_vec();
            minus[wrt].data_mut()[idx] -= h;
            let fm = f(&minus);
            grad.data_mut()[idx] = (fp - fm) / (2.0 * h);
        }
        grad
    }

    pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .fold(0.0, |m, (&x, &y)| m.max(libm::fabs(x - y)))
    }
}
