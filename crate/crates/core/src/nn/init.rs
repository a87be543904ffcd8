//! Weight initialization. Kaiming-uniform with fan-in scaling for conv and
//! affine weights; zeros for biases and shifts; ones for scales. All draws
//! come from one seeded stream in parameter registration order, so a given
//! seed fixes every initial weight bit-exactly.

use crate::autodiff::{Element, Rng, Tensor};

/// Kaiming-uniform: U(-b, b) with b = sqrt(6 / fan_in).
pub fn kaiming_uniform<T: Element>(rng: &mut Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::fromf(rng.uniform_in(-bound, bound)))
        .collect();
    Tensor::new(shape, data).expect("shape/product consistent")
}
