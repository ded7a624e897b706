use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// Tensor with i.i.d. `N(0, std^2)` entries.
pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * std) as f32
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}
