use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;

/// Normal(0, std) samples truncated to ±2·std by redrawing.
pub fn trunc_normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive standard deviation");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}
