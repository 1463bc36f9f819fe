use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Scalar;

/// Samples from N(0, std^2) truncated to +/- 2 std by rejection.
pub fn truncated_normal<T: Scalar>(n: usize, std: f64, rng: &mut impl Rng) -> Vec<T> {
    (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::lit(z * std);
            }
        })
        .collect()
}
