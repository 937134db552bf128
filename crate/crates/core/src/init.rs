//! Weight initialization.

use rand::Rng;

use crate::tensor::{Scalar, Shape, Tensor};

/// Conv weight drawn from `Normal(0, 2/fan_in)` with `fan_in = C_in*kh*kw`.
pub fn msra_weight<T: Scalar>(shape: Shape, rng: &mut impl Rng) -> Tensor<T> {
    use rand_distr::{Distribution, StandardNormal};
    let fan_in = (shape.c * shape.h * shape.w) as f64;
    let std = (2.0 / fan_in).sqrt();
    let mut data = Vec::with_capacity(shape.count());
    for _ in 0..shape.count() {
        let z: f64 = StandardNormal.sample(rng);
        data.push(T::from_f64(z * std));
    }
    Tensor::from_vec(shape, data).expect("sized above")
}

/// Zero bias vector for `c_out` output channels.
pub fn zero_bias<T: Scalar>(c_out: usize) -> Tensor<T> {
    Tensor::zeros(Shape::new(c_out, 1, 1, 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn msra_variance_tracks_fan_in() {
        // 3x3 kernel over 16 channels: fan_in 144, target variance 2/144.
        // 70 output channels gives >= 10^4 draws.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = msra_weight::<f64>(Shape::new(70, 16, 3, 3), &mut rng);
        let n = w.data().len() as f64;
        let mean: f64 = w.data().iter().sum::<f64>() / n;
        let var: f64 = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let target = 2.0 / 144.0;
        assert!((var - target).abs() / target < 0.10, "var {var} vs {target}");
    }

    #[test]
    fn msra_is_deterministic_per_seed() {
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            msra_weight::<f32>(Shape::new(4, 4, 3, 3), &mut rng)
        };
        assert_eq!(draw().data(), draw().data());
    }
}
