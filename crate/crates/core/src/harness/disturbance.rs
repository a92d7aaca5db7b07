use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Per-channel zero-mean Gaussian with standard deviation `sigma`, rejection-sampled into `[−sigma, sigma]`.
pub fn sample_disturbance<R: Rng + ?Sized>(sigma: f64, n_w: usize, rng: &mut R) -> DVector<f64> {
    if !(sigma > 0.0) {
        return DVector::zeros(n_w);
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is positive and finite");
    DVector::from_fn(n_w, |_, _| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= sigma {
            break v;
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_sigma_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_disturbance(0.0, 3, &mut rng), DVector::zeros(3));
    }

    #[test]
    fn truncation_and_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sigma = 0.1;
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_disturbance(sigma, 1, &mut rng)[0]).collect();
        assert!(xs.iter().all(|x| x.abs() <= sigma));
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 3.0 * (var / n as f64).sqrt());
        // Unit-truncated normal variance: 1 − 2φ(1)/(2Φ(1) − 1) ≈ 0.2911.
        assert!(var < sigma * sigma);
        assert!((var / (sigma * sigma) - 0.2911).abs() < 0.01);
    }
}
