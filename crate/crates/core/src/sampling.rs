//! Seedable sampling helpers shared by pool synthesis and tests. Uses
//! Box-Muller so the crate stays buildable without std; every draw consumes
//! a fixed number of RNG words, which keeps streams reproducible.

use alloc::vec::Vec;

use rand::Rng;

use crate::fmath;
use crate::linalg::DenseMatrix;

/// One standard normal draw (Box-Muller, no caching).
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Avoid ln(0) by sampling the half-open interval from the top.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    fmath::sqrt(-2.0 * fmath::ln(u1)) * fmath::cos(2.0 * core::f64::consts::PI * u2)
}

/// Sample from N(0, C) given the lower Cholesky factor of C.
pub fn mvn_sample<R: Rng + ?Sized>(chol_lower: &DenseMatrix, rng: &mut R) -> Vec<f64> {
    let n = chol_lower.nrows();
    let z: Vec<f64> = (0..n).map(|_| standard_normal(rng)).collect();
    let mut out = alloc::vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..=i {
            acc += chol_lower.get(i, j) * z[j];
        }
        out[i] = acc;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 40_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let x = standard_normal(&mut rng);
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn mvn_respects_covariance() {
        let c = DenseMatrix::from_rows(&[&[2.0, 0.6], &[0.6, 1.0]]);
        let l = crate::linalg::cholesky(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 60_000;
        let mut acc = [0.0f64; 3];
        for _ in 0..n {
            let s = mvn_sample(&l, &mut rng);
            acc[0] += s[0] * s[0];
            acc[1] += s[0] * s[1];
            acc[2] += s[1] * s[1];
        }
        assert!((acc[0] / n as f64 - 2.0).abs() < 0.05);
        assert!((acc[1] / n as f64 - 0.6).abs() < 0.04);
        assert!((acc[2] / n as f64 - 1.0).abs() < 0.03);
    }
}
