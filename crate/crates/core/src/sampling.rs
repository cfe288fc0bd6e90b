//! Reproducible low-discrepancy sampling of `[0, T] × X-ball × U-box × Λ-ball`.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::norms::{vector_norm, NormKind};

const PRIMES: [u32; 48] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
    97, 101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191,
    193, 197, 199, 211, 223,
];

/// How many points a sampled check draws, and from which seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sampler {
    pub budget: usize,
    pub seed: u64,
}

impl Sampler {
    pub fn new(budget: usize, seed: u64) -> Self {
        Sampler { budget, seed }
    }
}

impl Default for Sampler {
    fn default() -> Self {
        Sampler { budget: 256, seed: 0 }
    }
}

/// Halton sequence with a seeded Cranley–Patterson rotation.
///
/// Point `i` does not depend on how many points are drawn, so a larger budget
/// always visits a superset of a smaller one.
#[derive(Debug, Clone)]
pub struct Halton {
    shifts: Vec<f64>,
}

fn radical_inverse(mut i: u64, base: u32) -> f64 {
    let b = base as u64;
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % b) as f64;
        i /= b;
        f *= inv;
    }
    r
}

impl Halton {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim <= PRIMES.len(), "Halton dimension {dim} exceeds {}", PRIMES.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shifts = (0..dim).map(|_| rng.gen::<f64>()).collect();
        Halton { shifts }
    }

    pub fn dim(&self) -> usize {
        self.shifts.len()
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        self.shifts
            .iter()
            .zip(PRIMES)
            .map(|(s, p)| (radical_inverse(i as u64 + 1, p) + s).fract())
            .collect()
    }
}

/// Maps a cube point `s ∈ [0, 1)^n` into the closed ball of radius `r` about
/// `center` in the given norm. Cube corners land on the sphere.
pub fn ball_point(center: &DVector<f64>, radius: f64, kind: &NormKind, s: &[f64]) -> DVector<f64> {
    let y = DVector::from_fn(center.len(), |i, _| 2.0 * s[i] - 1.0);
    let linf = y.amax();
    let ny = vector_norm(&y, kind).unwrap_or(0.0);
    if linf == 0.0 || ny == 0.0 {
        return center.clone();
    }
    center + y * (radius * linf / ny)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn radical_inverse_base_two() {
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(2, 2), 0.25);
        assert_eq!(radical_inverse(3, 2), 0.75);
        assert_eq!(radical_inverse(1, 3), 1.0 / 3.0);
    }

    #[test]
    fn points_are_reproducible_and_in_cube() {
        let a = Halton::new(5, 9);
        let b = Halton::new(5, 9);
        for i in 0..100 {
            let p = a.point(i);
            assert_eq!(p, b.point(i));
            assert!(p.iter().all(|v| (0.0..1.0).contains(v)));
        }
        assert_ne!(Halton::new(5, 10).point(0), a.point(0));
    }

    #[test]
    fn ball_points_stay_inside() {
        let h = Halton::new(3, 1);
        let c = dvector![1.0, -2.0, 0.5];
        for kind in [NormKind::L1, NormKind::L2, NormKind::LInf, NormKind::WeightedL2(vec![1.0, 2.0, 3.0])] {
            for i in 0..200 {
                let x = ball_point(&c, 0.7, &kind, &h.point(i));
                assert!(vector_norm(&(x - &c), &kind).unwrap() <= 0.7 + 1e-12);
            }
            let corner = ball_point(&c, 0.7, &kind, &[1.0, 0.0, 1.0]);
            assert!((vector_norm(&(corner - &c), &kind).unwrap() - 0.7).abs() < 1e-12);
        }
    }
}
