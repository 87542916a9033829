//! Equal-area polar partition of the unit disc and the discretized scattering
//! operator built on it.

use nalgebra::{DMatrix, Vector2};
use serde::{Deserialize, Serialize};

/// Equal-area polar partition of the disc of radius ρ: `n_r` radial rings with
/// boundaries at `r_i = ρ sqrt(i/n_r)` and `n_theta` angular sectors, so every
/// bin has area `πρ²/(n_r n_theta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscPartition {
    pub n_r: usize,
    pub n_theta: usize,
    pub rho: f64,
}

impl DiscPartition {
    pub fn new(n_r: usize, n_theta: usize, rho: f64) -> Self {
        assert!(n_r >= 1 && n_theta >= 1 && rho > 0.0);
        DiscPartition { n_r, n_theta, rho }
    }

    pub fn len(&self) -> usize {
        self.n_r * self.n_theta
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Bin index of a point of the disc.
    pub fn bin_of(&self, u: Vector2<f64>) -> usize {
        let s = (u.norm_squared() / (self.rho * self.rho)).min(1.0);
        let i = ((s * self.n_r as f64) as usize).min(self.n_r - 1);
        let mut theta = u.y.atan2(u.x);
        if theta < 0.0 {
            theta += 2.0 * std::f64::consts::PI;
        }
        let j = ((theta / (2.0 * std::f64::consts::PI) * self.n_theta as f64) as usize)
            .min(self.n_theta - 1);
        i * self.n_theta + j
    }

    /// Representative point of a bin: the centroid in `(r², θ)` coordinates,
    /// which is the equal-area midpoint.
    pub fn representative(&self, idx: usize) -> Vector2<f64> {
        let (i, j) = (idx / self.n_theta, idx % self.n_theta);
        let s = (i as f64 + 0.5) / self.n_r as f64;
        let r = self.rho * s.sqrt();
        let theta = 2.0 * std::f64::consts::PI * (j as f64 + 0.5) / self.n_theta as f64;
        Vector2::new(r * theta.cos(), r * theta.sin())
    }

    /// Draw a point uniformly inside bin `idx` (uniform in `(r², θ)`).
    pub fn sample_in_bin<R: rand::Rng>(&self, idx: usize, rng: &mut R) -> Vector2<f64> {
        let (i, j) = (idx / self.n_theta, idx % self.n_theta);
        let s = (i as f64 + rng.gen::<f64>()) / self.n_r as f64;
        let r = self.rho * s.sqrt();
        let theta =
            2.0 * std::f64::consts::PI * (j as f64 + rng.gen::<f64>()) / self.n_theta as f64;
        Vector2::new(r * theta.cos(), r * theta.sin())
    }

    /// Area of each bin (equal by construction).
    pub fn bin_area(&self) -> f64 {
        std::f64::consts::PI * self.rho * self.rho / self.len() as f64
    }
}

/// Discretized scattering operator: an N×N row-stochastic matrix over an
/// equal-area disc partition, with the sampling metadata needed to reproduce
/// and audit it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub partition: DiscPartition,
    /// Row-major entries, rows summing to 1.
    pub data: Vec<f64>,
    pub samples_per_bin: u64,
    pub seed: u64,
    /// Rays excluded by tracing errors (bounce cap, stalls), total.
    pub failed_rays: u64,
    /// Maximum entrywise asymmetry ‖P − Pᵀ‖_max observed at build time.
    pub asymmetry: f64,
}

impl TransitionMatrix {
    pub fn n(&self) -> usize {
        self.partition.len()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n(), self.n(), &self.data)
    }

    /// Verify row-stochasticity within `tol` per row.
    pub fn check_row_stochastic(&self, tol: f64) -> bool {
        let n = self.n();
        (0..n).all(|i| {
            let row_sum: f64 = self.data[i * n..(i + 1) * n].iter().sum();
            (row_sum - 1.0).abs() <= tol && self.data[i * n..(i + 1) * n].iter().all(|&p| p >= 0.0)
        })
    }

    /// Sample the next bin from row `i`.
    pub fn sample_row<R: rand::Rng>(&self, i: usize, rng: &mut R) -> usize {
        let n = self.n();
        let x: f64 = rng.gen();
        let mut acc = 0.0;
        for j in 0..n {
            acc += self.data[i * n + j];
            if x < acc {
                return j;
            }
        }
        n - 1
    }

    /// Write the matrix as CSV (one row per line).
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.n();
        for i in 0..n {
            let row: Vec<String> = self.data[i * n..(i + 1) * n]
                .iter()
                .map(|p| format!("{p:.17e}"))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bins_partition_the_disc_with_equal_areas() {
        let p = DiscPartition::new(10, 10, 1.0);
        assert_eq!(p.len(), 100);
        assert_relative_eq!(
            p.bin_area() * p.len() as f64,
            std::f64::consts::PI,
            max_relative = 1e-12
        );
        // Monte Carlo occupancy of uniform points is uniform across bins
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = vec![0u64; p.len()];
        for _ in 0..1_000_000 {
            let u = crate::channel_flight::sample_cosine_law(&mut rng, 1.0);
            counts[p.bin_of(u.u)] += 1;
        }
        let r = crate::stats::chi_square_uniform(&counts);
        assert!(r.p_value > 0.01, "p = {}", r.p_value);
    }

    #[test]
    fn representative_points_live_in_their_bins() {
        let p = DiscPartition::new(7, 13, 2.0);
        for idx in 0..p.len() {
            assert_eq!(p.bin_of(p.representative(idx)), idx);
        }
    }

    #[test]
    fn bin_samples_live_in_their_bins() {
        let p = DiscPartition::new(5, 8, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for idx in 0..p.len() {
            for _ in 0..100 {
                assert_eq!(p.bin_of(p.sample_in_bin(idx, &mut rng)), idx);
            }
        }
    }

    #[test]
    fn row_sampling_respects_probabilities() {
        let partition = DiscPartition::new(1, 2, 1.0);
        let tm = TransitionMatrix {
            partition,
            data: vec![0.25, 0.75, 0.5, 0.5],
            samples_per_bin: 0,
            seed: 0,
            failed_rays: 0,
            asymmetry: 0.0,
        };
        assert!(tm.check_row_stochastic(1e-12));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ones = 0u64;
        for _ in 0..100_000 {
            ones += tm.sample_row(0, &mut rng) as u64;
        }
        let frac = ones as f64 / 100_000.0;
        assert!((frac - 0.75).abs() < 0.01, "frac = {frac}");
    }
}
