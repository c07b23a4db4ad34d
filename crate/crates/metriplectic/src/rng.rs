//! Counter-based random numbers for bit-reproducible parallel simulation.
//!
//! Every random quantity in the crate is a pure function of a 64-bit seed
//! and a counter, so ensembles produce identical output regardless of
//! execution order or worker count. The generator is Philox2x64-10
//! (Salmon et al.'s multiply-hi/lo bijection, 10 rounds, Weyl key
//! schedule), fixed here once and for all:
//!
//! ```text
//! round(c0, c1, k):  hi:lo = c0 * 0xD2B74407B1CE6E93 (128-bit product)
//!                    c0' = hi ^ k ^ c1,   c1' = lo,   k' = k + 0x9E3779B97F4A7C15
//! block(seed; c0, c1) = 10 rounds applied to (c0, c1) with k0 = seed
//! ```
//!
//! Trajectory noise uses the counter layout
//! `(c0, c1) = (STREAM_TRAJECTORY | traj, step << 8 | channel)`, i.e. one
//! block per (trajectory, step, noise channel). Normal variates come from
//! the Box-Muller cosine branch applied to the two words of a block.

const PHILOX_M: u64 = 0xD2B7_4407_B1CE_6E93;
const PHILOX_W: u64 = 0x9E37_79B9_7F4A_7C15;

/// Stream tags keep independent uses of the same seed disjoint.
pub mod stream {
    /// Ensemble trajectory noise.
    pub const TRAJECTORY: u64 = 0x01 << 56;
    /// Verifier polynomial-triple coefficients.
    pub const VERIFIER: u64 = 0x02 << 56;
    /// Low-discrepancy sequence offsets.
    pub const LOW_DISCREPANCY: u64 = 0x03 << 56;
    /// Generic auxiliary draws (tests, initial-condition samplers).
    pub const AUX: u64 = 0x04 << 56;
}

/// One Philox2x64-10 block.
#[inline]
pub fn philox2x64(mut c0: u64, mut c1: u64, seed: u64) -> (u64, u64) {
    let mut key = seed;
    for _ in 0..10 {
        let prod = (c0 as u128) * (PHILOX_M as u128);
        let hi = (prod >> 64) as u64;
        let lo = prod as u64;
        c0 = hi ^ key ^ c1;
        c1 = lo;
        key = key.wrapping_add(PHILOX_W);
    }
    (c0, c1)
}

#[inline]
fn to_unit_open(x: u64) -> f64 {
    // (0, 1]: never zero, so it is safe under ln().
    ((x >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

#[inline]
fn to_unit_half_open(x: u64) -> f64 {
    // [0, 1)
    (x >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

/// Keyed generator: a seed plus counter arithmetic. Copy-cheap and stateless.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CounterRng {
    seed: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Two uniform draws for the given counter, in ((0,1], [0,1)).
    #[inline]
    pub fn uniform_pair(&self, c0: u64, c1: u64) -> (f64, f64) {
        let (a, b) = philox2x64(c0, c1, self.seed);
        (to_unit_open(a), to_unit_half_open(b))
    }

    /// Standard normal draw for the given counter (Box-Muller, cosine branch).
    #[inline]
    pub fn normal(&self, c0: u64, c1: u64) -> f64 {
        let (u1, u2) = self.uniform_pair(c0, c1);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Noise channel `channel` of step `step` of trajectory `traj`.
    #[inline]
    pub fn trajectory_normal(&self, traj: u64, step: u64, channel: u32) -> f64 {
        debug_assert!(channel < 256);
        self.normal(stream::TRAJECTORY | traj, (step << 8) | channel as u64)
    }
}

/// Sequential façade over [`CounterRng`] for consumers that just want a
/// stream of draws (verifier coefficients, samplers). The stream identity
/// is part of the counter, so distinct streams never collide.
#[derive(Clone, Debug)]
pub struct KeyedStream {
    rng: CounterRng,
    c0: u64,
    counter: u64,
}

impl KeyedStream {
    pub fn new(seed: u64, stream_tag: u64) -> Self {
        KeyedStream {
            rng: CounterRng::new(seed),
            c0: stream_tag,
            counter: 0,
        }
    }

    pub fn next_uniform(&mut self) -> f64 {
        let (u, _) = self.rng.uniform_pair(self.c0, self.counter);
        self.counter += 1;
        u
    }

    /// Uniform in [lo, hi).
    pub fn next_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * (1.0 - self.next_uniform())
    }

    pub fn next_normal(&mut self) -> f64 {
        let z = self.rng.normal(self.c0, self.counter);
        self.counter += 1;
        z
    }
}

/// Deterministic low-discrepancy points in a box: the additive Kronecker
/// sequence `x_n = frac(s + n * alpha)` with `alpha_k = g^-(k+1)` for the
/// unique real root g > 1 of `x^(d+1) = x + 1`, shifted by a seeded offset s.
pub fn low_discrepancy_points(
    seed: u64,
    count: usize,
    bounds: &[(f64, f64)],
) -> Vec<nalgebra::DVector<f64>> {
    let dim = bounds.len();
    let g = generalized_golden_ratio(dim);
    let mut alpha = Vec::with_capacity(dim);
    let mut p = 1.0;
    for _ in 0..dim {
        p /= g;
        alpha.push(p);
    }
    let rng = CounterRng::new(seed);
    let offset: Vec<f64> = (0..dim)
        .map(|k| rng.uniform_pair(stream::LOW_DISCREPANCY, k as u64).1)
        .collect();
    (0..count)
        .map(|n| {
            nalgebra::DVector::from_iterator(
                dim,
                (0..dim).map(|k| {
                    let t = (offset[k] + (n as f64 + 1.0) * alpha[k]).fract();
                    let (lo, hi) = bounds[k];
                    lo + (hi - lo) * t
                }),
            )
        })
        .collect()
}

fn generalized_golden_ratio(dim: usize) -> f64 {
    // Newton iteration on x^(d+1) - x - 1 = 0 starting from 2.
    let d = dim as f64;
    let mut x: f64 = 2.0;
    for _ in 0..64 {
        let f = x.powf(d + 1.0) - x - 1.0;
        let fp = (d + 1.0) * x.powf(d) - 1.0;
        let next = x - f / fp;
        if (next - x).abs() < 1e-15 {
            return next;
        }
        x = next;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_are_deterministic_and_distinct() {
        let rng = CounterRng::new(42);
        assert_eq!(rng.uniform_pair(0, 0), rng.uniform_pair(0, 0));
        assert_ne!(rng.uniform_pair(0, 0), rng.uniform_pair(0, 1));
        assert_ne!(rng.uniform_pair(0, 0), rng.uniform_pair(1, 0));
        let other = CounterRng::new(43);
        assert_ne!(rng.uniform_pair(0, 0), other.uniform_pair(0, 0));
    }

    #[test]
    fn normals_have_plausible_moments() {
        let rng = CounterRng::new(7);
        let n = 200_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for i in 0..n {
            let z = rng.normal(stream::AUX, i);
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn low_discrepancy_points_fill_bounds() {
        let pts = low_discrepancy_points(3, 1000, &[(-1.0, 1.0), (0.0, 4.0)]);
        assert_eq!(pts.len(), 1000);
        for p in &pts {
            assert!(p[0] >= -1.0 && p[0] <= 1.0);
            assert!(p[1] >= 0.0 && p[1] <= 4.0);
        }
        // Equidistribution sanity: mean near the box center.
        let mx: f64 = pts.iter().map(|p| p[0]).sum::<f64>() / 1000.0;
        let my: f64 = pts.iter().map(|p| p[1]).sum::<f64>() / 1000.0;
        assert!(mx.abs() < 0.05);
        assert!((my - 2.0).abs() < 0.1);
    }
}
