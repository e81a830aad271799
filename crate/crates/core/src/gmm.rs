//! Gaussian mixture densities for the temporal heads.
//!
//! Raw head outputs are laid out per position as `[weights(K) | means(K) |
//! scales(K)]`. Training scores the plain mixture; inference and interval
//! metrics use the mixture clipped to `[0, inf)` and renormalized.

use rand::Rng;
use rand_distr::StandardNormal;
use libm::erfc;

use crate::error::{Error, Result};

/// Floor added after softplus to keep weights and scales strictly positive.
pub const POSITIVE_EPS: f64 = 1e-4;
/// Below this retained mass the clipped mixture is treated as degenerate.
pub const DEGENERATE_MASS: f64 = 1e-12;
const MAX_REJECTIONS: usize = 10_000;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<f64>,
    scales: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalProb {
    pub prob: f64,
    pub degenerate: bool,
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn log_sum_exp(xs: impl IntoIterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Maps an unconstrained `[weights | means | scales]` triple block onto a
/// valid mixture: softplus plus [`POSITIVE_EPS`] for weights and scales,
/// weights then normalized; means pass through.
pub fn positive_params(raw: &[f64]) -> GaussianMixture {
    assert!(raw.len() % 3 == 0 && !raw.is_empty(), "raw mixture block must be 3K long");
    let k = raw.len() / 3;
    let unnorm: Vec<f64> = raw[..k].iter().map(|&a| softplus(a) + POSITIVE_EPS).collect();
    let total: f64 = unnorm.iter().sum();
    GaussianMixture {
        weights: unnorm.iter().map(|u| u / total).collect(),
        means: raw[k..2 * k].to_vec(),
        scales: raw[2 * k..].iter().map(|&c| softplus(c) + POSITIVE_EPS).collect(),
    }
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, scales: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || scales.len() != k {
            return Err(Error::Parameter(format!(
                "component counts differ: {} weights, {} means, {} scales",
                k,
                means.len(),
                scales.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Parameter("negative or NaN weight".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Parameter(format!("weights sum to {sum}")));
        }
        if scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Parameter("scales must be positive and finite".into()));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::Parameter("non-finite mean".into()));
        }
        Ok(Self { weights, means, scales })
    }

    pub fn single(mean: f64, scale: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![scale])
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Returns a copy with every location and scale multiplied by `factor`
    /// (a change of time unit).
    pub fn rescaled(&self, factor: f64) -> Self {
        Self {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m * factor).collect(),
            scales: self.scales.iter().map(|s| s * factor).collect(),
        }
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        log_sum_exp(self.weights.iter().zip(&self.means).zip(&self.scales).map(|((w, m), s)| {
            let z = (x - m) / s;
            w.ln() - 0.5 * z * z - s.ln() - LN_SQRT_2PI
        }))
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.log_pdf(x).exp()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x == f64::INFINITY {
            return 1.0;
        }
        if x == f64::NEG_INFINITY {
            return 0.0;
        }
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.scales)
            .map(|((w, m), s)| w * std_normal_cdf((x - m) / s))
            .sum::<f64>()
            .clamp(0.0, 1.0)
    }

    /// Mass strictly above zero, computed from upper tails for accuracy.
    pub fn positive_mass(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.scales)
            .map(|((w, m), s)| w * std_normal_cdf(m / s))
            .sum()
    }

    /// Density of the mixture clipped to non-negative values.
    pub fn clipped_pdf(&self, x: f64) -> f64 {
        let mass = self.positive_mass();
        if x < 0.0 || mass < DEGENERATE_MASS {
            0.0
        } else {
            self.pdf(x) / mass
        }
    }

    /// Probability of `[lo, hi]` under the clipped mixture.
    pub fn interval_prob_clipped(&self, lo: f64, hi: f64) -> Result<IntervalProb> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(Error::Argument(format!("interval [{lo}, {hi}] is empty")));
        }
        let mass = self.positive_mass();
        if mass < DEGENERATE_MASS {
            return Ok(IntervalProb { prob: 0.0, degenerate: true });
        }
        let lo = lo.max(0.0);
        if hi <= lo {
            return Ok(IntervalProb { prob: 0.0, degenerate: false });
        }
        // Upper-tail differences keep precision when both ends sit far above the means.
        let tail = |x: f64| -> f64 {
            if x == f64::INFINITY {
                return 0.0;
            }
            self.weights
                .iter()
                .zip(&self.means)
                .zip(&self.scales)
                .map(|((w, m), s)| w * std_normal_cdf((m - x) / s))
                .sum()
        };
        let prob = ((tail(lo) - tail(hi)).max(0.0) / mass).min(1.0);
        Ok(IntervalProb { prob, degenerate: false })
    }

    /// Ancestral draw from the clipped mixture, rejecting negatives.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        if self.positive_mass() < DEGENERATE_MASS {
            return Err(Error::DegenerateSupport("no mass on [0, inf)".into()));
        }
        for _ in 0..MAX_REJECTIONS {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = self.components() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = i;
                    break;
                }
            }
            let z: f64 = rng.sample(StandardNormal);
            let x = self.means[k] + self.scales[k] * z;
            if x >= 0.0 {
                return Ok(x);
            }
        }
        Err(Error::DegenerateSupport(format!("{MAX_REJECTIONS} consecutive negative draws")))
    }

    /// Mode of the clipped density: best of the component means, zero and a
    /// dense grid, refined by golden-section search around the winner.
    pub fn clipped_mode(&self) -> f64 {
        let lo = self
            .means
            .iter()
            .zip(&self.scales)
            .map(|(m, s)| m - 6.0 * s)
            .fold(f64::INFINITY, f64::min)
            .max(0.0);
        let hi = self
            .means
            .iter()
            .zip(&self.scales)
            .map(|(m, s)| m + 6.0 * s)
            .fold(f64::NEG_INFINITY, f64::max)
            .max(0.0);
        let mut candidates: Vec<f64> = self.means.iter().map(|m| m.max(0.0)).collect();
        candidates.push(0.0);
        const GRID: usize = 2048;
        let step = (hi - lo) / GRID as f64;
        if step > 0.0 {
            candidates.extend((0..=GRID).map(|i| lo + step * i as f64));
        }
        let mut best = 0.0;
        let mut best_val = f64::NEG_INFINITY;
        for c in candidates {
            let v = self.log_pdf(c);
            if v > best_val {
                best_val = v;
                best = c;
            }
        }
        if step <= 0.0 {
            return best;
        }
        let (mut a, mut b) = ((best - step).max(0.0), best + step);
        let g = 0.618_033_988_749_895;
        for _ in 0..60 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if self.log_pdf(c) >= self.log_pdf(d) {
                b = d;
            } else {
                a = c;
            }
        }
        let refined = 0.5 * (a + b);
        if self.log_pdf(refined) >= best_val {
            refined
        } else {
            best
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn normal_pdf(x: f64, m: f64, s: f64) -> f64 {
        (-(x - m).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    }

    #[test]
    fn log_pdf_standard_normal_at_zero() {
        let g = GaussianMixture::single(0.0, 1.0).unwrap();
        assert!((g.log_pdf(0.0) - (-0.918_939)).abs() < 1e-6);
    }

    #[test]
    fn log_pdf_two_components() {
        let g = GaussianMixture::new(vec![0.5, 0.5], vec![0.0, 10.0], vec![1.0, 1.0]).unwrap();
        let expected = (0.5 * normal_pdf(0.0, 0.0, 1.0) + 0.5 * normal_pdf(0.0, 10.0, 1.0)).ln();
        assert!((g.log_pdf(0.0) - expected).abs() < 1e-12);
    }

    #[test]
    fn log_pdf_symmetric_mixture() {
        let g = GaussianMixture::new(vec![0.5, 0.5], vec![-3.0, 3.0], vec![1.5, 1.5]).unwrap();
        for x in [0.1, 0.7, 2.0, 5.5, 11.0] {
            assert!((g.log_pdf(x) - g.log_pdf(-x)).abs() < 1e-12);
        }
    }

    #[test]
    fn log_pdf_far_tail_is_finite() {
        let g = GaussianMixture::single(0.0, 1e-3).unwrap();
        assert!(g.log_pdf(1e3).is_finite());
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(GaussianMixture::new(vec![0.5, 0.4], vec![0.0, 1.0], vec![1.0, 1.0]).is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![0.0], vec![0.0]).is_err());
        assert!(GaussianMixture::new(vec![], vec![], vec![]).is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![0.0, 1.0], vec![1.0]).is_err());
    }

    #[test]
    fn cdf_values() {
        let g = GaussianMixture::single(3.0, 2.0).unwrap();
        assert!((g.cdf(3.0) - 0.5).abs() < 1e-15);
        assert_eq!(g.cdf(f64::NEG_INFINITY), 0.0);
        assert_eq!(g.cdf(f64::INFINITY), 1.0);
        assert!(g.cdf(-1e6) < 1e-300);
        let std = GaussianMixture::single(0.0, 1.0).unwrap();
        // Tabulated normal quantile.
        assert!((std.cdf(1.96) - 0.975_002_1).abs() < 1e-6);
    }

    #[test]
    fn interval_whole_support_is_one() {
        let g = GaussianMixture::new(vec![0.3, 0.7], vec![-1.0, 0.5], vec![1.0, 2.0]).unwrap();
        let p = g.interval_prob_clipped(0.0, f64::INFINITY).unwrap();
        assert!((p.prob - 1.0).abs() < 1e-12 && !p.degenerate);
    }

    #[test]
    fn interval_negligible_clipping_matches_normal() {
        let g = GaussianMixture::single(10.0, 1.0).unwrap();
        let p = g.interval_prob_clipped(10.0 - 1.96, 10.0 + 1.96).unwrap().prob;
        assert!((p - 0.95).abs() < 1e-3);
    }

    #[test]
    fn interval_below_zero_is_empty() {
        let g = GaussianMixture::single(1.0, 1.0).unwrap();
        assert_eq!(g.interval_prob_clipped(-5.0, 0.0).unwrap().prob, 0.0);
        assert_eq!(g.interval_prob_clipped(-5.0, -1.0).unwrap().prob, 0.0);
        assert!(matches!(g.interval_prob_clipped(2.0, 1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn interval_degenerate_support_flagged() {
        let g = GaussianMixture::single(-100.0, 1.0).unwrap();
        let p = g.interval_prob_clipped(0.0, 1.0).unwrap();
        assert!(p.degenerate && p.prob == 0.0);
        assert!(g.sample(&mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn sample_near_deterministic() {
        let g = GaussianMixture::single(5.0, 1e-9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert!((g.sample(&mut rng).unwrap() - 5.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sample_truncated_normal_mean() {
        let g = GaussianMixture::single(0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let x = g.sample(&mut rng).unwrap();
            assert!(x >= 0.0);
            sum += x;
        }
        let oracle = (2.0 / std::f64::consts::PI).sqrt();
        assert!((sum / n as f64 - oracle).abs() < 0.01);
    }

    #[test]
    fn sample_is_seed_deterministic() {
        let g = GaussianMixture::new(vec![0.2, 0.8], vec![1.0, 4.0], vec![0.5, 2.0]).unwrap();
        let a: Vec<f64> = {
            let mut r = ChaCha8Rng::seed_from_u64(3);
            (0..20).map(|_| g.sample(&mut r).unwrap()).collect()
        };
        let b: Vec<f64> = {
            let mut r = ChaCha8Rng::seed_from_u64(3);
            (0..20).map(|_| g.sample(&mut r).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn positive_params_cases() {
        let g = positive_params(&[0.3, 0.3, 0.3, 1.0, 2.0, 3.0, 0.0, -1000.0, 5.0]);
        for w in g.weights() {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(g.means(), &[1.0, 2.0, 3.0]);
        assert!((g.scales()[0] - (2f64.ln() + POSITIVE_EPS)).abs() < 1e-12);
        assert!((g.scales()[0] - 0.6932).abs() < 1e-4);
        assert_eq!(g.scales()[1], POSITIVE_EPS);
    }

    #[test]
    fn clipped_mode_finds_taller_peak() {
        let g = GaussianMixture::new(vec![0.3, 0.7], vec![10.0, 40.0], vec![2.0, 5.0]).unwrap();
        // The narrow peak is taller: 0.3/2 > 0.7/5.
        let m = g.clipped_mode();
        assert!((m - 10.0).abs() < 1e-3, "{m}");
        let neg = GaussianMixture::single(-2.0, 1.0).unwrap();
        assert_eq!(neg.clipped_mode(), 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn mixture() -> impl Strategy<Value = GaussianMixture> {
            (1usize..=5).prop_flat_map(|k| {
                prop::collection::vec(-3.0f64..3.0, 3 * k).prop_map(|raw| positive_params(&raw))
            })
        }

        proptest! {
            #[test]
            fn interval_monotone(g in mixture(), a in -2.0f64..4.0, b in 0.0f64..3.0, c in 0.0f64..3.0) {
                let p = |lo: f64, hi: f64| g.interval_prob_clipped(lo, hi).unwrap().prob;
                prop_assert!(p(a, a + b + c) + 1e-12 >= p(a, a + b));
                prop_assert!(p(a, a + b + c) + 1e-12 >= p(a + c, a + b + c));
            }

            #[test]
            fn cdf_monotone(g in mixture(), x in -10.0f64..10.0, d in 0.0f64..5.0) {
                prop_assert!(g.cdf(x + d) >= g.cdf(x));
            }
        }
    }
}
