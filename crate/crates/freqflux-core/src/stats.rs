//! Moment accumulation and normality statistics.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// One-pass accumulator for the first four central moments (Pébay update).
#[derive(Debug, Clone, Default)]
pub struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl Moments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        let n1 = self.n as f64;
        self.n += 1;
        let n = self.n as f64;
        let delta = x - self.mean;
        let delta_n = delta / n;
        let delta_n2 = delta_n * delta_n;
        let term1 = delta * delta_n * n1;
        self.mean += delta_n;
        self.m4 += term1 * delta_n2 * (n * n - 3.0 * n + 3.0) + 6.0 * delta_n2 * self.m2
            - 4.0 * delta_n * self.m3;
        self.m3 += term1 * delta_n * (n - 2.0) - 3.0 * delta_n * self.m2;
        self.m2 += term1;
    }

    pub fn extend<I: IntoIterator<Item = f64>>(&mut self, it: I) {
        for x in it {
            self.push(x);
        }
    }

    pub fn merge(mut self, other: Moments) -> Moments {
        if other.n == 0 {
            return self;
        }
        if self.n == 0 {
            return other;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let d = other.mean - self.mean;
        let d2 = d * d;
        let m2 = self.m2 + other.m2 + d2 * na * nb / n;
        let m3 = self.m3
            + other.m3
            + d * d2 * na * nb * (na - nb) / (n * n)
            + 3.0 * d * (na * other.m2 - nb * self.m2) / n;
        let m4 = self.m4
            + other.m4
            + d2 * d2 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * d2 * (na * na * other.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * d * (na * other.m3 - nb * self.m3) / n;
        self.mean += d * nb / n;
        self.n += other.n;
        self.m2 = m2;
        self.m3 = m3;
        self.m4 = m4;
        self
    }

    pub fn count(&self) -> usize {
        self.n as usize
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.m2 / self.n as f64
        }
    }

    pub fn skewness(&self) -> f64 {
        let n = self.n as f64;
        let v = self.m2 / n;
        if v <= 0.0 {
            return 0.0;
        }
        (self.m3 / n) / v.powf(1.5)
    }

    pub fn excess_kurtosis(&self) -> f64 {
        let n = self.n as f64;
        let v = self.m2 / n;
        if v <= 0.0 {
            return 0.0;
        }
        (self.m4 / n) / (v * v) - 3.0
    }
}

/// Jarque-Bera statistic and its asymptotic χ²(2) p-value.
pub fn jarque_bera(n: usize, skewness: f64, excess_kurtosis: f64) -> (f64, f64) {
    let jb = n as f64 / 6.0 * (skewness * skewness + excess_kurtosis * excess_kurtosis / 4.0);
    // χ²(2) survival function is exp(-x/2)
    (jb, (-jb / 2.0).exp())
}

/// Survival function of the Kolmogorov distribution,
/// `Q(λ) = 2 Σ_{k≥1} (-1)^{k-1} e^{-2k²λ²}`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        sum += sign * term;
        sign = -sign;
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Kolmogorov-Smirnov test of a sorted sample against N(mean, std²), with
/// the asymptotic p-value (Stephens' finite-n correction).
pub fn ks_normal(sorted: &[f64], mean: f64, std: f64) -> (f64, f64) {
    let n = sorted.len() as f64;
    let normal = Normal::new(mean, std).expect("valid normal parameters");
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let cdf = normal.cdf(x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((cdf - lo).abs()).max((hi - cdf).abs());
    }
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    (d, kolmogorov_sf(lambda))
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Gaussian truncated second moment `E[X² 1{|X| > a}]` for X ~ N(0, s²).
pub fn gaussian_tail_second_moment(s: f64, a: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    let c = a / s;
    let phi = (-(c * c) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let q = 1.0 - normal_cdf(c);
    2.0 * s * s * (c * phi + q)
}

/// Distribution summary of one sample: moments, Jarque-Bera and
/// Kolmogorov-Smirnov normality tests, Q-Q points against the standard
/// normal (qqnorm-style: raw ordered sample vs Φ⁻¹((i-0.5)/n)), histogram.
#[derive(Debug, Clone)]
pub struct StatsReport {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub jarque_bera: f64,
    pub jarque_bera_p: f64,
    pub ks_stat: f64,
    pub ks_p: f64,
    /// (theoretical standard-normal quantile, ordered sample value)
    pub qq: Vec<(f64, f64)>,
    /// Histogram bin edges (len = counts.len() + 1).
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Max Q-Q points kept in a report; larger samples are thinned on quantiles.
const QQ_MAX_POINTS: usize = 1001;
const HIST_BINS: usize = 50;

pub fn normality_report(sample: &[f64]) -> Result<StatsReport> {
    let n = sample.len();
    if n < 20 {
        return Err(Error::TooFewSamples { needed: 20, got: n });
    }
    let mut mom = Moments::new();
    mom.extend(sample.iter().copied());
    let variance = mom.variance();
    if variance <= 0.0 || !variance.is_finite() {
        return Err(Error::DegenerateSample);
    }
    let mean = mom.mean();
    let skewness = mom.skewness();
    let excess_kurtosis = mom.excess_kurtosis();
    let (jb, jb_p) = jarque_bera(n, skewness, excess_kurtosis);

    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite sample"));
    let (ks_stat, ks_p) = ks_normal(&sorted, mean, variance.sqrt());

    let qq = if n <= QQ_MAX_POINTS {
        (0..n)
            .map(|i| (normal_quantile((i as f64 + 0.5) / n as f64), sorted[i]))
            .collect()
    } else {
        (0..QQ_MAX_POINTS)
            .map(|j| {
                let p = (j as f64 + 0.5) / QQ_MAX_POINTS as f64;
                let idx = ((p * n as f64) as usize).min(n - 1);
                (normal_quantile(p), sorted[idx])
            })
            .collect()
    };

    let lo = sorted[0];
    let hi = sorted[n - 1];
    let width = ((hi - lo) / HIST_BINS as f64).max(f64::MIN_POSITIVE);
    let bin_edges: Vec<f64> = (0..=HIST_BINS).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0usize; HIST_BINS];
    for &x in &sorted {
        let b = (((x - lo) / width) as usize).min(HIST_BINS - 1);
        counts[b] += 1;
    }

    Ok(StatsReport {
        n,
        mean,
        variance,
        skewness,
        excess_kurtosis,
        jarque_bera: jb,
        jarque_bera_p: jb_p,
        ks_stat,
        ks_p,
        qq,
        bin_edges,
        counts,
    })
}
