//! Numerics kernel: paired t-test, Student-t tail probabilities via the
//! regularized incomplete beta function, the dominance ratio and Kendall's tau.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Convergence threshold on the Lentz update factor. Tighter than the
/// 1e-12 absolute tolerance the tail probabilities need.
pub const INCOMPLETE_BETA_TOLERANCE: f64 = 1e-15;
/// Continued-fraction iteration cap.
pub const INCOMPLETE_BETA_MAX_ITER: usize = 300;

const TINY: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("need at least {required} observations, got {got}")]
    TooFewObservations { required: usize, got: usize },
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("degrees of freedom must be at least 1, got {0}")]
    InvalidDegreesOfFreedom(u64),
    #[error("t statistic must be finite, got {0}")]
    NonFiniteStatistic(f64),
    #[error("invalid incomplete beta arguments a={a}, b={b}, x={x}")]
    InvalidBetaArguments { a: f64, b: f64, x: f64 },
    #[error("incomplete beta continued fraction did not converge in {iterations} iterations (a={a}, b={b}, x={x})")]
    NonConvergence {
        a: f64,
        b: f64,
        x: f64,
        iterations: usize,
    },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("score vectors must be non-empty")]
    Empty,
    #[error("ranking is not a permutation of 1..={0}")]
    NotAPermutation(usize),
    #[error("rank correlation needs at least 2 items, got {0}")]
    TooFewItems(usize),
}

/// Per-prompt score differences between two models sharing a prompt set.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    differences: Vec<f64>,
}

impl PairedSample {
    pub fn from_differences(differences: Vec<f64>) -> Result<Self, StatsError> {
        if let Some((index, &value)) = differences.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(StatsError::NonFinite { index, value });
        }
        Ok(Self { differences })
    }

    /// Pairs `first[i] - second[i]`.
    pub fn from_scores(first: &[f64], second: &[f64]) -> Result<Self, StatsError> {
        if first.len() != second.len() {
            return Err(StatsError::LengthMismatch {
                left: first.len(),
                right: second.len(),
            });
        }
        Self::from_differences(first.iter().zip(second).map(|(a, b)| a - b).collect())
    }

    pub fn differences(&self) -> &[f64] {
        &self.differences
    }

    pub fn n(&self) -> usize {
        self.differences.len()
    }
}

/// Outcome of a paired t-test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// `None` when the differences have zero variance.
    pub t_statistic: Option<f64>,
    pub degrees_of_freedom: u64,
    pub p_value: f64,
    pub mean_difference: f64,
    pub degenerate: bool,
}

/// Two-sided paired t-test on the differences.
///
/// Zero-variance samples do not error: identical differences give p = 1 when
/// they are all zero and p = 0 otherwise, with `degenerate` set.
pub fn paired_t(sample: &PairedSample) -> Result<TestResult, StatsError> {
    let d = sample.differences();
    let n = d.len();
    if n < 2 {
        return Err(StatsError::TooFewObservations { required: 2, got: n });
    }
    let df = (n - 1) as u64;

    if d.iter().all(|&v| v == d[0]) {
        let mean = d[0];
        return Ok(TestResult {
            t_statistic: None,
            degrees_of_freedom: df,
            p_value: if mean == 0.0 { 1.0 } else { 0.0 },
            mean_difference: mean,
            degenerate: true,
        });
    }

    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let ss: f64 = d.iter().map(|v| (v - mean) * (v - mean)).sum();
    let sd = (ss / (nf - 1.0)).sqrt();
    let t = mean / (sd / nf.sqrt());
    let p_value = student_t_two_sided_p(t, df)?;
    Ok(TestResult {
        t_statistic: Some(t),
        degrees_of_freedom: df,
        p_value,
        mean_difference: mean,
        degenerate: false,
    })
}

/// P(|T| ≥ |t|) for a Student-t variable with `df` degrees of freedom,
/// computed as I_{df/(df+t²)}(df/2, 1/2).
pub fn student_t_two_sided_p(t: f64, df: u64) -> Result<f64, StatsError> {
    if df == 0 {
        return Err(StatsError::InvalidDegreesOfFreedom(df));
    }
    if !t.is_finite() {
        return Err(StatsError::NonFiniteStatistic(t));
    }
    if t == 0.0 {
        return Ok(1.0);
    }
    let nu = df as f64;
    let t2 = t * t;
    let denom = nu + t2;
    // Both x and 1 - x are formed directly to avoid cancellation in the tail.
    let x = nu / denom;
    let y = t2 / denom;
    let p = incomplete_beta_split(0.5 * nu, 0.5, x, y)?;
    Ok(p.clamp(0.0, 1.0))
}

/// Regularized incomplete beta function I_x(a, b).
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> Result<f64, StatsError> {
    if !(a > 0.0 && b > 0.0 && (0.0..=1.0).contains(&x)) || !a.is_finite() || !b.is_finite() {
        return Err(StatsError::InvalidBetaArguments { a, b, x });
    }
    incomplete_beta_split(a, b, x, 1.0 - x)
}

/// I_x(a, b) given both x and y = 1 - x.
fn incomplete_beta_split(a: f64, b: f64, x: f64, y: f64) -> Result<f64, StatsError> {
    if x <= 0.0 {
        return Ok(0.0);
    }
    if y <= 0.0 {
        return Ok(1.0);
    }
    let ln_front = a * x.ln() + b * y.ln() - ln_beta(a, b);
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * beta_continued_fraction(a, b, x)? / a)
    } else {
        Ok(1.0 - front * beta_continued_fraction(b, a, y)? / b)
    }
}

/// Continued fraction for the incomplete beta, modified Lentz evaluation.
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> Result<f64, StatsError> {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=INCOMPLETE_BETA_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;

        // even step
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;

        // odd step
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < INCOMPLETE_BETA_TOLERANCE {
            return Ok(h);
        }
    }
    Err(StatsError::NonConvergence {
        a,
        b,
        x,
        iterations: INCOMPLETE_BETA_MAX_ITER,
    })
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

// Lanczos approximation, g = 7, n = 9.
const LANCZOS_G: f64 = 7.0;
#[allow(clippy::excessive_precision)]
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for x > 0.
pub(crate) fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin().abs()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEF[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, &c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Counts behind one dominance ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dominance {
    /// Prompts where the first vector strictly exceeds the second.
    pub wins: usize,
    /// Prompts where both scores are exactly equal.
    pub ties: usize,
    pub n: usize,
}

impl Dominance {
    /// Fraction of strict wins.
    pub fn ratio(&self) -> f64 {
        self.wins as f64 / self.n as f64
    }

    /// Fraction of exact ties, taken as the complement of both ratios so
    /// that `R(1,2) + R(2,1) + tie_mass` is exactly 1.0 in floating point.
    /// Equals `ties / n` to within one ulp.
    pub fn tie_mass(&self) -> f64 {
        let losses = self.n - self.wins - self.ties;
        1.0 - (self.ratio() + losses as f64 / self.n as f64)
    }

    /// The same comparison seen from the second vector.
    pub fn reversed(&self) -> Dominance {
        Dominance {
            wins: self.n - self.wins - self.ties,
            ties: self.ties,
            n: self.n,
        }
    }
}

/// Empirical probability that the first model beats the second on a prompt,
/// strict inequality, with the tie mass reported separately.
pub fn dominance_ratio(first: &[f64], second: &[f64]) -> Result<Dominance, StatsError> {
    if first.len() != second.len() {
        return Err(StatsError::LengthMismatch {
            left: first.len(),
            right: second.len(),
        });
    }
    if first.is_empty() {
        return Err(StatsError::Empty);
    }
    let (wins, ties) = first
        .iter()
        .zip(second)
        .fold((0, 0), |(w, t), (a, b)| match a.partial_cmp(b) {
            Some(std::cmp::Ordering::Greater) => (w + 1, t),
            Some(std::cmp::Ordering::Equal) => (w, t + 1),
            _ => (w, t),
        });
    Ok(Dominance {
        wins,
        ties,
        n: first.len(),
    })
}

/// Kendall's tau between two rankings, each a permutation of 1..=K.
pub fn kendall_tau(rank_a: &[usize], rank_b: &[usize]) -> Result<f64, StatsError> {
    if rank_a.len() != rank_b.len() {
        return Err(StatsError::LengthMismatch {
            left: rank_a.len(),
            right: rank_b.len(),
        });
    }
    let k = rank_a.len();
    if k < 2 {
        return Err(StatsError::TooFewItems(k));
    }
    for ranks in [rank_a, rank_b] {
        let mut seen = vec![false; k];
        for &r in ranks {
            if r == 0 || r > k || seen[r - 1] {
                return Err(StatsError::NotAPermutation(k));
            }
            seen[r - 1] = true;
        }
    }
    Ok(pair_agreement(rank_a, rank_b))
}

/// Kendall-style agreement that also accepts tied (competition) ranks.
///
/// Each item pair scores +1 when both rankings order it the same way (both
/// tied counts as the same), −1 when they order it oppositely, and 0 when
/// exactly one of them ties it. Equals [`kendall_tau`] on permutations, and is
/// 1 exactly when every pair keeps its relative order.
pub fn kendall_tau_tied(rank_a: &[usize], rank_b: &[usize]) -> Result<f64, StatsError> {
    if rank_a.len() != rank_b.len() {
        return Err(StatsError::LengthMismatch {
            left: rank_a.len(),
            right: rank_b.len(),
        });
    }
    if rank_a.len() < 2 {
        return Err(StatsError::TooFewItems(rank_a.len()));
    }
    Ok(pair_agreement(rank_a, rank_b))
}

fn pair_agreement(rank_a: &[usize], rank_b: &[usize]) -> f64 {
    let k = rank_a.len();
    let mut score = 0i64;
    for i in 0..k {
        for j in (i + 1)..k {
            let sa = rank_a[i].cmp(&rank_a[j]);
            let sb = rank_b[i].cmp(&rank_b[j]);
            score += if sa == sb {
                1
            } else if sa.is_eq() || sb.is_eq() {
                0
            } else {
                -1
            };
        }
    }
    score as f64 / (k * (k - 1) / 2) as f64
}
