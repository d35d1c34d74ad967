//! Independent reference computations used to check the numerics kernel.
//!
//! Nothing in here calls into `its_audit::stats`.

#![allow(dead_code)]

use std::f64::consts::FRAC_PI_2;

/// Adaptive Simpson quadrature on [a, b].
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }

    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }

    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = simpson(fa, fm, fb, a, b);
    recurse(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Two-sided Student-t tail probability by quadrature of the density.
///
/// With x = sqrt(df)·tan(θ) the unnormalised density becomes cos^(df−1)(θ) on
/// [0, π/2), so the tail is a ratio of two bounded integrals and the
/// normalising constant cancels.
pub fn t_two_sided_tail(t: f64, df: u32) -> f64 {
    let nu = f64::from(df);
    let exponent = nu - 1.0;
    let density = move |theta: f64| theta.cos().max(0.0).powf(exponent);
    let theta0 = (t.abs() / nu.sqrt()).atan();
    // Split the range so the peak near θ = 0 for large df gets resolved.
    let width = (1.0 / nu.sqrt()).min(FRAC_PI_2);
    let integrate = |lo: f64, hi: f64| -> f64 {
        let mut total = 0.0;
        let mut knots = vec![lo];
        let mut k = 1.0;
        while lo + k * width * 0.25 < hi {
            knots.push(lo + k * width * 0.25);
            k += 1.0;
        }
        knots.push(hi);
        for w in knots.windows(2) {
            total += adaptive_simpson(&density, w[0], w[1], 1e-17);
        }
        total
    };
    let whole = integrate(0.0, FRAC_PI_2);
    let tail = integrate(theta0, FRAC_PI_2);
    tail / whole
}

/// I_x(2, 3) = 1 − (1 − x)³(1 + 3x), from expanding the binomial sum.
pub fn incomplete_beta_2_3(x: f64) -> f64 {
    1.0 - (1.0 - x).powi(3) * (1.0 + 3.0 * x)
}

/// Brute force: count strict wins and exact ties one element at a time.
pub fn dominance_counts(s1: &[f64], s2: &[f64]) -> (usize, usize) {
    let mut wins = 0;
    let mut ties = 0;
    for i in 0..s1.len() {
        if s1[i] > s2[i] {
            wins += 1;
        }
        if s1[i] == s2[i] {
            ties += 1;
        }
    }
    (wins, ties)
}

/// Competition rank by exhaustive pairwise comparison: 1 + number of strictly
/// greater entries.
pub fn brute_force_ranks(means: &[(String, f64)]) -> Vec<(String, usize)> {
    means
        .iter()
        .map(|(name, m)| {
            let above = means.iter().filter(|(_, other)| other > m).count();
            (name.clone(), above + 1)
        })
        .collect()
}

/// Kendall tau by enumerating every item pair.
pub fn kendall_by_enumeration(a: &[usize], b: &[usize]) -> f64 {
    let k = a.len();
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    for i in 0..k {
        for j in (i + 1)..k {
            let s = (a[i] as i64 - a[j] as i64) * (b[i] as i64 - b[j] as i64);
            if s > 0 {
                concordant += 1;
            } else if s < 0 {
                discordant += 1;
            }
        }
    }
    (concordant - discordant) as f64 / (k * (k - 1) / 2) as f64
}

/// Standard normal two-sided tail via the complementary error function
/// (Abramowitz–Stegun 7.1.26 is too coarse; use a continued fraction).
pub fn normal_two_sided_tail(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

fn erfc(x: f64) -> f64 {
    // Series for small x, Lentz continued fraction for large x.
    if x < 2.0 {
        let mut sum = x;
        let mut term = x;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= -x * x / n;
            let add = term / (2.0 * n + 1.0);
            sum += add;
            if add.abs() < 1e-17 * sum.abs() {
                break;
            }
        }
        1.0 - 2.0 / std::f64::consts::PI.sqrt() * sum
    } else {
        // erfc(x) = exp(-x²)/sqrt(π) · 1/(x + 1/2/(x + 1/(x + 3/2/(x + ...))))
        let mut f = x;
        let tiny = 1e-300;
        let mut c = f;
        let mut d = 0.0;
        for i in 1..500 {
            let a = f64::from(i) / 2.0;
            d = x + a * d;
            if d.abs() < tiny {
                d = tiny;
            }
            c = x + a / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = c * d;
            f *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (-x * x).exp() / std::f64::consts::PI.sqrt() / f
    }
}
