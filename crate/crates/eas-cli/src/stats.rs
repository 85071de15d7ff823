//! Small statistical helpers used by reports and the benchmark suite: an
//! ordinary-least-squares slope with a t confidence interval, and an exact
//! one-sided binomial sign test.

use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::gamma::ln_gamma;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlopeCi {
    pub slope: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Least-squares slope of y on x with a two-sided confidence interval at the
/// given level (0.95 for 95%). Needs at least 3 points and nonconstant x;
/// returns None otherwise. A perfectly linear series gets a width-zero
/// interval.
pub fn ols_slope_ci(xs: &[f64], ys: &[f64], level: f64) -> Option<SlopeCi> {
    let n = xs.len();
    if n != ys.len() || n < 3 || !(0.0..1.0).contains(&level) {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let df = nf - 2.0;
    let se = (sse / df / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, df).ok()?.inverse_cdf(0.5 + level / 2.0);
    Some(SlopeCi { slope, lo: slope - t * se, hi: slope + t * se })
}

/// Exact one-sided sign test: the probability of at least `wins` successes
/// in `wins + losses` fair coin flips. Ties must be dropped by the caller.
/// Small p rejects "the winner is no better than the loser".
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    let ln_half = 0.5f64.ln();
    let p: f64 = (wins..=n).map(|k| (ln_choose(n, k) + n as f64 * ln_half).exp()).sum();
    p.min(1.0)
}

fn ln_choose(n: usize, k: usize) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}
