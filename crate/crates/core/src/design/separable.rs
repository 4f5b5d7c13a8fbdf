//! Separable maximization `max sum_g u_g(e_g)` subject to
//! `sum_g a_g e_g <= b` and `lo <= e_g <= hi`, via per-stratum best responses
//! and bisection on the budget multiplier.

const CELLS: usize = 512;

pub(crate) struct Stratum<'a> {
    pub value: Box<dyn Fn(f64) -> f64 + 'a>,
    pub deriv: Box<dyn Fn(f64) -> f64 + 'a>,
    pub cost: f64,
}

pub(crate) struct Solution {
    pub e: Vec<f64>,
    pub multiplier: f64,
    pub binding: bool,
}

fn bisect_root(h: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    // h(a) > 0 >= h(b)
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        if h(mid) > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

/// Maximizer of `u(e) - lambda * a * e` on `[lo, hi]`, enumerating every
/// stationary bracket on a 512-cell grid plus both endpoints.
pub(crate) fn best_response(s: &Stratum, lambda: f64, lo: f64, hi: f64) -> f64 {
    let h = |e: f64| (s.deriv)(e) - lambda * s.cost;
    let obj = |e: f64| (s.value)(e) - lambda * s.cost * e;
    let mut candidates = vec![lo];
    let mut prev_x = lo;
    let mut prev_h = h(lo);
    for i in 1..=CELLS {
        let x = if i == CELLS { hi } else { lo + (hi - lo) * i as f64 / CELLS as f64 };
        let hx = h(x);
        if prev_h > 0.0 && hx <= 0.0 {
            candidates.push(if hx == 0.0 { x } else { bisect_root(&h, prev_x, x) });
        }
        prev_x = x;
        prev_h = hx;
    }
    candidates.push(hi);
    let mut best = candidates[0];
    let mut best_v = obj(best);
    for &c in &candidates[1..] {
        let v = obj(c);
        if v > best_v {
            best = c;
            best_v = v;
        }
    }
    best
}

fn responses(strata: &[Stratum], lambda: f64, lo: f64, hi: f64) -> Vec<f64> {
    strata.iter().map(|s| best_response(s, lambda, lo, hi)).collect()
}

fn cost(strata: &[Stratum], e: &[f64]) -> f64 {
    strata.iter().zip(e).map(|(s, x)| s.cost * x).sum()
}

fn total(strata: &[Stratum], e: &[f64]) -> f64 {
    strata.iter().zip(e).map(|(s, &x)| (s.value)(x)).sum()
}

pub(crate) fn solve(strata: &[Stratum], budget: f64, lo: f64, hi: f64) -> Solution {
    const BIND_TOL: f64 = 1e-8;
    let e0 = responses(strata, 0.0, lo, hi);
    let c0 = cost(strata, &e0);
    if c0 <= budget + 1e-12 {
        return Solution { binding: (c0 - budget).abs() < BIND_TOL, e: e0, multiplier: 0.0 };
    }
    let mut lam_hi = strata
        .iter()
        .filter(|s| s.cost > 0.0)
        .map(|s| {
            (0..=CELLS)
                .map(|i| (s.deriv)(lo + (hi - lo) * i as f64 / CELLS as f64).abs() / s.cost)
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
        + 1.0;
    let mut e_hi = responses(strata, lam_hi, lo, hi);
    for _ in 0..200 {
        if cost(strata, &e_hi) <= budget + 1e-12 {
            break;
        }
        lam_hi *= 2.0;
        e_hi = responses(strata, lam_hi, lo, hi);
    }
    let mut lam_lo = 0.0;
    let mut e_lo = e0;
    for _ in 0..300 {
        if (budget - cost(strata, &e_hi)).abs() < 1e-12 || lam_hi - lam_lo <= 1e-15 * lam_hi {
            break;
        }
        let mid = 0.5 * (lam_lo + lam_hi);
        let e = responses(strata, mid, lo, hi);
        if cost(strata, &e) > budget + 1e-12 {
            lam_lo = mid;
            e_lo = e;
        } else {
            lam_hi = mid;
            e_hi = e;
        }
    }
    let mut e = e_hi;
    let slack = budget - cost(strata, &e);
    if slack > BIND_TOL {
        // The response jumped across the budget line; spend the remainder on
        // whichever jumping stratum gains most.
        let base = total(strata, &e);
        let mut best: Option<(f64, usize, f64)> = None;
        for (g, s) in strata.iter().enumerate() {
            if s.cost <= 0.0 || e_lo[g] == e[g] {
                continue;
            }
            let target = (e[g] + slack / s.cost).clamp(lo, hi);
            let target = if e_lo[g] > e[g] { target.min(e_lo[g]) } else { e[g] };
            let mut trial = e.clone();
            trial[g] = target;
            let gain = total(strata, &trial) - base;
            if gain > 0.0 && best.is_none_or(|b| gain > b.0) {
                best = Some((gain, g, target));
            }
        }
        if let Some((_, g, x)) = best {
            e[g] = x;
        }
    }
    let binding = (budget - cost(strata, &e)).abs() < BIND_TOL;
    Solution { e, multiplier: if binding { lam_hi } else { 0.0 }, binding }
}
