//! Quadrature helpers: Gauss–Legendre panels with geometric grading,
//! Bessel functions of complex argument and 3-point Lagrange weights.

use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::sync::{Mutex, OnceLock};

use gauss_quad::GaussLegendre;
use num_complex::Complex64 as C;

/// Nodes and weights of the `n`-point Gauss–Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Vec<(f64, f64)>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("quadrature cache poisoned");
    guard
        .entry(n)
        .or_insert_with(|| {
            let rule = GaussLegendre::new(NonZeroUsize::new(n).expect("rule order must be positive"));
            let mut pairs: Vec<(f64, f64)> = rule.iter().map(|&(x, w)| (x, w)).collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            pairs
        })
        .clone()
}

/// A 1D node set with weights.
#[derive(Debug, Clone, Default)]
pub struct NodeSet {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl NodeSet {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate<F: FnMut(f64) -> C>(&self, mut f: F) -> C {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| f(x) * w).sum()
    }
}

/// Composite Gauss–Legendre rule over consecutive breakpoints.
pub fn panels(breakpoints: &[f64], order: usize) -> NodeSet {
    let rule = gauss_legendre(order);
    let mut set = NodeSet::default();
    for win in breakpoints.windows(2) {
        let (a, b) = (win[0], win[1]);
        if b <= a {
            continue;
        }
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        for &(x, w) in &rule {
            set.nodes.push(mid + half * x);
            set.weights.push(half * w);
        }
    }
    set
}

/// Breakpoints on [0, upper] graded geometrically toward each point in
/// `singular` (pairs of location and smallest panel width), then split so
/// that no panel exceeds `max_width`.
pub fn graded_breakpoints(upper: f64, singular: &[(f64, f64)], max_width: f64) -> Vec<f64> {
    let mut pts = vec![0.0, upper];
    for &(s, min_w) in singular {
        if !(s > 0.0 && s < upper) {
            continue;
        }
        pts.push(s);
        let mut off = 0.25 * s;
        while off > min_w {
            for p in [s - off, s + off] {
                if p > 0.0 && p < upper {
                    pts.push(p);
                }
            }
            off *= 0.3;
        }
    }
    pts.sort_by(f64::total_cmp);
    pts.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * upper);
    let mut out = vec![pts[0]];
    for win in pts.windows(2) {
        let n = ((win[1] - win[0]) / max_width).ceil().max(1.0) as usize;
        for i in 1..=n {
            out.push(win[0] + (win[1] - win[0]) * i as f64 / n as f64);
        }
    }
    out
}

/// Halves every panel of a breakpoint list.
pub fn bisect_breakpoints(bps: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * bps.len());
    for win in bps.windows(2) {
        out.push(win[0]);
        out.push(0.5 * (win[0] + win[1]));
    }
    if let Some(&last) = bps.last() {
        out.push(last);
    }
    out
}

/// J_0(z) .. J_nmax(z) for complex z with |arg z| < π/2.
///
/// Large arguments start from the Hankel expansions of J_0 and J_1 and
/// recur upward; otherwise Miller's backward recurrence is used.
pub fn bessel_j_upto(nmax: usize, z: C) -> Vec<C> {
    let mut out = vec![C::new(0.0, 0.0); nmax + 1];
    bessel_j_into(z, &mut out);
    out
}

/// In-place variant of [`bessel_j_upto`]; fills `out[0..]`.
pub fn bessel_j_into(z: C, out: &mut [C]) {
    let az = z.norm();
    if az >= 30.0 && az >= 2.0 * out.len() as f64 && z.re > 0.0 {
        let (j0, j1) = hankel_j01(z);
        out[0] = j0;
        if out.len() > 1 {
            out[1] = j1;
        }
        let two_over_z = 2.0 / z;
        for n in 1..out.len().saturating_sub(1) {
            out[n + 1] = two_over_z * n as f64 * out[n] - out[n - 1];
        }
        return;
    }
    miller(z, out);
}

/// J_0 and J_1 from their asymptotic expansions, |z| ≥ 30.
fn hankel_j01(z: C) -> (C, C) {
    let inv = 1.0 / z;
    let mut res = [C::new(0.0, 0.0); 2];
    for (nu, r) in res.iter_mut().enumerate() {
        let mu = 4.0 * (nu * nu) as f64;
        let (mut p, mut q) = (C::new(1.0, 0.0), C::new(0.0, 0.0));
        let mut term = C::new(1.0, 0.0);
        for k in 1..=24 {
            let odd = (2 * k - 1) as f64;
            term *= inv * ((mu - odd * odd) / (8.0 * k as f64));
            if term.norm() < 1e-17 {
                break;
            }
            // a_k(ν)/z^k alternates between Q (odd k) and P (even k) with signs (-1)^⌊k/2⌋.
            let sign = if (k / 2) % 2 == 0 { 1.0 } else { -1.0 };
            if k % 2 == 1 {
                q += term * sign;
            } else {
                p += term * sign;
            }
        }
        let chi = z - (0.5 * nu as f64 + 0.25) * std::f64::consts::PI;
        *r = (2.0 / (std::f64::consts::PI * z)).sqrt() * (p * chi.cos() - q * chi.sin());
    }
    (res[0], res[1])
}

fn miller(z: C, out: &mut [C]) {
    let nmax = out.len() - 1;
    out.iter_mut().for_each(|v| *v = C::new(0.0, 0.0));
    let az = z.norm();
    if az == 0.0 {
        out[0] = C::new(1.0, 0.0);
        return;
    }
    let start = (nmax as f64).max(az) + 20.0 + 15.0 * az.cbrt();
    let mut ns = start.ceil() as usize;
    ns += ns % 2;

    let two_over_z = 2.0 / z;
    let (mut jp1, mut j) = (C::new(0.0, 0.0), C::new(1.0, 0.0));
    // Running sums for e^{+iz} and e^{-iz} normalizations.
    let mut sum_p = C::new(0.0, 0.0);
    let mut sum_m = C::new(0.0, 0.0);
    let i_pow = |n: usize| match n % 4 {
        0 => C::new(1.0, 0.0),
        1 => C::new(0.0, 1.0),
        2 => C::new(-1.0, 0.0),
        _ => C::new(0.0, -1.0),
    };
    for n in (1..=ns).rev() {
        // j holds J_n, jp1 holds J_{n+1}.
        if n <= nmax {
            out[n] = j;
        }
        sum_p += 2.0 * i_pow(n) * j;
        sum_m += 2.0 * i_pow(n).conj() * j;
        let jm1 = two_over_z * n as f64 * j - jp1;
        jp1 = j;
        j = jm1;
        let mag = j.norm();
        if mag > 1e100 {
            let s = 1e-100;
            j *= s;
            jp1 *= s;
            sum_p *= s;
            sum_m *= s;
            for v in out.iter_mut() {
                *v *= s;
            }
        }
    }
    out[0] = j;
    sum_p += j;
    sum_m += j;
    let ep = (C::i() * z).exp();
    let em = (-C::i() * z).exp();
    let (num, den) = if ep.norm() >= em.norm() { (ep, sum_p) } else { (em, sum_m) };
    // Divide through the norm: |den|² may overflow.
    let r = den.norm();
    let scale = num * (den.conj() / r) / r;
    for v in out.iter_mut() {
        *v *= scale;
    }
}

/// 3-point Lagrange weights at fractional offset `t` from the center node.
#[inline]
pub fn lagrange3(t: f64) -> [f64; 3] {
    [0.5 * t * (t - 1.0), 1.0 - t * t, 0.5 * t * (t + 1.0)]
}

/// Smallest power of two that is at least `x` (and at least 1).
pub fn next_pow2(x: f64) -> usize {
    let mut n = 1usize;
    while (n as f64) < x {
        n <<= 1;
    }
    n
}
