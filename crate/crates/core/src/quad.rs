//! Gauss–Legendre rules, composite panels and adaptive integration.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use crate::error::{Error, Result};

/// Nodes and weights of an `n`-point Gauss–Legendre rule on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, z);
                dp = d;
                let dz = p / d;
                z -= dz;
                if dz.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, z);
            if d.is_finite() {
                dp = d;
            }
            let w = 2.0 / ((1.0 - z * z) * dp * dp);
            nodes[i] = -z;
            nodes[n - 1 - i] = z;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Integrate `f` over `[a, b]`.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let h = 0.5 * (b - a);
        let c = 0.5 * (b + a);
        let mut s = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            s += w * f(c + h * x);
        }
        s * h
    }

    /// Mapped nodes and weights on `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let h = 0.5 * (b - a);
        let c = 0.5 * (b + a);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(x, w)| (c + h * x, w * h))
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Shared cached rule with `n` nodes.
pub fn rule(n: usize) -> Arc<GaussLegendre> {
    static CACHE: OnceLock<RwLock<HashMap<usize, Arc<GaussLegendre>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| RwLock::new(HashMap::new()));
    if let Some(r) = cache.read().expect("rule cache poisoned").get(&n) {
        return r.clone();
    }
    let r = Arc::new(GaussLegendre::new(n));
    cache
        .write()
        .expect("rule cache poisoned")
        .entry(n)
        .or_insert(r)
        .clone()
}

/// Adaptive bisection with a 15-point rule; the local error estimate is the
/// difference between one panel and its two halves.
pub fn adaptive<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> Result<f64> {
    let g = rule(15);
    let whole = g.integrate(a, b, f);
    let mut stack = vec![(a, b, whole, 0usize)];
    let mut total = 0.0;
    let mut err_total = 0.0;
    while let Some((lo, hi, val, depth)) = stack.pop() {
        let mid = 0.5 * (lo + hi);
        let left = g.integrate(lo, mid, f);
        let right = g.integrate(mid, hi, f);
        let err = (left + right - val).abs();
        let scale = (left + right).abs().max(whole.abs());
        let width_frac = (hi - lo) / (b - a);
        if err <= (abs_tol * width_frac).max(rel_tol * scale * width_frac) || err < 1e-300 {
            total += left + right;
            err_total += err;
        } else if depth >= 48 {
            return Err(Error::Precision(format!(
                "adaptive bisection exhausted on [{lo}, {hi}] with local error {err:e}"
            )));
        } else {
            stack.push((lo, mid, left, depth + 1));
            stack.push((mid, hi, right, depth + 1));
        }
    }
    let _ = err_total;
    Ok(total)
}

/// Split `[lo, hi]` at the given breakpoints and then cap every panel at
/// `max_width`.
pub fn panels(lo: f64, hi: f64, breaks: &[f64], max_width: f64) -> Vec<(f64, f64)> {
    if hi <= lo {
        return Vec::new();
    }
    let mut cuts: Vec<f64> = breaks.iter().copied().filter(|&b| b > lo && b < hi).collect();
    cuts.push(lo);
    cuts.push(hi);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|a, b| (*a - *b).abs() <= 1e-15 * (1.0 + b.abs()));
    let mut out = Vec::with_capacity(cuts.len());
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let pieces = if max_width.is_finite() && max_width > 0.0 {
            ((b - a) / max_width).ceil().max(1.0) as usize
        } else {
            1
        };
        let step = (b - a) / pieces as f64;
        for i in 0..pieces {
            let pa = a + step * i as f64;
            let pb = if i + 1 == pieces { b } else { a + step * (i + 1) as f64 };
            out.push((pa, pb));
        }
    }
    out
}

/// Nodes and weights along one axis from a panel list, spreading roughly
/// `total` nodes over the panels with at least `min_per_panel` each.
pub fn axis_nodes(panels: &[(f64, f64)], total: usize, min_per_panel: usize) -> Vec<(f64, f64)> {
    if panels.is_empty() {
        return Vec::new();
    }
    let per = (total / panels.len()).max(min_per_panel).max(1);
    let g = rule(per);
    let mut out = Vec::with_capacity(per * panels.len());
    for &(a, b) in panels {
        out.extend(g.mapped(a, b));
    }
    out
}

/// Visit every node of the tensor product of per-axis node lists. The
/// callback receives the point and the product weight.
pub fn tensor_visit<F: FnMut(&[f64], f64)>(axes: &[Vec<(f64, f64)>], mut f: F) {
    let d = axes.len();
    if d == 0 || axes.iter().any(|a| a.is_empty()) {
        return;
    }
    let mut idx = vec![0usize; d];
    let mut x = vec![0.0; d];
    loop {
        let mut w = 1.0;
        for k in 0..d {
            let (xk, wk) = axes[k][idx[k]];
            x[k] = xk;
            w *= wk;
        }
        f(&x, w);
        let mut k = d;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < axes[k].len() {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// Trapezoid rule on `n` uniformly spaced points.
pub fn trapezoid<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / (n - 1) as f64;
    let mut s = 0.5 * (f(a) + f(b));
    for i in 1..n - 1 {
        s += f(a + h * i as f64);
    }
    s * h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_two() {
        for n in [1, 2, 5, 24, 64, 128] {
            let g = GaussLegendre::new(n);
            let s: f64 = g.weights.iter().sum();
            assert!((s - 2.0).abs() < 1e-13, "n={n} sum={s}");
        }
    }

    #[test]
    fn exact_for_polynomials() {
        let g = GaussLegendre::new(6);
        for p in 0..12 {
            let got = g.integrate(-1.0, 1.0, |x| x.powi(p));
            let want = if p % 2 == 0 { 2.0 / (p as f64 + 1.0) } else { 0.0 };
            assert!((got - want).abs() < 1e-14, "p={p}");
        }
    }

    #[test]
    fn adaptive_handles_kink() {
        let v = adaptive(&|x: f64| x.abs(), -1.0, 2.0, 1e-12, 1e-12).unwrap();
        assert!((v - 2.5).abs() < 1e-11);
    }

    #[test]
    fn panels_cover_interval() {
        let p = panels(-1.0, 1.0, &[0.3, -0.2, 5.0], 0.25);
        assert_eq!(p.first().unwrap().0, -1.0);
        assert_eq!(p.last().unwrap().1, 1.0);
        for w in p.windows(2) {
            assert_eq!(w[0].1, w[1].0);
        }
        assert!(p.iter().all(|(a, b)| b - a <= 0.25 + 1e-15));
    }

    #[test]
    fn tensor_visit_integrates_product() {
        let g = rule(8);
        let ax: Vec<(f64, f64)> = g.mapped(0.0, 1.0).collect();
        let mut s = 0.0;
        tensor_visit(&[ax.clone(), ax.clone(), ax], |x, w| s += w * x[0] * x[1] * x[2]);
        assert!((s - 0.125).abs() < 1e-14);
    }
}
