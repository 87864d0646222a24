//! Explicit ReLU networks: sparse affine layers with ReLU between them,
//! exact complexity statistics, composition, and the constructive gadgets
//! (clip, reciprocal, product, B-spline terms) assembled into the
//! acceleration network u₈.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One affine map x ↦ A x + b with A stored row-wise as (column, value)
/// entries in insertion order. Entry order fixes the summation order, which
/// the gadgets rely on for exact cancellation.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(in_dim: usize, rows: Vec<Vec<(usize, f64)>>, bias: Vec<f64>) -> Result<Self> {
        if rows.len() != bias.len() {
            return Err(Error::DimMismatch { expected: rows.len(), got: bias.len() });
        }
        for r in &rows {
            if let Some(&(c, _)) = r.iter().find(|(c, _)| *c >= in_dim) {
                return Err(Error::Argument(format!("column {c} outside input width {in_dim}")));
            }
        }
        Ok(Self { in_dim, rows, bias })
    }

    pub fn out_dim(&self) -> usize {
        self.rows.len()
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (r, b) in self.rows.iter().zip(&self.bias) {
            let mut s = 0.0;
            for &(c, w) in r {
                s += w * x[c];
            }
            out.push(s + b);
        }
    }

    /// self ∘ inner (no ReLU between).
    fn after(&self, inner: &Layer) -> Layer {
        let mut rows = Vec::with_capacity(self.rows.len());
        let mut bias = Vec::with_capacity(self.rows.len());
        let mut slot: HashMap<usize, usize> = HashMap::new();
        for (r, b) in self.rows.iter().zip(&self.bias) {
            slot.clear();
            let mut acc: Vec<(usize, f64)> = Vec::new();
            let mut bb = 0.0;
            for &(j, w) in r {
                for &(i, v) in &inner.rows[j] {
                    match slot.get(&i) {
                        Some(&k) => acc[k].1 += w * v,
                        None => {
                            slot.insert(i, acc.len());
                            acc.push((i, w * v));
                        }
                    }
                }
                bb += w * inner.bias[j];
            }
            acc.retain(|&(_, v)| v != 0.0);
            rows.push(acc);
            bias.push(bb + b);
        }
        Layer { in_dim: inner.in_dim, rows, bias }
    }
}

/// Depth L, widths (W₀, …, W_L), nonzero count S and largest magnitude B.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetStats {
    pub depth: usize,
    pub widths: Vec<usize>,
    pub nonzeros: usize,
    pub max_abs: f64,
}

impl NetStats {
    pub fn max_width(&self) -> usize {
        self.widths.iter().copied().max().unwrap_or(0)
    }
}

/// (A^{(L)}ReLU(·) + b^{(L)}) ∘ … ∘ (A^{(1)}x + b^{(1)}).
#[derive(Debug, Clone, PartialEq)]
pub struct ReluNetwork {
    pub input_dim: usize,
    pub layers: Vec<Layer>,
}

impl ReluNetwork {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::Argument("network needs at least one layer".into()))?;
        let input_dim = first.in_dim;
        for w in layers.windows(2) {
            if w[1].in_dim != w[0].out_dim() {
                return Err(Error::DimMismatch { expected: w[0].out_dim(), got: w[1].in_dim });
            }
        }
        Ok(Self { input_dim, layers })
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim()).unwrap_or(0)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::DimMismatch { expected: self.input_dim, got: x.len() });
        }
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            l.apply(&cur, &mut next);
            if i < last {
                for v in next.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    pub fn stats(&self) -> NetStats {
        let mut widths = vec![self.input_dim];
        let mut nonzeros = 0;
        let mut max_abs: f64 = 0.0;
        for l in &self.layers {
            widths.push(l.out_dim());
            for r in &l.rows {
                for &(_, w) in r {
                    if w != 0.0 {
                        nonzeros += 1;
                        max_abs = max_abs.max(w.abs());
                    }
                }
            }
            for &b in &l.bias {
                if b != 0.0 {
                    nonzeros += 1;
                    max_abs = max_abs.max(b.abs());
                }
            }
        }
        NetStats { depth: self.layers.len(), widths, nonzeros, max_abs }
    }

    /// x ↦ A x + b as a one-layer network.
    pub fn affine(in_dim: usize, rows: Vec<Vec<(usize, f64)>>, bias: Vec<f64>) -> Result<Self> {
        Self::new(vec![Layer::new(in_dim, rows, bias)?])
    }

    pub fn identity(d: usize) -> Self {
        let rows = (0..d).map(|i| vec![(i, 1.0)]).collect();
        Self { input_dim: d, layers: vec![Layer { in_dim: d, rows, bias: vec![0.0; d] }] }
    }

    /// Coordinates `idx` of the input, in order.
    pub fn select(in_dim: usize, idx: &[usize]) -> Self {
        let rows = idx.iter().map(|&i| vec![(i, 1.0)]).collect();
        Self { input_dim: in_dim, layers: vec![Layer { in_dim, rows, bias: vec![0.0; idx.len()] }] }
    }

    /// Network ignoring its input and returning `values`.
    pub fn constant(in_dim: usize, values: &[f64]) -> Self {
        Self {
            input_dim: in_dim,
            layers: vec![Layer { in_dim, rows: vec![Vec::new(); values.len()], bias: values.to_vec() }],
        }
    }

    /// outer ∘ inner; the adjoining affine maps merge, so
    /// L = L_outer + L_inner − 1.
    pub fn compose(outer: &ReluNetwork, inner: &ReluNetwork) -> Result<Self> {
        if outer.input_dim != inner.output_dim() {
            return Err(Error::DimMismatch { expected: outer.input_dim, got: inner.output_dim() });
        }
        let mut layers: Vec<Layer> = inner.layers[..inner.layers.len() - 1].to_vec();
        let merged = outer.layers[0].after(inner.layers.last().expect("nonempty"));
        layers.push(merged);
        layers.extend(outer.layers[1..].iter().cloned());
        Ok(Self { input_dim: inner.input_dim, layers })
    }

    /// Same function with `extra` more layers: the last affine output y is
    /// split into ReLU(y), ReLU(−y) and recombined at the end.
    pub fn deepen(&self, extra: usize) -> Self {
        if extra == 0 {
            return self.clone();
        }
        let mut layers = self.layers.clone();
        let last = layers.pop().expect("nonempty");
        let m = last.out_dim();
        let mut rows = last.rows.clone();
        rows.extend(last.rows.iter().map(|r| r.iter().map(|&(c, w)| (c, -w)).collect::<Vec<_>>()));
        let mut bias = last.bias.clone();
        bias.extend(last.bias.iter().map(|b| -b));
        layers.push(Layer { in_dim: last.in_dim, rows, bias });
        for _ in 1..extra {
            let rows = (0..2 * m).map(|i| vec![(i, 1.0)]).collect();
            layers.push(Layer { in_dim: 2 * m, rows, bias: vec![0.0; 2 * m] });
        }
        let rows = (0..m).map(|i| vec![(i, 1.0), (m + i, -1.0)]).collect();
        layers.push(Layer { in_dim: 2 * m, rows, bias: vec![0.0; m] });
        Self { input_dim: self.input_dim, layers }
    }

    /// Networks on a common input run side by side; outputs concatenate.
    /// Shallower members are deepened to the common depth.
    pub fn parallel(nets: &[ReluNetwork]) -> Result<Self> {
        let first = nets.first().ok_or_else(|| Error::Argument("parallel needs at least one network".into()))?;
        let input_dim = first.input_dim;
        if let Some(n) = nets.iter().find(|n| n.input_dim != input_dim) {
            return Err(Error::DimMismatch { expected: input_dim, got: n.input_dim });
        }
        let depth = nets.iter().map(|n| n.depth()).max().unwrap_or(1);
        let padded: Vec<ReluNetwork> = nets.iter().map(|n| n.deepen(depth - n.depth())).collect();
        let mut layers = Vec::with_capacity(depth);
        for li in 0..depth {
            let mut rows = Vec::new();
            let mut bias = Vec::new();
            let mut offset = 0;
            for n in &padded {
                let l = &n.layers[li];
                let shift = if li == 0 { 0 } else { offset };
                rows.extend(l.rows.iter().map(|r| r.iter().map(|&(c, w)| (c + shift, w)).collect::<Vec<_>>()));
                bias.extend_from_slice(&l.bias);
                offset += l.in_dim;
            }
            let in_dim = if li == 0 { input_dim } else { offset };
            layers.push(Layer { in_dim, rows, bias });
        }
        Ok(Self { input_dim, layers })
    }

    /// Text form: `L d0 d1 … dL`, then per layer a line `layer i`, one line
    /// per nonzero `row col value`, and a `bias` line.
    pub fn to_text(&self) -> String {
        let mut s = format!("{}", self.layers.len());
        for w in self.stats().widths {
            let _ = write!(s, " {w}");
        }
        s.push('\n');
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(s, "layer {i}");
            for (r, row) in l.rows.iter().enumerate() {
                for &(c, w) in row {
                    let _ = writeln!(s, "{r} {c} {w:?}");
                }
            }
            s.push_str("bias");
            for b in &l.bias {
                let _ = write!(s, " {b:?}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, head) = lines.next().ok_or_else(|| bad(1, "empty input"))?;
        let nums: Vec<usize> = head
            .split_whitespace()
            .map(|v| v.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(1, "bad header"))?;
        if nums.is_empty() || nums.len() != nums[0] + 2 {
            return Err(bad(1, "header must list L and L+1 widths"));
        }
        let depth = nums[0];
        let widths = &nums[1..];
        let mut layers: Vec<Layer> = Vec::with_capacity(depth);
        let mut cur: Option<Layer> = None;
        for (i, line) in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.first().copied() {
                Some("layer") => {
                    let li = layers.len();
                    if li >= depth {
                        return Err(bad(i + 1, "more layers than declared"));
                    }
                    cur = Some(Layer {
                        in_dim: widths[li],
                        rows: vec![Vec::new(); widths[li + 1]],
                        bias: vec![0.0; widths[li + 1]],
                    });
                }
                Some("bias") => {
                    let mut l = cur.take().ok_or_else(|| bad(i + 1, "bias before layer"))?;
                    if f.len() != l.bias.len() + 1 {
                        return Err(bad(i + 1, "wrong bias length"));
                    }
                    for (k, v) in f[1..].iter().enumerate() {
                        l.bias[k] = v.parse().map_err(|_| bad(i + 1, "bad bias"))?;
                    }
                    layers.push(l);
                }
                _ => {
                    let l = cur.as_mut().ok_or_else(|| bad(i + 1, "entry outside layer"))?;
                    if f.len() != 3 {
                        return Err(bad(i + 1, "entry needs row col value"));
                    }
                    let r: usize = f[0].parse().map_err(|_| bad(i + 1, "bad row"))?;
                    let c: usize = f[1].parse().map_err(|_| bad(i + 1, "bad column"))?;
                    let w: f64 = f[2].parse().map_err(|_| bad(i + 1, "bad value"))?;
                    if r >= l.rows.len() || c >= l.in_dim {
                        return Err(bad(i + 1, "entry out of range"));
                    }
                    l.rows[r].push((c, w));
                }
            }
        }
        if layers.len() != depth {
            return Err(bad(0, "fewer layers than declared"));
        }
        Self::new(layers)
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 0.1) {
        return Err(Error::Argument(format!("gadget accuracy must lie in (0, 0.1], got {eps}")));
    }
    Ok(())
}

/// min{b, max{x, a}} per coordinate: L = 2, widths (d, 2d, d).
pub fn build_clip(d: usize, a: &[f64], b: &[f64]) -> Result<ReluNetwork> {
    if a.len() != d || b.len() != d {
        return Err(Error::DimMismatch { expected: d, got: a.len().min(b.len()) });
    }
    if let Some(i) = (0..d).find(|&i| !(a[i] <= b[i])) {
        return Err(Error::Argument(format!("clip bounds reversed on coordinate {i}: {} > {}", a[i], b[i])));
    }
    let mut rows = Vec::with_capacity(2 * d);
    let mut bias = Vec::with_capacity(2 * d);
    for i in 0..d {
        rows.push(vec![(i, 1.0)]);
        bias.push(-a[i]);
    }
    for i in 0..d {
        rows.push(vec![(i, 1.0)]);
        bias.push(-b[i]);
    }
    let l1 = Layer { in_dim: d, rows, bias };
    let rows2 = (0..d).map(|i| vec![(i, 1.0), (d + i, -1.0)]).collect();
    let l2 = Layer { in_dim: 2 * d, rows: rows2, bias: a.to_vec() };
    ReluNetwork::new(vec![l1, l2])
}

/// Clip to [−c, c] with no output bias, so a zero input gives an exactly
/// zero output: ReLU(x) − ReLU(x − c) − ReLU(−x) + ReLU(−x − c).
fn symmetric_clip_layer(d: usize, c: &[f64]) -> (Layer, Vec<Vec<(usize, f64)>>) {
    let mut rows = Vec::with_capacity(4 * d);
    let mut bias = Vec::with_capacity(4 * d);
    for i in 0..d {
        rows.push(vec![(i, 1.0)]);
        bias.push(0.0);
        rows.push(vec![(i, 1.0)]);
        bias.push(-c[i]);
        rows.push(vec![(i, -1.0)]);
        bias.push(0.0);
        rows.push(vec![(i, -1.0)]);
        bias.push(-c[i]);
    }
    let out = (0..d)
        .map(|i| vec![(4 * i, 1.0), (4 * i + 1, -1.0), (4 * i + 2, -1.0), (4 * i + 3, 1.0)])
        .collect();
    (Layer { in_dim: d, rows, bias }, out)
}

/// Piecewise-linear interpolant of 1/x on [lo, hi] after clipping the
/// input to that range. Knots are placed so the chord error is ≤ eps on
/// every interval. Each interval contributes a ramp ReLU(t) − ReLU(t − 1)
/// in [0, 1] scaled by the (positive) drop of 1/x across it, so no large
/// terms cancel.
pub fn build_recip_range(lo: f64, hi: f64, eps: f64) -> Result<ReluNetwork> {
    if !(lo > 0.0 && hi > lo && eps > 0.0) {
        return Err(Error::Argument(format!("reciprocal range [{lo}, {hi}] with eps {eps} is invalid")));
    }
    let mut knots = vec![lo];
    loop {
        let a = *knots.last().expect("nonempty");
        if a >= hi {
            break;
        }
        let q = (0.9 * eps * a).sqrt();
        let b = if q >= 1.0 { hi } else { (a / ((1.0 - q) * (1.0 - q))).min(hi) };
        knots.push(b);
        if knots.len() > 50_000_000 {
            return Err(Error::Argument("reciprocal needs too many knots".into()));
        }
    }
    let k = knots.len() - 1;
    let clip = build_clip(1, &[lo], &[hi])?;
    let mut rows = Vec::with_capacity(2 * k);
    let mut bias = Vec::with_capacity(2 * k);
    for i in 0..k {
        let h = knots[i + 1] - knots[i];
        // t_i = (x_{i+1} − z)/h
        rows.push(vec![(0, -1.0 / h)]);
        bias.push(knots[i + 1] / h);
        rows.push(vec![(0, -1.0 / h)]);
        bias.push(knots[i + 1] / h - 1.0);
    }
    let ramps = Layer { in_dim: 1, rows, bias };
    let mut out = Vec::with_capacity(2 * k);
    for i in 0..k {
        let drop = 1.0 / knots[i] - 1.0 / knots[i + 1];
        out.push((2 * i, drop));
        out.push((2 * i + 1, -drop));
    }
    let head = Layer { in_dim: 2 * k, rows: vec![out], bias: vec![1.0 / hi] };
    let pl = ReluNetwork::new(vec![ramps, head])?;
    ReluNetwork::compose(&pl, &clip)
}

/// Reciprocal on [ε, 1/ε] with error ≤ ε.
pub fn build_recip(eps: f64) -> Result<ReluNetwork> {
    check_eps(eps)?;
    build_recip_range(eps, 1.0 / eps, eps)
}

/// Number of sawtooth levels m with 4^{−(m+1)}·scale ≤ eps.
fn square_levels(scale: f64, eps: f64) -> usize {
    let m = ((scale / eps).log(4.0) - 1.0).ceil();
    m.max(1.0) as usize
}

/// Layers computing, for each pre-activation w_q ∈ [−1, 1] produced by the
/// caller's first layer, u² with u = |w_q| by u − Σ_{s≤m} g_s(u)/4^s
/// (g the tent map). Returns the hidden layers after the first one and,
/// for every square q, the (column, coefficient) entries giving its output
/// from the last hidden layer in the order (a, b, c).
fn square_stack(count: usize, m: usize) -> (Vec<Layer>, Vec<[(usize, f64); 3]>) {
    let mut layers = Vec::new();
    // H1 = (ReLU(w), ReLU(−w)) per square is produced by the caller.
    // H2 = (u, ReLU(u − 1/2), u) with u = ReLU(w) + ReLU(−w).
    let mut rows = Vec::with_capacity(3 * count);
    let mut bias = Vec::with_capacity(3 * count);
    for q in 0..count {
        rows.push(vec![(2 * q, 1.0), (2 * q + 1, 1.0)]);
        bias.push(0.0);
        rows.push(vec![(2 * q, 1.0), (2 * q + 1, 1.0)]);
        bias.push(-0.5);
        rows.push(vec![(2 * q, 1.0), (2 * q + 1, 1.0)]);
        bias.push(0.0);
    }
    layers.push(Layer { in_dim: 2 * count, rows, bias });
    // From hidden (a, b, c) at stage s: g_s = 2a − 4b, acc_s = c − g_s/4^s.
    let mut four = 1.0;
    for _ in 1..m {
        four *= 4.0;
        let mut rows = Vec::with_capacity(3 * count);
        let mut bias = Vec::with_capacity(3 * count);
        for q in 0..count {
            let (a, b, c) = (3 * q, 3 * q + 1, 3 * q + 2);
            rows.push(vec![(a, 2.0), (b, -4.0)]);
            bias.push(0.0);
            rows.push(vec![(a, 2.0), (b, -4.0)]);
            bias.push(-0.5);
            rows.push(vec![(c, 1.0), (a, -2.0 / four), (b, 4.0 / four)]);
            bias.push(0.0);
        }
        layers.push(Layer { in_dim: 3 * count, rows, bias });
    }
    four *= 4.0;
    let outs = (0..count)
        .map(|q| [(3 * q + 2, 1.0), (3 * q, -2.0 / four), (3 * q + 1, 4.0 / four)])
        .collect();
    (layers, outs)
}

/// x·y for |x| ≤ cx, |y| ≤ cy with error ≤ eps, exactly symmetric when
/// cx = cy, and exactly zero when either input is zero. Inputs are clipped
/// to their ranges, so |output| ≤ cx·cy everywhere.
pub fn build_mult2(cx: f64, cy: f64, eps: f64) -> Result<ReluNetwork> {
    if !(cx > 0.0 && cy > 0.0 && eps > 0.0) {
        return Err(Error::Argument(format!("product ranges ({cx}, {cy}) and eps {eps} must be positive")));
    }
    let (l1, clip_out) = symmetric_clip_layer(2, &[cx, cy]);
    // Balanced operands x' = x/s, y' = y·s with |x'|, |y'| ≤ M = √(cx·cy).
    let big = (cx * cy).sqrt();
    let s = (cx / cy).sqrt();
    let scale = [1.0 / s, s];
    // Each output is (M²/2)·Σ_copies (sq(w₊) − sq(w₋))/2 … averaged over the
    // two input orders, w± = (x' ± y')/(2M).
    let m = square_levels(2.0 * big * big, eps);
    let mut rows = Vec::new();
    let bias_len = 8;
    // order: copy0 (+, −), copy1 (+, −); each square needs ReLU(w), ReLU(−w)
    for copy in 0..2 {
        let (p, q) = if copy == 0 { (0, 1) } else { (1, 0) };
        for sign in [1.0, -1.0] {
            for flip in [1.0, -1.0] {
                let mut r = Vec::new();
                for &(c, w) in &clip_out[p] {
                    r.push((c, flip * w * scale[p] / (2.0 * big)));
                }
                for &(c, w) in &clip_out[q] {
                    r.push((c, flip * sign * w * scale[q] / (2.0 * big)));
                }
                rows.push(r);
            }
        }
    }
    let l2 = Layer { in_dim: 8, rows, bias: vec![0.0; bias_len] };
    let (stack, outs) = square_stack(4, m);
    // squares in order: copy0+, copy0−, copy1+, copy1−
    let k = big * big / 2.0;
    let mut out = Vec::new();
    for e in 0..3 {
        for (q, sign) in [(0usize, 1.0), (1, -1.0)] {
            let (c, w) = outs[q][e];
            out.push((c, sign * k * w));
        }
    }
    let mut out1 = Vec::new();
    for e in 0..3 {
        for (q, sign) in [(2usize, 1.0), (3, -1.0)] {
            let (c, w) = outs[q][e];
            out1.push((c, sign * k * w));
        }
    }
    // Halves: a0 = Σ out, a1 = Σ out1; result = a0 + a1 summed as two
    // partial sums so swapping inputs only swaps them.
    let last_in = stack.last().map(|l| l.out_dim()).expect("stack nonempty");
    let head_a = Layer { in_dim: last_in, rows: vec![out, out1], bias: vec![0.0, 0.0] };
    let mut layers = vec![l1, l2];
    layers.extend(stack);
    layers.push(head_a);
    let net = ReluNetwork::new(layers)?;
    // Final sum of the two halves as its own affine map (merged by compose).
    let sum = ReluNetwork::affine(2, vec![vec![(0, 1.0), (1, 1.0)]], vec![0.0])?;
    ReluNetwork::compose(&sum, &net)
}

/// Π x_i on [−C, C]^d by a balanced binary tree of pairwise products.
/// Each pairwise product gets accuracy eps/(2d·C^d) so the tree stays
/// within eps.
pub fn build_mult(d: usize, c: f64, eps: f64) -> Result<ReluNetwork> {
    if d < 2 || !(c >= 1.0) {
        return Err(Error::Argument(format!("product needs d >= 2 and C >= 1, got d={d}, C={c}")));
    }
    check_eps(eps)?;
    build_mult_ranges(&vec![c; d], eps / (2.0 * d as f64 * c.powi(d as i32)))
}

/// Product tree for inputs with individual ranges; `node_eps` is the
/// accuracy of every pairwise node.
pub fn build_mult_ranges(ranges: &[f64], node_eps: f64) -> Result<ReluNetwork> {
    let d = ranges.len();
    if d == 1 {
        return Ok(ReluNetwork::identity(1));
    }
    let mut level: Vec<ReluNetwork> = Vec::new();
    let mut next_ranges = Vec::new();
    let mut i = 0;
    while i < d {
        if i + 1 < d {
            let pair = build_mult2(ranges[i], ranges[i + 1], node_eps)?;
            level.push(ReluNetwork::compose(&pair, &ReluNetwork::select(d, &[i, i + 1]))?);
            next_ranges.push(ranges[i] * ranges[i + 1]);
            i += 2;
        } else {
            level.push(ReluNetwork::select(d, &[i]));
            next_ranges.push(ranges[i]);
            i += 1;
        }
    }
    let stage = ReluNetwork::parallel(&level)?;
    let rest = build_mult_ranges(&next_ranges, node_eps)?;
    ReluNetwork::compose(&rest, &stage)
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// One axis factor t ↦ cardinal_bspline(ℓ, 2^k t − j) as a network on the
/// full input, reading coordinate `axis`. Uses the reflected argument
/// z′ = c − |z − c|, c = (ℓ+1)/2, so the truncated-power sum only sees
/// nonnegative-side terms and vanishes exactly off the support.
fn bspline_axis(in_dim: usize, axis: usize, k: u32, j: i64, ell: usize, eps: f64) -> Result<ReluNetwork> {
    let scale = (1u64 << k) as f64;
    let c = (ell as f64 + 1.0) / 2.0;
    // hidden: ReLU(z − c), ReLU(c − z) with z = 2^k t − j
    let l1 = Layer {
        in_dim,
        rows: vec![vec![(axis, scale)], vec![(axis, -scale)]],
        bias: vec![-(j as f64) - c, j as f64 + c],
    };
    if ell == 0 {
        // Steep ramp approximation of the indicator of [0, 1).
        let delta = eps * 1e-3;
        let l2 = Layer {
            in_dim: 2,
            rows: vec![vec![(0, -1.0 / delta), (1, -1.0 / delta)], vec![(0, -1.0 / delta), (1, -1.0 / delta)]],
            bias: vec![c / delta, c / delta - 1.0],
        };
        let l3 = Layer { in_dim: 2, rows: vec![vec![(0, 1.0), (1, -1.0)]], bias: vec![0.0] };
        return ReluNetwork::new(vec![l1, l2, l3]);
    }
    // r_i = ReLU(z′ − i) for i < c, z′ = c − ReLU(z − c) − ReLU(c − z)
    let terms: Vec<usize> = (0..=ell + 1).filter(|&i| (i as f64) < c).collect();
    let rows = terms.iter().map(|_| vec![(0, -1.0), (1, -1.0)]).collect();
    let bias = terms.iter().map(|&i| c - i as f64).collect();
    let l2 = Layer { in_dim: 2, rows, bias };
    let fact: f64 = (1..=ell).map(|v| v as f64).product();
    let coefs: Vec<f64> = terms
        .iter()
        .map(|&i| if i % 2 == 0 { 1.0 } else { -1.0 } * binom(ell + 1, i) / fact)
        .collect();
    let r_net = ReluNetwork::new(vec![l1, l2, Layer {
        in_dim: terms.len(),
        rows: (0..terms.len()).map(|i| vec![(i, 1.0)]).collect(),
        bias: vec![0.0; terms.len()],
    }])?;
    let head = ReluNetwork::affine(terms.len(), vec![coefs.iter().enumerate().map(|(i, &w)| (i, w)).collect()], vec![0.0])?;
    if ell == 1 {
        return ReluNetwork::compose(&head, &r_net);
    }
    let coef_sum: f64 = coefs.iter().map(|v| v.abs()).sum();
    let node_eps = eps / (coef_sum * 2.0 * ell as f64 * c.max(1.0).powi(ell as i32));
    let mut powers = Vec::new();
    for i in 0..terms.len() {
        let copies = ReluNetwork::select(terms.len(), &vec![i; ell]);
        let tree = build_mult_ranges(&vec![c; ell], node_eps)?;
        powers.push(ReluNetwork::compose(&tree, &copies)?);
    }
    let pw = ReluNetwork::parallel(&powers)?;
    let inner = ReluNetwork::compose(&pw, &r_net)?;
    ReluNetwork::compose(&head, &inner)
}

/// Network for the tensor term Π cardinal_bspline(ℓ, 2^{k_m} x_m − j_m)
/// within eps of the exact value, exactly zero off its support.
pub fn compile_bspline_net(k: &[u32], j: &[i64], ell: usize, eps: f64) -> Result<ReluNetwork> {
    if ell > 4 {
        return Err(Error::Argument(format!("spline order {ell} outside 0..=4")));
    }
    check_eps(eps)?;
    let d = k.len();
    if j.len() != d || d == 0 {
        return Err(Error::DimMismatch { expected: d, got: j.len() });
    }
    let axis_eps = if d == 1 { eps } else { eps / (2.0 * d as f64) };
    let axes: Vec<ReluNetwork> = (0..d)
        .map(|m| bspline_axis(d, m, k[m], j[m], ell, axis_eps))
        .collect::<Result<_>>()?;
    if d == 1 {
        return Ok(axes.into_iter().next().expect("one axis"));
    }
    let stage = ReluNetwork::parallel(&axes)?;
    let tree = build_mult_ranges(&vec![1.0; d], eps / (4.0 * d as f64))?;
    ReluNetwork::compose(&tree, &stage)
}

/// Constants of the acceleration network: clip range of f₁, the C₅ caps,
/// N, and bounds on |f₂|, |f₃| used to size the products.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AccelConsts {
    pub clamp: f64,
    pub upper: f64,
    pub c5: f64,
    pub n: usize,
    pub f2_max: f64,
    pub f3_max: f64,
    pub eps: f64,
}

/// Stage networks of u₈ together with the composed network.
#[derive(Debug, Clone)]
pub struct AccelNet {
    pub stages: Vec<ReluNetwork>,
    pub net: ReluNetwork,
    pub d: usize,
}

impl AccelNet {
    /// Stage-by-stage evaluation.
    pub fn eval_staged(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut cur = z.to_vec();
        for s in &self.stages {
            cur = s.eval(&cur)?;
        }
        Ok(cur)
    }
}

/// u₈ = ζ₇ + ζ₈ from the stage chain
/// ζ₁ = clip(u₅; clamp, upper), ζ₂ = recip(ζ₁), ζ₃ = ζ₂·u₆,
/// ζ₄ = clip(ζ₃; ±C₅√ln N), ζ₅ = ζ₂·u₇, ζ₆ = clip(ζ₅; ±C₅),
/// ζ₇ = ζ₄·â″, ζ₈ = ζ₆·b̂″.
/// `u5`, `u6`, `u7` share one input; `a2`, `b2` are constant-output networks
/// on the same input. Gadget accuracies are split so that each of the five
/// approximate stages contributes at most `consts.eps` to the output.
pub fn assemble_accel_net(
    u5: &ReluNetwork,
    u6: &ReluNetwork,
    u7: &ReluNetwork,
    a2: &ReluNetwork,
    b2: &ReluNetwork,
    consts: &AccelConsts,
) -> Result<AccelNet> {
    if !(consts.clamp > 0.0 && consts.upper > consts.clamp) {
        return Err(Error::Argument(format!("clamp {} must be positive and below {}", consts.clamp, consts.upper)));
    }
    let d = u6.output_dim();
    if u5.output_dim() != 1 || u7.output_dim() != d || a2.output_dim() != 1 || b2.output_dim() != 1 {
        return Err(Error::DimMismatch { expected: d, got: u7.output_dim() });
    }
    let input = u5.input_dim;
    for n in [u6, u7, a2, b2] {
        if n.input_dim != input {
            return Err(Error::DimMismatch { expected: input, got: n.input_dim });
        }
    }
    let c2 = a2.eval(&vec![0.0; input])?[0];
    let c3 = b2.eval(&vec![0.0; input])?[0];
    let cap2 = consts.c5 * (consts.n as f64).ln().sqrt();
    let eps = consts.eps;
    let eps_r = eps / (c2.abs() * consts.f2_max + c3.abs() * consts.f3_max).max(1.0);
    let eps_3 = eps / c2.abs().max(1.0);
    let eps_5 = eps / c3.abs().max(1.0);
    let inv_max = 1.0 / consts.clamp;

    // Stage 0: v0 = [u5, u6 (d), u7 (d), a2, b2]
    let s0 = ReluNetwork::parallel(&[u5.clone(), u6.clone(), u7.clone(), a2.clone(), b2.clone()])?;
    let w0 = 2 * d + 3;
    // Stage 1: [ζ₂, u6, u7, a2, b2]
    let recip = build_recip_range(consts.clamp, consts.upper, eps_r)?;
    let zeta2 = ReluNetwork::compose(&recip, &ReluNetwork::select(w0, &[0]))?;
    let rest: Vec<usize> = (1..w0).collect();
    let s1 = ReluNetwork::parallel(&[zeta2, ReluNetwork::select(w0, &rest)])?;
    // Stage 2: [ζ₄ (d), ζ₆ (d), a2, b2]
    let mut parts = Vec::new();
    for m in 0..d {
        let prod = build_mult2(inv_max, consts.f2_max, eps_3)?;
        let z3 = ReluNetwork::compose(&prod, &ReluNetwork::select(w0, &[0, 1 + m]))?;
        let clip = build_clip(1, &[-cap2], &[cap2])?;
        parts.push(ReluNetwork::compose(&clip, &z3)?);
    }
    for m in 0..d {
        let prod = build_mult2(inv_max, consts.f3_max, eps_5)?;
        let z5 = ReluNetwork::compose(&prod, &ReluNetwork::select(w0, &[0, 1 + d + m]))?;
        let clip = build_clip(1, &[-consts.c5], &[consts.c5])?;
        parts.push(ReluNetwork::compose(&clip, &z5)?);
    }
    parts.push(ReluNetwork::select(w0, &[2 * d + 1, 2 * d + 2]));
    let s2 = ReluNetwork::parallel(&parts)?;
    // Stage 3: u₈ = ζ₇ + ζ₈ per coordinate
    let w2 = 2 * d + 2;
    let ca = c2.abs().max(f64::MIN_POSITIVE);
    let cb = c3.abs().max(f64::MIN_POSITIVE);
    let mut outs = Vec::new();
    for m in 0..d {
        let z7 = ReluNetwork::compose(&build_mult2(cap2, ca, eps)?, &ReluNetwork::select(w2, &[m, 2 * d]))?;
        let z8 = ReluNetwork::compose(&build_mult2(consts.c5, cb, eps)?, &ReluNetwork::select(w2, &[d + m, 2 * d + 1]))?;
        let both = ReluNetwork::parallel(&[z7, z8])?;
        let sum = ReluNetwork::affine(2, vec![vec![(0, 1.0), (1, 1.0)]], vec![0.0])?;
        outs.push(ReluNetwork::compose(&sum, &both)?);
    }
    let s3 = ReluNetwork::parallel(&outs)?;
    let stages = vec![s0, s1, s2, s3];
    let mut net = stages[0].clone();
    for s in &stages[1..] {
        net = ReluNetwork::compose(s, &net)?;
    }
    Ok(AccelNet { stages, net, d })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bspline::{cardinal_bspline, tensor_bspline};
    use rand::{Rng, SeedableRng};

    fn naive_eval(net: &ReluNetwork, x: &[f64]) -> Vec<f64> {
        // Dense re-implementation used as an independent oracle.
        let mut cur = x.to_vec();
        for (li, l) in net.layers.iter().enumerate() {
            let mut dense = vec![vec![0.0; l.in_dim]; l.out_dim()];
            for (r, row) in l.rows.iter().enumerate() {
                for &(c, w) in row {
                    dense[r][c] += w;
                }
            }
            let mut next: Vec<f64> = dense
                .iter()
                .zip(&l.bias)
                .map(|(row, b)| row.iter().zip(&cur).map(|(w, v)| w * v).sum::<f64>() + b)
                .collect();
            if li + 1 < net.layers.len() {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn identity_and_relu() {
        let id = ReluNetwork::identity(3);
        assert_eq!(id.eval(&[1.0, -2.0, 3.0]).unwrap(), vec![1.0, -2.0, 3.0]);
        let relu = ReluNetwork::new(vec![
            Layer::new(1, vec![vec![(0, 1.0)]], vec![0.0]).unwrap(),
            Layer::new(1, vec![vec![(0, 1.0)]], vec![0.0]).unwrap(),
        ])
        .unwrap();
        assert_eq!(relu.eval(&[-2.0]).unwrap(), vec![0.0]);
        assert_eq!(relu.eval(&[2.5]).unwrap(), vec![2.5]);
        let st = id.stats();
        assert_eq!((st.depth, st.widths.clone(), st.nonzeros, st.max_abs), (1, vec![3, 3], 3, 1.0));
        assert!(id.eval(&[1.0]).is_err());
    }

    #[test]
    fn random_net_matches_dense_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut layers = Vec::new();
        let dims = [4, 7, 5, 2];
        for w in dims.windows(2) {
            let rows = (0..w[1]).map(|_| (0..w[0]).map(|c| (c, rng.random_range(-1.0..1.0))).collect()).collect();
            let bias = (0..w[1]).map(|_| rng.random_range(-0.5..0.5)).collect();
            layers.push(Layer::new(w[0], rows, bias).unwrap());
        }
        let net = ReluNetwork::new(layers).unwrap();
        for _ in 0..100 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a = net.eval(&x).unwrap();
            let b = naive_eval(&net, &x);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn clip_examples_and_stats() {
        let c = build_clip(2, &[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(c.eval(&[2.0, -3.0]).unwrap(), vec![1.0, -1.0]);
        assert_eq!(c.eval(&[0.25, -0.5]).unwrap(), vec![0.25, -0.5]);
        let a: Vec<f64> = (0..5).map(|i| -(i as f64) - 1.0).collect();
        let b: Vec<f64> = (0..5).map(|i| 2.0 * i as f64 + 1.0).collect();
        let st = build_clip(5, &a, &b).unwrap().stats();
        assert_eq!(st.depth, 2);
        assert_eq!(st.max_width(), 10);
        assert!(st.nonzeros <= 35);
        assert_eq!(st.max_abs, 9.0);
        let st3 = build_clip(3, &[-1.0; 3], &[1.0; 3]).unwrap().stats();
        assert_eq!(st3.widths, vec![3, 6, 3]);
        assert!(st3.nonzeros <= 21);
        assert!(build_clip(1, &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn recip_examples() {
        let r = build_recip(0.05).unwrap();
        assert!((r.eval(&[1.0]).unwrap()[0] - 1.0).abs() <= 0.05);
        assert!((r.eval(&[0.5]).unwrap()[0] - 2.0).abs() <= 0.05);
        for eps in [0.1, 0.05, 0.02] {
            let r = build_recip(eps).unwrap();
            for i in 0..=4000 {
                let x = eps * (1.0 / (eps * eps)).powf(i as f64 / 4000.0);
                let v = r.eval(&[x]).unwrap()[0];
                assert!((v - 1.0 / x).abs() <= eps, "eps={eps} x={x} v={v}");
                let v2 = r.eval(&[x + 1e-4]).unwrap()[0];
                assert!((v2 - 1.0 / x).abs() <= eps + 1e-4 / (eps * eps));
            }
        }
        assert!(build_recip(0.2).is_err());
    }

    #[test]
    fn mult_examples() {
        let m = build_mult(2, 1.0, 0.01).unwrap();
        assert!((m.eval(&[0.5, 0.5]).unwrap()[0] - 0.25).abs() <= 0.01);
        let m3 = build_mult(3, 2.0, 0.01).unwrap();
        for (x, y) in [(1.3, -0.7), (-2.0, 2.0), (0.0, 5.0)] {
            assert_eq!(m3.eval(&[x, 0.0, y]).unwrap()[0], 0.0);
            assert_eq!(m3.eval(&[0.0, x, y]).unwrap()[0], 0.0);
            assert_eq!(m3.eval(&[x, y, 0.0]).unwrap()[0], 0.0);
        }
        for d in [2usize, 3] {
            assert!(build_mult(d, 2.0, 0.01).unwrap().stats().max_width() <= 48 * d);
        }
        let v = m3.eval(&[100.0, 100.0, 100.0]).unwrap()[0];
        assert!(v.abs() <= 8.0 + 1e-9);
    }

    #[test]
    fn mult_symmetric_and_accurate() {
        let m = build_mult(2, 2.0, 0.01).unwrap();
        for i in 0..41 {
            for j in 0..41 {
                let x = -2.0 + 0.1 * i as f64;
                let y = -2.0 + 0.1 * j as f64;
                let a = m.eval(&[x, y]).unwrap()[0];
                let b = m.eval(&[y, x]).unwrap()[0];
                assert_eq!(a.to_bits(), b.to_bits(), "x={x} y={y}");
                assert!((a - x * y).abs() <= 0.01);
            }
        }
    }

    #[test]
    fn bspline_nets() {
        let hat = compile_bspline_net(&[0], &[0], 1, 0.01).unwrap();
        for i in 0..=300 {
            let x = -1.0 + 4.0 * i as f64 / 300.0;
            assert!((hat.eval(&[x]).unwrap()[0] - cardinal_bspline(1, x)).abs() <= 1e-12);
        }
        let q = compile_bspline_net(&[0], &[0], 2, 0.01).unwrap();
        for i in 0..=600 {
            let x = 3.0 * i as f64 / 600.0;
            assert!((q.eval(&[x]).unwrap()[0] - cardinal_bspline(2, x)).abs() <= 0.01);
        }
        assert_eq!(q.eval(&[-0.5]).unwrap()[0], 0.0);
        assert_eq!(q.eval(&[3.5]).unwrap()[0], 0.0);
        let t = compile_bspline_net(&[1, 0], &[-1, -2], 3, 0.02).unwrap();
        for i in 0..=20 {
            for j in 0..=20 {
                let x = [-1.0 + 0.1 * i as f64, -1.0 + 0.1 * j as f64];
                let want = tensor_bspline(&[1, 0], &[-1, -2], 3, &x);
                assert!((t.eval(&x).unwrap()[0] - want).abs() <= 0.02);
            }
        }
        assert!(compile_bspline_net(&[0], &[0], 5, 0.01).is_err());
    }

    #[test]
    fn compose_depth_and_associativity() {
        let a = build_mult(2, 1.0, 0.01).unwrap();
        let c = build_clip(2, &[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let ac = ReluNetwork::compose(&a, &c).unwrap();
        assert_eq!(ac.depth(), a.depth() + c.depth() - 1);
        for x in [[0.3, -2.0], [0.9, 0.4], [-1.5, 1.5]] {
            let staged = a.eval(&c.eval(&x).unwrap()).unwrap();
            let direct = ac.eval(&x).unwrap();
            assert!((staged[0] - direct[0]).abs() <= 1e-12);
        }
    }

    #[test]
    fn text_round_trip() {
        let m = build_mult(2, 1.0, 0.05).unwrap();
        let back = ReluNetwork::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert!(ReluNetwork::from_text("2 1 1\n").is_err());
    }

    fn oracle_consts() -> AccelConsts {
        AccelConsts { clamp: 1e-3, upper: 1e4, c5: 3.0, n: 16, f2_max: 4.0, f3_max: 2.0, eps: 1e-3 }
    }

    #[test]
    fn zero_inputs_give_zero_accel() {
        let d = 1;
        let inp = 1 + 2 * d;
        let u5 = ReluNetwork::select(inp, &[0]);
        let zero = ReluNetwork::constant(inp, &vec![0.0; d]);
        let a2 = ReluNetwork::constant(inp, &[1.7]);
        let b2 = ReluNetwork::constant(inp, &[-0.4]);
        let net = assemble_accel_net(&u5, &zero, &zero, &a2, &b2, &oracle_consts()).unwrap();
        for f1 in [0.01, 0.5, 3.0] {
            assert_eq!(net.net.eval(&[f1, 0.3, -0.2]).unwrap(), vec![0.0]);
        }
    }

    #[test]
    fn accel_matches_formula() {
        let d = 1;
        let inp = 1 + 2 * d;
        let u5 = ReluNetwork::select(inp, &[0]);
        let u6 = ReluNetwork::select(inp, &[1]);
        let u7 = ReluNetwork::select(inp, &[2]);
        let (c2, c3) = (-2.5, 0.8);
        let a2 = ReluNetwork::constant(inp, &[c2]);
        let b2 = ReluNetwork::constant(inp, &[c3]);
        let k = oracle_consts();
        let net = assemble_accel_net(&u5, &u6, &u7, &a2, &b2, &k).unwrap();
        let cap = k.c5 * (k.n as f64).ln().sqrt();
        for (f1, f2, f3) in [(0.5, 0.3, -0.2), (1.2, -1.0, 0.9), (0.05, 0.01, 0.02), (2.0, 3.9, -1.9)] {
            let z: f64 = f1;
            let g = z.max(k.clamp);
            let e2: f64 = (f2 / g).clamp(-cap, cap);
            let e3: f64 = (f3 / g).clamp(-k.c5, k.c5);
            let want = c2 * e2 + c3 * e3;
            let got = net.net.eval(&[f1, f2, f3]).unwrap()[0];
            assert!((got - want).abs() <= 5.0 * k.eps, "{got} vs {want}");
            let staged = net.eval_staged(&[f1, f2, f3]).unwrap()[0];
            assert!((staged - got).abs() <= 1e-9 * (1.0 + got.abs()));
        }
        // â″ = 0 leaves only the ζ₈ branch.
        let zero_a = ReluNetwork::constant(inp, &[0.0]);
        let net0 = assemble_accel_net(&u5, &u6, &u7, &zero_a, &b2, &k).unwrap();
        let v = net0.net.eval(&[0.5, 0.3, -0.2]).unwrap()[0];
        assert!((v - c3 * (-0.4)).abs() <= 2.0 * k.eps);
    }
}
