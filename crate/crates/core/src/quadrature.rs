//! Gauss–Legendre rules and iterated (nested) product rules over bodies whose
//! sections are intervals.

use std::f64::consts::PI;

/// Nodes and weights of the `order`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(order >= 1, "quadrature order must be positive");
    let mut nodes = vec![0.0; order];
    let mut weights = vec![0.0; order];
    let n = order as f64;
    for i in 0..(order + 1) / 2 {
        // Tricomi initial guess, then Newton on P_n.
        let mut x = (PI * (i as f64 + 0.75) / (n + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre(order, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(order, x);
        dp = if d.is_finite() { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[order - 1 - i] = x;
        weights[i] = w;
        weights[order - 1 - i] = w;
    }
    if order % 2 == 1 {
        nodes[order / 2] = 0.0;
    }
    (nodes, weights)
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// How the integrand behaves at an end of an interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum End {
    Regular,
    /// Square-root behaviour, as at the rim of a ball.
    Sqrt,
}

/// A 1D integration piece `[lo, hi]`.
#[derive(Debug, Clone, Copy)]
pub struct Piece {
    pub lo: f64,
    pub hi: f64,
    pub lo_end: End,
    pub hi_end: End,
}

impl Piece {
    pub fn regular(lo: f64, hi: f64) -> Self {
        Piece { lo, hi, lo_end: End::Regular, hi_end: End::Regular }
    }

    /// Map reference GL nodes into this piece, absorbing the substitution
    /// Jacobian into the weights.
    pub fn map(&self, nodes: &[f64], weights: &[f64], out: &mut Vec<(f64, f64)>) {
        let (lo, hi) = (self.lo, self.hi);
        let len = hi - lo;
        if !(len > 0.0) {
            return;
        }
        for (&u, &w) in nodes.iter().zip(weights) {
            let (x, jac) = match (self.lo_end, self.hi_end) {
                (End::Regular, End::Regular) => (lo + 0.5 * (u + 1.0) * len, 0.5 * len),
                (End::Sqrt, End::Sqrt) => {
                    let mid = 0.5 * (lo + hi);
                    let half = 0.5 * len;
                    let th = 0.5 * PI * u;
                    (mid + half * th.sin(), half * 0.5 * PI * th.cos())
                }
                (End::Regular, End::Sqrt) => {
                    let s = 0.5 * (u + 1.0);
                    (hi - len * s * s, len * s)
                }
                (End::Sqrt, End::Regular) => {
                    let s = 0.5 * (u + 1.0);
                    (lo + len * s * s, len * s)
                }
            };
            out.push((x, w * jac));
        }
    }
}

/// Iterated product rule. `sections(prefix)` returns the pieces covering the
/// section of the body along the next coordinate given the fixed `prefix`.
/// Returns flattened points (row-major, `dim` per point) and weights.
pub fn nested_rule(
    dim: usize,
    order: usize,
    sections: &dyn Fn(&[f64]) -> Vec<Piece>,
) -> (Vec<f64>, Vec<f64>) {
    let (nodes, weights) = gauss_legendre(order);
    let mut points = Vec::new();
    let mut out_w = Vec::new();
    let mut prefix = Vec::with_capacity(dim);
    recurse(dim, &nodes, &weights, sections, &mut prefix, 1.0, &mut points, &mut out_w);
    (points, out_w)
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    dim: usize,
    nodes: &[f64],
    weights: &[f64],
    sections: &dyn Fn(&[f64]) -> Vec<Piece>,
    prefix: &mut Vec<f64>,
    w: f64,
    points: &mut Vec<f64>,
    out_w: &mut Vec<f64>,
) {
    if prefix.len() == dim {
        points.extend_from_slice(prefix);
        out_w.push(w);
        return;
    }
    let mut mapped = Vec::new();
    for piece in sections(prefix) {
        piece.map(nodes, weights, &mut mapped);
    }
    for (x, wx) in mapped {
        prefix.push(x);
        recurse(dim, nodes, weights, sections, prefix, w * wx, points, out_w);
        prefix.pop();
    }
}

/// Tensor Gauss–Legendre rule on the box `[lo, hi]`.
pub fn box_rule(lo: &[f64], hi: &[f64], order: usize) -> (Vec<f64>, Vec<f64>) {
    let dim = lo.len();
    nested_rule(dim, order, &|prefix: &[f64]| {
        let k = prefix.len();
        vec![Piece::regular(lo[k], hi[k])]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gl_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(8);
        let s: f64 = w.iter().sum();
        assert!((s - 2.0).abs() < 1e-14);
        // ∫ x^14 over [-1,1] = 2/15, degree 14 < 2·8.
        let m: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(14)).sum();
        assert!((m - 2.0 / 15.0).abs() < 1e-14);
    }

    #[test]
    fn gl_high_order_weights_sum() {
        for order in [1, 2, 3, 16, 64, 128] {
            let (x, w) = gauss_legendre(order);
            assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-12, "order {order}");
            assert!(x.windows(2).all(|p| p[0] < p[1]));
        }
    }

    #[test]
    fn disc_area_with_sqrt_pieces() {
        let r: f64 = 0.7;
        let (_, w) = nested_rule(2, 32, &|p: &[f64]| {
            let rho = (r * r - p.iter().map(|x| x * x).sum::<f64>()).max(0.0).sqrt();
            vec![Piece { lo: -rho, hi: rho, lo_end: End::Sqrt, hi_end: End::Sqrt }]
        });
        let area: f64 = w.iter().sum();
        assert!((area - PI * r * r).abs() < 1e-10, "{area}");
    }

    #[test]
    fn one_sided_sqrt_piece() {
        // ∫_0^1 sqrt(1 - x) dx = 2/3
        let p = Piece { lo: 0.0, hi: 1.0, lo_end: End::Regular, hi_end: End::Sqrt };
        let (x, w) = gauss_legendre(10);
        let mut m = Vec::new();
        p.map(&x, &w, &mut m);
        let v: f64 = m.iter().map(|(x, w)| w * (1.0 - x).sqrt()).sum();
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
    }
}
