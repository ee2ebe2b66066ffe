//! Periodic lattice geometry and the discrete operators built on it.
//!
//! Vertices of the torus `(Z / (2L+1)Z)^d` are stored in row-major order of
//! their residues in `0..2L+1`. The canonical representative of a vertex lives
//! in `{-L, ..., L}^d`. Edge `x * d + i` joins `x` (tail) to `x + e_i` (head).

use crate::error::{Error, Result};
use crate::potential::PotentialSpec;

#[derive(Debug, Clone)]
pub struct Torus {
    d: usize,
    l: usize,
    side: usize,
    vertex_count: usize,
    edge_count: usize,
    // plus[x * d + i] = x + e_i, minus[x * d + i] = x - e_i
    plus: Vec<usize>,
    minus: Vec<usize>,
    // canonical coordinates, d entries per vertex
    coords: Vec<i64>,
    norm: Vec<f64>,
    // edges sharing an endpoint with a given edge (itself included)
    closure: Vec<usize>,
}

impl Torus {
    pub fn new(d: usize, l: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("torus.d", "dimension must be at least 1"));
        }
        if l == 0 {
            return Err(Error::invalid("torus.L", "half-side must be at least 1"));
        }
        let side = 2 * l + 1;
        let vertex_count = (0..d)
            .try_fold(1usize, |acc, _| acc.checked_mul(side))
            .ok_or_else(|| Error::invalid("torus", "vertex count overflows usize"))?;
        let edge_count = vertex_count
            .checked_mul(d)
            .filter(|e| e.checked_mul(4 * d).is_some())
            .ok_or_else(|| Error::invalid("torus", "edge count overflows usize"))?;

        let mut coords = vec![0i64; vertex_count * d];
        let mut norm = vec![0.0; vertex_count];
        let mut plus = vec![0usize; vertex_count * d];
        let mut minus = vec![0usize; vertex_count * d];
        let mut stride = vec![1usize; d];
        for i in 1..d {
            stride[i] = stride[i - 1] * side;
        }
        for x in 0..vertex_count {
            let mut sq = 0.0;
            for i in 0..d {
                let r = (x / stride[i]) % side;
                let c = if r <= l {
                    r as i64
                } else {
                    r as i64 - side as i64
                };
                coords[x * d + i] = c;
                sq += (c * c) as f64;
                let up = if r + 1 == side {
                    x - r * stride[i]
                } else {
                    x + stride[i]
                };
                let down = if r == 0 {
                    x + (side - 1) * stride[i]
                } else {
                    x - stride[i]
                };
                plus[x * d + i] = up;
                minus[x * d + i] = down;
            }
            norm[x] = sq.sqrt();
        }

        let width = 4 * d - 1;
        let mut closure = Vec::with_capacity(edge_count * width);
        let mut scratch = Vec::with_capacity(4 * d);
        for e in 0..edge_count {
            let tail = e / d;
            let head = plus[e];
            scratch.clear();
            for &v in &[tail, head] {
                for i in 0..d {
                    scratch.push(v * d + i);
                    scratch.push(minus[v * d + i] * d + i);
                }
            }
            scratch.sort_unstable();
            scratch.dedup();
            debug_assert_eq!(scratch.len(), width);
            closure.extend_from_slice(&scratch);
        }

        Ok(Torus {
            d,
            l,
            side,
            vertex_count,
            edge_count,
            plus,
            minus,
            coords,
            norm,
            closure,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    /// Vertex index of the canonical coordinates `c` (entries in `-L..=L`).
    pub fn vertex(&self, c: &[i64]) -> usize {
        assert_eq!(c.len(), self.d);
        let side = self.side as i64;
        let mut idx = 0usize;
        for i in (0..self.d).rev() {
            idx = idx * self.side + c[i].rem_euclid(side) as usize;
        }
        idx
    }

    pub fn coords(&self, x: usize) -> &[i64] {
        &self.coords[x * self.d..(x + 1) * self.d]
    }

    /// Euclidean norm of the canonical representative.
    pub fn norm(&self, x: usize) -> f64 {
        self.norm[x]
    }

    /// Euclidean norm of the canonical representative of `x - y`.
    pub fn distance(&self, x: usize, y: usize) -> f64 {
        let side = self.side as i64;
        let l = self.l as i64;
        let mut sq = 0.0;
        for (a, b) in self.coords(x).iter().zip(self.coords(y)) {
            let mut c = (a - b).rem_euclid(side);
            if c > l {
                c -= side;
            }
            sq += (c * c) as f64;
        }
        sq.sqrt()
    }

    /// `|x|_* = |x| + 1`.
    pub fn norm_star(&self, x: usize) -> f64 {
        self.norm[x] + 1.0
    }

    pub fn shift(&self, x: usize, axis: usize) -> usize {
        self.plus[x * self.d + axis]
    }

    pub fn shift_back(&self, x: usize, axis: usize) -> usize {
        self.minus[x * self.d + axis]
    }

    pub fn edge(&self, tail: usize, axis: usize) -> usize {
        tail * self.d + axis
    }

    pub fn tail(&self, e: usize) -> usize {
        e / self.d
    }

    pub fn head(&self, e: usize) -> usize {
        self.plus[e]
    }

    pub fn axis(&self, e: usize) -> usize {
        e % self.d
    }

    /// Edges whose head is `x` (one per axis).
    pub fn incoming(&self, x: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.d).map(move |i| self.minus[x * self.d + i] * self.d + i)
    }

    /// Edges whose tail is `x` (one per axis).
    pub fn outgoing(&self, x: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.d).map(move |i| x * self.d + i)
    }

    /// The 4d-1 edges sharing at least one endpoint with `e`, `e` included.
    pub fn closure(&self, e: usize) -> &[usize] {
        let w = 4 * self.d - 1;
        &self.closure[e * w..(e + 1) * w]
    }

    /// Vertices of the box `{-r, ..., r}^d` seen through the canonical projection.
    pub fn box_vertices(&self, r: usize) -> Vec<usize> {
        let r = r.min(self.l) as i64;
        (0..self.vertex_count)
            .filter(|&x| self.coords(x).iter().all(|c| c.abs() <= r))
            .collect()
    }

    /// Edges with both endpoints in the box of radius `r`.
    pub fn box_edges(&self, r: usize) -> Vec<usize> {
        let inside = self.box_mask(r);
        (0..self.edge_count)
            .filter(|&e| inside[self.tail(e)] && inside[self.head(e)])
            .collect()
    }

    fn box_mask(&self, r: usize) -> Vec<bool> {
        let r = r.min(self.l) as i64;
        (0..self.vertex_count)
            .map(|x| self.coords(x).iter().all(|c| c.abs() <= r))
            .collect()
    }

    /// Vertex at the origin.
    pub fn origin(&self) -> usize {
        0
    }
}

/// Height function on the vertices of a torus.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeField {
    pub values: Vec<f64>,
}

impl LatticeField {
    pub fn zeros(torus: &Torus) -> Self {
        LatticeField {
            values: vec![0.0; torus.vertex_count()],
        }
    }

    pub fn from_values(torus: &Torus, values: Vec<f64>) -> Result<Self> {
        if values.len() != torus.vertex_count() {
            return Err(Error::invalid(
                "field",
                format!(
                    "expected {} values, got {}",
                    torus.vertex_count(),
                    values.len()
                ),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("field", "non-finite value"));
        }
        Ok(LatticeField { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        crate::stats::pairwise_sum(&self.values) / self.values.len() as f64
    }

    /// Subtract the spatial mean. Gradients are unchanged.
    pub fn project_mean_zero(&mut self) {
        let m = self.mean();
        for v in &mut self.values {
            *v -= m;
        }
    }

    pub fn is_mean_zero(&self) -> bool {
        crate::stats::pairwise_sum(&self.values).abs() <= 1e-10 * self.values.len() as f64
    }
}

/// Real function on positively oriented edges.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeField {
    pub values: Vec<f64>,
}

impl EdgeField {
    pub fn constant(torus: &Torus, c: f64) -> Self {
        EdgeField {
            values: vec![c; torus.edge_count()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[inline]
pub fn gradient(torus: &Torus, f: &[f64], e: usize) -> f64 {
    f[torus.head(e)] - f[torus.tail(e)]
}

/// All edge gradients of `f` written into `out`.
pub fn gradient_field(torus: &Torus, f: &[f64], out: &mut [f64]) {
    let d = torus.d();
    for x in 0..torus.vertex_count() {
        let fx = f[x];
        for i in 0..d {
            out[x * d + i] = f[torus.plus[x * d + i]] - fx;
        }
    }
}

/// `(∇·V'(∇f))(x)`: outgoing fluxes minus incoming ones.
pub fn nonlinear_divergence(torus: &Torus, f: &[f64], v: &PotentialSpec, x: usize) -> f64 {
    let mut acc = 0.0;
    for e in torus.outgoing(x) {
        acc += v.first(gradient(torus, f, e));
    }
    for e in torus.incoming(x) {
        acc -= v.first(gradient(torus, f, e));
    }
    acc
}

/// `(∇·a∇u)(x)` for a nonnegative edge field `a`.
pub fn dynamic_divergence(torus: &Torus, u: &[f64], a: &[f64], x: usize) -> f64 {
    let mut acc = 0.0;
    for e in torus.outgoing(x) {
        acc += a[e] * gradient(torus, u, e);
    }
    for e in torus.incoming(x) {
        acc -= a[e] * gradient(torus, u, e);
    }
    acc
}

/// Add `scale * ∇·(flux)` to `out`, where `flux` is an edge field.
pub fn accumulate_divergence(torus: &Torus, flux: &[f64], scale: f64, out: &mut [f64]) {
    for (e, &q) in flux.iter().enumerate() {
        let s = scale * q;
        out[torus.tail(e)] += s;
        out[torus.head(e)] -= s;
    }
}

/// Region over which an ℓ^p norm is taken.
#[derive(Debug, Clone, Copy)]
pub enum Region {
    Torus,
    /// Box `{-r, ..., r}^d` around the origin.
    Box(usize),
}

/// Exponent of an ℓ^p norm; `Inf` is the supremum norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Exponent {
    Finite(f64),
    Inf,
}

/// Which kind of object a norm is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Support {
    Vertices,
    Edges,
}

/// Plain or normalized ℓ^p norm of `f` restricted to `region`.
///
/// Normalization divides the p-th power sum by the number of vertices of the
/// region in both cases, so edge norms follow the same convention as vertex
/// norms. An empty region is an error; a region with no edges has norm 0.
pub fn lp_norm(
    torus: &Torus,
    f: &[f64],
    support: Support,
    p: Exponent,
    region: Region,
    normalized: bool,
) -> Result<f64> {
    let vertices = match region {
        Region::Torus => torus.vertex_count(),
        Region::Box(r) => (2 * r.min(torus.l()) + 1).pow(torus.d() as u32),
    };
    if vertices == 0 {
        return Err(Error::invalid("region", "empty region"));
    }
    let items: Vec<usize> = match (support, region) {
        (Support::Vertices, Region::Torus) => (0..torus.vertex_count()).collect(),
        (Support::Edges, Region::Torus) => (0..torus.edge_count()).collect(),
        (Support::Vertices, Region::Box(r)) => torus.box_vertices(r),
        (Support::Edges, Region::Box(r)) => torus.box_edges(r),
    };
    Ok(norm_over(
        f,
        &items,
        p,
        if normalized { vertices as f64 } else { 1.0 },
    ))
}

/// ℓ^p norm over the index set `items`, with the p-th power sum divided by `weight`.
pub fn norm_over(f: &[f64], items: &[usize], p: Exponent, weight: f64) -> f64 {
    match p {
        Exponent::Inf => items.iter().map(|&i| f[i].abs()).fold(0.0, f64::max),
        Exponent::Finite(p) => {
            let terms: Vec<f64> = items.iter().map(|&i| f[i].abs().powf(p)).collect();
            (crate::stats::pairwise_sum(&terms) / weight).powf(1.0 / p)
        }
    }
}
