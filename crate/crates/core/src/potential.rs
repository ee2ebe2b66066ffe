//! Convex interaction potentials V with their first two derivatives.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Serializable description of a potential, as it appears in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialConfig {
    /// V(x) = x²/2.
    Gaussian,
    /// V(x) = scale·|x|^r; `scale` defaults to 1/r.
    Power { r: f64, scale: Option<f64> },
    /// V(x) = ((|x|-b)_+)^4 + asymmetry·((x-b)_+)^4.
    FlatBottom {
        b: f64,
        #[serde(default)]
        asymmetry: f64,
    },
    /// Natural cubic spline through a two-column (x, V) text file.
    UserTable { path: String, r: Option<f64> },
}

#[derive(Debug, Clone, PartialEq)]
enum Family {
    Gaussian,
    Power { r: f64, scale: f64 },
    FlatBottom { b: f64, asymmetry: f64 },
    Table(Spline),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialSpec {
    family: Family,
    r: Option<f64>,
    r_v: Option<f64>,
    tag: String,
}

/// Default half-width of the window used to certify R_V.
pub const DEFAULT_SEARCH_BOUND: f64 = 1000.0;

impl PotentialSpec {
    pub fn gaussian() -> Self {
        Self::finish(Family::Gaussian, None, "gaussian".into())
    }

    pub fn power(r: f64, scale: f64) -> Result<Self> {
        if !(r >= 2.0) || !r.is_finite() {
            return Err(Error::invalid(
                "potential.r",
                "power exponent must be finite and >= 2",
            ));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::invalid("potential.scale", "scale must be positive"));
        }
        Ok(Self::finish(
            Family::Power { r, scale },
            Some(r),
            format!("power(r={r},scale={scale})"),
        ))
    }

    pub fn flat_bottom(b: f64, asymmetry: f64) -> Result<Self> {
        if !(b >= 0.0) || !b.is_finite() {
            return Err(Error::invalid(
                "potential.b",
                "flat half-width must be finite and >= 0",
            ));
        }
        if !(asymmetry >= 0.0) || !asymmetry.is_finite() {
            return Err(Error::invalid(
                "potential.asymmetry",
                "asymmetry must be finite and >= 0",
            ));
        }
        let tag = if asymmetry == 0.0 {
            format!("flat_bottom(b={b})")
        } else {
            format!("flat_bottom(b={b},asymmetry={asymmetry})")
        };
        Ok(Self::finish(
            Family::FlatBottom { b, asymmetry },
            Some(4.0),
            tag,
        ))
    }

    /// Spline through the points `(xs[i], vs[i])`; `xs` must be strictly increasing.
    pub fn table(xs: Vec<f64>, vs: Vec<f64>, r: Option<f64>, name: &str) -> Result<Self> {
        let spline = Spline::natural(xs, vs)?;
        Ok(Self::finish(
            Family::Table(spline),
            r,
            format!("user_table({name})"),
        ))
    }

    pub fn from_table_file(path: &Path, r: Option<f64>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut xs = Vec::new();
        let mut vs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .collect();
            if cols.len() != 2 {
                return Err(Error::invalid(
                    "potential.path",
                    format!("line {}: expected two columns", lineno + 1),
                ));
            }
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|_| {
                    Error::invalid(
                        "potential.path",
                        format!("line {}: bad number {s:?}", lineno + 1),
                    )
                })
            };
            xs.push(parse(cols[0])?);
            vs.push(parse(cols[1])?);
        }
        let name = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::table(xs, vs, r, &name)
    }

    pub fn from_config(cfg: &PotentialConfig, base_dir: &Path) -> Result<Self> {
        match cfg {
            PotentialConfig::Gaussian => Ok(Self::gaussian()),
            PotentialConfig::Power { r, scale } => Self::power(*r, scale.unwrap_or(1.0 / r)),
            PotentialConfig::FlatBottom { b, asymmetry } => Self::flat_bottom(*b, *asymmetry),
            PotentialConfig::UserTable { path, r } => {
                Self::from_table_file(&base_dir.join(path), *r)
            }
        }
    }

    fn finish(family: Family, r: Option<f64>, tag: String) -> Self {
        let mut spec = PotentialSpec {
            family,
            r,
            r_v: None,
            tag,
        };
        spec.r_v = spec.compute_r_v(DEFAULT_SEARCH_BOUND).ok();
        spec
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    /// Growth exponent; `None` for the quadratic case and for tables without one.
    pub fn growth_exponent(&self) -> Option<f64> {
        self.r
    }

    /// R_V, if it could be certified on the default window.
    pub fn r_v(&self) -> Option<f64> {
        self.r_v
    }

    /// `Some(c)` when `V'' ≡ c`, so the environment is deterministic.
    pub fn constant_curvature(&self) -> Option<f64> {
        match &self.family {
            Family::Gaussian => Some(1.0),
            _ => None,
        }
    }

    pub fn is_symmetric(&self) -> bool {
        match &self.family {
            Family::FlatBottom { asymmetry, .. } => *asymmetry == 0.0,
            Family::Table(s) => s.is_symmetric(),
            _ => true,
        }
    }

    /// `(V(x), V'(x), V''(x))`.
    pub fn evaluate(&self, x: f64) -> (f64, f64, f64) {
        match &self.family {
            Family::Gaussian => (0.5 * x * x, x, 1.0),
            Family::Power { r, scale } => {
                let ax = x.abs();
                if *r == 4.0 {
                    let x2 = x * x;
                    (scale * x2 * x2, 4.0 * scale * x2 * x, 12.0 * scale * x2)
                } else {
                    let pr2 = ax.powf(r - 2.0);
                    (
                        scale * pr2 * ax * ax,
                        scale * r * pr2 * x,
                        scale * r * (r - 1.0) * pr2,
                    )
                }
            }
            Family::FlatBottom { b, asymmetry } => {
                let mut out = quartic_hinge(x.abs() - b);
                out.1 *= x.signum();
                if *asymmetry > 0.0 {
                    let extra = quartic_hinge(x - b);
                    out.0 += asymmetry * extra.0;
                    out.1 += asymmetry * extra.1;
                    out.2 += asymmetry * extra.2;
                }
                out
            }
            Family::Table(s) => s.eval(x),
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        self.evaluate(x).0
    }

    #[inline]
    pub fn first(&self, x: f64) -> f64 {
        match &self.family {
            Family::Gaussian => x,
            Family::Power { r, scale } if *r == 4.0 => 4.0 * scale * x * x * x,
            Family::FlatBottom { b, asymmetry } if *asymmetry == 0.0 => {
                let h = x.abs() - b;
                if h > 0.0 {
                    4.0 * h * h * h * x.signum()
                } else {
                    0.0
                }
            }
            _ => self.evaluate(x).1,
        }
    }

    #[inline]
    pub fn second(&self, x: f64) -> f64 {
        match &self.family {
            Family::Gaussian => 1.0,
            Family::Power { r, scale } if *r == 4.0 => 12.0 * scale * x * x,
            Family::FlatBottom { b, asymmetry } if *asymmetry == 0.0 => {
                let h = x.abs() - b;
                if h > 0.0 {
                    12.0 * h * h
                } else {
                    0.0
                }
            }
            _ => self.evaluate(x).2,
        }
    }

    /// `R_V = 2·inf{R ≥ 1 : inf_{|x|≥R} V''(x) ≥ 1}` located by bisection.
    ///
    /// The infimum over `|x| ≥ R` is taken over a probe grid on `[R, bound]`
    /// (both signs) together with the exact points `±R` and `±bound`. Beyond
    /// `bound`, built-in families have nondecreasing V'' and tables continue
    /// with the constant curvature of their last node.
    pub fn compute_r_v(&self, search_bound: f64) -> Result<f64> {
        let probes = 20_000;
        let grid: Vec<f64> = (0..=probes)
            .map(|i| search_bound * i as f64 / probes as f64)
            .collect();
        let tail_min = |r: f64| -> f64 {
            let mut m = self.second(r).min(self.second(-r));
            m = m
                .min(self.second(search_bound))
                .min(self.second(-search_bound));
            for &x in grid.iter().filter(|&&x| x >= r) {
                m = m.min(self.second(x)).min(self.second(-x));
            }
            m
        };
        if tail_min(1.0) >= 1.0 {
            return Ok(2.0);
        }
        if tail_min(search_bound) < 1.0 {
            return Err(Error::GrowthNotCertified {
                bound: search_bound,
            });
        }
        let (mut lo, mut hi) = (1.0, search_bound);
        while hi - lo > 1e-10 {
            let mid = 0.5 * (lo + hi);
            if tail_min(mid) >= 1.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(2.0 * hi)
    }

    /// Check the convexity and growth conditions on a finite window.
    pub fn validate_assumption(&self, probe: &ProbeGrid) -> AssumptionReport {
        let x_max = probe
            .x_max
            .unwrap_or_else(|| 20f64.max(10.0 * self.r_v.unwrap_or(2.0)));
        let n = probe.points.max(16);
        let xs: Vec<f64> = (0..=n)
            .map(|i| -x_max + 2.0 * x_max * i as f64 / n as f64)
            .collect();
        let second: Vec<f64> = xs.iter().map(|&x| self.second(x)).collect();
        let scale = second.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let min_second = second.iter().cloned().fold(f64::INFINITY, f64::min);
        let convex = min_second >= -1e-12 * scale;

        // an isolated jump much larger than both neighbouring increments
        let jumps: Vec<f64> = second.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        let mut continuous = true;
        for i in 1..jumps.len().saturating_sub(1) {
            let local = jumps[i - 1].max(jumps[i + 1]);
            if jumps[i] > 10.0 * local + 1e-6 * scale {
                continuous = false;
            }
        }

        let outer: Vec<usize> = (0..xs.len())
            .filter(|&i| xs[i].abs() >= 0.5 * x_max)
            .collect();
        let r = self.r.or_else(|| {
            let lx: Vec<f64> = outer
                .iter()
                .filter(|&&i| second[i] > 0.0)
                .map(|&i| xs[i].abs().ln())
                .collect();
            let ly: Vec<f64> = outer
                .iter()
                .filter(|&&i| second[i] > 0.0)
                .map(|&i| second[i].ln())
                .collect();
            (lx.len() > 2).then(|| crate::stats::linear_fit(&lx, &ly).slope + 2.0)
        });
        let (c_minus, c_plus) = match r {
            Some(r) => outer.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &i| {
                let c = second[i] / xs[i].abs().powf(r - 2.0);
                (lo.min(c), hi.max(c))
            }),
            None => (f64::NAN, f64::NAN),
        };
        let special = matches!(self.family, Family::Gaussian)
            .then(|| "gaussian-special: r=2 excluded by the growth condition, supported only for the exact oracle".to_string());
        let growth = match r {
            Some(r) => r > 2.0 && c_minus > 0.0 && c_plus.is_finite(),
            None => false,
        } && special.is_none();
        AssumptionReport {
            window: x_max,
            convex,
            continuous_second_derivative: continuous,
            min_second_derivative: min_second,
            r,
            c_minus,
            c_plus,
            clause_i: convex && continuous,
            clause_ii: growth,
            special,
            r_v: self.r_v,
        }
    }
}

/// `(h_+^4, 4h_+^3, 12h_+^2)`.
#[inline]
fn quartic_hinge(h: f64) -> (f64, f64, f64) {
    if h > 0.0 {
        let h2 = h * h;
        (h2 * h2, 4.0 * h2 * h, 12.0 * h2)
    } else {
        (0.0, 0.0, 0.0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeGrid {
    pub points: usize,
    /// Window half-width; defaults to max(20, 10·R_V).
    pub x_max: Option<f64>,
}

impl Default for ProbeGrid {
    fn default() -> Self {
        ProbeGrid {
            points: 20_000,
            x_max: None,
        }
    }
}

/// Outcome of [`PotentialSpec::validate_assumption`]. Only the probed window
/// `[-window, window]` is certified.
#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    pub window: f64,
    pub convex: bool,
    pub continuous_second_derivative: bool,
    pub min_second_derivative: f64,
    pub r: Option<f64>,
    pub c_minus: f64,
    pub c_plus: f64,
    /// Twice continuously differentiable and convex.
    pub clause_i: bool,
    /// Power-law growth of V'' with exponent r > 2.
    pub clause_ii: bool,
    pub special: Option<String>,
    pub r_v: Option<f64>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.clause_i && self.clause_ii
    }
}

/// Natural cubic spline; outside the node range it continues as the
/// quadratic with matching value, slope and curvature at the end node.
#[derive(Debug, Clone, PartialEq)]
struct Spline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    m: Vec<f64>,
}

impl Spline {
    fn natural(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        let n = xs.len();
        if n < 3 || ys.len() != n {
            return Err(Error::invalid(
                "potential.path",
                "table needs at least 3 rows",
            ));
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) || xs.iter().chain(&ys).any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "potential.path",
                "x column must be finite and strictly increasing",
            ));
        }
        // tridiagonal system for interior second derivatives (Thomas algorithm)
        let mut m = vec![0.0; n];
        let mut c = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        for i in 1..n - 1 {
            let h0 = xs[i] - xs[i - 1];
            let h1 = xs[i + 1] - xs[i];
            let a = h0 / 6.0;
            let b = (h0 + h1) / 3.0;
            let cc = h1 / 6.0;
            let r = (ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0;
            let denom = b - a * c[i - 1];
            c[i] = cc / denom;
            rhs[i] = (r - a * rhs[i - 1]) / denom;
        }
        for i in (1..n - 1).rev() {
            m[i] = rhs[i] - c[i] * m[i + 1];
        }
        Ok(Spline { xs, ys, m })
    }

    fn is_symmetric(&self) -> bool {
        let n = self.xs.len();
        (0..n).all(|i| {
            let j = n - 1 - i;
            (self.xs[i] + self.xs[j]).abs() < 1e-12 && (self.ys[i] - self.ys[j]).abs() < 1e-12
        })
    }

    fn eval(&self, x: f64) -> (f64, f64, f64) {
        let n = self.xs.len();
        if x < self.xs[0] || x > self.xs[n - 1] {
            let end = if x < self.xs[0] { 0 } else { n - 1 };
            let (v, d1, d2) = self.eval(self.xs[end]);
            let h = x - self.xs[end];
            return (v + d1 * h + 0.5 * d2 * h * h, d1 + d2 * h, d2);
        }
        let i = match self.xs.binary_search_by(|p| p.partial_cmp(&x).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(i) => i - 1,
        };
        let h = self.xs[i + 1] - self.xs[i];
        let a = (self.xs[i + 1] - x) / h;
        let b = (x - self.xs[i]) / h;
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        let v = a * self.ys[i]
            + b * self.ys[i + 1]
            + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0;
        let d1 = (self.ys[i + 1] - self.ys[i]) / h - (3.0 * a * a - 1.0) * h * m0 / 6.0
            + (3.0 * b * b - 1.0) * h * m1 / 6.0;
        let d2 = a * m0 + b * m1;
        (v, d1, d2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_values() {
        assert_eq!(PotentialSpec::gaussian().evaluate(2.0), (2.0, 2.0, 1.0));
        assert_eq!(
            PotentialSpec::power(4.0, 0.25).unwrap().evaluate(1.0),
            (0.25, 1.0, 3.0)
        );
        assert_eq!(
            PotentialSpec::flat_bottom(1.0, 0.0).unwrap().evaluate(0.5),
            (0.0, 0.0, 0.0)
        );
        let (v, d1, d2) = PotentialSpec::power(3.0, 1.0).unwrap().evaluate(-2.0);
        assert!((v - 8.0).abs() < 1e-12 && (d1 + 12.0).abs() < 1e-12 && (d2 - 12.0).abs() < 1e-12);
    }

    #[test]
    fn r_v_examples() {
        let q = PotentialSpec::power(4.0, 0.25).unwrap();
        assert_eq!(q.compute_r_v(100.0).unwrap(), 2.0);
        assert_eq!(PotentialSpec::gaussian().compute_r_v(100.0).unwrap(), 2.0);
        let fb = PotentialSpec::flat_bottom(1.0, 0.0).unwrap();
        let expected = 2.0 * (1.0 + 12f64.powf(-0.5));
        assert!((fb.compute_r_v(100.0).unwrap() - expected).abs() < 1e-8);
        assert!((fb.r_v().unwrap() - 2.5774).abs() < 1e-4);
    }

    #[test]
    fn r_v_refused_without_growth() {
        let xs: Vec<f64> = (-20..=20).map(|i| i as f64).collect();
        let vs: Vec<f64> = xs.iter().map(|x: &f64| x.abs()).collect();
        let abs = PotentialSpec::table(xs, vs, None, "abs").unwrap();
        assert!(matches!(
            abs.compute_r_v(50.0),
            Err(Error::GrowthNotCertified { .. })
        ));
    }

    #[test]
    fn validation_examples() {
        let rep = PotentialSpec::power(4.0, 0.25)
            .unwrap()
            .validate_assumption(&ProbeGrid::default());
        assert!(rep.passed());
        assert_eq!(rep.r, Some(4.0));
        assert!((rep.c_minus - 3.0).abs() < 1e-9 && (rep.c_plus - 3.0).abs() < 1e-9);

        let rep = PotentialSpec::gaussian().validate_assumption(&ProbeGrid::default());
        assert!(rep.clause_i && !rep.clause_ii);
        assert!(rep
            .special
            .as_deref()
            .unwrap()
            .starts_with("gaussian-special"));

        let xs: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.5).collect();
        let vs: Vec<f64> = xs.iter().map(|x: &f64| x.abs()).collect();
        let rep = PotentialSpec::table(xs, vs, None, "abs")
            .unwrap()
            .validate_assumption(&ProbeGrid::default());
        assert!(!rep.clause_i);
    }

    #[test]
    fn flat_bottom_is_c2_at_the_edge() {
        let v = PotentialSpec::flat_bottom(1.0, 0.0).unwrap();
        for side in [1.0, -1.0] {
            let inner = v.second(side * (1.0 - 1e-9));
            let outer = v.second(side * (1.0 + 1e-9));
            assert!((inner - outer).abs() < 1e-8);
        }
    }

    #[test]
    fn spline_reproduces_quadratic_interior() {
        // a natural spline is exact for linear data and close for smooth data
        let xs: Vec<f64> = (0..=200).map(|i| -5.0 + i as f64 * 0.05).collect();
        let vs: Vec<f64> = xs.iter().map(|x| x * x * x * x / 4.0).collect();
        let s = PotentialSpec::table(xs, vs, Some(4.0), "quartic").unwrap();
        let (v, d1, d2) = s.evaluate(1.3);
        assert!((v - 1.3f64.powi(4) / 4.0).abs() < 1e-4);
        assert!((d1 - 1.3f64.powi(3)).abs() < 1e-3);
        assert!((d2 - 3.0 * 1.69).abs() < 1e-2);
        assert!(s.is_symmetric());
    }

    #[test]
    fn asymmetric_flat_bottom() {
        let v = PotentialSpec::flat_bottom(1.0, 0.5).unwrap();
        assert!(!v.is_symmetric());
        assert!(v.value(2.0) > v.value(-2.0));
        // the left branch is untouched, so the certified radius does not move
        let sym = PotentialSpec::flat_bottom(1.0, 0.0).unwrap();
        assert!((v.r_v().unwrap() - sym.r_v().unwrap()).abs() < 1e-8);
    }
}
