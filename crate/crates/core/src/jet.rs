//! Truncated multivariate Taylor arithmetic ("jets").
//!
//! A [`Jet`] stores the Taylor-normalized mixed partials of a scalar function
//! at a point: the coefficient stored for a multi-index α is ∂^α f / α!.
//! Keeping the factorial inside the coefficient makes multiplication a plain
//! truncated convolution; [`Jet::partial`] multiplies the factorial back in.
//!
//! Coefficients are enumerated in graded lexicographic order: all multi-indices
//! of total degree 0, then degree 1, and so on; within a degree the index with
//! the larger exponent on an earlier variable comes first. The enumeration for
//! order p is a prefix of the enumeration for order p+1, so jets of different
//! truncation orders share coefficient layouts and binary operations simply
//! truncate to the smaller order.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};
use thiserror::Error;

pub const MAX_DIM: usize = 8;
pub const MAX_ORDER: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JetError {
    #[error("variable index {index} out of range for dimension {dim}")]
    VarOutOfRange { index: usize, dim: usize },
    #[error("multi-index of degree {degree} exceeds truncation order {order}")]
    OrderExceeded { degree: usize, order: usize },
    #[error("multi-index has {got} entries, context has {dim} variables")]
    DimMismatch { got: usize, dim: usize },
    #[error("constant term is zero: jet is not invertible")]
    SingularConstantTerm,
    #[error("domain error in {func}: constant term {value} is out of range")]
    Domain { func: &'static str, value: f64 },
}

/// Ambient data of a jet: number of variables and truncation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct JetCtx {
    pub dim: usize,
    pub order: usize,
}

impl JetCtx {
    pub fn new(dim: usize, order: usize) -> Self {
        assert!(dim >= 1 && dim <= MAX_DIM, "dim {dim} outside 1..={MAX_DIM}");
        assert!(order <= MAX_ORDER, "order {order} exceeds {MAX_ORDER}");
        JetCtx { dim, order }
    }

    /// Number of stored coefficients: C(dim + order, order).
    pub fn len(&self) -> usize {
        tables(self.dim, self.order).mindex.len()
    }

    pub fn lower(&self, by: usize) -> JetCtx {
        JetCtx { dim: self.dim, order: self.order.saturating_sub(by) }
    }
}

/// Exponent vector of one mixed partial, e.g. (1, 0, 2) for ∂x ∂z².
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MultiIndex(pub Vec<u8>);

impl MultiIndex {
    pub fn degree(&self) -> usize {
        self.0.iter().map(|&e| e as usize).sum()
    }

    pub fn factorial(&self) -> f64 {
        self.0
            .iter()
            .map(|&e| (1..=e as u64).product::<u64>() as f64)
            .product()
    }
}

struct CtxTables {
    /// Graded-lex enumeration of all multi-indices with degree ≤ order.
    mindex: Vec<Vec<u8>>,
    index_of: HashMap<Vec<u8>, usize>,
    /// For each output slot k, the (i, j) pairs with α_i + α_j = α_k.
    mul_pairs: Vec<Vec<(u32, u32)>>,
    /// deriv[v][k] = (source slot of α_k + e_v, multiplier α_v + 1), if within order.
    deriv: Vec<Vec<Option<(u32, f64)>>>,
    degree: Vec<u8>,
}

fn enumerate_graded(dim: usize, order: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    for deg in 0..=order {
        let mut idx = vec![0u8; dim];
        // lexicographic within fixed degree, larger exponent on earlier variable first
        fn rec(slot: usize, remaining: u8, idx: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
            if slot == idx.len() - 1 {
                idx[slot] = remaining;
                out.push(idx.clone());
                return;
            }
            for e in (0..=remaining).rev() {
                idx[slot] = e;
                rec(slot + 1, remaining - e, idx, out);
            }
            idx[slot] = 0;
        }
        rec(0, deg as u8, &mut idx, &mut out);
    }
    out
}

fn build_tables(dim: usize, order: usize) -> CtxTables {
    let mindex = enumerate_graded(dim, order);
    let index_of: HashMap<Vec<u8>, usize> =
        mindex.iter().enumerate().map(|(i, m)| (m.clone(), i)).collect();
    let degree: Vec<u8> = mindex.iter().map(|m| m.iter().sum()).collect();
    let n = mindex.len();
    let mut mul_pairs = vec![Vec::new(); n];
    for i in 0..n {
        'next: for j in 0..n {
            let mut sum = vec![0u8; dim];
            let mut deg = 0usize;
            for v in 0..dim {
                sum[v] = mindex[i][v] + mindex[j][v];
                deg += sum[v] as usize;
                if deg > order {
                    continue 'next;
                }
            }
            let k = index_of[&sum];
            mul_pairs[k].push((i as u32, j as u32));
        }
    }
    let mut deriv = vec![vec![None; n]; dim];
    for v in 0..dim {
        for k in 0..n {
            let mut shifted = mindex[k].clone();
            shifted[v] += 1;
            if let Some(&src) = index_of.get(&shifted) {
                deriv[v][k] = Some((src as u32, (mindex[k][v] + 1) as f64));
            }
        }
    }
    CtxTables { mindex, index_of, mul_pairs, deriv, degree }
}

fn tables(dim: usize, order: usize) -> &'static CtxTables {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), &'static CtxTables>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    guard
        .entry((dim, order))
        .or_insert_with(|| Box::leak(Box::new(build_tables(dim, order))))
}

/// Truncated Taylor expansion of a scalar quantity at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    ctx: JetCtx,
    coeffs: Vec<f64>,
}

impl Jet {
    pub fn ctx(&self) -> JetCtx {
        self.ctx
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn zero(ctx: JetCtx) -> Jet {
        Jet { ctx, coeffs: vec![0.0; ctx.len()] }
    }

    pub fn constant(ctx: JetCtx, v: f64) -> Jet {
        let mut j = Jet::zero(ctx);
        j.coeffs[0] = v;
        j
    }

    /// The jet of the coordinate function x_i at the point where x_i = value.
    pub fn lift_var(ctx: JetCtx, i: usize, value: f64) -> Result<Jet, JetError> {
        if i >= ctx.dim {
            return Err(JetError::VarOutOfRange { index: i, dim: ctx.dim });
        }
        let mut j = Jet::constant(ctx, value);
        if ctx.order >= 1 {
            // slot of the unit multi-index e_i in graded-lex order: degree-1 block
            // lists variables in order, so e_i sits at offset 1 + i
            j.coeffs[1 + i] = 1.0;
        }
        Ok(j)
    }

    pub fn value(&self) -> f64 {
        self.coeffs[0]
    }

    /// The mixed partial derivative value ∂^m f (coefficient times m!).
    pub fn partial(&self, m: &MultiIndex) -> Result<f64, JetError> {
        if m.0.len() != self.ctx.dim {
            return Err(JetError::DimMismatch { got: m.0.len(), dim: self.ctx.dim });
        }
        let deg = m.degree();
        if deg > self.ctx.order {
            return Err(JetError::OrderExceeded { degree: deg, order: self.ctx.order });
        }
        let t = tables(self.ctx.dim, self.ctx.order);
        let k = t.index_of[&m.0];
        Ok(self.coeffs[k] * m.factorial())
    }

    /// Jet of ∂_v f, truncated one order lower.
    pub fn deriv(&self, v: usize) -> Jet {
        assert!(v < self.ctx.dim, "derivative variable out of range");
        let out_ctx = self.ctx.lower(1);
        let t = tables(self.ctx.dim, self.ctx.order);
        let mut out = Jet::zero(out_ctx);
        for k in 0..out.coeffs.len() {
            if let Some((src, mult)) = t.deriv[v][k] {
                out.coeffs[k] = self.coeffs[src as usize] * mult;
            }
        }
        out
    }

    /// Copy truncated to a (lower or equal) order.
    pub fn truncated(&self, order: usize) -> Jet {
        assert!(order <= self.ctx.order);
        let ctx = JetCtx::new(self.ctx.dim, order);
        Jet { ctx, coeffs: self.coeffs[..ctx.len()].to_vec() }
    }

    fn common_ctx(&self, other: &Jet) -> JetCtx {
        assert_eq!(self.ctx.dim, other.ctx.dim, "jet dimension mismatch");
        JetCtx { dim: self.ctx.dim, order: self.ctx.order.min(other.ctx.order) }
    }

    pub fn add(&self, other: &Jet) -> Jet {
        let ctx = self.common_ctx(other);
        let n = ctx.len();
        let mut coeffs = Vec::with_capacity(n);
        for k in 0..n {
            coeffs.push(self.coeffs[k] + other.coeffs[k]);
        }
        Jet { ctx, coeffs }
    }

    pub fn sub(&self, other: &Jet) -> Jet {
        let ctx = self.common_ctx(other);
        let n = ctx.len();
        let mut coeffs = Vec::with_capacity(n);
        for k in 0..n {
            coeffs.push(self.coeffs[k] - other.coeffs[k]);
        }
        Jet { ctx, coeffs }
    }

    pub fn neg(&self) -> Jet {
        Jet { ctx: self.ctx, coeffs: self.coeffs.iter().map(|c| -c).collect() }
    }

    pub fn scale(&self, s: f64) -> Jet {
        Jet { ctx: self.ctx, coeffs: self.coeffs.iter().map(|c| c * s).collect() }
    }

    pub fn add_scalar(&self, s: f64) -> Jet {
        let mut out = self.clone();
        out.coeffs[0] += s;
        out
    }

    /// Truncated Cauchy product.
    pub fn mul(&self, other: &Jet) -> Jet {
        let ctx = self.common_ctx(other);
        let t = tables(ctx.dim, ctx.order);
        let n = ctx.len();
        let mut coeffs = vec![0.0; n];
        for k in 0..n {
            let mut acc = 0.0;
            for &(i, j) in &t.mul_pairs[k] {
                acc += self.coeffs[i as usize] * other.coeffs[j as usize];
            }
            coeffs[k] = acc;
        }
        Jet { ctx, coeffs }
    }

    /// Multiplicative inverse; requires a nonzero constant term.
    pub fn inv(&self) -> Result<Jet, JetError> {
        let a0 = self.coeffs[0];
        if a0 == 0.0 || !a0.is_finite() {
            return Err(JetError::SingularConstantTerm);
        }
        let t = tables(self.ctx.dim, self.ctx.order);
        let n = self.ctx.len();
        let mut r = vec![0.0; n];
        r[0] = 1.0 / a0;
        // graded recurrence: a0 r_k = -sum_{i != 0} a_i r_j over pairs (i,j) -> k
        for k in 1..n {
            let mut acc = 0.0;
            for &(i, j) in &t.mul_pairs[k] {
                if i != 0 {
                    acc += self.coeffs[i as usize] * r[j as usize];
                }
            }
            r[k] = -acc / a0;
        }
        Ok(Jet { ctx: self.ctx, coeffs: r })
    }

    pub fn div(&self, other: &Jet) -> Result<Jet, JetError> {
        Ok(self.mul(&other.inv()?))
    }

    /// Compose a univariate Taylor series around the constant term: given the
    /// series coefficients c_k = f^(k)(a0)/k!, returns f(self) truncated.
    fn compose_series(&self, series: &[f64]) -> Jet {
        let mut delta = self.clone();
        delta.coeffs[0] = 0.0;
        let mut res = Jet::constant(self.ctx, series[series.len() - 1]);
        for k in (0..series.len() - 1).rev() {
            res = res.mul(&delta).add_scalar(series[k]);
        }
        res
    }

    pub fn exp(&self) -> Jet {
        let a0 = self.coeffs[0];
        let e = a0.exp();
        let n = self.ctx.order + 1;
        let mut series = vec![0.0; n];
        let mut fact = 1.0;
        for (k, item) in series.iter_mut().enumerate() {
            if k > 0 {
                fact *= k as f64;
            }
            *item = e / fact;
        }
        self.compose_series(&series)
    }

    pub fn ln(&self) -> Result<Jet, JetError> {
        let a0 = self.coeffs[0];
        if a0 <= 0.0 {
            return Err(JetError::Domain { func: "log", value: a0 });
        }
        let n = self.ctx.order + 1;
        let mut series = vec![0.0; n];
        series[0] = a0.ln();
        // d^k/dx^k ln = (-1)^{k-1} (k-1)! / x^k, over k!
        let mut sign = 1.0;
        for (k, item) in series.iter_mut().enumerate().skip(1) {
            *item = sign / (k as f64 * a0.powi(k as i32));
            sign = -sign;
        }
        Ok(self.compose_series(&series))
    }

    pub fn sqrt(&self) -> Result<Jet, JetError> {
        let a0 = self.coeffs[0];
        if a0 <= 0.0 {
            return Err(JetError::Domain { func: "sqrt", value: a0 });
        }
        let n = self.ctx.order + 1;
        let mut series = vec![0.0; n];
        let root = a0.sqrt();
        series[0] = root;
        // binomial series for (a0 + d)^{1/2}
        let mut coeff = root;
        for (k, item) in series.iter_mut().enumerate().skip(1) {
            coeff *= (0.5 - (k as f64 - 1.0)) / (k as f64 * a0);
            *item = coeff;
        }
        Ok(self.compose_series(&series))
    }

    pub fn sin(&self) -> Jet {
        let a0 = self.coeffs[0];
        let (s, c) = a0.sin_cos();
        let cycle = [s, c, -s, -c];
        let n = self.ctx.order + 1;
        let mut series = vec![0.0; n];
        let mut fact = 1.0;
        for (k, item) in series.iter_mut().enumerate() {
            if k > 0 {
                fact *= k as f64;
            }
            *item = cycle[k % 4] / fact;
        }
        self.compose_series(&series)
    }

    pub fn cos(&self) -> Jet {
        let a0 = self.coeffs[0];
        let (s, c) = a0.sin_cos();
        let cycle = [c, -s, -c, s];
        let n = self.ctx.order + 1;
        let mut series = vec![0.0; n];
        let mut fact = 1.0;
        for (k, item) in series.iter_mut().enumerate() {
            if k > 0 {
                fact *= k as f64;
            }
            *item = cycle[k % 4] / fact;
        }
        self.compose_series(&series)
    }

    /// Integer power by repeated squaring.
    pub fn powi(&self, mut p: i64) -> Result<Jet, JetError> {
        if p < 0 {
            return self.inv()?.powi(-p);
        }
        let mut base = self.clone();
        let mut acc = Jet::constant(self.ctx, 1.0);
        while p > 0 {
            if p & 1 == 1 {
                acc = acc.mul(&base);
            }
            base = base.mul(&base);
            p >>= 1;
        }
        Ok(acc)
    }

    /// Real power through exp/log; requires a positive constant term.
    pub fn powf(&self, p: f64) -> Result<Jet, JetError> {
        if self.coeffs[0] <= 0.0 {
            return Err(JetError::Domain { func: "pow", value: self.coeffs[0] });
        }
        Ok(self.ln()?.scale(p).exp())
    }

    /// Largest |coefficient|, a cheap magnitude estimate across all partials.
    pub fn max_abs_coeff(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, c| m.max(c.abs()))
    }
}

/// Multi-indices of the context in storage order.
pub fn multi_indices(ctx: JetCtx) -> Vec<MultiIndex> {
    tables(ctx.dim, ctx.order)
        .mindex
        .iter()
        .map(|m| MultiIndex(m.clone()))
        .collect()
}

/// Degree of the k-th stored multi-index.
pub fn slot_degree(ctx: JetCtx, k: usize) -> usize {
    tables(ctx.dim, ctx.order).degree[k] as usize
}

/// Complex-valued jet as a pair of real jets. Operators with factors of i
/// produce these; the geometry underneath stays real.
#[derive(Debug, Clone)]
pub struct CJet {
    pub re: Jet,
    pub im: Jet,
}

impl CJet {
    pub fn from_re(re: Jet) -> CJet {
        let im = Jet::zero(re.ctx());
        CJet { re, im }
    }

    pub fn zero(ctx: JetCtx) -> CJet {
        CJet { re: Jet::zero(ctx), im: Jet::zero(ctx) }
    }

    pub fn add(&self, o: &CJet) -> CJet {
        CJet { re: self.re.add(&o.re), im: self.im.add(&o.im) }
    }

    pub fn sub(&self, o: &CJet) -> CJet {
        CJet { re: self.re.sub(&o.re), im: self.im.sub(&o.im) }
    }

    pub fn mul_jet(&self, j: &Jet) -> CJet {
        CJet { re: self.re.mul(j), im: self.im.mul(j) }
    }

    /// Multiply by the imaginary unit.
    pub fn mul_i(&self) -> CJet {
        CJet { re: self.im.neg(), im: self.re.clone() }
    }

    pub fn scale(&self, s: f64) -> CJet {
        CJet { re: self.re.scale(s), im: self.im.scale(s) }
    }

    pub fn deriv(&self, v: usize) -> CJet {
        CJet { re: self.re.deriv(v), im: self.im.deriv(v) }
    }

    pub fn value(&self) -> (f64, f64) {
        (self.re.value(), self.im.value())
    }

    pub fn value_abs(&self) -> f64 {
        let (re, im) = self.value();
        re.hypot(im)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(dim: usize, order: usize) -> JetCtx {
        JetCtx::new(dim, order)
    }

    #[test]
    fn lift_var_basic() {
        let j = Jet::lift_var(ctx(2, 2), 0, 2.0).unwrap();
        assert_eq!(j.value(), 2.0);
        assert_eq!(j.partial(&MultiIndex(vec![1, 0])).unwrap(), 1.0);
        assert_eq!(j.partial(&MultiIndex(vec![0, 1])).unwrap(), 0.0);
        assert_eq!(j.partial(&MultiIndex(vec![2, 0])).unwrap(), 0.0);

        let z = Jet::lift_var(ctx(2, 0), 1, 0.0).unwrap();
        assert_eq!(z.coeffs().len(), 1);
        assert_eq!(z.value(), 0.0);

        assert!(matches!(
            Jet::lift_var(ctx(2, 2), 2, 1.0),
            Err(JetError::VarOutOfRange { .. })
        ));
    }

    #[test]
    fn polynomial_products() {
        let c = ctx(1, 2);
        let x = Jet::lift_var(c, 0, 0.0).unwrap();
        let p = Jet::constant(c, 1.0).add(&x); // 1 + x
        let q = Jet::constant(c, 1.0).sub(&x); // 1 - x
        let pq = p.mul(&q);
        assert_eq!(pq.coeffs(), &[1.0, 0.0, -1.0]);

        let c2 = ctx(2, 2);
        let x = Jet::lift_var(c2, 0, 0.0).unwrap();
        let y = Jet::lift_var(c2, 1, 0.0).unwrap();
        let xy = x.mul(&y);
        assert_eq!(xy.partial(&MultiIndex(vec![1, 1])).unwrap(), 1.0);
        assert_eq!(xy.value(), 0.0);
    }

    #[test]
    fn mixed_partial_matches_finite_differences() {
        // d^2/dxdy of sin(x) exp(y) at (0.3, 0.1)
        let c = ctx(2, 2);
        let f = |x: f64, y: f64| x.sin() * y.exp();
        let jx = Jet::lift_var(c, 0, 0.3).unwrap();
        let jy = Jet::lift_var(c, 1, 0.1).unwrap();
        let jf = jx.sin().mul(&jy.exp());
        let got = jf.partial(&MultiIndex(vec![1, 1])).unwrap();
        let h = 1e-4;
        let fd = (f(0.3 + h, 0.1 + h) - f(0.3 + h, 0.1 - h) - f(0.3 - h, 0.1 + h)
            + f(0.3 - h, 0.1 - h))
            / (4.0 * h * h);
        assert!((got - fd).abs() / fd.abs() < 1e-6, "jet {got} vs fd {fd}");
    }

    #[test]
    fn inversion() {
        let c = ctx(1, 2);
        let x = Jet::lift_var(c, 0, 0.0).unwrap();
        let inv = Jet::constant(c, 1.0).add(&x).inv().unwrap();
        assert_eq!(inv.coeffs(), &[1.0, -1.0, 1.0]); // 1 - x + x^2

        let two = Jet::constant(c, 2.0);
        assert_eq!(two.inv().unwrap().coeffs(), &[0.5, 0.0, 0.0]);

        assert!(matches!(x.inv(), Err(JetError::SingularConstantTerm)));

        // self-consistency at higher order
        let c4 = ctx(3, 4);
        let mut a = Jet::constant(c4, 2.5);
        for v in 0..3 {
            a = a.add(&Jet::lift_var(c4, v, 0.3 + 0.1 * v as f64).unwrap().scale(0.7));
        }
        let prod = a.mul(&a.inv().unwrap());
        let mut one = prod.clone();
        one.coeffs().iter().enumerate().for_each(|(k, &v)| {
            let want = if k == 0 { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-12, "slot {k}: {v}");
        });
        let _ = one;
    }

    #[test]
    fn univariate_functions() {
        let c = ctx(1, 1);
        let x = Jet::lift_var(c, 0, 0.0).unwrap();
        let s = Jet::constant(c, 4.0).add(&x).sqrt().unwrap();
        assert!((s.coeffs()[0] - 2.0).abs() < 1e-15);
        assert!((s.coeffs()[1] - 0.25).abs() < 1e-15);

        let e = Jet::zero(ctx(2, 3)).exp();
        assert_eq!(e.value(), 1.0);

        // third derivative of sin at 0.7 is -cos(0.7)
        let c3 = ctx(1, 3);
        let j = Jet::lift_var(c3, 0, 0.7).unwrap().sin();
        let d3 = j.partial(&MultiIndex(vec![3])).unwrap();
        assert!((d3 + 0.7_f64.cos()).abs() < 1e-9);

        assert!(matches!(
            Jet::constant(c, -1.0).ln(),
            Err(JetError::Domain { func: "log", .. })
        ));
    }

    #[test]
    fn partial_factorial_bookkeeping() {
        let c = ctx(1, 3);
        let x = Jet::lift_var(c, 0, 0.0).unwrap();
        let p = Jet::constant(c, 1.0).add(&x).powi(3).unwrap(); // (1+x)^3
        assert_eq!(p.partial(&MultiIndex(vec![3])).unwrap(), 6.0);
        let five = Jet::constant(ctx(2, 2), 5.0);
        assert_eq!(five.partial(&MultiIndex(vec![0, 0])).unwrap(), 5.0);
        assert!(matches!(
            p.partial(&MultiIndex(vec![4])),
            Err(JetError::OrderExceeded { .. })
        ));
    }

    #[test]
    fn leibniz_rule_on_unit_indices() {
        let c = ctx(3, 4);
        let mk = |seed: u64| {
            let mut j = Jet::constant(c, 0.5 + seed as f64);
            for v in 0..3 {
                j = j.add(
                    &Jet::lift_var(c, v, 0.2 * (v as f64 + 1.0))
                        .unwrap()
                        .scale(1.0 + (seed * 7 + v as u64) as f64 * 0.13),
                );
            }
            j.mul(&j).add(&j) // nontrivial but smooth
        };
        let a = mk(1);
        let b = mk(2);
        let prod = a.mul(&b);
        for v in 0..3 {
            let mut e = vec![0u8; 3];
            e[v] = 1;
            let m = MultiIndex(e);
            let lhs = prod.partial(&m).unwrap();
            let rhs = a.partial(&m).unwrap() * b.value() + a.value() * b.partial(&m).unwrap();
            assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn derivative_consistency() {
        let c = ctx(2, 4);
        let x = Jet::lift_var(c, 0, 0.4).unwrap();
        let y = Jet::lift_var(c, 1, -0.3).unwrap();
        let f = x.mul(&y).sin().mul(&x.exp());
        let fx = f.deriv(0);
        // compare against partial() of the shifted index
        let got = fx.partial(&MultiIndex(vec![1, 2])).unwrap();
        let want = f.partial(&MultiIndex(vec![2, 2])).unwrap();
        assert!((got - want).abs() < 1e-10 * (1.0 + want.abs()));
    }
}
