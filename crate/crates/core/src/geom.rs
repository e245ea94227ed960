//! Coordinate tensor calculus over jets: metric inverse and determinant,
//! Christoffel symbols, curvature, covariant derivatives.
//!
//! Conventions, fixed once and regression-tested on the unit 2-sphere:
//!
//! * Riemann: `R^i_{jkl} = ∂_k Γ^i_{lj} − ∂_l Γ^i_{kj} + Γ^i_{ks} Γ^s_{lj} − Γ^i_{ls} Γ^s_{kj}`
//! * Ricci:   `R_{jl} = R^k_{jkl}` (unit sphere: `R_{ij} = +g_{ij}`)
//! * Divergence of a (2,0) tensor contracts the FIRST slot: `(div T)^k = ∇_j T^{jk}`.
//!   For symmetric tensors the slot is irrelevant; for antisymmetric ones it
//!   flips the sign, so every divergence in this crate goes through
//!   [`GeomAt::div_20`].

use crate::jet::{Jet, JetCtx, JetError};
use thiserror::Error;

pub type JVec = Vec<Jet>;
pub type JMat = Vec<Vec<Jet>>;
pub type J3 = Vec<Vec<Vec<Jet>>>;
pub type J4 = Vec<Vec<Vec<Vec<Jet>>>>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("matrix of jets has singular constant term (pivot {pivot:.3e} below 1e-12)")]
    SingularMatrix { pivot: f64 },
    #[error("operation needs jets of order at least {needed}, got {got}")]
    InsufficientOrder { needed: usize, got: usize },
    #[error("tensor shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Jet(#[from] JetError),
}

pub fn jmat_zero(dim: usize, ctx: JetCtx) -> JMat {
    vec![vec![Jet::zero(ctx); dim]; dim]
}

pub fn jmat_identity(dim: usize, ctx: JetCtx) -> JMat {
    let mut m = jmat_zero(dim, ctx);
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = Jet::constant(ctx, 1.0);
    }
    m
}

/// Gauss elimination with partial pivoting on the constant terms.
pub fn invert_matrix_jets(m: &JMat) -> Result<JMat, GeomError> {
    let d = m.len();
    let ctx = m[0][0].ctx();
    let mut a: Vec<Vec<Jet>> = m.clone();
    let mut inv = jmat_identity(d, ctx);
    for col in 0..d {
        let mut piv = col;
        for r in col + 1..d {
            if a[r][col].value().abs() > a[piv][col].value().abs() {
                piv = r;
            }
        }
        let pval = a[piv][col].value().abs();
        if pval < 1e-12 {
            return Err(GeomError::SingularMatrix { pivot: pval });
        }
        a.swap(col, piv);
        inv.swap(col, piv);
        let pivot_inv = a[col][col].inv()?;
        for c in 0..d {
            a[col][c] = a[col][c].mul(&pivot_inv);
            inv[col][c] = inv[col][c].mul(&pivot_inv);
        }
        for r in 0..d {
            if r == col {
                continue;
            }
            let f = a[r][col].clone();
            if f.max_abs_coeff() == 0.0 {
                continue;
            }
            for c in 0..d {
                a[r][c] = a[r][c].sub(&f.mul(&a[col][c]));
                inv[r][c] = inv[r][c].sub(&f.mul(&inv[col][c]));
            }
        }
    }
    Ok(inv)
}

/// Determinant through jet order via pivoted elimination.
pub fn det_jets(m: &JMat) -> Jet {
    let d = m.len();
    let ctx = m[0][0].ctx();
    let mut a = m.clone();
    let mut det = Jet::constant(ctx, 1.0);
    for col in 0..d {
        let mut piv = col;
        for r in col + 1..d {
            if a[r][col].value().abs() > a[piv][col].value().abs() {
                piv = r;
            }
        }
        if a[piv][col].value().abs() == 0.0 {
            return Jet::zero(ctx);
        }
        if piv != col {
            a.swap(col, piv);
            det = det.neg();
        }
        det = det.mul(&a[col][col]);
        let pivot_inv = match a[col][col].inv() {
            Ok(j) => j,
            Err(_) => return Jet::zero(ctx),
        };
        for r in col + 1..d {
            let f = a[r][col].mul(&pivot_inv);
            for c in col..d {
                a[r][c] = a[r][c].sub(&f.mul(&a[col][c]));
            }
        }
    }
    det
}

/// Metric data at a point: g, its inverse and determinant as jets.
#[derive(Debug, Clone)]
pub struct MetricEval {
    pub dim: usize,
    pub g: JMat,
    pub ginv: JMat,
    pub det_g: Jet,
}

impl MetricEval {
    pub fn new(g: JMat) -> Result<MetricEval, GeomError> {
        let dim = g.len();
        let ginv = invert_matrix_jets(&g)?;
        let det_g = det_jets(&g);
        Ok(MetricEval { dim, g, ginv, det_g })
    }
}

/// Levi-Civita connection coefficients `Γ^i_{jk}`, one order below the metric.
#[derive(Debug, Clone)]
pub struct ConnectionEval {
    pub gamma: J3,
}

pub fn christoffel(me: &MetricEval) -> Result<ConnectionEval, GeomError> {
    let d = me.dim;
    let order = me.g[0][0].ctx().order;
    if order == 0 {
        return Err(GeomError::InsufficientOrder { needed: 1, got: 0 });
    }
    let dg: Vec<JMat> = (0..d)
        .map(|a| {
            (0..d)
                .map(|i| (0..d).map(|j| me.g[i][j].deriv(a)).collect())
                .collect()
        })
        .collect();
    let out_ctx = me.g[0][0].ctx().lower(1);
    let mut gamma = vec![vec![vec![Jet::zero(out_ctx); d]; d]; d];
    for i in 0..d {
        for j in 0..d {
            for k in j..d {
                let mut acc = Jet::zero(out_ctx);
                for l in 0..d {
                    let term = dg[j][l][k].add(&dg[k][l][j]).sub(&dg[l][j][k]);
                    acc = acc.add(&me.ginv[i][l].truncated(out_ctx.order).mul(&term));
                }
                let half = acc.scale(0.5);
                gamma[i][j][k] = half.clone();
                gamma[i][k][j] = half;
            }
        }
    }
    Ok(ConnectionEval { gamma })
}

/// Curvature with the documented sign, plus the Ricci contraction.
#[derive(Debug, Clone)]
pub struct CurvatureEval {
    /// `riemann[i][j][k][l] = R^i_{jkl}`
    pub riemann: J4,
    /// `ricci[j][l] = R^k_{jkl}`
    pub ricci: JMat,
}

pub fn riemann(me: &MetricEval) -> Result<CurvatureEval, GeomError> {
    let order = me.g[0][0].ctx().order;
    if order < 2 {
        return Err(GeomError::InsufficientOrder { needed: 2, got: order });
    }
    let conn = christoffel(me)?;
    let d = me.dim;
    let g0 = &conn.gamma;
    let out_ctx = g0[0][0][0].ctx().lower(1);
    let dgamma: Vec<J3> = (0..d)
        .map(|a| {
            (0..d)
                .map(|i| {
                    (0..d)
                        .map(|j| (0..d).map(|k| g0[i][j][k].deriv(a)).collect())
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut r = vec![vec![vec![vec![Jet::zero(out_ctx); d]; d]; d]; d];
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                for l in 0..d {
                    let mut acc = dgamma[k][i][l][j].sub(&dgamma[l][i][k][j]);
                    for s in 0..d {
                        acc = acc.add(
                            &g0[i][k][s]
                                .truncated(out_ctx.order)
                                .mul(&g0[s][l][j].truncated(out_ctx.order)),
                        );
                        acc = acc.sub(
                            &g0[i][l][s]
                                .truncated(out_ctx.order)
                                .mul(&g0[s][k][j].truncated(out_ctx.order)),
                        );
                    }
                    r[i][j][k][l] = acc;
                }
            }
        }
    }
    let ricci = ricci_from_riemann(&r);
    Ok(CurvatureEval { riemann: r, ricci })
}

/// `R_{jl} = R^k_{jkl}`.
pub fn ricci_from_riemann(r: &J4) -> JMat {
    let d = r.len();
    let ctx = r[0][0][0][0].ctx();
    let mut ric = jmat_zero(d, ctx);
    for j in 0..d {
        for l in 0..d {
            let mut acc = Jet::zero(ctx);
            for k in 0..d {
                acc = acc.add(&r[k][j][k][l]);
            }
            ric[j][l] = acc;
        }
    }
    ric
}

/// Mixed tensor of jets with `up` contravariant and `down` covariant slots,
/// row-major with contravariant slots first.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub dim: usize,
    pub up: usize,
    pub down: usize,
    pub data: Vec<Jet>,
}

impl Tensor {
    pub fn zero(dim: usize, up: usize, down: usize, ctx: JetCtx) -> Tensor {
        let n = dim.pow((up + down) as u32);
        Tensor { dim, up, down, data: vec![Jet::zero(ctx); n] }
    }

    pub fn rank(&self) -> usize {
        self.up + self.down
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.rank());
        let mut o = 0;
        for &i in idx {
            debug_assert!(i < self.dim);
            o = o * self.dim + i;
        }
        o
    }

    pub fn get(&self, idx: &[usize]) -> &Jet {
        &self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], j: Jet) {
        let o = self.offset(idx);
        self.data[o] = j;
    }

    pub fn from_scalar(j: Jet, dim: usize) -> Tensor {
        Tensor { dim, up: 0, down: 0, data: vec![j] }
    }

    pub fn from_mat_up(m: &JMat) -> Tensor {
        let dim = m.len();
        let data = m.iter().flat_map(|row| row.iter().cloned()).collect();
        Tensor { dim, up: 2, down: 0, data }
    }
}

fn each_index(dim: usize, rank: usize, mut f: impl FnMut(&[usize])) {
    let mut idx = vec![0usize; rank];
    loop {
        f(&idx);
        let mut pos = rank;
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < dim {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// Covariant derivative of a general tensor: one extra covariant slot is
/// appended LAST, so `out[..., a] = ∇_a T[...]` with `+Γ` per upper index and
/// `−Γ` per lower index.
pub fn covariant_derivative(t: &Tensor, conn: &ConnectionEval) -> Tensor {
    let d = t.dim;
    let rank = t.rank();
    let in_ctx = t.data[0].ctx();
    let out_ctx = in_ctx.lower(1);
    let mut out = Tensor::zero(d, t.up, t.down + 1, out_ctx);
    each_index(d, rank + 1, |full| {
        let (idx, a) = (&full[..rank], full[rank]);
        let mut acc = t.get(idx).deriv(a);
        let mut tmp = idx.to_vec();
        for slot in 0..rank {
            let orig = idx[slot];
            for s in 0..d {
                tmp[slot] = s;
                let gterm = if slot < t.up {
                    conn.gamma[orig][a][s].truncated(out_ctx.order).mul(&t.get(&tmp).truncated(out_ctx.order))
                } else {
                    conn.gamma[s][a][orig]
                        .truncated(out_ctx.order)
                        .mul(&t.get(&tmp).truncated(out_ctx.order))
                        .neg()
                };
                acc = acc.add(&gterm);
            }
            tmp[slot] = orig;
        }
        out.set(full, acc);
    });
    out
}

/// Everything pointwise geometry the operator layer needs, bundled.
#[derive(Debug, Clone)]
pub struct GeomAt {
    pub dim: usize,
    pub metric: MetricEval,
    pub conn: ConnectionEval,
}

impl GeomAt {
    pub fn new(g: JMat) -> Result<GeomAt, GeomError> {
        let metric = MetricEval::new(g)?;
        let conn = christoffel(&metric)?;
        let dim = metric.dim;
        Ok(GeomAt { dim, metric, conn })
    }

    pub fn curvature(&self) -> Result<CurvatureEval, GeomError> {
        riemann(&self.metric)
    }

    /// `∇_a V^j`, indexed `[j][a]`.
    pub fn cov_deriv_vec(&self, v: &JVec) -> JMat {
        let d = self.dim;
        let out_ctx = v[0].ctx().lower(1);
        let mut out = jmat_zero(d, out_ctx);
        for j in 0..d {
            for a in 0..d {
                let mut acc = v[j].deriv(a);
                for s in 0..d {
                    acc = acc.add(
                        &self.conn.gamma[j][a][s]
                            .truncated(out_ctx.order)
                            .mul(&v[s].truncated(out_ctx.order)),
                    );
                }
                out[j][a] = acc;
            }
        }
        out
    }

    /// `∇_a P^{jk}`, indexed `[j][k][a]`.
    pub fn cov_deriv_20(&self, p: &JMat) -> J3 {
        let d = self.dim;
        let out_ctx = p[0][0].ctx().lower(1);
        let mut out = vec![vec![vec![Jet::zero(out_ctx); d]; d]; d];
        for j in 0..d {
            for k in 0..d {
                for a in 0..d {
                    let mut acc = p[j][k].deriv(a);
                    for s in 0..d {
                        acc = acc
                            .add(
                                &self.conn.gamma[j][a][s]
                                    .truncated(out_ctx.order)
                                    .mul(&p[s][k].truncated(out_ctx.order)),
                            )
                            .add(
                                &self.conn.gamma[k][a][s]
                                    .truncated(out_ctx.order)
                                    .mul(&p[j][s].truncated(out_ctx.order)),
                            );
                    }
                    out[j][k][a] = acc;
                }
            }
        }
        out
    }

    /// `∇_j T^{jk}` (first-slot contraction).
    pub fn div_20(&self, p: &JMat) -> JVec {
        let dp = self.cov_deriv_20(p);
        let d = self.dim;
        (0..d)
            .map(|k| {
                let mut acc = Jet::zero(dp[0][0][0].ctx());
                for j in 0..d {
                    acc = acc.add(&dp[j][k][j]);
                }
                acc
            })
            .collect()
    }

    /// `∇_j V^j`.
    pub fn div_vec(&self, v: &JVec) -> Jet {
        let dv = self.cov_deriv_vec(v);
        let d = self.dim;
        let mut acc = Jet::zero(dv[0][0].ctx());
        for j in 0..d {
            acc = acc.add(&dv[j][j]);
        }
        acc
    }

    /// Covariant Hessian `f_{,kl} = ∂_k ∂_l f − Γ^s_{kl} ∂_s f`.
    pub fn hessian(&self, f: &Jet) -> JMat {
        let d = self.dim;
        let df: Vec<Jet> = (0..d).map(|a| f.deriv(a)).collect();
        let out_ctx = f.ctx().lower(2);
        let mut out = jmat_zero(d, out_ctx);
        for k in 0..d {
            for l in 0..d {
                let mut acc = df[k].deriv(l);
                for s in 0..d {
                    acc = acc.sub(
                        &self.conn.gamma[s][k][l]
                            .truncated(out_ctx.order)
                            .mul(&df[s].truncated(out_ctx.order)),
                    );
                }
                out[k][l] = acc;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::ExprField;
    use crate::jet::JetCtx;

    fn sphere_metric(theta: f64, order: usize) -> JMat {
        let ctx = JetCtx::new(2, order);
        let th = Jet::lift_var(ctx, 0, theta).unwrap();
        let mut g = jmat_zero(2, ctx);
        g[0][0] = Jet::constant(ctx, 1.0);
        g[1][1] = th.sin().mul(&th.sin());
        g
    }

    #[test]
    fn invert_examples() {
        let ctx = JetCtx::new(1, 2);
        let mut m = jmat_zero(2, ctx);
        m[0][0] = Jet::constant(ctx, 2.0);
        m[1][1] = Jet::constant(ctx, 4.0);
        let inv = invert_matrix_jets(&m).unwrap();
        assert_eq!(inv[0][0].value(), 0.5);
        assert_eq!(inv[1][1].value(), 0.25);

        // [[1, x], [x, 1]] inverse has series 1/(1-x^2) on the diagonal
        let x = Jet::lift_var(ctx, 0, 0.0).unwrap();
        let mut m2 = jmat_identity(2, ctx);
        m2[0][1] = x.clone();
        m2[1][0] = x.clone();
        let inv2 = invert_matrix_jets(&m2).unwrap();
        assert_eq!(inv2[0][0].coeffs(), &[1.0, 0.0, 1.0]);
        assert_eq!(inv2[0][1].coeffs(), &[0.0, -1.0, 0.0]);

        let sing = jmat_zero(2, ctx);
        assert!(matches!(invert_matrix_jets(&sing), Err(GeomError::SingularMatrix { .. })));
    }

    #[test]
    fn det_examples() {
        let ctx = JetCtx::new(1, 2);
        let mut m = jmat_zero(2, ctx);
        m[0][0] = Jet::constant(ctx, 2.0);
        m[1][1] = Jet::constant(ctx, 3.0);
        assert_eq!(det_jets(&m).value(), 6.0);

        let x = Jet::lift_var(ctx, 0, 0.0).unwrap();
        let mut m2 = jmat_identity(2, ctx);
        m2[0][1] = x.clone();
        m2[1][0] = x;
        assert_eq!(det_jets(&m2).coeffs(), &[1.0, 0.0, -1.0]);
    }

    #[test]
    fn jacobi_formula_random_metric() {
        // d(det M)/dx = tr(adj(M) dM/dx) = det M * tr(M^{-1} dM/dx)
        let ctx = JetCtx::new(2, 3);
        let vars: Vec<String> = ["x", "y"].iter().map(|s| s.to_string()).collect();
        let entries = [["2 + sin(x)*0.3", "0.2*x*y"], ["0.2*x*y", "1.5 + 0.1*y^2"]];
        let mut m = jmat_zero(2, ctx);
        for i in 0..2 {
            for j in 0..2 {
                m[i][j] = ExprField::parse(entries[i][j], &vars)
                    .unwrap()
                    .eval(&[0.4, -0.8], ctx)
                    .unwrap();
            }
        }
        let det = det_jets(&m);
        let inv = invert_matrix_jets(&m).unwrap();
        let ddet = det.deriv(0);
        let mut tr = Jet::zero(ctx.lower(1));
        for i in 0..2 {
            for j in 0..2 {
                tr = tr.add(&inv[i][j].truncated(ctx.order - 1).mul(&m[j][i].deriv(0)));
            }
        }
        let rhs = det.truncated(ctx.order - 1).mul(&tr);
        for (a, b) in ddet.coeffs().iter().zip(rhs.coeffs()) {
            assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn flat_connection_vanishes() {
        let ctx = JetCtx::new(3, 3);
        let me = MetricEval::new(jmat_identity(3, ctx)).unwrap();
        let conn = christoffel(&me).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    assert_eq!(conn.gamma[i][j][k].max_abs_coeff(), 0.0);
                }
            }
        }
    }

    #[test]
    fn sphere_christoffel() {
        let me = MetricEval::new(sphere_metric(0.8, 3)).unwrap();
        let conn = christoffel(&me).unwrap();
        let want = -(0.8_f64.sin()) * 0.8_f64.cos();
        assert!((conn.gamma[0][1][1].value() - want).abs() < 1e-12);
    }

    #[test]
    fn liouville_christoffel() {
        // g = (X - Y)(dx^2 + dy^2) with X = x, Y = y: Γ^x_xx = X'/(2(X-Y))
        let ctx = JetCtx::new(2, 3);
        let vars: Vec<String> = ["x", "y"].iter().map(|s| s.to_string()).collect();
        let conf = ExprField::parse("x - y", &vars).unwrap();
        let (x, y) = (2.5, 0.5);
        let c = conf.eval(&[x, y], ctx).unwrap();
        let mut g = jmat_zero(2, ctx);
        g[0][0] = c.clone();
        g[1][1] = c;
        let me = MetricEval::new(g).unwrap();
        let conn = christoffel(&me).unwrap();
        let want = 1.0 / (2.0 * (x - y));
        assert!((conn.gamma[0][0][0].value() - want).abs() < 1e-12);
    }

    #[test]
    fn sphere_curvature() {
        let me = MetricEval::new(sphere_metric(0.8, 4)).unwrap();
        let cur = riemann(&me).unwrap();
        // R^theta_{phi theta phi} = sin^2 theta
        let want = 0.8_f64.sin().powi(2);
        assert!((cur.riemann[0][1][0][1].value() - want).abs() < 1e-11);
        // Ricci = g, scalar curvature 2
        assert!((cur.ricci[0][0].value() - 1.0).abs() < 1e-11);
        assert!((cur.ricci[1][1].value() - want).abs() < 1e-11);
        let ginv = &me.ginv;
        let scalar = ginv[0][0].value() * cur.ricci[0][0].value()
            + ginv[1][1].value() * cur.ricci[1][1].value();
        assert!((scalar - 2.0).abs() < 1e-10);

        // antisymmetry and first Bianchi at the point
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        let a = cur.riemann[i][j][k][l].value();
                        let b = cur.riemann[i][j][l][k].value();
                        assert!((a + b).abs() < 1e-11);
                        let cyc = cur.riemann[i][j][k][l].value()
                            + cur.riemann[i][k][l][j].value()
                            + cur.riemann[i][l][j][k].value();
                        assert!(cyc.abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn flat_curvature_zero() {
        let ctx = JetCtx::new(2, 4);
        let me = MetricEval::new(jmat_identity(2, ctx)).unwrap();
        let cur = riemann(&me).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(cur.ricci[i][j].max_abs_coeff(), 0.0);
            }
        }
    }

    #[test]
    fn metric_compatibility() {
        // ∇g = 0 for the sphere metric through jet order
        let me = MetricEval::new(sphere_metric(1.1, 4)).unwrap();
        let conn = christoffel(&me).unwrap();
        let ga = GeomAt { dim: 2, metric: me, conn };
        let mut t = Tensor::zero(2, 0, 2, ga.metric.g[0][0].ctx());
        for i in 0..2 {
            for j in 0..2 {
                t.set(&[i, j], ga.metric.g[i][j].clone());
            }
        }
        let nabla_g = covariant_derivative(&t, &ga.conn);
        for j in &nabla_g.data {
            assert!(j.max_abs_coeff() < 1e-10);
        }
    }

    #[test]
    fn gradient_of_scalar() {
        let ctx = JetCtx::new(2, 3);
        let f = Jet::lift_var(ctx, 0, 0.3)
            .unwrap()
            .mul(&Jet::lift_var(ctx, 1, 0.9).unwrap());
        let me = MetricEval::new(jmat_identity(2, ctx)).unwrap();
        let conn = christoffel(&me).unwrap();
        let t = Tensor::from_scalar(f.clone(), 2);
        let grad = covariant_derivative(&t, &conn);
        assert!((grad.get(&[0]).value() - 0.9).abs() < 1e-14);
        assert!((grad.get(&[1]).value() - 0.3).abs() < 1e-14);
    }
}
