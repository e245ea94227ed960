//! The classical layer: the Killing-tensor family `K(t)`, Killing vector
//! fields `V(t)`, potentials `U(t)`, and canonical Poisson brackets on the
//! cotangent bundle.
//!
//! `K(t) = f(t) (t Id − A)^{-1} g^{-1}` where `f(t)` is the signed root
//! `∏ (t − ϱ_i)^{m_i/2}` in the c-projective case and the full determinant
//! `∏ (t − ϱ_i)^{m_i}` in the projective case. Both make `K(t)` a polynomial
//! in `t`; near the spectrum of `A` the family is evaluated through its
//! interpolated polynomial coefficients instead of the product formula.

use crate::expr::{eval_jet, ExprError, ExprField};
use crate::geom::{invert_matrix_jets, jmat_zero, GeomAt, GeomError, J3, JMat, JVec};
use crate::jet::{Jet, JetCtx};
use crate::structures::{EigenJet, ProjectiveEval, StructureError, StructureEval};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IntegralsError {
    #[error("family is not polynomial of the expected degree (interpolation residual {residual:.3e})")]
    DegreeOverflow { residual: f64 },
    #[error("eigenvalue collision at the point: gap {gap:.3e}")]
    EigenvalueCollision { gap: f64 },
    #[error("potential function f_{index} failed to evaluate: {source}")]
    Potential { index: usize, source: ExprError },
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Structure(#[from] StructureError),
}

/// A point of the cotangent bundle in coordinates.
#[derive(Debug, Clone)]
pub struct PhasePoint {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
}

/// Evaluated model at a point: either a c-projective structure or a
/// projectively compatible pair.
pub enum ModelEval {
    CProjective(StructureEval),
    Projective(ProjectiveEval),
}

impl ModelEval {
    pub fn dim(&self) -> usize {
        match self {
            ModelEval::CProjective(se) => se.dim,
            ModelEval::Projective(pe) => pe.dim,
        }
    }

    pub fn geom(&self) -> &GeomAt {
        match self {
            ModelEval::CProjective(se) => &se.geom,
            ModelEval::Projective(pe) => &pe.geom,
        }
    }

    pub fn a_tensor(&self) -> &JMat {
        match self {
            ModelEval::CProjective(se) => &se.a,
            ModelEval::Projective(pe) => &pe.a,
        }
    }

    pub fn eigs(&self) -> &[EigenJet] {
        match self {
            ModelEval::CProjective(se) => &se.eigs,
            ModelEval::Projective(pe) => &pe.eigs,
        }
    }

    /// Exponent of `(t − ϱ_i)` in the determinant factor: halved multiplicity
    /// for the signed root, full multiplicity in the projective case.
    fn exponent(&self, e: &EigenJet) -> usize {
        match self {
            ModelEval::CProjective(_) => e.mult / 2,
            ModelEval::Projective(_) => e.mult,
        }
    }

    /// Degree of `t ↦ K(t)`.
    pub fn degree(&self) -> usize {
        let total: usize = self.eigs().iter().map(|e| self.exponent(e)).sum();
        total - 1
    }

    pub fn ctx(&self) -> JetCtx {
        self.geom().metric.g[0][0].ctx()
    }
}

/// The determinant factor `∏ (t − ϱ_i)^{e_i}`, computed directly from the
/// eigenvalue jets. Smooth in `t` and on the manifold, possibly negative.
pub fn sqrtdet_factor(me: &ModelEval, t: f64) -> Jet {
    let ctx = me.ctx();
    let mut f = Jet::constant(ctx, 1.0);
    for e in me.eigs() {
        let lin = Jet::constant(ctx, t).sub(&e.value);
        f = f.mul(&lin.powi(me.exponent(e) as i64).expect("non-negative power"));
    }
    f
}

fn min_eigen_distance(me: &ModelEval, t: f64) -> f64 {
    me.eigs()
        .iter()
        .fold(f64::INFINITY, |m, e| m.min((t - e.value.value()).abs()))
}

/// `K(t)^{ij}` by the product formula (requires `t` away from the spectrum).
fn killing_product_formula(me: &ModelEval, t: f64) -> Result<JMat, IntegralsError> {
    let d = me.dim();
    let ctx = me.ctx();
    let a = me.a_tensor();
    let mut m = jmat_zero(d, ctx);
    for i in 0..d {
        for j in 0..d {
            m[i][j] = if i == j {
                Jet::constant(ctx, t).sub(&a[i][j])
            } else {
                a[i][j].neg()
            };
        }
    }
    let minv = invert_matrix_jets(&m)?;
    let f = sqrtdet_factor(me, t);
    let ginv = &me.geom().metric.ginv;
    let mut k = jmat_zero(d, ctx);
    for i in 0..d {
        for j in 0..d {
            let mut acc = Jet::zero(ctx);
            for l in 0..d {
                acc = acc.add(&minv[i][l].mul(&ginv[l][j]));
            }
            k[i][j] = f.mul(&acc);
        }
    }
    Ok(k)
}

/// Interpolation nodes guaranteed to avoid the spectrum at this point.
fn interp_nodes(me: &ModelEval, count: usize) -> Vec<f64> {
    let tmax = me
        .eigs()
        .iter()
        .fold(1.0f64, |m, e| m.max(e.value.value().abs()));
    (0..count).map(|j| 2.0 * tmax + 1.0 + j as f64).collect()
}

/// Columns of the inverse Vandermonde matrix: power-basis coefficients of the
/// Lagrange basis polynomials at the given nodes.
fn vandermonde_inverse(nodes: &[f64]) -> Vec<Vec<f64>> {
    let n = nodes.len();
    let mut inv = vec![vec![0.0; n]; n];
    for (j, &node) in nodes.iter().enumerate() {
        let mut poly = vec![0.0; n];
        poly[0] = 1.0;
        let mut deg = 0;
        let mut denom = 1.0;
        for (m, &other) in nodes.iter().enumerate() {
            if m == j {
                continue;
            }
            denom *= node - other;
            for k in (0..=deg).rev() {
                poly[k + 1] += poly[k];
                poly[k] *= -other;
            }
            deg += 1;
        }
        for l in 0..n {
            inv[l][j] = poly[l] / denom;
        }
    }
    inv
}

/// Polynomial coefficients of `t ↦ K(t)` via exact interpolation, plus a
/// held-out-node consistency check certifying the degree bound.
pub fn killing_coeffs(me: &ModelEval) -> Result<Vec<JMat>, IntegralsError> {
    let deg = me.degree();
    let n = deg + 1;
    let nodes = interp_nodes(me, n + 1);
    let samples: Vec<JMat> = nodes
        .iter()
        .map(|&t| killing_product_formula(me, t))
        .collect::<Result<_, _>>()?;
    let winv = vandermonde_inverse(&nodes[..n]);
    let d = me.dim();
    let ctx = me.ctx();
    let mut coeffs = Vec::with_capacity(n);
    for l in 0..n {
        let mut c = jmat_zero(d, ctx);
        for (j, s) in samples[..n].iter().enumerate() {
            let w = winv[l][j];
            if w == 0.0 {
                continue;
            }
            for a in 0..d {
                for b in 0..d {
                    c[a][b] = c[a][b].add(&s[a][b].scale(w));
                }
            }
        }
        coeffs.push(c);
    }
    let t_extra = nodes[n];
    let mut err = 0.0f64;
    let mut scale = 1.0f64;
    for a in 0..d {
        for b in 0..d {
            let mut acc = 0.0;
            let mut tp = 1.0;
            for c in &coeffs {
                acc += c[a][b].value() * tp;
                tp *= t_extra;
            }
            let want = samples[n][a][b].value();
            err = err.max((acc - want).abs());
            scale = scale.max(want.abs());
        }
    }
    if err / scale > 1e-8 {
        return Err(IntegralsError::DegreeOverflow { residual: err / scale });
    }
    Ok(coeffs)
}

/// `K(t)`; switches to the interpolated-coefficient path when `t` is within
/// 1e-6 of an eigenvalue at the point.
pub fn killing_tensor_k(me: &ModelEval, t: f64) -> Result<JMat, IntegralsError> {
    if min_eigen_distance(me, t) > 1e-6 {
        return killing_product_formula(me, t);
    }
    let coeffs = killing_coeffs(me)?;
    let d = me.dim();
    let ctx = me.ctx();
    let mut k = jmat_zero(d, ctx);
    let mut tp = 1.0;
    for c in &coeffs {
        for a in 0..d {
            for b in 0..d {
                k[a][b] = k[a][b].add(&c[a][b].scale(tp));
            }
        }
        tp *= t;
    }
    Ok(k)
}

fn sqrtdet_factor_se(se: &StructureEval, t: f64) -> Jet {
    let ctx = se.lambda.ctx();
    let mut f = Jet::constant(ctx, 1.0);
    for e in &se.eigs {
        let lin = Jet::constant(ctx, t).sub(&e.value);
        f = f.mul(&lin.powi((e.mult / 2) as i64).expect("non-negative power"));
    }
    f
}

/// Canonical Killing vector field `V(t)^j = J^j_k g^{ki} ∂_i √det(t Id − A)`
/// (c-projective structures only).
pub fn killing_vector_v(se: &StructureEval, t: f64) -> JVec {
    let f = sqrtdet_factor_se(se, t);
    let d = se.dim;
    let grad_low: Vec<Jet> = (0..d).map(|a| f.deriv(a)).collect();
    let order = grad_low[0].ctx().order;
    let mut v = Vec::with_capacity(d);
    for j in 0..d {
        let mut acc = Jet::zero(grad_low[0].ctx());
        for k in 0..d {
            for i in 0..d {
                acc = acc.add(
                    &se.jten[j][k]
                        .truncated(order)
                        .mul(&se.geom.metric.ginv[k][i].truncated(order))
                        .mul(&grad_low[i]),
                );
            }
        }
        v.push(acc);
    }
    v
}

fn lower_vec(geom: &GeomAt, v: &JVec) -> JVec {
    let d = geom.dim;
    let order = v[0].ctx().order;
    (0..d)
        .map(|j| {
            let mut acc = Jet::zero(v[0].ctx());
            for s in 0..d {
                acc = acc.add(&geom.metric.g[j][s].truncated(order).mul(&v[s]));
            }
            acc
        })
        .collect()
}

/// `∇_a ω_j` for a covector, indexed `[j][a]`.
fn covariant_deriv_covec(geom: &GeomAt, w: &JVec) -> JMat {
    let d = geom.dim;
    let out_ctx = w[0].ctx().lower(1);
    let mut out = jmat_zero(d, out_ctx);
    for j in 0..d {
        for a in 0..d {
            let mut acc = w[j].deriv(a);
            for s in 0..d {
                acc = acc.sub(
                    &geom.conn.gamma[s][a][j]
                        .truncated(out_ctx.order)
                        .mul(&w[s].truncated(out_ctx.order)),
                );
            }
            out[j][a] = acc;
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct KillingVectorResiduals {
    /// `max |∇_(i V_j)|`, scale-normalized.
    pub killing: f64,
    /// `|∇_j V^j|`, scale-normalized.
    pub divergence: f64,
    /// Largest component outside the `t`-coordinate span.
    pub off_span: f64,
}

pub fn killing_vector_residuals(se: &StructureEval, t: f64) -> KillingVectorResiduals {
    let v = killing_vector_v(se, t);
    let low = lower_vec(&se.geom, &v);
    let dlow = covariant_deriv_covec(&se.geom, &low);
    let d = se.dim;
    let mut raw = 0.0f64;
    let mut scale = 1.0f64;
    for i in 0..d {
        for j in 0..d {
            let sym = 0.5 * (dlow[i][j].value() + dlow[j][i].value());
            raw = raw.max(sym.abs());
            scale = scale.max(dlow[i][j].value().abs());
        }
    }
    let div = se.geom.div_vec(&v);
    let mut off = 0.0f64;
    for (j, vj) in v.iter().enumerate() {
        let is_t = j >= se.r && j < 2 * se.r;
        if !is_t {
            off = off.max(vj.value().abs());
        }
    }
    KillingVectorResiduals {
        killing: raw / scale,
        divergence: div.value().abs() / scale,
        off_span: off / scale,
    }
}

/// Max over components of the fully symmetrized `∇^{(i} K^{jk)}`,
/// scale-normalized against the unsymmetrized gradient.
pub fn killing_equation_residual(me: &ModelEval, t: f64) -> Result<f64, IntegralsError> {
    let k = killing_tensor_k(me, t)?;
    let geom = me.geom();
    let dk = geom.cov_deriv_20(&k); // [j][k][a] = nabla_a K^{jk}
    let d = me.dim();
    let up = |a: usize, b: usize, c: usize| {
        let mut acc = 0.0;
        for s in 0..d {
            acc += geom.metric.ginv[a][s].value() * dk[b][c][s].value();
        }
        acc
    };
    let mut raw = 0.0f64;
    let mut scale = 1.0f64;
    for i in 0..d {
        for j in 0..d {
            for kk in 0..d {
                let sym = (up(i, j, kk)
                    + up(j, kk, i)
                    + up(kk, i, j)
                    + up(i, kk, j)
                    + up(j, i, kk)
                    + up(kk, j, i))
                    / 6.0;
                raw = raw.max(sym.abs());
                scale = scale.max(up(i, j, kk).abs());
            }
        }
    }
    Ok(raw / scale)
}

// ---------------------------------------------------------------------------
// observables and Poisson brackets
// ---------------------------------------------------------------------------

/// Polynomial of degree ≤ 3 in momenta with symmetric tensor-field
/// coefficients (as jets at a point), plus an optional scalar potential.
#[derive(Debug, Clone, Default)]
pub struct Observable {
    pub deg1: Option<JVec>,
    pub deg2: Option<JMat>,
    pub deg3: Option<J3>,
    pub potential: Option<Jet>,
}

impl Observable {
    pub fn from_deg2(k: JMat) -> Observable {
        Observable { deg2: Some(k), ..Default::default() }
    }

    pub fn from_deg1(v: JVec) -> Observable {
        Observable { deg1: Some(v), ..Default::default() }
    }

    pub fn from_deg3(t: J3) -> Observable {
        Observable { deg3: Some(t), ..Default::default() }
    }

    pub fn with_potential(mut self, u: Jet) -> Observable {
        self.potential = Some(u);
        self
    }

    /// Value at momenta `p` (coefficients evaluated at their base point).
    pub fn value(&self, p: &[f64]) -> f64 {
        let mut acc = 0.0;
        if let Some(v) = &self.deg1 {
            for (j, vj) in v.iter().enumerate() {
                acc += vj.value() * p[j];
            }
        }
        if let Some(m) = &self.deg2 {
            for (a, row) in m.iter().enumerate() {
                for (b, k) in row.iter().enumerate() {
                    acc += k.value() * p[a] * p[b];
                }
            }
        }
        if let Some(t) = &self.deg3 {
            for (a, pa) in t.iter().enumerate() {
                for (b, pb) in pa.iter().enumerate() {
                    for (c, j) in pb.iter().enumerate() {
                        acc += j.value() * p[a] * p[b] * p[c];
                    }
                }
            }
        }
        if let Some(u) = &self.potential {
            acc += u.value();
        }
        acc
    }

    fn dp(&self, i: usize, p: &[f64]) -> f64 {
        let mut acc = 0.0;
        if let Some(v) = &self.deg1 {
            acc += v[i].value();
        }
        if let Some(m) = &self.deg2 {
            for (b, k) in m[i].iter().enumerate() {
                acc += 2.0 * k.value() * p[b];
            }
        }
        if let Some(t) = &self.deg3 {
            for (b, pb) in t[i].iter().enumerate() {
                for (c, j) in pb.iter().enumerate() {
                    acc += 3.0 * j.value() * p[b] * p[c];
                }
            }
        }
        acc
    }

    fn dx(&self, i: usize, p: &[f64]) -> f64 {
        let mut acc = 0.0;
        if let Some(v) = &self.deg1 {
            for (j, vj) in v.iter().enumerate() {
                acc += vj.deriv(i).value() * p[j];
            }
        }
        if let Some(m) = &self.deg2 {
            for (a, row) in m.iter().enumerate() {
                for (b, k) in row.iter().enumerate() {
                    acc += k.deriv(i).value() * p[a] * p[b];
                }
            }
        }
        if let Some(t) = &self.deg3 {
            for (a, pa) in t.iter().enumerate() {
                for (b, pb) in pa.iter().enumerate() {
                    for (c, j) in pb.iter().enumerate() {
                        acc += j.deriv(i).value() * p[a] * p[b] * p[c];
                    }
                }
            }
        }
        if let Some(u) = &self.potential {
            acc += u.deriv(i).value();
        }
        acc
    }

    /// Magnitude estimate used for scale normalization of brackets.
    pub fn norm_at(&self, p: &[f64]) -> f64 {
        let pmax = p.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let mut acc = 0.0f64;
        if let Some(v) = &self.deg1 {
            let c = v.iter().fold(0.0f64, |m, j| m.max(j.value().abs()));
            acc += c * pmax;
        }
        if let Some(m) = &self.deg2 {
            let c = m
                .iter()
                .flat_map(|r| r.iter())
                .fold(0.0f64, |m, j| m.max(j.value().abs()));
            acc += c * pmax * pmax;
        }
        if let Some(t) = &self.deg3 {
            let c = t
                .iter()
                .flat_map(|r| r.iter())
                .flat_map(|r| r.iter())
                .fold(0.0f64, |m, j| m.max(j.value().abs()));
            acc += c * pmax * pmax * pmax;
        }
        if let Some(u) = &self.potential {
            acc += u.value().abs();
        }
        acc.max(1e-30)
    }
}

/// Canonical bracket `Σ_i (∂F/∂p_i ∂G/∂x_i − ∂F/∂x_i ∂G/∂p_i)`, exact for the
/// polynomial momentum dependence.
pub fn poisson_bracket(f: &Observable, g: &Observable, pp: &PhasePoint) -> f64 {
    let d = pp.x.len();
    let mut acc = 0.0;
    for i in 0..d {
        acc += f.dp(i, &pp.p) * g.dx(i, &pp.p) - f.dx(i, &pp.p) * g.dp(i, &pp.p);
    }
    acc
}

/// Scale-normalized bracket residual `|{F, G}| / (‖F‖ ‖G‖)`.
pub fn poisson_residual(f: &Observable, g: &Observable, pp: &PhasePoint) -> f64 {
    poisson_bracket(f, g, pp).abs() / (f.norm_at(&pp.p) * g.norm_at(&pp.p))
}

/// Symmetrized coefficient tensor of `{P, Q}` for quadratic `P`, `Q`:
/// `T^{jkl} = sym(2 [P^{ij} ∂_i Q^{kl} − Q^{ij} ∂_i P^{kl}])`.
pub fn schouten_bracket_22(p: &JMat, q: &JMat) -> J3 {
    let d = p.len();
    let out_ctx = p[0][0].ctx().lower(1);
    let raw = |j: usize, k: usize, l: usize| {
        let mut acc = Jet::zero(out_ctx);
        for i in 0..d {
            acc = acc.add(
                &p[i][j]
                    .truncated(out_ctx.order)
                    .mul(&q[k][l].deriv(i))
                    .sub(&q[i][j].truncated(out_ctx.order).mul(&p[k][l].deriv(i))),
            );
        }
        acc.scale(2.0)
    };
    let mut t = vec![vec![vec![Jet::zero(out_ctx); d]; d]; d];
    for j in 0..d {
        for k in 0..d {
            for l in 0..d {
                let perms: [(usize, usize, usize); 6] =
                    [(j, k, l), (j, l, k), (k, j, l), (k, l, j), (l, j, k), (l, k, j)];
                let mut acc = Jet::zero(out_ctx);
                for (a, b, c) in perms {
                    acc = acc.add(&raw(a, b, c));
                }
                t[j][k][l] = acc.scale(1.0 / 6.0);
            }
        }
    }
    t
}

// ---------------------------------------------------------------------------
// potentials
// ---------------------------------------------------------------------------

/// Choice of the functions `f_i` entering the potential family: one
/// expression per eigenvalue. Non-constant eigenvalues may use the variable
/// `rho` (bound to `ϱ_i`); block eigenvalues may use their block coordinates.
/// Coordinate names are also allowed, which deliberately permits ill-formed
/// choices for negative-control runs.
#[derive(Debug, Clone)]
pub struct PotentialChoice {
    pub fs: Vec<ExprField>,
}

impl PotentialChoice {
    /// `f_i = rho^power` for every eigenvalue.
    pub fn rho_power(se: &StructureEval, power: i32) -> PotentialChoice {
        let vars = potential_vars(se);
        let src = format!("rho^{power}");
        let fs = (0..se.eigs.len())
            .map(|_| ExprField::parse(&src, &vars).expect("valid builtin potential"))
            .collect();
        PotentialChoice { fs }
    }

    pub fn zero(se: &StructureEval) -> PotentialChoice {
        let vars = potential_vars(se);
        let fs = (0..se.eigs.len()).map(|_| ExprField::constant(0.0, &vars)).collect();
        PotentialChoice { fs }
    }

    pub fn parse(se: &StructureEval, sources: &[String]) -> Result<PotentialChoice, IntegralsError> {
        let vars = potential_vars(se);
        let fs = sources
            .iter()
            .enumerate()
            .map(|(i, s)| {
                ExprField::parse(s, &vars)
                    .map_err(|source| IntegralsError::Potential { index: i, source })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PotentialChoice { fs })
    }
}

fn potential_vars(se: &StructureEval) -> Vec<String> {
    let mut vars = vec!["rho".to_string()];
    for k in 1..=se.r {
        vars.push(format!("x{k}"));
    }
    for k in 1..=se.r {
        vars.push(format!("t{k}"));
    }
    let y_total = se.dim - 2 * se.r;
    for q in 1..=y_total {
        vars.push(format!("y{q}"));
    }
    vars
}

/// Jets of the `f_i` at the point.
pub fn potential_fs(se: &StructureEval, choice: &PotentialChoice) -> Result<Vec<Jet>, IntegralsError> {
    let ctx = se.lambda.ctx();
    let vars = potential_vars(se);
    let mut out = Vec::new();
    for (i, f) in choice.fs.iter().enumerate() {
        let mut env = HashMap::new();
        env.insert("rho".to_string(), se.eigs[i].value.clone());
        for (slot, name) in vars.iter().skip(1).enumerate() {
            env.insert(
                name.clone(),
                Jet::lift_var(ctx, slot, se.x[slot])
                    .map_err(|e| IntegralsError::Potential { index: i, source: e.into() })?,
            );
        }
        out.push(
            eval_jet(&f.ast, &env).map_err(|source| IntegralsError::Potential { index: i, source })?,
        );
    }
    Ok(out)
}

/// The potential family
/// `U(t) = Σ_i ∏_{l≠i} ((t−ϱ_l)/(ϱ_i−ϱ_l))^{m_l/2} (t−ϱ_i)^{m_i/2−1} f_i`.
pub fn potential_u(se: &StructureEval, choice: &PotentialChoice, t: f64) -> Result<Jet, IntegralsError> {
    let ctx = se.lambda.ctx();
    let fs = potential_fs(se, choice)?;
    let n = se.eigs.len();
    let mut u = Jet::zero(ctx);
    for i in 0..n {
        let mut term = fs[i].clone();
        for l in 0..n {
            if l == i {
                continue;
            }
            let gap = se.eigs[i].value.sub(&se.eigs[l].value);
            if gap.value().abs() < 1e-8 {
                return Err(IntegralsError::EigenvalueCollision { gap: gap.value().abs() });
            }
            let ratio = Jet::constant(ctx, t)
                .sub(&se.eigs[l].value)
                .div(&gap)
                .map_err(GeomError::from)?;
            term = term.mul(&ratio.powi((se.eigs[l].mult / 2) as i64).expect("power"));
        }
        let extra = (se.eigs[i].mult / 2) as i64 - 1;
        if extra > 0 {
            let lin = Jet::constant(ctx, t).sub(&se.eigs[i].value);
            term = term.mul(&lin.powi(extra).expect("power"));
        }
        u = u.add(&term);
    }
    Ok(u)
}

#[derive(Debug, Clone, Copy)]
pub struct PotentialConditionResiduals {
    /// Symmetry `K(t) dU(s) = K(s) dU(t)`.
    pub k_du_symmetry: f64,
    /// Eigenform condition `d f_i ∘ A − ϱ_i d f_i`.
    pub eigenform: f64,
    /// `dU(t)(V(s))`.
    pub du_of_v: f64,
}

pub fn potential_condition_residuals(
    se: &StructureEval,
    choice: &PotentialChoice,
) -> Result<PotentialConditionResiduals, IntegralsError> {
    let d = se.dim;
    let me = ModelEval::CProjective(se.clone());
    let pairs = [(0.37, 1.91), (-0.63, 4.1)];
    let mut k_du_symmetry = 0.0f64;
    let mut du_of_v = 0.0f64;
    for (s, t) in pairs {
        let kt = killing_tensor_k(&me, t)?;
        let ks = killing_tensor_k(&me, s)?;
        let us = potential_u(se, choice, s)?;
        let ut = potential_u(se, choice, t)?;
        let dus: Vec<f64> = (0..d).map(|a| us.deriv(a).value()).collect();
        let dut: Vec<f64> = (0..d).map(|a| ut.deriv(a).value()).collect();
        let mut raw = 0.0f64;
        let mut scale = 1.0f64;
        for j in 0..d {
            let mut lhs = 0.0;
            let mut rhs = 0.0;
            for i in 0..d {
                let mut ktij = 0.0;
                let mut ksij = 0.0;
                for a in 0..d {
                    ktij += kt[i][a].value() * se.geom.metric.g[a][j].value();
                    ksij += ks[i][a].value() * se.geom.metric.g[a][j].value();
                }
                lhs += ktij * dus[i];
                rhs += ksij * dut[i];
            }
            raw = raw.max((lhs - rhs).abs());
            scale = scale.max(lhs.abs()).max(rhs.abs());
        }
        k_du_symmetry = k_du_symmetry.max(raw / scale);

        let vs = killing_vector_v(se, s);
        let mut dot = 0.0;
        let mut vscale = 1.0f64;
        for a in 0..d {
            dot += dut[a] * vs[a].value();
            vscale = vscale.max(vs[a].value().abs() * dut[a].abs().max(1.0));
        }
        du_of_v = du_of_v.max(dot.abs() / vscale);
    }

    let fs = potential_fs(se, choice)?;
    let mut eigenform = 0.0f64;
    for (i, f) in fs.iter().enumerate() {
        let df: Vec<f64> = (0..d).map(|a| f.deriv(a).value()).collect();
        let rho = se.eigs[i].value.value();
        for b in 0..d {
            let mut lhs = 0.0;
            for a in 0..d {
                lhs += df[a] * se.a[a][b].value();
            }
            eigenform = eigenform.max((lhs - rho * df[b]).abs());
        }
    }
    Ok(PotentialConditionResiduals { k_du_symmetry, eigenform, du_of_v })
}

// ---------------------------------------------------------------------------
// t-coefficient observables and closed forms
// ---------------------------------------------------------------------------

/// Coefficient observables `I_(l)` of `t^l` in `I(t)`.
pub fn i_coefficients(me: &ModelEval) -> Result<Vec<Observable>, IntegralsError> {
    Ok(killing_coeffs(me)?.into_iter().map(Observable::from_deg2).collect())
}

/// Coefficient jets of `t^l` in `U(t)`.
pub fn u_coefficients(
    se: &StructureEval,
    choice: &PotentialChoice,
) -> Result<Vec<Jet>, IntegralsError> {
    let me = ModelEval::CProjective(se.clone());
    let n = me.degree() + 1;
    let nodes = interp_nodes(&me, n);
    let winv = vandermonde_inverse(&nodes);
    let ctx = se.lambda.ctx();
    let samples: Vec<Jet> = nodes
        .iter()
        .map(|&t| potential_u(se, choice, t))
        .collect::<Result<_, _>>()?;
    Ok((0..n)
        .map(|l| {
            let mut u = Jet::zero(ctx);
            for (j, s) in samples.iter().enumerate() {
                if winv[l][j] != 0.0 {
                    u = u.add(&s.scale(winv[l][j]));
                }
            }
            u
        })
        .collect())
}

/// Coefficient observables `L_(l)` of `t^l` in `L(t)`.
pub fn l_coefficients(se: &StructureEval) -> Vec<Observable> {
    let n_const: usize = se.blocks.iter().map(|b| b.m / 2).sum();
    let n = se.r + n_const; // V(t) has degree n - 1
    if n == 0 {
        return vec![];
    }
    let me = ModelEval::CProjective(se.clone());
    let nodes = interp_nodes(&me, n);
    let winv = vandermonde_inverse(&nodes);
    let samples: Vec<JVec> = nodes.iter().map(|&t| killing_vector_v(se, t)).collect();
    let d = se.dim;
    let ctx = samples[0][0].ctx();
    (0..n)
        .map(|l| {
            let mut v = vec![Jet::zero(ctx); d];
            for (j, s) in samples.iter().enumerate() {
                let w = winv[l][j];
                if w == 0.0 {
                    continue;
                }
                for (a, va) in v.iter_mut().enumerate() {
                    *va = va.add(&s[a].scale(w));
                }
            }
            Observable::from_deg1(v)
        })
        .collect()
}

/// Residual of the derived closed form
/// `L(t) = ∏_γ (t − c_γ)^{m_γ/2} Σ_q (−1)^q t^{r−q} p_{t_q}`
/// against the invariant definition, at a phase point.
pub fn l_closed_form_residual(se: &StructureEval, t: f64, pp: &PhasePoint) -> f64 {
    let v = killing_vector_v(se, t);
    let mut got = 0.0;
    for (j, vj) in v.iter().enumerate() {
        got += vj.value() * pp.p[j];
    }
    let mut blockfac = 1.0;
    for b in &se.blocks {
        blockfac *= (t - b.c).powi((b.m / 2) as i32);
    }
    let mut want = 0.0;
    for q in 1..=se.r {
        let sign = if q % 2 == 0 { 1.0 } else { -1.0 };
        want += sign * t.powi((se.r - q) as i32) * pp.p[se.r + q - 1];
    }
    want *= blockfac;
    (got - want).abs() / want.abs().max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::structures::{builtin, liouville2d};

    fn phase(rng: &mut Rng, box_: &[(f64, f64)]) -> PhasePoint {
        let x = rng.point_in_box(box_, 0.05);
        let p: Vec<f64> = (0..x.len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        PhasePoint { x, p }
    }

    #[test]
    fn sqrtdet_factor_examples() {
        let s = builtin("dim4_two_eigen").unwrap();
        let se = s.eval(&[2.5, 0.5, 0.0, 0.0], 3).unwrap();
        let me = ModelEval::CProjective(se);
        assert!((sqrtdet_factor(&me, 10.0).value() - 71.25).abs() < 1e-12);
        // at t = rho_1 the factor vanishes with t-derivative rho_1 - rho_2
        assert!(sqrtdet_factor(&me, 2.5).value().abs() < 1e-12);
        let h = 1e-6;
        let dt = (sqrtdet_factor(&me, 2.5 + h).value() - sqrtdet_factor(&me, 2.5 - h).value())
            / (2.0 * h);
        assert!((dt - 2.0).abs() < 1e-6, "{dt}");
        // between the eigenvalues the signed root is negative
        assert!((sqrtdet_factor(&me, 1.5).value() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_constant_eigenvalue_family() {
        // A = c Id on flat space: sqrt det(t Id - A) = (t - c)^{dim/2} and
        // K(t) = (t - c)^{dim/2 - 1} g^{-1}
        use crate::geom::jmat_identity;
        use crate::structures::EigenJet;
        let ctx = JetCtx::new(4, 2);
        let geom = crate::geom::GeomAt::new(jmat_identity(4, ctx)).unwrap();
        let mut a = jmat_zero(4, ctx);
        for i in 0..4 {
            a[i][i] = Jet::constant(ctx, 2.0);
        }
        let pe = ProjectiveEval {
            x: vec![0.0; 4],
            dim: 4,
            geom,
            a,
            eigs: vec![EigenJet { value: Jet::constant(ctx, 2.0), mult: 2, constant: true }],
        };
        // modelled with exponent = mult: choose mult = 2 so e = 2 in the
        // projective reading, i.e. det factor (t-2)^2, K = (t-2) Id
        let me = ModelEval::Projective(pe);
        let k = killing_tensor_k(&me, 10.0).unwrap();
        for i in 0..4 {
            assert!((k[i][i].value() - 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn killing_tensor_leading_term_and_interp() {
        let s = builtin("dim4_two_eigen").unwrap();
        let se = s.eval(&[2.4, 0.6, 0.2, -0.1], 3).unwrap();
        let me = ModelEval::CProjective(se);
        let coeffs = killing_coeffs(&me).unwrap();
        assert_eq!(coeffs.len(), 2); // degree n-1 = 1
        for a in 0..4 {
            for b in 0..4 {
                let want = me.geom().metric.ginv[a][b].value();
                assert!(
                    (coeffs[1][a][b].value() - want).abs() < 1e-9 * (1.0 + want.abs()),
                    "leading coefficient must be the inverse metric"
                );
            }
        }
        let k_direct = killing_tensor_k(&me, 7.0).unwrap();
        let mut k_interp = jmat_zero(4, me.ctx());
        let mut tp = 1.0;
        for c in &coeffs {
            for a in 0..4 {
                for b in 0..4 {
                    k_interp[a][b] = k_interp[a][b].add(&c[a][b].scale(tp));
                }
            }
            tp *= 7.0;
        }
        for a in 0..4 {
            for b in 0..4 {
                let x = k_direct[a][b].value();
                let y = k_interp[a][b].value();
                assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()));
            }
        }
        // near-eigenvalue evaluation takes the coefficient path and stays finite
        let k_near = killing_tensor_k(&me, 2.4 + 1e-9).unwrap();
        assert!(k_near[0][0].value().is_finite());
    }

    #[test]
    fn killing_equation_residuals() {
        let s = builtin("dim4_two_eigen").unwrap();
        let mut rng = Rng::seed_from(3);
        for _ in 0..5 {
            let x = rng.point_in_box(&s.sample_box, 0.05);
            let se = s.eval(&x, 3).unwrap();
            let me = ModelEval::CProjective(se);
            for t in [-1.0, 0.2, 1.5, 10.0] {
                let r = killing_equation_residual(&me, t).unwrap();
                assert!(r < 1e-8, "t={t}: {r}");
            }
        }
    }

    #[test]
    fn killing_vector_checks() {
        // flat_trivial: determinant factor constant on M, V = 0
        let s0 = builtin("flat_trivial").unwrap();
        let se0 = s0.eval(&[0.1, 0.2, -0.3, 0.4], 3).unwrap();
        for vj in &killing_vector_v(&se0, 0.7) {
            assert!(vj.value().abs() < 1e-14);
        }

        let s = builtin("dim4_two_eigen").unwrap();
        let mut rng = Rng::seed_from(4);
        for _ in 0..5 {
            let x = rng.point_in_box(&s.sample_box, 0.05);
            let se = s.eval(&x, 3).unwrap();
            let r = killing_vector_residuals(&se, 0.7);
            assert!(r.killing < 1e-9, "{r:?}");
            assert!(r.divergence < 1e-9, "{r:?}");
            assert!(r.off_span < 1e-9, "V must lie in the t-coordinate span: {r:?}");
        }
    }

    #[test]
    fn l_closed_form() {
        let mut rng = Rng::seed_from(8);
        for name in ["dim4_two_eigen", "dim6_one_block"] {
            let s = builtin(name).unwrap();
            for _ in 0..5 {
                let pp = phase(&mut rng, &s.sample_box);
                let se = s.eval(&pp.x, 3).unwrap();
                for t in [0.7, 2.0, 4.4] {
                    let r = l_closed_form_residual(&se, t, &pp);
                    assert!(r < 1e-9, "{name} t={t}: {r}");
                }
            }
        }
    }

    #[test]
    fn poisson_brackets_commute() {
        let s = builtin("dim4_two_eigen").unwrap();
        let mut rng = Rng::seed_from(9);
        for _ in 0..20 {
            let pp = phase(&mut rng, &s.sample_box);
            let se = s.eval(&pp.x, 2).unwrap();
            let me = ModelEval::CProjective(se.clone());
            let h = Observable::from_deg2(me.geom().metric.ginv.clone());
            assert_eq!(poisson_bracket(&h, &h, &pp), 0.0);
            for (v, w) in [(0.3, 4.0), (-1.0, 1.7)] {
                let iv = Observable::from_deg2(killing_tensor_k(&me, v).unwrap());
                let iw = Observable::from_deg2(killing_tensor_k(&me, w).unwrap());
                assert!(poisson_residual(&iv, &iw, &pp) < 1e-9);
                let lw = Observable::from_deg1(killing_vector_v(&se, w));
                assert!(poisson_residual(&iv, &lw, &pp) < 1e-9);
            }
        }
    }

    #[test]
    fn projective_killing_family() {
        let s = liouville2d();
        let mut rng = Rng::seed_from(10);
        for _ in 0..10 {
            let pp = phase(&mut rng, &s.sample_box);
            let pe = s.eval(&pp.x, 2).unwrap();
            let me = ModelEval::Projective(pe);
            let coeffs = killing_coeffs(&me).unwrap();
            assert_eq!(coeffs.len(), 2);
            for a in 0..2 {
                for b in 0..2 {
                    let want = me.geom().metric.ginv[a][b].value();
                    assert!((coeffs[1][a][b].value() - want).abs() < 1e-9 * (1.0 + want.abs()));
                }
            }
            for (v, w) in [(0.3, 4.0), (1.5, -0.4)] {
                let iv = Observable::from_deg2(killing_tensor_k(&me, v).unwrap());
                let iw = Observable::from_deg2(killing_tensor_k(&me, w).unwrap());
                assert!(poisson_residual(&iv, &iw, &pp) < 1e-9);
            }
        }
    }

    #[test]
    fn potentials_lagrange_form_and_brackets() {
        let s = builtin("dim4_two_eigen").unwrap();
        let se = s.eval(&[2.5, 0.5, 0.1, -0.2], 3).unwrap();
        // two eigenvalues: U(t) = ((t - rho2) f1 - (t - rho1) f2)/(rho1 - rho2)
        let choice = PotentialChoice::rho_power(&se, 2);
        let t = 1.3;
        let u = potential_u(&se, &choice, t).unwrap();
        let (r1, r2) = (2.5, 0.5);
        let want = ((t - r2) * r1 * r1 - (t - r1) * r2 * r2) / (r1 - r2);
        assert!((u.value() - want).abs() < 1e-12);

        let z = potential_u(&se, &PotentialChoice::zero(&se), t).unwrap();
        assert_eq!(z.value(), 0.0);

        let res = potential_condition_residuals(&se, &choice).unwrap();
        assert!(res.k_du_symmetry < 1e-9, "{res:?}");
        assert!(res.eigenform < 1e-9, "{res:?}");
        assert!(res.du_of_v < 1e-9, "{res:?}");

        // constant f_i trivially satisfy every condition
        let const_choice = PotentialChoice::parse(&se, &["2".into(), "-1".into()]).unwrap();
        let cres = potential_condition_residuals(&se, &const_choice).unwrap();
        assert!(cres.k_du_symmetry < 1e-12 && cres.eigenform < 1e-12 && cres.du_of_v < 1e-12);

        // negative control: f_1 = x2 violates the admissibility conditions
        let bad = PotentialChoice::parse(&se, &["x2".to_string(), "rho^2".to_string()]).unwrap();
        let res = potential_condition_residuals(&se, &bad).unwrap();
        assert!(res.du_of_v > 1e-3 || res.eigenform > 1e-3, "{res:?}");

        let mut rng = Rng::seed_from(21);
        for _ in 0..10 {
            let pp = phase(&mut rng, &s.sample_box);
            let se = s.eval(&pp.x, 2).unwrap();
            let me = ModelEval::CProjective(se.clone());
            let choice = PotentialChoice::rho_power(&se, 2);
            for (v, w) in [(0.3, 4.0), (1.2, -0.8)] {
                let qv = Observable::from_deg2(killing_tensor_k(&me, v).unwrap())
                    .with_potential(potential_u(&se, &choice, v).unwrap());
                let qw = Observable::from_deg2(killing_tensor_k(&me, w).unwrap())
                    .with_potential(potential_u(&se, &choice, w).unwrap());
                assert!(poisson_residual(&qv, &qw, &pp) < 1e-9);
                let lw = Observable::from_deg1(killing_vector_v(&se, w));
                assert!(poisson_residual(&qv, &lw, &pp) < 1e-9);
            }
        }
    }

    #[test]
    fn coefficient_observables() {
        let s = builtin("dim4_two_eigen").unwrap();
        let mut rng = Rng::seed_from(22);
        let pp = phase(&mut rng, &s.sample_box);
        let se = s.eval(&pp.x, 2).unwrap();
        let me = ModelEval::CProjective(se.clone());
        let ic = i_coefficients(&me).unwrap();
        let lc = l_coefficients(&se);
        assert_eq!(ic.len(), 2);
        assert_eq!(lc.len(), 2);
        for a in &ic {
            for b in &ic {
                assert!(poisson_residual(a, b, &pp) < 1e-9);
            }
            for b in &lc {
                assert!(poisson_residual(a, b, &pp) < 1e-9);
            }
        }
        let choice = PotentialChoice::rho_power(&se, 2);
        let uc = u_coefficients(&se, &choice).unwrap();
        let q0 = ic[0].clone().with_potential(uc[0].clone());
        let q1 = ic[1].clone().with_potential(uc[1].clone());
        assert!(poisson_residual(&q0, &q1, &pp) < 1e-9);
    }
}
