//! The quantum layer: operators built from momentum polynomials by the
//! symmetric-ordering rules
//!
//! ```text
//! P_0 ↦ P_0·              (multiplication)
//! P_1 ↦ (i/2)(V^j ∘ ∇_j + ∇_j ∘ V^j)
//! P_2 ↦ −∇_j ∘ K^{jk} ∘ ∇_k
//! P_3 ↦ −(i/2)(∇_j ∘ T^{jkl} ∘ ∇_k ∘ ∇_l + ∇_j ∘ ∇_k ∘ T^{jkl} ∘ ∇_l)
//! ```
//!
//! Operators act on jet-evaluable scalars: applying a degree-`d` part to a
//! function known as an order-`p` jet yields an order-`p−d` jet, so nested
//! applications (commutators) are plain jet algebra — the inner operator's
//! output is itself a jet that the outer operator consumes.
//!
//! The master commutator identity for two quadratic observables,
//!
//! ```text
//! [P̂, Q̂] = i \hat{{P,Q}} + (2/3)(∇_j B^{jk}) ∇_k,
//! ```
//!
//! pins every sign convention in this crate. `B` is the antisymmetric
//! obstruction tensor; its divergence contracts the FIRST slot.

use crate::geom::{jmat_zero, CurvatureEval, GeomAt, J3, JMat, JVec};
use crate::integrals::{
    killing_tensor_k, killing_vector_v, potential_u, schouten_bracket_22, IntegralsError,
    ModelEval, PotentialChoice,
};
use crate::jet::{CJet, Jet, JetCtx};
use crate::rng::Rng;
use crate::structures::StructureEval;

/// Composition plan realizing the quantization of a degree ≤ 3 observable.
/// The coefficient tensors are jets at a fixed point; degree-4 or higher
/// parts are unrepresentable by construction.
#[derive(Debug, Clone, Default)]
pub struct DiffOperator {
    pub deg0: Option<Jet>,
    pub deg1: Option<JVec>,
    pub deg2: Option<JMat>,
    pub deg3: Option<J3>,
}

impl DiffOperator {
    pub fn multiplication(u: Jet) -> DiffOperator {
        DiffOperator { deg0: Some(u), ..Default::default() }
    }

    pub fn from_deg2(k: JMat) -> DiffOperator {
        DiffOperator { deg2: Some(k), ..Default::default() }
    }
}

/// Map an observable to its operator under the symmetric-ordering rules.
pub fn quantize(obs: &crate::integrals::Observable) -> DiffOperator {
    DiffOperator {
        deg0: obs.potential.clone(),
        deg1: obs.deg1.clone(),
        deg2: obs.deg2.clone(),
        deg3: obs.deg3.clone(),
    }
}

fn apply_deg2_real(geom: &GeomAt, k: &JMat, f: &Jet) -> Jet {
    let d = geom.dim;
    let df: Vec<Jet> = (0..d).map(|a| f.deriv(a)).collect();
    let order = df[0].ctx().order;
    let w: JVec = (0..d)
        .map(|j| {
            let mut acc = Jet::zero(df[0].ctx());
            for kk in 0..d {
                acc = acc.add(&k[j][kk].truncated(order.min(k[j][kk].ctx().order)).mul(&df[kk]));
            }
            acc
        })
        .collect();
    geom.div_vec(&w).neg()
}

/// `r(f) = V^j ∂_j f + (1/2)(∇_j V^j) f`; the degree-1 operator is `i r(f)`.
fn apply_deg1_real(geom: &GeomAt, v: &JVec, f: &Jet) -> Jet {
    let d = geom.dim;
    let div = geom.div_vec(v);
    let order = div.ctx().order.min(f.ctx().order.saturating_sub(1));
    let mut acc = div.truncated(order).mul(&f.truncated(order)).scale(0.5);
    for j in 0..d {
        acc = acc.add(&v[j].truncated(order).mul(&f.deriv(j).truncated(order)));
    }
    acc
}

/// `w(f) = (1/2)(∇_j Z^j + ∇_j ∇_k S^{jk})` with `Z^j = T^{jkl} f_{,kl}` and
/// `S^{jk} = T^{jkl} ∂_l f`; the degree-3 operator is `−i w(f)`.
fn apply_deg3_real(geom: &GeomAt, t: &J3, f: &Jet) -> Jet {
    let d = geom.dim;
    let hess = geom.hessian(f);
    let ho = hess[0][0].ctx().order.min(t[0][0][0].ctx().order);
    let z: JVec = (0..d)
        .map(|j| {
            let mut acc = Jet::zero(hess[0][0].ctx());
            for k in 0..d {
                for l in 0..d {
                    acc = acc.add(&t[j][k][l].truncated(ho).mul(&hess[k][l]));
                }
            }
            acc
        })
        .collect();
    let t1 = geom.div_vec(&z);

    let df: Vec<Jet> = (0..d).map(|l| f.deriv(l)).collect();
    let so = df[0].ctx().order.min(t[0][0][0].ctx().order);
    let s: JMat = (0..d)
        .map(|j| {
            (0..d)
                .map(|k| {
                    let mut acc = Jet::zero(df[0].ctx());
                    for l in 0..d {
                        acc = acc.add(&t[j][k][l].truncated(so).mul(&df[l]));
                    }
                    acc
                })
                .collect()
        })
        .collect();
    // S is symmetric, so the contraction slot of this divergence is irrelevant
    let y = geom.div_20(&s);
    let t2 = geom.div_vec(&y);
    t1.add(&t2).scale(0.5)
}

/// Apply the operator to a complex jet-evaluable function at the point.
pub fn apply(op: &DiffOperator, geom: &GeomAt, f: &CJet) -> CJet {
    let mut parts: Vec<CJet> = Vec::new();
    if let Some(u) = &op.deg0 {
        let order = u.ctx().order.min(f.re.ctx().order);
        parts.push(CJet {
            re: u.truncated(order).mul(&f.re.truncated(order)),
            im: u.truncated(order).mul(&f.im.truncated(order)),
        });
    }
    if let Some(v) = &op.deg1 {
        let rre = apply_deg1_real(geom, v, &f.re);
        let rim = apply_deg1_real(geom, v, &f.im);
        parts.push(CJet { re: rre, im: rim }.mul_i());
    }
    if let Some(k) = &op.deg2 {
        parts.push(CJet {
            re: apply_deg2_real(geom, k, &f.re),
            im: apply_deg2_real(geom, k, &f.im),
        });
    }
    if let Some(t) = &op.deg3 {
        let wre = apply_deg3_real(geom, t, &f.re);
        let wim = apply_deg3_real(geom, t, &f.im);
        parts.push(CJet { re: wre, im: wim }.mul_i().scale(-1.0));
    }
    let mut acc = parts.pop().expect("operator has at least one part");
    for p in parts {
        acc = acc.add(&p);
    }
    acc
}

/// `(op1 op2 − op2 op1) f` via nested jet application.
pub fn commutator_apply(op1: &DiffOperator, op2: &DiffOperator, geom: &GeomAt, f: &CJet) -> CJet {
    let a = apply(op1, geom, &apply(op2, geom, f));
    let b = apply(op2, geom, &apply(op1, geom, f));
    a.sub(&b)
}

// ---------------------------------------------------------------------------
// B tensor
// ---------------------------------------------------------------------------

/// The antisymmetric obstruction tensor of the commutator formula and its
/// divergence.
#[derive(Debug, Clone)]
pub struct BTensorEval {
    pub b: JMat,
    pub div: JVec,
}

impl BTensorEval {
    pub fn max_b(&self) -> f64 {
        self.b.iter().flat_map(|r| r.iter()).fold(0.0f64, |m, j| m.max(j.value().abs()))
    }

    pub fn max_div(&self) -> f64 {
        self.div.iter().fold(0.0f64, |m, j| m.max(j.value().abs()))
    }
}

/// `B^{jk} = P^{l[j} ∇_l ∇_m Q^{k]m} − (P↔Q) + P^{l[j} R^{k]}_{mnl} Q^{mn} − (P↔Q)
///           − ∇_l P^{m[j} ∇_m Q^{k]l} − P^{l[j} Ric_{lm} Q^{k]m}`.
pub fn b_tensor(geom: &GeomAt, curv: &CurvatureEval, p: &JMat, q: &JMat) -> BTensorEval {
    let d = geom.dim;
    let dp = geom.cov_deriv_20(p);
    let dq = geom.cov_deriv_20(q);
    let div_p = geom.div_20(p);
    let div_q = geom.div_20(q);
    let ddiv_p = geom.cov_deriv_vec(&div_p); // [k][l] = ∇_l (div P)^k
    let ddiv_q = geom.cov_deriv_vec(&div_q);
    let ctx = ddiv_q[0][0].ctx();
    let ord = ctx.order;

    let contract_ddiv = |m: &JMat, dd: &JMat, j: usize, k: usize| {
        // m^{lj} ∇_l (div)^k
        let mut acc = Jet::zero(ctx);
        for l in 0..d {
            acc = acc.add(&m[l][j].truncated(ord).mul(&dd[k][l]));
        }
        acc
    };
    let contract_riem = |m: &JMat, n: &JMat, j: usize, k: usize| {
        // m^{lj} R^k_{abl} n^{ab}
        let mut acc = Jet::zero(ctx);
        for l in 0..d {
            for a in 0..d {
                for b in 0..d {
                    let r = &curv.riemann[k][a][b][l];
                    if r.max_abs_coeff() == 0.0 {
                        continue;
                    }
                    acc = acc.add(
                        &m[l][j]
                            .truncated(ord)
                            .mul(&r.truncated(ord))
                            .mul(&n[a][b].truncated(ord)),
                    );
                }
            }
        }
        acc
    };
    let contract_grad = |j: usize, k: usize| {
        // ∇_l P^{mj} ∇_m Q^{kl}
        let mut acc = Jet::zero(ctx);
        for l in 0..d {
            for m in 0..d {
                acc = acc.add(&dp[m][j][l].truncated(ord).mul(&dq[k][l][m].truncated(ord)));
            }
        }
        acc
    };
    let contract_ricci = |j: usize, k: usize| {
        // P^{lj} Ric_{lm} Q^{km}
        let mut acc = Jet::zero(ctx);
        for l in 0..d {
            for m in 0..d {
                let ric = &curv.ricci[l][m];
                if ric.max_abs_coeff() == 0.0 {
                    continue;
                }
                acc = acc.add(
                    &p[l][j]
                        .truncated(ord)
                        .mul(&ric.truncated(ord))
                        .mul(&q[k][m].truncated(ord)),
                );
            }
        }
        acc
    };

    let mut b = jmat_zero(d, ctx);
    for j in 0..d {
        for k in j + 1..d {
            let x = contract_ddiv(p, &ddiv_q, j, k).sub(&contract_ddiv(p, &ddiv_q, k, j));
            let xq = contract_ddiv(q, &ddiv_p, j, k).sub(&contract_ddiv(q, &ddiv_p, k, j));
            let t1 = x.sub(&xq).scale(0.5);
            let z = contract_riem(p, q, j, k).sub(&contract_riem(p, q, k, j));
            let zq = contract_riem(q, p, j, k).sub(&contract_riem(q, p, k, j));
            let t2 = z.sub(&zq).scale(0.5);
            let y = contract_grad(j, k).sub(&contract_grad(k, j));
            let t3 = y.scale(0.5);
            let w = contract_ricci(j, k).sub(&contract_ricci(k, j));
            let t4 = w.scale(0.5);
            let val = t1.add(&t2).sub(&t3).sub(&t4);
            b[j][k] = val.clone();
            b[k][j] = val.neg();
        }
    }
    let div = geom.div_20(&b);
    BTensorEval { b, div }
}

/// Reduced B (the two covariant-derivative term groups only, curvature terms
/// dropped); its divergence vanishing is the final step of the commutation
/// proof.
pub fn b_tensor_reduced(geom: &GeomAt, p: &JMat, q: &JMat) -> BTensorEval {
    let d = geom.dim;
    let dp = geom.cov_deriv_20(p);
    let dq = geom.cov_deriv_20(q);
    let ddiv_p = geom.cov_deriv_vec(&geom.div_20(p));
    let ddiv_q = geom.cov_deriv_vec(&geom.div_20(q));
    let ctx = ddiv_q[0][0].ctx();
    let ord = ctx.order;
    let mut b = jmat_zero(d, ctx);
    for j in 0..d {
        for k in j + 1..d {
            let term = |jj: usize, kk: usize| {
                let mut acc = Jet::zero(ctx);
                for l in 0..d {
                    acc = acc.add(&p[l][jj].truncated(ord).mul(&ddiv_q[kk][l]));
                    acc = acc.sub(&q[l][jj].truncated(ord).mul(&ddiv_p[kk][l]));
                }
                acc
            };
            let t1 = term(j, k).sub(&term(k, j)).scale(0.5);
            let grad = |jj: usize, kk: usize| {
                let mut acc = Jet::zero(ctx);
                for l in 0..d {
                    for m in 0..d {
                        acc = acc
                            .add(&dp[m][jj][l].truncated(ord).mul(&dq[kk][l][m].truncated(ord)));
                    }
                }
                acc
            };
            let t3 = grad(j, k).sub(&grad(k, j)).scale(0.5);
            let val = t1.sub(&t3);
            b[j][k] = val.clone();
            b[k][j] = val.neg();
        }
    }
    let div = geom.div_20(&b);
    BTensorEval { b, div }
}

// ---------------------------------------------------------------------------
// identity checks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct MasterIdentityResidual {
    /// `|[P̂,Q̂]f − i \hat{{P,Q}} f − (2/3)(∇_j B^{jk}) ∂_k f|`, scale-normalized.
    pub residual: f64,
    /// `|\hat{{P,Q}} f|` alone, scale-normalized (for a commuting pair this is
    /// the operator-side face of the classical bracket statement).
    pub bracket_term: f64,
}

/// Check the master commutator identity for two quadratic observables given
/// by coefficient jets (order ≥ 3; the test function at order ≥ 4).
pub fn commutator_formula_check(
    geom: &GeomAt,
    curv: &CurvatureEval,
    p: &JMat,
    q: &JMat,
    f: &CJet,
) -> MasterIdentityResidual {
    let op_p = DiffOperator::from_deg2(p.clone());
    let op_q = DiffOperator::from_deg2(q.clone());
    let a1 = apply(&op_p, geom, &apply(&op_q, geom, f));
    let a2 = apply(&op_q, geom, &apply(&op_p, geom, f));
    let lhs = a1.sub(&a2);

    let t = schouten_bracket_22(p, q);
    let op_t = DiffOperator { deg3: Some(t), ..Default::default() };
    let pb_term = apply(&op_t, geom, f).mul_i();

    let bt = b_tensor(geom, curv, p, q);
    let d = geom.dim;
    let mut bterm = CJet::zero(JetCtx::new(d, 0));
    for k in 0..d {
        let dfk = f.deriv(k);
        let contrib = CJet {
            re: dfk.re.truncated(0).mul(&bt.div[k].truncated(0)),
            im: dfk.im.truncated(0).mul(&bt.div[k].truncated(0)),
        };
        bterm = bterm.add(&contrib);
    }
    bterm = bterm.scale(2.0 / 3.0);

    let rhs = pb_term.add(&bterm);
    let diff = lhs.sub(&rhs);
    let scale = a1.value_abs().max(a2.value_abs()).max(1e-30);
    MasterIdentityResidual {
        residual: diff.value_abs() / scale,
        bracket_term: pb_term.value_abs() / scale,
    }
}

/// Largest coefficient magnitude across the operator's parts.
fn op_norm(op: &DiffOperator) -> f64 {
    let mut m = 0.0f64;
    if let Some(u) = &op.deg0 {
        m = m.max(u.value().abs());
    }
    if let Some(v) = &op.deg1 {
        m = v.iter().fold(m, |m, j| m.max(j.value().abs()));
    }
    if let Some(k) = &op.deg2 {
        m = k.iter().flat_map(|r| r.iter()).fold(m, |m, j| m.max(j.value().abs()));
    }
    if let Some(t) = &op.deg3 {
        m = t
            .iter()
            .flat_map(|r| r.iter())
            .flat_map(|r| r.iter())
            .fold(m, |m, j| m.max(j.value().abs()));
    }
    m
}

/// Quantum commutator residual `|[op1, op2] f| / scale`. The scale is the
/// larger of the two nested applications, floored by the structural magnitude
/// `‖op1‖ ‖op2‖ ‖f‖` so that test functions annihilated by both orderings do
/// not produce 0/0 artifacts.
pub fn commutator_residual(
    op1: &DiffOperator,
    op2: &DiffOperator,
    geom: &GeomAt,
    f: &CJet,
) -> f64 {
    let a = apply(op1, geom, &apply(op2, geom, f));
    let b = apply(op2, geom, &apply(op1, geom, f));
    let fnorm = f.re.max_abs_coeff().max(f.im.max_abs_coeff());
    let floor = op_norm(op1) * op_norm(op2) * fnorm;
    let scale = a.value_abs().max(b.value_abs()).max(floor).max(1e-30);
    a.sub(&b).value_abs() / scale
}

#[derive(Debug, Clone, Copy)]
pub struct MixedIlResiduals {
    /// `|[Î(t), L̂(s)] f|`, scale-normalized.
    pub commutator: f64,
    /// Lie derivative `(L_{V(s)} K(t))^{jk}`, max component, scale-normalized.
    pub lie_derivative: f64,
    /// `|∇_j V(s)^j|`.
    pub divergence: f64,
}

/// Residuals behind the `[Î(t), L̂(s)] = 0` statement: the commutator itself,
/// the Lie derivative of `K(t)` along `V(s)`, and the divergence of `V(s)`.
/// `v_perturb` adds `eps·x1` to the first t-component of `V` for negative
/// controls.
pub fn mixed_il_commutator_check(
    se: &StructureEval,
    t: f64,
    s: f64,
    f: &CJet,
    v_perturb: Option<f64>,
) -> Result<MixedIlResiduals, IntegralsError> {
    let me = ModelEval::CProjective(se.clone());
    let kt = killing_tensor_k(&me, t)?;
    let mut vs = killing_vector_v(se, s);
    if let Some(eps) = v_perturb {
        let ctx = se.lambda.ctx();
        let x1 = Jet::lift_var(ctx, 0, se.x[0]).expect("coordinate");
        let slot = se.r.min(vs.len() - 1);
        vs[slot] = vs[slot].add(&x1.scale(eps).truncated(vs[slot].ctx().order));
    }
    let geom = &se.geom;
    let op_i = DiffOperator::from_deg2(kt.clone());
    let op_l = DiffOperator { deg1: Some(vs.clone()), ..Default::default() };
    let commutator = commutator_residual(&op_i, &op_l, geom, f);

    // (L_V K)^{jk} = V^i ∂_i K^{jk} − (∂_i V^j) K^{ik} − (∂_i V^k) K^{ji}
    let d = se.dim;
    let mut lie = 0.0f64;
    let mut scale = 1.0f64;
    for j in 0..d {
        for k in 0..d {
            let mut acc = 0.0;
            for i in 0..d {
                let adv = vs[i].value() * kt[j][k].deriv(i).value();
                acc += adv;
                acc -= vs[j].deriv(i).value() * kt[i][k].value();
                acc -= vs[k].deriv(i).value() * kt[j][i].value();
                scale = scale.max(adv.abs());
            }
            lie = lie.max(acc.abs());
        }
    }
    let div = se.geom.div_vec(&vs).value().abs() / scale;
    Ok(MixedIlResiduals { commutator, lie_derivative: lie / scale, divergence: div })
}

#[derive(Debug, Clone, Copy)]
pub struct LemmaDiagnostics {
    /// `R^r_{ijk} A_{rl} S^{ij} − R^r_{ijl} A_{rk} S^{ij}` with `S = K(w)`.
    pub endomorphism_selfadjoint: f64,
    /// `K(v)^{l[j} R^{k]}_{mnl} K(w)^{mn}` (vanishes for compatible pairs).
    pub curvature_term: f64,
    /// Commutator of `(v Id − A)^{-1}` with the Ricci endomorphism.
    pub ricci_commutes: f64,
    /// Divergence of the reduced B tensor.
    pub reduced_divergence: f64,
}

/// The linear-algebra identities behind the commutation proof, as residuals.
/// `s_perturb` replaces `S = K(w)` by a non-symmetric tampering for negative
/// controls.
pub fn lemma_diagnostics(
    se: &StructureEval,
    v: f64,
    w: f64,
    s_perturb: Option<f64>,
) -> Result<LemmaDiagnostics, IntegralsError> {
    let me = ModelEval::CProjective(se.clone());
    let kv = killing_tensor_k(&me, v)?;
    let mut kw = killing_tensor_k(&me, w)?;
    if let Some(eps) = s_perturb {
        kw[0][1] = kw[0][1].add_scalar(eps); // breaks the symmetry of S
    }
    let geom = &se.geom;
    let curv = geom.curvature()?;
    let d = se.dim;

    // R^r_{ijk} A_{rl} S^{ij} must be symmetric in (k,l)
    let mut endo = 0.0f64;
    let mut endo_scale = 1.0f64;
    let mut m_kl = vec![vec![0.0; d]; d];
    for k in 0..d {
        for l in 0..d {
            let mut acc = 0.0;
            for r in 0..d {
                for i in 0..d {
                    for j in 0..d {
                        acc += curv.riemann[r][i][j][k].value()
                            * se.a_low[r][l].value()
                            * kw[i][j].value();
                    }
                }
            }
            m_kl[k][l] = acc;
            endo_scale = endo_scale.max(acc.abs());
        }
    }
    for k in 0..d {
        for l in 0..d {
            endo = endo.max((m_kl[k][l] - m_kl[l][k]).abs());
        }
    }
    let endomorphism_selfadjoint = endo / endo_scale;

    // K(v)^{l[j} R^{k]}_{mnl} K(w)^{mn}
    let mut curvature_term = 0.0f64;
    let mut curv_scale = 1.0f64;
    for j in 0..d {
        for k in 0..d {
            let mut term = |jj: usize, kk: usize| {
                let mut acc = 0.0;
                for l in 0..d {
                    for m in 0..d {
                        for n in 0..d {
                            let prod = kv[l][jj].value()
                                * curv.riemann[kk][m][n][l].value()
                                * kw[m][n].value();
                            acc += prod;
                            curv_scale = curv_scale.max(prod.abs());
                        }
                    }
                }
                acc
            };
            let anti = 0.5 * (term(j, k) - term(k, j));
            curvature_term = curvature_term.max(anti.abs());
        }
    }
    let curvature_term = curvature_term / curv_scale;

    // (v Id − A)^{-1} commutes with the Ricci endomorphism
    let ctx = se.lambda.ctx();
    let mut m = jmat_zero(d, ctx);
    for i in 0..d {
        for j in 0..d {
            m[i][j] = if i == j {
                Jet::constant(ctx, v).sub(&se.a[i][j])
            } else {
                se.a[i][j].neg()
            };
        }
    }
    let minv = crate::geom::invert_matrix_jets(&m)?;
    let mut ric_endo = vec![vec![0.0; d]; d];
    for k in 0..d {
        for l in 0..d {
            let mut acc = 0.0;
            for s in 0..d {
                acc += geom.metric.ginv[k][s].value() * curv.ricci[s][l].value();
            }
            ric_endo[k][l] = acc;
        }
    }
    let mut ricci_commutes = 0.0f64;
    let mut ric_scale = 1.0f64;
    for k in 0..d {
        for l in 0..d {
            let mut ab = 0.0;
            let mut ba = 0.0;
            for s in 0..d {
                ab += minv[k][s].value() * ric_endo[s][l];
                ba += ric_endo[k][s] * minv[s][l].value();
            }
            ric_scale = ric_scale.max(ab.abs()).max(ba.abs());
            ricci_commutes = ricci_commutes.max((ab - ba).abs());
        }
    }
    let ricci_commutes = ricci_commutes / ric_scale;

    let red = b_tensor_reduced(geom, &kv, &kw);
    let red_scale = red
        .b
        .iter()
        .flat_map(|r| r.iter())
        .fold(1.0f64, |m, j| m.max(j.value().abs()));
    let reduced_divergence = red.max_div() / red_scale;

    Ok(LemmaDiagnostics {
        endomorphism_selfadjoint,
        curvature_term,
        ricci_commutes,
        reduced_divergence,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct PotentialOperatorResiduals {
    pub qq: f64,
    pub ql: f64,
    pub ll: f64,
}

/// Commutators of the potential-extended operators `Q̂(s) = Î(s) + Û(s)` and
/// the Killing-vector operators `L̂(t)`.
pub fn potential_operator_checks(
    se: &StructureEval,
    choice: &PotentialChoice,
    s: f64,
    t: f64,
    f: &CJet,
) -> Result<PotentialOperatorResiduals, IntegralsError> {
    let me = ModelEval::CProjective(se.clone());
    let geom = &se.geom;
    let q_op = |tt: f64| -> Result<DiffOperator, IntegralsError> {
        Ok(DiffOperator {
            deg0: Some(potential_u(se, choice, tt)?),
            deg2: Some(killing_tensor_k(&me, tt)?),
            ..Default::default()
        })
    };
    let l_op =
        |tt: f64| DiffOperator { deg1: Some(killing_vector_v(se, tt)), ..Default::default() };
    let qs = q_op(s)?;
    let qt = q_op(t)?;
    let ls = l_op(s);
    let lt = l_op(t);
    Ok(PotentialOperatorResiduals {
        qq: commutator_residual(&qs, &qt, geom, f),
        ql: commutator_residual(&qs, &lt, geom, f),
        ll: commutator_residual(&ls, &lt, geom, f),
    })
}

// ---------------------------------------------------------------------------
// test functions and fixtures
// ---------------------------------------------------------------------------

/// One test function of the documented battery, as a complex pair of
/// expressions over the structure's coordinates.
#[derive(Debug, Clone)]
pub struct TestFunction {
    pub label: String,
    pub re: crate::expr::ExprField,
    pub im: Option<crate::expr::ExprField>,
}

impl TestFunction {
    pub fn eval(&self, x: &[f64], ctx: JetCtx) -> CJet {
        let re = self.re.eval(x, ctx).expect("test function evaluates");
        let im = match &self.im {
            Some(f) => f.eval(x, ctx).expect("test function evaluates"),
            None => Jet::zero(ctx),
        };
        CJet { re, im }
    }
}

/// The documented battery: coordinate monomials to degree 3, `exp(a·x)`,
/// `sin(a·x) cos(b·x)`, and a complex `exp(−i ω·t)`-phase times a smooth
/// radial factor. Coefficients are seeded.
pub fn test_battery(coord_names: &[String], r: usize, seed: u64) -> Vec<TestFunction> {
    let mut rng = Rng::seed_from(seed);
    let vars: Vec<String> = coord_names.to_vec();
    let parse = |src: &str| crate::expr::ExprField::parse(src, &vars).expect("battery parses");
    let mut out = Vec::new();

    let n = coord_names.len();
    let mono1 = coord_names[0].clone();
    let mono2 = format!("{}*{}", coord_names[0], coord_names[n - 1]);
    let mono3 = format!("{}^2*{}", coord_names[n / 2], coord_names[0]);
    for (label, src) in [("mono1", mono1), ("mono2", mono2), ("mono3", mono3)] {
        out.push(TestFunction { label: label.into(), re: parse(&src), im: None });
    }

    let lin = |rng: &mut Rng| {
        coord_names
            .iter()
            .map(|c| format!("{:.4}*{}", rng.uniform(-0.5, 0.5), c))
            .collect::<Vec<_>>()
            .join(" + ")
    };
    let l1 = lin(&mut rng);
    let l2 = lin(&mut rng);
    let l3 = lin(&mut rng);
    out.push(TestFunction { label: "exp_lin".into(), re: parse(&format!("exp({l1})")), im: None });
    out.push(TestFunction {
        label: "sin_cos".into(),
        re: parse(&format!("sin({l2}) * cos({l3})")),
        im: None,
    });

    // exp(-i omega . t) times a smooth radial factor in the other coordinates
    if r > 0 {
        let phase = (0..r)
            .map(|q| format!("{:.4}*t{}", rng.uniform(0.3, 1.2), q + 1))
            .collect::<Vec<_>>()
            .join(" + ");
        let radial_terms = coord_names
            .iter()
            .filter(|c| !c.starts_with('t'))
            .map(|c| format!("{c}^2"))
            .collect::<Vec<_>>()
            .join(" + ");
        let radial = format!("exp(-0.2*({radial_terms}))");
        out.push(TestFunction {
            label: "phase_radial".into(),
            re: parse(&format!("cos({phase}) * {radial}")),
            im: Some(parse(&format!("-sin({phase}) * {radial}"))),
        });
    }
    out
}

/// Unit 2-sphere geometry at a point, for convention-pinning checks.
pub fn sphere_geom(x: &[f64], order: usize) -> GeomAt {
    let ctx = JetCtx::new(2, order);
    let th = Jet::lift_var(ctx, 0, x[0]).expect("coordinate");
    let mut g = jmat_zero(2, ctx);
    g[0][0] = Jet::constant(ctx, 1.0);
    g[1][1] = th.sin().mul(&th.sin());
    GeomAt::new(g).expect("sphere metric is invertible away from the poles")
}

/// Random symmetric quadratic observable with polynomial coefficient fields,
/// as jets at the point.
pub fn random_quadratic(rng: &mut Rng, x: &[f64], ctx: JetCtx) -> JMat {
    let d = ctx.dim;
    let lifted: Vec<Jet> = (0..d)
        .map(|a| Jet::lift_var(ctx, a, x[a]).expect("coordinate"))
        .collect();
    let mut m = jmat_zero(d, ctx);
    for i in 0..d {
        for j in i..d {
            let mut entry = Jet::constant(ctx, rng.uniform(-1.0, 1.0));
            for a in 0..d {
                entry = entry.add(&lifted[a].scale(rng.uniform(-0.5, 0.5)));
                for b in a..d {
                    let c = rng.uniform(-0.3, 0.3);
                    entry = entry.add(&lifted[a].mul(&lifted[b]).scale(c));
                }
            }
            m[i][j] = entry.clone();
            m[j][i] = entry;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::jmat_identity;
    use crate::integrals::Observable;
    use crate::structures::{builtin, liouville2d};

    fn flat_geom(dim: usize, order: usize) -> GeomAt {
        GeomAt::new(jmat_identity(dim, JetCtx::new(dim, order))).unwrap()
    }

    #[test]
    fn laplacian_on_flat_space() {
        // quantize(g) applied to x^2 + y^2 is -4
        let geom = flat_geom(2, 4);
        let ctx = JetCtx::new(2, 4);
        let x = Jet::lift_var(ctx, 0, 0.7).unwrap();
        let y = Jet::lift_var(ctx, 1, -0.3).unwrap();
        let f = CJet::from_re(x.mul(&x).add(&y.mul(&y)));
        let op = quantize(&Observable::from_deg2(geom.metric.ginv.clone()));
        let out = apply(&op, &geom, &f);
        assert!((out.re.value() + 4.0).abs() < 1e-13);
        assert!(out.im.value().abs() < 1e-14);

        let id = DiffOperator::multiplication(Jet::constant(ctx, 1.0));
        let out = apply(&id, &geom, &f);
        assert!((out.re.value() - f.re.value()).abs() < 1e-15);
    }

    #[test]
    fn sphere_laplacian_eigenfunction() {
        // -∇ g^{jk} ∇ applied to cos(theta) gives 2 cos(theta)
        let geom = sphere_geom(&[0.9, 0.4], 4);
        let ctx = JetCtx::new(2, 4);
        let f = CJet::from_re(Jet::lift_var(ctx, 0, 0.9).unwrap().cos());
        let op = DiffOperator::from_deg2(geom.metric.ginv.clone());
        let out = apply(&op, &geom, &f);
        assert!((out.re.value() - 2.0 * 0.9f64.cos()).abs() < 1e-11);
    }

    #[test]
    fn killing_vector_operator_forms_agree() {
        // for divergence-free V: (i/2)(V∇ + ∇V) f = i V^j ∂_j f
        let s = builtin("dim4_two_eigen").unwrap();
        let se = s.eval(&[2.6, 0.4, 0.2, -0.5], 4).unwrap();
        let v = killing_vector_v(&se, 0.7);
        let ctx = se.lambda.ctx();
        let f = CJet::from_re(
            Jet::lift_var(ctx, 0, 2.6)
                .unwrap()
                .mul(&Jet::lift_var(ctx, 2, 0.2).unwrap())
                .sin(),
        );
        let op = DiffOperator { deg1: Some(v.clone()), ..Default::default() };
        let a = apply(&op, &se.geom, &f);
        let mut direct = CJet::zero(ctx.lower(1));
        for j in 0..4 {
            let dfj = f.deriv(j);
            direct = direct.add(&CJet {
                re: dfj.re.mul(&v[j].truncated(3)),
                im: dfj.im.mul(&v[j].truncated(3)),
            });
        }
        let direct = direct.mul_i();
        assert!((a.value().0 - direct.value().0).abs() < 1e-10);
        assert!((a.value().1 - direct.value().1).abs() < 1e-10);
    }

    #[test]
    fn trivial_self_commutator() {
        let geom = flat_geom(2, 4);
        let ctx = JetCtx::new(2, 4);
        let f = CJet::from_re(
            Jet::lift_var(ctx, 0, 0.3)
                .unwrap()
                .mul(&Jet::lift_var(ctx, 1, 0.8).unwrap())
                .exp(),
        );
        let op = DiffOperator::from_deg2(geom.metric.ginv.clone());
        let c = commutator_apply(&op, &op, &geom, &f);
        assert_eq!(c.value_abs(), 0.0);
    }

    #[test]
    fn commutator_antisymmetry() {
        let s = builtin("dim4_two_eigen").unwrap();
        let se = s.eval(&[2.4, 0.7, 0.0, 0.3], 4).unwrap();
        let me = ModelEval::CProjective(se.clone());
        let ctx = se.lambda.ctx();
        let f = CJet::from_re(
            Jet::lift_var(ctx, 0, 2.4)
                .unwrap()
                .mul(&Jet::lift_var(ctx, 3, 0.3).unwrap()),
        );
        let op1 = DiffOperator::from_deg2(killing_tensor_k(&me, 0.3).unwrap());
        let op2 = DiffOperator::from_deg2(killing_tensor_k(&me, 4.0).unwrap());
        let ab = commutator_apply(&op1, &op2, &se.geom, &f);
        let ba = commutator_apply(&op2, &op1, &se.geom, &f);
        assert!((ab.value().0 + ba.value().0).abs() < 1e-12 * (1.0 + ab.value().0.abs()));
        assert!((ab.value().1 + ba.value().1).abs() < 1e-12 * (1.0 + ab.value().1.abs()));
    }

    #[test]
    fn master_identity_flat_constant() {
        let geom = flat_geom(2, 4);
        let ctx = JetCtx::new(2, 4);
        let curv = geom.curvature().unwrap();
        let mut p = jmat_zero(2, ctx);
        p[0][0] = Jet::constant(ctx, 2.0);
        p[0][1] = Jet::constant(ctx, 0.5);
        p[1][0] = Jet::constant(ctx, 0.5);
        p[1][1] = Jet::constant(ctx, 1.0);
        let mut q = jmat_zero(2, ctx);
        q[0][0] = Jet::constant(ctx, -1.0);
        q[1][1] = Jet::constant(ctx, 3.0);
        let f = CJet::from_re(
            Jet::lift_var(ctx, 0, 0.4)
                .unwrap()
                .mul(&Jet::lift_var(ctx, 1, 0.6).unwrap())
                .sin(),
        );
        let r = commutator_formula_check(&geom, &curv, &p, &q, &f);
        assert!(r.residual < 1e-13, "{r:?}");
    }

    #[test]
    fn master_identity_sphere_random() {
        let mut rng = Rng::seed_from(77);
        for trial in 0..5 {
            let x = [rng.uniform(0.5, 2.5), rng.uniform(-2.0, 2.0)];
            let geom = sphere_geom(&x, 4);
            let ctx = JetCtx::new(2, 4);
            let curv = geom.curvature().unwrap();
            let p = random_quadratic(&mut rng, &x, ctx);
            let q = random_quadratic(&mut rng, &x, ctx);
            let th = Jet::lift_var(ctx, 0, x[0]).unwrap();
            let ph = Jet::lift_var(ctx, 1, x[1]).unwrap();
            let f = CJet::from_re(th.powi(3).unwrap().mul(&ph).add(&th.sin().mul(&ph.cos())));
            let r = commutator_formula_check(&geom, &curv, &p, &q, &f);
            assert!(r.residual < 1e-10, "trial {trial}: {r:?}");
        }
    }

    #[test]
    fn theorem2_quantum_commutation() {
        for name in ["dim4_two_eigen", "dim6_one_block"] {
            let s = builtin(name).unwrap();
            let mut rng = Rng::seed_from(31);
            let battery = test_battery(&s.coord_names, s.r, 5);
            for _ in 0..2 {
                let x = rng.point_in_box(&s.sample_box, 0.05);
                let se = s.eval(&x, 4).unwrap();
                let me = ModelEval::CProjective(se.clone());
                let ctx = se.lambda.ctx();
                for (v, w) in [(0.3, 4.0), (-1.0, 1.7)] {
                    let op1 = DiffOperator::from_deg2(killing_tensor_k(&me, v).unwrap());
                    let op2 = DiffOperator::from_deg2(killing_tensor_k(&me, w).unwrap());
                    for tf in &battery {
                        let f = tf.eval(&x, ctx);
                        let r = commutator_residual(&op1, &op2, &se.geom, &f);
                        assert!(r < 1e-7, "{name} ({v},{w}) {}: {r}", tf.label);
                    }
                }
            }
        }
    }

    #[test]
    fn theorem3_projective_commutation() {
        let s = liouville2d();
        let mut rng = Rng::seed_from(32);
        let battery = test_battery(&s.coord_names, 0, 6);
        for _ in 0..4 {
            let x = rng.point_in_box(&s.sample_box, 0.05);
            let pe = s.eval(&x, 4).unwrap();
            let me = ModelEval::Projective(pe);
            let ctx = me.ctx();
            for (v, w) in [(0.3, 4.0), (1.5, -0.4)] {
                let op1 = DiffOperator::from_deg2(killing_tensor_k(&me, v).unwrap());
                let op2 = DiffOperator::from_deg2(killing_tensor_k(&me, w).unwrap());
                for tf in &battery {
                    let f = tf.eval(&x, ctx);
                    let r = commutator_residual(&op1, &op2, me.geom(), &f);
                    assert!(r < 1e-7, "({v},{w}) {}: {r}", tf.label);
                }
            }
        }
    }

    #[test]
    fn b_tensor_contrast() {
        let geom = flat_geom(2, 4);
        let curv = geom.curvature().unwrap();
        let bt = b_tensor(&geom, &curv, &geom.metric.ginv, &geom.metric.ginv);
        assert_eq!(bt.max_b(), 0.0);

        // In dimension four with two non-constant eigenvalues, B vanishes
        // identically for a Killing pair: all three terms of its reduced form
        // live in the 2-dimensional t-span and their wedge coefficients cancel
        // exactly (rational identity in the eigenvalues and (v, w)).
        let s = builtin("dim4_two_eigen").unwrap();
        let se = s.eval(&[2.5, 0.5, 0.2, -0.6], 4).unwrap();
        let me = ModelEval::CProjective(se.clone());
        let curv = se.geom.curvature().unwrap();
        let kv = killing_tensor_k(&me, 0.3).unwrap();
        let kw = killing_tensor_k(&me, 4.0).unwrap();
        let bt = b_tensor(&se.geom, &curv, &kv, &kw);
        assert!(bt.max_b() < 1e-12, "dim4 B vanishes identically: {}", bt.max_b());
        assert!(bt.max_div() < 1e-10);

        // One constant-eigenvalue block breaks the cancellation through the
        // trace term: B is visibly nonzero while its divergence still vanishes.
        let s6 = builtin("dim6_one_block").unwrap();
        let se6 = s6.eval(&[2.5, 0.5, 0.2, -0.6, 0.3, -0.4], 4).unwrap();
        let me6 = ModelEval::CProjective(se6.clone());
        let curv6 = se6.geom.curvature().unwrap();
        let kv6 = killing_tensor_k(&me6, 0.3).unwrap();
        let kw6 = killing_tensor_k(&me6, 4.0).unwrap();
        let bt6 = b_tensor(&se6.geom, &curv6, &kv6, &kw6);
        assert!(bt6.max_b() > 1e-4, "dim6 B must not vanish: {}", bt6.max_b());
        assert!(bt6.max_div() < 1e-7, "dim6 div B must vanish: {}", bt6.max_div());

        let l = liouville2d();
        let pe = l.eval(&[2.5, 0.5], 4).unwrap();
        let mep = ModelEval::Projective(pe);
        let curvp = mep.geom().curvature().unwrap();
        let kv = killing_tensor_k(&mep, 0.3).unwrap();
        let kw = killing_tensor_k(&mep, 4.0).unwrap();
        let btp = b_tensor(mep.geom(), &curvp, &kv, &kw);
        assert!(btp.max_b() < 1e-9, "projective B must vanish: {}", btp.max_b());
    }

    #[test]
    fn master_identity_on_killing_pair() {
        let s = builtin("dim4_two_eigen").unwrap();
        let se = s.eval(&[2.4, 0.6, -0.2, 0.4], 4).unwrap();
        let me = ModelEval::CProjective(se.clone());
        let curv = se.geom.curvature().unwrap();
        let kv = killing_tensor_k(&me, 0.3).unwrap();
        let kw = killing_tensor_k(&me, 4.0).unwrap();
        let ctx = se.lambda.ctx();
        let f = CJet::from_re(
            Jet::lift_var(ctx, 0, 2.4)
                .unwrap()
                .mul(&Jet::lift_var(ctx, 2, -0.2).unwrap())
                .sin()
                .mul(&Jet::lift_var(ctx, 1, 0.6).unwrap()),
        );
        let r = commutator_formula_check(&se.geom, &curv, &kv, &kw, &f);
        assert!(r.residual < 1e-9, "{r:?}");
        assert!(r.bracket_term < 1e-9, "{r:?}");
    }

    #[test]
    fn mixed_il_checks() {
        // flat_trivial: V = 0, everything vanishes identically
        let s0 = builtin("flat_trivial").unwrap();
        let se0 = s0.eval(&[0.1, -0.4, 0.7, 0.2], 4).unwrap();
        let ctx0 = se0.lambda.ctx();
        let f0 = CJet::from_re(Jet::lift_var(ctx0, 0, 0.1).unwrap().sin());
        let r0 = mixed_il_commutator_check(&se0, 0.7, 2.2, &f0, None).unwrap();
        assert!(r0.commutator < 1e-13 && r0.lie_derivative < 1e-13);

        let s = builtin("dim4_two_eigen").unwrap();
        let se = s.eval(&[2.6, 0.3, 0.4, -0.1], 4).unwrap();
        let ctx = se.lambda.ctx();
        // f must involve every coordinate so perturbations cannot hide
        let f = CJet::from_re(
            Jet::lift_var(ctx, 0, 2.6)
                .unwrap()
                .mul(&Jet::lift_var(ctx, 2, 0.4).unwrap())
                .add(&Jet::lift_var(ctx, 1, 0.3).unwrap().mul(&Jet::lift_var(ctx, 3, -0.1).unwrap()))
                .sin(),
        );
        let r = mixed_il_commutator_check(&se, 0.7, 2.2, &f, None).unwrap();
        assert!(r.commutator < 1e-8, "{r:?}");
        assert!(r.lie_derivative < 1e-8, "{r:?}");
        assert!(r.divergence < 1e-8, "{r:?}");

        let bad = mixed_il_commutator_check(&se, 0.7, 2.2, &f, Some(0.5)).unwrap();
        assert!(bad.commutator > 1e-3, "{bad:?}");
    }

    #[test]
    fn lemma_diagnostics_checks() {
        let s0 = builtin("flat_trivial").unwrap();
        let se0 = s0.eval(&[0.3, 0.1, -0.2, 0.5], 4).unwrap();
        let d0 = lemma_diagnostics(&se0, 0.3, 4.0, None).unwrap();
        assert!(d0.endomorphism_selfadjoint < 1e-13);
        assert!(d0.curvature_term < 1e-13);
        assert!(d0.ricci_commutes < 1e-13);
        assert!(d0.reduced_divergence < 1e-12, "{d0:?}");

        let s = builtin("dim4_two_eigen").unwrap();
        let se = s.eval(&[2.5, 0.5, 0.1, 0.6], 4).unwrap();
        let d = lemma_diagnostics(&se, 0.3, 4.0, None).unwrap();
        assert!(d.endomorphism_selfadjoint < 1e-8, "{d:?}");
        assert!(d.curvature_term < 1e-8, "{d:?}");
        assert!(d.ricci_commutes < 1e-8, "{d:?}");
        assert!(d.reduced_divergence < 1e-8, "{d:?}");

        let bad = lemma_diagnostics(&se, 0.3, 4.0, Some(0.1)).unwrap();
        assert!(bad.endomorphism_selfadjoint > 1e-3, "{bad:?}");
    }

    #[test]
    fn potential_operator_commutators() {
        let s = builtin("dim4_two_eigen").unwrap();
        let se = s.eval(&[2.4, 0.7, -0.3, 0.2], 4).unwrap();
        let ctx = se.lambda.ctx();
        let f = CJet::from_re(
            Jet::lift_var(ctx, 1, 0.7)
                .unwrap()
                .mul(&Jet::lift_var(ctx, 2, -0.3).unwrap())
                .sin(),
        );
        let zero = PotentialChoice::zero(&se);
        let r = potential_operator_checks(&se, &zero, 0.3, 4.0, &f).unwrap();
        assert!(r.qq < 1e-7 && r.ql < 1e-7 && r.ll < 1e-7, "{r:?}");

        let cubed = PotentialChoice::rho_power(&se, 3);
        let r = potential_operator_checks(&se, &cubed, 0.3, 4.0, &f).unwrap();
        assert!(r.qq < 1e-7, "{r:?}");
        assert!(r.ql < 1e-7, "{r:?}");
        assert!(r.ll < 1e-7, "{r:?}");

        // f_1 depending on x2 breaks the K-dU exactness symmetry: the Q-Q
        // commutator fires. (V(s) has no x2 component on this structure, so
        // the Q-L commutator stays blind to this particular violation.)
        let bad = PotentialChoice::parse(&se, &["x2".into(), "rho^2".into()]).unwrap();
        let r = potential_operator_checks(&se, &bad, 0.3, 4.0, &f).unwrap();
        assert!(r.qq > 1e-3, "{r:?}");

        // f_1 depending on t1 makes dU(V) nonzero: the Q-L commutator fires
        let bad_t = PotentialChoice::parse(&se, &["t1".into(), "rho^2".into()]).unwrap();
        let r = potential_operator_checks(&se, &bad_t, 0.3, 4.0, &f).unwrap();
        assert!(r.ql > 1e-3, "{r:?}");
    }
}
