//! Separation of variables for the joint eigenproblem of the commuting
//! operator family.
//!
//! Around a regular point with real constant eigenvalues, a simultaneous
//! eigenfunction factorizes as
//!
//! ```text
//! ψ = ∏_k φ_k(χ_k) · exp(−i Σ_q ω_q t_q) · ∏_γ ψ_γ(y_γ)
//! ```
//!
//! where each `φ_k` solves a second-order ODE in its own coordinate and each
//! block factor `ψ_γ` solves a PDE on its block. With `ϱ_k = σ_k(χ_k)`,
//! `Π_c(ϱ) = ∏_γ (ϱ − c_γ)^{m_γ/2}` and `λ(s) = Σ_i λ_i s^i` the ODE reads
//!
//! ```text
//! −(1/(ε_k σ_k')) d/dχ_k [ σ_k' Π_c(ϱ_k) φ' ]
//!   + [ ε_k Π_c(ϱ_k)/σ_k'² · w(ϱ_k)² + f_k(ϱ_k) ] φ  =  λ(ϱ_k) φ,
//! w(s) = Σ_q (−s)^{r−q} ω_q,
//! ```
//!
//! and the block equation (with `∂_{t_q} ↦ −i ω_q`) is
//!
//! ```text
//! Σ_j λ̃_j c_γ^j ψ = −∏_{γ'≠γ}(c_γ − c_{γ'}) [ Δ_g ψ
//!   + i Σ_q ω_q (1/√g) ∂_i(√g g^{ij} α_{qj} ψ) + i Σ_q ω_q g^{ij} α_{qi} ∂_j ψ
//!   − Σ_{p,q} ω_q ω_p g^{ij} α_{qi} α_{pj} ψ ] + f_γ ψ / ∏(c_γ − c_{γ'})^{m/2−1}.
//! ```
//!
//! The spectral constants are tied by
//! `Σ_i λ_i s^i = ∏_γ (s − c_γ)^{m_γ/2−1} Σ_j λ̃_j s^j`. The eigenvalue of
//! `L̂(t)` on such a ψ is `ℓ(t) = ∏_γ (t − c_γ)^{m_γ/2} Σ_q (−1)^q t^{r−q} ω_q`.

use crate::expr::{eval_jet, ExprError, ExprField};
use crate::integrals::{killing_tensor_k, killing_vector_v, potential_u, IntegralsError, ModelEval, PotentialChoice};
use crate::jet::{CJet, Jet, JetCtx};
use crate::quantization::{apply, DiffOperator};
use crate::structures::{KahlerStructure, StructureError, StructureEval};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SeparationError {
    #[error("ODE coefficient singularity at chi = {chi}: {what}")]
    CoefficientSingularity { chi: f64, what: &'static str },
    #[error("integration interval [{lo}, {hi}] leaves the declared sample box [{blo}, {bhi}] where eigenvalues stay separated")]
    IntervalOutsideBox { lo: f64, hi: f64, blo: f64, bhi: f64 },
    #[error("index {0} does not name a non-constant eigenvalue")]
    BadEigenIndex(usize),
    #[error("query {chi} outside the integrated grid [{lo}, {hi}]")]
    OutsideGrid { chi: f64, lo: f64, hi: f64 },
    #[error("separation potentials must be univariate in rho, got free variables {0:?}")]
    PotentialNotUnivariate(Vec<String>),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Integrals(#[from] IntegralsError),
}

/// Spectral data of one separated eigenproblem: momentum constants `ω_q` and
/// the `λ̃_j` polynomial coefficients; `λ_i` derive from them.
#[derive(Debug, Clone)]
pub struct SeparationProblem {
    pub omegas: Vec<f64>,
    pub lambda_tilde: Vec<f64>,
    /// Optional `f_k(rho)` per non-constant eigenvalue (expressions in `rho`).
    pub f_rho: Vec<Option<ExprField>>,
}

impl SeparationProblem {
    pub fn new(structure: &KahlerStructure, omegas: Vec<f64>, lambda_tilde: Vec<f64>) -> SeparationProblem {
        assert_eq!(omegas.len(), structure.r);
        let n_eigs = structure.r + structure.spec.blocks.len();
        assert_eq!(lambda_tilde.len(), n_eigs);
        SeparationProblem { omegas, lambda_tilde, f_rho: vec![None; structure.r] }
    }

    pub fn with_f_rho(mut self, fs: Vec<Option<ExprField>>) -> SeparationProblem {
        self.f_rho = fs;
        self
    }

    /// `λ_i` from `Σ λ_i s^i = ∏_γ (s − c_γ)^{m_γ/2−1} Σ_j λ̃_j s^j`.
    pub fn lambdas(&self, structure: &KahlerStructure) -> Vec<f64> {
        let mut poly = vec![1.0f64];
        for b in &structure.spec.blocks {
            for _ in 0..(b.m / 2 - 1) {
                let mut next = vec![0.0; poly.len() + 1];
                for (i, &c) in poly.iter().enumerate() {
                    next[i] -= b.c * c;
                    next[i + 1] += c;
                }
                poly = next;
            }
        }
        let mut out = vec![0.0; poly.len() + self.lambda_tilde.len() - 1];
        for (i, &a) in poly.iter().enumerate() {
            for (j, &b) in self.lambda_tilde.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        out
    }

    pub fn lambda_of(&self, structure: &KahlerStructure, t: f64) -> f64 {
        self.lambdas(structure)
            .iter()
            .rev()
            .fold(0.0, |acc, &c| acc * t + c)
    }

    /// Eigenvalue of `L̂(t)`.
    pub fn l_eigenvalue(&self, structure: &KahlerStructure, t: f64) -> f64 {
        let mut blockfac = 1.0;
        for b in &structure.spec.blocks {
            blockfac *= (t - b.c).powi((b.m / 2) as i32);
        }
        let r = structure.r;
        let mut acc = 0.0;
        for q in 1..=r {
            let sign = if q % 2 == 0 { 1.0 } else { -1.0 };
            acc += sign * t.powi((r - q) as i32) * self.omegas[q - 1];
        }
        blockfac * acc
    }

    /// Coefficientwise residual of the `λ ↔ λ̃` polynomial relation, checked
    /// by evaluating both sides at probe values of `s`.
    pub fn lambda_relation_residual(&self, structure: &KahlerStructure) -> f64 {
        let lambdas = self.lambdas(structure);
        let mut worst = 0.0f64;
        for probe in 0..4 {
            let s = -1.3 + 0.9 * probe as f64;
            let lhs: f64 = lambdas.iter().rev().fold(0.0, |acc, &c| acc * s + c);
            let mut rhs: f64 = self.lambda_tilde.iter().rev().fold(0.0, |acc, &c| acc * s + c);
            for b in &structure.spec.blocks {
                rhs *= (s - b.c).powi((b.m / 2 - 1) as i32);
            }
            worst = worst.max((lhs - rhs).abs());
        }
        worst
    }
}

// ---------------------------------------------------------------------------
// univariate Taylor helpers for the ODE layer
// ---------------------------------------------------------------------------

fn mul1d(a: &[f64], b: &[f64], order: usize) -> Vec<f64> {
    let mut out = vec![0.0; order + 1];
    for (i, &ai) in a.iter().enumerate().take(order + 1) {
        for (j, &bj) in b.iter().enumerate().take(order + 1 - i) {
            out[i + j] += ai * bj;
        }
    }
    out
}

fn deriv1d(a: &[f64]) -> Vec<f64> {
    (1..a.len()).map(|m| a[m] * m as f64).collect()
}

/// Per-coordinate scalar data entering the ODE, as univariate Taylor
/// coefficients at a given `χ_k`.
struct OdeCoeffs {
    /// `p = σ' Π_c(σ)`
    p: Vec<f64>,
    /// `v_total = ε Π_c w(σ)² / σ'² + f(σ)`
    v: Vec<f64>,
    /// `λ(σ)`
    lam: Vec<f64>,
    eps: f64,
    sigma_prime: Vec<f64>,
}

fn sigma_taylor(structure: &KahlerStructure, k: usize, chi: f64, order: usize) -> Result<Vec<f64>, SeparationError> {
    // evaluate sigma_k as a univariate jet in its own coordinate
    let ctx = JetCtx::new(structure.dim, order);
    let mut x = structure
        .sample_box
        .iter()
        .map(|&(lo, hi)| 0.5 * (lo + hi))
        .collect::<Vec<f64>>();
    x[k] = chi;
    let spec_sigma = ExprField::parse(&structure.spec.sigmas[k], &structure.coord_names)?;
    let jet = spec_sigma.eval(&x, ctx)?;
    // extract the univariate coefficients along slot k
    let mut out = vec![0.0; order + 1];
    let indices = crate::jet::multi_indices(ctx);
    for (slot, m) in indices.iter().enumerate() {
        let deg = m.degree();
        if deg == m.0[k] as usize {
            out[deg] = jet.coeffs()[slot];
        }
    }
    Ok(out)
}

fn ode_coeffs(
    structure: &KahlerStructure,
    problem: &SeparationProblem,
    k: usize,
    chi: f64,
    order: usize,
) -> Result<OdeCoeffs, SeparationError> {
    let sig = sigma_taylor(structure, k, chi, order + 1)?;
    let sigma_prime: Vec<f64> = deriv1d(&sig);
    let eps = structure.spec.epsilons[k];
    // Π_c(σ) as a univariate series
    let mut pic = vec![0.0; order + 1];
    pic[0] = 1.0;
    for b in &structure.spec.blocks {
        let mut lin = sig[..=order.min(sig.len() - 1)].to_vec();
        lin[0] -= b.c;
        for _ in 0..(b.m / 2) {
            pic = mul1d(&pic, &lin, order);
        }
    }
    let p = mul1d(&sigma_prime, &pic, order);
    if p[0].abs() < 1e-10 {
        return Err(SeparationError::CoefficientSingularity { chi, what: "sigma' Pi_c vanishes" });
    }
    // w(σ) = Σ_q (−σ)^{r−q} ω_q
    let r = structure.r;
    let mut w = vec![0.0; order + 1];
    let mut neg_sig: Vec<f64> = sig.iter().map(|c| -c).collect();
    neg_sig.truncate(order + 1);
    let mut pow = vec![0.0; order + 1];
    pow[0] = 1.0; // (−σ)^0
    let mut pows = vec![pow.clone()];
    for _ in 1..r {
        pow = mul1d(&pow, &neg_sig, order);
        pows.push(pow.clone());
    }
    for q in 1..=r {
        let pw = &pows[r - q];
        for (i, &c) in pw.iter().enumerate() {
            w[i] += c * problem.omegas[q - 1];
        }
    }
    let w2 = mul1d(&w, &w, order);
    // ε Π_c w² / σ'²
    let sp2 = mul1d(&sigma_prime, &sigma_prime, order);
    let mut inv_sp2 = vec![0.0; order + 1];
    if sp2[0].abs() < 1e-12 {
        return Err(SeparationError::CoefficientSingularity { chi, what: "sigma' vanishes" });
    }
    inv_sp2[0] = 1.0 / sp2[0];
    for m in 1..=order {
        let mut acc = 0.0;
        for i in 1..=m {
            acc += sp2.get(i).copied().unwrap_or(0.0) * inv_sp2[m - i];
        }
        inv_sp2[m] = -acc / sp2[0];
    }
    let mut v = mul1d(&mul1d(&pic, &w2, order), &inv_sp2, order);
    for c in v.iter_mut() {
        *c *= eps;
    }
    // + f(σ)
    if let Some(f) = &problem.f_rho[k] {
        let ctx1 = JetCtx::new(1, order);
        let rho = jet_from_1d(ctx1, &sig);
        let mut env = HashMap::new();
        env.insert("rho".to_string(), rho);
        let fj = eval_jet(&f.ast, &env)?;
        for (m, slot) in v.iter_mut().enumerate().take(fj.coeffs().len()) {
            *slot += fj.coeffs()[m];
        }
    }
    // λ(σ)
    let lambdas = problem.lambdas(structure);
    let mut lam = vec![0.0; order + 1];
    let mut pw = vec![0.0; order + 1];
    pw[0] = 1.0;
    for &li in &lambdas {
        for (m, &c) in pw.iter().enumerate() {
            lam[m] += li * c;
        }
        pw = mul1d(&pw, &sig, order);
    }
    Ok(OdeCoeffs { p, v, lam, eps, sigma_prime })
}

fn jet_from_1d(ctx: JetCtx, coeffs: &[f64]) -> Jet {
    assert_eq!(ctx.dim, 1);
    let x = Jet::lift_var(ctx, 0, 0.0).expect("slot 0");
    let mut out = Jet::constant(ctx, coeffs[0]);
    let mut pw = Jet::constant(ctx, 1.0);
    for &c in coeffs.iter().skip(1).take(ctx.order) {
        pw = pw.mul(&x);
        out = out.add(&pw.scale(c));
    }
    out
}

/// `(φ''/φ-form) right-hand side: φ'' = a(χ) φ' + b(χ) φ` at `chi`.
fn ode_rhs(structure: &KahlerStructure, problem: &SeparationProblem, k: usize, chi: f64) -> Result<(f64, f64), SeparationError> {
    let c = ode_coeffs(structure, problem, k, chi, 1)?;
    let dp = c.p[1];
    let a = -dp / c.p[0];
    let b = c.eps * c.sigma_prime[0] / c.p[0] * (c.v[0] - c.lam[0]);
    Ok((a, b))
}

/// One separated factor on a uniform grid, with its first derivative.
#[derive(Debug, Clone)]
pub struct OdeSolution {
    pub k: usize,
    pub lo: f64,
    pub h: f64,
    pub phi: Vec<f64>,
    pub dphi: Vec<f64>,
}

impl OdeSolution {
    pub fn hi(&self) -> f64 {
        self.lo + self.h * (self.phi.len() - 1) as f64
    }
}

/// Classical fourth-order Runge–Kutta integration of the separated ODE as an
/// initial value problem on `[interval.0, interval.1]`.
pub fn integrate_ode(
    structure: &KahlerStructure,
    problem: &SeparationProblem,
    k: usize,
    interval: (f64, f64),
    init: (f64, f64),
    h: f64,
) -> Result<OdeSolution, SeparationError> {
    if k >= structure.r {
        return Err(SeparationError::BadEigenIndex(k));
    }
    let (blo, bhi) = structure.sample_box[k];
    if interval.0 < blo - 1e-12 || interval.1 > bhi + 1e-12 || interval.0 >= interval.1 {
        return Err(SeparationError::IntervalOutsideBox {
            lo: interval.0,
            hi: interval.1,
            blo,
            bhi,
        });
    }
    assert!(h > 0.0, "step must be positive");
    let steps = ((interval.1 - interval.0) / h).round() as usize;
    let h = (interval.1 - interval.0) / steps as f64;
    let mut phi = Vec::with_capacity(steps + 1);
    let mut dphi = Vec::with_capacity(steps + 1);
    let (mut y, mut dy) = init;
    phi.push(y);
    dphi.push(dy);
    let f = |chi: f64, y: f64, dy: f64| -> Result<(f64, f64), SeparationError> {
        let (a, b) = ode_rhs(structure, problem, k, chi)?;
        Ok((dy, a * dy + b * y))
    };
    for step in 0..steps {
        let chi = interval.0 + step as f64 * h;
        let (k1y, k1d) = f(chi, y, dy)?;
        let (k2y, k2d) = f(chi + 0.5 * h, y + 0.5 * h * k1y, dy + 0.5 * h * k1d)?;
        let (k3y, k3d) = f(chi + 0.5 * h, y + 0.5 * h * k2y, dy + 0.5 * h * k2d)?;
        let (k4y, k4d) = f(chi + h, y + h * k3y, dy + h * k3d)?;
        y += h / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y);
        dy += h / 6.0 * (k1d + 2.0 * k2d + 2.0 * k3d + k4d);
        phi.push(y);
        dphi.push(dy);
    }
    Ok(OdeSolution { k, lo: interval.0, h, phi, dphi })
}

impl OdeSolution {
    /// Univariate Taylor coefficients of `φ` at `chi`, to the requested order.
    /// Value and slope come from Hermite interpolation of the grid; the
    /// higher coefficients follow from the ODE recurrence
    /// `(m+2)(m+1) c_{m+2} = [a φ' + b φ]_m`.
    pub fn taylor_at(
        &self,
        structure: &KahlerStructure,
        problem: &SeparationProblem,
        chi: f64,
        order: usize,
    ) -> Result<Vec<f64>, SeparationError> {
        let hi = self.hi();
        if chi < self.lo - 1e-12 || chi > hi + 1e-12 {
            return Err(SeparationError::OutsideGrid { chi, lo: self.lo, hi });
        }
        let pos = ((chi - self.lo) / self.h).floor().max(0.0) as usize;
        let pos = pos.min(self.phi.len() - 2);
        let t = (chi - (self.lo + pos as f64 * self.h)) / self.h;
        // cubic Hermite on [pos, pos+1]
        let (y0, y1) = (self.phi[pos], self.phi[pos + 1]);
        let (d0, d1) = (self.dphi[pos] * self.h, self.dphi[pos + 1] * self.h);
        let h00 = 2.0 * t * t * t - 3.0 * t * t + 1.0;
        let h10 = t * t * t - 2.0 * t * t + t;
        let h01 = -2.0 * t * t * t + 3.0 * t * t;
        let h11 = t * t * t - t * t;
        let val = h00 * y0 + h10 * d0 + h01 * y1 + h11 * d1;
        let dh00 = 6.0 * t * t - 6.0 * t;
        let dh10 = 3.0 * t * t - 4.0 * t + 1.0;
        let dh01 = -6.0 * t * t + 6.0 * t;
        let dh11 = 3.0 * t * t - 2.0 * t;
        let slope = (dh00 * y0 + dh10 * d0 + dh01 * y1 + dh11 * d1) / self.h;

        let mut c = vec![0.0; order + 1];
        c[0] = val;
        if order >= 1 {
            c[1] = slope;
        }
        if order >= 2 {
            let oc = ode_coeffs(structure, problem, self.k, chi, order)?;
            // a = −p'/p, b = ε σ' (v − λ)/p as univariate series
            let dp = deriv1d(&oc.p);
            let mut inv_p = vec![0.0; order + 1];
            inv_p[0] = 1.0 / oc.p[0];
            for m in 1..=order {
                let mut acc = 0.0;
                for i in 1..=m {
                    acc += oc.p.get(i).copied().unwrap_or(0.0) * inv_p[m - i];
                }
                inv_p[m] = -acc / oc.p[0];
            }
            let a: Vec<f64> = mul1d(&dp, &inv_p, order).iter().map(|x| -x).collect();
            let vm: Vec<f64> = oc.v.iter().zip(&oc.lam).map(|(v, l)| v - l).collect();
            let b: Vec<f64> = mul1d(&mul1d(&oc.sigma_prime, &vm, order), &inv_p, order)
                .iter()
                .map(|x| x * oc.eps)
                .collect();
            for m in 0..order - 1 {
                // [a φ' + b φ]_m with φ' coefficients (j+1) c_{j+1}
                let mut rhs = 0.0;
                for j in 0..=m {
                    rhs += a[m - j] * (j + 1) as f64 * c[j + 1];
                    rhs += b[m - j] * c[j];
                }
                c[m + 2] = rhs / ((m + 2) * (m + 1)) as f64;
            }
        }
        Ok(c)
    }
}

/// Residual of the separated ODE along the interior of the solution grid,
/// with `φ'` and `φ''` taken by central differences — an oracle independent
/// of the integrator's own derivative bookkeeping.
pub fn separated_ode_residual(
    structure: &KahlerStructure,
    problem: &SeparationProblem,
    sol: &OdeSolution,
) -> Result<f64, SeparationError> {
    let mut worst = 0.0f64;
    let n = sol.phi.len();
    for i in 1..n - 1 {
        let chi = sol.lo + i as f64 * sol.h;
        let oc = ode_coeffs(structure, problem, sol.k, chi, 1)?;
        let phi = sol.phi[i];
        let dphi = (sol.phi[i + 1] - sol.phi[i - 1]) / (2.0 * sol.h);
        let ddphi = (sol.phi[i + 1] - 2.0 * sol.phi[i] + sol.phi[i - 1]) / (sol.h * sol.h);
        let lhs = -(1.0 / (oc.eps * oc.sigma_prime[0]))
            * (oc.p[1] * dphi + oc.p[0] * ddphi)
            + oc.v[0] * phi;
        let rhs = oc.lam[0] * phi;
        let scale = rhs.abs().max(oc.v[0].abs() * phi.abs()).max(1.0);
        worst = worst.max((lhs - rhs).abs() / scale);
    }
    Ok(worst)
}

/// One block factor as a complex pair of expressions over the block's local
/// coordinates `y1..ym`.
#[derive(Debug, Clone)]
pub struct BlockFactor {
    pub re: ExprField,
    pub im: ExprField,
}

impl BlockFactor {
    pub fn real(src: &str, m: usize) -> Result<BlockFactor, SeparationError> {
        let vars: Vec<String> = (1..=m).map(|q| format!("y{q}")).collect();
        Ok(BlockFactor { re: ExprField::parse(src, &vars)?, im: ExprField::constant(0.0, &vars) })
    }

    pub fn complex(re: &str, im: &str, m: usize) -> Result<BlockFactor, SeparationError> {
        let vars: Vec<String> = (1..=m).map(|q| format!("y{q}")).collect();
        Ok(BlockFactor { re: ExprField::parse(re, &vars)?, im: ExprField::parse(im, &vars)? })
    }

    fn eval_local(&self, y: &[f64], ctx: JetCtx) -> Result<CJet, SeparationError> {
        Ok(CJet { re: self.re.eval(y, ctx)?, im: self.im.eval(y, ctx)? })
    }
}

/// Residual of the separated block PDE for block `gamma_idx` at a block-local
/// point `y`, with `∂_{t_q} ψ = −i ω_q ψ` substituted.
pub fn separated_pde_residual(
    structure: &KahlerStructure,
    problem: &SeparationProblem,
    gamma_idx: usize,
    factor: &BlockFactor,
    y: &[f64],
) -> Result<f64, SeparationError> {
    let r = structure.r;
    // evaluate block data at a full-manifold point whose block slice is y
    let mut x: Vec<f64> = structure.sample_box.iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect();
    let se = {
        let b = &structure.spec.blocks[gamma_idx];
        let offset = 2 * r
            + structure.spec.blocks[..gamma_idx].iter().map(|bb| bb.m).sum::<usize>();
        for q in 0..b.m {
            x[offset + q] = y[q];
        }
        structure.eval(&x, 3)?
    };
    let block = &se.blocks[gamma_idx];
    let m = block.m;
    let ctx = JetCtx::new(m, 3);
    let psi = factor.eval_local(y, ctx)?;

    // local metric data as jets in the block-local context
    let gib: Vec<Vec<Jet>> = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| restrict_to_block(&block.ginv_local[i][j], block.offset, m, ctx))
                .collect()
        })
        .collect();
    let sq = restrict_to_block(&block.sqrt_abs_det, block.offset, m, ctx);
    let al: Vec<Vec<Jet>> = (0..r)
        .map(|i| {
            (0..m)
                .map(|q| restrict_to_block(&block.alphas[i][q], block.offset, m, ctx))
                .collect()
        })
        .collect();

    let inv_sq = sq.inv().map_err(|e| SeparationError::Expr(ExprError::Jet(e)))?;
    let lap = |h: &Jet| -> Jet {
        // (1/√g) ∂_i (√g g^{ij} ∂_j h)
        let mut acc = Jet::zero(JetCtx::new(m, ctx.order - 2));
        for i in 0..m {
            let mut flux = Jet::zero(JetCtx::new(m, ctx.order - 1));
            for j in 0..m {
                flux = flux.add(&sq.truncated(ctx.order - 1).mul(&gib[i][j].truncated(ctx.order - 1)).mul(&h.deriv(j)));
            }
            acc = acc.add(&flux.deriv(i));
        }
        acc.mul(&inv_sq.truncated(ctx.order - 2))
    };
    let term_a_re = lap(&psi.re);
    let term_a_im = lap(&psi.im);

    // i Σ_q ω_q (1/√g)∂_i(√g g^{ij} α_{qj} ψ) + i Σ_q ω_q g^{ij} α_{qi} ∂_j ψ
    let mut lin_re = Jet::zero(JetCtx::new(m, ctx.order - 1));
    let mut lin_im = Jet::zero(JetCtx::new(m, ctx.order - 1));
    for q in 0..r {
        let w = problem.omegas[q];
        if w == 0.0 {
            continue;
        }
        let mut div_part_re = Jet::zero(JetCtx::new(m, ctx.order - 1));
        let mut div_part_im = Jet::zero(JetCtx::new(m, ctx.order - 1));
        for i in 0..m {
            let mut flux_re = Jet::zero(ctx);
            let mut flux_im = Jet::zero(ctx);
            for j in 0..m {
                let gal = gib[i][j].mul(&al[q][j]).mul(&sq);
                flux_re = flux_re.add(&gal.mul(&psi.re));
                flux_im = flux_im.add(&gal.mul(&psi.im));
            }
            div_part_re = div_part_re.add(&flux_re.deriv(i));
            div_part_im = div_part_im.add(&flux_im.deriv(i));
        }
        div_part_re = div_part_re.mul(&inv_sq.truncated(ctx.order - 1));
        div_part_im = div_part_im.mul(&inv_sq.truncated(ctx.order - 1));
        let mut grad_re = Jet::zero(JetCtx::new(m, ctx.order - 1));
        let mut grad_im = Jet::zero(JetCtx::new(m, ctx.order - 1));
        for i in 0..m {
            for j in 0..m {
                let gai = gib[i][j].truncated(ctx.order - 1).mul(&al[q][i].truncated(ctx.order - 1));
                grad_re = grad_re.add(&gai.mul(&psi.re.deriv(j)));
                grad_im = grad_im.add(&gai.mul(&psi.im.deriv(j)));
            }
        }
        // multiply by i ω_q: (re, im) -> (−ω im, ω re)
        let tot_re = div_part_re.add(&grad_re);
        let tot_im = div_part_im.add(&grad_im);
        lin_re = lin_re.add(&tot_im.scale(-w));
        lin_im = lin_im.add(&tot_re.scale(w));
    }

    // − Σ_{p,q} ω_q ω_p g^{ij} α_{qi} α_{pj} ψ
    let mut quad = Jet::zero(ctx);
    for q in 0..r {
        for p in 0..r {
            let wq = problem.omegas[q] * problem.omegas[p];
            if wq == 0.0 {
                continue;
            }
            for i in 0..m {
                for j in 0..m {
                    quad = quad.add(&gib[i][j].mul(&al[q][i]).mul(&al[p][j]).scale(-wq));
                }
            }
        }
    }
    let quad_re = quad.truncated(ctx.order - 2).mul(&psi.re.truncated(ctx.order - 2));
    let quad_im = quad.truncated(ctx.order - 2).mul(&psi.im.truncated(ctx.order - 2));

    let bracket_re = term_a_re.add(&lin_re.truncated(ctx.order - 2)).add(&quad_re);
    let bracket_im = term_a_im.add(&lin_im.truncated(ctx.order - 2)).add(&quad_im);

    let c_gamma = structure.spec.blocks[gamma_idx].c;
    let mut prefac = 1.0;
    for (gi, b) in structure.spec.blocks.iter().enumerate() {
        if gi != gamma_idx {
            prefac *= c_gamma - b.c;
        }
    }
    // λ̃ polynomial at c_gamma
    let lhs: f64 = problem.lambda_tilde.iter().rev().fold(0.0, |acc, &c| acc * c_gamma + c);
    let rhs_re = -prefac * bracket_re.value();
    let rhs_im = -prefac * bracket_im.value();
    let psi_val = psi.value_abs();
    let scale = (lhs.abs() * psi_val)
        .max(rhs_re.hypot(rhs_im))
        .max(1.0);
    let res_re = lhs * psi.re.value() - rhs_re;
    let res_im = lhs * psi.im.value() - rhs_im;
    Ok(res_re.hypot(res_im) / scale)
}

/// Project a jet in the full-manifold context onto the block-local context by
/// keeping only the coefficients supported on the block coordinates.
fn restrict_to_block(full: &Jet, offset: usize, m: usize, ctx: JetCtx) -> Jet {
    let full_ctx = full.ctx();
    let indices = crate::jet::multi_indices(full_ctx);
    let local_indices = crate::jet::multi_indices(ctx);
    let mut lookup = HashMap::new();
    for (slot, mi) in local_indices.iter().enumerate() {
        lookup.insert(mi.0.clone(), slot);
    }
    let mut coeffs = vec![0.0; ctx.len()];
    'outer: for (slot, mi) in indices.iter().enumerate() {
        if mi.degree() > ctx.order {
            continue;
        }
        let mut local = vec![0u8; m];
        for (a, &e) in mi.0.iter().enumerate() {
            if e == 0 {
                continue;
            }
            if a < offset || a >= offset + m {
                continue 'outer;
            }
            local[a - offset] = e;
        }
        if let Some(&ls) = lookup.get(&local) {
            coeffs[ls] = full.coeffs()[slot];
        }
    }
    // rebuild via the power-sum construction
    let mut out = Jet::constant(ctx, coeffs[0]);
    for (ls, mi) in local_indices.iter().enumerate().skip(1) {
        if coeffs[ls] == 0.0 {
            continue;
        }
        let mut mono = Jet::constant(ctx, coeffs[ls]);
        for (q, &e) in mi.0.iter().enumerate() {
            for _ in 0..e {
                mono = mono.mul(&Jet::lift_var(ctx, q, 0.0).expect("block slot"));
            }
        }
        out = out.add(&mono);
    }
    out
}

/// The assembled separable eigenfunction: per-coordinate factors, the
/// `exp(−i ω·t)` phase, and per-block factors. Carries the problem its
/// factors were integrated against, so that jet extension always follows the
/// authentic ODE even when residuals are later checked against tampered
/// spectral data.
#[derive(Debug, Clone)]
pub struct Ansatz {
    pub problem: SeparationProblem,
    pub factors: Vec<OdeSolution>,
    pub block_factors: Vec<BlockFactor>,
}

impl Ansatz {
    /// ψ as a complex jet at the point, built factor by factor.
    pub fn eval(
        &self,
        structure: &KahlerStructure,
        x: &[f64],
        order: usize,
    ) -> Result<CJet, SeparationError> {
        let problem = &self.problem;
        let ctx = JetCtx::new(structure.dim, order);
        let r = structure.r;
        let mut psi = CJet::from_re(Jet::constant(ctx, 1.0));
        for sol in &self.factors {
            let c = sol.taylor_at(structure, problem, x[sol.k], order)?;
            let factor = embed_univariate(ctx, sol.k, &c, x[sol.k]);
            psi = CJet { re: psi.re.mul(&factor), im: psi.im.mul(&factor) };
        }
        // phase exp(-i Σ ω_q t_q)
        let mut theta = Jet::zero(ctx);
        for q in 0..r {
            let t = Jet::lift_var(ctx, r + q, x[r + q]).expect("t coordinate");
            theta = theta.add(&t.scale(problem.omegas[q]));
        }
        let phase = CJet { re: theta.cos(), im: theta.sin().neg() };
        psi = complex_mul(&psi, &phase);
        for (gi, bf) in self.block_factors.iter().enumerate() {
            let b = &structure.spec.blocks[gi];
            let offset =
                2 * r + structure.spec.blocks[..gi].iter().map(|bb| bb.m).sum::<usize>();
            // evaluate the local expressions with local variables bound to
            // the full-context coordinate jets
            let vars: Vec<String> = (1..=b.m).map(|q| format!("y{q}")).collect();
            let mut env = HashMap::new();
            for (q, name) in vars.iter().enumerate() {
                env.insert(
                    name.clone(),
                    Jet::lift_var(ctx, offset + q, x[offset + q]).expect("block coordinate"),
                );
            }
            let re = eval_jet(&bf.re.ast, &env)?;
            let im = eval_jet(&bf.im.ast, &env)?;
            psi = complex_mul(&psi, &CJet { re, im });
        }
        Ok(psi)
    }
}

fn complex_mul(a: &CJet, b: &CJet) -> CJet {
    CJet {
        re: a.re.mul(&b.re).sub(&a.im.mul(&b.im)),
        im: a.re.mul(&b.im).add(&a.im.mul(&b.re)),
    }
}

/// Build a full-context jet of a univariate function of coordinate `slot`
/// from its Taylor coefficients at the point.
fn embed_univariate(ctx: JetCtx, slot: usize, coeffs: &[f64], _at: f64) -> Jet {
    let x = Jet::lift_var(ctx, slot, 0.0).expect("slot in range");
    let mut out = Jet::constant(ctx, coeffs[0]);
    let mut pw = Jet::constant(ctx, 1.0);
    for &c in coeffs.iter().skip(1).take(ctx.order) {
        pw = pw.mul(&x);
        out = out.add(&pw.scale(c));
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct EigenResiduals {
    /// `max |Q̂(t)ψ − λ(t)ψ| / scale` over the sampled points.
    pub q_residual: f64,
    /// `max |L̂(t)ψ − ℓ(t)ψ| / scale`.
    pub l_residual: f64,
}

/// Apply `Q̂(t)` and `L̂(t)` to the assembled ansatz at sample points and
/// compare with the predicted eigenvalues.
pub fn eigen_residual(
    structure: &KahlerStructure,
    problem: &SeparationProblem,
    ansatz: &Ansatz,
    choice: Option<&PotentialChoice>,
    t_values: &[f64],
    points: &[Vec<f64>],
) -> Result<EigenResiduals, SeparationError> {
    let mut q_residual = 0.0f64;
    let mut l_residual = 0.0f64;
    for x in points {
        let se = structure.eval(x, 4)?;
        let me = ModelEval::CProjective(se.clone());
        let psi = ansatz.eval(structure, x, 4)?;
        let psi_scale = psi.value_abs().max(0.05 * psi.re.max_abs_coeff().max(psi.im.max_abs_coeff())).max(1e-12);
        for &t in t_values {
            let mut op = DiffOperator::from_deg2(killing_tensor_k(&me, t)?);
            if let Some(ch) = choice {
                op.deg0 = Some(potential_u(&se, ch, t)?);
            }
            let qpsi = apply(&op, &se.geom, &psi);
            let lam = problem.lambda_of(structure, t);
            let dre = qpsi.re.value() - lam * psi.re.value();
            let dim_ = qpsi.im.value() - lam * psi.im.value();
            let scale = lam.abs().max(1.0) * psi_scale;
            q_residual = q_residual.max(dre.hypot(dim_) / scale);

            let lop = DiffOperator { deg1: Some(killing_vector_v(&se, t)), ..Default::default() };
            let lpsi = apply(&lop, &se.geom, &psi);
            let ell = problem.l_eigenvalue(structure, t);
            let dre = lpsi.re.value() - ell * psi.re.value();
            let dim_ = lpsi.im.value() - ell * psi.im.value();
            let scale = ell.abs().max(1.0) * psi_scale;
            l_residual = l_residual.max(dre.hypot(dim_) / scale);
        }
    }
    Ok(EigenResiduals { q_residual, l_residual })
}

/// Two-route agreement of `∇_i K(s)^{ij} ∇_j f`: the explicit per-coordinate
/// frame expansion against the invariant covariant application.
pub fn normal_coords_operator(
    se: &StructureEval,
    s: f64,
    f: &CJet,
) -> Result<f64, SeparationError> {
    let route_b = {
        let me = ModelEval::CProjective(se.clone());
        let k = killing_tensor_k(&me, s)?;
        let op = DiffOperator::from_deg2(k);
        apply(&op, &se.geom, f).scale(-1.0) // op is −∇K∇
    };
    let route_a = explicit_frame_apply(se, s, f)?;
    let scale = route_a.value_abs().max(route_b.value_abs()).max(1.0);
    let dre = route_a.re.value() - route_b.re.value();
    let dim_ = route_a.im.value() - route_b.im.value();
    Ok(dre.hypot(dim_) / scale)
}

/// The explicit frame form of `∇_i K(s)^{ij} ∇_j`:
/// per-χ terms, the `∂_t ∂_t` block, and per-block terms with the α-form
/// cross couplings.
fn explicit_frame_apply(
    se: &StructureEval,
    s: f64,
    f: &CJet,
) -> Result<CJet, SeparationError> {
    let r = se.r;
    let ctx = se.lambda.ctx();
    let apply_real = |fr: &Jet| -> Result<Jet, SeparationError> {
        let mut acc = Jet::zero(ctx.lower(2));
        // Σ_k  c1_k ∂_{χ_k}[σ' Π_γ(ϱ_γ − ϱ_k)^{m/2} ∂_{χ_k} f],
        // c1_k = ∏_{l≠k}(s−ϱ_l)^{e_l} / (ε_k Δ_k Π_γ(ϱ_γ−ϱ_k)^{m/2} σ_k')
        for k in 0..r {
            let mut prod = Jet::constant(ctx, 1.0);
            for (l, e) in se.eigs.iter().enumerate() {
                if l == k {
                    continue;
                }
                let lin = Jet::constant(ctx, s).sub(&e.value);
                prod = prod.mul(&lin.powi((e.mult / 2) as i64).expect("power"));
            }
            let mut pig = Jet::constant(ctx, 1.0);
            for b in &se.blocks {
                let lin = Jet::constant(ctx, b.c).sub(&se.eigs[k].value);
                pig = pig.mul(&lin.powi((b.m / 2) as i64).expect("power"));
            }
            let denom = se.delta[k]
                .scale(se.eps[k])
                .mul(&pig)
                .mul(&se.sigma_prime[k]);
            let c1 = prod.div(&denom).map_err(|e| SeparationError::Expr(ExprError::Jet(e)))?;
            let inner = se.sigma_prime[k]
                .truncated(ctx.order - 1)
                .mul(&pig.truncated(ctx.order - 1))
                .mul(&fr.deriv(k));
            acc = acc.add(&c1.truncated(ctx.order - 2).mul(&inner.deriv(k)));
        }
        // Σ_{i,j} Σ_k ε_k (−ϱ_k)^{2r−i−j} / (Δ_k σ_k'^2) ∏_{l≠k}(s−ϱ_l)^{e_l} ∂_{t_i}∂_{t_j} f
        for i in 1..=r {
            for j in 1..=r {
                let mut coef = Jet::zero(ctx);
                for k in 0..r {
                    let mut prod = Jet::constant(ctx, 1.0);
                    for (l, e) in se.eigs.iter().enumerate() {
                        if l == k {
                            continue;
                        }
                        let lin = Jet::constant(ctx, s).sub(&e.value);
                        prod = prod.mul(&lin.powi((e.mult / 2) as i64).expect("power"));
                    }
                    let pw = (2 * r - i - j) as i64;
                    let negr = se.eigs[k].value.neg();
                    let num = negr.powi(pw).expect("power").scale(se.eps[k]);
                    let den = se.delta[k].mul(&se.sigma_prime[k]).mul(&se.sigma_prime[k]);
                    coef = coef.add(
                        &num.mul(&prod).div(&den).map_err(|e| SeparationError::Expr(ExprError::Jet(e)))?,
                    );
                }
                let dtt = fr.deriv(r + i - 1).deriv(r + j - 1);
                acc = acc.add(&coef.truncated(ctx.order - 2).mul(&dtt));
            }
        }
        // block terms
        for block in &se.blocks {
            // C_γ(s) = ∏_{l∈E}(s−ϱ_l)^{e_l} / ((s−c_γ) ∏_{k∈nc}(c_γ−ϱ_k)) g_γ^{-1}
            let mut prod = Jet::constant(ctx, 1.0);
            for e in &se.eigs {
                let lin = Jet::constant(ctx, s).sub(&e.value);
                prod = prod.mul(&lin.powi((e.mult / 2) as i64).expect("power"));
            }
            let mut den = Jet::constant(ctx, s - block.c);
            for k in 0..r {
                den = den.mul(&Jet::constant(ctx, block.c).sub(&se.eigs[k].value));
            }
            let cfac = prod.div(&den).map_err(|e| SeparationError::Expr(ExprError::Jet(e)))?;
            let m = block.m;
            let off = block.offset;
            let inv_sq = block
                .sqrt_abs_det
                .inv()
                .map_err(|e| SeparationError::Expr(ExprError::Jet(e)))?;
            // T3 − T4: (1/√g) ∂_{y_i} [ √g C^{ij} (∂_{y_j} f − Σ_q α_{qj} ∂_{t_q} f) ]
            for i in 0..m {
                let mut flux = Jet::zero(ctx.lower(1));
                for j in 0..m {
                    let mut dirn = fr.deriv(off + j);
                    for q in 0..r {
                        dirn = dirn.sub(
                            &block.alphas[q][j]
                                .truncated(ctx.order - 1)
                                .mul(&fr.deriv(r + q)),
                        );
                    }
                    let c = cfac
                        .truncated(ctx.order - 1)
                        .mul(&block.ginv_local[i][j].truncated(ctx.order - 1));
                    flux = flux.add(
                        &block
                            .sqrt_abs_det
                            .truncated(ctx.order - 1)
                            .mul(&c)
                            .mul(&dirn),
                    );
                }
                acc = acc.add(
                    &inv_sq
                        .truncated(ctx.order - 2)
                        .mul(&flux.deriv(off + i)),
                );
            }
            // −T5 + T6: −Σ_q α_{qi} C^{ij} ∂_{t_q}(∂_{y_j} f − Σ_p α_{pj} ∂_{t_p} f)
            for i in 0..m {
                for j in 0..m {
                    let c = cfac
                        .truncated(ctx.order - 2)
                        .mul(&block.ginv_local[i][j].truncated(ctx.order - 2));
                    for q in 0..r {
                        let mut inner = fr.deriv(off + j).deriv(r + q);
                        for p in 0..r {
                            inner = inner.sub(
                                &block.alphas[p][j]
                                    .truncated(ctx.order - 2)
                                    .mul(&fr.deriv(r + q).deriv(r + p)),
                            );
                        }
                        acc = acc.sub(
                            &block.alphas[q][i]
                                .truncated(ctx.order - 2)
                                .mul(&c)
                                .mul(&inner),
                        );
                    }
                }
            }
        }
        Ok(acc)
    };
    Ok(CJet { re: apply_real(&f.re)?, im: apply_real(&f.im)? })
}

/// Observed Runge–Kutta convergence order by Richardson comparison against a
/// reference solution at `h/8`.
pub fn rk4_convergence_order(
    structure: &KahlerStructure,
    problem: &SeparationProblem,
    k: usize,
    interval: (f64, f64),
    init: (f64, f64),
    h: f64,
) -> Result<f64, SeparationError> {
    let reference = integrate_ode(structure, problem, k, interval, init, h / 8.0)?;
    let endpoint = |sol: &OdeSolution| *sol.phi.last().unwrap();
    let coarse = integrate_ode(structure, problem, k, interval, init, h)?;
    let fine = integrate_ode(structure, problem, k, interval, init, h / 2.0)?;
    let e1 = (endpoint(&coarse) - endpoint(&reference)).abs();
    let e2 = (endpoint(&fine) - endpoint(&reference)).abs();
    Ok((e1 / e2).log2())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::structures::builtin;

    #[test]
    fn lambda_relation() {
        let s = builtin("dim6_one_block").unwrap();
        let p = SeparationProblem::new(&s, vec![0.3, -0.2], vec![0.5, 0.1, -0.4]);
        // m = 2 blocks make the relation the identity
        assert!(p.lambda_relation_residual(&s) < 1e-12);
        assert_eq!(p.lambdas(&s), vec![0.5, 0.1, -0.4]);
    }

    #[test]
    fn harmonic_oscillator_reduction() {
        // flat-like reduction: sigma = x, no blocks, omega = 0, f = 0,
        // lambda(s) = lambda_0 + lambda_1 s. The ODE becomes
        // phi'' = eps (lambda_0 + lambda_1 rho) phi... constant-coefficient
        // only once sigma is linear AND lambda_1 = 0: phi'' = eps*lambda_0*phi.
        let s = builtin("dim4_two_eigen").unwrap();
        let p = SeparationProblem::new(&s, vec![0.0, 0.0], vec![4.0, 0.0]);
        // with sigma = x, no blocks, omega = f = 0 the ODE collapses to
        // phi'' = -eps*lambda_0*phi; eps_1 = +1 and lambda_0 = 4 oscillate
        let sol = integrate_ode(&s, &p, 0, (2.05, 2.95), (1.0, 0.0), 1e-3).unwrap();
        let omega: f64 = 2.0; // sqrt(4)
        let want = (omega * 0.9_f64).cos();
        let got = *sol.phi.last().unwrap();
        assert!((got - want).abs() < 1e-10, "got {got}, want {want}");

        // residual of the integrated solution along the grid
        let r = separated_ode_residual(&s, &p, &sol).unwrap();
        assert!(r < 1e-6, "{r}");
    }

    #[test]
    fn constant_solution_zero_data() {
        // omega = 0, f = 0, lambda = 0: phi = const solves the ODE
        let s = builtin("dim4_two_eigen").unwrap();
        let p = SeparationProblem::new(&s, vec![0.0, 0.0], vec![0.0, 0.0]);
        let sol = integrate_ode(&s, &p, 0, (2.1, 2.9), (1.0, 0.0), 1e-3).unwrap();
        for v in &sol.phi {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let r = separated_ode_residual(&s, &p, &sol).unwrap();
        assert!(r < 1e-12);
    }

    #[test]
    fn rk4_order_measured() {
        let s = builtin("dim4_two_eigen").unwrap();
        let p = SeparationProblem::new(&s, vec![0.4, -0.3], vec![1.0, -0.5]);
        let order = rk4_convergence_order(&s, &p, 0, (2.1, 2.9), (1.0, 0.3), 2e-2).unwrap();
        assert!((order - 4.0).abs() < 0.2, "observed order {order}");
    }

    #[test]
    fn interval_must_stay_in_box() {
        let s = builtin("dim4_two_eigen").unwrap();
        let p = SeparationProblem::new(&s, vec![0.0, 0.0], vec![0.0, 0.0]);
        // interval reaching down to 0.5 would cross the second eigenvalue
        // range; the declared box forbids it
        assert!(matches!(
            integrate_ode(&s, &p, 0, (0.5, 2.5), (1.0, 0.0), 1e-3),
            Err(SeparationError::IntervalOutsideBox { .. })
        ));
        assert!(matches!(
            integrate_ode(&s, &p, 5, (2.1, 2.9), (1.0, 0.0), 1e-3),
            Err(SeparationError::BadEigenIndex(5))
        ));
    }

    #[test]
    fn taylor_extension_matches_grid() {
        let s = builtin("dim4_two_eigen").unwrap();
        let p = SeparationProblem::new(&s, vec![0.4, -0.3], vec![1.0, -0.5]);
        let sol = integrate_ode(&s, &p, 0, (2.1, 2.9), (1.0, 0.3), 1e-3).unwrap();
        // at a grid node the Taylor value must equal the stored solution
        let idx = 250;
        let chi = sol.lo + idx as f64 * sol.h;
        let c = sol.taylor_at(&s, &p, chi, 4).unwrap();
        assert!((c[0] - sol.phi[idx]).abs() < 1e-12);
        assert!((c[1] - sol.dphi[idx]).abs() < 1e-12);
        // Taylor-predict the neighbour node
        let h = sol.h;
        let pred: f64 = c.iter().enumerate().map(|(m, &cm)| cm * h.powi(m as i32)).sum();
        assert!((pred - sol.phi[idx + 1]).abs() < 1e-12);
    }

    #[test]
    fn dim4_eigenfunction_pipeline() {
        let s = builtin("dim4_two_eigen").unwrap();
        let p = SeparationProblem::new(&s, vec![0.4, -0.3], vec![0.8, -0.2]);
        let sol1 = integrate_ode(&s, &p, 0, (2.05, 2.95), (1.0, 0.2), 1e-3).unwrap();
        let sol2 = integrate_ode(&s, &p, 1, (0.05, 0.95), (1.0, -0.1), 1e-3).unwrap();
        assert!(separated_ode_residual(&s, &p, &sol1).unwrap() < 1e-6);
        assert!(separated_ode_residual(&s, &p, &sol2).unwrap() < 1e-6);
        let ansatz = Ansatz { problem: p.clone(), factors: vec![sol1, sol2], block_factors: vec![] };
        let mut rng = Rng::seed_from(17);
        let points: Vec<Vec<f64>> = (0..10).map(|_| rng.point_in_box(&s.sample_box, 0.07)).collect();
        let r = eigen_residual(&s, &p, &ansatz, None, &[0.3, 1.8, 4.0], &points).unwrap();
        assert!(r.q_residual < 1e-5, "{r:?}");
        assert!(r.l_residual < 1e-8, "{r:?}");

        // corrupting one lambda breaks the eigen relation
        let mut bad = p.clone();
        bad.lambda_tilde[0] += 1e-2;
        let rb = eigen_residual(&s, &bad, &ansatz, None, &[0.3], &points).unwrap();
        assert!(rb.q_residual > 1e-3, "{rb:?}");
    }

    #[test]
    fn dim4_pipeline_with_potential() {
        let s = builtin("dim4_two_eigen").unwrap();
        let vars = vec!["rho".to_string()];
        let f_expr = ExprField::parse("rho^2", &vars).unwrap();
        let p = SeparationProblem::new(&s, vec![0.2, -0.5], vec![0.5, 0.3])
            .with_f_rho(vec![Some(f_expr.clone()), Some(f_expr.clone())]);
        let sol1 = integrate_ode(&s, &p, 0, (2.05, 2.95), (1.0, 0.1), 1e-3).unwrap();
        let sol2 = integrate_ode(&s, &p, 1, (0.05, 0.95), (1.0, 0.4), 1e-3).unwrap();
        let ansatz = Ansatz { problem: p.clone(), factors: vec![sol1, sol2], block_factors: vec![] };
        let se0 = s.eval(&[2.5, 0.5, 0.0, 0.0], 2).unwrap();
        let choice = PotentialChoice::rho_power(&se0, 2);
        let mut rng = Rng::seed_from(18);
        let points: Vec<Vec<f64>> = (0..6).map(|_| rng.point_in_box(&s.sample_box, 0.07)).collect();
        let r = eigen_residual(&s, &p, &ansatz, Some(&choice), &[0.3, 4.0], &points).unwrap();
        assert!(r.q_residual < 1e-5, "{r:?}");
        assert!(r.l_residual < 1e-8, "{r:?}");
    }

    #[test]
    fn flat_trivial_plane_wave() {
        // r = 0: psi = product of block plane waves; lambda-tilde solved from
        // the two block Laplacian eigenvalues
        let s = builtin("flat_trivial").unwrap();
        let (k1, k2): ((f64, f64), (f64, f64)) = ((0.7, 0.4), (0.3, -0.6));
        let e1 = k1.0 * k1.0 + k1.1 * k1.1;
        let e2 = k2.0 * k2.0 + k2.1 * k2.1;
        // prefac_gamma * e_gamma = sum_j lt_j c_gamma^j with prefac_1 = (1-3),
        // prefac_2 = (3-1)
        let (c1, c2) = (1.0, 3.0);
        let rhs1 = (c1 - c2) * e1;
        let rhs2 = (c2 - c1) * e2;
        let lt1 = (rhs2 - rhs1) / (c2 - c1);
        let lt0 = rhs1 - lt1 * c1;
        let p = SeparationProblem::new(&s, vec![], vec![lt0, lt1]);
        let bf1 = BlockFactor::complex(
            &format!("cos({}*y1 + {}*y2)", k1.0, k1.1),
            &format!("sin({}*y1 + {}*y2)", k1.0, k1.1),
            2,
        )
        .unwrap();
        let bf2 = BlockFactor::complex(
            &format!("cos({}*y1 + {}*y2)", k2.0, k2.1),
            &format!("sin({}*y1 + {}*y2)", k2.0, k2.1),
            2,
        )
        .unwrap();
        // PDE residuals for both blocks
        for (gi, bf) in [(0, &bf1), (1, &bf2)] {
            let r = separated_pde_residual(&s, &p, gi, bf, &[0.2, -0.3]).unwrap();
            assert!(r < 1e-10, "block {gi}: {r}");
        }
        let ansatz = Ansatz { problem: p.clone(), factors: vec![], block_factors: vec![bf1, bf2] };
        let mut rng = Rng::seed_from(19);
        let points: Vec<Vec<f64>> = (0..8).map(|_| rng.point_in_box(&s.sample_box, 0.07)).collect();
        let r = eigen_residual(&s, &p, &ansatz, None, &[0.2, 2.0, 5.5], &points).unwrap();
        assert!(r.q_residual < 1e-10, "{r:?}");
        assert!(r.l_residual < 1e-12, "{r:?}");
    }

    #[test]
    fn two_route_operator_agreement() {
        let mut rng = Rng::seed_from(23);
        for name in ["flat_trivial", "dim4_two_eigen", "dim6_one_block"] {
            let s = builtin(name).unwrap();
            let battery = crate::quantization::test_battery(&s.coord_names, s.r, 7);
            for _ in 0..3 {
                let x = rng.point_in_box(&s.sample_box, 0.05);
                let se = s.eval(&x, 4).unwrap();
                let ctx = se.lambda.ctx();
                for tf in battery.iter().take(4) {
                    let f = tf.eval(&x, ctx);
                    for t in [0.45, 3.6] {
                        let r = normal_coords_operator(&se, t, &f).unwrap();
                        assert!(r < 1e-8, "{name} t={t} {}: {r}", tf.label);
                    }
                }
            }
        }
    }

    #[test]
    fn dim6_block_pipeline() {
        let s = builtin("dim6_one_block").unwrap();
        // Landau-type closed-form block factor: with beta = (omega2 - 5 omega1) y1,
        // psi_b = exp(i k y2) exp(-|kappa|(y1 + k/kappa)^2 / 2) solves the block
        // equation with eigenvalue |kappa|
        let (w1, w2) = (-0.2, 0.3);
        let kappa: f64 = w2 - 5.0 * w1; // 1.3
        let kwave = 0.4;
        let shift = kwave / kappa;
        let gauss = format!("exp(-{}*(y1 + {})^2)", kappa.abs() / 2.0, shift);
        let bf = BlockFactor::complex(
            &format!("cos({kwave}*y2) * {gauss}"),
            &format!("sin({kwave}*y2) * {gauss}"),
            2,
        )
        .unwrap();
        // lambda-tilde: sum_j lt_j 5^j = |kappa|; pick lt2, lt1 and solve lt0
        let (lt2, lt1) = (0.02, -0.05);
        let lt0 = kappa.abs() - lt1 * 5.0 - lt2 * 25.0;
        let p = SeparationProblem::new(&s, vec![w1, w2], vec![lt0, lt1, lt2]);

        // block PDE residual with the alpha cross terms active
        for y in [[0.2, -0.3], [-0.5, 0.1], [0.0, 0.4]] {
            let r = separated_pde_residual(&s, &p, 0, &bf, &y).unwrap();
            assert!(r < 1e-6, "pde at {y:?}: {r}");
        }

        // omega = 0 and sin*sin eigenfunction with matched lambda-tilde
        let (a, b) = (0.9, 1.2);
        let p0 = {
            let e = a * a + b * b;
            let (l2, l1) = (0.0, 0.0);
            let l0 = e - 5.0 * l1 - 25.0 * l2;
            SeparationProblem::new(&s, vec![0.0, 0.0], vec![l0, l1, l2])
        };
        let bf0 = BlockFactor::real(&format!("sin({a}*y1) * sin({b}*y2)"), 2).unwrap();
        let r = separated_pde_residual(&s, &p0, 0, &bf0, &[0.3, 0.2]).unwrap();
        assert!(r < 1e-7, "sin*sin block: {r}");

        // full pipeline: integrate both ODEs, assemble, certify
        let sol1 = integrate_ode(&s, &p, 0, (2.05, 2.95), (1.0, 0.15), 1e-3).unwrap();
        let sol2 = integrate_ode(&s, &p, 1, (0.05, 0.95), (1.0, -0.2), 1e-3).unwrap();
        assert!(separated_ode_residual(&s, &p, &sol1).unwrap() < 1e-6);
        assert!(separated_ode_residual(&s, &p, &sol2).unwrap() < 1e-6);
        let ansatz = Ansatz { problem: p.clone(), factors: vec![sol1, sol2], block_factors: vec![bf] };
        let mut rng = Rng::seed_from(29);
        let points: Vec<Vec<f64>> = (0..6).map(|_| rng.point_in_box(&s.sample_box, 0.07)).collect();
        let r = eigen_residual(&s, &p, &ansatz, None, &[0.35, 1.9, 6.0], &points).unwrap();
        assert!(r.q_residual < 1e-5, "{r:?}");
        assert!(r.l_residual < 1e-8, "{r:?}");
    }
}
