//! Numerical verifier for the linear covariance analysis behind the
//! augmentation strategy.
//!
//! The setting: features under the old concept are drawn with covariance
//! `Sigma_A = beta I + U diag(nu) U^T` (diagonal plus low rank, `U` having
//! `k < d` orthonormal columns), the new concept has isotropic covariance
//! `Sigma_B = alpha I`, and the deployed mixture blends them as
//! `Sigma = (1 - gamma) Sigma_A + gamma Sigma_B` with `tau` denoting the
//! blended diagonal scale `(1 - gamma) beta + gamma alpha`. The relative
//! error of approximating `Sigma` by some `S` is the gap matrix
//! `Delta(S) = Sigma^{-1/2} (Sigma - S) Sigma^{-1/2}`.
//!
//! Verified claims, each over randomized instance sweeps with exact linear
//! algebra:
//!
//! * gap bound (`theorem-1`): when `|Delta(Sigma_A)| <= 1/2`, the excess
//!   prediction risk of the stale weights is at most
//!   `4 L0 |Delta(Sigma_A)|^2` with `L0 = z_A^T Sigma^{-1} z_A`;
//! * closed form (`proposition-1`): `|Delta(Sigma_A)| =
//!   gamma (alpha - beta) / tau` when `max nu_i` lies in
//!   `[alpha - beta, 2 (alpha - beta)]`;
//! * shift improvement (`theorem-2`): `|Delta(Sigma_A + c I)| <=
//!   |Delta(Sigma_A)|` for the presets `c = gamma` and `c = tau`, gated on
//!   two candidate upper bounds for `max nu_i`. The source material is
//!   ambiguous about both the preset and the bound, so all four
//!   combinations are swept and the report records which ones hold instead
//!   of presupposing a winner.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance for exact algebraic identities; Monte Carlo oracles use their
/// own looser percentages.
pub const TOL_EXACT: f64 = 1e-9;

/// One structured covariance problem.
#[derive(Debug, Clone, PartialEq)]
pub struct CovInstance {
    pub d: usize,
    pub k: usize,
    /// Isotropic scale of the new concept's covariance.
    pub alpha: f64,
    /// Diagonal scale of the old concept's covariance.
    pub beta: f64,
    /// Mixture weight on the new concept.
    pub gamma: f64,
    /// d x k orthonormal basis of the correlated subspace.
    pub u: DMatrix<f64>,
    /// Positive low-rank eigenvalues, one per column of `u`.
    pub nu: Vec<f64>,
    /// Cross-moment vector the weights are solved against.
    pub z_a: DVector<f64>,
}

impl CovInstance {
    /// Blended diagonal scale `(1 - gamma) beta + gamma alpha`.
    pub fn tau(&self) -> f64 {
        (1.0 - self.gamma) * self.beta + self.gamma * self.alpha
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k >= self.d {
            return Err(Error::Config(format!(
                "need 0 <= k < d, got k = {}, d = {}",
                self.k, self.d
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("alpha must be positive and finite".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("beta must be positive and finite".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config("gamma must lie in (0, 1)".into()));
        }
        if self.u.nrows() != self.d || self.u.ncols() != self.k {
            return Err(Error::Config("u must be d x k".into()));
        }
        if self.nu.len() != self.k {
            return Err(Error::Config("nu must have one entry per column of u".into()));
        }
        if self.nu.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("nu entries must be positive and finite".into()));
        }
        if self.k > 0 {
            let gram = self.u.transpose() * &self.u;
            let worst = (&gram - DMatrix::identity(self.k, self.k)).amax();
            if worst > 1e-10 {
                return Err(Error::Config(format!(
                    "u is not orthonormal: max Gram deviation {worst:.3e}"
                )));
            }
        }
        if self.z_a.len() != self.d || self.z_a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("z_a must be a finite d-vector".into()));
        }
        let tau = self.tau();
        if !tau.is_finite() || tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        Ok(())
    }
}

/// Flat, serializable image of an instance plus the inequality values that
/// made it interesting; enough to reconstruct and re-verify it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovInstanceRecord {
    pub d: usize,
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub nu: Vec<f64>,
    /// Column-major d x k entries of `u`.
    pub u: Vec<f64>,
    pub z_a: Vec<f64>,
    pub lhs: f64,
    pub rhs: f64,
    pub context: String,
}

impl CovInstanceRecord {
    pub fn from_instance(inst: &CovInstance, lhs: f64, rhs: f64, context: &str) -> Self {
        Self {
            d: inst.d,
            k: inst.k,
            alpha: inst.alpha,
            beta: inst.beta,
            gamma: inst.gamma,
            nu: inst.nu.clone(),
            u: inst.u.as_slice().to_vec(),
            z_a: inst.z_a.as_slice().to_vec(),
            lhs,
            rhs,
            context: context.to_string(),
        }
    }

    pub fn to_instance(&self) -> Result<CovInstance> {
        let inst = CovInstance {
            d: self.d,
            k: self.k,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            u: DMatrix::from_column_slice(self.d, self.k, &self.u),
            nu: self.nu.clone(),
            z_a: DVector::from_column_slice(&self.z_a),
        };
        inst.validate()?;
        Ok(inst)
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

const JACOBI_MAX_SWEEPS: usize = 64;

/// Eigenvalues (ascending) of a symmetric matrix, plus the orthonormal
/// eigenvectors when `accumulate` is set, computed with cyclic Jacobi
/// rotations.
///
/// The QL solver bundled with nalgebra can stop early on spectra that mix an
/// isolated eigenvalue with a tight cluster, silently leaving reconstruction
/// residuals around 1e-4. The closed-form checks in this module demand nine
/// digits, so they get the slower rotation method, which drives the
/// off-diagonal mass to machine epsilon on every symmetric input. The
/// matrices involved stay small enough that the extra sweeps are free.
fn jacobi_eigen(m: &DMatrix<f64>, accumulate: bool) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
    let d = m.nrows();
    let mut a = symmetrize(m);
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("eigensolver input has non-finite entries".into()));
    }
    let mut v = if accumulate {
        Some(DMatrix::<f64>::identity(d, d))
    } else {
        None
    };
    if d > 1 {
        let tol = 1e-15 * a.norm().max(f64::MIN_POSITIVE);
        let mut converged = false;
        for _ in 0..JACOBI_MAX_SWEEPS {
            let mut off2 = 0.0;
            for p in 0..d {
                for q in (p + 1)..d {
                    off2 += a[(p, q)] * a[(p, q)];
                }
            }
            if off2.sqrt() <= tol {
                converged = true;
                break;
            }
            for p in 0..d - 1 {
                for q in (p + 1)..d {
                    let apq = a[(p, q)];
                    if apq == 0.0 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                    let t = if theta.abs() > 1e150 {
                        0.5 / theta
                    } else {
                        let sign = if theta < 0.0 { -1.0 } else { 1.0 };
                        sign / (theta.abs() + (theta * theta + 1.0).sqrt())
                    };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    let app = a[(p, p)];
                    let aqq = a[(q, q)];
                    a[(p, p)] = app - t * apq;
                    a[(q, q)] = aqq + t * apq;
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    for i in 0..d {
                        if i == p || i == q {
                            continue;
                        }
                        let aip = a[(i, p)];
                        let aiq = a[(i, q)];
                        a[(i, p)] = c * aip - s * aiq;
                        a[(p, i)] = a[(i, p)];
                        a[(i, q)] = s * aip + c * aiq;
                        a[(q, i)] = a[(i, q)];
                    }
                    if let Some(vm) = v.as_mut() {
                        for i in 0..d {
                            let vip = vm[(i, p)];
                            let viq = vm[(i, q)];
                            vm[(i, p)] = c * vip - s * viq;
                            vm[(i, q)] = s * vip + c * viq;
                        }
                    }
                }
            }
        }
        if !converged {
            return Err(Error::Numeric("jacobi eigensolver failed to converge".into()));
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        a[(i, i)]
            .partial_cmp(&a[(j, j)])
            .expect("eigenvalues are finite")
    });
    let values = DVector::from_iterator(d, order.iter().map(|&i| a[(i, i)]));
    let vectors = v.map(|vm| {
        let mut sorted = DMatrix::zeros(d, d);
        for (col, &i) in order.iter().enumerate() {
            sorted.set_column(col, &vm.column(i));
        }
        sorted
    });
    Ok((values, vectors))
}

fn spectral_norm_sym(m: &DMatrix<f64>) -> Result<f64> {
    let (values, _) = jacobi_eigen(m, false)?;
    Ok(values.iter().fold(0.0f64, |acc, l| acc.max(l.abs())))
}

fn inv_sqrt_of_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (values, vectors) = jacobi_eigen(m, true)?;
    let min_eig = if values.is_empty() { 0.0 } else { values[0] };
    if min_eig.is_nan() || min_eig <= 0.0 {
        return Err(Error::Numeric(format!(
            "matrix is not positive definite (min eigenvalue {min_eig:.3e})"
        )));
    }
    let vectors = vectors.expect("eigenvectors were requested");
    let diag = DMatrix::from_diagonal(&values.map(|l| 1.0 / l.sqrt()));
    Ok(symmetrize(&(&vectors * diag * vectors.transpose())))
}

/// Spectral norm of `Sigma^{-1/2} (Sigma - S) Sigma^{-1/2}` computed through
/// the Cholesky factor of `Sigma`: with `Sigma = L L^T`, the congruent matrix
/// `L^{-1} (Sigma - S) L^{-T}` shares its eigenvalues and needs only
/// backward-stable triangular solves, so no accuracy is lost to the matrix
/// square root.
fn whitened_gap_norm(chol_l: &DMatrix<f64>, sigma_minus_s: &DMatrix<f64>) -> Result<f64> {
    let half = chol_l
        .solve_lower_triangular(sigma_minus_s)
        .ok_or_else(|| Error::Numeric("cholesky factor is singular".into()))?;
    let whitened = chol_l
        .solve_lower_triangular(&half.transpose())
        .ok_or_else(|| Error::Numeric("cholesky factor is singular".into()))?;
    spectral_norm_sym(&whitened)
}

/// Solves `m w = z` for symmetric positive-definite `m` and insists the
/// residual stays below `1e-10 |z|`.
pub fn solve_spd(m: &DMatrix<f64>, z: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("matrix is not positive definite".into()))?;
    let w = chol.solve(z);
    let residual = (m * &w - z).norm();
    if residual > 1e-10 * z.norm().max(1.0) {
        return Err(Error::Numeric(format!(
            "linear solve residual {residual:.3e} exceeds tolerance"
        )));
    }
    Ok(w)
}

/// Everything derivable from one instance: the three covariances, the
/// cached inverse square root of the mixture, the solved weights, and the
/// gap matrix of `Sigma_A`.
#[derive(Debug, Clone)]
pub struct DerivedMats {
    pub instance: CovInstance,
    pub sigma_a: DMatrix<f64>,
    pub sigma_b: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub sigma_inv_sqrt: DMatrix<f64>,
    /// Lower Cholesky factor of `sigma`, kept for whitened norm evaluations.
    pub sigma_chol_l: DMatrix<f64>,
    /// Spectrum of `sigma` in ascending order.
    pub sigma_eigenvalues: DVector<f64>,
    pub w_star: DVector<f64>,
    pub w_a: DVector<f64>,
    /// `z_A^T Sigma^{-1} z_A`.
    pub l0: f64,
    pub delta_a: DMatrix<f64>,
    pub delta_a_norm: f64,
}

/// Which approximation the gap matrix is taken against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GapTarget {
    A,
    Aprime(f64),
}

/// Materializes the covariances, solves the weight systems, and caches the
/// spectral pieces every verifier needs.
pub fn build(instance: &CovInstance) -> Result<DerivedMats> {
    instance.validate()?;
    let d = instance.d;
    let eye = DMatrix::<f64>::identity(d, d);
    let low_rank = if instance.k > 0 {
        &instance.u
            * DMatrix::from_diagonal(&DVector::from_column_slice(&instance.nu))
            * instance.u.transpose()
    } else {
        DMatrix::zeros(d, d)
    };
    let sigma_a = symmetrize(&(&eye * instance.beta + &low_rank));
    let sigma_b = &eye * instance.alpha;
    let sigma = symmetrize(&(&sigma_a * (1.0 - instance.gamma) + &sigma_b * instance.gamma));

    let (sigma_eigenvalues, _) = jacobi_eigen(&sigma, false)?;
    let sigma_inv_sqrt = inv_sqrt_of_spd(&sigma)?;
    let sigma_chol_l = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("mixture covariance is not positive definite".into()))?
        .l();
    let w_star = solve_spd(&sigma, &instance.z_a)?;
    let w_a = solve_spd(&sigma_a, &instance.z_a)?;
    let l0 = instance.z_a.dot(&w_star);
    let delta_a = symmetrize(&(&sigma_inv_sqrt * (&sigma - &sigma_a) * &sigma_inv_sqrt));
    let delta_a_norm = whitened_gap_norm(&sigma_chol_l, &(&sigma - &sigma_a))?;

    Ok(DerivedMats {
        instance: instance.clone(),
        sigma_a,
        sigma_b,
        sigma,
        sigma_inv_sqrt,
        sigma_chol_l,
        sigma_eigenvalues,
        w_star,
        w_a,
        l0,
        delta_a,
        delta_a_norm,
    })
}

impl DerivedMats {
    /// `Sigma_A + c I`.
    pub fn sigma_aprime(&self, c: f64) -> DMatrix<f64> {
        &self.sigma_a + DMatrix::identity(self.instance.d, self.instance.d) * c
    }

    /// Stale weights re-solved against the shifted covariance.
    pub fn w_aprime(&self, c: f64) -> Result<DVector<f64>> {
        solve_spd(&self.sigma_aprime(c), &self.instance.z_a)
    }
}

/// The gap matrix of the chosen approximation and its spectral norm.
pub fn gap_matrix(mats: &DerivedMats, which: GapTarget) -> Result<(DMatrix<f64>, f64)> {
    match which {
        GapTarget::A => Ok((mats.delta_a.clone(), mats.delta_a_norm)),
        GapTarget::Aprime(c) => {
            if !c.is_finite() {
                return Err(Error::Numeric(format!("shift constant {c} is not finite")));
            }
            let s = mats.sigma_aprime(c);
            let diff = &mats.sigma - &s;
            let delta = symmetrize(&(&mats.sigma_inv_sqrt * &diff * &mats.sigma_inv_sqrt));
            let norm = whitened_gap_norm(&mats.sigma_chol_l, &diff)?;
            Ok((delta, norm))
        }
    }
}

/// Excess prediction risk `(w1 - w2)^T Sigma (w1 - w2)`.
pub fn prediction_gap(w1: &DVector<f64>, w2: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
    let diff = w1 - w2;
    diff.dot(&(sigma * &diff))
}

/// Named assumption gate outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionRecord {
    pub name: String,
    pub holds: bool,
}

/// One verified inequality: `satisfied` is exactly `lhs <= rhs + 1e-9`,
/// and the assumption gates are recorded but never silently enforced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub theorem: String,
    pub assumptions: Vec<AssumptionRecord>,
    pub assumptions_hold: bool,
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
    pub slack: f64,
    pub notes: Vec<String>,
}

impl TheoremReport {
    fn new(theorem: &str, assumptions: Vec<AssumptionRecord>, lhs: f64, rhs: f64) -> Self {
        let assumptions_hold = assumptions.iter().all(|a| a.holds);
        Self {
            theorem: theorem.to_string(),
            assumptions,
            assumptions_hold,
            lhs,
            rhs,
            satisfied: lhs <= rhs + TOL_EXACT,
            slack: rhs - lhs,
            notes: Vec::new(),
        }
    }
}

fn theorem1_sides(mats: &DerivedMats) -> (f64, f64) {
    let lhs = prediction_gap(&mats.w_star, &mats.w_a, &mats.sigma);
    let rhs = 4.0 * mats.l0 * mats.delta_a_norm * mats.delta_a_norm;
    (lhs, rhs)
}

/// Gap bound check: `lhs` is the exact excess risk of the stale weights,
/// `rhs` is `4 L0 |Delta(Sigma_A)|^2`. The `|Delta| <= 1/2` gate is
/// recorded; the inequality is evaluated either way.
pub fn verify_theorem1(instance: &CovInstance) -> Result<TheoremReport> {
    let mats = build(instance)?;
    let (lhs, rhs) = theorem1_sides(&mats);
    let assumptions = vec![AssumptionRecord {
        name: "gap-norm-at-most-half".into(),
        holds: mats.delta_a_norm <= 0.5,
    }];
    let mut report = TheoremReport::new("theorem-1", assumptions, lhs, rhs);
    report.notes.push(format!("delta_norm = {:.17e}", mats.delta_a_norm));
    report.notes.push(format!("l0 = {:.17e}", mats.l0));
    Ok(report)
}

fn prop1_closed_form(instance: &CovInstance) -> f64 {
    instance.gamma * (instance.alpha - instance.beta) / instance.tau()
}

/// Spectral norm of the gap matrix computed against the variant base
/// covariance `tau I + gamma U diag(nu) U^T`, whose low-rank coefficient is
/// `gamma` where the mixture yields `1 - gamma`. The two conventions
/// genuinely disagree, so sweeps report how far this variant strays from
/// the closed form instead of silently picking one.
fn prop1_variant_norm(instance: &CovInstance, sigma_a: &DMatrix<f64>) -> Result<f64> {
    let d = instance.d;
    let low_rank = if instance.k > 0 {
        &instance.u
            * DMatrix::from_diagonal(&DVector::from_column_slice(&instance.nu))
            * instance.u.transpose()
            * instance.gamma
    } else {
        DMatrix::zeros(d, d)
    };
    let alt_sigma = symmetrize(&(DMatrix::<f64>::identity(d, d) * instance.tau() + low_rank));
    let chol_l = alt_sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("variant covariance is not positive definite".into()))?
        .l();
    whitened_gap_norm(&chol_l, &(&alt_sigma - sigma_a))
}

fn prop1_assumptions(instance: &CovInstance) -> Vec<AssumptionRecord> {
    let q = instance.alpha - instance.beta;
    let nu_max = instance.nu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    vec![
        AssumptionRecord { name: "alpha-at-least-beta".into(), holds: q >= 0.0 },
        AssumptionRecord {
            name: "nu-max-within-band".into(),
            holds: instance.k > 0 && nu_max >= q && nu_max <= 2.0 * q,
        },
    ]
}

/// Closed-form check: compares the numeric `|Delta(Sigma_A)|` against
/// `gamma (alpha - beta) / tau`. `lhs` is the absolute difference and
/// `rhs` is zero, so `satisfied` means agreement within 1e-9.
pub fn verify_prop1(instance: &CovInstance) -> Result<TheoremReport> {
    let mats = build(instance)?;
    let closed = prop1_closed_form(instance);
    let numeric = mats.delta_a_norm;
    let mut report = TheoremReport::new(
        "proposition-1",
        prop1_assumptions(instance),
        (numeric - closed).abs(),
        0.0,
    );
    report.notes.push(format!("numeric_norm = {numeric:.17e}"));
    report.notes.push(format!("closed_form = {closed:.17e}"));
    let variant = prop1_variant_norm(instance, &mats.sigma_a)?;
    report.notes.push(format!(
        "variant_base_norm = {variant:.17e}, deviating from the closed form by {:.17e}",
        (variant - closed).abs()
    ));
    Ok(report)
}

/// The two shift presets the shift-improvement claim is checked under.
pub const THEOREM2_C_VARIANTS: [&str; 2] = ["gamma", "tau"];

/// Band floor (always `alpha - beta`) and the two candidate caps on
/// `max nu_i`, each additionally clipped at `2 (alpha - beta)`.
fn theorem2_bands(instance: &CovInstance) -> (f64, f64, f64) {
    let q = instance.alpha - instance.beta;
    let tau = instance.tau();
    let denom = tau - instance.gamma * q;
    let statement_upper = (tau * (3.0 * instance.gamma * q - instance.beta) / denom).min(2.0 * q);
    let proof_upper = (tau * (2.0 * q - tau) / denom).min(2.0 * q);
    (q, statement_upper, proof_upper)
}

fn theorem2_assumptions(instance: &CovInstance) -> Vec<AssumptionRecord> {
    let (q, statement_upper, proof_upper) = theorem2_bands(instance);
    let nu_max = instance.nu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let alpha_floor = instance.beta * (2.0 - instance.gamma) / (3.0 - instance.gamma);
    vec![
        AssumptionRecord { name: "alpha-floor".into(), holds: instance.alpha >= alpha_floor },
        AssumptionRecord {
            name: "nu-band-statement".into(),
            holds: instance.k > 0 && nu_max >= q && nu_max <= statement_upper,
        },
        AssumptionRecord {
            name: "nu-band-proof".into(),
            holds: instance.k > 0 && nu_max >= q && nu_max <= proof_upper,
        },
    ]
}

/// Shift-improvement check for both presets `c = gamma` and `c = tau`:
/// `lhs = |Delta(Sigma_A + c I)|`, `rhs = |Delta(Sigma_A)|`. Both candidate
/// `nu` caps are gated separately ("statement" and "proof" bands) together
/// with the floor `alpha >= beta (2 - gamma) / (3 - gamma)`; the sweep
/// cross-tabulates preset against band.
pub fn verify_theorem2(instance: &CovInstance) -> Result<Vec<TheoremReport>> {
    let mats = build(instance)?;
    let gates = theorem2_assumptions(instance);
    let alpha_ok = gates[0].holds;
    let either_band = gates[1].holds || gates[2].holds;

    let mut reports = Vec::with_capacity(2);
    for (label, c) in [("gamma", instance.gamma), ("tau", instance.tau())] {
        let (_, lhs) = gap_matrix(&mats, GapTarget::Aprime(c))?;
        let rhs = mats.delta_a_norm;
        let mut report =
            TheoremReport::new(&format!("theorem-2 (c = {label})"), gates.clone(), lhs, rhs);
        report.assumptions_hold = alpha_ok && either_band;
        report.notes.push(format!("c = {c:.17e}"));
        reports.push(report);
    }
    Ok(reports)
}

/// Draws `n` points `x ~ N(0, Sigma_A)`, labels them with the exact linear
/// target, perturbs the features with `N(0, c I)` noise, and returns the
/// ordinary least squares fit of the labels on the noisy features. As `n`
/// grows this converges to `(Sigma_A + c I)^{-1} Sigma_A target`.
pub fn monte_carlo_noisy_ols(
    sigma_a: &DMatrix<f64>,
    target_direction: &DVector<f64>,
    c: f64,
    n: usize,
    seed: u64,
) -> Result<DVector<f64>> {
    let d = sigma_a.nrows();
    if sigma_a.ncols() != d || target_direction.len() != d {
        return Err(Error::Bounds("covariance and target shapes disagree".into()));
    }
    if n < d + 1 {
        return Err(Error::Config(format!("need at least {} samples, got {n}", d + 1)));
    }
    if !(c >= 0.0 && c.is_finite()) {
        return Err(Error::Config("noise variance c must be finite and non-negative".into()));
    }
    let chol = sigma_a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("covariance is not positive definite".into()))?;
    let factor = chol.l();
    let noise_std = c.sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gram = DMatrix::<f64>::zeros(d, d);
    let mut moment = DVector::<f64>::zeros(d);
    let mut z = DVector::<f64>::zeros(d);
    for _ in 0..n {
        for e in z.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        let x = &factor * &z;
        let y = target_direction.dot(&x);
        let mut x_noisy = x;
        for e in x_noisy.iter_mut() {
            let u: f64 = rng.sample(StandardNormal);
            *e += noise_std * u;
        }
        gram.ger(1.0, &x_noisy, &x_noisy, 1.0);
        moment.axpy(y, &x_noisy, 1.0);
    }
    let gram = symmetrize(&gram);
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Numeric("rank-deficient design matrix".into()))?;
    Ok(chol.solve(&moment))
}

/// The diagonal of the mixture covariance, the practical stand-in for
/// `tau I`: coordinates outside the span of `U` equal `tau` exactly, those
/// inside exceed it by `(1 - gamma)` times their low-rank loading.
pub fn variance_diag_approx(mats: &DerivedMats) -> DVector<f64> {
    mats.sigma.diagonal()
}

fn instance_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn random_orthonormal(d: usize, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    if k == 0 {
        return DMatrix::zeros(d, 0);
    }
    let g = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

fn random_z(d: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn gen_prop1_instance(seed: u64, index: u64, max_d: usize) -> CovInstance {
    let mut rng = instance_rng(seed, index);
    let d = rng.gen_range(2..=max_d);
    let k = rng.gen_range(1..d);
    let beta = rng.gen_range(1.0..2.0);
    let q = rng.gen_range(0.1..3.0);
    let gamma = rng.gen_range(0.05..0.95);
    let nu: Vec<f64> = (0..k).map(|_| rng.gen_range(q..2.0 * q)).collect();
    let u = random_orthonormal(d, k, &mut rng);
    let z_a = random_z(d, &mut rng);
    CovInstance { d, k, alpha: beta + q, beta, gamma, u, nu, z_a }
}

fn gen_theorem1_instance(seed: u64, index: u64, max_d: usize) -> CovInstance {
    let mut rng = instance_rng(seed, index);
    let d = rng.gen_range(2..=max_d);
    let k = rng.gen_range(1..d);
    let beta = rng.gen_range(1.0..2.0);
    let q = rng.gen_range(0.1..1.5);
    let gamma = rng.gen_range(0.05..0.6);
    let nu: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2 * q..2.0 * q)).collect();
    let u = random_orthonormal(d, k, &mut rng);
    let z_a = random_z(d, &mut rng);
    CovInstance { d, k, alpha: beta + q, beta, gamma, u, nu, z_a }
}

fn gen_theorem2_candidate(seed: u64, index: u64, max_d: usize) -> Option<CovInstance> {
    let mut rng = instance_rng(seed, index);
    let d = rng.gen_range(2..=max_d);
    let k = rng.gen_range(1..d);
    let beta: f64 = rng.gen_range(1.0..2.0);
    let q: f64 = rng.gen_range(0.6..3.0);
    let gamma: f64 = rng.gen_range(0.05..0.5);
    let tau = (1.0 - gamma) * beta + gamma * (beta + q);
    let proof_upper = (tau * (2.0 * q - tau) / (tau - gamma * q)).min(2.0 * q);
    if proof_upper.is_nan() || proof_upper <= q {
        return None;
    }
    let nu: Vec<f64> = (0..k).map(|_| rng.gen_range(q..proof_upper)).collect();
    let u = random_orthonormal(d, k, &mut rng);
    let z_a = random_z(d, &mut rng);
    Some(CovInstance { d, k, alpha: beta + q, beta, gamma, u, nu, z_a })
}

const MAX_COUNTEREXAMPLES: usize = 3;

/// Aggregate of the closed-form sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Sweep {
    pub instances: usize,
    pub satisfied: usize,
    /// Largest |numeric - closed form| seen.
    pub max_abs_error: f64,
    /// Largest deviation of the variant-base norm from the closed form,
    /// showing how far the alternative covariance convention strays.
    pub max_variant_deviation: f64,
    pub counterexamples: Vec<CovInstanceRecord>,
}

/// Aggregate of the gap-bound sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Sweep {
    pub instances: usize,
    pub satisfied: usize,
    pub attempts: usize,
    pub min_slack: f64,
    pub max_delta_norm: f64,
    pub counterexamples: Vec<CovInstanceRecord>,
}

/// One (preset, band) cell of the shift-improvement table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Combo {
    pub c_variant: String,
    pub band: String,
    pub gated: usize,
    pub satisfied: usize,
    pub fraction: f64,
    pub min_slack: f64,
    pub counterexamples: Vec<CovInstanceRecord>,
}

/// Outcome of the noisy-regression Monte Carlo cross-check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyOlsCheck {
    pub dimension: usize,
    pub samples: usize,
    pub c: f64,
    pub max_coord_error: f64,
    pub tolerance: f64,
    pub satisfied: bool,
}

/// Full verification artifact emitted by the CLI; contains no timing so
/// repeated runs with one seed are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub schema_version: u32,
    pub seed: u64,
    pub prop1: Prop1Sweep,
    pub theorem1: Theorem1Sweep,
    pub theorem2: Vec<Theorem2Combo>,
    /// The (preset, band) combinations satisfied on every gated instance.
    pub theorem2_fully_satisfied: Vec<String>,
    pub noisy_ols: NoisyOlsCheck,
}

/// Randomized closed-form sweep: every instance is drawn inside the
/// assumption band, so agreement within 1e-9 is demanded on all of them.
pub fn run_prop1_sweep(n_instances: usize, max_d: usize, seed: u64) -> Result<Prop1Sweep> {
    struct Row {
        instance: CovInstance,
        abs_error: f64,
        variant_deviation: f64,
    }
    let rows: Vec<Row> = (0..n_instances as u64)
        .into_par_iter()
        .map(|i| {
            let instance = gen_prop1_instance(seed, i, max_d);
            let mats = build(&instance)?;
            let closed = prop1_closed_form(&instance);
            let abs_error = (mats.delta_a_norm - closed).abs();
            let variant_deviation = (prop1_variant_norm(&instance, &mats.sigma_a)? - closed).abs();
            Ok(Row { instance, abs_error, variant_deviation })
        })
        .collect::<Result<_>>()?;

    let mut satisfied = 0;
    let mut max_abs_error = 0.0f64;
    let mut max_variant_deviation = 0.0f64;
    let mut counterexamples = Vec::new();
    for row in &rows {
        if row.abs_error <= TOL_EXACT {
            satisfied += 1;
        } else if counterexamples.len() < MAX_COUNTEREXAMPLES {
            counterexamples.push(CovInstanceRecord::from_instance(
                &row.instance,
                row.abs_error,
                0.0,
                "proposition-1 closed form",
            ));
        }
        max_abs_error = max_abs_error.max(row.abs_error);
        max_variant_deviation = max_variant_deviation.max(row.variant_deviation);
    }
    Ok(Prop1Sweep {
        instances: rows.len(),
        satisfied,
        max_abs_error,
        max_variant_deviation,
        counterexamples,
    })
}

/// Randomized gap-bound sweep over admissible instances (those passing the
/// `|Delta| <= 1/2` gate); candidates failing the gate are redrawn.
pub fn run_theorem1_sweep(n_instances: usize, max_d: usize, seed: u64) -> Result<Theorem1Sweep> {
    struct Row {
        instance: CovInstance,
        lhs: f64,
        rhs: f64,
        delta_norm: f64,
    }
    let mut kept: Vec<Row> = Vec::with_capacity(n_instances);
    let mut attempts = 0usize;
    let batch = (n_instances * 2).max(64);
    while kept.len() < n_instances {
        let results: Vec<Option<Row>> = (0..batch as u64)
            .into_par_iter()
            .map(|i| {
                let instance = gen_theorem1_instance(seed, attempts as u64 + i, max_d);
                let mats = build(&instance).ok()?;
                if mats.delta_a_norm > 0.5 {
                    return None;
                }
                let (lhs, rhs) = theorem1_sides(&mats);
                Some(Row { instance, lhs, rhs, delta_norm: mats.delta_a_norm })
            })
            .collect();
        attempts += batch;
        kept.extend(results.into_iter().flatten());
    }
    kept.truncate(n_instances);

    let mut satisfied = 0;
    let mut min_slack = f64::INFINITY;
    let mut max_delta_norm = 0.0f64;
    let mut counterexamples = Vec::new();
    for row in &kept {
        if row.lhs <= row.rhs + TOL_EXACT {
            satisfied += 1;
        } else if counterexamples.len() < MAX_COUNTEREXAMPLES {
            counterexamples.push(CovInstanceRecord::from_instance(
                &row.instance,
                row.lhs,
                row.rhs,
                "theorem-1 gap bound",
            ));
        }
        min_slack = min_slack.min(row.rhs - row.lhs);
        max_delta_norm = max_delta_norm.max(row.delta_norm);
    }
    Ok(Theorem1Sweep {
        instances: kept.len(),
        satisfied,
        attempts,
        min_slack,
        max_delta_norm,
        counterexamples,
    })
}

/// Shift-improvement sweep. Candidates are drawn inside the wider (proof)
/// band and generation continues until at least `statement_target` of them
/// also pass the narrower statement band, so every cell of the resulting
/// table has a healthy denominator. Returns the four (preset, band) cells.
pub fn run_theorem2_sweep(
    statement_target: usize,
    max_d: usize,
    seed: u64,
) -> Result<Vec<Theorem2Combo>> {
    struct Row {
        instance: CovInstance,
        norms: [f64; 2],
        base_norm: f64,
        alpha_ok: bool,
        statement_ok: bool,
        proof_ok: bool,
    }
    let mut rows: Vec<Row> = Vec::new();
    let mut statement_count = 0usize;
    let mut attempt_base = 0u64;
    let batch = (statement_target * 4).max(256);
    while statement_count < statement_target {
        let results: Vec<Option<Result<Row>>> = (0..batch as u64)
            .into_par_iter()
            .map(|i| {
                let instance = gen_theorem2_candidate(seed, attempt_base + i, max_d)?;
                Some(build(&instance).and_then(|mats| {
                    let gates = theorem2_assumptions(&instance);
                    let (_, norm_gamma) = gap_matrix(&mats, GapTarget::Aprime(instance.gamma))?;
                    let (_, norm_tau) = gap_matrix(&mats, GapTarget::Aprime(instance.tau()))?;
                    Ok(Row {
                        instance,
                        norms: [norm_gamma, norm_tau],
                        base_norm: mats.delta_a_norm,
                        alpha_ok: gates[0].holds,
                        statement_ok: gates[1].holds,
                        proof_ok: gates[2].holds,
                    })
                }))
            })
            .collect();
        attempt_base += batch as u64;
        for entry in results.into_iter().flatten() {
            let row = entry?;
            if row.alpha_ok && row.statement_ok {
                statement_count += 1;
            }
            rows.push(row);
        }
    }

    let mut combos = Vec::new();
    for (ci, c_variant) in THEOREM2_C_VARIANTS.iter().enumerate() {
        for band in ["statement", "proof"] {
            let mut gated = 0;
            let mut satisfied = 0;
            let mut min_slack = f64::INFINITY;
            let mut counterexamples = Vec::new();
            for row in &rows {
                let band_ok = match band {
                    "statement" => row.statement_ok,
                    _ => row.proof_ok,
                };
                if !(row.alpha_ok && band_ok) {
                    continue;
                }
                gated += 1;
                let lhs = row.norms[ci];
                let rhs = row.base_norm;
                min_slack = min_slack.min(rhs - lhs);
                if lhs <= rhs + TOL_EXACT {
                    satisfied += 1;
                } else if counterexamples.len() < MAX_COUNTEREXAMPLES {
                    counterexamples.push(CovInstanceRecord::from_instance(
                        &row.instance,
                        lhs,
                        rhs,
                        &format!("theorem-2 c={c_variant} band={band}"),
                    ));
                }
            }
            combos.push(Theorem2Combo {
                c_variant: c_variant.to_string(),
                band: band.to_string(),
                gated,
                satisfied,
                fraction: if gated > 0 { satisfied as f64 / gated as f64 } else { 0.0 },
                min_slack,
                counterexamples,
            });
        }
    }
    Ok(combos)
}

/// Sweep sizes for [`run_verification`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationOptions {
    pub seed: u64,
    pub prop1_instances: usize,
    pub prop1_max_d: usize,
    pub theorem1_instances: usize,
    pub theorem1_max_d: usize,
    pub theorem2_statement_target: usize,
    pub theorem2_max_d: usize,
    pub ols_dimension: usize,
    pub ols_samples: usize,
}

impl Default for VerificationOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            prop1_instances: 10_000,
            prop1_max_d: 50,
            theorem1_instances: 1000,
            theorem1_max_d: 20,
            theorem2_statement_target: 1000,
            theorem2_max_d: 20,
            ols_dimension: 8,
            ols_samples: 100_000,
        }
    }
}

/// Runs every sweep plus the Monte Carlo regression cross-check and bundles
/// the results.
pub fn run_verification(opts: &VerificationOptions) -> Result<TheoryReport> {
    let prop1 = run_prop1_sweep(opts.prop1_instances, opts.prop1_max_d, opts.seed)?;
    let theorem1 = run_theorem1_sweep(opts.theorem1_instances, opts.theorem1_max_d, opts.seed)?;
    let theorem2 =
        run_theorem2_sweep(opts.theorem2_statement_target, opts.theorem2_max_d, opts.seed)?;
    let theorem2_fully_satisfied = theorem2
        .iter()
        .filter(|c| c.gated > 0 && c.satisfied == c.gated)
        .map(|c| format!("c={} band={}", c.c_variant, c.band))
        .collect();

    let d = opts.ols_dimension;
    let sigma_a = DMatrix::<f64>::identity(d, d);
    let mut target = DVector::<f64>::zeros(d);
    target[0] = 1.0;
    let estimate = monte_carlo_noisy_ols(&sigma_a, &target, 1.0, opts.ols_samples, opts.seed)?;
    let closed = &target * 0.5;
    let max_coord_error = (&estimate - &closed).amax();
    let noisy_ols = NoisyOlsCheck {
        dimension: d,
        samples: opts.ols_samples,
        c: 1.0,
        max_coord_error,
        tolerance: 0.02,
        satisfied: max_coord_error <= 0.02,
    };

    Ok(TheoryReport {
        schema_version: 1,
        seed: opts.seed,
        prop1,
        theorem1,
        theorem2,
        theorem2_fully_satisfied,
        noisy_ols,
    })
}
