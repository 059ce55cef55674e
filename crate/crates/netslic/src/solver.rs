//! Calibration solvers: regularized Newton for the RQM branch, the
//! equality-constrained trust-region Newton (NET) for branch pairs, and the
//! sequential pipeline that walks the connected tree and reconstructs
//! absolute correction factors from the estimated ratios.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SMatrix};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formulation::{
    build_design_system, jacobian_theta_psi, swap_reference, theta_hessians, DesignSystem,
};
use crate::model::{
    find_path, BranchId, BusId, CorrectionFactors, LineParams, Phasor, PsiVector,
};
use crate::ratios::{estimate_gamma_multi, estimate_rho, RatioEstimates};
use crate::synthgen::Dataset;

/// Solver settings; the defaults reproduce the reference evaluation setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// RQM-branch regularization coefficient.
    pub lambda: f64,
    /// Branch-pair prior regularization coefficient.
    pub lambda1: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    pub trust_radius_init: f64,
    pub trust_shrink: f64,
    pub trust_grow: f64,
    pub ratio_accept: f64,
    pub ratio_good: f64,
    /// Reconstruction runs: each branch is solved on this many disjoint
    /// sample windows and the ratio estimates are averaged.
    pub m_runs: usize,
    /// Samples per solve window.
    pub n_window: usize,
    /// Add the exact second-order residual term to the Gauss-Newton Hessian.
    pub exact_hessian: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lambda: 0.1,
            lambda1: 0.1,
            max_iters: 100,
            grad_tol: 1e-9,
            step_tol: 1e-12,
            trust_radius_init: 1.0,
            trust_shrink: 0.25,
            trust_grow: 2.0,
            ratio_accept: 0.1,
            ratio_good: 0.75,
            m_runs: 10,
            n_window: 60,
            exact_hessian: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.trust_shrink > 0.0 && self.trust_shrink < 1.0 && self.trust_grow > 1.0) {
            return Err(Error::InvalidInput(
                "trust factors must satisfy 0 < shrink < 1 < grow".into(),
            ));
        }
        if !(0.0 <= self.ratio_accept && self.ratio_accept < self.ratio_good && self.ratio_good <= 1.0)
        {
            return Err(Error::InvalidInput(
                "acceptance ratios must satisfy 0 <= accept < good <= 1".into(),
            ));
        }
        if self.lambda < 0.0 || self.lambda1 < 0.0 {
            return Err(Error::InvalidInput("regularization coefficients must be >= 0".into()));
        }
        if self.m_runs == 0 || self.n_window < crate::model::MIN_SAMPLES {
            return Err(Error::InvalidInput("m_runs >= 1 and n_window >= 3 required".into()));
        }
        Ok(())
    }
}

/// Why an iteration loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    Gradient,
    Step,
}

/// Convergence record of one solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    pub final_gradient_norm: f64,
    pub final_objective: f64,
    pub stop: StopReason,
    /// Objective value after every accepted step, starting at the initial
    /// point. Never increasing.
    pub objective_history: Vec<f64>,
    pub constraint_violation: f64,
}

/// Result of the RQM-branch solve.
#[derive(Debug, Clone, PartialEq)]
pub struct RqmSolution {
    pub psi: PsiVector,
    pub diagnostics: SolveDiagnostics,
    /// ψ₆ within 0.05 of 1 and |ψ₇| ≤ 0.05. A failed check is a data-quality
    /// signal, not a hard error.
    pub plausible: bool,
}

fn entries_from(v: &DVector<f64>, offset: usize) -> [f64; 9] {
    let mut e = [0.0; 9];
    e.copy_from_slice(v.as_slice().get(offset..offset + 9).expect("in range"));
    e
}

/// Residual, gradient, and Hessian contribution of one branch data term at
/// the given unknowns. Returns (objective, gradient9, hessian9x9).
fn branch_terms(
    ds: &DesignSystem,
    e: &[f64; 9],
    exact: bool,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let r = ds.residual(e);
    let jf = jacobian_theta_psi(e);
    let mut jf_dyn = DMatrix::<f64>::zeros(8, 9);
    for i in 0..8 {
        for j in 0..9 {
            jf_dyn[(i, j)] = jf[(i, j)];
        }
    }
    let j = &ds.d * &jf_dyn; // 4n × 9
    let grad = 2.0 * j.transpose() * &r;
    let mut hess = 2.0 * j.transpose() * &j;
    if exact {
        let s = ds.d.transpose() * &r; // 8
        let blocks = theta_hessians(e);
        for k in 0..8 {
            for i in 0..9 {
                for l in 0..9 {
                    hess[(i, l)] += 2.0 * s[k] * blocks[k][(i, l)];
                }
            }
        }
    }
    (r.norm_squared(), grad, hess)
}

/// Solves the regularized RQM-branch problem with Newton's method and a
/// backtracking safeguard. The initial point normally comes from database
/// line parameters and unit correction-factor ratios.
pub fn solve_rqm_branch(
    ds: &DesignSystem,
    config: &SolverConfig,
    init: &PsiVector,
) -> Result<RqmSolution> {
    config.validate()?;
    if init.branch.key() != ds.branch.key() || init.reference_end != ds.reference_end {
        return Err(Error::PipelineOrder(format!(
            "initial point references branch {} end {}, system is branch {} end {}",
            init.branch, init.reference_end, ds.branch, ds.reference_end
        )));
    }
    let lambda = config.lambda;
    let objective = |e: &[f64; 9]| -> f64 {
        ds.data_objective(e) + lambda * ((e[5] - 1.0).powi(2) + e[6].powi(2))
    };
    let grad_hess = |e: &[f64; 9]| -> (f64, DVector<f64>, DMatrix<f64>) {
        let (data_obj, mut g, mut h) = branch_terms(ds, e, config.exact_hessian);
        g[5] += 2.0 * lambda * (e[5] - 1.0);
        g[6] += 2.0 * lambda * e[6];
        h[(5, 5)] += 2.0 * lambda;
        h[(6, 6)] += 2.0 * lambda;
        let obj = data_obj + lambda * ((e[5] - 1.0).powi(2) + e[6].powi(2));
        (obj, g, h)
    };

    let mut x = DVector::from_column_slice(&init.entries);
    let mut f_cur = objective(&entries_from(&x, 0));
    let mut history = vec![f_cur];
    let mut grad_norm = f64::INFINITY;
    for iter in 0..config.max_iters {
        let e = entries_from(&x, 0);
        let (_, g, h) = grad_hess(&e);
        grad_norm = g.norm();
        if grad_norm <= config.grad_tol {
            return Ok(finish_rqm(ds, x, iter, grad_norm, f_cur, history, StopReason::Gradient));
        }
        let d = damped_solve(&h, &g).ok_or_else(|| Error::NonConvergence {
            branch: ds.branch,
            iterations: iter,
            final_gradient_norm: grad_norm,
            objective_history: history.clone(),
        })?;
        // Backtrack until the step decreases the objective.
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha > 1e-12 {
            let trial = &x + alpha * &d;
            let f_trial = objective(&entries_from(&trial, 0));
            if f_trial <= f_cur {
                let step_norm = alpha * d.norm();
                x = trial;
                f_cur = f_trial;
                history.push(f_cur);
                if step_norm <= config.step_tol {
                    return Ok(finish_rqm(
                        ds,
                        x,
                        iter + 1,
                        grad_norm,
                        f_cur,
                        history,
                        StopReason::Step,
                    ));
                }
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(Error::NonConvergence {
                branch: ds.branch,
                iterations: iter,
                final_gradient_norm: grad_norm,
                objective_history: history,
            });
        }
    }
    Err(Error::NonConvergence {
        branch: ds.branch,
        iterations: config.max_iters,
        final_gradient_norm: grad_norm,
        objective_history: history,
    })
}

fn finish_rqm(
    ds: &DesignSystem,
    x: DVector<f64>,
    iterations: usize,
    final_gradient_norm: f64,
    final_objective: f64,
    objective_history: Vec<f64>,
    stop: StopReason,
) -> RqmSolution {
    let entries = entries_from(&x, 0);
    let plausible = (entries[5] - 1.0).abs() <= 0.05 && entries[6].abs() <= 0.05;
    RqmSolution {
        psi: PsiVector {
            branch: ds.branch,
            reference_end: ds.reference_end,
            entries,
        },
        diagnostics: SolveDiagnostics {
            iterations,
            final_gradient_norm,
            final_objective,
            stop,
            objective_history,
            constraint_violation: 0.0,
        },
        plausible,
    }
}

/// Newton direction with escalating Levenberg damping. Requires a descent
/// direction; gives up after the damping sweep.
fn damped_solve(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let n = h.nrows();
    let trace_scale = (h.trace() / n as f64).abs().max(1e-300);
    let mut mu = 0.0;
    for _ in 0..25 {
        let mut hm = h.clone();
        if mu > 0.0 {
            for i in 0..n {
                hm[(i, i)] += mu;
            }
        }
        if let Some(d) = hm.lu().solve(&(-g)) {
            if d.iter().all(|v| v.is_finite()) && g.dot(&d) < 0.0 {
                return Some(d);
            }
        }
        mu = if mu == 0.0 { 1e-10 * trace_scale } else { mu * 10.0 };
    }
    None
}

/// The across-bus equality constraint in real form: two rows over the
/// variables (ψ_prev(6), ψ_prev(7), ψ_cur(6), ψ_cur(7)).
#[derive(Debug, Clone, PartialEq)]
pub struct EqualityConstraint {
    pub a: SMatrix<f64, 2, 4>,
    pub rho: Complex64,
    pub gamma: Complex64,
}

/// Real/imaginary split of γ·(ψ_prev 6,7) − ρ·(ψ_cur 6,7) = 0.
pub fn build_equality_constraint(rho: Complex64, gamma: Complex64) -> Result<EqualityConstraint> {
    if !(rho.is_finite() && gamma.is_finite()) {
        return Err(Error::InvalidInput("non-finite ratio estimates".into()));
    }
    let a = SMatrix::<f64, 2, 4>::from_row_slice(&[
        gamma.re, -gamma.im, -rho.re, rho.im,
        gamma.im, gamma.re, -rho.im, -rho.re,
    ]);
    let c = EqualityConstraint { a, rho, gamma };
    if !c.is_full_rank() {
        return Err(Error::Constraint(format!(
            "constraint rank deficient: |rho| = {:.3e}, |gamma| = {:.3e}",
            rho.norm(),
            gamma.norm()
        )));
    }
    Ok(c)
}

impl EqualityConstraint {
    /// The two rows are orthogonal with common norm² |ρ|² + |γ|², so the
    /// constraint has rank 2 exactly when that sum is positive.
    pub fn is_full_rank(&self) -> bool {
        self.rho.norm_sqr() + self.gamma.norm_sqr() > 1e-12
    }

    /// Expands to the 2×18 matrix over the stacked pair unknowns.
    fn expanded(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(2, 18);
        for row in 0..2 {
            m[(row, 5)] = self.a[(row, 0)];
            m[(row, 6)] = self.a[(row, 1)];
            m[(row, 14)] = self.a[(row, 2)];
            m[(row, 15)] = self.a[(row, 3)];
        }
        m
    }

    pub fn violation(&self, prev: &[f64; 9], cur: &[f64; 9]) -> f64 {
        let x = nalgebra::SVector::<f64, 4>::new(prev[5], prev[6], cur[5], cur[6]);
        (self.a * x).norm()
    }
}

/// Result of one branch-pair solve.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSolution {
    pub prev: PsiVector,
    pub cur: PsiVector,
    pub diagnostics: SolveDiagnostics,
}

/// Solves the equality-constrained pair problem with a trust-region Newton
/// method. Iterates start feasible (the initial point is projected onto the
/// constraint) and stay feasible because every step solves the KKT system.
pub fn solve_branch_pair(
    ds_prev: &DesignSystem,
    ds_cur: &DesignSystem,
    prior: &PsiVector,
    constraint: &EqualityConstraint,
    config: &SolverConfig,
    init_cur: &PsiVector,
) -> Result<PairSolution> {
    config.validate()?;
    if ds_prev.reference_end != ds_cur.reference_end {
        return Err(Error::PipelineOrder(format!(
            "pair systems reference different buses: {} vs {}",
            ds_prev.reference_end, ds_cur.reference_end
        )));
    }
    if prior.branch.key() != ds_prev.branch.key() || prior.reference_end != ds_prev.reference_end {
        return Err(Error::PipelineOrder(
            "prior does not match the previous-branch system".into(),
        ));
    }
    if !constraint.is_full_rank() {
        return Err(Error::Constraint("constraint rank < 2".into()));
    }
    let lambda1 = config.lambda1;
    let abar = constraint.expanded();
    let aat_inv_scale = 1.0 / (constraint.rho.norm_sqr() + constraint.gamma.norm_sqr());
    let project = |x: &mut DVector<f64>| {
        // ĀĀᵀ = (|ρ|²+|γ|²)·I₂.
        let ax = &abar * &*x;
        *x -= abar.transpose() * (aat_inv_scale * ax);
    };
    let prior_vec = DVector::from_column_slice(&prior.entries);
    let objective = |x: &DVector<f64>| -> f64 {
        let ep = entries_from(x, 0);
        let ec = entries_from(x, 9);
        let reg: f64 = (0..9)
            .map(|i| (ep[i] - prior.entries[i]).powi(2))
            .sum();
        ds_prev.data_objective(&ep) + ds_cur.data_objective(&ec) + lambda1 * reg
    };
    let grad_hess = |x: &DVector<f64>| -> (DVector<f64>, DMatrix<f64>) {
        let ep = entries_from(x, 0);
        let ec = entries_from(x, 9);
        let (_, gp, hp) = branch_terms(ds_prev, &ep, config.exact_hessian);
        let (_, gc, hc) = branch_terms(ds_cur, &ec, config.exact_hessian);
        let mut g = DVector::zeros(18);
        let mut h = DMatrix::zeros(18, 18);
        for i in 0..9 {
            g[i] = gp[i] + 2.0 * lambda1 * (x[i] - prior_vec[i]);
            g[9 + i] = gc[i];
            for j in 0..9 {
                h[(i, j)] = hp[(i, j)];
                h[(9 + i, 9 + j)] = hc[(i, j)];
            }
            h[(i, i)] += 2.0 * lambda1;
        }
        (g, h)
    };

    let mut x = DVector::zeros(18);
    for i in 0..9 {
        x[i] = prior.entries[i];
        x[9 + i] = init_cur.entries[i];
    }
    project(&mut x);
    let mut f_cur = objective(&x);
    let mut history = vec![f_cur];
    let mut radius = config.trust_radius_init;
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    let mut stop = None;
    while iterations < config.max_iters {
        let (g, h) = grad_hess(&x);
        // Projected gradient: zero exactly at a KKT point.
        let mut gp = g.clone();
        project(&mut gp);
        grad_norm = gp.norm();
        if grad_norm <= config.grad_tol {
            stop = Some(StopReason::Gradient);
            break;
        }
        let (d, pred) = match constrained_step(&h, &g, &abar, radius) {
            Some(v) => v,
            None => {
                return Err(Error::NonConvergence {
                    branch: ds_cur.branch,
                    iterations,
                    final_gradient_norm: grad_norm,
                    objective_history: history,
                })
            }
        };
        let mut trial = &x + &d;
        project(&mut trial);
        let f_trial = objective(&trial);
        let actual = f_cur - f_trial;
        let ratio = actual / pred;
        if ratio >= config.ratio_accept && actual >= 0.0 {
            let step_norm = d.norm();
            x = trial;
            f_cur = f_trial;
            history.push(f_cur);
            iterations += 1;
            if ratio > config.ratio_good && step_norm >= 0.99 * radius {
                radius = (radius * config.trust_grow).min(1e8);
            }
            if step_norm <= config.step_tol {
                stop = Some(StopReason::Step);
                break;
            }
        } else {
            radius *= config.trust_shrink;
            iterations += 1;
            if radius < 1e-14 {
                return Err(Error::TrustRadiusCollapse {
                    branch: ds_cur.branch,
                    radius,
                });
            }
        }
    }
    let stop = match stop {
        Some(s) => s,
        None => {
            return Err(Error::NonConvergence {
                branch: ds_cur.branch,
                iterations,
                final_gradient_norm: grad_norm,
                objective_history: history,
            })
        }
    };
    let ep = entries_from(&x, 0);
    let ec = entries_from(&x, 9);
    let violation = constraint.violation(&ep, &ec);
    Ok(PairSolution {
        prev: PsiVector {
            branch: ds_prev.branch,
            reference_end: ds_prev.reference_end,
            entries: ep,
        },
        cur: PsiVector {
            branch: ds_cur.branch,
            reference_end: ds_cur.reference_end,
            entries: ec,
        },
        diagnostics: SolveDiagnostics {
            iterations,
            final_gradient_norm: grad_norm,
            final_objective: f_cur,
            stop,
            objective_history: history,
            constraint_violation: violation,
        },
    })
}

/// Solves the equality-constrained quadratic model through its KKT system,
/// rescaling the step into the trust region (scaling preserves feasibility
/// of the direction). Levenberg damping is escalated until the model
/// predicts a reduction.
fn constrained_step(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    abar: &DMatrix<f64>,
    radius: f64,
) -> Option<(DVector<f64>, f64)> {
    let n = h.nrows();
    let m = abar.nrows();
    let trace_scale = (h.trace() / n as f64).abs().max(1e-300);
    let mut mu = 0.0;
    for _ in 0..30 {
        let mut kkt = DMatrix::zeros(n + m, n + m);
        for i in 0..n {
            for j in 0..n {
                kkt[(i, j)] = h[(i, j)];
            }
            kkt[(i, i)] += mu;
        }
        for r in 0..m {
            for cix in 0..n {
                kkt[(n + r, cix)] = abar[(r, cix)];
                kkt[(cix, n + r)] = abar[(r, cix)];
            }
        }
        let mut rhs = DVector::zeros(n + m);
        for i in 0..n {
            rhs[i] = -g[i];
        }
        if let Some(sol) = kkt.lu().solve(&rhs) {
            let mut d = DVector::zeros(n);
            for i in 0..n {
                d[i] = sol[i];
            }
            if d.iter().all(|v| v.is_finite()) {
                let norm = d.norm();
                if norm > radius {
                    d *= radius / norm;
                }
                let hd = {
                    let mut v = h * &d;
                    v += mu * &d;
                    v
                };
                let pred = -(g.dot(&d) + 0.5 * d.dot(&hd));
                if pred > 0.0 && norm > 0.0 {
                    return Some((d, pred));
                }
            }
        }
        mu = if mu == 0.0 { 1e-10 * trace_scale } else { mu * 10.0 };
    }
    None
}

/// Component-wise complex means of the three CFR estimates across solver
/// runs. For the RQM branch these are read directly as correction factors
/// because the reference correction factor is close to one.
pub fn reconstruct_rqm_cfs(samples: &[PsiVector]) -> Result<(Complex64, Complex64, Complex64)> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no solver runs to average".into()));
    }
    let m = samples.len() as f64;
    let mut alpha_other = Complex64::default();
    let mut beta_ref = Complex64::default();
    let mut beta_other = Complex64::default();
    for s in samples {
        alpha_other += s.alpha_ratio();
        beta_ref += s.beta_ref_ratio();
        beta_other += s.beta_other_ratio();
    }
    Ok((alpha_other / m, beta_ref / m, beta_other / m))
}

/// Per-branch solver state accumulated by the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchRuns {
    pub branch: BranchId,
    pub reference_end: BusId,
    pub runs: Vec<PsiVector>,
    pub mean: PsiVector,
}

impl BranchRuns {
    fn new(branch: BranchId, reference_end: BusId, runs: Vec<PsiVector>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::InvalidInput(format!("no runs for branch {branch}")));
        }
        let m = runs.len() as f64;
        let mut mean = [0.0; 9];
        for r in &runs {
            for i in 0..9 {
                mean[i] += r.entries[i];
            }
        }
        for v in mean.iter_mut() {
            *v /= m;
        }
        Ok(BranchRuns {
            branch,
            reference_end,
            runs,
            mean: PsiVector {
                branch,
                reference_end,
                entries: mean,
            },
        })
    }
}

type BranchKey = (BusId, BusId);

/// Mean over runs of the telescoping product of across-bus VT ratios and
/// within-branch α ratios along the path from the RQM end to the target
/// branch's reference end. The result is the absolute VT correction factor
/// at the target's reference end, up to the RQM-VT correction factor.
pub fn compute_lambda_chain(
    path: &[BranchId],
    runs: &BTreeMap<BranchKey, BranchRuns>,
    rhos: &BTreeMap<BranchKey, Complex64>,
    m_runs: usize,
) -> Result<Complex64> {
    if path.is_empty() {
        return Err(Error::PipelineOrder("empty path".into()));
    }
    let mut lambda = Complex64::default();
    for j in 0..m_runs {
        let mut acc = Complex64::new(1.0, 0.0);
        for k in 0..path.len() - 1 {
            let here = &path[k];
            let next = &path[k + 1];
            let shared = here.shared_bus(next).ok_or_else(|| {
                Error::PipelineOrder(format!("path branches {here} and {next} share no bus"))
            })?;
            let here_runs = runs.get(&here.key()).ok_or_else(|| {
                Error::PipelineOrder(format!("branch {here} not yet estimated"))
            })?;
            if here_runs.reference_end != shared {
                let run = here_runs.runs.get(j).ok_or_else(|| {
                    Error::PipelineOrder(format!("branch {here} missing run {j}"))
                })?;
                acc *= run.alpha_ratio();
            }
            let rho = rhos.get(&next.key()).ok_or_else(|| {
                Error::PipelineOrder(format!("no VT ratio estimate entering branch {next}"))
            })?;
            acc *= rho;
        }
        lambda += acc;
    }
    Ok(lambda / m_runs as f64)
}

/// Absolute correction factors for a branch from Λ and its averaged CFRs,
/// mapped onto the branch's declared from/to orientation.
pub fn reconstruct_branch_cfs(
    lambda: Complex64,
    psi_mean: &PsiVector,
) -> Result<CorrectionFactors> {
    let alpha_ref = lambda;
    let alpha_other = lambda * psi_mean.alpha_ratio();
    let beta_ref = lambda * psi_mean.beta_ref_ratio();
    let beta_other = lambda * psi_mean.beta_other_ratio();
    let (alpha_from, alpha_to, beta_from, beta_to) =
        if psi_mean.reference_end == psi_mean.branch.from {
            (alpha_ref, alpha_other, beta_ref, beta_other)
        } else {
            (alpha_other, alpha_ref, beta_other, beta_ref)
        };
    CorrectionFactors::new(
        Phasor::from_complex(alpha_from),
        Phasor::from_complex(alpha_to),
        Phasor::from_complex(beta_from),
        Phasor::from_complex(beta_to),
    )
}

/// Aggregated per-branch diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateDiagnostics {
    pub runs: usize,
    pub max_iterations: usize,
    pub worst_gradient_norm: f64,
    pub worst_constraint_violation: f64,
    /// Set on the RQM branch only.
    pub rqm_plausible: Option<bool>,
}

/// Final per-branch output: line parameters, the four absolute correction
/// factors, and solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicEstimate {
    pub branch: BranchId,
    pub r: f64,
    pub x: f64,
    pub b: f64,
    pub cfs: CorrectionFactors,
    pub psi_mean: PsiVector,
    pub diagnostics: EstimateDiagnostics,
}

/// Calibration output for the whole tree.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    pub rqm_branch: BranchId,
    pub order: Vec<BranchId>,
    pub estimates: BTreeMap<BranchId, SlicEstimate>,
}

fn initial_psi(branch: BranchId, reference_end: BusId, db: &LineParams) -> PsiVector {
    PsiVector {
        branch,
        reference_end,
        entries: [db.r, db.x, db.b, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
    }
}

/// Runs the sequential calibration over the connected tree: the RQM branch
/// first, then every other branch paired with its already-estimated
/// neighbor in breadth-first order, ending with correction-factor
/// reconstruction. Deterministic for a fixed dataset and config.
pub fn run_pipeline(dataset: &Dataset, config: &SolverConfig) -> Result<PipelineReport> {
    config.validate()?;
    let tree = dataset.network.to_tree()?;
    let n = config.n_window;
    let m = config.m_runs;
    if dataset.n_total() < n * m {
        return Err(Error::InvalidInput(format!(
            "dataset has {} samples, need n_window * m_runs = {}",
            dataset.n_total(),
            n * m
        )));
    }

    // Breadth-first order: by path length from the RQM branch, then by key.
    let mut ordered: Vec<(BranchId, Vec<BranchId>)> = Vec::new();
    for b in &tree.branches {
        ordered.push((*b, find_path(&tree, b)?));
    }
    ordered.sort_by_key(|(b, path)| (path.len(), b.key()));

    let mut runs: BTreeMap<BranchKey, BranchRuns> = BTreeMap::new();
    let mut rhos: BTreeMap<BranchKey, Complex64> = BTreeMap::new();
    let mut rqm_diag: Vec<SolveDiagnostics> = Vec::new();
    let mut rqm_plausible = true;
    let mut pair_diags: BTreeMap<BranchKey, Vec<SolveDiagnostics>> = BTreeMap::new();
    let mut failures: Vec<(BranchId, String)> = Vec::new();

    for (branch, path) in &ordered {
        let result = if path.len() == 1 {
            solve_rqm_stage(
                dataset,
                config,
                branch,
                tree.rqm_end,
                &mut runs,
                &mut rqm_diag,
                &mut rqm_plausible,
            )
        } else {
            let parent = path[path.len() - 2];
            if !runs.contains_key(&parent.key()) {
                Err(Error::PipelineOrder(format!(
                    "parent branch {parent} of {branch} was not estimated"
                )))
            } else {
                solve_pair_stage(
                    dataset,
                    config,
                    branch,
                    &parent,
                    &mut runs,
                    &mut rhos,
                    &mut pair_diags,
                )
            }
        };
        if let Err(e) = result {
            failures.push((*branch, e.to_string()));
        }
    }

    if !failures.is_empty() {
        return Err(Error::PartialResult { failures });
    }

    // Reconstruction.
    let mut estimates = BTreeMap::new();
    for (branch, path) in &ordered {
        let br = &runs[&branch.key()];
        let psi_mean = br.mean;
        let is_rqm = path.len() == 1;
        let lambda = if is_rqm {
            Complex64::new(1.0, 0.0)
        } else {
            compute_lambda_chain(path, &runs, &rhos, m)?
        };
        let cfs = match reconstruct_branch_cfs(lambda, &psi_mean) {
            Ok(c) => c,
            Err(e) => {
                failures.push((*branch, e.to_string()));
                continue;
            }
        };
        let diags: &[SolveDiagnostics] = if is_rqm {
            &rqm_diag
        } else {
            &pair_diags[&branch.key()]
        };
        let diagnostics = EstimateDiagnostics {
            runs: diags.len(),
            max_iterations: diags.iter().map(|d| d.iterations).max().unwrap_or(0),
            worst_gradient_norm: diags
                .iter()
                .map(|d| d.final_gradient_norm)
                .fold(0.0, f64::max),
            worst_constraint_violation: diags
                .iter()
                .map(|d| d.constraint_violation)
                .fold(0.0, f64::max),
            rqm_plausible: if is_rqm { Some(rqm_plausible) } else { None },
        };
        estimates.insert(
            *branch,
            SlicEstimate {
                branch: *branch,
                r: psi_mean.r(),
                x: psi_mean.x(),
                b: psi_mean.b(),
                cfs,
                psi_mean,
                diagnostics,
            },
        );
    }
    if !failures.is_empty() {
        return Err(Error::PartialResult { failures });
    }
    Ok(PipelineReport {
        rqm_branch: tree.rqm_branch,
        order: ordered.into_iter().map(|(b, _)| b).collect(),
        estimates,
    })
}

#[allow(clippy::too_many_arguments)]
fn solve_rqm_stage(
    dataset: &Dataset,
    config: &SolverConfig,
    branch: &BranchId,
    rqm_end: BusId,
    runs: &mut BTreeMap<BranchKey, BranchRuns>,
    rqm_diag: &mut Vec<SolveDiagnostics>,
    rqm_plausible: &mut bool,
) -> Result<()> {
    let meas = dataset
        .branches
        .get(branch)
        .ok_or_else(|| Error::PipelineOrder(format!("no measurements for branch {branch}")))?;
    let db = dataset
        .truth
        .database_params
        .get(branch)
        .ok_or_else(|| Error::PipelineOrder(format!("no database parameters for {branch}")))?;
    let init = initial_psi(*branch, rqm_end, db);
    let mut solutions = Vec::with_capacity(config.m_runs);
    for j in 0..config.m_runs {
        let window = meas.window(j * config.n_window, config.n_window)?;
        let ds = build_design_system(&window, rqm_end)?;
        let sol = solve_rqm_branch(&ds, config, &init)?;
        *rqm_plausible &= sol.plausible;
        rqm_diag.push(sol.diagnostics);
        solutions.push(sol.psi);
    }
    runs.insert(branch.key(), BranchRuns::new(*branch, rqm_end, solutions)?);
    Ok(())
}

fn solve_pair_stage(
    dataset: &Dataset,
    config: &SolverConfig,
    branch: &BranchId,
    parent: &BranchId,
    runs: &mut BTreeMap<BranchKey, BranchRuns>,
    rhos: &mut BTreeMap<BranchKey, Complex64>,
    pair_diags: &mut BTreeMap<BranchKey, Vec<SolveDiagnostics>>,
) -> Result<()> {
    let shared = branch.shared_bus(parent).ok_or_else(|| {
        Error::PipelineOrder(format!("branches {branch} and {parent} share no bus"))
    })?;
    let cur_meas = dataset
        .branches
        .get(branch)
        .ok_or_else(|| Error::PipelineOrder(format!("no measurements for branch {branch}")))?;
    let prev_meas = dataset
        .branches
        .get(parent)
        .ok_or_else(|| Error::PipelineOrder(format!("no measurements for branch {parent}")))?;
    let db = dataset
        .truth
        .database_params
        .get(branch)
        .ok_or_else(|| Error::PipelineOrder(format!("no database parameters for {branch}")))?;

    // Historical across-bus ratios from the full series.
    let v_prev = prev_meas.voltage_at(shared)?;
    let v_cur = cur_meas.voltage_at(shared)?;
    let rho = estimate_rho(&v_prev, &v_cur)?;

    let bus_set = dataset
        .buses
        .get(&shared)
        .ok_or_else(|| Error::PipelineOrder(format!("no bus current set for bus {shared}")))?;
    let i_prev = prev_meas.current_at(shared)?;
    let mut columns: Vec<Vec<Complex64>> = vec![cur_meas.current_at(shared)?];
    // Other monitored channels at this bus keep their own CT ratios.
    for (other, series) in &bus_set.branch_currents {
        if other.key() != branch.key() && other.key() != parent.key() {
            columns.push(series.iter().map(|p| p.to_complex()).collect());
        }
    }
    columns.push(bus_set.residual.iter().map(|p| p.to_complex()).collect());
    let gammas = estimate_gamma_multi(&columns, &i_prev, shared)?;
    let gamma = gammas[0].ok_or_else(|| Error::IllConditioned {
        bus: shared,
        detail: format!("current channel of branch {branch} vanishes"),
    })?;
    let gamma_load = *gammas.last().expect("residual column present");

    let ratios = RatioEstimates {
        bus: shared,
        prev_branch: *parent,
        cur_branch: *branch,
        rho,
        gamma,
        gamma_load,
        n_samples: v_prev.len(),
    };
    ratios.validate()?;
    let constraint = build_equality_constraint(rho, gamma)?;

    // Prior: the parent's mean estimate re-referenced to the shared bus.
    let parent_runs = &runs[&parent.key()];
    let prior = if parent_runs.reference_end == shared {
        parent_runs.mean
    } else {
        swap_reference(&parent_runs.mean)?
    };
    let init_cur = initial_psi(*branch, shared, db);

    let mut solutions = Vec::with_capacity(config.m_runs);
    let mut diags = Vec::with_capacity(config.m_runs);
    for j in 0..config.m_runs {
        let prev_window = prev_meas.window(j * config.n_window, config.n_window)?;
        let cur_window = cur_meas.window(j * config.n_window, config.n_window)?;
        let ds_prev = build_design_system(&prev_window, shared)?;
        let ds_cur = build_design_system(&cur_window, shared)?;
        let sol = solve_branch_pair(&ds_prev, &ds_cur, &prior, &constraint, config, &init_cur)?;
        diags.push(sol.diagnostics);
        solutions.push(sol.cur);
    }
    rhos.insert(branch.key(), rho);
    pair_diags.insert(branch.key(), diags);
    runs.insert(branch.key(), BranchRuns::new(*branch, shared, solutions)?);
    Ok(())
}
