//! Across-bus instrument-transformer ratio estimators.
//!
//! Two branches metering the same bus see the same true voltage, so the
//! ratio of their VT correction factors is the ratio of their (averaged)
//! measured voltages. The CT ratios follow from Kirchhoff's current law at
//! the bus, estimated as a total least squares problem because every current
//! channel carries noise.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::{BranchId, BusId};

/// Minimum historical sample count for a ratio estimate.
pub const MIN_HISTORY: usize = 8;

/// Condition-number ceiling for the stacked real current system.
pub const MAX_CONDITION: f64 = 1e8;

/// Columns whose RMS falls below this fraction of the largest column RMS are
/// treated as identically zero and dropped from the TLS system.
const ZERO_COLUMN_REL_RMS: f64 = 1e-10;

/// Estimated correction-factor ratios across one bus shared by a branch
/// pair: ρ = α_cur/α_prev for the VTs and γ = β_cur/β_prev for the CTs,
/// plus the residual-channel ratio γ_L = β_residual/β_prev when the
/// residual current is observable.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioEstimates {
    pub bus: BusId,
    pub prev_branch: BranchId,
    pub cur_branch: BranchId,
    pub rho: Complex64,
    pub gamma: Complex64,
    pub gamma_load: Option<Complex64>,
    pub n_samples: usize,
}

impl RatioEstimates {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < MIN_HISTORY {
            return Err(Error::InvalidInput(format!(
                "ratio estimate at bus {} uses {} samples, need at least {MIN_HISTORY}",
                self.bus, self.n_samples
            )));
        }
        for (name, v) in [("rho", self.rho), ("gamma", self.gamma)] {
            let m = v.norm();
            if !(0.5..1.5).contains(&m) {
                return Err(Error::NumericDomain(format!(
                    "{name} magnitude {m:.4} at bus {} outside (0.5, 1.5)",
                    self.bus
                )));
            }
        }
        Ok(())
    }
}

/// Ratio of VT correction factors across a bus from historical measurements
/// of the same bus voltage taken by two different VTs: the complex ratio of
/// the sample sums. Returns α_cur/α_prev.
pub fn estimate_rho(v_prev: &[Complex64], v_cur: &[Complex64]) -> Result<Complex64> {
    if v_prev.len() != v_cur.len() {
        return Err(Error::InvalidInput(format!(
            "voltage histories differ in length: {} vs {}",
            v_prev.len(),
            v_cur.len()
        )));
    }
    if v_prev.len() < MIN_HISTORY {
        return Err(Error::InvalidInput(format!(
            "need at least {MIN_HISTORY} historical samples, got {}",
            v_prev.len()
        )));
    }
    let num: Complex64 = v_prev.iter().sum();
    let den: Complex64 = v_cur.iter().sum();
    if den.norm() <= 1e-9 {
        return Err(Error::NumericDomain(format!(
            "voltage sum magnitude {:.3e} too small for a ratio",
            den.norm()
        )));
    }
    Ok(num / den)
}

/// Solution of a complex total least squares problem A·x ≈ b.
#[derive(Debug, Clone, PartialEq)]
pub struct TlsSolution {
    pub coefficients: Vec<Complex64>,
    /// Smallest singular value of the augmented matrix [A | b]: the
    /// Frobenius norm of the minimal consistent perturbation.
    pub residual: f64,
}

/// Complex TLS via the smallest eigenpair of the realified Gram matrix of
/// [A | b]. The doubled eigenvalues of the realification correspond to a
/// complex phase, which cancels in the coefficient ratios.
pub fn tls_complex(columns: &[&[Complex64]], rhs: &[Complex64]) -> Result<TlsSolution> {
    let k = columns.len();
    let m = rhs.len();
    if k == 0 {
        return Err(Error::InvalidInput("TLS with zero columns".into()));
    }
    if columns.iter().any(|c| c.len() != m) {
        return Err(Error::InvalidInput("TLS column length mismatch".into()));
    }
    if m < k + 1 {
        return Err(Error::InvalidInput(format!(
            "TLS needs more rows ({m}) than unknowns plus one ({})",
            k + 1
        )));
    }
    // Gram matrix of the augmented system.
    let mut x = DMatrix::<Complex64>::zeros(m, k + 1);
    for (j, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            x[(i, j)] = *v;
        }
    }
    for (i, v) in rhs.iter().enumerate() {
        x[(i, k)] = *v;
    }
    let gram = x.adjoint() * &x;
    let d = k + 1;
    let mut real = DMatrix::<f64>::zeros(2 * d, 2 * d);
    for i in 0..d {
        for j in 0..d {
            let g = gram[(i, j)];
            real[(i, j)] = g.re;
            real[(i + d, j + d)] = g.re;
            real[(i, j + d)] = -g.im;
            real[(i + d, j)] = g.im;
        }
    }
    let eig = SymmetricEigen::new(real);
    let mut min_idx = 0;
    for i in 1..2 * d {
        if eig.eigenvalues[i] < eig.eigenvalues[min_idx] {
            min_idx = i;
        }
    }
    let u = eig.eigenvectors.column(min_idx);
    let v: Vec<Complex64> = (0..d).map(|i| Complex64::new(u[i], u[i + d])).collect();
    let vnorm: f64 = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let last = v[k];
    if last.norm() <= 1e-12 * vnorm {
        return Err(Error::NumericDomain(
            "TLS solution degenerate: null vector orthogonal to the data direction".into(),
        ));
    }
    let coefficients = v[..k].iter().map(|c| -c / last).collect();
    let residual = eig.eigenvalues[min_idx].max(0.0).sqrt();
    Ok(TlsSolution {
        coefficients,
        residual,
    })
}

/// Condition number of the realified coefficient matrix.
fn realified_condition(columns: &[&[Complex64]]) -> f64 {
    let m = columns[0].len();
    let k = columns.len();
    let mut a = DMatrix::<f64>::zeros(2 * m, 2 * k);
    for (j, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            a[(i, j)] = v.re;
            a[(i + m, j + k)] = v.re;
            a[(i, j + k)] = -v.im;
            a[(i + m, j)] = v.im;
        }
    }
    let svd = a.svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// CT correction-factor ratios at a bus from the KCL relation among the
/// measured current channels. `columns` are the non-reference channels; the
/// right-hand side is minus the reference (previous-branch) channel. Zero
/// columns are dropped and reported as None. Returns one optional
/// coefficient per input column.
pub fn estimate_gamma_multi(
    columns: &[Vec<Complex64>],
    i_prev: &[Complex64],
    bus: BusId,
) -> Result<Vec<Option<Complex64>>> {
    let n = i_prev.len();
    if n < MIN_HISTORY {
        return Err(Error::InvalidInput(format!(
            "need at least {MIN_HISTORY} historical samples at bus {bus}, got {n}"
        )));
    }
    if columns.is_empty() || columns.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidInput(format!(
            "inconsistent current histories at bus {bus}"
        )));
    }
    let rms: Vec<f64> = columns
        .iter()
        .map(|c| (c.iter().map(|v| v.norm_sqr()).sum::<f64>() / n as f64).sqrt())
        .collect();
    let max_rms = rms.iter().cloned().fold(0.0, f64::max);
    if max_rms <= 0.0 {
        return Err(Error::NumericDomain(format!(
            "all current channels vanish at bus {bus}"
        )));
    }
    let kept: Vec<usize> = (0..columns.len())
        .filter(|&j| rms[j] > ZERO_COLUMN_REL_RMS * max_rms)
        .collect();
    if kept.is_empty() {
        return Err(Error::NumericDomain(format!(
            "no usable current channels at bus {bus}"
        )));
    }
    let active: Vec<&[Complex64]> = kept.iter().map(|&j| columns[j].as_slice()).collect();
    let cond = realified_condition(&active);
    if cond > MAX_CONDITION {
        return Err(Error::IllConditioned {
            bus,
            detail: format!("condition number {cond:.3e} exceeds {MAX_CONDITION:.0e}"),
        });
    }
    let rhs: Vec<Complex64> = i_prev.iter().map(|v| -v).collect();
    let sol = tls_complex(&active, &rhs)?;
    let mut out = vec![None; columns.len()];
    for (slot, &j) in kept.iter().enumerate() {
        out[j] = Some(sol.coefficients[slot]);
    }
    Ok(out)
}

/// Two-channel form for a bus shared by exactly one branch pair: solves for
/// (γ = β_cur/β_prev, γ_L = β_residual/β_prev). A vanishing residual channel
/// degenerates to the single-ratio problem and γ_L comes back as None.
pub fn estimate_gamma(
    i_prev: &[Complex64],
    i_cur: &[Complex64],
    i_residual: &[Complex64],
    bus: BusId,
) -> Result<(Complex64, Option<Complex64>)> {
    let cols = vec![i_cur.to_vec(), i_residual.to_vec()];
    let solved = estimate_gamma_multi(&cols, i_prev, bus)?;
    let gamma = solved[0].ok_or_else(|| Error::IllConditioned {
        bus,
        detail: "branch current channel vanishes".into(),
    })?;
    Ok((gamma, solved[1]))
}
