//! Post-dimension-reduction estimation of the prediction operator.
//!
//! The estimator is `Â = Ĉ_XY Ĉ_XX,k⁻¹`, where `Ĉ_XX,k⁻¹` inverts the sample
//! covariance on its leading `k` eigendirections and `k` is picked by the
//! gap rule in [`select_k_elbow`]. [`fit_fpca_ls_reduced`] additionally
//! projects the output onto a rank-`ℓ` eigenspace and [`fit_ridge`] is a
//! Tikhonov-type baseline.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::{projection_onto_top_eigs, sample_cov, Dataset};
use crate::error::{Error, Result};
use crate::hilbert::{schatten_norm, sym_eig, FunctionSample, Operator, SchattenP, SpectralDecomposition};

/// Scales and rate exponent of the elbow threshold and rank cap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElbowParams {
    c_tau: f64,
    c_cap: f64,
    gamma: f64,
}

impl ElbowParams {
    pub fn new(c_tau: f64, c_cap: f64, gamma: f64) -> Result<Self> {
        if !(c_tau > 0.0) || !(c_cap > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "elbow scales must be positive (c_tau={c_tau}, c_cap={c_cap})"
            )));
        }
        if !(gamma > 0.0 && gamma < 0.5) {
            return Err(Error::InvalidArgument(format!("gamma {gamma} outside (0, 0.5)")));
        }
        Ok(Self { c_tau, c_cap, gamma })
    }

    pub fn with_gamma(gamma: f64) -> Result<Self> {
        Self::new(0.01, 0.5, gamma)
    }

    pub fn c_tau(&self) -> f64 {
        self.c_tau
    }

    pub fn c_cap(&self) -> f64 {
        self.c_cap
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

impl Default for ElbowParams {
    fn default() -> Self {
        Self {
            c_tau: 0.01,
            c_cap: 0.5,
            gamma: 0.475,
        }
    }
}

/// `tau = c_tau·‖Ĉ_XX‖_{S₁}·T^{−γ}` and `cap = max(1, ⌊c_cap·T^{γ}⌋)`.
pub fn elbow_threshold(c_xx_hat: &Operator, t: usize, params: &ElbowParams) -> (f64, usize) {
    threshold_from_trace_norm(schatten_norm(c_xx_hat, SchattenP::One), t, params)
}

fn threshold_from_trace_norm(trace_norm: f64, t: usize, params: &ElbowParams) -> (f64, usize) {
    let tf = t as f64;
    let tau = params.c_tau * trace_norm * tf.powf(-params.gamma);
    let cap = ((params.c_cap * tf.powf(params.gamma)).floor() as usize).max(1);
    (tau, cap)
}

/// Largest `j` with `λ_j ≥ λ_{j+1} + tau` (eigenvalues past the end count
/// as zero; `1` when no `j` qualifies), capped at `cap`.
pub fn select_k_elbow(eigenvalues: &[f64], tau: f64, cap: usize) -> Result<usize> {
    if eigenvalues.is_empty() {
        return Err(Error::InvalidArgument("empty eigenvalue sequence".into()));
    }
    let n = eigenvalues.len();
    let last = (0..n)
        .rev()
        .find(|&i| {
            let next = if i + 1 < n { eigenvalues[i + 1] } else { 0.0 };
            eigenvalues[i] >= next + tau
        })
        .map_or(1, |i| i + 1);
    Ok(last.min(cap.max(1)))
}

/// Estimator family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "fpca_ls")]
    FpcaLs,
    #[serde(rename = "fpca_ls_reduced")]
    FpcaLsReduced,
    #[serde(rename = "ridge")]
    Ridge,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::FpcaLs => "fpca_ls",
            Method::FpcaLsReduced => "fpca_ls_reduced",
            Method::Ridge => "ridge",
        })
    }
}

/// Which eigenbasis spans the output projection of the reduced estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReductionBasis {
    /// Leading eigenvectors of `Ĉ_YY`.
    #[serde(rename = "y_eigs")]
    YEigs,
    /// Leading eigenvectors of `Ĉ_XX`.
    #[serde(rename = "x_eigs")]
    XEigs,
}

impl FromStr for ReductionBasis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "y_eigs" => Ok(ReductionBasis::YEigs),
            "x_eigs" => Ok(ReductionBasis::XEigs),
            other => Err(Error::Config(format!("unknown reduction basis {other:?}"))),
        }
    }
}

/// Eigenvalue sequence of `Ĉ_XX` and its consecutive gaps.
#[derive(Debug, Clone)]
pub struct FitDiagnostics {
    pub eigenvalues: Vec<f64>,
    /// `λ_j − λ_{j+1}` with a trailing zero eigenvalue.
    pub gaps: Vec<f64>,
}

impl FitDiagnostics {
    fn from_eigenvalues(eigenvalues: &DVector<f64>) -> Self {
        let eigenvalues: Vec<f64> = eigenvalues.iter().copied().collect();
        let gaps = (0..eigenvalues.len())
            .map(|i| eigenvalues[i] - eigenvalues.get(i + 1).copied().unwrap_or(0.0))
            .collect();
        Self { eigenvalues, gaps }
    }
}

/// A fitted prediction operator with the choices that produced it.
#[derive(Debug, Clone)]
pub struct FittedPredictor {
    pub operator: Operator,
    pub k: usize,
    pub tau: f64,
    pub cap: usize,
    pub method: Method,
    pub ell: Option<usize>,
    pub diagnostics: FitDiagnostics,
}

impl FittedPredictor {
    pub fn predict(&self, x: &FunctionSample) -> Result<FunctionSample> {
        predict(self, x)
    }
}

/// Spectral pieces shared by the FPCA fits.
struct FpcaCore {
    decomp: SpectralDecomposition,
    operator: Operator,
    k: usize,
    tau: f64,
    cap: usize,
}

fn fpca_core(x: &Dataset, y: &Dataset, params: &ElbowParams) -> Result<FpcaCore> {
    x.check_paired(y)?;
    let t = x.len();
    if t < 2 {
        return Err(Error::InvalidArgument(format!("need T ≥ 2, got {t}")));
    }
    if x.dim() != y.dim() {
        return Err(Error::Shape("predictor and response grids differ".into()));
    }
    let decomp = sym_eig(&sample_cov(x))?;
    let lambdas = decomp.eigenvalues();
    // S₁ norm of a symmetric matrix is the sum of |λ_j|
    let trace_norm: f64 = lambdas.iter().map(|l| l.abs()).sum();
    let (tau, cap) = threshold_from_trace_norm(trace_norm, t, params);
    let k = select_k_elbow(lambdas.as_slice(), tau, cap)?;
    let lk = lambdas[k - 1];
    if !(lk > 0.0) {
        return Err(Error::DegenerateSample(format!(
            "selected rank {k} has eigenvalue {lk:e}"
        )));
    }
    // Ĉ_XY Ĉ_XX,k⁻¹ = (1/T) Yᵀ (X V_k) Λ_k⁻¹ V_kᵀ
    let vk = decomp.eigenvectors().columns(0, k);
    let mut scores = x.matrix() * vk;
    for j in 0..k {
        scores.column_mut(j).scale_mut(1.0 / (t as f64 * lambdas[j]));
    }
    let operator = Operator::new(y.matrix().transpose() * scores * vk.transpose());
    Ok(FpcaCore {
        decomp,
        operator,
        k,
        tau,
        cap,
    })
}

/// `Â = Ĉ_XY Ĉ_XX,k⁻¹` with `k` from the elbow rule.
pub fn fit_fpca_ls(x: &Dataset, y: &Dataset, params: &ElbowParams) -> Result<FittedPredictor> {
    let core = fpca_core(x, y, params)?;
    Ok(FittedPredictor {
        diagnostics: FitDiagnostics::from_eigenvalues(core.decomp.eigenvalues()),
        operator: core.operator,
        k: core.k,
        tau: core.tau,
        cap: core.cap,
        method: Method::FpcaLs,
        ell: None,
    })
}

/// `Ã = Π̂_ℓ Ĉ_XY Ĉ_XX,k⁻¹`, projecting the output onto the leading `ell`
/// eigenvectors of `Ĉ_YY` or `Ĉ_XX`.
pub fn fit_fpca_ls_reduced(
    x: &Dataset,
    y: &Dataset,
    params: &ElbowParams,
    ell: usize,
    basis: ReductionBasis,
) -> Result<FittedPredictor> {
    if ell == 0 || ell > y.dim() {
        return Err(Error::InvalidArgument(format!(
            "output rank {ell} outside 1..={}",
            y.dim()
        )));
    }
    let core = fpca_core(x, y, params)?;
    let operator = if ell == y.dim() {
        core.operator
    } else {
        let proj = match basis {
            ReductionBasis::XEigs => projection_onto_top_eigs(&core.decomp, ell)?,
            ReductionBasis::YEigs => projection_onto_top_eigs(&sym_eig(&sample_cov(y))?, ell)?,
        };
        proj.compose(&core.operator)?
    };
    Ok(FittedPredictor {
        diagnostics: FitDiagnostics::from_eigenvalues(core.decomp.eigenvalues()),
        operator,
        k: core.k,
        tau: core.tau,
        cap: core.cap,
        method: Method::FpcaLsReduced,
        ell: Some(ell),
    })
}

/// Default ridge penalty `0.01·‖Ĉ_XX‖_{S₁}·T^{−γ}`, matching the elbow
/// threshold's scale.
pub fn default_ridge_tau(c_xx_hat: &Operator, t: usize, gamma: f64) -> f64 {
    0.01 * schatten_norm(c_xx_hat, SchattenP::One) * (t as f64).powf(-gamma)
}

/// `Ĉ_XY Σ_j (λ_j + ridge_tau)⁻¹ v_j ⊗ v_j` over the full spectrum.
pub fn fit_ridge(x: &Dataset, y: &Dataset, ridge_tau: f64) -> Result<FittedPredictor> {
    if !(ridge_tau > 0.0) {
        return Err(Error::InvalidArgument(format!("ridge penalty {ridge_tau} must be positive")));
    }
    x.check_paired(y)?;
    let t = x.len() as f64;
    let decomp = sym_eig(&sample_cov(x))?;
    let v = decomp.eigenvectors();
    let lambdas = decomp.eigenvalues();
    let mut scores = x.matrix() * v;
    for j in 0..decomp.dim() {
        scores
            .column_mut(j)
            .scale_mut(1.0 / (t * (lambdas[j].max(0.0) + ridge_tau)));
    }
    let operator = Operator::new(y.matrix().transpose() * scores * v.transpose());
    Ok(FittedPredictor {
        diagnostics: FitDiagnostics::from_eigenvalues(lambdas),
        operator,
        k: decomp.dim(),
        tau: ridge_tau,
        cap: decomp.dim(),
        method: Method::Ridge,
        ell: None,
    })
}

pub fn predict(p: &FittedPredictor, x: &FunctionSample) -> Result<FunctionSample> {
    p.operator.apply(x)
}

fn residuals(b: &Operator, x: &Dataset, y: &Dataset) -> Result<DMatrix<f64>> {
    x.check_paired(y)?;
    if b.ncols() != x.dim() || b.nrows() != y.dim() {
        return Err(Error::Shape(format!(
            "{}x{} operator for data of dimension {}",
            b.nrows(),
            b.ncols(),
            x.dim()
        )));
    }
    // rows: y_tᵀ − x_tᵀ Bᵀ
    Ok(y.matrix() - x.matrix() * b.entries().transpose())
}

/// `(1/T) Σ_t ‖Y_t − B X_t‖²`.
pub fn empirical_mspe(b: &Operator, x: &Dataset, y: &Dataset) -> Result<f64> {
    let r = residuals(b, x, y)?;
    Ok(r.norm_squared() / x.len() as f64)
}

/// `Σ(B) = (1/T) Σ_t (Y_t − B X_t) ⊗ (Y_t − B X_t)`.
pub fn residual_cov(b: &Operator, x: &Dataset, y: &Dataset) -> Result<Operator> {
    let r = residuals(b, x, y)?;
    Ok(Operator::new(r.transpose() * &r / x.len() as f64))
}
