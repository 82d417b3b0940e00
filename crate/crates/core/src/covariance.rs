//! Sample covariance operators, spectral truncation, and the finite
//! dimensional Baker factorization.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::hilbert::{
    same_grid, schatten_norm, sqrt_from_decomp, sym_eig, FunctionSample, Grid,
    Operator, SchattenP, SpectralDecomposition, PSD_FLOOR,
};

/// A sequence of functional observations on a shared grid, stored as a
/// `T × n` matrix of coordinates (one row per time point).
#[derive(Debug, Clone)]
pub struct Dataset {
    data: DMatrix<f64>,
    grid: Grid,
}

impl Dataset {
    pub fn new(grid: Grid, data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        if data.ncols() != grid.len() {
            return Err(Error::Shape(format!(
                "dataset has {} columns on a grid of {} points",
                data.ncols(),
                grid.len()
            )));
        }
        Ok(Self { data, grid })
    }

    pub fn from_samples(samples: &[FunctionSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty dataset".into()))?;
        let grid = first.grid().clone();
        if samples.iter().any(|s| !same_grid(s.grid(), &grid)) {
            return Err(Error::Shape("samples live on different grids".into()));
        }
        let n = grid.len();
        let data = DMatrix::from_fn(samples.len(), n, |t, i| samples[t].coords()[i]);
        Ok(Self { data, grid })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Coordinates, one row per observation.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn sample(&self, t: usize) -> FunctionSample {
        let coords = self.data.row(t).transpose();
        FunctionSample::from_coords(self.grid.clone(), coords).expect("row length matches grid")
    }

    pub fn samples(&self) -> impl Iterator<Item = FunctionSample> + '_ {
        (0..self.len()).map(|t| self.sample(t))
    }

    /// Copy with the sample mean removed. Never applied implicitly.
    pub fn demeaned(&self) -> Dataset {
        let mean = self.data.row_mean();
        let mut data = self.data.clone();
        for mut row in data.row_iter_mut() {
            row -= &mean;
        }
        Dataset {
            data,
            grid: self.grid.clone(),
        }
    }

    pub(crate) fn check_paired(&self, other: &Dataset) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "datasets of length {} and {}",
                self.len(),
                other.len()
            )));
        }
        if !same_grid(&self.grid, &other.grid) {
            return Err(Error::Shape("datasets live on different grids".into()));
        }
        Ok(())
    }
}

/// `(1/T) Σ_t X_t ⊗ X_t`.
pub fn sample_cov(x: &Dataset) -> Operator {
    let z = x.matrix();
    let mut c = z.transpose() * z / x.len() as f64;
    // exact symmetry; the product is symmetric up to rounding only
    c.fill_upper_triangle_with_lower_triangle();
    Operator::new(c)
}

/// `(1/T) Σ_t X_t ⊗ Y_t`, the map `z ↦ (1/T) Σ_t ⟨X_t, z⟩ Y_t`, stored as
/// `(1/T) Σ_t y_t x_tᵀ`.
pub fn sample_cross_cov(x: &Dataset, y: &Dataset) -> Result<Operator> {
    x.check_paired(y)?;
    Ok(Operator::new(
        y.matrix().transpose() * x.matrix() / x.len() as f64,
    ))
}

fn check_rank(decomp: &SpectralDecomposition, k: usize, what: &str) -> Result<()> {
    if k == 0 || k > decomp.dim() {
        return Err(Error::InvalidArgument(format!(
            "{what} {k} outside 1..={}",
            decomp.dim()
        )));
    }
    Ok(())
}

/// `Σ_{j≤k} max(λ_j, 0) v_j ⊗ v_j`.
pub fn truncate_spectral(decomp: &SpectralDecomposition, k: usize) -> Result<Operator> {
    check_rank(decomp, k, "truncation rank")?;
    Ok(decomp.spectral_map(k, |l| l.max(0.0)))
}

/// Inverse of a covariance restricted to its leading `k` eigendirections.
#[derive(Debug, Clone)]
pub struct TruncatedInverse {
    pub k: usize,
    /// `Σ_{j≤k} λ_j⁻¹ v_j ⊗ v_j`.
    pub inverse: Operator,
    /// `Σ_{j≤k} v_j ⊗ v_j`.
    pub projection: Operator,
    pub source: SpectralDecomposition,
}

pub fn regularized_inverse(decomp: &SpectralDecomposition, k: usize) -> Result<TruncatedInverse> {
    check_rank(decomp, k, "truncation rank")?;
    let lk = decomp.eigenvalues()[k - 1];
    if !(lk > 0.0) {
        return Err(Error::RankDeficient { k, value: lk });
    }
    Ok(TruncatedInverse {
        k,
        inverse: decomp.spectral_map(k, |l| 1.0 / l),
        projection: decomp.spectral_map(k, |_| 1.0),
        source: decomp.clone(),
    })
}

/// Orthogonal projection onto the span of the leading `ell` eigenvectors.
pub fn projection_onto_top_eigs(decomp: &SpectralDecomposition, ell: usize) -> Result<Operator> {
    check_rank(decomp, ell, "projection rank")?;
    Ok(decomp.spectral_map(ell, |_| 1.0))
}

/// Outcome of [`baker_factor`].
#[derive(Debug, Clone)]
pub struct BakerFactor {
    /// The canonical `R` with `C_XY = C_YY^{1/2} R C_XX^{1/2}`.
    pub r: Operator,
    pub sqrt_yy: Operator,
    pub sqrt_xx: Operator,
    /// `‖C_YY^{1/2} R C_XX^{1/2} − C_XY‖_{S₂}`.
    pub residual: f64,
}

/// Solves `C_XY = C_YY^{1/2} R C_XX^{1/2}` for the representative that
/// vanishes on `ker C_XX^{1/2}` and maps into `cl ran C_YY^{1/2}`.
///
/// Errors with [`Error::InconsistentTriple`] when the residual exceeds
/// `rel_tol·‖C_XY‖_{S₂}`.
pub fn baker_factor(
    c_yy: &Operator,
    c_xx: &Operator,
    c_xy: &Operator,
    rel_tol: f64,
) -> Result<BakerFactor> {
    if c_xy.nrows() != c_yy.nrows() || c_xy.ncols() != c_xx.ncols() {
        return Err(Error::Shape(format!(
            "C_XY is {}x{}, marginals are {}x{} and {}x{}",
            c_xy.nrows(),
            c_xy.ncols(),
            c_yy.nrows(),
            c_yy.ncols(),
            c_xx.nrows(),
            c_xx.ncols()
        )));
    }
    let dy = sym_eig(c_yy)?;
    let dx = sym_eig(c_xx)?;
    let sqrt_yy = sqrt_from_decomp(&dy, PSD_FLOOR)?;
    let sqrt_xx = sqrt_from_decomp(&dx, PSD_FLOOR)?;
    let r = match (root_pinv(&dy), root_pinv(&dx)) {
        (Some(py), Some(px)) => Operator::new(py.entries() * c_xy.entries() * px.entries()),
        // a zero marginal forces the zero factor
        _ => Operator::new(DMatrix::zeros(c_xy.nrows(), c_xy.ncols())),
    };
    let rebuilt = sqrt_yy.entries() * r.entries() * sqrt_xx.entries();
    let residual = (rebuilt - c_xy.entries()).norm();
    let bound = rel_tol * schatten_norm(c_xy, SchattenP::Two);
    if residual > bound {
        return Err(Error::InconsistentTriple { residual, bound });
    }
    Ok(BakerFactor {
        r,
        sqrt_yy,
        sqrt_xx,
        residual,
    })
}

/// Pseudo-inverse of the square root. Eigenvalues at or below
/// `PSD_FLOOR·λ_max` count as zero; inverting their roots would amplify
/// rounding noise of order `sqrt(eps)`.
fn root_pinv(decomp: &SpectralDecomposition) -> Option<Operator> {
    let clamped = decomp.psd_eigenvalues(PSD_FLOOR).ok()?;
    let lmax = clamped.iter().copied().fold(0.0, f64::max);
    if lmax <= 0.0 {
        return None;
    }
    let v = decomp.eigenvectors();
    let inv_roots: Vec<f64> = clamped
        .iter()
        .map(|&l| if l > PSD_FLOOR * lmax { 1.0 / l.sqrt() } else { 0.0 })
        .collect();
    let scaled = DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] * inv_roots[j]);
    Some(Operator::new(scaled * v.transpose()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{make_grid, trace};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::PI;

    fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn dataset(rng: &mut ChaCha8Rng, t: usize, n: usize) -> Dataset {
        Dataset::new(make_grid(n).unwrap(), gaussian(rng, t, n)).unwrap()
    }

    /// Brownian-bridge draws by direct Cholesky of the kernel, independent
    /// of the path simulator in `dgp`.
    fn bb_dataset(rng: &mut ChaCha8Rng, t: usize, n: usize) -> Dataset {
        let g = make_grid(n).unwrap();
        let inner_n = n - 2;
        let pts = &g.points()[1..n - 1];
        let k = DMatrix::from_fn(inner_n, inner_n, |i, j| pts[i].min(pts[j]) - pts[i] * pts[j]);
        let l = k.cholesky().unwrap().unpack();
        let z = gaussian(rng, inner_n, t);
        let paths = l * z;
        let s = g.sqrt_weights();
        let data = DMatrix::from_fn(t, n, |r, c| {
            if c == 0 || c == n - 1 {
                0.0
            } else {
                paths[(c - 1, r)] * s[c]
            }
        });
        Dataset::new(g, data).unwrap()
    }

    #[test]
    fn single_sample_covariance() {
        let g = make_grid(5).unwrap();
        let x = FunctionSample::from_values(g, &[1.0, -2.0, 0.5, 3.0, 0.0]).unwrap();
        let c = sample_cov(&Dataset::from_samples(&[x.clone()]).unwrap());
        let expected = Operator::tensor(&x, &x).unwrap();
        assert!((c.entries() - expected.entries()).amax() < 1e-15);
        assert!((trace(&c).unwrap() - x.norm().powi(2)).abs() < 1e-14);
    }

    #[test]
    fn opposite_samples_cancel_sign() {
        let g = make_grid(4).unwrap();
        let x = FunctionSample::from_values(g, &[1.0, 2.0, -1.0, 0.5]).unwrap();
        let c = sample_cov(&Dataset::from_samples(&[x.clone(), x.scaled(-1.0)]).unwrap());
        let expected = Operator::tensor(&x, &x).unwrap();
        assert!((c.entries() - expected.entries()).amax() < 1e-15);
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(Dataset::from_samples(&[]).is_err());
        assert!(Dataset::new(make_grid(3).unwrap(), DMatrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn brownian_bridge_trace_is_one_sixth() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = bb_dataset(&mut rng, 10_000, 200);
        let tr = trace(&sample_cov(&x)).unwrap();
        assert!((tr - 1.0 / 6.0).abs() < 0.01, "trace {tr}");
    }

    #[test]
    fn cross_cov_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = dataset(&mut rng, 40, 6);
        let cxx = sample_cov(&x);
        let same = sample_cross_cov(&x, &x).unwrap();
        assert!((same.entries() - cxx.entries()).amax() < 1e-14);

        let a = gaussian(&mut rng, 6, 6);
        let y = Dataset::new(x.grid().clone(), x.matrix() * a.transpose()).unwrap();
        let cxy = sample_cross_cov(&x, &y).unwrap();
        let expected = &a * cxx.entries();
        assert!((cxy.entries() - expected).amax() < 1e-10);
    }

    #[test]
    fn cross_cov_of_independent_samples_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = bb_dataset(&mut rng, 10_000, 50);
        let y = bb_dataset(&mut rng, 10_000, 50);
        let c = sample_cross_cov(&x, &y).unwrap();
        assert!(c.operator_norm() < 0.05);
    }

    #[test]
    fn cross_cov_rejects_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = dataset(&mut rng, 10, 5);
        let y = dataset(&mut rng, 11, 5);
        assert!(sample_cross_cov(&x, &y).is_err());
        let z = dataset(&mut rng, 10, 6);
        assert!(sample_cross_cov(&x, &z).is_err());
    }

    #[test]
    fn sample_cov_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for t in [3, 10, 100] {
            let c = sample_cov(&dataset(&mut rng, t, 20));
            let d = sym_eig(&c).unwrap();
            assert!(d.min_eigenvalue() >= -1e-10 * d.max_eigenvalue());
        }
    }

    #[test]
    fn truncation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = sample_cov(&dataset(&mut rng, 30, 8));
        let d = sym_eig(&c).unwrap();
        let full = truncate_spectral(&d, 8).unwrap();
        assert!((full.entries() - c.entries()).amax() < 1e-9);
        let one = truncate_spectral(&d, 1).unwrap();
        let v = d.eigenvector(0);
        let expected = Operator::tensor_coords(&v, &v).scaled(d.eigenvalues()[0]);
        assert!((one.entries() - expected.entries()).amax() < 1e-14);
        assert!(truncate_spectral(&d, 0).is_err());
        assert!(truncate_spectral(&d, 9).is_err());
    }

    #[test]
    fn truncated_bridge_trace_norm() {
        let g = make_grid(200).unwrap();
        let c = Operator::from_kernel(&g, |s, t| s.min(t) - s * t);
        let d = sym_eig(&c).unwrap();
        let t3 = truncate_spectral(&d, 3).unwrap();
        let expected = (1.0 + 0.25 + 1.0 / 9.0) / (PI * PI);
        assert!((schatten_norm(&t3, SchattenP::One) - expected).abs() < 2e-4);
    }

    #[test]
    fn regularized_inverse_examples() {
        let d = sym_eig(&Operator::from_diagonal(&[2.0, 1.0])).unwrap();
        let inv = regularized_inverse(&d, 2).unwrap();
        assert!((inv.inverse.entries() - Operator::from_diagonal(&[0.5, 1.0]).entries()).amax() < 1e-15);
        let inv = regularized_inverse(&d, 1).unwrap();
        assert!((inv.inverse.entries() - Operator::from_diagonal(&[0.5, 0.0]).entries()).amax() < 1e-15);
        assert!((inv.projection.entries() - Operator::from_diagonal(&[1.0, 0.0]).entries()).amax() < 1e-15);

        let d = sym_eig(&Operator::from_diagonal(&[2.0, 0.0])).unwrap();
        assert!(matches!(regularized_inverse(&d, 2), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn regularized_inverse_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = sample_cov(&dataset(&mut rng, 50, 10));
        let d = sym_eig(&c).unwrap();
        for k in 1..=10 {
            let inv = regularized_inverse(&d, k).unwrap();
            let trunc = truncate_spectral(&d, k).unwrap();
            let prod = inv.inverse.compose(&trunc).unwrap();
            assert!((prod.entries() - inv.projection.entries()).amax() < 1e-9);
            let norm = inv.inverse.operator_norm();
            assert!((norm - 1.0 / d.eigenvalues()[k - 1]).abs() < 1e-9 * norm);
        }
    }

    #[test]
    fn projection_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = sample_cov(&dataset(&mut rng, 30, 7));
        let d = sym_eig(&c).unwrap();
        let full = projection_onto_top_eigs(&d, 7).unwrap();
        assert!((full.entries() - DMatrix::identity(7, 7)).amax() < 1e-12);
        for ell in 1..7 {
            let p = projection_onto_top_eigs(&d, ell).unwrap();
            let pp = p.compose(&p).unwrap();
            assert!((pp.entries() - p.entries()).amax() < 1e-10);
            assert!(p.asymmetry() < 1e-12);
            assert!((trace(&p).unwrap() - ell as f64).abs() < 1e-10);
            assert!((p.operator_norm() - 1.0).abs() < 1e-10);
        }
        assert!(projection_onto_top_eigs(&d, 0).is_err());
    }

    fn joint_triple(rng: &mut ChaCha8Rng, d: usize) -> (Operator, Operator, Operator) {
        let g = gaussian(rng, 2 * d, 2 * d + 3);
        let j = &g * g.transpose() / (2 * d + 3) as f64;
        let cxx = Operator::new(j.view((0, 0), (d, d)).into_owned());
        let cyy = Operator::new(j.view((d, d), (d, d)).into_owned());
        // E[y xᵀ] sits in the lower-left block
        let cxy = Operator::new(j.view((d, 0), (d, d)).into_owned());
        (cyy, cxx, cxy)
    }

    #[test]
    fn baker_self_prediction_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c = sample_cov(&dataset(&mut rng, 40, 6));
        let b = baker_factor(&c, &c, &c, 1e-8).unwrap();
        assert!((b.r.entries() - DMatrix::identity(6, 6)).amax() < 1e-8);
    }

    #[test]
    fn baker_zero_cross() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let c = sample_cov(&dataset(&mut rng, 40, 5));
        let b = baker_factor(&c, &c, &Operator::zeros(5), 1e-8).unwrap();
        assert_eq!(b.r.entries().amax(), 0.0);
    }

    #[test]
    fn baker_on_random_joint_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..50 {
            let (cyy, cxx, cxy) = joint_triple(&mut rng, 8);
            let b = baker_factor(&cyy, &cxx, &cxy, 1e-8).unwrap();
            assert!(b.r.operator_norm() <= 1.0 + 1e-8);
            assert!(b.residual < 1e-9);
        }
    }

    #[test]
    fn baker_rejects_inconsistent_triple() {
        // C_XY with a component outside ran C_YY cannot factor
        let cyy = Operator::from_diagonal(&[1.0, 0.0]);
        let cxx = Operator::from_diagonal(&[1.0, 1.0]);
        let cxy = Operator::from_diagonal(&[0.5, 0.5]);
        assert!(matches!(
            baker_factor(&cyy, &cxx, &cxy, 1e-8),
            Err(Error::InconsistentTriple { .. })
        ));
    }

    #[test]
    fn covariance_error_halves_when_t_quadruples() {
        // population covariance of the Cholesky-sampled bridge is the kernel itself
        let n = 40;
        let g = make_grid(n).unwrap();
        let truth = Operator::from_kernel(&g, |s, t| s.min(t) - s * t);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mean_err = |t: usize, rng: &mut ChaCha8Rng| {
            let reps = 40;
            (0..reps)
                .map(|_| {
                    let c = sample_cov(&bb_dataset(rng, t, n));
                    c.sub(&truth).unwrap().operator_norm()
                })
                .sum::<f64>()
                / reps as f64
        };
        let e1 = mean_err(250, &mut rng);
        let e2 = mean_err(1000, &mut rng);
        let ratio = e1 / e2;
        assert!((1.6..2.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn trace_norm_convergence_on_constructed_sequences() {
        // Γ = diag(1/j²); Γ̂_m perturbs the spectrum by O(1/m²) in rank-m blocks
        // so both ‖Γ̂‖_{S₁}→‖Γ‖_{S₁} and m·‖Γ̂−Γ‖_∞→0 hold by construction.
        let n = 60;
        let diag: Vec<f64> = (1..=n).map(|j| 1.0 / (j * j) as f64).collect();
        let gamma = Operator::from_diagonal(&diag);
        let mut prev = f64::INFINITY;
        for m in [2usize, 4, 8, 16, 32] {
            let eps = 1.0 / (m * m) as f64;
            let pert: Vec<f64> = (0..n)
                .map(|j| if j < m { diag[j] + eps * diag[j] } else { diag[j] * (1.0 - eps) })
                .collect();
            let hat = Operator::from_diagonal(&pert);
            let s1_gap = (schatten_norm(&hat, SchattenP::One) - schatten_norm(&gamma, SchattenP::One)).abs();
            let inf_gap = m as f64 * hat.sub(&gamma).unwrap().operator_norm();
            let s1_err = schatten_norm(&hat.sub(&gamma).unwrap(), SchattenP::One);
            assert!(s1_gap <= eps * 2.0 && inf_gap <= 1.0 / m as f64);
            assert!(s1_err < prev);
            prev = s1_err;
        }
        assert!(prev < 2e-3);
    }

    #[test]
    fn demeaning_is_opt_in() {
        let g = make_grid(3).unwrap();
        let x = Dataset::new(g, DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 3.0, 2.0, 1.0])).unwrap();
        let d = x.demeaned();
        assert!(d.matrix().row_mean().amax() < 1e-15);
        assert_eq!(x.matrix()[(0, 0)], 1.0);
    }
}
