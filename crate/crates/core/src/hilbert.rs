//! Finite-dimensional model of `L²[0,1]`.
//!
//! Functions are sampled on a [`GridSpec`] and stored in orthonormalized
//! coordinates `z_i = sqrt(w_i) f(x_i)`, so the quadrature inner product is
//! the Euclidean dot product and every operator is a plain matrix acting by
//! `y = M x`. Adjoints are transposes.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Default relative floor below which a negative eigenvalue is treated as
/// rounding noise and clamped to zero.
pub const PSD_FLOOR: f64 = 1e-10;

/// Shared handle to a grid.
pub type Grid = Arc<GridSpec>;

/// Quadrature grid on `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    points: Vec<f64>,
    weights: Vec<f64>,
    sqrt_weights: Vec<f64>,
}

impl GridSpec {
    /// Builds a grid from explicit abscissae and quadrature weights.
    pub fn new(points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "grid needs at least 2 points, got {}",
                points.len()
            )));
        }
        if points.len() != weights.len() {
            return Err(Error::Shape(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        if points[0] != 0.0 || points[points.len() - 1] != 1.0 {
            return Err(Error::InvalidArgument(
                "grid must start at 0 and end at 1".into(),
            ));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "grid points must be strictly increasing".into(),
            ));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidArgument(
                "quadrature weights must be positive".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "quadrature weights sum to {total}, expected 1"
            )));
        }
        let sqrt_weights = weights.iter().map(|w| w.sqrt()).collect();
        Ok(Self {
            points,
            weights,
            sqrt_weights,
        })
    }

    /// Uniform grid with trapezoid weights.
    pub fn uniform(n_points: usize) -> Result<Self> {
        if n_points < 2 {
            return Err(Error::InvalidArgument(format!(
                "grid needs at least 2 points, got {n_points}"
            )));
        }
        let h = 1.0 / (n_points - 1) as f64;
        let mut points: Vec<f64> = (0..n_points).map(|i| i as f64 * h).collect();
        // exact endpoints regardless of rounding in i*h
        points[n_points - 1] = 1.0;
        let mut weights = vec![h; n_points];
        weights[0] = h / 2.0;
        weights[n_points - 1] = h / 2.0;
        Self::new(points, weights)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sqrt_weights(&self) -> &[f64] {
        &self.sqrt_weights
    }
}

/// Uniform trapezoid grid with `n_points` abscissae, wrapped for sharing.
pub fn make_grid(n_points: usize) -> Result<Grid> {
    GridSpec::uniform(n_points).map(Arc::new)
}

pub(crate) fn same_grid(a: &Grid, b: &Grid) -> bool {
    Arc::ptr_eq(a, b) || a == b
}

/// One functional observation in orthonormalized coordinates.
#[derive(Debug, Clone)]
pub struct FunctionSample {
    coords: DVector<f64>,
    grid: Grid,
}

impl FunctionSample {
    pub fn from_coords(grid: Grid, coords: DVector<f64>) -> Result<Self> {
        if coords.len() != grid.len() {
            return Err(Error::Shape(format!(
                "coordinate vector of length {} on a grid of {} points",
                coords.len(),
                grid.len()
            )));
        }
        Ok(Self { coords, grid })
    }

    /// Converts pointwise values `f(x_i)` into coordinates.
    pub fn from_values(grid: Grid, values: &[f64]) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "{} values on a grid of {} points",
                values.len(),
                grid.len()
            )));
        }
        let coords = DVector::from_iterator(
            values.len(),
            values.iter().zip(grid.sqrt_weights()).map(|(v, s)| v * s),
        );
        Ok(Self { coords, grid })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Self {
        let coords = DVector::from_iterator(
            grid.len(),
            grid.points()
                .iter()
                .zip(grid.sqrt_weights())
                .map(|(&x, s)| f(x) * s),
        );
        Self { coords, grid }
    }

    pub fn zeros(grid: Grid) -> Self {
        let coords = DVector::zeros(grid.len());
        Self { coords, grid }
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.coords
    }

    pub fn into_coords(self) -> DVector<f64> {
        self.coords
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Pointwise values `f(x_i)`.
    pub fn values(&self) -> Vec<f64> {
        self.coords
            .iter()
            .zip(self.grid.sqrt_weights())
            .map(|(c, s)| c / s)
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.coords.norm()
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            coords: &self.coords * a,
            grid: self.grid.clone(),
        }
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &FunctionSample, b: f64) -> Result<Self> {
        check_grids(&self.grid, &other.grid)?;
        Ok(Self {
            coords: &self.coords * a + &other.coords * b,
            grid: self.grid.clone(),
        })
    }
}

fn check_grids(a: &Grid, b: &Grid) -> Result<()> {
    if same_grid(a, b) {
        Ok(())
    } else {
        Err(Error::Shape("samples live on different grids".into()))
    }
}

/// Quadrature inner product of two samples on the same grid.
pub fn inner(f: &FunctionSample, g: &FunctionSample) -> Result<f64> {
    check_grids(&f.grid, &g.grid)?;
    Ok(f.coords.dot(&g.coords))
}

/// Linear operator in orthonormalized coordinates, acting as `y = M x`.
///
/// The matrix is not tied to a grid: it applies to any sample whose grid
/// has matching dimension, and abstract finite-dimensional systems (random
/// joint covariances, scalar examples) are expressed directly.
#[derive(Debug, Clone, PartialEq)]
pub struct Operator {
    entries: DMatrix<f64>,
}

impl Operator {
    pub fn new(entries: DMatrix<f64>) -> Self {
        Self { entries }
    }

    pub fn identity(n: usize) -> Self {
        Self::new(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(DMatrix::zeros(n, n))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    /// Discretizes an integral operator `(Kf)(s) = ∫ k(s,t) f(t) dt` by
    /// conjugating the kernel matrix with `diag(sqrt(w))`.
    pub fn from_kernel(grid: &GridSpec, kernel: impl Fn(f64, f64) -> f64) -> Self {
        let p = grid.points();
        let s = grid.sqrt_weights();
        let n = grid.len();
        Self::new(DMatrix::from_fn(n, n, |i, j| {
            s[i] * kernel(p[i], p[j]) * s[j]
        }))
    }

    /// `x ⊗ y`, the map `z ↦ ⟨x, z⟩ y`.
    pub fn tensor(x: &FunctionSample, y: &FunctionSample) -> Result<Self> {
        check_grids(&x.grid, &y.grid)?;
        Ok(Self::tensor_coords(&x.coords, &y.coords))
    }

    pub fn tensor_coords(x: &DVector<f64>, y: &DVector<f64>) -> Self {
        Self::new(y * x.transpose())
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn nrows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn is_square(&self) -> bool {
        self.entries.is_square()
    }

    pub fn apply(&self, f: &FunctionSample) -> Result<FunctionSample> {
        if self.ncols() != f.coords.len() || self.nrows() != f.coords.len() {
            return Err(Error::Shape(format!(
                "{}x{} operator applied to a sample of dimension {}",
                self.nrows(),
                self.ncols(),
                f.coords.len()
            )));
        }
        Ok(FunctionSample {
            coords: &self.entries * &f.coords,
            grid: f.grid.clone(),
        })
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Operator) -> Result<Operator> {
        if self.ncols() != other.nrows() {
            return Err(Error::Shape(format!(
                "cannot compose {}x{} with {}x{}",
                self.nrows(),
                self.ncols(),
                other.nrows(),
                other.ncols()
            )));
        }
        Ok(Self::new(&self.entries * &other.entries))
    }

    pub fn adjoint(&self) -> Operator {
        Self::new(self.entries.transpose())
    }

    pub fn add(&self, other: &Operator) -> Result<Operator> {
        self.same_shape(other)?;
        Ok(Self::new(&self.entries + &other.entries))
    }

    pub fn sub(&self, other: &Operator) -> Result<Operator> {
        self.same_shape(other)?;
        Ok(Self::new(&self.entries - &other.entries))
    }

    pub fn scaled(&self, a: f64) -> Operator {
        Self::new(&self.entries * a)
    }

    fn same_shape(&self, other: &Operator) -> Result<()> {
        if self.entries.shape() != other.entries.shape() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.entries.shape(),
                other.entries.shape()
            )));
        }
        Ok(())
    }

    /// Largest absolute difference between the matrix and its transpose.
    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        (&self.entries - self.entries.transpose()).amax()
    }

    pub fn symmetrized(&self) -> Operator {
        Self::new((&self.entries + self.entries.transpose()) * 0.5)
    }

    pub fn operator_norm(&self) -> f64 {
        schatten_norm(self, SchattenP::Inf)
    }
}

/// Eigenvalues in descending order with matching orthonormal eigenvectors
/// stored as columns.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl SpectralDecomposition {
    /// Assembles a decomposition from parts. Eigenvalues are sorted
    /// descending and the eigenvector columns permuted to match; the
    /// columns must already be orthonormal.
    pub fn from_parts(eigenvalues: DVector<f64>, eigenvectors: DMatrix<f64>) -> Result<Self> {
        let n = eigenvalues.len();
        if eigenvectors.nrows() != n || eigenvectors.ncols() != n {
            return Err(Error::Shape(format!(
                "{} eigenvalues with a {}x{} eigenvector matrix",
                n,
                eigenvectors.nrows(),
                eigenvectors.ncols()
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]));
        let values = DVector::from_iterator(n, order.iter().map(|&i| eigenvalues[i]));
        let vectors = eigenvectors.select_columns(order.iter());
        Ok(Self {
            eigenvalues: values,
            eigenvectors: vectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn eigenvector(&self, j: usize) -> DVector<f64> {
        self.eigenvectors.column(j).into_owned()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.get(0).copied().unwrap_or(0.0)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Count of eigenvalues below `-PSD_FLOOR · scale`, reported as a
    /// diagnostic for inputs expected to be PSD.
    pub fn negative_count(&self) -> usize {
        let floor = PSD_FLOOR * self.scale();
        self.eigenvalues.iter().filter(|&&l| l < -floor).count()
    }

    fn scale(&self) -> f64 {
        self.eigenvalues.amax()
    }

    /// `Σ_j g(λ_j) v_j ⊗ v_j` over the leading `k` pairs.
    pub fn spectral_map(&self, k: usize, g: impl Fn(f64) -> f64) -> Operator {
        let k = k.min(self.dim());
        let v = self.eigenvectors.columns(0, k);
        let scaled = DMatrix::from_fn(self.dim(), k, |i, j| v[(i, j)] * g(self.eigenvalues[j]));
        Operator::new(scaled * v.transpose())
    }

    pub fn reconstruct(&self) -> Operator {
        self.spectral_map(self.dim(), |l| l)
    }

    /// Clamped eigenvalues for PSD work: values in `[-floor·scale, 0)` become
    /// zero, anything further below is an error.
    pub(crate) fn psd_eigenvalues(&self, floor: f64) -> Result<Vec<f64>> {
        let bound = floor * self.scale();
        self.eigenvalues
            .iter()
            .map(|&l| {
                if l < -bound {
                    Err(Error::NotPsd {
                        eigenvalue: l,
                        floor: bound,
                    })
                } else {
                    Ok(l.max(0.0))
                }
            })
            .collect()
    }
}

/// Full symmetric eigendecomposition with eigenvalues sorted descending.
///
/// The input is symmetrized by averaging with its transpose; asymmetry
/// larger than `1e-10` relative to the largest entry is rejected.
pub fn sym_eig(c: &Operator) -> Result<SpectralDecomposition> {
    if !c.is_square() {
        return Err(Error::Shape(format!(
            "eigendecomposition of a non-square {}x{} matrix",
            c.nrows(),
            c.ncols()
        )));
    }
    let scale = c.entries.amax().max(f64::MIN_POSITIVE);
    if c.asymmetry() > 1e-10 * scale.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "operator is not symmetric (asymmetry {:e})",
            c.asymmetry()
        )));
    }
    let n = c.nrows();
    let sym = c.symmetrized().into_entries();
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 1000 * n.max(1))
        .ok_or_else(|| Error::Numeric("symmetric eigensolver did not converge".into()))?;
    SpectralDecomposition::from_parts(eig.eigenvalues, eig.eigenvectors)
}

/// Positive semidefinite square root; eigenvalues below `-floor·λ_max`
/// raise [`Error::NotPsd`].
pub fn sqrt_psd(c: &Operator, floor: f64) -> Result<Operator> {
    let decomp = sym_eig(c)?;
    sqrt_from_decomp(&decomp, floor)
}

pub(crate) fn sqrt_from_decomp(decomp: &SpectralDecomposition, floor: f64) -> Result<Operator> {
    let clamped = decomp.psd_eigenvalues(floor)?;
    let roots: Vec<f64> = clamped.iter().map(|l| l.sqrt()).collect();
    Ok(map_with(decomp, &roots))
}

/// Moore–Penrose inverse of a PSD operator: eigenvalues above
/// `rel_tol·λ_max` are inverted, the rest dropped.
pub fn pinv_psd(c: &Operator, rel_tol: f64) -> Result<Operator> {
    let decomp = sym_eig(c)?;
    pinv_from_decomp(&decomp, rel_tol)
}

pub(crate) fn pinv_from_decomp(decomp: &SpectralDecomposition, rel_tol: f64) -> Result<Operator> {
    let clamped = decomp.psd_eigenvalues(PSD_FLOOR)?;
    let lmax = clamped.iter().copied().fold(0.0, f64::max);
    let threshold = rel_tol * lmax;
    if lmax <= 0.0 || clamped.iter().all(|&l| l <= threshold) {
        return Err(Error::RankZero { threshold });
    }
    let inv: Vec<f64> = clamped
        .iter()
        .map(|&l| if l > threshold { 1.0 / l } else { 0.0 })
        .collect();
    Ok(map_with(decomp, &inv))
}

fn map_with(decomp: &SpectralDecomposition, values: &[f64]) -> Operator {
    let v = decomp.eigenvectors();
    let n = decomp.dim();
    let scaled = DMatrix::from_fn(n, n, |i, j| v[(i, j)] * values[j]);
    Operator::new(scaled * v.transpose())
}

/// Schatten exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchattenP {
    One,
    Two,
    Inf,
}

/// Singular values in descending order, from a symmetric eigensolver: the
/// absolute eigenvalues for symmetric input, otherwise the non-negative
/// eigenvalues of `[[0, M], [Mᵀ, 0]]`. nalgebra's SVD can return inaccurate
/// values on rank-deficient input, which the symmetric solver does not.
pub fn singular_values(c: &Operator) -> DVector<f64> {
    let m = &c.entries;
    let (r, k) = m.shape();
    let mut sv: Vec<f64> = if c.asymmetry() == 0.0 {
        m.clone().symmetric_eigenvalues().iter().map(|l| l.abs()).collect()
    } else {
        let mut h = DMatrix::zeros(r + k, r + k);
        h.view_mut((0, r), (r, k)).copy_from(m);
        h.view_mut((r, 0), (k, r)).copy_from(&m.transpose());
        let mut ev: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev.truncate(r.min(k));
        ev.into_iter().map(|l| l.max(0.0)).collect()
    };
    sv.sort_by(|a, b| b.total_cmp(a));
    DVector::from_vec(sv)
}

pub fn schatten_norm(c: &Operator, p: SchattenP) -> f64 {
    match p {
        // Frobenius norm equals the S₂ norm and needs no SVD.
        SchattenP::Two => c.entries.norm(),
        SchattenP::One => singular_values(c).sum(),
        SchattenP::Inf => singular_values(c).iter().copied().fold(0.0, f64::max),
    }
}

pub fn trace(c: &Operator) -> Result<f64> {
    if !c.is_square() {
        return Err(Error::Shape("trace of a non-square matrix".into()));
    }
    Ok(c.entries.trace())
}
