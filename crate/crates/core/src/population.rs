//! Population-level prediction error for a given covariance triple.
//!
//! All operators follow the crate convention: `C_XY` is stored as
//! `E[y xᵀ]`, the map `z ↦ E⟨X, z⟩ Y`, and adjoints are transposes.

use crate::covariance::{baker_factor, BakerFactor};
use crate::error::{Error, Result};
use crate::hilbert::{schatten_norm, sym_eig, Operator, SchattenP};

/// Relative floor on the composed error covariance before taking its trace.
pub const MSPE_PSD_FLOOR: f64 = 1e-8;

/// Default relative tolerance for the Baker factorization.
pub const BAKER_TOL: f64 = 1e-8;

fn check_dims(b: &Operator, c_yy: &Operator, c_xx: &Operator, c_xy: &Operator) -> Result<()> {
    let (dy, dx) = (c_yy.nrows(), c_xx.nrows());
    if !c_yy.is_square()
        || !c_xx.is_square()
        || c_xy.nrows() != dy
        || c_xy.ncols() != dx
        || b.nrows() != dy
        || b.ncols() != dx
    {
        return Err(Error::Shape(format!(
            "B {}x{}, C_YY {}x{}, C_XX {}x{}, C_XY {}x{}",
            b.nrows(),
            b.ncols(),
            c_yy.nrows(),
            c_yy.ncols(),
            c_xx.nrows(),
            c_xx.ncols(),
            c_xy.nrows(),
            c_xy.ncols()
        )));
    }
    Ok(())
}

/// Covariance of the prediction error `Y − BX`:
/// `C_YY − C_XY Bᵀ − B C_XYᵀ + B C_XX Bᵀ`.
pub fn error_covariance(b: &Operator, c_yy: &Operator, c_xx: &Operator, c_xy: &Operator) -> Result<Operator> {
    check_dims(b, c_yy, c_xx, c_xy)?;
    let bm = b.entries();
    let cross = c_xy.entries() * bm.transpose();
    let m = c_yy.entries() - &cross - cross.transpose() + bm * c_xx.entries() * bm.transpose();
    Ok(Operator::new(m))
}

/// `E‖Y − BX‖²`, the trace norm of [`error_covariance`].
pub fn population_mspe(b: &Operator, c_yy: &Operator, c_xx: &Operator, c_xy: &Operator) -> Result<f64> {
    let m = error_covariance(b, c_yy, c_xx, c_xy)?;
    let spectrum = sym_eig(&m)?;
    let scale = spectrum
        .eigenvalues()
        .amax()
        .max(c_yy.entries().trace().abs())
        .max(f64::MIN_POSITIVE);
    let min = spectrum.min_eigenvalue();
    if min < -MSPE_PSD_FLOOR * scale {
        return Err(Error::InconsistentInputs(format!(
            "error covariance has eigenvalue {min:e} (scale {scale:e})"
        )));
    }
    Ok(m.entries().trace())
}

/// Split of the MSPE into the irreducible part and the inadequacy of `B`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MspeDecomposition {
    pub total: f64,
    pub sigma_min: f64,
    /// `‖B C_XX^{1/2} − C_YY^{1/2} R‖²_{S₂}`.
    pub inadequacy: f64,
}

fn sigma_min_from(c_yy: &Operator, baker: &BakerFactor) -> f64 {
    let sr = baker.sqrt_yy.entries() * baker.r.entries();
    c_yy.entries().trace() - (&sr * sr.transpose()).trace()
}

pub fn mspe_decomposition(
    b: &Operator,
    c_yy: &Operator,
    c_xx: &Operator,
    c_xy: &Operator,
) -> Result<MspeDecomposition> {
    check_dims(b, c_yy, c_xx, c_xy)?;
    let baker = baker_factor(c_yy, c_xx, c_xy, BAKER_TOL)?;
    Ok(decompose_with(b, c_yy, &baker))
}

/// Decomposition for a precomputed factorization; lets many `B` share one
/// Baker factor.
pub fn decompose_with(b: &Operator, c_yy: &Operator, baker: &BakerFactor) -> MspeDecomposition {
    let sigma_min = sigma_min_from(c_yy, baker);
    let gap = b.entries() * baker.sqrt_xx.entries() - baker.sqrt_yy.entries() * baker.r.entries();
    let inadequacy = gap.norm_squared();
    MspeDecomposition {
        total: sigma_min + inadequacy,
        sigma_min,
        inadequacy,
    }
}

/// Minimal achievable MSPE `tr(C_YY − C_YY^{1/2} R Rᵀ C_YY^{1/2})`.
pub fn sigma_min(c_yy: &Operator, c_xx: &Operator, c_xy: &Operator) -> Result<f64> {
    let baker = baker_factor(c_yy, c_xx, c_xy, BAKER_TOL)?;
    Ok(sigma_min_from(c_yy, &baker))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OlpoCheck {
    pub passes: bool,
    /// `‖A C_XX − C_XY‖_{S₂}`.
    pub residual: f64,
}

/// Tests the normal equations `A C_XX = C_XY` relative to `‖C_XY‖_{S₂}`.
pub fn check_olpo(a: &Operator, c_xx: &Operator, c_xy: &Operator, tol: f64) -> Result<OlpoCheck> {
    let lhs = a.compose(c_xx)?;
    let residual = schatten_norm(&lhs.sub(c_xy)?, SchattenP::Two);
    Ok(OlpoCheck {
        passes: residual <= tol * schatten_norm(c_xy, SchattenP::Two),
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{sample_cov, sample_cross_cov};
    use crate::dgp::{generate_dataset, Model, ModelSpec, NoiseCase};
    use crate::hilbert::{make_grid, pinv_psd, trace};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    /// Marginals and cross block of one random joint covariance.
    fn joint_triple(rng: &mut ChaCha8Rng, d: usize, rank: usize) -> (Operator, Operator, Operator) {
        let g = gaussian(rng, 2 * d, rank);
        let j = &g * g.transpose() / rank as f64;
        (
            Operator::new(j.view((d, d), (d, d)).into_owned()),
            Operator::new(j.view((0, 0), (d, d)).into_owned()),
            Operator::new(j.view((d, 0), (d, d)).into_owned()),
        )
    }

    #[test]
    fn zero_operator_gives_response_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (cyy, cxx, cxy) = joint_triple(&mut rng, 5, 13);
        let m = population_mspe(&Operator::zeros(5), &cyy, &cxx, &cxy).unwrap();
        assert!((m - trace(&cyy).unwrap()).abs() < 1e-12);
        let d = mspe_decomposition(&Operator::zeros(5), &cyy, &cxx, &cxy).unwrap();
        assert!((d.total - trace(&cyy).unwrap()).abs() < 1e-9);
        let baker = baker_factor(&cyy, &cxx, &cxy, BAKER_TOL).unwrap();
        let sr = baker.sqrt_yy.entries() * baker.r.entries();
        assert!((d.inadequacy - (&sr * sr.transpose()).trace()).abs() < 1e-10);
    }

    #[test]
    fn scalar_case() {
        let (sy, sx, sxy) = (2.0, 1.5, 0.9);
        let cyy = Operator::from_diagonal(&[sy]);
        let cxx = Operator::from_diagonal(&[sx]);
        let cxy = Operator::from_diagonal(&[sxy]);
        let b = Operator::from_diagonal(&[sxy / sx]);
        let expected = sy - sxy * sxy / sx;
        assert!((population_mspe(&b, &cyy, &cxx, &cxy).unwrap() - expected).abs() < 1e-14);
        assert!((sigma_min(&cyy, &cxx, &cxy).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn matches_monte_carlo() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = gaussian(&mut rng, 2 * d, 2 * d);
        let joint = &g * g.transpose();
        let chol = joint.clone().cholesky().unwrap().unpack();
        let cxx = Operator::new(joint.view((0, 0), (d, d)).into_owned());
        let cyy = Operator::new(joint.view((d, d), (d, d)).into_owned());
        let cxy = Operator::new(joint.view((d, 0), (d, d)).into_owned());
        let b = Operator::new(gaussian(&mut rng, d, d) * 0.3);
        let expected = population_mspe(&b, &cyy, &cxx, &cxy).unwrap();
        let n = 100_000;
        let draws = &chol * gaussian(&mut rng, 2 * d, n);
        let mut losses = Vec::with_capacity(n);
        for c in draws.column_iter() {
            let x = c.rows(0, d);
            let y = c.rows(d, d);
            losses.push((y - b.entries() * x).norm_squared());
        }
        let mean = losses.iter().sum::<f64>() / n as f64;
        let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - expected).abs() < 3.0 * se, "{mean} vs {expected} (se {se})");
    }

    #[test]
    fn rejects_inconsistent_inputs() {
        // C_XY too large for the marginals: error covariance goes negative
        let cyy = Operator::from_diagonal(&[1.0]);
        let cxx = Operator::from_diagonal(&[1.0]);
        let cxy = Operator::from_diagonal(&[5.0]);
        let b = Operator::from_diagonal(&[1.0]);
        assert!(matches!(
            population_mspe(&b, &cyy, &cxx, &cxy),
            Err(Error::InconsistentInputs(_))
        ));
        assert!(population_mspe(&Operator::zeros(2), &cyy, &cxx, &cxy).is_err());
    }

    #[test]
    fn decomposition_identity_on_random_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let d = rng.gen_range(2..12);
            let (cyy, cxx, cxy) = joint_triple(&mut rng, d, 2 * d + 2);
            let b = Operator::new(gaussian(&mut rng, d, d));
            let dec = mspe_decomposition(&b, &cyy, &cxx, &cxy).unwrap();
            let m = population_mspe(&b, &cyy, &cxx, &cxy).unwrap();
            assert!((dec.total - m).abs() <= 1e-8 * m.abs().max(1.0));
            assert!(dec.sigma_min <= m + 1e-9);
        }
    }

    #[test]
    fn olpo_attains_sigma_min() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (cyy, cxx, cxy) = joint_triple(&mut rng, 6, 15);
        let a = cxy.compose(&pinv_psd(&cxx, 1e-12).unwrap()).unwrap();
        let check = check_olpo(&a, &cxx, &cxy, 1e-8).unwrap();
        assert!(check.passes, "residual {}", check.residual);
        let dec = mspe_decomposition(&a, &cyy, &cxx, &cxy).unwrap();
        assert!(dec.inadequacy < 1e-9);
        let smin = sigma_min(&cyy, &cxx, &cxy).unwrap();
        assert!((population_mspe(&a, &cyy, &cxx, &cxy).unwrap() - smin).abs() < 1e-8);

        let doubled = a.scaled(2.0);
        assert!(!check_olpo(&doubled, &cxx, &cxy, 1e-8).unwrap().passes);
    }

    #[test]
    fn perturbation_on_kernel_is_invisible() {
        let d = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (cyy, cxx, cxy) = joint_triple(&mut rng, d, 4); // rank-deficient
        let a = cxy.compose(&pinv_psd(&cxx, 1e-10).unwrap()).unwrap();
        let dx = sym_eig(&cxx).unwrap();
        let null = dx.eigenvector(d - 1);
        assert!(dx.eigenvalues()[d - 1].abs() < 1e-12);
        let w = gaussian(&mut rng, d, 1).column(0).into_owned();
        let other = a.add(&Operator::tensor_coords(&null, &w)).unwrap();
        assert!(check_olpo(&other, &cxx, &cxy, 1e-8).unwrap().passes);
        let m1 = population_mspe(&a, &cyy, &cxx, &cxy).unwrap();
        let m2 = population_mspe(&other, &cyy, &cxx, &cxy).unwrap();
        assert!((m1 - m2).abs() < 1e-10);
    }

    #[test]
    fn diagonal_design_operator_is_olpo() {
        // X with independent coordinates in a fixed orthonormal basis and
        // A = Σ a_j f_j ⊗ f_j, Y = AX + ε
        let d = 8;
        let lambdas: Vec<f64> = (1..=d).map(|j| 1.0 / (j * j) as f64).collect();
        let a_coef: Vec<f64> = (0..d).map(|j| 1.5 - 0.4 * j as f64).collect();
        let cxx = Operator::from_diagonal(&lambdas);
        let a = Operator::from_diagonal(&a_coef);
        let cxy = a.compose(&cxx).unwrap();
        let ce = Operator::from_diagonal(&vec![0.1; d]);
        let cyy = a.compose(&cxx).unwrap().compose(&a.adjoint()).unwrap().add(&ce).unwrap();
        assert!(check_olpo(&a, &cxx, &cxy, 1e-12).unwrap().passes);
        let smin = sigma_min(&cyy, &cxx, &cxy).unwrap();
        assert!((smin - trace(&ce).unwrap()).abs() < 1e-10);
        assert!((population_mspe(&a, &cyy, &cxx, &cxy).unwrap() - smin).abs() < 1e-10);
    }

    #[test]
    fn zero_cross_covariance_leaves_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (cyy, cxx, _) = joint_triple(&mut rng, 4, 9);
        let smin = sigma_min(&cyy, &cxx, &Operator::zeros(4)).unwrap();
        assert!((smin - trace(&cyy).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn simulated_design_sigma_min_is_one_sixth() {
        // sample triple of (X, Y) from the simulator; Σ_min of the sample
        // triple should sit near tr(C_ε) = 1/6 for long samples
        let g = make_grid(200).unwrap();
        let spec = ModelSpec::new(Model::M1, NoiseCase::Bb, 20_000, g);
        let d = generate_dataset(&spec, 7).unwrap();
        let cyy = sample_cov(&d.y);
        let cxx = sample_cov(&d.x);
        let cxy = sample_cross_cov(&d.x, &d.y).unwrap();
        let baker = baker_factor(&cyy, &cxx, &cxy, 1e-6).unwrap();
        let smin = sigma_min_from(&cyy, &baker);
        // the 200-dimensional sample fit absorbs about dim/T of the noise
        assert!((smin - 1.0 / 6.0).abs() < 0.005, "{smin}");
    }
}
