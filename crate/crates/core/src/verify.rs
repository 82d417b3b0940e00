//! Self-check suite behind the `verify` subcommand.
//!
//! Each check is a small randomized or closed-form test of one module,
//! sized to finish in seconds.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::covariance::{baker_factor, regularized_inverse, sample_cov};
use crate::dgp::{sample_noise_dataset, FourierFrame, Model, NoiseCase, DEFAULT_N_FOURIER, SIGMA_MIN};
use crate::harness::{csv_string, read_csv, run_experiment_with_workers, Estimator, ExperimentConfig};
use crate::hilbert::{make_grid, pinv_psd, schatten_norm, sqrt_psd, sym_eig, trace, Operator, SchattenP, PSD_FLOOR};
use crate::population::{check_olpo, decompose_with, population_mspe, BAKER_TOL};
use crate::predictor::select_k_elbow;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// `(C_YY, C_XX, C_XY)` blocks of `G Gᵀ / rank` for a `2d × rank` Gaussian `G`.
fn joint_triple(rng: &mut ChaCha8Rng, d: usize, rank: usize) -> (Operator, Operator, Operator) {
    let g = gaussian(rng, 2 * d, rank);
    let j = &g * g.transpose() / rank as f64;
    (
        Operator::new(j.view((d, d), (d, d)).into_owned()),
        Operator::new(j.view((0, 0), (d, d)).into_owned()),
        Operator::new(j.view((d, 0), (d, d)).into_owned()),
    )
}

fn scan_reference(l: &[f64], tau: f64, cap: usize) -> usize {
    let mut best = 1;
    for j in 1..=l.len() {
        let next = l.get(j).copied().unwrap_or(0.0);
        if l[j - 1] >= next + tau {
            best = j;
        }
    }
    best.min(cap)
}

fn fourier_orthonormality() -> CheckOutcome {
    let grid = make_grid(200).expect("valid grid");
    let frame = FourierFrame::new(&grid, DEFAULT_N_FOURIER);
    let gram = frame.rows() * frame.rows().transpose();
    let err = (gram - DMatrix::identity(DEFAULT_N_FOURIER, DEFAULT_N_FOURIER)).amax();
    CheckOutcome::new("fourier frame orthonormal", err < 1e-8, format!("max |G - I| = {err:.2e}"))
}

fn bb_spectrum() -> CheckOutcome {
    let grid = make_grid(200).expect("valid grid");
    let c = Operator::from_kernel(&grid, |s, t| s.min(t) - s * t);
    let lam = sym_eig(&c).expect("symmetric kernel");
    let err = (1..=5)
        .map(|j| (lam.eigenvalues()[j - 1] - 1.0 / (PI * PI * (j * j) as f64)).abs())
        .fold(0.0, f64::max);
    CheckOutcome::new("bridge covariance spectrum", err < 1e-4, format!("max error {err:.2e}"))
}

fn sqrt_and_pinv(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.gen_range(2..30);
        let rank = rng.gen_range(1..=n);
        let g = gaussian(rng, n, rank);
        let c = Operator::new(&g * g.transpose());
        let scale = c.operator_norm();
        let s = sqrt_psd(&c, PSD_FLOOR).expect("psd input");
        let sq = (s.entries() * s.entries() - c.entries()).amax() / scale;
        let p = pinv_psd(&c, 1e-10).expect("psd input");
        let (a, pe) = (c.entries(), p.entries());
        let penrose = [
            (a * pe * a - a).amax() / scale,
            (pe * a * pe - pe).amax() / pe.amax(),
            (a * pe - (a * pe).transpose()).amax(),
            (pe * a - (pe * a).transpose()).amax(),
        ];
        worst = penrose.iter().fold(worst.max(sq), |m, v| m.max(*v));
    }
    CheckOutcome::new("square root and pseudo-inverse", worst < 1e-8, format!("worst relative residual {worst:.2e}"))
}

fn schatten_ordering(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let ok = (0..50).all(|_| {
        let (r, c) = (rng.gen_range(1..20), rng.gen_range(1..20));
        let m = Operator::new(gaussian(rng, r, c));
        let (s1, s2, si) = (
            schatten_norm(&m, SchattenP::One),
            schatten_norm(&m, SchattenP::Two),
            schatten_norm(&m, SchattenP::Inf),
        );
        si <= s2 * (1.0 + 1e-12) && s2 <= s1 * (1.0 + 1e-12)
    });
    CheckOutcome::new("schatten norm ordering", ok, "S_inf <= S_2 <= S_1 on 50 matrices".into())
}

fn mspe_identity(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let (mut id_err, mut r_norm, mut min_gap): (f64, f64, f64) = (0.0, 0.0, f64::INFINITY);
    for _ in 0..100 {
        let d = rng.gen_range(2..=30);
        let rank = rng.gen_range(1..=2 * d);
        let (cyy, cxx, cxy) = joint_triple(rng, d, rank);
        let baker = match baker_factor(&cyy, &cxx, &cxy, BAKER_TOL) {
            Ok(b) => b,
            Err(e) => return CheckOutcome::new("mspe decomposition", false, e.to_string()),
        };
        r_norm = r_norm.max(baker.r.operator_norm());
        for _ in 0..5 {
            let b = Operator::new(gaussian(rng, d, d));
            let dec = decompose_with(&b, &cyy, &baker);
            let Ok(direct) = population_mspe(&b, &cyy, &cxx, &cxy) else {
                return CheckOutcome::new("mspe decomposition", false, "population_mspe failed".into());
            };
            id_err = id_err.max((direct - dec.total).abs() / direct.abs().max(1.0));
            min_gap = min_gap.min(direct - dec.sigma_min);
        }
    }
    let passed = id_err <= 1e-8 && r_norm <= 1.0 + 1e-8 && min_gap >= -1e-9;
    CheckOutcome::new(
        "mspe decomposition",
        passed,
        format!("identity error {id_err:.2e}, max |R| {r_norm:.10}, min excess {min_gap:.2e}"),
    )
}

fn olpo(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut worst: f64 = 0.0;
    let mut witness_gap: f64 = 0.0;
    for _ in 0..30 {
        let d = rng.gen_range(3..=20);
        let rank = rng.gen_range(1..d);
        let (cyy, cxx, cxy) = joint_triple(rng, d, rank);
        let a = Operator::new(cxy.entries() * pinv_psd(&cxx, 1e-10).expect("psd").entries());
        let check = check_olpo(&a, &cxx, &cxy, 1e-8).expect("square inputs");
        let baker = baker_factor(&cyy, &cxx, &cxy, BAKER_TOL).expect("consistent triple");
        let sm = decompose_with(&a, &cyy, &baker).sigma_min;
        let m = population_mspe(&a, &cyy, &cxx, &cxy).expect("consistent triple");
        worst = worst.max(if check.passes { (m - sm).abs() } else { f64::INFINITY });
        let eig = sym_eig(&cxx).expect("symmetric");
        let kernel = eig.spectral_map(d, |l| if l.abs() <= 1e-10 * eig.max_eigenvalue() { 1.0 } else { 0.0 });
        let shifted = a.add(&Operator::new(gaussian(rng, d, d)).compose(&kernel).unwrap()).unwrap();
        let m2 = population_mspe(&shifted, &cyy, &cxx, &cxy).expect("consistent triple");
        witness_gap = witness_gap.max((m2 - m).abs());
    }
    CheckOutcome::new(
        "optimal predictor characterization",
        worst <= 1e-8 && witness_gap <= 1e-10,
        format!("|mspe - sigma_min| {worst:.2e}, kernel perturbation gap {witness_gap:.2e}"),
    )
}

fn elbow(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut mismatches = 0;
    let mut bound_violations = 0;
    for _ in 0..2000 {
        let n = rng.gen_range(1..40);
        let mut l: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0f64).powi(3)).collect();
        l.sort_by(|a, b| b.total_cmp(a));
        let tau = rng.gen_range(1e-4..0.3);
        let cap = rng.gen_range(1..=n + 2);
        let k = select_k_elbow(&l, tau, cap).expect("non-empty");
        if k != scan_reference(&l, tau, cap) {
            mismatches += 1;
        }
        let qualified = (k..=n).any(|j| l[j - 1] >= l.get(j).copied().unwrap_or(0.0) + tau);
        if k < n && l[k] > 0.0 && qualified {
            let d = sym_eig(&Operator::from_diagonal(&l)).expect("diagonal");
            let inv = regularized_inverse(&d, k).expect("positive retained spectrum");
            if inv.inverse.operator_norm() > 1.0 / tau * (1.0 + 1e-12) {
                bound_violations += 1;
            }
        }
    }
    CheckOutcome::new(
        "elbow rank selection",
        mismatches == 0 && bound_violations == 0,
        format!("{mismatches} scan mismatches, {bound_violations} bound violations in 2000 draws"),
    )
}

fn noise_traces(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let grid = make_grid(200).expect("valid grid");
    let mut worst: f64 = 0.0;
    for case in NoiseCase::ALL {
        let data = sample_noise_dataset(case, &grid, 20_000, rng).expect("valid size");
        let tr = trace(&sample_cov(&data)).expect("square");
        worst = worst.max((tr - SIGMA_MIN).abs());
    }
    CheckOutcome::new("noise traces", worst < 0.005, format!("max |trace - 1/6| = {worst:.4} over 2e4 draws"))
}

fn harness_determinism() -> CheckOutcome {
    let cfg = ExperimentConfig {
        models: vec![Model::M1, Model::M3],
        cases: vec![NoiseCase::Bb],
        sample_sizes: vec![20, 40],
        estimators: vec![Estimator::FpcaLs, Estimator::ReducedY],
        replications: 4,
        grid_points: 60,
        n_fourier: 21,
        burn_in: 50,
        ..ExperimentConfig::default()
    };
    let run = |w| run_experiment_with_workers(&cfg, w).and_then(|t| csv_string(&t).map(|s| (t, s)));
    match (run(1), run(4)) {
        (Ok((table, a)), Ok((_, b))) => {
            let round_trip = read_csv(a.as_bytes()).map(|t| t.rows == table.rows).unwrap_or(false);
            CheckOutcome::new(
                "harness determinism",
                a == b && round_trip,
                format!("identical CSV across workers: {}, exact round trip: {round_trip}", a == b),
            )
        }
        (Err(e), _) | (_, Err(e)) => CheckOutcome::new("harness determinism", false, e.to_string()),
    }
}

pub fn run_all() -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(20240607);
    vec![
        fourier_orthonormality(),
        bb_spectrum(),
        sqrt_and_pinv(&mut rng),
        schatten_ordering(&mut rng),
        mspe_identity(&mut rng),
        olpo(&mut rng),
        elbow(&mut rng),
        noise_traces(&mut rng),
        harness_determinism(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scan_reference_examples() {
        assert_eq!(scan_reference(&[1.0, 0.5, 0.4, 0.39], 0.05, 10), 4);
        assert_eq!(scan_reference(&[0.3, 0.3, 0.3], 0.5, 10), 1);
        assert_eq!(scan_reference(&[1.0, 0.5, 0.4, 0.39], 0.05, 2), 2);
    }

    #[test]
    fn suite_passes() {
        for outcome in run_all() {
            assert!(outcome.passed, "{}", outcome.line());
        }
    }
}
