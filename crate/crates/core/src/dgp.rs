//! Functional AR(1) designs with Brownian-type innovations.
//!
//! `X_t = Σ_{j≤n_fourier} a_j ⟨X_{t−1}, f_j⟩ f_j + e_t` and `Y_t = A X_t + ε_t`
//! where `{f_j}` is the Fourier basis, `e_t, ε_t` are independent draws of
//! one noise family, and `A` is either a scalar multiple of the identity or
//! diagonal in the Fourier basis. Every noise family has trace `1/6`, which
//! is therefore the minimal achievable MSPE.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::covariance::Dataset;
use crate::error::{Error, Result};
use crate::hilbert::{FunctionSample, Grid};

/// Scale applied to standard Brownian motion so its covariance has trace 1/6.
pub const BM_SCALE: f64 = 0.577_350_269_189_625_8; // sqrt(1/3)

/// Minimal MSPE shared by every design.
pub const SIGMA_MIN: f64 = 1.0 / 6.0;

pub const DEFAULT_N_FOURIER: usize = 101;
pub const DEFAULT_BURN_IN: usize = 200;
/// Number of Fourier directions scaled by `b_j` in Models 2 and 4.
pub const DIAGONAL_RESPONSE_LEN: usize = 100;

/// Innovation family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NoiseCase {
    /// Brownian bridge `W(x) − x W(1)`.
    #[serde(rename = "BB")]
    Bb,
    /// Centered Brownian motion `W(x) − ∫ W`.
    #[serde(rename = "CBM")]
    Cbm,
    /// Scaled Brownian motion `W(x)/√3`.
    #[serde(rename = "BM")]
    Bm,
}

impl NoiseCase {
    pub const ALL: [NoiseCase; 3] = [NoiseCase::Bb, NoiseCase::Cbm, NoiseCase::Bm];

    pub fn label(self) -> &'static str {
        match self {
            NoiseCase::Bb => "BB",
            NoiseCase::Cbm => "CBM",
            NoiseCase::Bm => "BM",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            NoiseCase::Bb => 0,
            NoiseCase::Cbm => 1,
            NoiseCase::Bm => 2,
        }
    }
}

impl fmt::Display for NoiseCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for NoiseCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "BB" => Ok(NoiseCase::Bb),
            "CBM" => Ok(NoiseCase::Cbm),
            "BM" => Ok(NoiseCase::Bm),
            other => Err(Error::Config(format!("unknown noise case {other:?}"))),
        }
    }
}

/// Simulation model 1–4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Model {
    M1,
    M2,
    M3,
    M4,
}

impl Model {
    pub const ALL: [Model; 4] = [Model::M1, Model::M2, Model::M3, Model::M4];

    pub fn id(self) -> u8 {
        match self {
            Model::M1 => 1,
            Model::M2 => 2,
            Model::M3 => 3,
            Model::M4 => 4,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(Model::M1),
            2 => Ok(Model::M2),
            3 => Ok(Model::M3),
            4 => Ok(Model::M4),
            other => Err(Error::Config(format!("model id {other} not in 1..=4"))),
        }
    }

    /// Upper end of the uniform law of the AR coefficients.
    pub fn ar_upper(self) -> f64 {
        match self {
            Model::M1 | Model::M2 => 0.25,
            Model::M3 | Model::M4 => 0.75,
        }
    }

    pub fn ar_lower(self) -> f64 {
        -0.1
    }

    /// Whether `A` is diagonal in the Fourier basis (Models 2 and 4) rather
    /// than a scalar multiple of the identity.
    pub fn diagonal_response(self) -> bool {
        matches!(self, Model::M2 | Model::M4)
    }
}

impl From<Model> for u8 {
    fn from(m: Model) -> u8 {
        m.id()
    }
}

impl TryFrom<u8> for Model {
    type Error = Error;

    fn try_from(id: u8) -> Result<Self> {
        Model::from_id(id)
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id())
    }
}

/// Value of the `j`-th (1-based) Fourier basis function at `x`:
/// `f_1 = 1`, `f_{2k} = √2 sin(2πkx)`, `f_{2k+1} = √2 cos(2πkx)`.
pub fn fourier_value(j: usize, x: f64) -> f64 {
    assert!(j >= 1, "Fourier index is 1-based");
    if j == 1 {
        return 1.0;
    }
    let k = (j / 2) as f64;
    let arg = 2.0 * std::f64::consts::PI * k * x;
    if j % 2 == 0 {
        std::f64::consts::SQRT_2 * arg.sin()
    } else {
        std::f64::consts::SQRT_2 * arg.cos()
    }
}

pub fn fourier_basis(j: usize, grid: &Grid) -> Result<FunctionSample> {
    if j == 0 {
        return Err(Error::InvalidArgument("Fourier index is 1-based".into()));
    }
    Ok(FunctionSample::from_fn(grid.clone(), |x| fourier_value(j, x)))
}

/// The first `len` Fourier functions as rows of a `len × n` matrix of
/// coordinates, so `frame · x` gives `⟨x, f_j⟩` for all `j` at once.
#[derive(Debug, Clone)]
pub struct FourierFrame {
    rows: DMatrix<f64>,
}

impl FourierFrame {
    pub fn new(grid: &Grid, len: usize) -> Self {
        let p = grid.points();
        let s = grid.sqrt_weights();
        let rows = DMatrix::from_fn(len, grid.len(), |j, i| fourier_value(j + 1, p[i]) * s[i]);
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }
}

/// Writes one noise path, in orthonormalized coordinates, into `out`.
fn fill_noise<R: Rng + ?Sized>(case: NoiseCase, grid: &Grid, rng: &mut R, out: &mut [f64]) {
    let p = grid.points();
    let n = grid.len();
    out[0] = 0.0;
    for i in 1..n {
        let z: f64 = rng.sample(StandardNormal);
        out[i] = out[i - 1] + (p[i] - p[i - 1]).sqrt() * z;
    }
    match case {
        NoiseCase::Bb => {
            let end = out[n - 1];
            for (v, &x) in out.iter_mut().zip(p) {
                *v -= x * end;
            }
            out[n - 1] = 0.0;
        }
        NoiseCase::Cbm => {
            let mean: f64 = out.iter().zip(grid.weights()).map(|(v, w)| v * w).sum();
            for v in out.iter_mut() {
                *v -= mean;
            }
        }
        NoiseCase::Bm => {
            for v in out.iter_mut() {
                *v *= BM_SCALE;
            }
        }
    }
    for (v, s) in out.iter_mut().zip(grid.sqrt_weights()) {
        *v *= s;
    }
}

/// One draw of the noise process on the grid.
pub fn sample_noise<R: Rng + ?Sized>(case: NoiseCase, grid: &Grid, rng: &mut R) -> FunctionSample {
    let mut buf = vec![0.0; grid.len()];
    fill_noise(case, grid, rng, &mut buf);
    FunctionSample::from_coords(grid.clone(), DVector::from_vec(buf)).expect("length matches")
}

/// `t` independent noise draws as rows of a dataset.
pub fn sample_noise_dataset<R: Rng + ?Sized>(
    case: NoiseCase,
    grid: &Grid,
    t: usize,
    rng: &mut R,
) -> Result<Dataset> {
    let n = grid.len();
    let mut data = DMatrix::zeros(t, n);
    let mut buf = vec![0.0; n];
    for r in 0..t {
        fill_noise(case, grid, rng, &mut buf);
        data.row_mut(r).copy_from_slice(&buf);
    }
    Dataset::new(grid.clone(), data)
}

/// How `A` acts on the predictor.
#[derive(Debug, Clone, PartialEq)]
pub enum ResponseMap {
    /// `A = b0 · I`.
    Scalar(f64),
    /// `A f_j = b_j f_j` for `j ≤ b.len()`, identity on the complement.
    Diagonal(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrawnParams {
    /// AR coefficients on the first `a.len()` Fourier directions.
    pub a: Vec<f64>,
    pub response: ResponseMap,
}

impl DrawnParams {
    pub fn check_stationary(&self) -> Result<()> {
        match self.a.iter().position(|a| !(a.abs() < 1.0)) {
            Some(j) => Err(Error::InvalidParams(format!(
                "|a_{}| = {} violates stationarity",
                j + 1,
                self.a[j].abs()
            ))),
            None => Ok(()),
        }
    }
}

/// Fresh iid draws of the model's coefficient laws.
pub fn draw_model_params<R: Rng + ?Sized>(model: Model, n_fourier: usize, rng: &mut R) -> DrawnParams {
    let ar = Uniform::new(model.ar_lower(), model.ar_upper());
    let a = (0..n_fourier).map(|_| rng.sample(ar)).collect();
    let coef = Uniform::new_inclusive(-2.5, 2.5);
    let response = if model.diagonal_response() {
        ResponseMap::Diagonal((0..DIAGONAL_RESPONSE_LEN).map(|_| rng.sample(coef)).collect())
    } else {
        ResponseMap::Scalar(rng.sample(coef))
    };
    DrawnParams { a, response }
}

/// Applies `A` to every row of `x` (rows are coordinate vectors).
fn apply_response_rows(response: &ResponseMap, frame: &FourierFrame, x: &DMatrix<f64>) -> DMatrix<f64> {
    match response {
        ResponseMap::Scalar(b0) => x * *b0,
        ResponseMap::Diagonal(b) => {
            let f = frame.rows().rows(0, b.len());
            // scores (T × m) scaled by (b_j − 1) and mapped back; the
            // complement of span{f_1..f_m} passes through unchanged
            let mut scores = x * f.transpose();
            for (j, bj) in b.iter().enumerate() {
                scores.column_mut(j).scale_mut(bj - 1.0);
            }
            x + scores * f
        }
    }
}

/// `A x` for one sample.
pub fn apply_a(params: &DrawnParams, frame: &FourierFrame, x: &FunctionSample) -> Result<FunctionSample> {
    if let ResponseMap::Diagonal(b) = &params.response {
        if frame.len() < b.len() || frame.rows().ncols() != x.coords().len() {
            return Err(Error::Shape("Fourier frame does not cover the response map".into()));
        }
    }
    let row = x.coords().transpose();
    let out = apply_response_rows(&params.response, frame, &DMatrix::from_row_slice(1, row.len(), row.as_slice()));
    FunctionSample::from_coords(x.grid().clone(), out.row(0).transpose())
}

/// Design of one simulated dataset.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub model: Model,
    pub noise_case: NoiseCase,
    pub t: usize,
    pub grid: Grid,
    pub n_fourier: usize,
    pub burn_in: usize,
}

impl ModelSpec {
    pub fn new(model: Model, noise_case: NoiseCase, t: usize, grid: Grid) -> Self {
        Self {
            model,
            noise_case,
            t,
            grid,
            n_fourier: DEFAULT_N_FOURIER,
            burn_in: DEFAULT_BURN_IN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t < 2 {
            return Err(Error::InvalidArgument(format!("sample size {} below 2", self.t)));
        }
        if self.n_fourier < 1 {
            return Err(Error::InvalidArgument("n_fourier must be positive".into()));
        }
        // trapezoid sums are exact for frequencies below n−1, so products of
        // frame elements stay orthonormal only when 2·k_max < n−1
        let k_max = self.n_fourier / 2;
        if 2 * k_max >= self.grid.len() - 1 {
            return Err(Error::InvalidArgument(format!(
                "{} Fourier functions are not resolved by a {}-point grid",
                self.n_fourier,
                self.grid.len()
            )));
        }
        if self.model.diagonal_response() && self.n_fourier < DIAGONAL_RESPONSE_LEN {
            return Err(Error::InvalidArgument(format!(
                "models 2 and 4 need at least {DIAGONAL_RESPONSE_LEN} Fourier functions"
            )));
        }
        Ok(())
    }
}

/// Simulates the FAR(1) predictor: `X_0` is a pure noise draw, the
/// recursion runs `burn_in + T` steps, and the last `T` are returned.
pub fn simulate_far1<R: Rng + ?Sized>(params: &DrawnParams, spec: &ModelSpec, rng: &mut R) -> Result<Dataset> {
    params.check_stationary()?;
    spec.validate()?;
    if params.a.len() != spec.n_fourier {
        return Err(Error::InvalidParams(format!(
            "{} AR coefficients for {} Fourier functions",
            params.a.len(),
            spec.n_fourier
        )));
    }
    let frame = FourierFrame::new(&spec.grid, params.a.len());
    simulate_with_frame(params, spec, &frame, rng)
}

fn simulate_with_frame<R: Rng + ?Sized>(
    params: &DrawnParams,
    spec: &ModelSpec,
    frame: &FourierFrame,
    rng: &mut R,
) -> Result<Dataset> {
    let n = spec.grid.len();
    let steps = spec.burn_in + spec.t;
    let a = DVector::from_column_slice(&params.a);
    let f = frame.rows().rows(0, params.a.len());
    let mut buf = vec![0.0; n];
    fill_noise(spec.noise_case, &spec.grid, rng, &mut buf);
    let x0 = DVector::from_column_slice(&buf);
    let mut noise = DMatrix::zeros(steps, n);
    for r in 0..steps {
        fill_noise(spec.noise_case, &spec.grid, rng, &mut buf);
        noise.row_mut(r).copy_from_slice(&buf);
    }
    // The recursion only touches X through its frame coordinates, so it runs
    // on those: with s_t = a ∘ (F X_{t−1}), F X_t = (F Fᵀ) s_t + F e_t.
    let noise_scores = &noise * f.transpose();
    let gram = f * f.transpose();
    let mut coords = f * x0;
    let mut kept = DMatrix::zeros(spec.t, params.a.len());
    for step in 0..steps {
        let scores = coords.component_mul(&a);
        coords = &gram * &scores + noise_scores.row(step).transpose();
        if step >= spec.burn_in {
            kept.row_mut(step - spec.burn_in).copy_from(&scores.transpose());
        }
    }
    let data = kept * f + noise.rows(spec.burn_in, spec.t);
    Dataset::new(spec.grid.clone(), data)
}

/// A simulated `(X, Y)` pair with the parameters that produced it.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub x: Dataset,
    pub y: Dataset,
    /// The innovations `ε_t` added to `A X_t`.
    pub eps: Dataset,
    pub params: DrawnParams,
    pub sigma_min_true: f64,
}

/// Draws parameters, simulates `X`, and sets `Y_t = A X_t + ε_t`.
/// Fully determined by `(spec, seed)`.
pub fn generate_dataset(spec: &ModelSpec, seed: u64) -> Result<GeneratedData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = draw_model_params(spec.model, spec.n_fourier, &mut rng);
    let frame = FourierFrame::new(&spec.grid, spec.n_fourier);
    let x = simulate_with_frame(&params, spec, &frame, &mut rng)?;
    let eps = sample_noise_dataset(spec.noise_case, &spec.grid, spec.t, &mut rng)?;
    let y = Dataset::new(
        spec.grid.clone(),
        apply_response_rows(&params.response, &frame, x.matrix()) + eps.matrix(),
    )?;
    Ok(GeneratedData {
        x,
        y,
        eps,
        params,
        sigma_min_true: SIGMA_MIN,
    })
}

/// Header line of a dataset dump.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpHeader {
    pub grid_points: usize,
    pub t: usize,
    pub model: Model,
    pub case: NoiseCase,
    pub seed: u64,
}

impl fmt::Display for DumpHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "# grid_points={} T={} model={} case={} seed={}",
            self.grid_points, self.t, self.model, self.case, self.seed
        )
    }
}

impl FromStr for DumpHeader {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let body = line
            .strip_prefix('#')
            .ok_or_else(|| Error::InvalidArgument("dump header must start with '#'".into()))?;
        let mut grid_points = None;
        let mut t = None;
        let mut model = None;
        let mut case = None;
        let mut seed = None;
        for field in body.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("malformed header field {field:?}")))?;
            let bad = |_| Error::InvalidArgument(format!("bad value in header field {field:?}"));
            match k {
                "grid_points" => grid_points = Some(v.parse().map_err(bad)?),
                "T" => t = Some(v.parse().map_err(bad)?),
                "model" => model = Some(Model::from_id(v.parse().map_err(bad)?)?),
                "case" => case = Some(v.parse()?),
                "seed" => seed = Some(v.parse().map_err(bad)?),
                _ => {}
            }
        }
        let missing = |name: &str| Error::InvalidArgument(format!("dump header lacks {name}"));
        Ok(DumpHeader {
            grid_points: grid_points.ok_or_else(|| missing("grid_points"))?,
            t: t.ok_or_else(|| missing("T"))?,
            model: model.ok_or_else(|| missing("model"))?,
            case: case.ok_or_else(|| missing("case"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
        })
    }
}

/// Writes a dataset as plain text: the header line, then one row per time
/// point holding the pointwise function values.
pub fn write_dataset(path: &Path, data: &Dataset, header: &DumpHeader) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{header}")?;
    let s = data.grid().sqrt_weights();
    for row in data.matrix().row_iter() {
        let line: Vec<String> = row.iter().zip(s).map(|(c, w)| format!("{}", c / w)).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a dump written by [`write_dataset`] back onto `grid`.
pub fn read_dataset(path: &Path, grid: &Grid) -> Result<(DumpHeader, Dataset)> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header: DumpHeader = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument("empty dump".into()))??
        .parse()?;
    if header.grid_points != grid.len() {
        return Err(Error::Shape(format!(
            "dump has {} grid points, grid has {}",
            header.grid_points,
            grid.len()
        )));
    }
    let mut samples = Vec::with_capacity(header.t);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::InvalidArgument(format!("bad number in dump: {e}")))?;
        samples.push(FunctionSample::from_values(grid.clone(), &values)?);
    }
    if samples.len() != header.t {
        return Err(Error::Shape(format!(
            "dump declares T={} but holds {} rows",
            header.t,
            samples.len()
        )));
    }
    Ok((header, Dataset::from_samples(&samples)?))
}
