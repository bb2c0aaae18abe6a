//! Discrete-time plant with a quadratic residual nonlinearity.
//!
//! The plant evolves as
//!
//! ```text
//! x' = A x + B u + E d_x + F (x - x_ss(u)) ⊗ (x - x_ss(u))
//! y  = C x + D d_y
//! ```
//!
//! where `x_ss(u) = (I - A)^{-1} (B u + E d_x)` is the steady state under the
//! constant input `u` and `⊗` is the Kronecker product, so `F` is `n × n²`.
//! For `F = 0` the steady-state input/output map `h(u) = G u + H` is affine.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{induced_one_norm, spectral_norm, MatrixData};
use crate::rng::{keyed_rng, streams};

/// Dimensions `(n, p, q, r)`: state, input, output and disturbance sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub r: usize,
}

impl Dims {
    pub const fn new(n: usize, p: usize, q: usize, r: usize) -> Self {
        Self { n, p, q, r }
    }
}

impl Default for Dims {
    fn default() -> Self {
        Self::new(10, 5, 5, 5)
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{},{}", self.n, self.p, self.q, self.r)
    }
}

impl std::str::FromStr for Dims {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        match parts.as_slice() {
            &[n, p, q, r] if n > 0 && p > 0 && q > 0 && r > 0 => Ok(Dims::new(n, p, q, r)),
            _ => Err(format!("expected four positive integers n,p,q,r, got `{s}`")),
        }
    }
}

/// Immutable plant description.
#[derive(Debug, Clone)]
pub struct PlantModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
    e: DMatrix<f64>,
    f: DMatrix<f64>,
    d_x: DVector<f64>,
    d_y: DVector<f64>,
    dims: Dims,
    // (I - A)^{-1}
    resolvent: DMatrix<f64>,
    // E d_x and D d_y, constant for the model lifetime
    state_offset: DVector<f64>,
    output_offset: DVector<f64>,
    has_residual: bool,
}

/// Mutable simulation state owned by a single run.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub x: DVector<f64>,
    pub t: u64,
    pub last_y: DVector<f64>,
}

impl PlantModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        e: DMatrix<f64>,
        f: DMatrix<f64>,
        d_x: DVector<f64>,
        d_y: DVector<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        let dims = Dims::new(n, b.ncols(), c.nrows(), d_x.len());
        check_len("A columns", n, a.ncols())?;
        check_len("B rows", n, b.nrows())?;
        check_len("C columns", n, c.ncols())?;
        check_len("D rows", dims.q, d.nrows())?;
        check_len("D columns", dims.r, d.ncols())?;
        check_len("E rows", n, e.nrows())?;
        check_len("E columns", dims.r, e.ncols())?;
        check_len("F rows", n, f.nrows())?;
        check_len("F columns", n * n, f.ncols())?;
        check_len("d_y", dims.r, d_y.len())?;
        if n == 0 || dims.p == 0 || dims.q == 0 {
            return Err(Error::ModelInvalid("state, input and output sizes must be positive".into()));
        }

        let a_norm = spectral_norm(&a);
        if a_norm.is_nan() || a_norm >= 1.0 {
            return Err(Error::ModelInvalid(format!(
                "spectral norm of A is {a_norm}, must be < 1"
            )));
        }
        let i_minus_a = DMatrix::<f64>::identity(n, n) - &a;
        let resolvent = i_minus_a
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::ModelInvalid("I - A is singular".into()))?;
        let state_offset = &e * &d_x;
        let output_offset = &d * &d_y;
        let has_residual = f.iter().any(|&v| v != 0.0);

        Ok(Self {
            a,
            b,
            c,
            d,
            e,
            f,
            d_x,
            d_y,
            dims,
            resolvent,
            state_offset,
            output_offset,
            has_residual,
        })
    }

    /// Linear plant (`F = 0`).
    #[allow(clippy::too_many_arguments)]
    pub fn linear(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        e: DMatrix<f64>,
        d_x: DVector<f64>,
        d_y: DVector<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        Self::new(a, b, c, d, e, DMatrix::zeros(n, n * n), d_x, d_y)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }
    pub fn e(&self) -> &DMatrix<f64> {
        &self.e
    }
    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }
    pub fn d_x(&self) -> &DVector<f64> {
        &self.d_x
    }
    pub fn d_y(&self) -> &DVector<f64> {
        &self.d_y
    }

    pub fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c * x + &self.output_offset
    }

    /// Plant state at `t = 0`.
    pub fn initial_state(&self, x0: DVector<f64>) -> Result<PlantState> {
        check_len("initial state", self.dims.n, x0.len())?;
        let last_y = self.output(&x0);
        Ok(PlantState { x: x0, t: 0, last_y })
    }

    /// State at rest at the steady state of `u`.
    pub fn settled_state(&self, u: &DVector<f64>) -> Result<PlantState> {
        let x = self.steady_state_state(u)?;
        self.initial_state(x)
    }

    /// `x_ss(u) = (I - A)^{-1} (B u + E d_x)`.
    pub fn steady_state_state(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("input", self.dims.p, u.len())?;
        Ok(&self.resolvent * (&self.b * u + &self.state_offset))
    }

    /// `h(u) = C x_ss(u) + D d_y`.
    pub fn steady_state_output(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.output(&self.steady_state_state(u)?))
    }

    /// Steady-state sensitivity `G = C (I - A)^{-1} B`.
    pub fn sensitivity(&self) -> DMatrix<f64> {
        &self.c * &self.resolvent * &self.b
    }

    /// Offset `H = C (I - A)^{-1} E d_x + D d_y`, so that `h(u) = G u + H`.
    pub fn output_offset_at_rest(&self) -> DVector<f64> {
        &self.c * (&self.resolvent * &self.state_offset) + &self.output_offset
    }

    /// One plant step under input `u`, returning the state at `t + 1`.
    pub fn step(&self, state: &PlantState, u: &DVector<f64>) -> Result<PlantState> {
        let mut next = state.clone();
        self.advance(&mut next, u)?;
        Ok(next)
    }

    /// In-place variant of [`step`](Self::step); returns a reference to `y_{t+1}`.
    pub fn advance<'s>(&self, state: &'s mut PlantState, u: &DVector<f64>) -> Result<&'s DVector<f64>> {
        check_len("state", self.dims.n, state.x.len())?;
        check_len("input", self.dims.p, u.len())?;
        let mut x_next = &self.a * &state.x + &self.b * u + &self.state_offset;
        if self.has_residual {
            // x_ss is recomputed for the input applied at this step
            let dev = &state.x - self.steady_state_state(u)?;
            x_next += &self.f * dev.kronecker(&dev);
        }
        state.last_y = self.output(&x_next);
        state.x = x_next;
        state.t += 1;
        Ok(&state.last_y)
    }

    /// Empirical plant-speed bound: simulates `input_trace` from `x0` and
    /// returns `max_t ||y_{t+1} - h(u_t)||²`.
    pub fn estimate_mu(&self, input_trace: &[DVector<f64>], x0: &DVector<f64>) -> Result<f64> {
        if input_trace.is_empty() {
            return Err(Error::EmptySeries("input trace for mu estimation".into()));
        }
        let mut state = self.initial_state(x0.clone())?;
        let mut mu = 0.0f64;
        for u in input_trace {
            let y = self.advance(&mut state, u)?.clone();
            let h = self.steady_state_output(u)?;
            mu = mu.max((y - h).norm_squared());
        }
        Ok(mu)
    }

    pub fn to_data(&self) -> PlantData {
        PlantData {
            dims: self.dims,
            a: MatrixData::from(&self.a),
            b: MatrixData::from(&self.b),
            c: MatrixData::from(&self.c),
            d: MatrixData::from(&self.d),
            e: MatrixData::from(&self.e),
            f: MatrixData::from(&self.f),
            d_x: self.d_x.iter().copied().collect(),
            d_y: self.d_y.iter().copied().collect(),
        }
    }

    pub fn from_data(data: &PlantData) -> Result<Self> {
        let model = Self::new(
            data.a.to_matrix()?,
            data.b.to_matrix()?,
            data.c.to_matrix()?,
            data.d.to_matrix()?,
            data.e.to_matrix()?,
            data.f.to_matrix()?,
            DVector::from_vec(data.d_x.clone()),
            DVector::from_vec(data.d_y.clone()),
        )?;
        if model.dims != data.dims {
            return Err(Error::Config(format!(
                "declared dims {} do not match matrices {}",
                data.dims, model.dims
            )));
        }
        Ok(model)
    }
}

/// Serialized plant: matrices row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantData {
    pub dims: Dims,
    pub a: MatrixData,
    pub b: MatrixData,
    pub c: MatrixData,
    pub d: MatrixData,
    pub e: MatrixData,
    pub f: MatrixData,
    pub d_x: Vec<f64>,
    pub d_y: Vec<f64>,
}

/// Draws a random plant: all matrix entries `U(0, 1)`, `A` rescaled to
/// spectral norm `a_norm`, `F` rescaled to induced 1-norm `f_norm`, and
/// disturbances `N(0, 1)`. Deterministic per seed.
pub fn generate_random_plant(seed: u64, dims: Dims, a_norm: f64, f_norm: f64) -> Result<PlantModel> {
    if !(0.0..1.0).contains(&a_norm) {
        return Err(Error::invalid("a_norm", format!("{a_norm} must lie in [0, 1)")));
    }
    if !(f_norm >= 0.0 && f_norm.is_finite()) {
        return Err(Error::invalid("f_norm", format!("{f_norm} must be finite and non-negative")));
    }
    let Dims { n, p, q, r } = dims;
    if n == 0 || p == 0 || q == 0 || r == 0 {
        return Err(Error::Config(format!("all dims must be positive, got {dims}")));
    }

    let mut rng = keyed_rng(seed, streams::PLANT, 0);
    let mut uniform = |rows: usize, cols: usize| DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>());
    let mut a = uniform(n, n);
    let b = uniform(n, p);
    let c = uniform(q, n);
    let d = uniform(q, r);
    let e = uniform(n, r);
    let mut f = uniform(n, n * n);
    let mut normal = |len: usize| DVector::from_fn(len, |_, _| StandardNormal.sample(&mut rng));
    let d_x = normal(r);
    let d_y = normal(r);

    a *= a_norm / spectral_norm(&a);
    f *= f_norm / induced_one_norm(&f);

    PlantModel::new(a, b, c, d, e, f, d_x, d_y)
}
