//! Quadratic steady-state loss and the reduced objective it induces.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{symmetric_lambda_max, MatrixData};
use crate::plant::PlantModel;
use crate::rng::{keyed_rng, standard_normal_vector, streams};

/// `Φ(u, y) = uᵀ R1 u + R2ᵀ u + ‖y‖²` with `R1 = R3ᵀ R3`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    r3: DMatrix<f64>,
    r1: DMatrix<f64>,
    r2: DVector<f64>,
    seed: Option<u64>,
}

impl QuadraticObjective {
    pub fn from_factor(r3: DMatrix<f64>, r2: DVector<f64>) -> Result<Self> {
        let p = r3.ncols();
        check_len("R3 rows", p, r3.nrows())?;
        check_len("R2", p, r2.len())?;
        let mut r1 = r3.transpose() * &r3;
        // exact symmetry
        for i in 0..p {
            for j in 0..i {
                r1[(i, j)] = r1[(j, i)];
            }
        }
        Ok(Self { r3, r1, r2, seed: None })
    }

    /// Entries of `R3` and `R2` drawn from `U(0, 1)`.
    pub fn random(seed: u64, p: usize) -> Result<Self> {
        let mut rng = keyed_rng(seed, streams::OBJECTIVE, 0);
        let r3 = DMatrix::from_fn(p, p, |_, _| rng.random::<f64>());
        let r2 = DVector::from_fn(p, |_, _| rng.random::<f64>());
        let mut obj = Self::from_factor(r3, r2)?;
        obj.seed = Some(seed);
        Ok(obj)
    }

    pub fn input_dim(&self) -> usize {
        self.r2.len()
    }
    pub fn r1(&self) -> &DMatrix<f64> {
        &self.r1
    }
    pub fn r2(&self) -> &DVector<f64> {
        &self.r2
    }
    pub fn r3(&self) -> &DMatrix<f64> {
        &self.r3
    }
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn phi(&self, u: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        check_len("input", self.input_dim(), u.len())?;
        Ok(self.phi_unchecked(u, y))
    }

    pub(crate) fn phi_unchecked(&self, u: &DVector<f64>, y: &DVector<f64>) -> f64 {
        (&self.r1 * u).dot(u) + self.r2.dot(u) + y.norm_squared()
    }

    /// `∇_u Φ = 2 R1 u + R2`.
    pub fn grad_u(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.r1 * u * 2.0 + &self.r2
    }

    /// `∇_y Φ = 2 y`.
    pub fn grad_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y * 2.0
    }

    pub fn to_data(&self) -> ObjectiveData {
        ObjectiveData {
            seed: self.seed,
            r3: MatrixData::from(&self.r3),
            r2: self.r2.iter().copied().collect(),
        }
    }

    pub fn from_data(data: &ObjectiveData) -> Result<Self> {
        let mut obj = Self::from_factor(data.r3.to_matrix()?, DVector::from_vec(data.r2.clone()))?;
        obj.seed = data.seed;
        Ok(obj)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveData {
    pub seed: Option<u64>,
    pub r3: MatrixData,
    pub r2: Vec<f64>,
}

/// `Φ̃(u) = Φ(u, h(u))` for a plant whose steady-state map is affine,
/// `h(u) = G u + H`. Then `Φ̃(u) = uᵀ Q u + bᵀ u + ‖H‖²` with
/// `Q = R1 + GᵀG` and `b = R2 + 2 GᵀH`.
#[derive(Debug, Clone)]
pub struct ReducedObjective<'a> {
    objective: &'a QuadraticObjective,
    plant: &'a PlantModel,
    g: DMatrix<f64>,
    h: DVector<f64>,
    q: DMatrix<f64>,
    b: DVector<f64>,
}

/// Analytic minimizer of `Φ̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct Minimizer {
    pub u: DVector<f64>,
    pub value: f64,
}

/// Constants of the reduced objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    /// Exact smoothness constant `L = 2 λ_max(R1 + GᵀG)`.
    pub smoothness: f64,
    /// Local Lipschitz constant of `Φ` in `y` on the ball `‖y‖ ≤ output_radius`.
    /// `Φ` is quadratic in `y`, so no global constant exists.
    pub output_lipschitz: f64,
    pub output_radius: f64,
}

impl<'a> ReducedObjective<'a> {
    pub fn new(objective: &'a QuadraticObjective, plant: &'a PlantModel) -> Result<Self> {
        check_len("objective input dim", plant.dims().p, objective.input_dim())?;
        let g = plant.sensitivity();
        let h = plant.output_offset_at_rest();
        let gt = g.transpose();
        let mut q = objective.r1() + &gt * &g;
        let p = q.nrows();
        for i in 0..p {
            for j in 0..i {
                q[(i, j)] = q[(j, i)];
            }
        }
        let b = objective.r2() + &gt * &h * 2.0;
        Ok(Self {
            objective,
            plant,
            g,
            h,
            q,
            b,
        })
    }

    pub fn objective(&self) -> &QuadraticObjective {
        self.objective
    }
    pub fn plant(&self) -> &PlantModel {
        self.plant
    }
    pub fn sensitivity(&self) -> &DMatrix<f64> {
        &self.g
    }
    pub fn offset(&self) -> &DVector<f64> {
        &self.h
    }
    /// Half Hessian `Q = R1 + GᵀG`.
    pub fn half_hessian(&self) -> &DMatrix<f64> {
        &self.q
    }
    pub fn linear_term(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn tilde_phi(&self, u: &DVector<f64>) -> Result<f64> {
        let y = self.plant.steady_state_output(u)?;
        Ok(self.objective.phi_unchecked(u, &y))
    }

    /// `∇Φ̃(u) = 2 Q u + b`.
    pub fn grad_tilde_phi(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("input", self.q.nrows(), u.len())?;
        Ok(&self.q * u * 2.0 + &self.b)
    }

    pub fn analytic_minimizer(&self) -> Result<Minimizer> {
        let chol = (&self.q * 2.0).cholesky().ok_or_else(|| {
            Error::DegenerateObjective("R1 + GᵀG is not positive definite".into())
        })?;
        let u = -chol.solve(&self.b);
        let value = self.tilde_phi(&u)?;
        Ok(Minimizer { u, value })
    }

    pub fn smoothness(&self) -> f64 {
        2.0 * symmetric_lambda_max(&self.q)
    }

    pub fn derived_constants(&self, output_radius: f64) -> DerivedConstants {
        DerivedConstants {
            smoothness: self.smoothness(),
            output_lipschitz: 2.0 * output_radius,
            output_radius,
        }
    }

    /// Lipschitz constant of `Φ̃` on the ball `‖u‖ ≤ radius`. Reported only.
    pub fn input_lipschitz(&self, radius: f64) -> f64 {
        2.0 * crate::linalg::spectral_norm(&self.q) * radius + self.b.norm()
    }
}

/// Monte Carlo estimate of a Gaussian-smoothed value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothedValue {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Estimates `f_δ(u) = E_v[f(u + δ v)]`, `v ~ N(0, I)`, from `n_samples`
/// draws of a dedicated seeded stream.
pub fn gaussian_smoothed_value<F>(f: F, u: &DVector<f64>, delta: f64, n_samples: usize, seed: u64) -> Result<SmoothedValue>
where
    F: Fn(&DVector<f64>) -> f64,
{
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::invalid("delta", format!("{delta} must be finite and >= 0")));
    }
    if n_samples < 2 {
        return Err(Error::invalid("n_samples", "need at least 2 samples"));
    }
    if delta == 0.0 {
        return Ok(SmoothedValue {
            mean: f(u),
            std_error: 0.0,
            samples: n_samples,
        });
    }
    let mut rng = keyed_rng(seed, streams::SMOOTHING, 0);
    let mut stats = crate::stats::RunningStats::default();
    for _ in 0..n_samples {
        let v = standard_normal_vector(&mut rng, u.len());
        stats.push(f(&(u + v * delta)));
    }
    Ok(SmoothedValue {
        mean: stats.mean(),
        std_error: stats.std_error(),
        samples: n_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{generate_random_plant, Dims};

    fn scalar_reduced_setup(r1: f64, r2: f64, g: f64) -> (QuadraticObjective, PlantModel) {
        // A = 0, B = g, C = 1, no disturbances: h(u) = g u
        let plant = PlantModel::linear(
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, g),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            DVector::zeros(1),
            DVector::zeros(1),
        )
        .unwrap();
        let obj = QuadraticObjective::from_factor(
            DMatrix::from_element(1, 1, r1.sqrt()),
            DVector::from_element(1, r2),
        )
        .unwrap();
        (obj, plant)
    }

    fn seed0() -> (QuadraticObjective, PlantModel) {
        let plant = generate_random_plant(0, Dims::default(), 0.05, 0.01).unwrap();
        let obj = QuadraticObjective::random(0, 5).unwrap();
        (obj, plant)
    }

    #[test]
    fn phi_arithmetic() {
        let obj = QuadraticObjective::from_factor(DMatrix::identity(2, 2), DVector::zeros(2)).unwrap();
        assert_eq!(obj.phi(&DVector::zeros(2), &DVector::zeros(1)).unwrap(), 0.0);
        let v = obj
            .phi(&DVector::from_vec(vec![1.0, 1.0]), &DVector::from_element(1, 2.0))
            .unwrap();
        assert_eq!(v, 6.0);
    }

    #[test]
    fn phi_matches_scalar_loops() {
        let obj = QuadraticObjective::random(0, 5).unwrap();
        let u = DVector::from_vec(vec![0.3, -1.2, 0.5, 2.0, -0.7]);
        let y = DVector::from_vec(vec![1.0, -2.0, 0.25, 0.0, 3.0]);
        let (r1, r2) = (obj.r1(), obj.r2());
        let mut expected = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                expected += u[i] * r1[(i, j)] * u[j];
            }
            expected += r2[i] * u[i];
            expected += y[i] * y[i];
        }
        assert!((obj.phi(&u, &y).unwrap() - expected).abs() <= 1e-12 * expected.abs().max(1.0));
    }

    #[test]
    fn r1_is_exactly_symmetric() {
        let obj = QuadraticObjective::random(7, 6).unwrap();
        assert_eq!(obj.r1(), &obj.r1().transpose());
    }

    #[test]
    fn zero_everything_gives_zero_tilde_phi() {
        let plant = PlantModel::linear(
            DMatrix::from_element(2, 2, 0.1),
            DMatrix::from_element(2, 2, 1.0),
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            DVector::from_element(2, 1.0),
            DVector::from_element(2, 1.0),
        )
        .unwrap();
        let obj = QuadraticObjective::from_factor(DMatrix::zeros(2, 2), DVector::zeros(2)).unwrap();
        let red = ReducedObjective::new(&obj, &plant).unwrap();
        for u in [vec![0.0, 0.0], vec![3.0, -4.0]] {
            assert_eq!(red.tilde_phi(&DVector::from_vec(u)).unwrap(), 0.0);
        }
    }

    #[test]
    fn scalar_tilde_phi_is_two_u_squared() {
        let (obj, plant) = scalar_reduced_setup(1.0, 0.0, 1.0);
        let red = ReducedObjective::new(&obj, &plant).unwrap();
        for u in [-2.0, 0.5, 3.0] {
            let val = red.tilde_phi(&DVector::from_element(1, u)).unwrap();
            assert!((val - 2.0 * u * u).abs() < 1e-14);
        }
    }

    #[test]
    fn tilde_phi_matches_expanded_quadratic() {
        let (obj, plant) = seed0();
        let red = ReducedObjective::new(&obj, &plant).unwrap();
        let g = plant.sensitivity();
        let h = plant.output_offset_at_rest();
        let q = obj.r1() + g.transpose() * &g;
        let b = obj.r2() + g.transpose() * &h * 2.0;
        let mut rng = keyed_rng(1, 2, 3);
        for _ in 0..10 {
            let u = standard_normal_vector(&mut rng, 5);
            let expanded = (&q * &u).dot(&u) + b.dot(&u) + h.norm_squared();
            let direct = red.tilde_phi(&u).unwrap();
            assert!((expanded - direct).abs() <= 1e-10 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn gradient_of_identity_objective() {
        let (obj, plant) = scalar_reduced_setup(1.0, 0.0, 0.0);
        let red = ReducedObjective::new(&obj, &plant).unwrap();
        let g = red.grad_tilde_phi(&DVector::from_element(1, 1.5)).unwrap();
        assert_eq!(g[0], 3.0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (obj, plant) = seed0();
        let red = ReducedObjective::new(&obj, &plant).unwrap();
        let mut rng = keyed_rng(11, 0, 0);
        for _ in 0..20 {
            let u = standard_normal_vector(&mut rng, 5);
            let step = 1e-5 * u.norm().max(1.0);
            let analytic = red.grad_tilde_phi(&u).unwrap();
            let fd = DVector::from_fn(5, |i, _| {
                let mut up = u.clone();
                let mut dn = u.clone();
                up[i] += step;
                dn[i] -= step;
                (red.tilde_phi(&up).unwrap() - red.tilde_phi(&dn).unwrap()) / (2.0 * step)
            });
            let rel = (&analytic - &fd).norm() / analytic.norm().max(1.0);
            assert!(rel <= 1e-6, "relative error {rel}");
        }
    }

    #[test]
    fn minimizer_scalar_case() {
        let (obj, plant) = scalar_reduced_setup(1.0, -4.0, 1.0);
        let red = ReducedObjective::new(&obj, &plant).unwrap();
        let m = red.analytic_minimizer().unwrap();
        assert!((m.u[0] - 1.0).abs() < 1e-14);
        assert!((m.value + 2.0).abs() < 1e-14);
    }

    #[test]
    fn minimizer_zero_when_no_linear_terms() {
        let (obj, plant) = scalar_reduced_setup(2.0, 0.0, 1.0);
        let red = ReducedObjective::new(&obj, &plant).unwrap();
        let m = red.analytic_minimizer().unwrap();
        assert_eq!(m.u[0], 0.0);
        assert_eq!(m.value, 0.0);
    }

    #[test]
    fn minimizer_is_stationary_and_lower_bound() {
        let (obj, plant) = seed0();
        let red = ReducedObjective::new(&obj, &plant).unwrap();
        let m = red.analytic_minimizer().unwrap();
        assert!(red.grad_tilde_phi(&m.u).unwrap().norm() <= 1e-10);
        let mut rng = keyed_rng(12, 0, 0);
        for _ in 0..100 {
            let u = &m.u + standard_normal_vector(&mut rng, 5);
            assert!(red.tilde_phi(&u).unwrap() >= m.value);
        }
    }

    #[test]
    fn degenerate_objective_reported() {
        let (obj, plant) = scalar_reduced_setup(0.0, 1.0, 0.0);
        let red = ReducedObjective::new(&obj, &plant).unwrap();
        assert!(matches!(red.analytic_minimizer(), Err(Error::DegenerateObjective(_))));
    }

    #[test]
    fn smoothness_constants() {
        let (obj, plant) = scalar_reduced_setup(1.0, 0.0, 0.0);
        assert!((ReducedObjective::new(&obj, &plant).unwrap().smoothness() - 2.0).abs() < 1e-14);
        let (obj, plant) = scalar_reduced_setup(0.0, 0.0, 1.0);
        assert!((ReducedObjective::new(&obj, &plant).unwrap().smoothness() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn smoothness_matches_power_iteration() {
        let (obj, plant) = seed0();
        let red = ReducedObjective::new(&obj, &plant).unwrap();
        let hessian = red.half_hessian() * 2.0;
        let mut v = DVector::from_element(5, 1.0);
        let mut lambda = 0.0;
        for _ in 0..500 {
            let w = &hessian * &v;
            lambda = w.norm() / v.norm();
            v = w.normalize();
        }
        let l = red.smoothness();
        assert!((l - lambda).abs() <= 1e-8 * l, "{l} vs {lambda}");
    }

    #[test]
    fn smoothing_with_zero_delta_is_exact() {
        let f = |u: &DVector<f64>| u.norm_squared() + 1.0;
        let u = DVector::from_vec(vec![1.0, 2.0]);
        let s = gaussian_smoothed_value(f, &u, 0.0, 10, 0).unwrap();
        assert_eq!(s.mean, 6.0);
        assert_eq!(s.std_error, 0.0);
    }

    #[test]
    fn smoothing_leaves_linear_functions_unchanged() {
        let a = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let u = DVector::from_vec(vec![0.2, 0.1, -0.4]);
        let s = gaussian_smoothed_value(|x| a.dot(x), &u, 0.5, 20_000, 3).unwrap();
        assert!((s.mean - a.dot(&u)).abs() <= 3.0 * s.std_error);
    }

    #[test]
    fn smoothing_quadratic_adds_trace() {
        let q = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.2, 0.0, 0.2, 3.0]);
        let u = DVector::from_vec(vec![0.1, -0.3, 0.7]);
        let f = |x: &DVector<f64>| (&q * x).dot(x);
        let delta = 0.3;
        let s = gaussian_smoothed_value(f, &u, delta, 50_000, 9).unwrap();
        let exact = f(&u) + delta * delta * q.trace();
        assert!((s.mean - exact).abs() <= 3.0 * s.std_error, "{} vs {exact} ± {}", s.mean, s.std_error);
    }

    #[test]
    fn smoothing_rejects_bad_inputs() {
        let u = DVector::zeros(2);
        assert!(gaussian_smoothed_value(|_| 0.0, &u, -1.0, 10, 0).is_err());
        assert!(gaussian_smoothed_value(|_| 0.0, &u, 1.0, 1, 0).is_err());
    }

    #[test]
    fn data_roundtrip() {
        let obj = QuadraticObjective::random(3, 4).unwrap();
        assert_eq!(QuadraticObjective::from_data(&obj.to_data()).unwrap(), obj);
    }
}
