//! Classical (non-learned) convolutional sparse coding solvers.
//!
//! [`ista_csc`] solves the single-dictionary problem
//! `min_U ½‖x − Σ_k d_k * u_k‖² + λ Σ_k ‖u_k‖₁` and
//! [`mcsc_alternating_solve`] solves the two-image common/unique model by
//! block-coordinate descent over `U`, `V` and `C`. Both serve as ground truth
//! for the unrolled network.
//!
//! Synthesis is `adjoint_conv(bank, U)` and the gradient of the data term is
//! `conv_same(bank, adjoint_conv(bank, U) − x)`, see [`crate::tensor`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{adjoint_conv, conv_same, soft_threshold, FilterBank, Real, Tensor};

/// Lower floor returned for an all-zero dictionary.
const LIPSCHITZ_FLOOR: f64 = 1e-12;
const LIPSCHITZ_SAFETY: f64 = 1.01;

#[derive(Debug, Clone)]
pub struct CscProblem<T> {
    pub x: Tensor<T>,
    pub bank: FilterBank<T>,
    pub lambda: T,
}

impl<T: Real> CscProblem<T> {
    pub fn new(x: Tensor<T>, bank: FilterBank<T>, lambda: T) -> Result<Self> {
        ensure!(lambda >= T::zero(), "lambda must be nonnegative");
        ensure!(
            x.channels() == bank.c_in(),
            "signal has {} channels, dictionary atoms have {}",
            x.channels(),
            bank.c_in()
        );
        Ok(Self { x, bank, lambda })
    }
}

/// Two-image model: `x ≈ d_c*C + d_u*U`, `y ≈ h_c*C + h_v*V`.
#[derive(Debug, Clone)]
pub struct McscProblem<T> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    pub d_c: FilterBank<T>,
    pub d_u: FilterBank<T>,
    pub h_c: FilterBank<T>,
    pub h_v: FilterBank<T>,
    pub lambda: T,
}

impl<T: Real> McscProblem<T> {
    pub fn new(
        x: Tensor<T>,
        y: Tensor<T>,
        d_c: FilterBank<T>,
        d_u: FilterBank<T>,
        h_c: FilterBank<T>,
        h_v: FilterBank<T>,
        lambda: T,
    ) -> Result<Self> {
        ensure!(lambda >= T::zero(), "lambda must be nonnegative");
        ensure!(x.shape() == y.shape(), "x and y differ in shape");
        for b in [&d_u, &h_c, &h_v] {
            ensure!(
                b.k() == d_c.k() && b.s() == d_c.s() && b.c_in() == d_c.c_in(),
                "all four dictionaries must share K, s and channel count"
            );
        }
        ensure!(x.channels() == d_c.c_in(), "image channels do not match dictionaries");
        Ok(Self { x, y, d_c, d_u, h_c, h_v, lambda })
    }

    /// Stacked common dictionary acting on `concat(x, y)`.
    pub fn common_bank(&self) -> FilterBank<T> {
        FilterBank::concat_channels(&self.d_c, &self.h_c).expect("validated in new")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepSize {
    /// `1 / L` with `L` from [`lipschitz_upper_bound`].
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub inner_iters: usize,
    pub outer_iters: usize,
    pub step_size: StepSize,
    /// Stop once `|f_prev − f| ≤ tolerance · |f_prev|`; zero disables early stopping.
    pub tolerance: f64,
    pub power_iters: usize,
    pub power_seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            inner_iters: 50,
            outer_iters: 10,
            step_size: StepSize::Auto,
            tolerance: 1e-8,
            power_iters: 100,
            power_seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.inner_iters >= 1, "inner_iters must be at least 1");
        ensure!(self.power_iters >= 1, "power_iters must be at least 1");
        ensure!(self.tolerance >= 0.0, "tolerance must be nonnegative");
        if let StepSize::Fixed(step) = self.step_size {
            ensure!(step > 0.0 && step.is_finite(), "step size must be positive");
        }
        Ok(())
    }

    fn step_for<T: Real>(&self, bank: &FilterBank<T>, height: usize, width: usize) -> T {
        match self.step_size {
            StepSize::Fixed(step) => T::lit(step),
            StepSize::Auto => T::one() / lipschitz_upper_bound(bank, height, width, self.power_iters, self.power_seed),
        }
    }
}

/// Largest eigenvalue of the Gram operator `U ↦ conv_same(bank, adjoint_conv(bank, U))`
/// on an `height×width` domain, estimated by power iteration and inflated by 1%.
pub fn lipschitz_upper_bound<T: Real>(bank: &FilterBank<T>, height: usize, width: usize, iters: usize, seed: u64) -> T {
    let floor = T::lit(LIPSCHITZ_FLOOR);
    if bank.k() == 0 || height == 0 || width == 0 {
        return floor;
    }
    let mut rng = SeededRng::new(seed);
    let mut v = Tensor::from_fn(height, width, bank.k(), |_, _, _| T::lit(rng.gen_range(-1.0..1.0)));
    let mut estimate = T::zero();
    for _ in 0..iters.max(1) {
        let norm = v.sq_l2_norm().sqrt();
        if norm <= T::zero() {
            return floor;
        }
        v = v.scale(T::one() / norm);
        let gv = gram(bank, &v);
        estimate = v.dot(&gv).expect("same shape");
        v = gv;
    }
    (estimate * T::lit(LIPSCHITZ_SAFETY)).max(floor)
}

fn gram<T: Real>(bank: &FilterBank<T>, u: &Tensor<T>) -> Tensor<T> {
    let synth = adjoint_conv(bank, u).expect("channel count fixed by construction");
    conv_same(bank, &synth).expect("channel count fixed by construction")
}

/// `½‖x − adjoint_conv(bank, U)‖² + λ‖U‖₁`.
pub fn csc_objective<T: Real>(p: &CscProblem<T>, codes: &Tensor<T>) -> Result<T> {
    ensure!(
        codes.channels() == p.bank.k(),
        "codes have {} channels, dictionary has {} atoms",
        codes.channels(),
        p.bank.k()
    );
    let resid = p.x.sub(&adjoint_conv(&p.bank, codes)?)?;
    Ok(T::lit(0.5) * resid.sq_l2_norm() + p.lambda * codes.l1_norm())
}

#[derive(Debug, Clone)]
pub struct IstaOutput<T> {
    pub codes: Tensor<T>,
    /// Objective after each iteration.
    pub objective_trace: Vec<T>,
}

/// ISTA from `U₀ = 0`.
pub fn ista_csc<T: Real>(p: &CscProblem<T>, cfg: &SolverConfig) -> Result<IstaOutput<T>> {
    cfg.validate()?;
    let step = cfg.step_for(&p.bank, p.x.height(), p.x.width());
    let init = Tensor::zeros(p.x.height(), p.x.width(), p.bank.k());
    ista_from(p, init, step, cfg.inner_iters, cfg.tolerance, |_, _| {})
}

/// ISTA from an explicit starting point with a fixed step, reporting every
/// iterate to `on_iter(j, U_j)` (`j` counts from 1).
pub fn ista_from<T: Real>(
    p: &CscProblem<T>,
    init: Tensor<T>,
    step: T,
    iters: usize,
    tolerance: f64,
    mut on_iter: impl FnMut(usize, &Tensor<T>),
) -> Result<IstaOutput<T>> {
    ensure!(step > T::zero(), "step must be positive");
    ensure!(init.shape() == (p.x.height(), p.x.width(), p.bank.k()), "initial codes have shape {:?}", init.shape());
    let threshold = vec![p.lambda * step; p.bank.k()];
    let mut codes = init;
    let mut prev = csc_objective(p, &codes)?;
    let mut trace = Vec::with_capacity(iters);
    for it in 1..=iters {
        let err = p.x.sub(&adjoint_conv(&p.bank, &codes)?)?;
        let mut pre = codes;
        pre.axpy(step, &conv_same(&p.bank, &err)?)?;
        codes = soft_threshold(&pre, &threshold)?;
        let obj = csc_objective(p, &codes)?;
        if !obj.is_finite() {
            return Err(Error::Divergence { iteration: it });
        }
        trace.push(obj);
        on_iter(it, &codes);
        let change = (prev - obj).abs();
        prev = obj;
        if tolerance > 0.0 && change.as_f64() <= tolerance * obj.abs().as_f64().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(IstaOutput { codes, objective_trace: trace })
}

/// Full two-image objective.
pub fn mcsc_objective<T: Real>(p: &McscProblem<T>, c: &Tensor<T>, u: &Tensor<T>, v: &Tensor<T>) -> Result<T> {
    let k = p.d_c.k();
    for (name, t) in [("C", c), ("U", u), ("V", v)] {
        ensure!(t.channels() == k, "{name} has {} channels, expected {k}", t.channels());
    }
    let mut rx = p.x.sub(&adjoint_conv(&p.d_c, c)?)?;
    rx.sub_assign(&adjoint_conv(&p.d_u, u)?)?;
    let mut ry = p.y.sub(&adjoint_conv(&p.h_c, c)?)?;
    ry.sub_assign(&adjoint_conv(&p.h_v, v)?)?;
    let half = T::lit(0.5);
    Ok(half * rx.sq_l2_norm() + half * ry.sq_l2_norm() + p.lambda * (c.l1_norm() + u.l1_norm() + v.l1_norm()))
}

#[derive(Debug, Clone)]
pub struct McscSolution<T> {
    pub c: Tensor<T>,
    pub u: Tensor<T>,
    pub v: Tensor<T>,
    /// Objective after every step (three entries per outer cycle).
    pub objective_trace: Vec<T>,
}

/// Step sizes for the three sub-problems (`U`, `V`, `C`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McscSteps<T> {
    pub u: T,
    pub v: T,
    pub c: T,
}

impl<T: Real> McscSteps<T> {
    pub fn resolve(p: &McscProblem<T>, cfg: &SolverConfig) -> Self {
        let (h, w) = (p.x.height(), p.x.width());
        Self { u: cfg.step_for(&p.d_u, h, w), v: cfg.step_for(&p.h_v, h, w), c: cfg.step_for(&p.common_bank(), h, w) }
    }
}

/// Block-coordinate descent: update `U`, then `V`, then `C` (each by warm-started
/// ISTA on its own sub-problem), repeated `outer_iters` times.
pub fn mcsc_alternating_solve<T: Real>(p: &McscProblem<T>, cfg: &SolverConfig) -> Result<McscSolution<T>> {
    cfg.validate()?;
    let steps = McscSteps::resolve(p, cfg);
    let (h, w) = (p.x.height(), p.x.width());
    let k = p.d_c.k();
    let m = p.x.channels();
    let common = p.common_bank();
    let mut c = Tensor::zeros(h, w, k);
    let mut u = Tensor::zeros(h, w, k);
    let mut v = Tensor::zeros(h, w, k);
    let mut trace = Vec::with_capacity(3 * cfg.outer_iters);
    let mut prev = mcsc_objective(p, &c, &u, &v)?;

    for _ in 0..cfg.outer_iters {
        // Step 1: x̂ = x − d_c * C
        let x_hat = p.x.sub(&adjoint_conv(&p.d_c, &c)?)?;
        let sub = CscProblem { x: x_hat, bank: p.d_u.clone(), lambda: p.lambda };
        u = ista_from(&sub, u, steps.u, cfg.inner_iters, cfg.tolerance, |_, _| {})?.codes;
        trace.push(mcsc_objective(p, &c, &u, &v)?);

        // Step 2: ŷ = y − h_c * C
        let y_hat = p.y.sub(&adjoint_conv(&p.h_c, &c)?)?;
        let sub = CscProblem { x: y_hat, bank: p.h_v.clone(), lambda: p.lambda };
        v = ista_from(&sub, v, steps.v, cfg.inner_iters, cfg.tolerance, |_, _| {})?.codes;
        trace.push(mcsc_objective(p, &c, &u, &v)?);

        // Step 3: common codes on concat(x̃, ỹ)
        let x_tilde = p.x.sub(&adjoint_conv(&p.d_u, &u)?)?;
        let y_tilde = p.y.sub(&adjoint_conv(&p.h_v, &v)?)?;
        let stacked = Tensor::concat_channels(&x_tilde, &y_tilde)?;
        debug_assert_eq!(stacked.channels(), 2 * m);
        let sub = CscProblem { x: stacked, bank: common.clone(), lambda: p.lambda };
        c = ista_from(&sub, c, steps.c, cfg.inner_iters, cfg.tolerance, |_, _| {})?.codes;
        let obj = mcsc_objective(p, &c, &u, &v)?;
        if !obj.is_finite() {
            return Err(Error::Divergence { iteration: trace.len() + 1 });
        }
        trace.push(obj);

        let change = (prev - obj).abs();
        prev = obj;
        if cfg.tolerance > 0.0 && change.as_f64() <= cfg.tolerance * obj.abs().as_f64().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(McscSolution { c, u, v, objective_trace: trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(rng: &mut SeededRng, h: usize, w: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(h, w, c, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    fn random_bank(rng: &mut SeededRng, k: usize, s: usize, c: usize) -> FilterBank<f64> {
        FilterBank::from_fn(k, s, c, |_, _, _, _| rng.gen_range(-0.5..0.5))
    }

    fn fixed(iters: usize) -> SolverConfig {
        SolverConfig { inner_iters: iters, tolerance: 0.0, ..SolverConfig::default() }
    }

    #[test]
    fn lipschitz_of_identity() {
        let l = lipschitz_upper_bound(&FilterBank::<f64>::delta(1, 3, 1), 8, 8, 50, 0);
        assert!((l - 1.01).abs() < 1e-3);
    }

    #[test]
    fn lipschitz_scales_quadratically() {
        let mut rng = SeededRng::new(4);
        let bank = random_bank(&mut rng, 2, 3, 1);
        let l1 = lipschitz_upper_bound(&bank, 8, 8, 200, 1);
        let l2 = lipschitz_upper_bound(&bank.scale(2.0), 8, 8, 200, 1);
        assert!((l2 / l1 - 4.0).abs() < 0.04);
    }

    #[test]
    fn lipschitz_of_zero_bank_is_floor() {
        let l = lipschitz_upper_bound(&FilterBank::<f64>::zeros(2, 3, 1), 4, 4, 10, 0);
        assert_eq!(l, 1e-12);
    }

    #[test]
    fn csc_objective_basics() {
        let mut rng = SeededRng::new(1);
        let x = random_tensor(&mut rng, 5, 5, 1);
        let bank = random_bank(&mut rng, 2, 3, 1);
        let p = CscProblem::new(x.clone(), bank, 0.3).unwrap();
        let zero = Tensor::zeros(5, 5, 2);
        assert!((csc_objective(&p, &zero).unwrap() - 0.5 * x.sq_l2_norm()).abs() < 1e-14);

        let p0 = CscProblem::new(Tensor::zeros(5, 5, 1), random_bank(&mut rng, 2, 3, 1), 0.3).unwrap();
        assert_eq!(csc_objective(&p0, &zero).unwrap(), 0.0);

        let pd = CscProblem::new(x.clone(), FilterBank::delta(1, 3, 1), 0.0).unwrap();
        assert_eq!(csc_objective(&pd, &x).unwrap(), 0.0);
        assert!(csc_objective(&pd, &zero).is_err());
    }

    #[test]
    fn ista_zero_signal_is_fixed_point() {
        let mut rng = SeededRng::new(2);
        let p = CscProblem::new(Tensor::zeros(6, 6, 1), random_bank(&mut rng, 2, 3, 1), 0.1).unwrap();
        let out = ista_csc(&p, &fixed(25)).unwrap();
        assert_eq!(out.codes.count_nonzero(), 0);
    }

    #[test]
    fn ista_identity_dictionary_one_step_is_exact() {
        let mut rng = SeededRng::new(3);
        let x = random_tensor(&mut rng, 6, 6, 1);
        let lambda = 0.4;
        let p = CscProblem::new(x.clone(), FilterBank::delta(1, 3, 1), lambda).unwrap();
        let cfg = SolverConfig { step_size: StepSize::Fixed(1.0), ..fixed(1) };
        let out = ista_csc(&p, &cfg).unwrap();
        assert_eq!(out.codes, soft_threshold(&x, &[lambda]).unwrap());
    }

    #[test]
    fn ista_large_lambda_keeps_zero() {
        let mut rng = SeededRng::new(5);
        let x = random_tensor(&mut rng, 6, 6, 1);
        let bank = random_bank(&mut rng, 2, 3, 1);
        let lambda = conv_same(&bank, &x).unwrap().max_abs();
        let p = CscProblem::new(x, bank, lambda).unwrap();
        let out = ista_csc(&p, &fixed(30)).unwrap();
        assert_eq!(out.codes.count_nonzero(), 0);
    }

    #[test]
    fn ista_is_monotone() {
        let mut rng = SeededRng::new(6);
        let p = CscProblem::new(random_tensor(&mut rng, 8, 8, 1), random_bank(&mut rng, 2, 3, 1), 0.1).unwrap();
        let out = ista_csc(&p, &fixed(200)).unwrap();
        for w in out.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].abs());
        }
    }

    #[test]
    fn ista_support_shrinks_with_lambda() {
        let mut rng = SeededRng::new(8);
        let x = random_tensor(&mut rng, 8, 8, 1);
        let bank = random_bank(&mut rng, 2, 3, 1);
        let counts: Vec<usize> = [0.02, 0.05, 0.1, 0.2, 0.4]
            .iter()
            .map(|&lambda| {
                let p = CscProblem::new(x.clone(), bank.clone(), lambda).unwrap();
                ista_csc(&p, &SolverConfig { inner_iters: 3000, tolerance: 1e-14, ..fixed(1) })
                    .unwrap()
                    .codes
                    .count_nonzero()
            })
            .collect();
        for w in counts.windows(2) {
            assert!(w[1] <= w[0], "support counts {counts:?}");
        }
    }

    #[test]
    fn ista_rejects_bad_config() {
        let mut rng = SeededRng::new(9);
        let p = CscProblem::new(random_tensor(&mut rng, 4, 4, 1), random_bank(&mut rng, 1, 3, 1), 0.1).unwrap();
        let mut cfg = fixed(0);
        assert!(ista_csc(&p, &cfg).is_err());
        cfg = SolverConfig { step_size: StepSize::Fixed(-1.0), ..fixed(3) };
        assert!(ista_csc(&p, &cfg).is_err());
        assert!(CscProblem::new(Tensor::<f64>::zeros(4, 4, 1), FilterBank::zeros(1, 3, 1), -0.1).is_err());
    }

    #[test]
    fn ista_reports_divergence() {
        let mut rng = SeededRng::new(10);
        let p = CscProblem::new(random_tensor(&mut rng, 6, 6, 1), random_bank(&mut rng, 2, 3, 1), 0.0).unwrap();
        let cfg = SolverConfig { step_size: StepSize::Fixed(1e150), ..fixed(50) };
        match ista_csc(&p, &cfg) {
            Err(Error::Divergence { iteration }) => assert!(iteration >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    fn random_mcsc(seed: u64, lambda: f64) -> McscProblem<f64> {
        let mut rng = SeededRng::new(seed);
        let x = random_tensor(&mut rng, 8, 8, 1);
        let y = random_tensor(&mut rng, 8, 8, 1);
        let banks: Vec<_> = (0..4).map(|_| random_bank(&mut rng, 2, 3, 1)).collect();
        McscProblem::new(x, y, banks[0].clone(), banks[1].clone(), banks[2].clone(), banks[3].clone(), lambda).unwrap()
    }

    #[test]
    fn mcsc_objective_of_zero_codes() {
        let p = random_mcsc(11, 0.1);
        let z = Tensor::zeros(8, 8, 2);
        let expected = 0.5 * p.x.sq_l2_norm() + 0.5 * p.y.sq_l2_norm();
        assert!((mcsc_objective(&p, &z, &z, &z).unwrap() - expected).abs() < 1e-13);
        assert!(mcsc_objective(&p, &Tensor::zeros(8, 8, 1), &z, &z).is_err());
    }

    #[test]
    fn mcsc_zero_inputs_give_zero_codes() {
        let mut p = random_mcsc(12, 0.1);
        p.x = Tensor::zeros(8, 8, 1);
        p.y = Tensor::zeros(8, 8, 1);
        let sol = mcsc_alternating_solve(&p, &SolverConfig { outer_iters: 3, ..fixed(10) }).unwrap();
        assert_eq!(sol.c.count_nonzero() + sol.u.count_nonzero() + sol.v.count_nonzero(), 0);
    }

    #[test]
    fn mcsc_huge_lambda_keeps_all_codes_zero() {
        let p = random_mcsc(13, 1e6);
        let sol = mcsc_alternating_solve(&p, &SolverConfig { outer_iters: 2, ..fixed(10) }).unwrap();
        assert_eq!(sol.c.count_nonzero() + sol.u.count_nonzero() + sol.v.count_nonzero(), 0);
        let expected = 0.5 * p.x.sq_l2_norm() + 0.5 * p.y.sq_l2_norm();
        assert!((sol.objective_trace.last().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn mcsc_trace_is_monotone_across_steps() {
        let p = random_mcsc(14, 0.1);
        let sol = mcsc_alternating_solve(&p, &SolverConfig { outer_iters: 5, ..fixed(20) }).unwrap();
        assert_eq!(sol.objective_trace.len(), 15);
        for w in sol.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].abs());
        }
    }
}
