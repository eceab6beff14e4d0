//! Self-checks shared by the test suite and the `oracle-check` command:
//! unrolled chains against classical ISTA, and analytic gradients against
//! central finite differences.

use rand::Rng;
use serde::Serialize;

use crate::error::{ensure, Result};
use crate::model::{cunet_forward, init_params, lcsc_forward, tie_to_ista, ChainTrace, CuNetParams, ModelConfig, Task};
use crate::oracle::{
    ista_from, lipschitz_upper_bound, mcsc_alternating_solve, CscProblem, McscProblem, SolverConfig, StepSize,
};
use crate::rng::SeededRng;
use crate::tensor::{FilterBank, Tensor};
use crate::train::{cunet_backward, mse_loss};

fn random_tensor(rng: &mut SeededRng, h: usize, w: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(h, w, c, |_, _, _| rng.gen_range(-1.0..1.0))
}

fn random_bank(rng: &mut SeededRng, k: usize, s: usize, c: usize) -> FilterBank<f64> {
    FilterBank::from_fn(k, s, c, |_, _, _, _| rng.gen_range(-0.5..0.5))
}

/// ISTA iterates `U_0 .. U_iters` from zero with step `1/L`.
fn ista_iterates(p: &CscProblem<f64>, lipschitz: f64, iters: usize) -> Result<Vec<Tensor<f64>>> {
    let zero = Tensor::zeros(p.x.height(), p.x.width(), p.bank.k());
    let mut out = vec![zero.clone()];
    ista_from(p, zero, 1.0 / lipschitz, iters, 0.0, |_, u| out.push(u.clone()))?;
    Ok(out)
}

fn max_iterate_gap(trace: &ChainTrace<f64>, reference: &[Tensor<f64>]) -> Result<f64> {
    ensure!(trace.iterates.len() == reference.len(), "iterate counts differ");
    let mut gap = 0.0f64;
    for (a, b) in trace.iterates.iter().zip(reference) {
        gap = gap.max(a.max_abs_diff(b)?);
    }
    Ok(gap)
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub blocks: usize,
    pub ufem_gap: f64,
    pub cfpm_gap: f64,
    /// Network codes after one pass against one alternating-solver cycle.
    pub network_gap: f64,
}

impl EquivalenceReport {
    pub fn max_gap(&self) -> f64 {
        self.ufem_gap.max(self.cfpm_gap).max(self.network_gap)
    }
}

/// Ties every chain to ISTA on a random `m`-channel problem and measures the
/// largest deviation from the classical iterates.
pub fn unrolled_equivalence(
    blocks: usize,
    k: usize,
    s: usize,
    m: usize,
    size: usize,
    seed: u64,
) -> Result<EquivalenceReport> {
    let mut rng = SeededRng::new(seed);
    let lambda = 0.05;
    let power = 200;
    let x = random_tensor(&mut rng, size, size, m);
    let y = random_tensor(&mut rng, size, size, m);
    let d_c = random_bank(&mut rng, k, s, m);
    let d_u = random_bank(&mut rng, k, s, m);
    let h_c = random_bank(&mut rng, k, s, m);
    let h_v = random_bank(&mut rng, k, s, m);

    let l_u = lipschitz_upper_bound(&d_u, size, size, power, seed);
    let ufem_blocks = tie_to_ista(&d_u, l_u, lambda, blocks)?;
    let ufem = lcsc_forward(&x, &ufem_blocks, k, true, "ufem")?;
    let reference = ista_iterates(&CscProblem::new(x.clone(), d_u.clone(), lambda)?, l_u, blocks)?;
    let ufem_gap = max_iterate_gap(&ufem, &reference)?;

    let common = FilterBank::concat_channels(&d_c, &h_c)?;
    let l_c = lipschitz_upper_bound(&common, size, size, power, seed);
    let stacked = Tensor::concat_channels(&x, &y)?;
    let cfpm = lcsc_forward(&stacked, &tie_to_ista(&common, l_c, lambda, blocks)?, k, true, "cfpm")?;
    let reference = ista_iterates(&CscProblem::new(stacked, common.clone(), lambda)?, l_c, blocks)?;
    let cfpm_gap = max_iterate_gap(&cfpm, &reference)?;

    let problem = McscProblem::new(x.clone(), y.clone(), d_c.clone(), d_u.clone(), h_c.clone(), h_v.clone(), lambda)?;
    let l_v = lipschitz_upper_bound(&h_v, size, size, power, seed);
    let solver = SolverConfig {
        inner_iters: blocks,
        outer_iters: 1,
        step_size: StepSize::Auto,
        tolerance: 0.0,
        power_iters: power,
        power_seed: seed,
    };
    let solved = mcsc_alternating_solve(&problem, &solver)?;
    let cfg = ModelConfig { task: Task::Mif, k, s, blocks, m, outer_passes: 1, residual: true };
    let mut params: CuNetParams<f64> = init_params(&cfg, seed)?;
    params.ufem_u = ufem_blocks;
    params.ufem_v = tie_to_ista(&h_v, l_v, lambda, blocks)?;
    params.cfpm = tie_to_ista(&common, l_c, lambda, blocks)?;
    params.syn_du = d_u;
    params.syn_hv = h_v;
    params.syn_dc = d_c;
    params.syn_hc = h_c;
    let (_, trace) = cunet_forward(&x, &y, &params)?;
    let network_gap = trace
        .codes_u()?
        .max_abs_diff(&solved.u)?
        .max(trace.codes_v()?.max_abs_diff(&solved.v)?)
        .max(trace.codes_c()?.max_abs_diff(&solved.c)?);
    Ok(EquivalenceReport { blocks, ufem_gap, cfpm_gap, network_gap })
}

/// Smallest distance between any pre-activation magnitude and its threshold.
pub fn kink_margin(params: &CuNetParams<f64>, x: &Tensor<f64>, y: &Tensor<f64>) -> Result<f64> {
    let (_, trace) = cunet_forward(x, y, params)?;
    let mut margin = f64::INFINITY;
    for pass in &trace.passes {
        for (chain, blocks) in [(&pass.u, &params.ufem_u), (&pass.v, &params.ufem_v), (&pass.c, &params.cfpm)] {
            for (pre, blk) in chain.pre_activations.iter().zip(blocks) {
                let k = pre.channels();
                for (idx, a) in pre.data().iter().enumerate() {
                    margin = margin.min((a.abs() - blk.theta[idx % k]).abs());
                }
            }
        }
    }
    Ok(margin)
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupCheck {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub task: Task,
    pub outer_passes: usize,
    pub seed: u64,
    pub kink_margin: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().fold(0.0, |m, g| m.max(g.rel_error))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub k: usize,
    pub s: usize,
    pub blocks: usize,
    pub size: usize,
    pub outer_passes: usize,
    pub eps: f64,
    pub kink_margin: f64,
    /// Seeds tried before giving up on finding a point away from every kink.
    pub max_attempts: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { k: 2, s: 3, blocks: 2, size: 8, outer_passes: 1, eps: 1e-6, kink_margin: 1e-3, max_attempts: 200 }
    }
}

fn loss_at(params: &CuNetParams<f64>, x: &Tensor<f64>, y: &Tensor<f64>, target: &Tensor<f64>) -> Result<f64> {
    let (z, _) = cunet_forward(x, y, params)?;
    Ok(mse_loss(&z, target)?.0)
}

/// Inputs span `[-10, 10]` so pre-activations are spread widely relative to
/// the kink margin.
const INPUT_SCALE: f64 = 10.0;

/// Directional derivative of the MSE loss along a random direction per
/// parameter tensor, analytic against central differences. Thresholds are
/// drawn so that both live and dead units occur, and seeds are advanced until
/// every pre-activation is at least `kink_margin` away from its kink (the
/// perturbed points `p ± eps·d` must keep half that margin).
pub fn gradient_check(task: Task, cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    let model = ModelConfig {
        task,
        k: cfg.k,
        s: cfg.s,
        blocks: cfg.blocks,
        m: 1,
        outer_passes: cfg.outer_passes,
        residual: true,
    };
    for attempt in 0..cfg.max_attempts {
        let trial = seed.wrapping_add(attempt);
        let mut rng = SeededRng::new(trial);
        let mut params: CuNetParams<f64> = init_params(&model, trial)?;
        for t in params.tensors_mut() {
            if t.is_threshold {
                for v in t.data.iter_mut() {
                    *v = rng.gen_range(0.2..1.5);
                }
            }
        }
        let n = cfg.size;
        let x = random_tensor(&mut rng, n, n, 1).scale(INPUT_SCALE);
        let y = random_tensor(&mut rng, n, n, 1).scale(INPUT_SCALE);
        let target = random_tensor(&mut rng, n, n, 1);
        let margin = kink_margin(&params, &x, &y)?;
        if margin < cfg.kink_margin {
            continue;
        }
        let (z, trace) = cunet_forward(&x, &y, &params)?;
        let (_, dz) = mse_loss(&z, &target)?;
        let grads = cunet_backward(&trace, &params, &dz)?;
        let names: Vec<String> = params.tensors().into_iter().map(|t| t.name).collect();
        let mut groups = Vec::with_capacity(names.len());
        let mut crossed = false;
        for (gi, name) in names.iter().enumerate() {
            let len = params.tensors()[gi].data.len();
            let dir: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let analytic: f64 = grads.0.tensors()[gi].data.iter().zip(&dir).map(|(g, d)| g * d).sum();
            let shifted = |sign: f64| -> CuNetParams<f64> {
                let mut p = params.clone();
                for (v, d) in p.tensors_mut()[gi].data.iter_mut().zip(&dir) {
                    *v += sign * cfg.eps * d;
                }
                p
            };
            let plus = shifted(1.0);
            let minus = shifted(-1.0);
            if kink_margin(&plus, &x, &y)? < 0.5 * cfg.kink_margin
                || kink_margin(&minus, &x, &y)? < 0.5 * cfg.kink_margin
            {
                crossed = true;
                break;
            }
            let numeric = (loss_at(&plus, &x, &y, &target)? - loss_at(&minus, &x, &y, &target)?) / (2.0 * cfg.eps);
            let rel_error = (analytic - numeric).abs() / numeric.abs().max(1e-8);
            groups.push(GroupCheck { name: name.clone(), analytic, numeric, rel_error });
        }
        if crossed {
            continue;
        }
        return Ok(GradCheckReport { task, outer_passes: cfg.outer_passes, seed: trial, kink_margin: margin, groups });
    }
    Err(crate::Error::Contract(format!(
        "no seed in {seed}..{} keeps every pre-activation {} away from its threshold",
        seed.wrapping_add(cfg.max_attempts),
        cfg.kink_margin
    )))
}
