//! Reverse-mode gradients through a [`ForwardTrace`], Adam, and the training
//! loop.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SamplePair;
use crate::error::{ensure, Error, Result};
use crate::metrics::psnr;
use crate::model::{cunet_forward, ChainTrace, CuNetParams, LcscBlock, Task};
use crate::rng::SeededRng;
use crate::tensor::{adjoint_conv, conv_same, filter_grad, FilterBank, Real, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Mean squared error and its gradient `2(z − target)/N`.
pub fn mse_loss<T: Real>(z: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    ensure!(z.shape() == target.shape(), "loss inputs differ in shape: {:?} vs {:?}", z.shape(), target.shape());
    ensure!(!z.is_empty(), "loss inputs are empty");
    let diff = z.sub(target)?;
    let n = T::lit(z.len() as f64);
    let loss = diff.sq_l2_norm() / n;
    Ok((loss, diff.scale(T::lit(2.0) / n)))
}

/// Gradients with the exact layout of [`CuNetParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T>(pub CuNetParams<T>);

impl<T: Real> Gradients<T> {
    pub fn zeros_for(params: &CuNetParams<T>) -> Self {
        Self(params.zeros_like())
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (dst, src) in self.0.tensors_mut().into_iter().zip(other.0.tensors()) {
            for (d, &s) in dst.data.iter_mut().zip(src.data) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, a: T) {
        for t in self.0.tensors_mut() {
            for v in t.data.iter_mut() {
                *v *= a;
            }
        }
    }

    /// Name of the first tensor holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<String> {
        self.0.tensors().into_iter().find(|t| t.data.iter().any(|v| !v.is_finite())).map(|t| t.name)
    }

    pub fn dot(&self, other: &Self) -> T {
        self.0
            .tensors()
            .iter()
            .zip(other.0.tensors())
            .map(|(a, b)| a.data.iter().zip(b.data).map(|(&x, &y)| x * y).sum::<T>())
            .sum()
    }
}

fn accumulate<T: Real>(dst: &mut FilterBank<T>, src: &FilterBank<T>) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

/// Backward through one LCSC chain. `g_out` is the gradient on the final
/// codes; block gradients are added into `grads`. Returns the gradient on the
/// chain input.
pub fn chain_backward<T: Real>(
    trace: &ChainTrace<T>,
    blocks: &[LcscBlock<T>],
    grads: &mut [LcscBlock<T>],
    residual: bool,
    g_out: Tensor<T>,
) -> Result<Tensor<T>> {
    let depth = blocks.len();
    ensure!(
        trace.pre_activations.len() == depth && grads.len() == depth,
        "chain trace has {} blocks, parameters {depth}",
        trace.pre_activations.len()
    );
    ensure!(g_out.same_shape(trace.output()), "output gradient does not match chain codes");
    let mut g_input = trace.input.zeros_like();
    let mut g = g_out;
    for j in (0..depth).rev() {
        let blk = &blocks[j];
        let gb = &mut grads[j];
        let pre = &trace.pre_activations[j];
        let k = pre.channels();
        let mut ga = g;
        for (idx, (gv, &a)) in ga.data_mut().iter_mut().zip(pre.data()).enumerate() {
            let ch = idx % k;
            if a.abs() > blk.theta[ch] {
                gb.theta[ch] -= a.signum() * *gv;
            } else {
                *gv = T::zero();
            }
        }
        let err = &trace.errors[j];
        accumulate(&mut gb.e, &filter_grad(err, &ga, blk.e.s())?);
        let g_err = adjoint_conv(&blk.e, &ga)?;
        g_input.add_assign(&g_err)?;
        let mut g_prev = ga;
        if residual && j > 0 {
            let neg = g_err.scale(-T::one());
            accumulate(&mut gb.d, &filter_grad(&neg, &trace.iterates[j], blk.d.s())?);
            g_prev.add_assign(&conv_same(&blk.d, &neg)?)?;
        }
        g = g_prev;
    }
    Ok(g_input)
}

/// Exact gradients of `⟨dl_dz, z⟩` with respect to every parameter.
pub fn cunet_backward<T: Real>(
    trace: &crate::model::ForwardTrace<T>,
    params: &CuNetParams<T>,
    dl_dz: &Tensor<T>,
) -> Result<Gradients<T>> {
    let cfg = params.config;
    ensure!(trace.task == cfg.task, "trace task {} does not match parameters {}", trace.task, cfg.task);
    ensure!(
        trace.passes.len() == cfg.outer_passes,
        "trace has {} passes, parameters expect {}",
        trace.passes.len(),
        cfg.outer_passes
    );
    ensure!(dl_dz.same_shape(&trace.recon.z), "output gradient shape {:?} does not match z", dl_dz.shape());
    let mut grads = Gradients::zeros_for(params);
    let gr = &mut grads.0;
    let last = trace.passes.last().expect("checked above");
    let (c_last, u_last, v_last) = (last.c.output(), last.u.output(), last.v.output());
    let s = cfg.s;

    accumulate(&mut gr.irm_gc, &filter_grad(dl_dz, c_last, s)?);
    accumulate(&mut gr.irm_gu, &filter_grad(dl_dz, u_last, s)?);
    let mut g_c = conv_same(&params.irm_gc, dl_dz)?;
    let mut g_u = conv_same(&params.irm_gu, dl_dz)?;
    let mut g_v = v_last.zeros_like();
    if cfg.task == Task::Mif {
        let gv = params.irm_gv.as_ref().ok_or_else(|| Error::Contract("missing irm_gv".into()))?;
        accumulate(gr.irm_gv.as_mut().expect("congruent with params"), &filter_grad(dl_dz, v_last, s)?);
        g_v = conv_same(gv, dl_dz)?;
    }

    for p in (0..trace.passes.len()).rev() {
        let pass = &trace.passes[p];
        let g_p = chain_backward(&pass.c, &params.cfpm, &mut gr.cfpm, cfg.residual, g_c)?;
        let (g_xt, g_yt) = g_p.split_channels(cfg.m)?;
        let neg_xt = g_xt.scale(-T::one());
        let neg_yt = g_yt.scale(-T::one());
        accumulate(&mut gr.syn_du, &filter_grad(&neg_xt, pass.u.output(), s)?);
        accumulate(&mut gr.syn_hv, &filter_grad(&neg_yt, pass.v.output(), s)?);
        g_u.add_assign(&conv_same(&params.syn_du, &neg_xt)?)?;
        g_v.add_assign(&conv_same(&params.syn_hv, &neg_yt)?)?;
        let g_xh = chain_backward(&pass.u, &params.ufem_u, &mut gr.ufem_u, cfg.residual, g_u)?;
        let g_yh = chain_backward(&pass.v, &params.ufem_v, &mut gr.ufem_v, cfg.residual, g_v)?;
        if p == 0 {
            break;
        }
        let c_prev = trace.passes[p - 1].c.output();
        let neg_xh = g_xh.scale(-T::one());
        let neg_yh = g_yh.scale(-T::one());
        accumulate(&mut gr.syn_dc, &filter_grad(&neg_xh, c_prev, s)?);
        accumulate(&mut gr.syn_hc, &filter_grad(&neg_yh, c_prev, s)?);
        g_c = conv_same(&params.syn_dc, &neg_xh)?;
        g_c.add_assign(&conv_same(&params.syn_hc, &neg_yh)?)?;
        let prev = &trace.passes[p - 1];
        g_u = prev.u.output().zeros_like();
        g_v = prev.v.output().zeros_like();
    }
    Ok(grads)
}

/// Bias-corrected Adam moments, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &CuNetParams<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.tensors().iter().map(|t| vec![T::zero(); t.data.len()]).collect();
        Self { t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn cast<U: Real>(&self) -> AdamState<U> {
        let c = |b: &Vec<Vec<T>>| b.iter().map(|x| x.iter().map(|v| U::lit(v.as_f64())).collect()).collect();
        AdamState { t: self.t, m: c(&self.m), v: c(&self.v) }
    }
}

/// One Adam update. Thresholds are clamped to be nonnegative afterwards.
pub fn adam_step<T: Real>(
    params: &mut CuNetParams<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    let gts = grads.0.tensors();
    let shapes_match = {
        let pts = params.tensors();
        pts.len() == gts.len()
            && pts.len() == state.m.len()
            && pts
                .iter()
                .zip(&gts)
                .zip(&state.m)
                .all(|((p, g), m)| p.data.len() == g.data.len() && p.data.len() == m.len())
    };
    ensure!(shapes_match, "gradients or optimizer state are not congruent with the parameters");
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::Training(format!("non-finite gradient in {name}")));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (ADAM_BETA1, ADAM_BETA2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(&gts).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.data.len() {
            let gi = g.data[i].as_f64();
            let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
            let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
            m[i] = T::lit(mi);
            v[i] = T::lit(vi);
            let mut next = p.data[i].as_f64() - lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
            if p.is_threshold {
                next = next.max(0.0);
            }
            p.data[i] = T::lit(next);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub patch: usize,
    pub stride: usize,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            decay: 0.9,
            decay_every: 50,
            batch_size: 64,
            epochs: 200,
            patch: 64,
            stride: 64,
            loss: LossKind::Mse,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr0 > 0.0 && self.lr0.is_finite(), "lr0 must be positive");
        ensure!(self.decay > 0.0 && self.decay.is_finite(), "decay must be positive");
        ensure!(self.decay_every >= 1, "decay_every must be at least 1");
        ensure!(self.batch_size >= 1, "batch_size must be at least 1");
        ensure!(self.patch >= 1 && self.stride >= 1, "patch and stride must be at least 1");
        Ok(())
    }
}

/// `lr0 · decay^floor(epoch / decay_every)`, rounded to 15 significant digits.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let raw = cfg.lr0 * cfg.decay.powi((epoch / cfg.decay_every) as i32);
    format!("{raw:.14e}").parse().unwrap_or(raw)
}

/// Mean loss over `batch` and the matching averaged gradients.
pub fn batch_gradients<T: Real>(params: &CuNetParams<T>, batch: &[&SamplePair<T>]) -> Result<(f64, Gradients<T>)> {
    ensure!(!batch.is_empty(), "empty batch");
    let per_sample: Vec<Result<(f64, Gradients<T>)>> = batch
        .par_iter()
        .map(|s| {
            let (z, trace) = cunet_forward(&s.x, &s.y, params)?;
            let (loss, dz) = mse_loss(&z, &s.z)?;
            Ok((loss.as_f64(), cunet_backward(&trace, params, &dz)?))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = Gradients::zeros_for(params);
    for r in per_sample {
        let (l, g) = r?;
        total += l;
        grads.add_assign(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(T::lit(inv));
    Ok((total * inv, grads))
}

/// Mean PSNR of the model's predictions.
pub fn evaluate_psnr<T: Real>(params: &CuNetParams<T>, samples: &[SamplePair<T>]) -> Result<f64> {
    ensure!(!samples.is_empty(), "no samples to evaluate");
    let scores: Vec<Result<f64>> = samples
        .par_iter()
        .map(|s| {
            let (z, _) = cunet_forward(&s.x, &s.y, params)?;
            psnr(&z, &s.z)
        })
        .collect();
    let mut sum = 0.0;
    for s in scores {
        sum += s?;
    }
    Ok(sum / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_psnr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub params: CuNetParams<T>,
    pub adam: AdamState<T>,
    /// Epochs completed so far.
    pub epoch: usize,
    pub log: Vec<EpochLog>,
}

impl<T: Real> TrainState<T> {
    pub fn new(params: CuNetParams<T>) -> Self {
        let adam = AdamState::new(&params);
        Self { params, adam, epoch: 0, log: Vec::new() }
    }
}

/// Runs epochs `state.epoch .. cfg.epochs`. `on_epoch` sees the state after
/// every epoch, so a checkpoint written there survives a later divergence.
pub fn train<T: Real>(
    cfg: &TrainConfig,
    train_set: &[SamplePair<T>],
    val_set: &[SamplePair<T>],
    mut state: TrainState<T>,
    mut on_epoch: impl FnMut(&TrainState<T>) -> Result<()>,
) -> Result<TrainState<T>> {
    cfg.validate()?;
    state.params.validate()?;
    ensure!(!train_set.is_empty() || cfg.epochs <= state.epoch, "training set is empty");
    let task = state.params.config.task;
    for s in train_set.iter().chain(val_set) {
        ensure!(s.kind.task() == task, "sample kind {} does not fit a {task} model", s.kind);
    }
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut SeededRng::derived(cfg.seed, epoch as u64));
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&SamplePair<T>> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_gradients(&state.params, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("loss is {loss} at epoch {epoch}, batch {b}")));
            }
            adam_step(&mut state.params, &grads, &mut state.adam, lr)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let val_psnr = if val_set.is_empty() { None } else { Some(evaluate_psnr(&state.params, val_set)?) };
        state.log.push(EpochLog { epoch, lr, train_loss: loss_sum / train_set.len() as f64, val_psnr });
        state.epoch += 1;
        on_epoch(&state)?;
    }
    Ok(state)
}
