//! The unrolled common/unique splitting network.
//!
//! Two unique-feature chains (for `x` and `y`), one common-feature chain on
//! the concatenated residuals, and a reconstruction head. Every chain is a
//! stack of LCSC blocks, each one learnable ISTA step:
//!
//! ```text
//! U_{j+1} = S_θj( U_j + E_j ⋆ (r − D_j ⊛ U_j) )
//! ```
//!
//! where `D ⊛ U = adjoint_conv(D, U)` is synthesis and `E ⋆ e = conv_same(E, e)`
//! is analysis. All banks are stored as `K` filters over the image channels
//! (`m` for the unique chains, `2m` for the common chain).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{adjoint_conv, conv_same, soft_threshold, FilterBank, Real, Tensor};

/// Initial value of every learnable threshold.
pub const THETA_INIT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Restoration: `z = g_c ⊛ C + g_u ⊛ U`.
    Mir,
    /// Fusion: `z = g_c ⊛ C + g_u ⊛ U + g_v ⊛ V`.
    Mif,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Mir => "mir",
            Task::Mif => "mif",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    /// Filter count `K`.
    pub k: usize,
    /// Spatial filter size `s`.
    pub s: usize,
    /// LCSC blocks per chain.
    pub blocks: usize,
    /// Image channels.
    pub m: usize,
    pub outer_passes: usize,
    /// `false` drops the `−E ⋆ D ⊛ U` feedback inside each block.
    pub residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { task: Task::Mir, k: 64, s: 8, blocks: 4, m: 1, outer_passes: 1, residual: true }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.k >= 1, "K must be at least 1");
        ensure!(self.s >= 1, "filter size must be at least 1");
        ensure!(self.m >= 1, "channel count must be at least 1");
        ensure!(self.outer_passes >= 1, "outer_passes must be at least 1");
        Ok(())
    }
}

/// One unrolled ISTA step with its own operators and thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct LcscBlock<T> {
    /// Synthesis operator, applied with `adjoint_conv`.
    pub d: FilterBank<T>,
    /// Analysis operator, applied with `conv_same`.
    pub e: FilterBank<T>,
    pub theta: Vec<T>,
}

impl<T: Real> LcscBlock<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            d: FilterBank::zeros(self.d.k(), self.d.s(), self.d.c_in()),
            e: FilterBank::zeros(self.e.k(), self.e.s(), self.e.c_in()),
            theta: vec![T::zero(); self.theta.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CuNetParams<T> {
    pub config: ModelConfig,
    pub ufem_u: Vec<LcscBlock<T>>,
    pub ufem_v: Vec<LcscBlock<T>>,
    pub cfpm: Vec<LcscBlock<T>>,
    /// Unique synthesis for `x`, forms `x̃ = x − syn_du ⊛ U`.
    pub syn_du: FilterBank<T>,
    /// Unique synthesis for `y`, forms `ỹ = y − syn_hv ⊛ V`.
    pub syn_hv: FilterBank<T>,
    /// Common synthesis for `x`, used only when `outer_passes > 1`.
    pub syn_dc: FilterBank<T>,
    /// Common synthesis for `y`, used only when `outer_passes > 1`.
    pub syn_hc: FilterBank<T>,
    pub irm_gc: FilterBank<T>,
    pub irm_gu: FilterBank<T>,
    /// Present iff the task is fusion.
    pub irm_gv: Option<FilterBank<T>>,
}

/// Borrowed view of one named parameter tensor.
#[derive(Debug)]
pub struct ParamRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
    pub is_threshold: bool,
}

#[derive(Debug)]
pub struct ParamMut<'a, T> {
    pub name: String,
    pub data: &'a mut [T],
    pub is_threshold: bool,
}

impl<T: Real> CuNetParams<T> {
    /// Every learnable tensor in a fixed order.
    pub fn tensors(&self) -> Vec<ParamRef<'_, T>> {
        fn bank<T: Real>(name: String, b: &FilterBank<T>) -> ParamRef<'_, T> {
            ParamRef { name, shape: b.shape().to_vec(), data: b.data(), is_threshold: false }
        }
        let mut out = Vec::new();
        for (chain, blocks) in self.chains() {
            for (j, blk) in blocks.iter().enumerate() {
                out.push(bank(format!("{chain}.{j}.d"), &blk.d));
                out.push(bank(format!("{chain}.{j}.e"), &blk.e));
                out.push(ParamRef {
                    name: format!("{chain}.{j}.theta"),
                    shape: vec![blk.theta.len()],
                    data: &blk.theta,
                    is_threshold: true,
                });
            }
        }
        for (name, b) in self.banks() {
            out.push(bank(name.to_string(), b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        for (chain, blocks) in [("ufem_u", &mut self.ufem_u), ("ufem_v", &mut self.ufem_v), ("cfpm", &mut self.cfpm)] {
            for (j, blk) in blocks.iter_mut().enumerate() {
                out.push(ParamMut { name: format!("{chain}.{j}.d"), data: blk.d.data_mut(), is_threshold: false });
                out.push(ParamMut { name: format!("{chain}.{j}.e"), data: blk.e.data_mut(), is_threshold: false });
                out.push(ParamMut { name: format!("{chain}.{j}.theta"), data: &mut blk.theta, is_threshold: true });
            }
        }
        let mut banks: Vec<(&str, &mut FilterBank<T>)> = vec![
            ("syn_du", &mut self.syn_du),
            ("syn_hv", &mut self.syn_hv),
            ("syn_dc", &mut self.syn_dc),
            ("syn_hc", &mut self.syn_hc),
            ("irm_gc", &mut self.irm_gc),
            ("irm_gu", &mut self.irm_gu),
        ];
        if let Some(gv) = self.irm_gv.as_mut() {
            banks.push(("irm_gv", gv));
        }
        for (name, b) in banks {
            out.push(ParamMut { name: name.to_string(), data: b.data_mut(), is_threshold: false });
        }
        out
    }

    fn chains(&self) -> [(&'static str, &Vec<LcscBlock<T>>); 3] {
        [("ufem_u", &self.ufem_u), ("ufem_v", &self.ufem_v), ("cfpm", &self.cfpm)]
    }

    fn banks(&self) -> Vec<(&'static str, &FilterBank<T>)> {
        let mut v = vec![
            ("syn_du", &self.syn_du),
            ("syn_hv", &self.syn_hv),
            ("syn_dc", &self.syn_dc),
            ("syn_hc", &self.syn_hc),
            ("irm_gc", &self.irm_gc),
            ("irm_gu", &self.irm_gu),
        ];
        if let Some(gv) = &self.irm_gv {
            v.push(("irm_gv", gv));
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Same structure, all values zero.
    pub fn zeros_like(&self) -> Self {
        let zb = |b: &FilterBank<T>| FilterBank::zeros(b.k(), b.s(), b.c_in());
        Self {
            config: self.config,
            ufem_u: self.ufem_u.iter().map(LcscBlock::zeros_like).collect(),
            ufem_v: self.ufem_v.iter().map(LcscBlock::zeros_like).collect(),
            cfpm: self.cfpm.iter().map(LcscBlock::zeros_like).collect(),
            syn_du: zb(&self.syn_du),
            syn_hv: zb(&self.syn_hv),
            syn_dc: zb(&self.syn_dc),
            syn_hc: zb(&self.syn_hc),
            irm_gc: zb(&self.irm_gc),
            irm_gu: zb(&self.irm_gu),
            irm_gv: self.irm_gv.as_ref().map(zb),
        }
    }

    pub fn cast<U: Real>(&self) -> CuNetParams<U> {
        let cb = |b: &LcscBlock<T>| LcscBlock {
            d: b.d.cast(),
            e: b.e.cast(),
            theta: b.theta.iter().map(|v| U::lit(v.as_f64())).collect(),
        };
        CuNetParams {
            config: self.config,
            ufem_u: self.ufem_u.iter().map(cb).collect(),
            ufem_v: self.ufem_v.iter().map(cb).collect(),
            cfpm: self.cfpm.iter().map(cb).collect(),
            syn_du: self.syn_du.cast(),
            syn_hv: self.syn_hv.cast(),
            syn_dc: self.syn_dc.cast(),
            syn_hc: self.syn_hc.cast(),
            irm_gc: self.irm_gc.cast(),
            irm_gu: self.irm_gu.cast(),
            irm_gv: self.irm_gv.as_ref().map(|b| b.cast()),
        }
    }

    /// Checks every bank and threshold against `config`.
    pub fn validate(&self) -> Result<()> {
        let cfg = self.config;
        cfg.validate()?;
        let (k, s, m) = (cfg.k, cfg.s, cfg.m);
        let check = |name: &str, b: &FilterBank<T>, c: usize| -> Result<()> {
            ensure!(b.shape() == [k, s, s, c], "{name} has shape {:?}, expected {:?}", b.shape(), [k, s, s, c]);
            Ok(())
        };
        for (chain, blocks) in self.chains() {
            ensure!(blocks.len() == cfg.blocks, "{chain} has {} blocks, expected {}", blocks.len(), cfg.blocks);
            let c = if chain == "cfpm" { 2 * m } else { m };
            for (j, blk) in blocks.iter().enumerate() {
                check(&format!("{chain}.{j}.d"), &blk.d, c)?;
                check(&format!("{chain}.{j}.e"), &blk.e, c)?;
                ensure!(blk.theta.len() == k, "{chain}.{j}.theta has {} entries", blk.theta.len());
            }
        }
        for (name, b) in self.banks() {
            check(name, b, m)?;
        }
        ensure!(self.irm_gv.is_some() == (cfg.task == Task::Mif), "irm_gv must be present exactly for the fusion task");
        Ok(())
    }
}

/// Uniform `[-b, b]` filters with `b = 1/sqrt(s·s·fan_in)`, thresholds at
/// [`THETA_INIT`]. `fan_in` is the channel count a bank consumes: image
/// channels for synthesis-side `D` banks, `K` for analysis `E` banks and the
/// reconstruction banks.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<CuNetParams<T>> {
    cfg.validate()?;
    let mut rng = SeededRng::new(seed);
    let (k, s, m) = (cfg.k, cfg.s, cfg.m);
    let mut bank = |c: usize, fan_in: usize| -> FilterBank<T> {
        let b = 1.0 / ((s * s * fan_in) as f64).sqrt();
        FilterBank::from_fn(k, s, c, |_, _, _, _| T::lit(rng.gen_range(-b..=b)))
    };
    let chain = |c: usize, bank: &mut dyn FnMut(usize, usize) -> FilterBank<T>| -> Vec<LcscBlock<T>> {
        (0..cfg.blocks)
            .map(|_| LcscBlock { d: bank(c, c), e: bank(c, k), theta: vec![T::lit(THETA_INIT); k] })
            .collect()
    };
    let ufem_u = chain(m, &mut bank);
    let ufem_v = chain(m, &mut bank);
    let cfpm = chain(2 * m, &mut bank);
    let params = CuNetParams {
        config: *cfg,
        ufem_u,
        ufem_v,
        cfpm,
        syn_du: bank(m, m),
        syn_hv: bank(m, m),
        syn_dc: bank(m, m),
        syn_hc: bank(m, m),
        irm_gc: bank(m, k),
        irm_gu: bank(m, k),
        irm_gv: (cfg.task == Task::Mif).then(|| bank(m, k)),
    };
    Ok(params)
}

/// Analytic ISTA weights: `D = bank`, `E = bank / L`, `θ = λ / L`.
pub fn tie_to_ista<T: Real>(bank: &FilterBank<T>, lipschitz: T, lambda: T, blocks: usize) -> Result<Vec<LcscBlock<T>>> {
    ensure!(lipschitz > T::zero(), "Lipschitz constant must be positive");
    ensure!(lambda >= T::zero(), "lambda must be nonnegative");
    let e = bank.scale(T::one() / lipschitz);
    let theta = vec![lambda / lipschitz; bank.k()];
    Ok((0..blocks).map(|_| LcscBlock { d: bank.clone(), e: e.clone(), theta: theta.clone() }).collect())
}

/// Everything one chain computed, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ChainTrace<T> {
    /// Residual image the chain encodes (`x̂`, `ŷ` or `p`).
    pub input: Tensor<T>,
    /// `U_0 .. U_J`; `U_0` is zero.
    pub iterates: Vec<Tensor<T>>,
    /// `a_j`, the argument of the soft threshold in block `j`.
    pub pre_activations: Vec<Tensor<T>>,
    /// `r − D_j ⊛ U_j` (or `r` itself in non-residual mode).
    pub errors: Vec<Tensor<T>>,
}

impl<T: Real> ChainTrace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.iterates.last().expect("U_0 always present")
    }
}

/// Runs a stack of LCSC blocks on `input` starting from zero codes.
pub fn lcsc_forward<T: Real>(
    input: &Tensor<T>,
    blocks: &[LcscBlock<T>],
    k: usize,
    residual: bool,
    stage: &str,
) -> Result<ChainTrace<T>> {
    let (h, w, c) = input.shape();
    let mut iterates = vec![Tensor::zeros(h, w, k)];
    let mut pre_activations = Vec::with_capacity(blocks.len());
    let mut errors = Vec::with_capacity(blocks.len());
    for (j, blk) in blocks.iter().enumerate() {
        ensure!(
            blk.d.k() == k && blk.e.k() == k && blk.d.c_in() == c && blk.e.c_in() == c,
            "{stage} block {j}: banks {:?}/{:?} do not fit {c}-channel input with K={k}",
            blk.d.shape(),
            blk.e.shape()
        );
        let u = &iterates[j];
        let err = if residual && j > 0 { input.sub(&adjoint_conv(&blk.d, u)?)? } else { input.clone() };
        let mut pre = u.clone();
        pre.add_assign(&conv_same(&blk.e, &err)?)?;
        if !pre.is_finite() {
            return Err(Error::ForwardDivergence { stage: format!("{stage} block {j}") });
        }
        let next = soft_threshold(&pre, &blk.theta)?;
        pre_activations.push(pre);
        errors.push(err);
        iterates.push(next);
    }
    Ok(ChainTrace { input: input.clone(), iterates, pre_activations, errors })
}

/// Unique-feature chain (serves both the `u` and the `v` branch).
pub fn ufem_forward<T: Real>(
    residual_image: &Tensor<T>,
    blocks: &[LcscBlock<T>],
    k: usize,
    residual_mode: bool,
) -> Result<ChainTrace<T>> {
    lcsc_forward(residual_image, blocks, k, residual_mode, "ufem")
}

/// Common-feature chain on `p = concat(x̃, ỹ)`.
pub fn cfpm_forward<T: Real>(
    x_tilde: &Tensor<T>,
    y_tilde: &Tensor<T>,
    blocks: &[LcscBlock<T>],
    k: usize,
    residual_mode: bool,
) -> Result<ChainTrace<T>> {
    ensure!(x_tilde.shape() == y_tilde.shape(), "x̃ and ỹ differ in shape");
    let p = Tensor::concat_channels(x_tilde, y_tilde)?;
    lcsc_forward(&p, blocks, k, residual_mode, "cfpm")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction<T> {
    /// Common part `g_c ⊛ C`.
    pub point1: Tensor<T>,
    /// Unique part of `x`, `g_u ⊛ U`.
    pub point2: Tensor<T>,
    /// Unique part of `y`, `g_v ⊛ V` (fusion only).
    pub point3: Option<Tensor<T>>,
    /// `point1 + point2 (+ point3)`.
    pub z: Tensor<T>,
}

pub fn irm_reconstruct<T: Real>(
    c: &Tensor<T>,
    u: &Tensor<T>,
    v: Option<&Tensor<T>>,
    params: &CuNetParams<T>,
) -> Result<Reconstruction<T>> {
    let k = params.config.k;
    ensure!(c.channels() == k && u.channels() == k, "code channel counts must equal K={k}");
    let point1 = adjoint_conv(&params.irm_gc, c)?;
    let point2 = adjoint_conv(&params.irm_gu, u)?;
    let mut z = point1.add(&point2)?;
    let point3 = match (params.config.task, v) {
        (Task::Mir, None) => None,
        (Task::Mir, Some(_)) => return Err(Error::Contract("V codes supplied for a restoration task".into())),
        (Task::Mif, None) => return Err(Error::Contract("fusion task requires V codes".into())),
        (Task::Mif, Some(v)) => {
            ensure!(v.channels() == k, "V has {} channels, expected {k}", v.channels());
            let gv = params.irm_gv.as_ref().ok_or_else(|| Error::Contract("missing irm_gv".into()))?;
            let p3 = adjoint_conv(gv, v)?;
            z.add_assign(&p3)?;
            Some(p3)
        }
    };
    Ok(Reconstruction { point1, point2, point3, z })
}

/// One pass through the unique and common chains.
#[derive(Debug, Clone)]
pub struct PassTrace<T> {
    pub u: ChainTrace<T>,
    pub v: ChainTrace<T>,
    /// Input is `concat(x̃, ỹ)`.
    pub c: ChainTrace<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub task: Task,
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    pub passes: Vec<PassTrace<T>>,
    pub recon: Reconstruction<T>,
}

impl<T: Real> ForwardTrace<T> {
    fn last_pass(&self) -> Result<&PassTrace<T>> {
        self.passes.last().ok_or_else(|| Error::Contract("trace has no passes".into()))
    }

    pub fn codes_c(&self) -> Result<&Tensor<T>> {
        Ok(self.last_pass()?.c.output())
    }

    pub fn codes_u(&self) -> Result<&Tensor<T>> {
        Ok(self.last_pass()?.u.output())
    }

    pub fn codes_v(&self) -> Result<&Tensor<T>> {
        Ok(self.last_pass()?.v.output())
    }
}

pub fn cunet_forward<T: Real>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    params: &CuNetParams<T>,
) -> Result<(Tensor<T>, ForwardTrace<T>)> {
    let cfg = params.config;
    ensure!(x.shape() == y.shape(), "x {:?} and y {:?} differ in shape", x.shape(), y.shape());
    ensure!(x.channels() == cfg.m, "inputs have {} channels, model expects {}", x.channels(), cfg.m);
    let k = cfg.k;
    let mut passes: Vec<PassTrace<T>> = Vec::with_capacity(cfg.outer_passes);
    for pass in 0..cfg.outer_passes {
        let (x_hat, y_hat) = match passes.last() {
            None => (x.clone(), y.clone()),
            Some(prev) => {
                let c = prev.c.output();
                (x.sub(&adjoint_conv(&params.syn_dc, c)?)?, y.sub(&adjoint_conv(&params.syn_hc, c)?)?)
            }
        };
        let stage = |name: &str| format!("pass {pass} {name}");
        let u = lcsc_forward(&x_hat, &params.ufem_u, k, cfg.residual, &stage("ufem_u"))?;
        let v = lcsc_forward(&y_hat, &params.ufem_v, k, cfg.residual, &stage("ufem_v"))?;
        let x_tilde = x.sub(&adjoint_conv(&params.syn_du, u.output())?)?;
        let y_tilde = y.sub(&adjoint_conv(&params.syn_hv, v.output())?)?;
        let p = Tensor::concat_channels(&x_tilde, &y_tilde)?;
        let c = lcsc_forward(&p, &params.cfpm, k, cfg.residual, &stage("cfpm"))?;
        passes.push(PassTrace { u, v, c });
    }
    let last = passes.last().expect("outer_passes >= 1");
    let v = (cfg.task == Task::Mif).then(|| last.v.output());
    let recon = irm_reconstruct(last.c.output(), last.u.output(), v, params)?;
    if !recon.z.is_finite() {
        return Err(Error::ForwardDivergence { stage: "irm".into() });
    }
    let z = recon.z.clone();
    Ok((z, ForwardTrace { task: cfg.task, x: x.clone(), y: y.clone(), passes, recon }))
}

/// Images exported for visual inspection of the split.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition<T> {
    pub common: Tensor<T>,
    pub unique_x: Tensor<T>,
    pub unique_y: Option<Tensor<T>>,
    pub final_image: Tensor<T>,
}

impl<T: Real> Decomposition<T> {
    /// `(name, image)` pairs in export order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v = vec![("point1_common", &self.common), ("point2_unique_x", &self.unique_x)];
        if let Some(uy) = &self.unique_y {
            v.push(("point3_unique_y", uy));
        }
        v.push(("point4_final", &self.final_image));
        v
    }

    /// Sum of the component images, in the same order the network adds them.
    pub fn component_sum(&self) -> Result<Tensor<T>> {
        let mut z = self.common.add(&self.unique_x)?;
        if let Some(uy) = &self.unique_y {
            z.add_assign(uy)?;
        }
        Ok(z)
    }
}

pub fn decompose<T: Real>(trace: &ForwardTrace<T>) -> Result<Decomposition<T>> {
    trace.last_pass()?;
    let r = &trace.recon;
    ensure!(r.point3.is_some() == (trace.task == Task::Mif), "trace is incomplete for task {}", trace.task);
    Ok(Decomposition {
        common: r.point1.clone(),
        unique_x: r.point2.clone(),
        unique_y: r.point3.clone(),
        final_image: r.z.clone(),
    })
}
