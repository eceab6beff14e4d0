//! Dense reference implementations built straight from index formulas.
#![allow(dead_code)]

use cunet_core::oracle::McscProblem;
use cunet_core::rng::SeededRng;
use cunet_core::{FilterBank, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

pub fn random_tensor(rng: &mut SeededRng, h: usize, w: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(h, w, c, |_, _, _| rng.gen_range(-1.0..1.0))
}

pub fn random_bank(rng: &mut SeededRng, k: usize, s: usize, c: usize) -> FilterBank<f64> {
    FilterBank::from_fn(k, s, c, |_, _, _, _| rng.gen_range(-0.5..0.5))
}

pub fn to_vector(t: &Tensor<f64>) -> DVector<f64> {
    DVector::from_column_slice(t.data())
}

pub fn to_tensor(v: &DVector<f64>, h: usize, w: usize, c: usize) -> Tensor<f64> {
    Tensor::new(h, w, c, v.as_slice().to_vec()).unwrap()
}

/// Matrix of `conv_same(bank, ·)` on an `h×w` grid: rows index `(i, j, k)`,
/// columns `(i', j', c)`, zero padding outside the grid.
pub fn analysis_matrix(bank: &FilterBank<f64>, h: usize, w: usize) -> DMatrix<f64> {
    let (k, s, c) = (bank.k(), bank.s(), bank.c_in());
    let a = (s - 1) / 2;
    let mut m = DMatrix::zeros(h * w * k, h * w * c);
    for i in 0..h {
        for j in 0..w {
            for kk in 0..k {
                for p in 0..s {
                    for q in 0..s {
                        let (ii, jj) = (i as isize + p as isize - a as isize, j as isize + q as isize - a as isize);
                        if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                            continue;
                        }
                        for cc in 0..c {
                            let col = (ii as usize * w + jj as usize) * c + cc;
                            m[((i * w + j) * k + kk, col)] += bank.get(kk, p, q, cc);
                        }
                    }
                }
            }
        }
    }
    m
}

/// Synthesis operator `codes → image`, the transpose of [`analysis_matrix`].
pub fn synthesis_matrix(bank: &FilterBank<f64>, h: usize, w: usize) -> DMatrix<f64> {
    analysis_matrix(bank, h, w).transpose()
}

pub fn largest_eigenvalue(gram: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(gram.clone()).eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

fn shrink(v: &DVector<f64>, t: f64) -> DVector<f64> {
    v.map(|x| x.signum() * (x.abs() - t).max(0.0))
}

pub fn lasso_objective(a: &DMatrix<f64>, x: &DVector<f64>, u: &DVector<f64>, lambda: f64) -> f64 {
    0.5 * (x - a * u).norm_squared() + lambda * u.lp_norm(1)
}

/// FISTA on `½‖x − A u‖² + λ‖u‖₁` from zero; returns the minimizer.
pub fn dense_lasso(a: &DMatrix<f64>, x: &DVector<f64>, lambda: f64, iters: usize) -> DVector<f64> {
    let gram = a.transpose() * a;
    let atx = a.transpose() * x;
    let step = 1.0 / largest_eigenvalue(&gram);
    let mut u = DVector::zeros(a.ncols());
    let mut z = u.clone();
    let mut t = 1.0f64;
    for _ in 0..iters {
        let grad = &gram * &z - &atx;
        let next = shrink(&(&z - step * grad), step * lambda);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        z = &next + ((t - 1.0) / t_next) * (&next - &u);
        u = next;
        t = t_next;
    }
    u
}

/// Joint operator `[C; U; V] ↦ [d_c C + d_u U; h_c C + h_v V]`.
pub fn mcsc_matrix(p: &McscProblem<f64>) -> DMatrix<f64> {
    let (h, w) = (p.x.height(), p.x.width());
    let dc = synthesis_matrix(&p.d_c, h, w);
    let du = synthesis_matrix(&p.d_u, h, w);
    let hc = synthesis_matrix(&p.h_c, h, w);
    let hv = synthesis_matrix(&p.h_v, h, w);
    let (r, n) = dc.shape();
    let mut m = DMatrix::zeros(2 * r, 3 * n);
    m.view_mut((0, 0), (r, n)).copy_from(&dc);
    m.view_mut((0, n), (r, n)).copy_from(&du);
    m.view_mut((r, 0), (r, n)).copy_from(&hc);
    m.view_mut((r, 2 * n), (r, n)).copy_from(&hv);
    m
}

/// Minimum of the two-image objective found by joint proximal gradient.
pub fn mcsc_reference_minimum(p: &McscProblem<f64>, iters: usize) -> f64 {
    let m = mcsc_matrix(p);
    let mut target = to_vector(&p.x).as_slice().to_vec();
    target.extend_from_slice(p.y.data());
    let target = DVector::from_vec(target);
    let u = dense_lasso(&m, &target, p.lambda, iters);
    lasso_objective(&m, &target, &u, p.lambda)
}
