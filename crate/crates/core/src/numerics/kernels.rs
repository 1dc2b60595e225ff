//! Slice-level compute kernels shared by [`Tensor`](super::Tensor) and the autodiff graph.
//!
//! Every output element is accumulated in a fixed order that depends only on
//! its own row, never on how many rows are processed together or how work is
//! split across threads. KV-cache equivalence relies on this: a row computed
//! inside a full sequence and the same row computed alone are bit-identical.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

/// Additive surrogate for minus infinity used by masked softmax.
pub const NEG_MASK: f64 = -1e30;

const ROWS_PER_TASK: usize = 16;

/// `out[m,n] = a[m,k] · b[k,n]`.
pub fn matmul_into<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 {
        return;
    }
    let exec = par::kernel_exec(m * k * n);
    par::for_each_chunk_mut(exec, out, ROWS_PER_TASK * n, |chunk_idx, block| {
        let row0 = chunk_idx * ROWS_PER_TASK;
        for (r, crow) in block.chunks_mut(n).enumerate() {
            let arow = &a[(row0 + r) * k..(row0 + r + 1) * k];
            crow.iter_mut().for_each(|c| *c = F::zero());
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n..(p + 1) * n];
                for (c, &bv) in crow.iter_mut().zip(brow) {
                    *c = *c + av * bv;
                }
            }
        }
    });
}

pub fn transpose<F: Scalar>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// `a[m,k] · b[k,n]` on 2-D tensors.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![F::zero(); m * n];
    matmul_into(a.data(), b.data(), m, k, n, &mut out);
    Tensor::new(vec![m, n], out)
}

/// Masked softmax of one row in place. Masked entries get the additive
/// [`NEG_MASK`] surrogate and come out as exact zeros.
pub fn softmax_row_masked<F: Scalar>(row: &mut [F], allowed: &[bool]) -> bool {
    let neg = F::of(NEG_MASK);
    let mut any = false;
    let mut max = F::neg_infinity();
    for (z, &ok) in row.iter_mut().zip(allowed) {
        if !ok {
            *z = *z + neg;
        } else {
            any = true;
        }
        max = max.max(*z);
    }
    if !any {
        return false;
    }
    let mut sum = F::zero();
    for z in row.iter_mut() {
        *z = (*z - max).exp();
        sum = sum + *z;
    }
    for z in row.iter_mut() {
        *z = *z / sum;
    }
    true
}

/// Softmax over the last axis restricted to `mask`-allowed positions.
pub fn softmax_masked<F: Scalar>(logits: &Tensor<F>, mask: &[bool]) -> Result<Tensor<F>> {
    if mask.len() != logits.len() {
        return Err(Error::shape("softmax_masked", logits.shape(), &[mask.len()]));
    }
    let n = logits.cols();
    let mut out = logits.clone();
    for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
        if !softmax_row_masked(row, &mask[r * n..(r + 1) * n]) {
            return Err(Error::FullyMaskedRow { row: r });
        }
    }
    Ok(out)
}

/// Per-row standardization; returns `(normalized, inv_std per row)`.
pub fn normalize_rows<F: Scalar>(x: &[F], cols: usize, eps: F) -> (Vec<F>, Vec<F>) {
    let rows = x.len() / cols.max(1);
    let mut out = vec![F::zero(); x.len()];
    let mut inv = vec![F::zero(); rows];
    let n = F::of(cols as f64);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().copied().sum::<F>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let is = F::one() / (var + eps).sqrt();
        inv[r] = is;
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    (out, inv)
}

/// Layer normalization over the last axis followed by `gain`/`bias`.
pub fn layer_norm<F: Scalar>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
    eps: F,
) -> Result<Tensor<F>> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let (mut y, _) = normalize_rows(x.data(), d, eps);
    for row in y.chunks_mut(d) {
        for ((v, &g), &b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = *v * g + b;
        }
    }
    Tensor::new(x.shape().to_vec(), y)
}

/// Geometry of one multi-head attention call.
#[derive(Debug, Clone, Copy)]
pub struct AttnDims {
    pub nq: usize,
    pub nk: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnDims {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// One past the last allowed key of every query row.
pub fn row_limits(mask: &[bool], nq: usize, nk: usize) -> Result<Vec<usize>> {
    (0..nq)
        .map(|i| {
            let row = &mask[i * nk..(i + 1) * nk];
            row.iter()
                .rposition(|&ok| ok)
                .map(|p| p + 1)
                .ok_or(Error::FullyMaskedRow { row: i })
        })
        .collect()
}

fn head_slice<F: Scalar>(x: &[F], rows: usize, width: usize, h: usize, hd: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(rows * hd);
    for r in 0..rows {
        out.extend_from_slice(&x[r * width + h * hd..r * width + (h + 1) * hd]);
    }
    out
}

/// Masked scaled dot-product attention. Returns the `[nq, width]` output and
/// the `[heads, nq, nk]` probabilities kept for the backward pass.
pub fn attention_forward<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    mask: &[bool],
    dims: AttnDims,
    exec: Execution,
) -> Result<(Vec<F>, Vec<F>)> {
    let AttnDims {
        nq,
        nk,
        heads,
        head_dim: hd,
    } = dims;
    let width = dims.width();
    let limits = row_limits(mask, nq, nk)?;
    let scale = F::one() / F::of(hd as f64).sqrt();
    let per_head = par::map_indices(exec, heads, |h| {
        let qh = head_slice(q, nq, width, h, hd);
        let kt = transpose(&head_slice(k, nk, width, h, hd), nk, hd);
        let vh = head_slice(v, nk, width, h, hd);
        let mut probs = vec![F::zero(); nq * nk];
        let mut out = vec![F::zero(); nq * hd];
        for i in 0..nq {
            let lim = limits[i];
            let prow = &mut probs[i * nk..i * nk + lim];
            for (p, &qv) in qh[i * hd..(i + 1) * hd].iter().enumerate() {
                let krow = &kt[p * nk..p * nk + lim];
                for (z, &kv) in prow.iter_mut().zip(krow) {
                    *z = *z + qv * kv;
                }
            }
            prow.iter_mut().for_each(|z| *z = *z * scale);
            softmax_row_masked(prow, &mask[i * nk..i * nk + lim]);
            let orow = &mut out[i * hd..(i + 1) * hd];
            for (j, &pj) in prow.iter().enumerate() {
                for (o, &vv) in orow.iter_mut().zip(&vh[j * hd..(j + 1) * hd]) {
                    *o = *o + pj * vv;
                }
            }
        }
        (out, probs)
    });
    let mut out = vec![F::zero(); nq * width];
    let mut probs = Vec::with_capacity(heads * nq * nk);
    for (h, (oh, ph)) in per_head.into_iter().enumerate() {
        for i in 0..nq {
            out[i * width + h * hd..i * width + (h + 1) * hd]
                .copy_from_slice(&oh[i * hd..(i + 1) * hd]);
        }
        probs.extend(ph);
    }
    Ok((out, probs))
}

/// Gradients of [`attention_forward`] with respect to `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    mask: &[bool],
    dout: &[F],
    dims: AttnDims,
    exec: Execution,
) -> Result<(Vec<F>, Vec<F>, Vec<F>)> {
    let AttnDims {
        nq,
        nk,
        heads,
        head_dim: hd,
    } = dims;
    let width = dims.width();
    let limits = row_limits(mask, nq, nk)?;
    let scale = F::one() / F::of(hd as f64).sqrt();
    let per_head = par::map_indices(exec, heads, |h| {
        let qh = head_slice(q, nq, width, h, hd);
        let kh = head_slice(k, nk, width, h, hd);
        let vh = head_slice(v, nk, width, h, hd);
        let doh = head_slice(dout, nq, width, h, hd);
        let ph = &probs[h * nq * nk..(h + 1) * nq * nk];
        let mut dq = vec![F::zero(); nq * hd];
        let mut dk = vec![F::zero(); nk * hd];
        let mut dv = vec![F::zero(); nk * hd];
        let mut ds = vec![F::zero(); nk];
        for i in 0..nq {
            let lim = limits[i];
            let prow = &ph[i * nk..i * nk + lim];
            let dorow = &doh[i * hd..(i + 1) * hd];
            let mut rowdot = F::zero();
            for j in 0..lim {
                let dp = dot(dorow, &vh[j * hd..(j + 1) * hd]);
                ds[j] = dp;
                rowdot = rowdot + prow[j] * dp;
            }
            let qrow = &qh[i * hd..(i + 1) * hd];
            for j in 0..lim {
                let pj = prow[j];
                if pj == F::zero() {
                    continue;
                }
                let s = pj * (ds[j] - rowdot) * scale;
                let dqrow = &mut dq[i * hd..(i + 1) * hd];
                axpy(dqrow, s, &kh[j * hd..(j + 1) * hd]);
                axpy(&mut dk[j * hd..(j + 1) * hd], s, qrow);
                axpy(&mut dv[j * hd..(j + 1) * hd], pj, dorow);
            }
        }
        (dq, dk, dv)
    });
    let mut dq = vec![F::zero(); nq * width];
    let mut dk = vec![F::zero(); nk * width];
    let mut dv = vec![F::zero(); nk * width];
    for (h, (gq, gk, gv)) in per_head.into_iter().enumerate() {
        for i in 0..nq {
            dq[i * width + h * hd..i * width + (h + 1) * hd]
                .copy_from_slice(&gq[i * hd..(i + 1) * hd]);
        }
        for j in 0..nk {
            dk[j * width + h * hd..j * width + (h + 1) * hd]
                .copy_from_slice(&gk[j * hd..(j + 1) * hd]);
            dv[j * width + h * hd..j * width + (h + 1) * hd]
                .copy_from_slice(&gv[j * hd..(j + 1) * hd]);
        }
    }
    Ok((dq, dk, dv))
}

#[inline]
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |s, (&x, &y)| s + x * y)
}

#[inline]
fn axpy<F: Scalar>(y: &mut [F], a: F, x: &[F]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + a * xv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_cases() {
        let i2 = Tensor::<f64>::identity(2);
        assert_eq!(matmul(&i2, &i2).unwrap(), i2);
        let a = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&a, &i2).unwrap(), a);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        for (x, y) in c.data().iter().zip(triple_loop(&a, &b)) {
            assert!((x - y).abs() <= 1e-12);
        }
        // large enough to take the chunked path
        let a = Tensor::<f64>::randn(&[70, 40], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[40, 33], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        for (x, y) in c.data().iter().zip(triple_loop(&a, &b)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_rows_independent_of_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f32>::randn(&[50, 64], 1.0, &mut rng);
        let w = Tensor::<f32>::randn(&[64, 48], 1.0, &mut rng);
        let full = matmul(&a, &w).unwrap();
        for r in [0, 17, 49] {
            let one = matmul(&a.slice_rows(r, r + 1).unwrap(), &w).unwrap();
            assert_eq!(one.data(), full.row(r));
        }
    }

    #[test]
    fn softmax_examples() {
        let l = Tensor::<f64>::new(vec![2], vec![0.0, 0.0]).unwrap();
        let p = softmax_masked(&l, &[true, true]).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let l = Tensor::<f64>::new(vec![2], vec![5.0, 100.0]).unwrap();
        let p = softmax_masked(&l, &[true, false]).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);
        assert!(matches!(
            softmax_masked(&l, &[false, false]),
            Err(Error::FullyMaskedRow { row: 0 })
        ));
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l = Tensor::<f64>::randn(&[1, 9], 3.0, &mut rng);
        let mask: Vec<bool> = (0..9).map(|i| i % 3 != 1).collect();
        let p = softmax_masked(&l, &mask).unwrap();
        let exps: Vec<f64> = l
            .data()
            .iter()
            .zip(&mask)
            .map(|(&z, &ok)| if ok { z.exp() } else { 0.0 })
            .collect();
        let s: f64 = exps.iter().sum();
        for (a, e) in p.data().iter().zip(&exps) {
            assert!((a - e / s).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::<f64>::full(&[3], 1.0);
        let zeros = Tensor::<f64>::zeros(&[3]);
        let c = Tensor::<f64>::full(&[1, 3], 4.2);
        let y = layer_norm(&c, &ones, &zeros, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-9));

        let ones2 = Tensor::<f64>::full(&[2], 1.0);
        let zeros2 = Tensor::<f64>::zeros(&[2]);
        let x = Tensor::<f64>::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let y = layer_norm(&x, &ones2, &zeros2, 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-9 && (y.data()[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_matches_mean_var_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[1, 16], 2.0, &mut rng);
        let g = Tensor::<f64>::randn(&[16], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[16], 1.0, &mut rng);
        let eps = 1e-6;
        let y = layer_norm(&x, &g, &b, eps).unwrap();
        let n = 16.0;
        let mean: f64 = x.data().iter().sum::<f64>() / n;
        let var: f64 = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        for i in 0..16 {
            let want = (x.data()[i] - mean) / (var + eps).sqrt() * g.data()[i] + b.data()[i];
            assert!((y.data()[i] - want).abs() <= 1e-10);
        }
    }

    #[test]
    fn attention_rows_match_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dims = AttnDims {
            nq: 5,
            nk: 5,
            heads: 2,
            head_dim: 3,
        };
        let q = Tensor::<f64>::randn(&[5, 6], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[5, 6], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[5, 6], 1.0, &mut rng);
        let mask: Vec<bool> = (0..25).map(|i| i % 5 <= i / 5).collect();
        let (out, _) =
            attention_forward(q.data(), k.data(), v.data(), &mask, dims, Execution::Sequential)
                .unwrap();
        for h in 0..2 {
            for i in 0..5 {
                let logits: Vec<f64> = (0..5)
                    .map(|j| {
                        (0..3)
                            .map(|p| q.data()[i * 6 + h * 3 + p] * k.data()[j * 6 + h * 3 + p])
                            .sum::<f64>()
                            / 3f64.sqrt()
                    })
                    .collect();
                let w: Vec<f64> = (0..5)
                    .map(|j| if j <= i { logits[j].exp() } else { 0.0 })
                    .collect();
                let s: f64 = w.iter().sum();
                for p in 0..3 {
                    let want: f64 = (0..5).map(|j| w[j] / s * v.data()[j * 6 + h * 3 + p]).sum();
                    assert!((out[i * 6 + h * 3 + p] - want).abs() < 1e-12);
                }
            }
        }
    }
}
