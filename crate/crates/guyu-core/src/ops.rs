//! Numeric kernels shared by the taped (training) and untaped (inference)
//! execution paths. Every kernel reduces along fixed index order, so results
//! are bitwise reproducible including under the row-parallel matmuls.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Below this many multiply-adds a matmul stays single-threaded.
const PAR_THRESHOLD: usize = 1 << 15;

fn split_matrix_shape(shape: &[usize]) -> Result<(Vec<usize>, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Shape(format!(
            "matmul operand has rank {}",
            shape.len()
        )));
    }
    let (batch, mat) = shape.split_at(shape.len() - 2);
    Ok((batch.to_vec(), mat[0], mat[1]))
}

fn check_batch(ab: &[usize], bb: &[usize]) -> Result<bool> {
    if bb.is_empty() {
        Ok(true) // rhs broadcast over lhs batch axes
    } else if ab == bb {
        Ok(false)
    } else {
        Err(Error::Shape(format!(
            "batch axes {:?} vs {:?} are not broadcast-compatible",
            ab, bb
        )))
    }
}

/// C[.., M, N] = A[.., M, K] x B[.., K, N]; B may omit the batch axes.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ab, m, k) = split_matrix_shape(a.shape())?;
    let (bb, bk, n) = split_matrix_shape(b.shape())?;
    if k != bk {
        return Err(Error::Shape(format!(
            "inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let broadcast = check_batch(&ab, &bb)?;
    let nbatch: usize = ab.iter().product();
    let mut out_shape = ab;
    out_shape.push(m);
    out_shape.push(n);
    let mut out = vec![T::zero(); nbatch * m * n];

    let run_row = |batch: usize, i: usize, row_out: &mut [T]| {
        let a_mat = &a.data()[batch * m * k..(batch + 1) * m * k];
        let b_off = if broadcast { 0 } else { batch * k * n };
        let b_mat = &b.data()[b_off..b_off + k * n];
        for kk in 0..k {
            let aik = a_mat[i * k + kk];
            let b_row = &b_mat[kk * n..(kk + 1) * n];
            for j in 0..n {
                row_out[j] += aik * b_row[j];
            }
        }
    };
    if nbatch * m * n * k >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(r, row)| {
            run_row(r / m, r % m, row);
        });
    } else {
        for (r, row) in out.chunks_mut(n).enumerate() {
            run_row(r / m, r % m, row);
        }
    }
    Tensor::new(&out_shape, out)
}

/// C[.., M, P] = A[.., M, K] x B[.., P, K]^T; B may omit the batch axes.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ab, m, k) = split_matrix_shape(a.shape())?;
    let (bb, p, bk) = split_matrix_shape(b.shape())?;
    if k != bk {
        return Err(Error::Shape(format!(
            "inner extents differ: {:?} x {:?}^T",
            a.shape(),
            b.shape()
        )));
    }
    let broadcast = check_batch(&ab, &bb)?;
    let nbatch: usize = ab.iter().product();
    let mut out_shape = ab;
    out_shape.push(m);
    out_shape.push(p);
    let mut out = vec![T::zero(); nbatch * m * p];

    let run_row = |batch: usize, i: usize, row_out: &mut [T]| {
        let a_row = &a.data()[batch * m * k + i * k..batch * m * k + (i + 1) * k];
        let b_off = if broadcast { 0 } else { batch * p * k };
        let b_mat = &b.data()[b_off..b_off + p * k];
        for (j, out_v) in row_out.iter_mut().enumerate() {
            let b_row = &b_mat[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for kk in 0..k {
                acc += a_row[kk] * b_row[kk];
            }
            *out_v = acc;
        }
    };
    if nbatch * m * p * k >= PAR_THRESHOLD {
        out.par_chunks_mut(p).enumerate().for_each(|(r, row)| {
            run_row(r / m, r % m, row);
        });
    } else {
        for (r, row) in out.chunks_mut(p).enumerate() {
            run_row(r / m, r % m, row);
        }
    }
    Tensor::new(&out_shape, out)
}

/// C = A[.., M, K]^T x B[.., M, N]. With `collapse_batch` the result is
/// additionally summed over the batch axes, yielding [K, N] — the gradient
/// shape for a batch-broadcast right operand.
pub fn matmul_tn<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    collapse_batch: bool,
) -> Result<Tensor<T>> {
    let (ab, m, k) = split_matrix_shape(a.shape())?;
    let (bb, bm, n) = split_matrix_shape(b.shape())?;
    if m != bm || ab != bb {
        return Err(Error::Shape(format!(
            "matmul_tn shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let nbatch: usize = ab.iter().product();
    let out_shape: Vec<usize> = if collapse_batch {
        vec![k, n]
    } else {
        let mut s = ab.clone();
        s.push(k);
        s.push(n);
        s
    };
    let mut out = vec![T::zero(); out_shape.iter().product()];
    if collapse_batch {
        // out[kk, j] accumulates over (batch, i) in ascending order.
        for batch in 0..nbatch {
            let a_mat = &a.data()[batch * m * k..(batch + 1) * m * k];
            let b_mat = &b.data()[batch * m * n..(batch + 1) * m * n];
            for i in 0..m {
                let b_row = &b_mat[i * n..(i + 1) * n];
                for kk in 0..k {
                    let aik = a_mat[i * k + kk];
                    let o_row = &mut out[kk * n..(kk + 1) * n];
                    for j in 0..n {
                        o_row[j] += aik * b_row[j];
                    }
                }
            }
        }
    } else {
        for batch in 0..nbatch {
            let a_mat = &a.data()[batch * m * k..(batch + 1) * m * k];
            let b_mat = &b.data()[batch * m * n..(batch + 1) * m * n];
            let o_mat = &mut out[batch * k * n..(batch + 1) * k * n];
            for i in 0..m {
                let b_row = &b_mat[i * n..(i + 1) * n];
                for kk in 0..k {
                    let aik = a_mat[i * k + kk];
                    let o_row = &mut o_mat[kk * n..(kk + 1) * n];
                    for j in 0..n {
                        o_row[j] += aik * b_row[j];
                    }
                }
            }
        }
    }
    Tensor::new(&out_shape, out)
}

/// Elementwise sum; `b` may cover only a trailing suffix of `a`'s axes, in
/// which case it repeats over the leading axes.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if !is_suffix(b.shape(), a.shape()) {
        return Err(Error::Shape(format!(
            "add: {:?} does not broadcast onto {:?}",
            b.shape(),
            a.shape()
        )));
    }
    let bn = b.numel().max(1);
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + b.data()[i % bn])
        .collect();
    Tensor::new(a.shape(), data)
}

fn is_suffix(suffix: &[usize], of: &[usize]) -> bool {
    suffix.len() <= of.len() && of[of.len() - suffix.len()..] == *suffix
}

/// Elementwise product of same-shape tensors.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "mul: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor::new(a.shape(), data)
}

pub fn scale<T: Scalar>(x: &Tensor<T>, c: T) -> Tensor<T> {
    x.map(|v| v * c)
}

/// Numerically stabilized softmax over the last axis.
pub fn softmax_last<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let width = last_axis(x)?;
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(width) {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Tensor::new(x.shape(), data)
}

fn last_axis<T: Scalar>(x: &Tensor<T>) -> Result<usize> {
    match x.shape().last() {
        Some(&w) if w > 0 => Ok(w),
        _ => Err(Error::Shape(
            "softmax/layer_norm need a non-empty last axis".into(),
        )),
    }
}

/// Standardizes each last-axis slice (biased variance), then applies the
/// affine gain/bias transform.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let width = last_axis(x)?;
    if gain.shape() != [width] || bias.shape() != [width] {
        return Err(Error::Shape(format!(
            "layer_norm gain/bias {:?}/{:?} vs last axis {}",
            gain.shape(),
            bias.shape(),
            width
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Contract("layer_norm eps must be > 0".into()));
    }
    let epst = T::from_f64(eps);
    let wt = T::from_f64(width as f64);
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(width) {
        let mut mean = T::zero();
        for v in row.iter() {
            mean += *v;
        }
        mean = mean / wt;
        let mut var = T::zero();
        for v in row.iter() {
            let d = *v - mean;
            var += d * d;
        }
        var = var / wt;
        let inv_sigma = T::one() / (var + epst).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv_sigma * gain.data()[j] + bias.data()[j];
        }
    }
    Tensor::new(x.shape(), data)
}

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    x.map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
}

pub fn gelu_grad<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let a = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    x.map(|v| {
        let u = c * (v + a * v * v * v);
        let t = u.tanh();
        let sech2 = T::one() - t * t;
        half * (T::one() + t) + half * v * sech2 * c * (T::one() + three * a * v * v)
    })
}

/// Copies rows of a [rows, width] table: output row i is table[indices[i]].
pub fn gather_rows<T: Scalar>(table: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    if table.rank() != 2 {
        return Err(Error::Shape(format!(
            "gather table rank {:?}",
            table.shape()
        )));
    }
    let (rows, width) = (table.shape()[0], table.shape()[1]);
    let mut data = Vec::with_capacity(indices.len() * width);
    for &idx in indices {
        if idx >= rows {
            return Err(Error::Index(format!("gather index {} >= {}", idx, rows)));
        }
        data.extend_from_slice(&table.data()[idx * width..(idx + 1) * width]);
    }
    Tensor::new(&[indices.len(), width], data)
}

/// Axis permutation (copies).
pub fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank
        || perm
            .iter()
            .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
    {
        return Err(Error::Shape(format!(
            "invalid permutation {:?} for rank {}",
            perm, rank
        )));
    }
    let in_shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let mut out = vec![T::zero(); x.numel()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut off = 0;
        for (d, &i) in idx.iter().enumerate() {
            off += i * in_strides[perm[d]];
        }
        *slot = x.data()[off];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (d, &p) in perm.iter().enumerate() {
        inv[p] = d;
    }
    inv
}

pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> T {
    let mut acc = T::zero();
    for &v in x.data() {
        acc += v;
    }
    acc
}

/// Per-row negative log-likelihood of the target id under softmax(logits).
/// logits is [rows, vocab]; natural log.
pub fn cross_entropy_rows<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(Error::Shape(format!(
            "cross_entropy logits rank {:?}",
            logits.shape()
        )));
    }
    let (rows, vocab) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != rows {
        return Err(Error::Shape(format!(
            "cross_entropy: {} rows vs {} targets",
            rows,
            targets.len()
        )));
    }
    let mut out = Vec::with_capacity(rows);
    for (r, &t) in targets.iter().enumerate() {
        if t >= vocab {
            return Err(Error::Index(format!("target {} >= vocab {}", t, vocab)));
        }
        let row = &logits.data()[r * vocab..(r + 1) * vocab];
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for &v in row {
            sum += (v - max).exp();
        }
        out.push(max + sum.ln() - row[t]);
    }
    Tensor::new(&[rows], out)
}

/// logits[v] = dot(h, table[v]): the tied-embedding output projection for a
/// single hidden row, bitwise identical to `matmul_nt(h.[1,D], table)`.
pub fn project_row<T: Scalar>(h: &[T], table: &Tensor<T>) -> Result<Vec<T>> {
    if table.rank() != 2 || table.shape()[1] != h.len() {
        return Err(Error::Shape(format!(
            "project_row: hidden {} vs table {:?}",
            h.len(),
            table.shape()
        )));
    }
    let (rows, width) = (table.shape()[0], table.shape()[1]);
    let mut out = vec![T::zero(); rows];
    let run = |v: usize, slot: &mut T| {
        let row = &table.data()[v * width..(v + 1) * width];
        let mut acc = T::zero();
        for k in 0..width {
            acc += h[k] * row[k];
        }
        *slot = acc;
    };
    if rows * width >= PAR_THRESHOLD {
        out.par_iter_mut()
            .enumerate()
            .for_each(|(v, slot)| run(v, slot));
    } else {
        for (v, slot) in out.iter_mut().enumerate() {
            run(v, slot);
        }
    }
    Ok(out)
}
