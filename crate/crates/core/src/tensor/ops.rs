use super::Tensor;
use crate::error::{Error, Result};
use crate::flops;
use crate::mask::MaskSpec;

pub const RMS_NORM_EPS: f64 = 1e-8;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `C (m×n) = op(A) · op(B)`, optionally accumulating into `C`.
///
/// With `a_t`, `A` is stored `k×m`; with `b_t`, `B` is stored `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    flops::record_matmul(1, m, k, n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above against the strides used, and
    // `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn broadcast_batch(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out_batch`, the flat index into `operand` after
/// broadcasting.
fn batch_offsets(out_batch: &[usize], operand: &[usize]) -> Vec<usize> {
    let total: usize = out_batch.iter().product();
    let pad = out_batch.len() - operand.len();
    let mut idx = vec![0usize; out_batch.len()];
    let mut offsets = Vec::with_capacity(total);
    for _ in 0..total {
        let mut off = 0;
        for (ax, &d) in operand.iter().enumerate() {
            let i = if d == 1 { 0 } else { idx[ax + pad] };
            off = off * d + i;
        }
        offsets.push(off);
        for ax in (0..out_batch.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_batch[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    offsets
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    a_off: Vec<usize>,
    b_off: Vec<usize>,
    /// `b` is a single matrix shared by every batch element.
    shared_rhs: bool,
}

fn plan_matmul(a: &Tensor, b: &Tensor) -> Result<MatmulPlan> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
        return Err(Error::shape("matmul", sa, sb));
    }
    let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
    let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
    let batch = broadcast_batch(ba, bb).ok_or_else(|| Error::shape("matmul", sa, sb))?;
    let shared_rhs = bb.iter().product::<usize>() == 1 && ba.len() >= bb.len();
    let mut out_shape = batch.clone();
    out_shape.extend([m, n]);
    Ok(MatmulPlan {
        m,
        k,
        n,
        out_shape,
        a_off: batch_offsets(&batch, ba),
        b_off: batch_offsets(&batch, bb),
        shared_rhs,
    })
}

/// Batched matrix product over the trailing two axes, broadcasting leading
/// axes numpy-style.
pub fn matmul_batched(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let p = plan_matmul(a, b)?;
    let (m, k, n) = (p.m, p.k, p.n);
    let batches = p.a_off.len();
    let mut out = vec![0.0; batches * m * n];
    if p.shared_rhs && batches == a.len() / (m * k) {
        // Fold the batch into the row dimension: one product.
        gemm(batches * m, k, n, a.data(), false, b.data(), false, &mut out, false);
    } else {
        for i in 0..batches {
            let (ao, bo) = (p.a_off[i] * m * k, p.b_off[i] * k * n);
            gemm(
                m,
                k,
                n,
                &a.data()[ao..ao + m * k],
                false,
                &b.data()[bo..bo + k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
    }
    Ok(Tensor::from_parts(p.out_shape, out))
}

/// Gradients of `matmul_batched(a, b)` given the output adjoint `g`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let p = plan_matmul(a, b)?;
    if g.shape() != p.out_shape.as_slice() {
        return Err(Error::shape("matmul_backward", g.shape(), &p.out_shape));
    }
    let (m, k, n) = (p.m, p.k, p.n);
    let batches = p.a_off.len();
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    if p.shared_rhs && batches == a.len() / (m * k) {
        let rows = batches * m;
        gemm(rows, n, k, g.data(), false, b.data(), true, &mut ga, false);
        gemm(k, rows, n, a.data(), true, g.data(), false, &mut gb, false);
    } else {
        for i in 0..batches {
            let (ao, bo, go) = (p.a_off[i] * m * k, p.b_off[i] * k * n, i * m * n);
            let gi = &g.data()[go..go + m * n];
            gemm(
                m,
                n,
                k,
                gi,
                false,
                &b.data()[bo..bo + k * n],
                true,
                &mut ga[ao..ao + m * k],
                true,
            );
            gemm(
                k,
                m,
                n,
                &a.data()[ao..ao + m * k],
                true,
                gi,
                false,
                &mut gb[bo..bo + k * n],
                true,
            );
        }
    }
    Ok((
        Tensor::from_parts(a.shape().to_vec(), ga),
        Tensor::from_parts(b.shape().to_vec(), gb),
    ))
}

/// General axis permutation: output axis `i` is input axis `axes[i]`.
pub fn permute(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = t.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::shape("permute", t.shape(), axes));
    }
    if rank == 0 {
        return Ok(t.clone());
    }
    let in_shape = t.shape();
    let mut in_strides = vec![1usize; rank];
    for ax in (0..rank.saturating_sub(1)).rev() {
        in_strides[ax] = in_strides[ax + 1] * in_shape[ax + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    let src = t.data();
    let mut out = Vec::with_capacity(t.len());
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    for _ in 0..outer {
        out.extend((0..inner).map(|j| src[base + j * inner_stride]));
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Row-wise softmax over the last axis with masked entries removed from the
/// normalization pool. Masked outputs are exactly zero.
pub fn softmax_rows_masked(s: &Tensor, mask: &MaskSpec) -> Result<Tensor> {
    let shape = s.shape();
    if shape.len() < 2 {
        return Err(Error::shape("softmax_rows_masked", shape, &[]));
    }
    let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    match mask {
        MaskSpec::GlobalPlusSwa { .. } => {
            return Err(Error::config(
                "global-plus-swa mask must be resolved to a layer mask first",
            ))
        }
        MaskSpec::Causal | MaskSpec::SlidingWindow { .. } if rows != cols => {
            return Err(Error::shape("softmax_rows_masked", shape, &[rows, rows]));
        }
        _ => {}
    }
    let mut out = vec![0.0; s.len()];
    for (r, (src, dst)) in s
        .data()
        .chunks_exact(cols)
        .zip(out.chunks_exact_mut(cols))
        .enumerate()
    {
        let range = mask.row_range(r % rows, cols);
        if range.is_empty() {
            return Err(Error::FullyMaskedRow { row: r % rows });
        }
        let row = &src[range.clone()];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let mut total = 0.0;
        for (o, &x) in dst[range.clone()].iter_mut().zip(row) {
            *o = (x - max).exp();
            total += *o;
        }
        for o in &mut dst[range] {
            *o /= total;
        }
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// `x / sqrt(mean(x²) + ε)` along the last axis, no gain.
pub fn rms_norm(x: &Tensor) -> Tensor {
    let d = *x.shape().last().unwrap_or(&1);
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(d) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + RMS_NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Layer normalization along the last axis without affine parameters.
pub fn layer_norm(x: &Tensor) -> Tensor {
    let d = *x.shape().last().unwrap_or(&1);
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn zip_same(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    ))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same("mul", a, b, |x, y| x * y)
}

/// `a + b` where `b`'s shape is a trailing suffix of `a`'s.
pub fn add_broadcast(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
        return Err(Error::shape("add_broadcast", sa, sb));
    }
    let mut out = a.data().to_vec();
    for chunk in out.chunks_exact_mut(b.len()) {
        chunk.iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
    }
    Ok(Tensor::from_parts(sa.to_vec(), out))
}

/// Gathers `indices` along `axis`.
pub fn select(t: &Tensor, axis: usize, indices: &[usize]) -> Result<Tensor> {
    let shape = t.shape();
    if axis >= shape.len() || indices.is_empty() || indices.iter().any(|&i| i >= shape[axis]) {
        return Err(Error::shape("select", shape, indices));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let extent = shape[axis];
    let src = t.data();
    let mut out = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        for &i in indices {
            let start = (o * extent + i) * inner;
            out.extend_from_slice(&src[start..start + inner]);
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = indices.len();
    Ok(Tensor::from_parts(out_shape, out))
}

pub(crate) fn select_backward(g: &Tensor, in_shape: &[usize], axis: usize, indices: &[usize]) -> Tensor {
    let outer: usize = in_shape[..axis].iter().product();
    let inner: usize = in_shape[axis + 1..].iter().product();
    let extent = in_shape[axis];
    let mut out = vec![0.0; in_shape.iter().product()];
    let src = g.data();
    for o in 0..outer {
        for (pos, &i) in indices.iter().enumerate() {
            let from = (o * indices.len() + pos) * inner;
            let to = (o * extent + i) * inner;
            out[to..to + inner]
                .iter_mut()
                .zip(&src[from..from + inner])
                .for_each(|(d, s)| *d += s);
        }
    }
    Tensor::from_parts(in_shape.to_vec(), out)
}

/// Assembles `[..., p, n, m]` blocks into the direct sum `[..., p·n, p·m]`.
pub fn block_diag_embed(t: &Tensor) -> Result<Tensor> {
    let shape = t.shape();
    if shape.len() < 3 {
        return Err(Error::shape("block_diag_embed", shape, &[]));
    }
    let r = shape.len();
    let (p, n, m) = (shape[r - 3], shape[r - 2], shape[r - 1]);
    let outer: usize = shape[..r - 3].iter().product();
    let (rows, cols) = (p * n, p * m);
    let mut out = vec![0.0; outer * rows * cols];
    let src = t.data();
    for o in 0..outer {
        for blk in 0..p {
            for i in 0..n {
                let from = ((o * p + blk) * n + i) * m;
                let to = o * rows * cols + (blk * n + i) * cols + blk * m;
                out[to..to + m].copy_from_slice(&src[from..from + m]);
            }
        }
    }
    let mut out_shape = shape[..r - 3].to_vec();
    out_shape.extend([rows, cols]);
    Ok(Tensor::from_parts(out_shape, out))
}

pub(crate) fn block_diag_extract(g: &Tensor, block_shape: &[usize]) -> Tensor {
    let r = block_shape.len();
    let (p, n, m) = (block_shape[r - 3], block_shape[r - 2], block_shape[r - 1]);
    let outer: usize = block_shape[..r - 3].iter().product();
    let (rows, cols) = (p * n, p * m);
    let src = g.data();
    let mut out = Vec::with_capacity(outer * p * n * m);
    for o in 0..outer {
        for blk in 0..p {
            for i in 0..n {
                let from = o * rows * cols + (blk * n + i) * cols + blk * m;
                out.extend_from_slice(&src[from..from + m]);
            }
        }
    }
    Tensor::from_parts(block_shape.to_vec(), out)
}
