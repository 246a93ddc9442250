//! Matrix, lookup, shape, and reduction primitives.

use super::{opt, DiffTensor, GradError, Graph, Node, Op, Result};

/// C += A(ta) * B(tb) with A logically m×k and B logically k×n after the
/// transpose flags are applied. Accumulation order is fixed row-major.
pub(crate) fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    let a_at = |i: usize, j: usize| if ta { a[j * m + i] } else { a[i * k + j] };
    let b_at = |i: usize, j: usize| if tb { b[j * k + i] } else { b[i * n + j] };
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a_at(i, p) * b_at(p, j);
            }
            c[i * n + j] += acc;
        }
    }
}

fn mat_dims(op: &'static str, t: &DiffTensor, transpose: bool) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok(if transpose { (*c, *r) } else { (*r, *c) }),
        other => Err(GradError::ShapeMismatch { op, details: format!("expected 2-d matrix, got {:?}", other) }),
    }
}

impl Graph {
    /// 2-d matrix product with optional transposes.
    pub fn matmul(&mut self, a: &DiffTensor, b: &DiffTensor, ta: bool, tb: bool) -> Result<DiffTensor> {
        let (m, ka) = mat_dims("matmul", a, ta)?;
        let (kb, n) = mat_dims("matmul", b, tb)?;
        if ka != kb {
            return Err(GradError::ShapeMismatch {
                op: "matmul",
                details: format!("inner extents {} vs {}", ka, kb),
            });
        }
        let (ia, ib) = (self.input_id(a)?, self.input_id(b)?);
        let mut out = vec![0.0; m * n];
        gemm_acc(m, ka, n, a.data(), ta, b.data(), tb, &mut out);
        self.record(Op::Matmul { ta, tb }, vec![ia, ib], vec![m, n], out)
    }

    /// Affine map: x[..., in] · w[in, out] + b[out].
    pub fn linear(&mut self, x: &DiffTensor, w: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
        let (in_dim, out_dim) = mat_dims("linear", w, false)?;
        let x_last = *x.shape().last().ok_or(GradError::ShapeMismatch {
            op: "linear",
            details: "empty input shape".into(),
        })?;
        if x_last != in_dim || b.shape() != [out_dim] {
            return Err(GradError::ShapeMismatch {
                op: "linear",
                details: format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
            });
        }
        let rows = x.numel() / in_dim;
        let (ix, iw, ib) = (self.input_id(x)?, self.input_id(w)?, self.input_id(b)?);
        let mut out = vec![0.0; rows * out_dim];
        for r in 0..rows {
            out[r * out_dim..(r + 1) * out_dim].copy_from_slice(b.data());
        }
        gemm_acc(rows, in_dim, out_dim, x.data(), false, w.data(), false, &mut out);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = out_dim;
        self.record(Op::Linear, vec![ix, iw, ib], shape, out)
    }

    /// Row lookup: table[v, d] gathered at `ids` into [len(ids), d].
    pub fn embedding(&mut self, table: &DiffTensor, ids: &[usize]) -> Result<DiffTensor> {
        let (vocab, dim) = mat_dims("embedding-lookup", table, false)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(GradError::ShapeMismatch {
                op: "embedding-lookup",
                details: format!("id {} out of vocabulary {}", bad, vocab),
            });
        }
        let it = self.input_id(table)?;
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            out.extend_from_slice(&table.data()[id * dim..(id + 1) * dim]);
        }
        self.record(Op::Embedding { ids: ids.to_vec() }, vec![it], vec![ids.len(), dim], out)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[&DiffTensor], axis: usize) -> Result<DiffTensor> {
        let first = parts.first().ok_or(GradError::ShapeMismatch {
            op: "concat",
            details: "no inputs".into(),
        })?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(GradError::ShapeMismatch {
                op: "concat",
                details: format!("axis {} out of rank {}", axis, rank),
            });
        }
        let mut axis_total = 0;
        let mut extents = Vec::with_capacity(parts.len());
        for p in parts {
            if p.shape().len() != rank
                || p.shape().iter().zip(first.shape()).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(GradError::ShapeMismatch {
                    op: "concat",
                    details: format!("{:?} vs {:?} along axis {}", p.shape(), first.shape(), axis),
                });
            }
            extents.push(p.shape()[axis]);
            axis_total += p.shape()[axis];
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = axis_total;

        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * axis_total * inner];
        for o in 0..outer {
            let mut dst_off = o * axis_total * inner;
            for (p, &ext) in parts.iter().zip(&extents) {
                let src_off = o * ext * inner;
                out[dst_off..dst_off + ext * inner].copy_from_slice(&p.data()[src_off..src_off + ext * inner]);
                dst_off += ext * inner;
            }
        }
        let ids = parts.iter().map(|p| self.input_id(p)).collect::<Result<Vec<_>>>()?;
        self.record(Op::Concat { axis, parts: extents }, ids, shape, out)
    }

    pub fn reshape(&mut self, a: &DiffTensor, shape: &[usize]) -> Result<DiffTensor> {
        if shape.iter().product::<usize>() != a.numel() {
            return Err(GradError::ShapeMismatch {
                op: "reshape",
                details: format!("{:?} -> {:?}", a.shape(), shape),
            });
        }
        let ia = self.input_id(a)?;
        self.record(Op::Reshape, vec![ia], shape.to_vec(), a.data().to_vec())
    }

    /// Sum over one axis, or over everything (`axis = None`, scalar out).
    pub fn sum(&mut self, a: &DiffTensor, axis: Option<usize>) -> Result<DiffTensor> {
        let (shape, out) = reduce_forward("sum", a, axis, false)?;
        let ia = self.input_id(a)?;
        self.record(Op::Sum { axis }, vec![ia], shape, out)
    }

    pub fn mean(&mut self, a: &DiffTensor, axis: Option<usize>) -> Result<DiffTensor> {
        let (shape, out) = reduce_forward("mean", a, axis, true)?;
        let ia = self.input_id(a)?;
        self.record(Op::Mean { axis }, vec![ia], shape, out)
    }
}

fn reduce_forward(
    op: &'static str,
    a: &DiffTensor,
    axis: Option<usize>,
    average: bool,
) -> Result<(Vec<usize>, Vec<f64>)> {
    match axis {
        None => {
            let mut total = a.data().iter().sum::<f64>();
            if average {
                total /= a.numel().max(1) as f64;
            }
            Ok((vec![1], vec![total]))
        }
        Some(ax) => {
            if ax >= a.shape().len() {
                return Err(GradError::ShapeMismatch {
                    op,
                    details: format!("axis {} out of rank {}", ax, a.shape().len()),
                });
            }
            let extent = a.shape()[ax];
            let outer: usize = a.shape()[..ax].iter().product();
            let inner: usize = a.shape()[ax + 1..].iter().product();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for e in 0..extent {
                    for i in 0..inner {
                        out[o * inner + i] += a.data()[(o * extent + e) * inner + i];
                    }
                }
            }
            if average {
                for v in &mut out {
                    *v /= extent as f64;
                }
            }
            let mut shape: Vec<usize> = a.shape().to_vec();
            shape.remove(ax);
            if shape.is_empty() {
                shape.push(1);
            }
            Ok((shape, out))
        }
    }
}

pub(crate) fn vjp_matmul(
    ins: &[&Node],
    ta: bool,
    tb: bool,
    out_shape: &[usize],
    g: &[f64],
    need: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let (m, n) = (out_shape[0], out_shape[1]);
    let k = if ta { ins[0].shape[0] } else { ins[0].shape[1] };
    let da = opt(need[0], || {
        let mut d = vec![0.0; ins[0].data.len()];
        if ta {
            // A' = Aᵀ; dA = (G Bᵀ)ᵀ = B Gᵀ
            gemm_acc(k, n, m, &ins[1].data, tb, g, true, &mut d);
        } else {
            gemm_acc(m, n, k, g, false, &ins[1].data, !tb, &mut d);
        }
        d
    });
    let db = opt(need[1], || {
        let mut d = vec![0.0; ins[1].data.len()];
        if tb {
            // B' = Bᵀ; dB = (A'ᵀ G)ᵀ = Gᵀ A'
            gemm_acc(n, m, k, g, true, &ins[0].data, ta, &mut d);
        } else {
            gemm_acc(k, m, n, &ins[0].data, !ta, g, false, &mut d);
        }
        d
    });
    vec![da, db]
}

pub(crate) fn vjp_linear(ins: &[&Node], g: &[f64], need: &[bool]) -> Vec<Option<Vec<f64>>> {
    let in_dim = ins[1].shape[0];
    let out_dim = ins[1].shape[1];
    let rows = g.len() / out_dim;
    let dx = opt(need[0], || {
        let mut d = vec![0.0; ins[0].data.len()];
        gemm_acc(rows, out_dim, in_dim, g, false, &ins[1].data, true, &mut d);
        d
    });
    let dw = opt(need[1], || {
        let mut d = vec![0.0; in_dim * out_dim];
        gemm_acc(in_dim, rows, out_dim, &ins[0].data, true, g, false, &mut d);
        d
    });
    let db = opt(need[2], || {
        let mut d = vec![0.0; out_dim];
        for r in 0..rows {
            for c in 0..out_dim {
                d[c] += g[r * out_dim + c];
            }
        }
        d
    });
    vec![dx, dw, db]
}

pub(crate) fn vjp_embedding(ins: &[&Node], ids: &[usize], g: &[f64], need: &[bool]) -> Vec<Option<Vec<f64>>> {
    let dim = ins[0].shape[1];
    vec![opt(need[0], || {
        let mut d = vec![0.0; ins[0].data.len()];
        for (t, &id) in ids.iter().enumerate() {
            for c in 0..dim {
                d[id * dim + c] += g[t * dim + c];
            }
        }
        d
    })]
}

pub(crate) fn vjp_concat(
    ins: &[&Node],
    axis: usize,
    parts: &[usize],
    out_shape: &[usize],
    g: &[f64],
    need: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let axis_total = out_shape[axis];
    let mut grads = Vec::with_capacity(ins.len());
    let mut offset = 0;
    for (idx, &ext) in parts.iter().enumerate() {
        grads.push(opt(need[idx], || {
            let mut d = vec![0.0; outer * ext * inner];
            for o in 0..outer {
                let src = (o * axis_total + offset) * inner;
                let dst = o * ext * inner;
                d[dst..dst + ext * inner].copy_from_slice(&g[src..src + ext * inner]);
            }
            d
        }));
        offset += ext;
    }
    grads
}

pub(crate) fn vjp_reduce(in_shape: &[usize], axis: Option<usize>, g: &[f64], average: bool) -> Vec<f64> {
    let numel: usize = in_shape.iter().product();
    match axis {
        None => {
            let mut v = g[0];
            if average {
                v /= numel.max(1) as f64;
            }
            vec![v; numel]
        }
        Some(ax) => {
            let extent = in_shape[ax];
            let outer: usize = in_shape[..ax].iter().product();
            let inner: usize = in_shape[ax + 1..].iter().product();
            let scale = if average { 1.0 / extent as f64 } else { 1.0 };
            let mut d = vec![0.0; numel];
            for o in 0..outer {
                for e in 0..extent {
                    for i in 0..inner {
                        d[(o * extent + e) * inner + i] = g[o * inner + i] * scale;
                    }
                }
            }
            d
        }
    }
}
