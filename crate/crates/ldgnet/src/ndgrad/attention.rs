//! Fused multi-head self-attention over a single [tokens, width] sequence.
//!
//! Fused because the primitive vocabulary has no axis-permute: splitting
//! heads out of the projection needs a strided view that the other
//! primitives cannot express. The backward pass is hand-derived and pinned
//! by the finite-difference suite.

use super::{linalg::gemm_acc, opt, DiffTensor, GradError, Graph, MhaCache, Node, Op, Result};

const MASKED_SCORE: f64 = -1.0e30;

impl Graph {
    /// `weights` are [wq, bq, wk, bk, wv, bv, wo, bo]; projections are
    /// width-to-width. Keys with `key_valid[j] == false` are excluded from
    /// every query's attention.
    pub fn multihead_attention(
        &mut self,
        x: &DiffTensor,
        weights: [&DiffTensor; 8],
        heads: usize,
        causal: bool,
        key_valid: &[bool],
    ) -> Result<DiffTensor> {
        let (t, dm) = match x.shape() {
            [t, dm] => (*t, *dm),
            other => {
                return Err(GradError::ShapeMismatch {
                    op: "multihead-attention",
                    details: format!("expected [tokens, width], got {:?}", other),
                })
            }
        };
        if heads == 0 || dm % heads != 0 {
            return Err(GradError::ShapeMismatch {
                op: "multihead-attention",
                details: format!("width {} not divisible by {} heads", dm, heads),
            });
        }
        if key_valid.len() != t {
            return Err(GradError::ShapeMismatch {
                op: "multihead-attention",
                details: format!("key_valid length {} against {} tokens", key_valid.len(), t),
            });
        }
        for (i, w) in weights.iter().enumerate() {
            let want: &[usize] = if i % 2 == 0 { &[dm, dm] } else { &[dm] };
            if w.shape() != want {
                return Err(GradError::ShapeMismatch {
                    op: "multihead-attention",
                    details: format!("projection tensor {} has shape {:?}, want {:?}", i, w.shape(), want),
                });
            }
        }
        let dh = dm / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let project = |w: &DiffTensor, b: &DiffTensor| {
            let mut out = vec![0.0; t * dm];
            for r in 0..t {
                out[r * dm..(r + 1) * dm].copy_from_slice(b.data());
            }
            gemm_acc(t, dm, dm, x.data(), false, w.data(), false, &mut out);
            out
        };
        let q = project(weights[0], weights[1]);
        let k = project(weights[2], weights[3]);
        let v = project(weights[4], weights[5]);

        let mut attn = vec![0.0; heads * t * t];
        let mut ctx = vec![0.0; t * dm];
        for h in 0..heads {
            let col = h * dh;
            for i in 0..t {
                let row = &mut attn[(h * t + i) * t..(h * t + i + 1) * t];
                for (j, r) in row.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for d in 0..dh {
                        s += q[i * dm + col + d] * k[j * dm + col + d];
                    }
                    s *= scale;
                    if !key_valid[j] || (causal && j > i) {
                        s = MASKED_SCORE;
                    }
                    *r = s;
                }
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - m).exp();
                    z += *r;
                }
                for r in row.iter_mut() {
                    *r /= z;
                }
                for d in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..t {
                        acc += attn[(h * t + i) * t + j] * v[j * dm + col + d];
                    }
                    ctx[i * dm + col + d] = acc;
                }
            }
        }

        let mut out = vec![0.0; t * dm];
        for r in 0..t {
            out[r * dm..(r + 1) * dm].copy_from_slice(weights[7].data());
        }
        gemm_acc(t, dm, dm, &ctx, false, weights[6].data(), false, &mut out);

        let cache = MhaCache { heads, q, k, v, ctx, attn };
        let mut input_ids = vec![self.input_id(x)?];
        for w in weights {
            input_ids.push(self.input_id(w)?);
        }
        self.record(Op::Mha(Box::new(cache)), input_ids, vec![t, dm], out)
    }
}

pub(crate) fn vjp_mha(
    ins: &[&Node],
    cache: &MhaCache,
    g: &[f64],
    need: &[bool],
) -> Result<Vec<Option<Vec<f64>>>> {
    let (t, dm) = (ins[0].shape[0], ins[0].shape[1]);
    let heads = cache.heads;
    let dh = dm / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let x = &ins[0].data;
    let (wq, wk, wv, wo) = (&ins[1].data, &ins[3].data, &ins[5].data, &ins[7].data);

    // output projection
    let mut d_ctx = vec![0.0; t * dm];
    gemm_acc(t, dm, dm, g, false, wo, true, &mut d_ctx);
    let d_wo = opt(need[7], || {
        let mut d = vec![0.0; dm * dm];
        gemm_acc(dm, t, dm, &cache.ctx, true, g, false, &mut d);
        d
    });
    let d_bo = opt(need[8], || col_sum(g, t, dm));

    // attention core, per head
    let mut dq = vec![0.0; t * dm];
    let mut dk = vec![0.0; t * dm];
    let mut dv = vec![0.0; t * dm];
    let mut d_scores = vec![0.0; t]; // one row at a time
    for h in 0..heads {
        let col = h * dh;
        for i in 0..t {
            let a_row = &cache.attn[(h * t + i) * t..(h * t + i + 1) * t];
            // dA then softmax backward within the row
            let mut dot = 0.0;
            for j in 0..t {
                let mut da = 0.0;
                for d in 0..dh {
                    da += d_ctx[i * dm + col + d] * cache.v[j * dm + col + d];
                }
                d_scores[j] = da;
                dot += da * a_row[j];
            }
            for j in 0..t {
                d_scores[j] = a_row[j] * (d_scores[j] - dot);
            }
            for j in 0..t {
                let ds = d_scores[j] * scale;
                for d in 0..dh {
                    dq[i * dm + col + d] += ds * cache.k[j * dm + col + d];
                    dk[j * dm + col + d] += ds * cache.q[i * dm + col + d];
                }
                for d in 0..dh {
                    dv[j * dm + col + d] += a_row[j] * d_ctx[i * dm + col + d];
                }
            }
        }
    }

    // input projections
    let dx = opt(need[0], || {
        let mut d = vec![0.0; t * dm];
        gemm_acc(t, dm, dm, &dq, false, wq, true, &mut d);
        gemm_acc(t, dm, dm, &dk, false, wk, true, &mut d);
        gemm_acc(t, dm, dm, &dv, false, wv, true, &mut d);
        d
    });
    let proj_w = |dp: &[f64]| {
        let mut d = vec![0.0; dm * dm];
        gemm_acc(dm, t, dm, x, true, dp, false, &mut d);
        d
    };
    Ok(vec![
        dx,
        opt(need[1], || proj_w(&dq)),
        opt(need[2], || col_sum(&dq, t, dm)),
        opt(need[3], || proj_w(&dk)),
        opt(need[4], || col_sum(&dk, t, dm)),
        opt(need[5], || proj_w(&dv)),
        opt(need[6], || col_sum(&dv, t, dm)),
        d_wo,
        d_bo,
    ])
}

fn col_sum(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c] += m[r * cols + c];
        }
    }
    out
}
