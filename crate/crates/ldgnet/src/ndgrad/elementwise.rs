//! Elementwise and per-row primitives: add, mul, scale, relu, log, exp,
//! softmax, l2-normalize, layernorm.

use super::{opt, DiffTensor, GradError, Graph, Node, Op, Result};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Shapes a binary elementwise op accepts: identical, or one side a
/// one-element scalar broadcast over the other.
fn binary_shape(op: &'static str, a: &DiffTensor, b: &DiffTensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(GradError::ShapeMismatch {
            op,
            details: format!("{:?} vs {:?}", a.shape(), b.shape()),
        })
    }
}

fn broadcast_pair(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if a.len() == b.len() {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    } else if b.len() == 1 {
        a.iter().map(|&x| f(x, b[0])).collect()
    } else {
        b.iter().map(|&y| f(a[0], y)).collect()
    }
}

impl Graph {
    pub fn add(&mut self, a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
        let shape = binary_shape("add", a, b)?;
        let (ia, ib) = (self.input_id(a)?, self.input_id(b)?);
        let out = broadcast_pair(a.data(), b.data(), |x, y| x + y);
        self.record(Op::Add, vec![ia, ib], shape, out)
    }

    pub fn mul(&mut self, a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
        let shape = binary_shape("mul", a, b)?;
        let (ia, ib) = (self.input_id(a)?, self.input_id(b)?);
        let out = broadcast_pair(a.data(), b.data(), |x, y| x * y);
        self.record(Op::Mul, vec![ia, ib], shape, out)
    }

    /// a - b, expressed through the primitive set.
    pub fn sub(&mut self, a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
        let neg_b = self.scale(b, -1.0)?;
        self.add(a, &neg_b)
    }

    pub fn scale(&mut self, a: &DiffTensor, factor: f64) -> Result<DiffTensor> {
        let ia = self.input_id(a)?;
        let out = a.data().iter().map(|&x| x * factor).collect();
        self.record(Op::Scale { factor }, vec![ia], a.shape().to_vec(), out)
    }

    pub fn relu(&mut self, a: &DiffTensor) -> Result<DiffTensor> {
        let ia = self.input_id(a)?;
        let out = a.data().iter().map(|&x| x.max(0.0)).collect();
        self.record(Op::Relu, vec![ia], a.shape().to_vec(), out)
    }

    pub fn log(&mut self, a: &DiffTensor) -> Result<DiffTensor> {
        let ia = self.input_id(a)?;
        let out = a.data().iter().map(|&x| x.ln()).collect();
        self.record(Op::Log, vec![ia], a.shape().to_vec(), out)
    }

    pub fn exp(&mut self, a: &DiffTensor) -> Result<DiffTensor> {
        let ia = self.input_id(a)?;
        let out = a.data().iter().map(|&x| x.exp()).collect();
        self.record(Op::Exp, vec![ia], a.shape().to_vec(), out)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: &DiffTensor) -> Result<DiffTensor> {
        let width = last_axis("softmax", a.shape())?;
        let ia = self.input_id(a)?;
        let mut out = vec![0.0; a.numel()];
        for (row_out, row_in) in out.chunks_mut(width).zip(a.data().chunks(width)) {
            let m = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                *o = (x - m).exp();
                z += *o;
            }
            for o in row_out.iter_mut() {
                *o /= z;
            }
        }
        self.record(Op::Softmax, vec![ia], a.shape().to_vec(), out)
    }

    /// Scale each last-axis row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: &DiffTensor) -> Result<DiffTensor> {
        let width = last_axis("l2-normalize", a.shape())?;
        let ia = self.input_id(a)?;
        let mut out = vec![0.0; a.numel()];
        let mut norms = Vec::with_capacity(a.numel() / width);
        for (row_out, row_in) in out.chunks_mut(width).zip(a.data().chunks(width)) {
            let n = row_in.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms.push(n);
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                *o = x / n; // zero rows surface as a NonFinite error below
            }
        }
        self.record(Op::L2Normalize { norms }, vec![ia], a.shape().to_vec(), out)
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layernorm(&mut self, x: &DiffTensor, gamma: &DiffTensor, beta: &DiffTensor) -> Result<DiffTensor> {
        let width = last_axis("layernorm", x.shape())?;
        if gamma.shape() != [width] || beta.shape() != [width] {
            return Err(GradError::ShapeMismatch {
                op: "layernorm",
                details: format!(
                    "gamma {:?} / beta {:?} against last axis {}",
                    gamma.shape(),
                    beta.shape(),
                    width
                ),
            });
        }
        let (ix, ig, ib) = (self.input_id(x)?, self.input_id(gamma)?, self.input_id(beta)?);
        let rows = x.numel() / width;
        let mut out = vec![0.0; x.numel()];
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x.data()[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let rs = 1.0 / (var + NORM_EPS).sqrt();
            rstd.push(rs);
            for c in 0..width {
                let h = (row[c] - mean) * rs;
                xhat[r * width + c] = h;
                out[r * width + c] = gamma.data()[c] * h + beta.data()[c];
            }
        }
        self.record(Op::LayerNorm { xhat, rstd }, vec![ix, ig, ib], x.shape().to_vec(), out)
    }
}

fn last_axis(op: &'static str, shape: &[usize]) -> Result<usize> {
    match shape.last() {
        Some(&w) if w > 0 => Ok(w),
        _ => Err(GradError::ShapeMismatch { op, details: format!("empty shape {:?}", shape) }),
    }
}

pub(crate) fn vjp_add(ins: &[&Node], g: &[f64], need: &[bool]) -> Vec<Option<Vec<f64>>> {
    let side = |i: usize| {
        opt(need[i], || {
            if ins[i].data.len() == g.len() {
                g.to_vec()
            } else {
                vec![g.iter().sum()]
            }
        })
    };
    vec![side(0), side(1)]
}

pub(crate) fn vjp_mul(ins: &[&Node], g: &[f64], need: &[bool]) -> Vec<Option<Vec<f64>>> {
    let side = |i: usize| {
        let other = &ins[1 - i].data;
        opt(need[i], || {
            if ins[i].data.len() == g.len() {
                if other.len() == 1 {
                    g.iter().map(|gi| gi * other[0]).collect()
                } else {
                    g.iter().zip(other.iter()).map(|(gi, o)| gi * o).collect()
                }
            } else {
                // this side is the broadcast scalar
                vec![g.iter().zip(other.iter()).map(|(gi, o)| gi * o).sum()]
            }
        })
    };
    vec![side(0), side(1)]
}

pub(crate) fn vjp_relu(x: &[f64], g: &[f64]) -> Vec<f64> {
    // subgradient at exactly 0 is 0
    x.iter().zip(g).map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 }).collect()
}

pub(crate) fn vjp_softmax(y: &[f64], shape: &[usize], g: &[f64]) -> Vec<f64> {
    let width = *shape.last().expect("validated in forward");
    let mut dx = vec![0.0; y.len()];
    for ((drow, yrow), grow) in dx.chunks_mut(width).zip(y.chunks(width)).zip(g.chunks(width)) {
        let dot: f64 = yrow.iter().zip(grow).map(|(&yi, &gi)| yi * gi).sum();
        for ((d, &yi), &gi) in drow.iter_mut().zip(yrow).zip(grow) {
            *d = yi * (gi - dot);
        }
    }
    dx
}

pub(crate) fn vjp_l2_normalize(y: &[f64], shape: &[usize], norms: &[f64], g: &[f64]) -> Vec<f64> {
    let width = *shape.last().expect("validated in forward");
    let mut dx = vec![0.0; y.len()];
    for (r, ((drow, yrow), grow)) in dx.chunks_mut(width).zip(y.chunks(width)).zip(g.chunks(width)).enumerate() {
        let dot: f64 = yrow.iter().zip(grow).map(|(&yi, &gi)| yi * gi).sum();
        for ((d, &yi), &gi) in drow.iter_mut().zip(yrow).zip(grow) {
            *d = (gi - yi * dot) / norms[r];
        }
    }
    dx
}

pub(crate) fn vjp_layernorm(
    ins: &[&Node],
    xhat: &[f64],
    rstd: &[f64],
    g: &[f64],
    need: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let width = ins[1].data.len();
    let rows = xhat.len() / width;
    let gamma = &ins[1].data;

    let dx = opt(need[0], || {
        let mut dx = vec![0.0; xhat.len()];
        for r in 0..rows {
            let h = &xhat[r * width..(r + 1) * width];
            let gr = &g[r * width..(r + 1) * width];
            let mut sum_dh = 0.0;
            let mut sum_dh_h = 0.0;
            for c in 0..width {
                let dh = gr[c] * gamma[c];
                sum_dh += dh;
                sum_dh_h += dh * h[c];
            }
            let inv_w = 1.0 / width as f64;
            for c in 0..width {
                let dh = gr[c] * gamma[c];
                dx[r * width + c] = rstd[r] * (dh - inv_w * sum_dh - h[c] * inv_w * sum_dh_h);
            }
        }
        dx
    });
    let dgamma = opt(need[1], || {
        let mut dg = vec![0.0; width];
        for r in 0..rows {
            for c in 0..width {
                dg[c] += g[r * width + c] * xhat[r * width + c];
            }
        }
        dg
    });
    let dbeta = opt(need[2], || {
        let mut db = vec![0.0; width];
        for r in 0..rows {
            for c in 0..width {
                db[c] += g[r * width + c];
            }
        }
        db
    });
    vec![dx, dgamma, dbeta]
}
