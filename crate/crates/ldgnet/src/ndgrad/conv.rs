//! Volumetric primitives over [batch, channel, depth, height, width]
//! tensors: conv3d, maxpool3d, batchnorm3d.

use super::{opt, DiffTensor, GradError, Graph, Node, Op, Result};

pub(crate) const BN_EPS: f64 = 1e-5;

fn dims5(op: &'static str, t: &DiffTensor) -> Result<[usize; 5]> {
    match t.shape() {
        [b, c, d, h, w] => Ok([*b, *c, *d, *h, *w]),
        other => Err(GradError::ShapeMismatch {
            op,
            details: format!("expected [b,c,d,h,w], got {:?}", other),
        }),
    }
}

fn out_extent(op: &'static str, n: usize, k: usize, pad: usize, stride: usize) -> Result<usize> {
    let padded = n + 2 * pad;
    if stride == 0 || padded < k {
        return Err(GradError::ShapeMismatch {
            op,
            details: format!("window {} does not fit extent {} (pad {})", k, n, pad),
        });
    }
    Ok((padded - k) / stride + 1)
}

impl Graph {
    /// 3-d cross-correlation: x[b,ci,d,h,w] * w[co,ci,kd,kh,kw] + bias[co].
    pub fn conv3d(
        &mut self,
        x: &DiffTensor,
        w: &DiffTensor,
        bias: &DiffTensor,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<DiffTensor> {
        let [b, ci, d, h, wd] = dims5("conv3d", x)?;
        let (co, kci, kd, kh, kw) = match w.shape() {
            [co, kci, kd, kh, kw] => (*co, *kci, *kd, *kh, *kw),
            other => {
                return Err(GradError::ShapeMismatch {
                    op: "conv3d",
                    details: format!("kernel must be [co,ci,kd,kh,kw], got {:?}", other),
                })
            }
        };
        if kci != ci || bias.shape() != [co] {
            return Err(GradError::ShapeMismatch {
                op: "conv3d",
                details: format!("x {:?}, kernel {:?}, bias {:?}", x.shape(), w.shape(), bias.shape()),
            });
        }
        let od = out_extent("conv3d", d, kd, pad[0], stride[0])?;
        let oh = out_extent("conv3d", h, kh, pad[1], stride[1])?;
        let ow = out_extent("conv3d", wd, kw, pad[2], stride[2])?;

        let (ix, iw, ib) = (self.input_id(x)?, self.input_id(w)?, self.input_id(bias)?);
        let mut out = vec![0.0; b * co * od * oh * ow];
        let xs = x.data();
        let ws = w.data();
        let in_plane = h * wd;
        let in_vol = d * in_plane;
        for bi in 0..b {
            for oc in 0..co {
                let mut oi = ((bi * co) + oc) * od * oh * ow;
                for zo in 0..od {
                    for yo in 0..oh {
                        for xo in 0..ow {
                            let mut acc = bias.data()[oc];
                            for ic in 0..ci {
                                let x_base = (bi * ci + ic) * in_vol;
                                let w_base = ((oc * ci + ic) * kd) * kh * kw;
                                for kz in 0..kd {
                                    let z = (zo * stride[0] + kz) as isize - pad[0] as isize;
                                    if z < 0 || z as usize >= d {
                                        continue;
                                    }
                                    for ky in 0..kh {
                                        let y = (yo * stride[1] + ky) as isize - pad[1] as isize;
                                        if y < 0 || y as usize >= h {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let xc = (xo * stride[2] + kx) as isize - pad[2] as isize;
                                            if xc < 0 || xc as usize >= wd {
                                                continue;
                                            }
                                            let xi = x_base + (z as usize) * in_plane + (y as usize) * wd + xc as usize;
                                            let wi = w_base + (kz * kh + ky) * kw + kx;
                                            acc += xs[xi] * ws[wi];
                                        }
                                    }
                                }
                            }
                            out[oi] = acc;
                            oi += 1;
                        }
                    }
                }
            }
        }
        self.record(Op::Conv3d { stride, pad }, vec![ix, iw, ib], vec![b, co, od, oh, ow], out)
    }

    /// Max pooling; ties broken by the lowest flat input index.
    pub fn maxpool3d(&mut self, x: &DiffTensor, size: [usize; 3], stride: [usize; 3]) -> Result<DiffTensor> {
        let [b, c, d, h, w] = dims5("maxpool3d", x)?;
        let od = out_extent("maxpool3d", d, size[0], 0, stride[0])?;
        let oh = out_extent("maxpool3d", h, size[1], 0, stride[1])?;
        let ow = out_extent("maxpool3d", w, size[2], 0, stride[2])?;
        let ix = self.input_id(x)?;
        let xs = x.data();
        let plane = h * w;
        let vol = d * plane;
        let mut out = vec![0.0; b * c * od * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        let mut oi = 0;
        for bc in 0..b * c {
            let base = bc * vol;
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for kz in 0..size[0] {
                            for ky in 0..size[1] {
                                for kx in 0..size[2] {
                                    let idx = base
                                        + (zo * stride[0] + kz) * plane
                                        + (yo * stride[1] + ky) * w
                                        + (xo * stride[2] + kx);
                                    if xs[idx] > best {
                                        best = xs[idx];
                                        best_i = idx;
                                    }
                                }
                            }
                        }
                        out[oi] = best;
                        argmax[oi] = best_i;
                        oi += 1;
                    }
                }
            }
        }
        self.record(Op::MaxPool3d { argmax }, vec![ix], vec![b, c, od, oh, ow], out)
    }

    /// Batch normalization over (batch, depth, height, width) per channel,
    /// using batch statistics. Returns the output plus the per-channel
    /// batch mean and biased variance so callers can maintain running
    /// statistics.
    pub fn batchnorm3d_train(
        &mut self,
        x: &DiffTensor,
        gamma: &DiffTensor,
        beta: &DiffTensor,
    ) -> Result<(DiffTensor, Vec<f64>, Vec<f64>)> {
        let [b, c, d, h, w] = dims5("batchnorm3d", x)?;
        check_affine("batchnorm3d", c, gamma, beta)?;
        let n = b * d * h * w;
        let vol = d * h * w;
        let xs = x.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for bi in 0..b {
                let base = (bi * c + ch) * vol;
                for i in 0..vol {
                    acc += xs[base + i];
                }
            }
            mean[ch] = acc / n as f64;
            let mut sq = 0.0;
            for bi in 0..b {
                let base = (bi * c + ch) * vol;
                for i in 0..vol {
                    let dlt = xs[base + i] - mean[ch];
                    sq += dlt * dlt;
                }
            }
            var[ch] = sq / n as f64;
        }
        let out = self.batchnorm_apply(x, gamma, beta, &mean, &var, true)?;
        Ok((out, mean, var))
    }

    /// Batch normalization with frozen statistics: a per-channel affine map.
    pub fn batchnorm3d_eval(
        &mut self,
        x: &DiffTensor,
        gamma: &DiffTensor,
        beta: &DiffTensor,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<DiffTensor> {
        let [_, c, ..] = dims5("batchnorm3d", x)?;
        check_affine("batchnorm3d", c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(GradError::ShapeMismatch {
                op: "batchnorm3d",
                details: format!("running stats of {} channels against {}", running_mean.len(), c),
            });
        }
        self.batchnorm_apply(x, gamma, beta, running_mean, running_var, false)
    }

    fn batchnorm_apply(
        &mut self,
        x: &DiffTensor,
        gamma: &DiffTensor,
        beta: &DiffTensor,
        mean: &[f64],
        var: &[f64],
        train: bool,
    ) -> Result<DiffTensor> {
        let [b, c, d, h, w] = dims5("batchnorm3d", x)?;
        let vol = d * h * w;
        let xs = x.data();
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * vol;
                let (g, bt, m, rs) = (gamma.data()[ch], beta.data()[ch], mean[ch], rstd[ch]);
                for i in 0..vol {
                    let hat = (xs[base + i] - m) * rs;
                    xhat[base + i] = hat;
                    out[base + i] = g * hat + bt;
                }
            }
        }
        let (ix, ig, ib) = (self.input_id(x)?, self.input_id(gamma)?, self.input_id(beta)?);
        self.record(Op::BatchNorm3d { train, xhat, rstd }, vec![ix, ig, ib], x.shape().to_vec(), out)
    }
}

fn check_affine(op: &'static str, c: usize, gamma: &DiffTensor, beta: &DiffTensor) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(GradError::ShapeMismatch {
            op,
            details: format!("gamma {:?} / beta {:?} against {} channels", gamma.shape(), beta.shape(), c),
        });
    }
    Ok(())
}

pub(crate) fn vjp_conv3d(
    ins: &[&Node],
    stride: [usize; 3],
    pad: [usize; 3],
    out_shape: &[usize],
    g: &[f64],
    need: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let (b, ci, d, h, wd) = {
        let s = &ins[0].shape;
        (s[0], s[1], s[2], s[3], s[4])
    };
    let (co, kd, kh, kw) = {
        let s = &ins[1].shape;
        (s[0], s[2], s[3], s[4])
    };
    let (od, oh, ow) = (out_shape[2], out_shape[3], out_shape[4]);
    let xs = &ins[0].data;
    let ws = &ins[1].data;
    let in_plane = h * wd;
    let in_vol = d * in_plane;

    let mut dx = if need[0] { Some(vec![0.0; xs.len()]) } else { None };
    let mut dw = if need[1] { Some(vec![0.0; ws.len()]) } else { None };
    let mut db = if need[2] { Some(vec![0.0; co]) } else { None };

    let mut oi = 0;
    for bi in 0..b {
        for oc in 0..co {
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let go = g[oi];
                        oi += 1;
                        if let Some(db) = db.as_mut() {
                            db[oc] += go;
                        }
                        if dx.is_none() && dw.is_none() {
                            continue;
                        }
                        for ic in 0..ci {
                            let x_base = (bi * ci + ic) * in_vol;
                            let w_base = ((oc * ci + ic) * kd) * kh * kw;
                            for kz in 0..kd {
                                let z = (zo * stride[0] + kz) as isize - pad[0] as isize;
                                if z < 0 || z as usize >= d {
                                    continue;
                                }
                                for ky in 0..kh {
                                    let y = (yo * stride[1] + ky) as isize - pad[1] as isize;
                                    if y < 0 || y as usize >= h {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let xc = (xo * stride[2] + kx) as isize - pad[2] as isize;
                                        if xc < 0 || xc as usize >= wd {
                                            continue;
                                        }
                                        let xi = x_base + (z as usize) * in_plane + (y as usize) * wd + xc as usize;
                                        let wi = w_base + (kz * kh + ky) * kw + kx;
                                        if let Some(dx) = dx.as_mut() {
                                            dx[xi] += go * ws[wi];
                                        }
                                        if let Some(dw) = dw.as_mut() {
                                            dw[wi] += go * xs[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    vec![dx, dw, db]
}

pub(crate) fn vjp_maxpool3d(in_shape: &[usize], argmax: &[usize], g: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; in_shape.iter().product()];
    for (gi, &src) in g.iter().zip(argmax) {
        dx[src] += gi;
    }
    dx
}

pub(crate) fn vjp_batchnorm3d(
    ins: &[&Node],
    train: bool,
    xhat: &[f64],
    rstd: &[f64],
    g: &[f64],
    need: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let s = &ins[0].shape;
    let (b, c, vol) = (s[0], s[1], s[2] * s[3] * s[4]);
    let n = (b * vol) as f64;
    let gamma = &ins[1].data;

    // per-channel sums shared by dx and the affine gradients
    let mut sum_g = vec![0.0; c];
    let mut sum_gh = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * vol;
            for i in 0..vol {
                sum_g[ch] += g[base + i];
                sum_gh[ch] += g[base + i] * xhat[base + i];
            }
        }
    }

    let dx = opt(need[0], || {
        let mut dx = vec![0.0; g.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * vol;
                let grs = gamma[ch] * rstd[ch];
                for i in 0..vol {
                    dx[base + i] = if train {
                        grs * (g[base + i] - sum_g[ch] / n - xhat[base + i] * sum_gh[ch] / n)
                    } else {
                        grs * g[base + i]
                    };
                }
            }
        }
        dx
    });
    let dgamma = opt(need[1], || sum_gh.clone());
    let dbeta = opt(need[2], || sum_g.clone());
    vec![dx, dgamma, dbeta]
}
