use std::sync::Arc;

use super::matmul::{gemm_into, Mat};
use crate::error::{Result, TensorError};
use crate::exec;
use crate::tensor::Tensor;

fn last_dim(op: &'static str, x: &Tensor) -> Result<usize> {
    match x.shape().last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(TensorError::dim(op, format!("bad shape {:?}", x.shape()))),
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (d, &v) in dst.iter_mut().zip(src) {
        *d = (v - m).exp();
        s += *d;
    }
    dst.iter_mut().for_each(|d| *d /= s);
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let d = last_dim("softmax", x)?;
    let mut out = vec![0.0; x.numel()];
    for (src, dst) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        softmax_row(src, dst);
    }
    Ok(Tensor::from_op(
        "softmax",
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |out, g| {
            let y = out.data();
            let mut gx = vec![0.0; y.len()];
            for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Log-softmax over the last axis.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let d = last_dim("log_softmax", x)?;
    let mut out = vec![0.0; x.numel()];
    for (src, dst) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + src.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        dst.iter_mut().zip(src).for_each(|(o, v)| *o = v - lse);
    }
    Ok(Tensor::from_op(
        "log_softmax",
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |out, g| {
            let y = out.data();
            let mut gx = vec![0.0; y.len()];
            for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                let gs: f64 = gr.iter().sum();
                for j in 0..d {
                    dr[j] = gr[j] - yr[j].exp() * gs;
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Layer normalization over the last axis with optional affine gain/bias of
/// shape `[d]`.
pub fn layer_norm(x: &Tensor, gain: Option<&Tensor>, bias: Option<&Tensor>, eps: f64) -> Result<Tensor> {
    let d = last_dim("layer_norm", x)?;
    for p in [gain, bias].into_iter().flatten() {
        if p.shape() != [d] {
            return Err(TensorError::dim(
                "layer_norm",
                format!("affine shape {:?} != [{}]", p.shape(), d),
            ));
        }
    }
    let rows = x.numel() / d;
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; rows];
    for (r, (src, dst)) in x.data().chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
        let mu = src.iter().sum::<f64>() / d as f64;
        let var = src.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        dst.iter_mut().zip(src).for_each(|(o, v)| *o = (v - mu) * is);
    }
    let gd = gain.map(|g| g.data());
    let bd = bias.map(|b| b.data());
    let out: Vec<f64> = xhat
        .chunks(d)
        .flat_map(|row| {
            row.iter().enumerate().map(move |(j, &v)| {
                let v = gd.map_or(v, |g| v * g[j]);
                bd.map_or(v, |b| v + b[j])
            })
        })
        .collect();
    let mut inputs = vec![x.clone()];
    let has_gain = gain.is_some();
    let has_bias = bias.is_some();
    inputs.extend(gain.cloned());
    inputs.extend(bias.cloned());
    Ok(Tensor::from_op(
        "layer_norm",
        x.shape().to_vec(),
        out,
        inputs,
        Box::new(move |out, g| {
            let ins = out.inputs();
            let gain_t = has_gain.then(|| &ins[1]);
            let gain_v = gain_t.map(|t| t.data());
            let mut result = Vec::with_capacity(ins.len());
            result.push(ins[0].tracks_grad().then(|| {
                let mut gx = vec![0.0; g.len()];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    for j in 0..d {
                        dxhat[j] = gain_v.map_or(gr[j], |gv| gr[j] * gv[j]);
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx[r * d + j] = inv_std[r] * (dxhat[j] - m1 - xr[j] * m2);
                    }
                }
                gx
            }));
            if let Some(gt) = gain_t {
                result.push(gt.tracks_grad().then(|| {
                    let mut gg = vec![0.0; d];
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                    gg
                }));
            }
            if has_bias {
                let bt = &ins[ins.len() - 1];
                result.push(bt.tracks_grad().then(|| {
                    let mut gb = vec![0.0; d];
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                    gb
                }));
            }
            result
        }),
    ))
}

/// Boolean attention mask of shape `[B, Lq, Lk]`; `true` means "may attend".
#[derive(Clone, Debug)]
pub struct AttnMask {
    pub batch: usize,
    pub lq: usize,
    pub lk: usize,
    pub allow: Arc<Vec<bool>>,
}

impl AttnMask {
    pub fn new(batch: usize, lq: usize, lk: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != batch * lq * lk {
            return Err(TensorError::dim(
                "attn_mask",
                format!("{} flags for [{}, {}, {}]", allow.len(), batch, lq, lk),
            ));
        }
        Ok(AttnMask { batch, lq, lk, allow: Arc::new(allow) })
    }

    /// Key-padding mask: query rows may attend to key `j` iff `valid[b][j]`.
    pub fn key_padding(valid: &[Vec<bool>], lq: usize) -> Result<Self> {
        let batch = valid.len();
        let lk = valid.first().map_or(0, |v| v.len());
        let mut allow = Vec::with_capacity(batch * lq * lk);
        for row in valid {
            if row.len() != lk {
                return Err(TensorError::dim("attn_mask", "ragged key-padding mask"));
            }
            for _ in 0..lq {
                allow.extend_from_slice(row);
            }
        }
        AttnMask::new(batch, lq, lk, allow)
    }

    /// Causal mask that also hides padded keys: position `i` of sample `b`
    /// may attend to `j` iff `j <= i` and `valid[b][j]`. Query rows whose
    /// first key is padding would be degenerate, so `valid[b][0]` must hold.
    pub fn causal_with_padding(valid: &[Vec<bool>]) -> Result<Self> {
        let batch = valid.len();
        let len = valid.first().map_or(0, |v| v.len());
        let mut allow = Vec::with_capacity(batch * len * len);
        for row in valid {
            if row.len() != len {
                return Err(TensorError::dim("attn_mask", "ragged padding mask"));
            }
            for i in 0..len {
                for j in 0..len {
                    allow.push(j <= i && row[j]);
                }
            }
        }
        AttnMask::new(batch, len, len, allow)
    }

    /// Lower-triangular (inclusive) causal mask.
    pub fn causal(batch: usize, len: usize) -> Self {
        let mut allow = Vec::with_capacity(batch * len * len);
        for _ in 0..batch {
            for i in 0..len {
                for j in 0..len {
                    allow.push(j <= i);
                }
            }
        }
        AttnMask { batch, lq: len, lk: len, allow: Arc::new(allow) }
    }

    fn row(&self, b: usize, i: usize) -> &[bool] {
        let off = (b * self.lq + i) * self.lk;
        &self.allow[off..off + self.lk]
    }
}

/// `softmax(q k^T / sqrt(dh) + mask) v` per batch and head.
///
/// Shapes: `q: [B, h, Lq, dh]`, `k, v: [B, h, Lk, dh]`, mask `[B, Lq, Lk]`.
pub fn scaled_dot_product_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&AttnMask>,
) -> Result<Tensor> {
    const OP: &str = "attention";
    if q.rank() != 4 || k.rank() != 4 || v.rank() != 4 {
        return Err(TensorError::dim(OP, "q, k, v must be rank 4"));
    }
    let (b, h, lq, dh) = (q.dim(0), q.dim(1), q.dim(2), q.dim(3));
    let lk = k.dim(2);
    if dh == 0 {
        return Err(TensorError::dim(OP, "head dim is 0"));
    }
    if k.shape() != [b, h, lk, dh] || v.shape() != [b, h, lk, dh] {
        return Err(TensorError::dim(
            OP,
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if lk == 0 {
        return Err(TensorError::DegenerateMask { op: OP, detail: "no keys".into() });
    }
    if let Some(m) = mask {
        if (m.batch, m.lq, m.lk) != (b, lq, lk) {
            return Err(TensorError::dim(
                OP,
                format!("mask [{}, {}, {}] vs attention [{}, {}, {}]", m.batch, m.lq, m.lk, b, lq, lk),
            ));
        }
        for bi in 0..b {
            for i in 0..lq {
                if !m.row(bi, i).iter().any(|&a| a) {
                    return Err(TensorError::DegenerateMask {
                        op: OP,
                        detail: format!("batch {} query {} attends to nothing", bi, i),
                    });
                }
            }
        }
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mask = mask.cloned();
    let blocks = b * h;
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let per_block = exec::map_range(blocks, |blk| {
        let bi = blk / h;
        let qb = &qd[blk * lq * dh..(blk + 1) * lq * dh];
        let kb = &kd[blk * lk * dh..(blk + 1) * lk * dh];
        let vb = &vd[blk * lk * dh..(blk + 1) * lk * dh];
        let mut s = vec![0.0; lq * lk];
        gemm_into(Mat::new(qb, lq, dh), Mat::t(kb, dh, lk), &mut s);
        let mut p = vec![0.0; lq * lk];
        for i in 0..lq {
            let srow = &mut s[i * lk..(i + 1) * lk];
            let prow = &mut p[i * lk..(i + 1) * lk];
            match &mask {
                Some(m) => {
                    let allow = m.row(bi, i);
                    let mx = srow
                        .iter()
                        .zip(allow)
                        .filter(|(_, &a)| a)
                        .map(|(v, _)| *v * scale)
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for j in 0..lk {
                        prow[j] = if allow[j] { (srow[j] * scale - mx).exp() } else { 0.0 };
                        z += prow[j];
                    }
                    prow.iter_mut().for_each(|x| *x /= z);
                }
                None => {
                    srow.iter_mut().for_each(|x| *x *= scale);
                    softmax_row(srow, prow);
                }
            }
        }
        let mut o = vec![0.0; lq * dh];
        gemm_into(Mat::new(&p, lq, lk), Mat::new(vb, lk, dh), &mut o);
        (p, o)
    });
    let mut probs = Vec::with_capacity(blocks * lq * lk);
    let mut out = Vec::with_capacity(blocks * lq * dh);
    for (p, o) in per_block {
        probs.extend(p);
        out.extend(o);
    }
    let probs = Arc::new(probs);
    Ok(Tensor::from_op(
        OP,
        vec![b, h, lq, dh],
        out,
        vec![q.clone(), k.clone(), v.clone()],
        Box::new(move |out, g| {
            let ins = out.inputs();
            let (q, k, v) = (&ins[0], &ins[1], &ins[2]);
            let (qd, kd, vd) = (q.data(), k.data(), v.data());
            let need = (q.tracks_grad(), k.tracks_grad(), v.tracks_grad());
            let per_block = exec::map_range(blocks, |blk| {
                let qb = &qd[blk * lq * dh..(blk + 1) * lq * dh];
                let kb = &kd[blk * lk * dh..(blk + 1) * lk * dh];
                let vb = &vd[blk * lk * dh..(blk + 1) * lk * dh];
                let gb = &g[blk * lq * dh..(blk + 1) * lq * dh];
                let p = &probs[blk * lq * lk..(blk + 1) * lq * lk];
                let dv = need.2.then(|| {
                    let mut dv = vec![0.0; lk * dh];
                    gemm_into(Mat::t(p, lk, lq), Mat::new(gb, lq, dh), &mut dv);
                    dv
                });
                let (dq, dk) = if need.0 || need.1 {
                    let mut dp = vec![0.0; lq * lk];
                    gemm_into(Mat::new(gb, lq, dh), Mat::t(vb, dh, lk), &mut dp);
                    for i in 0..lq {
                        let pr = &p[i * lk..(i + 1) * lk];
                        let dr = &mut dp[i * lk..(i + 1) * lk];
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..lk {
                            dr[j] = pr[j] * (dr[j] - dot) * scale;
                        }
                    }
                    let dq = need.0.then(|| {
                        let mut dq = vec![0.0; lq * dh];
                        gemm_into(Mat::new(&dp, lq, lk), Mat::new(kb, lk, dh), &mut dq);
                        dq
                    });
                    let dk = need.1.then(|| {
                        let mut dk = vec![0.0; lk * dh];
                        gemm_into(Mat::t(&dp, lk, lq), Mat::new(qb, lq, dh), &mut dk);
                        dk
                    });
                    (dq, dk)
                } else {
                    (None, None)
                };
                (dq, dk, dv)
            });
            let mut gq = need.0.then(|| Vec::with_capacity(qd.len()));
            let mut gk = need.1.then(|| Vec::with_capacity(kd.len()));
            let mut gv = need.2.then(|| Vec::with_capacity(vd.len()));
            for (dq, dk, dv) in per_block {
                if let (Some(acc), Some(x)) = (gq.as_mut(), dq) {
                    acc.extend(x);
                }
                if let (Some(acc), Some(x)) = (gk.as_mut(), dk) {
                    acc.extend(x);
                }
                if let (Some(acc), Some(x)) = (gv.as_mut(), dv) {
                    acc.extend(x);
                }
            }
            vec![gq, gk, gv]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1000.0]).unwrap();
        let y = softmax(&x).unwrap();
        for row in y.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        let ls = log_softmax(&x).unwrap();
        for (a, b) in ls.data().iter().zip(y.data()) {
            assert!((a.exp() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes() {
        let x = Tensor::new(&[2, 4], vec![1.0, 2.0, 3.0, 10.0, -3.0, 0.5, 0.25, 8.0]).unwrap();
        let y = layer_norm(&x, None, None, 1e-12).unwrap();
        for row in y.data().chunks(4) {
            let mu = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 4.0;
            assert!(mu.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn all_masked_row_is_degenerate() {
        let q = Tensor::zeros(&[1, 1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 2, 2]);
        let mask = AttnMask::new(1, 2, 2, vec![true, false, false, false]).unwrap();
        let err = scaled_dot_product_attention(&q, &k, &k, Some(&mask)).unwrap_err();
        assert!(matches!(err, TensorError::DegenerateMask { .. }));
    }
}
