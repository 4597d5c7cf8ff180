use std::sync::Arc;

use super::reduce::split_axis;
use crate::error::{Result, TensorError};
use crate::tensor::{numel, strides, Tensor};

/// Marks an output slot that is zero-filled rather than copied.
pub const ZERO_SLOT: usize = usize::MAX;

pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if numel(shape) != x.numel() {
        return Err(TensorError::dim(
            "reshape",
            format!("{:?} -> {:?} changes element count", x.shape(), shape),
        ));
    }
    Ok(Tensor::from_op(
        "reshape",
        shape.to_vec(),
        x.to_vec(),
        vec![x.clone()],
        Box::new(|_, g| vec![Some(g.to_vec())]),
    ))
}

/// `out[i] = x[map[i]]`, or 0 where `map[i] == ZERO_SLOT`. The backward pass
/// scatter-adds, so repeated sources are allowed.
pub fn gather_map(x: &Tensor, out_shape: &[usize], map: Arc<Vec<usize>>) -> Result<Tensor> {
    if map.len() != numel(out_shape) {
        return Err(TensorError::dim(
            "gather_map",
            format!("map has {} slots for shape {:?}", map.len(), out_shape),
        ));
    }
    let n = x.numel();
    if let Some(bad) = map.iter().find(|&&m| m != ZERO_SLOT && m >= n) {
        return Err(TensorError::dim(
            "gather_map",
            format!("source index {} out of range {}", bad, n),
        ));
    }
    let d = x.data();
    let out = map
        .iter()
        .map(|&m| if m == ZERO_SLOT { 0.0 } else { d[m] })
        .collect();
    Ok(Tensor::from_op(
        "gather_map",
        out_shape.to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |_, g| {
            let mut gx = vec![0.0; n];
            for (&m, &gv) in map.iter().zip(g) {
                if m != ZERO_SLOT {
                    gx[m] += gv;
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let r = x.rank();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return Err(TensorError::dim(
            "permute",
            format!("{:?} is not a permutation of rank {}", perm, r),
        ));
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.dim(p)).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = x.numel();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; r];
    for _ in 0..total {
        map.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
        for ax in (0..r).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    gather_map(x, &out_shape, Arc::new(map))
}

/// Swaps two axes.
pub fn transpose(x: &Tensor, a: usize, b: usize) -> Result<Tensor> {
    let mut perm: Vec<usize> = (0..x.rank()).collect();
    if a >= perm.len() || b >= perm.len() {
        return Err(TensorError::dim("transpose", "axis out of range"));
    }
    perm.swap(a, b);
    permute(x, &perm)
}

/// Slice `[start, start + len)` along `axis`.
pub fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let (outer, ext, inner) = split_axis("narrow", x.shape(), axis)?;
    if start + len > ext {
        return Err(TensorError::dim(
            "narrow",
            format!("range {}..{} exceeds extent {}", start, start + len, ext),
        ));
    }
    let d = x.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        out.extend_from_slice(&d[(o * ext + start) * inner..(o * ext + start + len) * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_op(
        "narrow",
        shape,
        out,
        vec![x.clone()],
        Box::new(move |_, g| {
            let mut gx = vec![0.0; outer * ext * inner];
            for o in 0..outer {
                gx[(o * ext + start) * inner..(o * ext + start + len) * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }),
    ))
}

/// Concatenates along `axis`; all other dims must agree.
pub fn concat(xs: &[Tensor], axis: usize) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| TensorError::dim("concat", "no inputs"))?;
    let (outer, _, inner) = split_axis("concat", first.shape(), axis)?;
    let mut exts = Vec::with_capacity(xs.len());
    for x in xs {
        let ok = x.rank() == first.rank()
            && x.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(TensorError::dim(
                "concat",
                format!("{:?} incompatible with {:?} on axis {}", x.shape(), first.shape(), axis),
            ));
        }
        exts.push(x.dim(axis));
    }
    let total_ext: usize = exts.iter().sum();
    let mut out = Vec::with_capacity(outer * total_ext * inner);
    for o in 0..outer {
        for (x, &e) in xs.iter().zip(&exts) {
            out.extend_from_slice(&x.data()[o * e * inner..(o + 1) * e * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total_ext;
    Ok(Tensor::from_op(
        "concat",
        shape,
        out,
        xs.to_vec(),
        Box::new(move |out, g| {
            let ins = out.inputs();
            let mut grads: Vec<Option<Vec<f64>>> = ins
                .iter()
                .zip(&exts)
                .map(|(x, &e)| x.tracks_grad().then(|| Vec::with_capacity(outer * e * inner)))
                .collect();
            for o in 0..outer {
                let mut off = o * total_ext * inner;
                for (gi, &e) in grads.iter_mut().zip(&exts) {
                    if let Some(gi) = gi {
                        gi.extend_from_slice(&g[off..off + e * inner]);
                    }
                    off += e * inner;
                }
            }
            grads
        }),
    ))
}

/// Rows of a `[V, d]` table, giving `[ids.len(), d]`.
pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    if table.rank() != 2 {
        return Err(TensorError::dim("embedding", "table must be [V, d]"));
    }
    let (v, d) = (table.dim(0), table.dim(1));
    if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
        return Err(TensorError::Input(format!("token id {} out of vocabulary {}", bad, v)));
    }
    let map: Vec<usize> = ids
        .iter()
        .flat_map(|&i| (0..d).map(move |j| i * d + j))
        .collect();
    gather_map(table, &[ids.len(), d], Arc::new(map))
}

/// Picks `x[.., idx[r]]` from each row of the last axis, giving shape `x.shape[..-1]`.
pub fn pick_last(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let r = x.rank();
    if r == 0 {
        return Err(TensorError::dim("pick_last", "rank 0"));
    }
    let width = x.dim(r - 1);
    let rows = x.numel() / width.max(1);
    if idx.len() != rows {
        return Err(TensorError::dim(
            "pick_last",
            format!("{} indices for {} rows", idx.len(), rows),
        ));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= width) {
        return Err(TensorError::Input(format!("class index {} out of range {}", bad, width)));
    }
    let map: Vec<usize> = idx.iter().enumerate().map(|(row, &i)| row * width + i).collect();
    gather_map(x, &x.shape()[..r - 1], Arc::new(map))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes() {
        let x = Tensor::new(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        let t = transpose(&x, 0, 1).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert!(permute(&x, &[0, 0]).is_err());
    }

    #[test]
    fn concat_and_narrow_invert() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![5.0, 6.0]).unwrap();
        let c = concat(&[a.clone(), b], 1).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(narrow(&c, 1, 0, 2).unwrap().data(), a.data());
        assert!(narrow(&c, 1, 2, 2).is_err());
    }

    #[test]
    fn embedding_rejects_oov() {
        let t = Tensor::zeros(&[4, 2]);
        assert!(embedding(&t, &[0, 3]).is_ok());
        assert!(matches!(embedding(&t, &[4]), Err(TensorError::Input(_))));
    }
}
