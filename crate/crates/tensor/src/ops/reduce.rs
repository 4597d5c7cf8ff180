use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub fn sum_all(x: &Tensor) -> Tensor {
    let s: f64 = x.data().iter().sum();
    let n = x.numel();
    Tensor::from_op(
        "sum_all",
        vec![],
        vec![s],
        vec![x.clone()],
        Box::new(move |_, g| vec![Some(vec![g[0]; n])]),
    )
}

pub fn mean_all(x: &Tensor) -> Tensor {
    let n = x.numel();
    let s: f64 = x.data().iter().sum::<f64>() / n as f64;
    Tensor::from_op(
        "mean_all",
        vec![],
        vec![s],
        vec![x.clone()],
        Box::new(move |_, g| vec![Some(vec![g[0] / n as f64; n])]),
    )
}

/// `(outer, extent, inner)` split of `shape` around `axis`.
pub(crate) fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::dim(
            op,
            format!("axis {} out of range for shape {:?}", axis, shape),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn removed(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

/// Sum over `axis`, removing it.
pub fn sum_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    reduce_linear("sum_axis", x, axis, 1.0)
}

/// Mean over `axis`, removing it.
pub fn mean_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (_, ext, _) = split_axis("mean_axis", x.shape(), axis)?;
    if ext == 0 {
        return Err(TensorError::dim("mean_axis", "empty axis"));
    }
    reduce_linear("mean_axis", x, axis, 1.0 / ext as f64)
}

fn reduce_linear(op: &'static str, x: &Tensor, axis: usize, w: f64) -> Result<Tensor> {
    let (outer, ext, inner) = split_axis(op, x.shape(), axis)?;
    let d = x.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for e in 0..ext {
            let src = &d[(o * ext + e) * inner..(o * ext + e + 1) * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
    }
    if w != 1.0 {
        out.iter_mut().for_each(|v| *v *= w);
    }
    Ok(Tensor::from_op(
        op,
        removed(x.shape(), axis),
        out,
        vec![x.clone()],
        Box::new(move |_, g| {
            let mut gx = vec![0.0; outer * ext * inner];
            for o in 0..outer {
                for e in 0..ext {
                    let dst = &mut gx[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                    dst.iter_mut()
                        .zip(&g[o * inner..(o + 1) * inner])
                        .for_each(|(a, b)| *a = b * w);
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Max over `axis`, removing it. The gradient routes to the first maximum.
pub fn max_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, ext, inner) = split_axis("max_axis", x.shape(), axis)?;
    if ext == 0 {
        return Err(TensorError::dim("max_axis", "empty axis"));
    }
    let d = x.data();
    let mut out = vec![f64::NEG_INFINITY; outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for e in 0..ext {
            for i in 0..inner {
                let v = d[(o * ext + e) * inner + i];
                let slot = o * inner + i;
                if v > out[slot] {
                    out[slot] = v;
                    arg[slot] = e;
                }
            }
        }
    }
    Ok(Tensor::from_op(
        "max_axis",
        removed(x.shape(), axis),
        out,
        vec![x.clone()],
        Box::new(move |_, g| {
            let mut gx = vec![0.0; outer * ext * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let slot = o * inner + i;
                    gx[(o * ext + arg[slot]) * inner + i] = g[slot];
                }
            }
            vec![Some(gx)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_reductions() {
        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(sum_axis(&x, 0).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(sum_axis(&x, 1).unwrap().data(), &[6.0, 15.0]);
        assert_eq!(mean_axis(&x, 1).unwrap().data(), &[2.0, 5.0]);
        assert_eq!(max_axis(&x, 0).unwrap().data(), &[4.0, 5.0, 6.0]);
        assert!(sum_axis(&x, 2).is_err());
    }
}
