use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::dim(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Elementwise map with derivative `dfdx(x, y)`.
fn unary(
    name: &'static str,
    x: &Tensor,
    f: impl Fn(f64) -> f64,
    dfdx: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(
        name,
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |out, g| {
            let x = &out.inputs()[0];
            let gx = x
                .data()
                .iter()
                .zip(out.data())
                .zip(g)
                .map(|((&xv, &yv), &gv)| gv * dfdx(xv, yv))
                .collect();
            vec![Some(gx)]
        }),
    )
}

pub fn neg(x: &Tensor) -> Tensor {
    unary("neg", x, |v| -v, |_, _| -1.0)
}

pub fn exp(x: &Tensor) -> Tensor {
    unary("exp", x, f64::exp, |_, y| y)
}

pub fn ln(x: &Tensor) -> Tensor {
    unary("ln", x, f64::ln, |x, _| 1.0 / x)
}

pub fn sqrt(x: &Tensor) -> Tensor {
    unary("sqrt", x, f64::sqrt, |_, y| 0.5 / y)
}

pub fn square(x: &Tensor) -> Tensor {
    unary("square", x, |v| v * v, |x, _| 2.0 * x)
}

/// Subgradient 0 at the origin.
pub fn abs(x: &Tensor) -> Tensor {
    unary("abs", x, f64::abs, |x, _| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

pub fn recip(x: &Tensor) -> Tensor {
    unary("recip", x, |v| 1.0 / v, |_, y| -y * y)
}

pub fn scale(x: &Tensor, c: f64) -> Tensor {
    unary("scale", x, move |v| v * c, move |_, _| c)
}

pub fn add_scalar(x: &Tensor, c: f64) -> Tensor {
    unary("add_scalar", x, move |v| v + c, |_, _| 1.0)
}

/// Zero gradient where the input lies outside `[lo, hi]`.
pub fn clamp(x: &Tensor, lo: f64, hi: f64) -> Tensor {
    unary(
        "clamp",
        x,
        move |v| v.clamp(lo, hi),
        move |x, _| if x < lo || x > hi { 0.0 } else { 1.0 },
    )
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh approximation of GELU.
/// `tanh` through a single `exp`, noticeably cheaper than libm's `tanh`
/// and accurate to a few ulp.
#[inline]
fn fast_tanh(x: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

pub fn gelu(x: &Tensor) -> Tensor {
    unary(
        "gelu",
        x,
        |v| 0.5 * v * (1.0 + fast_tanh(GELU_C * (v + 0.044715 * v * v * v))),
        |v, _| {
            let inner = GELU_C * (v + 0.044715 * v * v * v);
            let t = fast_tanh(inner);
            let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
            0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner
        },
    )
}

fn binary(
    name: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    grads: impl Fn(f64, f64, f64) -> (f64, f64) + Send + Sync + 'static,
) -> Result<Tensor> {
    same_shape(name, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_op(
        name,
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |out, g| {
            let ins = out.inputs();
            let (a, b) = (&ins[0], &ins[1]);
            let mut ga = a.tracks_grad().then(|| vec![0.0; g.len()]);
            let mut gb = b.tracks_grad().then(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                let (da, db) = grads(a.data()[i], b.data()[i], g[i]);
                if let Some(ga) = ga.as_mut() {
                    ga[i] = da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[i] = db;
                }
            }
            vec![ga, gb]
        }),
    ))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("add", a, b, |x, y| x + y, |_, _, g| (g, g))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("sub", a, b, |x, y| x - y, |_, _, g| (g, -g))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("mul", a, b, |x, y| x * y, |x, y, g| (g * y, g * x))
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("div", a, b, |x, y| x / y, |x, y, g| (g / y, -g * x / (y * y)))
}

/// Checks that `b`'s shape equals the trailing dims of `a` and returns the
/// number of times `b` repeats.
fn trailing(op: &'static str, a: &Tensor, b: &Tensor) -> Result<usize> {
    let (ash, bsh) = (a.shape(), b.shape());
    if bsh.len() > ash.len() || ash[ash.len() - bsh.len()..] != *bsh {
        return Err(TensorError::dim(
            op,
            format!("{:?} is not a trailing sub-shape of {:?}", bsh, ash),
        ));
    }
    Ok(a.numel() / b.numel().max(1))
}

/// `a + b` where `b`'s shape equals the trailing dims of `a`.
pub fn add_trailing(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    trailing("add_trailing", a, b)?;
    let n = b.numel();
    let bd = b.data();
    let data = a
        .data()
        .chunks(n)
        .flat_map(|row| row.iter().zip(bd).map(|(x, y)| x + y))
        .collect();
    Ok(Tensor::from_op(
        "add_trailing",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |out, g| {
            let ins = out.inputs();
            let ga = ins[0].tracks_grad().then(|| g.to_vec());
            let gb = ins[1].tracks_grad().then(|| {
                let mut acc = vec![0.0; n];
                for row in g.chunks(n) {
                    acc.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                }
                acc
            });
            vec![ga, gb]
        }),
    ))
}

/// `a * b` where `b`'s shape equals the trailing dims of `a`.
pub fn mul_trailing(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    trailing("mul_trailing", a, b)?;
    let n = b.numel();
    let bd = b.data();
    let data = a
        .data()
        .chunks(n)
        .flat_map(|row| row.iter().zip(bd).map(|(x, y)| x * y))
        .collect();
    Ok(Tensor::from_op(
        "mul_trailing",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |out, g| {
            let ins = out.inputs();
            let (a, b) = (&ins[0], &ins[1]);
            let ga = a.tracks_grad().then(|| {
                g.chunks(n)
                    .flat_map(|row| row.iter().zip(b.data()).map(|(x, y)| x * y))
                    .collect()
            });
            let gb = b.tracks_grad().then(|| {
                let mut acc = vec![0.0; n];
                for (grow, arow) in g.chunks(n).zip(a.data().chunks(n)) {
                    for j in 0..n {
                        acc[j] += grow[j] * arow[j];
                    }
                }
                acc
            });
            vec![ga, gb]
        }),
    ))
}

/// `a * b` where `b`'s shape equals the leading dims of `a` (each entry of
/// `b` scales one contiguous block of `a`).
pub fn mul_leading(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ash, bsh) = (a.shape(), b.shape());
    if bsh.len() > ash.len() || ash[..bsh.len()] != *bsh {
        return Err(TensorError::dim(
            "mul_leading",
            format!("{:?} is not a leading sub-shape of {:?}", bsh, ash),
        ));
    }
    let blk = a.numel() / b.numel().max(1);
    let bd = b.data();
    let data = a
        .data()
        .chunks(blk.max(1))
        .zip(bd)
        .flat_map(|(row, &s)| row.iter().map(move |x| x * s))
        .collect();
    Ok(Tensor::from_op(
        "mul_leading",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |out, g| {
            let ins = out.inputs();
            let (a, b) = (&ins[0], &ins[1]);
            let ga = a.tracks_grad().then(|| {
                g.chunks(blk.max(1))
                    .zip(b.data())
                    .flat_map(|(row, &s)| row.iter().map(move |x| x * s))
                    .collect()
            });
            let gb = b.tracks_grad().then(|| {
                g.chunks(blk.max(1))
                    .zip(a.data().chunks(blk.max(1)))
                    .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                    .collect()
            });
            vec![ga, gb]
        }),
    ))
}

/// Multiplies by a constant mask/weight of the same shape (no grad to `w`).
pub fn mul_const(a: &Tensor, w: Arc<Vec<f64>>) -> Result<Tensor> {
    if w.len() != a.numel() {
        return Err(TensorError::dim(
            "mul_const",
            format!("weights have {} values, tensor {}", w.len(), a.numel()),
        ));
    }
    let data = a.data().iter().zip(w.iter()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_op(
        "mul_const",
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |_, g| vec![Some(g.iter().zip(w.iter()).map(|(x, y)| x * y).collect())]),
    ))
}

/// Multiplies every element by the single value held in `s`.
pub fn mul_scalar_tensor(a: &Tensor, s: &Tensor) -> Result<Tensor> {
    if s.numel() != 1 {
        return Err(TensorError::dim("mul_scalar_tensor", "scale must have one element"));
    }
    let c = s.item();
    let data = a.data().iter().map(|x| x * c).collect();
    Ok(Tensor::from_op(
        "mul_scalar_tensor",
        a.shape().to_vec(),
        data,
        vec![a.clone(), s.clone()],
        Box::new(move |out, g| {
            let ins = out.inputs();
            let c = ins[1].item();
            let ga = ins[0].tracks_grad().then(|| g.iter().map(|x| x * c).collect());
            let gs = ins[1].tracks_grad().then(|| {
                vec![g.iter().zip(ins[0].data()).map(|(x, y)| x * y).sum()]
            });
            vec![ga, gs]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_shapes_checked() {
        let a = Tensor::zeros(&[2, 3, 4]);
        assert!(add_trailing(&a, &Tensor::zeros(&[4])).is_ok());
        assert!(add_trailing(&a, &Tensor::zeros(&[3, 4])).is_ok());
        assert!(add_trailing(&a, &Tensor::zeros(&[3])).is_err());
        assert!(add(&a, &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn product_rule() {
        let a = Tensor::new(&[2], vec![2.0, 3.0]).unwrap().requires_grad();
        let b = Tensor::new(&[2], vec![5.0, 7.0]).unwrap().requires_grad();
        let y = crate::ops::sum_all(&mul(&a, &b).unwrap());
        y.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![5.0, 7.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0, 3.0]);
    }
}
