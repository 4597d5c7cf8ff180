//! Image layout ops on `[B, C, H, W]` tensors.

use std::sync::Arc;

use super::elementwise::add_trailing;
use super::layout::{gather_map, permute, reshape, ZERO_SLOT};
use super::matmul::matmul;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

fn dims4(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(TensorError::dim(op, format!("expected [B, C, H, W], got {:?}", x.shape())));
    }
    Ok((x.dim(0), x.dim(1), x.dim(2), x.dim(3)))
}

/// Source index of every element of the patch layout `[B, N, C*p*p]`, where
/// patches are ordered row-major over the `(H/p, W/p)` grid and each patch
/// vector is ordered `(c, dy, dx)`.
fn patch_map(b: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let (gh, gw) = (h / p, w / p);
    let mut map = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for ci in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            let (y, x) = (py * p + dy, px * p + dx);
                            map.push(((bi * c + ci) * h + y) * w + x);
                        }
                    }
                }
            }
        }
    }
    map
}

fn check_patch(op: &'static str, h: usize, w: usize, p: usize) -> Result<()> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(TensorError::dim(op, format!("{}x{} image is not divisible by patch {}", h, w, p)));
    }
    Ok(())
}

/// `[B, C, H, W]` to `[B, (H/p)(W/p), C*p*p]`.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let (b, c, h, w) = dims4("patchify", x)?;
    check_patch("patchify", h, w, p)?;
    let map = patch_map(b, c, h, w, p);
    gather_map(x, &[b, (h / p) * (w / p), c * p * p], Arc::new(map))
}

/// Inverse of [`patchify`]: `[B, N, C*p*p]` back to `[B, C, H, W]`.
pub fn unpatchify(x: &Tensor, c: usize, h: usize, w: usize, p: usize) -> Result<Tensor> {
    check_patch("unpatchify", h, w, p)?;
    let n = (h / p) * (w / p);
    if x.rank() != 3 || x.dim(1) != n || x.dim(2) != c * p * p {
        return Err(TensorError::dim(
            "unpatchify",
            format!("{:?} is not [B, {}, {}]", x.shape(), n, c * p * p),
        ));
    }
    let b = x.dim(0);
    let fwd = patch_map(b, c, h, w, p);
    let mut inv = vec![0usize; fwd.len()];
    for (i, &src) in fwd.iter().enumerate() {
        inv[src] = i;
    }
    gather_map(x, &[b, c, h, w], Arc::new(inv))
}

/// `[B, C*r*r, h, w]` to `[B, C, h*r, w*r]`; an unbatched `[C*r*r, h, w]`
/// input gives `[C, h*r, w*r]`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    if x.rank() == 3 {
        let x4 = reshape(x, &[1, x.dim(0), x.dim(1), x.dim(2)])?;
        let y = pixel_shuffle(&x4, r)?;
        let s = y.shape()[1..].to_vec();
        return reshape(&y, &s);
    }
    let (b, cr, h, w) = dims4("pixel_shuffle", x)?;
    if r == 0 || cr % (r * r) != 0 {
        return Err(TensorError::dim(
            "pixel_shuffle",
            format!("{} channels not divisible by {}^2", cr, r),
        ));
    }
    let c = cr / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut map = Vec::with_capacity(x.numel());
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let ch = ci * r * r + (y % r) * r + xx % r;
                    map.push(((bi * cr + ch) * h + y / r) * w + xx / r);
                }
            }
        }
    }
    gather_map(x, &[b, c, oh, ow], Arc::new(map))
}

/// Inverse of [`pixel_shuffle`] (batched or unbatched).
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    if x.rank() == 3 {
        let x4 = reshape(x, &[1, x.dim(0), x.dim(1), x.dim(2)])?;
        let y = pixel_unshuffle(&x4, r)?;
        let s = y.shape()[1..].to_vec();
        return reshape(&y, &s);
    }
    let (b, c, oh, ow) = dims4("pixel_unshuffle", x)?;
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return Err(TensorError::dim("pixel_unshuffle", "size not divisible by factor"));
    }
    let (h, w) = (oh / r, ow / r);
    let cr = c * r * r;
    let mut map = Vec::with_capacity(x.numel());
    for bi in 0..b {
        for ch in 0..cr {
            let (ci, a, bb) = (ch / (r * r), (ch / r) % r, ch % r);
            for y in 0..h {
                for xx in 0..w {
                    map.push(((bi * c + ci) * oh + y * r + a) * ow + xx * r + bb);
                }
            }
        }
    }
    gather_map(x, &[b, cr, h, w], Arc::new(map))
}

/// Zero-padded `k x k` neighbourhoods (stride 1, "same" padding, odd `k`):
/// `[B, C, H, W]` to `[B, H*W, C*k*k]`.
pub fn im2col(x: &Tensor, k: usize) -> Result<Tensor> {
    let (b, c, h, w) = dims4("im2col", x)?;
    if k.is_multiple_of(2) {
        return Err(TensorError::dim("im2col", format!("kernel {} must be odd", k)));
    }
    let pad = (k / 2) as isize;
    let mut map = Vec::with_capacity(b * h * w * c * k * k);
    for bi in 0..b {
        for y in 0..h as isize {
            for xx in 0..w as isize {
                for ci in 0..c {
                    for dy in 0..k as isize {
                        for dx in 0..k as isize {
                            let (sy, sx) = (y + dy - pad, xx + dx - pad);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                map.push(ZERO_SLOT);
                            } else {
                                map.push(((bi * c + ci) * h + sy as usize) * w + sx as usize);
                            }
                        }
                    }
                }
            }
        }
    }
    gather_map(x, &[b, h * w, c * k * k], Arc::new(map))
}

/// Stride-1 "same" convolution. `weight: [C_in*k*k, C_out]`, `bias: [C_out]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, k: usize) -> Result<Tensor> {
    let (b, c, h, w) = dims4("conv2d", x)?;
    if weight.rank() != 2 || weight.dim(0) != c * k * k {
        return Err(TensorError::dim(
            "conv2d",
            format!("weight {:?} does not match {} inputs with kernel {}", weight.shape(), c, k),
        ));
    }
    let cout = weight.dim(1);
    let cols = im2col(x, k)?;
    let mut y = matmul(&cols, weight)?;
    if let Some(bias) = bias {
        y = add_trailing(&y, bias)?;
    }
    let y = permute(&y, &[0, 2, 1])?;
    reshape(&y, &[b, cout, h, w])
}
