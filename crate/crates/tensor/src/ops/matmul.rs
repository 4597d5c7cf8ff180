use crate::error::{Result, TensorError};
use crate::exec;
use crate::tensor::Tensor;

/// Row-major operand view: `rows x cols`, optionally read transposed from a
/// `cols x rows` buffer.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Mat { data, rows, cols, trans: false }
    }

    /// View of the transpose of a `cols x rows` row-major buffer.
    pub fn t(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Mat { data, rows, cols, trans: true }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

const MIN_ROWS_PER_TASK: usize = 32;

/// `c (+)= a * b`, splitting output rows across workers.
pub(crate) fn gemm(a: Mat, b: Mat, c: &mut [f64], accumulate: bool) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    debug_assert_eq!(k, b.rows);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let rows_per_task = if exec::parallel_enabled() {
        MIN_ROWS_PER_TASK.max(m.div_ceil(4 * rayon_threads()))
    } else {
        m
    };
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { 1.0 } else { 0.0 };
    exec::for_each_chunk_mut(c, rows_per_task * n, |ci, chunk| {
        let r0 = ci * rows_per_task;
        let rows = chunk.len() / n;
        let a_off = r0 as isize * rsa;
        if rows * k * n <= SMALL_GEMM {
            gemm_small(a, a_off as usize, rows, b, chunk, accumulate);
            return;
        }
        // SAFETY: the strides describe in-bounds views of `a.data`/`b.data`
        // (checked by the shape logic of every caller) and `chunk` is an
        // exclusive `rows x n` row-major block.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.data.as_ptr().offset(a_off),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                beta,
                chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

fn rayon_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Matrix product over the last two dims.
///
/// * `a: [..., m, k]`, `b: [k, n]` gives `[..., m, n]` (shared right operand);
/// * `a: [batch..., m, k]`, `b: [batch..., k, n]` with identical batch dims.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(TensorError::dim("matmul", "operands need rank >= 2"));
    }
    let (ar, br) = (a.rank(), b.rank());
    let (m, k) = (a.dim(ar - 2), a.dim(ar - 1));
    let (kb, n) = (b.dim(br - 2), b.dim(br - 1));
    if k != kb {
        return Err(TensorError::dim(
            "matmul",
            format!("inner dims differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out_shape = a.shape()[..ar - 2].to_vec();
    out_shape.extend([m, n]);
    if br == 2 {
        let rows: usize = a.shape()[..ar - 1].iter().product();
        let mut out = vec![0.0; rows * n];
        gemm(Mat::new(a.data(), rows, k), Mat::new(b.data(), k, n), &mut out, false);
        return Ok(Tensor::from_op(
            "matmul",
            out_shape,
            out,
            vec![a.clone(), b.clone()],
            Box::new(move |out, g| {
                let ins = out.inputs();
                let (a, b) = (&ins[0], &ins[1]);
                let ga = a.tracks_grad().then(|| {
                    let mut ga = vec![0.0; rows * k];
                    gemm(Mat::new(g, rows, n), Mat::t(b.data(), n, k), &mut ga, false);
                    ga
                });
                let gb = b.tracks_grad().then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm(Mat::t(a.data(), k, rows), Mat::new(g, rows, n), &mut gb, false);
                    gb
                });
                vec![ga, gb]
            }),
        ));
    }
    if a.shape()[..ar - 2] != b.shape()[..br - 2] {
        return Err(TensorError::dim(
            "matmul",
            format!("batch dims differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let batch: usize = a.shape()[..ar - 2].iter().product();
    let out = batched_raw(batch, a.data(), m, k, false, b.data(), n, false);
    Ok(Tensor::from_op(
        "matmul_batched",
        out_shape,
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |out, g| {
            let ins = out.inputs();
            let (a, b) = (&ins[0], &ins[1]);
            // dA = dC B^T, dB = A^T dC
            let ga = a
                .tracks_grad()
                .then(|| batched_raw(batch, g, m, n, false, b.data(), k, true));
            let gb = b
                .tracks_grad()
                .then(|| batched_raw(batch, a.data(), k, m, true, g, n, false));
            vec![ga, gb]
        }),
    ))
}

/// Per-batch `op(A) op(B)` where `op(A)` is `m x k` and `op(B)` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn batched_raw(
    batch: usize,
    a: &[f64],
    m: usize,
    k: usize,
    a_trans: bool,
    b: &[f64],
    n: usize,
    b_trans: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    if m * n == 0 {
        return out;
    }
    exec::for_each_chunk_mut(&mut out, m * n, |bi, c| {
        let a_blk = &a[bi * m * k..(bi + 1) * m * k];
        let b_blk = &b[bi * k * n..(bi + 1) * k * n];
        let am = if a_trans { Mat::t(a_blk, m, k) } else { Mat::new(a_blk, m, k) };
        let bm = if b_trans { Mat::t(b_blk, k, n) } else { Mat::new(b_blk, k, n) };
        gemm_serial(am, bm, c);
    });
    out
}

/// Below this many multiply-adds the packing done by `dgemm` costs more
/// than it saves.
const SMALL_GEMM: usize = 16 * 1024;

/// Direct triple loop for small products. `a_off` is the element offset of
/// the first row of `a` to use.
fn gemm_small(a: Mat, a_off: usize, rows: usize, b: Mat, c: &mut [f64], accumulate: bool) {
    let (k, n) = (a.cols, b.cols);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let (rsa, csa, rsb, csb) = (rsa as usize, csa as usize, rsb as usize, csb as usize);
    if !accumulate {
        c.iter_mut().for_each(|v| *v = 0.0);
    }
    for i in 0..rows {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[a_off + i * rsa + p * csa];
            if csb == 1 {
                let brow = &b.data[p * rsb..p * rsb + n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += aip * bv;
                }
            } else {
                for (j, cv) in crow.iter_mut().enumerate() {
                    *cv += aip * b.data[p * rsb + j * csb];
                }
            }
        }
    }
}

fn gemm_serial(a: Mat, b: Mat, c: &mut [f64]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    if m * k * n <= SMALL_GEMM {
        gemm_small(a, 0, m, b, c, false);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: see `gemm`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Serial `a * b` on plain slices, used by fused kernels.
pub(crate) fn gemm_into(a: Mat, b: Mat, c: &mut [f64]) {
    gemm_serial(a, b, c)
}
