//! Dense kernels behind the denoiser and the perceptual extractor.
//!
//! Activations are stored pixel-major (`[batch][y][x][channel]`), which turns a
//! 3×3 convolution into an im2col copy followed by one matrix product.

/// `c = op(a)·op(b) + beta·c` for row-major matrices, `op(a)` being `m×k` and
/// `op(b)` being `k×n`. A transposed operand is stored as its untransposed form.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every index reached through the
    // strides lies inside the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a batch of pixel-major images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn pixels(&self) -> usize {
        self.batch * self.height * self.width
    }
}

/// 3×3 patches with zero padding: `cols[p][(ky·3 + kx)·ch + c]`.
pub fn im2col3(input: &[f64], grid: Grid, ch: usize, cols: &mut Vec<f64>) {
    im2col3_strided(input, grid, ch, 1, cols);
}

/// [`im2col3`] sampled every `stride` pixels; the output grid is
/// `ceil(h/stride) × ceil(w/stride)`.
pub fn im2col3_strided(input: &[f64], grid: Grid, ch: usize, stride: usize, cols: &mut Vec<f64>) {
    let Grid { batch, height: h, width: w } = grid;
    debug_assert_eq!(input.len(), grid.pixels() * ch);
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let row = 9 * ch;
    cols.clear();
    cols.resize(batch * oh * ow * row, 0.0);
    for n in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, x) = (oy * stride, ox * stride);
                let p = (n * oh + oy) * ow + ox;
                let dst = &mut cols[p * row..(p + 1) * row];
                for ky in 0..3 {
                    let yy = y as isize + ky as isize - 1;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let xx = x as isize + kx as isize - 1;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let src = ((n * h + yy as usize) * w + xx as usize) * ch;
                        let off = (ky * 3 + kx) * ch;
                        dst[off..off + ch].copy_from_slice(&input[src..src + ch]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: scatters patch gradients back onto pixels.
pub fn col2im3(cols: &[f64], grid: Grid, ch: usize, out: &mut [f64]) {
    let Grid { batch, height: h, width: w } = grid;
    let row = 9 * ch;
    out.iter_mut().for_each(|v| *v = 0.0);
    for n in 0..batch {
        for y in 0..h {
            for x in 0..w {
                let p = (n * h + y) * w + x;
                let src = &cols[p * row..(p + 1) * row];
                for ky in 0..3 {
                    let yy = y as isize + ky as isize - 1;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let xx = x as isize + kx as isize - 1;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let dst = ((n * h + yy as usize) * w + xx as usize) * ch;
                        let off = (ky * 3 + kx) * ch;
                        for c in 0..ch {
                            out[dst + c] += src[off + c];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Adds `bias[c]` to every row of a `[rows][bias.len()]` matrix.
pub fn add_row_bias(mat: &mut [f64], bias: &[f64]) {
    for row in mat.chunks_exact_mut(bias.len()) {
        row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
}

/// Column sums of a `[rows][cols]` matrix, accumulated into `acc`.
pub fn accumulate_col_sums(mat: &[f64], acc: &mut [f64]) {
    for row in mat.chunks_exact(acc.len()) {
        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
}
