use super::Real;

/// Shape parameters of a square-kernel 2-D convolution over one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    /// Output indices `o` whose source `o * stride + k - pad` lands in `[0, len)`.
    #[inline]
    fn valid_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > k { (self.pad - k).div_ceil(s) } else { 0 };
        let hi_src = len + self.pad;
        if hi_src <= k {
            return (0, 0);
        }
        let hi = ((hi_src - k - 1) / s + 1).min(out_len);
        (lo.min(hi), hi)
    }
}

/// `C (m x n, row-major) = A B + beta C`; `a` and `b` are addressed through
/// `(row stride, column stride)` so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len());
        assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    }
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

impl ConvGeometry {
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Unfold input patches into a `(C k k) x (OH OW)` matrix, zeros where the
/// kernel overhangs the border.
fn im2col<T: Real>(g: &ConvGeometry, input: &[T], col: &mut Vec<T>) {
    let (h, w) = (g.in_h, g.in_w);
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let p = oh * ow;
    col.clear();
    col.resize(g.col_rows() * p, T::zero());
    for ic in 0..g.in_channels {
        let src = &input[ic * h * w..(ic + 1) * h * w];
        for ky in 0..k {
            let (oy0, oy1) = g.valid_range(ky, h, oh);
            for kx in 0..k {
                let (ox0, ox1) = g.valid_range(kx, w, ow);
                let row = &mut col[((ic * k + ky) * k + kx) * p..((ic * k + ky) * k + kx + 1) * p];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut row[oy * ow + ox0..oy * ow + ox1];
                    let s = &src[iy * w..(iy + 1) * w];
                    if g.stride == 1 {
                        let ix0 = ox0 + kx - g.pad;
                        dst.copy_from_slice(&s[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for (n, d) in dst.iter_mut().enumerate() {
                            *d = s[(ox0 + n) * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a column matrix back onto the input grid.
fn col2im_add<T: Real>(g: &ConvGeometry, col: &[T], grad_in: &mut [T]) {
    let (h, w) = (g.in_h, g.in_w);
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let p = oh * ow;
    for ic in 0..g.in_channels {
        let dst = &mut grad_in[ic * h * w..(ic + 1) * h * w];
        for ky in 0..k {
            let (oy0, oy1) = g.valid_range(ky, h, oh);
            for kx in 0..k {
                let (ox0, ox1) = g.valid_range(kx, w, ow);
                let row = &col[((ic * k + ky) * k + kx) * p..((ic * k + ky) * k + kx + 1) * p];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &row[oy * ow + ox0..oy * ow + ox1];
                    let d = &mut dst[iy * w..(iy + 1) * w];
                    if g.stride == 1 {
                        let ix0 = ox0 + kx - g.pad;
                        for (d, &s) in d[ix0..ix0 + src.len()].iter_mut().zip(src) {
                            *d += s;
                        }
                    } else {
                        for (n, &s) in src.iter().enumerate() {
                            d[(ox0 + n) * g.stride + kx - g.pad] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Convolution as `out = W col(x) + b`.
pub fn conv2d_forward<T: Real>(g: &ConvGeometry, input: &[T], weight: &[T], bias: &[T], out: &mut [T]) {
    let p = g.out_h() * g.out_w();
    assert_eq!(input.len(), g.in_channels * g.in_h * g.in_w);
    assert_eq!(weight.len(), g.weight_len());
    assert_eq!(out.len(), g.out_channels * p);
    for (oc, plane) in out.chunks_exact_mut(p).enumerate() {
        plane.fill(bias[oc]);
    }
    let cr = g.col_rows();
    let mut scratch = Vec::new();
    let col: &[T] = if g.is_pointwise() {
        input
    } else {
        im2col(g, input, &mut scratch);
        &scratch
    };
    matmul(g.out_channels, cr, p, weight, (cr, 1), col, (p, 1), T::one(), out);
}

/// Accumulates gradients of a convolution into `grad_w`, `grad_b` and, when
/// given, `grad_in`.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_in: Option<&mut [T]>,
    grad_w: &mut [T],
    grad_b: &mut [T],
) {
    let p = g.out_h() * g.out_w();
    let cr = g.col_rows();
    assert_eq!(grad_out.len(), g.out_channels * p);
    for (gb, row) in grad_b.iter_mut().zip(grad_out.chunks_exact(p)) {
        *gb += row.iter().copied().sum::<T>();
    }
    let mut scratch = Vec::new();
    let col: &[T] = if g.is_pointwise() {
        input
    } else {
        im2col(g, input, &mut scratch);
        &scratch
    };
    // dW += dY col^T
    matmul(g.out_channels, p, cr, grad_out, (p, 1), col, (1, p), T::one(), grad_w);
    if let Some(grad_in) = grad_in {
        assert_eq!(grad_in.len(), g.in_channels * g.in_h * g.in_w);
        // dcol = W^T dY
        if g.is_pointwise() {
            matmul(cr, g.out_channels, p, weight, (1, cr), grad_out, (p, 1), T::one(), grad_in);
        } else {
            scratch.clear();
            scratch.resize(cr * p, T::zero());
            matmul(cr, g.out_channels, p, weight, (1, cr), grad_out, (p, 1), T::zero(), &mut scratch);
            col2im_add(g, &scratch, grad_in);
        }
    }
}
