//! Dense numeric kernels shared by the tape ops and the inference paths.
//!
//! All loops run in a fixed order so results are bit-reproducible.

/// Convolution geometry for one spatial axis pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of a forward convolution over a `[channels, height, width]` input.
    /// Returns `None` when the padded input is smaller than the kernel.
    pub fn forward(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || kernel == 0 || height + 2 * pad < kernel || width + 2 * pad < kernel {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold `[C, H, W]` into `[C*k*k, out_h*out_w]` patch columns (zero padding).
pub fn im2col(input: &[f32], g: &ConvGeom) -> Vec<f32> {
    let cols = g.col_cols();
    let mut out = vec![0.0f32; g.col_rows() * cols];
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * g.out_w + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[C, H, W]` buffer.
pub fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let ncols = g.col_cols();
    let mut out = vec![0.0f32; g.channels * g.height * g.width];
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            plane[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `c[m,n] = a[m,k] · b[k,n]`
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m,n] = aᵀ · b` where `a` is `[k,m]` and `b` is `[k,n]`.
pub fn matmul_at_b(a: &[f32], b: &[f32], k: usize, m: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0f32; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m,n] = a · bᵀ` where `a` is `[m,k]` and `b` is `[n,k]`.
pub fn matmul_a_bt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// Forward 2-D convolution. `kernel` is `[out_c, C, k, k]`.
pub fn conv2d_forward(input: &[f32], kernel: &[f32], bias: &[f32], out_c: usize, g: &ConvGeom) -> Vec<f32> {
    let cols = im2col(input, g);
    let mut out = matmul(kernel, &cols, out_c, g.col_rows(), g.col_cols());
    add_channel_bias(&mut out, bias, g.col_cols());
    out
}

/// Forward transposed convolution. `kernel` is `[in_c, out_c, k, k]`; `g` is the
/// geometry of the *adjoint* convolution (channels = out_c, height/width = output
/// dims, out_h/out_w = input dims).
pub fn conv_transpose2d_forward(input: &[f32], kernel: &[f32], bias: &[f32], in_c: usize, g: &ConvGeom) -> Vec<f32> {
    let cols = matmul_at_b(kernel, input, in_c, g.col_rows(), g.col_cols());
    let mut out = col2im(&cols, g);
    add_channel_bias(&mut out, bias, g.height * g.width);
    out
}

fn add_channel_bias(out: &mut [f32], bias: &[f32], plane: usize) {
    for (c, &b) in bias.iter().enumerate() {
        if b != 0.0 {
            for v in &mut out[c * plane..(c + 1) * plane] {
                *v += b;
            }
        }
    }
}
