//! Convolution kernels on raw NCHW buffers.
//!
//! Convolutions lower to `im2col` followed by a matrix product per batch
//! item. The tape calls into these; nothing here knows about gradients
//! bookkeeping beyond the buffers it is handed.

use crate::error::{Error, Result};

/// Geometry of one 2-d convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(
        input: [usize; 4],
        kernel: [usize; 4],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [n, c, h, w] = input;
        let [f, kc, kh, kw] = kernel;
        if kc != c {
            return Err(Error::Shape(format!(
                "conv2d: input has {c} channels but kernel expects {kc}"
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d: stride must be positive".into()));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        Ok(Self {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            filters: f,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.filters, self.out_h(), self.out_w()]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// `c = a · b + beta · c` for row-major operands, with optional transposes.
///
/// `a` is logically `m × k` and `b` is `k × n`. When `a_t` is set, `a` is
/// stored as `k × m`; likewise `b_t` means `b` is stored as `n × k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above bound every index the strides can reach.
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

fn im2col(g: &ConvGeometry, image: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let (h, w, s, p) = (
        g.height as isize,
        g.width as isize,
        g.stride,
        g.padding as isize,
    );
    for c in 0..g.in_channels {
        let chan = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for y in 0..oh {
                    let iy = (y * s) as isize + ki as isize - p;
                    let out_row = &mut dst[y * ow..(y + 1) * ow];
                    if iy < 0 || iy >= h {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (x, o) in out_row.iter_mut().enumerate() {
                        let ix = (x * s) as isize + kj as isize - p;
                        *o = if ix >= 0 && ix < w {
                            src[ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeometry, cols: &[f64], image: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let (h, w, s, p) = (
        g.height as isize,
        g.width as isize,
        g.stride,
        g.padding as isize,
    );
    for c in 0..g.in_channels {
        let chan = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for y in 0..oh {
                    let iy = (y * s) as isize + ki as isize - p;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (x, &v) in src[y * ow..(y + 1) * ow].iter().enumerate() {
                        let ix = (x * s) as isize + kj as isize - p;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `bias` may be omitted.
pub fn conv2d_forward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.filters * plane;
    let mut out = vec![0.0; g.batch * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.patch_len() * plane]
    };
    for n in 0..g.batch {
        let img = &input[n * in_len..(n + 1) * in_len];
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        if let Some(b) = bias {
            for (f, row) in dst.chunks_mut(plane).enumerate() {
                row.fill(b[f]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if g.is_pointwise() {
            gemm(
                g.filters,
                g.patch_len(),
                plane,
                kernel,
                false,
                img,
                false,
                dst,
                beta,
            );
        } else {
            im2col(g, img, &mut cols);
            gemm(
                g.filters,
                g.patch_len(),
                plane,
                kernel,
                false,
                &cols,
                false,
                dst,
                beta,
            );
        }
    }
    out
}

/// Gradients of a convolution with respect to whichever operands are requested.
pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    want: [bool; 3],
) -> ConvGrads {
    let [want_input, want_kernel, want_bias] = want;
    let plane = g.out_h() * g.out_w();
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.filters * plane;
    let patch = g.patch_len();

    let mut d_input = want_input.then(|| vec![0.0; g.batch * in_len]);
    let mut d_kernel = want_kernel.then(|| vec![0.0; g.filters * patch]);
    let mut d_bias = want_bias.then(|| vec![0.0; g.filters]);

    let pointwise = g.is_pointwise();
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![0.0; patch * plane]
    };
    for n in 0..g.batch {
        let img = &input[n * in_len..(n + 1) * in_len];
        let dout = &grad_out[n * out_len..(n + 1) * out_len];
        if let Some(db) = d_bias.as_mut() {
            for (f, row) in dout.chunks(plane).enumerate() {
                db[f] += row.iter().sum::<f64>();
            }
        }
        if let Some(dk) = d_kernel.as_mut() {
            let src: &[f64] = if pointwise {
                img
            } else {
                im2col(g, img, &mut cols);
                &cols
            };
            gemm(g.filters, plane, patch, dout, false, src, true, dk, 1.0);
        }
        if let Some(di) = d_input.as_mut() {
            let dst = &mut di[n * in_len..(n + 1) * in_len];
            if pointwise {
                gemm(patch, g.filters, plane, kernel, true, dout, false, dst, 1.0);
            } else {
                gemm(
                    patch, g.filters, plane, kernel, true, dout, false, &mut cols, 0.0,
                );
                col2im_add(g, &cols, dst);
            }
        }
    }
    ConvGrads {
        input: d_input,
        kernel: d_kernel,
        bias: d_bias,
    }
}

/// Nearest-neighbour 2× upsampling of an NCHW buffer.
pub fn upsample2x_forward(dims: [usize; 4], input: &[f64]) -> Vec<f64> {
    let [n, c, h, w] = dims;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * h2 * w2];
    for plane in 0..n * c {
        let src = &input[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
        for y in 0..h2 {
            let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
            for (x, d) in dst[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                *d = srow[x / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x_forward`]: sums each 2×2 block.
pub fn upsample2x_backward(dims: [usize; 4], grad_out: &[f64]) -> Vec<f64> {
    let [n, c, h, w] = dims;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let src = &grad_out[plane * h2 * w2..(plane + 1) * h2 * w2];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..h2 {
            let drow = &mut dst[(y / 2) * w..(y / 2 + 1) * w];
            for (x, &g) in src[y * w2..(y + 1) * w2].iter().enumerate() {
                drow[x / 2] += g;
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling fused with a same-padded odd `k×k`
/// convolution.
///
/// Every output pixel `(2i+a, 2j+b)` only sees low-resolution pixels near
/// `(i, j)`, so each of the four phases `(a, b)` is an ordinary convolution
/// of the low-resolution input with a folded kernel. The phases are stacked
/// as `4F` filters of one low-resolution convolution and interleaved
/// afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpConvGeometry {
    /// The stacked low-resolution convolution.
    pub low: ConvGeometry,
    pub filters: usize,
    pub kernel: usize,
}

impl UpConvGeometry {
    pub fn new(input: [usize; 4], kernel: [usize; 4]) -> Result<Self> {
        let [f, _, kh, kw] = kernel;
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Shape(format!(
                "upsample conv needs an odd square kernel, got {kh}x{kw}"
            )));
        }
        let reach = (kh / 2).div_ceil(2);
        let taps = 2 * reach + 1;
        let low = ConvGeometry::new(input, [4 * f, kernel[1], taps, taps], 1, reach)?;
        Ok(Self {
            low,
            filters: f,
            kernel: kh,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [
            self.low.batch,
            self.filters,
            2 * self.low.height,
            2 * self.low.width,
        ]
    }

    /// Folded tap index for phase `a` and original kernel offset `u`.
    fn tap(&self, phase: usize, u: usize) -> usize {
        let shift = (phase + u) as isize - (self.kernel / 2) as isize;
        (shift.div_euclid(2) + self.low.padding as isize) as usize
    }

    fn fold_kernel(&self, kernel: &[f64]) -> Vec<f64> {
        let (f, c, k, t) = (
            self.filters,
            self.low.in_channels,
            self.kernel,
            self.low.kernel_h,
        );
        let mut out = vec![0.0; 4 * f * c * t * t];
        for a in 0..2 {
            for b in 0..2 {
                for o in 0..f {
                    for ch in 0..c {
                        let dst = (((a * 2 + b) * f + o) * c + ch) * t * t;
                        let src = (o * c + ch) * k * k;
                        for u in 0..k {
                            let row = dst + self.tap(a, u) * t;
                            for v in 0..k {
                                out[row + self.tap(b, v)] += kernel[src + u * k + v];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of `fold_kernel`.
    fn unfold_kernel_grad(&self, folded: &[f64]) -> Vec<f64> {
        let (f, c, k, t) = (
            self.filters,
            self.low.in_channels,
            self.kernel,
            self.low.kernel_h,
        );
        let mut out = vec![0.0; f * c * k * k];
        for a in 0..2 {
            for b in 0..2 {
                for o in 0..f {
                    for ch in 0..c {
                        let src = (((a * 2 + b) * f + o) * c + ch) * t * t;
                        let dst = (o * c + ch) * k * k;
                        for u in 0..k {
                            let row = src + self.tap(a, u) * t;
                            for v in 0..k {
                                out[dst + u * k + v] += folded[row + self.tap(b, v)];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// `[N,4F,H,W]` phase stack to `[N,F,2H,2W]`, or back when `inverse`.
    fn shuffle(&self, src: &[f64], inverse: bool) -> Vec<f64> {
        let (n, f, h, w) = (
            self.low.batch,
            self.filters,
            self.low.height,
            self.low.width,
        );
        let mut out = vec![0.0; src.len()];
        for item in 0..n {
            for phase in 0..4 {
                let (a, b) = (phase / 2, phase % 2);
                for o in 0..f {
                    let low = ((item * 4 + phase) * f + o) * h * w;
                    let high = (item * f + o) * 4 * h * w;
                    for i in 0..h {
                        for j in 0..w {
                            let lo = low + i * w + j;
                            let hi = high + (2 * i + a) * 2 * w + 2 * j + b;
                            if inverse {
                                out[lo] = src[hi];
                            } else {
                                out[hi] = src[lo];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

pub fn upconv_forward(
    g: &UpConvGeometry,
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let stacked = conv2d_forward(&g.low, input, &g.fold_kernel(kernel), None);
    let mut out = g.shuffle(&stacked, false);
    if let Some(b) = bias {
        let plane = 4 * g.low.height * g.low.width;
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bf = b[i % g.filters];
            chunk.iter_mut().for_each(|v| *v += bf);
        }
    }
    out
}

pub fn upconv_backward(
    g: &UpConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    want: [bool; 3],
) -> ConvGrads {
    let [want_input, want_kernel, want_bias] = want;
    let stacked = g.shuffle(grad_out, true);
    let low = conv2d_backward(
        &g.low,
        input,
        &g.fold_kernel(kernel),
        &stacked,
        [want_input, want_kernel, false],
    );
    let bias = want_bias.then(|| {
        let plane = 4 * g.low.height * g.low.width;
        let mut db = vec![0.0; g.filters];
        for (i, chunk) in grad_out.chunks(plane).enumerate() {
            db[i % g.filters] += chunk.iter().sum::<f64>();
        }
        db
    });
    ConvGrads {
        input: low.input,
        kernel: low.kernel.map(|k| g.unfold_kernel_grad(&k)),
        bias,
    }
}
