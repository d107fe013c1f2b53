//! im2col / gemm kernels shared by convolution and transposed convolution.
//!
//! Both primitives use the weight layout `[out, in, kh, kw]` of the forward
//! convolution. A transposed convolution with weight `W` is the adjoint of the
//! convolution with the same `W`, so it maps `out` channels back to `in`.

/// Row-major GEMM: `c = a' * b' + beta * c` where `a'` is `[m, k]` and `b'` is `[k, n]`.
///
/// `trans_a` means `a` is stored as `[k, m]`; `trans_b` means `b` is stored as `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].fill(0.0);
        } else {
            c[..m * n].iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices are at least as long as the strided extents computed above.
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

/// Geometry of a single convolution: input plane `c × h × w` mapped to an
/// output grid `ho × wo`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_hw(&self) -> usize {
        self.ho * self.wo
    }

    pub fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Writes the patch matrix of one image into columns `[col0, col0 + ho*wo)` of
/// `cols`, a `[rows, ncols]` row-major matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64], ncols: usize, col0: usize) {
    let hw = g.out_hw();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncols + col0..row * ncols + col0 + hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into one image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, ncols: usize, col0: usize, x: &mut [f64]) {
    let hw = g.out_hw();
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncols + col0..row * ncols + col0 + hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Number of images per gemm call so that each call sees a few thousand columns.
pub(crate) fn chunk_len(n: usize, hw: usize) -> usize {
    (4096 / hw.max(1)).clamp(1, n.max(1))
}

/// Copies images `[start, start+nc)` of a `[N, ch, hw]` buffer into a
/// `[ch, nc*hw]` matrix.
pub(crate) fn gather(src: &[f64], ch: usize, hw: usize, start: usize, nc: usize, dst: &mut [f64]) {
    let ncols = nc * hw;
    for i in 0..nc {
        let img = &src[(start + i) * ch * hw..(start + i + 1) * ch * hw];
        for c in 0..ch {
            dst[c * ncols + i * hw..c * ncols + (i + 1) * hw]
                .copy_from_slice(&img[c * hw..(c + 1) * hw]);
        }
    }
}

/// Inverse of [`gather`], optionally adding a per-channel bias.
pub(crate) fn scatter(
    src: &[f64],
    ch: usize,
    hw: usize,
    start: usize,
    nc: usize,
    bias: Option<&[f64]>,
    dst: &mut [f64],
) {
    let ncols = nc * hw;
    for i in 0..nc {
        let img = &mut dst[(start + i) * ch * hw..(start + i + 1) * ch * hw];
        for c in 0..ch {
            let b = bias.map_or(0.0, |b| b[c]);
            let from = &src[c * ncols + i * hw..c * ncols + (i + 1) * hw];
            for (d, s) in img[c * hw..(c + 1) * hw].iter_mut().zip(from) {
                *d = s + b;
            }
        }
    }
}

/// Forward convolution over a batch. `w` is `[o, rows]`.
pub(crate) fn conv_forward(x: &[f64], n: usize, g: &ConvGeom, w: &[f64], o: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let hw = g.out_hw();
    let rows = g.rows();
    let mut out = vec![0.0; n * o * hw];
    let chunk = chunk_len(n, hw);
    let mut cols = Vec::new();
    let mut tmp = Vec::new();
    let mut start = 0;
    while start < n {
        let nc = chunk.min(n - start);
        let ncols = nc * hw;
        cols.resize(rows * ncols, 0.0);
        tmp.resize(o * ncols, 0.0);
        for i in 0..nc {
            let img = &x[(start + i) * g.in_len()..(start + i + 1) * g.in_len()];
            im2col(img, g, &mut cols, ncols, i * hw);
        }
        gemm(o, rows, ncols, w, false, &cols, false, &mut tmp, 0.0);
        scatter(&tmp, o, hw, start, nc, bias, &mut out);
        start += nc;
    }
    out
}

/// Gradients of a convolution given the upstream gradient `gy` (`[n, o, ho*wo]`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    w: &[f64],
    o: usize,
    gy: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let hw = g.out_hw();
    let rows = g.rows();
    let mut dx = want_dx.then(|| vec![0.0; n * g.in_len()]);
    let mut dw = want_dw.then(|| vec![0.0; o * rows]);
    let chunk = chunk_len(n, hw);
    let mut gchunk = Vec::new();
    let mut cols = Vec::new();
    let mut start = 0;
    while start < n {
        let nc = chunk.min(n - start);
        let ncols = nc * hw;
        gchunk.resize(o * ncols, 0.0);
        cols.resize(rows * ncols, 0.0);
        gather(gy, o, hw, start, nc, &mut gchunk);
        if let Some(dw) = dw.as_mut() {
            for i in 0..nc {
                let img = &x[(start + i) * g.in_len()..(start + i + 1) * g.in_len()];
                im2col(img, g, &mut cols, ncols, i * hw);
            }
            gemm(o, ncols, rows, &gchunk, false, &cols, true, dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(rows, o, ncols, w, true, &gchunk, false, &mut cols, 0.0);
            for i in 0..nc {
                let img = &mut dx[(start + i) * g.in_len()..(start + i + 1) * g.in_len()];
                col2im(&cols, g, ncols, i * hw, img);
            }
        }
        start += nc;
    }
    (dx, dw)
}

/// Transposed convolution: `x` is `[n, o, ho*wo]`, output `[n, c, h*w]`.
pub(crate) fn conv_transpose_forward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    w: &[f64],
    o: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let hw = g.out_hw();
    let rows = g.rows();
    let mut out = vec![0.0; n * g.in_len()];
    let chunk = chunk_len(n, hw);
    let mut xchunk = Vec::new();
    let mut cols = Vec::new();
    let mut start = 0;
    while start < n {
        let nc = chunk.min(n - start);
        let ncols = nc * hw;
        xchunk.resize(o * ncols, 0.0);
        cols.resize(rows * ncols, 0.0);
        gather(x, o, hw, start, nc, &mut xchunk);
        gemm(rows, o, ncols, w, true, &xchunk, false, &mut cols, 0.0);
        for i in 0..nc {
            let img = &mut out[(start + i) * g.in_len()..(start + i + 1) * g.in_len()];
            col2im(&cols, g, ncols, i * hw, img);
        }
        start += nc;
    }
    if let Some(b) = bias {
        let plane = g.h * g.w;
        for img in out.chunks_mut(g.in_len()) {
            for (c, ch) in img.chunks_mut(plane).enumerate() {
                ch.iter_mut().for_each(|v| *v += b[c]);
            }
        }
    }
    out
}

/// Gradients of a transposed convolution given `gy` (`[n, c, h*w]`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_backward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    w: &[f64],
    o: usize,
    gy: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let hw = g.out_hw();
    let rows = g.rows();
    let mut dx = want_dx.then(|| vec![0.0; n * o * hw]);
    let mut dw = want_dw.then(|| vec![0.0; o * rows]);
    let chunk = chunk_len(n, hw);
    let mut cols = Vec::new();
    let mut tmp = Vec::new();
    let mut start = 0;
    while start < n {
        let nc = chunk.min(n - start);
        let ncols = nc * hw;
        cols.resize(rows * ncols, 0.0);
        for i in 0..nc {
            let img = &gy[(start + i) * g.in_len()..(start + i + 1) * g.in_len()];
            im2col(img, g, &mut cols, ncols, i * hw);
        }
        if let Some(dx) = dx.as_mut() {
            tmp.resize(o * ncols, 0.0);
            gemm(o, rows, ncols, w, false, &cols, false, &mut tmp, 0.0);
            scatter(&tmp, o, hw, start, nc, None, dx);
        }
        if let Some(dw) = dw.as_mut() {
            tmp.resize(o * ncols, 0.0);
            gather(x, o, hw, start, nc, &mut tmp);
            gemm(o, ncols, rows, &tmp, false, &cols, true, dw, 1.0);
        }
        start += nc;
    }
    (dx, dw)
}
