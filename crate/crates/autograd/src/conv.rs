//! im2col convolution kernels.
//!
//! The batch is folded into the column axis so a whole minibatch is a single
//! GEMM: `cols` has `cin * kh * kw` rows and `n * ho * wo` columns.

use crate::error::{GraphError, Result};
use crate::real::{gemm, MatRef, Real};
use crate::tensor::{Shape, Tensor};

/// Stride, zero padding and dilation shared by both spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride-1 convolution whose output keeps the input size for an odd kernel.
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        Self::new(1, dilation * (kernel - 1) / 2, dilation)
    }

    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    pub fn new(x: Shape, w: Shape, spec: ConvSpec) -> Result<Self> {
        let [n, cin, h, wd] = x.0;
        let [cout, wcin, kh, kw] = w.0;
        if wcin != cin {
            return Err(GraphError::Shape(format!(
                "conv kernel {w:?} expects {wcin} input channels, got {x:?}"
            )));
        }
        let ho = spec.output_len(h, kh);
        let wo = spec.output_len(wd, kw);
        match (ho, wo) {
            (Some(ho), Some(wo)) => Ok(Self {
                n,
                cin,
                h,
                w: wd,
                cout,
                kh,
                kw,
                ho,
                wo,
                spec,
            }),
            _ => Err(GraphError::Shape(format!(
                "input {x:?} too small for kernel {w:?} with {spec:?}"
            ))),
        }
    }

    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    pub fn out_shape(&self) -> Shape {
        Shape([self.n, self.cout, self.ho, self.wo])
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    /// Source column for output column `o` and kernel column `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let pos = (o * self.spec.stride + k * self.spec.dilation) as isize - self.spec.padding as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }
}

pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let cols_n = g.n * g.out_plane();
    let mut cols = vec![T::zero(); g.k() * cols_n];
    if g.is_pointwise() {
        let p = g.h * g.w;
        for n in 0..g.n {
            for c in 0..g.cin {
                let src = &x[(n * g.cin + c) * p..][..p];
                cols[c * cols_n + n * p..][..p].copy_from_slice(src);
            }
        }
        return cols;
    }
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.n {
                    let plane = &x[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let Some(iy) = g.src(oy, ky, g.h) else {
                            continue;
                        };
                        let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                        let dst = &mut dst_row[n * g.out_plane() + oy * g.wo..][..g.wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            if let Some(ix) = g.src(ox, kx, g.w) {
                                *d = src_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let cols_n = g.n * g.out_plane();
    if g.is_pointwise() {
        let p = g.h * g.w;
        for n in 0..g.n {
            for c in 0..g.cin {
                let dst = &mut dx[(n * g.cin + c) * p..][..p];
                for (d, &s) in dst.iter_mut().zip(&cols[c * cols_n + n * p..][..p]) {
                    *d += s;
                }
            }
        }
        return;
    }
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.n {
                    let plane = &mut dx[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let Some(iy) = g.src(oy, ky, g.h) else {
                            continue;
                        };
                        let dst_row = &mut plane[iy * g.w..(iy + 1) * g.w];
                        let src = &src_row[n * g.out_plane() + oy * g.wo..][..g.wo];
                        for (ox, &s) in src.iter().enumerate() {
                            if let Some(ix) = g.src(ox, kx, g.w) {
                                dst_row[ix] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// (cout, n * p) <-> (n, cout, p) layout shuffles; identity when n == 1.
fn channel_major<T: Real>(src: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    if n == 1 {
        return src.to_vec();
    }
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * p + b * p..][..p].copy_from_slice(&src[(b * c + ch) * p..][..p]);
        }
    }
    out
}

fn batch_major<T: Real>(src: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    if n == 1 {
        return src.to_vec();
    }
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * p..][..p].copy_from_slice(&src[ch * n * p + b * p..][..p]);
        }
    }
    out
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), spec)?;
    if let Some(b) = bias {
        if b.numel() != g.cout {
            return Err(GraphError::Shape(format!(
                "bias {:?} for {} output channels",
                b.shape(),
                g.cout
            )));
        }
    }
    let cols = im2col(x.data(), &g);
    let cols_n = g.n * g.out_plane();
    let mut out_t = vec![T::zero(); g.cout * cols_n];
    gemm(
        MatRef::new(w.data(), g.cout, g.k()),
        MatRef::new(&cols, g.k(), cols_n),
        T::zero(),
        &mut out_t,
    );
    let mut out = batch_major(&out_t, g.n, g.cout, g.out_plane());
    if let Some(b) = bias {
        let p = g.out_plane();
        for (i, chunk) in out.chunks_mut(p).enumerate() {
            let bv = b.data()[i % g.cout];
            for v in chunk {
                *v += bv;
            }
        }
    }
    Tensor::from_vec(g.out_shape(), out)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias_shape: Option<Shape>,
    spec: ConvSpec,
    dout: &Tensor<T>,
    want: [bool; 3],
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), spec)?;
    let cols_n = g.n * g.out_plane();
    let dout_t = channel_major(dout.data(), g.n, g.cout, g.out_plane());

    let dw = if want[1] {
        let cols = im2col(x.data(), &g);
        let mut dw = vec![T::zero(); g.cout * g.k()];
        gemm(
            MatRef::new(&dout_t, g.cout, cols_n),
            MatRef::t(&cols, g.k(), cols_n),
            T::zero(),
            &mut dw,
        );
        Some(Tensor::from_vec(w.shape(), dw)?)
    } else {
        None
    };

    let dx = if want[0] {
        let mut dcols = vec![T::zero(); g.k() * cols_n];
        gemm(
            MatRef::t(w.data(), g.cout, g.k()),
            MatRef::new(&dout_t, g.cout, cols_n),
            T::zero(),
            &mut dcols,
        );
        let mut dx = vec![T::zero(); x.numel()];
        col2im(&dcols, &g, &mut dx);
        Some(Tensor::from_vec(x.shape(), dx)?)
    } else {
        None
    };

    let db = match (want[2], bias_shape) {
        (true, Some(shape)) => {
            let mut db = vec![T::zero(); g.cout];
            for (ch, row) in dout_t.chunks(cols_n).enumerate() {
                db[ch] = row.iter().copied().sum();
            }
            Some(Tensor::from_vec(shape, db)?)
        }
        _ => None,
    };

    Ok(ConvGrads { dx, dw, db })
}
