//! 2-D cross-correlation via im2col + GEMM.

use rayon::prelude::*;

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Shapes involved in one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub height: usize,
    pub width: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        input: [usize; 4],
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [batch, c_in, height, width] = input;
        if stride == 0 || kernel == 0 {
            return Err(Error::config("convolution needs positive kernel and stride"));
        }
        let ph = height + 2 * padding;
        let pw = width + 2 * padding;
        if ph < kernel || pw < kernel {
            return Err(Error::config(format!(
                "kernel {kernel} does not fit a {height}x{width} input with padding {padding}"
            )));
        }
        Ok(ConvGeom {
            batch,
            c_in,
            height,
            width,
            c_out,
            kernel,
            stride,
            padding,
            out_h: (ph - kernel) / stride + 1,
            out_w: (pw - kernel) / stride + 1,
        })
    }

    /// Rows of the unfolded input matrix: `c_in · k · k`.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride as isize, g.padding as isize);
    let npix = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * npix..][..npix];
                for oy in 0..g.out_h {
                    let iy = oy as isize * s - p + ky as isize;
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kx as isize;
                        *d = if ix < 0 || ix >= g.width as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride as isize, g.padding as isize);
    let npix = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * npix..][..npix];
                for oy in 0..g.out_h {
                    let iy = oy as isize * s - p + ky as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = ox as isize * s - p + kx as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += row[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlates `input [N, C_in, H, W]` with `weight [C_out, C_in, k, k]`
    /// and adds `bias [C_out]` per output channel.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        self.check_live()?;
        let x = self.value(input);
        let w = self.value(weight);
        let dims = x.dims4()?;
        let [c_out, wc_in, kh, kw] = w.dims4()?;
        if kh != kw {
            return Err(Error::config("only square kernels are supported"));
        }
        if wc_in != dims[1] {
            return Err(Error::config(format!(
                "conv2d: input has {} channels but weight expects {wc_in}",
                dims[1]
            )));
        }
        if self.value(bias).shape() != [c_out] {
            return Err(Error::config(format!("conv2d: bias must have shape [{c_out}]")));
        }
        let geom = ConvGeom::new(dims, c_out, kh, stride, padding)?;
        let (patch, npix) = (geom.patch_len(), geom.out_pixels());
        let in_len = geom.c_in * geom.height * geom.width;
        let xd = x.data();
        let wd = w.data();
        let bd = self.value(bias).data();

        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); geom.batch * patch * npix] };
        let mut out = vec![T::zero(); geom.batch * c_out * npix];
        if geom.is_pointwise() {
            out.par_chunks_mut(c_out * npix).enumerate().for_each(|(n, o)| {
                T::gemm(c_out, patch, npix, wd, false, &xd[n * in_len..(n + 1) * in_len], false, T::zero(), o);
            });
        } else {
            out.par_chunks_mut(c_out * npix).zip(cols.par_chunks_mut(patch * npix)).enumerate().for_each(
                |(n, (o, col))| {
                    im2col(&geom, &xd[n * in_len..(n + 1) * in_len], col);
                    T::gemm(c_out, patch, npix, wd, false, col, false, T::zero(), o);
                },
            );
        }
        out.chunks_mut(npix).enumerate().for_each(|(i, plane)| {
            let b = bd[i % c_out];
            plane.iter_mut().for_each(|v| *v += b);
        });
        if geom.is_pointwise() {
            cols = xd.to_vec();
        }
        let out = Tensor::new(vec![geom.batch, c_out, geom.out_h, geom.out_w], out)?;
        out.ensure_finite("conv2d")?;
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(out, rg, Op::Conv2d { input, weight, bias, geom, cols }))
    }
}

/// Returns `(dx, dweight, dbias)`; `dx` is skipped when the input is constant.
pub(crate) fn backward<T: Scalar>(
    g: &ConvGeom,
    cols: &[T],
    weight: &[T],
    dout: &[T],
    want_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (patch, npix, c_out) = (g.patch_len(), g.out_pixels(), g.c_out);
    let mut dw = vec![T::zero(); c_out * patch];
    let mut db = vec![T::zero(); c_out];
    // fixed sample order keeps the weight-gradient reduction deterministic
    for n in 0..g.batch {
        let d = &dout[n * c_out * npix..(n + 1) * c_out * npix];
        T::gemm(c_out, npix, patch, d, false, &cols[n * patch * npix..(n + 1) * patch * npix], true, T::one(), &mut dw);
        for (o, plane) in d.chunks(npix).enumerate() {
            db[o] += plane.iter().copied().sum::<T>();
        }
    }
    let dx = want_dx.then(|| {
        let in_len = g.c_in * g.height * g.width;
        let mut dx = vec![T::zero(); g.batch * in_len];
        if g.is_pointwise() {
            dx.par_chunks_mut(in_len).enumerate().for_each(|(n, dxn)| {
                T::gemm(patch, c_out, npix, weight, true, &dout[n * c_out * npix..(n + 1) * c_out * npix], false, T::zero(), dxn);
            });
        } else {
            dx.par_chunks_mut(in_len).enumerate().for_each(|(n, dxn)| {
                let mut dcols = vec![T::zero(); patch * npix];
                T::gemm(patch, c_out, npix, weight, true, &dout[n * c_out * npix..(n + 1) * c_out * npix], false, T::zero(), &mut dcols);
                col2im(g, &dcols, dxn);
            });
        }
        dx
    });
    (dx, dw, db)
}
