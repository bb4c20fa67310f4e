//! 2-D convolution through im2col and gemm.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::exec;
use crate::real::{MatRef, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

fn im2col<T: Real>(x: &[T], g: &Geom, cols: &mut [T]) {
    let p = g.cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, d) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *d = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &Geom, x: &mut [T]) {
    let p = g.cols();
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.wo {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] = dst[iw as usize] + src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    /// Zero-padded 2-D convolution of `x: N x Cin x H x W` with
    /// `w: Cout x Cin x k x k` and an optional per-channel bias.
    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, cin, h, wd) = xv.dims4()?;
        let (cout, wcin, k, k2) = wv.dims4()?;
        if wcin != cin {
            return Err(Error::invalid(
                "conv2d",
                format!("input has {cin} channels, kernel expects {wcin}"),
            ));
        }
        if k != k2 || stride == 0 {
            return Err(Error::invalid("conv2d", "kernel must be square, stride positive"));
        }
        if k > h + 2 * pad || k > wd + 2 * pad {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {k} larger than padded input {h}x{wd} (pad {pad})"),
            ));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != [cout] {
                return Err(Error::shape("conv2d bias", &bs, &[cout]));
            }
        }
        let g = Geom {
            cin,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho: conv_out_extent(h, k, stride, pad),
            wo: conv_out_extent(wd, k, stride, pad),
        };
        let (kr, p) = (g.rows(), g.cols());
        let in_len = cin * h * wd;
        let out_len = cout * p;
        let bias_rc = b.map(|b| self.value(b));
        let bias: Option<&[T]> = bias_rc.as_ref().map(|t| t.data());
        let mut out = vec![T::zero(); n * out_len];
        {
            let xd = xv.data();
            let wdata = wv.data();
            exec::for_each_chunk_mut(&mut out, out_len, |i, o| {
                let mut cols = vec![T::zero(); kr * p];
                im2col(&xd[i * in_len..(i + 1) * in_len], &g, &mut cols);
                if let Some(bv) = bias {
                    for (co, row) in o.chunks_mut(p).enumerate() {
                        row.fill(bv[co]);
                    }
                }
                let beta = if bias.is_some() { T::one() } else { T::zero() };
                T::gemm(
                    cout,
                    kr,
                    p,
                    T::one(),
                    wdata,
                    MatRef::row_major(kr),
                    &cols,
                    MatRef::row_major(p),
                    beta,
                    o,
                );
            });
        }
        let out = Tensor::new(&[n, cout, g.ho, g.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let has_bias = b.is_some();
        Ok(self.push(
            out,
            &inputs,
            Box::new(move |ctx| {
                let xd = ctx.inputs[0].data();
                let wdata = ctx.inputs[1].data();
                let gout = ctx.grad;
                let dx = ctx.needs[0].then(|| {
                    let mut dx = vec![T::zero(); n * in_len];
                    exec::for_each_chunk_mut(&mut dx, in_len, |i, dxi| {
                        let mut dcols = vec![T::zero(); kr * p];
                        T::gemm(
                            kr,
                            cout,
                            p,
                            T::one(),
                            wdata,
                            MatRef::transposed(kr),
                            &gout[i * out_len..(i + 1) * out_len],
                            MatRef::row_major(p),
                            T::zero(),
                            &mut dcols,
                        );
                        col2im(&dcols, &g, dxi);
                    });
                    dx
                });
                let dw = ctx.needs[1].then(|| {
                    let partial = exec::map_indexed(n, |i| {
                        let mut cols = vec![T::zero(); kr * p];
                        im2col(&xd[i * in_len..(i + 1) * in_len], &g, &mut cols);
                        let mut dw = vec![T::zero(); cout * kr];
                        T::gemm(
                            cout,
                            p,
                            kr,
                            T::one(),
                            &gout[i * out_len..(i + 1) * out_len],
                            MatRef::row_major(p),
                            &cols,
                            MatRef::transposed(p),
                            T::zero(),
                            &mut dw,
                        );
                        dw
                    });
                    let mut dw = vec![T::zero(); cout * kr];
                    for part in &partial {
                        dw.iter_mut().zip(part).for_each(|(a, &b)| *a = *a + b);
                    }
                    dw
                });
                let mut grads = vec![dx, dw];
                if has_bias {
                    grads.push(ctx.needs[2].then(|| {
                        let mut db = vec![T::zero(); cout];
                        for i in 0..n {
                            for (co, d) in db.iter_mut().enumerate() {
                                let s: T = gout[i * out_len + co * p..i * out_len + (co + 1) * p]
                                    .iter()
                                    .copied()
                                    .sum();
                                *d = *d + s;
                            }
                        }
                        db
                    }));
                }
                grads
            }),
        ))
    }
}
