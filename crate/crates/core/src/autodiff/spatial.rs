//! Resizing, pooling and channel stacking on `N x C x H x W` tensors.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::exec;
use crate::real::Real;
use crate::tensor::Tensor;

/// Source index pair and interpolation weight for one output coordinate
/// under the align-corners convention.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn taps<T: Real>(src: usize, dst: usize) -> Vec<Tap<T>> {
    (0..dst)
        .map(|o| {
            if src == dst {
                return Tap {
                    lo: o,
                    hi: o,
                    frac: T::zero(),
                };
            }
            let pos = if dst > 1 {
                T::from_usize_lossy(o * (src - 1)) / T::from_usize_lossy(dst - 1)
            } else {
                T::zero()
            };
            let lo = pos.floor().to_usize().unwrap_or(0).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                frac: pos - T::from_usize_lossy(lo),
            }
        })
        .collect()
}

impl<T: Real> Tape<T> {
    /// Bilinear resize with aligned corners.
    pub fn bilinear_resize(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("bilinear_resize", "target extents must be >= 1"));
        }
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        if (h, w) == (out_h, out_w) {
            // Exact identity; skip the arithmetic.
            return Ok(self.push(
                (*xv).clone(),
                &[x],
                Box::new(|ctx| vec![Some(ctx.grad.to_vec())]),
            ));
        }
        let ty: Vec<Tap<T>> = taps(h, out_h);
        let tx: Vec<Tap<T>> = taps(w, out_w);
        let mut out = vec![T::zero(); n * c * out_h * out_w];
        {
            let xd = xv.data();
            exec::for_each_chunk_mut(&mut out, out_h * out_w, |pl, o| {
                let src = &xd[pl * h * w..(pl + 1) * h * w];
                for (oy, a) in ty.iter().enumerate() {
                    for (ox, b) in tx.iter().enumerate() {
                        let v00 = src[a.lo * w + b.lo];
                        let v01 = src[a.lo * w + b.hi];
                        let v10 = src[a.hi * w + b.lo];
                        let v11 = src[a.hi * w + b.hi];
                        let top = v00 * (T::one() - b.frac) + v01 * b.frac;
                        let bot = v10 * (T::one() - b.frac) + v11 * b.frac;
                        o[oy * out_w + ox] = top * (T::one() - a.frac) + bot * a.frac;
                    }
                }
            });
        }
        let out = Tensor::new(&[n, c, out_h, out_w], out)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |ctx| {
                let g = ctx.grad;
                let mut dx = vec![T::zero(); n * c * h * w];
                exec::for_each_chunk_mut(&mut dx, h * w, |pl, d| {
                    let go = &g[pl * out_h * out_w..(pl + 1) * out_h * out_w];
                    for (oy, a) in ty.iter().enumerate() {
                        for (ox, b) in tx.iter().enumerate() {
                            let gv = go[oy * out_w + ox];
                            let gt = gv * (T::one() - a.frac);
                            let gb = gv * a.frac;
                            d[a.lo * w + b.lo] = d[a.lo * w + b.lo] + gt * (T::one() - b.frac);
                            d[a.lo * w + b.hi] = d[a.lo * w + b.hi] + gt * b.frac;
                            d[a.hi * w + b.lo] = d[a.hi * w + b.lo] + gb * (T::one() - b.frac);
                            d[a.hi * w + b.hi] = d[a.hi * w + b.hi] + gb * b.frac;
                        }
                    }
                });
                vec![Some(dx)]
            }),
        ))
    }

    /// 2x2 non-overlapping max pooling with floor semantics. Ties go to the
    /// first element in row-major order.
    pub fn maxpool2(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::invalid("maxpool2", format!("input {h}x{w} too small")));
        }
        let mut out = vec![T::zero(); n * c * ho * wo];
        let mut arg = vec![0usize; n * c * ho * wo];
        {
            let xd = xv.data();
            exec::for_each_chunk_mut2(&mut out, ho * wo, &mut arg, ho * wo, |pl, o, a| {
                let src = &xd[pl * h * w..(pl + 1) * h * w];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = 2 * oy * w + 2 * ox;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = (2 * oy + dy) * w + 2 * ox + dx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                        o[oy * wo + ox] = src[best];
                        a[oy * wo + ox] = best;
                    }
                }
            });
        }
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |ctx| {
                let mut dx = vec![T::zero(); n * c * h * w];
                for pl in 0..n * c {
                    for j in 0..ho * wo {
                        let src = pl * h * w + arg[pl * ho * wo + j];
                        dx[src] = dx[src] + ctx.grad[pl * ho * wo + j];
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Stacks `N x C_i x H x W` tensors along the channel axis in order.
    pub fn concat_channels(&self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
        let first = vals
            .first()
            .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
        let (n, _, h, w) = first.dims4()?;
        let mut chans = Vec::with_capacity(vals.len());
        for v in &vals {
            let (vn, vc, vh, vw) = v.dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape("concat_channels", first.shape(), v.shape()));
            }
            chans.push(vc);
        }
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for i in 0..n {
            for (v, &ci) in vals.iter().zip(&chans) {
                out.extend_from_slice(&v.data()[i * ci * hw..(i + 1) * ci * hw]);
            }
        }
        let out = Tensor::new(&[n, total, h, w], out)?;
        Ok(self.push(
            out,
            xs,
            Box::new(move |ctx| {
                let mut grads: Vec<Vec<T>> =
                    chans.iter().map(|&ci| Vec::with_capacity(n * ci * hw)).collect();
                let mut off = 0;
                for _ in 0..n {
                    for (g, &ci) in grads.iter_mut().zip(&chans) {
                        g.extend_from_slice(&ctx.grad[off..off + ci * hw]);
                        off += ci * hw;
                    }
                }
                grads
                    .into_iter()
                    .zip(ctx.needs)
                    .map(|(g, &need)| need.then_some(g))
                    .collect()
            }),
        ))
    }

    /// Per-channel `x * gamma + beta` with `gamma`, `beta` of shape `[C]`.
    pub fn channel_affine(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        for p in [gamma, beta] {
            let s = self.shape(p);
            if s != [c] {
                return Err(Error::shape("channel_affine", &s, &[c]));
            }
        }
        let hw = h * w;
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let out: Vec<T> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let ch = (k / hw) % c;
                v * gv.data()[ch] + bv.data()[ch]
            })
            .collect();
        let out = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let x = ctx.inputs[0].data();
                let g = ctx.inputs[1].data();
                let d = ctx.grad;
                let dx = ctx.needs[0]
                    .then(|| d.iter().enumerate().map(|(k, &v)| v * g[(k / hw) % c]).collect());
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for (k, (&dv, &xv)) in d.iter().zip(x).enumerate() {
                    let ch = (k / hw) % c;
                    dg[ch] = dg[ch] + dv * xv;
                    db[ch] = db[ch] + dv;
                }
                vec![dx, ctx.needs[1].then_some(dg), ctx.needs[2].then_some(db)]
            }),
        ))
    }

    /// Channels `[start, start + len)` of an `N x C x H x W` tensor.
    pub fn slice_channels(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        if len == 0 || start + len > c {
            return Err(Error::invalid(
                "slice_channels",
                format!("range {start}..{} outside {c} channels", start + len),
            ));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for i in 0..n {
            let base = (i * c + start) * hw;
            out.extend_from_slice(&xv.data()[base..base + len * hw]);
        }
        let out = Tensor::new(&[n, len, h, w], out)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |ctx| {
                let mut dx = vec![T::zero(); n * c * hw];
                for i in 0..n {
                    let base = (i * c + start) * hw;
                    dx[base..base + len * hw]
                        .copy_from_slice(&ctx.grad[i * len * hw..(i + 1) * len * hw]);
                }
                vec![Some(dx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(shape: [usize; 4], v: &[f64]) -> Tensor<f64> {
        Tensor::new(&shape, v.to_vec()).unwrap()
    }

    #[test]
    fn resize_same_size_is_identity() {
        let tape = Tape::new();
        let x = Tensor::from_fn(&[2, 3, 5, 7], |i| (i as f64 * 0.37).sin());
        let v = tape.constant(x.clone());
        let y = tape.bilinear_resize(v, 5, 7).unwrap();
        assert_eq!(*tape.value(y), x);
    }

    #[test]
    fn resize_preserves_constants_and_grid_points() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::full(&[1, 2, 3, 3], 0.3));
        let y = tape.bilinear_resize(c, 7, 5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 0.3).abs() < 1e-15));

        let x = tape.constant(t4([1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]));
        let y = tape.value(tape.bilinear_resize(x, 4, 4).unwrap());
        let d = y.data();
        assert_eq!((d[0], d[3], d[12], d[15]), (0.0, 1.0, 2.0, 3.0));
        // Interior is the bilinear blend: value = x_frac + 2 * y_frac.
        assert!((d[5] - (1.0 / 3.0 + 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn maxpool_values_and_routing() {
        let tape = Tape::new();
        let x = tape.leaf(t4([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[0.0, 0.0, 0.0, 1.0]);

        // Ties: first in row-major order.
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 5.0).with_grad());
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_then_slice_recovers_inputs() {
        let tape = Tape::new();
        let a = Tensor::from_fn(&[2, 2, 3, 3], |i| i as f64);
        let b = Tensor::from_fn(&[2, 3, 3, 3], |i| -(i as f64));
        let (va, vb) = (tape.leaf(a.clone().with_grad()), tape.leaf(b.clone().with_grad()));
        let cat = tape.concat_channels(&[va, vb]).unwrap();
        assert_eq!(tape.shape(cat), vec![2, 5, 3, 3]);
        let sa = tape.slice_channels(cat, 0, 2).unwrap();
        let sb = tape.slice_channels(cat, 2, 3).unwrap();
        assert_eq!(tape.value(sa).data(), a.data());
        assert_eq!(tape.value(sb).data(), b.data());

        let s = tape.sum(cat).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(va).unwrap().iter().all(|&v| v == 1.0));
        assert!(g.get(vb).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(tape.concat_channels(&[a, b]).is_err());
        let single = tape.concat_channels(&[a]).unwrap();
        assert_eq!(*tape.value(single), *tape.value(a));
    }

    #[test]
    fn channel_affine_values_and_gradient() {
        let x = Tensor::from_fn(&[2, 3, 2, 2], |i| (i as f64 * 0.37).sin());
        let g = Tensor::from_fn(&[3], |i| 1.0 + i as f64);
        let b = Tensor::from_fn(&[3], |i| -(i as f64));
        let tape = Tape::new();
        let y = tape
            .channel_affine(tape.constant(x.clone()), tape.constant(g.clone()), tape.constant(b.clone()))
            .unwrap();
        assert_eq!(tape.value(y).data()[4], x.data()[4] * 2.0 - 1.0);
        let err = crate::autodiff::grad_check(
            |t, v| {
                let y = t.channel_affine(v[0], v[1], v[2])?;
                let y = t.mul(y, y)?;
                t.sum(y)
            },
            &[x, g, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
