//! Domain difference removal layers.
//!
//! Normalization path: batch normalization (BN) followed by local instance
//! normalization (LIN) over a `lambda x lambda` region grid. Whitening path:
//! batch whitening (BW) followed by local instance whitening (LIW). None of
//! the layers carry learned affine parameters.
//!
//! Whitening uses the unrolled Newton-Schulz inverse square root. When a
//! region holds fewer pixels `M` than channels `C`, the iteration runs on the
//! `M x M` Gram matrix instead of the `C x C` covariance: each iterate is a
//! polynomial `p` of the covariance and `p(X X^T / M + eps I) X =
//! X p(X^T X / M + eps I)`, so with the same trace normalizer the output is
//! identical.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::{inv_sqrt_eig, newton_forward, NewtonCache, SymMatrix};
use crate::real::{matmul, MatRef, Real};
use crate::stats::{self, gather_region, scatter_region, RegionGrid};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DdrVariant {
    None,
    Gln,
    Glw,
}

impl std::str::FromStr for DdrVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "base" => Ok(DdrVariant::None),
            "gln" => Ok(DdrVariant::Gln),
            "glw" => Ok(DdrVariant::Glw),
            _ => Err(Error::invalid("ddr_variant", format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormConfig {
    pub lambda: usize,
    pub eps: f64,
    pub variant: DdrVariant,
    pub newton_t: usize,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig {
            lambda: 6,
            eps: stats::DEFAULT_EPS,
            variant: DdrVariant::Glw,
            newton_t: 5,
        }
    }
}

impl NormConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda == 0 || !(self.eps > 0.0) || self.newton_t == 0 {
            return Err(Error::invalid(
                "norm_config",
                "need lambda >= 1, eps > 0 and newton_t >= 1",
            ));
        }
        Ok(())
    }

    /// Region grid for an `h x w` feature map. The division count is capped
    /// at `min(h, w) / 2` so every band spans at least two rows and columns.
    pub fn grid(&self, h: usize, w: usize) -> Result<RegionGrid> {
        let cap = (h.min(w) / 2).max(1);
        stats::make_grid(h, w, self.lambda.min(cap))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MomentsMode {
    Diagonal,
    Full,
}

/// Exponential moving averages of batch statistics used at evaluation time:
/// `running = momentum * running + (1 - momentum) * batch`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningMoments<T> {
    pub mode: MomentsMode,
    pub channels: usize,
    pub mean: Vec<T>,
    /// Per-channel variance (diagonal) or row-major covariance (full),
    /// regularizer included.
    pub second: Vec<T>,
    pub momentum: f64,
    pub count: u64,
}

pub const DEFAULT_MOMENTUM: f64 = 0.9;

impl<T: Real> RunningMoments<T> {
    pub fn new(mode: MomentsMode, channels: usize) -> Self {
        let second = match mode {
            MomentsMode::Diagonal => vec![T::one(); channels],
            MomentsMode::Full => SymMatrix::<T>::identity(channels).into_data(),
        };
        RunningMoments {
            mode,
            channels,
            mean: vec![T::zero(); channels],
            second,
            momentum: DEFAULT_MOMENTUM,
            count: 0,
        }
    }

    fn update(&mut self, mean: &[T], second: &[T]) {
        let m = T::lit(self.momentum);
        let k = T::one() - m;
        self.mean
            .iter_mut()
            .zip(mean)
            .for_each(|(r, &b)| *r = m * *r + k * b);
        self.second
            .iter_mut()
            .zip(second)
            .for_each(|(r, &b)| *r = m * *r + k * b);
        self.count += 1;
    }
}

fn feature_dims<T: Real>(tape: &Tape<T>, f: Var) -> Result<(usize, usize, usize, usize)> {
    tape.value(f).dims4()
}

/// Local instance normalization: standardizes every channel of every grid
/// region of every sample.
pub fn lin_forward<T: Real>(tape: &Tape<T>, f: Var, cfg: &NormConfig) -> Result<Var> {
    cfg.validate()?;
    let (n, c, h, w) = feature_dims(tape, f)?;
    let grid = cfg.grid(h, w)?;
    lin_on_grid(tape, f, grid, T::lit(cfg.eps), n, c)
}

fn lin_on_grid<T: Real>(
    tape: &Tape<T>,
    f: Var,
    grid: RegionGrid,
    eps: T,
    n: usize,
    c: usize,
) -> Result<Var> {
    let (h, w) = (grid.height, grid.width);
    let per = c * h * w;
    let groups = grid.len() * c;
    let xv = tape.value(f);
    let mut y = vec![T::zero(); n * per];
    let mut inv_std = vec![T::zero(); n * groups];
    {
        let x = xv.data();
        exec::for_each_chunk_mut2(&mut y, per, &mut inv_std, groups, |i, ys, is| {
            let xs = &x[i * per..(i + 1) * per];
            for (r, b) in grid.boxes.iter().enumerate() {
                for ch in 0..c {
                    let plane = &xs[ch * h * w..(ch + 1) * h * w];
                    let (mu, var) = stats::mean_var(b.offsets(w).map(|o| plane[o]), b.pixels());
                    let s = T::one() / (var + eps).sqrt();
                    is[r * c + ch] = s;
                    for o in b.offsets(w) {
                        ys[ch * h * w + o] = (plane[o] - mu) * s;
                    }
                }
            }
        });
    }
    let out = Tensor::new(&[n, c, h, w], y)?;
    Ok(tape.push(
        out,
        &[f],
        Box::new(move |ctx| {
            let y = ctx.output.data();
            let g = ctx.grad;
            let mut dx = vec![T::zero(); n * per];
            exec::for_each_chunk_mut(&mut dx, per, |i, d| {
                let ys = &y[i * per..(i + 1) * per];
                let gs = &g[i * per..(i + 1) * per];
                for (r, b) in grid.boxes.iter().enumerate() {
                    let m = T::from_usize_lossy(b.pixels());
                    for ch in 0..c {
                        let base = ch * h * w;
                        let (mut sg, mut sgy) = (T::zero(), T::zero());
                        for o in b.offsets(w) {
                            sg = sg + gs[base + o];
                            sgy = sgy + gs[base + o] * ys[base + o];
                        }
                        let (mg, mgy) = (sg / m, sgy / m);
                        let s = inv_std[i * groups + r * c + ch];
                        for o in b.offsets(w) {
                            d[base + o] = s * (gs[base + o] - mg - ys[base + o] * mgy);
                        }
                    }
                }
            });
            vec![Some(dx)]
        }),
    ))
}

/// Channel-wise affine map with constant coefficients, `y = (x - shift) * scale`.
fn channel_affine<T: Real>(tape: &Tape<T>, f: Var, shift: Vec<T>, scale: Vec<T>) -> Result<Var> {
    let xv = tape.value(f);
    let (n, c, h, w) = xv.dims4()?;
    let hw = h * w;
    let y: Vec<T> = xv
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let ch = (k / hw) % c;
            (v - shift[ch]) * scale[ch]
        })
        .collect();
    let out = Tensor::new(&[n, c, h, w], y)?;
    Ok(tape.push(
        out,
        &[f],
        Box::new(move |ctx| {
            let d = ctx
                .grad
                .iter()
                .enumerate()
                .map(|(k, &g)| g * scale[(k / hw) % c])
                .collect();
            vec![Some(d)]
        }),
    ))
}

/// Batch normalization without affine parameters. Training mode normalizes
/// by the current batch and updates `running`; evaluation mode uses
/// `running`.
pub fn bn_forward<T: Real>(
    tape: &Tape<T>,
    f: Var,
    running: &mut RunningMoments<T>,
    training: bool,
    eps: f64,
) -> Result<Var> {
    let (n, c, h, w) = feature_dims(tape, f)?;
    if running.channels != c || running.mode != MomentsMode::Diagonal {
        return Err(Error::invalid(
            "bn_forward",
            format!("running moments for {} channels ({:?}), input has {c}", running.channels, running.mode),
        ));
    }
    if !training {
        let scale = running.second.iter().map(|&v| T::one() / v.sqrt()).collect();
        return channel_affine(tape, f, running.mean.clone(), scale);
    }
    if n < 2 {
        return Err(Error::invalid(
            "bn_forward",
            "training needs a batch of at least two samples",
        ));
    }
    let hw = h * w;
    let xv = tape.value(f);
    let st = stats::batch_channel_stats(&xv, T::lit(eps))?;
    running.update(&st.mu, &st.var);
    let inv_std: Vec<T> = st.var.iter().map(|&v| T::one() / v.sqrt()).collect();
    let mu = st.mu;
    let y: Vec<T> = xv
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let ch = (k / hw) % c;
            (v - mu[ch]) * inv_std[ch]
        })
        .collect();
    let out = Tensor::new(&[n, c, h, w], y)?;
    Ok(tape.push(
        out,
        &[f],
        Box::new(move |ctx| {
            let y = ctx.output.data();
            let g = ctx.grad;
            let m = T::from_usize_lossy(n * hw);
            let mut mg = vec![T::zero(); c];
            let mut mgy = vec![T::zero(); c];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    for k in base..base + hw {
                        mg[ch] = mg[ch] + g[k];
                        mgy[ch] = mgy[ch] + g[k] * y[k];
                    }
                }
            }
            mg.iter_mut().for_each(|v| *v = *v / m);
            mgy.iter_mut().for_each(|v| *v = *v / m);
            let d = (0..g.len())
                .map(|k| {
                    let ch = (k / hw) % c;
                    inv_std[ch] * (g[k] - mg[ch] - y[k] * mgy[ch])
                })
                .collect();
            vec![Some(d)]
        }),
    ))
}

/// Global-to-local normalization: LIN applied to BN output.
pub fn gln<T: Real>(
    tape: &Tape<T>,
    f: Var,
    running: &mut RunningMoments<T>,
    cfg: &NormConfig,
    training: bool,
) -> Result<Var> {
    let b = bn_forward(tape, f, running, training, cfg.eps)?;
    lin_forward(tape, b, cfg)
}

/// `inv_sqrt * (x - mu 1^T)` for a row-major `C x M` matrix.
pub fn whiten<T: Real>(x: &[T], mu: &[T], inv_sqrt: &SymMatrix<T>) -> Vec<T> {
    let c = mu.len();
    let m = x.len() / c;
    let centered = center(x, mu, m);
    matmul(inv_sqrt.data(), &centered, c, c, m)
}

fn center<T: Real>(x: &[T], mu: &[T], m: usize) -> Vec<T> {
    x.chunks(m)
        .zip(mu)
        .flat_map(|(row, &mu)| row.iter().map(move |&v| v - mu))
        .collect()
}

fn row_means<T: Real>(x: &[T], m: usize) -> Vec<T> {
    let mt = T::from_usize_lossy(m);
    x.chunks(m).map(|r| stats::shifted_mean(r, mt)).collect()
}

/// Cached forward state of one whitened block (region or whole batch).
struct WhitenBlock<T> {
    c: usize,
    m: usize,
    centered: Vec<T>,
    gram_space: bool,
    newton: NewtonCache<T>,
}

/// Whitens a row-major `C x M` block through Newton iterations, choosing the
/// smaller of the covariance and Gram spaces.
fn whiten_block<T: Real>(x: &[T], c: usize, m: usize, eps: T, iters: usize) -> Result<(Vec<T>, WhitenBlock<T>)> {
    let mu = row_means(x, m);
    let centered = center(x, &mu, m);
    let mt = T::from_usize_lossy(m);
    let gram_space = m < c;
    let (out, newton) = if gram_space {
        let mut g = vec![T::zero(); m * m];
        T::gemm(
            m,
            c,
            m,
            T::one() / mt,
            &centered,
            MatRef::transposed(m),
            &centered,
            MatRef::row_major(m),
            T::zero(),
            &mut g,
        );
        stats::symmetrize_add_eps(&mut g, m, eps);
        let sq: T = centered.iter().map(|&v| v * v).sum();
        let trace = sq / mt + eps * T::from_usize_lossy(c);
        let cache = newton_forward(&g, m, iters, Some(trace))?;
        let out = matmul(&centered, cache.result(), c, m, m);
        (out, cache)
    } else {
        let mut a = vec![T::zero(); c * c];
        T::gemm(
            c,
            m,
            c,
            T::one() / mt,
            &centered,
            MatRef::row_major(m),
            &centered,
            MatRef::transposed(m),
            T::zero(),
            &mut a,
        );
        stats::symmetrize_add_eps(&mut a, c, eps);
        let cache = newton_forward(&a, c, iters, None)?;
        let out = matmul(cache.result(), &centered, c, c, m);
        (out, cache)
    };
    Ok((
        out,
        WhitenBlock {
            c,
            m,
            centered,
            gram_space,
            newton,
        },
    ))
}

impl<T: Real> WhitenBlock<T> {
    fn backward(&self, dy: &[T]) -> Vec<T> {
        let (c, m) = (self.c, self.m);
        let x = &self.centered;
        let mt = T::from_usize_lossy(m);
        let b = self.newton.result();
        let mut dx = vec![T::zero(); c * m];
        if self.gram_space {
            // y = x b, b: m x m.
            let mut db = vec![T::zero(); m * m];
            T::gemm(m, c, m, T::one(), x, MatRef::transposed(m), dy, MatRef::row_major(m), T::zero(), &mut db);
            T::gemm(c, m, m, T::one(), dy, MatRef::row_major(m), b, MatRef::transposed(m), T::zero(), &mut dx);
            let (dg, ds) = self.newton.backward(&db, false);
            let sym: Vec<T> = (0..m * m)
                .map(|k| dg[k] + dg[(k % m) * m + k / m])
                .collect();
            T::gemm(c, m, m, T::one() / mt, x, MatRef::row_major(m), &sym, MatRef::row_major(m), T::one(), &mut dx);
            let k = T::lit(2.0) * ds / mt;
            dx.iter_mut().zip(x).for_each(|(d, &v)| *d = *d + k * v);
        } else {
            // y = b x, b: c x c.
            let mut db = vec![T::zero(); c * c];
            T::gemm(c, m, c, T::one(), dy, MatRef::row_major(m), x, MatRef::transposed(m), T::zero(), &mut db);
            T::gemm(c, c, m, T::one(), b, MatRef::transposed(c), dy, MatRef::row_major(m), T::zero(), &mut dx);
            let (da, _) = self.newton.backward(&db, true);
            let sym: Vec<T> = (0..c * c)
                .map(|k| da[k] + da[(k % c) * c + k / c])
                .collect();
            T::gemm(c, c, m, T::one() / mt, &sym, MatRef::row_major(c), x, MatRef::row_major(m), T::one(), &mut dx);
        }
        // Centering.
        let means = row_means(&dx, m);
        dx.chunks_mut(m)
            .zip(means)
            .for_each(|(row, mu)| row.iter_mut().for_each(|v| *v = *v - mu));
        dx
    }
}

/// Local instance whitening over the region grid of every sample.
pub fn liw_forward<T: Real>(tape: &Tape<T>, f: Var, cfg: &NormConfig) -> Result<Var> {
    cfg.validate()?;
    let (n, c, h, w) = feature_dims(tape, f)?;
    let grid = cfg.grid(h, w)?;
    if grid.min_pixels() < 2 {
        return Err(Error::invalid(
            "liw_forward",
            format!("{h}x{w} map has regions with fewer than two pixels"),
        ));
    }
    let eps = T::lit(cfg.eps);
    let iters = cfg.newton_t;
    let per = c * h * w;
    let xv = tape.value(f);
    let blocks: Vec<Result<Vec<(Vec<T>, WhitenBlock<T>)>>> = {
        let x = xv.data();
        let grid = &grid;
        exec::map_indexed(n, |i| {
            let xs = &x[i * per..(i + 1) * per];
            grid.boxes
                .iter()
                .map(|b| whiten_block(&gather_region(xs, c, h, w, b), c, b.pixels(), eps, iters))
                .collect()
        })
    };
    let mut y = vec![T::zero(); n * per];
    let mut caches = Vec::with_capacity(n);
    for (i, sample) in blocks.into_iter().enumerate() {
        let mut per_region = Vec::with_capacity(grid.len());
        for (b, (out, cache)) in grid.boxes.iter().zip(sample?) {
            scatter_region(&mut y[i * per..(i + 1) * per], c, h, w, b, &out);
            per_region.push(cache);
        }
        caches.push(per_region);
    }
    let out = Tensor::new(&[n, c, h, w], y)?;
    Ok(tape.push(
        out,
        &[f],
        Box::new(move |ctx| {
            let g = ctx.grad;
            let mut dx = vec![T::zero(); n * per];
            exec::for_each_chunk_mut(&mut dx, per, |i, d| {
                let gs = &g[i * per..(i + 1) * per];
                for (b, cache) in grid.boxes.iter().zip(&caches[i]) {
                    let dy = gather_region(gs, c, h, w, b);
                    scatter_region(d, c, h, w, b, &cache.backward(&dy));
                }
            });
            vec![Some(dx)]
        }),
    ))
}

fn to_channel_matrix<T: Real>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for ch in 0..c {
        for i in 0..n {
            out.extend_from_slice(&x[(i * c + ch) * hw..(i * c + ch + 1) * hw]);
        }
    }
    out
}

fn from_channel_matrix<T: Real>(m: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m.len()];
    for ch in 0..c {
        for i in 0..n {
            out[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                .copy_from_slice(&m[(ch * n + i) * hw..(ch * n + i + 1) * hw]);
        }
    }
    out
}

/// Batch whitening. Training mode whitens with the batch covariance and
/// updates `running`; evaluation mode uses `running`.
pub fn bw_forward<T: Real>(
    tape: &Tape<T>,
    f: Var,
    running: &mut RunningMoments<T>,
    training: bool,
    cfg: &NormConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (n, c, h, w) = feature_dims(tape, f)?;
    if running.channels != c || running.mode != MomentsMode::Full {
        return Err(Error::invalid(
            "bw_forward",
            format!("running moments for {} channels ({:?}), input has {c}", running.channels, running.mode),
        ));
    }
    let hw = h * w;
    let xv = tape.value(f);
    let xm = to_channel_matrix(xv.data(), n, c, hw);
    if !training {
        let b = newton_forward(&running.second, c, cfg.newton_t, None)?;
        let bmat = b.result().to_vec();
        let y = matmul(&bmat, &center(&xm, &running.mean, n * hw), c, c, n * hw);
        let out = Tensor::new(&[n, c, h, w], from_channel_matrix(&y, n, c, hw))?;
        return Ok(tape.push(
            out,
            &[f],
            Box::new(move |ctx| {
                let gm = to_channel_matrix(ctx.grad, n, c, hw);
                let mut d = vec![T::zero(); gm.len()];
                T::gemm(c, c, n * hw, T::one(), &bmat, MatRef::transposed(c), &gm, MatRef::row_major(n * hw), T::zero(), &mut d);
                vec![Some(from_channel_matrix(&d, n, c, hw))]
            }),
        ));
    }
    let eps = T::lit(cfg.eps);
    let m = n * hw;
    // Covariance route always: the batch has far more columns than channels.
    let mu = row_means(&xm, m);
    let batch_cov = stats::columns_cov(&xm, c, m, eps);
    running.update(&mu, batch_cov.cov.data());
    let (y, block) = if m < c {
        whiten_block(&xm, c, m, eps, cfg.newton_t)?
    } else {
        let centered = center(&xm, &mu, m);
        let newton = newton_forward(batch_cov.cov.data(), c, cfg.newton_t, None)?;
        let y = matmul(newton.result(), &centered, c, c, m);
        (
            y,
            WhitenBlock {
                c,
                m,
                centered,
                gram_space: false,
                newton,
            },
        )
    };
    let out = Tensor::new(&[n, c, h, w], from_channel_matrix(&y, n, c, hw))?;
    Ok(tape.push(
        out,
        &[f],
        Box::new(move |ctx| {
            let gm = to_channel_matrix(ctx.grad, n, c, hw);
            vec![Some(from_channel_matrix(&block.backward(&gm), n, c, hw))]
        }),
    ))
}

/// Global-to-local whitening: LIW applied to BW output.
pub fn glw<T: Real>(
    tape: &Tape<T>,
    f: Var,
    running: &mut RunningMoments<T>,
    cfg: &NormConfig,
    training: bool,
) -> Result<Var> {
    let b = bw_forward(tape, f, running, training, cfg)?;
    liw_forward(tape, b, cfg)
}

/// How a reference (non-differentiable) whitening computes `Sigma^{-1/2}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InvSqrtRoute {
    Newton(usize),
    Eig,
    /// Off-diagonal covariance entries zeroed, exact inverse square root.
    DiagonalOnly,
}

/// Reference LIW on a single `C x H x W` (or `1 x C x H x W`) map that
/// always works in covariance space.
pub fn liw_reference<T: Real>(
    f: &Tensor<T>,
    grid: &RegionGrid,
    eps: T,
    route: InvSqrtRoute,
) -> Result<Tensor<T>> {
    let covs = stats::region_channel_cov(f, grid, eps)?;
    let (h, w) = (grid.height, grid.width);
    let c = f.len() / (h * w);
    let mut y = vec![T::zero(); f.len()];
    for (b, cc) in grid.boxes.iter().zip(&covs) {
        let inv = match route {
            InvSqrtRoute::Newton(t) => crate::linalg::inv_sqrt_newton(&cc.cov, t)?,
            InvSqrtRoute::Eig => inv_sqrt_eig(&cc.cov)?,
            InvSqrtRoute::DiagonalOnly => {
                SymMatrix::diag(&(0..c).map(|i| T::one() / cc.cov.get(i, i).sqrt()).collect::<Vec<_>>())
            }
        };
        let out = whiten(&gather_region(f.data(), c, h, w, b), &cc.mu, &inv);
        scatter_region(&mut y, c, h, w, b, &out);
    }
    Tensor::new(f.shape(), y)
}

/// `|Phi Phi^T / M - I|_F / sqrt(C)` for every region of a `C x H x W` map.
pub fn region_whiteness<T: Real>(y: &Tensor<T>, grid: &RegionGrid) -> Vec<f64> {
    let (h, w) = (grid.height, grid.width);
    let c = y.len() / (h * w);
    grid.boxes
        .iter()
        .map(|b| {
            let m = b.pixels();
            let x = gather_region(y.data(), c, h, w, b);
            let x64: Vec<f64> = x.iter().map(|v| v.to_f64().unwrap()).collect();
            let mut g = vec![0.0; c * c];
            f64::gemm(c, m, c, 1.0 / m as f64, &x64, MatRef::row_major(m), &x64, MatRef::transposed(m), 0.0, &mut g);
            (0..c).for_each(|i| g[i * c + i] -= 1.0);
            g.iter().map(|v| v * v).sum::<f64>().sqrt() / (c as f64).sqrt()
        })
        .collect()
}
