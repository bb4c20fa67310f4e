//! Region grids and per-region channel statistics.
//!
//! Channel-wise means and standard deviations of local regions act as style
//! proxies. Everything here uses population moments with `eps` added to the
//! variance (or `eps * I` to the covariance).

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::real::{MatRef, Real};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Region {
    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    /// Flat `h * w` plane offsets of the region, row-major.
    pub fn offsets(&self, width: usize) -> impl Iterator<Item = usize> + Clone {
        let (col0, cols) = (self.col0, self.cols);
        (self.row0..self.row0 + self.rows)
            .flat_map(move |r| (col0..col0 + cols).map(move |c| r * width + c))
    }
}

/// A `lambda x lambda` partition of an `h x w` plane.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionGrid {
    pub lambda: usize,
    pub height: usize,
    pub width: usize,
    pub boxes: Vec<Region>,
}

fn bands(size: usize, lambda: usize) -> Vec<(usize, usize)> {
    let base = size / lambda;
    (0..lambda)
        .map(|i| {
            let start = i * base;
            let len = if i + 1 == lambda { size - start } else { base };
            (start, len)
        })
        .collect()
}

/// Splits each side into `lambda` bands of `floor(size / lambda)`; the last
/// band takes the remainder. Boxes are listed row-major.
pub fn make_grid(height: usize, width: usize, lambda: usize) -> Result<RegionGrid> {
    if lambda == 0 || lambda > height.min(width) {
        return Err(Error::invalid(
            "make_grid",
            format!("lambda {lambda} outside 1..={}", height.min(width)),
        ));
    }
    let rows = bands(height, lambda);
    let cols = bands(width, lambda);
    let boxes = rows
        .iter()
        .flat_map(|&(row0, nr)| {
            cols.iter().map(move |&(col0, nc)| Region {
                row0,
                col0,
                rows: nr,
                cols: nc,
            })
        })
        .collect();
    Ok(RegionGrid {
        lambda,
        height,
        width,
        boxes,
    })
}

impl RegionGrid {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Smallest region, in pixels.
    pub fn min_pixels(&self) -> usize {
        self.boxes.iter().map(Region::pixels).min().unwrap_or(0)
    }

    fn check(&self, h: usize, w: usize, op: &'static str) -> Result<()> {
        if (h, w) != (self.height, self.width) {
            return Err(Error::shape(op, &[self.height, self.width], &[h, w]));
        }
        Ok(())
    }
}

/// Per-region per-channel mean and (regularized) variance, indexed
/// `[region * channels + channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats<T> {
    pub regions: usize,
    pub channels: usize,
    pub mu: Vec<T>,
    pub var: Vec<T>,
    pub eps: T,
}

impl<T: Real> ChannelStats<T> {
    pub fn mean(&self, region: usize, channel: usize) -> T {
        self.mu[region * self.channels + channel]
    }

    pub fn variance(&self, region: usize, channel: usize) -> T {
        self.var[region * self.channels + channel]
    }

    /// Standard deviation with the regularizer removed.
    pub fn std_dev(&self, region: usize, channel: usize) -> T {
        (self.variance(region, channel) - self.eps).max(T::zero()).sqrt()
    }
}

/// Mean vector and `eps`-regularized covariance of a set of channel vectors.
#[derive(Clone, Debug)]
pub struct ChannelCov<T> {
    pub mu: Vec<T>,
    pub cov: SymMatrix<T>,
}

fn chw<T: Real>(f: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match f.shape() {
        &[c, h, w] | &[1, c, h, w] => Ok((c, h, w)),
        s => Err(Error::invalid(op, format!("expected C x H x W, got {s:?}"))),
    }
}

pub(crate) fn mean_var<T: Real>(vals: impl Iterator<Item = T> + Clone, n: usize) -> (T, T) {
    let nt = T::from_usize_lossy(n);
    let pivot = vals.clone().next().unwrap_or_else(T::zero);
    let mu = pivot + vals.clone().map(|v| v - pivot).sum::<T>() / nt;
    let var = vals.map(|v| (v - mu) * (v - mu)).sum::<T>() / nt;
    (mu, var)
}

/// Statistics of each grid region of a single `C x H x W` map.
pub fn region_channel_stats<T: Real>(
    f: &Tensor<T>,
    grid: &RegionGrid,
    eps: T,
) -> Result<ChannelStats<T>> {
    let (c, h, w) = chw(f, "region_channel_stats")?;
    grid.check(h, w, "region_channel_stats")?;
    let mut mu = Vec::with_capacity(grid.len() * c);
    let mut var = Vec::with_capacity(grid.len() * c);
    for b in &grid.boxes {
        for ch in 0..c {
            let plane = &f.data()[ch * h * w..(ch + 1) * h * w];
            let (m, v) = mean_var(b.offsets(w).map(|o| plane[o]), b.pixels());
            mu.push(m);
            var.push(v + eps);
        }
    }
    Ok(ChannelStats {
        regions: grid.len(),
        channels: c,
        mu,
        var,
        eps,
    })
}

/// Per-channel statistics pooled over a whole `N x C x H x W` batch.
pub fn batch_channel_stats<T: Real>(f: &Tensor<T>, eps: T) -> Result<ChannelStats<T>> {
    let (n, c, h, w) = f.dims4()?;
    let hw = h * w;
    let mut mu = Vec::with_capacity(c);
    let mut var = Vec::with_capacity(c);
    for ch in 0..c {
        let vals = (0..n).flat_map(|i| f.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().copied());
        let (m, v) = mean_var(vals, n * hw);
        mu.push(m);
        var.push(v + eps);
    }
    Ok(ChannelStats {
        regions: 1,
        channels: c,
        mu,
        var,
        eps,
    })
}

/// Mean computed relative to the first element, exact for constant rows.
pub(crate) fn shifted_mean<T: Real>(row: &[T], mt: T) -> T {
    let pivot = row[0];
    pivot + row.iter().map(|&v| v - pivot).sum::<T>() / mt
}

/// Mean and covariance of the columns of a row-major `c x m` matrix.
pub(crate) fn columns_cov<T: Real>(x: &[T], c: usize, m: usize, eps: T) -> ChannelCov<T> {
    let mt = T::from_usize_lossy(m);
    let mu: Vec<T> = (0..c)
        .map(|i| shifted_mean(&x[i * m..(i + 1) * m], mt))
        .collect();
    let mu_ref = &mu;
    let centered: Vec<T> = (0..c)
        .flat_map(|i| x[i * m..(i + 1) * m].iter().map(move |&v| v - mu_ref[i]))
        .collect();
    let mut cov = vec![T::zero(); c * c];
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
        &mut cov,
    );
    symmetrize_add_eps(&mut cov, c, eps);
    ChannelCov {
        mu,
        cov: SymMatrix::from_raw(c, cov),
    }
}

pub(crate) fn symmetrize_add_eps<T: Real>(cov: &mut [T], c: usize, eps: T) {
    for i in 0..c {
        for j in (i + 1)..c {
            let v = (cov[i * c + j] + cov[j * c + i]) * T::lit(0.5);
            cov[i * c + j] = v;
            cov[j * c + i] = v;
        }
        cov[i * c + i] = cov[i * c + i] + eps;
    }
}

/// Gathers region `b` of a `C x H x W` map into a row-major `C x pixels`
/// matrix.
pub(crate) fn gather_region<T: Real>(plane_data: &[T], c: usize, h: usize, w: usize, b: &Region) -> Vec<T> {
    let mut out = Vec::with_capacity(c * b.pixels());
    for ch in 0..c {
        let plane = &plane_data[ch * h * w..(ch + 1) * h * w];
        for r in b.row0..b.row0 + b.rows {
            out.extend_from_slice(&plane[r * w + b.col0..r * w + b.col0 + b.cols]);
        }
    }
    out
}

/// Inverse of [`gather_region`]: writes a `C x pixels` matrix back.
pub(crate) fn scatter_region<T: Real>(
    plane_data: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    b: &Region,
    vals: &[T],
) {
    let m = b.pixels();
    for ch in 0..c {
        let plane = &mut plane_data[ch * h * w..(ch + 1) * h * w];
        for (k, r) in (b.row0..b.row0 + b.rows).enumerate() {
            plane[r * w + b.col0..r * w + b.col0 + b.cols]
                .copy_from_slice(&vals[ch * m + k * b.cols..ch * m + (k + 1) * b.cols]);
        }
    }
}

/// Covariance of the channel vectors inside each grid region.
pub fn region_channel_cov<T: Real>(
    f: &Tensor<T>,
    grid: &RegionGrid,
    eps: T,
) -> Result<Vec<ChannelCov<T>>> {
    let (c, h, w) = chw(f, "region_channel_cov")?;
    grid.check(h, w, "region_channel_cov")?;
    Ok(grid
        .boxes
        .iter()
        .map(|b| columns_cov(&gather_region(f.data(), c, h, w, b), c, b.pixels(), eps))
        .collect())
}

/// Covariance over all `N * H * W` channel vectors of a batch.
pub fn batch_cov<T: Real>(f: &Tensor<T>, eps: T) -> Result<ChannelCov<T>> {
    let (n, c, h, w) = f.dims4()?;
    let hw = h * w;
    if n * hw < 2 {
        return Err(Error::invalid("batch_cov", "need at least two channel vectors"));
    }
    let mut x = Vec::with_capacity(c * n * hw);
    for ch in 0..c {
        for i in 0..n {
            x.extend_from_slice(&f.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw]);
        }
    }
    Ok(columns_cov(&x, c, n * hw, eps))
}

/// One row of a style report.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleRow {
    pub region: usize,
    pub channel: usize,
    pub mu_a: f64,
    pub std_a: f64,
    pub mu_b: f64,
    pub std_b: f64,
}

/// Per-region per-channel mean and standard deviation of both images of a
/// pair.
pub fn style_report<T: Real>(xa: &Tensor<T>, xb: &Tensor<T>, lambda_prime: usize) -> Result<Vec<StyleRow>> {
    if xa.shape() != xb.shape() {
        return Err(Error::shape("style_report", xa.shape(), xb.shape()));
    }
    let (_, h, w) = chw(xa, "style_report")?;
    let grid = make_grid(h, w, lambda_prime)?;
    let eps = T::lit(DEFAULT_EPS);
    let sa = region_channel_stats(xa, &grid, eps)?;
    let sb = region_channel_stats(xb, &grid, eps)?;
    let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
    let mut rows = Vec::with_capacity(sa.regions * sa.channels);
    for r in 0..sa.regions {
        for c in 0..sa.channels {
            rows.push(StyleRow {
                region: r,
                channel: c,
                mu_a: f(sa.mean(r, c)),
                std_a: f(sa.std_dev(r, c)),
                mu_b: f(sb.mean(r, c)),
                std_b: f(sb.std_dev(r, c)),
            });
        }
    }
    Ok(rows)
}

/// Formats with nine significant digits.
pub fn sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let mag = v.abs().log10().floor() as i32;
    if (-5..=9).contains(&mag) {
        let decimals = (8 - mag).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        format!("{v:.8e}")
    }
}

pub fn style_report_csv(rows: &[StyleRow]) -> String {
    let mut out = String::from("region,channel,mu_a,std_a,mu_b,std_b\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.region,
            r.channel,
            sig9(r.mu_a),
            sig9(r.std_a),
            sig9(r.mu_b),
            sig9(r.std_b)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-2.0..3.0))
    }

    #[test]
    fn grid_examples() {
        let g = make_grid(8, 8, 2).unwrap();
        assert_eq!(g.len(), 4);
        assert!(g.boxes.iter().all(|b| b.rows == 4 && b.cols == 4));
        let g = make_grid(8, 8, 1).unwrap();
        assert_eq!(g.boxes, vec![Region { row0: 0, col0: 0, rows: 8, cols: 8 }]);
        let g = make_grid(7, 7, 2).unwrap();
        let sizes: Vec<_> = g.boxes.iter().map(|b| (b.rows, b.cols)).collect();
        assert_eq!(sizes, vec![(3, 3), (3, 4), (4, 3), (4, 4)]);
        assert_eq!(g.boxes.iter().map(Region::pixels).sum::<usize>(), 49);
        assert!(make_grid(4, 8, 5).is_err());
        assert!(make_grid(4, 4, 0).is_err());
    }

    #[test]
    fn grid_tiles_exhaustively() {
        for h in 1..=24 {
            for w in 1..=24 {
                for lambda in 1..=h.min(w).min(16) {
                    let g = make_grid(h, w, lambda).unwrap();
                    let mut hits = vec![0u8; h * w];
                    for b in &g.boxes {
                        assert!(b.rows >= 1 && b.cols >= 1);
                        b.offsets(w).for_each(|o| hits[o] += 1);
                    }
                    assert!(hits.iter().all(|&c| c == 1), "{h}x{w} lambda {lambda}");
                }
            }
        }
    }

    #[test]
    fn stats_examples() {
        let g = make_grid(4, 4, 2).unwrap();
        let s = region_channel_stats(&Tensor::full(&[2, 4, 4], 3.0), &g, 1e-5).unwrap();
        assert!(s.mu.iter().all(|&m| m == 3.0));
        assert!(s.var.iter().all(|&v| v == 1e-5));

        let g = make_grid(2, 2, 1).unwrap();
        let t = Tensor::<f64>::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = region_channel_stats(&t, &g, 1e-5).unwrap();
        assert_eq!(s.mu, vec![2.5]);
        assert!((s.var[0] - (1.25 + 1e-5)).abs() < 1e-15);
    }

    #[test]
    fn region_stats_match_naive_loop() {
        let t = random(&[3, 9, 11], 1);
        let g = make_grid(9, 11, 3).unwrap();
        let s = region_channel_stats(&t, &g, 1e-5).unwrap();
        for (r, b) in g.boxes.iter().enumerate() {
            for c in 0..3 {
                let mut vals = vec![];
                for y in b.row0..b.row0 + b.rows {
                    for x in b.col0..b.col0 + b.cols {
                        vals.push(t.data()[c * 99 + y * 11 + x]);
                    }
                }
                let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
                let v: f64 = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
                assert!((s.mean(r, c) - m).abs() < 1e-12);
                assert!((s.variance(r, c) - v - 1e-5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_stats_examples() {
        let s = batch_channel_stats(&Tensor::full(&[1, 2, 3, 3], 7.0), 1e-5).unwrap();
        assert_eq!(s.mu, vec![7.0, 7.0]);
        assert_eq!(s.var, vec![1e-5, 1e-5]);
        let mut data = vec![0.0; 9];
        data.extend(vec![2.0; 9]);
        let t = Tensor::<f64>::new(&[2, 1, 3, 3], data).unwrap();
        let s = batch_channel_stats(&t, 1e-5).unwrap();
        assert_eq!(s.mu, vec![1.0]);
        assert!((s.var[0] - 1.0 - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn batch_stats_match_naive_loop_and_single_region() {
        let t = random(&[3, 2, 5, 4], 2);
        let s = batch_channel_stats(&t, 1e-5).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|i| (0..20).map(move |k| (i, k)))
                .map(|(i, k)| t.data()[(i * 2 + c) * 20 + k])
                .collect();
            let m = vals.iter().sum::<f64>() / 60.0;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 60.0;
            assert!((s.mu[c] - m).abs() < 1e-12);
            assert!((s.var[c] - v - 1e-5).abs() < 1e-12);
        }
        let one = random(&[1, 3, 6, 6], 4);
        let g = make_grid(6, 6, 1).unwrap();
        let a = region_channel_stats(&one, &g, 1e-5).unwrap();
        let b = batch_channel_stats(&one, 1e-5).unwrap();
        for (x, y) in a.mu.iter().zip(&b.mu).chain(a.var.iter().zip(&b.var)) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn cov_examples() {
        let g = make_grid(4, 4, 1).unwrap();
        let c = region_channel_cov(&Tensor::full(&[3, 4, 4], 2.0), &g, 1e-5).unwrap();
        assert_eq!(c[0].cov, SymMatrix::identity(3).scaled(1e-5));

        // Identical channels: perfectly correlated.
        let sig: Vec<f64> = (0..16).map(|i| (i as f64 * 0.9).sin()).collect();
        let mut data = sig.clone();
        data.extend(&sig);
        let t = Tensor::new(&[2, 4, 4], data).unwrap();
        let c = region_channel_cov(&t, &g, 1e-5).unwrap();
        let cov = &c[0].cov;
        assert!((cov.get(0, 1) - (cov.get(0, 0) - 1e-5)).abs() < 1e-14);
    }

    #[test]
    fn cov_matches_naive_accumulation_and_diag_matches_var() {
        let t = random(&[4, 7, 6], 5);
        let g = make_grid(7, 6, 2).unwrap();
        let covs = region_channel_cov(&t, &g, 1e-5).unwrap();
        let stats = region_channel_stats(&t, &g, 1e-5).unwrap();
        for (r, b) in g.boxes.iter().enumerate() {
            let m = b.pixels() as f64;
            for i in 0..4 {
                for j in 0..4 {
                    let xi: Vec<f64> = b.offsets(6).map(|o| t.data()[i * 42 + o]).collect();
                    let xj: Vec<f64> = b.offsets(6).map(|o| t.data()[j * 42 + o]).collect();
                    let mi = xi.iter().sum::<f64>() / m;
                    let mj = xj.iter().sum::<f64>() / m;
                    let mut cij: f64 =
                        xi.iter().zip(&xj).map(|(a, b)| (a - mi) * (b - mj)).sum::<f64>() / m;
                    if i == j {
                        cij += 1e-5;
                    }
                    assert!((covs[r].cov.get(i, j) - cij).abs() < 1e-10);
                }
                assert!((covs[r].cov.get(i, i) - stats.variance(r, i)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn batch_cov_examples() {
        let c = batch_cov(&Tensor::full(&[2, 3, 2, 2], 0.4), 1e-5).unwrap();
        assert!(c.cov.rel_distance(&SymMatrix::identity(3).scaled(1e-5)) < 1e-9);

        // Columns +-sqrt(C) e_i over 2C vectors: zero mean, cov = I.
        let cdim = 3;
        let s = (cdim as f64).sqrt();
        let mut data = vec![0.0; 2 * cdim * cdim];
        // Layout 1 x C x 1 x 2C.
        for k in 0..cdim {
            data[k * 2 * cdim + k] = s;
            data[k * 2 * cdim + cdim + k] = -s;
        }
        let t = Tensor::new(&[1, cdim, 1, 2 * cdim], data).unwrap();
        let c = batch_cov(&t, 1e-5).unwrap();
        let want = SymMatrix::identity(cdim).scaled(1.0 + 1e-5);
        assert!(c.cov.rel_distance(&want) < 1e-12);
        assert!(batch_cov(&Tensor::<f64>::zeros(&[1, 2, 1, 1]), 1e-5).is_err());
    }

    #[test]
    fn style_report_examples() {
        let a = random(&[3, 16, 16], 6).cast::<f64>();
        let rows = style_report(&a, &a, 4).unwrap();
        assert_eq!(rows.len(), 16 * 3);
        assert!(rows.iter().all(|r| r.mu_a == r.mu_b && r.std_a == r.std_b));

        let b = Tensor::new(a.shape(), a.data().iter().map(|v| v + 0.1).collect()).unwrap();
        let rows = style_report(&a, &b, 4).unwrap();
        for r in &rows {
            assert!((r.mu_b - r.mu_a - 0.1).abs() < 1e-12);
            assert!((r.std_a - r.std_b).abs() < 1e-9);
        }
        assert!(style_report(&a, &random(&[3, 8, 8], 1), 2).is_err());

        let csv = style_report_csv(&rows[..2]);
        assert!(csv.starts_with("region,channel,mu_a,std_a,mu_b,std_b\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(sig9(0.5), "0.500000000");
        assert_eq!(sig9(123.456), "123.456000");
        assert_eq!(sig9(0.0), "0");
        assert_eq!(sig9(1.5e-9), "1.50000000e-9");
    }
}
