//! Symmetric eigendecomposition and inverse square roots of covariance
//! matrices.
//!
//! Two routes are provided. [`inv_sqrt_eig`] goes through a cyclic Jacobi
//! eigendecomposition and serves as the exact reference. [`inv_sqrt_newton`]
//! runs a fixed number of coupled Newton-Schulz steps on the trace-normalized
//! matrix; it is a polynomial in the input, so it is cheap and can be
//! differentiated by unrolling (see [`NewtonCache`]).

use crate::error::{Error, Result};
use crate::real::{matmul, MatRef, Real};

/// Dense symmetric `dim x dim` matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix<T> {
    dim: usize,
    data: Vec<T>,
}

fn frob<T: Real>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

impl<T: Real> SymMatrix<T> {
    pub fn new(dim: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != dim * dim || dim == 0 {
            return Err(Error::invalid(
                "sym_matrix",
                format!("{} entries for dimension {dim}", data.len()),
            ));
        }
        let mut asym = T::zero();
        for i in 0..dim {
            for j in (i + 1)..dim {
                let d = data[i * dim + j] - data[j * dim + i];
                asym = asym + d * d + d * d;
            }
        }
        let tol = T::lit(1e-9).max(T::epsilon() * T::lit(16.0));
        if asym.sqrt() > tol * frob(&data).max(T::min_positive_value()) {
            return Err(Error::invalid("sym_matrix", "matrix is not symmetric"));
        }
        Ok(SymMatrix { dim, data })
    }

    /// Builds from data known to be symmetric (e.g. an outer product).
    pub(crate) fn from_raw(dim: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), dim * dim);
        SymMatrix { dim, data }
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![T::zero(); dim * dim];
        (0..dim).for_each(|i| data[i * dim + i] = T::one());
        SymMatrix { dim, data }
    }

    pub fn diag(values: &[T]) -> Self {
        let dim = values.len();
        let mut data = vec![T::zero(); dim * dim];
        values
            .iter()
            .enumerate()
            .for_each(|(i, &v)| data[i * dim + i] = v);
        SymMatrix { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.dim + j]
    }

    pub fn trace(&self) -> T {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius(&self) -> T {
        frob(&self.data)
    }

    pub fn scaled(&self, c: T) -> Self {
        SymMatrix {
            dim: self.dim,
            data: self.data.iter().map(|&v| v * c).collect(),
        }
    }

    /// `self * other`, not necessarily symmetric; returned row-major.
    pub fn mul(&self, other: &SymMatrix<T>) -> Vec<T> {
        matmul(&self.data, &other.data, self.dim, self.dim, self.dim)
    }

    /// Relative Frobenius distance `|self - other| / |other|`.
    pub fn rel_distance(&self, other: &SymMatrix<T>) -> T {
        let diff: Vec<T> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        frob(&diff) / frob(&other.data)
    }

    pub fn cast<U: Real>(&self) -> SymMatrix<U> {
        SymMatrix {
            dim: self.dim,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }
}

/// `Q diag(eigvals) Q^T` with eigenvalues in descending order and the
/// matching eigenvectors in the columns of `q` (row-major).
#[derive(Clone, Debug)]
pub struct EigDecomposition {
    pub dim: usize,
    pub q: Vec<f64>,
    pub eigvals: Vec<f64>,
}

impl EigDecomposition {
    /// `Q f(Lambda) Q^T`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        let n = self.dim;
        let mut scaled = self.q.clone();
        for i in 0..n {
            for j in 0..n {
                scaled[i * n + j] *= f(self.eigvals[j]);
            }
        }
        let mut out = vec![0.0; n * n];
        f64::gemm(
            n,
            n,
            n,
            1.0,
            &scaled,
            MatRef::row_major(n),
            &self.q,
            MatRef::transposed(n),
            0.0,
            &mut out,
        );
        out
    }
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn sym_eig<T: Real>(a: &SymMatrix<T>) -> Result<EigDecomposition> {
    let n = a.dim;
    if n > 512 {
        return Err(Error::invalid("sym_eig", format!("dimension {n} exceeds 512")));
    }
    let mut m: Vec<f64> = a.data.iter().map(|v| v.to_f64().unwrap()).collect();
    // Symmetrize exactly; `SymMatrix::new` allows tiny asymmetry.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = avg;
            m[j * n + i] = avg;
        }
    }
    let norm = frob(&m);
    let mut v = vec![0.0; n * n];
    (0..n).for_each(|i| v[i * n + i] = 1.0);

    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    for _ in 0..JACOBI_MAX_SWEEPS {
        if off(&m) <= 1e-12 * norm {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // Columns p, q.
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                // Rows p, q.
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let eigvals = order.iter().map(|&i| m[i * n + i]).collect();
    let mut q = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            q[k * n + dst] = v[k * n + src];
        }
    }
    Ok(EigDecomposition { dim: n, q, eigvals })
}

/// `Q Lambda^{-1/2} Q^T` through the eigendecomposition.
pub fn inv_sqrt_eig<T: Real>(a: &SymMatrix<T>) -> Result<SymMatrix<T>> {
    let eig = sym_eig(a)?;
    if let Some(&bad) = eig.eigvals.iter().find(|&&l| l <= 0.0) {
        return Err(Error::numeric(
            "inv_sqrt_eig",
            format!("non-positive eigenvalue {bad:e}"),
        ));
    }
    let out = eig.reconstruct_with(|l| 1.0 / l.sqrt());
    Ok(SymMatrix::from_raw(
        a.dim,
        out.into_iter().map(|v| T::from_f64(v).unwrap()).collect(),
    ))
}

/// Intermediate values of the Newton-Schulz iteration needed for the
/// reverse pass.
pub(crate) struct NewtonCache<T> {
    dim: usize,
    trace: T,
    normalized: Vec<T>,
    /// Iterates `Y_0 .. Y_{T-1}`.
    iterates: Vec<Vec<T>>,
    result: Vec<T>,
}

/// Forward Newton-Schulz iteration on a general row-major `dim x dim`
/// matrix. Returns `Y_T / sqrt(trace)` and the cache for the backward pass.
pub(crate) fn newton_forward<T: Real>(
    a: &[T],
    dim: usize,
    iters: usize,
    trace_override: Option<T>,
) -> Result<NewtonCache<T>> {
    let trace = trace_override.unwrap_or_else(|| (0..dim).map(|i| a[i * dim + i]).sum());
    if !(trace > T::zero()) {
        return Err(Error::numeric(
            "inv_sqrt_newton",
            format!("trace {trace} is not positive"),
        ));
    }
    let normalized: Vec<T> = a.iter().map(|&v| v / trace).collect();
    let mut y = vec![T::zero(); dim * dim];
    (0..dim).for_each(|i| y[i * dim + i] = T::one());
    let mut iterates = Vec::with_capacity(iters);
    let (three_half, half) = (T::lit(1.5), T::lit(0.5));
    for _ in 0..iters {
        let w1 = matmul(&y, &normalized, dim, dim, dim);
        let w2 = matmul(&y, &w1, dim, dim, dim);
        let mut next = y.iter().map(|&v| v * three_half).collect::<Vec<T>>();
        T::gemm(
            dim,
            dim,
            dim,
            -half,
            &y,
            MatRef::row_major(dim),
            &w2,
            MatRef::row_major(dim),
            T::one(),
            &mut next,
        );
        iterates.push(std::mem::replace(&mut y, next));
    }
    let scale = T::one() / trace.sqrt();
    let result = y.iter().map(|&v| v * scale).collect();
    Ok(NewtonCache {
        dim,
        trace,
        normalized,
        iterates,
        result,
    })
}

impl<T: Real> NewtonCache<T> {
    pub(crate) fn result(&self) -> &[T] {
        &self.result
    }

    /// Gradient with respect to the input matrix (entrywise) and, separately,
    /// with respect to the normalizing trace.
    ///
    /// When the trace was supplied by the caller the trace gradient must be
    /// routed by the caller; otherwise it is already folded into the matrix
    /// gradient as `d_trace * I`.
    pub(crate) fn backward(&self, d_result: &[T], trace_is_own: bool) -> (Vec<T>, T) {
        let n = self.dim;
        let s = self.trace;
        let inv_sqrt_s = T::one() / s.sqrt();
        let mut dy: Vec<T> = d_result.iter().map(|&g| g * inv_sqrt_s).collect();
        let mut ds = -T::lit(0.5) / s
            * d_result
                .iter()
                .zip(&self.result)
                .map(|(&g, &b)| g * b)
                .sum::<T>();
        let mut dan = vec![T::zero(); n * n];
        let an = &self.normalized;
        let mt = |a: &[T], b: &[T]| -> Vec<T> {
            // a^T * b
            let mut c = vec![T::zero(); n * n];
            T::gemm(
                n,
                n,
                n,
                T::one(),
                a,
                MatRef::transposed(n),
                b,
                MatRef::row_major(n),
                T::zero(),
                &mut c,
            );
            c
        };
        let mbt = |a: &[T], b: &[T], c: &mut [T]| {
            // c += a * b^T
            T::gemm(
                n,
                n,
                n,
                T::one(),
                a,
                MatRef::row_major(n),
                b,
                MatRef::transposed(n),
                T::one(),
                c,
            );
        };
        for (t, y) in self.iterates.iter().enumerate().rev() {
            let w1 = matmul(y, an, n, n, n);
            let w2 = matmul(y, &w1, n, n, n);
            let gp: Vec<T> = dy.iter().map(|&g| g * -T::lit(0.5)).collect();
            let dw2 = mt(y, &gp);
            let dw1 = mt(y, &dw2);
            let dan_t = mt(y, &dw1);
            dan.iter_mut().zip(&dan_t).for_each(|(a, &b)| *a = *a + b);
            if t == 0 {
                break;
            }
            let mut prev: Vec<T> = dy.iter().map(|&g| g * T::lit(1.5)).collect();
            mbt(&gp, &w2, &mut prev);
            mbt(&dw2, &w1, &mut prev);
            mbt(&dw1, an, &mut prev);
            dy = prev;
        }
        let mut da: Vec<T> = dan.iter().map(|&g| g / s).collect();
        // an = a / s also depends on s; a = an * s.
        ds = ds
            - dan
                .iter()
                .zip(an)
                .map(|(&g, &v)| g * v)
                .sum::<T>()
                / s;
        if trace_is_own {
            (0..n).for_each(|i| da[i * n + i] = da[i * n + i] + ds);
            (da, T::zero())
        } else {
            (da, ds)
        }
    }
}

/// Newton-Schulz approximation of `a^{-1/2}` with `iters` steps.
pub fn inv_sqrt_newton<T: Real>(a: &SymMatrix<T>, iters: usize) -> Result<SymMatrix<T>> {
    let cache = newton_forward(&a.data, a.dim, iters, None)?;
    Ok(SymMatrix::from_raw(a.dim, cache.result))
}

/// Residual `|Y A_N Y - I|_F` of each Newton iterate, for convergence
/// diagnostics.
pub fn newton_residuals<T: Real>(a: &SymMatrix<T>, iters: usize) -> Result<Vec<T>> {
    let n = a.dim;
    let cache = newton_forward(&a.data, n, iters + 1, None)?;
    Ok(cache
        .iterates
        .iter()
        .skip(1)
        .map(|y| {
            let mut r = matmul(&matmul(y, &cache.normalized, n, n, n), y, n, n, n);
            (0..n).for_each(|i| r[i * n + i] = r[i * n + i] - T::one());
            frob(&r)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> SymMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut a = vec![0.0; n * n];
        f64::gemm(
            n,
            n,
            n,
            1.0,
            &m,
            MatRef::transposed(n),
            &m,
            MatRef::row_major(n),
            0.0,
            &mut a,
        );
        (0..n).for_each(|i| a[i * n + i] += 1.0);
        SymMatrix::new(n, a).unwrap()
    }

    #[test]
    fn identity_eig() {
        let e = sym_eig(&SymMatrix::<f64>::identity(4)).unwrap();
        assert!(e.eigvals.iter().all(|&l| (l - 1.0).abs() < 1e-15));
        for i in 0..4 {
            let col_norm: f64 = (0..4).map(|k| e.q[k * 4 + i].abs()).sum();
            assert!((col_norm - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn diagonal_eig_sorted_descending() {
        let e = sym_eig(&SymMatrix::diag(&[1.0, 4.0])).unwrap();
        assert_eq!(e.eigvals, vec![4.0, 1.0]);
        assert_eq!(e.q[1].abs(), 1.0);
        assert_eq!(e.q[2].abs(), 1.0);
    }

    #[test]
    fn random_spd_reconstruction_and_orthogonality() {
        let a = random_spd(16, 3);
        let e = sym_eig(&a).unwrap();
        let r = e.reconstruct_with(|l| l);
        let diff: Vec<f64> = r.iter().zip(a.data()).map(|(x, y)| x - y).collect();
        assert!(frob(&diff) / a.frobenius() < 1e-9);
        let n = 16;
        let mut qtq = vec![0.0; n * n];
        f64::gemm(
            n,
            n,
            n,
            1.0,
            &e.q,
            MatRef::transposed(n),
            &e.q,
            MatRef::row_major(n),
            0.0,
            &mut qtq,
        );
        (0..n).for_each(|i| qtq[i * n + i] -= 1.0);
        assert!(frob(&qtq) < 1e-8);
        assert!(e.eigvals.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn asymmetric_rejected() {
        assert!(SymMatrix::new(2, vec![1.0, 2.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn inv_sqrt_analytic_cases() {
        let i = SymMatrix::<f64>::identity(3);
        assert!(inv_sqrt_eig(&i).unwrap().rel_distance(&i) < 1e-15);
        let b = inv_sqrt_eig(&SymMatrix::<f64>::diag(&[4.0, 9.0])).unwrap();
        assert!((b.get(0, 0) - 0.5).abs() < 1e-15 && (b.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!(inv_sqrt_eig(&SymMatrix::diag(&[1.0, -1.0])).is_err());
    }

    #[test]
    fn inv_sqrt_defining_identity() {
        let a = random_spd(16, 9);
        let b = inv_sqrt_eig(&a).unwrap();
        let mut bab = matmul(&matmul(b.data(), a.data(), 16, 16, 16), b.data(), 16, 16, 16);
        (0..16).for_each(|i| bab[i * 16 + i] -= 1.0);
        assert!(frob(&bab) / 4.0 < 1e-8);
    }

    #[test]
    fn newton_fixed_point_and_diagonal() {
        let i = SymMatrix::<f64>::identity(5);
        assert!(inv_sqrt_newton(&i, 7).unwrap().rel_distance(&i) < 1e-4);
        assert!(inv_sqrt_newton(&i, 15).unwrap().rel_distance(&i) < 1e-12);
        let b = inv_sqrt_newton(&SymMatrix::<f64>::diag(&[4.0, 9.0]), 7).unwrap();
        assert!((b.get(0, 0) - 0.5).abs() < 1e-4);
        assert!((b.get(1, 1) - 1.0 / 3.0).abs() < 1e-4);
        assert!(b.get(0, 1).abs() < 1e-15);
    }

    #[test]
    fn newton_rejects_non_positive_trace() {
        assert!(inv_sqrt_newton(&SymMatrix::diag(&[0.0, 0.0]), 5).is_err());
        assert!(inv_sqrt_newton(&SymMatrix::diag(&[-1.0, 0.5]), 5).is_err());
    }

    #[test]
    fn newton_residual_monotone() {
        let a = random_spd(8, 11);
        let r = newton_residuals(&a, 8).unwrap();
        assert!(r.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{r:?}");
    }
}
