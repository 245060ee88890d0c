//! Scalar root finding, quadrature and a minimal CSR matrix.

/// Root of an increasing function on `[lo, hi]` by Newton steps safeguarded with bisection.
///
/// `f` returns `(value, derivative)`. Requires `f(lo) <= 0 <= f(hi)`; returns `None` otherwise
/// or if `max_iter` is exhausted before the bracket shrinks below `rtol`.
pub fn safeguarded_newton<F>(f: F, lo: f64, hi: f64, x0: f64, rtol: f64, max_iter: usize) -> Option<f64>
where
    F: Fn(f64) -> (f64, f64),
{
    let (mut a, mut b) = (lo, hi);
    let (fa, _) = f(a);
    let (fb, _) = f(b);
    if fa == 0.0 {
        return Some(a);
    }
    if fb == 0.0 {
        return Some(b);
    }
    if fa > 0.0 || fb < 0.0 {
        return None;
    }
    let mut x = if x0 > a && x0 < b { x0 } else { 0.5 * (a + b) };
    for _ in 0..max_iter {
        let (fx, dfx) = f(x);
        if fx == 0.0 {
            return Some(x);
        }
        if fx < 0.0 {
            a = x;
        } else {
            b = x;
        }
        let newton = x - fx / dfx;
        let next = if dfx > 0.0 && newton > a && newton < b {
            newton
        } else {
            0.5 * (a + b)
        };
        if (next - x).abs() <= rtol * x.abs().max(f64::MIN_POSITIVE) || (b - a) <= rtol * x.abs() {
            return Some(next);
        }
        x = next;
    }
    None
}

/// Composite Simpson rule with `n` (even) panels.
pub fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, n: usize) -> f64 {
    let n = if n % 2 == 1 { n + 1 } else { n.max(2) };
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Composite Simpson with panel doubling and Richardson extrapolation until two successive
/// extrapolated values agree to `rtol` relative (or `atol` absolute).
pub fn simpson_richardson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, rtol: f64, atol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let mut n = 32;
    let mut coarse = simpson(f, a, b, n);
    let mut prev_extrap = f64::NAN;
    for _ in 0..12 {
        n *= 2;
        let fine = simpson(f, a, b, n);
        let extrap = fine + (fine - coarse) / 15.0;
        if (extrap - prev_extrap).abs() <= rtol * extrap.abs() + atol {
            return extrap;
        }
        prev_extrap = extrap;
        coarse = fine;
    }
    prev_extrap
}

/// Adaptive Simpson quadrature to absolute tolerance `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn rec<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 40)
}

/// Compressed sparse row matrix with deterministic assembly from triplets.
#[derive(Clone, Debug)]
pub struct Csr {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    /// Duplicate entries are summed in insertion order.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Csr {
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        order.sort_by_key(|&k| (triplets[k].0, triplets[k].1, k));
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for &k in &order {
            let (r, c, v) = triplets[k];
            assert!(r < nrows && c < ncols, "triplet out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..nrows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Csr {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        for r in 0..self.nrows {
            let mut s = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                s += self.values[k] * x[self.col_idx[k]];
            }
            y[r] = s;
        }
        y
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        for k in self.row_ptr[r]..self.row_ptr[r + 1] {
            if self.col_idx[k] == c {
                return self.values[k];
            }
        }
        0.0
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.nrows)
            .map(|r| {
                (self.row_ptr[r]..self.row_ptr[r + 1])
                    .map(|k| self.values[k].abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    pub fn row_is_zero(&self, r: usize) -> bool {
        (self.row_ptr[r]..self.row_ptr[r + 1]).all(|k| self.values[k] == 0.0)
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut t = Vec::with_capacity(self.values.len());
        for r in 0..self.nrows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                t.push((r, self.col_idx[k], self.values[k]));
            }
        }
        t
    }
}

/// Sparse LU factorization backed by faer.
pub struct SparseLu {
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
    n: usize,
}

impl SparseLu {
    pub fn factor(n: usize, triplets: &[(usize, usize, f64)]) -> Option<SparseLu> {
        let a = faer::sparse::SparseColMat::<usize, f64>::try_new_from_triplets(n, n, triplets).ok()?;
        let lu = a.sp_lu().ok()?;
        Some(SparseLu { lu, n })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        use faer::prelude::SpSolver;
        let rhs = faer::Mat::<f64>::from_fn(self.n, 1, |i, _| b[i]);
        let x = self.lu.solve(&rhs);
        (0..self.n).map(|i| x.read(i, 0)).collect()
    }

    pub fn solve_many(&self, b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        use faer::prelude::SpSolver;
        if b.is_empty() {
            return Vec::new();
        }
        let rhs = faer::Mat::<f64>::from_fn(self.n, b.len(), |i, j| b[j][i]);
        let x = self.lu.solve(&rhs);
        (0..b.len())
            .map(|j| (0..self.n).map(|i| x.read(i, j)).collect())
            .collect()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `n` points log-spaced between `a` and `b` inclusive.
pub fn logspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    let (la, lb) = (a.ln(), b.ln());
    (0..n)
        .map(|i| (la + (lb - la) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn newton_finds_cube_root() {
        let r = safeguarded_newton(|x| (x * x * x - 2.0, 3.0 * x * x), 0.0, 2.0, 1.0, 1e-14, 100).unwrap();
        assert!((r - 2f64.powf(1.0 / 3.0)).abs() < 1e-13, "root {r}");
    }

    #[test]
    fn newton_rejects_bad_bracket() {
        assert!(safeguarded_newton(|x| (x - 5.0, 1.0), 0.0, 1.0, 0.5, 1e-12, 50).is_none());
    }

    #[test]
    fn simpson_richardson_integrates_exp() {
        let v = simpson_richardson(&|x: f64| x.exp(), 0.0, 1.0, 1e-14, 0.0);
        assert!((v - (1f64.exp() - 1.0)).abs() < 1e-13, "value {v}");
    }

    #[test]
    fn adaptive_simpson_integrates_reciprocal() {
        let v = adaptive_simpson(&|x: f64| 1.0 / x, 1.0, 10.0, 1e-13);
        assert!((v - 10f64.ln()).abs() < 1e-11, "value {v}");
    }

    #[test]
    fn csr_sums_duplicates_and_multiplies() {
        let a = Csr::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 2.0), (0, 0, 3.0), (1, 1, -1.0)]);
        assert_eq!(a.get(0, 0), 4.0);
        assert_eq!(a.matvec(&[1.0, 1.0]), vec![6.0, -1.0]);
        assert_eq!(a.norm_inf(), 6.0);
    }

    #[test]
    fn sparse_lu_solves_tridiagonal() {
        let n = 6;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 4.0));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -2.0));
            }
        }
        let lu = SparseLu::factor(n, &t).unwrap();
        let b: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let x = lu.solve(&b);
        let a = Csr::from_triplets(n, n, &t);
        let r = a.matvec(&x);
        for i in 0..n {
            assert!((r[i] - b[i]).abs() < 1e-12);
        }
    }
}
