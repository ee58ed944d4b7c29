//! Dense linear algebra and scalar Gaussian helpers shared by every model.
//!
//! Matrices are stored row-major in flat `Vec<f64>` buffers. Sizes stay in the
//! low thousands at most, so everything here is plain dense O(n³) code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("design matrix is rank deficient (column {column})")]
    RankDeficient { column: usize },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Symmetric matrix with a strictly positive diagonal.
///
/// Positive definiteness itself is only established by a successful
/// [`cholesky`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct PosDefMatrix {
    order: usize,
    entries: Vec<f64>,
}

impl PosDefMatrix {
    pub fn new(order: usize, entries: Vec<f64>) -> Result<Self> {
        if order == 0 {
            return Err(NumericsError::InvalidMatrix("order must be at least 1".into()));
        }
        if entries.len() != order * order {
            return Err(NumericsError::DimensionMismatch {
                expected: order * order,
                found: entries.len(),
            });
        }
        for i in 0..order {
            let d = entries[i * order + i];
            if !(d > 0.0) || !d.is_finite() {
                return Err(NumericsError::InvalidMatrix(format!(
                    "diagonal entry {i} is not strictly positive"
                )));
            }
        }
        for i in 0..order {
            for j in (i + 1)..order {
                let a = entries[i * order + j];
                let b = entries[j * order + i];
                let scale = a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
                if (a - b).abs() > 1e-12 * scale {
                    return Err(NumericsError::NotSymmetric { row: i, col: j });
                }
            }
        }
        Ok(Self { order, entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let order = rows.len();
        let mut entries = Vec::with_capacity(order * order);
        for row in rows {
            if row.len() != order {
                return Err(NumericsError::DimensionMismatch {
                    expected: order,
                    found: row.len(),
                });
            }
            entries.extend_from_slice(row);
        }
        Self::new(order, entries)
    }

    /// Builds the matrix from a symmetric entry function; only the lower
    /// triangle is evaluated, so symmetry is exact.
    pub fn from_symmetric_fn(order: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut entries = vec![0.0; order * order];
        for i in 0..order {
            for j in 0..=i {
                let v = f(i, j);
                entries[i * order + j] = v;
                entries[j * order + i] = v;
            }
        }
        Self::new(order, entries)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.order + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.order).map(|r| r.to_vec()).collect()
    }

    /// Returns a copy with `value` added to every diagonal entry.
    pub fn with_added_diagonal(&self, value: f64) -> Self {
        let mut out = self.clone();
        for i in 0..self.order {
            out.entries[i * self.order + i] += value;
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.order, v.len())?;
        Ok(self
            .entries
            .chunks(self.order)
            .map(|row| dot(row, v))
            .collect())
    }
}

/// Lower-triangular Cholesky factor `L` with `L·Lᵀ = A`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    order: usize,
    entries: Vec<f64>,
}

impl CholeskyFactor {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.order + j]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.order).map(|r| r.to_vec()).collect()
    }

    /// Factor of `c²·A`, i.e. `c·L`, for `c > 0`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            order: self.order,
            entries: self.entries.iter().map(|v| v * c).collect(),
        }
    }

    /// `L·Lᵀ` as a dense row-major buffer.
    pub fn reconstruct(&self) -> Vec<f64> {
        let n = self.order;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let k_max = j + 1;
                let v = dot(&self.entries[i * n..i * n + k_max], &self.entries[j * n..j * n + k_max]);
                out[i * n + j] = v;
                out[j * n + i] = v;
            }
        }
        out
    }

    /// Solves `L·z = rhs`.
    pub fn solve_lower(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        check_len(self.order, rhs.len())?;
        let n = self.order;
        let mut z = rhs.to_vec();
        for i in 0..n {
            let row = &self.entries[i * n..i * n + i];
            let s = z[i] - dot(row, &z[..i]);
            z[i] = s / self.entries[i * n + i];
        }
        Ok(z)
    }

    /// Solves `Lᵀ·x = rhs`.
    pub fn solve_upper(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        check_len(self.order, rhs.len())?;
        let n = self.order;
        let mut x = rhs.to_vec();
        for i in (0..n).rev() {
            let xi = x[i] / self.entries[i * n + i];
            x[i] = xi;
            // column i of Lᵀ above the diagonal is row i of L left of the diagonal
            for k in 0..i {
                x[k] -= self.entries[i * n + k] * xi;
            }
        }
        Ok(x)
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let z = self.solve_lower(rhs)?;
        self.solve_upper(&z)
    }

    /// `log det(L·Lᵀ)`.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.order)
            .map(|i| self.entries[i * self.order + i].ln())
            .sum::<f64>()
    }

    /// Dense inverse of `L·Lᵀ`, row-major.
    pub fn inverse(&self) -> Vec<f64> {
        let n = self.order;
        let mut inv = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e).expect("length matches order");
            for i in 0..n {
                inv[i * n + j] = col[i];
            }
        }
        // symmetrize away rounding asymmetry
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (inv[i * n + j] + inv[j * n + i]);
                inv[i * n + j] = v;
                inv[j * n + i] = v;
            }
        }
        inv
    }

    /// `L·z`, used to colour standard normal draws.
    pub fn mul_lower(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_len(self.order, z.len())?;
        let n = self.order;
        Ok((0..n)
            .map(|i| dot(&self.entries[i * n..i * n + i + 1], &z[..=i]))
            .collect())
    }
}

/// Cholesky factorization of a symmetric positive definite matrix.
pub fn cholesky(a: &PosDefMatrix) -> Result<CholeskyFactor> {
    let n = a.order;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let row_j = j * n;
        let s = a.entries[row_j + j] - dot(&l[row_j..row_j + j], &l[row_j..row_j + j]);
        if !(s > 0.0) || !s.is_finite() {
            return Err(NumericsError::NotPositiveDefinite { index: j, pivot: s });
        }
        let d = s.sqrt();
        l[row_j + j] = d;
        for i in (j + 1)..n {
            let row_i = i * n;
            let v = a.entries[row_i + j] - dot(&l[row_i..row_i + j], &l[row_j..row_j + j]);
            l[row_i + j] = v / d;
        }
    }
    Ok(CholeskyFactor { order: n, entries: l })
}

/// Solves `(L·Lᵀ)·v = rhs`.
pub fn solve_with_factor(factor: &CholeskyFactor, rhs: &[f64]) -> Result<Vec<f64>> {
    factor.solve(rhs)
}

/// Ordinary least squares by Householder QR.
///
/// `design` holds `rows` rows of `cols` regressors each (row-major). Columns
/// whose diagonal entry in `R` falls below `1e-10` times the largest column
/// norm are reported as [`NumericsError::RankDeficient`].
pub fn least_squares(design: &[f64], rows: usize, cols: usize, y: &[f64]) -> Result<Vec<f64>> {
    if design.len() != rows * cols {
        return Err(NumericsError::DimensionMismatch {
            expected: rows * cols,
            found: design.len(),
        });
    }
    check_len(rows, y.len())?;
    if rows < cols || cols == 0 {
        return Err(NumericsError::RankDeficient { column: rows.min(cols) });
    }
    let mut a = design.to_vec();
    let mut b = y.to_vec();
    let scale = (0..cols)
        .map(|j| (0..rows).map(|i| a[i * cols + j].powi(2)).sum::<f64>().sqrt())
        .fold(0.0_f64, f64::max);
    if scale == 0.0 || !scale.is_finite() {
        return Err(NumericsError::RankDeficient { column: 0 });
    }
    let mut diag = vec![0.0; cols];
    for k in 0..cols {
        let norm = (k..rows).map(|i| a[i * cols + k].powi(2)).sum::<f64>().sqrt();
        if norm <= 1e-10 * scale {
            return Err(NumericsError::RankDeficient { column: k });
        }
        let alpha = if a[k * cols + k] > 0.0 { -norm } else { norm };
        // v = x - alpha e1, stored in place of column k
        a[k * cols + k] -= alpha;
        let vnorm2: f64 = (k..rows).map(|i| a[i * cols + k].powi(2)).sum();
        if vnorm2 > 0.0 {
            for j in (k + 1)..cols {
                let s: f64 = (k..rows).map(|i| a[i * cols + k] * a[i * cols + j]).sum();
                let f = 2.0 * s / vnorm2;
                for i in k..rows {
                    a[i * cols + j] -= f * a[i * cols + k];
                }
            }
            let s: f64 = (k..rows).map(|i| a[i * cols + k] * b[i]).sum();
            let f = 2.0 * s / vnorm2;
            for i in k..rows {
                b[i] -= f * a[i * cols + k];
            }
        }
        diag[k] = alpha;
    }
    let mut coef = vec![0.0; cols];
    for k in (0..cols).rev() {
        let mut s = b[k];
        for j in (k + 1)..cols {
            s -= a[k * cols + j] * coef[j];
        }
        coef[k] = s / diag[k];
    }
    Ok(coef)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        Err(NumericsError::DimensionMismatch { expected, found })
    } else {
        Ok(())
    }
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn std_normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Standard normal CDF through the complementary error function, which keeps
/// full relative accuracy in the lower tail.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * std::f64::consts::FRAC_1_SQRT_2)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic random stream of uniforms and standard normals.
///
/// Backed by ChaCha8 and a Box–Muller transform evaluated with `libm`, so a
/// seed gives the same sequence on every platform. Child streams obtained with
/// [`RandomStream::split`] depend only on the parent's seed and the child
/// index, never on how far the parent has advanced.
#[derive(Debug, Clone)]
pub struct RandomStream {
    id: u64,
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self {
            id: seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.id
    }

    pub fn split(&self, index: u64) -> Self {
        Self::new(splitmix64(self.id ^ splitmix64(index ^ 0xD1B5_4A32_D192_ED03)))
    }

    /// Uniform variate in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "empty range");
        self.rng.gen_range(0..n as u64) as usize
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cholesky_of_identity_is_identity() {
        let a = PosDefMatrix::from_symmetric_fn(3, |i, j| if i == j { 1.0 } else { 0.0 }).unwrap();
        let l = cholesky(&a).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(l.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(solve_with_factor(&l, &[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn cholesky_two_by_two() {
        let a = PosDefMatrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let l = cholesky(&a).unwrap();
        assert_abs_diff_eq!(l.get(0, 0), 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l.get(0, 1), 0.0);
        assert_abs_diff_eq!(l.get(1, 0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l.get(1, 1), 2.0_f64.sqrt(), epsilon = 1e-15);
        // hand multiplication: [[2,0],[1,√2]]·[[2,1],[0,√2]] = [[4,2],[2,3]]
        let back = l.reconstruct();
        for (x, y) in back.iter().zip([4.0, 2.0, 2.0, 3.0]) {
            assert_abs_diff_eq!(*x, y, epsilon = 1e-14);
        }
        let v = solve_with_factor(&l, &[4.0, 2.0]).unwrap();
        assert_abs_diff_eq!(v[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(v[1], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(l.log_det(), 8.0_f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let a = PosDefMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(
            cholesky(&a),
            Err(NumericsError::NotPositiveDefinite { index: 1, .. })
        ));
    }

    #[test]
    fn solve_rejects_wrong_length() {
        let a = PosDefMatrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let l = cholesky(&a).unwrap();
        assert_eq!(
            solve_with_factor(&l, &[1.0, 2.0, 3.0]),
            Err(NumericsError::DimensionMismatch { expected: 2, found: 3 })
        );
    }

    #[test]
    fn asymmetric_and_nonpositive_inputs_are_rejected() {
        assert!(matches!(
            PosDefMatrix::from_rows(&[vec![1.0, 0.5], vec![0.4, 1.0]]),
            Err(NumericsError::NotSymmetric { .. })
        ));
        assert!(PosDefMatrix::from_rows(&[vec![0.0]]).is_err());
        assert!(PosDefMatrix::new(0, vec![]).is_err());
    }

    #[test]
    fn inverse_matches_solves() {
        let a = PosDefMatrix::from_rows(&[
            vec![4.0, 1.0, 0.5],
            vec![1.0, 3.0, 0.2],
            vec![0.5, 0.2, 2.0],
        ])
        .unwrap();
        let l = cholesky(&a).unwrap();
        let inv = l.inverse();
        for i in 0..3 {
            for j in 0..3 {
                let s: f64 = (0..3).map(|k| a.get(i, k) * inv[k * 3 + j]).sum();
                assert_abs_diff_eq!(s, if i == j { 1.0 } else { 0.0 }, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn normal_pdf_values() {
        assert_abs_diff_eq!(std_normal_pdf(0.0), 0.398_942_280_401_432_7, epsilon = 1e-15);
        // mpmath npdf(1) at 30 digits
        assert_abs_diff_eq!(std_normal_pdf(1.0), 0.241_970_724_519_143_35, epsilon = 1e-15);
        assert_eq!(std_normal_pdf(-1.0), std_normal_pdf(1.0));
    }

    #[test]
    fn normal_cdf_values() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        // mpmath ncdf(1.96) at 30 digits
        assert_abs_diff_eq!(std_normal_cdf(1.96), 0.975_002_104_851_779_6, epsilon = 1e-12);
        assert_abs_diff_eq!(std_normal_cdf(-8.0), 6.220_960_574_271_785e-16, epsilon = 1e-25);
        for k in 0..=1600 {
            let z = -8.0 + k as f64 * 0.01;
            assert!((std_normal_cdf(z) + std_normal_cdf(-z) - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn normal_cdf_nondecreasing_on_grid() {
        let mut prev = 0.0;
        for k in 0..10_000 {
            let z = -8.0 + 16.0 * k as f64 / 9_999.0;
            let p = std_normal_cdf(z);
            assert!((0.0..=1.0).contains(&p));
            assert!(p >= prev);
            prev = p;
        }
    }

    #[test]
    fn normal_cdf_matches_density_quadrature() {
        // composite Simpson on the density from -12 to z as an independent route
        let simpson = |b: f64| {
            let a = -12.0;
            let n = 20_000;
            let h = (b - a) / n as f64;
            let mut s = std_normal_pdf(a) + std_normal_pdf(b);
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                s += w * std_normal_pdf(a + i as f64 * h);
            }
            s * h / 3.0
        };
        for z in [-3.0, -1.0, 0.3, 1.96, 4.0] {
            assert_abs_diff_eq!(std_normal_cdf(z), simpson(z), epsilon = 1e-10);
        }
    }

    #[test]
    fn streams_are_deterministic_and_seed_sensitive() {
        let mut a = RandomStream::new(42);
        let mut b = RandomStream::new(42);
        let mut c = RandomStream::new(43);
        let xa: Vec<f64> = (0..1000).map(|_| a.uniform()).collect();
        let xb: Vec<f64> = (0..1000).map(|_| b.uniform()).collect();
        let xc: Vec<f64> = (0..1000).map(|_| c.uniform()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
        assert!(xa.iter().all(|u| (0.0..1.0).contains(u)));
    }

    #[test]
    fn split_child_is_independent_of_parent_continuation() {
        let parent = RandomStream::new(7);
        let mut child = parent.split(3);
        let mut cont = parent.clone();
        let n = 100_000;
        let a: Vec<f64> = (0..n).map(|_| child.uniform()).collect();
        let b: Vec<f64> = (0..n).map(|_| cont.uniform()).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (ma, mb) = (mean(&a), mean(&b));
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n as f64;
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n as f64;
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n as f64;
        assert!((cov / (va * vb).sqrt()).abs() < 0.02);
        // a child does not depend on how far the parent advanced
        let mut advanced = parent.clone();
        advanced.uniform();
        assert_eq!(advanced.split(3).uniform(), parent.split(3).uniform());
    }

    #[test]
    fn normal_moments() {
        let mut s = RandomStream::new(2024);
        let n = 1_000_000;
        let z = s.normals(n);
        let mean = z.iter().sum::<f64>() / n as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() <= 0.005);
        assert!((var - 1.0).abs() <= 0.01);
    }

    #[test]
    fn least_squares_recovers_line_and_flags_rank() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let design: Vec<f64> = x.iter().flat_map(|&v| [1.0, v]).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 3.0 * v).collect();
        let c = least_squares(&design, 4, 2, &y).unwrap();
        assert_abs_diff_eq!(c[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c[1], -3.0, epsilon = 1e-12);
        let dup: Vec<f64> = x.iter().flat_map(|_| [1.0, 1.0]).collect();
        assert!(matches!(
            least_squares(&dup, 4, 2, &y),
            Err(NumericsError::RankDeficient { column: 1 })
        ));
    }
}
