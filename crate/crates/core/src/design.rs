//! Box domains and space-filling Latin hypercube designs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::RandomStream;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DesignError {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("dimension mismatch: domain has {expected} dimensions, point has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("a design needs at least one point")]
    Empty,
}

pub type Result<T> = std::result::Result<T, DesignError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

/// Axis-aligned box `∏ⱼ [lowerⱼ, upperⱼ]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDomain", into = "RawDomain")]
pub struct BoxDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl TryFrom<RawDomain> for BoxDomain {
    type Error = DesignError;

    fn try_from(raw: RawDomain) -> Result<Self> {
        BoxDomain::new(raw.lower, raw.upper)
    }
}

impl From<BoxDomain> for RawDomain {
    fn from(d: BoxDomain) -> Self {
        RawDomain {
            lower: d.lower,
            upper: d.upper,
        }
    }
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() {
            return Err(DesignError::InvalidDomain("domain needs at least one dimension".into()));
        }
        if lower.len() != upper.len() {
            return Err(DesignError::InvalidDomain(format!(
                "{} lower bounds but {} upper bounds",
                lower.len(),
                upper.len()
            )));
        }
        for (j, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() || !(lo < hi) {
                return Err(DesignError::InvalidDomain(format!(
                    "dimension {j}: need finite lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn unit(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim], vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn width(&self, j: usize) -> f64 {
        self.upper[j] - self.lower[j]
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, v)| (v - self.lower[j]) / self.width(j))
            .collect()
    }

    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(j, v)| self.lower[j] + v * self.width(j))
            .collect()
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (j, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[j], self.upper[j]);
        }
    }

    pub fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(DesignError::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        Ok(())
    }
}

/// Design points together with the domain they were drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    points: Vec<Vec<f64>>,
    domain: BoxDomain,
}

impl DesignMatrix {
    pub fn new(points: Vec<Vec<f64>>, domain: BoxDomain) -> Result<Self> {
        if points.is_empty() {
            return Err(DesignError::Empty);
        }
        for p in &points {
            domain.check_point(p)?;
            if !domain.contains(p) {
                return Err(DesignError::InvalidDomain(format!("point {p:?} lies outside the domain")));
            }
        }
        Ok(Self { points, domain })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vec<f64>> {
        self.points
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Stratum index of every coordinate, `strata[i][j]` for point `i` and
    /// dimension `j`, with `n` equal-width strata per dimension.
    pub fn strata(&self) -> Vec<Vec<usize>> {
        let n = self.points.len();
        self.points
            .iter()
            .map(|p| {
                self.domain
                    .to_unit(p)
                    .iter()
                    .map(|u| ((u * n as f64).floor() as usize).min(n - 1))
                    .collect()
            })
            .collect()
    }

    /// Smallest pairwise Euclidean distance in unit-cube coordinates.
    pub fn min_distance(&self) -> f64 {
        let unit: Vec<Vec<f64>> = self.points.iter().map(|p| self.domain.to_unit(p)).collect();
        let mut best = f64::INFINITY;
        for i in 0..unit.len() {
            for j in (i + 1)..unit.len() {
                best = best.min(sq_dist(&unit[i], &unit[j]));
            }
        }
        best.sqrt()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Latin hypercube sample of `n` points.
///
/// Each dimension is cut into `n` half-open strata `[i/n, (i+1)/n)` of the
/// unit interval; every stratum receives exactly one point, placed uniformly
/// inside it.
pub fn lhs(n: usize, domain: &BoxDomain, rng: &mut RandomStream) -> Result<DesignMatrix> {
    if n == 0 {
        return Err(DesignError::Empty);
    }
    let d = domain.dim();
    let mut unit = vec![vec![0.0; d]; n];
    let mut perm: Vec<usize> = (0..n).collect();
    for j in 0..d {
        rng.shuffle(&mut perm);
        for (i, row) in unit.iter_mut().enumerate() {
            let u = (perm[i] as f64 + rng.uniform()) / n as f64;
            // guard the top stratum against rounding up to 1.0
            row[j] = u.min(1.0 - f64::EPSILON);
        }
    }
    let points = unit.iter().map(|u| domain.from_unit(u)).collect();
    DesignMatrix::new(points, domain.clone())
}

const PHI_EXPONENT: i32 = 10;

fn phi(sq: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            s += sq[i * n + j].max(1e-300).powi(-PHI_EXPONENT / 2);
        }
    }
    s
}

fn min_pair(sq: &[f64], n: usize) -> (f64, usize, usize) {
    let mut best = (f64::INFINITY, 0, 0);
    for i in 0..n {
        for j in (i + 1)..n {
            if sq[i * n + j] < best.0 {
                best = (sq[i * n + j], i, j);
            }
        }
    }
    best
}

/// Greedy maximin improvement by within-column coordinate swaps.
///
/// Each iteration exchanges one coordinate between a point of the closest
/// pair and another random point. A swap is kept only when it increases the
/// minimum pairwise distance, or keeps it and lowers the Morris–Mitchell
/// `φ₁₀` criterion. Coordinates only move between rows, so every column keeps
/// its stratum multiset.
pub fn maximin_improve(design: &DesignMatrix, iterations: usize, rng: &mut RandomStream) -> DesignMatrix {
    let n = design.len();
    let d = design.domain.dim();
    if iterations == 0 || n < 3 {
        return design.clone();
    }
    let mut unit: Vec<Vec<f64>> = design.points.iter().map(|p| design.domain.to_unit(p)).collect();
    let mut points = design.points.clone();
    let mut sq = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = sq_dist(&unit[i], &unit[j]);
            sq[i * n + j] = v;
            sq[j * n + i] = v;
        }
    }
    let (mut cur_min, mut ci, mut cj) = min_pair(&sq, n);
    let mut cur_phi = phi(&sq, n);
    let refresh = |sq: &mut [f64], unit: &[Vec<f64>], r: usize| {
        for k in 0..n {
            if k != r {
                let v = sq_dist(&unit[r], &unit[k]);
                sq[r * n + k] = v;
                sq[k * n + r] = v;
            }
        }
    };

    for _ in 0..iterations {
        let a = if rng.below(2) == 0 { ci } else { cj };
        let mut b = rng.below(n - 1);
        if b >= a {
            b += 1;
        }
        let col = rng.below(d);
        let saved = sq.clone();
        swap_coord(&mut unit, &mut points, a, b, col);
        refresh(&mut sq, &unit, a);
        refresh(&mut sq, &unit, b);
        let (new_min, ni, nj) = min_pair(&sq, n);
        let new_phi = phi(&sq, n);
        let accept = new_min > cur_min || (new_min == cur_min && new_phi < cur_phi);
        if accept {
            cur_min = new_min;
            cur_phi = new_phi;
            ci = ni;
            cj = nj;
        } else {
            swap_coord(&mut unit, &mut points, a, b, col);
            sq = saved;
        }
    }
    DesignMatrix {
        points,
        domain: design.domain.clone(),
    }
}

fn swap_coord(unit: &mut [Vec<f64>], points: &mut [Vec<f64>], a: usize, b: usize, col: usize) {
    let tmp = unit[a][col];
    unit[a][col] = unit[b][col];
    unit[b][col] = tmp;
    let tmp = points[a][col];
    points[a][col] = points[b][col];
    points[b][col] = tmp;
}
