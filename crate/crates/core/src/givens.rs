//! Givens-rotation coordinates for orthonormal `p × d` matrices.
//!
//! A rotation `G(i, j, θ)` acts on rows `i < j`:
//!
//! ```text
//! row_i' =  cos θ · row_i + sin θ · row_j
//! row_j' = -sin θ · row_i + cos θ · row_j
//! ```
//!
//! and its transpose flips the sign of the `sin` terms. Angles are stored in
//! elimination order: pairs `(0,1), (0,2), …, (0,p-1), (1,2), …, (d-1,p-1)`
//! (zero-based). Decomposition applies `G` in that order to drive `Γ` to
//! `I_{p×d}`; reconstruction applies the transposes in reverse order to
//! `I_{p×d}`. Every angle lives in `[-π/2, π/2]`, which picks one
//! representative out of each column-sign-flip orbit.

use std::f64::consts::FRAC_PI_2;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-10;
const DECOMPOSE_TOL: f64 = 1e-9;

/// Number of free angles, `pd - d(d+1)/2`.
pub fn angle_count(p: usize, d: usize) -> Result<usize> {
    if d == 0 || p == 0 || d >= p {
        return Err(Error::InvalidArgument(format!(
            "need 0 < d < p, got p={p}, d={d}"
        )));
    }
    Ok(p * d - d * (d + 1) / 2)
}

/// Zero-based `(i, j)` row pairs in storage (elimination) order.
pub fn angle_pairs(p: usize, d: usize) -> Vec<(usize, usize)> {
    (0..d.min(p))
        .flat_map(|i| (i + 1..p).map(move |j| (i, j)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GivensAngles {
    p: usize,
    d: usize,
    values: Vec<f64>,
}

impl GivensAngles {
    pub fn new(p: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        let k = angle_count(p, d)?;
        if values.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "expected {k} angles for p={p}, d={d}, got {}",
                values.len()
            )));
        }
        if let Some((idx, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.abs() <= FRAC_PI_2))
        {
            return Err(Error::InvalidParams(format!(
                "angle {idx} = {v} outside [-pi/2, pi/2]"
            )));
        }
        Ok(Self { p, d, values })
    }

    pub fn zeros(p: usize, d: usize) -> Result<Self> {
        let k = angle_count(p, d)?;
        Ok(Self {
            p,
            d,
            values: vec![0.0; k],
        })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        angle_pairs(self.p, self.d)
    }

    /// Storage index of the zero-based pair `(i, j)`.
    pub fn index_of(&self, i: usize, j: usize) -> Option<usize> {
        if i >= self.d || j <= i || j >= self.p {
            return None;
        }
        // pairs before row i: sum_{r<i} (p - 1 - r)
        Some(i * (self.p - 1) - i * (i.saturating_sub(1)) / 2 + (j - i - 1))
    }
}

/// A `p × d` matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelPoint {
    m: DMatrix<f64>,
}

impl StiefelPoint {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let dev = orthonormality_error(&m);
        if !(dev <= ORTHONORMAL_TOL) {
            return Err(Error::NotOrthonormal { deviation: dev });
        }
        Ok(Self { m })
    }

    /// `I_{p×d}`.
    pub fn identity(p: usize, d: usize) -> Self {
        Self {
            m: DMatrix::identity(p, d),
        }
    }

    pub fn p(&self) -> usize {
        self.m.nrows()
    }

    pub fn d(&self) -> usize {
        self.m.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }
}

/// Frobenius norm of `ΓᵀΓ - I_d`.
pub fn orthonormality_error(m: &DMatrix<f64>) -> f64 {
    let d = m.ncols();
    (m.transpose() * m - DMatrix::identity(d, d)).norm()
}

#[inline]
fn rotate_rows(m: &mut DMatrix<f64>, i: usize, j: usize, c: f64, s: f64) {
    for col in 0..m.ncols() {
        let a = m[(i, col)];
        let b = m[(j, col)];
        m[(i, col)] = c * a + s * b;
        m[(j, col)] = -s * a + c * b;
    }
}

/// Applies `G(i, j, θ)` (or its transpose) to the rows of `m` in place.
pub fn apply_rotation_left(
    m: &mut DMatrix<f64>,
    i: usize,
    j: usize,
    theta: f64,
    transpose: bool,
) -> Result<()> {
    if i >= j || j >= m.nrows() {
        return Err(Error::InvalidArgument(format!(
            "rotation rows ({i}, {j}) invalid for {} rows",
            m.nrows()
        )));
    }
    let (s, c) = theta.sin_cos();
    rotate_rows(m, i, j, c, if transpose { -s } else { s });
    Ok(())
}

/// Angle in `[-π/2, π/2]` whose rotation zeroes `x_j` against the pivot `x_i`.
fn elimination_angle(pivot: f64, target: f64) -> f64 {
    if target == 0.0 {
        0.0
    } else if pivot == 0.0 {
        FRAC_PI_2
    } else {
        (target * pivot.signum()).atan2(pivot.abs())
    }
}

/// Column signs left on the diagonal after elimination, alongside the angles.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub angles: GivensAngles,
    /// `+1` if the column is in the image of [`reconstruct`], `-1` if it is
    /// the sign-flipped representative.
    pub column_signs: Vec<f64>,
}

/// Angles of `Γ` up to column signs; see [`decompose_signed`].
pub fn decompose(gamma: &StiefelPoint) -> Result<GivensAngles> {
    decompose_signed(gamma).map(|dec| dec.angles)
}

pub fn decompose_signed(gamma: &StiefelPoint) -> Result<Decomposition> {
    let (p, d) = (gamma.p(), gamma.d());
    let pairs = angle_pairs(p, d);
    angle_count(p, d)?;
    let mut w = gamma.m.clone();
    let mut values = Vec::with_capacity(pairs.len());
    for &(i, j) in &pairs {
        let theta = elimination_angle(w[(i, i)], w[(j, i)]);
        let (s, c) = theta.sin_cos();
        rotate_rows(&mut w, i, j, c, s);
        w[(j, i)] = 0.0;
        values.push(theta);
    }
    let column_signs: Vec<f64> = (0..d)
        .map(|c| if w[(c, c)] < 0.0 { -1.0 } else { 1.0 })
        .collect();
    for c in 0..d {
        for r in 0..p {
            let target = if r == c { column_signs[c] } else { 0.0 };
            let residual = (w[(r, c)] - target).abs();
            if !(residual <= DECOMPOSE_TOL) {
                return Err(Error::DecompositionFailure {
                    row: r,
                    col: c,
                    residual,
                });
            }
        }
    }
    Ok(Decomposition {
        angles: GivensAngles { p, d, values },
        column_signs,
    })
}

/// `Γ = G(0,1)ᵀ ··· G(d-1,p-1)ᵀ I_{p×d}`, applied right to left.
pub fn reconstruct(angles: &GivensAngles) -> StiefelPoint {
    let mut w = DMatrix::identity(angles.p, angles.d);
    for (&(i, j), &theta) in angles.pairs().iter().zip(&angles.values).rev() {
        let (s, c) = theta.sin_cos();
        rotate_rows(&mut w, i, j, c, -s);
    }
    StiefelPoint { m: w }
}

/// `Γ` together with `∂Γ/∂θ_k` for every angle, in storage order.
pub fn reconstruct_with_jacobian(angles: &GivensAngles) -> (StiefelPoint, Vec<DMatrix<f64>>) {
    let pairs = angles.pairs();
    let k = pairs.len();
    let trig: Vec<(f64, f64)> = angles.values.iter().map(|t| t.sin_cos()).collect();
    // suffix[m] = R_mᵀ ··· R_{k-1}ᵀ I, suffix[k] = I
    let mut suffix = Vec::with_capacity(k + 1);
    suffix.push(DMatrix::identity(angles.p, angles.d));
    for m in (0..k).rev() {
        let mut next = suffix.last().unwrap().clone();
        let (i, j) = pairs[m];
        let (s, c) = trig[m];
        rotate_rows(&mut next, i, j, c, -s);
        suffix.push(next);
    }
    suffix.reverse();
    let gamma = suffix[0].clone();
    let mut jac = Vec::with_capacity(k);
    for m in 0..k {
        let (i, j) = pairs[m];
        let (s, c) = trig[m];
        let base = &suffix[m + 1];
        let mut dm = DMatrix::zeros(angles.p, angles.d);
        for col in 0..angles.d {
            let a = base[(i, col)];
            let b = base[(j, col)];
            dm[(i, col)] = -s * a - c * b;
            dm[(j, col)] = c * a - s * b;
        }
        for q in (0..m).rev() {
            let (qi, qj) = pairs[q];
            let (qs, qc) = trig[q];
            rotate_rows(&mut dm, qi, qj, qc, -qs);
        }
        jac.push(dm);
    }
    (StiefelPoint { m: gamma }, jac)
}

/// Vector-Jacobian product: `∂L/∂θ_k = ⟨upstream, ∂Γ/∂θ_k⟩` for
/// `upstream = ∂L/∂Γ`, in one O(K·d) sweep.
///
/// `gamma` must be `reconstruct(angles)`.
pub fn reconstruct_vjp(angles: &GivensAngles, gamma: &DMatrix<f64>, upstream: &DMatrix<f64>) -> Vec<f64> {
    let pairs = angles.pairs();
    let mut suffix = gamma.clone();
    let mut adj = upstream.clone();
    let mut grad = Vec::with_capacity(pairs.len());
    for (&(i, j), &theta) in pairs.iter().zip(&angles.values) {
        let (s, c) = theta.sin_cos();
        // peel R_kᵀ off the front: suffix becomes R_{k+1}ᵀ ··· I
        rotate_rows(&mut suffix, i, j, c, s);
        let mut g = 0.0;
        for col in 0..suffix.ncols() {
            let a = suffix[(i, col)];
            let b = suffix[(j, col)];
            g += adj[(i, col)] * (-s * a - c * b) + adj[(j, col)] * (c * a - s * b);
        }
        grad.push(g);
        rotate_rows(&mut adj, i, j, c, s);
    }
    grad
}

/// Entries of `Γ` that are zero for every value of the unmasked angles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityPattern {
    p: usize,
    d: usize,
    zero: Vec<bool>,
}

impl SparsityPattern {
    pub fn is_zero(&self, row: usize, col: usize) -> bool {
        self.zero[row * self.d + col]
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn zero_count(&self) -> usize {
        self.zero.iter().filter(|z| **z).count()
    }
}

/// Symbolic reachability of the nonzeros of `I_{p×d}` through the rotation
/// sequence, skipping rotations whose angle is masked to zero.
pub fn sparsity_pattern(zero_mask: &[bool], p: usize, d: usize) -> Result<SparsityPattern> {
    let k = angle_count(p, d)?;
    if zero_mask.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "mask has {} entries, expected {k}",
            zero_mask.len()
        )));
    }
    let mut nz = vec![false; p * d];
    for c in 0..d {
        nz[c * d + c] = true;
    }
    for (&(i, j), &masked) in angle_pairs(p, d).iter().zip(zero_mask).rev() {
        if masked {
            continue;
        }
        for c in 0..d {
            let either = nz[i * d + c] || nz[j * d + c];
            nz[i * d + c] = either;
            nz[j * d + c] = either;
        }
    }
    Ok(SparsityPattern {
        p,
        d,
        zero: nz.into_iter().map(|v| !v).collect(),
    })
}
