use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd_right, Matrix};
use crate::real::Real;

/// A feature point seen in the video and its known location on the piano plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Correspondence<T: Real> {
    pub pixel: [T; 2],
    pub plane: [T; 2],
}

/// Projective map from image pixels to piano-plane meters, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Homography<T: Real> {
    pub h: [[T; 3]; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct HomographyFit<T: Real> {
    pub homography: Homography<T>,
    pub mean_reprojection_error: T,
    pub max_reprojection_error: T,
}

impl<T: Real> Homography<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self {
            h: [[o, z, z], [z, o, z], [z, z, o]],
        }
    }

    pub fn from_rows(h: [[T; 3]; 3]) -> Self {
        Self { h }.normalized()
    }

    pub fn translation(dx: T, dy: T) -> Self {
        let mut m = Self::identity();
        m.h[0][2] = dx;
        m.h[1][2] = dy;
        m
    }

    /// Scales so `h[2][2] == 1`, or to unit Frobenius norm when that entry
    /// vanishes.
    pub fn normalized(self) -> Self {
        let fro = self
            .h
            .iter()
            .flatten()
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt();
        let corner = self.h[2][2];
        let s = if corner.abs() > T::lit(1e-12) * fro {
            corner
        } else {
            fro
        };
        let mut h = self.h;
        for v in h.iter_mut().flatten() {
            *v = *v / s;
        }
        Self { h }
    }

    pub fn determinant(&self) -> T {
        let m = &self.h;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// The inverse map, via the adjugate.
    pub fn inverse(&self) -> Result<Self> {
        let det = self.determinant();
        if !(det.abs() > T::lit(1e-300)) || !det.is_finite() {
            return Err(Error::Degenerate("singular homography".into()));
        }
        let m = &self.h;
        let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let adj = [
            [c(1, 2, 1, 2), -c(0, 2, 1, 2), c(0, 1, 1, 2)],
            [-c(1, 2, 0, 2), c(0, 2, 0, 2), -c(0, 1, 0, 2)],
            [c(1, 2, 0, 1), -c(0, 2, 0, 1), c(0, 1, 0, 1)],
        ];
        Ok(Self { h: adj.map(|row| row.map(|v| v / det)) }.normalized())
    }

    pub fn apply(&self, p: [T; 2]) -> Result<[T; 2]> {
        let m = &self.h;
        let x = m[0][0] * p[0] + m[0][1] * p[1] + m[0][2];
        let y = m[1][0] * p[0] + m[1][1] * p[1] + m[1][2];
        let w = m[2][0] * p[0] + m[2][1] * p[1] + m[2][2];
        let scale = x.abs().max(y.abs()).max(T::one());
        if w.abs() <= T::lit(1e-12) * scale {
            return Err(Error::PointAtInfinity(w.as_f64()));
        }
        Ok([x / w, y / w])
    }

    fn to_matrix(self) -> Matrix<T> {
        let flat: Vec<T> = self.h.iter().flatten().copied().collect();
        Matrix::from_row_slice(3, 3, &flat)
    }

    fn from_matrix(m: &Matrix<T>) -> Self {
        Self {
            h: std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)])),
        }
    }
}

pub fn apply_homography<T: Real>(h: &Homography<T>, pts: &[[T; 2]]) -> Result<Vec<[T; 2]>> {
    pts.iter().map(|&p| h.apply(p)).collect()
}

/// Similarity that moves the centroid to the origin and the mean distance to √2,
/// plus its inverse.
fn hartley<T2: Real>(pts: &[[T2; 2]]) -> Option<([[T2; 3]; 3], [[T2; 3]; 3])> {
    let n = T2::lit(pts.len() as f64);
    let cx = pts.iter().map(|p| p[0]).sum::<T2>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<T2>() / n;
    let mean = pts
        .iter()
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<T2>()
        / n;
    if !(mean > T2::zero()) {
        return None;
    }
    let s = T2::lit(2.0).sqrt() / mean;
    let (o, z) = (T2::one(), T2::zero());
    let fwd = [[s, z, -s * cx], [z, s, -s * cy], [z, z, o]];
    let inv = [[o / s, z, cx], [z, o / s, cy], [z, z, o]];
    Some((fwd, inv))
}

/// Normalized direct linear transform over all correspondences.
pub fn estimate_homography<T: Real>(corr: &[Correspondence<T>]) -> Result<HomographyFit<T>> {
    if corr.len() < 4 {
        return Err(Error::Arity {
            expected: 4,
            got: corr.len(),
        });
    }
    if corr
        .iter()
        .any(|c| c.pixel.iter().chain(&c.plane).any(|v| !v.is_finite()))
    {
        return Err(Error::input("non-finite correspondence"));
    }
    let src: Vec<[T; 2]> = corr.iter().map(|c| c.pixel).collect();
    let dst: Vec<[T; 2]> = corr.iter().map(|c| c.plane).collect();
    let degenerate = || Error::Degenerate("correspondences do not determine a homography".into());
    let (ts, _) = hartley(&src).ok_or_else(degenerate)?;
    let (td, td_inv) = hartley(&dst).ok_or_else(degenerate)?;
    let tsm = Homography { h: ts };
    let tdm = Homography { h: td };

    let n = corr.len();
    let mut a = Matrix::zeros(2 * n, 9);
    for k in 0..n {
        let [x, y] = tsm.apply(src[k])?;
        let [u, v] = tdm.apply(dst[k])?;
        let r0 = [-x, -y, -T::one(), T::zero(), T::zero(), T::zero(), u * x, u * y, u];
        let r1 = [T::zero(), T::zero(), T::zero(), -x, -y, -T::one(), v * x, v * y, v];
        for c in 0..9 {
            a[(2 * k, c)] = r0[c];
            a[(2 * k + 1, c)] = r1[c];
        }
    }
    let (sv, v) = svd_right(&a);
    // A well-posed problem has a one-dimensional null space.
    if sv[7] <= T::lit(1e-9) * sv[0] {
        return Err(Error::Degenerate(format!(
            "design matrix rank deficient (sigma_8 / sigma_1 = {:e})",
            (sv[7] / sv[0]).as_f64()
        )));
    }
    let hn = Homography {
        h: std::array::from_fn(|r| std::array::from_fn(|c| v[(3 * r + c, 8)])),
    };
    let h = Homography { h: td_inv }
        .to_matrix()
        .mul(&hn.to_matrix())
        .mul(&tsm.to_matrix());
    let homography = Homography::from_matrix(&h).normalized();

    let fro = homography.h.iter().flatten().map(|&x| x * x).sum::<T>().sqrt();
    if homography.determinant().abs() <= T::lit(1e-12) * fro.powi(3) {
        return Err(Error::Degenerate("estimated homography is singular".into()));
    }

    let mut sum = T::zero();
    let mut max = T::zero();
    for k in 0..n {
        let p = homography.apply(src[k])?;
        let e = ((p[0] - dst[k][0]).powi(2) + (p[1] - dst[k][1]).powi(2)).sqrt();
        sum += e;
        max = max.max(e);
    }
    Ok(HomographyFit {
        homography,
        mean_reprojection_error: sum / T::lit(n as f64),
        max_reprojection_error: max,
    })
}
