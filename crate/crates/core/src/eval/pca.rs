//! Two-dimensional PCA projection by orthogonal (block power) iteration.

use ndarray::{Array1, Array2, Axis};

use crate::autodiff::Mat;
use crate::error::{Error, Result};

pub const TOL: f64 = 1e-9;
const MAX_ITERS: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `n × 2` coordinates.
    pub coords: Mat,
    /// `d × 2` principal directions.
    pub components: Mat,
    /// Covariance eigenvalues for the two directions, descending.
    pub eigenvalues: [f64; 2],
    pub rank_deficient: bool,
}

fn orthonormalize(q: &mut Mat) {
    for j in 0..q.ncols() {
        for k in 0..j {
            let dot = q.column(j).dot(&q.column(k));
            let prev = q.column(k).to_owned();
            q.column_mut(j).scaled_add(-dot, &prev);
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        if norm > 0.0 {
            q.column_mut(j).mapv_inplace(|x| x / norm);
        }
    }
}

/// Eigen-decomposition of a symmetric 2×2 matrix `[[a, b], [b, c]]`,
/// eigenvalues descending with unit eigenvectors as columns.
fn sym2_eigen(a: f64, b: f64, c: f64) -> ([f64; 2], [[f64; 2]; 2]) {
    let mid = 0.5 * (a + c);
    let rad = (0.25 * (a - c).powi(2) + b * b).sqrt();
    let (l1, l2) = (mid + rad, mid - rad);
    let vec_for = |l: f64| {
        let (x, y) = if b.abs() > 1e-300 { (b, l - a) } else if a >= c { if l == l1 { (1.0, 0.0) } else { (0.0, 1.0) } } else if l == l1 { (0.0, 1.0) } else { (1.0, 0.0) };
        let n = (x * x + y * y).sqrt();
        [x / n, y / n]
    };
    let v1 = vec_for(l1);
    let v2 = [-v1[1], v1[0]];
    ([l1, l2], [v1, v2])
}

/// Projects mean-centred rows onto their top two principal directions. Each
/// direction's largest-magnitude loading is made positive.
pub fn pca_2d(x: &Mat) -> Result<Projection> {
    if x.nrows() < 3 {
        return Err(Error::Dimension(format!("pca needs at least 3 rows, got {}", x.nrows())));
    }
    if x.ncols() < 2 {
        return Err(Error::Dimension("pca_2d needs at least 2 columns".into()));
    }
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let centred = x - &mean;
    let cov = centred.t().dot(&centred) / (x.nrows() - 1) as f64;
    let d = cov.nrows();

    let mut q = Array2::from_shape_fn((d, 2), |(i, j)| 1.0 + ((i * 7 + j * 13) % 11) as f64 / 11.0 + if i == j { 1.0 } else { 0.0 });
    orthonormalize(&mut q);
    for _ in 0..MAX_ITERS {
        let mut next = cov.dot(&q);
        orthonormalize(&mut next);
        // Compare subspaces through their projectors, which ignores rotation
        // inside the plane.
        let delta = (&next.dot(&next.t()) - &q.dot(&q.t())).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        q = next;
        if delta < TOL {
            break;
        }
    }
    let small = q.t().dot(&cov).dot(&q);
    let (vals, vecs) = sym2_eigen(small[[0, 0]], 0.5 * (small[[0, 1]] + small[[1, 0]]), small[[1, 1]]);
    let rot = Array2::from_shape_fn((2, 2), |(i, j)| vecs[j][i]);
    let mut components = q.dot(&rot);
    for j in 0..2 {
        let col = components.column(j);
        let (_, &pivot) = col.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0))).expect("d >= 2");
        if pivot < 0.0 {
            components.column_mut(j).mapv_inplace(|v| -v);
        }
    }
    let rank_deficient = vals[1] <= 1e-12 * vals[0].abs().max(1e-300);
    if rank_deficient {
        log::warn!("pca_2d: data has rank < 2; second component is arbitrary");
    }
    Ok(Projection { coords: centred.dot(&components), components, eigenvalues: vals, rank_deficient })
}

impl Projection {
    /// Per-axis sample variance of the coordinates.
    pub fn variances(&self) -> Array1<f64> {
        let n = self.coords.nrows() as f64;
        self.coords.map_axis(Axis(0), |c| c.iter().map(|v| v * v).sum::<f64>() / (n - 1.0))
    }
}
