//! Principal component analysis via eigendecomposition of the covariance
//! matrix.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// A fitted projection onto the leading principal components.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: DVector<f64>,
    /// One unit-length component per row, sorted by decreasing variance.
    /// Components with (numerically) zero variance are dropped, so there may
    /// be fewer rows than requested.
    pub components: DMatrix<f64>,
    pub explained_variance: Vec<f64>,
}

impl Pca {
    /// Fits up to `n_components` components to `data` (rows are samples).
    ///
    /// Each component's sign is chosen so that its largest-magnitude loading
    /// is positive.
    pub fn fit(data: &DMatrix<f64>, n_components: usize) -> Pca {
        let (n, d) = data.shape();
        let centered = center(data);
        let mean = DVector::from_iterator(d, (0..d).map(|j| column_mean(data, j)));
        if n < 2 || d == 0 {
            return Pca {
                mean,
                components: DMatrix::zeros(0, d),
                explained_variance: Vec::new(),
            };
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

        let max_eig = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let mean_sq = data.iter().map(|x| x * x).sum::<f64>() / (n * d) as f64;
        let tol = 1e-10 * max_eig.max(mean_sq).max(f64::MIN_POSITIVE);

        let kept: Vec<usize> = order
            .into_iter()
            .filter(|&i| eig.eigenvalues[i] > tol)
            .take(n_components)
            .collect();
        let mut components = DMatrix::zeros(kept.len(), d);
        let mut explained_variance = Vec::with_capacity(kept.len());
        for (row, &i) in kept.iter().enumerate() {
            let mut v = eig.eigenvectors.column(i).into_owned();
            let pivot = (0..d)
                .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
                .expect("d > 0");
            if v[pivot] < 0.0 {
                v = -v;
            }
            components.row_mut(row).copy_from(&v.transpose());
            explained_variance.push(eig.eigenvalues[i]);
        }
        Pca {
            mean,
            components,
            explained_variance,
        }
    }

    pub fn n_components(&self) -> usize {
        self.components.nrows()
    }

    /// Projects samples (rows) onto the components.
    pub fn transform(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        let mut centered = data.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        centered * self.components.transpose()
    }

    /// Maps projections back to the input space.
    pub fn inverse_transform(&self, scores: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = scores * &self.components;
        for mut row in out.row_iter_mut() {
            row += self.mean.transpose();
        }
        out
    }
}

/// Exact for constant columns, so they center to exactly zero.
fn column_mean(data: &DMatrix<f64>, j: usize) -> f64 {
    let col = data.column(j);
    match col.iter().next() {
        Some(&first) if col.iter().all(|x| *x == first) => first,
        Some(_) => col.mean(),
        None => 0.0,
    }
}

fn center(data: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = data.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let m = column_mean(data, j);
        col.add_scalar_mut(-m);
    }
    out
}
