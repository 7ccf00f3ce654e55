//! Linear maps between image and sinogram arrays.

use ndarray::Array2;

/// A real linear map `M` from `domain_shape` arrays to `range_shape` arrays
/// with its transpose.
pub trait LinearOperator: Sync {
    fn domain_shape(&self) -> (usize, usize);
    fn range_shape(&self) -> (usize, usize);
    fn apply(&self, x: &Array2<f64>) -> Array2<f64>;
    fn apply_adjoint(&self, y: &Array2<f64>) -> Array2<f64>;
}

/// `M = I` on arrays of a fixed shape.
#[derive(Debug, Clone, Copy)]
pub struct IdentityOperator {
    pub shape: (usize, usize),
}

impl LinearOperator for IdentityOperator {
    fn domain_shape(&self) -> (usize, usize) {
        self.shape
    }

    fn range_shape(&self) -> (usize, usize) {
        self.shape
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.clone()
    }

    fn apply_adjoint(&self, y: &Array2<f64>) -> Array2<f64> {
        y.clone()
    }
}

/// Explicit matrix acting on row-major flattened arrays.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    pub matrix: Array2<f64>,
    pub domain: (usize, usize),
    pub range: (usize, usize),
}

impl DenseOperator {
    /// Materialises any operator column by column.
    pub fn materialize(op: &dyn LinearOperator) -> Self {
        let domain = op.domain_shape();
        let range = op.range_shape();
        let n = domain.0 * domain.1;
        let m = range.0 * range.1;
        let mut matrix = Array2::zeros((m, n));
        let mut unit = Array2::zeros(domain);
        for j in 0..n {
            unit[[j / domain.1, j % domain.1]] = 1.0;
            let col = op.apply(&unit);
            for (i, v) in col.iter().enumerate() {
                matrix[[i, j]] = *v;
            }
            unit[[j / domain.1, j % domain.1]] = 0.0;
        }
        DenseOperator { matrix, domain, range }
    }
}

impl LinearOperator for DenseOperator {
    fn domain_shape(&self) -> (usize, usize) {
        self.domain
    }

    fn range_shape(&self) -> (usize, usize) {
        self.range
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let flat = x.iter().copied().collect::<ndarray::Array1<f64>>();
        self.matrix.dot(&flat).into_shape_with_order(self.range).unwrap()
    }

    fn apply_adjoint(&self, y: &Array2<f64>) -> Array2<f64> {
        let flat = y.iter().copied().collect::<ndarray::Array1<f64>>();
        self.matrix.t().dot(&flat).into_shape_with_order(self.domain).unwrap()
    }
}

pub(crate) fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm_sq(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum()
}
