use crate::tensor::Mat;

/// Patch-aligned features: one `d`-vector per cell of a `rows × cols` grid,
/// stored row-major as a `(rows·cols) × d` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub rows: usize,
    pub cols: usize,
    pub features: Mat,
}

impl FeatureGrid {
    pub fn new(rows: usize, cols: usize, features: Mat) -> Self {
        assert_eq!(features.rows(), rows * cols, "one feature row per grid cell");
        FeatureGrid {
            rows,
            cols,
            features,
        }
    }

    pub fn zeros(rows: usize, cols: usize, dim: usize) -> Self {
        Self::new(rows, cols, Mat::zeros(rows * cols, dim))
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell(&self, r: usize, c: usize) -> &[f64] {
        self.features.row(r * self.cols + c)
    }
}
