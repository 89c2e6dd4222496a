/// Validity mask over the trailing two axes of a tensor.
///
/// Rows record the bounding range of valid columns so that kernels can skip
/// the invalid region of a triangular map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask2d {
    rows: usize,
    cols: usize,
    valid: Vec<bool>,
    row_bounds: Vec<(usize, usize)>,
}

impl Mask2d {
    pub fn new(rows: usize, cols: usize, valid: Vec<bool>) -> Self {
        assert_eq!(valid.len(), rows * cols, "mask size mismatch");
        let row_bounds = (0..rows)
            .map(|r| {
                let row = &valid[r * cols..(r + 1) * cols];
                match (row.iter().position(|&v| v), row.iter().rposition(|&v| v)) {
                    (Some(first), Some(last)) => (first, last + 1),
                    _ => (0, 0),
                }
            })
            .collect();
        Mask2d {
            rows,
            cols,
            valid,
            row_bounds,
        }
    }

    /// All cells valid.
    pub fn full(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![true; rows * cols])
    }

    /// Square mask with cell `(a, b)` valid iff `a <= b`.
    pub fn upper_triangular(n: usize) -> Self {
        let valid = (0..n * n).map(|i| i / n <= i % n).collect();
        Self::new(n, n, valid)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.cols + col]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.valid
    }

    pub fn count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Half-open range of columns spanning every valid cell of `row`.
    pub fn row_bounds(&self, row: usize) -> (usize, usize) {
        self.row_bounds[row]
    }

    /// Zeroes every invalid cell of every `rows × cols` plane in `data`.
    pub(crate) fn apply(&self, data: &mut [f64]) {
        for plane in data.chunks_mut(self.valid.len()) {
            for (v, &ok) in plane.iter_mut().zip(&self.valid) {
                if !ok {
                    *v = 0.0;
                }
            }
        }
    }
}
