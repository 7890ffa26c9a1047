//! Dense row-major 2-D arrays of `f64` and the kernels the graph evaluates.

use std::fmt;

/// Rows x columns. Vectors are `(n, 1)` and scalars are `(1, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { rows: 1, cols: 1 };

    pub const fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub const fn column(len: usize) -> Self {
        Self { rows: len, cols: 1 }
    }

    pub const fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn transposed(&self) -> Self {
        Self { rows: self.cols, cols: self.rows }
    }

    /// True when `self` can be broadcast to `target` (each dim equal or 1).
    pub fn broadcasts_to(&self, target: Shape) -> bool {
        (self.rows == target.rows || self.rows == 1) && (self.cols == target.cols || self.cols == 1)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}x{})", self.rows, self.cols)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    /// Panics if `data.len()` does not match the shape.
    pub fn new(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(shape.len(), data.len(), "tensor data does not match shape {shape}");
        Self { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: vec![0.0; shape.len()] }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self { shape, data: vec![value; shape.len()] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Shape::SCALAR, data: vec![value] }
    }

    pub fn column(data: Vec<f64>) -> Self {
        Self { shape: Shape::column(data.len()), data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { shape: Shape::new(rows.len(), cols), data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.shape.cols;
        &self.data[row * c..(row + 1) * c]
    }

    /// Value of a `(1, 1)` tensor. Panics otherwise.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape, Shape::SCALAR, "item() on non-scalar {}", self.shape);
        self.data[0]
    }

    pub fn transpose(&self) -> Tensor {
        let Shape { rows, cols } = self.shape;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = self.data[r * cols + c];
            }
        }
        Tensor::new(self.shape.transposed(), out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape, b.shape);
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape, data)
}

pub(crate) fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape, a.data.iter().map(|&x| f(x)).collect())
}

/// `op(a) * op(b)` where `op` optionally transposes.
pub(crate) fn matmul(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Tensor {
    let ta;
    let a = if trans_a {
        ta = a.transpose();
        &ta
    } else {
        a
    };
    let tb;
    let b = if trans_b {
        tb = b.transpose();
        &tb
    } else {
        b
    };
    let (n, k) = (a.shape.rows, a.shape.cols);
    let m = b.shape.cols;
    debug_assert_eq!(k, b.shape.rows);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(Shape::new(n, m), out)
}

pub(crate) fn broadcast(a: &Tensor, to: Shape) -> Tensor {
    if a.shape == to {
        return a.clone();
    }
    let mut out = Vec::with_capacity(to.len());
    for r in 0..to.rows {
        let sr = if a.shape.rows == 1 { 0 } else { r };
        for c in 0..to.cols {
            let sc = if a.shape.cols == 1 { 0 } else { c };
            out.push(a.data[sr * a.shape.cols + sc]);
        }
    }
    Tensor::new(to, out)
}

/// Sums over the dimensions where `to` is 1 and `a` is not.
pub(crate) fn sum_to(a: &Tensor, to: Shape) -> Tensor {
    if a.shape == to {
        return a.clone();
    }
    let mut out = vec![0.0; to.len()];
    for r in 0..a.shape.rows {
        let dr = if to.rows == 1 { 0 } else { r };
        for c in 0..a.shape.cols {
            let dc = if to.cols == 1 { 0 } else { c };
            out[dr * to.cols + dc] += a.data[r * a.shape.cols + c];
        }
    }
    Tensor::new(to, out)
}

pub(crate) fn softmax_rows(a: &Tensor) -> Tensor {
    let Shape { rows, cols } = a.shape;
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &a.data[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut total = 0.0;
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    Tensor::new(a.shape, out)
}

/// Mean over rows of `-sum_c targets[r,c] * log_softmax(logits)[r,c]`.
pub(crate) fn softmax_cross_entropy(logits: &Tensor, targets: &Tensor) -> Tensor {
    let Shape { rows, cols } = logits.shape;
    let mut total = 0.0;
    for r in 0..rows {
        let row = &logits.data[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        let t = &targets.data[r * cols..(r + 1) * cols];
        for (&x, &y) in row.iter().zip(t) {
            if y != 0.0 {
                total -= y * ((x - max) - log_sum);
            }
        }
    }
    Tensor::scalar(total / rows as f64)
}

pub(crate) fn slice(a: &Tensor, offset: usize, shape: Shape) -> Tensor {
    Tensor::new(shape, a.data[offset..offset + shape.len()].to_vec())
}

pub(crate) fn embed(a: &Tensor, offset: usize, total: Shape) -> Tensor {
    let mut out = vec![0.0; total.len()];
    out[offset..offset + a.shape.len()].copy_from_slice(&a.data);
    Tensor::new(total, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_transposes_agree() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let b = Tensor::from_rows(&[vec![1.0, 0.5], vec![-1.0, 2.0], vec![0.0, 1.0]]);
        let c = matmul(&a, &b, false, false);
        assert_eq!(c.data(), &[-1.0, 7.5, -1.0, 18.0]);
        let at = a.transpose();
        let bt = b.transpose();
        assert_eq!(matmul(&at, &b, true, false), c);
        assert_eq!(matmul(&a, &bt, false, true), c);
        assert_eq!(matmul(&at, &bt, true, true), c);
    }

    #[test]
    fn broadcast_and_sum_to_are_adjoint_shapes() {
        let row = Tensor::new(Shape::new(1, 3), vec![1.0, 2.0, 3.0]);
        let full = broadcast(&row, Shape::new(2, 3));
        assert_eq!(full.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert_eq!(sum_to(&full, Shape::new(1, 3)).data(), &[2.0, 4.0, 6.0]);
        assert_eq!(sum_to(&full, Shape::new(2, 1)).data(), &[6.0, 6.0]);
        assert_eq!(sum_to(&full, Shape::SCALAR).item(), 12.0);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let t = Tensor::new(Shape::new(1, 2), vec![1000.0, 1000.0]);
        assert_eq!(softmax_rows(&t).data(), &[0.5, 0.5]);
        let y = Tensor::new(Shape::new(1, 2), vec![1.0, 0.0]);
        assert!((softmax_cross_entropy(&t, &y).item() - 2f64.ln()).abs() < 1e-15);
    }
}
