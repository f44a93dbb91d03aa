use crate::error::{Error, Result};

/// Dense row-major matrix. Vectors are `1 x n`, scalars `1 x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn row(values: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_slice_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn transpose(&self) -> Tensor {
        Tensor::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        matmul_acc(self, other, &mut out);
        Ok(out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// `out += a * b`
pub(crate) fn matmul_acc(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let (n, k, m) = (a.rows, a.cols, b.cols);
    for i in 0..n {
        let out_row = &mut out.data[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a * b^T`
pub(crate) fn matmul_bt_acc(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let (n, k, m) = (a.rows, a.cols, b.rows);
    for i in 0..n {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let b_row = &b.data[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out.data[i * m + j] += dot;
        }
    }
}

/// `out += a^T * b`
pub(crate) fn matmul_at_acc(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let (n, k, m) = (a.rows, a.cols, b.cols);
    for i in 0..n {
        let a_row = &a.data[i * k..(i + 1) * k];
        let b_row = &b.data[i * m..(i + 1) * m];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out.data[p * m..(p + 1) * m];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}
