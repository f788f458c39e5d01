//! Dense-tensor substrate: shaped row-major `f64` arrays, matrix product,
//! row softmax, scaled-dot attention, a two-layer MLP, and the central
//! finite-difference gradient checker the loss tests are built on.

use crate::error::{Error, Result};

/// Shaped, row-major, always-finite array of `f64`.
///
/// Construction rejects NaN/Inf and shape/data length disagreements, so every
/// `Tensor` in the system is finite by invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::ZeroExtent(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DataLength {
                expected,
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index,
                value: data[index],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![value; len])
    }

    /// Build from a per-flat-index function. The function must return finite
    /// values; the constructor re-checks.
    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> f64) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, (0..len).map(f).collect())
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// 2-d accessor; panics on rank != 2 (internal misuse, not input error).
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.rank(), 2, "expected a matrix, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.rank(), 3, "expected rank 3, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.rank(), 4, "expected rank 4, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    #[inline]
    pub fn get2(&self, r: usize, c: usize) -> f64 {
        let (_, cols) = (self.shape[0], self.shape[1]);
        self.data[r * cols + c]
    }

    /// Reinterpret the same data under a new shape of equal length.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn transpose(&self) -> Self {
        let (m, n) = self.dims2();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self {
            shape: vec![n, m],
            data: out,
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, cols) = self.dims2();
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Row `r` of a matrix as a 1xN tensor.
    pub fn row_tensor(&self, r: usize) -> Self {
        let (_, cols) = self.dims2();
        Self {
            shape: vec![1, cols],
            data: self.row(r).to_vec(),
        }
        .validated()
    }

    fn validated(self) -> Self {
        debug_assert!(self.data.iter().all(|v| v.is_finite()));
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip(other, "hadamard", |a, b| a * b)
    }

    fn zip(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Self::new(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    /// Add a 1xN row to every row of an MxN matrix.
    pub fn add_row_broadcast(&self, row: &Self) -> Result<Self> {
        let (m, n) = self.dims2();
        let (rr, rc) = row.dims2();
        if rr != 1 || rc != n {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                detail: format!("matrix {:?} vs row {:?}", self.shape, row.shape),
            });
        }
        let mut data = self.data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += row.data[j];
            }
        }
        Self::new(self.shape.clone(), data)
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "dot",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Standard matrix product of an MxK by a KxN matrix.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            detail: format!("inner dims {k} vs {k2}"),
        });
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax with max subtraction; each row sums to 1.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (m, n) = x.dims2();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = x.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..n {
            let e = (row[j] - max).exp();
            out[i * n + j] = e;
            sum += e;
        }
        for j in 0..n {
            out[i * n + j] /= sum;
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
    .validated()
}

/// Backward of `softmax_rows`: given the softmax output `a` and upstream
/// gradient `da`, returns the gradient with respect to the logits.
pub fn softmax_rows_backward(a: &Tensor, da: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2();
    if a.shape() != da.shape() {
        return Err(Error::ShapeMismatch {
            op: "softmax_rows_backward",
            detail: format!("{:?} vs {:?}", a.shape(), da.shape()),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        let darow = da.row(i);
        let inner: f64 = arow.iter().zip(darow).map(|(&av, &dv)| av * dv).sum();
        for j in 0..n {
            out[i * n + j] = arow[j] * (darow[j] - inner);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Scaled dot-product attention: `softmax(Q Kᵀ / sqrt(d)) V`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (_, d) = q.dims2();
    let (nk, dk) = k.dims2();
    let (nv, _) = v.dims2();
    if d != dk {
        return Err(Error::ShapeMismatch {
            op: "attention",
            detail: format!("query width {d} vs key width {dk}"),
        });
    }
    if nk != nv {
        return Err(Error::ShapeMismatch {
            op: "attention",
            detail: format!("{nk} keys vs {nv} values"),
        });
    }
    let scale = 1.0 / (d as f64).sqrt();
    let logits = matmul(q, &k.transpose())?.scale(scale)?;
    matmul(&softmax_rows(&logits), v)
}

/// Activation for the intensity-projection MLP. The smooth default keeps the
/// network compatible with central-difference gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// x * sigmoid(1.702 x), a smooth GELU-shaped gate.
    SigmoidGelu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::SigmoidGelu => x * sigmoid(1.702 * x),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::SigmoidGelu => {
                let s = sigmoid(1.702 * x);
                s + x * 1.702 * s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Two-layer MLP parameters, row-vector convention: `act(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub activation: Activation,
}

impl MlpParams {
    pub fn new(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, activation: Activation) -> Result<Self> {
        let (_, hidden) = w1.dims2();
        let (hidden2, out) = w2.dims2();
        let (b1r, b1c) = b1.dims2();
        let (b2r, b2c) = b2.dims2();
        if hidden != hidden2 || b1r != 1 || b1c != hidden || b2r != 1 || b2c != out {
            return Err(Error::ShapeMismatch {
                op: "MlpParams::new",
                detail: format!(
                    "w1 {:?}, b1 {:?}, w2 {:?}, b2 {:?}",
                    w1.shape(),
                    b1.shape(),
                    w2.shape(),
                    b2.shape()
                ),
            });
        }
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.dims2().0
    }

    pub fn output_dim(&self) -> usize {
        self.w2.dims2().1
    }
}

/// Forward pass of the two-layer MLP on a row-major batch `x` (MxIn).
pub fn mlp_forward(p: &MlpParams, x: &Tensor) -> Result<Tensor> {
    let pre = matmul(x, &p.w1)?.add_row_broadcast(&p.b1)?;
    let hidden = pre.map(|v| p.activation.apply(v))?;
    matmul(&hidden, &p.w2)?.add_row_broadcast(&p.b2)
}

/// Central finite differences of a scalar function, elementwise:
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Result<Tensor> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let fp = f(&probe);
        probe.data[i] = orig - eps;
        let fm = f(&probe);
        probe.data[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                index: i,
                value: if fp.is_finite() { fm } else { fp },
            });
        }
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Norm-relative gradient agreement: `|a - b| / max(|b|, floor)`.
pub fn relative_grad_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    diff / numeric.norm_l2().max(1e-12)
}
