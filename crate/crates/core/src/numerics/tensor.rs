//! Dense row-major f64 tensors and the value-level kernels behind the tape.

use crate::error::{Error, Result};

/// A dense tensor of 64-bit floats in row-major layout.
///
/// Scalars are represented with shape `[1]`. Values are immutable once
/// produced by a public operation; training code mutates parameters through
/// [`Tensor::data_mut`] between passes.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::shape(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(Error::shape(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::shape(format!(
                "expected rank-3 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let (_, n) = (self.shape[0], self.shape[1]);
        &self.data[i * n..(i + 1) * n]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!(
            "{op}: shape {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor::from_vec(a.shape.clone(), data)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "sub")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Tensor::from_vec(a.shape.clone(), data)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mul")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.shape.clone(), data)
}

pub fn mul_scalar(a: &Tensor, c: f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|x| x * c).collect(),
    }
}

pub fn relu(a: &Tensor) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|x| x.max(0.0)).collect(),
    }
}

/// Elementwise exponential. Inputs large enough to overflow f64 are a domain
/// error so downstream tensors stay finite.
pub fn exp(a: &Tensor) -> Result<Tensor> {
    let mut data = Vec::with_capacity(a.data.len());
    for &x in &a.data {
        let y = x.exp();
        if !y.is_finite() {
            return Err(Error::domain(format!("exp overflow at input {x}")));
        }
        data.push(y);
    }
    Tensor::from_vec(a.shape.clone(), data)
}

/// Elementwise natural log; nonpositive inputs are a domain error.
pub fn log(a: &Tensor) -> Result<Tensor> {
    let mut data = Vec::with_capacity(a.data.len());
    for &x in &a.data {
        if x <= 0.0 {
            return Err(Error::domain(format!("log of nonpositive value {x}")));
        }
        data.push(x.ln());
    }
    Tensor::from_vec(a.shape.clone(), data)
}

/// `a [m,k] × b [k,n] -> [m,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul: inner dimensions {k} vs {k2} (shapes {:?} × {:?})",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let c_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b.data[kk * n..(kk + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += av * bv;
            }
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

/// `a [m,n] × bᵀ -> [m,k]` for `b [k,n]`, without materializing the transpose.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let (k, n2) = b.dims2()?;
    if n != n2 {
        return Err(Error::shape(format!(
            "matmul_nt: inner dimensions {n} vs {n2}"
        )));
    }
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let a_row = &a.data[i * n..(i + 1) * n];
        for j in 0..k {
            let b_row = &b.data[j * n..(j + 1) * n];
            out[i * k + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::from_vec(vec![m, k], out)
}

/// `aᵀ × b -> [k,n]` for `a [m,k]`, `b [m,n]`, without materializing the
/// transpose.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (m2, n) = b.dims2()?;
    if m != m2 {
        return Err(Error::shape(format!(
            "matmul_tn: outer dimensions {m} vs {m2}"
        )));
    }
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let b_row = &b.data[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let c_row = &mut out[kk * n..(kk + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += av * bv;
            }
        }
    }
    Tensor::from_vec(vec![k, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::from_vec(vec![n, m], out)
}

/// Shapes of a conv1d application: input `[C_in, T]` or `[B, C_in, T]`,
/// kernel `[C_out, C_in, K]`.
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub k: usize,
    pub batched: bool,
}

pub(crate) fn conv1d_dims(x: &Tensor, w: &Tensor, stride: usize) -> Result<ConvDims> {
    if stride == 0 {
        return Err(Error::contract("conv1d: stride must be >= 1".to_string()));
    }
    let (c_out, cw_in, k) = w.dims3()?;
    let (batch, c_in, t_in, batched) = match x.shape[..] {
        [c, t] => (1, c, t, false),
        [b, c, t] => (b, c, t, true),
        _ => {
            return Err(Error::shape(format!(
                "conv1d: input must be [C,T] or [B,C,T], got {:?}",
                x.shape
            )))
        }
    };
    if c_in != cw_in {
        return Err(Error::shape(format!(
            "conv1d: input has {c_in} channels, kernel expects {cw_in}"
        )));
    }
    if k > t_in {
        return Err(Error::shape(format!(
            "conv1d: kernel length {k} exceeds input length {t_in}"
        )));
    }
    let t_out = (t_in - k) / stride + 1;
    Ok(ConvDims {
        batch,
        c_in,
        c_out,
        t_in,
        t_out,
        k,
        batched,
    })
}

/// Valid (no padding) cross-correlation along the time axis.
pub fn conv1d(x: &Tensor, w: &Tensor, stride: usize) -> Result<Tensor> {
    let d = conv1d_dims(x, w, stride)?;
    let mut out = vec![0.0; d.batch * d.c_out * d.t_out];
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let y_row = &mut out[(b * d.c_out + co) * d.t_out..][..d.t_out];
            for ci in 0..d.c_in {
                let x_row = &x.data[(b * d.c_in + ci) * d.t_in..][..d.t_in];
                let w_row = &w.data[(co * d.c_in + ci) * d.k..][..d.k];
                if stride == 1 && d.k == 5 {
                    // the encoder's hot shape: all taps in one pass over t
                    let [w0, w1, w2, w3, w4] =
                        [w_row[0], w_row[1], w_row[2], w_row[3], w_row[4]];
                    for (t, y) in y_row.iter_mut().enumerate() {
                        let xs = &x_row[t..t + 5];
                        *y += w0 * xs[0] + w1 * xs[1] + w2 * xs[2] + w3 * xs[3] + w4 * xs[4];
                    }
                    continue;
                }
                for (kk, &wv) in w_row.iter().enumerate() {
                    if stride == 1 {
                        let xs = &x_row[kk..kk + d.t_out];
                        for (y, &xv) in y_row.iter_mut().zip(xs) {
                            *y += wv * xv;
                        }
                    } else {
                        for (t, y) in y_row.iter_mut().enumerate() {
                            *y += wv * x_row[t * stride + kk];
                        }
                    }
                }
            }
        }
    }
    let shape = if d.batched {
        vec![d.batch, d.c_out, d.t_out]
    } else {
        vec![d.c_out, d.t_out]
    };
    Tensor::from_vec(shape, out)
}

/// Accumulates `dL/dw` for a conv1d application into `dw`.
pub(crate) fn conv1d_grad_w(x: &Tensor, dy: &[f64], d: &ConvDims, stride: usize, dw: &mut [f64]) {
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let dy_row = &dy[(b * d.c_out + co) * d.t_out..][..d.t_out];
            for ci in 0..d.c_in {
                let x_row = &x.data()[(b * d.c_in + ci) * d.t_in..][..d.t_in];
                let dw_row = &mut dw[(co * d.c_in + ci) * d.k..][..d.k];
                if stride == 1 && d.k == 5 {
                    // all five taps in one pass over t
                    let mut acc = [0.0f64; 5];
                    for (t, &g) in dy_row.iter().enumerate() {
                        let xs = &x_row[t..t + 5];
                        acc[0] += g * xs[0];
                        acc[1] += g * xs[1];
                        acc[2] += g * xs[2];
                        acc[3] += g * xs[3];
                        acc[4] += g * xs[4];
                    }
                    for (dwv, a) in dw_row.iter_mut().zip(acc) {
                        *dwv += a;
                    }
                    continue;
                }
                for (kk, dwv) in dw_row.iter_mut().enumerate() {
                    let s: f64 = if stride == 1 {
                        dy_row
                            .iter()
                            .zip(&x_row[kk..kk + d.t_out])
                            .map(|(g, xv)| g * xv)
                            .sum()
                    } else {
                        dy_row
                            .iter()
                            .enumerate()
                            .map(|(t, g)| g * x_row[t * stride + kk])
                            .sum()
                    };
                    *dwv += s;
                }
            }
        }
    }
}

/// Accumulates `dL/dx` for a conv1d application into `dx`.
pub(crate) fn conv1d_grad_x(w: &Tensor, dy: &[f64], d: &ConvDims, stride: usize, dx: &mut [f64]) {
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let dy_row = &dy[(b * d.c_out + co) * d.t_out..][..d.t_out];
            for ci in 0..d.c_in {
                let dx_row = &mut dx[(b * d.c_in + ci) * d.t_in..][..d.t_in];
                let w_row = &w.data()[(co * d.c_in + ci) * d.k..][..d.k];
                if stride == 1 && d.k == 5 {
                    // dx[s] += sum_k w[k] dy[s-k]; interior positions take
                    // all five taps in one pass, boundaries go tap by tap
                    let [w0, w1, w2, w3, w4] =
                        [w_row[0], w_row[1], w_row[2], w_row[3], w_row[4]];
                    let interior_end = d.t_out;
                    for s in 4..interior_end {
                        let ds = &dy_row[s - 4..=s];
                        dx_row[s] +=
                            w4 * ds[0] + w3 * ds[1] + w2 * ds[2] + w1 * ds[3] + w0 * ds[4];
                    }
                    for s in 0..4.min(d.t_in) {
                        let mut acc = 0.0;
                        for k in 0..=s.min(4) {
                            if s - k < d.t_out {
                                acc += w_row[k] * dy_row[s - k];
                            }
                        }
                        dx_row[s] += acc;
                    }
                    for s in interior_end.max(4)..d.t_in {
                        let mut acc = 0.0;
                        let k_lo = s + 1 - d.t_out;
                        for k in k_lo..5 {
                            if k <= s && s - k < d.t_out {
                                acc += w_row[k] * dy_row[s - k];
                            }
                        }
                        dx_row[s] += acc;
                    }
                    continue;
                }
                for (kk, &wv) in w_row.iter().enumerate() {
                    if stride == 1 {
                        let xs = &mut dx_row[kk..kk + d.t_out];
                        for (x, &g) in xs.iter_mut().zip(dy_row) {
                            *x += wv * g;
                        }
                    } else {
                        for (t, &g) in dy_row.iter().enumerate() {
                            dx_row[t * stride + kk] += wv * g;
                        }
                    }
                }
            }
        }
    }
}

/// Iterator support for operations along one axis: yields the start offset
/// and element stride of each lane.
pub(crate) fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(a: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= a.rank() {
        return Err(Error::shape(format!(
            "softmax: axis {axis} out of range for shape {:?}",
            a.shape
        )));
    }
    let (outer, len, inner) = lanes(&a.shape, axis);
    let mut out = a.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for l in 0..len {
                max = max.max(out[base + l * inner]);
            }
            let mut sum = 0.0;
            for l in 0..len {
                let idx = base + l * inner;
                let e = (out[idx] - max).exp();
                out[idx] = e;
                sum += e;
            }
            for l in 0..len {
                out[base + l * inner] /= sum;
            }
        }
    }
    Tensor::from_vec(a.shape.clone(), out)
}

/// L2-normalizes each lane along `axis`. A zero lane is a domain error:
/// embeddings are post-projection and nonzero in practice, and failing loudly
/// catches encoder collapse.
pub fn l2_normalize(a: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= a.rank() {
        return Err(Error::shape(format!(
            "l2_normalize: axis {axis} out of range for shape {:?}",
            a.shape
        )));
    }
    let (outer, len, inner) = lanes(&a.shape, axis);
    let mut out = a.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut sq = 0.0;
            for l in 0..len {
                let v = out[base + l * inner];
                sq += v * v;
            }
            if sq == 0.0 {
                return Err(Error::domain(
                    "l2_normalize: zero vector has no direction".to_string(),
                ));
            }
            let inv = 1.0 / sq.sqrt();
            for l in 0..len {
                out[base + l * inner] *= inv;
            }
        }
    }
    Tensor::from_vec(a.shape.clone(), out)
}

pub fn sum_all(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data.iter().sum())
}

pub fn mean_all(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data.iter().sum::<f64>() / a.data.len() as f64)
}

pub fn sum_axis(a: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= a.rank() {
        return Err(Error::shape(format!(
            "sum_axis: axis {axis} out of range for shape {:?}",
            a.shape
        )));
    }
    let (outer, len, inner) = lanes(&a.shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            for i in 0..inner {
                out[o * inner + i] += a.data[(o * len + l) * inner + i];
            }
        }
    }
    let mut shape = a.shape.clone();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Tensor::from_vec(shape, out)
}

/// Mean over the trailing (time) axis: the global average pool.
pub fn mean_last_axis(a: &Tensor) -> Result<Tensor> {
    if a.rank() < 2 {
        return Err(Error::shape(format!(
            "mean_last_axis: need rank >= 2, got {:?}",
            a.shape
        )));
    }
    let t = a.shape[a.rank() - 1];
    let rows = a.len() / t;
    let mut out = vec![0.0; rows];
    for (r, o) in out.iter_mut().enumerate() {
        *o = a.data[r * t..(r + 1) * t].iter().sum::<f64>() / t as f64;
    }
    Tensor::from_vec(a.shape[..a.rank() - 1].to_vec(), out)
}

/// Concatenates two rank-2 tensors along columns: `[n,a] ++ [n,b] -> [n,a+b]`.
pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, ca) = a.dims2()?;
    let (n2, cb) = b.dims2()?;
    if n != n2 {
        return Err(Error::shape(format!(
            "concat_cols: row counts {n} vs {n2}"
        )));
    }
    let mut out = Vec::with_capacity(n * (ca + cb));
    for i in 0..n {
        out.extend_from_slice(a.row(i));
        out.extend_from_slice(b.row(i));
    }
    Tensor::from_vec(vec![n, ca + cb], out)
}

/// Adds a rank-1 bias along `axis` of `x`.
pub fn add_bias(x: &Tensor, b: &Tensor, axis: usize) -> Result<Tensor> {
    if b.rank() != 1 {
        return Err(Error::shape(format!(
            "add_bias: bias must be rank 1, got {:?}",
            b.shape
        )));
    }
    if axis >= x.rank() || x.shape[axis] != b.len() {
        return Err(Error::shape(format!(
            "add_bias: bias of {} along axis {axis} of {:?}",
            b.len(),
            x.shape
        )));
    }
    let (outer, len, inner) = lanes(&x.shape, axis);
    let mut out = x.data.clone();
    for o in 0..outer {
        for l in 0..len {
            let bv = b.data[l];
            let base = (o * len + l) * inner;
            for v in &mut out[base..base + inner] {
                *v += bv;
            }
        }
    }
    Tensor::from_vec(x.shape.clone(), out)
}
