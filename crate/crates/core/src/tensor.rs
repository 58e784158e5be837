//! Dense 64-bit tensors with an optional gradient buffer.
//!
//! All arithmetic in the crate runs in f64; the gradient-check tolerances
//! rely on it. Tensors are row-major and never broadcast implicitly.

use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Magic bytes for the binary tensor encoding used in checkpoints.
pub const TENSOR_MAGIC: &[u8; 4] = b"MWT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![1.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    /// Normal(0, std) init, the shared recipe for projection weights.
    pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be positive");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| dist.sample(rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        }
    }

    /// Uniform draw from the unit sphere, one row at a time.
    pub fn rand_unit_rows(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, 1.0).unwrap();
        let mut data = vec![0.0; rows * dim];
        for r in 0..rows {
            loop {
                let row: Vec<f64> = (0..dim).map(|_| dist.sample(rng)).collect();
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-9 {
                    for (c, v) in row.iter().enumerate() {
                        data[r * dim + c] = v / norm;
                    }
                    break;
                }
            }
        }
        Tensor {
            shape: vec![rows, dim],
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has no axes")
    }

    /// Mark as a learnable parameter with a zeroed gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Sum `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let g = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let d = self.cols();
        &self.data[r * d..(r + 1) * d]
    }

    // ── binary encoding: "MWT1", rank u32, dims u32 each, f64 LE values ──

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, path: &str) -> Result<Self> {
        let fmt = |msg: &str| Error::Format {
            path: path.to_string(),
            msg: msg.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| fmt("truncated tensor header"))?;
        if &magic != TENSOR_MAGIC {
            return Err(fmt("bad tensor magic (expected MWT1)"));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)
            .map_err(|_| fmt("truncated tensor rank"))?;
        let rank = u32::from_le_bytes(buf4) as usize;
        if rank > 8 {
            return Err(fmt("tensor rank out of range"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut buf4)
                .map_err(|_| fmt("truncated tensor dims"))?;
            shape.push(u32::from_le_bytes(buf4) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf8 = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf8)
                .map_err(|_| fmt("truncated tensor values"))?;
            data.push(f64::from_le_bytes(buf8));
        }
        Tensor::new(shape, data)
    }
}

/// Plain data kernel: `A[m,k] @ B[k,n]` row-major.
pub fn matmul_data(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// Matrix product of 2-D tensors with shape validation.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    Tensor::new(vec![m, n], matmul_data(&a.data, &b.data, m, k, n))
}

/// ℓ2-normalize a vector in place semantics: zero vectors stay zero.
pub fn l2_normalize_row(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| x / norm).collect()
}

/// ℓ2-normalize; 1-D tensors are one row, 2-D tensors normalize per row.
pub fn l2_normalize(v: &Tensor) -> Tensor {
    if v.shape.len() <= 1 {
        Tensor::new(v.shape.clone(), l2_normalize_row(&v.data)).unwrap()
    } else {
        let d = v.cols();
        let mut out = Vec::with_capacity(v.numel());
        for r in 0..v.rows() {
            out.extend(l2_normalize_row(&v.data[r * d..(r + 1) * d]));
        }
        Tensor::new(v.shape.clone(), out).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_len() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = matmul(&i2, &b).unwrap();
        assert_eq!(c.data(), b.data());
    }

    #[test]
    fn matmul_zero() {
        let z = Tensor::zeros(&[2, 2]);
        let b = Tensor::new(vec![2, 2], vec![5.0, -6.0, 7.0, 8.0]).unwrap();
        assert!(matmul(&z, &b).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_hand_product() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 2]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn l2_normalize_hand() {
        let v = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let n = l2_normalize(&v);
        assert!((n.data()[0] - 0.6).abs() < 1e-15);
        assert!((n.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_unit_is_identity() {
        let v = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        assert_eq!(l2_normalize(&v).data(), v.data());
    }

    #[test]
    fn l2_normalize_zero_convention() {
        let v = Tensor::zeros(&[2]);
        assert_eq!(l2_normalize(&v).data(), &[0.0, 0.0]);
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let mut rng = crate::rng::stream(1, "tensor-test");
        let t = Tensor::randn(&[3, 4], 0.5, &mut rng);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = Tensor::read_from(&mut buf.as_slice(), "mem").unwrap();
        assert_eq!(t.shape(), back.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_tensor_is_an_error() {
        let t = Tensor::zeros(&[2, 2]);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Tensor::read_from(&mut buf.as_slice(), "mem").is_err());
    }
}
