use std::io::{Read, Write};
use std::path::Path;

use crate::error::{ensure, Error, Result};

/// Dense row-major `f64` array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(
            n == data.len(),
            Dimension,
            "shape {:?} holds {} values, got {}",
            shape,
            n,
            data.len()
        );
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        ensure!(
            grad.len() == self.data.len(),
            Dimension,
            "gradient length {} does not match tensor length {}",
            grad.len(),
            self.data.len()
        );
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Error unless every value is finite; `what` names the tensor in the message.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!(
                "{what}: element {i} is {}",
                self.data[i]
            ))),
        }
    }

    /// Slice out item `index` along the leading axis.
    pub fn index_axis0(&self, index: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        Self {
            shape: self.shape[1..].to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Stack same-shape tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Self> {
        ensure!(!items.is_empty(), Dimension, "cannot stack zero tensors");
        let inner = items[0].shape.clone();
        let mut data = Vec::with_capacity(items.len() * items[0].len());
        for t in items {
            ensure!(
                t.shape == inner,
                Dimension,
                "stack shape mismatch: {:?} vs {:?}",
                t.shape,
                inner
            );
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&inner);
        Self::new(&shape, data)
    }
}

const MAGIC: &[u8; 4] = b"NTN1";

/// Storage type of a tensor container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

/// Write `tensor` in the NTN1 container layout: magic, dtype code, ndim,
/// little-endian u32 dims, little-endian values.
pub fn write_container<W: Write>(mut w: W, tensor: &Tensor, dtype: DType) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[dtype as u8, tensor.ndim() as u8])?;
    for &d in tensor.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(tensor.len() * 8);
    match dtype {
        DType::F32 => tensor
            .data()
            .iter()
            .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => tensor
            .data()
            .iter()
            .for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    w.write_all(&buf)
}

pub fn read_container<R: Read>(mut r: R) -> Result<(Tensor, DType)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::format(0, format!("read failed: {e}")))?;
    decode_container(&bytes)
}

pub fn decode_container(bytes: &[u8]) -> Result<(Tensor, DType)> {
    if bytes.len() < 6 {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected NTN1"));
    }
    let dtype = match bytes[4] {
        0 => DType::F32,
        1 => DType::F64,
        c => return Err(Error::format(4, format!("unknown dtype code {c}"))),
    };
    let ndim = bytes[5] as usize;
    let mut off = 6;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let chunk = bytes
            .get(off..off + 4)
            .ok_or_else(|| Error::format(off as u64, "truncated dims"))?;
        shape.push(u32::from_le_bytes(chunk.try_into().unwrap()) as usize);
        off += 4;
    }
    let n: usize = shape.iter().product();
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let payload = &bytes[off..];
    if payload.len() != n * width {
        return Err(Error::format(
            (off + payload.len().min(n * width)) as u64,
            format!(
                "expected {} payload bytes, found {}",
                n * width,
                payload.len()
            ),
        ));
    }
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok((Tensor::new(&shape, data)?, dtype))
}

pub fn save_tensor(path: &Path, tensor: &Tensor, dtype: DType) -> Result<()> {
    let mut buf = Vec::new();
    write_container(&mut buf, tensor, dtype).expect("writing to a Vec cannot fail");
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes).map(|(t, _)| t)
}
