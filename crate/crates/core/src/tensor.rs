//! Dense row-major tensors of `f64` values and the `SSTN1` binary container.
//!
//! The container layout is: the magic bytes `SSTN1`, the rank as a
//! little-endian `u32`, one little-endian `u32` per extent, then the payload
//! as little-endian `f64` values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};

pub const SSTN1_MAGIC: &[u8; 5] = b"SSTN1";

/// Dense multi-dimensional array. Rank 0 holds a single scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorRepr {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl serde::Serialize for Tensor {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        TensorRepr {
            shape: self.shape.clone(),
            data: self.data.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> serde::Deserialize<'de> for Tensor {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = TensorRepr::deserialize(deserializer)?;
        Tensor::from_vec(&repr.shape, repr.data).map_err(serde::de::Error::custom)
    }
}

fn shape_len(shape: &[usize]) -> Result<usize> {
    let mut product: usize = 1;
    for &extent in shape {
        product = product
            .checked_mul(extent)
            .ok_or_else(|| CoreError::InvalidArgument(format!("shape {shape:?} overflows")))?;
    }
    Ok(product)
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let len = shape_len(shape).expect("shape overflow");
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        assert!(value.is_finite(), "tensor fill value must be finite");
        let len = shape_len(shape).expect("shape overflow");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        assert!(value.is_finite(), "scalar tensor value must be finite");
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let len = shape_len(shape)?;
        if data.len() != len {
            return Err(CoreError::InvalidArgument(format!(
                "shape {shape:?} wants {len} values, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(CoreError::Numeric(format!(
                "non-finite value {bad} in tensor of shape {shape:?}"
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a scalar (length-1) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() requires a single-value tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff needs equal shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn write_tensor(writer: &mut impl Write, tensor: &Tensor) -> Result<()> {
    writer.write_all(SSTN1_MAGIC)?;
    let rank = u32::try_from(tensor.rank())
        .map_err(|_| CoreError::InvalidArgument("tensor rank exceeds u32".into()))?;
    writer.write_all(&rank.to_le_bytes())?;
    for &extent in tensor.shape() {
        let extent = u32::try_from(extent)
            .map_err(|_| CoreError::InvalidArgument("tensor extent exceeds u32".into()))?;
        writer.write_all(&extent.to_le_bytes())?;
    }
    for value in tensor.data() {
        writer.write_all(&value.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(reader: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 5];
    read_exact(reader, &mut magic)?;
    if &magic != SSTN1_MAGIC {
        return Err(CoreError::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, SSTN1_MAGIC
        )));
    }
    let rank = read_u32(reader)? as usize;
    if rank > 16 {
        return Err(CoreError::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(reader)? as usize);
    }
    let len = shape_len(&shape).map_err(|_| CoreError::Format("shape overflow".into()))?;
    let mut data = Vec::with_capacity(len);
    let mut buf = [0u8; 8];
    for _ in 0..len {
        read_exact(reader, &mut buf)?;
        let value = f64::from_le_bytes(buf);
        if !value.is_finite() {
            return Err(CoreError::Format(format!(
                "non-finite payload value {value}"
            )));
        }
        data.push(value);
    }
    Ok(Tensor { shape, data })
}

fn read_exact(reader: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    reader.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CoreError::Format("truncated tensor container".into())
        } else {
            CoreError::Io(e)
        }
    })
}

fn read_u32(reader: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(reader, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn save_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    write_tensor(&mut writer, tensor)?;
    writer.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut reader = BufReader::new(File::open(path)?);
    read_tensor(&mut reader)
}
