//! The GCT1 tensor container.
//!
//! One record is: magic `0x47 0x43 0x54 0x31`, a u8 dtype code
//! (0 = float32, 1 = float64, 2 = complex128), a u8 ndim, `ndim` u64
//! little-endian dims, the row-major little-endian payload, then a
//! u32-length-prefixed UTF-8 JSON metadata blob. A file may hold several
//! records back to back (checkpoints store one per named tensor); readers
//! consume records until EOF.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Real, Tensor};

const MAGIC: [u8; 4] = [0x47, 0x43, 0x54, 0x31];

/// A tensor of any supported dtype, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    /// Interleaved (re, im) f64 pairs.
    Complex128(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            AnyTensor::F32(_) => Dtype::F32,
            AnyTensor::F64(_) => Dtype::F64,
            AnyTensor::Complex128(_) => Dtype::Complex128,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
            AnyTensor::Complex128(t) => t.shape(),
        }
    }

    /// Wraps a typed tensor, upcasting complex data to complex128.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> AnyTensor {
        if t.is_complex() {
            AnyTensor::Complex128(t.to_f64())
        } else {
            match T::DTYPE {
                Dtype::F32 => {
                    let data: Vec<f32> = t.data().iter().map(|x| x.as_f64() as f32).collect();
                    AnyTensor::F32(Tensor::from_vec(t.shape(), data).expect("shape agrees"))
                }
                _ => AnyTensor::F64(t.to_f64()),
            }
        }
    }

    /// Converts into the requested scalar type (complex stays complex).
    pub fn into_tensor<T: Real>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => {
                let data: Vec<T> = t.data().iter().map(|&x| T::of_f64(x as f64)).collect();
                Tensor::from_vec(t.shape(), data).expect("shape agrees")
            }
            AnyTensor::F64(t) => Tensor::from_f64_tensor(t),
            AnyTensor::Complex128(t) => {
                let data: Vec<T> = t.data().iter().map(|&x| T::of_f64(x)).collect();
                Tensor::from_vec_complex(t.shape(), data).expect("shape agrees")
            }
        }
    }
}

/// One on-disk record: a tensor plus its JSON metadata.
#[derive(Debug, Clone)]
pub struct Record {
    pub tensor: AnyTensor,
    pub metadata: serde_json::Value,
}

pub fn write_record(w: &mut impl Write, tensor: &AnyTensor, metadata: &serde_json::Value) -> Result<()> {
    let io_err = |e: std::io::Error| Error::Io {
        path: "<writer>".into(),
        message: e.to_string(),
    };
    w.write_all(&MAGIC).map_err(io_err)?;
    w.write_all(&[tensor.dtype().code()]).map_err(io_err)?;
    let shape = tensor.shape();
    if shape.len() > u8::MAX as usize {
        return Err(Error::Format(format!("too many dims: {}", shape.len())));
    }
    w.write_all(&[shape.len() as u8]).map_err(io_err)?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
    }
    match tensor {
        AnyTensor::F32(t) => {
            for v in t.data() {
                w.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }
        AnyTensor::F64(t) | AnyTensor::Complex128(t) => {
            for v in t.data() {
                w.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }
    }
    let blob = serde_json::to_string(metadata)
        .map_err(|e| Error::Format(format!("metadata serialisation: {e}")))?;
    let bytes = blob.as_bytes();
    w.write_all(&(bytes.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(bytes).map_err(io_err)?;
    Ok(())
}

fn read_exact_or_eof(r: &mut impl Read, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0usize;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..]).map_err(|e| Error::Io {
            path: "<reader>".into(),
            message: e.to_string(),
        })?;
        if n == 0 {
            if filled == 0 {
                return Ok(false);
            }
            return Err(Error::Format("truncated GCT1 record".into()));
        }
        filled += n;
    }
    Ok(true)
}

fn read_bytes(r: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    if !read_exact_or_eof(r, &mut buf)? {
        return Err(Error::Format("truncated GCT1 record".into()));
    }
    Ok(buf)
}

/// Reads one record; `Ok(None)` at a clean end of stream.
pub fn read_record(r: &mut impl Read) -> Result<Option<Record>> {
    let mut magic = [0u8; 4];
    if !read_exact_or_eof(r, &mut magic)? {
        return Ok(None);
    }
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic bytes {magic:02x?}")));
    }
    let header = read_bytes(r, 2)?;
    let dtype = Dtype::from_code(header[0])?;
    let ndim = header[1] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let b = read_bytes(r, 8)?;
        shape.push(u64::from_le_bytes(b.try_into().unwrap()) as usize);
    }
    let numel: usize = shape.iter().product();
    let tensor = match dtype {
        Dtype::F32 => {
            let raw = read_bytes(r, numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            AnyTensor::F32(Tensor::from_vec(&shape, data)?)
        }
        Dtype::F64 => {
            let raw = read_bytes(r, numel * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            AnyTensor::F64(Tensor::from_vec(&shape, data)?)
        }
        Dtype::Complex128 => {
            let raw = read_bytes(r, numel * 16)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            AnyTensor::Complex128(Tensor::from_vec_complex(&shape, data)?)
        }
    };
    let len_bytes = read_bytes(r, 4)?;
    let blob_len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
    let blob = read_bytes(r, blob_len)?;
    let metadata: serde_json::Value = serde_json::from_slice(&blob)
        .map_err(|e| Error::Format(format!("metadata parse: {e}")))?;
    Ok(Some(Record { tensor, metadata }))
}

pub fn write_records_to_file(path: &Path, records: &[(AnyTensor, serde_json::Value)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (t, m) in records {
        write_record(&mut w, t, m)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records_from_file(path: &Path) -> Result<Vec<Record>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut out = Vec::new();
    while let Some(rec) = read_record(&mut r)? {
        out.push(rec);
    }
    Ok(out)
}
