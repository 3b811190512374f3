//! The OVVT little-endian tensor container.
//!
//! A tensor record is `"OVVT"`, `u32` version (1), `u32` ndim, `ndim` x `u64`
//! dims, `u32` dtype code, then the row-major payload. Dtype 0 is `f32`;
//! dtype 1 (raw bytes) is used only for checkpoint metadata. A checkpoint is
//! a sequence of named records: `u32` name length, UTF-8 name, tensor record.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::synth::{VideoTensor, CHANNELS};

pub const MAGIC: &[u8; 4] = b"OVVT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;
pub const DTYPE_BYTES: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(dims: Vec<u64>, data: Vec<f32>) -> Self {
        Tensor {
            dims,
            data: TensorData::F32(data),
        }
    }

    pub fn bytes(data: Vec<u8>) -> Self {
        Tensor {
            dims: vec![data.len() as u64],
            data: TensorData::Bytes(data),
        }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product::<u64>() as usize
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::Bytes(_) => Err(Error::Format("expected f32 tensor".into())),
        }
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let len = match &t.data {
        TensorData::F32(v) => v.len(),
        TensorData::Bytes(v) => v.len(),
    };
    if len != t.numel() {
        return Err(Error::Shape(format!(
            "tensor dims {:?} do not match {len} values",
            t.dims
        )));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
    for d in &t.dims {
        w.write_all(&d.to_le_bytes())?;
    }
    match &t.data {
        TensorData::F32(v) => {
            w.write_all(&DTYPE_F32.to_le_bytes())?;
            let mut buf = Vec::with_capacity(v.len() * 4);
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        TensorData::Bytes(v) => {
            w.write_all(&DTYPE_BYTES.to_le_bytes())?;
            w.write_all(v)?;
        }
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let ndim = read_u32(r)? as usize;
    if ndim > 16 {
        return Err(Error::Format(format!("implausible ndim {ndim}")));
    }
    let dims = (0..ndim).map(|_| read_u64(r)).collect::<Result<Vec<_>>>()?;
    let numel = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("dims overflow".into()))? as usize;
    let dtype = read_u32(r)?;
    let data = match dtype {
        DTYPE_F32 => {
            let mut buf = vec![0u8; numel * 4];
            r.read_exact(&mut buf)?;
            TensorData::F32(
                buf.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
        }
        DTYPE_BYTES => {
            let mut buf = vec![0u8; numel];
            r.read_exact(&mut buf)?;
            TensorData::Bytes(buf)
        }
        other => return Err(Error::Format(format!("unknown dtype code {other}"))),
    };
    Ok(Tensor { dims, data })
}

pub fn video_to_tensor(v: &VideoTensor) -> Tensor {
    Tensor::f32(
        vec![v.t_frames as u64, v.height as u64, v.width as u64, CHANNELS as u64],
        v.data.clone(),
    )
}

pub fn tensor_to_video(t: Tensor) -> Result<VideoTensor> {
    if t.dims.len() != 4 || t.dims[3] != CHANNELS as u64 {
        return Err(Error::Format(format!(
            "expected (t, h, w, 3) video tensor, got dims {:?}",
            t.dims
        )));
    }
    let (tf, h, w) = (t.dims[0] as usize, t.dims[1] as usize, t.dims[2] as usize);
    match t.data {
        TensorData::F32(v) => VideoTensor::from_data(tf, h, w, v),
        TensorData::Bytes(_) => Err(Error::Format("video tensor must be f32".into())),
    }
}

pub fn write_video(path: impl AsRef<Path>, v: &VideoTensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, &video_to_tensor(v))?;
    w.flush()?;
    Ok(())
}

pub fn read_video(path: impl AsRef<Path>) -> Result<VideoTensor> {
    let mut r = BufReader::new(File::open(path)?);
    tensor_to_video(read_tensor(&mut r)?)
}

pub fn write_named<W: Write>(w: &mut W, records: &[(String, Tensor)]) -> Result<()> {
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_named<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    loop {
        let mut len = [0u8; 4];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let len = u32::from_le_bytes(len) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        out.push((name, read_tensor(r)?));
    }
    Ok(out)
}

pub fn write_named_file(path: impl AsRef<Path>, records: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_named(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn read_named_file(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    read_named(&mut BufReader::new(File::open(path)?))
}
