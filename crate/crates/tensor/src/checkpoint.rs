//! Single-file model archive.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic   8 bytes  "NDETCKPT"
//! version u32
//! dtype   u8       1 = f32, 2 = f64
//! config  u32 length + UTF-8 text (free-form `key = value` echo)
//! count   u32
//! per tensor:
//!   name      u32 length + UTF-8
//!   trainable u8
//!   dims      5 x u32 (n, c, d, h, w)
//!   data      numel x dtype
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"NDETCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug)]
pub struct Archive<T> {
    pub config: String,
    pub tensors: Vec<(String, Tensor<T>)>,
}

pub fn save<T: Scalar>(path: &Path, config: &str, store: &ParamStore<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u8(T::DTYPE.tag())?;
    write_str(&mut w, config)?;
    w.write_u32::<LittleEndian>(store.len() as u32)?;
    let mut buf = Vec::new();
    for (_, name, t, trainable) in store.iter() {
        write_str(&mut w, name)?;
        w.write_u8(trainable as u8)?;
        for d in t.shape().as_array() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        buf.clear();
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Archive<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a model archive".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported archive version {version}")));
    }
    let dtype = DType::from_tag(r.read_u8()?).ok_or_else(|| Error::Checkpoint("unknown dtype".into()))?;
    if dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!("archive holds {dtype:?}, requested {:?}", T::DTYPE)));
    }
    let config = read_str(&mut r)?;
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_str(&mut r)?;
        let _trainable = r.read_u8()?;
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.read_u32::<LittleEndian>()? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3], dims[4]);
        let mut bytes = vec![0u8; shape.numel() * dtype.size()];
        r.read_exact(&mut bytes)?;
        let data = bytes.chunks(dtype.size()).map(T::read_le).collect();
        tensors.push((name, Tensor::from_vec(shape, data)?));
    }
    Ok(Archive { config, tensors })
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)?;
    String::from_utf8(bytes).map_err(|e| Error::Checkpoint(e.to_string()))
}
