//! Binary checkpoint container.
//!
//! Layout: magic `SFCK`, `u32` format version, then records until end of
//! file. Each record is `u32` name length, UTF-8 name, `u32` rank, `rank`
//! `u32` dims and the little-endian `f32` payload. All integers are
//! little-endian. The run configuration travels as a rank-1 record named
//! [`META_CONFIG`] whose payload holds the JSON bytes, one per float.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, LabResult};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SFCK";
pub const FORMAT_VERSION: u32 = 1;
pub const META_CONFIG: &str = "meta/config";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// JSON text of the run configuration.
    pub config_json: String,
    /// Named tensors in store order.
    pub tensors: Vec<(String, Tensor)>,
}

fn write_record(w: &mut impl Write, name: &str, shape: &[usize], values: impl Iterator<Item = f32>) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_u32::<LittleEndian>(shape.len() as u32)?;
    for &d in shape {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for v in values {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        let meta = self.config_json.as_bytes();
        write_record(w, META_CONFIG, &[meta.len()], meta.iter().map(|&b| f32::from(b)))?;
        for (name, t) in &self.tensors {
            write_record(w, name, t.shape(), t.data().iter().map(|&v| v as f32))?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> LabResult<Self> {
        let bad = |what: &str| Error::Format(format!("checkpoint: {what}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("missing magic"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|_| bad("missing version"))?;
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut config_json = None;
        let mut tensors = Vec::new();
        loop {
            let name_len = match r.read_u32::<LittleEndian>() {
                Ok(n) => n as usize,
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(_) => return Err(bad("unreadable record")),
            };
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
            let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
            let rank = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated rank"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u32::<LittleEndian>().map_err(|_| bad("truncated dims"))? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f64::from(
                    r.read_f32::<LittleEndian>()
                        .map_err(|_| bad(&format!("truncated payload of {name}")))?,
                ));
            }
            if name == META_CONFIG {
                let bytes: Vec<u8> = data.iter().map(|&v| v as u8).collect();
                config_json = Some(String::from_utf8(bytes).map_err(|_| bad("config is not UTF-8"))?);
            } else {
                let t = Tensor::new(shape, data).map_err(|e| bad(&format!("{name}: {e}")))?;
                tensors.push((name, t));
            }
        }
        Ok(Self {
            config_json: config_json.ok_or_else(|| bad("no config record"))?,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> LabResult<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> LabResult<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut std::io::BufReader::new(file))
    }
}
