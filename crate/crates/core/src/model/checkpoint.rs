//! Model checkpoint file.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        4 bytes  "SSCK"
//! version      u16      1
//! n_layers     u32
//! d_model      u32
//! n_heads      u32
//! d_ff         u32
//! vocab_size   u32
//! max_seq      u32
//! seed         u64
//! blob_count   u32
//! blob_count × {
//!     name_len u16, name (UTF-8)
//!     ndim u8, dims u32 × ndim
//!     data f32 × product(dims)
//! }
//! ```
//!
//! Blob names are `base.<block>.<role>.weight`, `base.<block>.<role>.bias`,
//! `client.embedding`, `client.norm.<block>.attn`, `client.norm.<block>.ff`
//! and `client.norm.final`. The executor reads only `base.*` blobs and the
//! client only `client.*`; each skips the other half without decoding it.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use super::{BaseLayers, BaseModel, BlockNorms, ClientWeights, ModelConfig, ModelError, Result};
use crate::tensor::{AffineParams, Tensor};

pub const MAGIC: [u8; 4] = *b"SSCK";
pub const VERSION: u16 = 1;

fn err(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn write_blob<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[t.shape().len() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_model<W: Write>(w: &mut W, model: &BaseModel) -> Result<()> {
    let c = &model.config;
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size, c.max_seq] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&c.seed.to_le_bytes())?;

    let mut blobs: Vec<(String, &Tensor)> = Vec::new();
    for (addr, p) in model.base.iter() {
        blobs.push((format!("base.{}.{}.weight", addr.block, addr.role), p.weight()));
        if let Some(b) = p.bias() {
            blobs.push((format!("base.{}.{}.bias", addr.block, addr.role), b));
        }
    }
    blobs.push(("client.embedding".into(), &model.client.embedding));
    for (i, n) in model.client.norms.iter().enumerate() {
        blobs.push((format!("client.norm.{i}.attn"), &n.attn));
        blobs.push((format!("client.norm.{i}.ff"), &n.ff));
    }
    blobs.push(("client.norm.final".into(), &model.client.final_norm));

    w.write_all(&(blobs.len() as u32).to_le_bytes())?;
    for (name, t) in blobs {
        write_blob(w, &name, t)?;
    }
    Ok(())
}

pub fn save(path: impl AsRef<Path>, model: &BaseModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| err(format!("truncated: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

pub fn read_header<R: Read>(r: &mut R) -> Result<ModelConfig> {
    if read_array::<4, _>(r)? != MAGIC {
        return Err(err("bad magic"));
    }
    let version = u16::from_le_bytes(read_array(r)?);
    if version != VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let mut f = [0usize; 6];
    for v in &mut f {
        *v = read_u32(r)? as usize;
    }
    let seed = u64::from_le_bytes(read_array(r)?);
    let config = ModelConfig {
        n_layers: f[0],
        d_model: f[1],
        n_heads: f[2],
        d_ff: f[3],
        vocab_size: f[4],
        max_seq: f[5],
        seed,
    };
    config.validate()?;
    Ok(config)
}

/// Reads every blob whose name starts with `prefix`, skipping the rest.
fn read_blobs<R: Read + Seek>(r: &mut R, prefix: &str) -> Result<(ModelConfig, HashMap<String, Tensor>)> {
    let config = read_header(r)?;
    let count = read_u32(r)?;
    let mut out = HashMap::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_array(r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| err(format!("truncated: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| err("blob name is not UTF-8"))?;
        let ndim = read_array::<1, _>(r)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u32(r)? as usize);
        }
        let len: usize = dims.iter().product();
        if !name.starts_with(prefix) {
            r.seek(SeekFrom::Current((len * 4) as i64))?;
            continue;
        }
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes).map_err(|e| err(format!("{name}: truncated data: {e}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.insert(name, Tensor::new(dims, data)?);
    }
    Ok((config, out))
}

fn take(blobs: &mut HashMap<String, Tensor>, name: &str) -> Result<Tensor> {
    blobs.remove(name).ok_or_else(|| err(format!("missing blob {name}")))
}

pub fn read_base<R: Read + Seek>(r: &mut R) -> Result<(ModelConfig, BaseLayers)> {
    let (config, mut blobs) = read_blobs(r, "base.")?;
    let mut layers = BTreeMap::new();
    for addr in config.layer_addresses() {
        let weight = take(&mut blobs, &format!("base.{}.{}.weight", addr.block, addr.role))?;
        let bias = blobs.remove(&format!("base.{}.{}.bias", addr.block, addr.role));
        let (d_in, d_out) = config.dims(addr.role);
        if weight.shape() != [d_in, d_out] {
            return Err(err(format!("{addr}: weight shape {:?}", weight.shape())));
        }
        layers.insert(addr, AffineParams::new(weight, bias)?);
    }
    Ok((config, BaseLayers::new(layers)))
}

pub fn read_client<R: Read + Seek>(r: &mut R) -> Result<(ModelConfig, ClientWeights)> {
    let (config, mut blobs) = read_blobs(r, "client.")?;
    let embedding = take(&mut blobs, "client.embedding")?;
    if embedding.shape() != [config.vocab_size, config.d_model] {
        return Err(err(format!("embedding shape {:?}", embedding.shape())));
    }
    let norms = (0..config.n_layers)
        .map(|i| {
            Ok(BlockNorms {
                attn: take(&mut blobs, &format!("client.norm.{i}.attn"))?,
                ff: take(&mut blobs, &format!("client.norm.{i}.ff"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let final_norm = take(&mut blobs, "client.norm.final")?;
    Ok((
        config,
        ClientWeights {
            embedding,
            norms,
            final_norm,
        },
    ))
}

pub fn load_base(path: impl AsRef<Path>) -> Result<(ModelConfig, BaseLayers)> {
    read_base(&mut BufReader::new(File::open(path)?))
}

pub fn load_client(path: impl AsRef<Path>) -> Result<(ModelConfig, ClientWeights)> {
    read_client(&mut BufReader::new(File::open(path)?))
}

pub fn load(path: impl AsRef<Path>) -> Result<BaseModel> {
    let (config, base) = load_base(&path)?;
    let (_, client) = load_client(&path)?;
    Ok(BaseModel { config, base, client })
}
