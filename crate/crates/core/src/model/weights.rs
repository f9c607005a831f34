//! Binary weights container.
//!
//! Layout (all integers u32 little-endian): magic `RCBM`, version, entry
//! count, then per entry: name length, UTF-8 name, rank, extents, and the
//! values as little-endian f32. Entries named `meta.*` hold the model spec;
//! the remaining entries are the parameter store in registration order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{build_model, Model, ModelSpec};
use crate::attention::AttentionVariant;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"RCBM";
pub const WEIGHTS_VERSION: u32 = 1;

/// A decoded container entry.
#[derive(Clone, Debug, PartialEq)]
pub struct RawEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

fn meta_entries(spec: &ModelSpec) -> Vec<RawEntry> {
    let attention = match spec.attention {
        AttentionVariant::None => 0.0,
        AttentionVariant::Cbam => 1.0,
        AttentionVariant::ResCbam => 2.0,
    };
    [
        ("meta.num_classes", spec.num_classes as f64),
        ("meta.attention", attention),
        ("meta.width_mult", spec.width_mult),
        ("meta.depth_mult", spec.depth_mult),
        ("meta.reg_max", spec.reg_max as f64),
        ("meta.input_size", spec.input_size as f64),
        ("meta.bn_momentum", spec.bn_momentum),
        ("meta.bn_eps", spec.bn_eps),
    ]
    .into_iter()
    .map(|(name, v)| RawEntry {
        name: name.to_string(),
        shape: vec![4],
        values: encode_f64(v),
    })
    .collect()
}

/// Meta values are f64 bit patterns split into four 16-bit chunks, each of
/// which an f32 holds exactly.
fn encode_f64(v: f64) -> Vec<f32> {
    let bits = v.to_bits();
    (0..4).map(|i| ((bits >> (16 * i)) & 0xffff) as f32).collect()
}

fn decode_f64(values: &[f32]) -> Option<f64> {
    if values.len() != 4 {
        return None;
    }
    let mut bits = 0u64;
    for (i, &c) in values.iter().enumerate() {
        if !(0.0..65536.0).contains(&c) || c.fract() != 0.0 {
            return None;
        }
        bits |= (c as u64) << (16 * i);
    }
    Some(f64::from_bits(bits))
}

fn spec_from_meta(entries: &[RawEntry]) -> Result<ModelSpec> {
    let get = |key: &str| -> Result<f64> {
        entries
            .iter()
            .find(|e| e.name == key)
            .ok_or_else(|| Error::Weights(format!("missing entry {key}")))
            .and_then(|e| decode_f64(&e.values).ok_or_else(|| Error::Weights(format!("malformed entry {key}"))))
    };
    let attention = match get("meta.attention")? as u32 {
        0 => AttentionVariant::None,
        1 => AttentionVariant::Cbam,
        2 => AttentionVariant::ResCbam,
        v => return Err(Error::Weights(format!("unknown attention code {v}"))),
    };
    let spec = ModelSpec {
        num_classes: get("meta.num_classes")? as usize,
        attention,
        width_mult: get("meta.width_mult")?,
        depth_mult: get("meta.depth_mult")?,
        reg_max: get("meta.reg_max")? as usize,
        strides: super::STRIDES,
        input_size: get("meta.input_size")? as usize,
        bn_momentum: get("meta.bn_momentum")?,
        bn_eps: get("meta.bn_eps")?,
    };
    spec.validate().map_err(|e| Error::Weights(e.to_string()))?;
    Ok(spec)
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Weights(format!("value {v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

/// Serializes the spec and every stored tensor (including BN running statistics).
pub fn write_weights<T: Real, W: Write>(model: &Model<T>, mut w: W) -> Result<()> {
    let mut entries = meta_entries(model.spec());
    entries.extend(model.store().entries().iter().map(|e| RawEntry {
        name: e.name.clone(),
        shape: e.value.shape().to_vec(),
        values: e.value.data().iter().map(|v| v.as_f64() as f32).collect(),
    }));
    w.write_all(WEIGHTS_MAGIC)?;
    put_u32(&mut w, WEIGHTS_VERSION as usize)?;
    put_u32(&mut w, entries.len())?;
    for e in &entries {
        put_u32(&mut w, e.name.len())?;
        w.write_all(e.name.as_bytes())?;
        put_u32(&mut w, e.shape.len())?;
        for &d in &e.shape {
            put_u32(&mut w, d)?;
        }
        for v in &e.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| {
            Error::Weights(format!("truncated file while reading {what} at byte offset {}", self.offset))
        })?;
        self.offset += n;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Decodes every entry of a container.
pub fn read_weights<R: Read>(r: R) -> Result<Vec<RawEntry>> {
    let mut c = Cursor { inner: r, offset: 0 };
    if c.bytes(4, "magic")? != WEIGHTS_MAGIC {
        return Err(Error::Weights("bad magic (expected RCBM)".into()));
    }
    let version = c.u32("version")?;
    if version != WEIGHTS_VERSION as usize {
        return Err(Error::Weights(format!("unsupported version {version}")));
    }
    let count = c.u32("entry count")?;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u32("name length")?;
        let name = String::from_utf8(c.bytes(len, "name")?)
            .map_err(|_| Error::Weights(format!("entry name is not UTF-8 near byte offset {}", c.offset)))?;
        let rank = c.u32("rank")?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(c.u32("extent")?);
        }
        let numel: usize = shape.iter().product();
        let raw = c.bytes(numel * 4, &format!("values of {name}"))?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        entries.push(RawEntry { name, shape, values });
    }
    Ok(entries)
}

/// Copies container entries into `model`, checking names and shapes.
pub fn assign_weights<T: Real>(model: &mut Model<T>, entries: &[RawEntry]) -> Result<()> {
    let params: Vec<&RawEntry> = entries.iter().filter(|e| !e.name.starts_with("meta.")).collect();
    let store = model.store_mut();
    if params.len() != store.len() {
        return Err(Error::Weights(format!(
            "file has {} tensors, model expects {}",
            params.len(),
            store.len()
        )));
    }
    for e in params {
        let id = store
            .id(&e.name)
            .ok_or_else(|| Error::Weights(format!("unknown tensor {}", e.name)))?;
        let t = Tensor::new(e.shape.clone(), e.values.iter().map(|&v| T::lit(v as f64)).collect())
            .map_err(|err| Error::Weights(format!("{}: {err}", e.name)))?;
        store.set(id, t)?;
    }
    Ok(())
}

pub fn save_weights<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    write_weights(model, BufWriter::new(File::create(path)?))
}

/// Rebuilds a model from a weights file.
pub fn load_weights<T: Real>(path: &Path) -> Result<Model<T>> {
    let entries = read_weights(BufReader::new(File::open(path)?))?;
    let spec = spec_from_meta(&entries)?;
    let mut model = build_model(&spec, 0)?;
    assign_weights(&mut model, &entries)?;
    Ok(model)
}
