//! Binary checkpoint format.
//!
//! ```text
//! "PSMB" | version u32 | count u32 | count x record
//! record = name_len u32 | name utf-8 | dtype u8 | rank u8 | dims u32 x rank | values (LE)
//! ```
//! dtype 0 is f32, 1 is f64. Besides the parameters, a checkpoint holds
//! `meta.*` records describing the architecture, the Adam moments as
//! `adam.m.<name>` / `adam.v.<name>` and the optimizer step as `train.step`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::hierarchy::{Model, ModelConfig};
use crate::partition::SplitLevel;
use crate::real::Real;

pub const MAGIC: [u8; 4] = *b"PSMB";
pub const VERSION: u32 = 1;

const META_LEVELS: &str = "meta.levels";
const META_ARCH: &str = "meta.arch";
const META_SCALE: &str = "meta.scale";
const STEP: &str = "train.step";

#[derive(Debug, Clone, PartialEq)]
pub enum Values {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Values {
    fn len(&self) -> usize {
        match self {
            Values::F32(v) => v.len(),
            Values::F64(v) => v.len(),
        }
    }

    fn to<T: Real>(&self) -> Vec<T> {
        match self {
            Values::F32(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            Values::F64(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
        }
    }

    fn of<T: Real>(v: &[T]) -> Self {
        if T::DTYPE == 1 {
            Values::F64(v.iter().map(|x| x.to_f64()).collect())
        } else {
            Values::F32(v.iter().map(|x| x.to_f64() as f32).collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Values,
}

impl Record {
    fn meta(name: &str, v: Vec<f32>) -> Self {
        Record {
            name: name.into(),
            dims: vec![v.len()],
            values: Values::F32(v),
        }
    }
}

pub fn write_records(w: &mut impl Write, records: &[Record]) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for r in records {
        let name = r.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let dtype = match r.values {
            Values::F32(_) => 0u8,
            Values::F64(_) => 1u8,
        };
        w.write_all(&[dtype, r.dims.len() as u8])?;
        for &d in &r.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        match &r.values {
            Values::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            Values::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
        }
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated,
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_records(r: &mut impl Read) -> Result<Vec<Record>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = read_u32(r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        read_exact(r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Invalid("record name is not UTF-8".into()))?;
        let mut hdr = [0u8; 2];
        read_exact(r, &mut hdr)?;
        let dims = (0..hdr[1]).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let values = match hdr[0] {
            0 => {
                let mut buf = vec![0u8; n * 4];
                read_exact(r, &mut buf)?;
                Values::F32(buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
            }
            1 => {
                let mut buf = vec![0u8; n * 8];
                read_exact(r, &mut buf)?;
                Values::F64(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
            }
            d => return Err(Error::UnsupportedDtype(d, name)),
        };
        out.push(Record { name, dims, values });
    }
    Ok(out)
}

fn model_records<T: Real>(model: &Model<T>) -> Vec<Record> {
    let cfg = model.config();
    let mut recs = vec![
        Record::meta(META_LEVELS, cfg.levels.iter().map(|l| l.k() as f32).collect()),
        Record::meta(
            META_ARCH,
            [cfg.in_channels, cfg.c0, cfg.channel_step, cfg.n_blocks, cfg.state_n, cfg.reduction]
                .iter()
                .map(|&v| v as f32)
                .collect(),
        ),
        Record::meta(META_SCALE, vec![cfg.scale as f32]),
        Record::meta(STEP, vec![(model.store.step >> 24) as f32, (model.store.step & 0xff_ffff) as f32]),
    ];
    for p in model.store.params() {
        recs.push(Record {
            name: p.name.clone(),
            dims: p.dims.clone(),
            values: Values::of(&p.value),
        });
    }
    for p in model.store.params() {
        recs.push(Record {
            name: format!("adam.m.{}", p.name),
            dims: p.dims.clone(),
            values: Values::of(&p.m),
        });
        recs.push(Record {
            name: format!("adam.v.{}", p.name),
            dims: p.dims.clone(),
            values: Values::of(&p.v),
        });
    }
    recs
}

pub fn save<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_records(&mut buf, &model_records(model))?;
    // Write-then-rename so an interrupted save never leaves a torn checkpoint.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn meta<'a>(map: &'a HashMap<&str, &Record>, name: &str) -> Result<Vec<usize>> {
    let r = map.get(name).ok_or_else(|| Error::MissingRecord(name.into()))?;
    Ok(r.values.to::<f64>().iter().map(|&v| v as usize).collect())
}

fn config_from(map: &HashMap<&str, &Record>) -> Result<ModelConfig> {
    let levels = meta(map, META_LEVELS)?
        .into_iter()
        .map(|k| SplitLevel::from_k(k).ok_or_else(|| Error::Invalid(format!("checkpoint names unknown split level k={k}"))))
        .collect::<Result<Vec<_>>>()?;
    let arch = meta(map, META_ARCH)?;
    if arch.len() != 6 {
        return Err(Error::RecordShape {
            name: META_ARCH.into(),
            expected: vec![6],
            found: vec![arch.len()],
        });
    }
    let scale = meta(map, META_SCALE)?;
    Ok(ModelConfig {
        in_channels: arch[0],
        c0: arch[1],
        channel_step: arch[2],
        n_blocks: arch[3],
        state_n: arch[4],
        reduction: arch[5],
        levels,
        scale: *scale.first().unwrap_or(&1),
        ..ModelConfig::default()
    })
}

/// Copies parameter values (and optimizer state when present) into `model`.
/// Every model parameter must be present with matching shape.
pub fn apply<T: Real>(model: &mut Model<T>, records: &[Record]) -> Result<()> {
    let map: HashMap<&str, &Record> = records.iter().map(|r| (r.name.as_str(), r)).collect();
    for r in records {
        if r.values.len() != r.dims.iter().product::<usize>() {
            return Err(Error::Truncated);
        }
    }
    let names: Vec<String> = model.store.params().iter().map(|p| p.name.clone()).collect();
    for name in &names {
        let r = map.get(name.as_str()).ok_or_else(|| Error::MissingRecord(name.clone()))?;
        model.store.set_value(name, &r.dims, &r.values.to::<T>())?;
    }
    for p in model.store.params_mut() {
        for (prefix, buf) in [("adam.m.", &mut p.m), ("adam.v.", &mut p.v)] {
            if let Some(r) = map.get(format!("{prefix}{}", p.name).as_str()) {
                if r.dims != p.dims {
                    return Err(Error::RecordShape {
                        name: r.name.clone(),
                        expected: p.dims.clone(),
                        found: r.dims.clone(),
                    });
                }
                *buf = r.values.to::<T>();
            }
        }
    }
    if let Ok(step) = meta(&map, STEP) {
        if step.len() == 2 {
            model.store.step = ((step[0] as u64) << 24) | step[1] as u64;
        }
    }
    Ok(())
}

/// Rebuilds the model described by a checkpoint.
pub fn load<T: Real>(path: &Path) -> Result<Model<T>> {
    let bytes = std::fs::read(path)?;
    load_bytes(&bytes)
}

pub fn load_bytes<T: Real>(mut bytes: &[u8]) -> Result<Model<T>> {
    let records = read_records(&mut bytes)?;
    let map: HashMap<&str, &Record> = records.iter().map(|r| (r.name.as_str(), r)).collect();
    let cfg = config_from(&map)?;
    let mut model = Model::new(cfg, 0)?;
    apply(&mut model, &records)?;
    Ok(model)
}

/// Loads a checkpoint into an existing model, rejecting any shape disagreement.
pub fn load_into<T: Real>(model: &mut Model<T>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path)?;
    let records = read_records(&mut bytes.as_slice())?;
    apply(model, &records)
}
