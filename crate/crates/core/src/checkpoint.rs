//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | field            | encoding                                          |
//! |------------------|---------------------------------------------------|
//! | magic            | `b"CACT"`                                         |
//! | version          | `u32`                                             |
//! | header           | `u32` length + JSON (model config, scaler, schema) |
//! | schema digest    | 32 bytes, SHA-256 of the canonical schema         |
//! | context          | `u32` rows, `u32` cols, then `f64` values          |
//! | tensor count     | `u32`                                             |
//! | each tensor      | `u32` name length, name, `u32` len, `f32` values   |
//!
//! Tensors follow the order of [`ModelParams::tensors`]. A context block of
//! zero rows means the model runs without context.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{ColumnSchema, ScalerState};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};

pub const MAGIC: &[u8; 4] = b"CACT";
pub const FORMAT_VERSION: u32 = 1;

/// SHA-256 over column names, kinds and category labels.
pub fn schema_digest(schema: &[ColumnSchema]) -> [u8; 32] {
    let mut h = Sha256::new();
    for col in schema {
        h.update((col.name.len() as u64).to_le_bytes());
        h.update(col.name.as_bytes());
        h.update(serde_json::to_string(&col.kind).expect("enum serialises").as_bytes());
        h.update((col.categories.len() as u64).to_le_bytes());
        for c in &col.categories {
            h.update((c.len() as u64).to_le_bytes());
            h.update(c.as_bytes());
        }
    }
    h.finalize().into()
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    scaler: ScalerState,
    schema: Vec<ColumnSchema>,
}

/// Everything needed to impute a table with the schema it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub schema: Vec<ColumnSchema>,
    pub scaler: ScalerState,
    pub model: Model<f32>,
}

impl Checkpoint {
    pub fn new(schema: Vec<ColumnSchema>, scaler: ScalerState, model: Model<f32>) -> Result<Self> {
        if schema.len() != model.config.n_features || scaler.n_cols() != schema.len() {
            return Err(Error::Checkpoint(format!(
                "schema of {} columns, scaler of {}, model of {}",
                schema.len(),
                scaler.n_cols(),
                model.config.n_features
            )));
        }
        Ok(Checkpoint { schema, scaler, model })
    }

    pub fn digest(&self) -> [u8; 32] {
        schema_digest(&self.schema)
    }

    /// Fails with [`Error::SchemaMismatch`] unless `schema` equals the trained one.
    pub fn check_schema(&self, schema: &[ColumnSchema]) -> Result<()> {
        if schema_digest(schema) == self.digest() {
            Ok(())
        } else {
            Err(Error::SchemaMismatch)
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&Header {
            model: self.model.config,
            scaler: self.scaler.clone(),
            schema: self.schema.clone(),
        })?;
        put_len(&mut out, header.len())?;
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.digest());

        let (rows, cols) = self.model.context().map_or((0, 0), |c| c.dim());
        put_len(&mut out, rows)?;
        put_len(&mut out, cols)?;
        if let Some(c) = self.model.context() {
            for v in c.iter() {
                out.extend_from_slice(&(*v as f64).to_le_bytes());
            }
        }

        let tensors = self.model.params.tensors();
        put_len(&mut out, tensors.len())?;
        for t in tensors {
            put_len(&mut out, t.name.len())?;
            out.extend_from_slice(t.name.as_bytes());
            put_len(&mut out, t.data.len())?;
            for v in t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let header_len = read_u32(&mut r)? as usize;
        let header: Header = serde_json::from_slice(take(&mut r, header_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut digest = [0u8; 32];
        read_exact(&mut r, &mut digest)?;
        if digest != schema_digest(&header.schema) {
            return Err(Error::Checkpoint("schema digest does not match header".into()));
        }

        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut ctx = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b)?;
            ctx.push(f64::from_le_bytes(b));
        }
        let context = (rows > 0)
            .then(|| Array2::from_shape_vec((rows, cols), ctx))
            .transpose()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;

        header.model.validate()?;
        let mut params = ModelParams::<f32>::zeros(&header.model);
        let count = read_u32(&mut r)? as usize;
        let mut views = params.tensors_mut();
        if count != views.len() {
            return Err(Error::Checkpoint(format!("{count} tensors, expected {}", views.len())));
        }
        for view in views.iter_mut() {
            let name_len = read_u32(&mut r)? as usize;
            let name = std::str::from_utf8(take(&mut r, name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            if name != view.name {
                return Err(Error::Checkpoint(format!("tensor `{name}` where `{}` expected", view.name)));
            }
            let len = read_u32(&mut r)? as usize;
            if len != view.data.len() {
                return Err(Error::Checkpoint(format!("tensor `{name}` has {len} values, expected {}", view.data.len())));
            }
            for v in view.data.iter_mut() {
                let mut b = [0u8; 4];
                read_exact(&mut r, &mut b)?;
                *v = f32::from_le_bytes(b);
            }
        }
        drop(views);
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        let model = Model::from_parts(header.model, params, context.as_ref())?;
        Checkpoint::new(header.schema, header.scaler, model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    buf.copy_from_slice(take(r, buf.len())?);
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ColumnKind;
    use crate::model::ModelHyper;

    fn sample(ctx: bool) -> Checkpoint {
        let schema = vec![
            ColumnSchema::continuous("a"),
            ColumnSchema {
                name: "b".into(),
                kind: ColumnKind::Categorical,
                categories: vec!["x".into(), "y".into()],
            },
        ];
        let hyper = ModelHyper {
            embed_dim: 8,
            enc_depth: 1,
            dec_depth: 1,
            heads: 2,
            ..ModelHyper::default()
        };
        let context = Array2::from_shape_fn((2, 3), |(i, j)| i as f64 - 0.25 * j as f64);
        let cfg = ModelConfig::new(2, if ctx { 3 } else { 0 }, hyper).unwrap();
        let model = Model::new(cfg, ctx.then_some(&context), 4).unwrap();
        let scaler = ScalerState {
            ranges: vec![(0.0, 1.0), (0.0, 1.0)],
        };
        Checkpoint::new(schema, scaler, model).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        for ctx in [false, true] {
            let c = sample(ctx);
            let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample(true).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn schema_check() {
        let c = sample(false);
        assert!(c.check_schema(&c.schema).is_ok());
        let mut other = c.schema.clone();
        other[0].name = "z".into();
        assert!(matches!(c.check_schema(&other), Err(Error::SchemaMismatch)));
    }
}
