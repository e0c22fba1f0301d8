//! Precomputed per-column context embeddings.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use ndarray::Array2;
use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::dataset::ColumnSchema;
use crate::error::{Error, Result};

/// Column name → raw context vector, all of length `dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEmbeddings {
    #[serde(rename = "model")]
    pub model_name: String,
    pub dim: usize,
    #[serde(rename = "columns", deserialize_with = "unique_keys")]
    pub vectors: BTreeMap<String, Vec<f64>>,
}

fn unique_keys<'de, D>(deserializer: D) -> std::result::Result<BTreeMap<String, Vec<f64>>, D::Error>
where
    D: Deserializer<'de>,
{
    struct UniqueMap;

    impl<'de> Visitor<'de> for UniqueMap {
        type Value = BTreeMap<String, Vec<f64>>;

        fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            f.write_str("a map of column name to vector")
        }

        fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> std::result::Result<Self::Value, A::Error> {
            let mut out = BTreeMap::new();
            while let Some((key, value)) = access.next_entry::<String, Vec<f64>>()? {
                if out.contains_key(&key) {
                    return Err(de::Error::custom(format!("duplicate column `{key}`")));
                }
                out.insert(key, value);
            }
            Ok(out)
        }
    }

    deserializer.deserialize_map(UniqueMap)
}

impl ContextEmbeddings {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::ContextFormat("dim must be at least 1".into()));
        }
        for (name, v) in &self.vectors {
            if v.len() != self.dim {
                return Err(Error::ContextFormat(format!(
                    "column {name}: length {} does not match dim {}",
                    v.len(),
                    self.dim
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::ContextFormat(format!("column {name}: non-finite entry")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let emb: ContextEmbeddings =
            serde_json::from_str(text).map_err(|e| Error::ContextFormat(e.to_string()))?;
        emb.validate()?;
        Ok(emb)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub fn load_context(path: impl AsRef<Path>) -> Result<ContextEmbeddings> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ContextEmbeddings::from_json(&text)
}

/// Stacks the vectors in schema order into a K×dim matrix.
///
/// With `allow_missing`, absent columns get zero vectors instead of an error.
pub fn align_to_schema(
    emb: &ContextEmbeddings,
    schema: &[ColumnSchema],
    allow_missing: bool,
) -> Result<Array2<f64>> {
    let absent: Vec<String> = schema
        .iter()
        .filter(|c| !emb.vectors.contains_key(&c.name))
        .map(|c| c.name.clone())
        .collect();
    if !absent.is_empty() && !allow_missing {
        return Err(Error::ContextCoverage(absent));
    }
    let mut out = Array2::zeros((schema.len(), emb.dim));
    for (row, col) in schema.iter().enumerate() {
        if let Some(v) = emb.vectors.get(&col.name) {
            out.row_mut(row).iter_mut().zip(v).for_each(|(d, s)| *d = *s);
        }
    }
    Ok(out)
}
