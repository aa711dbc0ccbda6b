use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    /// Reads a per-pixel map through a trainable conv encoder.
    LowLevelMap,
    /// Frozen featurizer emitting patch tokens directly.
    Embedding,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertSpec {
    pub id: usize,
    pub name: String,
    pub kind: ExpertKind,
    #[serde(rename = "d_k")]
    pub native_dim: usize,
    #[serde(rename = "grid")]
    pub native_grid: (usize, usize),
    /// Sample channel the expert reads; defaults to `name`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl ExpertSpec {
    pub fn new(id: usize, name: &str, kind: ExpertKind, native_dim: usize, native_grid: (usize, usize)) -> Self {
        Self {
            id,
            name: name.to_string(),
            kind,
            native_dim,
            native_grid,
            source: None,
        }
    }

    pub fn source(&self) -> &str {
        self.source.as_deref().unwrap_or(&self.name)
    }

    pub fn native_tokens(&self) -> usize {
        self.native_grid.0 * self.native_grid.1
    }
}

/// The expert catalogue: ids unique and contiguous from 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HubManifest {
    #[serde(rename = "expert")]
    pub experts: Vec<ExpertSpec>,
}

impl HubManifest {
    pub fn new(mut experts: Vec<ExpertSpec>) -> Result<Self> {
        experts.sort_by_key(|e| e.id);
        let m = Self { experts };
        m.validate()?;
        Ok(m)
    }

    /// Shape and texture read attribute ids at a 6×6 native grid; depth and
    /// edge read pixel maps and are encoded straight to the base grid.
    pub fn default_catalogue(base_grid: (usize, usize)) -> Self {
        Self::new(vec![
            ExpertSpec::new(0, "shape", ExpertKind::Embedding, 12, (6, 6)),
            ExpertSpec::new(1, "texture", ExpertKind::Embedding, 12, (6, 6)),
            ExpertSpec::new(2, "depth", ExpertKind::LowLevelMap, 8, base_grid),
            ExpertSpec::new(3, "edge", ExpertKind::LowLevelMap, 8, base_grid),
        ])
        .expect("default catalogue is valid")
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts.is_empty() {
            return Err(Error::ConfigInvalid("hub has no experts".into()));
        }
        for (i, e) in self.experts.iter().enumerate() {
            if e.id != i {
                return Err(Error::ConfigInvalid(format!("expert ids must be 0..K without gaps, found {}", e.id)));
            }
            if e.native_dim == 0 || e.native_grid.0 == 0 || e.native_grid.1 == 0 {
                return Err(Error::ConfigInvalid(format!("expert {} has an empty native shape", e.name)));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: HubManifest = toml::from_str(text).map_err(|e| Error::ConfigInvalid(format!("hub manifest: {e}")))?;
        Self::new(m.experts)
    }
}
