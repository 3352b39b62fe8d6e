use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::component::{ComponentId, Scope};
use super::transformer::Model;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const SNAPSHOT_FORMAT: &str = "finetune-lab/snapshot";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Immutable copy of model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    label: String,
    params: BTreeMap<ComponentId, Tensor>,
}

/// Which components a restore touches.
#[derive(Clone, Debug, PartialEq)]
pub enum Selector {
    All,
    /// Inclusive range of 1-based transformer layers.
    Layers { from: usize, to: usize },
    Scopes(BTreeSet<Scope>),
    Components(BTreeSet<ComponentId>),
}

impl Selector {
    pub fn matches(&self, id: &ComponentId) -> bool {
        match self {
            Selector::All => true,
            Selector::Layers { from, to } => id.layer_index().is_some_and(|i| (*from..=*to).contains(&i)),
            Selector::Scopes(s) => id.scope().is_some_and(|sc| s.contains(&sc)),
            Selector::Components(set) => set.contains(id),
        }
    }
}

impl Snapshot {
    pub fn of(model: &Model, label: impl Into<String>) -> Self {
        Snapshot {
            label: label.into(),
            params: model
                .params()
                .iter()
                .map(|(k, v)| (k.clone(), v.detached()))
                .collect(),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn params(&self) -> &BTreeMap<ComponentId, Tensor> {
        &self.params
    }

    pub fn get(&self, id: &str) -> Result<&Tensor> {
        self.params
            .get(id)
            .ok_or_else(|| Error::MissingComponent(id.to_string()))
    }

    pub fn relabel(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Overwrites the selected model components with the stored values.
    /// Nothing is written unless every selected component is present with a
    /// matching shape.
    pub fn restore(&self, model: &mut Model, selector: &Selector) -> Result<()> {
        if let Selector::Components(set) = selector {
            if let Some(missing) = set.iter().find(|id| !model.params().contains_key(*id)) {
                return Err(Error::MissingComponent(missing.to_string()));
            }
        }
        let selected: Vec<ComponentId> = model
            .params()
            .keys()
            .filter(|id| selector.matches(id))
            .cloned()
            .collect();
        for id in &selected {
            let src = self.get(id.as_str())?;
            let dst = model.param(id.as_str())?;
            if src.shape() != dst.shape() {
                return Err(Error::shape(
                    "restore",
                    format!("{id}: snapshot {:?} vs model {:?}", src.shape(), dst.shape()),
                ));
            }
        }
        for id in &selected {
            let src = self.params[id].data();
            model.param_mut(id.as_str())?.data_mut().copy_from_slice(src);
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = SnapshotFile {
            format: SNAPSHOT_FORMAT.to_string(),
            version: SNAPSHOT_VERSION,
            label: self.label.clone(),
            components: self
                .params
                .iter()
                .map(|(id, t)| StoredTensor {
                    path: id.clone(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SnapshotFile = serde_json::from_str(text)?;
        if file.format != SNAPSHOT_FORMAT || file.version != SNAPSHOT_VERSION {
            return Err(Error::Serde(format!(
                "unsupported snapshot format {} v{}",
                file.format, file.version
            )));
        }
        let mut params = BTreeMap::new();
        for c in file.components {
            let t = Tensor::new(c.shape, c.data)?;
            if params.insert(c.path.clone(), t).is_some() {
                return Err(Error::Serde(format!("duplicate component {}", c.path)));
            }
        }
        Ok(Snapshot {
            label: file.label,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotFile {
    format: String,
    version: u32,
    label: String,
    components: Vec<StoredTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredTensor {
    path: ComponentId,
    shape: Vec<usize>,
    data: Vec<f64>,
}
