//! `kap-ckpt-v1` checkpoints for networks and regularizer weights.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::losses::{NormKind, RegularizerWeights};
use crate::nets::{Network, NetworkSpec};

pub const CHECKPOINT_FORMAT: &str = "kap-ckpt-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    #[serde(flatten)]
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub spec: NetworkSpec,
    /// Present for regularizer weights only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_kind: Option<NormKind>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    fn new(spec: &NetworkSpec, norm_kind: Option<NormKind>, params: &ParamSet) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            spec: spec.clone(),
            norm_kind,
            tensors: params
                .iter()
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    tensor: t.clone(),
                })
                .collect(),
        }
    }

    pub fn from_network(net: &Network) -> Self {
        Self::new(&net.spec, None, &net.params)
    }

    pub fn from_regularizer(spec: &NetworkSpec, phi: &RegularizerWeights) -> Self {
        Self::new(spec, Some(phi.norm), &phi.weights)
    }

    fn format_error(section: &str, detail: impl Into<String>) -> Error {
        Error::Format {
            what: "checkpoint",
            section: section.to_string(),
            detail: detail.into(),
        }
    }

    /// Parameters checked against the layout `spec` implies.
    pub fn params(&self) -> Result<ParamSet> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Self::format_error(
                "format",
                format!("unsupported format {:?}", self.format),
            ));
        }
        let mut params = ParamSet::new();
        for nt in &self.tensors {
            params.push(nt.name.clone(), nt.tensor.clone())?;
        }
        let layout = Network::init(self.spec.clone())?.params;
        layout
            .check_layout(&params)
            .map_err(|e| Self::format_error("tensors", e.to_string()))?;
        Ok(params)
    }

    pub fn into_network(self) -> Result<Network> {
        if self.norm_kind.is_some() {
            return Err(Self::format_error(
                "norm_kind",
                "regularizer checkpoint, expected a network",
            ));
        }
        let params = self.params()?;
        Network::with_params(self.spec, params)
    }

    pub fn into_regularizer(self) -> Result<(NetworkSpec, RegularizerWeights)> {
        let norm = self
            .norm_kind
            .ok_or_else(|| Self::format_error("norm_kind", "missing, expected regularizer weights"))?;
        let weights = self.params()?;
        Ok((self.spec, RegularizerWeights { weights, norm }))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some(CHECKPOINT_FORMAT) => Ok(serde_json::from_value(value)?),
            Some(other) => Err(Self::format_error("format", format!("unsupported format {other:?}"))),
            None => Err(Self::format_error("format", "missing format tag")),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    Checkpoint::from_network(net).save(path)
}

pub fn load_network(path: &Path) -> Result<Network> {
    Checkpoint::load(path)?.into_network()
}

pub fn save_regularizer(spec: &NetworkSpec, phi: &RegularizerWeights, path: &Path) -> Result<()> {
    Checkpoint::from_regularizer(spec, phi).save(path)
}

pub fn load_regularizer(path: &Path) -> Result<(NetworkSpec, RegularizerWeights)> {
    Checkpoint::load(path)?.into_regularizer()
}
