//! Runnable networks assembled from JSON descriptors, and a bit-exact
//! checkpoint format.

mod checkpoint;
mod cnn;
mod gradcheck;
mod lm;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use cnn::{
    expanded_width, CnnDescriptor, CnnModel, CnnOutput, CnnPlan, ConvSite, DynamicSpec, GhostBlockSpec, HeadSpec,
    ReplaceSet, SiteRole, StemSpec,
};
pub use gradcheck::{default_step, gradcheck_model, layer_of, GradCheckOptions, LayerGradCheck, ModelGradCheck};
pub use lm::{causal_mask, FfnBlock, LlamaDescriptor, LmModel, LmOutput};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Bound, ConvSpec, ConvUnit, ParamStore};
use crate::rng::Prng;
use crate::tensor::Var;

/// A single dynamic convolution layer on a fixed input size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicConvDescriptor {
    pub name: String,
    pub conv: ConvSpec,
    pub m: usize,
    /// `[H, W]` of the input.
    pub input_size: [usize; 2],
}

impl DynamicConvDescriptor {
    pub fn output_size(&self) -> Result<(usize, usize)> {
        self.conv.validate()?;
        if self.m == 0 {
            return Err(Error::Validation {
                location: "m".into(),
                message: "m must be at least 1".into(),
            });
        }
        self.conv
            .output_size(self.input_size[0], self.input_size[1])
            .filter(|&(h, w)| h > 0 && w > 0)
            .ok_or_else(|| Error::Validation {
                location: "input_size".into(),
                message: format!("{:?} leaves no output for {:?}", self.input_size, self.conv),
            })
    }
}

/// Any model descriptor, tagged by `"type"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelDescriptor {
    Cnn(CnnDescriptor),
    Llama(LlamaDescriptor),
    DynamicConv(DynamicConvDescriptor),
}

impl ModelDescriptor {
    pub fn name(&self) -> &str {
        match self {
            ModelDescriptor::Cnn(d) => &d.name,
            ModelDescriptor::Llama(d) => &d.name,
            ModelDescriptor::DynamicConv(d) => &d.name,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Parse errors carry the file name plus serde's line and column.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Validation {
            location: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One dynamic convolution as a standalone model.
#[derive(Clone, Debug)]
pub struct DynamicConvModel {
    pub descriptor: DynamicConvDescriptor,
    pub params: ParamStore,
    pub layer: ConvUnit,
}

impl DynamicConvModel {
    pub fn build(desc: &DynamicConvDescriptor, rng: &Prng) -> Result<Self> {
        desc.output_size()?;
        let mut params = ParamStore::new();
        let mut rng = rng.split("dynamic_conv");
        let layer = ConvUnit::new(&mut params, &desc.name, desc.conv, Some(desc.m), &mut rng)?;
        Ok(Self {
            descriptor: desc.clone(),
            params,
            layer,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.layer.forward_traced(p, x, &mut Vec::new())
    }
}

/// A built model of any descriptor type.
#[derive(Clone, Debug)]
pub enum Model {
    Cnn(CnnModel),
    Lm(LmModel),
    DynamicConv(DynamicConvModel),
}

impl Model {
    pub fn build(desc: &ModelDescriptor, rng: &Prng) -> Result<Self> {
        Ok(match desc {
            ModelDescriptor::Cnn(d) => Model::Cnn(CnnModel::build(d, rng)?),
            ModelDescriptor::Llama(d) => Model::Lm(LmModel::build(d, rng)?),
            ModelDescriptor::DynamicConv(d) => Model::DynamicConv(DynamicConvModel::build(d, rng)?),
        })
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Cnn(m) => &m.params,
            Model::Lm(m) => &m.params,
            Model::DynamicConv(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Cnn(m) => &mut m.params,
            Model::Lm(m) => &mut m.params,
            Model::DynamicConv(m) => &mut m.params,
        }
    }

    pub fn descriptor(&self) -> ModelDescriptor {
        match self {
            Model::Cnn(m) => ModelDescriptor::Cnn(m.descriptor.clone()),
            Model::Lm(m) => ModelDescriptor::Llama(m.descriptor.clone()),
            Model::DynamicConv(m) => ModelDescriptor::DynamicConv(m.descriptor.clone()),
        }
    }
}
