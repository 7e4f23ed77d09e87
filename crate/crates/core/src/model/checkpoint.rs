//! Self-describing JSON checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderParams, ModelShape, TrainedModel};
use crate::causal::CounterfactualConstant;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::jsonl;

const FORMAT: &str = "pwvqa-checkpoint/1";

/// Layer widths of each encoder, input first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDims {
    pub question: Vec<usize>,
    pub vision: Vec<usize>,
    pub joint: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub vocab: usize,
    pub q_dim: usize,
    pub v_dim: usize,
    pub hidden: usize,
    pub layers: LayerDims,
    /// Question, vision, joint encoder; per layer weights (row-major) then bias.
    pub params: Vec<f64>,
    pub c: f64,
    pub fusion: FusionConfig,
    pub seed: u64,
}

impl Checkpoint {
    pub fn from_model(model: &TrainedModel, seed: u64) -> Self {
        let s = model.params.shape;
        Checkpoint {
            format: FORMAT.into(),
            vocab: s.vocab,
            q_dim: s.q_dim,
            v_dim: s.v_dim,
            hidden: s.hidden,
            layers: LayerDims {
                question: s.question_dims(),
                vision: s.vision_dims(),
                joint: s.joint_dims(),
            },
            params: model.params.flatten(),
            c: model.c.value(),
            fusion: model.fusion,
            seed,
        }
    }

    pub fn to_model(&self) -> Result<TrainedModel> {
        if self.format != FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format {:?}", self.format)));
        }
        let shape = ModelShape {
            vocab: self.vocab,
            q_dim: self.q_dim,
            v_dim: self.v_dim,
            hidden: self.hidden,
        };
        let expected = LayerDims {
            question: shape.question_dims(),
            vision: shape.vision_dims(),
            joint: shape.joint_dims(),
        };
        if expected != self.layers {
            return Err(Error::Config("checkpoint layer dimensions are inconsistent".into()));
        }
        Ok(TrainedModel {
            params: EncoderParams::from_flat(shape, &self.params)?,
            c: CounterfactualConstant::new(self.c)?,
            fusion: self.fusion,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = jsonl::to_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}
