//! Branch encoders `F_Q`, `F_V`, `F_VQ`, losses and training.
//!
//! Each encoder is a small tanh MLP ending in a linear head over the answer
//! vocabulary. `F_VQ` reads the concatenation `[q; v]`.

mod checkpoint;
mod loss;
mod mlp;
mod train;

pub use checkpoint::{Checkpoint, LayerDims};
pub use loss::{loss_cls, loss_final, loss_kl, softmax, Gradients, LossGrad, LossTerms};
pub use mlp::{Dense, Mlp, MlpCache};
pub use train::{train, EpochStats, Objective, Sgd, TrainConfig, TrainOutcome, Trainer};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::causal::{self, CounterfactualConstant, InferenceRule};
use crate::datagen::SyntheticSample;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::logits::{BranchLogits, Logits};

pub const DEFAULT_HIDDEN: usize = 64;

/// Input/output sizes of the three encoders. `hidden = 0` gives purely
/// linear heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub vocab: usize,
    pub q_dim: usize,
    pub v_dim: usize,
    pub hidden: usize,
}

impl ModelShape {
    fn dims(&self, input: usize) -> Vec<usize> {
        if self.hidden == 0 {
            vec![input, self.vocab]
        } else {
            vec![input, self.hidden, self.vocab]
        }
    }

    pub fn question_dims(&self) -> Vec<usize> {
        self.dims(self.q_dim)
    }

    pub fn vision_dims(&self) -> Vec<usize> {
        self.dims(self.v_dim)
    }

    pub fn joint_dims(&self) -> Vec<usize> {
        self.dims(self.q_dim + self.v_dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub shape: ModelShape,
    pub question: Mlp,
    pub vision: Mlp,
    pub joint: Mlp,
}

impl EncoderParams {
    pub fn zeros(shape: ModelShape) -> Self {
        EncoderParams {
            shape,
            question: Mlp::zeros(&shape.question_dims()),
            vision: Mlp::zeros(&shape.vision_dims()),
            joint: Mlp::zeros(&shape.joint_dims()),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(shape: ModelShape, rng: &mut R) -> Self {
        EncoderParams {
            shape,
            question: Mlp::glorot(&shape.question_dims(), rng),
            vision: Mlp::glorot(&shape.vision_dims(), rng),
            joint: Mlp::glorot(&shape.joint_dims(), rng),
        }
    }

    fn encoders(&self) -> [&Mlp; 3] {
        [&self.question, &self.vision, &self.joint]
    }

    fn encoders_mut(&mut self) -> [&mut Mlp; 3] {
        [&mut self.question, &mut self.vision, &mut self.joint]
    }

    /// Parameter blocks in canonical order: question, vision, joint; within
    /// an encoder, layer by layer, weights (row-major) then bias.
    pub fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.encoders().into_iter().flat_map(|m| m.blocks())
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.encoders_mut().into_iter().flat_map(|m| m.blocks_mut())
    }

    pub fn num_params(&self) -> usize {
        self.blocks().map(|b| b.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().flat_map(|b| b.iter().copied()).collect()
    }

    pub fn from_flat(shape: ModelShape, flat: &[f64]) -> Result<Self> {
        let mut p = EncoderParams::zeros(shape);
        Error::check_len(p.num_params(), flat.len())?;
        if flat.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("non-finite parameter".into()));
        }
        let mut rest = flat;
        for block in p.blocks_mut() {
            let (head, tail) = rest.split_at(block.len());
            block.copy_from_slice(head);
            rest = tail;
        }
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().all(|b| b.iter().all(|x| x.is_finite()))
    }
}

/// Intermediate activations of one forward pass, kept for backprop.
pub(crate) struct ForwardCache {
    pub question: MlpCache,
    pub vision: MlpCache,
    pub joint: MlpCache,
}

impl ForwardCache {
    fn logits(&self) -> [&[f64]; 3] {
        [self.question.output(), self.vision.output(), self.joint.output()]
    }
}

pub(crate) fn forward_cached(q: &[f64], v: &[f64], params: &EncoderParams) -> Result<ForwardCache> {
    Error::check_len(params.shape.q_dim, q.len())?;
    Error::check_len(params.shape.v_dim, v.len())?;
    let joint_in: Vec<f64> = q.iter().chain(v).copied().collect();
    Ok(ForwardCache {
        question: params.question.forward(q),
        vision: params.vision.forward(v),
        joint: params.joint.forward(&joint_in),
    })
}

/// Computes `(Z_q, Z_v, Z_k)` for one sample.
pub fn forward(q_features: &[f64], v_features: &[f64], params: &EncoderParams) -> Result<BranchLogits> {
    let cache = forward_cached(q_features, v_features, params)?;
    let [zq, zv, zk] = cache.logits().map(|z| Logits::new(z.to_vec()));
    BranchLogits::factual(zq?, zv?, zk?)
}

/// Trained parameters plus the settings needed for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: EncoderParams,
    pub c: CounterfactualConstant,
    pub fusion: FusionConfig,
}

impl TrainedModel {
    pub fn branch_logits(&self, sample: &SyntheticSample) -> Result<BranchLogits> {
        forward(&sample.q_features, &sample.v_features, &self.params)
    }

    pub fn predict(&self, sample: &SyntheticSample, rule: InferenceRule) -> Result<usize> {
        causal::predict(&self.branch_logits(sample)?, self.c, &self.fusion, rule)
    }
}
