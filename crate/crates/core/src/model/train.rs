use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss_final, EncoderParams, LossGrad, LossTerms, ModelShape, TrainedModel, DEFAULT_HIDDEN};
use crate::causal::CounterfactualConstant;
use crate::datagen::{DatasetSplit, SyntheticSample};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub hidden: usize,
    pub seed: u64,
    pub fusion: FusionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 22,
            batch_size: 256,
            learning_rate: 1e-3,
            momentum: 0.9,
            hidden: DEFAULT_HIDDEN,
            seed: 0,
            fusion: FusionConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum: `v ← μ v + g`, `θ ← θ − η v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
    c_velocity: f64,
}

impl Sgd {
    pub fn new(params: &EncoderParams, learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: params.blocks().map(|b| vec![0.0; b.len()]).collect(),
            c_velocity: 0.0,
        }
    }

    fn update_params(&mut self, params: &mut EncoderParams, grad: &EncoderParams) {
        let (lr, mu) = (self.learning_rate, self.momentum);
        for ((p, g), v) in params.blocks_mut().zip(grad.blocks()).zip(&mut self.velocity) {
            for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = mu * *vi + gi;
                *pi -= lr * *vi;
            }
        }
    }

    fn update_c(&mut self, c: &mut f64, grad: f64) {
        self.c_velocity = self.momentum * self.c_velocity + grad;
        *c -= self.learning_rate * self.c_velocity;
    }
}

/// Which loss terms drive an update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `L_cls` updates the encoders, `L_kl` updates `c`.
    Final,
    /// Encoders only.
    ClsOnly,
    /// `c` only; encoders are left untouched.
    KlOnly,
}

/// Training state for one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: EncoderParams,
    pub c: f64,
    pub fusion: FusionConfig,
    pub sgd: Sgd,
}

impl Trainer {
    pub fn new(params: EncoderParams, c: f64, cfg: &TrainConfig) -> Self {
        let sgd = Sgd::new(&params, cfg.learning_rate, cfg.momentum);
        Trainer {
            params,
            c,
            fusion: cfg.fusion,
            sgd,
        }
    }

    /// Routed gradient of the current state on `batch`.
    pub fn gradient(&self, batch: &[&SyntheticSample]) -> Result<LossGrad> {
        loss_final(
            &self.params,
            CounterfactualConstant::new(self.c)?,
            &self.fusion.kernel(),
            batch,
            false,
        )
    }

    /// One optimizer step; returns the loss before the update.
    pub fn step(&mut self, batch: &[&SyntheticSample], objective: Objective) -> Result<LossTerms> {
        let g = self.gradient(batch)?;
        if !g.loss.total().is_finite() {
            return Ok(g.loss);
        }
        if objective != Objective::KlOnly {
            self.sgd.update_params(&mut self.params, &g.cls.params);
        }
        if objective != Objective::ClsOnly {
            self.sgd.update_c(&mut self.c, g.kl.c);
        }
        Ok(g.loss)
    }

    pub fn into_model(self) -> Result<TrainedModel> {
        Ok(TrainedModel {
            params: self.params,
            c: CounterfactualConstant::new(self.c)?,
            fusion: self.fusion,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Summed `L_cls + L_kl` over the epoch's batches, per sample.
    pub loss: f64,
    pub cls: f64,
    pub kl: f64,
    /// `c` at the end of the epoch.
    pub c: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub trace: Vec<EpochStats>,
}

/// Trains encoders and `c` on `data`. Deterministic in `cfg.seed`.
pub fn train(data: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("cannot train on an empty split".into()));
    }
    let shape = ModelShape {
        vocab: data.vocab_size,
        q_dim: data.q_dim,
        v_dim: data.v_dim,
        hidden: cfg.hidden,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = EncoderParams::init(shape, &mut rng);
    let mut trainer = Trainer::new(params, 0.0, cfg);

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossTerms::default();
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&SyntheticSample> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let loss = trainer.step(&batch, Objective::Final)?;
            if !loss.total().is_finite() || !trainer.c.is_finite() || !trainer.params.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            sum += loss;
        }
        let n = data.len() as f64;
        trace.push(EpochStats {
            epoch,
            loss: sum.total() / n,
            cls: sum.cls / n,
            kl: sum.kl / n,
            c: trainer.c,
        });
    }
    Ok(TrainOutcome {
        model: trainer.into_model()?,
        trace,
    })
}
