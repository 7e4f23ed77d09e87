//! Counterfactual realization and effect decomposition.
//!
//! Absent branches are realized with a learnable constant `c`. With the
//! all-counterfactual reference `h(c, c, c)`:
//!
//! ```text
//! TE  = h(zq, zv, zk) − h(c, c, c)
//! NDE = h(counterfactual point) − h(c, c, c)
//! TIE = TE − NDE
//! ```
//!
//! where the counterfactual point is `h(zq, c, c)` in [`CfMode::Vk`] and
//! `h(zq, zv, c)` in [`CfMode::KOnly`]. Inference takes the argmax of TIE.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{CfMode, FusionConfig};
use crate::logits::{BranchLogits, Logits};

/// Scalar stand-in for blocked branches.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct CounterfactualConstant(f64);

impl CounterfactualConstant {
    pub fn new(c: f64) -> Result<Self> {
        if c.is_finite() {
            Ok(CounterfactualConstant(c))
        } else {
            Err(Error::Domain(format!("counterfactual constant must be finite, got {c}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn broadcast(self, len: usize) -> Logits {
        Logits::constant(len, self.0).expect("finite by construction")
    }
}

impl TryFrom<f64> for CounterfactualConstant {
    type Error = Error;

    fn try_from(c: f64) -> Result<Self> {
        CounterfactualConstant::new(c)
    }
}

impl From<CounterfactualConstant> for f64 {
    fn from(c: CounterfactualConstant) -> f64 {
        c.0
    }
}

/// Returns the branch unchanged when present, otherwise `[c; len]`.
pub fn realize(input: Option<&Logits>, c: CounterfactualConstant, len: usize) -> Logits {
    match input {
        Some(z) => z.clone(),
        None => c.broadcast(len),
    }
}

/// Multimodal branch: the encoder output when both V and Q are observed,
/// otherwise `[c; len]`.
pub fn realize_k(
    v_present: bool,
    q_present: bool,
    encoder_output: Option<&Logits>,
    c: CounterfactualConstant,
    len: usize,
) -> Result<Logits> {
    if v_present && q_present {
        encoder_output.cloned().ok_or_else(|| {
            Error::Contract("V and Q observed but no multimodal encoder output supplied".into())
        })
    } else {
        Ok(c.broadcast(len))
    }
}

/// `(zq, zv, zk)` with the branches blocked by `mode` replaced by `c`.
pub fn counterfactual_point(
    factual: &BranchLogits,
    c: CounterfactualConstant,
    mode: CfMode,
) -> Result<BranchLogits> {
    let (zq, zv, _) = factual.require_factual()?;
    let n = zq.len();
    let zv = match mode {
        CfMode::Vk => None,
        CfMode::KOnly => Some(zv),
    };
    // K is counterfactual in both modes, even when Q and V are facts.
    BranchLogits::factual(zq.clone(), realize(zv, c, n), c.broadcast(n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectDecomposition {
    pub te: Vec<f64>,
    pub nde: Vec<f64>,
    pub tie: Vec<f64>,
}

pub fn decompose(
    factual: &BranchLogits,
    c: CounterfactualConstant,
    cfg: &FusionConfig,
) -> Result<EffectDecomposition> {
    let (zq, zv, zk) = factual.require_factual()?;
    let h = cfg.kernel();
    let cv = c.value();
    let cf = counterfactual_point(factual, c, cfg.cf_mode())?;
    let (cq, cvv, ck) = cf.require_factual()?;

    let n = zq.len();
    let mut out = EffectDecomposition {
        te: Vec::with_capacity(n),
        nde: Vec::with_capacity(n),
        tie: Vec::with_capacity(n),
    };
    let reference = h.value(cv, cv, cv);
    for i in 0..n {
        let te = h.value(zq[i], zv[i], zk[i]) - reference;
        let nde = h.value(cq[i], cvv[i], ck[i]) - reference;
        out.te.push(te);
        out.nde.push(nde);
        out.tie.push(te - nde);
    }
    Ok(out)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// How answer scores are formed at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceRule {
    /// Total indirect effect (debiased).
    Tie,
    /// Total effect.
    Te,
    /// `h(zq, zv, zk)` directly.
    FusedOnly,
    /// Question branch `zq` alone.
    QOnly,
}

impl InferenceRule {
    pub const ALL: [InferenceRule; 4] = [
        InferenceRule::Tie,
        InferenceRule::Te,
        InferenceRule::FusedOnly,
        InferenceRule::QOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InferenceRule::Tie => "tie",
            InferenceRule::Te => "te",
            InferenceRule::FusedOnly => "fused",
            InferenceRule::QOnly => "q-only",
        }
    }
}

impl_named!(InferenceRule, "inference rule");

/// Per-answer scores under `rule`.
pub fn scores(
    factual: &BranchLogits,
    c: CounterfactualConstant,
    cfg: &FusionConfig,
    rule: InferenceRule,
) -> Result<Vec<f64>> {
    let (zq, zv, zk) = factual.require_factual()?;
    Ok(match rule {
        InferenceRule::Tie => decompose(factual, c, cfg)?.tie,
        InferenceRule::Te => decompose(factual, c, cfg)?.te,
        InferenceRule::FusedOnly => cfg.kernel().apply(zq, zv, zk)?.into_vec(),
        InferenceRule::QOnly => zq.to_vec(),
    })
}

/// Answer index under `rule`.
pub fn predict(
    factual: &BranchLogits,
    c: CounterfactualConstant,
    cfg: &FusionConfig,
    rule: InferenceRule,
) -> Result<usize> {
    Ok(argmax(&scores(factual, c, cfg, rule)?))
}

/// Argmax of the total indirect effect.
pub fn infer_answer(
    factual: &BranchLogits,
    c: CounterfactualConstant,
    cfg: &FusionConfig,
) -> Result<usize> {
    predict(factual, c, cfg, InferenceRule::Tie)
}
