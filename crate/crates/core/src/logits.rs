//! Score vectors over the answer vocabulary.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A finite score vector over the answer vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if let Some(i) = scores.iter().position(|x| !x.is_finite()) {
            return Err(Error::Domain(format!(
                "logit {i} is not finite ({})",
                scores[i]
            )));
        }
        Ok(Logits(scores))
    }

    /// Constant vector `[value; len]`.
    pub fn constant(len: usize, value: f64) -> Result<Self> {
        Logits::new(vec![value; len])
    }

    pub fn zeros(len: usize) -> Self {
        Logits(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Logits {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Logits {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Logits::new(v)
    }
}

impl From<Logits> for Vec<f64> {
    fn from(l: Logits) -> Self {
        l.0
    }
}

/// The three branch scores `(Z_q, Z_v, Z_k)`. Absent branches are realized
/// with the counterfactual constant before fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchLogits {
    zq: Option<Logits>,
    zv: Option<Logits>,
    zk: Option<Logits>,
}

impl BranchLogits {
    /// Builds a possibly partial triple. The multimodal branch can only be
    /// present when both unimodal inputs are.
    pub fn new(zq: Option<Logits>, zv: Option<Logits>, zk: Option<Logits>) -> Result<Self> {
        if zk.is_some() && (zq.is_none() || zv.is_none()) {
            return Err(Error::Contract(
                "multimodal logits present without both question and vision inputs".into(),
            ));
        }
        let mut len = None;
        for z in [&zq, &zv, &zk].into_iter().flatten() {
            match len {
                None => len = Some(z.len()),
                Some(n) => Error::check_len(n, z.len())?,
            }
        }
        Ok(BranchLogits { zq, zv, zk })
    }

    /// All three branches observed.
    pub fn factual(zq: Logits, zv: Logits, zk: Logits) -> Result<Self> {
        BranchLogits::new(Some(zq), Some(zv), Some(zk))
    }

    /// Convenience constructor from raw vectors.
    pub fn from_vecs(zq: Vec<f64>, zv: Vec<f64>, zk: Vec<f64>) -> Result<Self> {
        BranchLogits::factual(Logits::new(zq)?, Logits::new(zv)?, Logits::new(zk)?)
    }

    pub fn zq(&self) -> Option<&Logits> {
        self.zq.as_ref()
    }

    pub fn zv(&self) -> Option<&Logits> {
        self.zv.as_ref()
    }

    pub fn zk(&self) -> Option<&Logits> {
        self.zk.as_ref()
    }

    /// Shared vector length, if any branch is present.
    pub fn len(&self) -> Option<usize> {
        [&self.zq, &self.zv, &self.zk]
            .into_iter()
            .flatten()
            .map(|z| z.len())
            .next()
    }

    pub fn is_factual(&self) -> bool {
        self.zq.is_some() && self.zv.is_some() && self.zk.is_some()
    }

    /// Borrows all three branches, failing if any is absent.
    pub fn require_factual(&self) -> Result<(&Logits, &Logits, &Logits)> {
        match (&self.zq, &self.zv, &self.zk) {
            (Some(q), Some(v), Some(k)) => Ok((q, v, k)),
            _ => Err(Error::Contract("all three branch logits must be present".into())),
        }
    }
}
