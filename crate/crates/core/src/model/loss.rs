//! Classification and KL losses with reverse-mode gradients.
//!
//! Per sample, with `f = h(zq, zv, zk)` and `f* = h(zq, c, c)`:
//!
//! ```text
//! L_cls = CE(f, a) + CE(zq, a) + CE(zv, a)
//! L_kl  = (1/|A|) Σ_a −softmax(f)_a · ln softmax(f*)_a
//! ```
//!
//! The KL term is used to fit `c` only. [`loss_final`] still returns its
//! encoder gradient separately so the full derivative can be checked; the
//! optimizer discards it.

use crate::causal::CounterfactualConstant;
use crate::datagen::SyntheticSample;
use crate::error::{Error, Result};
use crate::fusion::Fusion;
use crate::logits::{BranchLogits, Logits};

use super::{forward_cached, EncoderParams, ForwardCache};

/// Softmax with max subtraction.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

fn cross_entropy(z: &[f64], label: usize) -> f64 {
    -log_softmax(z)[label]
}

/// `CE(fused) + CE(zq) + CE(zv)` for one sample.
pub fn loss_cls(branch: &BranchLogits, fused: &Logits, label: usize) -> Result<f64> {
    let (zq, zv, _) = branch.require_factual()?;
    Error::check_len(zq.len(), fused.len())?;
    if label >= fused.len() {
        return Err(Error::Index { index: label, len: fused.len() });
    }
    Ok(cross_entropy(fused, label) + cross_entropy(zq, label) + cross_entropy(zv, label))
}

/// `(1/|A|) Σ_a −p(a|q,v,k) · ln p(a|q,v*,k*)`.
pub fn loss_kl(factual_fused: &[f64], counterfactual_fused: &[f64]) -> Result<f64> {
    Error::check_len(factual_fused.len(), counterfactual_fused.len())?;
    let p = softmax(factual_fused);
    let log_cf = log_softmax(counterfactual_fused);
    let n = p.len() as f64;
    Ok(-p.iter().zip(&log_cf).map(|(a, b)| a * b).sum::<f64>() / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub cls: f64,
    pub kl: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.cls + self.kl
    }
}

impl std::ops::AddAssign for LossTerms {
    fn add_assign(&mut self, o: Self) {
        self.cls += o.cls;
        self.kl += o.kl;
    }
}

/// Gradient with respect to encoder parameters and `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: EncoderParams,
    pub c: f64,
}

impl Gradients {
    pub fn zeros_like(p: &EncoderParams) -> Self {
        Gradients {
            params: EncoderParams::zeros(p.shape),
            c: 0.0,
        }
    }

    /// Canonical parameter order with `c` last.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.params.flatten();
        v.push(self.c);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: LossTerms,
    /// `∂ΣL_cls/∂θ`; its `c` entry is zero (the factual fusion does not use `c`).
    pub cls: Gradients,
    /// `∂ΣL_kl/∂θ` and `∂ΣL_kl/∂c`. The encoder part is zero unless
    /// requested via `kl_encoder_grad`.
    pub kl: Gradients,
}

impl LossGrad {
    /// Complete derivative of `Σ (L_cls + L_kl)`.
    pub fn full(&self) -> Vec<f64> {
        self.cls
            .flatten()
            .iter()
            .zip(self.kl.flatten())
            .map(|(a, b)| a + b)
            .collect()
    }
}

fn backward_encoders(params: &EncoderParams, cache: &ForwardCache, dz: [&[f64]; 3], grad: &mut EncoderParams) {
    params.question.backward(&cache.question, dz[0], &mut grad.question);
    params.vision.backward(&cache.vision, dz[1], &mut grad.vision);
    params.joint.backward(&cache.joint, dz[2], &mut grad.joint);
}

/// Loss of one sample; gradients are accumulated into `out`.
fn accumulate(
    params: &EncoderParams,
    c: f64,
    fusion: &Fusion,
    sample: &SyntheticSample,
    kl_encoder_grad: bool,
    out: &mut LossGrad,
) -> Result<()> {
    let n = params.shape.vocab;
    if sample.label >= n {
        return Err(Error::Index { index: sample.label, len: n });
    }
    let cache = forward_cached(&sample.q_features, &sample.v_features, params)?;
    let [zq, zv, zk] = cache.logits();
    let label = sample.label;

    let mut fused = vec![0.0; n];
    let mut cf = vec![0.0; n];
    let mut d_fused = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut d_cf_q = vec![0.0; n];
    let mut d_cf_c = vec![0.0; n];
    for a in 0..n {
        fused[a] = fusion.value(zq[a], zv[a], zk[a]);
        cf[a] = fusion.value(zq[a], c, c);
        let g = fusion.partials(zq[a], zv[a], zk[a]);
        for (d, gi) in d_fused.iter_mut().zip(g) {
            d[a] = gi;
        }
        let [gq, gv, gk] = fusion.partials(zq[a], c, c);
        d_cf_q[a] = gq;
        d_cf_c[a] = gv + gk;
    }

    // L_cls and its logit gradient.
    let p = softmax(&fused);
    let pq = softmax(zq);
    let pv = softmax(zv);
    let cls = cross_entropy(&fused, label) + cross_entropy(zq, label) + cross_entropy(zv, label);
    let mut g_f = p.clone();
    g_f[label] -= 1.0;
    let mut dzq: Vec<f64> = (0..n).map(|a| g_f[a] * d_fused[0][a] + pq[a]).collect();
    let mut dzv: Vec<f64> = (0..n).map(|a| g_f[a] * d_fused[1][a] + pv[a]).collect();
    let dzk: Vec<f64> = (0..n).map(|a| g_f[a] * d_fused[2][a]).collect();
    dzq[label] -= 1.0;
    dzv[label] -= 1.0;
    backward_encoders(params, &cache, [&dzq, &dzv, &dzk], &mut out.cls.params);

    // L_kl and its gradients.
    let log_pc = log_softmax(&cf);
    let pc: Vec<f64> = log_pc.iter().map(|x| x.exp()).collect();
    let inv_n = 1.0 / n as f64;
    let kl = -inv_n * p.iter().zip(&log_pc).map(|(a, b)| a * b).sum::<f64>();
    // ∂L_kl/∂f* = (p* − p)/|A|
    let g_cf: Vec<f64> = (0..n).map(|a| inv_n * (pc[a] - p[a])).collect();
    out.kl.c += (0..n).map(|a| g_cf[a] * d_cf_c[a]).sum::<f64>();

    if kl_encoder_grad {
        // ∂L_kl/∂f = −p ⊙ (ln p* − Σ p ln p*) / |A|
        let mean_log = p.iter().zip(&log_pc).map(|(a, b)| a * b).sum::<f64>();
        let g_f: Vec<f64> = (0..n).map(|a| -inv_n * p[a] * (log_pc[a] - mean_log)).collect();
        let kq: Vec<f64> = (0..n)
            .map(|a| g_f[a] * d_fused[0][a] + g_cf[a] * d_cf_q[a])
            .collect();
        let kv: Vec<f64> = (0..n).map(|a| g_f[a] * d_fused[1][a]).collect();
        let kk: Vec<f64> = (0..n).map(|a| g_f[a] * d_fused[2][a]).collect();
        backward_encoders(params, &cache, [&kq, &kv, &kk], &mut out.kl.params);
    }

    out.loss += LossTerms { cls, kl };
    Ok(())
}

/// `Σ_batch (L_cls + L_kl)` with gradients.
///
/// The counterfactual fused score is always `h(zq, c, c)`. Set
/// `kl_encoder_grad` to also compute `∂L_kl/∂θ`, which training never uses.
pub fn loss_final(
    params: &EncoderParams,
    c: CounterfactualConstant,
    fusion: &Fusion,
    batch: &[&SyntheticSample],
    kl_encoder_grad: bool,
) -> Result<LossGrad> {
    if batch.is_empty() {
        return Err(Error::Contract("loss_final needs a non-empty batch".into()));
    }
    let mut out = LossGrad {
        loss: LossTerms::default(),
        cls: Gradients::zeros_like(params),
        kl: Gradients::zeros_like(params),
    };
    for s in batch {
        accumulate(params, c.value(), fusion, s, kl_encoder_grad, &mut out)?;
    }
    Ok(out)
}
