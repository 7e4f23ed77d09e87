//! Fusion functions `h(Z_q, Z_v, Z_k)` combining the three branch scores.
//!
//! Four strategies are provided:
//!
//! - **EA** (explain-away): `h = ln(Z_EA + ε) / (α + 1)` where
//!   `Z_EA = σq^α σv^(α+1) σk^(α+1) + σq^(α+1) σv^α σk^(α+1) + σq^(α+1) σv^(α+1) σk^α`.
//! - **SUM**: `h = ln σ(Zq + Zv + Zk)`.
//! - **HM**: `h = ln(σ(Zq) σ(Zv) σ(Zk))`.
//! - **RUBi mask**: `h = Zk · σ(Zq)`; the vision branch is ignored.
//!
//! Every strategy is evaluated elementwise and has closed-form partials.
//! EA is evaluated in log space: `ln Z_EA = (α+1)·Σ ln σ + ln Σ_j σ_j^-1`,
//! so no intermediate underflows even for strongly negative logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logits::{BranchLogits, Logits};

pub const DEFAULT_ALPHA: f64 = 1.5;
pub const DEFAULT_EPSILON: f64 = 5e-11;
pub const MIN_EPSILON: f64 = 1e-12;
pub const MAX_EPSILON: f64 = 1e-6;

/// Logistic sigmoid, two-branch form.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `ln(e^a + e^b + ...)` over a small slice.
fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Ea,
    Sum,
    Hm,
    RubiMask,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Ea, Strategy::Sum, Strategy::Hm, Strategy::RubiMask];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ea => "ea",
            Strategy::Sum => "sum",
            Strategy::Hm => "hm",
            Strategy::RubiMask => "rubi",
        }
    }
}

/// Which branches are replaced by the constant `c` at the counterfactual
/// point used for the natural direct effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfMode {
    /// `h(zq, c, c)`: vision and multimodal branches counterfactual.
    #[default]
    Vk,
    /// `h(zq, zv, c)`: only the multimodal branch counterfactual.
    KOnly,
}

impl CfMode {
    pub const ALL: [CfMode; 2] = [CfMode::Vk, CfMode::KOnly];

    pub fn name(self) -> &'static str {
        match self {
            CfMode::Vk => "vk",
            CfMode::KOnly => "k-only",
        }
    }
}

impl_named!(Strategy, "strategy");
impl_named!(CfMode, "cf mode");

/// Raw elementwise fusion kernel. Unlike [`FusionConfig`] it accepts any
/// `α ≥ 0` and `ε ≥ 0`, including `ε = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fusion {
    pub strategy: Strategy,
    pub alpha: f64,
    pub epsilon: f64,
}

impl Fusion {
    pub fn ea(alpha: f64, epsilon: f64) -> Self {
        Fusion {
            strategy: Strategy::Ea,
            alpha,
            epsilon,
        }
    }

    /// Parameter-free strategies (SUM, HM, RUBi) ignore `alpha`/`epsilon`.
    pub fn plain(strategy: Strategy) -> Self {
        Fusion {
            strategy,
            alpha: 1.0,
            epsilon: 0.0,
        }
    }

    /// Scalar `h(q, v, k)`.
    pub fn value(&self, q: f64, v: f64, k: f64) -> f64 {
        match self.strategy {
            Strategy::Ea => {
                // Sorting makes the result exactly invariant to branch order.
                let mut t = [q, v, k];
                t.sort_by(f64::total_cmp);
                let ls = t.map(log_sigmoid);
                ea_log_z(self.alpha, self.epsilon, ls) / (self.alpha + 1.0)
            }
            Strategy::Sum => log_sigmoid(q + v + k),
            Strategy::Hm => log_sigmoid(q) + log_sigmoid(v) + log_sigmoid(k),
            Strategy::RubiMask => k * sigmoid(q),
        }
    }

    /// Scalar partials `[∂h/∂q, ∂h/∂v, ∂h/∂k]`.
    pub fn partials(&self, q: f64, v: f64, k: f64) -> [f64; 3] {
        match self.strategy {
            Strategy::Ea => {
                let a = self.alpha;
                let ls = [q, v, k].map(log_sigmoid);
                let log_z = ea_log_z(a, self.epsilon, ls);
                let s = ls[0] + ls[1] + ls[2];
                // share_j = T_j / (Z_EA + ε), with ln T_j = (α+1)·s − ln σ_j
                let share = ls.map(|l| ((a + 1.0) * s - l - log_z).exp());
                let total: f64 = share.iter().sum();
                let z = [q, v, k];
                std::array::from_fn(|i| {
                    sigmoid(-z[i]) * ((a + 1.0) * total - share[i]) / (a + 1.0)
                })
            }
            Strategy::Sum => {
                let d = sigmoid(-(q + v + k));
                [d, d, d]
            }
            Strategy::Hm => [sigmoid(-q), sigmoid(-v), sigmoid(-k)],
            Strategy::RubiMask => {
                let s = sigmoid(q);
                [k * s * sigmoid(-q), 0.0, s]
            }
        }
    }

    /// Elementwise fusion of three equal-length vectors.
    pub fn apply(&self, zq: &[f64], zv: &[f64], zk: &[f64]) -> Result<Logits> {
        Error::check_len(zq.len(), zv.len())?;
        Error::check_len(zq.len(), zk.len())?;
        let out = zq
            .iter()
            .zip(zv)
            .zip(zk)
            .map(|((&q, &v), &k)| self.value(q, v, k))
            .collect();
        Logits::new(out)
    }

    /// Elementwise partials of three equal-length vectors.
    pub fn apply_grad(&self, zq: &[f64], zv: &[f64], zk: &[f64]) -> Result<FusionGrad> {
        Error::check_len(zq.len(), zv.len())?;
        Error::check_len(zq.len(), zk.len())?;
        let n = zq.len();
        let mut g = FusionGrad {
            dq: Vec::with_capacity(n),
            dv: Vec::with_capacity(n),
            dk: Vec::with_capacity(n),
        };
        for i in 0..n {
            let [a, b, c] = self.partials(zq[i], zv[i], zk[i]);
            g.dq.push(a);
            g.dv.push(b);
            g.dk.push(c);
        }
        Ok(g)
    }
}

/// `ln(Z_EA + ε)` from the three log-sigmoids.
fn ea_log_z(alpha: f64, epsilon: f64, ls: [f64; 3]) -> f64 {
    let s = ls[0] + ls[1] + ls[2];
    let log_z = (alpha + 1.0) * s + log_sum_exp(&ls.map(|l| -l));
    if epsilon > 0.0 {
        log_sum_exp(&[log_z, epsilon.ln()])
    } else {
        log_z
    }
}

/// Elementwise partial derivatives of a fusion with respect to each branch.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrad {
    pub dq: Vec<f64>,
    pub dv: Vec<f64>,
    pub dk: Vec<f64>,
}

/// Validated fusion settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFusionConfig", into = "RawFusionConfig")]
pub struct FusionConfig {
    strategy: Strategy,
    alpha: f64,
    epsilon: f64,
    cf_mode: CfMode,
}

#[derive(Serialize, Deserialize)]
struct RawFusionConfig {
    strategy: Strategy,
    alpha: f64,
    epsilon: f64,
    cf_mode: CfMode,
}

impl TryFrom<RawFusionConfig> for FusionConfig {
    type Error = Error;

    fn try_from(r: RawFusionConfig) -> Result<Self> {
        FusionConfig::new(r.strategy, r.alpha, r.epsilon, r.cf_mode)
    }
}

impl From<FusionConfig> for RawFusionConfig {
    fn from(c: FusionConfig) -> Self {
        RawFusionConfig {
            strategy: c.strategy,
            alpha: c.alpha,
            epsilon: c.epsilon,
            cf_mode: c.cf_mode,
        }
    }
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            strategy: Strategy::Ea,
            alpha: DEFAULT_ALPHA,
            epsilon: DEFAULT_EPSILON,
            cf_mode: CfMode::Vk,
        }
    }
}

impl FusionConfig {
    pub fn new(strategy: Strategy, alpha: f64, epsilon: f64, cf_mode: CfMode) -> Result<Self> {
        if !(alpha.is_finite() && alpha >= 1.0) {
            return Err(Error::Config(format!("alpha must be >= 1, got {alpha}")));
        }
        if !(MIN_EPSILON..=MAX_EPSILON).contains(&epsilon) {
            return Err(Error::Config(format!(
                "epsilon must lie in [{MIN_EPSILON:e}, {MAX_EPSILON:e}], got {epsilon:e}"
            )));
        }
        Ok(FusionConfig {
            strategy,
            alpha,
            epsilon,
            cf_mode,
        })
    }

    pub fn with_strategy(self, strategy: Strategy) -> Self {
        FusionConfig { strategy, ..self }
    }

    pub fn with_cf_mode(self, cf_mode: CfMode) -> Self {
        FusionConfig { cf_mode, ..self }
    }

    pub fn with_alpha(self, alpha: f64) -> Result<Self> {
        FusionConfig::new(self.strategy, alpha, self.epsilon, self.cf_mode)
    }

    pub fn with_epsilon(self, epsilon: f64) -> Result<Self> {
        FusionConfig::new(self.strategy, self.alpha, epsilon, self.cf_mode)
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn cf_mode(&self) -> CfMode {
        self.cf_mode
    }

    pub fn kernel(&self) -> Fusion {
        Fusion {
            strategy: self.strategy,
            alpha: self.alpha,
            epsilon: self.epsilon,
        }
    }
}

/// Applies the configured strategy to a fully factual triple.
pub fn fuse(branch: &BranchLogits, cfg: &FusionConfig) -> Result<Logits> {
    let (q, v, k) = branch.require_factual()?;
    cfg.kernel().apply(q, v, k)
}

/// Explain-away fusion.
pub fn fuse_ea(branch: &BranchLogits, cfg: &FusionConfig) -> Result<Logits> {
    if cfg.strategy != Strategy::Ea {
        return Err(Error::Contract(format!(
            "fuse_ea called with strategy {}",
            cfg.strategy.name()
        )));
    }
    fuse(branch, cfg)
}

pub fn fuse_sum(branch: &BranchLogits) -> Result<Logits> {
    let (q, v, k) = branch.require_factual()?;
    Fusion::plain(Strategy::Sum).apply(q, v, k)
}

pub fn fuse_hm(branch: &BranchLogits) -> Result<Logits> {
    let (q, v, k) = branch.require_factual()?;
    Fusion::plain(Strategy::Hm).apply(q, v, k)
}

/// RUBi-style masking: `zk ⊙ σ(zq)`.
pub fn rubi_mask_fuse(zk: &Logits, zq: &Logits) -> Result<Logits> {
    Error::check_len(zk.len(), zq.len())?;
    Logits::new(zk.iter().zip(zq.iter()).map(|(&k, &q)| k * sigmoid(q)).collect())
}

/// Partials of the configured fusion at a factual point.
pub fn fuse_grad(branch: &BranchLogits, cfg: &FusionConfig) -> Result<FusionGrad> {
    let (q, v, k) = branch.require_factual()?;
    cfg.kernel().apply_grad(q, v, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn branch(q: &[f64], v: &[f64], k: &[f64]) -> BranchLogits {
        BranchLogits::from_vecs(q.to_vec(), v.to_vec(), k.to_vec()).unwrap()
    }

    /// Direct, non-log-space evaluation of the EA formula.
    fn ea_direct(q: f64, v: f64, k: f64, a: f64, eps: f64) -> f64 {
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let (sq, sv, sk) = (s(q), s(v), s(k));
        let z = sq.powf(a) * sv.powf(a + 1.0) * sk.powf(a + 1.0)
            + sq.powf(a + 1.0) * sv.powf(a) * sk.powf(a + 1.0)
            + sq.powf(a + 1.0) * sv.powf(a + 1.0) * sk.powf(a);
        (z + eps).ln() / (a + 1.0)
    }

    #[test]
    fn ea_symmetric_point() {
        let h = Fusion::ea(1.0, 0.0).value(0.0, 0.0, 0.0);
        assert!((h - (3.0f64 / 32.0).ln() / 2.0).abs() < 1e-12);
        assert!((h - -1.1835618070658084).abs() < 1e-12);
    }

    #[test]
    fn ea_saturation() {
        let h = Fusion::ea(1.0, 0.0).value(40.0, 40.0, 40.0);
        assert!((h - 3f64.ln() / 2.0).abs() < 1e-9);
    }

    #[test]
    fn ea_matches_mpmath_reference() {
        let cfg = FusionConfig::new(Strategy::Ea, 1.5, 1e-12, CfMode::Vk).unwrap();
        let h = fuse_ea(&branch(&[1.3], &[-0.7], &[2.1]), &cfg).unwrap();
        assert!((h[0] - -0.784_507_491_729_995_7).abs() < 1e-14);
    }

    #[test]
    fn ea_matches_direct_formula() {
        for &(q, v, k) in &[(0.3, -2.0, 1.0), (-4.0, 3.0, 0.5), (2.5, 2.5, -1.5)] {
            for &a in &[1.0, 1.5, 2.0] {
                let got = Fusion::ea(a, 5e-11).value(q, v, k);
                assert!((got - ea_direct(q, v, k, a, 5e-11)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ea_extreme_negative_is_finite_with_epsilon() {
        let h = Fusion::ea(1.5, 1e-12).value(-800.0, -800.0, -800.0);
        assert!((h - (1e-12f64).ln() / 2.5).abs() < 1e-9);
    }

    #[test]
    fn sum_examples() {
        assert!((fuse_sum(&branch(&[0.0], &[0.0], &[0.0])).unwrap()[0] - 0.5f64.ln()).abs() < 1e-15);
        assert!(fuse_sum(&branch(&[50.0], &[0.0], &[0.0])).unwrap()[0].abs() < 1e-20);
        let h = fuse_sum(&branch(&[1.0], &[-2.0], &[0.5])).unwrap();
        assert!((h[0] - -0.974_076_984_180_106_7).abs() < 1e-14);
    }

    #[test]
    fn hm_examples() {
        assert!((fuse_hm(&branch(&[0.0], &[0.0], &[0.0])).unwrap()[0] - 0.125f64.ln()).abs() < 1e-15);
        assert!(fuse_hm(&branch(&[40.0], &[40.0], &[40.0])).unwrap()[0].abs() < 1e-16);
        let h = fuse_hm(&branch(&[1.0], &[1.0], &[1.0])).unwrap();
        assert!((h[0] - -0.939_785_062_554_668_5).abs() < 1e-14);
    }

    #[test]
    fn rubi_examples() {
        let l = |v: &[f64]| Logits::new(v.to_vec()).unwrap();
        assert_eq!(rubi_mask_fuse(&l(&[2.0, 4.0]), &l(&[0.0, 0.0])).unwrap().as_slice(), &[1.0, 2.0]);
        let m = rubi_mask_fuse(&l(&[1.0, 1.0]), &l(&[40.0, -40.0])).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-15 && m[1].abs() < 1e-15);
        let m = rubi_mask_fuse(&l(&[3.0, -1.0]), &l(&[1.0, 2.0])).unwrap();
        assert!((m[0] - 2.193_175_735_890_014_6).abs() < 1e-14);
        assert!((m[1] - -0.880_797_077_977_882_4).abs() < 1e-14);
        assert!(matches!(
            rubi_mask_fuse(&l(&[1.0]), &l(&[1.0, 2.0])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn sum_partials_are_equal() {
        let g = Fusion::plain(Strategy::Sum).partials(0.3, -1.2, 2.0);
        let expect = sigmoid(-(0.3 - 1.2 + 2.0));
        assert_eq!(g, [expect; 3]);
    }

    #[test]
    fn ea_requires_ea_strategy() {
        let cfg = FusionConfig::default().with_strategy(Strategy::Sum);
        assert!(matches!(fuse_ea(&branch(&[0.0], &[0.0], &[0.0]), &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn fusion_rejects_absent_branch() {
        let b = BranchLogits::new(Some(Logits::zeros(2)), None, None).unwrap();
        assert!(matches!(fuse(&b, &FusionConfig::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn config_bounds() {
        assert!(FusionConfig::default().with_alpha(0.99).is_err());
        assert!(FusionConfig::default().with_alpha(1.0).is_ok());
        assert!(FusionConfig::default().with_epsilon(0.0).is_err());
        assert!(FusionConfig::default().with_epsilon(1e-5).is_err());
        assert!(FusionConfig::default().with_epsilon(1e-12).is_ok());
        assert!(FusionConfig::default().with_epsilon(1e-6).is_ok());
        let d = FusionConfig::default();
        assert_eq!((d.alpha(), d.epsilon(), d.cf_mode()), (1.5, 5e-11, CfMode::Vk));
    }

    #[test]
    fn config_serde_validates() {
        let ok = serde_json::to_string(&FusionConfig::default()).unwrap();
        let back: FusionConfig = serde_json::from_str(&ok).unwrap();
        assert_eq!(back, FusionConfig::default());
        let bad = ok.replace("1.5", "0.5");
        assert!(serde_json::from_str::<FusionConfig>(&bad).is_err());
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert_eq!(log_sigmoid(-1000.0), -1000.0);
        assert_eq!(log_sigmoid(1000.0), 0.0);
        assert!((sigmoid(-745.0)).is_finite());
    }
}
