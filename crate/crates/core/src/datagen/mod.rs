//! Synthetic changing-priors benchmark.
//!
//! Samples follow the anticausal graph with an unobserved confounder:
//!
//! ```text
//!   U ──► qtype          U ──► A
//!   A, qtype, U ──► q_features
//!   A ──► v_features
//! ```
//!
//! Per sample: `u ~ Uniform(|U|)`, `qtype ~ P(t | u)`,
//! `a ~ P_split(a | qtype, u)`, then `q = E_q(a, qtype, u) + noise` and
//! `v = E_v(a) + noise`. The training conditional puts mass `β` on one
//! preferred answer per question type; the confounder reshapes the remaining
//! `1 − β`. The test conditional is either the rank-reversed training
//! conditional or uniform, so question-type priors learned on the training
//! split mislead at test time.
//!
//! `u` is drawn and discarded; it never appears in a [`SyntheticSample`].

pub mod io;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the test split's answer conditional relates to the training one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    /// Reflect each conditional row, `w_a = max + min − p_a`, then
    /// renormalize: the most likely training answer becomes the least likely.
    #[default]
    InvertPrior,
    /// Uniform answer conditional at test time.
    UniformPrior,
}

impl ShiftMode {
    pub const ALL: [ShiftMode; 2] = [ShiftMode::InvertPrior, ShiftMode::UniformPrior];

    pub fn name(self) -> &'static str {
        match self {
            ShiftMode::InvertPrior => "invert-prior",
            ShiftMode::UniformPrior => "uniform-prior",
        }
    }
}

impl_named!(ShiftMode, "shift mode");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub vocab_size: usize,
    pub num_qtypes: usize,
    pub q_dim: usize,
    pub v_dim: usize,
    pub num_confounder_states: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Training mass on each question type's preferred answer.
    pub bias_strength: f64,
    pub shift_mode: ShiftMode,
    pub noise_sigma: f64,
    /// Scale of the answer embedding `E_v(a)`.
    pub v_signal: f64,
    /// Scale of the answer component of `E_q(a, qtype, u)`.
    pub q_answer_signal: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            vocab_size: 8,
            num_qtypes: 3,
            q_dim: 16,
            v_dim: 16,
            num_confounder_states: 4,
            train_size: 8000,
            test_size: 4000,
            bias_strength: 0.85,
            shift_mode: ShiftMode::InvertPrior,
            noise_sigma: 0.5,
            v_signal: 0.25,
            q_answer_signal: 0.05,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < 2 {
            return fail(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.num_qtypes < 1 || self.num_confounder_states < 1 {
            return fail("num_qtypes and num_confounder_states must be >= 1".into());
        }
        if self.q_dim < 1 || self.v_dim < 1 {
            return fail("feature dimensions must be >= 1".into());
        }
        if self.train_size < self.num_qtypes || self.test_size < self.num_qtypes {
            return fail(format!(
                "split sizes must be >= num_qtypes ({}) so every question type appears",
                self.num_qtypes
            ));
        }
        if !(0.0..=1.0).contains(&self.bias_strength) {
            return fail(format!("bias_strength must lie in [0, 1], got {}", self.bias_strength));
        }
        if self.bias_strength == 1.0 && self.vocab_size < self.num_qtypes {
            return fail("bias_strength = 1 needs a distinct preferred answer per question type".into());
        }
        for (name, x) in [
            ("noise_sigma", self.noise_sigma),
            ("v_signal", self.v_signal),
            ("q_answer_signal", self.q_answer_signal),
        ] {
            if !(x.is_finite() && x >= 0.0) {
                return fail(format!("{name} must be finite and >= 0, got {x}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub id: u64,
    pub qtype: usize,
    pub label: usize,
    #[serde(rename = "q")]
    pub q_features: Vec<f64>,
    #[serde(rename = "v")]
    pub v_features: Vec<f64>,
}

/// A labelled split together with its realized `P(a | qtype)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub vocab_size: usize,
    pub qtype_names: Vec<String>,
    pub q_dim: usize,
    pub v_dim: usize,
    pub samples: Vec<SyntheticSample>,
    /// Row `t` is the empirical answer distribution among samples of type `t`.
    pub prior_table: Vec<Vec<f64>>,
}

impl DatasetSplit {
    /// Validates samples and computes the realized prior table.
    pub fn new(
        vocab_size: usize,
        qtype_names: Vec<String>,
        q_dim: usize,
        v_dim: usize,
        samples: Vec<SyntheticSample>,
    ) -> Result<Self> {
        let num_qtypes = qtype_names.len();
        let mut counts = vec![vec![0usize; vocab_size]; num_qtypes];
        for s in &samples {
            if s.label >= vocab_size {
                return Err(Error::Index { index: s.label, len: vocab_size });
            }
            if s.qtype >= num_qtypes {
                return Err(Error::Index { index: s.qtype, len: num_qtypes });
            }
            Error::check_len(q_dim, s.q_features.len())?;
            Error::check_len(v_dim, s.v_features.len())?;
            if s.q_features.iter().chain(&s.v_features).any(|x| !x.is_finite()) {
                return Err(Error::Domain(format!("sample {} has non-finite features", s.id)));
            }
            counts[s.qtype][s.label] += 1;
        }
        let mut prior_table = Vec::with_capacity(num_qtypes);
        for (t, row) in counts.iter().enumerate() {
            let n: usize = row.iter().sum();
            if n == 0 && !samples.is_empty() {
                return Err(Error::Contract(format!("question type {t} has no samples")));
            }
            let n = n.max(1) as f64;
            prior_table.push(row.iter().map(|&c| c as f64 / n).collect());
        }
        Ok(DatasetSplit {
            vocab_size,
            qtype_names,
            q_dim,
            v_dim,
            samples,
            prior_table,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_qtypes(&self) -> usize {
        self.qtype_names.len()
    }

    /// Marginal label distribution of the split.
    pub fn label_distribution(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.vocab_size];
        for s in &self.samples {
            d[s.label] += 1.0;
        }
        let n = self.samples.len().max(1) as f64;
        d.iter_mut().for_each(|x| *x /= n);
        d
    }
}

pub fn qtype_names(n: usize) -> Vec<String> {
    (0..n).map(|t| format!("type{t}")).collect()
}

/// Fixed structural tables of one generated benchmark.
struct World {
    /// `P(t | u)`, rows indexed by `u`.
    qtype_given_u: Vec<WeightedIndex<f64>>,
    /// `P_train(a | t, u)` and `P_test(a | t, u)`, indexed `[t][u]`.
    train_answer: Vec<Vec<WeightedIndex<f64>>>,
    test_answer: Vec<Vec<WeightedIndex<f64>>>,
    q_type_embed: Vec<Vec<f64>>,
    q_conf_embed: Vec<Vec<f64>>,
    q_answer_embed: Vec<Vec<f64>>,
    v_answer_embed: Vec<Vec<f64>>,
}

fn gaussian_table(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// Reflects a distribution's ranking: `w_a = max + min − p_a`, renormalized.
pub fn invert_prior(p: &[f64]) -> Vec<f64> {
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = p.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = p.iter().map(|x| max + min - x).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

fn weighted(w: &[f64]) -> WeightedIndex<f64> {
    WeightedIndex::new(w).expect("answer weights are non-negative with positive mass")
}

impl World {
    fn build(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> World {
        let (na, nt, nu) = (cfg.vocab_size, cfg.num_qtypes, cfg.num_confounder_states);

        let qtype_given_u = (0..nu)
            .map(|u| {
                let w: Vec<f64> = (0..nt)
                    .map(|t| if t == u % nt { 3.0 } else { 1.0 })
                    .collect();
                weighted(&w)
            })
            .collect();

        let mut answers: Vec<usize> = (0..na).collect();
        answers.shuffle(rng);
        let preferred: Vec<usize> = (0..nt).map(|t| answers[t % na]).collect();

        let mut train_answer = Vec::with_capacity(nt);
        let mut test_answer = Vec::with_capacity(nt);
        for &pref in &preferred {
            let others: Vec<usize> = (0..na).filter(|&a| a != pref).collect();
            let mut train_rows = Vec::with_capacity(nu);
            let mut test_rows = Vec::with_capacity(nu);
            for _ in 0..nu {
                // The confounder state favours one of the non-preferred answers.
                let favoured = others[rng.gen_range(0..others.len())];
                let rest: Vec<f64> = others
                    .iter()
                    .map(|&a| if a == favoured { 3.0 } else { 1.0 })
                    .collect();
                let rest_total: f64 = rest.iter().sum();
                let mut p = vec![0.0; na];
                p[pref] = cfg.bias_strength;
                for (&a, &w) in others.iter().zip(&rest) {
                    p[a] = (1.0 - cfg.bias_strength) * w / rest_total;
                }
                let q = match cfg.shift_mode {
                    ShiftMode::InvertPrior => invert_prior(&p),
                    ShiftMode::UniformPrior => vec![1.0 / na as f64; na],
                };
                train_rows.push(weighted(&p));
                test_rows.push(weighted(&q));
            }
            train_answer.push(train_rows);
            test_answer.push(test_rows);
        }

        World {
            qtype_given_u,
            train_answer,
            test_answer,
            q_type_embed: gaussian_table(rng, nt, cfg.q_dim, 1.0),
            q_conf_embed: gaussian_table(rng, nu, cfg.q_dim, 0.5),
            q_answer_embed: gaussian_table(rng, na, cfg.q_dim, cfg.q_answer_signal),
            v_answer_embed: gaussian_table(rng, na, cfg.v_dim, cfg.v_signal),
        }
    }

    fn sample_split(
        &self,
        cfg: &GenConfig,
        size: usize,
        answer: &[Vec<WeightedIndex<f64>>],
        rng: &mut ChaCha8Rng,
    ) -> Vec<SyntheticSample> {
        let nu = cfg.num_confounder_states;
        let noise = |rng: &mut ChaCha8Rng| cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal);
        (0..size)
            .map(|i| {
                // The first num_qtypes samples are drawn conditioned on
                // qtype = i (by rejection) so every type is represented.
                let (u, t) = loop {
                    let u = rng.gen_range(0..nu);
                    let t = self.qtype_given_u[u].sample(rng);
                    if i >= cfg.num_qtypes || t == i {
                        break (u, t);
                    }
                };
                let a = answer[t][u].sample(rng);
                let q_features = (0..cfg.q_dim)
                    .map(|d| {
                        self.q_type_embed[t][d] + self.q_conf_embed[u][d] + self.q_answer_embed[a][d]
                            + noise(rng)
                    })
                    .collect();
                let v_features = (0..cfg.v_dim)
                    .map(|d| self.v_answer_embed[a][d] + noise(rng))
                    .collect();
                SyntheticSample {
                    id: i as u64,
                    qtype: t,
                    label: a,
                    q_features,
                    v_features,
                }
            })
            .collect()
    }
}

/// Generates `(train, test)` splits. Deterministic in `cfg.seed`.
pub fn generate(cfg: &GenConfig) -> Result<(DatasetSplit, DatasetSplit)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world = World::build(cfg, &mut rng);

    let mut train_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    train_rng.set_stream(1);
    let mut test_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    test_rng.set_stream(2);

    let train = world.sample_split(cfg, cfg.train_size, &world.train_answer, &mut train_rng);
    let test = world.sample_split(cfg, cfg.test_size, &world.test_answer, &mut test_rng);
    let names = qtype_names(cfg.num_qtypes);
    Ok((
        DatasetSplit::new(cfg.vocab_size, names.clone(), cfg.q_dim, cfg.v_dim, train)?,
        DatasetSplit::new(cfg.vocab_size, names, cfg.q_dim, cfg.v_dim, test)?,
    ))
}

/// Total-variation distance between two distributions.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
