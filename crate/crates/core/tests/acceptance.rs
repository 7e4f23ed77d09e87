//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Tolerances are fixed here and must not be loosened.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use pwvqa::causal::{decompose, CounterfactualConstant, InferenceRule};
use pwvqa::datagen::io::{export_logits, import_logits, LogitRecord, LogitsHeader};
use pwvqa::datagen::{generate, GenConfig, SyntheticSample};
use pwvqa::fusion::{CfMode, Fusion, FusionConfig, Strategy};
use pwvqa::metrics::evaluate;
use pwvqa::model::{loss_final, train, EncoderParams, ModelShape, Objective, TrainConfig, Trainer};
use pwvqa::BranchLogits;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use tempfile::TempDir;

const DECOMPOSITION_TOL: f64 = 1e-12;
const DECOMPOSITION_BUDGET: Duration = Duration::from_secs(1);
const SYMMETRIC_POINT_TOL: f64 = 1e-9;
const SATURATION_TOL: f64 = 1e-6;
const GRADIENT_STEP: f64 = 1e-5;
const GRADIENT_REL_TOL: f64 = 1e-4;
const GRADIENT_BUDGET: Duration = Duration::from_secs(10);
const MAX_GRADIENT_PARAMS: usize = 500;
const DEBIAS_SEEDS: u64 = 10;
const DEBIAS_MIN_JS_WINS: usize = 8;
const DEBIAS_BUDGET: Duration = Duration::from_secs(20 * 60);
const ROUND_TRIP_TOL: f64 = 1e-12;
const FUSE_TOL: f64 = 1e-9;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_branch(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> BranchLogits {
    let mut v = || (0..n).map(|_| rng.gen_range(-scale..scale)).collect::<Vec<f64>>();
    BranchLogits::from_vecs(v(), v(), v()).unwrap()
}

fn decomposition_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let strategy = Strategy::ALL[i % 4];
        let mode = CfMode::ALL[(i / 4) % 2];
        let n = rng.gen_range(1..=8);
        let branch = random_branch(&mut rng, n, 20.0);
        let alpha = rng.gen_range(1.0..3.0);
        let epsilon = 10f64.powf(rng.gen_range(-12.0..-6.0));
        let cfg = FusionConfig::new(strategy, alpha, epsilon, mode).map_err(|e| e.to_string())?;
        let c = CounterfactualConstant::new(rng.gen_range(-5.0..5.0)).unwrap();
        let d = decompose(&branch, c, &cfg).map_err(|e| e.to_string())?;
        for j in 0..n {
            worst = worst.max((d.te[j] - (d.nde[j] + d.tie[j])).abs());
        }
    }
    let elapsed = start.elapsed();
    check(
        worst <= DECOMPOSITION_TOL && elapsed < DECOMPOSITION_BUDGET,
        format!("1000 cases, max |TE-(NDE+TIE)| = {worst:.2e} (tol {DECOMPOSITION_TOL:e}), {elapsed:.2?}"),
    )
}

fn ea_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut asymmetric = 0;
    for _ in 0..100 {
        let h = Fusion::ea(rng.gen_range(1.0..3.0), 5e-11);
        let [a, b, c]: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-10.0..10.0));
        let base = h.value(a, b, c).to_bits();
        for (x, y, z) in [(a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)] {
            asymmetric += usize::from(h.value(x, y, z).to_bits() != base);
        }
    }
    let sym = Fusion::ea(1.0, 0.0).value(0.0, 0.0, 0.0);
    let sym_err = (sym - (3.0f64 / 32.0).ln() / 2.0).abs();
    let mut sat_err: f64 = 0.0;
    for alpha in [1.0, 1.5, 2.0, 3.0] {
        let v = Fusion::ea(alpha, 5e-11).value(40.0, 40.0, 40.0);
        sat_err = sat_err.max((v - 3f64.ln() / (alpha + 1.0)).abs());
    }
    let floor_finite = Fusion::ea(1.5, 5e-11).value(-40.0, -40.0, -40.0).is_finite();
    check(
        asymmetric == 0 && sym_err <= SYMMETRIC_POINT_TOL && sat_err <= SATURATION_TOL && floor_finite,
        format!(
            "{asymmetric} asymmetric permutations of 100 triples; symmetric point error {sym_err:.2e} \
             (tol {SYMMETRIC_POINT_TOL:e}); saturation error {sat_err:.2e} (tol {SATURATION_TOL:e})"
        ),
    )
}

fn gradient_fidelity() -> Outcome {
    let shape = ModelShape { vocab: 4, q_dim: 3, v_dim: 3, hidden: 4 };
    let n = EncoderParams::zeros(shape).num_params();
    if n + 1 > MAX_GRADIENT_PARAMS {
        return Err(format!("model has {} parameters", n + 1));
    }
    let gen = GenConfig { vocab_size: 4, q_dim: 3, v_dim: 3, train_size: 8, test_size: 3, seed: 3, ..GenConfig::default() };
    let data = generate(&gen).unwrap().0;
    let batch: Vec<&SyntheticSample> = data.samples.iter().take(4).collect();
    let fusion = FusionConfig::default().kernel();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut near_zero = 0;
    for _ in 0..10 {
        let flat: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: f64 = rng.gen_range(-2.0..2.0);
        let loss = |flat: &[f64], c: f64| {
            let p = EncoderParams::from_flat(shape, flat).unwrap();
            loss_final(&p, CounterfactualConstant::new(c).unwrap(), &fusion, &batch, true).unwrap()
        };
        let analytic = loss(&flat, c).full();
        for i in 0..=n {
            let (up, down) = if i < n {
                let (mut a, mut b) = (flat.clone(), flat.clone());
                a[i] += GRADIENT_STEP;
                b[i] -= GRADIENT_STEP;
                (loss(&a, c), loss(&b, c))
            } else {
                (loss(&flat, c + GRADIENT_STEP), loss(&flat, c - GRADIENT_STEP))
            };
            let fd = (up.loss.total() - down.loss.total()) / (2.0 * GRADIENT_STEP);
            let scale = analytic[i].abs().max(fd.abs());
            if scale > 1e-10 {
                worst = worst.max((analytic[i] - fd).abs() / scale);
            } else {
                near_zero += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        worst <= GRADIENT_REL_TOL && elapsed < GRADIENT_BUDGET,
        format!(
            "{} parameters x 10 points, max relative error {worst:.2e} (tol {GRADIENT_REL_TOL:e}), \
             {near_zero} entries below 1e-10, {elapsed:.2?}",
            n + 1
        ),
    )
}

fn kl_routing() -> Outcome {
    let gen = GenConfig { train_size: 64, test_size: 3, seed: 4, ..GenConfig::default() };
    let data = generate(&gen).unwrap().0;
    let shape = ModelShape { vocab: 8, q_dim: 16, v_dim: 16, hidden: 8 };
    let params = EncoderParams::init(shape, &mut ChaCha8Rng::seed_from_u64(4));
    let mut trainer = Trainer::new(params.clone(), 0.0, &TrainConfig::default());
    let batch: Vec<&SyntheticSample> = data.samples.iter().collect();
    trainer.step(&batch, Objective::KlOnly).map_err(|e| e.to_string())?;
    let changed = params
        .flatten()
        .iter()
        .zip(trainer.params.flatten())
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .count();
    check(
        changed == 0 && trainer.c != 0.0,
        format!("{changed} of {} encoder parameters changed; c 0 -> {:e}", params.num_params(), trainer.c),
    )
}

struct SeedResult {
    acc: [f64; 4],
    js: [f64; 4],
}

fn debiasing_effect() -> Outcome {
    let start = Instant::now();
    let results: Vec<Result<SeedResult, String>> = (0..DEBIAS_SEEDS)
        .into_par_iter()
        .map(|seed| {
            let (train_split, test) = generate(&GenConfig { seed, ..GenConfig::default() }).map_err(|e| e.to_string())?;
            let model = train(&train_split, &TrainConfig { seed, ..TrainConfig::default() })
                .map_err(|e| e.to_string())?
                .model;
            let mut r = SeedResult { acc: [0.0; 4], js: [0.0; 4] };
            for (i, rule) in InferenceRule::ALL.into_iter().enumerate() {
                let rep = evaluate(|s| model.predict(s, rule), &test).map_err(|e| e.to_string())?;
                r.acc[i] = rep.acc_all;
                r.js[i] = rep.js_divergence_to_test;
            }
            Ok(r)
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let elapsed = start.elapsed();
    let mean = |i: usize| results.iter().map(|r| r.acc[i]).sum::<f64>() / results.len() as f64;
    let (tie, te, fused, q) = (mean(0), mean(1), mean(2), mean(3));
    let js_wins = results.iter().filter(|r| r.js[0] < r.js[1]).count();
    check(
        tie > te && tie > q && js_wins >= DEBIAS_MIN_JS_WINS && elapsed < DEBIAS_BUDGET,
        format!(
            "mean acc over {DEBIAS_SEEDS} seeds: TIE {tie:.4}, TE {te:.4}, FUSED {fused:.4}, Q {q:.4}; \
             JS(TIE) < JS(TE) in {js_wins}/{DEBIAS_SEEDS} (need {DEBIAS_MIN_JS_WINS}); {elapsed:.1?}"
        ),
    )
}

fn pwvqa(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pwvqa"))
        .args(args)
        .env_remove("PWVQA_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Data rows of a results CSV; every column after `rule` must be finite.
fn finite_rows(path: &Path) -> Result<usize, String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty results")?.split(',').collect();
    let first = header.iter().position(|h| *h == "c").ok_or("no c column")?;
    let mut rows = 0;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(format!("ragged row {line:?}"));
        }
        for cell in &cells[first..] {
            match cell.parse::<f64>() {
                Ok(x) if x.is_finite() => {}
                _ => return Err(format!("non-finite cell {cell:?}")),
            }
        }
        rows += 1;
    }
    Ok(rows)
}

fn sweep_shape() -> Outcome {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    pwvqa(&["gen-data", "--out", p(&data)])?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).to_string();
    let alpha_out = dir.path().join("alpha");
    pwvqa(&["sweep", "--data", p(&data), "--out", p(&alpha_out), "--grid-alpha", "1.0:2.0:0.1", "--workers", &workers])?;
    let eps_out = dir.path().join("epsilon");
    pwvqa(&[
        "sweep", "--data", p(&data), "--out", p(&eps_out),
        "--grid-epsilon", "1e-12,5e-12,1e-11,5e-11,1e-10,5e-10,1e-9,5e-9", "--workers", &workers,
    ])?;
    let alpha_rows = finite_rows(&alpha_out.join("results.csv"))?;
    let eps_rows = finite_rows(&eps_out.join("results.csv"))?;
    check(
        alpha_rows == 11 && eps_rows == 8,
        format!("alpha sweep {alpha_rows} rows (want 11), epsilon sweep {eps_rows} rows (want 8), all cells finite"),
    )
}

/// `TIE_a = h(zq, zv, zk) - h(zq, c, c)` with EA written out directly.
fn scalar_tie(q: f64, v: f64, k: f64, c: f64, alpha: f64, eps: f64) -> f64 {
    let s = |x: f64| 1.0 / (1.0 + (-x).exp());
    let h = |q: f64, v: f64, k: f64| {
        let (sq, sv, sk) = (s(q), s(v), s(k));
        let z = sq.powf(alpha) * sv.powf(alpha + 1.0) * sk.powf(alpha + 1.0)
            + sq.powf(alpha + 1.0) * sv.powf(alpha) * sk.powf(alpha + 1.0)
            + sq.powf(alpha + 1.0) * sv.powf(alpha + 1.0) * sk.powf(alpha);
        (z + eps).ln() / (alpha + 1.0)
    };
    h(q, v, k) - h(q, c, c)
}

fn interop() -> Outcome {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let vocab = 6;
    let records: Vec<LogitRecord> = (0..100)
        .map(|i| LogitRecord {
            id: i,
            qtype: rng.gen_range(0..3),
            label: rng.gen_range(0..vocab),
            branch: random_branch(&mut rng, vocab, 50.0),
        })
        .collect();
    let header = LogitsHeader { vocab, qtypes: vec!["a".into(), "b".into(), "c".into()] };
    let path = dir.path().join("logits.jsonl");
    export_logits(&path, &header, &records).map_err(|e| e.to_string())?;
    let back = import_logits(&path).map_err(|e| e.to_string())?;
    let mut round_trip_err: f64 = 0.0;
    for (a, b) in records.iter().zip(&back.records) {
        if (a.id, a.qtype, a.label) != (b.id, b.qtype, b.label) {
            return Err(format!("record {} metadata changed", a.id));
        }
        let (x, y) = (a.branch.require_factual().unwrap(), b.branch.require_factual().unwrap());
        for (u, w) in [(x.0, y.0), (x.1, y.1), (x.2, y.2)] {
            for (p, q) in u.iter().zip(w.iter()) {
                round_trip_err = round_trip_err.max((p - q).abs());
            }
        }
    }
    let count_ok = back.records.len() == records.len();

    let (zq, zv, zk) = ([0.4, -1.1, 0.9], [1.5, 0.2, -0.3], [-0.6, 2.2, 0.8]);
    let one = LogitRecord {
        id: 0,
        qtype: 0,
        label: 1,
        branch: BranchLogits::from_vecs(zq.to_vec(), zv.to_vec(), zk.to_vec()).unwrap(),
    };
    let one_path = dir.path().join("one.jsonl");
    export_logits(&one_path, &LogitsHeader { vocab: 3, qtypes: vec!["a".into()] }, &[one]).map_err(|e| e.to_string())?;
    let out = dir.path().join("fuse");
    pwvqa(&["fuse", "--data", p(&one_path), "--out", p(&out), "--c", "-0.5", "--rule", "tie"])?;
    let scores = fs::read_to_string(out.join("scores.csv")).map_err(|e| e.to_string())?;
    let row: Vec<&str> = scores.lines().nth(1).ok_or("no score row")?.split(',').collect();
    let mut fuse_err: f64 = 0.0;
    for a in 0..3 {
        let got: f64 = row[3 + a].parse().map_err(|_| format!("bad score {:?}", row[3 + a]))?;
        fuse_err = fuse_err.max((got - scalar_tie(zq[a], zv[a], zk[a], -0.5, 1.5, 5e-11)).abs());
    }
    check(
        count_ok && round_trip_err <= ROUND_TRIP_TOL && fuse_err <= FUSE_TOL,
        format!(
            "100-record round trip max error {round_trip_err:.2e} (tol {ROUND_TRIP_TOL:e}); \
             fuse TIE vs scalar evaluation {fuse_err:.2e} (tol {FUSE_TOL:e})"
        ),
    )
}

fn dir_contents(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        files.push((name, fs::read(&path).map_err(|e| e.to_string())?));
    }
    files.sort();
    Ok(files)
}

fn determinism() -> Outcome {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let mut compared = Vec::new();
    for run in ["a", "b"] {
        let root = dir.path().join(run);
        let data = root.join("data");
        let model = root.join("model");
        let eval = root.join("eval");
        let sweep = root.join("sweep");
        let fuse = root.join("fuse");
        pwvqa(&["gen-data", "--out", p(&data), "--seed", "5", "--train-size", "400", "--test-size", "200"])?;
        pwvqa(&["train", "--data", p(&data), "--out", p(&model), "--seed", "5", "--epochs", "3"])?;
        pwvqa(&["eval", "--data", p(&data), "--checkpoint", p(&model.join("checkpoint.json")), "--out", p(&eval)])?;
        pwvqa(&[
            "sweep", "--data", p(&data), "--out", p(&sweep), "--grid-alpha", "1.0:2.0:0.5", "--seeds", "1,2",
            "--epochs", "2", "--workers", "3",
        ])?;
        let logits = root.join("logits.jsonl");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let records: Vec<LogitRecord> = (0..50)
            .map(|i| LogitRecord { id: i, qtype: 0, label: (i % 4) as usize, branch: random_branch(&mut rng, 4, 5.0) })
            .collect();
        export_logits(&logits, &LogitsHeader { vocab: 4, qtypes: vec!["a".into()] }, &records).map_err(|e| e.to_string())?;
        pwvqa(&["fuse", "--data", p(&logits), "--out", p(&fuse), "--c", "0.3"])?;
        let mut all = Vec::new();
        for d in [&data, &model, &eval, &sweep, &fuse] {
            all.extend(dir_contents(d)?);
        }
        compared.push(all);
    }
    let files = compared[0].len();
    let differing: Vec<&str> = compared[0]
        .iter()
        .zip(&compared[1])
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.as_str())
        .collect();
    check(
        differing.is_empty() && compared[0].len() == compared[1].len(),
        format!("{files} output files of gen-data/train/eval/sweep/fuse compared byte-for-byte; differing: {differing:?}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("decomposition identity", decomposition_identity),
        ("EA algebra", ea_algebra),
        ("gradient fidelity", gradient_fidelity),
        ("KL routing", kl_routing),
        ("debiasing effect", debiasing_effect),
        ("sweep harness shape", sweep_shape),
        ("interop", interop),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
