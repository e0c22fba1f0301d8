//! Acceptance suite. Each criterion prints one `PASS` or `FAIL` line with
//! the measured numbers; the process exits non-zero if any criterion fails.
//!
//! Runs without the test harness so the lines always reach the terminal and
//! the training-heavy criteria run one after another. Positional arguments
//! select criteria by substring.

use std::time::{Duration, Instant};

use cacti::checkpoint::Checkpoint;
use cacti::dataset::{apply_scaler, fit_scaler, Table};
use cacti::imputation::{impute, ImputeOptions};
use cacti::masking::{mtcm_build_batch, naive_copy_mask, naive_copy_mask_with_permutation};
use cacti::metrics::{r_squared, MeanImputer, MetricsReport, RmseScale};
use cacti::missingness::{missing_rate, simulate_mar, simulate_mcar, simulate_mnar, Mechanism};
use cacti::model::{EncoderInput, LossMode, Model, ModelConfig, ModelHyper};
use cacti::rng;
use cacti::training::{adamw_update, lr_at, train, AdamWParams, TrainConfig};
use cacti_cli::benchmark::{
    eval_mask, load_inputs, prepare_cell, run_benchmark, run_method, BenchmarkConfig, Inputs, Method, PreparedCell,
};
use cacti_cli::synthetic::{equicorrelated_gaussian, gaussian_table, GaussianSpec};
use ndarray::{array, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// ---------------------------------------------------------------- masking

const MASKING_BATCHES: usize = 1000;

fn masking_invariants() -> Verdict {
    let start = Instant::now();
    let mut s = rng::stream(2024);
    let mut violations = Vec::new();
    let mut worst_pad: f64 = 0.0;
    for trial in 0..MASKING_BATCHES {
        let b = s.random_range(1..=64);
        let k = s.random_range(2..=32);
        let rate = s.random_range(0.0..0.9);
        let mut observed = Array2::from_shape_fn((b, k), |_| s.random::<f64>() >= rate);
        for mut row in observed.rows_mut() {
            if !row.iter().any(|&o| o) {
                let j = s.random_range(0..k);
                row[j] = true;
            }
        }
        let p_cm = s.random_range(0.0..1.0);
        let copy = naive_copy_mask(&observed, p_cm, &mut s).unwrap();
        let ids: Vec<usize> = (0..b).collect();
        let batch = mtcm_build_batch(&ids, observed.view(), copy.view(), &mut s).unwrap();
        worst_pad = worst_pad.max(batch.pad_fraction());
        if batch.pad_fraction() > 0.5 {
            violations.push(format!("batch {trial}: pad fraction {}", batch.pad_fraction()));
        }
        for n in 0..b {
            let (kept, masked) = (&batch.observed_sets[n], &batch.masked_sets[n]);
            if kept.is_empty() {
                violations.push(format!("batch {trial} row {n}: empty observed set"));
            }
            if kept.iter().chain(masked).any(|&c| !observed[[n, c]]) {
                violations.push(format!("batch {trial} row {n}: set outside observed cells"));
            }
            if kept.len() + batch.pad_counts[n] != batch.seq_len {
                violations.push(format!("batch {trial} row {n}: kept + pad != median"));
            }
        }
    }
    let elapsed = start.elapsed();
    let mut detail = format!(
        "{MASKING_BATCHES} batches, {} violations, max pad fraction {worst_pad:.3}, {}",
        violations.len(),
        secs(elapsed)
    );
    if let Some(first) = violations.first() {
        detail.push_str(&format!(" (first: {first})"));
    }
    Verdict::new(violations.is_empty() && elapsed < Duration::from_secs(30), detail)
}

fn copy_mask_golden() -> Verdict {
    let observed = array![[true, true], [true, false]];
    let out = naive_copy_mask_with_permutation(&observed, &[1, 0], 1.0, &mut rng::stream(0)).unwrap();
    let golden = out == array![[true, false], [true, true]];

    let mut s = rng::stream(77);
    let mut identity = 0;
    for _ in 0..100 {
        let (n, k) = (s.random_range(1..40), s.random_range(1..12));
        let mut m = Array2::from_shape_fn((n, k), |_| s.random::<bool>());
        for mut row in m.rows_mut() {
            row[0] = true;
        }
        if naive_copy_mask(&m, 0.0, &mut s).unwrap() == m {
            identity += 1;
        }
    }
    Verdict::new(
        golden && identity == 100,
        format!("2x2 example exact: {golden}; p_cm=0 identity on {identity}/100 masks"),
    )
}

// --------------------------------------------------------------- gradient

const GRAD_PROBES: usize = 100;
const GRAD_H: f64 = 1e-5;
const GRAD_MAX_REL: f64 = 1e-4;
const GRAD_REL_FLOOR: f64 = 1e-6;

fn gradient_check() -> Verdict {
    let start = Instant::now();
    let cfg = ModelConfig::new(
        4,
        6,
        ModelHyper {
            embed_dim: 8,
            enc_depth: 1,
            dec_depth: 1,
            heads: 2,
            ..ModelHyper::default()
        },
    )
    .unwrap();
    let mut s = rng::stream(31);
    let ctx = Array2::from_shape_fn((4, 6), |_| s.random_range(-1.0..1.0));
    let mut model = Model::<f64>::new(cfg, Some(&ctx), 31).unwrap();
    let noise = Normal::new(0.0, 0.3).unwrap();
    for t in model.params.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v += noise.sample(&mut s));
    }
    let values = array![[0.2, 0.7, 0.1, 0.9], [0.5, 0.3, 0.8, 0.4], [0.6, 0.1, f64::NAN, 0.3]];
    let tokens = vec![vec![2, 0], vec![3, 1], vec![1]];
    let masked = vec![vec![1, 3], vec![0], vec![0, 3]];
    let input = EncoderInput::new(values.view(), tokens, 2).unwrap();
    let loss = |m: &Model<f64>| {
        m.loss_and_gradients(&input, &input.values, &masked, LossMode::Both)
            .unwrap()
            .0
    };
    let (_, grad) = model
        .loss_and_gradients(&input, &input.values, &masked, LossMode::Both)
        .unwrap();
    let flat: Vec<f64> = grad.tensors().iter().flat_map(|t| t.data.to_vec()).collect();

    let mut worst: f64 = 0.0;
    for _ in 0..GRAD_PROBES {
        let idx = s.random_range(0..flat.len());
        let shifted = |delta: f64| {
            let mut m = model.clone();
            let mut seen = 0;
            for t in m.params.tensors_mut() {
                if idx < seen + t.data.len() {
                    t.data[idx - seen] += delta;
                    break;
                }
                seen += t.data.len();
            }
            loss(&m)
        };
        let numeric = (shifted(GRAD_H) - shifted(-GRAD_H)) / (2.0 * GRAD_H);
        let denom = flat[idx].abs().max(numeric.abs()).max(GRAD_REL_FLOOR);
        worst = worst.max((flat[idx] - numeric).abs() / denom);
    }
    let elapsed = start.elapsed();
    Verdict::new(
        worst < GRAD_MAX_REL && elapsed < Duration::from_secs(60),
        format!("{GRAD_PROBES} probes, max relative error {worst:.2e}, {}", secs(elapsed)),
    )
}

// -------------------------------------------------------------- simulator

fn simulator_rates() -> Verdict {
    let mcar = simulate_mcar(125_000, 8, 0.3, 5).unwrap();
    let mcar_rate = missing_rate(&mcar, &(0..8).collect::<Vec<_>>());

    let x = equicorrelated_gaussian(&GaussianSpec { n_rows: 10_000, n_cols: 8, rho: 0.5 }, 6).unwrap();
    let maskable_rate = |sim: &cacti::missingness::Simulation| {
        let cols: Vec<usize> = (0..8).filter(|j| !sim.input_columns.contains(j)).collect();
        missing_rate(&sim.mask, &cols)
    };
    let mar = simulate_mar(&x, 0.3, 0.3, 7).unwrap();
    let mnar = simulate_mnar(&x, 0.3, 0.3, 8).unwrap();
    let (mar_rate, mnar_rate) = (maskable_rate(&mar), maskable_rate(&mnar));
    let mar_inputs = missing_rate(&mar.mask, &mar.input_columns);

    let pass = (mcar_rate - 0.3).abs() <= 0.01
        && (mar_rate - 0.3).abs() <= 0.03
        && (mnar_rate - 0.3).abs() <= 0.03
        && mar_inputs == 0.0;
    Verdict::new(
        pass,
        format!(
            "MCAR {mcar_rate:.4} over 1e6 cells; MAR maskable {mar_rate:.4}; MNAR maskable {mnar_rate:.4}; \
             MAR input columns {mar_inputs}"
        ),
    )
}

// ---------------------------------------------------------- mean baseline

fn mean_baseline() -> Verdict {
    let truth = gaussian_table(&GaussianSpec { n_rows: 2000, n_cols: 8, rho: 0.5 }, 12).unwrap();
    let mut mask = simulate_mcar(2000, 8, 0.3, 13).unwrap();
    for mut row in mask.rows_mut() {
        if !row.iter().any(|&o| o) {
            row[0] = true;
        }
    }
    let corrupted = cacti::missingness::apply_mask(&truth, &mask).unwrap();
    let filled = MeanImputer::fit(&corrupted).unwrap().apply(&corrupted).unwrap();
    let eval = eval_mask(&truth, &corrupted);
    let names = truth.column_names();
    let report = MetricsReport::compute(&names, &truth.values, &filled.values, &eval, RmseScale::Standardized, None)
        .unwrap();
    let rmse = report.rmse_standardized.unwrap_or(f64::NAN);
    let pass = report.r2_mean == 0.0 && (0.9..=1.05).contains(&rmse) && report.n_eval >= 3000;
    Verdict::new(
        pass,
        format!("R2 {} standardized RMSE {rmse:.4} n_eval {}", report.r2_mean, report.n_eval),
    )
}

// ------------------------------------------------------ training criteria

const SEEDS: u64 = 5;

fn recovery_config(seed: u64, mechanism: Mechanism) -> BenchmarkConfig {
    BenchmarkConfig::from_json(&format!(
        r#"{{
            "root_seed": {seed},
            "data": {{"synthetic": {{"n_rows": 2000, "n_cols": 8, "rho": 0.9}}}},
            "context": {{"synthetic": {{"dim": 16}}}},
            "mechanisms": ["{mechanism}"],
            "p_miss": [0.3],
            "methods": ["cacti"],
            "train": {{"epochs": 150, "warmup_epochs": 25}},
            "model": {{"embed_dim": 32, "enc_depth": 4, "dec_depth": 2}}
        }}"#,
        mechanism = mechanism.to_string().to_lowercase()
    ))
    .unwrap()
}

struct RecoveryCell {
    cfg: BenchmarkConfig,
    inputs: Inputs,
    cell: PreparedCell,
}

fn recovery_cell(seed: u64, mechanism: Mechanism) -> RecoveryCell {
    let cfg = recovery_config(seed, mechanism);
    let inputs = load_inputs(&cfg).unwrap();
    let cell = prepare_cell(&cfg, &inputs, mechanism, 0.3, 0).unwrap();
    RecoveryCell { cfg, inputs, cell }
}

fn test_r2(rc: &RecoveryCell, method: Method, loss_mode: LossMode) -> f64 {
    let train_cfg = TrainConfig {
        loss_mode,
        ..rc.cfg.train
    };
    let out = run_method(
        &rc.cell,
        method,
        rc.inputs.context.as_ref(),
        &train_cfg,
        &rc.cfg.model,
        RmseScale::Standardized,
    )
    .unwrap();
    out.test.r2_mean
}

/// Conditional mean of each hidden cell given the row's observed cells for
/// standard-normal columns with common correlation `rho`.
fn gaussian_oracle(corrupted: &Table, rho: f64) -> Array2<f64> {
    let mut out = corrupted.values.clone();
    for (i, row) in corrupted.observed.rows().into_iter().enumerate() {
        let m = row.iter().filter(|&&o| o).count() as f64;
        let sum: f64 = (0..row.len()).filter(|&k| row[k]).map(|k| corrupted.values[[i, k]]).sum();
        let fill = rho / (1.0 + (m - 1.0) * rho) * sum;
        for k in (0..row.len()).filter(|&k| !row[k]) {
            out[[i, k]] = fill;
        }
    }
    out
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn synthetic_recovery(both: &mut Vec<f64>) -> Verdict {
    let start = Instant::now();
    let mut oracle = Vec::new();
    for seed in 0..SEEDS {
        let rc = recovery_cell(seed, Mechanism::Mcar);
        both.push(test_r2(&rc, Method::Cacti, LossMode::Both));
        let test = &rc.cell.corrupted_test;
        let pred = gaussian_oracle(test, 0.9);
        let eval = eval_mask(&rc.cell.truth_test, test);
        oracle.push(r_squared(&rc.cell.truth_test.values, &pred, &eval).unwrap().1);
    }
    let elapsed = start.elapsed();
    let mean = both.iter().sum::<f64>() / both.len() as f64;
    let above = both.iter().filter(|&&r| r >= 0.45).count();
    let oracle_mean = oracle.iter().sum::<f64>() / oracle.len() as f64;
    Verdict::new(
        mean >= 0.5 && above >= 4 && elapsed < Duration::from_secs(600),
        format!(
            "test R2 per seed [{}] mean {mean:.3}, {above}/5 >= 0.45; oracle [{}] mean {oracle_mean:.3}; {}",
            fmt_list(both),
            fmt_list(&oracle),
            secs(elapsed)
        ),
    )
}

fn loss_mode_ordering(both: &[f64]) -> Verdict {
    let (mut observed, mut masked) = (Vec::new(), Vec::new());
    for seed in 0..SEEDS {
        let rc = recovery_cell(seed, Mechanism::Mcar);
        observed.push(test_r2(&rc, Method::Cacti, LossMode::Observed));
        masked.push(test_r2(&rc, Method::Cacti, LossMode::Masked));
    }
    let wins = (0..SEEDS as usize)
        .filter(|&i| observed[i] < masked[i] && observed[i] < both[i])
        .count();
    Verdict::new(
        wins >= 4,
        format!(
            "observed [{}] masked [{}] both [{}]; observed worst on {wins}/5 seeds",
            fmt_list(&observed),
            fmt_list(&masked),
            fmt_list(both)
        ),
    )
}

fn mtcm_vs_naive_mnar() -> Verdict {
    let (mut mtcm, mut naive) = (Vec::new(), Vec::new());
    for seed in 0..SEEDS {
        let rc = recovery_cell(seed, Mechanism::Mnar);
        mtcm.push(test_r2(&rc, Method::Cacti, LossMode::Both));
        naive.push(test_r2(&rc, Method::NaiveCm, LossMode::Both));
    }
    let wins = (0..SEEDS as usize).filter(|&i| mtcm[i] >= naive[i]).count();
    Verdict::new(
        wins >= 3,
        format!(
            "MNAR test R2 MT-CM [{}] naive [{}]; MT-CM >= naive on {wins}/5 seeds",
            fmt_list(&mtcm),
            fmt_list(&naive)
        ),
    )
}

// ------------------------------------------------------------ determinism

fn determinism_and_round_trip() -> Verdict {
    let cfg = BenchmarkConfig::from_json(
        r#"{"root_seed": 21,
            "data": {"synthetic": {"n_rows": 120, "n_cols": 5, "rho": 0.7}},
            "context": {"synthetic": {"dim": 6}},
            "mechanisms": ["mcar", "mnar"], "p_miss": [0.3],
            "methods": ["cacti", "cmae", "rmae", "mean"], "repeats": 2,
            "train": {"epochs": 3, "warmup_epochs": 1, "batch_size": 32},
            "model": {"embed_dim": 8, "enc_depth": 1, "dec_depth": 1, "heads": 2}}"#,
    )
    .unwrap();
    let first = run_benchmark(&cfg).unwrap().to_json().unwrap();
    let second = run_benchmark(&cfg).unwrap().to_json().unwrap();
    let same_json = first == second;

    let truth = gaussian_table(&GaussianSpec { n_rows: 200, n_cols: 6, rho: 0.6 }, 4).unwrap();
    let mut mask = simulate_mcar(200, 6, 0.3, 9).unwrap();
    for mut row in mask.rows_mut() {
        row[0] = true;
    }
    let corrupted = cacti::missingness::apply_mask(&truth, &mask).unwrap();
    let scaler = fit_scaler(&corrupted).unwrap();
    let scaled = apply_scaler(&corrupted, &scaler).unwrap();
    let model_cfg = ModelConfig::new(
        6,
        0,
        ModelHyper {
            embed_dim: 16,
            enc_depth: 2,
            dec_depth: 1,
            heads: 4,
            ..ModelHyper::default()
        },
    )
    .unwrap();
    let train_cfg = TrainConfig {
        epochs: 4,
        warmup_epochs: 1,
        batch_size: 64,
        ..TrainConfig::default()
    };
    let outcome = train(&scaled, None, model_cfg, &train_cfg).unwrap();
    let ck = Checkpoint::new(corrupted.schema.clone(), scaler, outcome.model).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let opts = ImputeOptions::default();
    let (a, b) = (impute(&corrupted, &ck, &opts).unwrap(), impute(&corrupted, &loaded, &opts).unwrap());
    let bits = |t: &Table| t.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let same_imputation = bits(&a) == bits(&b);
    let preserved = corrupted
        .observed
        .indexed_iter()
        .filter(|(_, &o)| o)
        .all(|(ix, _)| a.values[ix].to_bits() == corrupted.values[ix].to_bits());

    Verdict::new(
        same_json && same_imputation && preserved,
        format!(
            "benchmark JSON identical: {same_json}; save/load imputations bitwise equal: {same_imputation}; \
             observed cells preserved: {preserved}"
        ),
    )
}

// ------------------------------------------------------- schedule, AdamW

fn scheduler_and_optimizer() -> Verdict {
    let cfg = TrainConfig::default();
    let spe = 13;
    let total = cfg.epochs * spe;
    let (start, peak, end) = (
        lr_at(0, spe, &cfg),
        lr_at(cfg.warmup_epochs * spe, spe, &cfg),
        lr_at(total - 1, spe, &cfg),
    );
    let schedule = start == 0.0 && (peak - 1e-3).abs() < 1e-15 && (end - 1e-5).abs() < 1e-15;

    // Step 1: m_hat = g and v_hat = g^2, so the update is lr * g / (|g| + eps).
    let hp = AdamWParams {
        lr: 1e-3,
        beta1: 0.9,
        beta2: 0.95,
        eps: 1e-8,
        weight_decay: 0.05,
    };
    let (mut p, mut m, mut v) = ([1.0f64, -2.0], [0.0; 2], [0.0; 2]);
    adamw_update(&mut p, &[0.5, -0.25], &mut m, &mut v, 1, &hp, true);
    let expect = [
        1.0 - 1e-3 * (0.05 * 1.0 + 0.5 / (0.5 + 1e-8)),
        -2.0 - 1e-3 * (0.05 * -2.0 - 0.25 / (0.25 + 1e-8)),
    ];
    let err = p.iter().zip(expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Verdict::new(
        schedule && err < 1e-12,
        format!("lr start {start:e} warmup end {peak:e} final {end:e}; AdamW step error {err:.1e}"),
    )
}

fn report(name: &str, v: Verdict, results: &mut Vec<bool>) {
    println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    results.push(v.pass);
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let quick: [(&str, fn() -> Verdict); 7] = [
        ("masking_invariants", masking_invariants),
        ("copy_mask_golden", copy_mask_golden),
        ("gradient_check", gradient_check),
        ("simulator_rates", simulator_rates),
        ("mean_baseline", mean_baseline),
        ("determinism_and_round_trip", determinism_and_round_trip),
        ("scheduler_and_optimizer", scheduler_and_optimizer),
    ];
    let mut results = Vec::new();
    for (name, f) in quick {
        if wanted(name) {
            report(name, f(), &mut results);
        }
    }

    let mut both = Vec::new();
    if wanted("synthetic_recovery") {
        report("synthetic_recovery", synthetic_recovery(&mut both), &mut results);
    }
    if wanted("loss_mode_ordering") {
        if both.is_empty() {
            for seed in 0..SEEDS {
                both.push(test_r2(&recovery_cell(seed, Mechanism::Mcar), Method::Cacti, LossMode::Both));
            }
        }
        report("loss_mode_ordering", loss_mode_ordering(&both), &mut results);
    }
    if wanted("mtcm_vs_naive_mnar") {
        report("mtcm_vs_naive_mnar", mtcm_vs_naive_mnar(), &mut results);
    }

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
