//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use common::{gradient_instance, least_squares, nonlinear_target, prepared_synthetic, synthetic_samples};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sonuts_core::artifact::{Provenance, TrainedModel};
use sonuts_core::external::{grid_products, predict_external_table, write_prediction_csv, ApplyDefaults, CellSize, ExternalRow, SourceTag};
use sonuts_core::features::{build_feature_matrix, kfold_split, prepare, write_matrix_csv, SplitSpec, Target, N_FEATURES};
use sonuts_core::hydro::{write_hydro_table, Field};
use sonuts_core::nn::{gradient_check, init_mlp, MlpConfig};
use sonuts_core::par::Exec;
use sonuts_core::projection::{inverse_aps, project_aps};
use sonuts_core::training::{cross_validate_train, cross_validate_train_with, train_linear_baseline, TrainOptions};
use sonuts_core::uncertainty::{mc_dropout_predict_with, summarize_interval};
use sonuts_core::{apply_qc_filter, filter_southern_ocean, parse_hydro_table, ColumnMap, QcPolicy};
use std::collections::BTreeSet;
use std::time::Instant;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let mut nn = 0.0f64;
    let mut lin = 0.0f64;
    for seed in 0..100 {
        let (m, x, y, masks) = gradient_instance(1000 + seed, false, 1e-3);
        nn = nn.max(gradient_check(&m, &x, &y, masks.as_deref(), 1e-5));
        let (m, x, y, masks) = gradient_instance(2000 + seed, true, 0.0);
        lin = lin.max(gradient_check(&m, &x, &y, masks.as_deref(), 1e-5));
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        nn < 1e-4 && lin < 1e-7 && secs < 60.0,
        format!("100 instances each: max rel err nn={nn:.2e} (<1e-4) linear={lin:.2e} (<1e-7), {secs:.1}s"),
    )
}

fn linear_equivalence() -> Outcome {
    let coef = [0.01, -0.2, 0.0, 0.05, 0.0];
    let data = prepared_synthetic(1000, 5, 0.0, |s| {
        1.0 + coef[0] * s.pressure.unwrap() + coef[1] * s.temperature.unwrap() + coef[3] * s.oxygen.unwrap()
    });
    let opts = TrainOptions {
        lr: 0.05,
        batch_size: usize::MAX,
        max_epochs: 3000,
        patience: 100_000,
    };
    let spec = SplitSpec { seed: 5, ..SplitSpec::default() };
    let (model, rep) = train_linear_baseline(&data, Target::Silicate, &opts, &spec).map_err(|e| e.to_string())?;
    let train = &data.partition.train;
    let x: Vec<f64> = train.iter().flat_map(|&i| data.matrix.row(i).to_vec()).collect();
    let y: Vec<f64> = train.iter().map(|&i| data.matrix.silicate[i].unwrap()).collect();
    let ls = least_squares(&x, &y, N_FEATURES);
    let fitted: Vec<f64> = model.params.w1.iter().chain(&model.params.b1).copied().collect();
    let err = ls.iter().zip(&fitted).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    check(
        err < 1e-4 && rep.test_mse < 1e-6,
        format!("max |coef - lstsq| = {err:.2e} (<1e-4), test mse {:.2e} (<1e-6)", rep.test_mse),
    )
}

fn nn_over_linear() -> Outcome {
    let sd = 0.1;
    let data = prepared_synthetic(4000, 3, sd, nonlinear_target);
    let spec = SplitSpec { seed: 3, ..SplitSpec::default() };
    let opts = TrainOptions::default();
    let (_, lin) = train_linear_baseline(&data, Target::Phosphate, &opts, &spec).map_err(|e| e.to_string())?;
    let (_, nn) =
        cross_validate_train(&data, Target::Phosphate, MlpConfig::default(), &opts, &spec).map_err(|e| e.to_string())?;
    let noise = sd * sd;
    check(
        nn.test_mse <= 0.5 * lin.test_mse && nn.test_mse <= 3.0 * noise,
        format!(
            "nn {:.4} vs linear {:.4} (ratio {:.3} <= 0.5), nn / noise variance {:.2} (<= 3)",
            nn.test_mse,
            lin.test_mse,
            nn.test_mse / lin.test_mse,
            nn.test_mse / noise
        ),
    )
}

fn projection_fidelity() -> Outcome {
    let mut fwd = 0.0f64;
    let text = include_str!("fixtures/epsg3031_oracle.csv");
    let mut n = 0;
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let v: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        let p = project_aps(v[0], v[1]).map_err(|e| e.to_string())?;
        fwd = fwd.max((p.x - v[2]).hypot(p.y - v[3]));
        n += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3031);
    let mut rt = 0.0f64;
    for _ in 0..1000 {
        let lat = rng.random_range(-89.0..-45.0);
        let lon = rng.random_range(-180.0..180.0);
        let p = project_aps(lat, lon).map_err(|e| e.to_string())?;
        let (la, lo) = inverse_aps(p).map_err(|e| e.to_string())?;
        let mut dlon = (lo - lon).abs();
        dlon = dlon.min(360.0 - dlon);
        rt = rt.max((la - lat).abs()).max(dlon);
    }
    check(
        fwd < 0.5 && rt < 1e-9,
        format!("forward vs PROJ on {n} points {fwd:.2e} m (<0.5), round trip on 1000 points {rt:.2e} deg (<1e-9)"),
    )
}

fn mc_dropout_statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n_rows = 1000;
    let x: Vec<f64> = (0..n_rows * N_FEATURES).map(|_| rng.sample(StandardNormal)).collect();
    let ids: Vec<u64> = (0..n_rows as u64).collect();
    let base = init_mlp(MlpConfig::default(), 77).map_err(|e| e.to_string())?;
    let mut p0 = base.clone();
    p0.config.dropout_p = 0.0;
    let zero = mc_dropout_predict_with(&p0, &x, &ids, 100, 1, Exec::Parallel).map_err(|e| e.to_string())?;
    let all_zero = zero.iter().all(|s| s.std == 0.0);
    let short = mc_dropout_predict_with(&base, &x, &ids, 100, 1, Exec::Parallel).map_err(|e| e.to_string())?;
    let long = mc_dropout_predict_with(&base, &x, &ids, 10_000, 1, Exec::Parallel).map_err(|e| e.to_string())?;
    let stable = short
        .iter()
        .zip(&long)
        .filter(|(a, b)| (a.mean - b.mean).abs() <= 5.0 * b.std / 100f64.sqrt())
        .count() as f64
        / n_rows as f64;
    let draws: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
    let s = summarize_interval(&draws).map_err(|e| e.to_string())?;
    let ci_ok = (s.ci_low + 1.96).abs() <= 0.05 && (s.ci_high - 1.96).abs() <= 0.05;
    check(
        all_zero && stable >= 0.99 && ci_ok,
        format!(
            "p=0 all std zero: {all_zero}; stable rows {:.1}% (>=99%); N(0,1) interval [{:.3}, {:.3}]",
            100.0 * stable,
            s.ci_low,
            s.ci_high
        ),
    )
}

/// preprocess -> train -> predict -> grid, returning every written artifact.
fn pipeline(seed: u64) -> Result<Vec<(String, Vec<u8>)>, sonuts_core::Error> {
    let mut samples = synthetic_samples(1500, seed);
    common::label_with(&mut samples, seed, 0.05, nonlinear_target);
    for (i, s) in samples.iter_mut().enumerate() {
        for f in [Field::Salinity, Field::Oxygen, Field::Nitrate, Field::Phosphate, Field::Silicate] {
            s.qc_flags.insert(f, if i % 37 == f as usize { 3 } else { 2 });
        }
        if i % 50 == 0 {
            s.latitude = -40.0;
        }
    }
    let schema = ColumnMap::default();
    let mut raw_table = Vec::new();
    write_hydro_table(&samples, &schema, &mut raw_table)?;
    let policy = QcPolicy::default();
    let parsed = parse_hydro_table(raw_table.as_slice(), &schema, &policy)?;
    let qc = apply_qc_filter(parsed, &policy);
    let region = filter_southern_ocean(qc.kept, -45.0);
    let kept = region.kept;
    let raw = build_feature_matrix(&kept)?;
    let spec = SplitSpec { seed, ..SplitSpec::default() };
    let data = prepare(&raw, &spec)?;
    let mut out = Vec::new();
    let mut buf = Vec::new();
    write_matrix_csv(&data.matrix, &data.partition, &mut buf)?;
    out.push(("features.csv".to_string(), buf));
    let prov = Provenance {
        seed,
        config_hash: "acceptance".into(),
    };
    let opts = TrainOptions {
        max_epochs: 8,
        ..TrainOptions::default()
    };
    let test_rows: Vec<ExternalRow> = data
        .partition
        .test
        .iter()
        .map(|&i| ExternalRow {
            sample: kept[i].clone(),
            source: SourceTag::Esm,
        })
        .collect();
    for target in [Target::Phosphate, Target::Silicate] {
        for cfg in [MlpConfig::default(), MlpConfig::linear(N_FEATURES)] {
            let (model, rep) = cross_validate_train(&data, target, cfg, &opts, &spec)?;
            let tm = TrainedModel::new(model, target, &data.standardizer, prov.clone());
            let tag = format!("{}_{}", target.name(), tm.kind);
            let mut b = Vec::new();
            tm.save(&mut b)?;
            out.push((format!("{tag}.model.json"), b));
            out.push((format!("{tag}.cv.json"), serde_json::to_vec_pretty(&rep)?));
            let pred = predict_external_table(&tm, &data.standardizer, &test_rows, &ApplyDefaults::default(), 100, seed)?;
            let mut b = Vec::new();
            write_prediction_csv(&pred, &prov, &mut b)?;
            out.push((format!("{tag}.pred.csv"), b));
            let g = grid_products(&pred, CellSize::default())?;
            for (name, field) in [("mean", Some(&g.mean)), ("std", Some(&g.std)), ("ref", g.reference.as_ref()), ("diff", g.reference_minus_nn.as_ref())] {
                let mut b = Vec::new();
                field.expect("reference labels present").write_csv(&prov, &mut b)?;
                out.push((format!("{tag}.grid_{name}.csv"), b));
            }
        }
    }
    Ok(out)
}

fn pipeline_determinism() -> Outcome {
    let a = pipeline(2718).map_err(|e| e.to_string())?;
    let b = pipeline(2718).map_err(|e| e.to_string())?;
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let c = pipeline(2719).map_err(|e| e.to_string())?;
    let seed_matters = a.iter().zip(&c).any(|(x, y)| x.1 != y.1);
    check(
        a.len() == b.len() && differing.is_empty() && seed_matters,
        format!(
            "{} artifacts byte-identical across two runs (differing: {differing:?}); another seed changes output: {seed_matters}",
            a.len()
        ),
    )
}

fn partition_audit() -> Outcome {
    let data = prepared_synthetic(4321, 9, 0.1, nonlinear_target);
    let p = &data.partition;
    let n = data.matrix.n_rows();
    let folds = kfold_split(&p.train, 10, 9).map_err(|e| e.to_string())?;
    let test: BTreeSet<usize> = p.test.iter().copied().collect();
    let mut union = BTreeSet::new();
    let mut disjoint = true;
    let mut sizes_ok = true;
    for f in &folds {
        disjoint &= f.val.iter().chain(&f.train).all(|i| !test.contains(i));
        sizes_ok &= f.train.len() + f.val.len() == p.train.len();
        for &v in &f.val {
            disjoint &= union.insert(v);
        }
    }
    let covers = union.iter().copied().eq(p.train.iter().copied());
    let ratio_ok = p.test.len() == (n as f64 / 10.0).round() as usize && p.train.len() + p.test.len() == n;
    // the same folds are the ones training uses
    let opts = TrainOptions {
        max_epochs: 1,
        ..TrainOptions::default()
    };
    let spec = SplitSpec { seed: 9, ..SplitSpec::default() };
    let (_, rep) = cross_validate_train_with(&data, Target::Phosphate, MlpConfig::default(), &opts, &spec, Exec::Parallel)
        .map_err(|e| e.to_string())?;
    let rep_ok = rep.k == 10 && rep.val_mse.len() == 10 && rep.n_test == p.test.len() && rep.n_train == p.train.len();
    check(
        disjoint && covers && sizes_ok && ratio_ok && folds.len() == 10 && rep_ok,
        format!(
            "n={n}: train {} / test {}, k={}, folds disjoint from test and each other: {disjoint}, cover train: {covers}",
            p.train.len(),
            p.test.len(),
            folds.len()
        ),
    )
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("gradient_correctness", gradient_correctness),
        ("linear_equivalence", linear_equivalence),
        ("nn_over_linear", nn_over_linear),
        ("projection_fidelity", projection_fidelity),
        ("mc_dropout_statistics", mc_dropout_statistics),
        ("pipeline_determinism", pipeline_determinism),
        ("partition_audit", partition_audit),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let t = Instant::now();
        let r = f();
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(d) => println!("PASS {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 7 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
