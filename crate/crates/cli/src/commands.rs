//! Subcommand implementations. Each writes its outputs under the run's
//! output directory and stamps them with the run provenance.

use crate::config::RunConfig;
use serde::{Deserialize, Serialize};
use sonuts_core::external::{
    grid_products, parse_external_table, predict_external_table, read_prediction_csv, write_prediction_csv,
    ExternalPrediction, PredictedRow,
};
use sonuts_core::features::{checksum, read_matrix_csv, write_matrix_csv, MatrixMeta, Partition};
use sonuts_core::uncertainty::mc_dropout_predict_with;
use sonuts_core::{
    apply_qc_filter, build_feature_matrix, cross_validate_train, evaluate_mse, filter_southern_ocean,
    parse_hydro_table, prepare, train_linear_baseline, CellSize, CvReport, Exec, FeatureMatrix,
    Provenance, SourceTag, Target, TrainedModel,
};
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Exit code 1: bad flags, config or missing files. Exit code 2: the run
/// itself failed.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<sonuts_core::Error> for Failure {
    fn from(e: sonuts_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

pub type Outcome = Result<(), Failure>;

const TARGETS: [Target; 2] = [Target::Phosphate, Target::Silicate];
const KINDS: [&str; 2] = ["nn", "linear"];

/// A CvReport as written to disk.
#[derive(Debug, Serialize, Deserialize)]
pub struct CvReportFile {
    pub provenance: Provenance,
    pub report: CvReport,
}

fn existing(path: &Path, flag: &str) -> Result<PathBuf, Failure> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(Failure::Usage(format!("{flag} {}: no such file", path.display())))
    }
}

fn create(path: &Path) -> Result<fs::File, Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::File::create(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

/// Splits a leading `# seed=.. config_hash=..` line off a text file.
fn read_stamped(path: &Path) -> Result<(Option<Provenance>, String), Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    match Provenance::parse_comment_line(first.trim_end()) {
        Some(p) => Ok((Some(p), rest.to_string())),
        None => Ok((None, text)),
    }
}

fn model_path(out: &Path, target: Target, kind: &str) -> PathBuf {
    out.join("models").join(format!("{}_{kind}.json", target.name()))
}

fn report_path(out: &Path, target: Target, kind: &str) -> PathBuf {
    out.join("reports").join(format!("{}_{kind}.cv.json", target.name()))
}

fn sidecar_for(matrix: &Path) -> PathBuf {
    matrix.with_extension("json")
}

struct Matrix {
    meta: MatrixMeta,
    m: FeatureMatrix,
    partition: Partition,
}

fn load_matrix(path: &Path) -> Result<Matrix, Failure> {
    let path = existing(path, "--matrix")?;
    let side = existing(&sidecar_for(&path), "--matrix (sidecar)")?;
    let meta: MatrixMeta = serde_json::from_slice(&fs::read(&side)?)?;
    meta.verify()?;
    let (_, body) = read_stamped(&path)?;
    let (m, partition) = read_matrix_csv(body.as_bytes())?;
    if m.n_rows() != meta.n_rows {
        return Err(Failure::Runtime(format!(
            "{}: {} rows, sidecar says {}",
            path.display(),
            m.n_rows(),
            meta.n_rows
        )));
    }
    Ok(Matrix { meta, m, partition })
}

fn load_model(path: &Path) -> Result<TrainedModel, Failure> {
    let path = existing(path, "--model")?;
    Ok(TrainedModel::load(fs::File::open(path)?)?)
}

pub fn preprocess(cfg: &RunConfig) -> Outcome {
    let input = cfg
        .paths
        .input
        .as_deref()
        .ok_or_else(|| Failure::Usage("preprocess needs --input PATH (or paths.input in the config)".into()))?;
    let input = existing(input, "--input")?;
    let bytes = fs::read(&input)?;
    let samples = parse_hydro_table(bytes.as_slice(), &cfg.schema, &cfg.qc)?;
    let n_read = samples.len();
    let mut qc = apply_qc_filter(samples, &cfg.qc);
    let region = filter_southern_ocean(std::mem::take(&mut qc.kept), cfg.lat_cut);
    let raw = build_feature_matrix(&region.kept)?;
    let data = prepare(&raw, &cfg.split_spec())?;

    let out = cfg.out_dir();
    let prov = cfg.provenance();
    let mut f = create(&out.join("features.csv"))?;
    writeln!(f, "{}", prov.comment_line())?;
    write_matrix_csv(&data.matrix, &data.partition, &mut f)?;
    let meta = MatrixMeta::new(&data, cfg.split_spec(), checksum(&bytes), prov.config_hash.clone());
    let mut f = create(&out.join("features.json"))?;
    serde_json::to_writer_pretty(&mut f, &meta)?;
    writeln!(f)?;
    let mut f = create(&out.join("drop_log.txt"))?;
    writeln!(f, "{}", prov.comment_line())?;
    qc.write_log(&mut f)?;
    region.write_log(&mut f)?;

    println!(
        "read {n_read} rows: kept {}, dropped {} (qc) + {} (north of {}); train {} / test {}",
        data.matrix.n_rows(),
        qc.dropped.len(),
        region.dropped.len(),
        cfg.lat_cut,
        data.partition.train.len(),
        data.partition.test.len()
    );
    Ok(())
}

fn fold_table(r: &CvReport) -> String {
    let mut s = format!("{} {} (k={}, seed={})\n  fold  val_mse      epochs\n", r.target, r.model_kind, r.k, r.seed);
    for (f, (v, e)) in r.val_mse.iter().zip(&r.epochs_run).enumerate() {
        let mark = if f == r.selected_fold { "*" } else { " " };
        let _ = writeln!(s, "{mark} {f:>4}  {v:<11.6}  {e}");
    }
    let _ = write!(s, "  selected fold {} test_mse {:.6} (n_test {})", r.selected_fold, r.test_mse, r.n_test);
    s
}

pub fn train(cfg: &RunConfig, only: Option<Target>) -> Outcome {
    let out = cfg.out_dir();
    let mx = load_matrix(&out.join("features.csv"))?;
    let data = sonuts_core::Prepared {
        matrix: mx.m,
        standardizer: mx.meta.standardizer.clone(),
        partition: mx.partition,
    };
    let spec = cfg.split_spec();
    let prov = cfg.provenance();
    for target in TARGETS.into_iter().filter(|t| only.is_none_or(|o| o == *t)) {
        for kind in KINDS {
            let (model, report) = if kind == "nn" {
                cross_validate_train(&data, target, cfg.nn_config(), &cfg.train, &spec)?
            } else {
                train_linear_baseline(&data, target, &cfg.train, &spec)?
            };
            println!("{}\n  {:.1}s", fold_table(&report), report.wall_clock_seconds);
            let tm = TrainedModel::new(model, target, &data.standardizer, prov.clone());
            tm.save(create(&model_path(&out, target, kind))?)?;
            let mut f = create(&report_path(&out, target, kind))?;
            serde_json::to_writer_pretty(
                &mut f,
                &CvReportFile {
                    provenance: prov.clone(),
                    report,
                },
            )?;
            writeln!(f)?;
        }
    }
    Ok(())
}

fn default_models(out: &Path) -> Vec<PathBuf> {
    TARGETS
        .iter()
        .flat_map(|&t| KINDS.iter().map(move |k| model_path(out, t, k)))
        .filter(|p| p.exists())
        .collect()
}

pub fn evaluate(cfg: &RunConfig, models: &[PathBuf], matrix: Option<&Path>) -> Outcome {
    let out = cfg.out_dir();
    let mx = load_matrix(&matrix.map(Path::to_path_buf).unwrap_or_else(|| out.join("features.csv")))?;
    let models = if models.is_empty() { default_models(&out) } else { models.to_vec() };
    if models.is_empty() {
        return Err(Failure::Usage("evaluate: no models given and none found under --out".into()));
    }
    let mut table = String::from("target,kind,n_train,train_mse,n_test,test_mse\n");
    for path in &models {
        let tm = load_model(path)?;
        tm.check_standardizer(&mx.meta.standardizer)?;
        let tr = mx.m.labelled(&mx.partition.train, tm.target);
        let te = mx.m.labelled(&mx.partition.test, tm.target);
        let train_mse = evaluate_mse(&tm.model, &mx.m, &tr, tm.target)?;
        let test_mse = evaluate_mse(&tm.model, &mx.m, &te, tm.target)?;
        let _ = writeln!(table, "{},{},{},{train_mse},{},{test_mse}", tm.target, tm.kind, tr.len(), te.len());
    }
    print!("{table}");
    let mut f = create(&out.join("evaluate.csv"))?;
    writeln!(f, "{}", cfg.provenance().comment_line())?;
    f.write_all(table.as_bytes())?;
    Ok(())
}

pub struct PredictArgs {
    pub model: Option<PathBuf>,
    pub target: Target,
    pub kind: String,
    pub input: Option<PathBuf>,
    pub matrix: Option<PathBuf>,
}

/// MC dropout on the held-out test rows of the matrix, with the true label
/// as reference.
fn predict_test_split(tm: &TrainedModel, mx: &Matrix, n_samples: usize, seed: u64) -> Result<ExternalPrediction, Failure> {
    let rows = mx.m.labelled(&mx.partition.test, tm.target);
    if rows.is_empty() {
        return Err(Failure::Runtime("test split has no labelled rows".into()));
    }
    let x: Vec<f64> = rows.iter().flat_map(|&i| mx.m.row(i).to_vec()).collect();
    let ids: Vec<u64> = rows.iter().map(|&i| mx.m.row_ids[i]).collect();
    let summaries = mc_dropout_predict_with(&tm.model, &x, &ids, n_samples, seed, Exec::default())?;
    let labels = mx.m.labels(tm.target);
    let out = rows
        .iter()
        .zip(summaries)
        .map(|(&i, summary)| {
            let mut raw = mx.m.row(i).to_vec();
            mx.meta.standardizer.unstandardize_row(&mut raw);
            PredictedRow {
                row_id: mx.m.row_ids[i],
                source: SourceTag::Ship,
                latitude: mx.m.coords[i].0,
                longitude: mx.m.coords[i].1,
                pressure: raw[2],
                summary,
                reference: labels[i],
            }
        })
        .collect();
    Ok(ExternalPrediction {
        target: tm.target,
        rows: out,
        dropped: Default::default(),
        pressure_defaulted: 0,
    })
}

pub fn predict(cfg: &RunConfig, args: &PredictArgs) -> Outcome {
    let out = cfg.out_dir();
    let model = args.model.clone().unwrap_or_else(|| model_path(&out, args.target, &args.kind));
    let tm = load_model(&model)?;
    let mx = load_matrix(&args.matrix.clone().unwrap_or_else(|| out.join("features.csv")))?;
    tm.check_standardizer(&mx.meta.standardizer)?;
    let n = cfg.predict.n_samples;
    let (pred, label) = match args.input.as_deref().or(cfg.paths.external.as_deref()) {
        Some(input) => {
            let input = existing(input, "--input")?;
            let rows = parse_external_table(
                fs::File::open(&input)?,
                &cfg.external_schema,
                &cfg.qc,
                cfg.predict.source_column.as_deref(),
                cfg.predict.default_source,
            )?;
            let p = predict_external_table(&tm, &mx.meta.standardizer, &rows, &cfg.apply_defaults(), n, cfg.seed)?;
            let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            println!(
                "{}: {} rows predicted, dropped {} missing input + {} outside region, pressure defaulted on {}",
                input.display(),
                p.rows.len(),
                p.dropped.missing_input,
                p.dropped.outside_region,
                p.pressure_defaulted
            );
            (p, stem)
        }
        None => {
            let p = predict_test_split(&tm, &mx, n, cfg.seed)?;
            println!("test split: {} rows predicted", p.rows.len());
            (p, "test".to_string())
        }
    };
    let path = out
        .join("predictions")
        .join(format!("{}_{}_{label}.csv", tm.target.name(), tm.kind));
    write_prediction_csv(&pred, &cfg.provenance(), create(&path)?)?;
    println!("wrote {} ({n} MC samples per row)", path.display());
    Ok(())
}

pub fn grid(cfg: &RunConfig, predictions: &[PathBuf], cell: CellSize) -> Outcome {
    if predictions.is_empty() {
        return Err(Failure::Usage("grid needs at least one --predictions PATH".into()));
    }
    let out = cfg.out_dir();
    let prov = cfg.provenance();
    for path in predictions {
        let path = existing(path, "--predictions")?;
        let (p, _) = read_prediction_csv(fs::File::open(&path)?)?;
        let g = grid_products(&p, cell)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let fields = [
            ("mean", Some(&g.mean)),
            ("std", Some(&g.std)),
            ("ref", g.reference.as_ref()),
            ("ref_minus_nn", g.reference_minus_nn.as_ref()),
        ];
        for (name, field) in fields {
            if let Some(field) = field {
                let dest = out.join("grids").join(format!("{stem}_{name}.csv"));
                field.write_csv(&prov, create(&dest)?)?;
                println!("wrote {} ({} cells)", dest.display(), field.cells.len());
            }
        }
    }
    Ok(())
}

/// Provenance stamp of one artifact, if it has one.
fn artifact_provenance(path: &Path) -> Result<Option<Provenance>, Failure> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => {
            let v: serde_json::Value = serde_json::from_slice(&fs::read(path)?)?;
            let p = v.get("provenance").cloned().unwrap_or_else(|| {
                serde_json::json!({ "seed": v.get("seed"), "config_hash": v.get("config_hash") })
            });
            Ok(serde_json::from_value(p).ok())
        }
        _ => Ok(read_stamped(path)?.0),
    }
}

fn walk(dir: &Path, files: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, files)?;
        } else {
            files.push(p);
        }
    }
    Ok(())
}

pub fn report(cfg: &RunConfig) -> Outcome {
    let out = cfg.out_dir();
    if !out.is_dir() {
        return Err(Failure::Usage(format!("--out {}: no such directory", out.display())));
    }
    let expected = cfg.provenance();
    let report_file = out.join("report.txt");
    let mut files = Vec::new();
    walk(&out, &mut files)?;
    let mut text = String::new();
    let _ = writeln!(text, "{}", expected.comment_line());
    let _ = writeln!(text, "output directory: {}\n\nprovenance", out.display());
    let mut bad = 0;
    for f in files.iter().filter(|f| **f != report_file) {
        let rel = f.strip_prefix(&out).unwrap_or(f).display();
        let status = match artifact_provenance(f)? {
            Some(p) if p == expected => "ok".to_string(),
            Some(p) => {
                bad += 1;
                format!("MISMATCH seed={} config_hash={}", p.seed, p.config_hash)
            }
            None => {
                bad += 1;
                "MISSING".to_string()
            }
        };
        let _ = writeln!(text, "  {status:<8} {rel}");
    }
    let _ = writeln!(text, "\ncross-validation");
    for t in TARGETS {
        for k in KINDS {
            let p = report_path(&out, t, k);
            if p.exists() {
                let r: CvReportFile = serde_json::from_slice(&fs::read(&p)?)?;
                let r = r.report;
                let _ = writeln!(
                    text,
                    "  {:<9} {:<6} fold {} val_mse {:.6} test_mse {:.6}",
                    t.name(),
                    k,
                    r.selected_fold,
                    r.selected_val_mse,
                    r.test_mse
                );
            }
        }
    }
    let eval = out.join("evaluate.csv");
    if eval.exists() {
        let _ = writeln!(text, "\nevaluation");
        for line in read_stamped(&eval)?.1.lines() {
            let _ = writeln!(text, "  {line}");
        }
    }
    let _ = writeln!(text, "\n{} artifacts, {bad} with missing or foreign provenance", files.len() - usize::from(files.contains(&report_file)));
    print!("{text}");
    fs::write(&report_file, &text)?;
    if bad > 0 {
        return Err(Failure::Runtime(format!("{bad} artifacts failed provenance verification")));
    }
    Ok(())
}
