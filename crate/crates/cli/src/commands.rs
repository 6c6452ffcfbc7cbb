use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use icdot::data::{build_vocabulary, compute_stats, index_and_filter, parse_admissions, split_train_test, write_admissions};
use icdot::eval::{aggregate, cross_validate, evaluate_admissions, fold_assignment, sweep, train_fold};
use icdot::model::{rank_top, score_all};
use icdot::{
    evaluate, explain, load_descriptions, train_with, Admission, CodeKind, CodeVocabulary, Error, EvalReport,
    FusionMode, ModelMetadata, ModelParams, Result, Scalar, TrainConfig, TrainedModel,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::args::{
    Command, CvArgs, DataArgs, EvaluateArgs, ExplainArgs, Format, Precision, RecommendArgs, SplitArgs, StatsArgs,
    SweepArgs, TrainCmd,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Stats(a) => stats(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Recommend(a) => recommend(a),
        Command::Explain(a) => explain_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Cv(a) => cv(a),
    }
}

struct Dataset {
    sha256: String,
    diseases: CodeVocabulary,
    procedures: CodeVocabulary,
    admissions: Vec<Admission>,
}

impl Dataset {
    fn sizes(&self) -> (usize, usize) {
        (self.diseases.len(), self.procedures.len())
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file =
        File::create(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(BufWriter::new(file))
}

fn load_dataset(args: &DataArgs) -> Result<Dataset> {
    let bytes = std::fs::read(&args.data)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", args.data.display()))))?;
    let sha256 = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    let raw = parse_admissions(bytes.as_slice())?;
    let diseases = build_vocabulary(&raw, CodeKind::Disease, args.min_count)?;
    let procedures = build_vocabulary(&raw, CodeKind::Procedure, args.min_count)?;
    let admissions = index_and_filter(&raw, &diseases, &procedures);
    log::info!(
        "{}: {} records, {} usable, {} diseases, {} procedures",
        args.data.display(),
        raw.len(),
        admissions.len(),
        diseases.len(),
        procedures.len()
    );
    if admissions.is_empty() {
        return Err(Error::EmptyDataset(format!("{} after vocabulary filtering", args.data.display())));
    }
    Ok(Dataset {
        sha256,
        diseases,
        procedures,
        admissions,
    })
}

/// Seeded split on its own stream so it does not consume the trainer's randomness.
fn split(admissions: &[Admission], args: &SplitArgs, seed: u64) -> Result<(Vec<Admission>, Vec<Admission>)> {
    if args.test_fraction == 0.0 {
        return Ok((admissions.to_vec(), Vec::new()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    split_train_test(admissions, args.test_fraction, &mut rng)
}

fn require_test_split(args: &SplitArgs) -> Result<()> {
    if args.test_fraction == 0.0 {
        return Err(Error::InvalidArgument("this command needs --test-fraction > 0".into()));
    }
    Ok(())
}

fn print_json<S: serde::Serialize>(value: &S) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

/// Ablation name of a configuration: pooling or self-attention fusion, with or without the transport term.
fn variant_label(fusion: FusionMode, alpha: f64) -> &'static str {
    match (fusion, alpha > 0.0) {
        (FusionMode::SelfAttention, true) => "E+SA+MA",
        (FusionMode::SelfAttention, false) => "E+SA",
        (_, true) => "E+MA",
        (_, false) => "E+Pooling",
    }
}

fn log_epoch(total: usize) -> impl FnMut(&icdot::trainer::EpochSummary) {
    move |s| {
        log::info!(
            "epoch {}/{}: loss {:.6} transport {:.6} solves {} unconverged {} ({:.2}s)",
            s.epoch,
            total,
            s.mean_predictive_loss,
            s.mean_transport,
            s.ot_solves,
            s.ot_unconverged,
            s.seconds
        )
    }
}

fn stats(args: StatsArgs) -> Result<()> {
    let data = load_dataset(&args.data)?;
    let (nd, np) = data.sizes();
    print_json(&compute_stats(&data.admissions, nd, np))
}

fn sidecar_path(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train_cmd(args: TrainCmd) -> Result<()> {
    let cfg = args.train.config();
    cfg.validate()?;
    let data = load_dataset(&args.data)?;
    let (train_set, test_set) = split(&data.admissions, &args.split, cfg.seed)?;
    if let Some(path) = &args.test_out {
        let raw: Vec<_> = test_set.iter().map(|a| a.to_raw(&data.diseases, &data.procedures)).collect();
        let mut w = create(path)?;
        write_admissions(&raw, &mut w)?;
        w.flush()?;
    }
    let report = match args.train.precision {
        Precision::F32 => train_and_save::<f32>(&args, &cfg, &data, &train_set)?,
        Precision::F64 => train_and_save::<f64>(&args, &cfg, &data, &train_set)?,
    };
    if let Some(path) = &args.report {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, &report)?;
        w.flush()?;
    }

    let metadata = ModelMetadata {
        format_version: icdot::persist::FORMAT_VERSION,
        seed: cfg.seed,
        epochs: cfg.epochs,
        dataset_sha256: data.sha256.clone(),
        train_admissions: train_set.len(),
        config: cfg,
    };
    let mut w = create(&sidecar_path(&args.out, ".json"))?;
    serde_json::to_writer_pretty(&mut w, &metadata)?;
    writeln!(w)?;
    w.flush()?;
    for (vocab, suffix) in [(&data.diseases, ".diseases.txt"), (&data.procedures, ".procedures.txt")] {
        let mut w = create(&sidecar_path(&args.out, suffix))?;
        vocab.write_to(&mut w)?;
        w.flush()?;
    }

    let last = report.epochs.last();
    println!(
        "{}",
        serde_json::json!({
            "model": args.out,
            "train_admissions": train_set.len(),
            "test_admissions": test_set.len(),
            "diseases": data.diseases.len(),
            "procedures": data.procedures.len(),
            "final_predictive_loss": last.map(|e| e.mean_predictive_loss),
            "final_transport": last.map(|e| e.mean_transport),
        })
    );
    Ok(())
}

fn train_and_save<T: Scalar>(
    args: &TrainCmd,
    cfg: &TrainConfig,
    data: &Dataset,
    train_set: &[Admission],
) -> Result<icdot::TrainReport> {
    let (nd, np) = data.sizes();
    let (params, report) = train_with::<T>(train_set, nd, np, cfg, log_epoch(cfg.epochs))?;
    if !params.is_finite() {
        return Err(Error::NonFinite("trained parameters".into()));
    }
    let model = TrainedModel::new(params, data.diseases.clone(), data.procedures.clone())?;
    let mut w = create(&args.out)?;
    model.write_to(&mut w)?;
    Ok(report)
}

enum Loaded {
    F32(TrainedModel<f32>),
    F64(TrainedModel<f64>),
}

/// Runs `$body` with `$m` bound to the model at its stored precision.
macro_rules! with_model {
    ($loaded:expr, $m:ident => $body:expr) => {
        match $loaded {
            Loaded::F32($m) => $body,
            Loaded::F64($m) => $body,
        }
    };
}

fn load_model(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    match bytes.get(12) {
        Some(4) => Ok(Loaded::F32(TrainedModel::read_from(bytes.as_slice())?)),
        _ => Ok(Loaded::F64(TrainedModel::read_from(bytes.as_slice())?)),
    }
}

fn read_test_set(path: &Path, model_diseases: &CodeVocabulary, model_procedures: &CodeVocabulary) -> Result<Vec<Admission>> {
    let raw = parse_admissions(BufReader::new(open(path)?))?;
    let test = index_and_filter(&raw, model_diseases, model_procedures);
    if test.len() < raw.len() {
        log::warn!(
            "{} of {} admissions have no in-vocabulary diseases or procedures and are skipped",
            raw.len() - test.len(),
            raw.len()
        );
    }
    if test.is_empty() {
        return Err(Error::EmptyDataset(format!("{}", path.display())));
    }
    Ok(test)
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    with_model!(load_model(&args.model)?, m => evaluate_model(&m, &args))
}

fn evaluate_model<T: Scalar>(model: &TrainedModel<T>, args: &EvaluateArgs) -> Result<()> {
    let test = read_test_set(&args.data, &model.diseases, &model.procedures)?;
    let records = evaluate_admissions(&model.params, &test, &args.tops)?;
    if let Some(path) = &args.per_admission {
        let mut w = create(path)?;
        for r in &records {
            let codes: Vec<&str> = r.recommended.iter().filter_map(|&p| model.procedures.code(p)).collect();
            serde_json::to_writer(
                &mut w,
                &serde_json::json!({
                    "admission_id": r.admission_id,
                    "L": r.top,
                    "recommended": codes,
                    "precision": r.precision,
                    "recall": r.recall,
                    "f1": r.f1,
                }),
            )?;
            writeln!(w)?;
        }
        w.flush()?;
    }
    let report = aggregate(&records, &args.tops);
    let label = variant_label(model.params.fusion, model.params.alpha);
    emit_report(&report, label, args.format)
}

fn emit_report(report: &EvalReport, label: &str, format: Format) -> Result<()> {
    match format {
        Format::Json => print_json(report),
        Format::Text => {
            print!("{}", report.to_table(label));
            Ok(())
        }
    }
}

/// Maps codes to sorted, deduplicated indices, warning about unknown codes.
fn known_diseases(codes: &[String], vocab: &CodeVocabulary) -> Vec<usize> {
    let mut out = Vec::new();
    for code in codes {
        match vocab.index_of(code) {
            Some(i) => out.push(i),
            None => log::warn!("disease code {code:?} is not in the model vocabulary"),
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

fn recommend(args: RecommendArgs) -> Result<()> {
    with_model!(load_model(&args.model)?, m => recommend_with(&m, &args))
}

fn recommend_with<T: Scalar>(model: &TrainedModel<T>, args: &RecommendArgs) -> Result<()> {
    let diseases = known_diseases(&args.diseases, &model.diseases);
    if diseases.is_empty() {
        return Err(Error::EmptyDataset("none of the disease codes are known to the model".into()));
    }
    let scores = score_all(&model.params, &diseases)?;
    let ranked = rank_top(scores.view(), args.top)?;
    let rows: Vec<(String, f64)> = ranked
        .iter()
        .map(|&p| (model.procedures.code(p).unwrap_or_default().to_string(), scores[p].as_f64()))
        .collect();
    match args.format {
        Format::Json => {
            let list: Vec<_> = rows
                .iter()
                .map(|(code, score)| serde_json::json!({"code": code, "score": score}))
                .collect();
            print_json(&list)
        }
        Format::Text => {
            for (code, score) in rows {
                println!("{code}\t{score:.6}");
            }
            Ok(())
        }
    }
}

fn explain_cmd(args: ExplainArgs) -> Result<()> {
    with_model!(load_model(&args.model)?, m => explain_with(&m, &args))
}

fn explain_with<T: Scalar>(model: &TrainedModel<T>, args: &ExplainArgs) -> Result<()> {
    let admissions: Vec<Admission> = match (&args.data, &args.diseases) {
        (Some(path), _) => {
            let raw = parse_admissions(BufReader::new(open(path)?))?;
            raw.iter()
                .filter(|r| args.admission.as_ref().is_none_or(|id| &r.admission_id == id))
                .filter_map(|r| {
                    let diseases = known_diseases(&r.disease_codes, &model.diseases);
                    if diseases.is_empty() {
                        log::warn!("admission {}: no known diseases, skipped", r.admission_id);
                        return None;
                    }
                    Some(Admission {
                        id: r.admission_id.clone(),
                        diseases,
                        positives: Vec::new(),
                    })
                })
                .collect()
        }
        (None, Some(codes)) => {
            let diseases = known_diseases(codes, &model.diseases);
            if diseases.is_empty() {
                Vec::new()
            } else {
                vec![Admission {
                    id: "query".into(),
                    diseases,
                    positives: Vec::new(),
                }]
            }
        }
        (None, None) => return Err(Error::InvalidArgument("explain needs --data or --diseases".into())),
    };
    if admissions.is_empty() {
        return Err(Error::EmptyDataset("nothing to explain".into()));
    }
    if args.csv && admissions.len() > 1 {
        return Err(Error::InvalidArgument(
            "--csv prints one matrix; select an admission with --admission".into(),
        ));
    }
    let descriptions: Option<HashMap<String, String>> = match &args.descriptions {
        Some(path) => Some(load_descriptions(BufReader::new(open(path)?))?),
        None => None,
    };
    let ot = icdot::OtConfig {
        beta: args.ot_beta,
        outer_max: args.ot_outer,
        ..icdot::OtConfig::default()
    };
    ot.validate()?;
    let mut out = std::io::stdout().lock();
    for adm in &admissions {
        let e = explain(
            &model.params,
            &model.diseases,
            &model.procedures,
            adm,
            args.top,
            descriptions.as_ref(),
            &ot,
        )?;
        if args.csv {
            write!(out, "{}", e.to_csv())?;
        } else {
            serde_json::to_writer(&mut out, &e)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

fn sweep_cmd(args: SweepArgs) -> Result<()> {
    require_test_split(&args.split)?;
    let cfg = args.train.config();
    cfg.validate()?;
    let data = load_dataset(&args.data)?;
    let (train_set, test_set) = split(&data.admissions, &args.split, cfg.seed)?;
    let axis = args.axis.into();
    let rows = match args.train.precision {
        Precision::F32 => sweep::<f32>(&train_set, &test_set, data.sizes(), &cfg, axis, &args.values, &args.tops)?,
        Precision::F64 => sweep::<f64>(&train_set, &test_set, data.sizes(), &cfg, axis, &args.values, &args.tops)?,
    };
    match args.format {
        Format::Json => print_json(&rows)?,
        Format::Text => {
            for row in &rows {
                let label = format!("{}={}", args.axis_name(), row.value);
                match (&row.report, &row.error) {
                    (Some(report), _) => print!("{}", report.to_table(&label)),
                    (None, err) => println!("{label}: failed: {}", err.as_deref().unwrap_or("unknown error")),
                }
            }
        }
    }
    if rows.iter().all(|r| r.report.is_none()) {
        return Err(Error::InvalidArgument("every sweep value failed".into()));
    }
    Ok(())
}

impl SweepArgs {
    fn axis_name(&self) -> &'static str {
        match self.axis {
            crate::args::Axis::Dim => "M",
            crate::args::Axis::Alpha => "alpha",
            crate::args::Axis::Heads => "K",
        }
    }
}

fn cv(args: CvArgs) -> Result<()> {
    require_test_split(&args.split)?;
    let cfg = args.train.config();
    cfg.validate()?;
    let data = load_dataset(&args.data)?;
    let (pool, test_set) = split(&data.admissions, &args.split, cfg.seed)?;
    match args.train.precision {
        Precision::F32 => cv_with::<f32>(&args, &cfg, &data, &pool, &test_set),
        Precision::F64 => cv_with::<f64>(&args, &cfg, &data, &pool, &test_set),
    }
}

fn cv_with<T: Scalar>(
    args: &CvArgs,
    cfg: &TrainConfig,
    data: &Dataset,
    pool: &[Admission],
    test_set: &[Admission],
) -> Result<()> {
    let label = variant_label(cfg.fusion, cfg.alpha);
    if let Some(fold) = args.fold {
        let assignment = fold_assignment(pool.len(), args.folds, cfg.seed)?;
        let params: ModelParams<T> = train_fold(pool, &assignment, fold, data.sizes(), cfg)?;
        let report = evaluate(&params, test_set, &args.tops)?;
        return emit_report(&report, &format!("{label} fold {fold}"), args.format);
    }
    let result = cross_validate::<T>(pool, test_set, data.sizes(), cfg, args.folds, &args.tops)?;
    match args.format {
        Format::Json => print_json(&result),
        Format::Text => {
            for (i, report) in result.folds.iter().enumerate() {
                print!("{}", report.to_table(&format!("{label} fold {i}")));
            }
            print!("{}", result.mean.to_table(&format!("{label} mean")));
            Ok(())
        }
    }
}
