//! The batch commands. Each reads its inputs from the run directory, writes
//! its outputs there and records their digests in the manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use log::info;
use meda_core::baselines::{adasyn, ros, smote};
use meda_core::datasets::{
    balance_with_synthetic, generate_glyphs, load_idx, make_imbalanced, ImbalancedSplit, LabeledImageSet,
};
use meda_core::evolution::{
    run_full_training, ArtifactSink, TrainingOutcome, EVOLUTION_TRACE_FILE, GMM_INIT_FILE, GMM_OPTI_FILE,
    LOSS_TRACE_FILE, MODELS_FILE,
};
use meda_core::gm_distribution::{self, GmmParams};
use meda_core::metrics::{evaluate_with, EvalReport};
use meda_core::networks::{load_params, Network};
use meda_core::training::fit_classifier;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, SourceKind};
use crate::error::{CliError, CliResult};
use crate::run_dir::{Manifest, RunDir, Split, COMPARISON_FILE, CONFIG_FILE, REPORTS_FILE};

/// Separate random streams so that commands do not share draws.
const GENERATE_STREAM: u64 = 1;
const BALANCE_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    #[value(name = "meda_lude")]
    MedaLude,
    Ros,
    Smote,
    Adasyn,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::MedaLude => "meda_lude",
            Method::Ros => "ros",
            Method::Smote => "smote",
            Method::Adasyn => "adasyn",
        }
    }
}

/// A training set a final classifier can be fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingSet {
    Imbalanced,
    Balanced(Method),
}

impl TrainingSet {
    pub fn name(self) -> &'static str {
        match self {
            TrainingSet::Imbalanced => "imbalanced",
            TrainingSet::Balanced(m) => m.name(),
        }
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        use clap::ValueEnum;
        if text == "imbalanced" {
            return Ok(TrainingSet::Imbalanced);
        }
        Method::from_str(text, false)
            .map(TrainingSet::Balanced)
            .map_err(|_| CliError::Config(format!("unknown training set {text:?}")))
    }
}

fn rng(cfg: &RunConfig, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
    r.set_stream(stream);
    r
}

fn preamble(cfg: &RunConfig) -> String {
    format!("# config_hash {}\n", cfg.hash())
}

fn write_text(dir: &RunDir, rel: &str, text: &str) -> CliResult<()> {
    let p = dir.path(rel);
    fs::write(&p, text).map_err(|e| CliError::io(format!("writing {}", p.display()), e))
}

fn load_source(cfg: &RunConfig) -> CliResult<(LabeledImageSet, Option<LabeledImageSet>)> {
    match cfg.data.source {
        SourceKind::Glyphs => Ok((generate_glyphs(&cfg.data.glyphs)?, None)),
        SourceKind::Idx => {
            let idx = &cfg.data.idx;
            let full = load_idx(&idx.train_images, &idx.train_labels)?;
            let test = match (&idx.test_images, &idx.test_labels) {
                (Some(i), Some(l)) => {
                    let t = load_idx(i, l)?;
                    let k = full.class_count().max(t.class_count());
                    Some(t.with_class_count(k)?)
                }
                _ => None,
            };
            let k = test.as_ref().map_or(full.class_count(), |t| t.class_count());
            Ok((full.with_class_count(k)?, test))
        }
    }
}

/// Builds the imbalanced split and writes it with its manifest.
pub fn cmd_prepare(cfg: &RunConfig) -> CliResult<Manifest> {
    cfg.validate()?;
    let dir = RunDir::new(&cfg.run_dir);
    dir.ensure("data")?;
    let (full, test) = load_source(cfg)?;
    if let Some(t) = &test {
        if t.shape() != full.shape() {
            return Err(CliError::Core(meda_core::Error::Data("test images differ in shape from training images".into())));
        }
    }
    let ImbalancedSplit {
        train,
        val,
        train_indices,
        val_indices,
    } = make_imbalanced(&full, &cfg.imbalance)?;
    let shape = train.shape();
    let manifest = Manifest {
        config_hash: cfg.hash(),
        data_hash: cfg.data_hash(),
        class_count: train.class_count(),
        height: shape.height,
        width: shape.width,
        channels: shape.channels,
        minority_classes: cfg.imbalance.minority_classes.clone(),
        train_counts: train.counts_per_class(),
        val_counts: val.counts_per_class(),
        test_counts: test.as_ref().map(LabeledImageSet::counts_per_class),
        train_indices,
        val_indices,
        artifacts: Default::default(),
    };
    dir.write_manifest(&manifest)?;
    write_text(&dir, CONFIG_FILE, &cfg.to_toml())?;
    let mut files = vec![CONFIG_FILE.to_string()];
    files.extend(dir.write_set(&RunDir::split_stem(Split::Train), &train)?);
    files.extend(dir.write_set(&RunDir::split_stem(Split::Val), &val)?);
    if let Some(t) = &test {
        files.extend(dir.write_set(&RunDir::split_stem(Split::Test), t)?);
    }
    dir.register(&files, &manifest.config_hash)?;
    info!(
        "prepared {} training and {} validation samples in {}",
        train.len(),
        val.len(),
        dir.root.display()
    );
    dir.read_manifest()
}

fn read_split(dir: &RunDir, m: &Manifest, split: Split) -> CliResult<LabeledImageSet> {
    let stem = RunDir::split_stem(split);
    if split == Split::Test && !dir.has_set(&stem) {
        return Err(CliError::Config("this run directory has no test split".into()));
    }
    dir.read_set(&stem, m.class_count)
}

/// Runs the full training program and writes models, mixtures and traces.
pub fn cmd_train(cfg: &RunConfig) -> CliResult<TrainingOutcome> {
    cfg.validate()?;
    let dir = RunDir::new(&cfg.run_dir);
    let m = dir.prepared_manifest(cfg)?;
    let train = read_split(&dir, &m, Split::Train)?;
    let sink = ArtifactSink {
        dir: dir.root.clone(),
        csv_preamble: vec![format!("config_hash {}", cfg.hash())],
    };
    let result = run_full_training(&train, &m.minority_mask(), &cfg.meda(), Some(&sink));
    let written: Vec<String> = [MODELS_FILE, GMM_INIT_FILE, GMM_OPTI_FILE, LOSS_TRACE_FILE, EVOLUTION_TRACE_FILE]
        .iter()
        .filter(|f| dir.path(f).exists())
        .map(|f| f.to_string())
        .collect();
    dir.register(&written, &cfg.hash())?;
    Ok(result?)
}

fn trained(dir: &RunDir) -> CliResult<(Network, GmmParams)> {
    let models_path = dir.path(MODELS_FILE);
    let gmm_path = dir.path(GMM_OPTI_FILE);
    if !models_path.exists() || !gmm_path.exists() {
        return Err(CliError::Config(format!(
            "{} holds no trained models; run `train` first",
            dir.root.display()
        )));
    }
    let quartet = load_params(&models_path)?;
    Ok((quartet.decoder, GmmParams::load(&gmm_path)?))
}

/// Decodes `count` samples of `class` from the optimized mixture.
pub fn cmd_generate(cfg: &RunConfig, class: usize, count: usize) -> CliResult<LabeledImageSet> {
    cfg.validate()?;
    let dir = RunDir::new(&cfg.run_dir);
    let m = dir.prepared_manifest(cfg)?;
    if class >= m.class_count {
        return Err(CliError::Config(format!("class {class} out of range for {} classes", m.class_count)));
    }
    let (decoder, gmm) = trained(&dir)?;
    let set = if count == 0 {
        LabeledImageSet::empty(m.shape(), m.class_count)
    } else {
        let mut counts = vec![0; m.class_count];
        counts[class] = count;
        let latents = gm_distribution::sample(&gmm, &counts, &mut rng(cfg, GENERATE_STREAM))?;
        let images = decoder.predict(latents.features().view())?.mapv(|v| v.clamp(0.0, 1.0));
        LabeledImageSet::new(images, latents.labels().to_vec(), m.shape(), m.class_count)?
    };
    let files = dir.write_set(&format!("generated/class{class}_n{count}"), &set)?;
    dir.register(&files, &cfg.hash())?;
    Ok(set)
}

/// Tops every class of the training set up to the largest class count.
pub fn cmd_balance(cfg: &RunConfig, method: Method) -> CliResult<LabeledImageSet> {
    cfg.validate()?;
    let dir = RunDir::new(&cfg.run_dir);
    let m = dir.prepared_manifest(cfg)?;
    let train = read_split(&dir, &m, Split::Train)?;
    let balanced = match method {
        Method::MedaLude => {
            let (decoder, gmm) = trained(&dir)?;
            balance_with_synthetic(&train, &decoder, &gmm, &mut rng(cfg, BALANCE_STREAM))?
        }
        Method::Ros => ros(&train, &cfg.sampler)?,
        Method::Smote => smote(&train, &cfg.sampler)?,
        Method::Adasyn => adasyn(&train, &cfg.sampler)?,
    };
    let files = dir.write_set(&format!("balanced/{}", method.name()), &balanced)?;
    dir.register(&files, &cfg.hash())?;
    Ok(balanced)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub training_set: String,
    pub split: &'static str,
    pub report: EvalReport,
}

impl ReportRow {
    pub const CSV_HEADER_PREFIX: &'static str = "training_set,split";

    pub fn csv(&self) -> String {
        format!("{},{},{}", self.training_set, self.split, self.report.csv_row())
    }
}

fn classifier_path(name: &str) -> String {
    format!("classifiers/{name}.bin")
}

fn load_training_set(dir: &RunDir, m: &Manifest, set: TrainingSet) -> CliResult<LabeledImageSet> {
    match set {
        TrainingSet::Imbalanced => read_split(dir, m, Split::Train),
        TrainingSet::Balanced(method) => {
            let stem = format!("balanced/{}", method.name());
            if !dir.has_set(&stem) {
                return Err(CliError::Config(format!(
                    "no balanced set for {}; run `balance --method {}` first",
                    method.name(),
                    method.name()
                )));
            }
            dir.read_set(&stem, m.class_count)
        }
    }
}

/// Rewrites the report file with `rows` replacing any earlier rows for the
/// same training set and split.
fn store_reports(dir: &RunDir, cfg: &RunConfig, rows: &[ReportRow]) -> CliResult<()> {
    let path = dir.path(REPORTS_FILE);
    let mut kept: Vec<String> = Vec::new();
    if let Ok(text) = fs::read_to_string(&path) {
        for line in text.lines().filter(|l| !l.starts_with('#') && !l.starts_with(ReportRow::CSV_HEADER_PREFIX)) {
            let mut parts = line.splitn(3, ',');
            let key = (parts.next(), parts.next());
            if !rows.iter().any(|r| key == (Some(r.training_set.as_str()), Some(r.split))) {
                kept.push(line.to_string());
            }
        }
    }
    kept.extend(rows.iter().map(ReportRow::csv));
    kept.sort();
    let mut text = preamble(cfg);
    let _ = writeln!(text, "{},{}", ReportRow::CSV_HEADER_PREFIX, EvalReport::CSV_HEADER);
    for line in kept {
        let _ = writeln!(text, "{line}");
    }
    write_text(dir, REPORTS_FILE, &text)?;
    dir.register(&[REPORTS_FILE.to_string()], &cfg.hash())
}

/// Fits a fresh final classifier on `set` and evaluates it on the
/// validation split and, when present, the test split.
pub fn cmd_evaluate(cfg: &RunConfig, set: TrainingSet) -> CliResult<Vec<ReportRow>> {
    cfg.validate()?;
    let dir = RunDir::new(&cfg.run_dir);
    let m = dir.prepared_manifest(cfg)?;
    let train = load_training_set(&dir, &m, set)?;
    let spec = cfg.architecture.image_classifier_spec(m.shape().pixels(), m.class_count)?;
    let net = fit_classifier(&train, &spec, &cfg.classifier)?;
    dir.ensure("classifiers")?;
    let net_file = classifier_path(set.name());
    net.save(&dir.path(&net_file))?;
    let mut rows = Vec::new();
    for split in [Split::Val, Split::Test] {
        if split == Split::Test && m.test_counts.is_none() {
            continue;
        }
        let data = read_split(&dir, &m, split)?;
        let scores = net.predict(data.images().view())?;
        rows.push(ReportRow {
            training_set: set.name().to_string(),
            split: split.name(),
            report: evaluate_with(scores.view(), data.labels(), cfg.evaluation.g_mean)?,
        });
    }
    dir.register(&[net_file], &cfg.hash())?;
    store_reports(&dir, cfg, &rows)?;
    Ok(rows)
}

/// Balances with every method, evaluates each together with the
/// unbalanced control, and writes a metric × training-set table for the
/// test split (or the validation split when there is none).
pub fn cmd_compare(cfg: &RunConfig, methods: &[Method]) -> CliResult<String> {
    cfg.validate()?;
    let mut columns = vec![TrainingSet::Imbalanced];
    columns.extend(methods.iter().map(|&m| TrainingSet::Balanced(m)));
    let mut reports = Vec::new();
    for &set in &columns {
        if let TrainingSet::Balanced(m) = set {
            cmd_balance(cfg, m)?;
        }
        let rows = cmd_evaluate(cfg, set)?;
        let row = rows
            .iter()
            .find(|r| r.split == "test")
            .or_else(|| rows.first())
            .expect("validation split always evaluated")
            .clone();
        reports.push(row);
    }
    let mut table = preamble(cfg);
    let _ = writeln!(
        table,
        "# split {}",
        reports.first().map_or("val", |r| r.split)
    );
    let names: Vec<&str> = columns.iter().map(|c| c.name()).collect();
    let _ = writeln!(table, "metric,{}", names.join(","));
    for (i, (metric, _)) in reports[0].report.values().iter().enumerate() {
        let cells: Vec<String> = reports.iter().map(|r| format!("{:.6}", r.report.values()[i].1)).collect();
        let _ = writeln!(table, "{metric},{}", cells.join(","));
    }
    let dir = RunDir::new(&cfg.run_dir);
    write_text(&dir, COMPARISON_FILE, &table)?;
    dir.register(&[COMPARISON_FILE.to_string()], &cfg.hash())?;
    Ok(table)
}

/// Writes the last-hidden-layer activations of the final classifier
/// trained on `classifier` for every sample of `split`, one CSV row each.
pub fn cmd_export_features(cfg: &RunConfig, classifier: TrainingSet, split: Split) -> CliResult<PathBuf> {
    cfg.validate()?;
    let dir = RunDir::new(&cfg.run_dir);
    let m = dir.prepared_manifest(cfg)?;
    let net_path = dir.path(&classifier_path(classifier.name()));
    if !net_path.exists() {
        return Err(CliError::Config(format!(
            "no final classifier for {}; run `evaluate --set {}` first",
            classifier.name(),
            classifier.name()
        )));
    }
    let net = Network::load(&net_path)?;
    let data = read_split(&dir, &m, split)?;
    let features = net.hidden_features(data.images().view())?;
    let mut text = preamble(cfg);
    for row in features.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(text, "{}", cells.join(","));
    }
    dir.ensure("features")?;
    let rel = format!("features/{}_{}.csv", classifier.name(), split.name());
    write_text(&dir, &rel, &text)?;
    dir.register(std::slice::from_ref(&rel), &cfg.hash())?;
    Ok(dir.path(&rel))
}
