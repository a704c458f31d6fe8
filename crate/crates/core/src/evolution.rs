//! Phase 4: evolves the latent mixture by quality filtering with both
//! classifiers, hash-based diversity selection and per-class Gaussian
//! blending. Also the driver for the whole training program.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use log::{info, warn};
use ndarray::ArrayView2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledImageSet;
use crate::error::{Error, Result};
use crate::gm_distribution::{self, estimate_class_gaussian, evolve_update, GmmParams, LatentPopulation};
use crate::image_hash::{average_hash, AHash};
use crate::lgm_loss::LgmConfig;
use crate::networks::{save_params, ArchitectureConfig, ModelQuartet, Network};
use crate::training::{
    train_phase1, train_phase2, train_phase3, LossTrace, Optimizers, PhaseSettings, PhaseWeights,
    TrainConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionConfig {
    pub pop_per_class: usize,
    pub selection_rate: f64,
    pub blend: f64,
    pub max_iterations: usize,
    pub real_batch_per_class: usize,
    pub outer_iterations: usize,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            pop_per_class: 64,
            selection_rate: 0.5,
            blend: 0.7,
            max_iterations: 10,
            real_batch_per_class: 16,
            outer_iterations: 2,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("pop_per_class", self.pop_per_class),
            ("max_iterations", self.max_iterations),
            ("real_batch_per_class", self.real_batch_per_class),
            ("outer_iterations", self.outer_iterations),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be >= 1")));
            }
        }
        if !(self.selection_rate > 0.0 && self.selection_rate <= 1.0) {
            return Err(Error::Config(format!(
                "`selection_rate` must lie in (0, 1], got {}",
                self.selection_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.blend) {
            return Err(Error::Config(format!("`blend` must lie in [0, 1], got {}", self.blend)));
        }
        Ok(())
    }
}

/// Anything that assigns a class to each input row.
pub trait LabelPredictor {
    fn predict_labels(&self, inputs: ArrayView2<f64>) -> Result<Vec<usize>>;
}

impl LabelPredictor for Network {
    fn predict_labels(&self, inputs: ArrayView2<f64>) -> Result<Vec<usize>> {
        self.classify(inputs)
    }
}

/// Indices of the rows whose predicted label equals the given one.
pub fn correct_indices(
    classifier: &dyn LabelPredictor,
    inputs: ArrayView2<f64>,
    labels: &[usize],
) -> Result<Vec<usize>> {
    let predicted = classifier.predict_labels(inputs)?;
    if predicted.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} rows",
            predicted.len(),
            labels.len()
        )));
    }
    Ok((0..labels.len()).filter(|&i| predicted[i] == labels[i]).collect())
}

/// Members the latent classifier assigns to their sampling class, in order.
pub fn quality_filter_latents(
    pop: &LatentPopulation,
    classifier: &dyn LabelPredictor,
) -> Result<LatentPopulation> {
    let kept = correct_indices(classifier, pop.features().view(), pop.labels())?;
    if kept.is_empty() {
        return Err(Error::EmptySurvivors { stage: "latent filter" });
    }
    Ok(pop.select(&kept))
}

/// Images the image classifier assigns to their label, in order.
pub fn quality_filter_images(
    images: &LabeledImageSet,
    classifier: &dyn LabelPredictor,
) -> Result<LabeledImageSet> {
    let kept = correct_indices(classifier, images.images().view(), images.labels())?;
    if kept.is_empty() {
        return Err(Error::EmptySurvivors { stage: "image filter" });
    }
    Ok(images.select(&kept))
}

fn hash_all(set: &LabeledImageSet) -> Result<Vec<AHash>> {
    let shape = set.shape();
    (0..set.len())
        .map(|i| {
            let img = set.image(i);
            let pixels = img.as_slice().map(<[f64]>::to_vec).unwrap_or_else(|| img.to_vec());
            average_hash(&pixels, shape.height, shape.width, shape.channels)
        })
        .collect()
}

/// `⌈rate · count⌉`, at least 1, with slack for products like `0.3 × 10`.
pub fn keep_count(rate: f64, count: usize) -> usize {
    ((rate * count as f64 - 1e-9).ceil() as usize).clamp(1, count.max(1))
}

/// Result of hash-based diversity selection over a quality pool.
#[derive(Debug, Clone, PartialEq)]
pub struct DiversitySelection {
    /// Selected pool indices, grouped by ascending class, each group in
    /// ascending fitness with index tie-break.
    pub selected: Vec<usize>,
    /// Mean hash similarity of every pool member to its class references.
    pub fitness: Vec<f64>,
    /// Per class: `(pool mean fitness, selected mean fitness)`, or `None`
    /// when the class has no pool members.
    pub class_means: Vec<Option<(f64, f64)>>,
}

/// Per class, ranks pool members by mean hash similarity to the same-class
/// members of `references` and keeps the `⌈rate · count⌉` least similar.
pub fn diversity_select(
    pool: &LabeledImageSet,
    references: &LabeledImageSet,
    rate: f64,
) -> Result<DiversitySelection> {
    if pool.shape() != references.shape() {
        return Err(Error::Shape("pool and reference images differ in shape".into()));
    }
    let pool_hashes = hash_all(pool)?;
    let ref_hashes = hash_all(references)?;
    let k = pool.class_count();
    // Integer agreement counts keep ranking and the class means exact.
    let mut agreement = vec![0u64; pool.len()];
    let mut ref_count = vec![0usize; k];
    let mut selected = Vec::new();
    let mut class_means = vec![None; k];
    for class in 0..k {
        let members = pool.class_indices(class);
        if members.is_empty() {
            continue;
        }
        let refs: Vec<AHash> = references
            .class_indices(class)
            .into_iter()
            .map(|i| ref_hashes[i])
            .collect();
        if refs.is_empty() {
            return Err(Error::Data(format!(
                "no real reference images for class {class}"
            )));
        }
        ref_count[class] = refs.len();
        for &i in &members {
            agreement[i] = refs.iter().map(|r| 64 - u64::from(pool_hashes[i].hamming(*r))).sum();
        }
        let mut ranked = members.clone();
        ranked.sort_by_key(|&i| (agreement[i], i));
        let keep = keep_count(rate, ranked.len());
        ranked.truncate(keep);
        let unit = 64.0 * refs.len() as f64;
        let mean = |idx: &[usize]| {
            let total: u64 = idx.iter().map(|&i| agreement[i]).sum();
            total as f64 / idx.len() as f64 / unit
        };
        class_means[class] = Some((mean(&members), mean(&ranked)));
        selected.extend(ranked);
    }
    let fitness = (0..pool.len())
        .map(|i| {
            let r = ref_count[pool.labels()[i]];
            if r == 0 {
                0.0
            } else {
                agreement[i] as f64 / (64.0 * r as f64)
            }
        })
        .collect();
    Ok(DiversitySelection {
        selected,
        fitness,
        class_means,
    })
}

/// Blends, per class, the Gaussian of the quality pool with that of the
/// diversity pool. Classes missing from either pool keep `prev`'s row.
pub fn evolve_distribution(
    quality: &LatentPopulation,
    diversity: &LatentPopulation,
    prev: &GmmParams,
    gamma: f64,
) -> Result<GmmParams> {
    let mut next = prev.clone();
    for class in 0..prev.class_count() {
        match (
            estimate_class_gaussian(quality, class),
            estimate_class_gaussian(diversity, class),
        ) {
            (Ok(q), Ok(d)) => next.set_class(class, &evolve_update(&q, &d, gamma)?)?,
            (Err(Error::EmptyClass { .. }), _) | (_, Err(Error::EmptyClass { .. })) => {}
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    Ok(next)
}

/// Diagnostics of one evolution iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionRecord {
    pub outer: usize,
    pub iteration: usize,
    /// Whether the distribution was updated (false after an empty stage).
    pub updated: bool,
    pub feat4_counts: Vec<usize>,
    pub gm1_counts: Vec<usize>,
    pub gm2_counts: Vec<usize>,
    pub spop_counts: Vec<usize>,
    /// Class-averaged mean fitness of the quality pool.
    pub pool_mean_fitness: Option<f64>,
    /// Class-averaged mean fitness of the selected subset.
    pub spop_mean_fitness: Option<f64>,
}

fn fraction(part: &[usize], whole: &[usize]) -> f64 {
    let w: usize = whole.iter().sum();
    if w == 0 {
        0.0
    } else {
        part.iter().sum::<usize>() as f64 / w as f64
    }
}

impl EvolutionRecord {
    pub fn latent_survival(&self) -> f64 {
        fraction(&self.gm1_counts, &self.feat4_counts)
    }

    pub fn image_survival(&self) -> f64 {
        fraction(&self.gm2_counts, &self.gm1_counts)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvolutionTrace {
    records: Vec<EvolutionRecord>,
}

impl EvolutionTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: EvolutionRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[EvolutionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn extend(&mut self, other: EvolutionTrace) {
        self.records.extend(other.records);
    }

    /// One row per iteration; per-class counts are `;`-separated and missing
    /// fitness values are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "outer,iteration,updated,latent_survival,image_survival,pool_mean_fitness,spop_mean_fitness,feat4,gm1,gm2,spop\n",
        );
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{},{},{},{},{},{}",
                r.outer,
                r.iteration,
                r.updated,
                r.latent_survival(),
                r.image_survival(),
                opt(r.pool_mean_fitness),
                opt(r.spop_mean_fitness),
                join(&r.feat4_counts),
                join(&r.gm1_counts),
                join(&r.gm2_counts),
                join(&r.spop_counts),
            );
        }
        out
    }
}

/// Draws up to `per_class` distinct real images of every class in
/// `classes`, without replacement.
pub fn draw_references<R: Rng + ?Sized>(
    real: &LabeledImageSet,
    classes: &[usize],
    per_class: usize,
    rng: &mut R,
) -> Result<LabeledImageSet> {
    let mut picked = Vec::new();
    for &class in classes {
        let pool = real.class_indices(class);
        if pool.is_empty() {
            return Err(Error::Data(format!("no real images of class {class} to compare against")));
        }
        let amount = per_class.min(pool.len());
        let mut chosen: Vec<usize> = index::sample(rng, pool.len(), amount)
            .into_iter()
            .map(|j| pool[j])
            .collect();
        chosen.sort_unstable();
        picked.extend(chosen);
    }
    Ok(real.select(&picked))
}

/// The networks evolution consults.
pub struct EvolutionModels<'a> {
    pub decoder: &'a Network,
    pub latent_classifier: &'a dyn LabelPredictor,
    pub image_classifier: &'a dyn LabelPredictor,
}

impl<'a> EvolutionModels<'a> {
    pub fn from_quartet(models: &'a ModelQuartet) -> Self {
        Self {
            decoder: &models.decoder,
            latent_classifier: &models.latent_classifier,
            image_classifier: &models.image_classifier,
        }
    }
}

fn class_average(means: &[Option<(f64, f64)>], pick: fn(&(f64, f64)) -> f64) -> Option<f64> {
    let present: Vec<f64> = means.iter().flatten().map(pick).collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Runs `max_iterations` evolution iterations from `init`. An iteration
/// whose latent or image filter leaves nothing keeps the current
/// distribution. `outer` only labels the trace records.
pub fn run_meda<R: Rng + ?Sized>(
    models: &EvolutionModels<'_>,
    init: &GmmParams,
    real: &LabeledImageSet,
    cfg: &EvolutionConfig,
    outer: usize,
    rng: &mut R,
) -> Result<(GmmParams, EvolutionTrace)> {
    cfg.validate()?;
    let k = init.class_count();
    if real.class_count() != k {
        return Err(Error::Shape(format!(
            "mixture has {k} classes, real data {}",
            real.class_count()
        )));
    }
    let mut current = init.clone();
    let mut trace = EvolutionTrace::new();
    for iteration in 0..cfg.max_iterations {
        let feat4 = gm_distribution::sample(&current, &vec![cfg.pop_per_class; k], rng)?;
        let mut record = EvolutionRecord {
            outer,
            iteration,
            updated: false,
            feat4_counts: feat4.counts_per_class(),
            gm1_counts: vec![0; k],
            gm2_counts: vec![0; k],
            spop_counts: vec![0; k],
            pool_mean_fitness: None,
            spop_mean_fitness: None,
        };

        let gm1 = match quality_filter_latents(&feat4, models.latent_classifier) {
            Ok(p) => p,
            Err(Error::EmptySurvivors { stage }) => {
                warn!("evolution iteration {iteration}: nothing survived the {stage}; distribution kept");
                trace.push(record);
                continue;
            }
            Err(e) => return Err(e),
        };
        record.gm1_counts = gm1.counts_per_class();

        let decoded = models
            .decoder
            .predict(gm1.features().view())?
            .mapv(|v| v.clamp(0.0, 1.0));
        let images = LabeledImageSet::new(decoded, gm1.labels().to_vec(), real.shape(), k)?;
        let kept = correct_indices(models.image_classifier, images.images().view(), images.labels())?;
        if kept.is_empty() {
            warn!("evolution iteration {iteration}: nothing survived the image filter; distribution kept");
            trace.push(record);
            continue;
        }
        let gm2 = gm1.select(&kept);
        let quality_images = images.select(&kept);
        record.gm2_counts = gm2.counts_per_class();

        let present: Vec<usize> = (0..k).filter(|&c| record.gm2_counts[c] > 0).collect();
        let references = draw_references(real, &present, cfg.real_batch_per_class, rng)?;
        let selection = diversity_select(&quality_images, &references, cfg.selection_rate)?;
        let spop = gm2.select(&selection.selected);
        record.spop_counts = spop.counts_per_class();
        record.pool_mean_fitness = class_average(&selection.class_means, |m| m.0);
        record.spop_mean_fitness = class_average(&selection.class_means, |m| m.1);

        current = evolve_distribution(&gm2, &spop, &current, cfg.blend)?;
        record.updated = true;
        trace.push(record);
    }
    Ok((current, trace))
}

/// Every setting of the training program.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MedaConfig {
    pub architecture: ArchitectureConfig,
    pub weights: PhaseWeights,
    pub lgm: LgmConfig,
    pub train: TrainConfig,
    pub evolution: EvolutionConfig,
    /// Standard deviation of the initial class means.
    pub init_mean_spread: f64,
}

impl MedaConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.lgm.validate()?;
        self.train.validate()?;
        self.evolution.validate()?;
        if !(self.init_mean_spread.is_finite() && self.init_mean_spread >= 0.0) {
            return Err(Error::Config("`init_mean_spread` must be finite and >= 0".into()));
        }
        Ok(())
    }
}

pub const MODELS_FILE: &str = "models.bin";
pub const GMM_INIT_FILE: &str = "gmm_init.bin";
pub const GMM_OPTI_FILE: &str = "gmm_opti.bin";
pub const LOSS_TRACE_FILE: &str = "loss_trace.csv";
pub const EVOLUTION_TRACE_FILE: &str = "evolution_trace.csv";

/// Where training artifacts go. Each CSV starts with `csv_preamble` lines,
/// written as `#` comments.
#[derive(Debug, Clone)]
pub struct ArtifactSink {
    pub dir: PathBuf,
    pub csv_preamble: Vec<String>,
}

impl ArtifactSink {
    fn csv(&self, name: &str, body: &str) -> Result<()> {
        let mut text = String::new();
        for line in &self.csv_preamble {
            let _ = writeln!(text, "# {line}");
        }
        text.push_str(body);
        fs::write(self.dir.join(name), text)?;
        Ok(())
    }

    fn write(
        &self,
        models: &ModelQuartet,
        gmm_init: Option<&GmmParams>,
        gmm_opti: Option<&GmmParams>,
        loss: &LossTrace,
        evolution: &EvolutionTrace,
    ) -> Result<()> {
        fs::create_dir_all(&self.dir)?;
        save_params(models, &self.dir.join(MODELS_FILE))?;
        if let Some(g) = gmm_init {
            g.save(&self.dir.join(GMM_INIT_FILE))?;
        }
        if let Some(g) = gmm_opti {
            g.save(&self.dir.join(GMM_OPTI_FILE))?;
        }
        self.csv(LOSS_TRACE_FILE, &loss.to_csv())?;
        self.csv(EVOLUTION_TRACE_FILE, &evolution.to_csv())
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub models: ModelQuartet,
    pub gmm_init: GmmParams,
    pub gmm_opti: GmmParams,
    pub loss_trace: LossTrace,
    pub evolution_trace: EvolutionTrace,
    /// Phases in the order they ran.
    pub phases: Vec<u8>,
}

/// Phase 1 once, then `outer_iterations` rounds of Phases 2, 3 and 4. Each
/// round samples from the frozen post-Phase-1 mixture and Phase 4 restarts
/// from it; the last round's result is the optimized mixture.
///
/// On divergence the artifacts reached so far are written before the error
/// is returned.
pub fn run_full_training(
    train: &LabeledImageSet,
    minority: &[bool],
    cfg: &MedaConfig,
    sink: Option<&ArtifactSink>,
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let k = train.class_count();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut models = ModelQuartet::new(&cfg.architecture, train.shape().pixels(), k, &mut rng)?;
    let mut gmm = GmmParams::random(k, cfg.architecture.latent_dim, cfg.init_mean_spread, &mut rng)?;
    let mut opt = Optimizers::new(&models, &gmm, &cfg.train.learning_rates);
    let settings = PhaseSettings {
        weights: cfg.weights.clone(),
        lgm: cfg.lgm.clone(),
        minority: minority.to_vec(),
    };
    let mut loss = LossTrace::new();
    let mut evolution = EvolutionTrace::new();
    let mut phases = Vec::new();

    let on_error = |e: Error, models: &ModelQuartet, init: Option<&GmmParams>, loss: &LossTrace, evo: &EvolutionTrace| {
        if let (Error::TrainingDiverged { .. }, Some(sink)) = (&e, sink) {
            if let Err(write_err) = sink.write(models, init, None, loss, evo) {
                warn!("could not save partial artifacts: {write_err}");
            }
        }
        e
    };

    let epochs = train_phase1(train, &mut models, &mut gmm, &settings, &cfg.train, &mut opt, &mut rng, &mut loss)
        .map_err(|e| on_error(e, &models, None, &loss, &evolution))?;
    info!("phase 1 finished after {epochs} epochs");
    phases.push(1);
    let gmm_init = gmm;
    let mut gmm_opti = gmm_init.clone();

    for outer in 0..cfg.evolution.outer_iterations {
        let epochs = train_phase2(train, &gmm_init, &mut models, &settings, &cfg.train, &mut opt, &mut rng, &mut loss)
            .map_err(|e| on_error(e, &models, Some(&gmm_init), &loss, &evolution))?;
        info!("round {outer}: phase 2 finished after {epochs} epochs");
        phases.push(2);
        let epochs = train_phase3(train.len(), &gmm_init, &mut models, &settings, &cfg.train, &mut opt, &mut rng, &mut loss)
            .map_err(|e| on_error(e, &models, Some(&gmm_init), &loss, &evolution))?;
        info!("round {outer}: phase 3 finished after {epochs} epochs");
        phases.push(3);
        let (evolved, trace) = run_meda(
            &EvolutionModels::from_quartet(&models),
            &gmm_init,
            train,
            &cfg.evolution,
            outer,
            &mut rng,
        )?;
        gmm_opti = evolved;
        evolution.extend(trace);
        phases.push(4);
    }

    if let Some(sink) = sink {
        sink.write(&models, Some(&gmm_init), Some(&gmm_opti), &loss, &evolution)?;
    }
    Ok(TrainingOutcome {
        models,
        gmm_init,
        gmm_opti,
        loss_trace: loss,
        evolution_trace: evolution,
        phases,
    })
}
