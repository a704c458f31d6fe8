//! Phases 1 to 3 of the training program: composite losses with β and ξ
//! weighting, gradient routing to the right parameter groups, stratified
//! mini-batches and the convergence rule.

use std::fmt::Write as _;

use log::debug;
use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledImageSet;
use crate::error::{Error, Result};
use crate::gm_distribution::{self, GmmParams};
use crate::lgm_loss::{lgm_loss_weighted, softmax_cross_entropy, LgmConfig};
use crate::networks::{
    adam_step, reconstruction_loss_weighted, AdamConfig, AdamState, MlpSpec, ModelQuartet, Network,
    ParamGrads,
};

/// Weight of the majority term relative to the minority term.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum BalanceCoef {
    /// `n_min / n_maj` of the current batch; 1 when either side is absent.
    #[default]
    Auto,
    Fixed(f64),
}

impl BalanceCoef {
    pub fn resolve(self, n_min: usize, n_maj: usize) -> f64 {
        match self {
            BalanceCoef::Fixed(v) => v,
            BalanceCoef::Auto if n_min == 0 || n_maj == 0 => 1.0,
            BalanceCoef::Auto => n_min as f64 / n_maj as f64,
        }
    }
}

impl Serialize for BalanceCoef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BalanceCoef::Auto => s.serialize_str("auto"),
            BalanceCoef::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for BalanceCoef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Number(f64),
        }
        match Raw::deserialize(d)? {
            Raw::Text(t) if t == "auto" => Ok(BalanceCoef::Auto),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "expected \"auto\" or a number, got {t:?}"
            ))),
            Raw::Number(v) => Ok(BalanceCoef::Fixed(v)),
        }
    }
}

/// β weights of one phase. Phase 2 reads only `rec` and `cls_img`, Phase 3
/// only `gm` and `cls_ltt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossBetas {
    pub rec: f64,
    pub gm: f64,
    pub cls_ltt: f64,
    pub cls_img: f64,
}

impl Default for LossBetas {
    fn default() -> Self {
        Self {
            rec: 1.0,
            gm: 1.0,
            cls_ltt: 1.0,
            cls_img: 1.0,
        }
    }
}

/// Per-phase β weights and the minority/majority balance coefficients.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseWeights {
    pub phase1: LossBetas,
    pub phase2: LossBetas,
    pub phase3: LossBetas,
    pub xi_rec: BalanceCoef,
    pub xi_gm: BalanceCoef,
    pub xi_cls_ltt: BalanceCoef,
    pub xi_cls_ori: BalanceCoef,
    pub xi_cls_syn: BalanceCoef,
}

impl PhaseWeights {
    pub fn validate(&self) -> Result<()> {
        let mut checks = Vec::new();
        for (phase, b) in [("phase1", self.phase1), ("phase2", self.phase2), ("phase3", self.phase3)] {
            checks.push((format!("{phase}.rec"), b.rec));
            checks.push((format!("{phase}.gm"), b.gm));
            checks.push((format!("{phase}.cls_ltt"), b.cls_ltt));
            checks.push((format!("{phase}.cls_img"), b.cls_img));
        }
        for (name, x) in [
            ("xi_rec", self.xi_rec),
            ("xi_gm", self.xi_gm),
            ("xi_cls_ltt", self.xi_cls_ltt),
            ("xi_cls_ori", self.xi_cls_ori),
            ("xi_cls_syn", self.xi_cls_syn),
        ] {
            if let BalanceCoef::Fixed(v) = x {
                checks.push((name.to_string(), v));
            }
        }
        for (name, v) in checks {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("`{name}` must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Adam learning rate for each parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub encoder: f64,
    pub decoder: f64,
    pub latent_classifier: f64,
    pub image_classifier: f64,
    pub gmm: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            encoder: 1e-3,
            decoder: 1e-3,
            latent_classifier: 1e-3,
            image_classifier: 1e-3,
            gmm: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs_phase1: usize,
    pub max_epochs_phase2: usize,
    pub max_epochs_phase3: usize,
    pub patience: usize,
    pub min_rel_improvement: f64,
    pub seed: u64,
    pub learning_rates: LearningRates,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_epochs_phase1: 30,
            max_epochs_phase2: 10,
            max_epochs_phase3: 10,
            patience: 5,
            min_rel_improvement: 1e-3,
            seed: 0,
            learning_rates: LearningRates::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("`batch_size` must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("`patience` must be >= 1".into()));
        }
        if !(self.min_rel_improvement.is_finite() && self.min_rel_improvement >= 0.0) {
            return Err(Error::Config("`min_rel_improvement` must be finite and >= 0".into()));
        }
        let lr = &self.learning_rates;
        for (name, v) in [
            ("encoder", lr.encoder),
            ("decoder", lr.decoder),
            ("latent_classifier", lr.latent_classifier),
            ("image_classifier", lr.image_classifier),
            ("gmm", lr.gmm),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!(
                    "learning rate `{name}` must be finite and > 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn max_epochs(&self, phase: u8) -> usize {
        match phase {
            1 => self.max_epochs_phase1,
            2 => self.max_epochs_phase2,
            _ => self.max_epochs_phase3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossComponent {
    pub name: &'static str,
    pub beta: f64,
    pub value: f64,
}

/// Loss values of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub phase: u8,
    pub components: Vec<LossComponent>,
    pub total: f64,
}

impl StepRecord {
    /// Builds a record whose total is the β-weighted sum of `components`.
    pub fn new(phase: u8, components: Vec<LossComponent>) -> Self {
        let total = components.iter().map(|c| c.beta * c.value).sum();
        Self {
            phase,
            components,
            total,
        }
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|c| c.name == name).map(|c| c.value)
    }
}

/// Append-only record of every optimizer step; entry `i` is step `i`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    records: Vec<StepRecord>,
}

impl LossTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: StepRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn extend(&mut self, other: LossTrace) {
        self.records.extend(other.records);
    }

    /// `iteration,phase,component,value` rows; each step contributes one row
    /// per component and a `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,phase,component,value\n");
        for (i, r) in self.records.iter().enumerate() {
            for c in &r.components {
                let _ = writeln!(out, "{i},{},{},{:e}", r.phase, c.name, c.value);
            }
            let _ = writeln!(out, "{i},{},total,{:e}", r.phase, r.total);
        }
        out
    }
}

/// `loss_min + ξ·loss_maj`.
pub fn combine_min_maj(loss_min: f64, loss_maj: f64, xi: f64) -> f64 {
    loss_min + xi * loss_maj
}

/// Per-row weights `w` such that `Σ_i w_i·l_i` equals
/// `combine_min_maj(S_min, S_maj, ξ)`, where `S_side` is that side's partial
/// sum of `l` divided by the batch size. With ξ = 1 this is the plain batch
/// mean; with the automatic ξ both sides carry equal total weight.
pub fn min_maj_weights(labels: &[usize], minority: &[bool], xi: BalanceCoef) -> Vec<f64> {
    let n = labels.len();
    let n_min = labels.iter().filter(|&&l| minority[l]).count();
    let xi = xi.resolve(n_min, n - n_min);
    let unit = 1.0 / n.max(1) as f64;
    labels
        .iter()
        .map(|&l| if minority[l] { unit } else { xi * unit })
        .collect()
}

fn weighted_sum(values: impl IntoIterator<Item = f64>, weights: &[f64]) -> f64 {
    values.into_iter().zip(weights).map(|(v, w)| v * w).sum()
}

/// Gradients for whichever parameter groups a step updates.
#[derive(Debug, Clone, Default)]
pub struct StepGrads {
    pub encoder: Option<ParamGrads>,
    pub decoder: Option<ParamGrads>,
    pub latent_classifier: Option<ParamGrads>,
    pub image_classifier: Option<ParamGrads>,
    /// `(means, log_variances)`.
    pub gmm: Option<(Array2<f64>, Array2<f64>)>,
}

impl StepGrads {
    fn all_finite(&self) -> bool {
        let nets = [
            &self.encoder,
            &self.decoder,
            &self.latent_classifier,
            &self.image_classifier,
        ];
        let nets_ok = nets
            .iter()
            .flat_map(|g| g.iter())
            .all(|g| g.tensors().iter().all(|t| t.iter().all(|v| v.is_finite())));
        let gmm_ok = self
            .gmm
            .iter()
            .all(|(m, v)| m.iter().chain(v.iter()).all(|x| x.is_finite()));
        nets_ok && gmm_ok
    }
}

/// Adam state for each parameter group.
#[derive(Debug, Clone)]
pub struct Optimizers {
    pub encoder: AdamState,
    pub decoder: AdamState,
    pub latent_classifier: AdamState,
    pub image_classifier: AdamState,
    pub gmm: AdamState,
}

impl Optimizers {
    pub fn new(models: &ModelQuartet, gmm: &GmmParams, lr: &LearningRates) -> Self {
        let cfg = |lr| AdamConfig {
            lr,
            ..AdamConfig::default()
        };
        let gmm_size = gmm.means().len();
        Self {
            encoder: AdamState::for_network(&models.encoder.params, cfg(lr.encoder)),
            decoder: AdamState::for_network(&models.decoder.params, cfg(lr.decoder)),
            latent_classifier: AdamState::for_network(
                &models.latent_classifier.params,
                cfg(lr.latent_classifier),
            ),
            image_classifier: AdamState::for_network(
                &models.image_classifier.params,
                cfg(lr.image_classifier),
            ),
            gmm: AdamState::new(cfg(lr.gmm), &[gmm_size, gmm_size]),
        }
    }

    /// Applies every present gradient. Nothing changes if any gradient is
    /// non-finite.
    pub fn apply(
        &mut self,
        grads: &StepGrads,
        models: &mut ModelQuartet,
        gmm: Option<&mut GmmParams>,
    ) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::Grad { tensor: 0 });
        }
        if let Some(g) = &grads.encoder {
            adam_step(&mut models.encoder.params, g, &mut self.encoder)?;
        }
        if let Some(g) = &grads.decoder {
            adam_step(&mut models.decoder.params, g, &mut self.decoder)?;
        }
        if let Some(g) = &grads.latent_classifier {
            adam_step(&mut models.latent_classifier.params, g, &mut self.latent_classifier)?;
        }
        if let Some(g) = &grads.image_classifier {
            adam_step(&mut models.image_classifier.params, g, &mut self.image_classifier)?;
        }
        if let (Some((gm, gv)), Some(params)) = (&grads.gmm, gmm) {
            let slices = vec![
                gm.as_slice().expect("standard layout"),
                gv.as_slice().expect("standard layout"),
            ];
            self.gmm.update(params.tensors_mut(), slices)?;
            params.clamp_variances();
        }
        Ok(())
    }
}

/// Shared settings of the three phases.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PhaseSettings {
    pub weights: PhaseWeights,
    pub lgm: LgmConfig,
    /// `minority[k]` marks class `k` as a minority class.
    pub minority: Vec<bool>,
}

fn check_minority(settings: &PhaseSettings, k: usize) -> Result<()> {
    if settings.minority.len() != k {
        return Err(Error::Shape(format!(
            "minority mask has {} entries for {k} classes",
            settings.minority.len()
        )));
    }
    Ok(())
}

/// Image-classifier cross-entropy over the stacked `[original; synthesized]`
/// streams. Returns the combined loss, the gradient of that loss w.r.t. the
/// classifier parameters, and its gradient w.r.t. the synthesized images.
fn image_classification(
    models: &ModelQuartet,
    original: ArrayView2<f64>,
    synthesized: ArrayView2<f64>,
    labels: &[usize],
    settings: &PhaseSettings,
    beta: f64,
) -> Result<(f64, ParamGrads, Array2<f64>)> {
    let w = &settings.weights;
    let n = labels.len();
    let stacked = concatenate(Axis(0), &[original, synthesized])
        .map_err(|e| Error::Shape(e.to_string()))?;
    let mut stacked_labels = labels.to_vec();
    stacked_labels.extend_from_slice(labels);
    let mut weights = min_maj_weights(labels, &settings.minority, w.xi_cls_ori);
    weights.extend(min_maj_weights(labels, &settings.minority, w.xi_cls_syn));

    let (logits, cache) = models.image_classifier.forward(stacked.view())?;
    let (ce, grad) = softmax_cross_entropy(logits.view(), &stacked_labels, &weights)?;
    let value = weighted_sum(ce.iter().copied(), &weights);
    let (grads, input_grad) = models.image_classifier.backward(&cache, (grad * beta).view())?;
    Ok((value, grads, input_grad.slice(s![n.., ..]).to_owned()))
}

/// Phase 1 objective and gradients on one real batch.
///
/// The encoder receives all four terms, the decoder reconstruction and the
/// classification of reconstructed images, each classifier its own loss,
/// and the mixture only the L-GM loss.
pub fn phase1_objective(
    images: ArrayView2<f64>,
    labels: &[usize],
    models: &ModelQuartet,
    gmm: &GmmParams,
    settings: &PhaseSettings,
) -> Result<(StepRecord, StepGrads)> {
    let w = &settings.weights;
    let beta = w.phase1;
    check_minority(settings, models.class_count())?;
    if labels.is_empty() {
        return Err(Error::Input("phase 1 batch is empty".into()));
    }
    let (features, enc_cache) = models.encoder.forward(images)?;
    let (recon, dec_cache) = models.decoder.forward(features.view())?;

    let w_rec = min_maj_weights(labels, &settings.minority, w.xi_rec);
    let (rec_rows, rec_grad) = reconstruction_loss_weighted(recon.view(), images, &w_rec)?;
    let rec = weighted_sum(rec_rows.iter().copied(), &w_rec);

    let w_gm = min_maj_weights(labels, &settings.minority, w.xi_gm);
    let gm = lgm_loss_weighted(features.view(), labels, gmm, &settings.lgm, &w_gm)?;

    let w_ltt = min_maj_weights(labels, &settings.minority, w.xi_cls_ltt);
    let (ltt_logits, ltt_cache) = models.latent_classifier.forward(features.view())?;
    let (ltt_ce, ltt_grad) = softmax_cross_entropy(ltt_logits.view(), labels, &w_ltt)?;
    let ltt = weighted_sum(ltt_ce.iter().copied(), &w_ltt);
    let (ltt_grads, ltt_feature_grad) = models
        .latent_classifier
        .backward(&ltt_cache, (ltt_grad * beta.cls_ltt).view())?;

    let (img, img_grads, img_recon_grad) =
        image_classification(models, images, recon.view(), labels, settings, beta.cls_img)?;

    let recon_grad = rec_grad * beta.rec + img_recon_grad;
    let (dec_grads, dec_feature_grad) = models.decoder.backward(&dec_cache, recon_grad.view())?;
    let feature_grad = dec_feature_grad + &gm.grad_features * beta.gm + ltt_feature_grad;
    let (enc_grads, _) = models.encoder.backward(&enc_cache, feature_grad.view())?;

    let record = StepRecord::new(
        1,
        vec![
            LossComponent { name: "rec", beta: beta.rec, value: rec },
            LossComponent { name: "gm", beta: beta.gm, value: gm.total },
            LossComponent { name: "cls_ltt", beta: beta.cls_ltt, value: ltt },
            LossComponent { name: "cls_img", beta: beta.cls_img, value: img },
        ],
    );
    let grads = StepGrads {
        encoder: Some(enc_grads),
        decoder: Some(dec_grads),
        latent_classifier: Some(ltt_grads),
        image_classifier: Some(img_grads),
        gmm: Some((gm.grad_means * beta.gm, gm.grad_log_variances * beta.gm)),
    };
    Ok((record, grads))
}

/// Draws a real partner of the same label for each synthesized row.
fn pair_with_real<R: Rng + ?Sized>(
    labels: &[usize],
    real: &LabeledImageSet,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let by_class: Vec<Vec<usize>> = (0..real.class_count()).map(|c| real.class_indices(c)).collect();
    let mut rows = Vec::with_capacity(labels.len());
    for &l in labels {
        let pool = by_class
            .get(l)
            .filter(|p| !p.is_empty())
            .ok_or_else(|| Error::Data(format!("class {l} has no real images to pair with")))?;
        rows.push(pool[rng.random_range(0..pool.len())]);
    }
    Ok(real.select(&rows).images().clone())
}

/// Phase 2 objective on latents `latents` (with their labels) paired with
/// the real images `partners`. Only the decoder and the image classifier
/// receive gradients.
pub fn phase2_objective(
    latents: ArrayView2<f64>,
    labels: &[usize],
    partners: ArrayView2<f64>,
    models: &ModelQuartet,
    settings: &PhaseSettings,
) -> Result<(StepRecord, StepGrads)> {
    let w = &settings.weights;
    let beta = w.phase2;
    check_minority(settings, models.class_count())?;
    let (synth, dec_cache) = models.decoder.forward(latents)?;
    let w_rec = min_maj_weights(labels, &settings.minority, w.xi_rec);
    let (rec_rows, rec_grad) = reconstruction_loss_weighted(synth.view(), partners, &w_rec)?;
    let rec = weighted_sum(rec_rows.iter().copied(), &w_rec);
    let (img, img_grads, img_synth_grad) =
        image_classification(models, partners, synth.view(), labels, settings, beta.cls_img)?;
    let synth_grad = rec_grad * beta.rec + img_synth_grad;
    let (dec_grads, _) = models.decoder.backward(&dec_cache, synth_grad.view())?;
    let record = StepRecord::new(
        2,
        vec![
            LossComponent { name: "rec", beta: beta.rec, value: rec },
            LossComponent { name: "cls_img", beta: beta.cls_img, value: img },
        ],
    );
    let grads = StepGrads {
        decoder: Some(dec_grads),
        image_classifier: Some(img_grads),
        ..StepGrads::default()
    };
    Ok((record, grads))
}

/// Phase 3 objective: decode `latents` with the fixed decoder, re-encode,
/// and score the re-encoded features with the fixed mixture and the latent
/// classifier. Plain batch means, no minority/majority weighting.
pub fn phase3_objective(
    latents: ArrayView2<f64>,
    labels: &[usize],
    models: &ModelQuartet,
    gmm_init: &GmmParams,
    settings: &PhaseSettings,
) -> Result<(StepRecord, StepGrads)> {
    let beta = settings.weights.phase3;
    let n = labels.len();
    if n == 0 {
        return Err(Error::Input("phase 3 batch is empty".into()));
    }
    let decoded = models.decoder.predict(latents)?;
    let (features, enc_cache) = models.encoder.forward(decoded.view())?;
    let mean_w = vec![1.0 / n as f64; n];
    let gm = lgm_loss_weighted(features.view(), labels, gmm_init, &settings.lgm, &mean_w)?;
    let (ltt_logits, ltt_cache) = models.latent_classifier.forward(features.view())?;
    let (ltt_ce, ltt_grad) = softmax_cross_entropy(ltt_logits.view(), labels, &mean_w)?;
    let ltt = weighted_sum(ltt_ce.iter().copied(), &mean_w);
    let (ltt_grads, ltt_feature_grad) = models
        .latent_classifier
        .backward(&ltt_cache, (ltt_grad * beta.cls_ltt).view())?;
    let feature_grad = &gm.grad_features * beta.gm + ltt_feature_grad;
    let (enc_grads, _) = models.encoder.backward(&enc_cache, feature_grad.view())?;
    let record = StepRecord::new(
        3,
        vec![
            LossComponent { name: "gm", beta: beta.gm, value: gm.total },
            LossComponent { name: "cls_ltt", beta: beta.cls_ltt, value: ltt },
        ],
    );
    let grads = StepGrads {
        encoder: Some(enc_grads),
        latent_classifier: Some(ltt_grads),
        ..StepGrads::default()
    };
    Ok((record, grads))
}

/// Applies `grads` unless the step's loss is non-finite; the record is
/// returned either way so the caller can report divergence.
fn finish_step(
    record: StepRecord,
    grads: &StepGrads,
    models: &mut ModelQuartet,
    gmm: Option<&mut GmmParams>,
    opt: &mut Optimizers,
) -> Result<StepRecord> {
    if record.total.is_finite() {
        opt.apply(grads, models, gmm)?;
    }
    Ok(record)
}

pub fn phase1_step(
    batch: &LabeledImageSet,
    models: &mut ModelQuartet,
    gmm: &mut GmmParams,
    settings: &PhaseSettings,
    opt: &mut Optimizers,
) -> Result<StepRecord> {
    let (record, grads) = phase1_objective(batch.images().view(), batch.labels(), models, gmm, settings)?;
    finish_step(record, &grads, models, Some(gmm), opt)
}

/// One Phase 2 step for the labels of `batch_labels`: latents are drawn
/// from `gmm_init` and each is paired with a uniformly chosen real image of
/// its class.
pub fn phase2_step<R: Rng + ?Sized>(
    batch_labels: &[usize],
    gmm_init: &GmmParams,
    real: &LabeledImageSet,
    models: &mut ModelQuartet,
    settings: &PhaseSettings,
    opt: &mut Optimizers,
    rng: &mut R,
) -> Result<StepRecord> {
    let counts = label_counts(batch_labels, gmm_init.class_count())?;
    let latents = gm_distribution::sample(gmm_init, &counts, rng)?;
    let partners = pair_with_real(latents.labels(), real, rng)?;
    let (record, grads) = phase2_objective(
        latents.features().view(),
        latents.labels(),
        partners.view(),
        models,
        settings,
    )?;
    finish_step(record, &grads, models, None, opt)
}

/// One Phase 3 step on `batch_size` latents spread evenly over the classes.
pub fn phase3_step<R: Rng + ?Sized>(
    batch_size: usize,
    gmm_init: &GmmParams,
    models: &mut ModelQuartet,
    settings: &PhaseSettings,
    opt: &mut Optimizers,
    rng: &mut R,
) -> Result<StepRecord> {
    let counts = balanced_counts(batch_size, gmm_init.class_count());
    let latents = gm_distribution::sample(gmm_init, &counts, rng)?;
    let (record, grads) =
        phase3_objective(latents.features().view(), latents.labels(), models, gmm_init, settings)?;
    finish_step(record, &grads, models, None, opt)
}

fn label_counts(labels: &[usize], k: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0; k];
    for &l in labels {
        *counts
            .get_mut(l)
            .ok_or_else(|| Error::Input(format!("label {l} out of range for {k} classes")))? += 1;
    }
    Ok(counts)
}

/// `total` split over `k` classes as evenly as possible, lower classes first.
pub fn balanced_counts(total: usize, k: usize) -> Vec<usize> {
    (0..k).map(|c| total / k + usize::from(c < total % k)).collect()
}

/// Number of mini-batches per epoch.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Splits a shuffled epoch into `⌈n / batch_size⌉` batches of near-equal
/// size with minority members spread round-robin, so every batch holds at
/// least one minority sample whenever the data has any. When there are
/// fewer minority samples than batches, some are reused.
pub fn stratified_batches<R: Rng + ?Sized>(
    labels: &[usize],
    minority: &[bool],
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let n = labels.len();
    let b = batches_per_epoch(n, batch_size);
    if b == 0 {
        return Vec::new();
    }
    let (mut mins, mut majs): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| minority[labels[i]]);
    mins.shuffle(rng);
    majs.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = vec![Vec::new(); b];
    for (j, &i) in mins.iter().enumerate() {
        batches[j % b].push(i);
    }
    if !mins.is_empty() {
        for (j, batch) in batches.iter_mut().enumerate().skip(mins.len()) {
            batch.push(mins[j % mins.len()]);
        }
    }
    let mut next_maj = majs.iter();
    for (j, batch) in batches.iter_mut().enumerate() {
        let size = n / b + usize::from(j < n % b);
        let fill = size.saturating_sub(batch.len());
        batch.extend(next_maj.by_ref().take(fill));
    }
    batches
}

/// Epoch-level stop rule: counts consecutive epochs whose mean total fails
/// to improve on the best seen so far by `min_rel`; the reference starts at
/// the first step's total.
#[derive(Debug, Clone)]
pub struct Convergence {
    patience: usize,
    min_rel: f64,
    best: Option<f64>,
    stale: usize,
}

impl Convergence {
    pub fn new(patience: usize, min_rel: f64) -> Self {
        Self {
            patience,
            min_rel,
            best: None,
            stale: 0,
        }
    }

    pub fn observe_first_step(&mut self, total: f64) {
        if self.best.is_none() {
            self.best = Some(total);
        }
    }

    /// Returns `true` once the rule says to stop.
    pub fn end_epoch(&mut self, epoch_mean: f64) -> bool {
        let best = *self.best.get_or_insert(epoch_mean);
        let rel = (best - epoch_mean) / best.abs().max(f64::MIN_POSITIVE);
        if rel < self.min_rel {
            self.stale += 1;
        } else {
            self.stale = 0;
        }
        self.best = Some(best.min(epoch_mean));
        self.stale >= self.patience
    }
}

/// Runs `step(epoch, batch)` for up to `max_epochs` epochs of
/// `steps_per_epoch` steps each, appending every record to `trace`.
///
/// A non-finite total, or a non-finite gradient reported by the step, ends
/// the phase with `TrainingDiverged` carrying the trace so far.
pub fn run_phase<F>(
    phase: u8,
    max_epochs: usize,
    steps_per_epoch: usize,
    patience: usize,
    min_rel: f64,
    trace: &mut LossTrace,
    mut step: F,
) -> Result<usize>
where
    F: FnMut(usize, usize) -> Result<StepRecord>,
{
    let mut rule = Convergence::new(patience, min_rel);
    for epoch in 0..max_epochs {
        let mut sum = 0.0;
        for b in 0..steps_per_epoch {
            let diverged = |trace: &LossTrace| Error::TrainingDiverged {
                phase,
                step: trace.len(),
                trace: Box::new(trace.clone()),
            };
            let record = match step(epoch, b) {
                Ok(r) => r,
                Err(Error::Grad { .. }) => return Err(diverged(trace)),
                Err(e) => return Err(e),
            };
            let total = record.total;
            trace.push(record);
            if !total.is_finite() {
                return Err(diverged(trace));
            }
            rule.observe_first_step(total);
            sum += total;
        }
        let mean = sum / steps_per_epoch.max(1) as f64;
        debug!("phase {phase} epoch {epoch}: mean loss {mean:.6}");
        if rule.end_epoch(mean) {
            return Ok(epoch + 1);
        }
    }
    Ok(max_epochs)
}

/// Phase 1 over the real training set until convergence. Returns the
/// number of epochs run.
#[allow(clippy::too_many_arguments)]
pub fn train_phase1<R: Rng + ?Sized>(
    train: &LabeledImageSet,
    models: &mut ModelQuartet,
    gmm: &mut GmmParams,
    settings: &PhaseSettings,
    cfg: &TrainConfig,
    opt: &mut Optimizers,
    rng: &mut R,
    trace: &mut LossTrace,
) -> Result<usize> {
    check_minority(settings, train.class_count())?;
    let steps = batches_per_epoch(train.len(), cfg.batch_size);
    let mut batches = Vec::new();
    run_phase(1, cfg.max_epochs_phase1, steps, cfg.patience, cfg.min_rel_improvement, trace, |_, b| {
        if b == 0 {
            batches = stratified_batches(train.labels(), &settings.minority, cfg.batch_size, rng);
        }
        phase1_step(&train.select(&batches[b]), models, gmm, settings, opt)
    })
}

/// Phase 2: batches of real labels drive sampling from `gmm_init`.
#[allow(clippy::too_many_arguments)]
pub fn train_phase2<R: Rng + ?Sized>(
    train: &LabeledImageSet,
    gmm_init: &GmmParams,
    models: &mut ModelQuartet,
    settings: &PhaseSettings,
    cfg: &TrainConfig,
    opt: &mut Optimizers,
    rng: &mut R,
    trace: &mut LossTrace,
) -> Result<usize> {
    check_minority(settings, train.class_count())?;
    let steps = batches_per_epoch(train.len(), cfg.batch_size);
    let mut batches = Vec::new();
    run_phase(2, cfg.max_epochs_phase2, steps, cfg.patience, cfg.min_rel_improvement, trace, |_, b| {
        if b == 0 {
            batches = stratified_batches(train.labels(), &settings.minority, cfg.batch_size, rng);
        }
        let labels: Vec<usize> = batches[b].iter().map(|&i| train.labels()[i]).collect();
        phase2_step(&labels, gmm_init, train, models, settings, opt, rng)
    })
}

/// Phase 3: an epoch has as many steps as a pass over `n_train` samples.
#[allow(clippy::too_many_arguments)]
pub fn train_phase3<R: Rng + ?Sized>(
    n_train: usize,
    gmm_init: &GmmParams,
    models: &mut ModelQuartet,
    settings: &PhaseSettings,
    cfg: &TrainConfig,
    opt: &mut Optimizers,
    rng: &mut R,
    trace: &mut LossTrace,
) -> Result<usize> {
    let steps = batches_per_epoch(n_train, cfg.batch_size);
    run_phase(3, cfg.max_epochs_phase3, steps, cfg.patience, cfg.min_rel_improvement, trace, |_, _| {
        phase3_step(cfg.batch_size, gmm_init, models, settings, opt, rng)
    })
}

/// Settings for fitting a stand-alone classifier on a labeled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("classifier `batch_size` must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("classifier `lr` must be finite and > 0".into()));
        }
        Ok(())
    }
}

/// Trains a freshly initialized network with softmax cross-entropy and Adam
/// on uniformly shuffled mini-batches.
pub fn fit_classifier(
    set: &LabeledImageSet,
    spec: &MlpSpec,
    cfg: &ClassifierConfig,
) -> Result<Network> {
    cfg.validate()?;
    if spec.input_dim() != set.shape().pixels() || spec.output_dim() != set.class_count() {
        return Err(Error::Shape(format!(
            "classifier maps {} -> {}, data has {} pixels and {} classes",
            spec.input_dim(),
            spec.output_dim(),
            set.shape().pixels(),
            set.class_count()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::new(spec.clone(), &mut rng);
    let mut adam = AdamState::for_network(
        &net.params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut order: Vec<usize> = (0..set.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = set.select(chunk);
            let n = chunk.len();
            let (logits, cache) = net.forward(batch.images().view())?;
            let (ce, grad) = softmax_cross_entropy(logits.view(), batch.labels(), &vec![1.0 / n as f64; n])?;
            sum += ce.sum();
            let (grads, _) = net.backward(&cache, grad.view())?;
            adam_step(&mut net.params, &grads, &mut adam)?;
        }
        debug!("classifier epoch {epoch}: mean loss {:.6}", sum / set.len().max(1) as f64);
    }
    Ok(net)
}
