// SPDX-License-Identifier: Apache-2.0

//! Stage zero (supervised base model), stage one (few-shot fine-tuning with gated
//! pseudo-labeling) and stage two (re-training from the base model with distillation
//! and source/target mixing), plus evaluation and best-model selection.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{
    augment_scan, build_pseudoval_stage1, build_pseudoval_stage2, draw_open_angle, polar_mix,
    PseudoValSet,
};
use crate::config::{FssLoss, TrainConfig};
use crate::linalg::Matrix;
use crate::losses::{ce_loss, kd_loss, lovasz_softmax, sce_loss, triplet_reg};
use crate::metrics::{AbsentClassPolicy, ConfusionMatrix};
use crate::model::{
    init_model, sgd_step, FeatureNorm, FeatureSpec, Gradients, Model,
    OptimizerState,
};
use crate::pcio::{LabelVec, LabeledScan, PointCloud};
use crate::schema::ClassSchema;
use crate::seed;
use crate::{Error, Result};

/// Features plus labels, ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub feats: Matrix,
    pub labels: LabelVec,
}

pub fn prepare(scan: &LabeledScan, spec: &FeatureSpec) -> Result<Prepared> {
    Ok(Prepared {
        feats: spec.compute(&scan.cloud)?,
        labels: scan.labels.clone(),
    })
}

pub fn prepare_all(scans: &[LabeledScan], spec: &FeatureSpec) -> Result<Vec<Prepared>> {
    scans.par_iter().map(|s| prepare(s, spec)).collect()
}

/// Per-point argmax of the model's logits; ties go to the lower class id.
pub fn generate_pseudo_labels(model: &Model, cloud: &PointCloud) -> Result<LabelVec> {
    model.predict(cloud)
}

// --- evaluation ------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub iou: Vec<Option<f64>>,
    pub miou_all: Option<f64>,
    pub miou_base: Option<f64>,
    pub miou_novel: Option<f64>,
}

impl EvalReport {
    pub fn from_confusion(
        confusion: ConfusionMatrix,
        schema: &ClassSchema,
        policy: AbsentClassPolicy,
    ) -> Self {
        let ids = |v: Vec<usize>| v.into_iter().map(|c| c as u32).collect::<Vec<u32>>();
        EvalReport {
            iou: confusion.iou_per_class(),
            miou_all: confusion.miou(None, policy),
            miou_base: confusion.miou(Some(&ids(schema.base_ids())), policy),
            miou_novel: confusion.miou(Some(&ids(schema.novel_ids())), policy),
            confusion,
        }
    }
}

fn check_model_schema(model: &Model, schema: &ClassSchema) -> Result<()> {
    let c = model.num_classes();
    if c != schema.num_classes() && c != schema.num_base() {
        return Err(Error::arg(format!(
            "model has {c} outputs; schema has {} base and {} total classes",
            schema.num_base(),
            schema.num_classes()
        )));
    }
    Ok(())
}

/// Confusion over prepared scans, accumulated in scan order.
pub fn evaluate_prepared(
    model: &Model,
    scans: &[Prepared],
    schema: &ClassSchema,
    policy: AbsentClassPolicy,
) -> Result<EvalReport> {
    check_model_schema(model, schema)?;
    if scans.is_empty() {
        return Err(Error::arg("evaluation needs at least one scan"));
    }
    let preds: Vec<LabelVec> = scans
        .par_iter()
        .map(|p| model.predict_features(&p.feats))
        .collect::<Result<_>>()?;
    let mut cm = ConfusionMatrix::new(schema.num_classes());
    for (p, s) in preds.iter().zip(scans) {
        cm.accumulate(p, &s.labels)?;
    }
    Ok(EvalReport::from_confusion(cm, schema, policy))
}

pub fn evaluate(
    model: &Model,
    scans: &[LabeledScan],
    schema: &ClassSchema,
    policy: AbsentClassPolicy,
) -> Result<EvalReport> {
    check_model_schema(model, schema)?;
    for s in scans {
        s.validate(schema)?;
    }
    evaluate_prepared(model, &prepare_all(scans, &model.feature)?, schema, policy)
}

// --- best-model selection --------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BestModelState {
    pub model: Option<Model>,
    /// Pseudo-validation mIoU of `model`; `None` if it was undefined.
    pub miou: Option<f64>,
    pub epoch: usize,
    /// Bumped on every replacement.
    pub version: u64,
}

impl BestModelState {
    /// Installs `current` if nothing is stored yet or `miou` is strictly greater than
    /// the stored value. Undefined mIoU ranks below every defined value.
    pub fn offer(&mut self, current: &Model, miou: Option<f64>, epoch: usize) -> bool {
        let better = match (&self.model, self.miou, miou) {
            (None, _, _) => true,
            (Some(_), None, Some(_)) => true,
            (Some(_), Some(best), Some(m)) => m > best,
            (Some(_), _, None) => false,
        };
        if better {
            self.model = Some(current.clone());
            self.miou = miou;
            self.epoch = epoch;
            self.version += 1;
        }
        better
    }
}

/// Evaluates `current` on the pseudo-validation scans (mIoU over all classes) and
/// offers it to `state`. Returns the report and whether the best model changed.
pub fn select_best(
    current: &Model,
    pseudoval: &[Prepared],
    schema: &ClassSchema,
    policy: AbsentClassPolicy,
    state: &mut BestModelState,
    epoch: usize,
) -> Result<(EvalReport, bool)> {
    let report = evaluate_prepared(current, pseudoval, schema, policy)?;
    let updated = state.offer(current, report.miou_all, epoch);
    Ok((report, updated))
}

// --- logging ---------------------------------------------------------------------

/// One line of a stage's metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub stage: u8,
    pub epoch: usize,
    pub miou_all: Option<f64>,
    pub miou_base: Option<f64>,
    pub miou_novel: Option<f64>,
    /// This evaluation replaced the best model.
    pub best: bool,
    pub best_miou: Option<f64>,
    /// Whether the pseudo-label term was active during the following epochs.
    pub ssl_active: bool,
}

impl EvalRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

pub fn records_to_jsonl(records: &[EvalRecord]) -> String {
    records.iter().map(|r| r.to_json_line() + "\n").collect()
}

/// Emitted whenever pseudo-labels are consumed by a loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PseudoLabelEvent {
    pub stage: u8,
    pub epoch: usize,
    pub scan: usize,
    /// Epoch at which the labeling model became the best model (stage one), or 0 for
    /// the fixed stage-one model used in stage two.
    pub source_epoch: usize,
    pub source_version: u64,
}

/// Hooks for tests and progress reporting.
pub trait TrainObserver {
    fn on_pseudo_labels(&mut self, _event: &PseudoLabelEvent) {}
    fn on_eval(&mut self, _record: &EvalRecord) {}
}

/// Observer that ignores everything.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

// --- training plumbing -----------------------------------------------------------

/// Loss value and gradients for one scan, before weighting.
struct ScanGrad {
    value: f64,
    grads: Gradients,
}

/// Gradient contributions on the logits of one forward pass.
struct LogitTerms {
    value: f64,
    grad_logits: Matrix,
    grad_embedding: Option<Matrix>,
}

impl LogitTerms {
    fn new(n: usize, c: usize) -> Self {
        LogitTerms {
            value: 0.0,
            grad_logits: Matrix::zeros(n, c),
            grad_embedding: None,
        }
    }

    fn add(&mut self, value: f64, grad: &Matrix, w: f64) {
        self.value += w * value;
        self.grad_logits.add_scaled(grad, w);
    }

    fn add_embedding(&mut self, value: f64, grad: &Matrix, w: f64) {
        self.value += w * value;
        match &mut self.grad_embedding {
            Some(g) => g.add_scaled(grad, w),
            None => {
                let mut g = grad.clone();
                g.scale(w);
                self.grad_embedding = Some(g);
            }
        }
    }
}

/// Supervised loss on labeled points, optionally distilled from `teacher`.
fn supervised_grad(
    model: &Model,
    scan: &Prepared,
    cfg: &TrainConfig,
    triplet_seed: u64,
    kd: Option<(&Model, &[usize], f64)>,
) -> Result<ScanGrad> {
    let (logits, cache) = model.forward(&scan.feats)?;
    let mut t = LogitTerms::new(logits.rows(), logits.cols());
    let ce = ce_loss(&logits, &scan.labels)?;
    t.add(ce.value, &ce.grad, 1.0);
    match cfg.fss_loss {
        FssLoss::Ce => {}
        FssLoss::CeLovasz => {
            let l = lovasz_softmax(&logits, &scan.labels, None)?;
            t.add(l.value, &l.grad, cfg.lovasz_weight);
        }
        FssLoss::CeTriplet => {
            let l = triplet_reg(
                cache.embedding(),
                &scan.labels,
                cfg.triplet_margin,
                cfg.triplet_max_anchors,
                triplet_seed,
            )?;
            t.add_embedding(l.value, &l.grad, cfg.triplet_weight);
        }
    }
    if let Some((teacher, base_ids, w)) = kd {
        let tl = teacher.logits(&scan.feats)?;
        let l = kd_loss(&logits, &tl, base_ids, cfg.kd_temperature)?;
        t.add(l.value, &l.grad, w);
    }
    let grads = model.backward_with_embedding(&cache, &t.grad_logits, t.grad_embedding.as_ref())?;
    Ok(ScanGrad {
        value: t.value,
        grads,
    })
}

/// Symmetric cross-entropy against pseudo-labels, optionally plus distillation.
fn pseudo_label_grad(
    model: &Model,
    feats: &Matrix,
    labels: &[u32],
    cfg: &TrainConfig,
    kd: Option<(&Model, &[usize])>,
) -> Result<ScanGrad> {
    let (logits, cache) = model.forward(feats)?;
    let mut t = LogitTerms::new(logits.rows(), logits.cols());
    let l = sce_loss(&logits, labels, cfg.sce)?;
    t.add(l.value, &l.grad, 1.0);
    if let Some((teacher, base_ids)) = kd {
        let tl = teacher.logits(feats)?;
        let l = kd_loss(&logits, &tl, base_ids, cfg.kd_temperature)?;
        t.add(l.value, &l.grad, 1.0);
    }
    Ok(ScanGrad {
        value: t.value,
        grads: model.backward(&cache, &t.grad_logits)?,
    })
}

/// Sum over terms of `weight * mean(term grads)`, accumulated in a fixed order.
fn combine(model: &Model, terms: &[(f64, Vec<ScanGrad>)]) -> (f64, Gradients) {
    let mut total = Gradients::zeros_like(model);
    let mut value = 0.0;
    for (w, grads) in terms {
        if grads.is_empty() {
            continue;
        }
        let s = w / grads.len() as f64;
        for g in grads {
            total.add_scaled(&g.grads, s);
            value += s * g.value;
        }
    }
    (value, total)
}

fn train_example(
    scan: &LabeledScan,
    cfg: &TrainConfig,
    schema: &ClassSchema,
    aug_seed: u64,
) -> Result<Prepared> {
    if cfg.augment_train {
        prepare(&augment_scan(scan, &cfg.augment, schema, aug_seed), &cfg.feature)
    } else {
        prepare(scan, &cfg.feature)
    }
}

fn is_eval_epoch(epoch: usize, last: usize, every: usize) -> bool {
    epoch % every == 0 || epoch == last
}

fn check_labels(scans: &[LabeledScan], schema: &ClassSchema, what: &str) -> Result<()> {
    for (i, s) in scans.iter().enumerate() {
        s.validate(schema)
            .map_err(|e| Error::Data(format!("{what} scan {i}: {e}")))?;
    }
    Ok(())
}

/// Pool of training data for the three stages.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub schema: &'a ClassSchema,
    /// Labeled good-weather scans.
    pub source: &'a [LabeledScan],
    /// The K labeled adverse-weather shots.
    pub shots: &'a [LabeledScan],
    /// Unlabeled adverse-weather scans.
    pub unlabeled: &'a [PointCloud],
}

/// Result of a fine-tuning stage.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub best: BestModelState,
    pub final_model: Model,
    pub records: Vec<EvalRecord>,
}

impl StageOutcome {
    pub fn best_model(&self) -> &Model {
        self.best.model.as_ref().unwrap_or(&self.final_model)
    }
}

/// Stage-zero output; there is no validation data for selection, so the last model
/// is returned.
#[derive(Debug, Clone)]
pub struct Stage0Outcome {
    pub model: Model,
    pub records: Vec<EvalRecord>,
}

// --- stage zero ------------------------------------------------------------------

/// Supervised base model over the base classes of the source scans.
pub fn train_stage0(
    source: &[LabeledScan],
    schema: &ClassSchema,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Stage0Outcome> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::arg("stage zero needs at least one source scan"));
    }
    check_labels(source, schema, "source")?;
    for (i, s) in source.iter().enumerate() {
        if let Some(&c) = s.labels.iter().find(|&&c| schema.is_novel(c)) {
            return Err(Error::Data(format!(
                "source scan {i} contains novel class {}",
                schema.name(c).unwrap_or("?")
            )));
        }
    }
    let plain = prepare_all(source, &cfg.feature)?;
    let mut model = init_model(
        crate::model::INPUT_DIM,
        &cfg.hidden,
        schema.num_base(),
        cfg.feature,
        seed::derive(cfg.seed, "stage0-init", 0),
    )?;
    model.norm = FeatureNorm::fit(plain.iter().map(|p| &p.feats))?;
    let mut opt = OptimizerState::new(&model, cfg.sgd());
    let mut order: Vec<usize> = (0..source.len()).collect();
    let mut records = Vec::new();
    let mut step = 0u64;
    for epoch in 1..=cfg.stage0_epochs {
        order.shuffle(&mut seed::stream(cfg.seed, "stage0-shuffle", epoch as u64));
        for batch in order.chunks(cfg.stage0_batch) {
            let grads: Vec<ScanGrad> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let ex = if cfg.augment_train {
                        let s = seed::derive(cfg.seed, "stage0-aug", step * 1_000_003 + j as u64);
                        train_example(&source[i], cfg, schema, s)?
                    } else {
                        plain[i].clone()
                    };
                    supervised_grad(&model, &ex, cfg, seed::derive(cfg.seed, "stage0-triplet", step), None)
                })
                .collect::<Result<_>>()?;
            let (_, g) = combine(&model, &[(1.0, grads)]);
            sgd_step(&mut model, &g, &mut opt)?;
            step += 1;
        }
        if is_eval_epoch(epoch, cfg.stage0_epochs, cfg.eval_every) {
            let r = evaluate_prepared(&model, &plain, schema, cfg.miou_policy)?;
            let rec = EvalRecord {
                stage: 0,
                epoch,
                miou_all: r.miou_all,
                miou_base: r.miou_base,
                miou_novel: r.miou_novel,
                best: false,
                best_miou: None,
                ssl_active: false,
            };
            log::debug!("stage 0 epoch {epoch}: train mIoU {:?}", r.miou_all);
            observer.on_eval(&rec);
            records.push(rec);
        }
        if !model.is_finite() {
            return Err(Error::Data(format!("stage 0 diverged at epoch {epoch}")));
        }
    }
    Ok(Stage0Outcome { model, records })
}

// --- stages one and two ----------------------------------------------------------

/// Shared seed for the novel rows of the classifier, so that stages one and two start
/// from the same extended model.
fn head_seed(cfg: &TrainConfig) -> u64 {
    seed::derive(cfg.seed, "head-extension", 0)
}

pub fn extended_base_model(phi0: &Model, schema: &ClassSchema, cfg: &TrainConfig) -> Result<Model> {
    if phi0.num_classes() != schema.num_base() {
        return Err(Error::arg(format!(
            "base model has {} outputs, schema has {} base classes",
            phi0.num_classes(),
            schema.num_base()
        )));
    }
    if schema.num_novel() == 0 {
        return Err(Error::arg("schema has no novel classes"));
    }
    phi0.extend_classifier(schema.num_novel(), head_seed(cfg))
}

/// Augmented shots for one step. Uses the same seed streams in both stages, so that
/// the shot sequence depends only on the seed and the step index.
fn shot_examples(
    data: &TrainData,
    idx: &[usize],
    cfg: &TrainConfig,
    step: u64,
    plain: &[Prepared],
) -> Result<Vec<Prepared>> {
    idx.par_iter()
        .enumerate()
        .map(|(j, &i)| {
            if cfg.augment_train {
                let s = seed::derive(cfg.seed, "shot-aug", step * 1_000_003 + j as u64);
                train_example(&data.shots[i], cfg, data.schema, s)
            } else {
                Ok(plain[i].clone())
            }
        })
        .collect()
}

struct FineTune<'a> {
    stage: u8,
    data: TrainData<'a>,
    cfg: &'a TrainConfig,
    epochs: usize,
    model: Model,
    opt: OptimizerState,
    pseudoval: Vec<Prepared>,
    plain_shots: Vec<Prepared>,
    best: BestModelState,
    records: Vec<EvalRecord>,
}

impl<'a> FineTune<'a> {
    fn new(
        stage: u8,
        data: TrainData<'a>,
        cfg: &'a TrainConfig,
        epochs: usize,
        model: Model,
        pseudoval: &PseudoValSet,
    ) -> Result<Self> {
        Ok(FineTune {
            stage,
            data,
            cfg,
            epochs,
            opt: OptimizerState::new(&model, cfg.sgd()),
            model,
            pseudoval: prepare_all(&pseudoval.scans, &cfg.feature)?,
            plain_shots: prepare_all(data.shots, &cfg.feature)?,
            best: BestModelState::default(),
            records: Vec::new(),
        })
    }

    /// Runs all epochs. `extra` supplies the non-supervised terms for a step given
    /// `(model, epoch, step)` and returns `(weight, grads)` pairs.
    fn run(
        mut self,
        observer: &mut dyn TrainObserver,
        shot_kd: Option<(&Model, &[usize], f64)>,
        mut extra: impl FnMut(&Model, &BestModelState, usize, u64, &mut dyn TrainObserver) -> Result<Vec<(f64, Vec<ScanGrad>)>>,
        mut after_eval: impl FnMut(&EvalReport, &BestModelState) -> bool,
    ) -> Result<StageOutcome> {
        let cfg = self.cfg;
        let k = self.data.shots.len();
        let mut order: Vec<usize> = (0..k).collect();
        let mut step = 0u64;
        for epoch in 1..=self.epochs {
            order.shuffle(&mut seed::stream(cfg.seed, "shot-shuffle", epoch as u64));
            for group in order.chunks(cfg.shot_batch) {
                let examples = shot_examples(&self.data, group, cfg, step, &self.plain_shots)?;
                let model = &self.model;
                let fss: Vec<ScanGrad> = examples
                    .par_iter()
                    .map(|ex| {
                        supervised_grad(
                            model,
                            ex,
                            cfg,
                            seed::derive(cfg.seed, "shot-triplet", step),
                            shot_kd,
                        )
                    })
                    .collect::<Result<_>>()?;
                let mut terms = vec![(1.0, fss)];
                terms.extend(extra(model, &self.best, epoch, step, observer)?);
                let (_, g) = combine(model, &terms);
                sgd_step(&mut self.model, &g, &mut self.opt)?;
                step += 1;
            }
            if !self.model.is_finite() {
                return Err(Error::Data(format!(
                    "stage {} diverged at epoch {epoch}",
                    self.stage
                )));
            }
            if is_eval_epoch(epoch, self.epochs, cfg.eval_every) {
                let (report, updated) = select_best(
                    &self.model,
                    &self.pseudoval,
                    self.data.schema,
                    cfg.miou_policy,
                    &mut self.best,
                    epoch,
                )?;
                let ssl_active = after_eval(&report, &self.best);
                let rec = EvalRecord {
                    stage: self.stage,
                    epoch,
                    miou_all: report.miou_all,
                    miou_base: report.miou_base,
                    miou_novel: report.miou_novel,
                    best: updated,
                    best_miou: self.best.miou,
                    ssl_active,
                };
                log::debug!(
                    "stage {} epoch {epoch}: pseudo-val mIoU {:?} (best {:?} @ {})",
                    self.stage,
                    report.miou_all,
                    self.best.miou,
                    self.best.epoch
                );
                observer.on_eval(&rec);
                self.records.push(rec);
            }
        }
        Ok(StageOutcome {
            best: self.best,
            final_model: self.model,
            records: self.records,
        })
    }
}

/// Few-shot fine-tuning of the extended base model on the shots. Once the
/// pseudo-validation mIoU reaches `gamma`, every step also fits `ssl_batch` unlabeled
/// scans to pseudo-labels from the current best model with symmetric cross-entropy.
pub fn train_stage1(
    phi0: &Model,
    data: TrainData,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<StageOutcome> {
    cfg.validate()?;
    if data.shots.is_empty() {
        return Err(Error::arg("stage one needs at least one labeled shot"));
    }
    check_labels(data.shots, data.schema, "shot")?;
    let model = extended_base_model(phi0, data.schema, cfg)?;
    let pseudoval = build_pseudoval_stage1(
        data.shots,
        cfg.pseudoval_size,
        &cfg.augment,
        data.schema,
        seed::derive(cfg.seed, "stage1-pseudoval", 0),
    )?;
    let ft = FineTune::new(1, data, cfg, cfg.stage1_epochs, model, &pseudoval)?;

    let ssl_possible = cfg.omega0 > 0.0 && !data.unlabeled.is_empty();
    let mut unl_feats: Vec<Option<Matrix>> = vec![None; data.unlabeled.len()];
    let mut labels: HashMap<usize, LabelVec> = HashMap::new();
    let mut labels_version = 0u64;
    let gate = std::cell::Cell::new(false);

    let extra = |model: &Model,
                 best: &BestModelState,
                 epoch: usize,
                 step: u64,
                 obs: &mut dyn TrainObserver|
     -> Result<Vec<(f64, Vec<ScanGrad>)>> {
        let Some(best_model) = best.model.as_ref().filter(|_| ssl_possible && gate.get()) else {
            return Ok(Vec::new());
        };
        if labels_version != best.version {
            labels.clear();
            labels_version = best.version;
        }
        let mut rng = seed::stream(cfg.seed, "stage1-ssl", step);
        let picks: Vec<usize> = (0..cfg.ssl_batch)
            .map(|_| rng.random_range(0..data.unlabeled.len()))
            .collect();
        let mut missing: Vec<usize> = picks.iter().copied().filter(|&i| unl_feats[i].is_none()).collect();
        missing.sort_unstable();
        missing.dedup();
        let fresh: Vec<Matrix> = missing
            .par_iter()
            .map(|&i| cfg.feature.compute(&data.unlabeled[i]))
            .collect::<Result<_>>()?;
        for (i, f) in missing.into_iter().zip(fresh) {
            unl_feats[i] = Some(f);
        }
        for &i in &picks {
            if !labels.contains_key(&i) {
                let f = unl_feats[i].as_ref().expect("features computed");
                labels.insert(i, best_model.predict_features(f)?);
            }
            obs.on_pseudo_labels(&PseudoLabelEvent {
                stage: 1,
                epoch,
                scan: i,
                source_epoch: best.epoch,
                source_version: best.version,
            });
        }
        let labels = &labels;
        let unl_feats = &unl_feats;
        let grads: Vec<ScanGrad> = picks
            .par_iter()
            .enumerate()
            .map(|(j, &i)| {
                if cfg.augment_train {
                    // labels come from the clean scan, the student sees an augmented view
                    let scan = LabeledScan::new(data.unlabeled[i].clone(), labels[&i].clone())?;
                    let s = seed::derive(cfg.seed, "ssl-aug", step * 1_000_003 + j as u64);
                    let ex = train_example(&scan, cfg, data.schema, s)?;
                    pseudo_label_grad(model, &ex.feats, &ex.labels, cfg, None)
                } else {
                    let f = unl_feats[i].as_ref().expect("features computed");
                    pseudo_label_grad(model, f, &labels[&i], cfg, None)
                }
            })
            .collect::<Result<_>>()?;
        Ok(vec![(cfg.omega0, grads)])
    };
    let after_eval = |report: &EvalReport, _best: &BestModelState| {
        let reached = report.miou_all.is_some_and(|m| m >= cfg.gamma);
        let open = if cfg.gate_hysteresis {
            gate.get() || reached
        } else {
            reached
        };
        if open && !gate.get() {
            log::info!("stage 1: pseudo-label term enabled");
        }
        gate.set(open);
        open && ssl_possible
    };
    ft.run(observer, None, extra, after_eval)
}

/// Re-training from the extended base model: few-shot loss on the shots, distillation
/// from the base model on the shots, and pseudo-labeled unlabeled scans polar-mixed
/// with source scans (symmetric cross-entropy plus distillation).
pub fn train_stage2(
    phi0: &Model,
    phi1_best: &Model,
    data: TrainData,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<StageOutcome> {
    cfg.validate()?;
    if data.shots.is_empty() {
        return Err(Error::arg("stage two needs at least one labeled shot"));
    }
    if data.source.is_empty() {
        return Err(Error::arg("stage two needs source scans"));
    }
    check_labels(data.shots, data.schema, "shot")?;
    check_labels(data.source, data.schema, "source")?;
    if phi1_best.num_classes() != data.schema.num_classes() {
        return Err(Error::arg("stage-one model does not cover every class"));
    }
    let model = extended_base_model(phi0, data.schema, cfg)?;
    let pseudoval = build_pseudoval_stage2(
        data.shots,
        data.source,
        cfg.pseudoval_size,
        &cfg.augment,
        data.schema,
        seed::derive(cfg.seed, "stage2-pseudoval", 0),
    )?;
    let ft = FineTune::new(2, data, cfg, cfg.stage2_epochs, model, &pseudoval)?;
    let base_ids = data.schema.base_ids();

    let mix_possible = cfg.omega2 > 0.0 && !data.unlabeled.is_empty();
    let mut pseudo: Vec<Option<LabeledScan>> = vec![None; data.unlabeled.len()];
    let extra = |model: &Model,
                 _best: &BestModelState,
                 epoch: usize,
                 step: u64,
                 obs: &mut dyn TrainObserver|
     -> Result<Vec<(f64, Vec<ScanGrad>)>> {
        if !mix_possible {
            return Ok(Vec::new());
        }
        let mut rng = seed::stream(cfg.seed, "stage2-mix", step);
        let draws: Vec<(usize, usize, f64, f64)> = (0..cfg.mix_batch)
            .map(|_| {
                let u = rng.random_range(0..data.unlabeled.len());
                let s = rng.random_range(0..data.source.len());
                let theta = draw_open_angle(&mut rng);
                let start = rng.random::<f64>() * std::f64::consts::TAU;
                (u, s, theta, start)
            })
            .collect();
        for &(u, ..) in &draws {
            if pseudo[u].is_none() {
                let cloud = &data.unlabeled[u];
                let labels = generate_pseudo_labels(phi1_best, cloud)?;
                pseudo[u] = Some(LabeledScan::new(cloud.clone(), labels)?);
            }
            obs.on_pseudo_labels(&PseudoLabelEvent {
                stage: 2,
                epoch,
                scan: u,
                source_epoch: 0,
                source_version: 0,
            });
        }
        let pseudo = &pseudo;
        let grads: Vec<ScanGrad> = draws
            .par_iter()
            .enumerate()
            .map(|(j, &(u, s, theta, start))| {
                let a = pseudo[u].as_ref().expect("pseudo-labeled");
                let b = &data.source[s];
                let mixed = if cfg.augment_train {
                    let at = step * 1_000_003 + j as u64;
                    let a = augment_scan(a, &cfg.augment, data.schema, seed::derive(cfg.seed, "mix-aug-target", at));
                    let b = augment_scan(b, &cfg.augment, data.schema, seed::derive(cfg.seed, "mix-aug-source", at));
                    polar_mix(&a, &b, theta, start)?
                } else {
                    polar_mix(a, b, theta, start)?
                };
                let feats = cfg.feature.compute(&mixed.cloud)?;
                pseudo_label_grad(model, &feats, &mixed.labels, cfg, Some((phi0, &base_ids)))
            })
            .collect::<Result<_>>()?;
        Ok(vec![(cfg.omega2, grads)])
    };
    let shot_kd = (cfg.omega1 > 0.0).then_some((phi0, base_ids.as_slice(), cfg.omega1));
    ft.run(observer, shot_kd, extra, |_, _| mix_possible)
}
