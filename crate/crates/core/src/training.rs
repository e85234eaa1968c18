//! Pretraining, stage 1 (segmentation network, auxiliary decoders and error
//! modules on labeled data) and stage 2 (mean teacher with masked pseudo
//! labels and pixel contrast).

use std::collections::BTreeMap;

use eln_autograd::{AdamW, AdamWConfig, BoundParams, Graph, MomentState, ParamStore, Tensor, Var};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::datagen::{augment_shared, perturb_photometric, stack_images, stack_labels, AugmentationConfig, DatasetSplit, Sample};
use crate::losses::{self, BinaryMap, ContrastiveConfig, LossDiagnostics};
use crate::networks::{
    aux_prefix, build_eln_input, is_student_param, softmax_and_entropy, ErrorModule, SegNetwork, MAIN_DECODER,
};
use crate::rng::{self, tag};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, weight_decay: 1e-5, labeled_batch: 4, unlabeled_batch: 4 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("optim.learning_rate must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("optim.weight_decay must be >= 0".into()));
        }
        if self.labeled_batch == 0 || self.unlabeled_batch == 0 {
            return Err(Error::Config("optim batch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { learning_rate: self.learning_rate, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Stage1,
    Stage2,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "stage1" => Ok(Stage::Stage1),
            "stage2" => Ok(Stage::Stage2),
            other => Err(Error::Checkpoint(format!("unknown stage `{other}`"))),
        }
    }

    fn id(self) -> u64 {
        self as u64
    }
}

/// Where the stage-2 validity mask comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    Eln,
    Secn,
    /// Teacher max-probability ≥ `threshold`.
    Threshold,
    /// Every pseudo label is kept.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Options {
    pub mask: MaskSource,
    pub threshold: f64,
    pub use_pseudo: bool,
    pub use_contra: bool,
    /// Stop optimizing the error modules in stage 2.
    pub freeze_eln: bool,
}

impl Default for Stage2Options {
    fn default() -> Self {
        Self { mask: MaskSource::Eln, threshold: 0.7, use_pseudo: true, use_contra: true, freeze_eln: false }
    }
}

/// Everything the step functions need besides data and state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alphas: Vec<f64>,
    /// Error modules trained in stage 1 (and kept training in stage 2).
    pub error_modules: Vec<ErrorModule>,
    pub optim: OptimConfig,
    pub ema_beta: f64,
    pub contrastive: ContrastiveConfig,
    pub augment: AugmentationConfig,
    pub stage2: Stage2Options,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alphas: vec![20.0, 50.0],
            error_modules: vec![ErrorModule::Eln, ErrorModule::Secn],
            optim: OptimConfig::default(),
            ema_beta: 0.995,
            contrastive: ContrastiveConfig::default(),
            augment: AugmentationConfig::default(),
            stage2: Stage2Options::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_aux_decoders: usize) -> Result<()> {
        if self.alphas.len() != num_aux_decoders {
            return Err(Error::Config(format!(
                "alphas has {} entries but the model has K = {num_aux_decoders} auxiliary decoders",
                self.alphas.len()
            )));
        }
        if self.alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::Config("alphas must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return Err(Error::Config(format!("ema_beta must be in [0, 1), got {}", self.ema_beta)));
        }
        if !(self.stage2.threshold > 0.0 && self.stage2.threshold < 1.0) {
            return Err(Error::Config("stage2.threshold must be in (0, 1)".into()));
        }
        let needs = match self.stage2.mask {
            MaskSource::Eln => Some(ErrorModule::Eln),
            MaskSource::Secn => Some(ErrorModule::Secn),
            _ => None,
        };
        if let Some(m) = needs {
            if !self.error_modules.contains(&m) {
                return Err(Error::Config(format!("stage2.mask uses {m:?} but error_modules does not train it")));
            }
        }
        self.optim.validate()?;
        self.contrastive.validate()?;
        self.augment.validate()
    }
}

/// Mean-teacher parameters `θ̃` with update ratio `β`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub teacher: ParamStore<f32>,
    pub beta: f64,
    pub step: u64,
}

impl EmaState {
    /// Exact copy of the student path of `params`.
    pub fn from_student(params: &ParamStore<f32>, beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::Config(format!("ema beta must be in [0, 1), got {beta}")));
        }
        let mut teacher = ParamStore::new();
        for (k, v) in params.iter().filter(|(k, _)| is_student_param(k)) {
            teacher.insert(k.clone(), v.clone());
        }
        Ok(Self { teacher, beta, step: 0 })
    }
}

/// `θ̃ ← β θ̃ + (1 − β) θ` for every teacher parameter. `student` may hold
/// extra (non-student) parameters, which are ignored.
pub fn ema_update(ema: &mut EmaState, student: &ParamStore<f32>) -> Result<()> {
    let student_paths = student.iter().filter(|(k, _)| is_student_param(k)).count();
    if student_paths != ema.teacher.len() {
        return Err(Error::Invalid(format!(
            "teacher has {} parameters, student {student_paths}",
            ema.teacher.len()
        )));
    }
    for (name, t) in ema.teacher.iter() {
        let s = student.get(name).map_err(|_| Error::Invalid(format!("student lacks teacher parameter {name}")))?;
        if s.shape() != t.shape() {
            return Err(Error::Invalid(format!("shape mismatch for {name}: {:?} vs {:?}", t.shape(), s.shape())));
        }
    }
    let b = ema.beta;
    for (name, t) in ema.teacher.iter_mut() {
        let s = student.get(name).expect("checked");
        for (x, &y) in t.data_mut().iter_mut().zip(s.data()) {
            *x = (b * f64::from(*x) + (1.0 - b) * f64::from(y)) as f32;
        }
    }
    ema.step += 1;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// The two views of an unlabeled batch: same flip, photometric perturbation
/// only on the student view.
#[derive(Clone, Debug)]
pub struct UnlabeledBatch {
    pub teacher_view: Tensor<f32>,
    pub student_view: Tensor<f32>,
}

fn pick<R: Rng>(n: usize, k: usize, r: &mut R) -> Vec<usize> {
    if k <= n {
        index::sample(r, n, k).into_vec()
    } else {
        (0..k).map(|_| r.random_range(0..n)).collect()
    }
}

pub fn sample_labeled_batch(
    split: &DatasetSplit,
    config: &TrainConfig,
    seed: u64,
    stage: Stage,
    iteration: u64,
) -> Result<LabeledBatch> {
    if split.labeled.is_empty() {
        return Err(Error::Config("no labeled samples".into()));
    }
    let mut r = rng::stream(&[tag::LABELED_BATCH, seed, stage.id(), iteration]);
    let chosen: Vec<Sample> = pick(split.labeled.len(), config.optim.labeled_batch, &mut r)
        .into_iter()
        .map(|i| augment_shared(&split.labeled[i], &config.augment, &mut r))
        .collect();
    let labels = chosen
        .iter()
        .map(|s| s.label.as_ref().ok_or_else(|| Error::Invalid("labeled batch contains an unlabeled sample".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledBatch { images: stack_images(chosen.iter().map(|s| &s.image))?, labels: stack_labels(labels) })
}

pub fn sample_unlabeled_batch(split: &DatasetSplit, config: &TrainConfig, seed: u64, iteration: u64) -> Result<UnlabeledBatch> {
    if split.unlabeled.is_empty() {
        return Err(Error::Config("stage 2 needs unlabeled samples".into()));
    }
    let mut r = rng::stream(&[tag::UNLABELED_BATCH, seed, iteration]);
    let mut teacher = Vec::new();
    let mut student = Vec::new();
    for i in pick(split.unlabeled.len(), config.optim.unlabeled_batch, &mut r) {
        let flipped = augment_shared(&split.unlabeled[i], &config.augment, &mut r);
        student.push(perturb_photometric(&flipped.image, &config.augment, &mut r));
        teacher.push(flipped.image);
    }
    Ok(UnlabeledBatch { teacher_view: stack_images(&teacher)?, student_view: stack_images(&student)? })
}

/// One JSON line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub iter: u64,
    pub losses: BTreeMap<String, f64>,
    /// Per-decoder CE, main decoder first.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub decoder_ce: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl StepRecord {
    fn new(stage: Stage, iter: u64) -> Self {
        Self {
            stage,
            iter,
            losses: BTreeMap::new(),
            decoder_ce: Vec::new(),
            gate_fraction: None,
            valid_fraction: None,
            miou: None,
            warnings: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub stage: Stage,
    /// Steps completed in the current stage.
    pub iteration: u64,
    pub params: ParamStore<f32>,
    /// Present in stage 2 only.
    pub teacher: Option<EmaState>,
    pub optimizer: AdamW<f32>,
}

impl TrainState {
    pub fn new(params: ParamStore<f32>, optim: &OptimConfig) -> Self {
        Self { stage: Stage::Pretrain, iteration: 0, params, teacher: None, optimizer: AdamW::new(optim.adamw()) }
    }

    /// Moves to `stage` with a fresh optimizer; entering stage 2 copies the
    /// student into the teacher.
    pub fn enter_stage(&mut self, stage: Stage, config: &TrainConfig) -> Result<()> {
        if stage < self.stage {
            return Err(Error::Invalid(format!("cannot go back from {} to {}", self.stage.as_str(), stage.as_str())));
        }
        self.stage = stage;
        self.iteration = 0;
        self.optimizer = AdamW::new(config.optim.adamw());
        self.teacher = match stage {
            Stage::Stage2 => Some(EmaState::from_student(&self.params, config.ema_beta)?),
            _ => None,
        };
        Ok(())
    }

    pub fn to_checkpoint(&self, config: serde_json::Value, config_hash: &str, extra: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint {
            stage: self.stage.as_str().to_string(),
            iteration: self.iteration,
            config,
            config_hash: config_hash.to_string(),
            extra: serde_json::json!({}),
            tensors: BTreeMap::new(),
        };
        ck.insert_group("", &self.params);
        let mut steps = serde_json::Map::new();
        for (name, m) in self.optimizer.state() {
            ck.tensors.insert(format!("optim.m/{name}"), m.first.clone());
            ck.tensors.insert(format!("optim.v/{name}"), m.second.clone());
            steps.insert(name.clone(), m.step.into());
        }
        let mut meta = serde_json::json!({ "optim_steps": steps, "user": extra });
        if let Some(ema) = &self.teacher {
            ck.insert_group("teacher/", &ema.teacher);
            meta["ema"] = serde_json::json!({ "beta": ema.beta, "step": ema.step });
        }
        ck.extra = meta;
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, optim: &OptimConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        for (k, v) in &ck.tensors {
            if !k.contains('/') {
                params.insert(k.clone(), v.clone());
            }
        }
        let m = ck.group("optim.m/");
        let v = ck.group("optim.v/");
        let steps = ck.extra.get("optim_steps").and_then(|s| s.as_object()).cloned().unwrap_or_default();
        let mut state = BTreeMap::new();
        for (name, first) in m.iter() {
            let second = v.get(name).map_err(|_| Error::Checkpoint(format!("missing second moment of {name}")))?;
            let step = steps
                .get(name)
                .and_then(|s| s.as_u64())
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer step of {name}")))?;
            state.insert(name.clone(), MomentState { step, first: first.clone(), second: second.clone() });
        }
        let mut optimizer = AdamW::new(optim.adamw());
        optimizer.set_state(state);
        let teacher = match ck.extra.get("ema") {
            Some(e) => Some(EmaState {
                teacher: ck.group("teacher/"),
                beta: e["beta"].as_f64().ok_or_else(|| Error::Checkpoint("bad ema beta".into()))?,
                step: e["step"].as_u64().ok_or_else(|| Error::Checkpoint("bad ema step".into()))?,
            }),
            None => None,
        };
        Ok(Self { stage: Stage::parse(&ck.stage)?, iteration: ck.iteration, params, teacher, optimizer })
    }
}

/// The user part of a checkpoint's `extra` field.
pub fn checkpoint_user_extra(ck: &Checkpoint) -> serde_json::Value {
    ck.extra.get("user").cloned().unwrap_or(serde_json::Value::Null)
}

/// Network plus training hyper-parameters; stateless otherwise.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: SegNetwork,
    pub config: TrainConfig,
    pub seed: u64,
}

struct LabeledParts<'g> {
    total: Var<'g, f32>,
}

fn f(v: &Var<'_, f32>) -> f64 {
    f64::from(v.value().item())
}

impl Trainer {
    pub fn new(net: SegNetwork, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate(net.config.num_aux_decoders)?;
        Ok(Self { net, config, seed })
    }

    /// Fresh parameters for every network this configuration trains.
    pub fn init_state(&self) -> TrainState {
        TrainState::new(self.net.init_params(self.seed, &self.config.error_modules), &self.config.optim)
    }

    fn check_stage(state: &TrainState, stage: Stage) -> Result<()> {
        if state.stage != stage {
            return Err(Error::Invalid(format!(
                "state is in {}, step requires {}",
                state.stage.as_str(),
                stage.as_str()
            )));
        }
        Ok(())
    }

    fn apply(&self, state: &mut TrainState, g: &Graph<f32>, bound: &BoundParams<'_, f32>, total: Var<'_, f32>) -> Result<()> {
        let mut grads = g.backward(total)?;
        let grads = bound.gradients(&mut grads);
        state.optimizer.step(&mut state.params, &grads)?;
        state.iteration += 1;
        Ok(())
    }

    /// One step on `L_sup` for the encoder and main decoder only.
    pub fn pretrain_step(&self, state: &mut TrainState, batch: &LabeledBatch) -> Result<StepRecord> {
        Self::check_stage(state, Stage::Pretrain)?;
        let mut rec = StepRecord::new(Stage::Pretrain, state.iteration);
        let params = state.params.clone();
        let g = Graph::new();
        let bound = params.bind(&g, |n| is_student_param(n).then_some(true));
        let feats = self.net.encoder_forward(&bound, g.constant(batch.images.clone()))?;
        let main = self.net.decoder_forward(&bound, MAIN_DECODER, &feats)?;
        let (sup, _) = losses::sup_loss(main.logits, &batch.labels)?;
        rec.losses.insert("sup".into(), f(&sup));
        rec.losses.insert("total".into(), f(&sup));
        self.apply(state, &g, &bound, sup)?;
        Ok(rec)
    }

    /// `L_sup + L_aux + L_ELN` (and the s-ECN CE when trained) on one labeled batch.
    fn labeled_objective<'g>(
        &self,
        g: &'g Graph<f32>,
        bound: &BoundParams<'g, f32>,
        batch: &LabeledBatch,
        train_error_modules: bool,
        rec: &mut StepRecord,
    ) -> Result<LabeledParts<'g>> {
        let k = self.net.config.num_aux_decoders;
        let feats = self.net.encoder_forward(bound, g.constant(batch.images.clone()))?;
        let main = self.net.decoder_forward(bound, MAIN_DECODER, &feats)?;
        let (sup, _) = losses::sup_loss(main.logits, &batch.labels)?;
        let detached = feats.detach();
        let mut aux_logits = Vec::with_capacity(k);
        for i in 1..=k {
            aux_logits.push(self.net.decoder_forward(bound, &aux_prefix(i), &detached)?.logits);
        }
        let (aux, aux_diag) = losses::aux_loss(main.logits, &aux_logits, &batch.labels, &self.config.alphas)?;
        rec.losses.insert("sup".into(), f(&sup));
        rec.losses.insert("aux".into(), aux_diag.value);
        rec.decoder_ce = std::iter::once(f(&sup)).chain(aux_diag.terms.iter().copied()).collect();
        rec.gate_fraction = aux_diag.gate_fraction();
        let mut total = losses::labeled_total(sup, aux, None)?;

        if train_error_modules && !self.config.error_modules.is_empty() {
            // the K+1 predictions become one constant batch for the error modules
            let mut inputs = Vec::with_capacity(k + 1);
            let mut masks = Vec::with_capacity(k + 1);
            for logits in std::iter::once(main.logits).chain(aux_logits.iter().copied()) {
                let (probs, ent) = softmax_and_entropy(&logits.value())?;
                masks.push(losses::correctness_mask(&probs, &batch.labels)?);
                inputs.push(build_eln_input(&batch.images, &probs, &ent)?);
            }
            let input = g.constant(Tensor::concat(&inputs.iter().collect::<Vec<_>>(), 0)?);
            for &module in &self.config.error_modules {
                let out = self.net.error_module_forward(bound, module, input)?;
                let (loss, diag): (Var<'g, f32>, LossDiagnostics) = match module {
                    // per-image normalization makes this the mean over the K+1 decoders
                    ErrorModule::Eln => losses::weighted_bce(out, &BinaryMap::concat(&masks.iter().collect::<Vec<_>>())?)?,
                    ErrorModule::Secn => {
                        let labels: Vec<usize> = (0..=k).flat_map(|_| batch.labels.iter().copied()).collect();
                        losses::ce_loss(out, &labels)?
                    }
                };
                rec.losses.insert(module.prefix().into(), diag.value);
                rec.warnings.extend(diag.warnings);
                total = total.add(loss)?;
            }
        }
        Ok(LabeledParts { total })
    }

    fn stage1_mode(&self, name: &str, train_error_modules: bool) -> Option<bool> {
        let is_error = self.config.error_modules.iter().any(|m| name.starts_with(&format!("{}.", m.prefix())));
        if is_error {
            return train_error_modules.then_some(true);
        }
        Some(true)
    }

    pub fn stage1_step(&self, state: &mut TrainState, batch: &LabeledBatch) -> Result<StepRecord> {
        Self::check_stage(state, Stage::Stage1)?;
        let mut rec = StepRecord::new(Stage::Stage1, state.iteration);
        let params = state.params.clone();
        let g = Graph::new();
        let bound = params.bind(&g, |n| self.stage1_mode(n, true));
        let parts = self.labeled_objective(&g, &bound, batch, true, &mut rec)?;
        rec.losses.insert("total".into(), f(&parts.total));
        self.apply(state, &g, &bound, parts.total)?;
        Ok(rec)
    }

    /// Validity probabilities `[B,1,H,W]` for the teacher prediction,
    /// computed without gradient.
    fn validity(&self, params: &ParamStore<f32>, images: &Tensor<f32>, teacher_logits: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (probs, ent) = softmax_and_entropy(teacher_logits)?;
        let (n, _, h, w) = probs.dims4()?;
        let opts = &self.config.stage2;
        let run = |module: ErrorModule| -> Result<Tensor<f32>> {
            let g = Graph::new();
            let bound = params.bind(&g, |name| name.starts_with(&format!("{}.", module.prefix())).then_some(false));
            let input = g.constant(build_eln_input(images, &probs, &ent)?);
            Ok(self.net.error_module_forward(&bound, module, input)?.value().as_ref().clone())
        };
        match opts.mask {
            MaskSource::Eln => Ok(run(ErrorModule::Eln)?.map(|z| 1.0 / (1.0 + (-z).exp()))),
            MaskSource::Secn => {
                let corrected = run(ErrorModule::Secn)?;
                Ok(crate::eval::secn_valid_mask(&corrected, &probs)?.to_tensor())
            }
            MaskSource::Threshold => Ok(crate::eval::threshold_mask(&probs, opts.threshold)?.to_tensor()),
            MaskSource::None => Ok(Tensor::full(&[n, 1, h, w], 1.0)),
        }
    }

    /// One mean-teacher step. `validity_override` replaces the mask source's
    /// validity map (used to probe the masking contract).
    pub fn stage2_step(
        &self,
        state: &mut TrainState,
        labeled: &LabeledBatch,
        unlabeled: &UnlabeledBatch,
        validity_override: Option<&Tensor<f32>>,
    ) -> Result<StepRecord> {
        Self::check_stage(state, Stage::Stage2)?;
        let opts = &self.config.stage2;
        let mut rec = StepRecord::new(Stage::Stage2, state.iteration);
        let teacher = state.teacher.as_ref().ok_or_else(|| Error::Invalid("stage 2 without a teacher".into()))?;

        // teacher pass: constants only, so nothing is recorded for backward
        let (t_logits, t_embedding) = {
            let g = Graph::new();
            let bound = teacher.teacher.bind(&g, |_| Some(false));
            let feats = self.net.encoder_forward(&bound, g.constant(unlabeled.teacher_view.clone()))?;
            let out = self.net.decoder_forward(&bound, MAIN_DECODER, &feats)?;
            (out.logits.value().as_ref().clone(), out.embedding.value().as_ref().clone())
        };
        let validity = match validity_override {
            Some(v) => v.clone(),
            None => self.validity(&state.params, &unlabeled.teacher_view, &t_logits)?,
        };
        let pseudo = losses::pseudo_labels(&t_logits)?;
        let valid_map = BinaryMap::from_probabilities(&validity)?;
        rec.valid_fraction = Some(valid_map.count_ones() as f64 / valid_map.values.len().max(1) as f64);

        let train_error_modules = !opts.freeze_eln;
        let params = state.params.clone();
        let g = Graph::new();
        let bound = params.bind(&g, |n| self.stage1_mode(n, train_error_modules));
        let parts = self.labeled_objective(&g, &bound, labeled, train_error_modules, &mut rec)?;

        let feats = self.net.encoder_forward(&bound, g.constant(unlabeled.student_view.clone()))?;
        let student = self.net.decoder_forward(&bound, MAIN_DECODER, &feats)?;
        let pseudo_term = if opts.use_pseudo {
            let (l, _) = losses::pseudo_loss(student.logits, &pseudo, &validity)?;
            rec.losses.insert("pseudo".into(), f(&l));
            Some(l)
        } else {
            None
        };
        let contra_term = if opts.use_contra {
            let (n, _, h, w) = t_logits.dims4()?;
            let (_, _, eh, ew) = t_embedding.dims4()?;
            let low_pseudo = losses::downsample_nearest(&pseudo, n, (h, w), (eh, ew))?;
            let valid_bits: Vec<bool> = valid_map.values.iter().map(|&v| v == 1).collect();
            let low_valid = losses::downsample_nearest(&valid_bits, n, (h, w), (eh, ew))?;
            let step_seed = rng::derive_seed(&[self.seed, state.iteration]);
            let (l, _) = losses::contrastive_loss(
                student.embedding,
                &t_embedding,
                &low_pseudo,
                &low_valid,
                &self.config.contrastive,
                step_seed,
            )?;
            rec.losses.insert("contra".into(), f(&l));
            Some(l)
        } else {
            None
        };
        let total = match losses::unlabeled_total(pseudo_term, contra_term)? {
            Some(u) => parts.total.add(u)?,
            None => parts.total,
        };
        rec.losses.insert("total".into(), f(&total));
        self.apply(state, &g, &bound, total)?;
        let ema = state.teacher.as_mut().expect("checked above");
        ema_update(ema, &state.params)?;
        Ok(rec)
    }

    /// Runs the current stage from `state.iteration` up to `steps` completed
    /// steps, calling `observe` after every step.
    pub fn run_stage(
        &self,
        state: &mut TrainState,
        split: &DatasetSplit,
        steps: u64,
        observe: &mut dyn FnMut(&TrainState, &mut StepRecord) -> Result<()>,
    ) -> Result<()> {
        while state.iteration < steps {
            let it = state.iteration;
            let labeled = sample_labeled_batch(split, &self.config, self.seed, state.stage, it)?;
            let mut rec = match state.stage {
                Stage::Pretrain => self.pretrain_step(state, &labeled)?,
                Stage::Stage1 => self.stage1_step(state, &labeled)?,
                Stage::Stage2 => {
                    let unlabeled = sample_unlabeled_batch(split, &self.config, self.seed, it)?;
                    self.stage2_step(state, &labeled, &unlabeled, None)?
                }
            };
            for (name, v) in &rec.losses {
                if !v.is_finite() {
                    return Err(Error::Invalid(format!(
                        "{} loss `{name}` became non-finite at iteration {it}",
                        state.stage.as_str()
                    )));
                }
            }
            observe(state, &mut rec)?;
        }
        Ok(())
    }
}

/// Pretraining on `L_sup` for `steps` steps.
pub fn pretrain_main(
    trainer: &Trainer,
    state: &mut TrainState,
    split: &DatasetSplit,
    steps: u64,
    observe: &mut dyn FnMut(&TrainState, &mut StepRecord) -> Result<()>,
) -> Result<()> {
    if split.labeled.is_empty() {
        return Err(Error::Config("pretraining needs labeled data".into()));
    }
    Trainer::check_stage(state, Stage::Pretrain)?;
    trainer.run_stage(state, split, steps, observe)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f32]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("enc.x", Tensor::from_vec(&[values.len()], values.to_vec()).unwrap());
        s
    }

    #[test]
    fn ema_scalar_and_fixed_points() {
        let mut ema = EmaState::from_student(&store(&[1.0]), 0.995).unwrap();
        ema_update(&mut ema, &store(&[0.0])).unwrap();
        assert_eq!(ema.teacher.get("enc.x").unwrap().data()[0], 0.995);
        let mut ema = EmaState::from_student(&store(&[0.3, -7.25]), 0.995).unwrap();
        ema_update(&mut ema, &store(&[0.3, -7.25])).unwrap();
        assert_eq!(ema.teacher.get("enc.x").unwrap().data(), &[0.3, -7.25]);
        let mut ema = EmaState::from_student(&store(&[0.3]), 0.0).unwrap();
        ema_update(&mut ema, &store(&[4.5])).unwrap();
        assert_eq!(ema.teacher.get("enc.x").unwrap().data(), &[4.5]);
    }

    #[test]
    fn ema_rejects_topology_mismatch() {
        let mut ema = EmaState::from_student(&store(&[1.0]), 0.9).unwrap();
        assert!(ema_update(&mut ema, &store(&[1.0, 2.0])).is_err());
        let mut other = ParamStore::new();
        other.insert("dec0.y", Tensor::from_vec(&[1], vec![0.0]).unwrap());
        assert!(ema_update(&mut ema, &other).is_err());
        assert!(EmaState::from_student(&store(&[1.0]), 1.0).is_err());
    }

    #[test]
    fn alphas_must_match_k() {
        let cfg = TrainConfig { alphas: vec![20.0, 50.0, 100.0], ..Default::default() };
        assert!(cfg.validate(3).is_ok());
        assert!(cfg.validate(2).is_err());
    }
}
