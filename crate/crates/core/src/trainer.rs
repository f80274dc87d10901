//! Routed training: each loss updates only its own parameter groups.
//!
//! One step runs a single forward pass, computes every loss, backpropagates
//! each weighted loss separately, and then applies four momentum-SGD
//! updates in order:
//!
//! 1. `λ_cls · L_cls` updates every parameter;
//! 2. `λ_align · L_align` updates the alignment gate;
//! 3. `λ_dre · L_DRE` updates the restoration gate;
//! 4. `λ_consist · L_consist` updates the shared classifier.
//!
//! All gradients are taken at the parameters of the forward pass. A single
//! momentum buffer per parameter is shared by the four updates and advances
//! only when an update touches that parameter. Updates whose weight is zero
//! or whose loss the model does not define are skipped entirely.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, Tape, Var};
use crate::data::{BatchSampler, LabeledSet, MultiDomainBatch};
use crate::diagnostics::accuracy;
use crate::error::{FarError, Result};
use crate::losses::{self, LossBundle, LossComponents, LossWeights};
use crate::network::{FarModel, ForwardBundle, ParamGroup};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Sources only; the target is never seen during training.
    Dg,
    /// Sources plus unlabelled target images.
    Uda,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_per_domain: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Write a step row every this many steps; 0 disables step rows.
    pub log_every: usize,
    /// Evaluate accuracy every this many epochs (the last epoch is always
    /// evaluated); 0 evaluates only after the last epoch.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Dg,
            epochs: 40,
            batch_per_domain: 16,
            lr_init: 0.01,
            lr_min: 0.0,
            momentum: 0.9,
            weights: LossWeights::default(),
            seed: 0,
            log_every: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(FarError::config("epochs must be ≥ 1"));
        }
        if self.batch_per_domain < 2 {
            return Err(FarError::config("batch_per_domain must be ≥ 2"));
        }
        if !(self.lr_init >= 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr_init {
            return Err(FarError::config(format!(
                "need 0 ≤ lr_min ≤ lr_init, got lr_min={} lr_init={}",
                self.lr_min, self.lr_init
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FarError::config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        self.weights.validate()
    }
}

/// Form of the entropy objective on the restoration gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DreKind {
    /// Both ranking terms.
    Ranking,
    /// Only `softplus(E(p⁺) − E(p))`.
    PlusOnly,
    /// Only `softplus(E(p) − E(p⁻))`.
    MinusOnly,
    /// Minimize `E(p⁺)` and `ln k − E(p⁻)` without comparing to `E(p)`.
    Direct,
}

/// Which losses a run computes. Losses that need modules the model lacks
/// are skipped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossPlan {
    pub align: bool,
    pub dre: Option<DreKind>,
    /// Expert cross-entropy in `L_cls` plus the consistency loss.
    pub teacher_student: bool,
}

impl Default for LossPlan {
    fn default() -> Self {
        Self {
            align: true,
            dre: Some(DreKind::Ranking),
            teacher_student: true,
        }
    }
}

/// The sub-steps of a routed step to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubSteps {
    pub cls: bool,
    pub align: bool,
    pub dre: bool,
    pub consist: bool,
}

impl SubSteps {
    pub const ALL: SubSteps = SubSteps {
        cls: true,
        align: true,
        dre: true,
        consist: true,
    };

    pub fn only(which: SubStep) -> SubSteps {
        let mut s = SubSteps {
            cls: false,
            align: false,
            dre: false,
            consist: false,
        };
        match which {
            SubStep::Cls => s.cls = true,
            SubStep::Align => s.align = true,
            SubStep::Dre => s.dre = true,
            SubStep::Consist => s.consist = true,
        }
        s
    }

    fn enabled(&self, which: SubStep) -> bool {
        match which {
            SubStep::Cls => self.cls,
            SubStep::Align => self.align,
            SubStep::Dre => self.dre,
            SubStep::Consist => self.consist,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubStep {
    Cls,
    Align,
    Dre,
    Consist,
}

impl SubStep {
    pub const ORDER: [SubStep; 4] = [SubStep::Cls, SubStep::Align, SubStep::Dre, SubStep::Consist];

    fn weight(self, w: &LossWeights) -> f64 {
        match self {
            SubStep::Cls => w.cls,
            SubStep::Align => w.align,
            SubStep::Dre => w.dre,
            SubStep::Consist => w.consist,
        }
    }
}

/// Parameter groups each sub-step is allowed to change.
pub fn routed_groups(model: &FarModel, which: SubStep) -> Vec<ParamGroup> {
    match which {
        SubStep::Cls => {
            let mut g: Vec<ParamGroup> = model.params().iter().map(|p| p.group).collect();
            g.sort();
            g.dedup();
            g
        }
        SubStep::Align if model.config().attention => vec![ParamGroup::Alignment],
        // Without a gate, alignment acts on the backbone features directly.
        SubStep::Align => vec![ParamGroup::Backbone],
        SubStep::Dre => vec![ParamGroup::Restoration],
        SubStep::Consist => vec![ParamGroup::SharedClassifier],
    }
}

/// Momentum buffers, one per parameter, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor<f32>>,
}

impl OptimizerState {
    pub fn zeros_like(model: &FarModel) -> Self {
        Self {
            velocity: model
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }
}

/// Classical momentum: `v ← μ·v + g`, `w ← w − η·v`.
pub fn sgd_momentum_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    velocity: &mut [&mut Tensor<T>],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(FarError::contract(format!(
            "{} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    let (lr, mu) = (T::lit(lr), T::lit(momentum));
    for ((w, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if w.shape() != g.shape() || w.shape() != v.shape() {
            return Err(FarError::contract(format!(
                "shape mismatch: param {:?}, grad {:?}, velocity {:?}",
                w.shape(),
                g.shape(),
                v.shape()
            )));
        }
        for ((wv, &gv), vv) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut().iter_mut()) {
            *vv = mu * *vv + gv;
            *wv -= lr * *vv;
        }
    }
    Ok(())
}

/// `η_min + ½(η_init − η_min)(1 + cos(π t / T))`, clamped to `η_min` past `T`.
pub fn cosine_lr(t: usize, total: usize, lr_init: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_init;
    }
    if t >= total {
        return lr_min;
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    lr_min + 0.5 * (lr_init - lr_min) * (1.0 + phase.cos())
}

/// Scalar loss handles recorded for one batch.
#[derive(Clone, Debug)]
pub struct StepLosses {
    pub cls: Option<Var>,
    pub align: Option<Var>,
    pub dre_plus: Option<Var>,
    pub dre_minus: Option<Var>,
    pub consist: Option<Var>,
}

impl StepLosses {
    fn root(&self, tape: &mut Tape<impl Real>, which: SubStep) -> Result<Option<Var>> {
        Ok(match which {
            SubStep::Cls => self.cls,
            SubStep::Align => self.align,
            SubStep::Dre => match (self.dre_plus, self.dre_minus) {
                (Some(p), Some(m)) => Some(tape.add(p, m)?),
                (p, m) => p.or(m),
            },
            SubStep::Consist => self.consist,
        })
    }

    fn components<T: Real>(&self, tape: &Tape<T>) -> Result<LossComponents> {
        let get = |v: Option<Var>, name: &str| -> Result<f64> {
            let Some(v) = v else { return Ok(0.0) };
            let x = tape.value(v).item()?.as_f64();
            if !x.is_finite() {
                return Err(FarError::NonFinite(format!("loss {name} = {x}")));
            }
            Ok(x)
        };
        Ok(LossComponents {
            cls: get(self.cls, "l_cls")?,
            align: get(self.align, "l_align")?,
            dre_plus: get(self.dre_plus, "l_dre_plus")?,
            dre_minus: get(self.dre_minus, "l_dre_minus")?,
            consist: get(self.consist, "l_consist")?,
        })
    }
}

/// Records every loss of `plan` for a batch whose forward pass is `fwd`.
///
/// Source blocks supply `L_cls` and `L_consist`; every block (the target
/// included) supplies `L_align` and `L_DRE`. The expert of a source block
/// is the expert with the block's position among the sources.
pub fn batch_losses<T: Real>(
    tape: &mut Tape<T>,
    model: &FarModel<T>,
    fwd: &ForwardBundle,
    batch: &MultiDomainBatch,
    plan: &LossPlan,
) -> Result<StepLosses> {
    let m = batch.per_domain;
    let sources: Vec<_> = batch.source_blocks().collect();
    if sources.is_empty() {
        return Err(FarError::contract("batch has no labelled source block"));
    }
    for (i, b) in batch.blocks.iter().enumerate() {
        if b.start != i * m || b.indices.len() != m {
            return Err(FarError::contract("batch blocks must be contiguous and equal-sized"));
        }
    }
    let n_src = sources.len();
    let labels: Vec<usize> = sources
        .iter()
        .flat_map(|b| b.labels.clone().unwrap_or_default())
        .collect();
    let use_experts = plan.teacher_student && !fwd.expert_logits.is_empty();
    if use_experts && fwd.expert_logits.len() != n_src {
        return Err(FarError::contract(format!(
            "{} experts for {n_src} source domains",
            fwd.expert_logits.len()
        )));
    }

    let out_logits = fwd.output_logits();
    let src_logits = tape.slice_rows(out_logits, 0, n_src * m)?;
    let mut cls = losses::cross_entropy(tape, src_logits, &labels)?;
    let mut consist = None;
    if use_experts {
        let mut expert_terms = Vec::with_capacity(n_src);
        let mut consist_terms = Vec::with_capacity(n_src);
        for (i, b) in sources.iter().enumerate() {
            let block_labels = b.labels.as_deref().unwrap_or_default();
            let expert = tape.slice_rows(fwd.expert_logits[i], b.start, m)?;
            expert_terms.push(losses::cross_entropy(tape, expert, block_labels)?);
            let teacher = tape.softmax(expert)?;
            let teacher = tape.detach(teacher);
            let student_logits = tape.slice_rows(out_logits, b.start, m)?;
            let student = tape.softmax(student_logits)?;
            consist_terms.push(losses::consist_l1(tape, teacher, student)?);
        }
        let expert_ce = sum_scaled(tape, &expert_terms, 1.0 / n_src as f64)?;
        cls = tape.add(cls, expert_ce)?;
        consist = Some(sum_scaled(tape, &consist_terms, 1.0 / n_src as f64)?);
    }

    let align = if plan.align {
        let mut src_feats = Vec::with_capacity(n_src);
        for b in &sources {
            src_feats.push(tape.slice_rows(fwd.f, b.start, m)?);
        }
        let tgt = match batch.target_block() {
            Some(b) => Some(tape.slice_rows(fwd.f, b.start, m)?),
            None => None,
        };
        Some(losses::moment_distance(tape, &src_feats, tgt)?)
    } else {
        None
    };

    let (mut dre_plus, mut dre_minus) = (None, None);
    if let (Some(kind), Some(lp), Some(lm)) = (plan.dre, fwd.logits_plus, fwd.logits_minus) {
        match kind {
            DreKind::Direct => {
                let (p, n) = losses::direct_entropy_loss(tape, lp, lm)?;
                dre_plus = Some(p);
                dre_minus = Some(n);
            }
            _ => {
                let (p, n) = losses::dre_loss(tape, lp, fwd.logits, lm)?;
                if kind != DreKind::MinusOnly {
                    dre_plus = Some(p);
                }
                if kind != DreKind::PlusOnly {
                    dre_minus = Some(n);
                }
            }
        }
    }
    let _ = model;
    Ok(StepLosses {
        cls: Some(cls),
        align,
        dre_plus,
        dre_minus,
        consist,
    })
}

fn sum_scaled<T: Real>(tape: &mut Tape<T>, terms: &[Var], scale: f64) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, scale))
}

fn group_vars(model: &FarModel, vars: &[Var], groups: &[ParamGroup]) -> Vec<(usize, Var)> {
    model
        .params()
        .iter()
        .zip(vars)
        .enumerate()
        .filter(|(_, (p, _))| groups.contains(&p.group))
        .map(|(i, (_, &v))| (i, v))
        .collect()
}

/// Applies one sub-step's update to the parameters at `indices`.
fn apply_update(
    model: &mut FarModel,
    opt: &mut OptimizerState,
    updates: &[(usize, Tensor<f32>)],
    weight: f64,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let params = model.params_mut();
    for (i, g) in updates {
        let g = g.map(|v| v * weight as f32);
        let mut w = [&mut params[*i].value];
        let mut v = [&mut opt.velocity[*i]];
        sgd_momentum_step(&mut w, &[&g], &mut v, lr, momentum)?;
    }
    Ok(())
}

/// Outcome of one routed step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub losses: LossBundle,
}

struct Recorded {
    tape: Tape<f32>,
    vars: Vec<Var>,
    losses: StepLosses,
    components: LossComponents,
}

fn record(model: &FarModel, batch: &MultiDomainBatch, plan: &LossPlan) -> Result<Recorded> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let x = tape.leaf(batch.images.clone());
    let fwd = model.forward(&mut tape, &vars, x)?;
    let losses = batch_losses(&mut tape, model, &fwd, batch, plan)?;
    let components = losses.components(&tape)?;
    Ok(Recorded {
        tape,
        vars,
        losses,
        components,
    })
}

fn active(which: SubStep, steps: &SubSteps, cfg: &TrainConfig, root: Option<Var>) -> Option<Var> {
    (steps.enabled(which) && which.weight(&cfg.weights) > 0.0)
        .then_some(root)
        .flatten()
}

/// One routed optimization step: a backward pass per loss, then the four
/// group-restricted updates in order.
pub fn routed_step(
    model: &mut FarModel,
    opt: &mut OptimizerState,
    batch: &MultiDomainBatch,
    cfg: &TrainConfig,
    plan: &LossPlan,
    lr: f64,
    steps: &SubSteps,
) -> Result<StepReport> {
    let Recorded {
        mut tape,
        vars,
        losses,
        components,
    } = record(model, batch, plan)?;
    let mut pending = Vec::new();
    for which in SubStep::ORDER {
        let root = losses.root(&mut tape, which)?;
        let Some(root) = active(which, steps, cfg, root) else {
            continue;
        };
        let targets = group_vars(model, &vars, &routed_groups(model, which));
        let wrt: Vec<Var> = targets.iter().map(|&(_, v)| v).collect();
        let mut grads = tape.backward_wrt(root, &wrt)?;
        let updates = collect(&mut grads, &targets, which)?;
        pending.push((which, updates));
    }
    for (which, updates) in pending {
        apply_update(model, opt, &updates, which.weight(&cfg.weights), lr, cfg.momentum)?;
    }
    Ok(StepReport {
        losses: losses::compose_total(components, cfg.weights)?,
    })
}

fn collect(grads: &mut Grads<f32>, targets: &[(usize, Var)], which: SubStep) -> Result<Vec<(usize, Tensor<f32>)>> {
    targets
        .iter()
        .map(|&(i, v)| {
            let g = grads
                .take(v)
                .ok_or_else(|| FarError::contract("missing parameter gradient"))?;
            if !g.all_finite() {
                return Err(FarError::NonFinite(format!("gradient of {which:?} loss")));
            }
            Ok((i, g))
        })
        .collect()
}

/// Reference for [`routed_step`]: one reverse sweep yields every loss's
/// gradient for every parameter, and explicit per-group masks decide which
/// of them each sequential update may use.
pub fn routed_step_masked(
    model: &mut FarModel,
    opt: &mut OptimizerState,
    batch: &MultiDomainBatch,
    cfg: &TrainConfig,
    plan: &LossPlan,
    lr: f64,
    steps: &SubSteps,
) -> Result<StepReport> {
    let Recorded {
        mut tape,
        vars,
        losses,
        components,
    } = record(model, batch, plan)?;
    let mut roots = Vec::new();
    let mut order = Vec::new();
    for which in SubStep::ORDER {
        let root = losses.root(&mut tape, which)?;
        if let Some(r) = active(which, steps, cfg, root) {
            roots.push(r);
            order.push(which);
        }
    }
    let all = tape.backward_multi(&roots)?;
    let n = model.params().len();
    for (which, grads) in order.into_iter().zip(all) {
        let allowed = routed_groups(model, which);
        let mask: Vec<bool> = model.params().iter().map(|p| allowed.contains(&p.group)).collect();
        let params = model.params_mut();
        let (lr32, mu, w) = (lr as f32, cfg.momentum as f32, which.weight(&cfg.weights) as f32);
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let g = grads
                .get(vars[i])
                .ok_or_else(|| FarError::contract("missing parameter gradient"))?;
            let v = &mut opt.velocity[i];
            for ((pv, &gv), vv) in params[i]
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(v.data_mut().iter_mut())
            {
                *vv = mu * *vv + gv * w;
                *pv -= lr32 * *vv;
            }
        }
    }
    Ok(StepReport {
        losses: losses::compose_total(components, cfg.weights)?,
    })
}

/// Training inputs. In UDA mode `target_train` holds the unlabelled target
/// images; in DG mode it must be `None`.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub sources: Vec<LabeledSet>,
    pub target_train: Option<LabeledSet>,
    /// Labelled sets scored at evaluation time, one accuracy column each.
    pub eval_sets: Vec<LabeledSet>,
}

impl TrainData {
    fn check(&self, mode: Mode) -> Result<()> {
        match (mode, &self.target_train) {
            (Mode::Dg, Some(_)) => Err(FarError::contract("DG training must not see target images")),
            (Mode::Uda, None) => Err(FarError::contract("UDA training needs target images")),
            _ => Ok(()),
        }
    }

    fn sizes(&self) -> Vec<usize> {
        self.sources
            .iter()
            .chain(&self.target_train)
            .map(|s| s.len())
            .collect()
    }
}

/// One line of the metric log. Step rows carry the losses of a single
/// step; epoch rows (`step == None`) carry epoch means and, when evaluated,
/// per-domain accuracies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub step: Option<usize>,
    pub lr: f64,
    pub losses: LossComponents,
    pub accuracy: Vec<f64>,
}

/// Where a run stands; saved with checkpoints so training can resume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Progress {
    pub epochs_done: usize,
    pub global_step: u64,
}

pub struct Trainer {
    pub model: FarModel,
    pub opt: OptimizerState,
    pub cfg: TrainConfig,
    pub plan: LossPlan,
    pub progress: Progress,
    pub log: Vec<MetricRow>,
    sampler: BatchSampler,
}

impl Trainer {
    pub fn new(model: FarModel, cfg: TrainConfig, plan: LossPlan, data: &TrainData) -> Result<Self> {
        cfg.validate()?;
        data.check(cfg.mode)?;
        if model.config().n_experts > 0 && model.config().n_experts != data.sources.len() {
            return Err(FarError::config(format!(
                "model has {} experts for {} source domains",
                model.config().n_experts,
                data.sources.len()
            )));
        }
        let sampler = BatchSampler::new(data.sizes(), cfg.batch_per_domain, cfg.seed)?;
        let opt = OptimizerState::zeros_like(&model);
        Ok(Self {
            model,
            opt,
            cfg,
            plan,
            progress: Progress {
                epochs_done: 0,
                global_step: 0,
            },
            log: Vec::new(),
            sampler,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.sampler.steps_per_epoch()
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.steps_per_epoch()
    }

    pub fn is_done(&self) -> bool {
        self.progress.epochs_done >= self.cfg.epochs
    }

    /// Restores model, momentum and progress from a checkpoint.
    pub fn resume(&mut self, ckpt: Checkpoint) -> Result<()> {
        ckpt.restore(&mut self.model, &mut self.opt)?;
        self.progress = ckpt.progress;
        self.sampler.start_epoch(ckpt.progress.epochs_done as u64);
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, &self.opt, self.progress)
    }

    pub fn run_epoch(&mut self, data: &TrainData) -> Result<()> {
        data.check(self.cfg.mode)?;
        let epoch = self.progress.epochs_done;
        if self.sampler.epoch() != epoch as u64 {
            self.sampler.start_epoch(epoch as u64);
        }
        let steps = self.steps_per_epoch();
        let total = self.total_steps();
        let mut sum = LossComponents::default();
        let mut lr = self.cfg.lr_init;
        for s in 0..steps {
            lr = cosine_lr(self.progress.global_step as usize, total, self.cfg.lr_init, self.cfg.lr_min);
            let batch = self.sampler.sample(&data.sources, data.target_train.as_ref())?;
            let report = routed_step(
                &mut self.model,
                &mut self.opt,
                &batch,
                &self.cfg,
                &self.plan,
                lr,
                &SubSteps::ALL,
            )?;
            let c = report.losses.components;
            sum.cls += c.cls;
            sum.align += c.align;
            sum.dre_plus += c.dre_plus;
            sum.dre_minus += c.dre_minus;
            sum.consist += c.consist;
            self.progress.global_step += 1;
            if self.cfg.log_every > 0 && (s + 1) % self.cfg.log_every == 0 {
                self.log.push(MetricRow {
                    epoch,
                    step: Some(self.progress.global_step as usize - 1),
                    lr,
                    losses: c,
                    accuracy: Vec::new(),
                });
            }
        }
        let k = steps.max(1) as f64;
        let mean = LossComponents {
            cls: sum.cls / k,
            align: sum.align / k,
            dre_plus: sum.dre_plus / k,
            dre_minus: sum.dre_minus / k,
            consist: sum.consist / k,
        };
        self.progress.epochs_done += 1;
        let last = self.progress.epochs_done == self.cfg.epochs;
        let due = self.cfg.eval_every > 0 && self.progress.epochs_done % self.cfg.eval_every == 0;
        let acc = if last || due {
            data.eval_sets
                .iter()
                .map(|s| accuracy(&self.model, s))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        self.log.push(MetricRow {
            epoch,
            step: None,
            lr,
            losses: mean,
            accuracy: acc,
        });
        Ok(())
    }

    pub fn run(&mut self, data: &TrainData) -> Result<()> {
        while !self.is_done() {
            self.run_epoch(data)?;
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub model: FarModel,
    pub log: Vec<MetricRow>,
}

pub fn train(model: FarModel, data: &TrainData, cfg: &TrainConfig, plan: &LossPlan) -> Result<TrainOutcome> {
    let mut t = Trainer::new(model, cfg.clone(), *plan, data)?;
    t.run(data)?;
    Ok(TrainOutcome {
        model: t.model,
        log: t.log,
    })
}

const FARC_MAGIC: &[u8; 4] = b"FARC";
const FARC_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
}

/// Parameters, momentum buffers and progress of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub progress: Progress,
    pub manifest: Vec<ManifestEntry>,
    pub params: Vec<Tensor<f32>>,
    pub velocity: Vec<Tensor<f32>>,
}

impl Checkpoint {
    pub fn capture(model: &FarModel, opt: &OptimizerState, progress: Progress) -> Self {
        Self {
            progress,
            manifest: model
                .params()
                .iter()
                .map(|p| ManifestEntry {
                    name: p.name.clone(),
                    group: p.group,
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
            params: model.params().iter().map(|p| p.value.clone()).collect(),
            velocity: opt.velocity.clone(),
        }
    }

    /// Copies the stored tensors into a model of the same architecture.
    pub fn restore(&self, model: &mut FarModel, opt: &mut OptimizerState) -> Result<()> {
        let params = model.params();
        for i in 0..self.manifest.len().max(params.len()) {
            let (entry, p) = (self.manifest.get(i), params.get(i));
            let same = matches!((entry, p), (Some(e), Some(p))
                if e.name == p.name && e.shape == p.value.shape() && e.group == p.group);
            if !same {
                // a missing side reports an empty shape
                return Err(FarError::ParamShape {
                    name: p.map_or_else(|| entry.map(|e| e.name.clone()).unwrap_or_default(), |p| p.name.clone()),
                    expected: p.map(|p| p.value.shape().to_vec()).unwrap_or_default(),
                    found: entry.map(|e| e.shape.clone()).unwrap_or_default(),
                });
            }
        }
        for ((p, v), (src_p, src_v)) in model
            .params_mut()
            .iter_mut()
            .zip(opt.velocity.iter_mut())
            .zip(self.params.iter().zip(&self.velocity))
        {
            p.value = src_p.clone();
            *v = src_v.clone();
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FARC_MAGIC);
        out.extend_from_slice(&FARC_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.progress.epochs_done as u32).to_le_bytes());
        out.extend_from_slice(&self.progress.global_step.to_le_bytes());
        out.extend_from_slice(&(self.manifest.len() as u32).to_le_bytes());
        for e in &self.manifest {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&e.group.tag().to_le_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for t in self.params.iter().chain(&self.velocity) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4, "magic")? != FARC_MAGIC {
            return Err(FarError::format(0, "bad magic, expected \"FARC\""));
        }
        let version = r.u32("version")?;
        if version != FARC_VERSION {
            return Err(FarError::format(4, format!("unsupported version {version}")));
        }
        let epochs_done = r.u32("epochs")? as usize;
        let global_step = u64::from_le_bytes(r.take(8, "step")?.try_into().expect("8 bytes"));
        let count = r.u32("parameter count")? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| FarError::format(at as u64, "parameter name is not UTF-8"))?
                .to_string();
            let group = ParamGroup::from_tag(r.u32("group")?);
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32("dim")? as usize);
            }
            manifest.push(ManifestEntry { name, group, shape });
        }
        let params = r.tensors(&manifest)?;
        let velocity = r.tensors(&manifest)?;
        if r.pos != bytes.len() {
            return Err(FarError::format(r.pos as u64, "trailing bytes after payload"));
        }
        Ok(Self {
            progress: Progress {
                epochs_done,
                global_step,
            },
            manifest,
            params,
            velocity,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.encode()).map_err(|e| FarError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path.as_ref()).map_err(|e| FarError::io(path.as_ref(), e))?;
        Self::decode(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| {
            FarError::format(
                self.bytes.len() as u64,
                format!("truncated while reading {what} at byte {}", self.pos),
            )
        })?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn tensors(&mut self, manifest: &[ManifestEntry]) -> Result<Vec<Tensor<f32>>> {
        manifest
            .iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let data = self
                    .take(n * 4, &e.name)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::new(e.shape.clone(), data)
            })
            .collect()
    }
}
