//! Evaluation tooling: accuracy, feature divergence between domains,
//! activation maps, and the variant runner used for comparisons.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{BenchmarkConfig, LabeledSet};
use crate::error::{FarError, Result};
use crate::losses::LossWeights;
use crate::network::{FarModel, GateKind, NetConfig};
use crate::tensor::{Real, Tensor};
use crate::trainer::{DreKind, LossPlan, MetricRow, Mode, TrainConfig, TrainData, Trainer};

const EVAL_CHUNK: usize = 128;
const VARIANCE_FLOOR: f64 = 1e-6;

/// Fraction of images whose predicted class equals the label.
pub fn accuracy(model: &FarModel, set: &LabeledSet) -> Result<f64> {
    if set.is_empty() {
        return Err(FarError::contract("accuracy of an empty set"));
    }
    if !set.has_labels() {
        return Err(FarError::contract("accuracy needs a labelled set"));
    }
    let mut correct = 0usize;
    for start in (0..set.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(set.len())).collect();
        let x = set.gather_images(&idx)?;
        let pred = model.predict(&x)?;
        correct += pred
            .iter()
            .zip(&idx)
            .filter(|(p, &i)| **p == set.labels[i])
            .count();
    }
    Ok(correct as f64 / set.len() as f64)
}

fn gaussian_fit<T: Real>(samples: &[Tensor<T>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if samples.len() < 2 {
        return Err(FarError::contract(format!(
            "symmetric_kl needs at least 2 samples per side, got {}",
            samples.len()
        )));
    }
    let c = samples[0].len();
    if samples.iter().any(|s| s.len() != c) {
        return Err(FarError::dim("feature vectors differ in length"));
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; c];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s.data()) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; c];
    for s in samples {
        for ((acc, v), m) in var.iter_mut().zip(s.data()).zip(&mean) {
            let d = v.as_f64() - m;
            *acc += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v = *v / n + VARIANCE_FLOOR);
    Ok((mean, var))
}

fn kl_gauss(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
    0.5 * (v2 / v1).ln() + (v1 + (m1 - m2).powi(2)) / (2.0 * v2) - 0.5
}

/// Mean over feature dimensions of the averaged two-way KL divergence
/// between per-dimension Gaussian fits of the two sample sets.
pub fn symmetric_kl<T: Real>(a: &[Tensor<T>], b: &[Tensor<T>]) -> Result<f64> {
    let (ma, va) = gaussian_fit(a)?;
    let (mb, vb) = gaussian_fit(b)?;
    if ma.len() != mb.len() {
        return Err(FarError::dim(format!(
            "feature sizes differ: {} vs {}",
            ma.len(),
            mb.len()
        )));
    }
    if ma.is_empty() {
        return Err(FarError::dim("empty feature vectors"));
    }
    let total: f64 = (0..ma.len())
        .map(|k| {
            // Sum in a fixed order so that swapping the arguments is exact.
            let ab = kl_gauss(ma[k], va[k], mb[k], vb[k]);
            let ba = kl_gauss(mb[k], vb[k], ma[k], va[k]);
            let (lo, hi) = if ab <= ba { (ab, ba) } else { (ba, ab) };
            (lo + hi) / 2.0
        })
        .sum();
    Ok(total / ma.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    F,
    A,
    APlusRPlus,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::F, Stage::A, Stage::APlusRPlus];

    pub fn label(self) -> &'static str {
        match self {
            Stage::F => "F",
            Stage::A => "A",
            Stage::APlusRPlus => "A+R+",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub stage: Stage,
    pub domains: Vec<usize>,
    /// Symmetric; zero diagonal.
    pub matrix: Vec<Vec<f64>>,
    /// Mean over off-diagonal entries.
    pub mean: f64,
}

/// Feature maps `[F, A, A+R⁺]` (each `n×c×h×w`) for an image batch.
/// Stages a model does not build repeat the previous stage.
pub fn stage_maps(model: &FarModel, images: &Tensor<f32>) -> Result<[Tensor<f32>; 3]> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let xv = tape.leaf(images.clone());
    let feature = model.extract(&mut tape, &vars, xv)?;
    let (a, ar) = if model.config().attention {
        let (aligned, _, _) = model.attend(&mut tape, &vars, feature)?;
        let ar = if model.config().restoration {
            let residual = tape.sub(feature, aligned)?;
            let (plus, _, _, _) = model.restore_split(&mut tape, &vars, residual)?;
            tape.add(aligned, plus)?
        } else {
            aligned
        };
        (aligned, ar)
    } else {
        (feature, feature)
    };
    Ok([feature, a, ar].map(|v| tape.value(v).clone()))
}

/// Pooled features of every image at each stage: `[F, A, A+R⁺]`, each a
/// list of `c`-vectors.
pub fn stage_features(model: &FarModel, set: &LabeledSet) -> Result<[Vec<Tensor<f64>>; 3]> {
    let mut out: [Vec<Tensor<f64>>; 3] = Default::default();
    let c = model.config().feature_channels();
    let (h, w) = model.config().feature_hw();
    let plane = h * w;
    for start in (0..set.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(set.len())).collect();
        let maps = stage_maps(model, &set.gather_images(&idx)?)?;
        for (slot, m) in out.iter_mut().zip(&maps) {
            for img in m.data().chunks(c * plane) {
                let pooled = img
                    .chunks(plane)
                    .map(|p| p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64)
                    .collect();
                slot.push(Tensor::from_vec(pooled));
            }
        }
    }
    Ok(out)
}

fn report(stage: Stage, domains: Vec<usize>, per_domain: &[&Vec<Tensor<f64>>]) -> Result<DivergenceReport> {
    let d = per_domain.len();
    let mut matrix = vec![vec![0.0; d]; d];
    let mut sum = 0.0;
    for i in 0..d {
        for j in (i + 1)..d {
            let v = symmetric_kl(per_domain[i], per_domain[j])?;
            matrix[i][j] = v;
            matrix[j][i] = v;
            sum += 2.0 * v;
        }
    }
    Ok(DivergenceReport {
        stage,
        domains,
        matrix,
        mean: sum / (d * (d - 1)) as f64,
    })
}

/// Pairwise domain divergence of the pooled features at `F`, `A` and
/// `A+R⁺`.
pub fn divergence_profile(model: &FarModel, sets: &[LabeledSet]) -> Result<[DivergenceReport; 3]> {
    if sets.len() < 2 {
        return Err(FarError::contract("divergence needs at least 2 domains"));
    }
    let feats = sets
        .iter()
        .map(|s| stage_features(model, s))
        .collect::<Result<Vec<_>>>()?;
    let domains: Vec<usize> = sets.iter().map(|s| s.domain_id).collect();
    let make = |k: usize| {
        let per: Vec<&Vec<Tensor<f64>>> = feats.iter().map(|f| &f[k]).collect();
        report(Stage::ALL[k], domains.clone(), &per)
    };
    Ok([make(0)?, make(1)?, make(2)?])
}

/// Channel sum of a `c×h×w` map, scaled to unit Frobenius norm. An
/// all-zero map stays zero.
pub fn activation_map<T: Real>(feature: &Tensor<T>) -> Result<Tensor<T>> {
    let &[c, h, w] = feature.shape() else {
        return Err(FarError::dim(format!(
            "activation_map expects c×h×w, got {:?}",
            feature.shape()
        )));
    };
    let mut m = vec![T::zero(); h * w];
    for k in 0..c {
        for (acc, &v) in m.iter_mut().zip(&feature.data()[k * h * w..(k + 1) * h * w]) {
            *acc += v;
        }
    }
    let norm = m.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm > T::zero() {
        m.iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::new(vec![h, w], m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VariantId {
    Baseline,
    BaselineAlign,
    BaselineAttAlign,
    FAR,
    FARConv,
    FARGateC,
    FARGateS,
    FARNoDRE,
    FARNoDREPlus,
    FARNoDREMinus,
    FARNoRanking,
    FARNoTS,
}

impl VariantId {
    pub const ALL: [VariantId; 12] = [
        VariantId::Baseline,
        VariantId::BaselineAlign,
        VariantId::BaselineAttAlign,
        VariantId::FAR,
        VariantId::FARConv,
        VariantId::FARGateC,
        VariantId::FARGateS,
        VariantId::FARNoDRE,
        VariantId::FARNoDREPlus,
        VariantId::FARNoDREMinus,
        VariantId::FARNoRanking,
        VariantId::FARNoTS,
    ];

    /// The comparison ladder, weakest first.
    pub const LADDER: [VariantId; 4] = [
        VariantId::Baseline,
        VariantId::BaselineAlign,
        VariantId::BaselineAttAlign,
        VariantId::FAR,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantId::Baseline => "Baseline",
            VariantId::BaselineAlign => "BaselineAlign",
            VariantId::BaselineAttAlign => "BaselineAttAlign",
            VariantId::FAR => "FAR",
            VariantId::FARConv => "FARConv",
            VariantId::FARGateC => "FARGateC",
            VariantId::FARGateS => "FARGateS",
            VariantId::FARNoDRE => "FARNoDRE",
            VariantId::FARNoDREPlus => "FARNoDREPlus",
            VariantId::FARNoDREMinus => "FARNoDREMinus",
            VariantId::FARNoRanking => "FARNoRanking",
            VariantId::FARNoTS => "FARNoTS",
        }
    }

    /// Network, loss plan and weights of the variant, derived from a full
    /// FAR setup.
    ///
    /// | variant | gates | losses |
    /// |---|---|---|
    /// | Baseline | none | CE on pooled `F` |
    /// | BaselineAlign | none | CE + moment distance on pooled `F` |
    /// | BaselineAttAlign | alignment | CE + moment distance on `f` |
    /// | FAR | both | all |
    /// | FARConv | 1×1 conv + ReLU | all |
    /// | FARGateC / FARGateS | channel / spatial branch only | all |
    /// | FARNoDRE | both | `λ_dre = 0`, entropy terms still logged |
    /// | FARNoDREPlus / Minus | both | one ranking term dropped |
    /// | FARNoRanking | both | direct entropy objectives |
    /// | FARNoTS | both | no experts, `λ_consist = 0` |
    pub fn setup(self, net: &NetConfig, weights: LossWeights) -> (NetConfig, LossPlan, LossWeights) {
        let mut net = net.clone();
        let mut plan = LossPlan::default();
        let mut weights = weights;
        net.attention = true;
        net.restoration = true;
        net.gate_kind = GateKind::Parallel;
        let plain = |net: &mut NetConfig, plan: &mut LossPlan| {
            net.restoration = false;
            net.n_experts = 0;
            plan.dre = None;
            plan.teacher_student = false;
        };
        match self {
            VariantId::Baseline => {
                plain(&mut net, &mut plan);
                net.attention = false;
                plan.align = false;
            }
            VariantId::BaselineAlign => {
                plain(&mut net, &mut plan);
                net.attention = false;
            }
            VariantId::BaselineAttAlign => plain(&mut net, &mut plan),
            VariantId::FAR => {}
            VariantId::FARConv => net.gate_kind = GateKind::Conv1x1,
            VariantId::FARGateC => net.gate_kind = GateKind::ChannelOnly,
            VariantId::FARGateS => net.gate_kind = GateKind::SpatialOnly,
            VariantId::FARNoDRE => weights.dre = 0.0,
            VariantId::FARNoDREPlus => plan.dre = Some(DreKind::MinusOnly),
            VariantId::FARNoDREMinus => plan.dre = Some(DreKind::PlusOnly),
            VariantId::FARNoRanking => plan.dre = Some(DreKind::Direct),
            VariantId::FARNoTS => {
                net.n_experts = 0;
                plan.teacher_student = false;
                weights.consist = 0.0;
            }
        }
        (net, plan, weights)
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantId {
    type Err = FarError;

    fn from_str(s: &str) -> Result<Self> {
        VariantId::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| FarError::config(format!("unknown variant {s:?}")))
    }
}

/// One leave-one-domain-out experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkConfig,
    /// Full FAR architecture; variants switch modules off.
    pub net: NetConfig,
    pub train: TrainConfig,
    pub target_domain: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            benchmark: BenchmarkConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            target_domain: 3,
        }
    }
}

impl ExperimentConfig {
    /// Training inputs for the held-out split. Accuracy columns follow the
    /// domain order of `test`.
    pub fn train_data(&self, train: &[LabeledSet], test: &[LabeledSet]) -> Result<TrainData> {
        let t = self.target_domain;
        if t >= train.len() || train.len() != test.len() {
            return Err(FarError::config(format!(
                "target domain {t} outside {} domains",
                train.len()
            )));
        }
        let sources: Vec<LabeledSet> = train
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != t)
            .map(|(_, s)| s.clone())
            .collect();
        let target_train = match self.train.mode {
            Mode::Dg => None,
            Mode::Uda => Some(train[t].without_labels()),
        };
        Ok(TrainData {
            sources,
            target_train,
            eval_sets: test.to_vec(),
        })
    }
}

pub struct VariantRun {
    pub variant: VariantId,
    pub seed: u64,
    pub target_domain: usize,
    pub target_accuracy: f64,
    /// Final epoch row, accuracies for every domain in order.
    pub final_row: MetricRow,
    pub log: Vec<MetricRow>,
    pub model: FarModel,
}

/// Trains `variant` on the configured split and scores it.
pub fn run_variant(variant: VariantId, cfg: &ExperimentConfig) -> Result<VariantRun> {
    let bench = cfg.benchmark.build()?;
    run_variant_on(variant, cfg, &bench.train, &bench.test)
}

/// Architecture, plan and weights of `variant` for `cfg`, with one expert
/// per source domain.
pub fn variant_setup(variant: VariantId, cfg: &ExperimentConfig, n_domains: usize) -> (NetConfig, LossPlan, TrainConfig) {
    let mut base = cfg.net.clone();
    if base.n_experts > 0 {
        base.n_experts = n_domains.saturating_sub(1);
    }
    let (net, plan, weights) = variant.setup(&base, cfg.train.weights);
    let train = TrainConfig {
        weights,
        ..cfg.train.clone()
    };
    (net, plan, train)
}

/// A fresh trainer for `variant` on the held-out split, with its inputs.
pub fn variant_trainer(
    variant: VariantId,
    cfg: &ExperimentConfig,
    train: &[LabeledSet],
    test: &[LabeledSet],
) -> Result<(Trainer, TrainData)> {
    let data = cfg.train_data(train, test)?;
    let (net, plan, train_cfg) = variant_setup(variant, cfg, train.len());
    let model = FarModel::new(net, cfg.train.seed)?;
    let trainer = Trainer::new(model, train_cfg, plan, &data)?;
    Ok((trainer, data))
}

/// [`run_variant`] on already generated data.
pub fn run_variant_on(
    variant: VariantId,
    cfg: &ExperimentConfig,
    train: &[LabeledSet],
    test: &[LabeledSet],
) -> Result<VariantRun> {
    let (mut trainer, data) = variant_trainer(variant, cfg, train, test)?;
    trainer.run(&data)?;
    let final_row = trainer
        .log
        .iter()
        .rev()
        .find(|r| r.step.is_none())
        .cloned()
        .ok_or_else(|| FarError::contract("training produced no epoch row"))?;
    let target_accuracy = final_row.accuracy[cfg.target_domain];
    Ok(VariantRun {
        variant,
        seed: cfg.train.seed,
        target_domain: cfg.target_domain,
        target_accuracy,
        final_row,
        log: trainer.log,
        model: trainer.model,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ideal_gaussians_half_nat() {
        // Two points at μ ± σ reproduce mean μ, variance σ² exactly.
        let a = vec![Tensor::from_vec(vec![-1.0f64]), Tensor::from_vec(vec![1.0])];
        let b = vec![Tensor::from_vec(vec![0.0f64]), Tensor::from_vec(vec![2.0])];
        let v = symmetric_kl(&a, &b).unwrap();
        assert!((v - 0.5).abs() < 1e-5, "{v}");
        assert_eq!(symmetric_kl(&a, &a).unwrap(), 0.0);
        assert!(matches!(symmetric_kl(&a[..1], &b), Err(FarError::Contract(_))));
    }

    #[test]
    fn activation_map_cases() {
        let single = Tensor::new(vec![1, 2, 2], vec![3.0f64, 0.0, 0.0, 4.0]).unwrap();
        assert_eq!(activation_map(&single).unwrap().data(), &[0.6, 0.0, 0.0, 0.8]);
        let zero = Tensor::<f64>::zeros(&[2, 3, 3]);
        assert!(activation_map(&zero).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in VariantId::ALL {
            assert_eq!(v.name().parse::<VariantId>().unwrap(), v);
        }
        assert!(matches!("FARish".parse::<VariantId>(), Err(FarError::Config(_))));
    }
}
