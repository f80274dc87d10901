//! The attention-gated network: a small conv backbone, an alignment gate, a
//! restoration gate, a shared classifier and one expert classifier per
//! source domain.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{FarError, Result};
use crate::tensor::{Real, Tensor};

/// Which optimizer update a parameter receives in the routed step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    Alignment,
    Restoration,
    SharedClassifier,
    Expert(usize),
}

impl ParamGroup {
    pub fn tag(self) -> u32 {
        match self {
            ParamGroup::Backbone => 0,
            ParamGroup::Alignment => 1,
            ParamGroup::Restoration => 2,
            ParamGroup::SharedClassifier => 3,
            ParamGroup::Expert(i) => 4 + i as u32,
        }
    }

    pub fn from_tag(tag: u32) -> Self {
        match tag {
            0 => ParamGroup::Backbone,
            1 => ParamGroup::Alignment,
            2 => ParamGroup::Restoration,
            3 => ParamGroup::SharedClassifier,
            t => ParamGroup::Expert((t - 4) as usize),
        }
    }
}

/// How the alignment and restoration gates are built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateKind {
    /// Channel and spatial attention computed from the same input and
    /// multiplied together.
    Parallel,
    /// Channel attention only; the spatial response is fixed to 1.
    ChannelOnly,
    /// Spatial attention only; the channel response is fixed to 1.
    SpatialOnly,
    /// A 1×1 convolution followed by ReLU replaces the gate.
    Conv1x1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of each conv block; each block halves h and w.
    pub widths: Vec<usize>,
    pub n_classes: usize,
    pub n_experts: usize,
    pub reduction: usize,
    /// Build the alignment gate (otherwise classify `pool(F)` directly).
    pub attention: bool,
    /// Build the restoration gate. Requires `attention`.
    pub restoration: bool,
    pub gate_kind: GateKind,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            height: 16,
            width: 16,
            widths: vec![16, 32, 32],
            n_classes: 4,
            n_experts: 3,
            reduction: 8,
            attention: true,
            restoration: true,
            gate_kind: GateKind::Parallel,
        }
    }
}

impl NetConfig {
    pub fn feature_channels(&self) -> usize {
        *self.widths.last().unwrap_or(&self.in_channels)
    }

    pub fn feature_hw(&self) -> (usize, usize) {
        let d = self.widths.len() as u32;
        (self.height >> d, self.width >> d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(FarError::config("backbone needs at least one conv block"));
        }
        let (h, w) = self.feature_hw();
        if h == 0 || w == 0 {
            return Err(FarError::config(format!(
                "{}×{} input is too small for {} downsampling blocks",
                self.height,
                self.width,
                self.widths.len()
            )));
        }
        if self.n_classes < 2 {
            return Err(FarError::config("need at least two classes"));
        }
        if self.restoration && !self.attention {
            return Err(FarError::config("restoration requires the alignment gate"));
        }
        let c = self.feature_channels();
        if self.reduction == 0 || c % self.reduction != 0 {
            return Err(FarError::config(format!(
                "reduction ratio {} must divide feature channels {c}",
                self.reduction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real = f32> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
struct Affine {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct GateLayout {
    channel: Option<(Affine, Affine)>,
    spatial: Option<(Affine, Affine)>,
    conv: Option<Affine>,
}

#[derive(Clone, Debug)]
struct Layout {
    backbone: Vec<Affine>,
    align: Option<GateLayout>,
    restore: Option<GateLayout>,
    shared: Affine,
    experts: Vec<Affine>,
}

thread_local! {
    static GATE_EVALS: Cell<u64> = const { Cell::new(0) };
}

/// Number of gate evaluations performed on the current thread so far.
pub fn gate_evaluations() -> u64 {
    GATE_EVALS.with(|c| c.get())
}

/// Tape handles for every intermediate of one forward pass.
///
/// Fields that belong to modules a variant does not build are `None`.
#[derive(Clone, Debug)]
pub struct ForwardBundle {
    /// Backbone feature map `F`.
    pub feature: Var,
    /// `pool(F)`
    pub pooled_feature: Var,
    pub aligned: Option<Var>,
    pub residual: Option<Var>,
    pub residual_plus: Option<Var>,
    pub residual_minus: Option<Var>,
    /// `pool(A)`, or `pool(F)` when there is no alignment gate.
    pub f: Var,
    pub f_plus: Option<Var>,
    pub f_minus: Option<Var>,
    pub logits: Var,
    pub logits_plus: Option<Var>,
    pub logits_minus: Option<Var>,
    pub expert_logits: Vec<Var>,
    pub align_channel_gate: Option<Var>,
    pub align_spatial_gate: Option<Var>,
    pub restore_channel_gate: Option<Var>,
    pub restore_spatial_gate: Option<Var>,
}

impl ForwardBundle {
    /// Logits used for prediction: the shared classifier on `f⁺` when the
    /// restoration gate exists, otherwise on `f`.
    pub fn output_logits(&self) -> Var {
        self.logits_plus.unwrap_or(self.logits)
    }

    /// Pooled vector fed to the shared classifier at inference.
    pub fn output_feature(&self) -> Var {
        self.f_plus.unwrap_or(self.f)
    }
}

#[derive(Clone, Debug)]
pub struct FarModel<T: Real = f32> {
    config: NetConfig,
    params: Vec<Param<T>>,
    layout: Layout,
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    params: Vec<Param<f32>>,
}

impl Builder<'_> {
    fn affine(&mut self, name: &str, group: ParamGroup, wshape: &[usize], fan_in: usize, bias: usize) -> Affine {
        let weight = self.params.len();
        let value = kaiming_uniform(self.rng, wshape, fan_in);
        self.params.push(Param {
            name: format!("{name}.weight"),
            group,
            value,
        });
        self.params.push(Param {
            name: format!("{name}.bias"),
            group,
            value: Tensor::zeros(&[bias]),
        });
        Affine {
            weight,
            bias: weight + 1,
        }
    }

    fn gate(&mut self, prefix: &str, group: ParamGroup, cfg: &NetConfig) -> GateLayout {
        let c = cfg.feature_channels();
        let hidden = c / cfg.reduction;
        let channel = matches!(cfg.gate_kind, GateKind::Parallel | GateKind::ChannelOnly).then(|| {
            (
                self.affine(&format!("{prefix}.channel.fc1"), group, &[c, hidden], c, hidden),
                self.affine(&format!("{prefix}.channel.fc2"), group, &[hidden, c], hidden, c),
            )
        });
        let spatial = matches!(cfg.gate_kind, GateKind::Parallel | GateKind::SpatialOnly).then(|| {
            (
                self.affine(&format!("{prefix}.spatial.conv1"), group, &[2, 2, 3, 3], 18, 2),
                self.affine(&format!("{prefix}.spatial.conv2"), group, &[1, 2, 3, 3], 18, 1),
            )
        });
        let conv = matches!(cfg.gate_kind, GateKind::Conv1x1)
            .then(|| self.affine(&format!("{prefix}.conv1x1"), group, &[c, c, 1, 1], c, c));
        GateLayout {
            channel,
            spatial,
            conv,
        }
    }
}

impl FarModel<f32> {
    /// Kaiming-uniform (fan-in) weights, zero biases.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            rng: &mut rng,
            params: Vec::new(),
        };
        let mut backbone = Vec::new();
        let mut c_in = config.in_channels;
        for (i, &c_out) in config.widths.iter().enumerate() {
            backbone.push(b.affine(
                &format!("backbone.conv{i}"),
                ParamGroup::Backbone,
                &[c_out, c_in, 3, 3],
                c_in * 9,
                c_out,
            ));
            c_in = c_out;
        }
        let c = config.feature_channels();
        let k = config.n_classes;
        let align = config
            .attention
            .then(|| b.gate("align", ParamGroup::Alignment, &config));
        let restore = config
            .restoration
            .then(|| b.gate("restore", ParamGroup::Restoration, &config));
        let shared = b.affine("shared", ParamGroup::SharedClassifier, &[c, k], c, k);
        let experts = (0..config.n_experts)
            .map(|i| b.affine(&format!("expert{i}"), ParamGroup::Expert(i), &[c, k], c, k))
            .collect();
        let params = b.params;
        Ok(Self {
            config,
            params,
            layout: Layout {
                backbone,
                align,
                restore,
                shared,
                experts,
            },
        })
    }
}

impl<T: Real> FarModel<T> {
    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param_count_in(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Real>(&self) -> FarModel<U> {
        FarModel {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Records every parameter as a leaf; the returned vars are in
    /// parameter order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    /// Sets the output bias of every gate so each response saturates near
    /// `sigmoid(bias)`.
    pub fn set_gate_bias(&mut self, bias: f64) {
        for p in self.params.iter_mut() {
            let is_gate_out = p.name.ends_with("channel.fc2.bias") || p.name.ends_with("spatial.conv2.bias");
            if is_gate_out {
                p.value = Tensor::full(p.value.shape(), T::lit(bias));
            }
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.nchw()?;
        if c != self.config.in_channels || h != self.config.height || w != self.config.width {
            return Err(FarError::dim(format!(
                "input {:?} does not match configured {}×{}×{}",
                x.shape(),
                self.config.in_channels,
                self.config.height,
                self.config.width
            )));
        }
        Ok(())
    }

    /// Backbone feature map `F` for a `c×H×W` image or an `n×c×H×W` batch.
    pub fn extract(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let mut h = x;
        for layer in &self.layout.backbone {
            let conv = tape.conv2d(h, vars[layer.weight], Some(vars[layer.bias]), 1)?;
            let act = tape.relu(conv);
            h = tape.avg_pool2(act)?;
        }
        Ok(h)
    }

    fn linear(&self, tape: &mut Tape<T>, vars: &[Var], layer: Affine, x: Var) -> Result<Var> {
        let z = tape.matmul(x, vars[layer.weight])?;
        tape.add_bias(z, vars[layer.bias])
    }

    /// Channel response `a` (`n×c`) and spatial response `S` (`n×1×h×w`) of
    /// a gate, both read from the same input map.
    fn gate_responses(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        gate: &GateLayout,
        x: Var,
    ) -> Result<(Option<Var>, Option<Var>)> {
        GATE_EVALS.with(|c| c.set(c.get() + 1));
        let channel = match gate.channel {
            Some((fc1, fc2)) => {
                let pooled = tape.global_avg_pool(x)?;
                let hidden = self.linear(tape, vars, fc1, pooled)?;
                let hidden = tape.relu(hidden);
                let out = self.linear(tape, vars, fc2, hidden)?;
                Some(tape.sigmoid(out))
            }
            None => None,
        };
        let spatial = match gate.spatial {
            Some((c1, c2)) => {
                let pooled = tape.channel_pool(x)?;
                let h1 = tape.conv2d(pooled, vars[c1.weight], Some(vars[c1.bias]), 1)?;
                let h1 = tape.relu(h1);
                let h2 = tape.conv2d(h1, vars[c2.weight], Some(vars[c2.bias]), 1)?;
                Some(tape.sigmoid(h2))
            }
            None => None,
        };
        Ok((channel, spatial))
    }

    /// Applies gate responses to `x`: `S[i,j] · a[k] · x[k,i,j]`.
    fn apply_gate(tape: &mut Tape<T>, x: Var, channel: Option<Var>, spatial: Option<Var>) -> Result<Var> {
        let mut out = x;
        if let Some(a) = channel {
            out = tape.mul_channel(out, a)?;
        }
        if let Some(s) = spatial {
            out = tape.mul_spatial(out, s)?;
        }
        Ok(out)
    }

    /// Alignment gate: `A = S ⊙ (a ⊙ F)`.
    pub fn attend(&self, tape: &mut Tape<T>, vars: &[Var], feature: Var) -> Result<(Var, Option<Var>, Option<Var>)> {
        let gate = self
            .layout
            .align
            .ok_or_else(|| FarError::contract("model has no alignment gate"))?;
        self.gated(tape, vars, &gate, feature)
    }

    /// Restoration split of a residual: `(R⁺, R⁻, a, S)` with
    /// `R⁺ = Gate(R)·R` and `R⁻ = (1 − Gate(R))·R`.
    pub fn restore_split(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        residual: Var,
    ) -> Result<(Var, Var, Option<Var>, Option<Var>)> {
        let gate = self
            .layout
            .restore
            .ok_or_else(|| FarError::contract("model has no restoration gate"))?;
        let (plus, a, s) = self.gated(tape, vars, &gate, residual)?;
        let minus = tape.sub(residual, plus)?;
        Ok((plus, minus, a, s))
    }

    fn gated(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        gate: &GateLayout,
        x: Var,
    ) -> Result<(Var, Option<Var>, Option<Var>)> {
        if let Some(conv) = gate.conv {
            GATE_EVALS.with(|c| c.set(c.get() + 1));
            let z = tape.conv2d(x, vars[conv.weight], Some(vars[conv.bias]), 0)?;
            return Ok((tape.relu(z), None, None));
        }
        let (a, s) = self.gate_responses(tape, vars, gate, x)?;
        Ok((Self::apply_gate(tape, x, a, s)?, a, s))
    }

    /// Full forward pass over an `n×c×H×W` batch.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<ForwardBundle> {
        if vars.len() != self.params.len() {
            return Err(FarError::contract(format!(
                "{} bound vars for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        if tape.value(x).rank() != 4 {
            return Err(FarError::dim(format!(
                "forward expects an n×c×H×W batch, got {:?}",
                tape.value(x).shape()
            )));
        }
        let feature = self.extract(tape, vars, x)?;
        let pooled_feature = tape.global_avg_pool(feature)?;

        let mut bundle = ForwardBundle {
            feature,
            pooled_feature,
            aligned: None,
            residual: None,
            residual_plus: None,
            residual_minus: None,
            f: pooled_feature,
            f_plus: None,
            f_minus: None,
            logits: pooled_feature,
            logits_plus: None,
            logits_minus: None,
            expert_logits: Vec::new(),
            align_channel_gate: None,
            align_spatial_gate: None,
            restore_channel_gate: None,
            restore_spatial_gate: None,
        };

        if self.layout.align.is_some() {
            let (aligned, a, s) = self.attend(tape, vars, feature)?;
            bundle.aligned = Some(aligned);
            bundle.align_channel_gate = a;
            bundle.align_spatial_gate = s;
            bundle.f = tape.global_avg_pool(aligned)?;

            if self.layout.restore.is_some() {
                let residual = tape.sub(feature, aligned)?;
                let (plus, minus, ra, rs) = self.restore_split(tape, vars, residual)?;
                bundle.residual = Some(residual);
                bundle.residual_plus = Some(plus);
                bundle.residual_minus = Some(minus);
                bundle.restore_channel_gate = ra;
                bundle.restore_spatial_gate = rs;
                let enhanced = tape.add(aligned, plus)?;
                let contaminated = tape.add(aligned, minus)?;
                bundle.f_plus = Some(tape.global_avg_pool(enhanced)?);
                bundle.f_minus = Some(tape.global_avg_pool(contaminated)?);
            }
        }

        let shared = self.layout.shared;
        bundle.logits = self.linear(tape, vars, shared, bundle.f)?;
        if let Some(fp) = bundle.f_plus {
            bundle.logits_plus = Some(self.linear(tape, vars, shared, fp)?);
        }
        if let Some(fm) = bundle.f_minus {
            bundle.logits_minus = Some(self.linear(tape, vars, shared, fm)?);
        }
        for &expert in &self.layout.experts {
            let logits = self.linear(tape, vars, expert, pooled_feature)?;
            bundle.expert_logits.push(logits);
        }
        Ok(bundle)
    }

    /// Shared-classifier logits for a batch; experts are not evaluated.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let bundle = self.inference_bundle(&mut tape, &vars, xv)?;
        Ok(tape.value(bundle).clone())
    }

    fn inference_bundle(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        if tape.value(x).rank() != 4 {
            return Err(FarError::dim(format!(
                "inference expects an n×c×H×W batch, got {:?}",
                tape.value(x).shape()
            )));
        }
        let feature = self.extract(tape, vars, x)?;
        let pooled = match self.layout.align {
            None => tape.global_avg_pool(feature)?,
            Some(_) => {
                let (aligned, _, _) = self.attend(tape, vars, feature)?;
                match self.layout.restore {
                    None => tape.global_avg_pool(aligned)?,
                    Some(_) => {
                        let residual = tape.sub(feature, aligned)?;
                        let (plus, _, _, _) = self.restore_split(tape, vars, residual)?;
                        let enhanced = tape.add(aligned, plus)?;
                        tape.global_avg_pool(enhanced)?
                    }
                }
            }
        };
        self.linear(tape, vars, self.layout.shared, pooled)
    }

    /// Predicted class per image of an `n×c×H×W` batch.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        let k = self.config.n_classes;
        Ok(logits.data().chunks(k).map(argmax).collect())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
