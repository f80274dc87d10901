//! Training objectives: moment-distance alignment, dual ranking entropy,
//! cross-entropy, L1 teacher-student consistency, and their weighted sum.
//!
//! Tape versions take batched logits/features (`n×k`, `n×c`) and return
//! scalar batch means. Plain-tensor helpers evaluate the same formulas on
//! single vectors and check their input contracts.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{FarError, Result};
use crate::tensor::{Real, Tensor};

/// Pooled aligned features of one domain inside a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainFeatureBatch {
    pub domain_id: usize,
    pub features: Vec<Tensor<f32>>,
    pub is_target: bool,
}

impl DomainFeatureBatch {
    fn stacked(&self) -> Result<Tensor<f64>> {
        let first = self.features.first().ok_or_else(|| {
            FarError::contract(format!("domain {} has no samples", self.domain_id))
        })?;
        let c = first.len();
        let mut data = Vec::with_capacity(c * self.features.len());
        for f in &self.features {
            if f.len() != c || f.rank() != 1 {
                return Err(FarError::dim(format!(
                    "domain {}: feature {:?} differs from length {c}",
                    self.domain_id,
                    f.shape()
                )));
            }
            data.extend(f.data().iter().map(|&v| v as f64));
        }
        Tensor::new(vec![self.features.len(), c], data)
    }
}

fn moments<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
    let mean = tape.mean_rows(x)?;
    let centered = tape.sub_row(x, mean)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_rows(sq)?;
    Ok((mean, var))
}

fn mean_of<T: Real>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64))
}

/// Moment distance between per-domain feature batches (`m×c` each).
///
/// Per domain, the batch mean and population variance of every feature
/// dimension are compared in L2: each source against the target (averaged
/// over sources) and every source pair (averaged over pairs), for both
/// moments. Without a target only the pairwise terms remain; with a single
/// source the pairwise terms are dropped.
pub fn moment_distance<T: Real>(tape: &mut Tape<T>, sources: &[Var], target: Option<Var>) -> Result<Var> {
    if sources.is_empty() {
        return Err(FarError::contract("moment distance needs at least one source domain"));
    }
    let mut width = None;
    for &d in sources.iter().chain(target.iter()) {
        match *tape.value(d).shape() {
            [m, c] if m >= 1 => {
                if width.is_some_and(|w| w != c) {
                    return Err(FarError::dim("domains disagree on feature length"));
                }
                width = Some(c);
            }
            ref s => {
                return Err(FarError::contract(format!(
                    "domain batch must be m×c with m ≥ 1, got {s:?}"
                )))
            }
        }
    }
    let src: Vec<(Var, Var)> = sources
        .iter()
        .map(|&s| moments(tape, s))
        .collect::<Result<_>>()?;
    let mut terms = Vec::new();
    if let Some(t) = target {
        let (mu_t, var_t) = moments(tape, t)?;
        for pick in [0usize, 1] {
            let mut dists = Vec::with_capacity(src.len());
            for &(mu, var) in &src {
                let (a, b) = if pick == 0 { (mu, mu_t) } else { (var, var_t) };
                let d = tape.sub(a, b)?;
                dists.push(tape.l2_norm(d));
            }
            terms.push(mean_of(tape, &dists)?);
        }
    }
    if src.len() >= 2 {
        for pick in [0usize, 1] {
            let mut dists = Vec::new();
            for i in 0..src.len() {
                for j in i + 1..src.len() {
                    let (a, b) = if pick == 0 {
                        (src[i].0, src[j].0)
                    } else {
                        (src[i].1, src[j].1)
                    };
                    let d = tape.sub(a, b)?;
                    dists.push(tape.l2_norm(d));
                }
            }
            terms.push(mean_of(tape, &dists)?);
        }
    }
    if terms.is_empty() {
        return Ok(tape.leaf(Tensor::scalar(T::zero())));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// [`moment_distance`] over collections of pooled feature vectors.
pub fn moment_distance_batches(
    sources: &[DomainFeatureBatch],
    target: Option<&DomainFeatureBatch>,
) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let src: Vec<Var> = sources
        .iter()
        .map(|b| b.stacked().map(|t| tape.leaf(t)))
        .collect::<Result<_>>()?;
    let tgt = match target {
        Some(b) => Some(tape.leaf(b.stacked()?)),
        None => None,
    };
    let md = moment_distance(&mut tape, &src, tgt)?;
    tape.value(md).item()
}

/// Shannon entropy `−Σ pᵢ ln pᵢ` of a probability vector, with `0·ln 0 = 0`
/// via clamping at `1e-12`.
pub fn entropy(p: &Tensor<f64>) -> Result<f64> {
    check_probabilities(p, "entropy")?;
    Ok(-p
        .data()
        .iter()
        .map(|&v| v * v.max(1e-12).ln())
        .sum::<f64>())
}

fn check_probabilities<T: Real>(p: &Tensor<T>, what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(FarError::contract(format!("{what}: empty probability vector")));
    }
    if p.data().iter().any(|&v| !(v >= T::zero())) {
        return Err(FarError::contract(format!("{what}: negative or NaN probability")));
    }
    let total = p.sum().as_f64();
    if (total - 1.0).abs() > 1e-4 {
        return Err(FarError::contract(format!(
            "{what}: probabilities sum to {total}, not 1"
        )));
    }
    Ok(())
}

/// Per-row entropy of `softmax(logits)` for an `n×k` matrix, giving `[n]`.
pub fn entropy_of_logits<T: Real>(tape: &mut Tape<T>, logits: Var) -> Result<Var> {
    let p = tape.softmax(logits)?;
    let logp = tape.log_softmax(logits)?;
    let plogp = tape.mul(p, logp)?;
    let s = tape.sum_last(plogp)?;
    Ok(tape.scale(s, -1.0))
}

/// Dual ranking entropy losses, each a batch mean of per-sample terms:
/// `softplus(E(p⁺) − E(p))` and `softplus(E(p) − E(p⁻))`.
pub fn dre_loss<T: Real>(
    tape: &mut Tape<T>,
    logits_plus: Var,
    logits_ref: Var,
    logits_minus: Var,
) -> Result<(Var, Var)> {
    let e_plus = entropy_of_logits(tape, logits_plus)?;
    let e_ref = entropy_of_logits(tape, logits_ref)?;
    let e_minus = entropy_of_logits(tape, logits_minus)?;
    let d_plus = tape.sub(e_plus, e_ref)?;
    let d_minus = tape.sub(e_ref, e_minus)?;
    let s_plus = tape.softplus(d_plus);
    let s_minus = tape.softplus(d_minus);
    Ok((tape.mean(s_plus)?, tape.mean(s_minus)?))
}

/// Entropy objectives without the ranking: minimize `E(p⁺)` and maximize
/// `E(p⁻)`, the latter written as `ln k − E(p⁻) ≥ 0`.
pub fn direct_entropy_loss<T: Real>(
    tape: &mut Tape<T>,
    logits_plus: Var,
    logits_minus: Var,
) -> Result<(Var, Var)> {
    let k = *tape
        .value(logits_plus)
        .shape()
        .last()
        .ok_or_else(|| FarError::dim("logits must have a class axis"))?;
    let e_plus = entropy_of_logits(tape, logits_plus)?;
    let e_minus = entropy_of_logits(tape, logits_minus)?;
    let neg = tape.scale(e_minus, -1.0);
    let bounded = tape.add_scalar(neg, (k as f64).ln());
    Ok((tape.mean(e_plus)?, tape.mean(bounded)?))
}

/// Batch-mean cross-entropy `−ln softmax(z)[y]`, via log-sum-exp.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let k = *tape
        .value(logits)
        .shape()
        .last()
        .ok_or_else(|| FarError::dim("logits must have a class axis"))?;
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(FarError::contract(format!("label {bad} out of range for {k} classes")));
    }
    let logp = tape.log_softmax(logits)?;
    let picked = tape.gather(logp, labels)?;
    let m = tape.mean(picked)?;
    Ok(tape.scale(m, -1.0))
}

/// Batch-mean L1 distance `Σᵢ |teacherᵢ − studentᵢ|` between two `n×k`
/// probability matrices. Pass a detached teacher to keep gradients on the
/// student side.
pub fn consist_l1<T: Real>(tape: &mut Tape<T>, teacher_probs: Var, student_probs: Var) -> Result<Var> {
    let d = tape.sub(teacher_probs, student_probs)?;
    let a = tape.abs(d);
    let rows = tape.sum_last(a)?;
    tape.mean(rows)
}

/// L1 distance between two probability vectors.
pub fn consist_l1_probs(teacher: &Tensor<f64>, student: &Tensor<f64>) -> Result<f64> {
    check_probabilities(teacher, "consist_l1 teacher")?;
    check_probabilities(student, "consist_l1 student")?;
    if teacher.shape() != student.shape() {
        return Err(FarError::dim("consist_l1 inputs differ in length"));
    }
    Ok(teacher
        .data()
        .iter()
        .zip(student.data())
        .map(|(a, b)| (a - b).abs())
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub align: f64,
    pub dre: f64,
    pub cls: f64,
    pub consist: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            align: 0.5,
            dre: 0.1,
            cls: 1.0,
            consist: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_align", self.align),
            ("lambda_dre", self.dre),
            ("lambda_cls", self.cls),
            ("lambda_consist", self.consist),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(FarError::config(format!("{name} must be a finite value ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub align: f64,
    pub dre_plus: f64,
    pub dre_minus: f64,
    pub cls: f64,
    pub consist: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub components: LossComponents,
    pub weights: LossWeights,
}

impl LossBundle {
    pub fn total(&self) -> f64 {
        let c = &self.components;
        let w = &self.weights;
        w.align * c.align + w.dre * (c.dre_plus + c.dre_minus) + w.cls * c.cls + w.consist * c.consist
    }
}

pub fn compose_total(components: LossComponents, weights: LossWeights) -> Result<LossBundle> {
    weights.validate()?;
    Ok(LossBundle {
        components,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(id: usize, rows: &[&[f32]], target: bool) -> DomainFeatureBatch {
        DomainFeatureBatch {
            domain_id: id,
            features: rows.iter().map(|r| Tensor::from_vec(r.to_vec())).collect(),
            is_target: target,
        }
    }

    #[test]
    fn moment_distance_hand_example() {
        let s = [
            batch(0, &[&[0.0]], false),
            batch(1, &[&[1.0]], false),
            batch(2, &[&[2.0]], false),
        ];
        let t = batch(3, &[&[1.0]], true);
        let md = moment_distance_batches(&s, Some(&t)).unwrap();
        assert!((md - 2.0).abs() < 1e-12, "{md}");
    }

    #[test]
    fn moment_distance_zero_for_identical_domains() {
        let rows: &[&[f32]] = &[&[0.1, 0.5], &[0.7, -0.2], &[0.3, 0.3]];
        let s = [batch(0, rows, false), batch(1, rows, false)];
        let t = batch(2, rows, true);
        assert_eq!(moment_distance_batches(&s, Some(&t)).unwrap(), 0.0);
    }

    #[test]
    fn moment_distance_dg_and_single_source() {
        let s = [batch(0, &[&[0.0], &[2.0]], false), batch(1, &[&[1.0], &[1.0]], false)];
        // means 1,1; variances 1,0 → pairwise terms only
        assert!((moment_distance_batches(&s, None).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(moment_distance_batches(&s[..1], None).unwrap(), 0.0);
        let t = batch(9, &[&[3.0], &[3.0]], true);
        // single source vs target: |1−3| + |1−0|
        assert!((moment_distance_batches(&s[..1], Some(&t)).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn moment_distance_contract_errors() {
        assert!(matches!(moment_distance_batches(&[], None), Err(FarError::Contract(_))));
        let empty = batch(0, &[], false);
        assert!(matches!(
            moment_distance_batches(&[empty], None),
            Err(FarError::Contract(_))
        ));
    }

    #[test]
    fn entropy_values() {
        let u = Tensor::from_vec(vec![0.25; 4]);
        assert!((entropy(&u).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&Tensor::from_vec(vec![0.0, 1.0, 0.0])).unwrap(), 0.0);
        let e = entropy(&Tensor::from_vec(vec![0.9, 0.1])).unwrap();
        let oracle = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((e - oracle).abs() < 1e-15);
        assert!((e - 0.325083).abs() < 1e-6);
        assert!(entropy(&Tensor::from_vec(vec![0.5, 0.6])).is_err());
    }

    #[test]
    fn dre_equal_logits_is_ln2() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.0, 0.5]).unwrap());
        let (p, m) = dre_loss(&mut tape, z, z, z).unwrap();
        assert!((tape.value(p).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((tape.value(m).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn dre_softplus_arithmetic() {
        // softplus(0.325 − 0.693) = ln(1 + e^−0.368)
        let v = crate::kernels::softplus(0.325f64 - 0.693);
        assert!((v - (1.0 + (-0.368f64).exp()).ln()).abs() < 1e-15);
        // 0.52598, quoted as ≈ 0.524
        assert!((v - 0.524).abs() < 5e-3);
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let ce = cross_entropy(&mut tape, z, &[0]).unwrap();
        let lse = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((tape.value(ce).item().unwrap() - (lse - 1.0)).abs() < 1e-12);
        assert!((lse - 1.0 - 2.40761).abs() < 1e-5);
        let u = tape.leaf(Tensor::zeros(&[1, 4]));
        let ce_u = cross_entropy(&mut tape, u, &[2]).unwrap();
        assert!((tape.value(ce_u).item().unwrap() - 4f64.ln()).abs() < 1e-12);
        let sharp = tape.leaf(Tensor::new(vec![1, 2], vec![60.0, 0.0]).unwrap());
        let ce_s = cross_entropy(&mut tape, sharp, &[0]).unwrap();
        assert!(tape.value(ce_s).item().unwrap() < 1e-20);
        assert!(matches!(
            cross_entropy(&mut tape, z, &[3]),
            Err(FarError::Contract(_))
        ));
    }

    #[test]
    fn consist_values() {
        let t = |v: &[f64]| Tensor::from_vec(v.to_vec());
        assert_eq!(consist_l1_probs(&t(&[0.3, 0.7]), &t(&[0.3, 0.7])).unwrap(), 0.0);
        assert_eq!(consist_l1_probs(&t(&[1.0, 0.0]), &t(&[0.0, 1.0])).unwrap(), 2.0);
        assert!((consist_l1_probs(&t(&[0.7, 0.3]), &t(&[0.5, 0.5])).unwrap() - 0.4).abs() < 1e-12);
        assert!(consist_l1_probs(&t(&[0.7, 0.7]), &t(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn compose_total_weighted_sum() {
        let w = LossWeights::default();
        let zero = compose_total(LossComponents::default(), w).unwrap();
        assert_eq!(zero.total(), 0.0);
        let a = compose_total(
            LossComponents {
                align: 2.0,
                ..Default::default()
            },
            w,
        )
        .unwrap();
        assert_eq!(a.total(), 1.0);
        let all = compose_total(
            LossComponents {
                align: 1.0,
                dre_plus: 0.25,
                dre_minus: 0.75,
                cls: 1.0,
                consist: 0.01,
            },
            w,
        )
        .unwrap();
        assert!((all.total() - 2.6).abs() < 1e-12);
        let bad = LossWeights {
            dre: -0.1,
            ..w
        };
        assert!(matches!(
            compose_total(LossComponents::default(), bad),
            Err(FarError::Config(_))
        ));
    }
}
