mod common;

use std::time::Instant;

use far_core::data::MultiDomainBatch;
use far_core::gradcheck::{analytic_grad, compare, eval_scalar, numeric_grad, ScalarFn};
use far_core::losses::consist_l1;
use far_core::network::FarModel;
use far_core::trainer::{batch_losses, LossPlan};
use far_core::{Real, Result, Tape, Tensor, Var};

const LOSSES: [&str; 5] = ["l_align", "l_dre_plus", "l_dre_minus", "l_cls", "l_consist"];

struct LossOf<'a> {
    model: &'a FarModel,
    batch: &'a MultiDomainBatch,
    which: &'static str,
}

impl ScalarFn for LossOf<'_> {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var> {
        let model: FarModel<T> = self.model.cast();
        let x = tape.leaf(self.batch.images.cast());
        let fwd = model.forward(tape, params, x)?;
        let l = batch_losses(tape, &model, &fwd, self.batch, &LossPlan::default())?;
        let v = match self.which {
            "l_align" => l.align,
            "l_dre_plus" => l.dre_plus,
            "l_dre_minus" => l.dre_minus,
            "l_cls" => l.cls,
            _ => l.consist,
        };
        Ok(v.expect("loss recorded"))
    }
}

/// `L_consist` with the expert probabilities held at `base`: the function
/// whose gradient the detached teacher describes.
struct FrozenTeacher<'a> {
    model: &'a FarModel,
    batch: &'a MultiDomainBatch,
    base: &'a [Tensor<f64>],
}

impl ScalarFn for FrozenTeacher<'_> {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var> {
        let model: FarModel<T> = self.model.cast();
        let frozen: Vec<Var> = self.base.iter().map(|p| tape.leaf(p.cast())).collect();
        let x = tape.leaf(self.batch.images.cast());
        let teacher_fwd = model.forward(tape, &frozen, x)?;
        let fwd = model.forward(tape, params, x)?;
        let m = self.batch.per_domain;
        let sources: Vec<_> = self.batch.source_blocks().collect();
        let mut total = None;
        for (i, b) in sources.iter().enumerate() {
            let t = tape.slice_rows(teacher_fwd.expert_logits[i], b.start, m)?;
            let t = tape.softmax(t)?;
            let s = tape.slice_rows(fwd.output_logits(), b.start, m)?;
            let s = tape.softmax(s)?;
            let term = consist_l1(tape, t, s)?;
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        Ok(tape.scale(total.expect("source blocks"), 1.0 / sources.len() as f64))
    }
}

const STEP: f64 = 1e-5;

#[test]
fn every_loss_matches_finite_differences_through_the_full_model() {
    let start = Instant::now();
    let model = common::micro_model(11);
    let batch = common::micro_batch(2, 5);
    let p32: Vec<Tensor<f32>> = model.params().iter().map(|p| p.value.clone()).collect();
    let p64: Vec<Tensor<f64>> = p32.iter().map(|p| p.cast()).collect();
    for which in LOSSES {
        let f = LossOf {
            model: &model,
            batch: &batch,
            which,
        };
        let ad = analytic_grad(&f, &p32).unwrap();
        let fd = if which == "l_consist" {
            let frozen = FrozenTeacher {
                model: &model,
                batch: &batch,
                base: &p64,
            };
            let (a, b) = (eval_scalar(&f, &p64).unwrap(), eval_scalar(&frozen, &p64).unwrap());
            assert!((a - b).abs() < 1e-12, "oracle disagrees on the value: {a} vs {b}");
            numeric_grad(&frozen, &p64, STEP).unwrap()
        } else {
            numeric_grad(&f, &p64, STEP).unwrap()
        };
        let report = compare(&ad, &fd, 1e-3);
        println!(
            "{which}: {} scalars, {:.4} within 1e-3, max rel error {:.3e}",
            report.rel_errors.len(),
            report.pass_fraction,
            report.max_rel_error
        );
        assert!(report.passed_fraction_at_least(0.99), "{which}: {:.4}", report.pass_fraction);
    }
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn gradient_of_a_sum_is_the_sum_of_gradients() {
    let model = common::micro_model(2);
    let batch = common::micro_batch(2, 3);
    let mut tape = Tape::<f32>::new();
    let vars = model.bind(&mut tape);
    let x = tape.leaf(batch.images.clone());
    let fwd = model.forward(&mut tape, &vars, x).unwrap();
    let l = batch_losses(&mut tape, &model, &fwd, &batch, &LossPlan::default()).unwrap();
    let (a, b) = (l.cls.unwrap(), l.align.unwrap());
    let total = tape.add(a, b).unwrap();
    let (ga, gb, gt) = (
        tape.backward(a).unwrap(),
        tape.backward(b).unwrap(),
        tape.backward(total).unwrap(),
    );
    for &v in &vars {
        let (ga, gb, gt) = (ga.get(v).unwrap(), gb.get(v).unwrap(), gt.get(v).unwrap());
        for ((x, y), z) in ga.data().iter().zip(gb.data()).zip(gt.data()) {
            assert!(((x + y) - z).abs() <= 1e-6 * (1.0 + z.abs()));
        }
    }
}
