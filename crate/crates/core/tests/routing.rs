mod common;

use far_core::diagnostics::{variant_trainer, ExperimentConfig, VariantId};
use far_core::losses::LossWeights;
use far_core::network::{FarModel, ParamGroup};
use far_core::trainer::{
    batch_losses, routed_step, routed_step_masked, LossPlan, OptimizerState, SubStep, SubSteps, TrainConfig,
};
use far_core::Tape;

fn allowed(which: SubStep, group: ParamGroup) -> bool {
    match which {
        SubStep::Cls => true,
        SubStep::Align => group == ParamGroup::Alignment,
        SubStep::Dre => group == ParamGroup::Restoration,
        SubStep::Consist => group == ParamGroup::SharedClassifier,
    }
}

fn uda_config() -> TrainConfig {
    TrainConfig {
        mode: far_core::trainer::Mode::Uda,
        ..TrainConfig::default()
    }
}

#[test]
fn each_sub_step_touches_only_its_group() {
    let batch = common::micro_batch(2, 9);
    let cfg = uda_config();
    for which in SubStep::ORDER {
        let before = common::micro_model(4);
        let mut model = before.clone();
        let mut opt = OptimizerState::zeros_like(&model);
        routed_step(&mut model, &mut opt, &batch, &cfg, &LossPlan::default(), 0.1, &SubSteps::only(which)).unwrap();
        let mut changed_inside = 0;
        for (p, q) in before.params().iter().zip(model.params()) {
            let same = p.value.data().iter().zip(q.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if allowed(which, p.group) {
                changed_inside += usize::from(!same);
            } else {
                assert!(same, "{which:?} changed {}", p.name);
            }
        }
        assert!(changed_inside > 0, "{which:?} changed nothing");
    }
}

#[test]
fn four_pass_step_matches_masked_single_backward() {
    let cfg = uda_config();
    let mut a = common::micro_model(6);
    let mut b = a.clone();
    let (mut oa, mut ob) = (OptimizerState::zeros_like(&a), OptimizerState::zeros_like(&b));
    for s in 0..3 {
        let batch = common::micro_batch(2, 100 + s);
        let ra = routed_step(&mut a, &mut oa, &batch, &cfg, &LossPlan::default(), 0.05, &SubSteps::ALL).unwrap();
        let rb = routed_step_masked(&mut b, &mut ob, &batch, &cfg, &LossPlan::default(), 0.05, &SubSteps::ALL).unwrap();
        assert_eq!(ra.losses, rb.losses);
    }
    let mut worst = 0.0f64;
    for (p, q) in a.params().iter().zip(b.params()) {
        worst = worst.max(p.value.max_abs_diff(&q.value));
    }
    assert!(worst <= 1e-7, "max parameter difference {worst:e}");
}

#[test]
fn momentum_free_single_loss_step_is_plain_gradient_descent() {
    let batch = common::micro_batch(2, 21);
    let cfg = TrainConfig {
        momentum: 0.0,
        ..uda_config()
    };
    let lr = 0.1;
    for which in SubStep::ORDER {
        let before = common::micro_model(8);

        let mut tape = Tape::<f32>::new();
        let vars = before.bind(&mut tape);
        let x = tape.leaf(batch.images.clone());
        let fwd = before.forward(&mut tape, &vars, x).unwrap();
        let l = batch_losses(&mut tape, &before, &fwd, &batch, &LossPlan::default()).unwrap();
        let (root, weight) = match which {
            SubStep::Cls => (l.cls.unwrap(), cfg.weights.cls),
            SubStep::Align => (l.align.unwrap(), cfg.weights.align),
            SubStep::Dre => (tape.add(l.dre_plus.unwrap(), l.dre_minus.unwrap()).unwrap(), cfg.weights.dre),
            SubStep::Consist => (l.consist.unwrap(), cfg.weights.consist),
        };
        let grads = tape.backward(root).unwrap();

        let mut model = before.clone();
        let mut opt = OptimizerState::zeros_like(&model);
        routed_step(&mut model, &mut opt, &batch, &cfg, &LossPlan::default(), lr, &SubSteps::only(which)).unwrap();
        for ((p, q), &v) in before.params().iter().zip(model.params()).zip(&vars) {
            let g = grads.get(v).unwrap();
            for ((&w0, &w1), &gi) in p.value.data().iter().zip(q.value.data()).zip(g.data()) {
                // parameters live in f32, so the reference update does too
                let expected = if allowed(which, p.group) {
                    w0 - lr as f32 * (gi * weight as f32)
                } else {
                    w0
                };
                assert!((w1 - expected).abs() <= 1e-7, "{which:?} {}: {w1} vs {expected}", p.name);
            }
        }
    }
}

fn tiny_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.benchmark = common::small_benchmark(32, 16);
    cfg.train.epochs = 1;
    cfg.train.batch_per_domain = 8;
    cfg
}

fn assert_params_unchanged(before: &FarModel, after: &FarModel) {
    for (p, q) in before.params().iter().zip(after.params()) {
        assert_eq!(p.value, q.value, "{} changed", p.name);
    }
}

#[test]
fn zero_weights_leave_parameters_untouched() {
    let mut cfg = tiny_experiment();
    cfg.train.weights = LossWeights {
        align: 0.0,
        dre: 0.0,
        cls: 0.0,
        consist: 0.0,
    };
    let bench = cfg.benchmark.build().unwrap();
    let (mut trainer, data) = variant_trainer(VariantId::FAR, &cfg, &bench.train, &bench.test).unwrap();
    let before = trainer.model.clone();
    trainer.run(&data).unwrap();
    assert_params_unchanged(&before, &trainer.model);
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let mut cfg = tiny_experiment();
    cfg.train.lr_init = 0.0;
    let bench = cfg.benchmark.build().unwrap();
    let (mut trainer, data) = variant_trainer(VariantId::FAR, &cfg, &bench.train, &bench.test).unwrap();
    let before = trainer.model.clone();
    trainer.run(&data).unwrap();
    assert_params_unchanged(&before, &trainer.model);
}

#[test]
fn parameter_groups_partition_the_model() {
    let model = common::micro_model(0);
    let total: usize = model.params().iter().map(|p| p.value.len()).sum();
    let mut groups = vec![
        ParamGroup::Backbone,
        ParamGroup::Alignment,
        ParamGroup::Restoration,
        ParamGroup::SharedClassifier,
    ];
    groups.extend((0..model.config().n_experts).map(ParamGroup::Expert));
    let by_group: usize = groups.iter().map(|&g| model.param_count_in(g)).sum();
    assert_eq!(by_group, total);
    assert_eq!(model.param_count(), total);
}
