//! End-to-end checks of the trainer on toy-sized data.

use gradia_core::attention::mask_to_target_grid;
use gradia_core::dataset::Split;
use gradia_core::loss::{BalanceFactors, Condition};
use gradia_core::model::{init_model, ModelConfig, Parameters};
use gradia_core::reasonability::{m1_accuracy, m2_ra_performance, m4_attention_accuracy, MetricsReport};
use gradia_core::synthetic::{generate_dataset, oracle_mask, SceneSpec, SplitCounts, SyntheticInstance};
use gradia_core::trainer::{
    build_validation_matrix, evaluate, few_shot_study, finetune_gradia, finetune_gradia_observed, pool_entry,
    sensitivity_sweep, train_baseline, AnnotationPools, FewShotConfig, FewShotScenario, OracleAnnotator, PoolEntry,
    TrainConfig,
};

fn toy_model() -> ModelConfig {
    ModelConfig {
        input_height: 12,
        input_width: 12,
        ..ModelConfig::tiny()
    }
}

fn toy(total: usize, seed: u64) -> Vec<SyntheticInstance> {
    let spec = SceneSpec {
        image_size: 12,
        shape_size_range: (2, 3),
        seed,
        ..SceneSpec::default()
    };
    generate_dataset(&spec, SplitCounts::from_total(total)).unwrap()
}

fn split(data: &[SyntheticInstance], s: Split) -> Vec<SyntheticInstance> {
    data.iter().filter(|d| d.split == s).cloned().collect()
}

fn entries(params: &Parameters, data: &[SyntheticInstance]) -> Vec<PoolEntry> {
    data.iter().map(|d| pool_entry(params, d, &oracle_mask(d)).unwrap()).collect()
}

fn trajectory(base: &Parameters, train: &[SyntheticInstance], pools: &AnnotationPools, config: &TrainConfig) -> Vec<Parameters> {
    let mut out = Vec::new();
    finetune_gradia_observed(base, train, pools, config, &mut |p| out.push(p.params.clone())).unwrap();
    out
}

#[test]
fn c4_with_unit_factors_follows_the_c1_trajectory() {
    let data = toy(120, 3);
    let base = init_model(&toy_model(), 1).unwrap();
    let all = entries(&base, &data);
    let pools = AnnotationPools {
        ua: all[0..10].to_vec(),
        uia: all[10..14].to_vec(),
        ria: all[14..17].to_vec(),
    };
    let train = split(&data, Split::Train);
    let c1 = TrainConfig {
        condition: Condition::C1,
        batch_size: 16,
        epochs: 10,
        seed: 5,
        ..TrainConfig::finetune()
    };
    let c4 = TrainConfig {
        condition: Condition::C4,
        factors: BalanceFactors::uniform(1.0).unwrap(),
        ..c1
    };
    let (a, b) = (trajectory(&base, &train, &pools, &c1), trajectory(&base, &train, &pools, &c4));
    assert!(a.len() >= 50);
    for (step, (x, y)) in a.iter().zip(&b).enumerate() {
        assert!(x.max_abs_diff(y) <= 1e-9, "step {step}");
    }
    // the attention terms are live under other factors
    let c4_live = TrainConfig {
        factors: BalanceFactors::uniform(0.5).unwrap(),
        ..c4
    };
    assert!(trajectory(&base, &train, &pools, &c4_live).last().unwrap().max_abs_diff(a.last().unwrap()) > 1e-6);
}

#[test]
fn conditions_only_use_their_own_attention_terms() {
    let data = toy(80, 4);
    let base = init_model(&toy_model(), 2).unwrap();
    let all = entries(&base, &data);
    let train = split(&data, Split::Train);
    let run = |pools: &AnnotationPools, condition: Condition| {
        let cfg = TrainConfig {
            condition,
            epochs: 2,
            batch_size: 16,
            ..TrainConfig::finetune()
        };
        finetune_gradia(&base, &train, pools, &cfg).unwrap().params
    };
    let ua_only = AnnotationPools {
        ua: all[0..6].to_vec(),
        ..AnnotationPools::default()
    };
    // C2 has no UA attention term, so a UA-only pool trains as under C1
    assert_eq!(run(&ua_only, Condition::C2), run(&ua_only, Condition::C1));
    assert!(run(&ua_only, Condition::C3).max_abs_diff(&run(&ua_only, Condition::C1)) > 1e-9);
}

#[test]
fn training_runs_are_reproducible() {
    let data = toy(80, 5);
    let train = split(&data, Split::Train);
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::baseline()
    };
    let a = train_baseline(&train, &toy_model(), &cfg).unwrap();
    let b = train_baseline(&train, &toy_model(), &cfg).unwrap();
    assert_eq!(a, b);
    let (m, pools) = build_validation_matrix(&a.params, &split(&data, Split::Validation), &OracleAnnotator::default()).unwrap();
    assert_eq!(m.total(), split(&data, Split::Validation).len());
    let ft = TrainConfig {
        epochs: 2,
        ..TrainConfig::finetune()
    };
    assert_eq!(
        finetune_gradia(&a.params, &train, &pools, &ft).unwrap(),
        finetune_gradia(&a.params, &train, &pools, &ft).unwrap()
    );
}

#[test]
fn evaluation_is_pure_and_self_consistent() {
    let data = toy(80, 6);
    let params = init_model(&toy_model(), 3).unwrap();
    let test = split(&data, Split::Test);
    let oracle = OracleAnnotator::default();
    let a = evaluate(&params, &test, &oracle, 0.5).unwrap();
    assert_eq!(a, evaluate(&params, &test, &oracle, 0.5).unwrap());
    assert_eq!(a.matrix.total(), test.len());
    assert_eq!(a.metrics, MetricsReport::from_matrix(&a.matrix, &a.ious).unwrap());
    assert_eq!(a.metrics.m1_accuracy, m1_accuracy(&a.matrix).unwrap());
    assert_eq!(a.metrics.m2_ra_performance, m2_ra_performance(&a.matrix).unwrap());
    assert_eq!(a.metrics.m4_attention_accuracy, m4_attention_accuracy(&a.matrix).unwrap());
}

#[test]
fn pool_targets_come_from_the_oracle_mask() {
    let data = toy(40, 7);
    let params = init_model(&toy_model(), 0).unwrap();
    let e = pool_entry(&params, &data[0], &oracle_mask(&data[0])).unwrap();
    let (u, v) = toy_model().feature_dims().unwrap();
    assert_eq!(e.target, mask_to_target_grid(&data[0].intrinsic_mask, u, v).unwrap());
}

fn few_shot_fixture() -> (Parameters, Vec<PoolEntry>, Vec<SyntheticInstance>) {
    let data = toy(200, 8);
    let base = init_model(&toy_model(), 4).unwrap();
    let pool = entries(&base, &split(&data, Split::Train));
    (base, pool, split(&data, Split::Test))
}

fn quick_few_shot() -> FewShotConfig {
    FewShotConfig {
        finetune: TrainConfig {
            epochs: 3,
            ..FewShotConfig::default().finetune
        },
        ..FewShotConfig::default()
    }
}

#[test]
fn zero_attention_weight_matches_the_baseline_arm() {
    let (base, pool, test) = few_shot_fixture();
    let scenario = FewShotScenario {
        shots_per_class: 2,
        num_seeds: 3,
    };
    let cfg = FewShotConfig {
        attention_weight: 0.0,
        ..quick_few_shot()
    };
    let r = few_shot_study(&base, &pool, &test, &scenario, &cfg).unwrap();
    assert_eq!(r.baseline.aucs, r.gradia.aucs);
    let sweep = sensitivity_sweep(&base, &pool, &test, &[0.0, 0.5], &scenario, &cfg).unwrap();
    assert_eq!(sweep.len(), 2);
    assert_eq!(sweep[0].aucs, r.baseline.aucs);
}

#[test]
fn insufficient_pools_are_data_errors() {
    let (base, pool, test) = few_shot_fixture();
    let scenario = FewShotScenario::new(50);
    let err = few_shot_study(&base, &pool[..20], &test, &scenario, &quick_few_shot()).unwrap_err();
    assert!(matches!(err, gradia_core::Error::Data(_)));
}
