//! Acceptance report: one PASS/FAIL line per primary criterion, then the
//! benchmark invariants.
//!
//! Runs as a plain binary (`harness = false`). Positional arguments select
//! checks by substring. The process exits nonzero on a FAIL only when
//! `GRADIA_ACCEPTANCE_STRICT=1`, so the report can sit in the default test
//! run while still recording failures.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::{toy_data, toy_model, toy_params, toy_service};
use gradia_core::attention::{grad_cam, grad_cam_weights, mask_to_target_grid, BinaryMask, MaskProvenance};
use gradia_core::dataset::{InstanceId, Split};
use gradia_core::grid::Image;
use gradia_core::loss::{
    objective_gradient, prediction_loss, prediction_loss_grad, sample_attention_loss, BalanceFactors, Condition,
    Divergence, ObjectiveSpec, QuadrantBatch, Sample,
};
use gradia_core::model::{
    forward, grad_wrt_params, init_model, predict, Adjoint, ConvSpec, ModelConfig, Parameters, Pool,
};
use gradia_core::reasonability::{
    build_matrix, iou, m1_accuracy, m2_ra_performance, majority_vote, Answer, Quadrant, ReasonabilityMatrix,
    ReasonabilityRecord, Verdict,
};
use gradia_core::synthetic::oracle_mask;
use gradia_core::trainer::{finetune_gradia_observed, pool_entry, roc_auc, spearman, AnnotationPools, TrainConfig};
use gradia_workbench::commands;
use gradia_workbench::config::WorkbenchConfig;
use gradia_workbench::service::store::{replay, Answers, AnnotationStore, LOG_FILE};
use gradia_workbench::service::{router, Service};
use gradia_workbench::study::{condition_study, few_shot_report, prepare_few_shot, ConditionStudy, FewShotReport};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Report {
    filters: Vec<String>,
    failures: usize,
    checks: usize,
}

impl Report {
    fn selected(&self, name: &str) -> bool {
        self.filters.is_empty() || self.filters.iter().any(|f| name.contains(f.as_str()))
    }

    fn check(&mut self, kind: &str, name: &str, f: impl FnOnce() -> Outcome) {
        if !self.selected(name) {
            return;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        self.checks += 1;
        if !result.pass {
            self.failures += 1;
        }
        println!(
            "{} [{kind}] {name} ({:.1}s): {}",
            if result.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            result.detail
        );
    }
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut r = Report {
        filters,
        failures: 0,
        checks: 0,
    };
    println!("acceptance report");
    r.check("PRIMARY", "metric-fidelity", metric_fidelity);
    r.check("PRIMARY", "grad-cam-oracle", grad_cam_oracle);
    r.check("PRIMARY", "gradient-checks", gradient_checks);
    r.check("PRIMARY", "reduction-identity", reduction_identity);
    r.check("PRIMARY", "iou-auc-oracles", iou_auc_oracles);
    r.check("PRIMARY", "service-contract", service_contract);

    let few_shot_names = ["few-shot", "few-shot-gains"];
    let few = if few_shot_names.iter().any(|n| r.selected(n)) {
        let t = Instant::now();
        let config = WorkbenchConfig::default();
        let report = prepare_few_shot(&config).and_then(|b| few_shot_report(&config, &b, 1));
        Some((report, t.elapsed().as_secs_f64()))
    } else {
        None
    };
    if let Some((report, secs)) = &few {
        r.check("PRIMARY", "few-shot", || match report {
            Ok(rep) => few_shot(rep, *secs),
            Err(e) => outcome(false, format!("study failed: {e}")),
        });
    }

    let study_names = ["de-biasing", "learnability", "validation-ua", "no-collapse", "matrix-migration"];
    let studies = if study_names.iter().any(|n| r.selected(n)) {
        let config = WorkbenchConfig::default();
        let mut out = Vec::new();
        for seed in 0..5 {
            match condition_study(&config, seed, &Condition::ALL) {
                Ok(s) => out.push(s),
                Err(e) => println!("study seed {seed} failed: {e}"),
            }
        }
        Some(out)
    } else {
        None
    };
    if let Some(studies) = &studies {
        r.check("PRIMARY", "de-biasing", || de_biasing(studies));
        println!("invariants");
        r.check("INVARIANT", "learnability", || learnability(studies));
        r.check("INVARIANT", "validation-ua", || validation_ua(studies));
        r.check("INVARIANT", "matrix-migration", || matrix_migration(studies));
        r.check("INVARIANT", "no-collapse", || no_collapse(studies));
    } else {
        println!("invariants");
    }
    if let Some((report, _)) = &few {
        r.check("INVARIANT", "few-shot-gains", || match report {
            Ok(rep) => few_shot_gains(rep),
            Err(e) => outcome(false, format!("study failed: {e}")),
        });
    }
    r.check("INVARIANT", "pipeline-time", pipeline_time);

    println!("{} checks, {} failed", r.checks, r.failures);
    let strict = std::env::var("GRADIA_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && r.failures > 0 {
        std::process::exit(1);
    }
}

fn pct(v: f64) -> f64 {
    100.0 * v
}

fn metric_fidelity() -> Outcome {
    let cases = [
        ("first C1", [306, 310, 33, 101], 82.13, 40.80),
        ("first C2", [456, 163, 87, 44], 82.53, 60.80),
        ("first C3", [497, 117, 99, 37], 81.86, 66.27),
        ("first C4", [518, 104, 94, 34], 82.93, 69.07),
        ("second C1", [147, 462, 25, 116], 81.20, 19.60),
        ("second C3", [515, 108, 97, 30], 82.93, 68.67),
    ];
    let mut mismatches = Vec::new();
    for (name, [ra, ua, ria, uia], m1_pub, m2_pub) in cases {
        let m = ReasonabilityMatrix::from_counts(ra, ua, ria, uia);
        assert_eq!(m.total(), 750);
        let (m1, m2) = (pct(m1_accuracy(&m).unwrap()), pct(m2_ra_performance(&m).unwrap()));
        for (metric, got, want) in [("M1", m1, m1_pub), ("M2", m2, m2_pub)] {
            if (got - want).abs() > 0.01 + 1e-9 {
                mismatches.push(format!("{name} {metric} computed {got:.4} vs reference {want:.2}"));
            }
        }
    }
    if mismatches.is_empty() {
        outcome(true, "all 12 cells within 0.01pp")
    } else {
        outcome(false, format!("{} of 12 cells differ: {}", mismatches.len(), mismatches.join("; ")))
    }
}

fn random_image(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Image {
    let n = config.input_channels * config.input_height * config.input_width;
    let data = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    Image::from_vec(config.input_channels, config.input_height, config.input_width, data).unwrap()
}

fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let size = rng.random_range(6..=12);
    let layers = rng.random_range(1..=2);
    let conv_stack = (0..layers)
        .map(|l| {
            let pool = if l == 0 || rng.random_bool(0.5) { Pool::Max2 } else { Pool::None };
            ConvSpec::new(rng.random_range(1..=4), 3, 1, pool)
        })
        .collect();
    ModelConfig {
        input_height: size,
        input_width: size,
        input_channels: rng.random_range(1..=2),
        conv_stack,
        num_classes: rng.random_range(2..=3),
    }
}

fn grad_cam_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (mut worst_map, mut worst_weight) = (0.0f64, 0.0f64);
    for t in 0..100u64 {
        let config = random_config(&mut rng);
        let params = init_model(&config, t).unwrap();
        let trace = forward(&params, &random_image(&config, &mut rng)).unwrap();
        let k_maps = config.feature_maps();
        let (u, v) = trace.feature_maps.dims();
        let fm = trace.feature_maps.as_slice();
        for c in 0..config.num_classes {
            let w = &params.head_weight()[c * k_maps..(c + 1) * k_maps];
            // dY/dA[k,i,j] of the pooled affine head, averaged over the grid
            let mut alpha = vec![0.0; k_maps];
            for (k, a) in alpha.iter_mut().enumerate() {
                for _i in 0..u {
                    for _j in 0..v {
                        *a += w[k] / (u * v) as f64;
                    }
                }
                *a /= (u * v) as f64;
            }
            let mut naive = vec![0.0; u * v];
            for i in 0..u {
                for j in 0..v {
                    let mut s = 0.0;
                    for (k, a) in alpha.iter().enumerate() {
                        s += a * fm[(k * u + i) * v + j];
                    }
                    naive[i * v + j] = s.max(0.0);
                }
            }
            let got = grad_cam(&params, &trace, c).unwrap();
            for (g, n) in got.as_slice().iter().zip(&naive) {
                worst_map = worst_map.max((g - n).abs());
            }
            for (k, wk) in grad_cam_weights(&params, &trace, c).unwrap().iter().enumerate() {
                worst_weight = worst_weight.max((wk - w[k] / (u * v) as f64).abs());
            }
        }
    }
    outcome(
        worst_map <= 1e-10 && worst_weight <= 1e-12,
        format!("100 traces; max map error {worst_map:.2e} (≤1e-10), max weight error {worst_weight:.2e} (≤1e-12)"),
    )
}

const EPS: f64 = 1e-6;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn central_diff(params: &Parameters, i: usize, f: impl Fn(&Parameters) -> f64) -> f64 {
    let mut p = params.clone();
    let x = p.get_flat(i);
    p.set_flat(i, x + EPS);
    let up = f(&p);
    p.set_flat(i, x - EPS);
    let down = f(&p);
    (up - down) / (2.0 * EPS)
}

fn gradient_checks() -> Outcome {
    let config = ModelConfig::tiny();
    assert_eq!((config.feature_maps(), config.feature_dims().unwrap()), (2, (2, 2)));
    let mut first: f64 = 0.0;
    for seed in 0..4u64 {
        let params = init_model(&config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
        let image = random_image(&config, &mut rng);
        let label = (seed % 2) as usize;
        let loss = |p: &Parameters| prediction_loss(&forward(p, &image).unwrap().logits, label).unwrap();
        let trace = forward(&params, &image).unwrap();
        let (_, dlogits) = prediction_loss_grad(&trace.logits, label).unwrap();
        let grads = grad_wrt_params(&params, &trace, &Adjoint::from_logits(dlogits)).unwrap();
        for i in 0..params.len() {
            first = first.max(rel_err(grads.get_flat(i), central_diff(&params, i, loss)));
        }
    }
    let mut mask = BinaryMask::empty(8, 8, MaskProvenance::Oracle);
    for y in 0..5 {
        for x in 2..7 {
            mask.set(y, x, true);
        }
    }
    let target = mask_to_target_grid(&mask, 2, 2).unwrap();
    let mut second: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..8u64 {
        let params = init_model(&config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let image = random_image(&config, &mut rng);
        let sample = Sample {
            image: &image,
            label: 0,
            target: Some(&target),
        };
        for divergence in [Divergence::Squared, Divergence::Absolute] {
            let spec = ObjectiveSpec {
                factors: BalanceFactors::uniform(0.0).unwrap(),
                condition: Condition::C4,
                divergence,
                higher_order: true,
            };
            let loss = |p: &Parameters| sample_attention_loss(p, &sample, divergence).unwrap();
            if loss(&params) == 0.0 {
                continue;
            }
            let g = objective_gradient(
                &params,
                &[],
                &QuadrantBatch::new(Quadrant::UA, vec![sample]),
                &QuadrantBatch::empty(Quadrant::UIA),
                &QuadrantBatch::empty(Quadrant::RIA),
                &spec,
            )
            .unwrap();
            for i in 0..params.len() {
                second = second.max(rel_err(g.gradients.get_flat(i), central_diff(&params, i, loss)));
            }
            checked += 1;
        }
    }
    outcome(
        first <= 1e-4 && second <= 1e-3 && checked >= 4,
        format!(
            "K=2, u=v=2: cross-entropy max rel err {first:.2e} (≤1e-4); attention loss through the weight path max rel err {second:.2e} over {checked} cases (≤1e-3)"
        ),
    )
}

fn reduction_identity() -> Outcome {
    let config = toy_model();
    let data = toy_data(120, 3);
    let base = init_model(&config, 1).unwrap();
    let entries: Vec<_> = data.iter().map(|d| pool_entry(&base, d, &oracle_mask(d)).unwrap()).collect();
    let pools = AnnotationPools {
        ua: entries[0..10].to_vec(),
        uia: entries[10..14].to_vec(),
        ria: entries[14..17].to_vec(),
    };
    let train: Vec<_> = data.iter().filter(|d| d.split == Split::Train).cloned().collect();
    let c1 = TrainConfig {
        condition: Condition::C1,
        batch_size: 16,
        epochs: 10,
        seed: 7,
        ..TrainConfig::finetune()
    };
    let c4 = TrainConfig {
        condition: Condition::C4,
        factors: BalanceFactors::uniform(1.0).unwrap(),
        ..c1
    };
    let run = |cfg: &TrainConfig| {
        let mut out = Vec::new();
        finetune_gradia_observed(&base, &train, &pools, cfg, &mut |p| out.push(p.params.clone())).unwrap();
        out
    };
    let (a, b) = (run(&c1), run(&c4));
    let worst = a.iter().zip(&b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max);
    let steps = a.len().min(b.len());
    outcome(
        a.len() == b.len() && steps >= 50 && worst <= 1e-9,
        format!("{steps} steps, max per-parameter difference {worst:.2e} (≤1e-9)"),
    )
}

fn iou_auc_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut iou_mismatch = 0;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let (pa, pb) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let bits_a: Vec<bool> = (0..h * w).map(|_| rng.random_bool(pa)).collect();
        let bits_b: Vec<bool> = (0..h * w).map(|_| rng.random_bool(pb)).collect();
        let a = BinaryMask::from_bits(h, w, bits_a.clone(), MaskProvenance::Human).unwrap();
        let b = BinaryMask::from_bits(h, w, bits_b.clone(), MaskProvenance::Human).unwrap();
        let (mut inter, mut union) = (0usize, 0usize);
        for (x, y) in bits_a.iter().zip(&bits_b) {
            inter += usize::from(*x && *y);
            union += usize::from(*x || *y);
        }
        let naive = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        if iou(&a, &b).unwrap() != naive {
            iou_mismatch += 1;
        }
    }
    let mut worst_auc: f64 = 0.0;
    let mut auc_cases = 0;
    while auc_cases < 1000 {
        let n = rng.random_range(2..=60);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            continue;
        }
        let levels = rng.random_range(2..=20);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..levels)) / f64::from(levels)).collect();
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    wins += match scores[i].total_cmp(&scores[j]) {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        worst_auc = worst_auc.max((roc_auc(&scores, &labels).unwrap() - wins / pairs).abs());
        auc_cases += 1;
    }
    outcome(
        iou_mismatch == 0 && worst_auc <= 1e-12,
        format!("IoU: {iou_mismatch} of 1000 mask pairs differ from the bit count (exact); AUC: max error {worst_auc:.2e} over 1000 tied score vectors (≤1e-12)"),
    )
}

#[derive(Debug, Clone)]
enum Op {
    Verdict { inst: usize, who: usize, q1: bool, q2: bool },
    Mask { inst: usize, who: usize, seed: u64 },
    Likert { inst: usize, who: usize, rating: u8 },
}

fn op_strategy(instances: usize) -> impl Strategy<Value = Op> {
    let inst = 0..instances;
    let who = 0..4usize;
    prop_oneof![
        4 => (inst.clone(), who.clone(), any::<bool>(), any::<bool>()).prop_map(|(inst, who, q1, q2)| Op::Verdict { inst, who, q1, q2 }),
        1 => (inst.clone(), who.clone(), any::<u64>()).prop_map(|(inst, who, seed)| Op::Mask { inst, who, seed }),
        1 => (inst, who, 0u8..8).prop_map(|(inst, who, rating)| Op::Likert { inst, who, rating }),
    ]
}

fn random_mask(seed: u64, h: usize, w: usize) -> BinaryMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rng.random_range(0.0..1.0);
    let bits = (0..h * w).map(|_| rng.random_bool(p)).collect();
    BinaryMask::from_bits(h, w, bits, MaskProvenance::Human).unwrap()
}

const ANNOTATORS: [&str; 4] = ["ann-a", "ann-b", "ann-c", "anonymous"];

fn answers(q1: bool, q2: bool) -> Answers {
    Answers {
        q1_sufficient: Answer::from_bool(q1),
        q2_contextual: Answer::from_bool(q2),
    }
}

/// `build_matrix` over a reference fold of the accepted verdicts.
fn reference_matrix(service: &Service, latest: &BTreeMap<(InstanceId, usize), (bool, bool)>) -> ReasonabilityMatrix {
    let params = &service.active().params;
    let mut per_instance: BTreeMap<InstanceId, Vec<Verdict>> = BTreeMap::new();
    for (&(id, _), &(q1, q2)) in latest {
        per_instance
            .entry(id)
            .or_default()
            .push(Verdict::new(Answer::from_bool(q1), Answer::from_bool(q2)));
    }
    let records: Vec<ReasonabilityRecord> = per_instance
        .into_iter()
        .map(|(id, vs)| {
            let d = service.instances().iter().find(|d| d.id == id).unwrap();
            ReasonabilityRecord {
                instance_id: id,
                prediction_correct: predict(params, &d.image).unwrap().0 == d.label,
                verdict: majority_vote(&vs).unwrap(),
            }
        })
        .collect();
    build_matrix(&records).unwrap()
}

fn matrix_property(runner: &mut TestRunner) -> Result<usize, String> {
    let data = toy_data(40, 21);
    let n = data.len();
    let cases = std::cell::Cell::new(0);
    runner
        .run(&proptest::collection::vec(op_strategy(n), 500), |ops| {
            let service = toy_service(data.clone(), toy_params(3), None);
            let mut latest = BTreeMap::new();
            for (step, op) in ops.iter().enumerate() {
                match *op {
                    Op::Verdict { inst, who, q1, q2 } => {
                        let id = data[inst].id;
                        service.post_verdict(id, ANNOTATORS[who], answers(q1, q2)).unwrap();
                        latest.insert((id, who), (q1, q2));
                    }
                    Op::Mask { inst, who, seed } => {
                        service
                            .post_mask(data[inst].id, ANNOTATORS[who], random_mask(seed, 12, 12).to_rle())
                            .unwrap();
                    }
                    Op::Likert { inst, who, rating } => {
                        let r = service.post_likert(data[inst].id, ANNOTATORS[who], rating);
                        prop_assert_eq!(r.is_ok(), (1..=5).contains(&rating));
                    }
                }
                if step % 25 == 24 || step + 1 == ops.len() {
                    let live = service.get_matrix().map_err(|e| TestCaseError::fail(e.to_string()))?;
                    prop_assert_eq!(live.matrix, reference_matrix(&service, &latest), "after op {}", step);
                }
            }
            cases.set(cases.get() + 1);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(cases.get())
}

fn service_contract() -> Outcome {
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
    let mut notes = Vec::new();
    let mut pass = true;

    // replay: random HTTP writes, then the log folded from empty
    let dir = tempfile::tempdir().unwrap();
    let data = toy_data(40, 22);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (replay_ok, records) = rt.block_on(async {
        let service = toy_service(data.clone(), toy_params(0), Some(dir.path().to_path_buf()));
        let app = router(service.clone());
        for _ in 0..600 {
            let d = &data[rng.random_range(0..data.len())];
            let who = Some(ANNOTATORS[rng.random_range(0..4)]);
            let uri = format!("/api/instances/{}", d.id);
            match rng.random_range(0..3) {
                0 => common::post(&app, &format!("{uri}/verdict"), common::verdict_body(rng.random_bool(0.5), rng.random_bool(0.5)), who).await,
                1 => common::post(&app, &format!("{uri}/mask"), json!({"mask_rle": random_mask(rng.random(), 12, 12).to_rle()}), who).await,
                _ => common::post(&app, &format!("{uri}/likert"), json!({"rating": rng.random_range(0..7)}), who).await,
            };
        }
        let live = service.store_state();
        let replayed = replay(&dir.path().join(LOG_FILE)).unwrap().canonical_bytes();
        let reopened = AnnotationStore::open(dir.path()).unwrap().state().canonical_bytes();
        (replayed == live.canonical_bytes() && reopened == live.canonical_bytes(), live.records)
    });
    pass &= replay_ok;
    notes.push(format!(
        "replay of {records} logged records {} the live state byte for byte",
        if replay_ok { "reproduces" } else { "does NOT reproduce" }
    ));

    // RLE through POST then GET
    let data = toy_data(30, 23);
    let (rle_ok, rle_total) = rt.block_on(async {
        let app = router(toy_service(data.clone(), toy_params(0), None));
        let mut ok = 0;
        for i in 0..300u64 {
            let d = &data[(i as usize) % data.len()];
            let mask = random_mask(1000 + i, 12, 12);
            let rle = mask.to_rle();
            let (s, _) = common::post(&app, &format!("/api/instances/{}/mask", d.id), json!({"mask_rle": rle}), Some("rle")).await;
            let (_, detail) = common::get(&app, &format!("/api/instances/{}", d.id)).await;
            let back: Vec<u32> = serde_json::from_value(detail["annotations"][0]["mask_rle"].clone()).unwrap();
            if s.is_success() && back == rle && BinaryMask::from_rle(&back, MaskProvenance::Human).unwrap() == mask {
                ok += 1;
            }
        }
        (ok, 300)
    });
    pass &= rle_ok == rle_total;
    notes.push(format!("{rle_ok}/{rle_total} masks round-trip bit-exactly through POST/GET"));

    let mut runner = TestRunner::new(PropConfig {
        cases: 24,
        failure_persistence: None,
        ..PropConfig::default()
    });
    match matrix_property(&mut runner) {
        Ok(cases) => notes.push(format!("get_matrix equals build_matrix over {cases} random 500-operation sequences")),
        Err(e) => {
            pass = false;
            notes.push(format!("get_matrix diverged: {e}"));
        }
    }
    outcome(pass, notes.join("; "))
}

fn few_shot(rep: &FewShotReport, secs: f64) -> Outcome {
    let by_shots = |s: usize| rep.results.iter().find(|r| r.scenario.shots_per_class == s);
    let (Some(one), Some(five), Some(fifty)) = (by_shots(1), by_shots(5), by_shots(50)) else {
        return outcome(false, "shot counts 1, 5 and 50 are not all configured");
    };
    let wins_ok = one.wins() >= 8 && five.wins() >= 8;
    let trend_ok = one.improvement() >= fifty.improvement();
    let stds: Vec<f64> = rep.sweep.iter().map(|a| a.std).collect();
    let rho = spearman(&rep.sweep_weights, &stds).unwrap_or(f64::NAN);
    let nonzero: Vec<_> = rep.sweep_weights.iter().zip(&rep.sweep).filter(|(w, _)| **w > 0.0).map(|(_, a)| a).collect();
    let mut flat = true;
    for a in &nonzero {
        for b in &nonzero {
            flat &= (a.mean - b.mean).abs() <= 2.0 * a.std.max(b.std);
        }
    }
    let time_ok = secs <= 30.0 * 60.0;
    let gains: Vec<String> = rep
        .results
        .iter()
        .map(|r| format!("{}-shot {:+.4} ({}/{} wins)", r.scenario.shots_per_class, r.improvement(), r.wins(), r.scenario.num_seeds))
        .collect();
    let sweep: Vec<String> = rep
        .sweep_weights
        .iter()
        .zip(&rep.sweep)
        .map(|(w, a)| format!("w={w}: {:.4}±{:.4}", a.mean, a.std))
        .collect();
    outcome(
        wins_ok && trend_ok && rho <= 0.0 && flat && time_ok,
        format!(
            "{}; gain(1) ≥ gain(50): {trend_ok}; sweep {} with std Spearman ρ = {rho:.3} (≤0), nonzero means within 2 std: {flat}; {:.0}s (≤1800s)",
            gains.join(", "),
            sweep.join(", "),
            secs
        ),
    )
}

fn few_shot_gains(rep: &FewShotReport) -> Outcome {
    let gains: Vec<(usize, f64)> = rep.results.iter().map(|r| (r.scenario.shots_per_class, r.improvement())).collect();
    let bad: Vec<String> = gains.iter().filter(|(_, g)| *g < 0.0).map(|(s, g)| format!("{s}-shot {g:+.4}")).collect();
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            format!("mean gain ≥ 0 at every shot count {:?}", gains.iter().map(|g| g.0).collect::<Vec<_>>())
        } else {
            format!("negative mean gain at {}", bad.join(", "))
        },
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn de_biasing(studies: &[ConditionStudy]) -> Outcome {
    if studies.len() < 5 {
        return outcome(false, format!("only {} of 5 seeds completed", studies.len()));
    }
    let (mut d_iou, mut d_m4, mut drop_m1, mut worst_secs) = (Vec::new(), Vec::new(), Vec::new(), 0.0f64);
    let mut per_seed = Vec::new();
    for s in studies {
        let (c1, c4) = (s.report(Condition::C1).unwrap(), s.report(Condition::C4).unwrap());
        let (a, b) = (&c1.metrics_after, &c4.metrics_after);
        d_iou.push(b.m3_mean_iou - a.m3_mean_iou);
        d_m4.push(b.m4_attention_accuracy - a.m4_attention_accuracy);
        drop_m1.push(a.m1_accuracy - b.m1_accuracy);
        let secs = s.baseline_secs + c1.wall_time_secs.unwrap_or(0.0) + c4.wall_time_secs.unwrap_or(0.0);
        worst_secs = worst_secs.max(secs);
        per_seed.push(format!(
            "s{}: IoU {:.3}→{:.3} M4 {:.1}→{:.1} M1 {:.1}→{:.1}",
            s.seed,
            a.m3_mean_iou,
            b.m3_mean_iou,
            pct(a.m4_attention_accuracy),
            pct(b.m4_attention_accuracy),
            pct(a.m1_accuracy),
            pct(b.m1_accuracy)
        ));
    }
    let (iou_gain, m4_gain, m1_drop) = (mean(&d_iou), mean(&d_m4), median(drop_m1));
    let checks = [
        ("(a) IoU", iou_gain >= 0.05),
        ("(b) M4", m4_gain >= 0.10),
        ("(c) M1", m1_drop <= 0.02),
        ("time", worst_secs <= 600.0),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        failed.is_empty(),
        format!(
            "C4 vs C1 over 5 seeds: mean IoU gain {iou_gain:+.4} (≥+0.05), mean M4 gain {:+.2}pp (≥+10), median M1 drop {:.2}pp (≤2), slowest seed {worst_secs:.0}s (≤600){}; {}",
            pct(m4_gain),
            pct(m1_drop),
            if failed.is_empty() { String::new() } else { format!("; unmet: {}", failed.join(", ")) },
            per_seed.join("; ")
        ),
    )
}

fn learnability(studies: &[ConditionStudy]) -> Outcome {
    let train: Vec<f64> = studies.iter().map(|s| s.baseline_train.metrics.m1_accuracy).collect();
    let test: Vec<f64> = studies
        .iter()
        .map(|s| s.reports[0].metrics_before.m1_accuracy)
        .collect();
    let all_high = train.iter().all(|&a| a >= 0.95);
    let gap = mean(&test) < mean(&train);
    outcome(
        all_high && gap && !studies.is_empty(),
        format!(
            "base train accuracy per seed {:?}% (≥95); mean test {:.2}% vs mean train {:.2}% (strictly lower)",
            train.iter().map(|a| (pct(*a) * 100.0).round() / 100.0).collect::<Vec<_>>(),
            pct(mean(&test)),
            pct(mean(&train))
        ),
    )
}

fn validation_ua(studies: &[ConditionStudy]) -> Outcome {
    let ua: Vec<usize> = studies.iter().map(|s| s.validation_counts[1]).collect();
    outcome(
        !ua.is_empty() && ua.iter().all(|&n| n > 0),
        format!("validation UA counts per seed {ua:?} (each > 0)"),
    )
}

fn matrix_migration(studies: &[ConditionStudy]) -> Outcome {
    let mut ra = Vec::new();
    let mut unreasonable = Vec::new();
    for c in Condition::ALL {
        let counts: Vec<[usize; 4]> = studies.iter().map(|s| s.report(c).unwrap().matrix_after.counts()).collect();
        ra.push(mean(&counts.iter().map(|m| m[0] as f64).collect::<Vec<_>>()));
        unreasonable.push(mean(&counts.iter().map(|m| (m[1] + m[3]) as f64).collect::<Vec<_>>()));
    }
    let ra_ok = ra.windows(2).all(|w| w[1] >= w[0]);
    let un_ok = unreasonable.windows(2).all(|w| w[1] <= w[0]);
    outcome(
        ra_ok && un_ok && !studies.is_empty(),
        format!("mean RA over C1..C4 {ra:?} (non-decreasing: {ra_ok}); mean UA+UIA {unreasonable:?} (non-increasing: {un_ok})"),
    )
}

fn no_collapse(studies: &[ConditionStudy]) -> Outcome {
    let config = WorkbenchConfig::default();
    let mut drops: Vec<(u64, f64)> = studies
        .iter()
        .map(|s| {
            let r = s.report(Condition::C4).unwrap();
            (s.seed, r.metrics_after.m1_accuracy - r.metrics_before.m1_accuracy)
        })
        .collect();
    for seed in 5..10 {
        match condition_study(&config, seed, &[Condition::C4]) {
            Ok(s) => {
                let r = &s.reports[0];
                drops.push((seed, r.metrics_after.m1_accuracy - r.metrics_before.m1_accuracy));
            }
            Err(e) => return outcome(false, format!("seed {seed} failed: {e}")),
        }
    }
    let collapsed = drops.iter().filter(|(_, d)| *d < -0.02).count();
    outcome(
        collapsed * 10 < drops.len(),
        format!(
            "C4 changes test M1 by more than −2pp in {collapsed} of {} seeds (< 1/10); changes {:?}pp",
            drops.len(),
            drops.iter().map(|(_, d)| (pct(*d) * 100.0).round() / 100.0).collect::<Vec<_>>()
        ),
    )
}

fn pipeline_time() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let config = WorkbenchConfig::default();
    let t = Instant::now();
    let steps: [(&str, &dyn Fn() -> gradia_workbench::Result<String>); 5] = [
        ("gen-data", &|| commands::gen_data(&config, out)),
        ("train", &|| commands::train(&config, out)),
        ("matrix", &|| commands::matrix(&config, out)),
        ("finetune", &|| commands::finetune(&config, out)),
        ("evaluate", &|| commands::evaluate_runs(&config, out)),
    ];
    let mut timings = Vec::new();
    for (name, step) in steps {
        let s = Instant::now();
        if let Err(e) = step() {
            return outcome(false, format!("{name} failed: {e}"));
        }
        timings.push(format!("{name} {:.0}s", s.elapsed().as_secs_f64()));
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        secs < 600.0,
        format!("default gen-data→train→matrix→finetune C4→evaluate in {secs:.0}s (<600s): {}", timings.join(", ")),
    )
}
