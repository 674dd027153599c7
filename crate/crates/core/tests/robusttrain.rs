use proptest::prelude::*;
use vqa_anomaly::diffcore::{OptimConfig, OptimState, Tensor};
use vqa_anomaly::evalbench::accuracy;
use vqa_anomaly::robusttrain::*;
use vqa_anomaly::synthgen::*;
use vqa_anomaly::vqamodel::*;
use vqa_anomaly::{Error, Exec};

fn world() -> WorldSpec {
    WorldSpec { k: 4, ..WorldSpec::default() }
}

fn model(w: &WorldSpec, variant: AttentionVariant, heads: usize) -> Model {
    Model::init(ModelConfig::for_world(w, 8, heads, variant, 1)).unwrap()
}

fn small_cfg(method: Method, epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 32, method, seed: 9, ..TrainConfig::default() }
}

fn sources(w: &WorldSpec, n: usize) -> Vec<(Task, Vec<Sample>)> {
    [Task::T1, Task::T2, Task::T4]
        .into_iter()
        .map(|t| (t, gen_anomaly(w, t, Family::Train, n, 40 + t as u64, Exec::Sequential).unwrap()))
        .collect()
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let w = world();
    let m = model(&w, AttentionVariant::Context, 1);
    let data = gen_id(&w, 100, 1, Exec::Sequential).unwrap();
    let cfg = TrainConfig { optim: OptimConfig { lr: 0.0, ..OptimConfig::default() }, ..small_cfg(Method::Base, 3) };
    let (out, log) = train_base(m.clone(), &data, &data[..20], &cfg, Exec::Sequential).unwrap();
    assert_eq!(out, m);
    assert_eq!(log.rows.len(), 3);
}

#[test]
fn one_step_reduces_batch_loss() {
    let w = world();
    let m = model(&w, AttentionVariant::Pairwise, 2);
    let batch = gen_id(&w, 64, 2, Exec::Sequential).unwrap();
    let cfg = small_cfg(Method::Base, 1);
    let (before, _, grads) = step_gradients(&m, &batch, &[], &cfg, Exec::Sequential).unwrap();
    let mut params = m.tensors();
    OptimState::new(cfg.optim, &params).step(&mut params, &grads).unwrap();
    let mut m2 = m.clone();
    m2.set_tensors(params);
    let (after, _, _) = step_gradients(&m2, &batch, &[], &cfg, Exec::Sequential).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn default_config_reaches_accuracy_target() {
    let w = WorldSpec::default();
    let ex = Exec::Parallel;
    let train = gen_id(&w, 4000, 100, ex).unwrap();
    let val = gen_id(&w, 500, 101, ex).unwrap();
    let m = Model::init(ModelConfig::for_world(&w, 32, 1, AttentionVariant::Context, 0)).unwrap();
    let cfg = TrainConfig::default();
    assert!(cfg.epochs <= 50);
    let (m, log) = train_base(m, &train, &val, &cfg, ex).unwrap();
    let acc = accuracy(&m, &val, ex).unwrap();
    assert!(acc >= 0.95, "val accuracy {acc}");
    let best = log.rows.iter().filter_map(|r| r.val_accuracy).fold(0.0, f64::max);
    assert_eq!(acc, best);
}

#[test]
fn zero_lambda_matches_continued_base_training() {
    let w = world();
    let base = model(&w, AttentionVariant::Pairwise, 2);
    let id = gen_id(&w, 96, 3, Exec::Sequential).unwrap();
    let cfg = TrainConfig { lambda: 0.0, ..small_cfg(Method::Ra, 2) };
    let (a, _) = finetune(base.clone(), &id, None, &sources(&w, 20), &cfg, Exec::Sequential).unwrap();
    let (b, _) = continue_base(base, &id, &cfg, Exec::Sequential).unwrap();
    assert_eq!(a, b);
}

fn uniform_2x2_sample(w: &WorldSpec) -> (Model, Sample) {
    let mut c = ModelConfig::for_world(w, 4, 1, AttentionVariant::Pairwise, 0);
    c.k = 2;
    c.m = 2;
    let mut m = Model::init(c.clone()).unwrap();
    m.set_tensors(m.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect());
    let s = Sample {
        features: vec![vec![0.5; c.d]; 2],
        tokens: vec![1, 2],
        token_mask: vec![true, true],
        answer: Answer::Undefined,
        task: Task::T2,
        family: Family::Train,
        seed_index: 0,
        ground_truth: None,
    };
    (m, s)
}

#[test]
fn ra_value_for_uniform_two_by_two() {
    let w = world();
    let (m, s) = uniform_2x2_sample(&w);
    let want = -1e-5 * 4.0 * 0.75f64.ln();
    assert!((want - 1.1507e-5).abs() < 1e-9);
    let heads = &m.forward(std::slice::from_ref(&s), Exec::Sequential).unwrap()[0].heads;
    assert!(heads[0].probs.iter().all(|p| (p - 0.25).abs() < 1e-15));
    assert!((ra_penalty(heads, 1e-5) - want).abs() < 1e-15);
    let cfg = TrainConfig { lambda: 1e-5, ..small_cfg(Method::Ra, 1) };
    let (_, reg, _) = step_gradients(&m, &[], &[s], &cfg, Exec::Sequential).unwrap();
    assert!((reg - want).abs() < 1e-15);
}

#[test]
fn regularizer_values_match_forward_outputs() {
    let w = world();
    let m = model(&w, AttentionVariant::Pairwise, 2);
    let anom = gen_anomaly(&w, Task::T2, Family::Train, 40, 5, Exec::Sequential).unwrap();
    let outs = m.forward(&anom, Exec::Sequential).unwrap();
    let n = anom.len() as f64;

    let ra = outs.iter().map(|o| ra_penalty(&o.heads, 0.3)).sum::<f64>() / n;
    let cfg = TrainConfig { lambda: 0.3, ..small_cfg(Method::Ra, 1) };
    let (_, reg, _) = step_gradients(&m, &[], &anom, &cfg, Exec::Sequential).unwrap();
    assert!((reg - ra).abs() < 1e-12 * ra.abs().max(1.0));

    let var = |h: &HeadAttention| {
        let live: Vec<f64> = h.probs.iter().zip(&h.mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
        let mean = live.iter().sum::<f64>() / live.len() as f64;
        live.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / live.len() as f64
    };
    let rv = outs.iter().map(|o| o.heads.iter().map(var).sum::<f64>()).sum::<f64>() * 0.7 / n;
    let cfg = TrainConfig { lambda_var: 0.7, ..small_cfg(Method::RaVar, 1) };
    let (_, reg, _) = step_gradients(&m, &[], &anom, &cfg, Exec::Sequential).unwrap();
    assert!((reg - rv).abs() < 1e-12 * rv.abs().max(1e-3));

    let oe = outs
        .iter()
        .map(|o| {
            let mx = o.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + o.logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            -o.logits.iter().map(|v| v - lse).sum::<f64>() / o.logits.len() as f64
        })
        .sum::<f64>()
        / n;
    let cfg = small_cfg(Method::Oe, 1);
    let (_, reg, _) = step_gradients(&m, &[], &anom, &cfg, Exec::Sequential).unwrap();
    assert!((reg - oe).abs() < 1e-12 * oe);
}

#[test]
fn attention_regularizers_leave_answer_head_untouched() {
    let w = world();
    for variant in [AttentionVariant::Context, AttentionVariant::Pairwise] {
        let heads = if variant == AttentionVariant::Context { 1 } else { 2 };
        let m = model(&w, variant, heads);
        let anom = gen_anomaly(&w, Task::T1, Family::Train, 20, 6, Exec::Sequential).unwrap();
        for method in [Method::Ra, Method::RaVar] {
            let (_, _, g) = step_gradients(&m, &[], &anom, &small_cfg(method, 1), Exec::Sequential).unwrap();
            for name in ["out.b", "out.w", "fuse.w", "fuse.b"] {
                assert!(g.get(name).unwrap().data().iter().all(|&v| v == 0.0), "{name} {method:?}");
            }
            assert!(g.get("visual.w").unwrap().data().iter().any(|&v| v != 0.0));
            assert!(g.get("embed").unwrap().data().iter().any(|&v| v != 0.0));
        }
    }
}

#[test]
fn oe_flattens_outputs_on_training_anomalies() {
    let w = world();
    let ex = Exec::Parallel;
    let id = gen_id(&w, 600, 7, ex).unwrap();
    let (base, _) = train_base(model(&w, AttentionVariant::Context, 1), &id, &id[..100], &small_cfg(Method::Base, 8), ex).unwrap();
    let src = sources(&w, 200);
    let probe: Vec<Sample> = src.iter().flat_map(|(_, s)| s.iter().cloned()).collect();
    let before = mean_kl_uniform(&base, &probe, ex).unwrap();
    let (oe, _) = finetune(base, &id, None, &src, &small_cfg(Method::Oe, 3), ex).unwrap();
    let after = mean_kl_uniform(&oe, &probe, ex).unwrap();
    assert!(after <= 0.5 * before, "{before} -> {after}");
}

#[test]
fn training_is_deterministic_and_exec_independent() {
    let w = world();
    let id = gen_id(&w, 120, 8, Exec::Sequential).unwrap();
    let src = sources(&w, 30);
    let run = |ex| {
        let (b, lb) = train_base(model(&w, AttentionVariant::Pairwise, 2), &id, &id[..30], &small_cfg(Method::Base, 2), ex).unwrap();
        let (r, lr) = finetune(b.clone(), &id, Some(&id[..30]), &src, &small_cfg(Method::Ra, 2), ex).unwrap();
        (b, r, lb.deterministic_part(), lr.deterministic_part())
    };
    let a = run(Exec::Sequential);
    assert_eq!(a, run(Exec::Sequential));
    assert_eq!(a, run(Exec::Parallel));
}

#[test]
fn finetune_rejects_bad_inputs() {
    let w = world();
    let m = model(&w, AttentionVariant::Context, 1);
    let id = gen_id(&w, 40, 9, Exec::Sequential).unwrap();
    let src = sources(&w, 10);
    let ex = Exec::Sequential;
    assert!(matches!(finetune(m.clone(), &id, None, &src, &small_cfg(Method::Base, 1), ex), Err(Error::Config(_))));
    assert!(matches!(finetune(m.clone(), &id, None, &[], &small_cfg(Method::Ra, 1), ex), Err(Error::Data(_))));
    let eval = vec![(Task::T1, gen_anomaly(&w, Task::T1, Family::Eval, 5, 1, ex).unwrap())];
    assert!(matches!(finetune(m.clone(), &id, None, &eval, &small_cfg(Method::Ra, 1), ex), Err(Error::Data(_))));
    let as_anomaly = vec![(Task::T1, id.clone())];
    assert!(matches!(finetune(m.clone(), &id, None, &as_anomaly, &small_cfg(Method::Ra, 1), ex), Err(Error::Data(_))));
    let mut mixed = id.clone();
    mixed.extend(gen_anomaly(&w, Task::T5, Family::Eval, 2, 1, ex).unwrap());
    assert!(matches!(train_base(m.clone(), &mixed, &id, &small_cfg(Method::Base, 1), ex), Err(Error::Data(_))));
    let bad = TrainConfig { lambda: -1.0, ..small_cfg(Method::Ra, 1) };
    assert!(matches!(finetune(m.clone(), &id, None, &src, &bad, ex), Err(Error::Config(_))));
    let bad = TrainConfig { batch_size: 0, ..small_cfg(Method::Base, 1) };
    assert!(matches!(train_base(m, &id, &id, &bad, ex), Err(Error::Config(_))));
}

#[test]
fn source_counts_split_batches() {
    assert_eq!(source_counts(&[], 3, 64).unwrap(), vec![22, 21, 21]);
    assert_eq!(source_counts(&[2.0, 1.0, 1.0], 3, 64).unwrap(), vec![32, 16, 16]);
    assert_eq!(source_counts(&[], 1, 64).unwrap(), vec![64]);
    assert!(matches!(source_counts(&[1.0], 2, 64), Err(Error::Config(_))));
    assert!(matches!(source_counts(&[0.0, 0.0], 2, 64), Err(Error::Config(_))));
}

#[test]
fn uniform_attention_maximizes_ra_objective() {
    let r = verify_theorem1(2, 100, 1e-3, 0, Exec::Parallel).unwrap();
    assert!(r.max_deviation < 1e-3);
    assert!((r.optimum - 2.0 * 0.5f64.ln()).abs() < 1e-5);
    assert!((r.optimum + 1.386294).abs() < 1e-5);
    for k in [5, 36] {
        let r = verify_theorem1(k, 100, 1e-3, 1, Exec::Parallel).unwrap();
        assert!(r.max_deviation < 1e-3, "K={k}: {}", r.max_deviation);
        let kf = k as f64;
        assert!((r.optimum - kf * (1.0 - 1.0 / kf).ln()).abs() < 1e-9);
    }
    assert!(matches!(verify_theorem1(1, 10, 1e-3, 0, Exec::Sequential), Err(Error::Domain(_))));
    assert!(matches!(verify_theorem1(3, 10, 0.0, 0, Exec::Sequential), Err(Error::Domain(_))));
}

#[test]
fn method_names_round_trip() {
    for m in [Method::Base, Method::Oe, Method::Ra, Method::RaVar] {
        assert_eq!(Method::parse(m.name()), Some(m));
    }
    assert_eq!(Method::parse("ra-var"), Some(Method::RaVar));
    assert_eq!(Method::parse("ra-max"), None);
}

#[test]
fn train_log_tsv_has_one_row_per_epoch() {
    let log = TrainLog {
        rows: (0..3)
            .map(|e| EpochRow { epoch: e, task_loss: 1.0, regularizer: 0.5, val_accuracy: Some(0.9), wall_secs: 0.1 })
            .collect(),
    };
    let tsv = log.to_tsv();
    assert_eq!(tsv.lines().count(), 4);
    assert!(tsv.starts_with("epoch\ttask_loss\tregularizer\tval_accuracy\twall_secs\n0\t1.00000000\t0.50000000\t0.900000\t"));
}

proptest! {
    #[test]
    fn uniform_maximizes_ra_objective(raw in prop::collection::vec(0.01f64..1.0, 2..40)) {
        let s: f64 = raw.iter().sum();
        let x: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let k = x.len() as f64;
        let dist = x.iter().map(|v| (v - 1.0 / k).abs()).fold(0.0, f64::max);
        prop_assume!(dist > 1e-6);
        prop_assert!(ra_objective(&x) < ra_objective(&vec![1.0 / k; x.len()]));
    }
}
