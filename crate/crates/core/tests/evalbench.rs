use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqa_anomaly::detect::DEFAULT_T_GRID;
use vqa_anomaly::evalbench::*;
use vqa_anomaly::synthgen::*;
use vqa_anomaly::vqamodel::*;
use vqa_anomaly::{Error, Exec};

fn pairwise_auroc(id: &[f64], anom: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in id {
        for &b in anom {
            wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
        }
    }
    wins / (id.len() * anom.len()) as f64
}

#[test]
fn auroc_extremes() {
    assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2, 0.3]).unwrap(), 1.0);
    assert_eq!(auroc(&[0.1, 0.2], &[0.8, 0.9]).unwrap(), 0.0);
    assert_eq!(auroc(&[0.5; 4], &[0.5; 7]).unwrap(), 0.5);
    assert_eq!(auroc(&[0.3, 0.7], &[0.5]).unwrap(), 0.5);
    assert!(matches!(auroc(&[], &[0.5]), Err(Error::Domain(_))));
    assert!(matches!(auroc(&[0.5], &[]), Err(Error::Domain(_))));
    assert!(matches!(auroc(&[f64::NAN], &[0.5]), Err(Error::Domain(_))));
}

#[test]
fn auroc_coin_flip() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let id: Vec<f64> = (0..2000).map(|_| rng.random()).collect();
    let an: Vec<f64> = (0..2000).map(|_| rng.random()).collect();
    let a = auroc(&id, &an).unwrap();
    // sd of AUROC under the null is about sqrt((n1+n2+1)/(12 n1 n2)) ≈ 0.0065
    assert!((a - 0.5).abs() < 0.03, "{a}");
}

#[test]
fn argmax_lowest_on_ties() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    assert_eq!(argmax(&[0.0, 0.0]), 0);
}

fn small_world() -> WorldSpec {
    WorldSpec { k: 4, ..WorldSpec::default() }
}

fn small_model(world: &WorldSpec) -> Model {
    Model::init(ModelConfig::for_world(world, 8, 1, AttentionVariant::Context, 5)).unwrap()
}

#[test]
fn accuracy_matches_manual_count() {
    let w = small_world();
    let m = small_model(&w);
    let data = gen_id(&w, 60, 1, Exec::Sequential).unwrap();
    let outs = m.forward(&data, Exec::Sequential).unwrap();
    let manual = outs
        .iter()
        .zip(&data)
        .filter(|(o, s)| {
            let best = o.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let first = o.logits.iter().position(|&v| v == best).unwrap();
            s.answer == Answer::Id(first)
        })
        .count() as f64
        / 60.0;
    assert_eq!(accuracy(&m, &data, Exec::Sequential).unwrap(), manual);
    let anom = gen_anomaly(&w, Task::T2, Family::Eval, 3, 1, Exec::Sequential).unwrap();
    assert!(matches!(accuracy(&m, &anom, Exec::Sequential), Err(Error::Data(_))));
    assert!(matches!(accuracy(&m, &[], Exec::Sequential), Err(Error::Data(_))));
}

#[test]
fn detector_labels() {
    for d in default_detectors() {
        assert_eq!(DetectorChoice::parse_label(&d.label()), Some(d));
    }
    assert_eq!(default_detectors()[2].label(), "MAP(T)");
}

fn sample_table() -> ResultTable {
    ResultTable {
        config_hash: "abc123".into(),
        accuracy: vec![AccuracyRow { model: "base".into(), split: "val".into(), accuracy: 0.9871, n: 500 }],
        auroc: vec![
            AurocRow { model: "base".into(), detector: "MSP".into(), t: 1.0, task: Task::T1, family: Family::Eval, auroc: 0.6123, n_id: 500, n_anom: 400 },
            AurocRow { model: "ra".into(), detector: "MAP(T)".into(), t: 50.0, task: Task::T4, family: Family::EvalAlt, auroc: 0.9, n_id: 500, n_anom: 400 },
        ],
    }
}

#[test]
fn results_csv_round_trip() {
    let t = sample_table();
    let csv = t.to_csv();
    assert!(csv.starts_with("# vqa-anomaly results v1 config=abc123\nrow,model,detector,T,task,family,value,n_id,n_anom\n"));
    assert!(csv.contains("auroc,ra,MAP(T),50,T4,EVAL_ALT,0.9000,500,400\n"));
    assert_eq!(ResultTable::parse(&csv).unwrap(), t);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.csv");
    t.write(&p).unwrap();
    assert_eq!(ResultTable::read(&p).unwrap(), t);
    assert!(matches!(ResultTable::read(&dir.path().join("nope.csv")), Err(Error::Missing(_))));
}

#[test]
fn results_parse_errors() {
    assert!(matches!(ResultTable::parse("garbage\n"), Err(Error::Parse { line: 1, .. })));
    let bad = sample_table().to_csv().replace("T4", "T9");
    assert!(matches!(ResultTable::parse(&bad), Err(Error::Parse { line: 5, .. })));
}

#[test]
fn render_has_every_cell() {
    let r = sample_table().render();
    assert!(r.contains("base/MSP"));
    assert!(r.contains("61.2"));
    assert!(r.contains("90.0"));
    assert!(r.contains("accuracy base (val): 98.7"));
}

fn write_fixture(dir: &std::path::Path) -> MatrixSpec {
    let w = small_world();
    let ex = Exec::Sequential;
    let m = small_model(&w);
    let ck = dir.join("base.ckpt");
    write_checkpoint(&ck, &m, &CheckpointMeta { seed: 1, config_hash: "h".into(), config_text: String::new() }).unwrap();
    let id = gen_id(&w, 80, 2, ex).unwrap();
    write_dataset(&dir.join("val.jsonl"), &id[..40]).unwrap();
    write_dataset(&dir.join("cal.jsonl"), &id[40..]).unwrap();
    write_dataset(&dir.join("cal_an.jsonl"), &gen_anomaly(&w, Task::T1, Family::Train, 30, 3, ex).unwrap()).unwrap();
    let mut sets = Vec::new();
    for (task, fam) in [(Task::T1, Family::Eval), (Task::T4, Family::Eval)] {
        let p = dir.join(dataset_file_name("test", task, fam));
        write_dataset(&p, &gen_anomaly(&w, task, fam, 25, 4, ex).unwrap()).unwrap();
        sets.push((task, fam, p));
    }
    MatrixSpec {
        checkpoints: vec![("base".into(), ck.clone()), ("copy".into(), ck)],
        detectors: default_detectors(),
        id_eval: dir.join("val.jsonl"),
        id_cal: dir.join("cal.jsonl"),
        anom_cal: vec![dir.join("cal_an.jsonl")],
        sets,
        t_grid: DEFAULT_T_GRID.to_vec(),
        config_hash: "h".into(),
        output: Some(dir.join("results.csv")),
    }
}

#[test]
fn run_matrix_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_fixture(dir.path());
    let t = run_matrix(&spec, Exec::Sequential).unwrap();
    assert_eq!(t.auroc.len(), 2 * 3 * 2);
    assert_eq!(t.accuracy.len(), 2);
    for r in &t.auroc {
        assert!((0.0..=1.0).contains(&r.auroc));
        assert_eq!((r.n_id, r.n_anom), (40, 25));
        if r.detector == "MSP" {
            assert_eq!(r.t, 1.0);
        }
    }
    // identical checkpoints give identical columns
    for r in t.auroc.iter().filter(|r| r.model == "base") {
        assert_eq!(t.get("copy", &r.detector, r.task, r.family).unwrap().auroc, r.auroc);
    }
    let disk = ResultTable::read(spec.output.as_ref().unwrap()).unwrap();
    assert_eq!(disk.auroc.len(), t.auroc.len());
    assert_eq!(run_matrix(&spec, Exec::Parallel).unwrap(), t);
}

#[test]
fn run_matrix_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = write_fixture(dir.path());
    let gone = dir.path().join("missing.jsonl");
    spec.sets.push((Task::T5, Family::Eval, gone.clone()));
    match run_matrix(&spec, Exec::Sequential) {
        Err(Error::Missing(p)) => assert_eq!(p, gone),
        other => panic!("expected Missing, got {other:?}"),
    }
}

fn scores_strategy() -> impl Strategy<Value = Vec<f64>> {
    // coarse grid so ties are common
    prop::collection::vec((0i32..20).prop_map(|v| v as f64 / 4.0), 1..40)
}

proptest! {
    #[test]
    fn auroc_matches_pairwise_count(id in scores_strategy(), an in scores_strategy()) {
        prop_assert!((auroc(&id, &an).unwrap() - pairwise_auroc(&id, &an)).abs() < 1e-12);
    }

    #[test]
    fn auroc_antisymmetric(id in scores_strategy(), an in scores_strategy()) {
        prop_assert_eq!(auroc(&id, &an).unwrap() + auroc(&an, &id).unwrap(), 1.0);
    }

    #[test]
    fn auroc_invariant_under_monotone_maps(id in scores_strategy(), an in scores_strategy()) {
        let a = auroc(&id, &an).unwrap();
        let f = |v: &Vec<f64>| v.iter().map(|x| (2.0 * x).exp() + 3.0).collect::<Vec<_>>();
        prop_assert_eq!(auroc(&f(&id), &f(&an)).unwrap(), a);
    }
}
