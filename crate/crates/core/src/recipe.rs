//! The stages behind the CLI: generate → train → fine-tune → evaluate.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::config::{stage_seed, RunConfig};
use crate::error::{Error, Result};
use crate::evalbench::{EvalData, MatrixSpec};
use crate::exec::Exec;
use crate::robusttrain::{continue_base, finetune, train_base, Method, TrainConfig, TrainLog};
use crate::synthgen::{dataset_file_name, gen_anomaly, gen_id, read_dataset, split, write_dataset, Family, Sample, Task};
use crate::vqamodel::Model;

pub const MANIFEST: &str = "MANIFEST";

pub fn id_file(split: &str) -> String {
    dataset_file_name(split, Task::Id, Family::Train)
}

/// Every dataset of a run, keyed by file name.
pub type DataMap = BTreeMap<String, Vec<Sample>>;

pub fn generate(cfg: &RunConfig, exec: Exec) -> Result<DataMap> {
    let (w, d) = (&cfg.world, &cfg.data);
    let mut out = DataMap::new();
    let pool = gen_id(w, d.n_id, stage_seed(cfg.seed, "gen:ID"), exec)?;
    let parts = split(&pool, &d.id_split, stage_seed(cfg.seed, "split:ID"))?;
    for (name, part) in ["train", "val", "cal"].into_iter().zip(parts) {
        out.insert(id_file(name), part);
    }
    let mut jobs: Vec<(&str, Task, Family, usize)> = Vec::new();
    for &t in &d.train_tasks {
        jobs.push(("train", t, Family::Train, d.n_anomaly_train));
        jobs.push(("cal", t, Family::Train, d.n_anomaly_cal));
    }
    for &(t, f) in &cfg.eval.sets {
        jobs.push(("test", t, f, d.n_test));
    }
    for (split_name, t, f, n) in jobs {
        let name = dataset_file_name(split_name, t, f);
        let seed = stage_seed(cfg.seed, &format!("gen:{name}"));
        out.insert(name, gen_anomaly(w, t, f, n, seed, exec)?);
    }
    Ok(out)
}

pub fn write_data(dir: &Path, data: &DataMap, config_hash: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("config-hash {config_hash}\n");
    for (name, samples) in data {
        write_dataset(&dir.join(name), samples)?;
        manifest.push_str(&format!("{name} {}\n", samples.len()));
    }
    let p = dir.join(MANIFEST);
    std::fs::write(&p, manifest).map_err(|e| Error::io(&p, e))
}

fn take<'a>(data: &'a DataMap, name: &str) -> Result<&'a Vec<Sample>> {
    data.get(name).ok_or_else(|| Error::Missing(PathBuf::from(name)))
}

pub fn train_stage(cfg: &RunConfig, data: &DataMap, exec: Exec) -> Result<(Model, TrainLog)> {
    let model = Model::init(cfg.model_config(stage_seed(cfg.seed, "init")))?;
    let tc = TrainConfig { seed: stage_seed(cfg.seed, "train"), method: Method::Base, ..cfg.train.clone() };
    train_base(model, take(data, &id_file("train"))?, take(data, &id_file("val"))?, &tc, exec)
}

/// `tc` is the fine-tuning config with its method, λ and sources already chosen.
pub fn finetune_stage(cfg: &RunConfig, tc: &TrainConfig, model: Model, data: &DataMap, exec: Exec) -> Result<(Model, TrainLog)> {
    let stage = format!("finetune:{}", tc.method.name());
    let tc = TrainConfig { seed: stage_seed(cfg.seed, &stage), ..tc.clone() };
    let id_train = take(data, &id_file("train"))?;
    let id_val = take(data, &id_file("val"))?;
    if tc.method == Method::Base {
        return continue_base(model, id_train, &tc, exec);
    }
    let sources = tc
        .sources
        .iter()
        .map(|&t| Ok((t, take(data, &dataset_file_name("train", t, Family::Train))?.clone())))
        .collect::<Result<Vec<_>>>()?;
    finetune(model, id_train, Some(id_val), &sources, &tc, exec)
}

/// Files a stage needs from a data directory, read into a map.
pub fn read_data(dir: &Path, names: &[String]) -> Result<DataMap> {
    names.iter().map(|n| Ok((n.clone(), read_dataset(&dir.join(n))?))).collect()
}

pub fn training_files(tc: &TrainConfig) -> Vec<String> {
    let mut v = vec![id_file("train"), id_file("val")];
    if tc.method != Method::Base {
        v.extend(tc.sources.iter().map(|&t| dataset_file_name("train", t, Family::Train)));
    }
    v
}

pub fn eval_data(cfg: &RunConfig, data: &DataMap) -> Result<EvalData> {
    let mut anom_cal = Vec::new();
    for &t in &cfg.data.train_tasks {
        anom_cal.extend(take(data, &dataset_file_name("cal", t, Family::Train))?.iter().cloned());
    }
    let mut sets = cfg
        .eval
        .sets
        .iter()
        .map(|&(t, f)| Ok((t, f, take(data, &dataset_file_name("test", t, f))?.clone())))
        .collect::<Result<Vec<_>>>()?;
    sets.sort_by_key(|(t, f, _)| (*t, *f));
    Ok(EvalData {
        id_eval: take(data, &id_file("val"))?.clone(),
        id_cal: take(data, &id_file("cal"))?.clone(),
        anom_cal,
        sets,
    })
}

pub fn matrix_spec(cfg: &RunConfig, hash: &str, dir: &Path, checkpoints: &[PathBuf], output: Option<PathBuf>) -> MatrixSpec {
    MatrixSpec {
        checkpoints: checkpoints.iter().map(|p| (model_tag(p), p.clone())).collect(),
        detectors: cfg.eval.detectors.clone(),
        id_eval: dir.join(id_file("val")),
        id_cal: dir.join(id_file("cal")),
        anom_cal: cfg.data.train_tasks.iter().map(|&t| dir.join(dataset_file_name("cal", t, Family::Train))).collect(),
        sets: cfg.eval.sets.iter().map(|&(t, f)| (t, f, dir.join(dataset_file_name("test", t, f)))).collect(),
        t_grid: cfg.detect.t_grid.clone(),
        config_hash: hash.to_string(),
        output,
    }
}

/// Column label for a checkpoint: its file stem.
pub fn model_tag(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}
