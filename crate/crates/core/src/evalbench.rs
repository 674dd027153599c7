//! AUROC/accuracy metrics and the detector × task × family result matrix.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detect::{calibrate, scores, ScoreKind};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::synthgen::{read_dataset, Answer, Family, Sample, Task};
use crate::vqamodel::{read_checkpoint, Model, SampleOut};

pub const RESULTS_HEADER: &str = "# vqa-anomaly results v1";
pub const RESULTS_COLUMNS: &str = "row,model,detector,T,task,family,value,n_id,n_anom";

/// P(S_id > S_anom) + ½·P(S_id = S_anom) via the midrank statistic.
///
/// Ranks are kept doubled so the Mann-Whitney sum is an exact integer, and the
/// final division is arranged so that `auroc(a, b) + auroc(b, a) == 1.0` exactly.
pub fn auroc(id: &[f64], anom: &[f64]) -> Result<f64> {
    if id.is_empty() || anom.is_empty() {
        return Err(Error::Domain("AUROC needs nonempty ID and anomaly score lists".into()));
    }
    if id.iter().chain(anom).any(|v| !v.is_finite()) {
        return Err(Error::Domain("AUROC scores must be finite".into()));
    }
    let mut all: Vec<(f64, bool)> = id.iter().map(|&v| (v, true)).chain(anom.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank2_id: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // positions i..j share the midrank (i + 1 + j) / 2
        let ids_here = all[i..j].iter().filter(|x| x.1).count() as u128;
        rank2_id += ids_here * (i + 1 + j) as u128;
        i = j;
    }
    let (n1, n2) = (id.len() as u128, anom.len() as u128);
    let u2 = rank2_id - n1 * (n1 + 1);
    let c = 2 * n1 * n2;
    Ok(if 2 * u2 > c { 1.0 - (c - u2) as f64 / c as f64 } else { u2 as f64 / c as f64 })
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy_of(outs: &[SampleOut], samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("accuracy of an empty dataset".into()));
    }
    let mut hits = 0usize;
    for (o, s) in outs.iter().zip(samples) {
        match s.answer {
            Answer::Id(a) => hits += (argmax(&o.logits) == a) as usize,
            Answer::Undefined => return Err(Error::Data("accuracy needs defined answers".into())),
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

pub fn accuracy(model: &Model, samples: &[Sample], exec: Exec) -> Result<f64> {
    if samples.iter().any(|s| s.answer == Answer::Undefined) {
        return Err(Error::Data("accuracy needs defined answers".into()));
    }
    accuracy_of(&model.forward(samples, exec)?, samples)
}

/// A detector column: score kind, optionally at the calibrated temperature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorChoice {
    pub kind: ScoreKind,
    pub calibrated: bool,
}

impl DetectorChoice {
    pub fn label(&self) -> String {
        if self.calibrated {
            format!("{}(T)", self.kind)
        } else {
            self.kind.to_string()
        }
    }

    pub fn parse_label(s: &str) -> Option<Self> {
        match s.strip_suffix("(T)") {
            Some(k) => Some(DetectorChoice { kind: ScoreKind::parse(k)?, calibrated: true }),
            None => Some(DetectorChoice { kind: ScoreKind::parse(s)?, calibrated: false }),
        }
    }
}

pub fn default_detectors() -> Vec<DetectorChoice> {
    vec![
        DetectorChoice { kind: ScoreKind::Msp, calibrated: false },
        DetectorChoice { kind: ScoreKind::Msp, calibrated: true },
        DetectorChoice { kind: ScoreKind::Map, calibrated: true },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct AurocRow {
    pub model: String,
    pub detector: String,
    pub t: f64,
    pub task: Task,
    pub family: Family,
    pub auroc: f64,
    pub n_id: usize,
    pub n_anom: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRow {
    pub model: String,
    pub split: String,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultTable {
    pub config_hash: String,
    pub accuracy: Vec<AccuracyRow>,
    pub auroc: Vec<AurocRow>,
}

impl ResultTable {
    pub fn get(&self, model: &str, detector: &str, task: Task, family: Family) -> Option<&AurocRow> {
        self.auroc.iter().find(|r| r.model == model && r.detector == detector && r.task == task && r.family == family)
    }

    pub fn accuracy_of(&self, model: &str) -> Option<f64> {
        self.accuracy.iter().find(|r| r.model == model).map(|r| r.accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{RESULTS_HEADER} config={}\n{RESULTS_COLUMNS}\n", self.config_hash);
        for r in &self.accuracy {
            writeln!(s, "accuracy,{},,,,{},{:.4},{},0", r.model, r.split, r.accuracy, r.n).unwrap();
        }
        for r in &self.auroc {
            writeln!(
                s,
                "auroc,{},{},{},{},{},{:.4},{},{}",
                r.model, r.detector, r.t, r.task, r.family, r.auroc, r.n_id, r.n_anom
            )
            .unwrap();
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let perr = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };
        let (_, head) = lines.next().ok_or_else(|| perr(1, "empty results file"))?;
        let hash = head
            .strip_prefix(RESULTS_HEADER)
            .and_then(|r| r.strip_prefix(" config="))
            .ok_or_else(|| perr(1, "missing or unsupported results header"))?;
        match lines.next() {
            Some((_, cols)) if cols == RESULTS_COLUMNS => {}
            _ => return Err(perr(2, "unexpected column header")),
        }
        let mut t = ResultTable { config_hash: hash.to_string(), ..Default::default() };
        for (i, line) in lines {
            let ln = i + 1;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(perr(ln, "expected 9 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| perr(ln, "bad number"));
            let cnt = |s: &str| s.parse::<usize>().map_err(|_| perr(ln, "bad count"));
            match f[0] {
                "accuracy" => t.accuracy.push(AccuracyRow {
                    model: f[1].into(),
                    split: f[5].into(),
                    accuracy: num(f[6])?,
                    n: cnt(f[7])?,
                }),
                "auroc" => t.auroc.push(AurocRow {
                    model: f[1].into(),
                    detector: f[2].into(),
                    t: num(f[3])?,
                    task: Task::parse(f[4]).ok_or_else(|| perr(ln, "bad task"))?,
                    family: Family::parse(f[5]).ok_or_else(|| perr(ln, "bad family"))?,
                    auroc: num(f[6])?,
                    n_id: cnt(f[7])?,
                    n_anom: cnt(f[8])?,
                }),
                _ => return Err(perr(ln, "unknown row kind")),
            }
        }
        Ok(t)
    }

    /// Tasks × (model, detector) grid of AUROC percentages, one block per family.
    pub fn render(&self) -> String {
        let mut cols: Vec<(String, String)> = Vec::new();
        for r in &self.auroc {
            let c = (r.model.clone(), r.detector.clone());
            if !cols.contains(&c) {
                cols.push(c);
            }
        }
        let mut fams: Vec<Family> = self.auroc.iter().map(|r| r.family).collect();
        fams.sort();
        fams.dedup();
        let width = cols.iter().map(|(m, d)| m.len() + d.len() + 1).max().unwrap_or(8).max(8);
        let mut s = String::new();
        for r in &self.accuracy {
            writeln!(s, "accuracy {} ({}): {:.1}", r.model, r.split, 100.0 * r.accuracy).unwrap();
        }
        for fam in fams {
            write!(s, "\n{:<6}", fam.name()).unwrap();
            for (m, d) in &cols {
                write!(s, " {:>width$}", format!("{m}/{d}")).unwrap();
            }
            s.push('\n');
            for task in Task::ANOMALIES {
                if !self.auroc.iter().any(|r| r.family == fam && r.task == task) {
                    continue;
                }
                write!(s, "{:<6}", task.name()).unwrap();
                for (m, d) in &cols {
                    match self.get(m, d, task, fam) {
                        Some(r) => write!(s, " {:>width$.1}", 100.0 * r.auroc).unwrap(),
                        None => write!(s, " {:>width$}", "-").unwrap(),
                    }
                }
                s.push('\n');
            }
        }
        s
    }
}

/// Everything needed to score models, already loaded.
#[derive(Debug, Clone)]
pub struct EvalData {
    pub id_eval: Vec<Sample>,
    pub id_cal: Vec<Sample>,
    /// Pooled TRAIN-family anomalies used to pick T.
    pub anom_cal: Vec<Sample>,
    pub sets: Vec<(Task, Family, Vec<Sample>)>,
}

pub fn evaluate(
    models: &[(String, &Model)],
    data: &EvalData,
    detectors: &[DetectorChoice],
    t_grid: &[f64],
    exec: Exec,
) -> Result<ResultTable> {
    let mut table = ResultTable::default();
    for (tag, model) in models {
        let id_out = model.forward(&data.id_eval, exec)?;
        table.accuracy.push(AccuracyRow {
            model: tag.clone(),
            split: "val".into(),
            accuracy: accuracy_of(&id_out, &data.id_eval)?,
            n: data.id_eval.len(),
        });
        let cal_id = model.forward(&data.id_cal, exec)?;
        let cal_an = model.forward(&data.anom_cal, exec)?;
        let set_outs =
            data.sets.iter().map(|(_, _, s)| model.forward(s, exec)).collect::<Result<Vec<_>>>()?;
        let mut temps: BTreeMap<ScoreKind, f64> = BTreeMap::new();
        for det in detectors {
            let t = if det.calibrated {
                match temps.get(&det.kind) {
                    Some(&t) => t,
                    None => {
                        let c = calibrate(|t| scores(&cal_id, det.kind, t), |t| scores(&cal_an, det.kind, t), t_grid)?;
                        temps.insert(det.kind, c.t);
                        c.t
                    }
                }
            } else {
                1.0
            };
            let id_scores = scores(&id_out, det.kind, t)?;
            for ((task, family, samples), outs) in data.sets.iter().zip(&set_outs) {
                table.auroc.push(AurocRow {
                    model: tag.clone(),
                    detector: det.label(),
                    t,
                    task: *task,
                    family: *family,
                    auroc: auroc(&id_scores, &scores(outs, det.kind, t)?)?,
                    n_id: id_scores.len(),
                    n_anom: samples.len(),
                });
            }
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSpec {
    /// (tag, checkpoint path), evaluated in this order.
    pub checkpoints: Vec<(String, PathBuf)>,
    pub detectors: Vec<DetectorChoice>,
    pub id_eval: PathBuf,
    pub id_cal: PathBuf,
    pub anom_cal: Vec<PathBuf>,
    pub sets: Vec<(Task, Family, PathBuf)>,
    pub t_grid: Vec<f64>,
    pub config_hash: String,
    pub output: Option<PathBuf>,
}

pub fn run_matrix(spec: &MatrixSpec, exec: Exec) -> Result<ResultTable> {
    let all_paths = spec
        .checkpoints
        .iter()
        .map(|(_, p)| p)
        .chain([&spec.id_eval, &spec.id_cal])
        .chain(&spec.anom_cal)
        .chain(spec.sets.iter().map(|(_, _, p)| p));
    for p in all_paths {
        if !p.exists() {
            return Err(Error::Missing(p.clone()));
        }
    }
    let mut sets = spec
        .sets
        .iter()
        .map(|(t, f, p)| Ok((*t, *f, read_dataset(p)?)))
        .collect::<Result<Vec<_>>>()?;
    sets.sort_by_key(|(t, f, _)| (*t, *f));
    let mut anom_cal = Vec::new();
    for p in &spec.anom_cal {
        anom_cal.extend(read_dataset(p)?);
    }
    let data = EvalData { id_eval: read_dataset(&spec.id_eval)?, id_cal: read_dataset(&spec.id_cal)?, anom_cal, sets };
    let models = spec
        .checkpoints
        .iter()
        .map(|(tag, p)| Ok((tag.clone(), read_checkpoint(p)?.0)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<(String, &Model)> = models.iter().map(|(t, m)| (t.clone(), m)).collect();
    let mut table = evaluate(&refs, &data, &spec.detectors, &spec.t_grid, exec)?;
    table.config_hash = spec.config_hash.clone();
    if let Some(out) = &spec.output {
        table.write(out)?;
    }
    Ok(table)
}
