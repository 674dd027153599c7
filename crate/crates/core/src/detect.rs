//! MSP and MAP confidence scores, temperature/threshold calibration and the
//! thresholded detector `S <= delta`.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::softmax;
use crate::error::{Error, Result};
use crate::evalbench::auroc;
use crate::synthgen::Task;
use crate::vqamodel::{HeadAttention, SampleOut};

pub const DEFAULT_T_GRID: [f64; 7] = [1.0, 2.0, 5.0, 10.0, 50.0, 100.0, 1000.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Msp,
    Map,
}

impl ScoreKind {
    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Msp => "MSP",
            ScoreKind::Map => "MAP",
        }
    }

    pub fn parse(s: &str) -> Option<ScoreKind> {
        match s {
            "MSP" | "msp" => Some(ScoreKind::Msp),
            "MAP" | "map" => Some(ScoreKind::Map),
            _ => None,
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How per-head MAP maxima are combined. `Max` exists for ablations only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadReduce {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub kind: ScoreKind,
    pub t: f64,
    pub delta: f64,
}

impl DetectorSpec {
    pub fn new(kind: ScoreKind, t: f64, delta: f64) -> Result<Self> {
        if !(t > 0.0) {
            return Err(Error::Domain(format!("temperature must be positive, got {t}")));
        }
        Ok(DetectorSpec { kind, t, delta })
    }
}

/// Max of `softmax(logits / t)`.
pub fn msp(logits: &[f64], t: f64) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::Domain("MSP needs at least two classes".into()));
    }
    Ok(softmax(logits, t, None)?.into_iter().fold(0.0, f64::max))
}

fn head_max(h: &HeadAttention, t: f64) -> Result<f64> {
    let p = softmax(&h.logits, t, Some(&h.mask))?;
    Ok(p.iter().zip(&h.mask).filter(|(_, &m)| m).map(|(v, _)| *v).fold(0.0, f64::max))
}

/// Mean over heads of the largest unmasked cell of the joint attention softmax at temperature `t`.
pub fn map_score(heads: &[HeadAttention], t: f64) -> Result<f64> {
    map_score_with(heads, t, HeadReduce::Mean)
}

pub fn map_score_with(heads: &[HeadAttention], t: f64, reduce: HeadReduce) -> Result<f64> {
    if heads.is_empty() {
        return Err(Error::Domain("MAP needs at least one head".into()));
    }
    let maxima = heads.iter().map(|h| head_max(h, t)).collect::<Result<Vec<_>>>()?;
    Ok(match reduce {
        HeadReduce::Mean => maxima.iter().sum::<f64>() / maxima.len() as f64,
        HeadReduce::Max => maxima.into_iter().fold(0.0, f64::max),
    })
}

pub fn score(out: &SampleOut, kind: ScoreKind, t: f64) -> Result<f64> {
    match kind {
        ScoreKind::Msp => msp(&out.logits, t),
        ScoreKind::Map => map_score(&out.heads, t),
    }
}

pub fn scores(outs: &[SampleOut], kind: ScoreKind, t: f64) -> Result<Vec<f64>> {
    outs.iter().map(|o| score(o, kind, t)).collect()
}

/// Flags a sample as anomalous iff its score is at most `delta`.
pub fn detect(spec: &DetectorSpec, score: f64) -> bool {
    score <= spec.delta
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub t: f64,
    pub delta: f64,
    pub auroc: f64,
}

/// Threshold maximising TPR − FPR under `S <= delta`; the smallest such score wins ties.
pub fn best_threshold(id: &[f64], anom: &[f64]) -> Result<f64> {
    if id.is_empty() || anom.is_empty() {
        return Err(Error::Calibration("threshold search needs both ID and anomaly scores".into()));
    }
    let sorted = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s
    };
    let (ids, ans) = (sorted(id), sorted(anom));
    let mut cands: Vec<f64> = ids.iter().chain(&ans).copied().collect();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let at_most = |s: &[f64], d: f64| s.partition_point(|&x| x <= d) as f64 / s.len() as f64;
    let mut best = (f64::NEG_INFINITY, cands[0]);
    for d in cands {
        let j = at_most(&ans, d) - at_most(&ids, d);
        if j > best.0 {
            best = (j, d);
        }
    }
    Ok(best.1)
}

/// Picks the grid temperature with the highest AUROC (smallest on ties), then
/// the threshold at that temperature.
pub fn calibrate<F, G>(id_scores: F, anom_scores: G, grid: &[f64]) -> Result<Calibration>
where
    F: Fn(f64) -> Result<Vec<f64>>,
    G: Fn(f64) -> Result<Vec<f64>>,
{
    if grid.is_empty() {
        return Err(Error::Calibration("empty temperature grid".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64, Vec<f64>, Vec<f64>)> = None;
    for t in grid {
        let (i, a) = (id_scores(t)?, anom_scores(t)?);
        if i.is_empty() || a.is_empty() {
            return Err(Error::Calibration("calibration sets must be nonempty".into()));
        }
        let auc = auroc(&i, &a)?;
        if best.as_ref().is_none_or(|b| auc > b.1) {
            best = Some((t, auc, i, a));
        }
    }
    let (t, auc, i, a) = best.unwrap();
    Ok(Calibration { t, delta: best_threshold(&i, &a)?, auroc: auc })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub id: String,
    pub task: Task,
    pub is_anomaly: bool,
    pub kind: ScoreKind,
    pub t: f64,
    pub score: f64,
}

pub fn write_score_dump(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut text = String::from("id,task,is_anomaly,kind,T,score\n");
    for r in records {
        text.push_str(&format!("{},{},{},{},{},{:?}\n", r.id, r.task, r.is_anomaly, r.kind, r.t, r.score));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_score_dump(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::Parse { line: i + 1, msg: format!("bad score record {line:?}") };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        out.push(ScoreRecord {
            id: f[0].to_string(),
            task: Task::parse(f[1]).ok_or_else(bad)?,
            is_anomaly: f[2].parse().map_err(|_| bad())?,
            kind: ScoreKind::parse(f[3]).ok_or_else(bad)?,
            t: f[4].parse().map_err(|_| bad())?,
            score: f[5].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}
