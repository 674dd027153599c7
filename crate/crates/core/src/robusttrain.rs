//! Base training, OE / RA / RA-VAR fine-tuning and the uniform-optimum check
//! for the RA objective.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Grads, Graph, NodeId, OptimConfig, OptimState};
use crate::error::{Error, Result};
use crate::evalbench::accuracy;
use crate::exec::Exec;
use crate::synthgen::{Answer, Family, Sample, Task};
use crate::vqamodel::{build_forward, HeadAttention, Model};

/// Samples per gradient chunk; chunk gradients are summed in index order.
pub const GRAD_CHUNK: usize = 16;
/// The published setting; far too weak for the toy model's attention scale.
pub const PAPER_LAMBDA: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "BASE")]
    Base,
    #[serde(rename = "OE")]
    Oe,
    #[serde(rename = "RA")]
    Ra,
    #[serde(rename = "RA_VAR")]
    RaVar,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Base => "BASE",
            Method::Oe => "OE",
            Method::Ra => "RA",
            Method::RaVar => "RA_VAR",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "base" => Some(Method::Base),
            "oe" => Some(Method::Oe),
            "ra" => Some(Method::Ra),
            "ra-var" => Some(Method::RaVar),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Filled from the run seed by the recipe; not a config key.
    #[serde(skip)]
    pub seed: u64,
    pub method: Method,
    pub lambda: f64,
    pub lambda_var: f64,
    pub oe_weight: f64,
    /// TRAIN-family anomaly sources used for fine-tuning.
    pub sources: Vec<Task>,
    /// Relative share of each anomaly source in a regularization batch; empty means equal.
    pub source_weights: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            optim: OptimConfig::default(),
            seed: 0,
            method: Method::Base,
            lambda: 1.0,
            lambda_var: 1e-2,
            oe_weight: 1.0,
            sources: vec![Task::T1, Task::T2, Task::T4],
            source_weights: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        for (name, v) in [("lambda", self.lambda), ("lambda_var", self.lambda_var), ("oe_weight", self.oe_weight)] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if !(self.optim.lr >= 0.0) {
            return Err(Error::Config("learning rate must be nonnegative".into()));
        }
        if self.sources.contains(&Task::Id) {
            return Err(Error::Config("ID is not an anomaly source".into()));
        }
        if self.source_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("source weights must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub task_loss: f64,
    pub regularizer: f64,
    pub val_accuracy: Option<f64>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\ttask_loss\tregularizer\tval_accuracy\twall_secs\n");
        for r in &self.rows {
            let acc = r.val_accuracy.map_or("-".to_string(), |a| format!("{a:.6}"));
            writeln!(s, "{}\t{:.8}\t{:.8}\t{acc}\t{:.3}", r.epoch, r.task_loss, r.regularizer, r.wall_secs).unwrap();
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    /// Everything except wall time, which is the one nondeterministic column.
    pub fn deterministic_part(&self) -> Vec<(usize, f64, f64, Option<f64>)> {
        self.rows.iter().map(|r| (r.epoch, r.task_loss, r.regularizer, r.val_accuracy)).collect()
    }
}

fn require_answers(samples: &[Sample], what: &str) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| match s.answer {
            Answer::Id(a) => Ok(a),
            Answer::Undefined => Err(Error::Data(format!("{what} contains a sample without a defined answer"))),
        })
        .collect()
}

fn ce_term(g: &mut Graph, logits: NodeId, labels: &[usize], scale: f64) -> Result<NodeId> {
    let lp = g.log_softmax(logits)?;
    let nll = g.nll(lp, labels)?;
    g.scale(nll, scale)
}

/// Regularizer for one chunk of an anomaly batch, already weighted and divided by the batch size.
fn anomaly_term(g: &mut Graph, model: &Model, ids: &[NodeId], chunk: &[Sample], cfg: &TrainConfig, batch: usize) -> Result<NodeId> {
    let f = build_forward(g, &model.config, ids, chunk)?;
    let inv_b = 1.0 / batch as f64;
    match cfg.method {
        Method::Oe => {
            let n = model.config.n_answers as f64;
            let lp = g.log_softmax(f.logits)?;
            let s = g.sum(lp)?;
            g.scale(s, -cfg.oe_weight * inv_b / n)
        }
        Method::Ra => {
            let mut terms = Vec::new();
            for &a in &f.attn {
                let l = g.log1m_clamped(a)?;
                let w = f.mask.iter().map(|&m| if m { -cfg.lambda * inv_b } else { 0.0 }).collect();
                let l = g.mul_const(l, w)?;
                terms.push(g.sum(l)?);
            }
            sum_nodes(g, &terms)
        }
        Method::RaVar => {
            let cells = f.mask.len() / chunk.len();
            let mut centre = Vec::with_capacity(f.mask.len());
            let mut weight = Vec::with_capacity(f.mask.len());
            for row in f.mask.chunks(cells) {
                let n = row.iter().filter(|&&m| m).count() as f64;
                for &m in row {
                    centre.push(if m { -1.0 / n } else { 0.0 });
                    weight.push(if m { cfg.lambda_var * inv_b / n } else { 0.0 });
                }
            }
            let mut terms = Vec::new();
            for &a in &f.attn {
                let d = g.add_const(a, centre.clone())?;
                let d = g.square(d)?;
                let d = g.mul_const(d, weight.clone())?;
                terms.push(g.sum(d)?);
            }
            sum_nodes(g, &terms)
        }
        Method::Base => Err(Error::Contract("no anomaly term for BASE".into())),
    }
}

fn sum_nodes(g: &mut Graph, terms: &[NodeId]) -> Result<NodeId> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Loss value and gradients of one step: mean task CE on `id_batch` plus the
/// method's term on `anom_batch`.
pub fn step_gradients(
    model: &Model,
    id_batch: &[Sample],
    anom_batch: &[Sample],
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<(f64, f64, Grads)> {
    let n_id = id_batch.len().div_ceil(GRAD_CHUNK);
    let n_an = anom_batch.len().div_ceil(GRAD_CHUNK);
    let results = exec.map_indexed(n_id + n_an, |c| -> Result<(bool, f64, Grads)> {
        let mut g = Graph::new();
        let ids = model.bind(&mut g)?;
        let (is_id, loss) = if c < n_id {
            let chunk = &id_batch[c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(id_batch.len())];
            let labels = require_answers(chunk, "ID batch")?;
            let f = build_forward(&mut g, &model.config, &ids, chunk)?;
            (true, ce_term(&mut g, f.logits, &labels, 1.0 / id_batch.len() as f64)?)
        } else {
            let c = c - n_id;
            let chunk = &anom_batch[c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(anom_batch.len())];
            (false, anomaly_term(&mut g, model, &ids, chunk, cfg, anom_batch.len())?)
        };
        Ok((is_id, g.value(loss).item(), g.backward(loss)?))
    });
    let (mut task, mut reg) = (0.0, 0.0);
    let mut total: Option<Grads> = None;
    for r in results {
        let (is_id, v, gr) = r?;
        if is_id {
            task += v;
        } else {
            reg += v;
        }
        match &mut total {
            None => total = Some(gr),
            Some(t) => t.accumulate(&gr),
        }
    }
    let total = total.ok_or_else(|| Error::Data("empty training batch".into()))?;
    Ok((task, reg, total))
}

/// Per-source counts for a regularization batch of `total` samples (largest remainder).
pub fn source_counts(weights: &[f64], n_sources: usize, total: usize) -> Result<Vec<usize>> {
    let w: Vec<f64> = if weights.is_empty() { vec![1.0; n_sources] } else { weights.to_vec() };
    if w.len() != n_sources {
        return Err(Error::Config(format!("{} source weights for {n_sources} anomaly sources", w.len())));
    }
    let sum: f64 = w.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::Config("source weights must not all be zero".into()));
    }
    let exact: Vec<f64> = w.iter().map(|x| x / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..n_sources).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    Ok(counts)
}

struct Loop<'a> {
    id_train: &'a [Sample],
    id_val: Option<&'a [Sample]>,
    anomalies: &'a [(Task, Vec<Sample>)],
    keep_best: bool,
}

fn run(mut model: Model, l: Loop<'_>, cfg: &TrainConfig, exec: Exec) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    if l.id_train.is_empty() {
        return Err(Error::Data("empty ID training set".into()));
    }
    require_answers(l.id_train, "ID training data")?;
    let counts = if cfg.method == Method::Base {
        Vec::new()
    } else {
        source_counts(&cfg.source_weights, l.anomalies.len(), cfg.batch_size)?
    };
    let start = Instant::now();
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut anom_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    anom_rng.set_stream(1);
    let mut params = model.tensors();
    let mut opt = OptimState::new(cfg.optim, &params);
    let mut order: Vec<usize> = (0..l.id_train.len()).collect();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Vec<crate::diffcore::Tensor>)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut task_sum, mut reg_sum, mut steps) = (0.0, 0.0, 0usize);
        for batch_idx in order.chunks(cfg.batch_size) {
            let id_batch: Vec<Sample> = batch_idx.iter().map(|&i| l.id_train[i].clone()).collect();
            let mut anom_batch = Vec::new();
            for ((_, src), &n) in l.anomalies.iter().zip(&counts) {
                for _ in 0..n {
                    anom_batch.push(src[anom_rng.random_range(0..src.len())].clone());
                }
            }
            let (task, reg, grads) = step_gradients(&model, &id_batch, &anom_batch, cfg, exec)?;
            opt.step(&mut params, &grads)?;
            model.set_tensors(params.clone());
            task_sum += task;
            reg_sum += reg;
            steps += 1;
        }
        let val_accuracy = match l.id_val {
            Some(v) => Some(accuracy(&model, v, exec)?),
            None => None,
        };
        if l.keep_best {
            let a = val_accuracy.unwrap_or(f64::NEG_INFINITY);
            if best.as_ref().is_none_or(|(b, _)| a > *b) {
                best = Some((a, params.clone()));
            }
        }
        log.rows.push(EpochRow {
            epoch,
            task_loss: task_sum / steps as f64,
            regularizer: reg_sum / steps as f64,
            val_accuracy,
            wall_secs: start.elapsed().as_secs_f64(),
        });
    }
    if let Some((_, p)) = best {
        model.set_tensors(p);
    }
    Ok((model, log))
}

/// Cross-entropy training; returns the epoch with the best validation accuracy.
pub fn train_base(model: Model, id_train: &[Sample], id_val: &[Sample], cfg: &TrainConfig, exec: Exec) -> Result<(Model, TrainLog)> {
    if cfg.method != Method::Base {
        return Err(Error::Config(format!("train_base needs method BASE, got {}", cfg.method.name())));
    }
    run(model, Loop { id_train, id_val: Some(id_val), anomalies: &[], keep_best: true }, cfg, exec)
}

/// Further cross-entropy epochs without checkpoint selection.
pub fn continue_base(model: Model, id_train: &[Sample], cfg: &TrainConfig, exec: Exec) -> Result<(Model, TrainLog)> {
    let cfg = TrainConfig { method: Method::Base, ..cfg.clone() };
    run(model, Loop { id_train, id_val: None, anomalies: &[], keep_best: false }, &cfg, exec)
}

/// OE / RA / RA-VAR fine-tuning on `anomalies`, one TRAIN-family source per entry.
pub fn finetune(
    model: Model,
    id_train: &[Sample],
    id_val: Option<&[Sample]>,
    anomalies: &[(Task, Vec<Sample>)],
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<(Model, TrainLog)> {
    if cfg.method == Method::Base {
        return Err(Error::Config("finetune needs method OE, RA or RA_VAR".into()));
    }
    if anomalies.is_empty() || anomalies.iter().any(|(_, s)| s.is_empty()) {
        return Err(Error::Data("every anomaly source must be nonempty".into()));
    }
    for (task, src) in anomalies {
        if let Some(s) = src.iter().find(|s| !s.is_anomaly() || s.family != Family::Train) {
            return Err(Error::Data(format!(
                "anomaly source {task} contains a {} {} sample; only TRAIN-family anomalies are allowed",
                s.task, s.family
            )));
        }
    }
    if id_train.iter().any(|s| s.is_anomaly()) {
        return Err(Error::Data("anomaly sample in the ID training set".into()));
    }
    run(model, Loop { id_train, id_val, anomalies, keep_best: false }, cfg, exec)
}

/// `−λ Σ_heads Σ_unmasked log(1 − A_ij)` for one sample's attention.
pub fn ra_penalty(heads: &[HeadAttention], lambda: f64) -> f64 {
    -lambda
        * heads
            .iter()
            .flat_map(|h| h.probs.iter().zip(&h.mask).filter(|(_, &m)| m).map(|(a, _)| (-a).ln_1p()))
            .sum::<f64>()
}

/// Mean KL(uniform ‖ softmax(logits)) over `samples`.
pub fn mean_kl_uniform(model: &Model, samples: &[Sample], exec: Exec) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("KL over an empty set".into()));
    }
    let outs = model.forward(samples, exec)?;
    let mut total = 0.0;
    for o in &outs {
        let n = o.logits.len() as f64;
        let mx = o.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + o.logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        let mean_logp = o.logits.iter().map(|v| v - lse).sum::<f64>() / n;
        total += -n.ln() - mean_logp;
    }
    Ok(total / outs.len() as f64)
}

/// `Σ log(1 − x_i)`.
pub fn ra_objective(x: &[f64]) -> f64 {
    x.iter().map(|v| (-v).ln_1p()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theorem1Report {
    pub k: usize,
    pub trials: usize,
    pub max_deviation: f64,
    /// Objective at the best converged point.
    pub optimum: f64,
}

fn softmax_with_complements(z: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    let x = e.iter().map(|v| v / s).collect();
    // 1 − x_i computed from the other terms, so it never rounds to zero
    let comp = e.iter().map(|v| (s - v) / s).collect();
    (x, comp)
}

fn objective_z(z: &[f64]) -> f64 {
    softmax_with_complements(z).1.iter().map(|c| c.ln()).sum()
}

fn ascend(mut z: Vec<f64>) -> Result<Vec<f64>> {
    let mut f = objective_z(&z);
    let mut step = 1.0;
    for _ in 0..100_000 {
        let (x, comp) = softmax_with_complements(&z);
        let gx: Vec<f64> = comp.iter().map(|c| -1.0 / c).collect();
        let dot: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        let grad: Vec<f64> = x.iter().zip(&gx).map(|(a, b)| a * (b - dot)).collect();
        let gnorm2: f64 = grad.iter().map(|v| v * v).sum();
        if gnorm2.sqrt() < 1e-13 {
            return Ok(z);
        }
        loop {
            let cand: Vec<f64> = z.iter().zip(&grad).map(|(a, b)| a + step * b).collect();
            let fc = objective_z(&cand);
            if fc >= f + 1e-4 * step * gnorm2 {
                z = cand;
                f = fc;
                step *= 2.0;
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                return Ok(z);
            }
        }
        if !f.is_finite() {
            return Err(Error::Numerical { op: "verify_theorem1" });
        }
    }
    Ok(z)
}

/// Maximizes `Σ log(1 − x_i)` over the simplex from `trials` random softmax
/// parameterizations; fails if any run ends farther than `tol` from uniform.
pub fn verify_theorem1(k: usize, trials: usize, tol: f64, seed: u64, exec: Exec) -> Result<Theorem1Report> {
    if k < 2 {
        return Err(Error::Domain(format!("K must be at least 2 (K={k} forces log 0)")));
    }
    if !(tol > 0.0) || trials == 0 {
        return Err(Error::Domain("tolerance must be positive and trials at least 1".into()));
    }
    let runs = exec.map_indexed(trials, |t| -> Result<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let z0: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let z = ascend(z0)?;
        let (x, comp) = softmax_with_complements(&z);
        let dev = x.iter().map(|v| (v - 1.0 / k as f64).abs()).fold(0.0, f64::max);
        Ok((dev, comp.iter().map(|c| c.ln()).sum()))
    });
    let mut report = Theorem1Report { k, trials, max_deviation: 0.0, optimum: f64::NEG_INFINITY };
    for r in runs {
        let (dev, f) = r?;
        report.max_deviation = report.max_deviation.max(dev);
        report.optimum = report.optimum.max(f);
    }
    if report.max_deviation > tol {
        return Err(Error::Convergence(format!("max deviation {:e} exceeds tolerance {tol:e}", report.max_deviation)));
    }
    Ok(report)
}
