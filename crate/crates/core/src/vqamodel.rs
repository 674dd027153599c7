//! Toy cross-modal attention classifier: embeddings and a visual projection,
//! one joint attention layer (context-vector or pairwise multi-head),
//! element-wise fusion and an answer head.

use std::fmt::Write as _;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::synthgen::{Sample, WorldSpec};

pub const CHECKPOINT_MAGIC: &str = "vqa-anomaly checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const INFER_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    /// One attention row per object against the pooled question vector.
    Context,
    /// Joint attention over every (object, token) pair, per head.
    Pairwise,
}

impl AttentionVariant {
    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::Context => "context",
            AttentionVariant::Pairwise => "pairwise",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub variant: AttentionVariant,
    pub n_answers: usize,
    pub k: usize,
    pub m: usize,
    pub d: usize,
    pub vocab: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn for_world(world: &WorldSpec, hidden: usize, heads: usize, variant: AttentionVariant, init_seed: u64) -> Self {
        ModelConfig {
            hidden,
            heads,
            variant,
            n_answers: world.candidates().len(),
            k: world.k,
            m: world.m,
            d: world.d(),
            vocab: world.vocab().len(),
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.hidden == 0 || self.heads == 0 || self.k == 0 || self.m == 0 || self.d == 0 || self.vocab == 0 {
            return bad("model dimensions must be positive");
        }
        if self.n_answers < 2 {
            return bad("need at least two answer candidates");
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad("hidden size must be divisible by the head count");
        }
        if self.variant == AttentionVariant::Context && self.heads != 1 {
            return bad("the context variant has exactly one head");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Attention columns per head: 1 for the context variant, M for pairwise.
    pub fn attn_cols(&self) -> usize {
        match self.variant {
            AttentionVariant::Context => 1,
            AttentionVariant::Pairwise => self.m,
        }
    }

    /// Parameter names and shapes in canonical order, with the layer's (fan_in, fan_out).
    fn layout(&self) -> Vec<(String, Vec<usize>, (usize, usize))> {
        let (h, hd) = (self.hidden, self.head_dim());
        let mut v = vec![
            ("embed".to_string(), vec![self.vocab, h], (self.vocab, h)),
            ("visual.w".into(), vec![h, self.d], (self.d, h)),
            ("visual.b".into(), vec![h], (self.d, h)),
            ("context.w".into(), vec![h, h], (h, h)),
            ("context.b".into(), vec![h], (h, h)),
        ];
        if self.variant == AttentionVariant::Pairwise {
            for l in 0..self.heads {
                v.push((format!("token{l}.w"), vec![hd, h], (h, hd)));
                v.push((format!("token{l}.b"), vec![hd], (h, hd)));
            }
        }
        v.push(("fuse.w".into(), vec![h, h], (h, h)));
        v.push(("fuse.b".into(), vec![h], (h, h)));
        v.push(("out.w".into(), vec![self.n_answers, h], (h, self.n_answers)));
        v.push(("out.b".into(), vec![self.n_answers], (h, self.n_answers)));
        v
    }

    /// Half-width of the uniform initialisation for each parameter.
    pub fn init_bounds(&self) -> Vec<(String, f64)> {
        self.layout().into_iter().map(|(n, _, (fi, fo))| (n, (6.0 / (fi + fo) as f64).sqrt())).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor)>,
}

impl Model {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let params = config
            .layout()
            .into_iter()
            .map(|(name, shape, (fi, fo))| {
                let a = (6.0 / (fi + fo) as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
                (name, Tensor::new(shape, data).expect("layout shapes are consistent"))
            })
            .collect();
        Ok(Model { config, params })
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn set_tensors(&mut self, ts: Vec<Tensor>) {
        for ((_, p), t) in self.params.iter_mut().zip(ts) {
            *p = t;
        }
    }

    /// Registers every parameter on `g`, in canonical order.
    pub fn bind(&self, g: &mut Graph) -> Result<Vec<NodeId>> {
        self.params.iter().map(|(n, t)| g.param(n, t.clone())).collect()
    }

    /// Forward pass without gradients, chunked over samples.
    pub fn forward(&self, samples: &[Sample], exec: Exec) -> Result<Vec<SampleOut>> {
        let chunks = exec.map_chunks(samples, INFER_CHUNK, |chunk| {
            let mut g = Graph::new();
            let ids = self.params.iter().map(|(_, t)| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
            let nodes = build_forward(&mut g, &self.config, &ids, chunk)?;
            Ok(nodes.unpack(&g, &self.config, chunk))
        });
        let mut out = Vec::with_capacity(samples.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    /// ReLU activation pattern of the forward pass over `samples`.
    pub fn relu_pattern(&self, samples: &[Sample]) -> Result<Vec<bool>> {
        let mut g = Graph::new();
        let ids = self.params.iter().map(|(_, t)| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
        build_forward(&mut g, &self.config, &ids, samples)?;
        Ok(g.relu_pattern())
    }
}

/// Graph handles produced by `build_forward` for a batch of B samples.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    /// `[B, N]` answer logits.
    pub logits: NodeId,
    /// Per head: `[B, K*C]` pre-softmax attention logits and their masked softmax.
    pub attn_logits: Vec<NodeId>,
    pub attn: Vec<NodeId>,
    /// `[B*K*C]` validity of each attention cell.
    pub mask: Vec<bool>,
    /// `[B, h]` fused joint feature.
    pub fused: NodeId,
}

/// One head's attention for one sample, `rows × cols` row-major (objects × tokens).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadAttention {
    pub rows: usize,
    pub cols: usize,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub mask: Vec<bool>,
}

impl HeadAttention {
    /// Per-object weight: attention summed over tokens.
    pub fn beta(&self) -> Vec<f64> {
        self.probs.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOut {
    pub logits: Vec<f64>,
    pub heads: Vec<HeadAttention>,
    pub fused: Vec<f64>,
}

impl ForwardNodes {
    fn unpack(&self, g: &Graph, cfg: &ModelConfig, batch: &[Sample]) -> Vec<SampleOut> {
        let (n, h, cells) = (cfg.n_answers, cfg.hidden, cfg.k * cfg.attn_cols());
        let (lg, fz) = (g.value(self.logits).data(), g.value(self.fused).data());
        (0..batch.len())
            .map(|b| SampleOut {
                logits: lg[b * n..(b + 1) * n].to_vec(),
                heads: self
                    .attn_logits
                    .iter()
                    .zip(&self.attn)
                    .map(|(&al, &ap)| HeadAttention {
                        rows: cfg.k,
                        cols: cfg.attn_cols(),
                        logits: g.value(al).data()[b * cells..(b + 1) * cells].to_vec(),
                        probs: g.value(ap).data()[b * cells..(b + 1) * cells].to_vec(),
                        mask: self.mask[b * cells..(b + 1) * cells].to_vec(),
                    })
                    .collect(),
                fused: fz[b * h..(b + 1) * h].to_vec(),
            })
            .collect()
    }
}

fn check_batch(cfg: &ModelConfig, batch: &[Sample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    for (i, s) in batch.iter().enumerate() {
        let shape_ok = s.features.len() == cfg.k
            && s.features.iter().all(|r| r.len() == cfg.d)
            && s.tokens.len() == cfg.m
            && s.token_mask.len() == cfg.m;
        if !shape_ok {
            return Err(Error::Contract(format!("sample {i} does not match k={}, m={}, d={}", cfg.k, cfg.m, cfg.d)));
        }
        if s.n_tokens() == 0 {
            return Err(Error::Contract(format!("sample {i} has no unmasked tokens")));
        }
    }
    Ok(())
}

/// Builds the forward graph for `batch`; `ids` are the parameter nodes in canonical order.
pub fn build_forward(g: &mut Graph, cfg: &ModelConfig, ids: &[NodeId], batch: &[Sample]) -> Result<ForwardNodes> {
    check_batch(cfg, batch)?;
    let names: Vec<String> = cfg.layout().into_iter().map(|(n, _, _)| n).collect();
    if names.len() != ids.len() {
        return Err(Error::Contract("parameter count does not match the model layout".into()));
    }
    let p = |name: &str| ids[names.iter().position(|n| n == name).expect("layout name")];
    let (b, k, m, d, h) = (batch.len(), cfg.k, cfg.m, cfg.d, cfg.hidden);

    let feats: Vec<f64> = batch.iter().flat_map(|s| s.features.iter().flatten().copied()).collect();
    let v = g.input(Tensor::new(vec![b * k, d], feats)?)?;
    let u = g.matmul(v, p("visual.w"), true)?;
    let u = g.add_bias(u, p("visual.b"))?;
    let u = g.relu(u)?;
    let u = g.reshape(u, &[b, k, h])?;

    let tokens: Vec<usize> = batch.iter().flat_map(|s| s.tokens.iter().copied()).collect();
    let tmask: Vec<bool> = batch.iter().flat_map(|s| s.token_mask.iter().copied()).collect();
    let e = g.gather(p("embed"), &tokens)?;
    let e3 = g.reshape(e, &[b, m, h])?;
    let ctx = g.masked_mean(e3, &tmask)?;
    let c = g.matmul(ctx, p("context.w"), true)?;
    let c = g.add_bias(c, p("context.b"))?;
    let c = g.relu(c)?;

    let mut attn_logits = Vec::new();
    let mut attn = Vec::new();
    let mut pooled = Vec::new();
    let mask: Vec<bool>;
    match cfg.variant {
        AttentionVariant::Context => {
            let c3 = g.reshape(c, &[b, h, 1])?;
            let a = g.bmm(u, c3, false)?;
            let a = g.scale(a, 1.0 / (h as f64).sqrt())?;
            let a = g.reshape(a, &[b, k])?;
            let probs = g.softmax(a, None)?;
            let beta = g.reshape(probs, &[b, 1, k])?;
            let vh = g.bmm(beta, u, false)?;
            pooled.push(g.reshape(vh, &[b, h])?);
            attn_logits.push(a);
            attn.push(probs);
            mask = vec![true; b * k];
        }
        AttentionVariant::Pairwise => {
            let hd = cfg.head_dim();
            mask = batch
                .iter()
                .flat_map(|s| (0..k).flat_map(move |_| s.token_mask.iter().copied()))
                .collect();
            for l in 0..cfg.heads {
                let et = g.matmul(e, p(&format!("token{l}.w")), true)?;
                let et = g.add_bias(et, p(&format!("token{l}.b")))?;
                let et = g.relu(et)?;
                let et = g.reshape(et, &[b, m, hd])?;
                let ul = g.slice_last(u, l * hd, hd)?;
                let a = g.bmm(ul, et, true)?;
                let a = g.scale(a, 1.0 / (hd as f64).sqrt())?;
                let a = g.reshape(a, &[b, k * m])?;
                let probs = g.softmax(a, Some(&mask))?;
                let cells = g.reshape(probs, &[b, k, m])?;
                let beta = g.sum_last(cells)?;
                let beta = g.reshape(beta, &[b, 1, k])?;
                let vh = g.bmm(beta, ul, false)?;
                pooled.push(g.reshape(vh, &[b, hd])?);
                attn_logits.push(a);
                attn.push(probs);
            }
        }
    }
    let vhat = if pooled.len() == 1 { pooled[0] } else { g.concat_last(&pooled)? };
    let fused = g.mul(vhat, c)?;
    let z = g.matmul(fused, p("fuse.w"), true)?;
    let z = g.add_bias(z, p("fuse.b"))?;
    let z = g.relu(z)?;
    let logits = g.matmul(z, p("out.w"), true)?;
    let logits = g.add_bias(logits, p("out.b"))?;
    Ok(ForwardNodes { logits, attn_logits, attn, mask, fused })
}

/// Writes one row per sample: task label, then the h fused values.
pub fn export_joint_features(model: &Model, samples: &[Sample], path: &Path, exec: Exec) -> Result<()> {
    let outs = model.forward(samples, exec)?;
    let mut text = String::from("task");
    for i in 0..model.config.hidden {
        write!(text, ",z{i}").unwrap();
    }
    text.push('\n');
    for (s, o) in samples.iter().zip(&outs) {
        text.push_str(s.task.name());
        for v in &o.fused {
            write!(text, ",{v:?}").unwrap();
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Provenance stored in a checkpoint header alongside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub config_hash: String,
    /// Full run configuration text the model was trained under.
    pub config_text: String,
}

pub fn write_checkpoint(path: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let c = &model.config;
    let mut text = format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}\n");
    writeln!(text, "seed {}", meta.seed).unwrap();
    writeln!(text, "config-hash {}", meta.config_hash).unwrap();
    writeln!(
        text,
        "model hidden={} heads={} variant={} n_answers={} k={} m={} d={} vocab={} init_seed={}",
        c.hidden,
        c.heads,
        c.variant.name(),
        c.n_answers,
        c.k,
        c.m,
        c.d,
        c.vocab,
        c.init_seed
    )
    .unwrap();
    let cfg_lines: Vec<&str> = meta.config_text.lines().collect();
    writeln!(text, "config {}", cfg_lines.len()).unwrap();
    for l in cfg_lines {
        writeln!(text, "  {l}").unwrap();
    }
    for (name, t) in &model.params {
        let dims: Vec<String> = t.shape().iter().map(|s| s.to_string()).collect();
        writeln!(text, "param {name} {}", dims.join(" ")).unwrap();
        let width = *t.shape().last().unwrap();
        for row in t.data().chunks(width) {
            let vals: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(text, "{}", vals.join(" ")).unwrap();
        }
    }
    text.push_str("end\n");
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> =
        std::io::BufReader::new(file).lines().collect::<std::io::Result<_>>().map_err(|e| Error::io(path, e))?;
    let mut it = lines.iter().enumerate().map(|(i, l)| (i + 1, l.as_str()));
    let perr = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };
    let mut next = |what: &str| it.next().ok_or_else(|| perr(lines.len() + 1, &format!("missing {what}")));

    let (ln, magic) = next("header")?;
    if magic != format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}") {
        return Err(perr(ln, "not a version-1 checkpoint"));
    }
    let field = |(ln, l): (usize, &str), key: &str| -> Result<String> {
        l.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| perr(ln, &format!("expected `{key}`")))
    };
    let (ln, l) = next("seed")?;
    let seed = field((ln, l), "seed")?.parse().map_err(|_| perr(ln, "bad seed"))?;
    let config_hash = field(next("config-hash")?, "config-hash")?;
    let (ln, l) = next("model")?;
    let model_line = field((ln, l), "model")?;
    let mut kv = std::collections::BTreeMap::new();
    for part in model_line.split_whitespace() {
        let (k, v) = part.split_once('=').ok_or_else(|| perr(ln, "bad model field"))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let num = |k: &str| -> Result<u64> {
        kv.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| perr(ln, &format!("bad model field {k}")))
    };
    let variant = match kv.get("variant").map(String::as_str) {
        Some("context") => AttentionVariant::Context,
        Some("pairwise") => AttentionVariant::Pairwise,
        _ => return Err(perr(ln, "bad attention variant")),
    };
    let config = ModelConfig {
        hidden: num("hidden")? as usize,
        heads: num("heads")? as usize,
        variant,
        n_answers: num("n_answers")? as usize,
        k: num("k")? as usize,
        m: num("m")? as usize,
        d: num("d")? as usize,
        vocab: num("vocab")? as usize,
        init_seed: num("init_seed")?,
    };
    config.validate()?;
    let (ln, l) = next("config")?;
    let n_cfg: usize = field((ln, l), "config")?.parse().map_err(|_| perr(ln, "bad config line count"))?;
    let mut config_text = String::new();
    for _ in 0..n_cfg {
        let (ln, l) = next("config line")?;
        let body = l.strip_prefix("  ").ok_or_else(|| perr(ln, "config lines are indented by two spaces"))?;
        config_text.push_str(body);
        config_text.push('\n');
    }
    let mut params = Vec::new();
    for (name, shape, _) in config.layout() {
        let (ln, l) = next("param block")?;
        let expect = format!("param {name} {}", shape.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" "));
        if l != expect {
            return Err(perr(ln, &format!("expected `{expect}`")));
        }
        let width = *shape.last().unwrap();
        let rows = shape.iter().product::<usize>() / width;
        let mut data = Vec::with_capacity(rows * width);
        for _ in 0..rows {
            let (ln, l) = next("parameter row")?;
            let row: Vec<f64> = l
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| perr(ln, "bad number"))?;
            if row.len() != width {
                return Err(perr(ln, "wrong row width"));
            }
            data.extend(row);
        }
        params.push((name, Tensor::new(shape, data)?));
    }
    let (ln, l) = next("end")?;
    if l != "end" {
        return Err(perr(ln, "expected `end`"));
    }
    let model = Model { config, params };
    for (_, t) in &model.params {
        t.check_finite("read_checkpoint")?;
    }
    Ok((model, CheckpointMeta { seed, config_hash, config_text }))
}
