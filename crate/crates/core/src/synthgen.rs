//! Synthetic scene/question generator: in-distribution data plus the five
//! anomaly tasks, each with disjoint TRAIN and EVAL families.

use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::exec::Exec;

pub const PAD: &str = "<pad>";
/// Tokens that mark a sentence as a question.
pub const INTERROGATIVES: [&str; 2] = ["what", "there"];
const FUNCTION_WORDS: [&str; 13] =
    ["what", "color", "shape", "is", "the", "object", "there", "a", "near", "beside", "here", "capital", "of"];
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeldOut {
    pub name: String,
    /// Colors whose features are mixed in equal parts.
    pub mix: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub shapes: Vec<String>,
    pub colors: Vec<String>,
    pub k: usize,
    pub m: usize,
    pub noise_sigma: f64,
    /// Feature columns after the attribute one-hots that in-distribution scenes never use.
    pub novel_dims: usize,
    pub held_out: Vec<HeldOut>,
    pub fillers: Vec<String>,
    pub ood_words: Vec<String>,
    pub t1_train_range: [f64; 2],
    pub t1_eval_shift: f64,
    pub t1_eval_sd: f64,
    pub t4_train_shapes: Vec<String>,
    pub t4_eval_shapes: Vec<String>,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            shapes: strings(&["circle", "square", "triangle", "star", "heart", "cross"]),
            colors: strings(&["red", "green", "blue", "yellow", "white", "black"]),
            k: 6,
            m: 8,
            noise_sigma: 0.1,
            novel_dims: 2,
            held_out: vec![
                HeldOut { name: "purple".into(), mix: strings(&["red", "blue"]) },
                HeldOut { name: "orange".into(), mix: strings(&["red", "yellow"]) },
            ],
            fillers: (0..8).map(|i| format!("filler{i}")).collect(),
            ood_words: (0..8).map(|i| format!("ood{i}")).collect(),
            t1_train_range: [0.0, 1.0],
            t1_eval_shift: 0.3,
            t1_eval_sd: 0.3,
            t4_train_shapes: strings(&["circle", "square", "triangle"]),
            t4_eval_shapes: strings(&["star", "heart", "cross"]),
        }
    }
}

impl WorldSpec {
    /// The large-scale preset: 36 objects, 14 tokens.
    pub fn paper_scale() -> Self {
        WorldSpec { k: 36, m: 14, ..Self::default() }
    }

    pub fn d(&self) -> usize {
        self.shapes.len() + self.colors.len() + self.novel_dims
    }

    pub fn vocab(&self) -> Vec<String> {
        let mut v = vec![PAD.to_string()];
        v.extend(strings(&FUNCTION_WORDS));
        v.extend(self.shapes.iter().cloned());
        v.extend(self.colors.iter().cloned());
        v.extend(self.fillers.iter().cloned());
        v.extend(self.ood_words.iter().cloned());
        v
    }

    pub fn candidates(&self) -> Vec<String> {
        let mut c: Vec<String> = self.colors.clone();
        c.extend(self.shapes.iter().cloned());
        c.push("yes".into());
        c.push("no".into());
        c
    }

    pub fn held_out_answers(&self) -> Vec<String> {
        self.held_out.iter().map(|h| h.name.clone()).collect()
    }

    pub fn token_id(&self, word: &str) -> Option<usize> {
        self.vocab().iter().position(|w| w == word)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.shapes.len() < 2 || self.colors.len() < 2 {
            return cfg("need at least two shapes and two colors".into());
        }
        if self.k < 1 || self.m < 1 {
            return cfg("k and m must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return cfg("noise_sigma must be nonnegative".into());
        }
        let vocab = self.vocab();
        let mut sorted = vocab.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != vocab.len() {
            return cfg("vocabulary words must be distinct".into());
        }
        let cands = self.candidates();
        for h in &self.held_out {
            if cands.contains(&h.name) {
                return cfg(format!("held-out answer {} is also a candidate", h.name));
            }
            if h.mix.len() < 2 || h.mix.iter().any(|c| !self.colors.contains(c)) {
                return cfg(format!("held-out answer {} must mix at least two known colors", h.name));
            }
        }
        for s in self.t4_train_shapes.iter().chain(&self.t4_eval_shapes) {
            if !self.shapes.contains(s) {
                return cfg(format!("false-premise pool names unknown shape {s}"));
            }
        }
        if self.t4_train_shapes.iter().any(|s| self.t4_eval_shapes.contains(s)) {
            return cfg("false-premise TRAIN and EVAL pools overlap".into());
        }
        if !(self.t1_train_range[0] < self.t1_train_range[1]) || !(self.t1_eval_sd >= 0.0) {
            return cfg("invalid OOD feature parameters".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "ID")]
    Id,
    T1,
    T2,
    T3,
    T4,
    T5,
}

impl Task {
    pub const ANOMALIES: [Task; 5] = [Task::T1, Task::T2, Task::T3, Task::T4, Task::T5];

    pub fn name(self) -> &'static str {
        match self {
            Task::Id => "ID",
            Task::T1 => "T1",
            Task::T2 => "T2",
            Task::T3 => "T3",
            Task::T4 => "T4",
            Task::T5 => "T5",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        [Task::Id, Task::T1, Task::T2, Task::T3, Task::T4, Task::T5].into_iter().find(|t| t.name() == s)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Anomaly generator configuration. `EvalAlt` is the second evaluation family:
/// out-of-vocabulary statements for T2 and non-visual questions for T4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "TRAIN")]
    Train,
    #[serde(rename = "EVAL")]
    Eval,
    #[serde(rename = "EVAL_ALT")]
    EvalAlt,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Train => "TRAIN",
            Family::Eval => "EVAL",
            Family::EvalAlt => "EVAL_ALT",
        }
    }

    pub fn parse(s: &str) -> Option<Family> {
        [Family::Train, Family::Eval, Family::EvalAlt].into_iter().find(|f| f.name() == s)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Answer {
    Id(usize),
    Undefined,
}

impl Answer {
    pub fn id(self) -> Option<usize> {
        match self {
            Answer::Id(i) => Some(i),
            Answer::Undefined => None,
        }
    }
}

impl Serialize for Answer {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Answer::Id(i) => s.serialize_u64(*i as u64),
            Answer::Undefined => s.serialize_str("UNDEFINED"),
        }
    }
}

impl<'de> Deserialize<'de> for Answer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Id(usize),
            Tag(String),
        }
        match Raw::deserialize(d)? {
            Raw::Id(i) => Ok(Answer::Id(i)),
            Raw::Tag(t) if t == "UNDEFINED" => Ok(Answer::Undefined),
            Raw::Tag(t) => Err(serde::de::Error::custom(format!("unknown answer tag {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub features: Vec<Vec<f64>>,
    pub tokens: Vec<usize>,
    pub token_mask: Vec<bool>,
    pub answer: Answer,
    pub task: Task,
    pub family: Family,
    pub seed_index: u64,
    /// Held-out answer name for undefined-answer samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
}

impl Sample {
    pub fn is_anomaly(&self) -> bool {
        self.task != Task::Id
    }

    pub fn n_tokens(&self) -> usize {
        self.token_mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorAttr {
    Pure(usize),
    /// Index into `WorldSpec::held_out`.
    Blend(usize),
}

/// Symbolic content of a scene whose features were rendered from attributes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub shapes: Vec<usize>,
    pub colors: Vec<ColorAttr>,
}

impl Scene {
    fn count_shape(&self, s: usize) -> usize {
        self.shapes.iter().filter(|&&x| x == s).count()
    }

    fn count_color(&self, c: ColorAttr) -> usize {
        self.colors.iter().filter(|&&x| x == c).count()
    }
}

/// A generated sample together with the scene its features were rendered from
/// (absent when the features are out-of-distribution noise).
#[derive(Debug, Clone)]
pub struct Annotated {
    pub sample: Sample,
    pub scene: Option<Scene>,
}

struct Ctx<'a> {
    spec: &'a WorldSpec,
    vocab: Vec<String>,
    cands: Vec<String>,
}

impl<'a> Ctx<'a> {
    fn new(spec: &'a WorldSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Ctx { spec, vocab: spec.vocab(), cands: spec.candidates() })
    }

    fn shape(&self, s: usize) -> &str {
        &self.spec.shapes[s]
    }

    fn color(&self, c: usize) -> &str {
        &self.spec.colors[c]
    }

    fn encode(&self, words: &[&str]) -> Result<(Vec<usize>, Vec<bool>)> {
        let m = self.spec.m;
        if words.len() > m {
            return Err(Error::Generation(format!("{}-token sentence exceeds m = {m}", words.len())));
        }
        let mut ids = Vec::with_capacity(m);
        for w in words {
            let id = self.vocab.iter().position(|v| v == w).expect("template words are in the vocabulary");
            ids.push(id);
        }
        let mut mask = vec![true; ids.len()];
        ids.resize(m, 0);
        mask.resize(m, false);
        Ok((ids, mask))
    }

    fn answer(&self, name: &str) -> Answer {
        Answer::Id(self.cands.iter().position(|c| c == name).expect("answer is a candidate"))
    }

    fn random_scene(&self, rng: &mut ChaCha8Rng) -> Scene {
        let k = self.spec.k;
        Scene {
            shapes: (0..k).map(|_| rng.random_range(0..self.spec.shapes.len())).collect(),
            colors: (0..k).map(|_| ColorAttr::Pure(rng.random_range(0..self.spec.colors.len()))).collect(),
        }
    }

    fn noise(&self, rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> Vec<Vec<f64>> {
        let normal = Normal::new(mean, sd).expect("validated sd");
        (0..self.spec.k).map(|_| (0..self.spec.d()).map(|_| normal.sample(rng)).collect()).collect()
    }

    fn render(&self, scene: &Scene, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let ns = self.spec.shapes.len();
        let mut f = self.noise(rng, 0.0, self.spec.noise_sigma);
        for (i, row) in f.iter_mut().enumerate() {
            row[scene.shapes[i]] += 1.0;
            match scene.colors[i] {
                ColorAttr::Pure(c) => row[ns + c] += 1.0,
                ColorAttr::Blend(h) => {
                    let mix = &self.spec.held_out[h].mix;
                    for name in mix {
                        let c = self.spec.colors.iter().position(|x| x == name).unwrap();
                        row[ns + c] += 1.0 / mix.len() as f64;
                    }
                }
            }
        }
        f
    }

    fn ood_features(&self, family: Family, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        let (k, d) = (self.spec.k, self.spec.d());
        match family {
            Family::Train => {
                let [lo, hi] = self.spec.t1_train_range;
                Ok((0..k).map(|_| (0..d).map(|_| rng.random_range(lo..hi)).collect()).collect())
            }
            Family::Eval => {
                if self.spec.novel_dims == 0 {
                    return Err(Error::Generation("EVAL image anomalies need novel_dims >= 1".into()));
                }
                let start = self.spec.shapes.len() + self.spec.colors.len();
                let mut f = self.noise(rng, self.spec.t1_eval_shift, self.spec.t1_eval_sd);
                for row in &mut f {
                    for v in &mut row[start..] {
                        *v += 1.0;
                    }
                }
                Ok(f)
            }
            Family::EvalAlt => Err(Error::Generation("image anomalies have no EVAL_ALT family".into())),
        }
    }

    /// One of the three ID templates (`kind` 0..4: color, shape, yes, no), with
    /// every referenced attribute unique in the scene.
    fn id_question(&self, scene: &Scene, kind: u32, rng: &mut ChaCha8Rng) -> Option<(Vec<String>, String)> {
        let k = scene.shapes.len();
        let unique_shape: Vec<usize> = (0..k).filter(|&i| scene.count_shape(scene.shapes[i]) == 1).collect();
        let unique_color: Vec<usize> = (0..k)
            .filter(|&i| matches!(scene.colors[i], ColorAttr::Pure(_)) && scene.count_color(scene.colors[i]) == 1)
            .collect();
        let pure = |i: usize| match scene.colors[i] {
            ColorAttr::Pure(c) => c,
            ColorAttr::Blend(_) => unreachable!(),
        };
        let w = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        match kind {
            0 => {
                let i = *unique_shape.choose(rng)?;
                let ColorAttr::Pure(c) = scene.colors[i] else { return None };
                Some((w(&["what", "color", "is", "the", self.shape(scene.shapes[i])]), self.color(c).into()))
            }
            1 => {
                let i = *unique_color.choose(rng)?;
                Some((
                    w(&["what", "shape", "is", "the", self.color(pure(i)), "object"]),
                    self.shape(scene.shapes[i]).into(),
                ))
            }
            _ => {
                let i = *unique_shape.choose(rng)?;
                let s = self.shape(scene.shapes[i]);
                if kind == 2 {
                    return unique_color
                        .contains(&i)
                        .then(|| (w(&["is", "there", "a", self.color(pure(i)), s]), "yes".into()));
                }
                let others: Vec<usize> = unique_color.iter().copied().filter(|&j| j != i).collect();
                let j = *others.choose(rng)?;
                Some((w(&["is", "there", "a", self.color(pure(j)), s]), "no".into()))
            }
        }
    }

    fn statement(&self, family: Family, rng: &mut ChaCha8Rng) -> Result<Vec<String>> {
        let sp = self.spec;
        let mut c = || sp.colors.choose(rng).unwrap().clone();
        let (c1, c2) = (c(), c());
        let s1 = sp.shapes.choose(rng).unwrap().clone();
        let s2 = sp.shapes.choose(rng).unwrap().clone();
        let w = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        Ok(match family {
            Family::Train => {
                if rng.random_bool(0.5) {
                    w(&["the", &c1, &s1, "is", "here"])
                } else {
                    w(&["a", &s1, "is", "beside", "a", &c2, "object"])
                }
            }
            Family::Eval => w(&["the", &c1, &s1, "is", "near", "the", &c2, &s2]),
            Family::EvalAlt => {
                if sp.ood_words.is_empty() {
                    return Err(Error::Generation("EVAL_ALT statements need ood_words".into()));
                }
                let mut o = || sp.ood_words.choose(rng).unwrap().clone();
                let (a, b, c, d) = (o(), o(), o(), o());
                w(&["the", &a, &b, "is", "near", "the", &c, &d])
            }
        })
    }

    fn generate(&self, task: Task, family: Family, seed: u64, index: u64) -> Result<Annotated> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        // Drawn once so that rejected scenes do not skew the template mix.
        // A "no" answer needs a second object.
        let kinds: &[u32] = if self.spec.k > 1 { &[0, 0, 1, 1, 2, 3] } else { &[0, 1, 2] };
        let kind = *kinds.choose(&mut rng).unwrap();
        for _ in 0..MAX_ATTEMPTS {
            if let Some(a) = self.attempt(task, family, index, kind, &mut rng)? {
                return Ok(a);
            }
        }
        Err(Error::Generation(format!(
            "could not satisfy attribute uniqueness for {task} after {MAX_ATTEMPTS} scenes; vocabulary too small for k = {}",
            self.spec.k
        )))
    }

    fn attempt(
        &self,
        task: Task,
        family: Family,
        index: u64,
        kind: u32,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<Annotated>> {
        let mut scene = self.random_scene(rng);
        let mut ground_truth = None;
        let (words, answer, features, scene_out): (Vec<String>, Answer, Vec<Vec<f64>>, Option<Scene>) = match task {
            Task::Id => {
                let Some((w, a)) = self.id_question(&scene, kind, rng) else { return Ok(None) };
                let f = self.render(&scene, rng);
                (w, self.answer(&a), f, Some(scene))
            }
            Task::T1 => {
                let Some((w, _)) = self.id_question(&scene, kind, rng) else { return Ok(None) };
                (w, Answer::Undefined, self.ood_features(family, rng)?, None)
            }
            Task::T2 => {
                let w = self.statement(family, rng)?;
                let f = self.render(&scene, rng);
                (w, Answer::Undefined, f, Some(scene))
            }
            Task::T3 => {
                if family == Family::EvalAlt {
                    return Err(Error::Generation("T3 has no EVAL_ALT family".into()));
                }
                let f = self.ood_features(family, rng)?;
                (self.statement(family, rng)?, Answer::Undefined, f, None)
            }
            Task::T4 => {
                let w = if family == Family::EvalAlt {
                    let filler = self
                        .spec
                        .fillers
                        .choose(rng)
                        .ok_or_else(|| Error::Generation("non-visual questions need fillers".into()))?;
                    ["what", "is", "the", "capital", "of", filler.as_str()].iter().map(|s| s.to_string()).collect()
                } else {
                    let pool =
                        if family == Family::Train { &self.spec.t4_train_shapes } else { &self.spec.t4_eval_shapes };
                    if pool.is_empty() {
                        return Err(Error::Generation(format!("false-premise pool for {family} is empty")));
                    }
                    let absent: Vec<&String> = pool
                        .iter()
                        .filter(|s| !scene.shapes.iter().any(|&x| self.spec.shapes[x] == **s))
                        .collect();
                    let Some(s) = absent.choose(rng) else { return Ok(None) };
                    if rng.random_bool(0.5) {
                        ["what", "color", "is", "the", s.as_str()].iter().map(|x| x.to_string()).collect()
                    } else {
                        let k = scene.shapes.len();
                        let uc: Vec<usize> = (0..k).filter(|&i| scene.count_color(scene.colors[i]) == 1).collect();
                        let Some(&i) = uc.choose(rng) else { return Ok(None) };
                        let ColorAttr::Pure(c) = scene.colors[i] else { unreachable!() };
                        ["is", "there", "a", self.color(c), s.as_str()].iter().map(|x| x.to_string()).collect()
                    }
                };
                let f = self.render(&scene, rng);
                (w, Answer::Undefined, f, Some(scene))
            }
            Task::T5 => {
                if self.spec.held_out.is_empty() {
                    return Err(Error::Generation("undefined-answer samples need held-out answers".into()));
                }
                if family == Family::EvalAlt {
                    return Err(Error::Generation("T5 has no EVAL_ALT family".into()));
                }
                let k = scene.shapes.len();
                let us: Vec<usize> = (0..k).filter(|&i| scene.count_shape(scene.shapes[i]) == 1).collect();
                let Some(&i) = us.choose(rng) else { return Ok(None) };
                let h = rng.random_range(0..self.spec.held_out.len());
                scene.colors[i] = ColorAttr::Blend(h);
                ground_truth = Some(self.spec.held_out[h].name.clone());
                let w = ["what", "color", "is", "the", self.shape(scene.shapes[i])].iter().map(|x| x.to_string()).collect();
                let f = self.render(&scene, rng);
                (w, Answer::Undefined, f, Some(scene))
            }
        };
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let (tokens, token_mask) = self.encode(&refs)?;
        let family = if task == Task::Id { Family::Train } else { family };
        Ok(Some(Annotated {
            sample: Sample { features, tokens, token_mask, answer, task, family, seed_index: index, ground_truth },
            scene: scene_out,
        }))
    }
}

/// Samples of `task`/`family` with their source scenes. Record `i` depends only
/// on `(seed, i)`, so records can be produced in parallel.
pub fn gen_annotated(
    spec: &WorldSpec,
    task: Task,
    family: Family,
    n: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<Annotated>> {
    if n == 0 {
        return Err(Error::Generation("requested zero samples".into()));
    }
    let ctx = Ctx::new(spec)?;
    exec.map_indexed(n, |i| ctx.generate(task, family, seed, i as u64)).into_iter().collect()
}

pub fn gen_id(spec: &WorldSpec, n: usize, seed: u64, exec: Exec) -> Result<Vec<Sample>> {
    Ok(gen_annotated(spec, Task::Id, Family::Train, n, seed, exec)?.into_iter().map(|a| a.sample).collect())
}

pub fn gen_anomaly(spec: &WorldSpec, task: Task, family: Family, n: usize, seed: u64, exec: Exec) -> Result<Vec<Sample>> {
    if task == Task::Id {
        return Err(Error::Generation("gen_anomaly called with the ID task".into()));
    }
    Ok(gen_annotated(spec, task, family, n, seed, exec)?.into_iter().map(|a| a.sample).collect())
}

/// Deterministic shuffled partition. Part sizes follow the rounded cumulative fractions.
pub fn split<T: Clone>(data: &[T], fractions: &[f64], seed: u64) -> Result<Vec<Vec<T>>> {
    if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::Generation("split fractions must be positive".into()));
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Generation("split fractions must sum to 1".into()));
    }
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut cum = 0.0;
    let mut start = 0;
    let mut parts = Vec::with_capacity(fractions.len());
    for (i, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if i + 1 == fractions.len() { n } else { ((n as f64) * cum).round() as usize };
        if end <= start {
            return Err(Error::Generation(format!("partition {i} would be empty for {n} records")));
        }
        parts.push(order[start..end].iter().map(|&j| data[j].clone()).collect());
        start = end;
    }
    Ok(parts)
}

/// `<split>_<task>_<family>.jsonl`
pub fn dataset_file_name(split: &str, task: Task, family: Family) -> String {
    format!("{split}_{task}_{family}.jsonl")
}

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(s).expect("samples serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s = serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        out.push(s);
    }
    Ok(out)
}
