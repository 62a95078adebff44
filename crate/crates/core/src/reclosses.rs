//! Embedding backbone, the three recognition objectives (softmax, additive
//! cosine margin, additive angular margin) and the recognition training loop.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numgrad::{checkpoint, AdamConfig, ParamSet, Tape, Tensor, Var};
use crate::seed;
use crate::synthface::{DomainDataset, Sample, PIXELS};

/// Cosines are clamped into `±COS_CLAMP` before the arc cosine.
pub const COS_CLAMP: f64 = 1.0 - 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LossKind {
    Softmax,
    CosFace,
    ArcFace,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Softmax, LossKind::CosFace, LossKind::ArcFace];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Softmax => "softmax",
            LossKind::CosFace => "cosface",
            LossKind::ArcFace => "arcface",
        }
    }

    fn code(self) -> f64 {
        match self {
            LossKind::Softmax => 0.0,
            LossKind::CosFace => 1.0,
            LossKind::ArcFace => 2.0,
        }
    }

    /// Default `(margin, scale)`.
    pub fn default_margin_scale(self) -> (f64, f64) {
        match self {
            LossKind::Softmax => (0.0, 1.0),
            LossKind::CosFace => (0.35, 16.0),
            LossKind::ArcFace => (0.3, 16.0),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "softmax" => Ok(LossKind::Softmax),
            "cosface" => Ok(LossKind::CosFace),
            "arcface" => Ok(LossKind::ArcFace),
            other => Err(Error::invalid(format!("unknown loss kind `{other}`"))),
        }
    }
}

/// Mean cross-entropy of row-wise logits against integer labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let lse = tape.logsumexp(logits)?;
    let true_logit = tape.pick(logits, labels)?;
    let nll = tape.sub(lse, true_logit)?;
    Ok(tape.mean(nll))
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

fn class_count(tape: &Tape, w: Var) -> Result<usize> {
    tape.value(w)
        .dims2()
        .map(|(n, _)| n)
        .ok_or_else(|| Error::Shape {
            op: "class weights",
            lhs: tape.shape(w).to_vec(),
            rhs: vec![],
        })
}

/// Softmax loss. `z` is `[N, d]`, `w` holds one class vector per row
/// (`[n, d]`) and `b` is `[n]`.
pub fn softmax_loss(tape: &mut Tape, z: Var, w: Var, b: Var, labels: &[usize]) -> Result<Var> {
    check_labels(labels, class_count(tape, w)?)?;
    let wt = tape.transpose(w)?;
    let logits = tape.matmul(z, wt)?;
    let logits = tape.add_row(logits, b)?;
    cross_entropy(tape, logits, labels)
}

/// Cosine matrix `ẑ·Ŵᵀ`, `[N, n]`.
fn cosines(tape: &mut Tape, z: Var, w: Var) -> Result<Var> {
    let zn = tape.l2_normalize(z)?;
    let wn = tape.l2_normalize(w)?;
    let wt = tape.transpose(wn)?;
    tape.matmul(zn, wt)
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len().max(1), classes]);
    for (i, &y) in labels.iter().enumerate() {
        t.data_mut()[i * classes + y] = 1.0;
    }
    Ok(t)
}

fn check_margin_scale(margin: f64, scale: f64, max_margin: f64) -> Result<()> {
    if !(0.0..max_margin).contains(&margin) {
        return Err(Error::invalid(format!("margin {margin} outside [0, {max_margin})")));
    }
    if !(scale > 0.0) {
        return Err(Error::invalid(format!("scale must be positive, got {scale}")));
    }
    Ok(())
}

/// Additive cosine margin: true-class logit `s·(cos θ_y − m)`, others `s·cos θ_j`.
pub fn cosface_loss(tape: &mut Tape, z: Var, w: Var, labels: &[usize], margin: f64, scale: f64) -> Result<Var> {
    check_margin_scale(margin, scale, 1.0)?;
    let n = class_count(tape, w)?;
    check_labels(labels, n)?;
    let cos = cosines(tape, z, w)?;
    let mut penalty = one_hot(labels, n)?;
    penalty.data_mut().iter_mut().for_each(|v| *v *= -margin);
    let penalty = tape.constant(penalty);
    let shifted = tape.add(cos, penalty)?;
    let logits = tape.scale(shifted, scale);
    cross_entropy(tape, logits, labels)
}

/// Additive angular margin: true-class logit `s·cos(θ_y + m)` with
/// `θ_y = arccos(clamp(cos θ_y))` and `θ_y + m` capped at `π`.
pub fn arcface_loss(tape: &mut Tape, z: Var, w: Var, labels: &[usize], margin: f64, scale: f64) -> Result<Var> {
    check_margin_scale(margin, scale, FRAC_PI_2)?;
    let n = class_count(tape, w)?;
    check_labels(labels, n)?;
    let cos = cosines(tape, z, w)?;
    let cos_y = tape.pick(cos, labels)?;
    let clamped = tape.clamp(cos_y, -COS_CLAMP, COS_CLAMP)?;
    let theta = tape.acos(clamped)?;
    let shifted = tape.add_scalar(theta, margin);
    let capped = tape.clamp(shifted, 0.0, PI)?;
    let target = tape.cos(capped);
    let delta = tape.sub(target, cos_y)?;
    let mask = tape.constant(one_hot(labels, n)?);
    let adjust = tape.mul_col(mask, delta)?;
    let adjusted = tape.add(cos, adjust)?;
    let logits = tape.scale(adjusted, scale);
    cross_entropy(tape, logits, labels)
}

/// Dense encoder `PIXELS → hidden → dim` with a rectifier hidden layer and
/// linear output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Backbone {
    pub hidden: usize,
    pub dim: usize,
}

impl Backbone {
    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) -> Result<()> {
        params.insert_normal("bb.w1", &[PIXELS, self.hidden], (2.0 / PIXELS as f64).sqrt(), rng)?;
        params.insert_zeros("bb.b1", &[self.hidden])?;
        params.insert_normal("bb.w2", &[self.hidden, self.dim], (1.0 / self.hidden as f64).sqrt(), rng)?;
        params.insert_zeros("bb.b2", &[self.dim])
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var, trainable: bool) -> Result<Var> {
        let w1 = tape.bind(params, "bb.w1", trainable)?;
        let b1 = tape.bind(params, "bb.b1", trainable)?;
        let w2 = tape.bind(params, "bb.w2", trainable)?;
        let b2 = tape.bind(params, "bb.b2", trainable)?;
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h);
        let z = tape.matmul(h, w2)?;
        tape.add_row(z, b2)
    }
}

/// Class weights plus the margin and scale of the selected objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginHead {
    pub kind: LossKind,
    pub classes: usize,
    pub dim: usize,
    pub margin: f64,
    pub scale: f64,
}

impl MarginHead {
    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) -> Result<()> {
        match self.kind {
            LossKind::Softmax => {
                params.insert_normal("head.w", &[self.classes, self.dim], (1.0 / self.dim as f64).sqrt(), rng)?;
                params.insert_zeros("head.b", &[self.classes])
            }
            _ => params.insert_normal("head.w", &[self.classes, self.dim], 1.0, rng),
        }
    }

    pub fn loss(&self, tape: &mut Tape, params: &ParamSet, z: Var, labels: &[usize], trainable: bool) -> Result<Var> {
        let w = tape.bind(params, "head.w", trainable)?;
        match self.kind {
            LossKind::Softmax => {
                let b = tape.bind(params, "head.b", trainable)?;
                softmax_loss(tape, z, w, b, labels)
            }
            LossKind::CosFace => cosface_loss(tape, z, w, labels, self.margin, self.scale),
            LossKind::ArcFace => arcface_loss(tape, z, w, labels, self.margin, self.scale),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecognitionConfig {
    pub margin: f64,
    pub scale: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl RecognitionConfig {
    pub fn for_kind(kind: LossKind) -> Self {
        let (margin, scale) = kind.default_margin_scale();
        RecognitionConfig {
            margin,
            scale,
            epochs: 20,
            batch: 64,
            lr: 1e-3,
            seed: 0,
            hidden: 64,
            embed_dim: 32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub kind: LossKind,
    pub backbone: Backbone,
    pub head: MarginHead,
    pub params: ParamSet,
    /// Mini-batch loss per optimizer step.
    pub trace: Vec<f64>,
    pub config: RecognitionConfig,
    pub dataset_fingerprint: String,
    /// Subject id of each class index.
    pub classes: Vec<u64>,
}

/// Raw (unnormalized) embeddings, `[samples, dim]`.
pub fn embed(samples: &[&Sample], backbone: &Backbone, params: &ParamSet) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to embed"));
    }
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.pixels.as_slice()).collect();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&rows)?);
    let z = backbone.forward(&mut tape, params, x, false)?;
    Ok(tape.value(z).clone())
}

impl TrainingRun {
    pub fn embed(&self, samples: &[&Sample]) -> Result<Tensor> {
        embed(samples, &self.backbone, &self.params)
    }

    pub fn file_stem(&self) -> String {
        format!("run_{}_{}", self.kind, self.config.seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let c = &self.config;
        let meta = vec![
            self.kind.code(),
            self.head.classes as f64,
            self.backbone.hidden as f64,
            self.backbone.dim as f64,
            c.margin,
            c.scale,
            c.epochs as f64,
            c.batch as f64,
            c.lr,
            c.seed as f64,
        ];
        let mut entries = self.params.entries();
        entries.push(("meta".into(), Tensor::vector(meta)?));
        entries.push((
            "classes".into(),
            Tensor::vector(self.classes.iter().map(|&c| c as f64).collect())?,
        ));
        entries.push(("trace".into(), Tensor::vector(self.trace.clone())?));
        checkpoint::save(path, &entries)
    }

    pub fn load(path: &Path, dataset_fingerprint: &str) -> Result<Self> {
        let mut entries = checkpoint::load(path)?;
        let mut take = |name: &str| -> Result<Vec<f64>> {
            let pos = entries
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("{}: missing `{name}`", path.display())))?;
            Ok(entries.remove(pos).1.into_data())
        };
        let meta = take("meta")?;
        let classes = take("classes")?;
        let trace = take("trace")?;
        if meta.len() != 10 {
            return Err(Error::Format("recognizer meta has wrong length".into()));
        }
        let kind = match meta[0] as u8 {
            0 => LossKind::Softmax,
            1 => LossKind::CosFace,
            2 => LossKind::ArcFace,
            k => return Err(Error::Format(format!("unknown loss code {k}"))),
        };
        let config = RecognitionConfig {
            margin: meta[4],
            scale: meta[5],
            epochs: meta[6] as usize,
            batch: meta[7] as usize,
            lr: meta[8],
            seed: meta[9] as u64,
            hidden: meta[2] as usize,
            embed_dim: meta[3] as usize,
        };
        Ok(TrainingRun {
            kind,
            backbone: Backbone {
                hidden: config.hidden,
                dim: config.embed_dim,
            },
            head: MarginHead {
                kind,
                classes: meta[1] as usize,
                dim: config.embed_dim,
                margin: config.margin,
                scale: config.scale,
            },
            params: ParamSet::from_entries(entries)?,
            trace,
            config,
            dataset_fingerprint: dataset_fingerprint.to_string(),
            classes: classes.into_iter().map(|c| c as u64).collect(),
        })
    }
}

/// Trains backbone and head with the selected objective over shuffled
/// mini-batches. Classes are subject identities; translated samples count
/// toward their source subject.
pub fn train_recognizer(dataset: &DomainDataset, kind: LossKind, cfg: &RecognitionConfig) -> Result<TrainingRun> {
    if cfg.batch == 0 || cfg.embed_dim == 0 || cfg.hidden == 0 {
        return Err(Error::invalid("batch, hidden and embed_dim must be positive"));
    }
    let counts = dataset.subject_image_counts();
    if let Some((&id, &n)) = counts.iter().find(|(_, &n)| n < 2) {
        return Err(Error::Insufficient {
            what: format!("images of subject {id}"),
            required: 2,
            available: n,
        });
    }
    if counts.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let classes: Vec<u64> = counts.keys().copied().collect();
    let class_of: BTreeMap<u64, usize> = classes.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let labels: Vec<usize> = dataset.samples.iter().map(|s| class_of[&s.subject_id]).collect();

    let backbone = Backbone {
        hidden: cfg.hidden,
        dim: cfg.embed_dim,
    };
    let head = MarginHead {
        kind,
        classes: classes.len(),
        dim: cfg.embed_dim,
        margin: cfg.margin,
        scale: cfg.scale,
    };
    let mut params = ParamSet::new();
    let mut rng = seed::rng(&[cfg.seed, seed::tag("recognizer-init")]);
    backbone.init(&mut params, &mut rng)?;
    head.init(&mut params, &mut rng)?;

    let adam = AdamConfig::recognition(cfg.lr);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut shuffle_rng = seed::rng(&[cfg.seed, seed::tag("recognizer-shuffle")]);
    let mut trace = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch) {
            let rows: Vec<&[f64]> = chunk.iter().map(|&i| dataset.samples[i].pixels.as_slice()).collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_rows(&rows)?);
            let z = backbone.forward(&mut tape, &params, x, true)?;
            let loss = head.loss(&mut tape, &params, z, &y, true)?;
            tape.backward(loss, &mut params)?;
            params.adam_step(&adam)?;
            params.zero_grad();
            trace.push(tape.item(loss));
        }
    }
    Ok(TrainingRun {
        kind,
        backbone,
        head,
        params,
        trace,
        config: cfg.clone(),
        dataset_fingerprint: dataset.fingerprint(),
        classes,
    })
}
