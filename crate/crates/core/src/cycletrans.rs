//! Cycle-consistent adversarial translation between group domains.
//!
//! Every unordered pair of groups owns one [`TranslatorPair`]: a generator
//! `G` (source → target), a generator `F` (target → source) and one
//! discriminator per domain. Four groups give six pairs and twelve directed
//! mappings, collected in a [`MappingRegistry`].

use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numgrad::{checkpoint, AdamConfig, ParamSet, Tape, Tensor, Var};
use crate::seed;
use crate::synthface::{DomainDataset, GroupLabel, Provenance, Sample, PIXELS};

/// Discriminator outputs are clamped into `[D_EPS, 1 - D_EPS]` before logs.
pub const D_EPS: f64 = 1e-7;
/// Standard deviation of the generator's residual output weights at init.
pub const GENERATOR_RESIDUAL_INIT: f64 = 0.05;
/// Pixels are clamped into `[PIXEL_EPS, 1 - PIXEL_EPS]` before taking logits.
const PIXEL_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdversarialForm {
    /// Cross-entropy form with log terms.
    Log,
    /// Squared-error form.
    LeastSquares,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TranslatorConfig {
    /// Weight of the cycle-consistency term.
    pub lambda: f64,
    pub form: AdversarialForm,
    /// Generators maximize `log D(G(x))` instead of minimizing `log(1 - D(G(x)))`.
    pub non_saturating: bool,
    pub generator_hidden: usize,
    pub discriminator_hidden: usize,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        TranslatorConfig {
            lambda: 10.0,
            form: AdversarialForm::Log,
            non_saturating: false,
            generator_hidden: 64,
            discriminator_hidden: 32,
        }
    }
}

/// A batch of images, `[rows, PIXELS]`, every pixel in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch(Tensor);

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let rows: Vec<&[f64]> = samples.iter().map(|s| s.pixels.as_slice()).collect();
        Self::from_tensor(Tensor::from_rows(&rows)?)
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        match t.dims2() {
            Some((_, cols)) if cols == PIXELS => {}
            _ => {
                return Err(Error::Shape {
                    op: "batch",
                    lhs: t.shape().to_vec(),
                    rhs: vec![PIXELS],
                })
            }
        }
        if t.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::domain("batch", "pixels outside [0, 1]"));
        }
        Ok(Batch(t))
    }

    pub fn rows(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Images on a tape. `logits` carries the pre-activation of a generator
/// output so chained generators need not invert the logistic function.
#[derive(Clone, Copy, Debug)]
pub struct Images {
    pub pixels: Var,
    pub logits: Option<Var>,
}

impl Images {
    pub fn new(pixels: Var) -> Self {
        Images { pixels, logits: None }
    }
}

/// An image-to-image map recorded on a tape.
pub trait ImageMap {
    fn apply(&self, tape: &mut Tape, x: Images) -> Result<Images>;
}

/// A discriminator: per-image probability of being a real target-domain image, `[rows, 1]`.
pub trait Critic {
    fn score(&self, tape: &mut Tape, x: Var) -> Result<Var>;
}

/// `x ↦ x`.
pub struct IdentityMap;

impl ImageMap for IdentityMap {
    fn apply(&self, _tape: &mut Tape, x: Images) -> Result<Images> {
        Ok(x)
    }
}

/// `x ↦ x + c` without clamping.
pub struct ShiftMap(pub f64);

impl ImageMap for ShiftMap {
    fn apply(&self, tape: &mut Tape, x: Images) -> Result<Images> {
        Ok(Images::new(tape.add_scalar(x.pixels, self.0)))
    }
}

/// Outputs the same probability for every image.
pub struct ConstantCritic(pub f64);

impl Critic for ConstantCritic {
    fn score(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let rows = tape.shape(x)[0];
        Ok(tape.constant(Tensor::filled(&[rows, 1], self.0)))
    }
}

fn logit(tape: &mut Tape, p: Var) -> Result<Var> {
    let c = tape.clamp(p, PIXEL_EPS, 1.0 - PIXEL_EPS)?;
    let num = tape.ln(c)?;
    let one_minus = tape.rsub_scalar(1.0, c);
    let den = tape.ln(one_minus)?;
    tape.sub(num, den)
}

/// Dense generator `PIXELS → hidden → PIXELS` with hyperbolic-tangent hidden
/// units and a logistic output. The output pre-activation also carries a
/// per-pixel gain on the input's logit, initialized to one, and the
/// residual branch starts small, so a freshly built generator is close to
/// the identity map.
#[derive(Clone, Debug)]
pub struct Generator {
    prefix: String,
}

impl Generator {
    fn name(&self, p: &str) -> String {
        format!("{}{}", self.prefix, p)
    }

    fn init(&self, params: &mut ParamSet, hidden: usize, rng: &mut impl Rng) -> Result<()> {
        params.insert_normal(&self.name("w1"), &[PIXELS, hidden], 1.0 / (PIXELS as f64).sqrt(), rng)?;
        params.insert_zeros(&self.name("b1"), &[hidden])?;
        params.insert_normal(&self.name("w2"), &[hidden, PIXELS], GENERATOR_RESIDUAL_INIT, rng)?;
        params.insert_zeros(&self.name("b2"), &[PIXELS])?;
        params.insert(&self.name("skip"), Tensor::filled(&[PIXELS], 1.0))
    }

    pub fn view<'a>(&'a self, params: &'a ParamSet, trainable: bool) -> GeneratorView<'a> {
        GeneratorView {
            net: self,
            params,
            trainable,
        }
    }
}

pub struct GeneratorView<'a> {
    net: &'a Generator,
    params: &'a ParamSet,
    trainable: bool,
}

impl ImageMap for GeneratorView<'_> {
    fn apply(&self, tape: &mut Tape, x: Images) -> Result<Images> {
        let bind = |tape: &mut Tape, p: &str| tape.bind(self.params, &self.net.name(p), self.trainable);
        let w1 = bind(tape, "w1")?;
        let b1 = bind(tape, "b1")?;
        let w2 = bind(tape, "w2")?;
        let b2 = bind(tape, "b2")?;
        let skip = bind(tape, "skip")?;

        let h = tape.matmul(x.pixels, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.tanh(h);
        let r = tape.matmul(h, w2)?;
        let r = tape.add_row(r, b2)?;
        let xl = match x.logits {
            Some(l) => l,
            None => logit(tape, x.pixels)?,
        };
        let carried = tape.mul_row(xl, skip)?;
        let logits = tape.add(carried, r)?;
        Ok(Images {
            pixels: tape.sigmoid(logits),
            logits: Some(logits),
        })
    }
}

/// Dense discriminator `PIXELS → hidden → 1` with a logistic output.
#[derive(Clone, Debug)]
pub struct Discriminator {
    prefix: String,
}

impl Discriminator {
    fn name(&self, p: &str) -> String {
        format!("{}{}", self.prefix, p)
    }

    fn init(&self, params: &mut ParamSet, hidden: usize, rng: &mut impl Rng) -> Result<()> {
        params.insert_normal(&self.name("w1"), &[PIXELS, hidden], 1.0 / (PIXELS as f64).sqrt(), rng)?;
        params.insert_zeros(&self.name("b1"), &[hidden])?;
        params.insert_normal(&self.name("w2"), &[hidden, 1], 1.0 / (hidden as f64).sqrt(), rng)?;
        params.insert_zeros(&self.name("b2"), &[1])
    }

    pub fn view<'a>(&'a self, params: &'a ParamSet, trainable: bool) -> DiscriminatorView<'a> {
        DiscriminatorView {
            net: self,
            params,
            trainable,
        }
    }
}

pub struct DiscriminatorView<'a> {
    net: &'a Discriminator,
    params: &'a ParamSet,
    trainable: bool,
}

impl Critic for DiscriminatorView<'_> {
    fn score(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let bind = |tape: &mut Tape, p: &str| tape.bind(self.params, &self.net.name(p), self.trainable);
        let w1 = bind(tape, "w1")?;
        let b1 = bind(tape, "b1")?;
        let w2 = bind(tape, "w2")?;
        let b2 = bind(tape, "b2")?;
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.tanh(h);
        let o = tape.matmul(h, w2)?;
        let o = tape.add_row(o, b2)?;
        Ok(tape.sigmoid(o))
    }
}

/// `E[log D(real)] + E[log(1 - D(fake))]` (or the squared-error analogue,
/// `-E[(D(real) - 1)²] - E[D(fake)²]`). The discriminator ascends this value.
fn adversarial_value(tape: &mut Tape, d: &dyn Critic, real: Var, fake: Var, form: AdversarialForm) -> Result<Var> {
    let dr = d.score(tape, real)?;
    let df = d.score(tape, fake)?;
    match form {
        AdversarialForm::Log => {
            let dr = tape.clamp(dr, D_EPS, 1.0 - D_EPS)?;
            let df = tape.clamp(df, D_EPS, 1.0 - D_EPS)?;
            let lr = tape.ln(dr)?;
            let real_term = tape.mean(lr);
            let one_minus = tape.rsub_scalar(1.0, df);
            let lf = tape.ln(one_minus)?;
            let fake_term = tape.mean(lf);
            tape.add(real_term, fake_term)
        }
        AdversarialForm::LeastSquares => {
            let off = tape.add_scalar(dr, -1.0);
            let sq = tape.mul(off, off)?;
            let real_term = tape.mean(sq);
            let sq = tape.mul(df, df)?;
            let fake_term = tape.mean(sq);
            let s = tape.add(real_term, fake_term)?;
            Ok(tape.neg(s))
        }
    }
}

/// The generator's share of the adversarial objective under the
/// non-saturating option: `-E[log D(fake)]` or `E[(D(fake) - 1)²]`.
fn non_saturating_term(tape: &mut Tape, d: &dyn Critic, fake: Var, form: AdversarialForm) -> Result<Var> {
    let df = d.score(tape, fake)?;
    match form {
        AdversarialForm::Log => {
            let df = tape.clamp(df, D_EPS, 1.0 - D_EPS)?;
            let l = tape.ln(df)?;
            let m = tape.mean(l);
            Ok(tape.neg(m))
        }
        AdversarialForm::LeastSquares => {
            let off = tape.add_scalar(df, -1.0);
            let sq = tape.mul(off, off)?;
            Ok(tape.mean(sq))
        }
    }
}

/// Adversarial loss of generator `g` against target-domain critic `d`:
/// `E[log D(x_tgt)] + E[log(1 - D(G(x_src)))]`, expectations as batch means.
pub fn adversarial_loss(
    tape: &mut Tape,
    g: &dyn ImageMap,
    d: &dyn Critic,
    src: &Batch,
    tgt: &Batch,
    form: AdversarialForm,
) -> Result<Var> {
    let xs = tape.constant(src.0.clone());
    let xt = tape.constant(tgt.0.clone());
    let fake = g.apply(tape, Images::new(xs))?;
    adversarial_value(tape, d, xt, fake.pixels, form)
}

fn l1_per_image_mean(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let rows = tape.shape(b)[0] as f64;
    let diff = tape.sub(a, b)?;
    let abs = tape.abs(diff);
    let total = tape.sum(abs);
    Ok(tape.scale(total, 1.0 / rows))
}

/// `E‖F(G(x_src)) - x_src‖₁ + E‖G(F(x_tgt)) - x_tgt‖₁` with per-image L1
/// norms averaged over each batch.
pub fn cycle_consistency_loss(
    tape: &mut Tape,
    g: &dyn ImageMap,
    f: &dyn ImageMap,
    src: &Batch,
    tgt: &Batch,
) -> Result<Var> {
    let xs = tape.constant(src.0.clone());
    let xt = tape.constant(tgt.0.clone());
    let fwd = g.apply(tape, Images::new(xs))?;
    let back = f.apply(tape, fwd)?;
    let bwd = f.apply(tape, Images::new(xt))?;
    let again = g.apply(tape, bwd)?;
    let a = l1_per_image_mean(tape, back.pixels, xs)?;
    let b = l1_per_image_mean(tape, again.pixels, xt)?;
    tape.add(a, b)
}

/// Which generator of a pair a directed mapping uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `G`: source → target.
    Forward,
    /// `F`: target → source.
    Backward,
}

/// Terms of the full objective computed with shared generator passes.
pub struct ObjectiveTerms {
    /// `L_GAN(G, D_tgt, src, tgt)`
    pub adv_forward: Var,
    /// `L_GAN(F, D_src, tgt, src)`
    pub adv_backward: Var,
    pub cycle: Var,
    /// `adv_forward + adv_backward + λ·cycle`
    pub total: Var,
}

/// The two generators and two discriminators for one unordered group pair.
#[derive(Clone, Debug)]
pub struct TranslatorPair {
    pub source: GroupLabel,
    pub target: GroupLabel,
    pub config: TranslatorConfig,
    pub params: ParamSet,
    pub steps_trained: u64,
    g: Generator,
    f: Generator,
    d_src: Discriminator,
    d_tgt: Discriminator,
}

impl TranslatorPair {
    pub fn new(source: GroupLabel, target: GroupLabel, config: TranslatorConfig, seed: u64) -> Result<Self> {
        if source == target {
            return Err(Error::invalid(format!("translator pair needs distinct groups, got {source}{target}")));
        }
        if config.lambda < 0.0 {
            return Err(Error::invalid(format!("lambda must be non-negative, got {}", config.lambda)));
        }
        let mut pair = Self::skeleton(source, target, config);
        let mut rng = seed::rng(&[seed, seed::tag("translator-init"), source.index() as u64, target.index() as u64]);
        let (gh, dh) = (pair.config.generator_hidden, pair.config.discriminator_hidden);
        pair.g.init(&mut pair.params, gh, &mut rng)?;
        pair.f.init(&mut pair.params, gh, &mut rng)?;
        pair.d_src.init(&mut pair.params, dh, &mut rng)?;
        pair.d_tgt.init(&mut pair.params, dh, &mut rng)?;
        Ok(pair)
    }

    fn skeleton(source: GroupLabel, target: GroupLabel, config: TranslatorConfig) -> Self {
        TranslatorPair {
            source,
            target,
            config,
            params: ParamSet::new(),
            steps_trained: 0,
            g: Generator { prefix: "G.".into() },
            f: Generator { prefix: "F.".into() },
            d_src: Discriminator { prefix: "Dsrc.".into() },
            d_tgt: Discriminator { prefix: "Dtgt.".into() },
        }
    }

    /// Two-letter code such as `AC`.
    pub fn code(&self) -> String {
        format!("{}{}", self.source, self.target)
    }

    pub fn generator(&self, dir: Direction) -> &Generator {
        match dir {
            Direction::Forward => &self.g,
            Direction::Backward => &self.f,
        }
    }

    /// Discriminator of the domain `dir` translates into.
    pub fn discriminator(&self, dir: Direction) -> &Discriminator {
        match dir {
            Direction::Forward => &self.d_tgt,
            Direction::Backward => &self.d_src,
        }
    }

    pub fn is_generator_param(name: &str) -> bool {
        name.starts_with("G.") || name.starts_with("F.")
    }

    pub fn is_discriminator_param(name: &str) -> bool {
        name.starts_with("Dsrc.") || name.starts_with("Dtgt.")
    }

    /// Both adversarial values with the generator outputs they were built on.
    fn adversarial_terms(
        &self,
        tape: &mut Tape,
        src: &Batch,
        tgt: &Batch,
        train_generators: bool,
        train_critics: bool,
    ) -> Result<(Var, Var, [Var; 2], [Images; 2])> {
        let g = self.g.view(&self.params, train_generators);
        let f = self.f.view(&self.params, train_generators);
        let d_src = self.d_src.view(&self.params, train_critics);
        let d_tgt = self.d_tgt.view(&self.params, train_critics);
        let form = self.config.form;

        let xs = tape.constant(src.0.clone());
        let xt = tape.constant(tgt.0.clone());
        let fake_t = g.apply(tape, Images::new(xs))?;
        let fake_s = f.apply(tape, Images::new(xt))?;
        let adv_forward = adversarial_value(tape, &d_tgt, xt, fake_t.pixels, form)?;
        let adv_backward = adversarial_value(tape, &d_src, xs, fake_s.pixels, form)?;
        Ok((adv_forward, adv_backward, [xs, xt], [fake_t, fake_s]))
    }

    fn cycle_term(&self, tape: &mut Tape, inputs: [Var; 2], fakes: [Images; 2], trainable: bool) -> Result<Var> {
        let g = self.g.view(&self.params, trainable);
        let f = self.f.view(&self.params, trainable);
        let rec_s = f.apply(tape, fakes[0])?;
        let rec_t = g.apply(tape, fakes[1])?;
        let ca = l1_per_image_mean(tape, rec_s.pixels, inputs[0])?;
        let cb = l1_per_image_mean(tape, rec_t.pixels, inputs[1])?;
        tape.add(ca, cb)
    }

    /// Full objective from shared generator passes. Generators are
    /// trainable when `train_generators`, discriminators when `train_critics`.
    pub fn objective(
        &self,
        tape: &mut Tape,
        src: &Batch,
        tgt: &Batch,
        train_generators: bool,
        train_critics: bool,
    ) -> Result<ObjectiveTerms> {
        let (adv_forward, adv_backward, inputs, fakes) =
            self.adversarial_terms(tape, src, tgt, train_generators, train_critics)?;
        let cycle = self.cycle_term(tape, inputs, fakes, train_generators)?;
        let weighted = tape.scale(cycle, self.config.lambda);
        let total = tape.sum_all(&[adv_forward, adv_backward, weighted])?;
        Ok(ObjectiveTerms {
            adv_forward,
            adv_backward,
            cycle,
            total,
        })
    }

    /// Generator training objective: the full objective, or with the
    /// non-saturating option the adversarial parts replaced by
    /// `-E[log D(G(x))]` terms.
    fn generator_objective(&self, tape: &mut Tape, src: &Batch, tgt: &Batch) -> Result<Var> {
        if !self.config.non_saturating {
            return Ok(self.objective(tape, src, tgt, true, false)?.total);
        }
        let g = self.g.view(&self.params, true);
        let f = self.f.view(&self.params, true);
        let d_src = self.d_src.view(&self.params, false);
        let d_tgt = self.d_tgt.view(&self.params, false);
        let xs = tape.constant(src.0.clone());
        let xt = tape.constant(tgt.0.clone());
        let fake_t = g.apply(tape, Images::new(xs))?;
        let fake_s = f.apply(tape, Images::new(xt))?;
        let a = non_saturating_term(tape, &d_tgt, fake_t.pixels, self.config.form)?;
        let b = non_saturating_term(tape, &d_src, fake_s.pixels, self.config.form)?;
        let cycle = self.cycle_term(tape, [xs, xt], [fake_t, fake_s], true)?;
        let weighted = tape.scale(cycle, self.config.lambda);
        tape.sum_all(&[a, b, weighted])
    }

    /// Applies one generator to a pixel matrix `[rows, PIXELS]`.
    pub fn translate_pixels(&self, dir: Direction, pixels: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(pixels.clone());
        let out = self.generator(dir).view(&self.params, false).apply(&mut tape, Images::new(x))?;
        Ok(tape.value(out.pixels).clone())
    }

    fn entries(&self) -> Vec<(String, Tensor)> {
        let c = &self.config;
        let meta = vec![
            self.source.index() as f64,
            self.target.index() as f64,
            self.steps_trained as f64,
            c.lambda,
            match c.form {
                AdversarialForm::Log => 0.0,
                AdversarialForm::LeastSquares => 1.0,
            },
            f64::from(u8::from(c.non_saturating)),
            c.generator_hidden as f64,
            c.discriminator_hidden as f64,
        ];
        let mut e = self.params.entries();
        e.push(("meta".into(), Tensor::vector(meta).expect("non-empty")));
        e
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.entries())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut entries = checkpoint::load(path)?;
        let pos = entries
            .iter()
            .position(|(n, _)| n == "meta")
            .ok_or_else(|| Error::Format(format!("{}: missing meta entry", path.display())))?;
        let meta = entries.remove(pos).1.into_data();
        if meta.len() != 8 {
            return Err(Error::Format("translator meta has wrong length".into()));
        }
        let group = |v: f64| GroupLabel::from_index(v as usize).ok_or_else(|| Error::Format("bad group index".into()));
        let config = TranslatorConfig {
            lambda: meta[3],
            form: if meta[4] == 0.0 {
                AdversarialForm::Log
            } else {
                AdversarialForm::LeastSquares
            },
            non_saturating: meta[5] != 0.0,
            generator_hidden: meta[6] as usize,
            discriminator_hidden: meta[7] as usize,
        };
        let mut pair = Self::skeleton(group(meta[0])?, group(meta[1])?, config);
        pair.steps_trained = meta[2] as u64;
        pair.params = ParamSet::from_entries(entries)?;
        Ok(pair)
    }
}

/// `L_GAN(G, D_tgt) + L_GAN(F, D_src) + λ·L_cyc(G, F)` for a pair.
pub fn total_translation_loss(tape: &mut Tape, pair: &TranslatorPair, src: &Batch, tgt: &Batch) -> Result<Var> {
    if pair.config.lambda < 0.0 {
        return Err(Error::invalid(format!("lambda must be non-negative, got {}", pair.config.lambda)));
    }
    Ok(pair.objective(tape, src, tgt, true, true)?.total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Discriminator updates per generator update.
    pub critic_steps: usize,
}

impl Default for PairTrainConfig {
    fn default() -> Self {
        PairTrainConfig {
            steps: 2000,
            batch: 8,
            lr: 1e-3,
            seed: 0,
            critic_steps: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss_g: f64,
    pub loss_d_src: f64,
    pub loss_d_tgt: f64,
}

fn draw_batch(pool: &[&Sample], batch: usize, rng: &mut impl Rng) -> Result<Batch> {
    let picked: Vec<&Sample> = (0..batch).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
    Batch::from_samples(&picked)
}

/// Alternating min-max training on the pair's two groups of `dataset`:
/// each step first ascends the discriminators on the adversarial terms,
/// then descends the generators on the full objective with the
/// discriminators frozen.
pub fn train_pair(
    mut pair: TranslatorPair,
    dataset: &DomainDataset,
    cfg: &PairTrainConfig,
) -> Result<(TranslatorPair, Vec<TraceRow>)> {
    let src_pool: Vec<&Sample> = dataset.originals().filter(|s| s.group == pair.source).collect();
    let tgt_pool: Vec<&Sample> = dataset.originals().filter(|s| s.group == pair.target).collect();
    for (pool, g) in [(&src_pool, pair.source), (&tgt_pool, pair.target)] {
        if pool.len() < cfg.batch {
            return Err(Error::Insufficient {
                what: format!("samples of group {g} for translator {}", pair.code()),
                required: cfg.batch,
                available: pool.len(),
            });
        }
    }
    if cfg.batch == 0 || cfg.critic_steps == 0 {
        return Err(Error::invalid("batch and critic_steps must be at least 1"));
    }
    let adam = AdamConfig::translation(cfg.lr);
    let mut rng = seed::rng(&[cfg.seed, seed::tag("translator-train"), pair.source.index() as u64, pair.target.index() as u64]);
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let src = draw_batch(&src_pool, cfg.batch, &mut rng)?;
        let tgt = draw_batch(&tgt_pool, cfg.batch, &mut rng)?;

        let (mut loss_d_src, mut loss_d_tgt) = (0.0, 0.0);
        for _ in 0..cfg.critic_steps {
            let mut tape = Tape::new();
            let (adv_forward, adv_backward, _, _) = pair.adversarial_terms(&mut tape, &src, &tgt, false, true)?;
            let both = tape.add(adv_forward, adv_backward)?;
            let loss = tape.neg(both);
            tape.backward(loss, &mut pair.params)?;
            pair.params.adam_step_where(&adam, TranslatorPair::is_discriminator_param)?;
            pair.params.zero_grad();
            loss_d_tgt = -tape.item(adv_forward);
            loss_d_src = -tape.item(adv_backward);
        }

        let mut tape = Tape::new();
        let loss = pair.generator_objective(&mut tape, &src, &tgt)?;
        tape.backward(loss, &mut pair.params)?;
        pair.params.adam_step_where(&adam, TranslatorPair::is_generator_param)?;
        pair.params.zero_grad();

        trace.push(TraceRow {
            step,
            loss_g: tape.item(loss),
            loss_d_src,
            loss_d_tgt,
        });
    }
    pair.steps_trained += cfg.steps as u64;
    Ok((pair, trace))
}

/// Writes `step,loss_G,loss_D_src,loss_D_tgt`.
pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let tmp = path.with_extension("csv.partial");
    {
        let mut w = csv::Writer::from_path(&tmp)?;
        w.write_record(["step", "loss_G", "loss_D_src", "loss_D_tgt"])?;
        for r in trace {
            w.write_record([
                r.step.to_string(),
                r.loss_g.to_string(),
                r.loss_d_src.to_string(),
                r.loss_d_tgt.to_string(),
            ])?;
        }
        w.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

/// Six translator pairs over four groups, one per unordered pair, in
/// canonical order (`AE, AC, AI, EC, EI, CI`).
#[derive(Clone, Debug)]
pub struct MappingRegistry {
    pairs: Vec<TranslatorPair>,
}

impl fmt::Display for MappingRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let codes: Vec<String> = self.pairs.iter().map(TranslatorPair::code).collect();
        write!(f, "registry[{}]", codes.join(","))
    }
}

fn check_groups(groups: &[GroupLabel]) -> Result<Vec<GroupLabel>> {
    let mut sorted = groups.to_vec();
    sorted.sort();
    sorted.dedup();
    if groups.len() != 4 || sorted.len() != 4 {
        return Err(Error::invalid(format!("registry needs 4 distinct groups, got {groups:?}")));
    }
    Ok(sorted)
}

/// Builds untrained pairs for every unordered pair of `groups`.
pub fn build_registry(groups: &[GroupLabel], config: &TranslatorConfig, seed: u64) -> Result<MappingRegistry> {
    let groups = check_groups(groups)?;
    let mut pairs = Vec::with_capacity(6);
    for (i, &a) in groups.iter().enumerate() {
        for &b in &groups[i + 1..] {
            pairs.push(TranslatorPair::new(a, b, config.clone(), seed)?);
        }
    }
    Ok(MappingRegistry { pairs })
}

impl MappingRegistry {
    pub fn from_pairs(mut pairs: Vec<TranslatorPair>) -> Result<Self> {
        pairs.sort_by_key(|p| (p.source, p.target));
        let ok = pairs.len() == 6
            && pairs.iter().all(|p| p.source < p.target)
            && pairs.windows(2).all(|w| (w[0].source, w[0].target) != (w[1].source, w[1].target));
        if !ok {
            return Err(Error::invalid("registry needs the six distinct pairs with source < target"));
        }
        Ok(MappingRegistry { pairs })
    }

    pub fn pairs(&self) -> &[TranslatorPair] {
        &self.pairs
    }

    pub fn into_pairs(self) -> Vec<TranslatorPair> {
        self.pairs
    }

    /// All twelve directed mappings, source-major in canonical order.
    pub fn directed_mappings(&self) -> Vec<(GroupLabel, GroupLabel)> {
        let mut out = Vec::with_capacity(12);
        for src in GroupLabel::ALL {
            for tgt in GroupLabel::ALL {
                if src != tgt && self.lookup(src, tgt).is_ok() {
                    out.push((src, tgt));
                }
            }
        }
        out
    }

    /// Resolves a directed mapping to its pair and generator direction.
    pub fn lookup(&self, src: GroupLabel, tgt: GroupLabel) -> Result<(&TranslatorPair, Direction)> {
        if src == tgt {
            return Err(Error::invalid(format!("no mapping from {src} to itself")));
        }
        self.pairs
            .iter()
            .find_map(|p| {
                if (p.source, p.target) == (src, tgt) {
                    Some((p, Direction::Forward))
                } else if (p.source, p.target) == (tgt, src) {
                    Some((p, Direction::Backward))
                } else {
                    None
                }
            })
            .ok_or_else(|| Error::invalid(format!("unknown mapping {src}->{tgt}")))
    }

    pub fn file_name(src: GroupLabel, tgt: GroupLabel) -> String {
        format!("pair_{src}{tgt}.ftns")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for p in &self.pairs {
            p.save(&dir.join(Self::file_name(p.source, p.target)))?;
        }
        Ok(())
    }

    /// Loads the six pair files; a missing file is reported by pair name.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut pairs = Vec::with_capacity(6);
        for (i, &a) in GroupLabel::ALL.iter().enumerate() {
            for &b in &GroupLabel::ALL[i + 1..] {
                let path = dir.join(Self::file_name(a, b));
                if !path.exists() {
                    return Err(Error::UntrainedPair(format!("{a}{b} (missing {})", path.display())));
                }
                pairs.push(TranslatorPair::load(&path)?);
            }
        }
        Self::from_pairs(pairs)
    }
}

/// Translates a batch of samples from `src` into `tgt`. Subject ids and
/// render seeds carry over; provenance becomes `Synthesized { src }`.
pub fn translate_samples(
    samples: &[&Sample],
    src: GroupLabel,
    tgt: GroupLabel,
    registry: &MappingRegistry,
) -> Result<Vec<Sample>> {
    let (pair, dir) = registry.lookup(src, tgt)?;
    if let Some(bad) = samples.iter().find(|s| s.group != src) {
        return Err(Error::invalid(format!(
            "sample of subject {} is labelled {}, not {src}",
            bad.subject_id, bad.group
        )));
    }
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let out = pair.translate_pixels(dir, Batch::from_samples(samples)?.tensor())?;
    Ok(samples
        .iter()
        .enumerate()
        .map(|(i, s)| Sample {
            pixels: out.row(i).to_vec(),
            subject_id: s.subject_id,
            group: tgt,
            provenance: Provenance::Synthesized { source: src },
            render_seed: s.render_seed,
        })
        .collect())
}

pub fn translate(sample: &Sample, src: GroupLabel, tgt: GroupLabel, registry: &MappingRegistry) -> Result<Sample> {
    Ok(translate_samples(&[sample], src, tgt, registry)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use GroupLabel::*;

    fn uniform(value: f64, rows: usize) -> Batch {
        Batch::from_tensor(Tensor::filled(&[rows, PIXELS], value)).unwrap()
    }

    #[test]
    fn constant_critic_value() {
        let mut tape = Tape::new();
        let v = adversarial_loss(&mut tape, &IdentityMap, &ConstantCritic(0.5), &uniform(0.3, 2), &uniform(0.7, 3), AdversarialForm::Log)
            .unwrap();
        assert!((tape.item(v) - 2.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_critic_approaches_zero_from_below() {
        struct Perfect;
        impl Critic for Perfect {
            fn score(&self, tape: &mut Tape, x: Var) -> Result<Var> {
                // real batches here are bright, fakes dark
                let t = tape.value(x);
                let rows: Vec<Vec<f64>> = (0..t.shape()[0]).map(|i| vec![if t.row(i)[0] > 0.5 { 1.0 } else { 0.0 }]).collect();
                Ok(tape.constant(Tensor::from_rows(&rows).unwrap()))
            }
        }
        let mut tape = Tape::new();
        let v = adversarial_loss(&mut tape, &IdentityMap, &Perfect, &uniform(0.1, 2), &uniform(0.9, 2), AdversarialForm::Log).unwrap();
        let v = tape.item(v);
        assert!(v <= 0.0 && v > -1e-6, "{v}");
    }

    #[test]
    fn shift_map_cycle_value() {
        let mut tape = Tape::new();
        let v = cycle_consistency_loss(&mut tape, &ShiftMap(0.1), &IdentityMap, &uniform(0.5, 1), &uniform(0.5, 1)).unwrap();
        assert!((tape.item(v) - 51.2).abs() < 1e-9, "{}", tape.item(v));
    }

    #[test]
    fn identity_maps_have_zero_cycle_loss() {
        let mut tape = Tape::new();
        let v = cycle_consistency_loss(&mut tape, &IdentityMap, &IdentityMap, &uniform(0.2, 3), &uniform(0.8, 2)).unwrap();
        assert_eq!(tape.item(v), 0.0);
    }

    #[test]
    fn fresh_generator_is_near_identity() {
        let mut pair = TranslatorPair::new(A, C, TranslatorConfig::default(), 1).unwrap();
        let x = Tensor::new(vec![1, PIXELS], (0..PIXELS).map(|i| 0.01 + 0.98 * i as f64 / PIXELS as f64).collect()).unwrap();
        let y = pair.translate_pixels(Direction::Forward, &x).unwrap();
        let mean_shift: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / PIXELS as f64;
        assert!(mean_shift > 0.0 && mean_shift < 0.05, "{mean_shift}");
        // without the residual branch the map is exactly the identity
        pair.params.values_mut("G.w2").unwrap().iter_mut().for_each(|v| *v = 0.0);
        let y = pair.translate_pixels(Direction::Forward, &x).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_batches_and_bad_pixels_rejected() {
        assert!(Batch::from_samples(&[]).is_err());
        assert!(Batch::from_tensor(Tensor::filled(&[1, PIXELS], 1.5)).is_err());
        assert!(Batch::from_tensor(Tensor::filled(&[1, 10], 0.5)).is_err());
    }

    #[test]
    fn pair_rejects_same_groups_and_negative_lambda() {
        assert!(TranslatorPair::new(A, A, TranslatorConfig::default(), 0).is_err());
        let cfg = TranslatorConfig {
            lambda: -1.0,
            ..TranslatorConfig::default()
        };
        assert!(TranslatorPair::new(A, C, cfg, 0).is_err());
    }

    #[test]
    fn registry_shape() {
        let r = build_registry(&GroupLabel::ALL, &TranslatorConfig::default(), 0).unwrap();
        assert_eq!(r.pairs().len(), 6);
        assert_eq!(r.directed_mappings().len(), 12);
        let (p1, d1) = r.lookup(A, C).unwrap();
        let (p2, d2) = r.lookup(C, A).unwrap();
        assert_eq!(p1.code(), p2.code());
        assert_eq!((d1, d2), (Direction::Forward, Direction::Backward));
        assert!(r.lookup(A, A).is_err());
        assert!(build_registry(&[A, A, C, I], &TranslatorConfig::default(), 0).is_err());
        assert!(build_registry(&[A, E, C], &TranslatorConfig::default(), 0).is_err());
    }
}
