//! Experiment configuration: a line-oriented `key = value` file with
//! bracketed section headers. `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fairtrans_core::augment::PlanKind;
use fairtrans_core::cycletrans::{AdversarialForm, PairTrainConfig, TranslatorConfig};
use fairtrans_core::faireval::ClassifierConfig;
use fairtrans_core::reclosses::{LossKind, RecognitionConfig};
use fairtrans_core::synthface::{DatasetConfig, Split};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSettings {
    pub subjects: [usize; 4],
    pub images: usize,
    pub verification_subjects: [usize; 4],
    pub verification_images: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TranslatorSettings {
    pub model: TranslatorConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub critic_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub positive_pairs: usize,
    pub negative_pairs: usize,
    pub folds: usize,
    pub classifier: ClassifierConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub plan: PlanKind,
    pub losses: Vec<LossKind>,
    pub out: Option<PathBuf>,
    pub dataset: DatasetSettings,
    pub translator: TranslatorSettings,
    /// Per-kind settings; the `seed` field is ignored in favor of [`ExperimentConfig::seed`].
    pub recognition: BTreeMap<LossKind, RecognitionConfig>,
    pub eval: EvalSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let pair = PairTrainConfig::default();
        ExperimentConfig {
            seed: 0,
            plan: PlanKind::Full,
            losses: LossKind::ALL.to_vec(),
            out: None,
            dataset: DatasetSettings {
                subjects: [5, 5, 40, 5],
                images: 20,
                verification_subjects: [10; 4],
                verification_images: 10,
            },
            translator: TranslatorSettings {
                model: TranslatorConfig::default(),
                steps: pair.steps,
                batch: pair.batch,
                lr: pair.lr,
                critic_steps: pair.critic_steps,
            },
            recognition: LossKind::ALL.iter().map(|&k| (k, RecognitionConfig::for_kind(k))).collect(),
            eval: EvalSettings {
                positive_pairs: 300,
                negative_pairs: 300,
                folds: fairtrans_core::faireval::DEFAULT_FOLDS,
                classifier: ClassifierConfig::default(),
            },
        }
    }
}

fn form_name(f: AdversarialForm) -> &'static str {
    match f {
        AdversarialForm::Log => "log",
        AdversarialForm::LeastSquares => "least-squares",
    }
}

fn list<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses and validates. `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut section: Option<String> = None;
        let mut seen: BTreeMap<(String, String), usize> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |msg: String| CliError::Config {
                path: origin.to_string(),
                line: line_no,
                msg,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("unterminated section header `{line}`")))?
                    .trim();
                check_section(name).map_err(err)?;
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let sec = section
                .clone()
                .ok_or_else(|| err(format!("key `{key}` appears before any section header")))?;
            if let Some(first) = seen.insert((sec.clone(), key.to_string()), line_no) {
                return Err(err(format!("duplicate key `{key}` (first set on line {first})")));
            }
            cfg.set(&sec, key, value).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> std::result::Result<(), String> {
        let unknown = || Err(format!("unknown key `{key}` in section [{section}]"));
        match section {
            "experiment" => match key {
                "seed" => self.seed = num(key, value)?,
                "plan" => self.plan = value.parse().map_err(|e| format!("{e}"))?,
                "losses" => {
                    self.losses = value
                        .split(',')
                        .map(|s| s.trim().parse::<LossKind>().map_err(|e| format!("{e}")))
                        .collect::<std::result::Result<_, _>>()?
                }
                "out" => self.out = Some(PathBuf::from(value)),
                _ => return unknown(),
            },
            "dataset" => {
                let d = &mut self.dataset;
                match key {
                    "subjects" => d.subjects = four(key, value)?,
                    "images" => d.images = num(key, value)?,
                    "verification_subjects" => d.verification_subjects = four(key, value)?,
                    "verification_images" => d.verification_images = num(key, value)?,
                    _ => return unknown(),
                }
            }
            "translator" => {
                let t = &mut self.translator;
                match key {
                    "lambda" => t.model.lambda = num(key, value)?,
                    "form" => {
                        t.model.form = match value {
                            "log" => AdversarialForm::Log,
                            "least-squares" => AdversarialForm::LeastSquares,
                            _ => return Err(format!("`form` must be log or least-squares, got `{value}`")),
                        }
                    }
                    "non_saturating" => t.model.non_saturating = num(key, value)?,
                    "generator_hidden" => t.model.generator_hidden = num(key, value)?,
                    "discriminator_hidden" => t.model.discriminator_hidden = num(key, value)?,
                    "steps" => t.steps = num(key, value)?,
                    "batch" => t.batch = num(key, value)?,
                    "lr" => t.lr = num(key, value)?,
                    "critic_steps" => t.critic_steps = num(key, value)?,
                    _ => return unknown(),
                }
            }
            "eval" => {
                let e = &mut self.eval;
                match key {
                    "positive_pairs" => e.positive_pairs = num(key, value)?,
                    "negative_pairs" => e.negative_pairs = num(key, value)?,
                    "folds" => e.folds = num(key, value)?,
                    "classifier_steps" => e.classifier.steps = num(key, value)?,
                    "classifier_lr" => e.classifier.lr = num(key, value)?,
                    _ => return unknown(),
                }
            }
            _ => {
                let kind: LossKind = section
                    .strip_prefix("recognition.")
                    .expect("section names are checked")
                    .parse()
                    .map_err(|e| format!("{e}"))?;
                let r = self.recognition.get_mut(&kind).expect("all kinds present");
                match key {
                    "margin" => r.margin = num(key, value)?,
                    "scale" => r.scale = num(key, value)?,
                    "epochs" => r.epochs = num(key, value)?,
                    "batch" => r.batch = num(key, value)?,
                    "lr" => r.lr = num(key, value)?,
                    "hidden" => r.hidden = num(key, value)?,
                    "embed_dim" => r.embed_dim = num(key, value)?,
                    _ => return unknown(),
                }
            }
        }
        Ok(())
    }

    /// Checks everything that can be known before any computation starts.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Invalid(m));
        if self.losses.is_empty() {
            return bad("`losses` is empty".into());
        }
        for (i, k) in self.losses.iter().enumerate() {
            if self.losses[..i].contains(k) {
                return bad(format!("loss `{k}` listed twice"));
            }
        }
        let d = &self.dataset;
        if d.subjects.contains(&0) || d.images < 2 {
            return bad("every group needs a subject and every subject at least 2 images".into());
        }
        if d.verification_subjects.iter().any(|&n| n < 2) || d.verification_images < 2 {
            return bad("verification needs at least 2 subjects per group and 2 images per subject".into());
        }
        let e = &self.eval;
        if e.folds < 2 {
            return bad(format!("`folds` must be at least 2, got {}", e.folds));
        }
        if e.positive_pairs + e.negative_pairs < e.folds {
            return bad("fewer verification pairs than folds".into());
        }
        if e.classifier.lr <= 0.0 || !e.classifier.lr.is_finite() {
            return bad("`classifier_lr` must be positive".into());
        }
        for (g, &n) in d.verification_subjects.iter().enumerate() {
            let m = d.verification_images;
            let pos = n * m * (m - 1) / 2;
            let neg = (n * m) * (n * m - 1) / 2 - pos;
            if pos < e.positive_pairs || neg < e.negative_pairs {
                return bad(format!(
                    "group {g} verification set has {pos} same-subject and {neg} different-subject pairs; \
                     {} and {} requested",
                    e.positive_pairs, e.negative_pairs
                ));
            }
        }
        let t = &self.translator;
        if t.batch == 0 || t.critic_steps == 0 || t.model.generator_hidden == 0 || t.model.discriminator_hidden == 0 {
            return bad("translator batch, critic_steps and hidden sizes must be positive".into());
        }
        if !(t.model.lambda >= 0.0 && t.model.lambda.is_finite()) || !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad("translator lambda must be non-negative and lr positive".into());
        }
        let smallest = d.subjects.iter().min().copied().unwrap_or(0) * d.images;
        if self.plan != PlanKind::None && t.batch > smallest {
            return bad(format!("translator batch {} exceeds the smallest group ({smallest} images)", t.batch));
        }
        for k in &self.losses {
            let r = &self.recognition[k];
            if r.epochs == 0 || r.batch == 0 || r.hidden == 0 || r.embed_dim == 0 {
                return bad(format!("[recognition.{k}] epochs, batch, hidden and embed_dim must be positive"));
            }
            if !(r.lr > 0.0 && r.lr.is_finite()) || !(r.scale > 0.0 && r.scale.is_finite()) || !r.margin.is_finite() {
                return bad(format!("[recognition.{k}] lr and scale must be positive"));
            }
        }
        Ok(())
    }

    /// Every setting written out explicitly; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let d = &self.dataset;
        let t = &self.translator;
        let e = &self.eval;
        let _ = writeln!(s, "[experiment]\nseed = {}\nplan = {}\nlosses = {}", self.seed, self.plan, list(&self.losses));
        if let Some(out) = &self.out {
            let _ = writeln!(s, "out = {}", out.display());
        }
        let _ = writeln!(
            s,
            "\n[dataset]\nsubjects = {}\nimages = {}\nverification_subjects = {}\nverification_images = {}",
            list(&d.subjects),
            d.images,
            list(&d.verification_subjects),
            d.verification_images
        );
        let _ = writeln!(
            s,
            "\n[translator]\nlambda = {}\nform = {}\nnon_saturating = {}\ngenerator_hidden = {}\n\
             discriminator_hidden = {}\nsteps = {}\nbatch = {}\nlr = {}\ncritic_steps = {}",
            t.model.lambda,
            form_name(t.model.form),
            t.model.non_saturating,
            t.model.generator_hidden,
            t.model.discriminator_hidden,
            t.steps,
            t.batch,
            t.lr,
            t.critic_steps
        );
        for (k, r) in &self.recognition {
            let _ = writeln!(
                s,
                "\n[recognition.{k}]\nmargin = {}\nscale = {}\nepochs = {}\nbatch = {}\nlr = {}\nhidden = {}\nembed_dim = {}",
                r.margin, r.scale, r.epochs, r.batch, r.lr, r.hidden, r.embed_dim
            );
        }
        let _ = writeln!(
            s,
            "\n[eval]\npositive_pairs = {}\nnegative_pairs = {}\nfolds = {}\nclassifier_steps = {}\nclassifier_lr = {}",
            e.positive_pairs, e.negative_pairs, e.folds, e.classifier.steps, e.classifier.lr
        );
        s
    }

    pub fn train_data(&self) -> DatasetConfig {
        DatasetConfig {
            subjects_per_group: self.dataset.subjects,
            images_per_subject: self.dataset.images,
            seed: self.seed,
            split: Split::Train,
        }
    }

    pub fn verification_data(&self) -> DatasetConfig {
        DatasetConfig {
            subjects_per_group: self.dataset.verification_subjects,
            images_per_subject: self.dataset.verification_images,
            seed: self.seed,
            split: Split::Verification,
        }
    }

    pub fn pair_training(&self) -> PairTrainConfig {
        let t = &self.translator;
        PairTrainConfig {
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
            seed: self.seed,
            critic_steps: t.critic_steps,
        }
    }

    pub fn recognition_for(&self, kind: LossKind) -> RecognitionConfig {
        RecognitionConfig {
            seed: self.seed,
            ..self.recognition[&kind].clone()
        }
    }
}

fn check_section(name: &str) -> std::result::Result<(), String> {
    match name {
        "experiment" | "dataset" | "translator" | "eval" => Ok(()),
        _ => match name.strip_prefix("recognition.") {
            Some(kind) => kind.parse::<LossKind>().map(|_| ()).map_err(|e| format!("{e}")),
            None => Err(format!("unknown section [{name}]")),
        },
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("`{key}`: cannot parse `{value}`"))
}

fn four(key: &str, value: &str) -> std::result::Result<[usize; 4], String> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|p| num(key, p.trim()))
        .collect::<std::result::Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|p: Vec<usize>| format!("`{key}` needs 4 values (A, E, C, I), got {}", p.len()))
}
