//! The experiment phases: generate, train translators, augment, train
//! recognizers, evaluate. Each phase skips itself when the manifest shows
//! it already ran on the same settings and inputs.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use fairtrans_core::augment::{build_augmented_dataset, AugmentationPlan, PlanKind};
use fairtrans_core::cycletrans::{build_registry, train_pair, translate_samples, write_trace_csv, MappingRegistry};
use fairtrans_core::faireval::{
    group_report, make_pairs, reports_markdown, train_group_classifier, transfer_success, verify_accuracy,
    write_reports_csv, GroupReport, TransferAssessment,
};
use fairtrans_core::reclosses::{train_recognizer, TrainingRun};
use fairtrans_core::synthface::{build_dataset, Renderer};
use fairtrans_core::{DomainDataset, GroupLabel, Sample};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::workspace::{digest, write_atomic, RunManifest, Workspace};

pub const TRAIN_DIR: &str = "data/train";
pub const VERIFICATION_DIR: &str = "data/verification";
pub const AUGMENTED_DIR: &str = "data/augmented";
pub const TRANSLATOR_DIR: &str = "translators";
pub const MODEL_DIR: &str = "models";
pub const REPORTS: &str = "reports.csv";
pub const TRANSFER: &str = "transfer.csv";
pub const SUMMARY: &str = "summary.md";

/// Which phases to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Gen,
    TrainTranslators,
    Augment,
    Train,
    Eval,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Gen => "gen",
            Phase::TrainTranslators => "train-translators",
            Phase::Augment => "augment",
            Phase::Train => "train",
            Phase::Eval => "eval",
        }
    }
}

/// Phases of a full run; without a plan, translation and augmentation are skipped.
pub fn full_run(plan: PlanKind) -> Vec<Phase> {
    if plan == PlanKind::None {
        vec![Phase::Gen, Phase::Train, Phase::Eval]
    } else {
        vec![Phase::Gen, Phase::TrainTranslators, Phase::Augment, Phase::Train, Phase::Eval]
    }
}

/// Label written to the `dataset` column of reports.
pub fn dataset_label(cfg: &ExperimentConfig) -> String {
    format!("synthetic-{}-s{}", cfg.plan, cfg.seed)
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub reports: Vec<GroupReport>,
    /// Overall transfer success (%) when translators were evaluated.
    pub transfer_overall: Option<f64>,
}

/// Runs `phases` in order inside the run directory `root`, publishing after
/// each one.
pub fn execute(cfg: &ExperimentConfig, root: &Path, phases: &[Phase]) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut ws = Workspace::open(root, cfg)?;
    for &phase in phases {
        let started = Instant::now();
        let key = phase_key(cfg, &ws, phase)?;
        if ws.is_current(phase.name(), &key) {
            log::info!("{}: up to date", phase.name());
            continue;
        }
        log::info!("{}: running", phase.name());
        ws.begin(phase.name())?;
        let outputs = match phase {
            Phase::Gen => gen(cfg, &mut ws)?,
            Phase::TrainTranslators => train_translators(cfg, &ws)?,
            Phase::Augment => augment(cfg, &ws)?,
            Phase::Train => train(cfg, &ws)?,
            Phase::Eval => eval(cfg, &ws)?,
        };
        let seconds = started.elapsed().as_secs_f64();
        ws.record(phase.name(), key, &outputs, seconds)?;
        ws.commit()?;
        log::info!("{}: done in {seconds:.1}s", phase.name());
    }
    let manifest = ws.finish()?;
    let reports = match root.join(REPORTS) {
        p if p.exists() => fairtrans_core::faireval::read_reports_csv(std::fs::File::open(p)?)?,
        _ => Vec::new(),
    };
    let transfer_overall = read_transfer_overall(&root.join(TRANSFER))?;
    Ok(RunOutcome {
        manifest,
        reports,
        transfer_overall,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig, root: &Path) -> Result<RunOutcome> {
    execute(cfg, root, &full_run(cfg.plan))
}

fn phase_key(cfg: &ExperimentConfig, ws: &Workspace, phase: Phase) -> Result<String> {
    let mut parts = vec![phase.name().to_string(), format!("seed={}", cfg.seed)];
    match phase {
        Phase::Gen => parts.push(format!("{:?}", cfg.dataset)),
        Phase::TrainTranslators => {
            parts.push(format!("{:?}", cfg.translator));
            parts.extend(inputs(ws, &[TRAIN_DIR])?);
        }
        Phase::Augment => {
            parts.push(cfg.plan.to_string());
            parts.extend(inputs(ws, &[TRAIN_DIR, TRANSLATOR_DIR])?);
        }
        Phase::Train => {
            parts.push(cfg.plan.to_string());
            for &k in &cfg.losses {
                parts.push(format!("{:?}", cfg.recognition_for(k)));
            }
            parts.extend(inputs(ws, &[training_dir(cfg)])?);
        }
        Phase::Eval => {
            parts.push(cfg.plan.to_string());
            parts.push(format!("{:?} {:?}", cfg.eval, cfg.losses));
            let mut dirs = vec![TRAIN_DIR, VERIFICATION_DIR, MODEL_DIR];
            if cfg.plan != PlanKind::None {
                dirs.push(TRANSLATOR_DIR);
            }
            parts.extend(inputs(ws, &dirs)?);
        }
    }
    Ok(digest(&parts))
}

/// Recorded hashes under each prefix; an empty prefix is a missing prerequisite.
fn inputs(ws: &Workspace, prefixes: &[&str]) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for p in prefixes {
        let hashes = ws.hashes_under(&format!("{p}/"));
        if hashes.is_empty() {
            return Err(CliError::MissingArtifact(ws.root().join(p)));
        }
        out.extend(hashes);
    }
    Ok(out)
}

fn training_dir(cfg: &ExperimentConfig) -> &'static str {
    if cfg.plan == PlanKind::None {
        TRAIN_DIR
    } else {
        AUGMENTED_DIR
    }
}

fn load_dataset(ws: &Workspace, dir: &str) -> Result<DomainDataset> {
    ws.require(&format!("{dir}/samples.csv"))?;
    ws.require(&format!("{dir}/dataset.ftns"))?;
    Ok(DomainDataset::import(&ws.path(dir))?)
}

fn gen(cfg: &ExperimentConfig, ws: &mut Workspace) -> Result<Vec<&'static str>> {
    let renderer = Renderer::default();
    for (dir, dc) in [(TRAIN_DIR, cfg.train_data()), (VERIFICATION_DIR, cfg.verification_data())] {
        let d = build_dataset(&renderer, &dc)?;
        d.export(&ws.path(dir))?;
        let split = dir.rsplit('/').next().expect("non-empty");
        ws.manifest.dataset_fingerprint.insert(split.to_string(), d.fingerprint());
        log::info!("{split}: {} samples", d.len());
    }
    Ok(vec![TRAIN_DIR, VERIFICATION_DIR])
}

fn train_translators(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Vec<&'static str>> {
    let train = load_dataset(ws, TRAIN_DIR)?;
    let registry = build_registry(&GroupLabel::ALL, &cfg.translator.model, cfg.seed)?;
    let dir = ws.path(TRANSLATOR_DIR);
    let mut trained = Vec::new();
    for pair in registry.into_pairs() {
        let code = pair.code();
        let (pair, trace) = train_pair(pair, &train, &cfg.pair_training())?;
        if let Some(last) = trace.last() {
            log::info!(
                "translator {code}: loss_G {:.4}, loss_D {:.4}/{:.4}",
                last.loss_g,
                last.loss_d_src,
                last.loss_d_tgt
            );
        }
        std::fs::create_dir_all(&dir)?;
        write_trace_csv(&dir.join(format!("trace_{code}.csv")), &trace)?;
        trained.push(pair);
    }
    MappingRegistry::from_pairs(trained)?.save(&dir)?;
    Ok(vec![TRANSLATOR_DIR])
}

fn load_registry(ws: &Workspace) -> Result<MappingRegistry> {
    for (i, &a) in GroupLabel::ALL.iter().enumerate() {
        for &b in &GroupLabel::ALL[i + 1..] {
            ws.require(&format!("{TRANSLATOR_DIR}/{}", MappingRegistry::file_name(a, b)))?;
        }
    }
    Ok(MappingRegistry::load(&ws.path(TRANSLATOR_DIR))?)
}

fn augment(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Vec<&'static str>> {
    let train = load_dataset(ws, TRAIN_DIR)?;
    let registry = load_registry(ws)?;
    let plan = AugmentationPlan::from_kind(cfg.plan, &train);
    let aug = build_augmented_dataset(&train, &plan, &registry)?;
    log::info!("augmented: {} samples from {}", aug.len(), train.len());
    aug.export(&ws.path(AUGMENTED_DIR))?;
    Ok(vec![AUGMENTED_DIR])
}

fn train(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Vec<&'static str>> {
    let data = load_dataset(ws, training_dir(cfg))?;
    let dir = ws.path(MODEL_DIR);
    std::fs::create_dir_all(&dir)?;
    for &kind in &cfg.losses {
        let run = train_recognizer(&data, kind, &cfg.recognition_for(kind))?;
        log::info!(
            "{kind}: {} steps, loss {:.4} -> {:.4}",
            run.trace.len(),
            run.trace.first().copied().unwrap_or(f64::NAN),
            run.trace.last().copied().unwrap_or(f64::NAN)
        );
        run.save(&dir.join(format!("{kind}.ftns")))?;
        let mut w = csv::Writer::from_path(dir.join(format!("trace_{kind}.csv")))?;
        w.write_record(["step", "loss"])?;
        for (i, l) in run.trace.iter().enumerate() {
            w.write_record([i.to_string(), l.to_string()])?;
        }
        w.flush()?;
    }
    Ok(vec![MODEL_DIR])
}

fn eval(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Vec<&'static str>> {
    let ver = load_dataset(ws, VERIFICATION_DIR)?;
    let fingerprint = ver.fingerprint();
    let refs: Vec<&Sample> = ver.samples.iter().collect();
    let e = &cfg.eval;
    let mut pairs = Vec::new();
    for g in GroupLabel::ALL {
        pairs.push(make_pairs(&ver, g, e.positive_pairs, e.negative_pairs, cfg.seed)?);
    }
    let mut reports = Vec::new();
    for &kind in &cfg.losses {
        let path = ws.require(&format!("{MODEL_DIR}/{kind}.ftns"))?;
        let run = TrainingRun::load(&path, &fingerprint)?;
        let emb = run.embed(&refs)?;
        let mut acc = [0.0; 4];
        for (a, p) in acc.iter_mut().zip(&pairs) {
            *a = verify_accuracy(&emb, p, e.folds)?;
        }
        reports.push(group_report(acc, kind.name(), &dataset_label(cfg))?);
    }
    let mut csv_bytes = Vec::new();
    write_reports_csv(&mut csv_bytes, &reports)?;
    write_atomic(&ws.path(REPORTS), &csv_bytes)?;

    let mut outputs = vec![REPORTS, SUMMARY];
    let mut transfer = None;
    if cfg.plan != PlanKind::None {
        let train = load_dataset(ws, TRAIN_DIR)?;
        let registry = load_registry(ws)?;
        let plan = AugmentationPlan::from_kind(cfg.plan, &train);
        let clf = train_group_classifier(&train, &Renderer::default(), &e.classifier)?;
        let mut translated = Vec::new();
        for (src, tgt) in plan.mappings() {
            let members: Vec<&Sample> = ver.in_group(src).collect();
            translated.extend(translate_samples(&members, src, tgt, &registry)?);
        }
        let t = transfer_success(&translated, &clf)?;
        let mut bytes = Vec::new();
        t.write_csv(&mut bytes)?;
        write_atomic(&ws.path(TRANSFER), &bytes)?;
        outputs.push(TRANSFER);
        transfer = Some(t);
    }
    write_atomic(&ws.path(SUMMARY), summary(cfg, &reports, transfer.as_ref()).as_bytes())?;
    Ok(outputs)
}

fn summary(cfg: &ExperimentConfig, reports: &[GroupReport], transfer: Option<&TransferAssessment>) -> String {
    let mut s = format!(
        "# fairtrans run\n\nseed {}, plan `{}`\n\n## Verification accuracy (%)\n\n{}",
        cfg.seed,
        cfg.plan,
        reports_markdown(reports)
    );
    if let Some(t) = transfer {
        let _ = write!(s, "\n## Transfer success (%)\n\n| mapping | rate |\n|---|---|\n");
        for (src, tgt) in t.counts.keys() {
            let _ = writeln!(s, "| {src}->{tgt} | {:.2} |", t.rate(*src, *tgt).unwrap_or(0.0));
        }
        let _ = writeln!(s, "| overall | {:.2} |", t.overall());
    }
    s
}

fn read_transfer_overall(path: &Path) -> Result<Option<f64>> {
    if !path.exists() {
        return Ok(None);
    }
    let mut r = csv::Reader::from_path(path)?;
    for rec in r.records() {
        let rec = rec?;
        if rec.get(0) == Some("overall") {
            let v = rec.get(1).and_then(|v| v.parse().ok());
            return Ok(v);
        }
    }
    Ok(None)
}
