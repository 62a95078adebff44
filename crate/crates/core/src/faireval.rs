//! Verification accuracy, per-group fairness reports and the group
//! classifier used to score translations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{Read, Write};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::numgrad::{AdamConfig, ParamSet, Tape, Tensor};
use crate::reclosses::{cross_entropy, LossKind};
use crate::seed;
use crate::synthface::{DomainDataset, GroupLabel, Provenance, Renderer, Sample};

pub const DEFAULT_FOLDS: usize = 10;

/// Two sample indices (into the dataset the pair was drawn from).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerificationPair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
    pub group: GroupLabel,
}

/// Draws `n_pos` same-subject and `n_neg` different-subject pairs among the
/// original samples of `group`, without replacement, in shuffled order.
pub fn make_pairs(
    dataset: &DomainDataset,
    group: GroupLabel,
    n_pos: usize,
    n_neg: usize,
    seed: u64,
) -> Result<Vec<VerificationPair>> {
    let members: Vec<(usize, u64)> = dataset
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.group == group && s.is_original())
        .map(|(i, s)| (i, s.subject_id))
        .collect();
    let subjects: BTreeSet<u64> = members.iter().map(|m| m.1).collect();
    if subjects.len() < 2 {
        return Err(Error::Insufficient {
            what: format!("subjects in group {group}"),
            required: 2,
            available: subjects.len(),
        });
    }

    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (x, &(i, si)) in members.iter().enumerate() {
        for &(j, sj) in &members[x + 1..] {
            let pair = VerificationPair {
                a: i,
                b: j,
                same: si == sj,
                group,
            };
            if pair.same {
                pos.push(pair);
            } else {
                neg.push(pair);
            }
        }
    }
    if pos.len() < n_pos {
        return Err(Error::Insufficient {
            what: format!("same-subject pairs in group {group}"),
            required: n_pos,
            available: pos.len(),
        });
    }
    if neg.len() < n_neg {
        return Err(Error::Insufficient {
            what: format!("different-subject pairs in group {group}"),
            required: n_neg,
            available: neg.len(),
        });
    }

    let mut rng = seed::rng(&[seed, seed::tag("pairs"), group.index() as u64]);
    let mut out: Vec<VerificationPair> = pos.choose_multiple(&mut rng, n_pos).copied().collect();
    out.extend(neg.choose_multiple(&mut rng, n_neg).copied());
    out.shuffle(&mut rng);
    Ok(out)
}

/// Cosine similarity of each pair's embeddings (rows of `embeddings`).
pub fn pair_scores(embeddings: &Tensor, pairs: &[VerificationPair]) -> Result<Vec<f64>> {
    let (rows, _) = embeddings
        .dims2()
        .ok_or_else(|| Error::invalid("embeddings must be a matrix"))?;
    let unit = |i: usize| -> Result<Vec<f64>> {
        if i >= rows {
            return Err(Error::invalid(format!("pair references sample {i}, embeddings have {rows} rows")));
        }
        let r = embeddings.row(i);
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < crate::numgrad::MIN_NORM {
            return Err(Error::domain("pair_scores", format!("embedding {i} has zero norm")));
        }
        Ok(r.iter().map(|v| v / norm).collect())
    };
    pairs
        .iter()
        .map(|p| {
            let (a, b) = (unit(p.a)?, unit(p.b)?);
            Ok(a.iter().zip(&b).map(|(x, y)| x * y).sum())
        })
        .collect()
}

/// k-fold threshold protocol: for each contiguous fold, pick the threshold
/// with the best accuracy on the remaining folds and score the held-out fold.
/// A pair is predicted "same" when its score exceeds the threshold.
/// Returns the mean held-out accuracy in percent.
pub fn threshold_cv(scores: &[f64], same: &[bool], folds: usize) -> Result<f64> {
    if scores.len() != same.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    if folds < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {folds}")));
    }
    if scores.len() < folds {
        return Err(Error::Insufficient {
            what: "verification pairs".into(),
            required: folds,
            available: scores.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            name: "similarity".into(),
            index: i,
        });
    }
    let usable = scores.len() - scores.len() % folds;
    if usable < scores.len() {
        log::warn!(
            "dropping {} pairs so that {} folds divide evenly",
            scores.len() - usable,
            folds
        );
    }
    let fold_len = usable / folds;
    let mut total = 0.0;
    for k in 0..folds {
        let held = k * fold_len..(k + 1) * fold_len;
        let train: Vec<(f64, bool)> = (0..usable)
            .filter(|i| !held.contains(i))
            .map(|i| (scores[i], same[i]))
            .collect();
        let t = best_threshold(train);
        let correct = held.filter(|&i| (scores[i] > t) == same[i]).count();
        total += correct as f64 / fold_len as f64;
    }
    Ok(100.0 * total / folds as f64)
}

/// Sweep over sorted scores: candidates are one value below the minimum,
/// each midpoint between adjacent distinct scores, and one above the maximum.
fn best_threshold(mut train: Vec<(f64, bool)>) -> f64 {
    train.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = train.len();
    let positives = train.iter().filter(|p| p.1).count();
    // Threshold below everything: all predicted same.
    let mut best_t = train[0].0 - 1.0;
    let mut correct = positives;
    let mut best = correct;
    let mut i = 0;
    while i < n {
        let v = train[i].0;
        while i < n && train[i].0 == v {
            // this score moves to the "different" side
            if train[i].1 {
                correct -= 1;
            } else {
                correct += 1;
            }
            i += 1;
        }
        let t = if i < n { 0.5 * (v + train[i].0) } else { v + 1.0 };
        if correct > best {
            best = correct;
            best_t = t;
        }
    }
    best_t
}

/// Verification accuracy (%) of `pairs` under `embeddings`.
pub fn verify_accuracy(embeddings: &Tensor, pairs: &[VerificationPair], folds: usize) -> Result<f64> {
    let scores = pair_scores(embeddings, pairs)?;
    let same: Vec<bool> = pairs.iter().map(|p| p.same).collect();
    threshold_cv(&scores, &same, folds)
}

/// The value `{:.2}` prints, read back.
pub fn round2(x: f64) -> f64 {
    format!("{x:.2}").parse().expect("formatted float parses")
}

/// Arithmetic mean and sample (n−1) standard deviation.
pub fn mean_stdev(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-group verification accuracies with their mean and spread, all in
/// percent and rounded to two decimals.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub loss: String,
    pub dataset: String,
    pub accuracies: [f64; 4],
    pub avg: f64,
    pub stdv: f64,
}

pub const REPORT_HEADER: [&str; 8] = ["loss", "dataset", "african", "asian", "caucasian", "indian", "avg", "stdv"];

/// Builds a report from accuracies in canonical group order.
pub fn group_report(accuracies: [f64; 4], loss: &str, dataset: &str) -> Result<GroupReport> {
    for (g, a) in GroupLabel::ALL.iter().zip(accuracies) {
        if !(0.0..=100.0).contains(&a) {
            return Err(Error::invalid(format!("accuracy for group {g} out of range: {a}")));
        }
    }
    let (mean, sd) = mean_stdev(&accuracies);
    Ok(GroupReport {
        loss: loss.to_string(),
        dataset: dataset.to_string(),
        accuracies: accuracies.map(round2),
        avg: round2(mean),
        stdv: round2(sd),
    })
}

impl GroupReport {
    pub fn accuracy(&self, group: GroupLabel) -> f64 {
        self.accuracies[group.index()]
    }

    fn record(&self) -> Vec<String> {
        let mut r = vec![self.loss.clone(), self.dataset.clone()];
        r.extend(self.accuracies.iter().map(|a| format!("{a:.2}")));
        r.push(format!("{:.2}", self.avg));
        r.push(format!("{:.2}", self.stdv));
        r
    }
}

pub fn write_reports_csv<W: Write>(out: W, reports: &[GroupReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for r in reports {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports_csv<R: Read>(input: R) -> Result<Vec<GroupReport>> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != REPORT_HEADER {
        return Err(Error::Format(format!("unexpected report header {header:?}")));
    }
    let num = |s: &str| -> Result<f64> {
        s.trim()
            .parse()
            .map_err(|_| Error::Format(format!("bad number `{s}` in report")))
    };
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let mut acc = [0.0; 4];
        for (k, a) in acc.iter_mut().enumerate() {
            *a = num(&rec[2 + k])?;
        }
        out.push(GroupReport {
            loss: rec[0].to_string(),
            dataset: rec[1].to_string(),
            accuracies: acc,
            avg: num(&rec[6])?,
            stdv: num(&rec[7])?,
        });
    }
    Ok(out)
}

/// Aligned markdown table, one row per report.
pub fn reports_markdown(reports: &[GroupReport]) -> String {
    let mut rows = vec![vec![
        "Method".to_string(),
        "Training data".into(),
        "African".into(),
        "Asian".into(),
        "Caucasian".into(),
        "Indian".into(),
        "AVG".into(),
        "STDV".into(),
    ]];
    rows.extend(reports.iter().map(GroupReport::record));
    markdown_table(&rows)
}

fn markdown_table(rows: &[Vec<String>]) -> String {
    let cols = rows[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0).max(3))
        .collect();
    let mut s = String::new();
    for (k, r) in rows.iter().enumerate() {
        s.push('|');
        for (c, cell) in r.iter().enumerate() {
            if c < 2 {
                let _ = write!(s, " {:<w$} |", cell, w = widths[c]);
            } else {
                let _ = write!(s, " {:>w$} |", cell, w = widths[c]);
            }
        }
        s.push('\n');
        if k == 0 {
            s.push('|');
            for (c, w) in widths.iter().enumerate() {
                let rule = "-".repeat(*w);
                if c < 2 {
                    let _ = write!(s, " {rule} |");
                } else {
                    let _ = write!(s, " {}: |", &rule[1..]);
                }
            }
            s.push('\n');
        }
    }
    s
}

/// Treated minus baseline, computed on the reported (rounded) values.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportDelta {
    pub loss: String,
    pub baseline: String,
    pub treated: String,
    pub accuracies: [f64; 4],
    pub avg: f64,
    pub stdv: f64,
}

impl ReportDelta {
    /// Whether the spread across groups went down.
    pub fn stdv_decreased(&self) -> bool {
        self.stdv < 0.0
    }
}

pub fn compare_reports(baseline: &GroupReport, treated: &GroupReport) -> Result<ReportDelta> {
    if baseline.loss != treated.loss {
        return Err(Error::invalid(format!(
            "cannot compare a `{}` report with a `{}` report",
            baseline.loss, treated.loss
        )));
    }
    let d = |a: f64, b: f64| round2(b - a);
    let mut acc = [0.0; 4];
    for k in 0..4 {
        acc[k] = d(baseline.accuracies[k], treated.accuracies[k]);
    }
    Ok(ReportDelta {
        loss: baseline.loss.clone(),
        baseline: baseline.dataset.clone(),
        treated: treated.dataset.clone(),
        accuracies: acc,
        avg: d(baseline.avg, treated.avg),
        stdv: d(baseline.stdv, treated.stdv),
    })
}

pub const DELTA_HEADER: [&str; 10] = [
    "loss",
    "baseline",
    "treated",
    "d_african",
    "d_asian",
    "d_caucasian",
    "d_indian",
    "d_avg",
    "d_stdv",
    "stdv_decreased",
];

fn signed(x: f64) -> String {
    // avoid printing "-0.00"
    let x = if x == 0.0 { 0.0 } else { x };
    format!("{x:+.2}")
}

impl ReportDelta {
    fn record(&self) -> Vec<String> {
        let mut r = vec![self.loss.clone(), self.baseline.clone(), self.treated.clone()];
        r.extend(self.accuracies.iter().map(|&a| signed(a)));
        r.push(signed(self.avg));
        r.push(signed(self.stdv));
        r.push(self.stdv_decreased().to_string());
        r
    }
}

pub fn write_deltas_csv<W: Write>(out: W, deltas: &[ReportDelta]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DELTA_HEADER)?;
    for d in deltas {
        w.write_record(d.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn deltas_markdown(deltas: &[ReportDelta]) -> String {
    let mut rows = vec![vec![
        "Method".to_string(),
        "Comparison".into(),
        "ΔAfrican".into(),
        "ΔAsian".into(),
        "ΔCaucasian".into(),
        "ΔIndian".into(),
        "ΔAVG".into(),
        "ΔSTDV".into(),
    ]];
    for d in deltas {
        let r = d.record();
        let mut row = vec![r[0].clone(), format!("{} → {}", r[1], r[2])];
        row.extend(r[3..9].iter().cloned());
        rows.push(row);
    }
    markdown_table(&rows)
}

/// Number of classifier features: mean intensity plus one texture
/// correlation per group.
pub const CLASSIFIER_FEATURES: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { steps: 400, lr: 0.05 }
    }
}

/// Four-class logistic model over pixel statistics.
#[derive(Clone, Debug)]
pub struct GroupClassifier {
    textures: [Vec<f64>; 4],
    mean: [f64; CLASSIFIER_FEATURES],
    scale: [f64; CLASSIFIER_FEATURES],
    /// `[features, 4]`, row-major.
    weights: Vec<f64>,
    bias: [f64; 4],
    prior_argmax: GroupLabel,
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Raw features, or `None` for a constant image.
fn raw_features(textures: &[Vec<f64>; 4], pixels: &[f64]) -> Option<[f64; CLASSIFIER_FEATURES]> {
    let mut f = [0.0; CLASSIFIER_FEATURES];
    f[0] = pixels.iter().sum::<f64>() / pixels.len() as f64;
    for (k, t) in textures.iter().enumerate() {
        f[1 + k] = pearson(pixels, t)?;
    }
    Some(f)
}

pub fn train_group_classifier(
    dataset: &DomainDataset,
    renderer: &Renderer,
    cfg: &ClassifierConfig,
) -> Result<GroupClassifier> {
    let textures = GroupLabel::ALL.map(|g| renderer.texture(g).to_vec());
    let mut rows: Vec<([f64; CLASSIFIER_FEATURES], usize)> = dataset
        .samples
        .iter()
        .filter_map(|s| raw_features(&textures, &s.pixels).map(|f| (f, s.group.index())))
        .collect();
    let present: BTreeSet<usize> = rows.iter().map(|r| r.1).collect();
    if present.len() < 2 {
        return Err(Error::invalid(format!(
            "group classifier needs at least two groups, found {}",
            present.len()
        )));
    }
    // Canonical order makes every sum below independent of input order.
    rows.sort_by(|a, b| {
        a.1.cmp(&b.1).then_with(|| {
            a.0.iter()
                .zip(&b.0)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });

    let mut counts = [0usize; 4];
    for r in &rows {
        counts[r.1] += 1;
    }
    let prior_argmax = GroupLabel::ALL
        .into_iter()
        .max_by_key(|g| (counts[g.index()], std::cmp::Reverse(g.index())))
        .expect("four groups");

    let n = rows.len();
    let mut mean = [0.0; CLASSIFIER_FEATURES];
    let mut scale = [1.0; CLASSIFIER_FEATURES];
    for j in 0..CLASSIFIER_FEATURES {
        let col: Vec<f64> = rows.iter().map(|r| r.0[j]).collect();
        let (m, sd) = mean_stdev(&col);
        mean[j] = m;
        if sd > 0.0 && sd.is_finite() {
            scale[j] = sd;
        }
    }
    let mut x = Vec::with_capacity(n * CLASSIFIER_FEATURES);
    for r in &rows {
        for j in 0..CLASSIFIER_FEATURES {
            x.push((r.0[j] - mean[j]) / scale[j]);
        }
    }
    let x = Tensor::new(vec![n, CLASSIFIER_FEATURES], x)?;
    let labels: Vec<usize> = rows.iter().map(|r| r.1).collect();

    let mut params = ParamSet::new();
    params.insert_zeros("w", &[CLASSIFIER_FEATURES, 4])?;
    params.insert_zeros("b", &[4])?;
    let adam = AdamConfig::recognition(cfg.lr);
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = tape.param(&params, "w")?;
        let b = tape.param(&params, "b")?;
        let h = tape.matmul(xv, w)?;
        let logits = tape.add_row(h, b)?;
        let loss = cross_entropy(&mut tape, logits, &labels)?;
        params.zero_grad();
        tape.backward(loss, &mut params)?;
        params.adam_step(&adam)?;
    }
    let weights = params.value("w")?.data().to_vec();
    let bv = params.value("b")?.data();
    Ok(GroupClassifier {
        textures,
        mean,
        scale,
        weights,
        bias: [bv[0], bv[1], bv[2], bv[3]],
        prior_argmax,
    })
}

impl GroupClassifier {
    pub fn predict(&self, pixels: &[f64]) -> GroupLabel {
        let Some(f) = raw_features(&self.textures, pixels) else {
            return self.prior_argmax;
        };
        let mut best = (f64::NEG_INFINITY, self.prior_argmax);
        for g in GroupLabel::ALL {
            let k = g.index();
            let mut logit = self.bias[k];
            for j in 0..CLASSIFIER_FEATURES {
                logit += (f[j] - self.mean[j]) / self.scale[j] * self.weights[j * 4 + k];
            }
            // strict comparison keeps the earlier group on ties
            if logit > best.0 {
                best = (logit, g);
            }
        }
        best.1
    }

    /// Percentage of samples whose predicted group equals their label.
    pub fn accuracy(&self, samples: &[Sample]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let hits = samples.iter().filter(|s| self.predict(&s.pixels) == s.group).count();
        100.0 * hits as f64 / samples.len() as f64
    }

    pub fn prior_argmax(&self) -> GroupLabel {
        self.prior_argmax
    }

    /// Learned parameters, for comparing fits.
    pub fn coefficients(&self) -> (&[f64], &[f64; 4]) {
        (&self.weights, &self.bias)
    }
}

/// Share of translated samples that land in their intended group.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferAssessment {
    /// `(source, target) -> (samples, successes)`; empty buckets are absent.
    pub counts: BTreeMap<(GroupLabel, GroupLabel), (usize, usize)>,
}

impl TransferAssessment {
    pub fn rate(&self, src: GroupLabel, tgt: GroupLabel) -> Option<f64> {
        self.counts
            .get(&(src, tgt))
            .map(|&(n, k)| 100.0 * k as f64 / n as f64)
    }

    /// Sample-weighted success rate over all mappings.
    pub fn overall(&self) -> f64 {
        let (n, k) = self
            .counts
            .values()
            .fold((0, 0), |(n, k), &(a, b)| (n + a, k + b));
        if n == 0 {
            0.0
        } else {
            100.0 * k as f64 / n as f64
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["mapping", "success_rate"])?;
        for &(s, t) in self.counts.keys() {
            let rate = self.rate(s, t).expect("present");
            w.write_record([format!("{s}->{t}"), format!("{rate:.2}")])?;
        }
        w.write_record(["overall".to_string(), format!("{:.2}", self.overall())])?;
        w.flush()?;
        Ok(())
    }
}

pub fn transfer_success(translated: &[Sample], classifier: &GroupClassifier) -> Result<TransferAssessment> {
    let mut counts = BTreeMap::new();
    for s in translated {
        let Provenance::Synthesized { source } = s.provenance else {
            return Err(Error::invalid(format!(
                "transfer success needs synthesized samples; subject {} has an original",
                s.subject_id
            )));
        };
        let e = counts.entry((source, s.group)).or_insert((0, 0));
        e.0 += 1;
        if classifier.predict(&s.pixels) == s.group {
            e.1 += 1;
        }
    }
    Ok(TransferAssessment { counts })
}

/// Loss kinds present in both report sets, or an error naming the first
/// one without a counterpart.
pub fn match_reports<'a>(
    baseline: &'a [GroupReport],
    treated: &'a [GroupReport],
) -> Result<Vec<(&'a GroupReport, &'a GroupReport)>> {
    let mut out = Vec::new();
    for b in baseline {
        let t = treated
            .iter()
            .find(|t| t.loss == b.loss)
            .ok_or_else(|| Error::invalid(format!("no treated report for loss `{}`", b.loss)))?;
        out.push((b, t));
    }
    if let Some(t) = treated.iter().find(|t| !baseline.iter().any(|b| b.loss == t.loss)) {
        return Err(Error::invalid(format!("no baseline report for loss `{}`", t.loss)));
    }
    if out.is_empty() {
        return Err(Error::invalid("no reports to compare"));
    }
    Ok(out)
}

/// Parses a loss column value, for callers that need the kind.
pub fn report_kind(report: &GroupReport) -> Result<LossKind> {
    report.loss.parse()
}
