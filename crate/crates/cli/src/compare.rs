//! Baseline-versus-treated comparisons and multi-seed sweeps.

use std::fmt::Write as _;
use std::path::Path;

use fairtrans_core::augment::PlanKind;
use fairtrans_core::faireval::{
    compare_reports, deltas_markdown, match_reports, read_reports_csv, write_deltas_csv, GroupReport, ReportDelta,
};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::pipeline::{run_experiment, REPORTS};
use crate::workspace::write_atomic;

pub const DELTAS: &str = "deltas.csv";
pub const DELTAS_MD: &str = "deltas.md";
pub const SWEEP: &str = "sweep.csv";
pub const SWEEP_MD: &str = "sweep.md";

/// Direction of the spread change across loss kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    /// ΔSTDV < 0 for a strict majority of loss kinds.
    Reduced,
    /// Every ΔSTDV is exactly zero.
    Unchanged,
    NotReduced,
}

impl Verdict {
    pub fn of(deltas: &[ReportDelta]) -> Self {
        if deltas.iter().all(|d| d.stdv == 0.0) {
            Verdict::Unchanged
        } else if 2 * deltas.iter().filter(|d| d.stdv_decreased()).count() > deltas.len() {
            Verdict::Reduced
        } else {
            Verdict::NotReduced
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Reduced | Verdict::Unchanged => 0,
            Verdict::NotReduced => 3,
        }
    }
}

pub fn read_reports(dir: &Path) -> Result<Vec<GroupReport>> {
    let path = dir.join(REPORTS);
    if !path.exists() {
        return Err(CliError::MissingArtifact(path));
    }
    Ok(read_reports_csv(std::fs::File::open(path)?)?)
}

pub fn delta_table(baseline: &[GroupReport], treated: &[GroupReport]) -> Result<Vec<ReportDelta>> {
    match_reports(baseline, treated)?
        .into_iter()
        .map(|(b, t)| compare_reports(b, t).map_err(CliError::from))
        .collect()
}

/// Compares the reports of two run directories and writes the delta table
/// (CSV and markdown) into `out`.
pub fn compare_dirs(baseline: &Path, treated: &Path, out: &Path) -> Result<(Vec<ReportDelta>, Verdict)> {
    let deltas = delta_table(&read_reports(baseline)?, &read_reports(treated)?)?;
    let mut bytes = Vec::new();
    write_deltas_csv(&mut bytes, &deltas)?;
    write_atomic(&out.join(DELTAS), &bytes)?;
    write_atomic(&out.join(DELTAS_MD), deltas_markdown(&deltas).as_bytes())?;
    Ok((deltas.clone(), Verdict::of(&deltas)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub seed: u64,
    pub delta: ReportDelta,
    /// Overall transfer success (%) of the treated run.
    pub transfer: Option<f64>,
}

/// Middle element after sorting; the lower one of the two middles for an
/// even count.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

pub const SWEEP_HEADER: [&str; 9] = [
    "seed",
    "loss",
    "d_african",
    "d_asian",
    "d_caucasian",
    "d_indian",
    "d_avg",
    "d_stdv",
    "transfer",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    /// Per loss kind: median of each delta column and of transfer.
    pub medians: Vec<(String, [f64; 6], Option<f64>)>,
}

impl SweepSummary {
    fn from_rows(rows: Vec<SweepRow>) -> Self {
        let mut losses: Vec<String> = Vec::new();
        for r in &rows {
            if !losses.contains(&r.delta.loss) {
                losses.push(r.delta.loss.clone());
            }
        }
        let medians = losses
            .into_iter()
            .map(|loss| {
                let mine: Vec<&SweepRow> = rows.iter().filter(|r| r.delta.loss == loss).collect();
                let col = |f: &dyn Fn(&ReportDelta) -> f64| median(&mine.iter().map(|r| f(&r.delta)).collect::<Vec<_>>());
                let m = [
                    col(&|d| d.accuracies[0]),
                    col(&|d| d.accuracies[1]),
                    col(&|d| d.accuracies[2]),
                    col(&|d| d.accuracies[3]),
                    col(&|d| d.avg),
                    col(&|d| d.stdv),
                ];
                let t: Option<Vec<f64>> = mine.iter().map(|r| r.transfer).collect();
                (loss, m, t.map(|t| median(&t)))
            })
            .collect();
        SweepSummary { rows, medians }
    }

    pub fn write_csv(&self, out: &Path) -> Result<()> {
        let fmt = |x: f64| format!("{:+.2}", if x == 0.0 { 0.0 } else { x });
        let tr = |t: Option<f64>| t.map(|t| format!("{t:.2}")).unwrap_or_default();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(SWEEP_HEADER)?;
        for r in &self.rows {
            let d = &r.delta;
            let mut rec = vec![r.seed.to_string(), d.loss.clone()];
            rec.extend(d.accuracies.iter().map(|&a| fmt(a)));
            rec.push(fmt(d.avg));
            rec.push(fmt(d.stdv));
            rec.push(tr(r.transfer));
            w.write_record(rec)?;
        }
        for (loss, m, t) in &self.medians {
            let mut rec = vec!["median".to_string(), loss.clone()];
            rec.extend(m.iter().map(|&x| fmt(x)));
            rec.push(tr(*t));
            w.write_record(rec)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
        write_atomic(out, &bytes)
    }

    pub fn markdown(&self) -> String {
        let mut s = String::from("| seed | loss | ΔA | ΔE | ΔC | ΔI | Δavg | Δstdv | transfer |\n|---|---|---|---|---|---|---|---|---|\n");
        let tr = |t: Option<f64>| t.map(|t| format!("{t:.2}")).unwrap_or_else(|| "-".into());
        for r in &self.rows {
            let d = &r.delta;
            let _ = writeln!(
                s,
                "| {} | {} | {:+.2} | {:+.2} | {:+.2} | {:+.2} | {:+.2} | {:+.2} | {} |",
                r.seed, d.loss, d.accuracies[0], d.accuracies[1], d.accuracies[2], d.accuracies[3], d.avg, d.stdv,
                tr(r.transfer)
            );
        }
        for (loss, m, t) in &self.medians {
            let _ = writeln!(
                s,
                "| median | {loss} | {:+.2} | {:+.2} | {:+.2} | {:+.2} | {:+.2} | {:+.2} | {} |",
                m[0], m[1], m[2], m[3], m[4], m[5], tr(*t)
            );
        }
        s
    }
}

/// Runs a baseline (no augmentation) and a treated run per seed under
/// `root/seed-<s>/`, then writes the per-seed deltas with median rows.
pub fn seed_sweep(cfg: &ExperimentConfig, seeds: &[u64], root: &Path) -> Result<SweepSummary> {
    if seeds.len() < 3 {
        return Err(CliError::Usage(format!("a sweep needs at least 3 seeds, got {}", seeds.len())));
    }
    let treated_plan = if cfg.plan == PlanKind::None { PlanKind::Full } else { cfg.plan };
    let mut rows = Vec::new();
    for &seed in seeds {
        let dir = root.join(format!("seed-{seed}"));
        let base_cfg = ExperimentConfig {
            seed,
            plan: PlanKind::None,
            ..cfg.clone()
        };
        let treat_cfg = ExperimentConfig {
            seed,
            plan: treated_plan,
            ..cfg.clone()
        };
        log::info!("seed {seed}: baseline");
        let base = run_experiment(&base_cfg, &dir.join("baseline"))?;
        log::info!("seed {seed}: treated ({treated_plan})");
        let treated = run_experiment(&treat_cfg, &dir.join("treated"))?;
        for delta in delta_table(&base.reports, &treated.reports)? {
            rows.push(SweepRow {
                seed,
                delta,
                transfer: treated.transfer_overall,
            });
        }
    }
    let summary = SweepSummary::from_rows(rows);
    summary.write_csv(&root.join(SWEEP))?;
    write_atomic(&root.join(SWEEP_MD), summary.markdown().as_bytes())?;
    Ok(summary)
}
