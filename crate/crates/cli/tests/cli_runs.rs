use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fairtrans_core::faireval::{group_report, write_reports_csv};

const SMOKE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.cfg");

fn fairtrans(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fairtrans"));
    cmd.args(args).env_remove("FAIRTRANS_OUT").env("RUST_LOG", "warn");
    if let Some(p) = env_out {
        cmd.env("FAIRTRANS_OUT", p);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn baseline_and_treated_runs_compare() {
    let dir = tempfile::tempdir().unwrap();
    let (base, treated, cmp) = (dir.path().join("base"), dir.path().join("treated"), dir.path().join("cmp"));
    let cfg_none = dir.path().join("none.cfg");
    let text = std::fs::read_to_string(SMOKE).unwrap().replace("plan = full", "plan = none");
    std::fs::write(&cfg_none, text).unwrap();

    assert_eq!(code(&fairtrans(&["run", "--config", p(&cfg_none), "--out", p(&base), "--quiet"], None)), 0);
    assert!(!base.join("translators").exists() && !base.join("transfer.csv").exists());
    assert_eq!(code(&fairtrans(&["run", "--config", SMOKE, "--out", p(&treated), "--quiet"], None)), 0);
    assert!(treated.join("transfer.csv").exists());

    let o = fairtrans(&["compare", p(&base), p(&treated), "--out", p(&cmp)], None);
    assert!([0, 3].contains(&code(&o)), "{o:?}");
    let deltas = std::fs::read_to_string(cmp.join("deltas.csv")).unwrap();
    assert_eq!(deltas.lines().count(), 4);
    assert!(deltas.contains("synthetic-none-s1,synthetic-full-s1"));
}

#[test]
fn compare_exit_status_follows_the_spread() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, rows: &[(&str, [f64; 4])]| -> PathBuf {
        let d = dir.path().join(name);
        std::fs::create_dir_all(&d).unwrap();
        let reports: Vec<_> = rows.iter().map(|(l, a)| group_report(*a, l, name).unwrap()).collect();
        write_reports_csv(std::fs::File::create(d.join("reports.csv")).unwrap(), &reports).unwrap();
        d
    };
    let base = write(
        "base",
        &[
            ("softmax", [69.10, 73.70, 79.25, 76.78]),
            ("cosface", [82.78, 82.68, 87.53, 85.41]),
            ("arcface", [80.91, 81.78, 86.86, 83.70]),
        ],
    );
    let races = write(
        "races",
        &[
            ("softmax", [70.65, 75.68, 80.27, 78.28]),
            ("cosface", [83.22, 83.23, 87.95, 85.77]),
            ("arcface", [81.28, 82.83, 85.95, 84.72]),
        ],
    );
    let out = dir.path().join("out");
    let o = fairtrans(&["compare", p(&base), p(&races), "--out", p(&out)], None);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(out.join("deltas.csv")).unwrap();
    let d_stdv: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(8).unwrap()).collect();
    assert_eq!(d_stdv, ["-0.21", "-0.05", "-0.58"]);

    assert_eq!(code(&fairtrans(&["compare", p(&races), p(&base), "--out", p(&out)], None)), 3);
    assert_eq!(code(&fairtrans(&["compare", p(&base), p(&base), "--out", p(&out)], None)), 0);
    let other = write("other", &[("softmax", [1.0; 4])]);
    assert_eq!(code(&fairtrans(&["compare", p(&base), p(&other), "--out", p(&out)], None)), 2);
}

#[test]
fn unknown_loss_kind_stops_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "[experiment]\nseed = 1\n\n[recognition.triplet]\nmargin = 0.2\n").unwrap();
    let out = dir.path().join("run");
    let o = fairtrans(&["run", "--config", p(&cfg), "--out", p(&out)], None);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.cfg:4:") && err.contains("triplet"), "{err}");
    assert!(!out.exists());
}

#[test]
fn phases_resume_and_rerun_after_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    // FAIRTRANS_OUT supplies the directory when --out is absent
    assert_eq!(code(&fairtrans(&["gen", "--config", SMOKE], Some(&out))), 0);
    assert!(out.join("data/train/samples.csv").exists());
    assert!(!out.join("reports.csv").exists());

    let o = fairtrans(&["augment", "--config", SMOKE], Some(&out));
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("translators"));

    for step in ["train-translators", "augment", "train", "eval"] {
        assert_eq!(code(&fairtrans(&[step, "--config", SMOKE, "--quiet"], Some(&out))), 0, "{step}");
    }
    let reports = std::fs::read(out.join("reports.csv")).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let stamp = manifest["phases"]["train"]["seconds"].clone();

    // untouched: everything is up to date, nothing is retrained
    assert_eq!(code(&fairtrans(&["run", "--config", SMOKE, "--quiet"], Some(&out))), 0);
    let again: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(again["phases"]["train"]["seconds"], stamp);

    // a damaged model is detected and rebuilt to the same bytes
    std::fs::write(out.join("models/arcface.ftns"), b"junk").unwrap();
    assert_eq!(code(&fairtrans(&["run", "--config", SMOKE, "--quiet"], Some(&out))), 0);
    assert_eq!(std::fs::read(out.join("reports.csv")).unwrap(), reports);

    // the manifest lists exactly the files present, with their hashes
    let m = fairtrans_cli::RunManifest::load(&out).unwrap();
    for (rel, hash) in &m.files {
        assert_eq!(&fairtrans_cli::workspace::sha256_file(&out.join(rel)).unwrap(), hash);
    }
    let mut on_disk = Vec::new();
    collect(&out, &out, &mut on_disk);
    on_disk.retain(|f| f != "manifest.json");
    assert_eq!(on_disk, m.files.keys().cloned().collect::<Vec<_>>());
    assert_eq!(m.seed, 1);
    assert!(m.config.contains("plan = full"));
    assert_eq!(m.dataset_fingerprint.len(), 2);
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) {
    let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for e in entries {
        if e.is_dir() {
            collect(root, &e, out);
        } else {
            out.push(e.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/"));
        }
    }
    out.sort();
}

#[test]
fn sweep_rows_per_seed_and_median() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let o = fairtrans(&["sweep", "--config", SMOKE, "--seeds", "4,4,4", "--out", p(&out), "--quiet"], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    // header, 3 seeds x 3 losses, 3 medians
    assert_eq!(lines.len(), 1 + 9 + 3);
    let softmax: Vec<&str> = lines.iter().filter(|l| l.contains(",softmax,")).copied().collect();
    let tail = |l: &str| l.split_once(',').unwrap().1.to_string();
    assert!(softmax.iter().all(|l| tail(l) == tail(softmax[0])));
    assert!(softmax[3].starts_with("median,"));
    assert!(out.join("seed-4/baseline/reports.csv").exists());
    assert!(out.join("seed-4/treated/transfer.csv").exists());
}
