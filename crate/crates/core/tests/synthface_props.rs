use fairtrans_core::faireval::{train_group_classifier, ClassifierConfig};
use fairtrans_core::synthface::{
    build_dataset, make_subject, DatasetConfig, DomainDataset, GroupLabel, Renderer, Split, IDENTITY_DIM, PIXELS,
    TEXTURE_WEIGHT,
};

fn dataset(subjects: [usize; 4], images: usize, seed: u64) -> DomainDataset {
    build_dataset(
        &Renderer::default(),
        &DatasetConfig {
            subjects_per_group: subjects,
            images_per_subject: images,
            seed,
            split: Split::Train,
        },
    )
    .unwrap()
}

#[test]
fn group_is_recoverable_from_pixel_statistics() {
    let train = dataset([25; 4], 4, 1);
    assert_eq!(train.len(), 400);
    let clf = train_group_classifier(&train, &Renderer::default(), &ClassifierConfig::default()).unwrap();
    assert!(clf.accuracy(&train.samples) >= 95.0);
    let held_out = dataset([25; 4], 4, 2);
    let acc = clf.accuracy(&held_out.samples);
    assert!(acc >= 95.0, "{acc}");
}

#[test]
fn identity_survives_rendering() {
    for group in GroupLabel::ALL {
        let mut subjects = [1; 4];
        subjects[group.index()] = 5;
        let d = dataset(subjects, 10, 3);
        let members: Vec<_> = d.in_group(group).collect();
        assert_eq!(members.len(), 50);
        let mut hits = 0;
        for (i, a) in members.iter().enumerate() {
            let nearest = members
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| {
                    let dist: f64 = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y) * (x - y)).sum();
                    (dist, b.subject_id)
                })
                .min_by(|x, y| x.0.total_cmp(&y.0))
                .unwrap();
            hits += usize::from(nearest.1 == a.subject_id);
        }
        let rate = 100.0 * hits as f64 / members.len() as f64;
        assert!(rate >= 80.0, "group {group}: {rate}");
    }
}

/// Solves the 8×8 normal equations `PᵀP u = Pᵀy` by Gaussian elimination.
fn least_squares(p: &[f64], y: &[f64]) -> Vec<f64> {
    let k = IDENTITY_DIM;
    let mut a = vec![vec![0.0; k + 1]; k];
    for r in 0..PIXELS {
        let row = &p[r * k..(r + 1) * k];
        for i in 0..k {
            for j in 0..k {
                a[i][j] += row[i] * row[j];
            }
            a[i][k] += row[i] * y[r];
        }
    }
    for c in 0..k {
        let piv = (c..k).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs())).unwrap();
        a.swap(c, piv);
        for r in 0..k {
            if r != c {
                let f = a[r][c] / a[c][c];
                for j in c..=k {
                    a[r][j] -= f * a[c][j];
                }
            }
        }
    }
    (0..k).map(|i| a[i][k] / a[i][i]).collect()
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    sxy / (sxx * syy).sqrt()
}

#[test]
fn identity_decodes_by_least_squares() {
    let r = Renderer::default();
    for group in GroupLabel::ALL {
        let (gain, bias) = group.intensity_map();
        let tex = r.texture(group);
        let mut corrs = Vec::new();
        for id in 0..40u64 {
            let subject = make_subject(id, 100 + id, group);
            let a = r.render(&subject, group, 1);
            let b = r.render(&subject, group, 2);
            let l1: f64 = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y).abs()).sum();
            assert!(l1 > 0.0);
            let y: Vec<f64> = a
                .pixels
                .iter()
                .zip(tex)
                .map(|(px, t)| (px - bias - TEXTURE_WEIGHT * t) / gain - 0.5)
                .collect();
            let u = least_squares(r.projection(), &y);
            corrs.push(pearson(&u, &subject.identity));
        }
        let mean = corrs.iter().sum::<f64>() / corrs.len() as f64;
        assert!(mean > 0.9, "group {group}: {mean}");
    }
}

#[test]
fn mean_intensity_ordering() {
    let r = Renderer::default();
    let mean = |g: GroupLabel| {
        (0..500u64)
            .map(|k| r.render(&make_subject(k, k, g), g, k).mean_intensity())
            .sum::<f64>()
            / 500.0
    };
    let [a, e, c, i] = GroupLabel::ALL.map(mean);
    assert!(c > e && c > i, "{c} {e} {i}");
    assert!(e > a && i > a, "{e} {i} {a}");
}

#[test]
fn relabeling_changes_only_the_group_transform() {
    let r = Renderer::default().with_noise(0.0);
    for id in 0..20u64 {
        let home = make_subject(id, 500 + id, GroupLabel::A);
        let moved = make_subject(id, 500 + id, GroupLabel::I);
        assert_eq!(home.identity, moved.identity);
        let pattern = r.identity_pattern(&home.identity);
        for g in GroupLabel::ALL {
            let (gain, bias) = g.intensity_map();
            let px = r.render(&moved, g, 0).pixels;
            for ((p, t), id_px) in px.iter().zip(r.texture(g)).zip(&pattern) {
                if *p > 0.0 && *p < 1.0 {
                    let recovered = (p - bias - TEXTURE_WEIGHT * t) / gain - 0.5;
                    assert!((recovered - id_px).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn export_import_round_trip() {
    let d = dataset([2, 1, 3, 1], 3, 4);
    let dir = tempfile::tempdir().unwrap();
    d.export(dir.path()).unwrap();
    let back = DomainDataset::import(dir.path()).unwrap();
    assert_eq!(back, d);
    assert_eq!(back.fingerprint(), d.fingerprint());
    let csv = std::fs::read_to_string(dir.path().join("samples.csv")).unwrap();
    assert!(csv.starts_with("sample_id,subject_id,group,provenance,source_group,render_seed\n"));
    assert_eq!(csv.lines().count(), 1 + d.len());
}

#[test]
fn subject_bookkeeping() {
    let d = dataset([5, 5, 40, 5], 4, 5);
    assert_eq!(d.group_sample_counts(), [20, 20, 160, 20]);
    assert_eq!(d.group_subject_counts(), [5, 5, 40, 5]);
    assert!(d.subject_image_counts().values().all(|&n| n == 4));
    for s in &d.samples {
        assert_eq!(d.subject_home_groups()[&s.subject_id], s.group);
    }
}
