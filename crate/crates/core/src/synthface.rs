//! Synthetic multi-group identity data.
//!
//! Each subject owns a unit identity vector `u`. An image is the spatial
//! pattern `P·u` (a fixed projection shared by every dataset) passed through
//! a per-group transform: an affine intensity map, an additive group texture
//! and pixel noise. Identity therefore lives in the spatial pattern and the
//! group in global intensity and texture statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numgrad::{checkpoint, Tensor};
use crate::seed;

pub const SIDE: usize = 16;
pub const PIXELS: usize = SIDE * SIDE;
pub const IDENTITY_DIM: usize = 8;
pub const TEXTURE_WEIGHT: f64 = 0.15;
pub const NOISE_SIGMA: f64 = 0.05;
/// Mid-grey level the identity pattern is centred on before the group map.
pub const BASE_LEVEL: f64 = 0.5;
/// Per-pixel standard deviation of the identity pattern `P·u`.
pub const IDENTITY_CONTRAST: f64 = 0.05;
/// First subject id of verification splits; keeps them disjoint from training ids.
pub const VERIFICATION_ID_BASE: u64 = 1_000_000;

const RENDER_MODEL_SEED: u64 = 0x5EED_FACE;

/// Group (domain) label. Ordering is fixed: `A < E < C < I`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupLabel {
    /// African
    A,
    /// Asian
    E,
    /// Caucasian
    C,
    /// Indian
    I,
}

impl GroupLabel {
    pub const ALL: [GroupLabel; 4] = [GroupLabel::A, GroupLabel::E, GroupLabel::C, GroupLabel::I];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn letter(self) -> char {
        match self {
            GroupLabel::A => 'A',
            GroupLabel::E => 'E',
            GroupLabel::C => 'C',
            GroupLabel::I => 'I',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GroupLabel::A => "african",
            GroupLabel::E => "asian",
            GroupLabel::C => "caucasian",
            GroupLabel::I => "indian",
        }
    }

    /// `(gain, bias)` of the group's intensity map.
    pub fn intensity_map(self) -> (f64, f64) {
        match self {
            GroupLabel::A => (0.6, 0.05),
            GroupLabel::E => (0.8, 0.15),
            GroupLabel::C => (1.0, 0.30),
            GroupLabel::I => (0.8, 0.05),
        }
    }
}

impl fmt::Display for GroupLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for GroupLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" | "african" => Ok(GroupLabel::A),
            "E" | "e" | "asian" => Ok(GroupLabel::E),
            "C" | "c" | "caucasian" => Ok(GroupLabel::C),
            "I" | "i" | "indian" => Ok(GroupLabel::I),
            other => Err(Error::invalid(format!("unknown group `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectLatent {
    pub id: u64,
    /// Unit-norm identity vector.
    pub identity: Vec<f64>,
    pub home: GroupLabel,
}

/// Draws a subject. The identity vector depends on `seed` only, so the same
/// seed under another home group keeps its identity.
pub fn make_subject(id: u64, seed: u64, group: GroupLabel) -> SubjectLatent {
    let mut rng = seed::rng(&[seed, seed::tag("subject")]);
    let mut u: Vec<f64> = (0..IDENTITY_DIM).map(|_| rng.sample(StandardNormal)).collect();
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    u.iter_mut().for_each(|x| *x /= norm);
    SubjectLatent {
        id,
        identity: u,
        home: group,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    Original,
    Synthesized { source: GroupLabel },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// 16×16 grayscale, row-major, each value in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub subject_id: u64,
    pub group: GroupLabel,
    pub provenance: Provenance,
    pub render_seed: u64,
}

impl Sample {
    pub fn is_original(&self) -> bool {
        self.provenance == Provenance::Original
    }

    /// Group of the subject this sample depicts.
    pub fn home_group(&self) -> GroupLabel {
        match self.provenance {
            Provenance::Original => self.group,
            Provenance::Synthesized { source } => source,
        }
    }

    pub fn mean_intensity(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }
}

/// The fixed image model shared by every dataset: identity projection,
/// group textures and noise level.
#[derive(Clone, Debug)]
pub struct Renderer {
    /// `PIXELS × IDENTITY_DIM`, row-major.
    projection: Vec<f64>,
    textures: [Vec<f64>; 4],
    noise_sigma: f64,
}

impl Default for Renderer {
    fn default() -> Self {
        Self::new(RENDER_MODEL_SEED)
    }
}

impl Renderer {
    pub fn new(model_seed: u64) -> Self {
        let mut rng = seed::rng(&[model_seed, seed::tag("projection")]);
        let projection = (0..PIXELS * IDENTITY_DIM)
            .map(|_| IDENTITY_CONTRAST * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let textures = GroupLabel::ALL.map(|g| {
            let mut rng = seed::rng(&[model_seed, seed::tag("texture"), g.index() as u64]);
            let mut t: Vec<f64> = (0..PIXELS).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mean = t.iter().sum::<f64>() / PIXELS as f64;
            t.iter_mut().for_each(|v| *v -= mean);
            t
        });
        Renderer {
            projection,
            textures,
            noise_sigma: NOISE_SIGMA,
        }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    /// Zero-mean texture mask of a group.
    pub fn texture(&self, group: GroupLabel) -> &[f64] {
        &self.textures[group.index()]
    }

    /// `P·u`, before any group transform.
    pub fn identity_pattern(&self, identity: &[f64]) -> Vec<f64> {
        self.projection
            .chunks_exact(IDENTITY_DIM)
            .map(|row| row.iter().zip(identity).map(|(p, u)| p * u).sum())
            .collect()
    }

    /// Renders `subject` under `group`'s transform with noise from `noise_seed`.
    pub fn render(&self, subject: &SubjectLatent, group: GroupLabel, noise_seed: u64) -> Sample {
        let (gain, bias) = group.intensity_map();
        let texture = self.texture(group);
        let mut rng = seed::rng(&[noise_seed, seed::tag("noise")]);
        let pixels = self
            .identity_pattern(&subject.identity)
            .into_iter()
            .zip(texture)
            .map(|(id, tex)| {
                let noise = if self.noise_sigma > 0.0 {
                    self.noise_sigma * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                (gain * (BASE_LEVEL + id) + bias + TEXTURE_WEIGHT * tex + noise).clamp(0.0, 1.0)
            })
            .collect();
        Sample {
            pixels,
            subject_id: subject.id,
            group,
            provenance: Provenance::Original,
            render_seed: noise_seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Verification,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Verification => 1,
        }
    }
}

/// Generation settings for [`build_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    /// Subjects per group in `A, E, C, I` order.
    pub subjects_per_group: [usize; 4],
    pub images_per_subject: usize,
    pub seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub samples: Vec<Sample>,
    pub split: Split,
}

/// Renders `Σ subjects × images_per_subject` original samples. Subject ids
/// are contiguous per group, in canonical group order.
pub fn build_dataset(renderer: &Renderer, cfg: &DatasetConfig) -> Result<DomainDataset> {
    if cfg.images_per_subject == 0 || cfg.subjects_per_group.contains(&0) {
        return Err(Error::invalid(format!(
            "dataset counts must be at least 1 (subjects {:?}, images {})",
            cfg.subjects_per_group, cfg.images_per_subject
        )));
    }
    let split_tag = seed::tag(match cfg.split {
        Split::Train => "train",
        Split::Verification => "verification",
    });
    let mut next_id = match cfg.split {
        Split::Train => 0,
        Split::Verification => VERIFICATION_ID_BASE,
    };
    let mut samples = Vec::new();
    for group in GroupLabel::ALL {
        for _ in 0..cfg.subjects_per_group[group.index()] {
            let id = next_id;
            next_id += 1;
            let subject = make_subject(id, seed::derive(&[cfg.seed, split_tag, id]), group);
            for k in 0..cfg.images_per_subject {
                let noise_seed = seed::derive(&[cfg.seed, split_tag, id, k as u64]);
                samples.push(renderer.render(&subject, group, noise_seed));
            }
        }
    }
    Ok(DomainDataset {
        samples,
        split: cfg.split,
    })
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples whose label is `group` (original or translated into it).
    pub fn in_group(&self, group: GroupLabel) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.group == group)
    }

    pub fn originals(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.is_original())
    }

    /// Sample counts per label, `A, E, C, I` order.
    pub fn group_sample_counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for s in &self.samples {
            counts[s.group.index()] += 1;
        }
        counts
    }

    /// Distinct subjects per home group.
    pub fn group_subject_counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for g in self.subject_home_groups().values() {
            counts[g.index()] += 1;
        }
        counts
    }

    /// Number of samples per subject id (synthesized samples included).
    pub fn subject_image_counts(&self) -> BTreeMap<u64, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.samples {
            *counts.entry(s.subject_id).or_insert(0) += 1;
        }
        counts
    }

    pub fn subject_home_groups(&self) -> BTreeMap<u64, GroupLabel> {
        self.samples.iter().map(|s| (s.subject_id, s.home_group())).collect()
    }

    /// Pixel matrix `[len, PIXELS]`.
    pub fn pixel_tensor(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.samples.iter().map(|s| s.pixels.as_slice()).collect::<Vec<_>>())
    }

    /// SHA-256 over split, metadata and pixel bits of every sample.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update([self.split.code()]);
        for s in &self.samples {
            h.update(s.subject_id.to_le_bytes());
            h.update([s.group.index() as u8]);
            match s.provenance {
                Provenance::Original => h.update([0u8, 0]),
                Provenance::Synthesized { source } => h.update([1u8, source.index() as u8]),
            }
            h.update(s.render_seed.to_le_bytes());
            for p in &s.pixels {
                h.update(p.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes `dataset.ftns` (pixel block) and `samples.csv` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let entries = vec![
            ("pixels".to_string(), self.pixel_tensor()?),
            ("split".to_string(), Tensor::scalar(f64::from(self.split.code()))),
        ];
        checkpoint::save(&dir.join("dataset.ftns"), &entries)?;

        let tmp = dir.join("samples.csv.partial");
        {
            let mut w = csv::Writer::from_path(&tmp)?;
            w.write_record(["sample_id", "subject_id", "group", "provenance", "source_group", "render_seed"])?;
            for (i, s) in self.samples.iter().enumerate() {
                let (prov, source) = match s.provenance {
                    Provenance::Original => ("original", String::new()),
                    Provenance::Synthesized { source } => ("synthesized", source.to_string()),
                };
                w.write_record([
                    i.to_string(),
                    s.subject_id.to_string(),
                    s.group.to_string(),
                    prov.to_string(),
                    source,
                    s.render_seed.to_string(),
                ])?;
            }
            w.flush()?;
        }
        fs::rename(tmp, dir.join("samples.csv"))?;
        Ok(())
    }

    /// Reads a dataset written by [`DomainDataset::export`].
    pub fn import(dir: &Path) -> Result<Self> {
        let entries = checkpoint::load(&dir.join("dataset.ftns"))?;
        let pixels = checkpoint::entry(&entries, "pixels")?;
        let split = match checkpoint::entry(&entries, "split")?.item() as u8 {
            0 => Split::Train,
            1 => Split::Verification,
            other => return Err(Error::Format(format!("unknown split code {other}"))),
        };
        let (rows, cols) = pixels
            .dims2()
            .filter(|&(_, c)| c == PIXELS)
            .ok_or_else(|| Error::Format(format!("pixel block has shape {:?}", pixels.shape())))?;

        let mut reader = csv::Reader::from_reader(BufReader::new(File::open(dir.join("samples.csv"))?));
        let mut samples = Vec::with_capacity(rows);
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let field = |k: usize| rec.get(k).ok_or_else(|| Error::Format(format!("row {i}: missing column {k}")));
            let parse_u64 = |k: usize| -> Result<u64> {
                field(k)?
                    .parse()
                    .map_err(|_| Error::Format(format!("row {i}: bad integer in column {k}")))
            };
            if parse_u64(0)? != i as u64 {
                return Err(Error::Format(format!("row {i}: sample ids out of order")));
            }
            let provenance = match field(3)? {
                "original" => Provenance::Original,
                "synthesized" => Provenance::Synthesized {
                    source: field(4)?.parse()?,
                },
                other => return Err(Error::Format(format!("row {i}: provenance `{other}`"))),
            };
            if i >= rows {
                return Err(Error::Format("more rows than pixel block".into()));
            }
            samples.push(Sample {
                pixels: pixels.row(i).to_vec(),
                subject_id: parse_u64(1)?,
                group: field(2)?.parse()?,
                provenance,
                render_seed: parse_u64(5)?,
            });
        }
        if samples.len() != rows || cols != PIXELS {
            return Err(Error::Format(format!("{} csv rows for {rows} pixel rows", samples.len())));
        }
        Ok(DomainDataset { samples, split })
    }
}
