//! Per-subject augmentation: every original image is followed by its
//! translations into the other group domains listed in a plan.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::cycletrans::{translate_samples, MappingRegistry};
use crate::error::{Error, Result};
use crate::synthface::{DomainDataset, GroupLabel, Sample};

/// Stock plans.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanKind {
    /// No augmentation (baseline).
    None,
    /// Every group into all three others.
    Full,
    /// Like `Full`, except the most populous group is never translated.
    SkipDominant,
}

impl FromStr for PlanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(PlanKind::None),
            "full" => Ok(PlanKind::Full),
            "skip-dominant" => Ok(PlanKind::SkipDominant),
            other => Err(Error::invalid(format!("unknown augmentation plan `{other}`"))),
        }
    }
}

impl fmt::Display for PlanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlanKind::None => "none",
            PlanKind::Full => "full",
            PlanKind::SkipDominant => "skip-dominant",
        })
    }
}

/// Target domains per source group. Groups in the skip set have no targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentationPlan {
    targets: BTreeMap<GroupLabel, Vec<GroupLabel>>,
    skip: BTreeSet<GroupLabel>,
}

impl AugmentationPlan {
    /// Builds a plan; target lists are sorted into canonical group order.
    pub fn new(targets: BTreeMap<GroupLabel, Vec<GroupLabel>>, skip: BTreeSet<GroupLabel>) -> Result<Self> {
        let mut targets = targets;
        for (src, list) in targets.iter_mut() {
            if list.contains(src) {
                return Err(Error::invalid(format!("plan maps group {src} to itself")));
            }
            list.sort();
            list.dedup();
            if skip.contains(src) && !list.is_empty() {
                return Err(Error::invalid(format!("skipped group {src} has targets")));
            }
        }
        for g in GroupLabel::ALL {
            targets.entry(g).or_default();
        }
        Ok(AugmentationPlan { targets, skip })
    }

    pub fn full() -> Self {
        Self::skipping(BTreeSet::new())
    }

    pub fn none() -> Self {
        Self::skipping(GroupLabel::ALL.into_iter().collect())
    }

    /// Full plan minus translations out of the groups in `skip`.
    pub fn skipping(skip: BTreeSet<GroupLabel>) -> Self {
        let targets = GroupLabel::ALL
            .into_iter()
            .map(|src| {
                let list = if skip.contains(&src) {
                    Vec::new()
                } else {
                    GroupLabel::ALL.into_iter().filter(|&t| t != src).collect()
                };
                (src, list)
            })
            .collect();
        AugmentationPlan { targets, skip }
    }

    /// Full plan that leaves the group with the most original samples
    /// untranslated (ties go to the earlier group).
    pub fn skip_dominant(dataset: &DomainDataset) -> Self {
        let mut counts = [0usize; 4];
        for s in dataset.originals() {
            counts[s.group.index()] += 1;
        }
        let dominant = GroupLabel::ALL
            .into_iter()
            .max_by_key(|g| (counts[g.index()], std::cmp::Reverse(g.index())))
            .expect("four groups");
        Self::skipping([dominant].into_iter().collect())
    }

    pub fn from_kind(kind: PlanKind, dataset: &DomainDataset) -> Self {
        match kind {
            PlanKind::None => Self::none(),
            PlanKind::Full => Self::full(),
            PlanKind::SkipDominant => Self::skip_dominant(dataset),
        }
    }

    pub fn targets(&self, group: GroupLabel) -> &[GroupLabel] {
        self.targets.get(&group).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn skip_set(&self) -> &BTreeSet<GroupLabel> {
        &self.skip
    }

    /// Every directed mapping the plan uses.
    pub fn mappings(&self) -> Vec<(GroupLabel, GroupLabel)> {
        self.targets
            .iter()
            .flat_map(|(&s, ts)| ts.iter().map(move |&t| (s, t)))
            .collect()
    }

    /// `Σ (1 + |targets(group)|)` over the originals of `dataset`.
    pub fn expected_size(&self, dataset: &DomainDataset) -> usize {
        dataset.originals().map(|s| 1 + self.targets(s.group).len()).sum()
    }
}

fn require_original(sample: &Sample) -> Result<()> {
    if !sample.is_original() {
        return Err(Error::invalid(format!(
            "sample of subject {} is already synthesized; chained translation is not allowed",
            sample.subject_id
        )));
    }
    Ok(())
}

/// `[sample] ++ [translate(sample, group, t) for t in targets]`.
pub fn augment_image(sample: &Sample, plan: &AugmentationPlan, registry: &MappingRegistry) -> Result<Vec<Sample>> {
    require_original(sample)?;
    let mut out = vec![sample.clone()];
    for &t in plan.targets(sample.group) {
        out.extend(translate_samples(&[sample], sample.group, t, registry)?);
    }
    Ok(out)
}

/// Augments every sample of `dataset`. Output order is the input order with
/// each image's translations following it in canonical group order.
pub fn build_augmented_dataset(
    dataset: &DomainDataset,
    plan: &AugmentationPlan,
    registry: &MappingRegistry,
) -> Result<DomainDataset> {
    for s in &dataset.samples {
        require_original(s)?;
    }
    for (src, tgt) in plan.mappings() {
        let (pair, _) = registry.lookup(src, tgt)?;
        if pair.steps_trained == 0 {
            return Err(Error::UntrainedPair(pair.code()));
        }
    }

    // Translate each (source, target) bucket in one batch; rows are
    // independent, so results equal per-image translation.
    let mut translated: BTreeMap<(GroupLabel, GroupLabel), Vec<Sample>> = BTreeMap::new();
    for (src, tgt) in plan.mappings() {
        let members: Vec<&Sample> = dataset.samples.iter().filter(|s| s.group == src).collect();
        translated.insert((src, tgt), translate_samples(&members, src, tgt, registry)?);
    }
    let mut cursor: BTreeMap<(GroupLabel, GroupLabel), usize> = BTreeMap::new();
    let mut samples = Vec::with_capacity(plan.expected_size(dataset));
    for s in &dataset.samples {
        samples.push(s.clone());
        for &t in plan.targets(s.group) {
            let k = cursor.entry((s.group, t)).or_insert(0);
            samples.push(translated[&(s.group, t)][*k].clone());
            *k += 1;
        }
    }
    Ok(DomainDataset {
        samples,
        split: dataset.split,
    })
}
