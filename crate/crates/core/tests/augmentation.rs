use std::collections::{BTreeMap, BTreeSet};

use fairtrans_core::augment::{build_augmented_dataset, AugmentationPlan};
use fairtrans_core::cycletrans::{build_registry, MappingRegistry, TranslatorConfig};
use fairtrans_core::synthface::{build_dataset, DatasetConfig, DomainDataset, GroupLabel, Provenance, Renderer, Split};
use fairtrans_core::Error;
use proptest::prelude::*;

fn registry(marked: bool) -> MappingRegistry {
    let reg = build_registry(&GroupLabel::ALL, &TranslatorConfig::default(), 7).unwrap();
    let pairs = reg
        .into_pairs()
        .into_iter()
        .map(|mut p| {
            // stands in for training; the weights stay at their init
            p.steps_trained = u64::from(marked);
            p
        })
        .collect();
    MappingRegistry::from_pairs(pairs).unwrap()
}

fn plan_strategy() -> impl Strategy<Value = AugmentationPlan> {
    (prop::collection::vec(prop::bits::u8::between(0, 4), 4), prop::bits::u8::between(0, 4)).prop_map(
        |(masks, skip_mask)| {
            let skip: BTreeSet<GroupLabel> = GroupLabel::ALL
                .into_iter()
                .filter(|g| skip_mask & (1 << g.index()) != 0)
                .collect();
            let targets: BTreeMap<GroupLabel, Vec<GroupLabel>> = GroupLabel::ALL
                .into_iter()
                .zip(masks)
                .map(|(src, m)| {
                    let list = if skip.contains(&src) {
                        Vec::new()
                    } else {
                        GroupLabel::ALL
                            .into_iter()
                            .filter(|t| *t != src && m & (1 << t.index()) != 0)
                            .collect()
                    };
                    (src, list)
                })
                .collect();
            AugmentationPlan::new(targets, skip).unwrap()
        },
    )
}

fn dataset(subjects: [usize; 4], images: usize, seed: u64) -> DomainDataset {
    let cfg = DatasetConfig {
        subjects_per_group: subjects,
        images_per_subject: images,
        seed,
        split: Split::Train,
    };
    build_dataset(&Renderer::default(), &cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn augmented_dataset_bookkeeping(
        plan in plan_strategy(),
        subjects in prop::array::uniform4(1usize..4),
        images in 1usize..4,
        seed in 0u64..1000,
    ) {
        let d = dataset(subjects, images, seed);
        let reg = registry(true);
        let aug = build_augmented_dataset(&d, &plan, &reg).unwrap();

        let expected: usize = d.samples.iter().map(|s| 1 + plan.targets(s.group).len()).sum();
        prop_assert_eq!(aug.len(), expected);
        prop_assert_eq!(plan.expected_size(&d), expected);

        let originals: Vec<_> = aug.originals().cloned().collect();
        prop_assert_eq!(&originals, &d.samples);

        let counts = aug.subject_image_counts();
        let homes = d.subject_home_groups();
        for (id, n) in d.subject_image_counts() {
            prop_assert_eq!(counts[&id], n * (1 + plan.targets(homes[&id]).len()));
        }
        for s in aug.samples.iter().filter(|s| !s.is_original()) {
            let home = homes[&s.subject_id];
            prop_assert_eq!(s.provenance, Provenance::Synthesized { source: home });
            prop_assert!(plan.targets(home).contains(&s.group));
        }
        // no subject gains a home group
        prop_assert_eq!(aug.subject_home_groups(), homes);
    }
}

#[test]
fn skip_dominant_leaves_majority_untouched() {
    let d = dataset([2, 2, 6, 2], 3, 1);
    let plan = AugmentationPlan::skip_dominant(&d);
    assert!(plan.targets(GroupLabel::C).is_empty());
    let aug = build_augmented_dataset(&d, &plan, &registry(true)).unwrap();
    assert_eq!(aug.len(), 18 + 3 * 4 * 6);
    assert!(aug
        .samples
        .iter()
        .all(|s| s.is_original() || s.provenance != Provenance::Synthesized { source: GroupLabel::C }));
    assert_eq!(aug.group_subject_counts(), d.group_subject_counts());
}

#[test]
fn untrained_registry_is_refused_and_none_plan_is_not() {
    let d = dataset([1, 1, 1, 1], 2, 2);
    let err = build_augmented_dataset(&d, &AugmentationPlan::full(), &registry(false)).unwrap_err();
    assert!(matches!(err, Error::UntrainedPair(_)), "{err}");
    let same = build_augmented_dataset(&d, &AugmentationPlan::none(), &registry(false)).unwrap();
    assert_eq!(same, d);
}

#[test]
fn synthesized_inputs_are_refused() {
    let d = dataset([1, 1, 1, 1], 2, 3);
    let aug = build_augmented_dataset(&d, &AugmentationPlan::full(), &registry(true)).unwrap();
    assert!(build_augmented_dataset(&aug, &AugmentationPlan::full(), &registry(true)).is_err());
}
