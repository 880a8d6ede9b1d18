use std::collections::BTreeSet;

use proptest::prelude::*;
use rottrans_core::data::{synth_generate, PkSampler, Split, SynthSpec};
use rottrans_core::rng::stream_indexed;

#[test]
fn thirty_two_identities_of_twelve_images() {
    let spec = SynthSpec {
        num_ids: 32,
        num_train_ids: 24,
        image_size: 24,
        ..SynthSpec::default()
    };
    let d = synth_generate(&spec).unwrap();
    assert_eq!(d.images.len(), 384);
    assert_eq!(d.manifest.records.len(), 384);
    d.manifest.validate().unwrap();
    assert_eq!(d.manifest.train_identities().len(), 24);
}

#[test]
fn default_benchmark_layout() {
    let d = synth_generate(&SynthSpec::default()).unwrap();
    let m = &d.manifest;
    m.validate().unwrap();
    assert_eq!(m.train_identities().len(), 32);
    let test_ids: BTreeSet<u32> = m.indices(Split::Query).iter().map(|&i| m.records[i].identity).collect();
    assert_eq!(test_ids.len(), 16);
    assert!(d.images.iter().all(|im| im.width == 64 && im.height == 64));
    let cams: BTreeSet<u32> = m.records.iter().map(|r| r.camera).collect();
    assert_eq!(cams.len(), 2);
}

#[test]
fn toy_sampler_epoch() {
    let groups = vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]];
    let s = PkSampler::from_groups(groups, &[10, 11, 12, 13], 2, 2).unwrap();
    let epoch = s.epoch(&mut stream_indexed(0, "sampler", 0));
    assert_eq!(epoch.len(), 2);
    let all: BTreeSet<usize> = epoch.iter().flat_map(|b| b.indices.clone()).collect();
    assert_eq!(all, (0..8).collect());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn batches_hold_p_identities_of_k_images(ids in 2usize..12, extra in 0usize..4, p in 2usize..5, k in 2usize..4, seed in any::<u64>()) {
        prop_assume!(ids >= p);
        let sizes: Vec<usize> = (0..ids).map(|i| k + (i * 7 + extra) % (extra + 1)).collect();
        let mut next = 0;
        let groups: Vec<Vec<usize>> = sizes.iter().map(|&n| { let g = (next..next + n).collect(); next += n; g }).collect();
        let idents: Vec<u32> = (0..ids as u32).collect();
        let s = PkSampler::from_groups(groups.clone(), &idents, p, k).unwrap();
        let a = s.epoch(&mut stream_indexed(seed, "sampler", 0));
        let b = s.epoch(&mut stream_indexed(seed, "sampler", 0));
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), ids / p);
        let mut seen_labels = BTreeSet::new();
        for batch in &a {
            prop_assert_eq!(batch.indices.len(), p * k);
            let labels: BTreeSet<usize> = batch.labels.iter().copied().collect();
            prop_assert_eq!(labels.len(), p);
            for &l in &labels {
                prop_assert!(seen_labels.insert(l), "identity reused within an epoch");
                let members: Vec<usize> = batch.indices.iter().zip(&batch.labels).filter(|(_, &bl)| bl == l).map(|(&i, _)| i).collect();
                prop_assert_eq!(members.len(), k);
                prop_assert_eq!(members.iter().collect::<BTreeSet<_>>().len(), k);
                prop_assert!(members.iter().all(|i| groups[l].contains(i)));
            }
        }
    }
}
