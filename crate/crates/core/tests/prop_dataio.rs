use std::collections::BTreeSet;

use proptest::prelude::*;
use tfcl::dataio::{make_splits, sinusoid_classes, synth_dataset, window, Scheme, WINDOW_LEN};

fn scheme() -> impl Strategy<Value = Scheme> {
    prop_oneof![Just(Scheme::Scheme1), Just(Scheme::Scheme2)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn folds_are_subject_disjoint_and_cover(
        n in 5usize..14,
        seed in any::<u64>(),
        scheme in scheme(),
        val in 0.0f64..0.5,
        test in 0.05f64..0.6,
    ) {
        let rs = synth_dataset(n, &sinusoid_classes(&[2.0, 5.0], 1.0), 1, 0.0, 3).unwrap();
        let ws = window(&rs, WINDOW_LEN, WINDOW_LEN).unwrap().windows;
        let plan = make_splits(&ws, scheme, seed, val, test).unwrap();
        let universe: BTreeSet<String> = ws.iter().map(|w| w.subject.clone()).collect();
        for f in &plan.folds {
            let tr: BTreeSet<_> = f.train.iter().collect();
            let va: BTreeSet<_> = f.val.iter().collect();
            let te: BTreeSet<_> = f.test.iter().collect();
            prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
            prop_assert_eq!(tr.len() + va.len() + te.len(), universe.len());
            prop_assert!(!f.train.is_empty() && !f.test.is_empty());
        }
        if scheme == Scheme::Scheme1 {
            let mut tested: Vec<String> = plan.folds.iter().flat_map(|f| f.test.clone()).collect();
            tested.sort();
            prop_assert_eq!(tested, universe.iter().cloned().collect::<Vec<_>>());
        }
        prop_assert_eq!(make_splits(&ws, scheme, seed, val, test).unwrap(), plan);
    }

    #[test]
    fn windows_equal_their_source_slice(
        wpsc in 1usize..4,
        stride in 1usize..200,
        noise in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let rs = synth_dataset(2, &sinusoid_classes(&[1.5, 4.0], 2.0), wpsc, noise, seed).unwrap();
        let out = window(&rs, WINDOW_LEN, stride).unwrap();
        let per_recording = (wpsc * WINDOW_LEN - WINDOW_LEN) / stride + 1;
        prop_assert_eq!(out.windows.len(), per_recording * rs.recordings().len());
        for w in &out.windows {
            let r = &rs.recordings()[w.recording];
            let slice: Vec<f64> = r.samples[w.source_offset..w.source_offset + WINDOW_LEN]
                .iter()
                .flat_map(|s| s.iter().copied())
                .collect();
            prop_assert_eq!(&w.values, &slice);
            prop_assert_eq!(&w.subject, &r.subject);
            prop_assert_eq!(out.label_map.name(w.label.unwrap()), Some(r.label.as_str()));
        }
        let again = window(&synth_dataset(2, &sinusoid_classes(&[1.5, 4.0], 2.0), wpsc, noise, seed).unwrap(), WINDOW_LEN, stride).unwrap();
        prop_assert_eq!(again.windows, out.windows);
    }
}
