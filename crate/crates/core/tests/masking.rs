mod common;

use proptest::prelude::*;
use radkg::annotator::{Category, EntitySpan};
use radkg::corpus::SectionKind;
use radkg::fixtures;
use radkg::masking::{mask_kg, mask_random, quota, seed_for, select_option, MaskedExample};
use radkg::pipeline::MaskRecord;
use radkg::tokenizer::Vocabulary;

fn ids(v: &Vocabulary, n: usize) -> Vec<u32> {
    let word = v.id("lung").unwrap();
    let mut out = vec![word; n];
    out[0] = v.id("[CLS]").unwrap();
    out[n - 1] = v.id("[SEP]").unwrap();
    out
}

fn arb_spans(n: usize) -> impl Strategy<Value = Vec<EntitySpan>> {
    let cat = prop_oneof![
        Just(Category::Anatomy),
        Just(Category::Observation),
        Just(Category::Symptom)
    ];
    let sec = prop_oneof![
        Just(SectionKind::Clinical),
        Just(SectionKind::Findings),
        Just(SectionKind::Impressions)
    ];
    prop::collection::vec((1..n - 1, 1usize..5, cat, sec), 0..10).prop_map(move |raw| {
        let mut out: Vec<EntitySpan> = Vec::new();
        for (start, len, category, section) in raw {
            let end = (start + len).min(n - 1);
            if out.iter().all(|o| end <= o.start || start >= o.end) {
                out.push(EntitySpan {
                    section,
                    start,
                    end,
                    surface: "x".into(),
                    concept_id: "c".into(),
                    category,
                    char_span: (0, 0),
                });
            }
        }
        out
    })
}

fn record(spans: Vec<EntitySpan>, example: MaskedExample) -> MaskRecord {
    MaskRecord {
        report_id: "r".into(),
        chunk_idx: 0,
        section: SectionKind::Findings,
        spans,
        example,
    }
}

#[test]
fn quota_matches_reference() {
    for n in 0..20_000 {
        assert_eq!(quota(n), common::quota(n), "n = {n}");
    }
}

proptest! {
    #[test]
    fn knowledge_masks_satisfy_reference_checks(n in 16usize..80, seed in any::<u64>(), spans in arb_spans(16)) {
        let v = fixtures::base_vocab();
        let x = ids(&v, n);
        let (opt, qualified) = select_option(&spans, n, seed);
        let ex = mask_kg(&x, &spans, opt, qualified, &v, seed).unwrap();
        let rec = record(spans, ex);
        prop_assert_eq!(qualified, !common::qualifying(&rec).is_empty());
        prop_assert_eq!(common::mask_violations(&rec, &v), Vec::<String>::new());
    }

    #[test]
    fn random_masks_hit_quota_exactly(n in 7usize..300, seed in any::<u64>()) {
        let v = fixtures::base_vocab();
        let x = ids(&v, n);
        let ex = mask_random(&x, &v, seed).unwrap();
        prop_assert_eq!(ex.masks.len(), common::quota(n));
        prop_assert!(ex.masks.iter().all(|&p| p != 0 && p != n - 1));
        prop_assert_eq!(ex.original_ids(), x);
    }

    #[test]
    fn example_seeds_depend_on_every_part(run in any::<u64>(), id in "[a-z]{1,8}", idx in 0usize..50) {
        let s = seed_for(run, &id, idx);
        prop_assert_eq!(s, seed_for(run, &id, idx));
        prop_assert_ne!(s, seed_for(run.wrapping_add(1), &id, idx));
        prop_assert_ne!(s, seed_for(run, &id, idx + 1));
        prop_assert_ne!(s, seed_for(run, &format!("{id}x"), idx));
    }
}

#[test]
fn option_choice_is_uniform_over_qualifying() {
    // Anatomy in Clinical qualifies options 1 and 3; symptoms alone qualify nothing.
    let span = |category, section, start, end| EntitySpan {
        section,
        start,
        end,
        surface: "x".into(),
        concept_id: "c".into(),
        category,
        char_span: (0, 0),
    };
    let spans = vec![span(Category::Anatomy, SectionKind::Clinical, 1, 6)];
    let trials = 4000;
    let mut counts = [0usize; 4];
    for s in 0..trials {
        let (o, q) = select_option(&spans, 20, s);
        assert!(q);
        counts[o as usize] += 1;
    }
    assert_eq!(counts[1] + counts[3], 0);
    let sigma = (trials as f64 * 0.25).sqrt();
    assert!(
        (counts[0] as f64 - trials as f64 / 2.0).abs() < 3.0 * sigma,
        "{counts:?}"
    );
}
