use meldae::data::Span;
use meldae::eval::{extract_segments, f1_dr, interval_iou, match_segments};
use proptest::prelude::*;

fn span() -> impl Strategy<Value = Span> {
    (0usize..40, 0usize..12).prop_map(|(on, len)| Span::new(on, on + len))
}

fn spans(max: usize) -> impl Strategy<Value = Vec<Span>> {
    prop::collection::vec(span(), 0..=max)
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in span(), b in span()) {
        let ab = interval_iou(a, b);
        prop_assert_eq!(ab, interval_iou(b, a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(interval_iou(a, a), 1.0);
    }

    #[test]
    fn matching_is_one_to_one(p in spans(6), g in spans(6), theta in 0.05f64..1.0) {
        let m = match_segments(&p, &g, theta);
        prop_assert_eq!(m.tp + m.fp, p.len());
        prop_assert_eq!(m.tp + m.fn_, g.len());
        prop_assert_eq!(m.assignments.len(), p.len());
        let mut used = vec![false; g.len()];
        for (i, &(a, iou)) in m.assignments.iter().enumerate() {
            if let Some(j) = a {
                prop_assert!(!used[j], "gt {} matched twice", j);
                used[j] = true;
                prop_assert!(iou >= theta);
                prop_assert_eq!(iou, interval_iou(p[i], g[j]));
            }
        }
        prop_assert_eq!(used.iter().filter(|&&u| u).count(), m.tp);
    }

    #[test]
    fn matching_is_deterministic_under_input_order(p in spans(5), g in spans(5)) {
        let mut pr = p.clone();
        pr.reverse();
        let mut gr = g.clone();
        gr.reverse();
        let a = match_segments(&p, &g, 0.5);
        let b = match_segments(&pr, &gr, 0.5);
        prop_assert_eq!((a.tp, a.fp, a.fn_), (b.tp, b.fp, b.fn_));
    }

    #[test]
    fn f1_dr_properties(l in 0.0f64..=1.0, s in 0.0f64..=1.0) {
        let h = f1_dr(l, s);
        prop_assert_eq!(h, f1_dr(s, l));
        prop_assert!(h >= l.min(s) - 1e-15 && h <= l.max(s) + 1e-15);
        if l + s > 0.0 {
            prop_assert!((h - 2.0 * l * s / (l + s)).abs() <= 1e-12);
        }
    }

    #[test]
    fn extracted_segments_respect_settings(
        s in prop::collection::vec(0.0f64..1.0, 1..80),
        min_duration in 1usize..5,
        merge_gap in 0usize..4,
    ) {
        let segs = extract_segments(&s, 0.5, min_duration, merge_gap);
        for w in segs.windows(2) {
            prop_assert!(w[1].onset - w[0].offset - 1 > merge_gap, "segments closer than the merge gap");
        }
        for seg in &segs {
            prop_assert!(seg.offset < s.len());
            prop_assert!(seg.offset - seg.onset + 1 >= min_duration);
            prop_assert!(s[seg.onset] >= 0.5 && s[seg.offset] >= 0.5);
        }
    }
}

#[test]
fn equal_inputs_give_that_value() {
    for v in [0.0, 0.2, 0.5, 1.0] {
        assert_eq!(f1_dr(v, v), v);
    }
}
