use cornet_core::annotations::{
    build_cooccurrence, load_annotations, save_annotations, to_dense_targets, AnnotationError,
    AnnotationSequence, ClassVocabulary, Interval,
};
use proptest::prelude::*;
use std::fs;

/// Counts pairs directly from intervals: for every frame and every label pair,
/// checks whether some interval of each class covers the frame.
fn brute_force(seq: &AnnotationSequence, n: usize) -> Vec<Vec<u64>> {
    let covers = |c: usize, t: usize| {
        seq.intervals
            .iter()
            .any(|iv| iv.class_id == c && iv.start <= t && t < iv.end)
    };
    let mut r = vec![vec![0u64; n]; n];
    for t in 0..seq.num_frames {
        for i in 0..n {
            for j in 0..n {
                if covers(i, t) && covers(j, t) {
                    r[i][j] += 1;
                }
            }
        }
    }
    r
}

fn vocab(n: usize) -> ClassVocabulary {
    ClassVocabulary::new((0..n).map(|i| format!("class_{i}"))).unwrap()
}

prop_compose! {
    fn sequence()(n in 1usize..=10, t in 1usize..=64)
        (raw in prop::collection::vec((0..t, 1..=t, 0..n), 0..12), n in Just(n), t in Just(t))
        -> (AnnotationSequence, usize)
    {
        let intervals = raw
            .into_iter()
            .map(|(s, len, c)| Interval::new(s, (s + len).min(t).max(s + 1), c))
            .collect();
        (AnnotationSequence::new("p", t, intervals), n)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matches_brute_force_oracle((seq, n) in sequence()) {
        let r = build_cooccurrence(&seq, &vocab(n)).unwrap();
        let oracle = brute_force(&seq, n);
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(r.get(i, j), oracle[i][j] as f64);
            }
        }
    }

    #[test]
    fn ground_truth_invariants_hold((seq, n) in sequence()) {
        let r = build_cooccurrence(&seq, &vocab(n)).unwrap();
        let y = to_dense_targets(&seq, &vocab(n)).unwrap();
        for i in 0..n {
            let col_sum: f64 = (0..seq.num_frames).map(|t| y.at(&[t, i])).sum();
            prop_assert_eq!(r.get(i, i), col_sum);
            for j in 0..n {
                prop_assert_eq!(r.get(i, j), r.get(j, i));
                prop_assert_eq!(r.get(i, j).fract(), 0.0);
                prop_assert!(r.get(i, j) <= r.get(i, i).min(r.get(j, j)));
            }
        }
    }

    #[test]
    fn disjoint_concatenation_is_additive((a, na) in sequence(), (b, nb) in sequence()) {
        let n = na.max(nb);
        let offset = a.num_frames;
        let mut intervals = a.intervals.clone();
        intervals.extend(b.intervals.iter().map(|iv| Interval::new(iv.start + offset, iv.end + offset, iv.class_id)));
        let joined = AnnotationSequence::new("ab", a.num_frames + b.num_frames, intervals);
        let v = vocab(n);
        let sum = build_cooccurrence(&a, &v).unwrap().add(&build_cooccurrence(&b, &v).unwrap()).unwrap();
        prop_assert_eq!(build_cooccurrence(&joined, &v).unwrap(), sum);
    }
}

#[test]
fn loads_two_video_file() {
    let dir = tempfile::tempdir().unwrap();
    let vocab_path = dir.path().join("vocab.json");
    let ann_path = dir.path().join("ann.jsonl");
    fs::write(&vocab_path, r#"["walk", "talk", "wave"]"#).unwrap();
    fs::write(
        &ann_path,
        "{\"id\": \"a\", \"num_frames\": 10, \"intervals\": [[0, 4, 0], [2, 9, 2]]}\n\
         {\"id\": \"b\", \"num_frames\": 7, \"intervals\": []}\n",
    )
    .unwrap();
    let (seqs, vocab) = load_annotations(&ann_path, &vocab_path).unwrap();
    assert_eq!(vocab.len(), 3);
    assert_eq!(seqs.len(), 2);
    assert_eq!((seqs[0].num_frames, seqs[1].num_frames), (10, 7));
    assert_eq!(seqs[0].intervals[1], Interval::new(2, 9, 2));
}

#[test]
fn interval_past_end_names_video() {
    let dir = tempfile::tempdir().unwrap();
    let vocab_path = dir.path().join("vocab.json");
    let ann_path = dir.path().join("ann.jsonl");
    fs::write(&vocab_path, r#"["walk"]"#).unwrap();
    fs::write(
        &ann_path,
        "{\"id\": \"ok\", \"num_frames\": 3, \"intervals\": []}\n\
         {\"id\": \"clip_17\", \"num_frames\": 5, \"intervals\": [[1, 6, 0]]}\n",
    )
    .unwrap();
    let err = load_annotations(&ann_path, &vocab_path).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, AnnotationError::Parse { line: 2, .. }), "{msg}");
    assert!(msg.contains("clip_17"), "{msg}");
}

#[test]
fn malformed_record_reports_line_and_class_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let vocab_path = dir.path().join("vocab.json");
    fs::write(&vocab_path, r#"["walk", "run"]"#).unwrap();

    let ann_path = dir.path().join("broken.jsonl");
    fs::write(&ann_path, "{\"id\": \"a\", \"num_frames\": 3, \"intervals\": []}\n\n{\"id\": 5}\n").unwrap();
    let err = load_annotations(&ann_path, &vocab_path).unwrap_err();
    assert!(matches!(err, AnnotationError::Parse { line: 3, .. }), "{err}");

    let ann_path = dir.path().join("class.jsonl");
    fs::write(&ann_path, "{\"id\": \"a\", \"num_frames\": 3, \"intervals\": [[0, 1, 2]]}\n").unwrap();
    let err = load_annotations(&ann_path, &vocab_path).unwrap_err();
    assert!(err.to_string().contains("outside the vocabulary"), "{err}");
}

#[test]
fn save_then_load_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let v = ClassVocabulary::new(["open door", "close door", "sit"]).unwrap();
    let seqs = vec![
        AnnotationSequence::new("x", 12, vec![Interval::new(0, 5, 0), Interval::new(3, 12, 2)]),
        AnnotationSequence::new("y", 4, vec![Interval::new(1, 2, 1)]),
    ];
    v.save(dir.path().join("v.json")).unwrap();
    save_annotations(dir.path().join("a.jsonl"), &seqs).unwrap();
    let (loaded, lv) = load_annotations(dir.path().join("a.jsonl"), dir.path().join("v.json")).unwrap();
    assert_eq!(lv, v);
    assert_eq!(loaded, seqs);
}
