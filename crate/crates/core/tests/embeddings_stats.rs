use cornet_core::annotations::ClassVocabulary;
use cornet_core::embeddings::{cosine, synthetic_semantic_space};

fn vocab(n: usize) -> ClassVocabulary {
    ClassVocabulary::new((0..n).map(|i| format!("c{i}"))).unwrap()
}

fn pairwise_cosines(m: &cornet_core::Tensor) -> Vec<f64> {
    let n = m.rows();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            out.push(cosine(m.row(i), m.row(j)));
        }
    }
    out
}

#[test]
fn affinity_pair_beats_median_cosine_for_every_seed() {
    let v = vocab(10);
    for seed in 0..20 {
        let s = synthetic_semantic_space(&v, 64, seed, &[(2, 7)]).unwrap();
        let mut all = pairwise_cosines(s.matrix());
        all.sort_by(f64::total_cmp);
        let median = (all[all.len() / 2 - 1] + all[all.len() / 2]) / 2.0;
        let paired = cosine(s.matrix().row(2), s.matrix().row(7));
        assert!(paired > median, "seed {seed}: {paired} <= median {median}");
    }
}

#[test]
fn unrelated_labels_average_zero_cosine() {
    let v = vocab(10);
    let samples: Vec<f64> = (0..50)
        .flat_map(|seed| pairwise_cosines(synthetic_semantic_space(&v, 64, seed, &[]).unwrap().matrix()))
        .collect();
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    assert!(mean.abs() <= 3.0 * se, "mean {mean} vs 3 SE {}", 3.0 * se);
}
