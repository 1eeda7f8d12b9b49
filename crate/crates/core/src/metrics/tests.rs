use super::*;
use crate::rng::Rng;

fn random_scores(rng: &mut Rng, ng: usize, ni: usize) -> ScoreSet {
    // genuine biased high, impostor low, with overlap and occasional ties
    let mut genuine = Vec::with_capacity(ng);
    let mut impostor = Vec::with_capacity(ni);
    for _ in 0..ng {
        let v = rng.uniform(-0.2, 1.0);
        genuine.push((v * 64.0).round() / 64.0);
    }
    for _ in 0..ni {
        let v = rng.uniform(-1.0, 0.6);
        impostor.push((v * 64.0).round() / 64.0);
    }
    ScoreSet::new(genuine, impostor)
}

// ---------------------------------------------------------- EER

#[test]
fn eer_perfect_separation_is_zero() {
    let s = ScoreSet::new(vec![0.9, 0.8], vec![0.1, 0.2]);
    assert_eq!(compute_eer(&s).unwrap(), 0.0);
}

#[test]
fn eer_identical_distributions_is_half() {
    let s = ScoreSet::new(vec![0.3, 0.7], vec![0.3, 0.7]);
    assert_eq!(compute_eer(&s).unwrap(), 0.5);
}

#[test]
fn eer_hand_case_matches_oracle() {
    let s = ScoreSet::new(vec![0.8, 0.6, 0.4], vec![0.5, 0.3, 0.1]);
    let got = compute_eer(&s).unwrap();
    let oracle = eer_oracle(&s);
    assert!((got - oracle).abs() <= 1e-15);
    assert!((got - 1.0 / 3.0).abs() <= 1e-15, "exact crossing at theta=0.5");
}

#[test]
fn eer_matches_oracle_on_random_sets() {
    let mut rng = Rng::new(1);
    for _ in 0..50 {
        let (ng, ni) = (5 + rng.below(40), 5 + rng.below(40));
        let s = random_scores(&mut rng, ng, ni);
        let got = compute_eer(&s).unwrap();
        let want = eer_oracle(&s);
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        assert!((0.0..=1.0).contains(&got));
    }
}

#[test]
fn eer_rejects_empty_sides() {
    assert!(compute_eer(&ScoreSet::new(vec![], vec![0.1])).is_err());
    assert!(compute_eer(&ScoreSet::new(vec![0.1], vec![])).is_err());
}

// ---------------------------------------------------------- AUC

#[test]
fn auc_perfect_separation_is_one() {
    let s = ScoreSet::new(vec![0.9, 0.8], vec![0.1, 0.2]);
    assert_eq!(compute_roc_auc(&s).unwrap(), 1.0);
}

#[test]
fn auc_identical_sets_is_half() {
    let s = ScoreSet::new(vec![0.3, 0.7], vec![0.3, 0.7]);
    assert!((compute_roc_auc(&s).unwrap() - 0.5).abs() <= 1e-15);
}

#[test]
fn auc_matches_pairwise_oracle() {
    let mut rng = Rng::new(2);
    for _ in 0..50 {
        let s = random_scores(&mut rng, 20, 20);
        let got = compute_roc_auc(&s).unwrap();
        let want = auc_oracle(&s);
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}

#[test]
fn auc_swap_complements_to_one() {
    let mut rng = Rng::new(3);
    for _ in 0..20 {
        let s = random_scores(&mut rng, 15, 12);
        let fwd = compute_roc_auc(&s).unwrap();
        let swapped = ScoreSet::new(s.impostor.clone(), s.genuine.clone());
        let rev = compute_roc_auc(&swapped).unwrap();
        assert!((fwd + rev - 1.0).abs() <= 1e-12, "{fwd} + {rev}");
    }
}

// ---------------------------------------------------------- TAR@FAR

#[test]
fn tar_perfect_separation_is_one() {
    let s = ScoreSet::new(vec![0.9, 0.8], vec![0.1, 0.2]);
    assert_eq!(compute_tar_at_far(&s, 0.01).unwrap(), 1.0);
}

#[test]
fn tar_above_max_achievable_far_uses_most_permissive_threshold() {
    // every threshold at or below 0.1 accepts all impostors (FAR=1 > 0.9),
    // so the smallest qualifying threshold accepts everything genuine
    let s = ScoreSet::new(vec![0.5, 0.2], vec![0.1, 0.1]);
    let tar = compute_tar_at_far(&s, 0.9).unwrap();
    assert_eq!(tar, tar_at_far_oracle(&s, 0.9));
    assert_eq!(tar, 1.0);
}

#[test]
fn tar_hand_case_matches_oracle() {
    let s = ScoreSet::new(vec![0.8, 0.6, 0.4], vec![0.5, 0.3, 0.1]);
    for far in [0.35, 0.5, 0.01] {
        let got = compute_tar_at_far(&s, far).unwrap();
        assert_eq!(got, tar_at_far_oracle(&s, far), "far {far}");
    }
    assert_eq!(compute_tar_at_far(&s, 0.35).unwrap(), 1.0);
}

#[test]
fn tar_matches_oracle_on_random_sets() {
    let mut rng = Rng::new(4);
    for _ in 0..50 {
        let (ng, ni) = (10 + rng.below(30), 10 + rng.below(30));
        let s = random_scores(&mut rng, ng, ni);
        for far in [0.01, 0.1, 0.25] {
            let got = compute_tar_at_far(&s, far).unwrap();
            let want = tar_at_far_oracle(&s, far);
            assert!((got - want).abs() <= 1e-12, "far {far}: {got} vs {want}");
        }
    }
}

#[test]
fn tar_rejects_degenerate_far() {
    let s = ScoreSet::new(vec![0.5], vec![0.1]);
    assert!(compute_tar_at_far(&s, 0.0).is_err());
    assert!(compute_tar_at_far(&s, 1.0).is_err());
}

// ---------------------------------------------------------- CMC

fn emb(label: &str, values: &[f64]) -> LabeledEmbedding {
    LabeledEmbedding { label: label.to_string(), values: values.to_vec() }
}

#[test]
fn cmc_self_gallery_is_perfect() {
    let mut rng = Rng::new(5);
    let items: Vec<LabeledEmbedding> = (0..6)
        .map(|i| {
            let mut v = vec![0.0; 8];
            rng.fill_uniform(&mut v, -1.0, 1.0);
            emb(&format!("id{i}"), &v)
        })
        .collect();
    let cmc = compute_cmc(&items, &items, 3).unwrap();
    assert_eq!(cmc[0], 1.0);
    assert!(cmc.iter().all(|&v| v == 1.0));
}

#[test]
fn cmc_orthogonal_one_hots_rank1() {
    let gallery: Vec<LabeledEmbedding> = (0..4)
        .map(|i| {
            let mut v = vec![0.0; 4];
            v[i] = 1.0;
            emb(&format!("id{i}"), &v)
        })
        .collect();
    let probes: Vec<LabeledEmbedding> = (0..4)
        .map(|i| {
            let mut v = vec![0.0; 4];
            v[i] = 0.7; // same direction, different magnitude
            emb(&format!("id{i}"), &v)
        })
        .collect();
    let cmc = compute_cmc(&gallery, &probes, 1).unwrap();
    assert_eq!(cmc[0], 1.0);
}

#[test]
fn cmc_matches_sort_oracle() {
    let mut rng = Rng::new(6);
    for _ in 0..20 {
        let gallery: Vec<LabeledEmbedding> = (0..8)
            .map(|i| {
                let mut v = vec![0.0; 6];
                rng.fill_uniform(&mut v, -1.0, 1.0);
                emb(&format!("id{}", i % 5), &v)
            })
            .collect();
        let probes: Vec<LabeledEmbedding> = (0..8)
            .map(|i| {
                let mut v = vec![0.0; 6];
                rng.fill_uniform(&mut v, -1.0, 1.0);
                emb(&format!("id{}", i % 5), &v)
            })
            .collect();
        let got = compute_cmc(&gallery, &probes, 5).unwrap();
        let want = cmc_oracle(&gallery, &probes, 5);
        assert_eq!(got, want);
        for k in 1..got.len() {
            assert!(got[k] >= got[k - 1], "rank accuracy must be monotone");
        }
    }
}

#[test]
fn cmc_rejects_probe_outside_gallery() {
    let gallery = vec![emb("a", &[1.0, 0.0])];
    let probes = vec![emb("b", &[0.0, 1.0])];
    assert!(matches!(
        compute_cmc(&gallery, &probes, 1),
        Err(MetricError::ProbeNotInGallery(_))
    ));
}

#[test]
fn cmc_ties_break_by_insertion_order() {
    // two gallery items with identical embeddings but different labels
    let gallery = vec![emb("first", &[1.0, 0.0]), emb("second", &[1.0, 0.0])];
    let probes = vec![emb("second", &[1.0, 0.0])];
    let cmc = compute_cmc(&gallery, &probes, 2).unwrap();
    assert_eq!(cmc, vec![0.0, 1.0], "the tied first entry wins rank 1");
}

// ---------------------------------------------------------- invariances

#[test]
fn metrics_invariant_under_monotone_transforms() {
    let mut rng = Rng::new(7);
    let transforms: [fn(f64) -> f64; 3] =
        [|x| x * x * x + 2.0 * x, |x| (2.0 * x).exp(), |x| 5.0 * x - 3.0];
    for _ in 0..10 {
        let s = random_scores(&mut rng, 18, 22);
        let eer = compute_eer(&s).unwrap();
        let auc = compute_roc_auc(&s).unwrap();
        let tar = compute_tar_at_far(&s, 0.1).unwrap();
        for f in transforms {
            let mapped = ScoreSet::new(
                s.genuine.iter().map(|&v| f(v)).collect(),
                s.impostor.iter().map(|&v| f(v)).collect(),
            );
            assert!((compute_eer(&mapped).unwrap() - eer).abs() <= 1e-12);
            assert!((compute_roc_auc(&mapped).unwrap() - auc).abs() <= 1e-12);
            assert!((compute_tar_at_far(&mapped, 0.1).unwrap() - tar).abs() <= 1e-12);
        }
    }
}

// ---------------------------------------------------------- files

#[test]
fn score_csv_roundtrip_is_exact() {
    let mut rng = Rng::new(8);
    let mut s = random_scores(&mut rng, 30, 25);
    s.genuine.push(1.0 / 3.0); // non-terminating decimal
    let text = write_score_csv(&s);
    let back = parse_score_csv(&text).unwrap();
    assert_eq!(back, s);
}

#[test]
fn score_csv_rejects_bad_rows() {
    assert!(parse_score_csv("nope\n").is_err());
    assert!(parse_score_csv("label,score\nweird,0.5\n").is_err());
    assert!(parse_score_csv("label,score\ngenuine,abc\n").is_err());
}

#[test]
fn report_roundtrip_and_recompute() {
    let mut rng = Rng::new(9);
    let s = random_scores(&mut rng, 25, 25);
    let gallery = vec![emb("a", &[1.0, 0.1]), emb("b", &[-0.3, 0.9])];
    let probes = vec![emb("a", &[0.9, 0.2]), emb("b", &[-0.2, 1.0])];
    let report = MetricReport::compute(&s, &gallery, &probes).unwrap();
    let text = report.render();
    let back = MetricReport::parse(&text).unwrap();
    assert_eq!(back, report);
    // recomputing from a written score file reproduces the verification metrics
    let reparsed = parse_score_csv(&write_score_csv(&s)).unwrap();
    assert_eq!(compute_eer(&reparsed).unwrap(), report.eer);
    assert_eq!(compute_roc_auc(&reparsed).unwrap(), report.auc);
}
