use proptest::prelude::*;

use incident_align::cot::{parse_cot, StageTag};
use incident_align::fusion::{gelu, layer_norm, mrope_apply, mrope_layout, FeatureMatrix};
use incident_align::graphrag::{dedupe, index_batch, merge, Gazetteer, GraphConfig};
use incident_align::grpo::{
    group_objective, grpo_objective, kl_to_reference, normalize_advantages, objective_gradient, sample_group_seeded,
    GrpoConfig,
};
use incident_align::policy::{SampleOptions, ToyPolicy};
use incident_align::reward::{coverage, shared_normalizer, StageVocabulary};
use incident_align::synthetic::{kg_corpus_docs, kg_gazetteer, STAGE_TERMS};

const WORDS: [&str; 8] = ["the", "fog", "queue", "ramp", "after", "lane", "closed", "team"];

fn stage_vocabs() -> Vec<StageVocabulary> {
    (1..=4)
        .map(|k| StageVocabulary::new(k, STAGE_TERMS[k - 1].iter().copied(), 1.0).unwrap())
        .collect()
}

fn word_pool() -> Vec<String> {
    let mut pool: Vec<String> = WORDS.iter().map(|w| w.to_string()).collect();
    pool.extend(STAGE_TERMS.iter().flat_map(|t| t.iter().map(|s| s.to_string())));
    pool.extend(StageTag::ALL.iter().map(|t| t.token_text().to_string()));
    pool
}

fn grpo_cfg(group_size: usize) -> GrpoConfig {
    GrpoConfig {
        group_size,
        sampling: SampleOptions {
            max_len: 5,
            temperature: 1.0,
            stop_token: None,
        },
        ..GrpoConfig::paper()
    }
}

proptest! {
    #[test]
    fn coverage_is_a_fraction(picks in prop::collection::vec(0usize..64, 0..40)) {
        let pool = word_pool();
        let text = picks.iter().map(|&i| pool[i % pool.len()].as_str()).collect::<Vec<_>>().join(" ");
        let vocabs = stage_vocabs();
        let norm = shared_normalizer(&vocabs);
        let doc = parse_cot(&text);
        for v in &vocabs {
            let c = coverage(&doc, v, &norm);
            prop_assert!((0.0..=1.0).contains(&c), "coverage {c}");
        }
    }

    #[test]
    fn advantages_center_and_ignore_shifts(
        rewards in prop::collection::vec(-100.0f64..100.0, 2..32),
        shift in -50.0f64..50.0,
    ) {
        let a = normalize_advantages(&rewards, 1e-8).unwrap();
        prop_assert!((a.iter().sum::<f64>() / a.len() as f64).abs() < 1e-12);
        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        let b = normalize_advantages(&shifted, 1e-8).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_for_equal_rows(
        seed in any::<u64>(),
        ctx in 0usize..7,
        bump in 0.01f64..2.0,
        offset in -3.0f64..3.0,
    ) {
        let p = ToyPolicy::random(6, 2, 2.0, seed).unwrap();
        let q = ToyPolicy::random(6, 2, 2.0, seed.wrapping_add(1)).unwrap();
        let all: Vec<usize> = (0..p.n_contexts()).collect();
        prop_assert!(kl_to_reference(&p, &q, &all).unwrap() >= 0.0);

        // adding a constant to a row leaves its distribution unchanged
        let mut shifted = p.clone();
        shifted.row_mut(ctx).iter_mut().for_each(|x| *x += offset);
        prop_assert!(kl_to_reference(&p, &shifted, &[ctx]).unwrap() < 1e-12);

        let mut bumped = p.clone();
        bumped.row_mut(ctx)[0] += bump;
        prop_assert!(kl_to_reference(&p, &bumped, &[ctx]).unwrap() > 0.0);
    }

    #[test]
    fn unit_ratios_give_mean_advantage_minus_penalty(
        advs in prop::collection::vec(-3.0f64..3.0, 2..17),
        kl in 0.0f64..2.0,
    ) {
        let cfg = GrpoConfig::paper();
        let ones = vec![1.0; advs.len()];
        let got = grpo_objective(&ones, &advs, kl, &cfg).unwrap();
        let want = advs.iter().sum::<f64>() / advs.len() as f64 - cfg.kl_coefficient * kl;
        prop_assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn clip_is_inert_inside_the_band(
        pairs in prop::collection::vec((0.801f64..1.199, -3.0f64..3.0), 2..17),
    ) {
        let cfg = GrpoConfig::paper();
        let (ratios, advs): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let got = grpo_objective(&ratios, &advs, 0.0, &cfg).unwrap();
        let want = ratios.iter().zip(&advs).map(|(r, a)| r * a).sum::<f64>() / ratios.len() as f64;
        prop_assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn gelu_odd_part_is_identity(x in -20.0f64..20.0) {
        prop_assert!((gelu(x) - gelu(-x) - x).abs() < 1e-12 * x.abs().max(1.0));
    }

    #[test]
    fn layer_norm_output_is_centered(row in prop::collection::vec(-50.0f64..50.0, 2..24)) {
        let n = row.len();
        let out = layer_norm(&row, &vec![1.0; n], &vec![0.0; n], 1e-5).unwrap();
        prop_assert!((out.iter().sum::<f64>() / n as f64).abs() < 1e-12);
    }

    #[test]
    fn mrope_preserves_pair_norms(
        data in prop::collection::vec(-5.0f64..5.0, 12),
        pos in prop::array::uniform3(-500i64..500),
    ) {
        let layout = mrope_layout(12).unwrap();
        let x = FeatureMatrix::new(1, 12, data).unwrap();
        let y = mrope_apply(&x, &[pos], &layout).unwrap();
        for (a, b) in x.data.chunks(2).zip(y.data.chunks(2)) {
            prop_assert!((a[0].hypot(a[1]) - b[0].hypot(b[1])).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn graph_merge_and_dedupe_are_idempotent(seed in any::<u64>(), count in 0usize..12) {
        let docs = kg_corpus_docs(seed, count);
        let gaz = Gazetteer::new(kg_gazetteer());
        let cfg = GraphConfig::default();
        let g = index_batch(cfg, docs.iter().map(|d| (d.doc_id.as_str(), d.text.as_str())), &gaz);

        let mut twice = g.clone();
        merge(&mut twice, &g).unwrap();
        prop_assert_eq!(&twice, &g);
        let mut deduped = g.clone();
        dedupe(&mut deduped, cfg.dedup_threshold);
        prop_assert_eq!(&deduped, &g);
        prop_assert!(g.check_integrity().is_ok());
    }
}

/// A small step along the analytic gradient should not lower the objective.
#[test]
fn gradient_step_ascends() {
    let (mut tried, mut ascended) = (0, 0);
    for seed in 0..200u64 {
        let cfg = grpo_cfg(2 + (seed % 7) as usize);
        let old = ToyPolicy::random(4, 2, 1.0, seed).unwrap();
        let reference = ToyPolicy::random(4, 2, 1.0, seed + 1000).unwrap();
        let mut group = sample_group_seeded(&old, &[1], &cfg, seed).unwrap();
        let rewards = (0..group.size())
            .map(|i| ((seed as usize + i * 7) % 5) as f64)
            .collect();
        group.set_rewards(rewards, cfg.advantage_eps).unwrap();

        let grad = objective_gradient(&old, &group, &reference, &cfg).unwrap();
        let norm = grad.norm();
        if norm < 1e-9 {
            continue;
        }
        let mut stepped = old.clone();
        for (x, g) in stepped.logits.iter_mut().zip(&grad.data) {
            *x += 1e-4 * g / norm;
        }
        tried += 1;
        let before = group_objective(&old, &group, &reference, &cfg).unwrap();
        let after = group_objective(&stepped, &group, &reference, &cfg).unwrap();
        ascended += usize::from(after >= before);
    }
    assert!(tried >= 150, "only {tried} informative groups");
    assert!(ascended * 100 >= tried * 95, "{ascended}/{tried} steps ascended");
}
