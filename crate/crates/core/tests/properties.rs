use dyspec::categorical::{
    derive_seed, residual_target, softmax_with_temperature, stream_rng, Categorical, TokenId,
};
use dyspec::construct::{build_tree_fixed, build_tree_threshold, expected_accepted};
use dyspec::engine::{generate, sample_prompt, GenConfig, Structure};
use dyspec::lm::{kl_divergence, target_distributions_for_tree, ModelPairSpec, Tempered};
use dyspec::oracle::true_acceptance_probs;
use dyspec::CostParams;
use proptest::prelude::*;
use rand::Rng;

fn weights(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1.0f64, 1..max_len)
        .prop_filter("needs positive mass", |w| w.iter().sum::<f64>() > 1e-6)
}

fn spec(vocab: usize, seed: u64, sigma: f64) -> ModelPairSpec {
    ModelPairSpec {
        vocab_size: vocab,
        markov_order: 1,
        target_seed: seed,
        draft_seed: None,
        noise_sigma: sigma,
        concentration: 0.5,
        draft_temp: 1.0,
        target_temp: 1.0,
    }
}

proptest! {
    #[test]
    fn residual_support_is_where_target_exceeds_draft(t in weights(12), d in weights(12)) {
        let n = t.len().min(d.len());
        prop_assume!(t[..n].iter().sum::<f64>() > 1e-6 && d[..n].iter().sum::<f64>() > 1e-6);
        let t = Categorical::from_weights(t[..n].to_vec()).unwrap();
        let d = Categorical::from_weights(d[..n].to_vec()).unwrap();
        let r = residual_target(&t, &d).unwrap();
        if r.is_zero() {
            prop_assert!((0..n).all(|i| t.probs()[i] <= d.probs()[i]));
        } else {
            prop_assert!((r.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for i in 0..n {
                prop_assert_eq!(r.probs()[i] > 0.0, t.probs()[i] > d.probs()[i]);
            }
        }
    }

    #[test]
    fn remove_keeps_ratios(w in weights(10), pick in 0usize..10) {
        let c = Categorical::from_weights(w).unwrap();
        let y = TokenId::from(pick % c.vocab_size());
        prop_assume!(c.prob(y) > 0.0);
        let r = c.remove_and_renorm(y).unwrap();
        prop_assert_eq!(r.prob(y), 0.0);
        if r.is_zero() {
            return Ok(());
        }
        let live: Vec<usize> = (0..c.vocab_size()).filter(|&i| r.probs()[i] > 0.0).collect();
        for &i in &live {
            for &j in &live {
                let before = c.probs()[i] / c.probs()[j];
                let after = r.probs()[i] / r.probs()[j];
                prop_assert!((before - after).abs() <= 1e-9 * before.max(1.0));
            }
        }
    }

    #[test]
    fn zero_temperature_is_one_hot(logits in prop::collection::vec(-20.0..20.0f64, 1..32)) {
        let c = softmax_with_temperature(&logits, 0.0).unwrap();
        prop_assert_eq!(c.support_size(), 1);
    }

    #[test]
    fn expected_accepted_grows_with_every_node(seed in any::<u64>(), vocab in 2usize..24, budget in 1usize..24) {
        let s = spec(vocab, seed, 0.7);
        let (target, draft) = s.build().unwrap();
        let prefix = [TokenId::from(seed as usize % vocab)];
        let draft = Tempered::new(&draft, 1.0);
        let small = build_tree_fixed(draft, &prefix, budget, seed).unwrap();
        let large = build_tree_fixed(draft, &prefix, budget + 1, seed).unwrap();
        prop_assume!(large.len() > small.len());
        let eval = |tree| {
            let targets = target_distributions_for_tree(Tempered::new(&*target, 1.0), &prefix, tree).unwrap();
            let sd = true_acceptance_probs(tree, &targets).unwrap();
            (expected_accepted(tree, &sd).unwrap(), sd)
        };
        let (e_small, _) = eval(&small);
        let (e_large, sd_large) = eval(&large);
        let added = large.len() - 1;
        let mut reach = 1.0;
        for a in large.ancestors(added).unwrap() {
            reach *= sd_large[a];
            for s in large.previous_siblings(a).unwrap() {
                reach *= 1.0 - sd_large[s];
            }
        }
        prop_assert!((e_large - e_small - reach).abs() < 1e-9);
        if reach > 0.0 {
            prop_assert!(e_large > e_small);
        }
    }

    #[test]
    fn threshold_trees_respect_cap_and_threshold(seed in any::<u64>(), vocab in 2usize..32, c in 0.01..0.5f64, cap in 1usize..64) {
        let (_, draft) = spec(vocab, seed, 0.5).build().unwrap();
        let tree = build_tree_threshold(Tempered::new(&draft, 1.0), &[TokenId::from(0)], c, cap, seed).unwrap();
        prop_assert!(tree.len() <= cap);
        prop_assert!(tree.nodes().iter().all(|n| n.value >= c));
    }
}

#[test]
fn sampling_frequencies_within_five_standard_errors() {
    let n = 1_000_000;
    let mut rng = stream_rng(99);
    for probs in [
        vec![0.2, 0.3, 0.5],
        vec![0.01, 0.09, 0.4, 0.0, 0.5],
        vec![1.0],
    ] {
        let c = Categorical::new(probs.clone()).unwrap();
        let mut counts = vec![0usize; probs.len()];
        for _ in 0..n {
            counts[c.sample(rng.random()).unwrap().index()] += 1;
        }
        for (i, &p) in probs.iter().enumerate() {
            let freq = counts[i] as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            if se == 0.0 {
                assert_eq!(freq, p, "entry {i}");
            } else {
                assert!((freq - p).abs() <= 5.0 * se, "entry {i}: {freq} vs {p}");
            }
        }
    }
}

fn mean_kl(sigma: f64) -> f64 {
    let s = spec(64, 5, sigma);
    let (target, draft) = s.build().unwrap();
    let mut rng = stream_rng(17);
    let mut total = 0.0;
    for _ in 0..1000 {
        let ctx = [TokenId::from(rng.random_range(0..64))];
        let d = Tempered::new(&draft, 1.0).distribution(&ctx).unwrap();
        let t = Tempered::new(&*target, 1.0).distribution(&ctx).unwrap();
        total += kl_divergence(&d, &t);
    }
    total / 1000.0
}

#[test]
fn kl_grows_with_noise() {
    assert_eq!(mean_kl(0.0), 0.0);
    let kls: Vec<f64> = [0.25, 0.5, 1.0].into_iter().map(mean_kl).collect();
    assert!(kls[0] > 0.0);
    assert!(kls.windows(2).all(|w| w[1] >= w[0]), "{kls:?}");
}

#[test]
fn one_target_distribution_per_node_plus_root() {
    let (target, draft) = spec(16, 3, 0.5).build().unwrap();
    let prefix = [TokenId::from(2), TokenId::from(7)];
    let tree = build_tree_fixed(Tempered::new(&draft, 0.6), &prefix, 20, 8).unwrap();
    let targets =
        target_distributions_for_tree(Tempered::new(&*target, 1.0), &prefix, &tree).unwrap();
    assert_eq!(targets.len(), tree.len() + 1);
    for id in tree.node_ids() {
        let mut ctx = prefix.to_vec();
        ctx.extend(tree.path_tokens(id).unwrap());
        let direct = Tempered::new(&*target, 1.0).distribution(&ctx).unwrap();
        assert_eq!(targets.nodes()[id].probs(), direct.probs());
    }
}

#[test]
fn every_structure_generates_reproducibly() {
    let (target, draft) = spec(32, 21, 0.5).build().unwrap();
    let prompt = sample_prompt(Tempered::new(&*target, 1.0), 16, 4).unwrap();
    let structures = [
        Structure::Dynamic,
        Structure::Chain,
        Structure::StaticTree {
            branching: vec![2, 2, 2],
        },
        Structure::KChains { k: 4 },
    ];
    for structure in structures {
        let config = GenConfig {
            prefix_len: 16,
            gen_len: 40,
            budget: Some(16),
            target_temp: 0.6,
            seed: derive_seed(1, &[2]),
            structure: structure.clone(),
            ..GenConfig::default()
        };
        let run = |c: &GenConfig| {
            generate(
                Tempered::new(&*target, c.target_temp),
                Tempered::new(&draft, c.draft_temp),
                &prompt,
                c,
                &CostParams::default(),
            )
            .unwrap()
        };
        let a = run(&config);
        let b = run(&config);
        assert_eq!(a, b, "{}", structure.name());
        assert_eq!(a.tokens.len(), 40);
        assert!(a
            .metrics
            .steps
            .iter()
            .all(|s| s.tree_size <= 16 && s.accepted >= 1));
    }
}
