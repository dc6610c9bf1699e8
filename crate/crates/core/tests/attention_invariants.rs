use kriformer::attention::{msa, msia, mta, spatial_mask, MASKED};
use kriformer::training::tiny_hyper;
use kriformer::{KeepRule, KriformerModel, Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::{params, permute_nodes, random_adjacency, simple_spectrum_graphs, uniform};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_are_masked_distributions(seed in any::<u64>(), n in 2usize..7, t in 1usize..6, b in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, p) = params(8, 2, seed);
        let adj = random_adjacency(&mut rng, n);
        let mask = spatial_mask(&adj).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let h = tape.constant(uniform(&mut rng, &[b, t, n, 8], 3.0));

        let out = msa(&mut tape, &p, &bound, h, 2, Some(&mask), None).unwrap();
        for (r, row) in tape.value(out.weights).data().chunks(n).enumerate() {
            let i = r % n;
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (j, &w) in row.iter().enumerate() {
                if mask.at(&[i, j]) == MASKED {
                    prop_assert!(w <= 1e-12, "masked weight {w}");
                }
            }
        }
        let out = mta(&mut tape, &p, &bound, h, 2, None).unwrap();
        for row in tape.value(out.weights).data().chunks(t) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn self_interaction_matches_spatial_attention(seed in any::<u64>(), n in 2usize..7, t in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, p) = params(8, 2, seed);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let h = tape.constant(uniform(&mut rng, &[2, t, n, 8], 2.0));
        let a = msia(&mut tape, &p, &bound, h, h, 2, None, None).unwrap().output;
        let b = msa(&mut tape, &p, &bound, h, 2, None, None).unwrap().output;
        prop_assert!(tape.value(a).max_abs_diff(tape.value(b)) <= 1e-12);
    }

    #[test]
    fn spatial_attention_is_node_equivariant(seed in any::<u64>(), n in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, p) = params(8, 2, seed);
        let adj = random_adjacency(&mut rng, n);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let padj = Tensor::from_fn(&[n, n], |k| adj.at(&[perm[k / n], perm[k % n]]));
        let x = uniform(&mut rng, &[2, 3, n, 8], 2.0);

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let h = tape.constant(x.clone());
        let hp = tape.constant(permute_nodes(&x, &perm));
        let y = msa(&mut tape, &p, &bound, h, 2, Some(&spatial_mask(&adj).unwrap()), None).unwrap().output;
        let yp = msa(&mut tape, &p, &bound, hp, 2, Some(&spatial_mask(&padj).unwrap()), None).unwrap().output;
        let expected = permute_nodes(tape.value(y), &perm);
        prop_assert!(tape.value(yp).max_abs_diff(&expected) <= 1e-9);
    }

    #[test]
    fn temporal_attention_is_time_equivariant(seed in any::<u64>(), t in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, p) = params(8, 2, seed);
        let mut perm: Vec<usize> = (0..t).collect();
        perm.shuffle(&mut rng);
        let x = uniform(&mut rng, &[t, 4, 8], 2.0);
        let shuffle = |x: &Tensor| {
            let row = 4 * 8;
            let data = perm.iter().flat_map(|&s| x.data()[s * row..(s + 1) * row].to_vec()).collect();
            Tensor::new(x.shape().to_vec(), data).unwrap()
        };
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let h = tape.constant(x.clone());
        let hp = tape.constant(shuffle(&x));
        let y = mta(&mut tape, &p, &bound, h, 2, None).unwrap().output;
        let yp = mta(&mut tape, &p, &bound, hp, 2, None).unwrap().output;
        prop_assert!(tape.value(yp).max_abs_diff(&shuffle(tape.value(y))) <= 1e-9);
    }
}

#[test]
fn fully_masked_spatial_attention_keeps_nodes_apart() {
    // with every off-diagonal pair masked each node only sees itself, so
    // changing one node leaves every other output untouched
    let n = 5;
    let (store, p) = params(8, 2, 11);
    let mask = spatial_mask(&Tensor::zeros(&[n, n])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = uniform(&mut rng, &[3, n, 8], 1.0);
    let mut x2 = x.clone();
    for c in 0..8 {
        x2.set(&[1, 2, c], 5.0);
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let (h, h2) = (tape.constant(x), tape.constant(x2));
    let a = msa(&mut tape, &p, &bound, h, 2, Some(&mask), None).unwrap();
    let b = msa(&mut tape, &p, &bound, h2, 2, Some(&mask), None).unwrap().output;
    for (r, row) in tape.value(a.weights).data().chunks(n).enumerate() {
        for (j, &w) in row.iter().enumerate() {
            let expect = if j == r % n { 1.0 } else { 0.0 };
            assert!((w - expect).abs() <= 1e-12);
        }
    }
    let (ya, yb) = (tape.value(a.output), tape.value(b));
    for t in 0..3 {
        for i in 0..n {
            let same = (0..8).all(|c| ya.at(&[t, i, c]) == yb.at(&[t, i, c]));
            assert_eq!(same, (t, i) != (1, 2), "step {t} node {i}");
        }
    }
}

#[test]
fn model_is_node_permutation_equivariant() {
    for (seed, graph) in simple_spectrum_graphs(6, 3).into_iter().enumerate() {
        let seed = seed as u64;
        let n = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let m = KriformerModel::init(tiny_hyper(), &graph, KeepRule::Kernel, seed).unwrap();
        let mp = KriformerModel::init(tiny_hyper(), &graph.permuted(&perm), KeepRule::Kernel, seed).unwrap();
        assert_eq!(m.params(), mp.params());
        let x = uniform(&mut rng, &[2, 8, n, 1], 1.5);
        let y = m.forward(&x).unwrap();
        let yp = mp.forward(&permute_nodes(&x, &perm)).unwrap();
        let err = yp.max_abs_diff(&permute_nodes(&y, &perm));
        assert!(err <= 1e-9, "seed {seed}: {err}");
    }
}
