//! Evaluation metrics against hand computations and naive oracles.

use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vkd_core::data::{synthetic_dialogues, DialogueSample};
use vkd_core::evalmetrics::{
    bleu1, distinct_n, embedding_metrics, perplexity, response_nll, rouge_l, EmbeddingTable, ROUGE_BETA,
};
use vkd_core::pipeline::{toy_config, toy_setup};
use vkd_core::tokenizer::VOCAB_SIZE;
use vkd_core::VkdError;

fn s(v: &[&str]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

#[test]
fn bleu1_documented_examples() {
    assert_eq!(bleu1(&s(&["a b c"]), &s(&["a b c"])).unwrap(), 1.0);
    assert_eq!(bleu1(&s(&["the the the"]), &s(&["the cat"])).unwrap(), 1.0 / 3.0);
    assert_eq!(bleu1(&s(&["x y"]), &s(&["p q"])).unwrap(), 0.0);
    // c = 1 < r = 3: BP = exp(1 - 3)
    assert_eq!(bleu1(&s(&["a"]), &s(&["a b c"])).unwrap(), (1.0f64 - 3.0).exp());
    assert!(matches!(bleu1(&[], &[]), Err(VkdError::Input(_))));
}

#[test]
fn rouge_l_documented_examples() {
    assert_eq!(rouge_l(&s(&["a b c"]), &s(&["a b c"])).unwrap(), 1.0);
    assert_eq!(rouge_l(&s(&["a b"]), &s(&["c d"])).unwrap(), 0.0);
    let b2 = ROUGE_BETA * ROUGE_BETA;
    let (p, r) = (2.0 / 3.0, 1.0);
    let want = (1.0 + b2) * p * r / (r + b2 * p);
    assert_eq!(rouge_l(&s(&["a b c"]), &s(&["a c"])).unwrap(), want);
    assert!((want - 2.44 * (2.0 / 3.0) / (1.0 + 1.44 * 2.0 / 3.0)).abs() < 1e-15);
}

#[test]
fn distinct_documented_examples() {
    assert_eq!(distinct_n(&s(&["a a a"]), 1).unwrap(), 1.0 / 3.0);
    assert_eq!(distinct_n(&s(&["a b", "c d"]), 2).unwrap(), 1.0);
    assert_eq!(distinct_n(&vec!["x y".to_string(); 100], 2).unwrap(), 1.0 / 100.0);
    assert_eq!(distinct_n(&s(&["a", "b c"]), 2).unwrap(), 1.0);
    let err = distinct_n(&s(&["a", "b"]), 2).unwrap_err();
    assert_eq!(err.category(), "degenerate-mask");
}

fn words_table(entries: &[(&str, Vec<f64>)]) -> EmbeddingTable {
    EmbeddingTable::Words(entries.iter().map(|(w, v)| (w.to_string(), v.clone())).collect())
}

#[test]
fn embedding_identity_and_antipodes() {
    let table = words_table(&[("a", vec![1.0, 2.0]), ("b", vec![-0.5, 1.0]), ("na", vec![-1.0, -2.0]), ("nb", vec![0.5, -1.0])]);
    let e = embedding_metrics(&s(&["a b"]), &s(&["a b"]), &table).unwrap();
    for v in [e.average, e.extrema, e.greedy] {
        assert!((v - 1.0).abs() < 1e-12);
    }
    let e = embedding_metrics(&s(&["a b"]), &s(&["na nb"]), &table).unwrap();
    assert!(e.average.abs() < 1e-12);
    let err = embedding_metrics(&s(&["a zzz"]), &s(&["a"]), &table).unwrap_err();
    assert!(err.to_string().contains("zzz"));
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (n(a) * n(b))
}

/// Average, Extrema and Greedy written out per token.
fn embedding_oracle(cands: &[String], refs: &[String], table: &HashMap<String, Vec<f64>>) -> (f64, f64, f64) {
    let (mut avg, mut ext, mut gr) = (0.0, 0.0, 0.0);
    for (c, r) in cands.iter().zip(refs) {
        let cv: Vec<&Vec<f64>> = c.split_whitespace().map(|w| &table[w]).collect();
        let rv: Vec<&Vec<f64>> = r.split_whitespace().map(|w| &table[w]).collect();
        let d = cv[0].len();
        let mut mc = vec![0.0; d];
        let mut mr = vec![0.0; d];
        for v in &cv {
            for j in 0..d {
                mc[j] += v[j] / cv.len() as f64;
            }
        }
        for v in &rv {
            for j in 0..d {
                mr[j] += v[j] / rv.len() as f64;
            }
        }
        avg += (1.0 + cos(&mc, &mr)) / 2.0;
        let extreme = |vs: &[&Vec<f64>]| -> Vec<f64> {
            let mut out = vec![0.0f64; d];
            for j in 0..d {
                for v in vs {
                    if v[j].abs() > out[j].abs() {
                        out[j] = v[j];
                    }
                }
            }
            out
        };
        ext += (1.0 + cos(&extreme(&cv), &extreme(&rv))) / 2.0;
        let mut g1 = 0.0;
        for x in &cv {
            let mut best = f64::NEG_INFINITY;
            for y in &rv {
                best = best.max(cos(x, y));
            }
            g1 += best;
        }
        let mut g2 = 0.0;
        for y in &rv {
            let mut best = f64::NEG_INFINITY;
            for x in &cv {
                best = best.max(cos(x, y));
            }
            g2 += best;
        }
        gr += (1.0 + (g1 / cv.len() as f64 + g2 / rv.len() as f64) / 2.0) / 2.0;
    }
    let n = cands.len() as f64;
    (avg / n, ext / n, gr / n)
}

fn random_corpus(rng: &mut ChaCha8Rng, vocab: &[String], count: usize) -> Vec<String> {
    (0..count)
        .map(|_| {
            let len = rng.random_range(1..6);
            (0..len).map(|_| vocab[rng.random_range(0..vocab.len())].clone()).collect::<Vec<_>>().join(" ")
        })
        .collect()
}

#[test]
fn embedding_metrics_match_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let vocab: Vec<String> = (0..12).map(|i| format!("w{}", i)).collect();
    let map: HashMap<String, Vec<f64>> =
        vocab.iter().map(|w| (w.clone(), (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
    let table = EmbeddingTable::Words(map.clone());
    for _ in 0..10 {
        let c = random_corpus(&mut rng, &vocab, 7);
        let r = random_corpus(&mut rng, &vocab, 7);
        let got = embedding_metrics(&c, &r, &table).unwrap();
        let (a, e, g) = embedding_oracle(&c, &r, &map);
        assert!((got.average - a).abs() < 1e-10);
        assert!((got.extrema - e).abs() < 1e-10);
        assert!((got.greedy - g).abs() < 1e-10);
    }
}

#[test]
fn token_table_follows_model_shape() {
    let (model, _) = toy_setup(&toy_config(1)).unwrap();
    let table = EmbeddingTable::from_model(&model).unwrap();
    match &table {
        EmbeddingTable::Tokens(rows) => assert_eq!(rows.len(), VOCAB_SIZE),
        EmbeddingTable::Words(_) => panic!("expected token rows"),
    }
    let e = embedding_metrics(&s(&["red circle"]), &s(&["red circle"]), &table).unwrap();
    assert!((e.greedy - 1.0).abs() < 1e-12);
}

fn dialogues() -> Vec<DialogueSample> {
    synthetic_dialogues(3, 6, 4).unwrap()
}

#[test]
fn perplexity_of_uniform_model_is_vocab_size() {
    let (mut model, _) = toy_setup(&toy_config(2)).unwrap();
    let n = model.params.by_name("decoder.head.weight").unwrap().value.numel();
    model.params.set_by_name("decoder.head.weight", vec![0.0; n]).unwrap();
    let ppl = perplexity(&model, &dialogues()).unwrap();
    assert!((ppl - VOCAB_SIZE as f64).abs() < 1e-8 * VOCAB_SIZE as f64);
}

#[test]
fn perplexity_equals_exp_of_separately_summed_nll() {
    let (model, _) = toy_setup(&toy_config(6)).unwrap();
    let corpus = dialogues();
    // one sample per forward pass, summed here
    let (mut sum, mut count) = (0.0, 0usize);
    for sample in &corpus {
        let out = model.dialogue_nll(std::slice::from_ref(sample)).unwrap();
        sum += out.loss.item() * out.sample_counts[0] as f64;
        count += out.sample_counts[0];
    }
    let ppl = perplexity(&model, &corpus).unwrap();
    assert!((ppl - (sum / count as f64).exp()).abs() <= 1e-8 * ppl);
    assert!(ppl >= 1.0);
    let (s2, c2) = response_nll(&model, &corpus, 4).unwrap();
    assert_eq!(c2, count);
    assert!((s2 - sum).abs() < 1e-9 * sum);
    assert!(perplexity(&model, &[]).is_err());
}

/// Zeroes every decoder block so the residual stream carries only the
/// token embedding, then wires one-hot embeddings to a head that maps each
/// byte of "hi" + "ab" to its successor with overwhelming margin.
#[test]
fn rigged_perfect_model_has_unit_perplexity() {
    let (mut model, _) = toy_setup(&toy_config(7)).unwrap();
    let names: Vec<String> = model
        .params
        .iter()
        .filter(|(_, p)| p.name.starts_with("decoder.layers.") || p.name == "decoder.positions")
        .map(|(_, p)| p.name.clone())
        .collect();
    for name in names {
        let n = model.params.by_name(&name).unwrap().value.numel();
        model.params.set_by_name(&name, vec![0.0; n]).unwrap();
    }
    let d = model.decoder.d;
    let chain = [(b'i' as usize, b'a' as usize), (b'a' as usize, b'b' as usize), (b'b' as usize, VOCAB_SIZE - 3)];
    let mut emb = model.params.by_name("decoder.token_embedding").unwrap().value.to_vec();
    let mut head = vec![0.0; d * VOCAB_SIZE];
    for (slot, &(from, to)) in chain.iter().enumerate() {
        for j in 0..d {
            emb[from * d + j] = if j == slot { 1.0 } else { 0.0 };
        }
        head[slot * VOCAB_SIZE + to] = 1e3;
    }
    model.params.set_by_name("decoder.token_embedding", emb).unwrap();
    model.params.set_by_name("decoder.head.weight", head).unwrap();
    let corpus = vec![DialogueSample { context: "hi".into(), response: "ab".into() }];
    let ppl = perplexity(&model, &corpus).unwrap();
    assert!((ppl - 1.0).abs() < 1e-12, "{}", ppl);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_stay_in_range_and_ignore_order(seed in any::<u64>(), count in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab: Vec<String> = (0..6).map(|i| format!("t{}", i)).collect();
        let c = random_corpus(&mut rng, &vocab, count);
        let r = random_corpus(&mut rng, &vocab, count);
        let map: HashMap<String, Vec<f64>> =
            vocab.iter().map(|w| (w.clone(), (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
        let table = EmbeddingTable::Words(map);
        let b = bleu1(&c, &r).unwrap();
        let l = rouge_l(&c, &r).unwrap();
        let e = embedding_metrics(&c, &r, &table).unwrap();
        for v in [b, l, e.average, e.extrema, e.greedy, distinct_n(&c, 1).unwrap()] {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        }
        let mut order: Vec<usize> = (0..count).collect();
        order.reverse();
        let pc: Vec<String> = order.iter().map(|&i| c[i].clone()).collect();
        let pr: Vec<String> = order.iter().map(|&i| r[i].clone()).collect();
        prop_assert_eq!(bleu1(&pc, &pr).unwrap(), b);
        prop_assert!((rouge_l(&pc, &pr).unwrap() - l).abs() < 1e-12);
        prop_assert!((embedding_metrics(&pc, &pr, &table).unwrap().greedy - e.greedy).abs() < 1e-12);
        prop_assert_eq!(distinct_n(&pc, 1).unwrap(), distinct_n(&c, 1).unwrap());
    }

    #[test]
    fn duplicating_a_sentence_never_raises_distinct(seed in any::<u64>(), count in 1usize..6, n in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab: Vec<String> = (0..5).map(|i| format!("t{}", i)).collect();
        let mut c = random_corpus(&mut rng, &vocab, count);
        c[0].push_str(" t0 t1");
        let before = distinct_n(&c, n).unwrap();
        let dup = c[rng.random_range(0..count)].clone();
        c.push(dup);
        prop_assert!(distinct_n(&c, n).unwrap() <= before + 1e-15);
    }
}
