use std::collections::BTreeSet;

use localness::model::{names, BoundParams, ForwardOptions};
use localness::rng::{stream_rng, RngStream};
use localness::tasks::generate_batch;
use localness::tensor::grad_check;
use localness::train::batch_loss;
use localness::{evaluate, Encoder, EncoderConfig, Error, Tape, TaskSpec, Tensor, WindowStrategy};
use proptest::prelude::*;
use rand::Rng;

fn jittered(cfg: EncoderConfig, seed: u64, scale: f64) -> Encoder {
    let mut enc = Encoder::init(cfg).unwrap();
    let mut rng = stream_rng(seed, RngStream::GradCheck);
    for t in enc.params_mut().values_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-scale..scale);
        }
    }
    enc
}

fn logits(enc: &Encoder, tokens: &[usize], options: &ForwardOptions) -> Tensor {
    enc.encode_with(tokens, options).unwrap().0
}

#[test]
fn full_model_gradient_check() {
    let enc = jittered(EncoderConfig::tiny(), 1, 0.5);
    let seqs: [&[usize]; 2] = [&[3, 1, 4, 1, 5], &[9, 2, 6, 5, 3]];
    let targets: Vec<Option<usize>> = [2, 7, 1, 8, 2, 8, 1, 8, 2, 8].into_iter().map(Some).collect();
    let params: Vec<(String, Tensor)> = enc.params().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let report = grad_check(&params, 1e-5, 1e-4, |tape: &mut Tape, vars| {
        let bound = BoundParams::from_pairs(params.iter().map(|(k, _)| k.clone()).zip(vars.iter().copied()));
        let out = enc.forward(tape, &bound, &seqs, &ForwardOptions::default())?;
        Ok::<_, Error>(tape.cross_entropy(out.logits, &targets)?)
    })
    .unwrap();
    assert_eq!(report.params.len(), enc.params().len());
    let offenders: Vec<_> = report.offenders().collect();
    assert!(offenders.is_empty(), "{offenders:?}");
}

#[test]
fn gating_follows_localness_layers() {
    let mut cfg = EncoderConfig::tiny();
    cfg.localness_layers = BTreeSet::from([2]);
    let a = jittered(cfg, 3, 0.3);
    let mut b = a.clone();
    for (name, t) in b.params_mut().iter_mut() {
        if names::is_localness(name) {
            for x in t.data_mut() {
                *x = -*x * 3.0;
            }
        }
    }
    let tokens = [1, 2, 3, 4, 5, 6];
    let opts = ForwardOptions::default();
    // Layer 1 is vanilla in both, layer 2 differs.
    assert_ne!(logits(&a, &tokens, &opts), logits(&b, &tokens, &opts));
    let (_, traces) = a.encode(&tokens).unwrap();
    assert!(traces.iter().all(|t| t.layer == 2));
    assert_eq!(traces.len(), a.config().heads);
}

#[test]
fn no_localness_layers_ignores_localness_values() {
    let mut cfg = EncoderConfig::tiny();
    cfg.localness_layers.clear();
    let a = jittered(cfg.clone(), 4, 0.3);
    // Encoders without localness layers carry no localness parameters; lending
    // another model's values cannot change anything.
    assert!(a.params().keys().all(|k| !names::is_localness(k)));
    let mut with = EncoderConfig::tiny();
    with.localness_layers = BTreeSet::from([1, 2]);
    let donor = jittered(with, 5, 2.0);
    let mut b = a.params().clone();
    for (k, v) in donor.params() {
        if !names::is_localness(k) {
            continue;
        }
        b.insert(k.clone(), v.clone());
    }
    assert!(Encoder::from_params(cfg, b).is_err(), "stray localness parameters must be rejected");
}

#[test]
fn zeroed_feed_forward_reduces_to_layer_norm() {
    let enc = jittered(EncoderConfig::tiny(), 6, 0.3);
    let mut zeroed = enc.clone();
    for l in 1..=enc.config().layers {
        for p in ["ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2"] {
            for x in zeroed.params_mut().get_mut(&names::layer(l, p)).unwrap().data_mut() {
                *x = 0.0;
            }
        }
    }
    let mut tape = Tape::new();
    let bound = zeroed.bind(&mut tape, false);
    let x = tape.constant(Tensor::new(vec![4, 8], (0..32).map(|k| (k as f64 * 0.37).sin()).collect()).unwrap());
    let spans = [localness::attention::Span { start: 0, len: 4 }];
    let (out, _) = zeroed.encoder_layer(&mut tape, x, 1, &bound, &spans, &ForwardOptions::default()).unwrap();

    // Recompute sublayer 1 alone and apply the second norm directly.
    let mut solo = zeroed.clone();
    solo.params_mut().insert(names::layer(1, "norm2.gain"), Tensor::filled(vec![8], 1.0));
    solo.params_mut().insert(names::layer(1, "norm2.bias"), Tensor::zeros(vec![8]));
    let mut t2 = Tape::new();
    let b2 = solo.bind(&mut t2, false);
    let x2 = t2.constant(tape.value(x).clone());
    let (h1, _) = solo.encoder_layer(&mut t2, x2, 1, &b2, &spans, &ForwardOptions::default()).unwrap();
    let g = t2.constant(zeroed.params()[&names::layer(1, "norm2.gain")].clone());
    let b = t2.constant(zeroed.params()[&names::layer(1, "norm2.bias")].clone());
    let expected = t2.layer_norm(h1, g, b, 1e-6).unwrap();
    // Normalizing an already normalized row again only moves it by the eps term.
    for (a, e) in tape.data(out).iter().zip(t2.data(expected)) {
        assert!((a - e).abs() < 1e-6, "{a} vs {e}");
    }
}

#[test]
fn encode_is_deterministic_and_shape_preserving() {
    let enc = Encoder::init(EncoderConfig::micro()).unwrap();
    let tokens: Vec<usize> = (0..20).map(|i| (i * 5) % 16).collect();
    let (a, ta) = enc.encode(&tokens).unwrap();
    let (b, tb) = enc.encode(&tokens).unwrap();
    assert_eq!(a.shape(), [20, 16]);
    assert_eq!(a.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    assert_eq!(ta, tb);
    assert_eq!(ta.len(), 2 * 4);
    for len in 1..=8 {
        let mut tape = Tape::new();
        let small = Encoder::init(EncoderConfig::tiny()).unwrap();
        let bound = small.bind(&mut tape, false);
        let x = tape.constant(Tensor::filled(vec![len, 8], 0.5));
        let spans = [localness::attention::Span { start: 0, len }];
        let (out, _) = small.encoder_layer(&mut tape, x, 1, &bound, &spans, &ForwardOptions::default()).unwrap();
        assert_eq!(tape.shape(out), [len, 8]);
    }
}

#[test]
fn initial_loss_is_near_ln_vocab() {
    let enc = Encoder::init(EncoderConfig::micro()).unwrap();
    let mut rng = stream_rng(1, RngStream::TrainData);
    let batch = generate_batch(&TaskSpec::micro(), 32, &mut rng).unwrap();
    let mut tape = Tape::new();
    let (loss, _) = batch_loss(&enc, &mut tape, &batch, false).unwrap();
    let loss = tape.data(loss)[0];
    assert!((loss - 16f64.ln()).abs() < 0.3, "loss {loss}");
}

#[test]
fn untrained_accuracy_is_chance() {
    let enc = jittered(EncoderConfig::micro(), 8, 0.05);
    let report = evaluate(&enc, &TaskSpec::micro(), 100, 32).unwrap();
    assert!((report.token_accuracy - 1.0 / 16.0).abs() < 0.05, "{}", report.token_accuracy);
}

#[test]
fn fixed_strategy_windows_are_ten() {
    let mut cfg = EncoderConfig::tiny();
    cfg.strategy = WindowStrategy::fixed();
    let enc = jittered(cfg, 2, 0.3);
    let (_, traces) = enc.encode(&[1, 2, 3, 4, 5]).unwrap();
    assert!(!traces.is_empty());
    assert!(traces.iter().flat_map(|t| &t.window).all(|&d| d == 10.0));
}

fn vanilla_config() -> EncoderConfig {
    let mut cfg = EncoderConfig::tiny();
    cfg.localness_layers.clear();
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn vanilla_encoder_is_permutation_equivariant(
        tokens in prop::collection::vec(0usize..11, 2..=8),
        keys in prop::collection::vec(any::<u32>(), 8),
        seed in 0u64..1000,
    ) {
        let enc = jittered(vanilla_config(), seed, 0.3);
        let opts = ForwardOptions { positions: false, ..Default::default() };
        let n = tokens.len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.sort_by_key(|&i| keys[i]);
        let permuted: Vec<usize> = perm.iter().map(|&i| tokens[i]).collect();
        let a = logits(&enc, &tokens, &opts);
        let b = logits(&enc, &permuted, &opts);
        for (row, &src) in perm.iter().enumerate() {
            for (x, y) in b.row(row).iter().zip(a.row(src)) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn vanilla_layers_ignore_localness_values(tokens in prop::collection::vec(0usize..11, 1..=8), seed in 0u64..1000) {
        // Same config with localness params present but every layer gated off via the zero hook.
        let enc = jittered(EncoderConfig::tiny(), seed, 0.3);
        let mut other = enc.clone();
        for (name, t) in other.params_mut().iter_mut() {
            if names::is_localness(name) {
                for x in t.data_mut() {
                    *x += 1.5;
                }
            }
        }
        let opts = ForwardOptions { bias: localness::attention::BiasMode::Zero, ..Default::default() };
        prop_assert_eq!(logits(&enc, &tokens, &opts), logits(&other, &tokens, &opts));
    }
}
