mod common;

use common::models::{
    check_inter_token_causality, check_intra_token_causality, incremental_gap, micro_nmt_gradcheck, model, random_tokens,
    tiny, total_loss, SIZES,
};
use nmt_core::encoding::{FeatureConfig, FeatureVocab, Scheme, IGNORE};
use nmt_core::model::{Model, ModelConfig, SubDecoderKind};
use nmt_core::Error;
use nmt_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn perturbing_later_tokens_leaves_earlier_logits_bitwise_equal() {
    for kind in SubDecoderKind::ALL {
        check_inter_token_causality(kind);
    }
}

#[test]
fn features_do_not_see_their_own_or_later_sub_tokens() {
    for kind in SubDecoderKind::ALL {
        check_intra_token_causality(kind);
    }
}

#[test]
fn teacher_forced_and_incremental_logits_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for kind in SubDecoderKind::ALL {
        for seed in 0..3 {
            let tokens = random_tokens(&mut rng, 6);
            let gap32 = incremental_gap(&model::<f32>(kind, seed), &tokens);
            let gap64 = incremental_gap(&model::<f64>(kind, seed), &tokens);
            assert!(gap32 < 1e-5, "{kind} f32 gap {gap32}");
            assert!(gap64 < 1e-10, "{kind} f64 gap {gap64}");
        }
    }
}

#[test]
fn zeroed_output_layers_give_uniform_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for kind in SubDecoderKind::ALL {
        let mut m = model::<f64>(kind, 7);
        for p in m.store.iter_mut() {
            if p.name.starts_with("logits.") {
                p.value.data_mut().fill(0.0);
            }
        }
        let tokens = random_tokens(&mut rng, 5);
        let lp = m.log_probs(&tokens).unwrap();
        for (k, v) in lp.iter().enumerate() {
            let size = SIZES[k % SIZES.len()];
            match v {
                Some(v) => assert!((v + ((size - 2) as f64).ln()).abs() < 1e-12),
                None => assert!(size == 2 || tokens[k] == IGNORE),
            }
        }
    }
}

#[test]
fn token_embedding_is_the_sum_of_feature_rows() {
    let m = model::<f64>(SubDecoderKind::Nmt, 8);
    let tokens = vec![3, 4, IGNORE, 2, 5, IGNORE, IGNORE, 4];
    let mut g = Graph::new();
    let e = m.embed_tokens(&mut g, &tokens).unwrap();
    let e = g.value(e).clone();
    for t in 0..2 {
        let mut expected = vec![0.0; 16];
        for (j, name) in ["a", "b", "off", "c"].iter().enumerate() {
            let v = tokens[t * 4 + j];
            if v == IGNORE {
                continue;
            }
            let table = &m.store.get(m.param_id(&format!("embed.{name}")).unwrap()).value;
            for (x, y) in expected.iter_mut().zip(table.row(v as usize)) {
                *x += y;
            }
        }
        for (a, b) in e.row(t).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }
    assert!(m.param_id("embed.off").is_none());

    let mut zeroed = m.clone();
    for p in zeroed.store.iter_mut() {
        if p.name.starts_with("embed.") && p.name != "embed.position" && p.name != "embed.bos" {
            p.value.data_mut().fill(0.0);
        }
    }
    let mut g = Graph::new();
    let e = zeroed.embed_tokens(&mut g, &tokens).unwrap();
    assert!(g.value(e).data().iter().all(|&x| x == 0.0));
}

#[test]
fn every_parameter_receives_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for kind in SubDecoderKind::ALL {
        let mut cfg = tiny(kind);
        cfg.dropout = 0.1;
        let m = Model::<f32>::new(cfg, 10).unwrap();
        let tokens = random_tokens(&mut rng, 6);
        let mut g = Graph::training(11);
        let loss = total_loss(&mut g, &m, &tokens);
        let grads = g.backward(loss).unwrap().params(&m.store);
        for (id, p) in m.store.iter() {
            assert!(grads.norm_of(id) > 0.0, "{kind}: {} has no gradient", p.name);
        }
        assert!(kind != SubDecoderKind::Nmt || m.param_id("enricher.block0.attn.q.weight").is_some());
    }
}

fn block(d: usize, f: usize, norms: usize) -> usize {
    // Attention: q, v, o with bias, k without; feed-forward up/down with bias.
    4 * d * d + 3 * d + 2 * d * f + f + d + 2 * d * norms
}

/// Closed-form parameter count of a configuration.
fn closed_form(cfg: &ModelConfig) -> usize {
    let (d, f, j) = (cfg.dim, cfg.ff_mult * cfg.dim, cfg.vocab_sizes.len());
    let valued: Vec<usize> = cfg.vocab_sizes.iter().copied().filter(|&s| s > 2).collect();
    let embeddings: usize = valued.iter().map(|s| s * d).sum::<usize>() + cfg.max_len * d + d;
    let heads: usize = valued.iter().map(|s| (s - 2) * (d + 1)).sum();
    let main = cfg.main_layers * block(d, f, 2) + 2 * d;
    let sub = match cfg.subdecoder {
        SubDecoderKind::Parallel => 0,
        SubDecoderKind::Ff => 2 * d * d + d,
        SubDecoderKind::Rnn => 2 * (3 * d * d + 3 * d),
        SubDecoderKind::SelfAttn => d + (j + 1) * d + cfg.sub_layers * block(d, f, 2) + 2 * d,
        SubDecoderKind::CrossAttn => d + j * d + cfg.sub_layers * block(d, f, 3) + 2 * d,
        SubDecoderKind::Nmt => {
            d + j * d + cfg.sub_layers * block(d, f, 3) + 2 * d + d + cfg.enricher_layers * block(d, f, 3)
        }
    };
    embeddings + heads + main + sub
}

#[test]
fn parameter_count_matches_the_closed_form() {
    for kind in SubDecoderKind::ALL {
        let cfg = tiny(kind);
        assert_eq!(Model::<f32>::new(cfg.clone(), 0).unwrap().num_params(), closed_form(&cfg), "{kind}");
    }
    let vocab = FeatureVocab::new(12, 48, FeatureConfig::default());
    for scheme in [Scheme::NbPf, Scheme::Cp] {
        let cfg = ModelConfig::default().with_scheme(&vocab, scheme);
        let m = Model::<f32>::new(cfg.clone(), 0).unwrap();
        assert_eq!(m.num_params(), closed_form(&cfg));
    }
}

#[test]
fn micro_nmt_model_passes_finite_differences() {
    let report = micro_nmt_gradcheck();
    assert!(report.checked > 300);
    assert!(report.max_rel_error < 1e-4, "{} at {}", report.max_rel_error, report.worst);
}

#[test]
fn enricher_ignores_states_outside_its_window() {
    let m = model::<f64>(SubDecoderKind::Nmt, 16);
    let w = m.width();
    let window = m.config.window;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let tokens = random_tokens(&mut rng, 6);
    let t = 5;
    let mut g = Graph::new();
    let h = m.hidden(&mut g, &tokens).unwrap();
    let h = g.value(h).clone();
    let step = |hidden: &Tensor<f64>, j: usize| {
        let mut g = Graph::new();
        let hv = g.constant(hidden.clone());
        let l = m.step_logits(&mut g, hv, t, &tokens[t * w..t * w + j], j).unwrap().unwrap();
        g.value(l).data().to_vec()
    };
    let mut garbage = h.clone();
    let d = m.config.dim;
    for q in 0..=(t - window) {
        for x in &mut garbage.data_mut()[q * d..(q + 1) * d] {
            *x = rng.random_range(-50.0..50.0);
        }
    }
    for j in [1, 3] {
        assert_eq!(step(&h, j), step(&garbage, j));
    }
    // The newest state outside h_t itself is inside the window and matters.
    let mut inside = h.clone();
    let q = t + 1 - window;
    inside.data_mut()[q * d] += 1.0;
    assert_ne!(step(&h, 3), step(&inside, 3));
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = model::<f32>(SubDecoderKind::Nmt, 18);
    m.save(&path, serde_json::json!({ "step": 7 })).unwrap();
    let (back, meta) = Model::<f32>::load(&path).unwrap();
    assert_eq!(meta["step"], 7);
    assert_eq!(back.config, m.config);
    for ((_, a), (_, b)) in m.store.iter().zip(back.store.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let tokens = random_tokens(&mut rng, 4);
    assert_eq!(m.log_probs(&tokens).unwrap(), back.log_probs(&tokens).unwrap());
    assert!(matches!(
        Model::<f32>::load(&dir.path().join("absent.ckpt")),
        Err(Error::MissingCheckpoint(_))
    ));
}

#[test]
fn invalid_inputs_are_rejected() {
    let m = model::<f32>(SubDecoderKind::CrossAttn, 20);
    let mut g = Graph::new();
    assert!(matches!(m.forward(&mut g, &[2, 2, 1]), Err(Error::Data(_))));
    assert!(matches!(m.forward(&mut g, &[6, 2, 1, 2]), Err(Error::Data(_))));
    let long = vec![2, 2, 1, 2].repeat(17);
    assert!(matches!(m.forward(&mut g, &long), Err(Error::Data(_))));
    let mut cfg = tiny(SubDecoderKind::Nmt);
    cfg.window = 0;
    assert!(matches!(Model::<f32>::new(cfg, 0), Err(Error::Config(_))));
    let mut cfg = tiny(SubDecoderKind::Nmt);
    cfg.heads = 3;
    assert!(matches!(Model::<f32>::new(cfg, 0), Err(Error::Config(_))));
}

#[test]
fn single_token_sequence_is_valid() {
    for kind in SubDecoderKind::ALL {
        let m = model::<f32>(kind, 21);
        let lp = m.log_probs(&[3, 4, IGNORE, 2]).unwrap();
        assert!(lp.iter().flatten().all(|v| v.is_finite() && *v < 0.0));
    }
}
