use nmt_core::encoding::IGNORE;
use nmt_core::model::{Model, ModelConfig, SubDecoderKind};
use nmt_core::Error;
use nmt_tensor::graph::uniform_values;
use nmt_tensor::{check_gradients, GradCheckOptions, GradCheckReport, Graph, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIZES: [usize; 4] = [6, 7, 2, 5];

pub fn tiny(kind: SubDecoderKind) -> ModelConfig {
    ModelConfig {
        dim: 16,
        heads: 2,
        main_layers: 2,
        sub_layers: 1,
        enricher_layers: 1,
        window: 2,
        max_len: 16,
        ff_mult: 2,
        vocab_sizes: SIZES.to_vec(),
        feature_names: ["a", "b", "off", "c"].map(String::from).to_vec(),
        subdecoder: kind,
        dropout: 0.0,
        key_residual: false,
    }
}

/// Weights large enough that attention is far from uniform.
pub fn spread<T: Scalar>(m: &mut Model<T>, seed: u64, amplitude: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in m.store.iter_mut() {
        let n = p.value.len();
        let v: Vec<f64> = uniform_values::<f64>(&mut rng, n).into_iter().map(|x| x * amplitude).collect();
        p.value = Tensor::from_f64(p.value.shape(), &v).unwrap();
    }
}

pub fn model<T: Scalar>(kind: SubDecoderKind, seed: u64) -> Model<T> {
    let mut m = Model::<f64>::new(tiny(kind), seed).unwrap();
    spread(&mut m, seed + 100, 0.5);
    m.cast()
}

pub fn random_token(rng: &mut impl Rng) -> Vec<u32> {
    SIZES
        .iter()
        .map(|&s| if s == 2 || rng.random_bool(0.1) { IGNORE } else { rng.random_range(2..s as u32) })
        .collect()
}

pub fn random_tokens(rng: &mut impl Rng, n: usize) -> Vec<u32> {
    (0..n).flat_map(|_| random_token(rng)).collect()
}

/// Per feature, the `[n, classes]` logits as f64 (empty for valueless features).
pub fn logits<T: Scalar>(m: &Model<T>, tokens: &[u32]) -> Vec<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let fwd = m.forward(&mut g, tokens).unwrap();
    fwd.logits
        .iter()
        .map(|l| match l {
            Some(v) => {
                let t = g.value(*v);
                (0..t.rows()).map(|r| t.row(r).iter().map(|x| x.to_f64_lossy()).collect()).collect()
            }
            None => Vec::new(),
        })
        .collect()
}

/// Perturbs whole later tokens and compares earlier logits bitwise.
pub fn check_inter_token_causality(kind: SubDecoderKind) {
    let w = SIZES.len();
    {
        let m = model::<f64>(kind, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..4 {
            let n = 7;
            let tokens = random_tokens(&mut rng, n);
            let base = logits(&m, &tokens);
            let p = rng.random_range(0..n);
            let mut other = tokens.clone();
            other.splice(p * w..(p + 1) * w, random_token(&mut rng));
            let after = logits(&m, &other);
            for j in [0, 1, 3] {
                for t in 0..p {
                    assert_eq!(base[j][t], after[j][t], "{kind} feature {j} at {t} after perturbing {p}");
                }
            }
            // Feature 0 of token p only sees earlier tokens.
            assert_eq!(base[0][p], after[0][p], "{kind}");
        }
    }
}

/// Perturbs single sub-tokens and checks that only later features of the
/// same token move (and never for the parallel head).
pub fn check_intra_token_causality(kind: SubDecoderKind) {
    let w = SIZES.len();
    {
        let m = model::<f64>(kind, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut changed = false;
        for _ in 0..6 {
            let n = 5;
            let tokens = random_tokens(&mut rng, n);
            let base = logits(&m, &tokens);
            let p = rng.random_range(0..n);
            for slot in [0, 1, 3] {
                let mut other = tokens.clone();
                other[p * w + slot] = 2 + (tokens[p * w + slot] - 1) % (SIZES[slot] as u32 - 2);
                let after = logits(&m, &other);
                for j in [0, 1, 3] {
                    if j <= slot || kind == SubDecoderKind::Parallel {
                        assert_eq!(base[j][p], after[j][p], "{kind} feature {j} after changing slot {slot}");
                    } else if base[j][p] != after[j][p] {
                        changed = true;
                    }
                }
            }
        }
        // Sequential decoders really do condition on earlier sub-tokens.
        assert_eq!(changed, kind.is_sequential(), "{kind}");
    }
}

/// Largest |teacher-forced − incremental| logit over every position and
/// feature. The incremental path recomputes the main decoder on the prefix
/// with token `t` replaced by a dummy and asks for one feature at a time.
pub fn incremental_gap<T: Scalar>(m: &Model<T>, tokens: &[u32]) -> f64 {
    let w = m.width();
    let n = tokens.len() / w;
    let full = logits(m, tokens);
    let mut worst = 0f64;
    for t in 0..n {
        let mut prefix = tokens[..(t + 1) * w].to_vec();
        prefix[t * w..].fill(IGNORE);
        let token = &tokens[t * w..(t + 1) * w];
        let mut g = Graph::new();
        let hidden = m.hidden(&mut g, &prefix).unwrap();
        for j in 0..w {
            let Some(l) = m.step_logits(&mut g, hidden, t, &token[..j], j).unwrap() else {
                assert!(full[j].is_empty());
                continue;
            };
            for (a, b) in g.value(l).data().iter().zip(&full[j][t]) {
                worst = worst.max((a.to_f64_lossy() - b).abs());
            }
        }
    }
    worst
}

pub fn total_loss<T: Scalar>(g: &mut Graph<T>, m: &Model<T>, tokens: &[u32]) -> Var {
    let fwd = m.forward(g, tokens).unwrap();
    let mut loss: Option<Var> = None;
    for (l, targets) in fwd.logits.iter().zip(m.targets(tokens)) {
        let Some(l) = l else { continue };
        if targets.iter().all(Option::is_none) {
            continue;
        }
        let ce = g.cross_entropy(*l, &targets).unwrap();
        loss = Some(match loss {
            None => ce,
            Some(a) => g.add(a, ce).unwrap(),
        });
    }
    loss.unwrap()
}

/// Finite-difference check of a 2+1 layer NMT model in f64.
pub fn micro_nmt_gradcheck() -> GradCheckReport {
    let mut cfg = tiny(SubDecoderKind::Nmt);
    cfg.main_layers = 2;
    cfg.sub_layers = 1;
    let mut m = Model::<f64>::new(cfg.clone(), 12).unwrap();
    spread(&mut m, 13, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let tokens = random_tokens(&mut rng, 4);
    let opts = GradCheckOptions {
        max_entries: Some(6),
        sample_seed: 15,
        ..GradCheckOptions::default()
    };
    check_gradients(&[], &m.store, &opts, |g, s, _| {
        let local = Model::from_store(cfg.clone(), s.clone()).map_err(|e| match e {
            Error::Tensor(t) => t,
            other => panic!("{other}"),
        })?;
        Ok(total_loss(g, &local, &tokens))
    })
    .unwrap()
}
