use nmt_tensor::graph::uniform_values;
use nmt_tensor::{
    AttnMask, Graph, GruCell, Linear, MultiHeadAttention, ParamStore, Tensor, TensorError,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

#[test]
fn identity_matmul() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2, 3], &[1.0, -2.0, 3.5, 0.0, 4.0, 9.0]));
    let eye = g.constant(Tensor::eye(2));
    // I₂ · X computed as (Xᵀ · I₂)ᵀ through bmm with a transposed operand.
    let xi = g.reshape(x, &[1, 2, 3]).unwrap();
    let id = g.reshape(eye, &[1, 2, 2]).unwrap();
    let out = g.bmm(id, xi, false).unwrap();
    assert_eq!(g.value(out).data(), g.value(x).data());

    let w = g.constant(Tensor::eye(3));
    let out = g.matmul(x, w).unwrap();
    assert_eq!(g.value(out).data(), g.value(x).data());
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[4]));
    let y = g.softmax(x);
    assert_eq!(g.value(y).data(), &[0.25f32; 4]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-30.0f32..30.0, 1..64)) {
        let n = values.len();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[1, n], values).unwrap());
        let y = g.softmax(x);
        let s: f32 = g.value(y).data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn shape_mismatch_names_op_and_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    let err = g.add(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "add",
            left: vec![2, 3],
            right: vec![3, 2],
        }
    );
    let msg = err.to_string();
    assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    assert!(g.matmul(a, a).is_err());
}

#[test]
fn dropout_eval_is_bitwise_identity_and_rate_is_checked() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(&[5, 5], uniform_values(&mut rng, 25)).unwrap());
    let y = g.dropout(x, 0.5).unwrap();
    assert_eq!(
        g.value(x).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert!(g.dropout(x, 1.0).is_err());
    assert!(g.dropout(x, -0.1).is_err());

    let mut train = Graph::<f32>::training(3);
    let x = train.constant(Tensor::full(&[1000], 1.0));
    let y = train.dropout(x, 0.5).unwrap();
    let zeros = train.value(y).data().iter().filter(|&&v| v == 0.0).count();
    assert!((400..600).contains(&zeros));
    assert!(train.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn cross_entropy_uniform_and_ignore() {
    let mut g = Graph::<f64>::new();
    let logits = g.input(Tensor::full(&[2, 10], 0.3));
    let loss = g.cross_entropy(logits, &[Some(4), None]).unwrap();
    assert!((g.value(loss).data()[0] - 10f64.ln()).abs() < 1e-12);
    let grads = g.backward(loss).unwrap();
    let gl = grads.wrt(logits).unwrap();
    // softmax − one_hot on the scored row, nothing on the ignored one.
    for k in 0..10 {
        let expected = 0.1 - if k == 4 { 1.0 } else { 0.0 };
        assert!((gl[k] - expected).abs() < 1e-12);
        assert_eq!(gl[10 + k], 0.0);
    }

    assert_eq!(
        g.cross_entropy(logits, &[Some(10), None]).unwrap_err(),
        TensorError::TargetOutOfRange { target: 10, vocab: 10 }
    );
    assert_eq!(g.cross_entropy(logits, &[None, None]).unwrap_err(), TensorError::NoTargets);
}

fn random_attention(store: &mut ParamStore<f64>, dim: usize, heads: usize, seed: u64) -> MultiHeadAttention {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = MultiHeadAttention::new(store, "a", dim, heads, &mut rng).unwrap();
    for p in store.iter_mut() {
        let n = p.value.len();
        p.value.data_mut().copy_from_slice(&uniform_values::<f64>(&mut rng, n));
    }
    a
}

#[test]
fn single_key_attention_is_projected_value() {
    let mut store = ParamStore::new();
    let attn = random_attention(&mut store, 4, 2, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q = t(&[1, 1, 4], &uniform_values::<f64>(&mut rng, 4));
    let kv = t(&[1, 1, 4], &uniform_values::<f64>(&mut rng, 4));

    let mut g = Graph::new();
    let (qv, kvv) = (g.constant(q), g.constant(kv.clone()));
    let out = attn.forward(&mut g, &store, qv, kvv, &AttnMask::full(1, 1), 0.0).unwrap();

    let mut g2 = Graph::new();
    let x = g2.constant(kv.reshaped(&[1, 4]).unwrap());
    let v = attn.value.forward(&mut g2, &store, x).unwrap();
    let expected = attn.output.forward(&mut g2, &store, v).unwrap();
    for (a, b) in g.value(out).data().iter().zip(g2.value(expected).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn causal_attention_ignores_future_positions() {
    let mut store = ParamStore::new();
    let attn = random_attention(&mut store, 8, 4, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (len, dim) = (6, 8);
    let base = uniform_values::<f64>(&mut rng, len * dim);
    let run = |data: &[f64]| {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, len, dim], data));
        let y = attn
            .forward(&mut g, &store, x, x, &AttnMask::causal(len, len), 0.0)
            .unwrap();
        g.value(y).data().to_vec()
    };
    let reference = run(&base);
    for p in 0..len {
        let mut changed = base.clone();
        for v in &mut changed[p * dim..] {
            *v += 3.0;
        }
        let out = run(&changed);
        assert_eq!(&out[..p * dim], &reference[..p * dim], "position {p}");
        assert_ne!(&out[p * dim..(p + 1) * dim], &reference[p * dim..(p + 1) * dim]);
    }
}

#[test]
fn fully_masked_row_is_an_error() {
    let mut store = ParamStore::new();
    let attn = random_attention(&mut store, 4, 1, 0);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4]));
    let mask = AttnMask::from_fn(2, 2, |q, _| q == 0);
    let err = attn.forward(&mut g, &store, x, x, &mask, 0.0).unwrap_err();
    assert_eq!(err, TensorError::FullyMaskedRow { group: 0, row: 1 });
}

#[test]
fn heads_must_divide_dim() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(MultiHeadAttention::new(&mut store, "a", 10, 4, &mut rng).is_err());
}

fn zero_gru(store: &mut ParamStore<f64>) -> GruCell {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cell = GruCell::new(store, "gru", 3, 3, &mut rng);
    for p in store.iter_mut() {
        p.value.data_mut().fill(0.0);
    }
    cell
}

#[test]
fn gru_with_zero_weights_halves_hidden() {
    let mut store = ParamStore::new();
    let cell = zero_gru(&mut store);
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 3], &[0.4, -1.0, 2.0]));
    let h = g.constant(t(&[1, 3], &[1.0, -0.5, 0.25]));
    let out = cell.forward(&mut g, &store, x, h).unwrap();
    assert_eq!(g.value(out).data(), &[0.5, -0.25, 0.125]);
}

#[test]
fn gru_fixed_point_with_saturated_update_gate() {
    let mut store = ParamStore::new();
    let cell = zero_gru(&mut store);
    // z = σ(b_z) with b_z = 20 gives 1 − z ≈ 2e-9 weight on the candidate.
    let bias = cell.hidden.bias.unwrap();
    store.get_mut(bias).value.data_mut()[3..6].fill(20.0);
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 3], &[5.0, -5.0, 1.0]));
    let h0 = t(&[1, 3], &[0.9, -0.3, 0.1]);
    let mut h = g.constant(h0.clone());
    for _ in 0..10 {
        h = cell.forward(&mut g, &store, x, h).unwrap();
    }
    for (a, b) in g.value(h).data().iter().zip(h0.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn gru_rejects_mismatched_shapes() {
    let mut store = ParamStore::new();
    let cell = zero_gru(&mut store);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    let h = g.constant(Tensor::zeros(&[1, 3]));
    assert!(matches!(
        cell.forward(&mut g, &store, x, h),
        Err(TensorError::ShapeMismatch { op: "gru_cell", .. })
    ));
}

#[test]
fn shared_parameter_gradients_accumulate() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let l = Linear::new(&mut store, "l", 2, 1, false, &mut rng);
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let a = l.forward(&mut g, &store, x).unwrap();
    let b = l.forward(&mut g, &store, x).unwrap();
    let s = g.add(a, b).unwrap();
    let loss = g.sum(s);
    let grads = g.backward(loss).unwrap().params(&store);
    assert_eq!(grads.get(l.weight), &[2.0, 4.0]);
}
