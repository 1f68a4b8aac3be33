//! Finite-difference checks of every differentiable op and layer, over
//! several random draws each.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{check_gradients, weighted_sum, GradCheckOptions, GradCheckReport};
use crate::graph::{uniform_values, Graph, Var};
use crate::nn::{AttnMask, FeedForward, GruCell, LayerNorm, Linear, MultiHeadAttention};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Worst result of one op over all seeds.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

type Build = fn(&mut ParamStore<f64>, &mut ChaCha8Rng);
type Body = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    build: Build,
    graph_seed: Option<u64>,
    body: Body,
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    body: impl Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: |_, _| {},
        graph_seed: None,
        body: Box::new(body),
    }
}

impl Case {
    fn params(mut self, build: Build) -> Self {
        self.build = build;
        self
    }

    fn training(mut self, seed: u64) -> Self {
        self.graph_seed = Some(seed);
        self
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, uniform_values(rng, n)).expect("shape matches data")
}

/// Overwrites every parameter with U(-1, 1) so attention and gates leave
/// their near-linear regime.
fn randomize(s: &mut ParamStore<f64>, r: &mut ChaCha8Rng) {
    for p in s.iter_mut() {
        let n = p.value.len();
        p.value.data_mut().copy_from_slice(&uniform_values::<f64>(r, n));
    }
}

fn linear(s: &ParamStore<f64>, name: &str) -> Linear {
    Linear {
        weight: s.id(&format!("{name}.weight")).expect("weight"),
        bias: s.id(&format!("{name}.bias")),
    }
}

fn attention(s: &ParamStore<f64>) -> MultiHeadAttention {
    MultiHeadAttention {
        query: linear(s, "a.q"),
        key: linear(s, "a.k"),
        value: linear(s, "a.v"),
        output: linear(s, "a.o"),
        heads: 2,
        dim: 6,
    }
}

fn build_attention(s: &mut ParamStore<f64>, r: &mut ChaCha8Rng) {
    MultiHeadAttention::new(s, "a", 6, 2, r).expect("6 divides into 2 heads");
    randomize(s, r);
}

fn cases() -> Vec<Case> {
    vec![
        case("add", &[&[3, 4], &[3, 4]], |g, _, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, 1)
        }),
        case("mul", &[&[3, 4], &[3, 4]], |g, _, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, 1)
        }),
        case("affine", &[&[5]], |g, _, v| {
            let y = g.affine(v[0], -1.7, 0.3);
            weighted_sum(g, y, 1)
        }),
        case("scale", &[&[2, 3]], |g, _, v| {
            let y = g.scale(v[0], 0.37);
            weighted_sum(g, y, 1)
        }),
        case("add_bcast", &[&[2, 3, 4], &[4]], |g, _, v| {
            let y = g.add_bcast(v[0], v[1])?;
            weighted_sum(g, y, 1)
        }),
        case("matmul", &[&[2, 3, 4], &[4, 5]], |g, _, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, 2)
        }),
        case("bmm", &[&[2, 3, 4], &[2, 4, 5]], |g, _, v| {
            let y = g.bmm(v[0], v[1], false)?;
            weighted_sum(g, y, 2)
        }),
        case("bmm_transposed", &[&[2, 3, 4], &[2, 5, 4]], |g, _, v| {
            let y = g.bmm(v[0], v[1], true)?;
            weighted_sum(g, y, 2)
        }),
        case("softmax", &[&[3, 6]], |g, _, v| {
            let y = g.softmax(v[0]);
            weighted_sum(g, y, 3)
        }),
        case("mask_fill+softmax", &[&[2, 2, 3]], |g, _, v| {
            let y = g.mask_fill(v[0], vec![true, false, true, true, false, true])?;
            let y = g.softmax(y);
            weighted_sum(g, y, 3)
        }),
        case("layer_norm", &[&[8, 16], &[16], &[16]], |g, _, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(g, y, 4)
        }),
        case("gelu", &[&[4, 5]], |g, _, v| {
            let y = g.gelu(v[0]);
            weighted_sum(g, y, 5)
        }),
        case("sigmoid", &[&[4, 5]], |g, _, v| {
            let y = g.sigmoid(v[0]);
            weighted_sum(g, y, 5)
        }),
        case("tanh", &[&[4, 5]], |g, _, v| {
            let y = g.tanh(v[0]);
            weighted_sum(g, y, 5)
        }),
        case("dropout", &[&[6, 7]], |g, _, v| {
            let y = g.dropout(v[0], 0.3)?;
            weighted_sum(g, y, 6)
        })
        .training(11),
        case("gather_rows", &[&[5, 3]], |g, _, v| {
            let y = g.gather_rows(v[0], vec![Some(1), None, Some(4), Some(1)])?;
            weighted_sum(g, y, 7)
        }),
        case("concat", &[&[2, 3, 2], &[2, 1, 2]], |g, _, v| {
            let y = g.concat(&[v[0], v[1], v[0]], 1)?;
            weighted_sum(g, y, 7)
        }),
        case("slice", &[&[3, 6, 2]], |g, _, v| {
            let y = g.slice(v[0], 1, 2, 3)?;
            weighted_sum(g, y, 7)
        }),
        case("reshape", &[&[3, 4]], |g, _, v| {
            let y = g.reshape(v[0], &[2, 6])?;
            weighted_sum(g, y, 7)
        }),
        case("expand", &[&[3, 2]], |g, _, v| {
            let y = g.expand(v[0], 4);
            weighted_sum(g, y, 7)
        }),
        case("sum", &[&[3, 2]], |g, _, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum(y))
        }),
        case("mean", &[&[3, 2]], |g, _, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.mean(y))
        }),
        case("cross_entropy", &[&[4, 10]], |g, _, v| {
            g.cross_entropy(v[0], &[Some(3), None, Some(0), Some(9)])
        }),
        case("cross_entropy_scaled", &[&[3, 5]], |g, _, v| {
            g.cross_entropy_scaled(v[0], &[Some(1), Some(1), None], 0.25)
        }),
        case("linear", &[&[3, 4]], |g, s, v| {
            let y = linear(s, "l").forward(g, s, v[0])?;
            weighted_sum(g, y, 8)
        })
        .params(|s, r| {
            Linear::new(s, "l", 4, 5, true, r);
        }),
        case("feed_forward", &[&[2, 3, 4]], |g, s, v| {
            let ff = FeedForward {
                up: linear(s, "ff.up"),
                down: linear(s, "ff.down"),
            };
            let y = ff.forward(g, s, v[0], 0.2)?;
            weighted_sum(g, y, 8)
        })
        .params(|s, r| {
            FeedForward::new(s, "ff", 4, 8, r);
        })
        .training(3),
        case("layer_norm_module", &[&[8, 16]], |g, s, v| {
            let ln = LayerNorm {
                gain: s.id("ln.gain").expect("gain"),
                bias: s.id("ln.bias").expect("bias"),
            };
            let y = ln.forward(g, s, v[0])?;
            weighted_sum(g, y, 11)
        })
        .params(|s, r| {
            LayerNorm::new(s, "ln", 16);
            randomize(s, r);
        }),
        case("causal_self_attention", &[&[2, 4, 6]], |g, s, v| {
            let y = attention(s).forward(g, s, v[0], v[0], &AttnMask::causal(4, 4), 0.0)?;
            weighted_sum(g, y, 9)
        })
        .params(build_attention),
        case("cross_attention", &[&[2, 3, 6], &[2, 5, 6]], |g, s, v| {
            let mask = AttnMask::from_fn(3, 5, |q, k| (q + k) % 3 != 1);
            let y = attention(s).forward(g, s, v[0], v[1], &mask, 0.0)?;
            weighted_sum(g, y, 9)
        })
        .params(build_attention),
        case("grouped_mask_attention", &[&[2, 2, 6], &[2, 3, 6]], |g, s, v| {
            let allowed = vec![true, false, true, true, true, true, true, true, false, false, true, true];
            let mask = AttnMask::per_group(2, 2, 3, allowed)?;
            let y = attention(s).forward(g, s, v[0], v[1], &mask, 0.0)?;
            weighted_sum(g, y, 9)
        })
        .params(build_attention),
        case("attention_dropout", &[&[1, 3, 6]], |g, s, v| {
            let y = attention(s).forward(g, s, v[0], v[0], &AttnMask::full(3, 3), 0.25)?;
            weighted_sum(g, y, 9)
        })
        .params(build_attention)
        .training(5),
        case("gru_cell", &[&[2, 3], &[2, 4]], |g, s, v| {
            let cell = GruCell {
                input: linear(s, "gru.ih"),
                hidden: linear(s, "gru.hh"),
                dim: 4,
            };
            let h1 = cell.forward(g, s, v[0], v[1])?;
            let h2 = cell.forward(g, s, v[0], h1)?;
            weighted_sum(g, h2, 10)
        })
        .params(|s, r| {
            GruCell::new(s, "gru", 3, 4, r);
            randomize(s, r);
        }),
    ]
}

/// Runs every case with seeds `0..seeds` and keeps the worst report of each.
pub fn check_all_ops(seeds: u64) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for c in cases() {
        let opts = GradCheckOptions {
            graph_seed: c.graph_seed,
            ..GradCheckOptions::default()
        };
        let mut worst: Option<GradCheckReport> = None;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<_> = c.shapes.iter().map(|s| random(&mut rng, s)).collect();
            let mut store = ParamStore::new();
            (c.build)(&mut store, &mut rng);
            let mut r = check_gradients(&inputs, &store, &opts, &c.body)?;
            if let Some(w) = &worst {
                r.checked += w.checked;
                if w.max_rel_error >= r.max_rel_error {
                    r.max_rel_error = w.max_rel_error;
                    r.worst = w.worst.clone();
                }
            }
            worst = Some(r);
        }
        if let Some(report) = worst {
            out.push(OpCheck { name: c.name, report });
        }
    }
    Ok(out)
}
