//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use mores_core::model::{AttentionTrace, Modality, ModelConfig, TokenizedMultimodalSequence};
use mores_core::numeric::gradcheck::finite_difference_check;
use mores_core::numeric::{AttentionLayout, Tape, Tensor, Var};
use mores_core::{Result, Rng};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub type OpFn = Box<dyn Fn(&mut Tape<f64>, Var, u64) -> Result<Var>>;

/// A primitive op applied to a single differentiable input of `shape`.
pub struct OpCase {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub op: OpFn,
}

pub fn constant(t: &mut Tape<f64>, shape: &[usize], seed: u64) -> Result<Var> {
    let mut rng = Rng::new(seed);
    let data = (0..shape.iter().product()).map(|_| rng.normal()).collect();
    t.constant(shape, data)
}

/// Random weighted sum, so every output coordinate influences the loss.
pub fn reduce(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let w = constant(t, &shape, seed ^ 0x5eed)?;
    let p = t.mul(y, w)?;
    t.sum(p)
}

/// Two packed sequences of lengths 4 and 3; row 1 is a blocked key.
pub fn attention_layout() -> AttentionLayout {
    let mut blocked = vec![false; 7];
    blocked[1] = true;
    AttentionLayout { heads: 2, segments: vec![0..4, 4..7], blocked_keys: blocked }
}

fn case(name: &'static str, shape: &[usize], op: impl Fn(&mut Tape<f64>, Var, u64) -> Result<Var> + 'static) -> OpCase {
    OpCase { name, shape: shape.to_vec(), op: Box::new(op) }
}

/// Every differentiable primitive of the tape, each argument in turn.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("matmul lhs", &[3, 4], |t, x, s| {
            let b = constant(t, &[4, 5], s)?;
            t.matmul(x, b)
        }),
        case("matmul rhs", &[4, 5], |t, x, s| {
            let a = constant(t, &[3, 4], s)?;
            t.matmul(a, x)
        }),
        case("matmul_t rhs", &[5, 4], |t, x, s| {
            let a = constant(t, &[3, 4], s)?;
            t.matmul_t(a, x)
        }),
        case("matmul_ext transposed lhs", &[4, 3], |t, x, s| {
            let b = constant(t, &[4, 2], s)?;
            t.matmul_ext(x, b, true, false)
        }),
        case("add", &[3, 4], |t, x, s| {
            let b = constant(t, &[3, 4], s)?;
            t.add(x, b)
        }),
        case("sub rhs", &[3, 4], |t, x, s| {
            let a = constant(t, &[3, 4], s)?;
            t.sub(a, x)
        }),
        case("mul", &[3, 4], |t, x, s| {
            let b = constant(t, &[3, 4], s)?;
            t.mul(x, b)
        }),
        case("mul self", &[6], |t, x, _| t.mul(x, x)),
        case("scale", &[2, 3], |t, x, _| t.scale(x, -0.7)),
        case("relu", &[3, 4], |t, x, _| t.relu(x)),
        case("gelu", &[4, 5], |t, x, _| t.gelu(x)),
        case("transpose", &[3, 5], |t, x, _| t.transpose(x)),
        case("sum", &[7], |t, x, _| t.sum(x)),
        case("add_row row", &[5], |t, x, s| {
            let a = constant(t, &[3, 5], s)?;
            t.add_row(a, x)
        }),
        case("add_row matrix", &[3, 5], |t, x, s| {
            let r = constant(t, &[5], s)?;
            t.add_row(x, r)
        }),
        case("mul_row row", &[5], |t, x, s| {
            let a = constant(t, &[3, 5], s)?;
            t.mul_row(a, x)
        }),
        case("mul_row matrix", &[3, 5], |t, x, s| {
            let r = constant(t, &[5], s)?;
            t.mul_row(x, r)
        }),
        case("layer_norm input", &[4, 6], |t, x, s| {
            let g = constant(t, &[6], s)?;
            let b = constant(t, &[6], s + 1)?;
            t.layer_norm(x, g, b)
        }),
        case("layer_norm gain", &[6], |t, x, s| {
            let h = constant(t, &[4, 6], s)?;
            let b = constant(t, &[6], s + 1)?;
            t.layer_norm(h, x, b)
        }),
        case("layer_norm bias", &[6], |t, x, s| {
            let h = constant(t, &[4, 6], s)?;
            let g = constant(t, &[6], s + 1)?;
            t.layer_norm(h, g, x)
        }),
        case("softmax_rows", &[3, 5], |t, x, _| t.softmax_rows(x)),
        case("gather_rows", &[5, 3], |t, x, _| t.gather_rows(x, &[4, 0, 0, 2])),
        case("scatter_add_rows base", &[5, 3], |t, x, s| {
            let src = constant(t, &[2, 3], s)?;
            t.scatter_add_rows(x, src, &[1, 3])
        }),
        case("scatter_add_rows source", &[2, 3], |t, x, s| {
            let base = constant(t, &[5, 3], s)?;
            t.scatter_add_rows(base, x, &[4, 0])
        }),
        case("concat_rows", &[2, 3], |t, x, s| {
            let other = constant(t, &[3, 3], s)?;
            t.concat_rows(&[other, x, other])
        }),
        case("causal_attention q", &[7, 4], |t, x, s| {
            let k = constant(t, &[7, 4], s)?;
            let v = constant(t, &[7, 4], s + 1)?;
            t.causal_attention(x, k, v, attention_layout())
        }),
        case("causal_attention k", &[7, 4], |t, x, s| {
            let q = constant(t, &[7, 4], s)?;
            let v = constant(t, &[7, 4], s + 1)?;
            t.causal_attention(q, x, v, attention_layout())
        }),
        case("causal_attention v", &[7, 4], |t, x, s| {
            let q = constant(t, &[7, 4], s)?;
            let k = constant(t, &[7, 4], s + 1)?;
            t.causal_attention(q, k, x, attention_layout())
        }),
        case("cross_entropy", &[4, 6], |t, x, _| t.cross_entropy(x, &[Some(1), None, Some(5), Some(0)])),
        // dim 6 in blocks of 3: 3 generator entries per block.
        case("cayley", &[6], |t, x, _| {
            let s = t.scale(x, 0.3)?;
            t.cayley(s, 6, 3)
        }),
    ]
}

/// Worst relative error of `case` over `seeds`, and whether all passed.
pub fn check_case(case: &OpCase, seeds: std::ops::Range<u64>) -> (f64, bool) {
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for seed in seeds {
        let x = Tensor::randn(&case.shape, 1.0, &mut Rng::new(1000 + seed));
        let f = |t: &mut Tape<f64>, x: Var| {
            let y = (case.op)(t, x, seed)?;
            reduce(t, y, seed)
        };
        let rep = finite_difference_check(f, &x, STEP, TOL).unwrap();
        worst = worst.max(rep.max_rel_err);
        pass &= rep.pass;
    }
    (worst, pass)
}

/// Two layers, D=8, two heads.
pub fn tiny_model() -> ModelConfig {
    ModelConfig { num_layers: 2, hidden_dim: 8, num_heads: 2, ffn_dim: 16, vocab_size: 11, max_seq_len: 12, visual_embed_dim: 3 }
}

pub fn random_sequence(rng: &mut Rng, cfg: &ModelConfig, n_vis: usize, n_text: usize, n_out: usize) -> TokenizedMultimodalSequence {
    let tags = tags(n_vis, n_text, n_out);
    let ids = (0..1 + n_text + n_out).map(|_| rng.below(cfg.vocab_size) as u32).collect();
    let vis = (0..n_vis * cfg.visual_embed_dim).map(|_| rng.normal()).collect();
    TokenizedMultimodalSequence::new(ids, vis, cfg.visual_embed_dim, tags).unwrap()
}

// Attention traces built by hand.

pub fn tags(n_vis: usize, n_text: usize, n_out: usize) -> Vec<Modality> {
    let mut t = vec![Modality::System];
    t.extend(std::iter::repeat(Modality::Visual).take(n_vis));
    t.extend(std::iter::repeat(Modality::Text).take(n_text));
    t.extend(std::iter::repeat(Modality::Output).take(n_out));
    t
}

/// Causal trace; `row(q)` gives the weights of query `q` over keys `0..=q`.
pub fn build(tags: Vec<Modality>, layers: usize, heads: usize, mut row: impl FnMut(usize) -> Vec<f64>) -> AttentionTrace {
    let n = tags.len();
    let maps = (0..layers)
        .map(|_| {
            (0..heads)
                .map(|_| {
                    let mut m = vec![0.0; n * n];
                    for q in 0..n {
                        m[q * n..q * n + q + 1].copy_from_slice(&row(q));
                    }
                    m
                })
                .collect()
        })
        .collect();
    AttentionTrace { sample_id: 0, tags, maps }
}

pub fn uniform_trace(n_vis: usize, n_text: usize, n_out: usize, layers: usize, heads: usize) -> AttentionTrace {
    build(tags(n_vis, n_text, n_out), layers, heads, |q| vec![1.0 / (q + 1) as f64; q + 1])
}

pub fn random_trace(rng: &mut Rng, id: usize) -> AttentionTrace {
    let t = tags(1 + rng.below(6), 1 + rng.below(4), 1 + rng.below(3));
    let mut tr = build(t, 3, 2, |q| {
        let raw: Vec<f64> = (0..=q).map(|_| (2.0 * rng.normal()).exp()).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / s).collect()
    });
    tr.sample_id = id;
    tr
}

/// Ratio of one sample computed straight from the definition.
pub fn brute_ratio(tr: &AttentionTrace, layer: usize, per_token: bool) -> Option<f64> {
    let n = tr.len();
    let (mut img, mut txt, mut cnt) = (0.0, 0.0, 0.0);
    for h in 0..tr.num_heads() {
        for q in 0..n - 1 {
            if tr.tags[q + 1] != Modality::Output {
                continue;
            }
            let row = &tr.maps[layer][h][q * n..(q + 1) * n];
            let (mut v, mut t, mut nv, mut nt) = (0.0, 0.0, 0.0, 0.0);
            for k in 0..n {
                match tr.tags[k] {
                    Modality::Visual => {
                        v += row[k];
                        nv += 1.0;
                    }
                    Modality::Text => {
                        t += row[k];
                        nt += 1.0;
                    }
                    _ => {}
                }
            }
            if per_token {
                img += v / nv;
                txt += t / nt;
            } else {
                img += v;
                txt += t;
            }
            cnt += 1.0;
        }
    }
    let (img, txt) = (img / cnt, txt / cnt);
    (txt > 0.0).then(|| img / txt)
}

