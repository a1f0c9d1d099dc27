use std::rc::Rc;

use super::{check, close, random, rng, STEP};
use nmt_ablation::model::{Model, ModelConfig, Variant};
use nmt_ablation::tensor::{AttentionLayout, AttentionSegment, Graph, Tensor};
use rand::Rng;

pub const SEEDS: u64 = 10;

fn for_seeds(mut f: impl FnMut(u64, &mut rand_chacha::ChaCha8Rng)) {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        f(seed, &mut r);
    }
}

pub fn matmul_gradients() {
    for_seeds(|s, r| {
        check("matmul", vec![random(&[3, 4], r, 1.0), random(&[4, 2], r, 1.0)], s, |g, v| {
            g.matmul(v[0], v[1]).unwrap()
        });
        check("matmul_nt", vec![random(&[3, 4], r, 1.0), random(&[5, 4], r, 1.0)], s, |g, v| {
            g.matmul_nt(v[0], v[1]).unwrap()
        });
    });
}

pub fn elementwise_gradients() {
    for_seeds(|s, r| {
        let ab = || vec![random(&[2, 3], &mut rng(s + 100), 1.0), random(&[2, 3], &mut rng(s + 200), 1.0)];
        check("add", ab(), s, |g, v| g.add(v[0], v[1]).unwrap());
        check("sub", ab(), s, |g, v| g.sub(v[0], v[1]).unwrap());
        check("mul", ab(), s, |g, v| g.mul(v[0], v[1]).unwrap());
        check("add_row", vec![random(&[3, 4], r, 1.0), random(&[4], r, 1.0)], s, |g, v| {
            g.add_row(v[0], v[1]).unwrap()
        });
        check("scale", vec![random(&[5], r, 1.0)], s, |g, v| g.scale(v[0], -2.5));
        check("tanh", vec![random(&[2, 4], r, 2.0)], s, |g, v| g.tanh(v[0]));
        check("sigmoid", vec![random(&[2, 4], r, 3.0)], s, |g, v| g.sigmoid(v[0]));
        // keep relu inputs away from the kink
        let x = Tensor::from_fn(&[2, 5], |_| {
            let m: f64 = r.random_range(0.1..2.0);
            if r.random_bool(0.5) { m } else { -m }
        })
        .with_requires_grad(true);
        check("relu", vec![x], s, |g, v| g.relu(v[0]));
        check("sum", vec![random(&[3, 3], r, 1.0)], s, |g, v| g.sum(v[0]));
    });
}

pub fn normalization_gradients() {
    for_seeds(|s, r| {
        check("softmax rows", vec![random(&[3, 4], r, 2.0)], s, |g, v| g.softmax(v[0], 1).unwrap());
        check("softmax cols", vec![random(&[3, 4], r, 2.0)], s, |g, v| g.softmax(v[0], 0).unwrap());
        check(
            "layer_norm",
            vec![random(&[3, 5], r, 2.0), random(&[5], r, 1.5), random(&[5], r, 1.0)],
            s,
            |g, v| g.layer_norm(v[0], v[1], v[2]).unwrap(),
        );
    });
}

pub fn dropout_gradients() {
    for_seeds(|s, r| {
        check("dropout", vec![random(&[4, 6], r, 1.0)], s, move |g, v| {
            g.dropout(v[0], 0.3, true, &mut rng(s + 7)).unwrap()
        });
    });
}

pub fn indexing_gradients() {
    for_seeds(|s, r| {
        check("gather_rows", vec![random(&[5, 3], r, 1.0)], s, |g, v| {
            g.gather_rows(v[0], &[4, 0, 4, 2]).unwrap()
        });
        check("slice_cols", vec![random(&[3, 6], r, 1.0)], s, |g, v| g.slice_cols(v[0], 2, 3).unwrap());
        check("concat_cols", vec![random(&[3, 2], r, 1.0), random(&[3, 4], r, 1.0)], s, |g, v| {
            g.concat_cols(&[v[0], v[1], v[0]]).unwrap()
        });
        check("concat_rows", vec![random(&[2, 3], r, 1.0), random(&[1, 3], r, 1.0)], s, |g, v| {
            g.concat_rows(&[v[1], v[0]]).unwrap()
        });
        check("segment_mean", vec![random(&[6, 3], r, 1.0)], s, |g, v| {
            g.segment_mean(v[0], &[0..2, 2..3, 3..6]).unwrap()
        });
    });
}

pub fn attention_gradients() {
    for_seeds(|s, r| {
        for causal in [false, true] {
            let layout = Rc::new(AttentionLayout {
                heads: 2,
                segments: vec![
                    AttentionSegment { q_start: 0, q_len: 3, k_start: 0, k_len: 3 },
                    AttentionSegment { q_start: 3, q_len: 2, k_start: 3, k_len: 2 },
                ],
                causal,
            });
            check(
                "self attention",
                vec![random(&[5, 4], r, 1.5), random(&[5, 4], r, 1.5), random(&[5, 4], r, 1.0)],
                s,
                move |g, v| g.attention(v[0], v[1], v[2], layout.clone()).unwrap(),
            );
        }
        let cross = Rc::new(AttentionLayout {
            heads: 2,
            segments: vec![
                AttentionSegment { q_start: 0, q_len: 2, k_start: 1, k_len: 3 },
                AttentionSegment { q_start: 2, q_len: 3, k_start: 0, k_len: 4 },
            ],
            causal: false,
        });
        check(
            "cross attention",
            vec![random(&[5, 4], r, 1.5), random(&[4, 4], r, 1.5), random(&[4, 4], r, 1.0)],
            s,
            move |g, v| g.attention(v[0], v[1], v[2], cross.clone()).unwrap(),
        );
    });
}

pub fn cross_entropy_gradients() {
    for_seeds(|s, r| {
        let targets: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
        for smoothing in [0.0, 0.1] {
            let t = targets.clone();
            check("cross_entropy", vec![random(&[4, 5], r, 2.0)], s, move |g, v| {
                g.cross_entropy(v[0], &t, smoothing).unwrap()
            });
        }
    });
}

pub fn composite_gradients() {
    // a small feed-forward block with a residual and norm, as used in the models
    for_seeds(|s, r| {
        check(
            "ff block",
            vec![
                random(&[3, 4], r, 1.0),
                random(&[4, 6], r, 0.7),
                random(&[6, 4], r, 0.7),
                random(&[4], r, 1.0),
                random(&[4], r, 0.5),
            ],
            s,
            |g, v| {
                let h = g.matmul(v[0], v[1]).unwrap();
                let h = g.tanh(h);
                let h = g.matmul(h, v[2]).unwrap();
                let h = g.add(v[0], h).unwrap();
                g.layer_norm(h, v[3], v[4]).unwrap()
            },
        );
    });
}

fn model_loss(m: &Model, src: &[&[usize]], tgt_in: &[&[usize]], tgt_out: &[usize]) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::with_params(m.params());
    let (logits, _) = m.forward(&mut g, src, tgt_in, None, false).unwrap();
    let loss = g.cross_entropy(logits, tgt_out, 0.0).unwrap();
    let value = g.value(loss)[0];
    let grads = g.backward(loss).unwrap();
    let mut per = vec![vec![0.0; 0]; m.params().len()];
    for (id, gr) in grads.params() {
        per[id.index()] = gr.to_vec();
    }
    (value, per)
}

pub fn whole_model_gradients() {
    let src: [&[usize]; 2] = [&[4, 5, 6], &[7, 8]];
    let tgt_in: [&[usize]; 2] = [&[1, 5, 9], &[1, 4]];
    let tgt_out = [5, 9, 2, 4, 2];
    for v in Variant::ALL {
        for seed in 0..SEEDS {
            let base = ModelConfig {
                encoder_layers: 1,
                decoder_layers: 2,
                d_model: 4,
                ff_dim: 6,
                heads: 2,
                ..ModelConfig::toy(10)
            };
            let mut m = Model::new(v.configure(&base), seed).unwrap();
            let (_, analytic) = model_loss(&m, &src, &tgt_in, &tgt_out);
            let mut r = rng(seed + 1000);
            let ids: Vec<_> = m.params().ids().collect();
            for id in ids {
                let n = m.params().get(id).len();
                // a few entries per tensor keeps the run short
                for _ in 0..3 {
                    let j = r.random_range(0..n);
                    let orig = m.params().get(id).data()[j];
                    m.params_mut().get_mut(id).data_mut()[j] = orig + STEP;
                    let fp = model_loss(&m, &src, &tgt_in, &tgt_out).0;
                    m.params_mut().get_mut(id).data_mut()[j] = orig - STEP;
                    let fm = model_loss(&m, &src, &tgt_in, &tgt_out).0;
                    m.params_mut().get_mut(id).data_mut()[j] = orig;
                    let numeric = (fp - fm) / (2.0 * STEP);
                    let a = analytic[id.index()].get(j).copied().unwrap_or(0.0);
                    assert!(
                        close(a, numeric),
                        "{v} seed {seed} {}[{j}]: analytic {a} vs numeric {numeric}",
                        m.params().name(id)
                    );
                }
            }
        }
    }
}

pub const CASES: [(&str, fn()); 9] = [
    ("matmul", matmul_gradients),
    ("elementwise", elementwise_gradients),
    ("normalization", normalization_gradients),
    ("dropout", dropout_gradients),
    ("indexing", indexing_gradients),
    ("attention", attention_gradients),
    ("cross_entropy", cross_entropy_gradients),
    ("composite", composite_gradients),
    ("whole_model", whole_model_gradients),
];
