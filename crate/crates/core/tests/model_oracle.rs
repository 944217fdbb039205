//! CT-HGR forward pass against a loop-only reimplementation, plus the
//! attention and parameter-count properties.

use cthgr::autodiff::{grad_check, Tape, Tensor};
use cthgr::model::{
    count_parameters, patchify, positional_cosine_matrix, AttentionScale, CtHgr, InputKind, InputShape, ModelConfig,
    PatchSpec,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(layers: usize) -> ModelConfig {
    ModelConfig {
        d_model: 4,
        heads: 2,
        layers,
        mlp_hidden: 3,
        n_classes: 3,
        kind: InputKind::Window,
        input: InputShape { rows: 2, cols: 2, depth: 1 },
        patch: PatchSpec { h: 1, v: 2 },
        dropout: 0.0,
        attention_scale: AttentionScale::PerHead,
    }
}

/// Overwrite every parameter with seeded uniform values so biases and
/// gains are non-trivial.
fn hand_seeded(cfg: ModelConfig, seed: u64) -> CtHgr {
    let mut m = CtHgr::new(cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat: Vec<f64> = (0..m.params.scalar_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
    m.params.load_flat(&flat).unwrap();
    m
}

type Mat = Vec<Vec<f64>>;

fn get<'a>(m: &'a CtHgr, name: &str) -> &'a Tensor {
    let (_, t) = m.params.iter().find(|(n, _)| *n == name).unwrap();
    t
}

fn as_mat(t: &Tensor) -> Mat {
    let c = t.shape()[1];
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

fn linear(x: &Mat, w: &Mat, b: Option<&[f64]>) -> Mat {
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|j| {
                    let s: f64 = row.iter().zip(w).map(|(a, wr)| a * wr[j]).sum();
                    s + b.map_or(0.0, |b| b[j])
                })
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Single-sample forward written with explicit loops over tokens and heads.
fn oracle_logits(m: &CtHgr, sample: &[f64]) -> Vec<f64> {
    let cfg = m.config;
    let (d, h) = (cfg.d_model, cfg.heads);
    let dh = d / h;
    let patches = patchify(sample, cfg.input, cfg.patch).unwrap();
    let pm: Mat = patches.chunks(cfg.patch_dim()).map(<[f64]>::to_vec).collect();
    let emb = linear(&pm, &as_mat(get(m, "embed.E")), None);
    let pos = as_mat(get(m, "embed.pos"));
    let mut z: Mat = vec![get(m, "embed.cls").data().to_vec()];
    z.extend(emb);
    for (i, row) in z.iter_mut().enumerate() {
        for j in 0..d {
            row[j] += pos[i][j];
        }
    }
    let s = z.len();
    for l in 0..cfg.layers {
        let p = |n: &str| get(m, &format!("layer{l}.{n}"));
        let y = layer_norm(&z, p("ln1.gain").data(), p("ln1.bias").data());
        let q = linear(&y, &as_mat(p("wq")), Some(p("bq").data()));
        let k = linear(&y, &as_mat(p("wk")), Some(p("bk").data()));
        let v = linear(&y, &as_mat(p("wv")), Some(p("bv").data()));
        let mut ctx = vec![vec![0.0; d]; s];
        for head in 0..h {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..s {
                let scores: Vec<f64> = (0..s)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|x| (x - mx).exp()).collect();
                let z_: f64 = e.iter().sum();
                for j in 0..s {
                    for c in cols.clone() {
                        ctx[i][c] += e[j] / z_ * v[j][c];
                    }
                }
            }
        }
        let o = linear(&ctx, &as_mat(p("wo")), Some(p("bo").data()));
        let z1: Mat = o.iter().zip(&z).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
        let y = layer_norm(&z1, p("ln2.gain").data(), p("ln2.bias").data());
        let u = linear(&y, &as_mat(p("mlp1.w")), Some(p("mlp1.b").data()));
        let u: Mat = u.iter().map(|r| r.iter().map(|&x| gelu(x)).collect()).collect();
        let u = linear(&u, &as_mat(p("mlp2.w")), Some(p("mlp2.b").data()));
        z = u.iter().zip(&z1).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
    }
    linear(&vec![z[0].clone()], &as_mat(get(m, "head.w")), Some(get(m, "head.b").data())).remove(0)
}

#[test]
fn tiny_forward_matches_straight_line_oracle() {
    for layers in [1, 2] {
        let m = hand_seeded(tiny(layers), 11 + layers as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let logits = m.predict_logits(&refs).unwrap();
        for (i, x) in xs.iter().enumerate() {
            let want = oracle_logits(&m, x);
            for (c, w) in want.iter().enumerate() {
                let got = logits.data()[i * 3 + c];
                assert!((got - w).abs() < 1e-10, "layers {layers} sample {i} class {c}: {got} vs {w}");
            }
        }
    }
}

#[test]
fn identical_tokens_attend_uniformly() {
    let mut m = hand_seeded(tiny(1), 5);
    // Zero projection and positions make every token equal to the class token.
    for name in ["embed.E", "embed.pos", "embed.cls"] {
        let id = (0..m.params.len()).find(|&i| m.params.name(cthgr::autodiff::ParamId(i)) == name).unwrap();
        m.params.get_mut(cthgr::autodiff::ParamId(id)).data_mut().fill(0.0);
    }
    let x = [0.3, -0.2, 0.9, 0.1];
    let (tape, tr) = m.trace(&[&x]).unwrap();
    let a = tape.value(tr.attention[0]);
    assert_eq!(a.shape(), &[1, 2, 3, 3]);
    for v in a.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn class_token_is_invariant_to_patch_order_without_positions() {
    let mut m = hand_seeded(tiny(1), 8);
    let pos = (0..m.params.len()).find(|&i| m.params.name(cthgr::autodiff::ParamId(i)) == "embed.pos").unwrap();
    m.params.get_mut(cthgr::autodiff::ParamId(pos)).data_mut().fill(0.0);
    // Two time patches of one row each; swapping rows swaps the patches.
    let x = [0.5, -0.4, 0.2, 0.8];
    let swapped = [0.2, 0.8, 0.5, -0.4];
    let a = m.class_tokens(&[&x]).unwrap();
    let b = m.class_tokens(&[&swapped]).unwrap();
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() < 1e-14);
    }
}

#[test]
fn tiny_model_gradient_check() {
    let m = hand_seeded(tiny(1), 21);
    let x = [0.4, -0.7, 0.1, 0.6, -0.2, 0.3, 0.9, -0.5];
    let labels = [2usize, 0];
    let flat = Tensor::from_vec(m.params.flatten());
    let report = grad_check(
        |tape: &mut Tape, p| {
            let mut vars = Vec::new();
            let mut at = 0;
            for t in m.params.tensors() {
                let s = tape.slice(p, 0, at, t.len())?;
                vars.push(tape.reshape(s, t.shape())?);
                at += t.len();
            }
            let tr = m.forward_with(tape, &vars, &[&x[..4], &x[4..]], false, 0)?;
            tape.cross_entropy(tr.logits, &labels)
        },
        &flat,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn eval_forward_is_batch_composition_invariant() {
    let cfg = ModelConfig::preset(cthgr::model::Preset::V1, 32, 64).unwrap();
    let m = CtHgr::new(cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..cfg.input.size()).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let all: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let batch = m.predict_logits(&all).unwrap();
    for (i, x) in xs.iter().enumerate() {
        let one = m.predict_logits(&[x]).unwrap();
        assert_eq!(one.data(), &batch.data()[i * 66..(i + 1) * 66]);
    }
}

#[test]
fn count_matches_enumeration_for_custom_depths() {
    for layers in 1..4 {
        let cfg = tiny(layers);
        assert_eq!(CtHgr::new(cfg, 0).unwrap().params.scalar_count(), count_parameters(&cfg));
    }
}

proptest! {
    #[test]
    fn attention_rows_sum_to_one(seed in 0u64..1000) {
        let m = hand_seeded(tiny(2), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (tape, tr) = m.trace(&[&x]).unwrap();
        for a in tr.attention {
            let t = tape.value(a);
            prop_assert_eq!(t.shape(), &[1, 2, 3, 3]);
            for row in t.data().chunks(3) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn positional_cosine_is_symmetric_with_unit_diagonal(seed in 0u64..1000) {
        let m = hand_seeded(tiny(1), seed);
        let c = positional_cosine_matrix(&m).unwrap();
        for i in 0..c.len() {
            prop_assert!((c[i][i] - 1.0).abs() < 1e-12);
            for j in 0..c.len() {
                prop_assert_eq!(c[i][j], c[j][i]);
            }
        }
    }

    #[test]
    fn constant_logit_shift_keeps_argmax(v in prop::collection::vec(-5.0f64..5.0, 6), k in -100.0f64..100.0) {
        let t = Tensor::new(vec![2, 3], v.clone()).unwrap();
        let s = t.map(|x| x + k);
        prop_assert_eq!(t.argmax_rows(), s.argmax_rows());
    }
}
