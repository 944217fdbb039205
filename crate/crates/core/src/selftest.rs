//! Built-in gradient checks: every tape operation on seeded random inputs,
//! then the tiny transformer and CNN end to end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, GradCheckReport, Tape, Tensor, Var};
use crate::baselines::{Cnn3d, Cnn3dConfig};
use crate::error::Result;
use crate::model::{AttentionScale, CtHgr, InputKind, InputShape, ModelConfig, PatchSpec};
use crate::train::Classifier;

/// Relative-error bound for single operations.
pub const OP_TOLERANCE: f64 = 1e-6;
/// Relative-error bound for whole models.
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub report: GradCheckReport,
}

type Loss = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// Split the flat probe into reshaped operands.
fn unpack(tape: &mut Tape, x: Var, shapes: &[&[usize]]) -> Result<Vec<Var>> {
    let mut at = 0;
    let mut out = Vec::with_capacity(shapes.len());
    for s in shapes {
        let n: usize = s.iter().product();
        let v = tape.slice(x, 0, at, n)?;
        out.push(tape.reshape(v, s)?);
        at += n;
    }
    Ok(out)
}

/// `Σ out ⊙ w` with fixed random weights, so every output entry gets a
/// distinct upstream gradient.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn random(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn op_case(shapes: &'static [&'static [usize]], body: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> (usize, Loss) {
    let n = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let f: Loss = Box::new(move |tape: &mut Tape, x: Var| {
        let vs = unpack(tape, x, shapes)?;
        let out = body(tape, &vs)?;
        project(tape, out, 99)
    });
    (n, f)
}

fn op_cases() -> Vec<(&'static str, usize, Loss)> {
    let mut v: Vec<(&'static str, usize, Loss)> = Vec::new();
    let mut push = |name, (n, f): (usize, Loss)| v.push((name, n, f));
    push("matmul", op_case(&[&[3, 4], &[4, 2]], |t, x| t.matmul(x[0], x[1])));
    push("matmul_shared", op_case(&[&[2, 3, 4], &[4, 2]], |t, x| t.matmul(x[0], x[1])));
    push("matmul_batched", op_case(&[&[2, 3, 4], &[2, 4, 5]], |t, x| t.matmul(x[0], x[1])));
    push("add_broadcast", op_case(&[&[2, 3, 4], &[4]], |t, x| t.add(x[0], x[1])));
    push("mul", op_case(&[&[2, 5], &[2, 5]], |t, x| t.mul(x[0], x[1])));
    push("scale", op_case(&[&[6]], |t, x| t.scale(x[0], -2.5)));
    push("reshape", op_case(&[&[2, 6]], |t, x| t.reshape(x[0], &[3, 4])));
    push("permute", op_case(&[&[2, 3, 4]], |t, x| t.permute(x[0], &[2, 0, 1])));
    push("transpose", op_case(&[&[2, 3, 4]], |t, x| t.transpose(x[0], 1, 2)));
    push("concat", op_case(&[&[2, 3], &[2, 2]], |t, x| t.concat(&[x[0], x[1]], 1)));
    push("slice", op_case(&[&[3, 5]], |t, x| t.slice(x[0], 1, 1, 3)));
    push("broadcast_to", op_case(&[&[3]], |t, x| t.broadcast_to(x[0], &[2, 2])));
    push("softmax_last", op_case(&[&[3, 4]], |t, x| t.softmax(x[0], 1)));
    push("softmax_first", op_case(&[&[3, 4]], |t, x| t.softmax(x[0], 0)));
    push(
        "layer_norm",
        op_case(&[&[3, 5], &[5], &[5]], |t, x| t.layer_norm(x[0], 1, Some(x[1]), Some(x[2]))),
    );
    push("gelu", op_case(&[&[7]], |t, x| t.gelu(x[0])));
    push("dropout", op_case(&[&[4, 4]], |t, x| t.dropout(x[0], 0.3, true, 17)));
    push("sum", op_case(&[&[2, 3]], |t, x| t.sum(x[0])));
    push("mean", op_case(&[&[2, 3]], |t, x| t.mean(x[0])));
    push("cross_entropy", op_case(&[&[3, 4]], |t, x| t.cross_entropy(x[0], &[1, 3, 0])));
    push(
        "conv3d",
        op_case(&[&[2, 2, 4, 3, 3], &[3, 2, 2, 2, 2], &[3]], |t, x| t.conv3d(x[0], x[1], x[2])),
    );
    push("max_pool3d", op_case(&[&[1, 2, 5, 3, 4]], |t, x| t.max_pool3d(x[0], [2, 2, 2])));
    v
}

/// Gradient check of every tape operation.
pub fn check_ops() -> Result<Vec<CheckOutcome>> {
    op_cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, n, f))| {
            let report = grad_check(f, &random(n, 1000 + i as u64), OP_TOLERANCE)?;
            Ok(CheckOutcome {
                name: name.into(),
                report,
            })
        })
        .collect()
}

/// The smallest interesting transformer: two patches, two heads.
pub fn tiny_config(layers: usize) -> ModelConfig {
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

/// Check a classifier's cross-entropy gradient with respect to all of its
/// parameters, taken as one flat probe.
fn check_model<M: Classifier + 'static>(model: M, inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<GradCheckReport> {
    let flat = Tensor::from_vec(model.params().flatten());
    let shapes: Vec<Vec<usize>> = model.params().tensors().iter().map(|t| t.shape().to_vec()).collect();
    grad_check(
        move |tape: &mut Tape, p| {
            let mut vars = Vec::with_capacity(shapes.len());
            let mut at = 0;
            for s in &shapes {
                let n: usize = s.iter().product();
                let v = tape.slice(p, 0, at, n)?;
                vars.push(tape.reshape(v, s)?);
                at += n;
            }
            let xs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
            let logits = model.logits(tape, &vars, &xs, false, 0)?;
            tape.cross_entropy(logits, &labels)
        },
        &flat,
        MODEL_TOLERANCE,
    )
}

/// End-to-end checks of the tiny transformer (one and two layers) and a
/// tiny 3D CNN.
pub fn check_models() -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for layers in [1, 2] {
        let mut m = CtHgr::new(tiny_config(layers), 3)?;
        // Non-trivial gains and biases.
        let n = m.params.scalar_count();
        m.params.load_flat(random(n, 40 + layers as u64).data())?;
        let xs = vec![vec![0.4, -0.7, 0.1, 0.6], vec![-0.2, 0.3, 0.9, -0.5]];
        out.push(CheckOutcome {
            name: format!("ct-hgr tiny, {layers} layer(s)"),
            report: check_model(m, xs, vec![2, 0])?,
        });
    }
    let cfg = Cnn3dConfig {
        filters: [2, 2],
        kernel: [2, 2, 2],
        fc: vec![3],
        dropout: 0.0,
        ..Cnn3dConfig::new(8, 4, 4, 2)
    };
    let cnn = Cnn3d::new(cfg, 5)?;
    let xs: Vec<Vec<f64>> = (0..2).map(|i| random(128, 70 + i).data().to_vec()).collect();
    out.push(CheckOutcome {
        name: "cnn3d tiny".into(),
        report: check_model(cnn, xs, vec![1, 0])?,
    });
    Ok(out)
}

/// Every check; passes iff all pass.
pub fn gradient_suite() -> Result<Vec<CheckOutcome>> {
    let mut v = check_ops()?;
    v.extend(check_models()?);
    Ok(v)
}
