//! The CT-HGR vision transformer: patch embedding, class token, learnable
//! positional table, pre-norm encoder layers and a linear head.

mod checkpoint;
mod config;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{
    count_parameters, published_count, AttentionScale, InputKind, InputShape, ModelConfig, PatchSpec, Preset,
    PUBLISHED_COUNTS,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{trunc_normal, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::train::Classifier;

/// Standard deviation of the truncated-normal initialiser.
pub const INIT_STD: f64 = 0.02;

/// Parameters per encoder layer, in store order.
pub const LAYER_PARAMS: [&str; 16] = [
    "ln1.gain", "ln1.bias", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2.gain", "ln2.bias",
    "mlp1.w", "mlp1.b", "mlp2.w", "mlp2.b",
];

/// Tile one `rows × cols × depth` input into `N` flattened patches.
/// Patches are ordered time-major; each is flattened in
/// (time, horizontal, vertical) order.
pub fn patchify(input: &[f64], shape: InputShape, patch: PatchSpec) -> Result<Vec<f64>> {
    if input.len() != shape.size() {
        return Err(Error::Shape(format!("input has {} values, expected {}", input.len(), shape.size())));
    }
    if patch.h == 0 || patch.v == 0 || !shape.rows.is_multiple_of(patch.h) || !shape.cols.is_multiple_of(patch.v) {
        return Err(Error::Shape(format!(
            "patch {}×{} does not tile {}×{}",
            patch.h, patch.v, shape.rows, shape.cols
        )));
    }
    let mut out = Vec::with_capacity(input.len());
    for pr in 0..shape.rows / patch.h {
        for pc in 0..shape.cols / patch.v {
            for t in 0..patch.h {
                let row = pr * patch.h + t;
                let start = (row * shape.cols + pc * patch.v) * shape.depth;
                out.extend_from_slice(&input[start..start + patch.v * shape.depth]);
            }
        }
    }
    Ok(out)
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    /// `z_l` for `l = 0..=L`, each `[B, N+1, d]`.
    pub layer_outputs: Vec<Var>,
    /// Attention weights per layer, each `[B, h, N+1, N+1]`.
    pub attention: Vec<Var>,
    /// Final class-token row `[B, d]`.
    pub class_token: Var,
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct CtHgr {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl CtHgr {
    /// Fresh model: truncated-normal weights and embeddings, zero biases,
    /// unit LayerNorm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, m, c) = (config.d_model, config.mlp_hidden, config.n_classes);
        let mut p = ParamStore::new();
        p.add("embed.E", trunc_normal(&[config.patch_dim(), d], INIT_STD, &mut rng));
        p.add("embed.pos", trunc_normal(&[config.seq_len(), d], INIT_STD, &mut rng));
        p.add("embed.cls", trunc_normal(&[d], INIT_STD, &mut rng));
        for l in 0..config.layers {
            for name in LAYER_PARAMS {
                let t = match name {
                    "ln1.gain" | "ln2.gain" => Tensor::full(vec![d], 1.0),
                    "wq" | "wk" | "wv" | "wo" => trunc_normal(&[d, d], INIT_STD, &mut rng),
                    "mlp1.w" => trunc_normal(&[d, m], INIT_STD, &mut rng),
                    "mlp1.b" => Tensor::zeros(vec![m]),
                    "mlp2.w" => trunc_normal(&[m, d], INIT_STD, &mut rng),
                    _ => Tensor::zeros(vec![d]),
                };
                p.add(format!("layer{l}.{name}"), t);
            }
        }
        p.add("head.w", trunc_normal(&[d, c], INIT_STD, &mut rng));
        p.add("head.b", Tensor::zeros(vec![c]));
        Ok(Self { config, params: p })
    }

    /// Rebuild from a checkpoint's config and flat parameter vector.
    pub fn from_flat(config: ModelConfig, flat: &[f64]) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.load_flat(flat)?;
        Ok(m)
    }

    /// Stack `inputs` into a `[B, N, P]` patch tensor.
    pub fn patch_batch(&self, inputs: &[&[f64]]) -> Result<Tensor> {
        let cfg = &self.config;
        let mut data = Vec::with_capacity(inputs.len() * cfg.n_patches() * cfg.patch_dim());
        for x in inputs {
            data.extend(patchify(x, cfg.input, cfg.patch)?);
        }
        Tensor::new(vec![inputs.len(), cfg.n_patches(), cfg.patch_dim()], data)
    }

    /// Run the network on already-bound parameters `vars`.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        inputs: &[&[f64]],
        train: bool,
        seed: u64,
    ) -> Result<ActivationTrace> {
        let cfg = &self.config;
        if vars.len() != self.params.len() {
            return Err(Error::Shape(format!("{} bound vars for {} parameters", vars.len(), self.params.len())));
        }
        let b = inputs.len();
        let (s, d, h, dh) = (cfg.seq_len(), cfg.d_model, cfg.heads, cfg.head_dim());
        let x = tape.constant(self.patch_batch(inputs)?);
        let tokens = tape.matmul(x, vars[0])?;
        let cls = tape.broadcast_to(vars[2], &[b, 1])?;
        let z = tape.concat(&[cls, tokens], 1)?;
        let mut z = tape.add(z, vars[1])?;
        let mut layer_outputs = vec![z];
        let mut attention = Vec::with_capacity(cfg.layers);
        let scale = match cfg.attention_scale {
            AttentionScale::PerHead => 1.0 / (dh as f64).sqrt(),
            AttentionScale::Model => 1.0 / (d as f64).sqrt(),
        };
        let mut drop_seed = seed;
        let mut dropout = |tape: &mut Tape, v: Var| {
            drop_seed = drop_seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            tape.dropout(v, cfg.dropout, train, drop_seed)
        };
        for l in 0..cfg.layers {
            let p = &vars[3 + 16 * l..3 + 16 * (l + 1)];
            let y = tape.layer_norm(z, 2, Some(p[0]), Some(p[1]))?;
            let mut heads = |w: Var, bias: Var| -> Result<Var> {
                let q = tape.matmul(y, w)?;
                let q = tape.add(q, bias)?;
                let q = tape.reshape(q, &[b, s, h, dh])?;
                tape.permute(q, &[0, 2, 1, 3])
            };
            let q = heads(p[2], p[3])?;
            let k = heads(p[4], p[5])?;
            let v = heads(p[6], p[7])?;
            let kt = tape.transpose(k, 2, 3)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale)?;
            let a = tape.softmax(scores, 3)?;
            attention.push(a);
            let ctx = tape.matmul(a, v)?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, &[b, s, d])?;
            let o = tape.matmul(ctx, p[8])?;
            let o = tape.add(o, p[9])?;
            let o = dropout(tape, o)?;
            let z1 = tape.add(o, z)?;
            let y = tape.layer_norm(z1, 2, Some(p[10]), Some(p[11]))?;
            let u = tape.matmul(y, p[12])?;
            let u = tape.add(u, p[13])?;
            let u = tape.gelu(u)?;
            let u = tape.matmul(u, p[14])?;
            let u = tape.add(u, p[15])?;
            let u = dropout(tape, u)?;
            z = tape.add(u, z1)?;
            layer_outputs.push(z);
        }
        let head = 3 + 16 * cfg.layers;
        let cls = tape.slice(z, 1, 0, 1)?;
        let class_token = tape.reshape(cls, &[b, d])?;
        let logits = tape.matmul(class_token, vars[head])?;
        let logits = tape.add(logits, vars[head + 1])?;
        Ok(ActivationTrace {
            layer_outputs,
            attention,
            class_token,
            logits,
        })
    }

    /// Eval-mode forward on a fresh tape with frozen parameters.
    pub fn trace(&self, inputs: &[&[f64]]) -> Result<(Tape, ActivationTrace)> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let tr = self.forward_with(&mut tape, &vars, inputs, false, 0)?;
        Ok((tape, tr))
    }

    /// Eval-mode logits `[B, n_classes]`.
    pub fn predict_logits(&self, inputs: &[&[f64]]) -> Result<Tensor> {
        let (tape, tr) = self.trace(inputs)?;
        Ok(tape.value(tr.logits).clone())
    }

    /// Eval-mode final class-token rows `[B, d]`.
    pub fn class_tokens(&self, inputs: &[&[f64]]) -> Result<Tensor> {
        let (tape, tr) = self.trace(inputs)?;
        Ok(tape.value(tr.class_token).clone())
    }

    pub fn positional_table(&self) -> &Tensor {
        &self.params.tensors()[1]
    }
}

impl Classifier for CtHgr {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn input_len(&self) -> usize {
        self.config.input.size()
    }

    fn logits(&self, tape: &mut Tape, vars: &[Var], inputs: &[&[f64]], train: bool, seed: u64) -> Result<Var> {
        Ok(self.forward_with(tape, vars, inputs, train, seed)?.logits)
    }
}

/// Pairwise cosine similarity between the rows of a `[n × d]` table.
/// Rows with zero norm get similarity 0 everywhere, including the diagonal.
pub fn cosine_matrix(table: &Tensor) -> Result<Vec<Vec<f64>>> {
    if table.ndim() != 2 {
        return Err(Error::Shape(format!("cosine matrix needs a 2D table, got {:?}", table.shape())));
    }
    let (n, d) = (table.shape()[0], table.shape()[1]);
    let rows: Vec<&[f64]> = table.data().chunks(d.max(1)).take(n).collect();
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    if let Some(i) = norms.iter().position(|&v| v == 0.0) {
        log::warn!("positional row {i} has zero norm; its similarities are set to 0");
    }
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            if norms[i] == 0.0 || norms[j] == 0.0 {
                continue;
            }
            let c = if i == j {
                1.0
            } else {
                rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum::<f64>() / (norms[i] * norms[j])
            };
            out[i][j] = c;
            out[j][i] = c;
        }
    }
    Ok(out)
}

/// Cosine similarity of the positional embedding rows, `(N+1) × (N+1)`.
pub fn positional_cosine_matrix(model: &CtHgr) -> Result<Vec<Vec<f64>>> {
    cosine_matrix(model.positional_table())
}
