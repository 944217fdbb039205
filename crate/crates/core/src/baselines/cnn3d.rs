use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{trunc_normal, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::train::Classifier;

/// Two conv → GELU → dropout → max-pool stages over `[1 × W × N_ch × N_cv]`
/// inputs, then fully connected layers with GELU and dropout, then a
/// linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cnn3dConfig {
    pub window_len: usize,
    pub n_horizontal: usize,
    pub n_vertical: usize,
    pub filters: [usize; 2],
    pub kernel: [usize; 3],
    pub pool: [usize; 3],
    pub dropout: f64,
    pub fc: Vec<usize>,
    pub n_classes: usize,
}

impl Cnn3dConfig {
    pub fn new(window_len: usize, n_horizontal: usize, n_vertical: usize, n_classes: usize) -> Self {
        Self {
            window_len,
            n_horizontal,
            n_vertical,
            filters: [16, 32],
            kernel: [5, 3, 3],
            pool: [2, 2, 2],
            dropout: 0.2,
            fc: vec![256, 128],
            n_classes,
        }
    }

    /// Spatial extent after each conv and pool, `[conv1, pool1, conv2, pool2]`.
    pub fn stage_shapes(&self) -> Result<[[usize; 3]; 4]> {
        let mut s = [self.window_len, self.n_horizontal, self.n_vertical];
        let mut out = [[0; 3]; 4];
        for stage in 0..2 {
            for a in 0..3 {
                if s[a] < self.kernel[a] {
                    return Err(Error::Shape(format!(
                        "spatial underflow: axis {a} has extent {} before conv {}, kernel {}",
                        s[a],
                        stage + 1,
                        self.kernel[a]
                    )));
                }
                s[a] = s[a] - self.kernel[a] + 1;
            }
            out[2 * stage] = s;
            for a in 0..3 {
                s[a] = s[a].div_ceil(self.pool[a]);
            }
            out[2 * stage + 1] = s;
        }
        Ok(out)
    }

    pub fn flatten_len(&self) -> Result<usize> {
        let s = self.stage_shapes()?[3];
        Ok(self.filters[1] * s.iter().product::<usize>())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.filters.contains(&0) || self.pool.contains(&0) || self.fc.contains(&0) {
            return Err(Error::Config(format!("invalid 3D CNN config {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.stage_shapes().map(|_| ())
    }

    pub fn input_len(&self) -> usize {
        self.window_len * self.n_horizontal * self.n_vertical
    }
}

#[derive(Clone, Debug)]
pub struct Cnn3d {
    pub config: Cnn3dConfig,
    pub params: ParamStore,
}

impl Cnn3d {
    /// Truncated-normal weights with standard deviation `1/√fan_in`, zero
    /// biases.
    pub fn new(config: Cnn3dConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let k: usize = config.kernel.iter().product();
        let mut cin = 1;
        for (i, &cout) in config.filters.iter().enumerate() {
            let shape = [cout, cin, config.kernel[0], config.kernel[1], config.kernel[2]];
            p.add(format!("conv{}.w", i + 1), trunc_normal(&shape, 1.0 / ((cin * k) as f64).sqrt(), &mut rng));
            p.add(format!("conv{}.b", i + 1), Tensor::zeros(vec![cout]));
            cin = cout;
        }
        let mut fan_in = config.flatten_len()?;
        for (i, &width) in config.fc.iter().chain(std::iter::once(&config.n_classes)).enumerate() {
            let name = if i == config.fc.len() { "head".to_string() } else { format!("fc{}", i + 1) };
            p.add(format!("{name}.w"), trunc_normal(&[fan_in, width], 1.0 / (fan_in as f64).sqrt(), &mut rng));
            p.add(format!("{name}.b"), Tensor::zeros(vec![width]));
            fan_in = width;
        }
        Ok(Self { config, params: p })
    }

    pub fn forward_with(&self, tape: &mut Tape, vars: &[Var], inputs: &[&[f64]], train: bool, seed: u64) -> Result<Var> {
        let c = &self.config;
        let b = inputs.len();
        let mut data = Vec::with_capacity(b * c.input_len());
        for x in inputs {
            if x.len() != c.input_len() {
                return Err(Error::Shape(format!("sample has {} values, expected {}", x.len(), c.input_len())));
            }
            data.extend_from_slice(x);
        }
        let x = tape.constant(Tensor::new(vec![b, 1, c.window_len, c.n_horizontal, c.n_vertical], data)?);
        let mut h = x;
        let mut s = seed;
        let mut next_seed = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            s
        };
        for stage in 0..2 {
            h = tape.conv3d(h, vars[2 * stage], vars[2 * stage + 1])?;
            h = tape.gelu(h)?;
            h = tape.dropout(h, c.dropout, train, next_seed())?;
            h = tape.max_pool3d(h, c.pool)?;
        }
        h = tape.reshape(h, &[b, c.flatten_len()?])?;
        let n_fc = c.fc.len();
        for i in 0..=n_fc {
            h = tape.matmul(h, vars[4 + 2 * i])?;
            h = tape.add(h, vars[5 + 2 * i])?;
            if i < n_fc {
                h = tape.gelu(h)?;
                h = tape.dropout(h, c.dropout, train, next_seed())?;
            }
        }
        Ok(h)
    }
}

impl Classifier for Cnn3d {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn input_len(&self) -> usize {
        self.config.input_len()
    }

    fn logits(&self, tape: &mut Tape, vars: &[Var], inputs: &[&[f64]], train: bool, seed: u64) -> Result<Var> {
        self.forward_with(tape, vars, inputs, train, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_shapes_for_w64_on_8x8() {
        let c = Cnn3dConfig::new(64, 8, 8, 66);
        let s = c.stage_shapes().unwrap();
        assert_eq!(s, [[60, 6, 6], [30, 3, 3], [26, 1, 1], [13, 1, 1]]);
        assert_eq!(c.flatten_len().unwrap(), 416);
    }

    #[test]
    fn underflow_is_an_error() {
        assert!(Cnn3dConfig::new(64, 4, 8, 66).validate().is_err());
        assert!(Cnn3dConfig::new(12, 8, 8, 66).validate().is_err());
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let mut m = Cnn3d::new(Cnn3dConfig::new(20, 8, 8, 66), 0).unwrap();
        let flat = vec![0.0; m.params.scalar_count()];
        m.params.load_flat(&flat).unwrap();
        let x = vec![0.3; m.config.input_len()];
        let mut tape = Tape::new();
        let vars = m.params.bind(&mut tape, false);
        let logits = m.forward_with(&mut tape, &vars, &[&x], false, 0).unwrap();
        let p = tape.softmax(logits, 1).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| (v - 1.0 / 66.0).abs() < 1e-15));
    }

    #[test]
    fn count_is_stable() {
        let a = Cnn3d::new(Cnn3dConfig::new(64, 8, 8, 66), 1).unwrap();
        let b = Cnn3d::new(Cnn3dConfig::new(64, 8, 8, 66), 2).unwrap();
        assert_eq!(a.params.scalar_count(), b.params.scalar_count());
        assert_eq!(a.params.scalar_count(), 736 + 23_072 + 106_752 + 32_896 + 8_514);
    }
}
