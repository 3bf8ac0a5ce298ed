//! Fully-connected ReLU network with a hand-written backward pass and
//! momentum SGD.
//!
//! Weights are stored `fan_in x fan_out` so a batch of row vectors is
//! propagated as `X . W + b`.
//!
//! # Checkpoint layout
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes   b"FERMLP\0\0"
//! version      u32       1
//! seed         u64
//! n_sizes      u32
//! sizes        n_sizes x u64
//! per layer l  (fan_in x fan_out) f64 weights, row-major, then fan_out f64 biases
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{FerError, Result};
use crate::numerics::argmax;

const CHECKPOINT_MAGIC: &[u8; 8] = b"FERMLP\0\0";
const CHECKPOINT_VERSION: u32 = 1;

/// One affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weights: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    sizes: Vec<usize>,
    seed: u64,
    layers: Vec<Dense>,
}

/// Logits for a batch plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub logits: Array2<f64>,
    /// Input to every layer; `inputs[0]` is the batch itself.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of every hidden layer.
    hidden_pre: Vec<Array2<f64>>,
}

impl BatchOutput {
    pub fn batch_size(&self) -> usize {
        self.logits.nrows()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.logits.row(i).to_vec()
    }

    /// Argmax class of every row.
    pub fn predictions(&self) -> Vec<usize> {
        self.logits
            .rows()
            .into_iter()
            .map(|r| argmax(r.as_slice().expect("logit rows are contiguous")))
            .collect()
    }
}

/// Per-layer gradients, mirroring [`MlpModel`]'s layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weights.nrows(), l.weights.ncols()))
                .collect(),
        }
    }

    /// Flattened in the same order as [`MlpModel::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }
}

fn flatten_layers(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layers.iter().map(Dense::param_count).sum());
    for l in layers {
        out.extend(l.weights.iter().copied());
        out.extend(l.bias.iter().copied());
    }
    out
}

impl MlpModel {
    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`) and zero biases.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        validate_sizes(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("bound is finite");
                let weights = Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(&mut rng));
                Dense {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(MlpModel {
            sizes: sizes.to_vec(),
            seed,
            layers,
        })
    }

    /// Builds a model from explicit layers; dimensions must chain.
    pub fn from_layers(layers: Vec<Dense>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(FerError::Config("model needs at least one layer".into()));
        }
        let mut sizes = vec![layers[0].weights.nrows()];
        for (i, l) in layers.iter().enumerate() {
            if l.weights.nrows() != *sizes.last().unwrap() || l.bias.len() != l.weights.ncols() {
                return Err(FerError::Shape(format!(
                    "layer {i} has weights {:?} and bias {}, previous width {}",
                    l.weights.dim(),
                    l.bias.len(),
                    sizes.last().unwrap()
                )));
            }
            sizes.push(l.weights.ncols());
        }
        validate_sizes(&sizes)?;
        Ok(MlpModel { sizes, seed, layers })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn class_count(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn parameters(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn set_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(FerError::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Array2<f64>) -> Result<BatchOutput> {
        if batch.ncols() != self.input_dim() {
            return Err(FerError::Shape(format!(
                "batch has {} features, model expects {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut hidden_pre = Vec::with_capacity(last);
        let mut current = batch.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = current.dot(&layer.weights) + &layer.bias;
            inputs.push(current);
            if i == last {
                return Ok(BatchOutput {
                    logits: z,
                    inputs,
                    hidden_pre,
                });
            }
            current = z.mapv(|v| if v > 0.0 { v } else { 0.0 });
            hidden_pre.push(z);
        }
        unreachable!("loop returns at the last layer")
    }

    /// Argmax predictions for every row of `batch`.
    pub fn predict(&self, batch: &Array2<f64>) -> Result<Vec<usize>> {
        Ok(self.forward(batch)?.predictions())
    }

    /// Backpropagates per-sample logit gradients; the result is averaged over the batch.
    pub fn backward(&self, cache: &BatchOutput, dl_dlogits: &Array2<f64>) -> Result<Gradients> {
        if dl_dlogits.dim() != cache.logits.dim() {
            return Err(FerError::Shape(format!(
                "logit gradient {:?} does not match logits {:?}",
                dl_dlogits.dim(),
                cache.logits.dim()
            )));
        }
        if cache.inputs.len() != self.layers.len() {
            return Err(FerError::Shape(
                "batch output was produced by a different architecture".into(),
            ));
        }
        let n = dl_dlogits.nrows().max(1) as f64;
        let mut delta = dl_dlogits / n;
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let weights = cache.inputs[i].t().dot(&delta);
            let bias = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut back = delta.dot(&self.layers[i].weights.t());
                // subgradient of ReLU at exactly 0 is taken as 0
                ndarray::Zip::from(&mut back)
                    .and(&cache.hidden_pre[i - 1])
                    .for_each(|d, &z| {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    });
                delta = back;
            }
            grads.push(Dense { weights, bias });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| FerError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| FerError::io(path, e))?;
        w.flush().map_err(|e| FerError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| FerError::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        w.write_u32::<LittleEndian>(self.sizes.len() as u32)?;
        for &s in &self.sizes {
            w.write_u64::<LittleEndian>(s as u64)?;
        }
        for p in self.parameters() {
            w.write_f64::<LittleEndian>(p)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |what: &str, e: std::io::Error| FerError::parse("checkpoint", format!("{what}: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| bad("magic", e))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(FerError::parse("checkpoint", "not a model checkpoint"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|e| bad("version", e))?;
        if version != CHECKPOINT_VERSION {
            return Err(FerError::parse("checkpoint", format!("unsupported version {version}")));
        }
        let seed = r.read_u64::<LittleEndian>().map_err(|e| bad("seed", e))?;
        let n = r.read_u32::<LittleEndian>().map_err(|e| bad("layer count", e))? as usize;
        if n > 1024 {
            return Err(FerError::parse("checkpoint", format!("implausible layer count {n}")));
        }
        let sizes = (0..n)
            .map(|_| {
                r.read_u64::<LittleEndian>()
                    .map(|s| s as usize)
                    .map_err(|e| bad("layer size", e))
            })
            .collect::<Result<Vec<_>>>()?;
        validate_sizes(&sizes).map_err(|e| FerError::parse("checkpoint", e.to_string()))?;
        let mut model = MlpModel::new(&sizes, seed)?;
        let params = (0..model.param_count())
            .map(|i| {
                r.read_f64::<LittleEndian>()
                    .map_err(|e| bad(&format!("parameter {i}"), e))
            })
            .collect::<Result<Vec<_>>>()?;
        model.set_parameters(&params)?;
        Ok(model)
    }
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(FerError::Config(format!(
            "need at least input and output layer sizes, got {sizes:?}"
        )));
    }
    if sizes.contains(&0) {
        return Err(FerError::Config(format!("layer sizes must be positive: {sizes:?}")));
    }
    Ok(())
}

/// Momentum buffers and hyperparameters for SGD.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    velocity: Gradients,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(model: &MlpModel, learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
            return Err(FerError::Config(format!("invalid learning rate {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(FerError::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        if !(weight_decay >= 0.0) {
            return Err(FerError::Config(format!("invalid weight decay {weight_decay}")));
        }
        Ok(OptimizerState {
            velocity: Gradients::zeros_like(model),
            learning_rate,
            momentum,
            weight_decay,
        })
    }

    pub fn velocity(&self) -> &Gradients {
        &self.velocity
    }
}

/// `v <- m v + g + w theta; theta <- theta - lr v`.
///
/// Nothing is modified if any gradient entry is non-finite.
pub fn sgd_step(model: &mut MlpModel, state: &mut OptimizerState, grads: &Gradients) -> Result<()> {
    if grads.layers.len() != model.layers.len() || state.velocity.layers.len() != model.layers.len() {
        return Err(FerError::Shape("gradient layer count does not match model".into()));
    }
    for (i, (g, l)) in grads.layers.iter().zip(&model.layers).enumerate() {
        if g.weights.dim() != l.weights.dim() || g.bias.len() != l.bias.len() {
            return Err(FerError::Shape(format!("gradient shape mismatch in layer {i}")));
        }
        if g.weights.iter().chain(g.bias.iter()).any(|x| !x.is_finite()) {
            return Err(FerError::Numeric(format!("non-finite gradient in layer {i}")));
        }
    }
    let (lr, m, wd) = (state.learning_rate, state.momentum, state.weight_decay);
    for ((layer, g), v) in model
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.velocity.layers)
    {
        ndarray::Zip::from(&mut layer.weights)
            .and(&g.weights)
            .and(&mut v.weights)
            .for_each(|theta, &g, v| {
                *v = m * *v + g + wd * *theta;
                *theta -= lr * *v;
            });
        ndarray::Zip::from(&mut layer.bias)
            .and(&g.bias)
            .and(&mut v.bias)
            .for_each(|theta, &g, v| {
                *v = m * *v + g + wd * *theta;
                *theta -= lr * *v;
            });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_batch(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, d), || rng.random_range(-2.0..2.0))
    }

    #[test]
    fn init_is_deterministic_and_sized() {
        let a = MlpModel::new(&[4, 128, 128, 3], 7).unwrap();
        let b = MlpModel::new(&[4, 128, 128, 3], 7).unwrap();
        assert_eq!(a, b);
        // 4*128+128 + 128*128+128 + 128*3+3
        assert_eq!(a.param_count(), 17_539);
        let c = MlpModel::new(&[4, 128, 128, 3], 8).unwrap();
        assert_ne!(a.parameters(), c.parameters());

        let bound = (6.0f64 / 4.0).sqrt();
        assert!(a.layers[0].weights.iter().all(|w| w.abs() <= bound));
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|b| *b == 0.0)));
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(matches!(MlpModel::new(&[], 0), Err(FerError::Config(_))));
        assert!(matches!(MlpModel::new(&[4], 0), Err(FerError::Config(_))));
        assert!(matches!(MlpModel::new(&[4, 0, 3], 0), Err(FerError::Config(_))));
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let mut m = MlpModel::new(&[3, 5, 2], 1).unwrap();
        m.set_parameters(&vec![0.0; m.param_count()]).unwrap();
        let out = m.forward(&random_batch(4, 3, 2)).unwrap();
        assert!(out.logits.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn identity_layer_passes_inputs_through() {
        let layer = Dense {
            weights: Array2::eye(3),
            bias: Array1::zeros(3),
        };
        let m = MlpModel::from_layers(vec![layer], 0).unwrap();
        let x = random_batch(5, 3, 3);
        assert_eq!(m.forward(&x).unwrap().logits, x);
    }

    #[test]
    fn forward_matches_explicit_dot_products() {
        let m = MlpModel::new(&[6, 9, 7, 4], 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = m;
        let params: Vec<f64> = (0..m.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        m.set_parameters(&params).unwrap();
        let x = random_batch(8, 6, 12);
        let got = m.forward(&x).unwrap().logits;

        for r in 0..x.nrows() {
            let mut act: Vec<f64> = x.row(r).to_vec();
            for (li, l) in m.layers.iter().enumerate() {
                let mut next = vec![0.0; l.weights.ncols()];
                for (j, out) in next.iter_mut().enumerate() {
                    let mut s = l.bias[j];
                    for (i, a) in act.iter().enumerate() {
                        s += a * l.weights[[i, j]];
                    }
                    *out = if li + 1 < m.layers.len() { s.max(0.0) } else { s };
                }
                act = next;
            }
            for (j, v) in act.iter().enumerate() {
                assert!((got[[r, j]] - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = MlpModel::new(&[3, 4, 2], 0).unwrap();
        assert!(matches!(m.forward(&random_batch(2, 4, 0)), Err(FerError::Shape(_))));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let m = MlpModel::new(&[5, 32, 32, 3], 9).unwrap();
        let x = random_batch(17, 5, 1);
        assert_eq!(m.forward(&x).unwrap().logits, m.forward(&x).unwrap().logits);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let m = MlpModel::new(&[3, 8, 2], 4).unwrap();
        let out = m.forward(&random_batch(5, 3, 4)).unwrap();
        let g = m.backward(&out, &Array2::zeros((5, 2))).unwrap();
        assert!(g.flatten().iter().all(|x| *x == 0.0));
        assert!(matches!(
            m.backward(&out, &Array2::zeros((4, 2))),
            Err(FerError::Shape(_))
        ));
    }

    #[test]
    fn duplicated_sample_batch_matches_single_sample() {
        let m = MlpModel::new(&[3, 8, 8, 2], 4).unwrap();
        let x1 = random_batch(1, 3, 5);
        let x2 = ndarray::concatenate![Axis(0), x1, x1];
        let up1 = Array2::from_shape_vec((1, 2), vec![0.3, -0.3]).unwrap();
        let up2 = ndarray::concatenate![Axis(0), up1, up1];
        let g1 = m.backward(&m.forward(&x1).unwrap(), &up1).unwrap().flatten();
        let g2 = m.backward(&m.forward(&x2).unwrap(), &up2).unwrap().flatten();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        // hidden pre-activation is exactly 0 for the single input below
        let l0 = Dense {
            weights: Array2::from_shape_vec((1, 1), vec![1.0]).unwrap(),
            bias: Array1::from(vec![0.0]),
        };
        let l1 = Dense {
            weights: Array2::from_shape_vec((1, 1), vec![2.0]).unwrap(),
            bias: Array1::from(vec![0.0]),
        };
        let m = MlpModel::from_layers(vec![l0, l1], 0).unwrap();
        let x = Array2::from_shape_vec((1, 1), vec![0.0]).unwrap();
        let out = m.forward(&x).unwrap();
        let g = m.backward(&out, &Array2::from_elem((1, 1), 1.0)).unwrap();
        assert_eq!(g.layers[0].weights[[0, 0]], 0.0);
        assert_eq!(g.layers[0].bias[0], 0.0);
        assert_eq!(g.layers[1].weights[[0, 0]], 0.0);
        assert_eq!(g.layers[1].bias[0], 1.0);
    }

    fn constant_grads(model: &MlpModel, value: f64) -> Gradients {
        let mut g = Gradients::zeros_like(model);
        for l in &mut g.layers {
            l.weights.fill(value);
            l.bias.fill(value);
        }
        g
    }

    #[test]
    fn sgd_zero_learning_rate_is_noop() {
        let mut m = MlpModel::new(&[3, 4, 2], 0).unwrap();
        let before = m.clone();
        let mut st = OptimizerState::new(&m, 0.0, 0.9, 5e-4).unwrap();
        let g = constant_grads(&m, 0.7);
        sgd_step(&mut m, &mut st, &g).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn sgd_plain_step() {
        let mut m = MlpModel::new(&[3, 4, 2], 0).unwrap();
        let before = m.parameters();
        let mut st = OptimizerState::new(&m, 0.1, 0.0, 0.0).unwrap();
        let g = constant_grads(&m, 0.5);
        sgd_step(&mut m, &mut st, &g).unwrap();
        for (a, b) in m.parameters().iter().zip(&before) {
            assert!((a - (b - 0.05)).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_momentum_unrolls() {
        let mut m = MlpModel::new(&[2, 3, 2], 0).unwrap();
        let before = m.parameters();
        let mut st = OptimizerState::new(&m, 0.01, 0.9, 0.0).unwrap();
        let g = constant_grads(&m, 2.0);
        sgd_step(&mut m, &mut st, &g).unwrap();
        sgd_step(&mut m, &mut st, &g).unwrap();
        let expected = 0.01 * 2.0 * (1.0 + 1.9);
        for (a, b) in m.parameters().iter().zip(&before) {
            assert!((b - a - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn sgd_rejects_non_finite_gradient_and_names_layer() {
        let mut m = MlpModel::new(&[2, 3, 2], 0).unwrap();
        let before = m.clone();
        let mut st = OptimizerState::new(&m, 0.1, 0.9, 0.0).unwrap();
        let mut g = constant_grads(&m, 1.0);
        g.layers[1].bias[0] = f64::NAN;
        let err = sgd_step(&mut m, &mut st, &g).unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
        assert_eq!(m, before);
    }

    #[test]
    fn optimizer_validates_hyperparameters() {
        let m = MlpModel::new(&[2, 2], 0).unwrap();
        assert!(OptimizerState::new(&m, 0.1, 1.0, 0.0).is_err());
        assert!(OptimizerState::new(&m, -0.1, 0.5, 0.0).is_err());
        assert!(OptimizerState::new(&m, 0.1, 0.5, -1.0).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_truncation() {
        let m = MlpModel::new(&[4, 16, 3], 42).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = MlpModel::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);

        let cut = &buf[..buf.len() - 3];
        assert!(matches!(
            MlpModel::read_from(&mut &cut[..]),
            Err(FerError::Parse { .. })
        ));
        let mut wrong = buf.clone();
        wrong[0] = b'X';
        assert!(MlpModel::read_from(&mut wrong.as_slice()).is_err());
    }
}
