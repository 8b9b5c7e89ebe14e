//! Network builders, forward inference, and training loops for the FCN and
//! the four CNN variants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::f_score_binary;
use crate::preprocess::Normalizer;
use crate::tensor::{
    dropout_mask, GradTape, Mode, NodeId, OptimizerKind, Padding, PoolKind, Tensor,
};

pub const NUM_CLASSES: usize = 2;
pub const BROKEN_CLASS: usize = 1;
const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActivationKind {
    Relu,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense { units: usize },
    Conv { filters: usize, padding: Padding },
    Pool { kind: PoolKind },
    Flatten,
    BatchNorm,
    Dropout { rate: f64 },
    Activation { kind: ActivationKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputShape {
    Features(usize),
    Image { channels: usize, h: usize, w: usize },
}

impl InputShape {
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            InputShape::Features(f) => vec![f],
            InputShape::Image { channels, h, w } => vec![channels, h, w],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CnnVariant {
    Cnn1,
    Cnn2,
    Cnn3,
    Cnn4,
}

impl CnnVariant {
    pub fn name(&self) -> &'static str {
        match self {
            CnnVariant::Cnn1 => "cnn1",
            CnnVariant::Cnn2 => "cnn2",
            CnnVariant::Cnn3 => "cnn3",
            CnnVariant::Cnn4 => "cnn4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cnn1" => Ok(CnnVariant::Cnn1),
            "cnn2" => Ok(CnnVariant::Cnn2),
            "cnn3" => Ok(CnnVariant::Cnn3),
            "cnn4" => Ok(CnnVariant::Cnn4),
            other => Err(Error::Contract(format!("unknown CNN variant '{other}'"))),
        }
    }

    pub fn all() -> [CnnVariant; 4] {
        [
            CnnVariant::Cnn1,
            CnnVariant::Cnn2,
            CnnVariant::Cnn3,
            CnnVariant::Cnn4,
        ]
    }
}

/// Ordered layer descriptors plus the input shape they chain from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Output shape after every layer; errors if the chain is inconsistent.
    pub fn shape_chain(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input.dims();
        let mut chain = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match *layer {
                LayerSpec::Dense { units } => {
                    if shape.len() != 1 {
                        return Err(Error::Dimension(format!(
                            "layer {i}: dense applied to non-flat shape {shape:?}"
                        )));
                    }
                    if units == 0 {
                        return Err(Error::Contract(format!("layer {i}: dense with 0 units")));
                    }
                    vec![units]
                }
                LayerSpec::Conv { filters, padding } => {
                    if shape.len() != 3 {
                        return Err(Error::Dimension(format!(
                            "layer {i}: conv applied to non-image shape {shape:?}"
                        )));
                    }
                    let (h, w) = (shape[1], shape[2]);
                    match padding {
                        Padding::Same => vec![filters, h, w],
                        Padding::Valid => {
                            if h < 3 || w < 3 {
                                return Err(Error::Dimension(format!(
                                    "layer {i}: {h}x{w} too small for valid 3x3 conv"
                                )));
                            }
                            vec![filters, h - 2, w - 2]
                        }
                    }
                }
                LayerSpec::Pool { .. } => {
                    if shape.len() != 3 {
                        return Err(Error::Dimension(format!(
                            "layer {i}: pool applied to non-image shape {shape:?}"
                        )));
                    }
                    if shape[1] < 2 || shape[2] < 2 {
                        return Err(Error::Dimension(format!(
                            "layer {i}: pool on {}x{}",
                            shape[1], shape[2]
                        )));
                    }
                    vec![shape[0], shape[1] / 2, shape[2] / 2]
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::BatchNorm | LayerSpec::Dropout { .. } | LayerSpec::Activation { .. } => {
                    shape
                }
            };
            chain.push(shape.clone());
        }
        Ok(chain)
    }

    pub fn output_width(&self) -> Result<usize> {
        let chain = self.shape_chain()?;
        let last = chain
            .last()
            .ok_or_else(|| Error::Contract("empty network".into()))?;
        if last.len() != 1 {
            return Err(Error::Dimension(format!(
                "network output shape {last:?} is not flat"
            )));
        }
        Ok(last[0])
    }

    /// Width the first Flatten layer produces, if any.
    pub fn flatten_width(&self) -> Result<Option<usize>> {
        let chain = self.shape_chain()?;
        for (layer, shape) in self.layers.iter().zip(&chain) {
            if matches!(layer, LayerSpec::Flatten) {
                return Ok(Some(shape[0]));
            }
        }
        Ok(None)
    }

    /// Layers carrying trainable parameters (dense, conv, batchnorm).
    pub fn parameterized_layer_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| {
                matches!(
                    l,
                    LayerSpec::Dense { .. } | LayerSpec::Conv { .. } | LayerSpec::BatchNorm
                )
            })
            .count()
    }
}

/// Four blocks of [dense -> batchnorm -> dropout -> relu], then dense(2) ->
/// softmax, on the 4 per-channel features.
pub fn build_fcn(hidden_sizes: [usize; 4], dropout_rate: f64) -> Result<NetworkSpec> {
    if hidden_sizes.iter().any(|&h| h == 0) {
        return Err(Error::Contract(
            "build_fcn: hidden sizes must be positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(Error::Contract(format!(
            "build_fcn: dropout rate {dropout_rate} outside [0,1)"
        )));
    }
    let mut layers = Vec::new();
    for &units in &hidden_sizes {
        layers.push(LayerSpec::Dense { units });
        layers.push(LayerSpec::BatchNorm);
        layers.push(LayerSpec::Dropout { rate: dropout_rate });
        layers.push(LayerSpec::Activation {
            kind: ActivationKind::Relu,
        });
    }
    layers.push(LayerSpec::Dense { units: NUM_CLASSES });
    layers.push(LayerSpec::Activation {
        kind: ActivationKind::Softmax,
    });
    Ok(NetworkSpec {
        input: InputShape::Features(4),
        layers,
    })
}

pub fn build_cnn(variant: CnnVariant) -> NetworkSpec {
    build_cnn_with_dropout(variant, 0.3)
}

/// CNN topologies on 1x20x20 NCM input. `dropout_rate` only affects CNN3.
pub fn build_cnn_with_dropout(variant: CnnVariant, dropout_rate: f64) -> NetworkSpec {
    use ActivationKind::*;
    use LayerSpec::*;
    let relu = Activation { kind: Relu };
    let softmax = Activation { kind: Softmax };
    let layers = match variant {
        CnnVariant::Cnn1 => vec![
            Conv {
                filters: 6,
                padding: Padding::Same,
            },
            relu,
            Pool {
                kind: PoolKind::Average,
            },
            Conv {
                filters: 16,
                padding: Padding::Same,
            },
            relu,
            Pool {
                kind: PoolKind::Average,
            },
            Flatten,
            Dense { units: 64 },
            relu,
            Dense { units: NUM_CLASSES },
            softmax,
        ],
        CnnVariant::Cnn2 => vec![
            Conv {
                filters: 16,
                padding: Padding::Same,
            },
            relu,
            Conv {
                filters: 16,
                padding: Padding::Same,
            },
            relu,
            Pool {
                kind: PoolKind::Max,
            },
            Conv {
                filters: 32,
                padding: Padding::Same,
            },
            relu,
            Conv {
                filters: 32,
                padding: Padding::Same,
            },
            relu,
            Pool {
                kind: PoolKind::Max,
            },
            Flatten,
            Dense { units: 64 },
            relu,
            Dense { units: NUM_CLASSES },
            softmax,
        ],
        CnnVariant::Cnn4 => vec![
            Conv {
                filters: 16,
                padding: Padding::Valid,
            },
            relu,
            Pool {
                kind: PoolKind::Max,
            },
            Conv {
                filters: 32,
                padding: Padding::Valid,
            },
            relu,
            Pool {
                kind: PoolKind::Max,
            },
            Flatten,
            Dense { units: 64 },
            relu,
            Dense { units: NUM_CLASSES },
            softmax,
        ],
        CnnVariant::Cnn3 => vec![
            Conv {
                filters: 16,
                padding: Padding::Valid,
            },
            relu,
            Pool {
                kind: PoolKind::Max,
            },
            Dropout { rate: dropout_rate },
            Conv {
                filters: 32,
                padding: Padding::Valid,
            },
            relu,
            Pool {
                kind: PoolKind::Max,
            },
            Dropout { rate: dropout_rate },
            Flatten,
            Dense { units: 64 },
            relu,
            Dropout { rate: dropout_rate },
            Dense { units: NUM_CLASSES },
            softmax,
        ],
    };
    NetworkSpec {
        input: InputShape::Image {
            channels: 1,
            h: 20,
            w: 20,
        },
        layers,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum LayerState {
    Dense {
        w: Tensor,
        b: Tensor,
    },
    Conv {
        k: Tensor,
        b: Tensor,
    },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
    },
    Stateless,
}

/// A layered differentiable model with its trainable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    spec: NetworkSpec,
    states: Vec<LayerState>,
}

fn glorot_uniform<R: Rng>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape, data).unwrap()
}

impl Network {
    pub fn init<R: Rng>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        let chain = spec.shape_chain()?;
        if spec.output_width()? != NUM_CLASSES {
            return Err(Error::Contract(format!(
                "network must end in {NUM_CLASSES} outputs"
            )));
        }
        let mut states = Vec::with_capacity(spec.layers.len());
        let mut in_shape = spec.input.dims();
        for (layer, out_shape) in spec.layers.iter().zip(&chain) {
            let state = match *layer {
                LayerSpec::Dense { units } => {
                    let fan_in = in_shape[0];
                    LayerState::Dense {
                        w: glorot_uniform(vec![fan_in, units], fan_in, units, rng),
                        b: Tensor::zeros(vec![units]),
                    }
                }
                LayerSpec::Conv { filters, .. } => {
                    let in_ch = in_shape[0];
                    LayerState::Conv {
                        k: glorot_uniform(
                            vec![filters, in_ch, 3, 3],
                            in_ch * 9,
                            filters * 9,
                            rng,
                        ),
                        b: Tensor::zeros(vec![filters]),
                    }
                }
                LayerSpec::BatchNorm => {
                    let f = in_shape[0];
                    LayerState::BatchNorm {
                        gamma: Tensor::new(vec![f], vec![1.0; f]).unwrap(),
                        beta: Tensor::zeros(vec![f]),
                        running_mean: vec![0.0; f],
                        running_var: vec![1.0; f],
                    }
                }
                _ => LayerState::Stateless,
            };
            states.push(state);
            in_shape = out_shape.clone();
        }
        Ok(Network { spec, states })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for s in &mut self.states {
            match s {
                LayerState::Dense { w, b } | LayerState::Conv { k: w, b } => {
                    out.push(w);
                    out.push(b);
                }
                LayerState::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma);
                    out.push(beta);
                }
                LayerState::Stateless => {}
            }
        }
        out
    }

    /// Forward a batch; returns the probability node and, in train mode, the
    /// tape leaves of each parameter (in `param_tensors` order).
    pub fn forward<R: Rng>(
        &mut self,
        tape: &mut GradTape,
        x: NodeId,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let mut cur = x;
        let mut param_leaves = Vec::new();
        let n_layers = self.spec.layers.len();
        for li in 0..n_layers {
            let layer = self.spec.layers[li];
            match layer {
                LayerSpec::Dense { .. } => {
                    let (w, b) = match &self.states[li] {
                        LayerState::Dense { w, b } => (w.clone(), b.clone()),
                        _ => unreachable!(),
                    };
                    let wn = tape.leaf(w);
                    let bn = tape.leaf(b);
                    param_leaves.push(wn);
                    param_leaves.push(bn);
                    cur = tape.matmul(cur, wn)?;
                    cur = tape.add_row_bias(cur, bn)?;
                }
                LayerSpec::Conv { padding, .. } => {
                    let (k, b) = match &self.states[li] {
                        LayerState::Conv { k, b } => (k.clone(), b.clone()),
                        _ => unreachable!(),
                    };
                    let kn = tape.leaf(k);
                    let bn = tape.leaf(b);
                    param_leaves.push(kn);
                    param_leaves.push(bn);
                    cur = tape.conv2d(cur, kn, bn, padding)?;
                }
                LayerSpec::Pool { kind } => {
                    cur = tape.pool2d(cur, kind)?;
                }
                LayerSpec::Flatten => {
                    let s = tape.value(cur).shape().to_vec();
                    let batch = s[0];
                    let flat: usize = s[1..].iter().product();
                    cur = tape.reshape(cur, vec![batch, flat])?;
                }
                LayerSpec::BatchNorm => match mode {
                    Mode::Train => {
                        let (gamma, beta) = match &self.states[li] {
                            LayerState::BatchNorm { gamma, beta, .. } => {
                                (gamma.clone(), beta.clone())
                            }
                            _ => unreachable!(),
                        };
                        let gn = tape.leaf(gamma);
                        let bn = tape.leaf(beta);
                        param_leaves.push(gn);
                        param_leaves.push(bn);
                        let (out, mean, var) = tape.batchnorm_train(cur, gn, bn)?;
                        if let LayerState::BatchNorm {
                            running_mean,
                            running_var,
                            ..
                        } = &mut self.states[li]
                        {
                            for (r, m) in running_mean.iter_mut().zip(&mean) {
                                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
                            }
                            for (r, v) in running_var.iter_mut().zip(&var) {
                                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
                            }
                        }
                        cur = out;
                    }
                    Mode::Infer => {
                        if let LayerState::BatchNorm {
                            gamma,
                            beta,
                            running_mean,
                            running_var,
                        } = &self.states[li]
                        {
                            cur = tape.batchnorm_infer(
                                cur,
                                gamma.data(),
                                beta.data(),
                                running_mean,
                                running_var,
                            )?;
                        }
                    }
                },
                LayerSpec::Dropout { rate } => {
                    if mode == Mode::Train && rate > 0.0 {
                        let mask = dropout_mask(tape.value(cur).len(), rate, rng);
                        cur = tape.dropout_masked(cur, mask)?;
                    }
                }
                LayerSpec::Activation { kind } => {
                    cur = match kind {
                        ActivationKind::Relu => tape.relu(cur),
                        ActivationKind::Softmax => tape.softmax(cur)?,
                    };
                }
            }
        }
        Ok((cur, param_leaves))
    }

    /// Deterministic inference over a batch; rows of class probabilities.
    pub fn infer_batch(&mut self, x: &Tensor) -> Result<Vec<[f64; 2]>> {
        let mut tape = GradTape::new();
        let xn = tape.leaf(x.clone());
        // rng is unused in infer mode
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (probs, _) = self.forward(&mut tape, xn, Mode::Infer, &mut rng)?;
        let pv = tape.value(probs);
        let n = pv.shape()[0];
        let mut out = Vec::with_capacity(n);
        for row in pv.data().chunks(NUM_CLASSES) {
            out.push([row[0], row[1]]);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::adam(1e-3),
            batch_size: 64,
            max_epochs: 50,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Contract(
                "batch size must be >= 2 (batch-norm constraint)".into(),
            ));
        }
        if self.patience < 1 {
            return Err(Error::Contract("patience must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss: f64,
    pub tune_f: f64,
}

/// A trained network plus everything needed to reproduce its predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub network: Network,
    pub config: TrainConfig,
    pub history: Vec<EpochStats>,
    pub normalizer: Option<Normalizer>,
}

impl TrainedModel {
    pub fn spec(&self) -> &NetworkSpec {
        &self.network.spec
    }

    /// Probability of class broken for one input sample.
    pub fn predict_proba(&self, input: &Tensor) -> Result<f64> {
        Ok(self.predict_proba_batch(std::slice::from_ref(input))?[0])
    }

    /// Probability of class broken per sample.
    pub fn predict_proba_batch(&self, inputs: &[Tensor]) -> Result<Vec<f64>> {
        let want = self.network.spec.input.dims();
        let mut flat = Vec::new();
        for t in inputs {
            if t.shape() != want.as_slice() {
                return Err(Error::Dimension(format!(
                    "predict: input shape {:?}, model expects {:?}",
                    t.shape(),
                    want
                )));
            }
            flat.extend_from_slice(t.data());
        }
        let mut shape = vec![inputs.len()];
        shape.extend_from_slice(&want);
        let batch = Tensor::new(shape, flat)?;
        let mut net = self.network.clone();
        let rows = net.infer_batch(&batch)?;
        Ok(rows.into_iter().map(|r| r[BROKEN_CLASS]).collect())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&json)?)
    }
}

fn batch_tensor(x: &Tensor, sample_dims: &[usize], idxs: &[usize]) -> Tensor {
    let sample_len: usize = sample_dims.iter().product();
    let mut data = Vec::with_capacity(idxs.len() * sample_len);
    for &i in idxs {
        data.extend_from_slice(&x.data()[i * sample_len..(i + 1) * sample_len]);
    }
    let mut shape = vec![idxs.len()];
    shape.extend_from_slice(sample_dims);
    Tensor::new(shape, data).unwrap()
}

/// Train `spec` on `(train_x, train_y)`, selecting the epoch with the best
/// broken-class F-score on the tune split. `train_x` is `[n, ...sample]`.
pub fn train(
    spec: NetworkSpec,
    train_x: &Tensor,
    train_y: &[usize],
    tune_x: &Tensor,
    tune_y: &[usize],
    cfg: TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let sample_dims = spec.input.dims();
    let n_train = train_y.len();
    let n_tune = tune_y.len();
    if n_train == 0 || n_tune == 0 {
        return Err(Error::Contract(
            "train and tune sets must be non-empty".into(),
        ));
    }
    if train_x.shape()[0] != n_train || tune_x.shape()[0] != n_tune {
        return Err(Error::Dimension(
            "train: inputs and labels disagree on sample count".into(),
        ));
    }
    let has_both = train_y.iter().any(|&y| y == 0) && train_y.iter().any(|&y| y == 1);
    if !has_both {
        return Err(Error::TrainingDegeneracy(
            "training set contains a single class".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::init(spec, &mut rng)?;
    let mut opt = crate::tensor::make_optimizer(cfg.optimizer);
    let mut history = Vec::new();
    let mut best: Option<(f64, Network)> = None;
    let mut since_best = 0usize;

    for _epoch in 0..cfg.max_epochs {
        // seeded shuffle
        let mut order: Vec<usize> = (0..n_train).collect();
        for i in (1..n_train).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                // batch-norm needs >= 2 rows; drop a trailing singleton
                continue;
            }
            let xb = batch_tensor(train_x, &sample_dims, chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let mut tape = GradTape::new();
            let xn = tape.leaf(xb);
            let (probs, leaves) = net.forward(&mut tape, xn, Mode::Train, &mut rng)?;
            let loss = tape.cross_entropy(probs, &yb)?;
            loss_sum += tape.value(loss).data()[0] * chunk.len() as f64;
            seen += chunk.len();
            let grads = tape.backward(loss)?;
            let params = net.param_tensors_mut();
            debug_assert_eq!(params.len(), leaves.len());
            for (idx, (param, leaf)) in params.into_iter().zip(&leaves).enumerate() {
                if let Some(g) = grads.get(*leaf) {
                    opt.step(idx, param, g)?;
                }
            }
        }
        let epoch_loss = if seen > 0 {
            loss_sum / seen as f64
        } else {
            f64::NAN
        };

        let tune_probs = {
            let xb = batch_tensor(tune_x, &sample_dims, &(0..n_tune).collect::<Vec<_>>());
            net.infer_batch(&xb)?
        };
        let preds: Vec<usize> = tune_probs
            .iter()
            .map(|r| usize::from(r[BROKEN_CLASS] >= 0.5))
            .collect();
        let tune_f = f_score_binary(&preds, tune_y);
        history.push(EpochStats {
            loss: epoch_loss,
            tune_f,
        });
        let improved = best.as_ref().map(|(bf, _)| tune_f > *bf).unwrap_or(true);
        if improved {
            best = Some((tune_f, net.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    if let Some((_, best_net)) = best {
        net = best_net;
    }
    Ok(TrainedModel {
        network: net,
        config: cfg,
        history,
        normalizer: None,
    })
}
