//! Desk-scale finetuning harness.
//!
//! A small fully connected network is pretrained on a seeded synthetic
//! regression task and then finetuned on a shifted task with only adapter
//! parameters trainable. The frozen weights are never written during
//! finetuning. Everything is full-batch and single-threaded, so a seed and a
//! config determine every logged value bit for bit.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, Mode};
use crate::energy;
use crate::error::{OftError, Result};
use crate::grad::grad_from_weight_grad;
use crate::matcore::{matmul, matmul_nt, matmul_tn};
use crate::Mat;

/// Loss above which a run is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
}

/// How a layer combines a neuron `w` with an input `x` before the bias and
/// activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRule {
    /// `⟨w, x⟩`
    Inner,
    /// `cos∠(w, x)`: direction only.
    Cosine,
    /// `‖w‖·‖x‖`: magnitude only.
    Magnitude,
}

/// Additive low-rank update `W = W⁰ + U·V`, the baseline the orthogonal
/// adapter is compared against. `U` starts at zero so the update is a no-op.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRank {
    pub u: Mat,
    pub v: Mat,
}

impl LowRank {
    pub fn new(d: usize, n: usize, rank: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (n as f64).sqrt();
        LowRank {
            u: Mat::zeros(d, rank),
            v: Mat::from_fn(rank, n, |_, _| scale * rng.sample::<f64, _>(StandardNormal)),
        }
    }

    fn delta(&self) -> Result<Mat> {
        matmul(&self.u, &self.v)
    }

    fn num_params(&self) -> usize {
        self.u.as_slice().len() + self.v.as_slice().len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerUpdate {
    Frozen,
    Orthogonal(Adapter<f64>),
    LowRank(LowRank),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    w0: Mat,
    bias: Option<Vec<f64>>,
    update: LayerUpdate,
    activation: Activation,
    feature: FeatureRule,
}

impl Layer {
    pub fn new(w0: Mat, bias: Option<Vec<f64>>, activation: Activation) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != w0.cols() {
                return Err(OftError::dims("Layer bias", w0.cols(), b.len()));
            }
        }
        Ok(Layer {
            w0,
            bias,
            update: LayerUpdate::Frozen,
            activation,
            feature: FeatureRule::Inner,
        })
    }

    pub fn w0(&self) -> &Mat {
        &self.w0
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn update(&self) -> &LayerUpdate {
        &self.update
    }

    pub fn adapter(&self) -> Option<&Adapter<f64>> {
        match &self.update {
            LayerUpdate::Orthogonal(a) => Some(a),
            _ => None,
        }
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn feature(&self) -> FeatureRule {
        self.feature
    }

    pub fn set_feature(&mut self, rule: FeatureRule) {
        self.feature = rule;
    }

    pub fn in_dim(&self) -> usize {
        self.w0.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w0.cols()
    }

    /// The weight the layer actually applies.
    pub fn effective_weight(&self) -> Result<Mat> {
        match &self.update {
            LayerUpdate::Frozen => Ok(self.w0.clone()),
            LayerUpdate::Orthogonal(a) => a.merge(&self.w0),
            LayerUpdate::LowRank(lr) => self.w0.add(&lr.delta()?),
        }
    }

    fn pre_activation(&self, w: &Mat, x: &Mat) -> Result<Mat> {
        let mut pre = match self.feature {
            FeatureRule::Inner => matmul_tn(w, x)?,
            FeatureRule::Cosine | FeatureRule::Magnitude => {
                let wn = w.column_norms();
                let xn = x.column_norms();
                let mut m = matmul_tn(w, x)?;
                for (i, &a) in wn.iter().enumerate() {
                    for (j, &b) in xn.iter().enumerate() {
                        let v = if self.feature == FeatureRule::Magnitude {
                            a * b
                        } else if a * b > 0.0 {
                            m.get(i, j) / (a * b)
                        } else {
                            0.0
                        };
                        m.set(i, j, v);
                    }
                }
                m
            }
        };
        if let Some(b) = &self.bias {
            for (i, &bi) in b.iter().enumerate() {
                pre.row_mut(i).iter_mut().for_each(|v| *v += bi);
            }
        }
        Ok(pre)
    }
}

fn activate(act: Activation, pre: &Mat) -> Mat {
    match act {
        Activation::Linear => pre.clone(),
        Activation::Relu => Mat::from_fn(pre.rows(), pre.cols(), |r, c| pre.get(r, c).max(0.0)),
    }
}

/// Inputs `x` (`d_in x N`) and targets `y` (`d_out x N`), one sample per
/// column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Mat,
    pub y: Mat,
}

impl Dataset {
    pub fn new(x: Mat, y: Mat) -> Result<Self> {
        if x.cols() != y.cols() {
            return Err(OftError::dims("Dataset", x.cols(), y.cols()));
        }
        Ok(Dataset { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gradients of one layer's effective weight and bias.
struct LayerGrad {
    weight: Mat,
    bias: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    layers: Vec<Layer>,
    seed: u64,
    task: String,
}

impl ToyModel {
    pub fn new(layers: Vec<Layer>, seed: u64, task: impl Into<String>) -> Result<Self> {
        if layers.is_empty() {
            return Err(OftError::InvalidConfig("model needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(OftError::dims("ToyModel layers", pair[0].out_dim(), pair[1].in_dim()));
            }
        }
        Ok(ToyModel {
            layers,
            seed,
            task: task.into(),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut Layer {
        &mut self.layers[i]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn task(&self) -> &str {
        &self.task
    }

    pub fn set_task(&mut self, task: impl Into<String>) {
        self.task = task.into();
    }

    /// Attaches an orthogonal adapter to layer `i`, replacing any update.
    pub fn attach_adapter(&mut self, i: usize, adapter: Adapter<f64>) -> Result<()> {
        let layer = self.layer_checked(i)?;
        if (adapter.input_dim(), adapter.num_neurons()) != layer.w0.shape() {
            return Err(OftError::dims(
                "attach_adapter",
                format!("{}x{}", layer.in_dim(), layer.out_dim()),
                format!("{}x{}", adapter.input_dim(), adapter.num_neurons()),
            ));
        }
        self.layers[i].update = LayerUpdate::Orthogonal(adapter);
        Ok(())
    }

    pub fn attach_low_rank(&mut self, i: usize, rank: usize, rng: &mut impl Rng) -> Result<()> {
        let layer = self.layer_checked(i)?;
        let lr = LowRank::new(layer.in_dim(), layer.out_dim(), rank, rng);
        self.layers[i].update = LayerUpdate::LowRank(lr);
        Ok(())
    }

    fn layer_checked(&self, i: usize) -> Result<&Layer> {
        self.layers.get(i).ok_or_else(|| {
            OftError::InvalidConfig(format!("layer {i} out of range ({} layers)", self.layers.len()))
        })
    }

    /// Indices of layers carrying an update.
    pub fn adapted_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| !matches!(self.layers[i].update, LayerUpdate::Frozen))
            .collect()
    }

    /// Frozen weights and biases, for bit-identity checks.
    pub fn frozen_state(&self) -> Vec<(Mat, Option<Vec<f64>>)> {
        self.layers.iter().map(|l| (l.w0.clone(), l.bias.clone())).collect()
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        let mut h = x.clone();
        for layer in &self.layers {
            let w = layer.effective_weight()?;
            h = activate(layer.activation, &layer.pre_activation(&w, &h)?);
        }
        Ok(h)
    }

    /// `‖f(x) − y‖²_F / (2N)`.
    pub fn loss(&self, data: &Dataset) -> Result<f64> {
        let out = self.forward(&data.x)?;
        let r = out.sub(&data.y)?.frobenius_norm();
        Ok(0.5 * r * r / data.len() as f64)
    }

    /// Loss and per-layer gradients of the effective weights.
    fn backprop(&self, data: &Dataset) -> Result<(f64, Vec<LayerGrad>)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut h = data.x.clone();
        for layer in &self.layers {
            if layer.feature != FeatureRule::Inner {
                return Err(OftError::InvalidConfig(
                    "only the inner-product feature rule is trainable".into(),
                ));
            }
            let w = layer.effective_weight()?;
            let pre = layer.pre_activation(&w, &h)?;
            let next = activate(layer.activation, &pre);
            inputs.push(h);
            pres.push(pre);
            weights.push(w);
            h = next;
        }
        let n = data.len() as f64;
        let resid = h.sub(&data.y)?;
        let loss = 0.5 * resid.frobenius_norm().powi(2) / n;
        let mut upstream = resid.scale(1.0 / n);

        let mut grads: Vec<LayerGrad> = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let d_pre = match layer.activation {
                Activation::Linear => upstream,
                Activation::Relu => {
                    let pre = &pres[k];
                    Mat::from_fn(pre.rows(), pre.cols(), |r, c| {
                        if pre.get(r, c) > 0.0 {
                            upstream.get(r, c)
                        } else {
                            0.0
                        }
                    })
                }
            };
            let weight = matmul_nt(&inputs[k], &d_pre)?;
            let bias = layer
                .bias
                .as_ref()
                .map(|_| (0..d_pre.rows()).map(|r| d_pre.row(r).iter().sum()).collect());
            if k > 0 {
                upstream = matmul(&weights[k], &d_pre)?;
            } else {
                upstream = d_pre;
            }
            grads.push(LayerGrad { weight, bias });
        }
        grads.reverse();
        Ok((loss, grads))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Which adapter parameters a run may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    All,
    /// Only the rescaling `θ`; skew parameters stay frozen.
    ScalesOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub log_every: usize,
    pub trainable: Trainable,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            steps: 500,
            optimizer: Optimizer::adam(),
            seed: 0,
            log_every: 1,
            trainable: Trainable::All,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(OftError::InvalidConfig(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.log_every == 0 {
            return Err(OftError::InvalidConfig("log_every must be at least 1".into()));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            let unit = |b: f64| (0.0..1.0).contains(&b);
            if !(unit(beta1) && unit(beta2) && eps > 0.0) {
                return Err(OftError::InvalidConfig("adam needs beta in [0,1) and eps > 0".into()));
            }
        }
        Ok(())
    }
}

/// Experiment settings as read from a `key = value` file (TOML syntax).
/// Every key is optional; unknown keys are rejected.
///
/// ```text
/// mode = "coft"        # oft | coft | rescaled_oft
/// r = 4
/// shared = false
/// eps_prime = 1e-3     # coft only
/// lr = 1e-3
/// steps = 200
/// seed = 0
/// optimizer = "adam"   # adam | sgd
/// log_every = 1
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: String,
    pub r: usize,
    pub shared: bool,
    pub eps_prime: Option<f64>,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: String,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub log_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let cfg = TrainConfig::default();
        ExperimentConfig {
            mode: "oft".into(),
            r: 4,
            shared: false,
            eps_prime: None,
            lr: cfg.lr,
            steps: cfg.steps,
            seed: cfg.seed,
            optimizer: "adam".into(),
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            log_every: cfg.log_every,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| OftError::Parse(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| OftError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Adapter mode, rejecting `eps_prime` outside coft and coft without it.
    pub fn adapter_mode(&self) -> Result<Mode<f64>> {
        let mode = match (self.mode.as_str(), self.eps_prime) {
            ("oft", None) => Mode::Oft,
            ("rescaled_oft" | "rescaled", None) => Mode::Rescaled,
            ("coft", Some(eps_prime)) => Mode::Coft { eps_prime },
            ("coft", None) => return Err(OftError::InvalidConfig("coft mode requires eps_prime".into())),
            ("oft" | "rescaled_oft" | "rescaled", Some(_)) => {
                return Err(OftError::InvalidConfig(format!("eps_prime is only valid with coft, not {}", self.mode)))
            }
            (other, _) => {
                return Err(OftError::InvalidConfig(format!(
                    "unknown mode {other:?} (expected oft, coft or rescaled_oft)"
                )))
            }
        };
        if let Mode::Coft { eps_prime } = mode {
            if !(eps_prime > 0.0 && eps_prime.is_finite()) {
                return Err(OftError::InvalidConfig(format!("eps_prime must be positive, got {eps_prime}")));
            }
        }
        Ok(mode)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let optimizer = match self.optimizer.as_str() {
            "sgd" => Optimizer::Sgd,
            "adam" => Optimizer::Adam {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps_adam,
            },
            other => return Err(OftError::InvalidConfig(format!("unknown optimizer {other:?} (expected adam or sgd)"))),
        };
        let cfg = TrainConfig {
            lr: self.lr,
            steps: self.steps,
            optimizer,
            seed: self.seed,
            log_every: self.log_every,
            trainable: Trainable::All,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every field without running anything.
    pub fn validate(&self) -> Result<()> {
        self.adapter_mode()?;
        self.train_config()?;
        if self.r == 0 {
            return Err(OftError::InvalidConfig("r must be at least 1".into()));
        }
        Ok(())
    }
}

/// Optimizer state over the flattened trainable parameters.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    fn update(&mut self, cfg: &TrainConfig, params: &mut [f64], grad: &[f64], mask: &[bool]) {
        match cfg.optimizer {
            Optimizer::Sgd => {
                for ((p, &g), &on) in params.iter_mut().zip(grad).zip(mask) {
                    if on {
                        *p -= cfg.lr * g;
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                if self.m.len() != params.len() {
                    self.m = vec![0.0; params.len()];
                    self.v = vec![0.0; params.len()];
                    self.t = 0;
                }
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for k in 0..params.len() {
                    if !mask[k] {
                        continue;
                    }
                    let g = grad[k];
                    self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g;
                    self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[k] / c1;
                    let v_hat = self.v[k] / c2;
                    params[k] -= cfg.lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

fn layer_params(layer: &Layer) -> Vec<f64> {
    match &layer.update {
        LayerUpdate::Frozen => Vec::new(),
        LayerUpdate::Orthogonal(a) => a.params(),
        LayerUpdate::LowRank(lr) => [lr.u.as_slice(), lr.v.as_slice()].concat(),
    }
}

fn layer_mask(layer: &Layer, trainable: Trainable) -> Vec<bool> {
    match (&layer.update, trainable) {
        (LayerUpdate::Frozen, _) => Vec::new(),
        (LayerUpdate::Orthogonal(a), Trainable::ScalesOnly) => {
            let mut m = vec![false; a.num_skew_params()];
            m.resize(a.num_params(), true);
            m
        }
        (LayerUpdate::Orthogonal(a), Trainable::All) => vec![true; a.num_params()],
        (LayerUpdate::LowRank(lr), Trainable::All) => vec![true; lr.num_params()],
        (LayerUpdate::LowRank(lr), Trainable::ScalesOnly) => vec![false; lr.num_params()],
    }
}

fn set_layer_params(layer: &mut Layer, params: &[f64]) -> Result<()> {
    match &mut layer.update {
        LayerUpdate::Frozen => Ok(()),
        LayerUpdate::Orthogonal(a) => {
            a.set_params(params)?;
            if let Mode::Coft { .. } = a.mode() {
                a.project_in_place()?;
            }
            Ok(())
        }
        LayerUpdate::LowRank(lr) => {
            let k = lr.u.as_slice().len();
            lr.u.as_mut_slice().copy_from_slice(&params[..k]);
            lr.v.as_mut_slice().copy_from_slice(&params[k..]);
            Ok(())
        }
    }
}

fn update_grad(layer: &Layer, g: &LayerGrad) -> Result<Vec<f64>> {
    match &layer.update {
        LayerUpdate::Frozen => Ok(Vec::new()),
        LayerUpdate::Orthogonal(a) => grad_from_weight_grad(a, &layer.w0, &g.weight),
        LayerUpdate::LowRank(lr) => {
            let gu = matmul_nt(&g.weight, &lr.v)?;
            let gv = matmul_tn(&lr.u, &g.weight)?;
            Ok([gu.as_slice(), gv.as_slice()].concat())
        }
    }
}

fn check_loss(step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(OftError::NonFiniteLoss { step, loss });
    }
    if loss > DIVERGENCE_LOSS {
        return Err(OftError::Divergence { step, loss });
    }
    Ok(())
}

/// Flattened trainable parameters of every adapted layer plus the gradient
/// of the loss with respect to them.
pub fn loss_and_grad(model: &ToyModel, data: &Dataset) -> Result<(f64, Vec<f64>)> {
    let (loss, grads) = model.backprop(data)?;
    let mut flat = Vec::new();
    for (layer, g) in model.layers.iter().zip(&grads) {
        flat.extend(update_grad(layer, g)?);
    }
    Ok((loss, flat))
}

/// Flattened trainable parameters of every adapted layer.
pub fn trainable_params(model: &ToyModel) -> Vec<f64> {
    model.layers.iter().flat_map(layer_params).collect()
}

pub fn set_trainable_params(model: &mut ToyModel, params: &[f64]) -> Result<()> {
    let mut offset = 0;
    for layer in &mut model.layers {
        let k = layer_params(layer).len();
        if offset + k > params.len() {
            return Err(OftError::dims("set_trainable_params", offset + k, params.len()));
        }
        set_layer_params(layer, &params[offset..offset + k])?;
        offset += k;
    }
    if offset != params.len() {
        return Err(OftError::dims("set_trainable_params", offset, params.len()));
    }
    Ok(())
}

/// One optimizer step on the adapter parameters. Frozen weights are not
/// touched; coft adapters are projected back into their ball. Returns the
/// loss at the pre-step parameters.
pub fn step(
    model: &mut ToyModel,
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    batch: &Dataset,
    step_index: usize,
) -> Result<f64> {
    let (loss, grad) = loss_and_grad(model, batch)?;
    check_loss(step_index, loss)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(OftError::NonFiniteLoss { step: step_index, loss });
    }
    let mask: Vec<bool> = model.layers.iter().flat_map(|l| layer_mask(l, cfg.trainable)).collect();
    let mut params = trainable_params(model);
    state.update(cfg, &mut params, &grad, &mask);
    set_trainable_params(model, &params)?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: usize,
    pub loss: f64,
    /// Largest relative energy change over adapted layers.
    pub he_rel_diff: f64,
    /// Largest `‖Q‖_F` over orthogonal adapters (0 if none).
    pub q_norm: f64,
    /// Largest `‖R − I‖_F` over orthogonal adapters (0 if none).
    pub r_dev: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub task: String,
    pub steps: usize,
    pub num_records: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub max_he_rel_diff: f64,
    pub max_q_norm: f64,
    pub max_r_dev: f64,
}

impl RunLog {
    pub fn last(&self) -> Option<&RunRecord> {
        self.records.last()
    }

    pub fn max_of(&self, f: impl Fn(&RunRecord) -> f64) -> f64 {
        self.records.iter().map(f).fold(0.0, f64::max)
    }

    pub fn summary(&self, seed: u64, task: &str) -> RunSummary {
        RunSummary {
            seed,
            task: task.to_string(),
            steps: self.last().map_or(0, |r| r.step),
            num_records: self.records.len(),
            initial_loss: self.records.first().map_or(f64::NAN, |r| r.loss),
            final_loss: self.last().map_or(f64::NAN, |r| r.loss),
            max_he_rel_diff: self.max_of(|r| r.he_rel_diff),
            max_q_norm: self.max_of(|r| r.q_norm),
            max_r_dev: self.max_of(|r| r.r_dev),
        }
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r).map_err(|e| OftError::Parse(e.to_string()))?;
        }
        w.flush().map_err(|e| OftError::Parse(e.to_string()))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| OftError::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn read_csv(input: impl std::io::Read) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let records = r
            .deserialize()
            .collect::<std::result::Result<Vec<RunRecord>, _>>()
            .map_err(|e| OftError::Parse(e.to_string()))?;
        Ok(RunLog { records })
    }
}

fn diagnostics(model: &ToyModel) -> Result<(f64, f64, f64)> {
    let mut he = 0.0f64;
    let mut q = 0.0f64;
    let mut dev = 0.0f64;
    for layer in &model.layers {
        match &layer.update {
            LayerUpdate::Frozen => continue,
            LayerUpdate::Orthogonal(a) => {
                q = q.max(a.skew_norm());
                dev = dev.max(a.rotation_deviation()?);
            }
            LayerUpdate::LowRank(_) => {}
        }
        let rep = energy::compare(&layer.w0, &layer.effective_weight()?)?;
        he = he.max(rep.rel_diff);
    }
    Ok((he, q, dev))
}

/// Runs `cfg.steps` full-batch steps, logging step 0, every
/// `cfg.log_every`-th step and the final state. Record `k` describes the
/// parameters after `k` updates.
pub fn train(model: &mut ToyModel, cfg: &TrainConfig, data: &Dataset) -> Result<RunLog> {
    cfg.validate()?;
    let mut state = OptimizerState::default();
    let mut log = RunLog::default();
    let record = |model: &ToyModel, step: usize, loss: f64| -> Result<RunRecord> {
        let (he_rel_diff, q_norm, r_dev) = diagnostics(model)?;
        Ok(RunRecord {
            step,
            loss,
            he_rel_diff,
            q_norm,
            r_dev,
        })
    };
    for k in 0..cfg.steps {
        if k % cfg.log_every == 0 {
            let loss = model.loss(data)?;
            check_loss(k, loss)?;
            log.records.push(record(model, k, loss)?);
        }
        step(model, cfg, &mut state, data, k)?;
    }
    let loss = model.loss(data)?;
    check_loss(cfg.steps, loss)?;
    if log.last().is_none_or(|r| r.step != cfg.steps) {
        log.records.push(record(model, cfg.steps, loss)?);
    }
    Ok(log)
}

/// Freezes the rotations and fits per-neuron magnitudes only. Orthogonal
/// adapters are switched to rescaled mode (zero log scales added where
/// missing) before fitting.
pub fn post_stage_magnitude_fit(
    mut model: ToyModel,
    cfg: &TrainConfig,
    data: &Dataset,
) -> Result<(ToyModel, RunLog)> {
    for layer in &mut model.layers {
        if let LayerUpdate::Orthogonal(a) = &layer.update {
            layer.update = LayerUpdate::Orthogonal(a.clone().into_rescaled());
        }
    }
    let cfg = TrainConfig {
        trainable: Trainable::ScalesOnly,
        ..*cfg
    };
    let log = train(&mut model, &cfg, data)?;
    Ok((model, log))
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Two-layer `relu` teacher/student task shapes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyTaskSpec {
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
    pub samples: usize,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        ToyTaskSpec {
            d_in: 16,
            hidden: 16,
            d_out: 8,
            samples: 128,
            pretrain_steps: 1500,
            pretrain_lr: 1e-2,
        }
    }
}

fn teacher_targets(t1: &Mat, t2: &Mat, x: &Mat) -> Result<Mat> {
    let h = matmul_tn(t1, x)?;
    let h = activate(Activation::Relu, &h);
    matmul_tn(t2, &h)
}

/// Pretrained toy model, its pretraining data and the shifted finetuning
/// task. The shifted teacher rotates the first-layer teacher neurons and
/// perturbs the readout, so the student must re-orient its hidden neurons.
pub fn pretrained_toy_model(seed: u64, spec: &ToyTaskSpec) -> Result<(ToyModel, Dataset, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t1 = gaussian(spec.d_in, spec.hidden, 1.0 / (spec.d_in as f64).sqrt(), &mut rng);
    let t2 = gaussian(spec.hidden, spec.d_out, 1.0 / (spec.hidden as f64).sqrt(), &mut rng);
    let x = gaussian(spec.d_in, spec.samples, 1.0, &mut rng);
    let pre_data = Dataset::new(x.clone(), teacher_targets(&t1, &t2, &x)?)?;

    let l1 = Layer::new(
        gaussian(spec.d_in, spec.hidden, 1.0 / (spec.d_in as f64).sqrt(), &mut rng),
        Some(vec![0.0; spec.hidden]),
        Activation::Relu,
    )?;
    let l2 = Layer::new(
        gaussian(spec.hidden, spec.d_out, 1.0 / (spec.hidden as f64).sqrt(), &mut rng),
        Some(vec![0.0; spec.d_out]),
        Activation::Linear,
    )?;
    let mut model = ToyModel::new(vec![l1, l2], seed, "pretrain")?;
    pretrain(&mut model, &pre_data, spec.pretrain_steps, spec.pretrain_lr)?;
    model.set_task("shifted");

    let mut rot = crate::adapter::OrthoTransform::new(spec.d_in, 1, false)?;
    let p: Vec<f64> = (0..rot.num_params()).map(|_| 0.15 * rng.sample::<f64, _>(StandardNormal)).collect();
    rot.set_params(&p)?;
    let t1_shift = rot.apply_left(&t1)?;
    let x_ft = gaussian(spec.d_in, spec.samples, 1.0, &mut rng);
    let ft_data = Dataset::new(x_ft.clone(), teacher_targets(&t1_shift, &t2, &x_ft)?)?;
    Ok((model, pre_data, ft_data))
}

/// Full-batch Adam on every frozen weight and bias; used only to build the
/// pretrained model before any adapter is attached.
pub fn pretrain(model: &mut ToyModel, data: &Dataset, steps: usize, lr: f64) -> Result<f64> {
    let cfg = TrainConfig {
        lr,
        steps,
        ..TrainConfig::default()
    };
    let mut state = OptimizerState::default();
    let flatten = |m: &ToyModel| -> Vec<f64> {
        m.layers
            .iter()
            .flat_map(|l| {
                let mut v = l.w0.as_slice().to_vec();
                v.extend(l.bias.iter().flatten());
                v
            })
            .collect()
    };
    let mut params = flatten(model);
    let mask = vec![true; params.len()];
    let mut loss = f64::NAN;
    for k in 0..steps {
        let (l, grads) = model.backprop(data)?;
        check_loss(k, l)?;
        loss = l;
        let g: Vec<f64> = grads
            .iter()
            .flat_map(|g| {
                let mut v = g.weight.as_slice().to_vec();
                v.extend(g.bias.iter().flatten());
                v
            })
            .collect();
        state.update(&cfg, &mut params, &g, &mask);
        let mut off = 0;
        for layer in &mut model.layers {
            let k = layer.w0.as_slice().len();
            layer.w0.as_mut_slice().copy_from_slice(&params[off..off + k]);
            off += k;
            if let Some(b) = &mut layer.bias {
                let nb = b.len();
                b.copy_from_slice(&params[off..off + nb]);
                off += nb;
            }
        }
    }
    Ok(loss)
}

/// Outcome of the energy-drift comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftResult {
    pub seed: u64,
    pub oft: RunLog,
    pub baseline: RunLog,
    pub oft_final_loss: f64,
    pub baseline_final_loss: f64,
    /// First logged baseline step whose loss is at or below the larger of
    /// the two final losses: the OFT final loss if the baseline reaches it,
    /// otherwise the baseline's own final step.
    pub matched_step: usize,
    pub baseline_he_rel_diff_at_match: f64,
    pub oft_max_he_rel_diff: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftSettings {
    pub steps: usize,
    pub num_blocks: usize,
    pub rank: usize,
    pub lr: f64,
    pub log_every: usize,
}

impl Default for DriftSettings {
    fn default() -> Self {
        DriftSettings {
            steps: 500,
            num_blocks: 2,
            rank: 4,
            lr: 1e-3,
            log_every: 1,
        }
    }
}

/// Finetunes the hidden layer of the pretrained toy model once with an
/// orthogonal adapter and once with a rank-`rank` additive update, same
/// optimizer and data.
pub fn run_energy_drift(seed: u64, settings: &DriftSettings) -> Result<DriftResult> {
    let spec = ToyTaskSpec::default();
    let (base, _, data) = pretrained_toy_model(seed, &spec)?;
    let cfg = TrainConfig {
        lr: settings.lr,
        steps: settings.steps,
        seed,
        log_every: settings.log_every,
        ..TrainConfig::default()
    };

    let mut oft_model = base.clone();
    oft_model.attach_adapter(0, Adapter::oft(spec.d_in, spec.hidden, settings.num_blocks)?)?;
    let oft = train(&mut oft_model, &cfg, &data)?;

    let mut lr_model = base;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    lr_model.attach_low_rank(0, settings.rank, &mut rng)?;
    let baseline = train(&mut lr_model, &cfg, &data)?;

    let oft_final_loss = oft.last().map_or(f64::NAN, |r| r.loss);
    let matched = baseline
        .records
        .iter()
        .find(|r| r.loss <= oft_final_loss)
        .or(baseline.last())
        .copied()
        .expect("non-empty run log");
    Ok(DriftResult {
        seed,
        oft_final_loss,
        baseline_final_loss: baseline.last().map_or(f64::NAN, |r| r.loss),
        matched_step: matched.step,
        baseline_he_rel_diff_at_match: matched.he_rel_diff,
        oft_max_he_rel_diff: oft.max_of(|r| r.he_rel_diff),
        oft,
        baseline,
    })
}

pub fn run_energy_drift_experiment(seed: u64) -> Result<DriftResult> {
    run_energy_drift(seed, &DriftSettings::default())
}

/// Constrained finetuning of the toy model's hidden layer, logged every step.
pub fn run_coft_experiment(seed: u64, eps_prime: f64, steps: usize, num_blocks: usize) -> Result<RunLog> {
    let spec = ToyTaskSpec::default();
    let (mut model, _, data) = pretrained_toy_model(seed, &spec)?;
    model.attach_adapter(0, Adapter::coft(spec.d_in, spec.hidden, num_blocks, eps_prime)?)?;
    let cfg = TrainConfig {
        steps,
        seed,
        log_every: 1,
        ..TrainConfig::default()
    };
    train(&mut model, &cfg, &data)
}

/// Final finetuning loss (on the full shifted task) when the orthogonal
/// adapter only sees the first `fraction` of the samples. Logged only; no
/// threshold is attached.
pub fn run_data_fraction_sweep(seed: u64, fractions: &[f64], steps: usize) -> Result<Vec<(f64, f64)>> {
    let spec = ToyTaskSpec::default();
    let (base, _, data) = pretrained_toy_model(seed, &spec)?;
    let cfg = TrainConfig {
        steps,
        seed,
        log_every: steps.max(1),
        ..TrainConfig::default()
    };
    fractions
        .iter()
        .map(|&f| {
            if !(f > 0.0 && f <= 1.0) {
                return Err(OftError::InvalidConfig(format!("data fraction {f} not in (0, 1]")));
            }
            let k = ((f * data.len() as f64).round() as usize).max(1);
            let subset = Dataset::new(
                Mat::from_fn(data.x.rows(), k, |r, c| data.x.get(r, c)),
                Mat::from_fn(data.y.rows(), k, |r, c| data.y.get(r, c)),
            )?;
            let mut model = base.clone();
            model.attach_adapter(0, Adapter::oft(spec.d_in, spec.hidden, 2)?)?;
            train(&mut model, &cfg, &subset)?;
            Ok((f, model.loss(&data)?))
        })
        .collect()
}

/// Reconstruction errors of the angle/magnitude feature study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fig2Result {
    pub seed: u64,
    pub mse_inner: f64,
    pub mse_angle: f64,
    pub mse_magnitude: f64,
    pub untrained_mse_inner: f64,
    pub untrained_mse_angle: f64,
    pub untrained_mse_magnitude: f64,
}

impl Fig2Result {
    /// Desk-scale threshold for `mse_angle / mse_magnitude`.
    pub const ANGLE_RATIO: f64 = 0.25;

    pub fn angle_beats_magnitude(&self) -> bool {
        self.mse_angle <= Self::ANGLE_RATIO * self.mse_magnitude
    }

    pub fn inner_is_best(&self) -> bool {
        self.mse_inner <= self.mse_angle
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fig2Settings {
    pub images: usize,
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub init_scale: f64,
}

impl Default for Fig2Settings {
    fn default() -> Self {
        Fig2Settings {
            images: 200,
            hidden: 32,
            steps: 2000,
            lr: 1e-2,
            init_scale: 0.05,
        }
    }
}

/// `count` smooth 8x8 patterns (sums of low-frequency plane waves), one
/// per column, each scaled to unit norm.
pub fn smooth_patterns(count: usize, rng: &mut impl Rng) -> Mat {
    let mut out = Mat::zeros(64, count);
    let tau = std::f64::consts::TAU;
    for c in 0..count {
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0..=2) as f64,
                    rng.gen_range(0..=2) as f64,
                    rng.gen_range(0.0..tau),
                )
            })
            .collect();
        let mut col = [0.0f64; 64];
        for (p, v) in col.iter_mut().enumerate() {
            let (y, x) = ((p / 8) as f64, (p % 8) as f64);
            *v = waves
                .iter()
                .map(|&(a, fx, fy, ph)| a * (tau * (fx * x + fy * y) / 8.0 + ph).cos())
                .sum();
        }
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for (p, v) in col.iter().enumerate() {
            out.set(p, c, v / norm);
        }
    }
    out
}

fn reconstruction_mse(model: &mut ToyModel, images: &Mat, rule: FeatureRule) -> Result<f64> {
    model.layer_mut(0).set_feature(rule);
    let out = model.forward(images)?;
    model.layer_mut(0).set_feature(FeatureRule::Inner);
    let r = out.sub(images)?.frobenius_norm();
    Ok(r * r / (images.rows() * images.cols()) as f64)
}

/// Trains a bias-free `64 → hidden → 64` autoencoder with inner-product
/// features and measures reconstruction when the encoder's feature rule is
/// swapped for the angle-only or magnitude-only rule.
pub fn run_fig2(seed: u64, settings: &Fig2Settings) -> Result<Fig2Result> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = smooth_patterns(settings.images, &mut rng);
    let enc = Layer::new(gaussian(64, settings.hidden, settings.init_scale, &mut rng), None, Activation::Relu)?;
    let dec = Layer::new(gaussian(settings.hidden, 64, settings.init_scale, &mut rng), None, Activation::Linear)?;
    let mut model = ToyModel::new(vec![enc, dec], seed, "fig2-autoencoder")?;

    let untrained = [FeatureRule::Inner, FeatureRule::Cosine, FeatureRule::Magnitude]
        .map(|rule| reconstruction_mse(&mut model, &images, rule));
    let data = Dataset::new(images.clone(), images.clone())?;
    pretrain(&mut model, &data, settings.steps, settings.lr)?;
    let trained = [FeatureRule::Inner, FeatureRule::Cosine, FeatureRule::Magnitude]
        .map(|rule| reconstruction_mse(&mut model, &images, rule));
    let [ui, ua, um] = untrained;
    let [ti, ta, tm] = trained;
    Ok(Fig2Result {
        seed,
        mse_inner: ti?,
        mse_angle: ta?,
        mse_magnitude: tm?,
        untrained_mse_inner: ui?,
        untrained_mse_angle: ua?,
        untrained_mse_magnitude: um?,
    })
}

pub fn run_fig2_experiment(seed: u64) -> Result<Fig2Result> {
    run_fig2(seed, &Fig2Settings::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_model(d: usize, n: usize, seed: u64) -> ToyModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = Layer::new(gaussian(d, n, 1.0, &mut rng), None, Activation::Linear).unwrap();
        ToyModel::new(vec![layer], seed, "linear").unwrap()
    }

    fn random_data(d: usize, n: usize, count: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Dataset::new(gaussian(d, count, 1.0, &mut rng), gaussian(n, count, 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let spec = ToyTaskSpec {
            pretrain_steps: 50,
            ..ToyTaskSpec::default()
        };
        let (mut model, _, data) = pretrained_toy_model(3, &spec).unwrap();
        let mut a = Adapter::rescaled(16, 16, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p: Vec<f64> = (0..a.num_params()).map(|_| rng.gen_range(-0.3..0.3)).collect();
        a.set_params(&p).unwrap();
        model.attach_adapter(0, a).unwrap();
        let (_, g) = loss_and_grad(&model, &data).unwrap();
        let base = trainable_params(&model);
        let h = 1e-6;
        for k in (0..base.len()).step_by(7) {
            let mut probe = model.clone();
            let mut p = base.clone();
            p[k] += h;
            set_trainable_params(&mut probe, &p).unwrap();
            let plus = probe.loss(&data).unwrap();
            p[k] -= 2.0 * h;
            set_trainable_params(&mut probe, &p).unwrap();
            let minus = probe.loss(&data).unwrap();
            let fd = (plus - minus) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-5 * fd.abs().max(1e-3), "param {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn low_rank_gradients_match_finite_differences() {
        let mut model = linear_model(6, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        model.attach_low_rank(0, 2, &mut rng).unwrap();
        let mut p = trainable_params(&model);
        p.iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
        set_trainable_params(&mut model, &p).unwrap();
        let data = random_data(6, 4, 10, 3);
        let (_, g) = loss_and_grad(&model, &data).unwrap();
        for k in 0..p.len() {
            let mut probe = model.clone();
            let mut q = p.clone();
            q[k] += 1e-6;
            set_trainable_params(&mut probe, &q).unwrap();
            let plus = probe.loss(&data).unwrap();
            q[k] -= 2e-6;
            set_trainable_params(&mut probe, &q).unwrap();
            let minus = probe.loss(&data).unwrap();
            let fd = (plus - minus) / 2e-6;
            assert!((fd - g[k]).abs() <= 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn zero_learning_rate_leaves_model_unchanged() {
        let mut model = linear_model(4, 3, 5);
        model.attach_adapter(0, Adapter::oft(4, 3, 2).unwrap()).unwrap();
        let data = random_data(4, 3, 8, 6);
        let before = model.clone();
        let cfg = TrainConfig { lr: 0.0, steps: 3, ..TrainConfig::default() };
        let log = train(&mut model, &cfg, &data).unwrap();
        assert_eq!(model, before);
        assert_eq!(log.records.len(), 4);
        assert!(log.records.iter().all(|r| r.loss == log.records[0].loss));
    }

    #[test]
    fn sgd_step_is_minus_lr_times_gradient() {
        let mut model = linear_model(4, 3, 7);
        let mut a = Adapter::rescaled(4, 3, 1).unwrap();
        a.set_params(&[0.1, -0.2, 0.05, 0.3, 0.0, 0.1, 0.2, -0.1, 0.05]).unwrap();
        model.attach_adapter(0, a).unwrap();
        let data = random_data(4, 3, 8, 8);
        let (_, g) = loss_and_grad(&model, &data).unwrap();
        let before = trainable_params(&model);
        let cfg = TrainConfig { lr: 0.01, optimizer: Optimizer::Sgd, ..TrainConfig::default() };
        step(&mut model, &cfg, &mut OptimizerState::default(), &data, 0).unwrap();
        for ((a, b), g) in trainable_params(&model).iter().zip(&before).zip(&g) {
            assert!((a - (b - 0.01 * g)).abs() <= 1e-12);
        }
    }

    #[test]
    fn frozen_weights_stay_bit_identical() {
        let spec = ToyTaskSpec { pretrain_steps: 20, ..ToyTaskSpec::default() };
        let (mut model, _, data) = pretrained_toy_model(1, &spec).unwrap();
        let frozen = model.frozen_state();
        model.attach_adapter(0, Adapter::oft(16, 16, 4).unwrap()).unwrap();
        model.attach_adapter(1, Adapter::rescaled(16, 8, 2).unwrap()).unwrap();
        let cfg = TrainConfig { lr: 1e-2, steps: 20, ..TrainConfig::default() };
        train(&mut model, &cfg, &data).unwrap();
        assert_eq!(model.frozen_state(), frozen);
        assert_ne!(trainable_params(&model), vec![0.0; trainable_params(&model).len()]);
    }

    #[test]
    fn coft_steps_stay_in_ball() {
        let eps = 1e-3;
        let log = run_coft_experiment(0, eps, 100, 2).unwrap();
        assert_eq!(log.records.len(), 101);
        for r in &log.records {
            assert!(r.q_norm <= eps, "{r:?}");
            assert!(r.r_dev <= 2.0 * eps + 10.0 * eps * eps, "{r:?}");
        }
        assert!(log.last().unwrap().q_norm > 0.99 * eps, "constraint should be active");
    }

    #[test]
    fn runs_are_deterministic() {
        let settings = DriftSettings { steps: 30, ..DriftSettings::default() };
        let a = run_energy_drift(4, &settings).unwrap();
        let b = run_energy_drift(4, &settings).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.oft.records[0].he_rel_diff, 0.0);
        assert_eq!(a.baseline.records[0].he_rel_diff, 0.0);
    }

    #[test]
    fn magnitude_fit_recovers_doubling() {
        let model = linear_model(5, 4, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = gaussian(5, 40, 1.0, &mut rng);
        let y = model.forward(&x).unwrap().scale(2.0);
        let data = Dataset::new(x, y).unwrap();
        let mut m = model.clone();
        m.attach_adapter(0, Adapter::oft(5, 4, 5).unwrap()).unwrap();
        let cfg = TrainConfig { lr: 0.01, steps: 3000, log_every: 10, optimizer: Optimizer::Sgd, ..TrainConfig::default() };
        let (fitted, log) = post_stage_magnitude_fit(m, &cfg, &data).unwrap();
        for s in fitted.layers()[0].adapter().unwrap().scales() {
            assert!((s - 2.0).abs() <= 1e-3, "scale {s}");
        }
        for w in log.records.windows(2) {
            assert!(w[1].loss <= w[0].loss);
        }
        assert!(log.max_of(|r| r.he_rel_diff) <= 1e-8);
    }

    #[test]
    fn magnitude_fit_freezes_rotation() {
        let spec = ToyTaskSpec { pretrain_steps: 20, ..ToyTaskSpec::default() };
        let (mut model, _, data) = pretrained_toy_model(2, &spec).unwrap();
        model.attach_adapter(0, Adapter::coft(16, 16, 2, 0.05).unwrap()).unwrap();
        let cfg = TrainConfig { lr: 1e-2, steps: 30, ..TrainConfig::default() };
        train(&mut model, &cfg, &data).unwrap();
        let q_before = model.layers()[0].adapter().unwrap().transform().params();

        let zero = TrainConfig { steps: 0, ..cfg };
        let (same, _) = post_stage_magnitude_fit(model.clone(), &zero, &data).unwrap();
        assert_eq!(same.layers()[0].adapter().unwrap().transform().params(), q_before);

        let fit = TrainConfig { lr: 1e-3, steps: 50, optimizer: Optimizer::Sgd, ..cfg };
        let (fitted, log) = post_stage_magnitude_fit(model, &fit, &data).unwrap();
        let a = fitted.layers()[0].adapter().unwrap();
        assert_eq!(a.transform().params(), q_before);
        assert_eq!(a.mode(), Mode::Rescaled);
        for w in log.records.windows(2) {
            assert!(w[1].loss <= w[0].loss);
        }
        assert!(log.max_of(|r| r.he_rel_diff) <= 1e-8);
    }

    #[test]
    fn run_log_csv_roundtrip() {
        let log = RunLog {
            records: vec![
                RunRecord { step: 0, loss: 1.5, he_rel_diff: 0.0, q_norm: 0.0, r_dev: 0.0 },
                RunRecord { step: 1, loss: 1.25, he_rel_diff: 1e-12, q_norm: 1e-3, r_dev: 2e-3 },
            ],
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step,loss,he_rel_diff,q_norm,r_dev\n"));
        assert_eq!(RunLog::read_csv(&buf[..]).unwrap(), log);
    }

    #[test]
    fn divergence_is_reported() {
        let mut model = linear_model(3, 2, 1);
        model.attach_adapter(0, Adapter::rescaled(3, 2, 1).unwrap()).unwrap();
        let mut data = random_data(3, 2, 5, 2);
        data.y = data.y.scale(1e4);
        let err = train(&mut model, &TrainConfig::default(), &data).unwrap_err();
        assert!(matches!(err, OftError::Divergence { step: 0, .. }), "{err:?}");

        let data = random_data(3, 2, 5, 2);
        let cfg = TrainConfig { lr: 50.0, steps: 200, optimizer: Optimizer::Sgd, ..TrainConfig::default() };
        assert!(train(&mut model, &cfg, &data).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { lr: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { log_every: 0, ..TrainConfig::default() }.validate().is_err());
        let bad = Optimizer::Adam { beta1: 1.0, beta2: 0.9, eps: 1e-8 };
        assert!(TrainConfig { optimizer: bad, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn experiment_config_parsing() {
        let cfg = ExperimentConfig::from_toml_str(
            "mode = \"coft\"\neps_prime = 1e-3\nr = 2\nsteps = 10\noptimizer = \"sgd\"\n",
        )
        .unwrap();
        assert_eq!(cfg.adapter_mode().unwrap(), Mode::Coft { eps_prime: 1e-3 });
        assert_eq!(cfg.train_config().unwrap().optimizer, Optimizer::Sgd);
        assert_eq!(cfg.seed, 0);
        assert!(ExperimentConfig::from_toml_str("mode = \"coft\"").unwrap().validate().is_err());
        assert!(ExperimentConfig::from_toml_str("eps_prime = 0.1").unwrap().validate().is_err());
        assert!(ExperimentConfig::from_toml_str("learning_rate = 0.1").is_err());
        assert!(ExperimentConfig::from_toml_str("mode = \"lora\"").unwrap().validate().is_err());
    }

    #[test]
    fn data_fraction_sweep_is_finite() {
        let out = run_data_fraction_sweep(0, &[0.05, 1.0], 20).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|(_, l)| l.is_finite()));
        assert!(run_data_fraction_sweep(0, &[0.0], 1).is_err());
    }

    #[test]
    fn untrained_autoencoder_rules_agree() {
        let r = run_fig2(0, &Fig2Settings { steps: 0, ..Fig2Settings::default() }).unwrap();
        let v = [r.untrained_mse_inner, r.untrained_mse_angle, r.untrained_mse_magnitude];
        let (lo, hi) = (v.iter().cloned().fold(f64::MAX, f64::min), v.iter().cloned().fold(0.0, f64::max));
        assert!(hi <= 2.0 * lo, "{v:?}");
    }
}
