//! Global (server-side) update rules applied once per communication round.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    compute_features, init_state, normalize_features, rms_normalize, AggregateState, DecayCoeffs,
    TensorFeatures, NUM_FEATURES,
};
use crate::local_sim::WorkerDeltas;
use crate::nn::truncated_normal;
use crate::rng::{purpose, RngStream};
use crate::tensor::ModelParams;

/// Step-size and magnitude multipliers of the learned update rule.
pub const LAMBDA1: f64 = 1e-3;
pub const LAMBDA2: f64 = 1e-3;
pub const HIDDEN: usize = 32;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

pub trait GlobalOptimizer: Send {
    fn name(&self) -> String;

    /// Next global weights from the current ones and this round's deltas.
    fn step(&mut self, w: &ModelParams, deltas: &WorkerDeltas) -> Result<ModelParams>;
}

/// `w - mean(delta)`, i.e. the mean of the workers' end points.
pub fn apply_average(w: &ModelParams, deltas: &WorkerDeltas) -> Result<ModelParams> {
    match &deltas.endpoint_mean {
        Some(mean) => {
            w.check_compatible(mean)?;
            Ok(mean.clone())
        }
        None => w.sub(&deltas.average),
    }
}

/// Plain local SGD.
#[derive(Clone, Copy, Debug, Default)]
pub struct LocalSgdAverage;

impl GlobalOptimizer for LocalSgdAverage {
    fn name(&self) -> String {
        "local_sgd".into()
    }

    fn step(&mut self, w: &ModelParams, deltas: &WorkerDeltas) -> Result<ModelParams> {
        apply_average(w, deltas)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlowMoHyper {
    /// Slow learning rate.
    pub alpha: f64,
    /// Slow momentum.
    pub beta: f64,
    /// Local learning rate the deltas were produced with.
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlowMoState {
    pub momentum: Option<ModelParams>,
    pub hyper: SlowMoHyper,
}

impl SlowMoState {
    pub fn new(hyper: SlowMoHyper) -> Self {
        Self {
            momentum: None,
            hyper,
        }
    }
}

/// Server momentum: `u' = beta * u + delta / gamma`, `w' = w - alpha * gamma * u'`.
pub fn apply_slowmo(state: &SlowMoState, w: &ModelParams, deltas: &WorkerDeltas) -> Result<(SlowMoState, ModelParams)> {
    let SlowMoHyper { alpha, beta, gamma } = state.hyper;
    let prev = state
        .momentum
        .clone()
        .unwrap_or_else(|| ModelParams::zeros_like(w));
    let u = prev.zip_map(&deltas.average, |u, d| beta * u + d / gamma)?;
    let next = w.zip_map(&u, |p, u| p - alpha * gamma * u)?;
    Ok((
        SlowMoState {
            momentum: Some(u),
            hyper: state.hyper,
        },
        next,
    ))
}

#[derive(Clone, Debug)]
pub struct SlowMo(pub SlowMoState);

impl SlowMo {
    pub fn new(hyper: SlowMoHyper) -> Self {
        Self(SlowMoState::new(hyper))
    }
}

impl GlobalOptimizer for SlowMo {
    fn name(&self) -> String {
        "slowmo".into()
    }

    fn step(&mut self, w: &ModelParams, deltas: &WorkerDeltas) -> Result<ModelParams> {
        let (state, next) = apply_slowmo(&self.0, w, deltas)?;
        self.0 = state;
        Ok(next)
    }
}

/// Which inputs the learned optimizer sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum Variant {
    /// Ada features plus the averaged delta (39 inputs).
    LoptA,
    /// Ada features plus every worker's delta (38 + K inputs).
    LaggA { workers: usize },
    /// Averaged delta only.
    LoptPlain,
    /// Worker deltas only.
    LaggPlain { workers: usize },
}

impl Variant {
    pub fn input_width(&self) -> usize {
        match *self {
            Variant::LoptA => NUM_FEATURES + 1,
            Variant::LaggA { workers } => NUM_FEATURES + workers,
            Variant::LoptPlain => 1,
            Variant::LaggPlain { workers } => workers,
        }
    }

    pub fn uses_ada(&self) -> bool {
        matches!(self, Variant::LoptA | Variant::LaggA { .. })
    }

    /// Worker count the variant is tied to, if any.
    pub fn workers(&self) -> Option<usize> {
        match *self {
            Variant::LaggA { workers } | Variant::LaggPlain { workers } => Some(workers),
            _ => None,
        }
    }

    pub fn name(&self) -> String {
        match self {
            Variant::LoptA => "lopt_a".into(),
            Variant::LaggA { workers } => format!("lagg_a(K={workers})"),
            Variant::LoptPlain => "lopt".into(),
            Variant::LaggPlain { workers } => format!("lagg(K={workers})"),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Variant::LoptA => "lopt_a",
            Variant::LaggA { .. } => "lagg_a",
            Variant::LoptPlain => "lopt_plain",
            Variant::LaggPlain { .. } => "lagg_plain",
        }
    }

    pub fn from_tag(tag: &str, workers: Option<usize>) -> Result<Self> {
        let need = |w: Option<usize>| {
            w.filter(|&k| k > 0)
                .ok_or_else(|| Error::Checkpoint(format!("variant `{tag}` needs a positive K")))
        };
        Ok(match tag {
            "lopt_a" => Variant::LoptA,
            "lopt_plain" => Variant::LoptPlain,
            "lagg_a" => Variant::LaggA { workers: need(workers)? },
            "lagg_plain" => Variant::LaggPlain { workers: need(workers)? },
            other => return Err(Error::Checkpoint(format!("unknown variant `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    #[serde(rename = "in")]
    pub inp: usize,
    pub out: usize,
    /// `inp x out`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn zeros(inp: usize, out: usize) -> Self {
        Self {
            inp,
            out,
            weights: vec![0.0; inp * out],
            bias: vec![0.0; out],
        }
    }

    fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// `rows x inp` -> `rows x out`
    fn forward(&self, x: &[f64], relu: bool) -> Vec<f64> {
        let rows = x.len() / self.inp;
        let mut y = vec![0.0; rows * self.out];
        for (xr, yr) in x.chunks_exact(self.inp).zip(y.chunks_exact_mut(self.out)) {
            yr.copy_from_slice(&self.bias);
            for (&xv, wr) in xr.iter().zip(self.weights.chunks_exact(self.out)) {
                if xv != 0.0 {
                    for (yv, &wv) in yr.iter_mut().zip(wr) {
                        *yv += xv * wv;
                    }
                }
            }
            if relu {
                yr.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        y
    }
}

/// Meta-parameters: a per-parameter MLP `n_in -> 32 -> 32 -> 2` (ReLU) plus
/// the raw decay coefficients of the Ada accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerParams {
    pub variant: Variant,
    pub layers: [DenseLayer; 3],
    pub betas_raw: [f64; 7],
}

/// Closed-form MLP size for input width `n_in`.
pub fn mlp_param_count(n_in: usize) -> usize {
    (n_in * HIDDEN + HIDDEN) + (HIDDEN * HIDDEN + HIDDEN) + (HIDDEN * 2 + 2)
}

impl OptimizerParams {
    /// All-zero MLP (the identity update rule); betas at their initial values.
    pub fn zeros(variant: Variant) -> Self {
        let n_in = variant.input_width();
        Self {
            variant,
            layers: [
                DenseLayer::zeros(n_in, HIDDEN),
                DenseLayer::zeros(HIDDEN, HIDDEN),
                DenseLayer::zeros(HIDDEN, 2),
            ],
            betas_raw: DecayCoeffs::initial_raw(),
        }
    }

    /// Truncated-normal weights with std `sqrt(1/fan_in)` (output layer scaled
    /// by `output_scale`), zero biases.
    pub fn init(variant: Variant, seed: u64, output_scale: f64) -> Self {
        let mut p = Self::zeros(variant);
        let root = RngStream::new(seed).derive(purpose::INIT);
        for (i, layer) in p.layers.iter_mut().enumerate() {
            let std = (1.0 / layer.inp as f64).sqrt() * if i == 2 { output_scale } else { 1.0 };
            let mut s = root.derive(i as u64);
            layer.weights.iter_mut().for_each(|w| *w = std * truncated_normal(&mut s));
        }
        p
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inp
    }

    /// Number of MLP weights and biases (decay coefficients excluded).
    pub fn mlp_param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::num_params).sum()
    }

    pub fn betas(&self) -> DecayCoeffs {
        DecayCoeffs::from_raw(&self.betas_raw)
    }

    /// Length of [`OptimizerParams::to_flat`]: the MLP, plus the raw betas for
    /// variants that use them.
    pub fn num_meta_params(&self) -> usize {
        self.mlp_param_count() + if self.variant.uses_ada() { 7 } else { 0 }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_meta_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        if self.variant.uses_ada() {
            out.extend_from_slice(&self.betas_raw);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_meta_params() {
            return Err(Error::Shape(format!(
                "flat meta-parameters have length {}, expected {}",
                flat.len(),
                self.num_meta_params()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        if self.variant.uses_ada() {
            self.betas_raw.copy_from_slice(&flat[off..off + 7]);
        }
        Ok(())
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let mut p = self.clone();
        p.set_flat(flat)?;
        Ok(p)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&Checkpoint::from(self))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&Checkpoint::from(self)).expect("checkpoint serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ck.try_into()
    }
}

/// On-disk form of [`OptimizerParams`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub variant: String,
    #[serde(rename = "K")]
    pub workers: Option<usize>,
    pub n_in: usize,
    pub param_count: usize,
    pub betas_raw: [f64; 7],
    pub layers: Vec<DenseLayer>,
}

impl From<&OptimizerParams> for Checkpoint {
    fn from(p: &OptimizerParams) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            variant: p.variant.tag().into(),
            workers: p.variant.workers(),
            n_in: p.input_width(),
            param_count: p.mlp_param_count(),
            betas_raw: p.betas_raw,
            layers: p.layers.to_vec(),
        }
    }
}

impl TryFrom<Checkpoint> for OptimizerParams {
    type Error = Error;

    fn try_from(ck: Checkpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {}",
                ck.format_version
            )));
        }
        let variant = Variant::from_tag(&ck.variant, ck.workers)?;
        if ck.n_in != variant.input_width() {
            return Err(Error::Checkpoint(format!(
                "n_in {} does not match variant {} (expected {})",
                ck.n_in,
                variant.name(),
                variant.input_width()
            )));
        }
        let mut p = OptimizerParams::zeros(variant);
        if ck.layers.len() != 3 {
            return Err(Error::Checkpoint(format!("expected 3 layers, got {}", ck.layers.len())));
        }
        for (i, (dst, src)) in p.layers.iter_mut().zip(ck.layers).enumerate() {
            if src.inp != dst.inp
                || src.out != dst.out
                || src.weights.len() != dst.weights.len()
                || src.bias.len() != dst.bias.len()
            {
                return Err(Error::Checkpoint(format!(
                    "layer {i}: expected {}x{}, got {}x{} with {} weights and {} biases",
                    dst.inp,
                    dst.out,
                    src.inp,
                    src.out,
                    src.weights.len(),
                    src.bias.len()
                )));
            }
            if src.weights.iter().chain(&src.bias).any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("layer {i}: non-finite value")));
            }
            *dst = src;
        }
        if ck.param_count != p.mlp_param_count() {
            return Err(Error::Checkpoint(format!(
                "param_count {} but layers hold {}",
                ck.param_count,
                p.mlp_param_count()
            )));
        }
        p.betas_raw = ck.betas_raw;
        Ok(p)
    }
}

/// Per-parameter direction and log-magnitude outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateDirective {
    pub direction: ModelParams,
    pub magnitude: ModelParams,
}

/// Evaluates the MLP on every row of one tensor's inputs; returns `(d, m)`.
pub fn mlp_forward_rows(phi: &OptimizerParams, rows: &TensorFeatures) -> Result<(Vec<f64>, Vec<f64>)> {
    if rows.ncols != phi.input_width() {
        return Err(Error::FeatureWidth {
            expected: phi.input_width(),
            got: rows.ncols,
        });
    }
    let h1 = phi.layers[0].forward(&rows.data, true);
    let h2 = phi.layers[1].forward(&h1, true);
    let out = phi.layers[2].forward(&h2, false);
    Ok(out.chunks_exact(2).map(|o| (o[0], o[1])).unzip())
}

/// Applies the MLP independently to every parameter's input row.
pub fn mlp_forward(phi: &OptimizerParams, inputs: &[TensorFeatures], like: &ModelParams) -> Result<UpdateDirective> {
    if inputs.len() != like.num_tensors() {
        return Err(Error::Shape(format!(
            "{} feature blocks for {} tensors",
            inputs.len(),
            like.num_tensors()
        )));
    }
    let mut direction = ModelParams::zeros_like(like);
    let mut magnitude = ModelParams::zeros_like(like);
    for (i, rows) in inputs.iter().enumerate() {
        if rows.num_rows() != like.tensor(i).len() {
            return Err(Error::Shape(format!("feature rows for tensor {i}")));
        }
        let (d, m) = mlp_forward_rows(phi, rows)?;
        direction.tensor_mut(i).data_mut().copy_from_slice(&d);
        magnitude.tensor_mut(i).data_mut().copy_from_slice(&m);
    }
    Ok(UpdateDirective { direction, magnitude })
}

/// `p' = p - lambda1 * d * exp(lambda2 * m)`
pub fn apply_learned(w: &ModelParams, dir: &UpdateDirective, lambda1: f64, lambda2: f64) -> Result<ModelParams> {
    let step = dir
        .direction
        .zip_map(&dir.magnitude, |d, m| lambda1 * d * (lambda2 * m).exp())?;
    w.sub(&step)
}

/// Appends RMS-normalized extra columns (one per delta) to each tensor block.
fn append_delta_columns(base: Option<Vec<TensorFeatures>>, extra: &[&ModelParams], like: &ModelParams) -> Vec<TensorFeatures> {
    let base_cols = base.as_ref().map_or(0, |b| b[0].ncols);
    let ncols = base_cols + extra.len();
    like.tensors()
        .enumerate()
        .map(|(ti, t)| {
            let p = t.len();
            let cols: Vec<Vec<f64>> = extra
                .iter()
                .map(|d| {
                    let mut c = d.tensor(ti).data().to_vec();
                    rms_normalize(&mut c);
                    c
                })
                .collect();
            let mut data = Vec::with_capacity(p * ncols);
            for r in 0..p {
                if let Some(b) = &base {
                    data.extend_from_slice(b[ti].row(r));
                }
                data.extend(cols.iter().map(|c| c[r]));
            }
            TensorFeatures { ncols, data }
        })
        .collect()
}

fn ada_inputs(
    phi: &OptimizerParams,
    w: &ModelParams,
    u: &AggregateState,
    deltas: &WorkerDeltas,
    extra: &[&ModelParams],
) -> Result<(Vec<TensorFeatures>, AggregateState)> {
    let mut next = u.clone();
    next.update(&deltas.average, &phi.betas())?;
    let feats = normalize_features(compute_features(w, &next, &deltas.average)?);
    Ok((append_delta_columns(Some(feats.tensors), extra, w), next))
}

fn check_workers(phi: &OptimizerParams, deltas: &WorkerDeltas) -> Result<()> {
    if let Some(k) = phi.variant.workers() {
        if deltas.workers() != k {
            return Err(Error::WorkerCount {
                expected: k,
                got: deltas.workers(),
            });
        }
    }
    Ok(())
}

/// Worker-invariant step: Ada features of the mean delta plus the mean delta.
pub fn lopt_a_step(
    phi: &OptimizerParams,
    w: &ModelParams,
    u: &AggregateState,
    deltas: &WorkerDeltas,
) -> Result<(ModelParams, AggregateState)> {
    if phi.variant != Variant::LoptA {
        return Err(Error::Invalid(format!("lopt_a_step with {}", phi.variant.name())));
    }
    let (inputs, next) = ada_inputs(phi, w, u, deltas, &[&deltas.average])?;
    let dir = mlp_forward(phi, &inputs, w)?;
    Ok((apply_learned(w, &dir, LAMBDA1, LAMBDA2)?, next))
}

/// Worker-aware step: Ada features of the mean delta plus each worker's delta
/// in worker-index order. Not invariant to permuting workers.
pub fn lagg_a_step(
    phi: &OptimizerParams,
    w: &ModelParams,
    u: &AggregateState,
    deltas: &WorkerDeltas,
) -> Result<(ModelParams, AggregateState)> {
    if !matches!(phi.variant, Variant::LaggA { .. }) {
        return Err(Error::Invalid(format!("lagg_a_step with {}", phi.variant.name())));
    }
    check_workers(phi, deltas)?;
    let extra: Vec<&ModelParams> = deltas.per_worker.iter().collect();
    let (inputs, next) = ada_inputs(phi, w, u, deltas, &extra)?;
    let dir = mlp_forward(phi, &inputs, w)?;
    Ok((apply_learned(w, &dir, LAMBDA1, LAMBDA2)?, next))
}

/// Ablation variants without Ada features or accumulators.
pub fn plain_variant_step(phi: &OptimizerParams, w: &ModelParams, deltas: &WorkerDeltas) -> Result<ModelParams> {
    let extra: Vec<&ModelParams> = match phi.variant {
        Variant::LoptPlain => vec![&deltas.average],
        Variant::LaggPlain { .. } => {
            check_workers(phi, deltas)?;
            deltas.per_worker.iter().collect()
        }
        v => return Err(Error::Invalid(format!("plain_variant_step with {}", v.name()))),
    };
    let inputs = append_delta_columns(None, &extra, w);
    let dir = mlp_forward(phi, &inputs, w)?;
    apply_learned(w, &dir, LAMBDA1, LAMBDA2)
}

/// A learned optimizer together with its running accumulator state.
#[derive(Clone, Debug)]
pub struct LearnedOptimizer {
    pub phi: OptimizerParams,
    pub state: Option<AggregateState>,
}

impl LearnedOptimizer {
    pub fn new(phi: OptimizerParams) -> Self {
        Self { phi, state: None }
    }
}

impl GlobalOptimizer for LearnedOptimizer {
    fn name(&self) -> String {
        self.phi.variant.name()
    }

    fn step(&mut self, w: &ModelParams, deltas: &WorkerDeltas) -> Result<ModelParams> {
        if !self.phi.variant.uses_ada() {
            return plain_variant_step(&self.phi, w, deltas);
        }
        let u = self.state.take().unwrap_or_else(|| init_state(w));
        let (next, u) = match self.phi.variant {
            Variant::LoptA => lopt_a_step(&self.phi, w, &u, deltas)?,
            _ => lagg_a_step(&self.phi, w, &u, deltas)?,
        };
        self.state = Some(u);
        Ok(next)
    }
}
