//! Forecasting models (linear auto-regressor and a one-hidden-layer
//! rectifier network), their per-channel MSE loss, and Adam-based gradient
//! updates for the online loop.
//!
//! Parameters live in one flat vector partitioned into an encoder block
//! (the hidden layer; empty for the linear model) followed by a regressor
//! block (the final affine map). The look-back matrix is flattened
//! column-major, so feature `l * M + j` is channel `j` at lag offset `l`,
//! matching the layout used by the augmentation variance vector.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Model architecture selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Linear,
    Mlp { hidden_width: usize },
}

/// Shape and seed of a forecaster; fully determines the parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForecasterSpec {
    pub kind: ModelKind,
    pub channels: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub init_seed: u64,
}

impl ForecasterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.lookback == 0 || self.horizon == 0 {
            return Err(Error::Config(
                "channels, lookback, and horizon must all be >= 1".into(),
            ));
        }
        if let ModelKind::Mlp { hidden_width } = self.kind {
            if hidden_width == 0 {
                return Err(Error::Config("hidden_width must be >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn n_in(&self) -> usize {
        self.channels * self.lookback
    }

    pub fn n_out(&self) -> usize {
        self.channels * self.horizon
    }

    /// Length of the encoder block: the hidden layer's weights and biases,
    /// zero for the linear model.
    pub fn encoder_len(&self) -> usize {
        match self.kind {
            ModelKind::Linear => 0,
            ModelKind::Mlp { hidden_width } => hidden_width * (self.n_in() + 1),
        }
    }

    /// Length of the regressor block: the final affine map with bias.
    pub fn regressor_len(&self) -> usize {
        let fan_in = match self.kind {
            ModelKind::Linear => self.n_in(),
            ModelKind::Mlp { hidden_width } => hidden_width,
        };
        self.n_out() * (fan_in + 1)
    }

    pub fn n_params(&self) -> usize {
        self.encoder_len() + self.regressor_len()
    }
}

/// All trainable reals, flat, encoder block first.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    encoder_len: usize,
}

impl ParamVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn encoder(&self) -> &[f64] {
        &self.values[..self.encoder_len]
    }

    pub fn regressor(&self) -> &[f64] {
        &self.values[self.encoder_len..]
    }

    /// Bitwise equality, used to verify freeze and restore contracts.
    pub fn bits_eq(&self, other: &ParamVector) -> bool {
        self.encoder_len == other.encoder_len
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Adam optimizer state with decoupled weight decay (zero by default).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
            weight_decay: 0.0,
        }
    }

    /// Applies one bias-corrected Adam update to every parameter at index
    /// `skip_prefix` or later; earlier entries (the frozen encoder block)
    /// are left untouched, moments included. Returns the number of entries
    /// updated.
    pub fn apply(&mut self, params: &mut ParamVector, grad: &[f64], skip_prefix: usize) -> usize {
        debug_assert_eq!(grad.len(), params.values.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, &g) in grad.iter().enumerate().skip(skip_prefix) {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params.values[i] -=
                self.lr * m_hat / (v_hat.sqrt() + self.eps) + self.lr * self.weight_decay * params.values[i];
        }
        params.values.len() - skip_prefix
    }
}

/// An M x H point forecast.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub yhat: DMatrix<f64>,
}

/// Initializes parameters layer by layer from `uniform(-1/sqrt(fan_in),
/// +1/sqrt(fan_in))` under the spec's seed, with a zeroed optimizer.
pub fn init_model(spec: &ForecasterSpec, lr: f64) -> Result<(ParamVector, AdamState)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    let mut values = Vec::with_capacity(spec.n_params());
    let fill = |n: usize, fan_in: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f64>| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        out.extend((0..n).map(|_| dist.sample(rng)));
    };
    match spec.kind {
        ModelKind::Linear => {
            fill(spec.regressor_len(), spec.n_in(), &mut rng, &mut values);
        }
        ModelKind::Mlp { hidden_width } => {
            fill(spec.encoder_len(), spec.n_in(), &mut rng, &mut values);
            fill(spec.regressor_len(), hidden_width, &mut rng, &mut values);
        }
    }
    let params = ParamVector { values, encoder_len: spec.encoder_len() };
    let adam = AdamState::new(spec.n_params(), lr);
    Ok((params, adam))
}

/// Weight/bias views into the flat layout of one affine layer:
/// weights are row-major (`n_out` rows of `fan_in`), then `n_out` biases.
fn affine_forward(block: &[f64], input: &[f64], n_out: usize, out: &mut Vec<f64>) {
    let fan_in = input.len();
    let biases = &block[n_out * fan_in..];
    out.clear();
    for o in 0..n_out {
        let row = &block[o * fan_in..(o + 1) * fan_in];
        let mut acc = biases[o];
        for (w, x) in row.iter().zip(input) {
            acc += w * x;
        }
        out.push(acc);
    }
}

fn check_input(spec: &ForecasterSpec, x: &DMatrix<f64>) -> Result<()> {
    if x.nrows() != spec.channels || x.ncols() != spec.lookback {
        return Err(Error::Bounds(format!(
            "look-back shape {}x{} does not match spec {}x{}",
            x.nrows(),
            x.ncols(),
            spec.channels,
            spec.lookback
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite look-back input".into()));
    }
    Ok(())
}

/// Runs the forward pass and reshapes the flat output to M x H.
pub fn predict(params: &ParamVector, spec: &ForecasterSpec, x: &DMatrix<f64>) -> Result<Prediction> {
    check_input(spec, x)?;
    let x_flat = x.as_slice();
    let mut out = Vec::new();
    match spec.kind {
        ModelKind::Linear => {
            affine_forward(params.regressor(), x_flat, spec.n_out(), &mut out);
        }
        ModelKind::Mlp { hidden_width } => {
            let mut hidden = Vec::new();
            affine_forward(params.encoder(), x_flat, hidden_width, &mut hidden);
            for h in hidden.iter_mut() {
                *h = h.max(0.0);
            }
            affine_forward(params.regressor(), &hidden, spec.n_out(), &mut out);
        }
    }
    let yhat = DMatrix::from_column_slice(spec.channels, spec.horizon, &out);
    Ok(Prediction { yhat })
}

/// Mean squared error over all `M * H` entries.
pub fn mse_loss(pred: &Prediction, y: &DMatrix<f64>) -> f64 {
    let n = (y.nrows() * y.ncols()) as f64;
    pred.yhat
        .iter()
        .zip(y.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

/// Mean absolute error over all `M * H` entries.
pub fn mae_metric(pred: &Prediction, y: &DMatrix<f64>) -> f64 {
    let n = (y.nrows() * y.ncols()) as f64;
    pred.yhat
        .iter()
        .zip(y.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n
}

/// Accumulates `scale` times the gradient of the mean (over the batch) MSE
/// loss into `grad`, which must already be sized `spec.n_params()`. With
/// `freeze_encoder`, encoder entries are skipped entirely (their backward
/// pass is not even computed). Returns the mean batch loss.
pub fn loss_and_grad(
    params: &ParamVector,
    spec: &ForecasterSpec,
    batch: &[(&DMatrix<f64>, &DMatrix<f64>)],
    freeze_encoder: bool,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Bounds("empty training batch".into()));
    }
    debug_assert_eq!(grad.len(), spec.n_params());
    let n_out = spec.n_out();
    let enc_len = spec.encoder_len();
    let batch_scale = scale / batch.len() as f64;
    let mut total_loss = 0.0;

    let mut hidden = Vec::new();
    let mut out = Vec::new();
    for (x, y) in batch {
        check_input(spec, x)?;
        if y.nrows() != spec.channels || y.ncols() != spec.horizon {
            return Err(Error::Bounds("target shape mismatch".into()));
        }
        let x_flat = x.as_slice();
        let y_flat = y.as_slice();

        match spec.kind {
            ModelKind::Linear => {
                affine_forward(params.regressor(), x_flat, n_out, &mut out);
                let n = n_out as f64;
                let (gw, gb) = grad.split_at_mut(n_out * x_flat.len());
                for o in 0..n_out {
                    let r = out[o] - y_flat[o];
                    total_loss += r * r / n;
                    let gy = 2.0 * r / n * batch_scale;
                    let row = &mut gw[o * x_flat.len()..(o + 1) * x_flat.len()];
                    for (g, xv) in row.iter_mut().zip(x_flat) {
                        *g += gy * xv;
                    }
                    gb[o] += gy;
                }
            }
            ModelKind::Mlp { hidden_width } => {
                affine_forward(params.encoder(), x_flat, hidden_width, &mut hidden);
                let pre: Vec<f64> = hidden.clone();
                for h in hidden.iter_mut() {
                    *h = h.max(0.0);
                }
                affine_forward(params.regressor(), &hidden, n_out, &mut out);

                let n = n_out as f64;
                let w2 = params.regressor();
                let mut d_hidden = vec![0.0; hidden_width];
                {
                    let (_, reg_grad) = grad.split_at_mut(enc_len);
                    let (gw2, gb2) = reg_grad.split_at_mut(n_out * hidden_width);
                    for o in 0..n_out {
                        let r = out[o] - y_flat[o];
                        total_loss += r * r / n;
                        let gy = 2.0 * r / n;
                        let scaled = gy * batch_scale;
                        let row = &mut gw2[o * hidden_width..(o + 1) * hidden_width];
                        for (k, g) in row.iter_mut().enumerate() {
                            *g += scaled * hidden[k];
                        }
                        gb2[o] += scaled;
                        if !freeze_encoder {
                            let w_row = &w2[o * hidden_width..(o + 1) * hidden_width];
                            for (k, w) in w_row.iter().enumerate() {
                                d_hidden[k] += gy * w;
                            }
                        }
                    }
                }
                if !freeze_encoder {
                    let (gw1, rest) = grad.split_at_mut(hidden_width * x_flat.len());
                    let gb1 = &mut rest[..hidden_width];
                    for k in 0..hidden_width {
                        if pre[k] <= 0.0 {
                            continue;
                        }
                        let gh = d_hidden[k] * batch_scale;
                        let row = &mut gw1[k * x_flat.len()..(k + 1) * x_flat.len()];
                        for (g, xv) in row.iter_mut().zip(x_flat) {
                            *g += gh * xv;
                        }
                        gb1[k] += gh;
                    }
                }
            }
        }
    }
    Ok(total_loss / batch.len() as f64)
}

/// Outcome of a single online update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Loss of the pre-update parameters on this example.
    pub loss: f64,
    /// False when a non-finite loss or gradient made the update a no-op.
    pub applied: bool,
}

/// One single-example training update (epoch and batch size of one):
/// backpropagates the MSE loss and applies one Adam step. With
/// `freeze_encoder`, encoder entries are bit-identical afterwards. A
/// non-finite loss or gradient skips the update and reports it.
pub fn grad_step(
    params: &mut ParamVector,
    adam: &mut AdamState,
    spec: &ForecasterSpec,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    freeze_encoder: bool,
) -> Result<StepOutcome> {
    let mut grad = vec![0.0; spec.n_params()];
    let loss = loss_and_grad(params, spec, &[(x, y)], freeze_encoder, 1.0, &mut grad)?;
    let skip = if freeze_encoder { spec.encoder_len() } else { 0 };
    if !loss.is_finite() || grad[skip..].iter().any(|g| !g.is_finite()) {
        return Ok(StepOutcome { loss, applied: false });
    }
    adam.apply(params, &grad, skip);
    Ok(StepOutcome { loss, applied: true })
}

/// Writes the spec header followed by one hex-encoded bit pattern per
/// parameter; the round trip through [`load_model`] is bit-exact.
pub fn save_model(params: &ParamVector, spec: &ForecasterSpec, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = serde_json::to_string(spec)?;
    writeln!(file, "{header}")?;
    for v in &params.values {
        writeln!(file, "{:016x}", v.to_bits())?;
    }
    file.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save_model`].
pub fn load_model(path: &Path) -> Result<(ParamVector, ForecasterSpec)> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty checkpoint".into() })??;
    let spec: ForecasterSpec = serde_json::from_str(&header)?;
    spec.validate()?;
    let mut values = Vec::with_capacity(spec.n_params());
    for (i, line) in lines.enumerate() {
        let line = line?;
        let bits = u64::from_str_radix(line.trim(), 16).map_err(|_| Error::Parse {
            line: i + 2,
            msg: format!("bad parameter encoding {line:?}"),
        })?;
        values.push(f64::from_bits(bits));
    }
    if values.len() != spec.n_params() {
        return Err(Error::Parse {
            line: values.len() + 1,
            msg: format!("expected {} parameters, found {}", spec.n_params(), values.len()),
        });
    }
    Ok((ParamVector { values, encoder_len: spec.encoder_len() }, spec))
}
