//! A small trainable model family: dense layers applied per timestep,
//! one LSTM layer over the sequence, dense layers on the final hidden
//! state, and a linear scalar head.
//!
//! Everything is double precision and hand-rolled so that the reverse-mode
//! gradient is exact and bit-reproducible. Parameters live in one flat
//! vector whose layout is a pure function of the configuration:
//!
//! ```text
//! [pre dense: W (in x out, row-major), b] ...
//! [lstm: Wx (in x 4H), Wh (H x 4H), b (4H)]    gate blocks i | f | g | o
//! [post dense: W, b] ...
//! [head: W (in x 1), b (1)]
//! ```

use crate::error::{Error, Result};
use crate::textio::{fmt_f64, SectionFile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Swish,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Swish => x * sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Swish => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Swish => "swish",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Activation> {
        match s {
            "swish" => Ok(Activation::Swish),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::BadParameter(format!("unknown activation {other:?}"))),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_features: usize,
    pub history_len: usize,
    pub pre_dense: Vec<usize>,
    pub recurrent_units: usize,
    pub post_dense: Vec<usize>,
    pub activation: Activation,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_features == 0 || self.history_len == 0 || self.recurrent_units == 0 {
            return Err(Error::BadParameter(
                "input_features, history_len and recurrent_units must be positive".into(),
            ));
        }
        if self.pre_dense.iter().chain(&self.post_dense).any(|&w| w == 0) {
            return Err(Error::BadParameter("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Named reference architectures.
    pub fn preset(name: &str, input_features: usize, history_len: usize) -> Result<ModelConfig> {
        let (recurrent_units, pre, post) = match name {
            "kolmogorov" => (32, vec![4, 8, 16], vec![16, 8, 4]),
            "cylinder" => (16, vec![4, 8, 16], vec![16, 8, 4]),
            other => return Err(Error::BadParameter(format!("unknown preset {other:?}"))),
        };
        Ok(ModelConfig {
            input_features,
            history_len,
            pre_dense: pre,
            recurrent_units,
            post_dense: post,
            activation: Activation::Swish,
        })
    }
}

#[derive(Debug, Clone)]
struct DenseSlot {
    w: Range<usize>,
    b: Range<usize>,
    in_dim: usize,
    out_dim: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pre: Vec<DenseSlot>,
    wx: Range<usize>,
    wh: Range<usize>,
    lb: Range<usize>,
    lstm_in: usize,
    units: usize,
    post: Vec<DenseSlot>,
    head: DenseSlot,
    total: usize,
}

fn dense_slot(cursor: &mut usize, in_dim: usize, out_dim: usize) -> DenseSlot {
    let w = *cursor..*cursor + in_dim * out_dim;
    *cursor = w.end;
    let b = *cursor..*cursor + out_dim;
    *cursor = b.end;
    DenseSlot {
        w,
        b,
        in_dim,
        out_dim,
    }
}

impl Layout {
    pub(crate) fn new(cfg: &ModelConfig) -> Layout {
        let mut cursor = 0usize;
        let mut dim = cfg.input_features;
        let mut pre = Vec::new();
        for &w in &cfg.pre_dense {
            pre.push(dense_slot(&mut cursor, dim, w));
            dim = w;
        }
        let lstm_in = dim;
        let units = cfg.recurrent_units;
        let wx = cursor..cursor + lstm_in * 4 * units;
        cursor = wx.end;
        let wh = cursor..cursor + units * 4 * units;
        cursor = wh.end;
        let lb = cursor..cursor + 4 * units;
        cursor = lb.end;
        let mut dim = units;
        let mut post = Vec::new();
        for &w in &cfg.post_dense {
            post.push(dense_slot(&mut cursor, dim, w));
            dim = w;
        }
        let head = dense_slot(&mut cursor, dim, 1);
        Layout {
            pre,
            wx,
            wh,
            lb,
            lstm_in,
            units,
            post,
            head,
            total: cursor,
        }
    }
}

/// Number of parameters implied by a configuration.
pub fn param_count(cfg: &ModelConfig) -> usize {
    Layout::new(cfg).total
}

/// Flat parameter vector in the layout order above.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(cfg: &ModelConfig) -> ParamVector {
        ParamVector {
            values: vec![0.0; param_count(cfg)],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A batch of input windows with their scalar targets.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    /// `batch * history * features`, sample-major then time-major.
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub history: usize,
    pub features: usize,
}

impl SequenceBatch {
    pub fn batch_len(&self) -> usize {
        self.targets.len()
    }

    pub fn row(&self, sample: usize, t: usize) -> &[f64] {
        let start = (sample * self.history + t) * self.features;
        &self.inputs[start..start + self.features]
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.history != cfg.history_len || self.features != cfg.input_features {
            return Err(Error::ShapeMismatch(format!(
                "batch is {}x{} but config wants {}x{}",
                self.history, self.features, cfg.history_len, cfg.input_features
            )));
        }
        if self.inputs.len() != self.targets.len() * self.history * self.features {
            return Err(Error::ShapeMismatch("inputs/targets disagree".into()));
        }
        if self.inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite input".into()));
        }
        Ok(())
    }
}

/// Fan-in scaled uniform initialization; biases zero except the LSTM forget
/// gate, which starts at 1.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamVector> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; layout.total];
    let mut fill = |range: Range<usize>, fan_in: usize, values: &mut Vec<f64>| {
        let limit = (1.0 / fan_in as f64).sqrt();
        for i in range {
            values[i] = (rng.gen::<f64>() * 2.0 - 1.0) * limit;
        }
    };
    for slot in layout.pre.iter().chain(layout.post.iter()) {
        fill(slot.w.clone(), slot.in_dim, &mut values);
    }
    fill(layout.wx.clone(), layout.lstm_in, &mut values);
    fill(layout.wh.clone(), layout.units, &mut values);
    fill(layout.head.w.clone(), layout.head.in_dim, &mut values);
    // forget-gate bias block
    let h = layout.units;
    for u in 0..h {
        values[layout.lb.start + h + u] = 1.0;
    }
    Ok(ParamVector { values })
}

fn dense_forward(params: &[f64], slot: &DenseSlot, input: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.resize(slot.out_dim, 0.0);
    let w = &params[slot.w.clone()];
    let b = &params[slot.b.clone()];
    for j in 0..slot.out_dim {
        out[j] = b[j];
    }
    for (i, &x) in input.iter().enumerate() {
        let row = &w[i * slot.out_dim..(i + 1) * slot.out_dim];
        for j in 0..slot.out_dim {
            out[j] += x * row[j];
        }
    }
}

/// Per-sample activations retained for the backward pass.
struct Cache {
    /// Pre-dense pre-activations, per layer: history x width.
    pre_z: Vec<Vec<f64>>,
    /// Pre-dense activations, per layer: history x width.
    pre_a: Vec<Vec<f64>>,
    /// Gate activations per timestep: history x 4H (blocks i,f,g,o).
    gates: Vec<f64>,
    /// Cell state per timestep: history x H.
    cell: Vec<f64>,
    /// tanh of the cell state: history x H.
    tanh_c: Vec<f64>,
    /// Hidden state per timestep: history x H.
    hidden: Vec<f64>,
    /// Post-dense pre-activations and activations (single timestep).
    post_z: Vec<Vec<f64>>,
    post_a: Vec<Vec<f64>>,
}

impl Cache {
    fn new(cfg: &ModelConfig, layout: &Layout) -> Cache {
        let t = cfg.history_len;
        Cache {
            pre_z: layout.pre.iter().map(|s| vec![0.0; t * s.out_dim]).collect(),
            pre_a: layout.pre.iter().map(|s| vec![0.0; t * s.out_dim]).collect(),
            gates: vec![0.0; t * 4 * layout.units],
            cell: vec![0.0; t * layout.units],
            tanh_c: vec![0.0; t * layout.units],
            hidden: vec![0.0; t * layout.units],
            post_z: layout.post.iter().map(|s| vec![0.0; s.out_dim]).collect(),
            post_a: layout.post.iter().map(|s| vec![0.0; s.out_dim]).collect(),
        }
    }
}

fn forward_sample(
    params: &[f64],
    cfg: &ModelConfig,
    layout: &Layout,
    batch: &SequenceBatch,
    sample: usize,
    cache: &mut Cache,
    scratch: &mut Vec<f64>,
) -> f64 {
    let h = layout.units;
    let act = cfg.activation;
    for t in 0..cfg.history_len {
        // dense stack applied to this timestep's features
        let mut input: Vec<f64> = batch.row(sample, t).to_vec();
        for (l, slot) in layout.pre.iter().enumerate() {
            dense_forward(params, slot, &input, scratch);
            let z_buf = &mut cache.pre_z[l][t * slot.out_dim..(t + 1) * slot.out_dim];
            z_buf.copy_from_slice(scratch);
            for v in scratch.iter_mut() {
                *v = act.apply(*v);
            }
            let a_buf = &mut cache.pre_a[l][t * slot.out_dim..(t + 1) * slot.out_dim];
            a_buf.copy_from_slice(scratch);
            input.clear();
            input.extend_from_slice(scratch);
        }
        // one LSTM step
        let wx = &params[layout.wx.clone()];
        let wh = &params[layout.wh.clone()];
        let lb = &params[layout.lb.clone()];
        let cols = 4 * h;
        let mut z = vec![0.0; cols];
        z.copy_from_slice(lb);
        for (i, &x) in input.iter().enumerate() {
            let row = &wx[i * cols..(i + 1) * cols];
            for c in 0..cols {
                z[c] += x * row[c];
            }
        }
        if t > 0 {
            let h_prev = &cache.hidden[(t - 1) * h..t * h];
            for (u, &hp) in h_prev.iter().enumerate() {
                let row = &wh[u * cols..(u + 1) * cols];
                for c in 0..cols {
                    z[c] += hp * row[c];
                }
            }
        }
        for u in 0..h {
            let gi = sigmoid(z[u]);
            let gf = sigmoid(z[h + u]);
            let gg = z[2 * h + u].tanh();
            let go = sigmoid(z[3 * h + u]);
            let c_prev = if t > 0 { cache.cell[(t - 1) * h + u] } else { 0.0 };
            let c = gf * c_prev + gi * gg;
            let tc = c.tanh();
            cache.gates[t * 4 * h + u] = gi;
            cache.gates[t * 4 * h + h + u] = gf;
            cache.gates[t * 4 * h + 2 * h + u] = gg;
            cache.gates[t * 4 * h + 3 * h + u] = go;
            cache.cell[t * h + u] = c;
            cache.tanh_c[t * h + u] = tc;
            cache.hidden[t * h + u] = go * tc;
        }
    }
    // post stack on the final hidden state
    let t_last = cfg.history_len - 1;
    let mut input: Vec<f64> = cache.hidden[t_last * h..(t_last + 1) * h].to_vec();
    for (l, slot) in layout.post.iter().enumerate() {
        dense_forward(params, slot, &input, scratch);
        cache.post_z[l].copy_from_slice(scratch);
        for v in scratch.iter_mut() {
            *v = act.apply(*v);
        }
        cache.post_a[l].copy_from_slice(scratch);
        input.clear();
        input.extend_from_slice(scratch);
    }
    // linear scalar head
    let head_w = &params[layout.head.w.clone()];
    let mut out = params[layout.head.b.start];
    for (i, &x) in input.iter().enumerate() {
        out += x * head_w[i];
    }
    out
}

/// Model predictions for a batch. Pure and deterministic.
pub fn forward(params: &ParamVector, cfg: &ModelConfig, batch: &SequenceBatch) -> Result<Vec<f64>> {
    cfg.validate()?;
    batch.validate(cfg)?;
    let layout = Layout::new(cfg);
    if params.len() != layout.total {
        return Err(Error::ShapeMismatch(format!(
            "expected {} parameters, got {}",
            layout.total,
            params.len()
        )));
    }
    let mut cache = Cache::new(cfg, &layout);
    let mut scratch = Vec::new();
    let mut out = Vec::with_capacity(batch.batch_len());
    for s in 0..batch.batch_len() {
        out.push(forward_sample(
            &params.values,
            cfg,
            &layout,
            batch,
            s,
            &mut cache,
            &mut scratch,
        ));
    }
    Ok(out)
}

/// Vector-Jacobian product: the exact gradient of
/// `sum_i dl_dy[i] * prediction_i` with respect to the parameters.
pub fn backward(
    params: &ParamVector,
    cfg: &ModelConfig,
    batch: &SequenceBatch,
    dl_dy: &[f64],
) -> Result<ParamVector> {
    cfg.validate()?;
    batch.validate(cfg)?;
    if dl_dy.len() != batch.batch_len() {
        return Err(Error::ShapeMismatch("dl_dy length != batch".into()));
    }
    let layout = Layout::new(cfg);
    if params.len() != layout.total {
        return Err(Error::ShapeMismatch(format!(
            "expected {} parameters, got {}",
            layout.total,
            params.len()
        )));
    }
    let p = &params.values;
    let mut grad = vec![0.0; layout.total];
    let mut cache = Cache::new(cfg, &layout);
    let mut scratch = Vec::new();
    let hu = layout.units;
    let cols = 4 * hu;

    for s in 0..batch.batch_len() {
        let weight = dl_dy[s];
        forward_sample(p, cfg, &layout, batch, s, &mut cache, &mut scratch);
        if weight == 0.0 {
            continue;
        }
        // head
        let t_last = cfg.history_len - 1;
        let head_in: &[f64] = if let Some(last) = layout.post.len().checked_sub(1) {
            &cache.post_a[last]
        } else {
            &cache.hidden[t_last * hu..(t_last + 1) * hu]
        };
        let mut d_cur = vec![0.0; head_in.len()];
        for (i, &x) in head_in.iter().enumerate() {
            grad[layout.head.w.start + i] += weight * x;
            d_cur[i] = weight * p[layout.head.w.start + i];
        }
        grad[layout.head.b.start] += weight;
        // post stack, reversed
        for (l, slot) in layout.post.iter().enumerate().rev() {
            let z = &cache.post_z[l];
            let input: &[f64] = if l == 0 {
                &cache.hidden[t_last * hu..(t_last + 1) * hu]
            } else {
                &cache.post_a[l - 1]
            };
            let mut d_prev = vec![0.0; slot.in_dim];
            for j in 0..slot.out_dim {
                let dz = d_cur[j] * cfg.activation.derivative(z[j]);
                grad[slot.b.start + j] += dz;
                for (i, &x) in input.iter().enumerate() {
                    grad[slot.w.start + i * slot.out_dim + j] += dz * x;
                    d_prev[i] += p[slot.w.start + i * slot.out_dim + j] * dz;
                }
            }
            d_cur = d_prev;
        }
        // backpropagation through time
        let mut dh = d_cur; // gradient w.r.t. hidden state at t_last
        let mut dc = vec![0.0; hu];
        let mut dz4 = vec![0.0; cols];
        for t in (0..cfg.history_len).rev() {
            let gates = &cache.gates[t * cols..(t + 1) * cols];
            for u in 0..hu {
                let gi = gates[u];
                let gf = gates[hu + u];
                let gg = gates[2 * hu + u];
                let go = gates[3 * hu + u];
                let tc = cache.tanh_c[t * hu + u];
                let c_prev = if t > 0 { cache.cell[(t - 1) * hu + u] } else { 0.0 };
                let d_o = dh[u] * tc;
                let dct = dc[u] + dh[u] * go * (1.0 - tc * tc);
                let d_i = dct * gg;
                let d_g = dct * gi;
                let d_f = dct * c_prev;
                dz4[u] = d_i * gi * (1.0 - gi);
                dz4[hu + u] = d_f * gf * (1.0 - gf);
                dz4[2 * hu + u] = d_g * (1.0 - gg * gg);
                dz4[3 * hu + u] = d_o * go * (1.0 - go);
                dc[u] = dct * gf;
            }
            let x_t: &[f64] = if let Some(last) = layout.pre.len().checked_sub(1) {
                let w = layout.pre[last].out_dim;
                &cache.pre_a[last][t * w..(t + 1) * w]
            } else {
                batch.row(s, t)
            };
            for (i, &x) in x_t.iter().enumerate() {
                let row = layout.wx.start + i * cols;
                for c in 0..cols {
                    grad[row + c] += x * dz4[c];
                }
            }
            if t > 0 {
                let h_prev = &cache.hidden[(t - 1) * hu..t * hu];
                for (u, &hp) in h_prev.iter().enumerate() {
                    let row = layout.wh.start + u * cols;
                    for c in 0..cols {
                        grad[row + c] += hp * dz4[c];
                    }
                }
            }
            for c in 0..cols {
                grad[layout.lb.start + c] += dz4[c];
            }
            // input gradient for this timestep feeds the pre stack
            let mut d_in = vec![0.0; layout.lstm_in];
            for i in 0..layout.lstm_in {
                let row = &p[layout.wx.start + i * cols..layout.wx.start + (i + 1) * cols];
                let mut acc = 0.0;
                for c in 0..cols {
                    acc += row[c] * dz4[c];
                }
                d_in[i] = acc;
            }
            // hidden-state gradient for t-1
            let mut dh_prev = vec![0.0; hu];
            for u in 0..hu {
                let row = &p[layout.wh.start + u * cols..layout.wh.start + (u + 1) * cols];
                let mut acc = 0.0;
                for c in 0..cols {
                    acc += row[c] * dz4[c];
                }
                dh_prev[u] = acc;
            }
            // pre-dense stack, reversed, at this timestep
            let mut d_cur = d_in;
            for (l, slot) in layout.pre.iter().enumerate().rev() {
                let z = &cache.pre_z[l][t * slot.out_dim..(t + 1) * slot.out_dim];
                let input: Vec<f64> = if l == 0 {
                    batch.row(s, t).to_vec()
                } else {
                    let w = layout.pre[l - 1].out_dim;
                    cache.pre_a[l - 1][t * w..(t + 1) * w].to_vec()
                };
                let mut d_prev = vec![0.0; slot.in_dim];
                for j in 0..slot.out_dim {
                    let dz = d_cur[j] * cfg.activation.derivative(z[j]);
                    grad[slot.b.start + j] += dz;
                    for (i, &x) in input.iter().enumerate() {
                        grad[slot.w.start + i * slot.out_dim + j] += dz * x;
                        d_prev[i] += p[slot.w.start + i * slot.out_dim + j] * dz;
                    }
                }
                d_cur = d_prev;
            }
            dh = dh_prev;
        }
    }
    Ok(ParamVector { values: grad })
}

/// Write the configuration header and full-precision parameter list.
pub fn save_model(path: &Path, cfg: &ModelConfig, params: &ParamVector) -> Result<()> {
    let fmt_widths = |v: &[usize]| {
        v.iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    let mut out = String::from("tailcast-model v1\n");
    out.push_str(&format!("input_features = {}\n", cfg.input_features));
    out.push_str(&format!("history_len = {}\n", cfg.history_len));
    out.push_str(&format!("pre_dense = {}\n", fmt_widths(&cfg.pre_dense)));
    out.push_str(&format!("recurrent_units = {}\n", cfg.recurrent_units));
    out.push_str(&format!("post_dense = {}\n", fmt_widths(&cfg.post_dense)));
    out.push_str(&format!("activation = {}\n", cfg.activation.name()));
    out.push_str("[params]\n");
    for v in &params.values {
        out.push_str(&fmt_f64(*v));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(ModelConfig, ParamVector)> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let file = SectionFile::parse(&text, &name)?;
    if file.magic != "tailcast-model v1" {
        return Err(Error::ParseFile {
            path: name,
            message: format!("unexpected header {:?}", file.magic),
        });
    }
    let widths = |key: &str| -> Result<Vec<usize>> {
        let raw = file.scalar(key, &name)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.trim().parse::<usize>().map_err(|_| Error::ParseFile {
                    path: name.clone(),
                    message: format!("bad width list for `{key}`"),
                })
            })
            .collect()
    };
    let cfg = ModelConfig {
        input_features: file.scalar_usize("input_features", &name)?,
        history_len: file.scalar_usize("history_len", &name)?,
        pre_dense: widths("pre_dense")?,
        recurrent_units: file.scalar_usize("recurrent_units", &name)?,
        post_dense: widths("post_dense")?,
        activation: file.scalar("activation", &name)?.parse()?,
    };
    let params = ParamVector {
        values: file.section("params", &name)?.to_vec(),
    };
    if params.len() != param_count(&cfg) {
        return Err(Error::ShapeMismatch(format!(
            "model file has {} parameters, config implies {}",
            params.len(),
            param_count(&cfg)
        )));
    }
    Ok((cfg, params))
}
