//! Stacked bidirectional LSTM over frame sequences and the affine projection
//! of its feature into prototype space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};

/// How the top layer's per-frame outputs become one feature vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Forward state after the last frame next to the backward state after
    /// the first frame.
    #[default]
    Final,
    /// Time average of the concatenated per-frame outputs.
    Mean,
}

/// Gate blocks are laid out `[input | forget | output | candidate]` along the
/// columns of `w_x`, `w_h` and `bias`.
#[derive(Clone, Copy, Debug)]
pub struct DirectionParams {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct BlstmParams {
    /// `[forward, backward]` per layer, bottom first.
    pub layers: Vec<[DirectionParams; 2]>,
    pub input_width: usize,
    pub hidden: usize,
    pub readout: Readout,
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectionParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

pub(crate) fn uniform_tensor<S: Scalar, R: Rng>(
    rng: &mut R,
    shape: &[usize],
    bound: f64,
) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| S::from_f64_lossy(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

impl BlstmParams {
    /// Weights uniform in ±1/√fan-in, biases zero except the forget gate at +1.
    pub fn init<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        input_width: usize,
        hidden: usize,
        layers: usize,
        readout: Readout,
    ) -> Self {
        let mut out = Vec::with_capacity(layers);
        for layer in 0..layers {
            let width = if layer == 0 { input_width } else { 2 * hidden };
            let mut make = |dir: &str| {
                let prefix = format!("blstm.l{layer}.{dir}");
                let w_x = uniform_tensor(rng, &[width, 4 * hidden], 1.0 / (width as f64).sqrt());
                let w_h = uniform_tensor(rng, &[hidden, 4 * hidden], 1.0 / (hidden as f64).sqrt());
                let mut bias = Tensor::zeros(&[4 * hidden]);
                bias.data_mut()[hidden..2 * hidden].fill(S::one());
                DirectionParams {
                    w_x: store.push(format!("{prefix}.w_x"), ParamGroup::Encoder, w_x),
                    w_h: store.push(format!("{prefix}.w_h"), ParamGroup::Encoder, w_h),
                    bias: store.push(format!("{prefix}.bias"), ParamGroup::Encoder, bias),
                }
            };
            let fwd = make("fwd");
            let bwd = make("bwd");
            out.push([fwd, bwd]);
        }
        BlstmParams {
            layers: out,
            input_width,
            hidden,
            readout,
        }
    }

    pub fn feature_width(&self) -> usize {
        2 * self.hidden
    }
}

impl ProjectionParams {
    pub fn init<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        from: usize,
        to: usize,
    ) -> Self {
        let weight = uniform_tensor(rng, &[from, to], 1.0 / (from as f64).sqrt());
        ProjectionParams {
            weight: store.push("projection.weight", ParamGroup::Encoder, weight),
            bias: store.push("projection.bias", ParamGroup::Encoder, Tensor::zeros(&[to])),
        }
    }
}

/// A batch of equal-length sequences stored time-major as `[T·B × d]`:
/// row `t·B + b` is frame `t` of sequence `b`.
#[derive(Clone, Debug)]
pub struct SequenceBatch<S> {
    pub frames: Tensor<S>,
    pub steps: usize,
    pub batch: usize,
}

impl<S: Scalar> SequenceBatch<S> {
    /// Each item is a row-major `[steps × width]` frame matrix.
    pub fn from_sequences(items: &[&[f64]], steps: usize, width: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::EmptySequence);
        }
        let batch = items.len();
        let mut data = vec![S::zero(); steps * batch * width];
        for (b, seq) in items.iter().enumerate() {
            if seq.len() != steps * width {
                return Err(Error::dim("sequence batch", &[seq.len()], &[steps, width]));
            }
            for t in 0..steps {
                let dst = &mut data[(t * batch + b) * width..(t * batch + b + 1) * width];
                for (d, &v) in dst.iter_mut().zip(&seq[t * width..(t + 1) * width]) {
                    *d = S::from_f64_lossy(v);
                }
            }
        }
        Ok(SequenceBatch {
            frames: Tensor::new(vec![steps * batch, width], data)?,
            steps,
            batch,
        })
    }

    pub fn width(&self) -> usize {
        self.frames.cols()
    }
}

/// Gate non-linearities and state update given pre-activations `gates[B×4H]`
/// that already include `h_prev·W_h`.
fn gated_update<S: Scalar>(
    g: &mut Graph<S>,
    gates: Var,
    c_prev: Option<Var>,
    hidden: usize,
) -> Result<(Var, Var)> {
    let hc = g.lstm_gates(gates, c_prev)?;
    let h = g.slice(hc, 1, 0, hidden)?;
    let c = g.slice(hc, 1, hidden, hidden)?;
    Ok((h, c))
}

/// One LSTM step: `x_t[B×in]`, `h_prev[B×H]`, `c_prev[B×H]` → `(h, c)`.
pub fn lstm_cell<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    dir: &DirectionParams,
    x_t: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let w_h = bound.var(dir.w_h);
    let hidden = g.shape(w_h)[0];
    if g.shape(h_prev) != g.shape(c_prev) || g.shape(h_prev).last() != Some(&hidden) {
        return Err(Error::dim("lstm_cell", g.shape(h_prev), g.shape(c_prev)));
    }
    let xw = g.matmul(x_t, bound.var(dir.w_x))?;
    let xw = g.add_row(xw, bound.var(dir.bias))?;
    let hw = g.matmul(h_prev, w_h)?;
    let gates = g.add(xw, hw)?;
    gated_update(g, gates, Some(c_prev), hidden)
}

/// Runs one direction over a precomputed `x·W_x + b` of shape `[T·B × 4H]`.
/// Returns hidden states in time order. The initial state is zero, so the
/// first step skips the recurrent product and the forget path.
#[allow(clippy::too_many_arguments)]
fn run_direction<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    dir: &DirectionParams,
    xw: Var,
    steps: usize,
    batch: usize,
    hidden: usize,
    reverse: bool,
) -> Result<Vec<Var>> {
    let w_h = bound.var(dir.w_h);
    let mut states: Vec<Option<Var>> = vec![None; steps];
    let mut prev: Option<(Var, Var)> = None;
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..steps).rev())
    } else {
        Box::new(0..steps)
    };
    for t in order {
        let mut gates = g.slice(xw, 0, t * batch, batch)?;
        if let Some((h, _)) = prev {
            let hw = g.matmul(h, w_h)?;
            gates = g.add(gates, hw)?;
        }
        let (h, c) = gated_update(g, gates, prev.map(|(_, c)| c), hidden)?;
        states[t] = Some(h);
        prev = Some((h, c));
    }
    Ok(states
        .into_iter()
        .map(|s| s.expect("every step visited"))
        .collect())
}

/// Feature `f(x)` of shape `[B × 2H]` for every sequence in the batch.
pub fn encode<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    params: &BlstmParams,
    input: &SequenceBatch<S>,
) -> Result<Var> {
    if input.steps == 0 {
        return Err(Error::EmptySequence);
    }
    if input.width() != params.input_width {
        return Err(Error::dim(
            "encode",
            &[input.steps, input.width()],
            &[input.steps, params.input_width],
        ));
    }
    let (steps, batch, hidden) = (input.steps, input.batch, params.hidden);
    let mut layer_input = g.constant(input.frames.clone());
    let mut feature = None;
    for (depth, dirs) in params.layers.iter().enumerate() {
        let mut outputs = Vec::with_capacity(2);
        for (d, dir) in dirs.iter().enumerate() {
            let xw = g.matmul(layer_input, bound.var(dir.w_x))?;
            let xw = g.add_row(xw, bound.var(dir.bias))?;
            outputs.push(run_direction(
                g,
                bound,
                dir,
                xw,
                steps,
                batch,
                hidden,
                d == 1,
            )?);
        }
        let top = depth + 1 == params.layers.len();
        if top && params.readout == Readout::Final {
            feature = Some(g.concat(&[outputs[0][steps - 1], outputs[1][0]], 1)?);
            break;
        }
        let fwd = g.concat(&outputs[0], 0)?;
        let bwd = g.concat(&outputs[1], 0)?;
        layer_input = g.concat(&[fwd, bwd], 1)?;
    }
    match feature {
        Some(f) => Ok(f),
        None => {
            let width = 2 * hidden;
            let seq = g.reshape(layer_input, &[steps, batch, width])?;
            g.mean(seq, Some(0))
        }
    }
}

/// `p = v·W + b`, the position of each feature in prototype space.
pub fn project<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    params: &ProjectionParams,
    v: Var,
) -> Result<Var> {
    let w = bound.var(params.weight);
    if g.shape(v).last() != g.shape(w).first() {
        return Err(Error::dim("project", g.shape(v), g.shape(w)));
    }
    let p = g.matmul(v, w)?;
    g.add_row(p, bound.var(params.bias))
}
