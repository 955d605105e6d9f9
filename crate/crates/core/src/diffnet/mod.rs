//! Dense feed-forward networks with exact reverse-mode gradients.
//!
//! Networks are described by a [`NetworkSpec`] (layer widths plus one
//! activation per weight layer) and parameterized by a single flat `f64`
//! vector ([`NetworkParameters`]). The flat vector *is* the storage; the
//! structured per-layer views are slices into it, so the two views can never
//! disagree. Layout per layer `l` (input width `n`, output width `m`):
//! weight matrix `W_l` in row-major order (`m × n`), then bias `b_l` (`m`).
//!
//! Gradients are computed by ordinary backpropagation. For a scalar-valued
//! network the fused [`value_and_grad`] entry point runs one forward pass,
//! one backward pass, and accumulates `scale · ∂y/∂θ` into a caller-provided
//! flat buffer — the training loop leans on this heavily, so the hot loops
//! are written over contiguous slices.
//!
//! Submodules: [`adam`] (bias-corrected Adam updates) and [`checkpoint`]
//! (single-document text persistence with full `f64` round-trip fidelity).

pub mod adam;
pub mod checkpoint;

pub use adam::{adam_step, AdamState};
pub use checkpoint::NetworkDocument;

use crate::error::{Error, Result};
use crate::rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Elementwise nonlinearity applied after a weight layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed in terms of the *post-activation* value `y`.
    /// ReLU uses the subgradient 0 at the kink; tanh' = 1 − y².
    #[inline]
    fn deriv_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Architecture of a fully-connected network.
///
/// `layer_sizes = [n_0, n_1, ..., n_L]` gives the input width `n_0`, hidden
/// widths, and output width `n_L`; `activations` holds exactly `L` entries,
/// one per weight layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layer_sizes: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl NetworkSpec {
    pub fn new(layer_sizes: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        let spec = NetworkSpec {
            layer_sizes,
            activations,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Convenience builder: `input → hidden... → output` with `hidden_act`
    /// on every hidden layer and `output_act` on the last.
    pub fn mlp(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        hidden_act: Activation,
        output_act: Activation,
    ) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend_from_slice(hidden);
        sizes.push(output_dim);
        let mut acts = vec![hidden_act; hidden.len()];
        acts.push(output_act);
        NetworkSpec::new(sizes, acts)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidInput(
                "network needs at least an input and an output layer".into(),
            ));
        }
        if self.layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::InvalidInput("layer widths must be positive".into()));
        }
        if self.activations.len() != self.layer_sizes.len() - 1 {
            return Err(Error::InvalidInput(format!(
                "expected {} activations, got {}",
                self.layer_sizes.len() - 1,
                self.activations.len()
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Number of weight layers.
    pub fn num_layers(&self) -> usize {
        self.activations.len()
    }

    /// Total number of parameters `P`.
    pub fn param_count(&self) -> usize {
        (0..self.num_layers())
            .map(|l| self.layer_sizes[l] * self.layer_sizes[l + 1] + self.layer_sizes[l + 1])
            .sum()
    }

    /// Flat offsets `(weight_start, bias_start, end)` of layer `l`.
    pub fn layer_span(&self, l: usize) -> (usize, usize, usize) {
        let mut off = 0;
        for k in 0..l {
            off += self.layer_sizes[k] * self.layer_sizes[k + 1] + self.layer_sizes[k + 1];
        }
        let w = off;
        let b = off + self.layer_sizes[l] * self.layer_sizes[l + 1];
        (w, b, b + self.layer_sizes[l + 1])
    }

    /// Flat range covering the final weight layer (weights and bias). Used to
    /// restrict influence computations to the last layer on large networks.
    pub fn last_layer_range(&self) -> std::ops::Range<usize> {
        let (w, _, end) = self.layer_span(self.num_layers() - 1);
        w..end
    }

    pub fn max_width(&self) -> usize {
        *self.layer_sizes.iter().max().unwrap()
    }
}

/// Flat parameter vector for a [`NetworkSpec`].
///
/// The flat vector is the single source of truth; structured accessors are
/// slices into it, so flat and per-layer views agree by construction (the
/// layout arithmetic is additionally checked in debug builds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParameters {
    pub flat: Vec<f64>,
}

impl NetworkParameters {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        NetworkParameters {
            flat: vec![0.0; spec.param_count()],
        }
    }

    /// Seeded uniform initialization: every weight and bias of layer `l` is
    /// drawn from `U[−1/√fan_in, +1/√fan_in]`, in layer order, weights
    /// (row-major) before biases.
    pub fn init_uniform(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut flat = Vec::with_capacity(spec.param_count());
        for l in 0..spec.num_layers() {
            let fan_in = spec.layer_sizes[l] as f64;
            let bound = 1.0 / fan_in.sqrt();
            let n = spec.layer_sizes[l] * spec.layer_sizes[l + 1] + spec.layer_sizes[l + 1];
            for _ in 0..n {
                flat.push(rng::uniform_range(rng, -bound, bound));
            }
        }
        NetworkParameters { flat }
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn check_matches(&self, spec: &NetworkSpec) -> Result<()> {
        if self.flat.len() != spec.param_count() {
            return Err(Error::InvalidInput(format!(
                "parameter vector has {} entries, spec wants {}",
                self.flat.len(),
                spec.param_count()
            )));
        }
        Ok(())
    }

    /// Row-major weight matrix of layer `l`.
    pub fn weights<'a>(&'a self, spec: &NetworkSpec, l: usize) -> &'a [f64] {
        let (w, b, _) = spec.layer_span(l);
        debug_assert!(b <= self.flat.len());
        &self.flat[w..b]
    }

    /// Bias vector of layer `l`.
    pub fn biases<'a>(&'a self, spec: &NetworkSpec, l: usize) -> &'a [f64] {
        let (_, b, e) = spec.layer_span(l);
        debug_assert!(e <= self.flat.len());
        &self.flat[b..e]
    }
}

/// A network bundled with its architecture — the form most of the crate
/// passes around.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: NetworkParameters,
}

impl Network {
    pub fn new(spec: NetworkSpec, params: NetworkParameters) -> Result<Self> {
        spec.validate()?;
        params.check_matches(&spec)?;
        Ok(Network { spec, params })
    }

    pub fn init_uniform(spec: NetworkSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let params = NetworkParameters::init_uniform(&spec, rng);
        Ok(Network { spec, params })
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        forward(&self.spec, &self.params, input)
    }
}

/// Flat gradient of one scalar network output with respect to every
/// parameter, in the same layout as [`NetworkParameters::flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientRecord {
    pub flat: Vec<f64>,
}

/// Reusable forward/backward scratch space for one [`NetworkSpec`].
///
/// `acts[0]` holds the input; `acts[l + 1]` the post-activation output of
/// layer `l`. Activation derivatives are recovered from the stored outputs
/// (valid for ReLU, tanh, and identity), so pre-activations need not be kept.
#[derive(Debug, Clone)]
pub struct Workspace {
    acts: Vec<Vec<f64>>,
    delta_a: Vec<f64>,
    delta_b: Vec<f64>,
}

impl Workspace {
    pub fn for_spec(spec: &NetworkSpec) -> Self {
        let acts = spec.layer_sizes.iter().map(|&n| vec![0.0; n]).collect();
        let w = spec.max_width();
        Workspace {
            acts,
            delta_a: vec![0.0; w],
            delta_b: vec![0.0; w],
        }
    }

    /// Output of the most recent forward pass.
    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulator lanes so the FMA chain pipelines instead
    // of serializing on one register.
    let mut lanes = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for j in 0..4 {
            lanes[j] += xa[j] * xb[j];
        }
    }
    let mut acc = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for (xa, xb) in ca.remainder().iter().zip(cb.remainder().iter()) {
        acc += xa * xb;
    }
    acc
}

#[inline]
fn matvec_bias_act(
    weights: &[f64],
    biases: &[f64],
    act: Activation,
    input: &[f64],
    out: &mut [f64],
) {
    let n = input.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &weights[i * n..(i + 1) * n];
        *o = act.apply(dot(row, input) + biases[i]);
    }
}

/// Forward pass into a reusable workspace; returns the output slice.
pub fn forward_into<'w>(
    spec: &NetworkSpec,
    params: &NetworkParameters,
    input: &[f64],
    ws: &'w mut Workspace,
) -> Result<&'w [f64]> {
    if input.len() != spec.input_dim() {
        return Err(Error::InvalidInput(format!(
            "input has {} entries, network expects {}",
            input.len(),
            spec.input_dim()
        )));
    }
    debug_assert_eq!(params.flat.len(), spec.param_count());
    ws.acts[0].copy_from_slice(input);
    for l in 0..spec.num_layers() {
        let (wo, bo, eo) = spec.layer_span(l);
        let weights = &params.flat[wo..bo];
        let biases = &params.flat[bo..eo];
        // Split borrow: acts[l] is read, acts[l + 1] written.
        let (lo, hi) = ws.acts.split_at_mut(l + 1);
        matvec_bias_act(weights, biases, spec.activations[l], &lo[l], &mut hi[0]);
    }
    Ok(ws.output())
}

/// Allocating forward pass.
pub fn forward(spec: &NetworkSpec, params: &NetworkParameters, input: &[f64]) -> Result<Vec<f64>> {
    params.check_matches(spec)?;
    let mut ws = Workspace::for_spec(spec);
    Ok(forward_into(spec, params, input, &mut ws)?.to_vec())
}

/// Backward pass over the workspace of the most recent forward call.
///
/// Accumulates `scale · ∂(cotangent · y)/∂θ` into `grad_accum` (flat layout)
/// and, if requested, writes `scale · ∂(cotangent · y)/∂x` into `input_grad`.
/// `scale == 0.0` is an exact no-op on the accumulator. The workspace must
/// hold the forward pass for exactly these parameters.
pub fn backward_into(
    spec: &NetworkSpec,
    params: &NetworkParameters,
    ws: &mut Workspace,
    cotangent: &[f64],
    scale: f64,
    grad_accum: &mut [f64],
    mut input_grad: Option<&mut [f64]>,
) -> Result<()> {
    if cotangent.len() != spec.output_dim() {
        return Err(Error::InvalidInput(format!(
            "cotangent has {} entries, network output has {}",
            cotangent.len(),
            spec.output_dim()
        )));
    }
    if grad_accum.len() != spec.param_count() {
        return Err(Error::InvalidInput(format!(
            "gradient buffer has {} entries, network has {} parameters",
            grad_accum.len(),
            spec.param_count()
        )));
    }
    if let Some(ref g) = input_grad {
        if g.len() != spec.input_dim() {
            return Err(Error::InvalidInput(format!(
                "input-gradient buffer has {} entries, input has {}",
                g.len(),
                spec.input_dim()
            )));
        }
    }
    if scale == 0.0 && input_grad.is_none() {
        return Ok(());
    }

    let num_layers = spec.num_layers();
    // delta = dL/dz for the current layer, starting from the top.
    {
        let top = &ws.acts[num_layers];
        let act = spec.activations[num_layers - 1];
        for i in 0..top.len() {
            ws.delta_a[i] = cotangent[i] * act.deriv_from_output(top[i]);
        }
    }

    for l in (0..num_layers).rev() {
        let (wo, bo, eo) = spec.layer_span(l);
        let in_dim = spec.layer_sizes[l];
        let out_dim = spec.layer_sizes[l + 1];
        let weights = &params.flat[wo..bo];

        // Parameter gradients: dL/dW = delta ⊗ x, dL/db = delta.
        if scale != 0.0 {
            let x = &ws.acts[l];
            let gw = &mut grad_accum[wo..bo];
            for i in 0..out_dim {
                let d = ws.delta_a[i] * scale;
                if d != 0.0 {
                    let row = &mut gw[i * in_dim..(i + 1) * in_dim];
                    for (g, xv) in row.iter_mut().zip(x.iter()) {
                        *g += d * xv;
                    }
                }
            }
            let gb = &mut grad_accum[bo..eo];
            for i in 0..out_dim {
                gb[i] += ws.delta_a[i] * scale;
            }
        }

        let need_input = l > 0 || input_grad.is_some();
        if need_input {
            // dL/dx = Wᵀ delta, accumulated row-wise to keep memory contiguous.
            ws.delta_b[..in_dim].fill(0.0);
            for i in 0..out_dim {
                let d = ws.delta_a[i];
                if d != 0.0 {
                    let row = &weights[i * in_dim..(i + 1) * in_dim];
                    for (acc, w) in ws.delta_b[..in_dim].iter_mut().zip(row.iter()) {
                        *acc += d * w;
                    }
                }
            }
            if l > 0 {
                let act = spec.activations[l - 1];
                let prev = &ws.acts[l];
                for i in 0..in_dim {
                    ws.delta_b[i] *= act.deriv_from_output(prev[i]);
                }
                std::mem::swap(&mut ws.delta_a, &mut ws.delta_b);
            } else if let Some(g) = input_grad.as_deref_mut() {
                for (gi, d) in g.iter_mut().zip(ws.delta_b[..in_dim].iter()) {
                    *gi = d * scale;
                }
            }
        }
    }
    Ok(())
}

/// Reusable scratch for batched forward/backward passes: `rows` inputs
/// evaluated through one network in lockstep, stored row-major per layer.
///
/// The batched kernels accumulate in a fixed but different order than the
/// single-row routines (weights are broadcast along the contiguous axis), so
/// per-row results agree with [`forward_into`] to rounding error, not bit for
/// bit. Every order is deterministic, so repeated calls reproduce themselves
/// exactly.
#[derive(Debug, Clone)]
pub struct BatchWorkspace {
    rows: usize,
    /// acts[l]: rows × layer_sizes[l], row-major.
    acts: Vec<Vec<f64>>,
    delta_a: Vec<f64>,
    delta_b: Vec<f64>,
    /// Transposed weights of the current layer (in_dim × out_dim).
    wt: Vec<f64>,
    /// deltas[l] (l ≥ 1): rows × layer_sizes[l] backward deltas, filled only
    /// by [`backward_deltas`].
    deltas: Vec<Vec<f64>>,
}

impl BatchWorkspace {
    pub fn for_spec(spec: &NetworkSpec) -> Self {
        BatchWorkspace {
            rows: 0,
            acts: vec![Vec::new(); spec.layer_sizes.len()],
            delta_a: Vec::new(),
            delta_b: Vec::new(),
            wt: Vec::new(),
            deltas: vec![Vec::new(); spec.layer_sizes.len()],
        }
    }

    fn ensure(&mut self, spec: &NetworkSpec, rows: usize) {
        self.rows = rows;
        for (a, &n) in self.acts.iter_mut().zip(spec.layer_sizes.iter()) {
            a.resize(rows * n, 0.0);
        }
        let w = rows * spec.max_width();
        self.delta_a.resize(w, 0.0);
        self.delta_b.resize(w, 0.0);
        let mut wmax = 0;
        for l in 0..spec.num_layers() {
            wmax = wmax.max(spec.layer_sizes[l] * spec.layer_sizes[l + 1]);
        }
        self.wt.resize(wmax, 0.0);
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Outputs of the most recent batched forward pass, row-major.
    pub fn outputs(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    /// Post-activation values of layer `l` (0 = the input itself), row-major.
    pub fn layer_values(&self, l: usize) -> &[f64] {
        &self.acts[l]
    }

    /// Backward deltas of layer `l ≥ 1` (row-major), as filled by the most
    /// recent [`backward_deltas`] call.
    pub fn layer_deltas(&self, l: usize) -> &[f64] {
        &self.deltas[l]
    }
}

/// Forward pass of `rows` stacked inputs (row-major `rows × input_dim`);
/// per-row results match individual [`forward_into`] calls to rounding
/// error. Returns the stacked outputs.
pub fn forward_batch<'w>(
    spec: &NetworkSpec,
    params: &NetworkParameters,
    inputs: &[f64],
    rows: usize,
    ws: &'w mut BatchWorkspace,
) -> Result<&'w [f64]> {
    if inputs.len() != rows * spec.input_dim() {
        return Err(Error::InvalidInput(format!(
            "batched input holds {} values, expected {} rows × {}",
            inputs.len(),
            rows,
            spec.input_dim()
        )));
    }
    if rows == 0 {
        return Err(Error::InvalidInput("batched forward needs at least one row".into()));
    }
    debug_assert_eq!(params.flat.len(), spec.param_count());
    ws.ensure(spec, rows);
    ws.acts[0].copy_from_slice(inputs);
    for l in 0..spec.num_layers() {
        let (wo, bo, eo) = spec.layer_span(l);
        let weights = &params.flat[wo..bo];
        let biases = &params.flat[bo..eo];
        let n_in = spec.layer_sizes[l];
        let n_out = spec.layer_sizes[l + 1];
        let act = spec.activations[l];
        // Transposed weights let each input component broadcast into one
        // contiguous fused multiply-add over the output axis.
        for k in 0..n_in {
            for o in 0..n_out {
                ws.wt[k * n_out + o] = weights[o * n_in + k];
            }
        }
        let (lo, hi) = ws.acts.split_at_mut(l + 1);
        let src = &lo[l];
        let dst = &mut hi[0];
        for r in 0..rows {
            let x = &src[r * n_in..(r + 1) * n_in];
            let out = &mut dst[r * n_out..(r + 1) * n_out];
            out.copy_from_slice(biases);
            for (k, &xv) in x.iter().enumerate() {
                if xv != 0.0 {
                    let wrow = &ws.wt[k * n_out..(k + 1) * n_out];
                    for (ov, &wv) in out.iter_mut().zip(wrow.iter()) {
                        *ov += xv * wv;
                    }
                }
            }
            for ov in out.iter_mut() {
                *ov = act.apply(*ov);
            }
        }
    }
    Ok(ws.outputs())
}

/// Backward pass over the most recent [`forward_batch`] call.
///
/// `cotangents` is row-major `rows × output_dim`, already carrying any
/// per-row scaling. When `grad_accum` is given, the summed parameter
/// gradient `Σ_r ∂(cot_r · y_r)/∂θ` is accumulated into it; when
/// `input_grads` is given, row `r`'s input gradient is written to it
/// (row-major). Rows are accumulated in index order with weight-row
/// broadcasts, so totals agree with a sequence of single-row backward calls
/// to rounding error, not bit for bit.
pub fn backward_batch(
    spec: &NetworkSpec,
    params: &NetworkParameters,
    ws: &mut BatchWorkspace,
    cotangents: &[f64],
    grad_accum: Option<&mut [f64]>,
    mut input_grads: Option<&mut [f64]>,
) -> Result<()> {
    let rows = ws.rows;
    if rows == 0 {
        return Err(Error::State("no batched forward pass to differentiate".into()));
    }
    if cotangents.len() != rows * spec.output_dim() {
        return Err(Error::InvalidInput(format!(
            "cotangent block holds {} values, expected {} rows × {}",
            cotangents.len(),
            rows,
            spec.output_dim()
        )));
    }
    let mut grad_accum = grad_accum;
    if let Some(ref g) = grad_accum {
        if g.len() != spec.param_count() {
            return Err(Error::InvalidInput(format!(
                "gradient buffer has {} entries, network has {} parameters",
                g.len(),
                spec.param_count()
            )));
        }
    }
    if let Some(ref g) = input_grads {
        if g.len() != rows * spec.input_dim() {
            return Err(Error::InvalidInput(format!(
                "input-gradient block holds {} values, expected {} rows × {}",
                g.len(),
                rows,
                spec.input_dim()
            )));
        }
    }

    let num_layers = spec.num_layers();
    {
        let top = ws.acts[num_layers].as_slice();
        let act = spec.activations[num_layers - 1];
        for (d, (&c, &y)) in ws.delta_a.iter_mut().zip(cotangents.iter().zip(top.iter())) {
            *d = c * act.deriv_from_output(y);
        }
    }

    for l in (0..num_layers).rev() {
        let (wo, bo, eo) = spec.layer_span(l);
        let in_dim = spec.layer_sizes[l];
        let out_dim = spec.layer_sizes[l + 1];
        let weights = &params.flat[wo..bo];

        if let Some(g) = grad_accum.as_deref_mut() {
            // Weight gradient Σ_r δ_r ⊗ x_r, accumulated row by row: each
            // delta component broadcasts into one contiguous fused
            // multiply-add along its weight row.
            let x = ws.acts[l].as_slice();
            let (gw, gb) = g[wo..eo].split_at_mut(bo - wo);
            for r in 0..rows {
                let da = &ws.delta_a[r * out_dim..(r + 1) * out_dim];
                let xr = &x[r * in_dim..(r + 1) * in_dim];
                for (j, &d) in da.iter().enumerate() {
                    gb[j] += d;
                    if d != 0.0 {
                        let row = &mut gw[j * in_dim..(j + 1) * in_dim];
                        for (gv, &xv) in row.iter_mut().zip(xr.iter()) {
                            *gv += d * xv;
                        }
                    }
                }
            }
        }

        let need_input = l > 0 || input_grads.is_some();
        if need_input {
            // dL/dx = Wᵀ delta per row.
            for r in 0..rows {
                let db = &mut ws.delta_b[r * in_dim..(r + 1) * in_dim];
                db.fill(0.0);
                let da = &ws.delta_a[r * out_dim..(r + 1) * out_dim];
                for (j, &d) in da.iter().enumerate() {
                    if d != 0.0 {
                        let row = &weights[j * in_dim..(j + 1) * in_dim];
                        for (acc, w) in db.iter_mut().zip(row.iter()) {
                            *acc += d * w;
                        }
                    }
                }
            }
            if l > 0 {
                let act = spec.activations[l - 1];
                let prev = ws.acts[l].as_slice();
                for (d, &y) in ws.delta_b[..rows * in_dim]
                    .iter_mut()
                    .zip(prev.iter())
                {
                    *d *= act.deriv_from_output(y);
                }
                std::mem::swap(&mut ws.delta_a, &mut ws.delta_b);
            } else if let Some(g) = input_grads.as_deref_mut() {
                g.copy_from_slice(&ws.delta_b[..rows * in_dim]);
            }
        }
    }
    Ok(())
}

/// Per-layer backward deltas of a scalar-output network for every row of the
/// most recent [`forward_batch`] call, retained in the workspace (cotangent 1
/// on the output; no parameter or input gradients are formed).
///
/// Together with the retained activations this is the full per-row parameter
/// gradient in factored form: row `r`'s gradient block for layer `l` is
/// `δ_l[r] ⊗ a_{l-1}[r]` for the weights and `δ_l[r]` for the biases.
pub fn backward_deltas(
    spec: &NetworkSpec,
    params: &NetworkParameters,
    ws: &mut BatchWorkspace,
) -> Result<()> {
    if spec.output_dim() != 1 {
        return Err(Error::InvalidInput(
            "factored per-row gradients are defined for scalar networks".into(),
        ));
    }
    let rows = ws.rows;
    if rows == 0 {
        return Err(Error::State("no batched forward pass to differentiate".into()));
    }
    let num_layers = spec.num_layers();
    for l in 1..=num_layers {
        ws.deltas[l].resize(rows * spec.layer_sizes[l], 0.0);
    }
    {
        let top = ws.acts[num_layers].as_slice();
        let act = spec.activations[num_layers - 1];
        let d = &mut ws.deltas[num_layers];
        for (dv, &y) in d.iter_mut().zip(top.iter()) {
            *dv = act.deriv_from_output(y);
        }
    }
    for l in (1..num_layers).rev() {
        let (wo, bo, _) = spec.layer_span(l);
        let in_dim = spec.layer_sizes[l];
        let out_dim = spec.layer_sizes[l + 1];
        let weights = &params.flat[wo..bo];
        let act = spec.activations[l - 1];
        let (lo, hi) = ws.deltas.split_at_mut(l + 1);
        let upper = hi[0].as_slice();
        let cur = &mut lo[l];
        let prev = ws.acts[l].as_slice();
        for r in 0..rows {
            let db = &mut cur[r * in_dim..(r + 1) * in_dim];
            db.fill(0.0);
            let da = &upper[r * out_dim..(r + 1) * out_dim];
            for (j, &d) in da.iter().enumerate() {
                if d != 0.0 {
                    let row = &weights[j * in_dim..(j + 1) * in_dim];
                    for (acc, &w) in db.iter_mut().zip(row.iter()) {
                        *acc += d * w;
                    }
                }
            }
            let pr = &prev[r * in_dim..(r + 1) * in_dim];
            for (dv, &y) in db.iter_mut().zip(pr.iter()) {
                *dv *= act.deriv_from_output(y);
            }
        }
    }
    Ok(())
}

/// Gram matrix (row-major `rows × rows`) of the per-row full-parameter
/// gradients retained by [`backward_deltas`], without materializing any
/// gradient row: since row `r`'s layer-`l` block is `δ_l[r] ⊗ a_{l-1}[r]`
/// plus the bias part `δ_l[r]`,
///
/// ```text
/// ⟨g_i, g_j⟩ = Σ_l ⟨δ_l[i], δ_l[j]⟩ · (⟨a_{l-1}[i], a_{l-1}[j]⟩ + 1)
/// ```
///
/// which matches explicit row dot products to rounding error at a fraction
/// of their cost. The result is written into `gram` (cleared and resized).
pub fn gradient_gram(
    spec: &NetworkSpec,
    ws: &BatchWorkspace,
    gram: &mut Vec<f64>,
) -> Result<()> {
    let rows = ws.rows;
    if rows == 0 {
        return Err(Error::State("no batched forward pass to differentiate".into()));
    }
    let num_layers = spec.num_layers();
    for l in 1..=num_layers {
        if ws.deltas[l].len() != rows * spec.layer_sizes[l] {
            return Err(Error::State(
                "factored gradients need a backward-deltas pass over the same batch".into(),
            ));
        }
    }
    gram.clear();
    gram.resize(rows * rows, 0.0);
    for l in 1..=num_layers {
        let w = spec.layer_sizes[l];
        let a_w = spec.layer_sizes[l - 1];
        let d = ws.deltas[l].as_slice();
        let a = ws.acts[l - 1].as_slice();
        for i in 0..rows {
            let di = &d[i * w..(i + 1) * w];
            let ai = &a[i * a_w..(i + 1) * a_w];
            for j in 0..=i {
                let dd = dot(di, &d[j * w..(j + 1) * w]);
                if dd != 0.0 {
                    let aa = dot(ai, &a[j * a_w..(j + 1) * a_w]);
                    gram[i * rows + j] += dd * (aa + 1.0);
                }
            }
        }
    }
    for i in 0..rows {
        for j in (i + 1)..rows {
            gram[i * rows + j] = gram[j * rows + i];
        }
    }
    Ok(())
}

/// Gradient of output component `output_index` with respect to all
/// parameters, at the given input.
pub fn grad_params(
    spec: &NetworkSpec,
    params: &NetworkParameters,
    input: &[f64],
    output_index: usize,
) -> Result<GradientRecord> {
    params.check_matches(spec)?;
    if output_index >= spec.output_dim() {
        return Err(Error::InvalidInput(format!(
            "output index {} out of range for {}-dimensional output",
            output_index,
            spec.output_dim()
        )));
    }
    let mut ws = Workspace::for_spec(spec);
    forward_into(spec, params, input, &mut ws)?;
    let mut cot = vec![0.0; spec.output_dim()];
    cot[output_index] = 1.0;
    let mut flat = vec![0.0; spec.param_count()];
    backward_into(spec, params, &mut ws, &cot, 1.0, &mut flat, None)?;
    Ok(GradientRecord { flat })
}

/// Fused scalar-network evaluation: returns `y` and accumulates
/// `scale · ∂y/∂θ` into `grad_accum`. The network must have a 1-dimensional
/// output.
pub fn value_and_grad(
    spec: &NetworkSpec,
    params: &NetworkParameters,
    input: &[f64],
    ws: &mut Workspace,
    grad_accum: &mut [f64],
    scale: f64,
) -> Result<f64> {
    if spec.output_dim() != 1 {
        return Err(Error::InvalidInput(
            "value_and_grad requires a scalar-output network".into(),
        ));
    }
    forward_into(spec, params, input, ws)?;
    let y = ws.output()[0];
    backward_into(spec, params, ws, &[1.0], scale, grad_accum, None)?;
    Ok(y)
}

/// Polyak soft update: `target ← tau · online + (1 − tau) · target`.
pub fn soft_update(target: &mut [f64], online: &[f64], tau: f64) -> Result<()> {
    if target.len() != online.len() {
        return Err(Error::InvalidInput(format!(
            "soft update length mismatch: target {}, online {}",
            target.len(),
            online.len()
        )));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidInput(format!(
            "tau must lie in [0, 1], got {tau}"
        )));
    }
    for (t, o) in target.iter_mut().zip(online.iter()) {
        *t = tau * o + (1.0 - tau) * *t;
    }
    Ok(())
}
