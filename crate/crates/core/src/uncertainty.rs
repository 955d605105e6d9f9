//! Influence-based uncertainty scores and trust-region refinement targets
//! for the safety critic.
//!
//! The per-sample uncertainty score is the quadratic form
//!
//! ```text
//! u = gᵀ (Σᵢ gᵢ gᵢᵀ + δ·I)⁻¹ g
//! ```
//!
//! where `gᵢ` are per-sample parameter gradients of the critic output at a
//! frozen parameter snapshot and `δ > 0` is a damping constant keeping the
//! curvature proxy invertible. The adjusted weight `ũ = log(1+u)·(1 + 1{Q >
//! batch mean})` doubles conservatism on samples whose predicted cost is
//! already above the batch mean.
//!
//! Two evaluation routes are provided. [`gauss_newton_matrix`] plus
//! [`influence`] build and solve the dense `P′×P′` system directly — the
//! reference route, practical for small parameter counts. The
//! [`InfluenceEstimator`] answers the same queries through the `B×B` Gram
//! matrix `S = G Gᵀ` using the Woodbury identity
//!
//! ```text
//! (δI + GᵀG)⁻¹ = δ⁻¹·(I − Gᵀ (δI + G Gᵀ)⁻¹ G)
//! ```
//!
//! which for a batch row reduces to `uᵢ = 1 − δ·[(δI + S)⁻¹]ᵢᵢ` — exact, free
//! of the large-magnitude cancellation in the naive form, and cubic in the
//! batch size instead of the parameter count. Both routes are asserted equal
//! in tests.
//!
//! Refinement: the top-`n` most uncertain samples get synthetic targets by
//! inverse-distance interpolation over their nearest stored neighbours'
//! costs, and the critic is regressed toward those targets under a hinged
//! trust penalty `β·max(0, ½(Q − Q_old)² − ε)²` that caps movement away from
//! the pre-refinement prediction.

use crate::diffnet::{backward_into, forward_into, Network, NetworkParameters, NetworkSpec, Workspace};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Distances below this are treated as exact matches during interpolation.
pub const EXACT_DISTANCE_EPS: f64 = 1e-9;

/// Largest parameter count for which influence runs over all parameters by
/// default; larger networks restrict to the last layer.
pub const FULL_SCOPE_MAX_PARAMS: usize = 5000;

/// Which slice of the parameter vector influence scores are computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfluenceScope {
    FullParameters,
    LastLayer,
}

/// Scope selection rule: full parameters while the dense reference solve
/// stays cheap, last layer beyond that.
pub fn auto_scope(param_count: usize) -> InfluenceScope {
    if param_count <= FULL_SCOPE_MAX_PARAMS {
        InfluenceScope::FullParameters
    } else {
        InfluenceScope::LastLayer
    }
}

/// Damping and scope for influence computation.
#[derive(Debug, Clone, Copy)]
pub struct InfluenceConfig {
    pub damping: f64,
    pub scope: InfluenceScope,
}

impl InfluenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0) || !self.damping.is_finite() {
            return Err(Error::InvalidInput(format!(
                "influence damping must be positive and finite, got {}",
                self.damping
            )));
        }
        Ok(())
    }
}

/// The byte range of the flat parameter vector covered by `scope`.
pub fn scope_range(spec: &NetworkSpec, scope: InfluenceScope) -> (usize, usize) {
    match scope {
        InfluenceScope::FullParameters => (0, spec.param_count()),
        InfluenceScope::LastLayer => {
            let range = spec.last_layer_range();
            (range.start, range.end - range.start)
        }
    }
}

/// One sample's uncertainty score and its adjusted conservatism weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyScore {
    pub u: f64,
    pub u_tilde: f64,
    pub above_mean: bool,
}

/// `ũ = log(1+u)·(1 + 1{q > batch_mean})`; the indicator is strict, so a
/// value exactly at the mean gets the factor 1.
pub fn adjust_weight(u: f64, q_value: f64, batch_mean: f64) -> Result<UncertaintyScore> {
    if !u.is_finite() || u < 0.0 {
        return Err(Error::InvalidInput(format!(
            "uncertainty score must be finite and nonnegative, got {u}"
        )));
    }
    let above_mean = q_value > batch_mean;
    let factor = if above_mean { 2.0 } else { 1.0 };
    Ok(UncertaintyScore {
        u,
        u_tilde: u.ln_1p() * factor,
        above_mean,
    })
}

/// Indices of the `n` largest scores, ties broken toward the lower index,
/// returned in descending-score order.
pub fn select_top_uncertain(scores: &[f64], n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::InvalidInput("top-uncertain count must be at least 1".into()));
    }
    if n > scores.len() {
        return Err(Error::State(format!(
            "asked for top {n} of {} scores",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(n);
    Ok(order)
}

// ---------------------------------------------------------------------------
// Dense symmetric positive-definite linear algebra (reference route).
// ---------------------------------------------------------------------------

/// In-place lower-triangular Cholesky factorization of a symmetric
/// positive-definite matrix stored row-major. The strict upper triangle is
/// left untouched.
fn cholesky_factor(a: &mut [f64], n: usize) -> Result<()> {
    debug_assert_eq!(a.len(), n * n);
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return Err(Error::Numeric(format!(
                "matrix is not positive definite (pivot {d} at column {j})"
            )));
        }
        let ljj = d.sqrt();
        a[j * n + j] = ljj;
        let inv = 1.0 / ljj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s * inv;
        }
    }
    Ok(())
}

/// Solves `L y = b` in place given the lower factor.
fn forward_substitute(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// `Σᵢ gᵢgᵢᵀ + damping·I` for `rows` holding `b` stacked gradients of length
/// `p`, returned as a dense row-major `p×p` matrix.
pub fn gauss_newton_matrix(rows: &[f64], b: usize, p: usize, damping: f64) -> Result<Vec<f64>> {
    if b == 0 {
        return Err(Error::InvalidInput("curvature sum needs at least one gradient".into()));
    }
    if rows.len() != b * p {
        return Err(Error::InvalidInput(format!(
            "expected {b}×{p} gradient rows, got {} values",
            rows.len()
        )));
    }
    if !(damping > 0.0) {
        return Err(Error::InvalidInput(format!("damping must be positive, got {damping}")));
    }
    let mut m = vec![0.0; p * p];
    for r in 0..b {
        let g = &rows[r * p..(r + 1) * p];
        for i in 0..p {
            let gi = g[i];
            if gi == 0.0 {
                continue;
            }
            let row = &mut m[i * p..(i + 1) * p];
            for (mij, &gj) in row.iter_mut().zip(g.iter()) {
                *mij += gi * gj;
            }
        }
    }
    for i in 0..p {
        m[i * p + i] += damping;
    }
    Ok(m)
}

/// `u = gᵀ M⁻¹ g` by Cholesky factorization of the dense matrix.
pub fn influence(query: &[f64], matrix: &[f64], p: usize) -> Result<f64> {
    if query.len() != p || matrix.len() != p * p {
        return Err(Error::InvalidInput(format!(
            "influence dimensions disagree: query {} vs matrix for {p}",
            query.len()
        )));
    }
    let mut chol = matrix.to_vec();
    cholesky_factor(&mut chol, p)?;
    let mut x = query.to_vec();
    forward_substitute(&chol, p, &mut x);
    // u = ‖L⁻¹g‖² — already the full quadratic form, no back-substitution
    // needed, and nonnegative by construction.
    let u = x.iter().map(|v| v * v).sum::<f64>();
    Ok(u)
}

// ---------------------------------------------------------------------------
// Batch estimator (Gram-matrix route).
// ---------------------------------------------------------------------------

/// Influence queries against one minibatch's curvature proxy, answered
/// through the `B×B` Gram matrix of the per-sample gradients.
#[derive(Debug, Clone)]
pub struct InfluenceEstimator {
    rows: Vec<f64>,
    b: usize,
    p: usize,
    /// Lower Cholesky factor of `δI + G Gᵀ` (`b×b`, row-major).
    chol: Vec<f64>,
    damping: f64,
}

impl InfluenceEstimator {
    /// Builds the estimator from `b` stacked gradient rows of length `p`
    /// (taking ownership — the rows are needed again for off-batch queries).
    pub fn from_rows(rows: Vec<f64>, b: usize, p: usize, damping: f64) -> Result<Self> {
        if b == 0 || p == 0 {
            return Err(Error::InvalidInput("estimator needs at least one gradient row".into()));
        }
        if rows.len() != b * p {
            return Err(Error::InvalidInput(format!(
                "expected {b}×{p} gradient rows, got {} values",
                rows.len()
            )));
        }
        if !(damping > 0.0) {
            return Err(Error::InvalidInput(format!("damping must be positive, got {damping}")));
        }
        let mut gram = vec![0.0; b * b];
        for i in 0..b {
            let gi = &rows[i * p..(i + 1) * p];
            for j in 0..=i {
                let gj = &rows[j * p..(j + 1) * p];
                let dot: f64 = gi.iter().zip(gj.iter()).map(|(a, c)| a * c).sum();
                gram[i * b + j] = dot;
                gram[j * b + i] = dot;
            }
        }
        let mut chol = gram.clone();
        for i in 0..b {
            chol[i * b + i] += damping;
        }
        cholesky_factor(&mut chol, b)?;
        Ok(InfluenceEstimator {
            rows,
            b,
            p,
            chol,
            damping,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.b
    }

    pub fn grad_dim(&self) -> usize {
        self.p
    }

    pub fn grad_row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.p..(i + 1) * self.p]
    }

    /// Releases the owned gradient rows (so hot loops can reuse the
    /// allocation).
    pub fn into_rows(self) -> Vec<f64> {
        self.rows
    }

    /// Influence scores of every batch row against the batch's own curvature
    /// sum, via `uᵢ = 1 − δ·[(δI + S)⁻¹]ᵢᵢ = 1 − δ·‖L⁻¹eᵢ‖²`.
    pub fn batch_influences(&self) -> Vec<f64> {
        influences_from_chol(&self.chol, self.b, self.damping)
    }

    /// Influence of an arbitrary query gradient (length `p`) against this
    /// batch's curvature sum:
    /// `u = (gᵀg − qᵀ(δI + S)⁻¹q)/δ` with `q = G g`. Rounding can push the
    /// difference a hair negative; it is clamped at zero.
    pub fn query_influence(&self, query: &[f64]) -> Result<f64> {
        if query.len() != self.p {
            return Err(Error::InvalidInput(format!(
                "query gradient has length {}, estimator rows have {}",
                query.len(),
                self.p
            )));
        }
        let b = self.b;
        let mut q = vec![0.0; b];
        for i in 0..b {
            let gi = &self.rows[i * self.p..(i + 1) * self.p];
            q[i] = gi.iter().zip(query.iter()).map(|(a, c)| a * c).sum();
        }
        forward_substitute(&self.chol, b, &mut q);
        let reduced: f64 = q.iter().map(|v| v * v).sum();
        let gtg: f64 = query.iter().map(|v| v * v).sum();
        Ok(((gtg - reduced) / self.damping).max(0.0))
    }
}

fn influences_from_chol(chol: &[f64], b: usize, damping: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(b);
    let mut e = vec![0.0; b];
    for i in 0..b {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[i] = 1.0;
        forward_substitute(chol, b, &mut e);
        let nrm2: f64 = e.iter().map(|v| v * v).sum();
        out.push((1.0 - damping * nrm2).max(0.0));
    }
    out
}

/// Batch influence scores straight from a precomputed gradient Gram matrix
/// `S = G Gᵀ` (row-major `b×b`): `uᵢ = 1 − δ·[(δI + S)⁻¹]ᵢᵢ`, exactly as
/// [`InfluenceEstimator::batch_influences`] computes them, for callers that
/// obtain the Gram matrix without materializing gradient rows.
pub fn batch_influences_from_gram(gram: &[f64], b: usize, damping: f64) -> Result<Vec<f64>> {
    if b == 0 || gram.len() != b * b {
        return Err(Error::InvalidInput(format!(
            "expected a {b}×{b} Gram matrix, got {} values",
            gram.len()
        )));
    }
    if !(damping > 0.0) {
        return Err(Error::InvalidInput(format!("damping must be positive, got {damping}")));
    }
    let mut chol = gram.to_vec();
    for i in 0..b {
        chol[i * b + i] += damping;
    }
    cholesky_factor(&mut chol, b)?;
    Ok(influences_from_chol(&chol, b, damping))
}

/// Writes the scope-restricted gradient of the scalar network output at
/// `input` into `row`.
pub fn scoped_grad_row(
    spec: &NetworkSpec,
    params: &NetworkParameters,
    input: &[f64],
    scope: InfluenceScope,
    ws: &mut Workspace,
    grad_buf: &mut [f64],
    row: &mut [f64],
) -> Result<()> {
    if spec.output_dim() != 1 {
        return Err(Error::InvalidInput(
            "influence gradients are defined for scalar critics".into(),
        ));
    }
    let (off, len) = scope_range(spec, scope);
    if row.len() != len {
        return Err(Error::InvalidInput(format!(
            "scope slice has length {len}, output row has {}",
            row.len()
        )));
    }
    if grad_buf.len() != spec.param_count() {
        return Err(Error::InvalidInput("gradient buffer length mismatch".into()));
    }
    grad_buf.iter_mut().for_each(|g| *g = 0.0);
    forward_into(spec, params, input, ws)?;
    backward_into(spec, params, ws, &[1.0], 1.0, grad_buf, None)?;
    row.copy_from_slice(&grad_buf[off..off + len]);
    Ok(())
}

// ---------------------------------------------------------------------------
// Interpolation and refinement.
// ---------------------------------------------------------------------------

/// Refinement stage settings.
#[derive(Debug, Clone, Copy)]
pub struct RefineConfig {
    /// How many of the most uncertain batch samples to refine per update.
    pub top_n: usize,
    /// Neighbour count for interpolation.
    pub neighbours: usize,
    /// Trust-penalty coefficient.
    pub beta: f64,
    /// Hinge threshold on the squared-deviation divergence.
    pub eps_trust: f64,
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_n < 1 {
            return Err(Error::Config("refine top-n must be at least 1".into()));
        }
        if self.neighbours < 1 {
            return Err(Error::Config("refine neighbour count must be at least 1".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("trust coefficient must be nonnegative, got {}", self.beta)));
        }
        if !(self.eps_trust >= 0.0) {
            return Err(Error::Config(format!("trust threshold must be nonnegative, got {}", self.eps_trust)));
        }
        Ok(())
    }
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            top_n: 4,
            neighbours: 5,
            beta: 1.0,
            eps_trust: 0.01,
        }
    }
}

/// A synthetic regression target for one uncertain sample.
#[derive(Debug, Clone)]
pub struct InterpolatedTarget {
    /// Concatenated `(state, action)` input of the uncertain anchor.
    pub input: Vec<f64>,
    /// Neighbour costs, in neighbour order.
    pub costs: Vec<f64>,
    /// Convex interpolation weights (nonnegative, summing to 1).
    pub weights: Vec<f64>,
    /// The interpolated cost `Σ wₖ cₖ`.
    pub target: f64,
}

/// Inverse-distance interpolation of neighbour costs:
/// `wₖ ∝ 1/dₖ`, normalized. Any distance below [`EXACT_DISTANCE_EPS`] makes
/// that neighbour (the first such, if several) the sole contributor.
pub fn interpolate_cost(
    anchor_input: Vec<f64>,
    costs: &[f64],
    distances: &[f64],
) -> Result<InterpolatedTarget> {
    if costs.is_empty() || costs.len() != distances.len() {
        return Err(Error::InvalidInput(format!(
            "interpolation needs matching nonempty costs and distances, got {} and {}",
            costs.len(),
            distances.len()
        )));
    }
    for &d in distances {
        if !d.is_finite() || d < 0.0 {
            return Err(Error::InvalidInput(format!("distances must be finite and nonnegative, got {d}")));
        }
    }
    let k = costs.len();
    let mut weights = vec![0.0; k];
    if let Some(hit) = distances.iter().position(|&d| d < EXACT_DISTANCE_EPS) {
        weights[hit] = 1.0;
    } else {
        let mut total = 0.0;
        for (w, &d) in weights.iter_mut().zip(distances.iter()) {
            *w = 1.0 / d;
            total += *w;
        }
        for w in &mut weights {
            *w /= total;
        }
    }
    let target = weights.iter().zip(costs.iter()).map(|(w, c)| w * c).sum();
    Ok(InterpolatedTarget {
        input: anchor_input,
        costs: costs.to_vec(),
        weights,
        target,
    })
}

/// Value and gradient output of [`refine_loss`].
#[derive(Debug, Clone)]
pub struct RefineOutput {
    pub loss: f64,
    /// Flat gradient with respect to the online safety-critic parameters.
    pub grad: Vec<f64>,
    /// How many targets triggered the trust hinge.
    pub trust_hits: usize,
}

/// Trust-regularized regression of the critic onto interpolated targets:
///
/// ```text
/// mean_u [ ½(Q(x_u) − ĉ_u)² + β·max(0, ½(Q(x_u) − Q_old(x_u))² − ε)² ]
/// ```
///
/// `Q_old` is evaluated under the frozen pre-refinement parameters; gradients
/// flow only through the live `Q`.
pub fn refine_loss(
    targets: &[InterpolatedTarget],
    safety: &Network,
    frozen_old: &NetworkParameters,
    beta: f64,
    eps_trust: f64,
    ws: &mut Workspace,
) -> Result<RefineOutput> {
    if targets.is_empty() {
        return Err(Error::InvalidInput("refinement needs at least one target".into()));
    }
    let inv_n = 1.0 / targets.len() as f64;
    let mut grad = vec![0.0; safety.spec.param_count()];
    let mut loss = 0.0;
    let mut trust_hits = 0;
    let mut old_ws = Workspace::for_spec(&safety.spec);
    for t in targets {
        forward_into(&safety.spec, frozen_old, &t.input, &mut old_ws)?;
        let q_old = old_ws.output()[0];
        forward_into(&safety.spec, &safety.params, &t.input, ws)?;
        let q = ws.output()[0];

        let res = q - t.target;
        let dev = q - q_old;
        let hinge = (0.5 * dev * dev - eps_trust).max(0.0);
        if hinge > 0.0 {
            trust_hits += 1;
        }
        loss += 0.5 * res * res + beta * hinge * hinge;
        let dq = res + beta * 2.0 * hinge * dev;
        backward_into(&safety.spec, &safety.params, ws, &[1.0], dq * inv_n, &mut grad, None)?;
    }
    Ok(RefineOutput {
        loss: loss * inv_n,
        grad,
        trust_hits,
    })
}

/// Per-sample gradient rows at a frozen snapshot, stacked row-major, ready
/// for [`InfluenceEstimator::from_rows`].
pub fn gradient_rows(
    spec: &NetworkSpec,
    frozen: &NetworkParameters,
    inputs: impl Iterator<Item = Vec<f64>>,
    scope: InfluenceScope,
) -> Result<(Vec<f64>, usize)> {
    let (_, len) = scope_range(spec, scope);
    let mut ws = Workspace::for_spec(spec);
    let mut grad_buf = vec![0.0; spec.param_count()];
    let mut rows = Vec::new();
    let mut count = 0;
    for input in inputs {
        let start = rows.len();
        rows.resize(start + len, 0.0);
        scoped_grad_row(spec, frozen, &input, scope, &mut ws, &mut grad_buf, &mut rows[start..])?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidInput("gradient row construction needs at least one input".into()));
    }
    Ok((rows, count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{grad_params, Activation};
    use crate::rng::{substream, uniform_range};

    /// Independent dense-inverse oracle: Gauss–Jordan with partial pivoting.
    fn explicit_inverse(m: &[f64], n: usize) -> Vec<f64> {
        let mut a = m.to_vec();
        let mut inv = vec![0.0; n * n];
        for i in 0..n {
            inv[i * n + i] = 1.0;
        }
        for col in 0..n {
            let mut piv = col;
            for r in (col + 1)..n {
                if a[r * n + col].abs() > a[piv * n + col].abs() {
                    piv = r;
                }
            }
            if piv != col {
                for c in 0..n {
                    a.swap(col * n + c, piv * n + c);
                    inv.swap(col * n + c, piv * n + c);
                }
            }
            let d = a[col * n + col];
            assert!(d != 0.0, "singular oracle input");
            for c in 0..n {
                a[col * n + c] /= d;
                inv[col * n + c] /= d;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = a[r * n + col];
                if f == 0.0 {
                    continue;
                }
                for c in 0..n {
                    a[r * n + c] -= f * a[col * n + c];
                    inv[r * n + c] -= f * inv[col * n + c];
                }
            }
        }
        inv
    }

    fn quad_form(q: &[f64], m: &[f64], n: usize) -> f64 {
        let mut out = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += m[i * n + j] * q[j];
            }
            out += q[i] * row;
        }
        out
    }

    fn random_rows(rng: &mut rand_chacha::ChaCha8Rng, b: usize, p: usize) -> Vec<f64> {
        (0..b * p).map(|_| uniform_range(rng, -1.5, 1.5)).collect()
    }

    #[test]
    fn gauss_newton_matrix_matches_outer_product_oracle() {
        let mut rng = substream(1, "gn");
        let (b, p) = (3, 4);
        let rows = random_rows(&mut rng, b, p);
        let m = gauss_newton_matrix(&rows, b, p, 0.37).unwrap();
        for i in 0..p {
            for j in 0..p {
                let mut want = if i == j { 0.37 } else { 0.0 };
                for r in 0..b {
                    want += rows[r * p + i] * rows[r * p + j];
                }
                assert!((m[i * p + j] - want).abs() < 1e-12);
                assert_eq!(m[i * p + j].to_bits(), m[j * p + i].to_bits());
            }
        }
    }

    #[test]
    fn single_gradient_matches_rank_one_closed_form() {
        // One gradient g = (1, 0), damping 1: u = ‖g‖²/(‖g‖² + δ) = 1/2.
        let rows = vec![1.0, 0.0];
        let m = gauss_newton_matrix(&rows, 1, 2, 1.0).unwrap();
        assert_eq!(m, vec![2.0, 0.0, 0.0, 1.0]);
        let u = influence(&[1.0, 0.0], &m, 2).unwrap();
        assert!((u - 0.5).abs() < 1e-14);
        // Zero query has zero influence.
        assert_eq!(influence(&[0.0, 0.0], &m, 2).unwrap(), 0.0);
    }

    #[test]
    fn influence_matches_explicit_inverse_oracle() {
        let mut rng = substream(2, "gn");
        for trial in 0..40 {
            let b = 1 + (trial % 6);
            let p = 2 + (trial % 7);
            let rows = random_rows(&mut rng, b, p);
            let m = gauss_newton_matrix(&rows, b, p, 1e-3).unwrap();
            let inv = explicit_inverse(&m, p);
            let q: Vec<f64> = (0..p).map(|_| uniform_range(&mut rng, -2.0, 2.0)).collect();
            let want = quad_form(&q, &inv, p);
            let got = influence(&q, &m, p).unwrap();
            assert!(
                (got - want).abs() < 1e-8,
                "trial {trial}: {got} vs oracle {want}"
            );
            assert!(got >= 0.0);
        }
    }

    #[test]
    fn estimator_agrees_with_dense_route_for_batch_and_external_queries() {
        let mut rng = substream(3, "gn");
        for trial in 0..25 {
            let b = 2 + (trial % 5);
            let p = 3 + (trial % 6);
            let damping = [1e-6, 1e-3, 0.5][trial % 3];
            let rows = random_rows(&mut rng, b, p);
            let est = InfluenceEstimator::from_rows(rows.clone(), b, p, damping).unwrap();
            let m = gauss_newton_matrix(&rows, b, p, damping).unwrap();

            let batch_u = est.batch_influences();
            for i in 0..b {
                let dense =
                    influence(&rows[i * p..(i + 1) * p], &m, p).unwrap();
                assert!(
                    (batch_u[i] - dense).abs() < 1e-9 * dense.max(1.0),
                    "trial {trial} row {i}: gram {} vs dense {dense}",
                    batch_u[i]
                );
                // A batch member's influence on a sum including itself is a
                // leverage score, hence at most 1.
                assert!(batch_u[i] <= 1.0 + 1e-9);
                assert!(batch_u[i] >= 0.0);
                let via_query = est.query_influence(&rows[i * p..(i + 1) * p]).unwrap();
                assert!((via_query - dense).abs() < 1e-6 * dense.max(1.0));
            }

            let q: Vec<f64> = (0..p).map(|_| uniform_range(&mut rng, -2.0, 2.0)).collect();
            let dense_q = influence(&q, &m, p).unwrap();
            let gram_q = est.query_influence(&q).unwrap();
            assert!(
                (gram_q - dense_q).abs() < 1e-6 * dense_q.max(1.0),
                "trial {trial}: query {gram_q} vs dense {dense_q}"
            );
        }
    }

    #[test]
    fn influence_is_nonnegative_over_many_random_cases() {
        let mut rng = substream(4, "gn");
        for trial in 0..1000 {
            let b = 1 + (trial % 4);
            let p = 2 + (trial % 5);
            let rows = random_rows(&mut rng, b, p);
            let est = InfluenceEstimator::from_rows(rows, b, p, 1e-6).unwrap();
            for u in est.batch_influences() {
                assert!(u >= 0.0 && u.is_finite(), "trial {trial}: u = {u}");
            }
        }
    }

    #[test]
    fn duplicating_the_query_gradient_never_increases_influence() {
        let mut rng = substream(5, "gn");
        for trial in 0..200 {
            let b = 1 + (trial % 5);
            let p = 2 + (trial % 6);
            let mut rows = random_rows(&mut rng, b, p);
            let query: Vec<f64> = rows[0..p].to_vec();
            let m1 = gauss_newton_matrix(&rows, b, p, 1e-4).unwrap();
            let u1 = influence(&query, &m1, p).unwrap();
            rows.extend_from_slice(&query);
            let m2 = gauss_newton_matrix(&rows, b + 1, p, 1e-4).unwrap();
            let u2 = influence(&query, &m2, p).unwrap();
            assert!(
                u2 <= u1 + 1e-10,
                "trial {trial}: duplicate raised influence {u1} -> {u2}"
            );
        }
    }

    #[test]
    fn adjusted_weight_follows_the_indicator_rule() {
        // u = e − 1 above the mean: ln(e)·2 = 2.
        let s = adjust_weight(std::f64::consts::E - 1.0, 1.0, 0.0).unwrap();
        assert!((s.u_tilde - 2.0).abs() < 1e-12);
        assert!(s.above_mean);
        // Exactly at the mean the indicator is 0: u = 3 → ln 4.
        let s = adjust_weight(3.0, 0.7, 0.7).unwrap();
        assert!(!s.above_mean);
        assert!((s.u_tilde - 4.0f64.ln()).abs() < 1e-12);
        assert!((s.u_tilde - 1.3862943611198906).abs() < 1e-12);
        // u = 0 is 0 regardless.
        assert_eq!(adjust_weight(0.0, 5.0, 0.0).unwrap().u_tilde, 0.0);
        assert!(adjust_weight(-1e-12, 0.0, 0.0).is_err());
        assert!(adjust_weight(f64::NAN, 0.0, 0.0).is_err());
    }

    #[test]
    fn top_uncertain_selection_matches_sort_oracle() {
        let scores = [0.3, 0.9, 0.1, 0.9, 0.5];
        // Descending with lower-index tie-break: 1 (0.9), 3 (0.9), 4 (0.5)…
        assert_eq!(select_top_uncertain(&scores, 3).unwrap(), vec![1, 3, 4]);
        assert_eq!(select_top_uncertain(&scores, 5).unwrap(), vec![1, 3, 4, 0, 2]);
        let flat = [2.0; 6];
        assert_eq!(select_top_uncertain(&flat, 3).unwrap(), vec![0, 1, 2]);
        assert!(select_top_uncertain(&scores, 6).is_err());
        assert!(select_top_uncertain(&scores, 0).is_err());
    }

    #[test]
    fn interpolation_matches_direct_arithmetic() {
        // Distances (1, 2, 4), costs (0, 1, 2): weights (4/7, 2/7, 1/7).
        let t = interpolate_cost(vec![0.0], &[0.0, 1.0, 2.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((t.weights[0] - 4.0 / 7.0).abs() < 1e-15);
        assert!((t.weights[1] - 2.0 / 7.0).abs() < 1e-15);
        assert!((t.weights[2] - 1.0 / 7.0).abs() < 1e-15);
        assert!((t.target - 4.0 / 7.0).abs() < 1e-15);

        // Single neighbour takes it all.
        let t = interpolate_cost(vec![0.0], &[0.8], &[3.0]).unwrap();
        assert_eq!(t.weights, vec![1.0]);
        assert_eq!(t.target, 0.8);

        // Equidistant neighbours average.
        let t = interpolate_cost(vec![0.0], &[0.0, 1.0], &[2.5, 2.5]).unwrap();
        assert!((t.target - 0.5).abs() < 1e-15);

        // Exact match dominates; first one wins when several match.
        let t = interpolate_cost(vec![0.0], &[0.3, 0.6, 0.9], &[0.5, 1e-12, 0.0]).unwrap();
        assert_eq!(t.weights, vec![0.0, 1.0, 0.0]);
        assert_eq!(t.target, 0.6);
    }

    #[test]
    fn interpolation_is_a_convex_combination_over_random_cases() {
        let mut rng = substream(6, "interp");
        for trial in 0..1000 {
            let k = 1 + (trial % 7);
            let costs: Vec<f64> = (0..k).map(|_| uniform_range(&mut rng, -1.0, 3.0)).collect();
            let dists: Vec<f64> = (0..k).map(|_| uniform_range(&mut rng, 1e-6, 5.0)).collect();
            let t = interpolate_cost(vec![0.0], &costs, &dists).unwrap();
            let sum: f64 = t.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "trial {trial}: weights sum {sum}");
            assert!(t.weights.iter().all(|&w| w >= 0.0));
            let lo = costs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = costs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(
                t.target >= lo - 1e-12 && t.target <= hi + 1e-12,
                "trial {trial}: target {} outside hull [{lo}, {hi}]",
                t.target
            );
        }
    }

    fn scalar_net(value_weight: f64, bias: f64) -> Network {
        let spec = NetworkSpec::new(vec![1, 1], vec![Activation::Identity]).unwrap();
        Network::new(spec, NetworkParameters { flat: vec![value_weight, bias] }).unwrap()
    }

    #[test]
    fn refine_loss_matches_scalar_oracle() {
        // Critic Q(x) = 0·x + 1 ⇒ Q ≡ 1 for all anchors.
        let net = scalar_net(0.0, 1.0);
        let mut ws = Workspace::for_spec(&net.spec);
        let target = InterpolatedTarget {
            input: vec![0.5],
            costs: vec![0.0],
            weights: vec![1.0],
            target: 0.0,
        };
        // Old prediction also 1: ½·1 + 2·(max(0, 0))² = 0.5.
        let frozen_same = NetworkParameters { flat: vec![0.0, 1.0] };
        let out = refine_loss(&[target.clone()], &net, &frozen_same, 2.0, 0.0, &mut ws).unwrap();
        assert!((out.loss - 0.5).abs() < 1e-14);
        assert_eq!(out.trust_hits, 0);
        // Old prediction 0: ½ + 2·(½·1)² = 1.0.
        let frozen_zero = NetworkParameters { flat: vec![0.0, 0.0] };
        let out = refine_loss(&[target], &net, &frozen_zero, 2.0, 0.0, &mut ws).unwrap();
        assert!((out.loss - 1.0).abs() < 1e-14);
        assert_eq!(out.trust_hits, 1);
    }

    #[test]
    fn refine_loss_is_zero_at_a_perfect_unmoved_critic() {
        let net = scalar_net(2.0, 0.0);
        let mut ws = Workspace::for_spec(&net.spec);
        let t = InterpolatedTarget {
            input: vec![0.5],
            costs: vec![1.0],
            weights: vec![1.0],
            target: 1.0, // Q(0.5) = 1.0 exactly
        };
        let out = refine_loss(&[t], &net, &net.params.clone(), 3.0, 0.01, &mut ws).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn refine_gradient_matches_finite_differences() {
        let spec = NetworkSpec::mlp(3, &[5], 1, Activation::Tanh, Activation::Identity).unwrap();
        let mut rng = substream(7, "refine");
        let net = Network::init_uniform(spec.clone(), &mut rng).unwrap();
        let frozen = Network::init_uniform(spec.clone(), &mut rng).unwrap().params;
        let targets: Vec<InterpolatedTarget> = (0..4)
            .map(|_| InterpolatedTarget {
                input: (0..3).map(|_| uniform_range(&mut rng, -1.0, 1.0)).collect(),
                costs: vec![0.0],
                weights: vec![1.0],
                target: uniform_range(&mut rng, 0.0, 1.0),
            })
            .collect();
        let beta = 1.7;
        // eps small enough that some hinges are active, making the test
        // exercise both branches.
        let eps = 1e-4;
        let mut ws = Workspace::for_spec(&spec);
        let out = refine_loss(&targets, &net, &frozen, beta, eps, &mut ws).unwrap();
        assert!(out.trust_hits > 0, "want at least one active hinge");

        let h = 1e-6;
        let mut p = net.params.clone();
        for i in 0..p.flat.len() {
            let orig = p.flat[i];
            p.flat[i] = orig + h;
            let up = refine_loss(
                &targets,
                &Network::new(spec.clone(), p.clone()).unwrap(),
                &frozen,
                beta,
                eps,
                &mut ws,
            )
            .unwrap()
            .loss;
            p.flat[i] = orig - h;
            let dn = refine_loss(
                &targets,
                &Network::new(spec.clone(), p.clone()).unwrap(),
                &frozen,
                beta,
                eps,
                &mut ws,
            )
            .unwrap()
            .loss;
            p.flat[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            let err = (out.grad[i] - fd).abs() / fd.abs().max(1.0);
            assert!(err < 1e-5, "param {i}: analytic {} vs fd {fd}", out.grad[i]);
        }
    }

    #[test]
    fn trust_penalty_shrinks_the_converged_movement() {
        // The penalty is flat at the frozen point (zero deviation means zero
        // hinge gradient), so a single step moves identically for any β. The
        // behavioural claim is about where descent settles: pulled toward a
        // target one unit away, an unconstrained critic closes most of the
        // gap, while a trust-penalized one stalls near the hinge radius.
        let spec = NetworkSpec::mlp(2, &[4], 1, Activation::Tanh, Activation::Identity).unwrap();
        let mut rng = substream(8, "refine");
        let net = Network::init_uniform(spec.clone(), &mut rng).unwrap();
        let frozen = net.params.clone();
        let input = vec![0.3, -0.4];
        let mut ws = Workspace::for_spec(&spec);
        forward_into(&spec, &net.params, &input, &mut ws).unwrap();
        let q0 = ws.output()[0];
        let t = InterpolatedTarget {
            input: input.clone(),
            costs: vec![q0 + 1.0],
            weights: vec![1.0],
            target: q0 + 1.0,
        };

        let lr = 0.05;
        let moved = |beta: f64, ws: &mut Workspace| -> f64 {
            let mut p = net.params.clone();
            for _ in 0..400 {
                let live = Network::new(spec.clone(), p.clone()).unwrap();
                let out =
                    refine_loss(std::slice::from_ref(&t), &live, &frozen, beta, 0.01, ws).unwrap();
                for (v, g) in p.flat.iter_mut().zip(out.grad.iter()) {
                    *v -= lr * g;
                }
            }
            forward_into(&spec, &p, &input, ws).unwrap();
            (ws.output()[0] - q0).abs()
        };
        let free = moved(0.0, &mut ws);
        let constrained = moved(50.0, &mut ws);
        assert!(free > 0.5, "unconstrained descent barely moved: {free}");
        assert!(constrained > 0.0);
        assert!(
            2.0 * constrained < free,
            "trust region failed to shrink movement: {constrained} vs {free}"
        );
    }

    #[test]
    fn frozen_snapshots_are_independent_of_later_edits() {
        let spec = NetworkSpec::mlp(2, &[3], 1, Activation::Tanh, Activation::Identity).unwrap();
        let mut rng = substream(9, "frozen");
        let mut net = Network::init_uniform(spec.clone(), &mut rng).unwrap();
        let frozen = net.params.clone();
        let before = frozen.flat.clone();
        for v in net.params.flat.iter_mut() {
            *v += 1.0;
        }
        assert_eq!(frozen.flat, before);
        // Influence rows built from the snapshot are untouched by the edit.
        let (rows, b) = gradient_rows(
            &spec,
            &frozen,
            vec![vec![0.1, 0.2], vec![-0.3, 0.4]].into_iter(),
            InfluenceScope::FullParameters,
        )
        .unwrap();
        assert_eq!(b, 2);
        let (rows2, _) = gradient_rows(
            &spec,
            &frozen,
            vec![vec![0.1, 0.2], vec![-0.3, 0.4]].into_iter(),
            InfluenceScope::FullParameters,
        )
        .unwrap();
        assert_eq!(rows, rows2);
    }

    #[test]
    fn scoped_rows_match_whole_gradient_slices() {
        let spec = NetworkSpec::mlp(3, &[4, 4], 1, Activation::Relu, Activation::Identity).unwrap();
        let mut rng = substream(10, "scope");
        let net = Network::init_uniform(spec.clone(), &mut rng).unwrap();
        let input = vec![0.2, -0.5, 0.9];
        let full = grad_params(&spec, &net.params, &input, 0).unwrap();
        let range = spec.last_layer_range();
        let (start, end) = (range.start, range.end);

        let mut ws = Workspace::for_spec(&spec);
        let mut buf = vec![0.0; spec.param_count()];
        let mut row = vec![0.0; end - start];
        scoped_grad_row(
            &spec,
            &net.params,
            &input,
            InfluenceScope::LastLayer,
            &mut ws,
            &mut buf,
            &mut row,
        )
        .unwrap();
        assert_eq!(row, full.flat[start..end]);

        let mut frow = vec![0.0; spec.param_count()];
        scoped_grad_row(
            &spec,
            &net.params,
            &input,
            InfluenceScope::FullParameters,
            &mut ws,
            &mut buf,
            &mut frow,
        )
        .unwrap();
        assert_eq!(frow, full.flat);
    }

    #[test]
    fn auto_scope_switches_at_the_size_threshold() {
        assert_eq!(auto_scope(1633), InfluenceScope::FullParameters);
        assert_eq!(auto_scope(FULL_SCOPE_MAX_PARAMS), InfluenceScope::FullParameters);
        assert_eq!(auto_scope(FULL_SCOPE_MAX_PARAMS + 1), InfluenceScope::LastLayer);
    }
}
