//! FIFO replay buffer, uniform sampling, and exact nearest-neighbour search.
//!
//! The buffer stores flat `f64` transitions and overwrites the oldest record
//! once `capacity` is reached. Sampling is uniform **with replacement**, so a
//! minibatch may repeat records. Nearest-neighbour queries run an exact
//! linear scan over the whole buffer in the concatenated `(state, action)`
//! space, with every dimension standardized by running per-dimension
//! statistics ([`FeatureScaler`], Welford over the push stream) so that
//! position-scale and action-scale dimensions contribute comparably.

use crate::error::{Error, Result};
use crate::rng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;

/// One environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// Indices of a sampled minibatch; resolve them against the buffer.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub indices: Vec<usize>,
}

/// Running per-dimension mean/std over the concatenated `(state, action)`
/// vector of every transition ever pushed (Welford's algorithm). The std is
/// the population standard deviation, floored at `STD_FLOOR` when used for
/// normalization so constant dimensions stay harmless.
#[derive(Debug, Clone)]
pub struct FeatureScaler {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl FeatureScaler {
    pub fn new(dim: usize) -> Self {
        FeatureScaler {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    fn update(&mut self, features: &[f64]) {
        debug_assert_eq!(features.len(), self.mean.len());
        self.count += 1;
        let n = self.count as f64;
        for (i, &x) in features.iter().enumerate() {
            let delta = x - self.mean[i];
            self.mean[i] += delta / n;
            self.m2[i] += delta * (x - self.mean[i]);
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        self.mean[i]
    }

    pub fn std(&self, i: usize) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2[i] / self.count as f64).sqrt()
        }
    }

    /// `1 / max(std, STD_FLOOR)` per dimension — the scan's inner loop wants
    /// multiplications, not divisions.
    pub fn inverse_scales(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| 1.0 / self.std(i).max(STD_FLOOR))
            .collect()
    }
}

/// Fixed-capacity FIFO transition store.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    state_dim: usize,
    action_dim: usize,
    data: Vec<Transition>,
    /// Row-major `(state, action)` copy of `data`, kept in lockstep so the
    /// neighbour scan walks one contiguous block instead of chasing the
    /// per-transition heap vectors.
    features: Vec<f64>,
    cursor: usize,
    scaler: FeatureScaler,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, state_dim: usize, action_dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidInput("buffer capacity must be positive".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            state_dim,
            action_dim,
            data: Vec::new(),
            features: Vec::new(),
            cursor: 0,
            scaler: FeatureScaler::new(state_dim + action_dim),
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn scaler(&self) -> &FeatureScaler {
        &self.scaler
    }

    pub fn get(&self, index: usize) -> &Transition {
        &self.data[index]
    }

    /// Insert a transition, overwriting the oldest record when full. The
    /// running feature statistics absorb every pushed record, including ones
    /// later overwritten.
    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.state.len() != self.state_dim || t.next_state.len() != self.state_dim {
            return Err(Error::InvalidInput(format!(
                "state dims {}/{} do not match buffer state dim {}",
                t.state.len(),
                t.next_state.len(),
                self.state_dim
            )));
        }
        if t.action.len() != self.action_dim {
            return Err(Error::InvalidInput(format!(
                "action dim {} does not match buffer action dim {}",
                t.action.len(),
                self.action_dim
            )));
        }
        let finite = t.state.iter().chain(t.action.iter()).chain(t.next_state.iter());
        if finite.clone().any(|v| !v.is_finite()) || !t.reward.is_finite() || !t.cost.is_finite() {
            return Err(Error::InvalidInput(
                "transition contains non-finite values".into(),
            ));
        }

        let mut features = Vec::with_capacity(self.state_dim + self.action_dim);
        features.extend_from_slice(&t.state);
        features.extend_from_slice(&t.action);
        self.scaler.update(&features);

        if self.data.len() < self.capacity {
            self.data.push(t);
            self.features.extend_from_slice(&features);
        } else {
            let dim = self.state_dim + self.action_dim;
            let row = self.cursor * dim;
            self.features[row..row + dim].copy_from_slice(&features);
            self.data[self.cursor] = t;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        Ok(())
    }

    /// Uniform sample of `batch_size` indices, with replacement.
    pub fn sample_uniform(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Minibatch> {
        if batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be positive".into()));
        }
        if self.data.is_empty() {
            return Err(Error::State("cannot sample from an empty buffer".into()));
        }
        let indices = (0..batch_size)
            .map(|_| rng::index(rng, self.data.len()))
            .collect();
        Ok(Minibatch { indices })
    }

    /// Exact k-nearest neighbours of `query` (a concatenated `(state,
    /// action)` vector) under standardized Euclidean distance, skipping any
    /// buffer index in `exclude`. Returns `(buffer index, distance)` pairs in
    /// ascending distance order; distance ties break toward the lower index.
    pub fn knn(
        &self,
        query: &[f64],
        k: usize,
        scaler: &FeatureScaler,
        exclude: &[usize],
    ) -> Result<Vec<(usize, f64)>> {
        let mut out = self.scan_nearest(&[query], k, scaler, exclude)?;
        Ok(out.pop().expect("one result per query"))
    }

    /// [`Self::knn`] for several queries sharing one exclusion set, answered
    /// in a single pass over the buffer. Result `i` belongs to query `i`.
    pub fn knn_many(
        &self,
        queries: &[Vec<f64>],
        k: usize,
        scaler: &FeatureScaler,
        exclude: &[usize],
    ) -> Result<Vec<Vec<(usize, f64)>>> {
        let refs: Vec<&[f64]> = queries.iter().map(|q| q.as_slice()).collect();
        self.scan_nearest(&refs, k, scaler, exclude)
    }

    fn scan_nearest(
        &self,
        queries: &[&[f64]],
        k: usize,
        scaler: &FeatureScaler,
        exclude: &[usize],
    ) -> Result<Vec<Vec<(usize, f64)>>> {
        let dim = self.state_dim + self.action_dim;
        for query in queries {
            if query.len() != dim {
                return Err(Error::InvalidInput(format!(
                    "query has {} entries, expected {dim}",
                    query.len()
                )));
            }
        }
        if scaler.dim() != dim {
            return Err(Error::InvalidInput("scaler dimension mismatch".into()));
        }
        if k == 0 {
            return Err(Error::InvalidInput("k must be positive".into()));
        }
        let mut excluded_present = 0usize;
        for (i, &e) in exclude.iter().enumerate() {
            if e < self.data.len() && !exclude[..i].contains(&e) {
                excluded_present += 1;
            }
        }
        let available = self.data.len() - excluded_present;
        if k > available {
            return Err(Error::State(format!(
                "k = {k} exceeds the {available} available records"
            )));
        }

        let inv = scaler.inverse_scales();
        // Pre-scale each query once; the scan then compares standardized
        // coordinates directly.
        let q_scaled: Vec<Vec<f64>> = queries
            .iter()
            .map(|query| query.iter().zip(inv.iter()).map(|(q, s)| q * s).collect())
            .collect();

        // Per-query best-k, each a small sorted-by-worst insertion buffer
        // holding squared distances until the final sqrt.
        let mut best: Vec<Vec<(usize, f64)>> =
            vec![Vec::with_capacity(k + 1); queries.len()];
        let mut row_scaled = vec![0.0; dim];
        for (idx, row) in self.features.chunks_exact(dim).enumerate() {
            for ((z, &x), &s) in row_scaled.iter_mut().zip(row.iter()).zip(inv.iter()) {
                *z = x * s;
            }
            for (qs, best_q) in q_scaled.iter().zip(best.iter_mut()) {
                // Bound for early exit: partial sums of nonnegative terms
                // are monotonically nondecreasing under IEEE rounding, so a
                // prefix already at `bound` can never fall back below it.
                let bound = if best_q.len() < k { f64::INFINITY } else { best_q[k - 1].1 };
                let mut d2 = 0.0;
                let mut rejected = false;
                // Four independent accumulator lanes per 8-dimension block,
                // with a bound check between blocks.
                let mut chunks_r = row_scaled.chunks_exact(8);
                let mut chunks_q = qs.chunks_exact(8);
                for (cr, cq) in (&mut chunks_r).zip(&mut chunks_q) {
                    let mut lane = [0.0f64; 4];
                    for j in 0..4 {
                        let z0 = cr[j] - cq[j];
                        let z1 = cr[j + 4] - cq[j + 4];
                        lane[j] = z0 * z0 + z1 * z1;
                    }
                    d2 += (lane[0] + lane[1]) + (lane[2] + lane[3]);
                    if d2 >= bound {
                        rejected = true;
                        break;
                    }
                }
                if rejected {
                    continue;
                }
                for (&x, &q) in chunks_r.remainder().iter().zip(chunks_q.remainder().iter()) {
                    let z = x - q;
                    d2 += z * z;
                }
                if d2 < bound && !exclude.contains(&idx) {
                    if best_q.len() < k {
                        best_q.push((idx, d2));
                    } else {
                        best_q[k - 1] = (idx, d2);
                    }
                    best_q.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
                }
            }
        }
        for best_q in best.iter_mut() {
            for b in best_q.iter_mut() {
                b.1 = b.1.sqrt();
            }
        }
        Ok(best)
    }

    /// Write the whole buffer as CSV in storage order: state dims, action
    /// dims, reward, cost, next-state dims, terminal flag.
    pub fn dump_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let mut header = Vec::new();
        for i in 0..self.state_dim {
            header.push(format!("s{i}"));
        }
        for i in 0..self.action_dim {
            header.push(format!("a{i}"));
        }
        header.push("reward".into());
        header.push("cost".into());
        for i in 0..self.state_dim {
            header.push(format!("ns{i}"));
        }
        header.push("terminal".into());
        writeln!(out, "{}", header.join(","))?;
        for t in &self.data {
            let mut row: Vec<String> = Vec::with_capacity(header.len());
            row.extend(t.state.iter().map(|v| v.to_string()));
            row.extend(t.action.iter().map(|v| v.to_string()));
            row.push(t.reward.to_string());
            row.push(t.cost.to_string());
            row.extend(t.next_state.iter().map(|v| v.to_string()));
            row.push(if t.terminal { "1".into() } else { "0".into() });
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn tr(tag: f64) -> Transition {
        Transition {
            state: vec![tag, -tag],
            action: vec![tag * 0.1],
            reward: tag,
            cost: 0.0,
            next_state: vec![tag + 1.0, -tag],
            terminal: false,
        }
    }

    fn filled(n: usize, cap: usize) -> ReplayBuffer {
        let mut b = ReplayBuffer::new(cap, 2, 1).unwrap();
        for i in 0..n {
            b.push(tr(i as f64)).unwrap();
        }
        b
    }

    #[test]
    fn fifo_overwrites_oldest_first() {
        let mut b = filled(3, 3);
        assert_eq!(b.len(), 3);
        b.push(tr(3.0)).unwrap(); // overwrites record 0
        b.push(tr(4.0)).unwrap(); // overwrites record 1
        let rewards: Vec<f64> = (0..3).map(|i| b.get(i).reward).collect();
        assert_eq!(rewards, vec![3.0, 4.0, 2.0]);
        assert_eq!(b.len(), 3);
    }

    #[test]
    fn push_validates_shapes_and_values() {
        let mut b = ReplayBuffer::new(4, 2, 1).unwrap();
        let mut bad = tr(0.0);
        bad.state = vec![1.0];
        assert!(b.push(bad).is_err());
        let mut bad = tr(0.0);
        bad.action = vec![1.0, 2.0];
        assert!(b.push(bad).is_err());
        let mut bad = tr(0.0);
        bad.reward = f64::INFINITY;
        assert!(b.push(bad).is_err());
        assert!(ReplayBuffer::new(0, 2, 1).is_err());
    }

    #[test]
    fn sampling_from_empty_buffer_is_a_state_error() {
        let b = ReplayBuffer::new(4, 2, 1).unwrap();
        let mut rng = substream(0, "sampling");
        assert!(matches!(
            b.sample_uniform(4, &mut rng),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn uniform_sampling_frequencies_within_four_sigma() {
        let b = filled(10, 10);
        let mut rng = substream(1, "sampling");
        let draws = 100_000usize;
        let mut counts = [0usize; 10];
        for _ in 0..(draws / 10) {
            let mb = b.sample_uniform(10, &mut rng).unwrap();
            for i in mb.indices {
                counts[i] += 1;
            }
        }
        let expected = draws as f64 / 10.0;
        let sigma = (draws as f64 * 0.1 * 0.9).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expected).abs() < 4.0 * sigma,
                "index {i} drawn {c} times, expected {expected} ± {:.1}",
                4.0 * sigma
            );
        }
    }

    #[test]
    fn sampling_is_with_replacement() {
        let b = filled(2, 2);
        let mut rng = substream(2, "sampling");
        let mb = b.sample_uniform(64, &mut rng).unwrap();
        assert_eq!(mb.indices.len(), 64); // more draws than records
    }

    #[test]
    fn scaler_tracks_stream_mean_and_std() {
        let mut b = ReplayBuffer::new(8, 1, 1).unwrap();
        for x in [1.0, 2.0, 3.0, 4.0] {
            b.push(Transition {
                state: vec![x],
                action: vec![10.0 * x],
                reward: 0.0,
                cost: 0.0,
                next_state: vec![x],
                terminal: false,
            })
            .unwrap();
        }
        let s = b.scaler();
        assert!((s.mean(0) - 2.5).abs() < 1e-12);
        // Population std of {1,2,3,4} is sqrt(1.25).
        assert!((s.std(0) - 1.25f64.sqrt()).abs() < 1e-12);
        assert!((s.mean(1) - 25.0).abs() < 1e-12);
        assert!((s.std(1) - 125.0f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn knn_matches_brute_force_oracle() {
        let mut b = ReplayBuffer::new(256, 3, 2).unwrap();
        let mut rng = substream(3, "knn");
        for _ in 0..120 {
            let mut vals = [0.0; 10];
            for v in vals.iter_mut() {
                *v = crate::rng::uniform_range(&mut rng, -2.0, 2.0);
            }
            b.push(Transition {
                state: vals[0..3].to_vec(),
                action: vals[3..5].to_vec(),
                reward: vals[5],
                cost: vals[6].abs(),
                next_state: vals[7..10].to_vec(),
                terminal: false,
            })
            .unwrap();
        }
        let scaler = b.scaler().clone();
        let inv = scaler.inverse_scales();
        for trial in 0..20 {
            let query: Vec<f64> = (0..5)
                .map(|_| crate::rng::uniform_range(&mut rng, -2.0, 2.0))
                .collect();
            let exclude = [trial as usize, (trial + 7) as usize];
            let got = b.knn(&query, 5, &scaler, &exclude).unwrap();

            // Brute-force oracle: full sort of standardized distances.
            let mut all: Vec<(usize, f64)> = (0..b.len())
                .filter(|i| !exclude.contains(i))
                .map(|i| {
                    let t = b.get(i);
                    let mut d2 = 0.0;
                    for (j, &x) in t.state.iter().chain(t.action.iter()).enumerate() {
                        let z = (x - query[j]) * inv[j];
                        d2 += z * z;
                    }
                    (i, d2.sqrt())
                })
                .collect();
            all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            for (g, o) in got.iter().zip(all.iter()) {
                assert_eq!(g.0, o.0);
                assert!((g.1 - o.1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn knn_with_identical_records_breaks_ties_by_index() {
        let mut b = ReplayBuffer::new(8, 1, 1).unwrap();
        for _ in 0..4 {
            b.push(Transition {
                state: vec![1.0],
                action: vec![1.0],
                reward: 0.0,
                cost: 0.0,
                next_state: vec![1.0],
                terminal: false,
            })
            .unwrap();
        }
        let got = b.knn(&[1.0, 1.0], 3, &b.scaler().clone(), &[]).unwrap();
        assert_eq!(got.iter().map(|g| g.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(got.iter().all(|g| g.1 == 0.0));
    }

    #[test]
    fn knn_many_agrees_with_per_query_searches() {
        let mut b = ReplayBuffer::new(64, 2, 1).unwrap();
        let mut rng = substream(4, "knn");
        for _ in 0..40 {
            b.push(Transition {
                state: vec![
                    crate::rng::uniform_range(&mut rng, -1.0, 1.0),
                    crate::rng::uniform_range(&mut rng, -1.0, 1.0),
                ],
                action: vec![crate::rng::uniform_range(&mut rng, -1.0, 1.0)],
                reward: 0.0,
                cost: 0.0,
                next_state: vec![0.0, 0.0],
                terminal: false,
            })
            .unwrap();
        }
        let scaler = b.scaler().clone();
        let queries: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                (0..3)
                    .map(|_| crate::rng::uniform_range(&mut rng, -1.0, 1.0))
                    .collect()
            })
            .collect();
        let exclude = [5usize, 11, 23];
        let joint = b.knn_many(&queries, 4, &scaler, &exclude).unwrap();
        for (q, j) in queries.iter().zip(joint.iter()) {
            let single = b.knn(q, 4, &scaler, &exclude).unwrap();
            assert_eq!(*j, single);
        }
    }

    #[test]
    fn knn_sees_overwritten_records_not_stale_ones() {
        let mut b = ReplayBuffer::new(3, 2, 1).unwrap();
        for i in 0..3 {
            b.push(tr(i as f64)).unwrap();
        }
        b.push(tr(100.0)).unwrap(); // overwrites slot 0
        let scaler = b.scaler().clone();
        // A query at the overwritten record's location must now resolve to
        // the survivors, while the new record is reachable at its own spot.
        let got = b.knn(&[100.0, -100.0, 10.0], 1, &scaler, &[]).unwrap();
        assert_eq!(got[0].0, 0);
        assert_eq!(got[0].1, 0.0);
        let got = b.knn(&[0.0, 0.0, 0.0], 1, &scaler, &[]).unwrap();
        assert_ne!(got[0].1, 0.0, "stale slot-0 features answered the query");
    }

    #[test]
    fn knn_errors_when_k_exceeds_available() {
        let b = filled(4, 8);
        let scaler = b.scaler().clone();
        assert!(matches!(
            b.knn(&[0.0, 0.0, 0.0], 5, &scaler, &[]),
            Err(Error::State(_))
        ));
        // Exclusions shrink availability.
        assert!(matches!(
            b.knn(&[0.0, 0.0, 0.0], 4, &scaler, &[1]),
            Err(Error::State(_))
        ));
        assert!(b.knn(&[0.0, 0.0, 0.0], 3, &scaler, &[1]).is_ok());
    }

    #[test]
    fn dump_csv_has_fixed_column_order() {
        let b = filled(2, 4);
        let mut out = Vec::new();
        b.dump_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "s0,s1,a0,reward,cost,ns0,ns1,terminal");
        assert_eq!(lines.next().unwrap(), "0,-0,0,0,0,1,-0,0");
        assert!(lines.next().unwrap().starts_with("1,-1,0.1,1,0,2,-1,0"));
    }
}
