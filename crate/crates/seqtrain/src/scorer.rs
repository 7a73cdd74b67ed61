//! The transducer posterior P(y_t | last-k labels, h_t): a trainable tabular
//! parameterization over (frame-feature bucket, label context) pairs, a
//! precomputed-tensor backend for fixtures, and the numerator DP.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base::{logsumexp, LabelId, Utterance, LOG_ZERO};
use crate::lattice::{Lattice, LatticeEdge, LatticeState};
use crate::{Error, Result};

/// Indexes label contexts of length <= k (shorter contexts stand for
/// begin-of-sequence padded histories). Index 0 is the empty context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextMap {
    k: usize,
    v: usize,
    offsets: Vec<usize>,
    total: usize,
}

impl ContextMap {
    pub fn new(k: usize, num_labels: usize) -> Self {
        assert!(num_labels > 0);
        let mut offsets = Vec::with_capacity(k + 1);
        let mut total = 0usize;
        let mut pow = 1usize;
        for _ in 0..=k {
            offsets.push(total);
            total += pow;
            pow *= num_labels;
        }
        ContextMap {
            k,
            v: num_labels,
            offsets,
            total,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_labels(&self) -> usize {
        self.v
    }

    /// Number of distinct (padded) contexts.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encode(&self, ctx: &[LabelId]) -> usize {
        assert!(ctx.len() <= self.k, "context longer than k");
        let mut idx = 0usize;
        for &c in ctx {
            debug_assert!(c < self.v);
            idx = idx * self.v + c;
        }
        self.offsets[ctx.len()] + idx
    }

    /// Encodes the last min(k, len) labels of a history.
    pub fn suffix(&self, labels: &[LabelId]) -> usize {
        let start = labels.len().saturating_sub(self.k);
        self.encode(&labels[start..])
    }

    pub fn decode(&self, idx: usize) -> Vec<LabelId> {
        let len = (0..=self.k)
            .rev()
            .find(|&m| idx >= self.offsets[m])
            .unwrap();
        let mut rem = idx - self.offsets[len];
        let mut out = vec![0; len];
        for slot in out.iter_mut().rev() {
            *slot = rem % self.v;
            rem /= self.v;
        }
        out
    }

    /// Appends a label to a context, keeping the most recent k labels.
    pub fn push(&self, ctx: &[LabelId], label: LabelId) -> Vec<LabelId> {
        let mut out = Vec::with_capacity(self.k.min(ctx.len() + 1));
        let start = (ctx.len() + 1).saturating_sub(self.k);
        out.extend_from_slice(&ctx[start.min(ctx.len())..]);
        if self.k > 0 {
            out.push(label);
        }
        out
    }
}

/// Read access to per-frame acoustic log-probabilities, indexed by
/// (frame, context index, output) with output |V| being blank.
pub trait AmScorer {
    fn context_map(&self) -> &ContextMap;
    fn num_labels(&self) -> usize;
    fn num_frames(&self) -> usize;
    fn log_prob(&self, t: usize, ctx: usize, out: usize) -> f64;

    fn row(&self, t: usize, ctx: usize) -> Vec<f64> {
        (0..=self.num_labels())
            .map(|o| self.log_prob(t, ctx, o))
            .collect()
    }
}

/// Where per-frame features (bucket indices standing in for encoder states)
/// come from: derived deterministically from the utterance id, or loaded.
#[derive(Debug, Clone)]
pub enum FeatureSource {
    RandomFixed { seed: u64 },
    Loaded(HashMap<String, Vec<usize>>),
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl FeatureSource {
    pub fn buckets(&self, utt_id: &str, num_frames: usize, num_buckets: usize) -> Result<Vec<usize>> {
        match self {
            FeatureSource::RandomFixed { seed } => Ok((0..num_frames)
                .map(|t| {
                    let mut key = utt_id.as_bytes().to_vec();
                    key.extend_from_slice(&seed.to_le_bytes());
                    key.extend_from_slice(&(t as u64).to_le_bytes());
                    (fnv1a64(&key) % num_buckets as u64) as usize
                })
                .collect()),
            FeatureSource::Loaded(map) => {
                let b = map
                    .get(utt_id)
                    .ok_or_else(|| Error::invalid(format!("no features for utterance `{utt_id}`")))?;
                if b.len() != num_frames {
                    return Err(Error::invalid(format!(
                        "features for `{utt_id}` have {} frames, expected {num_frames}",
                        b.len()
                    )));
                }
                if let Some(&bad) = b.iter().find(|&&x| x >= num_buckets) {
                    return Err(Error::invalid(format!("bucket {bad} out of range")));
                }
                Ok(b.clone())
            }
        }
    }
}

/// Tabular transducer posterior: logits are `base[ctx] + delta[bucket][ctx]`,
/// log-softmax normalized over V plus blank. The zero frame feature
/// corresponds to the `base` row alone.
#[derive(Debug, Clone)]
pub struct ContextKScorer {
    ctx: ContextMap,
    num_labels: usize,
    num_buckets: usize,
    base: Array2<f64>,
    delta: Array3<f64>,
    pub features: FeatureSource,
}

fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let z = logsumexp(logits);
    logits.iter().map(|&x| x - z).collect()
}

impl ContextKScorer {
    pub fn uniform(k: usize, num_labels: usize, num_buckets: usize, features: FeatureSource) -> Self {
        let ctx = ContextMap::new(k, num_labels);
        let n_ctx = ctx.len();
        ContextKScorer {
            ctx,
            num_labels,
            num_buckets,
            base: Array2::zeros((n_ctx, num_labels + 1)),
            delta: Array3::zeros((num_buckets, n_ctx, num_labels + 1)),
            features,
        }
    }

    pub fn random(
        k: usize,
        num_labels: usize,
        num_buckets: usize,
        features: FeatureSource,
        seed: u64,
        scale: f64,
    ) -> Self {
        let mut s = Self::uniform(k, num_labels, num_buckets, features);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in s.base.iter_mut() {
            *x = rng.gen_range(-scale..scale);
        }
        for x in s.delta.iter_mut() {
            *x = rng.gen_range(-scale..scale);
        }
        s
    }

    pub fn k(&self) -> usize {
        self.ctx.k()
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn num_buckets(&self) -> usize {
        self.num_buckets
    }

    pub fn context_map(&self) -> &ContextMap {
        &self.ctx
    }

    /// Normalized log-prob table for one feature bucket, shape (n_ctx, |V|+1).
    pub fn log_prob_table(&self, bucket: usize) -> Array2<f64> {
        let n_ctx = self.ctx.len();
        let n_out = self.num_labels + 1;
        let mut out = Array2::zeros((n_ctx, n_out));
        for c in 0..n_ctx {
            let logits: Vec<f64> = (0..n_out)
                .map(|o| self.base[[c, o]] + self.delta[[bucket, c, o]])
                .collect();
            let row = log_softmax_row(&logits);
            for (o, v) in row.into_iter().enumerate() {
                out[[c, o]] = v;
            }
        }
        out
    }

    /// Log-prob table with the frame feature replaced by the zero vector
    /// (the `base` logits alone).
    pub fn zero_feature_table(&self) -> Array2<f64> {
        let n_ctx = self.ctx.len();
        let n_out = self.num_labels + 1;
        let mut out = Array2::zeros((n_ctx, n_out));
        for c in 0..n_ctx {
            let logits: Vec<f64> = (0..n_out).map(|o| self.base[[c, o]]).collect();
            let row = log_softmax_row(&logits);
            for (o, v) in row.into_iter().enumerate() {
                out[[c, o]] = v;
            }
        }
        out
    }

    /// Binds the scorer to one utterance's frame features.
    pub fn bind(&self, utt: &Utterance) -> Result<BoundScorer<'_>> {
        self.bind_frames(&utt.id, utt.num_frames)
    }

    pub fn bind_frames(&self, utt_id: &str, num_frames: usize) -> Result<BoundScorer<'_>> {
        let buckets = self.features.buckets(utt_id, num_frames, self.num_buckets)?;
        let mut tables = HashMap::new();
        for &b in &buckets {
            tables.entry(b).or_insert_with(|| self.log_prob_table(b));
        }
        Ok(BoundScorer {
            scorer: self,
            buckets,
            tables,
        })
    }

    /// Converts a gradient over per-frame log-probs into a parameter gradient
    /// via the log-softmax Jacobian.
    pub fn grads_from_logprob_grad(&self, buckets: &[usize], g: &Array3<f64>) -> ScorerGrad {
        let n_ctx = self.ctx.len();
        let n_out = self.num_labels + 1;
        let mut out = ScorerGrad::zeros_like(self);
        let mut prob_tables: HashMap<usize, Array2<f64>> = HashMap::new();
        for (t, &bucket) in buckets.iter().enumerate() {
            let probs = prob_tables
                .entry(bucket)
                .or_insert_with(|| self.log_prob_table(bucket).mapv(f64::exp));
            for c in 0..n_ctx {
                let gsum: f64 = (0..n_out).map(|o| g[[t, c, o]]).sum();
                if gsum == 0.0 && (0..n_out).all(|o| g[[t, c, o]] == 0.0) {
                    continue;
                }
                for o in 0..n_out {
                    let dl = g[[t, c, o]] - probs[[c, o]] * gsum;
                    out.base[[c, o]] += dl;
                    out.delta[[bucket, c, o]] += dl;
                }
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.base.len() + self.delta.len()
    }

    pub fn get_param(&self, i: usize) -> f64 {
        if i < self.base.len() {
            *self.base.as_slice().unwrap().get(i).unwrap()
        } else {
            self.delta.as_slice().unwrap()[i - self.base.len()]
        }
    }

    pub fn set_param(&mut self, i: usize, v: f64) {
        let nb = self.base.len();
        if i < nb {
            self.base.as_slice_mut().unwrap()[i] = v;
        } else {
            self.delta.as_slice_mut().unwrap()[i - nb] = v;
        }
    }

    /// Gradient-descent update: params -= step * grad.
    pub fn apply_grad(&mut self, grad: &ScorerGrad, step: f64) {
        self.base.scaled_add(-step, &grad.base);
        self.delta.scaled_add(-step, &grad.delta);
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let seed = match &self.features {
            FeatureSource::RandomFixed { seed } => Some(*seed),
            FeatureSource::Loaded(_) => None,
        };
        let ckpt = Checkpoint {
            version: 1,
            k: self.ctx.k(),
            num_labels: self.num_labels,
            num_buckets: self.num_buckets,
            base: self.base.iter().cloned().collect(),
            delta: self.delta.iter().cloned().collect(),
            feature_seed: seed,
        };
        fs::write(path, serde_json::to_string(&ckpt).unwrap())?;
        Ok(())
    }

    /// Loads a checkpoint; `features` overrides the stored feature source when
    /// given.
    pub fn load(path: impl AsRef<Path>, features: Option<FeatureSource>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::invalid(format!("checkpoint: {e}")))?;
        let ctx = ContextMap::new(ckpt.k, ckpt.num_labels);
        let n_ctx = ctx.len();
        let n_out = ckpt.num_labels + 1;
        if ckpt.base.len() != n_ctx * n_out || ckpt.delta.len() != ckpt.num_buckets * n_ctx * n_out {
            return Err(Error::invalid("checkpoint shape mismatch"));
        }
        let features = features.unwrap_or(FeatureSource::RandomFixed {
            seed: ckpt.feature_seed.unwrap_or(0),
        });
        Ok(ContextKScorer {
            ctx,
            num_labels: ckpt.num_labels,
            num_buckets: ckpt.num_buckets,
            base: Array2::from_shape_vec((n_ctx, n_out), ckpt.base).unwrap(),
            delta: Array3::from_shape_vec((ckpt.num_buckets, n_ctx, n_out), ckpt.delta).unwrap(),
            features,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    k: usize,
    num_labels: usize,
    num_buckets: usize,
    base: Vec<f64>,
    delta: Vec<f64>,
    feature_seed: Option<u64>,
}

/// A scorer bound to one utterance's frame features.
pub struct BoundScorer<'a> {
    scorer: &'a ContextKScorer,
    buckets: Vec<usize>,
    tables: HashMap<usize, Array2<f64>>,
}

impl BoundScorer<'_> {
    pub fn buckets(&self) -> &[usize] {
        &self.buckets
    }

    /// Normalized log-distribution over V plus blank at frame `t` given the
    /// last emitted labels (at most k of them).
    pub fn score_frame(&self, t: usize, context: &[LabelId]) -> Result<Vec<f64>> {
        if t >= self.buckets.len() {
            return Err(Error::invalid(format!("frame {t} out of range")));
        }
        if context.len() > self.scorer.k() {
            return Err(Error::invalid("context longer than k"));
        }
        let c = self.scorer.context_map().encode(context);
        Ok(self.row(t, c))
    }
}

impl AmScorer for BoundScorer<'_> {
    fn context_map(&self) -> &ContextMap {
        &self.scorer.ctx
    }
    fn num_labels(&self) -> usize {
        self.scorer.num_labels
    }
    fn num_frames(&self) -> usize {
        self.buckets.len()
    }
    fn log_prob(&self, t: usize, ctx: usize, out: usize) -> f64 {
        self.tables[&self.buckets[t]][[ctx, out]]
    }
}

/// Parameter-shaped gradient for a ContextKScorer.
#[derive(Debug, Clone)]
pub struct ScorerGrad {
    pub base: Array2<f64>,
    pub delta: Array3<f64>,
}

impl ScorerGrad {
    pub fn zeros_like(s: &ContextKScorer) -> Self {
        ScorerGrad {
            base: Array2::zeros(s.base.raw_dim()),
            delta: Array3::zeros(s.delta.raw_dim()),
        }
    }

    pub fn add_scaled(&mut self, other: &ScorerGrad, c: f64) {
        self.base.scaled_add(c, &other.base);
        self.delta.scaled_add(c, &other.delta);
    }

    pub fn scale(&mut self, c: f64) {
        self.base.mapv_inplace(|x| x * c);
        self.delta.mapv_inplace(|x| x * c);
    }

    pub fn norm(&self) -> f64 {
        let s: f64 = self.base.iter().map(|x| x * x).sum::<f64>()
            + self.delta.iter().map(|x| x * x).sum::<f64>();
        s.sqrt()
    }

    pub fn get_param(&self, i: usize) -> f64 {
        if i < self.base.len() {
            self.base.as_slice().unwrap()[i]
        } else {
            self.delta.as_slice().unwrap()[i - self.base.len()]
        }
    }

    pub fn is_finite(&self) -> bool {
        self.base.iter().all(|x| x.is_finite()) && self.delta.iter().all(|x| x.is_finite())
    }
}

/// Precomputed score tensor backend (test fixtures), shape
/// (T, n_ctx, |V|+1), natural-log probabilities.
#[derive(Debug, Clone)]
pub struct PrecomputedScores {
    ctx: ContextMap,
    num_labels: usize,
    table: Array3<f64>,
}

impl PrecomputedScores {
    pub fn new(k: usize, num_labels: usize, table: Array3<f64>) -> Result<Self> {
        let ctx = ContextMap::new(k, num_labels);
        let (t_len, n_ctx, n_out) = table.dim();
        if n_ctx != ctx.len() || n_out != num_labels + 1 {
            return Err(Error::invalid("score tensor shape mismatch"));
        }
        for t in 0..t_len {
            for c in 0..n_ctx {
                let row: Vec<f64> = (0..n_out).map(|o| table[[t, c, o]]).collect();
                if logsumexp(&row).abs() > 1e-6 {
                    return Err(Error::invalid(format!(
                        "row (t={t}, ctx={c}) is not normalized"
                    )));
                }
            }
        }
        Ok(PrecomputedScores {
            ctx,
            num_labels,
            table,
        })
    }

    /// Random normalized fixture.
    pub fn random(t_len: usize, num_labels: usize, k: usize, seed: u64) -> Self {
        let ctx = ContextMap::new(k, num_labels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_out = num_labels + 1;
        let mut table = Array3::zeros((t_len, ctx.len(), n_out));
        for t in 0..t_len {
            for c in 0..ctx.len() {
                let logits: Vec<f64> = (0..n_out).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let row = log_softmax_row(&logits);
                for (o, v) in row.into_iter().enumerate() {
                    table[[t, c, o]] = v;
                }
            }
        }
        PrecomputedScores {
            ctx,
            num_labels,
            table,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let (t_len, n_ctx, n_out) = self.table.dim();
        let mut out = format!("T {t_len} LABELS {}\n", self.num_labels);
        for t in 0..t_len {
            for c in 0..n_ctx {
                let row: Vec<String> = (0..n_out)
                    .map(|o| format!("{:.17e}", self.table[[t, c, o]]))
                    .collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::Parse {
            line: 1,
            msg: "empty score tensor file".into(),
        })?;
        let toks: Vec<&str> = header.split_whitespace().collect();
        if toks.len() != 4 || toks[0] != "T" || toks[2] != "LABELS" {
            return Err(Error::Parse {
                line: 1,
                msg: "expected header `T <int> LABELS <int>`".into(),
            });
        }
        let t_len: usize = toks[1].parse().map_err(|_| Error::Parse {
            line: 1,
            msg: "bad T".into(),
        })?;
        let num_labels: usize = toks[3].parse().map_err(|_| Error::Parse {
            line: 1,
            msg: "bad LABELS".into(),
        })?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> =
                line.split_whitespace().map(str::parse).collect();
            let row = row.map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: "bad float".into(),
            })?;
            if row.len() != num_labels + 1 {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("expected {} values", num_labels + 1),
                });
            }
            rows.push(row);
        }
        if t_len == 0 || rows.len() % t_len != 0 {
            return Err(Error::invalid("row count not a multiple of T"));
        }
        let n_ctx = rows.len() / t_len;
        let k = (0..=16)
            .find(|&k| ContextMap::new(k, num_labels).len() == n_ctx)
            .ok_or_else(|| Error::invalid("cannot infer context size from row count"))?;
        let n_out = num_labels + 1;
        let mut table = Array3::zeros((t_len, n_ctx, n_out));
        for (i, row) in rows.into_iter().enumerate() {
            let (t, c) = (i / n_ctx, i % n_ctx);
            for (o, v) in row.into_iter().enumerate() {
                table[[t, c, o]] = v;
            }
        }
        Self::new(k, num_labels, table)
    }
}

impl AmScorer for PrecomputedScores {
    fn context_map(&self) -> &ContextMap {
        &self.ctx
    }
    fn num_labels(&self) -> usize {
        self.num_labels
    }
    fn num_frames(&self) -> usize {
        self.table.dim().0
    }
    fn log_prob(&self, t: usize, ctx: usize, out: usize) -> f64 {
        self.table[[t, ctx, out]]
    }
}

/// Builds the numerator DP lattice over states (t, s): blank keeps the
/// position in the reference, a matching label advances it. Per-step scores
/// are alpha-scaled acoustic log-probs.
pub fn numerator_lattice(
    am: &dyn AmScorer,
    reference: &[LabelId],
    alpha: f64,
) -> Result<Lattice> {
    let t_len = am.num_frames();
    let s_len = reference.len();
    if s_len > t_len {
        return Err(Error::NoAlignment {
            s: s_len,
            t: t_len,
        });
    }
    let cm = am.context_map();
    let blank = am.num_labels();
    let range = |t: usize| {
        let lo = s_len.saturating_sub(t_len - t);
        let hi = s_len.min(t);
        (lo, hi)
    };
    let mut frames: Vec<Vec<LatticeState>> = vec![vec![LatticeState {
        q: 0.0,
        edges: vec![],
    }]];
    for t in 1..=t_len {
        let (lo, hi) = range(t);
        let (plo, phi) = range(t - 1);
        let mut states = Vec::with_capacity(hi - lo + 1);
        for s in lo..=hi {
            let mut edges = Vec::new();
            let mut scores = Vec::new();
            if s >= plo && s <= phi {
                // blank from (t-1, s)
                let ctx = cm.suffix(&reference[..s]);
                let e = LatticeEdge {
                    src: s - plo,
                    ctx,
                    out: blank,
                    lm_scaled: 0.0,
                };
                scores.push(frames[t - 1][e.src].q + alpha * am.log_prob(t - 1, ctx, blank));
                edges.push(e);
            }
            if s > 0 && s - 1 >= plo && s - 1 <= phi {
                // emit reference[s-1] from (t-1, s-1)
                let ctx = cm.suffix(&reference[..s - 1]);
                let out = reference[s - 1];
                let e = LatticeEdge {
                    src: s - 1 - plo,
                    ctx,
                    out,
                    lm_scaled: 0.0,
                };
                scores.push(frames[t - 1][e.src].q + alpha * am.log_prob(t - 1, ctx, out));
                edges.push(e);
            }
            states.push(LatticeState {
                q: logsumexp(&scores),
                edges,
            });
        }
        frames.push(states);
    }
    let mut lat = Lattice {
        frames,
        final_extra: vec![],
        log_sum: LOG_ZERO,
    };
    lat.finish();
    Ok(lat)
}

/// Alpha-scaled sequence log-probability of the reference: the log-sum over
/// all alignments of the per-step alpha-scaled acoustic scores. At alpha = 1
/// this is log P_RNNT(a | X); the CE loss is its negation.
pub fn numerator_forward(am: &dyn AmScorer, reference: &[LabelId], alpha: f64) -> Result<f64> {
    Ok(numerator_lattice(am, reference, alpha)?.log_sum)
}
