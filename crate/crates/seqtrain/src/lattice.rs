//! A generic frame-synchronous DP graph in log space with reverse
//! accumulation. All denominator backends and the numerator DP build one of
//! these; the backward pass yields gradients with respect to the per-frame
//! acoustic log-probabilities.

use ndarray::Array3;

use crate::base::{logsumexp, LOG_ZERO};
use crate::scorer::AmScorer;

/// One incoming transition into a state at frame t. The transition weight is
/// `alpha * L(t-1, ctx, out) + lm_scaled` where L is the acoustic log-prob
/// table and `lm_scaled` already carries the beta-scaled LM contribution.
#[derive(Debug, Clone)]
pub struct LatticeEdge {
    pub src: usize,
    pub ctx: usize,
    pub out: usize,
    pub lm_scaled: f64,
}

#[derive(Debug, Clone)]
pub struct LatticeState {
    /// Log-sum of all path scores reaching this state.
    pub q: f64,
    pub edges: Vec<LatticeEdge>,
}

/// frames[0] holds the initial states (no edges); frames[t] the states after
/// consuming frame t. `final_extra` is an additive per-final-state term
/// (finalization scores); empty means all zeros.
#[derive(Debug, Clone)]
pub struct Lattice {
    pub frames: Vec<Vec<LatticeState>>,
    pub final_extra: Vec<f64>,
    pub log_sum: f64,
}

impl Lattice {
    pub fn num_frames(&self) -> usize {
        self.frames.len() - 1
    }

    /// Computes the final log-sum over last-frame states plus extras.
    pub fn finish(&mut self) {
        let last = self.frames.last().unwrap();
        let scores: Vec<f64> = last
            .iter()
            .enumerate()
            .map(|(i, s)| s.q + self.final_extra.get(i).copied().unwrap_or(0.0))
            .collect();
        self.log_sum = logsumexp(&scores);
    }

    /// Gradient of `log_sum` with respect to the acoustic log-prob table,
    /// shape (T, num_contexts, |V|+1).
    pub fn backward(&self, am: &dyn AmScorer, alpha: f64) -> Array3<f64> {
        let t_len = self.num_frames();
        let n_ctx = am.context_map().len();
        let n_out = am.num_labels() + 1;
        let mut grad = Array3::<f64>::zeros((t_len, n_ctx, n_out));
        if self.log_sum == LOG_ZERO {
            return grad;
        }
        let last = self.frames.last().unwrap();
        let mut g: Vec<f64> = last
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let e = s.q + self.final_extra.get(i).copied().unwrap_or(0.0);
                if e == LOG_ZERO {
                    0.0
                } else {
                    (e - self.log_sum).exp()
                }
            })
            .collect();
        for t in (1..=t_len).rev() {
            let mut g_prev = vec![0.0; self.frames[t - 1].len()];
            for (i, st) in self.frames[t].iter().enumerate() {
                let gi = g[i];
                if gi == 0.0 || st.q == LOG_ZERO {
                    continue;
                }
                for e in &st.edges {
                    let src_q = self.frames[t - 1][e.src].q;
                    let w = alpha * am.log_prob(t - 1, e.ctx, e.out) + e.lm_scaled;
                    let total = src_q + w;
                    if total == LOG_ZERO {
                        continue;
                    }
                    let p = (total - st.q).exp() * gi;
                    grad[[t - 1, e.ctx, e.out]] += alpha * p;
                    g_prev[e.src] += p;
                }
            }
            g = g_prev;
        }
        grad
    }
}
