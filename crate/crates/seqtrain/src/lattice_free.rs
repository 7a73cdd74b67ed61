//! Lattice-free denominator computation: exact DP over limited label
//! contexts, the context approximation that threads one selected full history
//! per DP state, word-level LM variants, top-J pruning, and a brute-force
//! enumeration oracle.

use crate::base::{logsumexp, LabelId, Lexicon, PhonemeAlphabet, LOG_ZERO};
use crate::lattice::{Lattice, LatticeEdge, LatticeState};
use crate::lm::{NGramLM, SeqLm, WordBoundaryLm};
use crate::scorer::{AmScorer, ContextMap};
use crate::{Error, Result};

/// Scales and pruning for sequence-level scoring: per-step acoustic scale
/// alpha, LM scale beta, and optional top-J context pruning per frame.
#[derive(Debug, Clone, Copy)]
pub struct SeqScoreConfig {
    pub alpha: f64,
    pub beta: f64,
    pub top_j: Option<usize>,
}

impl SeqScoreConfig {
    pub fn rnnt_only() -> Self {
        SeqScoreConfig {
            alpha: 1.0,
            beta: 0.0,
            top_j: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::invalid("alpha must be finite and non-negative"));
        }
        if !self.beta.is_finite() {
            return Err(Error::invalid("beta must be finite"));
        }
        if self.top_j == Some(0) {
            return Err(Error::invalid("top-J must be at least 1"));
        }
        Ok(())
    }
}

/// One DP state for inspection/dumping: the label context, its accumulated
/// log-sum Q, and (for the context approximation) the merge key of the
/// selected history.
#[derive(Debug, Clone)]
pub struct DpStateDump {
    pub context: Vec<LabelId>,
    pub q: f64,
    pub history_key: Option<Vec<usize>>,
}

/// Denominator DP output: the log-sum, the underlying lattice (for the
/// backward pass), and per-frame state dumps.
pub struct DenomResult {
    pub log_sum: f64,
    pub lattice: Lattice,
    pub states: Vec<Vec<DpStateDump>>,
}

/// Keep-mask for top-J pruning over one frame's context states. Only
/// full-length contexts compete for the J slots; begin-padded shorter
/// contexts always survive (they exist only near the utterance start and are
/// never numerous). Ties keep the smaller context index.
pub fn top_j_select(cm: &ContextMap, qs: &[f64], j: usize) -> Vec<bool> {
    assert_eq!(qs.len(), cm.len());
    let full_start = cm.len() - cm.num_labels().pow(cm.k() as u32);
    let mut keep = vec![true; qs.len()];
    let mut full: Vec<usize> = (full_start..qs.len()).collect();
    if full.len() <= j {
        return keep;
    }
    full.sort_by(|&a, &b| qs[b].partial_cmp(&qs[a]).unwrap().then(a.cmp(&b)));
    for &idx in &full[j..] {
        keep[idx] = false;
    }
    keep
}

/// Exact lattice-free denominator over limited contexts: DP states are the
/// begin-padded label contexts of length up to k, blank keeps the state,
/// label a moves to push(ctx, a). The phoneme LM is applied per emitted label
/// with begin padding; its order must not exceed k+1.
pub fn lf_denominator_limited(
    am: &dyn AmScorer,
    lm: &NGramLM,
    cfg: &SeqScoreConfig,
) -> Result<DenomResult> {
    cfg.validate()?;
    let cm = am.context_map();
    if lm.order() > cm.k() + 1 {
        return Err(Error::invalid(format!(
            "LM order {} needs more context than the k={} states carry",
            lm.order(),
            cm.k()
        )));
    }
    let n_ctx = cm.len();
    let v = am.num_labels();
    let blank = v;
    let t_len = am.num_frames();
    let contexts: Vec<Vec<LabelId>> = (0..n_ctx).map(|i| cm.decode(i)).collect();
    // beta-scaled LM increments per (source context, label)
    let lm_inc: Vec<Vec<f64>> = contexts
        .iter()
        .map(|ctx| {
            (0..v)
                .map(|a| cfg.beta * lm.log_prob_padded(ctx, a))
                .collect()
        })
        .collect();
    let push_to: Vec<Vec<usize>> = contexts
        .iter()
        .map(|ctx| (0..v).map(|a| cm.encode(&cm.push(ctx, a))).collect())
        .collect();

    let mut frames: Vec<Vec<LatticeState>> = Vec::with_capacity(t_len + 1);
    let mut init: Vec<LatticeState> = (0..n_ctx)
        .map(|_| LatticeState {
            q: LOG_ZERO,
            edges: vec![],
        })
        .collect();
    init[cm.encode(&[])].q = 0.0;
    frames.push(init);
    let mut dumps: Vec<Vec<DpStateDump>> = Vec::with_capacity(t_len + 1);
    dumps.push(dump_frame(&contexts, &frames[0], None));

    for t in 1..=t_len {
        let prev = &frames[t - 1];
        let mut edges: Vec<Vec<LatticeEdge>> = vec![vec![]; n_ctx];
        for (src, st) in prev.iter().enumerate() {
            if st.q == LOG_ZERO {
                continue;
            }
            edges[src].push(LatticeEdge {
                src,
                ctx: src,
                out: blank,
                lm_scaled: 0.0,
            });
            for a in 0..v {
                edges[push_to[src][a]].push(LatticeEdge {
                    src,
                    ctx: src,
                    out: a,
                    lm_scaled: lm_inc[src][a],
                });
            }
        }
        let mut states: Vec<LatticeState> = edges
            .into_iter()
            .map(|es| {
                let scores: Vec<f64> = es
                    .iter()
                    .map(|e| {
                        prev[e.src].q + cfg.alpha * am.log_prob(t - 1, e.ctx, e.out) + e.lm_scaled
                    })
                    .collect();
                LatticeState {
                    q: logsumexp(&scores),
                    edges: es,
                }
            })
            .collect();
        if let Some(j) = cfg.top_j {
            let qs: Vec<f64> = states.iter().map(|s| s.q).collect();
            for (st, keep) in states.iter_mut().zip(top_j_select(cm, &qs, j)) {
                if !keep {
                    st.q = LOG_ZERO;
                }
            }
        }
        dumps.push(dump_frame(&contexts, &states, None));
        frames.push(states);
    }
    let mut lattice = Lattice {
        frames,
        final_extra: vec![],
        log_sum: LOG_ZERO,
    };
    lattice.finish();
    Ok(DenomResult {
        log_sum: lattice.log_sum,
        lattice,
        states: dumps,
    })
}

fn dump_frame(
    contexts: &[Vec<LabelId>],
    states: &[LatticeState],
    keys: Option<&[Option<Vec<usize>>]>,
) -> Vec<DpStateDump> {
    states
        .iter()
        .enumerate()
        .map(|(i, s)| DpStateDump {
            context: contexts[i].clone(),
            q: s.q,
            history_key: keys.and_then(|k| k[i].clone()),
        })
        .collect()
}

/// Context-approximated full-context denominator: DP states are still the
/// limited contexts, but each carries one selected full LM history, updated
/// along the best (maximum per-path-score) incoming transition. The Q values
/// remain sums; only the history selection uses the maximum. Ties prefer the
/// blank transition, then the smallest label id, then the smallest
/// predecessor history key.
pub fn lf_denominator_approx<L: SeqLm>(
    am: &dyn AmScorer,
    lm: &L,
    cfg: &SeqScoreConfig,
) -> Result<DenomResult> {
    cfg.validate()?;
    let cm = am.context_map();
    let n_ctx = cm.len();
    let v = am.num_labels();
    let blank = v;
    let t_len = am.num_frames();
    let contexts: Vec<Vec<LabelId>> = (0..n_ctx).map(|i| cm.decode(i)).collect();
    let push_to: Vec<Vec<usize>> = contexts
        .iter()
        .map(|ctx| (0..v).map(|a| cm.encode(&cm.push(ctx, a))).collect())
        .collect();

    let mut frames: Vec<Vec<LatticeState>> = Vec::with_capacity(t_len + 1);
    let mut init: Vec<LatticeState> = (0..n_ctx)
        .map(|_| LatticeState {
            q: LOG_ZERO,
            edges: vec![],
        })
        .collect();
    init[cm.encode(&[])].q = 0.0;
    frames.push(init);
    let mut hists: Vec<Option<L::State>> = vec![None; n_ctx];
    hists[cm.encode(&[])] = Some(lm.start());
    let keys_of = |hists: &[Option<L::State>]| -> Vec<Option<Vec<usize>>> {
        hists
            .iter()
            .map(|h| h.as_ref().map(|s| lm.merge_key(s)))
            .collect()
    };
    let mut dumps: Vec<Vec<DpStateDump>> = Vec::with_capacity(t_len + 1);
    let k0 = keys_of(&hists);
    dumps.push(dump_frame(&contexts, &frames[0], Some(&k0)));

    for t in 1..=t_len {
        let prev = &frames[t - 1];
        let mut edges: Vec<Vec<LatticeEdge>> = vec![vec![]; n_ctx];
        let mut cands: Vec<Option<Cand<L::State>>> = (0..n_ctx).map(|_| None).collect();
        for (src, st) in prev.iter().enumerate() {
            if st.q == LOG_ZERO {
                continue;
            }
            let h = hists[src].as_ref().expect("reachable state has a history");
            let src_key = lm.merge_key(h);
            // blank: context and history unchanged
            {
                let omega = st.q + cfg.alpha * am.log_prob(t - 1, src, blank);
                consider(
                    &mut cands[src],
                    Cand {
                        omega,
                        pri: (0, 0, src_key.clone()),
                        state: h.clone(),
                    },
                );
                edges[src].push(LatticeEdge {
                    src,
                    ctx: src,
                    out: blank,
                    lm_scaled: 0.0,
                });
            }
            for a in 0..v {
                let (nh, inc) = lm.step(h, a);
                let lm_scaled = cfg.beta * inc;
                let dest = push_to[src][a];
                let omega = st.q + cfg.alpha * am.log_prob(t - 1, src, a) + lm_scaled;
                consider(
                    &mut cands[dest],
                    Cand {
                        omega,
                        pri: (1, a, src_key.clone()),
                        state: nh,
                    },
                );
                edges[dest].push(LatticeEdge {
                    src,
                    ctx: src,
                    out: a,
                    lm_scaled,
                });
            }
        }
        let mut states: Vec<LatticeState> = edges
            .into_iter()
            .map(|es| {
                let scores: Vec<f64> = es
                    .iter()
                    .map(|e| {
                        prev[e.src].q + cfg.alpha * am.log_prob(t - 1, e.ctx, e.out) + e.lm_scaled
                    })
                    .collect();
                LatticeState {
                    q: logsumexp(&scores),
                    edges: es,
                }
            })
            .collect();
        let mut new_hists: Vec<Option<L::State>> =
            cands.into_iter().map(|c| c.map(|c| c.state)).collect();
        if let Some(j) = cfg.top_j {
            let qs: Vec<f64> = states.iter().map(|s| s.q).collect();
            for (i, keep) in top_j_select(cm, &qs, j).into_iter().enumerate() {
                if !keep {
                    states[i].q = LOG_ZERO;
                    new_hists[i] = None;
                }
            }
        }
        hists = new_hists;
        let keys = keys_of(&hists);
        dumps.push(dump_frame(&contexts, &states, Some(&keys)));
        frames.push(states);
    }
    let final_extra: Vec<f64> = hists
        .iter()
        .map(|h| h.as_ref().map_or(0.0, |s| cfg.beta * lm.finalize(s)))
        .collect();
    let mut lattice = Lattice {
        frames,
        final_extra,
        log_sum: LOG_ZERO,
    };
    lattice.finish();
    Ok(DenomResult {
        log_sum: lattice.log_sum,
        lattice,
        states: dumps,
    })
}

/// Candidate transition for the history selection: path score, tie-break
/// priority (transition kind, label, predecessor key; smaller wins), and the
/// resulting LM state.
struct Cand<S> {
    omega: f64,
    pri: (u8, usize, Vec<usize>),
    state: S,
}

fn consider<S>(slot: &mut Option<Cand<S>>, cand: Cand<S>) {
    let better = match slot {
        None => true,
        Some(cur) => cand.omega > cur.omega || (cand.omega == cur.omega && cand.pri < cur.pri),
    };
    if better {
        *slot = Some(cand);
    }
}

/// Word-level lattice-free denominator: the context approximation with a
/// word LM applied at EOW phonemes, the selected history carrying both the
/// word history and the within-word suffix.
pub fn lf_denominator_word(
    am: &dyn AmScorer,
    word_lm: &NGramLM,
    lexicon: &Lexicon,
    alphabet: &PhonemeAlphabet,
    cfg: &SeqScoreConfig,
) -> Result<DenomResult> {
    let lm = WordBoundaryLm {
        word_lm,
        lexicon,
        alphabet,
    };
    lf_denominator_approx(am, &lm, cfg)
}

/// Enumeration oracle: sums alpha-scaled path scores plus beta-scaled LM
/// scores over every alignment path of length T. Errors if the number of
/// paths exceeds `budget`.
pub fn brute_force_denominator<L: SeqLm>(
    am: &dyn AmScorer,
    lm: &L,
    cfg: &SeqScoreConfig,
    budget: u64,
) -> Result<f64> {
    cfg.validate()?;
    let t_len = am.num_frames();
    let v = am.num_labels();
    let blank = v;
    let cm = am.context_map();
    let n_paths = (v as u128 + 1).pow(t_len as u32);
    if n_paths > budget as u128 {
        return Err(Error::Budget(n_paths.min(u64::MAX as u128) as u64));
    }
    let mut total = LOG_ZERO;
    for mut code in 0..n_paths as u64 {
        let mut emitted: Vec<LabelId> = Vec::new();
        let mut st = lm.start();
        let mut score = 0.0;
        for t in 0..t_len {
            let y = (code % (v as u64 + 1)) as usize;
            code /= v as u64 + 1;
            let ctx = cm.suffix(&emitted);
            score += cfg.alpha * am.log_prob(t, ctx, y);
            if y != blank {
                let (ns, inc) = lm.step(&st, y);
                score += cfg.beta * inc;
                st = ns;
                emitted.push(y);
            }
        }
        score += cfg.beta * lm.finalize(&st);
        total = crate::base::log_add(total, score);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{train_ngram, LmUnit, NGramSeqLm, SuffixLm, SuffixSeqLm};
    use crate::scorer::{numerator_forward, PrecomputedScores};

    fn cfg(alpha: f64, beta: f64) -> SeqScoreConfig {
        SeqScoreConfig {
            alpha,
            beta,
            top_j: None,
        }
    }

    #[test]
    fn limited_matches_enumeration() {
        let am = PrecomputedScores::random(3, 2, 1, 101);
        let lm = train_ngram(
            &[vec![0, 1, 0], vec![1, 1], vec![0, 0, 1]],
            LmUnit::Phoneme,
            2,
            0.5,
            2,
        )
        .unwrap();
        for c in [cfg(1.0, 0.0), cfg(0.8, 0.5), cfg(1.0, 1.0)] {
            let got = lf_denominator_limited(&am, &lm, &c).unwrap().log_sum;
            let want =
                brute_force_denominator(&am, &NGramSeqLm { lm: &lm }, &c, 1 << 20).unwrap();
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn limited_rejects_oversized_lm() {
        let am = PrecomputedScores::random(2, 2, 1, 7);
        let lm = train_ngram(&[vec![0, 1, 0, 1]], LmUnit::Phoneme, 3, 0.5, 2).unwrap();
        assert!(lf_denominator_limited(&am, &lm, &cfg(1.0, 0.5)).is_err());
    }

    #[test]
    fn approx_equals_limited_for_matching_order() {
        let am = PrecomputedScores::random(4, 2, 2, 55);
        let lm = train_ngram(
            &[vec![0, 1, 1, 0], vec![1, 0, 0]],
            LmUnit::Phoneme,
            2,
            0.5,
            2,
        )
        .unwrap();
        let c = cfg(0.9, 0.7);
        let a = lf_denominator_limited(&am, &lm, &c).unwrap().log_sum;
        let b = lf_denominator_approx(&am, &NGramSeqLm { lm: &lm }, &c)
            .unwrap()
            .log_sum;
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn approx_exact_when_context_covers_history() {
        // T <= k: every DP state's context is its entire history, so the
        // approximation is exact even for a full-context LM.
        let am = PrecomputedScores::random(2, 2, 2, 77);
        let lm = SuffixLm::train(&[vec![0, 1, 0], vec![1, 1, 0]], 2, 0.5).unwrap();
        let s = SuffixSeqLm { lm: &lm };
        let c = cfg(1.0, 0.8);
        let got = lf_denominator_approx(&am, &s, &c).unwrap().log_sum;
        let want = brute_force_denominator(&am, &s, &c, 1 << 20).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn top_j_full_keeps_everything_and_pruning_lowers_mass() {
        let am = PrecomputedScores::random(5, 3, 1, 13);
        let lm = train_ngram(
            &[vec![0, 1, 2, 0], vec![2, 2, 1]],
            LmUnit::Phoneme,
            2,
            0.5,
            3,
        )
        .unwrap();
        let full = lf_denominator_limited(&am, &lm, &cfg(1.0, 0.5)).unwrap().log_sum;
        let mut c = cfg(1.0, 0.5);
        c.top_j = Some(3); // |V|^k = 3: no-op
        let same = lf_denominator_limited(&am, &lm, &c).unwrap().log_sum;
        assert!((full - same).abs() < 1e-12);
        c.top_j = Some(1);
        let pruned = lf_denominator_limited(&am, &lm, &c).unwrap().log_sum;
        assert!(pruned <= full + 1e-12);
        assert!(pruned > LOG_ZERO);
    }

    #[test]
    fn denominator_dominates_numerator() {
        for seed in [1u64, 2, 3] {
            let am = PrecomputedScores::random(4, 2, 1, seed);
            let lm = NGramLM::uniform(LmUnit::Phoneme, 2);
            for alpha in [1.0, 0.6] {
                let c = cfg(alpha, 0.0);
                let den = lf_denominator_limited(&am, &lm, &c).unwrap().log_sum;
                for refseq in [vec![], vec![0], vec![0, 1], vec![1, 1, 0]] {
                    let num = numerator_forward(&am, &refseq, alpha).unwrap();
                    assert!(
                        den >= num - 1e-10,
                        "seed {seed} alpha {alpha}: den {den} < num {num}"
                    );
                }
            }
        }
    }

    #[test]
    fn denominator_gradient_is_occupancy() {
        // with beta = 0 and alpha = 1 the gradient over (ctx, out) at each
        // frame is a posterior occupancy distribution summing to one.
        let am = PrecomputedScores::random(3, 2, 1, 99);
        let lm = NGramLM::uniform(LmUnit::Phoneme, 2);
        let res = lf_denominator_limited(&am, &lm, &cfg(1.0, 0.0)).unwrap();
        let grad = res.lattice.backward(&am, 1.0);
        for t in 0..3 {
            let s: f64 = grad.slice(ndarray::s![t, .., ..]).sum();
            assert!((s - 1.0).abs() < 1e-9, "frame {t}: {s}");
        }
    }

    #[test]
    fn word_level_denominator_matches_enumeration() {
        use crate::base::{Lexicon, PhonemeAlphabet};
        let ab = PhonemeAlphabet::from_names(["p", "p#"]).unwrap();
        let p = ab.id("p").unwrap();
        let pe = ab.id("p#").unwrap();
        let mut lex = Lexicon::new();
        lex.add_entry(&ab, "pa", vec![p, pe]).unwrap();
        lex.add_entry(&ab, "o", vec![pe]).unwrap();
        let wlm = train_ngram(
            &[
                vec![lex.word_id("pa").unwrap(), lex.word_id("o").unwrap()],
                vec![lex.word_id("o").unwrap()],
            ],
            LmUnit::Word,
            1,
            0.5,
            lex.num_words(),
        )
        .unwrap();
        // T = k = 2 so the history selection is exact.
        let am = PrecomputedScores::random(2, 2, 2, 31);
        let c = cfg(1.0, 0.9);
        let got = lf_denominator_word(&am, &wlm, &lex, &ab, &c).unwrap().log_sum;
        let lm = WordBoundaryLm {
            word_lm: &wlm,
            lexicon: &lex,
            alphabet: &ab,
        };
        let want = brute_force_denominator(&am, &lm, &c, 1 << 20).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn budget_guard_trips() {
        let am = PrecomputedScores::random(30, 3, 1, 1);
        let lm = NGramLM::uniform(LmUnit::Phoneme, 3);
        let r = brute_force_denominator(&am, &NGramSeqLm { lm: &lm }, &cfg(1.0, 0.0), 1 << 21);
        assert!(matches!(r, Err(Error::Budget(_))));
    }
}
