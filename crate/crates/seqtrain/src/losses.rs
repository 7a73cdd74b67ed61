//! Training criteria: frame-wise CE on the reference alignment sum, MMI with
//! lattice-free or beam denominators, N-best MMI and MBR with exact
//! gradients, Levenshtein alignment statistics, and a finite-difference
//! gradient checker.

use ndarray::Array3;

use crate::base::{logsumexp, Lexicon, PhonemeAlphabet, Utterance};
use crate::beam::{beam_denominator, BeamMode, NBestHyp};
use crate::lattice_free::{
    lf_denominator_approx, lf_denominator_limited, lf_denominator_word, DenomResult,
    SeqScoreConfig,
};
use crate::lm::{seq_score, AnySeqLm, NGramLM, NGramSeqLm, WordBoundaryLm};
use crate::scorer::{numerator_lattice, AmScorer, BoundScorer, ContextKScorer, ScorerGrad};
use crate::{Error, Result};

/// A loss evaluation: the scalar and the parameter gradient.
pub struct LossValue {
    pub value: f64,
    pub grad: ScorerGrad,
}

/// Which unit MBR costs count edits over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostKind {
    WordEdit,
    PhonemeEdit,
}

/// Denominator computation for lattice-free MMI.
pub enum DenomBackend<'a> {
    /// Exact DP over limited contexts with a phoneme n-gram LM.
    Limited { lm: &'a NGramLM },
    /// Context-approximated DP carrying one full LM history per state.
    Approx { lm: AnySeqLm<'a> },
    /// Context-approximated DP with a word-level LM applied at EOW phonemes.
    Word {
        word_lm: &'a NGramLM,
        lexicon: &'a Lexicon,
        alphabet: &'a PhonemeAlphabet,
    },
    /// Beam-search approximation of the denominator sum.
    Beam {
        lm: AnySeqLm<'a>,
        beam_size: usize,
        mode: BeamMode,
    },
}

impl<'a> DenomBackend<'a> {
    /// The sequence LM this backend applies, for scoring the numerator with
    /// identical conventions.
    pub fn seq_lm(&self) -> AnySeqLm<'a> {
        match self {
            DenomBackend::Limited { lm } => AnySeqLm::NGram(NGramSeqLm { lm }),
            DenomBackend::Approx { lm } => *lm,
            DenomBackend::Word {
                word_lm,
                lexicon,
                alphabet,
            } => AnySeqLm::WordBoundary(WordBoundaryLm {
                word_lm,
                lexicon,
                alphabet,
            }),
            DenomBackend::Beam { lm, .. } => *lm,
        }
    }

    pub fn denominator(&self, am: &dyn AmScorer, cfg: &SeqScoreConfig) -> Result<DenomResult> {
        match self {
            DenomBackend::Limited { lm } => lf_denominator_limited(am, lm, cfg),
            DenomBackend::Approx { lm } => lf_denominator_approx(am, lm, cfg),
            DenomBackend::Word {
                word_lm,
                lexicon,
                alphabet,
            } => lf_denominator_word(am, word_lm, lexicon, alphabet, cfg),
            DenomBackend::Beam {
                lm,
                beam_size,
                mode,
            } => beam_denominator(am, lm, cfg, *beam_size, *mode),
        }
    }
}

/// Frame-wise sequence CE: the negative alpha=1 log-probability of the
/// reference (sum over all alignments).
pub fn ce_loss(scorer: &ContextKScorer, utt: &Utterance) -> Result<LossValue> {
    let bound = scorer.bind(utt)?;
    let lat = numerator_lattice(&bound, &utt.reference_phonemes.0, 1.0)?;
    let mut g = lat.backward(&bound, 1.0);
    g.mapv_inplace(|x| -x);
    Ok(LossValue {
        value: -lat.log_sum,
        grad: scorer.grads_from_logprob_grad(bound.buckets(), &g),
    })
}

/// Lattice-free MMI: -log(q(reference) / sum over all sequences of q), with
/// q composed of per-step alpha-scaled acoustic scores and beta-scaled LM
/// scores, the denominator computed by `backend` and the numerator scored
/// with the same LM.
pub fn mmi_lf_loss(
    scorer: &ContextKScorer,
    utt: &Utterance,
    backend: &DenomBackend,
    cfg: &SeqScoreConfig,
) -> Result<LossValue> {
    cfg.validate()?;
    let bound = scorer.bind(utt)?;
    let reference = &utt.reference_phonemes.0;
    let num_lat = numerator_lattice(&bound, reference, cfg.alpha)?;
    let lm = backend.seq_lm();
    let num_total = num_lat.log_sum + cfg.beta * seq_score(&lm, reference);
    let den = backend.denominator(&bound, cfg)?;
    let g_den = den.lattice.backward(&bound, cfg.alpha);
    let g_num = num_lat.backward(&bound, cfg.alpha);
    let g = g_den - g_num;
    Ok(LossValue {
        value: den.log_sum - num_total,
        grad: scorer.grads_from_logprob_grad(bound.buckets(), &g),
    })
}

/// Phoneme-level or word-level LM used to rescore N-best hypotheses during
/// training.
pub enum TrainingLm<'a> {
    None,
    Phoneme(AnySeqLm<'a>),
    /// Word n-gram scored on the hypothesis word sequence including the end
    /// token.
    Word(&'a NGramLM),
}

impl TrainingLm<'_> {
    fn score(&self, hyp: &NBestHyp) -> f64 {
        match self {
            TrainingLm::None => 0.0,
            TrainingLm::Phoneme(lm) => seq_score(lm, &hyp.phonemes),
            TrainingLm::Word(lm) => lm.sequence_log_prob(&hyp.words),
        }
    }
}

fn hyp_scores(
    bound: &BoundScorer,
    hyps: &[NBestHyp],
    lm: &TrainingLm,
    alpha: f64,
    beta: f64,
) -> Result<(Vec<f64>, Vec<crate::lattice::Lattice>, usize)> {
    let reference = hyps
        .iter()
        .position(|h| h.is_reference)
        .ok_or_else(|| Error::invalid("N-best list does not contain the reference"))?;
    let mut qs = Vec::with_capacity(hyps.len());
    let mut lats = Vec::with_capacity(hyps.len());
    for h in hyps {
        let lat = numerator_lattice(bound, &h.phonemes, alpha)?;
        qs.push(lat.log_sum + beta * lm.score(h));
        lats.push(lat);
    }
    Ok((qs, lats, reference))
}

/// N-best MMI: -log of the reference posterior over the static list. The
/// gradient is exact for the list objective: posterior-weighted hypothesis
/// gradients minus the reference gradient.
pub fn mmi_nbest_loss(
    scorer: &ContextKScorer,
    utt: &Utterance,
    hyps: &[NBestHyp],
    lm: &TrainingLm,
    alpha: f64,
    beta: f64,
) -> Result<LossValue> {
    let bound = scorer.bind(utt)?;
    let (qs, lats, ref_i) = hyp_scores(&bound, hyps, lm, alpha, beta)?;
    let z = logsumexp(&qs);
    let value = z - qs[ref_i];
    let mut g: Option<Array3<f64>> = None;
    for (i, lat) in lats.iter().enumerate() {
        let p = (qs[i] - z).exp();
        let w = p - if i == ref_i { 1.0 } else { 0.0 };
        if w == 0.0 {
            continue;
        }
        let mut gi = lat.backward(&bound, alpha);
        gi.mapv_inplace(|x| x * w);
        g = Some(match g {
            None => gi,
            Some(acc) => acc + gi,
        });
    }
    let g = g.unwrap_or_else(|| {
        Array3::zeros((
            bound.num_frames(),
            bound.context_map().len(),
            bound.num_labels() + 1,
        ))
    });
    Ok(LossValue {
        value,
        grad: scorer.grads_from_logprob_grad(bound.buckets(), &g),
    })
}

/// N-best MBR: the expected edit cost under the list posterior. The gradient
/// is exact: sum over hypotheses of p_h (c_h - expected cost) times the
/// hypothesis score gradient.
#[allow(clippy::too_many_arguments)]
pub fn mbr_nbest_loss(
    scorer: &ContextKScorer,
    utt: &Utterance,
    hyps: &[NBestHyp],
    lm: &TrainingLm,
    alpha: f64,
    beta: f64,
    cost: CostKind,
) -> Result<LossValue> {
    let bound = scorer.bind(utt)?;
    let (qs, lats, ref_i) = hyp_scores(&bound, hyps, lm, alpha, beta)?;
    let z = logsumexp(&qs);
    let costs: Vec<f64> = hyps
        .iter()
        .map(|h| match cost {
            CostKind::WordEdit => {
                edit_distance(&hyps[ref_i].words, &h.words).distance as f64
            }
            CostKind::PhonemeEdit => {
                edit_distance(&hyps[ref_i].phonemes, &h.phonemes).distance as f64
            }
        })
        .collect();
    let ps: Vec<f64> = qs.iter().map(|&q| (q - z).exp()).collect();
    let value: f64 = ps.iter().zip(&costs).map(|(p, c)| p * c).sum();
    let mut g: Option<Array3<f64>> = None;
    for (i, lat) in lats.iter().enumerate() {
        let w = ps[i] * (costs[i] - value);
        if w == 0.0 {
            continue;
        }
        let mut gi = lat.backward(&bound, alpha);
        gi.mapv_inplace(|x| x * w);
        g = Some(match g {
            None => gi,
            Some(acc) => acc + gi,
        });
    }
    let g = g.unwrap_or_else(|| {
        Array3::zeros((
            bound.num_frames(),
            bound.context_map().len(),
            bound.num_labels() + 1,
        ))
    });
    Ok(LossValue {
        value,
        grad: scorer.grads_from_logprob_grad(bound.buckets(), &g),
    })
}

/// Levenshtein alignment statistics between a reference and a hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EditStats {
    pub distance: usize,
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
}

/// Unit-cost edit distance with a backtrace; on cost ties the alignment
/// prefers substitution over deletion over insertion.
pub fn edit_distance(reference: &[usize], hyp: &[usize]) -> EditStats {
    let n = reference.len();
    let m = hyp.len();
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for i in 0..=n {
        d[i][0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = d[i - 1][j] + 1;
            let ins = d[i][j - 1] + 1;
            d[i][j] = sub.min(del).min(ins);
        }
    }
    let (mut i, mut j) = (n, m);
    let mut stats = EditStats {
        distance: d[n][m],
        sub: 0,
        del: 0,
        ins: 0,
    };
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != hyp[j - 1]);
            if d[i][j] == d[i - 1][j - 1] + cost {
                if cost == 1 {
                    stats.sub += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            stats.del += 1;
            i -= 1;
            continue;
        }
        stats.ins += 1;
        j -= 1;
    }
    debug_assert_eq!(stats.distance, stats.sub + stats.del + stats.ins);
    stats
}

/// Central finite-difference check of a loss gradient: returns the maximum
/// absolute deviation between `grad` and the numerical derivative over all
/// parameters.
pub fn grad_check<F>(
    scorer: &ContextKScorer,
    grad: &ScorerGrad,
    eps: f64,
    f: F,
) -> Result<f64>
where
    F: Fn(&ContextKScorer) -> Result<f64>,
{
    let mut worst = 0.0f64;
    for i in 0..scorer.num_params() {
        let orig = scorer.get_param(i);
        let mut s = scorer.clone();
        s.set_param(i, orig + eps);
        let hi = f(&s)?;
        s.set_param(i, orig - eps);
        let lo = f(&s)?;
        let num = (hi - lo) / (2.0 * eps);
        worst = worst.max((num - grad.get_param(i)).abs());
    }
    Ok(worst)
}
