//! LM-fused decoding: zero-encoder internal-LM estimation, beam recognition
//! with external-LM / internal-LM shallow fusion, and WER scoring with an
//! error-type breakdown.

use std::collections::HashMap;

use ndarray::Array2;

use crate::base::{LabelId, WordId};
use crate::lm::{MultiLevelLm, SeqLm};
use crate::losses::edit_distance;
use crate::scorer::{AmScorer, ContextKScorer, ContextMap};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct DecodeConfig {
    /// External (multi-level) LM weight.
    pub lambda1: f64,
    /// Internal LM subtraction weight.
    pub lambda2: f64,
    pub beam_size: usize,
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return Err(Error::invalid("fusion weights must be finite"));
        }
        if self.beam_size == 0 {
            return Err(Error::invalid("beam size must be at least 1"));
        }
        Ok(())
    }
}

/// Internal LM estimate of the transducer: label distribution per context,
/// shape (n_ctx, |V|).
pub struct IlmModel {
    cm: ContextMap,
    table: Array2<f64>,
}

impl IlmModel {
    pub fn log_prob(&self, labels: &[LabelId], a: LabelId) -> f64 {
        self.table[[self.cm.suffix(labels), a]]
    }
}

/// Zero-encoder internal LM: the transducer distribution with the frame
/// feature replaced by zero, renormalized over the labels after removing the
/// blank mass. Errors if some context puts (numerically) all mass on blank.
pub fn ilm_zero_encoder(scorer: &ContextKScorer) -> Result<IlmModel> {
    let zt = scorer.zero_feature_table();
    let v = scorer.num_labels();
    let n_ctx = scorer.context_map().len();
    let mut table = Array2::zeros((n_ctx, v));
    for c in 0..n_ctx {
        let label_mass = 1.0 - zt[[c, v]].exp();
        if label_mass <= 1e-12 {
            return Err(Error::invalid(format!(
                "internal LM undefined: context {c} puts all mass on blank"
            )));
        }
        let ln_mass = label_mass.ln();
        for a in 0..v {
            table[[c, a]] = zt[[c, a]] - ln_mass;
        }
    }
    Ok(IlmModel {
        cm: scorer.context_map().clone(),
        table,
    })
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub words: Vec<WordId>,
    pub phonemes: Vec<LabelId>,
    pub score: f64,
}

/// Beam recognition over label sequences: alignment masses are summed per
/// sequence; each emitted label adds `lambda1` times the multi-level LM score
/// and subtracts `lambda2` times the internal LM score. Returns the best
/// hypothesis under the fused score (finalization included).
pub fn recognize(
    am: &dyn AmScorer,
    lm: &MultiLevelLm,
    ilm: Option<&IlmModel>,
    cfg: &DecodeConfig,
) -> Result<DecodeOutput> {
    cfg.validate()?;
    if cfg.lambda2 != 0.0 && ilm.is_none() {
        return Err(Error::invalid("lambda2 is nonzero but no internal LM given"));
    }
    let cm = am.context_map();
    let v = am.num_labels();
    let blank = v;
    let t_len = am.num_frames();

    let mut beam: Vec<Hyp> = vec![Hyp {
        labels: vec![],
        words: vec![],
        state: lm.start(),
        fused_lm: 0.0,
        am_mass: 0.0,
    }];
    for t in 0..t_len {
        let mut next: HashMap<Vec<LabelId>, Hyp> = HashMap::new();
        for h in &beam {
            let ctx_idx = cm.suffix(&h.labels);
            // blank: mass only
            upsert(
                &mut next,
                h.labels.clone(),
                h.am_mass + am.log_prob(t, ctx_idx, blank),
                || (h.words.clone(), h.state.clone(), h.fused_lm),
            );
            for a in 0..v {
                let mass = h.am_mass + am.log_prob(t, ctx_idx, a);
                let mut labels = h.labels.clone();
                labels.push(a);
                upsert(&mut next, labels, mass, || {
                    let (ns, inc, word) = lm.step_word(&h.state, a);
                    let mut fused = h.fused_lm + cfg.lambda1 * inc;
                    if let Some(ilm) = ilm {
                        fused -= cfg.lambda2 * ilm.log_prob(&h.labels, a);
                    }
                    let mut words = h.words.clone();
                    if let Some(w) = word {
                        words.push(w);
                    }
                    (words, ns, fused)
                });
            }
        }
        let mut pool: Vec<Hyp> = next.into_values().collect();
        pool.sort_by(|a, b| {
            let sa = a.am_mass + a.fused_lm;
            let sb = b.am_mass + b.fused_lm;
            sb.partial_cmp(&sa)
                .unwrap()
                .then_with(|| a.labels.cmp(&b.labels))
        });
        pool.truncate(cfg.beam_size);
        beam = pool;
    }
    let best = beam
        .into_iter()
        .map(|h| {
            let score = h.am_mass + h.fused_lm + cfg.lambda1 * lm.finalize(&h.state);
            (score, h)
        })
        .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| b.1.labels.cmp(&a.1.labels)))
        .expect("beam is never empty");
    Ok(DecodeOutput {
        words: best.1.words,
        phonemes: best.1.labels,
        score: best.0,
    })
}

/// One fused-score hypothesis during recognition: the summed acoustic
/// alignment mass plus the (deterministic per label sequence) fused LM part.
struct Hyp {
    labels: Vec<LabelId>,
    words: Vec<WordId>,
    state: crate::lm::MultiLevelState,
    fused_lm: f64,
    am_mass: f64,
}

fn upsert<F>(next: &mut HashMap<Vec<LabelId>, Hyp>, labels: Vec<LabelId>, mass: f64, make: F)
where
    F: FnOnce() -> (Vec<WordId>, crate::lm::MultiLevelState, f64),
{
    match next.entry(labels.clone()) {
        std::collections::hash_map::Entry::Vacant(e) => {
            let (words, state, fused_lm) = make();
            e.insert(Hyp {
                labels,
                words,
                state,
                fused_lm,
                am_mass: mass,
            });
        }
        std::collections::hash_map::Entry::Occupied(mut e) => {
            let h = e.get_mut();
            h.am_mass = crate::base::log_add(h.am_mass, mass);
        }
    }
}

/// Aggregate WER with an error-type breakdown, as percentages of reference
/// tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WerBreakdown {
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
    pub ref_tokens: usize,
}

impl WerBreakdown {
    pub fn wer(&self) -> f64 {
        100.0 * (self.sub + self.del + self.ins) as f64 / self.ref_tokens as f64
    }
    pub fn sub_rate(&self) -> f64 {
        100.0 * self.sub as f64 / self.ref_tokens as f64
    }
    pub fn del_rate(&self) -> f64 {
        100.0 * self.del as f64 / self.ref_tokens as f64
    }
    pub fn ins_rate(&self) -> f64 {
        100.0 * self.ins as f64 / self.ref_tokens as f64
    }
}

/// Scores hypotheses against references matched by utterance id. Every
/// reference must have exactly one hypothesis and vice versa; the reference
/// side must contain at least one token overall.
pub fn score_wer(
    refs: &[(String, Vec<WordId>)],
    hyps: &[(String, Vec<WordId>)],
) -> Result<WerBreakdown> {
    let mut by_id: HashMap<&str, &[WordId]> = HashMap::new();
    for (id, words) in hyps {
        if by_id.insert(id, words).is_some() {
            return Err(Error::invalid(format!("duplicate hypothesis for `{id}`")));
        }
    }
    let mut out = WerBreakdown {
        sub: 0,
        del: 0,
        ins: 0,
        ref_tokens: 0,
    };
    for (id, r) in refs {
        let h = by_id
            .remove(id.as_str())
            .ok_or_else(|| Error::invalid(format!("missing hypothesis for `{id}`")))?;
        let s = edit_distance(r, h);
        out.sub += s.sub;
        out.del += s.del;
        out.ins += s.ins;
        out.ref_tokens += r.len();
    }
    if let Some(id) = by_id.keys().next() {
        return Err(Error::invalid(format!("hypothesis for unknown utterance `{id}`")));
    }
    if out.ref_tokens == 0 {
        return Err(Error::invalid("empty reference set"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base::{Lexicon, PhonemeAlphabet};
    use crate::lm::{seq_score, train_ngram, LmUnit, NGramLM};
    use crate::scorer::{numerator_forward, ContextKScorer, FeatureSource, PrecomputedScores};

    fn toy_world() -> (PhonemeAlphabet, Lexicon, NGramLM, NGramLM) {
        let ab = PhonemeAlphabet::from_names(["p", "q", "p#", "q#"]).unwrap();
        let mut lex = Lexicon::new();
        let p = ab.id("p").unwrap();
        let q = ab.id("q").unwrap();
        let pe = ab.id("p#").unwrap();
        let qe = ab.id("q#").unwrap();
        lex.add_entry(&ab, "one", vec![p, pe]).unwrap();
        lex.add_entry(&ab, "two", vec![q, qe]).unwrap();
        let one = lex.word_id("one").unwrap();
        let two = lex.word_id("two").unwrap();
        let wlm = train_ngram(
            &[vec![one, two], vec![one]],
            LmUnit::Word,
            2,
            0.5,
            lex.num_words(),
        )
        .unwrap();
        let plm = train_ngram(
            &[vec![p, pe, q, qe], vec![p, pe]],
            LmUnit::Phoneme,
            2,
            0.5,
            4,
        )
        .unwrap();
        (ab, lex, plm, wlm)
    }

    #[test]
    fn ilm_rows_normalize() {
        let s = ContextKScorer::random(1, 3, 2, FeatureSource::RandomFixed { seed: 1 }, 7, 1.0);
        let ilm = ilm_zero_encoder(&s).unwrap();
        for c in 0..s.context_map().len() {
            let row: Vec<f64> = (0..3).map(|a| ilm.table[[c, a]]).collect();
            assert!(crate::base::logsumexp(&row).abs() < 1e-9);
        }
    }

    #[test]
    fn ilm_rejects_all_blank_contexts() {
        let mut s = ContextKScorer::uniform(0, 2, 1, FeatureSource::RandomFixed { seed: 0 });
        // single context, base logits at params 0..=2; push everything onto blank
        s.set_param(2, 60.0);
        assert!(ilm_zero_encoder(&s).is_err());
    }

    #[test]
    fn recognize_matches_exhaustive_argmax() {
        let (ab, lex, plm, wlm) = toy_world();
        let lm = MultiLevelLm {
            phoneme_lm: &plm,
            word_lm: &wlm,
            lexicon: &lex,
            alphabet: &ab,
        };
        let am = PrecomputedScores::random(3, 4, 1, 14);
        let scorer =
            ContextKScorer::random(1, 4, 3, FeatureSource::RandomFixed { seed: 2 }, 8, 1.0);
        let ilm = ilm_zero_encoder(&scorer).unwrap();
        let cfg = DecodeConfig {
            lambda1: 0.7,
            lambda2: 0.3,
            beam_size: 4096,
        };
        let got = recognize(&am, &lm, Some(&ilm), &cfg).unwrap();
        // exhaustive argmax over all label sequences of length <= T
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut stack: Vec<Vec<usize>> = vec![vec![]];
        while let Some(seq) = stack.pop() {
            let mass = numerator_forward(&am, &seq, 1.0).unwrap();
            let mut ilm_total = 0.0;
            for (i, &a) in seq.iter().enumerate() {
                ilm_total += ilm.log_prob(&seq[..i], a);
            }
            let score = mass + cfg.lambda1 * seq_score(&lm, &seq) - cfg.lambda2 * ilm_total;
            if best.as_ref().map_or(true, |(b, _)| score > *b) {
                best = Some((score, seq.clone()));
            }
            if seq.len() < 3 {
                for a in 0..4 {
                    let mut ns = seq.clone();
                    ns.push(a);
                    stack.push(ns);
                }
            }
        }
        let (bscore, bseq) = best.unwrap();
        assert_eq!(got.phonemes, bseq);
        assert!((got.score - bscore).abs() < 1e-9);
    }

    #[test]
    fn recognize_emits_words_at_boundaries() {
        let (ab, lex, plm, wlm) = toy_world();
        let lm = MultiLevelLm {
            phoneme_lm: &plm,
            word_lm: &wlm,
            lexicon: &lex,
            alphabet: &ab,
        };
        let am = PrecomputedScores::random(4, 4, 1, 99);
        let cfg = DecodeConfig {
            lambda1: 1.0,
            lambda2: 0.0,
            beam_size: 256,
        };
        let out = recognize(&am, &lm, None, &cfg).unwrap();
        // word count equals the number of EOW labels in the output
        let eows = out.phonemes.iter().filter(|&&a| ab.is_eow(a)).count();
        assert_eq!(out.words.len(), eows);
        // nonzero lambda2 without an ILM is rejected
        let bad = DecodeConfig {
            lambda2: 0.1,
            ..cfg
        };
        assert!(recognize(&am, &lm, None, &bad).is_err());
    }

    #[test]
    fn wer_breakdown_hand_case() {
        let refs = vec![("u1".to_string(), vec![1usize, 2, 3, 4])];
        let hyps = vec![("u1".to_string(), vec![1usize, 9, 4])];
        let w = score_wer(&refs, &hyps).unwrap();
        assert_eq!((w.sub, w.del, w.ins, w.ref_tokens), (1, 1, 0, 4));
        assert!((w.wer() - 50.0).abs() < 1e-12);
        assert!((w.del_rate() - 25.0).abs() < 1e-12);
    }

    #[test]
    fn wer_requires_matching_ids() {
        let refs = vec![("u1".to_string(), vec![1usize])];
        assert!(score_wer(&refs, &[]).is_err());
        let hyps = vec![
            ("u1".to_string(), vec![1usize]),
            ("u2".to_string(), vec![1usize]),
        ];
        assert!(score_wer(&refs, &hyps).is_err());
    }
}
