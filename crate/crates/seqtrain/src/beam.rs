//! Beam-search denominator approximation (with and without path
//! recombination) and N-best list generation.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::base::{logsumexp, LabelId, Lexicon, PhonemeAlphabet, WordId, LOG_ZERO};
use crate::lattice::{Lattice, LatticeEdge, LatticeState};
use crate::lattice_free::{DenomResult, DpStateDump, SeqScoreConfig};
use crate::lm::{seq_score, MultiLevelLm, SeqLm, KEY_SEP};
use crate::scorer::{numerator_forward, AmScorer};
use crate::{Error, Result};

/// How beam hypotheses are identified. `PruneRecomb` merges alignment paths
/// that agree on the last k labels and the LM merge key (summing their
/// masses); `PruneSingle` keeps every alignment path separate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BeamMode {
    PruneSingle,
    PruneRecomb,
}

struct BHyp<S> {
    ctx: Vec<LabelId>,
    state: S,
    ident: Vec<usize>,
}

struct CandAgg<S> {
    edges: Vec<LatticeEdge>,
    scores: Vec<f64>,
    best_omega: f64,
    best_pri: (u8, usize, Vec<usize>),
    hyp: BHyp<S>,
}

/// Beam-search approximation of the lattice-free denominator: per frame every
/// surviving hypothesis is expanded by blank and all labels, candidates are
/// recombined per `mode`, and the top `beam_size` by accumulated mass
/// survive. On recombination the LM state of the higher-scoring path is kept.
/// The returned lattice supports the backward pass against the pruned sum.
pub fn beam_denominator<L: SeqLm>(
    am: &dyn AmScorer,
    lm: &L,
    cfg: &SeqScoreConfig,
    beam_size: usize,
    mode: BeamMode,
) -> Result<DenomResult> {
    cfg.validate()?;
    if beam_size == 0 {
        return Err(Error::invalid("beam size must be at least 1"));
    }
    let cm = am.context_map();
    let v = am.num_labels();
    let blank = v;
    let t_len = am.num_frames();

    let mut frames: Vec<Vec<LatticeState>> = vec![vec![LatticeState {
        q: 0.0,
        edges: vec![],
    }]];
    let mut hyps: Vec<BHyp<L::State>> = vec![BHyp {
        ctx: vec![],
        state: lm.start(),
        ident: vec![],
    }];
    let mut dumps: Vec<Vec<DpStateDump>> = vec![dump_hyps(lm, &hyps, &frames[0])];

    for t in 1..=t_len {
        let mut cands: HashMap<Vec<usize>, CandAgg<L::State>> = HashMap::new();
        for (i, hyp) in hyps.iter().enumerate() {
            let src_q = frames[t - 1][i].q;
            let ctx_idx = cm.encode(&hyp.ctx);
            let src_key = lm.merge_key(&hyp.state);
            // blank keeps everything
            {
                let omega = src_q + cfg.alpha * am.log_prob(t - 1, ctx_idx, blank);
                let ident = match mode {
                    BeamMode::PruneRecomb => recomb_ident(&hyp.ctx, &src_key),
                    BeamMode::PruneSingle => {
                        let mut p = hyp.ident.clone();
                        p.push(blank);
                        p
                    }
                };
                offer(
                    &mut cands,
                    ident.clone(),
                    LatticeEdge {
                        src: i,
                        ctx: ctx_idx,
                        out: blank,
                        lm_scaled: 0.0,
                    },
                    omega,
                    (0, 0, src_key.clone()),
                    || BHyp {
                        ctx: hyp.ctx.clone(),
                        state: hyp.state.clone(),
                        ident,
                    },
                );
            }
            for a in 0..v {
                let (ns, inc) = lm.step(&hyp.state, a);
                let lm_scaled = cfg.beta * inc;
                let omega = src_q + cfg.alpha * am.log_prob(t - 1, ctx_idx, a) + lm_scaled;
                let nctx = cm.push(&hyp.ctx, a);
                let ident = match mode {
                    BeamMode::PruneRecomb => recomb_ident(&nctx, &lm.merge_key(&ns)),
                    BeamMode::PruneSingle => {
                        let mut p = hyp.ident.clone();
                        p.push(a);
                        p
                    }
                };
                offer(
                    &mut cands,
                    ident.clone(),
                    LatticeEdge {
                        src: i,
                        ctx: ctx_idx,
                        out: a,
                        lm_scaled,
                    },
                    omega,
                    (1, a, src_key.clone()),
                    || BHyp {
                        ctx: nctx,
                        state: ns.clone(),
                        ident,
                    },
                );
            }
        }
        let mut scored: Vec<(f64, CandAgg<L::State>)> = cands
            .into_values()
            .map(|c| (logsumexp(&c.scores), c))
            .collect();
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then_with(|| a.1.hyp.ident.cmp(&b.1.hyp.ident))
        });
        scored.truncate(beam_size);
        let mut states = Vec::with_capacity(scored.len());
        let mut new_hyps = Vec::with_capacity(scored.len());
        for (q, c) in scored {
            states.push(LatticeState { q, edges: c.edges });
            new_hyps.push(c.hyp);
        }
        dumps.push(dump_hyps(lm, &new_hyps, &states));
        frames.push(states);
        hyps = new_hyps;
    }
    let final_extra: Vec<f64> = hyps
        .iter()
        .map(|h| cfg.beta * lm.finalize(&h.state))
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

fn recomb_ident(ctx: &[LabelId], lm_key: &[usize]) -> Vec<usize> {
    let mut id = ctx.to_vec();
    id.push(KEY_SEP);
    id.extend_from_slice(lm_key);
    id
}

fn offer<S>(
    cands: &mut HashMap<Vec<usize>, CandAgg<S>>,
    ident: Vec<usize>,
    edge: LatticeEdge,
    omega: f64,
    pri: (u8, usize, Vec<usize>),
    make_hyp: impl FnOnce() -> BHyp<S>,
) {
    match cands.entry(ident) {
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(CandAgg {
                edges: vec![edge],
                scores: vec![omega],
                best_omega: omega,
                best_pri: pri,
                hyp: make_hyp(),
            });
        }
        std::collections::hash_map::Entry::Occupied(mut e) => {
            let c = e.get_mut();
            c.edges.push(edge);
            c.scores.push(omega);
            if omega > c.best_omega || (omega == c.best_omega && pri < c.best_pri) {
                c.best_omega = omega;
                c.best_pri = pri;
                c.hyp = make_hyp();
            }
        }
    }
}

fn dump_hyps<L: SeqLm>(
    lm: &L,
    hyps: &[BHyp<L::State>],
    states: &[LatticeState],
) -> Vec<DpStateDump> {
    hyps.iter()
        .zip(states)
        .map(|(h, s)| DpStateDump {
            context: h.ctx.clone(),
            q: s.q,
            history_key: Some(lm.merge_key(&h.state)),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// N-best lists
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct NBestHyp {
    pub words: Vec<WordId>,
    pub phonemes: Vec<LabelId>,
    pub score: f64,
    pub is_reference: bool,
}

#[derive(Debug, Clone)]
pub struct NBestList {
    pub id: String,
    pub hyps: Vec<NBestHyp>,
}

/// Generates an N-best list by time-synchronous beam search over label
/// sequences (alignment masses are summed per label sequence, so entries are
/// unique by phoneme sequence). Scores are `alpha`-scaled acoustic masses
/// plus `beta`-scaled multi-level LM scores. The reference is always
/// included: if the beam missed it, it replaces the lowest-scoring entry.
#[allow(clippy::too_many_arguments)]
pub fn generate_nbest(
    am: &dyn AmScorer,
    lm: &MultiLevelLm,
    reference_phonemes: &[LabelId],
    reference_words: &[WordId],
    n: usize,
    beam_size: usize,
    alpha: f64,
    beta: f64,
) -> Result<Vec<NBestHyp>> {
    if n == 0 || beam_size == 0 {
        return Err(Error::invalid("n and beam size must be at least 1"));
    }
    let cm = am.context_map();
    let v = am.num_labels();
    let blank = v;
    let t_len = am.num_frames();

    let mut beam: Vec<Seq> = vec![Seq {
        labels: vec![],
        words: vec![],
        state: lm.start(),
        lm_total: 0.0,
        am_mass: 0.0,
    }];
    for t in 0..t_len {
        let mut next: HashMap<Vec<LabelId>, Seq> = HashMap::new();
        for s in &beam {
            let ctx_idx = cm.suffix(&s.labels);
            let bmass = s.am_mass + alpha * am.log_prob(t, ctx_idx, blank);
            merge_mass(&mut next, s, None, bmass, lm);
            for a in 0..v {
                let mass = s.am_mass + alpha * am.log_prob(t, ctx_idx, a);
                merge_mass(&mut next, s, Some(a), mass, lm);
            }
        }
        let mut pool: Vec<Seq> = next.into_values().collect();
        pool.sort_by(|a, b| {
            let sa = a.am_mass + beta * a.lm_total;
            let sb = b.am_mass + beta * b.lm_total;
            sb.partial_cmp(&sa).unwrap().then_with(|| a.labels.cmp(&b.labels))
        });
        pool.truncate(beam_size);
        beam = pool;
    }
    let mut hyps: Vec<NBestHyp> = beam
        .iter()
        .map(|s| NBestHyp {
            words: s.words.clone(),
            phonemes: s.labels.clone(),
            score: s.am_mass + beta * (s.lm_total + lm.finalize(&s.state)),
            is_reference: s.labels == reference_phonemes,
        })
        .collect();
    hyps.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    hyps.truncate(n);
    if !hyps.iter().any(|h| h.is_reference) {
        let score = alpha_ref_score(am, lm, reference_phonemes, alpha, beta)?;
        let r = NBestHyp {
            words: reference_words.to_vec(),
            phonemes: reference_phonemes.to_vec(),
            score,
            is_reference: true,
        };
        if hyps.len() < n {
            hyps.push(r);
        } else {
            *hyps.last_mut().unwrap() = r;
        }
        hyps.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    }
    Ok(hyps)
}

fn alpha_ref_score(
    am: &dyn AmScorer,
    lm: &MultiLevelLm,
    reference: &[LabelId],
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    Ok(numerator_forward(am, reference, alpha)? + beta * seq_score(lm, reference))
}

/// One label-sequence hypothesis in N-best generation: the summed acoustic
/// alignment mass plus the (deterministic per sequence) LM score and state.
struct Seq {
    labels: Vec<LabelId>,
    words: Vec<WordId>,
    state: crate::lm::MultiLevelState,
    lm_total: f64,
    am_mass: f64,
}

fn merge_mass(
    next: &mut HashMap<Vec<LabelId>, Seq>,
    src: &Seq,
    label: Option<LabelId>,
    mass: f64,
    lm: &MultiLevelLm,
) {
    let (labels, words, state, lm_total) = match label {
        None => (
            src.labels.clone(),
            src.words.clone(),
            src.state.clone(),
            src.lm_total,
        ),
        Some(a) => {
            let (ns, inc, word) = lm.step_word(&src.state, a);
            let mut labels = src.labels.clone();
            labels.push(a);
            let mut words = src.words.clone();
            if let Some(w) = word {
                words.push(w);
            }
            (labels, words, ns, src.lm_total + inc)
        }
    };
    match next.entry(labels.clone()) {
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(Seq {
                labels,
                words,
                state,
                lm_total,
                am_mass: mass,
            });
        }
        std::collections::hash_map::Entry::Occupied(mut e) => {
            // same label sequence: LM part is identical, masses add
            e.get_mut().am_mass = crate::base::log_add(e.get_mut().am_mass, mass);
        }
    }
}

// ---------------------------------------------------------------------------
// N-best list IO (JSON lines)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct NBestHypLine {
    words: String,
    phonemes: String,
    score: f64,
    #[serde(default)]
    is_reference: bool,
}

#[derive(Serialize, Deserialize)]
struct NBestLine {
    id: String,
    hyps: Vec<NBestHypLine>,
}

pub fn write_nbest(
    path: impl AsRef<Path>,
    lists: &[NBestList],
    alphabet: &PhonemeAlphabet,
    lexicon: &Lexicon,
) -> Result<()> {
    let mut out = String::new();
    for l in lists {
        let line = NBestLine {
            id: l.id.clone(),
            hyps: l
                .hyps
                .iter()
                .map(|h| NBestHypLine {
                    words: h
                        .words
                        .iter()
                        .map(|&w| lexicon.word_name(w))
                        .collect::<Vec<_>>()
                        .join(" "),
                    phonemes: alphabet.format_labels(&h.phonemes),
                    score: h.score,
                    is_reference: h.is_reference,
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line).unwrap());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_nbest(
    path: impl AsRef<Path>,
    alphabet: &PhonemeAlphabet,
    lexicon: &Lexicon,
) -> Result<Vec<NBestList>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: NBestLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let mut hyps = Vec::with_capacity(rec.hyps.len());
        for h in rec.hyps {
            let phonemes = alphabet.parse_labels(&h.phonemes).map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
            let mut words = Vec::new();
            for w in h.words.split_whitespace() {
                words.push(lexicon.word_id(w).ok_or_else(|| Error::Parse {
                    line: lineno,
                    msg: format!("unknown word `{w}`"),
                })?);
            }
            hyps.push(NBestHyp {
                words,
                phonemes,
                score: h.score,
                is_reference: h.is_reference,
            });
        }
        out.push(NBestList { id: rec.id, hyps });
    }
    Ok(out)
}
