//! Language models: count-based n-gram LMs over phonemes and words with
//! interpolated absolute discounting, a stateful full-context interface
//! backed by a variable-order suffix model, word-at-EOW scoring with the
//! homophone max rule, the multi-level LM wrapper, and perplexity.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::base::{LabelId, Lexicon, PhonemeAlphabet, WordId, LOG_ZERO};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmUnit {
    Phoneme,
    Word,
}

/// Count-based n-gram LM with interpolated absolute discounting. Word-unit
/// models predict an explicit end-of-sequence token; both units condition on
/// begin-of-sequence padding. Order 0 means uniform.
#[derive(Debug, Clone)]
pub struct NGramLM {
    unit: LmUnit,
    order: usize,
    vocab_size: usize,
    bos: usize,
    eos: Option<usize>,
    discount: f64,
    /// probs[n-1]: n-gram (context + predicted token) -> natural log prob.
    probs: Vec<HashMap<Vec<usize>, f64>>,
    /// backoffs[len-1]: context of length len -> natural log backoff weight.
    backoffs: Vec<HashMap<Vec<usize>, f64>>,
    unigram_floor: f64,
}

impl NGramLM {
    pub fn unit(&self) -> LmUnit {
        self.unit
    }
    pub fn order(&self) -> usize {
        self.order
    }
    /// Number of predictable tokens (includes the end token for word unit).
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }
    pub fn bos(&self) -> usize {
        self.bos
    }
    pub fn eos(&self) -> Option<usize> {
        self.eos
    }
    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Begin-of-sequence context of length order-1.
    pub fn initial_context(&self) -> Vec<usize> {
        vec![self.bos; self.order.saturating_sub(1)]
    }

    /// Uniform (order-0) model over `num_base` tokens (plus end token for
    /// word unit).
    pub fn uniform(unit: LmUnit, num_base: usize) -> Self {
        let (vocab_size, eos) = vocab_of(unit, num_base);
        NGramLM {
            unit,
            order: 0,
            vocab_size,
            bos: vocab_size,
            eos,
            discount: 0.0,
            probs: vec![],
            backoffs: vec![],
            unigram_floor: LOG_ZERO,
        }
    }

    /// Builds a model directly from full per-context distributions
    /// (natural-log, one entry per predictable token). Contexts must cover
    /// everything that will be queried; there is no backoff.
    pub fn from_context_dists(
        unit: LmUnit,
        order: usize,
        num_base: usize,
        dists: &HashMap<Vec<usize>, Vec<f64>>,
    ) -> Result<Self> {
        let (vocab_size, eos) = vocab_of(unit, num_base);
        if order == 0 {
            return Ok(Self::uniform(unit, num_base));
        }
        let mut probs = vec![HashMap::new(); order];
        for (ctx, dist) in dists {
            if ctx.len() != order - 1 || dist.len() != vocab_size {
                return Err(Error::invalid("bad context or distribution size"));
            }
            let z = crate::base::logsumexp(dist);
            if z.abs() > 1e-9 {
                return Err(Error::invalid("distribution not normalized"));
            }
            for (w, &lp) in dist.iter().enumerate() {
                let mut key = ctx.clone();
                key.push(w);
                probs[order - 1].insert(key, lp);
            }
        }
        Ok(NGramLM {
            unit,
            order,
            vocab_size,
            bos: vocab_size,
            eos,
            discount: 0.0,
            probs,
            backoffs: vec![HashMap::new(); order.saturating_sub(1)],
            unigram_floor: LOG_ZERO,
        })
    }

    /// Random full-table phoneme LM over all begin-padded contexts; test and
    /// oracle fixture.
    pub fn random_full_phoneme(order: usize, num_labels: usize, seed: u64) -> Self {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        if order == 0 {
            return Self::uniform(LmUnit::Phoneme, num_labels);
        }
        let bos = num_labels;
        let mut dists = HashMap::new();
        // contexts: bos^p ++ labels^(order-1-p)
        let mut ctxs: Vec<Vec<usize>> = vec![vec![]];
        for _ in 0..order - 1 {
            let mut next = Vec::new();
            for c in &ctxs {
                if c.iter().all(|&x| x == bos) {
                    let mut e = c.clone();
                    e.push(bos);
                    next.push(e);
                }
                for a in 0..num_labels {
                    let mut e = c.clone();
                    e.push(a);
                    next.push(e);
                }
            }
            ctxs = next;
        }
        // keep only bos-prefix-shaped contexts (bos* labels*)
        ctxs.retain(|c| {
            let first_label = c.iter().position(|&x| x != bos).unwrap_or(c.len());
            c[first_label..].iter().all(|&x| x != bos)
        });
        for c in ctxs {
            let logits: Vec<f64> = (0..num_labels).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let z = crate::base::logsumexp(&logits);
            dists.insert(c, logits.into_iter().map(|x| x - z).collect());
        }
        Self::from_context_dists(LmUnit::Phoneme, order, num_labels, &dists).unwrap()
    }

    /// Log probability of `token` given a context; the context is truncated
    /// to the model order and looked up with standard backoff.
    pub fn log_prob(&self, context: &[usize], token: usize) -> f64 {
        debug_assert!(token < self.vocab_size);
        if self.order == 0 {
            return -(self.vocab_size as f64).ln();
        }
        let start = context.len().saturating_sub(self.order - 1);
        self.lp(&context[start..], token)
    }

    fn lp(&self, h: &[usize], w: usize) -> f64 {
        if h.is_empty() {
            return self
                .probs
                .first()
                .and_then(|m| m.get(&vec![w]).copied())
                .unwrap_or(self.unigram_floor);
        }
        let mut key = h.to_vec();
        key.push(w);
        if let Some(&p) = self.probs[h.len()].get(&key) {
            return p;
        }
        let bow = self.backoffs[h.len() - 1].get(h).copied().unwrap_or(0.0);
        bow + self.lp(&h[1..], w)
    }

    /// Phoneme-unit query with begin-of-sequence padding for short label
    /// histories.
    pub fn log_prob_padded(&self, labels: &[LabelId], token: usize) -> f64 {
        if self.order <= 1 {
            return self.log_prob(&[], token);
        }
        let need = self.order - 1;
        if labels.len() >= need {
            self.log_prob(&labels[labels.len() - need..], token)
        } else {
            let mut ctx = vec![self.bos; need - labels.len()];
            ctx.extend_from_slice(labels);
            self.log_prob(&ctx, token)
        }
    }

    /// Full distribution over predictable tokens for a context.
    pub fn dist(&self, context: &[usize]) -> Vec<f64> {
        (0..self.vocab_size)
            .map(|w| self.log_prob(context, w))
            .collect()
    }

    /// Log probability of a whole token sequence, including begin padding and
    /// (for word unit) the end token.
    pub fn sequence_log_prob(&self, tokens: &[usize]) -> f64 {
        let mut hist = self.initial_context();
        let mut total = 0.0;
        for &w in tokens {
            total += self.log_prob(&hist, w);
            hist.push(w);
        }
        if let Some(eos) = self.eos {
            total += self.log_prob(&hist, eos);
        }
        total
    }
}

fn vocab_of(unit: LmUnit, num_base: usize) -> (usize, Option<usize>) {
    match unit {
        LmUnit::Phoneme => (num_base, None),
        LmUnit::Word => (num_base + 1, Some(num_base)),
    }
}

/// Trains an interpolated absolute-discount n-gram LM. `num_base` is the base
/// vocabulary size (phoneme labels, or words including the unknown token);
/// word-unit models additionally predict an end token. With discount 0 the
/// estimates are raw relative frequencies, which requires every vocabulary
/// symbol to be observed.
pub fn train_ngram(
    seqs: &[Vec<usize>],
    unit: LmUnit,
    order: usize,
    discount: f64,
    num_base: usize,
) -> Result<NGramLM> {
    if !(0.0..=1.0).contains(&discount) {
        return Err(Error::invalid("discount must be in [0, 1]"));
    }
    if order == 0 {
        return Ok(NGramLM::uniform(unit, num_base));
    }
    if seqs.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let (vocab_size, eos) = vocab_of(unit, num_base);
    let bos = vocab_size;
    let mut counts: Vec<HashMap<Vec<usize>, u64>> = vec![HashMap::new(); order];
    for seq in seqs {
        let mut hist = vec![bos; order - 1];
        let mut preds: Vec<usize> = seq.clone();
        if let Some(e) = eos {
            preds.push(e);
        }
        for &w in &preds {
            if w >= vocab_size {
                return Err(Error::invalid(format!("token {w} out of vocabulary")));
            }
            for n in 1..=order {
                let mut key = hist[hist.len() - (n - 1)..].to_vec();
                key.push(w);
                *counts[n - 1].entry(key).or_insert(0) += 1;
            }
            hist.push(w);
        }
    }
    let d = discount;
    // unigram
    let n_total: u64 = counts[0].values().sum();
    let t1 = counts[0].len();
    if d == 0.0 && t1 < vocab_size {
        return Err(Error::invalid(
            "vocabulary symbol unseen in training data; use a nonzero discount",
        ));
    }
    let floor = d * t1 as f64 / vocab_size as f64 / n_total as f64;
    let mut probs: Vec<HashMap<Vec<usize>, f64>> = vec![HashMap::new(); order];
    for (key, &c) in &counts[0] {
        let p = (c as f64 - d).max(0.0) / n_total as f64 + floor;
        probs[0].insert(key.clone(), p.ln());
    }
    let unigram_floor = if floor > 0.0 { floor.ln() } else { LOG_ZERO };
    let backoffs: Vec<HashMap<Vec<usize>, f64>> = vec![HashMap::new(); order - 1];
    let mut lm = NGramLM {
        unit,
        order,
        vocab_size,
        bos,
        eos,
        discount: d,
        probs,
        backoffs,
        unigram_floor,
    };
    for n in 2..=order {
        let mut ctx_count: HashMap<Vec<usize>, (u64, u64)> = HashMap::new(); // (total, distinct)
        for (key, &c) in &counts[n - 1] {
            let e = ctx_count.entry(key[..n - 1].to_vec()).or_insert((0, 0));
            e.0 += c;
            e.1 += 1;
        }
        let mut new_probs = HashMap::new();
        let mut new_bows = HashMap::new();
        for (ctx, &(total, distinct)) in &ctx_count {
            let bow = d * distinct as f64 / total as f64;
            new_bows.insert(
                ctx.clone(),
                if bow > 0.0 { bow.ln() } else { LOG_ZERO },
            );
        }
        for (key, &c) in &counts[n - 1] {
            let (total, distinct) = ctx_count[&key[..n - 1]];
            let bow = d * distinct as f64 / total as f64;
            let lower = lm.lp(&key[1..n - 1], key[n - 1]).exp();
            let p = (c as f64 - d).max(0.0) / total as f64 + bow * lower;
            new_probs.insert(key.clone(), p.ln());
        }
        lm.probs[n - 1] = new_probs;
        lm.backoffs[n - 2] = new_bows;
    }
    Ok(lm)
}

/// exp(-(1/N) * sum log P) over held-out sequences; N counts predicted tokens
/// (including the end token for word-unit models).
pub fn perplexity(lm: &NGramLM, seqs: &[Vec<usize>]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for seq in seqs {
        let mut hist = lm.initial_context();
        let mut preds: Vec<usize> = seq.clone();
        if let Some(e) = lm.eos() {
            preds.push(e);
        }
        for &w in &preds {
            total += lm.log_prob(&hist, w);
            hist.push(w);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("empty held-out set"));
    }
    Ok((-total / n as f64).exp())
}

// ---------------------------------------------------------------------------
// ARPA serialization
// ---------------------------------------------------------------------------

const LN10: f64 = std::f64::consts::LN_10;
const ARPA_LOG0: f64 = -99.0;

fn to_log10(ln: f64) -> f64 {
    if ln == LOG_ZERO {
        ARPA_LOG0
    } else {
        ln / LN10
    }
}

/// Writes the model as ARPA text (base-10 logs in the file). `names` maps
/// every predictable token id to its symbol; begin-of-sequence is written as
/// `<s>`.
pub fn write_arpa(lm: &NGramLM, path: impl AsRef<Path>, names: &[String]) -> Result<()> {
    if lm.order == 0 {
        return Err(Error::invalid("order-0 models have no ARPA form"));
    }
    if names.len() != lm.vocab_size {
        return Err(Error::invalid("symbol table size mismatch"));
    }
    let name_of = |id: usize| -> &str {
        if id == lm.bos {
            "<s>"
        } else {
            &names[id]
        }
    };
    let mut out = String::from("\\data\\\n");
    let mut section_lines: Vec<Vec<String>> = Vec::new();
    for n in 1..=lm.order {
        let mut lines = Vec::new();
        if n == 1 {
            for w in 0..lm.vocab_size {
                let p = to_log10(lm.lp(&[], w));
                let bow = lm
                    .backoffs
                    .first()
                    .and_then(|m| m.get(&vec![w]))
                    .map(|&b| to_log10(b));
                lines.push(match bow {
                    Some(b) => format!("{p:.10}\t{}\t{b:.10}", name_of(w)),
                    None => format!("{p:.10}\t{}", name_of(w)),
                });
            }
            // begin token: context only
            let bow = lm
                .backoffs
                .first()
                .and_then(|m| m.get(&vec![lm.bos]))
                .map(|&b| to_log10(b));
            lines.push(match bow {
                Some(b) => format!("{ARPA_LOG0:.10}\t<s>\t{b:.10}"),
                None => format!("{ARPA_LOG0:.10}\t<s>"),
            });
        } else {
            let mut keys: Vec<&Vec<usize>> = lm.probs[n - 1].keys().collect();
            keys.sort();
            for key in keys {
                let p = to_log10(lm.probs[n - 1][key]);
                let gram: Vec<&str> = key.iter().map(|&id| name_of(id)).collect();
                let bow = if n < lm.order {
                    lm.backoffs[n - 1].get(key).map(|&b| to_log10(b))
                } else {
                    None
                };
                lines.push(match bow {
                    Some(b) => format!("{p:.10}\t{}\t{b:.10}", gram.join(" ")),
                    None => format!("{p:.10}\t{}", gram.join(" ")),
                });
            }
        }
        out.push_str(&format!("ngram {n}={}\n", lines.len()));
        section_lines.push(lines);
    }
    for (n, lines) in section_lines.into_iter().enumerate() {
        out.push_str(&format!("\n\\{}-grams:\n", n + 1));
        for l in lines {
            out.push_str(&l);
            out.push('\n');
        }
    }
    out.push_str("\n\\end\\\n");
    fs::write(path, out)?;
    Ok(())
}

/// Reads an ARPA file back. `names` must list the predictable token ids in
/// order (for word-unit models the last entry is `</s>`); `<s>` maps to the
/// begin id automatically.
pub fn read_arpa(path: impl AsRef<Path>, unit: LmUnit, names: &[String]) -> Result<NGramLM> {
    let text = fs::read_to_string(path)?;
    let vocab_size = names.len();
    let bos = vocab_size;
    let eos = match unit {
        LmUnit::Word => Some(vocab_size - 1),
        LmUnit::Phoneme => None,
    };
    let mut ids: HashMap<&str, usize> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    ids.insert("<s>", bos);
    let mut order = 0usize;
    let mut probs: Vec<HashMap<Vec<usize>, f64>> = Vec::new();
    let mut backoffs: Vec<HashMap<Vec<usize>, f64>> = Vec::new();
    let mut current: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.trim();
        if line.is_empty() || line == "\\data\\" || line == "\\end\\" {
            continue;
        }
        if let Some(rest) = line.strip_prefix("ngram ") {
            let n: usize = rest
                .split('=')
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or(Error::Parse {
                    line: lineno,
                    msg: "bad ngram count line".into(),
                })?;
            order = order.max(n);
            continue;
        }
        if line.starts_with('\\') && line.ends_with("-grams:") {
            let n: usize = line[1..line.len() - 7].parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: "bad section header".into(),
            })?;
            while probs.len() < n {
                probs.push(HashMap::new());
            }
            while backoffs.len() + 1 < n.max(1) {
                backoffs.push(HashMap::new());
            }
            current = Some(n);
            continue;
        }
        let n = current.ok_or(Error::Parse {
            line: lineno,
            msg: "entry outside a section".into(),
        })?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 {
            return Err(Error::Parse {
                line: lineno,
                msg: "expected `logprob<TAB>ngram[<TAB>backoff]`".into(),
            });
        }
        let p10: f64 = fields[0].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: "bad log prob".into(),
        })?;
        let gram: Result<Vec<usize>> = fields[1]
            .split_whitespace()
            .map(|tok| {
                ids.get(tok).copied().ok_or(Error::Parse {
                    line: lineno,
                    msg: format!("unknown symbol `{tok}`"),
                })
            })
            .collect();
        let gram = gram?;
        if gram.len() != n {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected a {n}-gram"),
            });
        }
        if !(gram.len() == 1 && gram[0] == bos) {
            probs[n - 1].insert(gram.clone(), p10 * LN10);
        }
        if fields.len() >= 3 {
            let b10: f64 = fields[2].parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: "bad backoff".into(),
            })?;
            while backoffs.len() < n {
                backoffs.push(HashMap::new());
            }
            backoffs[n - 1].insert(gram, b10 * LN10);
        }
    }
    if order == 0 {
        return Err(Error::invalid("ARPA file declares no n-gram orders"));
    }
    while probs.len() < order {
        probs.push(HashMap::new());
    }
    while backoffs.len() < order.saturating_sub(1) {
        backoffs.push(HashMap::new());
    }
    backoffs.truncate(order.saturating_sub(1));
    Ok(NGramLM {
        unit,
        order,
        vocab_size,
        bos,
        eos,
        discount: 0.0,
        probs,
        backoffs,
        unigram_floor: LOG_ZERO,
    })
}

// ---------------------------------------------------------------------------
// Sequence-scoring LM interface
// ---------------------------------------------------------------------------

/// Separator used inside merge keys.
pub const KEY_SEP: usize = usize::MAX;

/// Stateful sequence-level LM scoring: one label at a time, an opaque
/// per-hypothesis state, and an optional end-of-utterance adjustment.
/// `merge_key` identifies states that may be recombined.
pub trait SeqLm {
    type State: Clone;
    fn start(&self) -> Self::State;
    /// Advances the state by one label and returns the log-score increment.
    fn step(&self, state: &Self::State, label: LabelId) -> (Self::State, f64);
    fn finalize(&self, _state: &Self::State) -> f64 {
        0.0
    }
    fn merge_key(&self, state: &Self::State) -> Vec<usize>;
}

/// Total LM score of a label sequence from the start state, including the
/// finalization term.
pub fn seq_score<L: SeqLm>(lm: &L, labels: &[LabelId]) -> f64 {
    let mut st = lm.start();
    let mut total = 0.0;
    for &a in labels {
        let (ns, inc) = lm.step(&st, a);
        total += inc;
        st = ns;
    }
    total + lm.finalize(&st)
}

/// An n-gram phoneme LM behind the stateful interface.
#[derive(Clone, Copy)]
pub struct NGramSeqLm<'a> {
    pub lm: &'a NGramLM,
}

impl SeqLm for NGramSeqLm<'_> {
    type State = Vec<usize>;
    fn start(&self) -> Vec<usize> {
        self.lm.initial_context()
    }
    fn step(&self, state: &Vec<usize>, label: LabelId) -> (Vec<usize>, f64) {
        let lp = self.lm.log_prob(state, label);
        let mut ns = state.clone();
        ns.push(label);
        let keep = self.lm.order().saturating_sub(1);
        if ns.len() > keep {
            ns.drain(..ns.len() - keep);
        }
        (ns, lp)
    }
    fn merge_key(&self, state: &Vec<usize>) -> Vec<usize> {
        state.clone()
    }
}

/// Count-based variable-order suffix model: an n-gram whose order covers the
/// longest training sequence, queried with the full unbounded history. Stands
/// in for a recurrent full-context LM.
#[derive(Debug, Clone)]
pub struct SuffixLm {
    inner: NGramLM,
}

impl SuffixLm {
    pub fn train(seqs: &[Vec<usize>], num_labels: usize, discount: f64) -> Result<Self> {
        let order = seqs.iter().map(Vec::len).max().unwrap_or(0) + 1;
        Ok(SuffixLm {
            inner: train_ngram(seqs, LmUnit::Phoneme, order, discount, num_labels)?,
        })
    }

    pub fn inner(&self) -> &NGramLM {
        &self.inner
    }
}

#[derive(Clone, Copy)]
pub struct SuffixSeqLm<'a> {
    pub lm: &'a SuffixLm,
}

impl SeqLm for SuffixSeqLm<'_> {
    type State = Vec<usize>;
    fn start(&self) -> Vec<usize> {
        self.lm.inner.initial_context()
    }
    fn step(&self, state: &Vec<usize>, label: LabelId) -> (Vec<usize>, f64) {
        let lp = self.lm.inner.log_prob(state, label);
        let mut ns = state.clone();
        ns.push(label);
        (ns, lp)
    }
    fn merge_key(&self, state: &Vec<usize>) -> Vec<usize> {
        state.clone()
    }
}

/// Max over the homophone set of the word LM score given the word history;
/// out-of-lexicon pronunciations score as the unknown token. Returns the
/// chosen word alongside the score.
pub fn word_score_and_choice(
    word_lm: &NGramLM,
    lexicon: &Lexicon,
    alphabet: &PhonemeAlphabet,
    word_history: &[usize],
    within_word: &[LabelId],
    eow_label: LabelId,
) -> Result<(f64, WordId)> {
    let mut pron = within_word.to_vec();
    pron.push(eow_label);
    let words = lexicon.map_pronunciation(alphabet, &pron)?;
    let mut best: Option<(f64, WordId)> = None;
    for &w in &words {
        let lp = word_lm.log_prob(word_history, w);
        if best.map_or(true, |(b, _)| lp > b) {
            best = Some((lp, w));
        }
    }
    Ok(best.unwrap())
}

/// The score half of [`word_score_and_choice`].
pub fn word_score_at_eow(
    word_lm: &NGramLM,
    lexicon: &Lexicon,
    alphabet: &PhonemeAlphabet,
    word_history: &[usize],
    within_word: &[LabelId],
    eow_label: LabelId,
) -> Result<f64> {
    word_score_and_choice(word_lm, lexicon, alphabet, word_history, within_word, eow_label)
        .map(|(s, _)| s)
}

fn truncate_hist(hist: &mut Vec<usize>, order: usize) {
    let keep = order.saturating_sub(1);
    if hist.len() > keep {
        hist.drain(..hist.len() - keep);
    }
}

/// Word-level LM applied only at EOW phonemes (score 1 elsewhere), with the
/// within-word suffix tracked so the pronunciation can be mapped at the
/// boundary. Within-word suffixes longer than the longest lexicon
/// pronunciation score as unknown.
#[derive(Clone, Copy)]
pub struct WordBoundaryLm<'a> {
    pub word_lm: &'a NGramLM,
    pub lexicon: &'a Lexicon,
    pub alphabet: &'a PhonemeAlphabet,
}

#[derive(Debug, Clone)]
pub struct WordBoundaryState {
    hist: Vec<usize>,
    within: Vec<LabelId>,
    overflow: bool,
}

impl WordBoundaryLm<'_> {
    fn word_cap(&self) -> usize {
        self.lexicon.max_pron_len().saturating_sub(1)
    }
}

impl SeqLm for WordBoundaryLm<'_> {
    type State = WordBoundaryState;

    fn start(&self) -> WordBoundaryState {
        WordBoundaryState {
            hist: self.word_lm.initial_context(),
            within: vec![],
            overflow: false,
        }
    }

    fn step(&self, st: &WordBoundaryState, label: LabelId) -> (WordBoundaryState, f64) {
        let mut ns = st.clone();
        if !self.alphabet.is_eow(label) {
            if ns.within.len() >= self.word_cap() {
                ns.overflow = true;
            } else {
                ns.within.push(label);
            }
            return (ns, 0.0);
        }
        let (score, word) = if st.overflow {
            let unk = self.lexicon.unknown_word();
            (self.word_lm.log_prob(&st.hist, unk), unk)
        } else {
            word_score_and_choice(
                self.word_lm,
                self.lexicon,
                self.alphabet,
                &st.hist,
                &st.within,
                label,
            )
            .expect("within-word suffix is EOW-free by construction")
        };
        ns.hist.push(word);
        truncate_hist(&mut ns.hist, self.word_lm.order());
        ns.within.clear();
        ns.overflow = false;
        (ns, score)
    }

    fn merge_key(&self, st: &WordBoundaryState) -> Vec<usize> {
        let mut k = st.hist.clone();
        k.push(KEY_SEP);
        k.extend_from_slice(&st.within);
        k.push(KEY_SEP);
        k.push(st.overflow as usize);
        k
    }
}

/// Multi-level LM: a phoneme-level LM guides within-word scoring; at each EOW
/// emission the accumulated within-word phoneme score is revoked and replaced
/// by the word-level LM score (homophone max, unknown fallback).
#[derive(Clone, Copy)]
pub struct MultiLevelLm<'a> {
    pub phoneme_lm: &'a NGramLM,
    pub word_lm: &'a NGramLM,
    pub lexicon: &'a Lexicon,
    pub alphabet: &'a PhonemeAlphabet,
}

#[derive(Debug, Clone)]
pub struct MultiLevelState {
    hist: Vec<usize>,
    phone_ctx: Vec<usize>,
    within: Vec<LabelId>,
    within_score: f64,
    overflow: bool,
}

impl MultiLevelLm<'_> {
    fn word_cap(&self) -> usize {
        self.lexicon.max_pron_len().saturating_sub(1)
    }

    /// As [`SeqLm::step`] but also reports the word emitted at an EOW label.
    pub fn step_word(
        &self,
        st: &MultiLevelState,
        label: LabelId,
    ) -> (MultiLevelState, f64, Option<WordId>) {
        let p = self.phoneme_lm.log_prob(&st.phone_ctx, label);
        let mut ns = st.clone();
        ns.phone_ctx.push(label);
        truncate_hist(&mut ns.phone_ctx, self.phoneme_lm.order());
        if !self.alphabet.is_eow(label) {
            if ns.within.len() >= self.word_cap() {
                ns.overflow = true;
            } else {
                ns.within.push(label);
            }
            ns.within_score += p;
            return (ns, p, None);
        }
        let (wscore, word) = if st.overflow {
            let unk = self.lexicon.unknown_word();
            (self.word_lm.log_prob(&st.hist, unk), unk)
        } else {
            word_score_and_choice(
                self.word_lm,
                self.lexicon,
                self.alphabet,
                &st.hist,
                &st.within,
                label,
            )
            .expect("within-word suffix is EOW-free by construction")
        };
        let inc = wscore - st.within_score;
        ns.hist.push(word);
        truncate_hist(&mut ns.hist, self.word_lm.order());
        ns.within.clear();
        ns.within_score = 0.0;
        ns.overflow = false;
        (ns, inc, Some(word))
    }
}

impl SeqLm for MultiLevelLm<'_> {
    type State = MultiLevelState;

    fn start(&self) -> MultiLevelState {
        MultiLevelState {
            hist: self.word_lm.initial_context(),
            phone_ctx: self.phoneme_lm.initial_context(),
            within: vec![],
            within_score: 0.0,
            overflow: false,
        }
    }

    fn step(&self, st: &MultiLevelState, label: LabelId) -> (MultiLevelState, f64) {
        let (ns, inc, _) = self.step_word(st, label);
        (ns, inc)
    }

    /// Incomplete within-word suffixes contribute no LM score at utterance
    /// end: the accumulated phoneme score is revoked.
    fn finalize(&self, st: &MultiLevelState) -> f64 {
        -st.within_score
    }

    fn merge_key(&self, st: &MultiLevelState) -> Vec<usize> {
        let mut k = st.within.clone();
        k.push(KEY_SEP);
        k.extend_from_slice(&st.phone_ctx);
        k.push(KEY_SEP);
        k.push(st.overflow as usize);
        k
    }
}

/// Concrete dispatch over the sequence-LM implementations, for call sites
/// that pick the LM at runtime.
#[derive(Clone, Copy)]
pub enum AnySeqLm<'a> {
    NGram(NGramSeqLm<'a>),
    Suffix(SuffixSeqLm<'a>),
    WordBoundary(WordBoundaryLm<'a>),
    MultiLevel(MultiLevelLm<'a>),
}

#[derive(Debug, Clone)]
pub enum AnyLmState {
    Tokens(Vec<usize>),
    WordBoundary(WordBoundaryState),
    MultiLevel(MultiLevelState),
}

impl SeqLm for AnySeqLm<'_> {
    type State = AnyLmState;

    fn start(&self) -> AnyLmState {
        match self {
            AnySeqLm::NGram(l) => AnyLmState::Tokens(l.start()),
            AnySeqLm::Suffix(l) => AnyLmState::Tokens(l.start()),
            AnySeqLm::WordBoundary(l) => AnyLmState::WordBoundary(l.start()),
            AnySeqLm::MultiLevel(l) => AnyLmState::MultiLevel(l.start()),
        }
    }

    fn step(&self, state: &AnyLmState, label: LabelId) -> (AnyLmState, f64) {
        match (self, state) {
            (AnySeqLm::NGram(l), AnyLmState::Tokens(s)) => {
                let (ns, p) = l.step(s, label);
                (AnyLmState::Tokens(ns), p)
            }
            (AnySeqLm::Suffix(l), AnyLmState::Tokens(s)) => {
                let (ns, p) = l.step(s, label);
                (AnyLmState::Tokens(ns), p)
            }
            (AnySeqLm::WordBoundary(l), AnyLmState::WordBoundary(s)) => {
                let (ns, p) = l.step(s, label);
                (AnyLmState::WordBoundary(ns), p)
            }
            (AnySeqLm::MultiLevel(l), AnyLmState::MultiLevel(s)) => {
                let (ns, p) = l.step(s, label);
                (AnyLmState::MultiLevel(ns), p)
            }
            _ => unreachable!("state kind mismatch"),
        }
    }

    fn finalize(&self, state: &AnyLmState) -> f64 {
        match (self, state) {
            (AnySeqLm::MultiLevel(l), AnyLmState::MultiLevel(s)) => l.finalize(s),
            _ => 0.0,
        }
    }

    fn merge_key(&self, state: &AnyLmState) -> Vec<usize> {
        match (self, state) {
            (AnySeqLm::NGram(l), AnyLmState::Tokens(s)) => l.merge_key(s),
            (AnySeqLm::Suffix(l), AnyLmState::Tokens(s)) => l.merge_key(s),
            (AnySeqLm::WordBoundary(l), AnyLmState::WordBoundary(s)) => l.merge_key(s),
            (AnySeqLm::MultiLevel(l), AnyLmState::MultiLevel(s)) => l.merge_key(s),
            _ => unreachable!("state kind mismatch"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base::logsumexp;

    #[test]
    fn order0_is_uniform() {
        let lm = NGramLM::uniform(LmUnit::Phoneme, 79);
        assert!((lm.log_prob(&[], 3) + 79f64.ln()).abs() < 1e-12);
        let ppl = perplexity(&lm, &[vec![0, 1, 2]]).unwrap();
        assert!((ppl - 79.0).abs() < 1e-9);
    }

    #[test]
    fn order1_relative_frequency() {
        // corpus "a a b": P(a)=2/3, P(b)=1/3 with no smoothing
        let lm = train_ngram(&[vec![0, 0, 1]], LmUnit::Phoneme, 1, 0.0, 2).unwrap();
        assert!((lm.log_prob(&[], 0) - (2f64 / 3.0).ln()).abs() < 1e-12);
        assert!((lm.log_prob(&[], 1) - (1f64 / 3.0).ln()).abs() < 1e-12);
        // unseen symbol with zero discount is an error
        let err = train_ngram(&[vec![0, 0]], LmUnit::Phoneme, 1, 0.0, 2);
        assert!(err.is_err());
    }

    #[test]
    fn order2_hand_counted_discounting() {
        // sequences [a b], [a b], [a a] with d = 0.5
        let seqs = vec![vec![0, 1], vec![0, 1], vec![0, 0]];
        let lm = train_ngram(&seqs, LmUnit::Phoneme, 2, 0.5, 2).unwrap();
        // unigrams: N=6, c(a)=4, c(b)=2, T1=2
        assert!((lm.log_prob(&[], 0).exp() - 2.0 / 3.0).abs() < 1e-12);
        assert!((lm.log_prob(&[], 1).exp() - 1.0 / 3.0).abs() < 1e-12);
        // bos context: c=3, all a
        let bos = lm.bos();
        assert!((lm.log_prob(&[bos], 0).exp() - (2.5 / 3.0 + (1.0 / 6.0) * (2.0 / 3.0))).abs() < 1e-12);
        assert!((lm.log_prob(&[bos], 1).exp() - (1.0 / 6.0) * (1.0 / 3.0)).abs() < 1e-12);
        // context a: c=3, n1+=2, bow=1/3
        assert!((lm.log_prob(&[0], 1).exp() - (1.5 / 3.0 + (1.0 / 3.0) * (1.0 / 3.0))).abs() < 1e-12);
        assert!((lm.log_prob(&[0], 0).exp() - (0.5 / 3.0 + (1.0 / 3.0) * (2.0 / 3.0))).abs() < 1e-12);
    }

    #[test]
    fn distributions_normalize_and_truncate() {
        let seqs = vec![vec![0, 1, 2, 0], vec![2, 2, 1], vec![0, 1]];
        let lm = train_ngram(&seqs, LmUnit::Phoneme, 3, 0.5, 3).unwrap();
        for ctx in [vec![], vec![0], vec![1, 2], vec![lm.bos(), 0], vec![2, 2]] {
            let d = lm.dist(&ctx);
            assert!(logsumexp(&d).abs() < 1e-9, "ctx {ctx:?}");
        }
        // truncation: contexts agreeing on the last n-1 tokens match
        let a = lm.dist(&[0, 1, 2]);
        let b = lm.dist(&[2, 0, 1, 2]);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn forced_sequence_has_ppl_one() {
        // deterministic chain via full-table model
        let mut dists = HashMap::new();
        let bos = 2usize;
        dists.insert(vec![bos], vec![0.0, LOG_ZERO]);
        dists.insert(vec![0], vec![LOG_ZERO, 0.0]);
        dists.insert(vec![1], vec![0.0, LOG_ZERO]);
        let lm = NGramLM::from_context_dists(LmUnit::Phoneme, 2, 2, &dists).unwrap();
        let ppl = perplexity(&lm, &[vec![0, 1, 0]]).unwrap();
        assert!((ppl - 1.0).abs() < 1e-12);
    }

    #[test]
    fn toy_bigram_ppl_hand_check() {
        let seqs = vec![vec![0, 1], vec![0, 1], vec![0, 0]];
        let lm = train_ngram(&seqs, LmUnit::Phoneme, 2, 0.5, 2).unwrap();
        let held = vec![vec![0, 1]];
        let bos = lm.bos();
        let lp = lm.log_prob(&[bos], 0) + lm.log_prob(&[0], 1);
        let want = (-lp / 2.0).exp();
        let got = perplexity(&lm, &held).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn word_lm_uses_eos() {
        // vocab: 2 words -> eos id 2, vocab_size 3
        let lm = train_ngram(&[vec![0, 1], vec![0]], LmUnit::Word, 2, 0.5, 2).unwrap();
        assert_eq!(lm.eos(), Some(2));
        let d = lm.dist(&[1]);
        assert!(logsumexp(&d).abs() < 1e-9);
        assert!(perplexity(&lm, &[vec![0, 1]]).unwrap() > 0.0);
    }

    fn toy_word_setup() -> (PhonemeAlphabet, Lexicon) {
        let ab = PhonemeAlphabet::from_names(["p", "q", "p#", "q#"]).unwrap();
        let mut lex = Lexicon::new();
        let p = ab.id("p").unwrap();
        let q = ab.id("q").unwrap();
        let pe = ab.id("p#").unwrap();
        let qe = ab.id("q#").unwrap();
        lex.add_entry(&ab, "one", vec![p, pe]).unwrap();
        lex.add_entry(&ab, "two", vec![p, q, qe]).unwrap();
        lex.add_entry(&ab, "too", vec![p, q, qe]).unwrap();
        lex.add_entry(&ab, "go", vec![qe]).unwrap();
        (ab, lex)
    }

    #[test]
    fn word_score_homophone_max_and_unknown() {
        let (ab, lex) = toy_word_setup();
        let seqs = vec![
            vec![lex.word_id("one").unwrap(), lex.word_id("two").unwrap()],
            vec![lex.word_id("one").unwrap(), lex.word_id("too").unwrap()],
            vec![lex.word_id("one").unwrap(), lex.word_id("too").unwrap()],
        ];
        let wlm = train_ngram(&seqs, LmUnit::Word, 1, 0.5, lex.num_words()).unwrap();
        let p = ab.id("p").unwrap();
        let q = ab.id("q").unwrap();
        let qe = ab.id("q#").unwrap();
        let (score, word) = word_score_and_choice(&wlm, &lex, &ab, &[], &[p, q], qe).unwrap();
        // "too" seen twice, "two" once -> max picks "too"
        assert_eq!(word, lex.word_id("too").unwrap());
        assert!((score - wlm.log_prob(&[], lex.word_id("too").unwrap())).abs() < 1e-12);
        // out-of-lexicon pronunciation -> unknown token probability
        let (score, word) = word_score_and_choice(&wlm, &lex, &ab, &[], &[q, q], qe).unwrap();
        assert_eq!(word, lex.unknown_word());
        assert!((score - wlm.log_prob(&[], lex.unknown_word())).abs() < 1e-12);
    }

    #[test]
    fn multilevel_within_word_scores_cancel() {
        let (ab, lex) = toy_word_setup();
        let one = lex.word_id("one").unwrap();
        let two = lex.word_id("two").unwrap();
        let wlm = train_ngram(
            &[vec![one, two], vec![one, one]],
            LmUnit::Word,
            2,
            0.5,
            lex.num_words(),
        )
        .unwrap();
        let plm = train_ngram(
            &[vec![0, 2], vec![0, 1, 3]],
            LmUnit::Phoneme,
            2,
            0.5,
            ab.num_labels(),
        )
        .unwrap();
        let mlm = MultiLevelLm {
            phoneme_lm: &plm,
            word_lm: &wlm,
            lexicon: &lex,
            alphabet: &ab,
        };
        let p = ab.id("p").unwrap();
        let q = ab.id("q").unwrap();
        let pe = ab.id("p#").unwrap();
        let qe = ab.id("q#").unwrap();
        // "one two" as phonemes: p p# p q q#
        let labels = [p, pe, p, q, qe];
        let total = seq_score(&mlm, &labels);
        let want = wlm.log_prob(&wlm.initial_context(), one) + wlm.log_prob(&[one], two);
        assert!((total - want).abs() < 1e-9, "{total} vs {want}");
        // mid-word state: within-word bigram terms present
        let st = mlm.start();
        let (st, inc1) = mlm.step(&st, p);
        assert!((inc1 - plm.log_prob(&[plm.bos()], p)).abs() < 1e-12);
        let (st, inc2) = mlm.step(&st, q);
        assert!((inc2 - plm.log_prob(&[p], q)).abs() < 1e-12);
        // finalize revokes the accumulated within-word score
        assert!((mlm.finalize(&st) + inc1 + inc2).abs() < 1e-12);
    }

    #[test]
    fn arpa_roundtrip() {
        let seqs = vec![vec![0, 1, 2], vec![0, 2, 2], vec![1, 0]];
        let lm = train_ngram(&seqs, LmUnit::Phoneme, 3, 0.5, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.arpa");
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        write_arpa(&lm, &path, &names).unwrap();
        let rl = read_arpa(&path, LmUnit::Phoneme, &names).unwrap();
        assert_eq!(rl.order(), 3);
        for ctx in [vec![], vec![0], vec![lm.bos(), 1], vec![2, 2], vec![0, 1]] {
            for w in 0..3 {
                let a = lm.log_prob(&ctx, w);
                let b = rl.log_prob(&ctx, w);
                assert!((a - b).abs() < 1e-8, "ctx {ctx:?} w {w}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn suffix_lm_uses_long_context() {
        let seqs = vec![vec![0, 1, 0, 2], vec![0, 1, 0, 0]];
        let lm = SuffixLm::train(&seqs, 3, 0.5).unwrap();
        let s = SuffixSeqLm { lm: &lm };
        // after 0 1 0 the model prefers continuations seen after that suffix
        let mut st = s.start();
        for &a in &[0usize, 1, 0] {
            st = s.step(&st, a).0;
        }
        let p2 = s.step(&st, 2).1;
        let p1 = s.step(&st, 1).1;
        assert!(p2 > p1);
    }
}
