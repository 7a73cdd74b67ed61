//! Shared domain types: phoneme alphabets, lexica, label/alignment sequences,
//! corpora and log-space arithmetic.
//!
//! All probabilities in this crate live in natural-log space end to end.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::{Error, Result};

pub type LabelId = usize;
pub type WordId = usize;

pub const LOG_ZERO: f64 = f64::NEG_INFINITY;

/// Numerically stable log(exp(a) + exp(b)).
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == LOG_ZERO {
        return b;
    }
    if b == LOG_ZERO {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Numerically stable log-sum-exp over a slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(LOG_ZERO, f64::max);
    if m == LOG_ZERO {
        return LOG_ZERO;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// The label inventory V with the distinguished blank and the subset of
/// end-of-word phonemes. Ids are dense 0..|V|-1; blank is id |V|.
#[derive(Debug, Clone)]
pub struct PhonemeAlphabet {
    names: Vec<String>,
    eow: Vec<bool>,
    ids: HashMap<String, LabelId>,
}

impl PhonemeAlphabet {
    /// Builds an alphabet from phoneme names. A trailing `#` marks the
    /// end-of-word variant. Names are deduplicated and kept in the given order.
    pub fn from_names<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut out = PhonemeAlphabet {
            names: Vec::new(),
            eow: Vec::new(),
            ids: HashMap::new(),
        };
        for n in names {
            let n = n.into();
            if n.is_empty() {
                return Err(Error::invalid("empty phoneme name"));
            }
            if !out.ids.contains_key(&n) {
                out.ids.insert(n.clone(), out.names.len());
                out.eow.push(n.ends_with('#'));
                out.names.push(n);
            }
        }
        if out.names.is_empty() {
            return Err(Error::invalid("phoneme alphabet must be non-empty"));
        }
        Ok(out)
    }

    pub fn num_labels(&self) -> usize {
        self.names.len()
    }

    /// Blank id, one past the last label.
    pub fn blank(&self) -> LabelId {
        self.names.len()
    }

    pub fn is_eow(&self, id: LabelId) -> bool {
        self.eow.get(id).copied().unwrap_or(false)
    }

    pub fn eow_labels(&self) -> Vec<LabelId> {
        (0..self.num_labels()).filter(|&i| self.eow[i]).collect()
    }

    pub fn id(&self, name: &str) -> Option<LabelId> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: LabelId) -> &str {
        if id == self.blank() {
            "<b>"
        } else {
            &self.names[id]
        }
    }

    pub fn parse_labels(&self, s: &str) -> Result<Vec<LabelId>> {
        s.split_whitespace()
            .map(|tok| {
                self.id(tok)
                    .ok_or_else(|| Error::invalid(format!("unknown phoneme `{tok}`")))
            })
            .collect()
    }

    pub fn format_labels(&self, labels: &[LabelId]) -> String {
        labels
            .iter()
            .map(|&l| self.name(l))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A blank-free phoneme sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct LabelSequence(pub Vec<LabelId>);

impl LabelSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A frame-synchronous sequence over V plus blank, one symbol per frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentSequence(pub Vec<LabelId>);

/// Removes all blanks from an alignment, keeping order. Repeated adjacent
/// labels are kept: in the strictly monotonic topology each non-blank frame
/// emits one label.
pub fn collapse(y: &AlignmentSequence, blank: LabelId) -> LabelSequence {
    LabelSequence(y.0.iter().cloned().filter(|&s| s != blank).collect())
}

/// Pronunciation-to-word mapping. Every pronunciation key ends in exactly one
/// end-of-word phoneme. Homophones share a key and are stored as a set.
#[derive(Debug, Clone)]
pub struct Lexicon {
    words: Vec<String>,
    word_ids: HashMap<String, WordId>,
    entries: HashMap<Vec<LabelId>, BTreeSet<WordId>>,
    unknown: WordId,
    max_pron_len: usize,
}

pub const UNKNOWN_WORD_NAME: &str = "<unk>";

impl Lexicon {
    pub fn new() -> Self {
        let mut lex = Lexicon {
            words: Vec::new(),
            word_ids: HashMap::new(),
            entries: HashMap::new(),
            unknown: 0,
            max_pron_len: 0,
        };
        lex.unknown = lex.intern_word(UNKNOWN_WORD_NAME);
        lex
    }

    fn intern_word(&mut self, name: &str) -> WordId {
        if let Some(&id) = self.word_ids.get(name) {
            return id;
        }
        let id = self.words.len();
        self.words.push(name.to_string());
        self.word_ids.insert(name.to_string(), id);
        id
    }

    pub fn unknown_word(&self) -> WordId {
        self.unknown
    }

    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn word_id(&self, name: &str) -> Option<WordId> {
        self.word_ids.get(name).copied()
    }

    pub fn word_name(&self, id: WordId) -> &str {
        &self.words[id]
    }

    pub fn max_pron_len(&self) -> usize {
        self.max_pron_len
    }

    pub fn entries(&self) -> &HashMap<Vec<LabelId>, BTreeSet<WordId>> {
        &self.entries
    }

    /// Registers a word with a pronunciation; duplicate pronunciations merge
    /// into a homophone set.
    pub fn add_entry(
        &mut self,
        alphabet: &PhonemeAlphabet,
        word: &str,
        pron: Vec<LabelId>,
    ) -> Result<()> {
        check_pron_shape(alphabet, &pron)?;
        if word == UNKNOWN_WORD_NAME {
            return Err(Error::invalid("the unknown word may not carry a pronunciation"));
        }
        let id = self.intern_word(word);
        self.max_pron_len = self.max_pron_len.max(pron.len());
        self.entries.entry(pron).or_default().insert(id);
        Ok(())
    }

    /// Maps a pronunciation (single trailing EOW phoneme) to its word set;
    /// falls back to the unknown word when absent.
    pub fn map_pronunciation(
        &self,
        alphabet: &PhonemeAlphabet,
        pron: &[LabelId],
    ) -> Result<BTreeSet<WordId>> {
        check_pron_shape(alphabet, pron)?;
        Ok(self
            .entries
            .get(pron)
            .cloned()
            .unwrap_or_else(|| BTreeSet::from([self.unknown])))
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::new()
    }
}

/// A pronunciation must end in exactly one EOW phoneme, which is its last
/// symbol.
pub fn check_pron_shape(alphabet: &PhonemeAlphabet, pron: &[LabelId]) -> Result<()> {
    let Some((&last, body)) = pron.split_last() else {
        return Err(Error::invalid("empty pronunciation"));
    };
    if !alphabet.is_eow(last) {
        return Err(Error::invalid(format!(
            "pronunciation must end in an EOW phoneme, got `{}`",
            alphabet.name(last)
        )));
    }
    for &p in body {
        if alphabet.is_eow(p) {
            return Err(Error::invalid(format!(
                "EOW phoneme `{}` before the end of a pronunciation",
                alphabet.name(p)
            )));
        }
    }
    Ok(())
}

/// One training/eval utterance. `scores` optionally points to a precomputed
/// score tensor file.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub num_frames: usize,
    pub reference_phonemes: LabelSequence,
    pub reference_words: Vec<WordId>,
    pub scores: Option<PathBuf>,
}

/// Loads a lexicon file: one `word<TAB>phoneme ... phoneme#` entry per line.
/// The alphabet is derived from the phonemes seen in the file, in sorted
/// order. An empty file yields an empty lexicon and no alphabet.
pub fn load_lexicon(path: impl AsRef<Path>) -> Result<(Option<PhonemeAlphabet>, Lexicon)> {
    let text = fs::read_to_string(path)?;
    let mut names = BTreeSet::new();
    let mut raw: Vec<(usize, String, Vec<String>)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let Some((word, phones)) = line.split_once('\t') else {
            return Err(Error::Parse {
                line: lineno,
                msg: "expected `word<TAB>phonemes`".into(),
            });
        };
        let toks: Vec<String> = phones.split_whitespace().map(str::to_string).collect();
        if word.is_empty() || toks.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                msg: "empty word or pronunciation".into(),
            });
        }
        for t in &toks {
            names.insert(t.clone());
        }
        raw.push((lineno, word.to_string(), toks));
    }
    if raw.is_empty() {
        return Ok((None, Lexicon::new()));
    }
    let alphabet = PhonemeAlphabet::from_names(names)?;
    let mut lex = Lexicon::new();
    for (lineno, word, toks) in raw {
        let pron: Vec<LabelId> = toks.iter().map(|t| alphabet.id(t).unwrap()).collect();
        lex.add_entry(&alphabet, &word, pron)
            .map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
    }
    Ok((Some(alphabet), lex))
}

#[derive(Deserialize)]
struct CorpusLine {
    id: String,
    num_frames: usize,
    phonemes: String,
    words: String,
    #[serde(default)]
    scores: Option<String>,
}

/// Loads a JSON-lines corpus file. Referenced phonemes and words must resolve
/// against the alphabet and lexicon; S > T utterances load fine and are
/// rejected later by the numerator.
pub fn load_corpus(
    path: impl AsRef<Path>,
    alphabet: &PhonemeAlphabet,
    lexicon: &Lexicon,
) -> Result<Vec<Utterance>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let phonemes = alphabet
            .parse_labels(&rec.phonemes)
            .map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
        let mut words = Vec::new();
        for w in rec.words.split_whitespace() {
            match lexicon.word_id(w) {
                Some(id) => words.push(id),
                None => {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("unknown word `{w}`"),
                    })
                }
            }
        }
        if !words.is_empty() {
            validate_reference(alphabet, lexicon, &phonemes, &words).map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
        }
        out.push(Utterance {
            id: rec.id,
            num_frames: rec.num_frames,
            reference_phonemes: LabelSequence(phonemes),
            reference_words: words,
            scores: rec.scores.map(PathBuf::from),
        });
    }
    Ok(out)
}

/// Checks that the word sequence is consistent with the phoneme sequence under
/// the lexicon (homophones and unknown fallback allowed).
pub fn validate_reference(
    alphabet: &PhonemeAlphabet,
    lexicon: &Lexicon,
    phonemes: &[LabelId],
    words: &[WordId],
) -> Result<()> {
    let segments = split_at_eow(alphabet, phonemes)?;
    if segments.len() != words.len() {
        return Err(Error::invalid(format!(
            "{} pronunciation segments but {} words",
            segments.len(),
            words.len()
        )));
    }
    for (seg, &w) in segments.iter().zip(words) {
        let set = lexicon.map_pronunciation(alphabet, seg)?;
        if !set.contains(&w) {
            return Err(Error::invalid(format!(
                "word `{}` does not match pronunciation `{}`",
                lexicon.word_name(w),
                alphabet.format_labels(seg)
            )));
        }
    }
    Ok(())
}

/// Splits a phoneme sequence into complete pronunciations at EOW phonemes.
/// Errors if a trailing incomplete segment remains.
pub fn split_at_eow<'a>(
    alphabet: &PhonemeAlphabet,
    phonemes: &'a [LabelId],
) -> Result<Vec<&'a [LabelId]>> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, &p) in phonemes.iter().enumerate() {
        if alphabet.is_eow(p) {
            out.push(&phonemes[start..=i]);
            start = i + 1;
        }
    }
    if start != phonemes.len() {
        return Err(Error::invalid("phoneme sequence ends mid-word"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_alphabet() -> PhonemeAlphabet {
        PhonemeAlphabet::from_names(["a", "b", "t#"]).unwrap()
    }

    #[test]
    fn collapse_removes_blanks_keeps_repeats() {
        let ab = toy_alphabet();
        let eps = ab.blank();
        let a = ab.id("a").unwrap();
        let b = ab.id("b").unwrap();
        assert_eq!(
            collapse(&AlignmentSequence(vec![eps, eps, eps]), eps).0,
            Vec::<LabelId>::new()
        );
        assert_eq!(collapse(&AlignmentSequence(vec![a, eps, b]), eps).0, vec![a, b]);
        assert_eq!(collapse(&AlignmentSequence(vec![a, eps, a]), eps).0, vec![a, a]);
    }

    #[test]
    fn collapse_idempotent_and_length_identity() {
        let ab = toy_alphabet();
        let eps = ab.blank();
        let y = AlignmentSequence(vec![0, eps, 1, 1, eps, 2]);
        let c = collapse(&y, eps);
        let again = collapse(&AlignmentSequence(c.0.clone()), eps);
        assert_eq!(c, again);
        let blanks = y.0.iter().filter(|&&s| s == eps).count();
        assert_eq!(c.len() + blanks, y.0.len());
    }

    #[test]
    fn map_pronunciation_lookup_unknown_and_homophones() {
        let ab = toy_alphabet();
        let t = ab.id("t#").unwrap();
        let a = ab.id("a").unwrap();
        let b = ab.id("b").unwrap();
        let mut lex = Lexicon::new();
        lex.add_entry(&ab, "cat", vec![a, t]).unwrap();
        lex.add_entry(&ab, "to", vec![b, t]).unwrap();
        lex.add_entry(&ab, "two", vec![b, t]).unwrap();
        let cat = lex.word_id("cat").unwrap();
        assert_eq!(
            lex.map_pronunciation(&ab, &[a, t]).unwrap(),
            BTreeSet::from([cat])
        );
        // not in the lexicon -> unknown fallback
        assert_eq!(
            lex.map_pronunciation(&ab, &[a, a, t]).unwrap(),
            BTreeSet::from([lex.unknown_word()])
        );
        // homophones -> both ids
        let hom = lex.map_pronunciation(&ab, &[b, t]).unwrap();
        assert_eq!(
            hom,
            BTreeSet::from([lex.word_id("to").unwrap(), lex.word_id("two").unwrap()])
        );
        // shape violations
        assert!(lex.map_pronunciation(&ab, &[a, b]).is_err());
        assert!(lex.map_pronunciation(&ab, &[t, a, t]).is_err());
    }

    #[test]
    fn logsumexp_bounds() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.gen_range(1..12);
            let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let m = xs.iter().cloned().fold(LOG_ZERO, f64::max);
            let l = logsumexp(&xs);
            assert!(l >= m - 1e-12);
            assert!(l <= m + (n as f64).ln() + 1e-12);
        }
        assert_eq!(logsumexp(&[]), LOG_ZERO);
        assert_eq!(log_add(LOG_ZERO, -1.5), -1.5);
    }

    #[test]
    fn lexicon_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lex.txt");
        std::fs::write(&path, "cat\tk ae t#\nto\tt uw#\ntwo\tt uw#\n").unwrap();
        let (ab, lex) = load_lexicon(&path).unwrap();
        let ab = ab.unwrap();
        let pron = ab.parse_labels("k ae t#").unwrap();
        let set = lex.map_pronunciation(&ab, &pron).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(lex.word_name(*set.iter().next().unwrap()), "cat");
        let hom = lex
            .map_pronunciation(&ab, &ab.parse_labels("t uw#").unwrap())
            .unwrap();
        assert_eq!(hom.len(), 2);

        let empty = dir.path().join("empty.txt");
        std::fs::write(&empty, "").unwrap();
        let (ab2, lex2) = load_lexicon(&empty).unwrap();
        assert!(ab2.is_none());
        assert!(lex2.entries().is_empty());
    }

    #[test]
    fn corpus_load_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let lexpath = dir.path().join("lex.txt");
        std::fs::write(&lexpath, "cat\tk ae t#\n").unwrap();
        let (ab, lex) = load_lexicon(&lexpath).unwrap();
        let ab = ab.unwrap();
        let corpus = dir.path().join("corpus.jsonl");
        // S > T loads fine; numerator rejects later.
        std::fs::write(
            &corpus,
            r#"{"id":"u1","num_frames":2,"phonemes":"k ae t#","words":"cat"}"#,
        )
        .unwrap();
        let utts = load_corpus(&corpus, &ab, &lex).unwrap();
        assert_eq!(utts.len(), 1);
        assert_eq!(utts[0].reference_phonemes.len(), 3);
        assert_eq!(utts[0].num_frames, 2);

        std::fs::write(
            &corpus,
            r#"{"id":"u1","num_frames":5,"phonemes":"k ae","words":"cat"}"#,
        )
        .unwrap();
        assert!(load_corpus(&corpus, &ab, &lex).is_err());
    }
}
