//! Command-line entry points: LM training and perplexity, sequence
//! discriminative training, N-best generation, fused decoding, WER scoring,
//! and brute-force oracle verification.
//!
//! Exit codes: 0 success, 1 oracle-check failure, 2 validation error,
//! 3 training divergence.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use seqtrain::base::{load_corpus, load_lexicon, Lexicon, PhonemeAlphabet, Utterance};
use seqtrain::beam::{beam_denominator, generate_nbest, read_nbest, write_nbest, BeamMode, NBestList};
use seqtrain::decode::{ilm_zero_encoder, recognize, score_wer, DecodeConfig, WerBreakdown};
use seqtrain::lattice_free::{
    brute_force_denominator, lf_denominator_approx, lf_denominator_limited, SeqScoreConfig,
};
use seqtrain::lm::{
    perplexity, read_arpa, train_ngram, write_arpa, AnySeqLm, LmUnit, MultiLevelLm, NGramLM,
    NGramSeqLm,
};
use seqtrain::losses::{
    ce_loss, mbr_nbest_loss, mmi_lf_loss, mmi_nbest_loss, CostKind, DenomBackend, LossValue,
    TrainingLm,
};
use seqtrain::scorer::{ContextKScorer, FeatureSource, PrecomputedScores, ScorerGrad};
use seqtrain::{Error, Result};

#[derive(Parser)]
#[command(name = "seqtrain", about = "Sequence discriminative training for phoneme transducers")]
struct Cli {
    /// Utterance-level parallelism (0 = all cores). Results are independent
    /// of this setting.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a count-based n-gram LM and write it as ARPA.
    TrainLm(TrainLmArgs),
    /// Perplexity of an LM on a held-out corpus.
    Ppl(PplArgs),
    /// Sequence training with gradient descent.
    TrainSeq(TrainSeqArgs),
    /// Generate N-best lists (reference always included).
    Nbest(NbestArgs),
    /// LM-fused beam recognition.
    Decode(DecodeArgs),
    /// WER with Sub/Del/Ins breakdown.
    Score(ScoreArgs),
    /// Brute-force oracle comparisons; prints a pass/fail matrix.
    OracleCheck(OracleArgs),
}

#[derive(Args)]
struct TrainLmArgs {
    #[arg(long, value_parser = parse_unit)]
    unit: LmUnit,
    #[arg(long)]
    order: usize,
    #[arg(long, default_value_t = 0.5)]
    discount: f64,
    #[arg(long)]
    lexicon: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PplArgs {
    #[arg(long, value_parser = parse_unit)]
    unit: LmUnit,
    #[arg(long)]
    lexicon: PathBuf,
    /// Held-out corpus to evaluate on.
    #[arg(long)]
    corpus: PathBuf,
    /// Existing ARPA LM to evaluate.
    #[arg(long)]
    lm: Option<PathBuf>,
    /// Train an LM of this order on --train instead of loading one.
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    discount: f64,
}

#[derive(Args, Clone)]
struct TrainSeqArgs {
    /// JSON run configuration; explicit flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// JSON map utterance id -> per-frame feature buckets.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    phoneme_lm: Option<PathBuf>,
    #[arg(long)]
    word_lm: Option<PathBuf>,
    #[arg(long)]
    nbest: Option<PathBuf>,
    /// Starting checkpoint; a fresh random scorer is used when absent.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    criterion: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    top_j: Option<usize>,
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    cost: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    num_buckets: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
}

// Some fields (n_best, lambda1, lambda2) are carried for nbest/decode runs
// driven from the same config file; train-seq ignores them.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
#[allow(dead_code)]
struct RunConfig {
    version: u32,
    corpus: Option<String>,
    lexicon: Option<String>,
    features: Option<String>,
    phoneme_lm: Option<String>,
    word_lm: Option<String>,
    nbest: Option<String>,
    init: Option<String>,
    criterion: Option<String>,
    alpha: Option<f64>,
    beta: Option<f64>,
    top_j: Option<usize>,
    beam_size: Option<usize>,
    n_best: Option<usize>,
    lambda1: Option<f64>,
    lambda2: Option<f64>,
    cost: Option<String>,
    seed: Option<u64>,
    steps: Option<usize>,
    step_size: Option<f64>,
    k: Option<usize>,
    num_buckets: Option<usize>,
    out: Option<String>,
    log: Option<String>,
}

#[derive(Args)]
struct NbestArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    lexicon: PathBuf,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    phoneme_lm: PathBuf,
    #[arg(long)]
    word_lm: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    beam: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    lexicon: PathBuf,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    phoneme_lm: PathBuf,
    #[arg(long)]
    word_lm: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    lambda1: f64,
    #[arg(long, default_value_t = 0.0)]
    lambda2: f64,
    #[arg(long, default_value_t = 16)]
    beam: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    /// Reference corpus (JSON lines).
    #[arg(long)]
    refs: PathBuf,
    #[arg(long)]
    lexicon: PathBuf,
    /// Hypothesis file written by `decode`.
    #[arg(long)]
    hyps: PathBuf,
    #[arg(long, default_value = "eval")]
    dataset: String,
    /// Also write a CSV row `dataset,sub,del,ins,wer`.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    cases: usize,
    /// Dump the limited-context DP of the last case as JSON lines.
    #[arg(long)]
    dump_dp: Option<PathBuf>,
}

fn parse_unit(s: &str) -> std::result::Result<LmUnit, String> {
    match s {
        "phoneme" => Ok(LmUnit::Phoneme),
        "word" => Ok(LmUnit::Word),
        _ => Err("expected `phoneme` or `word`".into()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .ok();
    }
    let r = match cli.cmd {
        Cmd::TrainLm(a) => cmd_train_lm(a),
        Cmd::Ppl(a) => cmd_ppl(a),
        Cmd::TrainSeq(a) => cmd_train_seq(a),
        Cmd::Nbest(a) => cmd_nbest(a),
        Cmd::Decode(a) => cmd_decode(a),
        Cmd::Score(a) => cmd_score(a),
        Cmd::OracleCheck(a) => return cmd_oracle_check(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Diverged) => {
            eprintln!("error: {}", Error::Diverged);
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

struct World {
    alphabet: PhonemeAlphabet,
    lexicon: Lexicon,
    utterances: Vec<Utterance>,
}

fn load_world(lexicon: &PathBuf, corpus: &PathBuf) -> Result<World> {
    let (alphabet, lexicon) = load_lexicon(lexicon)?;
    let alphabet = alphabet.ok_or_else(|| Error::invalid("lexicon file is empty"))?;
    let utterances = load_corpus(corpus, &alphabet, &lexicon)?;
    Ok(World {
        alphabet,
        lexicon,
        utterances,
    })
}

fn token_seqs(world: &World, unit: LmUnit) -> Vec<Vec<usize>> {
    world
        .utterances
        .iter()
        .map(|u| match unit {
            LmUnit::Phoneme => u.reference_phonemes.0.clone(),
            LmUnit::Word => u.reference_words.clone(),
        })
        .collect()
}

fn lm_symbols(world: &World, unit: LmUnit) -> Vec<String> {
    match unit {
        LmUnit::Phoneme => (0..world.alphabet.num_labels())
            .map(|i| world.alphabet.name(i).to_string())
            .collect(),
        LmUnit::Word => {
            let mut names: Vec<String> = (0..world.lexicon.num_words())
                .map(|i| world.lexicon.word_name(i).to_string())
                .collect();
            names.push("</s>".into());
            names
        }
    }
}

fn num_base(world: &World, unit: LmUnit) -> usize {
    match unit {
        LmUnit::Phoneme => world.alphabet.num_labels(),
        LmUnit::Word => world.lexicon.num_words(),
    }
}

fn cmd_train_lm(a: TrainLmArgs) -> Result<()> {
    let world = load_world(&a.lexicon, &a.corpus)?;
    let lm = train_ngram(
        &token_seqs(&world, a.unit),
        a.unit,
        a.order,
        a.discount,
        num_base(&world, a.unit),
    )?;
    write_arpa(&lm, &a.out, &lm_symbols(&world, a.unit))?;
    println!("wrote {}-gram {:?} LM to {}", a.order, a.unit, a.out.display());
    Ok(())
}

fn cmd_ppl(a: PplArgs) -> Result<()> {
    let world = load_world(&a.lexicon, &a.corpus)?;
    let lm = match (&a.lm, a.order) {
        (Some(path), None) => read_arpa(path, a.unit, &lm_symbols(&world, a.unit))?,
        (None, Some(order)) => {
            let train_world = match &a.train {
                Some(t) => load_world(&a.lexicon, t)?,
                None if order == 0 => World {
                    alphabet: world.alphabet.clone(),
                    lexicon: world.lexicon.clone(),
                    utterances: vec![],
                },
                None => return Err(Error::invalid("--order needs --train (except order 0)")),
            };
            if order == 0 {
                NGramLM::uniform(a.unit, num_base(&world, a.unit))
            } else {
                train_ngram(
                    &token_seqs(&train_world, a.unit),
                    a.unit,
                    order,
                    a.discount,
                    num_base(&world, a.unit),
                )?
            }
        }
        _ => return Err(Error::invalid("give exactly one of --lm or --order")),
    };
    let ppl = perplexity(&lm, &token_seqs(&world, a.unit))?;
    println!("PPL {ppl:.6}");
    Ok(())
}

fn load_features(path: &Option<PathBuf>) -> Result<Option<FeatureSource>> {
    match path {
        None => Ok(None),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            let map: HashMap<String, Vec<usize>> =
                serde_json::from_str(&text).map_err(|e| Error::invalid(format!("features: {e}")))?;
            Ok(Some(FeatureSource::Loaded(map)))
        }
    }
}

macro_rules! merge {
    ($args:expr, $cfg:expr, $field:ident) => {
        $args.$field.clone().or_else(|| $cfg.$field.clone())
    };
    ($args:expr, $cfg:expr, $field:ident, path) => {
        $args
            .$field
            .clone()
            .or_else(|| $cfg.$field.clone().map(PathBuf::from))
    };
}

#[derive(Serialize)]
struct LogLine<'a> {
    step: usize,
    criterion: &'a str,
    loss: f64,
    grad_norm: f64,
    num_utts: usize,
}

fn cmd_train_seq(a: TrainSeqArgs) -> Result<()> {
    let cfg: RunConfig = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            let c: RunConfig =
                serde_json::from_str(&text).map_err(|e| Error::invalid(format!("config: {e}")))?;
            if c.version != 1 {
                return Err(Error::invalid(format!(
                    "unsupported config version {}",
                    c.version
                )));
            }
            c
        }
        None => RunConfig::default(),
    };
    let corpus = merge!(a, cfg, corpus, path).ok_or_else(|| Error::invalid("missing corpus"))?;
    let lexicon = merge!(a, cfg, lexicon, path).ok_or_else(|| Error::invalid("missing lexicon"))?;
    let criterion = merge!(a, cfg, criterion).ok_or_else(|| Error::invalid("missing criterion"))?;
    let out = merge!(a, cfg, out, path).ok_or_else(|| Error::invalid("missing --out"))?;
    let log_path = merge!(a, cfg, log, path);
    let features = merge!(a, cfg, features, path);
    let phoneme_lm_path = merge!(a, cfg, phoneme_lm, path);
    let word_lm_path = merge!(a, cfg, word_lm, path);
    let nbest_path = merge!(a, cfg, nbest, path);
    let init = merge!(a, cfg, init, path);
    let alpha = a.alpha.or(cfg.alpha).unwrap_or(1.0);
    let beta = a.beta.or(cfg.beta).unwrap_or(0.0);
    let top_j = a.top_j.or(cfg.top_j);
    let beam_size = a.beam_size.or(cfg.beam_size).unwrap_or(16);
    let cost = merge!(a, cfg, cost).unwrap_or_else(|| "word".into());
    let seed = a.seed.or(cfg.seed).unwrap_or(0);
    let steps = a.steps.or(cfg.steps).unwrap_or(10);
    let step_size = a.step_size.or(cfg.step_size).unwrap_or(0.1);
    let k = a.k.or(cfg.k).unwrap_or(1);
    let num_buckets = a.num_buckets.or(cfg.num_buckets).unwrap_or(8);

    let world = load_world(&lexicon, &corpus)?;
    let features = load_features(&features)?.unwrap_or(FeatureSource::RandomFixed { seed });
    let mut scorer = match &init {
        Some(p) => ContextKScorer::load(p, Some(features))?,
        None => ContextKScorer::random(
            k,
            world.alphabet.num_labels(),
            num_buckets,
            features,
            seed,
            0.1,
        ),
    };
    let phoneme_lm = phoneme_lm_path
        .map(|p| read_arpa(&p, LmUnit::Phoneme, &lm_symbols(&world, LmUnit::Phoneme)))
        .transpose()?;
    let word_lm = word_lm_path
        .map(|p| read_arpa(&p, LmUnit::Word, &lm_symbols(&world, LmUnit::Word)))
        .transpose()?;
    let nbest_lists: Option<HashMap<String, NBestList>> = nbest_path
        .map(|p| {
            read_nbest(&p, &world.alphabet, &world.lexicon)
                .map(|ls| ls.into_iter().map(|l| (l.id.clone(), l)).collect())
        })
        .transpose()?;
    let cost_kind = match cost.as_str() {
        "word" => CostKind::WordEdit,
        "phoneme" => CostKind::PhonemeEdit,
        other => return Err(Error::invalid(format!("unknown cost `{other}`"))),
    };
    let seq_cfg = SeqScoreConfig { alpha, beta, top_j };
    seq_cfg.validate()?;

    let need_plm = || {
        phoneme_lm
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("criterion {criterion} needs --phoneme-lm")))
    };
    let need_wlm = || {
        word_lm
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("criterion {criterion} needs --word-lm")))
    };
    // validate criterion early
    match criterion.as_str() {
        "ce" => {}
        "mmi_lf_limited" | "mmi_lf_approx" | "mmi_lf_beam" => {
            need_plm()?;
        }
        "mmi_lf_word" => {
            need_wlm()?;
        }
        "mmi_nbest" | "mbr_nbest" => {
            if nbest_lists.is_none() {
                return Err(Error::invalid(format!("criterion {criterion} needs --nbest")));
            }
        }
        other => return Err(Error::invalid(format!("unknown criterion `{other}`"))),
    }

    let step_loss = |scorer: &ContextKScorer, utt: &Utterance| -> Result<LossValue> {
        match criterion.as_str() {
            "ce" => ce_loss(scorer, utt),
            "mmi_lf_limited" => {
                let backend = DenomBackend::Limited { lm: need_plm()? };
                mmi_lf_loss(scorer, utt, &backend, &seq_cfg)
            }
            "mmi_lf_approx" => {
                let backend = DenomBackend::Approx {
                    lm: AnySeqLm::NGram(NGramSeqLm { lm: need_plm()? }),
                };
                mmi_lf_loss(scorer, utt, &backend, &seq_cfg)
            }
            "mmi_lf_word" => {
                let backend = DenomBackend::Word {
                    word_lm: need_wlm()?,
                    lexicon: &world.lexicon,
                    alphabet: &world.alphabet,
                };
                mmi_lf_loss(scorer, utt, &backend, &seq_cfg)
            }
            "mmi_lf_beam" => {
                let backend = DenomBackend::Beam {
                    lm: AnySeqLm::NGram(NGramSeqLm { lm: need_plm()? }),
                    beam_size,
                    mode: BeamMode::PruneRecomb,
                };
                mmi_lf_loss(scorer, utt, &backend, &seq_cfg)
            }
            "mmi_nbest" | "mbr_nbest" => {
                let lists = nbest_lists.as_ref().unwrap();
                let list = lists
                    .get(&utt.id)
                    .ok_or_else(|| Error::invalid(format!("no N-best list for `{}`", utt.id)))?;
                let tlm = match (&word_lm, &phoneme_lm) {
                    (Some(w), _) => TrainingLm::Word(w),
                    (None, Some(p)) => TrainingLm::Phoneme(AnySeqLm::NGram(NGramSeqLm { lm: p })),
                    (None, None) => TrainingLm::None,
                };
                if criterion == "mmi_nbest" {
                    mmi_nbest_loss(scorer, utt, &list.hyps, &tlm, alpha, beta)
                } else {
                    mbr_nbest_loss(scorer, utt, &list.hyps, &tlm, alpha, beta, cost_kind)
                }
            }
            _ => unreachable!(),
        }
    };

    let mut log_file = log_path.map(fs::File::create).transpose()?;
    for step in 0..steps {
        // full-batch gradient, aggregated in corpus order
        let results: Vec<Result<LossValue>> = world
            .utterances
            .par_iter()
            .map(|u| step_loss(&scorer, u))
            .collect();
        let mut total = 0.0;
        let mut grad = ScorerGrad::zeros_like(&scorer);
        for r in results {
            let l = r?;
            total += l.value;
            grad.add_scaled(&l.grad, 1.0);
        }
        let n = world.utterances.len() as f64;
        let loss = total / n;
        grad.scale(1.0 / n);
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::Diverged);
        }
        let line = LogLine {
            step,
            criterion: &criterion,
            loss,
            grad_norm: grad.norm(),
            num_utts: world.utterances.len(),
        };
        let text = serde_json::to_string(&line).unwrap();
        println!("{text}");
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{text}")?;
        }
        scorer.apply_grad(&grad, step_size);
    }
    scorer.save(&out)?;
    Ok(())
}

fn cmd_nbest(a: NbestArgs) -> Result<()> {
    let world = load_world(&a.lexicon, &a.corpus)?;
    let features = load_features(&a.features)?;
    let scorer = ContextKScorer::load(&a.ckpt, features)?;
    let plm = read_arpa(&a.phoneme_lm, LmUnit::Phoneme, &lm_symbols(&world, LmUnit::Phoneme))?;
    let wlm = read_arpa(&a.word_lm, LmUnit::Word, &lm_symbols(&world, LmUnit::Word))?;
    let lm = MultiLevelLm {
        phoneme_lm: &plm,
        word_lm: &wlm,
        lexicon: &world.lexicon,
        alphabet: &world.alphabet,
    };
    let lists: Result<Vec<NBestList>> = world
        .utterances
        .par_iter()
        .map(|u| {
            let bound = scorer.bind(u)?;
            let hyps = generate_nbest(
                &bound,
                &lm,
                &u.reference_phonemes.0,
                &u.reference_words,
                a.n,
                a.beam,
                a.alpha,
                a.beta,
            )?;
            Ok(NBestList {
                id: u.id.clone(),
                hyps,
            })
        })
        .collect();
    write_nbest(&a.out, &lists?, &world.alphabet, &world.lexicon)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct HypLine {
    id: String,
    words: String,
    phonemes: String,
    score: f64,
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let world = load_world(&a.lexicon, &a.corpus)?;
    let features = load_features(&a.features)?;
    let scorer = ContextKScorer::load(&a.ckpt, features)?;
    let plm = read_arpa(&a.phoneme_lm, LmUnit::Phoneme, &lm_symbols(&world, LmUnit::Phoneme))?;
    let wlm = read_arpa(&a.word_lm, LmUnit::Word, &lm_symbols(&world, LmUnit::Word))?;
    let lm = MultiLevelLm {
        phoneme_lm: &plm,
        word_lm: &wlm,
        lexicon: &world.lexicon,
        alphabet: &world.alphabet,
    };
    let ilm = if a.lambda2 != 0.0 {
        Some(ilm_zero_encoder(&scorer)?)
    } else {
        None
    };
    let cfg = DecodeConfig {
        lambda1: a.lambda1,
        lambda2: a.lambda2,
        beam_size: a.beam,
    };
    let outs: Result<Vec<HypLine>> = world
        .utterances
        .par_iter()
        .map(|u| {
            let bound = scorer.bind(u)?;
            let o = recognize(&bound, &lm, ilm.as_ref(), &cfg)?;
            Ok(HypLine {
                id: u.id.clone(),
                words: o
                    .words
                    .iter()
                    .map(|&w| world.lexicon.word_name(w))
                    .collect::<Vec<_>>()
                    .join(" "),
                phonemes: world.alphabet.format_labels(&o.phonemes),
                score: o.score,
            })
        })
        .collect();
    let mut text = String::new();
    for line in outs? {
        text.push_str(&serde_json::to_string(&line).unwrap());
        text.push('\n');
    }
    fs::write(&a.out, text)?;
    Ok(())
}

/// One decimal, floor (never rounds 49.96 up to 50.0).
fn fmt1(x: f64) -> String {
    format!("{:.1}", (x * 10.0).floor() / 10.0)
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let world = load_world(&a.lexicon, &a.refs)?;
    let refs: Vec<(String, Vec<usize>)> = world
        .utterances
        .iter()
        .map(|u| (u.id.clone(), u.reference_words.clone()))
        .collect();
    let text = fs::read_to_string(&a.hyps)?;
    let mut hyps = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: HypLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let mut words = Vec::new();
        for w in rec.words.split_whitespace() {
            words.push(world.lexicon.word_id(w).ok_or_else(|| Error::Parse {
                line: lineno + 1,
                msg: format!("unknown word `{w}`"),
            })?);
        }
        hyps.push((rec.id, words));
    }
    let w: WerBreakdown = score_wer(&refs, &hyps)?;
    println!("dataset      Sub    Del    Ins    WER");
    println!(
        "{:<10} {:>5} {:>6} {:>6} {:>6}",
        a.dataset,
        fmt1(w.sub_rate()),
        fmt1(w.del_rate()),
        fmt1(w.ins_rate()),
        fmt1(w.wer())
    );
    if let Some(csv) = &a.csv {
        fs::write(
            csv,
            format!(
                "dataset,sub,del,ins,wer\n{},{},{},{},{}\n",
                a.dataset,
                fmt1(w.sub_rate()),
                fmt1(w.del_rate()),
                fmt1(w.ins_rate()),
                fmt1(w.wer())
            ),
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct DpLine<'a> {
    frame: usize,
    context: &'a [usize],
    q: f64,
    history_key: &'a Option<Vec<usize>>,
}

fn cmd_oracle_check(a: OracleArgs) -> ExitCode {
    use rand::prelude::*;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
    let mut all_ok = true;
    let mut check = |name: &str, ok: bool| {
        println!("{:<44} {}", name, if ok { "pass" } else { "FAIL" });
        all_ok &= ok;
    };
    let mut last_dump = None;
    for case in 0..a.cases {
        let t_len = rng.gen_range(2..=4usize);
        let v = rng.gen_range(2..=3usize);
        let k = rng.gen_range(1..=2usize);
        let alpha = [0.5, 1.0, 1.2][rng.gen_range(0..3)];
        let beta = [0.0, 0.2, 0.3][rng.gen_range(0..3)];
        let am = PrecomputedScores::random(t_len, v, k, rng.gen());
        let lm = NGramLM::random_full_phoneme(2, v, rng.gen());
        let cfg = SeqScoreConfig {
            alpha,
            beta,
            top_j: None,
        };
        let name = format!("case {case}: T={t_len} V={v} k={k} a={alpha} b={beta}");
        let run = (|| -> Result<(bool, bool, bool)> {
            let limited = lf_denominator_limited(&am, &lm, &cfg)?;
            let brute =
                brute_force_denominator(&am, &NGramSeqLm { lm: &lm }, &cfg, 1 << 22)?;
            let ok1 = (limited.log_sum - brute).abs() < 1e-6;
            let approx = lf_denominator_approx(&am, &NGramSeqLm { lm: &lm }, &cfg)?;
            let ok2 = (approx.log_sum - limited.log_sum).abs() < 1e-9;
            let beam = beam_denominator(
                &am,
                &NGramSeqLm { lm: &lm },
                &cfg,
                (v + 1).pow(t_len as u32),
                BeamMode::PruneRecomb,
            )?;
            let ok3 = (beam.log_sum - brute).abs() < 1e-6;
            last_dump = Some(limited.states);
            Ok((ok1, ok2, ok3))
        })();
        match run {
            Ok((ok1, ok2, ok3)) => {
                check(&format!("{name} limited=brute"), ok1);
                check(&format!("{name} approx=limited"), ok2);
                check(&format!("{name} beam=brute"), ok3);
            }
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        }
    }
    if let Some(path) = &a.dump_dp {
        let states = last_dump.expect("at least one case ran");
        let mut text = String::new();
        for (frame, frame_states) in states.iter().enumerate() {
            for s in frame_states {
                let line = DpLine {
                    frame,
                    context: &s.context,
                    q: s.q,
                    history_key: &s.history_key,
                };
                text.push_str(&serde_json::to_string(&line).unwrap());
                text.push('\n');
            }
        }
        if let Err(e) = fs::write(path, text) {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    if all_ok {
        println!("all checks passed");
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
