//! Sequence discriminative training for phoneme-based strictly-monotonic
//! neural transducers: lattice-free MMI denominators (limited context,
//! approximated full context, word-level LMs), pruning-recombination beam
//! search, N-best MMI/MBR losses with exact gradients, and LM-fused decoding
//! with WER error analysis.

pub mod base;
pub mod beam;
pub mod decode;
pub mod lattice;
pub mod lattice_free;
pub mod lm;
pub mod losses;
pub mod scorer;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("enumeration budget exceeded: {0} alignment paths")]
    Budget(u64),
    #[error("no valid alignment exists: S={s} > T={t}")]
    NoAlignment { s: usize, t: usize },
    #[error("non-finite loss, training diverged")]
    Diverged,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
