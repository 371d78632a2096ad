//! Command-line surface and the validated run configuration.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use scfa_core::{BlockSpec, Precision};

#[derive(Debug, Parser)]
#[command(
    name = "scfa",
    version,
    about = "Tiled causal attention: verification, benchmarks and coverage"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a method against the naive oracle, finite differences and
    /// stranded-query fuzz cases.
    Verify(BenchArgs),
    /// Time pre-processing, forward, backward and post-processing.
    Bench(BenchArgs),
    /// Collision coverage of the hash-sparse and chunked methods.
    Coverage(BenchArgs),
}

impl Command {
    pub fn mode(&self) -> Mode {
        match self {
            Command::Verify(_) => Mode::Verify,
            Command::Bench(_) => Mode::Bench,
            Command::Coverage(_) => Mode::Coverage,
        }
    }

    pub fn args(&self) -> &BenchArgs {
        match self {
            Command::Verify(a) | Command::Bench(a) | Command::Coverage(a) => a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Verify,
    Bench,
    Coverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Dense,
    Naive,
    Qk,
    Hash,
    Reformer,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Dense => "dense",
            Method::Naive => "naive",
            Method::Qk => "qk",
            Method::Hash => "hash",
            Method::Reformer => "reformer",
        }
    }

    pub fn uses_buckets(self) -> bool {
        matches!(self, Method::Hash | Method::Reformer)
    }
}

/// Where bucket ids come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HashSource {
    /// Angular LSH of the generated vectors (needs an even bucket count).
    Lsh,
    /// Ids drawn uniformly from `[0, nb)`.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 48)]
    pub heads: usize,
    /// One or more lengths, comma separated. Defaults to 128 for verify and
    /// 1024 otherwise.
    #[arg(long = "seq-len", value_delimiter = ',')]
    pub seq_len: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long = "block-m", default_value_t = 64)]
    pub block_m: usize,
    #[arg(long = "block-n", default_value_t = 64)]
    pub block_n: usize,
    /// Bucket count. Required for hash and reformer, except in coverage runs
    /// where it defaults to ceil(T / chunk) (rounded up to even for LSH).
    #[arg(long)]
    pub nbuckets: Option<u32>,
    /// Probability of dropping each query and key position (qk only).
    #[arg(long = "keep-prob")]
    pub keep_prob: Option<f64>,
    /// Chunk length of the chunked baseline [default: 64].
    #[arg(long)]
    pub chunk: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// 32 or 64. Defaults to 64 for verify and 32 otherwise.
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<Precision>,
    /// Timed repetitions (the first is discarded when there are several);
    /// coverage runs use one seed per repetition.
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long = "exclude-self", value_enum, default_value_t = Toggle::Off)]
    pub exclude_self: Toggle,
    #[arg(long = "hash-source", value_enum, default_value_t = HashSource::Lsh)]
    pub hash_source: HashSource,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse::<u32>()
        .ok()
        .and_then(Precision::from_bits)
        .ok_or_else(|| format!("precision must be 32 or 64, got {s:?}"))
}

/// A configuration that passed validation.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub mode: Mode,
    pub method: Method,
    pub batch: usize,
    pub heads: usize,
    pub seq_lens: Vec<usize>,
    pub dim: usize,
    pub blocks: BlockSpec,
    pub nbuckets: Option<u32>,
    pub keep_prob: Option<f64>,
    pub chunk: usize,
    pub seed: u64,
    pub precision: Precision,
    pub reps: usize,
    pub exclude_self: bool,
    pub hash_source: HashSource,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

macro_rules! usage {
    ($($arg:tt)*) => { return Err(UsageError(format!($($arg)*))) };
}

pub const DEFAULT_CHUNK: usize = 64;
pub const MAX_SEQ_LEN: usize = 1 << 20;

impl BenchConfig {
    pub fn from_args(mode: Mode, a: &BenchArgs) -> Result<Self, UsageError> {
        for (name, v) in [("batch", a.batch), ("heads", a.heads), ("dim", a.dim), ("reps", a.reps)] {
            if v == 0 {
                usage!("--{name} must be >= 1");
            }
        }
        let blocks = BlockSpec::new(a.block_m, a.block_n)
            .map_err(|_| UsageError("--block-m and --block-n must be >= 1".into()))?;
        let seq_lens = if a.seq_len.is_empty() {
            vec![if mode == Mode::Verify { 128 } else { 1024 }]
        } else {
            a.seq_len.clone()
        };
        if let Some(&t) = seq_lens.iter().find(|&&t| t == 0 || t > MAX_SEQ_LEN) {
            usage!("--seq-len values must lie in [1, {MAX_SEQ_LEN}], got {t}");
        }
        let chunk = a.chunk.unwrap_or(DEFAULT_CHUNK);
        if chunk == 0 {
            usage!("--chunk must be >= 1");
        }
        if mode == Mode::Coverage && !a.method.uses_buckets() {
            usage!("coverage runs need --method hash or --method reformer");
        }
        match a.method {
            Method::Qk => match a.keep_prob {
                None => usage!("--method qk requires --keep-prob"),
                Some(s) if !(0.0..=1.0).contains(&s) => usage!("--keep-prob must lie in [0, 1], got {s}"),
                Some(_) => {}
            },
            Method::Hash | Method::Reformer => match a.nbuckets {
                None if mode != Mode::Coverage => {
                    usage!("--method {} requires --nbuckets", a.method.name())
                }
                Some(0) => usage!("--nbuckets must be >= 1"),
                Some(nb) if a.hash_source == HashSource::Lsh && nb % 2 != 0 => usage!(
                    "--nbuckets must be even for LSH hashing (got {nb}); \
                     use an even count or --hash-source uniform"
                ),
                _ => {}
            },
            Method::Dense | Method::Naive => {}
        }
        Ok(Self {
            mode,
            method: a.method,
            batch: a.batch,
            heads: a.heads,
            seq_lens,
            dim: a.dim,
            blocks,
            nbuckets: a.nbuckets,
            keep_prob: a.keep_prob,
            chunk,
            seed: a.seed,
            precision: a.precision.unwrap_or(if mode == Mode::Verify {
                Precision::F64
            } else {
                Precision::F32
            }),
            reps: a.reps,
            exclude_self: a.exclude_self == Toggle::On,
            hash_source: a.hash_source,
            out: a.out.clone(),
        })
    }

    /// Bucket count used at length `t`: the explicit value, or the one that
    /// keeps the average bucket population at the chunk length.
    pub fn buckets_for(&self, t: usize) -> u32 {
        self.nbuckets.unwrap_or_else(|| {
            let nb = t.div_ceil(self.chunk).max(1) as u32;
            match self.hash_source {
                HashSource::Lsh => nb + nb % 2,
                HashSource::Uniform => nb,
            }
        })
    }
}
