//! Drivers behind the `verify`, `bench` and `coverage` subcommands.

use std::time::Instant;

use scfa_core::hash::{
    hash_backward_kernel, hash_forward_kernel, lsh_buckets, normalize_keys, sort_by_bucket, BucketTensor,
};
use scfa_core::oracle::{build_mask, finite_diff_gradient, naive_attention, tensor_rel_err, MaskSpec};
use scfa_core::qk::{keep_mask_spec, qk_prepare};
use scfa_core::reformer::{
    chunk_mask_spec, hash_sparse_coverage, lsh_coverage, reformer_backward_kernel, reformer_forward_kernel, ChunkSpec,
};
use scfa_core::rng::{random_keep_mask, random_tensor, uniform_buckets, Distribution};
use scfa_core::{
    dense, AttentionBatch, BlockSpec, Element, Gradients, Grid3, Layout, Precision, Scale, Shape4, Tensor4,
};

use crate::config::{BenchConfig, HashSource, Method, Mode};
use crate::record::Record;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Core(#[from] scfa_core::Error),
    #[error("cannot write {path}: {source}")]
    Output {
        path: String,
        #[source]
        source: csv::Error,
    },
}

type Result<T, E = RunError> = std::result::Result<T, E>;

/// Generated operands of one point, sequence-major `(B, T, H, D)`.
#[derive(Debug, Clone)]
pub struct Inputs<T> {
    pub q: Tensor4<T>,
    pub k: Tensor4<T>,
    pub v: Tensor4<T>,
    pub d_o: Tensor4<T>,
    pub q_keep: Option<Grid3<bool>>,
    pub k_keep: Option<Grid3<bool>>,
    pub q_hash: Option<BucketTensor>,
    pub k_hash: Option<BucketTensor>,
}

/// Per-role seeds derived from the configured seed.
fn sub_seed(seed: u64, role: u64) -> u64 {
    seed.wrapping_mul(16).wrapping_add(role)
}

/// Point geometry: the configured shape at sequence length `t`.
#[derive(Debug, Clone, Copy)]
pub struct Point {
    pub method: Method,
    pub batch: usize,
    pub heads: usize,
    pub len: usize,
    pub dim: usize,
    pub blocks: BlockSpec,
    pub nb: u32,
    pub keep_prob: f64,
    pub chunk: usize,
    pub seed: u64,
    pub exclude_self: bool,
    pub hash_source: HashSource,
}

impl Point {
    pub fn new(cfg: &BenchConfig, len: usize, seed: u64) -> Self {
        Self {
            method: cfg.method,
            batch: cfg.batch,
            heads: cfg.heads,
            len,
            dim: cfg.dim,
            blocks: cfg.blocks,
            nb: cfg.buckets_for(len),
            keep_prob: cfg.keep_prob.unwrap_or(0.0),
            chunk: cfg.chunk,
            seed,
            exclude_self: cfg.exclude_self && cfg.method.uses_buckets(),
            hash_source: cfg.hash_source,
        }
    }

    fn shape(&self) -> Result<Shape4> {
        Ok(Shape4::new(self.batch, self.heads, self.len, self.dim)?)
    }

    fn buckets(&self, x: &Tensor4<f64>, role: u64) -> Result<BucketTensor> {
        Ok(match self.hash_source {
            HashSource::Lsh => lsh_buckets(x, self.nb, sub_seed(self.seed, 8))?,
            HashSource::Uniform => BucketTensor::new(
                uniform_buckets(self.batch, self.len, self.heads, self.nb, sub_seed(self.seed, role))?,
                self.nb,
            )?,
        })
    }

    /// Deterministic operands. The chunked baseline uses shared query/key
    /// vectors (keys are the normalized queries) and one set of buckets.
    pub fn inputs<T: Element>(&self) -> Result<Inputs<T>> {
        let shape = self.shape()?;
        let gen = |role| {
            random_tensor::<f64>(
                shape,
                Layout::SeqMajor,
                sub_seed(self.seed, role),
                Distribution::StandardNormal,
            )
        };
        let q = gen(0)?;
        let k = if self.method == Method::Reformer {
            normalize_keys(&q)?
        } else {
            gen(1)?
        };
        let (v, d_o) = (gen(2)?, gen(3)?);
        let (mut q_keep, mut k_keep, mut q_hash, mut k_hash) = (None, None, None, None);
        match self.method {
            Method::Qk => {
                q_keep = Some(random_keep_mask(
                    self.batch,
                    self.len,
                    self.heads,
                    self.keep_prob,
                    sub_seed(self.seed, 4),
                )?);
                k_keep = Some(random_keep_mask(
                    self.batch,
                    self.len,
                    self.heads,
                    self.keep_prob,
                    sub_seed(self.seed, 5),
                )?);
            }
            Method::Hash => {
                q_hash = Some(self.buckets(&q, 6)?);
                k_hash = Some(self.buckets(&k, 7)?);
            }
            Method::Reformer => {
                let shared = self.buckets(&q, 6)?;
                k_hash = Some(shared.clone());
                q_hash = Some(shared);
            }
            Method::Dense | Method::Naive => {}
        }
        Ok(Inputs {
            q: q.cast(),
            k: k.cast(),
            v: v.cast(),
            d_o: d_o.cast(),
            q_keep,
            k_keep,
            q_hash,
            k_hash,
        })
    }

    /// Naive-oracle mask equivalent to the method, in original positions.
    pub fn oracle_mask<T: Element>(&self, inputs: &Inputs<T>) -> Result<MaskSpec> {
        let (b, h, t) = (self.batch, self.heads, self.len);
        Ok(match self.method {
            Method::Dense | Method::Naive => MaskSpec::causal(b, h, t),
            Method::Qk => keep_mask_spec(
                inputs.q_keep.as_ref().expect("keep flags"),
                inputs.k_keep.as_ref().expect("keep flags"),
            ),
            Method::Hash => {
                let (qh, kh) = (
                    inputs.q_hash.as_ref().expect("buckets"),
                    inputs.k_hash.as_ref().expect("buckets"),
                );
                let idx = Grid3::from_fn(b, h, t, qh.ids().layout(), |_, _, t| t as i64);
                let kidx = idx.to_layout(kh.ids().layout());
                build_mask(&idx, &kidx, Some((qh.ids(), kh.ids())), self.exclude_self)?
            }
            Method::Reformer => chunk_mask_spec(
                inputs.q_hash.as_ref().expect("buckets"),
                inputs.k_hash.as_ref().expect("buckets"),
                ChunkSpec::new(self.chunk)?,
                self.exclude_self,
            )?,
        })
    }
}

/// Result of one staged run. Tensors are sequence-major and in original
/// order.
#[derive(Debug, Clone)]
pub struct Outcome<T> {
    pub pre_ms: f64,
    pub fwd_ms: f64,
    pub bwd_ms: Option<f64>,
    pub post_ms: f64,
    pub tiles: Option<u64>,
    pub o: Tensor4<T>,
    pub grads: Option<Gradients<T>>,
}

fn timed<R>(f: impl FnOnce() -> R) -> (R, f64) {
    let start = Instant::now();
    let r = f();
    (r, start.elapsed().as_secs_f64() * 1e3)
}

fn to_seq<T: Element>(g: Gradients<T>) -> Gradients<T> {
    Gradients {
        dq: g.dq.to_layout(Layout::SeqMajor),
        dk: g.dk.to_layout(Layout::SeqMajor),
        dv: g.dv.to_layout(Layout::SeqMajor),
    }
}

/// Runs one method end to end. Pre-processing (transposes, compaction,
/// bucket sort) and post-processing (scatter, transposes back) are timed
/// separately from the kernels; input generation is not timed.
pub fn run_method<T: Element>(p: &Point, inputs: &Inputs<T>, backward: bool) -> Result<Outcome<T>> {
    let scale = Scale::for_dim(p.dim);
    let blocks = p.blocks;
    let hm = |x: &Tensor4<T>| x.to_layout(Layout::HeadMajor);
    match p.method {
        Method::Dense => {
            let (pre, pre_ms) = timed(|| -> Result<_> {
                Ok((
                    AttentionBatch::with_scale(hm(&inputs.q), hm(&inputs.k), hm(&inputs.v), scale)?,
                    hm(&inputs.d_o),
                ))
            });
            let (batch, d_o) = pre?;
            let (out, fwd_ms) = timed(|| dense::flash_forward(&batch, blocks));
            let out = out?;
            let (grads, bwd_ms) = if backward {
                let (g, ms) = timed(|| dense::flash_backward(&batch, &out, &d_o, blocks));
                (Some(g?), Some(ms))
            } else {
                (None, None)
            };
            let ((o, grads), post_ms) = timed(|| (out.o.to_layout(Layout::SeqMajor), grads.map(to_seq)));
            Ok(Outcome {
                pre_ms,
                fwd_ms,
                bwd_ms,
                post_ms,
                tiles: Some(out.tiles_computed),
                o,
                grads,
            })
        }
        Method::Naive => {
            let (pre, pre_ms) = timed(|| -> Result<_> {
                let batch = AttentionBatch::with_scale(hm(&inputs.q), hm(&inputs.k), hm(&inputs.v), scale)?;
                Ok((batch, MaskSpec::causal(p.batch, p.heads, p.len)))
            });
            let (batch, mask) = pre?;
            let (out, fwd_ms) = timed(|| naive_attention(&batch, &mask));
            let out = out?;
            let (o, post_ms) = timed(|| out.cast::<T>().to_layout(Layout::SeqMajor));
            Ok(Outcome {
                pre_ms,
                fwd_ms,
                bwd_ms: None,
                post_ms,
                tiles: None,
                o,
                grads: None,
            })
        }
        Method::Qk => {
            let (q_keep, k_keep) = (
                inputs.q_keep.as_ref().expect("keep flags"),
                inputs.k_keep.as_ref().expect("keep flags"),
            );
            let (pre, pre_ms) = timed(|| -> Result<_> {
                let prep = qk_prepare(&inputs.q, &inputs.k, &inputs.v, q_keep, k_keep, scale)?;
                let d_o = prep.gather_queries(&inputs.d_o)?;
                Ok((prep, d_o))
            });
            let (prep, d_o) = pre?;
            let (out, fwd_ms) = timed(|| prep.forward(blocks));
            let out = out?;
            let (grads, bwd_ms) = if backward {
                let (g, ms) = timed(|| prep.backward(&out, &d_o, blocks));
                (Some(g?), Some(ms))
            } else {
                (None, None)
            };
            let (post, post_ms) = timed(|| -> Result<_> {
                let o = prep.scatter_queries(&out.o)?;
                let grads = match grads {
                    Some(g) => Some(Gradients {
                        dq: prep.scatter_queries(&g.dq)?,
                        dk: prep.scatter_keys(&g.dk)?,
                        dv: prep.scatter_keys(&g.dv)?,
                    }),
                    None => None,
                };
                Ok((o, grads))
            });
            let (o, grads) = post?;
            Ok(Outcome {
                pre_ms,
                fwd_ms,
                bwd_ms,
                post_ms,
                tiles: Some(out.tiles_computed),
                o,
                grads,
            })
        }
        Method::Hash | Method::Reformer => {
            let (qh, kh) = (
                inputs.q_hash.as_ref().expect("buckets"),
                inputs.k_hash.as_ref().expect("buckets"),
            );
            let chunk = ChunkSpec::new(p.chunk)?;
            let ex = p.exclude_self;
            let (pre, pre_ms) = timed(|| -> Result<_> {
                let batch = AttentionBatch::with_scale(inputs.q.clone(), inputs.k.clone(), inputs.v.clone(), scale)?;
                let sorted = sort_by_bucket(&batch, qh, kh)?;
                let d_o = sorted.gather_queries(&inputs.d_o)?;
                Ok((sorted, d_o))
            });
            let (sorted, d_o) = pre?;
            let chunked = p.method == Method::Reformer;
            let (out, fwd_ms) = timed(|| {
                if chunked {
                    reformer_forward_kernel(&sorted, chunk, blocks, ex)
                } else {
                    hash_forward_kernel(&sorted, blocks, ex)
                }
            });
            let out = out?;
            let (grads, bwd_ms) = if backward {
                let (g, ms) = timed(|| {
                    if chunked {
                        reformer_backward_kernel(&sorted, &out, &d_o, chunk, blocks, ex)
                    } else {
                        hash_backward_kernel(&sorted, &out, &d_o, blocks, ex)
                    }
                });
                (Some(g?), Some(ms))
            } else {
                (None, None)
            };
            let seq = Layout::SeqMajor;
            let (post, post_ms) = timed(|| -> Result<_> {
                let o = sorted.scatter_queries(&out.o, seq)?;
                let grads = match grads {
                    Some(g) => Some(Gradients {
                        dq: sorted.scatter_queries(&g.dq, seq)?,
                        dk: sorted.scatter_keys(&g.dk, seq)?,
                        dv: sorted.scatter_keys(&g.dv, seq)?,
                    }),
                    None => None,
                };
                Ok((o, grads))
            });
            let (o, grads) = post?;
            Ok(Outcome {
                pre_ms,
                fwd_ms,
                bwd_ms,
                post_ms,
                tiles: Some(out.tiles_computed),
                o,
                grads,
            })
        }
    }
}

fn base_record(cfg: &BenchConfig, p: &Point) -> Record {
    let m = p.method;
    let tiled = m != Method::Naive;
    Record {
        method: m.name().to_string(),
        batch: p.batch,
        heads: p.heads,
        len: p.len,
        dim: p.dim,
        block_m: tiled.then_some(p.blocks.block_m),
        block_n: tiled.then_some(p.blocks.block_n),
        nb: m.uses_buckets().then_some(p.nb),
        keep_prob: (m == Method::Qk).then_some(p.keep_prob),
        chunk: (m == Method::Reformer).then_some(p.chunk),
        seed: p.seed,
        precision: cfg.precision.bits(),
        pre_ms: None,
        fwd_ms: None,
        bwd_ms: None,
        post_ms: None,
        tiles: None,
        max_rel_err: None,
        coverage: None,
    }
}

/// Median after discarding the warm-up repetition (kept when it is the only
/// one).
pub fn warm_median(samples: &[f64]) -> f64 {
    let mut xs: Vec<f64> = if samples.len() > 1 {
        samples[1..].to_vec()
    } else {
        samples.to_vec()
    };
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn bench_point<T: Element>(cfg: &BenchConfig, p: &Point) -> Result<Record> {
    let inputs = p.inputs::<T>()?;
    let backward = p.method != Method::Naive;
    let mut times: [Vec<f64>; 4] = Default::default();
    let mut tiles = None;
    for _ in 0..cfg.reps {
        let out = run_method(p, &inputs, backward)?;
        times[0].push(out.pre_ms);
        times[1].push(out.fwd_ms);
        times[2].extend(out.bwd_ms);
        times[3].push(out.post_ms);
        tiles = out.tiles;
    }
    let median = |xs: &Vec<f64>| (!xs.is_empty()).then(|| warm_median(xs));
    Ok(Record {
        pre_ms: median(&times[0]),
        fwd_ms: median(&times[1]),
        bwd_ms: median(&times[2]),
        post_ms: median(&times[3]),
        tiles,
        ..base_record(cfg, p)
    })
}

pub fn bench(cfg: &BenchConfig) -> Result<Vec<Record>> {
    cfg.seq_lens
        .iter()
        .map(|&t| {
            let p = Point::new(cfg, t, cfg.seed);
            match cfg.precision {
                Precision::F32 => bench_point::<f32>(cfg, &p),
                Precision::F64 => bench_point::<f64>(cfg, &p),
            }
        })
        .collect()
}

/// Shared-query vectors hashed for a coverage point.
fn coverage_buckets(p: &Point) -> Result<BucketTensor> {
    let shape = p.shape()?;
    let x = random_tensor::<f64>(
        shape,
        Layout::SeqMajor,
        sub_seed(p.seed, 0),
        Distribution::StandardNormal,
    )?;
    p.buckets(&x, 6)
}

pub fn coverage(cfg: &BenchConfig) -> Result<Vec<Record>> {
    let mut rows = Vec::new();
    for &t in &cfg.seq_lens {
        for seed in (0..cfg.reps as u64).map(|r| cfg.seed.wrapping_add(r)) {
            let p = Point::new(cfg, t, seed);
            let hashes = coverage_buckets(&p)?;
            let report = match p.method {
                Method::Reformer => lsh_coverage(&hashes, &hashes, ChunkSpec::new(p.chunk)?, p.exclude_self)?,
                _ => hash_sparse_coverage(&hashes, &hashes, p.blocks, p.exclude_self)?,
            };
            let mut r = base_record(cfg, &p);
            if p.method == Method::Reformer {
                r.block_m = None;
                r.block_n = None;
            }
            r.coverage = Some(report.coverage());
            rows.push(r);
        }
    }
    Ok(rows)
}

/// One line of the verification report.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub limit: String,
    pub passed: bool,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {:.3e} ({})", self.name, self.measured, self.limit)
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    pub records: Vec<Record>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn below(&mut self, name: String, measured: f64, tol: f64) {
        self.checks.push(Check {
            name,
            measured,
            limit: format!("< {tol:e}"),
            passed: measured < tol,
        });
    }

    fn equal(&mut self, name: String, measured: f64, want: f64) {
        self.checks.push(Check {
            name,
            measured,
            limit: format!("== {want}"),
            passed: measured == want,
        });
    }
}

pub const TOL_64: f64 = 1e-12;
pub const TOL_32: f64 = 1e-5;
pub const TOL_GRAD: f64 = 1e-6;
pub const FUZZ_CASES: u64 = 64;

fn oracle_error<T: Element>(p: &Point) -> Result<(f64, Option<u64>)> {
    let inputs = p.inputs::<T>()?;
    let out = run_method(p, &inputs, false)?;
    let mask = p.oracle_mask(&inputs)?;
    let hm = |x: &Tensor4<T>| x.to_layout(Layout::HeadMajor).cast::<f64>();
    let batch = AttentionBatch::with_scale(hm(&inputs.q), hm(&inputs.k), hm(&inputs.v), Scale::for_dim(p.dim))?;
    let want = naive_attention(&batch, &mask)?;
    Ok((tensor_rel_err(&out.o, &want), out.tiles))
}

/// Analytic gradients against central differences of the oracle on a
/// reduced shape of the same configuration.
fn gradient_error(p: &Point) -> Result<f64> {
    let small = Point {
        batch: 1,
        heads: 2,
        len: p.len.min(24),
        dim: p.dim.min(6),
        blocks: BlockSpec::new(p.blocks.block_m.min(8), p.blocks.block_n.min(8))?,
        ..*p
    };
    let inputs = small.inputs::<f64>()?;
    let out = run_method(&small, &inputs, true)?;
    let grads = out.grads.expect("backward requested");
    let mask = small.oracle_mask(&inputs)?;
    let hm = |x: &Tensor4<f64>| x.to_layout(Layout::HeadMajor);
    let batch = AttentionBatch::with_scale(hm(&inputs.q), hm(&inputs.k), hm(&inputs.v), Scale::for_dim(small.dim))?;
    let fd = finite_diff_gradient(&batch, &mask, &hm(&inputs.d_o), 1e-5)?;
    Ok([
        tensor_rel_err(&grads.dq, &fd.dq),
        tensor_rel_err(&grads.dk, &fd.dk),
        tensor_rel_err(&grads.dv, &fd.dv),
    ]
    .into_iter()
    .fold(0.0, f64::max))
}

/// Stranding-heavy variant of `p` for fuzz case `case`: most positions
/// dropped, many tiny buckets and self-exclusion, tiny shapes and blocks.
fn fuzz_point(p: &Point, case: u64) -> Result<Point> {
    let pick = |k: u64, n: u64| (p.seed.wrapping_mul(31).wrapping_add(case * 7919 + k * 104_729) % n) as usize;
    let len = 1 + pick(0, 40);
    let nb = match p.hash_source {
        HashSource::Lsh => 2 * (1 + pick(3, 16) as u32),
        HashSource::Uniform => 1 + pick(3, 32) as u32,
    };
    Ok(Point {
        batch: 1 + pick(1, 2),
        heads: 1 + pick(2, 3),
        len,
        dim: 1 + pick(4, 8),
        blocks: BlockSpec::new([1, 2, 4, 8, 16][pick(5, 5)], [1, 3, 8, 16][pick(6, 4)])?,
        nb,
        keep_prob: [0.5, 0.9, 1.0][pick(7, 3)],
        chunk: 1 + pick(8, 8),
        seed: sub_seed(p.seed, 1000 + case),
        exclude_self: p.method.uses_buckets(),
        ..*p
    })
}

/// Number of fuzz cases producing a NaN/inf anywhere, or a nonzero row for
/// a query without any visible key.
fn nan_failures(p: &Point) -> Result<u64> {
    let mut failures = 0;
    for case in 0..FUZZ_CASES {
        let f = fuzz_point(p, case)?;
        let inputs = f.inputs::<f64>()?;
        let out = run_method(&f, &inputs, f.method != Method::Naive)?;
        let mask = f.oracle_mask(&inputs)?;
        let mut ok = out.o.all_finite() && out.grads.as_ref().is_none_or(Gradients::all_finite);
        for b in 0..f.batch {
            for h in 0..f.heads {
                for i in 0..f.len {
                    if !mask.row(b, h, i).contains(&true) {
                        ok &= (0..f.dim).all(|d| out.o.get(b, h, i, d) == 0.0);
                    }
                }
            }
        }
        failures += u64::from(!ok);
    }
    Ok(failures)
}

fn verify_point<T: Element>(cfg: &BenchConfig, p: &Point, report: &mut VerifyReport) -> Result<()> {
    let t = p.len;
    let tol = if T::PRECISION == Precision::F64 { TOL_64 } else { TOL_32 };
    let (err, tiles) = oracle_error::<T>(p)?;
    report.below(
        format!("oracle T={t} {}-bit max_rel_err", T::PRECISION.bits()),
        err,
        tol,
    );
    if p.method != Method::Naive {
        report.below(
            format!("gradient T={} finite-difference max_rel_err", t.min(24)),
            gradient_error(p)?,
            TOL_GRAD,
        );
    }
    let failures = nan_failures(p)?;
    report.equal(
        format!("stranded-query fuzz ({FUZZ_CASES} cases) failures"),
        failures as f64,
        0.0,
    );

    let mut record = base_record(cfg, p);
    record.tiles = tiles;
    record.max_rel_err = Some(err);
    if p.method.uses_buckets() {
        let inputs = p.inputs::<f64>()?;
        let (qh, kh) = (
            inputs.q_hash.as_ref().expect("buckets"),
            inputs.k_hash.as_ref().expect("buckets"),
        );
        let full = hash_sparse_coverage(qh, kh, p.blocks, p.exclude_self)?.coverage();
        report.equal(format!("hash-sparse coverage T={t}"), full, 1.0);
        let chunked = lsh_coverage(qh, kh, ChunkSpec::new(p.chunk)?, p.exclude_self)?;
        let whole = lsh_coverage(qh, kh, ChunkSpec::new(t)?, p.exclude_self)?;
        report.equal(format!("chunked coverage with chunk >= T={t}"), whole.coverage(), 1.0);
        record.coverage = Some(if p.method == Method::Hash {
            full
        } else {
            chunked.coverage()
        });
    }
    report.records.push(record);
    Ok(())
}

pub fn verify(cfg: &BenchConfig) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    for &t in &cfg.seq_lens {
        let p = Point::new(cfg, t, cfg.seed);
        match cfg.precision {
            Precision::F32 => verify_point::<f32>(cfg, &p, &mut report)?,
            Precision::F64 => verify_point::<f64>(cfg, &p, &mut report)?,
        }
    }
    Ok(report)
}

/// Output of any subcommand.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub records: Vec<Record>,
    pub checks: Vec<Check>,
}

impl RunOutput {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn execute(cfg: &BenchConfig) -> Result<RunOutput> {
    Ok(match cfg.mode {
        Mode::Bench => RunOutput {
            records: bench(cfg)?,
            checks: Vec::new(),
        },
        Mode::Coverage => RunOutput {
            records: coverage(cfg)?,
            checks: Vec::new(),
        },
        Mode::Verify => {
            let r = verify(cfg)?;
            RunOutput {
                records: r.records,
                checks: r.checks,
            }
        }
    })
}

/// Writes `records` as CSV to `cfg.out`, or to standard output.
pub fn emit(cfg: &BenchConfig, records: &[Record]) -> Result<()> {
    let wrap = |path: &str| {
        let path = path.to_string();
        move |source| RunError::Output { path, source }
    };
    match &cfg.out {
        Some(path) => {
            let file =
                std::fs::File::create(path).map_err(|e| wrap(&path.display().to_string())(csv::Error::from(e)))?;
            crate::record::write_records(file, records).map_err(wrap(&path.display().to_string()))
        }
        None => crate::record::write_records(std::io::stdout().lock(), records).map_err(wrap("<stdout>")),
    }
}
