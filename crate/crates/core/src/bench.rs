//! Layer throughput measurements on synthetic batches.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::CellKind;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::units::{EncoderLayer, LstmLayer, Regime};

pub const CSV_HEADER: &str = "kind,layers,d,T,B,fwd_tok_s,train_tok_s";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSpec {
    pub kinds: Vec<CellKind>,
    pub layers: Vec<usize>,
    pub widths: Vec<usize>,
    pub seq_lens: Vec<usize>,
    pub batch: usize,
    pub warmups: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            kinds: vec![CellKind::Sr, CellKind::Lstm],
            layers: vec![1, 2, 3, 4],
            widths: vec![256],
            seq_lens: vec![64],
            batch: 32,
            warmups: 2,
            reps: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub kind: CellKind,
    pub layers: usize,
    pub d: usize,
    pub t: usize,
    pub b: usize,
    pub fwd_tok_s: f64,
    pub train_tok_s: f64,
    /// Tape values plus gradients after one training pass.
    pub peak_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub threads: usize,
}

impl BenchReport {
    /// `kind,layers,d,T,B,fwd_tok_s,train_tok_s` lines, header first.
    pub fn csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.1},{:.1}",
                r.kind.as_str(),
                r.layers,
                r.d,
                r.t,
                r.b,
                r.fwd_tok_s,
                r.train_tok_s
            );
        }
        s
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<5} {:>6} {:>5} {:>5} {:>4} {:>12} {:>12} {:>10}\n",
            "kind", "layers", "d", "T", "B", "fwd tok/s", "train tok/s", "peak MiB"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<5} {:>6} {:>5} {:>5} {:>4} {:>12.1} {:>12.1} {:>10.1}",
                r.kind.as_str(),
                r.layers,
                r.d,
                r.t,
                r.b,
                r.fwd_tok_s,
                r.train_tok_s,
                r.peak_bytes as f64 / (1024.0 * 1024.0)
            );
        }
        let _ = writeln!(s, "threads: {}", self.threads);
        s
    }

    pub fn find(&self, kind: CellKind, layers: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.kind == kind && r.layers == layers)
    }
}

enum Stack {
    Sr(Vec<EncoderLayer>),
    Lstm(Vec<LstmLayer>),
}

fn build(kind: CellKind, layers: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<(ParamStore<f32>, Stack)> {
    let mut store = ParamStore::new();
    let stack = match kind {
        CellKind::Sr => Stack::Sr(
            (0..layers)
                .map(|i| EncoderLayer::new(&mut store, &format!("l{i}"), d, true, true, rng))
                .collect::<Result<_>>()?,
        ),
        CellKind::Lstm => Stack::Lstm(
            (0..layers)
                .map(|i| LstmLayer::new(&mut store, &format!("l{i}"), d, d, rng))
                .collect::<Result<_>>()?,
        ),
    };
    Ok((store, stack))
}

/// One pass over the stack; returns the scalar loss when `train` is set.
fn run_once(store: &ParamStore<f32>, stack: &Stack, input: &Tensor<f32>, batch: usize, train: bool) -> Result<Tape<f32>> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, train);
    let mut x: Var = tape.constant(input);
    let regime = Regime::inference();
    match stack {
        Stack::Sr(layers) => {
            for l in layers {
                x = l.forward(&mut tape, &bound, x, batch, None, regime)?;
            }
        }
        Stack::Lstm(layers) => {
            for l in layers {
                let init = l.zero_state(&mut tape, batch);
                x = l.forward(&mut tape, &bound, x, init, batch, regime)?.0;
            }
        }
    }
    if train {
        let loss = tape.sum(x);
        tape.backward(loss)?;
    }
    Ok(tape)
}

/// Mean seconds per pass over `reps` timed runs after `warmups`.
fn time(reps: usize, warmups: usize, mut f: impl FnMut() -> Result<Tape<f32>>) -> Result<(f64, usize)> {
    let mut peak = 0;
    for _ in 0..warmups {
        f()?;
    }
    let start = Instant::now();
    for _ in 0..reps {
        peak = peak.max(f()?.memory_bytes());
    }
    Ok((start.elapsed().as_secs_f64() / reps as f64, peak))
}

/// Measures every combination of kind, layer count, width and sequence
/// length on one thread. Input generation is outside the timed region.
pub fn run_bench(spec: &BenchSpec) -> Result<BenchReport> {
    if spec.reps < 5 {
        return Err(Error::Config(format!("at least 5 timed repetitions are required, got {}", spec.reps)));
    }
    if spec.batch == 0 {
        return Err(Error::Config("batch must be >= 1".into()));
    }
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for &d in &spec.widths {
        for &t in &spec.seq_lens {
            for &layers in &spec.layers {
                for &kind in &spec.kinds {
                    let (store, stack) = build(kind, layers, d, &mut rng)?;
                    let input = Tensor::uniform(&[t * spec.batch, d], 1.0, &mut rng);
                    let tokens = (t * spec.batch) as f64;
                    let (fwd, _) = time(spec.reps, spec.warmups, || run_once(&store, &stack, &input, spec.batch, false))?;
                    let (train, peak) = time(spec.reps, spec.warmups, || run_once(&store, &stack, &input, spec.batch, true))?;
                    rows.push(BenchRow {
                        kind,
                        layers,
                        d,
                        t,
                        b: spec.batch,
                        fwd_tok_s: tokens / fwd,
                        train_tok_s: tokens / train,
                        peak_bytes: peak,
                    });
                }
            }
        }
    }
    Ok(BenchReport { rows, threads: 1 })
}
