use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srnmt::ablation::{ablate, format_table};
use srnmt::bench::{run_bench, BenchSpec};
use srnmt::checkpoint;
use srnmt::data::{read_lines, read_parallel, write_lines, write_parallel, Batch, Batcher, Task, Vocabulary};
use srnmt::gradcheck::check_model;
use srnmt::inference::{exact_match, translate_line};
use srnmt::model::{Model, ModelConfig};
use srnmt::training::{perplexity, train_loop, Status};

use crate::{CliError, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Translate,
    EvalPpl,
    Gradcheck,
    Bench,
    Ablate,
    /// Writes a synthetic parallel corpus to the configured paths.
    Generate,
}

pub fn run(cmd: Command, cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Train => train(cfg, out),
        Command::Translate => translate(cfg, out),
        Command::EvalPpl => eval_ppl(cfg, out),
        Command::Gradcheck => gradcheck(cfg, out),
        Command::Bench => bench(cfg, out),
        Command::Ablate => ablation(cfg, out),
        Command::Generate => generate(cfg, out),
    }
}

fn vocab_path(cfg: &RunConfig, explicit: &Option<PathBuf>, side: &str) -> Result<PathBuf, CliError> {
    if let Some(p) = explicit {
        return Ok(p.clone());
    }
    let ckpt = cfg.require("checkpoint", &cfg.checkpoint)?;
    Ok(PathBuf::from(format!("{}.{side}.vocab", ckpt.display())))
}

fn read_vocab(path: &Path) -> Result<Vocabulary, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(Vocabulary::parse(&text)?)
}

/// Loads both vocabularies, building and writing any that do not exist yet
/// from `pairs`.
fn vocabularies(cfg: &RunConfig, pairs: Option<&[(String, String)]>) -> Result<(Vocabulary, Vocabulary), CliError> {
    let load = |explicit: &Option<PathBuf>, side: &str, size: usize, pick: fn(&(String, String)) -> &str| {
        let path = vocab_path(cfg, explicit, side)?;
        if path.exists() {
            return read_vocab(&path);
        }
        let Some(pairs) = pairs else {
            return Err(CliError::Usage(format!("vocabulary file {} does not exist", path.display())));
        };
        let lines: Vec<&str> = pairs.iter().map(pick).collect();
        let v = Vocabulary::build(&lines, size)?;
        std::fs::write(&path, v.to_file_string())?;
        Ok(v)
    };
    let src = load(&cfg.src_vocab, "src", cfg.src_vocab_size, |p| p.0.as_str())?;
    let tgt = load(&cfg.tgt_vocab, "tgt", cfg.tgt_vocab_size, |p| p.1.as_str())?;
    Ok((src, tgt))
}

fn corpus(cfg: &RunConfig, src_key: &str, src: &Option<PathBuf>, tgt_key: &str, tgt: &Option<PathBuf>) -> Result<Vec<(String, String)>, CliError> {
    let s = cfg.require(src_key, src)?;
    let t = cfg.require(tgt_key, tgt)?;
    Ok(read_parallel(s, t)?)
}

struct Tee<'a> {
    out: &'a mut dyn Write,
    file: Option<File>,
}

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.out.write_all(buf)?;
        if let Some(f) = &mut self.file {
            f.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.out.flush()?;
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }
}

fn load_model(cfg: &RunConfig) -> Result<Model<f32>, CliError> {
    let ckpt = cfg.require("checkpoint", &cfg.checkpoint)?;
    Ok(checkpoint::load(ckpt)?)
}

fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let ckpt = cfg.require("checkpoint", &cfg.checkpoint)?.clone();
    let train_pairs = corpus(cfg, "train_src", &cfg.train_src, "train_tgt", &cfg.train_tgt)?;
    let valid_pairs = corpus(cfg, "valid_src", &cfg.valid_src, "valid_tgt", &cfg.valid_tgt)?;
    let tc = cfg.train_config();
    tc.validate()?;
    let (sv, tv) = vocabularies(cfg, Some(&train_pairs))?;
    let train = Batcher::new(&train_pairs, &sv, &tv, tc.batch_size, tc.max_len, tc.seed)?;
    let valid = Batcher::new(&valid_pairs, &sv, &tv, tc.batch_size, tc.max_len, tc.seed)?.sequential();
    let model = Model::<f32>::new(cfg.model_config(sv.len(), tv.len()))?;
    let file = cfg.log.as_ref().map(File::create).transpose()?;
    let mut log = Tee { out, file };
    let outcome = train_loop(model, &train, &valid, &tc, &mut log)?;
    checkpoint::save(&outcome.best, &ckpt)?;
    writeln!(
        log,
        "status={} best_ppl={:.6} steps={} checkpoint={}",
        outcome.status.as_str().replace(' ', "_"),
        outcome.best_ppl,
        outcome.steps,
        ckpt.display()
    )?;
    if outcome.status == Status::FailedToConverge {
        return Err(CliError::Numerical(format!("failed to converge after {} steps", outcome.steps)));
    }
    Ok(())
}

fn translate(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let model = load_model(cfg)?;
    let (sv, tv) = vocabularies(cfg, None)?;
    let input = cfg.require("input", &cfg.input)?;
    let lines = read_lines(input)?;
    let translations = lines
        .iter()
        .map(|l| translate_line(&model, &sv, &tv, l, cfg.beam, cfg.decode_max_len))
        .collect::<srnmt::Result<Vec<_>>>()?;
    match &cfg.output {
        Some(path) => write_lines(path, &translations)?,
        None => {
            for t in &translations {
                writeln!(out, "{t}")?;
            }
        }
    }
    Ok(())
}

fn eval_ppl(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let model = load_model(cfg)?;
    let (sv, tv) = vocabularies(cfg, None)?;
    let pairs = corpus(cfg, "valid_src", &cfg.valid_src, "valid_tgt", &cfg.valid_tgt)?;
    let batcher = Batcher::new(&pairs, &sv, &tv, cfg.batch_size, cfg.max_len, cfg.seed)?;
    let ppl = perplexity(&model, &batcher.sequential())?;
    let em = exact_match(&model, batcher.examples(), cfg.decode_max_len)?;
    writeln!(out, "ppl={ppl:.6} exact_match={em:.4} pairs={}", batcher.len())?;
    Ok(())
}

const FAULT_OPS: [&str; 17] = [
    "matmul", "binary", "unary", "scale", "add_bias", "layer_norm", "softmax", "slice", "concat", "dropout", "sum",
    "reshape", "gather", "scan", "pair_scores", "attend", "cross_entropy",
];

fn gradcheck(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    if cfg.gradcheck_d > 16 || cfg.gradcheck_len > 5 {
        return Err(CliError::Usage(format!(
            "gradient checks need gradcheck_d <= 16 and gradcheck_len <= 5, got {} and {}",
            cfg.gradcheck_d, cfg.gradcheck_len
        )));
    }
    let fault = match &cfg.gradcheck_fault {
        None => None,
        Some(name) => Some((
            *FAULT_OPS
                .iter()
                .find(|&&op| op == name)
                .ok_or_else(|| CliError::Usage(format!("gradcheck_fault: unknown op {name:?}")))?,
            1.5,
        )),
    };
    let mc = ModelConfig {
        d: cfg.gradcheck_d,
        n_layers: cfg.gradcheck_layers,
        dropout: 0.0,
        ..cfg.model_config(cfg.gradcheck_vocab, cfg.gradcheck_vocab)
    };
    let mut model = Model::<f64>::new(mc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Move every parameter off its initializer so that zero-initialized
    // ones (attention vectors, biases) are exercised too.
    model.params_mut().perturb(0.3, &mut rng);
    let vocab = cfg.gradcheck_vocab as u32;
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = (0..cfg.gradcheck_batch.max(1))
        .map(|_| {
            let mut seq = || (0..cfg.gradcheck_len).map(|_| rng.gen_range(4..vocab)).collect::<Vec<u32>>();
            (seq(), seq())
        })
        .collect();
    let batch = Batch::from_pairs(&pairs)?;
    let reports = check_model(&model, &batch, cfg.gradcheck_step, fault)?;
    for r in &reports {
        let verdict = if r.max_rel_error <= cfg.tolerance { "ok" } else { "FAIL" };
        writeln!(out, "{:<32} {:>6} {:>12.3e} {verdict}", r.name, r.elements, r.max_rel_error)?;
    }
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("models have parameters");
    writeln!(out, "worst={} max_rel_error={:.3e} tolerance={:e}", worst.name, worst.max_rel_error, cfg.tolerance)?;
    if worst.max_rel_error > cfg.tolerance || !worst.max_rel_error.is_finite() {
        return Err(CliError::Numerical(format!(
            "gradient check failed: {} has relative error {:.3e} > {:e}",
            worst.name, worst.max_rel_error, cfg.tolerance
        )));
    }
    Ok(())
}

fn bench(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let spec = BenchSpec {
        kinds: cfg.bench_kinds.clone(),
        layers: cfg.bench_layers.clone(),
        widths: cfg.bench_widths.clone(),
        seq_lens: cfg.bench_seq_lens.clone(),
        batch: cfg.bench_batch,
        warmups: cfg.bench_warmups,
        reps: cfg.bench_reps,
        seed: cfg.seed,
    };
    let report = run_bench(&spec)?;
    write!(out, "{}", report.table())?;
    write!(out, "{}", report.csv())?;
    if let Some(p) = &cfg.bench_csv {
        std::fs::write(p, report.csv())?;
    }
    Ok(())
}

fn ablation(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let train_pairs = corpus(cfg, "train_src", &cfg.train_src, "train_tgt", &cfg.train_tgt)?;
    let valid_pairs = corpus(cfg, "valid_src", &cfg.valid_src, "valid_tgt", &cfg.valid_tgt)?;
    let tc = cfg.train_config();
    tc.validate()?;
    let build = |pick: fn(&(String, String)) -> &str, size| {
        let lines: Vec<&str> = train_pairs.iter().map(pick).collect();
        Vocabulary::build(&lines, size)
    };
    let sv = build(|p| p.0.as_str(), cfg.src_vocab_size)?;
    let tv = build(|p| p.1.as_str(), cfg.tgt_vocab_size)?;
    let train = Batcher::new(&train_pairs, &sv, &tv, tc.batch_size, tc.max_len, tc.seed)?;
    let valid = Batcher::new(&valid_pairs, &sv, &tv, tc.batch_size, tc.max_len, tc.seed)?.sequential();
    let base = cfg.model_config(sv.len(), tv.len());
    let rows = ablate(&base, &train, &valid, &tc, &mut |r| {
        let _ = writeln!(out, "row={} params={} ppl={}", r.flags.label().replace(' ', ""), r.params, r.outcome().replace(' ', "_"));
    })?;
    write!(out, "{}", format_table(&rows))?;
    Ok(())
}

fn generate(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let task = Task::new(cfg.task, cfg.task_vocab, cfg.task_min_len, cfg.task_max_len, cfg.seed)?;
    let train = task.sample(cfg.n_train, cfg.seed.wrapping_add(1));
    let valid = task.sample(cfg.n_valid, cfg.seed.wrapping_add(2));
    write_parallel(
        cfg.require("train_src", &cfg.train_src)?,
        cfg.require("train_tgt", &cfg.train_tgt)?,
        &train,
    )?;
    write_parallel(
        cfg.require("valid_src", &cfg.valid_src)?,
        cfg.require("valid_tgt", &cfg.valid_tgt)?,
        &valid,
    )?;
    writeln!(out, "train_pairs={} valid_pairs={}", train.len(), valid.len())?;
    Ok(())
}
