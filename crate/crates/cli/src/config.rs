//! `key = value` run configuration shared by every subcommand.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use srnmt::data::TaskKind;
use srnmt::model::{CellKind, ModelConfig};
use srnmt::training::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // model
    pub d: usize,
    pub n_layers: usize,
    pub dropout: f64,
    pub cell: CellKind,
    pub layer_norm: bool,
    pub multi_attention: bool,
    pub highway: bool,
    pub input_feeding: bool,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    // training
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub batch_size: usize,
    pub patience: usize,
    /// 0 validates once per epoch.
    pub val_interval: usize,
    pub max_steps: usize,
    pub max_len: usize,
    /// 0 disables clipping.
    pub clip: f64,
    pub carry_adam: bool,
    pub single_stage: bool,
    pub seed: u64,
    // paths
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub valid_src: Option<PathBuf>,
    pub valid_tgt: Option<PathBuf>,
    pub src_vocab: Option<PathBuf>,
    pub tgt_vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    // decoding
    pub beam: usize,
    pub decode_max_len: usize,
    // gradient check
    pub gradcheck_d: usize,
    pub gradcheck_layers: usize,
    pub gradcheck_vocab: usize,
    pub gradcheck_len: usize,
    pub gradcheck_batch: usize,
    pub gradcheck_step: f64,
    pub tolerance: f64,
    /// Test fixture: corrupt the backward rule of this op.
    pub gradcheck_fault: Option<String>,
    // benchmark
    pub bench_kinds: Vec<CellKind>,
    pub bench_layers: Vec<usize>,
    pub bench_widths: Vec<usize>,
    pub bench_seq_lens: Vec<usize>,
    pub bench_batch: usize,
    pub bench_warmups: usize,
    pub bench_reps: usize,
    pub bench_csv: Option<PathBuf>,
    // synthetic data
    pub task: TaskKind,
    pub task_vocab: usize,
    pub task_min_len: usize,
    pub task_max_len: usize,
    pub n_train: usize,
    pub n_valid: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::new(0, 0);
        let t = TrainConfig::default();
        RunConfig {
            d: m.d,
            n_layers: m.n_layers,
            dropout: m.dropout,
            cell: m.cell,
            layer_norm: m.layer_norm,
            multi_attention: m.multi_attention,
            highway: m.highway,
            input_feeding: m.input_feeding,
            src_vocab_size: 30_000,
            tgt_vocab_size: 30_000,
            lr_stage1: t.lr_stage1,
            lr_stage2: t.lr_stage2,
            batch_size: t.batch_size,
            patience: t.patience,
            val_interval: 0,
            max_steps: t.max_steps,
            max_len: t.max_len,
            clip: 0.0,
            carry_adam: t.carry_adam,
            single_stage: t.single_stage,
            seed: 0,
            train_src: None,
            train_tgt: None,
            valid_src: None,
            valid_tgt: None,
            src_vocab: None,
            tgt_vocab: None,
            checkpoint: None,
            log: None,
            input: None,
            output: None,
            beam: 5,
            decode_max_len: 100,
            gradcheck_d: 8,
            gradcheck_layers: 2,
            gradcheck_vocab: 11,
            gradcheck_len: 4,
            gradcheck_batch: 2,
            gradcheck_step: 1e-5,
            tolerance: 1e-4,
            gradcheck_fault: None,
            bench_kinds: vec![CellKind::Sr, CellKind::Lstm],
            bench_layers: vec![1, 2, 3, 4],
            bench_widths: vec![256],
            bench_seq_lens: vec![64],
            bench_batch: 32,
            bench_warmups: 2,
            bench_reps: 5,
            bench_csv: None,
            task: TaskKind::Copy,
            task_vocab: 20,
            task_min_len: 1,
            task_max_len: 12,
            n_train: 10_000,
            n_valid: 1_000,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: Display,
{
    value.parse().map_err(|e| format!("{key}: cannot parse {value:?}: {e}"))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Applies one `key=value` assignment. `Ok(false)` means the key is not
    /// part of the schema.
    fn set(&mut self, key: &str, v: &str) -> Result<bool, String> {
        match key {
            "d" => self.d = parse(key, v)?,
            "n_layers" => self.n_layers = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "cell" => self.cell = parse(key, v)?,
            "layer_norm" => self.layer_norm = parse(key, v)?,
            "multi_attention" => self.multi_attention = parse(key, v)?,
            "highway" => self.highway = parse(key, v)?,
            "input_feeding" => self.input_feeding = parse(key, v)?,
            "src_vocab_size" => self.src_vocab_size = parse(key, v)?,
            "tgt_vocab_size" => self.tgt_vocab_size = parse(key, v)?,
            "lr_stage1" => self.lr_stage1 = parse(key, v)?,
            "lr_stage2" => self.lr_stage2 = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "val_interval" => self.val_interval = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "clip" => self.clip = parse(key, v)?,
            "carry_adam" => self.carry_adam = parse(key, v)?,
            "single_stage" => self.single_stage = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "train_src" => self.train_src = path(v),
            "train_tgt" => self.train_tgt = path(v),
            "valid_src" => self.valid_src = path(v),
            "valid_tgt" => self.valid_tgt = path(v),
            "src_vocab" => self.src_vocab = path(v),
            "tgt_vocab" => self.tgt_vocab = path(v),
            "checkpoint" => self.checkpoint = path(v),
            "log" => self.log = path(v),
            "input" => self.input = path(v),
            "output" => self.output = path(v),
            "beam" => self.beam = parse(key, v)?,
            "decode_max_len" => self.decode_max_len = parse(key, v)?,
            "gradcheck_d" => self.gradcheck_d = parse(key, v)?,
            "gradcheck_layers" => self.gradcheck_layers = parse(key, v)?,
            "gradcheck_vocab" => self.gradcheck_vocab = parse(key, v)?,
            "gradcheck_len" => self.gradcheck_len = parse(key, v)?,
            "gradcheck_batch" => self.gradcheck_batch = parse(key, v)?,
            "gradcheck_step" => self.gradcheck_step = parse(key, v)?,
            "tolerance" => self.tolerance = parse(key, v)?,
            "gradcheck_fault" => self.gradcheck_fault = (!v.is_empty()).then(|| v.to_string()),
            "bench_kinds" => self.bench_kinds = list(key, v)?,
            "bench_layers" => self.bench_layers = list(key, v)?,
            "bench_widths" => self.bench_widths = list(key, v)?,
            "bench_seq_lens" => self.bench_seq_lens = list(key, v)?,
            "bench_batch" => self.bench_batch = parse(key, v)?,
            "bench_warmups" => self.bench_warmups = parse(key, v)?,
            "bench_reps" => self.bench_reps = parse(key, v)?,
            "bench_csv" => self.bench_csv = path(v),
            "task" => self.task = parse(key, v)?,
            "task_vocab" => self.task_vocab = parse(key, v)?,
            "task_min_len" => self.task_min_len = parse(key, v)?,
            "task_max_len" => self.task_max_len = parse(key, v)?,
            "n_train" => self.n_train = parse(key, v)?,
            "n_valid" => self.n_valid = parse(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Applies assignments in order. All unknown keys and malformed values
    /// are reported together.
    pub fn apply<'a>(&mut self, assignments: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<(), CliError> {
        let mut unknown = Vec::new();
        let mut invalid = Vec::new();
        for (k, v) in assignments {
            match self.set(k, v) {
                Ok(true) => {}
                Ok(false) => unknown.push(k.to_string()),
                Err(e) => invalid.push(e),
            }
        }
        let mut problems = Vec::new();
        if !unknown.is_empty() {
            problems.push(format!("unknown keys: {}", unknown.join(", ")));
        }
        problems.extend(invalid);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage(problems.join("; ")))
        }
    }

    /// Parses the file format: one `key = value` per line, `#` starts a
    /// comment.
    pub fn parse_text(text: &str) -> Result<Vec<(String, String)>, CliError> {
        let mut out = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let mut c = RunConfig::default();
        let pairs = Self::parse_text(text)?;
        c.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        Ok(c)
    }

    pub fn model_config(&self, src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
        ModelConfig {
            d: self.d,
            n_layers: self.n_layers,
            src_vocab,
            tgt_vocab,
            dropout: self.dropout,
            cell: self.cell,
            layer_norm: self.layer_norm,
            multi_attention: self.multi_attention,
            highway: self.highway,
            input_feeding: self.input_feeding,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr_stage1: self.lr_stage1,
            lr_stage2: self.lr_stage2,
            batch_size: self.batch_size,
            patience: self.patience,
            val_interval: (self.val_interval > 0).then_some(self.val_interval),
            max_steps: self.max_steps,
            max_len: self.max_len,
            seed: self.seed,
            clip: (self.clip > 0.0).then_some(self.clip),
            carry_adam: self.carry_adam,
            single_stage: self.single_stage,
        }
    }

    /// The value of a required path key, or an error naming it.
    pub fn require<'a>(&self, key: &str, value: &'a Option<PathBuf>) -> Result<&'a PathBuf, CliError> {
        value
            .as_ref()
            .ok_or_else(|| CliError::Usage(format!("missing required key {key}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_format_with_comments() {
        let c = RunConfig::from_text("# tiny\nd = 16\n\nn_layers=3   # deeper\ncell = lstm\nbench_layers = 1, 2\n").unwrap();
        assert_eq!(c.d, 16);
        assert_eq!(c.n_layers, 3);
        assert_eq!(c.cell, CellKind::Lstm);
        assert_eq!(c.bench_layers, vec![1, 2]);
    }

    #[test]
    fn unknown_keys_are_all_reported() {
        let err = RunConfig::from_text("dd = 3\nd = 8\nlearning_rate = 1\n").unwrap_err().to_string();
        assert!(err.contains("dd") && err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn bad_values_name_the_key() {
        let err = RunConfig::from_text("patience = many").unwrap_err().to_string();
        assert!(err.contains("patience"), "{err}");
        assert!(RunConfig::from_text("just words").is_err());
    }

    #[test]
    fn defaults_follow_the_recipe() {
        let c = RunConfig::default();
        let t = c.train_config();
        assert_eq!((t.lr_stage1, t.lr_stage2, t.batch_size), (3e-4, 1.5e-4, 64));
        assert_eq!(t.clip, None);
        assert_eq!(t.val_interval, None);
        assert_eq!(c.model_config(10, 10).d, 500);
    }
}
