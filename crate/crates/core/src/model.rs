//! Embeddings, encoder/decoder stacks and the output softmax layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{TokenBatch, PAD};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::units::{DecoderLayer, EncoderLayer, LayerMemory, LstmLayer, LstmState, MlpAttention, Regime};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Sr,
    Lstm,
}

impl CellKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Sr => "sr",
            CellKind::Lstm => "lstm",
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sr" => Ok(CellKind::Sr),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(Error::Config(format!("unknown cell kind {other:?} (expected sr or lstm)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    /// Layer count of both the encoder and the decoder.
    pub n_layers: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub dropout: f64,
    pub cell: CellKind,
    pub layer_norm: bool,
    /// Attention in every decoder layer; otherwise only in the last one.
    pub multi_attention: bool,
    pub highway: bool,
    /// LSTM baseline only: feed the previous attentional output back into
    /// the first decoder layer.
    pub input_feeding: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            d: 500,
            n_layers: 1,
            src_vocab,
            tgt_vocab,
            dropout: 0.1,
            cell: CellKind::Sr,
            layer_norm: true,
            multi_attention: true,
            highway: true,
            input_feeding: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || self.d % 2 != 0 {
            return Err(Error::Config(format!("d must be even and >= 2, got {}", self.d)));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0,1), got {}", self.dropout)));
        }
        if self.src_vocab < 5 || self.tgt_vocab < 5 {
            return Err(Error::Config("vocabularies need the 4 reserved ids plus at least one token".into()));
        }
        Ok(())
    }

    /// Whether decoder layer `i` carries an attention block.
    pub fn layer_attends(&self, i: usize) -> bool {
        self.multi_attention || i + 1 == self.n_layers
    }
}

/// Closed-form parameter count of the model `config` describes.
pub fn parameter_count(config: &ModelConfig) -> usize {
    let d = config.d;
    let embed = (config.src_vocab + config.tgt_vocab) * d;
    let output = d * config.tgt_vocab + config.tgt_vocab;
    let layers: usize = match config.cell {
        CellKind::Sr => {
            let (enc, _) = sr_layer_counts(config, 0);
            (0..config.n_layers).map(|i| enc + sr_layer_counts(config, i).1).sum()
        }
        CellKind::Lstm => {
            let lstm = |d_in: usize| d_in * 4 * d + d * 4 * d + 4 * d;
            let first_in = if config.input_feeding { 2 * d } else { d };
            config.n_layers * lstm(d)
                + lstm(first_in)
                + (config.n_layers - 1) * lstm(d)
                + 2 * d * d + d // attention w_as, w_ah, v
                + 2 * d * d // w_s, w_c
        }
    };
    embed + output + layers
}

/// `(encoder layer, decoder layer i)` parameter counts for the SR cell.
fn sr_layer_counts(config: &ModelConfig, i: usize) -> (usize, usize) {
    let d = config.d;
    let ln = usize::from(config.layer_norm);
    let fused = if config.highway { 3 * d } else { 2 * d };
    let encoder = d * fused + ln * 2 * fused;
    let mut decoder = d * fused + ln * 2 * fused + d * d + ln * 2 * d;
    if config.layer_attends(i) {
        decoder += d * d + ln * 2 * d; // w_c
        decoder += 2 * d * d + ln * 4 * d + d; // w_as, w_ah, v
    }
    (encoder, decoder)
}

#[derive(Clone, Debug)]
enum Encoder {
    Sr(Vec<EncoderLayer>),
    Lstm(Vec<LstmLayer>),
}

#[derive(Clone, Debug)]
enum Decoder {
    Sr(Vec<DecoderLayer>),
    Lstm {
        layers: Vec<LstmLayer>,
        attention: MlpAttention,
        w_s: ParamId,
        w_c: ParamId,
    },
}

#[derive(Clone, Debug)]
pub struct Model<F> {
    config: ModelConfig,
    params: ParamStore<F>,
    src_embed: ParamId,
    tgt_embed: ParamId,
    encoder: Encoder,
    decoder: Decoder,
    out_w: ParamId,
    out_b: ParamId,
}

impl<F: Scalar> Model<F> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let d = config.d;
        let src_embed = p.add_matrix("src_embed", config.src_vocab, d, &mut rng)?;
        let tgt_embed = p.add_matrix("tgt_embed", config.tgt_vocab, d, &mut rng)?;
        let (encoder, decoder) = match config.cell {
            CellKind::Sr => {
                let enc = (0..config.n_layers)
                    .map(|i| EncoderLayer::new(&mut p, &format!("encoder.{i}"), d, config.layer_norm, config.highway, &mut rng))
                    .collect::<Result<_>>()?;
                let dec = (0..config.n_layers)
                    .map(|i| {
                        DecoderLayer::new(
                            &mut p,
                            &format!("decoder.{i}"),
                            d,
                            config.layer_norm,
                            config.layer_attends(i),
                            config.highway,
                            &mut rng,
                        )
                    })
                    .collect::<Result<_>>()?;
                (Encoder::Sr(enc), Decoder::Sr(dec))
            }
            CellKind::Lstm => {
                let enc = (0..config.n_layers)
                    .map(|i| LstmLayer::new(&mut p, &format!("encoder.{i}"), d, d, &mut rng))
                    .collect::<Result<_>>()?;
                let layers = (0..config.n_layers)
                    .map(|i| {
                        let d_in = if i == 0 && config.input_feeding { 2 * d } else { d };
                        LstmLayer::new(&mut p, &format!("decoder.{i}"), d_in, d, &mut rng)
                    })
                    .collect::<Result<_>>()?;
                let attention = MlpAttention::new(&mut p, "decoder.attn", d, false, &mut rng)?;
                let w_s = p.add_matrix("decoder.w_s", d, d, &mut rng)?;
                let w_c = p.add_matrix("decoder.w_c", d, d, &mut rng)?;
                (Encoder::Lstm(enc), Decoder::Lstm { layers, attention, w_s, w_c })
            }
        };
        let out_w = p.add_matrix("output.w", d, config.tgt_vocab, &mut rng)?;
        let out_b = p.add("output.b", Tensor::zeros(&[config.tgt_vocab]))?;
        Ok(Model {
            config,
            params: p,
            src_embed,
            tgt_embed,
            encoder,
            decoder,
            out_w,
            out_b,
        })
    }

    /// Builds the structure for `config` and fills it with `tensors`, which
    /// must match the registered names and shapes one-for-one.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor<F>)>) -> Result<Self> {
        let mut model = Self::new(config)?;
        if tensors.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for (name, t) in tensors {
            let id = model
                .params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if model.params.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
            }
            *model.params.get_mut(id) = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.element_count()
    }

    /// Number of attention parameter bundles (one `v` vector each).
    pub fn attention_count(&self) -> usize {
        match &self.decoder {
            Decoder::Sr(layers) => layers.iter().filter(|l| l.attention.is_some()).count(),
            Decoder::Lstm { .. } => 1,
        }
    }

    pub fn encoder_layers(&self) -> Option<&[EncoderLayer]> {
        match &self.encoder {
            Encoder::Sr(l) => Some(l),
            Encoder::Lstm(_) => None,
        }
    }

    pub fn decoder_layers(&self) -> Option<&[DecoderLayer]> {
        match &self.decoder {
            Decoder::Sr(l) => Some(l),
            Decoder::Lstm { .. } => None,
        }
    }
}

/// Encoder output plus each decoder layer's precomputed attention keys.
#[derive(Clone, Debug)]
pub struct Memory {
    pub states: Var,
    pub keys: Vec<Option<Var>>,
    pub steps: usize,
    pub batch: usize,
    pub valid: Vec<bool>,
}

/// Per-hypothesis recurrent state carried between incremental steps.
#[derive(Clone, Debug)]
pub enum DecodeState {
    Sr { scans: Vec<Var> },
    Lstm { layers: Vec<LstmState>, feed: Option<Var> },
}

/// One forward (and optionally backward) evaluation of a model on a tape.
pub struct Pass<'m, F> {
    pub tape: Tape<F>,
    model: &'m Model<F>,
    bound: Bound,
    regime: Regime,
}

impl<'m, F: Scalar> Pass<'m, F> {
    /// Training pass: parameters require gradients, dropout at the model's
    /// rate with masks drawn from `seed`.
    pub fn train(model: &'m Model<F>, seed: u64) -> Self {
        Self::with_regime(model, Regime::train(model.config.dropout), true, seed)
    }

    /// Inference pass: no gradients, no dropout.
    pub fn eval(model: &'m Model<F>) -> Self {
        Self::with_regime(model, Regime::inference(), false, 0)
    }

    pub fn with_regime(model: &'m Model<F>, regime: Regime, trainable: bool, seed: u64) -> Self {
        let mut tape = Tape::with_seed(seed);
        let bound = model.params.bind(&mut tape, trainable);
        Pass { tape, model, bound, regime }
    }

    pub fn bound(&self) -> &Bound {
        &self.bound
    }

    fn embed(&mut self, table: ParamId, ids: &[u32], vocab: usize) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(Error::Vocabulary { id: bad, size: vocab });
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        self.tape.gather_rows(self.bound[table], &idx)
    }

    pub fn encode(&mut self, src: &TokenBatch) -> Result<Memory> {
        let m = self.model;
        let mut x = self.embed(m.src_embed, &src.ids, m.config.src_vocab)?;
        match &m.encoder {
            Encoder::Sr(layers) => {
                for layer in layers {
                    x = layer.forward(&mut self.tape, &self.bound, x, src.batch, Some(&src.valid), self.regime)?;
                }
            }
            Encoder::Lstm(layers) => {
                for layer in layers {
                    let init = layer.zero_state(&mut self.tape, src.batch);
                    x = layer.forward(&mut self.tape, &self.bound, x, init, src.batch, self.regime)?.0;
                }
            }
        }
        let keys = match &m.decoder {
            Decoder::Sr(layers) => layers
                .iter()
                .map(|l| {
                    l.attention
                        .as_ref()
                        .map(|a| a.mlp.keys(&mut self.tape, &self.bound, x, self.regime))
                        .transpose()
                })
                .collect::<Result<_>>()?,
            Decoder::Lstm { attention, .. } => vec![Some(attention.keys(&mut self.tape, &self.bound, x, self.regime)?)],
        };
        Ok(Memory {
            states: x,
            keys,
            steps: src.steps,
            batch: src.batch,
            valid: src.valid.clone(),
        })
    }

    fn layer_memory<'a>(mem: &'a Memory, i: usize) -> Option<LayerMemory<'a>> {
        mem.keys[i].map(|keys| LayerMemory {
            states: mem.states,
            keys,
            batch: mem.batch,
            valid: &mem.valid,
        })
    }

    fn output(&mut self, top: Var) -> Result<Var> {
        let x = self.tape.dropout(top, self.regime.dropout, self.regime.training)?;
        let logits = self.tape.matmul(x, self.bound[self.model.out_w])?;
        self.tape.add_bias(logits, self.bound[self.model.out_b])
    }

    /// Luong-style combination `tanh(h W_s + c W_c)` for the LSTM baseline.
    fn lstm_combine(&mut self, top: Var, mem: &Memory, batch: usize) -> Result<Var> {
        let Decoder::Lstm { attention, w_s, w_c, .. } = &self.model.decoder else {
            unreachable!("lstm decoder");
        };
        let keys = mem.keys[0].expect("lstm attention keys");
        let att = attention.attend(&mut self.tape, &self.bound, top, keys, mem.states, batch, &mem.valid, self.regime)?;
        let hs = crate::units::project(&mut self.tape, &self.bound, top, *w_s, None, self.regime)?;
        let cs = crate::units::project(&mut self.tape, &self.bound, att.context, *w_c, None, self.regime)?;
        let sum = self.tape.add(hs, cs)?;
        Ok(self.tape.tanh(sum))
    }

    /// Teacher-forced logits, `(T·B)×tgt_vocab` time-major, for BOS-prefixed
    /// gold inputs.
    pub fn decode_train(&mut self, tgt_in: &TokenBatch, mem: &Memory) -> Result<Var> {
        if tgt_in.batch != mem.batch {
            return Err(Error::Contract(format!("target batch {} vs source batch {}", tgt_in.batch, mem.batch)));
        }
        let m = self.model;
        let mut y = self.embed(m.tgt_embed, &tgt_in.ids, m.config.tgt_vocab)?;
        let top = match &m.decoder {
            Decoder::Sr(layers) => {
                for (i, layer) in layers.iter().enumerate() {
                    let lm = Self::layer_memory(mem, i);
                    y = layer.forward(&mut self.tape, &self.bound, y, lm, tgt_in.batch, self.regime)?.output;
                }
                y
            }
            Decoder::Lstm { layers, .. } if !m.config.input_feeding => {
                for layer in layers {
                    let init = layer.zero_state(&mut self.tape, tgt_in.batch);
                    y = layer.forward(&mut self.tape, &self.bound, y, init, tgt_in.batch, self.regime)?.0;
                }
                self.lstm_combine(y, mem, tgt_in.batch)?
            }
            Decoder::Lstm { .. } => {
                let mut state = self.begin_decode(mem);
                let mut outs = Vec::with_capacity(tgt_in.steps);
                for t in 0..tgt_in.steps {
                    let y_t = self.tape.slice(y, 0, t * tgt_in.batch, tgt_in.batch)?;
                    let (o, next) = self.lstm_step(y_t, &state, mem)?;
                    outs.push(o);
                    state = next;
                }
                if outs.len() == 1 {
                    outs[0]
                } else {
                    self.tape.concat(&outs, 0)?
                }
            }
        };
        self.output(top)
    }

    /// Mean token NLL of `logits` against time-major gold ids; padding is
    /// ignored.
    pub fn nll(&mut self, logits: Var, gold: &TokenBatch) -> Result<Var> {
        self.tape.cross_entropy(logits, &gold.ids, PAD)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradients aligned with the model's parameter ids; zero where no
    /// gradient reached a parameter.
    pub fn param_grads(&self) -> Vec<Tensor<F>> {
        self.model
            .params
            .ids()
            .map(|id| {
                self.tape
                    .grad(self.bound[id])
                    .unwrap_or_else(|| Tensor::zeros(self.model.params.get(id).shape()))
            })
            .collect()
    }

    /// Zero recurrent state for `mem.batch` hypotheses.
    pub fn begin_decode(&mut self, mem: &Memory) -> DecodeState {
        let d = self.model.config.d;
        match &self.model.decoder {
            Decoder::Sr(layers) => {
                let z = self.tape.constant(&Tensor::zeros(&[mem.batch, d]));
                DecodeState::Sr { scans: vec![z; layers.len()] }
            }
            Decoder::Lstm { layers, .. } => {
                let states = layers.iter().map(|l| l.zero_state(&mut self.tape, mem.batch)).collect();
                let feed = self
                    .model
                    .config
                    .input_feeding
                    .then(|| self.tape.constant(&Tensor::zeros(&[mem.batch, d])));
                DecodeState::Lstm { layers: states, feed }
            }
        }
    }

    fn lstm_step(&mut self, y_t: Var, state: &DecodeState, mem: &Memory) -> Result<(Var, DecodeState)> {
        let DecodeState::Lstm { layers: states, feed } = state else {
            return Err(Error::Contract("decode state does not match the cell kind".into()));
        };
        let Decoder::Lstm { layers, .. } = &self.model.decoder else {
            unreachable!("lstm decoder");
        };
        let batch = self.tape.shape(y_t)[0];
        let mut x = match feed {
            Some(f) => self.tape.concat(&[y_t, *f], 1)?,
            None => y_t,
        };
        let mut next = Vec::with_capacity(layers.len());
        for (layer, st) in layers.iter().zip(states) {
            let s = layer.step(&mut self.tape, &self.bound, x, *st, self.regime)?;
            x = s.h;
            next.push(s);
        }
        let o = self.lstm_combine(x, mem, batch)?;
        let feed = feed.map(|_| o);
        Ok((o, DecodeState::Lstm { layers: next, feed }))
    }

    /// Feeds one token per hypothesis; returns `B×tgt_vocab` logits and the
    /// advanced state.
    pub fn decode_step(&mut self, tokens: &[u32], state: &DecodeState, mem: &Memory) -> Result<(Var, DecodeState)> {
        let m = self.model;
        let y = self.embed(m.tgt_embed, tokens, m.config.tgt_vocab)?;
        let (top, next) = match (&m.decoder, state) {
            (Decoder::Sr(layers), DecodeState::Sr { scans }) => {
                let mut y = y;
                let mut next = Vec::with_capacity(layers.len());
                for (i, layer) in layers.iter().enumerate() {
                    let lm = Self::layer_memory(mem, i);
                    let (s, scan) = layer.step(&mut self.tape, &self.bound, y, scans[i], lm, self.regime)?;
                    next.push(scan);
                    y = s;
                }
                (y, DecodeState::Sr { scans: next })
            }
            (Decoder::Lstm { .. }, DecodeState::Lstm { .. }) => self.lstm_step(y, state, mem)?,
            _ => return Err(Error::Contract("decode state does not match the cell kind".into())),
        };
        Ok((self.output(top)?, next))
    }

    /// Replicates a single-sentence memory for `k` hypotheses.
    pub fn expand_memory(&mut self, mem: &Memory, k: usize) -> Result<Memory> {
        if mem.batch != 1 {
            return Err(Error::Contract("only single-sentence memories can be expanded".into()));
        }
        let idx: Vec<usize> = (0..mem.steps).flat_map(|t| std::iter::repeat(t).take(k)).collect();
        let states = self.tape.gather_rows(mem.states, &idx)?;
        let keys = mem
            .keys
            .iter()
            .map(|k| k.map(|v| self.tape.gather_rows(v, &idx)).transpose())
            .collect::<Result<_>>()?;
        let valid = idx.iter().map(|&t| mem.valid[t]).collect();
        Ok(Memory { states, keys, steps: mem.steps, batch: k, valid })
    }

    /// Selects hypothesis rows `idx` from every state tensor.
    pub fn reorder(&mut self, state: &DecodeState, idx: &[usize]) -> Result<DecodeState> {
        let mut pick = |v: Var| self.tape.gather_rows(v, idx);
        Ok(match state {
            DecodeState::Sr { scans } => DecodeState::Sr {
                scans: scans.iter().map(|&v| pick(v)).collect::<Result<_>>()?,
            },
            DecodeState::Lstm { layers, feed } => DecodeState::Lstm {
                layers: layers
                    .iter()
                    .map(|s| Ok(LstmState { h: pick(s.h)?, c: pick(s.c)? }))
                    .collect::<Result<_>>()?,
                feed: feed.map(&mut pick).transpose()?,
            },
        })
    }
}

#[cfg(test)]
mod tests;
