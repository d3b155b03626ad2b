//! Sequence encoders over linearized fact graphs.
//!
//! Each fact becomes an S P O token triple; the query becomes an S O pair.
//! One encoder embeds both sequences and the classifier reads
//! `W [emb(facts) ‖ emb(query)] + b`.

mod tokens;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use relchain_tensor::{Init, ParamId, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use tokens::{entity_token, linearize, relation_token, TokenBatch, PAD, VOCAB_SIZE};

use crate::batch::{Batch, NUM_CLASSES};
use crate::error::{Error, Result};

/// Longest sequence the attention encoder has position embeddings for.
pub const MAX_POSITIONS: usize = 128;
pub const MHA_HEADS: usize = 2;
pub const CNN_WIDTHS: [usize; 2] = [2, 3];
const MASK_FILL: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeqVariant {
    Rnn,
    Lstm,
    Gru,
    BiRnn,
    BiLstm,
    BiGru,
    Cnn,
    Cnnh,
    Mha,
    Boe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Cell {
    Rnn,
    Lstm,
    Gru,
}

impl Cell {
    fn gates(self) -> usize {
        match self {
            Cell::Rnn => 1,
            Cell::Lstm => 4,
            Cell::Gru => 3,
        }
    }
}

impl SeqVariant {
    pub const ALL: [SeqVariant; 10] = [
        SeqVariant::Rnn,
        SeqVariant::Lstm,
        SeqVariant::Gru,
        SeqVariant::BiRnn,
        SeqVariant::BiLstm,
        SeqVariant::BiGru,
        SeqVariant::Cnn,
        SeqVariant::Cnnh,
        SeqVariant::Mha,
        SeqVariant::Boe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SeqVariant::Rnn => "rnn",
            SeqVariant::Lstm => "lstm",
            SeqVariant::Gru => "gru",
            SeqVariant::BiRnn => "bi-rnn",
            SeqVariant::BiLstm => "bi-lstm",
            SeqVariant::BiGru => "bi-gru",
            SeqVariant::Cnn => "cnn",
            SeqVariant::Cnnh => "cnnh",
            SeqVariant::Mha => "mha",
            SeqVariant::Boe => "boe",
        }
    }

    fn cell(self) -> Option<(Cell, bool)> {
        match self {
            SeqVariant::Rnn => Some((Cell::Rnn, false)),
            SeqVariant::Lstm => Some((Cell::Lstm, false)),
            SeqVariant::Gru => Some((Cell::Gru, false)),
            SeqVariant::BiRnn => Some((Cell::Rnn, true)),
            SeqVariant::BiLstm => Some((Cell::Lstm, true)),
            SeqVariant::BiGru => Some((Cell::Gru, true)),
            _ => None,
        }
    }

    pub fn is_recurrent(self) -> bool {
        self.cell().is_some()
    }
}

impl fmt::Display for SeqVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SeqVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SeqVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sequence variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeqConfig {
    pub variant: SeqVariant,
    /// Recurrent state width, and CNN filter count.
    pub hidden: usize,
    /// Token embedding width; defaults to `hidden`.
    pub emb_dim: Option<usize>,
}

impl Default for SeqConfig {
    fn default() -> Self {
        SeqConfig {
            variant: SeqVariant::Gru,
            hidden: 100,
            emb_dim: None,
        }
    }
}

impl SeqConfig {
    pub fn new(variant: SeqVariant, hidden: usize) -> SeqConfig {
        SeqConfig {
            variant,
            hidden,
            emb_dim: None,
        }
    }

    pub fn emb_dim(&self) -> usize {
        self.emb_dim.unwrap_or(self.hidden)
    }

    /// Width of one encoded sequence.
    pub fn output_width(&self) -> usize {
        match self.variant {
            SeqVariant::BiRnn | SeqVariant::BiLstm | SeqVariant::BiGru => 2 * self.hidden,
            SeqVariant::Mha | SeqVariant::Boe => self.emb_dim(),
            _ => self.hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.emb_dim() == 0 {
            return Err(Error::Config("hidden and emb_dim must be positive".into()));
        }
        if self.variant == SeqVariant::Mha && !self.emb_dim().is_multiple_of(MHA_HEADS) {
            return Err(Error::Config(format!(
                "mha emb_dim {} is not divisible by {MHA_HEADS} heads",
                self.emb_dim()
            )));
        }
        if matches!(self.variant, SeqVariant::Cnn | SeqVariant::Cnnh) && self.hidden < CNN_WIDTHS.len() {
            return Err(Error::Config("cnn needs at least one filter per width".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Recurrent {
    /// `[E, G*H]`, `[H, G*H]`, `[G*H]`, `[G*H]`.
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
}

#[derive(Clone, Debug)]
struct Conv {
    width: usize,
    /// `[width*E, F]` and `[F]`.
    kernel: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Attention {
    pos: ParamId,
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
    o_b: ParamId,
    ff1: ParamId,
    ff1_b: ParamId,
    ff2: ParamId,
    ff2_b: ParamId,
}

#[derive(Clone, Debug)]
enum Encoder {
    Recurrent { cell: Cell, dirs: Vec<Recurrent> },
    Conv { convs: Vec<Conv>, highway: Option<[ParamId; 4]> },
    Attention(Attention),
    Bag,
}

/// Linearized-graph classifier.
#[derive(Clone, Debug)]
pub struct SeqModel {
    config: SeqConfig,
    params: ParamStore,
    embedding: ParamId,
    encoder: Encoder,
    out_w: ParamId,
    out_b: ParamId,
}

impl SeqModel {
    pub fn new(config: SeqConfig, rng: &mut impl Rng) -> Result<SeqModel> {
        config.validate()?;
        let (e, h) = (config.emb_dim(), config.hidden);
        let w = |fan_in| Init::ScaledUniform { fan_in };
        let mut p = ParamStore::new();
        let embedding = p.add("embedding", &[VOCAB_SIZE, e], Init::Uniform(1.0), rng)?;
        let encoder = if let Some((cell, bi)) = config.variant.cell() {
            let g = cell.gates() * h;
            let names: &[&str] = if bi { &["fwd", "bwd"] } else { &["fwd"] };
            let mut dirs = Vec::new();
            for d in names {
                dirs.push(Recurrent {
                    w_ih: p.add(format!("{d}.w_ih"), &[e, g], w(h), rng)?,
                    w_hh: p.add(format!("{d}.w_hh"), &[h, g], w(h), rng)?,
                    b_ih: p.add(format!("{d}.b_ih"), &[g], w(h), rng)?,
                    b_hh: p.add(format!("{d}.b_hh"), &[g], w(h), rng)?,
                });
            }
            Encoder::Recurrent { cell, dirs }
        } else {
            match config.variant {
                SeqVariant::Cnn | SeqVariant::Cnnh => {
                    // filters split as evenly as possible across widths
                    let n = CNN_WIDTHS.len();
                    let mut convs = Vec::new();
                    for (i, &width) in CNN_WIDTHS.iter().enumerate() {
                        let f = h / n + usize::from(i < h % n);
                        convs.push(Conv {
                            width,
                            kernel: p.add(format!("conv{width}.w"), &[width * e, f], w(width * e), rng)?,
                            bias: p.add(format!("conv{width}.b"), &[f], Init::Zeros, rng)?,
                        });
                    }
                    // gate starts biased toward carrying the input through
                    let highway = if config.variant == SeqVariant::Cnnh {
                        Some([
                            p.add("highway.gate.w", &[h, h], w(h), rng)?,
                            p.add("highway.gate.b", &[h], Init::Constant(-1.0), rng)?,
                            p.add("highway.proj.w", &[h, h], w(h), rng)?,
                            p.add("highway.proj.b", &[h], w(h), rng)?,
                        ])
                    } else {
                        None
                    };
                    Encoder::Conv { convs, highway }
                }
                SeqVariant::Mha => Encoder::Attention(Attention {
                    pos: p.add("mha.pos", &[MAX_POSITIONS, e], Init::Uniform(0.1), rng)?,
                    q: p.add("mha.q", &[e, e], w(e), rng)?,
                    k: p.add("mha.k", &[e, e], w(e), rng)?,
                    v: p.add("mha.v", &[e, e], w(e), rng)?,
                    o: p.add("mha.o", &[e, e], w(e), rng)?,
                    o_b: p.add("mha.o_b", &[e], Init::Zeros, rng)?,
                    ff1: p.add("mha.ff1", &[e, e], w(e), rng)?,
                    ff1_b: p.add("mha.ff1_b", &[e], Init::Zeros, rng)?,
                    ff2: p.add("mha.ff2", &[e, e], w(e), rng)?,
                    ff2_b: p.add("mha.ff2_b", &[e], Init::Zeros, rng)?,
                }),
                _ => Encoder::Bag,
            }
        };
        let out = config.output_width();
        let out_w = p.add("classifier.w", &[2 * out, NUM_CLASSES], w(2 * out), rng)?;
        let out_b = p.add("classifier.b", &[NUM_CLASSES], Init::Zeros, rng)?;
        Ok(SeqModel {
            config,
            params: p,
            embedding,
            encoder,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &SeqConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn classifier_weight(&self) -> ParamId {
        self.out_w
    }

    /// Encodes `B` padded sequences (`tokens` is `[B, max_len]` row-major)
    /// into `[B, output_width]`.
    pub fn encode_seq(&self, tape: &mut Tape, tokens: &[usize], lengths: &[usize]) -> Result<Var> {
        self.encode_with(tape, &self.params, tokens, lengths)
    }

    fn encode_with(&self, tape: &mut Tape, p: &ParamStore, tokens: &[usize], lengths: &[usize]) -> Result<Var> {
        let b = lengths.len();
        if b == 0 || !tokens.len().is_multiple_of(b) {
            return Err(Error::Batch(format!(
                "{} tokens do not split into {b} rows",
                tokens.len()
            )));
        }
        let l = tokens.len() / b;
        if let Some(&t) = tokens.iter().find(|&&t| t >= VOCAB_SIZE) {
            return Err(Error::Batch(format!("token {t} outside vocabulary of {VOCAB_SIZE}")));
        }
        if let Some(&n) = lengths.iter().find(|&&n| n == 0 || n > l) {
            return Err(Error::Batch(format!("sequence length {n} outside 1..={l}")));
        }
        let table = tape.param(p, self.embedding);
        let emb = tape.gather_rows(table, tokens)?;
        match &self.encoder {
            Encoder::Recurrent { cell, dirs } => {
                let mut finals = Vec::with_capacity(dirs.len());
                for (i, dir) in dirs.iter().enumerate() {
                    finals.push(self.run_recurrent(tape, p, *cell, dir, emb, l, lengths, i == 1)?);
                }
                if finals.len() == 1 {
                    Ok(finals[0])
                } else {
                    Ok(tape.concat(&finals, 1)?)
                }
            }
            Encoder::Conv { convs, highway } => {
                let mut pooled = Vec::with_capacity(convs.len());
                for c in convs {
                    pooled.push(conv_max_pool(tape, p, c, emb, l, lengths)?);
                }
                let y = tape.concat(&pooled, 1)?;
                match highway {
                    None => Ok(y),
                    Some([gw, gb, pw, pb]) => {
                        let t = linear(tape, p, y, *gw, *gb)?;
                        let t = tape.sigmoid(t);
                        let g = linear(tape, p, y, *pw, *pb)?;
                        let g = tape.relu(g);
                        // t * g + (1 - t) * y
                        let diff = tape.sub(g, y)?;
                        let gated = tape.mul(t, diff)?;
                        Ok(tape.add(y, gated)?)
                    }
                }
            }
            Encoder::Attention(a) => self.run_attention(tape, p, a, emb, l, lengths),
            Encoder::Bag => {
                let rows = mean_weights(l, lengths);
                let w = tape.constant(Tensor::new(&[b * l], rows)?);
                let weighted = tape.mul_col(emb, w)?;
                let seg: Vec<usize> = (0..b * l).map(|r| r / l).collect();
                Ok(tape.scatter_add_rows(weighted, &seg, b)?)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run_recurrent(
        &self,
        tape: &mut Tape,
        p: &ParamStore,
        cell: Cell,
        dir: &Recurrent,
        emb: Var,
        l: usize,
        lengths: &[usize],
        reverse: bool,
    ) -> Result<Var> {
        let b = lengths.len();
        let h = self.config.hidden;
        let w_ih = tape.param(p, dir.w_ih);
        let w_hh = tape.param(p, dir.w_hh);
        let b_ih = tape.param(p, dir.b_ih);
        let b_hh = tape.param(p, dir.b_hh);
        let x = tape.matmul(emb, w_ih)?;
        let x = tape.add_bias(x, b_ih)?;
        let mut state = tape.constant(Tensor::zeros(&[b, h]));
        let mut memory = tape.constant(Tensor::zeros(&[b, h]));
        let steps = lengths.iter().copied().max().unwrap_or(0);
        for t in 0..steps {
            // backward direction reads each row's valid prefix right to left
            let idx: Vec<usize> = lengths
                .iter()
                .enumerate()
                .map(|(r, &n)| {
                    let pos = match (reverse, t < n) {
                        (true, true) => n - 1 - t,
                        (false, true) => t,
                        (_, false) => 0,
                    };
                    r * l + pos
                })
                .collect();
            let live: Vec<f64> = lengths.iter().map(|&n| f64::from(u8::from(t < n))).collect();
            let live = tape.constant(Tensor::new(&[b], live)?);
            let xt = tape.gather_rows(x, &idx)?;
            let hh = tape.matmul(state, w_hh)?;
            let hh = tape.add_bias(hh, b_hh)?;
            let (next, next_mem) = match cell {
                Cell::Rnn => {
                    let z = tape.add(xt, hh)?;
                    (tape.tanh(z), None)
                }
                Cell::Gru => {
                    let xr = tape.slice(xt, 1, 0, h)?;
                    let xz = tape.slice(xt, 1, h, h)?;
                    let xn = tape.slice(xt, 1, 2 * h, h)?;
                    let hr = tape.slice(hh, 1, 0, h)?;
                    let hz = tape.slice(hh, 1, h, h)?;
                    let hn = tape.slice(hh, 1, 2 * h, h)?;
                    let r = tape.add(xr, hr)?;
                    let r = tape.sigmoid(r);
                    let z = tape.add(xz, hz)?;
                    let z = tape.sigmoid(z);
                    let rn = tape.mul(r, hn)?;
                    let n = tape.add(xn, rn)?;
                    let n = tape.tanh(n);
                    // (1 - z) * n + z * h
                    let d = tape.sub(state, n)?;
                    let zd = tape.mul(z, d)?;
                    (tape.add(n, zd)?, None)
                }
                Cell::Lstm => {
                    let z = tape.add(xt, hh)?;
                    let i = tape.slice(z, 1, 0, h)?;
                    let f = tape.slice(z, 1, h, h)?;
                    let g = tape.slice(z, 1, 2 * h, h)?;
                    let o = tape.slice(z, 1, 3 * h, h)?;
                    let i = tape.sigmoid(i);
                    let f = tape.sigmoid(f);
                    let g = tape.tanh(g);
                    let o = tape.sigmoid(o);
                    let fc = tape.mul(f, memory)?;
                    let ig = tape.mul(i, g)?;
                    let c = tape.add(fc, ig)?;
                    let tc = tape.tanh(c);
                    (tape.mul(o, tc)?, Some(c))
                }
            };
            state = masked_step(tape, state, next, live)?;
            if let Some(c) = next_mem {
                memory = masked_step(tape, memory, c, live)?;
            }
        }
        Ok(state)
    }

    fn run_attention(
        &self,
        tape: &mut Tape,
        p: &ParamStore,
        a: &Attention,
        emb: Var,
        l: usize,
        lengths: &[usize],
    ) -> Result<Var> {
        if l > MAX_POSITIONS {
            return Err(Error::Batch(format!(
                "sequence of {l} tokens exceeds {MAX_POSITIONS} positions"
            )));
        }
        let b = lengths.len();
        let e = self.config.emb_dim();
        let dh = e / MHA_HEADS;
        let pos_table = tape.param(p, a.pos);
        let positions: Vec<usize> = (0..b * l).map(|r| r % l).collect();
        let pos = tape.gather_rows(pos_table, &positions)?;
        let x = tape.add(emb, pos)?;
        let q = matmul_param(tape, p, x, a.q)?;
        let k = matmul_param(tape, p, x, a.k)?;
        let v = matmul_param(tape, p, x, a.v)?;
        let mut fill = vec![0.0; b * l * l];
        for (r, &n) in lengths.iter().enumerate() {
            for i in 0..l {
                for j in n..l {
                    fill[(r * l + i) * l + j] = MASK_FILL;
                }
            }
        }
        let fill = tape.constant(Tensor::new(&[b, l, l], fill)?);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(MHA_HEADS);
        for hd in 0..MHA_HEADS {
            let split = |tape: &mut Tape, m: Var| -> Result<Var> {
                let s = tape.slice(m, 1, hd * dh, dh)?;
                Ok(tape.reshape(s, &[b, l, dh])?)
            };
            let qh = split(tape, q)?;
            let kh = split(tape, k)?;
            let vh = split(tape, v)?;
            let kt = tape.transpose_last(kh)?;
            let scores = tape.bmm(qh, kt)?;
            let scores = tape.affine(scores, scale, 0.0);
            let scores = tape.add(scores, fill)?;
            let attn = tape.softmax(scores)?;
            let out = tape.bmm(attn, vh)?;
            heads.push(tape.reshape(out, &[b * l, dh])?);
        }
        let cat = tape.concat(&heads, 1)?;
        let attended = linear(tape, p, cat, a.o, a.o_b)?;
        let x = tape.add(x, attended)?;
        let ff = linear(tape, p, x, a.ff1, a.ff1_b)?;
        let ff = tape.relu(ff);
        let ff = linear(tape, p, ff, a.ff2, a.ff2_b)?;
        let x = tape.add(x, ff)?;
        let w = tape.constant(Tensor::new(&[b * l], mean_weights(l, lengths))?);
        let weighted = tape.mul_col(x, w)?;
        let seg: Vec<usize> = (0..b * l).map(|r| r / l).collect();
        Ok(tape.scatter_add_rows(weighted, &seg, b)?)
    }

    /// `[B, NUM_CLASSES]` logits from the two encoded sequences.
    pub fn classify(&self, tape: &mut Tape, facts: Var, query: Var) -> Result<Var> {
        self.classify_with(tape, &self.params, facts, query)
    }

    fn classify_with(&self, tape: &mut Tape, p: &ParamStore, facts: Var, query: Var) -> Result<Var> {
        let both = tape.concat(&[facts, query], 1)?;
        linear(tape, p, both, self.out_w, self.out_b)
    }

    pub fn forward_tokens(&self, tape: &mut Tape, t: &TokenBatch) -> Result<Var> {
        self.forward_with(tape, &self.params, t)
    }

    /// Forward pass with an explicit parameter store of the same layout.
    pub fn forward_with(&self, tape: &mut Tape, p: &ParamStore, t: &TokenBatch) -> Result<Var> {
        let facts = self.encode_with(tape, p, &t.fact_tokens, &t.lengths)?;
        let query = self.encode_with(tape, p, &t.query_tokens, &vec![2; t.batch_size])?;
        self.classify_with(tape, p, facts, query)
    }

    pub fn forward(&self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        self.forward_tokens(tape, &TokenBatch::from_batch(batch)?)
    }
}

fn matmul_param(tape: &mut Tape, p: &ParamStore, x: Var, w: ParamId) -> Result<Var> {
    let w = tape.param(p, w);
    Ok(tape.matmul(x, w)?)
}

fn linear(tape: &mut Tape, p: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let z = matmul_param(tape, p, x, w)?;
    let b = tape.param(p, b);
    Ok(tape.add_bias(z, b)?)
}

/// `old + live * (new - old)`: rows past their length keep their state.
fn masked_step(tape: &mut Tape, old: Var, new: Var, live: Var) -> Result<Var> {
    let d = tape.sub(new, old)?;
    let d = tape.mul_col(d, live)?;
    Ok(tape.add(old, d)?)
}

/// `1/len` on valid positions, 0 on padding.
fn mean_weights(l: usize, lengths: &[usize]) -> Vec<f64> {
    let mut w = vec![0.0; lengths.len() * l];
    for (r, &n) in lengths.iter().enumerate() {
        w[r * l..r * l + n].iter_mut().for_each(|x| *x = 1.0 / n as f64);
    }
    w
}

/// Valid-window convolution, relu, then max over each row's windows. A row
/// shorter than the kernel gets one window padded with a zero row.
fn conv_max_pool(tape: &mut Tape, p: &ParamStore, c: &Conv, emb: Var, l: usize, lengths: &[usize]) -> Result<Var> {
    let b = lengths.len();
    let e = tape.shape(emb)[1];
    let zero = tape.constant(Tensor::zeros(&[1, e]));
    let padded = tape.concat(&[emb, zero], 0)?;
    let zero_row = b * l;
    let mut starts = Vec::new();
    let mut seg = Vec::new();
    for (r, &n) in lengths.iter().enumerate() {
        let windows = if n >= c.width { n - c.width + 1 } else { 1 };
        for s in 0..windows {
            starts.push((r, s, n));
            seg.push(r);
        }
    }
    let mut cols = Vec::with_capacity(c.width);
    for o in 0..c.width {
        let idx: Vec<usize> = starts
            .iter()
            .map(|&(r, s, n)| if s + o < n { r * l + s + o } else { zero_row })
            .collect();
        cols.push(tape.gather_rows(padded, &idx)?);
    }
    let windows = tape.concat(&cols, 1)?;
    let z = linear(tape, p, windows, c.kernel, c.bias)?;
    let z = tape.relu(z);
    Ok(tape.segment_max(z, &seg, b)?)
}

#[cfg(test)]
mod tests;
