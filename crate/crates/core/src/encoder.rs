//! The transformer backbone: embeddings, multi-head self-attention, and the
//! layer composition `LN(h + FFN(LN(h + MH(h))))`, exposing every layer's
//! hidden states and `[CLS]` rows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const NUM_RESERVED: usize = 4;

/// Additive score for masked attention keys.
pub const MASK_SCORE: f64 = -1e9;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub ffn_width: usize,
    pub dropout_p: f64,
    pub vocab_size: usize,
    pub max_len: usize,
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    /// BERT-base sized profile: 12 layers, hidden 768 over 12 heads, dropout 0.3.
    pub fn base(vocab_size: usize) -> Self {
        Self {
            num_layers: 12,
            hidden: 768,
            num_heads: 12,
            ffn_width: 3072,
            dropout_p: 0.3,
            vocab_size,
            max_len: 512,
            layer_norm_eps: 1e-12,
        }
    }

    /// Small profile that trains in seconds on a laptop CPU.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            num_layers: 4,
            hidden: 64,
            num_heads: 4,
            ffn_width: 128,
            dropout_p: 0.3,
            vocab_size,
            max_len: 64,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn head_size(&self) -> usize {
        self.hidden / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if self.num_heads == 0 || !self.hidden.is_multiple_of(self.num_heads) {
            return fail(format!(
                "hidden {} is not divisible by num_heads {}",
                self.hidden, self.num_heads
            ));
        }
        if self.hidden < 2 || self.ffn_width == 0 {
            return fail("hidden must be >= 2 and ffn_width >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        if self.vocab_size <= NUM_RESERVED {
            return fail(format!("vocab_size {} leaves no room for tokens", self.vocab_size));
        }
        if self.max_len < 2 {
            return fail("max_len must be at least 2".into());
        }
        if self.layer_norm_eps <= 0.0 {
            return fail("layer_norm_eps must be positive".into());
        }
        Ok(())
    }
}

/// One packed input sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn wrap(tokens: &[usize], segment: usize) -> Self {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        ids.push(CLS);
        ids.extend_from_slice(tokens);
        ids.push(SEP);
        let n = ids.len();
        Self {
            ids,
            segments: vec![segment; n],
            mask: vec![true; n],
        }
    }
}

/// Drop the last token of the longer side until `a.len() + b.len() <= budget`.
pub fn truncate_pair(a: &mut Vec<usize>, b: &mut Vec<usize>, budget: usize) -> bool {
    let mut truncated = false;
    while a.len() + b.len() > budget {
        truncated = true;
        if a.len() > b.len() {
            a.pop();
        } else {
            b.pop();
        }
    }
    truncated
}

/// `[CLS] tokens [SEP]`, truncated to `max_len`.
pub fn pack_single(tokens: &[usize], max_len: usize) -> TokenSequence {
    let keep = tokens.len().min(max_len.saturating_sub(2));
    if keep < tokens.len() {
        log::debug!("truncated sentence from {} to {keep} tokens", tokens.len());
    }
    TokenSequence::wrap(&tokens[..keep], 0)
}

/// `[CLS] a [SEP] b [SEP]`; segment 0 through the first `[SEP]`, 1 after.
pub fn pack_pair_concat_first(a: &[usize], b: &[usize], max_len: usize) -> TokenSequence {
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    if truncate_pair(&mut a, &mut b, max_len.saturating_sub(3)) {
        log::debug!("truncated pair to {} + {} tokens", a.len(), b.len());
    }
    let mut seq = TokenSequence::wrap(&a, 0);
    seq.ids.extend_from_slice(&b);
    seq.ids.push(SEP);
    seq.segments.resize(seq.ids.len(), 1);
    seq.mask.resize(seq.ids.len(), true);
    seq
}

/// Two independently packed sentences `[CLS] a [SEP]` and `[CLS] b [SEP]`
/// (segments 0 and 1) whose combined length fits `max_len`.
pub fn pack_pair_embed_first(a: &[usize], b: &[usize], max_len: usize) -> (TokenSequence, TokenSequence) {
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    if truncate_pair(&mut a, &mut b, max_len.saturating_sub(4)) {
        log::debug!("truncated pair to {} + {} tokens", a.len(), b.len());
    }
    (TokenSequence::wrap(&a, 0), TokenSequence::wrap(&b, 1))
}

/// Sequences padded to a common length, flattened row-major `[batch, len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
    pub positions: Vec<usize>,
    pub mask: Vec<bool>,
}

impl SeqBatch {
    pub fn from_sequences(seqs: &[TokenSequence]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Data("cannot batch zero sequences".into()));
        }
        let len = seqs.iter().map(TokenSequence::len).max().unwrap_or(0);
        if len == 0 {
            return Err(Error::Data("cannot batch empty sequences".into()));
        }
        let mut out = Self {
            batch: seqs.len(),
            len,
            ids: Vec::with_capacity(seqs.len() * len),
            segments: Vec::with_capacity(seqs.len() * len),
            positions: Vec::with_capacity(seqs.len() * len),
            mask: Vec::with_capacity(seqs.len() * len),
        };
        for s in seqs {
            if s.segments.len() != s.len() || s.mask.len() != s.len() {
                return Err(Error::Data("token, segment and mask lengths differ".into()));
            }
            for t in 0..len {
                let real = t < s.len();
                out.ids.push(if real { s.ids[t] } else { PAD });
                out.segments.push(if real { s.segments[t] } else { 0 });
                out.mask.push(real && s.mask[t]);
                out.positions.push(t);
            }
        }
        Ok(out)
    }

    pub fn layout(&self) -> Layout {
        Layout {
            batch: self.batch,
            len: self.len,
            mask: self.mask.clone(),
        }
    }
}

/// How a task's inputs are laid out for the encoder.
#[derive(Clone, Debug, PartialEq)]
pub enum PackedInput {
    /// One sequence per example (single sentences, or pairs packed before embedding).
    Single(SeqBatch),
    /// Pairs embedded separately, then concatenated row-wise per example.
    EmbedFirst { a: SeqBatch, b: SeqBatch },
    /// Two towers sharing weights: the first half of the sequences are the A
    /// sentences, the second half the B sentences.
    Siamese(SeqBatch),
}

impl PackedInput {
    pub fn num_examples(&self) -> usize {
        match self {
            PackedInput::Single(s) => s.batch,
            PackedInput::EmbedFirst { a, .. } => a.batch,
            PackedInput::Siamese(s) => s.batch / 2,
        }
    }
}

/// Row layout of hidden states: `batch` sequences of `len` rows each.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub batch: usize,
    pub len: usize,
    pub mask: Vec<bool>,
}

impl Layout {
    pub fn rows(&self) -> usize {
        self.batch * self.len
    }

    /// Row index of each sequence's first position.
    pub fn first_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|b| b * self.len).collect()
    }

    /// Additive key mask `[batch·heads, len, len]`.
    pub fn attention_bias(&self, heads: usize) -> Tensor {
        let l = self.len;
        let mut data = vec![0.0; self.batch * heads * l * l];
        for b in 0..self.batch {
            for h in 0..heads {
                let base = (b * heads + h) * l * l;
                for q in 0..l {
                    for k in 0..l {
                        if !self.mask[b * l + k] {
                            data[base + q * l + k] = MASK_SCORE;
                        }
                    }
                }
            }
        }
        Tensor::new(vec![self.batch * heads, l, l], data).expect("positive extents")
    }
}

/// Dropout mode plus the generator that draws masks.
#[derive(Clone, Debug)]
pub struct Pass {
    pub train: bool,
    pub rng: ChaCha8Rng,
}

impl Pass {
    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn eval() -> Self {
        Self {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

fn init_normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("positive extents")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        input: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.insert(format!("{name}.weight"), group, init_normal(&[input, output], rng));
        let bias = store.insert(format!("{name}.bias"), group, Tensor::zeros(&[output]));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, group: ParamGroup, width: usize) -> Self {
        let gamma = store.insert(format!("{name}.weight"), group, Tensor::filled(&[width], 1.0));
        let beta = store.insert(format!("{name}.bias"), group, Tensor::zeros(&[width]));
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, eps: f64) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, eps)
    }
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub attention_norm: Norm,
    pub ffn_up: Linear,
    pub ffn_down: Linear,
    pub output_norm: Norm,
}

/// Hidden states of every layer for one batch.
#[derive(Clone, Debug)]
pub struct LayerStates {
    /// Embedding output (after any injected perturbation).
    pub embedded: Var,
    /// `hidden[i]` is the output of layer `i` (zero-based), `[rows, H]`.
    pub hidden: Vec<Var>,
    /// `cls[i]` holds the first row of every sequence at layer `i`, `[batch, H]`.
    pub cls: Vec<Var>,
    pub layout: Layout,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub token: ParamId,
    pub position: ParamId,
    pub segment: ParamId,
    pub embed_norm: Norm,
    pub layers: Vec<LayerParams>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let g = ParamGroup::Embeddings;
        let token = store.insert("embeddings.token.weight", g, init_normal(&[config.vocab_size, h], rng));
        let position = store.insert("embeddings.position.weight", g, init_normal(&[config.max_len, h], rng));
        let segment = store.insert("embeddings.segment.weight", g, init_normal(&[2, h], rng));
        let embed_norm = Norm::new(store, "embeddings.norm", g, h);
        let layers = (0..config.num_layers)
            .map(|i| {
                let g = ParamGroup::Layer(i);
                let p = |s: &str| format!("layer.{i}.{s}");
                LayerParams {
                    query: Linear::new(store, &p("attention.query"), g, h, h, rng),
                    key: Linear::new(store, &p("attention.key"), g, h, h, rng),
                    value: Linear::new(store, &p("attention.value"), g, h, h, rng),
                    output: Linear::new(store, &p("attention.output"), g, h, h, rng),
                    attention_norm: Norm::new(store, &p("attention_norm"), g, h),
                    ffn_up: Linear::new(store, &p("ffn.up"), g, h, config.ffn_width, rng),
                    ffn_down: Linear::new(store, &p("ffn.down"), g, config.ffn_width, h, rng),
                    output_norm: Norm::new(store, &p("output_norm"), g, h),
                }
            })
            .collect();
        Ok(Self {
            config,
            token,
            position,
            segment,
            embed_norm,
            layers,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn check_ids(&self, seqs: &SeqBatch) -> Result<()> {
        if let Some(i) = seqs.ids.iter().position(|&id| id >= self.config.vocab_size) {
            return Err(Error::Data(format!(
                "token id {} at flat index {i} exceeds vocabulary size {}",
                seqs.ids[i], self.config.vocab_size
            )));
        }
        if seqs.len > self.config.max_len {
            return Err(Error::Data(format!(
                "sequence length {} exceeds max_len {}",
                seqs.len, self.config.max_len
            )));
        }
        if let Some(i) = seqs.segments.iter().position(|&s| s > 1) {
            return Err(Error::Data(format!("segment id at flat index {i} is not 0 or 1")));
        }
        Ok(())
    }

    /// `tok[id] + pos[t] + seg[s]` per row, before normalisation.
    pub fn embedding_sum(&self, tape: &mut Tape, store: &ParamStore, seqs: &SeqBatch) -> Result<Var> {
        self.check_ids(seqs)?;
        let tok = tape.param(store, self.token);
        let pos = tape.param(store, self.position);
        let seg = tape.param(store, self.segment);
        let t = tape.gather_rows(tok, &seqs.ids)?;
        let p = tape.gather_rows(pos, &seqs.positions)?;
        let s = tape.gather_rows(seg, &seqs.segments)?;
        let tp = tape.add(t, p)?;
        tape.add(tp, s)
    }

    /// Embedding layer output `[batch·len, H]`: summed lookups, layer norm, dropout.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, seqs: &SeqBatch, pass: &mut Pass) -> Result<Var> {
        let sum = self.embedding_sum(tape, store, seqs)?;
        let normed = self.embed_norm.forward(tape, store, sum, self.config.layer_norm_eps)?;
        tape.dropout(normed, self.config.dropout_p, pass.train, &mut pass.rng)
    }

    /// Embedding stage for any packing mode, returning the layer-1 input and its layout.
    pub fn embed_input(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &PackedInput,
        pass: &mut Pass,
    ) -> Result<(Var, Layout)> {
        match input {
            PackedInput::Single(s) | PackedInput::Siamese(s) => Ok((self.embed(tape, store, s, pass)?, s.layout())),
            PackedInput::EmbedFirst { a, b } => {
                if a.batch != b.batch {
                    return Err(Error::Data(format!(
                        "embed-first halves have {} and {} sequences",
                        a.batch, b.batch
                    )));
                }
                let len = a.len + b.len;
                if len > self.config.max_len {
                    return Err(Error::Data(format!(
                        "combined pair length {len} exceeds max_len {}",
                        self.config.max_len
                    )));
                }
                let ea = self.embed(tape, store, a, pass)?;
                let eb = self.embed(tape, store, b, pass)?;
                let stacked = tape.concat_rows(&[ea, eb])?;
                let offset = a.batch * a.len;
                let mut index = Vec::with_capacity(a.batch * len);
                let mut mask = Vec::with_capacity(a.batch * len);
                for e in 0..a.batch {
                    index.extend((0..a.len).map(|t| e * a.len + t));
                    index.extend((0..b.len).map(|t| offset + e * b.len + t));
                    mask.extend_from_slice(&a.mask[e * a.len..(e + 1) * a.len]);
                    mask.extend_from_slice(&b.mask[e * b.len..(e + 1) * b.len]);
                }
                let joined = tape.gather_rows(stacked, &index)?;
                Ok((
                    joined,
                    Layout {
                        batch: a.batch,
                        len,
                        mask,
                    },
                ))
            }
        }
    }

    /// Attention probabilities of layer `i`, `[batch·heads, len, len]`.
    pub fn attention_probs(
        &self,
        i: usize,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        layout: &Layout,
    ) -> Result<Var> {
        let (probs, _) = self.attention_parts(i, tape, store, h, layout)?;
        Ok(probs)
    }

    fn attention_parts(
        &self,
        i: usize,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        layout: &Layout,
    ) -> Result<(Var, Var)> {
        let lp = &self.layers[i];
        let heads = self.config.num_heads;
        let q = lp.query.forward(tape, store, h)?;
        let k = lp.key.forward(tape, store, h)?;
        let v = lp.value.forward(tape, store, h)?;
        let q = tape.split_heads(q, layout.batch, heads)?;
        let k = tape.split_heads(k, layout.batch, heads)?;
        let v = tape.split_heads(v, layout.batch, heads)?;
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (self.config.head_size() as f64).sqrt());
        let scores = tape.add_const(scores, &layout.attention_bias(heads))?;
        let probs = tape.softmax(scores, 2)?;
        Ok((probs, v))
    }

    /// `MH(h)`: masked scaled dot-product attention per head, heads
    /// concatenated and passed through the output projection.
    pub fn multi_head_attention(
        &self,
        i: usize,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        layout: &Layout,
    ) -> Result<Var> {
        let (probs, v) = self.attention_parts(i, tape, store, h, layout)?;
        let ctx = tape.bmm(probs, v, false)?;
        let ctx = tape.merge_heads(ctx, layout.batch)?;
        self.layers[i].output.forward(tape, store, ctx)
    }

    /// `FFN(x) = down(gelu(up(x)))`.
    pub fn feed_forward(&self, i: usize, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let lp = &self.layers[i];
        let up = lp.ffn_up.forward(tape, store, x)?;
        let act = tape.gelu(up);
        lp.ffn_down.forward(tape, store, act)
    }

    /// Layer `i` (zero-based): `LN(h + FFN(LN(h + MH(h))))`, with dropout on
    /// the attention and feed-forward outputs before each residual add.
    pub fn layer(
        &self,
        i: usize,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        layout: &Layout,
        pass: &mut Pass,
    ) -> Result<Var> {
        let lp = &self.layers[i];
        let eps = self.config.layer_norm_eps;
        let p = self.config.dropout_p;
        let mh = self.multi_head_attention(i, tape, store, h, layout)?;
        let mh = tape.dropout(mh, p, pass.train, &mut pass.rng)?;
        let inner = tape.add(h, mh)?;
        let inner = lp.attention_norm.forward(tape, store, inner, eps)?;
        let ff = self.feed_forward(i, tape, store, inner)?;
        let ff = tape.dropout(ff, p, pass.train, &mut pass.rng)?;
        let outer = tape.add(h, ff)?;
        lp.output_norm.forward(tape, store, outer, eps)
    }

    pub fn cls_rows(&self, tape: &mut Tape, h: Var, layout: &Layout) -> Result<Var> {
        tape.gather_rows(h, &layout.first_rows())
    }

    /// Shape of the embedding output for `input`, i.e. of a perturbation on it.
    pub fn embedding_shape(&self, input: &PackedInput) -> [usize; 2] {
        let rows = match input {
            PackedInput::Single(s) | PackedInput::Siamese(s) => s.batch * s.len,
            PackedInput::EmbedFirst { a, b } => a.batch * (a.len + b.len),
        };
        [rows, self.config.hidden]
    }

    /// Run the full stack. `perturb`, when given, is added to the embedding output.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &PackedInput,
        pass: &mut Pass,
        perturb: Option<Var>,
    ) -> Result<LayerStates> {
        self.encode_to_depth(tape, store, input, pass, perturb, self.num_layers())
    }

    /// Like [`Encoder::encode`] but stops after the first `depth` layers.
    pub fn encode_to_depth(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &PackedInput,
        pass: &mut Pass,
        perturb: Option<Var>,
        depth: usize,
    ) -> Result<LayerStates> {
        if depth == 0 || depth > self.num_layers() {
            return Err(Error::Contract(format!(
                "depth {depth} outside 1..={}",
                self.num_layers()
            )));
        }
        let (mut h, layout) = self.embed_input(tape, store, input, pass)?;
        if let Some(delta) = perturb {
            h = tape.add(h, delta)?;
        }
        let embedded = h;
        let mut hidden = Vec::with_capacity(depth);
        let mut cls = Vec::with_capacity(depth);
        for i in 0..depth {
            h = self.layer(i, tape, store, h, &layout, pass)?;
            hidden.push(h);
            cls.push(self.cls_rows(tape, h, &layout)?);
        }
        Ok(LayerStates {
            embedded,
            hidden,
            cls,
            layout,
        })
    }
}
