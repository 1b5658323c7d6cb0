use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{EncoderConfig, FrontEnd};
use crate::error::{Error, Result};
use crate::numerics::{Parameter, Tape, Tensor, Var};

/// Forward-pass mode. Training draws dropout masks from the supplied RNG.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    fn dropout(&mut self, tape: &mut Tape, x: Var, p: f64) -> Var {
        match self {
            Mode::Eval => x,
            Mode::Train(rng) => tape.dropout(x, p, &mut **rng),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum EncoderInput<'a> {
    Tokens(&'a [usize]),
    /// Frames × mel bins.
    Frames(&'a [Vec<f64>]),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    FirstToken,
}

/// Per-layer outputs `H_1..H_L`, each `[seq × hidden_dim]`.
#[derive(Debug, Clone)]
pub struct HiddenStack {
    pub layers: Vec<Var>,
}

impl HiddenStack {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn last(&self) -> Var {
        *self.layers.last().expect("non-empty stack")
    }
}

pub fn pool(tape: &mut Tape, layer: Var, strategy: Pooling) -> Result<Var> {
    match strategy {
        Pooling::Mean => Ok(tape.mean_rows(layer)),
        Pooling::FirstToken => tape.select_row(layer, 0),
    }
}

#[derive(Debug, Clone)]
struct Embedding {
    tokens: Option<Parameter>,
    patch_proj: Option<Parameter>,
    patch_bias: Option<Parameter>,
    positions: Parameter,
    norm_gain: Parameter,
    norm_bias: Parameter,
}

#[derive(Debug, Clone)]
struct Layer {
    wq: Parameter,
    bq: Parameter,
    /// No key bias: it shifts every score in a row equally, which the
    /// softmax cancels, so it could never receive a gradient.
    wk: Parameter,
    wv: Parameter,
    bv: Parameter,
    wo: Parameter,
    bo: Parameter,
    norm1_gain: Parameter,
    norm1_bias: Parameter,
    w1: Parameter,
    b1: Parameter,
    w2: Parameter,
    b2: Parameter,
    norm2_gain: Parameter,
    norm2_bias: Parameter,
}

impl Layer {
    fn init(i: usize, c: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let d = c.hidden_dim;
        let f = c.ffn_dim;
        let name = |s: &str| format!("layers.{i}.{s}");
        let dense = |s: &str, fan_in: usize, fan_out: usize, rng: &mut dyn rand::RngCore| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Parameter::new(name(s), Tensor::uniform(&[fan_in, fan_out], bound, rng))
        };
        let vec = |s: &str, n: usize, v: f64| Parameter::new(name(s), Tensor::full(&[n], v));
        Self {
            wq: dense("attn.wq", d, d, rng),
            bq: vec("attn.bq", d, 0.0),
            wk: dense("attn.wk", d, d, rng),
            wv: dense("attn.wv", d, d, rng),
            bv: vec("attn.bv", d, 0.0),
            wo: dense("attn.wo", d, d, rng),
            bo: vec("attn.bo", d, 0.0),
            norm1_gain: vec("norm1.gain", d, 1.0),
            norm1_bias: vec("norm1.bias", d, 0.0),
            w1: dense("ffn.w1", d, f, rng),
            b1: vec("ffn.b1", f, 0.0),
            w2: dense("ffn.w2", f, d, rng),
            b2: vec("ffn.b2", d, 0.0),
            norm2_gain: vec("norm2.gain", d, 1.0),
            norm2_bias: vec("norm2.bias", d, 0.0),
        }
    }

    fn params(&self) -> [&Parameter; 15] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.norm1_gain,
            &self.norm1_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.norm2_gain,
            &self.norm2_bias,
        ]
    }

    fn params_mut(&mut self) -> [&mut Parameter; 15] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.norm1_gain,
            &mut self.norm1_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.norm2_gain,
            &mut self.norm2_bias,
        ]
    }

    fn linear(tape: &mut Tape, x: Var, w: &Parameter, b: &Parameter) -> Result<Var> {
        let (w, b) = (tape.param(w), tape.param(b));
        let h = tape.matmul(x, w)?;
        tape.add_row(h, b)
    }

    /// Post-norm block: `LN(x + MHA(x))` then `LN(h + FFN(h))`.
    fn forward(&self, tape: &mut Tape, x: Var, c: &EncoderConfig, mode: &mut Mode) -> Result<Var> {
        let q = Self::linear(tape, x, &self.wq, &self.bq)?;
        let wk = tape.param(&self.wk);
        let k = tape.matmul(x, wk)?;
        let v = Self::linear(tape, x, &self.wv, &self.bv)?;
        let hd = c.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(c.num_heads);
        for h in 0..c.num_heads {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(k, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores, 1)?;
            let attn = mode.dropout(tape, attn, c.dropout);
            heads.push(tape.matmul(attn, vh)?);
        }
        let ctx = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let out = Self::linear(tape, ctx, &self.wo, &self.bo)?;
        let out = mode.dropout(tape, out, c.dropout);
        let res = tape.add(x, out)?;
        let (g1, b1) = (tape.param(&self.norm1_gain), tape.param(&self.norm1_bias));
        let h = tape.layer_norm(res, g1, b1)?;

        let f = Self::linear(tape, h, &self.w1, &self.b1)?;
        let f = tape.gelu(f);
        let f = Self::linear(tape, f, &self.w2, &self.b2)?;
        let f = mode.dropout(tape, f, c.dropout);
        let res = tape.add(h, f)?;
        let (g2, b2) = (tape.param(&self.norm2_gain), tape.param(&self.norm2_bias));
        tape.layer_norm(res, g2, b2)
    }
}

/// Transformer encoder exposing every layer's hidden states.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    config: EncoderConfig,
    embed: Embedding,
    layers: Vec<Layer>,
}

const EMBED_INIT: f64 = 0.5;

impl EncoderModel {
    pub fn new(config: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let (tokens, patch_proj, patch_bias) = match &config.front_end {
            FrontEnd::Tokens { vocab_size } => (
                Some(Parameter::new(
                    "embed.tokens",
                    Tensor::uniform(&[*vocab_size, d], EMBED_INIT, rng),
                )),
                None,
                None,
            ),
            fe @ FrontEnd::Patches { .. } => {
                let pd = fe.patch_dim().expect("patch front-end");
                let bound = (6.0 / (pd + d) as f64).sqrt();
                (
                    None,
                    Some(Parameter::new(
                        "embed.patch_proj",
                        Tensor::uniform(&[pd, d], bound, rng),
                    )),
                    Some(Parameter::new("embed.patch_bias", Tensor::zeros(&[d]))),
                )
            }
        };
        let embed = Embedding {
            tokens,
            patch_proj,
            patch_bias,
            positions: Parameter::new(
                "embed.positions",
                Tensor::uniform(&[config.max_seq_len, d], EMBED_INIT, rng),
            ),
            norm_gain: Parameter::new("embed.norm.gain", Tensor::full(&[d], 1.0)),
            norm_bias: Parameter::new("embed.norm.bias", Tensor::zeros(&[d])),
        };
        let layers = (0..config.num_layers).map(|i| Layer::init(i, &config, rng)).collect();
        Ok(Self { config, embed, layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// Parameters in a fixed order: embedding front-end, then layers.
    pub fn params(&self) -> Vec<&Parameter> {
        let e = &self.embed;
        let mut out: Vec<&Parameter> = [&e.tokens, &e.patch_proj, &e.patch_bias]
            .into_iter()
            .flatten()
            .collect();
        out.extend([&e.positions, &e.norm_gain, &e.norm_bias]);
        for l in &self.layers {
            out.extend(l.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let e = &mut self.embed;
        let mut out: Vec<&mut Parameter> = [&mut e.tokens, &mut e.patch_proj, &mut e.patch_bias]
            .into_iter()
            .flatten()
            .collect();
        out.extend([&mut e.positions, &mut e.norm_gain, &mut e.norm_bias]);
        for l in &mut self.layers {
            out.extend(l.params_mut());
        }
        out
    }

    /// Changes the dropout rate used in training mode.
    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout {p} outside [0, 1)")));
        }
        self.config.dropout = p;
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.set_frozen(true));
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|p| p.is_frozen())
    }

    /// Number of sequence positions `input` produces.
    pub fn sequence_len(&self, input: EncoderInput) -> Result<usize> {
        match (input, &self.config.front_end) {
            (EncoderInput::Tokens(ids), FrontEnd::Tokens { .. }) => Ok(ids.len()),
            (
                EncoderInput::Frames(frames),
                FrontEnd::Patches {
                    mel_bins,
                    patch_frames,
                    patch_mels,
                },
            ) => Ok(frames.len().div_ceil(*patch_frames) * (mel_bins / patch_mels)),
            _ => Err(Error::Input("input kind does not match encoder front-end".into())),
        }
    }

    fn patches(&self, frames: &[Vec<f64>]) -> Result<Tensor> {
        let FrontEnd::Patches {
            mel_bins,
            patch_frames,
            patch_mels,
        } = self.config.front_end
        else {
            unreachable!("checked by caller")
        };
        if let Some(bad) = frames.iter().find(|f| f.len() != mel_bins) {
            return Err(Error::Input(format!(
                "audio frame has {} mel bins, encoder expects {mel_bins}",
                bad.len()
            )));
        }
        let t_patches = frames.len().div_ceil(patch_frames);
        let m_patches = mel_bins / patch_mels;
        let mut data = Vec::with_capacity(t_patches * m_patches * patch_frames * patch_mels);
        for tp in 0..t_patches {
            for mp in 0..m_patches {
                for df in 0..patch_frames {
                    let frame = frames.get(tp * patch_frames + df);
                    for dm in 0..patch_mels {
                        data.push(frame.map_or(0.0, |f| f[mp * patch_mels + dm]));
                    }
                }
            }
        }
        Tensor::new(vec![t_patches * m_patches, patch_frames * patch_mels], data)
    }

    /// Runs the encoder on `input`, returning all layer outputs.
    pub fn encode(&self, tape: &mut Tape, input: EncoderInput, mode: &mut Mode) -> Result<HiddenStack> {
        let seq = self.sequence_len(input)?;
        if seq == 0 {
            return Err(Error::Input("empty input sequence".into()));
        }
        if seq > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let e = &self.embed;
        let x = match input {
            EncoderInput::Tokens(ids) => {
                let table = tape.param(e.tokens.as_ref().expect("token front-end"));
                tape.embedding(table, ids)?
            }
            EncoderInput::Frames(frames) => {
                let patches = tape.constant(self.patches(frames)?);
                let proj = tape.param(e.patch_proj.as_ref().expect("patch front-end"));
                let bias = tape.param(e.patch_bias.as_ref().expect("patch front-end"));
                let h = tape.matmul(patches, proj)?;
                tape.add_row(h, bias)?
            }
        };
        let positions: Vec<usize> = (0..seq).collect();
        let pos_table = tape.param(&e.positions);
        let pos = tape.embedding(pos_table, &positions)?;
        let x = tape.add(x, pos)?;
        let (g, b) = (tape.param(&e.norm_gain), tape.param(&e.norm_bias));
        let x = tape.layer_norm(x, g, b)?;
        let mut x = mode.dropout(tape, x, self.config.dropout);

        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = layer.forward(tape, x, &self.config, mode)?;
            layers.push(x);
        }
        Ok(HiddenStack { layers })
    }

    /// Eval-mode hidden states as plain tensors.
    pub fn encode_values(&self, input: EncoderInput) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let stack = self.encode(&mut tape, input, &mut Mode::Eval)?;
        Ok(stack.layers.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// A new encoder with `config.num_layers` layers whose embedding and
    /// layers are copies of this model's first layers. Copies are trainable.
    pub fn init_student_from(&self, config: &EncoderConfig) -> Result<EncoderModel> {
        config.validate()?;
        let donor = &self.config;
        if config.num_layers > donor.num_layers {
            return Err(Error::Config(format!(
                "student wants {} layers, donor has {}",
                config.num_layers, donor.num_layers
            )));
        }
        let same = config.hidden_dim == donor.hidden_dim
            && config.num_heads == donor.num_heads
            && config.ffn_dim == donor.ffn_dim
            && config.max_seq_len == donor.max_seq_len
            && config.front_end == donor.front_end;
        if !same {
            return Err(Error::Config(
                "student geometry (width, heads, ffn, positions, front-end) must match donor".into(),
            ));
        }
        let fresh = |p: &Parameter| Parameter::new(p.name(), p.value.clone());
        let e = &self.embed;
        let embed = Embedding {
            tokens: e.tokens.as_ref().map(fresh),
            patch_proj: e.patch_proj.as_ref().map(fresh),
            patch_bias: e.patch_bias.as_ref().map(fresh),
            positions: fresh(&e.positions),
            norm_gain: fresh(&e.norm_gain),
            norm_bias: fresh(&e.norm_bias),
        };
        let layers = self.layers[..config.num_layers]
            .iter()
            .map(|l| {
                let mut l = l.clone();
                for p in l.params_mut() {
                    *p = fresh(p);
                }
                l
            })
            .collect();
        Ok(EncoderModel {
            config: config.clone(),
            embed,
            layers,
        })
    }

    /// Convenience for [`init_student_from`](Self::init_student_from) keeping
    /// the donor geometry and truncating to `m` layers.
    pub fn truncated(&self, m: usize) -> Result<EncoderModel> {
        let config = self.config.clone().with_layers(m);
        self.init_student_from(&config)
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.insert_params(prefix, self.params());
    }

    pub fn from_checkpoint(config: EncoderConfig, ck: &mut Checkpoint, prefix: &str) -> Result<Self> {
        // Build a throwaway model for names and shapes, then fill it.
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = EncoderModel::new(config, &mut rng)?;
        for p in model.params_mut() {
            let name = format!("{prefix}{}", p.name());
            let value = ck.take_shaped(&name, p.value.shape())?;
            *p = Parameter::new(p.name(), value);
        }
        Ok(model)
    }
}
