use std::rc::Rc;

use deskbc_nn::mat::log_softmax;
use deskbc_nn::{Mat, ParamId, ParamStore, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layout::{attends, build_mask_windowed, Pos, Role, TokenLayout, NUM_ROLE_TYPES};
use super::nets::{causal_mask, ImageEncoder, LayerKv, Stack};
use crate::data::{Action, QuantileBinning, TruncatedNormalParams, NUM_SLOTS};
use crate::error::ModelError;

/// Content of one backbone input token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Text(usize),
    /// Image token `j` of the frame stored in row `frame` of the frame matrix.
    Image { frame: usize, j: usize },
    Reasoning,
    Prediction,
    Action { slot: usize, class: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSpec {
    pub pos: Pos,
    pub kind: TokenKind,
}

/// Windows of aligned frames/actions ready for the model. Slot inputs feed
/// the ground-truth action tokens; targets are what the loss scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub t: usize,
    /// `n * t` preprocessed frames, sequence-major.
    pub frames: Mat,
    pub instructions: Vec<usize>,
    pub inputs: Vec<[usize; NUM_SLOTS]>,
    pub targets: Vec<[usize; NUM_SLOTS]>,
    pub loss_mask: Vec<bool>,
}

impl Batch {
    pub fn check(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let rows = self.n * self.t;
        let want = 3 * cfg.frame_resolution * cfg.frame_resolution;
        if self.frames.rows != rows || (rows > 0 && self.frames.cols != want) {
            return Err(ModelError::Shape(format!(
                "batch frames are {}x{}, expected {rows}x{want}",
                self.frames.rows, self.frames.cols
            )));
        }
        if self.instructions.len() != rows || self.inputs.len() != rows || self.targets.len() != rows || self.loss_mask.len() != rows {
            return Err(ModelError::Shape(format!("batch columns must all have {rows} entries")));
        }
        if let Some(&i) = self.instructions.iter().find(|&&i| i >= cfg.instruction_vocab) {
            return Err(ModelError::Shape(format!("instruction id {i} outside vocabulary")));
        }
        let vocab = cfg.slot_vocabs();
        for a in self.inputs.iter().chain(&self.targets) {
            if a.iter().zip(&vocab).any(|(c, v)| c >= v) {
                return Err(ModelError::Shape(format!("action slots {a:?} exceed vocabularies {vocab:?}")));
            }
        }
        Ok(())
    }
}

/// Decoding rule for the action decoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    Argmax,
    Sample { temperature: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodedAction {
    pub action: Action,
    /// Classes in decoding order, before the canonical key sort.
    pub slots: [usize; NUM_SLOTS],
    /// Model log-probability of each decoded class given the prefix.
    pub log_probs: [f64; NUM_SLOTS],
}

impl DecodedAction {
    pub fn joint_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

pub(crate) struct Parts {
    pub encoder: ImageEncoder,
    /// Rows: instructions, reasoning, prediction, then one block per slot.
    pub token_emb: ParamId,
    pub type_emb: ParamId,
    pub backbone: Stack,
    pub dec_in_w: ParamId,
    pub dec_in_b: ParamId,
    /// Rows: one block per slot 0..7 (the last slot never feeds the decoder).
    pub dec_slot_emb: ParamId,
    pub decoder: Stack,
    pub heads: Vec<(ParamId, ParamId)>,
}

/// Policy network: image encoder, backbone over the interleaved token
/// sequence, and the autoregressive action decoder.
pub struct PolicyModel {
    pub config: ModelConfig,
    pub binning: QuantileBinning,
    pub tn: TruncatedNormalParams,
    pub store: ParamStore,
    pub(crate) parts: Parts,
}

impl Clone for PolicyModel {
    fn clone(&self) -> Self {
        let mut m = PolicyModel::build(self.config.clone(), self.binning.clone(), self.tn, 0);
        m.store = self.store.clone();
        m
    }
}

impl std::fmt::Debug for PolicyModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PolicyModel").field("config", &self.config).field("params", &self.store.num_scalars()).finish()
    }
}

fn slot_offsets(vocab: &[usize; NUM_SLOTS]) -> [usize; NUM_SLOTS] {
    let mut off = [0; NUM_SLOTS];
    for s in 1..NUM_SLOTS {
        off[s] = off[s - 1] + vocab[s - 1];
    }
    off
}

impl PolicyModel {
    /// Builds a randomly initialised model. The mouse vocabularies are taken
    /// from `binning`, overriding the configured counts.
    pub fn new(mut config: ModelConfig, binning: QuantileBinning, tn: TruncatedNormalParams, seed: u64) -> Result<Self, ModelError> {
        config.mouse_bins_x = binning.x.num_bins();
        config.mouse_bins_y = binning.y.num_bins();
        config.validate()?;
        Ok(Self::build(config, binning, tn, seed))
    }

    fn build(config: ModelConfig, binning: QuantileBinning, tn: TruncatedNormalParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = config.hidden();
        let vocab = config.slot_vocabs();
        let encoder = ImageEncoder::new(
            &mut store,
            "enc",
            config.frame_resolution,
            &config.encoder_channels,
            config.image_tokens,
            h,
            &mut rng,
        );
        let token_rows = config.instruction_vocab + 2 + vocab.iter().sum::<usize>();
        let token_emb = store.table("tok_emb", token_rows, h, 1.0, &mut rng);
        let type_emb = store.table("type_emb", NUM_ROLE_TYPES, h, 1.0, &mut rng);
        let b = &config.backbone;
        let backbone = Stack::new(&mut store, "bb", b.num_layers, h, b.query_heads, b.kv_heads, b.mlp_ratio, config.use_qk_norm, &mut rng);
        let dec_in_w = store.normal("dec.in.w", h, h, (1.0 / h as f64).sqrt(), &mut rng);
        let dec_in_b = store.constant("dec.in.b", 1, h, 0.0);
        let dec_slot_emb = store.table("dec.slot_emb", vocab.iter().sum(), h, 1.0, &mut rng);
        let d = &config.action_decoder;
        let decoder = Stack::new(&mut store, "dec", d.num_layers, h, d.query_heads, d.kv_heads, b.mlp_ratio, config.use_qk_norm, &mut rng);
        let heads = (0..NUM_SLOTS)
            .map(|s| {
                (
                    store.normal(&format!("dec.head{s}.w"), h, vocab[s], (1.0 / h as f64).sqrt(), &mut rng),
                    store.constant(&format!("dec.head{s}.b"), 1, vocab[s], 0.0),
                )
            })
            .collect();
        let parts = Parts { encoder, token_emb, type_emb, backbone, dec_in_w, dec_in_b, dec_slot_emb, decoder, heads };
        PolicyModel { config, binning, tn, store, parts }
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout::new(self.config.image_tokens)
    }

    pub fn num_backbone_layers(&self) -> usize {
        self.parts.backbone.num_layers()
    }

    pub fn kv_dim(&self) -> usize {
        self.parts.backbone.kv_dim()
    }

    fn token_row(&self, kind: TokenKind) -> usize {
        let v = self.config.instruction_vocab;
        match kind {
            TokenKind::Text(i) => i,
            TokenKind::Reasoning => v,
            TokenKind::Prediction => v + 1,
            TokenKind::Action { slot, class } => v + 2 + slot_offsets(&self.config.slot_vocabs())[slot] + class,
            TokenKind::Image { .. } => unreachable!("image tokens come from the encoder"),
        }
    }

    /// Embeds `specs`, whose image tokens refer to rows of `frames`.
    pub fn embed(&self, tape: &mut Tape, specs: &[TokenSpec], frames: &Mat) -> Var {
        let n_i = self.config.image_tokens;
        let n_img = frames.rows * n_i;
        let mut ids = Vec::new();
        let mut order = Vec::with_capacity(specs.len());
        for s in specs {
            match s.kind {
                TokenKind::Image { frame, j } => order.push(frame * n_i + j),
                kind => {
                    order.push(n_img + ids.len());
                    ids.push(self.token_row(kind));
                }
            }
        }
        let mut sources = Vec::new();
        if n_img > 0 {
            sources.push(if self.config.image_blind {
                tape.leaf(Mat::zeros(n_img, self.config.hidden()))
            } else {
                let f = tape.leaf(frames.clone());
                self.parts.encoder.forward(tape, f)
            });
        }
        if !ids.is_empty() {
            let table = tape.param(self.parts.token_emb);
            sources.push(tape.gather(table, Rc::new(ids)));
        }
        let all = if sources.len() == 1 { sources[0] } else { tape.concat(&sources) };
        let x = tape.gather(all, Rc::new(order));
        let layout = self.layout();
        let types: Vec<usize> = specs.iter().map(|s| layout.role(s.pos.idx).type_id()).collect();
        let type_table = tape.param(self.parts.type_emb);
        let t = tape.gather(type_table, Rc::new(types));
        tape.add(x, t)
    }

    /// Token specs for a batch's `n` windows of `t` timesteps.
    pub fn batch_specs(&self, batch: &Batch) -> Vec<TokenSpec> {
        let layout = self.layout();
        let mut specs = Vec::with_capacity(batch.n * batch.t * layout.tokens_per_step());
        for s in 0..batch.n {
            for i in 0..batch.t {
                let r = s * batch.t + i;
                specs.extend(timestep_specs(&layout, i, batch.instructions[r], r, Some(&batch.inputs[r])));
            }
        }
        specs
    }

    /// Rotary position of a token; `offset` shifts whole timesteps.
    pub fn rope_position(&self, pos: Pos, offset: usize) -> f64 {
        (self.layout().flat(pos) + offset * self.layout().tokens_per_step()) as f64
    }

    /// Full-window forward. Returns final-normed hidden states for every
    /// token (`n * t * tokens_per_step` rows) and the `a_in` latents
    /// (`n * t` rows).
    pub fn forward_batch(&self, tape: &mut Tape, batch: &Batch, window: Option<usize>, offset: usize) -> Result<(Var, Var), ModelError> {
        batch.check(&self.config)?;
        if batch.n == 0 || batch.t == 0 {
            return Err(ModelError::EmptyDataset);
        }
        let layout = self.layout();
        let specs = self.batch_specs(batch);
        let x = self.embed(tape, &specs, &batch.frames);
        let mask = build_mask_windowed(batch.t, &layout, window);
        let per_seq = batch.t * layout.tokens_per_step();
        let positions: Vec<f64> = specs[..per_seq].iter().map(|s| self.rope_position(s.pos, offset)).collect();
        let (h, _) = self.parts.backbone.forward(tape, x, batch.n, &positions, self.config.rope_base, None, &mask.data);
        let pred: Vec<usize> = (0..batch.n * batch.t).map(|r| r * layout.tokens_per_step() + layout.prediction_index()).collect();
        let latents = tape.gather(h, Rc::new(pred));
        Ok((h, latents))
    }

    /// Incremental backbone pass for one sequence: `specs` are the new
    /// tokens, `past` the cached keys/values whose positions are `past_pos`.
    /// Positions are absolute (no offset). Returns final-normed states of the
    /// new tokens and their keys/values per layer.
    pub fn forward_cached(
        &self,
        tape: &mut Tape,
        specs: &[TokenSpec],
        frames: &Mat,
        past: &[LayerKv],
        past_pos: &[Pos],
        window: Option<usize>,
    ) -> (Var, Vec<LayerKv>) {
        let x = self.embed(tape, specs, frames);
        self.backbone_cached(tape, x, specs, past, past_pos, window)
    }

    /// Backbone half of [`Self::forward_cached`] on already embedded tokens.
    pub fn backbone_cached(
        &self,
        tape: &mut Tape,
        x: Var,
        specs: &[TokenSpec],
        past: &[LayerKv],
        past_pos: &[Pos],
        window: Option<usize>,
    ) -> (Var, Vec<LayerKv>) {
        let layout = self.layout();
        let mut mask = Vec::with_capacity(specs.len() * (past_pos.len() + specs.len()));
        for q in specs {
            for k in past_pos.iter().chain(specs.iter().map(|s| &s.pos)) {
                mask.push(attends(&layout, q.pos, *k, window));
            }
        }
        let positions: Vec<f64> = specs.iter().map(|s| self.rope_position(s.pos, 0)).collect();
        self.parts.backbone.forward(tape, x, 1, &positions, self.config.rope_base, Some(past), &mask)
    }

    /// Decoder hidden states for `len` positions per latent: position 0 is
    /// the projected latent, position `p > 0` embeds slot `p - 1` of
    /// `prefix[i]`. Output rows are latent-major.
    fn decoder_states(&self, tape: &mut Tape, latents: Var, prefix: &[[usize; NUM_SLOTS]], len: usize) -> Var {
        let m = tape.shape(latents).0;
        assert_eq!(prefix.len(), m);
        assert!((1..=NUM_SLOTS).contains(&len));
        let proj = tape.linear(latents, self.parts.dec_in_w, Some(self.parts.dec_in_b));
        let x = if len == 1 {
            proj
        } else {
            let off = slot_offsets(&self.config.slot_vocabs());
            let ids: Vec<usize> = prefix.iter().flat_map(|p| (0..len - 1).map(move |s| off[s] + p[s])).collect();
            let table = tape.param(self.parts.dec_slot_emb);
            let emb = tape.gather(table, Rc::new(ids));
            let all = tape.concat(&[proj, emb]);
            let order: Vec<usize> = (0..m)
                .flat_map(|i| (0..len).map(move |p| if p == 0 { i } else { m + i * (len - 1) + p - 1 }))
                .collect();
            tape.gather(all, Rc::new(order))
        };
        let positions: Vec<f64> = (0..len).map(|p| p as f64).collect();
        let (h, _) = self.parts.decoder.forward(tape, x, m, &positions, self.config.rope_base, None, &causal_mask(len));
        h
    }

    /// Teacher-forced logits of all 8 slots (`m x vocab_s` each) given the
    /// `a_in` latents and the true slot classes.
    pub fn slot_logits(&self, tape: &mut Tape, latents: Var, slots: &[[usize; NUM_SLOTS]]) -> Vec<Var> {
        let m = slots.len();
        let h = self.decoder_states(tape, latents, slots, NUM_SLOTS);
        (0..NUM_SLOTS)
            .map(|s| {
                let rows = tape.gather(h, Rc::new((0..m).map(|i| i * NUM_SLOTS + s).collect()));
                let (w, b) = self.parts.heads[s];
                tape.linear(rows, w, Some(b))
            })
            .collect()
    }

    /// Logits of slot `prefix.len()` for one latent; one decoder call.
    pub fn next_slot_logits(&self, latent: &Mat, prefix: &[usize]) -> Vec<f64> {
        let slot = prefix.len();
        assert!(slot < NUM_SLOTS);
        let mut full = [0; NUM_SLOTS];
        full[..slot].copy_from_slice(prefix);
        let mut tape = Tape::new(&self.store);
        let z = tape.leaf(latent.clone());
        let h = self.decoder_states(&mut tape, z, &[full], slot + 1);
        let row = tape.gather(h, Rc::new(vec![slot]));
        let (w, b) = self.parts.heads[slot];
        let logits = tape.linear(row, w, Some(b));
        tape.value(logits).data.clone()
    }

    /// Autoregressive decode of one `1 x hidden` latent. Calls the decoder
    /// once per slot (8 times) and reports each call through `on_call`.
    pub fn decode_action_counted<R: Rng + ?Sized>(
        &self,
        latent: &Mat,
        mode: DecodeMode,
        rng: &mut R,
        on_call: &mut dyn FnMut(),
    ) -> Result<DecodedAction, ModelError> {
        let mut slots = [0usize; NUM_SLOTS];
        let mut log_probs = [0.0; NUM_SLOTS];
        for s in 0..NUM_SLOTS {
            let logits = self.next_slot_logits(latent, &slots[..s]);
            on_call();
            let lp = log_softmax(&logits);
            let class = choose(&logits, mode, rng);
            slots[s] = class;
            log_probs[s] = lp[class];
        }
        let action = Action::from_slots(&slots)?;
        Ok(DecodedAction { action, slots, log_probs })
    }

    pub fn decode_action<R: Rng + ?Sized>(&self, latent: &Mat, mode: DecodeMode, rng: &mut R) -> Result<DecodedAction, ModelError> {
        self.decode_action_counted(latent, mode, rng, &mut || {})
    }
}

/// Tokens of timestep `i` in layout order; action tokens only when `action`
/// is given. Image tokens refer to frame row `frame`.
pub fn timestep_specs(layout: &TokenLayout, i: usize, instruction: usize, frame: usize, action: Option<&[usize; NUM_SLOTS]>) -> Vec<TokenSpec> {
    let n = if action.is_some() { layout.tokens_per_step() } else { layout.prediction_index() + 1 };
    (0..n)
        .map(|idx| {
            let kind = match layout.role(idx) {
                Role::Text => TokenKind::Text(instruction),
                Role::Image(j) => TokenKind::Image { frame, j },
                Role::Reasoning => TokenKind::Reasoning,
                Role::Prediction => TokenKind::Prediction,
                Role::Action(slot) => TokenKind::Action { slot, class: action.unwrap()[slot] },
            };
            TokenSpec { pos: Pos { timestep: i, idx }, kind }
        })
        .collect()
}

fn choose<R: Rng + ?Sized>(logits: &[f64], mode: DecodeMode, rng: &mut R) -> usize {
    let argmax = || logits.iter().enumerate().fold(0, |best, (i, v)| if *v > logits[best] { i } else { best });
    match mode {
        DecodeMode::Argmax => argmax(),
        DecodeMode::Sample { temperature } if temperature <= 0.0 => argmax(),
        DecodeMode::Sample { temperature } => {
            let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
            let lp = log_softmax(&scaled);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, l) in lp.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    return i;
                }
            }
            // Rounding left `acc` just under 1: fall back to the mode.
            argmax()
        }
    }
}
