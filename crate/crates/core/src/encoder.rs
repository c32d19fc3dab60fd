//! Word embeddings and a stacked self-attention encoder with bottleneck
//! adapters after each sublayer.
//!
//! Layer order: attention, dropout, adapter, `LN(x + ·)`, feedforward (GELU),
//! dropout, adapter, `LN(x + ·)`.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conllu::Sentence;
use crate::layout::ParamLayout;
use crate::numcore::{Tape, TapeError, Tensor, Var};
use crate::parser::init_tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
pub const ROOT: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<mask>", "<root>"];

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("sentence of {len} words needs {} positions, encoder holds {maxlen}", len + 1)]
    TooLong { len: usize, maxlen: usize },
    #[error("vocabulary must start with {SPECIALS:?}")]
    BadSpecials,
    #[error("duplicate vocabulary entry {0:?}")]
    DuplicateToken(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Word vocabulary. Indices 0..4 are PAD, UNK, MASK and ROOT.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials followed by `words` in the given order (duplicates dropped).
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for w in words {
            if !index.contains_key(w) {
                index.insert(w.to_string(), tokens.len());
                tokens.push(w.to_string());
            }
        }
        Vocab { tokens, index }
    }

    /// Inverse of [`Vocab::tokens`].
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, EncoderError> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(EncoderError::BadSpecials);
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(EncoderError::DuplicateToken(t.clone()));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, form: &str) -> usize {
        self.index.get(form).copied().unwrap_or(UNK)
    }

    /// `[ROOT, id(form_1), …]`. In training each word is independently
    /// replaced by MASK with probability `mask_prob`.
    pub fn token_ids<R: Rng + ?Sized>(
        &self,
        s: &Sentence,
        maxlen: usize,
        mask_prob: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Vec<usize>, EncoderError> {
        if s.len() + 1 > maxlen {
            return Err(EncoderError::TooLong { len: s.len(), maxlen });
        }
        let mut ids = Vec::with_capacity(s.len() + 1);
        ids.push(ROOT);
        for form in s.forms() {
            let masked = training && mask_prob > 0.0 && rng.random::<f64>() < mask_prob;
            ids.push(if masked { MASK } else { self.id(form) });
        }
        Ok(ids)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub maxlen: usize,
    pub adapter: usize,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        EncoderConfig {
            d_model: 128,
            layers: 4,
            heads: 4,
            ff: 512,
            maxlen: 128,
            adapter: 32,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Embeddings, then per layer: attention projections, first layer norm,
    /// feedforward, second layer norm.
    pub fn backbone_layout(&self, vocab_size: usize) -> ParamLayout {
        let d = self.d_model;
        let mut layout = ParamLayout::new();
        layout.push("tok_emb", &[vocab_size, d]);
        layout.push("pos_emb", &[self.maxlen, d]);
        for l in 0..self.layers {
            for p in ["q", "k", "v", "o"] {
                layout.push(format!("l{l}.w{p}"), &[d, d]);
                layout.push(format!("l{l}.b{p}"), &[d]);
            }
            layout.push(format!("l{l}.ln1.g"), &[d]);
            layout.push(format!("l{l}.ln1.b"), &[d]);
            layout.push(format!("l{l}.ff1.w"), &[d, self.ff]);
            layout.push(format!("l{l}.ff1.b"), &[self.ff]);
            layout.push(format!("l{l}.ff2.w"), &[self.ff, d]);
            layout.push(format!("l{l}.ff2.b"), &[d]);
            layout.push(format!("l{l}.ln2.g"), &[d]);
            layout.push(format!("l{l}.ln2.b"), &[d]);
        }
        layout
    }

    /// Per layer and slot (0 after attention, 1 after feedforward):
    /// down weight, down bias, up weight, up bias.
    pub fn adapter_layout(&self) -> ParamLayout {
        let (d, a) = (self.d_model, self.adapter);
        let mut layout = ParamLayout::new();
        for l in 0..self.layers {
            for s in 0..2 {
                layout.push(format!("l{l}.s{s}.down.w"), &[d, a]);
                layout.push(format!("l{l}.s{s}.down.b"), &[a]);
                layout.push(format!("l{l}.s{s}.up.w"), &[a, d]);
                layout.push(format!("l{l}.s{s}.up.b"), &[d]);
            }
        }
        layout
    }

    pub fn backbone_init_stds(&self, vocab_size: usize) -> Vec<f64> {
        let d = self.d_model as f64;
        let ff = self.ff as f64;
        self.backbone_layout(vocab_size)
            .entries()
            .iter()
            .map(|e| {
                let name = e.name.as_str();
                if name.ends_with("_emb") {
                    1.0
                } else if name.ends_with(".g") {
                    f64::NAN
                } else if name.ends_with("ff2.w") {
                    1.0 / ff.sqrt()
                } else if e.shape.len() == 2 {
                    1.0 / d.sqrt()
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Down projections small random, everything else zero.
    pub fn adapter_init_stds(&self) -> Vec<f64> {
        let d = self.d_model as f64;
        self.adapter_layout()
            .entries()
            .iter()
            .map(|e| if e.name.ends_with("down.w") { 1.0 / d.sqrt() } else { 0.0 })
            .collect()
    }

    pub fn init_backbone<R: Rng + ?Sized>(&self, vocab_size: usize, rng: &mut R) -> Tensor {
        let layout = self.backbone_layout(vocab_size);
        init_flat(&layout, &self.backbone_init_stds(vocab_size), rng)
    }

    pub fn init_adapters<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        init_flat(&self.adapter_layout(), &self.adapter_init_stds(), rng)
    }
}

/// Draws every entry from `N(0, std)`; a NaN std means "all ones"
/// (layer-norm gains).
pub(crate) fn init_flat<R: Rng + ?Sized>(layout: &ParamLayout, stds: &[f64], rng: &mut R) -> Tensor {
    let parts: Vec<Tensor> = layout
        .entries()
        .iter()
        .zip(stds)
        .map(|(e, &std)| {
            if std.is_nan() {
                Tensor::full(&e.shape, 1.0)
            } else {
                init_tensor(&e.shape, std, rng)
            }
        })
        .collect();
    layout.flatten(&parts).expect("layout shapes")
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln1: (Var, Var),
    pub ff1: (Var, Var),
    pub ff2: (Var, Var),
    pub ln2: (Var, Var),
}

#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
}

impl BackboneVars {
    pub fn bind(tape: &mut Tape, cfg: &EncoderConfig, vocab_size: usize, flat: Var) -> Self {
        let v = cfg.backbone_layout(vocab_size).bind(tape, flat);
        let layers = v[2..]
            .chunks(16)
            .map(|c| LayerVars {
                wq: c[0],
                bq: c[1],
                wk: c[2],
                bk: c[3],
                wv: c[4],
                bv: c[5],
                wo: c[6],
                bo: c[7],
                ln1: (c[8], c[9]),
                ff1: (c[10], c[11]),
                ff2: (c[12], c[13]),
                ln2: (c[14], c[15]),
            })
            .collect();
        BackboneVars {
            tok_emb: v[0],
            pos_emb: v[1],
            layers,
        }
    }
}

/// One adapter slot.
#[derive(Clone, Copy, Debug)]
pub struct AdapterSlot {
    pub down: (Var, Var),
    pub up: (Var, Var),
}

#[derive(Clone, Debug)]
pub struct AdapterVars {
    pub slots: Vec<[AdapterSlot; 2]>,
}

impl AdapterVars {
    pub fn bind(tape: &mut Tape, cfg: &EncoderConfig, flat: Var) -> Self {
        let v = cfg.adapter_layout().bind(tape, flat);
        let slot = |c: &[Var]| AdapterSlot {
            down: (c[0], c[1]),
            up: (c[2], c[3]),
        };
        let slots = v.chunks(8).map(|c| [slot(&c[..4]), slot(&c[4..])]).collect();
        AdapterVars { slots }
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

/// Token plus position embedding for each id.
pub fn embed_tokens(tape: &mut Tape, backbone: &BackboneVars, ids: &[usize]) -> Var {
    let positions: Vec<usize> = (0..ids.len()).collect();
    let tok = tape.gather_rows(backbone.tok_emb, ids);
    let pos = tape.gather_rows(backbone.pos_emb, &positions);
    tape.add(tok, pos)
}

/// `x + Up(gelu(Down(x)))`, row-wise.
pub fn adapter_apply(tape: &mut Tape, x: Var, slot: &AdapterSlot) -> Var {
    let h = linear(tape, x, slot.down.0, slot.down.1);
    let h = tape.gelu(h);
    let h = linear(tape, h, slot.up.0, slot.up.1);
    tape.add(x, h)
}

/// Encoder output plus the attention matrices of every layer and head
/// (layer-major).
#[derive(Clone, Debug)]
pub struct Encoded {
    pub output: Var,
    pub attention: Vec<Var>,
}

fn attention(tape: &mut Tape, cfg: &EncoderConfig, lv: &LayerVars, x: Var, probs: &mut Vec<Var>) -> Result<Var, TapeError> {
    let q = linear(tape, x, lv.wq, lv.bq);
    let k = linear(tape, x, lv.wk, lv.bk);
    let v = linear(tape, x, lv.wv, lv.bv);
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut contexts = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (start, end) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, start, end);
        let kh = tape.slice_cols(k, start, end);
        let vh = tape.slice_cols(v, start, end);
        let scores = tape.matmul_t(qh, kh, false, true);
        let scores = tape.scale(scores, scale);
        let p = tape.softmax_rows(scores, None)?;
        probs.push(p);
        contexts.push(tape.matmul(p, vh));
    }
    let ctx = if contexts.len() == 1 {
        contexts[0]
    } else {
        tape.concat_cols(&contexts)
    };
    Ok(linear(tape, ctx, lv.wo, lv.bo))
}

/// Runs the encoder over token ids. `adapters = None` gives the plain
/// encoder.
pub fn encode<R: Rng + ?Sized>(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    backbone: &BackboneVars,
    adapters: Option<&AdapterVars>,
    ids: &[usize],
    dropout: f64,
    rng: &mut R,
) -> Result<Encoded, EncoderError> {
    if ids.len() > cfg.maxlen {
        return Err(EncoderError::TooLong {
            len: ids.len().saturating_sub(1),
            maxlen: cfg.maxlen,
        });
    }
    let mut x = embed_tokens(tape, backbone, ids);
    let mut probs = Vec::new();
    for (l, lv) in backbone.layers.iter().enumerate() {
        let slots = adapters.map(|a| &a.slots[l]);

        let a = attention(tape, cfg, lv, x, &mut probs)?;
        let mut a = tape.dropout(a, dropout, rng);
        if let Some(s) = slots {
            a = adapter_apply(tape, a, &s[0]);
        }
        let sum = tape.add(x, a);
        x = tape.layer_norm(sum, lv.ln1.0, lv.ln1.1);

        let f = linear(tape, x, lv.ff1.0, lv.ff1.1);
        let f = tape.gelu(f);
        let f = linear(tape, f, lv.ff2.0, lv.ff2.1);
        let mut f = tape.dropout(f, dropout, rng);
        if let Some(s) = slots {
            f = adapter_apply(tape, f, &s[1]);
        }
        let sum = tape.add(x, f);
        x = tape.layer_norm(sum, lv.ln2.0, lv.ln2.1);
    }
    Ok(Encoded {
        output: x,
        attention: probs,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::conllu::Token;
    use crate::numcore::gelu_scalar;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            layers: 2,
            heads: 2,
            ff: 12,
            maxlen: 10,
            adapter: 3,
        }
    }

    fn sentence(forms: &[&str]) -> Sentence {
        Sentence {
            tokens: forms
                .iter()
                .enumerate()
                .map(|(i, f)| Token::new(i + 1, f, 0, "dep"))
                .collect(),
            comments: Vec::new(),
            lang: "xx".into(),
        }
    }

    fn vocab() -> Vocab {
        Vocab::build(["a", "b", "c", "d"])
    }

    struct Setup {
        backbone: Tensor,
        adapters: Tensor,
    }

    fn setup(seed: u64) -> Setup {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = cfg().init_backbone(vocab().len(), &mut rng);
        let mut adapters = cfg().init_adapters(&mut rng);
        // Non-zero up projections so adapters matter.
        for v in adapters.data_mut() {
            if *v == 0.0 {
                *v = rng.random_range(-0.3..0.3);
            }
        }
        Setup { backbone, adapters }
    }

    fn run(backbone: &Tensor, adapters: Option<&Tensor>, ids: &[usize], vocab_size: usize) -> (Tensor, Vec<Tensor>) {
        let mut tape = Tape::new();
        let b = tape.constant(backbone.clone());
        let bv = BackboneVars::bind(&mut tape, &cfg(), vocab_size, b);
        let av = adapters.map(|a| {
            let a = tape.constant(a.clone());
            AdapterVars::bind(&mut tape, &cfg(), a)
        });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = encode(&mut tape, &cfg(), &bv, av.as_ref(), ids, 0.0, &mut rng).unwrap();
        let att = out.attention.iter().map(|&p| tape.value(p).clone()).collect();
        (tape.value(out.output).clone(), att)
    }

    #[test]
    fn vocab_specials_and_unknowns() {
        let v = vocab();
        assert_eq!(v.id("<root>"), ROOT);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(Vocab::from_tokens(v.tokens().to_vec()).unwrap(), v);
        assert_eq!(Vocab::from_tokens(vec!["x".into()]), Err(EncoderError::BadSpecials));
    }

    #[test]
    fn token_ids_and_masking() {
        let v = vocab();
        let s = sentence(&["a", "q", "c"]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(v.token_ids(&s, 10, 0.0, true, &mut rng).unwrap(), vec![ROOT, 4, UNK, 6]);
        assert_eq!(v.token_ids(&s, 10, 1.0, true, &mut rng).unwrap(), vec![ROOT, MASK, MASK, MASK]);
        // Not training: masking is off.
        assert_eq!(v.token_ids(&s, 10, 1.0, false, &mut rng).unwrap(), vec![ROOT, 4, UNK, 6]);
        assert_eq!(
            v.token_ids(&s, 3, 0.0, false, &mut rng),
            Err(EncoderError::TooLong { len: 3, maxlen: 3 })
        );
    }

    #[test]
    fn embedding_is_token_plus_position() {
        let Setup { backbone, .. } = setup(2);
        let parts = cfg().backbone_layout(vocab().len()).unflatten(&backbone).unwrap();
        let ids = [ROOT, 5, UNK];
        let mut tape = Tape::new();
        let b = tape.constant(backbone.clone());
        let bv = BackboneVars::bind(&mut tape, &cfg(), vocab().len(), b);
        let e = embed_tokens(&mut tape, &bv, &ids);
        for (i, &id) in ids.iter().enumerate() {
            for c in 0..8 {
                let want = parts[0].at(id, c) + parts[1].at(i, c);
                assert_eq!(tape.value(e).at(i, c), want);
            }
        }
    }

    #[test]
    fn zero_up_projection_adapter_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap());
        let slot = AdapterSlot {
            down: (tape.constant(Tensor::full(&[2, 1], 0.7)), tape.constant(Tensor::full(&[1], 0.1))),
            up: (tape.constant(Tensor::zeros(&[1, 2])), tape.constant(Tensor::zeros(&[2]))),
        };
        let y = adapter_apply(&mut tape, x, &slot);
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn adapter_hand_case() {
        let rows = [[1.0, -2.0], [0.5, 3.0], [0.0, 0.0]];
        let (dw, db) = ([0.4, -0.3], 0.2);
        let (uw, ub) = ([1.5, -0.5], [0.1, 0.2]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&rows.map(|r| r.to_vec())).unwrap());
        let slot = AdapterSlot {
            down: (
                tape.constant(Tensor::new(vec![2, 1], dw.to_vec()).unwrap()),
                tape.constant(Tensor::new(vec![1], vec![db]).unwrap()),
            ),
            up: (
                tape.constant(Tensor::new(vec![1, 2], uw.to_vec()).unwrap()),
                tape.constant(Tensor::new(vec![2], ub.to_vec()).unwrap()),
            ),
        };
        let y = adapter_apply(&mut tape, x, &slot);
        for (r, row) in rows.iter().enumerate() {
            let h = gelu_scalar(row[0] * dw[0] + row[1] * dw[1] + db);
            for c in 0..2 {
                let want = row[c] + h * uw[c] + ub[c];
                assert!((tape.value(y).at(r, c) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn adapter_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (n, d, a) in [(1, 3, 1), (5, 4, 2), (7, 6, 5)] {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::randn(&[n, d], 1.0, &mut rng));
            let slot = AdapterSlot {
                down: (tape.constant(Tensor::randn(&[d, a], 1.0, &mut rng)), tape.constant(Tensor::zeros(&[a]))),
                up: (tape.constant(Tensor::randn(&[a, d], 1.0, &mut rng)), tape.constant(Tensor::zeros(&[d]))),
            };
            let y = adapter_apply(&mut tape, x, &slot);
            assert_eq!(tape.value(y).shape(), &[n, d]);
        }
    }

    #[test]
    fn fresh_adapters_leave_encoder_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let backbone = cfg().init_backbone(vocab().len(), &mut rng);
        let adapters = cfg().init_adapters(&mut rng);
        let ids = [ROOT, 4, 5, 1, 7];
        let (with, _) = run(&backbone, Some(&adapters), &ids, vocab().len());
        let (without, _) = run(&backbone, None, &ids, vocab().len());
        assert_eq!(with, without);
        let Setup { adapters: busy, .. } = setup(4);
        let (changed, _) = run(&backbone, Some(&busy), &ids, vocab().len());
        assert_ne!(changed, without);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let Setup { backbone, adapters } = setup(5);
        let (_, att) = run(&backbone, Some(&adapters), &[ROOT, 4, 6, 6], vocab().len());
        assert_eq!(att.len(), 4);
        for p in att {
            assert_eq!(p.shape(), &[4, 4]);
            for r in 0..4 {
                assert!(p.row(r).iter().all(|&v| v >= 0.0));
                assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        let Setup { backbone, adapters } = setup(6);
        let ids = [ROOT, 4, 5];
        assert_eq!(
            run(&backbone, Some(&adapters), &ids, vocab().len()).0,
            run(&backbone, Some(&adapters), &ids, vocab().len()).0
        );
    }

    #[test]
    fn vocab_permutation_invariance() {
        let Setup { backbone, adapters } = setup(7);
        let v = vocab().len();
        let layout = cfg().backbone_layout(v);
        let mut parts = layout.unflatten(&backbone).unwrap();
        // Swap ids 4 and 6 in both the embedding table and the input.
        let d = cfg().d_model;
        let emb = parts[0].data_mut();
        for c in 0..d {
            emb.swap(4 * d + c, 6 * d + c);
        }
        let permuted = layout.flatten(&parts).unwrap();
        let (a, _) = run(&backbone, Some(&adapters), &[ROOT, 4, 5, 6], v);
        let (b, _) = run(&permuted, Some(&adapters), &[ROOT, 6, 5, 4], v);
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_backbone_gets_no_gradient() {
        let Setup { backbone, adapters } = setup(8);
        let v = vocab().len();
        let ids = [ROOT, 4, 5, 7];
        let weights = Tensor::randn(&[4, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let loss_of = |bb: &Tensor| {
            let mut tape = Tape::new();
            let b = tape.constant(bb.clone());
            let a = tape.param(adapters.clone());
            let bv = BackboneVars::bind(&mut tape, &cfg(), v, b);
            let av = AdapterVars::bind(&mut tape, &cfg(), a);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = encode(&mut tape, &cfg(), &bv, Some(&av), &ids, 0.0, &mut rng).unwrap();
            let w = tape.constant(weights.clone());
            let prod = tape.mul(out.output, w);
            let loss = tape.sum(prod);
            let grads = tape.backward(loss).unwrap();
            (tape.value(loss).data()[0], grads.get(b).is_some(), grads.get(a).cloned())
        };
        let (_, backbone_grad, adapter_grad) = loss_of(&backbone);
        assert!(!backbone_grad);
        let adapter_grad = adapter_grad.unwrap();
        assert!(adapter_grad.data().iter().any(|&g| g != 0.0));

        // The backbone does influence the loss: a finite difference on one
        // query weight of layer 0 is non-zero.
        let offset = cfg().backbone_layout(v).find("l0.wq").unwrap().offset + 3;
        let h = 1e-5;
        let mut plus = backbone.clone();
        plus.data_mut()[offset] += h;
        let mut minus = backbone.clone();
        minus.data_mut()[offset] -= h;
        let fd = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h);
        assert!(fd.abs() > 1e-8, "{fd}");
    }

    #[test]
    fn overlong_ids_rejected() {
        let Setup { backbone, .. } = setup(10);
        let mut tape = Tape::new();
        let b = tape.constant(backbone);
        let bv = BackboneVars::bind(&mut tape, &cfg(), vocab().len(), b);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ids = vec![ROOT; 11];
        assert!(matches!(
            encode(&mut tape, &cfg(), &bv, None, &ids, 0.0, &mut rng),
            Err(EncoderError::TooLong { len: 10, maxlen: 10 })
        ));
    }

    #[test]
    fn adapter_slot_parameter_count() {
        let c = EncoderConfig {
            d_model: 768,
            layers: 12,
            heads: 12,
            ff: 3072,
            maxlen: 512,
            adapter: 256,
        };
        let per_slot = 2 * 256 * 768 + 256 + 768;
        assert_eq!(c.adapter_layout().total(), 24 * per_slot);
    }
}
