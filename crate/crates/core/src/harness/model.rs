//! The parser model: named parameter groups plus the forward pass shared by
//! training and inference.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Backbone, TrainConfig};
use crate::conllu::Sentence;
use crate::cpg::{
    generate_on_tape, init_generator, resolve_language_vector, LangEmbedNet, LangNetVars, LangVecMode,
    LanguageEmbedding,
};
use crate::encoder::{encode, AdapterVars, BackboneVars, Vocab};
use crate::error::{Error, Result};
use crate::numcore::{Tape, TapeError, Tensor, Var};
use crate::parser::{
    argmax_labels, decode_mst, parse_loss, project, score_arcs, score_labels, BiaffineDims, BiaffineVars,
    Projection, ScoreMatrix,
};
use crate::typology::TypologyTable;

pub const BACKBONE: &str = "backbone";
pub const LANGNET: [&str; 4] = ["langnet.w1", "langnet.b1", "langnet.w2", "langnet.b2"];
pub const LANGVEC_PREFIX: &str = "langvec.";
pub const GEN_ADAPTERS: &str = "gen.adapters";
pub const GEN_BIAFFINE: &str = "gen.biaffine";
pub const SHARED_ADAPTERS: &str = "shared.adapters";
pub const SHARED_BIAFFINE: &str = "shared.biaffine";

/// Sentences parsed per tape at inference time.
const PARSE_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub labels: Vec<String>,
    /// Training languages, sorted.
    pub languages: Vec<String>,
    pub typology: TypologyTable,
    pub params: BTreeMap<String, Tensor>,
}

/// Where the language vector of a forward pass comes from.
#[derive(Clone, Debug)]
pub enum LangSource<'a> {
    /// The training-time path for a training language; its parameters are
    /// on the tape.
    Train(&'a str),
    /// A precomputed vector, or none for an unconditioned model.
    Fixed(Option<LanguageEmbedding>),
}

struct Bound {
    backbone: BackboneVars,
    adapters: AdapterVars,
    biaffine: BiaffineVars,
    leaves: Vec<(String, Var)>,
}

/// Loss of a batch and, when requested, gradients of every trainable group
/// that took part in it.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub loss: f64,
    pub tokens: usize,
    pub grads: BTreeMap<String, Tensor>,
}

/// Per-token predictions for one sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub heads: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Model {
    /// Fresh parameters drawn from `rng`.
    pub fn init<R: Rng + ?Sized>(
        config: TrainConfig,
        vocab: Vocab,
        labels: Vec<String>,
        mut languages: Vec<String>,
        typology: TypologyTable,
        rng: &mut R,
    ) -> Self {
        languages.sort();
        languages.dedup();
        let enc = config.encoder();
        let dims = BiaffineDims {
            input: config.d_model,
            arc: config.arc_dim,
            label: config.label_dim,
            labels: labels.len(),
        };
        let m = config.lang_dim;
        let mut params = BTreeMap::new();
        params.insert(BACKBONE.to_string(), enc.init_backbone(vocab.len(), rng));
        if config.cpg_mode.conditioned() {
            match config.langvec_mode {
                LangVecMode::Learned => {
                    for code in &languages {
                        params.insert(format!("{LANGVEC_PREFIX}{code}"), Tensor::randn(&[1, m], 1.0, rng));
                    }
                }
                _ => {
                    let net = LangEmbedNet::init(config.lang_hidden, m, rng);
                    for (name, t) in LANGNET.iter().zip([net.w1, net.b1, net.w2, net.b2]) {
                        params.insert(name.to_string(), t);
                    }
                }
            }
        }
        let ad_layout = enc.adapter_layout();
        if config.cpg_mode.generates_adapters() {
            params.insert(
                GEN_ADAPTERS.to_string(),
                init_generator(&ad_layout, &enc.adapter_init_stds(), m, rng),
            );
        } else {
            params.insert(SHARED_ADAPTERS.to_string(), enc.init_adapters(rng));
        }
        if config.cpg_mode.generates_biaffine() {
            params.insert(
                GEN_BIAFFINE.to_string(),
                init_generator(&dims.layout(), &dims.init_stds(), m, rng),
            );
        } else {
            params.insert(SHARED_BIAFFINE.to_string(), dims.init(rng));
        }
        Model {
            config,
            vocab,
            labels,
            languages,
            typology,
            params,
        }
    }

    pub fn dims(&self) -> BiaffineDims {
        BiaffineDims {
            input: self.config.d_model,
            arc: self.config.arc_dim,
            label: self.config.label_dim,
            labels: self.labels.len(),
        }
    }

    pub fn param(&self, name: &str) -> &Tensor {
        self.params.get(name).unwrap_or_else(|| panic!("missing parameter group {name}"))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        name != BACKBONE || self.config.backbone == Backbone::Trainable
    }

    /// Names of the groups the optimizer updates, in a fixed order.
    pub fn trainable_groups(&self) -> Vec<String> {
        self.params.keys().filter(|n| self.is_trainable(n)).cloned().collect()
    }

    pub fn lang_net(&self) -> Option<LangEmbedNet> {
        let p = |i: usize| self.params.get(LANGNET[i]).cloned();
        Some(LangEmbedNet {
            w1: p(0)?,
            b1: p(1)?,
            w2: p(2)?,
            b2: p(3)?,
        })
    }

    /// Embeddings of the training languages: the learned vectors, or for a
    /// typology model the network's output on each training language.
    pub fn learned_store(&self) -> BTreeMap<String, Vec<f64>> {
        let net = self.lang_net();
        self.languages
            .iter()
            .filter_map(|code| {
                if let Some(t) = self.params.get(&format!("{LANGVEC_PREFIX}{code}")) {
                    return Some((code.clone(), t.data().to_vec()));
                }
                let net = net.as_ref()?;
                let typ = self.typology.get(code).ok()?;
                Some((code.clone(), net.embed(typ.values()).ok()?.values))
            })
            .collect()
    }

    /// Language vector for inference, or `None` for an unconditioned model.
    pub fn resolve(&self, code: &str, mode: &LangVecMode) -> Result<Option<LanguageEmbedding>> {
        if !self.config.cpg_mode.conditioned() {
            return Ok(None);
        }
        let net = self.lang_net();
        Ok(Some(resolve_language_vector(
            code,
            mode,
            &self.typology,
            net.as_ref(),
            &self.learned_store(),
        )?))
    }

    fn leaf(&self, tape: &mut Tape, name: &str, track: bool, leaves: &mut Vec<(String, Var)>) -> Var {
        let trainable = track && self.is_trainable(name);
        let v = tape.leaf(self.param(name).clone(), trainable);
        if trainable {
            leaves.push((name.to_string(), v));
        }
        v
    }

    fn bind(&self, tape: &mut Tape, source: &LangSource<'_>, track: bool) -> Result<Bound> {
        let enc = self.config.encoder();
        let mode = self.config.cpg_mode;
        let mut leaves = Vec::new();
        let backbone = self.leaf(tape, BACKBONE, track, &mut leaves);
        let backbone = BackboneVars::bind(tape, &enc, self.vocab.len(), backbone);

        let lang = if mode.conditioned() {
            Some(match source {
                LangSource::Fixed(Some(e)) => tape.constant(e.as_row()),
                LangSource::Fixed(None) => {
                    return Err(Error::Data("a language vector is required by this model".into()))
                }
                LangSource::Train(code) => {
                    let learned = format!("{LANGVEC_PREFIX}{code}");
                    if self.params.contains_key(&learned) {
                        self.leaf(tape, &learned, track, &mut leaves)
                    } else if self.params.contains_key(LANGNET[0]) {
                        let typ = self.typology.get(code)?;
                        let [w1, b1, w2, b2] = LANGNET.map(|n| self.leaf(tape, n, track, &mut leaves));
                        LangNetVars { w1, b1, w2, b2 }.embed(tape, typ.values())?
                    } else {
                        return Err(crate::cpg::CpgError::Unseen(code.to_string()).into());
                    }
                }
            })
        } else {
            None
        };

        let adapters = if mode.generates_adapters() {
            let w = self.leaf(tape, GEN_ADAPTERS, track, &mut leaves);
            generate_on_tape(tape, w, lang.expect("conditioned"))
        } else {
            self.leaf(tape, SHARED_ADAPTERS, track, &mut leaves)
        };
        let adapters = AdapterVars::bind(tape, &enc, adapters);

        let biaffine = if mode.generates_biaffine() {
            let w = self.leaf(tape, GEN_BIAFFINE, track, &mut leaves);
            generate_on_tape(tape, w, lang.expect("conditioned"))
        } else {
            self.leaf(tape, SHARED_BIAFFINE, track, &mut leaves)
        };
        let biaffine = BiaffineVars::bind(tape, &self.dims(), biaffine);
        Ok(Bound {
            backbone,
            adapters,
            biaffine,
            leaves,
        })
    }

    fn label_ids(&self, s: &Sentence) -> Result<Vec<usize>> {
        s.tokens
            .iter()
            .map(|t| {
                self.labels
                    .binary_search(&t.deprel)
                    .map_err(|_| Error::Data(format!("relation {:?} is not in the label inventory", t.deprel)))
            })
            .collect()
    }

    /// Token-weighted mean loss of a monolingual batch. With `training`,
    /// word masking and dropout are active. With `grads`, gradients of the
    /// trainable groups are returned.
    pub fn batch_loss<R: Rng + ?Sized>(
        &self,
        source: &LangSource<'_>,
        sentences: &[&Sentence],
        training: bool,
        grads: bool,
        rng: &mut R,
    ) -> Result<BatchLoss> {
        let cfg = &self.config;
        let enc = cfg.encoder();
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, source, grads)?;
        let (mask, enc_drop, drop) = if training {
            (cfg.mask_prob, cfg.encoder_dropout, cfg.dropout)
        } else {
            (0.0, 0.0, 0.0)
        };
        let mut total: Option<Var> = None;
        let mut tokens = 0;
        for s in sentences.iter().filter(|s| !s.is_empty()) {
            let ids = self.vocab.token_ids(s, cfg.maxlen, mask, training, rng)?;
            let gold_labels = self.label_ids(s)?;
            let r = encode(&mut tape, &enc, &b.backbone, Some(&b.adapters), &ids, enc_drop, rng)?.output;
            let [ah, at, lh, lt] = [
                Projection::ArcHead,
                Projection::ArcTail,
                Projection::LabelHead,
                Projection::LabelTail,
            ]
            .map(|p| project(&mut tape, r, p, &b.biaffine, drop, rng));
            let arcs = score_arcs(&mut tape, ah, at, &b.biaffine);
            let heads = s.heads();
            let labels = score_labels(&mut tape, lh, lt, &heads, &b.biaffine)?;
            let loss = parse_loss(&mut tape, arcs, labels, &heads, &gold_labels, cfg.smoothing())?;
            let weighted = tape.scale(loss, s.len() as f64);
            total = Some(match total {
                Some(t) => tape.add(t, weighted),
                None => weighted,
            });
            tokens += s.len();
        }
        let Some(total) = total else {
            return Ok(BatchLoss {
                loss: 0.0,
                tokens: 0,
                grads: BTreeMap::new(),
            });
        };
        let loss = tape.scale(total, 1.0 / tokens as f64);
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(TapeError::NonFinite("loss").into());
        }
        let mut out = BTreeMap::new();
        if grads {
            let mut g = tape.backward(loss)?;
            for (name, v) in &b.leaves {
                if let Some(t) = g.take(*v) {
                    out.insert(name.clone(), t);
                }
            }
        }
        Ok(BatchLoss {
            loss: value,
            tokens,
            grads: out,
        })
    }

    /// Head-major arc scores of one sentence under a given language vector.
    pub fn arc_scores(&self, s: &Sentence, lang: Option<LanguageEmbedding>) -> Result<ScoreMatrix> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, &LangSource::Fixed(lang), false)?;
        let (arcs, _, _) = self.score_one(&mut tape, &b, s)?;
        Ok(ScoreMatrix::from_dependent_major(tape.value(arcs)))
    }

    fn score_one(&self, tape: &mut Tape, b: &Bound, s: &Sentence) -> Result<(Var, Var, Var)> {
        let enc = self.config.encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ids = self.vocab.token_ids(s, self.config.maxlen, 0.0, false, &mut rng)?;
        let r = encode(tape, &enc, &b.backbone, Some(&b.adapters), &ids, 0.0, &mut rng)?.output;
        let [ah, at, lh, lt] = [
            Projection::ArcHead,
            Projection::ArcTail,
            Projection::LabelHead,
            Projection::LabelTail,
        ]
        .map(|p| project(tape, r, p, &b.biaffine, 0.0, &mut rng));
        Ok((score_arcs(tape, ah, at, &b.biaffine), lh, lt))
    }

    /// Decodes every sentence with the given language vector.
    pub fn predict(&self, sentences: &[Sentence], lang: Option<LanguageEmbedding>) -> Result<Vec<Prediction>> {
        let source = LangSource::Fixed(lang);
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(PARSE_CHUNK) {
            let mut tape = Tape::new();
            let b = self.bind(&mut tape, &source, false)?;
            for s in chunk {
                if s.is_empty() {
                    out.push(Prediction {
                        heads: Vec::new(),
                        labels: Vec::new(),
                    });
                    continue;
                }
                let (arcs, lh, lt) = self.score_one(&mut tape, &b, s)?;
                if !tape.value(arcs).all_finite() {
                    return Err(TapeError::NonFinite("arc scores").into());
                }
                let heads = decode_mst(&ScoreMatrix::from_dependent_major(tape.value(arcs)));
                let scores = score_labels(&mut tape, lh, lt, &heads, &b.biaffine)?;
                let labels = argmax_labels(tape.value(scores));
                out.push(Prediction { heads, labels });
            }
        }
        Ok(out)
    }

    /// Copies of `sentences` with predicted heads and relations.
    pub fn parse(&self, sentences: &[Sentence], lang: &str, mode: &LangVecMode) -> Result<Vec<Sentence>> {
        let vector = self.resolve(lang, mode)?;
        let preds = self.predict(sentences, vector)?;
        Ok(sentences
            .iter()
            .zip(preds)
            .map(|(s, p)| {
                let mut s = s.clone();
                for (t, (&h, &y)) in s.tokens.iter_mut().zip(p.heads.iter().zip(&p.labels)) {
                    t.head = h;
                    t.deprel = self.labels[y].clone();
                }
                s
            })
            .collect())
    }
}
