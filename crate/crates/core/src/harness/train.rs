use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::evaluate;
use super::eval::Metrics;
use super::model::{LangSource, Model, BACKBONE};
use crate::conllu::{Sentence, Treebank};
use crate::cpg::{CpgError, LangVecMode};
use crate::encoder::Vocab;
use crate::error::{Error, Result};
use crate::numcore::{lr_at_step, AdamState, Tensor};
use crate::typology::TypologyTable;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub steps: u64,
    pub train_loss: f64,
    pub dev_las: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept (best dev macro LAS), if dev data
    /// was given.
    pub best_epoch: Option<usize>,
    pub best_dev: Option<Metrics>,
    /// Training sentences dropped for exceeding the encoder length.
    pub skipped: usize,
    pub steps: u64,
    pub warmup: u64,
}

fn update(model: &mut Model, adam: &mut AdamState, groups: &[String], grads: &BTreeMap<String, Tensor>, lr: f64) {
    if groups.is_empty() {
        return;
    }
    let g: Vec<Option<&Tensor>> = groups.iter().map(|n| grads.get(n)).collect();
    let mut params: Vec<&mut Tensor> = model
        .params
        .iter_mut()
        .filter(|(n, _)| groups.contains(n))
        .map(|(_, t)| t)
        .collect();
    adam.step(&mut params, &g, lr);
}

struct Batch<'a> {
    lang: &'a str,
    sentences: Vec<&'a Sentence>,
}

fn epoch_batches<'a>(data: &'a [(String, Vec<Sentence>)], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Batch<'a>> {
    let mut batches = Vec::new();
    for (lang, sentences) in data {
        let mut order: Vec<usize> = (0..sentences.len()).collect();
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            batches.push(Batch {
                lang,
                sentences: chunk.iter().map(|&i| &sentences[i]).collect(),
            });
        }
    }
    batches.shuffle(rng);
    batches
}

/// Trains a model on monolingual batches drawn from all training treebanks.
/// Every batch comes from one treebank; shuffling the pooled batch list
/// samples languages in proportion to treebank size. With dev treebanks, the
/// parameters of the epoch with the best dev macro LAS are returned.
pub fn train(
    config: &TrainConfig,
    train: &[Treebank],
    dev: &[Treebank],
    typology: &TypologyTable,
) -> Result<(Model, TrainReport)> {
    config.validate()?;
    if train.iter().all(|tb| tb.sentences.is_empty()) {
        return Err(Error::Data("no training sentences".into()));
    }
    let needs_typology = config.cpg_mode.conditioned() && config.langvec_mode == LangVecMode::Typology;
    if needs_typology {
        for tb in train {
            if !typology.contains(&tb.lang) {
                return Err(CpgError::NoTypology(tb.lang.clone()).into());
            }
        }
    }

    let mut report = TrainReport::default();
    let mut data: Vec<(String, Vec<Sentence>)> = Vec::new();
    for tb in train {
        let cap = config.max_sentences.get(&tb.lang).copied().unwrap_or(usize::MAX);
        let kept: Vec<Sentence> = tb
            .sentences
            .iter()
            .take(cap)
            .filter(|s| {
                let fits = s.len() + 1 <= config.maxlen;
                if !fits {
                    report.skipped += 1;
                }
                fits && !s.is_empty()
            })
            .cloned()
            .collect();
        data.push((tb.lang.clone(), kept));
    }

    let vocab = Vocab::build(data.iter().flat_map(|(_, s)| s.iter().flat_map(Sentence::forms)));
    let labels: Vec<String> = data
        .iter()
        .flat_map(|(_, s)| s.iter().flat_map(|s| s.tokens.iter().map(|t| t.deprel.clone())))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let languages = data.iter().map(|(l, _)| l.clone()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::init(config.clone(), vocab, labels, languages, typology.clone(), &mut rng);

    let batches_per_epoch: u64 = data
        .iter()
        .map(|(_, s)| s.len().div_ceil(config.batch_size) as u64)
        .sum();
    let mut total_steps = batches_per_epoch * config.epochs as u64;
    if let Some(cap) = config.max_steps {
        total_steps = total_steps.min(cap);
    }
    let warmup = config.warmup_for(total_steps);
    report.warmup = warmup;

    // The backbone gets its own optimizer so that it can run at its own rate.
    let trainable: Vec<String> = model.trainable_groups();
    let (backbone_groups, head_groups): (Vec<String>, Vec<String>) =
        trainable.into_iter().partition(|n| n == BACKBONE);
    let mut adam_backbone = AdamState::new(config.adam, backbone_groups.iter().map(|n| model.param(n)));
    let mut adam_head = AdamState::new(config.adam, head_groups.iter().map(|n| model.param(n)));
    let backbone_lr = config.backbone_lr.unwrap_or(config.lr);

    let mut step = 0u64;
    let mut best: Option<(f64, BTreeMap<String, Tensor>)> = None;
    'epochs: for epoch in 1..=config.epochs {
        if step >= total_steps {
            break;
        }
        let batches = epoch_batches(&data, config.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        let mut token_sum = 0usize;
        for batch in &batches {
            if step >= total_steps {
                break;
            }
            step += 1;
            let lr = lr_at_step(step, config.lr, warmup);
            let out = model.batch_loss(&LangSource::Train(batch.lang), &batch.sentences, true, true, &mut rng)?;
            loss_sum += out.loss * out.tokens as f64;
            token_sum += out.tokens;
            update(&mut model, &mut adam_head, &head_groups, &out.grads, lr);
            let lr_backbone = lr_at_step(step, backbone_lr, warmup);
            update(&mut model, &mut adam_backbone, &backbone_groups, &out.grads, lr_backbone);
        }

        let dev_metrics = if dev.is_empty() {
            None
        } else {
            let mut m = Metrics::default();
            for tb in dev {
                m.merge(&evaluate(&model, tb, &config.langvec_mode)?);
            }
            Some(m)
        };
        let dev_las = dev_metrics.as_ref().map(Metrics::macro_las);
        report.epochs.push(EpochLog {
            epoch,
            steps: step,
            train_loss: if token_sum > 0 { loss_sum / token_sum as f64 } else { 0.0 },
            dev_las,
        });
        if let Some(las) = dev_las {
            if best.as_ref().is_none_or(|(b, _)| las > *b) {
                best = Some((las, model.params.clone()));
                report.best_epoch = Some(epoch);
                report.best_dev = dev_metrics;
            }
            if config.early_stop_las.is_some_and(|target| las >= target) {
                break 'epochs;
            }
        }
    }
    report.steps = step;
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, report))
}
