//! Minibatch transducer training under a freeze regime.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointAverager};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::optim::{Adam, Schedule};
use crate::params::{NamedGrads, ParamStore};
use crate::synth::{spec_augment, transcript_ids, SpecAugmentConfig, Utterance};
use crate::tensor::Tensor;
use crate::text::Vocabulary;

/// Which parameters train.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    #[default]
    All,
    /// Encoder attention kernels (self and cross) plus the prompt path.
    MhaAndProjections,
    /// Prompt projections, prompt LN and learned context table.
    ProjectionsOnly,
}

const ATTENTION_KERNELS: [&str; 8] = ["w_q", "w_k", "w_v", "w_o", "w_qca", "w_kca", "w_vca", "w_oca"];

fn is_prompt_path(name: &str) -> bool {
    name.starts_with("prompt.")
}

fn is_attention_kernel(name: &str) -> bool {
    name.starts_with("enc.blocks.")
        && name
            .rsplit_once(".attn.")
            .is_some_and(|(_, k)| ATTENTION_KERNELS.contains(&k))
}

impl Regime {
    pub fn trainable(self, name: &str) -> bool {
        match self {
            Regime::All => true,
            Regime::MhaAndProjections => is_prompt_path(name) || is_attention_kernel(name),
            Regime::ProjectionsOnly => is_prompt_path(name),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub total_steps: usize,
    pub batch_size: usize,
    pub regime: Regime,
    pub checkpoint_interval: usize,
    pub n_average: usize,
    /// Global gradient-norm ceiling.
    pub grad_clip: Option<f64>,
    pub spec_augment: SpecAugmentConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk(total_steps: usize, seed: u64) -> Self {
        TrainConfig {
            schedule: Schedule {
                lr_peak: 3e-3,
                warmup_steps: 200,
                decay_rate: 0.5,
                decay_interval: 1000,
            },
            total_steps,
            batch_size: 8,
            regime: Regime::All,
            checkpoint_interval: 100,
            n_average: 5,
            grad_clip: Some(5.0),
            spec_augment: SpecAugmentConfig {
                n_time_masks: 1,
                time_width: 3,
                n_feat_masks: 1,
                feat_width: 2,
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.warmup_steps >= self.total_steps {
            return Err(Error::Config("warm-up must be shorter than training".into()));
        }
        if self.n_average == 0 || self.batch_size == 0 || self.checkpoint_interval == 0 {
            return Err(Error::Config("batch size, checkpoint interval and n_average must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Example {
    pub features: Tensor,
    pub target: Vec<usize>,
    pub context: Vec<usize>,
}

impl Example {
    /// `with_context = false` drops the labelled context.
    pub fn from_utterance(vocab: &Vocabulary, utt: &Utterance, with_context: bool) -> Self {
        Example {
            features: utt.features.clone(),
            target: transcript_ids(vocab, &utt.transcript),
            context: if with_context { vocab.tokenize(&utt.context_text) } else { Vec::new() },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Default)]
pub struct TrainReport {
    pub log: Vec<MetricRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub trainable_params: usize,
    pub total_params: usize,
}

fn example_grads(model: &Model, ex: &Example, features: &Tensor) -> Result<(f64, NamedGrads)> {
    let g = Graph::new();
    let loss = model.loss(&g, features, &ex.target, &ex.context)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let grads = g.backward(loss)?;
    Ok((
        value,
        grads.named().into_iter().map(|(n, v)| (n.to_string(), v.to_vec())).collect(),
    ))
}

/// Trains `model` in place and leaves it holding the mean of the last
/// `n_average` checkpoints. Checkpoints and `metrics.jsonl` go to `out_dir`
/// when given.
pub fn train(model: &mut Model, data: &[Example], cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("train", "no training examples"));
    }
    let regime = cfg.regime;
    model.params.apply_mask(|n| regime.trainable(n));
    let mut report = TrainReport {
        trainable_params: model.params.count_trainable(),
        total_params: model.params.count(),
        ..TrainReport::default()
    };
    let mut metrics = match out_dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            Some(std::io::BufWriter::new(fs::File::create(d.join("metrics.jsonl"))?))
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut adam = Adam::default();
    let mut recent: VecDeque<ParamStore> = VecDeque::with_capacity(cfg.n_average);

    for step in 1..=cfg.total_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = &data[order[cursor]];
            cursor += 1;
            batch.push((ex, spec_augment(&ex.features, &cfg.spec_augment, &mut rng)));
        }
        let results: Vec<(f64, NamedGrads)> = batch
            .par_iter()
            .map(|(ex, feats)| example_grads(model, ex, feats))
            .collect::<Result<_>>()?;
        let loss = results.iter().map(|r| r.0).sum::<f64>() / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        model.params.zero_grad();
        for (_, grads) in &results {
            model.params.accumulate(grads)?;
        }
        model.params.scale_grads(1.0 / cfg.batch_size as f64);
        if let Some(clip) = cfg.grad_clip {
            let norm = model.params.grad_norm();
            if norm > clip {
                model.params.scale_grads(clip / norm);
            }
        }
        let lr = cfg.schedule.lr(step);
        adam.step(&mut model.params, lr, step);

        let rec = MetricRecord { step, loss, lr };
        if let Some(w) = &mut metrics {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
        report.log.push(rec);

        if step % cfg.checkpoint_interval == 0 || step == cfg.total_steps {
            let mut snap = model.params.clone();
            snap.zero_grad();
            if let Some(d) = out_dir {
                let p = d.join(format!("ckpt-{step:06}.bin"));
                checkpoint::write_checkpoint(&p, &snap)?;
                report.checkpoints.push(p);
            }
            if recent.len() == cfg.n_average {
                recent.pop_front();
            }
            recent.push_back(snap);
        }
    }
    if let Some(w) = &mut metrics {
        w.flush()?;
    }

    let mut avg = CheckpointAverager::new();
    for s in &recent {
        avg.add(s)?;
    }
    let mut averaged = avg.finish()?;
    averaged.apply_mask(|n| regime.trainable(n));
    model.params = averaged;
    Ok(report)
}
