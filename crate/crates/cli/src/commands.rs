//! Command implementations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ctxasr::checkpoint;
use ctxasr::eval::{decode_all, evaluate, ContextMode};
use ctxasr::model::{Model, ModelConfig};
use ctxasr::synth::{self, gen_corpus, Corpus, SynthConfig};
use ctxasr::train::{self as trainer, Example, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::report::{self, EvalRecord};
use crate::{
    CliError, CliResult, Consumption, DecodeArgs, EvalArgs, ExperimentSpec, Format, GenDataArgs, Phase, RegimeArg,
    ReportArgs, TrainArgs,
};

pub const FINAL_CHECKPOINT: &str = "final.bin";
pub const RUN_INFO: &str = "model.json";

/// Sidecar describing a trained checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub config: ModelConfig,
    pub spec: ExperimentSpec,
    pub total_params: usize,
    pub base_params: usize,
    pub added_params: usize,
    pub trainable_params: usize,
}

pub fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let cfg = SynthConfig {
        vocab_size: a.vocab_size,
        n_homophone_pairs: a.pairs,
        noise: a.noise,
        context_coverage: a.coverage,
        train_sessions: a.train_sessions,
        dev_sessions: a.dev_sessions,
        test_sessions: a.test_sessions,
        ..SynthConfig::with_seed(a.seed)
    };
    cfg.validate()?;
    let corpus = gen_corpus(&cfg)?;
    synth::write_corpus(&a.out, &corpus, Some(&cfg))?;
    let mut total = 0;
    for name in synth::SPLITS {
        let utts = corpus.split(name)?;
        let eligible = utts.iter().filter(|u| !u.id.ends_with("-0")).count();
        let with_ctx = utts.iter().filter(|u| !u.context_text.is_empty()).count();
        total += utts.len();
        println!(
            "{name}: {} utterances, {with_ctx} with context ({:.1}% of {eligible} non-initial turns)",
            utts.len(),
            100.0 * with_ctx as f64 / eligible.max(1) as f64
        );
    }
    println!("total: {total} utterances, vocabulary {}", corpus.vocab.len());
    Ok(())
}

fn read_corpus(dir: &Path) -> CliResult<Corpus> {
    synth::read_corpus(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn feature_dim(corpus: &Corpus) -> CliResult<usize> {
    corpus
        .train
        .iter()
        .chain(&corpus.test)
        .map(|u| u.features.shape()[1])
        .next()
        .ok_or_else(|| CliError::Data("corpus has no utterances".into()))
}

/// Loads a checkpoint and the `model.json` next to it.
pub fn load_model(ckpt: &Path) -> CliResult<(Model, RunInfo)> {
    let info_path = ckpt.parent().unwrap_or(Path::new(".")).join(RUN_INFO);
    let info: RunInfo = serde_json::from_str(
        &fs::read_to_string(&info_path).map_err(|e| CliError::Data(format!("{}: {e}", info_path.display())))?,
    )?;
    let params = checkpoint::read_checkpoint(ckpt).map_err(|e| CliError::Data(format!("{}: {e}", ckpt.display())))?;
    let mut model = Model::from_params(info.config.clone(), params)?;
    let regime = ctxasr::train::Regime::from(info.spec.regime);
    model.params.apply_mask(|n| regime.trainable(n));
    Ok((model, info))
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let spec = ExperimentSpec {
        consumption: a.consumption,
        generator: a.generator,
        cp: a.cp,
        regime: a.regime,
        seed: a.seed,
    };
    spec.validate()?;
    match a.phase {
        Phase::Seed if spec.consumption != Consumption::None => {
            return Err(CliError::Usage("the seed phase trains without context; use --consumption none".into()))
        }
        Phase::Seed if a.checkpoint.is_some() => {
            return Err(CliError::Usage("--checkpoint is only used with --phase finetune".into()))
        }
        Phase::Finetune if a.checkpoint.is_none() => {
            return Err(CliError::Usage("--phase finetune needs --checkpoint".into()))
        }
        _ => {}
    }
    let tc = TrainConfig {
        total_steps: a.steps,
        batch_size: a.batch_size,
        regime: spec.regime.into(),
        checkpoint_interval: a.checkpoint_interval,
        n_average: a.n_average,
        schedule: ctxasr::optim::Schedule {
            lr_peak: a.lr,
            warmup_steps: a.warmup,
            ..TrainConfig::desk(a.steps, a.seed).schedule
        },
        ..TrainConfig::desk(a.steps, a.seed)
    };
    tc.validate()?;

    let corpus = read_corpus(&a.corpus)?;
    let d_feat = feature_dim(&corpus)?;
    let config = ModelConfig::desk(corpus.vocab.len(), d_feat, spec.consumption.into(), spec.context_generator())?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut model = match (&a.phase, &a.checkpoint) {
        (Phase::Finetune, Some(ckpt)) => {
            let (seed, info) = load_model(ckpt)?;
            if info.config.prompt.is_some() {
                return Err(CliError::Usage("fine-tuning starts from a context-free seed checkpoint".into()));
            }
            if info.config != config.without_context() {
                return Err(CliError::Data("seed checkpoint architecture does not match the corpus".into()));
            }
            Model::finetune_from(&seed, config, spec.cp, &mut rng)?
        }
        _ => Model::new(config, &mut rng)?,
    };

    let with_context = spec.consumption != Consumption::None;
    let data: Vec<Example> = corpus
        .train
        .iter()
        .map(|u| Example::from_utterance(&corpus.vocab, u, with_context))
        .collect();
    fs::create_dir_all(&a.out)?;
    let report = trainer::train(&mut model, &data, &tc, Some(&a.out))?;
    checkpoint::write_checkpoint(&a.out.join(FINAL_CHECKPOINT), &model.params)?;
    let info = RunInfo {
        config: model.config().clone(),
        spec,
        total_params: model.params.count(),
        base_params: model.base_param_count(),
        added_params: model.added_param_count(),
        trainable_params: report.trainable_params,
    };
    fs::write(a.out.join(RUN_INFO), serde_json::to_string_pretty(&info)? + "\n")?;
    let last = report.log.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "{}: {} steps, final loss {last:.4}, trainable {} of {} parameters, averaged checkpoint {}",
        spec.label(),
        tc.total_steps,
        report.trainable_params,
        info.total_params,
        a.out.join(FINAL_CHECKPOINT).display()
    );
    Ok(())
}

pub fn decode(a: &DecodeArgs) -> CliResult<()> {
    let corpus = read_corpus(&a.corpus)?;
    let (model, _) = load_model(&a.checkpoint)?;
    let utts = corpus.split(&a.split)?;
    let amb = |i: usize| corpus.is_ambiguous(i);
    let scored = decode_all(&model, utts, &corpus.vocab, a.context.into(), &amb)?;
    let mut text = String::new();
    for s in &scored {
        let words: Vec<&str> = s.hypothesis.iter().filter_map(|&i| corpus.vocab.piece(i)).collect();
        text.push_str(&format!("{}\t{}\n", s.id, words.join(" ")));
    }
    match &a.out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let corpus = read_corpus(&a.corpus)?;
    let (model, info) = load_model(&a.checkpoint)?;
    let utts = corpus.split(&a.split)?;
    let amb = |i: usize| corpus.is_ambiguous(i);
    let mode: ContextMode = a.context.into();
    let rep = evaluate(&model, utts, &corpus.vocab, mode, &amb)?;
    println!(
        "{} ({:?}): WER {:.4}, with context {:.4}, without context {:.4}, ambiguous tokens {:.4}",
        info.spec.label(),
        mode,
        rep.wer_all(),
        rep.wer_with_context(),
        rep.wer_without_context(),
        rep.wer_ambiguous()
    );
    let record = EvalRecord {
        spec: info.spec,
        split: a.split.clone(),
        context: mode,
        total_params: info.total_params,
        base_params: info.base_params,
        added_params: info.added_params,
        trainable_params: info.trainable_params,
        report: rep,
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(())
}

pub fn read_record(p: &PathBuf) -> CliResult<EvalRecord> {
    let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
}

pub fn report(a: &ReportArgs) -> CliResult<()> {
    let baseline = a.baseline.as_ref().map(read_record).transpose()?;
    let cands = a.candidates.iter().map(read_record).collect::<CliResult<Vec<_>>>()?;
    let base = report::choose_baseline(baseline.as_ref(), &cands)?;
    if base.spec.consumption != Consumption::None || base.spec.regime != RegimeArg::All {
        return Err(CliError::Usage("the baseline must be a context-free model".into()));
    }
    let rows: Vec<_> = cands.iter().map(|c| report::row(base, c)).collect();
    let text = match a.format {
        Format::Table => report::render_table(&rows),
        Format::Records => report::render_records(&rows),
    };
    print!("{text}");
    Ok(())
}
