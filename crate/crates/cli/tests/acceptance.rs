//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ctxasr::attention::build_window_mask;
use ctxasr::checkpoint;
use ctxasr::encoder::{self, conformer_block, init_encoder_params, ConsumptionMode, EncoderConfig};
use ctxasr::eval::{evaluate, rwerr, ContextMode, EvalReport};
use ctxasr::gradcheck::{grad_check, grad_check_params};
use ctxasr::graph::{log_sum_exp, Graph, Var};
use ctxasr::model::{Model, ModelConfig};
use ctxasr::optim::{Adam, Schedule};
use ctxasr::synth::{gen_corpus, Corpus, SynthConfig};
use ctxasr::text::{
    encode_context, init_prompt_params, project_prompt, ContextEncoderKind, ContextGenerator, PromptConfig,
    PromptEmbedding, Truncation,
};
use ctxasr::train::{train, Example, Regime, TrainConfig};
use ctxasr::transducer::{
    init_transducer_params, joint_lattice, prediction_forward, rnnt_lattice, rnnt_loss, transducer_loss,
    TransducerConfig,
};
use ctxasr::{ParamStore, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const GRAD_SEEDS: u64 = 20;
const ORACLE_TOL: f64 = 1e-8;
const PERMUTATION_TOL: f64 = 1e-12;
const MIN_AMBIGUOUS_RWERR: f64 = 20.0;
const MAX_FORCED_EMPTY_DEGRADATION: f64 = 1.0;
const MHA_FRACTION_OF_ALL: f64 = 0.8;

const SEED_STEPS: usize = 3000;
const FINETUNE_STEPS: usize = 2000;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Scalar `Σ x ⊙ w` with a fixed random `w`, so every output element
/// contributes a distinct weight to the gradient.
fn weighted_sum(g: &Graph<'_>, x: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(&g.shape(x), 1.0, &mut rng(seed ^ 0xabc));
    let w = g.constant(w);
    Ok(g.sum(g.mul(x, w)?))
}

// ---- criterion 1 --------------------------------------------------------

fn tiny_encoder(consumption: ConsumptionMode) -> EncoderConfig {
    EncoderConfig {
        d_feat: 3,
        n_blocks: 1,
        d_model: 8,
        heads: 2,
        d_head: 4,
        conv_kernel: 3,
        ff_expansion: 2,
        subsample_factor: 2,
        context_window: 2,
        consumption,
        prompt_blocks: vec![0],
        token_window: 30,
    }
}

fn tiny_transducer(vocab: usize, d_model: usize) -> TransducerConfig {
    TransducerConfig {
        vocab_size: vocab,
        d_model,
        d_emb: 6,
        d_pred: 6,
        d_joint: 6,
        max_symbols_per_frame: 4,
    }
}

type OpCheck = Box<dyn Fn(u64) -> Result<f64>>;

fn primitive_checks() -> Vec<(&'static str, OpCheck)> {
    fn unary(f: fn(&Graph<'_>, Var) -> Result<Var>, shape: &'static [usize]) -> OpCheck {
        Box::new(move |s| {
            let x = Tensor::randn(shape, 1.0, &mut rng(s));
            grad_check(|g, v| weighted_sum(g, f(g, v)?, s), &x, GRAD_STEP)
        })
    }
    fn binary(f: fn(&Graph<'_>, Var, Var) -> Result<Var>, a: &'static [usize], b: &'static [usize]) -> OpCheck {
        Box::new(move |s| {
            let mut r = rng(s);
            let ta = Tensor::randn(a, 1.0, &mut r);
            let tb = Tensor::randn(b, 1.0, &mut r);
            let e1 = grad_check(|g, v| weighted_sum(g, f(g, v, g.constant(tb.clone()))?, s), &ta, GRAD_STEP)?;
            let e2 = grad_check(|g, v| weighted_sum(g, f(g, g.constant(ta.clone()), v)?, s), &tb, GRAD_STEP)?;
            Ok(e1.max(e2))
        })
    }
    let mask: Vec<bool> = (0..12).map(|i| i % 4 <= i / 4).collect();
    let mut checks: Vec<(&'static str, OpCheck)> = vec![
        ("matmul", binary(|g, a, b| g.matmul(a, b), &[3, 4], &[4, 2])),
        ("transpose", unary(|g, x| g.transpose(x), &[3, 4])),
        ("reshape", unary(|g, x| g.reshape(x, &[2, 6]), &[3, 4])),
        ("add", binary(|g, a, b| g.add(a, b), &[3, 4], &[3, 4])),
        ("sub", binary(|g, a, b| g.sub(a, b), &[3, 4], &[3, 4])),
        ("mul", binary(|g, a, b| g.mul(a, b), &[3, 4], &[3, 4])),
        ("scale", unary(|g, x| Ok(g.scale(x, -1.7)), &[3, 4])),
        ("add_bias", binary(|g, a, b| g.add_bias(a, b), &[3, 4], &[4])),
        ("tanh", unary(|g, x| Ok(g.tanh(x)), &[3, 4])),
        ("sigmoid", unary(|g, x| Ok(g.sigmoid(x)), &[3, 4])),
        ("swish", unary(|g, x| Ok(g.swish(x)), &[3, 4])),
        ("softmax", unary(|g, x| g.softmax(x), &[3, 4])),
        ("log_softmax", unary(|g, x| Ok(g.log_softmax(x)), &[3, 4])),
        ("concat rows", binary(|g, a, b| g.concat(&[a, b], 0), &[2, 4], &[3, 4])),
        ("concat cols", binary(|g, a, b| g.concat(&[a, b], 1), &[3, 2], &[3, 4])),
        ("slice", unary(|g, x| g.slice(x, 1, 1, 2), &[3, 4])),
        ("causal depthwise conv", binary(|g, a, b| g.causal_depthwise_conv(a, b), &[5, 3], &[3, 3])),
        ("embedding", unary(|g, x| g.embedding(x, &[2, 0, 2, 1]), &[3, 4])),
        ("gather", unary(|g, x| g.gather(x, &[0, 5, 5, 11]), &[3, 4])),
        ("sum", unary(|g, x| Ok(g.sum(x)), &[3, 4])),
        ("outer_add_rows", binary(|g, a, b| g.outer_add_rows(a, b), &[2, 3], &[4, 3])),
    ];
    checks.push((
        "softmax_masked",
        Box::new(move |s| {
            let x = Tensor::randn(&[3, 4], 1.0, &mut rng(s));
            grad_check(|g, v| weighted_sum(g, g.softmax_masked(v, &mask)?, s), &x, GRAD_STEP)
        }),
    ));
    checks.push((
        "layer_norm",
        Box::new(|s| {
            let mut r = rng(s);
            let x = Tensor::randn(&[3, 5], 1.0, &mut r);
            let gamma = Tensor::randn(&[5], 1.0, &mut r);
            let beta = Tensor::randn(&[5], 1.0, &mut r);
            let ln = |g: &Graph<'_>, x: Var, ga: Var, be: Var| g.layer_norm(x, ga, be, 1e-5);
            let e1 = grad_check(
                |g, v| weighted_sum(g, ln(g, v, g.constant(gamma.clone()), g.constant(beta.clone()))?, s),
                &x,
                GRAD_STEP,
            )?;
            let e2 = grad_check(
                |g, v| weighted_sum(g, ln(g, g.constant(x.clone()), v, g.constant(beta.clone()))?, s),
                &gamma,
                GRAD_STEP,
            )?;
            let e3 = grad_check(
                |g, v| weighted_sum(g, ln(g, g.constant(x.clone()), g.constant(gamma.clone()), v)?, s),
                &beta,
                GRAD_STEP,
            )?;
            Ok(e1.max(e2).max(e3))
        }),
    ));
    checks.push((
        "rnnt_loss",
        Box::new(|s| {
            let mut r = rng(s);
            let frames = r.random_range(1..=4);
            let u = r.random_range(0..=3);
            let target: Vec<usize> = (0..u).map(|_| r.random_range(2..6)).collect();
            let x = Tensor::randn(&[frames * (u + 1), 6], 1.0, &mut r);
            grad_check(|g, v| rnnt_loss(g, g.log_softmax(v), frames, &target), &x, GRAD_STEP)
        }),
    ));
    checks
}

fn all_names(store: &ParamStore) -> Vec<String> {
    store.names().map(str::to_string).collect()
}

fn composite_checks() -> Vec<(&'static str, OpCheck)> {
    let mut checks: Vec<(&'static str, OpCheck)> = Vec::new();
    for (label, mode) in [
        ("prompted conformer block", ConsumptionMode::Prompt),
        ("cross-attention conformer block", ConsumptionMode::CrossAttention),
        ("plain conformer block", ConsumptionMode::None),
    ] {
        checks.push((
            label,
            Box::new(move |s| {
                let mut r = rng(s);
                let cfg = tiny_encoder(mode);
                let mut store = ParamStore::new();
                init_encoder_params(&mut store, &cfg, &mut r)?;
                for name in all_names(&store) {
                    // perturb zero-initialised biases and LN parameters
                    let t = store.get_mut(&name)?;
                    for v in t.data_mut() {
                        *v += 0.3 * r.random_range(-1.0..1.0);
                    }
                }
                let frames = r.random_range(1..=5);
                let s_prompt = if mode == ConsumptionMode::None { 0 } else { r.random_range(1..=3) };
                store.insert("x", Tensor::randn(&[frames, 8], 1.0, &mut r));
                store.insert("p", Tensor::randn(&[s_prompt.max(1), 8], 1.0, &mut r));
                let names = all_names(&store);
                let names: Vec<&str> = names.iter().map(String::as_str).collect();
                let plain = build_window_mask(frames, 0, cfg.context_window);
                let pmask = build_window_mask(frames, s_prompt, cfg.context_window);
                grad_check_params(
                    |g, st| {
                        let x = st.bind(g, "x")?;
                        let prompt = if s_prompt == 0 {
                            PromptEmbedding::empty(8)
                        } else {
                            PromptEmbedding::from_var(g, st.bind(g, "p")?)?
                        };
                        let y = conformer_block(g, st, &cfg, 0, x, &prompt, &plain, &pmask)?;
                        weighted_sum(g, y, s)
                    },
                    &store,
                    &names,
                    GRAD_STEP,
                    Some(4),
                )
            }),
        ));
    }
    checks.push((
        "prompt generator and projection",
        Box::new(|s| {
            let mut r = rng(s);
            let cfg = PromptConfig {
                generator: ContextGenerator::LearnedRandom,
                d_enc: 5,
                d_model: 8,
                n_projections: 2,
                token_window: 3,
                truncation: Truncation::Last,
            };
            let mut store = ParamStore::new();
            init_prompt_params(&mut store, &cfg, 9, &mut r)?;
            let tokens: Vec<usize> = (0..r.random_range(1..=5)).map(|_| r.random_range(2..9)).collect();
            let names = all_names(&store);
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            grad_check_params(
                |g, st| {
                    let e = encode_context(g, st, &tokens, ContextEncoderKind::LearnedRandom)?;
                    let p = project_prompt(g, st, e, &cfg)?;
                    weighted_sum(g, p.var().expect("non-empty"), s)
                },
                &store,
                &names,
                GRAD_STEP,
                Some(6),
            )
        }),
    ));
    checks.push((
        "prediction and joint networks",
        Box::new(|s| {
            let mut r = rng(s);
            let cfg = tiny_transducer(7, 4);
            let mut store = ParamStore::new();
            init_transducer_params(&mut store, &cfg, &mut r);
            let history: Vec<usize> = (0..r.random_range(0..=3)).map(|_| r.random_range(2..7)).collect();
            store.insert("enc", Tensor::randn(&[3, 4], 1.0, &mut r));
            let names = all_names(&store);
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            grad_check_params(
                |g, st| {
                    let pred = prediction_forward(g, st, &cfg, &history)?;
                    let enc = st.bind(g, "enc")?;
                    let lp = joint_lattice(g, st, &cfg, enc, pred)?;
                    weighted_sum(g, lp, s)
                },
                &store,
                &names,
                GRAD_STEP,
                Some(6),
            )
        }),
    ));
    checks.push((
        "end-to-end prompted transducer loss",
        Box::new(|s| {
            let mut r = rng(s);
            let ecfg = tiny_encoder(ConsumptionMode::Prompt);
            let tcfg = tiny_transducer(9, 8);
            let pcfg = PromptConfig {
                generator: ContextGenerator::LearnedRandom,
                d_enc: 6,
                d_model: 8,
                n_projections: 2,
                token_window: 30,
                truncation: Truncation::First,
            };
            let mut store = ParamStore::new();
            init_encoder_params(&mut store, &ecfg, &mut r)?;
            init_transducer_params(&mut store, &tcfg, &mut r);
            init_prompt_params(&mut store, &pcfg, 9, &mut r)?;
            let feats = Tensor::randn(&[r.random_range(2..=7), 3], 1.0, &mut r);
            let target: Vec<usize> = (0..r.random_range(0..=3)).map(|_| r.random_range(2..9)).collect();
            let context: Vec<usize> = (0..r.random_range(1..=4)).map(|_| r.random_range(2..9)).collect();
            let names = all_names(&store);
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            grad_check_params(
                |g, st| {
                    let e = encode_context(g, st, &context, ContextEncoderKind::LearnedRandom)?;
                    let p = project_prompt(g, st, e, &pcfg)?;
                    let enc = encoder::encode(g, st, &ecfg, &feats, &p)?;
                    transducer_loss(g, st, &tcfg, enc, &target)
                },
                &store,
                &names,
                GRAD_STEP,
                Some(2),
            )
        }),
    ));
    checks
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut failures = Vec::new();
    for (name, check) in primitive_checks().into_iter().chain(composite_checks()) {
        let mut op_worst: f64 = 0.0;
        for s in 0..GRAD_SEEDS {
            match check(s) {
                Ok(e) => op_worst = op_worst.max(e),
                Err(e) => failures.push(format!("{name} seed {s}: {e}")),
            }
        }
        if op_worst > GRAD_TOL {
            failures.push(format!("{name}: max rel err {op_worst:.2e}"));
        }
        worst.push((name.to_string(), op_worst));
    }
    let secs = start.elapsed().as_secs_f64();
    let overall = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let pass = failures.is_empty() && secs < 120.0;
    verdict(
        pass,
        format!(
            "{} ops x {GRAD_SEEDS} seeds, worst rel err {overall:.2e} (tol {GRAD_TOL:.0e}), {secs:.1}s (limit 120s){}",
            worst.len(),
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join("; ")) }
        ),
    )
}

// ---- criterion 2 --------------------------------------------------------

/// Sum over every monotone path by explicit enumeration.
fn brute_force_log_likelihood(lp: &Tensor, frames: usize, target: &[usize]) -> f64 {
    let u1 = target.len() + 1;
    let v = lp.shape()[1];
    let at = |t: usize, u: usize, k: usize| lp.data()[(t * u1 + u) * v + k];
    let mut paths = Vec::new();
    // (t, u, accumulated log-prob)
    let mut stack = vec![(0usize, 0usize, 0.0f64)];
    while let Some((t, u, acc)) = stack.pop() {
        if t == frames - 1 && u == target.len() {
            paths.push(acc + at(t, u, 0));
            continue;
        }
        if u < target.len() {
            stack.push((t, u + 1, acc + at(t, u, target[u])));
        }
        if t + 1 < frames {
            stack.push((t + 1, u, acc + at(t, u, 0)));
        }
    }
    log_sum_exp(&paths)
}

fn criterion_2() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut worst_ab: f64 = 0.0;
    let mut cases = 0;
    let mut err = None;
    for case in 0..50u64 {
        let mut r = rng(1000 + case);
        let frames = 1 + (case as usize % 4);
        let u = (case as usize / 4) % 4;
        let cfg = tiny_transducer(8, 5);
        let mut store = ParamStore::new();
        init_transducer_params(&mut store, &cfg, &mut r);
        let target: Vec<usize> = (0..u).map(|_| r.random_range(2..8)).collect();
        let enc = Tensor::randn(&[frames, 5], 1.0, &mut r);
        let g = Graph::inference();
        let lp = (|| {
            let e = g.constant(enc);
            let p = prediction_forward(&g, &store, &cfg, &target)?;
            joint_lattice(&g, &store, &cfg, e, p)
        })();
        let lp = match lp {
            Ok(v) => g.tensor(v),
            Err(e) => {
                err = Some(e.to_string());
                break;
            }
        };
        match rnnt_lattice(&lp, frames, &target) {
            Ok(lat) => {
                let brute = brute_force_log_likelihood(&lp, frames, &target);
                worst = worst.max((lat.log_likelihood - brute).abs());
                worst_ab = worst_ab.max((lat.log_likelihood - lat.log_likelihood_beta).abs());
                cases += 1;
            }
            Err(e) => {
                err = Some(e.to_string());
                break;
            }
        }
    }
    verdict(
        err.is_none() && cases == 50 && worst <= ORACLE_TOL && worst_ab <= ORACLE_TOL,
        format!(
            "{cases} cases (T'<=4, U<=3), max |DP - exhaustive| {worst:.2e}, max |alpha - beta| {worst_ab:.2e} (tol {ORACLE_TOL:.0e}){}",
            err.map(|e| format!("; error: {e}")).unwrap_or_default()
        ),
    )
}

// ---- criteria 3 to 5 ----------------------------------------------------

fn desk_model(mode: ConsumptionMode, generator: Option<ContextGenerator>, seed: u64) -> Result<Model> {
    Model::new(ModelConfig::desk(40, 16, mode, generator)?, &mut rng(seed))
}

fn criterion_3() -> Verdict {
    let run = || -> Result<(usize, usize)> {
        let mut identical = 0;
        for case in 0..100u64 {
            let mut r = rng(2000 + case);
            let prompted = desk_model(ConsumptionMode::Prompt, Some(ContextGenerator::LearnedRandom), 2000 + case)?;
            let mut base_params = prompted.params.clone();
            for n in all_names(&prompted.params).iter().filter(|n| n.starts_with("prompt.")) {
                base_params.remove(n);
            }
            let plain = Model::from_params(prompted.config().without_context(), base_params)?;
            let feats = Tensor::randn(&[r.random_range(1..=40), 16], 1.0, &mut r);
            let g = Graph::inference();
            let a = g.tensor(prompted.encode(&g, &feats, &[])?);
            let g = Graph::inference();
            let b = g.tensor(plain.encode(&g, &feats, &[])?);
            identical += usize::from(a.bit_eq(&b));
        }
        Ok((identical, 100))
    };
    match run() {
        Ok((ok, n)) => verdict(ok == n, format!("{ok}/{n} random inputs bitwise identical")),
        Err(e) => verdict(false, format!("error: {e}")),
    }
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).to_vec()).collect();
    Tensor::from_rows(&rows).expect("rectangular")
}

fn criterion_4() -> Verdict {
    let run = || -> Result<f64> {
        let mut worst: f64 = 0.0;
        for case in 0..20u64 {
            let mut r = rng(3000 + case);
            let mode = if case % 2 == 0 { ConsumptionMode::Prompt } else { ConsumptionMode::CrossAttention };
            let m = desk_model(mode, Some(ContextGenerator::LearnedRandom), 3000 + case)?;
            let cfg = &m.config().encoder;
            let s = r.random_range(2..=8);
            let prompt = Tensor::randn(&[s, 32], 1.0, &mut r);
            let mut perm: Vec<usize> = (0..s).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
            let feats = Tensor::randn(&[r.random_range(3..=30), 16], 1.0, &mut r);
            let run_with = |p: Tensor| -> Result<Tensor> {
                let g = Graph::inference();
                let pv = g.constant(p);
                let pe = PromptEmbedding::from_var(&g, pv)?;
                let y = encoder::encode(&g, &m.params, cfg, &feats, &pe)?;
                Ok(g.tensor(y))
            };
            let a = run_with(prompt.clone())?;
            let b = run_with(permute_rows(&prompt, &perm))?;
            worst = worst.max(a.max_abs_diff(&b));
        }
        Ok(worst)
    };
    match run() {
        Ok(w) => verdict(
            w <= PERMUTATION_TOL,
            format!("20 cases (prompt and cross-attention), max diff {w:.2e} (tol {PERMUTATION_TOL:.0e})"),
        ),
        Err(e) => verdict(false, format!("error: {e}")),
    }
}

fn criterion_5() -> Verdict {
    let run = || -> Result<(usize, f64)> {
        let mut checked = 0;
        let mut worst: f64 = 0.0;
        let variants = [
            (ConsumptionMode::None, None),
            (ConsumptionMode::FeatureConcat, Some(ContextGenerator::FrozenSentence)),
            (ConsumptionMode::CrossAttention, Some(ContextGenerator::FrozenToken)),
            (ConsumptionMode::Prompt, Some(ContextGenerator::LearnedRandom)),
        ];
        for (i, (mode, generator)) in variants.into_iter().enumerate() {
            for cw in [40, 3] {
                let mut cfg = ModelConfig::desk(40, 16, mode, generator)?;
                cfg.encoder.context_window = cw;
                let mut r = rng(4000 + i as u64);
                let m = Model::new(cfg, &mut r)?;
                let f = m.config().encoder.subsample_factor;
                let t_enc = 12;
                let feats = Tensor::randn(&[t_enc * f, 16], 1.0, &mut r);
                let context: Vec<usize> =
                    if mode == ConsumptionMode::None { vec![] } else { vec![5, 2, 9, 2, 7] };
                let g = Graph::inference();
                let full = g.tensor(m.encode(&g, &feats, &context)?);
                for p in 1..=t_enc * f {
                    let g = Graph::inference();
                    let part = g.tensor(m.encode(&g, &feats.slice_rows(0, p), &context)?);
                    let settled = p / f;
                    for row in 0..settled {
                        let d = part
                            .row(row)
                            .iter()
                            .zip(full.row(row))
                            .map(|(a, b)| (a - b).abs())
                            .fold(0.0, f64::max);
                        worst = worst.max(d);
                    }
                    checked += 1;
                }
            }
        }
        Ok((checked, worst))
    };
    match run() {
        Ok((n, w)) => verdict(
            w == 0.0,
            format!("{n} prefixes over 4 modes x 2 context windows (T'=12), max deviation of settled frames {w:.2e}"),
        ),
        Err(e) => verdict(false, format!("error: {e}")),
    }
}

// ---- criteria 6 to 8 ----------------------------------------------------

struct Trends {
    corpus: Corpus,
    baseline: EvalReport,
    prompt: EvalReport,
    prompt_forced: EvalReport,
    cp_all: EvalReport,
    cp_mha: EvalReport,
    cp_proj: EvalReport,
    frozen_intact: Vec<(Regime, bool, usize)>,
    prompt_added: usize,
    ca_added: usize,
    base_params: usize,
    timings: Vec<(String, f64)>,
}

fn examples(corpus: &Corpus, with_context: bool) -> Vec<Example> {
    corpus
        .train
        .iter()
        .map(|u| Example::from_utterance(&corpus.vocab, u, with_context))
        .collect()
}

fn frozen_unchanged(before: &ParamStore, after: &ParamStore, regime: Regime) -> (bool, usize) {
    let mut n = 0;
    let mut ok = true;
    for (name, t) in before.iter() {
        if !regime.trainable(name) {
            n += 1;
            ok &= after.get(name).map(|a| a.bit_eq(t)).unwrap_or(false);
        }
    }
    (ok, n)
}

fn run_trends() -> Result<Trends> {
    let mut timings = Vec::new();
    let corpus = gen_corpus(&SynthConfig::with_seed(7))?;
    let v = corpus.vocab.len();
    let amb = |i: usize| corpus.is_ambiguous(i);
    let plain = examples(&corpus, false);
    let with_ctx = examples(&corpus, true);

    let clock = Instant::now();
    let mut seed = Model::new(ModelConfig::desk(v, 16, ConsumptionMode::None, None)?, &mut rng(11))?;
    train(&mut seed, &plain, &TrainConfig::desk(SEED_STEPS, 11), None)?;
    timings.push(("seed".to_string(), clock.elapsed().as_secs_f64()));

    let finetune = |name: &str,
                    mode: ConsumptionMode,
                    generator: Option<ContextGenerator>,
                    cp: bool,
                    regime: Regime,
                    timings: &mut Vec<(String, f64)>|
     -> Result<(Model, ParamStore)> {
        let clock = Instant::now();
        let cfg = ModelConfig::desk(v, 16, mode, generator)?;
        let mut m = Model::finetune_from(&seed, cfg, cp, &mut rng(12))?;
        let before = m.params.clone();
        let mut tc = TrainConfig::desk(FINETUNE_STEPS, 13);
        tc.regime = regime;
        let data = if mode == ConsumptionMode::None { &plain } else { &with_ctx };
        train(&mut m, data, &tc, None)?;
        timings.push((name.to_string(), clock.elapsed().as_secs_f64()));
        Ok((m, before))
    };
    let ev = |m: &Model, mode: ContextMode| evaluate(m, &corpus.test, &corpus.vocab, mode, &amb);

    let (base, _) = finetune("baseline", ConsumptionMode::None, None, false, Regime::All, &mut timings)?;
    let baseline = ev(&base, ContextMode::AsLabeled)?;

    let spm = Some(ContextGenerator::LearnedRandom);
    let (prompt_model, _) = finetune("prompt/spm-tok", ConsumptionMode::Prompt, spm, false, Regime::All, &mut timings)?;
    let prompt = ev(&prompt_model, ContextMode::AsLabeled)?;
    let prompt_forced = ev(&prompt_model, ContextMode::ForceEmpty)?;

    let cp = Some(ContextGenerator::LearnedCopied);
    let mut frozen_intact = Vec::new();
    let mut regime_reports = BTreeMap::new();
    for regime in [Regime::All, Regime::MhaAndProjections, Regime::ProjectionsOnly] {
        let (m, before) = finetune(
            &format!("prompt/spm-tok+cp {regime:?}"),
            ConsumptionMode::Prompt,
            cp,
            true,
            regime,
            &mut timings,
        )?;
        let (ok, n) = frozen_unchanged(&before, &m.params, regime);
        if regime != Regime::All {
            frozen_intact.push((regime, ok, n));
        }
        regime_reports.insert(format!("{regime:?}"), ev(&m, ContextMode::AsLabeled)?);
    }

    let ca = Model::finetune_from(
        &seed,
        ModelConfig::desk(v, 16, ConsumptionMode::CrossAttention, spm)?,
        false,
        &mut rng(12),
    )?;
    Ok(Trends {
        baseline,
        prompt,
        prompt_forced,
        cp_all: regime_reports.remove("All").expect("trained"),
        cp_mha: regime_reports.remove("MhaAndProjections").expect("trained"),
        cp_proj: regime_reports.remove("ProjectionsOnly").expect("trained"),
        frozen_intact,
        prompt_added: prompt_model.added_param_count(),
        ca_added: ca.added_param_count(),
        base_params: prompt_model.base_param_count(),
        timings,
        corpus,
    })
}

fn criterion_6(t: &Trends) -> Verdict {
    let r = rwerr(t.baseline.wer_ambiguous(), t.prompt.wer_ambiguous()).unwrap_or(f64::NAN);
    let turns = t.corpus.test.len();
    let pct = |n: usize| 100.0 * n as f64 / t.base_params as f64;
    let slowest = t.timings.iter().map(|x| x.1).fold(0.0, f64::max);
    let pass = turns >= 2000 && r >= MIN_AMBIGUOUS_RWERR && t.prompt_added < t.ca_added && slowest < 900.0;
    verdict(
        pass,
        format!(
            "{turns} test turns; ambiguous WER baseline {:.4} -> prompt {:.4}, rWERR {r:.2}% (need >= {MIN_AMBIGUOUS_RWERR}%); added params prompt {} ({:.2}%) < cross-attention {} ({:.2}%); slowest run {slowest:.0}s",
            t.baseline.wer_ambiguous(),
            t.prompt.wer_ambiguous(),
            t.prompt_added,
            pct(t.prompt_added),
            t.ca_added,
            pct(t.ca_added)
        ),
    )
}

fn criterion_7(t: &Trends) -> Verdict {
    let b = &t.baseline;
    let with = rwerr(b.wer_with_context(), t.prompt.wer_with_context()).unwrap_or(f64::NAN);
    let forced = rwerr(b.wer_with_context(), t.prompt_forced.wer_with_context()).unwrap_or(f64::NAN);
    let overall_forced = rwerr(b.wer_all(), t.prompt_forced.wer_all()).unwrap_or(f64::NAN);
    let pass = with > forced && overall_forced >= -MAX_FORCED_EMPTY_DEGRADATION;
    verdict(
        pass,
        format!(
            "with-context subset rWERR as-labeled {with:.2}% > forced-empty {forced:.2}%; forced-empty overall rWERR vs baseline {overall_forced:.2}% (>= -{MAX_FORCED_EMPTY_DEGRADATION}%)"
        ),
    )
}

fn criterion_8(t: &Trends) -> Verdict {
    let b = t.baseline.wer_ambiguous();
    let all = rwerr(b, t.cp_all.wer_ambiguous()).unwrap_or(f64::NAN);
    let mha = rwerr(b, t.cp_mha.wer_ambiguous()).unwrap_or(f64::NAN);
    let proj = rwerr(b, t.cp_proj.wer_ambiguous()).unwrap_or(f64::NAN);
    let frozen_ok = t.frozen_intact.iter().all(|f| f.1);
    let pass = mha >= MHA_FRACTION_OF_ALL * all && proj > 0.0 && frozen_ok;
    let frozen: Vec<String> = t
        .frozen_intact
        .iter()
        .map(|(r, ok, n)| format!("{r:?}: {n} frozen tensors {}", if *ok { "bit-identical" } else { "CHANGED" }))
        .collect();
    verdict(
        pass,
        format!(
            "ambiguous rWERR All {all:.2}%, MhaAndProjections {mha:.2}% (need >= {:.2}%), ProjectionsOnly {proj:.2}% (need > 0); {}",
            MHA_FRACTION_OF_ALL * all,
            frozen.join(", ")
        ),
    )
}

// ---- criterion 9 --------------------------------------------------------

fn criterion_9() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut check = |cond: bool, what: &str| {
        ok &= cond;
        if !cond {
            notes.push(what.to_string());
        }
    };

    // zero gradient leaves parameters unchanged
    let mut store = ParamStore::new();
    store.insert("w", Tensor::randn(&[4, 3], 1.0, &mut rng(1)));
    let before = store.clone();
    store.zero_grad();
    store.accumulate(&[("w".to_string(), vec![0.0; 12])]).expect("shape");
    Adam::default().step(&mut store, 1e-2, 1);
    check(store.get("w").unwrap().bit_eq(before.get("w").unwrap()), "zero gradient moved parameters");

    // schedule boundary
    let sched = Schedule {
        lr_peak: 3e-3,
        warmup_steps: 200,
        decay_rate: 0.5,
        decay_interval: 1000,
    };
    check(sched.lr(200) == 3e-3, "lr(warmup) != lr_peak");
    check(sched.lr(1) < sched.lr(100) && sched.lr(100) < sched.lr(200), "warm-up not increasing");
    check((sched.lr(1200) - 1.5e-3).abs() < 1e-15, "decay after one interval");

    // quadratic with a closed-form optimum
    let target = 2.75;
    let mut q = ParamStore::new();
    q.insert("x", Tensor::scalar(-1.0));
    let quad = Schedule {
        lr_peak: 0.1,
        warmup_steps: 10,
        decay_rate: 0.5,
        decay_interval: 100,
    };
    let mut adam = Adam::default();
    for step in 1..=500 {
        let x = q.get("x").unwrap().item();
        q.zero_grad();
        q.accumulate(&[("x".to_string(), vec![2.0 * (x - target)])]).unwrap();
        adam.step(&mut q, quad.lr(step), step);
    }
    let final_x = q.get("x").unwrap().item();
    check((final_x - target).abs() < 1e-3, "quadratic did not converge");

    // checkpoint averaging
    let theta = {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::randn(&[3, 5], 1.0, &mut rng(2)));
        s.insert("b", Tensor::randn(&[7], 10.0, &mut rng(3)));
        s
    };
    let same = checkpoint::average(&[theta.clone(), theta.clone(), theta.clone(), theta.clone()]).unwrap();
    check(same.values() == theta.values(), "average of identical checkpoints differs");
    let mut neg = theta.clone();
    for (_, t) in neg.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = -*v);
    }
    let zero = checkpoint::average(&[theta.clone(), neg]).unwrap();
    check(zero.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)), "average of theta and -theta not zero");
    let three: Vec<ParamStore> = (0..3)
        .map(|i| {
            let mut s = ParamStore::new();
            s.insert("a", Tensor::randn(&[3, 5], 1.0, &mut rng(10 + i)));
            s.insert("b", Tensor::randn(&[7], 3.0, &mut rng(20 + i)));
            s
        })
        .collect();
    let mean = checkpoint::average(&three).unwrap();
    let mut worst: f64 = 0.0;
    for (name, t) in mean.iter() {
        for (i, &m) in t.data().iter().enumerate() {
            let direct: f64 = three.iter().map(|s| s.get(name).unwrap().data()[i]).sum::<f64>() / 3.0;
            worst = worst.max((m - direct).abs());
        }
    }
    check(worst < 1e-14, "3-checkpoint mean differs from direct computation");
    // order of the list does not matter beyond rounding
    let rev: Vec<ParamStore> = three.iter().rev().cloned().collect();
    let mean_rev = checkpoint::average(&rev).unwrap();
    let d = mean
        .iter()
        .map(|(n, t)| t.max_abs_diff(mean_rev.get(n).unwrap()))
        .fold(0.0, f64::max);
    check(d < 1e-14, "averaging depends on list order");
    let mut bad = three[0].clone();
    bad.insert("b", Tensor::zeros(&[6]));
    check(checkpoint::average(&[three[0].clone(), bad]).is_err(), "shape mismatch accepted");

    verdict(
        ok,
        format!(
            "Adam no-op, schedule boundary/decay, quadratic -> {final_x:.6} (optimum {target}), averaging identical/symmetric/mean ({worst:.1e})/order/mismatch{}",
            if notes.is_empty() { String::new() } else { format!("; failed: {}", notes.join(", ")) }
        ),
    )
}

// ---- criterion 10 -------------------------------------------------------

fn ctxasr(args: &[&str]) -> std::result::Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ctxasr"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{:?}: {}", args, String::from_utf8_lossy(&out.stderr)))
    }
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    if let Ok(entries) = fs::read_dir(dir) {
        for e in entries.flatten() {
            if e.path().is_file() {
                out.insert(e.file_name().to_string_lossy().to_string(), fs::read(e.path()).unwrap_or_default());
            }
        }
    }
    out
}

fn criterion_10() -> Verdict {
    let run = || -> std::result::Result<String, String> {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let p = |s: &str| tmp.path().join(s).to_string_lossy().to_string();
        let gen = |out: &str| {
            ctxasr(&[
                "gen-data",
                "--seed",
                "7",
                "--out",
                out,
                "--train-sessions",
                "60",
                "--dev-sessions",
                "10",
                "--test-sessions",
                "20",
            ])
        };
        gen(&p("c1"))?;
        gen(&p("c2"))?;
        let c1 = dir_bytes(&tmp.path().join("c1"));
        let c2 = dir_bytes(&tmp.path().join("c2"));
        if c1.len() != 5 || c1 != c2 {
            return Err("corpus files differ between identical runs".into());
        }
        let corpus_dir = p("c1");
        let train = |out: &str, phase: &[&str]| {
            let mut args = vec![
                "train",
                "--seed",
                "5",
                "--corpus",
                &corpus_dir,
                "--out",
                out,
                "--steps",
                "40",
                "--warmup",
                "10",
                "--checkpoint-interval",
                "10",
                "--n-average",
                "3",
            ];
            args.extend_from_slice(phase);
            ctxasr(&args)
        };
        train(&p("s1"), &["--phase", "seed"])?;
        train(&p("s2"), &["--phase", "seed"])?;
        let s1 = dir_bytes(&tmp.path().join("s1"));
        if s1 != dir_bytes(&tmp.path().join("s2")) || !s1.contains_key("final.bin") {
            return Err("seed training outputs differ".into());
        }
        let seed_ckpt = p("s1/final.bin");
        let ft = [
            "--phase",
            "finetune",
            "--checkpoint",
            &seed_ckpt,
            "--consumption",
            "prompt",
            "--generator",
            "spm-tok",
            "--cp",
        ];
        train(&p("f1"), &ft)?;
        train(&p("f2"), &ft)?;
        let f1 = dir_bytes(&tmp.path().join("f1"));
        if f1 != dir_bytes(&tmp.path().join("f2")) || !f1.contains_key("final.bin") {
            return Err("fine-tuning outputs differ".into());
        }
        Ok(format!(
            "gen-data: {} files identical; train seed: {} files identical; train finetune: {} files identical",
            c1.len(),
            s1.len(),
            f1.len()
        ))
    };
    match run() {
        Ok(d) => verdict(true, d),
        Err(e) => verdict(false, e),
    }
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(u32, &str, Verdict)> = vec![
        (1, "numerics gradient checks", criterion_1()),
        (2, "RNN-T exhaustive oracle", criterion_2()),
        (3, "empty-prompt equivalence", criterion_3()),
        (4, "prompt permutation invariance", criterion_4()),
        (5, "streaming causality", criterion_5()),
    ];
    match run_trends() {
        Ok(t) => {
            for (name, secs) in &t.timings {
                println!("  training {name}: {secs:.1}s");
            }
            results.push((6, "consumption-method trend", criterion_6(&t)));
            results.push((7, "context-presence trend", criterion_7(&t)));
            results.push((8, "fine-tuning regime trend", criterion_8(&t)));
        }
        Err(e) => {
            for (id, name) in [
                (6, "consumption-method trend"),
                (7, "context-presence trend"),
                (8, "fine-tuning regime trend"),
            ] {
                results.push((id, name, verdict(false, format!("training pipeline failed: {e}"))));
            }
        }
    }
    results.push((9, "optimizer and checkpoint averaging", criterion_9()));
    results.push((10, "determinism", criterion_10()));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (id, name, v) in &results {
        println!("[{}] criterion {id}: {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    println!(
        "acceptance: {}/{} passed in {:.0}s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
