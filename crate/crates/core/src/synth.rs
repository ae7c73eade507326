//! Synthetic multi-turn corpus with context-resolvable homophones.
//!
//! Every word has a random acoustic signature; the two members of a
//! homophone pair share one. Each session revolves around one entity, a
//! member of some pair, which occurs in every turn. Only the previous turn's
//! transcript tells which member is meant. Sessions come in mirrored twins
//! that differ only in which member is the entity, so acoustics alone can
//! do no better than chance on entity tokens.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::Vocabulary;

const CONSONANTS: &[char] = &['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];
pub const SPACE: &str = " ";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Total vocabulary including blank, unknown and the space piece.
    pub vocab_size: usize,
    pub n_homophone_pairs: usize,
    pub frames_per_token: usize,
    pub d_feat: usize,
    pub noise: f64,
    pub context_coverage: f64,
    pub turns_per_session: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub train_sessions: usize,
    pub dev_sessions: usize,
    pub test_sessions: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn with_seed(seed: u64) -> Self {
        SynthConfig {
            vocab_size: 64,
            n_homophone_pairs: 8,
            frames_per_token: 6,
            d_feat: 16,
            noise: 0.3,
            context_coverage: 0.7,
            turns_per_session: 3,
            min_words: 3,
            max_words: 6,
            train_sessions: 2000,
            dev_sessions: 100,
            test_sessions: 700,
            seed,
        }
    }

    /// Words that are not homophones.
    pub fn n_fillers(&self) -> usize {
        self.vocab_size.saturating_sub(3 + 2 * self.n_homophone_pairs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_homophone_pairs == 0 {
            return Err(Error::Config("at least one homophone pair is required".into()));
        }
        if self.vocab_size < 3 + 2 * self.n_homophone_pairs + 2 {
            return Err(Error::Config(format!(
                "vocabulary of {} too small for {} homophone pairs",
                self.vocab_size, self.n_homophone_pairs
            )));
        }
        if self.vocab_size - 3 > CONSONANTS.len() * VOWELS.len() * CONSONANTS.len() * VOWELS.len() {
            return Err(Error::Config("vocabulary larger than the word inventory".into()));
        }
        if !(0.0..=1.0).contains(&self.context_coverage) {
            return Err(Error::Config("context coverage must lie in [0, 1]".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be finite and non-negative".into()));
        }
        if self.frames_per_token == 0 || self.d_feat == 0 || self.turns_per_session == 0 {
            return Err(Error::Config("frames per token, feature width and turns must be positive".into()));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::Config("need 1 <= min_words <= max_words".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub transcript: Vec<String>,
    /// Previous turn's transcript, or empty.
    pub context_text: String,
    /// `[T×d_feat]`, values representable as `f32`.
    pub features: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    /// Homophone pairs as token ids.
    pub homophones: Vec<(usize, usize)>,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn is_ambiguous(&self, id: usize) -> bool {
        self.homophones.iter().any(|&(a, b)| a == id || b == id)
    }

    pub fn split(&self, name: &str) -> Result<&[Utterance]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(mix(seed) ^ a) ^ b))
}

/// Pieces `[space, pair members…, fillers…]` after the reserved ids.
fn word_inventory(cfg: &SynthConfig) -> Vec<String> {
    let mut rng = stream(cfg.seed, 0, 0);
    let syllables: Vec<String> = CONSONANTS
        .iter()
        .flat_map(|c| VOWELS.iter().map(move |v| format!("{c}{v}")))
        .collect();
    let mut words: Vec<String> = syllables
        .iter()
        .flat_map(|a| syllables.iter().map(move |b| format!("{a}{b}")))
        .collect();
    let n = cfg.vocab_size - 3;
    let (chosen, _) = words.partial_shuffle(&mut rng, n);
    chosen.to_vec()
}

/// Homophone ids are `3..3+2·pairs`, pair `p` is `(3+2p, 4+2p)`.
pub fn build_vocabulary(cfg: &SynthConfig) -> Result<(Vocabulary, Vec<(usize, usize)>)> {
    cfg.validate()?;
    let mut pieces = vec![SPACE.to_string()];
    pieces.extend(word_inventory(cfg));
    let vocab = Vocabulary::with_reserved(pieces)?;
    let pairs = (0..cfg.n_homophone_pairs).map(|p| (3 + 2 * p, 4 + 2 * p)).collect();
    Ok((vocab, pairs))
}

/// Per-id signature rows; pair members share their first member's row.
fn signatures(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = stream(cfg.seed, 1, 0);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut rows: Vec<Vec<f64>> = (0..cfg.vocab_size)
        .map(|_| (0..cfg.d_feat).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    for p in 0..cfg.n_homophone_pairs {
        rows[4 + 2 * p] = rows[3 + 2 * p].clone();
    }
    rows
}

fn render(ids: &[usize], sig: &[Vec<f64>], cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let t = ids.len() * cfg.frames_per_token;
    let mut data = Vec::with_capacity(t * cfg.d_feat);
    for &id in ids {
        for _ in 0..cfg.frames_per_token {
            for &s in &sig[id] {
                let v = s + cfg.noise * normal.sample(rng);
                data.push(f64::from(v as f32));
            }
        }
    }
    Tensor::new(vec![t, cfg.d_feat], data).expect("consistent shape")
}

struct SessionPlan {
    pair: usize,
    /// Turn token lists with the entity slot marked by `usize::MAX`.
    turns: Vec<Vec<usize>>,
    has_context: Vec<bool>,
    noise_seeds: Vec<u64>,
}

fn plan_session(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> SessionPlan {
    let first_filler = 3 + 2 * cfg.n_homophone_pairs;
    let fillers: Vec<usize> = (first_filler..cfg.vocab_size).collect();
    let pair = rng.random_range(0..cfg.n_homophone_pairs);
    let mut turns = Vec::with_capacity(cfg.turns_per_session);
    let mut has_context = Vec::with_capacity(cfg.turns_per_session);
    let mut noise_seeds = Vec::with_capacity(cfg.turns_per_session);
    for k in 0..cfg.turns_per_session {
        let len = rng.random_range(cfg.min_words..=cfg.max_words);
        let slot = rng.random_range(0..len);
        let mut turn = Vec::with_capacity(len);
        for i in 0..len {
            if i == slot {
                turn.push(usize::MAX);
                continue;
            }
            let prev = turn.last().copied();
            let w = loop {
                let w = *fillers.choose(rng).expect("fillers present");
                if Some(w) != prev {
                    break w;
                }
            };
            turn.push(w);
        }
        turns.push(turn);
        has_context.push(k > 0 && rng.random_bool(cfg.context_coverage));
        noise_seeds.push(rng.random());
    }
    SessionPlan {
        pair,
        turns,
        has_context,
        noise_seeds,
    }
}

fn realise(
    plan: &SessionPlan,
    member: usize,
    prefix: &str,
    vocab: &Vocabulary,
    sig: &[Vec<f64>],
    cfg: &SynthConfig,
) -> Vec<Utterance> {
    let entity = 3 + 2 * plan.pair + member;
    let mut out: Vec<Utterance> = Vec::with_capacity(plan.turns.len());
    for (k, turn) in plan.turns.iter().enumerate() {
        let ids: Vec<usize> = turn.iter().map(|&w| if w == usize::MAX { entity } else { w }).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(plan.noise_seeds[k]);
        let features = render(&ids, sig, cfg, &mut rng);
        let transcript: Vec<String> = ids.iter().map(|&i| vocab.piece(i).expect("id in vocab").to_string()).collect();
        let context_text = match out.last() {
            Some(prev) if plan.has_context[k] => prev.transcript.join(SPACE),
            _ => String::new(),
        };
        out.push(Utterance {
            id: format!("{prefix}-{k}"),
            transcript,
            context_text,
            features,
        });
    }
    out
}

fn gen_split(
    cfg: &SynthConfig,
    split: (&str, u64),
    sessions: usize,
    vocab: &Vocabulary,
    sig: &[Vec<f64>],
) -> Vec<Utterance> {
    let twins = sessions.div_ceil(2);
    (0..twins)
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut rng = stream(cfg.seed, 2 + split.1, i as u64);
            let plan = plan_session(cfg, &mut rng);
            let flip = rng.random_range(0..2usize);
            let a = realise(&plan, flip, &format!("{}-{:06}", split.0, 2 * i), vocab, sig, cfg);
            let b = realise(&plan, 1 - flip, &format!("{}-{:06}", split.0, 2 * i + 1), vocab, sig, cfg);
            a.into_iter().chain(b)
        })
        .collect()
}

/// Deterministic in `cfg` regardless of thread count. Each split holds
/// `sessions` rounded up to an even number.
pub fn gen_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    let (vocab, homophones) = build_vocabulary(cfg)?;
    let sig = signatures(cfg);
    Ok(Corpus {
        train: gen_split(cfg, ("train", 0), cfg.train_sessions, &vocab, &sig),
        dev: gen_split(cfg, ("dev", 1), cfg.dev_sessions, &vocab, &sig),
        test: gen_split(cfg, ("test", 2), cfg.test_sessions, &vocab, &sig),
        vocab,
        homophones,
    })
}

/// Masking parameters; widths are exact, positions uniform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecAugmentConfig {
    pub n_time_masks: usize,
    pub time_width: usize,
    pub n_feat_masks: usize,
    pub feat_width: usize,
}

impl SpecAugmentConfig {
    pub fn none() -> Self {
        SpecAugmentConfig {
            n_time_masks: 0,
            time_width: 0,
            n_feat_masks: 0,
            feat_width: 0,
        }
    }
}

/// Returns a copy with time strips and feature bands zeroed. Widths larger
/// than the extent are clipped to it.
pub fn spec_augment<R: Rng + ?Sized>(features: &Tensor, cfg: &SpecAugmentConfig, rng: &mut R) -> Tensor {
    let mut out = features.clone();
    if features.rank() != 2 {
        return out;
    }
    let (t, d) = (features.shape()[0], features.shape()[1]);
    let data = out.data_mut();
    for _ in 0..cfg.n_time_masks {
        let w = cfg.time_width.min(t);
        let start = rng.random_range(0..=t - w);
        data[start * d..(start + w) * d].fill(0.0);
    }
    for _ in 0..cfg.n_feat_masks {
        let w = cfg.feat_width.min(d);
        let start = rng.random_range(0..=d - w);
        for row in data.chunks_mut(d) {
            row[start..start + w].fill(0.0);
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    transcript: Vec<String>,
    context_text: String,
    frames: usize,
    dims: usize,
    /// Base64 of little-endian `f32` rows.
    features: String,
}

fn encode_features(t: &Tensor) -> String {
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_features(s: &str, frames: usize, dims: usize) -> std::result::Result<Tensor, String> {
    let bytes = B64.decode(s).map_err(|e| e.to_string())?;
    if bytes.len() != frames * dims * 4 {
        return Err(format!("expected {} feature bytes, got {}", frames * dims * 4, bytes.len()));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Tensor::new(vec![frames, dims], data).map_err(|e| e.to_string())
}

/// One JSON record per line.
pub fn write_utterances(path: &Path, utts: &[Utterance]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for u in utts {
        let rec = Record {
            id: u.id.clone(),
            transcript: u.transcript.clone(),
            context_text: u.context_text.clone(),
            frames: u.features.shape().first().copied().unwrap_or(0),
            dims: u.features.shape().get(1).copied().unwrap_or(0),
            features: encode_features(&u.features),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_utterances(path: &Path) -> Result<Vec<Utterance>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: i + 1, msg };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let features = decode_features(&rec.features, rec.frames, rec.dims).map_err(parse_err)?;
        out.push(Utterance {
            id: rec.id,
            transcript: rec.transcript,
            context_text: rec.context_text,
            features,
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Meta {
    homophones: Vec<(String, String)>,
    config: Option<SynthConfig>,
}

pub const VOCAB_FILE: &str = "vocab.txt";
pub const META_FILE: &str = "meta.json";
pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// Writes `vocab.txt`, `meta.json` and one `<split>.jsonl` per split.
pub fn write_corpus(dir: &Path, corpus: &Corpus, cfg: Option<&SynthConfig>) -> Result<()> {
    fs::create_dir_all(dir)?;
    corpus.vocab.write(&dir.join(VOCAB_FILE))?;
    let piece = |id: usize| corpus.vocab.piece(id).unwrap_or_default().to_string();
    let meta = Meta {
        homophones: corpus.homophones.iter().map(|&(a, b)| (piece(a), piece(b))).collect(),
        config: cfg.cloned(),
    };
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)? + "\n")?;
    for name in SPLITS {
        write_utterances(&dir.join(format!("{name}.jsonl")), corpus.split(name)?)?;
    }
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let vocab = Vocabulary::read(&dir.join(VOCAB_FILE))?;
    let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join(META_FILE))?)?;
    let id = |p: &str| {
        vocab
            .id(p)
            .ok_or_else(|| Error::Config(format!("homophone {p:?} not in vocabulary")))
    };
    let homophones = meta
        .homophones
        .iter()
        .map(|(a, b)| Ok((id(a)?, id(b)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        train: read_utterances(&dir.join("train.jsonl"))?,
        dev: read_utterances(&dir.join("dev.jsonl"))?,
        test: read_utterances(&dir.join("test.jsonl"))?,
        vocab,
        homophones,
    })
}

/// Transcript pieces → ids; pieces missing from `vocab` become unknown.
pub fn transcript_ids(vocab: &Vocabulary, transcript: &[String]) -> Vec<usize> {
    transcript
        .iter()
        .map(|p| vocab.id(p).unwrap_or(crate::text::UNK))
        .collect()
}
