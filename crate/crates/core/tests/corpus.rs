use ctxasr::synth::{gen_corpus, read_corpus, read_utterances, write_corpus, write_utterances, SynthConfig};

fn small(seed: u64, sessions: usize) -> SynthConfig {
    SynthConfig {
        train_sessions: sessions,
        dev_sessions: 4,
        test_sessions: 4,
        ..SynthConfig::with_seed(seed)
    }
}

#[test]
fn context_coverage_matches_configuration() {
    let corpus = gen_corpus(&small(3, 5000)).unwrap();
    let eligible: Vec<_> = corpus.train.iter().filter(|u| !u.id.ends_with("-0")).collect();
    assert!(eligible.len() >= 10_000);
    let covered = eligible.iter().filter(|u| !u.context_text.is_empty()).count() as f64 / eligible.len() as f64;
    assert!((0.68..=0.72).contains(&covered), "coverage {covered}");
    assert!(corpus.train.iter().filter(|u| u.id.ends_with("-0")).all(|u| u.context_text.is_empty()));
}

#[test]
fn context_is_the_previous_transcript() {
    let corpus = gen_corpus(&small(4, 50)).unwrap();
    for pair in corpus.train.windows(2) {
        if !pair[1].context_text.is_empty() {
            assert_eq!(pair[1].context_text, pair[0].transcript.join(" "));
        }
    }
}

#[test]
fn generation_is_deterministic_and_seed_dependent() {
    let a = gen_corpus(&small(9, 20)).unwrap();
    let b = gen_corpus(&small(9, 20)).unwrap();
    let c = gen_corpus(&small(10, 20)).unwrap();
    assert_eq!(a.train, b.train);
    assert_ne!(a.train, c.train);
}

#[test]
fn utterances_round_trip_through_jsonl() {
    let corpus = gen_corpus(&small(5, 334)).unwrap();
    assert!(corpus.train.len() >= 1000);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    write_utterances(&path, &corpus.train).unwrap();
    assert_eq!(read_utterances(&path).unwrap(), corpus.train);
    write_corpus(dir.path(), &corpus, None).unwrap();
    let back = read_corpus(dir.path()).unwrap();
    assert_eq!(back.test, corpus.test);
    assert_eq!(back.homophones, corpus.homophones);
}

#[test]
fn malformed_line_reports_its_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    let corpus = gen_corpus(&small(6, 1)).unwrap();
    write_utterances(&path, &corpus.train).unwrap();
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{not json}\n");
    std::fs::write(&path, text).unwrap();
    let err = read_utterances(&path).unwrap_err().to_string();
    assert!(err.contains(&(corpus.train.len() + 1).to_string()), "{err}");
}
