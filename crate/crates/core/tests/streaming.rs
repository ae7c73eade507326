use ctxasr::encoder::ConsumptionMode;
use ctxasr::graph::Graph;
use ctxasr::model::{Model, ModelConfig};
use ctxasr::text::ContextGenerator;
use ctxasr::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model(mode: ConsumptionMode, generator: Option<ContextGenerator>, cw: usize, seed: u64) -> Model {
    let mut cfg = ModelConfig::desk(20, 6, mode, generator).unwrap();
    cfg.encoder.context_window = cw;
    Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn encode(m: &Model, feats: &Tensor, context: &[usize]) -> Tensor {
    let g = Graph::inference();
    let v = m.encode(&g, feats, context).unwrap();
    g.tensor(v)
}

fn modes() -> impl Strategy<Value = (ConsumptionMode, Option<ContextGenerator>)> {
    prop_oneof![
        Just((ConsumptionMode::None, None)),
        Just((ConsumptionMode::FeatureConcat, Some(ContextGenerator::FrozenSentence))),
        Just((ConsumptionMode::CrossAttention, Some(ContextGenerator::FrozenToken))),
        Just((ConsumptionMode::Prompt, Some(ContextGenerator::LearnedRandom))),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn appending_frames_never_changes_settled_outputs(
        (mode, generator) in modes(),
        cw in 1usize..6,
        frames in 3usize..25,
        cut in 0usize..25,
        seed in any::<u64>(),
    ) {
        let m = model(mode, generator, cw, seed);
        let f = m.config().encoder.subsample_factor;
        let feats = Tensor::randn(&[frames, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let cut = 1 + cut % frames;
        let ctx = if mode == ConsumptionMode::None { vec![] } else { vec![3, 2, 7] };
        let full = encode(&m, &feats, &ctx);
        let part = encode(&m, &feats.slice_rows(0, cut), &ctx);
        for row in 0..cut / f {
            prop_assert_eq!(part.row(row), full.row(row));
        }
    }

    #[test]
    fn empty_context_matches_context_free_encoder(frames in 1usize..20, seed in any::<u64>()) {
        let prompted = model(ConsumptionMode::Prompt, Some(ContextGenerator::LearnedRandom), 4, seed);
        let mut params = prompted.params.clone();
        let extra: Vec<String> = params.names().filter(|n| n.starts_with("prompt.")).map(str::to_string).collect();
        for n in extra {
            params.remove(&n);
        }
        let plain = Model::from_params(prompted.config().without_context(), params).unwrap();
        let feats = Tensor::randn(&[frames, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(encode(&prompted, &feats, &[]).bit_eq(&encode(&plain, &feats, &[])));
    }
}
