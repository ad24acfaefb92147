//! Property tests over the on-disk stores: any payload a stage can produce
//! must survive save → load exactly, and corrupted files must come back as
//! errors, never as silently wrong data.

use proptest::prelude::*;

use reasonlab::distill::{load_cache, save_cache, CachedPosition, CachedRollout, TeacherCache};
use reasonlab::error::Error;
use reasonlab::reasonmaxxer::{load_training_set, save_training_set, TrainSequence};
use reasonlab::rollout::{load_rollouts, save_rollouts, Rollout, SamplerConfig, StepRecord};
use reasonlab::tasks::{load_corpus, save_corpus};

fn arb_tokens(max_len: usize) -> impl Strategy<Value = Vec<u16>> {
    proptest::collection::vec(0u16..64, 1..max_len)
}

fn arb_rollout() -> impl Strategy<Value = Rollout> {
    (any::<u64>(), arb_tokens(40), 0u64..2).prop_flat_map(|(problem_id, tokens, reward)| {
        let len = tokens.len();
        (
            Just(problem_id),
            Just(tokens),
            Just(reward),
            0..len,
            proptest::collection::vec(
                (0u16..64, -20.0f64..0.0, 0.0f64..4.2),
                len..=len, // trimmed to the generated suffix below
            ),
        )
            .prop_map(|(problem_id, tokens, reward, prompt_len, raw_steps)| Rollout {
                problem_id,
                prompt_len,
                steps: raw_steps[prompt_len..]
                    .iter()
                    .map(|&(token, logprob, entropy)| StepRecord { token, logprob, entropy })
                    .collect(),
                tokens,
                reward: reward as f64,
            })
    })
}

fn arb_cache() -> impl Strategy<Value = TeacherCache> {
    let position = |k: usize| {
        (
            proptest::collection::vec(0u16..64, k..=k),
            proptest::collection::vec(-8.0f32..8.0, k..=k),
        )
            .prop_map(|(ids, logits)| CachedPosition { ids, logits })
    };
    (1usize..6).prop_flat_map(move |k| {
        let rollout = (any::<u64>(), arb_tokens(20), proptest::collection::vec(position(k), 0..8))
            .prop_map(|(problem_id, tokens, positions)| CachedRollout {
                problem_id,
                prompt_len: tokens.len().min(3),
                tokens,
                positions,
            });
        (
            Just(k),
            any::<u64>(),
            proptest::collection::vec(rollout, 1..5),
        )
            .prop_map(move |(k, seed, rollouts)| TeacherCache {
                k,
                vocab: 64,
                seed,
                sampler: SamplerConfig::default(),
                rollouts,
            })
    })
}

fn arb_sequence() -> impl Strategy<Value = TrainSequence> {
    (any::<u64>(), arb_tokens(30), -2.5f64..2.5).prop_flat_map(|(problem_id, tokens, advantage)| {
        let len = tokens.len();
        (1..=len).prop_flat_map(move |prompt_len| {
            let tokens = tokens.clone();
            proptest::collection::vec(any::<bool>(), len - prompt_len..=len - prompt_len).prop_map(
                move |decision| TrainSequence {
                    problem_id,
                    tokens: tokens.clone(),
                    prompt_len,
                    decision,
                    advantage,
                },
            )
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rollout_store_round_trips(rollouts in proptest::collection::vec(arb_rollout(), 0..6)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let meta = serde_json::json!({"k": 2});
        save_rollouts(&path, meta.clone(), &rollouts).unwrap();
        let (header, back) = load_rollouts(&path, "rollout").unwrap();
        prop_assert_eq!(header.meta, meta);
        prop_assert_eq!(back, rollouts);
    }

    #[test]
    fn teacher_cache_round_trips(cache in arb_cache()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_cache(&path, &cache).unwrap();
        prop_assert_eq!(load_cache(&path, "distill").unwrap(), cache);
    }

    #[test]
    fn teacher_cache_rejects_any_truncation(cache in arb_cache(), frac in 0.0f64..1.0) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_cache(&path, &cache).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = ((bytes.len() - 1) as f64 * frac) as usize;
        std::fs::write(&path, &bytes[..cut]).unwrap();
        let rejected = matches!(load_cache(&path, "distill"), Err(Error::MalformedArtifact { .. }));
        prop_assert!(rejected);
    }

    #[test]
    fn training_set_round_trips(sequences in proptest::collection::vec(arb_sequence(), 0..6)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        save_training_set(&path, serde_json::json!({"tau": 1.2}), &sequences).unwrap();
        let (_, back) = load_training_set(&path, "reasonmaxxer").unwrap();
        prop_assert_eq!(back, sequences);
    }

    #[test]
    fn corpus_round_trips(stream in proptest::collection::vec(0u16..64, 0..4000)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.bin");
        save_corpus(&path, &stream).unwrap();
        prop_assert_eq!(load_corpus(&path, "gen-tasks").unwrap(), stream);
    }

    #[test]
    fn stores_never_confuse_each_others_files(cache in arb_cache()) {
        // Feeding one store's bytes to another loader errors cleanly.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_cache(&path, &cache).unwrap();
        prop_assert!(matches!(
            load_corpus(&path, "gen-tasks"),
            Err(Error::MalformedArtifact { .. })
        ));
        prop_assert!(load_rollouts(&path, "rollout").is_err());
    }
}

#[test]
fn rollout_store_writes_are_byte_stable() {
    // Same payload, two writes, identical bytes: the determinism contract
    // for JSONL artifacts does not depend on map iteration order.
    let rollouts = vec![Rollout {
        problem_id: 7,
        prompt_len: 2,
        tokens: vec![0, 5, 9, 1],
        steps: vec![
            StepRecord { token: 9, logprob: -0.3, entropy: 1.25 },
            StepRecord { token: 1, logprob: -0.1, entropy: 0.5 },
        ],
        reward: 1.0,
    }];
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let meta = serde_json::json!({"split": "heldout", "k": 1});
    save_rollouts(&a, meta.clone(), &rollouts).unwrap();
    save_rollouts(&b, meta, &rollouts).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}
