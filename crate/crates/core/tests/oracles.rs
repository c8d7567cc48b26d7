mod support;

use dlm_core::{
    resolve_jump, tau_leaping_step, Candidate, CandidateSet, DecodeState, LogitsView, ModelConfig,
    SpecSet, Stage,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::*;

#[test]
fn reference_matches_dense_toy_forward() {
    use dlm_core::{AttentionLayout, ForwardBatch, Model, ToyModel};
    let model = ToyModel::new(ModelConfig::toy()).unwrap();
    let cfg = model.config().clone();
    let tokens: Vec<u32> = (0..24).map(|i| (i * 37 % 120) as u32).collect();
    let layout = AttentionLayout::full_sequence(tokens.len()).unwrap();
    let out = model
        .forward(&ForwardBatch {
            tokens: &tokens,
            layout: &layout,
            cache: &empty_view(&model),
            step: 0,
            context: &tokens,
            prompt_len: 4,
        })
        .unwrap();
    let reference = Reference { cfg: &cfg, w: model.weights() };
    let want: Vec<f64> = reference.dense(&tokens).logits.into_iter().flatten().collect();
    let got: Vec<f32> = (0..tokens.len()).flat_map(|r| out.logits.row(r).to_vec()).collect();
    assert!(rel_err(&got, &want) < 1e-5);
}

#[test]
fn cache_forward_matches_dense_snapshot() {
    for seed in 0..12 {
        let err = check_cache(seed);
        assert!(err <= 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn batched_blocks_match_isolated_blocks() {
    for seed in 0..10 {
        for stage in [Stage::AcceptJump, Stage::DecodedShare] {
            let r = check_isolation(seed, stage);
            assert!(r.max_rel_err <= 1e-5, "seed {seed} {stage:?}: {}", r.max_rel_err);
            assert!(r.acceptances_match, "seed {seed} {stage:?}");
        }
    }
}

#[test]
fn shared_kv_matches_explicit_substitution() {
    for seed in 0..10 {
        let err = check_shared(seed);
        assert!(err <= 1e-5, "seed {seed}: {err}");
    }
}

fn cands(rng: &mut ChaCha8Rng, k: usize) -> CandidateSet {
    let mut pos: Vec<usize> = (0..32).collect();
    rand::seq::SliceRandom::shuffle(&mut pos[..], rng);
    CandidateSet::new(
        pos.iter()
            .take(k)
            .map(|&position| Candidate {
                position,
                token: rng.random_range(0..100),
                confidence: rng.random_range(0.1..0.9),
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn jump_resolution_matches_case_analysis() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut seen = [false; 3];
    for _ in 0..3000 {
        let (k, stage) = match rng.random_range(0..5) {
            0 => (1, Stage::AcceptJump),
            1 => (2, Stage::AcceptJump),
            2 => (3, Stage::DecodedShare),
            3 => (2, Stage::DecodedShare),
            _ => (4, Stage::DecodedShare),
        };
        let set = SpecSet::new(stage, cands(&mut rng, k));
        let (conf, wrong) = random_confirmations(&mut rng, k, &set);
        let results = outcomes_from(set.candidates().as_slice(), &conf, &wrong);
        let want = jump_oracle(k, stage == Stage::DecodedShare, &conf);
        assert_eq!(resolve_jump(&results, &set), want, "k={k} {stage:?} {conf:?}");
        if k == 2 && stage == Stage::AcceptJump {
            match want {
                (3, 1) => seen[0] = true,
                (3, 2) if conf[0][0] => seen[1] = true,
                (1, 1) => seen[2] = true,
                _ => {}
            }
        }
    }
    assert_eq!(seen, [true; 3]);
}

fn masked_state(n: usize) -> DecodeState {
    DecodeState::new(&[1], n, n, 126).unwrap()
}

fn flat_logits(positions: Vec<usize>) -> LogitsView {
    let n = positions.len();
    let scores = (0..n * 128).map(|i| ((i * 7919) % 17) as f32 * 0.25).collect();
    LogitsView::new(128, positions, vec![0; n], scores).unwrap()
}

#[test]
fn tau_leaping_unmask_fraction() {
    let mut s = masked_state(1000);
    s.set_time(0.5);
    let logits = flat_logits((1..1001).collect());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let next = tau_leaping_step(&s, &logits, 0.25, &mut rng).unwrap();
    let frac = (1000 - next.n_masked()) as f64 / 1000.0;
    assert!((0.45..=0.55).contains(&frac), "{frac}");
    assert_eq!(next.time(), 0.25);
}

#[test]
fn tau_leaping_uniform_chain_takes_k_steps() {
    for seed in 0..20 {
        let mut s = masked_state(64);
        let logits = flat_logits((1..65).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 8;
        let mut steps = 0;
        for i in 1..=k {
            let before = s.clone();
            s = tau_leaping_step(&s, &logits, 1.0 - i as f64 / k as f64, &mut rng).unwrap();
            steps += 1;
            for p in before.response_range() {
                if !before.is_masked(p) {
                    assert_eq!(before.tokens()[p], s.tokens()[p]);
                }
            }
            if s.n_masked() == 0 {
                break;
            }
        }
        assert_eq!(s.n_masked(), 0);
        assert!(steps <= k);
    }
}
