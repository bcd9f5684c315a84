use std::fs::File;
use std::io::{BufReader, BufWriter};

use proptest::prelude::*;

use msd_core::datagen::{gen_text_corpus, gen_visual_corpus, read_jsonl, write_jsonl};
use msd_core::draft::{DraftConfig, DraftMode, DraftParams};
use msd_core::engine::{speculative_generate, DecodeMode, SpecConfig};
use msd_core::lossless::{certify_instance, LosslessInstance};
use msd_core::metrics::compute_tau;
use msd_core::rng::RngState;
use msd_core::target::{AssembledSequence, ImagePatchGrid, TargetConfig, TargetParams, TextRole, TextToken};
use msd_core::tensor::Matrix;
use msd_core::verifier::AcceptanceRule;
use msd_core::weights::WeightFile;

fn tiny_target(vocab: usize, depth: usize, seed: u64) -> TargetParams {
    TargetParams::new(TargetConfig {
        vocab,
        dim: 8,
        heads: 2,
        depth,
        vision_depth: 1,
        patch_dim: 3,
        max_patches: 4,
        mlp_hidden: 12,
        projector_hidden: 8,
        max_positions: 40,
        seed,
    })
}

fn draft_mode() -> impl Strategy<Value = DraftMode> {
    prop_oneof![Just(DraftMode::Decoupled), Just(DraftMode::BaselineConcat)]
}

fn decode_mode() -> impl Strategy<Value = DecodeMode> {
    prop_oneof![
        (1usize..=5).prop_map(|gamma| DecodeMode::Chain { gamma }),
        prop::collection::vec(1usize..=3, 1..=4).prop_map(|plan| DecodeMode::Tree { plan }),
    ]
}

fn prompt(target: &TargetParams, side: usize, instruction: &[usize], seed: u64) -> AssembledSequence {
    let grid = (side > 0).then(|| {
        let mut rng = RngState::new(seed);
        ImagePatchGrid::new(side, Matrix::randn(side * side, 3, 1.0, &mut rng)).unwrap()
    });
    let v = target.vocab();
    let instruction: Vec<usize> = instruction.iter().map(|t| 1 + t % (v - 1)).collect();
    target
        .assemble_sequence(
            &TextToken::list(&[1], TextRole::System),
            grid.as_ref(),
            &TextToken::list(&instruction, TextRole::Instruction),
        )
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn greedy_speculation_reproduces_target_decoding(
        vocab in 3usize..=12,
        depth in 1usize..=2,
        seed in any::<u64>(),
        mode in draft_mode(),
        decode in decode_mode(),
        side in 0usize..=2,
        instruction in prop::collection::vec(0usize..64, 0..4),
        max_tokens in 1usize..=10,
    ) {
        let target = tiny_target(vocab, depth, seed);
        let draft = DraftParams::new(&target, &DraftConfig { mode, mlp_hidden: 12, seed: seed ^ 1 });
        let seq = prompt(&target, side, &instruction, seed);
        let reference: Vec<usize> = target
            .autoregressive_generate(&seq, 0.0, max_tokens, &mut RngState::new(0))
            .unwrap()
            .iter()
            .map(|t| t.id)
            .collect();
        let spec = SpecConfig { mode: decode, temperature: 0.0, max_tokens, rule: AcceptanceRule::Standard };
        let (out, _) = speculative_generate(&target, &draft, &seq, &spec, &mut RngState::new(seed)).unwrap();
        prop_assert_eq!(out, reference);
    }

    #[test]
    fn traces_account_for_every_token(
        seed in any::<u64>(),
        mode in draft_mode(),
        decode in decode_mode(),
        temperature in prop_oneof![Just(0.0), 0.3f64..2.0],
        side in 0usize..=2,
        instruction in prop::collection::vec(0usize..64, 1..4),
    ) {
        let target = tiny_target(8, 1, seed);
        let draft = DraftParams::new(&target, &DraftConfig { mode, mlp_hidden: 12, seed: seed ^ 2 });
        let seq = prompt(&target, side, &instruction, seed);
        let deepest = match &decode {
            DecodeMode::Chain { gamma } => *gamma,
            DecodeMode::Tree { plan } => plan.len(),
        };
        let spec = SpecConfig { mode: decode, temperature, max_tokens: 16, rule: AcceptanceRule::Standard };
        let (out, traces) = speculative_generate(&target, &draft, &seq, &spec, &mut RngState::new(seed)).unwrap();
        for t in &traces {
            prop_assert!(t.appended >= 1 && t.appended <= deepest + 1);
            if !t.truncated {
                prop_assert_eq!(t.appended, t.accepted + 1);
            }
        }
        prop_assert_eq!(traces.iter().map(|t| t.appended).sum::<usize>(), out.len());
        prop_assert_eq!(compute_tau(&traces).unwrap(), out.len() as f64 / traces.len() as f64);
    }

    #[test]
    fn sampled_speculation_matches_target_distribution(
        vocab in 2usize..=3,
        seed in 0u64..1000,
        temperature in 0.5f64..1.5,
        gamma in 1usize..=2,
    ) {
        let instance = LosslessInstance { vocab, temperature, mode: DecodeMode::Chain { gamma }, seed, max_tokens: 2 };
        let report = certify_instance(&instance, AcceptanceRule::Standard).unwrap();
        prop_assert!(report.violation.is_none());
        prop_assert!(report.tv <= 1e-9, "tv {}", report.tv);
    }
}

#[test]
fn weight_files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("models.msdw");
    let target = tiny_target(10, 2, 3);
    let config = DraftConfig { mode: DraftMode::Decoupled, mlp_hidden: 12, seed: 4 };
    let draft = DraftParams::new(&target, &config);
    let file = WeightFile {
        target: Some(target.clone()),
        draft: Some((config, draft)),
        meta: serde_json::json!({"note": "round trip"}),
    };
    file.write(BufWriter::new(File::create(&path).unwrap())).unwrap();
    let back = WeightFile::read(BufReader::new(File::open(&path).unwrap())).unwrap();
    assert_eq!(back, file);
}

#[test]
fn corpora_are_seeded_and_survive_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let text = gen_text_corpus(40, 7, 8).unwrap();
    let visual = gen_visual_corpus(40, 3, 7, 9).unwrap();
    assert_eq!(text, gen_text_corpus(40, 7, 8).unwrap());
    assert_eq!(visual, gen_visual_corpus(40, 3, 7, 9).unwrap());
    assert_ne!(visual, gen_visual_corpus(40, 3, 7, 10).unwrap());
    for (name, corpus) in [("text.jsonl", &text), ("visual.jsonl", &visual)] {
        let path = dir.path().join(name);
        write_jsonl(corpus, BufWriter::new(File::create(&path).unwrap())).unwrap();
        let back = read_jsonl(BufReader::new(File::open(&path).unwrap())).unwrap();
        assert_eq!(&back, corpus);
    }
}
