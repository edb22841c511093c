//! End-to-end paths through files: dataset preparation, checkpoints,
//! calibration, evaluation and sweeps.

use std::fs;

use potq::data::{prepare_dataset, sample_batch, CharVocab, SplitRatios, TokenFile};
use potq::eval::{calibration_batches, evaluate, evaluate_quantized, sweep, EvalArgs};
use potq::model::{
    encode_fixtures, load_checkpoint, load_fixtures, max_fixture_deviation, save_checkpoint,
    GPTConfig, GPTWeights, LanguageModel, LogitFixture, QuantizedModel,
};
use potq::qspec::QuantSpec;
use potq::{Error, ErrorCategory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn corpus(n: usize, seed: u64) -> String {
    let alphabet: Vec<char> = "abcdefgh ijkl\nmnop,.".chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| alphabet[rng.random_range(0..alphabet.len())])
        .collect()
}

fn small_model(vocab: usize) -> GPTWeights {
    let cfg = GPTConfig {
        vocab_size: vocab,
        block_size: 32,
        n_layer: 2,
        n_head: 2,
        n_embd: 16,
    };
    GPTWeights::random(cfg, 42, 0.1, true, false).unwrap()
}

#[test]
fn prepare_dataset_writes_splits_and_vocab() {
    let dir = tempfile::tempdir().unwrap();
    let text = corpus(1000, 1);
    let input = dir.path().join("input.txt");
    fs::write(&input, &text).unwrap();
    let out = dir.path().join("data");
    let prepared = prepare_dataset(&input, &SplitRatios::default(), &out).unwrap();
    assert_eq!(prepared.counts, [800, 100, 100]);

    let vocab = CharVocab::load(&prepared.vocab_path).unwrap();
    assert_eq!(vocab, prepared.vocab);
    let mut ids = Vec::new();
    for path in [&prepared.train, &prepared.val, &prepared.test] {
        let tf = TokenFile::load(path).unwrap();
        assert_eq!(tf.vocab_size as usize, vocab.len());
        ids.extend(tf.tokens.iter().map(|&t| t as usize));
    }
    assert_eq!(vocab.decode(&ids).unwrap(), text);

    let bad = SplitRatios {
        train: 1.0,
        val: 0.0,
        test: 0.0,
    };
    assert!(prepare_dataset(&input, &bad, dir.path().join("x")).is_err());
}

#[test]
fn window_starts_are_roughly_uniform() {
    let toks: Vec<usize> = (0..10_000).map(|i| i % 7).collect();
    let tf = TokenFile::new(7, &toks).unwrap();
    let block = 16;
    let bins = 10;
    let span = (toks.len() - block) as f64;
    let mut counts = vec![0u32; bins];
    for seed in 0..1000 {
        let b = sample_batch(&tf, block, 1, seed).unwrap();
        counts[((b.starts[0] as f64 / span) * bins as f64) as usize] += 1;
    }
    let expected = 1000.0 / bins as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 9 degrees of freedom; 40 is far in the tail (p < 1e-5)
    assert!(chi2 < 40.0, "chi-square {chi2} for {counts:?}");
}

#[test]
fn checkpoint_file_roundtrip_preserves_logits() {
    let dir = tempfile::tempdir().unwrap();
    let w = small_model(20);
    let path = dir.path().join("m.pqck");
    save_checkpoint(&w, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let toks = [1, 5, 19, 0, 3];
    assert_eq!(back.forward(&toks).unwrap(), w.forward(&toks).unwrap());

    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&path, &bytes).unwrap();
    let err = load_checkpoint(&path).unwrap_err();
    assert_eq!(err.category(), ErrorCategory::Data);
}

#[test]
fn dequantized_checkpoint_reproduces_simulated_model() {
    let dir = tempfile::tempdir().unwrap();
    let w = small_model(20);
    let calib = vec![vec![1, 2, 3, 4, 5, 6]];
    let q = QuantizedModel::build(&w, &"pot:e0..4".parse().unwrap(), &calib).unwrap();
    let path = dir.path().join("pot.pqck");
    save_checkpoint(&q.dequantized_weights().unwrap(), &path).unwrap();
    let reloaded = load_checkpoint(&path).unwrap();
    let toks = [7, 3, 11, 2];
    assert_eq!(reloaded.forward(&toks).unwrap(), q.forward(&toks).unwrap());
}

#[test]
fn fixtures_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let w = small_model(20);
    let fixtures: Vec<LogitFixture> = [vec![0u16, 1, 2], vec![19]]
        .into_iter()
        .map(|tokens| {
            let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
            LogitFixture {
                logits: w.forward(&ids).unwrap(),
                tokens,
            }
        })
        .collect();
    let path = dir.path().join("fixtures.bin");
    fs::write(&path, encode_fixtures(&fixtures)).unwrap();
    let loaded = load_fixtures(&path, 20).unwrap();
    assert_eq!(max_fixture_deviation(&w, &loaded).unwrap(), 0.0);
}

fn split(vocab: usize) -> TokenFile {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let toks: Vec<usize> = (0..3000).map(|_| rng.random_range(0..vocab)).collect();
    TokenFile::new(vocab, &toks).unwrap()
}

fn args() -> EvalArgs {
    EvalArgs {
        n_batches: 10,
        batch_size: 4,
        block_size: 32,
        seed: 7,
    }
}

#[test]
fn int32_weights_match_float_ce() {
    let w = small_model(20);
    let tf = split(20);
    let calib = calibration_batches(&tf, 4, 32, 1).unwrap();
    let float = evaluate(&w, &tf, &args()).unwrap();
    let q = QuantizedModel::build(&w, &"sym:32".parse().unwrap(), &calib).unwrap();
    let int32 = evaluate_quantized(&q, &tf, &args()).unwrap();
    assert!((float.ce_mean - int32.ce_mean).abs() <= 1e-3);
    assert_eq!(int32.sites.len(), q.sites().len());
}

#[test]
fn sweep_pairs_seeds_and_records_failures() {
    let w = small_model(20);
    let tf = split(20);
    let calib = calibration_batches(&tf, 4, 32, 1).unwrap();
    let specs: Vec<QuantSpec> = [
        "float",
        "sym:8",
        "pot:e0..4",
        "pot:e0..4",
        "pot:e-40..40;@mode=integer",
    ]
    .iter()
    .map(|s| s.parse().unwrap())
    .collect();
    let rows = sweep(&w, &specs, &calib, &tf, &args()).unwrap();
    assert_eq!(rows.len(), 5);
    let ok: Vec<_> = rows[..4]
        .iter()
        .map(|r| r.outcome.as_ref().unwrap())
        .collect();
    assert!(ok[0].sites.is_empty());
    assert_eq!(ok[2], ok[3]);
    assert!(ok.iter().all(|r| r.seed == 7 && r.n_batches == 10));
    // sym:8 is close to float, the coarse PoT grid is not identical to it
    assert!((ok[1].ce_mean - ok[0].ce_mean).abs() < 0.05);
    assert_ne!(ok[2].ce_mean, ok[0].ce_mean);
    match &rows[4].outcome {
        Err(e @ Error::AccumulatorOverflow { .. }) => {
            assert_eq!(e.category(), ErrorCategory::NumericAudit)
        }
        other => panic!("expected overflow audit failure, got {other:?}"),
    }
}

#[test]
fn integer_mode_matches_simulated_mode() {
    let w = small_model(20);
    let tf = split(20);
    let calib = calibration_batches(&tf, 4, 32, 1).unwrap();
    let sim =
        QuantizedModel::build(&w, &"pot:e-2..5;@act=affine:16".parse().unwrap(), &calib).unwrap();
    let int = QuantizedModel::build(
        &w,
        &"pot:e-2..5;@act=affine:16;@mode=integer".parse().unwrap(),
        &calib,
    )
    .unwrap();
    let toks = &calib[0];
    let a = sim.forward(toks).unwrap();
    let b = int.forward(toks).unwrap();
    let worst = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max);
    assert!(
        worst < 1e-4,
        "integer vs simulated logits differ by {worst}"
    );

    let r = evaluate(
        &int,
        &tf,
        &EvalArgs {
            n_batches: 2,
            ..args()
        },
    )
    .unwrap();
    assert!(r.ops.linear.shifts > 0);
    assert!(r.ops.cycle_reduction > 1.0);
}
