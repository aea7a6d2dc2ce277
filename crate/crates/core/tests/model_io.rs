mod common;

use common::*;
use pow2prune::costmodel::{cost_report, CostParams};
use pow2prune::model_io::{from_bytes, load, measure_compressed, natural_encoding, save, to_bytes, Encoding};
use pow2prune::pruning::sparsity;
use proptest::prelude::*;

fn effective_bits(model: &pow2prune::autodiff::Model) -> Vec<u64> {
    model.weights().flat_map(|(_, w)| w.effective()).map(f64::to_bits).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sparse_round_trip_is_exact(seed in any::<u64>(), bits in 2u8..=10) {
        let model = random_quantized(seed, bits);
        let bytes = to_bytes(&model, Encoding::SparsePow2).unwrap();
        let back = from_bytes(&bytes).unwrap();
        prop_assert_eq!(effective_bits(&model), effective_bits(&back));
        prop_assert_eq!(to_bytes(&back, Encoding::SparsePow2).unwrap(), bytes);
        let x = batch_for(&model, 4, &mut rng(seed));
        // biases are stored as f32, so compare after one save
        prop_assert_eq!(back.evaluate(&x).unwrap(), from_bytes(&to_bytes(&back, Encoding::SparsePow2).unwrap()).unwrap().evaluate(&x).unwrap());
    }

    #[test]
    fn dense_round_trip_is_stable_after_first_save(seed in any::<u64>()) {
        let mut model = random_model(seed);
        prune_randomly(&mut model, 0.3, &mut rng(seed));
        let once = from_bytes(&to_bytes(&model, Encoding::DenseF32).unwrap()).unwrap();
        let bytes = to_bytes(&once, Encoding::DenseF32).unwrap();
        let twice = from_bytes(&bytes).unwrap();
        prop_assert_eq!(effective_bits(&once), effective_bits(&twice));
        prop_assert_eq!(to_bytes(&twice, Encoding::DenseF32).unwrap(), bytes);
        prop_assert_eq!(sparsity(&once).unwrap(), sparsity(&model).unwrap());
    }

    #[test]
    fn mutated_containers_error_or_decode(seed in any::<u64>(), edits in prop::collection::vec((any::<usize>(), any::<u8>()), 1..8), cut in any::<usize>()) {
        let model = random_quantized(seed, 5);
        for enc in [Encoding::SparsePow2, Encoding::DenseF32] {
            let mut bytes = to_bytes(&model, enc).unwrap();
            for &(pos, b) in &edits {
                let n = bytes.len();
                bytes[pos % n] ^= b;
            }
            if let Ok(m) = from_bytes(&bytes) {
                // whatever decodes must be usable
                let x = batch_for(&m, 1, &mut rng(seed));
                let _ = m.evaluate(&x);
                let _ = to_bytes(&m, natural_encoding(&m));
            }
            let n = bytes.len();
            let _ = from_bytes(&bytes[..cut % n]);
        }
    }

    #[test]
    fn sparse_beats_dense_above_half_sparsity(
        seed in any::<u64>(),
        p in 0.55f64..0.99,
        inputs in 4usize..12,
        hidden in 4usize..24,
        outputs in 2usize..5,
    ) {
        // each sparse layer carries a 6-byte header, so layers need a few
        // weights before the comparison is meaningful
        let mut model = mlp(inputs, &[hidden], outputs, seed);
        prune_randomly(&mut model, p, &mut rng(seed));
        pow2prune::quantization::quantize_all(&mut model, 5).unwrap();
        prop_assume!(sparsity(&model).unwrap() > 0.5);
        let sparse = to_bytes(&model, Encoding::SparsePow2).unwrap().len();
        let dense = to_bytes(&model, Encoding::DenseF32).unwrap().len();
        prop_assert!(sparse < dense, "{sparse} >= {dense}");
    }

    #[test]
    fn decoded_values_stay_on_the_grid(seed in any::<u64>()) {
        let back = from_bytes(&to_bytes(&random_quantized(seed, 4), Encoding::SparsePow2).unwrap()).unwrap();
        for (_, w) in back.weights() {
            let grid = w.grid().unwrap();
            prop_assert!(w.effective().iter().all(|&v| grid.contains(v)));
        }
    }
}

#[test]
fn files_round_trip() {
    let dir = std::env::temp_dir().join(format!("pow2prune-io-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("m.spqf");
    let model = random_quantized(3, 5);
    save(&model, &path, Encoding::SparsePow2).unwrap();
    let back = load(&path).unwrap();
    assert_eq!(effective_bits(&model), effective_bits(&back));
    assert!(load(dir.join("missing.spqf")).is_err());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn compressed_size_is_deterministic_and_reported() {
    let model = random_quantized(4, 5);
    let bytes = to_bytes(&model, Encoding::SparsePow2).unwrap();
    assert_eq!(measure_compressed(&bytes), measure_compressed(&bytes));
    let report = cost_report(&model, &CostParams::default()).unwrap();
    assert_eq!(report.memory_compressed, Some(measure_compressed(&bytes) as u64));
}

