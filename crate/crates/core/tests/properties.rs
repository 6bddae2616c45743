use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use isopo_lab::isopo::{draw_overlap_samples, fisher_norm_estimate, interacting_update};
use isopo_lab::linalg::Matrix;
use isopo_lab::policy::{sequence_logprob, LayerWeights, PolicyNet};
use isopo_lab::rng::Streams;
use isopo_lab::tasks::{sample_microbatch, SeqTask, Task};
use isopo_lab::{MatrixF64, PolicyNetF32, PolicyNetF64};

fn task() -> Task {
    Task::Seq(SeqTask {
        modulus: 4,
        horizon: 3,
        exact_match: false,
    })
}

fn net(seed: u64) -> PolicyNetF64 {
    PolicyNet::new(task().layout(), &[6], &mut ChaCha8Rng::seed_from_u64(seed))
}

fn matrices(rows: usize, cols: usize) -> impl Strategy<Value = Vec<MatrixF64>> {
    proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, rows * cols), 1..6)
        .prop_map(move |vs| vs.into_iter().map(|v| Matrix::from_vec(rows, cols, v).unwrap()).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interacting_update_is_linear_in_advantages(grads in matrices(3, 4), alpha in -3.0f64..3.0, c in 1e-3f64..10.0) {
        let refs: Vec<&MatrixF64> = grads.iter().collect();
        let a: Vec<f64> = (0..grads.len()).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..grads.len()).map(|i| (i as f64 * 1.3).cos()).collect();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| alpha * x + y).collect();
        let ua = interacting_update(&refs, &a, c).unwrap();
        let ub = interacting_update(&refs, &b, c).unwrap();
        let um = interacting_update(&refs, &mix, c).unwrap();
        let mut expect = ub.clone();
        expect.axpy(alpha, &ua).unwrap();
        let scale = ua.frobenius_norm() * alpha.abs() + ub.frobenius_norm() + 1e-12;
        prop_assert!(um.sub(&expect).unwrap().frobenius_norm() <= 1e-9 * scale);
    }

    #[test]
    fn fisher_norm_estimate_is_absolutely_homogeneous(seed in 0u64..50, alpha in -5.0f64..5.0) {
        let n = net(seed);
        let prompts = vec![task().prompt(1), task().prompt(9)];
        let mb = sample_microbatch(&n, &task(), &prompts, 4, false, Streams::new(seed)).unwrap();
        let recs = mb.record_refs();
        let samples = draw_overlap_samples(&recs, 10, &mut ChaCha8Rng::seed_from_u64(seed));
        for (l, layer) in samples.layers.iter().enumerate() {
            let v = &recs[0].per_layer_seq_grad[l];
            let f = fisher_norm_estimate(v, layer).unwrap();
            let fa = fisher_norm_estimate(&v.scaled(alpha), layer).unwrap();
            prop_assert!((fa - alpha.abs() * f).abs() <= 1e-12 * (1.0 + f * alpha.abs()));
        }
    }

    #[test]
    fn sampling_is_a_function_of_the_stream(seed in 0u64..1000) {
        let n = net(3);
        let prompts = vec![task().prompt(2), task().prompt(5)];
        let a = sample_microbatch(&n, &task(), &prompts, 3, false, Streams::new(seed)).unwrap();
        let b = sample_microbatch(&n, &task(), &prompts, 3, false, Streams::new(seed)).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn single_precision_policy_tracks_double() {
    let n64 = net(11);
    let layers: Vec<LayerWeights<f32>> = n64
        .layers()
        .iter()
        .map(|l| LayerWeights { weight: l.weight.cast() })
        .collect();
    let n32 = PolicyNetF32::from_layers(n64.layout(), layers).unwrap();
    let p64 = task().prompt::<f64>(7);
    let p32 = task().prompt::<f32>(7);
    for tokens in [[0, 1, 2], [3, 3, 0], [2, 0, 1]] {
        let a = sequence_logprob(&n64, &p64.features, &tokens).unwrap();
        let b = sequence_logprob(&n32, &p32.features, &tokens).unwrap();
        assert!((a - b as f64).abs() <= 1e-5 * a.abs().max(1.0), "{a} vs {b}");
    }
}
