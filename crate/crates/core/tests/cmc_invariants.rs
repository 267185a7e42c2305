use cmc_core::cmc::{CmcLayer, LayerGeometry};
use cmc_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Explicit `Σ_i T_i · (M ⊙ H_i)` from dense matrices, i over the tasks the
/// kernel of `task` draws on.
fn dense_kernel(layer: &CmcLayer<f64>, task: u32) -> Vec<f64> {
    let t = layer.capacity();
    let m = layer.kernel_params();
    let weights = layer.memory().weights();
    let sharing = layer.task(task).unwrap().sharing;
    let first = if sharing { 1 } else { task };
    let mut kernel = vec![0.0; m];
    for i in first..=task {
        let h = layer.mask(i).unwrap().to_dense();
        let masked: Vec<f64> = weights.iter().zip(&h).map(|(&w, &b)| w * b as f64).collect();
        let tv = &layer.task(i).unwrap().vector.values;
        let mut term = vec![0.0; m];
        for (c, out) in term.iter_mut().enumerate() {
            for r in 0..t {
                *out += tv[r] * masked[r * m + c];
            }
        }
        for (k, v) in kernel.iter_mut().zip(term) {
            *k += v;
        }
    }
    kernel
}

/// Scrambles every parameter of the active task so nothing depends on the
/// initializer's structure.
fn randomize_active(layer: &mut CmcLayer<f64>, task: u32, rng: &mut ChaCha8Rng) {
    let len = layer.active_param_len(task).unwrap();
    let p: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
    layer.set_active_params(task, &p).unwrap();
}

/// Builds a layer with `counts.len()` tasks, all frozen except possibly the last.
#[allow(clippy::too_many_arguments)]
fn build(
    k_in: usize,
    k_out: usize,
    n: usize,
    t: usize,
    counts: &[usize],
    sharing: &[bool],
    freeze_last: bool,
    seed: u64,
) -> CmcLayer<f64> {
    let mut layer = CmcLayer::new(0, LayerGeometry::new(k_in, k_out, n), t).unwrap();
    let total = layer.memory().total();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (i, (&c, &s)) in counts.iter().zip(sharing).enumerate() {
        let id = i as u32 + 1;
        layer
            .begin_task(id, c as f64 / total as f64, s, seed ^ id as u64)
            .unwrap();
        randomize_active(&mut layer, id, &mut rng);
        if i + 1 < counts.len() || freeze_last {
            layer.freeze_task(id).unwrap();
        }
    }
    layer
}

fn instance() -> impl Strategy<Value = (usize, usize, usize, usize, Vec<usize>, Vec<bool>, bool, u64)> {
    (
        1usize..5,
        1usize..5,
        prop_oneof![Just(1usize), Just(3), Just(5)],
        1usize..7,
        1usize..5,
    )
        .prop_flat_map(|(k_in, k_out, n, t, tasks)| {
            let total = k_in * k_out * n * n * t;
            let tasks = tasks.min(total);
            let per_task = (total / 4).max(1);
            (
                Just(k_in),
                Just(k_out),
                Just(n),
                Just(t),
                prop::collection::vec(1..=per_task, tasks),
                prop::collection::vec(any::<bool>(), tasks),
                any::<bool>(),
                any::<u64>(),
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn kernel_matches_dense_oracle((k_in, k_out, n, t, counts, sharing, freeze_last, seed) in instance()) {
        let layer = build(k_in, k_out, n, t, &counts, &sharing, freeze_last, seed);
        for task in 1..=counts.len() as u32 {
            let got = layer.estimate_kernel(task).unwrap();
            let oracle = dense_kernel(&layer, task);
            prop_assert_eq!(got.data(), oracle.as_slice(), "task {}", task);
        }
    }

    #[test]
    fn expansion_keeps_every_kernel((k_in, k_out, n, t, counts, sharing, _f, seed) in instance(), extra in 1usize..16) {
        let mut layer = build(k_in, k_out, n, t, &counts, &sharing, true, seed);
        let before: Vec<Vec<u64>> = (1..=counts.len() as u32)
            .map(|i| layer.estimate_kernel(i).unwrap().data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let free = layer.memory().free_count();
        layer.expand_capacity(extra).unwrap();
        prop_assert_eq!(layer.memory().free_count(), free + extra * layer.kernel_params());
        for (i, b) in before.iter().enumerate() {
            let after: Vec<u64> = layer.estimate_kernel(i as u32 + 1).unwrap().data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(&after, b);
        }
    }
}

#[test]
fn allocation_sequences_account_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut exhausted = 0;
    for seq in 0..1000u64 {
        let geometry = LayerGeometry::new(
            rng.random_range(1..4),
            rng.random_range(1..4),
            [1, 3][rng.random_range(0..2)],
        );
        let t = rng.random_range(1..6);
        let mut layer = CmcLayer::<f64>::new(0, geometry, t).unwrap();
        let total = layer.memory().total();
        let mut free = total;
        let mut next = 1u32;
        for _ in 0..rng.random_range(1..12) {
            let fraction: f64 = rng.random_range(0.0..0.6f64).max(1e-9);
            let requested = (fraction * total as f64).round_ties_even() as usize;
            match layer.begin_task(next, fraction, true, seq) {
                Ok(()) => {
                    assert!(requested >= 1 && requested <= free);
                    free -= requested;
                    if rng.random_bool(0.2) {
                        layer.abort_task(next).unwrap();
                        free += requested;
                    } else {
                        layer.freeze_task(next).unwrap();
                        next += 1;
                    }
                }
                Err(Error::CapacityExhausted {
                    requested: r, free: f, ..
                }) => {
                    assert!(requested > free, "exhausted with {requested} of {free} free");
                    assert_eq!((r, f), (requested, free));
                    exhausted += 1;
                }
                Err(Error::InvalidParameter(_)) => assert_eq!(requested, 0),
                Err(e) => panic!("unexpected {e}"),
            }
            assert_eq!(layer.memory().free_count(), free);
            let masks = layer.memory().masks();
            let covered: usize = masks.iter().map(|m| m.popcount()).sum();
            assert_eq!(covered + free, total);
            for (i, a) in masks.iter().enumerate() {
                for b in &masks[i + 1..] {
                    assert!(a.is_disjoint(b));
                }
            }
        }
    }
    assert!(exhausted > 50, "only {exhausted} exhaustion events");
}
