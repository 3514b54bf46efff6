//! Randomized invariants of the probability, partition and decoupled-loss kernels.

use cakd::decoupled::{decouple, decouple_single_label, grad_student, plain_kl_with_grad};
use cakd::partition::{binary_probs, confidence_ratio, product_identity_check, within_cluster_probs};
use cakd::{kl_divergence, softmax, ComponentWeights, LossConfig, Partition, ProbVector};
use proptest::prelude::*;

fn values(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0..30.0f64, 2..=max_len)
}

fn temperature() -> impl Strategy<Value = f64> {
    0.5..8.0f64
}

/// Values plus a two-sided strong-cluster mask.
fn values_and_partition(max_len: usize) -> impl Strategy<Value = (Vec<f64>, Partition)> {
    values(max_len).prop_flat_map(|v| {
        let n = v.len();
        (Just(v), prop::collection::vec(any::<bool>(), n), 0..n).prop_map(move |(v, mut mask, pin)| {
            // force both clusters to be non-empty
            mask[pin] = true;
            mask[(pin + 1) % n] = false;
            let strong = (0..n).filter(|&i| mask[i]);
            let part = Partition::from_strong(strong, n).unwrap();
            (v, part)
        })
    })
}

fn pair_and_partition(max_len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Partition)> {
    values_and_partition(max_len).prop_flat_map(|(t, p)| {
        let n = t.len();
        (Just(t), prop::collection::vec(-30.0..30.0f64, n), Just(p))
    })
}

fn prob_vector(len: usize) -> impl Strategy<Value = ProbVector<f64>> {
    prop::collection::vec(-10.0..10.0f64, len).prop_map(|f| softmax(&f, 1.0).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_normalizes(f in values(64), t in temperature()) {
        let p = softmax(&f, t).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn softmax_shift_invariant(f in values(64), t in temperature(), c in -100.0..100.0f64) {
        let shifted: Vec<f64> = f.iter().map(|v| v + c).collect();
        let (a, b) = (softmax(&f, t).unwrap(), softmax(&shifted, t).unwrap());
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn gibbs_inequality(p in prob_vector(6), q in prob_vector(6)) {
        let kl = kl_divergence(&p, &q).unwrap();
        prop_assert!(kl >= -1e-12);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() <= 1e-12);
        let max_gap = p.iter().zip(q.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if kl.abs() <= 1e-12 {
            prop_assert!(max_gap <= 1e-5);
        }
    }

    #[test]
    fn cluster_probabilities_normalize((f, part) in values_and_partition(64), t in temperature()) {
        let b = binary_probs(&f, &part, t).unwrap();
        prop_assert!((b.strong + b.weak - 1.0).abs() <= 1e-12);
        let c = within_cluster_probs(&f, &part, t).unwrap();
        for side in [c.strong.unwrap(), c.weak.unwrap()] {
            prop_assert!((side.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn product_identity((f, part) in values_and_partition(128), t in temperature()) {
        prop_assert!(product_identity_check(&f, &part, t));
    }

    #[test]
    fn confidence_ratio_matches_masses((f, part) in values_and_partition(32), t in temperature()) {
        let b = binary_probs(&f, &part, t).unwrap();
        let r = confidence_ratio(&f, &part, t).unwrap();
        prop_assert!((r - b.strong / b.weak).abs() <= 1e-10 * r.max(1.0));
    }

    #[test]
    fn top_k_permutation_consistent(f in prop::collection::vec(-5.0..5.0f64, 2..40), seed in any::<u64>(), k_frac in 0.0..1.0f64) {
        // distinct values so any permutation preserves the tie-break order
        let mut f = f;
        for (i, v) in f.iter_mut().enumerate() {
            *v += i as f64 * 1e-9;
        }
        let n = f.len();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize % (n - 1);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut state = seed;
        for i in (1..n).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (state >> 33) as usize % (i + 1));
        }
        // permuted[i] = f[perm[i]]
        let permuted: Vec<f64> = perm.iter().map(|&j| f[j]).collect();
        let base = Partition::top_k(&f, k).unwrap();
        let moved = Partition::top_k(&permuted, k).unwrap();
        let mut mapped: Vec<usize> = moved.strong().iter().map(|&i| perm[i]).collect();
        mapped.sort_unstable();
        let mut expect = base.strong().to_vec();
        expect.sort_unstable();
        prop_assert_eq!(mapped, expect);
    }

    #[test]
    fn decoupling_identity((ft, fs, part) in pair_and_partition(128), t in temperature()) {
        let cfg = LossConfig { temperature: t, ..LossConfig::default() };
        let d = decouple(&ft, &fs, &part, &cfg).unwrap();
        prop_assert!((d.plain_kl - d.recomposed()).abs() <= 1e-9 * d.plain_kl.max(1.0));
        for v in [d.bcd, d.scd, d.wcd, d.plain_kl] {
            prop_assert!(v >= -1e-12);
        }
    }

    #[test]
    fn single_label_identity((ft, fs, _) in pair_and_partition(128), t in temperature(), pick in any::<prop::sample::Index>()) {
        let target = pick.index(ft.len());
        let cfg = LossConfig { temperature: t, ..LossConfig::default() };
        let d = decouple_single_label(&ft, &fs, target, &cfg).unwrap();
        prop_assert_eq!(d.scd, 0.0);
        prop_assert!((d.plain_kl - (d.bcd + d.p_w_teacher * d.wcd)).abs() <= 1e-9 * d.plain_kl.max(1.0));
    }

    #[test]
    fn recovery_matches_plain_kd((ft, fs, part) in pair_and_partition(64), t in temperature()) {
        let cfg = LossConfig { temperature: t, weights: ComponentWeights::TeacherMass, ..LossConfig::default() };
        let d = decouple(&ft, &fs, &part, &cfg).unwrap();
        let g = grad_student(&ft, &fs, &part, &cfg).unwrap();
        let (kl, kg) = plain_kl_with_grad(&ft, &fs, t).unwrap();
        prop_assert!((d.weighted_total - kl).abs() <= 1e-9);
        for (a, b) in g.iter().zip(&kg) {
            prop_assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn zero_at_agreement((ft, _, part) in pair_and_partition(64), t in temperature(), c in -50.0..50.0f64) {
        let fs: Vec<f64> = ft.iter().map(|v| v + c).collect();
        let cfg = LossConfig { temperature: t, ..LossConfig::default() };
        let d = decouple(&ft, &fs, &part, &cfg).unwrap();
        for v in [d.bcd, d.scd, d.wcd, d.plain_kl, d.weighted_total] {
            prop_assert!(v.abs() <= 1e-12);
        }
        for g in grad_student(&ft, &fs, &part, &cfg).unwrap() {
            prop_assert!(g.abs() <= 1e-10);
        }
    }
}

#[test]
fn softmax_flattens_at_huge_temperature() {
    let p = softmax(&[3.0, -2.0, 10.0, 0.0], 1e6).unwrap();
    assert!(p.iter().all(|v: &f64| (v - 0.25).abs() <= 1e-4));
}

#[test]
fn eight_dim_gradient_against_finite_differences() {
    use cakd::oracle::{self, Dd};
    let ft = [0.4, -1.3, 2.2, 0.0, 0.9, -0.6, 1.7, -2.4];
    let fs = [1.1, 0.3, -0.2, 0.8, -1.5, 0.6, 0.1, 2.0];
    let part = Partition::from_strong([2, 4, 6], 8).unwrap();
    let cfg = LossConfig {
        temperature: 3.0,
        ..LossConfig::default()
    };
    let g = grad_student(&ft, &fs, &part, &cfg).unwrap();
    let teacher: Vec<Dd> = ft.iter().map(|&v| Dd::new(v)).collect();
    for (j, &analytic) in g.iter().enumerate() {
        let numeric = oracle::central_difference(&fs, j, 1e-5, |s| {
            let s: Vec<Dd> = s.iter().map(|&v| Dd::new(v)).collect();
            oracle::decoupled_loss(&teacher, &s, &part, Dd::new(3.0), &cfg.weights)
        });
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        assert!(rel <= 1e-5, "coordinate {j}: {analytic} vs {numeric}");
    }
}
