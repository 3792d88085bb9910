use dsmyolo::ssm::{
    cross_merge, cross_merge_index, cross_scan, cross_scan_index, discretize_taylor,
    discretize_zoh, selective_scan_blocked, selective_scan_seq, Discretization, Projection,
    SsmParams, DIRECTIONS,
};
use dsmyolo::tensor::{Tape, Tensor};
use dsmyolo::Float;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn problem<T: Float>(
    rng: &mut ChaCha8Rng,
    l: usize,
    d: usize,
    n: usize,
    per_step: bool,
    disc: Discretization,
) -> (Tensor<T>, SsmParams<T>) {
    let mut t = |shape: &[usize], lo: f64, hi: f64| Tensor::<T>::rand_uniform(shape, lo, hi, rng);
    let x = t(&[l, d], -1.0, 1.0);
    let a = t(&[d, n], -3.0, -0.01);
    let (b, p) = if per_step {
        (
            Projection::PerStep(t(&[l, n], -1.0, 1.0)),
            Projection::PerStep(t(&[l, n], -1.0, 1.0)),
        )
    } else {
        (
            Projection::Shared(t(&[d, n], -1.0, 1.0)),
            Projection::Shared(t(&[d, n], -1.0, 1.0)),
        )
    };
    let q = t(&[d], -1.0, 1.0).into_data();
    let delta = t(&[l, d], 1e-3, 0.5);
    (
        x,
        SsmParams {
            a,
            b,
            p,
            q,
            delta,
            discretization: disc,
        },
    )
}

#[test]
fn blocked_matches_sequential_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..100 {
        let (l, d, n) = (
            rng.gen_range(1..=256),
            rng.gen_range(1..=16),
            rng.gen_range(1..=16),
        );
        let bl = [1, 4, 16, 64][case % 4];
        let disc = if case % 2 == 0 {
            Discretization::Zoh
        } else {
            Discretization::Taylor
        };
        let per_step = case % 3 != 0;
        let (x, p) = problem::<f64>(&mut rng, l, d, n, per_step, disc);
        let (a, b) = (
            selective_scan_seq(&x, &p).unwrap(),
            selective_scan_blocked(&x, &p, bl).unwrap(),
        );
        assert!(
            a.y.max_abs_diff(&b.y) <= 1e-12 && a.h_final.max_abs_diff(&b.h_final) <= 1e-12,
            "case {case}"
        );
        let (x, p) = problem::<f32>(&mut rng, l, d, n, per_step, disc);
        let (a, b) = (
            selective_scan_seq(&x, &p).unwrap(),
            selective_scan_blocked(&x, &p, bl).unwrap(),
        );
        assert!(a.y.max_abs_diff(&b.y) <= 1e-5, "case {case} f32");
    }
}

#[test]
fn tape_scan_matches_sequential_reference() {
    // batched form with one batch entry and Δ, B, P per step
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for disc in [Discretization::Zoh, Discretization::Taylor] {
        let (l, d, n) = (9, 3, 4);
        let (x, p) = problem::<f64>(&mut rng, l, d, n, true, disc);
        let want = selective_scan_seq(&x, &p).unwrap().y;
        let (Projection::PerStep(b), Projection::PerStep(pp)) = (&p.b, &p.p) else {
            unreachable!()
        };
        let mut tape = Tape::inference();
        let r = |t: &Tensor<f64>, s: &[usize]| t.clone().reshape(s).unwrap();
        let v = [
            tape.constant(r(&x, &[1, l, d])),
            tape.constant(r(&p.delta, &[1, l, d])),
            tape.constant(p.a.clone()),
            tape.constant(r(b, &[1, l, n])),
            tape.constant(r(pp, &[1, l, n])),
            tape.constant(Tensor::new(&[d], p.q.clone()).unwrap()),
        ];
        let y = tape
            .selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], disc)
            .unwrap();
        assert!(
            tape.value(y)
                .clone()
                .reshape(&[l, d])
                .unwrap()
                .max_abs_diff(&want)
                < 1e-14
        );
    }
}

#[test]
fn zoh_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (d, n) = (5, 7);
    let a = Tensor::<f64>::rand_uniform(&[d, n], -4.0, -0.01, &mut rng);
    let b = Tensor::<f64>::rand_uniform(&[d, n], -1.0, 1.0, &mut rng);
    let delta: Vec<f64> = (0..d).map(|_| rng.gen_range(1e-3..1.0)).collect();
    let (a_bar, b_bar) = discretize_zoh(&a, &b, &delta).unwrap();
    for i in 0..d * n {
        let (av, dt) = (a.data()[i], delta[i / n]);
        assert!((a_bar.data()[i] - (dt * av).exp()).abs() <= 1e-12);
        assert!((b_bar.data()[i] - ((dt * av).exp() - 1.0) / av * b.data()[i]).abs() <= 1e-12);
    }
}

#[test]
fn taylor_relative_error_is_first_order() {
    let a = Tensor::from_f64(&[1, 3], &[-0.5, -1.0, -2.0]).unwrap();
    let b = Tensor::from_f64(&[1, 3], &[1.0, -0.7, 0.3]).unwrap();
    let err = |dt: f64| {
        let (_, z) = discretize_zoh(&a, &b, &[dt]).unwrap();
        let (_, t) = discretize_taylor(&a, &b, &[dt]).unwrap();
        (0..3)
            .map(|i| ((t.data()[i] - z.data()[i]) / z.data()[i]).abs())
            .fold(0.0, f64::max)
    };
    for (big, small) in [(0.1, 0.01), (0.01, 0.001)] {
        let ratio = err(big) / err(small);
        assert!((8.0..=12.0).contains(&ratio), "ratio {ratio}");
    }
}

#[test]
fn cross_index_agrees_with_cross_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, d, h, w) = (2, 3, 4, 5);
    let fmap = Tensor::<f64>::rand_uniform(&[n, d, h, w], -1.0, 1.0, &mut rng);
    let seqs = cross_scan(&fmap).unwrap();
    for (k, dir) in DIRECTIONS.iter().enumerate() {
        let idx = cross_scan_index(*dir, n, d, h, w);
        let gathered: Vec<f64> = idx.iter().map(|&i| fmap.data()[i]).collect();
        assert_eq!(gathered, seqs[k].data());
        let back = cross_merge_index(*dir, n, d, h, w);
        let restored: Vec<f64> = back.iter().map(|&i| seqs[k].data()[i]).collect();
        assert_eq!(restored, fmap.data());
    }
    let merged = cross_merge(&seqs, h, w).unwrap();
    assert!(merged.max_abs_diff(&fmap.map(|v| 4.0 * v)) < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn blocked_equivalence(seed in any::<u64>(), l in 1usize..80, d in 1usize..6, n in 1usize..6, bl in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, p) = problem::<f64>(&mut rng, l, d, n, seed % 2 == 0, Discretization::Zoh);
        let a = selective_scan_seq(&x, &p).unwrap();
        let b = selective_scan_blocked(&x, &p, bl).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn scan_is_linear_in_input(seed in any::<u64>(), alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x1, p) = problem::<f64>(&mut rng, 17, 3, 4, true, Discretization::Taylor);
        let x2 = Tensor::<f64>::rand_uniform(&[17, 3], -1.0, 1.0, &mut rng);
        let mix = Tensor::new(&[17, 3], x1.data().iter().zip(x2.data()).map(|(a, b)| alpha * a + beta * b).collect()).unwrap();
        let y1 = selective_scan_seq(&x1, &p).unwrap().y;
        let y2 = selective_scan_seq(&x2, &p).unwrap().y;
        let ym = selective_scan_seq(&mix, &p).unwrap().y;
        let want = Tensor::new(&[17, 3], y1.data().iter().zip(y2.data()).map(|(a, b)| alpha * a + beta * b).collect()).unwrap();
        prop_assert!(ym.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn stable_state_stays_bounded(seed in any::<u64>()) {
        // |Ā| < 1 and |B̄ x| ≤ Δ|B||x| keep |h| below max|B̄ x| / (1 − max|Ā|)
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, p) = problem::<f64>(&mut rng, 400, 2, 3, false, Discretization::Zoh);
        let r = selective_scan_seq(&x, &p).unwrap();
        let a_max = p.a.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let decay = (0.001 * a_max).exp();
        let drive = 0.5;
        prop_assert!(r.h_final.data().iter().all(|h| h.abs() <= drive / (1.0 - decay) + 1e-9));
        prop_assert!(r.y.all_finite());
    }
}
