mod common;

use common::chain;
use musdiff_core::diffusion::{
    p_reverse, posterior, q_sample, q_xt_given_x0, vb_loss, vb_loss_tape, NoiseSchedule, Reduction,
    ScheduleKind,
};
use musdiff_core::tensor::{grad_check, GradCheckOptions, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const KINDS: [ScheduleKind; 2] = [ScheduleKind::UniformAbsorption, ScheduleKind::Cosine];

#[test]
fn marginals_and_posteriors_match_matrix_products() {
    let mut worst = 0.0f64;
    for kind in KINDS {
        for vocab in 2..=6 {
            for steps in 1..=8 {
                let s = NoiseSchedule::new(steps, kind).unwrap();
                for x0 in 0..vocab - 1 {
                    for t in 1..=steps {
                        let oracle = chain::marginal(vocab, &s, x0, t);
                        let got = q_xt_given_x0(x0, t, &s, vocab).unwrap();
                        for (a, b) in oracle.iter().zip(got.probs()) {
                            worst = worst.max((a - b).abs());
                        }
                        for xt in [x0, vocab - 1] {
                            if oracle[xt] == 0.0 {
                                continue;
                            }
                            let bayes = chain::posterior(vocab, &s, xt, x0, t);
                            let got = posterior(xt, x0, t, &s, vocab).unwrap();
                            for (a, b) in bayes.iter().zip(got.probs()) {
                                worst = worst.max((a - b).abs());
                            }
                        }
                    }
                }
            }
        }
    }
    assert!(worst <= 1e-10, "worst deviation {worst:e}");
}

#[test]
fn v4_t3_worked_example() {
    let s = NoiseSchedule::new(3, ScheduleKind::UniformAbsorption).unwrap();
    let q = q_xt_given_x0(1, 2, &s, 4).unwrap();
    let oracle = chain::marginal(4, &s, 1, 2);
    for (a, b) in q.probs().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!((q.prob(1) - 1.0 / 3.0).abs() < 1e-15);
    let p = posterior(3, 1, 2, &s, 4).unwrap();
    // (ᾱ_1 − ᾱ_2) / (1 − ᾱ_2) = (2/3 − 1/3) / (2/3)
    assert!((p.prob(1) - 0.5).abs() < 1e-15);
    assert!((p.prob(3) - 0.5).abs() < 1e-15);
}

#[test]
fn posterior_marginalizes_to_previous_marginal() {
    for kind in KINDS {
        for vocab in 2..=6 {
            for steps in 1..=8 {
                let s = NoiseSchedule::new(steps, kind).unwrap();
                for x0 in 0..vocab - 1 {
                    for t in 1..=steps {
                        let qt = q_xt_given_x0(x0, t, &s, vocab).unwrap();
                        let mut acc = vec![0.0; vocab];
                        for xt in [x0, vocab - 1] {
                            if qt.prob(xt) == 0.0 {
                                continue;
                            }
                            let post = posterior(xt, x0, t, &s, vocab).unwrap();
                            for (a, p) in acc.iter_mut().zip(post.probs()) {
                                *a += qt.prob(xt) * p;
                            }
                        }
                        let prev = chain::marginal(vocab, &s, x0, t - 1);
                        for (a, b) in acc.iter().zip(&prev) {
                            assert!((a - b).abs() < 1e-10, "V={vocab} T={steps} t={t}");
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn reverse_step_matches_explicit_marginalization() {
    for kind in KINDS {
        let s = NoiseSchedule::new(5, kind).unwrap();
        let vocab = 4;
        let xt = [3, 0, 3, 2];
        let logits = Tensor::from_fn(&[4, 3], |i| (i as f64 * 1.7).cos() * 3.0);
        for t in 1..=5 {
            let rows = p_reverse(&logits, &xt, t, &s).unwrap();
            for (i, row) in rows.iter().enumerate() {
                let expected = if xt[i] == 3 {
                    let p = chain::softmax(&logits.data()[i * 3..i * 3 + 3]);
                    chain::reverse_masked(vocab, &s, &p, t)
                } else {
                    chain::one_hot(vocab, xt[i])
                };
                for (a, b) in row.probs().iter().zip(&expected) {
                    assert!((a - b).abs() < 1e-12, "t={t} position {i}");
                }
            }
        }
    }
}

#[test]
fn summed_loss_equals_enumerated_bound() {
    let mut worst = 0.0f64;
    for kind in KINDS {
        for vocab in 2..=5 {
            for len in 1..=4 {
                for steps in 1..=4 {
                    let s = NoiseSchedule::new(steps, kind).unwrap();
                    let x0: Vec<usize> = (0..len).map(|i| (i * 2 + 1) % (vocab - 1)).collect();
                    let oracle = chain::enumerated_bound(vocab, &s, &x0);
                    let mut total = 0.0;
                    for t in 1..=steps {
                        for xt in chain::corruptions(&x0, vocab - 1) {
                            let q = chain::joint_marginal(vocab, &s, &x0, &xt, t);
                            if q == 0.0 {
                                continue;
                            }
                            let logits = chain::toy_logits(&xt, t, vocab - 1);
                            let l = vb_loss(&logits, &x0, &xt, t, &s, Reduction::Sum).unwrap();
                            total += q * l.total;
                            if t == 1 {
                                assert_eq!(l.prior_kl, 0.0);
                            }
                        }
                    }
                    worst = worst.max((total - oracle).abs());
                    assert!(
                        (total - oracle).abs() <= 1e-8,
                        "{kind} V={vocab} L={len} T={steps}: {total} vs {oracle}"
                    );
                }
            }
        }
    }
    println!("worst ELBO deviation {worst:e}");
}

#[test]
fn masked_fraction_concentrates() {
    let s = NoiseSchedule::new(10, ScheduleKind::UniformAbsorption).unwrap();
    // ᾱ_3 = 0.7
    let x0 = vec![1usize; 10_000];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xt = q_sample(&x0, 3, &s, 9, None, &mut rng).unwrap();
    let frac = xt.iter().filter(|&&x| x == 9).count() as f64 / 1e4;
    let sigma = (0.3f64 * 0.7 / 1e4).sqrt();
    assert!((frac - 0.3).abs() <= 3.0 * sigma, "{frac}");
    let again = q_sample(&x0, 3, &s, 9, None, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(xt, again);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let s = NoiseSchedule::new(6, ScheduleKind::Cosine).unwrap();
    let x0 = [0, 3, 1, 2, 2];
    let xt = [5, 3, 5, 5, 2];
    let logits = Tensor::from_fn(&[5, 5], |i| (i as f64 * 0.61).sin());
    for t in [1, 2, 6] {
        for red in [Reduction::Mean, Reduction::Sum] {
            let r = grad_check(
                |tape, v| {
                    vb_loss_tape(tape, v[0], &x0, &xt, t, &s, red).map_err(|e| match e {
                        musdiff_core::diffusion::DiffusionError::Numeric(n) => n,
                        other => panic!("{other}"),
                    })
                },
                std::slice::from_ref(&logits),
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "t={t}: {r:?}");
        }
    }
}

proptest! {
    #[test]
    fn corruption_stays_on_the_chain(
        x0 in proptest::collection::vec(0usize..7, 1..64),
        steps in 1usize..40,
        frac in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let s = NoiseSchedule::new(steps, ScheduleKind::Cosine).unwrap();
        let t = 1 + ((steps - 1) as f64 * frac) as usize;
        let xt = q_sample(&x0, t, &s, 7, None, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for (a, b) in x0.iter().zip(&xt) {
            prop_assert!(b == a || *b == 7);
        }
    }

    #[test]
    fn schedules_are_valid(steps in 1usize..2048) {
        for kind in KINDS {
            let s = NoiseSchedule::new(steps, kind).unwrap();
            prop_assert!(s.alpha_bar(steps) <= 1e-6);
            prop_assert_eq!(s.alpha_bar(0), 1.0);
            let mut prod = 1.0;
            for t in 1..=steps {
                prod *= 1.0 - s.beta(t);
                prop_assert!((prod - s.alpha_bar(t)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn reverse_rows_are_distributions(
        logits in proptest::collection::vec(-30.0f64..30.0, 12),
        t in 1usize..9,
    ) {
        let s = NoiseSchedule::new(8, ScheduleKind::UniformAbsorption).unwrap();
        let lt = Tensor::new(vec![3, 4], logits).unwrap();
        for row in p_reverse(&lt, &[4, 1, 4], t, &s).unwrap() {
            let sum: f64 = row.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(row.probs().iter().all(|p| *p >= 0.0));
        }
    }
}
