use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skill_dt::policy::{Policy, PolicyConfig, PolicyInput};
use skill_dt::quantizer::{vq_loss, SkillCodebook};
use skill_dt::relabel::generate_histograms;
use skill_dt::sdt;
use skill_dt::smm::wasserstein_1d;
use skill_dt::tensor::Mat;
use skill_dt::trajectory::{sample_batch, Dataset, Trajectory};

fn histogram(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_map(|mut h| {
        if h.iter().all(|&v| v == 0.0) {
            h[0] = 1.0;
        }
        let s: f64 = h.iter().sum();
        h.iter_mut().for_each(|v| *v /= s);
        h
    })
}

fn triple() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (2usize..=16).prop_flat_map(|n| (histogram(n), histogram(n), histogram(n)))
}

fn sequence() -> impl Strategy<Value = (Vec<usize>, usize)> {
    (1usize..=20).prop_flat_map(|n| (prop::collection::vec(0..n, 1..=60), Just(n)))
}

/// Each state records `(trajectory, step)` so any misplaced read is visible.
fn tagged_dataset(lengths: &[usize]) -> Dataset {
    let trajs = lengths
        .iter()
        .enumerate()
        .map(|(i, &len)| {
            let states = (0..len).flat_map(|t| [i as f32, t as f32]).collect();
            Trajectory::new(i as u64, 2, 1, states, vec![0.5; len], None).unwrap()
        })
        .collect();
    Dataset::new("tagged", trajs).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn histograms_telescope_and_normalize((idx, n) in sequence()) {
        let h = generate_histograms::<f64>(&idx, n).unwrap();
        let len = idx.len();
        for t in 0..len {
            let row = h.row(t);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            if t + 1 < len {
                for k in 0..n {
                    let diff = (len - t) as f64 * row[k] - (len - t - 1) as f64 * h.get(t + 1, k);
                    let one_hot = if idx[t] == k { 1.0 } else { 0.0 };
                    prop_assert!((diff - one_hot).abs() < 1e-9);
                }
            }
        }
        let last = h.row(len - 1);
        prop_assert_eq!(last[idx[len - 1]], 1.0);
    }

    #[test]
    fn wasserstein_is_a_metric((p, q, r) in triple()) {
        let pq = wasserstein_1d(&p, &q).unwrap();
        let qp = wasserstein_1d(&q, &p).unwrap();
        let pr = wasserstein_1d(&p, &r).unwrap();
        let rq = wasserstein_1d(&r, &q).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&pq));
        prop_assert!((pq - qp).abs() < 1e-12);
        prop_assert_eq!(wasserstein_1d(&p, &p).unwrap(), 0.0);
        prop_assert!(pq <= pr + rq + 1e-12);
        let max_gap = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if max_gap > 1e-9 {
            prop_assert!(pq > 0.0);
        }
    }

    #[test]
    fn codebook_rows_quantize_to_themselves(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..12)) {
        let mut distinct = rows.clone();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        prop_assume!(distinct.len() == rows.len());
        let cb = SkillCodebook::from_embeddings(Mat::from_rows(&rows), 0.9, 1e-5).unwrap();
        for (i, r) in rows.iter().enumerate() {
            prop_assert_eq!(cb.nearest(r), i);
        }
    }

    #[test]
    fn vq_loss_is_nonnegative_and_zero_only_on_equality(
        a in prop::collection::vec(-3.0f64..3.0, 12),
        b in prop::collection::vec(-3.0f64..3.0, 12),
    ) {
        let la = Mat::from_vec(4, 3, a.clone());
        let lb = Mat::from_vec(4, 3, b.clone());
        let l = vq_loss(&la, &lb);
        prop_assert!(l >= 0.0);
        prop_assert_eq!(vq_loss(&la, &la), 0.0);
        if a != b {
            prop_assert!(l > 0.0);
        }
    }

    #[test]
    fn ema_keeps_embeddings_equal_to_sums_over_counts(seed in any::<u64>(), decay in 0.0f64..0.999) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (5, 3);
        let init: Mat<f64> = Mat::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mut cb = SkillCodebook::from_embeddings(init, decay, 1e-5).unwrap();
        for _ in 0..20 {
            let m = rng.gen_range(1..30);
            let z = Mat::from_vec(m, d, (0..m * d).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let assign = cb.assign(&z);
            cb.ema_update(&z, &assign);
            prop_assert!(cb.ema_counts.iter().all(|&c| c >= 0.0));
            let counts = cb.smoothed_counts();
            for i in 0..n {
                for j in 0..d {
                    let want = cb.ema_sums.get(i, j) / counts[i].max(1e-12);
                    prop_assert!((cb.embeddings.get(i, j) - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn batches_never_cross_trajectories(
        lengths in prop::collection::vec(1usize..15, 1..6),
        k in 1usize..8,
        seed in any::<u64>(),
    ) {
        let ds = tagged_dataset(&lengths);
        let b = sample_batch(&ds, 16, k, seed).unwrap();
        let norm = ds.normalizer();
        for bi in 0..16 {
            let traj = b.trajectory_ids[bi];
            let start = b.start_offsets[bi];
            let mut prev = None;
            for ki in 0..k {
                let pos = bi * k + ki;
                let s = &b.states[pos * 2..pos * 2 + 2];
                if b.pad_mask[pos] {
                    let want = norm.normalize(&[traj as f32, (start + ki) as f32]);
                    prop_assert_eq!(s, &want[..]);
                    prop_assert_eq!(b.timesteps[pos], start + ki);
                    if let Some(p) = prev {
                        prop_assert_eq!(b.timesteps[pos], p + 1);
                    }
                    prev = Some(b.timesteps[pos]);
                } else {
                    prop_assert!(start + ki >= lengths[traj]);
                    prop_assert!(s.iter().all(|&v| v == 0.0));
                    prop_assert_eq!(b.actions[pos], 0.0);
                }
            }
        }
    }

    #[test]
    fn normalized_states_are_standardized(
        data in prop::collection::vec(prop::collection::vec((-50.0f32..50.0, -1.0f32..1.0), 1..20), 1..5),
    ) {
        let trajs: Vec<Trajectory> = data
            .iter()
            .enumerate()
            .map(|(i, steps)| {
                let states = steps.iter().flat_map(|&(a, b)| [a, b, 3.0]).collect();
                Trajectory::new(i as u64, 3, 1, states, vec![0.0; steps.len()], None).unwrap()
            })
            .collect();
        let ds = Dataset::new("p", trajs).unwrap();
        let all: Vec<f64> = (0..ds.len()).flat_map(|i| ds.normalized_states(i)).map(|v| v as f64).collect();
        let rows = all.len() / 3;
        for dim in 0..3 {
            let col: Vec<f64> = (0..rows).map(|r| all[r * 3 + dim]).collect();
            let mean = col.iter().sum::<f64>() / rows as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
            prop_assert!(mean.abs() < 1e-6, "dim {} mean {}", dim, mean);
            let raw_spread = col.iter().any(|&v| (v - col[0]).abs() > 1e-3);
            if dim < 2 && raw_spread {
                prop_assert!((var.sqrt() - 1.0).abs() < 1e-6, "dim {} std {}", dim, var.sqrt());
            }
        }
    }

    #[test]
    fn sdt_round_trip_is_bit_identical(
        lengths in prop::collection::vec(1usize..10, 1..5),
        with_rewards in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trajs = lengths
            .iter()
            .enumerate()
            .map(|(i, &len)| {
                let states = (0..len * 3).map(|_| rng.gen::<f32>()).collect();
                let actions = (0..len * 2).map(|_| rng.gen::<f32>() - 0.5).collect();
                let rewards = with_rewards.then(|| (0..len).map(|_| -rng.gen::<f32>()).collect());
                Trajectory::new(i as u64, 3, 2, states, actions, rewards).unwrap()
            })
            .collect();
        let ds = Dataset::new("rt", trajs).unwrap();
        let bytes = sdt::to_bytes(&ds);
        let back = sdt::from_bytes(&bytes, "rt").unwrap();
        prop_assert_eq!(back.trajectories(), ds.trajectories());
        prop_assert_eq!(sdt::to_bytes(&back), bytes);
    }
}

fn causal_config(k: usize) -> PolicyConfig {
    PolicyConfig {
        n_layers: 2,
        n_heads: 2,
        embed_dim: 8,
        context_len: k,
        dropout: 0.0,
        max_timestep: 64,
        num_skills: 4,
        state_dim: 3,
        action_dim: 2,
        action_low: vec![-1.0; 2],
        action_high: vec![1.0; 2],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn future_steps_never_change_earlier_actions(seed in any::<u64>(), k in 2usize..7, cut_frac in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = Policy::<f32>::new(causal_config(k), &mut rng).unwrap();
        let b = 2;
        let mut rand_mat = |cols: usize| Mat::from_vec(b * k, cols, (0..b * k * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
        let (h, z, s) = (rand_mat(4), rand_mat(8), rand_mat(3));
        let ts: Vec<usize> = (0..b * k).map(|p| 5 + p % k).collect();
        let mask = vec![true; b * k];
        let input = PolicyInput { batch_size: b, histograms: &h, skills: &z, states: &s, timesteps: &ts, pad_mask: &mask };
        let base = policy.forward(&input).unwrap();
        // Perturb every step after `t` in both batch rows.
        let t = ((k - 1) as f64 * cut_frac) as usize;
        let (mut h2, mut z2, mut s2, mut ts2) = (h.clone(), z.clone(), s.clone(), ts.clone());
        for bi in 0..b {
            for ki in t + 1..k {
                let pos = bi * k + ki;
                h2.row_mut(pos).iter_mut().for_each(|v| *v = 1.0 - *v);
                z2.row_mut(pos).iter_mut().for_each(|v| *v *= -3.0);
                s2.row_mut(pos).iter_mut().for_each(|v| *v += 2.0);
                ts2[pos] = 60;
            }
        }
        let moved = policy
            .forward(&PolicyInput { batch_size: b, histograms: &h2, skills: &z2, states: &s2, timesteps: &ts2, pad_mask: &mask })
            .unwrap();
        for bi in 0..b {
            for ki in 0..=t {
                let pos = bi * k + ki;
                prop_assert_eq!(base.row(pos), moved.row(pos));
            }
        }
    }
}
