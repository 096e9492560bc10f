//! Acceptance suite: one `[PASS]`/`[FAIL]` line per criterion. Tolerances and
//! time limits are the constants below.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skill_dt::env::{generate_dataset, winding_number, Env, GeneratorConfig, MazeLayout, PointMazeEnv, LOOP_CENTER};
use skill_dt::evaluator::{evaluate_all_skills, mean_std, rollout_skill, SkillEvaluation};
use skill_dt::nn::ParamSet;
use skill_dt::policy::{Policy, PolicyConfig, PolicyInput};
use skill_dt::quantizer::{Quantizer, SkillCodebook, SkillEncoder};
use skill_dt::relabel::generate_histograms;
use skill_dt::smm::{diversity_table, reconstruct, trajectory_states, wasserstein_1d};
use skill_dt::tensor::Mat;
use skill_dt::trainer::{fit, loss_and_grads, ActionBounds, BatchTensors, SkillPath, TrainConfig, TrainState};
use skill_dt::trajectory::Dataset;

const HISTOGRAM_TOL: f64 = 1e-6;
const HISTOGRAM_LIMIT: Duration = Duration::from_secs(5);
const QUANTIZER_LIMIT: Duration = Duration::from_secs(5);
const GRAD_EPS: f64 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_LIMIT: Duration = Duration::from_secs(60);
const CAUSALITY_LIMIT: Duration = Duration::from_secs(30);
const EMA_TOL: f64 = 1e-6;
const WASSERSTEIN_TOL: f64 = 1e-8;
const METRIC_SLACK: f64 = 1e-12;
const TRAIN_LIMIT: Duration = Duration::from_secs(15 * 60);
const MIN_DISTINCT_REGIONS: usize = 3;
/// Best-skill return must reach 90% of the dataset's best. Returns are
/// negative distances, so "90%" means within 10% of its magnitude.
const RETURN_FRACTION: f64 = 0.9;
const SEEDS: [u64; 3] = [0, 1, 2];
const EVAL_SEEDS: [u64; 4] = [0, 1, 2, 3];
const SKILL_COUNTS: [usize; 3] = [2, 4, 8];

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, name: &str, pass: bool, detail: String, elapsed: Duration) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {name}: {detail} ({:.1}s)", elapsed.as_secs_f64());
        if !pass {
            self.failures += 1;
        }
    }
}

fn histogram_oracle(r: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let len = rng.gen_range(1..=50);
        let n = rng.gen_range(1..=64);
        let idx: Vec<usize> = (0..len).map(|_| rng.gen_range(0..n)).collect();
        let h = generate_histograms::<f32>(&idx, n).unwrap();
        // Forward-built suffix counts.
        let mut counts = vec![vec![0usize; n]; len];
        for t in 0..len {
            for &i in &idx[t..] {
                counts[t][i] += 1;
            }
        }
        for t in 0..len {
            for k in 0..n {
                let want = counts[t][k] as f64 / (len - t) as f64;
                worst = worst.max((h.get(t, k) as f64 - want).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    r.line(
        "histogram oracle",
        worst <= HISTOGRAM_TOL && elapsed < HISTOGRAM_LIMIT,
        format!("1000 sequences, max error {worst:.2e} (tol {HISTOGRAM_TOL:.0e})"),
        elapsed,
    );
}

fn quantizer_oracle(r: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, d) = (16, 4);
    let mut mismatches = 0;
    let mut ties = 0;
    for half in 0..2 {
        // The first half lives on an integer grid so exact ties occur.
        let sample = |rng: &mut ChaCha8Rng| -> f32 {
            if half == 0 {
                rng.gen_range(-2..=2) as f32
            } else {
                rng.gen_range(-1.0..1.0)
            }
        };
        let codes = Mat::from_vec(n, d, (0..n * d).map(|_| sample(&mut rng)).collect());
        let cb = SkillCodebook::from_embeddings(codes.clone(), 0.99, 1e-5).unwrap();
        let m = 500;
        let latents = Mat::from_vec(m, d, (0..m * d).map(|_| sample(&mut rng)).collect());
        let got = cb.quantize(&latents);
        for (row, a) in got.iter().enumerate() {
            let dists: Vec<f32> = (0..n)
                .map(|i| (0..d).map(|j| (latents.get(row, j) - codes.get(i, j)).powi(2)).sum())
                .collect();
            let mut best = 0;
            for i in 1..n {
                if dists[i] < dists[best] {
                    best = i;
                }
            }
            ties += usize::from(dists.iter().filter(|&&v| v == dists[best]).count() > 1);
            mismatches += usize::from(a.index != best);
        }
    }
    let elapsed = start.elapsed();
    r.line(
        "quantizer oracle",
        mismatches == 0 && elapsed < QUANTIZER_LIMIT,
        format!("1000 latents, N=16, {mismatches} mismatches, {ties} with ties"),
        elapsed,
    );
}

fn randomize<P: ParamSet<f64>>(p: &mut P, rng: &mut ChaCha8Rng) {
    for m in p.params_mut() {
        for v in m.as_mut_slice() {
            *v = rng.gen_range(-0.7..0.7);
        }
    }
}

fn gradient_check(r: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, k, b, s_dim, a_dim) = (3, 3, 2, 2, 2);
    let cfg = PolicyConfig {
        n_layers: 1,
        n_heads: 1,
        embed_dim: 4,
        context_len: k,
        dropout: 0.0,
        max_timestep: 8,
        num_skills: n,
        state_dim: s_dim,
        action_dim: a_dim,
        action_low: vec![-1.0, -2.0],
        action_high: vec![1.0, 0.5],
    };
    let mut policy = Policy::<f64>::new(cfg, &mut rng).unwrap();
    randomize(&mut policy.params, &mut rng);
    let mut encoder = SkillEncoder::<f64>::init(s_dim, &[5], 4, &mut rng);
    randomize(&mut encoder, &mut rng);
    let quantizer = Quantizer {
        encoder,
        codebook: SkillCodebook::from_embeddings(Mat::randn(n, 4, 1.0, &mut rng), 0.99, 1e-5).unwrap(),
        frozen: false,
    };
    let rows = b * k;
    let mut pad_mask = vec![true; rows];
    pad_mask[rows - 1] = false;
    let mut histograms = Mat::zeros(rows, n);
    for i in 0..rows {
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s: f64 = w.iter().sum();
        for (j, v) in w.iter().enumerate() {
            histograms.set(i, j, v / s);
        }
    }
    let batch = BatchTensors {
        batch_size: b,
        states: Mat::randn(rows, s_dim, 1.0, &mut rng),
        actions: Mat::randn(rows, a_dim, 0.5, &mut rng),
        histograms,
        timesteps: vec![2, 3, 4, 0, 1, 2],
        pad_mask: pad_mask.clone(),
    };
    let beta = 0.25;
    // Freeze the quantizer's discrete choice at the evaluation point.
    let real: Vec<usize> = (0..rows).filter(|&i| pad_mask[i]).collect();
    let latents = quantizer.encoder.encode(&batch.states.gather_rows(&real)).unwrap();
    let selected = quantizer.codebook.lookup(&quantizer.codebook.assign(&latents));
    let mut offset = selected.clone();
    let mut neg = latents.clone();
    neg.scale(-1.0);
    offset.add_assign(&neg);
    let path = SkillPath::Linearized { offset: &offset, selected: &selected };
    let out = loss_and_grads(&policy, &quantizer, &batch, beta, path).unwrap();
    let quantized = loss_and_grads(&policy, &quantizer, &batch, beta, SkillPath::Quantized).unwrap();
    // The surrogate recomputes `latents + offset`, so agreement is up to rounding.
    let close = |a: Vec<(String, &Mat<f64>)>, b: Vec<(String, &Mat<f64>)>| {
        a.iter().zip(&b).all(|((_, x), (_, y))| {
            x.as_slice().iter().zip(y.as_slice()).all(|(u, v)| (u - v).abs() <= 1e-10 * (1.0 + u.abs()))
        })
    };
    let same_as_quantized = (out.loss - quantized.loss).abs() < 1e-12
        && close(out.policy_grads.named_params(), quantized.policy_grads.named_params())
        && close(out.encoder_grads.named_params(), quantized.encoder_grads.named_params());

    let loss_at = |p: &Policy<f64>, q: &Quantizer<f64>| loss_and_grads(p, q, &batch, beta, path).unwrap().loss;
    let rel = |num: f64, an: f64| (num - an).abs() / num.abs().max(an.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    let mut checked = 0;
    let names: Vec<String> = policy.params.named_params().into_iter().map(|(s, _)| s).collect();
    let analytic: Vec<Vec<f64>> = out.policy_grads.named_params().iter().map(|(_, m)| m.as_slice().to_vec()).collect();
    for (pi, g) in analytic.iter().enumerate() {
        for e in 0..g.len() {
            let mut plus = policy.clone();
            plus.params.params_mut()[pi].as_mut_slice()[e] += GRAD_EPS;
            let mut minus = policy.clone();
            minus.params.params_mut()[pi].as_mut_slice()[e] -= GRAD_EPS;
            let num = (loss_at(&plus, &quantizer) - loss_at(&minus, &quantizer)) / (2.0 * GRAD_EPS);
            let err = rel(num, g[e]);
            checked += 1;
            if err > worst {
                worst = err;
                worst_name = names[pi].clone();
            }
        }
    }
    let enc_names: Vec<String> = quantizer.encoder.named_params().into_iter().map(|(s, _)| s).collect();
    let enc_analytic: Vec<Vec<f64>> = out.encoder_grads.named_params().iter().map(|(_, m)| m.as_slice().to_vec()).collect();
    for (pi, g) in enc_analytic.iter().enumerate() {
        for e in 0..g.len() {
            let mut plus = quantizer.clone();
            plus.encoder.params_mut()[pi].as_mut_slice()[e] += GRAD_EPS;
            let mut minus = quantizer.clone();
            minus.encoder.params_mut()[pi].as_mut_slice()[e] -= GRAD_EPS;
            let num = (loss_at(&policy, &plus) - loss_at(&policy, &minus)) / (2.0 * GRAD_EPS);
            let err = rel(num, g[e]);
            checked += 1;
            if err > worst {
                worst = err;
                worst_name = format!("encoder.{}", enc_names[pi]);
            }
        }
    }
    let elapsed = start.elapsed();
    r.line(
        "gradient check",
        worst < GRAD_REL_TOL && same_as_quantized && elapsed < GRAD_LIMIT,
        format!("{checked} parameters, max relative error {worst:.2e} at {worst_name}, straight-through path agrees: {same_as_quantized}"),
        elapsed,
    );
}

fn causality(r: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let k = 8;
    let cfg = PolicyConfig {
        n_layers: 2,
        n_heads: 2,
        embed_dim: 16,
        context_len: k,
        dropout: 0.0,
        max_timestep: 64,
        num_skills: 5,
        state_dim: 3,
        action_dim: 2,
        action_low: vec![-1.0; 2],
        action_high: vec![1.0; 2],
    };
    let policy = Policy::<f32>::new(cfg, &mut rng).unwrap();
    let mut violations = 0;
    for _ in 0..100 {
        let mut m = |cols: usize| Mat::from_vec(k, cols, (0..k * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
        let (h, z, s) = (m(5), m(16), m(3));
        let ts: Vec<usize> = (10..10 + k).collect();
        let mask = vec![true; k];
        let base = policy
            .forward(&PolicyInput { batch_size: 1, histograms: &h, skills: &z, states: &s, timesteps: &ts, pad_mask: &mask })
            .unwrap();
        let t = rng.gen_range(0..k - 1);
        let later = rng.gen_range(t + 1..k);
        let (mut h2, mut z2, mut s2, mut ts2) = (h.clone(), z.clone(), s.clone(), ts.clone());
        h2.row_mut(later).iter_mut().for_each(|v| *v += 0.5);
        z2.row_mut(later).iter_mut().for_each(|v| *v = -*v);
        s2.row_mut(later).iter_mut().for_each(|v| *v *= 3.0);
        ts2[later] = 63;
        let moved = policy
            .forward(&PolicyInput { batch_size: 1, histograms: &h2, skills: &z2, states: &s2, timesteps: &ts2, pad_mask: &mask })
            .unwrap();
        violations += (0..=t).filter(|&i| base.row(i) != moved.row(i)).count();
    }
    let elapsed = start.elapsed();
    r.line(
        "causality",
        violations == 0 && elapsed < CAUSALITY_LIMIT,
        format!("100 random inputs, {violations} earlier actions changed"),
        elapsed,
    );
}

fn ema_invariant(r: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, d) = (8, 6);
    let mut cb = SkillCodebook::<f32>::from_embeddings(Mat::randn(n, d, 1.0, &mut rng), 0.99, 1e-5).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let m = rng.gen_range(1..64);
        let z = Mat::<f32>::randn(m, d, 1.0, &mut rng);
        let idx = cb.assign(&z);
        cb.ema_update(&z, &idx);
        let counts = cb.smoothed_counts();
        for i in 0..n {
            for j in 0..d {
                let want = cb.ema_sums.get(i, j) as f64 / (counts[i] as f64).max(1e-12);
                worst = worst.max((cb.embeddings.get(i, j) as f64 - want).abs());
            }
        }
    }
    // Decay-free limit: one batch, every latent in code 2. Laplace smoothing
    // shifts the result by a relative (N - 1) eps / M, below 1e-6 at M = 256.
    let m = 256;
    let mut fresh = SkillCodebook::<f64>::from_embeddings(Mat::randn(n, d, 1.0, &mut rng), 0.0, 1e-5).unwrap();
    let z = Mat::<f64>::randn(m, d, 1.0, &mut rng);
    fresh.ema_update(&z, &vec![2; m]);
    let mut mean_err: f64 = 0.0;
    for j in 0..d {
        let mean = (0..m).map(|i| z.get(i, j)).sum::<f64>() / m as f64;
        mean_err = mean_err.max((fresh.embeddings.get(2, j) - mean).abs());
    }
    let elapsed = start.elapsed();
    r.line(
        "EMA invariant",
        worst < EMA_TOL && mean_err < EMA_TOL,
        format!("1000 updates, max |e - sums/counts| {worst:.2e}; decay-free batch mean error {mean_err:.2e}"),
        elapsed,
    );
}

/// Exact 1D transport by the north-west corner rule, which is optimal for a
/// convex ground cost on the line.
fn transport_on_line(p: &[f64], q: &[f64]) -> f64 {
    let n = p.len();
    let (mut a, mut b) = (p.to_vec(), q.to_vec());
    let (mut i, mut j, mut cost) = (0, 0, 0.0);
    while i < n && j < n {
        let moved = a[i].min(b[j]);
        cost += moved * (i as f64 - j as f64).abs() / (n - 1) as f64;
        a[i] -= moved;
        b[j] -= moved;
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    cost
}

fn random_histogram(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut h: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.25) { 0.0 } else { rng.gen_range(0.0..1.0) }).collect();
    if h.iter().all(|&v| v == 0.0) {
        h[0] = 1.0;
    }
    let s: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= s);
    h
}

fn wasserstein_oracle(r: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = rng.gen_range(2..=16);
        let (p, q) = (random_histogram(n, &mut rng), random_histogram(n, &mut rng));
        worst = worst.max((wasserstein_1d(&p, &q).unwrap() - transport_on_line(&p, &q)).abs());
    }
    let mut axiom_failures = 0;
    for _ in 0..500 {
        let n = rng.gen_range(2..=16);
        let (p, q, s) = (random_histogram(n, &mut rng), random_histogram(n, &mut rng), random_histogram(n, &mut rng));
        let w = |a: &[f64], b: &[f64]| wasserstein_1d(a, b).unwrap();
        let ok = w(&p, &p) == 0.0
            && (w(&p, &q) - w(&q, &p)).abs() <= METRIC_SLACK
            && w(&p, &q) <= w(&p, &s) + w(&s, &q) + METRIC_SLACK
            && (p == q || w(&p, &q) > 0.0)
            && w(&p, &q) <= 1.0 + METRIC_SLACK;
        axiom_failures += usize::from(!ok);
    }
    let elapsed = start.elapsed();
    r.line(
        "Wasserstein oracle",
        worst < WASSERSTEIN_TOL && axiom_failures == 0,
        format!("500 pairs, max error {worst:.2e}; metric axioms failed on {axiom_failures} of 500 triples"),
        elapsed,
    );
}

fn maze() -> PointMazeEnv {
    PointMazeEnv::new(MazeLayout::UCorridor)
}

fn bounds(env: &dyn Env) -> ActionBounds {
    ActionBounds { low: env.spec().action_low.clone(), high: env.spec().action_high.clone() }
}

struct Trained {
    state: TrainState,
    eval: SkillEvaluation,
    train_time: Duration,
}

fn train(ds: &Dataset, num_skills: usize, seed: u64) -> Trained {
    let env = maze();
    let cfg = TrainConfig { num_skills, seed, iterations: 200, ..TrainConfig::toy() };
    let start = Instant::now();
    let state = fit(&cfg, ds, &bounds(&env)).unwrap();
    let train_time = start.elapsed();
    let eval = evaluate_all_skills(&state.agent(), &env, &EVAL_SEEDS, env.spec().max_episode_steps).unwrap();
    Trained { state, eval, train_time }
}

/// Goal regions reached by skills that end in the same region on every
/// evaluation episode.
fn consistent_regions(eval: &SkillEvaluation) -> BTreeSet<usize> {
    eval.records
        .chunks(EVAL_SEEDS.len())
        .filter_map(|recs| {
            let first = recs[0].final_region?;
            recs.iter().all(|r| r.final_region == Some(first)).then_some(first)
        })
        .collect()
}

fn main() {
    let mut r = Report { failures: 0 };
    histogram_oracle(&mut r);
    quantizer_oracle(&mut r);
    gradient_check(&mut r);
    causality(&mut r);
    ema_invariant(&mut r);
    wasserstein_oracle(&mut r);

    let env = maze();
    let steps = env.spec().max_episode_steps;
    let ds = generate_dataset(&env, &GeneratorConfig::default()).unwrap();
    let dataset_best = ds.best_return().unwrap();
    let return_bar = dataset_best - (1.0 - RETURN_FRACTION) * dataset_best.abs();

    let start = Instant::now();
    let main_runs: Vec<Trained> = SEEDS.iter().map(|&s| train(&ds, 8, s)).collect();
    let slowest = main_runs.iter().map(|t| t.train_time).max().unwrap();
    let regions: Vec<usize> = main_runs.iter().map(|t| consistent_regions(&t.eval).len()).collect();
    let bests: Vec<f64> = main_runs.iter().map(|t| t.eval.best_return).collect();
    let mut trained_div = Vec::new();
    let mut untrained_div = Vec::new();
    for (t, &seed) in main_runs.iter().zip(&SEEDS) {
        trained_div.push(diversity_table(&t.state.agent(), &env, &EVAL_SEEDS, steps).unwrap().avg);
        let cfg = TrainConfig { seed, iterations: 0, ..TrainConfig::toy() };
        let fresh = TrainState::init(&cfg, &ds, &bounds(&env)).unwrap();
        untrained_div.push(diversity_table(&fresh.agent(), &env, &EVAL_SEEDS, steps).unwrap().avg);
    }
    let (trained_avg, _) = mean_std(&trained_div);
    let (untrained_avg, _) = mean_std(&untrained_div);
    let pass_a = regions.iter().all(|&c| c >= MIN_DISTINCT_REGIONS);
    let pass_b = bests.iter().all(|&b| b >= return_bar);
    let pass_c = trained_avg > untrained_avg;
    r.line(
        "toy skill discovery",
        pass_a && pass_b && pass_c && slowest < TRAIN_LIMIT,
        format!(
            "(a) distinct goal regions per seed {regions:?} (need >= {MIN_DISTINCT_REGIONS}); \
             (b) best-skill returns {:?} vs bar {return_bar:.2} (dataset best {dataset_best:.2}); \
             (c) diversity {trained_avg:.3} trained vs {untrained_avg:.3} untrained; slowest run {:.0}s",
            bests.iter().map(|b| format!("{b:.2}")).collect::<Vec<_>>(),
            slowest.as_secs_f64()
        ),
        start.elapsed(),
    );

    let start = Instant::now();
    let goal_radius = env.goal_radius;
    let mut self_errors = Vec::new();
    for t in &main_runs {
        let target = rollout_skill(&t.state.agent(), &env, t.eval.best_skill, steps, 100).unwrap();
        let rep = reconstruct(&t.state.agent(), &env, &target.states, steps, 101).unwrap();
        self_errors.push(rep.endpoint_error);
    }
    let self_ok = self_errors.iter().filter(|&&e| e < goal_radius).count();
    let ds_loop = generate_dataset(&env, &GeneratorConfig { modes: 5, ..GeneratorConfig::default() }).unwrap();
    let loop_target = trajectory_states(ds_loop.trajectories().iter().find(|t| t.mode == Some(4)).unwrap());
    let as_path = |s: &[Vec<f64>]| s.iter().map(|p| [p[0], p[1]]).collect::<Vec<_>>();
    let target_winding = winding_number(&as_path(&loop_target), LOOP_CENTER);
    let mut windings = Vec::new();
    for &seed in &SEEDS {
        let cfg = TrainConfig { seed, iterations: 200, ..TrainConfig::toy() };
        let st = fit(&cfg, &ds_loop, &bounds(&env)).unwrap();
        let rep = reconstruct(&st.agent(), &env, &loop_target, loop_target.len(), 0).unwrap();
        windings.push(winding_number(&as_path(&rep.reconstruction.states), LOOP_CENTER));
    }
    let loop_ok = windings.iter().filter(|&&w| w == target_winding).count();
    r.line(
        "toy SMM reconstruction",
        self_ok >= 2 && loop_ok >= 1,
        format!(
            "self-reconstruction endpoint errors {:?} (radius {goal_radius}, {self_ok} of 3 below); \
             loop windings {windings:?} vs target {target_winding} ({loop_ok} of 3 match)",
            self_errors.iter().map(|e| format!("{e:.3}")).collect::<Vec<_>>()
        ),
        start.elapsed(),
    );

    let start = Instant::now();
    let mut sweep = Vec::new();
    for &n in &SKILL_COUNTS {
        let bests: Vec<f64> = if n == 8 {
            main_runs.iter().map(|t| t.eval.best_return).collect()
        } else {
            SEEDS.iter().map(|&s| train(&ds, n, s).eval.best_return).collect()
        };
        sweep.push(mean_std(&bests));
    }
    let monotone = sweep.windows(2).all(|w| w[1].0 >= w[0].0 - w[0].1.max(w[1].1));
    r.line(
        "skill-count ablation",
        monotone,
        format!(
            "mean (std) best return for N = 2, 4, 8: {}",
            sweep.iter().map(|(m, s)| format!("{m:.2} ({s:.2})")).collect::<Vec<_>>().join(", ")
        ),
        start.elapsed(),
    );

    let start = Instant::now();
    let again = train(&ds, 8, SEEDS[0]);
    let same_losses = again.state.losses == main_runs[0].state.losses;
    let same_records = again.eval.records == main_runs[0].eval.records;
    r.line(
        "determinism",
        same_losses && same_records,
        format!(
            "retrained seed {}: {} loss records identical {same_losses}, {} rollout records identical {same_records}",
            SEEDS[0],
            again.state.losses.len(),
            again.eval.records.len()
        ),
        start.elapsed(),
    );

    if r.failures > 0 {
        println!("{} criteria failed", r.failures);
        std::process::exit(1);
    }
}
