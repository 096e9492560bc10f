use skill_dt::env::{generate_dataset, Env, GeneratorConfig, LineEnv, MazeLayout, PointMazeEnv};
use skill_dt::error::Error;
use skill_dt::evaluator::{evaluate_all_skills, rollout_commanded, rollout_skill};
use skill_dt::relabel::generate_histograms;
use skill_dt::smm::{diversity_table, reconstruct, trajectory_states};
use skill_dt::trainer::{ActionBounds, TrainConfig, TrainState};
use skill_dt::trajectory::Dataset;

fn setup() -> (PointMazeEnv, Dataset, TrainState) {
    let env = PointMazeEnv::new(MazeLayout::UCorridor);
    let ds = generate_dataset(&env, &GeneratorConfig { num_trajectories: 16, ..GeneratorConfig::default() }).unwrap();
    let cfg = TrainConfig { num_skills: 4, ..TrainConfig::toy() };
    let spec = env.spec();
    let bounds = ActionBounds { low: spec.action_low.clone(), high: spec.action_high.clone() };
    let st = TrainState::init(&cfg, &ds, &bounds).unwrap();
    (env, ds, st)
}

#[test]
fn rollouts_are_reproducible() {
    let (env, _, st) = setup();
    let a = rollout_skill(&st.agent(), &env, 2, 30, 7).unwrap();
    let b = rollout_skill(&st.agent(), &env, 2, 30, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.actions.len(), a.steps);
    assert_eq!(a.states.len(), a.steps + 1);
    assert!(a.observed_indices.iter().all(|&i| i < 4));
    let total: f64 = a.rewards.iter().sum();
    assert_eq!(total, a.total_reward);
}

#[test]
fn future_buffer_holds_only_the_command() {
    let (env, _, st) = setup();
    let steps = 25;
    let mut checked = 0;
    let rec = rollout_commanded(&st.agent(), &env, vec![3; steps], 1, &mut |t, buf| {
        assert!(buf[t + 1..].iter().all(|&i| i == 3), "step {t}");
        checked += 1;
    })
    .unwrap();
    assert_eq!(checked, rec.steps);
    // Before any overwrite the whole horizon is the command.
    let h = generate_histograms::<f64>(&vec![3; steps], 4).unwrap();
    assert_eq!(h.row(0), &[0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn observed_indices_overwrite_the_buffer() {
    let (env, _, st) = setup();
    let mut last = Vec::new();
    let rec = rollout_commanded(&st.agent(), &env, vec![0; 12], 4, &mut |_, buf| last = buf.to_vec()).unwrap();
    assert_eq!(&last[..rec.steps], &rec.observed_indices[..]);
}

#[test]
fn episodes_shorter_than_the_context_work() {
    let (env, _, st) = setup();
    let k = st.policy.config.context_len;
    let rec = rollout_skill(&st.agent(), &env, 0, k - 3, 0).unwrap();
    assert!(rec.steps <= k - 3);
    assert!(matches!(rollout_skill(&st.agent(), &env, 0, 0, 0), Err(Error::Argument(_))));
    assert!(matches!(rollout_skill(&st.agent(), &env, 9, 5, 0), Err(Error::Argument(_))));
}

#[test]
fn mismatched_environment_is_a_config_error() {
    let (_, _, st) = setup();
    assert!(matches!(rollout_skill(&st.agent(), &LineEnv::default(), 0, 5, 0), Err(Error::Config(_))));
}

#[test]
fn evaluation_table_shape_and_best() {
    let (env, _, st) = setup();
    let ev = evaluate_all_skills(&st.agent(), &env, &[0, 1, 2], 20).unwrap();
    assert_eq!(ev.skills.len(), 4);
    assert_eq!(ev.records.len(), 12);
    let best = ev.skills.iter().map(|s| s.mean_return).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(ev.best_return, best);
    assert_eq!(ev.skills[ev.best_skill].mean_return, best);
    for (i, r) in ev.records.iter().enumerate() {
        assert_eq!(r.skill_id, Some(i / 3));
        assert_eq!(*r, rollout_skill(&st.agent(), &env, i / 3, 20, [0, 1, 2][i % 3]).unwrap());
    }
}

#[test]
fn reconstruction_reports_and_errors() {
    let (env, ds, st) = setup();
    let target = trajectory_states(&ds.trajectories()[0]);
    let rep = reconstruct(&st.agent(), &env, &target, 40, 0).unwrap();
    assert!((rep.target_histogram.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!((rep.reconstructed_histogram.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!(rep.endpoint_error >= 0.0 && (0.0..=1.0).contains(&rep.histogram_distance));
    assert_eq!(rep.target_indices.len(), target.len());
    let err = reconstruct(&st.agent(), &env, &target[..1], 40, 0);
    assert!(matches!(err, Err(Error::Argument(_))));
}

#[test]
fn diversity_on_two_skills_is_a_single_pair() {
    let env = PointMazeEnv::new(MazeLayout::UCorridor);
    let ds = generate_dataset(&env, &GeneratorConfig { num_trajectories: 8, ..GeneratorConfig::default() }).unwrap();
    let cfg = TrainConfig { num_skills: 2, ..TrainConfig::toy() };
    let st = TrainState::init(&cfg, &ds, &ActionBounds { low: vec![-1.0; 2], high: vec![1.0; 2] }).unwrap();
    let t = diversity_table(&st.agent(), &env, &[0, 1], 15).unwrap();
    assert_eq!(t.min, t.max);
    assert_eq!(t.min, t.avg);
    assert_eq!(t.histograms.len(), 2);
}
