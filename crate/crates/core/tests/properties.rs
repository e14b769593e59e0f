use opdlab::curriculum::b2f_prefix_len;
use opdlab::distill::ExecutedBy;
use opdlab::policy::kl_logit_gradient;
use opdlab::seed::stream;
use opdlab::{
    collect_teacher_trajectories, evaluate, forward_kl, rollout_b2f, rollout_f2b, rollout_opd, CategoricalDistribution,
    CurriculumSchedule, Env, EnvConfig, History, PolicyParams, TeacherConfig, TeacherPolicy,
};
use proptest::prelude::*;

fn setup(seed: u64) -> (Env, TeacherPolicy) {
    let env = Env::new(EnvConfig {
        seed,
        ..Default::default()
    })
    .unwrap();
    let teacher = TeacherPolicy::new(env.clone(), TeacherConfig::default()).unwrap();
    (env, teacher)
}

/// A table student that puts logit 10 on the correct action at every
/// on-path history and knows nothing elsewhere.
fn path_copying_student(env: &Env) -> PolicyParams {
    let mut params = PolicyParams::uniform(env.num_actions(), None);
    for task in 0..env.config().task_count {
        let (mut state, o0) = env.reset(task).unwrap();
        let mut history = History::new(o0.token_id);
        while !state.is_done() {
            let a = env.correct_action(&state);
            let mut logits = vec![0.0; env.num_actions()];
            logits[a.index()] = 10.0;
            params.set_logits(params.key_for(&history), logits);
            let r = env.step(&mut state, a).unwrap();
            history.push(a, r.observation.token_id);
        }
    }
    params
}

#[test]
fn path_copying_student_nearly_always_succeeds() {
    for seed in 0..5 {
        let (env, teacher) = setup(seed);
        let rec = evaluate(&path_copying_student(&env), &env, &teacher, 256, 0.4, seed);
        assert!(rec.success_rate >= 0.95, "seed {seed}: {}", rec.success_rate);
    }
}

#[test]
fn default_teacher_covers_every_task() {
    for seed in 0..5 {
        let (env, teacher) = setup(seed);
        let store = collect_teacher_trajectories(&env, &teacher, 10, 0.4, seed).unwrap();
        assert_eq!(store.len(), 32, "seed {seed} missing {:?}", store.missing);
        assert!(store.iter().all(|t| t.len <= env.horizon_cap()));
    }
}

#[test]
fn near_uniform_teacher_leaves_gaps() {
    let (env, _) = setup(0);
    let weak = env.make_teacher(50.0, 1.0).unwrap();
    let store = collect_teacher_trajectories(&env, &weak, 2, 1.0, 0).unwrap();
    assert!(!store.missing.is_empty());
    assert_eq!(store.len() + store.missing.len(), 32);
}

fn distribution(n: usize) -> impl Strategy<Value = CategoricalDistribution> {
    proptest::collection::vec(0.01f64..1.0, n).prop_map(|w| CategoricalDistribution::from_weights(w).unwrap())
}

proptest! {
    #[test]
    fn kl_is_non_negative_and_zero_on_self(p in distribution(6), q in distribution(6)) {
        prop_assert!(forward_kl(&p, &q).unwrap() >= 0.0);
        prop_assert!(forward_kl(&p, &p).unwrap() < 1e-12);
    }

    #[test]
    fn logit_gradient_sums_to_zero(p in distribution(5), z in proptest::collection::vec(-5.0f64..5.0, 5)) {
        let q = CategoricalDistribution::softmax(&z, 1.0);
        let s: f64 = q.probs().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        let g = kl_logit_gradient(&p, &q).unwrap();
        prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn f2b_never_exceeds_its_horizon(seed in 0u64..1000, task in 0usize..32, k in 1usize..14) {
        let (env, teacher) = setup(seed % 5);
        let student = PolicyParams::uniform(6, None);
        let t = rollout_f2b(&env, &student, &teacher, task, k, 1.0, &mut stream(seed, &[])).unwrap();
        prop_assert!(t.rounds <= k.min(env.horizon_cap()));
        prop_assert!(t.turns.iter().all(|r| r.executed_by == ExecutedBy::Student));
    }

    #[test]
    fn b2f_replays_exactly_the_prefix(seed in 0u64..1000, task in 0usize..32, k in 1usize..14) {
        let (env, teacher) = setup(seed % 5);
        let store = collect_teacher_trajectories(&env, &teacher, 10, 0.4, seed % 5).unwrap();
        let stored = store.get(task).unwrap();
        let student = PolicyParams::uniform(6, None);
        let t = rollout_b2f(&env, &store, &student, &teacher, task, k, 1.0, &mut stream(seed, &[])).unwrap();
        let prefix = b2f_prefix_len(stored.len, k);
        prop_assert_eq!(t.prefix_len(), prefix);
        for (turn, a) in t.turns.iter().zip(&stored.actions[..prefix]) {
            prop_assert_eq!(turn.executed_by, ExecutedBy::TeacherPrefix);
            prop_assert_eq!(turn.action, *a);
        }
        prop_assert!(t.turns[prefix..].iter().all(|r| r.executed_by == ExecutedBy::Student));
    }

    #[test]
    fn rollouts_are_seed_deterministic(seed in any::<u64>(), task in 0usize..32) {
        let (env, teacher) = setup(1);
        let student = PolicyParams::uniform(6, None);
        let a = rollout_opd(&env, &student, &teacher, task, 1.0, &mut stream(seed, &[])).unwrap();
        let b = rollout_opd(&env, &student, &teacher, task, 1.0, &mut stream(seed, &[])).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn horizon_is_monotone_and_bounded(k_start in 1usize..5, eta in 1usize..8, extra in 0usize..20, n in 0usize..500) {
        let s = CurriculumSchedule { k_start, eta, cap: k_start + extra, total_steps: 500 };
        prop_assert!(s.horizon_at(n) <= s.horizon_at(n + 1));
        prop_assert!(s.horizon_at(n) >= k_start && s.horizon_at(n) <= s.cap);
    }
}
