//! End-to-end invariants of the clipped, masked Latent-GRPO objective.

use latent_grpo::advantage::{advantage_table, AdvantageSwitches};
use latent_grpo::autodiff::Tape;
use latent_grpo::config::{RlConfig, Switch};
use latent_grpo::policy::{rollout, BoundPolicy, ModelConfig, PolicyParams, RolloutMode, Trajectory};
use latent_grpo::rng;
use latent_grpo::task::generate_task;
use latent_grpo::trainer::{latent_grpo_loss, trajectory_objective, Algorithm, RolloutGroup, Switches};

const G: usize = 4;

fn params() -> PolicyParams {
    PolicyParams::init(&ModelConfig { d_model: 8, ..ModelConfig::default() }).unwrap()
}

fn rl() -> RlConfig {
    RlConfig { group_size: G, kl_coeff: 0.0, l_max: 12, t_lat_max: 4, top_k: 3, ..RlConfig::default() }
}

fn trajectories(p: &PolicyParams, rl: &RlConfig, mode: RolloutMode, prompt: u64) -> (latent_grpo::task::TaskInstance, Vec<Trajectory>) {
    let task = generate_task(prompt, 2).unwrap();
    let settings = rl.rollout_settings();
    let trajs = (0..G as u64)
        .map(|m| rollout(p, &task.prompt_tokens, mode, &settings, &mut rng::stream(17, &[prompt, m])).unwrap())
        .collect();
    (task, trajs)
}

/// A group whose rewards are overridden, so advantages are non-trivial even
/// for an untrained policy.
fn group(p: &PolicyParams, rl: &RlConfig, sw: Switches, prompt: u64, rewards: &[f64]) -> RolloutGroup {
    let (task, trajs) = trajectories(p, rl, sw.rollout_mode, prompt);
    let mut g = RolloutGroup::build(task, trajs, sw.advantage, rl.l_max, p).unwrap();
    retable(&mut g, rewards, sw.advantage, rl.l_max);
    g
}

fn retable(g: &mut RolloutGroup, rewards: &[f64], sw: AdvantageSwitches, l_max: usize) {
    for (t, &r) in g.trajectories.iter_mut().zip(rewards) {
        t.reward = r;
    }
    g.outcome.rewards = rewards.to_vec();
    g.outcome.correct = rewards.iter().map(|&r| r > 0.5).collect();
    let t_max = g.outcome.lengths.iter().copied().max().unwrap();
    g.table = advantage_table(&g.outcome, l_max, t_max, sw);
}

#[test]
fn objective_identity_at_rollout_parameters() {
    let p = params();
    let rl = rl();
    let sw = Switches::resolve(Algorithm::LatentGrpo, &rl);
    let groups = vec![
        group(&p, &rl, sw, 1, &[1.0, 0.0, 0.0, 1.0]),
        group(&p, &rl, sw, 2, &[0.0, 1.0, 0.0, 0.0]),
    ];
    let out = latent_grpo_loss(&groups, &p, &rl).unwrap();
    let mut expect = 0.0;
    for g in &groups {
        for (t, row) in g.trajectories.iter().zip(&g.table.masked) {
            let l = t.len();
            expect += row[..l].iter().sum::<f64>() / l as f64;
        }
    }
    expect = -expect / (groups.len() * G) as f64;
    assert!((out.loss - expect).abs() < 1e-9, "{} vs {expect}", out.loss);
    assert!((out.stats.ratio_sum / out.stats.steps as f64 - 1.0).abs() < 1e-12);
    assert_eq!(out.stats.clipped, 0);
}

#[test]
fn clipped_steps_contribute_no_gradient() {
    let p = params();
    let rl = rl();
    let sw = Switches::resolve(Algorithm::LatentGrpo, &rl);
    let (_, trajs) = trajectories(&p, &rl, sw.rollout_mode, 3);
    let mut traj = trajs[0].clone();
    let last = traj.len() - 1;
    let mut adv = vec![0.0; traj.len()];

    // ratio e^1 with a positive advantage: the clipped branch is active
    adv[last] = 1.0;
    traj.step_logs[last] -= 1.0;
    let tape = Tape::new();
    let policy = BoundPolicy::bind(&p, &tape, true).unwrap();
    let reference = latent_grpo::policy::step_distributions(&p, &traj).unwrap();
    let (obj, stats) = trajectory_objective(&policy, &traj, &adv, &reference, &rl).unwrap();
    assert_eq!(stats.clipped, 1);
    let grads = policy.gradients(&obj.backward().unwrap());
    assert_eq!(grads.norm(), 0.0);

    // the same step inside the trust region does move the parameters
    let traj = trajs[0].clone();
    let tape = Tape::new();
    let policy = BoundPolicy::bind(&p, &tape, true).unwrap();
    let (obj, _) = trajectory_objective(&policy, &traj, &adv, &reference, &rl).unwrap();
    assert!(policy.gradients(&obj.backward().unwrap()).norm() > 0.0);

    // ratio e^-1 with a negative advantage: clipped from below
    let mut traj = trajs[0].clone();
    adv[last] = -1.0;
    traj.step_logs[last] += 1.0;
    let tape = Tape::new();
    let policy = BoundPolicy::bind(&p, &tape, true).unwrap();
    let (obj, _) = trajectory_objective(&policy, &traj, &adv, &reference, &rl).unwrap();
    assert_eq!(policy.gradients(&obj.backward().unwrap()).norm(), 0.0);
}

#[test]
fn deleting_invalid_trajectories_leaves_the_loss_unchanged() {
    let p = params();
    let rl = rl();
    let sw = Switches::resolve(Algorithm::LatentGrpo, &rl);
    let mut groups = vec![];
    for prompt in 0..3u64 {
        let mut g = group(&p, &rl, sw, 10 + prompt, &[1.0, 0.0, 1.0, 0.0]);
        // member 1 of every group hit the length limit
        g.trajectories[1].terminated = false;
        g.outcome.terminated[1] = false;
        let rewards = g.outcome.rewards.clone();
        retable(&mut g, &rewards, sw.advantage, rl.l_max);
        assert!(g.table.masked[1].iter().all(|&a| a == 0.0));
        groups.push(g);
    }
    let full = latent_grpo_loss(&groups, &p, &rl).unwrap();
    let pruned: Vec<RolloutGroup> = groups.iter().map(|g| g.without(&[1])).collect();
    let kept = latent_grpo_loss(&pruned, &p, &rl).unwrap();
    assert!((full.loss - kept.loss).abs() < 1e-12, "{} vs {}", full.loss, kept.loss);
    for (a, b) in full.grads.0.iter().flatten().zip(kept.grads.0.iter().flatten()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn latent_with_switches_off_reproduces_soft_grpo() {
    let p = params();
    let base = RlConfig { kl_coeff: 0.01, ..rl() };
    let off = RlConfig {
        one_sided: Switch::Off,
        invalid_masking: Switch::Off,
        first_token_selection: Switch::Off,
        ..base.clone()
    };
    let soft = Switches::resolve(Algorithm::SoftGrpo, &base);
    let latent = Switches::resolve(Algorithm::LatentGrpo, &off);
    assert_eq!(soft, latent);
    let rewards = [1.0, 1.0, 0.0, 1.0];
    let a: Vec<RolloutGroup> = (0..2).map(|i| group(&p, &base, soft, 20 + i, &rewards)).collect();
    let b: Vec<RolloutGroup> = (0..2).map(|i| group(&p, &off, latent, 20 + i, &rewards)).collect();
    assert_eq!(a, b);
    // evaluate away from θ_old so clipping and KL are exercised
    let mut q = p.clone();
    for t in &mut q.tensors {
        for (i, x) in t.data.iter_mut().enumerate() {
            *x += 0.05 * ((i % 7) as f64 - 3.0);
        }
    }
    let la = latent_grpo_loss(&a, &q, &base).unwrap();
    let lb = latent_grpo_loss(&b, &q, &off).unwrap();
    assert_eq!(la.loss.to_bits(), lb.loss.to_bits());
    assert_eq!(la.grads, lb.grads);
}
