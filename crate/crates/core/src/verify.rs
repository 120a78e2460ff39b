//! Self-check suite behind `toolrl verify`: gradient checks, advantage and
//! clip properties, sandbox replay and log round trips. Faults can be
//! injected to confirm the checks catch them.

use crate::coldstart::{sft_examples, sft_loss, sft_loss_and_grad, teacher_generate, SftExample, TeacherStyle};
use crate::env::{generate_task, mix_seed, DifficultyProfile, EnvConfig, Task};
use crate::grpo::{clipped_term, compute_group_advantages, surrogate_objective, AdvantageNorm, Group, RewardKind};
use crate::policy::{
    decision_logprobs, grad_decision_logprob, nucleus, Decision, Featurizer, PolicyConfig, PolicyParams, TokenDistribution,
};
use crate::rollout::{rollout, SamplingConfig};
use crate::token::{Mask, Token, VOCAB_SIZE};
use crate::traj::{deserialize, serialize, validate};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type AdvantageFn = fn(&[f64], AdvantageNorm) -> Vec<f64>;

/// Deliberate defects for mutation testing of the suite itself.
#[derive(Clone, Copy)]
pub struct Faults {
    pub eps_low: f64,
    pub eps_high: f64,
    pub advantages: AdvantageFn,
}

impl Default for Faults {
    fn default() -> Self {
        Faults { eps_low: 0.20, eps_high: 0.28, advantages: compute_group_advantages }
    }
}

#[derive(Debug, Clone)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &'static str, r: Result<String, String>) -> PropertyResult {
    match r {
        Ok(detail) => PropertyResult { name, passed: true, detail },
        Err(detail) => PropertyResult { name, passed: false, detail },
    }
}

/// Largest relative error `|a - b| / max(|a|, |b|)` between `grad` and
/// central differences of `f`; differences below `abs_floor` count as exact.
pub fn max_fd_error(theta: &mut [f64], grad: &[f64], h: f64, abs_floor: f64, mut f: impl FnMut(&[f64]) -> f64) -> (f64, usize) {
    let mut worst = (0.0, 0);
    for i in 0..theta.len() {
        let x = theta[i];
        theta[i] = x + h;
        let up = f(theta);
        theta[i] = x - h;
        let down = f(theta);
        theta[i] = x;
        let fd = (up - down) / (2.0 * h);
        let diff = (fd - grad[i]).abs();
        let err = if diff <= abs_floor { 0.0 } else { diff / fd.abs().max(grad[i].abs()).max(abs_floor) };
        if err > worst.0 {
            worst = (err, i);
        }
    }
    worst
}

fn small_policy(seed: u64, scale: f64) -> PolicyParams {
    let mut p = PolicyParams::init(&PolicyConfig { context_window: 1, hidden_units: 0 }, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    p.theta.iter_mut().for_each(|x| *x = rng.random_range(-scale..scale));
    p
}

fn sample_groups(params: &PolicyParams, fz: &Featurizer, n_groups: usize, g: usize, seed: u64, faults: &Faults) -> Vec<Group> {
    let env = EnvConfig::default();
    (0..n_groups)
        .map(|k| {
            let task = generate_task(seed, 2 + k, &DifficultyProfile::default()).expect("valid task");
            let outs = (0..g)
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, k as u64, i as u64]));
                    let r = rollout(params, fz, &task, env, SamplingConfig::EXACT, &mut rng).expect("rollout");
                    (r.outcome, r.decisions, r.entropies)
                })
                .collect();
            let mut grp = Group::new(task, outs, RewardKind::Outcome, AdvantageNorm::MeanStd);
            let rewards = grp.rewards();
            // give every group signal so the check exercises the clip
            let adv = if rewards.iter().all(|&r| r == rewards[0]) {
                (0..g).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect()
            } else {
                (faults.advantages)(&rewards, AdvantageNorm::MeanStd)
            };
            for (s, a) in grp.samples.iter_mut().zip(adv) {
                s.advantage = a;
            }
            grp
        })
        .collect()
}

fn check_seq_grad() -> Result<String, String> {
    let fz = Featurizer::new(1);
    let mut p = small_policy(11, 0.7);
    let task = generate_task(7, 5, &DifficultyProfile::default()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ds = rollout(&p, &fz, &task, EnvConfig::default(), SamplingConfig::EXACT, &mut rng).map_err(|e| e.to_string())?.decisions;
    let g = grad_decision_logprob(&p, &ds).map_err(|e| e.to_string())?;
    let shape = p.shape;
    let (err, i) = max_fd_error(&mut p.theta, &g, 1e-5, 1e-8, |th| {
        let q = PolicyParams { shape, theta: th.to_vec() };
        decision_logprobs(&q, &ds).expect("logprob").iter().sum()
    });
    if err < 1e-5 {
        Ok(format!("{} params, max rel err {err:.2e}", g.len()))
    } else {
        Err(format!("param {i}: rel err {err:.2e}"))
    }
}

fn check_sft_grad() -> Result<String, String> {
    let fz = Featurizer::new(1);
    let env = EnvConfig::default();
    let data: Vec<_> = (0..3)
        .map(|s| {
            let t = generate_task(s, 3 + s as usize, &DifficultyProfile::default()).expect("task");
            teacher_generate(&t, &TeacherStyle::sparse(), env, &mut ChaCha8Rng::seed_from_u64(s))
        })
        .collect();
    let ex = sft_examples(&data, &fz, &env, 1).map_err(|e| e.to_string())?;
    let refs: Vec<&SftExample> = ex.iter().collect();
    let mut p = small_policy(12, 0.5);
    let (_, g) = sft_loss_and_grad(&p, &refs).map_err(|e| e.to_string())?;
    let shape = p.shape;
    let (err, i) = max_fd_error(&mut p.theta, &g, 1e-5, 1e-8, |th| sft_loss(&PolicyParams { shape, theta: th.to_vec() }, &ex).expect("loss"));
    if err < 1e-5 {
        Ok(format!("max rel err {err:.2e}"))
    } else {
        Err(format!("param {i}: rel err {err:.2e}"))
    }
}

fn check_surrogate_grad(faults: &Faults) -> Result<String, String> {
    let fz = Featurizer::new(1);
    let old = small_policy(13, 0.6);
    let groups = sample_groups(&old, &fz, 3, 4, 99, faults);
    let refs: Vec<&Group> = groups.iter().collect();
    let mut new = old.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    new.theta.iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3));
    let s = surrogate_objective(&refs, &new, &old, faults.eps_low, faults.eps_high).map_err(|e| e.to_string())?;
    let shape = new.shape;
    let (err, i) = max_fd_error(&mut new.theta, &s.grad, 1e-5, 1e-8, |th| {
        surrogate_objective(&refs, &PolicyParams { shape, theta: th.to_vec() }, &old, faults.eps_low, faults.eps_high)
            .expect("surrogate")
            .value
    });
    if err < 1e-5 {
        Ok(format!("clipped fraction {:.3}, max rel err {err:.2e}", s.ratios.clipped_fraction))
    } else {
        Err(format!("param {i}: rel err {err:.2e}"))
    }
}

fn check_ratio_one(faults: &Faults) -> Result<String, String> {
    let fz = Featurizer::new(1);
    let p = small_policy(14, 0.6);
    let groups = sample_groups(&p, &fz, 2, 4, 7, faults);
    let refs: Vec<&Group> = groups.iter().collect();
    let s = surrogate_objective(&refs, &p, &p, faults.eps_low, faults.eps_high).map_err(|e| e.to_string())?;
    let n: usize = groups.iter().flat_map(|g| &g.samples).map(|x| x.decisions.len()).sum();
    let want: f64 = groups.iter().flat_map(|g| &g.samples).map(|x| x.advantage * x.decisions.len() as f64).sum::<f64>() / n as f64;
    let mut reinforce = vec![0.0; p.len()];
    for x in groups.iter().flat_map(|g| &g.samples) {
        let g = grad_decision_logprob(&p, &x.decisions).map_err(|e| e.to_string())?;
        for (r, gi) in reinforce.iter_mut().zip(g) {
            *r += x.advantage * gi / n as f64;
        }
    }
    let gerr = reinforce.iter().zip(&s.grad).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if (s.value - want).abs() < 1e-12 && gerr < 1e-12 && s.ratios.min == 1.0 && s.ratios.max == 1.0 {
        Ok("all ratios 1, surrogate equals REINFORCE with baseline".into())
    } else {
        Err(format!("value {} vs {want}, grad err {gerr:.2e}", s.value))
    }
}

fn check_advantages(faults: &Faults) -> Result<String, String> {
    let f = faults.advantages;
    let a = f(&[1.0, 0.0], AdvantageNorm::MeanStd);
    if (a[0] - 1.0).abs() > 1e-5 || (a[1] + 1.0).abs() > 1e-5 {
        return Err(format!("[1,0] -> {a:?}"));
    }
    let r = [1., 0., 0., 0., 1., 1., 0., 0.];
    let a = f(&r, AdvantageNorm::MeanStd);
    for (x, y) in r.iter().zip(&a) {
        let want = if *x == 1.0 { 1.29099 } else { -0.77460 };
        if (y - want).abs() > 1e-5 {
            return Err(format!("3 of 8 -> {a:?}"));
        }
    }
    for norm in [AdvantageNorm::MeanStd, AdvantageNorm::MeanOnly] {
        for v in [0.0, 1.0] {
            let z = f(&[v; 8], norm);
            if z.iter().any(|&x| x != 0.0) {
                return Err(format!("zero-variance group gave {z:?}"));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let r: Vec<f64> = (0..8).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let m = f(&r, AdvantageNorm::MeanOnly);
        if m.iter().sum::<f64>().abs() > 1e-9 {
            return Err("mean-only advantages do not sum to zero".into());
        }
        let s = f(&r, AdvantageNorm::MeanStd);
        for i in 0..8 {
            for j in 0..8 {
                if r[i] > r[j] && s[i] < s[j] {
                    return Err("a winner has lower advantage than a loser".into());
                }
            }
        }
    }
    Ok("examples, zero-variance guard, zero mean and ordering".into())
}

fn check_clip(faults: &Faults) -> Result<String, String> {
    let (lo, hi) = (faults.eps_low, faults.eps_high);
    let (v, d) = clipped_term(1.5, 1.0, lo, hi);
    if (v - 1.28).abs() > 1e-6 || d != 0.0 {
        return Err(format!("r=1.5 A=+1 gave ({v}, {d})"));
    }
    let (v, d) = clipped_term(0.5, -1.0, lo, hi);
    if (v + 0.8).abs() > 1e-6 || d != 0.0 {
        return Err(format!("r=0.5 A=-1 gave ({v}, {d})"));
    }
    // gradient vanishes exactly past the bound on the advantage's side
    for i in 1..400 {
        let r = i as f64 / 100.0;
        for a in [1.0, -1.0] {
            let (_, d) = clipped_term(r, a, lo, hi);
            let should_vanish = (a > 0.0 && r > 1.0 + hi) || (a < 0.0 && r < 1.0 - lo);
            if should_vanish != (d == 0.0) {
                return Err(format!("r={r} A={a}: slope {d}"));
            }
        }
    }
    let (v1, _) = clipped_term(1.0, 0.37, lo, hi);
    if v1 != 0.37 {
        return Err("clip active at ratio 1".into());
    }
    Ok("both regimes and the ratio-one identity".into())
}

fn check_softmax_and_nucleus() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let logits: [f64; VOCAB_SIZE] = std::array::from_fn(|_| rng.random_range(-5.0..5.0));
        let mask = Mask::from_bits(rng.random_range(1..(1u32 << VOCAB_SIZE)));
        let d = TokenDistribution::from_logits(logits, mask).map_err(|e| e.to_string())?;
        let total: f64 = d.probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(format!("probabilities sum to {total}"));
        }
        if (0..VOCAB_SIZE).any(|i| !mask.allows(Token(i as u8)) && d.probs[i] != 0.0) {
            return Err("masked token has probability".into());
        }
        let top_p = rng.random_range(0.05..1.0);
        let support = nucleus(&d, 1.0, top_p);
        let mut sorted: Vec<(Token, f64)> = mask.tokens().map(|t| (t, d.probs[t.id()])).collect();
        sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        if support.iter().zip(&sorted).any(|(a, b)| a.0 != b.0) {
            return Err("nucleus support is not a prefix of the sorted order".into());
        }
    }
    Ok("normalization, masking and nucleus prefix".into())
}

fn check_replay_and_roundtrip() -> Result<String, String> {
    let fz = Featurizer::new(4);
    let mut p = PolicyParams::init(&PolicyConfig::default(), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    p.theta.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    let env = EnvConfig { tool_budget: 6, max_trajectory_tokens: 120, slip_rate: 0.1 };
    for s in 0..200u64 {
        let task: Task = generate_task(s, 1 + s as usize % 16, &DifficultyProfile::default()).map_err(|e| e.to_string())?;
        let r = rollout(&p, &fz, &task, env, SamplingConfig::EXACT, &mut ChaCha8Rng::seed_from_u64(s)).map_err(|e| e.to_string())?;
        let t = &r.outcome.trajectory;
        validate(t).map_err(|v| format!("task {s}: {v:?}"))?;
        let again: Vec<Decision> = crate::policy::decisions(t, &fz, &env).map_err(|e| e.to_string())?;
        if again != r.decisions {
            return Err(format!("task {s}: replayed decisions differ"));
        }
        let back = deserialize(&serialize(t)).map_err(|e| e.to_string())?;
        if &back != t {
            return Err(format!("task {s}: serialization round trip changed the record"));
        }
    }
    Ok("200 random episodes validate, replay and round-trip".into())
}

/// Runs every property with the given faults.
pub fn run_properties(faults: &Faults) -> Vec<PropertyResult> {
    vec![
        result("sequence_logprob_gradient", check_seq_grad()),
        result("sft_loss_gradient", check_sft_grad()),
        result("surrogate_gradient", check_surrogate_grad(faults)),
        result("ratio_one_identity", check_ratio_one(faults)),
        result("group_advantages", check_advantages(faults)),
        result("clip_regimes", check_clip(faults)),
        result("softmax_and_nucleus", check_softmax_and_nucleus()),
        result("sandbox_replay_and_log_round_trip", check_replay_and_roundtrip()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_suite_passes() {
        for r in run_properties(&Faults::default()) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn negative_eps_high_is_caught() {
        let faults = Faults { eps_high: -0.1, ..Faults::default() };
        let r = run_properties(&faults);
        assert!(!r.iter().find(|x| x.name == "clip_regimes").unwrap().passed);
    }

    #[test]
    fn missing_zero_variance_guard_is_caught() {
        fn unguarded(r: &[f64], _: AdvantageNorm) -> Vec<f64> {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let std = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            r.iter().map(|x| (x - mean + 1e-7) / (std + 1e-6)).collect()
        }
        let faults = Faults { advantages: unguarded, ..Faults::default() };
        let r = run_properties(&faults);
        assert!(!r.iter().find(|x| x.name == "group_advantages").unwrap().passed);
    }
}
