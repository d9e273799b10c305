//! Goal features and the imagination-based planner.
//!
//! A goal is given as the 3x3 window of map cells around the goal position.
//! A small conv encoder maps such windows into the planning state space
//! (the `z` space for the hierarchical model, `s` for the baseline) and is
//! trained to maximise cosine similarity with the state of the step whose
//! window it sees. Planning enumerates every action sequence of length
//! `l_img`, imagines the corresponding state chain from the context carry
//! with distribution means, and takes the first action of the sequence whose
//! best state is most similar to the goal.

use candle_core::{DType, Tensor, D};
use rand::Rng;

use crate::envs::maze::{Action, Episode, MazeMap};
use crate::envs::sequence_rng;
use crate::error::{Error, Result};
use crate::model::{Frames, RolloutNoise, WorldModel};
use crate::nn::{Linear, ParamStore};

/// Side of the goal window in cells.
pub const WINDOW: usize = 3;

/// Conv encoder over a 3x3 window: a shared 2x2 filter bank on the four
/// overlapping 2x2 patches followed by a linear head.
#[derive(Debug, Clone)]
pub struct GoalEncoder {
    patch: Linear,
    head: Linear,
}

impl GoalEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        hidden: usize,
        out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            patch: Linear::new(store, &format!("{name}.patch"), 4 * channels, hidden, rng)?,
            head: Linear::new(store, &format!("{name}.head"), 4 * hidden, out, rng)?,
        })
    }

    /// `(N, 3, 3, C)` windows with values in `[0, 1]` -> `(N, out)`.
    pub fn forward(&self, windows: &Tensor) -> Result<Tensor> {
        let (_, h, w, _) = windows.dims4()?;
        if h != WINDOW || w != WINDOW {
            return Err(Error::InvalidArgument(format!("goal window must be 3x3, got {h}x{w}")));
        }
        let mut patches = Vec::with_capacity(4);
        for i in 0..2 {
            for j in 0..2 {
                patches.push(windows.narrow(1, i, 2)?.narrow(2, j, 2)?.flatten_from(1)?);
            }
        }
        let p = Tensor::stack(&patches, 1)?;
        let hidden = self.patch.forward(&p)?.elu(1.0)?;
        self.head.forward(&hidden.flatten_from(1)?)
    }
}

/// Row-wise cosine similarity of two `(N, d)` tensors.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dot = (a * b)?.sum(D::Minus1)?;
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum(D::Minus1)?.sqrt()?;
    let denom = (na * nb)?.clamp(1e-12, f64::INFINITY)?;
    Ok((dot / denom)?)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Converts byte windows `(N, 3, 3, C)` to intensities in `[0, 1]`.
pub fn windows_tensor(bytes: &[u8], n: usize, channels: usize, dtype: DType) -> Result<Tensor> {
    if bytes.len() != n * WINDOW * WINDOW * channels {
        return Err(Error::InvalidArgument("goal window buffer has the wrong size".into()));
    }
    let values: Vec<f32> = bytes.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::from_vec(values, (n, WINDOW, WINDOW, channels), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

impl WorldModel {
    pub fn goal_encoder(&self) -> Result<&GoalEncoder> {
        self.goal.as_ref().ok_or_else(|| Error::Config("model has no goal encoder (goal_hidden = 0)".into()))
    }

    /// Mean of `1 - cos(goal feature, state)` over all `(b, t)`; `states`
    /// should already be detached so only the goal encoder learns from it.
    pub fn goal_loss(&self, goals: &Tensor, states: &Tensor) -> Result<Tensor> {
        let (b, t, ..) = goals.dims5()?;
        let d = self.config().planning_dim();
        let g = self.goal_encoder()?.forward(&goals.reshape((b * t, WINDOW, WINDOW, self.config().channels))?)?;
        let cos = cosine_similarity(&g, &states.reshape((b * t, d))?)?;
        Ok((cos.ones_like()? - cos)?.mean_all()?)
    }

    /// Goal feature of a single byte window.
    pub fn goal_feature(&self, window: &[u8]) -> Result<Vec<f64>> {
        let w = windows_tensor(window, 1, self.config().channels, self.dtype())?;
        let g = self.goal_encoder()?.forward(&w)?;
        Ok(g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }
}

/// All `num_actions^len` action sequences in lexicographic order.
pub fn enumerate_candidates(num_actions: usize, len: usize) -> Vec<Vec<u32>> {
    let total = num_actions.pow(len as u32);
    (0..total)
        .map(|mut k| {
            let mut seq = vec![0u32; len];
            for slot in seq.iter_mut().rev() {
                *slot = (k % num_actions) as u32;
                k /= num_actions;
            }
            seq
        })
        .collect()
}

/// Running context summary `c_0 = f_ctx(X_ctx)`, extended one frame at a time.
#[derive(Debug, Clone)]
pub struct PlanContext {
    carry: Tensor,
    frames: usize,
}

impl PlanContext {
    pub fn new(model: &WorldModel) -> Result<Self> {
        Ok(Self { carry: model.context_init(1)?, frames: 0 })
    }

    /// Appends one `H x W x C` byte frame.
    pub fn observe(&mut self, model: &WorldModel, frame: &[u8]) -> Result<()> {
        let c = model.config();
        let x = Frames::from_bytes(frame, &[1, 1, c.image_size, c.image_size, c.channels], c.likelihood, model.dtype())?;
        let feature = model.encode_frames(&x)?.squeeze(1)?;
        self.carry = model.context_step(&self.carry, &feature)?;
        self.frames += 1;
        Ok(())
    }

    pub fn carry(&self) -> &Tensor {
        &self.carry
    }

    pub fn len(&self) -> usize {
        self.frames
    }

    pub fn is_empty(&self) -> bool {
        self.frames == 0
    }
}

#[derive(Debug, Clone)]
pub struct PlanDecision {
    pub action: u32,
    /// Index of the chosen candidate in lexicographic order.
    pub candidate: usize,
    /// `max(D)` of the chosen candidate.
    pub score: f64,
    pub candidates: usize,
    /// Transition-network evaluations spent on imagination.
    pub transitions: u64,
}

/// Picks the candidate with the strictly greatest `max(D)`; earlier
/// (lexicographically smaller) candidates win ties.
pub fn choose(similarities: &[Vec<f64>]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (k, d) in similarities.iter().enumerate() {
        let score = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((k, score));
        }
    }
    best
}

/// One planning step from the current context towards goal feature `goal`.
pub fn plan_step(
    model: &WorldModel,
    ctx: &PlanContext,
    goal: &[f64],
    l_img: usize,
    sample: Option<&mut RolloutNoise>,
) -> Result<PlanDecision> {
    if l_img == 0 {
        return Err(Error::InvalidArgument("imagination length must be >= 1".into()));
    }
    if ctx.is_empty() {
        return Err(Error::InvalidArgument("planning needs at least one context frame".into()));
    }
    let d = model.config().planning_dim();
    if goal.len() != d {
        return Err(Error::Config(format!("goal feature has {} entries, planning states have {d}", goal.len())));
    }
    let candidates = enumerate_candidates(model.config().num_actions, l_img);
    let before = model.counter().snapshot();
    let states = model.imagine(ctx.carry(), &candidates, sample)?.to_dtype(DType::F64)?;
    let transitions = model.counter().snapshot().since(&before).transitions();
    let flat = states.flatten_all()?.to_vec1::<f64>()?;
    let sims: Vec<Vec<f64>> = (0..candidates.len())
        .map(|k| (0..l_img).map(|i| cosine(&flat[(k * l_img + i) * d..(k * l_img + i + 1) * d], goal)).collect())
        .collect();
    let (candidate, score) = choose(&sims).expect("at least one candidate");
    Ok(PlanDecision { action: candidates[candidate][0], candidate, score, candidates: candidates.len(), transitions })
}

/// Life steps of a navigation episode and its starting reward.
pub const MAX_REWARD: u32 = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub reward: u32,
    pub reached: bool,
    pub steps: u32,
    /// Mean transition evaluations per imagined candidate over all planning steps.
    pub transitions_per_candidate: f64,
}

/// One navigation episode: plan, act, extend the context, lose one unit of
/// reward per step, and stop on reaching the goal cell or running out.
/// Camera jitter after each action is drawn from `seed`.
pub fn run_episode(model: &WorldModel, episode: &Episode, l_img: usize, seed: u64) -> Result<EpisodeOutcome> {
    let mut ep = episode.clone();
    let mut rng = sequence_rng(seed, 0);
    let goal = model.goal_feature(&ep.goal_window())?;
    let mut ctx = PlanContext::new(model)?;
    ctx.observe(model, &ep.world.render())?;
    let mut reward = MAX_REWARD;
    let (mut steps, mut transitions, mut candidates) = (0u32, 0u64, 0u64);
    let mut reached = ep.at_goal();
    while reward > 0 && !reached {
        let decision = plan_step(model, &ctx, &goal, l_img, None)?;
        transitions += decision.transitions;
        candidates += decision.candidates as u64;
        ep.world.step(Action::from_id(decision.action)?, &mut rng);
        ctx.observe(model, &ep.world.render())?;
        reward -= 1;
        steps += 1;
        reached = ep.at_goal();
    }
    Ok(EpisodeOutcome {
        reward,
        reached,
        steps,
        transitions_per_candidate: if candidates == 0 { 0.0 } else { transitions as f64 / candidates as f64 },
    })
}

/// Placement of navigation goals relative to the start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GoalPlacement {
    pub min_dist: usize,
    pub max_dist: usize,
}

impl Default for GoalPlacement {
    /// Any open cell other than the start.
    fn default() -> Self {
        Self { min_dist: 1, max_dist: usize::MAX }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub model: String,
    pub l_img: usize,
    pub seed: u64,
    pub reward: u32,
    pub transitions_per_candidate: f64,
}

pub const EVAL_HEADER: &str = "model,l_img,seed,reward";

impl EvalRecord {
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.model, self.l_img, self.seed, self.reward)
    }
}

/// Runs episodes `seed_base..seed_base + episodes` for every model and
/// imagination length. Episode `k` has the same start and goal for every
/// configuration.
pub fn evaluate(
    models: &[(String, &WorldModel)],
    map: &MazeMap,
    l_imgs: &[usize],
    episodes: usize,
    seed_base: u64,
    placement: GoalPlacement,
    mut progress: impl FnMut(&EvalRecord),
) -> Result<Vec<EvalRecord>> {
    let tasks = (0..episodes as u64)
        .map(|k| Episode::sample(map, seed_base + k, placement.min_dist, placement.max_dist))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(models.len() * l_imgs.len() * episodes);
    for (name, model) in models {
        for &l in l_imgs {
            for (k, task) in tasks.iter().enumerate() {
                let seed = seed_base + k as u64;
                let o = run_episode(model, task, l, seed)?;
                let rec = EvalRecord {
                    model: name.clone(),
                    l_img: l,
                    seed,
                    reward: o.reward,
                    transitions_per_candidate: o.transitions_per_candidate,
                };
                progress(&rec);
                out.push(rec);
            }
        }
    }
    Ok(out)
}

/// Mean reward of one `(model, l_img)` configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigSummary {
    pub model: String,
    pub l_img: usize,
    pub episodes: usize,
    pub mean_reward: f64,
    pub transitions_per_candidate: f64,
}

/// Groups records by configuration, in first-seen order.
pub fn summarize(records: &[EvalRecord]) -> Vec<ConfigSummary> {
    let mut out: Vec<ConfigSummary> = Vec::new();
    for r in records {
        let i = match out.iter().position(|s| s.model == r.model && s.l_img == r.l_img) {
            Some(i) => i,
            None => {
                out.push(ConfigSummary {
                    model: r.model.clone(),
                    l_img: r.l_img,
                    episodes: 0,
                    mean_reward: 0.0,
                    transitions_per_candidate: 0.0,
                });
                out.len() - 1
            }
        };
        let s = &mut out[i];
        s.episodes += 1;
        let n = s.episodes as f64;
        s.mean_reward += (r.reward as f64 - s.mean_reward) / n;
        s.transitions_per_candidate += (r.transitions_per_candidate - s.transitions_per_candidate) / n;
    }
    out
}

/// Rewards of one configuration ordered by seed.
pub fn rewards_by_seed(records: &[EvalRecord], model: &str, l_img: usize) -> Vec<(u64, f64)> {
    let mut v: Vec<(u64, f64)> =
        records.iter().filter(|r| r.model == model && r.l_img == l_img).map(|r| (r.seed, r.reward as f64)).collect();
    v.sort_by_key(|p| p.0);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_is_complete_and_ordered() {
        let c = enumerate_candidates(3, 3);
        assert_eq!(c.len(), 27);
        assert_eq!(c[0], vec![0, 0, 0]);
        assert_eq!(c[1], vec![0, 0, 1]);
        assert_eq!(c[26], vec![2, 2, 2]);
        let mut sorted = c.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted, c);
    }

    #[test]
    fn ties_go_to_the_first_candidate() {
        let sims = vec![vec![0.1, 0.9], vec![0.9, 0.2], vec![0.95 - 0.05, 0.0]];
        assert_eq!(choose(&sims).unwrap().0, 0);
        assert_eq!(choose(&[vec![0.1], vec![0.3], vec![0.3]]).unwrap().0, 1);
    }

    fn maze_model(mode: crate::config::Mode) -> WorldModel {
        use crate::config::{Likelihood, ModelConfig};
        let cfg = ModelConfig {
            image_size: 32,
            conv_channels: vec![2, 2, 2],
            likelihood: Likelihood::Gaussian,
            goal_hidden: 4,
            ..ModelConfig::tiny(mode)
        };
        WorldModel::new(cfg, DType::F32, 5).unwrap()
    }

    #[test]
    fn spawned_on_goal_keeps_full_reward() {
        let map = MazeMap::default_map();
        let mut ep = Episode::sample(&map, 3, 1, usize::MAX).unwrap();
        ep.goal = ep.world.pose.cell();
        let o = run_episode(&maze_model(crate::config::Mode::Hrssm), &ep, 2, 0).unwrap();
        assert_eq!(o, EpisodeOutcome { reward: 100, reached: true, steps: 0, transitions_per_candidate: 0.0 });
    }

    #[test]
    fn reward_counts_down_one_per_step() {
        use crate::config::Mode;
        let map = MazeMap::default_map();
        for mode in [Mode::Hrssm, Mode::Rssm] {
            let model = maze_model(mode);
            for seed in 0..3 {
                // near goals, so some episodes end early
                let ep = Episode::sample(&map, seed, 1, 3).unwrap();
                let o = run_episode(&model, &ep, 1, seed).unwrap();
                assert!(o.reward <= MAX_REWARD);
                assert_eq!(o.reward + o.steps, MAX_REWARD);
                if !o.reached {
                    assert_eq!(o.reward, 0);
                }
            }
        }
    }

    #[test]
    fn every_candidate_costs_l_img_transitions() {
        use crate::config::Mode;
        let map = MazeMap::default_map();
        let ep = Episode::sample(&map, 11, 1, usize::MAX).unwrap();
        for mode in [Mode::Hrssm, Mode::Rssm] {
            let model = maze_model(mode);
            let mut ctx = PlanContext::new(&model).unwrap();
            ctx.observe(&model, &ep.world.render()).unwrap();
            let goal = model.goal_feature(&ep.goal_window()).unwrap();
            for l in 1..=3 {
                let d = plan_step(&model, &ctx, &goal, l, None).unwrap();
                assert_eq!(d.candidates, 3usize.pow(l as u32));
                assert_eq!(d.transitions, (d.candidates * l) as u64, "{mode} l_img={l}");
            }
        }
    }

    #[test]
    fn decisions_ignore_goal_scale_and_repeat() {
        let map = MazeMap::default_map();
        let ep = Episode::sample(&map, 4, 1, usize::MAX).unwrap();
        let model = maze_model(crate::config::Mode::Hrssm);
        let mut ctx = PlanContext::new(&model).unwrap();
        ctx.observe(&model, &ep.world.render()).unwrap();
        let goal = model.goal_feature(&ep.goal_window()).unwrap();
        let base = plan_step(&model, &ctx, &goal, 3, None).unwrap();
        for k in [0.01, 3.0, 250.0] {
            let scaled: Vec<f64> = goal.iter().map(|v| v * k).collect();
            assert_eq!(plan_step(&model, &ctx, &scaled, 3, None).unwrap().candidate, base.candidate);
        }
        assert_eq!(plan_step(&model, &ctx, &goal, 3, None).unwrap().candidate, base.candidate);
        let a = run_episode(&model, &ep, 2, 9).unwrap();
        assert_eq!(a, run_episode(&model, &ep, 2, 9).unwrap());
    }

    #[test]
    fn summaries_group_by_configuration() {
        let rec = |model: &str, l_img, seed, reward| EvalRecord {
            model: model.into(),
            l_img,
            seed,
            reward,
            transitions_per_candidate: l_img as f64,
        };
        let rs = vec![rec("a", 1, 0, 10), rec("a", 1, 1, 20), rec("b", 1, 0, 0), rec("a", 2, 0, 4)];
        let s = summarize(&rs);
        assert_eq!(s.len(), 3);
        assert_eq!((s[0].episodes, s[0].mean_reward), (2, 15.0));
        assert_eq!(rewards_by_seed(&rs, "a", 1), vec![(0, 10.0), (1, 20.0)]);
        assert_eq!(rs[0].csv(), "a,1,0,10");
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let a = [1.0, -2.0, 0.5];
        assert!((cosine(&a, &a) - 1.0).abs() < 1e-12);
        let scaled: Vec<f64> = a.iter().map(|v| v * 7.5).collect();
        assert!((cosine(&a, &scaled) - 1.0).abs() < 1e-12);
        assert!((cosine(&a, &[2.0, 1.0, 0.0])).abs() < 1e-12);
    }
}
