//! Structural probes and the Monte Carlo KL oracle, shared by the
//! integration tests and the acceptance report. Each check returns a short
//! detail string on success and a description of the first violation
//! otherwise.

#![allow(dead_code)]

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vta::boundary::{BoundaryLimits, BoundaryTrack};
use vta::config::{Likelihood, Mode, ModelConfig};
use vta::elbo::{elbo, Boundaries, ElboNoise, SequenceBatch};
use vta::inference::frozen_indicators;
use vta::model::{RolloutNoise, SState, ZState};
use vta::nn::{self, DiagGaussian};
use vta::{Frames, WorldModel};

pub type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn vals(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn tiny_model(mode: Mode, seed: u64, edit: impl FnOnce(&mut ModelConfig)) -> WorldModel {
    let mut cfg = ModelConfig::tiny(mode);
    edit(&mut cfg);
    WorldModel::new(cfg, DType::F64, seed).unwrap()
}

pub fn random_frames(model: &WorldModel, b: usize, t: usize, rng: &mut ChaCha8Rng) -> (Vec<u8>, Frames) {
    let c = model.config();
    let bytes: Vec<u8> = (0..b * t * c.frame_len()).map(|_| rng.gen()).collect();
    let f = Frames::from_bytes(&bytes, &[b, t, c.image_size, c.image_size, c.channels], c.likelihood, model.dtype()).unwrap();
    (bytes, f)
}

pub fn random_batch(model: &WorldModel, b: usize, t: usize, rng: &mut ChaCha8Rng) -> SequenceBatch {
    let (_, frames) = random_frames(model, b, t, rng);
    let c = model.config();
    let actions = c.action_conditioned().then(|| {
        let ids: Vec<u32> = (0..b * t).map(|_| rng.gen_range(0..c.num_actions as u32)).collect();
        Tensor::from_vec(ids, (b, t), model.device()).unwrap()
    });
    SequenceBatch { frames, context: None, actions, goals: None }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    nn::normal_tensor(rng, shape, DType::F64).unwrap()
}

/// Recomputes the counters from the indicators alone and checks the forcing
/// rule at every step: budget exhausted means no boundary, otherwise a
/// subsequence at maximum length must end.
pub fn forcing_violation(indicators: &[u8], limits: BoundaryLimits) -> Option<String> {
    let (mut n, mut l) = (1usize, 1usize);
    for (t, &m) in indicators.iter().enumerate() {
        if t > 0 {
            if indicators[t - 1] == 1 {
                n += 1;
                l = 1;
            } else {
                l += 1;
            }
        }
        if m > 1 {
            return Some(format!("indicator {m} at step {t}"));
        }
        if n >= limits.max_segments && m != 0 {
            return Some(format!("boundary at step {t} with budget exhausted (n={n})"));
        }
        if n < limits.max_segments && l >= limits.max_len && m != 1 {
            return Some(format!("no boundary at step {t} although l={l} reached l_max"));
        }
    }
    None
}

/// A COPY step returns the previous abstraction and carry bit for bit,
/// whatever the action.
pub fn copy_exactness(instances: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for k in 0..instances {
        let m = tiny_model(Mode::Hrssm, k as u64, |_| {});
        let rows = 3;
        let prev = ZState { value: normal(&mut rng, &[rows, 2]), carry: normal(&mut rng, &[rows, 6]) };
        let gate = Tensor::zeros((rows, 1), DType::F64, m.device()).unwrap();
        let ids: Vec<u32> = (0..rows).map(|_| rng.gen_range(0..3)).collect();
        let action = Tensor::from_vec(ids, rows, m.device()).unwrap();
        let tr = m.z_transition(&prev, &gate, Some(&action)).unwrap();
        let next = tr.sample(&normal(&mut rng, &[rows, 2])).unwrap();
        ensure(vals(&next.value) == vals(&prev.value), || format!("instance {k}: COPY changed z"))?;
        ensure(vals(&next.carry) == vals(&prev.carry), || format!("instance {k}: COPY changed the z carry"))?;
        // non-vacuity: an UPDATE moves z
        let one = Tensor::ones((rows, 1), DType::F64, m.device()).unwrap();
        let moved = m.z_transition(&prev, &one, Some(&action)).unwrap().sample(&normal(&mut rng, &[rows, 2])).unwrap();
        ensure(vals(&moved.value) != vals(&prev.value), || format!("instance {k}: UPDATE left z unchanged"))?;
    }
    Ok(format!("{instances} random COPY steps reproduce (z, c) exactly"))
}

/// An INIT step forgets the previous observation abstraction: the prior over
/// `s_t` depends on `z_t` only.
pub fn init_amnesia(instances: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for k in 0..instances {
        let m = tiny_model(Mode::Hrssm, 1000 + k as u64, |_| {});
        let z = normal(&mut rng, &[2, 2]);
        let a = SState { value: normal(&mut rng, &[2, 2]), carry: normal(&mut rng, &[2, 6]) };
        let b = SState { value: normal(&mut rng, &[2, 2]), carry: normal(&mut rng, &[2, 6]) };
        let one = Tensor::ones((2, 1), DType::F64, m.device()).unwrap();
        let (ia, ib) = (m.s_transition(&a, &z, &one).unwrap(), m.s_transition(&b, &z, &one).unwrap());
        ensure(vals(&ia.dist.mean) == vals(&ib.dist.mean) && vals(&ia.dist.std) == vals(&ib.dist.std), || {
            format!("instance {k}: INIT prior depends on the previous s")
        })?;
        let fresh = m.s_init(&z).unwrap();
        ensure(vals(&fresh.dist.mean) == vals(&ia.dist.mean), || format!("instance {k}: INIT differs from s_init"))?;
        // non-vacuity: an UPDATE does read the previous state
        let zero = Tensor::zeros((2, 1), DType::F64, m.device()).unwrap();
        let (ua, ub) = (m.s_transition(&a, &z, &zero).unwrap(), m.s_transition(&b, &z, &zero).unwrap());
        ensure(vals(&ua.carry) != vals(&ub.carry), || format!("instance {k}: UPDATE ignores the previous s"))?;
    }
    Ok(format!("{instances} INIT steps independent of the previous s"))
}

/// Prior rollouts and posterior samples obey the counter forcing.
pub fn counter_forcing(rollouts: usize) -> Check {
    let limits = BoundaryLimits::new(3, 3);
    let horizon = 12;
    let m = tiny_model(Mode::Hrssm, 7, |c| {
        c.max_segments = 3;
        c.max_segment_len = 3;
    });
    let mut exhausted = 0;
    for k in 0..rollouts {
        let actions: Vec<u32> = (0..horizon).map(|i| ((i + k) % 3) as u32).collect();
        let r = m.generate(None, horizon, Some(&actions), false, &mut RolloutNoise::new(k as u64)).unwrap();
        let track = r.track.expect("full rollouts carry a track");
        if let Some(v) = forcing_violation(track.indicators(), limits) {
            return Err(format!("prior rollout {k}: {v}"));
        }
        exhausted += (track.num_segments() == limits.max_segments) as usize;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let per_batch = 50;
    for k in 0..rollouts.div_ceil(per_batch) {
        let (_, x) = random_frames(&m, per_batch, horizon, &mut rng);
        let tau = [1.0, 0.5, 0.1][k % 3];
        let d = m.decompose_frames(&x, tau, &mut rng).unwrap();
        for (i, tr) in d.tracks.iter().enumerate() {
            if let Some(v) = forcing_violation(tr.indicators(), limits) {
                return Err(format!("posterior batch {k} row {i}: {v}"));
            }
        }
    }
    ensure(exhausted > 0, || "no rollout reached the segment budget; forcing untested".into())?;
    Ok(format!("{rollouts} prior rollouts and {rollouts} posterior samples obey forcing ({exhausted} hit the budget)"))
}

/// Perturbing frames in one subsequence leaves the masked encoders of the
/// other subsequences unchanged.
pub fn masked_independence(probes: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let t = 8;
    let limits = BoundaryLimits::new(4, 4);
    let m = tiny_model(Mode::Hrssm, 9, |c| {
        c.max_segments = 4;
        c.max_segment_len = 4;
    });
    let flen = m.config().frame_len();
    let mut checked = 0;
    for k in 0..probes {
        let track = BoundaryTrack::from_proposals((0..t).map(|_| rng.gen_bool(0.3)), limits);
        let starts = track.segment_starts();
        let Some(&cut) = starts.first() else { continue };
        let (mi, _) = frozen_indicators(&m, std::slice::from_ref(&track)).unwrap();
        let (mut bytes, x) = random_frames(&m, 1, t, &mut rng);
        let zeps = normal(&mut rng, &[1, t, 2]);
        let seps = normal(&mut rng, &[1, t, 2]);
        let enc = m.encode_frames(&x).unwrap();
        let zq = m.infer_z(&enc, &mi, &zeps).unwrap();
        let sq = m.infer_s(&enc, &mi, &zq.z, &seps).unwrap();

        // later frame: backward features before the cut must not move
        let late = rng.gen_range(cut..t);
        let mut later = bytes.clone();
        for b in &mut later[late * flen..(late + 1) * flen] {
            *b = b.wrapping_add(97);
        }
        let x2 = Frames::from_bytes(&later, x.data.dims(), x.likelihood, DType::F64).unwrap();
        let zq2 = m.infer_z(&m.encode_frames(&x2).unwrap(), &mi, &zeps).unwrap();
        for i in 0..cut {
            ensure(vals(&zq.psi_bwd[i]) == vals(&zq2.psi_bwd[i]), || {
                format!("probe {k}: psi_bwd[{i}] saw frame {late} across the boundary before step {cut}")
            })?;
        }
        ensure(vals(&zq.psi_bwd[late]) != vals(&zq2.psi_bwd[late]), || format!("probe {k}: perturbation had no effect"))?;

        // earlier frame: forward features from the cut on must not move
        let early = rng.gen_range(0..cut);
        for b in &mut bytes[early * flen..(early + 1) * flen] {
            *b = b.wrapping_add(97);
        }
        let x3 = Frames::from_bytes(&bytes, x.data.dims(), x.likelihood, DType::F64).unwrap();
        let sq3 = m.infer_s(&m.encode_frames(&x3).unwrap(), &mi, &zq.z, &seps).unwrap();
        for i in cut..t {
            ensure(vals(&sq.phi_fwd[i]) == vals(&sq3.phi_fwd[i]), || {
                format!("probe {k}: phi_fwd[{i}] saw frame {early} from before the boundary at {cut}")
            })?;
        }
        ensure(vals(&sq.phi_fwd[early]) != vals(&sq3.phi_fwd[early]), || format!("probe {k}: perturbation had no effect"))?;
        checked += 1;
    }
    ensure(checked > probes / 2, || format!("only {checked} probes had a boundary"))?;
    Ok(format!("{checked} perturbation probes on both masked encoders"))
}

/// Sampled indicators are exactly 0 or 1 and equal the hard threshold of
/// `logit + noise` on unforced steps.
pub fn straight_through_hardness(batches: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let m = tiny_model(Mode::Hrssm, 10, |_| {});
    let (b, t) = (20, 10);
    let mut draws = 0;
    for k in 0..batches {
        let (_, x) = random_frames(&m, b, t, &mut rng);
        let enc = m.encode_frames(&x).unwrap();
        let noise = nn::logistic_values(&mut rng, b * t);
        let tau = [1.0, 0.5, 0.1, 0.01][k % 4];
        let d = m.decompose(&enc, tau, &noise).unwrap();
        let (ind, logits, forced) = (vals(&d.indicators), vals(&d.logits), vals(&d.forced));
        for i in 0..b * t {
            ensure(ind[i] == 0.0 || ind[i] == 1.0, || format!("batch {k}: indicator {} is not binary", ind[i]))?;
            if forced[i] == 0.0 {
                let hard = (logits[i] + noise[i] >= 0.0) as u8 as f64;
                ensure(ind[i] == hard, || format!("batch {k}: indicator differs from the hard sample"))?;
            }
        }
        draws += b * t;
    }
    Ok(format!("{draws} sampled indicators binary and equal to the hard sample"))
}

/// Relaxed-vs-hard gap over `draws` logistic draws at each temperature:
/// `(tau, mean |relaxed - hard|, max |relaxed - hard|)`.
pub fn relaxation_gap(draws: usize) -> Vec<(f64, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let m = tiny_model(Mode::Hrssm, 11, |_| {});
    let t = 10;
    let b = draws.div_ceil(t);
    let (_, x) = random_frames(&m, b, t, &mut rng);
    let enc = m.encode_frames(&x).unwrap();
    let noise = nn::logistic_values(&mut rng, b * t);
    [1.0, 0.1, 0.01]
        .into_iter()
        .map(|tau| {
            let d = m.decompose(&enc, tau, &noise).unwrap();
            let (relaxed, logits) = (vals(&d.relaxed), vals(&d.logits));
            let gaps: Vec<f64> = relaxed
                .iter()
                .zip(logits.iter().zip(&noise))
                .map(|(r, (l, n))| (r - (l + n >= 0.0) as u8 as f64).abs())
                .collect();
            let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
            (tau, mean, gaps.iter().copied().fold(0.0, f64::max))
        })
        .collect()
}

/// A jumpy rollout and a full rollout whose boundaries are all forced
/// (`l_max = 1`) walk the same `z` chain under common noise.
pub fn jumpy_equivalence(rollouts: usize) -> Check {
    let horizon = 6;
    for k in 0..rollouts {
        let m = tiny_model(Mode::Hrssm, 200 + k as u64, |c| {
            c.max_segments = horizon + 1;
            c.max_segment_len = 1;
        });
        let actions: Vec<u32> = (0..horizon).map(|i| ((i * 7 + k) % 3) as u32).collect();
        let jumpy = m.generate(None, horizon, Some(&actions), true, &mut RolloutNoise::new(k as u64)).unwrap();
        let full = m.generate(None, horizon, Some(&actions), false, &mut RolloutNoise::new(k as u64)).unwrap();
        let track = full.track.as_ref().unwrap();
        ensure(track.indicators().iter().all(|&v| v == 1), || format!("rollout {k}: l_max = 1 did not force every boundary"))?;
        ensure(jumpy.path.z == full.path.z && jumpy.path.c == full.path.c, || format!("rollout {k}: z chains differ"))?;
        ensure(jumpy.z_transitions == horizon && full.z_transitions == horizon, || format!("rollout {k}: transition counts"))?;
    }
    Ok(format!("{rollouts} jumpy rollouts match forced-boundary rollouts exactly"))
}

/// Monte Carlo estimate of `E_q[f]` with its standard error.
fn mc<F: FnMut(&mut ChaCha8Rng) -> f64>(samples: usize, rng: &mut ChaCha8Rng, mut f: F) -> (f64, f64) {
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..samples {
        let v = f(rng);
        sum += v;
        sq += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn gaussian_row(d: &DiagGaussian, row: usize) -> (Vec<f64>, Vec<f64>) {
    let mean = vals(&d.mean.get(row).unwrap());
    let std = vals(&d.std.get(row).unwrap());
    (mean, std)
}

fn gaussian_mc(q: &DiagGaussian, p: &DiagGaussian, row: usize, samples: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let ((mq, sq), (mp, sp)) = (gaussian_row(q, row), gaussian_row(p, row));
    mc(samples, rng, |r| {
        (0..mq.len())
            .map(|i| {
                let e: f64 = r.sample(StandardNormal);
                let x = mq[i] + sq[i] * e;
                let zp = (x - mp[i]) / sp[i];
                (-sq[i].ln() - 0.5 * e * e) - (-sp[i].ln() - 0.5 * zp * zp)
            })
            .sum()
    })
}

/// Analytic Gaussian and Bernoulli KL terms of the ELBO against Monte Carlo
/// estimates with `samples` draws, one random element of each kind per
/// model instance. Returns the worst deviation in standard errors.
pub fn mc_kl_oracle(instances: usize, samples: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let (b, t) = (3, 6);
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for k in 0..instances {
        let m = tiny_model(Mode::Hrssm, 300 + k as u64, |_| {});
        let batch = random_batch(&m, b, t, &mut rng);
        let noise = ElboNoise::draw(&mut rng, m.config(), b, t, DType::F64).unwrap();
        let out = elbo(&m, &batch, &Boundaries::Sample { temperature: 0.5 }, &noise).unwrap();
        let mut judge = |what: &str, analytic: f64, (est, se): (f64, f64)| -> Result<(), String> {
            let dev = if se > 0.0 { (analytic - est).abs() / se } else if analytic == est { 0.0 } else { f64::INFINITY };
            worst = worst.max(dev);
            compared += 1;
            ensure(dev <= 3.0, || format!("instance {k} {what}: analytic {analytic:.6} vs MC {est:.6} +- {se:.6}"))
        };

        // z: a random UPDATE step
        let updates: Vec<(usize, usize)> = (0..t)
            .flat_map(|s| (0..b).map(move |r| (r, s)))
            .filter(|&(r, s)| vals(&out.trace.z[s].2)[r] == 1.0)
            .collect();
        let (r, s) = updates[rng.gen_range(0..updates.len())];
        let (q, p, _) = &out.trace.z[s];
        judge("z", vals(&q.kl(p).unwrap())[r], gaussian_mc(q, p, r, samples, &mut rng))?;

        let (r, s) = (rng.gen_range(0..b), rng.gen_range(0..t));
        let (q, p) = &out.trace.s[s];
        judge("s", vals(&q.kl(p).unwrap())[r], gaussian_mc(q, p, r, samples, &mut rng))?;

        let (ql, pl, forced) = out.trace.boundary.as_ref().unwrap();
        let free: Vec<usize> = (0..b * t).filter(|&i| vals(forced)[i] == 0.0).collect();
        let i = free[rng.gen_range(0..free.len())];
        let analytic = vals(&nn::bernoulli_kl_logits(ql, pl).unwrap())[i];
        let (qv, pv) = (nn::scalar_sigmoid(vals(ql)[i]), nn::scalar_sigmoid(vals(pl)[i]));
        let est = mc(samples, &mut rng, |r| {
            if r.gen::<f64>() < qv {
                (qv / pv).ln()
            } else {
                ((1.0 - qv) / (1.0 - pv)).ln()
            }
        });
        judge("m", analytic, est)?;
    }
    Ok(format!("{compared} KL terms within 3 standard errors (worst {worst:.2} SE)"))
}

/// The suite with its full sizes.
pub fn structural_suite() -> Vec<(&'static str, Check)> {
    vec![
        ("COPY exactness", copy_exactness(200)),
        ("INIT amnesia", init_amnesia(200)),
        ("counter forcing", counter_forcing(1000)),
        ("masked encoders", masked_independence(200)),
        ("straight-through hardness", straight_through_hardness(100)),
        ("jumpy vs forced boundaries", jumpy_equivalence(100)),
    ]
}

pub fn likelihoods() -> [Likelihood; 2] {
    [Likelihood::Bernoulli, Likelihood::Gaussian]
}
