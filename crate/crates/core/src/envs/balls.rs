//! Two coloured balls bouncing in a unit box. A ball takes a new colour
//! whenever it hits a wall; the frame showing the new colour is flagged as an
//! event.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::sequence_rng;
use crate::dataset::SequenceDataset;

pub const SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const NUM_BALLS: usize = 2;

pub const PALETTE: [[u8; 3]; 6] =
    [[255, 0, 0], [0, 255, 0], [0, 0, 255], [255, 255, 0], [255, 0, 255], [0, 255, 255]];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ball {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub color: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BallWorld {
    pub balls: Vec<Ball>,
    pub radius: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Per-component velocity noise standard deviation.
    pub noise_std: f64,
}

impl BallWorld {
    pub const RADIUS: f64 = 0.11;
    pub const MEAN_SPEED: f64 = 0.035;
    pub const V_MIN: f64 = 0.02;
    pub const V_MAX: f64 = 0.05;

    /// Random placement, direction and colours; speed starts at the mean.
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let r = Self::RADIUS;
        let balls = (0..NUM_BALLS)
            .map(|_| {
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                Ball {
                    pos: [rng.gen_range(r..1.0 - r), rng.gen_range(r..1.0 - r)],
                    vel: [Self::MEAN_SPEED * angle.cos(), Self::MEAN_SPEED * angle.sin()],
                    color: rng.gen_range(0..PALETTE.len()),
                }
            })
            .collect();
        Self { balls, radius: r, v_min: Self::V_MIN, v_max: Self::V_MAX, noise_std: 0.03 * Self::MEAN_SPEED }
    }

    /// Moves every ball one step and reflects it off the walls. Returns which
    /// balls touched a wall. Velocity noise and recolouring are applied by
    /// [`BallWorld::step`].
    pub fn advance(&mut self) -> Vec<bool> {
        let (lo, hi) = (self.radius, 1.0 - self.radius);
        self.balls
            .iter_mut()
            .map(|b| {
                let mut hit = false;
                for k in 0..2 {
                    b.pos[k] += b.vel[k];
                    if b.pos[k] < lo {
                        b.pos[k] = 2.0 * lo - b.pos[k];
                        b.vel[k] = -b.vel[k];
                        hit = true;
                    } else if b.pos[k] > hi {
                        b.pos[k] = 2.0 * hi - b.pos[k];
                        b.vel[k] = -b.vel[k];
                        hit = true;
                    }
                    b.pos[k] = b.pos[k].clamp(lo, hi);
                }
                hit
            })
            .collect()
    }

    /// Adds velocity noise and clamps the speed into `[v_min, v_max]`.
    pub fn perturb(&mut self, noise: &[[f64; 2]]) {
        for (b, n) in self.balls.iter_mut().zip(noise) {
            b.vel[0] += n[0];
            b.vel[1] += n[1];
            let speed = b.vel[0].hypot(b.vel[1]);
            let target = speed.clamp(self.v_min, self.v_max);
            if speed > 0.0 {
                b.vel = [b.vel[0] * target / speed, b.vel[1] * target / speed];
            } else {
                b.vel = [target, 0.0];
            }
        }
    }

    /// One simulation step; returns whether any ball hit a wall (and changed colour).
    pub fn step<R: Rng>(&mut self, rng: &mut R) -> bool {
        let hits = self.advance();
        let normal = Normal::new(0.0, self.noise_std).expect("valid std");
        let noise: Vec<[f64; 2]> = (0..self.balls.len()).map(|_| [normal.sample(rng), normal.sample(rng)]).collect();
        self.perturb(&noise);
        for (b, &hit) in self.balls.iter_mut().zip(&hits) {
            if hit {
                let shift = rng.gen_range(1..PALETTE.len());
                b.color = (b.color + shift) % PALETTE.len();
            }
        }
        hits.iter().any(|&h| h)
    }

    /// Hard discs on black; overlapping balls combine by channel maximum.
    pub fn render(&self) -> Vec<u8> {
        let mut frame = vec![0u8; SIDE * SIDE * CHANNELS];
        let r2 = (self.radius * SIDE as f64).powi(2);
        for b in &self.balls {
            let (cx, cy) = (b.pos[0] * SIDE as f64, b.pos[1] * SIDE as f64);
            let color = PALETTE[b.color];
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    if px * px + py * py <= r2 {
                        let o = (y * SIDE + x) * CHANNELS;
                        for c in 0..CHANNELS {
                            frame[o + c] = frame[o + c].max(color[c]);
                        }
                    }
                }
            }
        }
        frame
    }
}

/// Renders `count` sequences of `steps` frames. Sequence `i` uses its own
/// random stream derived from `(seed, i)`.
pub fn gen_balls(count: usize, steps: usize, seed: u64) -> SequenceDataset {
    let frame_len = SIDE * SIDE * CHANNELS;
    let mut frames = Vec::with_capacity(count * steps * frame_len);
    let mut events = Vec::with_capacity(count * steps);
    for i in 0..count {
        let mut rng = sequence_rng(seed, i as u64);
        let mut world = BallWorld::random(&mut rng);
        for t in 0..steps {
            let event = t > 0 && world.step(&mut rng);
            frames.extend_from_slice(&world.render());
            events.push(event as u8);
        }
    }
    SequenceDataset {
        count,
        steps,
        height: SIDE,
        width: SIDE,
        channels: CHANNELS,
        frames,
        actions: None,
        goals: None,
        events: Some(events),
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn one_ball(pos: [f64; 2], vel: [f64; 2]) -> BallWorld {
        let mut w = BallWorld::random(&mut ChaCha8Rng::seed_from_u64(0));
        w.balls.truncate(1);
        w.balls[0].pos = pos;
        w.balls[0].vel = vel;
        w
    }

    #[test]
    fn no_contact_keeps_colour() {
        let mut w = one_ball([0.5, 0.5], [0.03, 0.0]);
        let c = w.balls[0].color;
        assert!(!w.step(&mut ChaCha8Rng::seed_from_u64(1)));
        assert_eq!(w.balls[0].color, c);
    }

    #[test]
    fn wall_contact_flips_normal_component_and_recolours() {
        let mut w = one_ball([1.0 - BallWorld::RADIUS - 0.01, 0.5], [0.03, 0.02]);
        let hits = w.advance();
        assert_eq!(hits, vec![true]);
        assert_eq!(w.balls[0].vel, [-0.03, 0.02]);
        let mut w = one_ball([1.0 - BallWorld::RADIUS - 0.01, 0.5], [0.03, 0.02]);
        let c = w.balls[0].color;
        assert!(w.step(&mut ChaCha8Rng::seed_from_u64(2)));
        assert_ne!(w.balls[0].color, c);
        assert!(w.balls[0].vel[0] < 0.0);
    }

    #[test]
    fn frames_and_events_have_the_right_shape() {
        let ds = gen_balls(3, 20, 7);
        assert_eq!(ds.frames.len(), 3 * 20 * 32 * 32 * 3);
        assert_eq!(ds.events.as_ref().unwrap().len(), 60);
        assert_eq!(ds, gen_balls(3, 20, 7));
        assert_ne!(ds.frames, gen_balls(3, 20, 8).frames);
    }

    #[test]
    fn event_rate_is_moderate() {
        let rate = gen_balls(200, 20, 1).event_rate().unwrap();
        assert!((0.04..0.2).contains(&rate), "event rate {rate}");
    }

    proptest! {
        #[test]
        fn speed_and_position_stay_bounded(seed in any::<u64>(), steps in 1usize..400) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut w = BallWorld::random(&mut rng);
            for _ in 0..steps {
                w.step(&mut rng);
                for b in &w.balls {
                    let speed = b.vel[0].hypot(b.vel[1]);
                    prop_assert!(speed >= w.v_min - 1e-12 && speed <= w.v_max + 1e-12);
                    prop_assert!(b.pos.iter().all(|&p| p >= w.radius && p <= 1.0 - w.radius));
                }
            }
        }
    }
}
