//! First-person navigation in a coloured grid maze.
//!
//! The map is an ASCII grid: `.` is floor, a digit `0`-`7` is a wall of that
//! colour. The agent stands at a cell centre facing one of four headings and
//! can move forward or turn by 90 degrees. Turns are only possible where the
//! floor is not a straight hallway (junctions, corners and dead ends). Views
//! are rendered by a column raycaster with the camera jittered slightly at
//! every step.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;

use super::sequence_rng;
use crate::dataset::SequenceDataset;
use crate::error::{Error, Result};
use crate::planner::WINDOW;

pub const SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const NUM_ACTIONS: usize = 3;
pub const FOV_DEGREES: f64 = 66.0;
pub const JITTER_DEGREES: f64 = 4.0;
pub const JITTER_LATERAL: f64 = 0.05;

pub const DEFAULT_MAP: &str = include_str!("../../maps/default.txt");

pub const WALL_PALETTE: [[u8; 3]; 8] = [
    [200, 40, 40],
    [40, 180, 60],
    [50, 80, 220],
    [220, 200, 40],
    [190, 60, 190],
    [40, 190, 200],
    [240, 130, 30],
    [230, 230, 230],
];
pub const FLOOR: [u8; 3] = [100, 100, 100];
pub const CEILING: [u8; 3] = [30, 30, 45];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    /// Cell offset; rows grow southwards.
    pub fn delta(self) -> (i64, i64) {
        match self {
            Heading::North => (0, -1),
            Heading::East => (1, 0),
            Heading::South => (0, 1),
            Heading::West => (-1, 0),
        }
    }

    pub fn left(self) -> Self {
        match self {
            Heading::North => Heading::West,
            Heading::West => Heading::South,
            Heading::South => Heading::East,
            Heading::East => Heading::North,
        }
    }

    pub fn right(self) -> Self {
        self.left().left().left()
    }

    pub fn angle(self) -> f64 {
        use std::f64::consts::FRAC_PI_2;
        match self {
            Heading::East => 0.0,
            Heading::South => FRAC_PI_2,
            Heading::West => 2.0 * FRAC_PI_2,
            Heading::North => -FRAC_PI_2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Forward = 0,
    Left = 1,
    Right = 2,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Forward, Action::Left, Action::Right];

    pub fn from_id(id: u32) -> Result<Self> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("action id {id} out of range")))
    }

    pub fn id(self) -> u32 {
        self as u32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MazeMap {
    pub width: usize,
    pub height: usize,
    /// `None` for floor, wall colour otherwise.
    cells: Vec<Option<u8>>,
    segments: Vec<Option<usize>>,
}

impl MazeMap {
    pub fn parse(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().map(str::trim_end).filter(|l| !l.is_empty()).collect();
        let height = rows.len();
        let width = rows.first().map(|r| r.len()).unwrap_or(0);
        if height < 3 || width < 3 {
            return Err(Error::Map("map must be at least 3x3".into()));
        }
        let mut cells = Vec::with_capacity(width * height);
        for (y, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::Map(format!("row {y} has {} cells, expected {width}", row.len())));
            }
            for (x, ch) in row.chars().enumerate() {
                cells.push(match ch {
                    '.' => None,
                    '0'..='7' => Some(ch as u8 - b'0'),
                    _ => return Err(Error::Map(format!("unknown map character {ch:?} at ({x}, {y})"))),
                });
            }
        }
        let mut map = Self { width, height, cells, segments: Vec::new() };
        map.validate()?;
        map.segments = map.compute_segments();
        Ok(map)
    }

    pub fn default_map() -> Self {
        Self::parse(DEFAULT_MAP).expect("bundled map is valid")
    }

    fn validate(&self) -> Result<()> {
        for y in 0..self.height {
            for x in 0..self.width {
                let border = x == 0 || y == 0 || x + 1 == self.width || y + 1 == self.height;
                if border && self.is_open(x as i64, y as i64) {
                    return Err(Error::Map(format!("border cell ({x}, {y}) must be a wall")));
                }
            }
        }
        let open = self.open_cells();
        let Some(&start) = open.first() else {
            return Err(Error::Map("map has no floor".into()));
        };
        let dist = self.distances(start);
        if let Some(&(x, y)) = open.iter().find(|&&(x, y)| dist[y * self.width + x].is_none()) {
            return Err(Error::Map(format!("cell ({x}, {y}) is unreachable")));
        }
        Ok(())
    }

    pub fn is_open(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.cells[y as usize * self.width + x as usize].is_none()
    }

    pub fn wall_color(&self, x: i64, y: i64) -> Option<u8> {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return Some(0);
        }
        self.cells[y as usize * self.width + x as usize]
    }

    pub fn open_cells(&self) -> Vec<(usize, usize)> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .filter(|&(x, y)| self.is_open(x as i64, y as i64))
            .collect()
    }

    pub fn open_headings(&self, x: usize, y: usize) -> Vec<Heading> {
        Heading::ALL
            .into_iter()
            .filter(|h| {
                let (dx, dy) = h.delta();
                self.is_open(x as i64 + dx, y as i64 + dy)
            })
            .collect()
    }

    /// A straight hallway cell has exactly two open neighbours on opposite sides.
    pub fn is_straight(&self, x: usize, y: usize) -> bool {
        let open = self.open_headings(x, y);
        open.len() == 2 && open[0].left().left() == open[1]
    }

    pub fn turn_allowed(&self, x: usize, y: usize) -> bool {
        self.is_open(x as i64, y as i64) && !self.is_straight(x, y)
    }

    /// Hallway segment of an open cell: connected runs of straight cells
    /// share an id, every other open cell is its own segment.
    pub fn segment(&self, x: usize, y: usize) -> Option<usize> {
        self.segments.get(y * self.width + x).copied().flatten()
    }

    fn compute_segments(&self) -> Vec<Option<usize>> {
        let mut seg = vec![None; self.cells.len()];
        let mut next = 0;
        for (x, y) in self.open_cells() {
            if seg[y * self.width + x].is_some() {
                continue;
            }
            seg[y * self.width + x] = Some(next);
            if self.is_straight(x, y) {
                let mut stack = vec![(x, y)];
                while let Some((cx, cy)) = stack.pop() {
                    for h in self.open_headings(cx, cy) {
                        let (dx, dy) = h.delta();
                        let (nx, ny) = ((cx as i64 + dx) as usize, (cy as i64 + dy) as usize);
                        if self.is_straight(nx, ny) && seg[ny * self.width + nx].is_none() {
                            seg[ny * self.width + nx] = Some(next);
                            stack.push((nx, ny));
                        }
                    }
                }
            }
            next += 1;
        }
        seg
    }

    /// Shortest-path lengths in cells from `from` to every open cell.
    pub fn distances(&self, from: (usize, usize)) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.cells.len()];
        dist[from.1 * self.width + from.0] = Some(0);
        let mut queue = VecDeque::from([from]);
        while let Some((x, y)) = queue.pop_front() {
            let d = dist[y * self.width + x].unwrap();
            for h in self.open_headings(x, y) {
                let (dx, dy) = h.delta();
                let (nx, ny) = ((x as i64 + dx) as usize, (y as i64 + dy) as usize);
                if dist[ny * self.width + nx].is_none() {
                    dist[ny * self.width + nx] = Some(d + 1);
                    queue.push_back((nx, ny));
                }
            }
        }
        dist
    }

    /// Colours of the 3x3 cells centred on `(x, y)`, row-major, floor included.
    pub fn window(&self, x: usize, y: usize) -> Vec<u8> {
        let half = (WINDOW / 2) as i64;
        let mut out = Vec::with_capacity(WINDOW * WINDOW * CHANNELS);
        for dy in -half..=half {
            for dx in -half..=half {
                let c = match self.wall_color(x as i64 + dx, y as i64 + dy) {
                    Some(k) => WALL_PALETTE[k as usize],
                    None => FLOOR,
                };
                out.extend_from_slice(&c);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: usize,
    pub y: usize,
    pub heading: Heading,
    /// Heading offset in radians.
    pub jitter_angle: f64,
    /// Sideways camera offset in cells.
    pub jitter_lateral: f64,
}

impl Pose {
    pub fn new(x: usize, y: usize, heading: Heading) -> Self {
        Self { x, y, heading, jitter_angle: 0.0, jitter_lateral: 0.0 }
    }

    pub fn cell(&self) -> (usize, usize) {
        (self.x, self.y)
    }
}

#[derive(Debug, Clone)]
pub struct MazeWorld {
    pub map: MazeMap,
    pub pose: Pose,
}

impl MazeWorld {
    pub fn new(map: MazeMap, pose: Pose) -> Result<Self> {
        if !map.is_open(pose.x as i64, pose.y as i64) {
            return Err(Error::InvalidArgument(format!("pose ({}, {}) is inside a wall", pose.x, pose.y)));
        }
        Ok(Self { map, pose })
    }

    /// Random open cell, facing a random open direction.
    pub fn spawn<R: Rng>(map: MazeMap, rng: &mut R) -> Self {
        let cells = map.open_cells();
        let &(x, y) = cells.choose(rng).expect("map has floor");
        let heading = *map.open_headings(x, y).choose(rng).expect("connected map");
        let mut world = Self { map, pose: Pose::new(x, y, heading) };
        world.resample_jitter(rng);
        world
    }

    fn ahead_open(&self) -> bool {
        let (dx, dy) = self.pose.heading.delta();
        self.map.is_open(self.pose.x as i64 + dx, self.pose.y as i64 + dy)
    }

    /// Actions that change the pose.
    pub fn valid_actions(&self) -> Vec<Action> {
        let mut out = Vec::with_capacity(3);
        if self.ahead_open() {
            out.push(Action::Forward);
        }
        if self.map.turn_allowed(self.pose.x, self.pose.y) {
            out.extend([Action::Left, Action::Right]);
        }
        out
    }

    /// Applies an action without touching the jitter; returns whether the pose changed.
    pub fn apply(&mut self, action: Action) -> bool {
        match action {
            Action::Forward => {
                if !self.ahead_open() {
                    return false;
                }
                let (dx, dy) = self.pose.heading.delta();
                self.pose.x = (self.pose.x as i64 + dx) as usize;
                self.pose.y = (self.pose.y as i64 + dy) as usize;
            }
            Action::Left | Action::Right => {
                if !self.map.turn_allowed(self.pose.x, self.pose.y) {
                    return false;
                }
                self.pose.heading =
                    if action == Action::Left { self.pose.heading.left() } else { self.pose.heading.right() };
            }
        }
        true
    }

    pub fn resample_jitter<R: Rng>(&mut self, rng: &mut R) {
        let a = JITTER_DEGREES.to_radians();
        self.pose.jitter_angle = rng.gen_range(-a..=a);
        self.pose.jitter_lateral = rng.gen_range(-JITTER_LATERAL..=JITTER_LATERAL);
    }

    /// Applies the action, then re-jitters the camera.
    pub fn step<R: Rng>(&mut self, action: Action, rng: &mut R) -> bool {
        let changed = self.apply(action);
        self.resample_jitter(rng);
        changed
    }

    pub fn render(&self) -> Vec<u8> {
        render(&self.map, &self.pose)
    }
}

/// Column raycaster: one ray per image column, wall slices scaled by
/// inverse perpendicular distance and darkened with distance.
pub fn render(map: &MazeMap, pose: &Pose) -> Vec<u8> {
    let angle = pose.heading.angle() + pose.jitter_angle;
    let (dir_x, dir_y) = (angle.cos(), angle.sin());
    let (side_x, side_y) = (-dir_y, dir_x);
    let px = pose.x as f64 + 0.5 + side_x * pose.jitter_lateral;
    let py = pose.y as f64 + 0.5 + side_y * pose.jitter_lateral;
    let half_fov = (FOV_DEGREES / 2.0).to_radians().tan();
    let mut frame = vec![0u8; SIDE * SIDE * CHANNELS];
    let mid = SIDE as f64 / 2.0;
    for col in 0..SIDE {
        let cam = 2.0 * (col as f64 + 0.5) / SIDE as f64 - 1.0;
        let (rx, ry) = (dir_x + side_x * cam * half_fov, dir_y + side_y * cam * half_fov);
        let (dist, color, y_side) = cast(map, px, py, rx, ry);
        let shade = (1.0 / (1.0 + 0.25 * dist)) * if y_side { 0.75 } else { 1.0 };
        let height = SIDE as f64 / dist.max(1e-3);
        let (top, bottom) = (mid - height / 2.0, mid + height / 2.0);
        for row in 0..SIDE {
            let yc = row as f64 + 0.5;
            let rgb: [u8; 3] = if yc >= top && yc < bottom {
                let c = WALL_PALETTE[color as usize];
                [0, 1, 2].map(|k| (c[k] as f64 * shade).round() as u8)
            } else if yc < mid {
                CEILING
            } else {
                let depth = (yc - mid) / mid;
                FLOOR.map(|v| (v as f64 * (0.4 + 0.6 * depth)).round() as u8)
            };
            let o = (row * SIDE + col) * CHANNELS;
            frame[o..o + CHANNELS].copy_from_slice(&rgb);
        }
    }
    frame
}

/// DDA grid traversal; returns perpendicular distance, wall colour and
/// whether the hit face is horizontal (a north/south face).
fn cast(map: &MazeMap, px: f64, py: f64, rx: f64, ry: f64) -> (f64, u8, bool) {
    let (mut cx, mut cy) = (px.floor() as i64, py.floor() as i64);
    let ddx = if rx == 0.0 { f64::INFINITY } else { (1.0 / rx).abs() };
    let ddy = if ry == 0.0 { f64::INFINITY } else { (1.0 / ry).abs() };
    let (step_x, mut tx) = if rx < 0.0 { (-1, (px - cx as f64) * ddx) } else { (1, (cx as f64 + 1.0 - px) * ddx) };
    let (step_y, mut ty) = if ry < 0.0 { (-1, (py - cy as f64) * ddy) } else { (1, (cy as f64 + 1.0 - py) * ddy) };
    for _ in 0..4 * (map.width + map.height) {
        let y_side = ty < tx;
        if y_side {
            cy += step_y;
            ty += ddy;
        } else {
            cx += step_x;
            tx += ddx;
        }
        if let Some(color) = map.wall_color(cx, cy) {
            let dist = if y_side { ty - ddy } else { tx - ddx };
            return (dist, color, y_side);
        }
    }
    (f64::INFINITY, 0, false)
}

/// A recorded random walk.
#[derive(Debug, Clone)]
pub struct Walk {
    pub poses: Vec<Pose>,
    /// `actions[t]` produced the pose of step `t`.
    pub actions: Vec<Action>,
    pub frames: Vec<u8>,
    pub windows: Vec<u8>,
    pub events: Vec<u8>,
}

/// Event flags recomputed from a pose log: 1 where the cell's hallway
/// segment differs from the previous step's.
pub fn events_from_poses(map: &MazeMap, poses: &[Pose]) -> Vec<u8> {
    (0..poses.len())
        .map(|t| {
            if t == 0 {
                return 0;
            }
            let seg = |p: &Pose| map.segment(p.x, p.y);
            (seg(&poses[t]) != seg(&poses[t - 1])) as u8
        })
        .collect()
}

/// Random walk choosing uniformly among the actions that change the pose.
pub fn random_walk<R: Rng>(map: &MazeMap, steps: usize, rng: &mut R) -> Walk {
    let mut world = MazeWorld::spawn(map.clone(), rng);
    let mut walk = Walk {
        poses: Vec::with_capacity(steps),
        actions: Vec::with_capacity(steps),
        frames: Vec::with_capacity(steps * SIDE * SIDE * CHANNELS),
        windows: Vec::with_capacity(steps * WINDOW * WINDOW * CHANNELS),
        events: Vec::new(),
    };
    for _ in 0..steps {
        let action = *world.valid_actions().choose(rng).expect("every open cell has a valid action");
        world.step(action, rng);
        walk.actions.push(action);
        walk.poses.push(world.pose);
        walk.frames.extend_from_slice(&world.render());
        walk.windows.extend_from_slice(&world.map.window(world.pose.x, world.pose.y));
    }
    walk.events = events_from_poses(map, &walk.poses);
    walk
}

/// `count` random walks of `steps` frames on `map`.
pub fn gen_maze(map: &MazeMap, count: usize, steps: usize, seed: u64) -> SequenceDataset {
    let mut ds = SequenceDataset {
        count,
        steps,
        height: SIDE,
        width: SIDE,
        channels: CHANNELS,
        frames: Vec::with_capacity(count * steps * SIDE * SIDE * CHANNELS),
        actions: Some(Vec::with_capacity(count * steps)),
        goals: Some(Vec::with_capacity(count * steps * WINDOW * WINDOW * CHANNELS)),
        events: Some(Vec::with_capacity(count * steps)),
    };
    for i in 0..count {
        let walk = random_walk(map, steps, &mut sequence_rng(seed, i as u64));
        ds.frames.extend_from_slice(&walk.frames);
        ds.actions.as_mut().unwrap().extend(walk.actions.iter().map(|&a| a as u8));
        ds.goals.as_mut().unwrap().extend_from_slice(&walk.windows);
        ds.events.as_mut().unwrap().extend_from_slice(&walk.events);
    }
    ds
}

/// A navigation task: start pose and goal cell.
#[derive(Debug, Clone)]
pub struct Episode {
    pub world: MazeWorld,
    pub goal: (usize, usize),
}

impl Episode {
    /// Start anywhere; goal uniformly among cells whose shortest-path
    /// distance from the start lies in `[min_dist, max_dist]`.
    pub fn sample(map: &MazeMap, seed: u64, min_dist: usize, max_dist: usize) -> Result<Self> {
        let mut rng = sequence_rng(seed, u64::MAX);
        for _ in 0..100 {
            let world = MazeWorld::spawn(map.clone(), &mut rng);
            let dist = map.distances(world.pose.cell());
            let goals: Vec<(usize, usize)> = map
                .open_cells()
                .into_iter()
                .filter(|&(x, y)| dist[y * map.width + x].is_some_and(|d| (min_dist..=max_dist).contains(&d)))
                .collect();
            if let Some(&goal) = goals.choose(&mut rng) {
                return Ok(Self { world, goal });
            }
        }
        Err(Error::Map(format!("no goal at distance {min_dist}..={max_dist}")))
    }

    pub fn at_goal(&self) -> bool {
        self.world.pose.cell() == self.goal
    }

    pub fn goal_window(&self) -> Vec<u8> {
        self.world.map.window(self.goal.0, self.goal.1)
    }
}
