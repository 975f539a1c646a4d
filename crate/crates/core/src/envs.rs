//! Deterministic episodic gridworlds with exact tabular oracles.
//!
//! States are cells on a rectangular grid; moving into a wall or obstacle
//! leaves the position unchanged. The goal cell is absorbing. Episodes
//! truncate at `max_episode_steps` and truncation is reported as a
//! terminal transition. Features are one-hot over cells so the
//! approximator, not perception, is under test.

use crate::error::{Error, Result};

pub const NUM_ACTIONS: usize = 4;

/// Layout of the built-in environment: 6x6, four obstacles, start in the
/// top-left corner, goal in the bottom-right.
pub const DEFAULT_6X6_LAYOUT: &str = "S.....\n.###..\n......\n....#.\n......\n.....G\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        match self {
            Action::Up => 0,
            Action::Down => 1,
            Action::Left => 2,
            Action::Right => 3,
        }
    }

    pub fn from_index(i: usize) -> Result<Action> {
        Action::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("action index {i} out of range")))
    }
}

/// One environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub s: Vec<f64>,
    pub a: usize,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridWorld {
    width: usize,
    height: usize,
    start: Cell,
    goal: Cell,
    obstacles: Vec<bool>, // row-major occupancy
    pub step_reward: f64,
    pub goal_reward: f64,
    pub max_episode_steps: u32,
}

/// Agent position plus episode bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridState {
    pub pos: Cell,
    pub steps: u32,
    pub terminal: bool,
}

impl GridWorld {
    pub fn new(
        width: usize,
        height: usize,
        start: Cell,
        goal: Cell,
        obstacles: &[Cell],
        step_reward: f64,
        goal_reward: f64,
        max_episode_steps: u32,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidGrid("grid must be non-empty".into()));
        }
        let inside = |c: &Cell| c.x < width && c.y < height;
        if !inside(&start) || !inside(&goal) {
            return Err(Error::InvalidGrid("start/goal outside the grid".into()));
        }
        if start == goal {
            return Err(Error::InvalidGrid("start must differ from goal".into()));
        }
        let mut occ = vec![false; width * height];
        for c in obstacles {
            if !inside(c) {
                return Err(Error::InvalidGrid(format!(
                    "obstacle ({}, {}) outside the grid",
                    c.x, c.y
                )));
            }
            occ[c.y * width + c.x] = true;
        }
        if occ[start.y * width + start.x] || occ[goal.y * width + goal.x] {
            return Err(Error::InvalidGrid("start/goal inside an obstacle".into()));
        }
        if max_episode_steps == 0 {
            return Err(Error::InvalidGrid("max_episode_steps must be positive".into()));
        }
        Ok(Self {
            width,
            height,
            start,
            goal,
            obstacles: occ,
            step_reward,
            goal_reward,
            max_episode_steps,
        })
    }

    /// Parses a layout text: `.` empty, `#` obstacle, `S` start, `G`
    /// goal, one row per line. Rewards and the episode cap come from the
    /// remaining arguments.
    pub fn from_text(
        text: &str,
        step_reward: f64,
        goal_reward: f64,
        max_episode_steps: u32,
    ) -> Result<Self> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if rows.is_empty() {
            return Err(Error::InvalidGrid("empty grid file".into()));
        }
        let width = rows[0].chars().count();
        let mut start = None;
        let mut goal = None;
        let mut obstacles = Vec::new();
        for (y, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::InvalidGrid(format!("ragged row {y}")));
            }
            for (x, ch) in row.chars().enumerate() {
                match ch {
                    '.' => {}
                    '#' => obstacles.push(Cell { x, y }),
                    'S' => {
                        if start.replace(Cell { x, y }).is_some() {
                            return Err(Error::InvalidGrid("multiple start cells".into()));
                        }
                    }
                    'G' => {
                        if goal.replace(Cell { x, y }).is_some() {
                            return Err(Error::InvalidGrid("multiple goal cells".into()));
                        }
                    }
                    other => {
                        return Err(Error::InvalidGrid(format!("unknown cell character {other:?}")))
                    }
                }
            }
        }
        let start = start.ok_or_else(|| Error::InvalidGrid("no start cell".into()))?;
        let goal = goal.ok_or_else(|| Error::InvalidGrid("no goal cell".into()))?;
        Self::new(
            width,
            rows.len(),
            start,
            goal,
            &obstacles,
            step_reward,
            goal_reward,
            max_episode_steps,
        )
    }

    /// The built-in 6x6 instance used by the default configuration.
    pub fn default_6x6() -> Self {
        Self::from_text(DEFAULT_6X6_LAYOUT, -0.01, 1.0, 200).expect("built-in layout is valid")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn start(&self) -> Cell {
        self.start
    }

    pub fn goal(&self) -> Cell {
        self.goal
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn is_obstacle(&self, c: Cell) -> bool {
        self.obstacles[c.y * self.width + c.x]
    }

    pub fn cell_index(&self, c: Cell) -> usize {
        c.y * self.width + c.x
    }

    /// Fresh episode: agent at the start cell, step counter zero.
    pub fn reset(&self) -> GridState {
        GridState {
            pos: self.start,
            steps: 0,
            terminal: false,
        }
    }

    /// Where a move lands, ignoring episode bookkeeping: walls and
    /// obstacles leave the position unchanged.
    pub fn next_cell(&self, from: Cell, action: Action) -> Cell {
        let (x, y) = (from.x as isize, from.y as isize);
        let (nx, ny) = match action {
            Action::Up => (x, y - 1),
            Action::Down => (x, y + 1),
            Action::Left => (x - 1, y),
            Action::Right => (x + 1, y),
        };
        if nx < 0 || ny < 0 || nx as usize >= self.width || ny as usize >= self.height {
            return from;
        }
        let c = Cell {
            x: nx as usize,
            y: ny as usize,
        };
        if self.is_obstacle(c) {
            from
        } else {
            c
        }
    }

    /// Deterministic transition. Entering the goal pays `goal_reward` and
    /// terminates; every other move pays `step_reward`. Reaching the step
    /// cap also terminates (truncation is reported as terminal).
    pub fn step(&self, state: GridState, action: Action) -> Result<(GridState, f64, bool)> {
        if state.terminal {
            return Err(Error::InvalidTransition(
                "cannot step a terminal state".into(),
            ));
        }
        let pos = self.next_cell(state.pos, action);
        let steps = state.steps + 1;
        let reached_goal = pos == self.goal;
        let reward = if reached_goal {
            self.goal_reward
        } else {
            self.step_reward
        };
        let terminal = reached_goal || steps >= self.max_episode_steps;
        Ok((
            GridState {
                pos,
                steps,
                terminal,
            },
            reward,
            terminal,
        ))
    }

    /// One-hot encoding of the agent position, length `width * height`.
    pub fn features(&self, state: GridState) -> Vec<f64> {
        let mut f = vec![0.0; self.num_cells()];
        f[self.cell_index(state.pos)] = 1.0;
        f
    }

    pub fn features_of_cell(&self, c: Cell) -> Vec<f64> {
        let mut f = vec![0.0; self.num_cells()];
        f[self.cell_index(c)] = 1.0;
        f
    }

    /// Cells an agent starting at `start` can actually occupy.
    pub fn reachable_cells(&self) -> Vec<Cell> {
        let mut seen = vec![false; self.num_cells()];
        let mut queue = std::collections::VecDeque::new();
        seen[self.cell_index(self.start)] = true;
        queue.push_back(self.start);
        let mut out = Vec::new();
        while let Some(c) = queue.pop_front() {
            out.push(c);
            if c == self.goal {
                continue; // absorbing
            }
            for a in Action::ALL {
                let n = self.next_cell(c, a);
                if !seen[self.cell_index(n)] {
                    seen[self.cell_index(n)] = true;
                    queue.push_back(n);
                }
            }
        }
        out
    }
}

/// Exact optimal state-action values, indexed by `(cell, action)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularQ {
    width: usize,
    height: usize,
    q: Vec<f64>, // cell-major, NUM_ACTIONS entries per cell
}

impl TabularQ {
    pub fn get(&self, c: Cell, action: usize) -> f64 {
        self.q[(c.y * self.width + c.x) * NUM_ACTIONS + action]
    }

    pub fn max_over_actions(&self, c: Cell) -> f64 {
        let base = (c.y * self.width + c.x) * NUM_ACTIONS;
        self.q[base..base + NUM_ACTIONS]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Greatest absolute entry, over every cell and action.
    pub fn max_abs(&self) -> f64 {
        self.q.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Dynamic-programming fixed point of the Bellman optimality operator on
/// the grid MDP (Jacobi sweeps). The goal is absorbing with value zero;
/// obstacle cells are unreachable and keep value zero. Episode truncation
/// is a sampling artifact and does not enter the oracle.
pub fn value_iteration(env: &GridWorld, discount: f64, tol: f64) -> TabularQ {
    assert!((0.0..=1.0).contains(&discount), "discount must be in [0, 1]");
    assert!(tol > 0.0, "tolerance must be positive");
    let n = env.num_cells();
    let mut q = vec![0.0; n * NUM_ACTIONS];
    let cells: Vec<Cell> = (0..env.height())
        .flat_map(|y| (0..env.width()).map(move |x| Cell { x, y }))
        .collect();
    loop {
        let mut next = vec![0.0; n * NUM_ACTIONS];
        let mut delta = 0.0f64;
        for &c in &cells {
            if env.is_obstacle(c) || c == env.goal() {
                continue;
            }
            for a in Action::ALL {
                let dest = env.next_cell(c, a);
                let (r, cont) = if dest == env.goal() {
                    (env.goal_reward, 0.0)
                } else {
                    let base = env.cell_index(dest) * NUM_ACTIONS;
                    let best = q[base..base + NUM_ACTIONS]
                        .iter()
                        .cloned()
                        .fold(f64::NEG_INFINITY, f64::max);
                    (env.step_reward, best)
                };
                let idx = env.cell_index(c) * NUM_ACTIONS + a.index();
                next[idx] = r + discount * cont;
                delta = delta.max((next[idx] - q[idx]).abs());
            }
        }
        q = next;
        if delta <= tol {
            break;
        }
    }
    TabularQ {
        width: env.width(),
        height: env.height(),
        q,
    }
}
