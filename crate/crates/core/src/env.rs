//! GhostRun: a bounded gridworld where agents with square local views try to
//! keep randomly walking ghosts out of sight. Trees and obstacles are static;
//! obstacles and the grid edge block movement.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("grid of {cells} cells cannot hold {entities} entities")]
    Overfull { cells: usize, entities: usize },
    #[error("invalid grid config: {0}")]
    InvalidConfig(String),
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("agent index {index} out of range for {agents} agents")]
    AgentIndex { index: usize, agents: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub grid_size: usize,
    pub n_agents: usize,
    pub n_ghosts: usize,
    pub n_trees: usize,
    pub n_obstacles: usize,
    pub view_radius: usize,
    pub episode_length: usize,
    pub ghost_penalty: f64,
    pub step_cost: f64,
    pub seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            grid_size: 16,
            n_agents: 2,
            n_ghosts: 8,
            n_trees: 6,
            n_obstacles: 6,
            view_radius: 2,
            episode_length: 100,
            ghost_penalty: 1.0,
            step_cost: 1.0,
            seed: 0,
        }
    }
}

impl GridConfig {
    pub fn entity_count(&self) -> usize {
        self.n_agents + self.n_ghosts + self.n_trees + self.n_obstacles
    }

    pub fn window(&self) -> usize {
        2 * self.view_radius + 1
    }

    pub fn observation_len(&self) -> usize {
        4 * self.window() * self.window()
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidConfig(m.to_string()));
        if self.grid_size == 0 {
            return bad("grid_size must be positive");
        }
        if self.n_agents == 0 {
            return bad("n_agents must be positive");
        }
        if self.view_radius == 0 {
            return bad("view_radius must be positive");
        }
        if self.episode_length == 0 {
            return bad("episode_length must be positive");
        }
        if !(self.ghost_penalty > 0.0) || !(self.step_cost >= 0.0) {
            return bad("ghost_penalty must be positive and step_cost nonnegative");
        }
        let cells = self.grid_size * self.grid_size;
        if self.entity_count() > cells {
            return Err(EnvError::Overfull { cells, entities: self.entity_count() });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub row: usize,
    pub col: usize,
}

impl Pos {
    pub fn new(row: usize, col: usize) -> Self {
        Pos { row, col }
    }

    pub fn chebyshev(self, other: Pos) -> usize {
        self.row.abs_diff(other.row).max(self.col.abs_diff(other.col))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Action {
    pub const ALL: [Action; 5] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Stay];
    pub const COUNT: usize = 5;

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnvState {
    pub agents: Vec<Pos>,
    pub ghosts: Vec<Pos>,
    pub trees: Vec<Pos>,
    pub obstacles: Vec<Pos>,
    pub step: usize,
}

/// Flattened `[ghosts, trees, obstacles, other agents]` planes of the
/// agent-centred window, row-major, zero outside the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Sum of one channel (0 ghosts, 1 trees, 2 obstacles, 3 other agents).
    pub fn channel_sum(&self, channel: usize) -> f64 {
        let plane = self.0.len() / 4;
        self.0[channel * plane..(channel + 1) * plane].iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
    pub observations: Vec<Observation>,
}

/// Places every entity on a distinct uniformly random cell.
pub fn reset<R: Rng + ?Sized>(config: &GridConfig, rng: &mut R) -> Result<(EnvState, Vec<Observation>), EnvError> {
    config.validate()?;
    let n = config.grid_size;
    let mut cells: Vec<usize> = (0..n * n).collect();
    let total = config.entity_count();
    for i in 0..total {
        let j = rng.random_range(i..cells.len());
        cells.swap(i, j);
    }
    let mut picked = cells[..total].iter().map(|&c| Pos::new(c / n, c % n));
    let mut take = |k: usize| picked.by_ref().take(k).collect::<Vec<_>>();
    let obstacles = take(config.n_obstacles);
    let trees = take(config.n_trees);
    let ghosts = take(config.n_ghosts);
    let agents = take(config.n_agents);
    let state = EnvState { agents, ghosts, trees, obstacles, step: 0 };
    let obs = observe_all(config, &state);
    Ok((state, obs))
}

fn moved(config: &GridConfig, state: &EnvState, from: Pos, action: Action) -> Pos {
    let n = config.grid_size;
    let target = match action {
        Action::Up if from.row > 0 => Pos::new(from.row - 1, from.col),
        Action::Down if from.row + 1 < n => Pos::new(from.row + 1, from.col),
        Action::Left if from.col > 0 => Pos::new(from.row, from.col - 1),
        Action::Right if from.col + 1 < n => Pos::new(from.row, from.col + 1),
        _ => from,
    };
    if state.obstacles.contains(&target) {
        from
    } else {
        target
    }
}

/// Moves agents, then ghosts (one uniform draw from five moves each, in
/// ghost order), then scores the new state.
pub fn step<R: Rng + ?Sized>(
    config: &GridConfig,
    state: &mut EnvState,
    actions: &[Action],
    rng: &mut R,
) -> Result<StepOutcome, EnvError> {
    if actions.len() != state.agents.len() {
        return Err(EnvError::ActionCount { expected: state.agents.len(), got: actions.len() });
    }
    for i in 0..state.agents.len() {
        state.agents[i] = moved(config, state, state.agents[i], actions[i]);
    }
    for i in 0..state.ghosts.len() {
        let a = Action::ALL[rng.random_range(0..Action::COUNT)];
        state.ghosts[i] = moved(config, state, state.ghosts[i], a);
    }
    state.step += 1;
    Ok(StepOutcome {
        reward: reward_of(config, state),
        done: state.step >= config.episode_length,
        observations: observe_all(config, state),
    })
}

/// Ghosts inside each agent's view window.
pub fn visible_ghosts(config: &GridConfig, state: &EnvState) -> Vec<usize> {
    state
        .agents
        .iter()
        .map(|&a| state.ghosts.iter().filter(|&&g| a.chebyshev(g) <= config.view_radius).count())
        .collect()
}

/// Shared team reward for a given set of per-agent visible-ghost counts.
pub fn reward_from_counts(config: &GridConfig, counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    -config.ghost_penalty * total as f64 - config.step_cost
}

pub fn reward_of(config: &GridConfig, state: &EnvState) -> f64 {
    reward_from_counts(config, &visible_ghosts(config, state))
}

pub fn observe(config: &GridConfig, state: &EnvState, agent: usize) -> Result<Observation, EnvError> {
    if agent >= state.agents.len() {
        return Err(EnvError::AgentIndex { index: agent, agents: state.agents.len() });
    }
    let r = config.view_radius as i64;
    let w = config.window();
    let plane = w * w;
    let centre = state.agents[agent];
    let mut data = vec![0.0; 4 * plane];
    let mut mark = |channel: usize, p: Pos| {
        let dr = p.row as i64 - centre.row as i64;
        let dc = p.col as i64 - centre.col as i64;
        if dr.abs() <= r && dc.abs() <= r {
            let idx = (dr + r) as usize * w + (dc + r) as usize;
            data[channel * plane + idx] += 1.0;
        }
    };
    state.ghosts.iter().for_each(|&p| mark(0, p));
    state.trees.iter().for_each(|&p| mark(1, p));
    state.obstacles.iter().for_each(|&p| mark(2, p));
    for (j, &p) in state.agents.iter().enumerate() {
        if j != agent {
            mark(3, p);
        }
    }
    Ok(Observation(data))
}

pub fn observe_all(config: &GridConfig, state: &EnvState) -> Vec<Observation> {
    (0..state.agents.len()).map(|i| observe(config, state, i).expect("index in range")).collect()
}

/// Environment instance owning its state and random stream.
pub struct GhostRun<R: Rng> {
    pub config: GridConfig,
    pub state: EnvState,
    rng: R,
}

impl<R: Rng> GhostRun<R> {
    pub fn new(config: GridConfig, mut rng: R) -> Result<(Self, Vec<Observation>), EnvError> {
        let (state, obs) = reset(&config, &mut rng)?;
        Ok((GhostRun { config, state, rng }, obs))
    }

    pub fn reset(&mut self) -> Result<Vec<Observation>, EnvError> {
        let (state, obs) = reset(&self.config, &mut self.rng)?;
        self.state = state;
        Ok(obs)
    }

    pub fn step(&mut self, actions: &[Action]) -> Result<StepOutcome, EnvError> {
        step(&self.config, &mut self.state, actions, &mut self.rng)
    }

    pub fn observations(&self) -> Vec<Observation> {
        observe_all(&self.config, &self.state)
    }
}

fn join_positions(ps: &[Pos]) -> String {
    ps.iter().map(|p| format!("{}:{}", p.row, p.col)).collect::<Vec<_>>().join(";")
}

/// Per-step CSV trajectory dump.
pub struct TrajectoryWriter<W: Write> {
    out: W,
}

impl<W: Write> TrajectoryWriter<W> {
    pub const HEADER: &'static str = "step,agent_positions,ghost_positions,reward";

    pub fn new(mut out: W) -> Result<Self, EnvError> {
        writeln!(out, "{}", Self::HEADER)?;
        Ok(TrajectoryWriter { out })
    }

    pub fn record(&mut self, state: &EnvState, reward: f64) -> Result<(), EnvError> {
        writeln!(
            self.out,
            "{},{},{},{}",
            state.step,
            join_positions(&state.agents),
            join_positions(&state.ghosts),
            reward
        )?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
