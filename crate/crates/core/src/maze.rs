//! Synthetic maze planning environment.
//!
//! A model is prompted with (start, goal, SEP) and must fill the rest of the
//! sequence with a wall-free neighbor-to-neighbor path from start to goal,
//! padding the tail. The reward favors valid paths that keep far from the
//! grid center. Cells are tokenized one token per cell, row-major; the
//! vocabulary is all cells plus SEP and PAD.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{NeuralConfig, NeuralModel, PosteriorModel};
use crate::oracle::RewardFn;
use crate::rng::{StreamDomain, Streams};
use crate::seq::{MaskedSequence, Token, Vocabulary};
use crate::trainer::{sar_rollout, OrderPolicy, RolloutConfig};

/// Grid cell as (row, col).
pub type Cell = (usize, usize);

/// Square grid maze: `true` entries are walls. Border cells are walls; cells
/// with both coordinates odd are always open; remaining walls between two
/// open cells may be opened as doors.
#[derive(Debug, Clone, PartialEq)]
pub struct Maze {
    width: usize,
    walls: Vec<bool>,
    door_fraction: f64,
}

impl Maze {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn door_fraction(&self) -> f64 {
        self.door_fraction
    }

    #[inline]
    pub fn is_wall(&self, cell: Cell) -> bool {
        self.walls[cell.0 * self.width + cell.1]
    }

    #[inline]
    pub fn is_open(&self, cell: Cell) -> bool {
        !self.is_wall(cell)
    }

    pub fn cell_id(&self, cell: Cell) -> usize {
        cell.0 * self.width + cell.1
    }

    pub fn cell_at(&self, id: usize) -> Cell {
        (id / self.width, id % self.width)
    }

    pub fn open_cells(&self) -> Vec<Cell> {
        (0..self.width * self.width)
            .filter(|&id| !self.walls[id])
            .map(|id| self.cell_at(id))
            .collect()
    }

    pub fn center(&self) -> Cell {
        ((self.width - 1) / 2, (self.width - 1) / 2)
    }

    fn neighbors(&self, cell: Cell) -> impl Iterator<Item = Cell> + '_ {
        let (r, c) = cell;
        let w = self.width;
        [
            (r.wrapping_sub(1), c),
            (r + 1, c),
            (r, c.wrapping_sub(1)),
            (r, c + 1),
        ]
        .into_iter()
        .filter(move |&(rr, cc)| rr < w && cc < w)
    }

    pub fn open_neighbors(&self, cell: Cell) -> Vec<Cell> {
        self.neighbors(cell).filter(|&n| self.is_open(n)).collect()
    }

    /// Plain text serialization: one header line `width door_fraction seed`,
    /// then `#` for walls and `.` for open cells.
    pub fn to_text(&self, seed: u64) -> String {
        let mut out = format!("{} {} {}\n", self.width, self.door_fraction, seed);
        for r in 0..self.width {
            for c in 0..self.width {
                out.push(if self.is_wall((r, c)) { '#' } else { '.' });
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<(Maze, u64)> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Io("empty maze file".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::Io("maze header must be `width door_fraction seed`".into()));
        }
        let width: usize = parts[0].parse().map_err(|_| Error::Io("bad width".into()))?;
        let door_fraction: f64 =
            parts[1].parse().map_err(|_| Error::Io("bad door fraction".into()))?;
        let seed: u64 = parts[2].parse().map_err(|_| Error::Io("bad seed".into()))?;
        let mut walls = Vec::with_capacity(width * width);
        for _ in 0..width {
            let row = lines.next().ok_or_else(|| Error::Io("truncated maze grid".into()))?;
            if row.chars().count() != width {
                return Err(Error::Io("maze row width mismatch".into()));
            }
            for ch in row.chars() {
                match ch {
                    '#' => walls.push(true),
                    '.' => walls.push(false),
                    _ => return Err(Error::Io(format!("unexpected maze character {ch:?}"))),
                }
            }
        }
        Ok((Maze { width, walls, door_fraction }, seed))
    }
}

/// Perfect maze via randomized depth-first carving on the odd-odd lattice,
/// then every remaining wall separating two open cells is opened with
/// probability `door_fraction`. The open-cell graph is connected by
/// construction; this is asserted before returning.
pub fn generate_maze<R: Rng>(width: usize, door_fraction: f64, rng: &mut R) -> Result<Maze> {
    if width < 5 || width % 2 == 0 {
        return Err(Error::Config(format!("maze width must be odd and >= 5, got {width}")));
    }
    if !(0.0..=1.0).contains(&door_fraction) {
        return Err(Error::Config(format!(
            "door fraction must be in [0, 1], got {door_fraction}"
        )));
    }
    let mut maze = Maze {
        width,
        walls: vec![true; width * width],
        door_fraction,
    };

    // Depth-first carve over lattice nodes (odd, odd).
    let node_cols = (width - 1) / 2;
    let mut visited = vec![false; node_cols * node_cols];
    let node_index = |r: usize, c: usize| ((r - 1) / 2) * node_cols + (c - 1) / 2;
    let start = (1usize, 1usize);
    let mut stack = vec![start];
    visited[node_index(start.0, start.1)] = true;
    maze.walls[start.0 * width + start.1] = false;
    while let Some(&(r, c)) = stack.last() {
        let mut candidates: Vec<(usize, usize)> = Vec::with_capacity(4);
        if r >= 3 && !visited[node_index(r - 2, c)] {
            candidates.push((r - 2, c));
        }
        if r + 2 < width && !visited[node_index(r + 2, c)] {
            candidates.push((r + 2, c));
        }
        if c >= 3 && !visited[node_index(r, c - 2)] {
            candidates.push((r, c - 2));
        }
        if c + 2 < width && !visited[node_index(r, c + 2)] {
            candidates.push((r, c + 2));
        }
        if candidates.is_empty() {
            stack.pop();
            continue;
        }
        let (nr, nc) = candidates[rng.gen_range(0..candidates.len())];
        visited[node_index(nr, nc)] = true;
        maze.walls[nr * width + nc] = false;
        maze.walls[((r + nr) / 2) * width + (c + nc) / 2] = false;
        stack.push((nr, nc));
    }

    // Doors: interior walls separating two open cells of the carved maze
    // (horizontally or vertically). Candidacy is decided against the carved
    // snapshot so the row-major visiting order cannot matter.
    let carved = maze.clone();
    for r in 1..width - 1 {
        for c in 1..width - 1 {
            if !carved.is_wall((r, c)) {
                continue;
            }
            let horizontal = carved.is_open((r, c - 1)) && carved.is_open((r, c + 1));
            let vertical = carved.is_open((r - 1, c)) && carved.is_open((r + 1, c));
            if (horizontal || vertical) && rng.gen::<f64>() < door_fraction {
                maze.walls[r * width + c] = false;
            }
        }
    }

    // Connectivity: doors only ever join already-connected components, but
    // assert it anyway.
    let open = maze.open_cells();
    let reached = bfs_distances(&maze, open[0]);
    if open.iter().any(|&c| reached[maze.cell_id(c)] == usize::MAX) {
        return Err(Error::Internal("generated maze is not connected".into()));
    }
    Ok(maze)
}

fn bfs_distances(maze: &Maze, from: Cell) -> Vec<usize> {
    let mut dist = vec![usize::MAX; maze.width * maze.width];
    let mut queue = std::collections::VecDeque::new();
    dist[maze.cell_id(from)] = 0;
    queue.push_back(from);
    while let Some(cell) = queue.pop_front() {
        let d = dist[maze.cell_id(cell)];
        for n in maze.open_neighbors(cell) {
            let id = maze.cell_id(n);
            if dist[id] == usize::MAX {
                dist[id] = d + 1;
                queue.push_back(n);
            }
        }
    }
    dist
}

/// Shortest path between open cells by breadth-first search; the independent
/// oracle for the validity checker. Deterministic neighbor order.
pub fn shortest_path(maze: &Maze, start: Cell, goal: Cell) -> Option<Vec<Cell>> {
    if !maze.is_open(start) || !maze.is_open(goal) {
        return None;
    }
    let dist = bfs_distances(maze, goal);
    if dist[maze.cell_id(start)] == usize::MAX {
        return None;
    }
    let mut path = vec![start];
    let mut cur = start;
    while cur != goal {
        let d = dist[maze.cell_id(cur)];
        let next = maze
            .open_neighbors(cur)
            .into_iter()
            .find(|&n| dist[maze.cell_id(n)] + 1 == d)
            .expect("distance field is consistent");
        path.push(next);
        cur = next;
    }
    Some(path)
}

/// Shortest path with uniformly random tie-breaking among descent moves.
pub fn random_shortest_path<R: Rng>(
    maze: &Maze,
    start: Cell,
    goal: Cell,
    rng: &mut R,
) -> Option<Vec<Cell>> {
    if !maze.is_open(start) || !maze.is_open(goal) {
        return None;
    }
    let dist = bfs_distances(maze, goal);
    if dist[maze.cell_id(start)] == usize::MAX {
        return None;
    }
    let mut path = vec![start];
    let mut cur = start;
    while cur != goal {
        let d = dist[maze.cell_id(cur)];
        let options: Vec<Cell> = maze
            .open_neighbors(cur)
            .into_iter()
            .filter(|&n| dist[maze.cell_id(n)] + 1 == d)
            .collect();
        cur = options[rng.gen_range(0..options.len())];
        path.push(cur);
    }
    Some(path)
}

/// Random simple path by depth-first exploration with shuffled neighbor
/// order; longer and more winding than shortest paths.
pub fn random_dfs_path<R: Rng>(
    maze: &Maze,
    start: Cell,
    goal: Cell,
    rng: &mut R,
) -> Option<Vec<Cell>> {
    let mut visited = vec![false; maze.width * maze.width];
    let mut stack = vec![start];
    visited[maze.cell_id(start)] = true;
    while let Some(&cur) = stack.last() {
        if cur == goal {
            return Some(stack);
        }
        let mut options: Vec<Cell> = maze
            .open_neighbors(cur)
            .into_iter()
            .filter(|&n| !visited[maze.cell_id(n)])
            .collect();
        if options.is_empty() {
            stack.pop();
            continue;
        }
        // Shuffle for a uniformly random exploration order.
        for i in (1..options.len()).rev() {
            options.swap(i, rng.gen_range(0..=i));
        }
        let next = options[0];
        visited[maze.cell_id(next)] = true;
        stack.push(next);
    }
    None
}

/// Maze plus tokenization conventions: positions 0 and 1 hold the start and
/// goal cells, position 2 the separator, the rest the path body padded with
/// PAD.
#[derive(Debug, Clone)]
pub struct MazeEnv {
    maze: Maze,
    seq_len: usize,
    vocab: Vocabulary,
}

pub const PROMPT_LEN: usize = 3;

impl MazeEnv {
    pub fn new(maze: Maze, seq_len: usize) -> Result<Self> {
        if seq_len <= PROMPT_LEN + 1 {
            return Err(Error::Config(format!(
                "sequence length {seq_len} leaves no room for a path"
            )));
        }
        let cells = (maze.width * maze.width) as u32;
        let vocab = Vocabulary::new(cells + 2)?;
        Ok(MazeEnv { maze, seq_len, vocab })
    }

    pub fn maze(&self) -> &Maze {
        &self.maze
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn path_capacity(&self) -> usize {
        self.seq_len - PROMPT_LEN
    }

    pub fn sep_token(&self) -> Token {
        (self.maze.width * self.maze.width) as Token
    }

    pub fn pad_token(&self) -> Token {
        self.sep_token() + 1
    }

    pub fn cell_token(&self, cell: Cell) -> Token {
        self.maze.cell_id(cell) as Token
    }

    fn token_cell(&self, t: Token) -> Option<Cell> {
        if (t as usize) < self.maze.width * self.maze.width {
            Some(self.maze.cell_at(t as usize))
        } else {
            None
        }
    }

    pub fn prompt(&self, start: Cell, goal: Cell) -> Vec<Token> {
        vec![self.cell_token(start), self.cell_token(goal), self.sep_token()]
    }

    /// Encodes (start, goal, SEP, path..., PAD...). The path must fit within
    /// the capacity.
    pub fn encode_path(&self, path: &[Cell]) -> Result<MaskedSequence> {
        if path.is_empty() {
            return Err(Error::Contract("cannot encode an empty path".into()));
        }
        if path.len() > self.path_capacity() {
            return Err(Error::Contract(format!(
                "path of {} cells exceeds capacity {}",
                path.len(),
                self.path_capacity()
            )));
        }
        let mut tokens = Vec::with_capacity(self.seq_len);
        tokens.push(self.cell_token(path[0]));
        tokens.push(self.cell_token(*path.last().unwrap()));
        tokens.push(self.sep_token());
        for &cell in path {
            tokens.push(self.cell_token(cell));
        }
        tokens.resize(self.seq_len, self.pad_token());
        MaskedSequence::new(tokens, &self.vocab)
    }

    /// Samples an open start/goal pair at Manhattan distance at least
    /// half the width (short pairs make the reward degenerate).
    pub fn sample_prompt_pair<R: Rng>(&self, rng: &mut R) -> (Cell, Cell) {
        let open = self.maze.open_cells();
        let min_dist = self.maze.width / 2;
        loop {
            let s = open[rng.gen_range(0..open.len())];
            let g = open[rng.gen_range(0..open.len())];
            if manhattan(s, g) >= min_dist {
                return (s, g);
            }
        }
    }
}

pub fn manhattan(a: Cell, b: Cell) -> usize {
    a.0.abs_diff(b.0) + a.1.abs_diff(b.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathFailure {
    /// Mask tokens, misplaced separators, or a malformed prompt.
    Structure,
    /// Non-PAD token after the first PAD.
    TokenAfterPad,
    /// Empty path body.
    EmptyBody,
    /// A body cell is a wall.
    Wall,
    /// Consecutive cells are not direct neighbors.
    Jump,
    /// Body does not start at the prompted start cell.
    StartMismatch,
    /// Body does not end at the prompted goal cell.
    GoalMismatch,
}

impl std::fmt::Display for PathFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PathFailure::Structure => "structure",
            PathFailure::TokenAfterPad => "token_after_pad",
            PathFailure::EmptyBody => "empty_body",
            PathFailure::Wall => "wall",
            PathFailure::Jump => "jump",
            PathFailure::StartMismatch => "start_mismatch",
            PathFailure::GoalMismatch => "goal_mismatch",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct PathCheck {
    pub valid: bool,
    pub failure: Option<PathFailure>,
    /// Body cells when the structure parsed, valid or not.
    pub body: Vec<Cell>,
}

/// Validity: body starts at the prompted start, ends at the prompted goal,
/// visits only open cells, moves by Manhattan distance 1, and the sequence
/// is structurally well formed (prompt cells + SEP, PAD-only suffix).
pub fn validate_path(env: &MazeEnv, seq: &MaskedSequence) -> PathCheck {
    let fail = |failure: PathFailure, body: Vec<Cell>| PathCheck {
        valid: false,
        failure: Some(failure),
        body,
    };
    if seq.len() != env.seq_len() || !seq.is_clean(env.vocab()) {
        return fail(PathFailure::Structure, vec![]);
    }
    let sep = env.sep_token();
    let pad = env.pad_token();
    let start = match env.token_cell(seq.get(0)) {
        Some(c) => c,
        None => return fail(PathFailure::Structure, vec![]),
    };
    let goal = match env.token_cell(seq.get(1)) {
        Some(c) => c,
        None => return fail(PathFailure::Structure, vec![]),
    };
    if seq.get(2) != sep {
        return fail(PathFailure::Structure, vec![]);
    }

    let mut body: Vec<Cell> = Vec::new();
    let mut seen_pad = false;
    for i in PROMPT_LEN..seq.len() {
        let t = seq.get(i);
        if seen_pad {
            if t != pad {
                return fail(PathFailure::TokenAfterPad, body);
            }
            continue;
        }
        if t == pad {
            seen_pad = true;
            continue;
        }
        match env.token_cell(t) {
            Some(c) => body.push(c),
            // A separator inside the body.
            None => return fail(PathFailure::Structure, body),
        }
    }
    if body.is_empty() {
        return fail(PathFailure::EmptyBody, body);
    }
    for &cell in &body {
        if env.maze().is_wall(cell) {
            return fail(PathFailure::Wall, body);
        }
    }
    for pair in body.windows(2) {
        if manhattan(pair[0], pair[1]) != 1 {
            return fail(PathFailure::Jump, body);
        }
    }
    if body[0] != start {
        return fail(PathFailure::StartMismatch, body);
    }
    if *body.last().unwrap() != goal {
        return fail(PathFailure::GoalMismatch, body);
    }
    PathCheck { valid: true, failure: None, body }
}

pub const INVALID_PATH_REWARD: f64 = -0.4;

/// Stay-away-from-center reward: for valid paths, the minimum Manhattan
/// distance from any body cell to the grid center, divided by the largest
/// attainable distance (width - 1) / 2; invalid paths get a flat penalty.
pub fn reward_stay_away(env: &MazeEnv, seq: &MaskedSequence) -> f64 {
    let check = validate_path(env, seq);
    if !check.valid {
        return INVALID_PATH_REWARD;
    }
    let center = env.maze().center();
    let min_d = check
        .body
        .iter()
        .map(|&c| manhattan(c, center))
        .min()
        .expect("valid body is nonempty");
    let divisor = ((env.maze().width() - 1) / 2) as f64;
    min_d as f64 / divisor
}

/// Reward function adapter for the trainer.
pub struct MazeReward<'a> {
    env: &'a MazeEnv,
}

impl<'a> MazeReward<'a> {
    pub fn new(env: &'a MazeEnv) -> Self {
        MazeReward { env }
    }
}

impl RewardFn for MazeReward<'_> {
    fn reward(&self, x: &MaskedSequence) -> f64 {
        reward_stay_away(self.env, x)
    }
}

/// Union of distinct cells over all paths divided by the distinct-cell count
/// of the largest path; at least 1, invariant under duplicating paths.
pub fn coverage_ratio(bodies: &[Vec<Cell>]) -> Result<f64> {
    if bodies.is_empty() {
        return Err(Error::Contract("coverage requires at least one valid path".into()));
    }
    let mut union = std::collections::BTreeSet::new();
    let mut longest = 0usize;
    for body in bodies {
        let distinct: std::collections::BTreeSet<_> = body.iter().collect();
        longest = longest.max(distinct.len());
        union.extend(body.iter().copied());
    }
    if longest == 0 {
        return Err(Error::Contract("paths must be nonempty".into()));
    }
    Ok(union.len() as f64 / longest as f64)
}

/// Pretraining corpus: random prompt pairs with randomized shortest paths
/// (uniform tie-breaking keeps every shortest corridor represented). Keeping
/// lengths minimal makes the positional posteriors sharp, which a small
/// model needs; corridor multiplicity still carries the diversity the
/// tilting stage feeds on.
pub fn generate_corpus(env: &MazeEnv, n: usize, streams: &Streams) -> Vec<MaskedSequence> {
    (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = streams.stream(StreamDomain::Corpus, k as u64);
            loop {
                let (s, g) = env.sample_prompt_pair(&mut rng);
                if let Some(p) = random_shortest_path(env.maze(), s, g, &mut rng) {
                    if p.len() <= env.path_capacity() {
                        return env.encode_path(&p).expect("generated path encodes");
                    }
                }
            }
        })
        .collect()
}

/// Fixed evaluation prompts (start/goal pairs), reproducible per seed.
pub fn eval_prompts(env: &MazeEnv, n: usize, streams: &Streams) -> Vec<(Cell, Cell)> {
    let mut rng = streams.stream(StreamDomain::Eval, u64::MAX);
    (0..n).map(|_| env.sample_prompt_pair(&mut rng)).collect()
}

#[derive(Debug, Clone)]
pub struct PromptMetrics {
    pub prompt_id: usize,
    pub rollouts: usize,
    pub valid_frac: f64,
    pub mean_reward: f64,
    pub coverage_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_prompt: Vec<PromptMetrics>,
    pub validity: f64,
    pub mean_reward: f64,
    /// Pooled coverage over every valid rollout; 0 when none are valid.
    pub coverage_ratio: f64,
    /// One rollout dump row per (prompt, rollout): sequence, validity, reward.
    pub rollouts: Vec<(usize, MaskedSequence, bool, f64)>,
}

/// Rolls the model out on each prompt and reports validity, reward, and
/// coverage. Rollout randomness depends only on the seed and the (prompt,
/// rollout) index so repeated evaluations agree.
pub fn evaluate_model<M: PosteriorModel>(
    model: &M,
    env: &MazeEnv,
    prompts: &[(Cell, Cell)],
    rollouts_per_prompt: usize,
    rollout_cfg: &RolloutConfig,
    streams: &Streams,
) -> Result<EvalReport> {
    let results: Vec<Result<Vec<(usize, MaskedSequence, bool, f64)>>> = prompts
        .par_iter()
        .enumerate()
        .map(|(pid, &(s, g))| {
            let prompt = env.prompt(s, g);
            let mut rows = Vec::with_capacity(rollouts_per_prompt);
            for k in 0..rollouts_per_prompt {
                let mut rng = streams.stream_pair(
                    StreamDomain::Eval,
                    pid as u64,
                    k as u64,
                );
                let (x, _) = sar_rollout(model, rollout_cfg, Some(&prompt), &mut rng)?;
                let check = validate_path(env, &x);
                let r = reward_stay_away(env, &x);
                rows.push((pid, x, check.valid, r));
            }
            Ok(rows)
        })
        .collect();

    let mut per_prompt = Vec::with_capacity(prompts.len());
    let mut all_rows = Vec::new();
    let mut valid_total = 0usize;
    let mut reward_total = 0.0;
    let mut pooled_bodies: Vec<Vec<Cell>> = Vec::new();
    for rows in results {
        let rows = rows?;
        let pid = rows.first().map(|r| r.0).unwrap_or(0);
        let n = rows.len();
        let mut valid = 0usize;
        let mut reward_sum = 0.0;
        let mut bodies = Vec::new();
        for (_, x, ok, r) in &rows {
            if *ok {
                valid += 1;
                bodies.push(validate_path(env, x).body);
            }
            reward_sum += r;
        }
        valid_total += valid;
        reward_total += reward_sum;
        let cov = if bodies.is_empty() {
            0.0
        } else {
            coverage_ratio(&bodies)?
        };
        pooled_bodies.extend(bodies);
        per_prompt.push(PromptMetrics {
            prompt_id: pid,
            rollouts: n,
            valid_frac: valid as f64 / n as f64,
            mean_reward: reward_sum / n as f64,
            coverage_ratio: cov,
        });
        all_rows.extend(rows);
    }
    let total = prompts.len() * rollouts_per_prompt;
    let coverage = if pooled_bodies.is_empty() {
        0.0
    } else {
        coverage_ratio(&pooled_bodies)?
    };
    Ok(EvalReport {
        per_prompt,
        validity: valid_total as f64 / total as f64,
        mean_reward: reward_total / total as f64,
        coverage_ratio: coverage,
        rollouts: all_rows,
    })
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub corpus_size: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eval_every: usize,
    pub eval_prompt_count: usize,
    pub eval_rollouts: usize,
    pub model: NeuralConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            corpus_size: 30_000,
            steps: 3000,
            batch_size: 64,
            learning_rate: 1e-3,
            eval_every: 250,
            eval_prompt_count: 32,
            eval_rollouts: 4,
            model: NeuralConfig { embed_dim: 32, hidden_dim: 128 },
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainRow {
    pub step: usize,
    pub loss: f64,
    pub validity: f64,
}

/// Trains the base model on maze paths with the plain masked-diffusion loss
/// (the h = 0, c = 0 member of the objective family, weight 1), optionally
/// continuing from an existing model.
pub fn pretrain_base(
    env: &MazeEnv,
    cfg: &PretrainConfig,
    rollout_cfg: &RolloutConfig,
    streams: &Streams,
    resume: Option<NeuralModel>,
) -> Result<(NeuralModel, Vec<PretrainRow>)> {
    use crate::dtm::{cdtm_loss_and_grad, DtmConfig};
    use crate::model::{AdamOptimizer, OptimConfig, Optimizer};

    let corpus = generate_corpus(env, cfg.corpus_size, streams);
    let corpus: Vec<(MaskedSequence, f64)> =
        corpus.into_iter().map(|x| (x, 0.0)).collect();

    let mut model = match resume {
        Some(m) => {
            if m.seq_len() != env.seq_len() || m.vocab() != *env.vocab() {
                return Err(Error::Config("checkpoint does not match the maze config".into()));
            }
            m
        }
        None => {
            let mut init_rng = streams.stream(StreamDomain::ModelInit, 0);
            NeuralModel::new(*env.vocab(), env.seq_len(), cfg.model, &mut init_rng)
        }
    };

    let dtm_cfg =
        DtmConfig::new(0.0, 0.0)?.with_time_sampling(crate::dtm::TimeSampling::HazardStratified);
    let mut optimizer = AdamOptimizer::new(
        OptimConfig {
            learning_rate: cfg.learning_rate,
            weight_decay: 0.0,
            ..OptimConfig::default()
        },
        model.num_params(),
    );
    let prompts = eval_prompts(env, cfg.eval_prompt_count, streams);
    let mut rows = Vec::new();
    let mut grad = vec![0.0; model.num_params()];
    let schedule = crate::schedule::Schedule::Linear;

    for step in 0..cfg.steps {
        // Linear decay to a tenth of the initial rate sharpens the late
        // posteriors without a schedule knob.
        let frac = step as f64 / cfg.steps.max(1) as f64;
        optimizer.set_learning_rate(cfg.learning_rate * (1.0 - 0.9 * frac));
        let mut rng = streams.stream_pair(StreamDomain::Minibatch, u64::MAX, step as u64);
        let batch: Vec<(MaskedSequence, f64)> = (0..cfg.batch_size)
            .map(|_| corpus[rng.gen_range(0..corpus.len())].clone())
            .collect();
        let stats = cdtm_loss_and_grad::<NeuralModel, NeuralModel>(
            &batch,
            None,
            &model,
            &dtm_cfg,
            &schedule,
            streams,
            (1 << 40) | step as u64,
            &mut grad,
        )?;
        crate::model::clip_grad_norm(&mut grad, 0.0);
        optimizer.step(model.params_mut(), &grad);

        if step % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let report = evaluate_model(
                &model,
                env,
                &prompts,
                cfg.eval_rollouts,
                rollout_cfg,
                streams,
            )?;
            rows.push(PretrainRow {
                step,
                loss: stats.loss,
                validity: report.validity,
            });
        }
    }
    Ok((model, rows))
}

/// Renders the maze and a set of paths as a standalone SVG document.
pub fn render_svg(env: &MazeEnv, bodies: &[Vec<Cell>]) -> String {
    let w = env.maze().width();
    let scale = 12usize;
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{0}\" \
         viewBox=\"0 0 {0} {0}\">\n",
        w * scale
    ));
    out.push_str(&format!(
        "<rect width=\"{0}\" height=\"{0}\" fill=\"white\"/>\n",
        w * scale
    ));
    for r in 0..w {
        for c in 0..w {
            if env.maze().is_wall((r, c)) {
                out.push_str(&format!(
                    "<rect x=\"{}\" y=\"{}\" width=\"{scale}\" height=\"{scale}\" fill=\"#333\"/>\n",
                    c * scale,
                    r * scale
                ));
            }
        }
    }
    let colors = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e"];
    for (k, body) in bodies.iter().enumerate() {
        if body.is_empty() {
            continue;
        }
        let pts: Vec<String> = body
            .iter()
            .map(|&(r, c)| {
                format!("{},{}", c * scale + scale / 2, r * scale + scale / 2)
            })
            .collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\" \
             stroke-opacity=\"0.7\"/>\n",
            pts.join(" "),
            colors[k % colors.len()]
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Default rollout settings for the desk-scale maze.
pub fn default_rollout(env: &MazeEnv, temperature: f64) -> RolloutConfig {
    RolloutConfig {
        total_steps: 24,
        block_size: env.seq_len() / 4,
        order: OrderPolicy::Random,
        temperature,
        prompts: vec![],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_maze(seed: u64) -> Maze {
        let mut rng = Streams::new(seed).root();
        generate_maze(9, 0.4, &mut rng).unwrap()
    }

    fn env(seed: u64) -> MazeEnv {
        MazeEnv::new(small_maze(seed), 24).unwrap()
    }

    #[test]
    fn maze_structure_invariants() {
        let m = small_maze(1);
        let w = m.width();
        for i in 0..w {
            assert!(m.is_wall((0, i)));
            assert!(m.is_wall((w - 1, i)));
            assert!(m.is_wall((i, 0)));
            assert!(m.is_wall((i, w - 1)));
        }
        for r in (1..w).step_by(2) {
            for c in (1..w).step_by(2) {
                assert!(m.is_open((r, c)), "odd-odd cell ({r},{c}) must be open");
            }
        }
    }

    #[test]
    fn door_fraction_one_opens_every_separating_wall() {
        // Same seed at fraction 0 reproduces the carved snapshot that door
        // candidacy is decided against.
        let carved = {
            let mut rng = Streams::new(2).root();
            generate_maze(9, 0.0, &mut rng).unwrap()
        };
        let m = {
            let mut rng = Streams::new(2).root();
            generate_maze(9, 1.0, &mut rng).unwrap()
        };
        for r in 1..8 {
            for c in 1..8 {
                let horizontal = carved.is_open((r, c - 1)) && carved.is_open((r, c + 1));
                let vertical = carved.is_open((r - 1, c)) && carved.is_open((r + 1, c));
                if carved.is_wall((r, c)) && (horizontal || vertical) {
                    assert!(m.is_open((r, c)), "separating wall left closed at ({r},{c})");
                }
            }
        }
        // Every lattice edge wall is a candidate, so the open grid admits a
        // direct move between any two adjacent nodes.
        for r in (1..8).step_by(2) {
            for c in (1..8).step_by(2) {
                if c + 2 < 9 {
                    assert!(m.is_open((r, c + 1)));
                }
                if r + 2 < 9 {
                    assert!(m.is_open((r + 1, c)));
                }
            }
        }
    }

    #[test]
    fn door_fraction_zero_is_a_perfect_maze() {
        // Tree property: open cells = nodes + carved walls = 2 * nodes - 1.
        let mut rng = Streams::new(3).root();
        let m = generate_maze(11, 0.0, &mut rng).unwrap();
        let nodes = 5 * 5;
        assert_eq!(m.open_cells().len(), 2 * nodes - 1);
    }

    #[test]
    fn maze_text_roundtrip() {
        let m = small_maze(4);
        let text = m.to_text(4);
        let (back, seed) = Maze::from_text(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(seed, 4);
    }

    #[test]
    fn bfs_paths_validate() {
        let e = env(5);
        let mut rng = Streams::new(6).root();
        for _ in 0..50 {
            let (s, g) = e.sample_prompt_pair(&mut rng);
            let path = shortest_path(e.maze(), s, g).unwrap();
            let seq = e.encode_path(&path).unwrap();
            let check = validate_path(&e, &seq);
            assert!(check.valid, "failure {:?}", check.failure);
            let r = reward_stay_away(&e, &seq);
            assert!((0.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn invalid_paths_are_classified() {
        let e = env(7);
        let m = e.maze();
        let open = m.open_cells();
        let s = open[0];
        // A wall cell in the body.
        let wall = (0usize, 0usize);
        let seq = {
            let mut tokens = vec![
                e.cell_token(s),
                e.cell_token(s),
                e.sep_token(),
                e.cell_token(s),
                e.cell_token(wall),
            ];
            tokens.resize(e.seq_len(), e.pad_token());
            MaskedSequence::new(tokens, e.vocab()).unwrap()
        };
        // Wall beats jump in reporting order only if adjacency holds; this
        // cell pair may be distant, so accept either reason but never valid.
        let check = validate_path(&e, &seq);
        assert!(!check.valid);
        assert!(matches!(check.failure, Some(PathFailure::Wall) | Some(PathFailure::Jump)));
        assert_eq!(reward_stay_away(&e, &seq), INVALID_PATH_REWARD);

        // A jump between open cells.
        let far = *open.last().unwrap();
        let seq2 = {
            let mut tokens = vec![
                e.cell_token(s),
                e.cell_token(far),
                e.sep_token(),
                e.cell_token(s),
                e.cell_token(far),
            ];
            tokens.resize(e.seq_len(), e.pad_token());
            MaskedSequence::new(tokens, e.vocab()).unwrap()
        };
        let check2 = validate_path(&e, &seq2);
        assert!(!check2.valid);
        assert_eq!(check2.failure, Some(PathFailure::Jump));

        // Token after PAD.
        let seq3 = {
            let mut tokens = vec![e.cell_token(s), e.cell_token(s), e.sep_token()];
            tokens.push(e.cell_token(s));
            tokens.push(e.pad_token());
            tokens.push(e.cell_token(s));
            tokens.resize(e.seq_len(), e.pad_token());
            MaskedSequence::new(tokens, e.vocab()).unwrap()
        };
        assert_eq!(validate_path(&e, &seq3).failure, Some(PathFailure::TokenAfterPad));

        // Empty body.
        let seq4 = {
            let mut tokens = vec![e.cell_token(s), e.cell_token(s), e.sep_token()];
            tokens.resize(e.seq_len(), e.pad_token());
            MaskedSequence::new(tokens, e.vocab()).unwrap()
        };
        assert_eq!(validate_path(&e, &seq4).failure, Some(PathFailure::EmptyBody));
    }

    #[test]
    fn reward_open_grid_corner_value() {
        // Width 5, every separating wall open: corner cell (1,1) sits at
        // Manhattan distance 2 from the center post (2,2); divisor 2 gives
        // reward 1.
        let mut rng = Streams::new(8).root();
        let m = generate_maze(5, 1.0, &mut rng).unwrap();
        let e = MazeEnv::new(m, 8).unwrap();
        let seq = e.encode_path(&[(1, 1)]).unwrap();
        let r = reward_stay_away(&e, &seq);
        assert_eq!(r, 1.0);
        // A path through the center scores 0.
        let center = e.maze().center();
        assert!(e.maze().is_open((center.0 - 1, center.1)));
        let through = vec![(center.0 - 1, center.1), center, (center.0 + 1, center.1)];
        let seq2 = e.encode_path(&through).unwrap();
        assert_eq!(reward_stay_away(&e, &seq2), 0.0);
    }

    #[test]
    fn coverage_basics() {
        let p1 = vec![(1usize, 1usize), (1, 2), (1, 3)];
        let p2 = vec![(3usize, 1usize), (3, 2), (3, 3)];
        assert_eq!(coverage_ratio(&[p1.clone()]).unwrap(), 1.0);
        assert_eq!(coverage_ratio(&[p1.clone(), p2.clone()]).unwrap(), 2.0);
        assert_eq!(
            coverage_ratio(&[p1.clone(), p1.clone(), p1.clone()]).unwrap(),
            1.0
        );
        // Duplication invariance in general.
        let base = coverage_ratio(&[p1.clone(), p2.clone()]).unwrap();
        let dup = coverage_ratio(&[p1.clone(), p2.clone(), p1, p2]).unwrap();
        assert_eq!(base, dup);
        assert!(coverage_ratio(&[]).is_err());
    }

    #[test]
    fn validate_agrees_with_independent_reimplementation() {
        // Differential test against a straightforward second implementation
        // on random token soup plus random real paths.
        let e = env(9);
        let w = e.maze().width();
        let naive = |seq: &MaskedSequence| -> bool {
            let toks = seq.tokens();
            let cell_count = (w * w) as u32;
            let sep = cell_count;
            let pad = cell_count + 1;
            if toks.len() != e.seq_len() {
                return false;
            }
            if toks[0] >= cell_count || toks[1] >= cell_count || toks[2] != sep {
                return false;
            }
            let mut body: Vec<u32> = Vec::new();
            let mut padded = false;
            for &t in &toks[3..] {
                if padded {
                    if t != pad {
                        return false;
                    }
                } else if t == pad {
                    padded = true;
                } else if t < cell_count {
                    body.push(t);
                } else {
                    return false;
                }
            }
            if body.is_empty() || body[0] != toks[0] || *body.last().unwrap() != toks[1] {
                return false;
            }
            for &t in &body {
                let (r, c) = ((t / w as u32) as usize, (t % w as u32) as usize);
                if e.maze().is_wall((r, c)) {
                    return false;
                }
            }
            body.windows(2).all(|p| {
                let a = ((p[0] / w as u32) as usize, (p[0] % w as u32) as usize);
                let b = ((p[1] / w as u32) as usize, (p[1] % w as u32) as usize);
                manhattan(a, b) == 1
            })
        };

        let mut rng = Streams::new(10).root();
        let vsize = e.vocab().size();
        for trial in 0..10_000 {
            let seq = if trial % 5 == 0 {
                let (s, g) = e.sample_prompt_pair(&mut rng);
                let p = random_shortest_path(e.maze(), s, g, &mut rng).unwrap();
                if p.len() > e.path_capacity() {
                    continue;
                }
                e.encode_path(&p).unwrap()
            } else {
                let tokens: Vec<Token> =
                    (0..e.seq_len()).map(|_| rng.gen_range(0..vsize)).collect();
                MaskedSequence::new(tokens, e.vocab()).unwrap()
            };
            assert_eq!(validate_path(&e, &seq).valid, naive(&seq), "trial {trial}");
        }
    }

    #[test]
    fn corpus_paths_are_valid_and_deterministic() {
        let e = env(11);
        let streams = Streams::new(11);
        let corpus = generate_corpus(&e, 64, &streams);
        for seq in &corpus {
            assert!(validate_path(&e, seq).valid);
        }
        let again = generate_corpus(&e, 64, &streams);
        assert_eq!(corpus, again);
    }

    #[test]
    fn svg_render_smoke() {
        let e = env(12);
        let (s, g) = {
            let mut rng = Streams::new(13).root();
            e.sample_prompt_pair(&mut rng)
        };
        let body = shortest_path(e.maze(), s, g).unwrap();
        let svg = render_svg(&e, &[body]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.ends_with("</svg>\n"));
    }
}
