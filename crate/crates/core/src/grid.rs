//! Grid maps and their parsing.
//!
//! A map is a rectangular block of text: `#` wall, `.` empty, `G` training
//! goal, `B` testing goal. Non-wall cells receive contiguous state ids in
//! row-major order, which keeps every derived table layout deterministic.

use thiserror::Error;

use crate::mdp::StateId;

/// What occupies one cell of a map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Wall,
    Empty,
    TrainGoal,
    TestGoal,
}

impl Cell {
    pub fn is_wall(self) -> bool {
        self == Cell::Wall
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GridError {
    #[error("map rows have differing lengths (row {row} has {got}, expected {expected})")]
    NonRectangular { row: usize, got: usize, expected: usize },
    #[error("unknown map character {ch:?} at row {row}, column {col}")]
    UnknownCharacter { ch: char, row: usize, col: usize },
    #[error("map has no non-wall cells")]
    NoEmptyCells,
    #[error("map boundary is not fully walled at row {row}, column {col}")]
    UnenclosedBoundary { row: usize, col: usize },
}

/// A parsed map: cell grid plus the row-major state-id assignment.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<Cell>,
    pub name: String,
    /// state id for each cell, `usize::MAX` on walls
    state_of_cell: Vec<usize>,
    /// (row, col) for each state id
    cell_of_state: Vec<(usize, usize)>,
}

impl GridSpec {
    pub fn cell(&self, row: usize, col: usize) -> Cell {
        self.cells[row * self.width + col]
    }

    /// Number of non-wall cells, i.e. |S| of any MDP built from this grid.
    pub fn num_states(&self) -> usize {
        self.cell_of_state.len()
    }

    /// State id at (row, col), or None on a wall.
    pub fn state_at(&self, row: usize, col: usize) -> Option<StateId> {
        let v = self.state_of_cell[row * self.width + col];
        (v != usize::MAX).then_some(v)
    }

    /// (row, col) of a state id.
    pub fn coords_of(&self, s: StateId) -> (usize, usize) {
        self.cell_of_state[s]
    }

    /// States whose cell matches `cell`, in state-id (row-major) order.
    pub fn states_of_kind(&self, cell: Cell) -> Vec<StateId> {
        self.cell_of_state
            .iter()
            .enumerate()
            .filter(|(_, &(r, c))| self.cell(r, c) == cell)
            .map(|(s, _)| s)
            .collect()
    }

    /// Cells that join two regions: open, with open neighbors on exactly two
    /// opposite sides and walls on the other two. Row-major order.
    pub fn hallway_cells(&self) -> Vec<(usize, usize)> {
        let open = |r: usize, c: usize| !self.cell(r, c).is_wall();
        let mut hallways = Vec::new();
        for r in 1..self.height - 1 {
            for c in 1..self.width - 1 {
                if !open(r, c) {
                    continue;
                }
                let ns = open(r - 1, c) && open(r + 1, c) && !open(r, c - 1) && !open(r, c + 1);
                let ew = open(r, c - 1) && open(r, c + 1) && !open(r - 1, c) && !open(r + 1, c);
                if ns || ew {
                    hallways.push((r, c));
                }
            }
        }
        hallways
    }
}

/// Parse a map from text. See the module docs for the format.
pub fn parse_grid(text: &str) -> Result<GridSpec, GridError> {
    let rows: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
    let height = rows.len();
    let width = rows.first().map_or(0, |r| r.chars().count());
    if height == 0 || width == 0 {
        return Err(GridError::NoEmptyCells);
    }

    let mut cells = Vec::with_capacity(width * height);
    for (r, row) in rows.iter().enumerate() {
        if row.chars().count() != width {
            return Err(GridError::NonRectangular { row: r, got: row.chars().count(), expected: width });
        }
        for (c, ch) in row.chars().enumerate() {
            cells.push(match ch {
                '#' => Cell::Wall,
                '.' => Cell::Empty,
                'G' => Cell::TrainGoal,
                'B' => Cell::TestGoal,
                _ => return Err(GridError::UnknownCharacter { ch, row: r, col: c }),
            });
        }
    }

    // The dynamics assume a move can never leave the grid, so the border must
    // be solid wall.
    for r in 0..height {
        for c in 0..width {
            let on_border = r == 0 || c == 0 || r == height - 1 || c == width - 1;
            if on_border && cells[r * width + c] != Cell::Wall {
                return Err(GridError::UnenclosedBoundary { row: r, col: c });
            }
        }
    }

    let mut state_of_cell = vec![usize::MAX; width * height];
    let mut cell_of_state = Vec::new();
    for r in 0..height {
        for c in 0..width {
            if cells[r * width + c] != Cell::Wall {
                state_of_cell[r * width + c] = cell_of_state.len();
                cell_of_state.push((r, c));
            }
        }
    }
    if cell_of_state.is_empty() {
        return Err(GridError::NoEmptyCells);
    }

    Ok(GridSpec { width, height, cells, name: "unnamed".to_string(), state_of_cell, cell_of_state })
}

/// The four-room map: four rooms joined by four hallway cells, 104 non-wall
/// cells, 20 training goals (room corners and centers) and 16 testing goals
/// (cells diagonally inward of the corners).
pub fn four_room() -> GridSpec {
    let mut g = parse_grid(include_str!("../assets/fourroom.map")).expect("bundled map is valid");
    g.name = "fourroom".to_string();
    g
}

/// The two-room map: two rooms joined by one hallway cell, four training
/// goals in the corners of the right room.
pub fn two_room() -> GridSpec {
    let mut g = parse_grid(include_str!("../assets/tworoom.map")).expect("bundled map is valid");
    g.name = "tworoom".to_string();
    g
}
