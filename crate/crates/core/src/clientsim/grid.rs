use std::collections::VecDeque;

/// Cell coordinates as (column, row).
pub type Cell = (usize, usize);

/// Number of targets in a floor plan.
pub const TARGETS: usize = 6;

/// A building floor of 1 m cells. `#` is a wall, `O` the shared starting
/// point, `1`..`6` the trial destinations, anything else walkable floor.
pub const DEFAULT_FLOOR_PLAN: &str = "\
#########################
#1....#.....#.....#....2#
#.....#.....#.....#.....#
#.....#.....#.....#.....#
#.....#.....#.....#.....#
###.#####.#####.#####.###
#.......................#
#...........O...........#
#.......................#
###.#####.#####.#####.###
#.....#.....#.....#.....#
#.....#.....#.....#.....#
#.....#.....#.....#.....#
#3....#....4#5....#....6#
#########################
";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GridError {
    #[error("floor plan rows have different widths")]
    Ragged,
    #[error("floor plan needs exactly one origin, found {0}")]
    Origin(usize),
    #[error("target {0} appears {1} times")]
    Target(usize, usize),
    #[error("target {0} is unreachable from the origin")]
    Unreachable(usize),
}

#[derive(Debug, Clone)]
pub struct Grid {
    width: usize,
    height: usize,
    walkable: Vec<bool>,
    origin: Cell,
    targets: [Cell; TARGETS],
    /// Per target, BFS distance of every cell (usize::MAX when walled off).
    dist: Vec<Vec<usize>>,
}

impl Grid {
    pub fn parse(plan: &str) -> Result<Self, GridError> {
        let rows: Vec<&str> = plan.lines().filter(|l| !l.is_empty()).collect();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(GridError::Ragged);
        }
        let height = rows.len();
        let mut walkable = vec![false; width * height];
        let mut origins = Vec::new();
        let mut targets: [Vec<Cell>; TARGETS] = Default::default();
        for (row, line) in rows.iter().enumerate() {
            for (col, ch) in line.bytes().enumerate() {
                walkable[row * width + col] = ch != b'#';
                match ch {
                    b'O' => origins.push((col, row)),
                    b'1'..=b'6' => targets[(ch - b'1') as usize].push((col, row)),
                    _ => {}
                }
            }
        }
        if origins.len() != 1 {
            return Err(GridError::Origin(origins.len()));
        }
        let mut fixed = [(0, 0); TARGETS];
        for (i, t) in targets.iter().enumerate() {
            if t.len() != 1 {
                return Err(GridError::Target(i + 1, t.len()));
            }
            fixed[i] = t[0];
        }
        let mut g = Grid {
            width,
            height,
            walkable,
            origin: origins[0],
            targets: fixed,
            dist: Vec::new(),
        };
        g.dist = fixed.iter().map(|t| g.bfs(*t)).collect();
        for i in 0..TARGETS {
            if g.distance(i + 1, g.origin).is_none() {
                return Err(GridError::Unreachable(i + 1));
            }
        }
        Ok(g)
    }

    pub fn default_building() -> Self {
        Self::parse(DEFAULT_FLOOR_PLAN).expect("built-in floor plan is valid")
    }

    pub fn origin(&self) -> Cell {
        self.origin
    }

    /// 1-based target index.
    pub fn target(&self, k: usize) -> Cell {
        self.targets[k - 1]
    }

    pub fn is_walkable(&self, (c, r): Cell) -> bool {
        c < self.width && r < self.height && self.walkable[r * self.width + c]
    }

    /// Walkable 4-neighbours in a fixed order (E, S, W, N).
    pub fn neighbors(&self, (c, r): Cell) -> Vec<Cell> {
        let mut out = Vec::with_capacity(4);
        let cand = [
            Some((c + 1, r)),
            Some((c, r + 1)),
            c.checked_sub(1).map(|c| (c, r)),
            r.checked_sub(1).map(|r| (c, r)),
        ];
        for n in cand.into_iter().flatten() {
            if self.is_walkable(n) {
                out.push(n);
            }
        }
        out
    }

    /// Shortest-path steps from `cell` to target `k` (1-based).
    pub fn distance(&self, k: usize, (c, r): Cell) -> Option<usize> {
        let d = self.dist[k - 1][r * self.width + c];
        (d != usize::MAX).then_some(d)
    }

    fn bfs(&self, from: Cell) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.width * self.height];
        let mut q = VecDeque::new();
        dist[from.1 * self.width + from.0] = 0;
        q.push_back(from);
        while let Some(cell) = q.pop_front() {
            let d = dist[cell.1 * self.width + cell.0];
            for n in self.neighbors(cell) {
                let slot = &mut dist[n.1 * self.width + n.0];
                if *slot == usize::MAX {
                    *slot = d + 1;
                    q.push_back(n);
                }
            }
        }
        dist
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_building_parses() {
        let g = Grid::default_building();
        assert_eq!(g.origin(), (12, 7));
        for k in 1..=TARGETS {
            let d = g.distance(k, g.origin()).unwrap();
            assert!(d >= 10, "target {k} at {d}");
            assert_eq!(g.distance(k, g.target(k)), Some(0));
        }
    }

    #[test]
    fn bfs_matches_manhattan_in_open_room() {
        let g = Grid::parse("#####\n#O..#\n#...#\n#.123\n#4565\n#####\n").unwrap_err();
        assert_eq!(g, GridError::Target(5, 2));
        let g = Grid::parse("######\n#O...#\n#....#\n#..12#\n#3456#\n######\n").unwrap();
        assert_eq!(g.distance(1, g.origin()), Some(2 + 2));
        assert_eq!(g.distance(6, g.origin()), Some(3 + 3));
    }

    #[test]
    fn unreachable_target_rejected() {
        let plan = "#######\n#O.#1##\n#..####\n#23456#\n#######\n";
        assert_eq!(Grid::parse(plan).unwrap_err(), GridError::Unreachable(1));
    }
}
