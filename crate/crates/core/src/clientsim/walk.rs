use rand::Rng;

use super::grid::{Cell, Grid};
use crate::protocol::TrajectorySample;

pub const STEP_CAP: usize = 100_000;

/// Biased random walk from the origin to target `k`. Each step follows a
/// shortest-path neighbour with probability `bias`, otherwise any walkable
/// neighbour. Stops at the target or after [`STEP_CAP`] steps.
pub fn walk_path<R: Rng + ?Sized>(grid: &Grid, k: usize, bias: f64, rng: &mut R) -> Vec<Cell> {
    let goal = grid.target(k);
    let mut cell = grid.origin();
    let mut path = vec![cell];
    while cell != goal && path.len() <= STEP_CAP {
        let nbrs = grid.neighbors(cell);
        let next = if rng.random_bool(bias.clamp(0.0, 1.0)) {
            let d = grid.distance(k, cell).expect("reachable");
            let closer: Vec<Cell> = nbrs
                .iter()
                .copied()
                .filter(|n| grid.distance(k, *n) == Some(d - 1))
                .collect();
            closer[rng.random_range(0..closer.len())]
        } else {
            nbrs[rng.random_range(0..nbrs.len())]
        };
        path.push(next);
        cell = next;
    }
    path
}

fn yaw_deg(from: Cell, to: Cell) -> f64 {
    let dx = to.0 as f64 - from.0 as f64;
    let dz = to.1 as f64 - from.1 as f64;
    let y = dx.atan2(dz).to_degrees();
    if y >= 180.0 {
        y - 360.0
    } else {
        y
    }
}

/// Samples a cell path at a fixed period while moving at `speed` cells per
/// second between cell centres. Cells map to metres with x = column and
/// z = row; y is the floor. Yaw faces the current segment. A final sample
/// is placed at the arrival time.
pub fn sample_path(path: &[Cell], speed: f64, period_ms: u32) -> Vec<TrajectorySample> {
    let segments = path.len().saturating_sub(1);
    let at = |pos: f64, t: f64| {
        let seg = (pos.floor() as usize).min(segments.saturating_sub(1));
        let frac = pos - seg as f64;
        let (a, b) = if segments == 0 {
            (path[0], path[0])
        } else {
            (path[seg], path[seg + 1])
        };
        TrajectorySample {
            t,
            x: a.0 as f64 + (b.0 as f64 - a.0 as f64) * frac,
            y: 0.0,
            z: a.1 as f64 + (b.1 as f64 - a.1 as f64) * frac,
            yaw: if segments == 0 { 0.0 } else { yaw_deg(a, b) },
            pitch: 0.0,
        }
        .quantized()
    };
    let total_ms = segments as f64 * 1000.0 / speed;
    let mut out = Vec::new();
    let mut j: u64 = 0;
    loop {
        let ms = (j * period_ms as u64) as f64;
        if ms >= total_ms {
            break;
        }
        out.push(at(ms * speed / 1000.0, ms / 1000.0));
        j += 1;
    }
    out.push(at(segments as f64, total_ms / 1000.0));
    out
}

pub fn simulate_trajectory<R: Rng + ?Sized>(
    grid: &Grid,
    k: usize,
    bias: f64,
    speed: f64,
    period_ms: u32,
    rng: &mut R,
) -> Vec<TrajectorySample> {
    sample_path(&walk_path(grid, k, bias, rng), speed, period_ms)
}

/// Sum of Euclidean distances between consecutive samples.
pub fn path_length(samples: &[TrajectorySample]) -> f64 {
    samples
        .windows(2)
        .map(|w| {
            let (a, b) = (&w[0], &w[1]);
            ((b.x - a.x).powi(2) + (b.y - a.y).powi(2) + (b.z - a.z).powi(2)).sqrt()
        })
        .sum()
}
