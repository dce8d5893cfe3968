//! Procedural prompts and prompt-satisfying grids.

use crate::codebook::{Codebook, GridShape};
use crate::numerics::Rng;

use super::prompt::{PromptSet, PromptSpec, Rect, Relation, Task};

/// Inclusive target-count range for generated counting prompts.
pub const COUNT_RANGE: (usize, usize) = (2, 12);
const MIN_TEXT_LEN: usize = 3;

/// Draws a random prompt of the given task.
pub fn random_prompt(task: Task, categories: usize, grid: GridShape, rng: &mut Rng) -> PromptSpec {
    match task {
        Task::Counting => {
            let hi = COUNT_RANGE.1.min(grid.len());
            let lo = COUNT_RANGE.0.min(hi);
            PromptSpec::Counting {
                category: rng.below(categories),
                count: rng.range_inclusive(lo, hi),
            }
        }
        Task::Position => {
            let first = rng.below(categories);
            let second = (first + 1 + rng.below(categories - 1)) % categories;
            let relation = if rng.bernoulli(0.5) { Relation::LeftOf } else { Relation::Above };
            PromptSpec::Position { first, second, relation }
        }
        Task::Region => {
            let rh = rng.range_inclusive(2.min(grid.h), 4.min(grid.h));
            let rw = rng.range_inclusive(2.min(grid.w), 4.min(grid.w));
            let row0 = rng.below(grid.h - rh + 1);
            let col0 = rng.below(grid.w - rw + 1);
            PromptSpec::Region {
                category: rng.below(categories),
                rect: Rect {
                    row0,
                    col0,
                    row1: row0 + rh,
                    col1: col0 + rw,
                },
            }
        }
        Task::Text => {
            let len = rng.range_inclusive(MIN_TEXT_LEN.min(grid.w), grid.w);
            PromptSpec::Text {
                text: (0..len).map(|_| rng.below(categories)).collect(),
            }
        }
    }
}

/// Task drawn with probability proportional to `weights` (indexed by
/// [`Task::index`]).
pub fn sample_task(weights: &[f64; 4], rng: &mut Rng) -> Task {
    Task::ALL[rng.weighted(weights)]
}

/// A frozen prompt set of `n` prompts per listed task.
pub fn heldout_set(tasks: &[Task], n: usize, categories: usize, grid: GridShape, seed: u64) -> PromptSet {
    let mut prompts = Vec::with_capacity(n * tasks.len());
    for &task in tasks {
        let mut rng = Rng::derive(seed, &[0x4e1d, task.index() as u64]);
        prompts.extend((0..n).map(|_| random_prompt(task, categories, grid, &mut rng)));
    }
    PromptSet::uniform(prompts)
}

fn token_in(cb: &Codebook, category: usize, rng: &mut Rng) -> usize {
    cb.tokens_in(category).start + rng.below(cb.tokens_per_category())
}

/// First category cyclically after `after` that is not in `exclude`.
fn background_after(k: usize, after: usize, exclude: &[usize]) -> usize {
    (1..=k).map(|d| (after + d) % k).find(|c| !exclude.contains(c)).unwrap_or(after % k)
}

/// A grid satisfying `prompt`, after which each cell is independently
/// replaced by a uniform token with probability `noise`.
///
/// Cells not constrained by the prompt take tokens of a background
/// category fixed by the prompt: the first category after the prompt's
/// primary one that the prompt does not mention. A background drawn per
/// grid would be ambiguous from the prefix alone.
pub fn target_grid(prompt: &PromptSpec, cb: &Codebook, grid: GridShape, noise: f64, rng: &mut Rng) -> Vec<usize> {
    let t = grid.len();
    let mut cells: Vec<usize> = match prompt {
        PromptSpec::Counting { category, count } => {
            let mut order: Vec<usize> = (0..t).collect();
            rng.shuffle(&mut order);
            let bg = background_after(cb.num_categories(), *category, &[*category]);
            let mut cells: Vec<usize> = (0..t).map(|_| token_in(cb, bg, rng)).collect();
            for &pos in order.iter().take(*count) {
                cells[pos] = token_in(cb, *category, rng);
            }
            cells
        }
        PromptSpec::Position { first, second, relation } => {
            let bg = background_after(cb.num_categories(), *first, &[*first, *second]);
            let mut cells: Vec<usize> = (0..t).map(|_| token_in(cb, bg, rng)).collect();
            let (a, b) = place_pair(grid, *relation, rng);
            for pos in cells_of(a, grid) {
                cells[pos] = token_in(cb, *first, rng);
            }
            for pos in cells_of(b, grid) {
                cells[pos] = token_in(cb, *second, rng);
            }
            cells
        }
        PromptSpec::Region { category, rect } => {
            let bg = background_after(cb.num_categories(), *category, &[*category]);
            (0..t)
                .map(|pos| {
                    let (r, c) = grid.coords(pos);
                    token_in(cb, if rect.contains(r, c) { *category } else { bg }, rng)
                })
                .collect()
        }
        PromptSpec::Text { text } => {
            let bg = background_after(cb.num_categories(), text.first().copied().unwrap_or(0), &[]);
            (0..t)
                .map(|pos| match text.get(pos) {
                    Some(&c) if pos < grid.w => token_in(cb, c, rng),
                    _ => token_in(cb, bg, rng),
                })
                .collect()
        }
    };
    if noise > 0.0 {
        for c in cells.iter_mut() {
            if rng.bernoulli(noise) {
                *c = rng.below(cb.vocab());
            }
        }
    }
    cells
}

fn cells_of(r: Rect, grid: GridShape) -> impl Iterator<Item = usize> {
    (r.row0..r.row1).flat_map(move |row| (r.col0..r.col1).map(move |col| row * grid.w + col))
}

fn overlaps(a: &Rect, b: &Rect) -> bool {
    a.row0 < b.row1 && b.row0 < a.row1 && a.col0 < b.col1 && b.col0 < a.col1
}

/// Two non-overlapping patches whose centers satisfy `relation`.
fn place_pair(grid: GridShape, relation: Relation, rng: &mut Rng) -> (Rect, Rect) {
    let patch = |rng: &mut Rng| {
        let h = rng.range_inclusive(1, 2.min(grid.h));
        let w = rng.range_inclusive(1, 2.min(grid.w));
        let row0 = rng.below(grid.h - h + 1);
        let col0 = rng.below(grid.w - w + 1);
        Rect {
            row0,
            col0,
            row1: row0 + h,
            col1: col0 + w,
        }
    };
    // Centers compared at doubled resolution to stay in integers.
    let center2 = |r: &Rect| (r.row0 + r.row1, r.col0 + r.col1);
    for _ in 0..200 {
        let (a, b) = (patch(rng), patch(rng));
        let ((ar, ac), (br, bc)) = (center2(&a), center2(&b));
        let ok = match relation {
            Relation::LeftOf => ac < bc,
            Relation::Above => ar < br,
        };
        if ok && !overlaps(&a, &b) {
            return (a, b);
        }
    }
    let cell = |row, col| Rect {
        row0: row,
        col0: col,
        row1: row + 1,
        col1: col + 1,
    };
    match relation {
        Relation::LeftOf => (cell(0, 0), cell(0, grid.w - 1)),
        Relation::Above => (cell(0, 0), cell(grid.h - 1, 0)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::{score, RewardOptions};

    #[test]
    fn noiseless_grids_satisfy_their_prompts() {
        let cb = Codebook::build(64, 16, 8, 0.1, 1).unwrap();
        let grid = GridShape::default();
        let mut rng = Rng::new(5);
        for task in Task::ALL {
            for _ in 0..50 {
                let p = random_prompt(task, 8, grid, &mut rng);
                p.validate(8, grid).unwrap();
                let cells = target_grid(&p, &cb, grid, 0.0, &mut rng);
                assert_eq!(cells.len(), 64);
                let r = score(&cells, &cb, grid, &p, &RewardOptions::default()).unwrap();
                assert_eq!(r, 1.0, "{p:?}");
            }
        }
    }

    #[test]
    fn heldout_is_frozen() {
        let g = GridShape::default();
        let a = heldout_set(&[Task::Counting, Task::Text], 16, 8, g, 3);
        assert_eq!(a, heldout_set(&[Task::Counting, Task::Text], 16, 8, g, 3));
        assert_eq!(a.len(), 32);
        assert_eq!(a.filter_task(Task::Text).len(), 16);
    }
}
