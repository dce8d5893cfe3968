//! Rule-based sequence rewards, the reference-anchored entropy reward, and
//! their combination.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codebook::{Codebook, GridShape};
use crate::error::{Error, Result};
use crate::policy::prompt::{PromptSpec, Relation, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardOptions {
    /// Clamp the counting reward into `[0, 1]`.
    pub counting_clamp: bool,
}

impl Default for RewardOptions {
    fn default() -> Self {
        Self { counting_clamp: true }
    }
}

pub type RewardFn = fn(&[usize], &Codebook, GridShape, &PromptSpec, &RewardOptions) -> Result<f64>;

/// Reward rule for `task`.
pub fn reward_fn(task: Task) -> RewardFn {
    match task {
        Task::Counting => |t, cb, g, p, o| counting_reward(t, cb, g, p, o.counting_clamp),
        Task::Position => |t, cb, g, p, _| position_reward(t, cb, g, p),
        Task::Region => |t, cb, g, p, _| region_reward(t, cb, g, p),
        Task::Text => |t, cb, g, p, _| text_reward(t, cb, g, p),
    }
}

/// Reward rule looked up by task name.
pub fn reward_fn_by_name(name: &str) -> Result<RewardFn> {
    Ok(reward_fn(Task::from_str(name)?))
}

/// Scores a grid against its prompt with the matching rule.
pub fn score(tokens: &[usize], cb: &Codebook, grid: GridShape, p: &PromptSpec, opts: &RewardOptions) -> Result<f64> {
    reward_fn(p.task())(tokens, cb, grid, p, opts)
}

fn check_grid(tokens: &[usize], cb: &Codebook, grid: GridShape) -> Result<()> {
    if tokens.len() != grid.len() {
        return Err(Error::arg(format!("{} tokens for a {}-cell grid", tokens.len(), grid.len())));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cb.vocab()) {
        return Err(Error::arg(format!("token {t} outside vocab {}", cb.vocab())));
    }
    Ok(())
}

fn wrong_task(expected: Task, p: &PromptSpec) -> Error {
    Error::arg(format!("{expected} reward applied to a {} prompt", p.task()))
}

/// `1 - |N_gen - N_ref| / N_ref`, clamped to `[0, 1]` when `clamp` is set.
pub fn counting_reward(tokens: &[usize], cb: &Codebook, grid: GridShape, p: &PromptSpec, clamp: bool) -> Result<f64> {
    let PromptSpec::Counting { category, count } = p else {
        return Err(wrong_task(Task::Counting, p));
    };
    if *count == 0 {
        return Err(Error::arg("counting target must be at least 1"));
    }
    check_grid(tokens, cb, grid)?;
    let generated = tokens.iter().filter(|&&t| cb.category_of(t) == *category).count();
    let r = 1.0 - (generated as f64 - *count as f64).abs() / *count as f64;
    Ok(if clamp { r.clamp(0.0, 1.0) } else { r })
}

fn centroid(tokens: &[usize], cb: &Codebook, grid: GridShape, category: usize) -> Option<(f64, f64)> {
    let (mut r, mut c, mut n) = (0.0, 0.0, 0usize);
    for (pos, &t) in tokens.iter().enumerate() {
        if cb.category_of(t) == category {
            let (row, col) = grid.coords(pos);
            r += row as f64;
            c += col as f64;
            n += 1;
        }
    }
    (n > 0).then(|| (r / n as f64, c / n as f64))
}

/// Fraction of the three clauses {first present, second present, relation
/// holds between their centroids} that are satisfied.
pub fn position_reward(tokens: &[usize], cb: &Codebook, grid: GridShape, p: &PromptSpec) -> Result<f64> {
    let PromptSpec::Position { first, second, relation } = p else {
        return Err(wrong_task(Task::Position, p));
    };
    if first == second {
        return Err(Error::arg("position prompt needs two distinct categories"));
    }
    check_grid(tokens, cb, grid)?;
    let a = centroid(tokens, cb, grid, *first);
    let b = centroid(tokens, cb, grid, *second);
    let holds = match (a, b, relation) {
        (Some((_, ac)), Some((_, bc)), Relation::LeftOf) => ac < bc,
        (Some((ar, _)), Some((br, _)), Relation::Above) => ar < br,
        _ => false,
    };
    let satisfied = a.is_some() as u8 + b.is_some() as u8 + holds as u8;
    Ok(satisfied as f64 / 3.0)
}

/// Fraction of cells inside the region showing the target category.
pub fn region_reward(tokens: &[usize], cb: &Codebook, grid: GridShape, p: &PromptSpec) -> Result<f64> {
    let PromptSpec::Region { category, rect } = p else {
        return Err(wrong_task(Task::Region, p));
    };
    if rect.area() == 0 {
        return Err(Error::arg("region is empty"));
    }
    check_grid(tokens, cb, grid)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (pos, &t) in tokens.iter().enumerate() {
        let (r, c) = grid.coords(pos);
        if rect.contains(r, c) {
            total += 1;
            hit += (cb.category_of(t) == *category) as usize;
        }
    }
    Ok(hit as f64 / total as f64)
}

/// Levenshtein distance with unit insert, delete and substitute costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + (x != y) as usize;
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `max(1 - N_e / N_ref, 0)` where the rendered string is the category
/// sequence of the first `N_ref` cells of the top row.
pub fn text_reward(tokens: &[usize], cb: &Codebook, grid: GridShape, p: &PromptSpec) -> Result<f64> {
    let PromptSpec::Text { text } = p else {
        return Err(wrong_task(Task::Text, p));
    };
    if text.is_empty() {
        return Err(Error::arg("text target is empty"));
    }
    if text.len() > grid.w {
        return Err(Error::arg("text target wider than the grid"));
    }
    check_grid(tokens, cb, grid)?;
    let rendered = cb.categories_of(&tokens[..text.len()]);
    let ne = edit_distance(&rendered, text);
    Ok((1.0 - ne as f64 / text.len() as f64).max(0.0))
}

/// `1 / (1 + (H_ref - H_theta)^2)`.
pub fn entropy_reward(h_ref: f64, h_theta: f64) -> f64 {
    let d = h_ref - h_theta;
    1.0 / (1.0 + d * d)
}

/// Which samples of a group receive the entropy bonus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyRewardMode {
    /// Only samples attaining the group's maximum base reward (all ties).
    #[default]
    Top,
    /// Every sample.
    All,
    Off,
}

impl fmt::Display for EntropyRewardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntropyRewardMode::Top => "top",
            EntropyRewardMode::All => "all",
            EntropyRewardMode::Off => "off",
        })
    }
}

impl FromStr for EntropyRewardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(Self::Top),
            "all" => Ok(Self::All),
            "off" => Ok(Self::Off),
            _ => Err(Error::arg(format!("unknown entropy reward mode {s:?}"))),
        }
    }
}

/// `R'_i = R_i + lambda * R_ent_i * bonus_i` with `bonus_i` chosen by `mode`.
pub fn combine_rewards(base: &[f64], ent: &[f64], lambda: f64, mode: EntropyRewardMode) -> Result<Vec<f64>> {
    if base.is_empty() {
        return Err(Error::arg("empty group"));
    }
    if base.len() != ent.len() {
        return Err(Error::arg(format!("{} rewards vs {} entropy rewards", base.len(), ent.len())));
    }
    if !(lambda >= 0.0) {
        return Err(Error::arg(format!("lambda must be non-negative, got {lambda}")));
    }
    let max = base.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(base
        .iter()
        .zip(ent)
        .map(|(&r, &e)| {
            let bonus = match mode {
                EntropyRewardMode::Top => r == max,
                EntropyRewardMode::All => true,
                EntropyRewardMode::Off => false,
            };
            if bonus {
                r + lambda * e
            } else {
                r
            }
        })
        .collect())
}

/// `lambda * mean(dH^2)`; the differentiable version lives in the objective.
pub fn entropy_loss_ablation(delta_h: &[f64], lambda: f64) -> f64 {
    if delta_h.is_empty() {
        return 0.0;
    }
    lambda * delta_h.iter().map(|d| d * d).sum::<f64>() / delta_h.len() as f64
}

/// Per-rollout rewards of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub base: Vec<f64>,
    pub entropy: Vec<f64>,
    pub combined: Vec<f64>,
}
