//! Structured prompts, their fixed-width featurization, and line-delimited
//! JSON prompt sets.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codebook::GridShape;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Counting,
    Position,
    Region,
    Text,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Counting, Task::Position, Task::Region, Task::Text];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Counting => "counting",
            Task::Position => "position",
            Task::Region => "region",
            Task::Text => "text",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    Above,
}

/// Half-open cell rectangle `[row0, row1) x [col0, col1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl Rect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..self.row1).contains(&row) && (self.col0..self.col1).contains(&col)
    }

    pub fn area(&self) -> usize {
        self.row1.saturating_sub(self.row0) * self.col1.saturating_sub(self.col0)
    }
}

/// A generation task with its targets. Category ids index the codebook's
/// semantic categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum PromptSpec {
    /// Exactly `count` cells of `category`.
    Counting { category: usize, count: usize },
    /// Centroid of `first` stands in `relation` to the centroid of `second`.
    Position { first: usize, second: usize, relation: Relation },
    /// Every cell inside `rect` shows `category`.
    Region { category: usize, rect: Rect },
    /// The first row spells `text` from its leftmost cell.
    Text { text: Vec<usize> },
}

impl PromptSpec {
    pub fn task(&self) -> Task {
        match self {
            PromptSpec::Counting { .. } => Task::Counting,
            PromptSpec::Position { .. } => Task::Position,
            PromptSpec::Region { .. } => Task::Region,
            PromptSpec::Text { .. } => Task::Text,
        }
    }

    pub fn validate(&self, categories: usize, grid: GridShape) -> Result<()> {
        let cat = |c: usize| {
            if c < categories {
                Ok(())
            } else {
                Err(Error::arg(format!("category {c} outside [0, {categories})")))
            }
        };
        match self {
            PromptSpec::Counting { category, count } => {
                cat(*category)?;
                if *count > grid.len() {
                    return Err(Error::arg(format!("count {count} exceeds {} cells", grid.len())));
                }
            }
            PromptSpec::Position { first, second, .. } => {
                cat(*first)?;
                cat(*second)?;
            }
            PromptSpec::Region { category, rect } => {
                cat(*category)?;
                if rect.row0 > rect.row1 || rect.col0 > rect.col1 || rect.row1 > grid.h || rect.col1 > grid.w {
                    return Err(Error::arg(format!("region {rect:?} outside {}x{} grid", grid.h, grid.w)));
                }
            }
            PromptSpec::Text { text } => {
                if text.len() > grid.w {
                    return Err(Error::arg(format!("text of length {} wider than grid ({})", text.len(), grid.w)));
                }
                text.iter().try_for_each(|&c| cat(c))?;
            }
        }
        Ok(())
    }
}

/// Fixed featurization of a [`PromptSpec`].
///
/// Layout: task one-hot (4) | primary category one-hot (K) | secondary
/// category one-hot (K) | count / T (1) | relation one-hot (2) | region
/// corners normalized by grid size (4) | text slots, `w` one-hots of width
/// `K+1` with index `K` marking an empty slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEncoder {
    pub categories: usize,
    pub grid: GridShape,
}

impl PromptEncoder {
    pub fn new(categories: usize, grid: GridShape) -> Self {
        Self { categories, grid }
    }

    pub fn width(&self) -> usize {
        let k = self.categories;
        4 + 2 * k + 1 + 2 + 4 + self.grid.w * (k + 1)
    }

    pub fn encode(&self, p: &PromptSpec) -> Result<Vec<f64>> {
        p.validate(self.categories, self.grid)?;
        let k = self.categories;
        let mut v = vec![0.0; self.width()];
        v[p.task().index()] = 1.0;
        let primary = 4;
        let secondary = primary + k;
        let count = secondary + k;
        let relation = count + 1;
        let region = relation + 2;
        let text = region + 4;
        match p {
            PromptSpec::Counting { category, count: n } => {
                v[primary + category] = 1.0;
                v[count] = *n as f64 / self.grid.len() as f64;
            }
            PromptSpec::Position { first, second, relation: r } => {
                v[primary + first] = 1.0;
                v[secondary + second] = 1.0;
                v[relation + matches!(r, Relation::Above) as usize] = 1.0;
            }
            PromptSpec::Region { category, rect } => {
                v[primary + category] = 1.0;
                let (h, w) = (self.grid.h as f64, self.grid.w as f64);
                v[region] = rect.row0 as f64 / h;
                v[region + 1] = rect.col0 as f64 / w;
                v[region + 2] = rect.row1 as f64 / h;
                v[region + 3] = rect.col1 as f64 / w;
            }
            PromptSpec::Text { text: s } => {
                for slot in 0..self.grid.w {
                    let sym = s.get(slot).copied().unwrap_or(k);
                    v[text + slot * (k + 1) + sym] = 1.0;
                }
            }
        }
        Ok(v)
    }
}

/// One line of a prompt-set file.
///
/// `categories` lists the categories involved: `[c]` for counting and
/// region, `[first, second]` for position, and the target string itself
/// for text. `targets` carries the task-specific numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub task: Task,
    pub categories: Vec<usize>,
    #[serde(default)]
    pub targets: Targets,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<Relation>,
    /// `[row0, col0, row1, col1]`, half-open.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<[usize; 4]>,
}

impl PromptRecord {
    pub fn from_spec(spec: &PromptSpec, weight: f64) -> Self {
        let (categories, targets) = match spec {
            PromptSpec::Counting { category, count } => (
                vec![*category],
                Targets {
                    count: Some(*count),
                    ..Default::default()
                },
            ),
            PromptSpec::Position { first, second, relation } => (
                vec![*first, *second],
                Targets {
                    relation: Some(*relation),
                    ..Default::default()
                },
            ),
            PromptSpec::Region { category, rect } => (
                vec![*category],
                Targets {
                    region: Some([rect.row0, rect.col0, rect.row1, rect.col1]),
                    ..Default::default()
                },
            ),
            PromptSpec::Text { text } => (text.clone(), Targets::default()),
        };
        Self {
            task: spec.task(),
            categories,
            targets,
            weight,
        }
    }

    pub fn to_spec(&self) -> Result<PromptSpec> {
        let missing = |what: &str| Error::Format(format!("{} prompt needs {what}", self.task));
        let cats = &self.categories;
        Ok(match self.task {
            Task::Counting => PromptSpec::Counting {
                category: *cats.first().ok_or_else(|| missing("one category"))?,
                count: self.targets.count.ok_or_else(|| missing("targets.count"))?,
            },
            Task::Position => {
                if cats.len() != 2 {
                    return Err(missing("two categories"));
                }
                PromptSpec::Position {
                    first: cats[0],
                    second: cats[1],
                    relation: self.targets.relation.ok_or_else(|| missing("targets.relation"))?,
                }
            }
            Task::Region => {
                let [row0, col0, row1, col1] = self.targets.region.ok_or_else(|| missing("targets.region"))?;
                PromptSpec::Region {
                    category: *cats.first().ok_or_else(|| missing("one category"))?,
                    rect: Rect { row0, col0, row1, col1 },
                }
            }
            Task::Text => PromptSpec::Text { text: cats.clone() },
        })
    }
}

/// Weighted prompt collection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptSet {
    pub prompts: Vec<PromptSpec>,
    pub weights: Vec<f64>,
}

impl PromptSet {
    pub fn uniform(prompts: Vec<PromptSpec>) -> Self {
        let weights = vec![1.0; prompts.len()];
        Self { prompts, weights }
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut set = PromptSet::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let rec: PromptRecord = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("prompt line {}: {e}", i + 1)))?;
            if !(rec.weight >= 0.0 && rec.weight.is_finite()) {
                return Err(Error::Format(format!("prompt line {}: bad weight {}", i + 1, rec.weight)));
            }
            set.prompts.push(rec.to_spec()?);
            set.weights.push(rec.weight);
        }
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_jsonl(&fs::read_to_string(path)?)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (p, &w) in self.prompts.iter().zip(&self.weights) {
            out.push_str(&serde_json::to_string(&PromptRecord::from_spec(p, w)).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn validate(&self, categories: usize, grid: GridShape) -> Result<()> {
        self.prompts.iter().try_for_each(|p| p.validate(categories, grid))
    }

    pub fn filter_task(&self, task: Task) -> PromptSet {
        let (prompts, weights) = self
            .prompts
            .iter()
            .zip(&self.weights)
            .filter(|(p, _)| p.task() == task)
            .map(|(p, w)| (p.clone(), *w))
            .unzip();
        PromptSet { prompts, weights }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc() -> PromptEncoder {
        PromptEncoder::new(8, GridShape::new(8, 8))
    }

    #[test]
    fn equal_specs_equal_vectors() {
        let a = PromptSpec::Counting { category: 2, count: 5 };
        assert_eq!(enc().encode(&a).unwrap(), enc().encode(&a.clone()).unwrap());
        assert_eq!(enc().encode(&a).unwrap().len(), enc().width());
        assert_eq!(enc().width(), 99);
    }

    #[test]
    fn count_feature_endpoints() {
        let e = enc();
        let at = |n| e.encode(&PromptSpec::Counting { category: 0, count: n }).unwrap()[4 + 16];
        assert_eq!(at(0), 0.0);
        assert_eq!(at(64), 1.0);
        assert!(e.encode(&PromptSpec::Counting { category: 0, count: 65 }).is_err());
    }

    #[test]
    fn tasks_have_distinct_one_hot() {
        let e = enc();
        let specs = [
            PromptSpec::Counting { category: 1, count: 3 },
            PromptSpec::Position { first: 1, second: 2, relation: Relation::Above },
            PromptSpec::Region {
                category: 1,
                rect: Rect { row0: 0, col0: 0, row1: 2, col1: 2 },
            },
            PromptSpec::Text { text: vec![1, 2, 3] },
        ];
        for (i, s) in specs.iter().enumerate() {
            let v = e.encode(s).unwrap();
            let block: Vec<f64> = (0..4).map(|j| if j == i { 1.0 } else { 0.0 }).collect();
            assert_eq!(&v[..4], &block[..]);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let e = enc();
        assert!(e.encode(&PromptSpec::Counting { category: 8, count: 1 }).is_err());
        assert!(e
            .encode(&PromptSpec::Region {
                category: 0,
                rect: Rect { row0: 0, col0: 0, row1: 9, col1: 2 }
            })
            .is_err());
        assert!(e.encode(&PromptSpec::Text { text: vec![0; 9] }).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let set = PromptSet {
            prompts: vec![
                PromptSpec::Counting { category: 3, count: 4 },
                PromptSpec::Position { first: 0, second: 5, relation: Relation::LeftOf },
                PromptSpec::Region {
                    category: 7,
                    rect: Rect { row0: 1, col0: 2, row1: 3, col1: 4 },
                },
                PromptSpec::Text { text: vec![4, 4, 1] },
            ],
            weights: vec![7.0, 4.0, 1.0, 0.5],
        };
        let text = set.to_jsonl();
        assert!(text.lines().next().unwrap().contains(r#""task":"counting""#));
        assert_eq!(PromptSet::parse_jsonl(&text).unwrap(), set);
    }

    #[test]
    fn jsonl_literal_record() {
        let line = r#"{"task":"position","categories":[1,2],"targets":{"relation":"above"},"weight":2}"#;
        let set = PromptSet::parse_jsonl(line).unwrap();
        assert_eq!(
            set.prompts[0],
            PromptSpec::Position { first: 1, second: 2, relation: Relation::Above }
        );
        assert_eq!(set.weights, vec![2.0]);
        assert!(PromptSet::parse_jsonl(r#"{"task":"counting","categories":[1]}"#).is_err());
        assert!(PromptSet::parse_jsonl("not json").is_err());
    }
}
