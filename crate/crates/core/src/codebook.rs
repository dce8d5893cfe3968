//! Synthetic VQ codebook.
//!
//! Tokens are grouped into `K` semantic categories of `V/K` contiguous ids.
//! Category centers are orthonormal, and each token embedding is its
//! center plus seeded gaussian jitter, renormalized. Tokens of the same
//! category therefore have high cosine similarity even though their ids
//! differ, while tokens of different categories are close to orthogonal.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Grid layout of a token sequence (raster order, row-major).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub h: usize,
    pub w: usize,
}

impl GridShape {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(row, col)` of raster position `t`.
    pub fn coords(&self, t: usize) -> (usize, usize) {
        (t / self.w, t % self.w)
    }
}

impl Default for GridShape {
    fn default() -> Self {
        Self { h: 8, w: 8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    vocab: usize,
    dim: usize,
    categories: usize,
    embeddings: Vec<f64>,
}

impl Codebook {
    /// Builds a codebook of `vocab` unit vectors in `R^dim` over
    /// `categories` orthonormal centers.
    pub fn build(vocab: usize, dim: usize, categories: usize, intra_noise: f64, seed: u64) -> Result<Self> {
        if vocab == 0 || categories == 0 {
            return Err(Error::arg("vocab and category count must be positive"));
        }
        if !vocab.is_multiple_of(categories) {
            return Err(Error::arg(format!("{categories} categories do not divide vocab {vocab}")));
        }
        if dim < categories {
            return Err(Error::arg(format!(
                "embedding dim {dim} cannot hold {categories} orthonormal centers"
            )));
        }
        if !(0.0..=0.5).contains(&intra_noise) {
            return Err(Error::arg(format!("intra_noise {intra_noise} outside [0, 0.5]")));
        }

        let mut rng = Rng::derive(seed, &[0xc0de]);
        let centers = gram_schmidt(categories, dim, &mut rng)?;
        let per = vocab / categories;
        // Per-component std noise/sqrt(C): the noise vector has expected
        // norm close to `intra_noise` whatever the embedding width.
        let sd = intra_noise / (dim as f64).sqrt();
        let mut embeddings = Vec::with_capacity(vocab * dim);
        for tok in 0..vocab {
            let c = &centers[tok / per];
            let mut e: Vec<f64> = c.iter().map(|&x| x + sd * rng.normal()).collect();
            normalize(&mut e);
            embeddings.extend(e);
        }
        let cb = Self {
            vocab,
            dim,
            categories,
            embeddings,
        };
        cb.check_geometry()?;
        Ok(cb)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_categories(&self) -> usize {
        self.categories
    }

    pub fn tokens_per_category(&self) -> usize {
        self.vocab / self.categories
    }

    pub fn category_of(&self, token: usize) -> usize {
        token / self.tokens_per_category()
    }

    /// Token ids belonging to category `c`.
    pub fn tokens_in(&self, c: usize) -> std::ops::Range<usize> {
        let per = self.tokens_per_category();
        c * per..(c + 1) * per
    }

    pub fn embedding(&self, token: usize) -> &[f64] {
        &self.embeddings[token * self.dim..(token + 1) * self.dim]
    }

    /// Position-wise embedding lookup.
    pub fn embed(&self, tokens: &[usize]) -> Result<Vec<&[f64]>> {
        tokens
            .iter()
            .map(|&t| {
                if t < self.vocab {
                    Ok(self.embedding(t))
                } else {
                    Err(Error::arg(format!("token {t} outside vocab {}", self.vocab)))
                }
            })
            .collect()
    }

    pub fn categories_of(&self, tokens: &[usize]) -> Vec<usize> {
        tokens.iter().map(|&t| self.category_of(t)).collect()
    }

    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        // Embeddings are unit norm.
        dot(self.embedding(a), self.embedding(b))
    }

    /// `(mean intra-category cosine, mean inter-category cosine)` over all
    /// unordered token pairs; `None` where a class of pairs is empty.
    pub fn cosine_summary(&self) -> (Option<f64>, Option<f64>) {
        let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
        for a in 0..self.vocab {
            for b in a + 1..self.vocab {
                let c = self.cosine(a, b);
                if self.category_of(a) == self.category_of(b) {
                    intra += c;
                    n_intra += 1;
                } else {
                    inter += c;
                    n_inter += 1;
                }
            }
        }
        (
            (n_intra > 0).then(|| intra / n_intra as f64),
            (n_inter > 0).then(|| inter / n_inter as f64),
        )
    }

    fn check_geometry(&self) -> Result<()> {
        if let (Some(intra), Some(inter)) = self.cosine_summary() {
            if intra <= inter {
                return Err(Error::Contract(format!(
                    "codebook geometry degenerate: intra-category cosine {intra:.4} <= inter {inter:.4}"
                )));
            }
        }
        Ok(())
    }

    /// Fixed display color of category `c` (hue `c/K`, full saturation).
    pub fn category_color(&self, c: usize) -> [u8; 3] {
        hue_to_rgb(c as f64 / self.categories as f64)
    }

    /// Writes the grid as a binary PPM, one pixel per cell.
    pub fn render_grid(&self, tokens: &[usize], shape: GridShape, path: &Path) -> Result<()> {
        let bytes = self.render_ppm(tokens, shape)?;
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(&bytes)?;
        f.flush()?;
        Ok(())
    }

    pub fn render_ppm(&self, tokens: &[usize], shape: GridShape) -> Result<Vec<u8>> {
        if tokens.len() != shape.len() {
            return Err(Error::arg(format!(
                "{} tokens do not fill a {}x{} grid",
                tokens.len(),
                shape.h,
                shape.w
            )));
        }
        let mut out = format!("P6\n{} {}\n255\n", shape.w, shape.h).into_bytes();
        for &t in tokens {
            if t >= self.vocab {
                return Err(Error::arg(format!("token {t} outside vocab {}", self.vocab)));
            }
            out.extend_from_slice(&self.category_color(self.category_of(t)));
        }
        Ok(out)
    }
}

fn gram_schmidt(k: usize, dim: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        // Two passes of classical Gram-Schmidt for numerical orthogonality.
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        if norm(&v) < 1e-6 {
            continue;
        }
        normalize(&mut v);
        basis.push(v);
    }
    Ok(basis)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(a: &mut [f64]) {
    let n = norm(a);
    a.iter_mut().for_each(|x| *x /= n);
}

fn hue_to_rgb(h: f64) -> [u8; 3] {
    let x = h * 6.0;
    let sector = x.floor() as i64 % 6;
    let f = x - x.floor();
    let (r, g, b) = match sector {
        0 => (1.0, f, 0.0),
        1 => (1.0 - f, 1.0, 0.0),
        2 => (0.0, 1.0, f),
        3 => (0.0, 1.0 - f, 1.0),
        4 => (f, 0.0, 1.0),
        _ => (1.0, 0.0, 1.0 - f),
    };
    let q = |v: f64| (v * 255.0).round() as u8;
    [q(r), q(g), q(b)]
}
