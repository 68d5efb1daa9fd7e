//! Replacement-vector sampling under the similarity bound.
//!
//! Codebook neighbours of a vector are ranked by ascending distance (rank 0
//! is the vector itself). For each image an upper rank `n ~ U[floor, N_K]`
//! is drawn once; every replaced cell then takes the neighbour at rank
//! `k ~ U[floor, n]`, where `floor = floor(lambda_s * N_K)` keeps the most
//! similar vectors out of reach.

use std::cmp::Ordering;

use rand::Rng;

use crate::error::{DsrError, Result};
use crate::vq::squared_distance;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityBound {
    lambda_s: f64,
    codebook_size: usize,
    floor_index: usize,
}

impl SimilarityBound {
    pub fn new(lambda_s: f64, codebook_size: usize) -> Result<Self> {
        if !(lambda_s > 0.0 && lambda_s < 1.0) {
            return Err(DsrError::contract(format!(
                "similarity bound {lambda_s} must lie in (0, 1)"
            )));
        }
        let floor_index = (lambda_s * codebook_size as f64).floor() as usize;
        if floor_index < 1 || floor_index >= codebook_size {
            return Err(DsrError::contract(format!(
                "similarity bound {lambda_s} over {codebook_size} vectors excludes {floor_index} \
                 neighbours; need 1 <= floor < N_K"
            )));
        }
        Ok(Self {
            lambda_s,
            codebook_size,
            floor_index,
        })
    }

    pub fn lambda_s(&self) -> f64 {
        self.lambda_s
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    /// Lowest rank that may be sampled.
    pub fn floor_index(&self) -> usize {
        self.floor_index
    }

    /// Per-image upper rank, uniform on `[floor, N_K]`.
    pub fn draw_upper<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(self.floor_index..=self.codebook_size)
    }

    /// Rank uniform on `[floor, min(n_upper, N_K - 1)]`.
    pub fn draw_rank<R: Rng + ?Sized>(&self, n_upper: usize, rng: &mut R) -> Result<usize> {
        if n_upper < self.floor_index || n_upper > self.codebook_size {
            return Err(DsrError::contract(format!(
                "upper rank {n_upper} outside [{}, {}]",
                self.floor_index, self.codebook_size
            )));
        }
        let top = n_upper.min(self.codebook_size - 1);
        Ok(rng.random_range(self.floor_index..=top))
    }
}

/// Codebook indices ordered by ascending distance to `query`, ties by index.
pub fn rank_neighbors(query: &[f32], codes: &[f32], dim: usize) -> Vec<u32> {
    let mut keyed: Vec<(f32, u32)> = codes
        .chunks_exact(dim)
        .enumerate()
        .map(|(i, c)| (squared_distance(query, c), i as u32))
        .collect();
    keyed.sort_by(cmp_key);
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Index at `rank` in [`rank_neighbors`] order, via partial selection.
pub fn neighbor_at_rank(query: &[f32], codes: &[f32], dim: usize, rank: usize) -> u32 {
    let mut keyed: Vec<(f32, u32)> = codes
        .chunks_exact(dim)
        .enumerate()
        .map(|(i, c)| (squared_distance(query, c), i as u32))
        .collect();
    let (_, nth, _) = keyed.select_nth_unstable_by(rank, cmp_key);
    nth.1
}

fn cmp_key(a: &(f32, u32), b: &(f32, u32)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Draws a replacement from a precomputed neighbour ranking.
pub fn sample_replacement_index<R: Rng + ?Sized>(
    sorted_neighbor_ranks: &[u32],
    bound: &SimilarityBound,
    n_upper: usize,
    rng: &mut R,
) -> Result<u32> {
    if sorted_neighbor_ranks.len() != bound.codebook_size {
        return Err(DsrError::contract(format!(
            "ranking lists {} entries for a codebook of {}",
            sorted_neighbor_ranks.len(),
            bound.codebook_size
        )));
    }
    let k = bound.draw_rank(n_upper, rng)?;
    Ok(sorted_neighbor_ranks[k])
}

/// How neighbour ranks are resolved during injection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RankingStrategy {
    /// Sort the full codebook per replaced cell.
    FullSort,
    /// Select only the drawn rank.
    #[default]
    PartialSelect,
}

/// Replacement policy for masked cells.
#[derive(Clone, Copy, Debug)]
pub enum Sampling {
    Bounded {
        bound: SimilarityBound,
        strategy: RankingStrategy,
    },
    /// Uniform over every codebook vector other than the original.
    Uniform,
}

impl Sampling {
    pub fn bounded(lambda_s: f64, codebook_size: usize) -> Result<Self> {
        Ok(Self::Bounded {
            bound: SimilarityBound::new(lambda_s, codebook_size)?,
            strategy: RankingStrategy::default(),
        })
    }
}

/// Counts of replacement draws, by sampler.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SamplerCounts {
    pub bounded: u64,
    pub uniform: u64,
}

impl std::ops::AddAssign for SamplerCounts {
    fn add_assign(&mut self, o: Self) {
        self.bounded += o.bounded;
        self.uniform += o.uniform;
    }
}

/// Uniform over `[0, n_k)` minus `original`.
pub fn sample_uniform_replacement<R: Rng + ?Sized>(original: u32, n_k: usize, rng: &mut R) -> u32 {
    let r = rng.random_range(0..n_k as u32 - 1);
    if r >= original {
        r + 1
    } else {
        r
    }
}
