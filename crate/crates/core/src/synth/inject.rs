//! Latent-space anomaly injection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::SynthConfig;
use crate::error::{DsrError, Result};
use crate::synth::perlin::perlin_mask;
use crate::synth::sampler::{
    neighbor_at_rank, rank_neighbors, sample_uniform_replacement, RankingStrategy, SamplerCounts,
    Sampling,
};
use crate::types::{AnomalyMask, Level};
use crate::vq::{lookup, Codebook, QuantizedGrid};

/// Anomalous grids with their ground-truth masks, one entry per batch image.
#[derive(Clone, Debug)]
pub struct AnomalyInjection {
    pub q_hi: QuantizedGrid,
    pub q_lo: QuantizedGrid,
    pub mask_full: Vec<AnomalyMask>,
    pub mask_hi: Vec<AnomalyMask>,
    pub mask_lo: Vec<AnomalyMask>,
    pub counts: SamplerCounts,
}

/// Generates a noise mask per image at input resolution and replaces the
/// covered cells of both grids.
pub fn inject_anomalies(
    q_hi: &QuantizedGrid,
    q_lo: &QuantizedGrid,
    codebook_hi: &Codebook,
    codebook_lo: &Codebook,
    sampling: &Sampling,
    synth: &SynthConfig,
    seed: u64,
) -> Result<AnomalyInjection> {
    let (b, _, hh, wh) = q_hi.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks = (0..b)
        .map(|_| {
            perlin_mask(
                hh * Level::Hi.stride(),
                wh * Level::Hi.stride(),
                rng.random(),
                synth,
            )
            .map(|m| m.mask)
        })
        .collect::<Result<Vec<_>>>()?;
    inject_with_masks(q_hi, q_lo, codebook_hi, codebook_lo, sampling, masks, &mut rng)
}

/// Replaces the cells of both grids covered by the given input-resolution masks.
pub fn inject_with_masks<R: Rng + ?Sized>(
    q_hi: &QuantizedGrid,
    q_lo: &QuantizedGrid,
    codebook_hi: &Codebook,
    codebook_lo: &Codebook,
    sampling: &Sampling,
    mask_full: Vec<AnomalyMask>,
    rng: &mut R,
) -> Result<AnomalyInjection> {
    let (b, _, hh, wh) = q_hi.dims();
    let (bl, _, hl, wl) = q_lo.dims();
    if bl != b || hh != 2 * hl || wh != 2 * wl {
        return Err(DsrError::contract(format!(
            "hi grid {b}x{hh}x{wh} is not twice lo grid {bl}x{hl}x{wl}"
        )));
    }
    if mask_full.len() != b {
        return Err(DsrError::contract(format!("{} masks for {b} images", mask_full.len())));
    }
    if let Sampling::Bounded { bound, .. } = sampling {
        for cb in [codebook_hi, codebook_lo] {
            if bound.codebook_size() != cb.size() {
                return Err(DsrError::contract("similarity bound built for another codebook size"));
            }
        }
    }
    let codes_hi = codebook_hi.to_vec()?;
    let codes_lo = codebook_lo.to_vec()?;
    let mut idx_hi = q_hi.indices.clone();
    let mut idx_lo = q_lo.indices.clone();
    let mut mask_hi = Vec::with_capacity(b);
    let mut mask_lo = Vec::with_capacity(b);
    let mut counts = SamplerCounts::default();
    for (i, full) in mask_full.iter().enumerate() {
        if (full.height(), full.width()) != (hh * 4, wh * 4) {
            return Err(DsrError::contract(format!(
                "mask {}x{} does not match input resolution {}x{}",
                full.height(),
                full.width(),
                hh * 4,
                wh * 4
            )));
        }
        let mh = full.max_pool(Level::Hi.stride())?;
        let ml = full.max_pool(Level::Lo.stride())?;
        counts += replace_cells(
            &mut idx_hi[i * hh * wh..(i + 1) * hh * wh],
            &mh,
            &codes_hi,
            codebook_hi.dim(),
            sampling,
            rng,
        )?;
        counts += replace_cells(
            &mut idx_lo[i * hl * wl..(i + 1) * hl * wl],
            &ml,
            &codes_lo,
            codebook_lo.dim(),
            sampling,
            rng,
        )?;
        mask_hi.push(mh);
        mask_lo.push(ml);
    }
    Ok(AnomalyInjection {
        q_hi: lookup(codebook_hi, idx_hi, b, hh, wh)?.detach(),
        q_lo: lookup(codebook_lo, idx_lo, b, hl, wl)?.detach(),
        mask_full,
        mask_hi,
        mask_lo,
        counts,
    })
}

fn replace_cells<R: Rng + ?Sized>(
    indices: &mut [u32],
    mask: &AnomalyMask,
    codes: &[f32],
    dim: usize,
    sampling: &Sampling,
    rng: &mut R,
) -> Result<SamplerCounts> {
    let n_k = codes.len() / dim;
    let mut counts = SamplerCounts::default();
    match sampling {
        Sampling::Bounded { bound, strategy } => {
            // one upper rank per image and level
            let n_upper = bound.draw_upper(rng);
            for (cell, on) in mask.data().iter().enumerate() {
                if *on == 0 {
                    continue;
                }
                let orig = indices[cell] as usize;
                let query = &codes[orig * dim..(orig + 1) * dim];
                let k = bound.draw_rank(n_upper, rng)?;
                indices[cell] = match strategy {
                    RankingStrategy::FullSort => rank_neighbors(query, codes, dim)[k],
                    RankingStrategy::PartialSelect => neighbor_at_rank(query, codes, dim, k),
                };
                counts.bounded += 1;
            }
        }
        Sampling::Uniform => {
            for (cell, on) in mask.data().iter().enumerate() {
                if *on != 0 {
                    indices[cell] = sample_uniform_replacement(indices[cell], n_k, rng);
                    counts.uniform += 1;
                }
            }
        }
    }
    Ok(counts)
}
