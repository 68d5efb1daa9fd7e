//! Latent codebooks, nearest-neighbour quantization and the VQ loss terms.
//!
//! Distances are squared Euclidean, accumulated in `f32` in dimension order.
//! Ties go to the lowest codebook index. Both rules are part of the contract:
//! they make assignments reproducible and independently checkable.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;

use crate::error::{DsrError, Result};
use crate::types::Level;

/// Commitment weight used when none is configured.
pub const DEFAULT_COMMITMENT_WEIGHT: f64 = 0.25;

/// Ordered set of `N_K` latent vectors of dimension `D`.
#[derive(Clone, Debug)]
pub struct Codebook {
    vectors: Var,
    level: Level,
}

impl Codebook {
    /// Wraps an `(N_K, D)` variable. Requires `N_K >= 2`.
    pub fn new(vectors: Var, level: Level) -> Result<Self> {
        let (n, d) = vectors.dims2()?;
        if n < 2 || d == 0 {
            return Err(DsrError::contract(format!(
                "codebook must hold at least 2 vectors of non-zero dimension, got {n}x{d}"
            )));
        }
        if vectors.dtype() != DType::F32 {
            return Err(DsrError::contract("codebook vectors must be f32"));
        }
        Ok(Self { vectors, level })
    }

    /// Builds a codebook from row-major `(N_K, D)` data.
    pub fn from_rows(data: Vec<f32>, dim: usize, level: Level, device: &Device) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(DsrError::contract(format!(
                "{} values cannot be split into rows of {dim}",
                data.len()
            )));
        }
        let n = data.len() / dim;
        let t = Tensor::from_vec(data, (n, dim), device)?;
        Self::new(Var::from_tensor(&t)?, level)
    }

    /// I.i.d. uniform initialization in `[-1/N_K, 1/N_K]`.
    pub fn random_uniform<R: Rng + ?Sized>(
        size: usize,
        dim: usize,
        level: Level,
        rng: &mut R,
        device: &Device,
    ) -> Result<Self> {
        let bound = 1.0 / size as f32;
        let data = (0..size * dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self::from_rows(data, dim, level, device)
    }

    pub fn size(&self) -> usize {
        self.vectors.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.dims()[1]
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn var(&self) -> &Var {
        &self.vectors
    }

    pub fn tensor(&self) -> &Tensor {
        self.vectors.as_tensor()
    }

    /// Row-major copy of all vectors.
    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.vectors.as_tensor().flatten_all()?.to_vec1::<f32>()?)
    }

    pub fn is_finite(&self) -> Result<bool> {
        Ok(self.to_vec()?.iter().all(|v| v.is_finite()))
    }
}

/// Un-quantized feature map, `(B, D, H, W)`.
#[derive(Clone, Debug)]
pub struct FeatureGrid {
    pub data: Tensor,
    pub level: Level,
}

impl FeatureGrid {
    pub fn new(data: Tensor, level: Level) -> Result<Self> {
        data.dims4()?;
        Ok(Self { data, level })
    }

    /// `(batch, dim, height, width)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.data.dims();
        (d[0], d[1], d[2], d[3])
    }
}

/// Quantized feature map whose every cell is an exact codebook member.
#[derive(Clone, Debug)]
pub struct QuantizedGrid {
    /// Value handed to downstream networks. After [`quantize_with_gradient`]
    /// it carries the straight-through gradient back to the features.
    pub data: Tensor,
    /// Gathered codebook rows, `(B, D, H, W)`. The only path through which
    /// codebook vectors receive gradient.
    pub codes: Tensor,
    /// Codebook index per cell, batch-major then row-major.
    pub indices: Vec<u32>,
    pub level: Level,
}

impl QuantizedGrid {
    /// `(batch, dim, height, width)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.data.dims();
        (d[0], d[1], d[2], d[3])
    }

    /// Indices of one image of the batch, row-major.
    pub fn image_indices(&self, b: usize) -> &[u32] {
        let (_, _, h, w) = self.dims();
        &self.indices[b * h * w..(b + 1) * h * w]
    }

    /// Copy with gradients cut on both tensors.
    pub fn detach(&self) -> Self {
        Self {
            data: self.data.detach(),
            codes: self.codes.detach(),
            indices: self.indices.clone(),
            level: self.level,
        }
    }
}

#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0f32;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Index of the nearest row of `codes` (row-major, `dim` wide) to `v`.
pub fn nearest_index(v: &[f32], codes: &[f32], dim: usize) -> usize {
    let mut best = 0;
    let mut best_d = f32::INFINITY;
    for (i, row) in codes.chunks_exact(dim).enumerate() {
        let d = squared_distance(v, row);
        // strict comparison keeps the lowest index on ties
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Assigns every `dim`-wide row of `rows` to its nearest codebook row.
pub fn assign_rows(rows: &[f32], codes: &[f32], dim: usize) -> Vec<u32> {
    rows.chunks_exact(dim)
        .map(|r| nearest_index(r, codes, dim) as u32)
        .collect()
}

fn check_dims(features: &FeatureGrid, codebook: &Codebook) -> Result<()> {
    let (_, d, _, _) = features.dims();
    if d != codebook.dim() {
        return Err(DsrError::contract(format!(
            "feature dimension {d} does not match codebook dimension {}",
            codebook.dim()
        )));
    }
    Ok(())
}

fn nearest_indices(features: &FeatureGrid, codebook: &Codebook) -> Result<Vec<u32>> {
    check_dims(features, codebook)?;
    let rows = features
        .data
        .detach()
        .permute((0, 2, 3, 1))?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let codes = codebook.to_vec()?;
    Ok(assign_rows(&rows, &codes, codebook.dim()))
}

/// Materializes a grid from explicit indices.
pub fn lookup(
    codebook: &Codebook,
    indices: Vec<u32>,
    batch: usize,
    height: usize,
    width: usize,
) -> Result<QuantizedGrid> {
    if indices.len() != batch * height * width {
        return Err(DsrError::contract(format!(
            "{} indices for a {batch}x{height}x{width} grid",
            indices.len()
        )));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i as usize >= codebook.size()) {
        return Err(DsrError::contract(format!(
            "index {bad} outside codebook of size {}",
            codebook.size()
        )));
    }
    let dev = codebook.tensor().device();
    let idx = Tensor::from_slice(&indices, indices.len(), dev)?;
    let codes = codebook
        .tensor()
        .index_select(&idx, 0)?
        .reshape((batch, height, width, codebook.dim()))?
        .permute((0, 3, 1, 2))?
        .contiguous()?;
    Ok(QuantizedGrid {
        data: codes.clone(),
        codes,
        indices,
        level: codebook.level(),
    })
}

/// Replaces each cell with its nearest codebook vector.
pub fn quantize(features: &FeatureGrid, codebook: &Codebook) -> Result<QuantizedGrid> {
    let (b, _, h, w) = features.dims();
    let indices = nearest_indices(features, codebook)?;
    Ok(lookup(codebook, indices, b, h, w)?.detach())
}

/// Same forward value as [`quantize`], differentiable via straight-through.
///
/// `data = sg[Q] + (F - sg[F])`: the forward value is exactly `Q`, the
/// gradient with respect to `F` is the gradient with respect to `data`, and
/// the codebook is reachable only through `codes`.
pub fn quantize_with_gradient(features: &FeatureGrid, codebook: &Codebook) -> Result<QuantizedGrid> {
    let (b, _, h, w) = features.dims();
    let indices = nearest_indices(features, codebook)?;
    let mut q = lookup(codebook, indices, b, h, w)?;
    let f = &features.data;
    let passthrough = (f - f.detach())?;
    q.data = (q.codes.detach() + passthrough)?;
    Ok(q)
}

/// Mean over cells of the squared Euclidean distance between two `(B, C, H, W)` tensors.
pub fn cell_l2(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(DsrError::contract(format!(
            "L2 operands differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok((a - b)?.sqr()?.sum(1)?.mean_all()?)
}

/// The two codebook terms of the first-stage objective.
#[derive(Clone, Debug)]
pub struct VqLosses {
    /// `L2(sg[F], Q)`: moves codebook vectors toward the features.
    pub codebook: Tensor,
    /// `lambda1 * L2(F, sg[Q])`: commits the encoder to its assignments.
    pub commitment: Tensor,
}

impl VqLosses {
    pub fn total(&self) -> Result<Tensor> {
        Ok((&self.codebook + &self.commitment)?)
    }
}

pub fn vq_losses(features: &FeatureGrid, quantized: &QuantizedGrid, lambda1: f64) -> Result<VqLosses> {
    if features.data.dims() != quantized.codes.dims() {
        return Err(DsrError::contract(format!(
            "feature grid {:?} and quantized grid {:?} differ in shape",
            features.data.dims(),
            quantized.codes.dims()
        )));
    }
    let codebook = cell_l2(&features.data.detach(), &quantized.codes)?;
    let commitment = (cell_l2(&features.data, &quantized.codes.detach())? * lambda1)?;
    Ok(VqLosses {
        codebook,
        commitment,
    })
}

/// Frequency of each codebook index over a set of assignments.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodebookUsage {
    pub counts: Vec<usize>,
}

impl CodebookUsage {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Entries used at least once.
    pub fn active(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// `exp(H)` of the empirical index distribution.
    pub fn perplexity(&self) -> f64 {
        let total = self.total() as f64;
        if total == 0.0 {
            return 0.0;
        }
        let h: f64 = self
            .counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total;
                -p * p.ln()
            })
            .sum();
        h.exp()
    }
}

pub fn codebook_usage<'a>(
    indices: impl IntoIterator<Item = &'a u32>,
    codebook_size: usize,
) -> CodebookUsage {
    let mut counts = vec![0; codebook_size];
    for &i in indices {
        if let Some(c) = counts.get_mut(i as usize) {
            *c += 1;
        }
    }
    CodebookUsage { counts }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(data: Vec<f32>, b: usize, d: usize, h: usize, w: usize) -> FeatureGrid {
        // data given cell-major (B, H, W, D) for readability
        let t = Tensor::from_vec(data, (b, h, w, d), &Device::Cpu)
            .unwrap()
            .permute((0, 3, 1, 2))
            .unwrap()
            .contiguous()
            .unwrap();
        FeatureGrid::new(t, Level::Hi).unwrap()
    }

    fn book(rows: Vec<f32>, d: usize) -> Codebook {
        Codebook::from_rows(rows, d, Level::Hi, &Device::Cpu).unwrap()
    }

    /// Independent oracle: full distance table, then first index attaining the minimum.
    fn oracle(rows: &[f32], codes: &[f32], d: usize) -> Vec<u32> {
        rows.chunks(d)
            .map(|r| {
                let dists: Vec<f32> = codes
                    .chunks(d)
                    .map(|c| r.iter().zip(c).fold(0f32, |a, (x, y)| a + (x - y) * (x - y)))
                    .collect();
                let min = dists.iter().cloned().fold(f32::INFINITY, f32::min);
                dists.iter().position(|&x| x == min).unwrap() as u32
            })
            .collect()
    }

    #[test]
    fn identity_cell_maps_to_itself() {
        let cb = book(vec![0., 0., 1., 1., 2., 0., 5., 5.], 2);
        let f = grid(vec![5., 5.], 1, 2, 1, 1);
        let q = quantize(&f, &cb).unwrap();
        assert_eq!(q.indices, vec![3]);
        let v = q.data.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v, vec![5., 5.]);
    }

    #[test]
    fn two_entry_codebook_matches_brute_force() {
        let codes = vec![0., 0., 1., 1.];
        let cb = book(codes.clone(), 2);
        let f = grid(vec![0.9, 0.8], 1, 2, 1, 1);
        let q = quantize(&f, &cb).unwrap();
        assert_eq!(q.indices, oracle(&[0.9, 0.8], &codes, 2));
        assert_eq!(q.indices, vec![1]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cb = book(vec![1., 0., -1., 0., 0., 1.], 2);
        let f = grid(vec![0., 0.], 1, 2, 1, 1);
        assert_eq!(quantize(&f, &cb).unwrap().indices, vec![0]);
    }

    #[test]
    fn paper_scale_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cb = Codebook::random_uniform(4096, 128, Level::Hi, &mut rng, &Device::Cpu).unwrap();
        let f = Tensor::randn(0f32, 0.01, (1, 128, 64, 64), &Device::Cpu).unwrap();
        let q = quantize(&FeatureGrid::new(f, Level::Hi).unwrap(), &cb).unwrap();
        assert_eq!(q.dims(), (1, 128, 64, 64));
        assert_eq!(q.indices.len(), 64 * 64);
        assert!(q.indices.iter().all(|&i| i < 4096));
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let cb = book(vec![0., 0., 1., 1.], 2);
        let f = grid(vec![0.; 3], 1, 3, 1, 1);
        assert!(matches!(quantize(&f, &cb), Err(DsrError::Contract(_))));
    }

    #[test]
    fn codebook_needs_two_vectors() {
        assert!(Codebook::from_rows(vec![1., 2.], 2, Level::Lo, &Device::Cpu).is_err());
    }

    #[test]
    fn uniform_init_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cb = Codebook::random_uniform(16, 4, Level::Lo, &mut rng, &Device::Cpu).unwrap();
        assert!(cb.to_vec().unwrap().iter().all(|v| v.abs() <= 1.0 / 16.0));
    }

    #[test]
    fn sum_loss_gives_all_ones_gradient() {
        let cb = book(vec![0., 0., 1., 1., -1., 2.], 2);
        let fv = Var::from_tensor(
            &Tensor::new(&[[[[0.2f32, 0.9]], [[0.1, 1.7]]]], &Device::Cpu).unwrap(),
        )
        .unwrap();
        let f = FeatureGrid::new(fv.as_tensor().clone(), Level::Hi).unwrap();
        let q = quantize_with_gradient(&f, &cb).unwrap();
        let grads = q.data.sum_all().unwrap().backward().unwrap();
        let g = grads.get(&fv).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(g.iter().all(|&x| x == 1.0));
        // the decoder path never reaches the codebook
        assert!(grads.get(cb.var()).is_none());
    }

    #[test]
    fn straight_through_forward_is_exact_codebook_member() {
        let cb = book(vec![0.3, -0.7, 1.1, 0.9], 2);
        let f = grid(vec![0.123, -0.456, 0.99, 0.77], 1, 2, 1, 2);
        let a = quantize(&f, &cb).unwrap();
        let b = quantize_with_gradient(&f, &cb).unwrap();
        let va = a.data.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let vb = b.data.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn straight_through_matches_frozen_assignment_finite_differences() {
        // loss = L2(Q, target) on a 2x2 grid with a 3-vector codebook
        let dev = Device::Cpu;
        let codes = vec![0.0f32, 0.0, 1.0, 0.5, -0.5, 1.0];
        let cb = book(codes.clone(), 2);
        let feat = vec![0.1f32, 0.2, 0.8, 0.4, -0.3, 0.9, 0.6, 0.6];
        let target = vec![0.5f32, -0.2, 0.3, 0.3, 0.0, 0.4, 1.0, 0.0];
        let fv = Var::from_tensor(&grid(feat.clone(), 1, 2, 2, 2).data).unwrap();
        let t = grid(target.clone(), 1, 2, 2, 2).data;
        let f = FeatureGrid::new(fv.as_tensor().clone(), Level::Hi).unwrap();
        let q = quantize_with_gradient(&f, &cb).unwrap();
        let loss = cell_l2(&q.data, &t).unwrap();
        let g = grads_cell_major(&loss.backward().unwrap(), &fv);

        // With assignments frozen the loss depends on F only through the
        // straight-through identity, i.e. L(F) = mean_cells |Q_fixed + (F - F0) - T|^2.
        let idx = q.indices.clone();
        let fixed_loss = |fv: &[f32]| -> f64 {
            let mut s = 0f64;
            for cell in 0..4 {
                for k in 0..2 {
                    let qv = codes[idx[cell] as usize * 2 + k] as f64
                        + (fv[cell * 2 + k] - feat[cell * 2 + k]) as f64;
                    let d = qv - target[cell * 2 + k] as f64;
                    s += d * d;
                }
            }
            s / 4.0
        };
        let eps = 1e-3f32;
        for i in 0..feat.len() {
            let mut up = feat.clone();
            up[i] += eps;
            let mut dn = feat.clone();
            dn[i] -= eps;
            let fd = (fixed_loss(&up) - fixed_loss(&dn)) / (2.0 * eps as f64);
            assert!((fd - g[i] as f64).abs() <= 1e-3 * fd.abs().max(1e-3), "{i}: {fd} vs {}", g[i]);
        }
        let _ = dev;
    }

    fn grads_cell_major(grads: &candle_core::backprop::GradStore, v: &Var) -> Vec<f32> {
        grads
            .get(v)
            .unwrap()
            .permute((0, 2, 3, 1))
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap()
    }

    #[test]
    fn vq_losses_zero_when_features_are_codes() {
        let cb = book(vec![0., 0., 1., 1.], 2);
        let f = grid(vec![1., 1., 0., 0.], 1, 2, 1, 2);
        let q = quantize(&f, &cb).unwrap();
        let l = vq_losses(&f, &q, 0.25).unwrap();
        assert_eq!(l.codebook.to_scalar::<f32>().unwrap(), 0.0);
        assert_eq!(l.commitment.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn vq_losses_hand_computed_single_cell() {
        // |(1,0) - (0,0)|^2 = 1
        let cb = book(vec![0., 0., 5., 5.], 2);
        let f = grid(vec![1., 0.], 1, 2, 1, 1);
        let q = quantize(&f, &cb).unwrap();
        let l = vq_losses(&f, &q, 1.0).unwrap();
        assert_eq!(l.codebook.to_scalar::<f32>().unwrap(), 1.0);
        assert_eq!(l.commitment.to_scalar::<f32>().unwrap(), 1.0);
    }

    #[test]
    fn vq_loss_shape_mismatch_is_error() {
        let cb = book(vec![0., 0., 5., 5.], 2);
        let f = grid(vec![1., 0.], 1, 2, 1, 1);
        let other = grid(vec![1., 0., 1., 1.], 1, 2, 1, 2);
        let q = quantize(&other, &cb).unwrap();
        assert!(vq_losses(&f, &q, 0.25).is_err());
    }

    #[test]
    fn codebook_gradient_only_from_alignment_term() {
        let cb = book(vec![0., 0., 1., 1.], 2);
        let f = grid(vec![0.2, 0.1, 0.9, 0.7], 1, 2, 1, 2);
        let q = quantize_with_gradient(&f, &cb).unwrap();
        let l = vq_losses(&f, &q, 0.25).unwrap();
        let g = l.commitment.backward().unwrap();
        assert!(g.get(cb.var()).is_none());
        let g = l.codebook.backward().unwrap();
        assert!(g.get(cb.var()).is_some());
    }

    #[test]
    fn usage_histogram() {
        let u = codebook_usage(&[0u32; 10], 4);
        assert_eq!(u.counts, vec![10, 0, 0, 0]);
        let idx: Vec<u32> = (0..4000).map(|i| i % 4).collect();
        let u = codebook_usage(&idx, 4);
        assert_eq!(u.total(), 4000);
        assert!(u.counts.iter().all(|&c| c == 1000));
        assert!((u.perplexity() - 4.0).abs() < 1e-9);
    }

    fn rand_instance() -> impl Strategy<Value = (usize, usize, Vec<f32>, Vec<f32>)> {
        (2usize..16, 1usize..6, 1usize..10).prop_flat_map(|(n, d, cells)| {
            (
                Just(n),
                Just(d),
                proptest::collection::vec(-2.0f32..2.0, n * d),
                proptest::collection::vec(-2.0f32..2.0, cells * d),
            )
        })
    }

    proptest! {
        #[test]
        fn matches_exhaustive_search((n, d, codes, feats) in rand_instance()) {
            let _ = n;
            let cells = feats.len() / d;
            let cb = book(codes.clone(), d);
            let q = quantize(&grid(feats.clone(), 1, d, 1, cells), &cb).unwrap();
            prop_assert_eq!(q.indices, oracle(&feats, &codes, d));
        }

        #[test]
        fn quantization_is_idempotent((_n, d, codes, feats) in rand_instance()) {
            let cells = feats.len() / d;
            let cb = book(codes, d);
            let q1 = quantize(&grid(feats, 1, d, 1, cells), &cb).unwrap();
            let f2 = FeatureGrid::new(q1.data.clone(), Level::Hi).unwrap();
            let q2 = quantize(&f2, &cb).unwrap();
            let a = q1.data.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let b = q2.data.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            prop_assert_eq!(a, b);
        }

        // Power-of-two factors scale exactly in binary floating point.
        #[test]
        fn scaling_preserves_assignment((_n, d, codes, feats) in rand_instance(), e in -3i32..4) {
            let c = 2f32.powi(e);
            let cells = feats.len() / d;
            let base = quantize(&grid(feats.clone(), 1, d, 1, cells), &book(codes.clone(), d)).unwrap();
            let scaled = quantize(
                &grid(feats.iter().map(|v| v * c).collect(), 1, d, 1, cells),
                &book(codes.iter().map(|v| v * c).collect(), d),
            ).unwrap();
            prop_assert_eq!(base.indices, scaled.indices);
        }

        #[test]
        fn loss_terms_agree_in_forward_value((_n, d, codes, feats) in rand_instance()) {
            let cells = feats.len() / d;
            let f = grid(feats, 1, d, 1, cells);
            let q = quantize_with_gradient(&f, &book(codes, d)).unwrap();
            let l = vq_losses(&f, &q, 1.0).unwrap();
            prop_assert_eq!(l.codebook.to_scalar::<f32>().unwrap(), l.commitment.to_scalar::<f32>().unwrap());
        }
    }
}
