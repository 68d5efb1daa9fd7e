//! Convolutions lowered to patch extraction plus matrix products.
//!
//! Every step is an ordinary differentiable tensor op, so the backward pass
//! is a pair of matrix products per layer instead of a convolution whose
//! kernel spans the whole feature map.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, Layout, Shape, Tensor};

use crate::error::{DsrError, Result};

fn contiguous<'a>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [f32]> {
    let data = s.as_slice::<f32>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("expected a contiguous f32 tensor"),
    }
}

/// Spatial geometry of a `k x k` window with padding `k / 2`.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(dims: (usize, usize, usize, usize), k: usize, stride: usize) -> Self {
        let (b, c, h, w) = dims;
        let p = k / 2;
        Self {
            b,
            c,
            h,
            w,
            k,
            stride,
            ho: (h + 2 * p - k) / stride + 1,
            wo: (w + 2 * p - k) / stride + 1,
        }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.b * self.ho * self.wo
    }

    /// Calls `f(row, col, input_offset)` for every in-bounds tap.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let p = (self.k / 2) as isize;
        let n = self.cols();
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    for b in 0..self.b {
                        let plane = (b * self.c + c) * self.h * self.w;
                        for oy in 0..self.ho {
                            let iy = (oy * self.stride + ky) as isize - p;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let base = row * n + (b * self.ho + oy) * self.wo;
                            let src = plane + iy as usize * self.w;
                            for ox in 0..self.wo {
                                let ix = (ox * self.stride + kx) as isize - p;
                                if ix >= 0 && ix < self.w as isize {
                                    f(base + ox, src + ix as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `(B, C, H, W)` to `(C * k * k + 1, B * Ho * Wo)` patch columns. The last
/// row is all ones and carries the bias.
struct Im2Col(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let x = contiguous(s, l)?;
        let n = g.cols();
        let mut out = vec![0f32; (g.rows() + 1) * n];
        g.for_each(|o, i| out[o] = x[i]);
        out[g.rows() * n..].fill(1.0);
        Ok((CpuStorage::F32(out), Shape::from((g.rows() + 1, n))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

/// Adjoint of [`Im2Col`]: scatters column gradients back onto the input.
struct Col2Im(Geometry);

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let cols = contiguous(s, l)?;
        let mut out = vec![0f32; g.b * g.c * g.h * g.w];
        g.for_each(|o, i| out[i] += cols[o]);
        Ok((CpuStorage::F32(out), Shape::from((g.b, g.c, g.h, g.w))))
    }
}

fn im2col(x: &Tensor, k: usize, stride: usize) -> Result<(Tensor, Geometry)> {
    if stride == 0 {
        return Err(DsrError::contract("stride must be positive"));
    }
    let g = Geometry::new(x.dims4()?, k, stride);
    Ok((x.contiguous()?.apply_op1(Im2Col(g))?, g))
}

/// 2D convolution with an `(Cout, Cin, k, k)` weight, padding `k / 2`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    let (cout, cin, k, k2) = weight.dims4()?;
    let (_, c, _, _) = x.dims4()?;
    if c != cin || k != k2 {
        return Err(DsrError::contract(format!(
            "conv weight {:?} does not fit input {:?}",
            weight.dims(),
            x.dims()
        )));
    }
    let (cols, g) = im2col(x, k, stride)?;
    let w = with_bias(weight.reshape((cout, cin * k * k))?, bias, cout)?;
    let y = w.matmul(&cols)?.reshape((cout, g.b, g.ho, g.wo))?;
    Ok(y.transpose(0, 1)?.contiguous()?)
}

fn with_bias(w: Tensor, bias: Option<&Tensor>, rows: usize) -> Result<Tensor> {
    let b = match bias {
        Some(b) => b.reshape((rows, 1))?,
        None => Tensor::zeros((rows, 1), w.dtype(), w.device())?,
    };
    Ok(Tensor::cat(&[&w, &b], 1)?)
}

/// Selection matrix `(16, 36)` mapping a 4x4 transposed-convolution kernel
/// (stride 2, padding 1) onto the 3x3 neighbourhood taps of its four output
/// phases.
fn phase_selection() -> Vec<f32> {
    // offset d = i - m of the contributing input for output 2m + a
    let tap = |a: usize, d: isize| -> Option<usize> {
        match (a, d) {
            (0, 0) => Some(1),
            (0, -1) => Some(3),
            (1, 0) => Some(2),
            (1, 1) => Some(0),
            _ => None,
        }
    };
    let mut s = vec![0f32; 16 * 36];
    for a in 0..2 {
        for bb in 0..2 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if let (Some(ky), Some(kx)) = (tap(a, dy), tap(bb, dx)) {
                        let col = (a * 2 + bb) * 9 + ((dy + 1) * 3 + (dx + 1)) as usize;
                        s[(ky * 4 + kx) * 36 + col] = 1.0;
                    }
                }
            }
        }
    }
    s
}

/// Transposed convolution, kernel 4, stride 2, padding 1, with an
/// `(Cin, Cout, 4, 4)` weight. Doubles the spatial size.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (cin, cout, k, k2) = weight.dims4()?;
    let (_, c, _, _) = x.dims4()?;
    if c != cin || k != 4 || k2 != 4 {
        return Err(DsrError::contract(format!(
            "transposed conv weight {:?} does not fit input {:?}",
            weight.dims(),
            x.dims()
        )));
    }
    let sel = Tensor::from_vec(phase_selection(), (16, 36), x.device())?;
    // (Cin*Cout, 16) x (16, 36) -> per-phase 3x3 kernels, laid out (Cout*4, Cin*9)
    let wp = weight
        .reshape((cin * cout, 16))?
        .matmul(&sel)?
        .reshape((cin, cout * 4, 9))?
        .transpose(0, 1)?
        .reshape((cout * 4, cin * 9))?;
    let bias4 = match bias {
        Some(b) => Some(b.reshape((cout, 1))?.broadcast_as((cout, 4))?.reshape(cout * 4)?),
        None => None,
    };
    let wp = with_bias(wp, bias4.as_ref(), cout * 4)?;
    let (cols, g) = im2col(x, 3, 1)?;
    let y = wp
        .matmul(&cols)?
        .reshape((cout, 2, 2, g.b, g.h, g.w))?
        .permute((3, 0, 4, 1, 5, 2))?
        .reshape((g.b, cout, 2 * g.h, 2 * g.w))?;
    Ok(y)
}

struct GroupNorm {
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    /// Per-group mean and inverse standard deviation.
    fn stats(&self, x: &[f32], b: usize, c: usize, hw: usize) -> Vec<(f32, f32)> {
        let n = (c / self.groups) * hw;
        (0..b * self.groups)
            .map(|gi| {
                let v = &x[gi * n..(gi + 1) * n];
                let mean = v.iter().map(|&a| a as f64).sum::<f64>() / n as f64;
                let var = v.iter().map(|&a| (a as f64 - mean).powi(2)).sum::<f64>() / n as f64;
                (mean as f32, (1.0 / (var + self.eps).sqrt()) as f32)
            })
            .collect()
    }
}

impl CustomOp3 for GroupNorm {
    fn name(&self) -> &'static str {
        "group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (x, gamma, beta) = (contiguous(s1, l1)?, contiguous(s2, l2)?, contiguous(s3, l3)?);
        let (b, c, h, w) = l1.shape().dims4()?;
        let hw = h * w;
        let cg = c / self.groups;
        let stats = self.stats(x, b, c, hw);
        let mut out = vec![0f32; x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let (mean, inv) = stats[bi * self.groups + ci / cg];
                let (ga, be) = (gamma[ci], beta[ci]);
                let o = (bi * c + ci) * hw;
                for i in o..o + hw {
                    out[i] = (x[i] - mean) * inv * ga + be;
                }
            }
        }
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = x.dims4()?;
        let hw = h * w;
        let cg = c / self.groups;
        let xv = x.flatten_all()?.to_vec1::<f32>()?;
        let gv = grad.flatten_all()?.to_vec1::<f32>()?;
        let gamma_v = gamma.to_vec1::<f32>()?;
        let stats = self.stats(&xv, b, c, hw);
        let mut dx = vec![0f32; xv.len()];
        let mut dgamma = vec![0f32; c];
        let mut dbeta = vec![0f32; c];
        let n = (cg * hw) as f32;
        for bi in 0..b {
            for gi in 0..self.groups {
                let (mean, inv) = stats[bi * self.groups + gi];
                // sums of dxhat and dxhat * xhat over the group
                let (mut s1, mut s2) = (0f32, 0f32);
                for ci in gi * cg..(gi + 1) * cg {
                    let o = (bi * c + ci) * hw;
                    for i in o..o + hw {
                        let xhat = (xv[i] - mean) * inv;
                        let dxhat = gv[i] * gamma_v[ci];
                        s1 += dxhat;
                        s2 += dxhat * xhat;
                        dgamma[ci] += gv[i] * xhat;
                        dbeta[ci] += gv[i];
                    }
                }
                for ci in gi * cg..(gi + 1) * cg {
                    let o = (bi * c + ci) * hw;
                    for i in o..o + hw {
                        let xhat = (xv[i] - mean) * inv;
                        let dxhat = gv[i] * gamma_v[ci];
                        dx[i] = inv * (dxhat - s1 / n - xhat * s2 / n);
                    }
                }
            }
        }
        let dev = x.device();
        Ok((
            Some(Tensor::from_vec(dx, (b, c, h, w), dev)?),
            Some(Tensor::from_vec(dgamma, c, dev)?),
            Some(Tensor::from_vec(dbeta, c, dev)?),
        ))
    }
}

/// Group normalization over `(B, C, H, W)` with per-channel affine terms.
pub fn group_norm(x: &Tensor, groups: usize, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        return Err(DsrError::contract(format!("{groups} groups do not divide {c} channels")));
    }
    if weight.dims() != [c] || bias.dims() != [c] {
        return Err(DsrError::contract("group norm affine terms must have one entry per channel"));
    }
    Ok(x.contiguous()?.apply_op3(
        &weight.contiguous()?,
        &bias.contiguous()?,
        GroupNorm { groups, eps },
    )?)
}
