//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `DSR_ACCEPTANCE_ONLY=1,5,10` restricts the run to the listed criteria.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use dsr_core::config::{DsrConfig, ModelConfig, Profile, SynthConfig};
use dsr_core::data::{natural_corpus, ObjectTexture, Sample, TextureKind};
use dsr_core::eval::{
    auroc, average_precision, evaluate_dataset, evaluate_refinement, image_score, ScoreAccumulator,
};
use dsr_core::nets::Component;
use dsr_core::synth::{inject_anomalies, inject_with_masks, sample_replacement_index, Sampling, SimilarityBound};
use dsr_core::train::{parse_log, reconstruction_error, same_losses};
use dsr_core::types::stack_images;
use dsr_core::vq::{quantize, quantize_with_gradient};
use dsr_core::{
    default_device, train_stage1, train_stage2, train_stage3, AnomalyMask, Codebook, DsrModel, FeatureGrid,
    ImageTensor, Level, MapResolution, SegmentationMap,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

/// Exhaustive search in f32, dimension-order accumulation, first minimum wins.
fn nn_oracle(v: &[f32], codes: &[f32], d: usize) -> u32 {
    let mut best = (f32::INFINITY, 0u32);
    for (i, c) in codes.chunks(d).enumerate() {
        let mut s = 0f32;
        for k in 0..d {
            let t = v[k] - c[k];
            s += t * t;
        }
        if s < best.0 {
            best = (s, i as u32);
        }
    }
    best.1
}

fn vq_oracle() -> Check {
    let t = Instant::now();
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut cells, mut tied) = (0usize, 0usize);
    for inst in 0..1000 {
        let n_k = rng.random_range(2..=64usize);
        let d = rng.random_range(1..=8usize);
        let (h, w) = (rng.random_range(1..=6usize), rng.random_range(1..=6usize));
        // every third instance lives on a coarse lattice with duplicated rows
        let lattice = inst % 3 == 0;
        let draw = |rng: &mut ChaCha8Rng| -> f32 {
            if lattice {
                rng.random_range(-2i32..=2) as f32 * 0.5
            } else {
                rng.random_range(-1.0f32..1.0)
            }
        };
        let mut codes: Vec<f32> = (0..n_k * d).map(|_| draw(&mut rng)).collect();
        if lattice && n_k > 2 {
            let (a, b) = (rng.random_range(0..n_k), rng.random_range(0..n_k));
            let row: Vec<f32> = codes[a * d..(a + 1) * d].to_vec();
            codes[b * d..(b + 1) * d].copy_from_slice(&row);
        }
        let feats: Vec<f32> = (0..h * w * d).map(|_| draw(&mut rng)).collect();
        let cb = Codebook::from_rows(codes.clone(), d, Level::Hi, &dev).map_err(|e| e.to_string())?;
        // cell-major rows -> (1, D, H, W)
        let chw = Tensor::from_vec(feats.clone(), (1, h, w, d), &dev)
            .and_then(|t| t.permute((0, 3, 1, 2)))
            .and_then(|t| t.contiguous())
            .map_err(|e| e.to_string())?;
        let q = quantize(&FeatureGrid::new(chw, Level::Hi).unwrap(), &cb).map_err(|e| e.to_string())?;
        for (c, row) in feats.chunks(d).enumerate() {
            let want = nn_oracle(row, &codes, d);
            if q.indices[c] != want {
                return Err(format!("instance {inst} cell {c}: got {} want {want}", q.indices[c]));
            }
            let dists: Vec<f32> = codes
                .chunks(d)
                .map(|cv| cv.iter().zip(row).fold(0f32, |s, (a, b)| s + (b - a) * (b - a)))
                .collect();
            let best = dists[want as usize];
            tied += (dists.iter().filter(|&&x| x == best).count() > 1) as usize;
            cells += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 10.0, format!("1000 instances, {cells} cells ({tied} with tied minima) all match; {secs:.2}s"))
}

// ---------------------------------------------------------------- 2

fn straight_through() -> Check {
    let cfg = DsrConfig::for_profile(Profile::Tiny);
    let dev = default_device();
    let model = DsrModel::new(&cfg.model, 3, &dev).map_err(|e| e.to_string())?;
    let imgs = natural_corpus(2, 64, 8).map_err(|e| e.to_string())?;
    let refs: Vec<&ImageTensor> = imgs.iter().collect();
    let x = stack_images(&refs, &dev).map_err(|e| e.to_string())?;
    let run = || -> candle_core::Result<String> {
        let enc = model.encode_frozen(&x).map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        let out_shape = (2, 3, 64, 64);
        let mut wr = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f32> = (0..2 * 3 * 64 * 64).map(|_| wr.random_range(-1.0f32..1.0)).collect();
        let weights = Tensor::from_vec(w, out_shape, &dev)?;
        let scalar = |q_hi: &Tensor, q_lo: &Tensor| -> candle_core::Result<Tensor> {
            let y = model.decode_general(q_hi, q_lo).map_err(|e| candle_core::Error::Msg(e.to_string()))?;
            (y.tanh()? * &weights)?.sum_all()
        };
        // gradient reaching the encoder features through the straight-through path
        let f_hi = Var::from_tensor(&enc.f_hi.data)?;
        let f_lo = Var::from_tensor(&enc.f_lo.data)?;
        let qh = quantize_with_gradient(&FeatureGrid::new(f_hi.as_tensor().clone(), Level::Hi).unwrap(), model.codebook(Level::Hi))
            .map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        let ql = quantize_with_gradient(&FeatureGrid::new(f_lo.as_tensor().clone(), Level::Lo).unwrap(), model.codebook(Level::Lo))
            .map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        let g = scalar(&qh.data, &ql.data)?.backward()?;
        let gf_hi = g.get(&f_hi).unwrap().clone();
        let gf_lo = g.get(&f_lo).unwrap().clone();
        // gradient with respect to the quantized values held as leaves
        let q_hi = Var::from_tensor(&qh.codes.detach())?;
        let q_lo = Var::from_tensor(&ql.codes.detach())?;
        let g2 = scalar(q_hi.as_tensor(), q_lo.as_tensor())?.backward()?;
        let gq_hi = g2.get(&q_hi).unwrap().clone();
        let gq_lo = g2.get(&q_lo).unwrap().clone();
        let rel = |a: &Tensor, b: &Tensor| -> candle_core::Result<f64> {
            let num = (a - b)?.abs()?.max_all()?.to_scalar::<f32>()? as f64;
            let den = b.abs()?.max_all()?.to_scalar::<f32>()? as f64;
            Ok(num / den.max(f64::MIN_POSITIVE))
        };
        let r_st = rel(&gf_hi, &gq_hi)?.max(rel(&gf_lo, &gq_lo)?);

        // central differences along random directions with the assignments frozen
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut worst = 0f64;
        for _ in 0..4 {
            let dir = |t: &Tensor, rng: &mut ChaCha8Rng| -> candle_core::Result<Tensor> {
                let v: Vec<f32> = (0..t.elem_count()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                Tensor::from_vec(v, t.shape(), &dev)
            };
            let (vh, vl) = (dir(&gq_hi, &mut rng)?, dir(&gq_lo, &mut rng)?);
            let dot = |g: &Tensor, v: &Tensor| -> candle_core::Result<f64> {
                (g.to_dtype(DType::F64)? * v.to_dtype(DType::F64)?)?.sum_all()?.to_scalar::<f64>()
            };
            let analytic = dot(&gf_hi, &vh)? + dot(&gf_lo, &vl)?;
            let at = |s: f64| -> candle_core::Result<f64> {
                let h = (q_hi.as_tensor() + (&vh * s)?)?;
                let l = (q_lo.as_tensor() + (&vl * s)?)?;
                let y = model.decode_general(&h, &l).map_err(|e| candle_core::Error::Msg(e.to_string()))?;
                let y = y.tanh()?.to_dtype(DType::F64)?;
                (y * weights.to_dtype(DType::F64)?)?.sum_all()?.to_scalar::<f64>()
            };
            let central = |h: f64| -> candle_core::Result<f64> { Ok((at(h)? - at(-h)?) / (2.0 * h)) };
            // Richardson-extrapolated central difference; the step is 40% of the
            // initial codebook half-width, large enough to clear f32 rounding
            let eps = 0.4 / cfg.model.codebook_size as f64;
            let fd = (4.0 * central(eps)? - central(2.0 * eps)?) / 3.0;
            worst = worst.max((fd - analytic).abs() / analytic.abs());
        }
        let ok = r_st <= 1e-6 && worst <= 1e-3;
        Ok(format!(
            "{}|straight-through rel diff {r_st:.1e} (<= 1e-6), finite-difference rel err {worst:.1e} (<= 1e-3)",
            if ok { "ok" } else { "bad" }
        ))
    };
    let msg = run().map_err(|e| e.to_string())?;
    let (flag, detail) = msg.split_once('|').unwrap();
    ensure(flag == "ok", detail.to_string())
}

// ---------------------------------------------------------------- 3

/// Rank of `idx` among the codes ordered by distance to `q`, ties by index.
fn rank_of(q: &[f32], codes: &[f32], d: usize, idx: usize) -> usize {
    let dist = |c: &[f32]| c.iter().zip(q).fold(0f32, |s, (a, b)| s + (a - b) * (a - b));
    let target = dist(&codes[idx * d..(idx + 1) * d]);
    codes
        .chunks(d)
        .enumerate()
        .filter(|&(j, c)| {
            let dj = dist(c);
            dj < target || (dj == target && j < idx)
        })
        .count()
}

fn sampler_bound() -> Check {
    let t = Instant::now();
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n_k, d) = (4096usize, 8usize);
    let hi = Codebook::random_uniform(n_k, d, Level::Hi, &mut rng, &dev).unwrap();
    let lo = Codebook::random_uniform(n_k, d, Level::Lo, &mut rng, &dev).unwrap();
    let (codes_hi, codes_lo) = (hi.to_vec().unwrap(), lo.to_vec().unwrap());
    let sampling = Sampling::bounded(0.05, n_k).unwrap();
    let floor = SimilarityBound::new(0.05, n_k).unwrap().floor_index();
    let (mut draws, mut below, mut min_rank) = (0usize, 0usize, usize::MAX);
    while draws < 100_000 {
        let idx_hi: Vec<u32> = (0..16 * 16).map(|_| rng.random_range(0..n_k as u32)).collect();
        let idx_lo: Vec<u32> = (0..8 * 8).map(|_| rng.random_range(0..n_k as u32)).collect();
        let q_hi = dsr_core::vq::lookup(&hi, idx_hi.clone(), 1, 16, 16).unwrap();
        let q_lo = dsr_core::vq::lookup(&lo, idx_lo.clone(), 1, 8, 8).unwrap();
        let full = AnomalyMask::from_vec(64, 64, vec![1; 64 * 64]).unwrap();
        let inj = inject_with_masks(&q_hi, &q_lo, &hi, &lo, &sampling, vec![full], &mut rng).unwrap();
        for (orig, new, codes) in [(&idx_hi, &inj.q_hi.indices, &codes_hi), (&idx_lo, &inj.q_lo.indices, &codes_lo)] {
            for (&o, &n) in orig.iter().zip(new) {
                let q = &codes[o as usize * d..(o as usize + 1) * d];
                let r = rank_of(q, codes, d, n as usize);
                below += (r < floor) as usize;
                min_rank = min_rank.min(r);
                draws += 1;
            }
        }
    }
    if below > 0 || floor != 204 {
        return Err(format!("floor {floor}: {below} of {draws} draws below it"));
    }

    // N_K = 20, n = N_K: ranks 1..=19 equally likely
    let n_k = 20usize;
    let bound = SimilarityBound::new(0.05, n_k).unwrap();
    let ranking: Vec<u32> = (0..n_k as u32).collect();
    let mut hist = vec![0usize; n_k];
    let n = 100_000usize;
    for _ in 0..n {
        hist[sample_replacement_index(&ranking, &bound, n_k, &mut rng).unwrap() as usize] += 1;
    }
    let p = 1.0 / 19.0;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    let worst = hist[1..].iter().map(|&c| (c as f64 - n as f64 * p).abs() / sigma).fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    ensure(
        hist[0] == 0 && worst <= 3.0 && secs < 30.0,
        format!(
            "N_K=4096: {draws} draws, none below rank {floor} (lowest {min_rank}); N_K=20: rank 0 drawn {} times, \
             largest deviation {worst:.2} sigma; {secs:.1}s",
            hist[0]
        ),
    )
}

// ---------------------------------------------------------------- 4

fn lambda_monotonicity() -> Check {
    let cfg = DsrConfig::for_profile(Profile::Tiny);
    let dev = default_device();
    let model = DsrModel::new(&cfg.model, 11, &dev).unwrap();
    let imgs = natural_corpus(4, 64, 12).unwrap();
    let refs: Vec<&ImageTensor> = imgs.iter().collect();
    let enc = model.encode_frozen(&stack_images(&refs, &dev).unwrap()).unwrap();
    let codes = [model.codebook(Level::Hi).to_vec().unwrap(), model.codebook(Level::Lo).to_vec().unwrap()];
    let d = cfg.model.embed_dim;
    let mut stats = Vec::new();
    for lambda in [0.05, 0.2, 0.5] {
        let sampling = Sampling::bounded(lambda, cfg.model.codebook_size).unwrap();
        let mut dists = Vec::new();
        for seed in 0..100u64 {
            let inj = inject_anomalies(
                &enc.q_hi,
                &enc.q_lo,
                model.codebook(Level::Hi),
                model.codebook(Level::Lo),
                &sampling,
                &cfg.synth,
                seed,
            )
            .unwrap();
            for (li, (orig, new)) in [(&enc.q_hi.indices, &inj.q_hi.indices), (&enc.q_lo.indices, &inj.q_lo.indices)]
                .into_iter()
                .enumerate()
            {
                for (&o, &n) in orig.iter().zip(new) {
                    if o != n {
                        let (a, b) = (&codes[li][o as usize * d..][..d], &codes[li][n as usize * d..][..d]);
                        dists.push(a.iter().zip(b).map(|(x, y)| ((x - y) * (x - y)) as f64).sum::<f64>().sqrt());
                    }
                }
            }
        }
        let n = dists.len() as f64;
        let mean = dists.iter().sum::<f64>() / n;
        let var = dists.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        stats.push((lambda, mean, (var / n).sqrt(), dists.len()));
    }
    let increasing = stats.windows(2).all(|w| w[1].1 > w[0].1);
    let z: Vec<f64> = stats
        .windows(2)
        .map(|w| (w[1].1 - w[0].1) / (w[0].2.powi(2) + w[1].2.powi(2)).sqrt())
        .collect();
    let desc: Vec<String> = stats.iter().map(|(l, m, se, n)| format!("{l}: {m:.3e} +- {se:.1e} ({n})")).collect();
    ensure(increasing, format!("mean distance {}; step z-scores {:.1?}", desc.join(", "), z))
}

// ---------------------------------------------------------------- 5

/// ROC points at every distinct threshold, integrated with the trapezoid rule.
fn auroc_sweep(s: &[f64], l: &[bool]) -> f64 {
    let p = l.iter().filter(|&&x| x).count() as f64;
    let n = l.len() as f64 - p;
    let mut th: Vec<f64> = s.to_vec();
    th.sort_by(|a, b| b.total_cmp(a));
    th.dedup();
    let (mut area, mut prev) = (0.0, (0.0, 0.0));
    for t in th {
        let tp = s.iter().zip(l).filter(|(&v, &y)| v >= t && y).count() as f64;
        let fp = s.iter().zip(l).filter(|(&v, &y)| v >= t && !y).count() as f64;
        let pt = (fp / n, tp / p);
        area += (pt.0 - prev.0) * (pt.1 + prev.1) / 2.0;
        prev = pt;
    }
    area
}

fn ap_sweep(s: &[f64], l: &[bool]) -> f64 {
    let p = l.iter().filter(|&&x| x).count() as f64;
    let mut th: Vec<f64> = s.to_vec();
    th.sort_by(|a, b| b.total_cmp(a));
    th.dedup();
    let (mut ap, mut prev) = (0.0, 0.0);
    for t in th {
        let tp = s.iter().zip(l).filter(|(&v, &y)| v >= t && y).count() as f64;
        let k = s.iter().filter(|&&v| v >= t).count() as f64;
        ap += (tp / p - prev) * tp / k;
        prev = tp / p;
    }
    ap
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = rng.random_range(2..=200usize);
        let levels = rng.random_range(2..50u32);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        l[0] = true;
        l[n - 1] = false;
        let a = auroc(&s, &l).map_err(|e| e.to_string())?;
        let ap = average_precision(&s, &l).map_err(|e| e.to_string())?;
        let mut acc = ScoreAccumulator::new();
        for (&v, &y) in s.iter().zip(&l) {
            acc.push(v as f32, y);
        }
        let s32: Vec<f64> = s.iter().map(|&v| v as f32 as f64).collect();
        worst = worst
            .max((a - auroc_sweep(&s, &l)).abs())
            .max((ap - ap_sweep(&s, &l)).abs())
            .max((acc.average_precision().unwrap() - ap_sweep(&s32, &l)).abs());
    }
    let mut data = vec![0f32; 64 * 64];
    data[30 * 64 + 33] = 1.0;
    let unit = image_score(&SegmentationMap::new(64, 64, data, MapResolution::Feature).unwrap());
    ensure(
        worst <= 1e-9 && unit == 1.0 / 441.0,
        format!("500 instances, max |metric - sweep oracle| = {worst:.1e}; unit pixel score {unit} (1/441 = {})", 1.0 / 441.0),
    )
}

// ---------------------------------------------------------------- 6

fn bits(model: &DsrModel) -> std::collections::BTreeMap<String, Vec<u32>> {
    model
        .params()
        .snapshot()
        .unwrap()
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().map(f32::to_bits).collect()))
        .collect()
}

fn changed(a: &std::collections::BTreeMap<String, Vec<u32>>, b: &std::collections::BTreeMap<String, Vec<u32>>) -> Vec<&'static str> {
    Component::ALL
        .into_iter()
        .filter(|c| a.iter().any(|(k, v)| k.starts_with(c.prefix()) && b[k] != *v))
        .map(|c| c.prefix())
        .collect()
}

fn freezing() -> Check {
    let mut cfg = DsrConfig::for_profile(Profile::Tiny);
    cfg.stage1.iterations = 1;
    cfg.stage2.iterations = 1;
    cfg.stage3.iterations = 1;
    let imgs = natural_corpus(8, 64, 13).unwrap();
    let mut model = DsrModel::new(&cfg.model, 2, &default_device()).unwrap();
    train_stage1(&mut model, &imgs, &cfg, None).map_err(|e| e.to_string())?;
    let b1 = bits(&model);
    train_stage2(&mut model, &imgs, &[], &cfg, None).map_err(|e| e.to_string())?;
    let b2 = bits(&model);
    train_stage3(&mut model, &imgs, &cfg, None).map_err(|e| e.to_string())?;
    let b3 = bits(&model);
    let (c2, c3) = (changed(&b1, &b2), changed(&b2, &b3));
    let want2 = ["restrict_hi", "restrict_lo", "object_decoder", "detector"];
    let ok2 = c2.iter().all(|c| want2.contains(c)) && c2.len() == want2.len();
    ensure(
        ok2 && c3 == ["upsampler"],
        format!("stage-2 step changed {c2:?}; stage-3 step changed {c3:?}; all others bitwise equal"),
    )
}

// ---------------------------------------------------------------- 7 and 8

struct Desk {
    cfg: DsrConfig,
    stage1: DsrModel,
    train: Vec<ImageTensor>,
    held_out: Vec<ImageTensor>,
    defects: Vec<Sample>,
    /// Criterion-7 stage-2 model, reused as the first bounded seed of criterion 8.
    stage2: Option<DsrModel>,
}

const OBJECT_KIND: TextureKind = TextureKind::Weave;

fn desk_config() -> DsrConfig {
    let mut cfg = DsrConfig::for_profile(Profile::Tiny);
    cfg.stage1.iterations = 5000;
    cfg.stage2.iterations = 2000;
    cfg.stage2.lr_decay_at = Some(1600);
    cfg.stage3.iterations = 500;
    cfg.stage1.log_interval = 250;
    cfg.stage2.log_interval = 100;
    cfg.stage3.log_interval = 50;
    cfg
}

/// Pixel scores of `M` and image scores on held-out images, every second
/// one carrying a fresh latent injection; also the reconstruction distances
/// of both decoders to the clean image on the injected ones.
struct LatentEval {
    pixels: (Vec<f64>, Vec<bool>),
    images: (Vec<f64>, Vec<bool>),
    spc_err: f64,
    gen_err: f64,
}

fn latent_eval(model: &DsrModel, images: &[ImageTensor], synth: &SynthConfig, seed: u64) -> LatentEval {
    let dev = model.device();
    let sampling = Sampling::bounded(0.05, model.config().codebook_size).unwrap();
    let mut out = LatentEval { pixels: (vec![], vec![]), images: (vec![], vec![]), spc_err: 0.0, gen_err: 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (ci, chunk) in images.chunks(8).enumerate() {
        let refs: Vec<&ImageTensor> = chunk.iter().collect();
        let x = stack_images(&refs, dev).unwrap();
        let enc = model.encode_frozen(&x).unwrap();
        let inj = inject_anomalies(
            &enc.q_hi,
            &enc.q_lo,
            model.codebook(Level::Hi),
            model.codebook(Level::Lo),
            &sampling,
            synth,
            rng.random(),
        )
        .unwrap();
        for i in 0..chunk.len() {
            let anomalous = (ci * 8 + i) % 2 == 1;
            let (qh, ql) = if anomalous {
                (inj.q_hi.data.narrow(0, i, 1).unwrap(), inj.q_lo.data.narrow(0, i, 1).unwrap())
            } else {
                (enc.q_hi.data.narrow(0, i, 1).unwrap(), enc.q_lo.data.narrow(0, i, 1).unwrap())
            };
            let i_gen = model.decode_general(&qh, &ql).unwrap();
            let i_spc = model.decode_object_specific(&qh, &ql).unwrap().image;
            let m = model.detect(&i_gen, &i_spc).unwrap();
            let map = SegmentationMap::from_batch(&m, MapResolution::Feature).unwrap().remove(0);
            let gt = if anomalous { inj.mask_hi[i].clone() } else { AnomalyMask::zeros(map.height(), map.width()) };
            for (&p, &g) in map.data().iter().zip(gt.data()) {
                out.pixels.0.push(p as f64);
                out.pixels.1.push(g != 0);
            }
            out.images.0.push(image_score(&map));
            out.images.1.push(anomalous);
            if anomalous {
                let clean = x.narrow(0, i, 1).unwrap();
                let err = |t: &Tensor| (t - &clean).unwrap().sqr().unwrap().mean_all().unwrap().to_scalar::<f32>().unwrap() as f64;
                out.spc_err += err(&i_spc);
                out.gen_err += err(&i_gen);
            }
        }
    }
    out
}

/// Brute-force AP: every positive contributes the precision at the end of
/// its block of tied scores.
fn ap_brute(s: &[f64], l: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let pos = l.iter().filter(|&&x| x).count() as f64;
    let (mut ap, mut i, mut tp) = (0.0, 0usize, 0.0);
    while i < order.len() {
        let j = (i..order.len()).find(|&j| s[order[j]] != s[order[i]]).unwrap_or(order.len());
        let g = order[i..j].iter().filter(|&&k| l[k]).count() as f64;
        tp += g;
        ap += g * tp / j as f64;
        i = j;
    }
    ap / pos
}

fn desk_end_to_end(desk: &mut Desk) -> Check {
    let t = Instant::now();
    let cfg = &desk.cfg;
    let mut model = desk.stage1.try_clone().unwrap();
    train_stage2(&mut model, &desk.train, &[], cfg, None).map_err(|e| e.to_string())?;
    let t2 = t.elapsed().as_secs_f64();
    let ev = latent_eval(&model, &desk.held_out, &cfg.synth, 21);
    let pixel_ap = pooled_ap(&ev.pixels);
    let brute = ap_brute(&ev.pixels.0, &ev.pixels.1);
    let image_auroc = auroc(&ev.images.0, &ev.images.1).unwrap();
    desk.stage2 = Some(model.try_clone().unwrap());

    let t = Instant::now();
    train_stage3(&mut model, &desk.train, cfg, None).map_err(|e| e.to_string())?;
    let t3 = t.elapsed().as_secs_f64();
    let r = evaluate_refinement(&model, &desk.held_out, &cfg.synth, 22, 0.5).unwrap();
    let ok = pixel_ap >= 0.8 && image_auroc >= 0.9 && r.iou_refined > r.iou_bilinear && (pixel_ap - brute).abs() < 1e-9;
    ensure(
        ok,
        format!(
            "stage 2 ({t2:.0}s): pixel AP {pixel_ap:.3} (brute force {brute:.3}, >= 0.8), image AUROC {image_auroc:.3} (>= 0.9); \
             restored image L2 to clean {:.4} vs general {:.4}; stage 3 ({t3:.0}s): IoU refined {:.3} vs bilinear {:.3}",
            ev.spc_err, ev.gen_err, r.iou_refined, r.iou_bilinear
        ),
    )
}

fn pooled_ap(p: &(Vec<f64>, Vec<bool>)) -> f64 {
    let mut acc = ScoreAccumulator::new();
    for (&v, &y) in p.0.iter().zip(&p.1) {
        acc.push(v as f32, y);
    }
    acc.average_precision().unwrap()
}

/// Pixel AP of bilinearly upsampled `M` on the procedural defect set.
fn defect_ap(model: &DsrModel, defects: &[Sample], cfg: &DsrConfig) -> f64 {
    let mut ec = cfg.eval.clone();
    ec.no_upsampler = true;
    evaluate_dataset(model, defects, &ec).unwrap().ap_loc.unwrap()
}

fn ablation_direction(desk: &Desk) -> Check {
    let t = Instant::now();
    let mut rows = Vec::new();
    for seed in [desk.cfg.seed, desk.cfg.seed + 1, desk.cfg.seed + 2] {
        let mut pair = [0.0; 2];
        for (k, random) in [false, true].into_iter().enumerate() {
            let model = match (&desk.stage2, k, seed == desk.cfg.seed) {
                (Some(m), 0, true) => m.try_clone().unwrap(),
                _ => {
                    let mut cfg = desk.cfg.clone();
                    cfg.seed = seed;
                    cfg.stage2.random_sampling = random;
                    let mut m = desk.stage1.try_clone().unwrap();
                    train_stage2(&mut m, &desk.train, &[], &cfg, None).map_err(|e| e.to_string())?;
                    m
                }
            };
            pair[k] = defect_ap(&model, &desk.defects, &desk.cfg);
        }
        rows.push((seed, pair[0], pair[1]));
    }
    let mean = |i: usize| rows.iter().map(|r| if i == 0 { r.1 } else { r.2 }).sum::<f64>() / rows.len() as f64;
    let (b, u) = (mean(0), mean(1));
    let per: Vec<String> = rows.iter().map(|(s, b, u)| format!("seed {s}: {b:.3} vs {u:.3}")).collect();
    ensure(
        b > u,
        format!(
            "defect-set pixel AP bounded vs uniform, {}; mean {b:.3} vs {u:.3} (gap {:+.3}); {:.0}s",
            per.join(", "),
            b - u,
            t.elapsed().as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 9

fn determinism() -> Check {
    let mut cfg = DsrConfig::for_profile(Profile::Tiny);
    for sc in [&mut cfg.stage1, &mut cfg.stage2, &mut cfg.stage3] {
        sc.iterations = 20;
        sc.log_interval = 1;
    }
    cfg.stage2.lr_decay_at = Some(10);
    let imgs = natural_corpus(16, 64, 14).unwrap();
    let root = std::env::temp_dir().join(format!("dsr-acceptance-{}", std::process::id()));
    let run = |dir: &Path| -> Result<(), String> {
        let mut m = DsrModel::new(&cfg.model, cfg.seed, &default_device()).unwrap();
        train_stage1(&mut m, &imgs, &cfg, Some(&dir.join("1"))).map_err(|e| e.to_string())?;
        train_stage2(&mut m, &imgs, &[], &cfg, Some(&dir.join("2"))).map_err(|e| e.to_string())?;
        train_stage3(&mut m, &imgs, &cfg, Some(&dir.join("3"))).map_err(|e| e.to_string())?;
        Ok(())
    };
    run(&root.join("a"))?;
    run(&root.join("b"))?;
    let mut same = Vec::new();
    for s in 1..=3 {
        let read = |r: &str, f: &str| std::fs::read(root.join(r).join(s.to_string()).join(f)).unwrap();
        let log = |r: &str| parse_log(&String::from_utf8(read(r, &format!("stage{s}.log"))).unwrap()).unwrap();
        let ck = format!("stage{s}.ckpt");
        same.push(same_losses(&log("a"), &log("b")) && read("a", &ck) == read("b", &ck));
    }
    let _ = std::fs::remove_dir_all(&root);
    ensure(same.iter().all(|&x| x), format!("identical logs and checkpoint bytes per stage: {same:?}"))
}

// ---------------------------------------------------------------- 10

fn shapes() -> Check {
    let mut seen = Vec::new();
    for size in [64usize, 128, 256] {
        let mut mc = ModelConfig::for_profile(Profile::Tiny);
        mc.image_size = size;
        let model = DsrModel::new(&mc, 0, &default_device()).unwrap();
        let imgs = natural_corpus(1, size, 15).unwrap();
        let x = stack_images(&[&imgs[0]], model.device()).unwrap();
        let enc = model.encode_frozen(&x).unwrap();
        let out = model.infer(&x).unwrap();
        let got = (
            enc.q_hi.dims().2,
            enc.q_lo.dims().2,
            out.mask.dims()[2],
            out.refined.dims()[2],
            enc.f_hi.dims().2,
            enc.f_lo.dims().2,
        );
        let want = (size / 4, size / 8, size / 4, size, size / 4, size / 8);
        if got != want || out.i_gen.dims() != [1, 3, size, size] || out.i_spc.dims() != [1, 3, size, size] {
            return Err(format!("{size}: got {got:?}, want {want:?}"));
        }
        seen.push(format!("{size}: Q_hi {0}, Q_lo {1}, M {2}, M_r {3}", got.0, got.1, got.2, got.3));
    }
    Ok(seen.join("; "))
}

// ----------------------------------------------------------------

fn run(id: u8, name: &str, f: impl FnOnce() -> Check) -> bool {
    let t = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = t.elapsed().as_secs_f64();
    let (tag, detail) = match &res {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {id:>2} {tag} {name} [{secs:.1}s]: {detail}");
    res.is_ok()
}

fn main() -> ExitCode {
    let only: Option<Vec<u8>> = std::env::var("DSR_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: u8| only.as_ref().is_none_or(|v| v.contains(&id));
    let start = Instant::now();
    let mut results = Vec::new();

    macro_rules! criterion {
        ($id:expr, $name:expr, $f:expr) => {
            if wanted($id) {
                results.push(($id, run($id, $name, $f)));
            }
        };
    }

    criterion!(1, "vq oracle equivalence", vq_oracle);
    criterion!(2, "straight-through gradient", straight_through);
    criterion!(3, "sampler similarity bound", sampler_bound);
    criterion!(4, "lambda_s monotonicity", lambda_monotonicity);
    criterion!(5, "metric oracles", metric_oracles);
    criterion!(6, "freezing contract", freezing);

    if wanted(7) || wanted(8) {
        let t = Instant::now();
        let cfg = desk_config();
        let corpus = natural_corpus(200, 64, 1).unwrap();
        let held = natural_corpus(24, 64, 2).unwrap();
        let mut stage1 = DsrModel::new(&cfg.model, cfg.seed, &default_device()).unwrap();
        let before = reconstruction_error(&stage1, &held).unwrap();
        let s1 = train_stage1(&mut stage1, &corpus, &cfg, None);
        let after = reconstruction_error(&stage1, &held).unwrap();
        let s1_secs = t.elapsed().as_secs_f64();
        let obj = ObjectTexture::new(OBJECT_KIND, 7);
        let mut desk = Desk {
            train: obj.images(120, 64, 1).unwrap(),
            held_out: obj.images(32, 64, 2).unwrap(),
            defects: obj.defect_set(16, 16, 64, 3, &cfg.synth).unwrap(),
            stage2: None,
            stage1,
            cfg,
        };
        if wanted(7) {
            let recon = match s1 {
                Ok(_) => ensure(
                    before / after >= 10.0,
                    format!("stage 1 ({s1_secs:.0}s): held-out L2 {before:.4} -> {after:.4}, {:.1}x (>= 10x)", before / after),
                ),
                Err(e) => Err(e.to_string()),
            };
            let ok = run(7, "desk-scale end to end", || {
                let rest = desk_end_to_end(&mut desk);
                let total = start.elapsed().as_secs_f64();
                match (recon, rest) {
                    (Ok(a), Ok(b)) if total <= 6.0 * 3600.0 => Ok(format!("{a}; {b}")),
                    (a, b) => Err(format!("{}; {}", a.unwrap_or_else(|e| e), b.unwrap_or_else(|e| e))),
                }
            });
            results.push((7, ok));
        }
        criterion!(8, "ablation direction (bounded vs uniform)", || ablation_direction(&desk));
    }

    criterion!(9, "determinism", determinism);
    criterion!(10, "shape contract", shapes);

    let passed = results.iter().filter(|r| r.1).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.0}s",
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
