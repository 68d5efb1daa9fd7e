use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{save_checkpoint, TrainProgress};
use crate::config::{DsrConfig, ReconLoss, Stage, StageConfig};
use crate::error::{DsrError, Result};
use crate::nets::DsrModel;
use crate::synth::{inject_anomalies, paste_image_anomaly, simulate_smudge, SamplerCounts, Sampling};
use crate::train::focal::focal_loss_from_logits;
use crate::train::logfile::{TrainLog, TrainLogRecord};
use crate::types::{check_divisible, stack_images, stack_masks, AnomalyMask, ImageTensor, Level};
use crate::vq::{cell_l2, vq_losses};

/// A real anomalous image with its pixel mask, mixed into second-stage batches.
#[derive(Clone, Debug)]
pub struct SupervisedSample {
    pub image: ImageTensor,
    pub mask: AnomalyMask,
}

/// What a finished stage produced.
#[derive(Clone, Debug)]
pub struct StageReport {
    pub stage: Stage,
    pub records: Vec<TrainLogRecord>,
    pub sampler_counts: SamplerCounts,
    /// Intermediate checkpoints, oldest first.
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

/// Trains the encoder, both codebooks and the general decoder to
/// reconstruct `corpus`.
pub fn train_stage1(
    model: &mut DsrModel,
    corpus: &[ImageTensor],
    cfg: &DsrConfig,
    out_dir: Option<&Path>,
) -> Result<StageReport> {
    let mut run = Run::start(model, corpus, cfg, Stage::One, out_dir)?;
    let sc = &cfg.stage1;
    for it in 0..sc.iterations {
        let batch = run.batch(corpus, sc.batch_size, sc.augment_flip);
        let refs: Vec<&ImageTensor> = batch.iter().collect();
        let x = stack_images(&refs, model.device())?;
        let enc = model.encode(&x)?;
        let rec = model.decode_general(&enc.q_hi.data, &enc.q_lo.data)?;
        let hi = vq_losses(&enc.f_hi, &enc.q_hi, sc.lambda1)?;
        let lo = vq_losses(&enc.f_lo, &enc.q_lo, sc.lambda1)?;
        let terms = vec![
            ("reconstruction", cell_l2(&rec, &x)?),
            ("codebook", (hi.codebook + lo.codebook)?),
            ("commitment", (hi.commitment + lo.commitment)?),
        ];
        run.step(model, it, terms)?;
    }
    run.finish(model)
}

/// Trains the restriction modules, object-specific decoder and detector on
/// synthetic anomalies over the frozen first-stage model.
pub fn train_stage2(
    model: &mut DsrModel,
    corpus: &[ImageTensor],
    supervised: &[SupervisedSample],
    cfg: &DsrConfig,
    out_dir: Option<&Path>,
) -> Result<StageReport> {
    let mut run = Run::start(model, corpus, cfg, Stage::Two, out_dir)?;
    let sc = &cfg.stage2;
    let dims = (corpus[0].height(), corpus[0].width());
    for s in supervised {
        if (s.image.height(), s.image.width()) != dims || (s.mask.height(), s.mask.width()) != dims {
            return Err(DsrError::contract(format!(
                "supervised anomalies must match the {}x{} corpus",
                dims.0, dims.1
            )));
        }
    }
    let sampling = if sc.random_sampling {
        Sampling::Uniform
    } else {
        Sampling::bounded(sc.lambda_s, model.config().codebook_size)?
    };
    let level = model.config().mask_level;
    let stride = level.stride();
    let n_sup = if supervised.is_empty() {
        0
    } else {
        ((sc.supervised_ratio * sc.batch_size as f64).round() as usize).min(sc.batch_size)
    };
    let n_syn = sc.batch_size - n_sup;
    let dev = model.device().clone();

    for it in 0..sc.iterations {
        let clean = run.batch(corpus, n_syn, sc.augment_flip);
        let sup = run.supervised_batch(supervised, n_sup, sc.augment_flip);
        let seed: u64 = run.rng.random();

        // anomalous grids and level masks for the synthetic part
        let mut parts_hi = Vec::new();
        let mut parts_lo = Vec::new();
        let mut masks: Vec<AnomalyMask> = Vec::new();
        let mut targets = None;
        if n_syn > 0 {
            let refs: Vec<&ImageTensor> = clean.iter().collect();
            let x = stack_images(&refs, &dev)?;
            let enc = model.encode_frozen(&x)?;
            if sc.image_space_anomalies {
                let mut pasted = Vec::with_capacity(n_syn);
                for (i, img) in clean.iter().enumerate() {
                    let (p, m) = paste_image_anomaly(img, seed.wrapping_add(i as u64), &cfg.synth)?;
                    pasted.push(p);
                    masks.push(m.max_pool(stride)?);
                }
                let refs: Vec<&ImageTensor> = pasted.iter().collect();
                let anom = model.encode_frozen(&stack_images(&refs, &dev)?)?;
                parts_hi.push(anom.q_hi.data);
                parts_lo.push(anom.q_lo.data);
            } else {
                let inj = inject_anomalies(
                    &enc.q_hi,
                    &enc.q_lo,
                    model.codebook(Level::Hi),
                    model.codebook(Level::Lo),
                    &sampling,
                    &cfg.synth,
                    seed,
                )?;
                run.counts += inj.counts;
                masks.extend(match level {
                    Level::Hi => inj.mask_hi,
                    Level::Lo => inj.mask_lo,
                });
                parts_hi.push(inj.q_hi.data);
                parts_lo.push(inj.q_lo.data);
            }
            targets = Some((x, enc.q_hi.data, enc.q_lo.data));
        }
        if n_sup > 0 {
            let refs: Vec<&ImageTensor> = sup.iter().map(|s| &s.image).collect();
            let enc = model.encode_frozen(&stack_images(&refs, &dev)?)?;
            for s in &sup {
                masks.push(s.mask.max_pool(stride)?);
            }
            parts_hi.push(enc.q_hi.data);
            parts_lo.push(enc.q_lo.data);
        }
        let q_hi = Tensor::cat(&parts_hi, 0)?;
        let q_lo = Tensor::cat(&parts_lo, 0)?;
        let mask_refs: Vec<&AnomalyMask> = masks.iter().collect();
        let target_mask = stack_masks(&mask_refs, &dev)?;

        let i_gen = model.decode_general(&q_hi, &q_lo)?.detach();
        let obj = model.decode_object_specific(&q_hi, &q_lo)?;
        let logits = model.detect_logits(&i_gen, &obj.image.detach())?;
        let focal = focal_loss_from_logits(&logits, &target_mask, sc.focal_gamma, sc.focal_alpha)?;

        let zero = Tensor::zeros((), DType::F32, &dev)?;
        let (mut feature, mut image) = (zero.clone(), zero);
        if let Some((x, t_hi, t_lo)) = &targets {
            let recon = sc.recon_loss();
            if recon != ReconLoss::ImageOnly {
                let f_hi = obj.f_hi.data.narrow(0, 0, n_syn)?;
                let f_lo = obj.f_lo.data.narrow(0, 0, n_syn)?;
                let l2 = ((cell_l2(&f_hi, t_hi)? + cell_l2(&f_lo, t_lo)?)? * 0.5)?;
                feature = (l2 * sc.lambda2)?;
            }
            if recon != ReconLoss::FeatureOnly {
                let spc = obj.image.narrow(0, 0, n_syn)?;
                image = (cell_l2(&spc, x)? * sc.lambda3)?;
            }
        }
        let terms = vec![("focal", focal), ("feature", feature), ("image", image)];
        run.step(model, it, terms)?;
    }
    run.finish(model)
}

/// Trains the upsampling module on smudged normal images, everything
/// upstream frozen.
pub fn train_stage3(
    model: &mut DsrModel,
    corpus: &[ImageTensor],
    cfg: &DsrConfig,
    out_dir: Option<&Path>,
) -> Result<StageReport> {
    let mut run = Run::start(model, corpus, cfg, Stage::Three, out_dir)?;
    let sc = &cfg.stage3;
    let dev = model.device().clone();
    for it in 0..sc.iterations {
        let clean = run.batch(corpus, sc.batch_size, sc.augment_flip);
        let seed: u64 = run.rng.random();
        let mut smudged = Vec::with_capacity(clean.len());
        let mut masks = Vec::with_capacity(clean.len());
        for (i, img) in clean.iter().enumerate() {
            let (s, m) = simulate_smudge(img, seed.wrapping_add(i as u64), &cfg.synth)?;
            smudged.push(s);
            masks.push(m);
        }
        let refs: Vec<&ImageTensor> = smudged.iter().collect();
        let x = stack_images(&refs, &dev)?;
        let enc = model.encode_frozen(&x)?;
        let i_gen = model.decode_general(&enc.q_hi.data, &enc.q_lo.data)?.detach();
        let i_spc = model
            .decode_object_specific(&enc.q_hi.data, &enc.q_lo.data)?
            .image
            .detach();
        let m = model.detect(&i_gen, &i_spc)?.detach();
        let logits = model.upsample_logits(&x, &m)?;
        let mask_refs: Vec<&AnomalyMask> = masks.iter().collect();
        let target = stack_masks(&mask_refs, &dev)?;
        let focal = focal_loss_from_logits(&logits, &target, sc.focal_gamma, sc.focal_alpha)?;
        run.step(model, it, vec![("focal", focal)])?;
    }
    run.finish(model)
}

/// Mean per-pixel squared reconstruction error of the general decoder.
pub fn reconstruction_error(model: &DsrModel, images: &[ImageTensor]) -> Result<f64> {
    if images.is_empty() {
        return Err(DsrError::EmptyCorpus);
    }
    let mut total = 0.0;
    for chunk in images.chunks(8) {
        let refs: Vec<&ImageTensor> = chunk.iter().collect();
        let x = stack_images(&refs, model.device())?;
        let enc = model.encode_frozen(&x)?;
        let rec = model.decode_general(&enc.q_hi.data, &enc.q_lo.data)?;
        total += cell_l2(&rec, &x)?.to_scalar::<f32>()? as f64 * chunk.len() as f64;
    }
    Ok(total / images.len() as f64)
}

fn stage_seed(seed: u64, stage: Stage) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stage.number() as u64)
}

/// Shared loop state: optimizer, batch order, interval averages and output files.
struct Run<'a> {
    stage: Stage,
    sc: &'a StageConfig,
    cfg: &'a DsrConfig,
    out_dir: Option<&'a Path>,
    opt: AdamW,
    rng: ChaCha8Rng,
    rng_seed: u64,
    order: Vec<usize>,
    pos: usize,
    sup_order: Vec<usize>,
    sup_pos: usize,
    log: Option<TrainLog>,
    sums: Vec<(&'static str, f64)>,
    total_sum: f64,
    in_interval: usize,
    started: Instant,
    counts: SamplerCounts,
    report: StageReport,
}

impl<'a> Run<'a> {
    fn start(
        model: &DsrModel,
        corpus: &[ImageTensor],
        cfg: &'a DsrConfig,
        stage: Stage,
        out_dir: Option<&'a Path>,
    ) -> Result<Self> {
        let sc = cfg.stage(stage);
        sc.validate_for_training()?;
        if sc.log_interval == 0 {
            return Err(DsrError::Config(format!("stage{}.log_interval must be positive", stage.number())));
        }
        let done = model.stages_completed();
        let n = stage.number();
        if done + 1 < n {
            return Err(DsrError::StageOrder(format!(
                "stage {n} needs a model that finished stage {}, this one finished {done}",
                n - 1
            )));
        }
        if done >= n {
            return Err(DsrError::StageOrder(format!("stage {n} has already been trained")));
        }
        let first = corpus.first().ok_or(DsrError::EmptyCorpus)?;
        let dims = (first.height(), first.width());
        check_divisible(dims.0, dims.1)?;
        if let Some(bad) = corpus.iter().position(|i| (i.height(), i.width()) != dims) {
            return Err(DsrError::contract(format!(
                "corpus image {bad} is {}x{}, expected {}x{}",
                corpus[bad].height(),
                corpus[bad].width(),
                dims.0,
                dims.1
            )));
        }
        let vars = model.trainable_vars(stage);
        let opt = AdamW::new(
            vars,
            ParamsAdamW {
                lr: sc.learning_rate,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let rng_seed = stage_seed(cfg.seed, stage);
        let (log, log_path) = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| DsrError::io(dir, e))?;
                let p = dir.join(format!("stage{n}.log"));
                (Some(TrainLog::create(&p)?), Some(p))
            }
            None => (None, None),
        };
        log::info!(
            "stage {n}: {} iterations, batch {}, {} images",
            sc.iterations,
            sc.batch_size,
            corpus.len()
        );
        Ok(Self {
            stage,
            sc,
            cfg,
            out_dir,
            opt,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            rng_seed,
            order: (0..corpus.len()).collect(),
            pos: corpus.len(),
            sup_order: Vec::new(),
            sup_pos: 0,
            log,
            sums: Vec::new(),
            total_sum: 0.0,
            in_interval: 0,
            started: Instant::now(),
            counts: SamplerCounts::default(),
            report: StageReport {
                stage,
                records: Vec::new(),
                sampler_counts: SamplerCounts::default(),
                checkpoints: Vec::new(),
                final_checkpoint: None,
                log_path,
            },
        })
    }

    /// Next `k` images of a reshuffled-per-epoch pass over `corpus`.
    fn batch(&mut self, corpus: &[ImageTensor], k: usize, flip: bool) -> Vec<ImageTensor> {
        (0..k)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                let img = &corpus[self.order[self.pos]];
                self.pos += 1;
                if flip && self.rng.random::<bool>() {
                    img.flip_horizontal()
                } else {
                    img.clone()
                }
            })
            .collect()
    }

    fn supervised_batch(&mut self, pool: &[SupervisedSample], k: usize, flip: bool) -> Vec<SupervisedSample> {
        if self.sup_order.len() != pool.len() {
            self.sup_order = (0..pool.len()).collect();
            self.sup_pos = pool.len();
        }
        (0..k)
            .map(|_| {
                if self.sup_pos == self.sup_order.len() {
                    self.sup_order.shuffle(&mut self.rng);
                    self.sup_pos = 0;
                }
                let s = &pool[self.sup_order[self.sup_pos]];
                self.sup_pos += 1;
                if flip && self.rng.random::<bool>() {
                    SupervisedSample {
                        image: s.image.flip_horizontal(),
                        mask: s.mask.flip_horizontal(),
                    }
                } else {
                    s.clone()
                }
            })
            .collect()
    }

    fn step(&mut self, model: &DsrModel, it: usize, terms: Vec<(&'static str, Tensor)>) -> Result<()> {
        let lr = self.sc.learning_rate_at(it);
        self.opt.set_learning_rate(lr);
        let mut total = terms[0].1.clone();
        for (_, t) in &terms[1..] {
            total = (total + t)?;
        }
        let values = terms
            .iter()
            .map(|(n, t)| Ok((*n, t.to_scalar::<f32>()? as f64)))
            .collect::<Result<Vec<_>>>()?;
        let total_v = total.to_scalar::<f32>()? as f64;
        if !total_v.is_finite() {
            let detail = values
                .iter()
                .map(|(n, v)| format!("{n}={v}"))
                .collect::<Vec<_>>()
                .join(" ");
            return Err(DsrError::NonFiniteLoss { iteration: it + 1, detail });
        }
        self.opt.backward_step(&total)?;

        if self.sums.is_empty() {
            self.sums = values.iter().map(|(n, _)| (*n, 0.0)).collect();
        }
        for (s, (_, v)) in self.sums.iter_mut().zip(&values) {
            s.1 += v;
        }
        self.total_sum += total_v;
        self.in_interval += 1;

        let done = it + 1;
        if done % self.sc.log_interval == 0 || done == self.sc.iterations {
            self.flush(done, lr)?;
        }
        let every = self.sc.checkpoint_interval;
        if every > 0 && done % every == 0 && done < self.sc.iterations {
            if let Some(dir) = self.out_dir {
                let path = dir.join(format!("stage{}_iter{done:06}.ckpt", self.stage.number()));
                let progress = TrainProgress {
                    stage: self.stage.number(),
                    iteration: done,
                    rng_seed: self.rng_seed,
                    rng_word_pos: self.rng.get_word_pos().to_string(),
                };
                save_checkpoint(&path, model, self.cfg, Some(&progress))?;
                self.report.checkpoints.push(path);
            }
        }
        Ok(())
    }

    fn flush(&mut self, iteration: usize, lr: f64) -> Result<()> {
        let n = self.in_interval.max(1) as f64;
        let record = TrainLogRecord {
            iteration,
            learning_rate: lr,
            terms: self.sums.iter().map(|(k, v)| (k.to_string(), v / n)).collect(),
            total: self.total_sum / n,
            counters: if self.stage == Stage::Two {
                vec![
                    ("bounded_draws".into(), self.counts.bounded),
                    ("uniform_draws".into(), self.counts.uniform),
                ]
            } else {
                Vec::new()
            },
            elapsed_secs: self.started.elapsed().as_secs_f64(),
        };
        log::info!(
            "stage {} iter {iteration}: total {:.5} ({})",
            self.stage.number(),
            record.total,
            record
                .terms
                .iter()
                .map(|(k, v)| format!("{k} {v:.5}"))
                .collect::<Vec<_>>()
                .join(", ")
        );
        if let Some(log) = &mut self.log {
            log.append(&record)?;
        }
        self.report.records.push(record);
        for s in &mut self.sums {
            s.1 = 0.0;
        }
        self.total_sum = 0.0;
        self.in_interval = 0;
        Ok(())
    }

    fn finish(mut self, model: &mut DsrModel) -> Result<StageReport> {
        model.mark_stage_complete(self.stage)?;
        if let Some(dir) = self.out_dir {
            let path = dir.join(format!("stage{}.ckpt", self.stage.number()));
            save_checkpoint(&path, model, self.cfg, None)?;
            self.report.final_checkpoint = Some(path);
        }
        self.report.sampler_counts = self.counts;
        Ok(self.report)
    }
}
