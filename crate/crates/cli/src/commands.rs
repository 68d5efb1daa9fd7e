use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dsr_core::config::{DsrConfig, Profile, StageConfig};
use dsr_core::data::{
    natural_corpus, read_image, scan_dataset, write_image, write_mask, write_mvtec_layout, Layout,
    ObjectTexture, ResizePolicy, Sample, Split, TextureKind,
};
use dsr_core::eval::{emit_overlays, evaluate_dataset, image_score, infer_maps};
use dsr_core::synth::{inject_anomalies, perlin_mask, simulate_smudge, Sampling};
use dsr_core::train::{train_stage1, train_stage2, train_stage3, SupervisedSample};
use dsr_core::types::stack_images;
use dsr_core::{default_device, load_checkpoint, DsrModel, ImageTensor, Level};
use log::info;

use crate::{Cli, Command, Common, DataArgs, LayoutArg, LossArg, ScheduleArgs};

pub fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::TrainStage1 {
            data,
            synthetic,
            schedule,
        } => {
            let mut cfg = base_config(common)?;
            apply_schedule(&mut cfg.stage1, &schedule);
            cfg.validate()?;
            let size = cfg.model.image_size;
            let corpus = match (synthetic, &data.data) {
                (Some(n), _) => natural_corpus(n, size, cfg.seed).context("generating texture corpus")?,
                (None, Some(_)) => normal_images(load_split(&data, Split::Train, size)?),
                (None, None) => bail!("train-stage1 needs --data or --synthetic"),
            };
            let out = out_dir(common, "stage1")?;
            write_config(&cfg, &out)?;
            let mut model = DsrModel::new(&cfg.model, cfg.seed, &default_device())?;
            info!("{} parameters", model.params().num_scalars());
            let report = train_stage1(&mut model, &corpus, &cfg, Some(&out))?;
            finish_message(&report.final_checkpoint);
        }
        Command::TrainStage2 {
            checkpoint,
            data,
            supervised,
            schedule,
        } => {
            let (mut model, mut cfg) = load_for_training(common, &checkpoint)?;
            apply_schedule(&mut cfg.stage2, &schedule);
            cfg.stage2.supervised_anomaly_dirs.extend(supervised);
            cfg.validate()?;
            let size = cfg.model.image_size;
            let corpus = normal_images(load_split(&data, Split::Train, size)?);
            let sup = load_supervised(&cfg.stage2.supervised_anomaly_dirs, size, policy(&data))?;
            let out = out_dir(common, "stage2")?;
            write_config(&cfg, &out)?;
            let report = train_stage2(&mut model, &corpus, &sup, &cfg, Some(&out))?;
            info!(
                "sampler draws: {} bounded, {} uniform",
                report.sampler_counts.bounded, report.sampler_counts.uniform
            );
            finish_message(&report.final_checkpoint);
        }
        Command::TrainStage3 {
            checkpoint,
            data,
            schedule,
        } => {
            let (mut model, mut cfg) = load_for_training(common, &checkpoint)?;
            apply_schedule(&mut cfg.stage3, &schedule);
            cfg.validate()?;
            let corpus = normal_images(load_split(&data, Split::Train, cfg.model.image_size)?);
            let out = out_dir(common, "stage3")?;
            write_config(&cfg, &out)?;
            let report = train_stage3(&mut model, &corpus, &cfg, Some(&out))?;
            finish_message(&report.final_checkpoint);
        }
        Command::Infer {
            checkpoint,
            input,
            no_upsampler,
            threshold,
        } => {
            let ck = load_checkpoint(&checkpoint, &default_device())
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let threshold = threshold.unwrap_or(ck.config.eval.overlay_threshold);
            let size = ck.model.config().image_size;
            let files = image_files(&input)?;
            let out = out_dir(common, "infer")?;
            let mut lines = String::from("image\tscore\n");
            for chunk in files.chunks(8) {
                let imgs = chunk
                    .iter()
                    .map(|p| read_image(p, Some(size), ResizePolicy::Stretch))
                    .collect::<dsr_core::Result<Vec<_>>>()?;
                let refs: Vec<&ImageTensor> = imgs.iter().collect();
                let (m, pix) = infer_maps(&ck.model, &refs, no_upsampler)?;
                for ((path, img), (m, p)) in chunk.iter().zip(&imgs).zip(m.iter().zip(&pix)) {
                    let stem = file_stem(path);
                    let score = image_score(m);
                    println!("{}\t{score:.6}", path.display());
                    lines.push_str(&format!("{}\t{score:.6}\n", path.display()));
                    emit_overlays(img, p, threshold, &out, &stem)?;
                }
            }
            let scores = out.join("scores.tsv");
            fs::write(&scores, lines).with_context(|| format!("writing {}", scores.display()))?;
            info!("overlays and scores written to {}", out.display());
        }
        Command::Eval {
            checkpoint,
            data,
            no_upsampler,
            pooling,
            overlays,
        } => {
            let ck = load_checkpoint(&checkpoint, &default_device())
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let mut eval_cfg = ck.config.eval.clone();
            if let Some(c) = &common.config {
                eval_cfg = DsrConfig::load(c, common.profile.into())?.eval;
            }
            eval_cfg.no_upsampler |= no_upsampler;
            if let Some(p) = pooling {
                eval_cfg.pixel_pooling = p.into();
            }
            let samples = load_split(&data, Split::Test, ck.model.config().image_size)?;
            let out = out_dir(common, "eval")?;
            let report = evaluate_dataset(&ck.model, &samples, &eval_cfg)?;
            report.write(&out)?;
            print!("{}", report.table());
            if overlays {
                write_overlays(&ck.model, &samples, eval_cfg.no_upsampler, eval_cfg.overlay_threshold, &out)?;
            }
        }
        Command::SynthDebug {
            input,
            checkpoint,
            count,
        } => {
            let cfg = base_config(common)?;
            let model = match &checkpoint {
                Some(p) => Some(load_checkpoint(p, &default_device())?.model),
                None => None,
            };
            let size = model.as_ref().map_or(cfg.model.image_size, |m| m.config().image_size);
            let image = match &input {
                Some(p) => read_image(p, Some(size), ResizePolicy::Stretch)?,
                None => ObjectTexture::new(TextureKind::Weave, cfg.seed).images(1, size, cfg.seed)?.remove(0),
            };
            let out = out_dir(common, "synth-debug")?;
            synth_debug(&image, model.as_ref(), &cfg, count, &out)?;
            info!("wrote {count} samples to {}", out.display());
        }
        Command::Ablate {
            checkpoint,
            data,
            lambda_s,
            random_sampling,
            image_space_anomalies,
            loss,
            no_upsampler,
            schedule,
            dry_run,
        } => {
            let mut cfg = base_config(common)?;
            let s2 = &mut cfg.stage2;
            if let Some(l) = lambda_s {
                s2.lambda_s = l;
            }
            s2.random_sampling |= random_sampling;
            s2.image_space_anomalies |= image_space_anomalies;
            match loss {
                LossArg::Both => {}
                LossArg::Img => s2.loss_img_only = true,
                LossArg::Feat => s2.loss_feat_only = true,
            }
            apply_schedule(s2, &schedule);
            cfg.eval.no_upsampler |= no_upsampler;
            cfg.validate()?;
            if dry_run {
                print!("{}", cfg.to_toml_string());
                return Ok(());
            }
            let (mut model, ck_cfg) = load_for_training(common, &checkpoint)?;
            cfg.model = ck_cfg.model;
            let size = cfg.model.image_size;
            let train = normal_images(load_split(&data, Split::Train, size)?);
            let test = load_split(&data, Split::Test, size)?;
            let out = out_dir(common, "ablate")?;
            write_config(&cfg, &out)?;
            let sup = load_supervised(&cfg.stage2.supervised_anomaly_dirs, size, policy(&data))?;
            train_stage2(&mut model, &train, &sup, &cfg, Some(&out))?;
            if !cfg.eval.no_upsampler {
                train_stage3(&mut model, &train, &cfg, Some(&out))?;
            }
            let report = evaluate_dataset(&model, &test, &cfg.eval)?;
            report.write(&out)?;
            print!("{}", report.table());
        }
        Command::MakeCorpus {
            kind,
            size,
            natural,
            train,
            test_normal,
            test_defect,
        } => {
            let Some(k) = TextureKind::parse(&kind) else {
                bail!("unknown texture `{kind}`; one of stripes, checker, dots, weave, marble, grid");
            };
            let cfg = base_config(common)?;
            let out = out_dir(common, "corpus")?;
            let obj = ObjectTexture::new(k, cfg.seed);
            let train_imgs = obj.images(train, size, cfg.seed.wrapping_add(1))?;
            let test = obj.defect_set(test_normal, test_defect, size, cfg.seed.wrapping_add(2), &cfg.synth)?;
            write_mvtec_layout(&out, k.name(), &train_imgs, &test)?;
            for (i, img) in natural_corpus(natural, size, cfg.seed.wrapping_add(3))?.iter().enumerate() {
                write_image(img, &out.join(format!("natural/images/{i:04}.png")))?;
            }
            info!("corpus written to {}", out.display());
        }
    }
    Ok(())
}

/// Profile defaults, then the config file, then `--seed`.
fn base_config(c: &Common) -> Result<DsrConfig> {
    let profile: Profile = c.profile.into();
    let mut cfg = match &c.config {
        Some(p) => DsrConfig::load(p, profile)?,
        None => DsrConfig::for_profile(profile),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// The checkpoint's model with the command-line configuration around it.
fn load_for_training(c: &Common, path: &Path) -> Result<(DsrModel, DsrConfig)> {
    let ck = load_checkpoint(path, &default_device()).with_context(|| format!("loading {}", path.display()))?;
    let mut cfg = base_config(c)?;
    cfg.model = ck.model.config().clone();
    Ok((ck.model, cfg))
}

fn apply_schedule(sc: &mut StageConfig, s: &ScheduleArgs) {
    if let Some(n) = s.iterations {
        sc.iterations = n;
        // keep the decay point at the same fraction of the schedule
        if let Some(at) = sc.lr_decay_at.as_mut() {
            *at = n * 4 / 5;
        }
    }
    if let Some(b) = s.batch_size {
        sc.batch_size = b;
    }
    if let Some(lr) = s.lr {
        sc.learning_rate = lr;
    }
    if let Some(k) = s.checkpoint_every {
        sc.checkpoint_interval = k;
    }
}

fn out_dir(c: &Common, default: &str) -> Result<PathBuf> {
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(default));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_config(cfg: &DsrConfig, dir: &Path) -> Result<()> {
    let p = dir.join("config.toml");
    fs::write(&p, cfg.to_toml_string()).with_context(|| format!("writing {}", p.display()))
}

fn policy(d: &DataArgs) -> ResizePolicy {
    if d.pad {
        ResizePolicy::Pad
    } else {
        ResizePolicy::Stretch
    }
}

fn load_split(d: &DataArgs, split: Split, size: usize) -> Result<Vec<Sample>> {
    let Some(root) = &d.data else {
        bail!("--data is required");
    };
    let layout = match d.layout {
        LayoutArg::Mvtec => Layout::Mvtec,
        LayoutArg::Ksdd2 => Layout::Ksdd2,
        LayoutArg::Flat => Layout::Flat,
    };
    let mut manifest = scan_dataset(root, layout, split)?;
    if let Some(cat) = &d.category {
        manifest.entries.retain(|e| &e.category == cat);
        if manifest.entries.is_empty() {
            bail!("no {} images for category `{cat}` under {}", split.name(), root.display());
        }
    }
    let samples = manifest.load(size, policy(d))?;
    info!("{} {} images from {}", samples.len(), split.name(), root.display());
    Ok(samples)
}

fn normal_images(samples: Vec<Sample>) -> Vec<ImageTensor> {
    samples.into_iter().filter(|s| !s.anomalous).map(|s| s.image).collect()
}

fn load_supervised(dirs: &[PathBuf], size: usize, policy: ResizePolicy) -> Result<Vec<SupervisedSample>> {
    let mut out = Vec::new();
    for d in dirs {
        for s in scan_dataset(d, Layout::Flat, Split::Train)?.load(size, policy)? {
            if let (true, Some(mask)) = (s.anomalous, s.mask) {
                out.push(SupervisedSample { image: s.image, mask });
            }
        }
    }
    if !dirs.is_empty() {
        info!("{} supervised anomalies", out.len());
    }
    Ok(out)
}

fn image_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut v: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
        })
        .collect();
    v.sort();
    if v.is_empty() {
        bail!("no images in {}", input.display());
    }
    Ok(v)
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn finish_message(ckpt: &Option<PathBuf>) {
    if let Some(p) = ckpt {
        info!("checkpoint written to {}", p.display());
    }
}

fn write_overlays(model: &DsrModel, samples: &[Sample], no_upsampler: bool, threshold: f32, out: &Path) -> Result<()> {
    let dir = out.join("overlays");
    for chunk in samples.chunks(8) {
        let refs: Vec<&ImageTensor> = chunk.iter().map(|s| &s.image).collect();
        let (_, pix) = infer_maps(model, &refs, no_upsampler)?;
        for (s, p) in chunk.iter().zip(&pix) {
            emit_overlays(&s.image, p, threshold, &dir, &s.id.replace('/', "_"))?;
        }
    }
    Ok(())
}

fn synth_debug(image: &ImageTensor, model: Option<&DsrModel>, cfg: &DsrConfig, count: usize, out: &Path) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    write_image(image, &out.join("source.png"))?;
    for i in 0..count {
        let seed = cfg.seed.wrapping_add(i as u64);
        let m = perlin_mask(h, w, seed, &cfg.synth)?;
        write_mask(&m.mask, &out.join(format!("mask_{i:02}.png")))?;
        let (smudged, sm) = simulate_smudge(image, seed, &cfg.synth)?;
        write_image(&smudged, &out.join(format!("smudge_{i:02}.png")))?;
        write_mask(&sm, &out.join(format!("smudge_mask_{i:02}.png")))?;
        if let Some(model) = model {
            let x = stack_images(&[image], model.device())?;
            let enc = model.encode_frozen(&x)?;
            let sampling = if cfg.stage2.random_sampling {
                Sampling::Uniform
            } else {
                Sampling::bounded(cfg.stage2.lambda_s, model.config().codebook_size)?
            };
            let inj = inject_anomalies(
                &enc.q_hi,
                &enc.q_lo,
                model.codebook(Level::Hi),
                model.codebook(Level::Lo),
                &sampling,
                &cfg.synth,
                seed,
            )?;
            let dec = model.decode_general(&inj.q_hi.data, &inj.q_lo.data)?.clamp(0f32, 1f32)?;
            write_image(&ImageTensor::from_tensor(&dec.squeeze(0)?)?, &out.join(format!("latent_{i:02}.png")))?;
            write_mask(&inj.mask_full[0], &out.join(format!("latent_mask_{i:02}.png")))?;
        }
    }
    Ok(())
}
