use candle_core::{Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Stage};
use crate::error::{DsrError, Result};
use crate::nets::encoder::{Encoder, GeneralDecoder};
use crate::nets::heads::{Detector, Upsampler};
use crate::nets::layers::{Act, Builder, ParamStore};
use crate::nets::resize::resize_bilinear;
use crate::nets::restrict::{ObjectDecoder, Restriction};
use crate::types::{check_divisible, stack_images, ImageTensor, Level, MapResolution, SegmentationMap};
use crate::vq::{quantize, quantize_with_gradient, Codebook, FeatureGrid, QuantizedGrid};

/// Independently trained parts of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Encoder,
    CodebookHi,
    CodebookLo,
    GeneralDecoder,
    RestrictHi,
    RestrictLo,
    ObjectDecoder,
    Detector,
    Upsampler,
}

impl Component {
    pub const ALL: [Component; 9] = [
        Component::Encoder,
        Component::CodebookHi,
        Component::CodebookLo,
        Component::GeneralDecoder,
        Component::RestrictHi,
        Component::RestrictLo,
        Component::ObjectDecoder,
        Component::Detector,
        Component::Upsampler,
    ];

    /// Parameter-name prefix.
    pub fn prefix(self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::CodebookHi => "codebook_hi",
            Component::CodebookLo => "codebook_lo",
            Component::GeneralDecoder => "general_decoder",
            Component::RestrictHi => "restrict_hi",
            Component::RestrictLo => "restrict_lo",
            Component::ObjectDecoder => "object_decoder",
            Component::Detector => "detector",
            Component::Upsampler => "upsampler",
        }
    }

    /// The stage that optimizes this component.
    pub fn stage(self) -> Stage {
        match self {
            Component::Encoder
            | Component::CodebookHi
            | Component::CodebookLo
            | Component::GeneralDecoder => Stage::One,
            Component::RestrictHi
            | Component::RestrictLo
            | Component::ObjectDecoder
            | Component::Detector => Stage::Two,
            Component::Upsampler => Stage::Three,
        }
    }
}

/// Encoder outputs for a batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub f_hi: FeatureGrid,
    pub f_lo: FeatureGrid,
    pub q_hi: QuantizedGrid,
    pub q_lo: QuantizedGrid,
}

/// Object-specific decoder outputs: `I_spc`, the restricted features and
/// their re-quantization.
#[derive(Clone, Debug)]
pub struct ObjectSpecific {
    pub image: Tensor,
    pub f_hi: FeatureGrid,
    pub f_lo: FeatureGrid,
    pub q_hi: QuantizedGrid,
    pub q_lo: QuantizedGrid,
}

/// Detached inference outputs for a batch.
#[derive(Clone, Debug)]
pub struct Inference {
    pub i_gen: Tensor,
    pub i_spc: Tensor,
    /// Anomaly probability at the mask level, `(B, 1, h, w)`.
    pub mask: Tensor,
    /// Refined probability at input resolution, `(B, 1, H, W)`.
    pub refined: Tensor,
}

/// All sub-networks, both codebooks and the stage bookkeeping.
pub struct DsrModel {
    config: ModelConfig,
    params: ParamStore,
    codebook_hi: Codebook,
    codebook_lo: Codebook,
    encoder: Encoder,
    general: GeneralDecoder,
    restrict_hi: Restriction,
    restrict_lo: Restriction,
    object: ObjectDecoder,
    detector: Detector,
    upsampler: Upsampler,
    stages_completed: u8,
}

impl DsrModel {
    /// Freshly initialized model; every parameter is a function of `seed`.
    pub fn new(config: &ModelConfig, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new(device);
        let (n, d) = (config.codebook_size, config.embed_dim);
        let codebook_hi = Codebook::random_uniform(n, d, Level::Hi, &mut rng, device)?;
        let codebook_lo = Codebook::random_uniform(n, d, Level::Lo, &mut rng, device)?;
        params.insert(Component::CodebookHi.prefix(), codebook_hi.var().clone())?;
        params.insert(Component::CodebookLo.prefix(), codebook_lo.var().clone())?;
        let mut b = Builder {
            store: &mut params,
            rng: &mut rng,
            groups: config.norm_groups,
            act: Act(config.activation),
        };
        let encoder = Encoder::new(&mut b, config)?;
        let general = GeneralDecoder::new(&mut b, config)?;
        let restrict_hi = Restriction::new(&mut b, config, Level::Hi)?;
        let restrict_lo = Restriction::new(&mut b, config, Level::Lo)?;
        let object = ObjectDecoder::new(&mut b, config)?;
        let detector = Detector::new(&mut b, config)?;
        let upsampler = Upsampler::new(&mut b, config)?;
        Ok(Self {
            config: config.clone(),
            params,
            codebook_hi,
            codebook_lo,
            encoder,
            general,
            restrict_hi,
            restrict_lo,
            object,
            detector,
            upsampler,
            stages_completed: 0,
        })
    }

    /// Independent copy with the same parameters and stage progress.
    pub fn try_clone(&self) -> Result<Self> {
        let mut m = Self::new(&self.config, 0, self.device())?;
        m.params.restore(&self.params.snapshot()?)?;
        m.stages_completed = self.stages_completed;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn codebook(&self, level: Level) -> &Codebook {
        match level {
            Level::Hi => &self.codebook_hi,
            Level::Lo => &self.codebook_lo,
        }
    }

    /// Number of training stages completed, 0 to 3.
    pub fn stages_completed(&self) -> u8 {
        self.stages_completed
    }

    pub(crate) fn set_stages_completed(&mut self, n: u8) -> Result<()> {
        if n > 3 {
            return Err(DsrError::contract(format!("{n} stages completed")));
        }
        self.stages_completed = n;
        Ok(())
    }

    /// Records `stage` as finished; stages must complete in order.
    pub fn mark_stage_complete(&mut self, stage: Stage) -> Result<()> {
        let n = stage.number();
        if n > self.stages_completed + 1 {
            return Err(DsrError::StageOrder(format!(
                "stage {n} cannot complete before stage {}",
                self.stages_completed + 1
            )));
        }
        self.stages_completed = self.stages_completed.max(n);
        Ok(())
    }

    /// True once the stage that trains `c` has completed.
    pub fn is_frozen(&self, c: Component) -> bool {
        c.stage().number() <= self.stages_completed
    }

    pub fn component_vars(&self, c: Component) -> Vec<Var> {
        self.params.with_prefix(c.prefix())
    }

    /// Variables optimized by `stage`.
    pub fn trainable_vars(&self, stage: Stage) -> Vec<Var> {
        Component::ALL
            .iter()
            .filter(|c| c.stage() == stage)
            .flat_map(|&c| self.component_vars(c))
            .collect()
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(DsrError::contract(format!("expected 3 image channels, got {c}")));
        }
        check_divisible(h, w)
    }

    /// Encodes a `(B, 3, H, W)` batch. The quantized grids carry the
    /// straight-through gradient to the features.
    pub fn encode(&self, images: &Tensor) -> Result<Encoded> {
        self.check_images(images)?;
        let (trunk, f_lo) = self.encoder.lo(images)?;
        let f_lo = FeatureGrid::new(f_lo, Level::Lo)?;
        let q_lo = quantize_with_gradient(&f_lo, &self.codebook_lo)?;
        let f_hi = FeatureGrid::new(self.encoder.hi(&trunk, &q_lo.data)?, Level::Hi)?;
        let q_hi = quantize_with_gradient(&f_hi, &self.codebook_hi)?;
        Ok(Encoded { f_hi, f_lo, q_hi, q_lo })
    }

    /// Encoding with every output detached.
    pub fn encode_frozen(&self, images: &Tensor) -> Result<Encoded> {
        self.check_images(images)?;
        let images = images.detach();
        let (trunk, f_lo) = self.encoder.lo(&images)?;
        let f_lo = FeatureGrid::new(f_lo.detach(), Level::Lo)?;
        let q_lo = quantize(&f_lo, &self.codebook_lo)?;
        let f_hi = FeatureGrid::new(self.encoder.hi(&trunk, &q_lo.data)?.detach(), Level::Hi)?;
        let q_hi = quantize(&f_hi, &self.codebook_hi)?;
        Ok(Encoded { f_hi, f_lo, q_hi, q_lo })
    }

    /// `I_gen`, unclamped.
    pub fn decode_general(&self, q_hi: &Tensor, q_lo: &Tensor) -> Result<Tensor> {
        self.general.forward(q_hi, q_lo)
    }

    /// Restricted, non-quantized features `F~` for one level.
    pub fn restrict(&self, q: &Tensor, level: Level) -> Result<FeatureGrid> {
        let net = match level {
            Level::Hi => &self.restrict_hi,
            Level::Lo => &self.restrict_lo,
        };
        FeatureGrid::new(net.forward(q)?, level)
    }

    pub fn decode_object_specific(&self, q_hi: &Tensor, q_lo: &Tensor) -> Result<ObjectSpecific> {
        let (b, _, h, w) = q_hi.dims4()?;
        let (bl, _, hl, wl) = q_lo.dims4()?;
        if b != bl || h != 2 * hl || w != 2 * wl {
            return Err(DsrError::contract(format!(
                "hi grid {b}x{h}x{w} is not twice lo grid {bl}x{hl}x{wl}"
            )));
        }
        let f_hi = self.restrict(q_hi, Level::Hi)?;
        let f_lo = self.restrict(q_lo, Level::Lo)?;
        let rq_hi = quantize_with_gradient(&f_hi, &self.codebook_hi)?;
        let rq_lo = quantize_with_gradient(&f_lo, &self.codebook_lo)?;
        let image = self.object.forward(&rq_hi.data, &rq_lo.data)?;
        Ok(ObjectSpecific {
            image,
            f_hi,
            f_lo,
            q_hi: rq_hi,
            q_lo: rq_lo,
        })
    }

    /// Two-class logits at the mask level.
    pub fn detect_logits(&self, i_gen: &Tensor, i_spc: &Tensor) -> Result<Tensor> {
        if i_gen.dims() != i_spc.dims() {
            return Err(DsrError::contract(format!(
                "detector inputs differ in shape: {:?} vs {:?}",
                i_gen.dims(),
                i_spc.dims()
            )));
        }
        self.check_images(i_gen)?;
        self.detector.forward(i_gen, i_spc)
    }

    /// Anomaly probability `M`, `(B, 1, H / s, W / s)` with `s` the mask stride.
    pub fn detect(&self, i_gen: &Tensor, i_spc: &Tensor) -> Result<Tensor> {
        anomaly_probability(&self.detect_logits(i_gen, i_spc)?)
    }

    /// Two-class logits at input resolution from the image and `M`.
    pub fn upsample_logits(&self, images: &Tensor, mask: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        let (b, _, h, w) = images.dims4()?;
        let (bm, c, mh, mw) = mask.dims4()?;
        let s = self.config.mask_level.stride();
        if bm != b || c != 1 || mh * s != h || mw * s != w {
            return Err(DsrError::contract(format!(
                "mask {bm}x{c}x{mh}x{mw} does not match images {b}x{h}x{w} at stride {s}"
            )));
        }
        let up = resize_bilinear(mask, h, w)?;
        self.upsampler.forward(images, &up)
    }

    /// Refined anomaly probability `M_r` at input resolution.
    pub fn upsample_mask(&self, images: &Tensor, mask: &Tensor) -> Result<Tensor> {
        anomaly_probability(&self.upsample_logits(images, mask)?)
    }

    /// Full forward pass on a batch, no gradients retained.
    pub fn infer(&self, images: &Tensor) -> Result<Inference> {
        let enc = self.encode_frozen(images)?;
        let i_gen = self.decode_general(&enc.q_hi.data, &enc.q_lo.data)?.detach();
        let i_spc = self
            .decode_object_specific(&enc.q_hi.data, &enc.q_lo.data)?
            .image
            .detach();
        let mask = self.detect(&i_gen, &i_spc)?.detach();
        let refined = self.upsample_mask(&images.detach(), &mask)?.detach();
        Ok(Inference {
            i_gen,
            i_spc,
            mask,
            refined,
        })
    }

    /// Per-image `(M, M_r)` maps.
    pub fn infer_images(&self, images: &[&ImageTensor]) -> Result<Vec<(SegmentationMap, SegmentationMap)>> {
        let x = stack_images(images, self.device())?;
        let out = self.infer(&x)?;
        let m = SegmentationMap::from_batch(&out.mask, MapResolution::Feature)?;
        let r = SegmentationMap::from_batch(&out.refined, MapResolution::Full)?;
        Ok(m.into_iter().zip(r).collect())
    }
}

/// Softmax over the two class logits, anomalous channel kept.
pub fn anomaly_probability(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(logits, D::Minus(3))?.narrow(1, 1, 1)?)
}
