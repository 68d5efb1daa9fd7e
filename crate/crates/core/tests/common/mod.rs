#![allow(dead_code)]

use std::collections::BTreeMap;

use dsr_core::config::{DsrConfig, Profile};
use dsr_core::data::{natural_corpus, ObjectTexture, TextureKind};
use dsr_core::nets::Component;
use dsr_core::{default_device, DsrModel, ImageTensor};

/// Tiny profile with schedules short enough for unit-speed tests.
pub fn quick_config(iterations: usize) -> DsrConfig {
    let mut cfg = DsrConfig::for_profile(Profile::Tiny);
    for sc in [&mut cfg.stage1, &mut cfg.stage2, &mut cfg.stage3] {
        sc.iterations = iterations;
        sc.batch_size = 2;
        sc.log_interval = 1;
        sc.lr_decay_at = None;
    }
    cfg
}

pub fn corpus(n: usize) -> Vec<ImageTensor> {
    natural_corpus(n, 64, 3).unwrap()
}

pub fn object_images(n: usize) -> Vec<ImageTensor> {
    ObjectTexture::new(TextureKind::Weave, 5).images(n, 64, 9).unwrap()
}

pub fn fresh_model(cfg: &DsrConfig) -> DsrModel {
    DsrModel::new(&cfg.model, 0, &default_device()).unwrap()
}

/// Parameter values grouped by component.
pub fn values_by_component(model: &DsrModel) -> BTreeMap<&'static str, BTreeMap<String, Vec<u32>>> {
    let snap = model.params().snapshot().unwrap();
    let mut out: BTreeMap<&'static str, BTreeMap<String, Vec<u32>>> = BTreeMap::new();
    for c in Component::ALL {
        let entry = out.entry(c.prefix()).or_default();
        for (name, v) in &snap {
            if name.starts_with(c.prefix()) {
                entry.insert(name.clone(), v.iter().map(|x| x.to_bits()).collect());
            }
        }
    }
    out
}
