#![allow(dead_code)]

use fmvit::model::{Model, ModelConfig};
use fmvit::params::Graph;
use fmvit::rng::stream;
use fmvit::{Modality, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// D=8, h=2, 32², P=16, two stages of one block.
pub fn tiny_config(modalities: &[Modality]) -> ModelConfig {
    ModelConfig {
        height: 32,
        width: 32,
        channels: 1,
        patch: 16,
        dim: 8,
        heads: 2,
        stages: vec![1, 1],
        mlp_ratio: 4,
        lambda: 0.5,
        modalities: modalities.to_vec(),
        cmtb: true,
    }
}

/// Replaces every parameter with a well-spread random value, so that
/// attention maps are far from uniform and gradients are far from zero.
pub fn randomize(model: &mut Model, seed: u64) {
    let mut rng = stream(seed, &[77]);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let t = model.store.get_mut(id);
        let shape = t.shape().to_vec();
        let scale = if name.ends_with(".gamma") {
            0.2
        } else if shape.len() == 2 && !name.ends_with(".cls") && !name.ends_with(".pos") {
            1.0 / (shape[0] as f64).sqrt()
        } else if name.ends_with(".cls") || name.ends_with(".pos") {
            0.5
        } else {
            0.1
        };
        let base = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
        for v in t.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = base + scale * z;
        }
    }
}

pub fn random_image(cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = stream(seed, &[88]);
    let n = cfg.height * cfg.width * cfg.channels;
    Tensor::new(
        vec![cfg.height, cfg.width, cfg.channels],
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Value of the total loss of `model` on `batch` (images per branch) plus
/// the accumulated masks seen in every cross-modal block.
pub fn loss_and_masks(model: &Model, batch: &[Vec<Tensor>], labels: &[f64]) -> (f64, Vec<Vec<u32>>) {
    let mut g = Graph::new(&model.store);
    let (loss, masks) = loss_on(&mut g, model, batch, labels);
    (g.tape.value(loss).item(), masks)
}

pub fn loss_on(
    g: &mut Graph,
    model: &Model,
    batch: &[Vec<Tensor>],
    labels: &[f64],
) -> (fmvit::autograd::Var, Vec<Vec<u32>>) {
    let mut per_head: Vec<Vec<fmvit::autograd::Var>> = vec![Vec::new(); model.config.heads_list().len()];
    let mut masks = Vec::new();
    for (i, imgs) in batch.iter().enumerate() {
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let out = model.forward(g, &refs, &mut stream(5, &[i as u64])).unwrap();
        for t in &out.trace {
            masks.push(t.masks.accumulated.counts.clone());
        }
        for (slot, l) in per_head.iter_mut().zip(out.logits()) {
            slot.push(l);
        }
    }
    let cols: Vec<_> = per_head.iter().map(|ls| g.tape.concat_rows(ls).unwrap()).collect();
    let (total, _) = fmvit::model::total_loss(g, &cols, labels).unwrap();
    (total, masks)
}

pub fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}
