mod common;

use common::random_tensor;
use fmvit::attention::{mfa, mma, with_cls_residual, AttentionParams};
use fmvit::autograd::Var;
use fmvit::model::{Model, StbParams};
use fmvit::nn::{LayerNormParams, MlpParams};
use fmvit::params::{Graph, ParamStore};
use fmvit::rng::stream;
use fmvit::Tensor;

const STEP: f64 = 1e-5;

/// Scalar read-out that weights every output entry differently.
fn readout(g: &mut Graph, y: Var) -> Var {
    let shape = g.tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect()).unwrap();
    let w = g.tape.constant(w);
    let p = g.tape.mul(y, w).unwrap();
    g.tape.sum(p, None).unwrap()
}

/// Central differences at this step carry roughly this much roundoff.
const FD_NOISE: f64 = 1e-8;

/// `|a - n| / max(|a|, |n|)` over whole tensors. A key bias shifts every
/// logit of a softmax row equally, so its true gradient is zero; such
/// tensors are compared absolutely against the finite-difference noise.
fn tensor_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    if norm(&mut analytic.iter().copied()) < 1e-12 {
        let noise = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        return if noise <= FD_NOISE { 0.0 } else { f64::INFINITY };
    }
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    diff / scale
}

/// Worst per-tensor relative error of the tape gradient against central
/// differences, over the inputs and every parameter in `store`.
fn check<F>(store: &ParamStore, inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let value = |store: &ParamStore, inputs: &[Tensor]| {
        let mut g = Graph::new(store);
        let vs: Vec<Var> = inputs.iter().map(|x| g.tape.constant(x.clone())).collect();
        let out = f(&mut g, &vs);
        g.tape.value(out).item()
    };
    let mut g = Graph::new(store);
    let vs: Vec<Var> = inputs.iter().map(|x| g.tape.leaf(x.clone())).collect();
    let out = f(&mut g, &vs);
    let grads = g.tape.backward(out).unwrap();
    let pgrads = g.param_grads(&grads);

    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let numeric: Vec<f64> = (0..x.numel())
            .map(|i| {
                let mut probe = inputs.to_vec();
                probe[k].data_mut()[i] += STEP;
                let plus = value(store, &probe);
                probe[k].data_mut()[i] -= 2.0 * STEP;
                let minus = value(store, &probe);
                (plus - minus) / (2.0 * STEP)
            })
            .collect();
        worst = worst.max(tensor_rel_err(grads.wrt(vs[k]).data(), &numeric));
    }
    let mut probe = store.clone();
    for id in store.ids() {
        let numeric: Vec<f64> = (0..store.get(id).numel())
            .map(|i| {
                let orig = store.get(id).data()[i];
                probe.get_mut(id).data_mut()[i] = orig + STEP;
                let plus = value(&probe, inputs);
                probe.get_mut(id).data_mut()[i] = orig - STEP;
                let minus = value(&probe, inputs);
                probe.get_mut(id).data_mut()[i] = orig;
                (plus - minus) / (2.0 * STEP)
            })
            .collect();
        worst = worst.max(tensor_rel_err(pgrads[id.index()].data(), &numeric));
    }
    worst
}

fn perturb_all(store: &mut ParamStore, seed: u64) {
    let mut rng = stream(seed, &[]);
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        let noise = random_tensor(&shape, 0.5, &mut rng);
        let t = store.get_mut(id);
        for (a, b) in t.data_mut().iter_mut().zip(noise.data()) {
            *a += b;
        }
    }
}

#[test]
fn stb_gradients_match_finite_differences() {
    let mut rng = stream(11, &[]);
    let mut store = ParamStore::new();
    let p = StbParams {
        ln1: LayerNormParams::init(&mut store, "ln1", 8),
        attn: AttentionParams::init(&mut store, "attn", 8, 2, &mut rng).unwrap(),
        ln2: LayerNormParams::init(&mut store, "ln2", 8),
        mlp: MlpParams::init(&mut store, "mlp", 8, 32, &mut rng),
    };
    perturb_all(&mut store, 12);
    let z = random_tensor(&[5, 8], 1.0, &mut rng);
    let worst = check(&store, &[z], |g, v| {
        let y = Model::stb_forward(g, v[0], &p).unwrap();
        readout(g, y)
    });
    assert!(worst <= 1e-4, "stb worst rel err {worst:e}");
}

#[test]
fn mfa_gradients_flow_through_both_sequences() {
    let mut rng = stream(13, &[]);
    let mut store = ParamStore::new();
    let p = AttentionParams::init(&mut store, "mfa", 8, 2, &mut rng).unwrap();
    perturb_all(&mut store, 14);
    let z = random_tensor(&[5, 8], 1.0, &mut rng);
    let partner = random_tensor(&[5, 8], 1.0, &mut rng);
    let worst = check(&store, &[z, partner], |g, v| {
        let a = mfa(g, v[0], v[1], &p).unwrap();
        let y = with_cls_residual(g, v[0], a.update).unwrap();
        readout(g, y)
    });
    assert!(worst <= 1e-5, "mfa worst rel err {worst:e}");
}

#[test]
fn mma_gradients_with_fixed_masks() {
    let mut rng = stream(15, &[]);
    let mut store = ParamStore::new();
    let p = AttentionParams::init(&mut store, "mma", 8, 2, &mut rng).unwrap();
    perturb_all(&mut store, 16);
    let z = random_tensor(&[7, 8], 1.0, &mut rng);
    let other = random_tensor(&[7, 8], 1.0, &mut rng);
    // masks are built off-tape; the other modality only shapes the mask
    let worst = check(&store, &[z, other], |g, v| {
        let a = mma(g, v[0], &[v[1]], &p, 0.5).unwrap();
        let y = with_cls_residual(g, v[0], a.update).unwrap();
        readout(g, y)
    });
    assert!(worst <= 1e-5, "mma worst rel err {worst:e}");
}

#[test]
fn masked_positions_receive_no_gradient() {
    let mut rng = stream(17, &[]);
    let mut store = ParamStore::new();
    let p = AttentionParams::init(&mut store, "mma", 8, 2, &mut rng).unwrap();
    perturb_all(&mut store, 18);
    let z = random_tensor(&[9, 8], 1.5, &mut rng);
    let mut g = Graph::new(&store);
    let zv = g.tape.leaf(z);
    let a = mma(&mut g, zv, &[], &p, 0.2).unwrap();
    let out = readout(&mut g, a.update);
    let grads = g.tape.backward(out).unwrap();
    let gz = grads.wrt(zv);
    // a patch token dropped by every head contributes neither key nor value
    let w = a.weight_matrix(&g);
    let mut dropped = 0;
    for j in 0..8 {
        if (0..p.heads).all(|h| w.at(h, j) == 0.0) {
            dropped += 1;
            assert!(gz.row(j + 1).iter().all(|&x| x == 0.0), "token {j} got gradient");
        }
    }
    assert!(dropped > 0, "lambda=0.2 should drop some token in every head");
}
