//! Attention kernels: multi-head self-attention for the standard blocks,
//! and the two CLS-query kernels of the cross-modal block.
//!
//! Mutual-attention (MMA) scores the patch tokens of every modality against
//! that modality's CLS query, keeps the smallest set of tokens holding a
//! `lambda` share of the softmax mass, sums those selections across
//! modalities into one shared mask, and lets each branch's CLS attend only
//! to its own patches inside that mask. Fusion-attention (MFA) lets a
//! branch's CLS attend to all patch tokens of a partner branch.
//!
//! Both kernels return only a CLS update; [`with_cls_residual`] adds it to
//! the CLS row and passes patch rows through untouched.

use rand::Rng;

use crate::autograd::{Var, MASK_SENTINEL};
use crate::error::{Error, Result};
use crate::nn::{linear, softmax_lastdim, LinearParams};
use crate::params::{Graph, ParamStore};
use crate::tensor::{matmul_nt_raw, softmax_slice, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub o: LinearParams,
    pub dim: usize,
    pub heads: usize,
}

impl AttentionParams {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by heads {heads}")));
        }
        Ok(AttentionParams {
            q: LinearParams::init(store, &format!("{name}.q"), dim, dim, rng),
            k: LinearParams::init(store, &format!("{name}.k"), dim, dim, rng),
            v: LinearParams::init(store, &format!("{name}.v"), dim, dim, rng),
            o: LinearParams::init(store, &format!("{name}.o"), dim, dim, rng),
            dim,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    fn check(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn param_count(dim: usize) -> usize {
        4 * LinearParams::param_count(dim, dim)
    }
}

/// CLS-to-patch scaled dot products, one row per head (`h × n`).
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceMap {
    pub heads: usize,
    pub n: usize,
    pub values: Tensor,
}

impl RelevanceMap {
    pub fn new(values: Tensor) -> Result<Self> {
        let (heads, n) = values.dims2()?;
        Ok(RelevanceMap { heads, n, values })
    }

    pub fn row(&self, head: usize) -> &[f64] {
        self.values.row(head)
    }
}

/// Per-head token selection. Single-modality masks hold 0/1; accumulated
/// masks hold counts up to the number of modalities.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMatrix {
    pub heads: usize,
    pub n: usize,
    pub counts: Vec<u32>,
}

impl MaskMatrix {
    pub fn ones(heads: usize, n: usize) -> Self {
        MaskMatrix {
            heads,
            n,
            counts: vec![1; heads * n],
        }
    }

    pub fn get(&self, head: usize, i: usize) -> u32 {
        self.counts[head * self.n + i]
    }

    pub fn row(&self, head: usize) -> &[u32] {
        &self.counts[head * self.n..(head + 1) * self.n]
    }

    /// Positions with a positive count, flattened head-major.
    pub fn keep(&self) -> Vec<bool> {
        self.counts.iter().map(|&c| c > 0).collect()
    }

    pub fn selected(&self, head: usize) -> usize {
        self.row(head).iter().filter(|&&c| c > 0).count()
    }

    fn check_nonempty(&self) -> Result<()> {
        match (0..self.heads).find(|&h| self.selected(h) == 0) {
            Some(head) => Err(Error::EmptySelection { head }),
            None => Ok(()),
        }
    }
}

/// Multi-head self-attention over all `N` tokens. Returns the projected
/// output and the per-head `N × N` weights.
pub fn msa_with_weights(g: &mut Graph, z: Var, p: &AttentionParams) -> Result<(Var, Vec<Var>)> {
    p.check()?;
    let (_, d) = g.tape.value(z).dims2()?;
    if d != p.dim {
        return Err(Error::mismatch("msa", g.tape.shape(z), &[p.dim]));
    }
    let q = linear(g, z, &p.q)?;
    let k = linear(g, z, &p.k)?;
    let v = linear(g, z, &p.v)?;
    let dh = p.head_dim();
    let mut outs = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = g.tape.slice_cols(q, h * dh, dh)?;
        let kh = g.tape.slice_cols(k, h * dh, dh)?;
        let vh = g.tape.slice_cols(v, h * dh, dh)?;
        let scores = g.tape.matmul_nt(qh, kh)?;
        let scores = g.tape.scale(scores, p.scale())?;
        let a = softmax_lastdim(g, scores)?;
        outs.push(g.tape.matmul(a, vh)?);
        weights.push(a);
    }
    let cat = g.tape.concat_cols(&outs)?;
    Ok((linear(g, cat, &p.o)?, weights))
}

pub fn msa(g: &mut Graph, z: Var, p: &AttentionParams) -> Result<Var> {
    Ok(msa_with_weights(g, z, p)?.0)
}

fn split_tokens(g: &mut Graph, z: Var) -> Result<(Var, Var, usize)> {
    let (n_tok, _) = g.tape.value(z).dims2()?;
    if n_tok < 2 {
        return Err(Error::shape("cls attention", format!("need CLS plus patches, got {n_tok} tokens")));
    }
    let cls = g.tape.slice_rows(z, 0, 1)?;
    let pat = g.tape.slice_rows(z, 1, n_tok - 1)?;
    Ok((cls, pat, n_tok - 1))
}

fn linear_values(store: &ParamStore, x: &[f64], rows: usize, p: &LinearParams) -> Vec<f64> {
    let w = store.get(p.weight);
    let b = store.get(p.bias);
    let mut out = crate::tensor::matmul_raw(x, w.data(), rows, p.d_in, p.d_out);
    for r in out.chunks_mut(p.d_out) {
        r.iter_mut().zip(b.data()).for_each(|(o, bv)| *o += bv);
    }
    out
}

/// Relevance map of a CLS-first sequence, computed off-tape.
pub fn relevance_map_values(z: &Tensor, p: &AttentionParams, store: &ParamStore) -> Result<RelevanceMap> {
    p.check()?;
    let (n_tok, d) = z.dims2()?;
    if d != p.dim {
        return Err(Error::mismatch("relevance_map", z.shape(), &[p.dim]));
    }
    if n_tok < 2 {
        return Err(Error::shape("relevance_map", "sequence has no patch tokens"));
    }
    let n = n_tok - 1;
    let q = linear_values(store, &z.data()[..d], 1, &p.q);
    let k = linear_values(store, &z.data()[d..], n, &p.k);
    let dh = p.head_dim();
    let mut values = Vec::with_capacity(p.heads * n);
    for h in 0..p.heads {
        let qh: Vec<f64> = q[h * dh..(h + 1) * dh].to_vec();
        let kh: Vec<f64> = k.chunks(d).flat_map(|r| r[h * dh..(h + 1) * dh].to_vec()).collect();
        values.extend(matmul_nt_raw(&qh, &kh, 1, dh, n).into_iter().map(|x| x * p.scale()));
    }
    RelevanceMap::new(Tensor::new(vec![p.heads, n], values)?)
}

/// Relevance map of the sequence `z` on the graph (values only).
pub fn relevance_map(g: &mut Graph, z: Var, p: &AttentionParams) -> Result<RelevanceMap> {
    relevance_map_values(g.tape.value(z), p, g.store())
}

/// Per head: softmax the map row, rank tokens by probability (ties to the
/// lower index), and keep the shortest prefix whose mass reaches `lambda`.
/// At least one token is always kept; `lambda >= 1` keeps every token.
pub fn threshold_mask_lambda(map: &RelevanceMap, lambda: f64) -> Result<MaskMatrix> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain {
            op: "threshold_mask_lambda",
            msg: format!("lambda {lambda} outside [0, 1]"),
        });
    }
    if map.heads == 0 || map.n == 0 {
        return Err(Error::shape("threshold_mask_lambda", "empty relevance map"));
    }
    let mut counts = vec![0u32; map.heads * map.n];
    for h in 0..map.heads {
        let row = &mut counts[h * map.n..(h + 1) * map.n];
        if lambda >= 1.0 {
            row.fill(1);
            continue;
        }
        let probs = softmax_slice(map.row(h));
        let mut order: Vec<usize> = (0..map.n).collect();
        // stable: equal probabilities stay in index order
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
        let mut mass = 0.0;
        for &i in &order {
            row[i] = 1;
            mass += probs[i];
            if mass >= lambda {
                break;
            }
        }
    }
    Ok(MaskMatrix {
        heads: map.heads,
        n: map.n,
        counts,
    })
}

/// Elementwise sum of per-modality masks.
pub fn accumulate_masks(masks: &[MaskMatrix]) -> Result<MaskMatrix> {
    let first = masks
        .first()
        .ok_or_else(|| Error::shape("accumulate_masks", "no masks"))?;
    let mut acc = MaskMatrix {
        heads: first.heads,
        n: first.n,
        counts: vec![0; first.counts.len()],
    };
    for m in masks {
        if m.heads != first.heads || m.n != first.n {
            return Err(Error::mismatch("accumulate_masks", &[first.heads, first.n], &[m.heads, m.n]));
        }
        acc.counts.iter_mut().zip(&m.counts).for_each(|(a, c)| *a += c);
    }
    Ok(acc)
}

/// Replaces unselected logits with the mask sentinel.
pub fn select_gamma_m(map: &RelevanceMap, mask: &MaskMatrix) -> Result<RelevanceMap> {
    if map.heads != mask.heads || map.n != mask.n {
        return Err(Error::mismatch("select_gamma_m", &[map.heads, map.n], &[mask.heads, mask.n]));
    }
    mask.check_nonempty()?;
    let values = map
        .values
        .data()
        .iter()
        .zip(&mask.counts)
        .map(|(&v, &c)| if c > 0 { v } else { MASK_SENTINEL })
        .collect();
    RelevanceMap::new(Tensor::new(vec![map.heads, map.n], values)?)
}

/// Result of a CLS-query kernel: the `1 × D` update plus the per-head
/// attention rows (each `1 × n`).
#[derive(Clone, Debug)]
pub struct ClsAttention {
    pub update: Var,
    pub weights: Vec<Var>,
}

impl ClsAttention {
    /// Attention weights as an `h × n` tensor.
    pub fn weight_matrix(&self, g: &Graph) -> Tensor {
        let rows: Vec<&[f64]> = self.weights.iter().map(|&w| g.tape.value(w).data()).collect();
        Tensor::from_rows(&rows).expect("uniform rows")
    }
}

/// Query from `q_src`'s CLS row; keys and values from `kv_src`'s patch rows.
/// With a mask, unselected logits are sentinel-filled before the softmax.
fn cls_attention(
    g: &mut Graph,
    q_src: Var,
    kv_src: Var,
    p: &AttentionParams,
    mask: Option<&MaskMatrix>,
) -> Result<ClsAttention> {
    p.check()?;
    let (qs, ks) = (g.tape.shape(q_src).to_vec(), g.tape.shape(kv_src).to_vec());
    if qs != ks {
        return Err(Error::mismatch("cls attention", &qs, &ks));
    }
    if qs[1] != p.dim {
        return Err(Error::mismatch("cls attention", &qs, &[p.dim]));
    }
    let (cls, _, _) = split_tokens(g, q_src)?;
    let (_, pat, n) = split_tokens(g, kv_src)?;
    if let Some(m) = mask {
        if m.heads != p.heads || m.n != n {
            return Err(Error::mismatch("cls attention mask", &[m.heads, m.n], &[p.heads, n]));
        }
        m.check_nonempty()?;
    }
    let q = linear(g, cls, &p.q)?;
    let k = linear(g, pat, &p.k)?;
    let v = linear(g, pat, &p.v)?;
    let dh = p.head_dim();
    let mut outs = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = g.tape.slice_cols(q, h * dh, dh)?;
        let kh = g.tape.slice_cols(k, h * dh, dh)?;
        let vh = g.tape.slice_cols(v, h * dh, dh)?;
        let logits = g.tape.matmul_nt(qh, kh)?;
        let mut logits = g.tape.scale(logits, p.scale())?;
        if let Some(m) = mask {
            let keep: Vec<bool> = m.row(h).iter().map(|&c| c > 0).collect();
            logits = g.tape.masked_fill(logits, &keep)?;
        }
        let a = softmax_lastdim(g, logits)?;
        outs.push(g.tape.matmul(a, vh)?);
        weights.push(a);
    }
    let cat = g.tape.concat_cols(&outs)?;
    Ok(ClsAttention {
        update: linear(g, cat, &p.o)?,
        weights,
    })
}

/// Masks of every modality and their accumulation. All sequences must be
/// layer-normalised already. Masks are plain data: no gradient path.
#[derive(Clone, Debug)]
pub struct MutualMasks {
    pub maps: Vec<RelevanceMap>,
    pub masks: Vec<MaskMatrix>,
    pub accumulated: MaskMatrix,
}

pub fn mutual_masks(g: &Graph, normed: &[Var], p: &AttentionParams, lambda: f64) -> Result<MutualMasks> {
    let first = *normed
        .first()
        .ok_or_else(|| Error::shape("mutual_masks", "no modality sequences"))?;
    let shape = g.tape.shape(first).to_vec();
    let mut maps = Vec::with_capacity(normed.len());
    let mut masks = Vec::with_capacity(normed.len());
    for &z in normed {
        if g.tape.shape(z) != shape.as_slice() {
            return Err(Error::mismatch("mutual_masks", &shape, g.tape.shape(z)));
        }
        let map = relevance_map_values(g.tape.value(z), p, g.store())?;
        masks.push(threshold_mask_lambda(&map, lambda)?);
        maps.push(map);
    }
    let accumulated = accumulate_masks(&masks)?;
    Ok(MutualMasks {
        maps,
        masks,
        accumulated,
    })
}

/// Mutual-attention of one branch given the shared accumulated mask.
pub fn mma_with_mask(g: &mut Graph, z_self: Var, mask: &MaskMatrix, p: &AttentionParams) -> Result<ClsAttention> {
    cls_attention(g, z_self, z_self, p, Some(mask))
}

/// Mutual-attention of `z_self` guided by `z_others`. Inputs are expected
/// to be layer-normalised.
pub fn mma(g: &mut Graph, z_self: Var, z_others: &[Var], p: &AttentionParams, lambda: f64) -> Result<ClsAttention> {
    let mut all = Vec::with_capacity(1 + z_others.len());
    all.push(z_self);
    all.extend_from_slice(z_others);
    let masks = mutual_masks(g, &all, p, lambda)?;
    mma_with_mask(g, z_self, &masks.accumulated, p)
}

/// Fusion-attention: `z_self`'s CLS attends over all of `z_partner`'s patch
/// tokens.
pub fn mfa(g: &mut Graph, z_self: Var, z_partner: Var, p: &AttentionParams) -> Result<ClsAttention> {
    cls_attention(g, z_self, z_partner, p, None)
}

/// `[z_cls + update ‖ z_pat]`.
pub fn with_cls_residual(g: &mut Graph, z: Var, update: Var) -> Result<Var> {
    let (cls, pat, _) = split_tokens(g, z)?;
    let cls = g.tape.add(cls, update)?;
    g.tape.concat_rows(&[cls, pat])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn randomized(dim: usize, heads: usize, seed: u64) -> (ParamStore, AttentionParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let p = AttentionParams::init(&mut s, "attn", dim, heads, &mut rng).unwrap();
        for id in s.ids().collect::<Vec<_>>() {
            let shape = s.get(id).shape().to_vec();
            *s.get_mut(id) = random(&shape, &mut rng);
        }
        (s, p)
    }

    fn map_of(rows: &[&[f64]]) -> RelevanceMap {
        RelevanceMap::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn init_rejects_indivisible_heads() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(AttentionParams::init(&mut s, "a", 6, 4, &mut rng).is_err());
    }

    #[test]
    fn msa_single_token_returns_projected_value() {
        let (s, p) = randomized(4, 2, 1);
        let mut g = Graph::new(&s);
        let zt = random(&[1, 4], &mut ChaCha8Rng::seed_from_u64(2));
        let z = g.tape.constant(zt.clone());
        let out = msa(&mut g, z, &p).unwrap();
        let v = linear(&mut g, z, &p.v).unwrap();
        let o = linear(&mut g, v, &p.o).unwrap();
        assert!(g.tape.value(out).max_abs_diff(g.tape.value(o)) < 1e-14);
    }

    #[test]
    fn msa_identical_tokens_attend_uniformly() {
        let (s, p) = randomized(4, 2, 3);
        let mut g = Graph::new(&s);
        let row = [0.3, -0.1, 0.8, 0.2];
        let z = g.tape.constant(Tensor::from_rows(&[&row, &row, &row]).unwrap());
        let (_, weights) = msa_with_weights(&mut g, z, &p).unwrap();
        for w in weights {
            assert!(g.tape.value(w).data().iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn msa_rows_sum_to_one() {
        let (s, p) = randomized(8, 2, 4);
        let mut g = Graph::new(&s);
        let z = g.tape.constant(random(&[4, 8], &mut ChaCha8Rng::seed_from_u64(5)));
        let (_, weights) = msa_with_weights(&mut g, z, &p).unwrap();
        for w in weights {
            let t = g.tape.value(w);
            for r in 0..4 {
                assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn relevance_map_hand_case() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = AttentionParams::init(&mut s, "a", 1, 1, &mut rng).unwrap();
        *s.get_mut(p.q.weight) = Tensor::from_rows(&[&[1.0]]).unwrap();
        *s.get_mut(p.k.weight) = Tensor::from_rows(&[&[1.0]]).unwrap();
        let z = Tensor::from_rows(&[&[2.0], &[1.0], &[3.0]]).unwrap();
        let map = relevance_map_values(&z, &p, &s).unwrap();
        assert_eq!(map.values.data(), &[2.0, 6.0]);
    }

    #[test]
    fn relevance_map_orthogonal_cls_is_zero() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = AttentionParams::init(&mut s, "a", 4, 2, &mut rng).unwrap();
        let mut eye = Tensor::zeros(&[4, 4]);
        (0..4).for_each(|i| eye.data_mut()[i * 5] = 1.0);
        *s.get_mut(p.q.weight) = eye.clone();
        *s.get_mut(p.k.weight) = eye;
        let z = Tensor::from_rows(&[&[1., 1., 0., 0.], &[0., 0., 1., 2.], &[0., 0., -3., 1.]]).unwrap();
        let map = relevance_map_values(&z, &p, &s).unwrap();
        assert!(map.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relevance_map_is_bilinear() {
        let (mut s, p) = randomized(8, 2, 6);
        for b in [p.q.bias, p.k.bias] {
            *s.get_mut(b) = Tensor::zeros(&[8]);
        }
        let z = random(&[5, 8], &mut ChaCha8Rng::seed_from_u64(7));
        let m1 = relevance_map_values(&z, &p, &s).unwrap();
        let m2 = relevance_map_values(&z.map(|v| 2.0 * v), &p, &s).unwrap();
        let scaled = m1.values.map(|v| 4.0 * v);
        assert!(m2.values.max_abs_diff(&scaled) < 1e-12);
    }

    #[test]
    fn relevance_map_needs_patches() {
        let (s, p) = randomized(4, 2, 8);
        assert!(relevance_map_values(&Tensor::zeros(&[1, 4]), &p, &s).is_err());
    }

    #[test]
    fn threshold_examples() {
        let probs = [0.5f64, 0.3, 0.2];
        let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let m = threshold_mask_lambda(&map_of(&[&logits]), 0.5).unwrap();
        assert_eq!(m.counts, vec![1, 0, 0]);

        let m = threshold_mask_lambda(&map_of(&[&[0.0; 4]]), 0.5).unwrap();
        assert_eq!(m.counts, vec![1, 1, 0, 0]);

        let m = threshold_mask_lambda(&map_of(&[&[0.1, 3.0, -2.0]]), 1.0).unwrap();
        assert_eq!(m.counts, vec![1, 1, 1]);
        let m = threshold_mask_lambda(&map_of(&[&[0.1, 3.0, -2.0]]), 0.0).unwrap();
        assert_eq!(m.counts, vec![0, 1, 0]);

        assert!(threshold_mask_lambda(&map_of(&[&[0.0]]), 1.5).is_err());
    }

    #[test]
    fn accumulate_examples() {
        let a = MaskMatrix { heads: 1, n: 3, counts: vec![1, 0, 0] };
        let b = MaskMatrix { heads: 1, n: 3, counts: vec![0, 0, 1] };
        let acc = accumulate_masks(&[a.clone(), b]).unwrap();
        assert_eq!(acc.keep(), vec![true, false, true]);

        let doubled = accumulate_masks(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(doubled.counts, vec![2, 0, 0]);
        assert_eq!(doubled.keep(), a.keep());

        let four = accumulate_masks(&vec![MaskMatrix::ones(2, 3); 4]).unwrap();
        assert!(four.counts.iter().all(|&c| c <= 4));

        let other = MaskMatrix::ones(1, 4);
        assert!(accumulate_masks(&[a, other]).is_err());
    }

    #[test]
    fn gamma_m_examples() {
        let map = map_of(&[&[0.2, -1.0, 0.7]]);
        let same = select_gamma_m(&map, &MaskMatrix::ones(1, 3)).unwrap();
        assert_eq!(same, map);

        let m = MaskMatrix { heads: 1, n: 3, counts: vec![1, 0, 1] };
        let out = select_gamma_m(&map, &m).unwrap();
        assert_eq!(out.values.data(), &[0.2, MASK_SENTINEL, 0.7]);
        assert!(softmax_slice(out.row(0))[1] <= 1e-12);

        let empty = MaskMatrix { heads: 1, n: 3, counts: vec![0, 0, 0] };
        assert!(matches!(select_gamma_m(&map, &empty), Err(Error::EmptySelection { head: 0 })));
    }

    #[test]
    fn mma_and_mfa_pass_patches_through() {
        let (s, p) = randomized(8, 2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut g = Graph::new(&s);
        let a = g.tape.constant(random(&[5, 8], &mut rng));
        let b = g.tape.constant(random(&[5, 8], &mut rng));
        let up = mma(&mut g, a, &[b], &p, 0.5).unwrap();
        let out = with_cls_residual(&mut g, a, up.update).unwrap();
        assert_eq!(&g.tape.value(out).data()[8..], &g.tape.value(a).data()[8..]);
        let up = mfa(&mut g, a, b, &p).unwrap();
        let out = with_cls_residual(&mut g, a, up.update).unwrap();
        assert_eq!(&g.tape.value(out).data()[8..], &g.tape.value(a).data()[8..]);
        assert_ne!(&g.tape.value(out).data()[..8], &g.tape.value(a).data()[..8]);
    }

    #[test]
    fn mfa_uniform_partner_and_single_patch() {
        let (s, p) = randomized(4, 2, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut g = Graph::new(&s);
        let me = g.tape.constant(random(&[4, 4], &mut rng));
        let patch = [0.4, -0.2, 0.9, 0.1];
        let partner = g
            .tape
            .constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0, 4.0], &patch, &patch, &patch]).unwrap());
        let out = mfa(&mut g, me, partner, &p).unwrap();
        for &w in &out.weights {
            assert!(g.tape.value(w).data().iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));
        }
        let one = g.tape.constant(Tensor::from_rows(&[&patch]).unwrap());
        let v = linear(&mut g, one, &p.v).unwrap();
        let expect = linear(&mut g, v, &p.o).unwrap();
        assert!(g.tape.value(out.update).max_abs_diff(g.tape.value(expect)) < 1e-14);

        let me2 = g.tape.constant(random(&[2, 4], &mut rng));
        let partner2 = g.tape.constant(random(&[2, 4], &mut rng));
        let out = mfa(&mut g, me2, partner2, &p).unwrap();
        assert!(out.weights.iter().all(|&w| g.tape.value(w).data() == [1.0]));
    }

    #[test]
    fn mfa_rejects_shape_mismatch() {
        let (s, p) = randomized(4, 2, 13);
        let mut g = Graph::new(&s);
        let a = g.tape.constant(Tensor::zeros(&[4, 4]));
        let b = g.tape.constant(Tensor::zeros(&[3, 4]));
        assert!(mfa(&mut g, a, b, &p).is_err());
        assert!(mma(&mut g, a, &[b], &p, 0.5).is_err());
    }
}
