//! Multi-branch vision transformer with shared cross-modal blocks.
//!
//! Each modality has its own tokenizer, standard blocks and head. After
//! every stage, one cross-modal block (shared by all branches) runs
//! mutual-attention and then fusion-attention on the CLS tokens. With two
//! or more branches a joint head reads the concatenated CLS tokens.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    mfa, mma_with_mask, msa, mutual_masks, with_cls_residual, AttentionParams, MutualMasks,
};
use crate::autograd::Var;
use crate::config::{join_list, parse_list, KeyValues};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::nn::{bce_with_logit, gelu_mlp, layer_norm, linear, LayerNormParams, LinearParams, MlpParams};
use crate::params::{Graph, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    /// Standard blocks per stage; one cross-modal block follows each stage.
    pub stages: Vec<usize>,
    pub mlp_ratio: usize,
    pub lambda: f64,
    pub modalities: Vec<Modality>,
    /// Without cross-modal blocks the branches are independent ViTs.
    pub cmtb: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 32,
            width: 32,
            channels: 1,
            patch: 16,
            dim: 16,
            heads: 2,
            stages: vec![1, 1],
            mlp_ratio: 4,
            lambda: 0.5,
            modalities: vec![Modality::Rgb, Modality::Depth],
            cmtb: true,
        }
    }
}

impl ModelConfig {
    /// ViT-S layout at 224² with a single RGB branch and no cross-modal
    /// blocks.
    pub fn vit_small() -> Self {
        ModelConfig {
            height: 224,
            width: 224,
            channels: 3,
            patch: 16,
            dim: 384,
            heads: 6,
            stages: vec![2, 2, 4],
            mlp_ratio: 4,
            lambda: 0.5,
            modalities: vec![Modality::Rgb],
            cmtb: false,
        }
    }

    /// Two-branch (RGB + depth) variant of [`ModelConfig::vit_small`] with
    /// cross-modal blocks.
    pub fn fm_vit_small() -> Self {
        ModelConfig {
            modalities: vec![Modality::Rgb, Modality::Depth],
            cmtb: true,
            ..Self::vit_small()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.patch == 0 {
            return bad("image extents, channels and patch must be positive".into());
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!(
                "{}x{} image does not tile into {p}x{p} patches",
                self.height,
                self.width,
                p = self.patch
            ));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if self.modalities.is_empty() {
            return bad("at least one modality is required".into());
        }
        let mut seen = self.modalities.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.modalities.len() {
            return bad("duplicate modality".into());
        }
        Ok(())
    }

    pub fn branches(&self) -> usize {
        self.modalities.len()
    }

    pub fn n_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn has_joint_head(&self) -> bool {
        self.branches() >= 2
    }

    pub fn branch_index(&self, m: Modality) -> Option<usize> {
        self.modalities.iter().position(|&x| x == m)
    }

    /// Heads in output order: one per branch, then the joint head.
    pub fn heads_list(&self) -> Vec<Head> {
        let mut out: Vec<Head> = self.modalities.iter().map(|&m| Head::Branch(m)).collect();
        if self.has_joint_head() {
            out.push(Head::Joint);
        }
        out
    }

    /// Exact parameter tally from the configuration alone.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let n = self.n_tokens();
        let stb = 2 * LayerNormParams::param_count(d)
            + AttentionParams::param_count(d)
            + MlpParams::param_count(d, self.mlp_ratio * d);
        let blocks: usize = self.stages.iter().sum();
        let branch = LinearParams::param_count(self.patch_dim(), d)
            + d
            + n * d
            + blocks * stb
            + LayerNormParams::param_count(d)
            + LinearParams::param_count(d, 1);
        let cmtb = if self.cmtb {
            self.stages.len() * (2 * LayerNormParams::param_count(d) + 2 * AttentionParams::param_count(d))
        } else {
            0
        };
        let b = self.branches();
        let joint = if self.has_joint_head() {
            LayerNormParams::param_count(b * d) + LinearParams::param_count(b * d, 1)
        } else {
            0
        };
        b * branch + cmtb + joint
    }

    /// Multiply-accumulates of one forward pass over the linear maps and
    /// attention products (norms, softmax and activations excluded).
    pub fn mac_estimate(&self) -> f64 {
        let (d, np, n) = (self.dim as f64, self.n_patches() as f64, self.n_tokens() as f64);
        let hidden = (self.mlp_ratio * self.dim) as f64;
        let b = self.branches() as f64;
        let blocks: usize = self.stages.iter().sum();
        let stb = 4.0 * n * d * d + 2.0 * n * n * d + 2.0 * n * d * hidden;
        let embed = np * self.patch_dim() as f64 * d;
        let head = d;
        let per_branch = embed + blocks as f64 * stb + head;
        // relevance maps for every modality (q of CLS, k of patches, dot
        // products), then per branch: MMA q/k/v/o + products, MFA likewise.
        let masks = b * (d * d + np * d * d + np * d);
        let cls_attention = d * d + 2.0 * np * d * d + 2.0 * np * d + d * d;
        let cmtb = if self.cmtb {
            self.stages.len() as f64 * (masks + 2.0 * b * cls_attention)
        } else {
            0.0
        };
        let joint = if self.has_joint_head() { b * d } else { 0.0 };
        b * per_branch + cmtb + joint
    }

    /// `2 ×` [`ModelConfig::mac_estimate`].
    pub fn flop_estimate(&self) -> f64 {
        2.0 * self.mac_estimate()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "patch = {}", self.patch);
        let _ = writeln!(s, "dim = {}", self.dim);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "stages = {}", join_list(&self.stages));
        let _ = writeln!(s, "mlp_ratio = {}", self.mlp_ratio);
        let _ = writeln!(s, "lambda = {:?}", self.lambda);
        let _ = writeln!(s, "modalities = {}", Modality::list_string(&self.modalities));
        let _ = writeln!(s, "cmtb = {}", self.cmtb);
        s
    }

    /// Reads keys over the defaults; unknown keys are an error.
    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let mut c = ModelConfig::default();
        if let Some(size) = kv.take::<usize>("image_size")? {
            c.height = size;
            c.width = size;
        }
        kv.take_into("height", &mut c.height)?;
        kv.take_into("width", &mut c.width)?;
        kv.take_into("channels", &mut c.channels)?;
        kv.take_into("patch", &mut c.patch)?;
        kv.take_into("dim", &mut c.dim)?;
        kv.take_into("heads", &mut c.heads)?;
        if let Some(s) = kv.take_raw("stages") {
            c.stages = parse_list(&s)?;
        }
        kv.take_into("mlp_ratio", &mut c.mlp_ratio)?;
        kv.take_into("lambda", &mut c.lambda)?;
        if let Some(s) = kv.take_raw("modalities") {
            c.modalities = Modality::parse_list(&s)?;
        }
        kv.take_into("cmtb", &mut c.cmtb)?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn parse(source: &str, text: &str) -> Result<Self> {
        Self::from_kv(KeyValues::parse(source, text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(KeyValues::load(path)?)
    }
}

/// A classification head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    Branch(Modality),
    Joint,
}

impl std::fmt::Display for Head {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Head::Branch(m) => write!(f, "{m}"),
            Head::Joint => write!(f, "joint"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StbParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub ln: LayerNormParams,
    pub fc: LinearParams,
}

#[derive(Clone, Debug)]
pub struct BranchParams {
    pub modality: Modality,
    pub patch_proj: LinearParams,
    pub cls: ParamId,
    pub pos: ParamId,
    pub stages: Vec<Vec<StbParams>>,
    pub head: HeadParams,
}

/// One per stage, shared by every branch.
#[derive(Clone, Debug)]
pub struct CmtbParams {
    pub mma_ln: LayerNormParams,
    pub mma: AttentionParams,
    pub mfa_ln: LayerNormParams,
    pub mfa: AttentionParams,
}

/// Numeric record of one cross-modal block for one sample.
#[derive(Clone, Debug)]
pub struct StageTrace {
    pub stage: usize,
    pub masks: MutualMasks,
    /// Per branch, `h × n` post-selection MMA weights.
    pub mma_weights: Vec<Tensor>,
    /// Per branch, `h × n` MFA weights over the partner's patches.
    pub mfa_weights: Vec<Tensor>,
    pub partners: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `1 × 1` logit per branch, in configured order.
    pub branch_logits: Vec<Var>,
    pub joint_logit: Option<Var>,
    /// Final sequences per branch.
    pub sequences: Vec<Var>,
    pub trace: Vec<StageTrace>,
}

impl ForwardOutput {
    /// Logits in [`ModelConfig::heads_list`] order.
    pub fn logits(&self) -> Vec<Var> {
        let mut v = self.branch_logits.clone();
        v.extend(self.joint_logit);
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub reported: Head,
    pub score: f64,
    pub head_scores: Vec<(Head, f64)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub branches: Vec<BranchParams>,
    pub cmtb: Vec<CmtbParams>,
    pub joint: Option<HeadParams>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// MFA partner per branch. A lone branch partners itself, two branches
/// partner each other without touching `rng`; otherwise each branch draws
/// uniformly among the others, in branch order.
pub fn choose_partners(branches: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..branches)
        .map(|i| match branches {
            1 => i,
            2 => 1 - i,
            b => {
                let j = rng.random_range(0..b - 1);
                if j >= i {
                    j + 1
                } else {
                    j
                }
            }
        })
        .collect()
}

/// Splits an `H × W × C` image into row-major `P × P` patches, each
/// flattened in `(y, x, c)` order: an `n × P²C` matrix.
pub fn patchify(image: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let want = [cfg.height, cfg.width, cfg.channels];
    if image.shape() != want {
        return Err(Error::mismatch("tokenize", image.shape(), &want));
    }
    let (p, c, w) = (cfg.patch, cfg.channels, cfg.width);
    let data = image.data();
    let mut out = Vec::with_capacity(cfg.n_patches() * cfg.patch_dim());
    for py in 0..cfg.height / p {
        for px in 0..cfg.width / p {
            for y in py * p..(py + 1) * p {
                let start = (y * w + px * p) * c;
                out.extend_from_slice(&data[start..start + p * c]);
            }
        }
    }
    Tensor::new(vec![cfg.n_patches(), cfg.patch_dim()], out)
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, n) = (config.dim, config.n_tokens());
        let hidden = config.mlp_ratio * d;
        let mut branches = Vec::with_capacity(config.branches());
        for &m in &config.modalities {
            let pre = format!("branch.{m}");
            let patch_proj = LinearParams::init(&mut store, &format!("{pre}.patch_proj"), config.patch_dim(), d, &mut rng);
            let cls = store.add(format!("{pre}.cls"), Tensor::zeros(&[1, d]));
            let pos = store.add(format!("{pre}.pos"), Tensor::zeros(&[n, d]));
            let mut stages = Vec::with_capacity(config.stages.len());
            for (s, &blocks) in config.stages.iter().enumerate() {
                let mut v = Vec::with_capacity(blocks);
                for b in 0..blocks {
                    let bp = format!("{pre}.stage{s}.block{b}");
                    v.push(StbParams {
                        ln1: LayerNormParams::init(&mut store, &format!("{bp}.ln1"), d),
                        attn: AttentionParams::init(&mut store, &format!("{bp}.attn"), d, config.heads, &mut rng)?,
                        ln2: LayerNormParams::init(&mut store, &format!("{bp}.ln2"), d),
                        mlp: MlpParams::init(&mut store, &format!("{bp}.mlp"), d, hidden, &mut rng),
                    });
                }
                stages.push(v);
            }
            let head = HeadParams {
                ln: LayerNormParams::init(&mut store, &format!("{pre}.head.ln"), d),
                fc: LinearParams::init(&mut store, &format!("{pre}.head.fc"), d, 1, &mut rng),
            };
            branches.push(BranchParams {
                modality: m,
                patch_proj,
                cls,
                pos,
                stages,
                head,
            });
        }
        let mut cmtb = Vec::new();
        if config.cmtb {
            for s in 0..config.stages.len() {
                let pre = format!("cmtb.stage{s}");
                cmtb.push(CmtbParams {
                    mma_ln: LayerNormParams::init(&mut store, &format!("{pre}.mma_ln"), d),
                    mma: AttentionParams::init(&mut store, &format!("{pre}.mma"), d, config.heads, &mut rng)?,
                    mfa_ln: LayerNormParams::init(&mut store, &format!("{pre}.mfa_ln"), d),
                    mfa: AttentionParams::init(&mut store, &format!("{pre}.mfa"), d, config.heads, &mut rng)?,
                });
            }
        }
        let joint = config.has_joint_head().then(|| {
            let w = config.branches() * d;
            HeadParams {
                ln: LayerNormParams::init(&mut store, "joint.ln", w),
                fc: LinearParams::init(&mut store, "joint.fc", w, 1, &mut rng),
            }
        });
        Ok(Model {
            config,
            store,
            branches,
            cmtb,
            joint,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// `[x_cls ‖ x_pat W + b] + x_pos` for one branch.
    pub fn tokenize(&self, g: &mut Graph, image: &Tensor, branch: usize) -> Result<Var> {
        let bp = &self.branches[branch];
        let patches = g.tape.constant(patchify(image, &self.config)?);
        let x_pat = linear(g, patches, &bp.patch_proj)?;
        let cls = g.param(bp.cls);
        let z = g.tape.concat_rows(&[cls, x_pat])?;
        let pos = g.param(bp.pos);
        g.tape.add(z, pos)
    }

    /// Pre-norm MSA and MLP, each with a residual.
    pub fn stb_forward(g: &mut Graph, z: Var, p: &StbParams) -> Result<Var> {
        let h = layer_norm(g, z, &p.ln1)?;
        let a = msa(g, h, &p.attn)?;
        let z = g.tape.add(z, a)?;
        let h = layer_norm(g, z, &p.ln2)?;
        let m = gelu_mlp(g, h, &p.mlp)?;
        g.tape.add(z, m)
    }

    /// One shared cross-modal block over all branches. Parameter uses for
    /// branch `i` run under graph scope `i`.
    pub fn cmtb_forward(
        g: &mut Graph,
        zs: &[Var],
        p: &CmtbParams,
        lambda: f64,
        stage: usize,
        rng: &mut impl Rng,
    ) -> Result<(Vec<Var>, StageTrace)> {
        if zs.is_empty() {
            return Err(Error::shape("cmtb", "no modality sequences"));
        }
        let mut normed = Vec::with_capacity(zs.len());
        for (i, &z) in zs.iter().enumerate() {
            g.set_scope(Some(i));
            normed.push(layer_norm(g, z, &p.mma_ln)?);
        }
        g.set_scope(None);
        let masks = mutual_masks(g, &normed, &p.mma, lambda)?;
        let mut mid = Vec::with_capacity(zs.len());
        let mut mma_weights = Vec::with_capacity(zs.len());
        for (i, &z) in zs.iter().enumerate() {
            g.set_scope(Some(i));
            let att = mma_with_mask(g, normed[i], &masks.accumulated, &p.mma)?;
            mma_weights.push(att.weight_matrix(g));
            mid.push(with_cls_residual(g, z, att.update)?);
        }
        let partners = choose_partners(zs.len(), rng);
        let mut out = Vec::with_capacity(zs.len());
        let mut mfa_weights = Vec::with_capacity(zs.len());
        for (i, &z) in mid.iter().enumerate() {
            g.set_scope(Some(i));
            let own = layer_norm(g, z, &p.mfa_ln)?;
            let partner = if partners[i] == i {
                own
            } else {
                layer_norm(g, mid[partners[i]], &p.mfa_ln)?
            };
            let att = mfa(g, own, partner, &p.mfa)?;
            mfa_weights.push(att.weight_matrix(g));
            out.push(with_cls_residual(g, z, att.update)?);
        }
        g.set_scope(None);
        Ok((
            out,
            StageTrace {
                stage,
                masks,
                mma_weights,
                mfa_weights,
                partners,
            },
        ))
    }

    fn head_logit(g: &mut Graph, cls: Var, p: &HeadParams) -> Result<Var> {
        let h = layer_norm(g, cls, &p.ln)?;
        linear(g, h, &p.fc)
    }

    /// Full forward pass for one sample; `images` holds one `H × W × C`
    /// image per branch, in configured order.
    pub fn forward(&self, g: &mut Graph, images: &[&Tensor], rng: &mut impl Rng) -> Result<ForwardOutput> {
        let b = self.config.branches();
        if images.len() != b {
            return Err(Error::shape(
                "forward",
                format!("expected {b} images (one per branch), got {}", images.len()),
            ));
        }
        let mut zs = Vec::with_capacity(b);
        for (i, img) in images.iter().enumerate() {
            zs.push(self.tokenize(g, img, i)?);
        }
        let mut trace = Vec::new();
        for stage in 0..self.config.stages.len() {
            for (i, z) in zs.iter_mut().enumerate() {
                for blk in &self.branches[i].stages[stage] {
                    *z = Self::stb_forward(g, *z, blk)?;
                }
            }
            if let Some(p) = self.cmtb.get(stage) {
                let (next, t) = Self::cmtb_forward(g, &zs, p, self.config.lambda, stage, rng)?;
                zs = next;
                trace.push(t);
            }
        }
        let mut cls = Vec::with_capacity(b);
        let mut branch_logits = Vec::with_capacity(b);
        for (i, &z) in zs.iter().enumerate() {
            let c = g.tape.slice_rows(z, 0, 1)?;
            branch_logits.push(Self::head_logit(g, c, &self.branches[i].head)?);
            cls.push(c);
        }
        let joint_logit = match &self.joint {
            Some(p) => {
                let cat = g.tape.concat_cols(&cls)?;
                Some(Self::head_logit(g, cat, p)?)
            }
            None => None,
        };
        Ok(ForwardOutput {
            branch_logits,
            joint_logit,
            sequences: zs,
            trace,
        })
    }

    /// Forward over a batch. Returns one `batch × 1` logit column per head,
    /// in [`ModelConfig::heads_list`] order.
    pub fn forward_batch<R: Rng>(&self, g: &mut Graph, samples: &[Vec<&Tensor>], rngs: &mut [R]) -> Result<Vec<Var>> {
        if samples.is_empty() || samples.len() != rngs.len() {
            return Err(Error::shape("forward_batch", "need one rng per sample and a nonempty batch"));
        }
        let mut per_head: Vec<Vec<Var>> = vec![Vec::with_capacity(samples.len()); self.config.heads_list().len()];
        for (images, rng) in samples.iter().zip(rngs.iter_mut()) {
            let out = self.forward(g, images, rng)?;
            for (slot, l) in per_head.iter_mut().zip(out.logits()) {
                slot.push(l);
            }
        }
        per_head.iter().map(|ls| g.tape.concat_rows(ls)).collect()
    }

    /// Sigmoid scores of every head for a subset of modalities.
    ///
    /// One supplied modality is copied into every branch and reported by its
    /// own head. Several are routed to their branches and reported by the
    /// joint head; branches left without an image take the supplied images
    /// in turn.
    pub fn predict_flexible(&self, supplied: &[(Modality, &Tensor)], rng: &mut impl Rng) -> Result<Prediction> {
        if supplied.is_empty() {
            return Err(Error::Config("no modalities supplied".into()));
        }
        for (k, (m, _)) in supplied.iter().enumerate() {
            if self.config.branch_index(*m).is_none() {
                return Err(Error::Config(format!(
                    "modality {m} not in trained set {}",
                    Modality::list_string(&self.config.modalities)
                )));
            }
            if supplied[..k].iter().any(|(o, _)| o == m) {
                return Err(Error::Config(format!("modality {m} supplied twice")));
            }
        }
        let mut spare = 0;
        let images: Vec<&Tensor> = self
            .config
            .modalities
            .iter()
            .map(|m| match supplied.iter().find(|(s, _)| s == m) {
                Some((_, img)) => *img,
                None => {
                    let img = supplied[spare % supplied.len()].1;
                    spare += 1;
                    img
                }
            })
            .collect();
        let reported = if supplied.len() == 1 {
            Head::Branch(supplied[0].0)
        } else {
            Head::Joint
        };
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, &images, rng)?;
        let head_scores: Vec<(Head, f64)> = self
            .config
            .heads_list()
            .into_iter()
            .zip(out.logits())
            .map(|(h, l)| (h, sigmoid(g.tape.value(l).item())))
            .collect();
        let score = head_scores
            .iter()
            .find(|(h, _)| *h == reported)
            .map(|&(_, s)| s)
            .ok_or_else(|| Error::Config(format!("model has no {reported} head")))?;
        Ok(Prediction {
            reported,
            score,
            head_scores,
        })
    }

    /// Serialises all parameters as an `FMVT1` checkpoint.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = format!("FMVT1 {}\n", self.param_count()).into_bytes();
        for (_, name, t) in self.store.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Rebuilds a model from its configuration and checkpoint bytes. Every
    /// parameter must be present, in order, with the expected shape.
    pub fn from_checkpoint_bytes(config: ModelConfig, bytes: &[u8]) -> Result<Self> {
        let mut model = Model::init(config, 0)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint header missing".into()))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format("checkpoint header not text".into()))?;
        let count: usize = header
            .strip_prefix("FMVT1 ")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad checkpoint header {header:?}")))?;
        if count != model.param_count() {
            return Err(Error::Format(format!(
                "checkpoint holds {count} parameters, config expects {}",
                model.param_count()
            )));
        }
        let mut r = &bytes[nl + 1..];
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let len = u16::from_le_bytes(take::<2>(&mut r)?) as usize;
            let got = take_slice(&mut r, len)?;
            if got != name.as_bytes() {
                return Err(Error::Format(format!(
                    "expected parameter {name}, found {:?}",
                    String::from_utf8_lossy(got)
                )));
            }
            let rank = take::<1>(&mut r)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take::<4>(&mut r)?) as usize);
            }
            let expected = model.store.get(id).shape().to_vec();
            if shape != expected {
                return Err(Error::Format(format!("{name}: shape {shape:?}, expected {expected:?}")));
            }
            let numel: usize = shape.iter().product();
            let raw = take_slice(&mut r, numel * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            *model.store.get_mut(id) = Tensor::new(shape, data)?;
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", r.len())));
        }
        Ok(model)
    }

    /// Writes the checkpoint and its configuration sidecar
    /// ([`config_path`]).
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.checkpoint_bytes())?;
        std::fs::write(config_path(path), self.config.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config = ModelConfig::load(&config_path(path))?;
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_checkpoint_bytes(config, &bytes)
    }
}

/// Configuration sidecar of a checkpoint: same path, `.cfg` extension.
pub fn config_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("cfg")
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    Ok(take_slice(r, N)?.try_into().expect("length checked"))
}

fn take_slice<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

/// Sum of per-head mean BCE losses, plus the individual terms.
pub fn total_loss(g: &mut Graph, head_logits: &[Var], labels: &[f64]) -> Result<(Var, Vec<Var>)> {
    let mut parts = Vec::with_capacity(head_logits.len());
    for &l in head_logits {
        parts.push(bce_with_logit(g, l, labels)?);
    }
    let mut total = *parts
        .first()
        .ok_or_else(|| Error::shape("total_loss", "no heads"))?;
    for &p in &parts[1..] {
        total = g.tape.add(total, p)?;
    }
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn tiny(b: usize) -> ModelConfig {
        ModelConfig {
            dim: 8,
            heads: 2,
            stages: vec![1, 1],
            modalities: Modality::ALL[..b].to_vec(),
            ..ModelConfig::default()
        }
    }

    fn image(cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = stream(seed, &[]);
        let n = cfg.height * cfg.width * cfg.channels;
        Tensor::new(
            vec![cfg.height, cfg.width, cfg.channels],
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn token_counts() {
        let c = ModelConfig::vit_small();
        assert_eq!((c.n_patches(), c.n_tokens()), (196, 197));
        let c = ModelConfig::default();
        assert_eq!((c.n_patches(), c.n_tokens()), (4, 5));
    }

    #[test]
    fn patchify_layout() {
        let cfg = ModelConfig {
            height: 4,
            width: 4,
            channels: 2,
            patch: 2,
            ..ModelConfig::default()
        };
        let img = Tensor::new(vec![4, 4, 2], (0..32).map(f64::from).collect()).unwrap();
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[4, 8]);
        // patch 1 = rows 0..2, cols 2..4
        assert_eq!(p.row(1), &[4.0, 5.0, 6.0, 7.0, 12.0, 13.0, 14.0, 15.0]);
        assert!(patchify(&Tensor::zeros(&[4, 4, 1]), &cfg).is_err());
    }

    #[test]
    fn zero_image_tokenizes_to_cls_and_zeros() {
        let cfg = tiny(1);
        let mut m = Model::init(cfg.clone(), 3).unwrap();
        let cls = m.branches[0].cls;
        *m.store.get_mut(cls) = Tensor::full(&[1, 8], 0.7);
        let mut g = Graph::new(&m.store);
        let z = m.tokenize(&mut g, &Tensor::zeros(&[32, 32, 1]), 0).unwrap();
        let v = g.tape.value(z);
        assert_eq!(v.shape(), &[5, 8]);
        assert!(v.row(0).iter().all(|&x| x == 0.7));
        assert!(v.data()[8..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn analytic_count_matches_enumeration() {
        for cfg in [
            tiny(1),
            tiny(2),
            tiny(3),
            ModelConfig {
                stages: vec![0],
                ..tiny(2)
            },
            ModelConfig {
                cmtb: false,
                ..tiny(2)
            },
        ] {
            let m = Model::init(cfg.clone(), 0).unwrap();
            assert_eq!(m.param_count(), cfg.param_count(), "{cfg:?}");
        }
    }

    #[test]
    fn zero_layer_count_is_tokenizer_plus_heads() {
        let cfg = ModelConfig {
            stages: vec![0],
            cmtb: false,
            ..tiny(1)
        };
        // patch proj 256·8+8, cls 8, pos 5·8, head LN 16, head fc 9
        assert_eq!(cfg.param_count(), 2056 + 8 + 40 + 16 + 9);
    }

    #[test]
    fn output_has_b_plus_one_logits() {
        for b in 1..=3 {
            let cfg = tiny(b);
            let m = Model::init(cfg.clone(), 1).unwrap();
            let imgs: Vec<Tensor> = (0..b).map(|i| image(&cfg, i as u64)).collect();
            let refs: Vec<&Tensor> = imgs.iter().collect();
            let mut g = Graph::new(&m.store);
            let out = m.forward(&mut g, &refs, &mut stream(0, &[])).unwrap();
            let expected = if b >= 2 { b + 1 } else { 1 };
            assert_eq!(out.logits().len(), expected);
            assert_eq!(out.trace.len(), 2);
            for z in out.sequences {
                assert_eq!(g.tape.shape(z), &[5, 8]);
            }
        }
    }

    #[test]
    fn degenerate_single_stage_without_blocks() {
        let cfg = ModelConfig {
            stages: vec![0],
            ..tiny(2)
        };
        let m = Model::init(cfg.clone(), 1).unwrap();
        let imgs = [image(&cfg, 1), image(&cfg, 2)];
        let mut g = Graph::new(&m.store);
        let out = m.forward(&mut g, &[&imgs[0], &imgs[1]], &mut stream(0, &[])).unwrap();
        assert_eq!(out.logits().len(), 3);
    }

    #[test]
    fn partners() {
        let mut rng = stream(5, &[]);
        assert_eq!(choose_partners(1, &mut rng), vec![0]);
        let before = rng.clone();
        assert_eq!(choose_partners(2, &mut rng), vec![1, 0]);
        assert_eq!(rng.random::<u64>(), before.clone().random::<u64>());
        for _ in 0..50 {
            let p = choose_partners(4, &mut rng);
            assert!(p.iter().enumerate().all(|(i, &j)| i != j && j < 4));
        }
        let a = choose_partners(3, &mut stream(9, &[1]));
        let b = choose_partners(3, &mut stream(9, &[1]));
        assert_eq!(a, b);
    }

    #[test]
    fn total_loss_values() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let zeros: Vec<Var> = (0..3).map(|_| g.tape.constant(Tensor::zeros(&[1, 1]))).collect();
        let (t, parts) = total_loss(&mut g, &zeros, &[1.0]).unwrap();
        assert!((g.tape.value(t).item() - 3.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(parts.len(), 3);
        let sat: Vec<Var> = [20.0, 20.0, 20.0]
            .iter()
            .map(|&v| g.tape.constant(Tensor::full(&[1, 1], v)))
            .collect();
        let (t, _) = total_loss(&mut g, &sat, &[1.0]).unwrap();
        assert!(g.tape.value(t).item() <= 1e-7);
        assert!(total_loss(&mut g, &sat, &[0.5]).is_err());
    }

    #[test]
    fn flexible_routing() {
        let cfg = tiny(2);
        let m = Model::init(cfg.clone(), 2).unwrap();
        let (r, d) = (image(&cfg, 10), image(&cfg, 11));
        let p = m.predict_flexible(&[(Modality::Rgb, &r)], &mut stream(0, &[])).unwrap();
        assert_eq!(p.reported, Head::Branch(Modality::Rgb));
        // replicated r image in both branches
        let mut g = Graph::new(&m.store);
        let out = m.forward(&mut g, &[&r, &r], &mut stream(0, &[])).unwrap();
        assert_eq!(p.score, sigmoid(g.tape.value(out.branch_logits[0]).item()));
        let again = m.predict_flexible(&[(Modality::Rgb, &r)], &mut stream(0, &[])).unwrap();
        assert_eq!(again, p);
        let p = m
            .predict_flexible(&[(Modality::Depth, &d), (Modality::Rgb, &r)], &mut stream(0, &[]))
            .unwrap();
        assert_eq!(p.reported, Head::Joint);
        assert_eq!(p.head_scores.len(), 3);
        assert!(m.predict_flexible(&[(Modality::Nir, &r)], &mut stream(0, &[])).is_err());
        assert!(m.predict_flexible(&[], &mut stream(0, &[])).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let cfg = tiny(2);
        let m = Model::init(cfg.clone(), 4).unwrap();
        let bytes = m.checkpoint_bytes();
        let back = Model::from_checkpoint_bytes(cfg.clone(), &bytes).unwrap();
        assert_eq!(back.store, m.store);
        assert_eq!(back.checkpoint_bytes(), bytes);
        assert!(Model::from_checkpoint_bytes(cfg.clone(), &bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Model::from_checkpoint_bytes(cfg.clone(), &bad).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Model::from_checkpoint_bytes(cfg, &long).is_err());
    }

    #[test]
    fn config_text_round_trip() {
        let c = ModelConfig {
            lambda: 0.3,
            stages: vec![2, 0, 1],
            ..ModelConfig::fm_vit_small()
        };
        assert_eq!(ModelConfig::parse("t", &c.to_text()).unwrap(), c);
        assert!(ModelConfig::parse("t", "dim = 10\nheads = 3\n").is_err());
        assert!(ModelConfig::parse("t", "depth = 3\n").is_err());
        assert!(ModelConfig::parse("t", "lambda = 1.5\n").is_err());
        let c = ModelConfig::parse("t", "image_size = 64\n").unwrap();
        assert_eq!((c.height, c.width), (64, 64));
    }
}
