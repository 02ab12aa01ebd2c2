//! Adam, the training loop, evaluation over modality subsets, and
//! cross-modal block inspection.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::attention::RelevanceMap;
use crate::config::KeyValues;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{apcer_bpcer_acer, bpcer_threshold, eer_threshold, tpr_at_fpr, ScoreSet};
use crate::modality::Modality;
use crate::model::{total_loss, Head, Model, ModelConfig, StageTrace};
use crate::params::{Graph, ParamStore};
use crate::rng::stream;
use crate::tensor::{softmax_slice, Tensor};

// stream tags for derived random streams
const SHUFFLE: u64 = 1;
const PARTNER: u64 = 2;
const EVAL: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    /// Evaluate on dev every this many epochs (the last epoch always is).
    pub eval_every: usize,
    pub threshold: ThresholdRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 8,
            epochs: 20,
            seed: 0,
            clip: 1.0,
            eval_every: 1,
            threshold: ThresholdRule::Eer,
        }
    }
}

/// How the operating threshold is fixed on dev scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdRule {
    Eer,
    /// Highest threshold keeping BPCER at or below the given rate.
    Bpcer(f64),
}

impl ThresholdRule {
    pub fn select(self, dev: &ScoreSet) -> Result<f64> {
        match self {
            ThresholdRule::Eer => eer_threshold(dev),
            ThresholdRule::Bpcer(target) => bpcer_threshold(dev, target),
        }
    }
}

impl std::str::FromStr for ThresholdRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "eer" {
            return Ok(ThresholdRule::Eer);
        }
        s.strip_prefix("bpcer:")
            .and_then(|r| r.parse::<f64>().ok())
            .filter(|r| (0.0..=1.0).contains(r))
            .map(ThresholdRule::Bpcer)
            .ok_or_else(|| "expected eer or bpcer:<rate>".to_string())
    }
}

impl std::fmt::Display for ThresholdRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ThresholdRule::Eer => write!(f, "eer"),
            ThresholdRule::Bpcer(r) => write!(f, "bpcer:{r}"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be finite and non-negative", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if self.eps <= 0.0 {
            return bad("eps must be positive".into());
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.clip < 0.0 {
            return bad("clip must be non-negative".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lr = {:?}", self.lr);
        let _ = writeln!(s, "beta1 = {:?}", self.beta1);
        let _ = writeln!(s, "beta2 = {:?}", self.beta2);
        let _ = writeln!(s, "eps = {:?}", self.eps);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "clip = {:?}", self.clip);
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        let _ = writeln!(s, "threshold = {}", self.threshold);
        s
    }

    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let mut c = TrainConfig::default();
        kv.take_into("lr", &mut c.lr)?;
        kv.take_into("beta1", &mut c.beta1)?;
        kv.take_into("beta2", &mut c.beta2)?;
        kv.take_into("eps", &mut c.eps)?;
        kv.take_into("batch", &mut c.batch)?;
        kv.take_into("epochs", &mut c.epochs)?;
        kv.take_into("seed", &mut c.seed)?;
        kv.take_into("clip", &mut c.clip)?;
        kv.take_into("eval_every", &mut c.eval_every)?;
        kv.take_into("threshold", &mut c.threshold)?;
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

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::mismatch("adam", &[grads.len()], &[self.m.len()]));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powf(self.t as f64);
        let bc2 = 1.0 - self.beta2.powf(self.t as f64);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = &grads[k];
            let p = store.get_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::mismatch("adam", g.shape(), p.shape()));
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Scales `grads` down to global norm `max` if larger. Returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max: f64) -> f64 {
    let norm = global_norm(grads);
    if max > 0.0 && norm > max {
        let s = max / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Checks that `ds` carries every model modality at the model's geometry.
pub fn check_compatible(cfg: &ModelConfig, ds: &Dataset) -> Result<()> {
    for m in &cfg.modalities {
        if ds.modality_index(*m).is_none() {
            return Err(Error::Config(format!(
                "model modality {m} missing from data (has {})",
                Modality::list_string(&ds.modalities)
            )));
        }
    }
    if (ds.height, ds.width, ds.channels) != (cfg.height, cfg.width, cfg.channels) {
        return Err(Error::Config(format!(
            "data images are {}x{}x{}, model expects {}x{}x{}",
            ds.height, ds.width, ds.channels, cfg.height, cfg.width, cfg.channels
        )));
    }
    Ok(())
}

/// Images of one sample in model branch order.
fn branch_images<'a>(cfg: &ModelConfig, ds: &'a Dataset, idx: usize) -> Vec<&'a Tensor> {
    cfg.modalities
        .iter()
        .map(|m| &ds.samples[idx].images[ds.modality_index(*m).expect("checked")])
        .collect()
}

/// One optimisation step on the samples `batch` (dataset indices).
/// Returns the mean-over-batch total loss.
pub fn train_step(model: &mut Model, adam: &mut Adam, ds: &Dataset, batch: &[usize], cfg: &TrainConfig, step: u64) -> Result<f64> {
    let labels: Vec<f64> = batch.iter().map(|&i| f64::from(ds.samples[i].label)).collect();
    let samples: Vec<Vec<&Tensor>> = batch.iter().map(|&i| branch_images(&model.config, ds, i)).collect();
    let mut rngs: Vec<_> = batch.iter().map(|&i| stream(cfg.seed, &[PARTNER, step, i as u64])).collect();
    let (loss, mut grads) = {
        let mut g = Graph::new(&model.store);
        let logits = model.forward_batch(&mut g, &samples, &mut rngs)?;
        let (total, _) = total_loss(&mut g, &logits, &labels)?;
        let grads = g.tape.backward(total)?;
        (g.tape.value(total).item(), g.param_grads(&grads))
    };
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss {loss} at step {step}")));
    }
    clip_global_norm(&mut grads, cfg.clip);
    adam.step(&mut model.store, &grads)?;
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_acer: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub subset: Vec<Modality>,
    pub head: Head,
    pub threshold: f64,
    pub dev_acer: f64,
    pub test_apcer: f64,
    pub test_bpcer: f64,
    pub test_acer: f64,
    pub test_hter: f64,
    pub tpr_at_1e2: f64,
    pub tpr_at_1e4: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub rows: Vec<EvalRow>,
    pub config_hash: String,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest dev ACER.
    pub model: Model,
    pub report: RunReport,
}

pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let mut h = Sha256::new();
    h.update(model.to_text());
    h.update(b"--\n");
    h.update(train.to_text());
    hex::encode(&h.finalize()[..8])
}

/// Scores of `ds` under the modality subset, as reported by
/// [`Model::predict_flexible`].
pub fn score_split(model: &Model, ds: &Dataset, subset: &[Modality], seed: u64) -> Result<ScoreSet> {
    let idx: Vec<usize> = subset
        .iter()
        .map(|m| {
            ds.modality_index(*m)
                .ok_or_else(|| Error::Config(format!("modality {m} missing from data")))
        })
        .collect::<Result<_>>()?;
    let mut scores = Vec::with_capacity(ds.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let supplied: Vec<(Modality, &Tensor)> = subset.iter().zip(&idx).map(|(&m, &k)| (m, &s.images[k])).collect();
        let p = model.predict_flexible(&supplied, &mut stream(seed, &[EVAL, i as u64]))?;
        scores.push(p.score);
    }
    ScoreSet::new(scores, ds.labels())
}

/// Subsets evaluated by default: each single modality, then all together
/// when there are several.
pub fn default_subsets(cfg: &ModelConfig) -> Vec<Vec<Modality>> {
    let mut out: Vec<Vec<Modality>> = cfg.modalities.iter().map(|&m| vec![m]).collect();
    if cfg.modalities.len() > 1 {
        out.push(cfg.modalities.clone());
    }
    out
}

pub fn reported_head(subset: &[Modality]) -> Head {
    if subset.len() == 1 {
        Head::Branch(subset[0])
    } else {
        Head::Joint
    }
}

/// Metrics of one subset at a given threshold.
pub fn eval_row(subset: &[Modality], threshold: f64, dev: &ScoreSet, test: &ScoreSet) -> Result<EvalRow> {
    let d = apcer_bpcer_acer(dev, threshold)?;
    let t = apcer_bpcer_acer(test, threshold)?;
    Ok(EvalRow {
        subset: subset.to_vec(),
        head: reported_head(subset),
        threshold,
        dev_acer: d.acer,
        test_apcer: t.apcer,
        test_bpcer: t.bpcer,
        test_acer: t.acer,
        test_hter: (t.apcer + t.bpcer) / 2.0,
        tpr_at_1e2: tpr_at_fpr(test, 1e-2)?,
        tpr_at_1e4: tpr_at_fpr(test, 1e-4)?,
    })
}

/// Scores dev and test for each subset and fixes the threshold on dev.
pub fn evaluate(
    model: &Model,
    dev: &Dataset,
    test: &Dataset,
    subsets: &[Vec<Modality>],
    rule: ThresholdRule,
    seed: u64,
) -> Result<Vec<(EvalRow, ScoreSet, ScoreSet)>> {
    subsets
        .iter()
        .map(|subset| {
            let dev_scores = score_split(model, dev, subset, seed)?;
            let test_scores = score_split(model, test, subset, seed)?;
            let t = rule.select(&dev_scores)?;
            Ok((eval_row(subset, t, &dev_scores, &test_scores)?, dev_scores, test_scores))
        })
        .collect()
}

/// Dev ACER of the model's full-input head at its own dev threshold.
fn dev_acer(model: &Model, dev: &Dataset, rule: ThresholdRule, seed: u64) -> Result<f64> {
    let scores = score_split(model, dev, &model.config.modalities, seed)?;
    let t = rule.select(&scores)?;
    Ok(apcer_bpcer_acer(&scores, t)?.acer)
}

/// Seeded, shuffled mini-batch training; keeps the best-dev parameters and
/// evaluates them on test.
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig, train_ds: &Dataset, dev: &Dataset, test: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    for ds in [train_ds, dev, test] {
        check_compatible(model_cfg, ds)?;
    }
    if train_ds.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let mut model = Model::init(model_cfg.clone(), cfg.seed)?;
    let mut adam = Adam::new(&model.store, cfg);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(cfg.seed, &[SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch) {
            let loss = train_step(&mut model, &mut adam, train_ds, batch, cfg, step)?;
            loss_sum += loss * batch.len() as f64;
            step += 1;
        }
        let evaluate_now = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
        let dev_acer = if evaluate_now {
            Some(dev_acer(&model, dev, cfg.threshold, cfg.seed)?)
        } else {
            None
        };
        if let Some(a) = dev_acer {
            if best.as_ref().is_none_or(|(b, _, _)| a < *b) {
                best = Some((a, epoch, model.store.clone()));
            }
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_ds.len() as f64,
            dev_acer,
        });
    }
    let best_epoch = match best {
        Some((_, e, store)) => {
            model.store = store;
            e
        }
        None => 0,
    };
    let rows = evaluate(&model, dev, test, &default_subsets(model_cfg), cfg.threshold, cfg.seed)?
        .into_iter()
        .map(|(r, _, _)| r)
        .collect();
    Ok(TrainOutcome {
        model,
        report: RunReport {
            epochs,
            best_epoch,
            rows,
            config_hash: config_hash(model_cfg, cfg),
        },
    })
}

pub fn subset_name(subset: &[Modality]) -> String {
    subset.iter().map(|m| m.tag()).collect()
}

/// Text table of evaluation rows.
pub fn rows_table(rows: &[EvalRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:<6} {:>10} {:>9} {:>11} {:>11} {:>10} {:>10} {:>12} {:>12}",
        "subset", "head", "threshold", "dev_acer", "test_apcer", "test_bpcer", "test_acer", "test_hter", "tpr@fpr=1e-2", "tpr@fpr=1e-4"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<8} {:<6} {:>10.6} {:>9.4} {:>11.4} {:>11.4} {:>10.4} {:>10.4} {:>12.4} {:>12.4}",
            subset_name(&r.subset),
            r.head.to_string(),
            r.threshold,
            r.dev_acer,
            r.test_apcer,
            r.test_bpcer,
            r.test_acer,
            r.test_hter,
            r.tpr_at_1e2,
            r.tpr_at_1e4
        );
    }
    s
}

/// `key=value` lines for evaluation rows, values at full precision.
pub fn rows_kv(rows: &[EvalRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let k = subset_name(&r.subset);
        let _ = writeln!(s, "threshold.{k}={:?}", r.threshold);
        let _ = writeln!(s, "dev_acer.{k}={:?}", r.dev_acer);
        let _ = writeln!(s, "test_apcer.{k}={:?}", r.test_apcer);
        let _ = writeln!(s, "test_bpcer.{k}={:?}", r.test_bpcer);
        let _ = writeln!(s, "test_acer.{k}={:?}", r.test_acer);
        let _ = writeln!(s, "test_hter.{k}={:?}", r.test_hter);
        let _ = writeln!(s, "tpr_at_fpr_1e-2.{k}={:?}", r.tpr_at_1e2);
        let _ = writeln!(s, "tpr_at_fpr_1e-4.{k}={:?}", r.tpr_at_1e4);
    }
    s
}

impl RunReport {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# training\n");
        let _ = writeln!(s, "{:>5} {:>12} {:>9}", "epoch", "train_loss", "dev_acer");
        for e in &self.epochs {
            let dev = e.dev_acer.map_or("-".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(s, "{:>5} {:>12.6} {:>9}", e.epoch, e.train_loss, dev);
        }
        s.push_str("\n# evaluation (best dev checkpoint)\n");
        s.push_str(&rows_table(&self.rows));
        s.push_str("\n# values\n");
        let _ = writeln!(s, "config_hash={}", self.config_hash);
        let _ = writeln!(s, "best_epoch={}", self.best_epoch);
        for e in &self.epochs {
            let _ = writeln!(s, "train_loss.{}={:?}", e.epoch, e.train_loss);
        }
        s.push_str(&rows_kv(&self.rows));
        s
    }

    pub fn row(&self, subset: &[Modality]) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.subset == subset)
    }
}

/// Numeric dump of one cross-modal block for one sample.
#[derive(Clone, Debug)]
pub struct Inspection {
    pub sample: usize,
    pub label: u8,
    pub modalities: Vec<Modality>,
    pub lambda: f64,
    pub trace: StageTrace,
}

pub fn inspect(model: &Model, ds: &Dataset, sample: usize, stage: usize, seed: u64) -> Result<Inspection> {
    check_compatible(&model.config, ds)?;
    if sample >= ds.len() {
        return Err(Error::OutOfBounds {
            op: "inspect",
            msg: format!("sample {sample} of {}", ds.len()),
        });
    }
    if !model.config.cmtb || stage >= model.config.stages.len() {
        return Err(Error::OutOfBounds {
            op: "inspect",
            msg: format!(
                "stage {stage}: model has {} cross-modal stages",
                if model.config.cmtb { model.config.stages.len() } else { 0 }
            ),
        });
    }
    let images = branch_images(&model.config, ds, sample);
    let mut g = Graph::new(&model.store);
    let out = model.forward(&mut g, &images, &mut stream(seed, &[EVAL, sample as u64]))?;
    let trace = out.trace.into_iter().nth(stage).expect("one trace per stage");
    Ok(Inspection {
        sample,
        label: ds.samples[sample].label,
        modalities: model.config.modalities.clone(),
        lambda: model.config.lambda,
        trace,
    })
}

/// Softmax mass of the selected positions, per head.
pub fn selected_mass(map: &RelevanceMap, keep: &[u32]) -> Vec<f64> {
    (0..map.heads)
        .map(|h| {
            let p = softmax_slice(map.row(h));
            p.iter().zip(&keep[h * map.n..(h + 1) * map.n]).filter(|(_, &c)| c > 0).map(|(p, _)| p).sum()
        })
        .collect()
}

fn fmt_row(vals: impl IntoIterator<Item = String>) -> String {
    vals.into_iter().collect::<Vec<_>>().join(" ")
}

impl Inspection {
    pub fn to_text(&self) -> String {
        let t = &self.trace;
        let mut s = String::new();
        let _ = writeln!(s, "sample={} label={} stage={} lambda={}", self.sample, self.label, t.stage, self.lambda);
        for (i, m) in self.modalities.iter().enumerate() {
            let map = &t.masks.maps[i];
            let mask = &t.masks.masks[i];
            let mass = selected_mass(map, &mask.counts);
            let _ = writeln!(s, "\n[modality {m}] partner={}", self.modalities[t.partners[i]]);
            for h in 0..map.heads {
                let _ = writeln!(s, "head {h}");
                let _ = writeln!(s, "  relevance    {}", fmt_row(map.row(h).iter().map(|v| format!("{v:>9.5}"))));
                let _ = writeln!(
                    s,
                    "  softmax      {}",
                    fmt_row(softmax_slice(map.row(h)).iter().map(|v| format!("{v:>9.5}")))
                );
                let _ = writeln!(s, "  mask         {}", fmt_row(mask.row(h).iter().map(|v| format!("{v:>9}"))));
                let _ = writeln!(s, "  mask_mass    {:.6}", mass[h]);
                let _ = writeln!(
                    s,
                    "  mma_weights  {}",
                    fmt_row(t.mma_weights[i].row(h).iter().map(|v| format!("{v:>9.5}")))
                );
                let _ = writeln!(
                    s,
                    "  mfa_weights  {}",
                    fmt_row(t.mfa_weights[i].row(h).iter().map(|v| format!("{v:>9.5}")))
                );
            }
        }
        let acc = &t.masks.accumulated;
        let _ = writeln!(s, "\n[accumulated mask]");
        for h in 0..acc.heads {
            let _ = writeln!(s, "head {h}       {}", fmt_row(acc.row(h).iter().map(|v| format!("{v:>9}"))));
        }
        s
    }
}
