//! Two-stage training orchestration. Stage 1 fits SADXNet on individual
//! (zero-filled, truth) frames; stage 2 fits RST on whole sequences,
//! consuming either SADXNet-restored input (the full pipeline) or the
//! zero-filled sequences directly. Both stages minimize the composite
//! PSNR / MS-SSIM / L1 objective with Adam and record a loss curve.
//!
//! Training is single-threaded throughout, so a fixed seed makes every
//! run bit-reproducible.

pub mod augment;

use crate::diffcore::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::kspace::{dft2_frames, make_vista_mask, undersample, zero_filled_recon};
use crate::loss::composite_loss_node;
use crate::metrics::{evaluate, LossWeights, MetricsReport, SsimParams};
use crate::phantom::DynamicImage;
use crate::rst::RstNet;
use crate::sadxnet::SadxNet;
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Which network a training run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sadxnet,
    Rst,
}

impl Stage {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sadxnet" => Ok(Stage::Sadxnet),
            "rst" => Ok(Stage::Rst),
            other => Err(Error::Config(format!(
                "unknown stage {:?}, expected \"sadxnet\" or \"rst\"",
                other
            ))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Sadxnet => "sadxnet",
            Stage::Rst => "rst",
        })
    }
}

/// Training hyperparameters. `steps` counts optimizer updates; full-scale
/// runs are on the order of 1000 (stage 1) and 2000 to 8000 (stage 2)
/// passes, while tests override with small counts. A learning rate of 0
/// is accepted as a dry-run mode in which every stored value, including
/// the batch-norm running statistics, stays bit-identical.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    /// Stage 1 batches frames along the leading conv axis; stage 2
    /// accumulates gradients over this many whole sequences per update.
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    pub augment: bool,
    /// Training (height, width) after augmentation crop; required when
    /// `augment` is on. For stage 2 these must stay compatible with the
    /// model's spatial grid.
    pub crop: Option<(usize, usize)>,
    pub alpha: f64,
    pub beta: f64,
    /// Architecture tag ("t", "s", "b", "l"), recorded for stage 2 runs.
    pub variant: Option<String>,
    /// Acceleration factor the training data was masked with, recorded
    /// alongside checkpoints and reports.
    pub mask_r: Option<f64>,
    /// Checkpoint directory: interval snapshots go to `step{N}/`
    /// subdirectories, the final state to the directory itself.
    pub checkpoint_dir: Option<PathBuf>,
    /// Snapshot every this many steps.
    pub eval_interval: u64,
}

/// JSON form of [`TrainConfig`]: everything except the stage may be
/// omitted and falls back to the stage defaults.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrainConfig {
    stage: Stage,
    lr: Option<f64>,
    batch: Option<usize>,
    steps: Option<u64>,
    seed: Option<u64>,
    augment: Option<bool>,
    crop: Option<(usize, usize)>,
    alpha: Option<f64>,
    beta: Option<f64>,
    variant: Option<String>,
    mask_r: Option<f64>,
    checkpoint_dir: Option<PathBuf>,
    eval_interval: Option<u64>,
}

impl From<RawTrainConfig> for TrainConfig {
    fn from(raw: RawTrainConfig) -> Self {
        let mut cfg = TrainConfig::for_stage(raw.stage);
        if let Some(v) = raw.lr {
            cfg.lr = v;
        }
        if let Some(v) = raw.batch {
            cfg.batch = v;
        }
        if let Some(v) = raw.steps {
            cfg.steps = v;
        }
        if let Some(v) = raw.seed {
            cfg.seed = v;
        }
        if let Some(v) = raw.augment {
            cfg.augment = v;
        }
        if let Some(v) = raw.eval_interval {
            cfg.eval_interval = v;
        }
        if let Some(v) = raw.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = raw.beta {
            cfg.beta = v;
        }
        cfg.crop = raw.crop;
        cfg.variant = raw.variant;
        cfg.mask_r = raw.mask_r;
        cfg.checkpoint_dir = raw.checkpoint_dir;
        cfg
    }
}

impl TrainConfig {
    /// Stage defaults: lr 0.001, batch 2 (stage 1) or 1 (stage 2), loss
    /// weights 0.5 / 0.5, augmentation off.
    pub fn for_stage(stage: Stage) -> Self {
        TrainConfig {
            stage,
            lr: 0.001,
            batch: match stage {
                Stage::Sadxnet => 2,
                Stage::Rst => 1,
            },
            steps: match stage {
                Stage::Sadxnet => 1000,
                Stage::Rst => 2000,
            },
            seed: 0,
            augment: false,
            crop: None,
            alpha: 0.5,
            beta: 0.5,
            variant: None,
            mask_r: None,
            checkpoint_dir: None,
            eval_interval: 100,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be nonnegative and finite, got {}",
                self.lr
            )));
        }
        if self.batch < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.steps < 1 {
            return Err(Error::Config("step count must be >= 1".into()));
        }
        if self.eval_interval < 1 {
            return Err(Error::Config("eval interval must be >= 1".into()));
        }
        self.weights().validate()?;
        if self.augment && self.crop.is_none() {
            return Err(Error::Config(
                "augmentation requires crop dims (the training size)".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let raw: RawTrainConfig = serde_json::from_str(s)?;
        let cfg = TrainConfig::from(raw);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// One stage-1 example: aligned (H, W, Z) frames.
#[derive(Clone, Debug)]
pub struct FramePair {
    pub zero_filled: Tensor<f32>,
    pub truth: Tensor<f32>,
}

/// One stage-2 example: aligned (T, H, W, Z) sequences.
#[derive(Clone, Debug)]
pub struct SequencePair {
    pub zero_filled: DynamicImage,
    pub truth: DynamicImage,
}

/// Mask a ground-truth sequence at acceleration `r` and reconstruct the
/// zero-filled counterpart, yielding a training or evaluation pair.
pub fn undersampled_pair(truth: &DynamicImage, r: f64, seed: u64) -> Result<SequencePair> {
    let (t, h, w, _) = truth.dims();
    let mask = make_vista_mask(t, h, w, r, seed)?;
    let k = dft2_frames(truth);
    let ku = undersample(&k, &mask)?;
    Ok(SequencePair {
        zero_filled: zero_filled_recon(&ku)?,
        truth: truth.clone(),
    })
}

/// Flatten sequences into per-frame training pairs for stage 1.
pub fn frame_pairs(data: &[SequencePair]) -> Result<Vec<FramePair>> {
    let mut out = Vec::new();
    for pair in data {
        if pair.zero_filled.dims() != pair.truth.dims() {
            return Err(Error::Shape(format!(
                "pair dims differ: {:?} vs {:?}",
                pair.zero_filled.dims(),
                pair.truth.dims()
            )));
        }
        let (t_n, ..) = pair.truth.dims();
        for t in 0..t_n {
            out.push(FramePair {
                zero_filled: pair.zero_filled.frame_at(t)?,
                truth: pair.truth.frame_at(t)?,
            });
        }
    }
    Ok(out)
}

/// Loss curve of one training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// (step, loss) per optimizer update.
    pub curve: Vec<(u64, f32)>,
}

impl TrainLog {
    pub fn first_loss(&self) -> Option<f32> {
        self.curve.first().map(|&(_, l)| l)
    }

    pub fn last_loss(&self) -> Option<f32> {
        self.curve.last().map(|&(_, l)| l)
    }

    /// CSV rendering, header `step,loss`. The shortest-roundtrip float
    /// formatting makes curves comparable as strings.
    pub fn csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for &(step, loss) in &self.curve {
            s.push_str(&format!("{},{}\n", step, loss));
        }
        s
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.csv())?)
    }
}

/// SSIM settings for training and evaluation at a given frame size: the
/// default stack, with the scale count lowered until every dyadic
/// downscale still fits the filter window.
pub fn ssim_params_for(h: usize, w: usize) -> SsimParams {
    let mut p = SsimParams::default();
    p.m_scales = p.m_scales.min(SsimParams::max_scales_for(h, w));
    p
}

fn check_stage(cfg: &TrainConfig, expected: Stage) -> Result<()> {
    cfg.validate()?;
    if cfg.stage != expected {
        return Err(Error::Config(format!(
            "config stage is {} but the {} trainer was invoked",
            cfg.stage, expected
        )));
    }
    Ok(())
}

fn divergence(loss: f32, step: u64) -> Error {
    Error::Divergence(format!(
        "training loss became non-finite ({}) at step {}; lower the learning rate",
        loss, step
    ))
}

fn interval_checkpoint<S: Scalar>(
    cfg: &TrainConfig,
    store: &ParamStore<S>,
    step: u64,
) -> Result<()> {
    if let Some(dir) = &cfg.checkpoint_dir {
        if (step + 1) % cfg.eval_interval == 0 {
            store.save(&dir.join(format!("step{:06}", step + 1)))?;
        }
    }
    Ok(())
}

fn final_checkpoint<S: Scalar>(cfg: &TrainConfig, store: &ParamStore<S>) -> Result<()> {
    if let Some(dir) = &cfg.checkpoint_dir {
        store.save(dir)?;
    }
    Ok(())
}

/// Stack (Z, H, W) frames into a (B, Z, H, W) batch.
fn stack(frames: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let d = frames[0].dims();
    let mut out = Tensor::zeros(&[frames.len(), d[0], d[1], d[2]]);
    let chunk = frames[0].len();
    for (k, f) in frames.iter().enumerate() {
        if f.dims() != d {
            return Err(Error::Shape(format!(
                "batch frames disagree: {:?} vs {:?}",
                f.dims(),
                d
            )));
        }
        out.data_mut()[k * chunk..(k + 1) * chunk].copy_from_slice(f.data());
    }
    Ok(out)
}

/// Augment one frame pair (or pass it through) and return both sides in
/// (Z, H, W) layout ready for stacking.
fn prepare_frame(
    cfg: &TrainConfig,
    pair: &FramePair,
    rng: &mut ChaCha20Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let d = pair.truth.dims();
    let (zf, tr) = if cfg.augment {
        let seed = rng.gen::<u64>();
        let crop = cfg.crop.expect("validated");
        let a = DynamicImage::from_tensor(pair.zero_filled.reshaped(&[1, d[0], d[1], d[2]])?)?;
        let b = DynamicImage::from_tensor(pair.truth.reshaped(&[1, d[0], d[1], d[2]])?)?;
        let (a2, b2) = augment::augment_pair(&a, &b, Stage::Sadxnet, crop, seed)?;
        (a2.frame_at(0)?, b2.frame_at(0)?)
    } else {
        (pair.zero_filled.clone(), pair.truth.clone())
    };
    Ok((zf.permuted(&[2, 0, 1])?, tr.permuted(&[2, 0, 1])?))
}

/// Stage 1: fit SADXNet on frame pairs. Batches are drawn with
/// replacement from `data`; batch normalization uses true batch
/// statistics, and the running estimates are folded in after every step.
pub fn train_sadxnet(
    cfg: &TrainConfig,
    net: &SadxNet,
    store: &mut ParamStore<f32>,
    data: &[FramePair],
) -> Result<TrainLog> {
    check_stage(cfg, Stage::Sadxnet)?;
    if data.is_empty() {
        return Err(Error::Config("cannot train on an empty frame set".into()));
    }
    let d0 = data[0].truth.dims().to_vec();
    for pair in data {
        if pair.zero_filled.dims() != d0 || pair.truth.dims() != d0 {
            return Err(Error::Shape(format!(
                "all frames must share dims {:?}, found {:?} / {:?}",
                d0,
                pair.zero_filled.dims(),
                pair.truth.dims()
            )));
        }
    }
    if d0.len() != 3 {
        return Err(Error::Shape(format!(
            "frames must be rank-3 (H, W, Z), got {:?}",
            d0
        )));
    }
    let (th, tw) = cfg.crop.filter(|_| cfg.augment).unwrap_or((d0[0], d0[1]));
    let params = ssim_params_for(th, tw);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();

    for step in 0..cfg.steps {
        let mut ins = Vec::with_capacity(cfg.batch);
        let mut tgs = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let idx = rng.gen_range(0..data.len());
            let (zf, tr) = prepare_frame(cfg, &data[idx], &mut rng)?;
            ins.push(zf);
            tgs.push(tr);
        }
        let mut g: Graph<f32> = Graph::new();
        let xin = g.input(stack(&ins)?);
        let fwd = net.forward_train(&mut g, store, xin)?;
        let tnode = g.constant(stack(&tgs)?);
        let loss_id = composite_loss_node(&mut g, fwd.out, tnode, cfg.weights(), &params)?;
        let loss = g.value(loss_id).data()[0];
        if !loss.is_finite() {
            return Err(divergence(loss, step));
        }
        let grads = g.backward(loss_id)?;
        g.accumulate_param_grads(&grads, store)?;
        if cfg.lr > 0.0 {
            net.update_running_stats(&g, store, &fwd)?;
        }
        store.adam_step(cfg.lr)?;
        log.curve.push((step, loss));
        interval_checkpoint(cfg, store, step)?;
    }
    final_checkpoint(cfg, store)?;
    Ok(log)
}

/// Stage 2: fit RST on sequences. When a SADXNet is supplied it stays
/// frozen (the immutable borrow guarantees it) and its restorations are
/// precomputed once up front; otherwise the zero-filled sequences feed
/// the network directly, with identical shapes either way. Batches
/// larger than one accumulate gradients over independent forward passes.
pub fn train_rst(
    cfg: &TrainConfig,
    net: &RstNet,
    store: &mut ParamStore<f32>,
    sadxnet: Option<(&SadxNet, &ParamStore<f32>)>,
    data: &[SequencePair],
) -> Result<TrainLog> {
    check_stage(cfg, Stage::Rst)?;
    if data.is_empty() {
        return Err(Error::Config("cannot train on an empty sequence set".into()));
    }
    for pair in data {
        if pair.zero_filled.dims() != pair.truth.dims() {
            return Err(Error::Shape(format!(
                "pair dims differ: {:?} vs {:?}",
                pair.zero_filled.dims(),
                pair.truth.dims()
            )));
        }
    }
    let inputs: Vec<DynamicImage> = match sadxnet {
        Some((sn, sn_store)) => data
            .iter()
            .map(|p| sn.restore_sequence(sn_store, &p.zero_filled))
            .collect::<Result<_>>()?,
        None => data.iter().map(|p| p.zero_filled.clone()).collect(),
    };
    let (_, h0, w0, _) = data[0].truth.dims();
    let (th, tw) = cfg.crop.filter(|_| cfg.augment).unwrap_or((h0, w0));
    let params = ssim_params_for(th, tw);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();

    for step in 0..cfg.steps {
        let mut batch_loss = 0f32;
        for _ in 0..cfg.batch {
            let idx = rng.gen_range(0..data.len());
            let (inp, tgt) = if cfg.augment {
                let seed = rng.gen::<u64>();
                augment::augment_pair(&inputs[idx], &data[idx].truth, Stage::Rst, (th, tw), seed)?
            } else {
                (inputs[idx].clone(), data[idx].truth.clone())
            };
            let mut g: Graph<f32> = Graph::new();
            let xin = g.input(inp.into_tensor());
            let out = net.forward_node(&mut g, store, xin)?;
            let pred = g.permute(out, &[0, 3, 1, 2])?;
            let tnode = g.constant(tgt.tensor().permuted(&[0, 3, 1, 2])?);
            let loss_id = composite_loss_node(&mut g, pred, tnode, cfg.weights(), &params)?;
            let loss = g.value(loss_id).data()[0];
            if !loss.is_finite() {
                return Err(divergence(loss, step));
            }
            batch_loss += loss;
            let scaled = g.scale(loss_id, 1.0 / cfg.batch as f64);
            let grads = g.backward(scaled)?;
            g.accumulate_param_grads(&grads, store)?;
        }
        store.adam_step(cfg.lr)?;
        log.curve.push((step, batch_loss / cfg.batch as f32));
        interval_checkpoint(cfg, store, step)?;
    }
    final_checkpoint(cfg, store)?;
    Ok(log)
}

/// The reconstruction chain: zero-filled input through whichever stages
/// are present.
#[derive(Clone, Copy, Default)]
pub struct Pipeline<'a> {
    pub sadxnet: Option<(&'a SadxNet, &'a ParamStore<f32>)>,
    pub rst: Option<(&'a RstNet, &'a ParamStore<f32>)>,
}

impl Pipeline<'_> {
    pub fn reconstruct(&self, zero_filled: &DynamicImage) -> Result<DynamicImage> {
        let mut cur = zero_filled.clone();
        if let Some((net, store)) = self.sadxnet {
            cur = net.restore_sequence(store, &cur)?;
        }
        if let Some((net, store)) = self.rst {
            cur = net.forward(store, &cur)?;
        }
        Ok(cur)
    }
}

/// Four headline metrics of one sequence, as reported per row and in the
/// aggregates.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub rmse: f64,
    pub psnr_db: f64,
    pub one_minus_ssim: f64,
    pub ms_ssim: f64,
}

impl From<&MetricsReport> for MetricsSummary {
    fn from(r: &MetricsReport) -> Self {
        MetricsSummary {
            rmse: r.rmse,
            psnr_db: r.psnr_db,
            one_minus_ssim: r.one_minus_ssim,
            ms_ssim: r.ms_ssim,
        }
    }
}

/// One evaluation example with a display name.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub name: String,
    pub pair: SequencePair,
}

/// Per-sequence evaluation row: the zero-filled baseline, the model
/// output, and the wall-clock reconstruction time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SequenceReport {
    pub name: String,
    pub zero_filled: MetricsSummary,
    pub model: MetricsSummary,
    pub seconds: f64,
}

/// Full evaluation report, serialized as JSON. Spreads are population
/// standard deviations over the sequences.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequences: Vec<SequenceReport>,
    pub model_mean: MetricsSummary,
    pub model_std: MetricsSummary,
    pub zero_filled_mean: MetricsSummary,
    pub zero_filled_std: MetricsSummary,
    pub total_seconds: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_json()?)?)
    }
}

fn mean_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn aggregate(rows: &[MetricsSummary]) -> (MetricsSummary, MetricsSummary) {
    let pick: [fn(&MetricsSummary) -> f64; 4] = [
        |m| m.rmse,
        |m| m.psnr_db,
        |m| m.one_minus_ssim,
        |m| m.ms_ssim,
    ];
    let mut mean = [0f64; 4];
    let mut std = [0f64; 4];
    for (i, f) in pick.iter().enumerate() {
        let vals: Vec<f64> = rows.iter().map(f).collect();
        (mean[i], std[i]) = mean_std(&vals);
    }
    let build = |v: [f64; 4]| MetricsSummary {
        rmse: v[0],
        psnr_db: v[1],
        one_minus_ssim: v[2],
        ms_ssim: v[3],
    };
    (build(mean), build(std))
}

/// Reconstruct every case and score it against its truth, next to the
/// zero-filled baseline.
pub fn evaluate_pipeline(
    pipe: &Pipeline,
    cases: &[EvalCase],
    params: &SsimParams,
) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let mut sequences = Vec::with_capacity(cases.len());
    let mut total_seconds = 0.0;
    for case in cases {
        let start = Instant::now();
        let recon = pipe.reconstruct(&case.pair.zero_filled)?;
        let seconds = start.elapsed().as_secs_f64();
        total_seconds += seconds;
        let model = evaluate(&recon, &case.pair.truth, params)?;
        let zf = evaluate(&case.pair.zero_filled, &case.pair.truth, params)?;
        sequences.push(SequenceReport {
            name: case.name.clone(),
            zero_filled: MetricsSummary::from(&zf),
            model: MetricsSummary::from(&model),
            seconds,
        });
    }
    let model_rows: Vec<MetricsSummary> = sequences.iter().map(|s| s.model).collect();
    let zf_rows: Vec<MetricsSummary> = sequences.iter().map(|s| s.zero_filled).collect();
    let (model_mean, model_std) = aggregate(&model_rows);
    let (zero_filled_mean, zero_filled_std) = aggregate(&zf_rows);
    Ok(EvalReport {
        sequences,
        model_mean,
        model_std,
        zero_filled_mean,
        zero_filled_std,
        total_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_cine, PhantomSpec};
    use crate::rst::{RstConfig, RstNet};
    use crate::sadxnet::SadxConfig;

    fn toy_sadx() -> (SadxNet, ParamStore<f32>) {
        let net = SadxNet::new(SadxConfig {
            schedule: vec![2, 4, 8, 4, 2, 2, 1],
            z: 1,
        })
        .unwrap();
        let mut store = ParamStore::new();
        net.register_params(&mut store, 11).unwrap();
        (net, store)
    }

    fn toy_rst() -> (RstNet, ParamStore<f32>) {
        let net = RstNet::new(RstConfig::micro(1)).unwrap();
        let mut store = ParamStore::new();
        net.register_params(&mut store, 12).unwrap();
        (net, store)
    }

    fn cine(frames: usize, side: usize, seed: u64) -> DynamicImage {
        generate_cine(&PhantomSpec {
            frames,
            height: side,
            width: side,
            slices: 1,
            n_ellipses: 2,
            motion_amplitude: 0.08,
            period_frames: frames as f64,
            noise_sigma: 0.0,
            seed,
        })
        .unwrap()
    }

    fn toy_frames(side: usize, seed: u64) -> Vec<FramePair> {
        let truth = cine(4, side, seed);
        let pair = undersampled_pair(&truth, 3.0, seed).unwrap();
        frame_pairs(&[pair]).unwrap()
    }

    fn param_bits(store: &ParamStore<f32>) -> Vec<(String, Vec<u32>)> {
        store
            .names()
            .map(|n| {
                (
                    n.to_string(),
                    store.value(n).unwrap().data().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn stage_defaults_differ() {
        let s = TrainConfig::for_stage(Stage::Sadxnet);
        let r = TrainConfig::for_stage(Stage::Rst);
        assert_eq!((s.batch, r.batch), (2, 1));
        assert_eq!(s.lr, 0.001);
        assert_eq!((s.alpha, s.beta), (0.5, 0.5));
        s.validate().unwrap();
        r.validate().unwrap();
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let base = TrainConfig::for_stage(Stage::Sadxnet);
        for tweak in [
            |c: &mut TrainConfig| c.lr = -0.1,
            |c: &mut TrainConfig| c.lr = f64::NAN,
            |c: &mut TrainConfig| c.batch = 0,
            |c: &mut TrainConfig| c.steps = 0,
            |c: &mut TrainConfig| c.eval_interval = 0,
            |c: &mut TrainConfig| c.alpha = 1.5,
            |c: &mut TrainConfig| c.augment = true,
        ] {
            let mut cfg = base.clone();
            tweak(&mut cfg);
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
        let mut ok = base.clone();
        ok.lr = 0.0;
        ok.validate().unwrap();
        ok.augment = true;
        ok.crop = Some((16, 16));
        ok.validate().unwrap();
    }

    #[test]
    fn json_config_round_trips_with_defaults() {
        let cfg = TrainConfig::from_json_str(r#"{"stage": "rst"}"#).unwrap();
        assert_eq!(cfg, TrainConfig::for_stage(Stage::Rst));

        let cfg = TrainConfig::from_json_str(
            r#"{"stage": "sadxnet", "lr": 0.01, "steps": 7, "crop": [10, 12], "mask_r": 4.0}"#,
        )
        .unwrap();
        assert_eq!((cfg.lr, cfg.steps), (0.01, 7));
        assert_eq!(cfg.crop, Some((10, 12)));
        assert_eq!(cfg.mask_r, Some(4.0));
        assert_eq!(cfg.batch, 2);

        // a fully serialized config parses back unchanged
        let full = serde_json::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_json_str(&full).unwrap(), cfg);

        assert!(TrainConfig::from_json_str(r#"{"stage": "swin"}"#).is_err());
        assert!(TrainConfig::from_json_str(r#"{"stage": "rst", "typo": 1}"#).is_err());
        assert!(matches!(
            Stage::parse("gan"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn undersampled_pairs_flatten_to_frames() {
        let frames = toy_frames(12, 21);
        assert_eq!(frames.len(), 4);
        for f in &frames {
            assert_eq!(f.zero_filled.dims(), &[12, 12, 1]);
            assert_eq!(f.truth.dims(), &[12, 12, 1]);
        }
    }

    #[test]
    fn sadxnet_training_reduces_loss() {
        let (net, mut store) = toy_sadx();
        let data = toy_frames(12, 22);
        let mut cfg = TrainConfig::for_stage(Stage::Sadxnet);
        cfg.steps = 40;
        cfg.seed = 5;
        let log = train_sadxnet(&cfg, &net, &mut store, &data).unwrap();
        assert_eq!(log.curve.len(), 40);
        assert_eq!(log.curve[0].0, 0);
        assert!(
            log.last_loss().unwrap() < log.first_loss().unwrap(),
            "loss went {} -> {}",
            log.first_loss().unwrap(),
            log.last_loss().unwrap()
        );
    }

    #[test]
    fn zero_learning_rate_freezes_every_value() {
        let (net, mut store) = toy_sadx();
        let data = toy_frames(12, 23);
        let before = param_bits(&store);
        let mut cfg = TrainConfig::for_stage(Stage::Sadxnet);
        cfg.steps = 5;
        cfg.lr = 0.0;
        let log = train_sadxnet(&cfg, &net, &mut store, &data).unwrap();
        assert_eq!(param_bits(&store), before);
        assert_eq!(log.curve.len(), 5);
    }

    #[test]
    fn same_seed_reproduces_curve_and_parameters() {
        let data = toy_frames(16, 24);
        let mut cfg = TrainConfig::for_stage(Stage::Sadxnet);
        cfg.steps = 8;
        cfg.seed = 9;
        cfg.augment = true;
        cfg.crop = Some((12, 12));
        let run = || {
            let (net, mut store) = toy_sadx();
            let log = train_sadxnet(&cfg, &net, &mut store, &data).unwrap();
            (log, param_bits(&store))
        };
        let (log_a, bits_a) = run();
        let (log_b, bits_b) = run();
        assert_eq!(log_a.csv(), log_b.csv());
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn exploding_learning_rate_reports_divergence() {
        let (net, mut store) = toy_sadx();
        let data = toy_frames(12, 25);
        let mut cfg = TrainConfig::for_stage(Stage::Sadxnet);
        cfg.steps = 10;
        cfg.lr = 1e30;
        let err = train_sadxnet(&cfg, &net, &mut store, &data).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)), "got {:?}", err);
    }

    #[test]
    fn checkpoints_land_at_each_interval() {
        let tmp = tempfile::tempdir().unwrap();
        let (net, mut store) = toy_sadx();
        let data = toy_frames(12, 26);
        let mut cfg = TrainConfig::for_stage(Stage::Sadxnet);
        cfg.steps = 4;
        cfg.eval_interval = 2;
        cfg.checkpoint_dir = Some(tmp.path().to_path_buf());
        train_sadxnet(&cfg, &net, &mut store, &data).unwrap();
        for sub in ["step000002", "step000004", "."] {
            assert!(
                tmp.path().join(sub).join("manifest.json").is_file(),
                "missing checkpoint {}",
                sub
            );
        }
        let reloaded: ParamStore<f32> = ParamStore::load(tmp.path()).unwrap();
        assert_eq!(param_bits(&reloaded), param_bits(&store));
    }

    #[test]
    fn rst_training_reduces_loss_without_sadxnet() {
        let (net, mut store) = toy_rst();
        let truth = cine(2, 16, 27);
        let data = vec![undersampled_pair(&truth, 3.0, 27).unwrap()];
        let mut cfg = TrainConfig::for_stage(Stage::Rst);
        cfg.steps = 30;
        cfg.lr = 0.005;
        let log = train_rst(&cfg, &net, &mut store, None, &data).unwrap();
        assert_eq!(log.curve.len(), 30);
        assert!(
            log.last_loss().unwrap() < log.first_loss().unwrap(),
            "loss went {} -> {}",
            log.first_loss().unwrap(),
            log.last_loss().unwrap()
        );
    }

    #[test]
    fn frozen_sadxnet_is_bit_identical_after_rst_training() {
        let (sadx, sadx_store) = toy_sadx();
        let before = param_bits(&sadx_store);
        let (net, mut store) = toy_rst();
        let truth = cine(2, 16, 28);
        let data = vec![undersampled_pair(&truth, 3.0, 28).unwrap()];
        let mut cfg = TrainConfig::for_stage(Stage::Rst);
        cfg.steps = 3;
        train_rst(&cfg, &net, &mut store, Some((&sadx, &sadx_store)), &data).unwrap();
        assert_eq!(param_bits(&sadx_store), before);
    }

    #[test]
    fn both_rst_modes_accept_the_same_data() {
        let truth = cine(2, 16, 29);
        let data = vec![undersampled_pair(&truth, 3.0, 29).unwrap()];
        let mut cfg = TrainConfig::for_stage(Stage::Rst);
        cfg.steps = 1;
        let (sadx, sadx_store) = toy_sadx();
        for with_sadx in [false, true] {
            let (net, mut store) = toy_rst();
            let sn = with_sadx.then_some((&sadx, &sadx_store));
            train_rst(&cfg, &net, &mut store, sn, &data).unwrap();
            let pipe = Pipeline {
                sadxnet: sn,
                rst: Some((&net, &store)),
            };
            let out = pipe.reconstruct(&data[0].zero_filled).unwrap();
            assert_eq!(out.dims(), data[0].zero_filled.dims());
        }
    }

    #[test]
    fn stage_mismatch_is_a_config_error() {
        let (net, mut store) = toy_sadx();
        let data = toy_frames(12, 30);
        let cfg = TrainConfig::for_stage(Stage::Rst);
        assert!(matches!(
            train_sadxnet(&cfg, &net, &mut store, &data),
            Err(Error::Config(_))
        ));
        let (rnet, mut rstore) = toy_rst();
        let truth = cine(2, 16, 30);
        let seqs = vec![undersampled_pair(&truth, 3.0, 30).unwrap()];
        let cfg = TrainConfig::for_stage(Stage::Sadxnet);
        assert!(matches!(
            train_rst(&cfg, &rnet, &mut rstore, None, &seqs),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn evaluation_report_has_a_baseline_row_per_sequence() {
        let truth_a = cine(2, 16, 31);
        let truth_b = cine(2, 16, 32);
        let cases = vec![
            EvalCase {
                name: "self".into(),
                pair: SequencePair {
                    zero_filled: truth_a.clone(),
                    truth: truth_a.clone(),
                },
            },
            EvalCase {
                name: "masked".into(),
                pair: undersampled_pair(&truth_b, 3.0, 33).unwrap(),
            },
        ];
        let pipe = Pipeline::default();
        let params = ssim_params_for(16, 16);
        let report = evaluate_pipeline(&pipe, &cases, &params).unwrap();
        assert_eq!(report.sequences.len(), 2);

        // an identity pipeline on a perfect input scores zero error
        let row = &report.sequences[0];
        assert_eq!(row.model.rmse, 0.0);
        assert!(row.model.one_minus_ssim.abs() < 1e-12);
        assert!(row.seconds >= 0.0);

        // degraded input scores worse than perfect input
        assert!(report.sequences[1].model.rmse > 0.0);
        for r in &report.sequences {
            assert!(r.zero_filled.rmse >= 0.0);
            assert!(r.zero_filled.psnr_db.is_finite());
        }
        assert!(report.total_seconds >= 0.0);
        assert!(report.model_std.rmse >= 0.0);

        // report round-trips through JSON
        let json = report.to_json().unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.sequences.len(), 2);
        assert_eq!(back.model_mean.rmse, report.model_mean.rmse);

        assert!(matches!(
            evaluate_pipeline(&pipe, &[], &params),
            Err(Error::Config(_))
        ));
    }
}
