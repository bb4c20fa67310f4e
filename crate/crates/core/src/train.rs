//! Training loop, evaluation and the ablation harness.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape};
use crate::ctst::{self, StyleMode};
use crate::data::{self, binarize, confusion, metrics, Confusion, GenConfig, ImagePairSample, MetricsReport};
use crate::ddr::{DdrVariant, NormConfig};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig, LossParts};
use crate::network::{is_conv_weight, NetConfig, SdNetwork};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetWidth {
    #[default]
    Full,
    Tiny,
}

/// Synthetic splits generated on the fly instead of manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticData {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub generator: GenConfig,
}

impl Default for SyntheticData {
    fn default() -> Self {
        SyntheticData {
            train: 400,
            val: 50,
            test: 100,
            seed: 0,
            generator: GenConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub ddr_variant: DdrVariant,
    pub lambda: usize,
    pub lambda_prime: usize,
    pub ctst_enabled: bool,
    pub ctcr_weight: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda_w: f64,
    pub eps: f64,
    pub newton_t: usize,
    pub width: NetWidth,
    pub threshold: f64,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub synthetic: Option<SyntheticData>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        TrainConfig {
            lr0: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-8,
            poly_power: 0.9,
            batch_size: 8,
            epochs: 30,
            seed: 0,
            ddr_variant: DdrVariant::Glw,
            lambda: 6,
            lambda_prime: ctst::DEFAULT_LAMBDA_PRIME,
            ctst_enabled: true,
            ctcr_weight: loss.ctcr_weight,
            alpha: loss.alpha,
            beta: loss.beta,
            lambda_w: loss.lambda_w,
            eps: crate::stats::DEFAULT_EPS,
            newton_t: 5,
            width: NetWidth::Full,
            threshold: data::metrics::DEFAULT_THRESHOLD,
            train_manifest: None,
            val_manifest: None,
            synthetic: None,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.batch_size < 2 {
            return Err(Error::invalid(
                "train_config",
                "need lr0 > 0, 0 <= momentum < 1 and batch_size >= 2",
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) || self.lambda_prime == 0 {
            return Err(Error::invalid("train_config", "need 0 < threshold < 1 and lambda_prime >= 1"));
        }
        self.loss().validate()?;
        self.net_config().validate()
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            beta: self.beta,
            lambda_w: self.lambda_w,
            ctcr_weight: self.ctcr_weight,
        }
    }

    pub fn net_config(&self) -> NetConfig {
        let norm = NormConfig {
            lambda: self.lambda,
            eps: self.eps,
            variant: self.ddr_variant,
            newton_t: self.newton_t,
        };
        match self.width {
            NetWidth::Full => NetConfig::full(norm),
            NetWidth::Tiny => NetConfig::tiny(norm),
        }
    }
}

/// `lr0 * (1 - step / total)^power`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    if total_steps == 0 {
        return cfg.lr0;
    }
    let frac = (step.min(total_steps) as f64) / total_steps as f64;
    cfg.lr0 * (1.0 - frac).powf(cfg.poly_power)
}

pub struct TrainState {
    pub step: usize,
    pub total_steps: usize,
    pub velocity: Vec<Vec<f32>>,
    pub rng: ChaCha8Rng,
    pub best_f1: Option<f64>,
}

impl TrainState {
    pub fn new(params: &ParamStore<f32>, total_steps: usize, seed: u64) -> Self {
        TrainState {
            step: 0,
            total_steps,
            velocity: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            best_f1: None,
        }
    }
}

/// `v = momentum * v + g + wd * p; p -= lr * v`, then clears gradients.
/// Weight decay applies to convolution weights only.
pub fn sgd_step(params: &mut ParamStore<f32>, state: &mut TrainState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    if state.velocity.len() != params.len() {
        return Err(Error::invalid("sgd_step", "momentum buffers do not match parameters"));
    }
    let (m, lr) = (cfg.momentum as f32, lr as f32);
    for slot in 0..params.len() {
        let wd = if is_conv_weight(params.name(slot)) {
            cfg.weight_decay as f32
        } else {
            0.0
        };
        let t = params.tensor_mut(slot);
        let v = &mut state.velocity[slot];
        if v.len() != t.len() {
            return Err(Error::shape("sgd_step", &[v.len()], t.shape()));
        }
        let grad = t.grad().map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; v.len()]);
        for ((p, v), g) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
            *v = m * *v + g + wd * *p;
            *p -= lr * *v;
        }
        t.zero_grad();
    }
    Ok(())
}

/// In-memory pairs as `f32` tensors: `3 x H x W` images and `1 x H x W` masks.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub xa: Vec<Tensor<f32>>,
    pub xb: Vec<Tensor<f32>>,
    pub mask: Vec<Tensor<f32>>,
    pub style_shifted: Option<Vec<Tensor<f32>>>,
}

impl Dataset {
    pub fn from_samples(samples: &[ImagePairSample]) -> Self {
        Dataset {
            xa: samples.iter().map(|s| s.xa.cast()).collect(),
            xb: samples.iter().map(|s| s.xb.cast()).collect(),
            mask: samples.iter().map(|s| s.mask.cast()).collect(),
            style_shifted: Some(samples.iter().map(|s| s.style_shifted.cast()).collect()),
        }
    }

    pub fn from_manifest(path: &Path) -> Result<Self> {
        let entries = data::read_manifest(path)?;
        if entries.is_empty() {
            return Err(Error::invalid("dataset", format!("{} lists no pairs", path.display())));
        }
        let mut d = Dataset::default();
        for e in &entries {
            let p = data::load_pair(e)?;
            d.xa.push(p.xa.cast());
            d.xb.push(p.xb.cast());
            d.mask.push(p.mask.cast());
        }
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.xa.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xa.is_empty()
    }
}

fn stack(items: &[Tensor<f32>], idx: &[usize]) -> Result<Tensor<f32>> {
    let refs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &items[i]).collect();
    Tensor::stack(&refs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub parts: LossParts,
    pub lr: f64,
    pub modes: Vec<StyleMode>,
}

/// One optimizer step on the pairs `idx` of `data`.
pub fn train_step(
    net: &mut SdNetwork<f32>,
    data: &Dataset,
    idx: &[usize],
    state: &mut TrainState,
    cfg: &TrainConfig,
) -> Result<StepReport> {
    if idx.len() < 2 {
        return Err(Error::invalid("train_step", "a batch needs at least two pairs"));
    }
    let tape = Tape::new();
    let p = net.bind(&tape);
    let xa = tape.constant(stack(&data.xa, idx)?);
    let xb = tape.constant(stack(&data.xb, idx)?);
    let mask = stack(&data.mask, idx)?;
    let ori = net.forward_pair(&tape, &p, xa, xb, true)?;
    let mut modes = Vec::new();
    let p_sty = if cfg.ctst_enabled {
        let a: Vec<Tensor<f32>> = idx.iter().map(|&i| data.xa[i].clone()).collect();
        let b: Vec<Tensor<f32>> = idx.iter().map(|&i| data.xb[i].clone()).collect();
        let mut sa = Vec::with_capacity(idx.len());
        let mut sb = Vec::with_capacity(idx.len());
        for k in 0..idx.len() {
            let mode = ctst::sample_mode(&mut state.rng);
            let s = ctst::stylize_in_batch(&a, &b, k, mode, cfg.lambda_prime, ctst::IMAGE_EPS as f32)?;
            modes.push(mode);
            sa.push(s.xa);
            sb.push(s.xb);
        }
        let all: Vec<usize> = (0..idx.len()).collect();
        let ya = tape.constant(stack(&sa, &all)?);
        let yb = tape.constant(stack(&sb, &all)?);
        Some(net.forward_pair(&tape, &p, ya, yb, true)?.p_out)
    } else {
        None
    };
    let (loss, parts) = total_loss(&tape, ori.p_out, p_sty, &mask, &cfg.loss())?;
    let value = tape.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::numeric("train_step", format!("loss is {value} at step {}", state.step)));
    }
    let grads = tape.backward(loss)?;
    grads.accumulate_into(&mut net.params)?;
    let lr = lr_at(state.step, state.total_steps, cfg);
    sgd_step(&mut net.params, state, lr, cfg)?;
    state.step += 1;
    Ok(StepReport {
        loss: value,
        parts,
        lr,
        modes,
    })
}

/// Evaluation-mode probability maps `1 x H x W`, one per pair.
pub fn predict(net: &mut SdNetwork<f32>, data: &Dataset, batch_size: usize) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let p = net.infer(&stack(&data.xa, chunk)?, &stack(&data.xb, chunk)?)?;
        for k in 0..chunk.len() {
            out.push(p.batch_item(k));
        }
    }
    Ok(out)
}

/// Metrics over all pixels of all pairs, plus the false positives that fall
/// on pixels listed in `data.style_shifted` (0 when absent).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub style_fp: u64,
}

pub fn evaluate(net: &mut SdNetwork<f32>, data: &Dataset, threshold: f64, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::invalid("evaluate", "no pairs to evaluate"));
    }
    let maps = predict(net, data, batch_size)?;
    let mut total = Confusion::default();
    let mut style_fp = 0;
    for (i, p) in maps.iter().enumerate() {
        let b = binarize(p, threshold);
        total += confusion(&b, &data.mask[i])?;
        if let Some(s) = &data.style_shifted {
            style_fp += b
                .data()
                .iter()
                .zip(s[i].data())
                .zip(data.mask[i].data())
                .filter(|((&b, &s), &m)| b > 0.0 && s > 0.0 && m == 0.0)
                .count() as u64;
        }
    }
    Ok(Evaluation {
        report: metrics(total),
        style_fp,
    })
}

pub struct FitOutcome {
    pub net: SdNetwork<f32>,
    pub best: SdNetwork<f32>,
    pub losses: Vec<f64>,
    pub best_f1: Option<f64>,
    pub best_epoch: Option<usize>,
}

/// Trains for `cfg.epochs`, selecting the best epoch by validation F1. When
/// `out_dir` is given, `init.ckpt`, `last.ckpt` and `best.ckpt` are written
/// there at epoch boundaries.
pub fn fit(
    cfg: &TrainConfig,
    train: &Dataset,
    val: Option<&Dataset>,
    out_dir: Option<&Path>,
    mut log: impl FnMut(&str),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::invalid("fit", "need at least two training pairs"));
    }
    let mut net = SdNetwork::<f32>::new(cfg.net_config(), cfg.seed)?;
    let save = |net: &SdNetwork<f32>, name: &str| -> Result<()> {
        match out_dir {
            Some(d) => net.save(&d.join(name)),
            None => Ok(()),
        }
    };
    save(&net, "init.ckpt")?;
    let per_epoch = train.len() / cfg.batch_size + usize::from(train.len() % cfg.batch_size >= 2);
    let mut state = TrainState::new(&net.params, per_epoch * cfg.epochs, cfg.seed ^ 0x5eed);
    let mut best = net.clone();
    let mut best_epoch = None;
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut state.rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size).filter(|b| b.len() >= 2) {
            let r = train_step(&mut net, train, batch, &mut state, cfg)?;
            losses.push(r.loss);
            sum += r.loss;
            steps += 1;
        }
        let mut line = format!("epoch {} loss {:.5}", epoch + 1, sum / steps.max(1) as f64);
        match val {
            Some(v) => {
                let f1 = evaluate(&mut net, v, cfg.threshold, cfg.batch_size)?.report.f1;
                line.push_str(&format!(" val_f1 {f1:.4}"));
                if state.best_f1.is_none_or(|b| f1 > b) {
                    state.best_f1 = Some(f1);
                    best_epoch = Some(epoch);
                    best = net.clone();
                    save(&best, "best.ckpt")?;
                }
            }
            None => {
                best = net.clone();
                best_epoch = Some(epoch);
                save(&best, "best.ckpt")?;
            }
        }
        save(&net, "last.ckpt")?;
        log(&line);
    }
    Ok(FitOutcome {
        net,
        best,
        losses,
        best_f1: state.best_f1,
        best_epoch,
    })
}

/// Rows of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    Gln,
    Glw,
    GlwCtst,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::Gln, Variant::Glw, Variant::GlwCtst];

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let (ddr_variant, ctst_enabled) = match self {
            Variant::Base => (DdrVariant::None, false),
            Variant::Gln => (DdrVariant::Gln, false),
            Variant::Glw => (DdrVariant::Glw, false),
            Variant::GlwCtst => (DdrVariant::Glw, true),
        };
        TrainConfig {
            ddr_variant,
            ctst_enabled,
            ..cfg.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub base: TrainConfig,
    pub data: SyntheticData,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            base: TrainConfig::default(),
            data: SyntheticData::default(),
            seeds: vec![0, 1, 2],
            variants: Variant::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub test: Evaluation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub median_f1: f64,
    pub median_iou: f64,
    pub median_precision: f64,
    pub median_recall: f64,
    pub median_style_fp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub rows: Vec<AblationRow>,
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Trains every variant from every seed on one shared synthetic benchmark
/// and reports test metrics of the validation-selected checkpoints.
pub fn run_ablation(cfg: &AblationConfig, mut log: impl FnMut(&str)) -> Result<AblationReport> {
    let d = &cfg.data;
    let gen = |n: usize, k: u64| -> Result<Dataset> {
        Ok(Dataset::from_samples(&data::generate_dataset(
            &d.generator,
            n,
            data::synth::derive_seed(d.seed, k),
        )?))
    };
    let train = gen(d.train, 1)?;
    let val = gen(d.val, 2)?;
    let test = gen(d.test, 3)?;
    let mut runs = Vec::new();
    for &variant in &cfg.variants {
        for &seed in &cfg.seeds {
            let tc = TrainConfig {
                seed,
                ..variant.apply(&cfg.base)
            };
            let v = (!val.is_empty()).then_some(&val);
            let mut out = fit(&tc, &train, v, None, |l| log(&format!("{variant:?} seed {seed}: {l}")))?;
            let test = evaluate(&mut out.best, &test, tc.threshold, tc.batch_size)?;
            log(&format!(
                "{variant:?} seed {seed}: test f1 {:.4} style_fp {}",
                test.report.f1, test.style_fp
            ));
            runs.push(AblationRun {
                variant,
                seed,
                best_epoch: out.best_epoch,
                test,
            });
        }
    }
    let rows = cfg
        .variants
        .iter()
        .map(|&variant| {
            let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == variant).collect();
            let col = |f: &dyn Fn(&AblationRun) -> f64| median(&mut mine.iter().map(|r| f(r)).collect::<Vec<_>>());
            AblationRow {
                variant,
                median_f1: col(&|r| r.test.report.f1),
                median_iou: col(&|r| r.test.report.iou),
                median_precision: col(&|r| r.test.report.precision),
                median_recall: col(&|r| r.test.report.recall),
                median_style_fp: col(&|r| r.test.style_fp as f64),
            }
        })
        .collect();
    Ok(AblationReport { runs, rows })
}
