//! Alternating and joint training of the compression kernels with the classifier,
//! evaluation, and checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{Classifier, ClassifierConfig, ClassifierInput, InputMode};
use crate::dataset::{Dataset, Split};
use crate::engine::{AdamState, Tape, Tensor, Var};
use crate::entropy::{build_huffman_tables, measure_encoded, RateReport};
use crate::error::{Error, Result};
use crate::jpeg::diff::{self, CoeffMaps, ColorVars, KernelVars};
use crate::jpeg::{decode_pipeline, dequantize, encode_pipeline, ColorTransform, CompressionKernels, ImageRgb};
use crate::losses::{self, penalty_value, LossConfig};
use crate::metrics;

pub const CHECKPOINT_FORMAT: &str = "qtune-checkpoint/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Classifier epochs with the codec frozen, then kernel epochs with the classifier frozen.
    Alternating,
    /// One optimizer loop over everything with separate kernel and classifier rates.
    Joint,
    /// Fixed standard tables; only the classifier learns.
    Baseline,
}

/// Step-wise learning-rate decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub milestones: Vec<usize>,
    pub scales: Vec<f64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { milestones: vec![7, 14], scales: vec![0.1, 0.01] }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.milestones.len() != self.scales.len() {
            return Err(Error::Config("schedule needs one scale per milestone".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("milestones {:?} must be strictly increasing", self.milestones)));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config("schedule scales must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Base rate times the scale of the last milestone at or before `position`.
pub fn lr_at(base: f64, schedule: &Schedule, position: usize) -> f64 {
    let passed = schedule.milestones.iter().take_while(|&&m| m <= position).count();
    match passed {
        0 => base,
        n => base * schedule.scales[n - 1],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Rounds for alternating and baseline runs.
    pub alternations: usize,
    pub classifier_epochs: usize,
    pub kernel_epochs: usize,
    /// Epochs for joint runs.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_classifier: f64,
    pub lr_kernels: f64,
    pub lr_color: f64,
    pub schedule: Schedule,
    pub loss: LossConfig,
    pub train_color: bool,
    /// Initial kernels from the standard tables at this quality; all ones when unset.
    /// Baseline runs default to 50.
    pub quality: Option<f64>,
    /// Global gradient-norm limit for codec parameters.
    pub clip_norm: f64,
    /// Training images sampled to fit Huffman tables (all of them when fewer).
    pub rate_sample: usize,
    /// Also report top-k accuracy.
    pub topk: Option<usize>,
    pub classifier: ClassifierConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Alternating,
            alternations: 20,
            classifier_epochs: 2,
            kernel_epochs: 1,
            epochs: 20,
            batch_size: 100,
            lr_classifier: 1e-3,
            lr_kernels: 0.05,
            lr_color: 1e-4,
            schedule: Schedule::default(),
            loss: LossConfig::default(),
            train_color: false,
            quality: None,
            clip_norm: 5.0,
            rate_sample: 50_000,
            topk: None,
            classifier: ClassifierConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Validated copy with mode-implied settings applied.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        if c.mode == TrainMode::Baseline {
            c.lr_kernels = 0.0;
            c.lr_color = 0.0;
            c.train_color = false;
            c.quality.get_or_insert(50.0);
        }
        c.classifier.seed = c.seed;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.loss.validate()?;
        self.classifier.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, v) in [("lr_classifier", self.lr_classifier), ("lr_kernels", self.lr_kernels), ("lr_color", self.lr_color)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        if self.mode == TrainMode::Baseline && (self.lr_kernels != 0.0 || self.lr_color != 0.0) {
            return Err(Error::Config("baseline mode requires zero kernel and colour learning rates".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if let Some(q) = self.quality {
            crate::jpeg::quality_scale(q)?;
        }
        if self.topk == Some(0) {
            return Err(Error::Config("topk must be at least 1".into()));
        }
        Ok(())
    }

    /// Rounds (alternating, baseline) or epochs (joint) to run.
    pub fn rounds(&self) -> usize {
        match self.mode {
            TrainMode::Joint => self.epochs,
            _ => self.alternations,
        }
    }

    pub fn initial_kernels(&self) -> Result<CompressionKernels> {
        match self.quality {
            Some(q) => CompressionKernels::standard(q),
            None => Ok(CompressionKernels::ones()),
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Classifier,
    Kernel,
    Joint,
    Eval,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Classifier => "classifier",
            Phase::Kernel => "kernel",
            Phase::Joint => "joint",
            Phase::Eval => "eval",
        }
    }
}

/// One training epoch or one end-of-round evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub alternation: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub lr: Option<f64>,
    pub loss: Option<f64>,
    pub cla_loss: Option<f64>,
    pub quan_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
    pub mean_kb: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

impl HistoryRow {
    fn new(alternation: usize, epoch: usize, phase: Phase) -> Self {
        Self {
            alternation,
            epoch,
            phase,
            lr: None,
            loss: None,
            cla_loss: None,
            quan_loss: None,
            train_acc: None,
            val_acc: None,
            mean_kb: None,
            psnr: None,
            ssim: None,
        }
    }

    pub const CSV_HEADER: [&'static str; 12] =
        ["alternation", "epoch", "phase", "lr", "loss", "cla_loss", "quan_loss", "train_acc", "val_acc", "mean_KB", "PSNR", "SSIM"];

    /// Fields in [`Self::CSV_HEADER`] order; missing values are empty.
    pub fn csv_fields(&self) -> Vec<String> {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.alternation.to_string(),
            self.epoch.to_string(),
            self.phase.name().to_string(),
            f(self.lr),
            f(self.loss),
            f(self.cla_loss),
            f(self.quan_loss),
            f(self.train_acc),
            f(self.val_acc),
            f(self.mean_kb),
            f(self.psnr),
            f(self.ssim),
        ]
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// ChaCha8 position, enough to restore the stream exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Decimal `u128`.
    pub word_pos: String,
}

impl RngState {
    fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self.word_pos.parse().map_err(|_| Error::Checkpoint(format!("bad word_pos {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub classifier: Classifier,
    pub kernels: CompressionKernels,
    pub color: ColorTransform,
    pub adam_classifier: AdamState,
    pub adam_kernels: AdamState,
    pub adam_color: AdamState,
    /// Completed rounds.
    pub position: usize,
    /// Completed epochs across phases.
    pub epoch: usize,
    pub rng: RngState,
    pub history: Vec<HistoryRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config_hash: String,
    pub config: TrainConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format tag {:?}", ck.format)));
        }
        if ck.config.hash() != ck.config_hash {
            return Err(Error::Checkpoint("stored config does not match its hash".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn color_tensors(ct: &ColorTransform) -> [Tensor; 4] {
    [
        Tensor::from_parts(vec![3, 3, 1, 1], ct.forward.concat()),
        Tensor::from_parts(vec![3], ct.forward_offset.to_vec()),
        Tensor::from_parts(vec![3, 3, 1, 1], ct.inverse.concat()),
        Tensor::from_parts(vec![3], ct.inverse_offset.to_vec()),
    ]
}

fn kernel_tensors(k: &CompressionKernels) -> [Tensor; 3] {
    k.q.clone().map(|v| Tensor::from_parts(vec![v.len()], v))
}

/// What the classifier consumes for one image once the codec is fixed.
#[derive(Clone, Debug)]
pub enum CachedInput {
    Pixels(ImageRgb),
    Coefficients(CoeffMaps),
}

fn cached_batch(tape: &mut Tape, items: &[&CachedInput]) -> Result<ClassifierInput> {
    match items.first() {
        Some(CachedInput::Pixels(_)) => {
            let imgs: Vec<&ImageRgb> = items
                .iter()
                .map(|c| match c {
                    CachedInput::Pixels(i) => Ok(i),
                    CachedInput::Coefficients(_) => Err(Error::InvalidArgument("mixed cached inputs".into())),
                })
                .collect::<Result<_>>()?;
            Ok(ClassifierInput::Pixels(tape.constant(diff::image_batch(&imgs)?)))
        }
        Some(CachedInput::Coefficients(_)) => {
            let maps: Vec<&CoeffMaps> = items
                .iter()
                .map(|c| match c {
                    CachedInput::Coefficients(m) => Ok(m),
                    CachedInput::Pixels(_) => Err(Error::InvalidArgument("mixed cached inputs".into())),
                })
                .collect::<Result<_>>()?;
            Ok(ClassifierInput::Coefficients(diff::coeff_batch(tape, &maps)?))
        }
        None => Err(Error::InvalidArgument("empty batch".into())),
    }
}

/// Runs the plain codec and returns the classifier input plus the decoded image.
fn codec_input(img: &ImageRgb, ct: &ColorTransform, kernels: &CompressionKernels, mode: InputMode) -> Result<(CachedInput, ImageRgb, crate::jpeg::EncodedImage)> {
    let enc = encode_pipeline(img, ct, kernels)?;
    let dec = decode_pipeline(&enc, ct, kernels);
    let input = match mode {
        InputMode::Pixel => CachedInput::Pixels(dec.clone()),
        InputMode::Dct => {
            let deq = [0, 1, 2].map(|c| dequantize(&enc.grids[c], &kernels.q[c].clone().try_into().expect("64 entries")));
            CachedInput::Coefficients(CoeffMaps::from_grids(&deq))
        }
    };
    Ok((input, dec, enc))
}

pub fn classifier_inputs(
    images: &[ImageRgb],
    ct: &ColorTransform,
    kernels: &CompressionKernels,
    mode: InputMode,
) -> Result<Vec<CachedInput>> {
    images.iter().map(|i| codec_input(i, ct, kernels, mode).map(|r| r.0)).collect()
}

/// Logits for `inputs`, row-major `[n, classes]`.
pub fn predict_logits(net: &Classifier, inputs: &[CachedInput], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(inputs.len() * net.config.num_classes);
    let refs: Vec<&CachedInput> = inputs.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        out.extend(net.predict(|t| cached_batch(t, chunk))?);
    }
    Ok(out)
}

/// Validation metrics for one codec/classifier pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalBundle {
    pub top1: f64,
    pub topk: Option<(usize, f64)>,
    /// Mean over images; infinite if any image is reproduced exactly.
    pub psnr: f64,
    pub ssim: f64,
    pub mean_kb: f64,
    pub rate: RateReport,
}

/// Settings that shape an evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub rate_sample: usize,
    pub seed: u64,
    pub topk: Option<usize>,
    pub batch_size: usize,
}

impl EvalSettings {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self { rate_sample: cfg.rate_sample, seed: cfg.seed, topk: cfg.topk, batch_size: cfg.batch_size }
    }
}

/// Huffman tables are fitted on a sample of the training split, then the
/// validation split is coded, decoded and classified.
pub fn evaluate(
    net: &Classifier,
    kernels: &CompressionKernels,
    ct: &ColorTransform,
    split: &Split,
    s: &EvalSettings,
) -> Result<EvalBundle> {
    if split.test.is_empty() {
        return Err(Error::EmptyCorpus("validation split has no images".into()));
    }
    let codec = build_huffman_tables(&split.train.images, ct, kernels, s.rate_sample, s.seed)?;
    let mut inputs = Vec::with_capacity(split.test.len());
    let mut encoded = Vec::with_capacity(split.test.len());
    let (mut psnr, mut ssim) = (0.0, 0.0);
    for img in &split.test.images {
        let (input, dec, enc) = codec_input(img, ct, kernels, net.config.input_mode)?;
        psnr += metrics::psnr(img, &dec)?;
        ssim += metrics::ssim(img, &dec)?;
        inputs.push(input);
        encoded.push(enc);
    }
    let n = split.test.len() as f64;
    let rate = measure_encoded(&encoded, &codec)?;
    let logits = predict_logits(net, &inputs, s.batch_size)?;
    let classes = net.config.num_classes;
    let top1 = metrics::topk_accuracy(&logits, classes, &split.test.labels, 1)?;
    let topk = match s.topk {
        Some(k) => Some((k, metrics::topk_accuracy(&logits, classes, &split.test.labels, k.min(classes))?)),
        None => None,
    };
    Ok(EvalBundle { top1, topk, psnr: psnr / n, ssim: ssim / n, mean_kb: rate.mean_kb(), rate })
}

/// Scales `grads` so their joint ℓ2 norm is at most `max_norm`; returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

struct EpochStats {
    loss: f64,
    cla: f64,
    quan: f64,
    correct: usize,
    seen: usize,
}

impl EpochStats {
    fn new() -> Self {
        Self { loss: 0.0, cla: 0.0, quan: 0.0, correct: 0, seen: 0 }
    }

    fn add(&mut self, tape: &Tape, logits: Var, labels: &[usize], cla: f64, quan: f64, loss: f64) {
        let b = labels.len();
        let (lv, classes) = (tape.value(logits).data(), tape.shape(logits)[1]);
        for (i, &l) in labels.iter().enumerate() {
            let row = &lv[i * classes..(i + 1) * classes];
            let arg = row.iter().enumerate().fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            self.correct += (arg == l) as usize;
        }
        self.loss += loss * b as f64;
        self.cla += cla * b as f64;
        self.quan += quan * b as f64;
        self.seen += b;
    }

    fn row(&self, alternation: usize, epoch: usize, phase: Phase, lr: f64) -> HistoryRow {
        let n = self.seen.max(1) as f64;
        HistoryRow {
            lr: Some(lr),
            loss: Some(self.loss / n),
            cla_loss: Some(self.cla / n),
            quan_loss: Some(self.quan / n),
            train_acc: Some(self.correct as f64 / n),
            ..HistoryRow::new(alternation, epoch, phase)
        }
    }
}

fn check_loss(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} loss is {v}")))
    }
}

/// Drives a training run over a fixed split.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a Split,
    state: TrainState,
    rng: ChaCha8Rng,
    /// Unquantized coefficients of the training images under the current colour transform.
    coeff_cache: Option<Vec<CoeffMaps>>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, data: &'a Split) -> Result<Self> {
        let cfg = cfg.resolved()?;
        check_data(&cfg, data)?;
        let classifier = Classifier::new(cfg.classifier.clone())?;
        let kernels = cfg.initial_kernels()?;
        let color = ColorTransform { trainable: cfg.train_color, ..ColorTransform::jpeg() };
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let state = TrainState {
            adam_classifier: AdamState::new(&classifier.tensors()),
            adam_kernels: AdamState::new(&kernel_tensors(&kernels).iter().collect::<Vec<_>>()),
            adam_color: AdamState::new(&color_tensors(&color).iter().collect::<Vec<_>>()),
            classifier,
            kernels,
            color,
            position: 0,
            epoch: 0,
            rng: RngState::capture(cfg.seed, &rng),
            history: Vec::new(),
        };
        Ok(Self { cfg, data, state, rng, coeff_cache: None })
    }

    /// Continues from `ck`; `cfg` must hash to the checkpoint's config.
    pub fn resume(ck: Checkpoint, cfg: &TrainConfig, data: &'a Split) -> Result<Self> {
        let cfg = cfg.resolved()?;
        if cfg.hash() != ck.config_hash {
            return Err(Error::Checkpoint("config hash differs from the checkpoint".into()));
        }
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format tag {:?}", ck.format)));
        }
        check_data(&cfg, data)?;
        let rng = ck.state.rng.restore()?;
        Ok(Self { cfg, data, state: ck.state, rng, coeff_cache: None })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.state.history
    }

    pub fn is_finished(&self) -> bool {
        self.state.position >= self.cfg.rounds()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut state = self.state.clone();
        state.rng = RngState::capture(self.cfg.seed, &self.rng);
        Checkpoint { format: CHECKPOINT_FORMAT.into(), config_hash: self.cfg.hash(), config: self.cfg.clone(), state }
    }

    /// Runs every remaining round.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.cfg.rounds())
    }

    /// Runs rounds until `position` have completed. On error the state rolls
    /// back to the start of the failing round.
    pub fn run_until(&mut self, position: usize) -> Result<()> {
        while self.state.position < position.min(self.cfg.rounds()) {
            let (snapshot, rng) = (self.state.clone(), self.rng.clone());
            if let Err(e) = self.round() {
                self.state = snapshot;
                self.rng = rng;
                self.coeff_cache = None;
                return Err(e);
            }
        }
        Ok(())
    }

    fn round(&mut self) -> Result<()> {
        let r = self.state.position;
        match self.cfg.mode {
            TrainMode::Alternating | TrainMode::Baseline => {
                for _ in 0..self.cfg.classifier_epochs {
                    self.classifier_epoch()?;
                }
                if self.cfg.lr_kernels > 0.0 || (self.cfg.train_color && self.cfg.lr_color > 0.0) {
                    for _ in 0..self.cfg.kernel_epochs {
                        self.kernel_epoch()?;
                    }
                }
            }
            TrainMode::Joint => self.joint_epoch()?,
        }
        let ev = self.evaluate()?;
        let mut row = HistoryRow::new(r, self.state.epoch, Phase::Eval);
        row.quan_loss = Some(penalty_value(&self.state.kernels, &self.cfg.loss));
        row.val_acc = Some(ev.top1);
        row.mean_kb = finite(ev.mean_kb);
        row.psnr = finite(ev.psnr);
        row.ssim = finite(ev.ssim);
        self.state.history.push(row);
        self.state.position += 1;
        Ok(())
    }

    pub fn evaluate(&self) -> Result<EvalBundle> {
        evaluate(&self.state.classifier, &self.state.kernels, &self.state.color, self.data, &EvalSettings::from_config(&self.cfg))
    }

    fn order(&mut self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.data.train.len()).collect();
        idx.shuffle(&mut self.rng);
        idx
    }

    fn labels(&self, batch: &[usize]) -> Vec<usize> {
        batch.iter().map(|&i| self.data.train.labels[i]).collect()
    }

    fn classifier_epoch(&mut self) -> Result<()> {
        let train = &self.data.train;
        let inputs = classifier_inputs(&train.images, &self.state.color, &self.state.kernels, self.cfg.classifier.input_mode)?;
        let quan = penalty_value(&self.state.kernels, &self.cfg.loss);
        let lr = lr_at(self.cfg.lr_classifier, &self.cfg.schedule, self.state.position);
        let mut stats = EpochStats::new();
        for batch in self.order().chunks(self.cfg.batch_size) {
            let labels = self.labels(batch);
            let items: Vec<&CachedInput> = batch.iter().map(|&i| &inputs[i]).collect();
            let mut tape = Tape::new();
            let p = self.state.classifier.bind(&mut tape, true);
            let x = cached_batch(&mut tape, &items)?;
            let logits = self.state.classifier.forward(&mut tape, &p, x)?;
            let cla = losses::cross_entropy(&mut tape, logits, &labels)?;
            let cla_v = tape.value(cla).item();
            check_loss(cla_v, "classifier")?;
            let grads = tape.backward(cla)?;
            if lr > 0.0 {
                let g: Vec<Tensor> = p.vars.iter().map(|&v| grads.get(v)).collect();
                let mut params = self.state.classifier.tensors_mut();
                self.state.adam_classifier.step(&mut params, &g.iter().collect::<Vec<_>>(), lr)?;
            }
            stats.add(&tape, logits, &labels, cla_v, quan, cla_v + self.cfg.loss.lambda * quan);
        }
        self.state.history.push(stats.row(self.state.position, self.state.epoch, Phase::Classifier, lr));
        self.state.epoch += 1;
        Ok(())
    }

    fn coefficients(&mut self) -> Result<&[CoeffMaps]> {
        if self.coeff_cache.is_none() {
            let ct = &self.state.color;
            let maps = self.data.train.images.iter().map(|i| CoeffMaps::of_image(i, ct)).collect::<Result<_>>()?;
            self.coeff_cache = Some(maps);
        }
        Ok(self.coeff_cache.as_deref().expect("filled above"))
    }

    /// Records codec + classifier for one batch; returns (logits, cla, quan, total).
    fn codec_forward(
        &mut self,
        tape: &mut Tape,
        batch: &[usize],
        kv: &KernelVars,
        cv: &ColorVars,
        classifier_trainable: bool,
    ) -> Result<(crate::classifier::BoundParams, Var, Var, Var, Var)> {
        let coeffs = if self.cfg.train_color {
            let imgs: Vec<&ImageRgb> = batch.iter().map(|&i| &self.data.train.images[i]).collect();
            let x = tape.constant(diff::image_batch(&imgs)?);
            diff::forward_transform(tape, x, cv)?
        } else {
            let cache = self.coefficients()?;
            let maps: Vec<&CoeffMaps> = batch.iter().map(|&i| &cache[i]).collect();
            diff::coeff_batch(tape, &maps)?
        };
        let fq = diff::quantize(tape, coeffs, kv)?;
        let deq = diff::dequantize(tape, fq, kv)?;
        let input = match self.cfg.classifier.input_mode {
            InputMode::Dct => ClassifierInput::Coefficients(deq),
            InputMode::Pixel => ClassifierInput::Pixels(diff::reconstruct(tape, deq, cv)?),
        };
        let p = self.state.classifier.bind(tape, classifier_trainable);
        let logits = self.state.classifier.forward(tape, &p, input)?;
        let labels = self.labels(batch);
        let cla = losses::cross_entropy(tape, logits, &labels)?;
        let quan = losses::quan_penalty(tape, kv, &self.cfg.loss)?;
        let total = losses::total_loss(tape, cla, quan, &self.cfg.loss)?;
        Ok((p, logits, cla, quan, total))
    }

    /// Clips and applies codec gradients, then projects the kernels.
    fn codec_step(&mut self, grads: &crate::engine::Gradients, kv: &KernelVars, cv: &ColorVars, lr_k: f64, lr_c: f64) -> Result<()> {
        let train_color = self.cfg.train_color && lr_c > 0.0;
        let mut g: Vec<Tensor> = kv.q.iter().map(|&v| grads.get(v)).collect();
        if train_color {
            g.extend([cv.forward, cv.forward_offset, cv.inverse, cv.inverse_offset].map(|v| grads.get(v)));
        }
        clip_global_norm(&mut g, self.cfg.clip_norm);
        if lr_k > 0.0 {
            let mut kt = kernel_tensors(&self.state.kernels);
            let mut params: Vec<&mut Tensor> = kt.iter_mut().collect();
            self.state.adam_kernels.step(&mut params, &g[..3].iter().collect::<Vec<_>>(), lr_k)?;
            for (dst, src) in self.state.kernels.q.iter_mut().zip(kt) {
                *dst = src.into_data();
            }
            self.state.kernels.project();
        }
        if train_color {
            let mut ctens = color_tensors(&self.state.color);
            let mut params: Vec<&mut Tensor> = ctens.iter_mut().collect();
            self.state.adam_color.step(&mut params, &g[3..].iter().collect::<Vec<_>>(), lr_c)?;
            let d = |t: &Tensor| t.data().to_vec();
            let (f, fo, i, io) = (d(&ctens[0]), d(&ctens[1]), d(&ctens[2]), d(&ctens[3]));
            let c = &mut self.state.color;
            c.forward = [[f[0], f[1], f[2]], [f[3], f[4], f[5]], [f[6], f[7], f[8]]];
            c.forward_offset = [fo[0], fo[1], fo[2]];
            c.inverse = [[i[0], i[1], i[2]], [i[3], i[4], i[5]], [i[6], i[7], i[8]]];
            c.inverse_offset = [io[0], io[1], io[2]];
            self.coeff_cache = None;
        }
        Ok(())
    }

    fn kernel_epoch(&mut self) -> Result<()> {
        let lr_k = lr_at(self.cfg.lr_kernels, &self.cfg.schedule, self.state.position);
        let lr_c = lr_at(self.cfg.lr_color, &self.cfg.schedule, self.state.position);
        let mut stats = EpochStats::new();
        for batch in self.order().chunks(self.cfg.batch_size) {
            let mut tape = Tape::new();
            let kv = KernelVars::new(&mut tape, &self.state.kernels, lr_k > 0.0);
            let cv = ColorVars::new(&mut tape, &self.state.color, self.cfg.train_color && lr_c > 0.0);
            let (_, logits, cla, quan, total) = self.codec_forward(&mut tape, batch, &kv, &cv, false)?;
            let (cla_v, quan_v, total_v) = (tape.value(cla).item(), tape.value(quan).item(), tape.value(total).item());
            check_loss(total_v, "kernel phase")?;
            let grads = tape.backward(total)?;
            self.codec_step(&grads, &kv, &cv, lr_k, lr_c)?;
            stats.add(&tape, logits, &self.labels(batch), cla_v, quan_v, total_v);
        }
        self.state.history.push(stats.row(self.state.position, self.state.epoch, Phase::Kernel, lr_k));
        self.state.epoch += 1;
        Ok(())
    }

    fn joint_epoch(&mut self) -> Result<()> {
        let pos = self.state.position;
        let lr_cls = lr_at(self.cfg.lr_classifier, &self.cfg.schedule, pos);
        let lr_k = lr_at(self.cfg.lr_kernels, &self.cfg.schedule, pos);
        let lr_c = lr_at(self.cfg.lr_color, &self.cfg.schedule, pos);
        let mut stats = EpochStats::new();
        for batch in self.order().chunks(self.cfg.batch_size) {
            let mut tape = Tape::new();
            let kv = KernelVars::new(&mut tape, &self.state.kernels, lr_k > 0.0);
            let cv = ColorVars::new(&mut tape, &self.state.color, self.cfg.train_color && lr_c > 0.0);
            let (p, logits, cla, quan, total) = self.codec_forward(&mut tape, batch, &kv, &cv, lr_cls > 0.0)?;
            let (cla_v, quan_v, total_v) = (tape.value(cla).item(), tape.value(quan).item(), tape.value(total).item());
            check_loss(total_v, "joint")?;
            let grads = tape.backward(total)?;
            if lr_cls > 0.0 {
                let g: Vec<Tensor> = p.vars.iter().map(|&v| grads.get(v)).collect();
                let mut params = self.state.classifier.tensors_mut();
                self.state.adam_classifier.step(&mut params, &g.iter().collect::<Vec<_>>(), lr_cls)?;
            }
            self.codec_step(&grads, &kv, &cv, lr_k, lr_c)?;
            stats.add(&tape, logits, &self.labels(batch), cla_v, quan_v, total_v);
        }
        self.state.history.push(stats.row(pos, self.state.epoch, Phase::Joint, lr_cls));
        self.state.epoch += 1;
        Ok(())
    }
}

fn check_data(cfg: &TrainConfig, data: &Split) -> Result<()> {
    if data.train.is_empty() {
        return Err(Error::EmptyCorpus("training split has no images".into()));
    }
    let want = cfg.classifier.num_classes;
    for (name, d) in [("train", &data.train), ("test", &data.test)] {
        if d.num_classes > want {
            return Err(Error::Config(format!("{name} split has {} classes, classifier has {want}", d.num_classes)));
        }
        uniform_size(d, name)?;
    }
    Ok(())
}

fn uniform_size(d: &Dataset, name: &str) -> Result<()> {
    if let Some(first) = d.images.first() {
        let dims = (first.width(), first.height());
        if d.images.iter().any(|i| (i.width(), i.height()) != dims) {
            return Err(Error::InvalidArgument(format!("{name} split mixes image sizes")));
        }
        if dims.0 % crate::jpeg::MACROBLOCK != 0 || dims.1 % crate::jpeg::MACROBLOCK != 0 {
            return Err(Error::InvalidArgument(format!(
                "training images must be multiples of {} pixels, got {}x{}",
                crate::jpeg::MACROBLOCK,
                dims.0,
                dims.1
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ingest_dataset, DatasetSpec};

    #[test]
    fn lr_schedule_examples() {
        let s = Schedule { milestones: vec![50, 100], scales: vec![0.1, 0.01] };
        assert_eq!(lr_at(0.05, &s, 10), 0.05);
        assert!((lr_at(0.05, &s, 50) - 0.005).abs() < 1e-15);
        assert!((lr_at(0.05, &s, 149) - 0.0005).abs() < 1e-15);
        let j = Schedule { milestones: vec![30, 60, 80], scales: vec![0.1, 0.01, 0.001] };
        assert!((lr_at(1e-3, &j, 29) / lr_at(1e-3, &j, 30) - 10.0).abs() < 1e-9);
        assert!(Schedule { milestones: vec![5, 5], scales: vec![0.1, 0.1] }.validate().is_err());
    }

    #[test]
    fn baseline_forces_zero_codec_rates() {
        let cfg = TrainConfig { mode: TrainMode::Baseline, ..Default::default() }.resolved().unwrap();
        assert_eq!((cfg.lr_kernels, cfg.lr_color, cfg.quality), (0.0, 0.0, Some(50.0)));
    }

    #[test]
    fn clipping_scales_to_norm() {
        let mut g = vec![Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(), Tensor::new(vec![1], vec![0.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12);
    }

    fn tiny(mode: TrainMode) -> (TrainConfig, Split) {
        let split = ingest_dataset(&DatasetSpec::synthetic(4, 40, 20, 3)).unwrap();
        let cfg = TrainConfig {
            mode,
            alternations: 1,
            epochs: 1,
            batch_size: 20,
            rate_sample: 20,
            classifier: ClassifierConfig {
                input_mode: InputMode::Dct,
                num_classes: 4,
                base_width: 4,
                groups: 1,
                blocks_per_group: 1,
                dct_branch_width: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        (cfg, split)
    }

    #[test]
    fn classifier_phase_freezes_kernels() {
        let (cfg, split) = tiny(TrainMode::Alternating);
        let mut t = Trainer::new(&TrainConfig { kernel_epochs: 0, ..cfg }, &split).unwrap();
        let before = t.state().kernels.clone();
        t.run().unwrap();
        assert_eq!(t.state().kernels, before);
        assert_eq!(t.history().len(), 3);
    }

    #[test]
    fn kernel_phase_projects() {
        let (cfg, split) = tiny(TrainMode::Alternating);
        let mut t = Trainer::new(&TrainConfig { lr_kernels: 0.5, ..cfg }, &split).unwrap();
        let net_before = t.state().classifier.clone();
        t.kernel_epoch().unwrap();
        assert_eq!(t.state().classifier, net_before);
        assert!(t.state().kernels.iter().all(|q| (0.0..=1.0).contains(&q)));
        assert_ne!(t.state().kernels, CompressionKernels::ones());
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let (cfg, split) = tiny(TrainMode::Joint);
        let mut t = Trainer::new(&cfg, &split).unwrap();
        t.run().unwrap();
        let a = t.checkpoint().to_json().unwrap();
        let b = Checkpoint::from_json(&a).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let other = TrainConfig { seed: 9, ..cfg };
        assert!(Trainer::resume(Checkpoint::from_json(&a).unwrap(), &other, &split).is_err());
    }

    #[test]
    fn lossless_kernels_reconstruct_best() {
        let (cfg, split) = tiny(TrainMode::Alternating);
        let net = Classifier::new(cfg.classifier.clone()).unwrap();
        let s = EvalSettings::from_config(&cfg);
        let ct = ColorTransform::jpeg();
        let ones = evaluate(&net, &CompressionKernels::ones(), &ct, &split, &s).unwrap();
        let half = evaluate(&net, &CompressionKernels::filled(0.5), &ct, &split, &s).unwrap();
        assert!(ones.psnr > half.psnr);
        assert_eq!(ones, evaluate(&net, &CompressionKernels::ones(), &ct, &split, &s).unwrap());
    }
}
