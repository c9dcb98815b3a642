//! Data preparation and the joint softmax + center-loss training loop.

use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{GroundTruth, HyperCube, Role, SplitMask};
use crate::error::{Error, Result};
use crate::losses::{self, RunningCenters};
use crate::nncore::{self, gather_rows, Mode, Network};

/// Closed interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidArgument(format!("empty interval [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormalizationMode {
    PerBand,
    Global,
}

impl FromStr for NormalizationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_band" | "per-band" => Ok(Self::PerBand),
            "global" => Ok(Self::Global),
            other => Err(Error::Config(format!("unknown normalization {other:?}"))),
        }
    }
}

impl std::fmt::Display for NormalizationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PerBand => "per_band",
            Self::Global => "global",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_every: usize,
    pub decay_multiplier: f64,
    pub max_batches: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub dropout_ratio: f64,
    pub virtual_per_class: usize,
    pub real_per_class: usize,
    pub q_range: Interval,
    pub seed: u64,
    /// Hidden widths; the last one is the feature layer.
    pub hidden: Vec<usize>,
    pub normalization: NormalizationMode,
    pub trace_every: usize,
    /// Stop after this many trace checkpoints without a new best joint loss; 0 disables.
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            lr0: 0.01,
            decay_every: 20_000,
            decay_multiplier: 0.1f64.sqrt(),
            max_batches: 60_000,
            lambda: losses::DEFAULT_LAMBDA,
            alpha: losses::DEFAULT_ALPHA,
            dropout_ratio: 0.3,
            virtual_per_class: 80_000,
            real_per_class: 200,
            q_range: Interval { lo: -1.0, hi: 2.0 },
            seed: 0,
            hidden: vec![512, 256, 32],
            normalization: NormalizationMode::PerBand,
            trace_every: 100,
            early_stop_patience: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .trim_matches(|c| c == '[' || c == ']')
        .split(',')
        .map(|v| parse(key, v.trim()))
        .collect()
}

impl TrainConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr0" => self.lr0 = parse(key, value)?,
            "decay_every" => self.decay_every = parse(key, value)?,
            "decay_multiplier" => self.decay_multiplier = parse(key, value)?,
            "max_batches" => self.max_batches = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "dropout_ratio" => self.dropout_ratio = parse(key, value)?,
            "virtual_per_class" => self.virtual_per_class = parse(key, value)?,
            "real_per_class" => self.real_per_class = parse(key, value)?,
            "q_range" => {
                let v: Vec<f64> = parse_list(key, value)?;
                if v.len() != 2 {
                    return Err(Error::Config("q_range needs two values".into()));
                }
                self.q_range = Interval::new(v[0], v[1]).map_err(|e| Error::Config(e.to_string()))?;
            }
            "seed" => self.seed = parse(key, value)?,
            "hidden" => self.hidden = parse_list(key, value)?,
            "normalization" => self.normalization = value.parse()?,
            "trace_every" => self.trace_every = parse(key, value)?,
            "early_stop_patience" => self.early_stop_patience = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if self.decay_every == 0 {
            return bad("decay_every must be positive");
        }
        if !(self.decay_multiplier > 0.0 && self.decay_multiplier <= 1.0) {
            return bad("decay_multiplier must be in (0, 1]");
        }
        if self.max_batches == 0 {
            return bad("max_batches must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.dropout_ratio) {
            return bad("dropout_ratio must be in [0, 1)");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if self.trace_every == 0 {
            return bad("trace_every must be positive");
        }
        Ok(())
    }

    /// Renders every key in the format read by [`TrainConfig::from_kv_str`].
    pub fn to_kv_string(&self) -> String {
        let hidden = self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr0 = {}", self.lr0);
        let _ = writeln!(s, "decay_every = {}", self.decay_every);
        let _ = writeln!(s, "decay_multiplier = {}", self.decay_multiplier);
        let _ = writeln!(s, "max_batches = {}", self.max_batches);
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "dropout_ratio = {}", self.dropout_ratio);
        let _ = writeln!(s, "virtual_per_class = {}", self.virtual_per_class);
        let _ = writeln!(s, "real_per_class = {}", self.real_per_class);
        let _ = writeln!(s, "q_range = {}, {}", self.q_range.lo, self.q_range.hi);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "hidden = {hidden}");
        let _ = writeln!(s, "normalization = {}", self.normalization);
        let _ = writeln!(s, "trace_every = {}", self.trace_every);
        let _ = writeln!(s, "early_stop_patience = {}", self.early_stop_patience);
        s
    }
}

/// `lr0 · decay_multiplier^⌊batch_index / decay_every⌋`
pub fn lr_at(config: &TrainConfig, batch_index: usize) -> f64 {
    let steps = batch_index / config.decay_every.max(1);
    config.lr0 * config.decay_multiplier.powi(steps.min(i32::MAX as usize) as i32)
}

/// Statistics needed to undo [`normalize_cube`].
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationStats {
    pub mode: NormalizationMode,
    /// Per-band means (the global mean repeated in global mode).
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl NormalizationStats {
    /// `(v − mean) / std` with these statistics.
    pub fn apply(&self, cube: &HyperCube) -> Result<HyperCube> {
        if cube.bands() != self.means.len() || self.stds.len() != self.means.len() {
            return Err(Error::shape("band count", self.means.len(), cube.bands()));
        }
        if let Some(band) = self.stds.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::ZeroVariance { band });
        }
        let l = cube.bands();
        let values = cube
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.means[i % l]) / self.stds[i % l])
            .collect();
        HyperCube::new(cube.height(), cube.width(), l, values)
    }

    pub fn denormalize(&self, cube: &HyperCube) -> Result<HyperCube> {
        if cube.bands() != self.means.len() {
            return Err(Error::shape("band count", self.means.len(), cube.bands()));
        }
        let l = cube.bands();
        let values = cube
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * self.stds[i % l] + self.means[i % l])
            .collect();
        HyperCube::new(cube.height(), cube.width(), l, values)
    }
}

/// Zero mean, unit (population) variance, per band or over the whole image.
pub fn normalize_cube(cube: &HyperCube, mode: NormalizationMode) -> Result<(HyperCube, NormalizationStats)> {
    let l = cube.bands();
    let n = cube.num_pixels() as f64;
    let (means, stds) = match mode {
        NormalizationMode::PerBand => {
            let mut means = vec![0.0; l];
            for p in 0..cube.num_pixels() {
                for (m, v) in means.iter_mut().zip(cube.spectrum(p)) {
                    *m += v;
                }
            }
            means.iter_mut().for_each(|m| *m /= n);
            let mut vars = vec![0.0; l];
            for p in 0..cube.num_pixels() {
                for ((s, v), m) in vars.iter_mut().zip(cube.spectrum(p)).zip(&means) {
                    *s += (v - m).powi(2);
                }
            }
            let stds: Vec<f64> = vars.into_iter().map(|s| (s / n).sqrt()).collect();
            if let Some(band) = stds.iter().position(|&s| s == 0.0) {
                return Err(Error::ZeroVariance { band });
            }
            (means, stds)
        }
        NormalizationMode::Global => {
            let total = cube.values().len() as f64;
            let mean = cube.values().iter().sum::<f64>() / total;
            let var = cube.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / total;
            if var == 0.0 {
                return Err(Error::InvalidArgument("cube has zero variance".into()));
            }
            (vec![mean; l], vec![var.sqrt(); l])
        }
    };
    let stats = NormalizationStats { mode, means, stds };
    Ok((stats.apply(cube)?, stats))
}

/// Marks `per_class` random labeled pixels of every class as Train and the
/// remaining labeled pixels as Test.
pub fn split_train_test(gt: &GroundTruth, per_class: usize, seed: u64) -> Result<SplitMask> {
    if gt.num_labeled() == 0 {
        return Err(Error::InvalidArgument("groundtruth has no labeled pixels".into()));
    }
    let k = gt.num_classes();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (p, &l) in gt.labels().iter().enumerate() {
        if l != 0 {
            members[l as usize - 1].push(p);
        }
    }
    let mut roles: Vec<Role> = gt
        .labels()
        .iter()
        .map(|&l| if l == 0 { Role::Neither } else { Role::Test })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (class, pixels) in members.iter().enumerate() {
        if pixels.len() < per_class {
            return Err(Error::ClassTooSmall {
                class: class + 1,
                available: pixels.len(),
                required: per_class,
            });
        }
        for i in index::sample(&mut rng, pixels.len(), per_class) {
            roles[pixels[i]] = Role::Train;
        }
    }
    SplitMask::new(gt.height(), gt.width(), roles)
}

/// Spectra with 1-based labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl SampleSet {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::shape("sample labels", inputs.nrows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l > num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside 1..={num_classes}")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    /// Pixels with the given role, in row-major order.
    pub fn from_mask(cube: &HyperCube, gt: &GroundTruth, mask: &SplitMask, role: Role) -> Result<Self> {
        mask.check_against(gt)?;
        if (cube.height(), cube.width()) != (gt.height(), gt.width()) {
            return Err(Error::shape(
                "cube vs groundtruth",
                format!("{}x{}", gt.height(), gt.width()),
                format!("{}x{}", cube.height(), cube.width()),
            ));
        }
        let pixels: Vec<usize> = (0..cube.num_pixels()).filter(|&p| mask.roles()[p] == role).collect();
        let mut inputs = Array2::zeros((pixels.len(), cube.bands()));
        for (mut row, &p) in inputs.outer_iter_mut().zip(&pixels) {
            row.as_slice_mut().unwrap().copy_from_slice(cube.spectrum(p));
        }
        let labels = pixels.iter().map(|&p| gt.labels()[p] as usize).collect();
        Self::new(inputs, labels, gt.num_classes())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn bands(&self) -> usize {
        self.inputs.ncols()
    }

    /// Row indices of each class, index `k-1` for class `k`.
    pub fn class_rows(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            rows[l - 1].push(i);
        }
        rows
    }

    pub fn concat(&self, other: &SampleSet) -> Result<SampleSet> {
        if self.bands() != other.bands() || self.num_classes != other.num_classes {
            return Err(Error::InvalidArgument("sample sets are not compatible".into()));
        }
        let inputs = ndarray::concatenate(ndarray::Axis(0), &[self.inputs.view(), other.inputs.view()])
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let labels = self.labels.iter().chain(&other.labels).copied().collect();
        SampleSet::new(inputs, labels, self.num_classes)
    }
}

/// `count_per_class` samples `q·x₁ + (1−q)·x₂` per class, with `(x₁, x₂)` an
/// ordered pair of distinct same-class samples and `q ~ U(q_range)`.
pub fn make_virtual_samples(
    train: &SampleSet,
    count_per_class: usize,
    q_range: Interval,
    seed: u64,
) -> Result<SampleSet> {
    let rows = train.class_rows();
    if count_per_class > 0 {
        if let Some((k, r)) = rows.iter().enumerate().find(|(_, r)| r.len() < 2) {
            return Err(Error::ClassTooSmall {
                class: k + 1,
                available: r.len(),
                required: 2,
            });
        }
    }
    let total = count_per_class
        .checked_mul(train.num_classes)
        .ok_or(Error::DimensionOverflow)?;
    let l = train.bands();
    let mut inputs = Array2::zeros((total, l));
    let mut labels = Vec::with_capacity(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out_rows = inputs.outer_iter_mut();
    for (k, members) in rows.iter().enumerate() {
        for _ in 0..count_per_class {
            let a = rng.random_range(0..members.len());
            let mut b = rng.random_range(0..members.len() - 1);
            if b >= a {
                b += 1;
            }
            let q = q_range.lo + (q_range.hi - q_range.lo) * rng.random::<f64>();
            let x1 = train.inputs.row(members[a]);
            let x2 = train.inputs.row(members[b]);
            let mut dst = out_rows.next().unwrap();
            for ((d, &u), &v) in dst.iter_mut().zip(x1).zip(x2) {
                *d = q * u + (1.0 - q) * v;
            }
            labels.push(k + 1);
        }
    }
    SampleSet::new(inputs, labels, train.num_classes)
}

/// Shuffle-without-replacement mini-batch indices; a fresh permutation is
/// drawn at every epoch boundary and the last batch of an epoch may be short.
pub struct EpochBatcher {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl EpochBatcher {
    pub fn new(num_samples: usize, batch_size: usize, rng: ChaCha8Rng) -> Result<Self> {
        if num_samples == 0 || batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batcher needs samples and a positive batch size".into(),
            ));
        }
        let mut b = Self {
            order: (0..num_samples).collect(),
            pos: num_samples,
            batch_size,
            rng,
        };
        b.reshuffle();
        Ok(b)
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.pos >= self.order.len() {
            self.reshuffle();
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let start = self.pos;
        self.pos = end;
        &self.order[start..end]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub ls: f64,
    pub lc: f64,
    pub joint: f64,
    pub acc: f64,
    pub dmin2: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainingTrace {
    pub const CSV_HEADER: &'static str = "iter,ls,lc,joint,acc,dmin2,ratio";

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.iter, r.ls, r.lc, r.joint, r.acc, r.dmin2, r.ratio
            );
        }
        s
    }
}

pub struct TrainOutcome {
    pub network: Network,
    pub centers: RunningCenters,
    pub trace: TrainingTrace,
}

/// Network layer sizes for `bands` inputs and `num_classes` outputs.
pub fn network_dims(config: &TrainConfig, bands: usize, num_classes: usize) -> Vec<usize> {
    std::iter::once(bands)
        .chain(config.hidden.iter().copied())
        .chain(std::iter::once(num_classes))
        .collect()
}

/// Mini-batch SGD on `L_S + λ·L_C`.
///
/// Per batch: train-mode forward, seed any class center seen for the first
/// time from the batch mean, joint loss and backward, SGD with the scheduled
/// rate, then the damped center update from the same (pre-step) features.
pub fn train_model(data: &SampleSet, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let dims = network_dims(config, data.bands(), data.num_classes);
    let mut network = nncore::init_network(&dims, config.seed)?.with_dropout(config.dropout_ratio)?;
    let mut centers = RunningCenters::new(data.num_classes, network.feature_size(), config.alpha)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(2);
    let mut batcher = EpochBatcher::new(data.len(), config.batch_size, shuffle_rng)?;
    let mut trace = TrainingTrace::default();
    let mut best = f64::INFINITY;
    let mut stale = 0;

    for b in 0..config.max_batches {
        let rows = batcher.next_batch().to_vec();
        let inputs = gather_rows(data.inputs.view(), &rows);
        let labels: Vec<usize> = rows.iter().map(|&r| data.labels[r]).collect();
        let step = train_step(
            &mut network,
            &mut centers,
            inputs.view(),
            &labels,
            config,
            lr_at(config, b),
            &mut dropout_rng,
        );
        let (report, acc) = match step {
            Ok(v) => v,
            Err(e) if e.is_divergence() => {
                return Err(Error::Diverged {
                    batch: b,
                    trace: Box::new(trace),
                })
            }
            Err(e) => return Err(e),
        };
        let iter = b + 1;
        if iter % config.trace_every == 0 || iter == config.max_batches {
            let dmin2 = centers.min_squared_distance();
            trace.records.push(TraceRecord {
                iter,
                ls: report.softmax_loss,
                lc: report.center_loss,
                joint: report.joint,
                acc,
                dmin2,
                ratio: 2.0 * report.center_loss / dmin2,
            });
            if config.early_stop_patience > 0 {
                if report.joint < best {
                    best = report.joint;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= config.early_stop_patience {
                        log::info!("early stop at batch {iter}");
                        break;
                    }
                }
            }
        }
    }
    Ok(TrainOutcome {
        network,
        centers,
        trace,
    })
}

fn train_step(
    network: &mut Network,
    centers: &mut RunningCenters,
    inputs: ArrayView2<'_, f64>,
    labels: &[usize],
    config: &TrainConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(losses::JointLossReport, f64)> {
    let trace = network.forward(inputs, Mode::Train(rng))?;
    centers.initialize_missing(trace.features().view(), labels)?;
    let loss = losses::joint_loss_from_trace(&trace, labels, centers, config.lambda)?;
    let r = loss.report;
    if !(r.joint.is_finite() && r.center_loss.is_finite()) {
        return Err(Error::NonFinite("joint loss"));
    }
    let grads = network.backward(&trace, loss.d_logits.view(), loss.d_features.view())?;
    network.sgd_step(&grads, lr)?;
    centers.update(trace.features().view(), labels)?;
    let acc = losses::batch_accuracy(trace.logits().view(), labels);
    Ok((r, acc))
}

/// `2·L_C / D²_min` over a whole sample set, using inference features and
/// the given centers.
pub fn discriminativity_ratio(network: &Network, centers: &RunningCenters, samples: &SampleSet) -> Result<f64> {
    let feats = network.features(samples.inputs.view())?;
    let lc = losses::center_loss(feats.view(), &samples.labels, centers)?;
    Ok(2.0 * lc.loss / centers.min_squared_distance())
}
