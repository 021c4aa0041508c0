//! Class-balanced loss, Adam with step decay, augmentation, and the
//! training loop.
//!
//! The loss is per-pixel cross-entropy where each class is weighted by the
//! inverse square root of its training-set frequency, reduced by mean over
//! every pixel of the batch. The learning rate starts at `lr0` and decays
//! by a fixed factor every `decay_every` optimizer steps. Augmentation
//! operates on point clouds before projection: an optional horizontal
//! flip, optional Gaussian coordinate noise, and a small random yaw
//! rotation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autolabel::ClassId;
use crate::nn::network::NetworkGrads;
use crate::nn::{NnError, Network, NetworkConfig, Tensor};
use crate::pointcloud::{flip_y, rotate_z, PointCloud};
use crate::projection::{GridImage, LabelGrid, ProjectionError, ViewSpec};

/// Standard deviation, in meters, of the augmentation coordinate noise.
pub const NOISE_SIGMA_M: f32 = 0.01;

/// Half-width of the augmentation yaw range, degrees.
pub const MAX_ROTATION_DEG: f32 = 5.0;

/// Errors from loss computation, optimization and the training loop.
#[derive(Debug)]
pub enum TrainingError {
    /// The dataset contains no samples.
    EmptyDataset,
    /// Operand shapes are incompatible.
    Shape(String),
    /// The loss left the finite range; carries the step index and the
    /// dataset indices of the offending batch.
    NonFiniteLoss { iteration: u64, samples: Vec<usize> },
    /// A config line uses a key that is not a TrainConfig field.
    UnknownKey(String),
    /// A config value failed to parse for the named key.
    BadValue { key: String },
    /// A config field violates its invariant.
    BadConfig(&'static str),
    /// Augmentation was requested but the dataset holds projected grids,
    /// not point clouds.
    AugmentNeedsClouds,
    Projection(ProjectionError),
    Nn(NnError),
}

impl std::fmt::Display for TrainingError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainingError::EmptyDataset => write!(f, "training dataset is empty"),
            TrainingError::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            TrainingError::NonFiniteLoss { iteration, samples } => write!(
                f,
                "non-finite loss at iteration {iteration} on batch of dataset samples {samples:?}"
            ),
            TrainingError::UnknownKey(key) => write!(f, "unknown config key {key:?}"),
            TrainingError::BadValue { key } => {
                write!(f, "config value for {key:?} failed to parse")
            }
            TrainingError::BadConfig(what) => write!(f, "invalid config: {what}"),
            TrainingError::AugmentNeedsClouds => write!(
                f,
                "augmentation operates on point clouds; disable it for pre-projected grids"
            ),
            TrainingError::Projection(e) => write!(f, "projection: {e}"),
            TrainingError::Nn(e) => write!(f, "network: {e}"),
        }
    }
}

impl std::error::Error for TrainingError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            TrainingError::Projection(e) => Some(e),
            TrainingError::Nn(e) => Some(e),
            _ => None,
        }
    }
}

impl From<ProjectionError> for TrainingError {
    fn from(e: ProjectionError) -> TrainingError {
        TrainingError::Projection(e)
    }
}

impl From<NnError> for TrainingError {
    fn from(e: NnError) -> TrainingError {
        TrainingError::Nn(e)
    }
}

// ---------------------------------------------------------------------------
// Class statistics and the weighted loss

/// Per-class point counts over a training set and the loss weights they
/// induce: `alpha_i = 1 / sqrt(f_i)` with `f_i` clamped to at least 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStats {
    f: [f64; ClassId::COUNT],
    alpha: [f64; ClassId::COUNT],
}

impl ClassStats {
    /// Builds stats from raw per-class counts, clamping each to >= 1.
    pub fn from_frequencies(raw: [f64; ClassId::COUNT]) -> ClassStats {
        let f = raw.map(|v| v.max(1.0));
        ClassStats {
            f,
            alpha: f.map(|v| 1.0 / v.sqrt()),
        }
    }

    /// Uniform weights (1, 1, 1): the unweighted cross-entropy.
    pub fn uniform() -> ClassStats {
        ClassStats {
            f: [1.0; ClassId::COUNT],
            alpha: [1.0; ClassId::COUNT],
        }
    }

    pub fn f(&self) -> [f64; ClassId::COUNT] {
        self.f
    }

    pub fn alpha(&self) -> [f64; ClassId::COUNT] {
        self.alpha
    }
}

/// Tallies class cells over label grids and derives the loss weights.
pub fn class_frequencies<'a, I>(grids: I) -> Result<ClassStats, TrainingError>
where
    I: IntoIterator<Item = &'a LabelGrid>,
{
    let mut counts = [0u64; ClassId::COUNT];
    let mut any = false;
    for grid in grids {
        any = true;
        for c in grid.data() {
            counts[c.as_index()] += 1;
        }
    }
    if !any {
        return Err(TrainingError::EmptyDataset);
    }
    Ok(ClassStats::from_frequencies(counts.map(|c| c as f64)))
}

/// Mean weighted cross-entropy over every pixel of the batch, and its
/// gradient with respect to the logits.
///
/// `logits` is [N, 3, H, W]; `labels` holds one HxW grid per batch sample.
/// The softmax and log run in f64 for stability; the returned gradient is
/// `alpha_c * (p_k - [k = c]) / (N*H*W)` per pixel with true class `c`.
pub fn weighted_ce_loss(
    logits: &Tensor,
    labels: &[LabelGrid],
    alpha: [f64; ClassId::COUNT],
) -> Result<(f64, Tensor), TrainingError> {
    let (n, c, h, w) = logits.dims4()?;
    if c != ClassId::COUNT {
        return Err(TrainingError::Shape(format!(
            "logits have {c} channels, expected {}",
            ClassId::COUNT
        )));
    }
    if labels.len() != n {
        return Err(TrainingError::Shape(format!(
            "{} label grids for a batch of {n}",
            labels.len()
        )));
    }
    for (i, grid) in labels.iter().enumerate() {
        if grid.height() != h || grid.width() != w {
            return Err(TrainingError::Shape(format!(
                "label grid {i} is {}x{}, logits are {h}x{w}",
                grid.height(),
                grid.width()
            )));
        }
    }
    let m = (n * h * w) as f64;
    let hw = h * w;
    let mut grad = Tensor::zeros(logits.dims());
    let mut total = 0.0f64;
    let data = logits.data();
    let gdata = grad.data_mut();
    for ni in 0..n {
        let grid = &labels[ni];
        for pix in 0..hw {
            let base = ni * c * hw + pix;
            let mut lmax = f64::NEG_INFINITY;
            for ch in 0..c {
                lmax = lmax.max(data[base + ch * hw] as f64);
            }
            let mut sum = 0.0f64;
            let mut exps = [0.0f64; ClassId::COUNT];
            for ch in 0..c {
                let e = ((data[base + ch * hw] as f64) - lmax).exp();
                exps[ch] = e;
                sum += e;
            }
            let t = grid.data()[pix].as_index();
            let a = alpha[t];
            // -ln p_t = ln(sum) - (l_t - lmax)
            total += a * (sum.ln() - ((data[base + t * hw] as f64) - lmax));
            for ch in 0..c {
                let p = exps[ch] / sum;
                let delta = if ch == t { 1.0 } else { 0.0 };
                gdata[base + ch * hw] = (a * (p - delta) / m) as f32;
            }
        }
    }
    Ok((total / m, grad))
}

/// Converts logits [N, 3, H, W] to per-sample label grids by channel
/// argmax; ties resolve to the lowest class id.
pub fn logits_to_labels(logits: &Tensor) -> Result<Vec<LabelGrid>, TrainingError> {
    let (n, c, h, w) = logits.dims4()?;
    if c != ClassId::COUNT {
        return Err(TrainingError::Shape(format!(
            "logits have {c} channels, expected {}",
            ClassId::COUNT
        )));
    }
    let hw = h * w;
    let data = logits.data();
    let mut out = Vec::with_capacity(n);
    for ni in 0..n {
        let mut grid = LabelGrid::background(h, w);
        for pix in 0..hw {
            let base = ni * c * hw + pix;
            let mut best = 0usize;
            let mut best_v = data[base];
            for ch in 1..c {
                let v = data[base + ch * hw];
                if v > best_v {
                    best_v = v;
                    best = ch;
                }
            }
            grid.set(pix / w, pix % w, ClassId::ALL[best]);
        }
        out.push(grid);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam moment constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> AdamHyper {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for every trainable tensor, plus the
/// step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    /// Zero moments shaped like the network's trainable tensors.
    pub fn new(net: &Network) -> AdamState {
        let shapes: Vec<Tensor> = net
            .trainable()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.dims()))
            .collect();
        AdamState {
            m: shapes.clone(),
            v: shapes,
            t: 0,
        }
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.t
    }
}

/// Bias-corrected Adam update of one parameter slice.
fn adam_update(
    p: &mut [f32],
    g: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    lr: f64,
    hyper: AdamHyper,
    t: u64,
) {
    let c1 = 1.0 / (1.0 - hyper.beta1.powi(t as i32));
    let c2 = 1.0 / (1.0 - hyper.beta2.powi(t as i32));
    for i in 0..p.len() {
        let gi = g[i] as f64;
        let mi = hyper.beta1 * m[i] as f64 + (1.0 - hyper.beta1) * gi;
        let vi = hyper.beta2 * v[i] as f64 + (1.0 - hyper.beta2) * gi * gi;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let mhat = mi * c1;
        let vhat = vi * c2;
        p[i] -= (lr * mhat / (vhat.sqrt() + hyper.eps)) as f32;
    }
}

/// One Adam step over every trainable tensor of the network.
pub fn adam_step(
    net: &mut Network,
    grads: &NetworkGrads,
    state: &mut AdamState,
    lr: f64,
    hyper: AdamHyper,
) -> Result<(), TrainingError> {
    let gs = grads.trainable();
    {
        let params = net.trainable();
        if params.len() != gs.len() || params.len() != state.m.len() {
            return Err(TrainingError::Shape(format!(
                "adam: {} params, {} grads, {} moment pairs",
                params.len(),
                gs.len(),
                state.m.len()
            )));
        }
        for (((name, p), (_, g)), m) in params.iter().zip(&gs).zip(&state.m) {
            if p.dims() != g.dims() || p.dims() != m.dims() {
                return Err(TrainingError::Shape(format!(
                    "adam: tensor {name} has inconsistent extents"
                )));
            }
        }
    }
    state.t += 1;
    let t = state.t;
    for (((_, p), (_, g)), (m, v)) in net
        .trainable_mut()
        .into_iter()
        .zip(&gs)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        adam_update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), lr, hyper, t);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Learning-rate schedule and configuration

/// Training hyperparameters. [`TrainConfig::default`] carries the
/// published protocol: lr 0.01 decayed by 0.1 every 20,000 iterations,
/// dropout 0.5, batch 32, 500 epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
    pub dropout: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Apply flip/noise/rotation augmentation (requires cloud data).
    pub augment: bool,
    /// Weight the loss by inverse square-root class frequencies.
    pub weighted_loss: bool,
    pub seed: u64,
    /// Emit a checkpoint every this many iterations; 0 = final only.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr0: 0.01,
            decay_factor: 0.1,
            decay_every: 20_000,
            dropout: 0.5,
            batch_size: 32,
            epochs: 500,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            augment: true,
            weighted_loss: true,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Checks every field invariant.
    pub fn validate(&self) -> Result<(), TrainingError> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(TrainingError::BadConfig("lr0 must be finite and >= 0"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(TrainingError::BadConfig("decay_factor must be in (0, 1]"));
        }
        if self.decay_every == 0 {
            return Err(TrainingError::BadConfig("decay_every must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainingError::BadConfig("dropout must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(TrainingError::BadConfig("batch_size must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(TrainingError::BadConfig("epochs must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainingError::BadConfig("betas must be in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(TrainingError::BadConfig("epsilon must be > 0"));
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are skipped; unknown keys and bad values are errors.
    pub fn from_key_values(text: &str) -> Result<TrainConfig, TrainingError> {
        let mut config = TrainConfig::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(TrainingError::BadValue {
                    key: line.to_owned(),
                });
            };
            let key = key.trim();
            let value = value.trim();
            let bad = || TrainingError::BadValue {
                key: key.to_owned(),
            };
            match key {
                "lr0" => config.lr0 = value.parse().map_err(|_| bad())?,
                "decay_factor" => config.decay_factor = value.parse().map_err(|_| bad())?,
                "decay_every" => config.decay_every = value.parse().map_err(|_| bad())?,
                "dropout" => config.dropout = value.parse().map_err(|_| bad())?,
                "batch_size" => config.batch_size = value.parse().map_err(|_| bad())?,
                "epochs" => config.epochs = value.parse().map_err(|_| bad())?,
                "beta1" => config.beta1 = value.parse().map_err(|_| bad())?,
                "beta2" => config.beta2 = value.parse().map_err(|_| bad())?,
                "epsilon" => config.epsilon = value.parse().map_err(|_| bad())?,
                "augment" => config.augment = value.parse().map_err(|_| bad())?,
                "weighted_loss" => config.weighted_loss = value.parse().map_err(|_| bad())?,
                "seed" => config.seed = value.parse().map_err(|_| bad())?,
                "checkpoint_every" => config.checkpoint_every = value.parse().map_err(|_| bad())?,
                _ => return Err(TrainingError::UnknownKey(key.to_owned())),
            }
        }
        config.validate()?;
        Ok(config)
    }

    /// Serializes every field as `key = value` lines; the output parses
    /// back to an equal config.
    pub fn to_key_values(&self) -> String {
        format!(
            "lr0 = {}\ndecay_factor = {}\ndecay_every = {}\ndropout = {}\nbatch_size = {}\n\
             epochs = {}\nbeta1 = {}\nbeta2 = {}\nepsilon = {}\naugment = {}\n\
             weighted_loss = {}\nseed = {}\ncheckpoint_every = {}\n",
            self.lr0,
            self.decay_factor,
            self.decay_every,
            self.dropout,
            self.batch_size,
            self.epochs,
            self.beta1,
            self.beta2,
            self.epsilon,
            self.augment,
            self.weighted_loss,
            self.seed,
            self.checkpoint_every,
        )
    }

    fn adam_hyper(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.epsilon,
        }
    }
}

/// Step-decayed learning rate at a 0-based iteration index:
/// `lr0 * decay_factor^(iteration / decay_every)`.
pub fn lr_at(iteration: u64, config: &TrainConfig) -> f64 {
    let k = (iteration / config.decay_every) as i32;
    // Dividing by the reciprocal keeps the canonical schedule exact in
    // binary floating point: for decay 0.1 the reciprocal is exactly 10.0,
    // and 0.01 / 10^k hits the literal values 0.001, 0.0001, ... while
    // 0.01 * 0.1^k drifts by one ulp from k = 2 on.
    config.lr0 / (1.0 / config.decay_factor).powi(k)
}

// ---------------------------------------------------------------------------
// Augmentation

/// The random decisions of one augmentation application.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub noise: bool,
    pub angle_rad: f32,
}

impl AugmentDraw {
    /// Draws flip and noise coins (probability 0.5 each) and a uniform
    /// yaw in [-5 deg, +5 deg]. Draw order is fixed: flip, noise, angle.
    pub fn sample<R: Rng>(rng: &mut R) -> AugmentDraw {
        let flip = rng.gen::<f32>() < 0.5;
        let noise = rng.gen::<f32>() < 0.5;
        let limit = MAX_ROTATION_DEG.to_radians();
        let angle_rad = rng.gen_range(-limit..=limit);
        AugmentDraw {
            flip,
            noise,
            angle_rad,
        }
    }
}

/// Applies a fixed augmentation decision: flip, then noise, then
/// rotation. `rng` is only consulted for the per-point noise samples.
/// Labels ride along untouched.
pub fn augment_with<R: Rng>(cloud: &PointCloud, draw: &AugmentDraw, rng: &mut R) -> PointCloud {
    let mut out = if draw.flip {
        flip_y(cloud)
    } else {
        cloud.clone()
    };
    if draw.noise {
        let normal = Normal::new(0.0f32, NOISE_SIGMA_M).expect("positive sigma");
        let labels = out.labels().map(|l| l.to_vec());
        let points = out
            .points()
            .iter()
            .map(|p| {
                let mut q = *p;
                q.x += normal.sample(rng);
                q.y += normal.sample(rng);
                q.z += normal.sample(rng);
                q
            })
            .collect();
        out = match labels {
            Some(l) => PointCloud::with_labels(points, l).expect("same length"),
            None => PointCloud::new(points),
        };
    }
    rotate_z(&out, draw.angle_rad)
}

/// Randomized augmentation: coin-flip horizontal mirror, coin-flip
/// Gaussian coordinate noise, and an always-applied small yaw rotation.
pub fn augment<R: Rng>(cloud: &PointCloud, rng: &mut R) -> PointCloud {
    let draw = AugmentDraw::sample(rng);
    augment_with(cloud, &draw, rng)
}

// ---------------------------------------------------------------------------
// The training loop

/// Training inputs: either pre-projected (image, labels) pairs or labeled
/// point clouds projected on the fly (required when augmentation is on).
pub enum TrainData {
    Grids(Vec<(GridImage, LabelGrid)>),
    Clouds {
        clouds: Vec<PointCloud>,
        view: ViewSpec,
    },
}

impl TrainData {
    pub fn len(&self) -> usize {
        match self {
            TrainData::Grids(pairs) => pairs.len(),
            TrainData::Clouds { clouds, .. } => clouds.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One row of the per-iteration training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    /// 0-based optimizer step index.
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Observer payload delivered after each optimizer step.
pub struct TrainProgress<'a> {
    /// 0-based index of the step that just completed.
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
    pub network: &'a Network,
}

/// Result of a training run.
pub struct TrainOutcome {
    pub network: Network,
    /// Total completed optimizer steps.
    pub iterations: u64,
    pub log: Vec<TrainLogRow>,
    /// The class weights the run trained with.
    pub alpha: [f64; ClassId::COUNT],
}

/// Renders log rows as CSV with an `iteration,lr,loss` header. Floats use
/// Rust's shortest round-trip formatting, so identical runs produce
/// byte-identical logs.
pub fn log_to_csv(rows: &[TrainLogRow]) -> String {
    let mut out = String::from("iteration,lr,loss\n");
    for row in rows {
        out.push_str(&format!("{},{},{}\n", row.iteration, row.lr, row.loss));
    }
    out
}

/// Runs the full training loop: per-epoch seeded shuffling, optional
/// augmentation and on-the-fly projection, forward/backward, and Adam
/// with the step-decay schedule. Deterministic given `config.seed`.
///
/// `observer` fires after every optimizer step; it sees the freshly
/// updated network so callers can emit periodic checkpoints.
pub fn train<F>(
    data: &TrainData,
    config: &TrainConfig,
    mut observer: F,
) -> Result<TrainOutcome, TrainingError>
where
    F: FnMut(TrainProgress<'_>),
{
    config.validate()?;
    if data.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    if config.augment && matches!(data, TrainData::Grids(_)) {
        return Err(TrainingError::AugmentNeedsClouds);
    }
    // Baseline (unaugmented) projections drive the class weights; for
    // cloud data they also pin down the grid geometry.
    let base_pairs: Vec<(GridImage, LabelGrid)>;
    let pairs: &[(GridImage, LabelGrid)] = match data {
        TrainData::Grids(pairs) => pairs,
        TrainData::Clouds { clouds, view } => {
            base_pairs = clouds
                .iter()
                .map(|c| view.project_labeled(c))
                .collect::<Result<_, _>>()?;
            &base_pairs
        }
    };
    let kind = pairs[0].0.kind();
    let (height, width) = (pairs[0].0.height(), pairs[0].0.width());
    for (i, (img, lg)) in pairs.iter().enumerate() {
        if img.kind() != kind || img.height() != height || img.width() != width {
            return Err(TrainingError::Shape(format!(
                "sample {i} image geometry differs from sample 0"
            )));
        }
        if lg.height() != height || lg.width() != width {
            return Err(TrainingError::Shape(format!(
                "sample {i} label grid does not match its image"
            )));
        }
    }
    let alpha = if config.weighted_loss {
        class_frequencies(pairs.iter().map(|(_, lg)| lg))?.alpha()
    } else {
        ClassStats::uniform().alpha()
    };
    let net_config = NetworkConfig {
        in_channels: kind.channels(),
        num_classes: ClassId::COUNT,
        dropout_p: config.dropout,
    };
    let mut net = Network::build(net_config, config.seed);
    let mut state = AdamState::new(&net);
    let hyper = config.adam_hyper();
    // One stream drives shuffling, augmentation and dropout; its draw
    // order is part of the determinism contract.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = data.len();
    let channels = kind.channels();
    let sample_len = channels * height * width;
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::new();
    let mut iteration = 0u64;
    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let mut batch = Tensor::zeros(&[chunk.len(), channels, height, width]);
            let mut batch_labels: Vec<LabelGrid> = Vec::with_capacity(chunk.len());
            for (slot, &idx) in chunk.iter().enumerate() {
                let dst = &mut batch.data_mut()[slot * sample_len..(slot + 1) * sample_len];
                match data {
                    TrainData::Clouds { clouds, view } if config.augment => {
                        let cloud = augment(&clouds[idx], &mut rng);
                        let (img, lg) = view.project_labeled(&cloud)?;
                        dst.copy_from_slice(img.data());
                        batch_labels.push(lg);
                    }
                    _ => {
                        dst.copy_from_slice(pairs[idx].0.data());
                        batch_labels.push(pairs[idx].1.clone());
                    }
                }
            }
            let (logits, cache) = net.forward_train(&batch, &mut rng)?;
            let (loss, grad_logits) = weighted_ce_loss(&logits, &batch_labels, alpha)?;
            if !loss.is_finite() {
                return Err(TrainingError::NonFiniteLoss {
                    iteration,
                    samples: chunk.to_vec(),
                });
            }
            let grads = net.backward(&cache, &grad_logits)?;
            let lr = lr_at(iteration, config);
            adam_step(&mut net, &grads, &mut state, lr, hyper)?;
            log.push(TrainLogRow {
                iteration,
                lr,
                loss,
            });
            observer(TrainProgress {
                iteration,
                lr,
                loss,
                network: &net,
            });
            iteration += 1;
        }
    }
    Ok(TrainOutcome {
        network: net,
        iterations: iteration,
        log,
        alpha,
    })
}
