//! Optimization loop: Adam, reduce-on-plateau scheduling, dihedral
//! augmentation, per-epoch checkpoints and a loss-history CSV.

mod adam;
mod augment;
mod schedule;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, AdamState};
pub use augment::{augment, Dihedral};
pub use schedule::PlateauSchedule;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::dataio::ImagePair;
use crate::losses::{self, LossConfig, LossValues, PerceptualExtractor};
use crate::network::{self, ModelParams, NetworkConfig, NetworkError};
use crate::tensor::{Graph, Shape, Tensor, TensorError};

pub const LOSS_CSV_HEADER: &str = "epoch,step,total,pixel,global,edge,channel,lr";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("no gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("gradient for `{name}` has shape {grad}, parameter has {param}")]
    GradShape { name: String, param: Shape, grad: Shape },
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}; last good checkpoint kept")]
    Diverged { epoch: u64, step: u64, loss: f64 },
    #[error("invalid training options: {0}")]
    Options(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Run options that are not part of the network or the objective.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: u64,
    pub lr: f64,
    pub batch: usize,
    /// Square crop side; must be a multiple of `2^levels`. Images smaller
    /// than the patch use the largest such multiple that fits.
    pub patch: usize,
    pub seed: u64,
    /// Run on a single worker thread.
    pub deterministic: bool,
    pub augment: bool,
    /// Rescale the gradient to this global L2 norm when it is exceeded.
    pub clip_grad_norm: Option<f64>,
    /// Share of pairs held out; when non-zero the schedule monitors their loss.
    pub val_fraction: f64,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    /// Where `loss.csv`, `last.ckpt` and `best.ckpt` go. Nothing is written when unset.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 300,
            lr: 2e-4,
            batch: 2,
            patch: 128,
            seed: 0,
            deterministic: false,
            augment: true,
            clip_grad_norm: None,
            val_fraction: 0.0,
            patience: 10,
            factor: 0.2,
            min_lr: 0.0,
            out_dir: None,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self, net: &NetworkConfig) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Options(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        let m = net.size_multiple();
        if self.patch == 0 || self.patch % m != 0 {
            return bad(format!("patch {} must be a positive multiple of {m} (2^levels)", self.patch));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return bad(format!("factor must lie in (0, 1), got {}", self.factor));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return bad(format!("clip_grad_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub options: TrainOptions,
    pub extractor: PerceptualExtractor,
}

/// One optimizer step of the loss history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based epoch.
    pub epoch: u64,
    /// 1-based global step.
    pub step: u64,
    pub values: LossValues,
    /// Rate used for this step.
    pub lr: f64,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let v = &self.values;
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.epoch, self.step, v.total, v.pixel, v.global, v.edge, v.channel, self.lr
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<StepRecord>,
    /// Monitored loss per epoch run in this call.
    pub epoch_losses: Vec<f64>,
}

/// Trains from scratch, or continues `resume` up to `options.epochs` total epochs.
pub fn train(dataset: &[ImagePair], cfg: &TrainConfig, resume: Option<Checkpoint>) -> Result<TrainOutcome, TrainError> {
    if cfg.options.deterministic {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| TrainError::Options(e.to_string()))?;
        pool.install(|| run(dataset, cfg, resume))
    } else {
        run(dataset, cfg, resume)
    }
}

fn run(dataset: &[ImagePair], cfg: &TrainConfig, resume: Option<Checkpoint>) -> Result<TrainOutcome, TrainError> {
    let opts = &cfg.options;
    cfg.network.validate()?;
    cfg.loss.validate()?;
    opts.validate(&cfg.network)?;
    if dataset.is_empty() {
        return Err(TrainError::Data("empty dataset".into()));
    }
    for p in dataset {
        if p.low.shape() != p.reference.shape() {
            return Err(TrainError::Data(format!(
                "pair `{}`: low {} vs reference {}",
                p.name,
                p.low.shape(),
                p.reference.shape()
            )));
        }
    }
    let (train_set, val_set) = split(dataset, opts.val_fraction);
    let patch = effective_patch(dataset, opts.patch, cfg.network.size_multiple())?;

    let mut ck = match resume {
        Some(ck) => {
            if ck.network != cfg.network {
                return Err(TrainError::Options(format!(
                    "checkpoint network {:?} differs from configured {:?}",
                    ck.network, cfg.network
                )));
            }
            ck
        }
        None => Checkpoint {
            network: cfg.network,
            params: ModelParams::init(&cfg.network, opts.seed)?,
            adam: AdamState::new(opts.lr),
            schedule: PlateauSchedule::new(opts.patience, opts.factor, opts.min_lr),
            epoch: 0,
            seed: opts.seed,
        },
    };

    let mut csv = match &opts.out_dir {
        Some(dir) => Some(open_csv(dir, ck.epoch > 0)?),
        None => None,
    };

    let mut history = Vec::new();
    let mut epoch_losses = Vec::new();
    while ck.epoch < opts.epochs {
        let epoch = ck.epoch + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(ck.seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);

        let mut totals = Vec::new();
        for chunk in order.chunks(opts.batch) {
            let (low, reference) = make_batch(train_set, chunk, patch, opts.augment, &mut rng)?;
            let lr = ck.adam.lr;
            let (values, grads) = loss_and_grads(&ck.params, &low, &reference, cfg, true)?;
            let step = ck.adam.step + 1;
            if !values.total.is_finite() || grads.values().any(|g| !g.all_finite()) {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    loss: values.total,
                });
            }
            let mut grads = grads;
            if let Some(max_norm) = opts.clip_grad_norm {
                clip(&mut grads, max_norm);
            }
            adam_step(&mut ck.params, &grads, &mut ck.adam)?;
            let rec = StepRecord { epoch, step, values, lr };
            if let Some(w) = csv.as_mut() {
                writeln!(w, "{}", rec.csv_row())?;
            }
            history.push(rec);
            totals.push(values.total);
        }

        let monitored = if val_set.is_empty() {
            totals.iter().sum::<f64>() / totals.len() as f64
        } else {
            validation_loss(&ck.params, val_set, patch, cfg)?
        };
        let improved = monitored < ck.schedule.best;
        ck.adam.lr = ck.schedule.update(monitored, ck.adam.lr).map_err(|_| TrainError::Diverged {
            epoch,
            step: ck.adam.step,
            loss: monitored,
        })?;
        ck.epoch = epoch;
        epoch_losses.push(monitored);
        log::info!("epoch {epoch}: loss {monitored:.6}, lr {:e}", ck.adam.lr);

        if let Some(dir) = &opts.out_dir {
            if let Some(w) = csv.as_mut() {
                w.flush()?;
            }
            ck.save(&dir.join("last.ckpt"))?;
            if improved {
                ck.save(&dir.join("best.ckpt"))?;
            }
        }
    }
    Ok(TrainOutcome {
        checkpoint: ck,
        history,
        epoch_losses,
    })
}

fn open_csv(dir: &std::path::Path, append: bool) -> Result<BufWriter<File>, TrainError> {
    fs::create_dir_all(dir)?;
    let path = dir.join("loss.csv");
    if append && path.exists() {
        return Ok(BufWriter::new(OpenOptions::new().append(true).open(path)?));
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{LOSS_CSV_HEADER}")?;
    Ok(w)
}

/// Holds out the last `round(fraction * len)` pairs, keeping at least one for training.
fn split(dataset: &[ImagePair], fraction: f64) -> (&[ImagePair], &[ImagePair]) {
    if fraction <= 0.0 || dataset.len() < 2 {
        return (dataset, &[]);
    }
    let n_val = ((fraction * dataset.len() as f64).round() as usize).clamp(1, dataset.len() - 1);
    dataset.split_at(dataset.len() - n_val)
}

fn effective_patch(dataset: &[ImagePair], patch: usize, multiple: usize) -> Result<usize, TrainError> {
    let smallest = dataset
        .iter()
        .map(|p| p.low.shape().h.min(p.low.shape().w))
        .min()
        .unwrap_or(0);
    let p = patch.min(smallest / multiple * multiple);
    if p == 0 {
        return Err(TrainError::Data(format!(
            "images must be at least {multiple}x{multiple} for this network"
        )));
    }
    Ok(p)
}

fn make_batch(
    set: &[ImagePair],
    idx: &[usize],
    patch: usize,
    do_augment: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor), TrainError> {
    let mut lows = Vec::with_capacity(idx.len());
    let mut refs = Vec::with_capacity(idx.len());
    for &i in idx {
        let p = &set[i];
        let s = p.low.shape();
        let y0 = rng.random_range(0..=s.h - patch);
        let x0 = rng.random_range(0..=s.w - patch);
        let mut lo = p.low.crop(y0, x0, patch, patch)?;
        let mut re = p.reference.crop(y0, x0, patch, patch)?;
        if do_augment {
            (lo, re) = augment(&lo, &re, rng)?;
        }
        lows.push(lo);
        refs.push(re);
    }
    Ok((Tensor::stack(&lows)?, Tensor::stack(&refs)?))
}

/// Loss components and, when requested, gradients for every parameter.
/// Parameters the loss does not reach get zero gradients.
pub fn loss_and_grads(
    params: &ModelParams,
    low: &Tensor,
    reference: &Tensor,
    cfg: &TrainConfig,
    with_grads: bool,
) -> Result<(LossValues, BTreeMap<String, Tensor>), TrainError> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, with_grads);
    let x = g.constant(low.clone());
    let out = network::forward(&mut g, x, &bound, &cfg.network)?;
    let terms = losses::total_loss(&mut g, out, reference, &cfg.extractor, &cfg.loss)?;
    let values = terms.values(&g);
    let mut grads = BTreeMap::new();
    if with_grads {
        g.backward(terms.total)?;
        for (name, &v) in bound.iter() {
            let grad = g
                .take_grad(v)
                .unwrap_or_else(|| Tensor::zeros(params.get(name).expect("bound from params").shape()));
            grads.insert(name.clone(), grad);
        }
    }
    Ok((values, grads))
}

fn validation_loss(params: &ModelParams, set: &[ImagePair], patch: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    for p in set {
        let s = p.low.shape();
        let (y0, x0) = ((s.h - patch) / 2, (s.w - patch) / 2);
        let lo = p.low.crop(y0, x0, patch, patch)?;
        let re = p.reference.crop(y0, x0, patch, patch)?;
        sum += loss_and_grads(params, &lo, &re, cfg, false)?.0.total;
    }
    Ok(sum / set.len() as f64)
}

fn clip(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) {
    let norm = grads.values().map(Tensor::sum_of_squares).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for t in grads.values_mut() {
            for v in t.data_mut() {
                *v *= k;
            }
        }
    }
}
