//! Epoch loop: seeded shuffle, per-task pools, augmentation, SGD with
//! per-epoch decay, and best-checkpoint selection on validation mean DSC.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentRanges};
use super::pool::{PoolSet, TaskedIndex, DEFAULT_POOL_CAPACITY};
use super::sgd::{sgd_step, LrSchedule};
use crate::datamodel::Sample;
use crate::error::{Error, Result};
use crate::losses_metrics::{dsc, DEFAULT_BOUNDARY_WEIGHT};
use crate::model::OmniSeg;
use crate::nn::ParamSet;
use crate::parallel;

/// Indexed access to a split, loaded on demand.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn task_id(&self, index: usize) -> usize;
    fn load(&self, index: usize) -> Result<Sample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [Sample] {
    fn len(&self) -> usize {
        <[Sample]>::len(self)
    }

    fn task_id(&self, index: usize) -> usize {
        self[index].task_id
    }

    fn load(&self, index: usize) -> Result<Sample> {
        Ok(self[index].clone())
    }
}

impl SampleSource for Vec<Sample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn task_id(&self, index: usize) -> usize {
        self[index].task_id
    }

    fn load(&self, index: usize) -> Result<Sample> {
        Ok(self[index].clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub pool_capacity: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub epochs: usize,
    pub aug_probability: f64,
    pub seed: u64,
    pub boundary_weight: f64,
    /// Stops training after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub augment: AugmentRanges,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            pool_capacity: DEFAULT_POOL_CAPACITY,
            lr: 0.001,
            lr_decay: 0.99,
            epochs: 100,
            aug_probability: 0.5,
            seed: 0,
            boundary_weight: DEFAULT_BOUNDARY_WEIGHT,
            max_steps: None,
            augment: AugmentRanges::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        LrSchedule::new(self.lr, self.lr_decay)?;
        if self.batch_size == 0 || self.batch_size > self.pool_capacity {
            return Err(Error::invalid(format!(
                "batch_size {} must be in 1..={}",
                self.batch_size, self.pool_capacity
            )));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        if !(0.0..=1.0).contains(&self.aug_probability) {
            return Err(Error::invalid("aug_probability must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            decay: self.lr_decay,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_mean_dsc: f64,
    pub steps: usize,
    pub discarded: usize,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {} lr {:.8} train_loss {:.6} val_mean_dsc {:.6}",
            self.epoch, self.lr, self.train_loss, self.val_mean_dsc
        )
    }
}

pub struct EpochEvent<'a> {
    pub record: &'a EpochRecord,
    pub is_best: bool,
    pub model: &'a OmniSeg,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
    pub best_params: ParamSet,
    pub total_steps: usize,
}

/// Derives an independent stream id from the run seed and a position.
pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mean DSC of the model's masks over a split.
pub fn mean_dsc(model: &OmniSeg, source: &(impl SampleSource + ?Sized)) -> Result<f64> {
    if source.is_empty() {
        return Err(Error::invalid("cannot score an empty split"));
    }
    let indices: Vec<usize> = (0..source.len()).collect();
    let scores = parallel::try_map(&indices, |_, &i| {
        let s = source.load(i)?;
        dsc(&model.predict_mask(&s)?, &s.mask)
    })?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Trains `model` in place; on return the model holds the best-epoch
/// weights.
pub fn train<S, V>(
    model: &mut OmniSeg,
    train_set: &S,
    val_set: &V,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(EpochEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome>
where
    S: SampleSource + ?Sized,
    V: SampleSource + ?Sized,
{
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if val_set.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    let tasks = model.registries().classes.len();
    let mut per_task = vec![0usize; tasks];
    for i in 0..train_set.len() {
        let t = train_set.task_id(i);
        *per_task.get_mut(t).ok_or(Error::Index {
            what: "class registry",
            index: t,
            len: tasks,
        })? += 1;
    }
    if per_task.iter().all(|&n| n < config.batch_size) {
        return Err(Error::invalid(format!(
            "no task has at least batch_size = {} training samples",
            config.batch_size
        )));
    }

    let schedule = config.schedule();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ParamSet)> = None;
    let mut total_steps = 0usize;

    for epoch in 0..config.epochs {
        let lr = schedule.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 1, epoch as u64)));
        let mut pools = PoolSet::new(0..tasks, config.batch_size, config.pool_capacity)?;
        let mut loss_sum = 0.0;
        let mut steps = 0usize;

        for &index in &order {
            if config.max_steps.is_some_and(|m| total_steps >= m) {
                break;
            }
            let item = TaskedIndex {
                task_id: train_set.task_id(index),
                index,
            };
            let Some(batch) = pools.feed(item)? else {
                continue;
            };
            assert!(
                batch.iter().all(|b| b.task_id == batch[0].task_id),
                "pool emitted a mixed-task batch"
            );
            let samples = parallel::try_map(&batch, |_, b| {
                let s = train_set.load(b.index)?;
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 2 + epoch as u64, b.index as u64));
                Ok::<_, Error>(augment(&s, &mut rng, config.aug_probability, &config.augment))
            })?;
            let (loss, grads) = model.batch_gradient(&samples, config.boundary_weight)?;
            sgd_step(model.params_mut(), &grads, lr)?;
            loss_sum += loss;
            steps += 1;
            total_steps += 1;
        }
        let discarded = pools.discard_partial().len();
        let stats = pools.stats();
        debug_assert_eq!(stats.fed, stats.emitted + stats.discarded);

        let val_mean_dsc = mean_dsc(model, val_set)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: if steps > 0 { loss_sum / steps as f64 } else { 0.0 },
            val_mean_dsc,
            steps,
            discarded,
        };
        let is_best = best.as_ref().is_none_or(|(_, d, _)| val_mean_dsc > *d);
        if is_best {
            best = Some((epoch + 1, val_mean_dsc, model.params().clone()));
        }
        on_epoch(EpochEvent {
            record: &record,
            is_best,
            model,
        })?;
        history.push(record);
        if config.max_steps.is_some_and(|m| total_steps >= m) {
            break;
        }
    }

    let (best_epoch, best_val_dsc, best_params) = best.expect("at least one epoch ran");
    model.params_mut().load_from(&best_params)?;
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_dsc,
        best_params,
        total_steps,
    })
}
