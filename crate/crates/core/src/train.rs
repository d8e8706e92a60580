//! CIoU training loop with AdamW and lowest-validation-loss checkpointing.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::ModelInput;
use crate::layout::{BBox, Layout};
use crate::model::{ModelConfig, ModelError, PlacementModel};
use crate::nn::{AdamW, AdamWConfig, Graph, NnError, ParamGrads};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite loss on layout {layout_id:?} at step {step}")]
    NonFiniteLoss { layout_id: String, step: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optional cap on optimizer steps; training stops once it is reached.
    pub max_steps: Option<usize>,
    pub weight_decay: f64,
    pub seed: u64,
    /// Worker threads for per-example gradients within a batch.
    pub threads: usize,
    #[serde(default)]
    pub schedule: LrSchedule,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to zero over the planned step count.
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = (step as f64 / total.max(1) as f64).min(1.0);
                base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 8,
            max_epochs: 150,
            max_steps: None,
            weight_decay: 0.01,
            seed: 0,
            threads: 1,
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.threads == 0 || self.max_steps == Some(0) {
            return Err(TrainError::Config("batch_size, max_epochs, threads and max_steps must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(TrainError::Config("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: PlacementModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub steps: usize,
}

pub fn write_log_csv(log: &[EpochLog], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "epoch,train_loss,val_loss,wall_seconds")?;
    for e in log {
        writeln!(out, "{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.wall_seconds)?;
    }
    Ok(())
}

pub fn save_log_csv(log: &[EpochLog], path: &Path) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_log_csv(log, &mut f)?;
    f.flush()
}

/// A layout reduced to its model input and training target.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub input: ModelInput,
    pub target: BBox,
}

pub fn prepare_examples(model: &PlacementModel, layouts: &[Layout]) -> Result<Vec<Example>, ModelError> {
    layouts
        .iter()
        .enumerate()
        .map(|(index, l)| {
            let input = model.prepare(l).map_err(|e| ModelError::InBatch { index, source: Box::new(e) })?;
            Ok(Example { id: l.id.clone(), input, target: l.target().bbox })
        })
        .collect()
}

/// Loss and parameter gradients for one example.
fn example_grads(model: &PlacementModel, ex: &Example, step: usize) -> Result<(f64, ParamGrads), TrainError> {
    let mut g = Graph::new(&model.store);
    let pred = model.forward(&mut g, &ex.input)?;
    let non_finite = || TrainError::NonFiniteLoss { layout_id: ex.id.clone(), step };
    if g.value(pred).iter().any(|v| !v.is_finite()) {
        return Err(non_finite());
    }
    let loss = g.ciou_loss(pred, &ex.target)?;
    let value = g.value(loss)[0];
    if !value.is_finite() {
        return Err(non_finite());
    }
    Ok((value, g.backward(loss)))
}

/// Summed loss and gradients over a batch, split into fixed contiguous
/// chunks so the reduction order depends only on the thread count.
fn batch_grads(
    model: &PlacementModel,
    batch: &[&Example],
    threads: usize,
    step: usize,
) -> Result<(f64, ParamGrads), TrainError> {
    let chunk_sum = |chunk: &[&Example]| -> Result<(f64, Option<ParamGrads>), TrainError> {
        let mut total = 0.0;
        let mut acc: Option<ParamGrads> = None;
        for ex in chunk {
            let (l, g) = example_grads(model, ex, step)?;
            total += l;
            match &mut acc {
                Some(a) => a.merge(&g),
                None => acc = Some(g),
            }
        }
        Ok((total, acc))
    };
    let parts: Vec<Result<(f64, Option<ParamGrads>), TrainError>> = if threads <= 1 || batch.len() < 2 {
        vec![chunk_sum(batch)]
    } else {
        let size = batch.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = batch.chunks(size).map(|c| s.spawn(move || chunk_sum(c))).collect();
            handles.into_iter().map(|h| h.join().expect("gradient worker panicked")).collect()
        })
    };
    let mut total = 0.0;
    let mut acc: Option<ParamGrads> = None;
    for part in parts {
        let (l, g) = part?;
        total += l;
        if let Some(g) = g {
            match &mut acc {
                Some(a) => a.merge(&g),
                None => acc = Some(g),
            }
        }
    }
    Ok((total, acc.unwrap_or_default()))
}

/// Mean CIoU loss of the model over prepared examples.
pub fn mean_loss(model: &PlacementModel, examples: &[Example]) -> Result<f64, TrainError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ex in examples {
        let mut g = Graph::new(&model.store);
        let pred = model.forward(&mut g, &ex.input)?;
        if g.value(pred).iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteLoss { layout_id: ex.id.clone(), step: 0 });
        }
        let loss = g.ciou_loss(pred, &ex.target)?;
        total += g.value(loss)[0];
    }
    Ok(total / examples.len() as f64)
}

/// Trains a fresh model and returns the lowest-validation-loss parameters.
pub fn train(
    train_set: &[Layout],
    val_set: &[Layout],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let model = PlacementModel::new(model_cfg.clone())?;
    train_model(model, train_set, val_set, cfg)
}

pub fn train_model(
    mut model: PlacementModel,
    train_set: &[Layout],
    val_set: &[Layout],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::Config("training and validation sets must be nonempty".into()));
    }
    let train_ex = prepare_examples(&model, train_set)?;
    let val_ex = prepare_examples(&model, val_set)?;
    let mut opt = AdamW::new(
        &model.store,
        AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let start = Instant::now();
    let mut log = Vec::new();
    let mut best = (f64::INFINITY, 0, model.store.clone());
    let mut steps = 0;
    let planned = cfg.max_epochs.saturating_mul(train_ex.len().div_ceil(cfg.batch_size));
    let planned = cfg.max_steps.map_or(planned, |m| m.min(planned));

    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0;
        for batch in order.chunks(cfg.batch_size) {
            let examples: Vec<&Example> = batch.iter().map(|&i| &train_ex[i]).collect();
            let (loss, mut grads) = batch_grads(&model, &examples, cfg.threads, steps)?;
            grads.scale(1.0 / examples.len() as f64);
            model.store.accumulate(&grads)?;
            opt.state.config.lr = cfg.schedule.rate(cfg.lr, steps, planned);
            opt.step(&mut model.store)?;
            steps += 1;
            epoch_loss += loss;
            seen += examples.len();
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
        }
        let val_loss = mean_loss(&model, &val_ex)?;
        let entry = EpochLog {
            epoch,
            train_loss: epoch_loss / seen as f64,
            val_loss,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.5} val {:.5} ({} steps)",
            entry.train_loss,
            entry.val_loss,
            steps
        );
        log.push(entry);
        if val_loss < best.0 {
            best = (val_loss, epoch, model.store.clone());
        }
        if cfg.max_steps.is_some_and(|m| steps >= m) {
            break 'epochs;
        }
    }

    let (best_val_loss, best_epoch, params) = best;
    model.replace_params(params)?;
    Ok(TrainOutcome { model, log, best_epoch, best_val_loss, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::FeatureConfig;
    use crate::layout::{Element, ElementKind};

    fn tiny() -> ModelConfig {
        let feature = FeatureConfig { raster_size: 8, d_model: 16, font_vocab: 4, text_dim: 8, ..Default::default() };
        ModelConfig { layers: 1, heads: 2, d_model: 16, d_ff: 32, head_dim: None, feature, seed: 5 }
    }

    fn layouts(n: usize) -> Vec<Layout> {
        (0..n)
            .map(|i| {
                let f = i as f64 / n as f64;
                Layout {
                    id: format!("t{i}"),
                    canvas_width: 64,
                    canvas_height: 64,
                    elements: vec![
                        Element::graphic(ElementKind::Svg, BBox::new(0.1 + 0.4 * f, 0.2, 0.3, 0.3), [200, 0, 0]),
                        Element::text("ab", BBox::new(0.15 + 0.4 * f, 0.3, 0.2, 0.1), [0, 0, 0], 1),
                    ],
                    target_index: 1,
                }
            })
            .collect()
    }

    fn short() -> TrainConfig {
        TrainConfig { lr: 1e-3, batch_size: 2, max_epochs: 3, ..Default::default() }
    }

    #[test]
    fn identical_seeds_give_identical_losses() {
        let data = layouts(4);
        let a = train(&data, &data[..2], &tiny(), &short()).unwrap();
        let b = train(&data, &data[..2], &tiny(), &short()).unwrap();
        let strip = |l: &[EpochLog]| l.iter().map(|e| (e.train_loss, e.val_loss)).collect::<Vec<_>>();
        assert_eq!(strip(&a.log), strip(&b.log));
        assert_eq!(a.model.param_values(), b.model.param_values());
    }

    #[test]
    fn returned_checkpoint_has_the_lowest_validation_loss() {
        let data = layouts(4);
        let out = train(&data, &data[..2], &tiny(), &TrainConfig { max_epochs: 6, ..short() }).unwrap();
        let min = out.log.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val_loss, min);
        assert!(out.best_val_loss <= out.log.last().unwrap().val_loss);
        let recomputed = mean_loss(&out.model, &prepare_examples(&out.model, &data[..2]).unwrap()).unwrap();
        assert!((recomputed - min).abs() < 1e-12);
    }

    #[test]
    fn threaded_gradients_match_serial_within_rounding() {
        let data = layouts(4);
        let one = train(&data, &data[..2], &tiny(), &short()).unwrap();
        let two = train(&data, &data[..2], &tiny(), &TrainConfig { threads: 2, ..short() }).unwrap();
        for (a, b) in one.log.iter().zip(&two.log) {
            assert!((a.train_loss - b.train_loss).abs() < 1e-9);
        }
    }

    #[test]
    fn max_steps_stops_training() {
        let data = layouts(4);
        let out = train(&data, &data[..2], &tiny(), &TrainConfig { max_steps: Some(3), ..short() }).unwrap();
        assert_eq!(out.steps, 3);
        assert_eq!(out.log.len(), 2);
    }

    #[test]
    fn empty_sets_are_rejected() {
        assert!(train(&[], &layouts(1), &tiny(), &short()).is_err());
    }

    #[test]
    fn log_csv_has_header_and_rows() {
        let log = vec![EpochLog { epoch: 1, train_loss: 0.5, val_loss: 0.25, wall_seconds: 1.0 }];
        let mut buf = Vec::new();
        write_log_csv(&log, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,train_loss,val_loss,wall_seconds\n1,0.5,0.25,1\n");
    }
}
