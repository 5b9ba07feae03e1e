//! Loss, optimizers, metrics, checkpoints and the training loop.

mod checkpoint;
mod optim;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, load_checkpoint_for, parse_checkpoint, save_checkpoint};
pub use optim::{Optimizer, OptimizerKind};

use std::collections::BTreeMap;
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::data::{augment_corpus, prepare, train_val_split, Grouping, VideoClip};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::model::{build, forward_on, ModelConfig, ModelParams};
use crate::tensor::Tensor;

/// Optimization and data-handling settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub seed: u64,
    pub val_fraction: f64,
    /// Augmented copies added per source clip before splitting.
    pub augment_multiplicity: usize,
    pub grouping: Grouping,
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::default(),
            weight_decay: 0.0,
            seed: 0,
            val_fraction: 0.2,
            augment_multiplicity: 0,
            grouping: Grouping::BySource,
            checkpoint_path: None,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction)));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let optimizer = match self.optimizer {
            OptimizerKind::SgdMomentum { momentum } => format!("optimizer=sgd\nmomentum={momentum}\n"),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                format!("optimizer=adam\nbeta1={beta1}\nbeta2={beta2}\nadam_eps={eps}\n")
            }
        };
        let mut s = format!(
            "epochs={}\nbatch_size={}\nlearning_rate={}\n{optimizer}weight_decay={}\ntrain_seed={}\nval_fraction={}\n\
             augment_multiplicity={}\nsplit={}\n",
            self.epochs,
            self.batch_size,
            self.learning_rate,
            self.weight_decay,
            self.seed,
            self.val_fraction,
            self.augment_multiplicity,
            match self.grouping {
                Grouping::BySource => "source",
                Grouping::PerClip => "clip",
            }
        );
        if let Some(p) = &self.checkpoint_path {
            s.push_str(&format!("checkpoint_path={}\n", p.display()));
        }
        if let Some(p) = &self.log_path {
            s.push_str(&format!("log_path={}\n", p.display()));
        }
        s
    }

    pub(crate) fn take_from(kv: &mut KeyValues) -> Result<Self> {
        let d = TrainConfig::default();
        let optimizer = match kv.take_string("optimizer").as_deref() {
            None | Some("adam") => OptimizerKind::Adam {
                beta1: kv.take("beta1", 0.9)?,
                beta2: kv.take("beta2", 0.999)?,
                eps: kv.take("adam_eps", 1e-8)?,
            },
            Some("sgd") => OptimizerKind::SgdMomentum { momentum: kv.take("momentum", 0.9)? },
            Some(other) => return Err(Error::Config(format!("optimizer must be adam or sgd, got {other:?}"))),
        };
        let grouping = match kv.take_string("split").as_deref() {
            None | Some("source") => Grouping::BySource,
            Some("clip") => Grouping::PerClip,
            Some(other) => return Err(Error::Config(format!("split must be source or clip, got {other:?}"))),
        };
        let cfg = TrainConfig {
            epochs: kv.take("epochs", d.epochs)?,
            batch_size: kv.take("batch_size", d.batch_size)?,
            learning_rate: kv.take("learning_rate", d.learning_rate)?,
            optimizer,
            weight_decay: kv.take("weight_decay", d.weight_decay)?,
            seed: kv.take("train_seed", d.seed)?,
            val_fraction: kv.take("val_fraction", d.val_fraction)?,
            augment_multiplicity: kv.take("augment_multiplicity", d.augment_multiplicity)?,
            grouping,
            checkpoint_path: kv.take_string("checkpoint_path").map(PathBuf::from),
            log_path: kv.take_string("log_path").map(PathBuf::from),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Model and training settings read from one `key=value` file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let model = ModelConfig::take_from(&mut kv)?;
        let train = TrainConfig::take_from(&mut kv)?;
        kv.finish()?;
        Ok(RunConfig { model, train })
    }

    pub fn to_text(&self) -> String {
        format!("{}{}", self.model.to_text(), self.train.to_text())
    }
}

/// Accuracy, mean loss and the confusion matrix (rows: true class,
/// columns: predicted class).
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub num_classes: usize,
    pub confusion: Vec<u64>,
}

impl Metrics {
    /// Tallies `(label, predicted, loss)` triples.
    pub fn from_predictions(num_classes: usize, outcomes: &[(usize, usize, f64)]) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::invalid("cannot compute metrics of an empty dataset"));
        }
        let mut confusion = vec![0u64; num_classes * num_classes];
        let mut loss = 0.0;
        for &(label, pred, l) in outcomes {
            if label >= num_classes || pred >= num_classes {
                return Err(Error::invalid(format!(
                    "class {} out of range for {num_classes} classes",
                    label.max(pred)
                )));
            }
            confusion[label * num_classes + pred] += 1;
            loss += l;
        }
        let correct: u64 = (0..num_classes).map(|k| confusion[k * num_classes + k]).sum();
        let n = outcomes.len() as f64;
        Ok(Metrics { accuracy: correct as f64 / n, mean_loss: loss / n, num_classes, confusion })
    }

    pub fn count(&self, label: usize, predicted: usize) -> u64 {
        self.confusion[label * self.num_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().sum()
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples: {}", self.total())?;
        writeln!(f, "accuracy: {:.6}", self.accuracy)?;
        writeln!(f, "mean_loss: {:.6}", self.mean_loss)?;
        writeln!(f, "num_classes: {}", self.num_classes)?;
        for k in 0..self.num_classes {
            let row: Vec<String> = (0..self.num_classes).map(|j| self.count(k, j).to_string()).collect();
            writeln!(f, "confusion_row_{k}: {}", row.join(" "))?;
        }
        Ok(())
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f32]) -> usize {
    logits.iter().enumerate().fold(0, |best, (i, &v)| if v > logits[best] { i } else { best })
}

/// Forward and backward pass on one prepared clip.
pub struct ClipResult {
    pub loss: f64,
    pub logits: Vec<f32>,
    pub grads: BTreeMap<String, Tensor>,
}

pub fn clip_gradients(params: &ModelParams, frames: &Tensor, label: usize) -> Result<ClipResult> {
    let tape = Tape::new();
    let bound = params.bind(&tape)?;
    let logits = forward_on(params.config(), &bound, tape.input(frames)?)?;
    let loss = logits.cross_entropy(label)?;
    let mut grads = tape.backward(loss)?;
    let mut out = BTreeMap::new();
    for (name, var) in &bound {
        let g = grads.take(*var).map_or_else(|| Tensor::zeros(&var.dims()), Ok)?;
        out.insert(name.clone(), g);
    }
    let loss_value = loss.value().item()? as f64;
    let logits_value = logits.value().data().to_vec();
    Ok(ClipResult { loss: loss_value, logits: logits_value, grads: out })
}

fn model_extents(cfg: &ModelConfig) -> (usize, usize, usize) {
    (cfg.frames, cfg.height, cfg.width)
}

/// Logits and loss of one clip, resampled without jitter.
pub fn predict(params: &ModelParams, clip: &VideoClip) -> Result<(Vec<f32>, f64)> {
    let cfg = params.config();
    // Jitter off: the rng is never consulted.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let prepared = prepare(clip, model_extents(cfg), false, &mut rng)?;
    let tape = Tape::new();
    let bound =
        params.tensors().iter().map(|(n, t)| Ok((n.clone(), tape.constant(t.clone())?))).collect::<Result<_>>()?;
    let logits = forward_on(cfg, &bound, tape.input(&prepared.frames)?)?;
    let loss = logits.cross_entropy(clip.label)?.value().item()? as f64;
    let out = logits.value().data().to_vec();
    Ok((out, loss))
}

/// Metrics over `clips`, evaluated in parallel with midpoint sampling.
pub fn evaluate(params: &ModelParams, clips: &[VideoClip]) -> Result<Metrics> {
    if clips.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let outcomes = clips
        .par_iter()
        .map(|clip| {
            let (logits, loss) = predict(params, clip)?;
            Ok((clip.label, argmax(&logits), loss))
        })
        .collect::<Result<Vec<_>>>()?;
    Metrics::from_predictions(params.config().num_classes, &outcomes)
}

/// Per-epoch training summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// `None` when there is no validation set.
    pub val: Option<Metrics>,
}

impl EpochStats {
    /// `epoch<TAB>train_loss<TAB>train_acc<TAB>val_loss<TAB>val_acc`.
    pub fn log_line(&self) -> String {
        let (vl, va) = match &self.val {
            Some(m) => (format!("{:.6}", m.mean_loss), format!("{:.6}", m.accuracy)),
            None => ("nan".into(), "nan".into()),
        };
        format!("{}\t{:.6}\t{:.6}\t{vl}\t{va}", self.epoch, self.train_loss, self.train_accuracy)
    }
}

/// Augments, then splits, following `cfg`.
pub fn prepare_corpus(clips: Vec<VideoClip>, cfg: &TrainConfig) -> Result<(Vec<VideoClip>, Vec<VideoClip>)> {
    let corpus =
        if cfg.augment_multiplicity > 0 { augment_corpus(&clips, cfg.augment_multiplicity, cfg.seed)? } else { clips };
    train_val_split(corpus, cfg.val_fraction, cfg.seed, cfg.grouping)
}

/// Mini-batch training. Each batch's gradient is the mean of its clips'
/// gradients, computed in parallel and summed in clip order, so results do
/// not depend on the thread count. Appends one line per epoch to
/// `cfg.log_path` and rewrites `cfg.checkpoint_path` after every epoch.
pub fn train(
    params: &mut ModelParams,
    train_set: &[VideoClip],
    val_set: &[VideoClip],
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0u64;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let jitter_seed: u64 = rng.gen();
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let mut clip_rng = ChaCha8Rng::seed_from_u64(jitter_seed ^ i as u64);
                    let clip = prepare(&train_set[i], model_extents(params.config()), true, &mut clip_rng)?;
                    let r = clip_gradients(params, &clip.frames, clip.label)?;
                    Ok((r, clip.label))
                })
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / results.len() as f32;
            let mut mean: BTreeMap<String, Tensor> = BTreeMap::new();
            for (r, label) in results {
                loss_sum += r.loss;
                correct += usize::from(argmax(&r.logits) == label);
                for (name, g) in r.grads {
                    match mean.get_mut(&name) {
                        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b * scale),
                        None => {
                            mean.insert(name, g.map(crate::tensor::UnaryOp::Scale(scale as f64))?);
                        }
                    }
                }
            }
            step += 1;
            optimizer.step(params, &mean, step)?;
        }
        let val = if val_set.is_empty() { None } else { Some(evaluate(params, val_set)?) };
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            val,
        };
        log::info!("{}", stats.log_line());
        if let Some(path) = &cfg.log_path {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{}", stats.log_line())?;
        }
        if let Some(path) = &cfg.checkpoint_path {
            save_checkpoint(params, path)?;
        }
        history.push(stats);
    }
    Ok(history)
}

/// Final validation accuracy of the baseline and deformable variants of
/// one architecture, per seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Ablation {
    pub seeds: Vec<u64>,
    pub baseline: Vec<f64>,
    pub deformable: Vec<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

impl Ablation {
    pub fn baseline_mean(&self) -> f64 {
        mean(&self.baseline)
    }

    pub fn deformable_mean(&self) -> f64 {
        mean(&self.deformable)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<20}", "variant")?;
        for s in &self.seeds {
            write!(f, " {:>8}", format!("seed={s}"))?;
        }
        writeln!(f, " {:>8}", "mean")?;
        for (name, accs, m) in [
            ("normal_convlstm", &self.baseline, self.baseline_mean()),
            ("deformable_convlstm", &self.deformable, self.deformable_mean()),
        ] {
            write!(f, "{name:<20}")?;
            for a in accs.iter() {
                write!(f, " {a:>8.4}")?;
            }
            writeln!(f, " {m:>8.4}")?;
        }
        Ok(())
    }
}

/// Trains `cfg.model` with and without its deformable schedule for every
/// seed (model initialization and training order) on one fixed split of
/// `clips`, and reports the final validation accuracies.
pub fn run_ablation(clips: Vec<VideoClip>, cfg: &RunConfig, seeds: &[u64]) -> Result<Ablation> {
    if seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed"));
    }
    if !cfg.model.is_deformable() {
        return Err(Error::Config("ablation needs deformable_per_quartile > 0".into()));
    }
    let (train_set, val_set) = prepare_corpus(clips, &cfg.train)?;
    let mut out = Ablation { seeds: seeds.to_vec(), baseline: Vec::new(), deformable: Vec::new() };
    for &seed in seeds {
        for deformable in [false, true] {
            let mut model = ModelConfig { seed, ..cfg.model.clone() };
            if !deformable {
                model = model.baseline();
            }
            let train_cfg = TrainConfig { seed, checkpoint_path: None, log_path: None, ..cfg.train.clone() };
            let mut params = build(&model)?;
            let history = train(&mut params, &train_set, &val_set, &train_cfg)?;
            let acc = history.last().and_then(|h| h.val.as_ref()).map_or(f64::NAN, |m| m.accuracy);
            log::info!("ablation seed={seed} deformable={deformable} val_acc={acc:.4}");
            if deformable {
                out.deformable.push(acc)
            } else {
                out.baseline.push(acc)
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    fn small_model() -> ModelConfig {
        ModelConfig {
            frames: 8,
            height: 16,
            width: 16,
            conv3d_channels: vec![4, 4],
            convlstm_hidden: 4,
            head_channels: vec![4, 4],
            num_classes: 4,
            deformable_per_quartile: 1,
            ..ModelConfig::tiny()
        }
    }

    #[test]
    fn metrics_for_constant_predictor() {
        let outcomes: Vec<_> = (0..40).map(|i| (i % 4, 0, 1.0)).collect();
        let m = Metrics::from_predictions(4, &outcomes).unwrap();
        assert_eq!(m.accuracy, 0.25);
        assert_eq!(m.total(), 40);
        for k in 0..4 {
            assert_eq!((0..4).map(|j| m.count(k, j)).sum::<u64>(), 10);
        }
        assert!(Metrics::from_predictions(4, &[]).is_err());
    }

    #[test]
    fn evaluate_agrees_with_a_scripted_tally() {
        let cfg = small_model();
        let p = build(&cfg).unwrap();
        let clips = synth_dataset(12, 4, 8, 16, 16, 2).unwrap();
        let m = evaluate(&p, &clips).unwrap();
        let mut correct = 0;
        let mut loss = 0.0;
        for c in &clips {
            let logits = crate::model::forward(&p, &c.frames).unwrap();
            let pred = argmax(logits.data());
            correct += usize::from(pred == c.label);
            let lse = logits.data().iter().map(|&v| (v as f64).exp()).sum::<f64>().ln();
            loss += lse - logits.data()[c.label] as f64;
        }
        assert_eq!(m.accuracy, correct as f64 / 12.0);
        assert!((m.mean_loss - loss / 12.0).abs() < 1e-5);
        assert_eq!(m.total(), 12);
        assert!(evaluate(&p, &[]).is_err());
    }

    #[test]
    fn ablation_table_layout() {
        let a = Ablation { seeds: vec![1, 2], baseline: vec![0.5, 0.75], deformable: vec![1.0, 0.5] };
        assert_eq!(a.baseline_mean(), 0.625);
        let text = a.to_string();
        let rows: Vec<_> = text.lines().collect();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].starts_with("variant") && rows[0].contains("seed=2"));
        assert!(rows[1].starts_with("normal_convlstm") && rows[1].ends_with("0.6250"));
        assert!(rows[2].starts_with("deformable_convlstm") && rows[2].ends_with("0.7500"));
    }

    #[test]
    fn argmax_ties_go_first() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }

    #[test]
    fn run_config_round_trip() {
        let cfg = RunConfig {
            model: ModelConfig::tiny(),
            train: TrainConfig {
                optimizer: OptimizerKind::SgdMomentum { momentum: 0.5 },
                grouping: Grouping::PerClip,
                log_path: Some("a/log.tsv".into()),
                ..TrainConfig::default()
            },
        };
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(RunConfig::parse("learning_rate=0").is_err());
        assert!(RunConfig::parse("batch_size=0").is_err());
        assert!(RunConfig::parse("optimizer=rmsprop").is_err());
        assert!(RunConfig::parse("whatever=1").is_err());
    }

    #[test]
    fn training_is_deterministic_and_logs() {
        let dir = tempfile::tempdir().unwrap();
        let clips = synth_dataset(16, 4, 10, 20, 20, 1).unwrap();
        let (tr, va) = prepare_corpus(clips, &TrainConfig::default()).unwrap();
        let run = |tag: &str| {
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 4,
                log_path: Some(dir.path().join(format!("{tag}.tsv"))),
                checkpoint_path: Some(dir.path().join(format!("{tag}.ckpt"))),
                ..TrainConfig::default()
            };
            let mut p = build(&small_model()).unwrap();
            let h = train(&mut p, &tr, &va, &cfg).unwrap();
            (
                h,
                std::fs::read(dir.path().join(format!("{tag}.tsv"))).unwrap(),
                std::fs::read(dir.path().join(format!("{tag}.ckpt"))).unwrap(),
            )
        };
        let a = run("a");
        let b = run("b");
        assert_eq!(a, b);
        let log = String::from_utf8(a.1).unwrap();
        let lines: Vec<_> = log.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split('\t').count(), 5);
        assert!(lines[1].starts_with("2\t"));
    }

    #[test]
    fn loss_decreases_on_one_clip() {
        let clip = synth_dataset(1, 4, 8, 16, 16, 5).unwrap();
        let cfg = TrainConfig { epochs: 25, batch_size: 1, learning_rate: 3e-3, ..TrainConfig::default() };
        let mut p = build(&small_model()).unwrap();
        let h = train(&mut p, &clip, &[], &cfg).unwrap();
        assert!(h.last().unwrap().train_loss < 0.5 * h[0].train_loss, "{h:?}");
    }
}
