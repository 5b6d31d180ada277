//! Experiment configuration, ablation presets and the training loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{make_views, AuxPolicy, BasicPolicy, Image, ThirdView};
use crate::data::{
    batch_sampler, generate_synthetic, load_cifar10, LabeledDataset, Normalizer, Split, SyntheticSpec,
};
use crate::eval::{knn_evaluate, EvalResult, DEFAULT_K, DEFAULT_KNN_TEMPERATURE};
use crate::loss::{full_loss_backward, BatchEmbeddings, LossKind, LossReport, DEFAULT_TEMPERATURE};
use crate::model::{init_encoder, Checkpoint, EncoderConfig, EncoderState};
use crate::optim::{ScheduleConfig, ScheduleKind, Sgd, SgdConfig};
use crate::seed;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

const INIT_STREAM: u64 = 1;
const SAMPLER_STREAM: u64 = 2;
const AUGMENT_STREAM: u64 = 3;

/// Column header of `metrics.csv`.
pub const METRICS_HEADER: &str =
    "epoch,step,lr,loss,l_xy,l_zx,l_zy,mean_pos_sim,mean_neg_sim,grad_pos,grad_neg_sum";

pub const PRESETS: [&str; 5] = [
    "two_basic_views",
    "three_basic_views",
    "step_lr",
    "nt_xent_loss",
    "randaugment_aux",
];

/// Which views enter the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewScheme {
    /// Two basic views and one auxiliary view.
    #[default]
    ThreeView,
    /// Two basic views; only `L_xy`.
    TwoBasic,
    /// The third view is another basic draw.
    ThreeBasic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic(SyntheticSpec),
    Cifar10 {
        dir: PathBuf,
        /// Keep only the first `n` training images of each class.
        #[serde(default)]
        train_per_class: Option<usize>,
        #[serde(default)]
        test_per_class: Option<usize>,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SyntheticSpec::default())
    }
}

impl DatasetConfig {
    /// A directory is read as CIFAR-10 batch files, anything else as a JSON dataset config.
    pub fn from_path(path: &Path) -> Result<Self> {
        if path.is_dir() {
            return Ok(DatasetConfig::Cifar10 {
                dir: path.to_path_buf(),
                train_per_class: None,
                test_per_class: None,
            });
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, 0, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn load(&self, split: Split) -> Result<LabeledDataset> {
        match self {
            DatasetConfig::Synthetic(spec) => generate_synthetic(spec, split),
            DatasetConfig::Cifar10 {
                dir,
                train_per_class,
                test_per_class,
            } => {
                let ds = load_cifar10(dir, split)?;
                let keep = match split {
                    Split::Train => train_per_class,
                    Split::Test => test_per_class,
                };
                Ok(match keep {
                    Some(n) => ds.per_class_subset(*n),
                    None => ds,
                })
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            DatasetConfig::Synthetic(spec) => spec.validate(),
            DatasetConfig::Cifar10 { .. } => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    /// Only applied when the batch size exceeds 256.
    pub warmup_epochs: usize,
    /// Multiply the base rate by `batch_size / 128`.
    pub lr_scaling: bool,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            kind: ScheduleKind::Cosine,
            warmup_epochs: 10,
            lr_scaling: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Evaluate after every `every` epochs and after the last one; 0 means only at the end.
    pub every: usize,
    /// Also evaluate the untrained encoder.
    pub at_start: bool,
    pub k: usize,
    pub temperature: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            every: 10,
            at_start: true,
            k: DEFAULT_K,
            temperature: DEFAULT_KNN_TEMPERATURE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub encoder: EncoderConfig,
    pub basic: BasicPolicy,
    pub aux: AuxPolicy,
    pub loss: LossKind,
    pub temperature: f64,
    pub view_scheme: ViewScheme,
    pub sgd: SgdConfig,
    pub schedule: ScheduleSection,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            encoder: EncoderConfig::default(),
            basic: BasicPolicy::default(),
            aux: AuxPolicy::default(),
            loss: LossKind::GntXent,
            temperature: DEFAULT_TEMPERATURE,
            view_scheme: ViewScheme::ThreeView,
            sgd: SgdConfig::default(),
            schedule: ScheduleSection::default(),
            epochs: 200,
            batch_size: 128,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, 0, e))?;
        Self::from_json(&text)
    }

    pub fn schedule_config(&self) -> ScheduleConfig {
        ScheduleConfig {
            kind: self.schedule.kind,
            total_epochs: self.epochs,
            warmup_epochs: self.schedule.warmup_epochs,
            batch_size: self.batch_size,
            lr_scaling: self.schedule.lr_scaling,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.encoder.validate()?;
        self.basic.validate()?;
        if self.view_scheme == ViewScheme::ThreeView {
            self.aux.validate()?;
            if self.aux.output_size != self.encoder.image_size {
                return Err(Error::Config(format!(
                    "aux output_size {} differs from encoder image_size {}",
                    self.aux.output_size, self.encoder.image_size
                )));
            }
        }
        if self.basic.output_size != self.encoder.image_size {
            return Err(Error::Config(format!(
                "basic output_size {} differs from encoder image_size {}",
                self.basic.output_size, self.encoder.image_size
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be ≥ 2, got {}", self.batch_size)));
        }
        if self.eval.k == 0 || self.eval.temperature <= 0.0 {
            return Err(Error::Config("eval k and temperature must be positive".into()));
        }
        self.sgd.validate()?;
        self.schedule_config().validate()
    }

    /// Applies a named ablation delta.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "two_basic_views" => self.view_scheme = ViewScheme::TwoBasic,
            "three_basic_views" => self.view_scheme = ViewScheme::ThreeBasic,
            "step_lr" => self.schedule.kind = ScheduleKind::Step,
            "nt_xent_loss" => self.loss = LossKind::NtXent,
            "randaugment_aux" => {
                let defaults = AuxPolicy::default();
                self.aux.sub_policies.clear();
                self.aux.num_ops = defaults.num_ops;
                self.aux.magnitude = defaults.magnitude;
                self.aux.op_pool = defaults.op_pool;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; valid presets: {}",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(())
    }
}

/// The default config with one preset applied.
pub fn ablation_preset(name: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_preset(name)?;
    Ok(cfg)
}

/// One optimizer step's diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub l_xy: f64,
    pub l_zx: f64,
    pub l_zy: f64,
    pub mean_pos_sim: f64,
    pub mean_neg_sim: f64,
    pub grad_pos: f64,
    pub grad_neg_sum: f64,
    /// Seconds since training started; written to `timing.csv`, not `metrics.csv`.
    pub wall_time: f64,
}

impl MetricsRow {
    fn new(epoch: usize, step: usize, lr: f64, r: &LossReport, wall_time: f64) -> Self {
        MetricsRow {
            epoch,
            step,
            lr,
            loss: r.total,
            l_xy: r.components[0],
            l_zx: r.components[1],
            l_zy: r.components[2],
            mean_pos_sim: r.mean_pos_sim,
            mean_neg_sim: r.mean_neg_sim,
            grad_pos: r.mean_grad_pos,
            grad_neg_sum: r.mean_grad_neg_sum,
            wall_time,
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.lr,
            self.loss,
            self.l_xy,
            self.l_zx,
            self.l_zy,
            self.mean_pos_sim,
            self.mean_neg_sim,
            self.grad_pos,
            self.grad_neg_sum
        )
    }
}

/// kNN result after `epoch` completed epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub knn: EvalResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub final_mean_pos_sim: f64,
    pub final_mean_neg_sim: f64,
    pub initial_knn_top1: Option<f64>,
    pub final_knn_top1: f64,
    /// Images passed through the basic pipeline.
    pub basic_draws: usize,
    /// Images passed through the auxiliary pipeline.
    pub aux_draws: usize,
    pub evals: Vec<EvalRecord>,
    pub normalizer: Normalizer,
}

pub struct TrainOutcome {
    pub state: EncoderState,
    pub metrics: Vec<MetricsRow>,
    pub summary: TrainSummary,
}

/// Progress notifications from [`train`].
#[derive(Clone, Debug)]
pub enum TrainEvent<'a> {
    Epoch { epoch: usize, mean_loss: f64, lr: f64 },
    Eval(&'a EvalRecord),
}

struct Outputs {
    dir: PathBuf,
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    evals: BufWriter<File>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, 0, e))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = dir.join(name);
            File::create(&p).map(BufWriter::new).map_err(|e| Error::io(&p, 0, e))
        };
        let mut out = Outputs {
            dir: dir.to_path_buf(),
            metrics: open("metrics.csv")?,
            timing: open("timing.csv")?,
            evals: open("evals.jsonl")?,
        };
        out.write_line(|o| &mut o.metrics, "metrics.csv", METRICS_HEADER)?;
        out.write_line(|o| &mut o.timing, "timing.csv", "step,wall_time")?;
        Ok(out)
    }

    fn write_line(
        &mut self,
        pick: impl Fn(&mut Self) -> &mut BufWriter<File>,
        name: &str,
        line: &str,
    ) -> Result<()> {
        let path = self.dir.join(name);
        writeln!(pick(self), "{line}").map_err(|e| Error::io(path, 0, e))
    }

    fn flush(&mut self) -> Result<()> {
        for (w, name) in [
            (&mut self.metrics, "metrics.csv"),
            (&mut self.timing, "timing.csv"),
            (&mut self.evals, "evals.jsonl"),
        ] {
            w.flush().map_err(|e| Error::io(self.dir.join(name), 0, e))?;
        }
        Ok(())
    }
}

/// Stacks the view images of a batch and pushes them through one encoder pass.
struct StepViews {
    images: Vec<Image>,
    has_third: bool,
}

fn build_views(
    cfg: &ExperimentConfig,
    data: &[Image],
    batch: &[usize],
    epoch: usize,
    counts: &mut (usize, usize),
) -> Result<StepViews> {
    let n = batch.len();
    let third = match cfg.view_scheme {
        ViewScheme::ThreeView => ThirdView::Aux(&cfg.aux),
        ViewScheme::ThreeBasic => ThirdView::Basic,
        ViewScheme::TwoBasic => ThirdView::None,
    };
    let mut first = Vec::with_capacity(n);
    let mut second = Vec::with_capacity(n);
    let mut thirds = Vec::with_capacity(n);
    for &i in batch {
        let mut rng = seed::rng(cfg.seed, &[AUGMENT_STREAM, epoch as u64, i as u64]);
        let (a, b, c) = make_views(&data[i], &cfg.basic, third, &mut rng)?;
        first.push(a);
        second.push(b);
        counts.0 += 2;
        if let Some(c) = c {
            thirds.push(c);
            match third {
                ThirdView::Aux(_) => counts.1 += 1,
                _ => counts.0 += 1,
            }
        }
    }
    let has_third = !thirds.is_empty();
    first.extend(second);
    first.extend(thirds);
    Ok(StepViews {
        images: first,
        has_third,
    })
}

fn split_rows(t: &Tensor<f32>, n: usize, part: usize) -> Result<Tensor<f64>> {
    let (_, d) = t.dims2()?;
    let data = t.data()[part * n * d..(part + 1) * n * d].iter().map(|&v| v as f64).collect();
    Tensor::new([n, d], data)
}

fn checkpoint_metadata(cfg: &ExperimentConfig, normalizer: &Normalizer, epoch: usize) -> serde_json::Value {
    serde_json::json!({
        "epoch": epoch,
        "seed": cfg.seed,
        "normalizer": normalizer,
        "dataset": cfg.dataset,
    })
}

/// Reads the normalizer stored by [`train`] in a checkpoint.
pub fn checkpoint_normalizer(ck: &Checkpoint) -> Result<Normalizer> {
    let v = ck
        .metadata
        .get("normalizer")
        .ok_or_else(|| Error::State("checkpoint has no normalizer".into()))?;
    Ok(serde_json::from_value(v.clone())?)
}

/// Runs the full experiment, writing metrics, evaluations and checkpoints
/// under `cfg.output_dir`.
pub fn train(cfg: &ExperimentConfig, observer: &mut dyn FnMut(TrainEvent<'_>)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set = cfg.dataset.load(Split::Train)?;
    let test_set = cfg.dataset.load(Split::Test)?;
    if train_set.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "batch_size {} exceeds training set size {}",
            cfg.batch_size,
            train_set.len()
        )));
    }
    let normalizer = Normalizer::fit(train_set.images())?;
    let mut state: EncoderState = init_encoder(&cfg.encoder, seed::derive(cfg.seed, &[INIT_STREAM]))?;
    let refs: Vec<&Tensor<f32>> = state.params().iter().collect();
    let mut sgd = Sgd::new(cfg.sgd.clone(), &refs);
    let schedule = cfg.schedule_config();
    let mut out = Outputs::create(&cfg.output_dir)?;

    let images = train_set.unlabeled();
    let n = cfg.batch_size;
    let steps_per_epoch = images.len() / n;
    let mut metrics = Vec::new();
    let mut evals = Vec::new();
    let mut counts = (0usize, 0usize);
    let mut step = 0usize;
    let started = Instant::now();

    let evaluate = |state: &EncoderState, epoch: usize, out: &mut Outputs| -> Result<EvalRecord> {
        let knn = knn_evaluate(state, &normalizer, &train_set, &test_set, cfg.eval.k, cfg.eval.temperature)?;
        let record = EvalRecord { epoch, knn };
        out.write_line(|o| &mut o.evals, "evals.jsonl", &serde_json::to_string(&record)?)?;
        Ok(record)
    };

    if cfg.eval.at_start {
        let r = evaluate(&state, 0, &mut out)?;
        observer(TrainEvent::Eval(&r));
        evals.push(r);
    }

    for epoch in 0..cfg.epochs {
        let batches = batch_sampler(images.len(), n, epoch, seed::derive(cfg.seed, &[SAMPLER_STREAM]))?;
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (s, batch) in batches.iter().enumerate() {
            let t = epoch as f64 + s as f64 / steps_per_epoch as f64;
            lr = schedule.lr(t, cfg.sgd.base_lr)?;
            let views = build_views(cfg, images.images(), batch, epoch, &mut counts)?;

            let mut tape = Tape::new();
            let params = state.bind(&mut tape);
            let input = tape.constant(normalizer.to_tensor::<f32, _>(&views.images)?);
            let fwd = state.forward(&mut tape, &params, input)?;
            let emb = tape.value(fwd.embedding);
            let z = if views.has_third { Some(split_rows(emb, n, 2)?) } else { None };
            let batch_emb = BatchEmbeddings::new(split_rows(emb, n, 0)?, split_rows(emb, n, 1)?, z)?;
            let (report, grads) = full_loss_backward(&batch_emb, cfg.temperature, cfg.loss)?;
            if !report.total.is_finite() {
                return Err(Error::NonFinite { step });
            }

            let mut seed_data: Vec<f32> = Vec::with_capacity(emb.len());
            for g in std::iter::once(&grads.x).chain([&grads.y]).chain(grads.z.as_ref()) {
                seed_data.extend(g.data().iter().map(|&v| v as f32));
            }
            let seed_grad = Tensor::new(emb.shape(), seed_data)?;
            let mut g = tape.backward_with(fwd.embedding, seed_grad)?;
            let param_grads: Vec<Tensor<f32>> = params
                .iter()
                .map(|&p| g.take(p).ok_or_else(|| Error::State("missing parameter gradient".into())))
                .collect::<Result<_>>()?;
            let grad_refs: Vec<&Tensor<f32>> = param_grads.iter().collect();
            let mut param_refs: Vec<&mut Tensor<f32>> = state.params_mut().iter_mut().collect();
            sgd.step(&mut param_refs, &grad_refs, lr)?;
            if !state.is_finite() {
                return Err(Error::NonFinite { step });
            }

            let row = MetricsRow::new(epoch, step, lr, &report, started.elapsed().as_secs_f64());
            out.write_line(|o| &mut o.metrics, "metrics.csv", &row.csv_line())?;
            out.write_line(|o| &mut o.timing, "timing.csv", &format!("{},{}", step, row.wall_time))?;
            loss_sum += report.total;
            metrics.push(row);
            step += 1;
        }
        observer(TrainEvent::Epoch {
            epoch,
            mean_loss: loss_sum / batches.len().max(1) as f64,
            lr,
        });

        let done = epoch + 1;
        let due = cfg.eval.every > 0 && done % cfg.eval.every == 0;
        if due || done == cfg.epochs {
            let r = evaluate(&state, done, &mut out)?;
            observer(TrainEvent::Eval(&r));
            evals.push(r);
            let ck = Checkpoint::from_encoder(&state, checkpoint_metadata(cfg, &normalizer, done));
            ck.save(&out.dir.join("checkpoints").join(format!("epoch_{done:04}.ckpt")))?;
            if done == cfg.epochs {
                ck.save(&out.dir.join("final.ckpt"))?;
            }
            out.flush()?;
        }
    }
    out.flush()?;

    let last_epoch: Vec<&MetricsRow> = metrics.iter().filter(|r| r.epoch + 1 == cfg.epochs).collect();
    let mean = |f: fn(&MetricsRow) -> f64| {
        if last_epoch.is_empty() {
            f64::NAN
        } else {
            last_epoch.iter().map(|r| f(r)).sum::<f64>() / last_epoch.len() as f64
        }
    };
    let summary = TrainSummary {
        epochs: cfg.epochs,
        steps: step,
        final_loss: mean(|r| r.loss),
        final_mean_pos_sim: mean(|r| r.mean_pos_sim),
        final_mean_neg_sim: mean(|r| r.mean_neg_sim),
        initial_knn_top1: cfg.eval.at_start.then(|| evals[0].knn.top1_accuracy),
        final_knn_top1: evals.last().map_or(f64::NAN, |r| r.knn.top1_accuracy),
        basic_draws: counts.0,
        aux_draws: counts.1,
        evals,
        normalizer,
    };
    let summary_path = cfg.output_dir.join("summary.json");
    fs::write(&summary_path, serde_json::to_vec_pretty(&summary)?).map_err(|e| Error::io(&summary_path, 0, e))?;
    let config_path = cfg.output_dir.join("config.json");
    fs::write(&config_path, serde_json::to_vec_pretty(cfg)?).map_err(|e| Error::io(&config_path, 0, e))?;

    Ok(TrainOutcome {
        state,
        metrics,
        summary,
    })
}
