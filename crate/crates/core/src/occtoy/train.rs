//! Cross-entropy training with AdamW and held-out evaluation.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;

use crate::autograd::optim::{adamw_step, AdamWConfig, OptimState};
use crate::autograd::tape::{apply_bn_updates, forward_record};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::{derive_seed, stream_rng};
use crate::tensor::Tensor;

use super::metric::{IouCounts, IouReport};
use super::net::{infer, input_batch, predict_labels, NetSpec, ToyNet};
use super::scene::{Dataset, LabelTensor, SceneConfig, ToyScene};
use crate::units::exec::Mode;

/// Learning rate used for the toy task unless overridden.
pub const TOY_LR: f64 = 5e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub scene: SceneConfig,
    pub optim: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 200,
            batch_size: 8,
            n_train: 64,
            n_test: 16,
            scene: SceneConfig::default(),
            optim: AdamWConfig {
                lr: TOY_LR,
                ..AdamWConfig::default()
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::InvalidArgument("training and held-out splits must be nonempty".into()));
        }
        if self.batch_size == 0 || self.batch_size > self.n_train {
            return Err(Error::InvalidArgument(format!(
                "batch size {} for {} training scenes",
                self.batch_size, self.n_train
            )));
        }
        let o = &self.optim;
        if !(o.lr >= 0.0 && o.weight_decay >= 0.0 && o.eps > 0.0) || !(0.0..1.0).contains(&o.beta1) {
            return Err(Error::InvalidArgument(format!("optimizer settings {o:?}")));
        }
        if !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::InvalidArgument(format!("optimizer settings {o:?}")));
        }
        self.scene.validate()
    }

    /// The network spec matching this task's grid, classes and image size.
    pub fn net_spec(&self, base: &NetSpec) -> NetSpec {
        NetSpec {
            grid: self.scene.grid,
            n_class: self.scene.n_class,
            image: self.scene.image,
            ..*base
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::generate(derive_seed(self.seed, 1), &self.scene, self.n_train, self.n_test)
    }
}

/// Held-out evaluation of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub iou: IouReport,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub seed: u64,
    /// Loss of every optimizer step's batch before its update.
    pub step_losses: Vec<f64>,
    /// Mean of `step_losses` per pass over the training split.
    pub epoch_losses: Vec<f64>,
    /// Inference-mode loss on the full training split before and after
    /// training.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Held-out scores.
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub test_loss: f64,
    /// Held-out mIoU of always predicting the most frequent training class.
    pub baseline_miou: f64,
    pub wall_time: Duration,
    /// Caller-provided digest of the run configuration.
    pub config_hash: Option<String>,
}

impl TrainReport {
    /// Equality of everything except wall time.
    pub fn same_outcome(&self, o: &Self) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let iou_bits = |v: &[Option<f64>]| v.iter().map(|x| x.map(f64::to_bits)).collect::<Vec<_>>();
        self.seed == o.seed
            && bits(&self.step_losses) == bits(&o.step_losses)
            && bits(&self.epoch_losses) == bits(&o.epoch_losses)
            && bits(&[self.initial_loss, self.final_loss, self.miou, self.test_loss, self.baseline_miou])
                == bits(&[o.initial_loss, o.final_loss, o.miou, o.test_loss, o.baseline_miou])
            && iou_bits(&self.per_class_iou) == iou_bits(&o.per_class_iou)
            && self.config_hash == o.config_hash
    }
}

/// Mean voxel cross-entropy of a batch of logit maps and its gradient.
pub fn cross_entropy(logits: &[Tensor], labels: &[&LabelTensor], n_class: usize) -> Result<(f64, Vec<Tensor>)> {
    if logits.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} logit maps for {} label grids",
            logits.len(),
            labels.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let total: usize = labels.iter().map(|l| l.len()).sum();
    let inv = 1.0 / total as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    let mut p = vec![0.0; n_class];
    for (t, l) in logits.iter().zip(labels) {
        let (ch, x, y) = t.chw()?;
        let z = ch / n_class.max(1);
        if n_class == 0 || z * n_class != ch || l.dims() != [x, y, z] {
            return Err(Error::ShapeMismatch {
                expected: vec![z * n_class, x, y],
                got: t.dims().to_vec(),
            });
        }
        let plane = x * y;
        let d = t.data();
        let mut g = Tensor::zeros(t.dims())?;
        let gd = g.data_mut();
        for pix in 0..plane {
            for zi in 0..z {
                let label = l.data()[pix * z + zi];
                if label >= n_class {
                    return Err(Error::LabelOutOfRange { label, n_class });
                }
                let at = |c: usize| (zi * n_class + c) * plane + pix;
                let m = (0..n_class).map(|c| d[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (c, pc) in p.iter_mut().enumerate() {
                    *pc = (d[at(c)] - m).exp();
                    sum += *pc;
                }
                loss += sum.ln() + m - d[at(label)];
                for (c, pc) in p.iter().enumerate() {
                    let onehot = if c == label { 1.0 } else { 0.0 };
                    gd[at(c)] = (pc / sum - onehot) * inv;
                }
            }
        }
        grads.push(g);
    }
    let loss = loss * inv;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok((loss, grads))
}

/// Most frequent label over the given scenes (lowest class on ties).
pub fn majority_class(scenes: &[ToyScene], n_class: usize) -> usize {
    let mut counts = vec![0u64; n_class];
    for s in scenes {
        for &l in s.labels.data() {
            if l < n_class {
                counts[l] += 1;
            }
        }
    }
    (0..n_class).fold(0, |b, c| if counts[c] > counts[b] { c } else { b })
}

/// Held-out mIoU of predicting `class` everywhere.
pub fn constant_baseline(scenes: &[ToyScene], class: usize, n_class: usize) -> Result<IouReport> {
    let mut counts = IouCounts::new(n_class);
    for s in scenes {
        let pred = LabelTensor::new(s.labels.dims(), vec![class; s.labels.len()])?;
        counts.add(&pred, &s.labels)?;
    }
    Ok(counts.report())
}

const EVAL_CHUNK: usize = 16;

/// Inference-mode mIoU and loss over `scenes`, scored as one split.
pub fn evaluate(net: &ToyNet, store: &ParamStore, scenes: &[ToyScene]) -> Result<EvalReport> {
    let n_class = net.spec.n_class;
    let mut counts = IouCounts::new(n_class);
    let mut loss_sum = 0.0;
    let mut voxels = 0usize;
    for chunk in scenes.chunks(EVAL_CHUNK) {
        let logits = infer(net, store, chunk)?;
        let labels: Vec<&LabelTensor> = chunk.iter().map(|s| &s.labels).collect();
        let (l, _) = cross_entropy(&logits, &labels, n_class)?;
        let n: usize = labels.iter().map(|l| l.len()).sum();
        loss_sum += l * n as f64;
        voxels += n;
        for (t, s) in logits.iter().zip(chunk) {
            counts.add(&predict_labels(t, n_class)?, &s.labels)?;
        }
    }
    if voxels == 0 {
        return Err(Error::EmptyTensor);
    }
    Ok(EvalReport {
        iou: counts.report(),
        loss: loss_sum / voxels as f64,
    })
}

/// Trains `net` in place on `data.train` and scores `data.test`.
pub fn train(net: &ToyNet, store: &mut ParamStore, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::InvalidArgument("empty dataset split".into()));
    }
    let start = Instant::now();
    let n_class = net.spec.n_class;
    let initial_loss = evaluate(net, store, &data.train)?.loss;
    let mut state = OptimState::new(cfg.optim);
    let batches_per_epoch = data.train.len() / cfg.batch_size;
    let mut order: Vec<usize> = Vec::new();
    let mut step_losses = Vec::with_capacity(cfg.steps);
    let mut epoch_losses = Vec::new();
    let mut epoch_sum = 0.0;
    let mut epoch_steps = 0usize;
    for step in 0..cfg.steps {
        let b = step % batches_per_epoch;
        if b == 0 {
            order = (0..data.train.len()).collect();
            order.shuffle(&mut stream_rng(derive_seed(cfg.seed, 2), (step / batches_per_epoch) as u64));
        }
        let batch: Vec<&ToyScene> = order[b * cfg.batch_size..(b + 1) * cfg.batch_size]
            .iter()
            .map(|&i| &data.train[i])
            .collect();
        let x = input_batch(batch.iter().copied())?;
        let labels: Vec<&LabelTensor> = batch.iter().map(|s| &s.labels).collect();
        let (loss, grads, updates) = {
            let (tape, out) = forward_record(net, store, Mode::TRAIN, x)?;
            let (loss, dy) = cross_entropy(tape.value(out)?, &labels, n_class)?;
            let back = tape.backward(out, dy)?;
            (loss, back.params, tape.into_bn_updates())
        };
        apply_bn_updates(store, &updates)?;
        adamw_step(store, &grads, &mut state)?;
        step_losses.push(loss);
        epoch_sum += loss;
        epoch_steps += 1;
        if b + 1 == batches_per_epoch || step + 1 == cfg.steps {
            epoch_losses.push(epoch_sum / epoch_steps as f64);
            epoch_sum = 0.0;
            epoch_steps = 0;
        }
    }
    let final_loss = evaluate(net, store, &data.train)?.loss;
    let test = evaluate(net, store, &data.test)?;
    let majority = majority_class(&data.train, n_class);
    let baseline = constant_baseline(&data.test, majority, n_class)?;
    Ok(TrainReport {
        seed: cfg.seed,
        step_losses,
        epoch_losses,
        initial_loss,
        final_loss,
        miou: test.iou.mean,
        per_class_iou: test.iou.per_class,
        test_loss: test.loss,
        baseline_miou: baseline.mean,
        wall_time: start.elapsed(),
        config_hash: None,
    })
}

/// Builds a network from `spec`, generates the task data and trains.
pub fn run(spec: &NetSpec, cfg: &TrainConfig) -> Result<(ToyNet, ParamStore, TrainReport)> {
    cfg.validate()?;
    let spec = cfg.net_spec(spec);
    let mut store = ParamStore::new();
    let net = ToyNet::build(&spec, &mut store, derive_seed(cfg.seed, 0))?;
    let data = cfg.dataset()?;
    let report = train(&net, &mut store, &data, cfg)?;
    Ok((net, store, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TrainConfig {
        TrainConfig {
            steps: 3,
            batch_size: 2,
            n_train: 4,
            n_test: 2,
            ..Default::default()
        }
    }

    #[test]
    fn cross_entropy_matches_hand_values() {
        // One voxel, two classes, logits (0, ln 3): p = (1/4, 3/4).
        let t = Tensor::new(&[2, 1, 1], vec![0.0, 3f64.ln()]).unwrap();
        let l = LabelTensor::new(&[1, 1, 1], vec![1]).unwrap();
        let (loss, g) = cross_entropy(std::slice::from_ref(&t), &[&l], 2).unwrap();
        assert!((loss - (4.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((g[0].data()[0] - 0.25).abs() < 1e-15);
        assert!((g[0].data()[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_gradient_matches_differences() {
        let t = Tensor::new(&[4, 1, 2], vec![0.3, -1.0, 2.0, 0.1, -0.5, 0.7, 1.1, 0.0]).unwrap();
        let l = LabelTensor::new(&[1, 2, 2], vec![1, 0, 0, 1]).unwrap();
        let (_, g) = cross_entropy(std::slice::from_ref(&t), &[&l], 2).unwrap();
        for i in 0..t.len() {
            let mut p = t.clone();
            p.data_mut()[i] += 1e-6;
            let mut m = t.clone();
            m.data_mut()[i] -= 1e-6;
            let fd = (cross_entropy(&[p], &[&l], 2).unwrap().0 - cross_entropy(&[m], &[&l], 2).unwrap().0) / 2e-6;
            assert!((fd - g[0].data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_lr_leaves_trainables_unchanged() {
        let mut cfg = small();
        cfg.optim.lr = 0.0;
        let spec = cfg.net_spec(&NetSpec::default());
        let mut store = ParamStore::new();
        let net = ToyNet::build(&spec, &mut store, 1).unwrap();
        let before = store.clone();
        train(&net, &mut store, &cfg.dataset().unwrap(), &cfg).unwrap();
        for id in store.trainable_ids() {
            assert_eq!(store.tensor(id), before.tensor(id), "{}", store.name(id));
        }
    }

    #[test]
    fn repeated_runs_agree() {
        let cfg = small();
        let (_, sa, a) = run(&NetSpec::default(), &cfg).unwrap();
        let (_, sb, b) = run(&NetSpec::default(), &cfg).unwrap();
        assert!(a.same_outcome(&b));
        assert_eq!(sa, sb);
        assert_eq!(a.step_losses.len(), 3);
        assert_eq!(a.epoch_losses.len(), 2);
        assert!(a.step_losses.iter().all(|l| l.is_finite()));
        assert!((0.0..=1.0).contains(&a.miou));
    }

    #[test]
    fn baseline_of_all_free_prediction() {
        let scenes = vec![crate::occtoy::scene::generate_scene(0, &SceneConfig::default()).unwrap()];
        assert_eq!(majority_class(&scenes, 4), 0);
        let b = constant_baseline(&scenes, 0, 4).unwrap();
        let free = scenes[0].labels.data().iter().filter(|&&l| l == 0).count() as f64 / 1024.0;
        let present = b.per_class.iter().flatten().count() as f64;
        assert!((b.mean - free / present).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = small();
        cfg.batch_size = 9;
        assert!(run(&NetSpec::default(), &cfg).is_err());
        let mut cfg = small();
        cfg.n_test = 0;
        assert!(run(&NetSpec::default(), &cfg).is_err());
    }
}
