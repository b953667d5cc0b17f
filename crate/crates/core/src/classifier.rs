//! The target classifier: a small CNN for fast runs or a reduced residual
//! network, with cross-entropy training, evaluation and input gradients.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetHandle, Split};
use crate::nn::{ops, Adam, AdamConfig, BatchNorm2d, Checkpoint, CheckpointMeta, Conv2d, Direction, Linear, ParamStore};
use crate::rng;
use crate::{Error, Result};

pub const CLASSIFIER_KIND: &str = "classifier";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Four layers: three stride-2 convolutions and a linear head.
    SmallCnn,
    /// Three residual stages of widths 16/32/64 with batch norm.
    Resnet,
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Profile::SmallCnn => "small-cnn",
            Profile::Resnet => "resnet",
        })
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small-cnn" => Ok(Profile::SmallCnn),
            "resnet" => Ok(Profile::Resnet),
            _ => Err(Error::InvalidConfig(format!("unknown classifier profile `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Batch norm uses and updates batch statistics.
    Train,
    /// Batch norm uses frozen running statistics.
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierSpec {
    pub profile: Profile,
    pub num_classes: usize,
    pub input_shape: (usize, usize, usize),
    /// Residual blocks per stage (3 gives the 20-layer network).
    pub blocks_per_stage: usize,
    /// Initialize the output layer to zero, giving uniform predictions.
    pub zero_head: bool,
    pub double_precision: bool,
    pub seed: u64,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            profile: Profile::SmallCnn,
            num_classes: 10,
            input_shape: (1, 28, 28),
            blocks_per_stage: 3,
            zero_head: false,
            double_precision: false,
            seed: 0,
        }
    }
}

impl ClassifierSpec {
    pub fn dtype(&self) -> DType {
        if self.double_precision {
            DType::F64
        } else {
            DType::F32
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    c1: Conv2d,
    bn1: BatchNorm2d,
    c2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl Block {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let bn = |b: &BatchNorm2d, t: &Tensor| match mode {
            Mode::Train => b.forward_train(t),
            Mode::Eval => b.forward_eval(t),
        };
        let h = bn(&self.bn1, &self.c1.forward(x)?)?.relu()?;
        let h = bn(&self.bn2, &self.c2.forward(&h)?)?;
        let s = match &self.shortcut {
            Some((c, b)) => bn(b, &c.forward(x)?)?,
            None => x.clone(),
        };
        Ok((h + s)?.relu()?)
    }
}

#[derive(Debug, Clone)]
enum Arch {
    Small { convs: [Conv2d; 3], head: Linear },
    Resnet { stem: Conv2d, stem_bn: BatchNorm2d, blocks: Vec<Block>, head: Linear },
}

#[derive(Debug, Clone)]
pub struct Classifier {
    spec: ClassifierSpec,
    store: ParamStore,
    arch: Arch,
}

impl Classifier {
    pub fn new(spec: ClassifierSpec) -> Result<Self> {
        if spec.num_classes < 2 {
            return Err(Error::InvalidConfig("a classifier needs at least two classes".into()));
        }
        let (c, h, w) = spec.input_shape;
        let mut rng = rng::stream(spec.seed, "classifier-init");
        let mut store = ParamStore::new(spec.dtype());
        let k = spec.num_classes;
        let arch = match spec.profile {
            Profile::SmallCnn => {
                let convs = [
                    Conv2d::new(&mut store, "conv1", c, 16, 3, 2, 1, &mut rng)?,
                    Conv2d::new(&mut store, "conv2", 16, 32, 3, 2, 1, &mut rng)?,
                    Conv2d::new(&mut store, "conv3", 32, 64, 3, 2, 1, &mut rng)?,
                ];
                let flat = 64 * h.div_ceil(8) * w.div_ceil(8);
                let head = if spec.zero_head {
                    Linear::zeroed(&mut store, "fc", flat, k)?
                } else {
                    Linear::new(&mut store, "fc", flat, k, &mut rng)?
                };
                Arch::Small { convs, head }
            }
            Profile::Resnet => {
                let stem = Conv2d::new(&mut store, "stem", c, 16, 3, 1, 1, &mut rng)?;
                let stem_bn = BatchNorm2d::new(&mut store, "stem_bn", 16)?;
                let mut blocks = Vec::new();
                let mut in_ch = 16;
                for (stage, width) in [16usize, 32, 64].into_iter().enumerate() {
                    for b in 0..spec.blocks_per_stage.max(1) {
                        let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                        let p = format!("s{stage}.b{b}");
                        let shortcut = if stride != 1 || in_ch != width {
                            Some((
                                Conv2d::new(&mut store, &format!("{p}.sc"), in_ch, width, 1, stride, 0, &mut rng)?,
                                BatchNorm2d::new(&mut store, &format!("{p}.sc_bn"), width)?,
                            ))
                        } else {
                            None
                        };
                        blocks.push(Block {
                            c1: Conv2d::new(&mut store, &format!("{p}.c1"), in_ch, width, 3, stride, 1, &mut rng)?,
                            bn1: BatchNorm2d::new(&mut store, &format!("{p}.bn1"), width)?,
                            c2: Conv2d::new(&mut store, &format!("{p}.c2"), width, width, 3, 1, 1, &mut rng)?,
                            bn2: BatchNorm2d::new(&mut store, &format!("{p}.bn2"), width)?,
                            shortcut,
                        });
                        in_ch = width;
                    }
                }
                let head = if spec.zero_head {
                    Linear::zeroed(&mut store, "fc", 64, k)?
                } else {
                    Linear::new(&mut store, "fc", 64, k, &mut rng)?
                };
                Arch::Resnet { stem, stem_bn, blocks, head }
            }
        };
        Ok(Self { spec, store, arch })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.spec.input_shape
    }

    pub fn dtype(&self) -> DType {
        self.spec.dtype()
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.store.trainable()
    }

    /// An independent copy with its own parameter storage.
    pub fn duplicate(&self) -> Result<Self> {
        let c = Self::new(self.spec.clone())?;
        c.store.copy_from(&self.store)?;
        Ok(c)
    }

    fn check_shape(&self, x: &Tensor) -> Result<()> {
        let (c, h, w) = self.spec.input_shape;
        let ok = x.rank() == 4 && x.dims()[1..] == [c, h, w];
        if !ok {
            return Err(Error::ShapeMismatch {
                expected: format!("(B, {c}, {h}, {w})"),
                actual: format!("{:?}", x.dims()),
            });
        }
        Ok(())
    }

    pub fn logits(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_shape(x)?;
        let x = x.to_dtype(self.dtype())?;
        if x.dim(0)? == 0 {
            return Ok(Tensor::zeros((0, self.spec.num_classes), self.dtype(), &Device::Cpu)?);
        }
        match &self.arch {
            Arch::Small { convs, head } => {
                let mut h = x;
                for c in convs {
                    h = c.forward(&h)?.relu()?;
                }
                head.forward(&h.flatten_from(1)?)
            }
            Arch::Resnet { stem, stem_bn, blocks, head } => {
                let s = stem.forward(&x)?;
                let mut h = match mode {
                    Mode::Train => stem_bn.forward_train(&s)?,
                    Mode::Eval => stem_bn.forward_eval(&s)?,
                }
                .relu()?;
                for b in blocks {
                    h = b.forward(&h, mode)?;
                }
                head.forward(&h.mean((2, 3))?)
            }
        }
    }

    /// Class probabilities in evaluation mode.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let logits = self.logits(x, Mode::Eval)?;
        if logits.dim(0)? == 0 {
            return Ok(logits);
        }
        ops::softmax(&logits)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        if x.dim(0)? == 0 {
            return Ok(Vec::new());
        }
        ops::argmax_rows(&self.logits(x, Mode::Eval)?)
    }

    /// Mean cross-entropy of the evaluation-mode predictions.
    pub fn loss(&self, x: &Tensor, y: &[usize]) -> Result<Tensor> {
        ops::logits_cross_entropy(&self.logits(x, Mode::Eval)?, y)
    }

    /// `∇_x` of the mean cross-entropy, in evaluation mode.
    pub fn input_gradient(&self, x: &Tensor, y: &[usize]) -> Result<Tensor> {
        self.input_gradient_of(x, |logits| ops::logits_cross_entropy(logits, y))
    }

    /// `∇_x` of an arbitrary scalar function of the logits.
    pub fn input_gradient_of(&self, x: &Tensor, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
        let v = Var::from_tensor(&x.detach())?;
        let loss = f(&self.logits(v.as_tensor(), Mode::Eval)?)?;
        let grads = loss.backward()?;
        match grads.get(v.as_tensor()) {
            Some(g) => Ok(g.to_dtype(x.dtype())?),
            None => Ok(x.zeros_like()?),
        }
    }

    pub fn to_checkpoint(&self, optimizer: Option<&Adam>, config_hash: &str) -> Result<Checkpoint> {
        let mut tensors = self.store.tensors();
        let mut extra = serde_json::json!({ "spec": self.spec });
        if let Some(opt) = optimizer {
            let (step, m, v) = opt.state();
            for (i, (mi, vi)) in m.iter().zip(v).enumerate() {
                tensors.insert(format!("optim.m.{i:04}"), mi.clone());
                tensors.insert(format!("optim.v.{i:04}"), vi.clone());
            }
            extra["optimizer"] = serde_json::json!({ "step": step, "config": opt.config() });
        }
        Ok(Checkpoint::new(
            CheckpointMeta {
                kind: CLASSIFIER_KIND.into(),
                profile: self.spec.profile.to_string(),
                config_hash: config_hash.to_string(),
                extra,
            },
            tensors,
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>, optimizer: Option<&Adam>, config_hash: &str) -> Result<()> {
        self.to_checkpoint(optimizer, config_hash)?.save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CLASSIFIER_KIND)?;
        let spec: ClassifierSpec = serde_json::from_value(ck.meta.extra["spec"].clone())?;
        let c = Self::new(spec)?;
        let params = ck.tensors.iter().filter(|(k, _)| !k.starts_with("optim.")).map(|(k, v)| (k.clone(), v.clone())).collect();
        c.store.load(&params)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Fraction of argmax-correct predictions over the first `n` examples of a
/// split (all of them when `n` is `None`).
pub fn evaluate(model: &Classifier, split: &Split, n: Option<usize>) -> Result<f64> {
    let n = n.unwrap_or(split.len()).min(split.len());
    if n == 0 {
        return Err(Error::Empty("evaluation set".into()));
    }
    let idx: Vec<usize> = (0..n).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(500) {
        let b = split.batch(chunk, model.dtype())?;
        let pred = model.predict(&b.images)?;
        correct += pred.iter().zip(&b.labels).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / n as f64)
}

/// Accuracy of predictions on an image batch.
pub fn batch_accuracy(model: &Classifier, x: &Tensor, y: &[usize]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Empty("evaluation batch".into()));
    }
    let pred = model.predict(x)?;
    Ok(pred.iter().zip(y).filter(|(p, y)| p == y).count() as f64 / y.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Validation probe interval in iterations (0 disables probes).
    pub eval_every: usize,
    pub eval_size: usize,
    /// Where the best-validation checkpoint is written, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
    pub config_hash: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_size: 100,
            optimizer: AdamConfig::default(),
            seed: 0,
            eval_every: 0,
            eval_size: 1000,
            checkpoint_dir: None,
            config_hash: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub optimizer: AdamConfig,
    pub iteration: u64,
    pub best_val_accuracy: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
    pub losses: Vec<f64>,
    pub test_accuracy: Option<f64>,
}

/// Seeded stream of training batches that cycles epochs indefinitely.
pub struct BatchStream<'a> {
    split: &'a Split,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    queue: std::vec::IntoIter<Vec<usize>>,
}

impl<'a> BatchStream<'a> {
    pub fn new(split: &'a Split, batch_size: usize, seed: u64) -> Self {
        Self { split, batch_size, seed, epoch: 0, queue: Vec::new().into_iter() }
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        loop {
            if let Some(b) = self.queue.next() {
                return b;
            }
            let s = rng::derive_seed(self.seed, &format!("epoch{}", self.epoch));
            self.queue = self.split.batch_order(self.batch_size, Some(s)).into_iter();
            self.epoch += 1;
        }
    }

    pub fn next_batch(&mut self, dtype: DType) -> Result<crate::data::Batch> {
        let idx = self.next_indices();
        self.split.batch(&idx, dtype)
    }
}

/// Plain cross-entropy training with Adam.
pub fn train_plain(model: &Classifier, dataset: &DatasetHandle, cfg: &TrainConfig) -> Result<TrainState> {
    if dataset.train.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    cfg.optimizer.validate()?;
    let mut opt = Adam::new(model.trainable(), cfg.optimizer, Direction::Descend)?;
    let mut stream = BatchStream::new(&dataset.train, cfg.batch_size, rng::derive_seed(cfg.seed, "batches"));
    let mut state = TrainState {
        optimizer: cfg.optimizer,
        iteration: 0,
        best_val_accuracy: None,
        best_checkpoint: None,
        losses: Vec::with_capacity(cfg.iterations),
        test_accuracy: None,
    };
    for it in 0..cfg.iterations {
        let b = stream.next_batch(model.dtype())?;
        let loss = ops::logits_cross_entropy(&model.logits(&b.images, Mode::Train)?, &b.labels)?;
        let l = ops::scalar(&loss)?;
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("training loss diverged at iteration {it}")));
        }
        state.losses.push(l);
        opt.step(&loss.backward()?)?;
        state.iteration = opt.iteration();
        probe(model, dataset, cfg, &opt, &mut state, it + 1)?;
    }
    if !dataset.test.is_empty() {
        state.test_accuracy = Some(evaluate(model, &dataset.test, None)?);
    }
    Ok(state)
}

/// Periodic validation probe; keeps the best-validation checkpoint.
pub fn probe(
    model: &Classifier,
    dataset: &DatasetHandle,
    cfg: &TrainConfig,
    opt: &Adam,
    state: &mut TrainState,
    iteration: usize,
) -> Result<()> {
    let due = cfg.eval_every > 0 && (iteration % cfg.eval_every == 0 || iteration == cfg.iterations);
    if !due || dataset.val.is_empty() {
        return Ok(());
    }
    let acc = evaluate(model, &dataset.val, Some(cfg.eval_size))?;
    log::info!("iteration {iteration}: validation accuracy {acc:.4}");
    if state.best_val_accuracy.is_none_or(|b| acc > b) {
        state.best_val_accuracy = Some(acc);
        if let Some(dir) = &cfg.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("best.safetensors");
            model.save(&path, Some(opt), &cfg.config_hash)?;
            state.best_checkpoint = Some(path);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(profile: Profile, zero_head: bool) -> Classifier {
        Classifier::new(ClassifierSpec {
            profile,
            input_shape: (1, 12, 12),
            blocks_per_stage: 1,
            zero_head,
            seed: 5,
            ..ClassifierSpec::default()
        })
        .unwrap()
    }

    fn images(b: usize) -> Tensor {
        rng::uniform_tensor(&mut rng::seeded(b as u64), (b, 1, 12, 12), 0.0, 1.0, DType::F32).unwrap()
    }

    #[test]
    fn zero_head_gives_uniform_rows() {
        for p in [Profile::SmallCnn, Profile::Resnet] {
            let probs = ops::to_vec_f64(&tiny(p, true).forward(&images(3)).unwrap()).unwrap();
            assert!(probs.iter().all(|v| (v - 0.1).abs() < 1e-3));
        }
    }

    #[test]
    fn empty_batch_gives_empty_output() {
        let x = Tensor::zeros((0, 1, 12, 12), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(tiny(Profile::SmallCnn, false).forward(&x).unwrap().dims(), &[0, 10]);
    }

    #[test]
    fn duplicated_rows_give_duplicated_outputs() {
        for p in [Profile::SmallCnn, Profile::Resnet] {
            let m = tiny(p, false);
            let one = images(1);
            let x = Tensor::cat(&[&one, &one], 0).unwrap();
            let v = ops::to_vec_f64(&m.forward(&x).unwrap()).unwrap();
            assert_eq!(v[..10], v[10..]);
            let s: f64 = v[..10].iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let x = Tensor::zeros((2, 1, 10, 12), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(tiny(Profile::SmallCnn, false).forward(&x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn constant_output_model_has_zero_input_gradient() {
        let g = tiny(Profile::SmallCnn, true).input_gradient(&images(2), &[1, 2]).unwrap();
        assert_eq!(g.dims(), &[2, 1, 12, 12]);
        assert!(ops::to_vec_f64(&g).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn doubling_the_loss_doubles_the_gradient() {
        let m = tiny(Profile::SmallCnn, false);
        let x = images(2);
        let g1 = ops::to_vec_f64(&m.input_gradient(&x, &[3, 4]).unwrap()).unwrap();
        let g2 = m
            .input_gradient_of(&x, |l| Ok((ops::logits_cross_entropy(l, &[3, 4])? * 2.0)?))
            .unwrap();
        for (a, b) in g1.iter().zip(ops::to_vec_f64(&g2).unwrap()) {
            assert!((2.0 * a - b).abs() <= 1e-6 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = tiny(Profile::Resnet, false);
        let opt = Adam::new(m.trainable(), AdamConfig::default(), Direction::Descend).unwrap();
        let ck = m.to_checkpoint(Some(&opt), "abc").unwrap();
        let back = Classifier::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        let x = images(3);
        assert_eq!(
            ops::to_vec_f64(&m.forward(&x).unwrap()).unwrap(),
            ops::to_vec_f64(&back.forward(&x).unwrap()).unwrap()
        );
        assert_eq!(ck.meta.config_hash, "abc");
    }

    #[test]
    fn duplicate_is_independent() {
        let m = tiny(Profile::SmallCnn, false);
        let d = m.duplicate().unwrap();
        for v in m.trainable() {
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
        let x = images(1);
        assert_ne!(
            ops::to_vec_f64(&m.forward(&x).unwrap()).unwrap(),
            ops::to_vec_f64(&d.forward(&x).unwrap()).unwrap()
        );
    }
}
