//! A tiny feed-forward classifier with manual backprop, seeded SGD, and ℓ2 attacks.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linop::{norm, Operator};
use crate::rng::{derive, seeded, sphere_vec, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub op: Operator,
    pub activation: Activation,
}

impl Layer {
    pub fn new(name: impl Into<String>, op: Operator, activation: Activation) -> Self {
        Layer {
            name: name.into(),
            op,
            activation,
        }
    }
}

/// Layers applied in order, followed by a softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Checkpoint", try_from = "Checkpoint")]
pub struct TinyNet {
    pub layers: Vec<Layer>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Checkpoint {
    layers: Vec<Layer>,
    parameters: Vec<Vec<f64>>,
}

impl From<TinyNet> for Checkpoint {
    fn from(net: TinyNet) -> Self {
        let parameters = net.params();
        Checkpoint {
            layers: net.layers,
            parameters,
        }
    }
}

impl TryFrom<Checkpoint> for TinyNet {
    type Error = Error;

    fn try_from(c: Checkpoint) -> Result<Self> {
        let mut net = TinyNet::new(c.layers)?;
        net.set_params(&c.parameters)?;
        Ok(net)
    }
}

/// Per-layer parameter gradients, the input gradient, and the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Vec<f64>>,
    pub input: Vec<f64>,
    pub loss: f64,
}

impl Gradients {
    pub fn zeros_like(net: &TinyNet) -> Self {
        Gradients {
            layers: net.layers.iter().map(|l| vec![0.0; l.op.num_params()]).collect(),
            input: vec![0.0; net.input_dim()],
            loss: 0.0,
        }
    }

    /// `self += scale * other` (parameters and loss; the input gradient is left alone).
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
        self.loss += scale * other.loss;
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(k: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[i] = 1.0;
    v
}

impl TinyNet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("a network needs at least one layer".into()));
        }
        for l in &layers {
            l.op.validate()?;
        }
        for pair in layers.windows(2) {
            if pair[0].op.out_dim() != pair[1].op.in_dim() {
                return Err(Error::InvalidConfig(format!(
                    "layer {} yields {} values but layer {} expects {}",
                    pair[0].name,
                    pair[0].op.out_dim(),
                    pair[1].name,
                    pair[1].op.in_dim()
                )));
            }
        }
        let mut names: Vec<&str> = layers.iter().map(|l| l.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("layer names must be unique".into()));
        }
        Ok(TinyNet { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].op.in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.op.out_dim())
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    /// Pre-activations and activations of every layer: `zs[i]`, `hs[i+1]`; `hs[0] = x`.
    fn trace(&self, x: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut hs = vec![x.to_vec()];
        let mut zs = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let z = l.op.apply(hs.last().unwrap())?;
            hs.push(z.iter().map(|&v| l.activation.apply(v)).collect());
            zs.push(z);
        }
        Ok((zs, hs))
    }

    /// Final-layer outputs before the softmax.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.1.pop().unwrap())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Cross-entropy `H(target, f(x))` and its gradients.
    pub fn backward(&self, x: &[f64], target: &[f64]) -> Result<Gradients> {
        let k = self.num_classes();
        if target.len() != k {
            return Err(Error::ShapeMismatch {
                context: "backward target",
                expected: k,
                got: target.len(),
            });
        }
        let (zs, hs) = self.trace(x)?;
        let logits = hs.last().unwrap();
        let logp = log_softmax(logits);
        let loss = -target
            .iter()
            .zip(&logp)
            .filter(|(t, _)| **t != 0.0)
            .map(|(t, l)| t * l)
            .sum::<f64>();
        let mass: f64 = target.iter().sum();
        // d/dlogits of −Σ t log softmax = mass·p − t
        let mut dh: Vec<f64> = logp.iter().zip(target).map(|(l, t)| mass * l.exp() - t).collect();
        let mut layers = vec![Vec::new(); self.layers.len()];
        for (i, l) in self.layers.iter().enumerate().rev() {
            let dz: Vec<f64> = dh
                .iter()
                .zip(&zs[i])
                .map(|(g, &z)| g * l.activation.derivative(z))
                .collect();
            layers[i] = l.op.param_grad(&hs[i], &dz)?;
            dh = l.op.adjoint_apply(&dz)?;
        }
        Ok(Gradients {
            layers,
            input: dh,
            loss,
        })
    }

    /// Cross-entropy `H(target, f(x))`.
    pub fn loss(&self, x: &[f64], target: &[f64]) -> Result<f64> {
        let logp = log_softmax(&self.logits(x)?);
        Ok(-target
            .iter()
            .zip(&logp)
            .filter(|(t, _)| **t != 0.0)
            .map(|(t, l)| t * l)
            .sum::<f64>())
    }

    pub fn params(&self) -> Vec<Vec<f64>> {
        self.layers.iter().map(|l| l.op.params()).collect()
    }

    pub fn set_params(&mut self, params: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.layers.len() {
            return Err(Error::ShapeMismatch {
                context: "network parameters",
                expected: self.layers.len(),
                got: params.len(),
            });
        }
        for (l, p) in self.layers.iter_mut().zip(params) {
            l.op.set_params(p)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) -> Result<()> {
        self.set_params(snapshot)
    }

    /// `θ ← θ − lr · g`.
    pub fn step(&mut self, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        for (l, g) in self.layers.iter_mut().zip(grads) {
            let p: Vec<f64> = l.op.params().iter().zip(g).map(|(p, g)| p - lr * g).collect();
            l.op.set_params(&p)?;
        }
        Ok(())
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], ys: &[usize]) -> Result<f64> {
        if xs.is_empty() {
            return Ok(f64::NAN);
        }
        let mut correct = 0;
        for (x, &y) in xs.iter().zip(ys) {
            if self.predict(x)? == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / xs.len() as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

// ---------------------------------------------------------------------------
// Data

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Retain,
    Forget,
    Test,
}

impl Partition {
    fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Partition::Train),
            "retain" => Ok(Partition::Retain),
            "forget" => Ok(Partition::Forget),
            "test" => Ok(Partition::Test),
            other => Err(Error::InvalidConfig(format!("unknown partition tag {other:?}"))),
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Retain => "retain",
            Partition::Forget => "forget",
            Partition::Test => "test",
        }
    }

    /// Whether samples with this tag are part of the training set `D = D_R ∪ D_F`.
    pub fn is_training(self) -> bool {
        matches!(self, Partition::Train | Partition::Retain | Partition::Forget)
    }
}

/// Inputs with labels in `0..num_classes`; each sample carries exactly one partition tag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub partitions: Vec<Partition>,
    pub num_classes: usize,
}

/// Training target: a class index or a full distribution.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Hard(usize),
    Soft(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub target: Target,
}

impl Sample {
    pub fn hard(x: Vec<f64>, y: usize) -> Self {
        Sample {
            x,
            target: Target::Hard(y),
        }
    }

    pub fn target_vec(&self, k: usize) -> Vec<f64> {
        match &self.target {
            Target::Hard(y) => one_hot(k, *y),
            Target::Soft(t) => t.clone(),
        }
    }
}

impl LabeledDataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, partitions: Vec<Partition>, num_classes: usize) -> Result<Self> {
        let d = LabeledDataset {
            inputs,
            labels,
            partitions,
            num_classes,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.inputs.len();
        if self.labels.len() != n || self.partitions.len() != n {
            return Err(Error::InvalidConfig("inputs, labels and partitions differ in length".into()));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::InvalidConfig(format!(
                "label {y} out of range for {} classes",
                self.num_classes
            )));
        }
        if let Some(first) = self.inputs.first() {
            if self.inputs.iter().any(|x| x.len() != first.len()) {
                return Err(Error::InvalidConfig("inputs differ in dimension".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Samples whose tag satisfies `keep`.
    pub fn select(&self, keep: impl Fn(Partition) -> bool) -> LabeledDataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.partitions[i])).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            partitions: idx.iter().map(|&i| self.partitions[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn partition(&self, p: Partition) -> LabeledDataset {
        self.select(|q| q == p)
    }

    /// Everything except the test partition.
    pub fn training(&self) -> LabeledDataset {
        self.select(Partition::is_training)
    }

    pub fn samples(&self) -> Vec<Sample> {
        self.inputs
            .iter()
            .zip(&self.labels)
            .map(|(x, &y)| Sample::hard(x.clone(), y))
            .collect()
    }

    pub fn train_samples(&self) -> Vec<Sample> {
        self.training().samples()
    }

    /// Retags training samples: indices in `forget` become [`Partition::Forget`],
    /// the remaining training samples [`Partition::Retain`].
    pub fn with_forget(&self, forget: &[usize]) -> LabeledDataset {
        let mut out = self.clone();
        for (i, p) in out.partitions.iter_mut().enumerate() {
            if p.is_training() {
                *p = Partition::Retain;
            }
            if forget.contains(&i) {
                *p = Partition::Forget;
            }
        }
        out
    }

    /// CSV rows of `features..., label, partition`, no header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.inputs[i].iter().map(|v| format!("{v:e}")).collect();
            row.push(self.labels[i].to_string());
            row.push(self.partitions[i].tag().to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, num_classes: usize) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
        let (mut inputs, mut labels, mut partitions) = (Vec::new(), Vec::new(), Vec::new());
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() < 3 {
                return Err(Error::InvalidConfig(format!("row {line}: need features, label and partition")));
            }
            let bad = |what: &str| Error::InvalidConfig(format!("row {line}: bad {what}"));
            let feats = rec.iter().take(rec.len() - 2).map(|s| s.trim().parse::<f64>().map_err(|_| bad("feature"))).collect::<Result<Vec<_>>>()?;
            let label = rec[rec.len() - 2].trim().parse::<usize>().map_err(|_| bad("label"))?;
            inputs.push(feats);
            labels.push(label);
            partitions.push(Partition::parse(&rec[rec.len() - 1])?);
        }
        Self::new(inputs, labels, partitions, num_classes)
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Multiply the rate by `gamma` every `every` steps.
    Step { every: usize, gamma: f64 },
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    #[serde(default = "constant")]
    pub schedule: Schedule,
    #[serde(default)]
    pub weight_decay: f64,
}

fn constant() -> Schedule {
    Schedule::Constant
}

impl TrainConfig {
    pub fn new(lr: f64, steps: usize, batch: usize, seed: u64) -> Self {
        TrainConfig {
            lr,
            steps,
            batch,
            seed,
            schedule: Schedule::Constant,
            weight_decay: 0.0,
        }
    }

    /// Learning rate at 1-based `step`.
    pub fn rate(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Step { every, gamma } => self.lr * gamma.powi(((step - 1) / every.max(1)) as i32),
            Schedule::Cosine => {
                let t = (step - 1) as f64 / self.steps.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || self.batch == 0 {
            return Err(Error::InvalidConfig("training needs lr >= 0 and batch >= 1".into()));
        }
        Ok(())
    }
}

/// Seeded minibatch order, reshuffled at every epoch.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: SeededRng,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        BatchSampler {
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n).max(1),
            rng: seeded(seed),
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Mean cross-entropy and mean parameter gradients over `idx`.
pub fn batch_gradient(net: &TinyNet, samples: &[Sample], idx: &[usize]) -> Result<Gradients> {
    let k = net.num_classes();
    let mut acc = Gradients::zeros_like(net);
    let w = 1.0 / idx.len() as f64;
    for &i in idx {
        let g = net.backward(&samples[i].x, &samples[i].target_vec(k))?;
        acc.add_scaled(&g, w);
    }
    Ok(acc)
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub net: TinyNet,
    /// Mean batch loss at every step.
    pub losses: Vec<f64>,
}

/// Seeded minibatch SGD on `samples`. After each update, `hook(net, step)` runs
/// with the 1-based step index and may modify the network.
pub fn train_samples(
    net: &TinyNet,
    samples: &[Sample],
    cfg: &TrainConfig,
    hook: &mut dyn FnMut(&mut TinyNet, usize) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let mut net = net.clone();
    let mut sampler = BatchSampler::new(samples.len(), cfg.batch, cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let idx = sampler.next_batch();
        let mut g = batch_gradient(&net, samples, &idx)?;
        if !g.loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        if cfg.weight_decay != 0.0 {
            for (gl, p) in g.layers.iter_mut().zip(net.params()) {
                for (a, b) in gl.iter_mut().zip(p) {
                    *a += cfg.weight_decay * b;
                }
            }
        }
        losses.push(g.loss);
        net.step(&g.layers, cfg.rate(step))?;
        if net.params().iter().flatten().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { step });
        }
        hook(&mut net, step)?;
    }
    Ok(TrainReport { net, losses })
}

/// Plain SGD on the training partitions of `data`.
pub fn sgd_train(net: &TinyNet, data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    train_samples(net, &data.train_samples(), cfg, &mut |_, _| Ok(()))
}

// ---------------------------------------------------------------------------
// Attacks

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Pgd,
    FgsmRestart,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub steps: usize,
    pub step_frac: f64,
    /// Random restarts for [`AttackKind::FgsmRestart`].
    pub restarts: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            steps: 50,
            step_frac: 0.1,
            restarts: 5,
            seed: 0,
        }
    }
}

fn project_ball(x: &[f64], cand: &mut [f64], eps: f64) {
    let delta: Vec<f64> = cand.iter().zip(x).map(|(a, b)| a - b).collect();
    let d = norm(&delta);
    if d > eps {
        let s = eps / d;
        for ((c, xi), di) in cand.iter_mut().zip(x).zip(&delta) {
            *c = xi + di * s;
        }
    }
}

/// Untargeted ℓ2 attack on the cross-entropy of the true label `y`.
/// The result always lies in the closed ball of radius `eps` around `x`.
pub fn pgd_attack(net: &TinyNet, x: &[f64], y: usize, eps: f64, cfg: &AttackConfig) -> Result<Vec<f64>> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidConfig("attack radius must be nonnegative".into()));
    }
    if eps == 0.0 {
        return Ok(x.to_vec());
    }
    let target = one_hot(net.num_classes(), y);
    match cfg.kind {
        AttackKind::Pgd => {
            let step = cfg.step_frac * eps;
            let mut adv = x.to_vec();
            for _ in 0..cfg.steps {
                let g = net.backward(&adv, &target)?.input;
                let gn = norm(&g);
                if gn == 0.0 || !gn.is_finite() {
                    break;
                }
                for (a, gi) in adv.iter_mut().zip(&g) {
                    *a += step * gi / gn;
                }
                project_ball(x, &mut adv, eps);
            }
            Ok(adv)
        }
        AttackKind::FgsmRestart => {
            let mut rng = derive(cfg.seed, 0x46_47_53_4d);
            let mut adv = x.to_vec();
            for r in 0..cfg.restarts.max(1) {
                let start: Vec<f64> = if r == 0 {
                    x.to_vec()
                } else {
                    let noise = sphere_vec(&mut rng, x.len(), 0.1 * eps);
                    x.iter().zip(&noise).map(|(a, b)| a + b).collect()
                };
                let g = net.backward(&start, &target)?.input;
                let gn = norm(&g);
                let mut cand = start.clone();
                if gn > 0.0 && gn.is_finite() {
                    for (c, gi) in cand.iter_mut().zip(&g) {
                        *c += eps * gi / gn;
                    }
                }
                project_ball(x, &mut cand, eps);
                adv = cand;
                if net.predict(&adv)? != y {
                    break;
                }
            }
            Ok(adv)
        }
    }
}

/// Targeted ℓ2 PGD: descends the cross-entropy of `target_class` inside the ball.
pub fn targeted_attack(net: &TinyNet, x: &[f64], target_class: usize, eps: f64, cfg: &AttackConfig) -> Result<Vec<f64>> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidConfig("attack radius must be nonnegative".into()));
    }
    let target = one_hot(net.num_classes(), target_class);
    let step = cfg.step_frac * eps;
    let mut adv = x.to_vec();
    for _ in 0..cfg.steps {
        let g = net.backward(&adv, &target)?.input;
        let gn = norm(&g);
        if gn == 0.0 || !gn.is_finite() {
            break;
        }
        for (a, gi) in adv.iter_mut().zip(&g) {
            *a -= step * gi / gn;
        }
        project_ball(x, &mut adv, eps);
    }
    Ok(adv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linop::Padding;
    use crate::rng::gaussian_vec;

    fn random_net(seed: u64) -> TinyNet {
        let mut rng = seeded(seed);
        let conv = Operator::affine(
            Operator::conv1d(1, 2, 6, 3, 1, Padding::Reflect, gaussian_vec(&mut rng, 6)).unwrap(),
            gaussian_vec(&mut rng, 12),
        )
        .unwrap();
        let bn = Operator::affine(
            Operator::diagonal(gaussian_vec(&mut rng, 12), gaussian_vec(&mut rng, 12), vec![0.5; 12], 1e-3).unwrap(),
            gaussian_vec(&mut rng, 12),
        )
        .unwrap();
        let dense = Operator::affine(Operator::dense(3, 12, gaussian_vec(&mut rng, 36)).unwrap(), gaussian_vec(&mut rng, 3)).unwrap();
        TinyNet::new(vec![
            Layer::new("conv", conv, Activation::Relu),
            Layer::new("bn", bn, Activation::Identity),
            Layer::new("head", dense, Activation::Identity),
        ])
        .unwrap()
    }

    #[test]
    fn zero_net_is_uniform() {
        let net = TinyNet::new(vec![Layer::new(
            "head",
            Operator::dense(4, 2, vec![0.0; 8]).unwrap(),
            Activation::Identity,
        )])
        .unwrap();
        assert_eq!(net.forward(&[1.0, -2.0]).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn equal_logits_split_evenly() {
        let net = TinyNet::new(vec![Layer::new("id", Operator::identity(2), Activation::Identity)]).unwrap();
        assert_eq!(net.forward(&[1.0, 1.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let net = random_net(1);
        let mut rng = seeded(2);
        for _ in 0..10 {
            let p = net.forward(&gaussian_vec(&mut rng, 6)).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn backward_matches_central_differences() {
        let net = random_net(3);
        let mut rng = seeded(4);
        let x = gaussian_vec(&mut rng, 6);
        let target = softmax(&gaussian_vec(&mut rng, 3));
        let g = net.backward(&x, &target).unwrap();
        let h = 1e-6;
        let base = net.params();
        for (li, layer_params) in base.iter().enumerate() {
            for pi in 0..layer_params.len() {
                let mut plus = base.clone();
                plus[li][pi] += h;
                let mut minus = base.clone();
                minus[li][pi] -= h;
                let mut n1 = net.clone();
                n1.set_params(&plus).unwrap();
                let mut n2 = net.clone();
                n2.set_params(&minus).unwrap();
                let fd = (n1.loss(&x, &target).unwrap() - n2.loss(&x, &target).unwrap()) / (2.0 * h);
                let an = g.layers[li][pi];
                assert!((fd - an).abs() <= 1e-5 * (1.0 + an.abs()), "layer {li} param {pi}: {fd} vs {an}");
            }
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (net.loss(&xp, &target).unwrap() - net.loss(&xm, &target).unwrap()) / (2.0 * h);
            assert!((fd - g.input[i]).abs() <= 1e-5 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn stationary_when_target_is_prediction() {
        let mut rng = seeded(5);
        let op = Operator::affine(Operator::dense(3, 4, gaussian_vec(&mut rng, 12)).unwrap(), vec![0.1, 0.2, 0.3]).unwrap();
        let net = TinyNet::new(vec![Layer::new("head", op, Activation::Identity)]).unwrap();
        let x = gaussian_vec(&mut rng, 4);
        let p = net.forward(&x).unwrap();
        let g = net.backward(&x, &p).unwrap();
        assert!(g.layers[0].iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn one_hot_target_is_standard_cross_entropy() {
        let net = random_net(6);
        let x = gaussian_vec(&mut seeded(7), 6);
        let g = net.backward(&x, &one_hot(3, 2)).unwrap();
        let p = net.forward(&x).unwrap();
        assert!((g.loss + p[2].ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let net = random_net(8);
        let data = LabeledDataset::new(vec![vec![0.5; 6], vec![-0.5; 6]], vec![0, 1], vec![Partition::Train; 2], 3).unwrap();
        let out = sgd_train(&net, &data, &TrainConfig::new(0.0, 20, 2, 1)).unwrap();
        assert_eq!(out.net.params(), net.params());
    }

    #[test]
    fn training_is_deterministic() {
        let net = random_net(9);
        let mut rng = seeded(10);
        let inputs: Vec<Vec<f64>> = (0..20).map(|_| gaussian_vec(&mut rng, 6)).collect();
        let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let data = LabeledDataset::new(inputs, labels, vec![Partition::Train; 20], 3).unwrap();
        let cfg = TrainConfig::new(0.05, 50, 4, 11);
        let a = sgd_train(&net, &data, &cfg).unwrap();
        let b = sgd_train(&net, &data, &cfg).unwrap();
        assert_eq!(a.net.params(), b.net.params());
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn attack_stays_in_ball() {
        let net = random_net(12);
        let mut rng = seeded(13);
        for kind in [AttackKind::Pgd, AttackKind::FgsmRestart] {
            let cfg = AttackConfig { kind, ..AttackConfig::default() };
            for _ in 0..5 {
                let x = gaussian_vec(&mut rng, 6);
                let adv = pgd_attack(&net, &x, 0, 0.3, &cfg).unwrap();
                let d: Vec<f64> = adv.iter().zip(&x).map(|(a, b)| a - b).collect();
                assert!(norm(&d) <= 0.3 + 1e-12);
            }
        }
        let x = vec![0.1; 6];
        assert_eq!(pgd_attack(&net, &x, 1, 0.0, &AttackConfig::default()).unwrap(), x);
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = random_net(14);
        let json = net.to_json().unwrap();
        assert!(json.contains("\"parameters\""));
        assert_eq!(TinyNet::from_json(&json).unwrap(), net);
        let mut other = random_net(15);
        let snap = net.snapshot();
        other.restore(&snap).unwrap();
        assert_eq!(other.params(), net.params());
    }

    #[test]
    fn csv_round_trip() {
        let data = LabeledDataset::new(
            vec![vec![0.1, -2.5], vec![3.0, 1e-9]],
            vec![1, 0],
            vec![Partition::Forget, Partition::Test],
            2,
        )
        .unwrap();
        let dir = std::env::temp_dir().join(format!("specshape-net-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("data.csv");
        data.write_csv(&path).unwrap();
        assert_eq!(LabeledDataset::read_csv(&path, 2).unwrap(), data);
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        assert!(LabeledDataset::new(vec![vec![0.0]], vec![3], vec![Partition::Train], 3).is_err());
    }
}
