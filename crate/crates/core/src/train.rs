//! L1 training with Adam, step-halving learning-rate schedule, and
//! resumable checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_patch, ImageBuffer};
use crate::error::{Error, Result};
use crate::model::{parse, parse_kv, ModelConfig, PromptSr};
use crate::nn::{load_params, save_params, ParamStore};
use crate::tensor::{read_tensor, write_tensor, Tape, Tensor, Var};

pub const MODEL_FILE: &str = "model.ckpt";
pub const OPTIM_FILE: &str = "optim.ckpt";
pub const CONFIG_FILE: &str = "config.txt";
pub const LOSS_FILE: &str = "loss.csv";
pub const OPTIM_MAGIC: &[u8; 8] = b"PSRADAM1";

/// How each step's batch is drawn from the training pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// `batch_size` random aligned crops, each from a random pair.
    Random,
    /// Every pair, whole and unaugmented, in order.
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// LR patch side.
    pub patch_size: usize,
    pub lr: f64,
    /// Fractions of `steps` at which the learning rate halves.
    pub lr_milestones: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Random dihedral transform per patch.
    pub augment: bool,
    pub sampling: Sampling,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500_000,
            batch_size: 48,
            patch_size: 64,
            lr: 5e-4,
            lr_milestones: vec![0.5, 0.8, 0.9, 0.95, 0.98],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            augment: true,
            sampling: Sampling::Random,
            checkpoint_every: 5000,
        }
    }
}

impl TrainConfig {
    /// Overfitting run on a handful of whole patches at a constant rate.
    pub fn desk() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 8,
            lr_milestones: Vec::new(),
            augment: false,
            sampling: Sampling::Fixed,
            checkpoint_every: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.patch_size == 0 {
            return Err(Error::Config("steps, batch_size and patch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config("lr milestones must be fractions in [0, 1]".into()));
        }
        Ok(())
    }

    /// Learning rate for the step with zero-based index `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let halvings = self
            .lr_milestones
            .iter()
            .filter(|&&m| step >= (m * self.steps as f64).round() as usize)
            .count();
        self.lr * 0.5f64.powi(halvings as i32)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let milestones: Vec<String> = self.lr_milestones.iter().map(f64::to_string).collect();
        let _ = writeln!(s, "steps={}", self.steps);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "patch_size={}", self.patch_size);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "lr_milestones={}", milestones.join(","));
        let _ = writeln!(s, "beta1={}", self.beta1);
        let _ = writeln!(s, "beta2={}", self.beta2);
        let _ = writeln!(s, "eps={}", self.eps);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "augment={}", self.augment);
        let sampling = match self.sampling {
            Sampling::Random => "random",
            Sampling::Fixed => "fixed",
        };
        let _ = writeln!(s, "sampling={sampling}");
        let _ = writeln!(s, "checkpoint_every={}", self.checkpoint_every);
        s
    }

    /// Applies known keys and returns the rest.
    pub fn apply_kv<'a>(&mut self, keys: impl IntoIterator<Item = (&'a String, &'a String)>) -> Result<Vec<String>> {
        let mut unknown = Vec::new();
        for (k, v) in keys {
            match k.as_str() {
                "steps" => self.steps = parse(k, v)?,
                "batch_size" => self.batch_size = parse(k, v)?,
                "patch_size" => self.patch_size = parse(k, v)?,
                "lr" => self.lr = parse(k, v)?,
                "lr_milestones" => {
                    self.lr_milestones = v
                        .split(',')
                        .filter(|m| !m.trim().is_empty())
                        .map(|m| parse(k, m))
                        .collect::<Result<_>>()?
                }
                "beta1" => self.beta1 = parse(k, v)?,
                "beta2" => self.beta2 = parse(k, v)?,
                "eps" => self.eps = parse(k, v)?,
                "seed" => self.seed = parse(k, v)?,
                "augment" => self.augment = parse(k, v)?,
                "sampling" => {
                    self.sampling = match v.as_str() {
                        "random" => Sampling::Random,
                        "fixed" => Sampling::Fixed,
                        _ => return Err(Error::Config(format!("bad value `{v}` for `sampling`"))),
                    }
                }
                "checkpoint_every" => self.checkpoint_every = parse(k, v)?,
                _ => unknown.push(k.clone()),
            }
        }
        Ok(unknown)
    }
}

/// Parses a combined model + schedule `key=value` file on top of the given
/// defaults. Unknown keys are a config error.
pub fn parse_run_config(text: &str, mut model: ModelConfig, mut train: TrainConfig) -> Result<(ModelConfig, TrainConfig)> {
    let kv = parse_kv(text)?;
    let rest = model.apply_kv(&kv)?;
    let rest = train.apply_kv(rest.iter().map(|k| (k, &kv[k])))?;
    if let Some(k) = rest.first() {
        return Err(Error::Config(format!("unknown config key `{k}`")));
    }
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub t: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &[Tensor<f32>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || grads.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (((p, g), m), v) in store.values_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if g.shape() != p.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            let mut pd = std::mem::replace(p, Tensor::scalar(0.0)).into_data();
            let mut md = std::mem::replace(m, Tensor::scalar(0.0)).into_data();
            let mut vd = std::mem::replace(v, Tensor::scalar(0.0)).into_data();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                pd[i] -= step * md[i] / (vd[i].sqrt() + eps);
            }
            let shape = g.shape();
            *p = Tensor::new(shape, pd)?;
            *m = Tensor::new(shape, md)?;
            *v = Tensor::new(shape, vd)?;
        }
        Ok(())
    }

    /// `magic, t:u64, count:u32`, then every first moment, then every
    /// second moment.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(OPTIM_MAGIC)?;
        w.write_all(&self.t.to_le_bytes())?;
        w.write_all(&(self.m.len() as u32).to_le_bytes())?;
        for t in self.m.iter().chain(&self.v) {
            write_tensor(w, t)?;
        }
        Ok(())
    }

    /// Restores moments saved for a store of the same layout.
    pub fn load<R: Read>(&mut self, r: &mut R) -> Result<()> {
        let mut head = [0u8; 20];
        r.read_exact(&mut head)
            .map_err(|e| Error::Format(format!("truncated optimizer state: {e}")))?;
        if &head[..8] != OPTIM_MAGIC {
            return Err(Error::Format("not an optimizer state file".into()));
        }
        let t = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes"));
        let n = u32::from_le_bytes(head[16..20].try_into().expect("4 bytes")) as usize;
        if n != self.m.len() {
            return Err(Error::Mismatch {
                layer: "<optimizer>".into(),
                detail: format!("state for {n} tensors, model has {}", self.m.len()),
            });
        }
        let mut loaded = Vec::with_capacity(2 * n);
        for i in 0..2 * n {
            let t: Tensor<f32> = read_tensor(r)?;
            if t.shape() != self.m[i % n].shape() {
                return Err(Error::Mismatch {
                    layer: format!("<optimizer moment {i}>"),
                    detail: format!("shape {:?}, expected {:?}", t.shape(), self.m[i % n].shape()),
                });
            }
            loaded.push(t);
        }
        self.v = loaded.split_off(n);
        self.m = loaded;
        self.t = t;
        Ok(())
    }
}

/// Mean L1 loss over `batch` of `(lr, hr)` tensors and the parameter
/// gradients averaged over the batch. Items are evaluated one at a time and
/// accumulated in order.
pub fn loss_and_grads(model: &PromptSr<f32>, batch: &[(Tensor<f32>, Tensor<f32>)]) -> Result<(f64, Vec<Tensor<f32>>)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let s = model.config().scale;
    let mut total = 0.0f64;
    let mut acc: Option<Vec<Vec<f32>>> = None;
    for (lr, hr) in batch {
        let (ls, hs) = (lr.shape(), hr.shape());
        if ls.len() != 3 || hs.len() != 3 || hs != [s * ls[0], s * ls[1], ls[2]] {
            return Err(Error::Data(format!("LR {ls:?} and HR {hs:?} do not correspond at scale {s}")));
        }
        let tape = Tape::new();
        let p = model.params().bind(Some(&tape));
        let sr = model.forward(&p, &Var::constant(lr.clone()))?;
        let loss = sr.l1_loss(&Var::constant(hr.clone()))?;
        total += loss.value().data()[0] as f64;
        let grads = p.grads(&loss.backward()?);
        match acc.as_mut() {
            None => acc = Some(grads.into_iter().map(Tensor::into_data).collect()),
            Some(a) => {
                for (dst, g) in a.iter_mut().zip(&grads) {
                    for (d, &x) in dst.iter_mut().zip(g.data()) {
                        *d += x;
                    }
                }
            }
        }
    }
    let n = batch.len() as f32;
    let grads = acc
        .expect("non-empty batch")
        .into_iter()
        .zip(model.params().values())
        .map(|(g, p)| Tensor::new(p.shape(), g.into_iter().map(|x| x / n).collect()))
        .collect::<Result<_>>()?;
    Ok((total / batch.len() as f64, grads))
}

/// One optimizer step on `batch`; returns the pre-update loss.
pub fn train_step(model: &mut PromptSr<f32>, optim: &mut Adam, batch: &[(Tensor<f32>, Tensor<f32>)], lr: f64) -> Result<f64> {
    let (loss, grads) = loss_and_grads(model, batch)?;
    optim.update(model.params_mut(), &grads, lr)?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    /// One-based step number.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// `step,lr,loss` header and rows.
pub fn loss_csv(log: &[LossRecord]) -> String {
    let mut s = String::from("step,lr,loss\n");
    for r in log {
        let _ = writeln!(s, "{},{},{}", r.step, r.lr, r.loss);
    }
    s
}

fn parse_loss_csv(text: &str) -> Result<Vec<LossRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some("step,lr,loss") {
        return Err(Error::Format("loss log lacks the `step,lr,loss` header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 3 {
                return Err(Error::Format(format!("bad loss log row `{l}`")));
            }
            let bad = |_| Error::Format(format!("bad loss log row `{l}`"));
            Ok(LossRecord {
                step: f[0].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                lr: f[1].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                loss: f[2].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            })
        })
        .collect()
}

/// Model, optimizer and schedule position.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: PromptSr<f32>,
    pub optim: Adam,
    pub config: TrainConfig,
    /// Completed steps.
    pub step: usize,
    pub log: Vec<LossRecord>,
}

impl Trainer {
    /// Fresh weights drawn from `train.seed`.
    pub fn new(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let model = PromptSr::new(model, train.seed)?;
        let optim = Adam::new(model.params(), train.beta1, train.beta2, train.eps);
        Ok(Trainer {
            model,
            optim,
            config: train,
            step: 0,
            log: Vec::new(),
        })
    }

    /// Tensors for the zero-based step `step`, drawn from a stream seeded by
    /// `(seed, step)` so a resumed run sees the same batches.
    pub fn batch(&self, pairs: &[(ImageBuffer, ImageBuffer)], step: usize) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
        if pairs.is_empty() {
            return Err(Error::Data("no training pairs".into()));
        }
        let s = self.model.config().scale;
        match self.config.sampling {
            Sampling::Fixed => Ok(pairs.iter().map(|(hr, lr)| (lr.to_tensor(), hr.to_tensor())).collect()),
            Sampling::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                rng.set_stream(step as u64);
                (0..self.config.batch_size)
                    .map(|_| {
                        let (hr, lr) = &pairs[rng.random_range(0..pairs.len())];
                        let p = sample_patch(hr, lr, self.config.patch_size, s, self.config.augment, &mut rng)?;
                        Ok((p.lr.to_tensor(), p.hr.to_tensor()))
                    })
                    .collect()
            }
        }
    }

    /// Runs one step on `(hr, lr)` pairs and logs it.
    pub fn step_once(&mut self, pairs: &[(ImageBuffer, ImageBuffer)]) -> Result<LossRecord> {
        let batch = self.batch(pairs, self.step)?;
        let lr = self.config.lr_at(self.step);
        let loss = train_step(&mut self.model, &mut self.optim, &batch, lr)?;
        self.step += 1;
        let rec = LossRecord { step: self.step, lr, loss };
        self.log.push(rec);
        Ok(rec)
    }

    /// Trains until `until` steps are complete, saving into `out` every
    /// `checkpoint_every` steps and at the end when `out` is given.
    pub fn run(
        &mut self,
        pairs: &[(ImageBuffer, ImageBuffer)],
        until: usize,
        out: Option<&Path>,
        mut on_step: impl FnMut(&LossRecord),
    ) -> Result<()> {
        while self.step < until {
            let rec = self.step_once(pairs)?;
            on_step(&rec);
            let every = self.config.checkpoint_every;
            if let Some(dir) = out {
                if every > 0 && self.step.is_multiple_of(every) && self.step < until {
                    self.save(dir)?;
                }
            }
        }
        if let Some(dir) = out {
            self.save(dir)?;
        }
        Ok(())
    }

    /// Writes weights, optimizer state, config sidecar and loss log.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(fs::File::create(dir.join(MODEL_FILE))?);
        save_params(self.model.params(), &mut w)?;
        w.flush()?;
        let mut w = BufWriter::new(fs::File::create(dir.join(OPTIM_FILE))?);
        w.write_all(&(self.step as u64).to_le_bytes())?;
        self.optim.save(&mut w)?;
        w.flush()?;
        fs::write(dir.join(CONFIG_FILE), config_text(self.model.config(), &self.config))?;
        fs::write(dir.join(LOSS_FILE), loss_csv(&self.log))?;
        Ok(())
    }

    /// Restores a run saved by [`Trainer::save`]. Log rows past the saved
    /// step are dropped.
    pub fn resume(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(CONFIG_FILE))?;
        let (model_cfg, train_cfg) = parse_run_config(&text, ModelConfig::default(), TrainConfig::default())?;
        let mut t = Trainer::new(model_cfg, train_cfg)?;
        let mut r = BufReader::new(fs::File::open(dir.join(MODEL_FILE))?);
        load_params(t.model.params_mut(), &mut r)?;
        let mut r = BufReader::new(fs::File::open(dir.join(OPTIM_FILE))?);
        let mut step = [0u8; 8];
        r.read_exact(&mut step)
            .map_err(|e| Error::Format(format!("truncated optimizer state: {e}")))?;
        t.step = u64::from_le_bytes(step) as usize;
        t.optim.load(&mut r)?;
        let log_path = dir.join(LOSS_FILE);
        if log_path.is_file() {
            t.log = parse_loss_csv(&fs::read_to_string(log_path)?)?;
            t.log.retain(|r| r.step <= t.step);
        }
        Ok(t)
    }
}

/// Combined model and schedule sidecar.
pub fn config_text(model: &ModelConfig, train: &TrainConfig) -> String {
    format!("# model\n{}# schedule\n{}", model.to_kv(), train.to_kv())
}
