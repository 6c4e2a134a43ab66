//! Nadam with an exponential moving average of the weights, checkpointing and
//! the per-snippet optimization loop.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::geometry::CameraModel;
use crate::image::ImageGrid;
use crate::objective::{
    snippet_gradient, snippet_loss, ObjectiveConfig, SceneParams, Snippet, SnippetLoss,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub ema_decay: f64,
    /// Use `min(decay, (1 + n) / (10 + n))` for the n-th EMA update.
    pub ema_warmup: bool,
    /// Checkpoint period in iterations; 0 disables checkpoints.
    pub checkpoint_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            ema_decay: 0.9997,
            ema_warmup: false,
            checkpoint_every: 5100,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite())
            || !unit(self.beta1)
            || !unit(self.beta2)
            || !(self.epsilon > 0.0)
            || !(0.0..=1.0).contains(&self.ema_decay)
        {
            return Err(contract(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Nesterov-accelerated Adam over a list of flat parameter blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Nadam {
    pub config: OptimConfig,
    /// Number of completed steps.
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Nadam {
    pub fn new(config: OptimConfig, block_sizes: &[usize]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            m: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    /// Applies one update. Fails, leaving everything untouched, if any gradient
    /// entry is not finite.
    pub fn update(&mut self, params: &mut [(String, &mut [f64])], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(contract("parameter block count changed between steps"));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(contract(format!("gradient length mismatch in {name}")));
            }
            if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    block: name.clone(),
                    index,
                });
            }
        }
        let c = &self.config;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc1_next = 1.0 - c.beta1.powi(t + 1);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (b, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[b], &mut self.v[b]);
            for k in 0..p.len() {
                let gk = g[k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let m_hat = c.beta1 * m[k] / bc1_next + (1.0 - c.beta1) * gk / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Shadow copy `s <- decay * s + (1 - decay) * p`, initialized to the first
/// parameters it sees.
#[derive(Clone, Debug, PartialEq)]
pub struct Ema {
    pub decay: f64,
    pub warmup: bool,
    pub updates: u64,
    pub shadow: Option<Vec<Vec<f64>>>,
}

impl Ema {
    pub fn new(decay: f64, warmup: bool) -> Self {
        Self {
            decay,
            warmup,
            updates: 0,
            shadow: None,
        }
    }

    pub fn effective_decay(&self) -> f64 {
        if self.warmup {
            let n = self.updates as f64;
            self.decay.min((1.0 + n) / (10.0 + n))
        } else {
            self.decay
        }
    }

    pub fn update(&mut self, params: &[&[f64]]) {
        let d = self.effective_decay();
        match &mut self.shadow {
            None => self.shadow = Some(params.iter().map(|p| p.to_vec()).collect()),
            Some(shadow) => {
                for (s, p) in shadow.iter_mut().zip(params) {
                    for (sk, pk) in s.iter_mut().zip(p.iter()) {
                        *sk = d * *sk + (1.0 - d) * pk;
                    }
                }
            }
        }
        self.updates += 1;
    }
}

const MAGIC: &[u8; 8] = b"WDCKPT\0\0";
const VERSION: u32 = 1;

/// Full optimizer state for resuming a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub height: usize,
    pub width: usize,
    pub params: SceneParams,
    pub nadam: Nadam,
    pub ema: Ema,
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}
fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}
fn put_f64s(w: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len(),
                message: "truncated checkpoint".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, out: &mut [f64]) -> Result<()> {
        for o in out {
            *o = self.f64()?;
        }
        Ok(())
    }
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.pos,
            message: message.into(),
        })
    }
}

impl Checkpoint {
    /// Little-endian layout: magic, version, iteration, step, EMA update count,
    /// EMA flags, frame size, scale count, motion flag, then per block the
    /// parameters, first and second moments and (if present) the EMA shadow.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, VERSION);
        put_u64(&mut w, self.iteration);
        put_u64(&mut w, self.nadam.step);
        put_u64(&mut w, self.ema.updates);
        w.extend_from_slice(&self.ema.decay.to_le_bytes());
        w.push(self.ema.warmup as u8);
        w.push(self.ema.shadow.is_some() as u8);
        put_u64(&mut w, self.height as u64);
        put_u64(&mut w, self.width as u64);
        put_u32(&mut w, self.params.scales() as u32);
        w.push(self.params.motion_raw.is_some() as u8);
        for (b, (_, p)) in self.params.blocks().into_iter().enumerate() {
            put_f64s(&mut w, p);
            put_f64s(&mut w, &self.nadam.m[b]);
            put_f64s(&mut w, &self.nadam.v[b]);
            if let Some(s) = &self.ema.shadow {
                put_f64s(&mut w, &s[b]);
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8], config: OptimConfig) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(8)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "not a checkpoint file".into(),
            });
        }
        let version = c.u32()?;
        if version != VERSION {
            return c.fail(format!("unsupported checkpoint version {version}"));
        }
        let iteration = c.u64()?;
        let step = c.u64()?;
        let ema_updates = c.u64()?;
        let ema_decay = c.f64()?;
        let flags = c.take(2)?;
        let (warmup, has_shadow) = (flags[0] != 0, flags[1] != 0);
        let height = c.u64()? as usize;
        let width = c.u64()? as usize;
        let scales = c.u32()? as usize;
        let motion = c.take(1)?[0] != 0;
        let finest = height.checked_mul(width).and_then(|n| n.checked_mul(24));
        if height == 0 || width == 0 || scales == 0 || scales > 32 {
            return c.fail("implausible checkpoint dimensions");
        }
        if finest.is_none_or(|need| need > bytes.len() - c.pos) {
            return Err(Error::Format {
                offset: bytes.len(),
                message: "truncated checkpoint".into(),
            });
        }
        let mut params = SceneParams::zeros(height, width, scales, motion);
        let sizes: Vec<usize> = params.blocks().iter().map(|(_, b)| b.len()).collect();
        let mut nadam = Nadam::new(config, &sizes)?;
        nadam.step = step;
        let mut shadow: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        for (b, (_, p)) in params.blocks_mut().into_iter().enumerate() {
            c.f64s(p)?;
            c.f64s(&mut nadam.m[b])?;
            c.f64s(&mut nadam.v[b])?;
            if has_shadow {
                c.f64s(&mut shadow[b])?;
            }
        }
        if c.pos != bytes.len() {
            return c.fail("trailing bytes after checkpoint");
        }
        let ema = Ema {
            decay: ema_decay,
            warmup,
            updates: ema_updates,
            shadow: has_shadow.then_some(shadow),
        };
        Ok(Self {
            iteration,
            height,
            width,
            params,
            nadam,
            ema,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, config: OptimConfig) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, config)
    }
}

/// Optimization state for one snippet.
pub struct SnippetOptimizer {
    pub frames: Snippet,
    pub camera: CameraModel,
    pub objective: ObjectiveConfig,
    pub state: Checkpoint,
}

/// Outcome of [`SnippetOptimizer::run`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    /// Loss before the first step and after every step.
    pub losses: Vec<f64>,
    pub checkpoints: Vec<std::path::PathBuf>,
}

impl SnippetOptimizer {
    pub fn new(
        frames: Snippet,
        camera: CameraModel,
        objective: ObjectiveConfig,
        optim: OptimConfig,
        initial: SceneParams,
    ) -> Result<Self> {
        let (height, width, _) = frames.target.dims();
        let sizes: Vec<usize> = initial.blocks().iter().map(|(_, b)| b.len()).collect();
        let ema = Ema::new(optim.ema_decay, optim.ema_warmup);
        let nadam = Nadam::new(optim, &sizes)?;
        Ok(Self {
            frames,
            camera,
            objective,
            state: Checkpoint {
                iteration: 0,
                height,
                width,
                params: initial,
                nadam,
                ema,
            },
        })
    }

    /// Resumes from a checkpoint; the optimizer configuration is taken from
    /// `optim` except for the EMA settings, which are restored.
    pub fn resume(
        frames: Snippet,
        camera: CameraModel,
        objective: ObjectiveConfig,
        checkpoint: Checkpoint,
    ) -> Result<Self> {
        if (checkpoint.height, checkpoint.width) != (frames.target.height(), frames.target.width())
        {
            return Err(contract("checkpoint frame size does not match the snippet"));
        }
        Ok(Self {
            frames,
            camera,
            objective,
            state: checkpoint,
        })
    }

    pub fn params(&self) -> &SceneParams {
        &self.state.params
    }

    /// EMA-averaged parameters (the current ones before the first step).
    pub fn averaged_params(&self) -> SceneParams {
        let mut p = self.state.params.clone();
        if let Some(shadow) = &self.state.ema.shadow {
            for ((_, b), s) in p.blocks_mut().into_iter().zip(shadow) {
                b.copy_from_slice(s);
            }
        }
        p
    }

    pub fn loss(&self) -> Result<f64> {
        Ok(snippet_loss(
            &self.frames,
            &self.state.params,
            &self.camera,
            &self.objective,
        )?
        .total)
    }

    /// One gradient step followed by an EMA update. Returns the loss at the
    /// parameters before the step.
    pub fn step(&mut self) -> Result<f64> {
        Ok(self.step_with_loss()?.total)
    }

    /// Like [`step`](Self::step) but returns the full pre-step loss breakdown,
    /// gradients included.
    pub fn step_with_loss(&mut self) -> Result<SnippetLoss> {
        let mut loss = snippet_gradient(
            &self.frames,
            &self.state.params,
            &self.camera,
            &self.objective,
        )?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteGradient {
                block: "loss".into(),
                index: 0,
            });
        }
        let grads = loss.gradients.take().expect("gradients requested");
        let g: Vec<&[f64]> = grads.blocks().into_iter().map(|(_, b)| b).collect();
        let mut blocks = self.state.params.blocks_mut();
        self.state.nadam.update(&mut blocks, &g)?;
        drop(blocks);
        let p: Vec<&[f64]> = self
            .state
            .params
            .blocks()
            .into_iter()
            .map(|(_, b)| b)
            .collect();
        self.state.ema.update(&p);
        self.state.iteration += 1;
        loss.gradients = Some(grads);
        Ok(loss)
    }

    /// Runs `iterations` steps, writing a checkpoint into `checkpoint_dir`
    /// every `checkpoint_every` iterations when a directory is given.
    pub fn run(
        &mut self,
        iterations: usize,
        checkpoint_dir: Option<&Path>,
        mut on_step: impl FnMut(u64, f64),
    ) -> Result<RunSummary> {
        let mut losses = Vec::with_capacity(iterations + 1);
        let mut checkpoints = Vec::new();
        let every = self.state.nadam.config.checkpoint_every as u64;
        for _ in 0..iterations {
            let l = self.step()?;
            on_step(self.state.iteration - 1, l);
            losses.push(l);
            if let Some(dir) = checkpoint_dir {
                if every > 0 && self.state.iteration.is_multiple_of(every) {
                    let path = dir.join(format!("checkpoint_{:08}.bin", self.state.iteration));
                    self.state.save(&path)?;
                    checkpoints.push(path);
                }
            }
        }
        let last = self.loss()?;
        on_step(self.state.iteration, last);
        losses.push(last);
        Ok(RunSummary {
            losses,
            checkpoints,
        })
    }

    /// Predicted depth at full resolution from the finest scale.
    pub fn depth(&self, averaged: bool) -> Result<ImageGrid> {
        let p = if averaged {
            self.averaged_params()
        } else {
            self.state.params.clone()
        };
        Ok(crate::objective::raw_to_depth(&p.inv_depth_raw[0], &self.objective.disp_range)?.1)
    }
}
