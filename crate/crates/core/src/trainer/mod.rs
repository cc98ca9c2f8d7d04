//! Two-phase training: phase I fits the B autoencoder alone, phase II clones
//! it for domain A and optimises the joint objective.

pub mod augment;
pub mod checkpoint;
pub mod optimizer;

use std::collections::{HashMap, VecDeque};

use rand::seq::index;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::networks::{
    apply_share_spec, build_autoencoder, Autoencoder, Domain, NetConfig, ShareSpec,
};
use crate::objectives::{phase1_total, phase2_total, CycleToggles, LossReport, LossWeights, Pass};
use crate::seed;
use crate::tensor::Tensor;

pub use augment::{augment, augment_with, AugmentBounds};
pub use checkpoint::Checkpoint;
pub use optimizer::{Adam, AdamConfig, Moment, StepParam};

/// Length of the in-memory window of recent totals kept for diagnostics.
pub const HISTORY_LEN: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub phase1_steps: u64,
    pub phase2_steps: u64,
    pub batch_size_b: usize,
    pub copies_of_x_per_batch: usize,
    pub adam: AdamConfig,
    pub augment: AugmentBounds,
    /// Draw fresh augmentations of x every step instead of one fixed set.
    pub resample_px: bool,
    pub toggles: CycleToggles,
    pub share_spec: ShareSpec,
    pub weights: LossWeights,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            phase1_steps: 2000,
            phase2_steps: 2000,
            batch_size_b: 16,
            copies_of_x_per_batch: 16,
            adam: AdamConfig::default(),
            augment: AugmentBounds {
                max_rotation_degrees: 10.0,
                max_shift_pixels: 2,
            },
            resample_px: true,
            toggles: CycleToggles::default(),
            share_spec: ShareSpec::None,
            weights: LossWeights::default(),
            net: NetConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

impl TrainConfig {
    /// Every key accepted by [`TrainConfig::set`], in serialization order.
    pub const KEYS: [&'static str; 28] = [
        "seed",
        "phase1_steps",
        "phase2_steps",
        "batch_size_b",
        "copies_of_x_per_batch",
        "learning_rate",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "max_rotation_degrees",
        "max_shift_pixels",
        "resample_px",
        "bab",
        "aba",
        "fcycle",
        "fcycle_random",
        "share_spec",
        "lambda1",
        "lambda2",
        "lambda3",
        "lambda4",
        "lambda5",
        "lambda6",
        "lambda7",
        "image_channels",
        "image_size",
        "base_width",
        "n_residual_blocks",
    ];

    pub fn get(&self, key: &str) -> Option<String> {
        let w = &self.weights;
        let t = &self.toggles;
        Some(match key {
            "seed" => self.seed.to_string(),
            "phase1_steps" => self.phase1_steps.to_string(),
            "phase2_steps" => self.phase2_steps.to_string(),
            "batch_size_b" => self.batch_size_b.to_string(),
            "copies_of_x_per_batch" => self.copies_of_x_per_batch.to_string(),
            "learning_rate" => self.adam.learning_rate.to_string(),
            "adam_beta1" => self.adam.beta1.to_string(),
            "adam_beta2" => self.adam.beta2.to_string(),
            "adam_eps" => self.adam.eps.to_string(),
            "max_rotation_degrees" => self.augment.max_rotation_degrees.to_string(),
            "max_shift_pixels" => self.augment.max_shift_pixels.to_string(),
            "resample_px" => self.resample_px.to_string(),
            "bab" => t.bab.to_string(),
            "aba" => t.aba.to_string(),
            "fcycle" => t.fcycle.to_string(),
            "fcycle_random" => t.fcycle_random.to_string(),
            "share_spec" => self.share_spec.name().to_string(),
            "lambda1" => w.vae_phase1.to_string(),
            "lambda2" => w.rec_a.to_string(),
            "lambda3" => w.vae_b.to_string(),
            "lambda4" => w.vae_a.to_string(),
            "lambda5" => w.bab_cycle.to_string(),
            "lambda6" => w.aba_cycle.to_string(),
            "lambda7" => w.f_cycle.to_string(),
            "image_channels" => self.net.image_channels.to_string(),
            "image_size" => self.net.image_size.to_string(),
            "base_width" => self.net.base_width.to_string(),
            "n_residual_blocks" => self.net.n_residual_blocks.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "phase1_steps" => self.phase1_steps = parse_num(key, v)?,
            "phase2_steps" => self.phase2_steps = parse_num(key, v)?,
            "batch_size_b" => self.batch_size_b = parse_num(key, v)?,
            "copies_of_x_per_batch" => self.copies_of_x_per_batch = parse_num(key, v)?,
            "learning_rate" => self.adam.learning_rate = parse_num(key, v)?,
            "adam_beta1" => self.adam.beta1 = parse_num(key, v)?,
            "adam_beta2" => self.adam.beta2 = parse_num(key, v)?,
            "adam_eps" => self.adam.eps = parse_num(key, v)?,
            "max_rotation_degrees" => self.augment.max_rotation_degrees = parse_num(key, v)?,
            "max_shift_pixels" => self.augment.max_shift_pixels = parse_num(key, v)?,
            "resample_px" => self.resample_px = parse_bool(key, v)?,
            "bab" => self.toggles.bab = parse_bool(key, v)?,
            "aba" => self.toggles.aba = parse_bool(key, v)?,
            "fcycle" => self.toggles.fcycle = parse_bool(key, v)?,
            "fcycle_random" => self.toggles.fcycle_random = parse_bool(key, v)?,
            "share_spec" => {
                self.share_spec = ShareSpec::parse(v).ok_or_else(|| {
                    Error::Config(format!("{key}: expected none or tied, got {v:?}"))
                })?
            }
            "lambda1" => self.weights.vae_phase1 = parse_num(key, v)?,
            "lambda2" => self.weights.rec_a = parse_num(key, v)?,
            "lambda3" => self.weights.vae_b = parse_num(key, v)?,
            "lambda4" => self.weights.vae_a = parse_num(key, v)?,
            "lambda5" => self.weights.bab_cycle = parse_num(key, v)?,
            "lambda6" => self.weights.aba_cycle = parse_num(key, v)?,
            "lambda7" => self.weights.f_cycle = parse_num(key, v)?,
            "image_channels" => self.net.image_channels = parse_num(key, v)?,
            "image_size" => self.net.image_size = parse_num(key, v)?,
            "base_width" => self.net.base_width = parse_num(key, v)?,
            "n_residual_blocks" => self.net.n_residual_blocks = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.phase1_steps == 0 || self.phase2_steps == 0 {
            return Err(Error::Config(
                "phase1_steps and phase2_steps must be positive".into(),
            ));
        }
        if self.batch_size_b == 0 || self.copies_of_x_per_batch == 0 {
            return Err(Error::Config(
                "batch_size_b and copies_of_x_per_batch must be at least 1".into(),
            ));
        }
        if !(self.augment.max_rotation_degrees >= 0.0) {
            return Err(Error::Config(
                "max_rotation_degrees must be nonnegative".into(),
            ));
        }
        let w = &self.weights;
        for (k, l) in [
            ("lambda1", w.vae_phase1),
            ("lambda2", w.rec_a),
            ("lambda3", w.vae_b),
            ("lambda4", w.vae_a),
            ("lambda5", w.bab_cycle),
            ("lambda6", w.aba_cycle),
            ("lambda7", w.f_cycle),
        ] {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!(
                    "{k} must be a nonnegative number, got {l}"
                )));
            }
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.eps > 0.0)
        {
            return Err(Error::Config(
                "learning_rate, adam_beta1/2 or adam_eps out of range".into(),
            ));
        }
        Ok(())
    }

    /// `key=value` lines for every key.
    pub fn to_kv(&self) -> String {
        Self::KEYS
            .into_iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_kv().as_bytes()).into()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    One,
    Two,
}

impl Phase {
    fn label(self) -> &'static str {
        match self {
            Phase::One => "phase I",
            Phase::Two => "phase II",
        }
    }
}

/// Model, optimizer and step counter of a run in progress.
pub struct Session {
    pub config: TrainConfig,
    pub ae_b: Autoencoder,
    pub ae_a: Option<Autoencoder>,
    pub optimizer: Adam,
    /// Global step: completed phase I steps plus completed phase II steps.
    pub step: u64,
    pub rng_key: [u8; 32],
    /// Totals of the most recent steps.
    pub history: VecDeque<f64>,
    fixed_px: Option<Tensor<f32>>,
}

fn check_images(what: &str, images: &[Tensor<f32>], net: &NetConfig) -> Result<()> {
    if images.is_empty() {
        return Err(Error::Config(format!("{what} is empty")));
    }
    let want = net.image_shape();
    if let Some(bad) = images.iter().find(|t| t.shape() != want) {
        return Err(Error::Config(format!(
            "{what}: image shape {:?}, network expects {want:?}",
            bad.shape()
        )));
    }
    Ok(())
}

impl Session {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let ae_b = build_autoencoder(
            config.net,
            seed::derive_seed(config.seed, "ae_b"),
            Domain::B,
        )?;
        Ok(Self {
            optimizer: Adam::new(config.adam),
            rng_key: seed::derive_key(config.seed, "train"),
            config,
            ae_b,
            ae_a: None,
            step: 0,
            history: VecDeque::with_capacity(HISTORY_LEN),
            fixed_px: None,
        })
    }

    /// Session positioned at the start of phase II with a given phase I result.
    pub fn from_phase1(config: TrainConfig, ae_b: &Autoencoder) -> Result<Self> {
        let mut s = Self::new(config)?;
        if ae_b.config != s.config.net {
            return Err(Error::Config(
                "phase I autoencoder was built with a different network config".into(),
            ));
        }
        s.ae_b = ae_b.clone_params(Domain::B);
        s.step = s.config.phase1_steps;
        Ok(s)
    }

    pub fn phase(&self) -> Phase {
        if self.step < self.config.phase1_steps {
            Phase::One
        } else {
            Phase::Two
        }
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.config.phase1_steps + self.config.phase2_steps
    }

    fn sample_b<R: Rng>(&self, data_b: &[Tensor<f32>], rng: &mut R) -> Result<Tensor<f32>> {
        let n = self.config.batch_size_b;
        let picks: Vec<usize> = if n <= data_b.len() {
            index::sample(rng, data_b.len(), n).into_vec()
        } else {
            (0..n).map(|_| rng.gen_range(0..data_b.len())).collect()
        };
        let imgs: Vec<Tensor<f32>> = picks
            .iter()
            .map(|&i| augment(&data_b[i], self.config.augment, rng))
            .collect();
        Ok(Tensor::stack(&imgs)?)
    }

    fn sample_px<R: Rng>(&self, x: &Tensor<f32>, rng: &mut R) -> Result<Tensor<f32>> {
        let imgs: Vec<Tensor<f32>> = (0..self.config.copies_of_x_per_batch)
            .map(|_| augment(x, self.config.augment, rng))
            .collect();
        Ok(Tensor::stack(&imgs)?)
    }

    fn step_params(&self) -> Vec<(String, crate::autodiff::Param<f32>, bool)> {
        let mut out = Vec::new();
        let mut push = |ae: &Autoencoder| {
            let (ef, df) = (ae.encoder.is_frozen(), ae.decoder.is_frozen());
            for (name, p) in ae.named_params() {
                let frozen = if name.starts_with('E') { ef } else { df };
                out.push((name, p, frozen));
            }
        };
        push(&self.ae_b);
        if let Some(a) = &self.ae_a {
            push(a);
        }
        out
    }

    fn apply_update(&mut self, phase: Phase, report: &LossReport) -> Result<()> {
        let local = report.step;
        if !report.is_finite() {
            return Err(Error::Divergence {
                phase: phase.label(),
                step: local,
                detail: format!("non-finite loss: {}", report.csv_row()),
            });
        }
        let params = self.step_params();
        let views: Vec<StepParam<'_>> = params
            .iter()
            .map(|(n, p, f)| StepParam {
                name: n,
                param: p,
                frozen: *f,
            })
            .collect();
        self.optimizer.step(&views).map_err(|e| match e {
            Error::Divergence { detail, .. } => Error::Divergence {
                phase: phase.label(),
                step: local,
                detail,
            },
            e => e,
        })?;
        if self.history.len() == HISTORY_LEN {
            self.history.pop_front();
        }
        self.history.push_back(report.total);
        Ok(())
    }

    /// Runs phase I steps until `until` (global) or the end of phase I.
    pub fn run_phase1(
        &mut self,
        data_b: &[Tensor<f32>],
        until: u64,
        mut on_step: impl FnMut(&LossReport),
    ) -> Result<()> {
        check_images("domain B training set", data_b, &self.config.net)?;
        let end = until.min(self.config.phase1_steps);
        while self.step < end {
            let local = self.step;
            let mut rng = seed::stream(&self.rng_key, "phase1", local);
            let batch = self.sample_b(data_b, &mut rng)?;
            self.ae_b.zero_grad();
            let mut report =
                phase1_total(&mut self.ae_b, &batch, &self.config.weights, Pass::Backward)?;
            report.step = local;
            self.apply_update(Phase::One, &report)?;
            on_step(&report);
            self.step += 1;
        }
        Ok(())
    }

    /// Clones the B autoencoder into domain A and resets the optimizer.
    pub fn start_phase2(&mut self) -> Result<()> {
        if self.ae_a.is_some() {
            return Ok(());
        }
        if self.step < self.config.phase1_steps {
            return Err(Error::Config(format!(
                "phase II requested at step {} before phase I finished ({} steps)",
                self.step, self.config.phase1_steps
            )));
        }
        let mut ae_a = self.ae_b.clone_params(Domain::A);
        apply_share_spec(&mut ae_a, &self.ae_b, self.config.share_spec)?;
        self.ae_a = Some(ae_a);
        self.optimizer = Adam::new(self.config.adam);
        Ok(())
    }

    /// Runs phase II steps with one-shot sample `x` until `until` (global).
    pub fn run_phase2(
        &mut self,
        x: &Tensor<f32>,
        data_b: &[Tensor<f32>],
        until: u64,
        mut on_step: impl FnMut(&LossReport),
    ) -> Result<()> {
        check_images("domain B training set", data_b, &self.config.net)?;
        check_images("one-shot sample", std::slice::from_ref(x), &self.config.net)?;
        self.start_phase2()?;
        if !self.config.resample_px && self.fixed_px.is_none() {
            let mut rng = seed::stream(&self.rng_key, "px", 0);
            self.fixed_px = Some(self.sample_px(x, &mut rng)?);
        }
        let end = until.min(self.config.phase1_steps + self.config.phase2_steps);
        while self.step < end {
            let local = self.step - self.config.phase1_steps;
            let mut rng = seed::stream(&self.rng_key, "phase2", local);
            let batch_b = self.sample_b(data_b, &mut rng)?;
            let batch_a = match &self.fixed_px {
                Some(px) => px.clone(),
                None => self.sample_px(x, &mut rng)?,
            };
            let ae_a = self.ae_a.as_mut().expect("phase II started");
            ae_a.zero_grad();
            self.ae_b.zero_grad();
            let mut report = phase2_total(
                ae_a,
                &mut self.ae_b,
                &batch_a,
                &batch_b,
                &self.config.weights,
                &self.config.toggles,
                &mut rng,
                Pass::Backward,
            )?;
            report.step = local;
            self.apply_update(Phase::Two, &report)?;
            on_step(&report);
            self.step += 1;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut params: Vec<(String, Tensor<f32>)> = Vec::new();
        let mut add = |ae: &Autoencoder| {
            for (n, p) in ae.named_params() {
                params.push((n, p.read().value.clone()));
            }
        };
        add(&self.ae_b);
        if let Some(a) = &self.ae_a {
            add(a);
        }
        Checkpoint {
            config_hash: self.config.hash(),
            step: self.step,
            params,
            moments: self.optimizer.moments().to_vec(),
            rng_key: self.rng_key,
        }
    }

    /// Rebuilds a session from `ckpt`, which must have been written under
    /// the same `config`.
    pub fn from_checkpoint(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.config_hash != config.hash() {
            return Err(Error::Config(
                "checkpoint was written under a different configuration".into(),
            ));
        }
        let mut s = Self::new(config)?;
        s.step = ckpt.step;
        s.rng_key = ckpt.rng_key;
        let values: HashMap<&str, &Tensor<f32>> =
            ckpt.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        load_values(&s.ae_b, &values)?;
        let has_a = ckpt.params.iter().any(|(n, _)| n.starts_with("E_A/"));
        if has_a {
            let mut ae_a = s.ae_b.clone_params(Domain::A);
            apply_share_spec(&mut ae_a, &s.ae_b, s.config.share_spec)?;
            load_values(&ae_a, &values)?;
            s.ae_a = Some(ae_a);
        }
        let expected = s.step_params().len();
        if ckpt.params.len() != expected {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "{} parameter records, network has {expected}",
                    ckpt.params.len()
                ),
            ));
        }
        let t = if has_a {
            s.step - s.config.phase1_steps.min(s.step)
        } else {
            s.step
        };
        s.optimizer = Adam::with_state(s.config.adam, t, ckpt.moments.clone());
        Ok(s)
    }
}

fn load_values(ae: &Autoencoder, values: &HashMap<&str, &Tensor<f32>>) -> Result<()> {
    for (name, p) in ae.named_params() {
        let t = values
            .get(name.as_str())
            .ok_or_else(|| Error::format("checkpoint", format!("missing parameter {name}")))?;
        let mut slot = p.write();
        if slot.value.shape() != t.shape() {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "{name}: shape {:?}, network expects {:?}",
                    t.shape(),
                    slot.value.shape()
                ),
            ));
        }
        slot.value = (*t).clone();
    }
    Ok(())
}

/// Phase I from scratch; returns the trained B autoencoder and one report per step.
pub fn train_phase1(
    config: &TrainConfig,
    data_b: &[Tensor<f32>],
) -> Result<(Autoencoder, Vec<LossReport>)> {
    let mut s = Session::new(config.clone())?;
    let mut log = Vec::with_capacity(config.phase1_steps as usize);
    s.run_phase1(data_b, config.phase1_steps, |r| log.push(r.clone()))?;
    Ok((s.ae_b, log))
}

/// Phase II starting from a phase I result; returns `(ae_a, ae_b, reports)`.
pub fn train_phase2(
    config: &TrainConfig,
    x: &Tensor<f32>,
    data_b: &[Tensor<f32>],
    ae_b: &Autoencoder,
) -> Result<(Autoencoder, Autoencoder, Vec<LossReport>)> {
    let mut s = Session::from_phase1(config.clone(), ae_b)?;
    let mut log = Vec::with_capacity(config.phase2_steps as usize);
    s.run_phase2(x, data_b, u64::MAX, |r| log.push(r.clone()))?;
    let ae_a = s.ae_a.take().expect("phase II ran");
    Ok((ae_a, s.ae_b, log))
}

/// Loss log as CSV text with header.
pub fn loss_csv(reports: &[LossReport]) -> String {
    let mut s = String::from(LossReport::CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}
