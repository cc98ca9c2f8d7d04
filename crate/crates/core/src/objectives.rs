//! Loss terms of both training phases and the per-term freezing masks.
//!
//! Each term is built in its own graph and backpropagated on its own, with
//! the networks listed in its [`DetachMask`] frozen: they still carry
//! gradient to the networks upstream of them but keep their own parameter
//! gradients (and batch-norm running statistics) untouched.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Graph, TensorError, Var};
use crate::error::{Error, Result};
use crate::networks::{Autoencoder, Mode};
use crate::tensor::Tensor;

/// Trade-off coefficients of the two phase totals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Phase I variational weight.
    pub vae_phase1: f32,
    pub rec_a: f32,
    pub vae_b: f32,
    pub vae_a: f32,
    pub bab_cycle: f32,
    pub aba_cycle: f32,
    pub f_cycle: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            vae_phase1: 0.001,
            rec_a: 1.0,
            vae_b: 0.001,
            vae_a: 0.001,
            bab_cycle: 1.0,
            aba_cycle: 1.0,
            f_cycle: 0.001,
        }
    }
}

/// Which cycle terms take part in Phase II.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CycleToggles {
    pub bab: bool,
    pub aba: bool,
    pub fcycle: bool,
    /// Feed the feature cycle randomly permuted codes instead of real ones.
    /// Only has an effect while `fcycle` is on.
    pub fcycle_random: bool,
}

impl Default for CycleToggles {
    fn default() -> Self {
        Self {
            bab: true,
            aba: true,
            fcycle: true,
            fcycle_random: false,
        }
    }
}

impl CycleToggles {
    pub fn none() -> Self {
        Self {
            bab: false,
            aba: false,
            fcycle: false,
            fcycle_random: false,
        }
    }

    pub fn from_bits(bab: bool, aba: bool, fcycle: bool) -> Self {
        Self {
            bab,
            aba,
            fcycle,
            fcycle_random: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Net {
    EncoderA,
    DecoderA,
    EncoderB,
    DecoderB,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Term {
    RecB,
    VaeB,
    RecA,
    VaeA,
    BabCycle,
    AbaCycle,
    FCycle,
}

impl Term {
    pub const ALL: [Term; 7] = [
        Term::RecB,
        Term::VaeB,
        Term::RecA,
        Term::VaeA,
        Term::BabCycle,
        Term::AbaCycle,
        Term::FCycle,
    ];
}

/// Networks whose parameters a term leaves untouched.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DetachMask(&'static [Net]);

impl DetachMask {
    pub fn of(term: Term) -> Self {
        match term {
            Term::RecB | Term::VaeB | Term::RecA | Term::VaeA => DetachMask(&[]),
            Term::BabCycle => DetachMask(&[Net::EncoderA, Net::DecoderA]),
            Term::AbaCycle => DetachMask(&[Net::EncoderB, Net::DecoderB]),
            Term::FCycle => DetachMask(&[Net::EncoderB]),
        }
    }

    pub fn nets(&self) -> &'static [Net] {
        self.0
    }

    pub fn freezes(&self, net: Net) -> bool {
        self.0.contains(&net)
    }
}

/// Sets the frozen flags of all four networks from `mask` (plus `all` for
/// forward-only passes) and restores them afterwards.
fn with_mask<R>(
    ae_a: &mut Autoencoder,
    ae_b: &mut Autoencoder,
    mask: DetachMask,
    all: bool,
    f: impl FnOnce(&Autoencoder, &Autoencoder) -> R,
) -> R {
    let saved = [
        ae_a.encoder.is_frozen(),
        ae_a.decoder.is_frozen(),
        ae_b.encoder.is_frozen(),
        ae_b.decoder.is_frozen(),
    ];
    ae_a.encoder.set_frozen(all || mask.freezes(Net::EncoderA));
    ae_a.decoder.set_frozen(all || mask.freezes(Net::DecoderA));
    ae_b.encoder.set_frozen(all || mask.freezes(Net::EncoderB));
    ae_b.decoder.set_frozen(all || mask.freezes(Net::DecoderB));
    let r = f(ae_a, ae_b);
    ae_a.encoder.set_frozen(saved[0]);
    ae_a.decoder.set_frozen(saved[1]);
    ae_b.encoder.set_frozen(saved[2]);
    ae_b.decoder.set_frozen(saved[3]);
    r
}

fn with_ae_mask<R>(ae: &mut Autoencoder, all: bool, f: impl FnOnce(&Autoencoder) -> R) -> R {
    let saved = (ae.encoder.is_frozen(), ae.decoder.is_frozen());
    ae.encoder.set_frozen(all);
    ae.decoder.set_frozen(all);
    let r = f(ae);
    ae.encoder.set_frozen(saved.0);
    ae.decoder.set_frozen(saved.1);
    r
}

/// `mean |D(E(x)) - x|`.
pub fn loss_rec(g: &mut Graph<f32>, ae: &Autoencoder, batch: Var) -> Result<Var, TensorError> {
    Ok(rec_and_vae(g, ae, batch)?.0)
}

/// `0.5 * mean(E(x)^2)`.
pub fn loss_vae(g: &mut Graph<f32>, ae: &Autoencoder, batch: Var) -> Result<Var, TensorError> {
    let z = ae.encode(g, batch, Mode::Train)?;
    Ok(g.kl_unit_gaussian(z))
}

/// Reconstruction and variational terms sharing one encoder pass.
pub fn rec_and_vae(
    g: &mut Graph<f32>,
    ae: &Autoencoder,
    batch: Var,
) -> Result<(Var, Var), TensorError> {
    let z = ae.encode(g, batch, Mode::Train)?;
    let vae = g.kl_unit_gaussian(z);
    let y = ae.decode(g, z, Mode::Train)?;
    let rec = g.l1_loss(y, batch)?;
    Ok((rec, vae))
}

/// `mean |D_B(E_A(D_A(E_B(s)))) - s|`.
pub fn loss_bab_cycle(
    g: &mut Graph<f32>,
    ae_a: &Autoencoder,
    ae_b: &Autoencoder,
    batch_b: Var,
) -> Result<Var, TensorError> {
    let z = ae_b.encode(g, batch_b, Mode::Train)?;
    let in_a = ae_a.decode(g, z, Mode::Train)?;
    let z2 = ae_a.encode(g, in_a, Mode::Train)?;
    let back = ae_b.decode(g, z2, Mode::Train)?;
    g.l1_loss(back, batch_b)
}

/// `mean |D_A(E_B(D_B(E_A(t)))) - t|`.
pub fn loss_aba_cycle(
    g: &mut Graph<f32>,
    ae_a: &Autoencoder,
    ae_b: &Autoencoder,
    batch_a: Var,
) -> Result<Var, TensorError> {
    let z = ae_a.encode(g, batch_a, Mode::Train)?;
    let in_b = ae_b.decode(g, z, Mode::Train)?;
    let z2 = ae_b.encode(g, in_b, Mode::Train)?;
    let back = ae_a.decode(g, z2, Mode::Train)?;
    g.l1_loss(back, batch_a)
}

/// `mean |E_A(D_A(E_B(s))) - E_B(s)|`; `E_B` must be frozen so that the
/// code is a constant target.
pub fn loss_f_cycle(
    g: &mut Graph<f32>,
    ae_a: &Autoencoder,
    ae_b: &Autoencoder,
    batch_b: Var,
) -> Result<Var, TensorError> {
    let z = ae_b.encode(g, batch_b, Mode::Train)?;
    loss_f_cycle_codes(g, ae_a, z)
}

/// `mean |E_A(D_A(z)) - z|` for given (e.g. permuted) codes.
pub fn loss_f_cycle_random(
    g: &mut Graph<f32>,
    ae_a: &Autoencoder,
    codes: &Tensor<f32>,
) -> Result<Var, TensorError> {
    let z = g.input(codes.clone());
    loss_f_cycle_codes(g, ae_a, z)
}

fn loss_f_cycle_codes(g: &mut Graph<f32>, ae_a: &Autoencoder, z: Var) -> Result<Var, TensorError> {
    let x = ae_a.decode(g, z, Mode::Train)?;
    let z2 = ae_a.encode(g, x, Mode::Train)?;
    g.l1_loss(z2, z)
}

/// Independent random permutation of the flattened coordinates of each
/// sample's code.
pub fn permute_codes<R: Rng>(codes: &Tensor<f32>, rng: &mut R) -> Tensor<f32> {
    let per: usize = codes.shape()[1..].iter().product();
    let mut out = codes.clone();
    for chunk in out.data_mut().chunks_mut(per) {
        chunk.shuffle(rng);
    }
    out
}

/// Per-term values of one batch plus the weighted total. Absent terms were
/// not computed (phase I, or toggled off).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub rec_b: Option<f64>,
    pub rec_a: Option<f64>,
    pub vae_b: Option<f64>,
    pub vae_a: Option<f64>,
    pub bab: Option<f64>,
    pub aba: Option<f64>,
    pub fcycle: Option<f64>,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,rec_B,rec_A,vae_B,vae_A,bab,aba,fcycle,total";

    pub fn csv_row(&self) -> String {
        let mut s = self.step.to_string();
        for v in [
            self.rec_b,
            self.rec_a,
            self.vae_b,
            self.vae_a,
            self.bab,
            self.aba,
            self.fcycle,
        ] {
            s.push(',');
            if let Some(v) = v {
                write!(s, "{v}").expect("write to string");
            }
        }
        write!(s, ",{}", self.total).expect("write to string");
        s
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 9 {
            return Err(Error::format(
                "loss csv",
                format!("expected 9 fields, got {}", fields.len()),
            ));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::format("loss csv", format!("bad number {s:?}: {e}")))
        };
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        };
        Ok(Self {
            step: fields[0]
                .parse()
                .map_err(|e| Error::format("loss csv", format!("bad step {:?}: {e}", fields[0])))?,
            rec_b: opt(fields[1])?,
            rec_a: opt(fields[2])?,
            vae_b: opt(fields[3])?,
            vae_a: opt(fields[4])?,
            bab: opt(fields[5])?,
            aba: opt(fields[6])?,
            fcycle: opt(fields[7])?,
            total: num(fields[8])?,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Whether a phase total also backpropagates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    /// Accumulate parameter gradients and update batch-norm running statistics.
    Backward,
    /// Values only; no gradient or running-statistic writes.
    ForwardOnly,
}

fn finish(g: Graph<f32>, loss: Var, pass: Pass) -> Result<(), TensorError> {
    if pass == Pass::Backward {
        g.backward(loss)?;
    }
    Ok(())
}

fn weighted(g: &mut Graph<f32>, parts: &[(Var, f32)]) -> Result<Var, TensorError> {
    let mut acc = g.scale(parts[0].0, parts[0].1);
    for &(v, w) in &parts[1..] {
        let s = g.scale(v, w);
        acc = g.add(acc, s)?;
    }
    Ok(acc)
}

/// `L_REC_B + w * L_VAE_B`.
pub fn phase1_total(
    ae_b: &mut Autoencoder,
    batch_b: &Tensor<f32>,
    weights: &LossWeights,
    pass: Pass,
) -> Result<LossReport> {
    let (rec, vae) = with_ae_mask(
        ae_b,
        pass == Pass::ForwardOnly,
        |ae| -> Result<(f32, f32), TensorError> {
            let mut g = Graph::new();
            let x = g.input(batch_b.clone());
            let (rec, vae) = rec_and_vae(&mut g, ae, x)?;
            let total = weighted(&mut g, &[(rec, 1.0), (vae, weights.vae_phase1)])?;
            let values = (g.value(rec).item(), g.value(vae).item());
            finish(g, total, pass)?;
            Ok(values)
        },
    )?;
    let (rec, vae) = (rec as f64, vae as f64);
    Ok(LossReport {
        rec_b: Some(rec),
        vae_b: Some(vae),
        total: rec + weights.vae_phase1 as f64 * vae,
        ..Default::default()
    })
}

/// Builds `terms` in one graph, backpropagates their weighted sum under the
/// shared mask of the terms and returns the unweighted term values. All terms
/// must carry the same [`DetachMask`].
#[allow(clippy::too_many_arguments)]
pub fn backward_terms<R: Rng>(
    ae_a: &mut Autoencoder,
    ae_b: &mut Autoencoder,
    batch_a: &Tensor<f32>,
    batch_b: &Tensor<f32>,
    terms: &[(Term, f32)],
    fcycle_random: bool,
    rng: &mut R,
    pass: Pass,
) -> Result<Vec<f32>> {
    let Some(&(first, _)) = terms.first() else {
        return Ok(Vec::new());
    };
    let mask = DetachMask::of(first);
    if terms.iter().any(|&(t, _)| DetachMask::of(t) != mask) {
        return Err(Error::Config(format!(
            "terms {terms:?} do not share one freezing mask"
        )));
    }
    let values = with_mask(
        ae_a,
        ae_b,
        mask,
        pass == Pass::ForwardOnly,
        |a, b| -> Result<_, TensorError> {
            let mut g = Graph::new();
            let mut enc_b = None;
            let mut enc_a = None;
            let mut parts = Vec::with_capacity(terms.len());
            for &(term, w) in terms {
                let v = match term {
                    Term::RecB | Term::VaeB | Term::RecA | Term::VaeA => {
                        let (ae, cache, batch) = match term {
                            Term::RecB | Term::VaeB => (b, &mut enc_b, batch_b),
                            _ => (a, &mut enc_a, batch_a),
                        };
                        let (x, z) = match *cache {
                            Some(c) => c,
                            None => {
                                let x = g.input(batch.clone());
                                let z = ae.encode(&mut g, x, Mode::Train)?;
                                *cache = Some((x, z));
                                (x, z)
                            }
                        };
                        if matches!(term, Term::VaeB | Term::VaeA) {
                            g.kl_unit_gaussian(z)
                        } else {
                            let y = ae.decode(&mut g, z, Mode::Train)?;
                            g.l1_loss(y, x)?
                        }
                    }
                    Term::BabCycle => {
                        let x = g.input(batch_b.clone());
                        loss_bab_cycle(&mut g, a, b, x)?
                    }
                    Term::AbaCycle => {
                        let x = g.input(batch_a.clone());
                        loss_aba_cycle(&mut g, a, b, x)?
                    }
                    Term::FCycle if fcycle_random => {
                        let codes = b.encode_tensor(batch_b, Mode::Train)?;
                        loss_f_cycle_random(&mut g, a, &permute_codes(&codes, rng))?
                    }
                    Term::FCycle => {
                        let x = g.input(batch_b.clone());
                        loss_f_cycle(&mut g, a, b, x)?
                    }
                };
                parts.push((v, w));
            }
            let values: Vec<f32> = parts.iter().map(|&(v, _)| g.value(v).item()).collect();
            let total = weighted(&mut g, &parts)?;
            finish(g, total, pass)?;
            Ok(values)
        },
    )?;
    Ok(values)
}

/// Phase II objective: every active term is built and backpropagated under
/// its own mask. `rng` drives the permutation of the random feature cycle.
#[allow(clippy::too_many_arguments)]
pub fn phase2_total<R: Rng>(
    ae_a: &mut Autoencoder,
    ae_b: &mut Autoencoder,
    batch_a: &Tensor<f32>,
    batch_b: &Tensor<f32>,
    weights: &LossWeights,
    toggles: &CycleToggles,
    rng: &mut R,
    pass: Pass,
) -> Result<LossReport> {
    let w = weights;
    let mut groups: Vec<Vec<(Term, f32)>> = vec![
        vec![(Term::RecB, 1.0), (Term::VaeB, w.vae_b)],
        vec![(Term::RecA, w.rec_a), (Term::VaeA, w.vae_a)],
    ];
    if toggles.bab {
        groups.push(vec![(Term::BabCycle, w.bab_cycle)]);
    }
    if toggles.aba {
        groups.push(vec![(Term::AbaCycle, w.aba_cycle)]);
    }
    if toggles.fcycle {
        groups.push(vec![(Term::FCycle, w.f_cycle)]);
    }
    let mut report = LossReport::default();
    for terms in &groups {
        let values = backward_terms(
            ae_a,
            ae_b,
            batch_a,
            batch_b,
            terms,
            toggles.fcycle_random,
            rng,
            pass,
        )?;
        for (&(term, weight), v) in terms.iter().zip(values) {
            let v = v as f64;
            report.total += weight as f64 * v;
            let slot = match term {
                Term::RecB => &mut report.rec_b,
                Term::VaeB => &mut report.vae_b,
                Term::RecA => &mut report.rec_a,
                Term::VaeA => &mut report.vae_a,
                Term::BabCycle => &mut report.bab,
                Term::AbaCycle => &mut report.aba,
                Term::FCycle => &mut report.fcycle,
            };
            *slot = Some(v);
        }
    }
    Ok(report)
}
