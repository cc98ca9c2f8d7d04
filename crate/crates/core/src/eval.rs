//! Cross-domain translation, content/style metrics and the ablation harness.

use std::fmt::Write as _;

use crate::autodiff::Graph;
use crate::data::classifier::Classifier;
use crate::data::ShapeClass;
use crate::error::{Error, Result};
use crate::networks::ShareSpec;
use crate::networks::{Autoencoder, Domain, Mode};
use crate::objectives::CycleToggles;
use crate::parallel;
use crate::tensor::{gemm, Layout, Tensor};
use crate::trainer::{train_phase1, train_phase2, TrainConfig};

/// Batch size used for forward-only evaluation passes.
const EVAL_CHUNK: usize = 32;

fn map_chunks(
    images: &Tensor<f32>,
    f: impl Fn(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<Tensor<f32>> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::Config("empty image batch".into()));
    }
    let mut outs = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let items: Vec<_> = (start..(start + EVAL_CHUNK).min(n))
            .map(|i| images.sample(i))
            .collect();
        let out = f(&Tensor::stack(&items)?)?;
        outs.extend((0..items.len()).map(|i| out.sample(i)));
    }
    Ok(Tensor::stack(&outs)?)
}

/// `F(x) = D_B(E_A(x))` on a `[N,C,H,W]` batch, eval mode.
pub fn translate_a_to_b(
    ae_a: &Autoencoder,
    ae_b: &Autoencoder,
    x: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    map_chunks(x, |b| {
        Ok(ae_b.decode_tensor(&ae_a.encode_tensor(b, Mode::Eval)?, Mode::Eval)?)
    })
}

/// `G(s) = D_A(E_B(s))` on a `[N,C,H,W]` batch, eval mode.
pub fn translate_b_to_a(
    ae_a: &Autoencoder,
    ae_b: &Autoencoder,
    s: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    map_chunks(s, |b| {
        Ok(ae_a.decode_tensor(&ae_b.encode_tensor(b, Mode::Eval)?, Mode::Eval)?)
    })
}

/// Frozen snapshot of a phase I encoder used for content and style metrics.
pub struct FeatureExtractor {
    ae: Autoencoder,
}

/// Per-image features: the latent code and the three conv-stage activations.
#[derive(Clone, Debug)]
pub struct Features {
    pub code: Vec<f32>,
    /// `(channels, spatial, values)` per stage.
    pub stages: Vec<(usize, usize, Vec<f32>)>,
}

impl FeatureExtractor {
    pub fn new(ae_b: &Autoencoder) -> Self {
        let mut ae = ae_b.clone_params(Domain::B);
        ae.encoder.set_frozen(true);
        ae.decoder.set_frozen(true);
        Self { ae }
    }

    /// Features of every image of a `[N,C,H,W]` batch.
    pub fn features(&self, images: &Tensor<f32>) -> Result<Vec<Features>> {
        let n = images.shape()[0];
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let items: Vec<_> = (start..(start + EVAL_CHUNK).min(n))
                .map(|i| images.sample(i))
                .collect();
            let m = items.len();
            let mut g = Graph::new();
            let x = g.input(Tensor::stack(&items)?);
            let (z, taps) = self.ae.encode_with_taps(&mut g, x, Mode::Eval)?;
            let code = g.value(z);
            for i in 0..m {
                let stages = taps
                    .iter()
                    .map(|&t| {
                        let v = g.value(t);
                        let s = v.shape();
                        (s[1], s[2] * s[3], v.sample(i).into_data())
                    })
                    .collect();
                out.push(Features {
                    code: code.sample(i).into_data(),
                    stages,
                });
            }
        }
        Ok(out)
    }

    fn single(&self, image: &Tensor<f32>) -> Result<Features> {
        let batch = Tensor::stack(std::slice::from_ref(image))?;
        Ok(self.features(&batch)?.remove(0))
    }
}

/// Normalized Gram matrix `A A^T / (c h w)` of one stage.
pub fn gram(channels: usize, spatial: usize, acts: &[f32]) -> Vec<f32> {
    let mut g = vec![0.0; channels * channels];
    gemm(
        channels,
        spatial,
        channels,
        acts,
        Layout::Normal,
        acts,
        Layout::Transposed,
        &mut g,
        false,
    );
    let norm = 1.0 / (channels * spatial) as f32;
    g.iter_mut().for_each(|v| *v *= norm);
    g
}

/// Mean absolute difference of the latent codes of two `[C,H,W]` images.
pub fn content_distance(a: &Tensor<f32>, b: &Tensor<f32>, feat: &FeatureExtractor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Config(format!(
            "content distance of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let fa = feat.single(a)?;
    let fb = feat.single(b)?;
    Ok(code_l1(&fa.code, &fb.code))
}

fn code_l1(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() as f64)
        .sum::<f64>()
        / a.len() as f64
}

/// Mean Gram matrices of a reference set, per stage.
pub struct StyleReference {
    grams: Vec<Vec<f32>>,
}

impl StyleReference {
    pub fn new(reference: &Tensor<f32>, feat: &FeatureExtractor) -> Result<Self> {
        let n = reference.shape()[0];
        if n == 0 {
            return Err(Error::Config("empty style reference set".into()));
        }
        let feats = feat.features(reference)?;
        let mut grams: Vec<Vec<f32>> = Vec::new();
        for f in &feats {
            for (l, (c, s, acts)) in f.stages.iter().enumerate() {
                let g = gram(*c, *s, acts);
                if grams.len() <= l {
                    grams.push(vec![0.0; g.len()]);
                }
                grams[l].iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
        }
        let inv = 1.0 / feats.len() as f32;
        grams.iter_mut().flatten().for_each(|v| *v *= inv);
        Ok(Self { grams })
    }

    fn distance_of(&self, f: &Features) -> f64 {
        f.stages
            .iter()
            .zip(&self.grams)
            .map(|((c, s, acts), reference)| {
                let g = gram(*c, *s, acts);
                g.iter()
                    .zip(reference)
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
                    / g.len() as f64
            })
            .sum()
    }
}

/// Sum over stages of the mean squared difference between the image's Gram
/// matrix and the reference set's mean Gram matrix.
pub fn style_distance(
    image: &Tensor<f32>,
    reference: &StyleReference,
    feat: &FeatureExtractor,
) -> Result<f64> {
    Ok(reference.distance_of(&feat.single(image)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    AToB,
    BToA,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::AToB => "A->B",
            Direction::BToA => "B->A",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub direction: Direction,
    /// Only defined for translations into domain B.
    pub classifier_accuracy: Option<f64>,
    pub content_distance: f64,
    pub style_distance: f64,
    pub n_samples: usize,
    pub seed: u64,
}

/// Everything a direction needs besides the two autoencoders.
pub struct EvalContext<'a> {
    pub classifier: &'a Classifier,
    pub feat: &'a FeatureExtractor,
    /// Mean Gram of held-out domain A images.
    pub style_a: &'a StyleReference,
    /// Mean Gram of held-out domain B images.
    pub style_b: &'a StyleReference,
}

/// Translates `test` (source-domain images with ground-truth classes) and
/// scores the outputs.
pub fn evaluate_direction(
    ae_a: &Autoencoder,
    ae_b: &Autoencoder,
    test: &[(Tensor<f32>, ShapeClass)],
    ctx: &EvalContext<'_>,
    direction: Direction,
    seed: u64,
) -> Result<MetricReport> {
    if test.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let src = Tensor::stack(&test.iter().map(|(t, _)| t.clone()).collect::<Vec<_>>())?;
    let out = match direction {
        Direction::AToB => translate_a_to_b(ae_a, ae_b, &src)?,
        Direction::BToA => translate_b_to_a(ae_a, ae_b, &src)?,
    };
    score(&src, &out, test, ctx, direction, seed)
}

/// Scores given translations `out` of `src`.
pub fn score(
    src: &Tensor<f32>,
    out: &Tensor<f32>,
    test: &[(Tensor<f32>, ShapeClass)],
    ctx: &EvalContext<'_>,
    direction: Direction,
    seed: u64,
) -> Result<MetricReport> {
    let n = test.len();
    let fs = ctx.feat.features(src)?;
    let fo = ctx.feat.features(out)?;
    let reference = match direction {
        Direction::AToB => ctx.style_b,
        Direction::BToA => ctx.style_a,
    };
    let content = parallel::map_indices(n, |i| code_l1(&fs[i].code, &fo[i].code));
    let style = parallel::map_indices(n, |i| reference.distance_of(&fo[i]));
    let classifier_accuracy = match direction {
        Direction::AToB => {
            let pred = ctx.classifier.predict(out)?;
            Some(pred.iter().zip(test).filter(|(p, (_, c))| *p == c).count() as f64 / n as f64)
        }
        Direction::BToA => None,
    };
    Ok(MetricReport {
        direction,
        classifier_accuracy,
        content_distance: content.iter().sum::<f64>() / n as f64,
        style_distance: style.iter().sum::<f64>() / n as f64,
        n_samples: n,
        seed,
    })
}

/// One configuration of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CellSpec {
    pub toggles: CycleToggles,
    pub share_spec: ShareSpec,
}

impl CellSpec {
    /// The eight on/off combinations of the three cycle terms.
    pub fn grid() -> Vec<CellSpec> {
        (0..8)
            .map(|bits| CellSpec {
                toggles: CycleToggles::from_bits(bits & 4 != 0, bits & 2 != 0, bits & 1 != 0),
                share_spec: ShareSpec::None,
            })
            .collect()
    }

    pub fn random_fcycle() -> CellSpec {
        CellSpec {
            toggles: CycleToggles {
                fcycle_random: true,
                ..CycleToggles::default()
            },
            share_spec: ShareSpec::None,
        }
    }

    pub fn tied() -> CellSpec {
        CellSpec {
            toggles: CycleToggles::default(),
            share_spec: ShareSpec::Tied,
        }
    }

    pub fn label(&self) -> String {
        let b = |v: bool| if v { '1' } else { '0' };
        let t = &self.toggles;
        format!(
            "{}{}{}{}{}",
            b(t.bab),
            b(t.aba),
            b(t.fcycle),
            if t.fcycle_random { "+random" } else { "" },
            if self.share_spec == ShareSpec::Tied {
                "+tied"
            } else {
                ""
            }
        )
    }
}

/// Per-seed metric rows of one cell.
#[derive(Clone, Debug)]
pub struct AblationCell {
    pub spec: CellSpec,
    pub reports: Vec<MetricReport>,
}

impl AblationCell {
    /// Mean of `f` over the seeds of one direction.
    pub fn mean(
        &self,
        direction: Direction,
        f: impl Fn(&MetricReport) -> Option<f64>,
    ) -> Option<f64> {
        let v: Vec<f64> = self
            .reports
            .iter()
            .filter(|r| r.direction == direction)
            .filter_map(f)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Inputs shared by every ablation run.
pub struct AblationData<'a> {
    pub train_b: &'a [Tensor<f32>],
    /// One-shot sample of domain A for each seed.
    pub one_shot: &'a dyn Fn(u64) -> Tensor<f32>,
    pub test_a: &'a [(Tensor<f32>, ShapeClass)],
    pub test_b: &'a [(Tensor<f32>, ShapeClass)],
    pub classifier: &'a Classifier,
}

/// Runs phase I once per seed and phase II once per (cell, seed), evaluating
/// both directions. `progress` is told about every finished run.
pub fn run_ablation(
    base: &TrainConfig,
    cells: &[CellSpec],
    seeds: &[u64],
    data: &AblationData<'_>,
    mut progress: impl FnMut(&CellSpec, u64),
) -> Result<Vec<AblationCell>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let stack = |s: &[(Tensor<f32>, ShapeClass)]| {
        Tensor::stack(&s.iter().map(|(t, _)| t.clone()).collect::<Vec<_>>())
    };
    let (ref_a, ref_b) = (stack(data.test_a)?, stack(data.test_b)?);
    let mut out: Vec<AblationCell> = cells
        .iter()
        .map(|&spec| AblationCell {
            spec,
            reports: Vec::new(),
        })
        .collect();
    for &seed in seeds {
        let p1 = TrainConfig {
            seed,
            ..base.clone()
        };
        let (ae_b0, _) = train_phase1(&p1, data.train_b)?;
        let feat = FeatureExtractor::new(&ae_b0);
        let style_a = StyleReference::new(&ref_a, &feat)?;
        let style_b = StyleReference::new(&ref_b, &feat)?;
        let ctx = EvalContext {
            classifier: data.classifier,
            feat: &feat,
            style_a: &style_a,
            style_b: &style_b,
        };
        let x = (data.one_shot)(seed);
        for cell in out.iter_mut() {
            let cfg = TrainConfig {
                seed,
                toggles: cell.spec.toggles,
                share_spec: cell.spec.share_spec,
                ..base.clone()
            };
            let (ae_a, ae_b, _) =
                train_phase2(&cfg, &x, data.train_b, &ae_b0).map_err(|e| match e {
                    Error::Divergence {
                        phase,
                        step,
                        detail,
                    } => Error::Divergence {
                        phase,
                        step,
                        detail: format!("cell {} seed {seed}: {detail}", cell.spec.label()),
                    },
                    e => e,
                })?;
            for (dir, test) in [
                (Direction::AToB, data.test_a),
                (Direction::BToA, data.test_b),
            ] {
                cell.reports
                    .push(evaluate_direction(&ae_a, &ae_b, test, &ctx, dir, seed)?);
            }
            progress(&cell.spec, seed);
        }
    }
    Ok(out)
}

pub const METRICS_HEADER: &str = "cell,bab,aba,fcycle,fcycle_random,share_spec,direction,seed,accuracy,content_distance,style_distance";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// One row per (cell, direction, seed) plus one `mean` row per (cell, direction).
pub fn ablation_csv(cells: &[AblationCell]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for cell in cells {
        let t = &cell.spec.toggles;
        let prefix = format!(
            "{},{},{},{},{},{}",
            cell.spec.label(),
            t.bab as u8,
            t.aba as u8,
            t.fcycle as u8,
            t.fcycle_random as u8,
            cell.spec.share_spec.name()
        );
        for dir in [Direction::AToB, Direction::BToA] {
            for r in cell.reports.iter().filter(|r| r.direction == dir) {
                writeln!(
                    s,
                    "{prefix},{},{},{},{},{}",
                    dir.name(),
                    r.seed,
                    fmt_opt(r.classifier_accuracy),
                    r.content_distance,
                    r.style_distance
                )
                .expect("write to string");
            }
            writeln!(
                s,
                "{prefix},{},mean,{},{},{}",
                dir.name(),
                fmt_opt(cell.mean(dir, |r| r.classifier_accuracy)),
                fmt_opt(cell.mean(dir, |r| Some(r.content_distance))),
                fmt_opt(cell.mean(dir, |r| Some(r.style_distance)))
            )
            .expect("write to string");
        }
    }
    s
}

/// Metric rows for single-checkpoint evaluation.
pub fn metrics_csv(reports: &[MetricReport], cell: &CellSpec) -> String {
    ablation_csv(&[AblationCell {
        spec: *cell,
        reports: reports.to_vec(),
    }])
}
