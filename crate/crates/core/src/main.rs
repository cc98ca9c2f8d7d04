use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use biost::autodiff::gradcheck::{run_suite, SUITE_TOLERANCE};
use biost::config::RunConfig;
use biost::data::classifier::{train_eval_classifier, ClassifierConfig};
use biost::data::dataset::{
    generate_dataset, generate_one_shot, one_shot, DatasetManifest, MANIFEST_FILE,
};
use biost::data::{export_png, read_image, write_image, ShapeClass};
use biost::eval::{
    ablation_csv, evaluate_direction, metrics_csv, run_ablation, translate_a_to_b,
    translate_b_to_a, AblationData, CellSpec, Direction, EvalContext, FeatureExtractor,
    StyleReference,
};
use biost::networks::Domain;
use biost::objectives::LossReport;
use biost::trainer::{Checkpoint, Phase, Session};
use biost::{io, seed, Error, Result, Tensor};

#[derive(Parser)]
#[command(
    name = "biost",
    version,
    about = "Bidirectional one-shot unsupervised domain mapping"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the domain B training set, held-out sets for both domains and the one-shot sample.
    GenData(Common),
    /// Phase I, then phase II on the one-shot sample.
    Train(TrainArgs),
    /// Map a directory of images through a trained checkpoint.
    Translate(TranslateArgs),
    /// Write classifier accuracy, content and style distances for a checkpoint.
    Evaluate(EvaluateArgs),
    /// Run the cycle-term and weight-sharing ablation grid over several seeds.
    Ablate(AblateArgs),
    /// Finite-difference check of every differentiable primitive.
    Gradcheck(GradcheckArgs),
    /// Print a complete configuration file with default values.
    DefaultConfig,
}

#[derive(Args)]
struct Common {
    /// key=value configuration file; every key must be present.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides one key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Stop after phase I.
    #[arg(long)]
    phase1_only: bool,
    /// Continue from a checkpoint written under the same configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also write `latest.ckpt` every N steps (0 = only at phase ends).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    A2b,
    B2a,
}

#[derive(Args)]
struct TranslateArgs {
    #[command(flatten)]
    common: Common,
    /// Defaults to `<out_dir>/checkpoints/final.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    direction: DirectionArg,
    /// Directory of native `.img` files.
    #[arg(long)]
    input: PathBuf,
    /// Defaults to `<out_dir>/translations/<direction>`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Defaults to `<out_dir>/checkpoints/final.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Phase I checkpoint whose encoder provides the features; defaults to
    /// `<out_dir>/checkpoints/phase1.ckpt`.
    #[arg(long)]
    phase1: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Seeds `seed, seed+1, ...`.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Only the eight cycle-toggle cells, without the random f-cycle and tied variants.
    #[arg(long)]
    grid_only: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn keys_help() -> String {
    let d = RunConfig::default();
    let mut s = String::from("Configuration keys (key=value, one per line, '#' comments):\n");
    for k in RunConfig::keys() {
        s.push_str(&format!(
            "  {k:<24} default {}\n",
            d.get(k).expect("known key")
        ));
    }
    s
}

fn main() -> ExitCode {
    let matches = Cli::command().after_long_help(keys_help()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Translate(a) => translate(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::DefaultConfig => {
            print!("{}", RunConfig::default().to_text());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => 3,
        Error::Verification(_) => 4,
        _ => 2,
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        let k = k.trim();
        if !RunConfig::keys().any(|known| known == k) {
            return Err(Error::Config(format!("--set: unknown key {k:?}")));
        }
        cfg.set(k, v)?;
    }
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

const SPLITS: [(&str, Domain); 3] = [
    ("train_b", Domain::B),
    ("test_b", Domain::B),
    ("test_a", Domain::A),
];

fn gen_data(a: &Common) -> Result<()> {
    let cfg = load_config(a)?;
    let size = cfg.train.net.image_size;
    let seed = cfg.train.seed;
    for (split, domain) in SPLITS {
        let n = if split == "train_b" {
            cfg.n_train
        } else {
            cfg.n_test
        };
        let m = generate_dataset(&cfg.data_dir.join(split), split, n, domain, seed, size)?;
        eprintln!(
            "{split}: {} images, classes {:?}",
            m.entries.len(),
            m.class_histogram()
        );
    }
    let m = generate_one_shot(&cfg.data_dir.join("oneshot"), seed, size)?;
    eprintln!("oneshot: {}", m.entries[0].class.name());
    Ok(())
}

fn load_split(
    data_dir: &Path,
    split: &str,
) -> Result<(DatasetManifest, Vec<(Tensor<f32>, ShapeClass)>)> {
    let dir = data_dir.join(split);
    let m = DatasetManifest::load(&dir.join(MANIFEST_FILE))?;
    let images = m.load_images(&dir)?;
    Ok((m, images))
}

fn images_only(samples: &[(Tensor<f32>, ShapeClass)]) -> Vec<Tensor<f32>> {
    samples.iter().map(|(t, _)| t.clone()).collect()
}

fn out_path(cfg: &RunConfig, sub: &str, file: &str) -> PathBuf {
    cfg.out_dir.join(sub).join(file)
}

/// Loss CSV rows already on disk for local steps below `keep`.
fn previous_rows(path: &Path, keep: u64) -> Result<Vec<LossReport>> {
    if keep == 0 || !path.exists() {
        return Ok(Vec::new());
    }
    let text = String::from_utf8(io::read(path)?)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let r = LossReport::parse_csv_row(line)?;
        if r.step < keep {
            rows.push(r);
        }
    }
    Ok(rows)
}

fn write_losses(path: &Path, rows: &[LossReport]) -> Result<()> {
    io::write_atomic(path, biost::trainer::loss_csv(rows).as_bytes())
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let t = &cfg.train;
    let (_, train_b) = load_split(&cfg.data_dir, "train_b")?;
    let train_b = images_only(&train_b);
    io::write_atomic(&cfg.out_dir.join("config.cfg"), cfg.to_text().as_bytes())?;
    let mut session = match &a.resume {
        Some(p) => Session::from_checkpoint(t.clone(), &Checkpoint::load(p)?)?,
        None => Session::new(t.clone())?,
    };
    let ckpt_dir = cfg.out_dir.join("checkpoints");
    let every = a.checkpoint_every;
    let save_latest = |s: &Session| -> Result<()> {
        if every > 0 && s.step % every == 0 {
            s.checkpoint().save(&ckpt_dir.join("latest.ckpt"))?;
        }
        Ok(())
    };
    let started = Instant::now();

    if session.phase() == Phase::One {
        let p1_csv = out_path(&cfg, "losses", "phase1.csv");
        let mut rows = previous_rows(&p1_csv, session.step)?;
        let mut boundary = Vec::new();
        while session.step < t.phase1_steps {
            let until = if every > 0 {
                (session.step / every + 1) * every
            } else {
                t.phase1_steps
            };
            session.run_phase1(&train_b, until, |r| {
                if r.step % 100 == 0 {
                    eprintln!("phase I  step {:>6} total {:.5}", r.step, r.total);
                }
                boundary.push(r.clone());
            })?;
            rows.append(&mut boundary);
            save_latest(&session)?;
        }
        write_losses(&p1_csv, &rows)?;
        session.checkpoint().save(&ckpt_dir.join("phase1.ckpt"))?;
        eprintln!("phase I done in {:.1?}", started.elapsed());
    }
    if a.phase1_only {
        return Ok(());
    }

    let (_, x) = load_split(&cfg.data_dir, "oneshot")?;
    let x = &x
        .first()
        .ok_or_else(|| Error::Config("oneshot manifest is empty".into()))?
        .0;
    let p2_csv = out_path(&cfg, "losses", "phase2.csv");
    let end = t.phase1_steps + t.phase2_steps;
    let mut rows = previous_rows(&p2_csv, session.step - t.phase1_steps)?;
    let mut boundary = Vec::new();
    while session.step < end {
        let until = if every > 0 {
            (session.step / every + 1) * every
        } else {
            end
        };
        session.run_phase2(x, &train_b, until, |r| {
            if r.step % 100 == 0 {
                eprintln!("phase II step {:>6} total {:.5}", r.step, r.total);
            }
            boundary.push(r.clone());
        })?;
        rows.append(&mut boundary);
        save_latest(&session)?;
    }
    write_losses(&p2_csv, &rows)?;
    session.checkpoint().save(&ckpt_dir.join("final.ckpt"))?;
    eprintln!("training done in {:.1?}", started.elapsed());
    Ok(())
}

fn load_trained(cfg: &RunConfig, path: Option<&PathBuf>) -> Result<Session> {
    let default = cfg.out_dir.join("checkpoints").join("final.ckpt");
    let path = path.unwrap_or(&default);
    let s = Session::from_checkpoint(cfg.train.clone(), &Checkpoint::load(path)?)?;
    if s.ae_a.is_none() {
        return Err(Error::Config(format!(
            "{} holds no domain A networks (phase I only)",
            path.display()
        )));
    }
    Ok(s)
}

fn translate(a: &TranslateArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let s = load_trained(&cfg, a.checkpoint.as_ref())?;
    let ae_a = s.ae_a.as_ref().expect("checked");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&a.input)
        .map_err(|e| Error::io(&a.input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "img"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!(
            "no .img files in {}",
            a.input.display()
        )));
    }
    let (name, forward): (&str, fn(_, _, &Tensor<f32>) -> Result<Tensor<f32>>) = match a.direction {
        DirectionArg::A2b => ("a2b", translate_a_to_b),
        DirectionArg::B2a => ("b2a", translate_b_to_a),
    };
    let out_dir = a
        .output
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("translations").join(name));
    let images = files
        .iter()
        .map(|p| read_image(p))
        .collect::<Result<Vec<_>>>()?;
    let out = forward(ae_a, &s.ae_b, &Tensor::stack(&images)?)?;
    for (i, p) in files.iter().enumerate() {
        let stem = p.file_stem().expect("file name").to_string_lossy();
        let img = out.sample(i);
        write_image(&out_dir.join(format!("{stem}.img")), &img)?;
        export_png(&out_dir.join(format!("{stem}.png")), &img)?;
    }
    eprintln!("{} images -> {}", files.len(), out_dir.display());
    Ok(())
}

struct EvalData {
    train_b: Vec<(Tensor<f32>, ShapeClass)>,
    test_b: Vec<(Tensor<f32>, ShapeClass)>,
    test_a: Vec<(Tensor<f32>, ShapeClass)>,
    data_seed: u64,
}

fn load_eval_data(cfg: &RunConfig) -> Result<EvalData> {
    let (m, train_b) = load_split(&cfg.data_dir, "train_b")?;
    let (_, test_b) = load_split(&cfg.data_dir, "test_b")?;
    let (_, test_a) = load_split(&cfg.data_dir, "test_a")?;
    Ok(EvalData {
        train_b,
        test_b,
        test_a,
        data_seed: m.seed,
    })
}

fn classifier(cfg: &RunConfig, d: &EvalData) -> Result<biost::data::classifier::Classifier> {
    let (clf, report) = train_eval_classifier(
        &d.train_b,
        &d.test_b,
        &ClassifierConfig::default(),
        seed::derive_seed(cfg.train.seed, "classifier"),
    )?;
    eprintln!(
        "classifier: train accuracy {:.3}, held-out {:.3}",
        report.train_accuracy, report.test_accuracy
    );
    Ok(clf)
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let s = load_trained(&cfg, a.checkpoint.as_ref())?;
    let p1_default = cfg.out_dir.join("checkpoints").join("phase1.ckpt");
    let p1 = Session::from_checkpoint(
        cfg.train.clone(),
        &Checkpoint::load(a.phase1.as_ref().unwrap_or(&p1_default))?,
    )?;
    let d = load_eval_data(&cfg)?;
    let clf = classifier(&cfg, &d)?;
    let feat = FeatureExtractor::new(&p1.ae_b);
    let style_a = StyleReference::new(&Tensor::stack(&images_only(&d.test_a))?, &feat)?;
    let style_b = StyleReference::new(&Tensor::stack(&images_only(&d.test_b))?, &feat)?;
    let ctx = EvalContext {
        classifier: &clf,
        feat: &feat,
        style_a: &style_a,
        style_b: &style_b,
    };
    let ae_a = s.ae_a.as_ref().expect("checked");
    let seed = cfg.train.seed;
    let reports = vec![
        evaluate_direction(ae_a, &s.ae_b, &d.test_a, &ctx, Direction::AToB, seed)?,
        evaluate_direction(ae_a, &s.ae_b, &d.test_b, &ctx, Direction::BToA, seed)?,
    ];
    for r in &reports {
        eprintln!(
            "{}: accuracy {} content {:.5} style {:.6}",
            r.direction.name(),
            r.classifier_accuracy
                .map(|v| format!("{v:.3}"))
                .unwrap_or_else(|| "-".into()),
            r.content_distance,
            r.style_distance
        );
    }
    let cell = CellSpec {
        toggles: cfg.train.toggles,
        share_spec: cfg.train.share_spec,
    };
    io::write_atomic(
        &out_path(&cfg, "metrics", "metrics.csv"),
        metrics_csv(&reports, &cell).as_bytes(),
    )
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let d = load_eval_data(&cfg)?;
    let clf = classifier(&cfg, &d)?;
    let mut cells = CellSpec::grid();
    if !a.grid_only {
        cells.push(CellSpec::random_fcycle());
        cells.push(CellSpec::tied());
    }
    let size = cfg.train.net.image_size;
    let data_seed = d.data_seed;
    let draw = move |s: u64| one_shot(data_seed, s, size).map(|x| x.image);
    // Surface draw failures before any training starts.
    let seeds: Vec<u64> = (0..a.seeds).map(|i| cfg.train.seed + i).collect();
    let xs = seeds.iter().map(|&s| draw(s)).collect::<Result<Vec<_>>>()?;
    let one_shot_for = |s: u64| xs[(s - cfg.train.seed) as usize].clone();
    let train_b = images_only(&d.train_b);
    let data = AblationData {
        train_b: &train_b,
        one_shot: &one_shot_for,
        test_a: &d.test_a,
        test_b: &d.test_b,
        classifier: &clf,
    };
    let started = Instant::now();
    let result = run_ablation(&cfg.train, &cells, &seeds, &data, |cell, s| {
        eprintln!(
            "cell {:<12} seed {s} done ({:.0?})",
            cell.label(),
            started.elapsed()
        );
    })?;
    io::write_atomic(
        &out_path(&cfg, "metrics", "ablation.csv"),
        ablation_csv(&result).as_bytes(),
    )
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let started = Instant::now();
    let checks = run_suite(a.seed, a.instances)?;
    let mut failed = Vec::new();
    for c in &checks {
        let status = if c.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<18} {:>3} instances {:>6} coords  max rel err {:.3e}  {status}",
            c.op, c.instances, c.coordinates, c.max_rel_error
        );
        if !c.passed() {
            failed.push(c.op);
        }
    }
    println!(
        "{} ops in {:.1?} (tolerance {SUITE_TOLERANCE:e})",
        checks.len(),
        started.elapsed()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Verification(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}
