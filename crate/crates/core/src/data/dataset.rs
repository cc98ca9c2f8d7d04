//! Dataset generation and the tab-separated manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io;
use crate::networks::Domain;
use crate::parallel;
use crate::seed;
use crate::tensor::Tensor;

use super::raster::{read_image, write_image};
use super::{render, SceneSpec, ShapeClass, StyleSpec};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub class: ShapeClass,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

/// One sample held in memory.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub class: ShapeClass,
    pub scene: SceneSpec,
}

/// Scene `index` of `split`; classes rotate so any `n` consecutive indices
/// are balanced to within one. The same scene is used for both domains.
pub fn scene(seed: u64, split: &str, index: usize, size: usize) -> SceneSpec {
    let class = ShapeClass::ALL[index % ShapeClass::COUNT];
    let mut rng = seed::rng(seed, &format!("scene/{split}/{index}"));
    SceneSpec::sample(class, size, &mut rng)
}

/// Renders `n` samples of `split` in `domain`'s style.
pub fn render_split(
    seed: u64,
    split: &str,
    n: usize,
    domain: Domain,
    size: usize,
) -> Result<Vec<Sample>> {
    let style = StyleSpec::for_domain(domain);
    parallel::map_indices(n, |i| {
        let scene = scene(seed, split, i, size);
        render(&scene, &style, size).map(|r| Sample {
            image: r.image,
            class: scene.class,
            scene,
        })
    })
    .into_iter()
    .collect()
}

/// Writes `n` images of `split` under `dir` plus `dir/manifest.tsv`.
pub fn generate_dataset(
    dir: &Path,
    split: &str,
    n: usize,
    domain: Domain,
    seed: u64,
    size: usize,
) -> Result<DatasetManifest> {
    let samples = render_split(seed, split, n, domain, size)?;
    let mut entries = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        let rel = PathBuf::from(format!("{split}_{}_{i:05}.img", domain.tag()));
        write_image(&dir.join(&rel), &s.image)?;
        entries.push(ManifestEntry {
            path: rel,
            class: s.class,
            domain,
        });
    }
    let manifest = DatasetManifest {
        seed,
        version: MANIFEST_VERSION,
        entries,
    };
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Number of candidate scenes a one-shot draw picks from.
pub const ONE_SHOT_POOL: u64 = 1 << 16;

/// Domain A sample number `draw` of the one-shot split: a random scene of a
/// random class.
pub fn one_shot(seed: u64, draw: u64, size: usize) -> Result<Sample> {
    let index = seed::derive_seed(seed, &format!("oneshot/{draw}")) % ONE_SHOT_POOL;
    let scene = scene(seed, "oneshot", index as usize, size);
    let r = render(&scene, &StyleSpec::for_domain(Domain::A), size)?;
    Ok(Sample {
        image: r.image,
        class: scene.class,
        scene,
    })
}

/// Writes one-shot draw 0 under `dir` with its one-line manifest.
pub fn generate_one_shot(dir: &Path, seed: u64, size: usize) -> Result<DatasetManifest> {
    let s = one_shot(seed, 0, size)?;
    let rel = PathBuf::from("oneshot_A.img");
    write_image(&dir.join(&rel), &s.image)?;
    let manifest = DatasetManifest {
        seed,
        version: MANIFEST_VERSION,
        entries: vec![ManifestEntry {
            path: rel,
            class: s.class,
            domain: Domain::A,
        }],
    };
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("# version {}\n# seed {}\n", self.version, self.seed);
        for e in &self.entries {
            writeln!(
                s,
                "{}\t{}\t{}",
                e.path.display(),
                e.class.name(),
                e.domain.tag()
            )
            .expect("write to string");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut seed = None;
        let mut version = None;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let ctx = || format!("manifest line {}", n + 1);
            if let Some(meta) = line.strip_prefix("# ") {
                let (k, v) = meta
                    .split_once(' ')
                    .ok_or_else(|| Error::format(ctx(), "malformed header"))?;
                let v: u64 = v
                    .parse()
                    .map_err(|e| Error::format(ctx(), format!("{k}: {e}")))?;
                match k {
                    "seed" => seed = Some(v),
                    "version" => version = Some(v as u32),
                    _ => return Err(Error::format(ctx(), format!("unknown header {k}"))),
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let [path, class, domain] = f[..] else {
                return Err(Error::format(
                    ctx(),
                    format!("expected 3 tab-separated fields, got {}", f.len()),
                ));
            };
            entries.push(ManifestEntry {
                path: PathBuf::from(path),
                class: ShapeClass::parse(class)
                    .ok_or_else(|| Error::format(ctx(), format!("unknown class {class:?}")))?,
                domain: Domain::parse(domain)
                    .ok_or_else(|| Error::format(ctx(), format!("unknown domain {domain:?}")))?,
            });
        }
        let version = version.ok_or_else(|| Error::format("manifest", "missing version header"))?;
        if version != MANIFEST_VERSION {
            return Err(Error::format(
                "manifest",
                format!("unsupported version {version}"),
            ));
        }
        Ok(Self {
            seed: seed.ok_or_else(|| Error::format("manifest", "missing seed header"))?,
            version,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = io::read(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        Self::parse(&text)
    }

    /// Reads every image, resolving paths against `dir`.
    pub fn load_images(&self, dir: &Path) -> Result<Vec<(Tensor<f32>, ShapeClass)>> {
        self.entries
            .iter()
            .map(|e| Ok((read_image(&dir.join(&e.path))?, e.class)))
            .collect()
    }

    pub fn class_histogram(&self) -> [usize; ShapeClass::COUNT] {
        let mut h = [0; ShapeClass::COUNT];
        for e in &self.entries {
            h[e.class.index()] += 1;
        }
        h
    }
}
