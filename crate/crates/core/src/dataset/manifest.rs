//! Tab-separated dataset manifests.
//!
//! ```text
//! # fluxsteg-manifest v1
//! # name=<name>
//! # role=train|val|test
//! # image_size=<H>x<W>
//! <cover>\t<fluct1,fluct2,..>\t<prompt>\t<seed>\t<cfg0,cfg1,..>\t<tau>
//! ```
//!
//! Paths are relative to the manifest's directory. Tabs, newlines and
//! backslashes in prompts are backslash-escaped.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{build_fluctuation_set, DatasetError, FluctuationSet, T2IBackend};
use crate::image::{self, ImageGray};

const MAGIC: &str = "# fluxsteg-manifest v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Val,
    Test,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
        })
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Role::Train),
            "val" => Ok(Role::Val),
            "test" => Ok(Role::Test),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub cover: PathBuf,
    pub fluctuations: Vec<PathBuf>,
    pub prompt: String,
    pub seed: u64,
    pub cfg_values: Vec<f64>,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub role: Role,
    pub image_size: (usize, usize),
    /// Directory the entry paths are relative to.
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some(o) => out.push(o),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl DatasetManifest {
    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{MAGIC}\n# name={}\n# role={}\n# image_size={}x{}\n",
            escape(&self.name),
            self.role,
            self.image_size.0,
            self.image_size.1
        );
        let path_str = |p: &PathBuf| p.to_string_lossy().replace('\\', "/");
        for e in &self.entries {
            let flus: Vec<String> = e.fluctuations.iter().map(path_str).collect();
            let cfgs: Vec<String> = e.cfg_values.iter().map(|c| format!("{c:.4}")).collect();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                path_str(&e.cover),
                flus.join(","),
                escape(&e.prompt),
                e.seed,
                cfgs.join(","),
                e.tau
            ));
        }
        out
    }

    pub fn parse(text: &str, base_dir: &Path, origin: &str) -> Result<Self, DatasetError> {
        let err = |line: usize, message: String| DatasetError::Manifest {
            path: origin.to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim_end() == MAGIC => {}
            _ => return Err(err(1, "missing manifest header".into())),
        }
        let (mut name, mut role, mut size) = (None, None, None);
        let mut entries = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix("# ") {
                let (key, value) = meta
                    .split_once('=')
                    .ok_or_else(|| err(lineno, format!("malformed metadata {meta:?}")))?;
                match key {
                    "name" => name = Some(unescape(value)),
                    "role" => role = Some(value.parse::<Role>().map_err(|m| err(lineno, m))?),
                    "image_size" => {
                        let (h, w) = value
                            .split_once('x')
                            .ok_or_else(|| err(lineno, format!("bad image_size {value:?}")))?;
                        let parse = |s: &str| {
                            s.parse::<usize>()
                                .map_err(|e| err(lineno, format!("bad image_size {value:?}: {e}")))
                        };
                        size = Some((parse(h)?, parse(w)?));
                    }
                    _ => log::debug!("ignoring manifest key {key}"),
                }
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                return Err(err(lineno, format!("expected 6 tab-separated fields, found {}", fields.len())));
            }
            let fluctuations = if fields[1].is_empty() {
                Vec::new()
            } else {
                fields[1].split(',').map(PathBuf::from).collect()
            };
            let seed = fields[3]
                .parse()
                .map_err(|e| err(lineno, format!("bad seed {:?}: {e}", fields[3])))?;
            let cfg_values = fields[4]
                .split(',')
                .map(|c| c.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| err(lineno, format!("bad cfg list {:?}: {e}", fields[4])))?;
            let tau = fields[5]
                .parse()
                .map_err(|e| err(lineno, format!("bad tau {:?}: {e}", fields[5])))?;
            if cfg_values.len() != fluctuations.len() + 1 {
                return Err(err(lineno, "cfg list must have one value more than the fluctuation list".into()));
            }
            entries.push(ManifestEntry {
                cover: PathBuf::from(fields[0]),
                fluctuations,
                prompt: unescape(fields[2]),
                seed,
                cfg_values,
                tau,
            });
        }
        Ok(Self {
            name: name.ok_or_else(|| err(0, "missing name".into()))?,
            role: role.ok_or_else(|| err(0, "missing role".into()))?,
            image_size: size.ok_or_else(|| err(0, "missing image_size".into()))?,
            base_dir: base_dir.to_path_buf(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, &base, &path.display().to_string())
    }

    /// Write to `path`; entry paths are kept relative, so the manifest must
    /// sit in `base_dir`.
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        for e in &self.entries {
            for p in std::iter::once(&e.cover).chain(&e.fluctuations) {
                let s = p.to_string_lossy();
                if s.contains(',') || s.contains('\t') || s.contains('\n') {
                    return Err(DatasetError::Config(format!("path {s:?} contains a separator")));
                }
            }
        }
        fluxsteg_nn::archive::write_atomic(path, self.to_text().as_bytes()).map_err(io_err(path))
    }

    pub fn load_set(&self, index: usize) -> Result<FluctuationSet, DatasetError> {
        let e = &self.entries[index];
        let cover = image::load_image(&self.resolve(&e.cover))?;
        let fluctuations = e
            .fluctuations
            .iter()
            .map(|p| image::load_image(&self.resolve(p)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FluctuationSet {
            cover,
            fluctuations,
            cfg_values: e.cfg_values.clone(),
            prompt: e.prompt.clone(),
            seed: e.seed,
            tau: e.tau,
            rejected_cfgs: Vec::new(),
        })
    }

    pub fn load_sets(&self) -> Result<Vec<FluctuationSet>, DatasetError> {
        (0..self.entries.len()).map(|i| self.load_set(i)).collect()
    }

    pub fn load_covers(&self) -> Result<Vec<ImageGray>, DatasetError> {
        self.entries
            .iter()
            .map(|e| Ok(image::load_image(&self.resolve(&e.cover))?))
            .collect()
    }

    /// Every referenced file exists, parses, and has the declared size.
    pub fn validate(&self) -> Result<(), DatasetError> {
        for (i, e) in self.entries.iter().enumerate() {
            for p in std::iter::once(&e.cover).chain(&e.fluctuations) {
                let img = image::load_image(&self.resolve(p))?;
                if img.shape() != self.image_size {
                    return Err(DatasetError::Manifest {
                        path: self.name.clone(),
                        line: i,
                        message: format!(
                            "{} is {:?}, manifest declares {:?}",
                            p.display(),
                            img.shape(),
                            self.image_size
                        ),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Disjoint, reproducible train/val/test partition.
pub fn split_manifest(
    manifest: &DatasetManifest,
    sizes: (usize, usize, usize),
    rng_seed: u64,
) -> Result<[DatasetManifest; 3], DatasetError> {
    let (a, b, c) = sizes;
    if a + b + c > manifest.entries.len() {
        return Err(DatasetError::Size {
            requested: sizes,
            available: manifest.entries.len(),
        });
    }
    let mut idx: Vec<usize> = (0..manifest.entries.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));
    let part = |range: std::ops::Range<usize>, role: Role, suffix: &str| DatasetManifest {
        name: format!("{}-{suffix}", manifest.name),
        role,
        image_size: manifest.image_size,
        base_dir: manifest.base_dir.clone(),
        entries: idx[range].iter().map(|&i| manifest.entries[i].clone()).collect(),
    };
    Ok([
        part(0..a, Role::Train, "train"),
        part(a..a + b, Role::Val, "val"),
        part(a + b..a + b + c, Role::Test, "test"),
    ])
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub name: String,
    pub base_cfg: f64,
    pub sweep: Vec<f64>,
    pub tau: f64,
    pub max_retries: usize,
    /// Upper bound on concurrent backend requests.
    pub max_in_flight: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            name: "dataset".into(),
            base_cfg: super::DEFAULT_BASE_CFG,
            sweep: super::default_sweep(),
            tau: super::DEFAULT_TAU,
            max_retries: 20,
            max_in_flight: 1,
        }
    }
}

/// Build one fluctuation set per `(prompt, seed)`, write every image under
/// `out_dir/images/`, and return the manifest (not yet saved) plus the
/// number of rejected candidates.
pub fn build_dataset(
    backend: &dyn T2IBackend,
    jobs: &[(String, u64)],
    out_dir: &Path,
    opts: &BuildOptions,
) -> Result<(DatasetManifest, usize), DatasetError> {
    if jobs.is_empty() {
        return Err(DatasetError::Config("no (prompt, seed) pairs".into()));
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<FluctuationSet, DatasetError>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let workers = opts.max_in_flight.clamp(1, jobs.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let (prompt, seed) = &jobs[i];
                let r = build_fluctuation_set(
                    backend,
                    prompt,
                    *seed,
                    opts.base_cfg,
                    &opts.sweep,
                    opts.tau,
                    opts.max_retries,
                );
                results.lock().expect("no poisoned lock")[i] = Some(r);
            });
        }
    });
    let sets = results
        .into_inner()
        .expect("no poisoned lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<Vec<_>, _>>()?;

    let mut entries = Vec::with_capacity(sets.len());
    let mut rejected = 0;
    let size = sets[0].cover.shape();
    for (i, set) in sets.iter().enumerate() {
        if set.cover.shape() != size {
            return Err(DatasetError::Shape {
                a: size,
                b: set.cover.shape(),
            });
        }
        rejected += set.rejected_cfgs.len();
        let rel = PathBuf::from("images").join(format!("{i:06}"));
        let dir = out_dir.join(&rel);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let cover = rel.join("cover.pgm");
        image::save_image(&set.cover, &out_dir.join(&cover))?;
        let mut fluctuations = Vec::with_capacity(set.n());
        for (k, f) in set.fluctuations.iter().enumerate() {
            let p = rel.join(format!("flu_{k:02}.pgm"));
            image::save_image(f, &out_dir.join(&p))?;
            fluctuations.push(p);
        }
        entries.push(ManifestEntry {
            cover,
            fluctuations,
            prompt: set.prompt.clone(),
            seed: set.seed,
            cfg_values: set.cfg_values.clone(),
            tau: set.tau,
        });
    }
    Ok((
        DatasetManifest {
            name: opts.name.clone(),
            role: Role::Train,
            image_size: size,
            base_dir: out_dir.to_path_buf(),
            entries,
        },
        rejected,
    ))
}
