//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored; every key is
//! optional and unknown keys are rejected. Relative paths resolve against
//! the directory holding the config file.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `seed` | `0` | root seed; every stage derives a named sub-seed |
//! | `output` | `out` | directory receiving one sub-directory per stage |
//! | `manifest` | *(empty)* | slide manifest; empty means `<output>/synth/manifest.csv` |
//! | `synth_samples` | `50` | synthetic images per fine class |
//! | `synth_width`, `synth_height` | `64` | synthetic image size |
//! | `synth_noise` | `0.2` | texture noise std |
//! | `synth_blank_margin` | `0.5` | blank fraction on the right of each image |
//! | `synth_base_amplitude` | `0.08` | family stripe amplitude |
//! | `synth_fine_amplitude` | `0.2` | class grating amplitude |
//! | `synth_pattern_scale` | `32` | stripe scale in pixels |
//! | `synth_patient_max` | `3` | most images per synthetic patient |
//! | `window` | `32` | sliding-window size |
//! | `stride` | *(empty)* | default stride; empty means `window` |
//! | `class_strides` | *(empty)* | per-class strides, `Celiac:16,EE:8` |
//! | `patch_budget` | `0` | when positive, halve a class's stride until it yields this many patches |
//! | `patch_size` | `32` | side of the resized patch |
//! | `split_ratios` | `0.5,0.2,0.3` | train, development, test |
//! | `filter` | `true` | run the autoencoder + k-means background filter |
//! | `cae_filters` | `16,32,64` | encoder widths |
//! | `cae_embedding` | `64` | embedding size |
//! | `cae_epochs` | `5` | |
//! | `cae_batch` | `16` | |
//! | `cae_lr` | `1:1e-3` | learning-rate schedule |
//! | `cae_holdout` | `0.1` | held-out fraction for monitoring |
//! | `stain_lambda` | `0.1` | sparsity weight |
//! | `stain_beta` | `0.15` | background OD threshold |
//! | `stain_iterations` | `200` | |
//! | `stain_min_tissue` | `1000` | tissue pixels needed for a fit |
//! | `stain_max_pixels` | `20000` | subsample size |
//! | `reference_patch` | *(empty)* | target image; empty means the first kept training patch |
//! | `samples` | `3` | before/after triplets to emit |
//! | `preset` | `desk` | `desk` or `full` |
//! | `branch_attach`, `branch_widths`, `head_widths`, `dropout` | *(preset)* | model overrides |
//! | `epochs` | `20` | |
//! | `runs` | `10` | |
//! | `batch_size` | `32` | |
//! | `lr` | `1:1e-3,11:5e-4,16:1e-4` | learning-rate schedule |
//! | `loss_weights` | `1:0.98/0.02,5:0.3/0.7,10:0.1/0.9,15:0/1` | coarse/fine weights by epoch |
//! | `coarse_classes` | `Duodenum,Esophagus,Ileum` | |
//! | `fine_classes` | `Celiac:Duodenum,...` | `name:parent` pairs |
//! | `ci` | `normal` | `normal` or `t` |

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::dataset::SyntheticSpec;
use crate::error::{Error, Result};
use crate::metrics::CiMethod;
use crate::model::{ClassHierarchy, ModelSpec, Preset};
use crate::preprocess::{CaeConfig, StainParams};
use crate::training::{LossWeightSchedule, LrSchedule, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub manifest: Option<PathBuf>,
    pub synth_samples: usize,
    pub synth_width: u32,
    pub synth_height: u32,
    pub synth_noise: f64,
    pub synth_blank_margin: f64,
    pub synth_base_amplitude: f64,
    pub synth_fine_amplitude: f64,
    pub synth_pattern_scale: f64,
    pub synth_patient_max: usize,
    pub window: u32,
    pub stride: Option<u32>,
    pub class_strides: BTreeMap<String, u32>,
    pub patch_budget: usize,
    pub patch_size: u32,
    pub split_ratios: [f64; 3],
    pub filter: bool,
    pub cae_filters: [usize; 3],
    pub cae_embedding: usize,
    pub cae_epochs: usize,
    pub cae_batch: usize,
    pub cae_lr: LrSchedule,
    pub cae_holdout: f64,
    pub stain: StainParams,
    pub reference_patch: Option<PathBuf>,
    pub samples: usize,
    pub preset: Preset,
    pub branch_attach: Option<usize>,
    pub branch_widths: Option<Vec<usize>>,
    pub head_widths: Option<Vec<usize>>,
    pub dropout: Option<f64>,
    pub epochs: usize,
    pub runs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub loss_weights: LossWeightSchedule,
    pub hierarchy: ClassHierarchy,
    pub ci: CiMethod,
    /// Directory relative paths resolve against; not part of the hash.
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let cae = CaeConfig::default();
        let synth = SyntheticSpec::default();
        RunConfig {
            seed: 0,
            output: PathBuf::from("out"),
            manifest: None,
            synth_samples: synth.samples_per_class,
            synth_width: 64,
            synth_height: 64,
            synth_noise: synth.noise,
            synth_blank_margin: 0.5,
            synth_base_amplitude: synth.base_amplitude,
            synth_fine_amplitude: synth.fine_amplitude,
            synth_pattern_scale: synth.pattern_scale,
            synth_patient_max: synth.max_images_per_patient,
            window: 32,
            stride: None,
            class_strides: BTreeMap::new(),
            patch_budget: 0,
            patch_size: 32,
            split_ratios: crate::dataset::DEFAULT_RATIOS,
            filter: true,
            cae_filters: cae.filters,
            cae_embedding: cae.embedding_dim,
            cae_epochs: cae.epochs,
            cae_batch: cae.batch_size,
            cae_lr: cae.lr,
            cae_holdout: cae.holdout,
            stain: StainParams::default(),
            reference_patch: None,
            samples: 3,
            preset: Preset::Desk,
            branch_attach: None,
            branch_widths: None,
            head_widths: None,
            dropout: None,
            epochs: train.epochs,
            runs: train.runs,
            batch_size: train.batch_size,
            lr: train.lr,
            loss_weights: train.loss_weights,
            hierarchy: ClassHierarchy::default(),
            ci: CiMethod::Normal,
            base_dir: PathBuf::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

fn optional<T>(v: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<Option<T>> {
    if v.is_empty() { Ok(None) } else { f(v).map(Some) }
}

fn pairs<'a>(key: &'a str, v: &'a str) -> impl Iterator<Item = Result<(&'a str, &'a str)>> + 'a {
    v.split(',').filter(|p| !p.trim().is_empty()).map(move |p| {
        p.trim()
            .rsplit_once(':')
            .map(|(a, b)| (a.trim(), b.trim()))
            .ok_or_else(|| Error::Config(format!("{key}: expected name:value, got {p:?}")))
    })
}

fn parse_lr(key: &str, v: &str) -> Result<LrSchedule> {
    let anchors = pairs(key, v)
        .map(|p| p.and_then(|(e, r)| Ok((parse(key, e)?, parse(key, r)?))))
        .collect::<Result<Vec<_>>>()?;
    LrSchedule::new(anchors)
}

fn parse_weights(key: &str, v: &str) -> Result<LossWeightSchedule> {
    let anchors = pairs(key, v)
        .map(|p| {
            p.and_then(|(e, w)| {
                let ws = w.split('/').map(|x| parse(key, x.trim())).collect::<Result<Vec<f64>>>()?;
                Ok((parse(key, e)?, ws))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LossWeightSchedule::new(anchors)
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

fn path_opt(v: &Option<PathBuf>) -> String {
    v.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "output" => self.output = PathBuf::from(v),
            "manifest" => self.manifest = optional(v, |s| Ok(PathBuf::from(s)))?,
            "synth_samples" => self.synth_samples = parse(key, v)?,
            "synth_width" => self.synth_width = parse(key, v)?,
            "synth_height" => self.synth_height = parse(key, v)?,
            "synth_noise" => self.synth_noise = parse(key, v)?,
            "synth_blank_margin" => self.synth_blank_margin = parse(key, v)?,
            "synth_base_amplitude" => self.synth_base_amplitude = parse(key, v)?,
            "synth_fine_amplitude" => self.synth_fine_amplitude = parse(key, v)?,
            "synth_pattern_scale" => self.synth_pattern_scale = parse(key, v)?,
            "synth_patient_max" => self.synth_patient_max = parse(key, v)?,
            "window" => self.window = parse(key, v)?,
            "stride" => self.stride = optional(v, |s| parse(key, s))?,
            "class_strides" => {
                self.class_strides = pairs(key, v)
                    .map(|p| p.and_then(|(c, s)| Ok((c.to_string(), parse(key, s)?))))
                    .collect::<Result<_>>()?
            }
            "patch_budget" => self.patch_budget = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "split_ratios" => {
                self.split_ratios = list::<f64>(key, v)?
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: expected three ratios, got {v:?}")))?
            }
            "filter" => self.filter = parse(key, v)?,
            "cae_filters" => {
                self.cae_filters = list::<usize>(key, v)?
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: expected three widths, got {v:?}")))?
            }
            "cae_embedding" => self.cae_embedding = parse(key, v)?,
            "cae_epochs" => self.cae_epochs = parse(key, v)?,
            "cae_batch" => self.cae_batch = parse(key, v)?,
            "cae_lr" => self.cae_lr = parse_lr(key, v)?,
            "cae_holdout" => self.cae_holdout = parse(key, v)?,
            "stain_lambda" => self.stain.lambda = parse(key, v)?,
            "stain_beta" => self.stain.beta = parse(key, v)?,
            "stain_iterations" => self.stain.iterations = parse(key, v)?,
            "stain_min_tissue" => self.stain.min_tissue = parse(key, v)?,
            "stain_max_pixels" => self.stain.max_pixels = parse(key, v)?,
            "reference_patch" => self.reference_patch = optional(v, |s| Ok(PathBuf::from(s)))?,
            "samples" => self.samples = parse(key, v)?,
            "preset" => self.preset = parse(key, v)?,
            "branch_attach" => self.branch_attach = optional(v, |s| parse(key, s))?,
            "branch_widths" => self.branch_widths = optional(v, |s| list(key, s))?,
            "head_widths" => self.head_widths = optional(v, |s| list(key, s))?,
            "dropout" => self.dropout = optional(v, |s| parse(key, s))?,
            "epochs" => self.epochs = parse(key, v)?,
            "runs" => self.runs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse_lr(key, v)?,
            "loss_weights" => self.loss_weights = parse_weights(key, v)?,
            "coarse_classes" => {
                self.hierarchy.coarse_names = v.split(',').map(|s| s.trim().to_string()).collect()
            }
            "ci" => self.ci = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }
}

fn fine_classes(v: &str, coarse: &[String]) -> Result<(Vec<String>, Vec<usize>)> {
    let mut names = Vec::new();
    let mut parents = Vec::new();
    for p in pairs("fine_classes", v) {
        let (f, c) = p?;
        names.push(f.to_string());
        parents.push(
            coarse
                .iter()
                .position(|n| n == c)
                .ok_or_else(|| Error::Config(format!("fine_classes: unknown coarse class '{c}'")))?,
        );
    }
    Ok((names, parents))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        let mut fine = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |e: Error| match e {
                Error::Config(m) => Error::Config(format!("config line {}: {m}", i + 1)),
                other => other,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(Error::Config(format!("expected key = value, got {line:?}"))))?;
            let (k, v) = (k.trim(), v.trim());
            if let Some(first) = seen.insert(k.to_string(), i + 1) {
                return Err(at(Error::Config(format!("'{k}' already set on line {first}"))));
            }
            // Parents are resolved once coarse_classes, wherever it sits, is known.
            if k == "fine_classes" {
                fine = Some((i, v.to_string()));
            } else {
                cfg.set(k, v).map_err(at)?;
            }
        }
        match fine {
            Some((i, v)) => {
                let (names, parents) = fine_classes(&v, &cfg.hierarchy.coarse_names)
                    .map_err(|e| Error::Config(format!("config line {}: {e}", i + 1)))?;
                cfg.hierarchy.fine_names = names;
                cfg.hierarchy.parent = parents;
            }
            None if seen.contains_key("coarse_classes") => {
                return Err(Error::Config("coarse_classes requires fine_classes".into()));
            }
            None => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.base_dir = base.to_path_buf();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.hierarchy.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.synthetic_spec().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.window == 0 || self.patch_size == 0 || self.stride == Some(0) || self.class_strides.values().any(|&s| s == 0) {
            return Err(Error::Config("window, patch_size and strides must be positive".into()));
        }
        if let Some(c) = self.class_strides.keys().find(|c| self.hierarchy.fine_index(c).is_none()) {
            return Err(Error::Config(format!("class_strides: unknown fine class '{c}'")));
        }
        let total: f64 = self.split_ratios.iter().sum();
        if self.split_ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split_ratios {:?} must be fractions summing to 1", self.split_ratios)));
        }
        if !self.patch_size.is_multiple_of(8) {
            return Err(Error::Config(format!("patch_size {} must be a multiple of 8", self.patch_size)));
        }
        let spec = self.model_spec()?;
        if spec.input_shape != [1, self.patch_size as usize, self.patch_size as usize] {
            return Err(Error::Config(format!(
                "patch_size {} does not match the {:?} preset input {:?}",
                self.patch_size, self.preset, spec.input_shape
            )));
        }
        self.train_config().validate()?;
        if self.loss_weights.levels() != 2 {
            return Err(Error::Config("loss_weights needs coarse/fine pairs".into()));
        }
        if !(0.0..1.0).contains(&self.cae_holdout) || self.cae_batch < 2 || self.cae_epochs == 0 {
            return Err(Error::Config("cae_holdout must lie in [0, 1), cae_batch >= 2, cae_epochs >= 1".into()));
        }
        Ok(())
    }

    /// Canonical rendering of every key; the config hash is taken over it.
    pub fn to_text(&self) -> String {
        let h = &self.hierarchy;
        let strides: Vec<String> = self.class_strides.iter().map(|(c, s)| format!("{c}:{s}")).collect();
        let lr = |s: &LrSchedule| s.anchors().iter().map(|(e, r)| format!("{e}:{r:e}")).collect::<Vec<_>>().join(",");
        let weights = self
            .loss_weights
            .anchors()
            .iter()
            .map(|(e, w)| format!("{e}:{}", w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("/")))
            .collect::<Vec<_>>()
            .join(",");
        let fine: Vec<String> = (0..h.num_fine()).map(|f| format!("{}:{}", h.fine_names[f], h.coarse_names[h.parent[f]])).collect();
        let preset = match self.preset {
            Preset::Desk => "desk",
            Preset::Full => "full",
        };
        let ci = match self.ci {
            CiMethod::Normal => "normal",
            CiMethod::StudentT => "t",
        };
        let entries: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("output", self.output.display().to_string()),
            ("manifest", path_opt(&self.manifest)),
            ("synth_samples", self.synth_samples.to_string()),
            ("synth_width", self.synth_width.to_string()),
            ("synth_height", self.synth_height.to_string()),
            ("synth_noise", self.synth_noise.to_string()),
            ("synth_blank_margin", self.synth_blank_margin.to_string()),
            ("synth_base_amplitude", self.synth_base_amplitude.to_string()),
            ("synth_fine_amplitude", self.synth_fine_amplitude.to_string()),
            ("synth_pattern_scale", self.synth_pattern_scale.to_string()),
            ("synth_patient_max", self.synth_patient_max.to_string()),
            ("window", self.window.to_string()),
            ("stride", opt(&self.stride)),
            ("class_strides", strides.join(",")),
            ("patch_budget", self.patch_budget.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("split_ratios", join(&self.split_ratios)),
            ("filter", self.filter.to_string()),
            ("cae_filters", join(&self.cae_filters)),
            ("cae_embedding", self.cae_embedding.to_string()),
            ("cae_epochs", self.cae_epochs.to_string()),
            ("cae_batch", self.cae_batch.to_string()),
            ("cae_lr", lr(&self.cae_lr)),
            ("cae_holdout", self.cae_holdout.to_string()),
            ("stain_lambda", self.stain.lambda.to_string()),
            ("stain_beta", self.stain.beta.to_string()),
            ("stain_iterations", self.stain.iterations.to_string()),
            ("stain_min_tissue", self.stain.min_tissue.to_string()),
            ("stain_max_pixels", self.stain.max_pixels.to_string()),
            ("reference_patch", path_opt(&self.reference_patch)),
            ("samples", self.samples.to_string()),
            ("preset", preset.to_string()),
            ("branch_attach", opt(&self.branch_attach)),
            ("branch_widths", self.branch_widths.as_deref().map(join).unwrap_or_default()),
            ("head_widths", self.head_widths.as_deref().map(join).unwrap_or_default()),
            ("dropout", opt(&self.dropout)),
            ("epochs", self.epochs.to_string()),
            ("runs", self.runs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", lr(&self.lr)),
            ("loss_weights", weights),
            ("coarse_classes", h.coarse_names.join(",")),
            ("fine_classes", fine.join(",")),
            ("ci", ci.to_string()),
        ];
        entries.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of [`RunConfig::to_text`].
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.to_text().as_bytes())[..8])
    }

    /// Named sub-seed of the root seed.
    pub fn sub_seed(&self, name: &str) -> u64 {
        let digest = Sha256::digest(format!("{}:{name}", self.seed).as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() { p.to_path_buf() } else { self.base_dir.join(p) }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output)
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.output_dir().join(stage)
    }

    pub fn manifest_path(&self) -> PathBuf {
        match &self.manifest {
            Some(m) => self.resolve(m),
            None => self.stage_dir("synth").join("manifest.csv"),
        }
    }

    pub fn reference_path(&self) -> Option<PathBuf> {
        self.reference_patch.as_deref().map(|p| self.resolve(p))
    }

    pub fn stride_for(&self, fine: &str) -> u32 {
        self.class_strides.get(fine).copied().or(self.stride).unwrap_or(self.window)
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            hierarchy: self.hierarchy.clone(),
            width: self.synth_width,
            height: self.synth_height,
            samples_per_class: self.synth_samples,
            noise: self.synth_noise,
            blank_margin: self.synth_blank_margin,
            pattern_scale: self.synth_pattern_scale,
            base_amplitude: self.synth_base_amplitude,
            fine_amplitude: self.synth_fine_amplitude,
            max_images_per_patient: self.synth_patient_max,
            seed: self.sub_seed("synth"),
        }
    }

    pub fn cae_config(&self) -> CaeConfig {
        CaeConfig {
            filters: self.cae_filters,
            embedding_dim: self.cae_embedding,
            epochs: self.cae_epochs,
            batch_size: self.cae_batch,
            lr: self.cae_lr.clone(),
            holdout: self.cae_holdout,
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let mut spec = ModelSpec::preset(self.preset);
        spec.hierarchy = self.hierarchy.clone();
        if let Some(a) = self.branch_attach {
            spec.branch_attach = a;
        }
        if let Some(w) = &self.branch_widths {
            spec.branch_widths = w.clone();
        }
        if let Some(w) = &self.head_widths {
            spec.head_widths = w.clone();
        }
        if let Some(d) = self.dropout {
            spec.dropout = d;
        }
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }

    /// Both model families share the run seeds, so run `i` of each is paired.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            runs: self.runs,
            batch_size: self.batch_size,
            seed: self.sub_seed("runs"),
            loss_weights: self.loss_weights.clone(),
            lr: self.lr.clone(),
        }
    }
}
