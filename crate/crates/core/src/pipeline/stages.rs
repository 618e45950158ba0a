use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::records::{count_table, read_csv, read_json, write_csv, write_csv_text, write_json, CountRow, PatchRow};
use crate::dataset::{generate_synthetic, split_by_patient, ImageSet, Manifest, Split, SplitAssignment};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_bundle, summarize, MetricsReport, PredictionBundle};
use crate::model::{load_checkpoint, save_checkpoint, Architecture, ClassHierarchy, Meta};
use crate::preprocess::{
    extract_patches, filter_patches, fit_stain_model, image_od, mean_intensity, normalize_stain, patch_count,
    resize_patch, rgb_batch, to_grayscale, train_cae, CaeReport, StainModel,
};
use crate::scalar::{Real, Scalar};
use crate::training::{predict_set, run_one, EpochLog, Splits};

pub const FAMILIES: [Architecture; 2] = [Architecture::Flat, Architecture::Hierarchical];

/// Short name used for directories and file names.
pub fn family_key(arch: Architecture) -> &'static str {
    match arch {
        Architecture::Flat => "flat",
        Architecture::Hierarchical => "hier",
    }
}

pub fn family_label(arch: Architecture) -> &'static str {
    match arch {
        Architecture::Flat => "VGGNet",
        Architecture::Hierarchical => "H-VGGNet",
    }
}

fn rng(cfg: &RunConfig, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.sub_seed(name))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Empties a directory this pipeline owns so stale files from an earlier
/// run cannot be picked up.
fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    create_dir(dir)
}

fn load_rgb(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn load_gray(path: &Path) -> Result<GrayImage> {
    image::open(path)
        .map(|i| i.to_luma8())
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn save<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn read_index(cfg: &RunConfig, stage: &str) -> Result<(String, Vec<PatchRow>)> {
    let path = cfg.stage_dir(stage).join("index.csv");
    if !path.exists() {
        return Err(Error::Data(format!("{} not found; run the {stage} stage first", path.display())));
    }
    let (hash, rows) = read_csv::<PatchRow>(&path)?;
    let hash = hash.ok_or_else(|| Error::Data(format!("{} has no config hash line", path.display())))?;
    Ok((hash, rows))
}

/// Every patient must sit in exactly one split.
pub fn audit_leakage(rows: &[PatchRow]) -> Result<()> {
    let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
    for r in rows {
        if let Some(prev) = seen.insert(&r.patient_id, r.split) {
            if prev != r.split {
                return Err(Error::Data(format!(
                    "patient {} appears in both {} and {}",
                    r.patient_id,
                    prev.name(),
                    r.split.name()
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthSummary {
    pub config_hash: String,
    pub manifest: PathBuf,
    pub images: usize,
    pub per_class: BTreeMap<String, usize>,
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthSummary> {
    let spec = cfg.synthetic_spec();
    let corpus = generate_synthetic(&spec)?;
    let dir = cfg.stage_dir("synth");
    fresh_dir(&dir)?;
    let manifest = corpus.write(&dir)?;
    let mut per_class = BTreeMap::new();
    for r in corpus.manifest.rows() {
        *per_class.entry(r.fine_label.clone()).or_insert(0) += 1;
    }
    let summary = SynthSummary {
        config_hash: cfg.hash(),
        manifest,
        images: corpus.images.len(),
        per_class,
    };
    write_json(&dir.join("synth.json"), &summary)?;
    Ok(summary)
}

/// Stride per fine class: explicit entries win; otherwise the default
/// stride, halved while the class yields fewer than `patch_budget` patches.
fn class_strides(cfg: &RunConfig, manifest: &Manifest, base: &Path) -> Result<Vec<u32>> {
    let h = &cfg.hierarchy;
    let mut sizes: Vec<Vec<(u32, u32)>> = vec![Vec::new(); h.num_fine()];
    if cfg.patch_budget > 0 {
        for (i, r) in manifest.rows().iter().enumerate() {
            if let Ok(dims) = image::image_dimensions(base.join(&r.image_path)) {
                sizes[manifest.fine_of(i)].push(dims);
            }
        }
    }
    (0..h.num_fine())
        .map(|f| {
            let name = &h.fine_names[f];
            let mut stride = cfg.stride_for(name);
            if cfg.patch_budget == 0 || cfg.class_strides.contains_key(name) {
                return Ok(stride);
            }
            let total = |s: u32| -> usize {
                sizes[f]
                    .iter()
                    .filter_map(|&(w, hh)| patch_count(w, hh, cfg.window, s).ok())
                    .sum()
            };
            while stride > 1 && total(stride) < cfg.patch_budget {
                stride /= 2;
            }
            Ok(stride)
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatchSummary {
    pub config_hash: String,
    pub patches: usize,
    pub wsis: usize,
    pub skipped: Vec<String>,
    pub strides: BTreeMap<String, u32>,
    pub table: Vec<CountRow>,
}

pub fn cmd_patch(cfg: &RunConfig) -> Result<PatchSummary> {
    let h = &cfg.hierarchy;
    let hash = cfg.hash();
    let manifest_path = cfg.manifest_path();
    let manifest = Manifest::load(&manifest_path, h)?;
    let base = manifest_path.parent().unwrap_or(Path::new("")).to_path_buf();
    let split = split_by_patient(&manifest, cfg.split_ratios, &mut rng(cfg, "split"))?;
    let splits = split.row_splits(&manifest)?;
    let strides = class_strides(cfg, &manifest, &base)?;

    let dir = cfg.stage_dir("patches");
    fresh_dir(&dir.join("images"))?;
    let out = cfg.output_dir();
    let results: Vec<Result<Vec<PatchRow>>> = manifest
        .rows()
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let img = load_rgb(&base.join(&r.image_path))?;
            let stride = strides[manifest.fine_of(i)];
            extract_patches(&img, cfg.window, stride)?
                .into_iter()
                .map(|p| {
                    let patch_id = format!("{}_{}_{}", r.wsi_id, p.x, p.y);
                    let rel = format!("patches/images/{patch_id}.png");
                    save(&resize_patch(&p.pixels, cfg.patch_size)?, &out.join(&rel))?;
                    Ok(PatchRow {
                        patch_id,
                        wsi_id: r.wsi_id.clone(),
                        patient_id: r.patient_id.clone(),
                        coarse_label: r.coarse_label.clone(),
                        fine_label: r.fine_label.clone(),
                        split: splits[i],
                        x: p.x,
                        y: p.y,
                        path: rel,
                        kept: true,
                    })
                })
                .collect()
        })
        .collect();

    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (r, res) in manifest.rows().iter().zip(results) {
        match res {
            Ok(mut patches) => rows.append(&mut patches),
            Err(e) => {
                log::warn!("skipping {}: {e}", r.wsi_id);
                skipped.push(r.wsi_id.clone());
            }
        }
    }
    if skipped.len() == manifest.len() {
        return Err(Error::Data(format!("no slide in {} could be patched", manifest_path.display())));
    }
    audit_leakage(&rows)?;
    let table = count_table(&rows, h);
    write_csv(&dir.join("index.csv"), &hash, &rows)?;
    let mut split_csv = Vec::new();
    split.write(&mut split_csv)?;
    write_csv_text(&dir.join("split.csv"), &hash, &String::from_utf8_lossy(&split_csv))?;
    write_csv(&dir.join("counts.csv"), &hash, &table)?;
    let summary = PatchSummary {
        config_hash: hash,
        patches: rows.len(),
        wsis: manifest.len() - skipped.len(),
        skipped,
        strides: h.fine_names.iter().cloned().zip(strides).collect(),
        table,
    };
    write_json(&dir.join("counts.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterCount {
    pub coarse: String,
    pub fine: String,
    pub total: usize,
    pub kept: usize,
    pub dropped: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FilterSummary {
    pub config_hash: String,
    pub enabled: bool,
    pub counts: Vec<FilterCount>,
    /// Distribution of the kept patches.
    pub table: Vec<CountRow>,
    pub cae: Option<CaeReport>,
}

pub fn cmd_filter(cfg: &RunConfig) -> Result<FilterSummary> {
    let h = &cfg.hierarchy;
    let hash = cfg.hash();
    let (_, mut rows) = read_index(cfg, "patches")?;
    if rows.len() < 2 {
        return Err(Error::Data(format!("filtering needs at least 2 patches, found {}", rows.len())));
    }
    let out = cfg.output_dir();
    let mut cae = None;
    if cfg.filter {
        let images = rows
            .par_iter()
            .map(|r| load_rgb(&out.join(&r.path)))
            .collect::<Result<Vec<_>>>()?;
        let batch = rgb_batch::<Real>(&images)?;
        let (model, report) = train_cae(&batch, &cfg.cae_config(), &mut rng(cfg, "cae"))?;
        let embeddings = model.embed(&batch)?;
        let brightness: Vec<f64> = images.iter().map(mean_intensity).collect();
        let assignment = filter_patches(&embeddings, &brightness, &mut rng(cfg, "kmeans"))?;
        for (r, k) in rows.iter_mut().zip(assignment.kept) {
            r.kept = k;
        }
        cae = Some(report);
    } else {
        rows.iter_mut().for_each(|r| r.kept = true);
    }
    let counts = (0..h.num_fine())
        .map(|f| {
            let of: Vec<&PatchRow> = rows.iter().filter(|r| r.fine_label == h.fine_names[f]).collect();
            let kept = of.iter().filter(|r| r.kept).count();
            FilterCount {
                coarse: h.coarse_names[h.parent_of(f)].clone(),
                fine: h.fine_names[f].clone(),
                total: of.len(),
                kept,
                dropped: of.len() - kept,
            }
        })
        .collect::<Vec<_>>();
    let kept: Vec<PatchRow> = rows.iter().filter(|r| r.kept).cloned().collect();
    let dir = cfg.stage_dir("filter");
    fresh_dir(&dir)?;
    write_csv(&dir.join("index.csv"), &hash, &rows)?;
    write_csv(&dir.join("counts.csv"), &hash, &counts)?;
    let summary = FilterSummary {
        config_hash: hash,
        enabled: cfg.filter,
        counts,
        table: count_table(&kept, h),
        cae,
    };
    write_json(&dir.join("filter.json"), &summary)?;
    Ok(summary)
}

fn tissue_pixels(img: &RgbImage, beta: f64) -> usize {
    image_od(img)
        .iter()
        .filter(|v| v.iter().copied().fold(f64::NEG_INFINITY, f64::max) > beta)
        .count()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormalizeSummary {
    pub config_hash: String,
    pub reference: String,
    pub target: StainModel,
    /// Per-slide source model; `None` when the slide had too little tissue
    /// and its patches were only converted to grayscale.
    pub sources: BTreeMap<String, Option<StainModel>>,
    pub patches: usize,
    pub triplets: Vec<[PathBuf; 3]>,
}

pub fn cmd_normalize(cfg: &RunConfig) -> Result<NormalizeSummary> {
    let hash = cfg.hash();
    let (_, rows) = read_index(cfg, "filter")?;
    let kept: Vec<PatchRow> = rows.into_iter().filter(|r| r.kept).collect();
    if kept.is_empty() {
        return Err(Error::Data("no kept patches to normalize".into()));
    }
    let out = cfg.output_dir();
    let images = kept
        .par_iter()
        .map(|r| load_rgb(&out.join(&r.path)))
        .collect::<Result<Vec<_>>>()?;

    let (reference, ref_img) = match cfg.reference_path() {
        Some(p) => (p.display().to_string(), load_rgb(&p)?),
        None => {
            let i = kept
                .iter()
                .zip(&images)
                .position(|(r, img)| r.split == Split::Train && tissue_pixels(img, cfg.stain.beta) >= cfg.stain.min_tissue)
                .ok_or_else(|| Error::Data("no kept training patch has enough tissue to serve as the stain reference".into()))?;
            (kept[i].patch_id.clone(), images[i].clone())
        }
    };
    let target = fit_stain_model(&image_od(&ref_img), &cfg.stain, &mut rng(cfg, "stain:reference"))
        .map_err(|e| Error::Data(format!("stain reference {reference}: {e}")))?
        .model;

    let mut by_wsi: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in kept.iter().enumerate() {
        by_wsi.entry(&r.wsi_id).or_default().push(i);
    }
    let sources: BTreeMap<String, Option<StainModel>> = by_wsi
        .par_iter()
        .map(|(wsi, idx)| {
            let od: Vec<[f64; 3]> = idx.iter().flat_map(|&i| image_od(&images[i])).collect();
            let fit = fit_stain_model(&od, &cfg.stain, &mut rng(cfg, &format!("stain:{wsi}")));
            let model = match fit {
                Ok(f) => Some(f.model),
                Err(e) => {
                    log::warn!("{wsi}: no stain model ({e}); converting to grayscale only");
                    None
                }
            };
            (wsi.to_string(), model)
        })
        .collect();

    let dir = cfg.stage_dir("normalized");
    fresh_dir(&dir.join("images"))?;
    fresh_dir(&dir.join("triplets"))?;
    let normalized = kept
        .par_iter()
        .zip(&images)
        .map(|(r, img)| {
            let colour = match &sources[&r.wsi_id] {
                Some(src) => normalize_stain(img, src, &target),
                None => img.clone(),
            };
            let gray = to_grayscale(&colour);
            let rel = format!("normalized/images/{}.png", r.patch_id);
            save(&gray, &out.join(&rel))?;
            Ok((
                PatchRow {
                    path: rel,
                    ..r.clone()
                },
                colour,
                gray,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut triplets = Vec::new();
    for ((row, colour, gray), original) in normalized.iter().zip(&images).take(cfg.samples) {
        let t = dir.join("triplets");
        let paths = [
            t.join(format!("{}_original.png", row.patch_id)),
            t.join(format!("{}_normalized.png", row.patch_id)),
            t.join(format!("{}_gray.png", row.patch_id)),
        ];
        save(original, &paths[0])?;
        save(colour, &paths[1])?;
        save(gray, &paths[2])?;
        triplets.push(paths);
    }
    let rows: Vec<PatchRow> = normalized.into_iter().map(|n| n.0).collect();
    write_csv(&dir.join("index.csv"), &hash, &rows)?;
    let summary = NormalizeSummary {
        config_hash: hash,
        reference,
        target,
        sources,
        patches: rows.len(),
        triplets,
    };
    write_json(&dir.join("stain.json"), &summary)?;
    Ok(summary)
}

/// Grayscale patches of one split as `[1, S, S]` images in `[0, 1]`.
fn image_set(cfg: &RunConfig, rows: &[PatchRow], split: Split, h: &ClassHierarchy) -> Result<ImageSet<Real>> {
    let chosen: Vec<&PatchRow> = rows.iter().filter(|r| r.split == split).collect();
    let out = cfg.output_dir();
    let s = cfg.patch_size;
    let images = chosen
        .par_iter()
        .map(|r| {
            let g = load_gray(&out.join(&r.path))?;
            if g.dimensions() != (s, s) {
                return Err(Error::Data(format!("{} is {:?}, expected {s}x{s}", r.path, g.dimensions())));
            }
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut pixels = Vec::with_capacity(images.len() * (s * s) as usize);
    for g in &images {
        pixels.extend(g.pixels().map(|p| Real::of(f64::from(p.0[0]) / 255.0)));
    }
    let label = |r: &PatchRow| {
        h.fine_index(&r.fine_label)
            .ok_or_else(|| Error::Data(format!("{}: unknown fine label {}", r.patch_id, r.fine_label)))
    };
    let fine = chosen.iter().map(|r| label(r)).collect::<Result<Vec<_>>>()?;
    let coarse = fine.iter().map(|&f| h.parent_of(f)).collect();
    ImageSet::new([1, s as usize, s as usize], pixels, coarse, fine, h)
}

/// One line of `log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub config_hash: String,
    pub model: String,
    #[serde(flatten)]
    pub epoch: EpochLog,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub model: String,
    pub checkpoints: Vec<PathBuf>,
    pub log: PathBuf,
    pub final_train_loss: Vec<f64>,
}

fn checkpoint_name(run: usize) -> String {
    format!("run_{run:02}.ckpt")
}

fn log_lines(hash: &str, key: &str, logs: &[EpochLog]) -> Result<String> {
    let mut text = String::new();
    for l in logs {
        text.push_str(&serde_json::to_string(&LogLine {
            config_hash: hash.to_string(),
            model: key.to_string(),
            epoch: l.clone(),
        })?);
        text.push('\n');
    }
    Ok(text)
}

/// Trains `cfg.runs` networks of one family. Each finished run's checkpoint
/// and log are written as soon as it completes, so a failure elsewhere
/// leaves them in place.
pub fn cmd_train(cfg: &RunConfig, arch: Architecture) -> Result<TrainSummary> {
    let h = &cfg.hierarchy;
    let hash = cfg.hash();
    let key = family_key(arch);
    let (_, rows) = read_index(cfg, "normalized")?;
    audit_leakage(&rows)?;
    let train = image_set(cfg, &rows, Split::Train, h)?;
    let dev = image_set(cfg, &rows, Split::Development, h)?;
    let spec = cfg.model_spec()?;
    let tc = cfg.train_config();
    let dir = cfg.stage_dir("train").join(key);
    fresh_dir(&dir)?;
    let data = Splits {
        train: &train,
        dev: if dev.is_empty() { None } else { Some(&dev) },
        test: None,
    };
    let results: Vec<Result<(PathBuf, Vec<EpochLog>)>> = (0..tc.runs)
        .into_par_iter()
        .map(|run| {
            let outcome = run_one(&tc, &spec, arch, data, run)?;
            let mut meta = Meta::new();
            meta.insert("config_hash".into(), hash.clone());
            meta.insert("model".into(), key.into());
            meta.insert("run".into(), run.to_string());
            meta.insert("seed".into(), outcome.seed.to_string());
            let path = dir.join(checkpoint_name(run));
            save_checkpoint(&outcome.network, &meta, &path)?;
            let run_log = dir.join(format!("run_{run:02}.jsonl"));
            std::fs::write(&run_log, log_lines(&hash, key, &outcome.logs)?).map_err(|e| Error::io(&run_log, e))?;
            Ok((path, outcome.logs))
        })
        .collect();
    let log = dir.join("log.jsonl");
    let mut file = std::fs::File::create(&log).map_err(|e| Error::io(&log, e))?;
    let mut checkpoints = Vec::new();
    let mut final_train_loss = Vec::new();
    let mut first_err = None;
    for res in results {
        match res {
            Ok((path, logs)) => {
                file.write_all(log_lines(&hash, key, &logs)?.as_bytes()).map_err(|e| Error::io(&log, e))?;
                final_train_loss.push(logs.last().map_or(f64::NAN, |l| l.train_loss));
                checkpoints.push(path);
            }
            Err(e) => {
                log::error!("{key}: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    Ok(TrainSummary {
        config_hash: hash,
        model: key.into(),
        checkpoints,
        log,
        final_train_loss,
    })
}

/// Per-run cross-coarse confusion mass of both families and their
/// difference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossCoarse {
    pub config_hash: String,
    pub flat: Vec<f64>,
    pub hier: Vec<f64>,
    pub flat_mean: f64,
    pub hier_mean: f64,
    /// `hier_mean - flat_mean`; negative means less confusion across coarse
    /// categories for the hierarchical model.
    pub difference: f64,
    /// Runs where the hierarchical model's mass is at most the flat one's.
    pub hier_not_worse: usize,
}

#[derive(Clone, Debug)]
pub struct EvaluateSummary {
    pub report: MetricsReport,
    pub cross_coarse: CrossCoarse,
    pub files: Vec<PathBuf>,
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvaluateSummary> {
    let h = &cfg.hierarchy;
    let (index_hash, rows) = read_index(cfg, "normalized")?;
    let split_path = cfg.stage_dir("patches").join("split.csv");
    let split_text = std::fs::read_to_string(&split_path).map_err(|e| Error::io(&split_path, e))?;
    let (split_hash, split_body) = split_text
        .strip_prefix("# config_hash: ")
        .and_then(|r| r.split_once('\n'))
        .ok_or_else(|| Error::Data(format!("{} has no config hash line", split_path.display())))?;
    let assignment = SplitAssignment::read(split_body.as_bytes())?;
    audit_leakage(&rows)?;
    if let Some(r) = rows.iter().find(|r| assignment.of(&r.patient_id) != Some(r.split)) {
        return Err(Error::Data(format!("patch {} disagrees with split.csv about its split", r.patch_id)));
    }

    let spec = cfg.model_spec()?;
    let mut hashes: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    hashes.entry(index_hash).or_default().insert("normalized/index.csv".into());
    hashes.entry(split_hash.trim().to_string()).or_default().insert("patches/split.csv".into());
    let mut checkpoints = Vec::new();
    for arch in FAMILIES {
        let key = family_key(arch);
        let dir = cfg.stage_dir("train").join(key);
        let paths: Vec<PathBuf> = (0..cfg.runs).map(|r| dir.join(checkpoint_name(r))).collect();
        let missing: Vec<String> = paths.iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
        if !missing.is_empty() {
            return Err(Error::Data(format!("missing {key} checkpoints: {}", missing.join(", "))));
        }
        let mut nets = Vec::new();
        for p in &paths {
            let (net, meta) = load_checkpoint::<Real>(p, Some(&spec))?;
            if net.architecture() != arch {
                return Err(Error::Data(format!("{} holds a {} network", p.display(), net.architecture().as_str())));
            }
            let hash = meta.get("config_hash").cloned().unwrap_or_else(|| "<none>".into());
            hashes.entry(hash).or_default().insert(format!("train/{key}/{}", p.file_name().unwrap_or_default().to_string_lossy()));
            nets.push(net);
        }
        checkpoints.push((arch, nets));
    }
    if hashes.len() > 1 {
        let detail: Vec<String> = hashes.iter().map(|(h, files)| format!("{h}: {}", files.iter().cloned().collect::<Vec<_>>().join(", "))).collect();
        return Err(Error::Config(format!("artifacts come from different configs; {}", detail.join("; "))));
    }
    let hash = hashes.into_keys().next().expect("at least one artifact");

    let test = image_set(cfg, &rows, Split::Test, h)?;
    if test.is_empty() {
        return Err(Error::Data("test split has no patches".into()));
    }
    let mut summaries = Vec::new();
    let mut per_family = Vec::new();
    for (arch, nets) in &checkpoints {
        let runs = nets
            .par_iter()
            .map(|net| {
                let probs = predict_set(net, &test, 64)?;
                let bundle = PredictionBundle::new(probs.fine, probs.coarse, test.fine().to_vec(), h)?;
                evaluate_bundle(&bundle, h)
            })
            .collect::<Result<Vec<_>>>()?;
        let summary = summarize(family_key(*arch), family_label(*arch), &runs, h, cfg.ci)?;
        per_family.push(summary.per_run_cross_coarse_mass.clone());
        summaries.push(summary);
    }
    let report = MetricsReport::new(h, cfg.ci, Some(hash.clone()), summaries)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (flat, hier) = (per_family[0].clone(), per_family[1].clone());
    let cross_coarse = CrossCoarse {
        config_hash: hash.clone(),
        flat_mean: mean(&flat),
        hier_mean: mean(&hier),
        difference: mean(&hier) - mean(&flat),
        hier_not_worse: flat.iter().zip(&hier).filter(|(f, h)| h <= f).count(),
        flat,
        hier,
    };

    let dir = cfg.stage_dir("evaluate");
    fresh_dir(&dir)?;
    let mut files = vec![dir.join("metrics.csv"), dir.join("metrics.json"), dir.join("cross_coarse.json")];
    write_csv_text(&files[0], &hash, &report.metrics_csv()?)?;
    write_json(&files[1], &report)?;
    write_json(&files[2], &cross_coarse)?;
    for arch in FAMILIES {
        let path = dir.join(format!("confusion_{}.csv", family_key(arch)));
        write_csv_text(&path, &hash, &report.confusion_csv(family_key(arch))?)?;
        files.push(path);
    }
    Ok(EvaluateSummary {
        report,
        cross_coarse,
        files,
    })
}

/// Reads back the summary written by [`cmd_evaluate`].
pub fn read_cross_coarse(cfg: &RunConfig) -> Result<CrossCoarse> {
    read_json(&cfg.stage_dir("evaluate").join("cross_coarse.json"))
}
