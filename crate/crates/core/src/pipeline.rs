//! Run configuration and the end-to-end commands behind the CLI.
//!
//! Every artifact lives under one working directory:
//!
//! ```text
//! data/                      dataset (train/ val/ test/ manifest.json)
//! checkpoints/{stage}/       autoencoder and diffusion checkpoints
//! logs/{stage}.jsonl         training losses
//! outputs/                   outpainting results
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{depth_norm, train_autoencoder, AutoencoderBundle, AutoencoderConfig, Modality, VqAutoencoder};
use crate::diffusion::{train_ldm, LatentDiffusion, LatentSource, LatentStats, LdmConfig};
use crate::error::{invalid, Error, Result};
use crate::metrics::{density_coverage, depth_metrics, frechet_distance, lrce, paired_t_test, to_255, DepthReport, FeatureExtractor, PairedTest};
use crate::outpaint::{outpaint, write_samples, DepthHint, Models, OutpaintRequest};
use crate::pano::{check_equirect, gen_mask, half_visible_mask, Mask, MaskKind, MaskSpec, Panorama};
use crate::synth::{load_depth_png, load_manifest, load_rgb_png, load_split, render_dataset, save_dataset, sparsify_depth, DatasetManifest, Split};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n: usize,
    pub height: usize,
    pub split_ratios: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n: 100, height: 64, split_ratios: [0.8, 0.1, 0.1] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutpaintConfig {
    pub mask: MaskSpec,
    pub n_samples: usize,
    pub align: bool,
    pub composite: bool,
}

impl Default for OutpaintConfig {
    fn default() -> Self {
        OutpaintConfig {
            mask: MaskSpec { kind: MaskKind::Camera { views: 2, fov_h_range_deg: (60.0, 100.0), fov_v_range_deg: (60.0, 90.0) }, seed: 0 },
            n_samples: 1,
            align: true,
            composite: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub feature_seed: u64,
    pub feature_dim: usize,
    /// Neighbourhood size for density/coverage (capped at `n_reference - 1`).
    pub k: usize,
    /// Covariance shrinkage for the Fréchet distance.
    pub shrinkage: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { feature_seed: 0, feature_dim: 64, k: 5, shrinkage: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub n_requests: usize,
    pub split: Split,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { n_requests: 20, split: Split::Test }
    }
}

/// Everything a run needs, loaded from a single JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub vae_rgb: AutoencoderConfig,
    pub vae_depth: AutoencoderConfig,
    /// Depth normalization range in meters.
    pub d_max: f32,
    pub ldm: LdmConfig,
    pub outpaint: OutpaintConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            vae_rgb: AutoencoderConfig::default(),
            vae_depth: AutoencoderConfig { widths: [24, 32], epochs: 30, ..AutoencoderConfig::default() },
            d_max: 10.0,
            ldm: LdmConfig::default(),
            outpaint: OutpaintConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.display().to_string()));
        }
        let cfg: RunConfig = serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets the global seed and derives every component seed from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.vae_rgb.seed = seed;
        self.vae_depth.seed = seed.wrapping_add(1);
        self.ldm.seed = seed.wrapping_add(2);
        self.outpaint.mask.seed = seed.wrapping_add(3);
        self
    }

    /// The diffusion config with the denoiser input width matched to the
    /// latent layout (4 channels with depth, 3 without).
    pub fn ldm_config(&self) -> LdmConfig {
        let mut ldm = self.ldm.clone();
        ldm.unet.in_channels = ldm.latent_channels();
        ldm
    }

    pub fn validate(&self) -> Result<()> {
        check_equirect(self.data.height, 2 * self.data.height)?;
        if !(self.d_max > 0.0) {
            return invalid("d_max must be positive");
        }
        self.ldm_config().validate()?;
        self.outpaint.mask.validate()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    VaeRgb,
    VaeDepth,
    Ldm,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::VaeRgb => "vae-rgb",
            Stage::VaeDepth => "vae-depth",
            Stage::Ldm => "ldm",
        }
    }
}

/// Paths inside a working directory.
#[derive(Clone, Debug)]
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workdir { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(stage.as_str())
    }

    pub fn log(&self, stage: Stage) -> PathBuf {
        self.root.join("logs").join(format!("{}.jsonl", stage.as_str()))
    }

    pub fn outputs(&self) -> PathBuf {
        self.root.join("outputs")
    }
}

pub fn gen_data(cfg: &RunConfig, wd: &Workdir) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::new(cfg.data.n, cfg.data.height, cfg.seed, cfg.data.split_ratios)?;
    let panos = render_dataset(&manifest)?;
    save_dataset(&manifest, &panos, &wd.data())?;
    Ok(manifest)
}

fn load_training_split(wd: &Workdir, split: Split) -> Result<Vec<Panorama>> {
    let dir = wd.data();
    match load_manifest(&dir) {
        Err(Error::NotFound(_)) => return Err(Error::InvalidState(format!("no dataset in {} (run gen-data first)", dir.display()))),
        Err(e) => return Err(e),
        Ok(_) => {}
    }
    let (_, panos) = load_split(&dir, split)?;
    if panos.is_empty() {
        return Err(Error::InvalidState(format!("the {} split is empty", split.as_str())));
    }
    Ok(panos)
}

fn append_log<T: Serialize>(path: &Path, entry: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(entry)?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage: Stage,
    /// Epochs for autoencoders, optimizer steps for the diffusion model.
    pub steps: u64,
    /// `None` when nothing was trained in this invocation.
    pub final_loss: Option<f32>,
    pub checkpoint: PathBuf,
}

pub fn train(cfg: &RunConfig, wd: &Workdir, stage: Stage) -> Result<TrainSummary> {
    match stage {
        Stage::VaeRgb | Stage::VaeDepth => train_vae(cfg, wd, stage),
        Stage::Ldm => train_diffusion(cfg, wd),
    }
}

fn train_vae(cfg: &RunConfig, wd: &Workdir, stage: Stage) -> Result<TrainSummary> {
    let panos = load_training_split(wd, Split::Train)?;
    let (modality, config, images) = if stage == Stage::VaeRgb {
        (Modality::Rgb, &cfg.vae_rgb, panos.iter().map(|p| p.rgb.clone()).collect::<Vec<_>>())
    } else {
        let images = panos.iter().map(|p| depth_norm(&p.depth, cfg.d_max)).collect::<Result<Vec<_>>>()?;
        (Modality::Depth, &cfg.vae_depth, images)
    };
    let log = wd.log(stage);
    let _ = fs::remove_file(&log);
    let mut log_err = None;
    let (ae, history) = train_autoencoder(modality, &images, config, |e| {
        log::info!("{} epoch {} recon {:.4} vq {:.4} codes {}", stage.as_str(), e.epoch, e.reconstruction, e.codebook, e.codes_used);
        if let Err(err) = append_log(&log, e) {
            log_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    let last = history.last().map(|h| h.total);
    let dir = wd.checkpoint(stage);
    ae.save_dir(&dir, serde_json::json!({ "d_max": cfg.d_max, "final_loss": last }))?;
    Ok(TrainSummary { stage, steps: history.len() as u64, final_loss: last, checkpoint: dir })
}

/// Loads both frozen autoencoders, naming the missing stage on failure.
pub fn load_bundle(cfg: &RunConfig, wd: &Workdir) -> Result<AutoencoderBundle> {
    let load = |stage: Stage, modality: Modality| {
        let dir = wd.checkpoint(stage);
        if !dir.join("manifest.json").exists() {
            return Err(Error::InvalidState(format!("missing {} checkpoint in {} (run `train {}` first)", stage.as_str(), dir.display(), stage.as_str())));
        }
        VqAutoencoder::load_dir(modality, &dir)
    };
    Ok(AutoencoderBundle { rgb: load(Stage::VaeRgb, Modality::Rgb)?, depth: load(Stage::VaeDepth, Modality::Depth)?, d_max: cfg.d_max })
}

pub fn load_ldm(wd: &Workdir) -> Result<LatentDiffusion> {
    let dir = wd.checkpoint(Stage::Ldm);
    if !dir.join("manifest.json").exists() {
        return Err(Error::InvalidState(format!("missing ldm checkpoint in {} (run `train ldm` first)", dir.display())));
    }
    Ok(LatentDiffusion::load_dir(&dir)?.0)
}

/// Raw (unnormalized) training latents: RGB-D or RGB only.
pub fn encode_latents(bundle: &AutoencoderBundle, panos: &[Panorama], use_depth: bool) -> Result<Vec<Tensor>> {
    panos
        .iter()
        .map(|p| {
            if use_depth {
                Ok(bundle.encode_rgbd(&p.rgb, &p.depth)?.data)
            } else {
                Ok(bundle.encode_rgb(&p.rgb)?.data)
            }
        })
        .collect()
}

/// Training latents that swap in the encoding of a sparsified depth map with
/// some probability. `latents` are raw RGB-D latents; output is normalized.
pub struct SparseDepthSource<'a> {
    pub latents: Vec<Tensor>,
    pub depths: Vec<Tensor>,
    pub bundle: &'a AutoencoderBundle,
    pub stats: LatentStats,
    pub probability: f64,
    pub fraction: f64,
}

impl LatentSource for SparseDepthSource<'_> {
    fn len(&self) -> usize {
        self.latents.len()
    }

    fn latent(&self, i: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let dense = &self.latents[i];
        if rng.random::<f64>() >= self.probability {
            return Ok(self.stats.normalize(dense));
        }
        let sparse = sparsify_depth(&self.depths[i], self.fraction, rng.random())?;
        let z = Tensor::concat_channels(&dense.channels(0, 3), &self.bundle.encode_depth(&sparse)?.data)?;
        Ok(self.stats.normalize(&z))
    }
}

fn train_diffusion(cfg: &RunConfig, wd: &Workdir) -> Result<TrainSummary> {
    let ldm_cfg = cfg.ldm_config();
    let use_depth = ldm_cfg.use_depth;
    let rgb_dir = wd.checkpoint(Stage::VaeRgb);
    if !rgb_dir.join("manifest.json").exists() {
        return Err(Error::InvalidState("ldm training needs the vae-rgb checkpoint (run `train vae-rgb` first)".into()));
    }
    if use_depth && !wd.checkpoint(Stage::VaeDepth).join("manifest.json").exists() {
        return Err(Error::InvalidState("ldm training needs the vae-depth checkpoint (run `train vae-depth` first)".into()));
    }
    let bundle = if use_depth {
        load_bundle(cfg, wd)?
    } else {
        let rgb = VqAutoencoder::load_dir(Modality::Rgb, &rgb_dir)?;
        let depth = VqAutoencoder::new(Modality::Depth, cfg.vae_depth.clone());
        AutoencoderBundle { rgb, depth, d_max: cfg.d_max }
    };
    let panos = load_training_split(wd, Split::Train)?;
    let raw = encode_latents(&bundle, &panos, use_depth)?;

    let dir = wd.checkpoint(Stage::Ldm);
    let log = wd.log(Stage::Ldm);
    let (mut model, adam) = match LatentDiffusion::load_dir(&dir) {
        // a longer step budget continues the same run
        Ok((model, adam)) if LdmConfig { train_steps: 0, ..model.config.clone() } == LdmConfig { train_steps: 0, ..ldm_cfg.clone() } => {
            log::info!("resuming ldm from step {}", model.step);
            (model, adam)
        }
        Ok(_) => {
            log::warn!("ldm checkpoint has a different config; starting over");
            let _ = fs::remove_file(&log);
            (LatentDiffusion::new(ldm_cfg.clone(), LatentStats::fit(&raw)?)?, None)
        }
        Err(Error::InvalidState(_)) => {
            let _ = fs::remove_file(&log);
            (LatentDiffusion::new(ldm_cfg.clone(), LatentStats::fit(&raw)?)?, None)
        }
        Err(e) => return Err(e),
    };
    model.config.train_steps = ldm_cfg.train_steps;
    let stats = model.stats.clone();
    let latents: Vec<Tensor> = raw.iter().map(|z| stats.normalize(z)).collect();

    let mut last = None;
    let mut log_err = None;
    let mut on_step = |s: &crate::diffusion::StepLoss| {
        last = Some(s.loss);
        if s.step % 100 == 0 {
            log::info!("ldm step {} loss {:.4}", s.step, s.loss);
        }
        if let Err(err) = append_log(&log, s) {
            log_err.get_or_insert(err);
        }
    };
    let adam = match (&ldm_cfg.depth_sparsity, use_depth) {
        (Some(sp), true) => {
            let source = SparseDepthSource {
                latents: raw,
                depths: panos.iter().map(|p| p.depth.clone()).collect(),
                bundle: &bundle,
                stats: stats.clone(),
                probability: sp.probability,
                fraction: sp.fraction,
            };
            train_ldm(&mut model, adam, &source, &mut on_step)?
        }
        _ => train_ldm(&mut model, adam, &latents, &mut on_step)?,
    };
    if let Some(e) = log_err {
        return Err(e);
    }
    model.save_dir(&dir, Some(&adam))?;
    Ok(TrainSummary { stage: Stage::Ldm, steps: model.step, final_loss: last, checkpoint: dir })
}

/// Where an outpainting request's mask comes from. A mask file wins over the spec.
pub fn resolve_mask(spec: &MaskSpec, mask_file: Option<&Path>, h: usize, w: usize) -> Result<Mask> {
    let mask = match mask_file {
        Some(path) => Mask::load_png(path)?,
        None => gen_mask(spec, h, w)?,
    };
    if (mask.h, mask.w) != (h, w) {
        return invalid(format!("mask {}x{} does not match image {h}x{w}", mask.h, mask.w));
    }
    Ok(mask)
}

/// `{id}_rgb.png` → `id`.
fn image_id(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    stem.strip_suffix("_rgb").unwrap_or(&stem).to_string()
}

#[derive(Clone, Debug, Default)]
pub struct OutpaintArgs {
    pub input: PathBuf,
    pub mask_file: Option<PathBuf>,
    /// Fully visible depth for the request.
    pub depth: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Outpaints one image file and writes the results; returns the written paths.
pub fn outpaint_file(cfg: &RunConfig, wd: &Workdir, args: &OutpaintArgs) -> Result<Vec<PathBuf>> {
    let bundle = load_bundle(cfg, wd)?;
    let ldm = load_ldm(wd)?;
    let rgb = load_rgb_png(&args.input)?;
    check_equirect(rgb.h, rgb.w)?;
    let mask = resolve_mask(&cfg.outpaint.mask, args.mask_file.as_deref(), rgb.h, rgb.w)?;
    let mut req = OutpaintRequest::new(image_id(&args.input), rgb, mask, cfg.seed);
    if let Some(p) = &args.depth {
        let depth = load_depth_png(p)?;
        let mask = Mask::all_visible(depth.h, depth.w);
        req.depth = Some(DepthHint { depth, mask });
    }
    req.n_samples = cfg.outpaint.n_samples;
    req.align = cfg.outpaint.align;
    req.composite = cfg.outpaint.composite;
    let samples = outpaint(&req, &Models { bundle: &bundle, ldm: &ldm })?;
    let out = args.out_dir.clone().unwrap_or_else(|| wd.outputs());
    write_samples(&out, &req, &samples, ldm.config.sampling_steps)
}

/// Outpaints every item of a dataset split with the configured mask (one
/// mask per item, seeded from the mask seed and the item index).
pub fn outpaint_split(cfg: &RunConfig, wd: &Workdir, split: Split, out_dir: Option<&Path>) -> Result<Vec<PathBuf>> {
    let bundle = load_bundle(cfg, wd)?;
    let ldm = load_ldm(wd)?;
    let (manifest, panos) = load_split(&wd.data(), split)?;
    let out = out_dir.map(Path::to_path_buf).unwrap_or_else(|| wd.outputs());
    let mut paths = Vec::new();
    for (i, (item, pano)) in manifest.ids(split).into_iter().zip(&panos).enumerate() {
        let spec = MaskSpec { seed: cfg.outpaint.mask.seed.wrapping_add(i as u64), ..cfg.outpaint.mask.clone() };
        let mask = gen_mask(&spec, pano.height(), pano.width())?;
        let mut req = OutpaintRequest::new(item.id.clone(), pano.rgb.clone(), mask, cfg.seed.wrapping_add(i as u64));
        req.n_samples = cfg.outpaint.n_samples;
        req.align = cfg.outpaint.align;
        req.composite = cfg.outpaint.composite;
        let samples = outpaint(&req, &Models { bundle: &bundle, ldm: &ldm })?;
        paths.extend(write_samples(&out, &req, &samples, ldm.config.sampling_steps)?);
    }
    Ok(paths)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthSection {
    pub pairs: usize,
    /// Per-image metrics averaged over matched result/reference pairs.
    pub mean: DepthReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_results: usize,
    pub n_reference: usize,
    pub extractor: String,
    pub feature_seed: u64,
    pub feature_dim: usize,
    pub k: usize,
    pub shrinkage: f64,
    pub frechet: f64,
    pub density: f64,
    pub coverage: f64,
    pub lrce_results: f64,
    pub lrce_reference: f64,
    pub depth_available: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth: Option<DepthSection>,
}

fn rgb_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::NotFound(dir.display().to_string()));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().ends_with("_rgb.png")))
        .collect();
    files.sort();
    Ok(files)
}

fn depth_sibling(rgb: &Path) -> PathBuf {
    let name = rgb.file_name().unwrap_or_default().to_string_lossy().replace("_rgb.png", "_depth.png");
    rgb.with_file_name(name)
}

/// Compares in-memory result images against reference images (both `[-1, 1]` RGB).
pub fn evaluate_images(cfg: &EvalConfig, results: &[Tensor], reference: &[Tensor]) -> Result<EvalReport> {
    if results.is_empty() || reference.is_empty() {
        return invalid("evaluation needs non-empty result and reference sets");
    }
    let fx = FeatureExtractor::new(cfg.feature_seed, cfg.feature_dim);
    let fr = fx.extract(results)?;
    let fref = fx.extract(reference)?;
    let k = cfg.k.min(reference.len().saturating_sub(1)).max(1);
    let (density, coverage) = if reference.len() > 1 { density_coverage(&fref, &fr, k)? } else { (0.0, 0.0) };
    Ok(EvalReport {
        n_results: results.len(),
        n_reference: reference.len(),
        extractor: fx.id(),
        feature_seed: cfg.feature_seed,
        feature_dim: cfg.feature_dim,
        k,
        shrinkage: cfg.shrinkage,
        frechet: frechet_distance(&fr, &fref, cfg.shrinkage)?,
        density,
        coverage,
        lrce_results: lrce(&results.iter().map(to_255).collect::<Vec<_>>())?,
        lrce_reference: lrce(&reference.iter().map(to_255).collect::<Vec<_>>())?,
        depth_available: false,
        depth: None,
    })
}

/// Evaluates every `*_rgb.png` in `results` against those in `reference`.
/// Depth metrics are added when results carry `*_depth.png` files whose id
/// (the part before `_sample`) has a reference depth map.
pub fn evaluate(cfg: &RunConfig, results: &Path, reference: &Path) -> Result<EvalReport> {
    let res_files = rgb_files(results)?;
    let ref_files = rgb_files(reference)?;
    if res_files.is_empty() || ref_files.is_empty() {
        return invalid(format!("no *_rgb.png images in {} or {}", results.display(), reference.display()));
    }
    let load = |files: &[PathBuf]| files.iter().map(|p| load_rgb_png(p)).collect::<Result<Vec<_>>>();
    let mut report = evaluate_images(&cfg.eval, &load(&res_files)?, &load(&ref_files)?)?;

    let mut reports = Vec::new();
    for rgb in &res_files {
        let pred_path = depth_sibling(rgb);
        let id = image_id(rgb);
        let base = id.split("_sample").next().unwrap_or(&id).to_string();
        let gt_path = reference.join(format!("{base}_depth.png"));
        if pred_path.exists() && gt_path.exists() {
            let pred = load_depth_png(&pred_path)?;
            let gt = load_depth_png(&gt_path)?;
            reports.push(depth_metrics(&pred, &gt, &Mask::all_visible(gt.h, gt.w))?);
        }
    }
    if !reports.is_empty() {
        let n = reports.len() as f64;
        let avg = |f: fn(&DepthReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        report.depth_available = true;
        report.depth = Some(DepthSection {
            pairs: reports.len(),
            mean: DepthReport {
                rmse: avg(|r| r.rmse),
                mae: avg(|r| r.mae),
                absrel: avg(|r| r.absrel),
                delta125: avg(|r| r.delta125),
                nonpositive_gt: reports.iter().map(|r| r.nonpositive_gt).sum(),
            },
        });
    }
    Ok(report)
}

/// Requests below this count are refused; below [`ABLATION_RECOMMENDED`] they
/// run with a warning.
pub const ABLATION_MIN: usize = 5;
pub const ABLATION_RECOMMENDED: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    pub lrce_aligned: Vec<f64>,
    pub lrce_unaligned: Vec<f64>,
    pub mean_aligned: f64,
    pub mean_unaligned: f64,
    /// `mean_aligned / mean_unaligned`.
    pub ratio: f64,
    /// `1 − ratio`.
    pub relative_reduction: f64,
    /// One-sided paired test of `unaligned > aligned`.
    pub test: PairedTest,
}

/// Half-visible seam protocol: the left half of each panorama is visible and
/// the right half masked, so the generated content must meet the visible
/// content across the seam. Each request runs twice with the same seed, with
/// and without alignment rotation.
pub fn ablate_rotation_with(models: &Models, panos: &[Panorama], n: usize, seed: u64) -> Result<AblationReport> {
    if n < ABLATION_MIN {
        return invalid(format!("the rotation ablation needs at least {ABLATION_MIN} requests, got {n}"));
    }
    if panos.is_empty() {
        return invalid("the rotation ablation needs at least one panorama");
    }
    let warning = (n < ABLATION_RECOMMENDED).then(|| {
        let msg = format!("only {n} requests; at least {ABLATION_RECOMMENDED} are recommended for a stable comparison");
        log::warn!("{msg}");
        msg
    });
    let (mut on, mut off) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let pano = &panos[i % panos.len()];
        let mask = half_visible_mask(pano.height(), pano.width());
        let mut req = OutpaintRequest::new(format!("ablate{i:03}"), pano.rgb.clone(), mask, seed.wrapping_add(i as u64));
        for (align, dst) in [(true, &mut on), (false, &mut off)] {
            req.align = align;
            let out = outpaint(&req, models)?;
            dst.push(lrce(&[to_255(&out[0].rgb)])?);
        }
        log::info!("ablation request {i}: aligned {:.2} unaligned {:.2}", on[i], off[i]);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mu) = (mean(&on), mean(&off));
    let ratio = if mu > 0.0 { ma / mu } else { f64::NAN };
    let test = paired_t_test(&off, &on)?;
    Ok(AblationReport { n, warning, mean_aligned: ma, mean_unaligned: mu, ratio, relative_reduction: 1.0 - ratio, test, lrce_aligned: on, lrce_unaligned: off })
}

pub fn ablate_rotation(cfg: &RunConfig, wd: &Workdir, n: usize) -> Result<AblationReport> {
    if n < ABLATION_MIN {
        return invalid(format!("the rotation ablation needs at least {ABLATION_MIN} requests, got {n}"));
    }
    let bundle = load_bundle(cfg, wd)?;
    let ldm = load_ldm(wd)?;
    let (_, panos) = load_split(&wd.data(), cfg.ablation.split)?;
    ablate_rotation_with(&Models { bundle: &bundle, ldm: &ldm }, &panos, n, cfg.seed)
}
