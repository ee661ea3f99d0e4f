//! Run configuration. One versioned JSON document captures every default;
//! unknown keys are rejected so a config file always means what it says.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// w_t = sigma_t^2 (floored away from zero).
    SigmaSq,
    /// w_t = 1.
    One,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldOptimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Toy classes; each gets procedural subject geometry.
    pub classes: Vec<String>,
    /// Body color palette (also the color token vocabulary).
    pub colors: Vec<String>,
    /// Pose contexts (absent context = standing).
    pub contexts: Vec<String>,
    /// Pretraining corpus size per class.
    pub images_per_class: usize,
    /// Fraction of corpus prompts that carry a context token.
    pub context_fraction: f32,
    /// Occupancy grid resolution per axis.
    pub occupancy_resolution: usize,
    /// Number of casual captures per subject.
    pub captures_per_subject: usize,
    /// Captures come from azimuths in [-arc, +arc] around the front.
    pub capture_arc_deg: f32,
    /// Capture elevation is jittered inside this range (degrees).
    pub capture_elevation_deg: [f32; 2],
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            classes: ["dog", "duck", "backpack", "can"].map(String::from).to_vec(),
            colors: ["red", "green", "blue", "yellow", "pink", "orange", "purple", "teal"]
                .map(String::from)
                .to_vec(),
            contexts: ["sitting", "sleeping", "jumping"].map(String::from).to_vec(),
            images_per_class: 256,
            context_fraction: 0.5,
            occupancy_resolution: 32,
            captures_per_subject: 4,
            capture_arc_deg: 60.0,
            capture_elevation_deg: [15.0, 40.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    /// Square image side in pixels.
    pub resolution: usize,
    pub t_steps: usize,
    pub schedule: ScheduleKind,
    pub weight_mode: WeightMode,
    /// Conditioning embedding dimension.
    pub embed_dim: usize,
    /// Sinusoidal timestep embedding dimension.
    pub time_dim: usize,
    /// Base channel count of the denoiser encoder-decoder.
    pub base_channels: usize,
    /// DDIM reverse steps used by `sample`.
    pub sample_steps: usize,
    /// Prompt dropout rate during pretraining (unconditional branch).
    pub dropout_rate: f32,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f32,
    /// Learning rate for personalization finetuning.
    pub finetune_lr: f32,
    pub finetune_batch: usize,
    /// Prior preservation on/off, its loss weight, and the number of frozen
    /// class samples drawn at personalization start.
    pub prior_preservation: bool,
    pub prior_weight: f32,
    pub prior_samples: usize,
    /// Guidance weight used when drawing class/prior samples.
    pub prior_guidance: f32,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            resolution: 16,
            t_steps: 1000,
            schedule: ScheduleKind::Cosine,
            weight_mode: WeightMode::SigmaSq,
            embed_dim: 32,
            time_dim: 16,
            base_channels: 16,
            sample_steps: 50,
            dropout_rate: 0.1,
            pretrain_steps: 4000,
            pretrain_batch: 8,
            pretrain_lr: 2e-3,
            finetune_lr: 1e-3,
            finetune_batch: 4,
            prior_preservation: true,
            prior_weight: 1.0,
            prior_samples: 16,
            prior_guidance: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NerfConfig {
    /// Frequency band count of the integrated positional encoding.
    pub l_bands: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Samples per ray during optimization / for final renders.
    pub samples_per_ray: usize,
    pub samples_final: usize,
    /// Coarse-to-fine annealing endpoints and ramp fraction.
    pub lambda_hi: f32,
    pub lambda_lo: f32,
    pub anneal_fraction: f32,
    /// Density head output scale and pre-activation bias.
    pub density_scale: f32,
    pub density_bias: f32,
    /// Lambertian ambient term.
    pub ambient: f32,
    /// Orbit camera radius and vertical field of view (radians).
    pub orbit_radius: f32,
    pub fov: f32,
    /// Ray march bounds around the orbit radius.
    pub scene_bound: f32,
    /// Smoothing constant of the squareplus hidden activation.
    pub squareplus_b: f32,
}

impl Default for NerfConfig {
    fn default() -> Self {
        NerfConfig {
            l_bands: 8,
            hidden: 128,
            layers: 4,
            samples_per_ray: 64,
            samples_final: 128,
            lambda_hi: 1.0,
            lambda_lo: 0.0,
            anneal_fraction: 0.6,
            density_scale: 25.0,
            density_bias: -1.0,
            ambient: 0.1,
            orbit_radius: 2.0,
            fov: 0.9,
            scene_bound: 0.95,
            squareplus_b: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Timestep sampling range for distillation, as schedule fractions.
    pub t_min: f32,
    pub t_max: f32,
    /// Classifier-free guidance weight during distillation.
    pub guidance: f32,
    pub lambda_sds: f32,
    pub lambda_recon: f32,
    pub lambda_nerf: f32,
    /// p-norm of the reconstruction loss (1 or 2).
    pub recon_p: u32,
    /// Pseudo views sampled per reconstruction term evaluation.
    pub recon_views_per_step: usize,
    /// Samples per ray for reconstruction renders.
    pub recon_samples_per_ray: usize,
    pub field_lr: f32,
    pub field_optimizer: FieldOptimizer,
    /// SDS camera elevation range (degrees).
    pub elevation_deg: [f32; 2],
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            t_min: 0.02,
            t_max: 0.98,
            guidance: 20.0,
            lambda_sds: 1.0,
            lambda_recon: 0.1,
            lambda_nerf: 0.5,
            recon_p: 2,
            recon_views_per_step: 1,
            recon_samples_per_ray: 32,
            field_lr: 2e-3,
            field_optimizer: FieldOptimizer::Adam,
            elevation_deg: [15.0, 45.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Personalization step counts for the partial / full checkpoints and
    /// the extra multi-view finetuning.
    pub partial_steps: usize,
    pub full_steps: usize,
    pub multiview_extra_steps: usize,
    /// Posed pseudo views generated in stage 2.
    pub n_pseudo_views: usize,
    /// Fraction of the forward process used by the noise-and-denoise
    /// translation.
    pub t_pseudo: f32,
    /// Stage-2 orbit elevation (degrees).
    pub stage2_elevation_deg: f32,
    pub nerf_iters_stage1: usize,
    pub nerf_iters_stage3: usize,
    /// NeRF budget of the single-stage baseline.
    pub nerf_iters_baseline: usize,
    /// Abort a NeRF stage after this many consecutive non-finite steps.
    pub divergence_patience: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            partial_steps: 150,
            full_steps: 800,
            multiview_extra_steps: 150,
            n_pseudo_views: 20,
            t_pseudo: 0.6,
            stage2_elevation_deg: 30.0,
            nerf_iters_stage1: 2000,
            nerf_iters_stage3: 2000,
            nerf_iters_baseline: 4000,
            divergence_patience: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Turntable renders and elevation for retrieval precision.
    pub n_azimuth: usize,
    pub elevation_deg: f32,
    /// Distractor prompts in the retrieval bank.
    pub distractors: usize,
    /// Density binarization threshold for occupancy IoU (calibrated once on
    /// a distilled subject, then frozen).
    pub density_threshold: f32,
    /// Front-marker detection: max RGB distance and min pixel count.
    pub janus_color_tolerance: f32,
    pub janus_min_pixels: usize,
    /// Retriever training schedule.
    pub retriever_steps: usize,
    pub retriever_batch: usize,
    pub retriever_lr: f32,
    /// Samples drawn for view-bucket entropy measurements.
    pub entropy_samples: usize,
    /// Guidance weight used when sampling for entropy measurements.
    pub entropy_guidance: f32,
    /// Held-out cameras for image fidelity.
    pub psnr_cameras: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_azimuth: 160,
            elevation_deg: 40.0,
            distractors: 9,
            density_threshold: 8.0,
            janus_color_tolerance: 0.30,
            janus_min_pixels: 2,
            retriever_steps: 1500,
            retriever_batch: 16,
            retriever_lr: 1e-3,
            entropy_samples: 64,
            entropy_guidance: 4.0,
            psnr_cameras: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub version: u32,
    pub seed: u64,
    pub world: WorldConfig,
    pub diffusion: DiffusionConfig,
    pub nerf: NerfConfig,
    pub guidance: GuidanceConfig,
    pub pipeline: PipelineConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn new() -> Self {
        Config {
            version: CONFIG_VERSION,
            seed: 0,
            world: WorldConfig::default(),
            diffusion: DiffusionConfig::default(),
            nerf: NerfConfig::default(),
            guidance: GuidanceConfig::default(),
            pipeline: PipelineConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Reduced-budget profile used by the `reproduce` command so a full
    /// multi-subject, multi-seed comparison finishes on desk hardware.
    /// Everything it changes is recorded in the emitted config.json.
    pub fn reproduce_profile() -> Self {
        let mut c = Config::new();
        c.diffusion.resolution = 16;
        c.diffusion.sample_steps = 30;
        c.nerf.samples_per_ray = 32;
        c.nerf.samples_final = 64;
        c.pipeline.nerf_iters_stage1 = 500;
        c.pipeline.nerf_iters_stage3 = 500;
        c.pipeline.nerf_iters_baseline = 1000;
        c.eval.n_azimuth = 48;
        c.eval.entropy_samples = 48;
        c
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: Config =
            serde_json::from_str(json).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_canonical_json())?;
        Ok(())
    }

    /// Canonical serialized form (struct field order, pretty-printed); the
    /// config hash is the SHA-256 of these bytes.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_canonical_json().as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.diffusion.t_steps < 2 {
            return Err(Error::Config("t_steps must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.diffusion.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
        if self.pipeline.partial_steps >= self.pipeline.full_steps {
            return Err(Error::Config("partial_steps must be < full_steps".into()));
        }
        if self.pipeline.n_pseudo_views < 1 {
            return Err(Error::Config("n_pseudo_views must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.pipeline.t_pseudo) {
            return Err(Error::Config("t_pseudo must be in [0, 1]".into()));
        }
        if !(0.0 <= self.guidance.t_min
            && self.guidance.t_min < self.guidance.t_max
            && self.guidance.t_max <= 1.0)
        {
            return Err(Error::Config("need 0 <= t_min < t_max <= 1".into()));
        }
        if self.guidance.lambda_sds <= 0.0
            && self.guidance.lambda_recon <= 0.0
            && self.guidance.lambda_nerf <= 0.0
        {
            return Err(Error::Config("at least one objective weight must be positive".into()));
        }
        if !matches!(self.guidance.recon_p, 1 | 2) {
            return Err(Error::Config("recon_p must be 1 or 2".into()));
        }
        if self.nerf.samples_per_ray < 8 || self.nerf.samples_final < 8 {
            return Err(Error::Config("samples_per_ray must be >= 8".into()));
        }
        if self.nerf.lambda_hi < self.nerf.lambda_lo || self.nerf.lambda_lo < 0.0 {
            return Err(Error::Config("need lambda_hi >= lambda_lo >= 0".into()));
        }
        if self.world.classes.len() < 4 {
            return Err(Error::Config("world needs at least 4 classes".into()));
        }
        if !(1..=6).contains(&self.world.captures_per_subject) {
            return Err(Error::Config("captures_per_subject must be in 1..=6".into()));
        }
        Ok(())
    }
}
