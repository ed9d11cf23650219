//! Loss composition, Adam optimization, cross-scene batch construction, and
//! the zero-shot / few-shot training protocols.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::dataset::{generate_dataset, SceneDataset, Split};
use crate::geometry::{filter_close_rays, pair_nearest_points, sample_along_ray, Ray, RayBatch};
use crate::moe::{
    diversity_loss, spatial_consistency_pair, symmetric_kl_rows, DivLossForm, MoeLayer,
};
use crate::renderer::{MoveModel, RendererConfig};
use crate::tensor::{
    gradcheck, gradcheck_params, gradcheck_params_sampled, ParamStore, Tape, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("insufficient views: need {needed}, have {available}")]
    InsufficientViews { needed: usize, available: usize },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Every knob of a run. All fields are addressable by the same key in config
/// files (`key = value`) and checkpoint headers.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    // model architecture
    pub dim: usize,
    pub ffn_hidden: usize,
    pub view_blocks: usize,
    pub ray_blocks: usize,
    pub heads: usize,
    pub experts: usize,
    pub top_k: usize,
    pub freqs_point: usize,
    pub freqs_depth: usize,
    pub passthrough_features: bool,
    // ray sampling
    pub samples_per_ray: usize,
    pub t_near: f64,
    pub t_far: f64,
    pub rays_per_step: usize,
    pub views_per_step: usize,
    /// source views offered to the model per batch
    pub source_views: usize,
    // losses
    pub lambda_div: f64,
    pub lambda_sc: f64,
    pub div_loss_form: DivLossForm,
    /// close-ray pixel threshold for the spatial consistency loss
    pub epsilon: f64,
    /// cap on close-ray pairs per step (the pair count is quadratic in rays
    /// per view; the cap keeps step cost bounded)
    pub max_pairs: usize,
    // optimization
    pub lr_features: f64,
    pub lr_transformer: f64,
    pub lr_decay_rate: f64,
    pub lr_decay_steps: u64,
    pub train_steps: u64,
    pub finetune_steps: u64,
    pub seed: u64,
    // dataset generation
    pub image_size: usize,
    pub num_views: usize,
    pub num_targets: usize,
}

impl TrainConfig {
    /// Smallest preset that still trains: the smoke-test configuration.
    pub fn tiny() -> Self {
        TrainConfig {
            dim: 32,
            ffn_hidden: 64,
            view_blocks: 2,
            ray_blocks: 2,
            heads: 4,
            experts: 4,
            top_k: 2,
            freqs_point: 6,
            freqs_depth: 6,
            passthrough_features: false,
            samples_per_ray: 32,
            t_near: 0.5,
            t_far: 6.0,
            rays_per_step: 32,
            views_per_step: 2,
            source_views: 6,
            lambda_div: 1e-3,
            lambda_sc: 1e-1,
            div_loss_form: DivLossForm::Cv2,
            epsilon: 3.0,
            max_pairs: 16,
            lr_features: 1e-3,
            lr_transformer: 5e-4,
            lr_decay_rate: 0.1,
            lr_decay_steps: 100_000,
            train_steps: 2_000,
            finetune_steps: 200,
            seed: 0,
            image_size: 16,
            num_views: 10,
            num_targets: 2,
        }
    }

    pub fn small() -> Self {
        TrainConfig {
            dim: 64,
            ffn_hidden: 128,
            view_blocks: 4,
            heads: 4,
            samples_per_ray: 64,
            rays_per_step: 512,
            views_per_step: 4,
            source_views: 6,
            epsilon: 8.0,
            max_pairs: 32,
            train_steps: 20_000,
            finetune_steps: 1_000,
            image_size: 32,
            num_views: 14,
            num_targets: 3,
            ..TrainConfig::tiny()
        }
    }

    /// Published hyperparameters; configuration-valid but far beyond desk
    /// scale, so unexercised by the test suite.
    pub fn paper() -> Self {
        TrainConfig {
            samples_per_ray: 192,
            rays_per_step: 4096,
            views_per_step: 4,
            source_views: 10,
            lambda_div: 1e-3,
            lambda_sc: 1e4,
            epsilon: 20.0,
            max_pairs: 256,
            lr_features: 1e-3,
            lr_transformer: 5e-4,
            train_steps: 250_000,
            finetune_steps: 24_000,
            image_size: 64,
            num_views: 20,
            num_targets: 4,
            ..TrainConfig::small()
        }
    }

    pub fn preset(name: &str) -> Option<TrainConfig> {
        match name {
            "tiny" => Some(TrainConfig::tiny()),
            "small" => Some(TrainConfig::small()),
            "paper" => Some(TrainConfig::paper()),
            _ => None,
        }
    }

    pub fn renderer(&self) -> RendererConfig {
        RendererConfig {
            dim: self.dim,
            ffn_hidden: self.ffn_hidden,
            view_blocks: self.view_blocks,
            ray_blocks: self.ray_blocks,
            heads: self.heads,
            experts: self.experts,
            top_k: self.top_k,
            freqs_point: self.freqs_point,
            freqs_depth: self.freqs_depth,
            passthrough_features: self.passthrough_features,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |message: &str| TrainError::Config { line: 0, message: message.to_string() };
        if self.lambda_div < 0.0 || self.lambda_sc < 0.0 {
            return Err(bad("loss weights must be nonnegative"));
        }
        if self.lr_features <= 0.0 || self.lr_transformer <= 0.0 {
            return Err(bad("learning rates must be positive"));
        }
        if self.rays_per_step == 0 || self.rays_per_step % self.views_per_step != 0 {
            return Err(bad("rays_per_step must be a positive multiple of views_per_step"));
        }
        if self.t_near <= 0.0 || self.t_far <= self.t_near {
            return Err(bad("need 0 < t_near < t_far"));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(bad("need 1 <= top_k <= experts"));
        }
        if self.dim % self.heads != 0 {
            return Err(bad("heads must divide dim"));
        }
        if self.samples_per_ray == 0 {
            return Err(bad("samples_per_ray must be positive"));
        }
        if self.epsilon <= 0.0 {
            return Err(bad("epsilon must be positive"));
        }
        if self.lr_decay_rate <= 0.0 || self.lr_decay_steps == 0 {
            return Err(bad("decay schedule must be positive"));
        }
        Ok(())
    }

    /// Sets one field by key. Unknown keys and unparsable values are errors.
    pub fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<(), TrainError> {
        let err = |message: String| TrainError::Config { line, message };
        macro_rules! set {
            ($field:ident) => {
                self.$field = value
                    .parse()
                    .map_err(|_| err(format!("unparsable value `{value}` for `{key}`")))?
            };
        }
        match key {
            "dim" => set!(dim),
            "ffn_hidden" => set!(ffn_hidden),
            "view_blocks" => set!(view_blocks),
            "ray_blocks" => set!(ray_blocks),
            "heads" => set!(heads),
            "experts" => set!(experts),
            "top_k" => set!(top_k),
            "freqs_point" => set!(freqs_point),
            "freqs_depth" => set!(freqs_depth),
            "passthrough_features" => set!(passthrough_features),
            "samples_per_ray" => set!(samples_per_ray),
            "t_near" => set!(t_near),
            "t_far" => set!(t_far),
            "rays_per_step" => set!(rays_per_step),
            "views_per_step" => set!(views_per_step),
            "source_views" => set!(source_views),
            "lambda_div" => set!(lambda_div),
            "lambda_sc" => set!(lambda_sc),
            "div_loss_form" => set!(div_loss_form),
            "epsilon" => set!(epsilon),
            "max_pairs" => set!(max_pairs),
            "lr_features" => set!(lr_features),
            "lr_transformer" => set!(lr_transformer),
            "lr_decay_rate" => set!(lr_decay_rate),
            "lr_decay_steps" => set!(lr_decay_steps),
            "train_steps" => set!(train_steps),
            "finetune_steps" => set!(finetune_steps),
            "seed" => set!(seed),
            "image_size" => set!(image_size),
            "num_views" => set!(num_views),
            "num_targets" => set!(num_targets),
            _ => return Err(err(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines (with `#` comments) on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), TrainError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(TrainError::Config {
                line: i + 1,
                message: format!("expected `key = value`, got `{raw}`"),
            })?;
            self.apply(k.trim(), v.trim(), i + 1)?;
        }
        self.validate()
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), TrainError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.apply_text(&text)
    }

    /// Every field as a `(key, value)` pair, parseable back via `apply`.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let p = |k: &str, v: String| (k.to_string(), v);
        vec![
            p("dim", self.dim.to_string()),
            p("ffn_hidden", self.ffn_hidden.to_string()),
            p("view_blocks", self.view_blocks.to_string()),
            p("ray_blocks", self.ray_blocks.to_string()),
            p("heads", self.heads.to_string()),
            p("experts", self.experts.to_string()),
            p("top_k", self.top_k.to_string()),
            p("freqs_point", self.freqs_point.to_string()),
            p("freqs_depth", self.freqs_depth.to_string()),
            p("passthrough_features", self.passthrough_features.to_string()),
            p("samples_per_ray", self.samples_per_ray.to_string()),
            p("t_near", self.t_near.to_string()),
            p("t_far", self.t_far.to_string()),
            p("rays_per_step", self.rays_per_step.to_string()),
            p("views_per_step", self.views_per_step.to_string()),
            p("source_views", self.source_views.to_string()),
            p("lambda_div", self.lambda_div.to_string()),
            p("lambda_sc", self.lambda_sc.to_string()),
            p("div_loss_form", self.div_loss_form.to_string()),
            p("epsilon", self.epsilon.to_string()),
            p("max_pairs", self.max_pairs.to_string()),
            p("lr_features", self.lr_features.to_string()),
            p("lr_transformer", self.lr_transformer.to_string()),
            p("lr_decay_rate", self.lr_decay_rate.to_string()),
            p("lr_decay_steps", self.lr_decay_steps.to_string()),
            p("train_steps", self.train_steps.to_string()),
            p("finetune_steps", self.finetune_steps.to_string()),
            p("seed", self.seed.to_string()),
            p("image_size", self.image_size.to_string()),
            p("num_views", self.num_views.to_string()),
            p("num_targets", self.num_targets.to_string()),
        ]
    }
}

/// Closed-form exponential decay: `base * rate^(step / decay_steps)`.
pub fn lr_decayed(base: f64, rate: f64, decay_steps: u64, step: u64) -> f64 {
    base * rate.powf(step as f64 / decay_steps as f64)
}

/// Adam with bias correction; one moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// completed updates (bias-correction exponent)
    pub t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> =
            store.ids().map(|id| vec![0.0; store.tensor(id).numel()]).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One update from the gradients currently in `store`; `lrs` carries the
    /// per-parameter learning rate.
    pub fn step(&mut self, store: &mut ParamStore, lrs: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (pi, id) in ids.into_iter().enumerate() {
            let grad = store.grad(id).to_vec();
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            let data = &mut store.tensor_mut(id).data;
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lrs[pi] * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// One training batch: rays from several views of one scene, with their
/// ground-truth colors and the views offered to the model as sources.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub scene_index: usize,
    pub rays: Vec<Ray>,
    pub targets: Vec<[f64; 3]>,
    /// view indices (into the dataset) used as model sources
    pub source_indices: Vec<usize>,
}

/// Per-step diagnostics.
#[derive(Debug, Clone)]
pub struct TrainStepReport {
    pub step: u64,
    pub scene_index: usize,
    pub photometric: f64,
    pub diversity: f64,
    pub spatial: f64,
    pub total: f64,
    /// per view block: mean sparse gate usage over valid tokens, sums to 1
    pub usage: Vec<Vec<f64>>,
    pub grad_norm: f64,
    pub lr_features: f64,
    pub lr_transformer: f64,
    pub close_pairs: usize,
}

/// Model, parameters, optimizer state, and the step counter — everything a
/// checkpoint round-trips.
#[derive(Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: MoveModel,
    pub store: ParamStore,
    pub opt: Adam,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Trainer, TrainError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = MoveModel::init(&mut store, &config.renderer(), &mut init_rng);
        let opt = Adam::new(&store);
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        Ok(Trainer { config, model, store, opt, rng, step: 0 })
    }

    fn lrs(&self) -> Vec<f64> {
        let c = &self.config;
        let lf = lr_decayed(c.lr_features, c.lr_decay_rate, c.lr_decay_steps, self.step);
        let lt = lr_decayed(c.lr_transformer, c.lr_decay_rate, c.lr_decay_steps, self.step);
        self.store
            .ids()
            .map(|id| if self.store.name(id).starts_with("extractor.") { lf } else { lt })
            .collect()
    }

    /// Draws a batch from `pool` views of one dataset: up to
    /// `views_per_step` distinct emitting views; the remaining pool views
    /// become sources, so at least one must stay behind.
    fn batch_from_pool(
        &mut self,
        ds: &SceneDataset,
        scene_index: usize,
        pool: &[usize],
    ) -> Result<TrainBatch, TrainError> {
        let c = self.config.clone();
        let emit_count = c.views_per_step.min(pool.len().saturating_sub(1));
        if emit_count == 0 {
            return Err(TrainError::InsufficientViews { needed: 2, available: pool.len() });
        }
        let emit_sel = rand::seq::index::sample(&mut self.rng, pool.len(), emit_count);
        let emitting: Vec<usize> = emit_sel.iter().map(|i| pool[i]).collect();
        let mut sources: Vec<usize> =
            pool.iter().copied().filter(|v| !emitting.contains(v)).collect();
        sources.truncate(c.source_views.max(1));
        let per_view = c.rays_per_step / emit_count;
        let mut rays = Vec::with_capacity(c.rays_per_step);
        let mut targets = Vec::with_capacity(c.rays_per_step);
        for &vi in &emitting {
            let view = &ds.views[vi];
            let (w, h) = (view.image.width, view.image.height);
            for _ in 0..per_view {
                let x = self.rng.gen_range(0..w);
                let y = self.rng.gen_range(0..h);
                rays.push(view.camera.pixel_ray(
                    x as f64 + 0.5,
                    y as f64 + 0.5,
                    vi,
                    c.t_near,
                    c.t_far,
                ));
                targets.push(view.image.at(x, y));
            }
        }
        Ok(TrainBatch { scene_index, rays, targets, source_indices: sources })
    }

    /// Uniformly picks a scene and draws rays from its source views.
    pub fn build_batch(&mut self, datasets: &[SceneDataset]) -> Result<TrainBatch, TrainError> {
        assert!(!datasets.is_empty(), "need at least one dataset");
        let scene_index = self.rng.gen_range(0..datasets.len());
        let ds = &datasets[scene_index];
        let pool: Vec<usize> = ds.views_in(Split::Source).map(|(i, _)| i).collect();
        self.batch_from_pool(ds, scene_index, &pool)
    }

    /// Forward, losses, backward, one Adam update.
    pub fn step_on_batch(
        &mut self,
        ds: &SceneDataset,
        batch: &TrainBatch,
    ) -> Result<TrainStepReport, TrainError> {
        let c = self.config.clone();
        let m = c.samples_per_ray;
        let layers = c.view_blocks;
        let tape = Tape::new();
        let sources: Vec<_> = batch
            .source_indices
            .iter()
            .map(|&vi| (&ds.views[vi].camera, &ds.views[vi].image))
            .collect();
        let src = self.model.extract_source_features(&tape, &self.store, &sources);
        let out = self.model.render_rays(
            &tape,
            &self.store,
            &batch.rays,
            m,
            true,
            &mut self.rng,
            &src,
        );

        let flat: Vec<f64> = batch.targets.iter().flat_map(|t| t.iter().copied()).collect();
        let target = tape.constant(&Tensor::new(vec![batch.rays.len(), 3], flat));
        let photometric = out.rgb.sub(target).square().mean_all();

        let valid_idx: Vec<usize> =
            out.valid.iter().enumerate().filter(|(_, v)| **v).map(|(i, _)| i).collect();
        let all_valid = valid_idx.len() == out.valid.len();
        let mut diversity = tape.scalar(0.0);
        if !valid_idx.is_empty() {
            for gates in &out.gates {
                let sparse =
                    if all_valid { gates.sparse } else { gates.sparse.row_gather(&valid_idx) };
                diversity = diversity.add(diversity_loss(sparse, c.div_loss_form));
            }
            diversity = diversity.scale(1.0 / layers as f64);
        }

        let mut close = filter_close_rays(&RayBatch { rays: batch.rays.clone() }, c.epsilon);
        close.truncate(c.max_pairs);
        let mut spatial = tape.scalar(0.0);
        let mut used_pairs = 0usize;
        for &(a, b) in &close {
            let ok = |r: usize| out.valid[r * m..(r + 1) * m].iter().all(|&v| v);
            if !ok(a) || !ok(b) {
                continue;
            }
            let pair_set = pair_nearest_points(&out.samples[a], &out.samples[b])
                .expect("rays always carry samples");
            for gates in &out.gates {
                let ga = gates.dense.slice_rows(a * m, m);
                let gb = gates.dense.slice_rows(b * m, m);
                spatial = spatial.add(spatial_consistency_pair(&tape, &pair_set, ga, gb));
            }
            used_pairs += 1;
        }
        if used_pairs > 0 {
            // average over pairs and layers; this normalization is a design
            // choice that interacts with lambda_sc
            spatial = spatial.scale(1.0 / (used_pairs * layers) as f64);
        }

        let total = photometric.add(diversity.scale(c.lambda_div)).add(spatial.scale(c.lambda_sc));
        match tape.backward(total) {
            Ok(()) => {}
            Err(TensorError::NonFinite(_)) => {
                return Err(self.non_finite_diagnostic(batch, &out.rgb.value().data));
            }
            Err(e) => return Err(e.into()),
        }
        let usage: Vec<Vec<f64>> = out
            .gates
            .iter()
            .map(|g| {
                let sparse =
                    if all_valid { g.sparse } else { g.sparse.row_gather(&valid_idx) };
                sparse.mean_axis0().value().data
            })
            .collect();
        let report_parts = (photometric.item(), diversity.item(), spatial.item(), total.item());

        self.store.zero_grads();
        tape.write_grads(&mut self.store);
        let grad_norm = self.store.grad_norm();
        if !grad_norm.is_finite() {
            return Err(self.non_finite_diagnostic(batch, &out.rgb.value().data));
        }
        let lrs = self.lrs();
        let (lr_features, lr_transformer) = (
            lr_decayed(c.lr_features, c.lr_decay_rate, c.lr_decay_steps, self.step),
            lr_decayed(c.lr_transformer, c.lr_decay_rate, c.lr_decay_steps, self.step),
        );
        self.opt.step(&mut self.store, &lrs);
        let report = TrainStepReport {
            step: self.step,
            scene_index: batch.scene_index,
            photometric: report_parts.0,
            diversity: report_parts.1,
            spatial: report_parts.2,
            total: report_parts.3,
            usage,
            grad_norm,
            lr_features,
            lr_transformer,
            close_pairs: used_pairs,
        };
        self.step += 1;
        Ok(report)
    }

    fn non_finite_diagnostic(&self, batch: &TrainBatch, rgb: &[f64]) -> TrainError {
        let detail = rgb
            .chunks(3)
            .position(|c| c.iter().any(|v| !v.is_finite()))
            .map(|r| {
                let ray = &batch.rays[r];
                format!(
                    "ray {r} (view {}, pixel {:.1},{:.1}) produced {:?}",
                    ray.view_id,
                    ray.pixel.0,
                    ray.pixel.1,
                    &rgb[r * 3..r * 3 + 3]
                )
            })
            .unwrap_or_else(|| "loss non-finite but all ray colors finite".to_string());
        TrainError::NonFiniteLoss { step: self.step, detail }
    }

    pub fn train_step(&mut self, datasets: &[SceneDataset]) -> Result<TrainStepReport, TrainError> {
        let batch = self.build_batch(datasets)?;
        let ds = &datasets[batch.scene_index];
        self.step_on_batch(ds, &batch)
    }

    /// Few-shot adaptation: only the first `shots` source views of the scene
    /// drive losses (they are both the emitting views and the model sources).
    /// Zero steps leaves the model bit-exactly unchanged.
    pub fn finetune_few_shot(
        &mut self,
        ds: &SceneDataset,
        shots: usize,
        steps: u64,
    ) -> Result<Vec<TrainStepReport>, TrainError> {
        let pool = few_shot_views(ds, shots)?;
        let mut reports = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let batch = self.batch_from_pool(ds, 0, &pool)?;
            reports.push(self.step_on_batch(ds, &batch)?);
        }
        Ok(reports)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        let mut header = vec![
            ("step".to_string(), self.step.to_string()),
            ("opt.t".to_string(), self.opt.t.to_string()),
            (
                "rng.seed".to_string(),
                self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            ),
            ("rng.word_pos".to_string(), self.rng.get_word_pos().to_string()),
            ("rng.stream".to_string(), self.rng.get_stream().to_string()),
        ];
        for (k, v) in self.config.to_pairs() {
            header.push((format!("cfg.{k}"), v));
        }
        let mut tensors = Vec::new();
        for id in self.store.ids() {
            tensors.push((self.store.name(id).to_string(), self.store.tensor(id).clone()));
        }
        for (pi, id) in self.store.ids().enumerate() {
            let name = self.store.name(id).to_string();
            let shape = self.store.tensor(id).shape.clone();
            tensors.push((format!("opt.m.{name}"), Tensor::new(shape.clone(), self.opt.m[pi].clone())));
            tensors.push((format!("opt.v.{name}"), Tensor::new(shape, self.opt.v[pi].clone())));
        }
        Checkpoint { header, tensors }.save(path)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Trainer, TrainError> {
        let ck = Checkpoint::load(path)?;
        let mut config = TrainConfig::tiny();
        for (k, v) in &ck.header {
            if let Some(key) = k.strip_prefix("cfg.") {
                config.apply(key, v, 0)?;
            }
        }
        config.validate()?;
        let mut trainer = Trainer::new(config)?;
        trainer.step = ck.get_parsed("step")?;
        trainer.opt.t = ck.get_parsed("opt.t")?;
        let seed_hex: String = ck.get_parsed("rng.seed")?;
        if seed_hex.len() != 64 {
            return Err(CheckpointError::BadHeader("rng.seed must be 32 bytes hex".into()).into());
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&seed_hex[i * 2..i * 2 + 2], 16)
                .map_err(|_| CheckpointError::BadHeader("bad rng.seed hex".into()))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(ck.get_parsed("rng.stream")?);
        rng.set_word_pos(ck.get_parsed("rng.word_pos")?);
        trainer.rng = rng;
        let ids: Vec<_> = trainer.store.ids().collect();
        for (pi, id) in ids.into_iter().enumerate() {
            let name = trainer.store.name(id).to_string();
            let shape = trainer.store.tensor(id).shape.clone();
            let restore = |label: String| -> Result<Tensor, TrainError> {
                let t = ck
                    .tensor(&label)
                    .ok_or_else(|| CheckpointError::Incompatible(format!("missing tensor `{label}`")))?;
                if t.shape != shape {
                    return Err(CheckpointError::Incompatible(format!(
                        "tensor `{label}` has shape {:?}, expected {shape:?}",
                        t.shape
                    ))
                    .into());
                }
                Ok(t.clone())
            };
            let weights = restore(name.clone())?;
            let m = restore(format!("opt.m.{name}"))?;
            let v = restore(format!("opt.v.{name}"))?;
            *trainer.store.tensor_mut(id) = weights;
            trainer.opt.m[pi] = m.data;
            trainer.opt.v[pi] = v.data;
        }
        Ok(trainer)
    }
}

/// The finetune view set: the first `shots` source views of the scene.
pub fn few_shot_views(ds: &SceneDataset, shots: usize) -> Result<Vec<usize>, TrainError> {
    let sources: Vec<usize> = ds.views_in(Split::Source).map(|(i, _)| i).collect();
    if shots > sources.len() || shots < 2 {
        return Err(TrainError::InsufficientViews { needed: shots.max(2), available: sources.len() });
    }
    Ok(sources[..shots].to_vec())
}

/// One entry of the gradient audit: the largest relative error between the
/// analytic gradient and central differences over the probed coordinates.
#[derive(Debug, Clone)]
pub struct AuditCheck {
    pub name: &'static str,
    pub rel_err: f64,
}

/// The audit pass threshold on relative error.
pub const AUDIT_TOLERANCE: f64 = 1e-4;

impl AuditCheck {
    pub fn passed(&self) -> bool {
        self.rel_err < AUDIT_TOLERANCE
    }
}

/// Verifies the analytic gradients of every trained path against central
/// finite differences: both diversity-loss forms, the symmetric KL, the
/// spatial-consistency loss, the sparse MoE forward (including the permanent
/// expert), and the full render-to-MSE pipeline with the architecture taken
/// from `config`.
///
/// Loss inputs that must be probability rows are produced by a softmax inside
/// the probed function, so finite-difference perturbations stay on the
/// simplex. The full-pipeline check probes a strided sample of coordinates in
/// every parameter tensor; the smaller checks probe every coordinate.
pub fn gradient_audit(config: &TrainConfig) -> Result<Vec<AuditCheck>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let e = config.experts;
    let h = 1e-5;
    let mut checks = Vec::new();
    fn logits(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    let x = logits(&mut rng, 6, e);
    checks.push(AuditCheck {
        name: "diversity-cv2",
        rel_err: gradcheck(|_, x| diversity_loss(x.softmax_rows(), DivLossForm::Cv2), &x, h)?,
    });
    checks.push(AuditCheck {
        name: "diversity-paper-literal",
        rel_err: gradcheck(
            |_, x| diversity_loss(x.softmax_rows(), DivLossForm::PaperLiteral),
            &x,
            h,
        )?,
    });

    let x = logits(&mut rng, 2, e);
    checks.push(AuditCheck {
        name: "symmetric-kl",
        rel_err: gradcheck(
            |_, x| {
                let p = x.slice_rows(0, 1).softmax_rows();
                let q = x.slice_rows(1, 1).softmax_rows();
                symmetric_kl_rows(p, q).sum_all()
            },
            &x,
            h,
        )?,
    });

    // two nearby rays with deterministic sample points
    let m = config.samples_per_ray.min(8);
    let cam = crate::geometry::Camera::look_at(
        [0.0, 0.0, -4.0].into(),
        [0.0, 0.0, 0.0].into(),
        [0.0, 1.0, 0.0].into(),
        8.0,
        8,
        8,
    );
    let ray_a = cam.pixel_ray(4.0, 4.0, 0, config.t_near, config.t_far);
    let ray_b = cam.pixel_ray(4.5, 4.0, 0, config.t_near, config.t_far);
    let mut no_jitter = rand::rngs::mock::StepRng::new(0, 0);
    let pts_a = sample_along_ray(&ray_a, m, false, &mut no_jitter);
    let pts_b = sample_along_ray(&ray_b, m, false, &mut no_jitter);
    let pair_set = pair_nearest_points(&pts_a, &pts_b).expect("rays carry samples");
    let x = logits(&mut rng, 2 * m, e);
    checks.push(AuditCheck {
        name: "spatial-consistency",
        rel_err: gradcheck(
            |tape, x| {
                let ga = x.slice_rows(0, m).softmax_rows();
                let gb = x.slice_rows(m, m).softmax_rows();
                spatial_consistency_pair(tape, &pair_set, ga, gb)
            },
            &x,
            h,
        )?,
    });

    let moe_dim = 6;
    let mut moe_store = ParamStore::new();
    let layer =
        MoeLayer::init(&mut moe_store, "moe", moe_dim, 8, e, config.top_k, &mut rng);
    let tokens = logits(&mut rng, 5, moe_dim);
    checks.push(AuditCheck {
        name: "moe-forward",
        rel_err: gradcheck_params(
            &mut moe_store,
            |tape, store| {
                let x = tape.constant(&tokens);
                layer.forward(tape, store, x).0.square().mean_all()
            },
            h,
        )?,
    });

    // full pipeline: conv features, epipolar aggregation, MoE view blocks,
    // ray transformer, pooled depth, RGB head, photometric MSE
    let ds = generate_dataset(config.seed, 3, 1, 6, 6);
    let sources: Vec<_> = ds
        .views_in(Split::Source)
        .map(|(_, v)| (&v.camera, &v.image))
        .collect();
    let target = ds.views_in(Split::Target).next().expect("one target view").1;
    let rays: Vec<Ray> = [(2.5, 2.5), (4.5, 3.5)]
        .iter()
        .map(|&(u, v)| target.camera.pixel_ray(u, v, 0, config.t_near, config.t_far))
        .collect();
    let truth: Vec<f64> = [(2usize, 2usize), (4, 3)]
        .iter()
        .flat_map(|&(x, y)| target.image.at(x, y))
        .collect();
    let mut store = ParamStore::new();
    let model = MoveModel::init(&mut store, &config.renderer(), &mut rng);
    let samples = config.samples_per_ray.min(3);
    checks.push(AuditCheck {
        name: "render-mse",
        rel_err: gradcheck_params_sampled(
            &mut store,
            |tape, store| {
                let src = model.extract_source_features(tape, store, &sources);
                let mut no_jitter = rand::rngs::mock::StepRng::new(0, 0);
                let out =
                    model.render_rays(tape, store, &rays, samples, false, &mut no_jitter, &src);
                let t = tape.constant(&Tensor::new(vec![rays.len(), 3], truth.clone()));
                out.rgb.sub(t).square().mean_all()
            },
            h,
            6,
        )?,
    });
    Ok(checks)
}

#[cfg(test)]
mod tests;
