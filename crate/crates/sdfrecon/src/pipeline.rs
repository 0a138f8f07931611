//! Training orchestration: batched rendering of ray batches, loss
//! assembly, the hand-rolled backward pass into parameter gradients,
//! optimizer stepping, checkpointing, mesh extraction, Chamfer evaluation,
//! and diagnostic map rendering.

use crate::features::{
    extract_features, rgb_to_gray, similarity, DescriptorConfig, FeatureMap, Similarity,
};
use crate::field::adam::{apply_gradients, AdamState, OptimConfig};
use crate::field::{FieldConfig, FieldError, FieldGrads, ImplicitField};
use crate::geometry::{pixel_ray, project, ray_sphere_bounds, Projection, Ray};
use crate::io::{Checkpoint, IoError, SceneData, SceneDescription};
use crate::losses::{
    calibrate_depth, depth_confidence, depth_loss, depth_loss_backward, eikonal_backward,
    eikonal_loss, extract_patch, feature_consistency_coeffs, feature_consistency_loss,
    plane_homography, ssim, total_loss, warp_patch, DepthMode, DepthPrior, FeatureMode, Image,
    LossError, LossReport, LossWarnings, SparseKeypoints, View,
};
use crate::mesh::{chamfer_distance, extract_mesh, ChamferResult, TriangleMesh};
use crate::rendering::{
    compute_weights, depth_backward, importance_distances, render, sdf_to_alpha,
    sdf_to_alpha_grad, stratified_distances, weights_backward, RaySamples, RenderResult,
    WEIGHT_SUM_VALID,
};
use crate::synth::{scene_normal, scene_sdf, AnalyticScene};
use nalgebra::{Vector2, Vector3};
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Weight of the free-space carving term on rays without a prior depth.
pub const FREE_SPACE_WEIGHT: f64 = 0.5;

/// Uniform volume points added to the eikonal term each step.
pub const UNIFORM_EIKONAL_SAMPLES: usize = 128;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error("scene: {0}")]
    BadScene(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("checkpoint does not match this configuration: {0}")]
    CheckpointMismatch(String),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub rays_per_batch: usize,
    /// Depth-loss weight in the total objective.
    pub alpha: f64,
    /// Eikonal weight in the total objective.
    pub beta: f64,
    /// Occlusion-mask confidence threshold.
    pub tau: f64,
    pub patch_start_fraction: f64,
    pub mask_warmup_fraction: f64,
    pub feature_mode: FeatureMode,
    pub depth_mode: DepthMode,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub n_coarse: usize,
    pub n_importance: usize,
    pub field: FieldConfig,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 5000,
            rays_per_batch: 64,
            alpha: 0.5,
            beta: 0.1,
            tau: 0.0,
            patch_start_fraction: 0.2,
            // long enough for the color terms to lock in coarse geometry
            // before the reprojection gate takes over
            mask_warmup_fraction: 0.1,
            feature_mode: FeatureMode::Accumulate,
            depth_mode: DepthMode::Uncertainty,
            seed: 0,
            checkpoint_every: 1000,
            log_every: 50,
            n_coarse: 24,
            n_importance: 12,
            field: FieldConfig::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(0.0..1.0).contains(&self.patch_start_fraction) {
            return Err(PipelineError::BadConfig(format!(
                "patch_start_fraction must be in [0,1), got {}",
                self.patch_start_fraction
            )));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(PipelineError::BadConfig("alpha and beta must be non-negative".into()));
        }
        if self.total_steps == 0 || self.rays_per_batch == 0 {
            return Err(PipelineError::BadConfig("steps and rays must be positive".into()));
        }
        if self.n_coarse < 2 {
            return Err(PipelineError::BadConfig("need at least 2 coarse samples".into()));
        }
        Ok(())
    }

    fn similarity_metric(&self) -> Similarity {
        match self.feature_mode {
            FeatureMode::L1 => Similarity::NegL1,
            FeatureMode::L2 => Similarity::NegL2,
            _ => Similarity::Cosine,
        }
    }

    pub fn patch_start_step(&self) -> u64 {
        (self.patch_start_fraction * self.total_steps as f64).floor() as u64
    }

    pub fn mask_warmup_steps(&self) -> u64 {
        (self.mask_warmup_fraction * self.total_steps as f64).ceil() as u64
    }
}

/// One input view prepared for training.
pub struct TrainView {
    pub view: View,
    pub features: FeatureMap,
    pub prior: Option<DepthPrior>,
    pub keypoints: SparseKeypoints,
}

/// Live training state.
pub struct Trainer {
    pub config: TrainConfig,
    pub field: ImplicitField,
    pub adam: AdamState,
    pub step: u64,
    pub views: Vec<TrainView>,
    pub depth_enabled: bool,
    /// Ablation switch: when false the feature-consistency term is
    /// dropped from the objective entirely.
    pub feature_loss_enabled: bool,
    pub warnings: LossWarnings,
    /// Set when calibration fell back to (1,0) on any view.
    pub degenerate_calibration: bool,
}

impl Trainer {
    pub fn new(scene: &SceneData, config: TrainConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        if scene.views.len() < 2 {
            return Err(PipelineError::BadScene(format!(
                "need at least 2 views, got {}",
                scene.views.len()
            )));
        }
        // per-view keypoint observations from the world-space records
        let mut per_view: Vec<SparseKeypoints> = vec![SparseKeypoints::default(); scene.views.len()];
        for record in &scene.keypoints {
            for &v in &record.visible_views {
                if v >= scene.views.len() {
                    continue;
                }
                let cam = &scene.views[v].camera;
                if let Projection::Pixel(uv) = project(&record.position, cam) {
                    if cam.contains_pixel(&uv) {
                        let depth = (record.position - cam.center()).norm();
                        per_view[v].entries.push((uv, depth));
                    }
                }
            }
        }
        let mut degenerate_calibration = false;
        let mut views = Vec::with_capacity(scene.views.len());
        for (i, sv) in scene.views.iter().enumerate() {
            let features = match &sv.feature_map {
                Some(map) => map.clone(),
                None => {
                    let gray = rgb_to_gray(&sv.image.data, sv.image.width, sv.image.height);
                    extract_features(
                        &gray,
                        sv.image.width,
                        sv.image.height,
                        &DescriptorConfig::default(),
                    )
                    .map_err(|e| PipelineError::BadScene(format!("view {i} features: {e}")))?
                }
            };
            let prior = sv.depth_prior.as_ref().map(|(map, w, h)| {
                let mut prior = DepthPrior::new(map.clone(), *w, *h);
                let cal = calibrate_depth(&prior, &per_view[i]);
                prior.a = cal.a;
                prior.b = cal.b;
                prior.degenerate = cal.degenerate;
                if cal.degenerate {
                    degenerate_calibration = true;
                    log::warn!("view {i}: depth calibration degenerate, using identity");
                }
                prior
            });
            views.push(TrainView {
                view: View { camera: sv.camera.clone(), image: sv.image.clone() },
                features,
                prior,
                keypoints: per_view[i].clone(),
            });
        }
        let depth_enabled = views.iter().any(|v| v.prior.is_some());
        if !depth_enabled {
            log::info!("no depth priors found: depth loss disabled");
        }
        let field = ImplicitField::new(config.field.clone(), config.seed);
        let mut optim = config.optim.clone();
        optim.total_steps = config.total_steps;
        let adam = AdamState::new(field.n_params(), optim);
        Ok(Trainer {
            config,
            field,
            adam,
            step: 0,
            views,
            depth_enabled,
            feature_loss_enabled: true,
            warnings: LossWarnings::default(),
            degenerate_calibration,
        })
    }

    /// Captures a checkpoint. Quantizing to the stored f32 precision is
    /// part of the training semantics: the live state is rounded to
    /// exactly what the file holds, so resuming a saved run and continuing
    /// an unsaved one produce identical trajectories.
    pub fn checkpoint(&mut self) -> Checkpoint {
        let flat: Vec<f32> = self.field.flatten_params().iter().map(|&v| v as f32).collect();
        let back: Vec<f64> = flat.iter().map(|&v| v as f64).collect();
        self.field.set_params(&back);
        let m32: Vec<f32> = self.adam.m.iter().map(|&v| v as f32).collect();
        let v32: Vec<f32> = self.adam.v.iter().map(|&v| v as f32).collect();
        self.adam.m = m32.iter().map(|&v| v as f64).collect();
        self.adam.v = v32.iter().map(|&v| v as f64).collect();

        let mut tensors = Vec::new();
        let mut offset = 0usize;
        let layers = self.field.sdf.layers.iter().enumerate().map(|(i, l)| (format!("sdf.{i}"), l))
            .chain(
                self.field.color.layers.iter().enumerate().map(|(i, l)| (format!("color.{i}"), l)),
            );
        for (name, layer) in layers {
            let (rows, cols) = layer.w.dim();
            let wn = rows * cols;
            tensors.push((format!("{name}.w"), vec![rows, cols], flat[offset..offset + wn].to_vec()));
            offset += wn;
            tensors.push((format!("{name}.b"), vec![rows], flat[offset..offset + rows].to_vec()));
            offset += rows;
        }
        tensors.push(("log_s".into(), vec![1], vec![flat[offset]]));
        offset += 1;
        assert_eq!(offset, flat.len());
        tensors.push(("adam.m".into(), vec![m32.len()], m32));
        tensors.push(("adam.v".into(), vec![v32.len()], v32));
        Checkpoint { seed: self.config.seed, step: self.step, tensors }
    }

    /// Restores a trainer from a checkpoint taken with the same scene and
    /// configuration.
    pub fn from_checkpoint(
        scene: &SceneData,
        mut config: TrainConfig,
        ckpt: &Checkpoint,
    ) -> Result<Self, PipelineError> {
        config.seed = ckpt.seed;
        let mut trainer = Trainer::new(scene, config)?;
        let n = trainer.field.n_params();
        let mut flat = Vec::with_capacity(n);
        for (name, _, data) in &ckpt.tensors {
            if name == "adam.m" || name == "adam.v" {
                continue;
            }
            flat.extend(data.iter().map(|&v| v as f64));
        }
        if flat.len() != n {
            return Err(PipelineError::CheckpointMismatch(format!(
                "checkpoint holds {} parameters, field needs {n}",
                flat.len()
            )));
        }
        trainer.field.set_params(&flat);
        let moment = |name: &str| -> Result<Vec<f64>, PipelineError> {
            let (_, _, data) = ckpt
                .tensor(name)
                .ok_or_else(|| PipelineError::CheckpointMismatch(format!("missing {name}")))?;
            if data.len() != n {
                return Err(PipelineError::CheckpointMismatch(format!("bad {name} length")));
            }
            Ok(data.iter().map(|&v| v as f64).collect())
        };
        trainer.adam.m = moment("adam.m")?;
        trainer.adam.v = moment("adam.v")?;
        trainer.adam.step = ckpt.step;
        trainer.step = ckpt.step;
        Ok(trainer)
    }

    /// Renders the along-ray depth at an arbitrary pixel of `view` with
    /// deterministic midpoint sampling (no importance pass); used for the
    /// auxiliary source-view renders behind depth confidence.
    /// Deterministic two-pass depth render of one source-view pixel,
    /// used by the reprojection confidence gate.
    pub fn aux_depth(&self, view: usize, uv: &Vector2<f64>) -> Option<f64> {
        let cam = &self.views[view].view.camera;
        let ray = pixel_ray(cam, uv, 0.0, 0.0);
        let (near, far) = ray_bounds(&ray);
        let n = self.config.n_coarse;
        let distances: Vec<f64> =
            (0..n).map(|i| near + (i as f64 + 0.5) / n as f64 * (far - near)).collect();
        let samples = RaySamples::from_distances(&Ray { near, far, ..ray }, distances);
        let points = points_matrix(&samples.points);
        let sdf = self.field.eval_sdf(&points);
        let alphas = sdf_to_alpha(sdf.as_slice().unwrap(), self.field.s());
        let weights = compute_weights(&alphas);
        let wsum: f64 = weights.iter().sum();
        if wsum <= WEIGHT_SUM_VALID {
            return None;
        }
        let num: f64 = weights.iter().zip(&samples.distances).map(|(w, t)| w * t).sum();
        let coarse = num / wsum;
        // refine around the coarse estimate: the coarse spacing is far
        // wider than the logistic transition, and the round-trip gate
        // needs sub-pixel depth accuracy
        let half = 2.0 * (far - near) / n as f64;
        let lo = (coarse - half).max(near);
        let hi = (coarse + half).min(far);
        let fine: Vec<f64> =
            (0..n).map(|i| lo + (i as f64 + 0.5) / n as f64 * (hi - lo)).collect();
        let fsamples = RaySamples::from_distances(&Ray { near, far, ..ray }, fine);
        let fsdf = self.field.eval_sdf(&points_matrix(&fsamples.points));
        let falphas = sdf_to_alpha(fsdf.as_slice().unwrap(), self.field.s());
        let fweights = compute_weights(&falphas);
        let fwsum: f64 = fweights.iter().sum();
        if fwsum <= WEIGHT_SUM_VALID {
            return Some(coarse);
        }
        let fnum: f64 = fweights.iter().zip(&fsamples.distances).map(|(w, t)| w * t).sum();
        Some(fnum / fwsum)
    }

    /// Patch-warping color term for one ray at hypothesis depth `d`:
    /// sum over source views of (1 - SSIM), plus how many patches were
    /// usable. Mirrors the batch color loss exactly.
    fn patch_term(
        &self,
        ray: &Ray,
        pixel: &Vector2<f64>,
        normal: &Vector3<f64>,
        d: f64,
        ref_view: usize,
        p_ref: &[f64],
        src_mask: &[bool],
    ) -> (f64, usize) {
        let surface = ray.at(d);
        let mut sum = 0.0;
        let mut count = 0;
        let mut si = 0;
        for (s, tv) in self.views.iter().enumerate() {
            if s == ref_view {
                continue;
            }
            let open = src_mask[si];
            si += 1;
            if !open {
                continue;
            }
            let warped = plane_homography(
                &self.views[ref_view].view.camera,
                &tv.view.camera,
                &surface,
                normal,
            )
            .and_then(|h| warp_patch(&tv.view.image, &h, pixel));
            if let Some(p_warp) = warped {
                sum += 1.0 - ssim(p_ref, &p_warp);
                count += 1;
            }
        }
        (sum, count)
    }

    /// Similarity of the reference feature against the source feature at
    /// the projection of `point`, 0 when out of view.
    fn source_similarity(
        &self,
        metric: Similarity,
        ref_feat: &[f64],
        src: usize,
        point: &Vector3<f64>,
    ) -> f64 {
        let cam = &self.views[src].view.camera;
        let Projection::Pixel(uv) = project(point, cam) else {
            return 0.0;
        };
        match self.views[src].features.sample_image_pixel(&uv) {
            Some(f) => similarity(metric, ref_feat, &f),
            None => 0.0,
        }
    }

    /// One optimization step; deterministic for fixed (seed, step).
    pub fn train_step(&mut self) -> Result<LossReport, PipelineError> {
        let (report, grads) = self.forward_backward()?;
        apply_gradients(&mut self.field, &grads, &mut self.adam)?;
        self.step += 1;
        Ok(report)
    }

    /// Loss and assembled parameter gradients for the current step's batch,
    /// without touching optimizer state. Deterministic for fixed
    /// (seed, step).
    pub fn forward_backward(&mut self) -> Result<(LossReport, FieldGrads), PipelineError> {
        let step = self.step;
        let cfg_alpha = self.config.alpha;
        let cfg_beta = self.config.beta;
        let n_rays = self.config.rays_per_batch;
        let metric = self.config.similarity_metric();
        let patch_enabled = step >= self.config.patch_start_step();
        let in_warmup = step < self.config.mask_warmup_steps();

        let mut batch_rng = stream_rng(self.config.seed, step, 0);
        let ref_idx = batch_rng.gen_range(0..self.views.len());
        let (ref_cam, ref_image) = {
            let tv = &self.views[ref_idx];
            (tv.view.camera.clone(), tv.view.image.clone())
        };
        let src_indices: Vec<usize> =
            (0..self.views.len()).filter(|&i| i != ref_idx).collect();

        // --- ray setup and coarse pass -----------------------------------
        let mut pixels = Vec::with_capacity(n_rays);
        let mut rays = Vec::with_capacity(n_rays);
        for _ in 0..n_rays {
            let x = batch_rng.gen_range(0..ref_cam.width);
            let y = batch_rng.gen_range(0..ref_cam.height);
            let uv = Vector2::new(x as f64, y as f64);
            let ray = pixel_ray(&ref_cam, &uv, 0.0, 0.0);
            let (near, far) = ray_bounds(&ray);
            pixels.push(uv);
            rays.push(Ray { near, far, ..ray });
        }
        let mut ray_rngs: Vec<ChaCha8Rng> = (0..n_rays)
            .map(|r| stream_rng(self.config.seed, step, 1 + r as u64))
            .collect();
        let coarse: Vec<Vec<f64>> = (0..n_rays)
            .map(|r| {
                stratified_distances(
                    rays[r].near,
                    rays[r].far,
                    self.config.n_coarse,
                    &mut ray_rngs[r],
                )
            })
            .collect();
        let coarse_flat: Vec<Vector3<f64>> = (0..n_rays)
            .flat_map(|r| {
                let ray = rays[r];
                coarse[r].iter().map(move |&t| ray.at(t))
            })
            .collect();
        let coarse_sdf = self.field.eval_sdf(&points_matrix(&coarse_flat));
        let s = self.field.s();
        let samples: Vec<RaySamples> = (0..n_rays)
            .map(|r| {
                let vals: Vec<f64> = coarse_sdf
                    .slice(s![r * self.config.n_coarse..(r + 1) * self.config.n_coarse])
                    .to_vec();
                let alphas = sdf_to_alpha(&vals, s);
                let weights = compute_weights(&alphas);
                let extra = importance_distances(
                    &coarse[r],
                    &weights,
                    self.config.n_importance,
                    &mut ray_rngs[r],
                );
                let mut merged = coarse[r].clone();
                merged.extend(extra);
                merged.sort_by(f64::total_cmp);
                merged.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
                RaySamples::from_distances(&rays[r], merged)
            })
            .collect();

        // --- batched dual forward over all merged samples ----------------
        let ranges: Vec<(usize, usize)> = {
            let mut out = Vec::with_capacity(n_rays);
            let mut start = 0;
            for smp in &samples {
                out.push((start, smp.len()));
                start += smp.len();
            }
            out
        };
        let total: usize = ranges.last().map(|&(s0, l)| s0 + l).unwrap_or(0);
        let all_points: Vec<Vector3<f64>> =
            samples.iter().flat_map(|smp| smp.points.iter().copied()).collect();
        let points = points_matrix(&all_points);
        let mut view_dirs = Array2::zeros((total, 3));
        for (r, &(start, len)) in ranges.iter().enumerate() {
            for j in 0..len {
                for k in 0..3 {
                    view_dirs[(start + j, k)] = rays[r].direction[k];
                }
            }
        }
        let (out, jout, trunk_cache) = self.field.sdf.forward_dual(&points);
        let feats = out.slice(s![.., 1..]).to_owned();
        let mut gradients = Vec::with_capacity(total);
        let mut normals_mat = Array2::zeros((total, 3));
        for i in 0..total {
            let g = Vector3::new(jout[(i, 0)], jout[(total + i, 0)], jout[(2 * total + i, 0)]);
            gradients.push(g);
            let u = g / g.norm().max(1e-12);
            for k in 0..3 {
                normals_mat[(i, k)] = u[k];
            }
        }
        let color_input =
            self.field.color.assemble_input(&points, &view_dirs, &normals_mat, &feats);
        let (rgb, color_cache) = self.field.color.forward(&color_input);

        // --- per-ray rendering -------------------------------------------
        let ref_feats: Vec<Option<Vec<f64>>> = pixels
            .iter()
            .map(|uv| self.views[ref_idx].features.sample_image_pixel(uv))
            .collect();
        let mut alpha_stencils = Vec::with_capacity(n_rays);
        let mut renders: Vec<RenderResult> = Vec::with_capacity(n_rays);
        let mut sims_per_ray: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_rays);
        for (r, &(start, len)) in ranges.iter().enumerate() {
            let vals: Vec<f64> = (0..len).map(|j| out[(start + j, 0)]).collect();
            let stencil = sdf_to_alpha_grad(&vals, s);
            let weights = compute_weights(&stencil.0);
            let nsec = len - 1;
            let colors: Vec<Vector3<f64>> = (0..nsec)
                .map(|j| {
                    Vector3::new(rgb[(start + j, 0)], rgb[(start + j, 1)], rgb[(start + j, 2)])
                })
                .collect();
            let sims: Vec<Vec<f64>> = src_indices
                .iter()
                .map(|&src| {
                    (0..nsec)
                        .map(|j| match &ref_feats[r] {
                            Some(f) => self.source_similarity(
                                metric,
                                f,
                                src,
                                &samples[r].points[j],
                            ),
                            None => 0.0,
                        })
                        .collect()
                })
                .collect();
            renders.push(render(&weights, &colors, &samples[r].distances[..nsec], &sims));
            sims_per_ray.push(sims);
            alpha_stencils.push(stencil);
        }

        // --- confidence, uncertainty, masks ------------------------------
        // Rays whose prior lookup fails saw no surface; they get the
        // free-space carving term below instead of the cross-view terms.
        // Keeping them out of the mask matters: the accumulated feature
        // term rewards opacity wherever reference and source features
        // agree, and on empty background it would inflate the field.
        let ref_prior = self.views[ref_idx].prior.clone();
        let free_rays: Vec<bool> = match &ref_prior {
            Some(prior) => {
                (0..n_rays).map(|r| prior.sample(&pixels[r]).is_none()).collect()
            }
            None => vec![false; n_rays],
        };
        // one mask per (ray, source) pair, shared by the feature and
        // patch terms; the per-ray confidence reported (and feeding the
        // depth uncertainty) is the minimum over sources
        let n_src = src_indices.len();
        let mut confidence = vec![0.0f64; n_rays];
        let mut uncertainty = vec![1.0f64; n_rays];
        let mut masks: Vec<Vec<bool>> = vec![vec![false; n_src]; n_rays];
        for r in 0..n_rays {
            if free_rays[r] {
                continue;
            }
            if in_warmup {
                masks[r] = vec![true; n_src];
                continue;
            }
            if !renders[r].depth_valid() {
                continue;
            }
            let mut c_min = f64::INFINITY;
            for (si, &src) in src_indices.iter().enumerate() {
                let src_fn =
                    |uv: &Vector2<f64>| -> Option<f64> { self.aux_depth(src, uv) };
                let (c, _, open) = depth_confidence(
                    &pixels[r],
                    renders[r].rendered_depth,
                    &ref_cam,
                    &self.views[src].view.camera,
                    &src_fn,
                    self.config.tau,
                );
                masks[r][si] = open;
                c_min = c_min.min(c);
            }
            if c_min.is_finite() {
                confidence[r] = c_min;
                uncertainty[r] = 1.0 - c_min;
            }
        }

        // --- losses -------------------------------------------------------
        let surface_points: Vec<Vector3<f64>> =
            (0..n_rays).map(|r| rays[r].at(renders[r].rendered_depth)).collect();
        let surface_sims: Vec<Vec<f64>> = (0..n_rays)
            .map(|r| {
                src_indices
                    .iter()
                    .map(|&src| match &ref_feats[r] {
                        Some(f) => {
                            self.source_similarity(metric, f, src, &surface_points[r])
                        }
                        None => 0.0,
                    })
                    .collect()
            })
            .collect();
        let l_feat = if self.feature_loss_enabled {
            feature_consistency_loss(
                &renders,
                Some(&surface_sims),
                &masks,
                self.config.feature_mode,
                &mut self.warnings,
            )
        } else {
            0.0
        };

        let rendered_depths: Vec<f64> = renders.iter().map(|r| r.rendered_depth).collect();
        let depth_valid: Vec<bool> = renders.iter().map(|r| r.depth_valid()).collect();
        let (l_depth, depth_grad) = match (&ref_prior, self.depth_enabled) {
            (Some(prior), true) => (
                depth_loss(
                    &rendered_depths,
                    &depth_valid,
                    &pixels,
                    prior,
                    &uncertainty,
                    self.config.depth_mode,
                ),
                depth_loss_backward(
                    &rendered_depths,
                    &depth_valid,
                    &pixels,
                    prior,
                    &uncertainty,
                    self.config.depth_mode,
                ),
            ),
            _ => (0.0, vec![0.0; n_rays]),
        };

        // color terms computed per ray so the patch term can be
        // re-evaluated at perturbed depths for its depth derivative
        let mut l_pixel_sum = 0.0;
        let mut pixel_count = 0usize;
        let mut pixel_adjs: Vec<Option<Vector3<f64>>> = vec![None; n_rays];
        let mut patch_sum = 0.0;
        let mut patch_count = 0usize;
        let mut patch_refs: Vec<Option<[f64; crate::losses::PATCH_LEN]>> = vec![None; n_rays];
        let surface_normals: Vec<Vector3<f64>> = (0..n_rays)
            .map(|r| {
                // normal at the rendered surface point: weighted sample normal
                let (start, len) = ranges[r];
                let mut n = Vector3::zeros();
                for j in 0..len - 1 {
                    n += renders[r].weights[j]
                        * Vector3::new(
                            normals_mat[(start + j, 0)],
                            normals_mat[(start + j, 1)],
                            normals_mat[(start + j, 2)],
                        );
                }
                let norm = n.norm();
                if norm > 1e-9 {
                    n / norm
                } else {
                    -rays[r].direction
                }
            })
            .collect();
        // The pixel term is single-view, so the cross-view occlusion mask
        // does not apply to it; it stays on for every ray. Gating it too
        // leaves low-confidence rays with no appearance supervision at all,
        // and the optimization then collapses into an all-inside field that
        // renders plausible depths from transmittance noise while no loss
        // can see it.
        for r in 0..n_rays {
            {
                let gt = ref_image.pixel(pixels[r].x as usize, pixels[r].y as usize);
                let diff = renders[r].rendered_color - gt;
                l_pixel_sum += (diff.x.abs() + diff.y.abs() + diff.z.abs()) / 3.0;
                pixel_count += 1;
                pixel_adjs[r] = Some(Vector3::new(
                    signum0(diff.x),
                    signum0(diff.y),
                    signum0(diff.z),
                ));
            }
            if patch_enabled && masks[r].iter().any(|&m| m) && renders[r].depth_valid() {
                match extract_patch(&ref_image, &pixels[r]) {
                    Some(p_ref) => {
                        let (sum, count) = self.patch_term(
                            &rays[r],
                            &pixels[r],
                            &surface_normals[r],
                            renders[r].rendered_depth,
                            ref_idx,
                            &p_ref,
                            &masks[r],
                        );
                        patch_sum += sum;
                        patch_count += count;
                        let open = masks[r].iter().filter(|&&m| m).count();
                        self.warnings.skipped_patches += open - count;
                        patch_refs[r] = Some(p_ref);
                    }
                    None => {
                        self.warnings.skipped_patches +=
                            masks[r].iter().filter(|&&m| m).count()
                    }
                }
            }
        }
        let l_pixel = if pixel_count == 0 { 0.0 } else { l_pixel_sum / pixel_count as f64 };
        let l_patch = if patch_count == 0 { 0.0 } else { patch_sum / patch_count as f64 };

        // Free-space carving. The NeuS-style alpha depends only on SDF
        // decrements once the field is deep in the logistic tail, so an
        // all-inside field renders plausible depths and colors from
        // transmittance noise and every other loss is satisfiable without
        // a zero crossing. Driving the accumulated weight of free rays to
        // zero anchors the field positive outside the visual hull, and the
        // color head cannot fake it.
        let n_free = free_rays.iter().filter(|&&b| b).count();
        let l_free = if n_free > 0 {
            (0..n_rays)
                .filter(|&r| free_rays[r])
                .map(|r| renders[r].weight_sum * renders[r].weight_sum)
                .sum::<f64>()
                / n_free as f64
        } else {
            0.0
        };

        // Eikonal samples: ray samples cover only the viewed cone, so the
        // field would be free to collapse in unobserved regions (e.g. the
        // far side of the object). Uniform volume samples keep |grad f| = 1
        // everywhere and extend the SDF into unseen space.
        let n_unif = UNIFORM_EIKONAL_SAMPLES;
        let unif_points: Vec<Vector3<f64>> = (0..n_unif)
            .map(|_| {
                Vector3::new(
                    batch_rng.gen_range(-1.0..1.0),
                    batch_rng.gen_range(-1.0..1.0),
                    batch_rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let unif_mat = points_matrix(&unif_points);
        let (unif_out, unif_jout, unif_cache) = self.field.sdf.forward_dual(&unif_mat);
        let mut all_gradients = gradients.clone();
        for i in 0..n_unif {
            all_gradients.push(Vector3::new(
                unif_jout[(i, 0)],
                unif_jout[(n_unif + i, 0)],
                unif_jout[(2 * n_unif + i, 0)],
            ));
        }

        let l_eik = eikonal_loss(&all_gradients);
        let total_value =
            total_loss(l_feat, l_depth, l_pixel, l_patch, l_eik, cfg_alpha, cfg_beta)?
                + FREE_SPACE_WEIGHT * l_free;

        // --- backward -----------------------------------------------------
        // per-ray dL/d(rendered depth): calibrated depth constraint plus
        // finite-difference channels for the patch and on-surface terms,
        // whose depth dependence passes through image resampling
        let mut d_depth: Vec<f64> = depth_grad.iter().map(|g| g * cfg_alpha).collect();
        let fd_h = 1e-4;
        if patch_count > 0 {
            for r in 0..n_rays {
                let Some(p_ref) = &patch_refs[r] else { continue };
                let d = renders[r].rendered_depth;
                let (hi, chi) = self.patch_term(
                    &rays[r], &pixels[r], &surface_normals[r], d + fd_h, ref_idx, p_ref,
                    &masks[r],
                );
                let (lo, clo) = self.patch_term(
                    &rays[r], &pixels[r], &surface_normals[r], d - fd_h, ref_idx, p_ref,
                    &masks[r],
                );
                if chi == clo && chi > 0 {
                    d_depth[r] += (hi - lo) / (2.0 * fd_h) / patch_count as f64;
                }
            }
        }
        if self.feature_loss_enabled && self.config.feature_mode == FeatureMode::OnSurface {
            // d l_feat / dD by central differences on the surface similarity
            let contributing: usize =
                masks.iter().map(|m| m.iter().filter(|&&b| b).count()).sum();
            if contributing > 0 {
                for r in 0..n_rays {
                    let Some(f) = &ref_feats[r] else { continue };
                    let d = renders[r].rendered_depth;
                    let mut grad = 0.0;
                    for (si, &src) in src_indices.iter().enumerate() {
                        if !masks[r][si] {
                            continue;
                        }
                        let hi =
                            self.source_similarity(metric, f, src, &rays[r].at(d + fd_h));
                        let lo =
                            self.source_similarity(metric, f, src, &rays[r].at(d - fd_h));
                        grad += -(hi - lo) / (2.0 * fd_h);
                    }
                    d_depth[r] += grad / contributing as f64;
                }
            }
        }

        let feat_coeffs = if self.feature_loss_enabled {
            feature_consistency_coeffs(&renders, &masks, self.config.feature_mode)
        } else {
            vec![vec![0.0; src_indices.len()]; n_rays]
        };
        let eik_adj = eikonal_backward(&all_gradients);

        let mut rgb_adj = Array2::zeros((total, 3));
        let mut out_adj = Array2::zeros(out.dim());
        let mut jout_adj = Array2::zeros(jout.dim());
        let mut log_s_grad = 0.0;
        for (r, &(start, len)) in ranges.iter().enumerate() {
            let nsec = len - 1;
            let weights = &renders[r].weights;
            let (alphas, d_fi, d_fi1, d_s) = &alpha_stencils[r];
            // dL/dw from color, depth, and accumulated feature similarity
            let mut w_adj = vec![0.0f64; nsec];
            if let Some(u) = &pixel_adjs[r] {
                let scale = 1.0 / (3.0 * pixel_count as f64);
                for j in 0..nsec {
                    let c = Vector3::new(rgb[(start + j, 0)], rgb[(start + j, 1)], rgb[(start + j, 2)]);
                    w_adj[j] += u.dot(&c) * scale;
                    for k in 0..3 {
                        rgb_adj[(start + j, k)] += weights[j] * u[k] * scale;
                    }
                }
            }
            if d_depth[r] != 0.0 && renders[r].depth_valid() {
                let dd = depth_backward(
                    weights,
                    &samples[r].distances[..nsec],
                    renders[r].rendered_depth,
                    d_depth[r],
                );
                for j in 0..nsec {
                    w_adj[j] += dd[j];
                }
            }
            if free_rays[r] {
                let g = 2.0 * renders[r].weight_sum * FREE_SPACE_WEIGHT / n_free as f64;
                for j in 0..nsec {
                    w_adj[j] += g;
                }
            }
            for (si, &coeff) in feat_coeffs[r].iter().enumerate() {
                if coeff != 0.0 {
                    for j in 0..nsec {
                        w_adj[j] += coeff * sims_per_ray[r][si][j];
                    }
                }
            }
            let a_adj = weights_backward(alphas, weights, &w_adj);
            for j in 0..nsec {
                out_adj[(start + j, 0)] += a_adj[j] * d_fi[j];
                out_adj[(start + j + 1, 0)] += a_adj[j] * d_fi1[j];
                log_s_grad += a_adj[j] * d_s[j] * s;
            }
        }

        // color head backward: parameter grads plus the input adjoint whose
        // normal and feature blocks flow back into the trunk
        let mut grads = FieldGrads::zeros_like(&self.field);
        let input_adj = self.field.color.backward(&color_cache, &rgb_adj, &mut grads.color);
        let (normal_off, feat_off) = self.field.color.block_offsets();
        for i in 0..total {
            let g = gradients[i];
            let gnorm = g.norm().max(1e-12);
            let n_unit = g / gnorm;
            let n_adj = Vector3::new(
                input_adj[(i, normal_off)],
                input_adj[(i, normal_off + 1)],
                input_adj[(i, normal_off + 2)],
            );
            // d(n)/d(g) = (I - n n^T)/|g|
            let g_from_normal = (n_adj - n_unit * n_unit.dot(&n_adj)) / gnorm;
            let g_total = g_from_normal + eik_adj[i] * cfg_beta;
            for k in 0..3 {
                jout_adj[(k * total + i, 0)] = g_total[k];
            }
            for (c, _) in feats.row(i).iter().enumerate() {
                out_adj[(i, 1 + c)] += input_adj[(i, feat_off + c)];
            }
        }
        self.field.sdf.backward_dual(&trunk_cache, &out_adj, &jout_adj, &mut grads.sdf);
        let unif_out_adj = Array2::zeros(unif_out.dim());
        let mut unif_jout_adj = Array2::zeros(unif_jout.dim());
        for i in 0..n_unif {
            let g = eik_adj[total + i] * cfg_beta;
            for k in 0..3 {
                unif_jout_adj[(k * n_unif + i, 0)] = g[k];
            }
        }
        self.field.sdf.backward_dual(&unif_cache, &unif_out_adj, &unif_jout_adj, &mut grads.sdf);
        grads.log_s = log_s_grad;
        grads.source_term = "total".into();

        let report = LossReport {
            l_feat,
            l_depth,
            l_color_pixel: l_pixel,
            l_color_patch: l_patch,
            l_eik,
            l_free,
            total: total_value,
            confidence,
            uncertainty,
            mask: masks,
        };
        Ok((report, grads))
    }

    /// Diagnostic maps for one view at pixel `stride`: rendered depth,
    /// minimum source confidence, and mean accumulated feature similarity.
    /// Invalid pixels are NaN in all three.
    pub fn render_maps(&self, view: usize, stride: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>, usize, usize) {
        assert!(stride >= 1);
        let cam = self.views[view].view.camera.clone();
        let w = cam.width.div_ceil(stride);
        let h = cam.height.div_ceil(stride);
        let mut depth_map = vec![f32::NAN; w * h];
        let mut conf_map = vec![f32::NAN; w * h];
        let mut sim_map = vec![f32::NAN; w * h];
        let src_indices: Vec<usize> =
            (0..self.views.len()).filter(|&i| i != view).collect();
        for my in 0..h {
            for mx in 0..w {
                let uv = Vector2::new((mx * stride) as f64, (my * stride) as f64);
                let Some(d) = self.aux_depth(view, &uv) else { continue };
                depth_map[my * w + mx] = d as f32;
                let mut c_min = f64::INFINITY;
                for &src in &src_indices {
                    let src_fn =
                        |p: &Vector2<f64>| -> Option<f64> { self.aux_depth(src, p) };
                    let (c, _, _) = depth_confidence(
                        &uv,
                        d,
                        &cam,
                        &self.views[src].view.camera,
                        &src_fn,
                        self.config.tau,
                    );
                    c_min = c_min.min(c);
                }
                conf_map[my * w + mx] = c_min as f32;
                if let Some(ref_feat) = self.views[view].features.sample_image_pixel(&uv) {
                    let ray = pixel_ray(&cam, &uv, 0.0, 0.0);
                    let point = ray.at(d);
                    let mean: f64 = src_indices
                        .iter()
                        .map(|&src| {
                            self.source_similarity(Similarity::Cosine, &ref_feat, src, &point)
                        })
                        .sum::<f64>()
                        / src_indices.len() as f64;
                    sim_map[my * w + mx] = mean as f32;
                }
            }
        }
        (depth_map, conf_map, sim_map, w, h)
    }
}

fn signum0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Near/far along a ray against the unit scene bound, with a conservative
/// fallback for rays that miss the bounding sphere.
fn ray_bounds(ray: &Ray) -> (f64, f64) {
    match ray_sphere_bounds(&ray.origin, &ray.direction, &Vector3::zeros(), 1.0) {
        Some((t0, t1)) => (t0, t1),
        None => {
            let d = ray.origin.norm();
            ((d - 1.0).max(0.05), d + 1.0)
        }
    }
}

fn points_matrix(points: &[Vector3<f64>]) -> Array2<f64> {
    let mut out = Array2::zeros((points.len(), 3));
    for (i, p) in points.iter().enumerate() {
        for k in 0..3 {
            out[(i, k)] = p[k];
        }
    }
    out
}

/// Deterministic per-(seed, step, stream) RNG via a splitmix64 finalizer.
fn stream_rng(seed: u64, step: u64, stream: u64) -> ChaCha8Rng {
    let mut x = seed
        ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    ChaCha8Rng::seed_from_u64(x)
}

/// Marching cubes over the learned SDF.
pub fn field_mesh(field: &ImplicitField, resolution: usize, lo: f64, hi: f64) -> TriangleMesh {
    let sdf = |pts: &[Vector3<f64>]| -> Vec<f64> {
        field.eval_sdf(&points_matrix(pts)).to_vec()
    };
    extract_mesh(&sdf, resolution, lo, hi)
}

/// Points on the analytic surface, Newton-projected from random seeds;
/// the reference cloud for Chamfer evaluation.
pub fn sample_scene_surface(scene: &AnalyticScene, n: usize, seed: u64) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n && attempts < n * 100 {
        attempts += 1;
        let mut x = Vector3::new(
            rng.gen_range(-0.95..0.95),
            rng.gen_range(-0.95..0.95),
            rng.gen_range(-0.95..0.95),
        );
        let mut ok = false;
        for _ in 0..50 {
            let d = scene_sdf(scene, &x);
            if d.abs() < 1e-8 {
                ok = true;
                break;
            }
            x -= scene_normal(scene, &x) * d;
        }
        if ok && x.norm() < 1.0 {
            out.push(x);
        }
    }
    out
}

/// Mesh-vs-scene Chamfer evaluation.
pub fn evaluate_mesh(
    mesh: &TriangleMesh,
    scene: &AnalyticScene,
    n_points: usize,
    seed: u64,
) -> ChamferResult {
    let reference = sample_scene_surface(scene, n_points, seed.wrapping_add(101));
    chamfer_distance(mesh, &reference, n_points, seed)
}

/// Writes a complete synthetic scene directory: images, ground-truth
/// depth, priors, cameras, keypoints, and the scene description.
pub fn synthesize_scene(
    desc: &SceneDescription,
    out_dir: &std::path::Path,
) -> Result<(), PipelineError> {
    use crate::io;
    use crate::synth;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| IoError::File { path: out_dir.to_path_buf(), source: e })?;
    let rig = synth::make_camera_rig(
        desc.n_views,
        desc.radius,
        desc.max_angle_deg,
        desc.image_size,
        desc.focal,
    )
    .map_err(|e| PipelineError::BadScene(e.to_string()))?;
    let mut views = Vec::with_capacity(rig.len());
    for (i, cam) in rig.iter().enumerate() {
        let (image, depth) = synth::render_ground_truth(&desc.scene, cam);
        let image_name = format!("view_{i:03}.png");
        let depth_name = format!("depth_{i:03}.pf2");
        let prior_name = format!("prior_{i:03}.pf2");
        io::write_png(&out_dir.join(&image_name), &Image::new(image, cam.width, cam.height))?;
        io::write_pf2(&out_dir.join(&depth_name), &depth, cam.width, cam.height)?;
        let prior = synth::synthesize_depth_prior(
            &depth,
            cam.width,
            cam.height,
            desc.prior_a,
            desc.prior_b,
            desc.prior_distortion,
        );
        io::write_pf2(&out_dir.join(&prior_name), &prior, cam.width, cam.height)?;
        let mut rec = io::ViewRecord::from_camera(cam, image_name);
        rec.gt_depth = Some(depth_name);
        rec.depth_prior = Some(prior_name);
        views.push(rec);
    }
    io::write_cameras(&out_dir.join("cameras.toml"), &io::CamerasFile { views })?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let keypoints = synth::synthesize_keypoints(&desc.scene, &rig, desc.n_keypoints, &mut rng)
        .map_err(|e| PipelineError::BadScene(e.to_string()))?;
    let records: Vec<io::KeypointRecord> = keypoints
        .iter()
        .map(|k| io::KeypointRecord {
            position: k.position,
            visible_views: k.visible_views.clone(),
        })
        .collect();
    io::write_keypoints(&out_dir.join("keypoints.txt"), &records)?;
    io::write_scene_description(&out_dir.join("scene.toml"), desc)?;
    Ok(())
}

/// Named preset scene descriptions for the synth command.
pub fn preset(name: &str) -> Option<SceneDescription> {
    use crate::synth::{Blend, Primitive, Texture};
    let base = |scene: AnalyticScene| SceneDescription {
        scene,
        n_views: 3,
        radius: 2.0,
        // 75 deg between neighbouring views balances two failure modes:
        // a narrow rig leaves the far side of the object unobserved (its
        // reconstruction is pure eikonal extrapolation), while a very wide
        // rig leaves no surface patch front-facing for two views at once,
        // so the reprojection-gated cross-view terms never engage.
        max_angle_deg: 90.0,
        image_size: 96,
        focal: 110.0,
        prior_a: 2.0,
        prior_b: 0.3,
        prior_distortion: 0.02,
        n_keypoints: 80,
    };
    match name {
        "sphere3" => Some(base(AnalyticScene::sphere(0.5))),
        "spherebox3" => Some(base(AnalyticScene {
            primitives: vec![
                Primitive::Sphere { center: [-0.18, 0.0, 0.0], radius: 0.34 },
                Primitive::Box {
                    center: [0.25, -0.05, 0.05],
                    half_extents: [0.22, 0.26, 0.22],
                },
            ],
            blend: Blend::SmoothUnion { k: 0.03 },
            texture: Texture::Checker,
        })),
        "lowtex3" => {
            let mut d = base(AnalyticScene::sphere(0.5));
            d.scene.texture = Texture::LowTexture;
            Some(d)
        }
        _ => None,
    }
}

/// One ablation variant: a label plus the config edits it applies.
pub fn ablation_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut out = Vec::new();
    out.push(("full".to_string(), base.clone()));
    out.push(("no_feat".to_string(), base.clone()));
    let mut no_depth = base.clone();
    no_depth.alpha = 0.0;
    out.push(("no_depth".to_string(), no_depth));
    let mut mono = base.clone();
    mono.depth_mode = DepthMode::Mono;
    out.push(("mono_depth".to_string(), mono));
    let mut on_surf = base.clone();
    on_surf.feature_mode = FeatureMode::OnSurface;
    out.push(("on_surface_feat".to_string(), on_surf));
    out
}

/// Final Chamfer distance per ablation variant.
pub struct AblationRow {
    pub name: String,
    pub chamfer: f64,
    pub empty_mesh: bool,
}

/// Trains every variant on the same scene and evaluates the final mesh.
/// `feature_off` names variants trained with the feature loss removed.
pub fn run_ablation(
    scene: &SceneData,
    base: &TrainConfig,
    grid: usize,
    eval_points: usize,
) -> Result<Vec<AblationRow>, PipelineError> {
    let desc = scene.description.as_ref().ok_or_else(|| {
        PipelineError::BadScene("ablation needs scene.toml for reference geometry".into())
    })?;
    let analytic = desc.scene.clone();
    let mut rows = Vec::new();
    for (name, config) in ablation_variants(base) {
        let mut trainer = Trainer::new(scene, config)?;
        trainer.feature_loss_enabled = name != "no_feat";
        for _ in 0..trainer.config.total_steps {
            trainer.train_step()?;
        }
        let mesh = field_mesh(&trainer.field, grid, -1.0, 1.0);
        let result = evaluate_mesh(&mesh, &analytic, eval_points, base.seed);
        rows.push(AblationRow { name, chamfer: result.distance, empty_mesh: result.empty_mesh });
    }
    Ok(rows)
}
