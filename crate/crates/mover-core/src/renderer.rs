//! Forward rendering pipeline: convolutional feature extraction, a
//! mixture-of-experts view transformer that aggregates epipolar features per
//! 3D sample, and a ray transformer that turns the per-ray sample tokens
//! into RGB. Depth is read off the ray transformer's pooling attention.

use nalgebra::Vector3;
use rand::Rng;

use crate::geometry::{sample_along_ray, Camera, Ray, SampledPoints};
use crate::image::Image;
use crate::moe::{expert_combinations, MoeLayer, RoutedGates};
use crate::tensor::{concat_cols, ParamId, ParamStore, RowCombo, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Architecture hyperparameters. Field names match the config file keys used
/// by the training module.
#[derive(Debug, Clone)]
pub struct RendererConfig {
    /// token width d
    pub dim: usize,
    /// dense feed-forward width in the ray transformer; routed and permanent
    /// experts use half this width
    pub ffn_hidden: usize,
    /// L mixture-of-experts view-transformer blocks
    pub view_blocks: usize,
    pub ray_blocks: usize,
    pub heads: usize,
    /// E selectable experts per MoE layer
    pub experts: usize,
    /// K experts routed per token
    pub top_k: usize,
    /// sinusoidal frequencies for the (position, direction) encoding
    pub freqs_point: usize,
    /// sinusoidal frequencies for the normalized sample-depth encoding
    pub freqs_depth: usize,
    /// lift raw RGB with a learned linear map instead of the conv encoder
    pub passthrough_features: bool,
}

impl RendererConfig {
    pub fn desk_default() -> Self {
        RendererConfig {
            dim: 64,
            ffn_hidden: 128,
            view_blocks: 4,
            ray_blocks: 2,
            heads: 4,
            experts: 4,
            top_k: 2,
            freqs_point: 4,
            freqs_depth: 4,
            passthrough_features: false,
        }
    }

    /// (x, θ) query encoding width: raw value plus sin/cos per frequency,
    /// for 3 position and 3 direction coordinates.
    pub fn point_pe_dim(&self) -> usize {
        6 * (1 + 2 * self.freqs_point)
    }

    pub fn depth_pe_dim(&self) -> usize {
        1 + 2 * self.freqs_depth
    }
}

/// Appends `v, sin(2^f π v), cos(2^f π v)` for each frequency.
fn sinusoidal(values: &[f64], freqs: usize, out: &mut Vec<f64>) {
    for &v in values {
        out.push(v);
        for f in 0..freqs {
            let s = (2f64).powi(f as i32) * std::f64::consts::PI * v;
            out.push(s.sin());
            out.push(s.cos());
        }
    }
}

fn ones_col<'t>(tape: &'t Tape, rows: usize) -> Var<'t> {
    tape.constant(&Tensor::new(vec![rows, 1], vec![1.0; rows]))
}

/// Gain/bias pair for one layer norm.
#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    fn init(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        LayerNormParams {
            gain: store.add(format!("{prefix}.g"), Tensor::new(vec![1, dim], vec![1.0; dim])),
            bias: store.add(format!("{prefix}.b"), Tensor::zeros(vec![1, dim])),
        }
    }

    fn apply<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        x.layer_norm(tape.param(store, self.gain), tape.param(store, self.bias), LN_EPS)
    }
}

/// Projection matrices of one multi-head attention.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttentionParams {
    fn init(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let s = (1.0 / dim as f64).sqrt();
        AttentionParams {
            wq: store.add(format!("{prefix}.wq"), Tensor::randn(vec![dim, dim], s, rng)),
            wk: store.add(format!("{prefix}.wk"), Tensor::randn(vec![dim, dim], s, rng)),
            wv: store.add(format!("{prefix}.wv"), Tensor::randn(vec![dim, dim], s, rng)),
            wo: store.add(format!("{prefix}.wo"), Tensor::randn(vec![dim, dim], s, rng)),
        }
    }

    /// Multi-head attention over G independent groups: `queries` is
    /// `[G*qrows, d]`, `context` is `[G*krows, d]`. `mask` (true = blocked)
    /// has one entry per score, `[G*qrows, krows]` row-major. Returns the
    /// attended output `[G*qrows, d]` and the head-averaged attention
    /// weights `[G*qrows, krows]`.
    fn attend<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        queries: Var<'t>,
        context: Var<'t>,
        qrows: usize,
        krows: usize,
        heads: usize,
        mask: Option<&[bool]>,
    ) -> (Var<'t>, Var<'t>) {
        let dim = queries.cols();
        assert_eq!(dim % heads, 0, "head count must divide dim");
        let dh = dim / heads;
        let q = queries.matmul(tape.param(store, self.wq));
        let k = context.matmul(tape.param(store, self.wk));
        let v = context.matmul(tape.param(store, self.wv));
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut avg: Option<Var<'t>> = None;
        for h in 0..heads {
            let qh = q.slice_cols(h * dh, dh);
            let kh = k.slice_cols(h * dh, dh);
            let vh = v.slice_cols(h * dh, dh);
            let mut scores = qh.grouped_dot(kh, qrows, krows).scale(scale);
            if let Some(m) = mask {
                scores = scores.masked_fill(m, f64::NEG_INFINITY);
            }
            let attn = scores.softmax_rows();
            outs.push(attn.grouped_mix(vh, qrows, krows));
            avg = Some(match avg {
                None => attn,
                Some(a) => a.add(attn),
            });
        }
        let out = concat_cols(tape, &outs).matmul(tape.param(store, self.wo));
        (out, avg.expect("at least one head").scale(1.0 / heads as f64))
    }
}

/// Image-to-feature-map encoder. Both modes preserve spatial size, so
/// feature lookup stays in pixel coordinates.
#[derive(Debug, Clone)]
pub enum FeatureExtractor {
    /// three 3x3 stride-1 conv layers (gelu between, linear output)
    Conv {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
        w3: ParamId,
        b3: ParamId,
    },
    /// learned per-pixel linear lift of raw RGB
    Passthrough { w: ParamId, b: ParamId },
}

impl FeatureExtractor {
    fn init(store: &mut ParamStore, dim: usize, passthrough: bool, rng: &mut impl Rng) -> Self {
        if passthrough {
            let s = (1.0 / 3.0f64).sqrt();
            return FeatureExtractor::Passthrough {
                w: store.add("extractor.w", Tensor::randn(vec![3, dim], s, rng)),
                b: store.add("extractor.b", Tensor::zeros(vec![1, dim])),
            };
        }
        let s1 = (2.0f64 / (9.0 * 3.0)).sqrt();
        let s = (2.0 / (9 * dim) as f64).sqrt();
        FeatureExtractor::Conv {
            w1: store.add("extractor.w1", Tensor::randn(vec![9 * 3, dim], s1, rng)),
            b1: store.add("extractor.b1", Tensor::zeros(vec![1, dim])),
            w2: store.add("extractor.w2", Tensor::randn(vec![9 * dim, dim], s, rng)),
            b2: store.add("extractor.b2", Tensor::zeros(vec![1, dim])),
            w3: store.add("extractor.w3", Tensor::randn(vec![9 * dim, dim], s, rng)),
            b3: store.add("extractor.b3", Tensor::zeros(vec![1, dim])),
        }
    }

    /// Lifts one image to an `[H*W, d]` feature map.
    pub fn extract<'t>(&self, tape: &'t Tape, store: &ParamStore, image: &Image) -> Var<'t> {
        let (h, w) = (image.height, image.width);
        let data: Vec<f64> = image.pixels.iter().flat_map(|p| p.iter().copied()).collect();
        let x = tape.constant(&Tensor::new(vec![h * w, 3], data));
        match self {
            FeatureExtractor::Passthrough { w: wp, b } => {
                x.matmul(tape.param(store, *wp)).add_bias_row(tape.param(store, *b))
            }
            FeatureExtractor::Conv { w1, b1, w2, b2, w3, b3 } => {
                let y = x
                    .im2col_3x3(h, w)
                    .matmul(tape.param(store, *w1))
                    .add_bias_row(tape.param(store, *b1))
                    .gelu();
                let y = y
                    .im2col_3x3(h, w)
                    .matmul(tape.param(store, *w2))
                    .add_bias_row(tape.param(store, *b2))
                    .gelu();
                y.im2col_3x3(h, w)
                    .matmul(tape.param(store, *w3))
                    .add_bias_row(tape.param(store, *b3))
            }
        }
    }
}

/// One view-transformer block: cross-attention of the point query over its
/// N view tokens, then a mixture-of-experts feed-forward, both pre-norm
/// residual.
#[derive(Debug, Clone)]
pub struct ViewBlock {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub moe: MoeLayer,
}

/// One ray-transformer block: self-attention over the M sample tokens of a
/// ray, then a dense feed-forward, both pre-norm residual.
#[derive(Debug, Clone)]
pub struct RayBlock {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
}

/// Learned pooling query attending over a ray's sample tokens; its
/// attention weights double as the depth readout.
#[derive(Debug, Clone)]
pub struct PoolHead {
    pub query: ParamId,
    pub attn: AttentionParams,
}

/// The full model: parameter handles only; tensors live in a `ParamStore`.
#[derive(Debug, Clone)]
pub struct MoveModel {
    pub config: RendererConfig,
    pub extractor: FeatureExtractor,
    /// maps [point encoding | mean view feature] to the query token
    pub query_w: ParamId,
    pub query_b: ParamId,
    /// substitute token for points no source camera sees
    pub null_token: ParamId,
    pub view_blocks: Vec<ViewBlock>,
    /// projects the sample-depth encoding into token space
    pub depth_pe_w: ParamId,
    pub ray_blocks: Vec<RayBlock>,
    pub pool: PoolHead,
    pub rgb_w1: ParamId,
    pub rgb_b1: ParamId,
    pub rgb_w2: ParamId,
    pub rgb_b2: ParamId,
}

/// Source views prepared for rendering on one tape: cameras plus their
/// feature maps concatenated into a single `[N*H*W, d]` node.
pub struct SourceViews<'t> {
    pub cameras: Vec<Camera>,
    pub features: Var<'t>,
    /// rows per view inside `features`
    pub rows_per_view: usize,
    pub width: usize,
    pub height: usize,
}

/// Output of the view transformer for a batch of points.
pub struct AggregatedPoints<'t> {
    /// `[P, d]` point tokens
    pub tokens: Var<'t>,
    /// router outputs of each view block, rows aligned with `tokens`
    pub gates: Vec<RoutedGates<'t>>,
    /// false where no source camera sees the point (token replaced by the
    /// learned null token; exclude these rows from routing losses)
    pub valid: Vec<bool>,
}

/// Output of rendering a batch of rays on one tape.
pub struct RayRenderOutput<'t> {
    /// `[R, 3]`, squashed to [0,1]
    pub rgb: Var<'t>,
    /// `[R, 1]`, convex combination of the sample depths
    pub depth: Var<'t>,
    /// `[R, M]` pooling attention, head-averaged and renormalized
    pub attention: Var<'t>,
    /// per view block, over the R*M point tokens (ray-major, sample-minor)
    pub gates: Vec<RoutedGates<'t>>,
    pub valid: Vec<bool>,
    pub samples: Vec<SampledPoints>,
}

/// Sampling and batching knobs for image-scale rendering.
#[derive(Debug, Clone)]
pub struct RenderSettings {
    pub samples_per_ray: usize,
    pub t_near: f64,
    pub t_far: f64,
    /// rays per tape; bounds peak memory
    pub chunk: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings { samples_per_ray: 32, t_near: 0.5, t_far: 6.0, chunk: 128 }
    }
}

/// A fully rendered target view with its analysis artifacts.
pub struct RenderedImage {
    pub image: Image,
    /// per-pixel depth, row-major
    pub depth: Vec<f64>,
    /// per view block: per-pixel index into `expert_combinations(E, K)`,
    /// the mode of the selection pattern over the ray's samples
    pub expert_maps: Vec<Vec<usize>>,
    /// per view block: how often each expert was selected, as a fraction of
    /// all selections over valid samples (each row sums to 1)
    pub usage: Vec<Vec<f64>>,
}

impl MoveModel {
    pub fn init(store: &mut ParamStore, config: &RendererConfig, rng: &mut impl Rng) -> Self {
        let d = config.dim;
        assert_eq!(d % config.heads, 0, "head count must divide dim");
        let extractor = FeatureExtractor::init(store, d, config.passthrough_features, rng);
        let q_in = config.point_pe_dim() + d;
        let query_w =
            store.add("query.w", Tensor::randn(vec![q_in, d], (1.0 / q_in as f64).sqrt(), rng));
        let query_b = store.add("query.b", Tensor::zeros(vec![1, d]));
        let null_token = store.add("null_token", Tensor::randn(vec![1, d], 0.02, rng));
        // experts run at half the dense feed-forward width
        let expert_hidden = (config.ffn_hidden / 2).max(1);
        let view_blocks = (0..config.view_blocks)
            .map(|i| {
                let p = format!("view{i}");
                ViewBlock {
                    ln1: LayerNormParams::init(store, &format!("{p}.ln1"), d),
                    attn: AttentionParams::init(store, &format!("{p}.attn"), d, rng),
                    ln2: LayerNormParams::init(store, &format!("{p}.ln2"), d),
                    moe: MoeLayer::init(
                        store,
                        &format!("{p}.moe"),
                        d,
                        expert_hidden,
                        config.experts,
                        config.top_k,
                        rng,
                    ),
                }
            })
            .collect();
        let pe_t = config.depth_pe_dim();
        let depth_pe_w =
            store.add("raype.w", Tensor::randn(vec![pe_t, d], (1.0 / pe_t as f64).sqrt(), rng));
        let hf = config.ffn_hidden;
        let ray_blocks = (0..config.ray_blocks)
            .map(|i| {
                let p = format!("ray{i}");
                RayBlock {
                    ln1: LayerNormParams::init(store, &format!("{p}.ln1"), d),
                    attn: AttentionParams::init(store, &format!("{p}.attn"), d, rng),
                    ln2: LayerNormParams::init(store, &format!("{p}.ln2"), d),
                    ffn_w1: store.add(
                        format!("{p}.ffn.w1"),
                        Tensor::randn(vec![d, hf], (2.0 / d as f64).sqrt(), rng),
                    ),
                    ffn_b1: store.add(format!("{p}.ffn.b1"), Tensor::zeros(vec![1, hf])),
                    ffn_w2: store.add(
                        format!("{p}.ffn.w2"),
                        Tensor::randn(vec![hf, d], (2.0 / hf as f64).sqrt(), rng),
                    ),
                    ffn_b2: store.add(format!("{p}.ffn.b2"), Tensor::zeros(vec![1, d])),
                }
            })
            .collect();
        let pool = PoolHead {
            query: store.add("pool.query", Tensor::randn(vec![1, d], 0.02, rng)),
            attn: AttentionParams::init(store, "pool.attn", d, rng),
        };
        let rh = hf;
        MoveModel {
            config: config.clone(),
            extractor,
            query_w,
            query_b,
            null_token,
            view_blocks,
            depth_pe_w,
            ray_blocks,
            pool,
            rgb_w1: store.add("rgb.w1", Tensor::randn(vec![d, rh], (2.0 / d as f64).sqrt(), rng)),
            rgb_b1: store.add("rgb.b1", Tensor::zeros(vec![1, rh])),
            rgb_w2: store.add("rgb.w2", Tensor::randn(vec![rh, 3], (1.0 / rh as f64).sqrt(), rng)),
            rgb_b2: store.add("rgb.b2", Tensor::zeros(vec![1, 3])),
        }
    }

    /// Runs the extractor on every source image and concatenates the maps.
    /// All source images must share dimensions.
    pub fn extract_source_features<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        sources: &[(&Camera, &Image)],
    ) -> SourceViews<'t> {
        assert!(!sources.is_empty(), "need at least one source view");
        let (w, h) = (sources[0].1.width, sources[0].1.height);
        let maps: Vec<Var<'t>> = sources
            .iter()
            .map(|(cam, img)| {
                assert_eq!((img.width, img.height), (w, h), "source image sizes differ");
                assert_eq!((cam.width, cam.height), (w, h), "image does not match camera");
                self.extractor.extract(tape, store, img)
            })
            .collect();
        SourceViews {
            cameras: sources.iter().map(|(c, _)| (*c).clone()).collect(),
            features: crate::tensor::concat_rows(tape, &maps),
            rows_per_view: w * h,
            width: w,
            height: h,
        }
    }

    /// View transformer: per point, bilinearly sample each source view's
    /// feature map at the point's projection, then let a query token built
    /// from the (position, direction) encoding attend over those view tokens
    /// through L MoE blocks. Views behind whose camera the point lies are
    /// masked out of the attention; points no camera sees get the learned
    /// null token.
    pub fn aggregate_points<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        positions: &[Vector3<f64>],
        directions: &[Vector3<f64>],
        sources: &SourceViews<'t>,
    ) -> AggregatedPoints<'t> {
        let p = positions.len();
        assert_eq!(p, directions.len(), "one direction per point");
        let n = sources.cameras.len();
        let (w, h) = (sources.width, sources.height);
        let mut combos = Vec::with_capacity(p * n);
        let mut mask = vec![false; p * n];
        let mut valid = vec![false; p];
        for (i, x) in positions.iter().enumerate() {
            for (vi, cam) in sources.cameras.iter().enumerate() {
                let offset = vi * sources.rows_per_view;
                match cam.project(x) {
                    Ok((u, v, _)) => {
                        valid[i] = true;
                        combos.push(bilinear_combo(u, v, w, h, offset));
                    }
                    Err(_) => {
                        mask[i * n + vi] = true;
                        combos.push(RowCombo { idx: [0; 4], w: [0.0; 4] });
                    }
                }
            }
        }
        // [P*N, d] view tokens, point-major
        let view_feats = sources.features.weighted_row_combine(&combos);
        // mean of the visible views' features seeds the query token
        let mut mean_w = vec![0.0; p * n];
        for i in 0..p {
            let visible = (0..n).filter(|vi| !mask[i * n + vi]).count();
            if visible > 0 {
                for vi in 0..n {
                    if !mask[i * n + vi] {
                        mean_w[i * n + vi] = 1.0 / visible as f64;
                    }
                }
            }
        }
        let mean_w = tape.constant(&Tensor::new(vec![p, n], mean_w));
        let mean_feat = mean_w.grouped_mix(view_feats, 1, n);
        let mut pe = Vec::with_capacity(p * self.config.point_pe_dim());
        for (x, d) in positions.iter().zip(directions.iter()) {
            sinusoidal(&[x.x, x.y, x.z, d.x, d.y, d.z], self.config.freqs_point, &mut pe);
        }
        let pe = tape.constant(&Tensor::new(vec![p, self.config.point_pe_dim()], pe));
        let mut tokens = concat_cols(tape, &[pe, mean_feat])
            .matmul(tape.param(store, self.query_w))
            .add_bias_row(tape.param(store, self.query_b));
        let mut gates = Vec::with_capacity(self.view_blocks.len());
        for block in &self.view_blocks {
            let q = block.ln1.apply(tape, store, tokens);
            let (att, _) =
                block.attn.attend(tape, store, q, view_feats, 1, n, self.config.heads, Some(&mask));
            tokens = tokens.add(att);
            let f = block.ln2.apply(tape, store, tokens);
            let (moe_out, g) = block.moe.forward(tape, store, f);
            tokens = tokens.add(moe_out);
            gates.push(g);
        }
        if valid.iter().any(|v| !v) {
            // zero the unseen rows and scatter the null token into them
            let keep: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
            let keep = tape.constant(&Tensor::new(vec![p, 1], keep));
            let invalid: Vec<usize> =
                valid.iter().enumerate().filter(|(_, v)| !**v).map(|(i, _)| i).collect();
            let null = ones_col(tape, invalid.len()).matmul(tape.param(store, self.null_token));
            tokens = tokens.mul_col(keep).add(null.row_scatter_add(&invalid, p));
        }
        AggregatedPoints { tokens, gates, valid }
    }

    /// Renders a batch of rays on one tape. Point tokens are laid out
    /// ray-major (`ray * M + sample`), which is the layout the returned
    /// gates and validity flags use.
    pub fn render_rays<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        rays: &[Ray],
        samples_per_ray: usize,
        jitter: bool,
        rng: &mut impl Rng,
        sources: &SourceViews<'t>,
    ) -> RayRenderOutput<'t> {
        assert!(!rays.is_empty(), "need at least one ray");
        let m = samples_per_ray;
        let r = rays.len();
        let mut samples = Vec::with_capacity(r);
        let mut positions = Vec::with_capacity(r * m);
        let mut directions = Vec::with_capacity(r * m);
        for ray in rays {
            let s = sample_along_ray(ray, m, jitter, rng);
            positions.extend_from_slice(&s.positions);
            directions.extend(std::iter::repeat(ray.direction).take(m));
            samples.push(s);
        }
        let agg = self.aggregate_points(tape, store, &positions, &directions, sources);
        // inject where along the ray each token sits
        let mut pe = Vec::with_capacity(r * m * self.config.depth_pe_dim());
        for (ray, s) in rays.iter().zip(samples.iter()) {
            let span = ray.t_far - ray.t_near;
            for &t in &s.depths {
                sinusoidal(&[(t - ray.t_near) / span], self.config.freqs_depth, &mut pe);
            }
        }
        let pe = tape.constant(&Tensor::new(vec![r * m, self.config.depth_pe_dim()], pe));
        let mut tokens = agg.tokens.add(pe.matmul(tape.param(store, self.depth_pe_w)));
        for block in &self.ray_blocks {
            let q = block.ln1.apply(tape, store, tokens);
            let (att, _) = block.attn.attend(tape, store, q, q, m, m, self.config.heads, None);
            tokens = tokens.add(att);
            let f = block.ln2.apply(tape, store, tokens);
            let f = f
                .matmul(tape.param(store, block.ffn_w1))
                .add_bias_row(tape.param(store, block.ffn_b1))
                .gelu()
                .matmul(tape.param(store, block.ffn_w2))
                .add_bias_row(tape.param(store, block.ffn_b2));
            tokens = tokens.add(f);
        }
        let pool_q = ones_col(tape, r).matmul(tape.param(store, self.pool.query));
        let (pooled, attn) =
            self.pool.attn.attend(tape, store, pool_q, tokens, 1, m, self.config.heads, None);
        // heads are individually normalized; renormalize the average so the
        // depth readout is an exact convex combination
        let inv_sum = ones_col(tape, r).div(attn.sum_axis1());
        let attn = attn.mul_col(inv_sum);
        let depths: Vec<f64> = samples.iter().flat_map(|s| s.depths.iter().copied()).collect();
        let t_const = tape.constant(&Tensor::new(vec![r, m], depths));
        let depth = attn.mul(t_const).sum_axis1();
        let rgb = pooled
            .matmul(tape.param(store, self.rgb_w1))
            .add_bias_row(tape.param(store, self.rgb_b1))
            .gelu()
            .matmul(tape.param(store, self.rgb_w2))
            .add_bias_row(tape.param(store, self.rgb_b2))
            .sigmoid();
        RayRenderOutput { rgb, depth, attention: attn, gates: agg.gates, valid: agg.valid, samples }
    }

    /// Single-ray convenience wrapper: (RGB, depth, pooling attention).
    pub fn render_ray(
        &self,
        store: &ParamStore,
        ray: &Ray,
        samples_per_ray: usize,
        sources: &[(&Camera, &Image)],
    ) -> ([f64; 3], f64, Vec<f64>) {
        let tape = Tape::new();
        let src = self.extract_source_features(&tape, store, sources);
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let out =
            self.render_rays(&tape, store, std::slice::from_ref(ray), samples_per_ray, false, &mut rng, &src);
        let rgb = out.rgb.value();
        ([rgb.data[0], rgb.data[1], rgb.data[2]], out.depth.value().data[0], out.attention.value().data)
    }

    /// Renders a full target view in deterministic chunks, collecting the
    /// expert-selection map of every view block alongside color and depth.
    pub fn render_image(
        &self,
        store: &ParamStore,
        target: &Camera,
        sources: &[(&Camera, &Image)],
        settings: &RenderSettings,
    ) -> RenderedImage {
        let (w, h) = (target.width, target.height);
        let m = settings.samples_per_ray;
        let l = self.view_blocks.len();
        let combos = expert_combinations(self.config.experts, self.config.top_k);
        let mut image = Image::new(w, h);
        let mut depth = vec![0.0; w * h];
        let mut expert_maps = vec![vec![0usize; w * h]; l];
        let mut usage_counts = vec![vec![0u64; self.config.experts]; l];
        let rays: Vec<Ray> = (0..w * h)
            .map(|i| {
                let (x, y) = (i % w, i / w);
                target.pixel_ray(
                    x as f64 + 0.5,
                    y as f64 + 0.5,
                    0,
                    settings.t_near,
                    settings.t_far,
                )
            })
            .collect();
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        for (chunk_idx, chunk) in rays.chunks(settings.chunk.max(1)).enumerate() {
            let tape = Tape::new();
            let src = self.extract_source_features(&tape, store, sources);
            let out = self.render_rays(&tape, store, chunk, m, false, &mut rng, &src);
            let rgb = out.rgb.value();
            let d = out.depth.value();
            let base = chunk_idx * settings.chunk.max(1);
            for (ri, _) in chunk.iter().enumerate() {
                let pix = base + ri;
                image.pixels[pix] = [rgb.data[ri * 3], rgb.data[ri * 3 + 1], rgb.data[ri * 3 + 2]];
                depth[pix] = d.data[ri];
                for (layer, gates) in out.gates.iter().enumerate() {
                    let sel = &gates.selected[ri * m..(ri + 1) * m];
                    let ok = &out.valid[ri * m..(ri + 1) * m];
                    expert_maps[layer][pix] = dominant_pattern(sel, ok, &combos);
                    for (s, &v) in sel.iter().zip(ok.iter()) {
                        if v {
                            for &e in s {
                                usage_counts[layer][e] += 1;
                            }
                        }
                    }
                }
            }
        }
        let usage = usage_counts
            .into_iter()
            .map(|counts| {
                let total: u64 = counts.iter().sum();
                let norm = if total == 0 { 1.0 } else { total as f64 };
                counts.into_iter().map(|c| c as f64 / norm).collect()
            })
            .collect();
        RenderedImage { image, depth, expert_maps, usage }
    }
}

/// Bilinear lookup weights for continuous pixel coordinates (u, v); feature
/// rows are pixel-center samples. Out-of-image coordinates clamp to the
/// border.
fn bilinear_combo(u: f64, v: f64, width: usize, height: usize, offset: usize) -> RowCombo {
    let xf = (u - 0.5).clamp(0.0, (width - 1) as f64);
    let yf = (v - 0.5).clamp(0.0, (height - 1) as f64);
    let x0 = xf.floor() as usize;
    let y0 = yf.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let ax = xf - x0 as f64;
    let ay = yf - y0 as f64;
    RowCombo {
        idx: [
            offset + y0 * width + x0,
            offset + y0 * width + x1,
            offset + y1 * width + x0,
            offset + y1 * width + x1,
        ],
        w: [
            (1.0 - ax) * (1.0 - ay),
            ax * (1.0 - ay),
            (1.0 - ax) * ay,
            ax * ay,
        ],
    }
}

/// Most frequent selection pattern over a ray's samples (valid samples only;
/// ties break toward the smaller pattern index). Falls back to pattern 0
/// when the whole ray is unseen.
fn dominant_pattern(selected: &[Vec<usize>], valid: &[bool], combos: &[Vec<usize>]) -> usize {
    let mut counts = vec![0usize; combos.len()];
    for (sel, &ok) in selected.iter().zip(valid.iter()) {
        if !ok {
            continue;
        }
        let idx = combos.iter().position(|c| c == sel).expect("selection set out of range");
        counts[idx] += 1;
    }
    counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

#[cfg(test)]
mod tests;
