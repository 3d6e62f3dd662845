//! Multi-scale decoder: learnable queries fused coarse→fine over per-scale
//! features, token alignment, prompt embedding, and segmentation decoding.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::cloud::{PointCloud, Vec3};
use crate::config::PipelineConfig;
use crate::encoder::FeatureMatrix;
use crate::error::{invalid, Result};
use crate::fps;
use crate::ndt::{self, CellIndex, NdtGrid, Region};
use crate::nn::{self, Engine, Eval};
use crate::params::ParamStore;
use crate::rng::CounterRng;
use crate::tensor::Tensor;

/// Decoder state: M base query rows plus optional prompt and segmentation
/// rows that ride along through every layer.
#[derive(Debug, Clone)]
pub struct QueryState<Id> {
    pub base: Id,
    pub prompt: Option<Id>,
    pub seg: Option<Id>,
    /// Number of decoder layers applied so far.
    pub layer_index: usize,
}

pub type QuerySet = QueryState<Tensor>;

impl QuerySet {
    pub fn total_rows(&self) -> usize {
        self.base.rows()
            + self.prompt.as_ref().map_or(0, |_| 1)
            + self.seg.as_ref().map_or(0, |_| 1)
    }
}

/// User prompt: a click, a box, or an explicit finest-cell mask.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptInput {
    /// Click with an optional radius; defaults to the finest cell size.
    Point { center: Vec3, radius: Option<f64> },
    Box { min: Vec3, max: Vec3 },
    Mask(Vec<CellIndex>),
}

impl PromptInput {
    pub fn to_region(&self, finest_cell_size: f64) -> Region {
        match self {
            PromptInput::Point { center, radius } => Region::Sphere {
                center: *center,
                radius: radius.unwrap_or(finest_cell_size),
            },
            PromptInput::Box { min, max } => Region::Aabb { min: *min, max: *max },
            PromptInput::Mask(cells) => Region::Cells(cells.clone()),
        }
    }
}

/// Hidden state of the segmentation trigger token, as supplied by the
/// language endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SegQuerySource {
    hidden: Tensor,
}

impl SegQuerySource {
    pub fn new(hidden: Tensor) -> Result<Self> {
        if hidden.rows() != 1 {
            return Err(invalid("seg hidden state must be a single row"));
        }
        hidden.ensure_finite("seg hidden state")?;
        Ok(SegQuerySource { hidden })
    }

    pub fn hidden(&self) -> &Tensor {
        &self.hidden
    }
}

pub const TOKEN_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct BundleMetadata {
    pub scales: Vec<f64>,
    pub query_count: usize,
    pub version: u32,
}

/// Scene tokens ready for a language endpoint. Stored as f32, the dtype of
/// the serialized format, so write∘read is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBundle {
    /// rows × dim, row-major.
    pub scene_tokens: Vec<f32>,
    pub rows: usize,
    pub dim: usize,
    pub guidance_token: Option<Vec<f32>>,
    pub metadata: BundleMetadata,
}

impl TokenBundle {
    pub fn validate(&self) -> Result<()> {
        if self.scene_tokens.len() != self.rows * self.dim {
            return Err(invalid("scene token buffer does not match its shape"));
        }
        if self.rows != self.metadata.query_count {
            return Err(invalid("scene token count must equal the configured query count"));
        }
        if let Some(g) = &self.guidance_token {
            if g.len() != self.dim {
                return Err(invalid("guidance token width mismatch"));
            }
        }
        if !self.scene_tokens.iter().all(|v| v.is_finite()) {
            return Err(invalid("scene tokens must be finite"));
        }
        Ok(())
    }
}

/// Query initialization: farthest-point–sampled rows of the finest-scale
/// features through the initial projection.
pub fn init_queries_in<E: Engine>(
    e: &mut E,
    f_finest: &E::Id,
    finest_positions: &[Vec3],
    m: usize,
    store: &ParamStore,
) -> Result<QueryState<E::Id>> {
    if m == 0 {
        return Err(invalid("query count must be >= 1"));
    }
    let (rows, _) = e.shape(f_finest);
    if rows != finest_positions.len() {
        return Err(invalid("feature rows do not match cell positions"));
    }
    let indices = fps::select_indices(finest_positions, m);
    let selected = e.gather_rows(f_finest, &indices)?;
    let wq = e.param(store, "msdec.init.wq")?;
    let base = e.matmul(&selected, &wq)?;
    Ok(QueryState { base, prompt: None, seg: None, layer_index: 0 })
}

pub fn init_queries(f_finest: &FeatureMatrix, m: usize, store: &ParamStore) -> Result<QuerySet> {
    init_queries_in(&mut Eval, &f_finest.values, &f_finest.positions, m, store)
}

/// One decoder layer: cross-attention over the scale-r features (projected to
/// keys/values), self-attention, then the residual FFN. Prompt/seg rows are
/// stacked with the base rows for all three sublayers.
pub fn decoder_layer_in<E: Engine>(
    e: &mut E,
    q: &QueryState<E::Id>,
    f_r: &E::Id,
    store: &ParamStore,
    r: usize,
    heads: usize,
) -> Result<QueryState<E::Id>> {
    let prefix = format!("msdec.layer{r}");
    let extra = q.prompt.is_some() as usize + q.seg.is_some() as usize;
    let stacked = if extra == 0 {
        q.base.clone()
    } else {
        let mut parts = vec![q.base.clone()];
        if let Some(p) = &q.prompt {
            parts.push(p.clone());
        }
        if let Some(s) = &q.seg {
            parts.push(s.clone());
        }
        e.concat_rows(&parts)?
    };

    let wk = e.param(store, &format!("{prefix}.wk"))?;
    let wv = e.param(store, &format!("{prefix}.wv"))?;
    let keys = e.matmul(f_r, &wk)?;
    let values = e.matmul(f_r, &wv)?;

    let x = nn::multi_head_attention(e, store, &stacked, &keys, &values, heads, &format!("{prefix}.cross"))?;
    let x = nn::multi_head_attention(e, store, &x, &x, &x, heads, &format!("{prefix}.self"))?;
    let x = nn::ffn(e, store, &x, &format!("{prefix}.ffn"))?;

    let (m, _) = e.shape(&q.base);
    if extra == 0 {
        return Ok(QueryState { base: x, prompt: None, seg: None, layer_index: r + 1 });
    }
    let base = e.slice_rows(&x, 0, m)?;
    let mut offset = m;
    let prompt = match &q.prompt {
        Some(_) => {
            let row = e.slice_rows(&x, offset, 1)?;
            offset += 1;
            Some(row)
        }
        None => None,
    };
    let seg = match &q.seg {
        Some(_) => Some(e.slice_rows(&x, offset, 1)?),
        None => None,
    };
    Ok(QueryState { base, prompt, seg, layer_index: r + 1 })
}

pub fn decoder_layer(
    q: &QuerySet,
    f_r: &FeatureMatrix,
    store: &ParamStore,
    r: usize,
    heads: usize,
) -> Result<QuerySet> {
    decoder_layer_in(&mut Eval, q, &f_r.values, store, r, heads)
}

/// Full decoder: queries initialized from the finest scale, then one layer
/// per scale, coarse to fine.
pub fn run_msdec_in<E: Engine>(
    e: &mut E,
    features: &[E::Id],
    finest_positions: &[Vec3],
    store: &ParamStore,
    config: &PipelineConfig,
    prompt: Option<E::Id>,
    seg: Option<E::Id>,
) -> Result<QueryState<E::Id>> {
    if features.len() != config.scale_count() {
        return Err(invalid(format!(
            "{} feature matrices for {} configured scales",
            features.len(),
            config.scale_count()
        )));
    }
    let finest = features.last().expect("validated nonempty");
    let mut q = init_queries_in(e, finest, finest_positions, config.query_count, store)?;
    q.prompt = prompt;
    q.seg = seg;
    for (r, f) in features.iter().enumerate() {
        q = decoder_layer_in(e, &q, f, store, r, config.heads)?;
    }
    Ok(q)
}

pub fn run_msdec(
    features: &[FeatureMatrix],
    store: &ParamStore,
    config: &PipelineConfig,
    prompt: Option<Tensor>,
    seg: Option<Tensor>,
) -> Result<QuerySet> {
    let ids: Vec<Tensor> = features.iter().map(|f| f.values.clone()).collect();
    let finest_positions = &features.last().ok_or_else(|| invalid("no features"))?.positions;
    run_msdec_in(&mut Eval, &ids, finest_positions, store, config, prompt, seg)
}

/// Projects decoder outputs into the token space: scene tokens from the base
/// rows, a guidance token from the prompt row when present.
pub fn align_tokens(q: &QuerySet, store: &ParamStore, config: &PipelineConfig) -> Result<TokenBundle> {
    let ev = nn::mlp2(&mut Eval, store, &q.base, "fmm", config.head_activation)?;
    let guidance = match &q.prompt {
        Some(p) => {
            let g = nn::mlp2(&mut Eval, store, p, "fmm", config.head_activation)?;
            Some(g.data().iter().map(|&v| v as f32).collect())
        }
        None => None,
    };
    let bundle = TokenBundle {
        scene_tokens: ev.data().iter().map(|&v| v as f32).collect(),
        rows: ev.rows(),
        dim: ev.cols(),
        guidance_token: guidance,
        metadata: BundleMetadata {
            scales: config.scales.clone(),
            query_count: config.query_count,
            version: TOKEN_FORMAT_VERSION,
        },
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Average-pools the finest-scale feature rows selected by the prompt region
/// and projects the pooled feature into a query row.
pub fn embed_prompt(
    prompt: &PromptInput,
    grid_finest: &NdtGrid,
    f_finest: &FeatureMatrix,
    store: &ParamStore,
) -> Result<Tensor> {
    if f_finest.rows() != grid_finest.len() {
        return Err(invalid("feature rows do not match grid cells"));
    }
    let region = prompt.to_region(grid_finest.cell_size());
    let mask = ndt::points_in_region(grid_finest, &region)?;
    let selected: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &on)| on.then_some(i))
        .collect();
    if selected.is_empty() {
        return Err(invalid("empty prompt region"));
    }
    let d = f_finest.dim;
    let mut pooled = vec![0.0f64; d];
    for &i in &selected {
        for (p, &v) in pooled.iter_mut().zip(f_finest.row(i)) {
            *p += v;
        }
    }
    for p in &mut pooled {
        *p /= selected.len() as f64;
    }
    let pooled = Tensor::new(1, d, pooled)?;
    nn::linear(&mut Eval, store, &pooled, "prompt.proj.w", Some("prompt.proj.b"))
}

/// Segmentation logits over finest-scale cells, generic over engine: the seg
/// query decoded through all layers, turned into a kernel, dotted with the
/// finest features.
pub fn seg_logits_in<E: Engine>(
    e: &mut E,
    hidden: &E::Id,
    features: &[E::Id],
    finest_positions: &[Vec3],
    store: &ParamStore,
    config: &PipelineConfig,
) -> Result<E::Id> {
    let q1s = nn::mlp2(e, store, hidden, "fs", config.head_activation)?;
    let out = run_msdec_in(e, features, finest_positions, store, config, None, Some(q1s))?;
    let seg_row = out.seg.expect("seg query rode through the decoder");
    let kernel = nn::mlp2(e, store, &seg_row, "fm", config.head_activation)?;
    // logits_j = F_R[j] · kernel
    e.matmul_nt(features.last().expect("nonempty"), &kernel)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    /// One logit per finest-scale cell, canonical order.
    pub cell_logits: Vec<f64>,
    /// sigmoid(logit) > 0.5, strict (zero logits decode to false).
    pub cell_mask: Vec<bool>,
}

pub fn decode_segmentation(
    src: &SegQuerySource,
    features: &[FeatureMatrix],
    grid_finest: &NdtGrid,
    store: &ParamStore,
    config: &PipelineConfig,
) -> Result<SegmentationResult> {
    if src.hidden.cols() != config.llm_dim {
        return Err(invalid(format!(
            "seg hidden width {} does not match llm_dim {}",
            src.hidden.cols(),
            config.llm_dim
        )));
    }
    let finest = features.last().ok_or_else(|| invalid("no features"))?;
    if finest.rows() != grid_finest.len() {
        return Err(invalid("feature rows do not match grid cells"));
    }
    let ids: Vec<Tensor> = features.iter().map(|f| f.values.clone()).collect();
    let logits = seg_logits_in(&mut Eval, &src.hidden, &ids, &finest.positions, store, config)?;
    let cell_logits: Vec<f64> = logits.data().to_vec();
    let cell_mask = cell_logits.iter().map(|&l| l > 0.0).collect();
    Ok(SegmentationResult { cell_logits, cell_mask })
}

/// Per-point labels from per-cell labels via the finest-scale assignment.
pub fn mask_to_points(
    cell_mask: &[bool],
    grid_finest: &NdtGrid,
    cloud: &PointCloud,
) -> Result<Vec<bool>> {
    if cell_mask.len() != grid_finest.len() {
        return Err(invalid(format!(
            "cell mask length {} does not match occupied cell count {}",
            cell_mask.len(),
            grid_finest.len()
        )));
    }
    if grid_finest.point_assignment().len() != cloud.len() {
        return Err(invalid("grid was built from a different cloud"));
    }
    Ok(grid_finest
        .point_assignment()
        .iter()
        .map(|&row| cell_mask[row])
        .collect())
}

/// Multimodal input sequence: scene token rows, then the guidance token when
/// present, then the text token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSequence {
    pub visual_rows: Vec<Vec<f32>>,
    pub text_tokens: Vec<u32>,
}

impl MultimodalSequence {
    pub fn len(&self) -> usize {
        self.visual_rows.len() + self.text_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn assemble_llm_input(bundle: &TokenBundle, text_tokens: &[u32]) -> MultimodalSequence {
    let mut visual_rows = Vec::with_capacity(bundle.rows + 1);
    for i in 0..bundle.rows {
        visual_rows.push(bundle.scene_tokens[i * bundle.dim..(i + 1) * bundle.dim].to_vec());
    }
    if let Some(g) = &bundle.guidance_token {
        visual_rows.push(g.clone());
    }
    MultimodalSequence {
        visual_rows,
        text_tokens: text_tokens.to_vec(),
    }
}

pub const SEG_TOKEN: &str = "[SEG]";

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointResponse {
    pub text: String,
    /// Hidden state for each emitted segmentation trigger.
    pub seg_hidden: Option<Tensor>,
}

/// Consumes the multimodal sequence and produces text, optionally carrying a
/// hidden state that seeds mask decoding.
pub trait LanguageEndpoint {
    fn generate(&self, input: &MultimodalSequence) -> EndpointResponse;
}

/// Deterministic stand-in for a real language endpoint: fixed text, and a
/// fixed hidden state drawn from the name-keyed RNG when configured to
/// request segmentation.
#[derive(Debug, Clone)]
pub struct MockEndpoint {
    d_llm: usize,
    emit_seg: bool,
    seed: u64,
}

impl MockEndpoint {
    pub fn new(d_llm: usize) -> Self {
        MockEndpoint { d_llm, emit_seg: false, seed: 0 }
    }

    pub fn with_seg(mut self) -> Self {
        self.emit_seg = true;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn seg_hidden(&self) -> Tensor {
        let mut rng = CounterRng::new(self.seed, "mock.seg_hidden");
        let data = (0..self.d_llm).map(|_| rng.next_range(-1.0, 1.0)).collect();
        Tensor::new(1, self.d_llm, data).expect("shape consistent")
    }

    /// Deterministic token logits for loss tests.
    pub fn token_logits(&self, positions: usize, vocab: usize) -> Tensor {
        let mut rng = CounterRng::new(self.seed, "mock.token_logits");
        let data = (0..positions * vocab).map(|_| rng.next_range(-2.0, 2.0)).collect();
        Tensor::new(positions, vocab, data).expect("shape consistent")
    }
}

impl LanguageEndpoint for MockEndpoint {
    fn generate(&self, _input: &MultimodalSequence) -> EndpointResponse {
        if self.emit_seg {
            EndpointResponse {
                text: format!("Here is the requested region. {SEG_TOKEN}"),
                seg_hidden: Some(self.seg_hidden()),
            }
        } else {
            EndpointResponse {
                text: "The scene contains structured surfaces and scattered objects.".into(),
                seg_hidden: None,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder;

    fn toy_config() -> PipelineConfig {
        PipelineConfig {
            scales: vec![2.0, 1.0],
            query_count: 3,
            feature_dim: 8,
            llm_dim: 6,
            encoder_depth: 1,
            heads: 2,
            ..PipelineConfig::default()
        }
    }

    /// Spread wide enough that even the coarsest scale has several cells —
    /// a single-cell scale collapses every query to one value row.
    fn toy_points() -> Vec<Vec3> {
        vec![
            [0.1, 0.1, 0.1],
            [1.3, 0.4, 0.2],
            [0.2, 1.5, 0.7],
            [1.8, 1.7, 0.3],
            [0.9, 0.8, 1.4],
            [2.6, 2.4, 0.2],
            [2.8, 0.3, 1.9],
        ]
    }

    fn toy_scene(config: &PipelineConfig) -> (NdtGrid, Vec<FeatureMatrix>, ParamStore) {
        let cloud = PointCloud::new(toy_points(), None).unwrap();
        let ms = ndt::build_multiscale(&cloud, &config.scales).unwrap();
        let store = ParamStore::for_config(config);
        let features: Vec<FeatureMatrix> = (0..ms.scale_count())
            .map(|r| encoder::encode_scale(ms.grid(r), &store, r, config).unwrap())
            .collect();
        (ms.finest().clone(), features, store)
    }

    #[test]
    fn init_queries_exhausts_and_projects() {
        let config = toy_config();
        let (_, features, store) = toy_scene(&config);
        let finest = features.last().unwrap();
        let n = finest.rows();
        let q = init_queries(finest, n, &store).unwrap();
        assert_eq!(q.base.rows(), n);

        let one = init_queries(finest, 1, &store).unwrap();
        // m = 1 selects the seed cell (canonical row 0).
        let wq = store.get("msdec.init.wq").unwrap();
        let expected = crate::linalg::matmul(finest.row(0), 1, finest.dim, wq.data(), wq.cols());
        assert_eq!(one.base.data(), &expected[..]);
    }

    #[test]
    fn zero_queries_rejected() {
        let config = toy_config();
        let (_, features, store) = toy_scene(&config);
        assert!(init_queries(features.last().unwrap(), 0, &store).is_err());
    }

    #[test]
    fn run_msdec_single_scale_equals_layer_after_init() {
        let mut config = toy_config();
        config.scales = vec![1.0];
        let (_, features, store) = toy_scene(&config);
        let out = run_msdec(&features, &store, &config, None, None).unwrap();

        let init = init_queries(&features[0], config.query_count, &store).unwrap();
        let one = decoder_layer(&init, &features[0], &store, 0, config.heads).unwrap();
        assert_eq!(out.base, one.base);
        assert_eq!(out.layer_index, 1);
    }

    #[test]
    fn prompt_query_changes_base_rows_and_adds_one() {
        let config = toy_config();
        let (grid, features, store) = toy_scene(&config);

        let plain = run_msdec(&features, &store, &config, None, None).unwrap();
        let prompt = PromptInput::Box { min: [-1.0; 3], max: [3.0; 3] };
        let row = embed_prompt(&prompt, &grid, features.last().unwrap(), &store).unwrap();
        let with = run_msdec(&features, &store, &config, Some(row), None).unwrap();

        assert_eq!(with.total_rows(), config.query_count + 1);
        assert!(with.prompt.is_some());
        let max_diff = plain
            .base
            .data()
            .iter()
            .zip(with.base.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff >= 1e-9, "prompt must influence base queries, diff {max_diff}");
    }

    #[test]
    fn msdec_is_deterministic() {
        let config = toy_config();
        let (_, features, store) = toy_scene(&config);
        let a = run_msdec(&features, &store, &config, None, None).unwrap();
        let b = run_msdec(&features, &store, &config, None, None).unwrap();
        assert_eq!(a.base, b.base);
    }

    #[test]
    fn align_tokens_shapes_and_optional_guidance() {
        let config = toy_config();
        let (grid, features, store) = toy_scene(&config);

        let plain = run_msdec(&features, &store, &config, None, None).unwrap();
        let bundle = align_tokens(&plain, &store, &config).unwrap();
        assert_eq!(bundle.rows, config.query_count);
        assert_eq!(bundle.dim, config.llm_dim);
        assert!(bundle.guidance_token.is_none());

        let prompt = PromptInput::Point { center: grid.cells()[0].stats.mean, radius: None };
        let row = embed_prompt(&prompt, &grid, features.last().unwrap(), &store).unwrap();
        let with = run_msdec(&features, &store, &config, Some(row), None).unwrap();
        let bundle = align_tokens(&with, &store, &config).unwrap();
        assert!(bundle.guidance_token.is_some());
    }

    #[test]
    fn identity_alignment_head_passes_rows_through() {
        let mut config = toy_config();
        config.llm_dim = config.feature_dim;
        config.head_activation = crate::config::HeadActivation::Identity;
        let (_, features, mut store) = toy_scene(&config);
        let d = config.feature_dim;
        store.insert("fmm.w1", Tensor::eye(d));
        store.insert("fmm.b1", Tensor::zeros(1, d));
        store.insert("fmm.w2", Tensor::eye(d));
        store.insert("fmm.b2", Tensor::zeros(1, d));

        let q = run_msdec(&features, &store, &config, None, None).unwrap();
        let bundle = align_tokens(&q, &store, &config).unwrap();
        for (i, &v) in bundle.scene_tokens.iter().enumerate() {
            assert_eq!(v, q.base.data()[i] as f32);
        }
    }

    #[test]
    fn prompt_pooling_rules() {
        let config = toy_config();
        let (grid, features, store) = toy_scene(&config);
        let finest = features.last().unwrap();

        // one-cell mask pools exactly that row
        let one = PromptInput::Mask(vec![grid.cells()[1].index]);
        let pooled = {
            let region = one.to_region(grid.cell_size());
            let mask = ndt::points_in_region(&grid, &region).unwrap();
            assert_eq!(mask.iter().filter(|&&b| b).count(), 1);
            finest.row(1).to_vec()
        };
        let row = embed_prompt(&one, &grid, finest, &store).unwrap();
        let w = store.get("prompt.proj.w").unwrap();
        let b = store.get("prompt.proj.b").unwrap();
        let mut expected = crate::linalg::matmul(&pooled, 1, finest.dim, w.data(), w.cols());
        crate::linalg::add_bias_rows(&mut expected, 1, w.cols(), b.data());
        assert_eq!(row.data(), &expected[..]);

        // box outside the scene errors
        let outside = PromptInput::Box { min: [50.0; 3], max: [60.0; 3] };
        assert!(matches!(
            embed_prompt(&outside, &grid, finest, &store),
            Err(crate::error::CoreError::Invalid(_))
        ));
    }

    #[test]
    fn zero_kernel_decodes_to_empty_mask() {
        let config = toy_config();
        let (grid, features, mut store) = toy_scene(&config);
        // Zero out the mask head so the kernel, and thus all logits, are 0.
        let d = config.feature_dim;
        store.insert("fm.w1", Tensor::zeros(d, d));
        store.insert("fm.b1", Tensor::zeros(1, d));
        store.insert("fm.w2", Tensor::zeros(d, d));
        store.insert("fm.b2", Tensor::zeros(1, d));

        let src = SegQuerySource::new(Tensor::zeros(1, config.llm_dim)).unwrap();
        let res = decode_segmentation(&src, &features, &grid, &store, &config).unwrap();
        assert!(res.cell_logits.iter().all(|&l| l == 0.0));
        assert!(res.cell_mask.iter().all(|&m| !m), "sigmoid 0.5 is strictly not > 0.5");
    }

    #[test]
    fn mask_to_points_assignment() {
        let config = toy_config();
        let (grid, _, _) = toy_scene(&config);
        let cloud = PointCloud::new(toy_points(), None).unwrap();

        let all_on = vec![true; grid.len()];
        assert!(mask_to_points(&all_on, &grid, &cloud).unwrap().iter().all(|&b| b));

        let mut single = vec![false; grid.len()];
        single[2] = true;
        let points = mask_to_points(&single, &grid, &cloud).unwrap();
        for (i, &row) in grid.point_assignment().iter().enumerate() {
            assert_eq!(points[i], row == 2);
        }

        assert!(mask_to_points(&[true], &grid, &cloud).is_err());
    }

    #[test]
    fn sequence_assembly_order_and_length() {
        let bundle = TokenBundle {
            scene_tokens: (0..8).map(|v| v as f32).collect(),
            rows: 4,
            dim: 2,
            guidance_token: Some(vec![9.0, 10.0]),
            metadata: BundleMetadata { scales: vec![1.0], query_count: 4, version: 1 },
        };
        let seq = assemble_llm_input(&bundle, &[7, 8, 9]);
        assert_eq!(seq.len(), 8);
        assert_eq!(seq.visual_rows[4], vec![9.0, 10.0]);

        let no_prompt = TokenBundle { guidance_token: None, ..bundle };
        assert_eq!(assemble_llm_input(&no_prompt, &[7, 8, 9]).len(), 7);
    }

    #[test]
    fn mock_endpoint_is_deterministic() {
        let mock = MockEndpoint::new(6).with_seg();
        let seq = MultimodalSequence { visual_rows: vec![], text_tokens: vec![] };
        let a = mock.generate(&seq);
        let b = mock.generate(&seq);
        assert_eq!(a, b);
        assert!(a.text.contains(SEG_TOKEN));
        assert!(a.seg_hidden.is_some());

        let plain = MockEndpoint::new(6).generate(&seq);
        assert!(!plain.text.contains(SEG_TOKEN));
        assert!(plain.seg_hidden.is_none());
    }
}
