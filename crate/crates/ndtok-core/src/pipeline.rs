//! End-to-end orchestration: cloud → multi-scale grids → features → decoder →
//! token bundle, plus the language-endpoint round trip for segmentation.
//!
//! The per-scale stage is self-contained and internally sequential, so callers
//! may run scales on separate workers and still get byte-identical results.

use alloc::string::String;
use alloc::vec::Vec;

use crate::cloud::{CameraView, PointCloud};
use crate::config::PipelineConfig;
use crate::encoder::{self, FeatureMatrix};
use crate::error::{invalid, Result};
use crate::msdec::{
    self, LanguageEndpoint, PromptInput, QuerySet, SegQuerySource, TokenBundle, SEG_TOKEN,
};
use crate::ndt::{self, MultiScaleNdt, NdtGrid, VisibilityOptions};
use crate::params::ParamStore;

pub fn visibility_options(config: &PipelineConfig) -> VisibilityOptions {
    VisibilityOptions {
        depth_test: config.depth_test,
        depth_tolerance: config.depth_tolerance,
    }
}

#[derive(Debug, Clone)]
pub struct ScaleOutput {
    pub grid: NdtGrid,
    pub features: FeatureMatrix,
}

/// Builds, colorizes (when views exist), and encodes one scale.
pub fn scale_stage(
    cloud: &PointCloud,
    origin: [f64; 3],
    scale_idx: usize,
    cell_size: f64,
    views: &[CameraView],
    store: &ParamStore,
    config: &PipelineConfig,
) -> Result<ScaleOutput> {
    let mut grid = ndt::build_ndt_grid(cloud, cell_size, origin)?;
    if config.regularize_build {
        grid.regularize_covariance(config.covariance_regularizer);
    }
    if !views.is_empty() {
        grid = ndt::colorize_cells(&grid, views, visibility_options(config))?;
    }
    let features = encoder::encode_scale(&grid, store, scale_idx, config)?;
    Ok(ScaleOutput { grid, features })
}

#[derive(Debug, Clone)]
pub struct SceneTokens {
    pub ndt: MultiScaleNdt,
    pub features: Vec<FeatureMatrix>,
    pub queries: QuerySet,
    pub bundle: TokenBundle,
}

/// Decoder + alignment over already-encoded scales.
pub fn fuse_stage(
    ndt: &MultiScaleNdt,
    features: &[FeatureMatrix],
    prompt: Option<&PromptInput>,
    store: &ParamStore,
    config: &PipelineConfig,
) -> Result<(QuerySet, TokenBundle)> {
    let prompt_row = match prompt {
        Some(p) => Some(msdec::embed_prompt(
            p,
            ndt.finest(),
            features.last().ok_or_else(|| invalid("no features"))?,
            store,
        )?),
        None => None,
    };
    let queries = msdec::run_msdec(features, store, config, prompt_row, None)?;
    let bundle = msdec::align_tokens(&queries, store, config)?;
    Ok((queries, bundle))
}

/// Full tokenization pipeline on a single worker.
pub fn tokenize_scene(
    cloud: &PointCloud,
    views: &[CameraView],
    prompt: Option<&PromptInput>,
    store: &ParamStore,
    config: &PipelineConfig,
) -> Result<SceneTokens> {
    config.validate()?;
    let (origin, _) = cloud.bounding_box();
    let mut grids = Vec::with_capacity(config.scale_count());
    let mut features = Vec::with_capacity(config.scale_count());
    for (r, &size) in config.scales.iter().enumerate() {
        let out = scale_stage(cloud, origin, r, size, views, store, config)?;
        grids.push(out.grid);
        features.push(out.features);
    }
    let ndt = MultiScaleNdt::from_grids(grids, config.scales.clone(), origin)?;
    let (queries, bundle) = fuse_stage(&ndt, &features, prompt, store, config)?;
    Ok(SceneTokens { ndt, features, queries, bundle })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationOutcome {
    pub cell_logits: Vec<f64>,
    pub cell_mask: Vec<bool>,
    pub point_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointRun {
    pub response_text: String,
    /// Present exactly when the response carried the segmentation trigger.
    pub segmentation: Option<SegmentationOutcome>,
}

/// Sends the token sequence to a language endpoint; a [SEG] trigger in the
/// response runs mask decoding once and exports the per-point mask.
pub fn respond_and_segment(
    scene: &SceneTokens,
    cloud: &PointCloud,
    text_tokens: &[u32],
    endpoint: &dyn LanguageEndpoint,
    store: &ParamStore,
    config: &PipelineConfig,
) -> Result<EndpointRun> {
    let sequence = msdec::assemble_llm_input(&scene.bundle, text_tokens);
    let response = endpoint.generate(&sequence);
    let segmentation = if response.text.contains(SEG_TOKEN) {
        let hidden = response
            .seg_hidden
            .ok_or_else(|| invalid("endpoint emitted the segmentation trigger without a hidden state"))?;
        let src = SegQuerySource::new(hidden)?;
        let result =
            msdec::decode_segmentation(&src, &scene.features, scene.ndt.finest(), store, config)?;
        let point_mask = msdec::mask_to_points(&result.cell_mask, scene.ndt.finest(), cloud)?;
        Some(SegmentationOutcome {
            cell_logits: result.cell_logits,
            cell_mask: result.cell_mask,
            point_mask,
        })
    } else {
        None
    };
    Ok(EndpointRun {
        response_text: response.text,
        segmentation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msdec::MockEndpoint;
    use alloc::vec;

    fn toy_config() -> PipelineConfig {
        PipelineConfig {
            scales: vec![2.0, 1.0],
            query_count: 4,
            feature_dim: 8,
            llm_dim: 6,
            encoder_depth: 1,
            heads: 2,
            ..PipelineConfig::default()
        }
    }

    fn toy_cloud() -> PointCloud {
        PointCloud::new(
            vec![
                [0.1, 0.1, 0.1],
                [1.3, 0.4, 0.2],
                [0.2, 1.5, 0.7],
                [1.8, 1.7, 0.3],
                [0.9, 0.8, 1.4],
                [0.4, 0.3, 0.6],
            ],
            None,
        )
        .unwrap()
    }

    #[test]
    fn tokenize_produces_bounded_tokens() {
        let config = toy_config();
        let store = ParamStore::for_config(&config);
        let scene = tokenize_scene(&toy_cloud(), &[], None, &store, &config).unwrap();
        assert_eq!(scene.bundle.rows, config.query_count);
        assert_eq!(scene.bundle.dim, config.llm_dim);
        assert_eq!(scene.features.len(), 2);
    }

    #[test]
    fn tokenize_is_deterministic() {
        let config = toy_config();
        let store = ParamStore::for_config(&config);
        let a = tokenize_scene(&toy_cloud(), &[], None, &store, &config).unwrap();
        let b = tokenize_scene(&toy_cloud(), &[], None, &store, &config).unwrap();
        assert_eq!(a.bundle, b.bundle);
    }

    #[test]
    fn seg_trigger_decodes_exactly_once_and_exports_points() {
        let config = toy_config();
        let store = ParamStore::for_config(&config);
        let cloud = toy_cloud();
        let scene = tokenize_scene(&cloud, &[], None, &store, &config).unwrap();

        let seg_endpoint = MockEndpoint::new(config.llm_dim).with_seg();
        let run = respond_and_segment(&scene, &cloud, &[1, 2, 3], &seg_endpoint, &store, &config).unwrap();
        let outcome = run.segmentation.expect("trigger present");
        assert_eq!(outcome.point_mask.len(), cloud.len());
        assert_eq!(outcome.cell_mask.len(), scene.ndt.finest().len());

        let plain_endpoint = MockEndpoint::new(config.llm_dim);
        let run = respond_and_segment(&scene, &cloud, &[1, 2, 3], &plain_endpoint, &store, &config).unwrap();
        assert!(run.segmentation.is_none());
    }
}
