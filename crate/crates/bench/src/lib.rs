//! Deterministic inputs shared by the benchmarks.

use dbgc_core::cnn::{CnnConfig, CnnParams};
use dbgc_core::graph::{build_graph, SuperpixelGraph};
use dbgc_core::polsar::{extract_features, pauli_rgb, synth_scene, FeatureImage, SceneSpec};
use dbgc_core::slic::{slic_segment, SlicParams, SuperpixelSegmentation};
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Scene {
    pub features: FeatureImage,
    pub pauli: RgbImage,
}

pub fn scene(size: usize) -> Scene {
    let (coh, _) = synth_scene(&SceneSpec::five_class(size, size), 1).expect("valid scene");
    Scene {
        features: extract_features(&coh).normalize(),
        pauli: pauli_rgb(&coh),
    }
}

pub fn superpixel_graph(scene: &Scene, k_target: usize) -> (SuperpixelSegmentation, SuperpixelGraph) {
    let seg = slic_segment(&scene.pauli, &SlicParams::new(k_target)).expect("valid k");
    let graph = build_graph(&scene.features, &seg, None).expect("matching sizes");
    (seg, graph)
}

pub fn cnn(config: &CnnConfig) -> CnnParams {
    CnnParams::init(config, &mut ChaCha8Rng::seed_from_u64(0)).expect("valid config")
}
