#[path = "support/featcheck.rs"]
mod featcheck;

use featcheck::{orthonormality_error, rank3_grid, reconstruction_error, texture_variances};
use scribseg::backbone::{Backbone, BackboneSpec};
use scribseg::featviz::{pca_fit, pca_rgb_image};
use scribseg::synthetic::{generate, SceneConfig};

#[test]
fn components_are_orthonormal_and_rank3_reconstructs() {
    // both the covariance path (n > dim) and the Gram path (n < dim)
    for (seed, rows, cols, dim) in [(1, 20, 20, 12), (2, 4, 5, 64), (3, 16, 16, 768)] {
        let grid = rank3_grid(seed, rows, cols, dim);
        let fit = pca_fit(&grid).unwrap();
        assert!(!fit.degenerate);
        assert!(orthonormality_error(&fit) < 1e-6);
        let e = reconstruction_error(&grid, &fit);
        assert!(e < 1e-5, "dims {rows}x{cols}x{dim}: {e}");
    }
}

#[test]
fn textures_separate_in_colour() {
    let scene = generate(&SceneConfig { size: 384, ..SceneConfig::default() }).unwrap();
    let backbone = Backbone::synthetic(BackboneSpec::default()).unwrap();
    for &layer in &backbone.spec().tap_layers {
        let (map, degenerate) = pca_rgb_image(&backbone, &scene.image, layer, true).unwrap();
        assert!(!degenerate);
        let (within, between) = texture_variances(&map, &scene.truth);
        assert!(within < between, "layer {layer}: within {within:.1} between {between:.1}");
    }
}

#[test]
fn non_tap_layer_is_rejected() {
    let scene = generate(&SceneConfig { size: 64, ..SceneConfig::default() });
    let backbone = Backbone::synthetic(BackboneSpec::default()).unwrap();
    if let Ok(scene) = scene {
        assert!(pca_rgb_image(&backbone, &scene.image, 5, false).is_err());
    }
}
