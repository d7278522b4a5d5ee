use std::time::Instant;

use volsplat_core::gaussian::encode_ply;
use volsplat_core::pipeline::{evaluate, run_pipeline, PipelineConfig};
use volsplat_core::render::render_with;
use volsplat_core::synth::{synthesize, SceneKind, SceneSpec};

fn gt_config(voxel: f64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.depth.use_gt = true;
    cfg.voxel.size = voxel;
    cfg
}

#[test]
fn garden_self_consistency() {
    let start = Instant::now();
    let scene = synthesize(&SceneSpec::new(SceneKind::GaussianGarden, 1)).unwrap();
    assert_eq!(scene.views.len(), 4);
    let mut cfg = gt_config(0.02);
    cfg.feature.channels = 3;
    let out = run_pipeline(&scene.views, &cfg).unwrap();
    let report = evaluate(&out.gaussians, &scene.views, Some(4), &cfg.render, &cfg.loss).unwrap();
    println!(
        "garden: psnr {:.2} ssim {:.3} gaussians {}",
        report.mean.psnr, report.mean.ssim, report.gaussians
    );
    assert!(report.mean.psnr >= 30.0, "{}", report.table());
    assert!(start.elapsed().as_secs_f64() < 60.0);
}

#[test]
fn coincident_views_collapse() {
    let mut spec = SceneSpec::new(SceneKind::TexturedWall, 2);
    spec.rig_count = 2;
    spec.rig_baseline = 0.3;
    let views = synthesize(&spec).unwrap().views;
    let twins = vec![views[0].clone(), views[0].clone()];
    let out = run_pipeline(&twins, &gt_config(0.01)).unwrap();
    let hw = 64 * 64;
    assert_eq!(out.diagnostics.points, 2 * hw);
    assert!(out.gaussians.len() < 2 * hw);
    assert!(out.diagnostics.pgs <= hw as f64);
}

#[test]
fn pgs_bounded_for_every_scene_kind() {
    for kind in [
        SceneKind::TexturedWall,
        SceneKind::TwoPlanes,
        SceneKind::Sphere,
        SceneKind::GaussianGarden,
    ] {
        let mut spec = SceneSpec::new(kind, 3);
        spec.width = 32;
        spec.height = 32;
        spec.focal = 32.0;
        let views = synthesize(&spec).unwrap().views;
        for voxel in [0.001, 0.05] {
            let out = run_pipeline(&views, &gt_config(voxel)).unwrap();
            assert!(out.diagnostics.pgs <= 32.0 * 32.0, "{kind:?} {voxel}");
            assert_eq!(out.gaussians.len(), out.diagnostics.occupied_voxels);
        }
    }
}

#[test]
fn occupancy_falls_with_voxel_size() {
    let views = synthesize(&SceneSpec::new(SceneKind::Sphere, 4)).unwrap().views;
    // scene scale = the main surface depth
    let counts: Vec<usize> = [0.05, 0.1, 0.5, 1.0]
        .iter()
        .map(|f| {
            run_pipeline(&views, &gt_config(f * 2.0))
                .unwrap()
                .diagnostics
                .occupied_voxels
        })
        .collect();
    assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
}

#[test]
fn decoder_ablation_equals_zero_refinement() {
    let views = synthesize(&SceneSpec::new(SceneKind::TwoPlanes, 5)).unwrap().views;
    let zero = run_pipeline(&views, &gt_config(0.05)).unwrap();
    let mut cfg = gt_config(0.05);
    cfg.unet.enabled = false;
    let ablated = run_pipeline(&views, &cfg).unwrap();
    assert_eq!(
        encode_ply(&zero.gaussians, Some(4)).unwrap(),
        encode_ply(&ablated.gaussians, Some(4)).unwrap()
    );
    // random refinement changes the result but keeps the site set
    let mut cfg = gt_config(0.05);
    cfg.unet.seed = Some(3);
    cfg.unet.levels = Some(vec![8, 8]);
    cfg.unet.blocks = 1;
    let refined = run_pipeline(&views, &cfg).unwrap();
    assert_eq!(refined.gaussians.keys, zero.gaussians.keys);
    assert_ne!(refined.gaussians, zero.gaussians);
}

#[test]
fn runs_are_deterministic() {
    let views = synthesize(&SceneSpec::new(SceneKind::Sphere, 6)).unwrap().views;
    let mut cfg = PipelineConfig::default();
    cfg.depth.near = 1.0;
    cfg.depth.far = 5.0;
    cfg.depth.num_hypotheses = 12;
    cfg.unet.seed = Some(1);
    cfg.unet.levels = Some(vec![8, 8]);
    cfg.unet.blocks = 1;
    let a = run_pipeline(&views, &cfg).unwrap();
    let b = run_pipeline(&views, &cfg).unwrap();
    assert_eq!(
        encode_ply(&a.gaussians, None).unwrap(),
        encode_ply(&b.gaussians, None).unwrap()
    );
    assert_eq!(
        serde_json::to_string(&a.diagnostics).unwrap(),
        serde_json::to_string(&b.diagnostics).unwrap()
    );
    let opts = cfg.render.options();
    assert_eq!(
        render_with(&a.gaussians, &views[0].camera, &opts),
        render_with(&b.gaussians, &views[0].camera, &opts)
    );
}
