use std::fs;

use evslam_core::dataset::Dataset;
use evslam_core::pipeline::{self, PipelineConfig, SceneKind, SimulateOptions};

fn wall_config(duration: f64) -> PipelineConfig {
    PipelineConfig {
        simulate: SimulateOptions {
            scene: SceneKind::Wall,
            duration,
            event_rate: 1000.0,
            ..SimulateOptions::default()
        },
        ..PipelineConfig::default()
    }
}

fn simulate(config: &PipelineConfig) -> Dataset {
    config.simulate.rig().generate(config.exec()).unwrap()
}

#[test]
fn config_round_trips_through_toml() {
    let mut config = wall_config(3.0);
    config.min_rv_baseline = 0.1;
    config.tsdf.voxel_size = 0.02;
    let back = PipelineConfig::from_toml(&config.to_toml()).unwrap();
    assert_eq!(back, config);
    assert!(PipelineConfig::from_toml("min_rv_baseline = -1.0").is_err());
}

#[test]
fn empty_event_file_fails_cleanly() {
    let config = wall_config(0.3);
    let dir = tempfile::tempdir().unwrap();
    simulate(&config).save(dir.path()).unwrap();
    fs::write(dir.path().join("events.txt"), "").unwrap();
    let result = Dataset::load(dir.path()).and_then(|d| pipeline::run_tracking(&d, &config).map(|_| ()));
    assert!(result.is_err());
}

#[test]
fn wall_mapping_reconstructs_the_plane() {
    let config = wall_config(2.0);
    let dataset = simulate(&config);
    let mapping = pipeline::run_mapping(&dataset, &config, &dataset.groundtruth_pairs()).unwrap();
    assert!(mapping.rvs.len() >= 2);
    assert!(!mapping.mesh.vertices.is_empty());

    // The wall is the plane x = 2.
    let sq: f64 = mapping.mesh.vertices.iter().map(|v| (v.x - 2.0).powi(2)).sum();
    let rms = (sq / mapping.mesh.vertices.len() as f64).sqrt();
    let median = {
        let mut d: Vec<f64> = mapping.mesh.vertices.iter().map(|v| (v.x - 2.0).abs()).collect();
        d.sort_by(f64::total_cmp);
        d[d.len() / 2]
    };
    println!("mesh vertices {} rms {rms:.4} m median {median:.4} m", mapping.mesh.vertices.len());
    assert!(rms < 0.15, "mesh rms {rms}");
    assert!(median < 0.08, "mesh median {median}");

    let again = pipeline::run_mapping(&dataset, &config, &dataset.groundtruth_pairs()).unwrap();
    assert_eq!(again.mesh.vertices, mapping.mesh.vertices);
    assert_eq!(again.mesh.triangles, mapping.mesh.triangles);
}

#[test]
fn pose_holes_skip_only_the_affected_views() {
    let config = wall_config(2.0);
    let dataset = simulate(&config);
    let poses: Vec<_> = dataset.groundtruth_pairs().into_iter().filter(|(t, _)| !(0.9..1.5).contains(t)).collect();
    let mapping = pipeline::run_mapping(&dataset, &config, &poses).unwrap();
    assert!(mapping.skipped.iter().any(|(_, why)| why.contains("pose gap")), "{:?}", mapping.skipped);
    assert!(!mapping.rvs.is_empty());
    for r in &mapping.rvs {
        assert!(r.dense.depth.valid.data().iter().any(|v| *v));
    }
}

#[test]
fn slam_matches_sequential_tracking_and_mapping() {
    let config = PipelineConfig {
        simulate: SimulateOptions {
            duration: 2.0,
            ..SimulateOptions::default()
        },
        ..PipelineConfig::default()
    };
    let dataset = simulate(&config);
    let (tracking, mapping, _) = pipeline::run_slam(&dataset, &config).unwrap();
    let (reference, _) = pipeline::run_tracking(&dataset, &config).unwrap();
    assert_eq!(tracking.trajectory, reference.trajectory);
    assert_eq!(tracking.keyframes, reference.keyframes);

    let sequential = pipeline::run_mapping(&dataset, &config, &reference.keyframes).unwrap();
    assert_eq!(mapping.rvs.len(), sequential.rvs.len());
    assert_eq!(mapping.skipped, sequential.skipped);
    assert_eq!(mapping.mesh.vertices, sequential.mesh.vertices);
}
