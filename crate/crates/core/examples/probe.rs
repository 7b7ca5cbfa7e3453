// scratch probe: toy-preset feasibility and timing for the paired protocol
use ingeo_core::procedural::{generate_procedural_dataset, sample_prior_cloud, CameraRing, SceneId};
use ingeo_core::train::{train, GridInit, TrainConfig};
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let ring = CameraRing::default(); // 64 train, 16 test, 64x64
    let ds = generate_procedural_dataset(SceneId::TexturedSphere, 1, &ring, 3.46 / 512.0).unwrap();
    eprintln!("dataset gen: {:.1}s", t0.elapsed().as_secs_f64());

    let prior = sample_prior_cloud(&ds.scene, 100_000, 11);
    eprintln!("prior sampled: {:.1}s", t0.elapsed().as_secs_f64());

    let mut cfg = TrainConfig::toy(ds.scene.bbox, 1);
    cfg.iters = 400;
    cfg.checkpoints = vec![10, 50, 100, 150, 200, 300, 400];
    cfg.deterministic = true;

    // Prior arm
    let mut pc = cfg.clone();
    pc.grid_init = GridInit::PriorSplat;
    let t1 = Instant::now();
    let run_p = train(&pc, &ds.train, &ds.test, Some(&prior)).unwrap();
    eprintln!("prior run 400 iters: {:.1}s", t1.elapsed().as_secs_f64());
    for m in &run_p.metrics {
        if m.psnr.is_some() {
            eprintln!("  P it {:4} loss {:.5} psnr {:.2} occ {} spr {:.1}", m.iter, m.loss, m.psnr.unwrap(), m.occupied_cells, m.samples_per_ray);
        }
    }

    // Baseline arm
    let t2 = Instant::now();
    let run_b = train(&cfg, &ds.train, &ds.test, None).unwrap();
    eprintln!("baseline run 400 iters: {:.1}s", t2.elapsed().as_secs_f64());
    for m in &run_b.metrics {
        if m.psnr.is_some() {
            eprintln!("  B it {:4} loss {:.5} psnr {:.2} occ {} spr {:.1}", m.iter, m.loss, m.psnr.unwrap(), m.occupied_cells, m.samples_per_ray);
        }
    }
}
