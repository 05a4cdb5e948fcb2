//! Scratch driver for sizing the acceptance runs (not part of the library).

use std::time::Instant;

use mono3dv::config::ScenarioConfig;
use mono3dv::eval::{ap_r40, filter_by_confidence};
use mono3dv::geometry::iou_3d;
use mono3dv::kitti::generate_scene;
use mono3dv::model::{full_model_gradcheck, predict_scene, train, Variant};

fn gradcheck_probe() {
    let cfg = ScenarioConfig {
        hidden_dim: 16,
        ffn_dim: 16,
        nheads: 4,
        decoder_layers: 2,
        n_queries: 4,
        groups: 2,
        noisy_groups: 2,
        feature_tokens: 8,
        dropout: 0.0,
        ..ScenarioConfig::desk()
    };
    let scene = generate_scene(1, 2, &cfg.scene_gen()).unwrap();
    let t0 = Instant::now();
    let err = full_model_gradcheck(&cfg, &scene, Variant::Full, 7, 1e-5).unwrap();
    println!("gradcheck: rel err {:.3e} in {:.1?}", err, t0.elapsed());
}

fn overfit_probe(lr: f64, steps: usize) {
    let mut cfg = ScenarioConfig::desk();
    cfg.lr = lr;
    cfg.epochs = steps / 5;
    cfg.trigger_epoch = cfg.epochs / 3;
    cfg.lr_decay_epochs = vec![cfg.epochs / 3, cfg.epochs / 2, cfg.epochs * 2 / 3, cfg.epochs * 4 / 5];
    let scenes: Vec<_> = (0..5).map(|s| generate_scene(100 + s, 3, &cfg.scene_gen()).unwrap()).collect();
    let t0 = Instant::now();
    let out = train(&scenes, &cfg, Variant::Full, 11).unwrap();
    let l10 = out.log.step_det_losses[9];
    let lend = *out.log.step_det_losses.last().unwrap();
    println!(
        "overfit lr={} steps={}: l_det[9]={:.4} l_det[end]={:.4} ratio={:.1} in {:.1?}",
        lr, steps, l10, lend, l10 / lend, t0.elapsed()
    );
    let dets: Vec<_> = scenes
        .iter()
        .map(|s| filter_by_confidence(predict_scene(&out.store, &cfg, s).unwrap(), 0.2))
        .collect();
    let gts: Vec<_> = scenes.iter().map(|s| s.objects.clone()).collect();
    let ap = ap_r40(&dets, &gts, iou_3d, 0.5);
    println!("  AP3D@0.5 = {:?}", ap);
}

fn entropy_probe(seeds: u64) {
    let cfg = ScenarioConfig::desk();
    let scenes: Vec<_> = (0..20)
        .map(|s| generate_scene(1000 + s, 1 + (s % 3) as usize, &cfg.scene_gen()).unwrap())
        .collect();
    let mut wins = 0;
    for seed in 0..seeds {
        let t0 = Instant::now();
        let vae = train(&scenes, &cfg, Variant::Full, seed).unwrap();
        let ae = train(&scenes, &cfg, Variant::Ae, seed).unwrap();
        let tail = cfg.epochs / 5;
        let mean_tail = |log: &mono3dv::model::TrainLog| {
            let vals: Vec<f64> = log
                .epochs
                .iter()
                .rev()
                .take(tail)
                .filter_map(|m| m.entropy_full)
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let (hv, ha) = (mean_tail(&vae.log), mean_tail(&ae.log));
        let win = hv >= ha;
        wins += win as usize;
        println!(
            "seed {}: vae={:.4} ae={:.4} win={} ({:.1?} for both runs)",
            seed, hv, ha, win, t0.elapsed()
        );
    }
    println!("entropy wins: {}/{}", wins, seeds);
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    match args.get(1).map(String::as_str) {
        Some("grad") => gradcheck_probe(),
        Some("overfit") => {
            let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
            overfit_probe(lr, 300);
        }
        Some("entropy") => {
            let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2);
            entropy_probe(seeds);
        }
        _ => {
            gradcheck_probe();
        }
    }
}
