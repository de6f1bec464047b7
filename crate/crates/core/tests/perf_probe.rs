// Temporary timing probe (removed before release).
use linetween::learn::{forward_loss, Phase};
use linetween::model::{ModelConfig, ModelParams};
use linetween::synth::{build_split_samples, DatasetManifest, Split};
use std::time::Instant;

#[test]
#[ignore]
fn timing() {
    let root = "/tmp/ds2_7";
    let manifest = DatasetManifest::load(format!("{root}/manifest.json")).unwrap();
    let config = ModelConfig {
        feature_dim: 64,
        attention_layers: 2,
        spectral_dim: 64,
        sinkhorn_iterations: 100,
        ..ModelConfig::default()
    };
    let t0 = Instant::now();
    let samples = build_split_samples(&manifest, root, Split::Train, 1, 5, config.spectral_dim).unwrap();
    println!("built {} samples in {:.1?}", samples.len(), t0.elapsed());
    let ks: Vec<usize> = samples.iter().map(|s| s.g0.vertex_count()).collect();
    println!("K min {} max {} mean {:.0}", ks.iter().min().unwrap(), ks.iter().max().unwrap(), ks.iter().sum::<usize>() as f64 / ks.len() as f64);
    let params = ModelParams::init(config, 1);
    let t1 = Instant::now();
    let mut n = 0;
    for s in samples.iter().take(6) {
        let trace = forward_loss(s, &params, Phase::Full, 0.2);
        let grads = trace.gradients();
        drop(grads);
        n += 1;
    }
    let per = t1.elapsed() / n;
    println!("forward+backward (full): {per:.1?} per sample");
    let t2 = Instant::now();
    for s in samples.iter().take(6) {
        let trace = forward_loss(s, &params, Phase::CorrespondenceOnly, 0.2);
        let grads = trace.gradients();
        drop(grads);
    }
    println!("forward+backward (phase1): {:.1?} per sample", t2.elapsed() / 6);
}
