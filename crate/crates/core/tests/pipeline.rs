use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use volsynth::config::RunConfig;
use volsynth::denoiser::Denoiser;
use volsynth::pipeline::{
    param_fingerprint, synthesize, train_sdm_phase, train_vqgan_phase, CheckpointBundle,
    CheckpointPlan, FrozenVqGan,
};
use volsynth::tensor::Tensor;
use volsynth::volume_io::{
    generate_toy_samples, one_hot_batch, preprocess, Dataset, Sample, ToyParams, Volume,
};

fn toy(n: usize, shape: [usize; 3], classes: usize) -> Dataset<f32> {
    let p = ToyParams {
        n,
        shape,
        num_classes: classes,
        seed: 11,
        n_test: 0,
    };
    let samples = generate_toy_samples(&p)
        .unwrap()
        .into_iter()
        .map(|(id, split, v, m)| Sample {
            id,
            split,
            volume: preprocess(&v, shape).unwrap(),
            map: Some(m),
        })
        .collect();
    Dataset { samples, seed: 0 }
}

/// Small networks on the desk-scale volume shape.
fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.compression.codebook_size = 32;
    c.compression.n_z = 4;
    c.compression.base_channels = 4;
    c.compression.num_groups = 2;
    c.compression.disc_channels = 4;
    c.compression.perceptual_channels = vec![4];
    c.denoiser.widths = vec![8, 8];
    c.denoiser.num_groups = 2;
    c.denoiser.time_dim = 8;
    c.denoiser.semantic_channels = 4;
    c.denoiser.spade_hidden = 4;
    c.diffusion.steps = 50;
    c.resolve();
    c.validate().unwrap();
    c
}

fn tiny_config() -> RunConfig {
    let mut c = small_config();
    c.data.shape = [8, 8, 4];
    c.compression.codebook_size = 8;
    c.compression.n_z = 2;
    c.denoiser.widths = vec![4, 4];
    c.vqgan.steps = 4;
    c.diffusion.steps = 6;
    c.diffusion.train_steps = 4;
    c.resolve();
    c.validate().unwrap();
    c
}

#[test]
fn vqgan_reconstruction_improves_on_toy_volumes() {
    let mut c = small_config();
    c.vqgan.steps = 500;
    let data = toy(16, c.data.shape, 3);
    let (_, report) = train_vqgan_phase(&data, &c, 1, CheckpointPlan::default()).unwrap();
    let (first, last) = (
        report.metric("recon_mse_initial").unwrap(),
        report.metric("recon_mse_final").unwrap(),
    );
    assert!(last < first, "reconstruction MSE {first} -> {last}");
}

#[test]
fn denoising_loss_decreases() {
    let mut c = small_config();
    c.vqgan.steps = 20;
    c.diffusion.train_steps = 1000;
    let data = toy(16, c.data.shape, 3);
    let (vq, _) = train_vqgan_phase(&data, &c, 2, CheckpointPlan::default()).unwrap();
    let (_, report) = train_sdm_phase(&data, &vq, &c, 2, CheckpointPlan::default()).unwrap();
    let (first, last) = (
        report.metric("L_simple_first100").unwrap(),
        report.metric("L_simple_last100").unwrap(),
    );
    assert!(last < first, "L_simple {first} -> {last}");
    assert_eq!(report.lines.len(), 1000);
}

#[test]
fn reloaded_checkpoints_reproduce_probe_outputs_bitwise() {
    let c = tiny_config();
    let data = toy(4, c.data.shape, c.data.num_classes);
    let dir = tempfile::tempdir().unwrap();
    let (vq_path, sdm_path) = (dir.path().join("vq.ckpt"), dir.path().join("sdm.ckpt"));
    let (vq, _) = train_vqgan_phase(&data, &c, 3, CheckpointPlan::default()).unwrap();
    vq.save(&vq_path).unwrap();
    let (sdm, _) = train_sdm_phase(&data, &vq, &c, 3, CheckpointPlan::default()).unwrap();
    sdm.save(&sdm_path).unwrap();
    let (vq2, sdm2) = (
        CheckpointBundle::load(&vq_path).unwrap(),
        CheckpointBundle::load(&sdm_path).unwrap(),
    );
    assert_eq!(
        param_fingerprint(&vq.params),
        param_fingerprint(&vq2.params)
    );
    assert_eq!(
        param_fingerprint(&sdm.params),
        param_fingerprint(&sdm2.params)
    );

    let latent = c.compression.latent_dims(c.data.shape).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z = Tensor::<f32>::rand_uniform(
        &[1, latent[0], latent[1], latent[2], c.compression.n_z],
        -1.0,
        1.0,
        &mut rng,
    );
    let decode = |b: &CheckpointBundle| {
        FrozenVqGan::<f32>::from_bundle(b)
            .unwrap()
            .decode_normalized(&z)
            .unwrap()
    };
    assert_eq!(decode(&vq), decode(&vq2));

    let m = one_hot_batch::<f32>(&[data.samples[0].map.as_ref().unwrap()]).unwrap();
    let net = Denoiser::new(c.denoiser.clone()).unwrap();
    let probe = |b: &CheckpointBundle| net.predict_noise(&b.params, &z, &[3], &m).unwrap();
    let (a, b) = (probe(&sdm), probe(&sdm2));
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));

    let map = data.samples[1].map.as_ref().unwrap();
    let s1 = synthesize::<f32>(map, &vq, &sdm, 4, None).unwrap();
    let s2 = synthesize::<f32>(map, &vq2, &sdm2, 4, None).unwrap();
    assert_eq!(s1, s2);
}

#[test]
fn denoiser_phase_freezes_the_autoencoder() {
    let c = tiny_config();
    let data = toy(4, c.data.shape, c.data.num_classes);
    let (vq, _) = train_vqgan_phase(&data, &c, 5, CheckpointPlan::default()).unwrap();
    let before = vq.to_bytes();
    let (sdm, _) = train_sdm_phase(&data, &vq, &c, 5, CheckpointPlan::default()).unwrap();
    assert_eq!(before, vq.to_bytes());
    assert!(sdm
        .params
        .names()
        .all(|n| n.starts_with("sdm.") || n.starts_with("sem.")));
    assert!(sdm
        .optimizers
        .iter()
        .all(|o| o.moments.iter().all(|(n, _, _)| !n.starts_with("enc."))));
}

#[test]
fn different_seeds_give_different_volumes_for_one_map() {
    let c = tiny_config();
    let data = toy(4, c.data.shape, c.data.num_classes);
    let (vq, _) = train_vqgan_phase(&data, &c, 6, CheckpointPlan::default()).unwrap();
    let (sdm, _) = train_sdm_phase(&data, &vq, &c, 6, CheckpointPlan::default()).unwrap();
    let map = data.samples[0].map.as_ref().unwrap();
    let a: Volume<f32> = synthesize(map, &vq, &sdm, 1, None).unwrap().volume;
    let b: Volume<f32> = synthesize(map, &vq, &sdm, 2, None).unwrap().volume;
    assert_ne!(a, b);
    assert_eq!(a, synthesize(map, &vq, &sdm, 1, None).unwrap().volume);
}
