use panodiff::autoencoder::{train_autoencoder, AutoencoderConfig, Modality, VqAutoencoder};
use panodiff::diffusion::{train_ldm, LatentDiffusion, LatentStats, LdmConfig};
use panodiff::pipeline::{self, DataConfig, RunConfig, Stage, Workdir};
use panodiff::synth::{load_item, load_manifest, render_dataset, save_dataset, DatasetManifest, Split};
use panodiff::unet::UnetConfig;
use panodiff::Tensor;

fn tiny_ae() -> AutoencoderConfig {
    AutoencoderConfig { widths: [8, 8], codebook_size: 16, epochs: 1, ..AutoencoderConfig::default() }
}

fn tiny_ldm() -> LdmConfig {
    LdmConfig {
        unet: UnetConfig { widths: [8, 8], time_dim: 16, groups: 4, ..UnetConfig::default() },
        train_steps: 4,
        batch_size: 2,
        sampling_steps: 4,
        ..LdmConfig::default()
    }
}

#[test]
fn dataset_survives_disk() {
    let dir = tempfile::tempdir().unwrap();
    let m = DatasetManifest::new(10, 16, 3, [0.8, 0.1, 0.1]).unwrap();
    let panos = render_dataset(&m).unwrap();
    save_dataset(&m, &panos, dir.path()).unwrap();
    let back = load_manifest(dir.path()).unwrap();
    assert_eq!(back, m);
    let counts: Vec<usize> = Split::ALL.iter().map(|&s| m.ids(s).len()).collect();
    assert_eq!(counts, vec![8, 1, 1]);
    for (item, p) in m.items.iter().zip(&panos) {
        let q = load_item(dir.path(), item).unwrap();
        assert!(q.rgb.max_abs_diff(&p.rgb) <= 1.0 / 255.0 + 1e-6);
        assert!(q.depth.max_abs_diff(&p.depth) <= 1e-3 + 1e-6);
    }
}

#[test]
fn autoencoder_checkpoint_gives_identical_latents() {
    let dir = tempfile::tempdir().unwrap();
    let m = DatasetManifest::new(4, 16, 0, [1.0, 0.0, 0.0]).unwrap();
    let images: Vec<Tensor> = render_dataset(&m).unwrap().into_iter().map(|p| p.rgb).collect();
    let (ae, _) = train_autoencoder(Modality::Rgb, &images, &tiny_ae(), |_| {}).unwrap();
    ae.save_dir(dir.path(), serde_json::Value::Null).unwrap();
    let back = VqAutoencoder::load_dir(Modality::Rgb, dir.path()).unwrap();
    for x in &images {
        assert_eq!(ae.encode(x).unwrap(), back.encode(x).unwrap());
        let z = ae.encode(x).unwrap();
        assert_eq!(ae.decode(&z).unwrap(), back.decode(&z).unwrap());
    }
}

#[test]
fn diffusion_training_is_deterministic_and_round_trips() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
    let latents: Vec<Tensor> = (0..5).map(|_| Tensor::randn(1, 4, 4, 8, &mut rng)).collect();
    let stats = LatentStats::fit(&latents).unwrap();
    let norm: Vec<Tensor> = latents.iter().map(|z| stats.normalize(z)).collect();
    let run = || {
        let mut model = LatentDiffusion::new(tiny_ldm(), stats.clone()).unwrap();
        let mut losses = Vec::new();
        let adam = train_ldm(&mut model, None, &norm, |s| losses.push(s.loss)).unwrap();
        (model, adam, losses)
    };
    let (a, adam, la) = run();
    let (b, _, lb) = run();
    assert_eq!(la, lb);
    let probe = Tensor::randn(1, 4, 4, 8, &mut rng);
    assert_eq!(a.unet.forward(&probe, &[300]), b.unet.forward(&probe, &[300]));

    let dir = tempfile::tempdir().unwrap();
    a.save_dir(dir.path(), Some(&adam)).unwrap();
    let (c, adam_back) = LatentDiffusion::load_dir(dir.path()).unwrap();
    assert!(adam_back.is_some());
    assert_eq!((c.step, &c.stats, &c.config), (a.step, &a.stats, &a.config));
    assert_eq!(a.unet.forward(&probe, &[300]), c.unet.forward(&probe, &[300]));
}

#[test]
fn staged_training_through_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let wd = Workdir::new(dir.path());
    let cfg = RunConfig {
        data: DataConfig { n: 6, height: 16, ..DataConfig::default() },
        vae_rgb: tiny_ae(),
        vae_depth: tiny_ae(),
        ldm: tiny_ldm(),
        ..RunConfig::default()
    };
    pipeline::gen_data(&cfg, &wd).unwrap();
    assert!(matches!(pipeline::train(&cfg, &wd, Stage::Ldm), Err(panodiff::Error::InvalidState(_))));
    pipeline::train(&cfg, &wd, Stage::VaeRgb).unwrap();
    // the depth autoencoder is still missing
    match pipeline::train(&cfg, &wd, Stage::Ldm) {
        Err(panodiff::Error::InvalidState(msg)) => assert!(msg.contains("vae-depth"), "{msg}"),
        other => panic!("expected invalid state, got {other:?}"),
    }
    pipeline::train(&cfg, &wd, Stage::VaeDepth).unwrap();
    let s = pipeline::train(&cfg, &wd, Stage::Ldm).unwrap();
    assert_eq!(s.steps, 4);
    let log = std::fs::read_to_string(wd.log(Stage::Ldm)).unwrap();
    assert_eq!(log.lines().count(), 4);

    let longer = RunConfig { ldm: LdmConfig { train_steps: 7, ..cfg.ldm.clone() }, ..cfg.clone() };
    assert_eq!(pipeline::train(&longer, &wd, Stage::Ldm).unwrap().steps, 7);
    assert_eq!(std::fs::read_to_string(wd.log(Stage::Ldm)).unwrap().lines().count(), 7);

    // an RGB-only model needs only the RGB autoencoder
    let rgb_only = RunConfig { ldm: LdmConfig { use_depth: false, ..cfg.ldm.clone() }, ..cfg.clone() };
    let other = Workdir::new(dir.path().join("rgb"));
    pipeline::gen_data(&rgb_only, &other).unwrap();
    pipeline::train(&rgb_only, &other, Stage::VaeRgb).unwrap();
    pipeline::train(&rgb_only, &other, Stage::Ldm).unwrap();
    assert_eq!(pipeline::load_ldm(&other).unwrap().config.latent_channels(), 3);
}

#[test]
fn training_lowers_the_denoising_loss() {
    use panodiff::diffusion::{batch_at, denoising_loss};
    // smooth latents: one random level per channel
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(2);
    let latents: Vec<Tensor> = (0..8)
        .map(|_| {
            let levels = Tensor::randn(1, 4, 1, 1, &mut rng);
            Tensor::from_vec(1, 4, 4, 8, (0..4).flat_map(|c| std::iter::repeat_n(levels.data[c], 32)).collect()).unwrap()
        })
        .collect();
    let config = LdmConfig { train_steps: 150, batch_size: 8, ..tiny_ldm() };
    let mut model = LatentDiffusion::new(config.clone(), LatentStats::identity(4)).unwrap();
    let untrained = model.unet.clone();
    train_ldm(&mut model, None, &latents, |_| {}).unwrap();
    let (mut before, mut after) = (0.0, 0.0);
    for step in 1000..1020 {
        let (z_t, eps, ts) = batch_at(&latents, &config, step).unwrap();
        before += denoising_loss(&untrained, &z_t, &eps, &ts);
        after += denoising_loss(&model.unet, &z_t, &eps, &ts);
    }
    assert!(after < before, "trained {after} vs untrained {before}");
}
