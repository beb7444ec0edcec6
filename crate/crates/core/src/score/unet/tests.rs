use super::*;
use rand_distr::StandardNormal;

fn toy(bypass: BypassKind, padding: Padding) -> UNetConfig {
    UNetConfig { base_channels: 4, res_blocks: 2, embed_dim: 8, bypass_hidden: 6, bypass, padding, ..UNetConfig::default() }
}

fn channels() -> Vec<String> {
    vec!["u".into(), "v".into(), "context".into()]
}

fn random_input(n: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(c, n, n, (0..c * n * n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn randomized(mut model: UNetScore, seed: u64) -> UNetScore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in model.params_mut() {
        *v += 0.2 * rng.sample::<f64, _>(StandardNormal);
    }
    model
}

#[test]
fn rejects_incompatible_grids() {
    let cfg = toy(BypassKind::Mlp, Padding::Zero);
    assert!(UNetScore::new(cfg.clone(), NoiseSchedule::default(), 12, &channels(), 0).is_err());
    assert!(UNetScore::new(cfg.clone(), NoiseSchedule::default(), 4, &channels(), 0).is_err());
    assert!(UNetScore::new(cfg, NoiseSchedule::default(), 16, &["context".to_string()], 0).is_err());
}

#[test]
fn bypass_structure_holds() {
    let model = randomized(UNetScore::new(toy(BypassKind::Mlp, Padding::Zero), NoiseSchedule::default(), 16, &channels(), 1).unwrap(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let x = random_input(16, 3, &mut rng);
        let t = rng.random_range(0.0..1.0);
        let parts = model.forward_parts(&x, t);
        let f = parts.combined();
        for c in 0..2 {
            let centred = &parts.centred.data[c * 256..(c + 1) * 256];
            assert!((centred.iter().sum::<f64>() / 256.0).abs() < 1e-6);
            let mean = f.data[c * 256..(c + 1) * 256].iter().sum::<f64>() / 256.0;
            assert!((mean - parts.bypass[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn branches_are_independent() {
    let model = randomized(UNetScore::new(toy(BypassKind::Mlp, Padding::Zero), NoiseSchedule::default(), 16, &channels(), 4).unwrap(), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_input(16, 3, &mut rng);
    let base = model.forward_parts(&x, 0.4);

    let mut shifted = x.clone();
    shifted.data[..256].iter_mut().for_each(|v| *v += 0.7);
    let moved = model.forward_parts(&shifted, 0.4);
    for (a, b) in base.centred.data.iter().zip(&moved.centred.data) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((base.bypass[0] - moved.bypass[0]).abs() > 1e-9);

    let mut wiggled = x.clone();
    wiggled.data[3] += 0.5;
    wiggled.data[4] -= 0.5;
    let moved = model.forward_parts(&wiggled, 0.4);
    for (a, b) in base.bypass.iter().zip(&moved.bypass) {
        assert!((a - b).abs() < 1e-12);
    }

    // Constant input: the U branch sees zeros, the mean comes from the bypass alone.
    let constant = Tensor::new(3, 16, 16, [0.3, -0.2, 0.9].iter().flat_map(|&c| vec![c; 256]).collect());
    let parts = model.forward_parts(&constant, 0.7);
    let zero_context = Tensor::new(3, 16, 16, [0.0, 0.0, 0.9].iter().flat_map(|&c| vec![c; 256]).collect());
    let reference = model.forward_parts(&zero_context, 0.7);
    for (a, b) in parts.centred.data.iter().zip(&reference.centred.data) {
        assert!((a - b).abs() < 1e-12);
    }
    for c in 0..2 {
        let mean = parts.combined().data[c * 256..(c + 1) * 256].iter().sum::<f64>() / 256.0;
        assert!((mean - parts.bypass[c]).abs() < 1e-12);
    }
}

fn loss_and_grad(model: &UNetScore, x: &Tensor, eps: &Tensor, t: f64, seed: u64) -> (f64, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (f, cache) = model.forward_train(x, t, Some(&mut rng));
    let count = f.data.len() as f64;
    let loss = f.data.iter().zip(&eps.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / count;
    let df = Tensor::new(f.c, f.h, f.w, f.data.iter().zip(&eps.data).map(|(a, b)| 2.0 * (a - b) / count).collect());
    let mut grad = vec![0.0; model.params().len()];
    model.backward(&cache, &df, &mut grad);
    (loss, grad)
}

#[test]
fn gradients_match_finite_differences() {
    for padding in [Padding::Zero, Padding::Circular] {
        let mut model = randomized(UNetScore::new(toy(BypassKind::Mlp, padding), NoiseSchedule::default(), 16, &channels(), 7).unwrap(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_input(16, 3, &mut rng);
        let eps = random_input(16, 2, &mut rng);
        let (_, grad) = loss_and_grad(&model, &x, &eps, 0.3, 11);
        let h = 1e-4;
        let mut checked = 0;
        while checked < 50 {
            let i = rng.random_range(0..model.params().len());
            let orig = model.params()[i];
            model.params_mut()[i] = orig + h;
            let up = loss_and_grad(&model, &x, &eps, 0.3, 11).0;
            model.params_mut()[i] = orig - h;
            let down = loss_and_grad(&model, &x, &eps, 0.3, 11).0;
            model.params_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let scale = fd.abs().max(grad[i].abs());
            assert!((fd - grad[i]).abs() <= 1e-3 * scale + 1e-9, "param {i}: fd {fd} vs analytic {}", grad[i]);
            checked += 1;
        }
    }
}

#[test]
fn linear_bypass_gradient_with_zero_projection() {
    let model = UNetScore::new(toy(BypassKind::Linear, Padding::Zero), NoiseSchedule::default(), 16, &channels(), 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random_input(16, 3, &mut rng);
    let eps = random_input(16, 2, &mut rng);
    let (_, grad) = loss_and_grad(&model, &x, &eps, 0.5, 1);
    let means: Vec<f64> = x.data.chunks(256).map(|c| c.iter().sum::<f64>() / 256.0).collect();
    let find = |name: &str| model.param_specs().iter().find(|s| s.name == name).unwrap().clone();
    let (w, b) = (find("bypass.linear.weight"), find("bypass.linear.bias"));
    let p = model.params();
    let count = 2.0 * 256.0;
    for c in 0..2 {
        let m_c = p[b.offset + c] + (0..3).map(|j| p[w.offset + c * 3 + j] * means[j]).sum::<f64>();
        let resid: f64 = eps.data[c * 256..(c + 1) * 256].iter().map(|e| m_c - e).sum();
        assert!((grad[b.offset + c] - 2.0 * resid / count).abs() < 1e-12);
        for j in 0..3 {
            assert!((grad[w.offset + c * 3 + j] - 2.0 * resid * means[j] / count).abs() < 1e-12);
        }
    }
    // With the projection at zero no gradient reaches the convolutional trunk.
    let lift = find("lift.weight");
    assert!(grad[lift.offset..lift.offset + lift.len()].iter().all(|&g| g == 0.0));
}

#[test]
fn inference_is_thread_count_independent() {
    let model = randomized(UNetScore::new(toy(BypassKind::Mlp, Padding::Zero), NoiseSchedule::default(), 16, &channels(), 14).unwrap(), 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let field = Field::from_fn(16, &channels(), 5, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap();
    let t = [0.1, 0.3, 0.5, 0.7, 0.9];
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| model.evaluate(&field, &t).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a.data(), b.data());
    assert_eq!(a.channels(), &["u".to_string(), "v".to_string()]);
}

#[test]
fn checkpoint_round_trip() {
    let model = randomized(UNetScore::new(toy(BypassKind::Mlp, Padding::Circular), NoiseSchedule::new(0.02, 5.0).unwrap(), 16, &channels(), 17).unwrap(), 18);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bckp");
    write_checkpoint(&model, &path, false).unwrap();
    assert!(matches!(write_checkpoint(&model, &path, false), Err(Error::AlreadyExists(_))));
    let loaded = read_checkpoint(&path).unwrap();
    assert_eq!(loaded.config(), model.config());
    assert_eq!(loaded.schedule(), model.schedule());
    assert_eq!(loaded.input_channels(), model.input_channels());
    for (a, b) in loaded.params().iter().zip(model.params()) {
        assert_eq!(*a, *b as f32 as f64);
    }

    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 20] ^= 1;
    let bad = dir.path().join("bad.bckp");
    std::fs::write(&bad, &bytes).unwrap();
    assert!(matches!(read_checkpoint(&bad), Err(Error::ChecksumMismatch { .. })));
    bytes[0] = b'X';
    std::fs::write(&bad, &bytes).unwrap();
    assert!(matches!(read_checkpoint(&bad), Err(Error::BadMagic { .. })));
}
