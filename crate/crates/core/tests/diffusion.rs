use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use switchdit::schedule::{ddpm_step, predict_x0, q_sample, NoiseSchedule, MAX_BETA};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[test]
fn cosine_closed_form() {
    let s = NoiseSchedule::cosine(1000, 0.008).unwrap();
    let f = |t: f64| (((t / 1000.0 + 0.008) / 1.008) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    for t in [1, 10, 500, 900] {
        assert!((s.alphabar(t).unwrap() - f(t as f64) / f(0.0)).abs() < 1e-12);
    }
    assert!(s.alphabar(1000).unwrap() < 1e-3);
}

#[test]
fn forward_process_moments() {
    let s = NoiseSchedule::cosine(100, 0.008).unwrap();
    let t = 37;
    let ab = s.alphabar(t).unwrap();
    let x0 = 0.6;
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs: Vec<f64> = (0..n).map(|_| q_sample(&[x0], t, &[normal(&mut rng)], &s).unwrap()[0]).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let want_var = 1.0 - ab;
    let se_mean = (want_var / n as f64).sqrt();
    // var of the sample variance of a Gaussian is 2σ⁴/(n−1)
    let se_var = (2.0 * want_var * want_var / (n - 1) as f64).sqrt();
    assert!((mean - ab.sqrt() * x0).abs() < 3.0 * se_mean, "{mean}");
    assert!((var - want_var).abs() < 3.0 * se_var, "{var}");
}

#[test]
fn true_noise_inverts_exactly() {
    let s = NoiseSchedule::cosine(50, 0.008).unwrap();
    let x0 = [0.25, -0.5, 0.75];
    let eps = [0.5, 1.0, -2.0];
    let xt = q_sample(&x0, 20, &eps, &s).unwrap();
    for (a, b) in predict_x0(&xt, 20, &eps, &s).unwrap().iter().zip(x0) {
        assert!((a - b).abs() < 1e-12);
    }
}

/// Posterior-mean denoiser for data uniform on {−1, +1}.
fn oracle_eps(x: f64, ab: f64) -> f64 {
    let x0_hat = (ab.sqrt() * x / (1.0 - ab)).tanh();
    (x - ab.sqrt() * x0_hat) / (1.0 - ab).sqrt()
}

#[test]
fn two_point_chain_lands_on_modes() {
    let s = NoiseSchedule::cosine(1000, 0.008).unwrap().respaced(250).unwrap();
    assert_eq!(s.len(), 250);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let runs = 400;
    let mut hits = 0;
    for _ in 0..runs {
        let mut x = normal(&mut rng);
        for t in (1..=s.len()).rev() {
            let e = oracle_eps(x, s.alphabar(t).unwrap());
            x = ddpm_step(&[x], t, &[e], &s, &[normal(&mut rng)]).unwrap()[0];
        }
        hits += usize::from((x.abs() - 1.0).abs() < 0.05);
    }
    assert!(hits as f64 >= 0.95 * runs as f64, "{hits}/{runs}");
}

#[test]
fn respacing_picks_uniform_stride() {
    let s = NoiseSchedule::cosine(1000, 0.008).unwrap();
    let r = s.respaced(250).unwrap();
    for i in 1..=250 {
        assert_eq!(r.model_timestep(i).unwrap(), 4 * i);
        if r.beta(i).unwrap() >= MAX_BETA {
            // clipping the final stride breaks the re-indexing on purpose
            assert_eq!(i, 250);
            continue;
        }
        let (a, b) = (r.alphabar(i).unwrap(), s.alphabar(4 * i).unwrap());
        assert!((a - b).abs() <= 1e-12 * b, "{a} {b}");
    }
    assert!(s.respaced(1001).is_err());
}
