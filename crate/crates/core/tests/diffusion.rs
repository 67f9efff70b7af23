use ditlab::diffusion::{
    ddim_sample, guided_epsilon, q_sample, shifted_schedule, training_loss, DiffusionSchedule, EpsPredictor,
    SamplerConfig,
};
use ditlab::text::{TextBatch, Vocab};
use ditlab::Result;
use ditlab_numerics::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), &mut ChaCha8Rng::seed_from_u64(seed))
}

fn captions(b: usize) -> TextBatch {
    let vocab = Vocab::new(["red", "blue", "bar", "pillar"]);
    let caps: Vec<&str> = ["red bar", "blue pillar", "red pillar"].into_iter().cycle().take(b).collect();
    TextBatch::encode(&vocab, &caps, 4)
}

struct Zero;

impl EpsPredictor<f64> for Zero {
    fn predict_eps(&self, g: &mut Graph<f64>, x: Var, _: &[f64], _: &TextBatch, _: Option<Var>) -> Result<Var> {
        Ok(g.scale(x, 0.0))
    }
}

/// Knows the clean batch and backs ε out of `x_t`.
struct Oracle {
    x0: Tensor<f64>,
    schedule: DiffusionSchedule,
}

impl EpsPredictor<f64> for Oracle {
    fn predict_eps(&self, g: &mut Graph<f64>, x: Var, t: &[f64], _: &TextBatch, _: Option<Var>) -> Result<Var> {
        let xt = g.value(x).clone();
        let per = xt.numel() / t.len();
        let mut eps = xt.data().to_vec();
        for (b, &tb) in t.iter().enumerate() {
            let a = self.schedule.alpha_bar(tb as usize)?;
            for i in b * per..(b + 1) * per {
                eps[i] = (eps[i] - a.sqrt() * self.x0.data()[i]) / (1.0 - a).sqrt();
            }
        }
        Ok(g.constant(Tensor::new(xt.shape().to_vec(), eps)?))
    }
}

/// `0.3 x_t + 0.05 t/1000 + 0.1 sum(ids)` per row, so guidance has something to act on.
struct TextLinear;

impl EpsPredictor<f64> for TextLinear {
    fn predict_eps(&self, g: &mut Graph<f64>, x: Var, t: &[f64], text: &TextBatch, _: Option<Var>) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let per = shape.iter().skip(1).product::<usize>();
        let bias = Tensor::from_fn(shape, |i| {
            let b = i / per;
            let ids: usize = text.ids[b * text.len..(b + 1) * text.len].iter().sum();
            0.05 * t[b] / 1000.0 + 0.1 * ids as f64
        });
        let s = g.scale(x, 0.3);
        let c = g.constant(bias);
        Ok(g.add(s, c)?)
    }
}

/// Ignores the caption it is given and always uses `text`.
struct FixedText<'a, P> {
    inner: &'a P,
    text: TextBatch,
}

impl<P: EpsPredictor<f64>> EpsPredictor<f64> for FixedText<'_, P> {
    fn predict_eps(&self, g: &mut Graph<f64>, x: Var, t: &[f64], _: &TextBatch, c: Option<Var>) -> Result<Var> {
        self.inner.predict_eps(g, x, t, &self.text, c)
    }
}

#[test]
fn zero_predictor_loss_is_unit_variance() {
    let s = DiffusionSchedule::default();
    let x0 = randn(&[1000, 4, 4, 4], 1);
    let text = captions(1000);
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = training_loss(&mut g, &Zero, &x0, &text, None, &s, 0.1, &mut rng).unwrap();
    let loss = g.value(d.loss).data()[0];
    assert!((loss - 1.0).abs() < 0.05, "{loss}");
    assert!(d.timesteps.iter().all(|&t| (1..=1000).contains(&t)));
}

#[test]
fn oracle_predictor_has_zero_loss() {
    let s = DiffusionSchedule::default();
    let x0 = randn(&[64, 4, 4, 4], 3);
    let oracle = Oracle {
        x0: x0.clone(),
        schedule: s.clone(),
    };
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = training_loss(&mut g, &oracle, &x0, &captions(64), None, &s, 0.1, &mut rng).unwrap();
    assert!(g.value(d.loss).data()[0] < 1e-20);
}

#[test]
fn loss_is_deterministic_under_seed() {
    let s = DiffusionSchedule::default();
    let x0 = randn(&[8, 4, 4, 4], 5);
    let run = || {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = training_loss(&mut g, &TextLinear, &x0, &captions(8), None, &s, 0.5, &mut rng).unwrap();
        (g.value(d.loss).data()[0].to_bits(), d.timesteps, d.dropped)
    };
    assert_eq!(run(), run());
}

#[test]
fn alpha_bar_matches_cumulative_product() {
    let s = DiffusionSchedule::default();
    let (a, b) = (8.5e-4f64.sqrt(), 1.2e-2f64.sqrt());
    let mut prod = 1.0f64;
    for t in 1..=1000usize {
        let root = a + (b - a) * (t - 1) as f64 / 999.0;
        prod *= 1.0 - root * root;
        assert!((s.alpha_bar(t).unwrap() - prod).abs() < 1e-12, "t={t}");
    }
    assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    assert!(0.0 < s.beta(1).unwrap() && s.beta(1).unwrap() < s.beta(1000).unwrap() && s.beta(1000).unwrap() < 1.0);
}

#[test]
fn q_sample_inverts() {
    let s = DiffusionSchedule::default();
    let x0 = randn(&[3, 4, 8, 8], 7).cast::<f32>();
    let noise = randn(&[3, 4, 8, 8], 8).cast::<f32>();
    let t = [1, 500, 1000];
    let xt = q_sample(&x0, &t, &noise, &s).unwrap();
    let per = 4 * 64;
    for (b, &tb) in t.iter().enumerate() {
        let a = s.alpha_bar(tb).unwrap();
        for i in b * per..(b + 1) * per {
            let rec = (xt.data()[i] as f64 - (1.0 - a).sqrt() * noise.data()[i] as f64) / a.sqrt();
            assert!((rec - x0.data()[i] as f64).abs() < 1e-5);
        }
    }
}

#[test]
fn q_sample_near_identity_at_first_step() {
    let s = DiffusionSchedule::default();
    let x0 = randn(&[1, 4, 8, 8], 9);
    let noise = randn(&[1, 4, 8, 8], 10);
    let xt = q_sample(&x0, &[1], &noise, &s).unwrap();
    let a = s.alpha_bar(1).unwrap();
    for i in 0..x0.numel() {
        let bound = (1.0 - a.sqrt()) * x0.data()[i].abs() + (1.0 - a).sqrt() * noise.data()[i].abs();
        assert!((xt.data()[i] - x0.data()[i]).abs() <= bound + 1e-15);
    }
}

#[test]
fn q_sample_rejects_bad_inputs() {
    let s = DiffusionSchedule::default();
    let x0 = randn(&[1, 4, 2, 2], 0);
    assert!(q_sample(&x0, &[0], &x0, &s).is_err());
    assert!(q_sample(&x0, &[1001], &x0, &s).is_err());
    assert!(q_sample(&x0, &[5], &randn(&[1, 4, 2, 3], 1), &s).is_err());
}

#[test]
fn final_step_is_nearly_standard_normal() {
    let s = DiffusionSchedule::default();
    let n = 20_000;
    let x0 = Tensor::from_fn(vec![n], |i| if i % 2 == 0 { 1.0 } else { -0.5 });
    let noise = randn(&[n], 11);
    let xt = q_sample(&x0.reshape(vec![1, n]).unwrap(), &[1000], &noise.reshape(vec![1, n]).unwrap(), &s).unwrap();
    let mean = xt.data().iter().sum::<f64>() / n as f64;
    let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    assert!(mean.abs() < 0.05 && (var - 1.0).abs() < 0.05, "{mean} {var}");
}

#[test]
fn one_step_ddim_with_oracle_recovers_x0() {
    let s = DiffusionSchedule::default();
    let x0 = randn(&[2, 4, 4, 4], 12);
    let oracle = Oracle {
        x0: x0.clone(),
        schedule: s.clone(),
    };
    let cfg = SamplerConfig {
        ddim_steps: 1,
        cfg_scale: 1.0,
        seed: 3,
        eta: 0.0,
    };
    let out = ddim_sample(&oracle, &captions(2), None, &cfg, &s, &[2, 4, 4, 4]).unwrap();
    assert!(out.max_abs_diff(&x0).unwrap() < 1e-12);
}

fn sampler(scale: f64, steps: usize) -> SamplerConfig {
    SamplerConfig {
        ddim_steps: steps,
        cfg_scale: scale,
        seed: 42,
        eta: 0.0,
    }
}

#[test]
fn guidance_one_is_conditional_sampling() {
    let s = DiffusionSchedule::default();
    let text = captions(3);
    let shape = [3, 4, 4, 4];
    let guided = ddim_sample(&TextLinear, &text, None, &sampler(1.0, 20), &s, &shape).unwrap();
    let cond_only = FixedText {
        inner: &TextLinear,
        text: text.clone(),
    };
    // both branches see the caption, so any scale reduces to the conditional ε
    let plain = ddim_sample(&cond_only, &text, None, &sampler(7.5, 20), &s, &shape).unwrap();
    assert_eq!(guided.data(), plain.data());
}

#[test]
fn guidance_zero_is_unconditional_sampling() {
    let s = DiffusionSchedule::default();
    let text = captions(3);
    let shape = [3, 4, 4, 4];
    let guided = ddim_sample(&TextLinear, &text, None, &sampler(0.0, 20), &s, &shape).unwrap();
    let uncond = FixedText {
        inner: &TextLinear,
        text: TextBatch::null(3, text.len),
    };
    let plain = ddim_sample(&uncond, &text, None, &sampler(1.0, 20), &s, &shape).unwrap();
    assert_eq!(guided.data(), plain.data());
    let with_text = ddim_sample(&TextLinear, &text, None, &sampler(1.0, 20), &s, &shape).unwrap();
    assert_ne!(guided.data(), with_text.data());
}

#[test]
fn ddim_is_deterministic() {
    let s = DiffusionSchedule::default();
    let run = || ddim_sample(&TextLinear, &captions(2), None, &sampler(7.5, 50), &s, &[2, 4, 4, 4]).unwrap();
    assert_eq!(run().data(), run().data());
}

#[test]
fn every_step_count_stays_finite() {
    let s = DiffusionSchedule::default();
    for steps in 1..=50 {
        let out = ddim_sample(&TextLinear, &captions(1), None, &sampler(3.0, steps), &s, &[1, 4, 2, 2]).unwrap();
        assert!(out.all_finite(), "{steps} steps");
    }
}

#[test]
fn guided_epsilon_is_affine_in_scale() {
    let x = randn(&[2, 4, 4, 4], 13);
    let text = captions(2);
    let t = [300.0, 700.0];
    let e = |scale| guided_epsilon(&TextLinear, &x, &t, &text, None, scale).unwrap();
    let (a, b, c) = (e(2.0), e(4.0), e(6.0));
    for i in 0..a.numel() {
        let resid = b.data()[i] - 0.5 * (a.data()[i] + c.data()[i]);
        assert!(resid.abs() < 1e-6);
    }
}

#[test]
fn base_resolution_shift_is_identity() {
    let base = DiffusionSchedule::default();
    assert_eq!(shifted_schedule(&base, 256).unwrap(), base);
    assert!(shifted_schedule(&base, 768).is_err());
}

#[test]
fn shift_divides_snr() {
    let base = DiffusionSchedule::default();
    for (res, div) in [(512, 4.0), (1024, 16.0)] {
        let sh = shifted_schedule(&base, res).unwrap();
        for t in 1..=1000 {
            let want = base.snr(t).unwrap() / div;
            let got = sh.snr(t).unwrap();
            assert!((got / want - 1.0).abs() < 1e-9, "{res} t={t}");
        }
        assert!(sh.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(sh.betas().iter().all(|&b| 0.0 < b && b < 1.0));
    }
}

proptest::proptest! {
    #[test]
    fn q_sample_inverts_anywhere(t in 1usize..=1000, seed in 0u64..1000) {
        let s = DiffusionSchedule::default();
        let x0 = randn(&[1, 2, 3, 3], seed);
        let noise = randn(&[1, 2, 3, 3], seed + 1);
        let xt = q_sample(&x0, &[t], &noise, &s).unwrap();
        let a = s.alpha_bar(t).unwrap();
        for i in 0..x0.numel() {
            let rec = (xt.data()[i] - (1.0 - a).sqrt() * noise.data()[i]) / a.sqrt();
            proptest::prop_assert!((rec - x0.data()[i]).abs() < 1e-9);
        }
    }
}
