use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stmha::stmha_net::{Batch, ModelConfig, StmhaNet, TeacherForcing};
use stmha::tensor::{ModelWeights, Tape, Tensor};
use stmha::track_assembly::{AxisScale, ScaleSpec, TrajectoryWindow};
use stmha::training::{
    adam_step, baseline_forecasts, constant_velocity_baseline, ground_truth, model_forecasts, rmse_by_horizon,
    train, AdamConfig, AdamState, TrainConfig, TrainingError,
};

fn window_from(t: usize, f: usize, paths: &[&dyn Fn(f64) -> [f64; 2]]) -> TrajectoryWindow {
    let mut positions = Vec::new();
    for step in 0..t + f {
        for p in paths {
            positions.push(p(step as f64));
        }
    }
    TrajectoryWindow {
        end_frame: t as i64 - 1,
        ids: (0..paths.len() as u64).collect(),
        t_steps: t,
        f_steps: f,
        present: vec![true; positions.len()],
        positions,
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        layers: 1,
        d_ff: 8,
        lstm_hidden: 4,
        ..ModelConfig::default()
    }
}

#[test]
fn adam_descends_a_quadratic_bowl() {
    let centre = [1.5, -2.0, 0.25];
    let mut w = ModelWeights::new();
    w.insert("w", Tensor::zeros(vec![3]).with_grad());
    let cfg = AdamConfig {
        learning_rate: 0.05,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut state = AdamState::default();
    for step in 0..2000 {
        let t = w.get_mut("w").unwrap();
        let g: Vec<f64> = t.data().iter().zip(centre).map(|(x, c)| 2.0 * (x - c)).collect();
        t.zero_grad();
        t.accumulate_grad(&g);
        adam_step(&mut w, &mut state, &cfg).unwrap();
        if step == 0 {
            // Bias correction makes the first step exactly lr·sign(g).
            for (x, c) in w.get("w").unwrap().data().iter().zip(centre) {
                assert!((x - 0.05 * c.signum()).abs() < 1e-9);
            }
        }
    }
    for (x, c) in w.get("w").unwrap().data().iter().zip(centre) {
        assert!((x - c).abs() < 1e-3, "{x} vs {c}");
    }
}

#[test]
fn teacher_forcing_rate_matches_ratio() {
    let cfg = ModelConfig {
        t_steps: 2,
        f_steps: 11,
        ..small_model()
    };
    let net = StmhaNet::new(cfg.clone(), 0).unwrap();
    let w = window_from(2, 11, &[&|s| [0.0, 10.0 + s]]);
    let batch = Batch::from_windows(&[&w], ScaleSpec::fit_windows(&[w.clone()]), cfg.d_near).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut forced, mut total) = (0usize, 0usize);
    while total < 10_000 {
        let tape = Tape::new();
        let p = net.weights.bind(&tape);
        let out = net
            .forward(&p, &tape, &batch, Some(TeacherForcing { ratio: 0.5, rng: &mut rng }))
            .unwrap();
        forced += out.teacher_forced.iter().filter(|&&f| f).count();
        total += out.teacher_forced.len();
    }
    let rate = forced as f64 / total as f64;
    assert!((rate - 0.5).abs() < 0.02, "{rate}");
}

#[test]
fn constant_velocity_is_exact_on_straight_lines() {
    let w = window_from(6, 10, &[&|s| [0.1 * s, 5.0 + 1.5 * s], &|s| [3.5, 30.0 - 0.5 * s]]);
    let cv = constant_velocity_baseline(&w);
    for s in 0..10 {
        for v in 0..2 {
            let want = w.future(s, v).unwrap();
            let got = cv[s * 2 + v];
            assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12);
        }
    }
    let rmse = rmse_by_horizon(&baseline_forecasts(&[w.clone()]), &ground_truth(&[w]), 0.5);
    assert!(rmse.iter().all(|h| h.rmse.unwrap() < 1e-12));
}

#[test]
fn constant_velocity_error_under_acceleration() {
    // x(s) = a s²/2 gives a k-step error of a·k(k+1)/2.
    let a = 0.2;
    let t = 6;
    let w = window_from(t, 10, &[&|s| [0.0, 0.5 * a * s * s]]);
    let cv = constant_velocity_baseline(&w);
    for k in 1..=10 {
        let err = w.future(k - 1, 0).unwrap()[1] - cv[k - 1][1];
        let want = a * (k * (k + 1)) as f64 / 2.0;
        assert!((err - want).abs() < 1e-10, "k={k}: {err} vs {want}");
    }
    let rmse = rmse_by_horizon(&baseline_forecasts(&[w.clone()]), &ground_truth(&[w]), 0.5);
    for h in &rmse {
        let k = (h.horizon_s / 0.5) as usize;
        assert!((h.rmse.unwrap() - a * (k * (k + 1)) as f64 / 2.0).abs() < 1e-10);
    }
}

#[test]
fn forecasts_are_unscaled_exactly_once() {
    // With a zero head the decoder repeats its last input, so forecasts
    // must equal the last observed position in meters.
    let cfg = small_model();
    let mut net = StmhaNet::new(cfg.clone(), 1).unwrap();
    for name in ["head.w", "head.b"] {
        let t = net.weights.get_mut(name).unwrap();
        t.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let w = window_from(cfg.t_steps, cfg.f_steps, &[&|s| [1.0 + 0.1 * s, 20.0 + s], &|s| [-3.5, 45.0 + 0.5 * s]]);
    let scale = ScaleSpec {
        x: AxisScale { offset: 0.5, gain: 0.04 },
        y: AxisScale { offset: 30.0, gain: 0.04 },
    };
    let f = model_forecasts(&net, &[w.clone()], scale, 4).unwrap();
    for s in 0..cfg.f_steps {
        for v in 0..2 {
            let got = f.points[s * 2 + v];
            let want = w.at(cfg.t_steps - 1, v);
            assert!((got[0] - want[0]).abs() < 1e-9 && (got[1] - want[1]).abs() < 1e-9, "{got:?} vs {want:?}");
        }
    }
}

#[test]
fn training_lowers_the_loss_and_is_deterministic() {
    let cfg = small_model();
    let windows: Vec<TrajectoryWindow> = (0..6)
        .map(|i| {
            let o = i as f64;
            window_from(cfg.t_steps, cfg.f_steps, &[&move |s| [0.05 * o, 10.0 + o + (1.0 + 0.1 * o) * s]])
        })
        .collect();
    let scale = ScaleSpec::fit_windows(&windows).isotropic();
    let tc = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 3,
        epochs: 15,
        ..TrainConfig::default()
    };
    let mut a = StmhaNet::new(cfg.clone(), 2).unwrap();
    let mut b = StmhaNet::new(cfg, 2).unwrap();
    let ra = train(&mut a, &windows, scale, &tc, None).unwrap();
    let rb = train(&mut b, &windows, scale, &tc, None).unwrap();
    assert_eq!(ra.loss_curve, rb.loss_curve);
    assert!(ra.loss_curve.last().unwrap() < &ra.loss_curve[0]);
}

#[test]
fn bad_config_and_empty_data_are_rejected() {
    let mut net = StmhaNet::new(small_model(), 0).unwrap();
    let scale = ScaleSpec {
        x: AxisScale { offset: 0.0, gain: 1.0 },
        y: AxisScale { offset: 0.0, gain: 1.0 },
    };
    let bad = TrainConfig {
        tf_ratio: 1.5,
        ..TrainConfig::default()
    };
    assert!(matches!(train(&mut net, &[], scale, &bad, None), Err(TrainingError::Config(_))));
    assert!(matches!(
        train(&mut net, &[], scale, &TrainConfig::default(), None),
        Err(TrainingError::NoData)
    ));
}
