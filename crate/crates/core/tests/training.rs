use fnoflow::checkpoint::{load_checkpoint, save_checkpoint};
use fnoflow::datasets::{gen_oscillator, split, OscillatorSpec, SplitMode};
use fnoflow::metrics::{evaluate, EvalOptions};
use fnoflow::model::ModelConfig;
use fnoflow::sampler::{initial_noise, sample_from, IntegratorConfig, Method};
use fnoflow::trainer::{TrainConfig, Trainer};
use fnoflow::Tensor64;

fn small_model() -> ModelConfig {
    ModelConfig {
        d_h: 16,
        unet_width: 8,
        kernel: 5,
        time_dim: 16,
        fno_width: 8,
        head_hidden: 8,
    }
}

#[test]
fn fifty_epochs_halve_the_objective() {
    let ds = gen_oscillator(&OscillatorSpec {
        n_trajectories: 64,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    // Four optimizer steps per epoch.
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 16,
        model: small_model(),
        ..Default::default()
    };
    let mut tr = Trainer::<f64>::new(&ds, ds.default_pack(), cfg).unwrap();
    tr.fit(&ds, |_| {}).unwrap();
    let first = tr.trace[0].total;
    let last = tr.trace.last().unwrap().total;
    assert_eq!(tr.trace.len(), 50);
    assert!(last < 0.5 * first, "initial {first}, final {last}");
}

#[test]
fn train_save_load_sample_evaluate() {
    let ds = gen_oscillator(&OscillatorSpec {
        n_trajectories: 40,
        t_len: 32,
        seed: 2,
        ..Default::default()
    })
    .unwrap();
    let (train, test) = split(&ds, SplitMode::Random, 1).unwrap();
    assert_eq!((train.len(), test.len()), (32, 8));
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        model: small_model(),
        ..Default::default()
    };
    let mut tr = Trainer::<f32>::new(&train, ds.default_pack(), cfg).unwrap();
    tr.fit(&train, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&tr, &path).unwrap();
    let back = load_checkpoint::<f32>(&path).unwrap();

    let icfg = IntegratorConfig {
        method: Method::Rk4,
        steps: 10,
        seed: 7,
    };
    let crefs: Vec<&[f64]> = test.conditions.iter().map(|c| c.as_slice()).collect();
    let run = |t: &Trainer<f32>| -> Vec<Tensor64> {
        let c = t.model.norm.encode_conds::<f32>(&crefs).unwrap();
        let x0 = initial_noise::<f32>(&[test.len(), 2, 32], icfg.seed, 0);
        let x = sample_from(&t.model, &x0, &c, &t.cfg.guidance, &icfg).unwrap();
        t.model.norm.decode_states(&x).unwrap()
    };
    let a = run(&tr);
    let b = run(&back);
    assert_eq!(a, b, "reloaded model samples differently");
    assert!(a.iter().all(|t| t.shape() == [32, 2] && t.data().iter().all(|v| v.is_finite())));

    let rep = evaluate(&a, &test.trajectories, &test.conditions, &tr.pack, &EvalOptions::default(), None).unwrap();
    assert_eq!(rep.n_samples, 8);
    assert!(rep.energy_error.is_some() && rep.mmd.is_some());
    let perfect = evaluate(
        &test.trajectories,
        &test.trajectories,
        &test.conditions,
        &tr.pack,
        &EvalOptions::default(),
        None,
    )
    .unwrap();
    assert_eq!(perfect.violation_rate, 0.0);
    assert!(perfect.long_rmse == 0.0 && perfect.r2 == 1.0);
}
