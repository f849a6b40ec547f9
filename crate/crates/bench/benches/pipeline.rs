use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ndarray::Array2;

use odesurv::data::{build_batch, simulate, SimConfig};
use odesurv::metrics::{td_auc, td_brier};
use odesurv::nn::Tape;
use odesurv::odeint::{solve, OdeProblem, SolverSettings};
use odesurv::training::{loss_var, total_loss, TrainConfig};
use odesurv::{Model, Outcome, SurvivalRecord};

fn solver(c: &mut Criterion) {
    let problem = OdeProblem {
        vector_field: |_t: f64, y: &[f64]| vec![y[1], -y[0]],
        t0: 0.0,
        y0: vec![1.0, 0.0],
        eval_times: (1..=20).map(|t| t as f64).collect(),
    };
    let tight = SolverSettings::with_tolerances(1e-8, 1e-10);
    c.bench_function("dopri5 oscillator 20 outputs", |b| {
        b.iter(|| solve(black_box(&problem), &tight).unwrap())
    });
}

fn batch_loss(c: &mut Criterion) {
    let data = simulate(&SimConfig {
        n_subjects: 64,
        ..SimConfig::default()
    })
    .unwrap()
    .dataset;
    let cfg = TrainConfig::default();
    let model = Model::new(cfg.architecture(data.n_features(), data.n_events), 0).unwrap();
    let settings = cfg.loss_settings(1.0);
    let records = &data.records;
    let batch = build_batch(records).unwrap();
    let outcomes: Vec<Outcome> = records.iter().map(SurvivalRecord::outcome).collect();

    c.bench_function("loss forward 64 subjects", |b| {
        b.iter(|| total_loss(black_box(records), &model, &settings, None).unwrap())
    });
    c.bench_function("loss forward+backward 64 subjects", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape);
            let v = loss_var(&mut tape, &p, &model, &batch, &outcomes, None, &settings).unwrap();
            tape.backward(v.total, model.params.len()).unwrap()
        })
    });
}

fn metrics(c: &mut Criterion) {
    let data = simulate(&SimConfig {
        n_subjects: 1000,
        ..SimConfig::default()
    })
    .unwrap()
    .dataset;
    let outcomes = data.outcomes();
    let pred: Vec<f64> = Array2::from_shape_fn((outcomes.len(), 1), |(i, _)| ((i * 7919) % 1000) as f64 / 1000.0)
        .into_raw_vec_and_offset()
        .0;
    c.bench_function("td_auc 1000 subjects", |b| {
        b.iter(|| td_auc(black_box(&pred), &outcomes, 1, 8.0).unwrap())
    });
    c.bench_function("td_brier 1000 subjects", |b| {
        b.iter(|| td_brier(black_box(&pred), &outcomes, 1, 8.0).unwrap())
    });
}

criterion_group!(benches, solver, batch_loss, metrics);
criterion_main!(benches);
