use criterion::{black_box, criterion_group, criterion_main, Criterion};
use hei_bench::fixture;
use hei_core::fem::{assemble_mass, assemble_stiffness};
use hei_core::multiscale::build_decomposition;
use hei_core::nn::{Graph, Tensor};
use hei_core::splitting::{project_initial, LinearStepper, NewtonConfig, NonlinearStepper};
use hei_core::transformer::{TransformerConfig, TransformerModel};
use hei_core::Stepper;

fn assembly(c: &mut Criterion) {
    let f = fixture(40, 8);
    c.bench_function("assemble_mass_40", |b| b.iter(|| assemble_mass(black_box(&f.mesh))));
    c.bench_function("assemble_stiffness_40", |b| {
        b.iter(|| assemble_stiffness(black_box(&f.mesh), &f.kappa).unwrap())
    });
}

fn decomposition(c: &mut Criterion) {
    let f = fixture(20, 4);
    let mut group = c.benchmark_group("decomposition");
    group.sample_size(10);
    group.bench_function("build_20_4", |b| {
        b.iter(|| build_decomposition(&f.mesh, &f.coarse, &f.kappa, 3, 2, &f.mass).unwrap())
    });
    group.finish();
}

fn splitting_step(c: &mut Criterion) {
    let f = fixture(40, 8);
    let u0 = f.mesh.interpolate(|x, y| (-((x - 0.5f64).powi(2) + (y - 0.5f64).powi(2)) / 0.01).exp());
    let s0 = project_initial(&f.dec, &f.mass, &u0).unwrap();
    let mut linear = LinearStepper::new(&f.ps, 2e-8, 0.5).unwrap();
    c.bench_function("linear_step_40_8", |b| b.iter(|| linear.step(black_box(&s0), &s0).unwrap()));
    let mut nonlinear = NonlinearStepper::new(&f.mesh, &f.dec, &f.kappa, &f.ps, 2e-8, 0.5, NewtonConfig::default()).unwrap();
    let mut group = c.benchmark_group("nonlinear");
    group.sample_size(10);
    group.bench_function("step_40_8", |b| b.iter(|| nonlinear.step(black_box(&s0), &s0).unwrap()));
    group.finish();
}

fn transformer(c: &mut Criterion) {
    let cfg = TransformerConfig {
        source_dim: 128,
        target_dim: 243,
        ..TransformerConfig::default()
    };
    let mut model = TransformerModel::new(cfg).unwrap();
    let batch = 47;
    let src = Tensor::from_fn(&[batch, 2, 128], |i| (i as f64 * 0.37).sin());
    let tgt = Tensor::from_fn(&[batch, 2, 243], |i| (i as f64 * 0.11).cos());
    c.bench_function("transformer_forward_b47", |b| b.iter(|| model.predict(black_box(&src), &tgt).unwrap()));
    c.bench_function("transformer_forward_backward_b47", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let s = g.input(src.clone());
            let t = g.input(tgt.clone());
            let out = model.forward(&mut g, &model.store, s, t).unwrap();
            let target = g.input(tgt.clone());
            let loss = g.mse(out, target).unwrap();
            g.backward(loss, &mut model.store).unwrap();
        })
    });
}

criterion_group!(benches, assembly, decomposition, splitting_step, transformer);
criterion_main!(benches);
