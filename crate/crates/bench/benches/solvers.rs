use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use keldysh::bh::exact::{observe_exact, InitialKind};
use keldysh::bh::twopi::{Scheme, TwoPiConfig, TwoPiInitial, TwoPiSolver};
use keldysh::bh::{BhParams, Boundary};
use keldysh::qmon::{QmonConfig, QmonOrder, QmonParams, QmonSolver};
use keldysh::spectral::{product_spectrum, zeta_partial};
use keldysh::TimeGrid;

fn qmon_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("qmon step");
    for rows in [500, 2000] {
        let grid = TimeGrid::new(0.0, 0.01, rows + 2).unwrap();
        let cfg = QmonConfig::new(QmonParams::new(20, 1.0, 1.0), QmonOrder::Nlo, grid);
        let mut base = QmonSolver::new(cfg.clone()).unwrap();
        while base.current() + 1 < rows {
            base.step().unwrap();
        }
        let (r, f, rho) = base.state();
        let (f, rho) = (f.to_vec(), rho.to_vec());
        drop(base);
        g.bench_function(format!("nlo at {rows} rows"), |b| {
            b.iter_batched_ref(
                || {
                    let mut s = QmonSolver::new(cfg.clone()).unwrap();
                    s.restore(r, &f, &rho).unwrap();
                    s
                },
                |s| s.step().unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

fn twopi_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("2pi step");
    for s in [Scheme::Hfb, Scheme::SecondOrder, Scheme::LargeNNlo] {
        let cfg = TwoPiConfig::new(
            BhParams::new(2, 1.0, 0.1, Boundary::DoubleLink),
            s,
            TimeGrid::new(0.0, 0.02, 402).unwrap(),
            TwoPiInitial::all_in_one_well(40.0, 2),
        );
        g.bench_function(format!("{} at 400 rows", s.tag()), |b| {
            b.iter_batched_ref(
                || {
                    let mut solver = TwoPiSolver::new(cfg.clone()).unwrap();
                    while solver.current() < 400 {
                        solver.step().unwrap();
                    }
                    solver
                },
                |solver| solver.step().unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

fn exact_propagation(c: &mut Criterion) {
    let p = BhParams::new(2, 1.0, 0.1, Boundary::DoubleLink);
    let grid = TimeGrid::spanning(0.0, 1.0, 0.01).unwrap();
    let mut g = c.benchmark_group("exact");
    g.sample_size(10);
    for n in [40, 400] {
        g.bench_function(format!("N={n}, 100 steps"), |b| {
            b.iter(|| observe_exact(black_box(n), &p, &InitialKind::AllInOneWell, &grid).unwrap())
        });
    }
    g.finish();
}

fn spectral(c: &mut Criterion) {
    c.bench_function("spectrum to 1e4", |b| b.iter(|| product_spectrum(1.0, 1.0, 1.0, black_box(1e4)).unwrap()));
    let s = product_spectrum(1.0, 1.0, 1.0, 1e4).unwrap();
    c.bench_function("zeta partial sum", |b| b.iter(|| zeta_partial(&s, black_box(2.5), 1.0, false).unwrap()));
}

criterion_group!(benches, qmon_step, twopi_step, exact_propagation, spectral);
criterion_main!(benches);
