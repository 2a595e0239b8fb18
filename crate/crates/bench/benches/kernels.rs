use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;
use xmodal_bench::{linear_responses, random_matrix};
use xmodal_core::embed::{lag_grid, FeatureMatrix};
use xmodal_core::netft::{extract_features, FeatureNet, FeatureNetConfig};
use xmodal_core::netft::loss::spatial_corr_loss;
use xmodal_core::ridge::{fit_ridge_cv, lag_sweep, RidgeConfig, Solver};
use xmodal_core::signal::{high_gamma, resample_lanczos, welch_psd, WelchConfig};
use xmodal_core::TimeSeries;

fn ridge(c: &mut Criterion) {
    let x = random_matrix(2000, 64, 1);
    let y = linear_responses(&x, 32, 2);
    for (name, solver) in [("ridge_cv_eigen_2000x64", Solver::Eigen), ("ridge_cv_cholesky_2000x64", Solver::Cholesky)] {
        let cfg = RidgeConfig { solver, ..RidgeConfig::default() };
        c.bench_function(name, |b| b.iter(|| fit_ridge_cv(black_box(&x), black_box(&y), &cfg).unwrap()));
    }
}

fn sweep(c: &mut Criterion) {
    let x = random_matrix(1200, 16, 3);
    let y = linear_responses(&x, 8, 4);
    let feats = FeatureMatrix::new(x, 20.0).unwrap();
    let resp = TimeSeries::from_matrix(20.0, &y).unwrap();
    let lags = lag_grid(-0.5, 0.5, 21, 20.0).unwrap();
    let cfg = RidgeConfig { solver: Solver::Cholesky, ..RidgeConfig::default() };
    c.bench_function("lag_sweep_21_lags", |b| b.iter(|| lag_sweep(&feats, &resp, black_box(&lags), &cfg).unwrap()));
}

fn spectral(c: &mut Criterion) {
    let m = random_matrix(20_000, 8, 5);
    let ts = TimeSeries::from_matrix(400.0, &m).unwrap();
    let cfg = WelchConfig { segment_length: 512, overlap_fraction: 0.5 };
    c.bench_function("welch_8ch_20000", |b| b.iter(|| welch_psd(black_box(&ts), cfg).unwrap()));
    c.bench_function("lanczos_400_to_20hz", |b| b.iter(|| resample_lanczos(black_box(&ts), 20.0, 3).unwrap()));
    c.bench_function("high_gamma_8ch", |b| b.iter(|| high_gamma(black_box(&ts), 20.0).unwrap()));
}

fn net(c: &mut Criterion) {
    let cfg = FeatureNetConfig { n_layers: 2, d_model: 16, n_heads: 2, mlp_width: 32, tap_layer: 2, ..FeatureNetConfig::default() };
    let net = FeatureNet::new(cfg).unwrap();
    let wave = random_matrix(200 * 30, 1, 6);
    let stim = TimeSeries::from_matrix(200.0, &wave).unwrap();
    c.bench_function("extract_features_30s", |b| b.iter(|| extract_features(&net, black_box(&stim), 0.25).unwrap()));

    let pred = random_matrix(100, 32, 7);
    let actual = random_matrix(100, 32, 8);
    c.bench_function("spatial_corr_loss_100x32", |b| {
        b.iter_batched(|| pred.clone(), |p| spatial_corr_loss(&p, black_box(&actual)).unwrap(), BatchSize::SmallInput)
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = ridge, sweep, spectral, net
}
criterion_main!(benches);
