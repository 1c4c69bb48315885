//! Finite-difference verification of the reverse-mode gradients along the
//! complete training loss path, plus the unitary-adjoint identity the FFT
//! backward rule relies on.

mod common;

use num_complex::Complex64;
use ueps::acquisition::make_equispaced_mask;
use ueps::fft::{fft2c, ifft2c};
use ueps::rng::SeededRng;
use ueps::training::TrainSlice;
use ueps::unrolled::{ModelParams, PipelineConfig, Variant};

use common::{gradient_check, oracle_denoiser, synthetic_dataset};

#[test]
fn fft_gradient_is_unitary_identity() {
    // L = ‖fft2c(x)‖² has gradient 2x: the cotangent 2·fft2c(x) pulled back
    // through the unitary adjoint (ifft2c) must land on 2x exactly.
    let mut rng = SeededRng::new(1);
    let x = rng.normal_complex_grid(2, 12, 12, 1.0).unwrap();
    let k = fft2c(&x).unwrap();
    let g_x = ifft2c(&k.scale(Complex64::new(2.0, 0.0))).unwrap();
    let expect = x.scale(Complex64::new(2.0, 0.0));
    assert!(g_x.max_abs_diff(&expect) < 1e-10);
}

#[test]
fn mae_gradient_sign_convention() {
    use ueps::grid::RealGrid;
    use ueps::training::mae_backward;
    let pred = RealGrid::from_vec(1, 4, vec![2.0, 0.0, 1.0, 1.0]).unwrap();
    let target = RealGrid::from_vec(1, 4, vec![1.0, 1.0, 1.0, 0.0]).unwrap();
    let g = mae_backward(&pred, &target).unwrap();
    assert_eq!(g.data(), &[0.25, -0.25, 0.0, 0.25]);
}

#[test]
fn ueps_pipeline_gradients_match_finite_differences() {
    let pipeline = PipelineConfig::progressive(
        Variant::Ueps,
        oracle_denoiser(),
        vec![(16, 16), (32, 32)],
    )
    .unwrap();
    let mask = make_equispaced_mask(32, 4.0, 0.08, 0).unwrap();
    let data = synthetic_dataset(1, 32, 32, 3, mask.clone(), 0.01, 31);

    let mut rng = SeededRng::new(5);
    let mut params = ModelParams::init(&pipeline, &mut rng).unwrap();
    // Random unembed layers and off-unity eta so every path carries signal.
    for d in params.denoisers.iter_mut() {
        for v in d.unembed_w.data.iter_mut() {
            *v = rng.truncated_normal(0.05);
        }
    }
    params.etas = vec![0.8, 0.9];

    let batch: Vec<&TrainSlice> = data.slices.iter().collect();
    let report = gradient_check(&pipeline, &params, &batch, &data.mask, 4, 1e-5, 77);
    println!(
        "ueps gradient check: {} probes, worst relative error {:.3e} at {}",
        report.probes, report.worst_rel, report.worst_group
    );
    assert!(
        report.worst_rel < 5e-4,
        "worst relative error {:.3e} at {}",
        report.worst_rel,
        report.worst_group
    );
}

#[test]
fn dum_pipeline_gradients_match_finite_differences() {
    // The CSM-based route exercises reduce/expand adjoints on the loss path.
    let pipeline =
        PipelineConfig::standard(Variant::Dum, 2, oracle_denoiser(), 32, 32).unwrap();
    let mask = make_equispaced_mask(32, 4.0, 0.08, 0).unwrap();
    let data = synthetic_dataset(1, 32, 32, 3, mask.clone(), 0.01, 33);

    let mut rng = SeededRng::new(6);
    let mut params = ModelParams::init(&pipeline, &mut rng).unwrap();
    for d in params.denoisers.iter_mut() {
        for v in d.unembed_w.data.iter_mut() {
            *v = rng.truncated_normal(0.05);
        }
    }
    params.etas = vec![0.7, 1.0];

    let batch: Vec<&TrainSlice> = data.slices.iter().collect();
    let report = gradient_check(&pipeline, &params, &batch, &data.mask, 3, 1e-5, 78);
    println!(
        "dum gradient check: {} probes, worst relative error {:.3e} at {}",
        report.probes, report.worst_rel, report.worst_group
    );
    assert!(
        report.worst_rel < 5e-4,
        "worst relative error {:.3e} at {}",
        report.worst_rel,
        report.worst_group
    );
}

#[test]
fn ue_pipeline_gradients_match_finite_differences() {
    let pipeline = PipelineConfig::standard(Variant::Ue, 2, oracle_denoiser(), 32, 32).unwrap();
    let mask = make_equispaced_mask(32, 4.0, 0.08, 0).unwrap();
    let data = synthetic_dataset(1, 32, 32, 2, mask.clone(), 0.01, 35);

    let mut rng = SeededRng::new(7);
    let mut params = ModelParams::init(&pipeline, &mut rng).unwrap();
    for d in params.denoisers.iter_mut() {
        for v in d.unembed_w.data.iter_mut() {
            *v = rng.truncated_normal(0.05);
        }
    }
    params.etas = vec![0.85, 0.95];

    let batch: Vec<&TrainSlice> = data.slices.iter().collect();
    let report = gradient_check(&pipeline, &params, &batch, &data.mask, 3, 1e-5, 79);
    println!(
        "ue gradient check: {} probes, worst relative error {:.3e} at {}",
        report.probes, report.worst_rel, report.worst_group
    );
    assert!(
        report.worst_rel < 5e-4,
        "worst relative error {:.3e} at {}",
        report.worst_rel,
        report.worst_group
    );
}
