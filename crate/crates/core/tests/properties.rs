use proptest::prelude::*;
use resotune::fitting::{fit_resonance, initial_guess};
use resotune::piezo::{tune_to_target, ControllerConfig, Outcome, PiezoStage, Plant};
use resotune::resonator::{
    calibrate_pin_model, tuned_frequency, CalibrationAnchors, PinCouplingModel, ResonatorParams,
    TuningState,
};
use resotune::stability::{detect_oscillation, detect_s21_oscillation, modulated_series};
use resotune::transmission::{
    loaded_q, s21_power, synthesize_sweep, NoiseModel, SweepConfig, SweepTrace,
};
use resotune::units::{GHZ, KHZ, NH, NM, UM};

fn plant_model() -> (ResonatorParams, PinCouplingModel) {
    let anchors = CalibrationAnchors {
        f_baseline: 6.8278 * GHZ,
        f_closest: 6.8454 * GHZ,
        d_min: 40.0 * UM,
        peak_sensitivity: 8.7 * KHZ / (60.0 * NM),
    };
    let params = ResonatorParams::from_frequency(NH, 6.8278 * GHZ, 35_000.0, 5e5, 0.0).unwrap();
    (params, calibrate_pin_model(&anchors).unwrap())
}

fn clean_trace(f_r: f64, q_l: f64, q_e: f64, phi: f64, span_lw: f64, n: usize) -> SweepTrace {
    let f = SweepConfig::centered(f_r, span_lw * f_r / q_l, n, -131.0).frequencies();
    let p = f.iter().map(|&x| s21_power(x, f_r, q_l, q_e, phi)).collect();
    SweepTrace::new(f, p, -131.0, 0.0).unwrap()
}

fn sum_sq_at(trace: &SweepTrace, f_r: f64, q_l: f64, q_e: f64, phi: f64) -> f64 {
    trace
        .frequencies
        .iter()
        .zip(&trace.power_ratio)
        .map(|(&f, &p)| (p - s21_power(f, f_r, q_l, q_e, phi)).powi(2))
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn noiseless_fits_recover_parameters(
        log_qi in 4.0f64..6.0,
        log_qe in 5.0f64..7.0,
        phi in -0.5f64..0.5,
        n in 801usize..1601,
    ) {
        let (q_i, q_e) = (10f64.powf(log_qi), 10f64.powf(log_qe));
        let q_l = loaded_q(q_i, q_e);
        let f_r = 6.834683 * GHZ;
        let fit = fit_resonance(&clean_trace(f_r, q_l, q_e, phi, 10.0, n), None).unwrap();
        prop_assert!((fit.f_r / f_r - 1.0).abs() < 1e-3);
        prop_assert!((fit.q_l / q_l - 1.0).abs() < 1e-3);
        prop_assert!((fit.q_e / q_e - 1.0).abs() < 1e-3);
        prop_assert!((fit.phi - phi).abs() < 1e-3);
    }

    #[test]
    fn optimum_is_no_worse_than_the_guess(
        log_qi in 4.0f64..6.0,
        log_qe in 5.0f64..7.0,
        phi in -0.5f64..0.5,
        seed in 0u64..1000,
    ) {
        let (q_i, q_e) = (10f64.powf(log_qi), 10f64.powf(log_qe));
        let q_l = loaded_q(q_i, q_e);
        let f_r = 6.8 * GHZ;
        let params = ResonatorParams::from_frequency(NH, f_r, q_i, q_e, phi).unwrap();
        let (_, pin) = plant_model();
        let cfg = SweepConfig::centered(f_r, 10.0 * f_r / q_l, 801, -131.0);
        let noise = NoiseModel { sigma_rel: 0.005, seed, ..NoiseModel::NONE };
        let trace = synthesize_sweep(&cfg, &params, &TuningState::at(1.0), &pin, &noise).unwrap();
        if let (Ok(g), Ok(fit)) = (initial_guess(&trace), fit_resonance(&trace, None)) {
            prop_assert!(fit.rms_residual <= fit.initial_rms_residual);
            if fit.warnings.iter().all(|w| !w.contains("dips")) {
                let at_guess = sum_sq_at(&trace, g.f_r, g.q_l, g.q_e, g.phi);
                let at_fit = sum_sq_at(&trace, fit.f_r, fit.q_l, fit.q_e, fit.phi);
                prop_assert!(at_fit <= at_guess);
            }
        }
    }

    #[test]
    fn fits_are_scale_invariant(
        log_qi in 4.0f64..6.0,
        log_qe in 5.0f64..7.0,
        phi in -0.5f64..0.5,
        s in 0.25f64..4.0,
    ) {
        let (q_i, q_e) = (10f64.powf(log_qi), 10f64.powf(log_qe));
        let q_l = loaded_q(q_i, q_e);
        let f_r = 6.8 * GHZ;
        let base = clean_trace(f_r, q_l, q_e, phi, 10.0, 801);
        let scaled = SweepTrace::new(
            base.frequencies.iter().map(|f| f * s).collect(),
            base.power_ratio.clone(),
            -131.0,
            0.0,
        ).unwrap();
        let a = fit_resonance(&base, None).unwrap();
        let b = fit_resonance(&scaled, None).unwrap();
        prop_assert!((b.f_r / (s * a.f_r) - 1.0).abs() < 1e-6);
        prop_assert!((b.q_l / a.q_l - 1.0).abs() < 1e-6);
        prop_assert!((b.q_e / a.q_e - 1.0).abs() < 1e-6);
        prop_assert!((b.phi - a.phi).abs() < 1e-6);
    }

    #[test]
    fn internal_q_is_consistent(
        log_qi in 4.0f64..6.0,
        log_qe in 5.0f64..7.0,
        phi in -0.5f64..0.5,
    ) {
        let (q_i, q_e) = (10f64.powf(log_qi), 10f64.powf(log_qe));
        let q_l = loaded_q(q_i, q_e);
        let fit = fit_resonance(&clean_trace(6.8 * GHZ, q_l, q_e, phi, 10.0, 801), None).unwrap();
        prop_assert!(fit.converged);
        let gap = (1.0 / fit.q_l - 1.0 / fit.q_e - 1.0 / fit.q_i).abs();
        prop_assert!(gap < 1e-12 / fit.q_l);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn controller_converges_across_the_stage_range(
        start_um in 45.0f64..600.0,
        target_frac in 0.0f64..1.0,
    ) {
        let (params, pin) = plant_model();
        let f_far = tuned_frequency(&params, &TuningState::at(600.0 * UM), &pin).unwrap();
        let f_near = tuned_frequency(&params, &TuningState::at(45.0 * UM), &pin).unwrap();
        let cfg = ControllerConfig { f_target: f_far + target_frac * (f_near - f_far), ..Default::default() };
        let mut plant = Plant { params, state: TuningState::at(start_um * UM), pin, noise: NoiseModel::NONE };
        let mut stage = PiezoStage::new(start_um * UM, pin.d_min);
        let session = tune_to_target(&mut plant, &mut stage, &cfg).unwrap();
        prop_assert_eq!(session.outcome, Outcome::Converged);
        prop_assert!(session.total_steps <= 2000);
        prop_assert!(session.log.iter().all(|e| e.position >= pin.d_min));
        let truth = plant.true_frequency().unwrap();
        prop_assert!((truth - cfg.f_target).abs() <= cfg.tolerance_hz());
    }
}

#[test]
fn largest_step_at_36_volts_matches_the_peak_resolution() {
    let (params, pin) = plant_model();
    let mut stage = PiezoStage::new(40.0 * UM, pin.d_min);
    assert_eq!(stage.voltage, 36.0);
    let mut f_prev = tuned_frequency(&params, &TuningState::at(stage.position), &pin).unwrap();
    let mut largest = 0.0f64;
    while stage.position < 600.0 * UM {
        stage.step(resotune::piezo::Direction::Away).unwrap();
        let f = tuned_frequency(&params, &TuningState::at(stage.position), &pin).unwrap();
        largest = largest.max((f - f_prev).abs());
        f_prev = f;
    }
    assert!((largest / (8.7 * KHZ) - 1.0).abs() < 0.15, "{largest}");
}

#[test]
fn oscillations_at_snr_10_are_recovered_across_seeds() {
    let (rate, n, nu) = (2000.0, 2048, 137.3);
    let sigma = 50.0;
    // power signal-to-noise A^2 / (2 sigma^2) = 10
    let amplitude = (20.0f64).sqrt() * sigma;
    for seed in 0..50 {
        let x = modulated_series(6.8 * GHZ, n, rate, amplitude, nu, sigma, seed);
        let osc = detect_oscillation(&x, rate).unwrap();
        assert!((osc.frequency / nu - 1.0).abs() < 0.05, "seed {seed}: {osc:?}");
        assert!((osc.amplitude / amplitude - 1.0).abs() < 0.05, "seed {seed}: {osc:?}");
    }
}

#[test]
fn pin_vibration_shows_as_about_100_khz_of_jitter() {
    let (params, pin) = plant_model();
    let state = TuningState::at(40.0 * UM);
    let f_r = tuned_frequency(&params, &state, &pin).unwrap();
    let slope = resotune::resonator::tuning_slope(&params, &state, &pin).unwrap().abs();
    let jitter = slope * 0.7 * UM;
    assert!((jitter / 100e3 - 1.0).abs() < 0.05);

    // S21 probed 1.5 linewidths below resonance while the pin oscillates at 3 kHz.
    let q_l = loaded_q(params.qi0, params.qe);
    let probe = f_r - 1.5 * f_r / q_l;
    let rate = 50e3;
    let samples: Vec<f64> = (0..4096)
        .map(|i| {
            let shift = jitter * (std::f64::consts::TAU * 3e3 * i as f64 / rate).sin();
            s21_power(probe, f_r + shift, q_l, params.qe, params.phi)
        })
        .collect();
    let osc = detect_s21_oscillation(&samples, rate, probe, f_r, q_l, params.qe, params.phi).unwrap();
    assert!((osc.frequency / 3e3 - 1.0).abs() < 0.05);
    assert!((osc.amplitude / jitter - 1.0).abs() < 0.05, "{} vs {jitter}", osc.amplitude);
}

#[test]
fn controller_covers_the_full_stage_range_both_ways() {
    let (params, pin) = plant_model();
    for (start_um, end_um) in [(45.0, 600.0), (600.0, 45.0)] {
        let target = tuned_frequency(&params, &TuningState::at(end_um * UM), &pin).unwrap();
        let cfg = ControllerConfig { f_target: target, ..Default::default() };
        let mut plant = Plant { params, state: TuningState::at(start_um * UM), pin, noise: NoiseModel::NONE };
        let mut stage = PiezoStage::new(start_um * UM, pin.d_min);
        let session = tune_to_target(&mut plant, &mut stage, &cfg).unwrap();
        assert_eq!(session.outcome, Outcome::Converged, "{start_um} -> {end_um}");
        assert!(session.total_steps <= 2000, "{start_um} -> {end_um}: {} steps", session.total_steps);
        let truth = plant.true_frequency().unwrap();
        assert!((truth - target).abs() <= cfg.tolerance_hz());
    }
}
