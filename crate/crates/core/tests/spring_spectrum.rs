use omsim::coeffs::{optical_spring_timeseries, spring_shift};
use omsim::model::SystemParams;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use std::f64::consts::PI;

// every frequency in play is a multiple of this, so one period lands each line on a bin
const BASE: f64 = 0.05;
const POINTS: usize = 4096;

/// One-sided amplitudes `|c_k| / N` of the spring series on bins `k BASE`.
fn spectrum(p: &SystemParams, i: usize) -> Vec<f64> {
    let span = 2.0 * PI / BASE;
    let times: Vec<f64> = (0..POINTS).map(|k| span * k as f64 / POINTS as f64).collect();
    let mut buf: Vec<Complex<f64>> = optical_spring_timeseries(p, i, &times)
        .into_iter()
        .map(|v| Complex::new(v, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(POINTS).process(&mut buf);
    buf[..POINTS / 2]
        .iter()
        .map(|c| c.norm() / POINTS as f64)
        .collect()
}

fn params(alpha2: f64) -> SystemParams {
    SystemParams {
        g1: 0.02,
        g2: 0.03,
        alpha2,
        ..SystemParams::default().with_detunings(0.8, 0.1)
    }
}

#[test]
fn spring_series_is_static_shift_plus_pump_beat() {
    let p = params(0.7);
    let beat = ((p.delta1 - p.delta2) / BASE).round() as usize;
    for i in 0..2 {
        let amps = spectrum(&p, i);
        let shift = spring_shift(&p, i);
        assert!((amps[0] - shift.abs()).abs() < 1e-12 * shift.abs());
        assert!(amps[beat] > 1e-3 * shift.abs());
        for (k, &a) in amps.iter().enumerate() {
            if k != 0 && k != beat {
                assert!(a < 1e-10 * amps[0], "stray line at bin {k}: {a:e}");
            }
        }
    }
}

#[test]
fn beat_line_is_linear_in_the_second_pump() {
    let beat = ((params(1.0).delta1 - params(1.0).delta2) / BASE).round() as usize;
    for i in 0..2 {
        let weak = spectrum(&params(0.35), i)[beat];
        let strong = spectrum(&params(0.7), i)[beat];
        assert!((strong / weak - 2.0).abs() < 1e-9, "ratio {}", strong / weak);
        assert!(spectrum(&params(0.0), i)[beat] < 1e-15);
    }
}
