use std::f64::consts::PI;

use dlpr_core::image::GrayImage;
use dlpr_core::optics::{
    calibrate_phase, intensity, phase_to_field, propagate, simulate_measurement, ComplexField, NoiseSpec,
    PropagationConfig, Propagator,
};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 64;

fn cfg(distance: f64, pad: usize) -> PropagationConfig {
    PropagationConfig { distance, pad_factor: pad, ..PropagationConfig::default() }
}

/// First Rayleigh-Sommerfeld solution summed directly over every source
/// sample, each treated as a point radiator of area `pitch^2`.
fn rayleigh_sommerfeld(src: &ComplexField, cfg: &PropagationConfig) -> Vec<Complex64> {
    let n = src.width();
    let (k, z, p) = (2.0 * PI / cfg.wavelength, cfg.distance, cfg.pixel_pitch);
    let sources: Vec<(f64, f64, Complex64)> = src
        .values()
        .iter()
        .enumerate()
        .filter(|(_, a)| a.norm_sqr() > 0.0)
        .map(|(i, &a)| ((i / n) as f64 * p, (i % n) as f64 * p, a))
        .collect();
    let mut out = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let (y, x) = (r as f64 * p, c as f64 * p);
            let mut acc = Complex64::new(0.0, 0.0);
            for &(sy, sx, a) in &sources {
                let rr = ((x - sx).powi(2) + (y - sy).powi(2) + z * z).sqrt();
                let h = (z / rr) * (1.0 / rr - Complex64::i() * k) * Complex64::from_polar(1.0, k * rr) / (2.0 * PI * rr);
                acc += a * h * p * p;
            }
            out.push(acc);
        }
    }
    out
}

fn relative_l2(a: &[Complex64], b: &[Complex64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    (num / den).sqrt()
}

fn max_diff(a: &ComplexField, b: &ComplexField) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

/// A few wide Gaussian beams with gentle tilts near the grid center: no
/// evanescent content and negligible energy near the crop boundary.
fn band_limited_field(seed: u64) -> ComplexField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![Complex64::new(0.0, 0.0); N * N];
    for _ in 0..rng.random_range(1..=3) {
        let cy = 32.0 + rng.random_range(-4.0..4.0);
        let cx = 32.0 + rng.random_range(-4.0..4.0);
        let sigma: f64 = rng.random_range(3.0..4.0);
        let amp = Complex64::from_polar(rng.random_range(0.3..1.0), rng.random_range(0.0..2.0 * PI));
        let (ky, kx) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
        for r in 0..N {
            for c in 0..N {
                let (dy, dx) = (r as f64 - cy, c as f64 - cx);
                let envelope = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                values[r * N + c] += amp * envelope * Complex64::from_polar(1.0, kx * dx + ky * dy);
            }
        }
    }
    ComplexField::new(N, N, values).unwrap()
}

fn gaussian_spot(sigma: f64) -> ComplexField {
    let values = (0..N * N)
        .map(|i| {
            let (dy, dx) = ((i / N) as f64 - 32.0, (i % N) as f64 - 32.0);
            Complex64::new((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp(), 0.0)
        })
        .collect();
    ComplexField::new(N, N, values).unwrap()
}

#[test]
fn smooth_source_matches_direct_rayleigh_sommerfeld_summation() {
    let cfg = cfg(0.05, 2);
    let src = gaussian_spot(2.0);
    let err = relative_l2(propagate(&src, &cfg).unwrap().values(), &rayleigh_sommerfeld(&src, &cfg));
    assert!(err < 1e-3, "relative L2 error {err}");
}

#[test]
fn single_pixel_source_is_tracked_against_rayleigh_sommerfeld() {
    // A lone pixel carries spatial frequencies past the grid's Nyquist limit,
    // which the sampled transfer function cannot represent; the gap is
    // bounded but well above the smooth-source level.
    let cfg = cfg(0.05, 2);
    let mut src = ComplexField::zeros(N, N);
    src.values_mut()[32 * N + 32] = Complex64::new(1.0, 0.0);
    let err = relative_l2(propagate(&src, &cfg).unwrap().values(), &rayleigh_sommerfeld(&src, &cfg));
    assert!(err.is_finite() && err < 0.2, "relative L2 error {err}");
}

#[test]
fn measurement_is_the_composition_of_its_stages() {
    let cfg = cfg(0.375, 2);
    let px = (0..N * N).map(|i| if (24..40).contains(&(i / N)) && (24..40).contains(&(i % N)) { 180 } else { 0 }).collect();
    let img = GrayImage::new(N, N, px).unwrap();
    let staged = intensity(&propagate(&phase_to_field(&calibrate_phase(&img, N).unwrap()), &cfg).unwrap());
    let direct = simulate_measurement(&img, &cfg, &NoiseSpec::default()).unwrap();
    assert_eq!(staged.intensity(), direct.intensity());
}

#[test]
fn uniform_objects_give_unit_intensity_on_a_periodic_grid() {
    for (gray, d) in [(0u8, 0.1), (77, 0.375), (255, 0.975)] {
        let raw = simulate_measurement(&GrayImage::filled(N, N, gray), &cfg(d, 1), &NoiseSpec::default()).unwrap();
        assert!(raw.intensity().iter().all(|v| (v - 1.0).abs() < 1e-9), "gray {gray}");
    }
    let lo = simulate_measurement(&GrayImage::filled(N, N, 0), &cfg(0.375, 2), &NoiseSpec::default()).unwrap();
    let hi = simulate_measurement(&GrayImage::filled(N, N, 255), &cfg(0.375, 2), &NoiseSpec::default()).unwrap();
    for (a, b) in lo.intensity().iter().zip(hi.intensity()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn calibrated_fields_have_unit_modulus() {
    let px = (0..N * N).map(|i| (i * 37 % 256) as u8).collect();
    let field = phase_to_field(&calibrate_phase(&GrayImage::new(N, N, px).unwrap(), N).unwrap());
    assert!(field.values().iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
}

#[test]
fn reusable_propagator_agrees_with_one_shot_call() {
    let cfg = cfg(0.2, 2);
    let field = band_limited_field(3);
    let prop = Propagator::new(&cfg).unwrap();
    assert_eq!(prop.propagate(&field).unwrap(), propagate(&field, &cfg).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn energy_is_conserved(seed in any::<u64>(), d in 0.005f64..0.05) {
        let u = band_limited_field(seed);
        let out = propagate(&u, &cfg(d, 2)).unwrap();
        let drift = (out.energy() - u.energy()).abs() / u.energy();
        prop_assert!(drift <= 1e-6, "drift {drift}");
    }

    #[test]
    fn zero_distance_is_identity(seed in any::<u64>(), pad in 1usize..4) {
        let u = band_limited_field(seed);
        prop_assert!(max_diff(&propagate(&u, &cfg(0.0, pad)).unwrap(), &u) <= 1e-10);
    }

    #[test]
    fn back_propagation_recovers_the_field(seed in any::<u64>(), d in 0.002f64..0.025) {
        let u = band_limited_field(seed);
        let there = propagate(&u, &cfg(d, 2)).unwrap();
        let back = propagate(&there, &cfg(-d, 2)).unwrap();
        prop_assert!(max_diff(&back, &u) < 1e-8);
    }

    #[test]
    fn distances_compose(seed in any::<u64>(), d1 in 0.002f64..0.025, d2 in 0.002f64..0.025) {
        let u = band_limited_field(seed);
        let once = propagate(&u, &cfg(d1 + d2, 2)).unwrap();
        let twice = propagate(&propagate(&u, &cfg(d1, 2)).unwrap(), &cfg(d2, 2)).unwrap();
        prop_assert!(max_diff(&once, &twice) < 1e-8);
    }

    #[test]
    fn propagation_is_linear(s1 in any::<u64>(), s2 in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0, d in -0.5f64..0.5) {
        let (u, v) = (band_limited_field(s1), band_limited_field(s2));
        let (alpha, beta) = (Complex64::new(a, 0.5), Complex64::new(-0.25, b));
        let mix: Vec<Complex64> = u.values().iter().zip(v.values()).map(|(x, y)| alpha * x + beta * y).collect();
        let c = cfg(d, 2);
        let lhs = propagate(&ComplexField::new(N, N, mix).unwrap(), &c).unwrap();
        let (pu, pv) = (propagate(&u, &c).unwrap(), propagate(&v, &c).unwrap());
        let rhs: Vec<Complex64> = pu.values().iter().zip(pv.values()).map(|(x, y)| alpha * x + beta * y).collect();
        prop_assert!(max_diff(&lhs, &ComplexField::new(N, N, rhs).unwrap()) <= 1e-10);
    }

    #[test]
    fn intensity_ignores_a_global_phase_offset(seed in any::<u64>(), offset in 1u8..=100, d in 0.05f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px: Vec<u8> = (0..N * N).map(|_| rng.random_range(0..=155)).collect();
        let lifted: Vec<u8> = px.iter().map(|&g| g + offset).collect();
        let c = cfg(d, 2);
        let a = simulate_measurement(&GrayImage::new(N, N, px).unwrap(), &c, &NoiseSpec::default()).unwrap();
        let b = simulate_measurement(&GrayImage::new(N, N, lifted).unwrap(), &c, &NoiseSpec::default()).unwrap();
        for (x, y) in a.intensity().iter().zip(b.intensity()) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn phases_stay_in_range(gray in prop::collection::vec(any::<u8>(), N * N)) {
        let obj = calibrate_phase(&GrayImage::new(N, N, gray).unwrap(), N).unwrap();
        prop_assert!(obj.phase().iter().all(|p| (-PI..=0.0).contains(p)));
    }

    #[test]
    fn intensity_is_non_negative(seed in any::<u64>(), d in -1.0f64..1.0) {
        let raw = intensity(&propagate(&band_limited_field(seed), &cfg(d, 2)).unwrap());
        prop_assert!(raw.intensity().iter().all(|&v| v >= 0.0));
    }
}
