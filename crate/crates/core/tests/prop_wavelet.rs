use proptest::prelude::*;
use tfcl::dataio::{SignalWindow, WINDOW_LEN};
use tfcl::wavelet::{cwt, default_scale_grid, frequency_to_scale, scale_grid, scalogram};

fn signal(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cwt_is_linear(x in signal(128), y in signal(128), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let grid = scale_grid(16, 0.5, 20.0, 0.02).unwrap();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let cm = cwt(&mix, &grid).unwrap();
        let (cx, cy) = (cwt(&x, &grid).unwrap(), cwt(&y, &grid).unwrap());
        let scale = cm.data.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..cm.data.len() {
            let want = a * cx.data[i] + b * cy.data[i];
            prop_assert!((cm.data[i] - want).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn scalogram_pixels_are_finite_unit_interval(v in prop::collection::vec(-1e6f64..1e6, WINDOW_LEN * 3), zeros in any::<bool>()) {
        let w = SignalWindow {
            values: if zeros { vec![0.0; WINDOW_LEN * 3] } else { v },
            subject: "s".into(),
            label: None,
            recording: 0,
            source_offset: 0,
        };
        let grid = default_scale_grid(50.0).unwrap();
        let s = scalogram(&w, &grid).unwrap();
        prop_assert!(s.pixels.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)));
        if zeros {
            prop_assert!(s.pixels.iter().all(|&p| p == 0.0));
        }
        prop_assert_eq!(scalogram(&w, &grid).unwrap(), s);
    }
}

/// Row of the scale grid with the largest mean squared coefficient over the
/// central half of a long pure tone.
fn ridge_row(f: f64, grid: &tfcl::wavelet::ScaleGrid) -> usize {
    let n = 2048;
    let x: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * f * i as f64 * grid.dt()).sin()).collect();
    let c = cwt(&x, grid).unwrap();
    (0..grid.len())
        .map(|r| (r, c.row(r)[n / 4..3 * n / 4].iter().map(|v| v * v).sum::<f64>()))
        .fold((0, f64::MIN), |best, (r, e)| if e > best.1 { (r, e) } else { best })
        .0
}

#[test]
fn ridge_follows_pseudo_frequency() {
    let grid = default_scale_grid(50.0).unwrap();
    for f in [1.0, 2.0, 3.5, 5.0, 8.0, 12.0, 16.0] {
        let target = frequency_to_scale(f);
        let nearest = (0..grid.len())
            .min_by(|&a, &b| (grid.scales()[a] - target).abs().total_cmp(&(grid.scales()[b] - target).abs()))
            .unwrap();
        let r = ridge_row(f, &grid);
        assert!(r.abs_diff(nearest) <= 1, "{f} Hz: ridge row {r}, expected {nearest}");
    }
}
