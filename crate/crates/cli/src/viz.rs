//! 8-bit visualizations of disparity maps and their errors.
//!
//! Disparity uses the turbo colormap over `[0, d_max]`.
//! Error maps follow the usual stereo-benchmark palette: the error is
//! normalized by the D1 threshold, `n = min(err / 3, err / (0.05 * gt))`, so
//! `n > 1` exactly when the pixel is a D1 outlier, and `n` is binned into ten
//! colors running from blue (small) to red (large). Pixels without ground
//! truth are black.

/// Turbo colormap, `t` clamped to `[0, 1]`.
pub fn turbo(t: f64) -> [u8; 3] {
    colorous::TURBO.eval_continuous(t.clamp(0.0, 1.0)).into_array()
}

/// Upper bin edges of the normalized error, with their colors.
pub const ERROR_PALETTE: [(f64, [u8; 3]); 10] = [
    (0.0625, [49, 54, 149]),
    (0.125, [69, 117, 180]),
    (0.25, [116, 173, 209]),
    (0.5, [171, 217, 233]),
    (1.0, [224, 243, 248]),
    (2.0, [254, 224, 144]),
    (4.0, [253, 174, 97]),
    (8.0, [244, 109, 67]),
    (16.0, [215, 48, 39]),
    (f64::INFINITY, [165, 0, 38]),
];

pub fn normalized_error(pred: f64, gt: f64) -> f64 {
    let err = (pred - gt).abs();
    (err / 3.0).min(if gt > 0.0 { err / (0.05 * gt) } else { f64::INFINITY })
}

pub fn error_color(n: f64) -> [u8; 3] {
    ERROR_PALETTE.iter().find(|(edge, _)| n <= *edge).map_or(ERROR_PALETTE[9].1, |e| e.1)
}

/// Interleaved RGB bytes of a colorized disparity map.
pub fn colorize_disparity(disp: &[f32], d_max: f64) -> Vec<u8> {
    disp.iter().flat_map(|&d| turbo(d as f64 / d_max)).collect()
}

/// Interleaved RGB bytes of an error map.
pub fn colorize_error(pred: &[f32], gt: &[f32], valid: &[bool]) -> Vec<u8> {
    pred.iter()
        .zip(gt)
        .zip(valid)
        .flat_map(|((&p, &g), &v)| if v { error_color(normalized_error(p as f64, g as f64)) } else { [0, 0, 0] })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn turbo_runs_from_blue_through_green_to_red() {
        let [r, g, b] = turbo(0.15);
        assert!(b > r && b > g, "{:?}", [r, g, b]);
        let [r, g, b] = turbo(0.5);
        assert!(g > r && g > b, "{:?}", [r, g, b]);
        let [r, g, b] = turbo(0.9);
        assert!(r > g && r > b, "{:?}", [r, g, b]);
        assert_eq!(turbo(-1.0), turbo(0.0));
        assert_eq!(turbo(2.0), turbo(1.0));
    }

    #[test]
    fn outlier_boundary_splits_the_palette() {
        // 4 px at gt 100 is within 5 %; at gt 10 it is not
        assert!(normalized_error(104.0, 100.0) <= 1.0);
        assert!(normalized_error(14.0, 10.0) > 1.0);
        assert_eq!(error_color(0.0), [49, 54, 149]);
        assert_eq!(error_color(1.0), [224, 243, 248]);
        assert_eq!(error_color(1.01), [254, 224, 144]);
        assert_eq!(error_color(1e9), [165, 0, 38]);
        assert_eq!(colorize_error(&[1.0], &[1.0], &[false]), vec![0, 0, 0]);
    }
}
