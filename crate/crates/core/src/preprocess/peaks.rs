//! Peak detection and heart-rate estimation.

/// Minimum spacing between accepted peaks, seconds.
pub const MIN_PEAK_DISTANCE_S: f64 = 0.25;
/// Prominence threshold as a multiple of the signal's interquartile range.
pub const PROMINENCE_IQR_FACTOR: f64 = 0.3;

pub(crate) fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn interquartile_range(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    quantile(&s, 0.75) - quantile(&s, 0.25)
}

/// Local maxima; a flat top reports its middle sample.
fn local_maxima(x: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    let n = x.len();
    let mut i = 1;
    while i + 1 < n {
        if x[i - 1] < x[i] {
            let mut ahead = i + 1;
            while ahead + 1 < n && x[ahead] == x[i] {
                ahead += 1;
            }
            if x[ahead] < x[i] {
                out.push((i + ahead - 1) / 2);
                i = ahead;
            }
        }
        i += 1;
    }
    out
}

/// Topographic prominence of each peak.
pub fn prominences(x: &[f64], peaks: &[usize]) -> Vec<f64> {
    peaks
        .iter()
        .map(|&p| {
            let h = x[p];
            let mut left_min = h;
            let mut i = p;
            while i > 0 {
                i -= 1;
                if x[i] > h {
                    break;
                }
                left_min = left_min.min(x[i]);
            }
            let mut right_min = h;
            let mut j = p;
            while j + 1 < x.len() {
                j += 1;
                if x[j] > h {
                    break;
                }
                right_min = right_min.min(x[j]);
            }
            h - left_min.max(right_min)
        })
        .collect()
}

/// Peaks separated by at least `min_distance` samples (taller peaks win)
/// whose prominence is at least `min_prominence`. Sorted by position.
pub fn find_peaks(x: &[f64], min_distance: usize, min_prominence: f64) -> Vec<usize> {
    let cands = local_maxima(x);
    let mut keep = vec![true; cands.len()];
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| x[cands[b]].total_cmp(&x[cands[a]]).then(a.cmp(&b)));
    for &k in &order {
        if !keep[k] {
            continue;
        }
        let mut j = k;
        while j > 0 && cands[k] - cands[j - 1] < min_distance {
            j -= 1;
            keep[j] = false;
        }
        let mut j = k + 1;
        while j < cands.len() && cands[j] - cands[k] < min_distance {
            keep[j] = false;
            j += 1;
        }
    }
    let kept: Vec<usize> = cands
        .iter()
        .zip(&keep)
        .filter_map(|(&c, &k)| k.then_some(c))
        .collect();
    let prom = prominences(x, &kept);
    kept.into_iter()
        .zip(prom)
        .filter_map(|(p, pr)| (pr >= min_prominence && pr > 0.0).then_some(p))
        .collect()
}

/// Beat peaks with the default distance and prominence rules.
pub fn detect_beats(x: &[f64], fs_hz: f64) -> Vec<usize> {
    let distance = (MIN_PEAK_DISTANCE_S * fs_hz).round() as usize;
    let iqr = interquartile_range(x);
    find_peaks(x, distance.max(1), PROMINENCE_IQR_FACTOR * iqr)
}

/// Sub-sample peak location by parabolic interpolation.
fn refine(x: &[f64], p: usize) -> f64 {
    if p == 0 || p + 1 >= x.len() {
        return p as f64;
    }
    let (a, b, c) = (x[p - 1], x[p], x[p + 1]);
    let den = a - 2.0 * b + c;
    if den == 0.0 {
        return p as f64;
    }
    p as f64 + 0.5 * (a - c) / den
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Heart rate in bpm from the median inter-peak interval, or `None` when
/// fewer than two peaks are found.
pub fn estimate_hr(x: &[f64], fs_hz: f64) -> Option<f64> {
    let peaks = detect_beats(x, fs_hz);
    hr_from_peaks(x, &peaks, fs_hz)
}

pub(crate) fn hr_from_peaks(x: &[f64], peaks: &[usize], fs_hz: f64) -> Option<f64> {
    if peaks.len() < 2 {
        return None;
    }
    let times: Vec<f64> = peaks.iter().map(|&p| refine(x, p) / fs_hz).collect();
    let mut intervals: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let m = median(&mut intervals);
    (m > 0.0).then(|| 60.0 / m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_signal_has_no_rate() {
        assert_eq!(estimate_hr(&[1.0; 1000], 100.0), None);
        assert_eq!(estimate_hr(&[0.0; 1000], 100.0), None);
    }

    #[test]
    fn plateau_reports_middle() {
        let x = [0.0, 1.0, 2.0, 2.0, 2.0, 1.0, 0.0];
        assert_eq!(local_maxima(&x), vec![3]);
    }

    #[test]
    fn distance_keeps_taller_peak() {
        let mut x = vec![0.0; 100];
        x[20] = 1.0;
        x[25] = 2.0;
        x[60] = 1.5;
        assert_eq!(find_peaks(&x, 10, 0.1), vec![25, 60]);
    }

    #[test]
    fn prominence_measures_descent_to_higher_ground() {
        let x = [0.0, 3.0, 1.0, 2.0, 0.5, 4.0, 0.0];
        let p = prominences(&x, &[1, 3, 5]);
        assert_eq!(p, vec![2.5, 1.0, 4.0]);
    }

    #[test]
    fn sine_rate() {
        let fs = 100.0;
        let f = 1.3; // 78 bpm
        let x: Vec<f64> = (0..1000).map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / fs).sin()).collect();
        let hr = estimate_hr(&x, fs).unwrap();
        assert!((hr - 78.0).abs() < 0.5, "{hr}");
    }
}
