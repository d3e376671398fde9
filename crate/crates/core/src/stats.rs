//! Rank statistics and local texture measures.

/// Ranks starting at 1, ties receiving the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "pearson needs equal lengths");
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Population variance of each 3×3 neighbourhood, edges replicated.
pub fn local_variance(pixels: &[f64], height: usize, width: usize) -> Vec<f64> {
    assert_eq!(pixels.len(), height * width);
    let mut out = vec![0.0; pixels.len()];
    for i in 0..height {
        for j in 0..width {
            let (mut s, mut s2) = (0.0, 0.0);
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let y = (i as i64 + di).clamp(0, height as i64 - 1) as usize;
                    let x = (j as i64 + dj).clamp(0, width as i64 - 1) as usize;
                    let v = pixels[y * width + x];
                    s += v;
                    s2 += v * v;
                }
            }
            let mean = s / 9.0;
            out[i * width + j] = (s2 / 9.0 - mean * mean).max(0.0);
        }
    }
    out
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn spearman_of_monotone_maps() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| v.powi(3)).collect();
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-15);
        let z: Vec<f64> = x.iter().map(|v| -v.exp()).collect();
        assert!((spearman(&x, &z).unwrap() + 1.0).abs() < 1e-15);
        assert!(spearman(&x, &[1.0; 5]).is_none());
    }

    #[test]
    fn spearman_textbook_value() {
        // Classic example: d² sum of 4 over n = 5 gives 1 - 6·4/120 = 0.8.
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [2.0, 1.0, 4.0, 3.0, 5.0];
        assert!((spearman(&x, &y).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn local_variance_of_flat_and_checker() {
        assert!(local_variance(&[7.0; 16], 4, 4).iter().all(|&v| v == 0.0));
        let checker: Vec<f64> = (0..16).map(|k| ((k / 4 + k % 4) % 2) as f64).collect();
        let v = local_variance(&checker, 4, 4);
        // Interior pixel of a checkerboard: 4 or 5 ones among 9.
        let centre = v[5];
        assert!((centre - (4.0 / 9.0 - 16.0 / 81.0)).abs() < 1e-12 || (centre - (5.0 / 9.0 - 25.0 / 81.0)).abs() < 1e-12);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
