#![allow(dead_code)]

use stcr::transform::TransformId;
use stcr::VideoClip;

/// Clip whose entries are the distinct integers 0, 1, 2, ...
pub fn integer_clip(dims: [usize; 4]) -> VideoClip {
    VideoClip::from_fn(dims, |i| i as f64)
}

fn rotate_ccw(img: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (h, w) = (img.len(), img[0].len());
    (0..w).map(|i| (0..h).map(|j| img[j][w - 1 - i]).collect()).collect()
}

/// Reference action of an element, written frame by frame with nested vectors:
/// reverse time and/or each row, then turn the frame a quarter counter-clockwise
/// `rotation` times.
pub fn oracle_apply(clip: &VideoClip, t: TransformId) -> VideoClip {
    let (flip, rotation) = t.as_pair();
    let [c, tt, h, w] = clip.dims();
    let mut out = Vec::with_capacity(c * tt * h * w);
    for ch in 0..c {
        for ti in 0..tt {
            let src = if flip >= 2 { tt - 1 - ti } else { ti };
            let mut img: Vec<Vec<f64>> = (0..h).map(|y| (0..w).map(|x| clip.at(ch, src, y, x)).collect()).collect();
            if flip % 2 == 1 {
                img.iter_mut().for_each(|row| row.reverse());
            }
            for _ in 0..rotation {
                img = rotate_ccw(&img);
            }
            out.extend(img.into_iter().flatten());
        }
    }
    VideoClip::from_vec(clip.dims(), out).unwrap()
}

/// Composition table read off the oracle: `table[a][b]` is the element whose
/// action equals acting with `a` and then `b`.
pub fn oracle_table(probe: &VideoClip) -> [[usize; 16]; 16] {
    let images: Vec<VideoClip> = TransformId::all().iter().map(|&t| oracle_apply(probe, t)).collect();
    let mut table = [[usize::MAX; 16]; 16];
    for a in 0..16 {
        for b in 0..16 {
            let both = oracle_apply(&images[a], TransformId::from_index(b));
            let hits: Vec<usize> = (0..16).filter(|&c| images[c] == both).collect();
            assert_eq!(hits.len(), 1, "composition ({a}, {b}) is not a unique element");
            table[a][b] = hits[0];
        }
    }
    table
}

/// Kolmogorov–Smirnov distance between a sample and Uniform(0, 1).
pub fn ks_uniform(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
        .fold(0.0, f64::max)
}

/// Two-sample KS statistic and its asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (n, m) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < xs.len() && j < ys.len() {
        let v = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] <= v {
            i += 1;
        }
        while j < ys.len() && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    (d, kolmogorov_q(lambda))
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}
