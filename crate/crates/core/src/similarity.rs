//! Image similarity against a reference: Pearson correlation and binned mutual information.

use crate::error::{Error, Result};
use crate::volume::{Mask, Volume};

/// Default number of equal-width bins per image for [`mutual_information`].
pub const DEFAULT_BINS: usize = 32;

fn masked(x: &Volume, y: &Volume, mask: &Mask) -> Result<(Vec<f64>, Vec<f64>)> {
    x.grid().ensure_matches(y.grid(), "similarity inputs")?;
    x.grid().ensure_matches(mask.grid(), "similarity mask")?;
    let (xd, yd) = (x.volume_data(0), y.volume_data(0));
    Ok(mask.indices().map(|i| (xd[i], yd[i])).unzip())
}

/// Pearson correlation over the masked voxels.
pub fn cross_correlation(x: &Volume, y: &Volume, mask: &Mask) -> Result<f64> {
    let (a, b) = masked(x, y, mask)?;
    if a.len() < 2 {
        return Err(Error::DegenerateVariance(format!("{} masked voxels", a.len())));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (p, q) in a.iter().zip(&b) {
        let (da, db) = (p - ma, q - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::DegenerateVariance("constant image inside mask".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Equal-width bin index of every value over its own min-max range.
pub fn bin_indices(values: &[f64], bins: usize) -> Vec<usize> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = (max - min) / bins as f64;
    values
        .iter()
        .map(|v| {
            if width > 0.0 {
                (((v - min) / width) as usize).min(bins - 1)
            } else {
                0
            }
        })
        .collect()
}

/// Mutual information in nats from a joint histogram with `bins` bins per image.
pub fn mutual_information(x: &Volume, y: &Volume, mask: &Mask, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::InvalidSpec(format!("need at least 2 bins, got {bins}")));
    }
    let (a, b) = masked(x, y, mask)?;
    if a.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (ia, ib) = (bin_indices(&a, bins), bin_indices(&b, bins));
    let mut joint = vec![0usize; bins * bins];
    let (mut pa, mut pb) = (vec![0usize; bins], vec![0usize; bins]);
    for (i, j) in ia.iter().zip(&ib) {
        joint[i * bins + j] += 1;
        pa[*i] += 1;
        pb[*j] += 1;
    }
    let n = a.len() as f64;
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c == 0 {
                continue;
            }
            let pij = c as f64 / n;
            mi += pij * (pij / ((pa[i] as f64 / n) * (pb[j] as f64 / n))).ln();
        }
    }
    Ok(mi.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;
    use rand::{Rng, SeedableRng};

    fn vol(vals: &[f64]) -> Volume {
        Volume::new(Grid::new([vals.len(), 1, 1], [1.0; 3]).unwrap(), vals.to_vec()).unwrap()
    }

    fn full(v: &Volume) -> Mask {
        Mask::full(v.grid().clone())
    }

    #[test]
    fn correlation_examples() {
        let x = vol(&[1.0, 2.0, 3.0, 4.0]);
        let m = full(&x);
        assert!((cross_correlation(&x, &vol(&[1.0, 3.0, 2.0, 4.0]), &m).unwrap() - 0.8).abs() < 1e-12);
        let xs = [0.3, -1.2, 4.4, 2.0, 0.0, 7.5];
        let x = vol(&xs);
        let m = full(&x);
        let affine = vol(&xs.map(|v| 2.0 * v + 1.0));
        let neg = vol(&xs.map(|v| -v));
        assert!((cross_correlation(&x, &affine, &m).unwrap() - 1.0).abs() < 1e-12);
        assert!((cross_correlation(&x, &neg, &m).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(cross_correlation(&x, &vol(&[2.0; 6]), &m), Err(Error::DegenerateVariance(_))));
    }

    #[test]
    fn mi_two_equal_bins_is_ln2() {
        let x = vol(&[0.0, 0.0, 1.0, 1.0]);
        let mi = mutual_information(&x, &x, &full(&x), 2).unwrap();
        assert!((mi - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mi_constant_is_zero_and_symmetric() {
        let x = vol(&[5.0; 10]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let r: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
        let y = vol(&r);
        assert_eq!(mutual_information(&x, &y, &full(&x), 8).unwrap(), 0.0);
        let a: Vec<f64> = (0..500).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = a.iter().map(|v| v * v + 0.1 * rng.random::<f64>()).collect();
        let (a, b) = (vol(&a), vol(&b));
        let m = full(&a);
        let ab = mutual_information(&a, &b, &m, 32).unwrap();
        let ba = mutual_information(&b, &a, &m, 32).unwrap();
        assert!((ab - ba).abs() < 1e-12 && ab > 0.0);
    }

    #[test]
    fn mi_of_self_is_binned_entropy() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..1000).map(|_| rng.random::<f64>().powi(3)).collect();
        let v = vol(&a);
        let mi = mutual_information(&v, &v, &full(&v), 32).unwrap();
        // entropy of the binned marginal, binned independently here
        let (min, max) = a.iter().fold((f64::MAX, f64::MIN), |m, &x| (m.0.min(x), m.1.max(x)));
        let mut counts = [0usize; 32];
        for x in &a {
            counts[(((x - min) / (max - min) * 32.0) as usize).min(31)] += 1;
        }
        let h: f64 = counts.iter().filter(|&&c| c > 0).map(|&c| {
            let p = c as f64 / 1000.0;
            -p * p.ln()
        }).sum();
        assert!((mi - h).abs() < 1e-12, "{mi} {h}");
    }
}
