use crate::error::{Error, Result};

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(u: &[f64], v: &[f64]) -> Option<f64> {
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let (mut suv, mut suu, mut svv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        suv += (a - mu) * (b - mv);
        suu += (a - mu).powi(2);
        svv += (b - mv).powi(2);
    }
    (suu > 0.0 && svv > 0.0).then(|| (suv / (suu * svv).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::input(format!("spearman needs equal lengths, got {} and {}", u.len(), v.len())));
    }
    if u.len() < 2 {
        return Err(Error::input("spearman needs at least two points"));
    }
    if u.iter().chain(v).any(|x| !x.is_finite()) {
        return Err(Error::input("spearman inputs must be finite"));
    }
    pearson(&average_ranks(u), &average_ranks(v))
        .ok_or_else(|| Error::numeric("rank correlation is undefined for a constant vector"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap() + 0.5).abs() < 1e-15);
        assert!(matches!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::Numeric(_))));
        assert!(matches!(spearman(&[1.0], &[1.0]), Err(Error::Input(_))));
        assert!(matches!(spearman(&[1.0, 2.0], &[1.0]), Err(Error::Input(_))));
    }

    #[test]
    fn ties_share_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    proptest! {
        #[test]
        fn invariant_under_monotone_maps(
            pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..40),
        ) {
            let (u, v): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            if let Ok(r) = spearman(&u, &v) {
                let cubed: Vec<f64> = u.iter().map(|x| x.powi(3) + 2.0 * x).collect();
                let expv: Vec<f64> = v.iter().map(|x| (x / 50.0).exp()).collect();
                let r2 = spearman(&cubed, &expv).unwrap();
                prop_assert!((r - r2).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }
    }
}
