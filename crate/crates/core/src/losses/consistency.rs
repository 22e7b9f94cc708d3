use serde::{Deserialize, Serialize};

use crate::detector::closed_set;
use crate::error::{param, Error, Result};
use crate::tensor::Tensor;

/// Floor applied to renormalised base marginals before taking logs.
pub const MARGINAL_FLOOR: f64 = 1e-12;

/// Divergence between the two heads' base-class marginals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConsistencyVariant {
    Kldiv,
    L1,
    Cos,
}

closed_set!(
    ConsistencyVariant, "consistency variant",
    "kldiv" => ConsistencyVariant::Kldiv,
    "l1" => ConsistencyVariant::L1,
    "cos" => ConsistencyVariant::Cos,
);

impl ConsistencyVariant {
    pub const ALL: [ConsistencyVariant; 3] = [Self::Kldiv, Self::L1, Self::Cos];

    /// Parses a variant name or `off`.
    pub fn parse_setting(s: &str) -> Result<Option<Self>> {
        match s {
            "off" => Ok(None),
            _ => s.parse().map(Some),
        }
    }

    pub fn setting_name(v: Option<Self>) -> String {
        v.map_or_else(|| "off".to_string(), |v| v.to_string())
    }
}

/// Serde adapter writing `Option<ConsistencyVariant>` as a variant name or
/// `"off"`.
pub mod setting_serde {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    use super::ConsistencyVariant;

    pub fn serialize<S: Serializer>(v: &Option<ConsistencyVariant>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&ConsistencyVariant::setting_name(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<ConsistencyVariant>, D::Error> {
        let s = String::deserialize(d)?;
        ConsistencyVariant::parse_setting(&s).map_err(D::Error::custom)
    }
}

fn renormalize(p: &[f64], base_cols: &[usize]) -> Result<(Vec<f64>, f64)> {
    let mass: f64 = base_cols.iter().map(|&c| p[c]).sum();
    if !(mass > 0.0) {
        return Err(Error::Numeric("row has no probability mass on base classes".into()));
    }
    Ok((base_cols.iter().map(|&c| p[c] / mass).collect(), mass))
}

/// Value of one ROI's term and its gradient with respect to the full novel
/// probability row `p_n` (zero outside `base_cols`).
pub fn consistency_row(
    p_n: &[f64],
    p_b: &[f64],
    base_cols: &[usize],
    variant: ConsistencyVariant,
) -> Result<(f64, Vec<f64>)> {
    let (a, mass) = renormalize(p_n, base_cols)?;
    let (b, _) = renormalize(p_b, base_cols)?;
    // value and gradient with respect to the renormalised row `a`
    let (value, ga): (f64, Vec<f64>) = match variant {
        ConsistencyVariant::Kldiv => {
            let la: Vec<f64> = a.iter().map(|v| v.max(MARGINAL_FLOOR).ln()).collect();
            let lb: Vec<f64> = b.iter().map(|v| v.max(MARGINAL_FLOOR).ln()).collect();
            let value = (0..a.len()).map(|i| a[i] * (la[i] - lb[i])).sum();
            let g = (0..a.len())
                .map(|i| la[i] - lb[i] + if a[i] > MARGINAL_FLOOR { 1.0 } else { 0.0 })
                .collect();
            (value, g)
        }
        ConsistencyVariant::L1 => {
            let value = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
            let g = a
                .iter()
                .zip(&b)
                .map(|(x, y)| if x > y { 1.0 } else if x < y { -1.0 } else { 0.0 })
                .collect();
            (value, g)
        }
        ConsistencyVariant::Cos => {
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let value = 1.0 - dot / (na * nb);
            let g = a
                .iter()
                .zip(&b)
                .map(|(x, y)| -(y / (na * nb) - dot * x / (na * na * na * nb)))
                .collect();
            (value, g)
        }
    };
    // chain through a_c = p_c / sum_{base} p
    let inner: f64 = a.iter().zip(&ga).map(|(x, g)| x * g).sum();
    let mut grad = vec![0.0; p_n.len()];
    for (k, &c) in base_cols.iter().enumerate() {
        grad[c] = (ga[k] - inner) / mass;
    }
    Ok((value, grad))
}

/// Mean over ROIs of the divergence between the renormalised base-class
/// marginals of `p_n` and `p_b` (background excluded).
pub fn consistency_loss(
    p_n: &Tensor,
    p_b: &Tensor,
    base_cols: &[usize],
    variant: ConsistencyVariant,
) -> Result<f64> {
    if p_n.shape() != p_b.shape() || p_n.shape().len() != 2 {
        return param(format!("probability tables differ: {:?} vs {:?}", p_n.shape(), p_b.shape()));
    }
    if base_cols.iter().any(|&c| c >= p_n.cols()) {
        return param("base column out of range");
    }
    let n = p_n.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for i in 0..n {
        acc += consistency_row(p_n.row(i), p_b.row(i), base_cols, variant)?.0;
    }
    Ok(acc / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::matrix(rows.len(), rows[0].len(), rows.concat()).unwrap()
    }

    #[test]
    fn equal_marginals_give_zero() {
        // same base ratios, different novel and background mass
        let pn = t(&[&[0.2, 0.4, 0.1, 0.3]]);
        let pb = t(&[&[0.1, 0.2, 0.0, 0.7]]);
        for v in ConsistencyVariant::ALL {
            assert!(consistency_loss(&pn, &pb, &[0, 1], v).unwrap().abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn kldiv_hand_value() {
        let pn = t(&[&[0.8, 0.2, 0.0]]);
        let pb = t(&[&[0.5, 0.5, 0.0]]);
        let expect = 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln();
        let got = consistency_loss(&pn, &pb, &[0, 1], ConsistencyVariant::Kldiv).unwrap();
        assert!((got - expect).abs() < 1e-15);
        let l1 = consistency_loss(&pn, &pb, &[0, 1], ConsistencyVariant::L1).unwrap();
        assert!((l1 - 0.6).abs() < 1e-15);
    }

    #[test]
    fn mean_over_rows_and_errors() {
        let pn = t(&[&[0.8, 0.2, 0.0], &[0.5, 0.5, 0.0]]);
        let pb = t(&[&[0.5, 0.5, 0.0], &[0.5, 0.5, 0.0]]);
        let one = 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln();
        let got = consistency_loss(&pn, &pb, &[0, 1], ConsistencyVariant::Kldiv).unwrap();
        assert!((got - one / 2.0).abs() < 1e-15);
        let dead = t(&[&[0.0, 0.0, 1.0]]);
        assert!(matches!(
            consistency_loss(&dead, &dead, &[0, 1], ConsistencyVariant::Kldiv),
            Err(Error::Numeric(_))
        ));
        assert!(consistency_loss(&dead, &pn, &[0, 1], ConsistencyVariant::Kldiv).is_err());
    }

    #[test]
    fn row_gradient_matches_central_differences() {
        let pn = [0.3, 0.25, 0.15, 0.2, 0.1];
        let pb = [0.1, 0.4, 0.2, 0.05, 0.25];
        let cols = [0, 1, 2];
        for v in ConsistencyVariant::ALL {
            let (_, g) = consistency_row(&pn, &pb, &cols, v).unwrap();
            for j in 0..pn.len() {
                let mut hi = pn;
                let mut lo = pn;
                hi[j] += 1e-6;
                lo[j] -= 1e-6;
                let fd = (consistency_row(&hi, &pb, &cols, v).unwrap().0
                    - consistency_row(&lo, &pb, &cols, v).unwrap().0)
                    / 2e-6;
                assert!((fd - g[j]).abs() < 1e-7, "{v} coord {j}: {fd} vs {}", g[j]);
            }
        }
    }
}
