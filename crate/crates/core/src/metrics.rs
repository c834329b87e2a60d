//! PSNR, Bjøntegaard delta rate, and the decoder-side payload estimate.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid rate-distortion curve: {0}")]
    Curve(String),
    #[error("quality ranges do not overlap: [{0}, {1}] vs [{2}, {3}]")]
    NoOverlap(f64, f64, f64, f64),
    #[error("empty tensor")]
    Empty,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub const PSNR_CAP: f64 = 99.0;

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP)
}

/// PSNR with peak 1, capped at 99 dB.
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RDPoint {
    pub bitrate: f64,
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RDCurve {
    points: Vec<RDPoint>,
}

impl RDCurve {
    /// Sorts by bitrate; needs at least four points with distinct positive
    /// rates and finite qualities.
    pub fn new(mut points: Vec<RDPoint>) -> Result<Self> {
        if points.len() < 4 {
            return Err(MetricsError::Curve(format!("{} points, need at least 4", points.len())));
        }
        if let Some(p) = points.iter().find(|p| !(p.bitrate > 0.0 && p.bitrate.is_finite() && p.quality.is_finite())) {
            return Err(MetricsError::Curve(format!("bad point {p:?}")));
        }
        points.sort_by(|a, b| a.bitrate.total_cmp(&b.bitrate));
        if points.windows(2).any(|w| w[0].bitrate == w[1].bitrate) {
            return Err(MetricsError::Curve("duplicate bitrate".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[RDPoint] {
        &self.points
    }

    fn quality_range(&self) -> (f64, f64) {
        self.points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.quality), hi.max(p.quality)))
    }
}

/// Least-squares cubic through `(x, y)`; coefficients lowest order first.
fn fit_cubic(x: &[f64], y: &[f64]) -> Result<[f64; 4]> {
    let mut ata = [[0.0; 4]; 4];
    let mut aty = [0.0; 4];
    for (&xi, &yi) in x.iter().zip(y) {
        let pows = [1.0, xi, xi * xi, xi * xi * xi];
        for r in 0..4 {
            aty[r] += pows[r] * yi;
            for c in 0..4 {
                ata[r][c] += pows[r] * pows[c];
            }
        }
    }
    // Gaussian elimination with partial pivoting
    for col in 0..4 {
        let piv = (col..4)
            .max_by(|&a, &b| ata[a][col].abs().total_cmp(&ata[b][col].abs()))
            .expect("nonempty");
        if ata[piv][col].abs() < 1e-12 {
            return Err(MetricsError::Curve("degenerate quality values for a cubic fit".into()));
        }
        ata.swap(col, piv);
        aty.swap(col, piv);
        for r in col + 1..4 {
            let f = ata[r][col] / ata[col][col];
            for c in col..4 {
                ata[r][c] -= f * ata[col][c];
            }
            aty[r] -= f * aty[col];
        }
    }
    let mut coef = [0.0; 4];
    for r in (0..4).rev() {
        let s: f64 = (r + 1..4).map(|c| ata[r][c] * coef[c]).sum();
        coef[r] = (aty[r] - s) / ata[r][r];
    }
    Ok(coef)
}

fn integral(coef: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let anti = |x: f64| coef[0] * x + coef[1] * x * x / 2.0 + coef[2] * x.powi(3) / 3.0 + coef[3] * x.powi(4) / 4.0;
    anti(hi) - anti(lo)
}

/// Average rate difference of `test` against `anchor` at equal quality, in
/// percent. Each curve's log rate is fit as a cubic in quality; the gap is
/// averaged over the overlapping quality interval.
pub fn bd_rate(anchor: &RDCurve, test: &RDCurve) -> Result<f64> {
    let (alo, ahi) = anchor.quality_range();
    let (tlo, thi) = test.quality_range();
    let (lo, hi) = (alo.max(tlo), ahi.min(thi));
    if !(hi > lo) {
        return Err(MetricsError::NoOverlap(alo, ahi, tlo, thi));
    }
    // fit in a normalized quality coordinate shared by both curves
    let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
    let fit = |c: &RDCurve| {
        let x: Vec<f64> = c.points.iter().map(|p| (p.quality - mid) / half).collect();
        let y: Vec<f64> = c.points.iter().map(|p| p.bitrate.ln()).collect();
        fit_cubic(&x, &y)
    };
    let (pa, pt) = (fit(anchor)?, fit(test)?);
    let gap = (integral(&pt, -1.0, 1.0) - integral(&pa, -1.0, 1.0)) / 2.0;
    Ok((gap.exp() - 1.0) * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayloadEntry {
    pub tensor: String,
    pub n: usize,
    pub d: usize,
    pub h_bits: f64,
    pub header_bits: u64,
    pub total_bits: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PayloadReport {
    pub entries: Vec<PayloadEntry>,
}

impl PayloadReport {
    pub fn push(&mut self, entry: PayloadEntry) {
        self.entries.push(entry);
    }

    pub fn total_bits(&self) -> f64 {
        self.entries.iter().map(|e| e.total_bits).sum()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for e in &self.entries {
            out.serialize(e)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub const PAYLOAD_Q_BITS: u32 = 8;

/// Header bits of one tensor: min and max as float32, the bit depth byte,
/// and one int32 per dimension.
pub fn payload_header_bits(d: usize) -> u64 {
    2 * 32 + 8 + 32 * d as u64
}

/// Shannon-bound cost of a tensor after uniform `q_bits` quantization.
pub fn payload_estimate(name: &str, values: &[f64], shape: &[usize], q_bits: u32) -> Result<PayloadEntry> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    let levels = 1usize << q_bits;
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let scale = (hi - lo) / (levels - 1) as f64;
    let mut hist = vec![0usize; levels];
    for &v in values {
        let q = if scale > 0.0 {
            ((v - lo) / scale).round().clamp(0.0, (levels - 1) as f64) as usize
        } else {
            0
        };
        hist[q] += 1;
    }
    let n = values.len();
    let entropy: f64 = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            p * (1.0 / p).log2()
        })
        .sum();
    let h_bits = n as f64 * entropy;
    let header_bits = payload_header_bits(shape.len());
    Ok(PayloadEntry {
        tensor: name.to_string(),
        n,
        d: shape.len(),
        h_bits,
        header_bits,
        total_bits: h_bits + header_bits as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn curve(points: &[(f64, f64)]) -> RDCurve {
        RDCurve::new(points.iter().map(|&(bitrate, quality)| RDPoint { bitrate, quality }).collect()).unwrap()
    }

    const ANCHOR: [(f64, f64); 5] = [(1000.0, 28.0), (1800.0, 30.5), (3500.0, 33.1), (7000.0, 35.4), (15000.0, 37.0)];

    fn scaled(k: f64) -> RDCurve {
        curve(&ANCHOR.map(|(r, q)| (r * k, q)))
    }

    #[test]
    fn psnr_examples() {
        let a = [0.2, 0.4, 0.6];
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!((psnr_from_mse(1e-4) - 40.0).abs() < 1e-12);
        assert!(psnr(&a, &b[..2]).is_err());
    }

    #[test]
    fn payload_fixtures() {
        let c = payload_estimate("c", &[0.7; 12], &[3, 4], 8).unwrap();
        assert_eq!(c.h_bits, 0.0);
        assert_eq!(c.total_bits, 136.0);
        let u: Vec<f64> = (0..256).map(|i| i as f64).collect();
        let e = payload_estimate("u", &u, &[256], 8).unwrap();
        assert_eq!(e.h_bits, 2048.0);
        assert_eq!(e.total_bits, 2048.0 + 104.0);
        let t = payload_estimate("t", &[-1.0, 3.0, 3.0, -1.0], &[4], 8).unwrap();
        assert_eq!(t.h_bits, 4.0);
        assert_eq!(t.total_bits, 4.0 + 104.0);
    }

    #[test]
    fn payload_csv() {
        let mut r = PayloadReport::default();
        r.push(payload_estimate("a", &[0.0, 1.0], &[2], 8).unwrap());
        r.push(payload_estimate("b", &[5.0; 4], &[2, 2], 8).unwrap());
        assert_eq!(r.total_bits(), 2.0 + 104.0 + 136.0);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "tensor,n,d,h_bits,header_bits,total_bits");
        assert_eq!(text.lines().nth(2).unwrap(), "b,4,2,0.0,136,136.0");
    }

    #[test]
    fn bd_rate_closed_forms() {
        let a = scaled(1.0);
        assert!(bd_rate(&a, &a).unwrap().abs() < 1e-12);
        assert!((bd_rate(&a, &scaled(2.0)).unwrap() - 100.0).abs() < 1e-6);
        assert!((bd_rate(&a, &scaled(0.5)).unwrap() + 50.0).abs() < 1e-6);
    }

    #[test]
    fn bd_rate_requires_overlap_and_four_points() {
        let a = scaled(1.0);
        let far = curve(&ANCHOR.map(|(r, q)| (r, q + 20.0)));
        assert!(matches!(bd_rate(&a, &far), Err(MetricsError::NoOverlap(..))));
        assert!(RDCurve::new(vec![RDPoint { bitrate: 1.0, quality: 1.0 }; 3]).is_err());
        assert!(RDCurve::new(
            [(1.0, 1.0), (1.0, 2.0), (2.0, 3.0), (3.0, 4.0)]
                .map(|(bitrate, quality)| RDPoint { bitrate, quality })
                .to_vec()
        )
        .is_err());
    }

    #[test]
    fn fit_recovers_exact_cubic() {
        let x = [-1.0, -0.5, 0.1, 0.4, 1.0, 0.8];
        let y: Vec<f64> = x.iter().map(|v| 1.0 - 2.0 * v + 0.5 * v * v + 3.0 * v * v * v).collect();
        let c = fit_cubic(&x, &y).unwrap();
        for (got, want) in c.iter().zip([1.0, -2.0, 0.5, 3.0]) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn bd_rate_antisymmetry(k in 0.2f64..5.0, dq in -0.5f64..0.5) {
            let a = scaled(1.0);
            let b = curve(&ANCHOR.map(|(r, q)| (r * k, q + dq)));
            let ab = bd_rate(&a, &b).unwrap();
            let ba = bd_rate(&b, &a).unwrap();
            prop_assert!(((1.0 + ab / 100.0) * (1.0 + ba / 100.0) - 1.0).abs() < 1e-9);
        }

        #[test]
        fn entropy_bounds(values in prop::collection::vec(-10.0f64..10.0, 1..300)) {
            let e = payload_estimate("x", &values, &[values.len()], 8).unwrap();
            prop_assert!(e.h_bits >= 0.0);
            prop_assert!(e.h_bits <= values.len() as f64 * 8.0 + 1e-9);
        }

        #[test]
        fn psnr_monotone(a in 1e-8f64..1.0, b in 1e-8f64..1.0) {
            prop_assume!(a < b);
            prop_assert!(psnr_from_mse(a) > psnr_from_mse(b) || psnr_from_mse(a) == PSNR_CAP);
        }
    }
}
