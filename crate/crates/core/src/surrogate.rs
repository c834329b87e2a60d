//! Gradient surrogates that carry gradients past the codec round trip.
//!
//! Every surrogate renders from the decoded values `P̂`; they differ only in
//! what flows back to the raw parameters `P`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tensor, Var};

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("unknown surrogate {0:?} (expected ste, mste or ste_spsa)")]
    UnknownKind(String),
    #[error("invalid surrogate parameter: {0}")]
    InvalidParameter(String),
    #[error("refresh step without an SPSA sensitivity")]
    MissingSensitivity,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, SurrogateError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    #[default]
    Ste,
    #[serde(rename = "mste")]
    MSte,
    SteSpsa,
}

impl FromStr for SurrogateKind {
    type Err = SurrogateError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ste" => Ok(Self::Ste),
            "mste" => Ok(Self::MSte),
            "ste_spsa" | "ste+spsa" | "spsa" => Ok(Self::SteSpsa),
            _ => Err(SurrogateError::UnknownKind(s.to_string())),
        }
    }
}

impl fmt::Display for SurrogateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ste => "ste",
            Self::MSte => "mste",
            Self::SteSpsa => "ste_spsa",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    pub kind: SurrogateKind,
    /// SPSA perturbation in canvas units.
    pub spsa_eps: f64,
    /// Rademacher draws averaged per refresh.
    pub spsa_draws: usize,
    /// Floor on the error standard deviation used by mSTE.
    pub var_guard: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            kind: SurrogateKind::Ste,
            spsa_eps: 2.0 / 255.0,
            spsa_draws: 1,
            var_guard: 1e-6,
        }
    }
}

impl SurrogateConfig {
    pub fn new(kind: SurrogateKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == SurrogateKind::SteSpsa && !(self.spsa_eps > 0.0 && self.spsa_eps.is_finite()) {
            return Err(SurrogateError::InvalidParameter(format!("spsa_eps = {}", self.spsa_eps)));
        }
        if self.spsa_draws == 0 {
            return Err(SurrogateError::InvalidParameter("spsa_draws = 0".into()));
        }
        if !(self.var_guard > 0.0) {
            return Err(SurrogateError::InvalidParameter(format!("var_guard = {}", self.var_guard)));
        }
        Ok(())
    }
}

fn check_shape(p: Var<'_>, p_hat: &Tensor, op: &'static str) -> Result<()> {
    if p.shape() != p_hat.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op,
            left: p.shape(),
            right: p_hat.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// `P̂ + (P − sg(P))`: decoded values forward, identity Jacobian backward.
pub fn ste_override<'t>(p: Var<'t>, p_hat: &Tensor) -> Result<Var<'t>> {
    check_shape(p, p_hat, "ste_override")?;
    let tape = p.tape();
    Ok(tape.constant(p_hat).add(p.sub(p.detach())?)?)
}

/// `P + sg(ε)·σ(ε)/sg(σ(ε))` with `ε = P̂ − P`, evaluated as
/// `P̂ + (P − sg(P)) + sg(ε)·(σ/sg(σ) − 1)` so the forward value is `P̂` exactly.
/// Below `var_guard` the deviation is held constant.
pub fn mste_override<'t>(p: Var<'t>, p_hat: &Tensor, var_guard: f64) -> Result<Var<'t>> {
    check_shape(p, p_hat, "mste_override")?;
    let tape = p.tape();
    let hat = tape.constant(p_hat);
    let base = hat.add(p.sub(p.detach())?)?;
    let err = hat.sub(p)?;
    let centered = err.sub(err.mean())?;
    let sigma = centered.square().mean().sqrt();
    let s = sigma.item();
    if !(s > var_guard) {
        return Ok(base);
    }
    // (σ − sg σ)/sg σ: zero in the forward pass without relying on σ·(1/σ) == 1
    let ratio_minus_one = sigma.add_scalar(-s).mul_scalar(1.0 / s);
    Ok(base.add(err.detach().mul(ratio_minus_one)?)?)
}

/// `P̂ + s ⊙ (P − sg(P))`: the backward pass scales the upstream gradient by
/// an elementwise sensitivity.
pub fn scaled_override<'t>(p: Var<'t>, p_hat: &Tensor, sensitivity: &Tensor) -> Result<Var<'t>> {
    check_shape(p, p_hat, "scaled_override")?;
    check_shape(p, sensitivity, "scaled_override")?;
    let tape = p.tape();
    let straight = p.sub(p.detach())?.mul(tape.constant(sensitivity))?;
    Ok(tape.constant(p_hat).add(straight)?)
}

/// Per-coordinate SPSA estimate for one perturbation `delta` (entries ±1):
/// `(C(y + εΔ) − C(y − εΔ)) / (2εΔ_i)`. Perturbed inputs are clipped to `[0, 1]`.
pub fn spsa_with_perturbation<E, F>(mut codec_map: F, y: &[f64], eps: f64, delta: &[f64]) -> std::result::Result<Vec<f64>, E>
where
    F: FnMut(&[f64]) -> std::result::Result<Vec<f64>, E>,
{
    assert_eq!(y.len(), delta.len(), "perturbation length");
    let shifted = |sign: f64| -> Vec<f64> {
        y.iter()
            .zip(delta)
            .map(|(&v, &d)| (v + sign * eps * d).clamp(0.0, 1.0))
            .collect()
    };
    let plus = codec_map(&shifted(1.0))?;
    let minus = codec_map(&shifted(-1.0))?;
    Ok(plus
        .iter()
        .zip(&minus)
        .zip(delta)
        .map(|((a, b), d)| (a - b) / (2.0 * eps * d))
        .collect())
}

/// Diagonal SPSA sensitivity of a black-box map, averaged over `draws`
/// Rademacher perturbations.
pub fn spsa_diag_jacobian<E, F, R>(mut codec_map: F, y: &[f64], eps: f64, draws: usize, rng: &mut R) -> std::result::Result<Vec<f64>, E>
where
    F: FnMut(&[f64]) -> std::result::Result<Vec<f64>, E>,
    R: Rng + ?Sized,
{
    let mut acc = vec![0.0; y.len()];
    for _ in 0..draws.max(1) {
        let delta: Vec<f64> = (0..y.len()).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        let g = spsa_with_perturbation(&mut codec_map, y, eps, &delta)?;
        for (a, v) in acc.iter_mut().zip(g) {
            *a += v;
        }
    }
    let n = draws.max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Per-step information the hybrid estimator needs.
#[derive(Debug, Clone, Copy, Default)]
pub struct SurrogateContext<'a> {
    pub refresh: bool,
    /// SPSA sensitivity in tensor space, present on refresh steps.
    pub sensitivity: Option<&'a Tensor>,
}

pub fn apply_surrogate<'t>(cfg: &SurrogateConfig, p: Var<'t>, p_hat: &Tensor, ctx: SurrogateContext<'_>) -> Result<Var<'t>> {
    match cfg.kind {
        SurrogateKind::Ste => ste_override(p, p_hat),
        SurrogateKind::MSte => mste_override(p, p_hat, cfg.var_guard),
        SurrogateKind::SteSpsa if !ctx.refresh => ste_override(p, p_hat),
        SurrogateKind::SteSpsa => {
            let s = ctx.sensitivity.ok_or(SurrogateError::MissingSensitivity)?;
            scaled_override(p, p_hat, s)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::convert::Infallible;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn ste_forward_is_decoded_and_backward_is_identity() {
        let p = t(&[0.3, -1.2, 2.5, 0.0]);
        let hat = t(&[0.25, -1.0, 2.75, 0.125]);
        let tape = Tape::new();
        let pv = tape.param(&p);
        let out = ste_override(pv, &hat).unwrap();
        assert_eq!(&*out.value(), hat.data());
        let g = tape.backward(out.sum()).unwrap();
        assert_eq!(g.get(pv).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn ste_with_exact_codec_is_transparent() {
        let p = t(&[0.5, 1.5, -2.0]);
        let tape = Tape::new();
        let pv = tape.param(&p);
        let out = ste_override(pv, &p).unwrap();
        assert_eq!(&*out.value(), p.data());
        let w = tape.constant(&t(&[2.0, -1.0, 3.0]));
        let g = tape.backward(out.mul(w).unwrap().sum()).unwrap();
        assert_eq!(g.get(pv).unwrap(), &[2.0, -1.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let tape = Tape::new();
        let pv = tape.param(&t(&[1.0, 2.0]));
        assert!(ste_override(pv, &t(&[1.0])).is_err());
        assert!(mste_override(pv, &t(&[1.0, 2.0, 3.0]), 1e-6).is_err());
    }

    #[test]
    fn mste_forward_is_decoded() {
        let p = t(&[0.3, -1.2, 2.5, 0.0]);
        let hat = t(&[0.25, -1.0, 2.75, 0.125]);
        let tape = Tape::new();
        let out = mste_override(tape.param(&p), &hat, 1e-6).unwrap();
        assert_eq!(&*out.value(), hat.data());
    }

    #[test]
    fn mste_constant_error_reduces_to_ste() {
        let p = t(&[0.5, 1.0, 1.5, 2.0]);
        let hat = t(&[0.75, 1.25, 1.75, 2.25]);
        let tape = Tape::new();
        let pv = tape.param(&p);
        let out = mste_override(pv, &hat, 1e-6).unwrap();
        let w = tape.constant(&t(&[1.0, -2.0, 0.5, 3.0]));
        let g = tape.backward(out.mul(w).unwrap().sum()).unwrap();
        assert_eq!(g.get(pv).unwrap(), &[1.0, -2.0, 0.5, 3.0]);
    }

    // The surrogate with its stop-gradient factors frozen at p0, as a plain
    // function of p: g(p) = p + e0 * sigma(hat - p) / sigma0.
    fn frozen_surrogate(p: &[f64], p0: &[f64], hat: &[f64]) -> Vec<f64> {
        fn sigma(e: &[f64]) -> f64 {
            let m = e.iter().sum::<f64>() / e.len() as f64;
            (e.iter().map(|x| (x - m).powi(2)).sum::<f64>() / e.len() as f64).sqrt()
        }
        let e0: Vec<f64> = hat.iter().zip(p0).map(|(h, x)| h - x).collect();
        let e: Vec<f64> = hat.iter().zip(p).map(|(h, x)| h - x).collect();
        let ratio = sigma(&e) / sigma(&e0);
        p.iter().zip(&e0).map(|(x, d)| x + d * ratio).collect()
    }

    #[test]
    fn mste_gradient_matches_central_differences_of_the_formula() {
        let p0 = [0.31, -0.7, 1.2, 0.05];
        let hat = [0.25, -0.5, 1.25, 0.0];
        let w = [1.0, -2.0, 0.5, 3.0];
        let tape = Tape::new();
        let pv = tape.param(&t(&p0));
        let out = mste_override(pv, &t(&hat), 1e-9).unwrap();
        let g = tape.backward(out.mul(tape.constant(&t(&w))).unwrap().sum()).unwrap();
        let got = g.get(pv).unwrap();
        let h = 1e-6;
        let loss = |p: &[f64]| frozen_surrogate(p, &p0, &hat).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let mut differs = false;
        for i in 0..4 {
            let (mut a, mut b) = (p0, p0);
            a[i] += h;
            b[i] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((fd - got[i]).abs() < 1e-5, "coord {i}: fd {fd} vs {}", got[i]);
            differs |= (got[i] - w[i]).abs() > 1e-3;
        }
        assert!(differs, "mSTE should differ from STE here");
    }

    #[test]
    fn spsa_identity_and_linear_maps() {
        let y = [0.2, 0.5, 0.7, 0.4];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let id = spsa_diag_jacobian(|v: &[f64]| Ok::<_, Infallible>(v.to_vec()), &y, 0.0625, 1, &mut rng).unwrap();
        assert_eq!(id, vec![1.0; 4]);
        let triple = spsa_diag_jacobian(
            |v: &[f64]| Ok::<_, Infallible>(v.iter().map(|x| 3.0 * x).collect()),
            &[0.25, 0.5, 0.75, 0.5],
            0.125,
            3,
            &mut rng,
        )
        .unwrap();
        assert_eq!(triple, vec![3.0; 4]);
    }

    #[test]
    fn spsa_quadratic_example() {
        let g = spsa_with_perturbation(
            |v: &[f64]| Ok::<_, Infallible>(v.iter().map(|x| x * x).collect()),
            &[0.5],
            0.125,
            &[1.0],
        )
        .unwrap();
        // ((0.625)^2 - (0.375)^2) / 0.25 = 2 * 0.5
        assert_eq!(g, vec![1.0]);
        let unclipped = ((1.1f64).powi(2) - (0.9f64).powi(2)) / 0.2;
        assert!((unclipped - 2.0).abs() < 1e-12);
    }

    #[test]
    fn apply_dispatches() {
        let p = t(&[0.3, -1.2, 2.5, 0.0]);
        let hat = t(&[0.25, -1.0, 2.75, 0.125]);
        let w = t(&[1.0, -2.0, 0.5, 3.0]);
        let grads = |cfg: SurrogateConfig, ctx: SurrogateContext<'_>| {
            let tape = Tape::new();
            let pv = tape.param(&p);
            let out = apply_surrogate(&cfg, pv, &hat, ctx).unwrap();
            assert_eq!(&*out.value(), hat.data());
            let g = tape.backward(out.mul(tape.constant(&w)).unwrap().sum()).unwrap();
            g.get(pv).unwrap().to_vec()
        };
        let ste = grads(SurrogateConfig::new(SurrogateKind::Ste), SurrogateContext::default());
        assert_eq!(ste, w.data());
        let spsa = SurrogateConfig::new(SurrogateKind::SteSpsa);
        assert_eq!(grads(spsa, SurrogateContext::default()), ste);
        let ones = Tensor::filled(vec![4], 1.0);
        let ctx = SurrogateContext {
            refresh: true,
            sensitivity: Some(&ones),
        };
        assert_eq!(grads(spsa, ctx), ste);
        let s = t(&[0.5, 2.0, 0.0, 1.0]);
        let ctx = SurrogateContext {
            refresh: true,
            sensitivity: Some(&s),
        };
        assert_eq!(grads(spsa, ctx), vec![0.5, -4.0, 0.0, 3.0]);
        let tape = Tape::new();
        let missing = apply_surrogate(&spsa, tape.param(&p), &hat, SurrogateContext { refresh: true, sensitivity: None });
        assert!(matches!(missing, Err(SurrogateError::MissingSensitivity)));
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("STE".parse::<SurrogateKind>().unwrap(), SurrogateKind::Ste);
        assert_eq!("mste".parse::<SurrogateKind>().unwrap(), SurrogateKind::MSte);
        assert_eq!("ste_spsa".parse::<SurrogateKind>().unwrap(), SurrogateKind::SteSpsa);
        assert!(matches!("annealed".parse::<SurrogateKind>(), Err(SurrogateError::UnknownKind(_))));
        for k in [SurrogateKind::Ste, SurrogateKind::MSte, SurrogateKind::SteSpsa] {
            assert_eq!(k.to_string().parse::<SurrogateKind>().unwrap(), k);
        }
        let mut bad = SurrogateConfig::new(SurrogateKind::SteSpsa);
        bad.spsa_eps = 0.0;
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn ste_gradient_equals_downstream_gradient(
            vals in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -2.0f64..2.0), 1..12)
        ) {
            let p = Tensor::from_vec(vals.iter().map(|v| v.0).collect());
            let hat = Tensor::from_vec(vals.iter().map(|v| v.1).collect());
            let w = Tensor::from_vec(vals.iter().map(|v| v.2).collect());
            let tape = Tape::new();
            let pv = tape.param(&p);
            let out = ste_override(pv, &hat).unwrap();
            // L(x) = sum(w * x^2); dL/dx at x = hat is 2 w hat
            let loss = out.square().mul(tape.constant(&w)).unwrap().sum();
            let g = tape.backward(loss).unwrap();
            for ((gi, wi), hi) in g.get(pv).unwrap().iter().zip(w.data()).zip(hat.data()) {
                prop_assert!((gi - 2.0 * wi * hi).abs() < 1e-12);
            }
        }

        #[test]
        fn surrogates_share_the_forward_pass(
            vals in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..12)
        ) {
            let p = Tensor::from_vec(vals.iter().map(|v| v.0).collect());
            let hat = Tensor::from_vec(vals.iter().map(|v| v.1).collect());
            let tape = Tape::new();
            let pv = tape.param(&p);
            let a = ste_override(pv, &hat).unwrap().to_tensor();
            let b = mste_override(pv, &hat, 1e-6).unwrap().to_tensor();
            let c = scaled_override(pv, &hat, &Tensor::filled(p.shape().to_vec(), 0.7)).unwrap().to_tensor();
            prop_assert_eq!(a.data(), hat.data());
            prop_assert_eq!(b.data(), hat.data());
            prop_assert_eq!(c.data(), hat.data());
        }

        #[test]
        fn spsa_exact_on_diagonal_affine_maps(
            coeffs in prop::collection::vec((0.2f64..0.8, -4i32..4, -4i32..4), 1..10),
            seed in 0u64..1000,
        ) {
            // dyadic slopes and offsets keep the arithmetic exact
            let y: Vec<f64> = coeffs.iter().map(|c| c.0).collect();
            let a: Vec<f64> = coeffs.iter().map(|c| c.1 as f64 / 4.0).collect();
            let b: Vec<f64> = coeffs.iter().map(|c| c.2 as f64 / 8.0).collect();
            let map = |v: &[f64]| Ok::<_, Infallible>(v.iter().zip(&a).zip(&b).map(|((x, a), b)| a * x + b).collect());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = spsa_diag_jacobian(map, &y, 0.125, 1, &mut rng).unwrap();
            for (gi, ai) in g.iter().zip(&a) {
                prop_assert!((gi - ai).abs() < 1e-12);
            }
        }
    }
}
