//! Intensity and Palm distributions of equivariant random measures.
//!
//! With a balancing kernel `h` (`h-(y) = 1` everywhere), the intensity of a
//! decoration `phi` is `E[sum_z h(o,z) phi(z)]` and the Palm law biases by
//! that quantity and moves the root to `z` with probability proportional to
//! `h(o,z) phi(z)`.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::ensemble::{class_weight_distance, Atom, RootedEnsemble};
use crate::error::{Error, Result};
use crate::models::Sampler;
use crate::report::{MtpReport, Verdict, EXACT_TOL};
use crate::seed::{derive, rng};
use crate::space::{FiniteRmmSpace, MeasureRef, MATRIX_TOL};
use crate::stats::{effective_sample_size, Estimate};
use crate::transport::{eval_out_in_wrt, mtp_check_exact_wrt, SquareMatrix, TransportFunction};

/// Normalized Palm law together with the intensity used to normalize it.
#[derive(Clone, Debug, Serialize)]
pub struct PalmResult {
    pub intensity: f64,
    pub palm: RootedEnsemble,
    pub h_used: String,
}

/// Evaluates `h` on `space` and asserts `h-(y) = sum_x h(x,y) mu(x) = 1` at every point.
pub fn checked_h(space: &FiniteRmmSpace, h: &dyn TransportFunction) -> Result<SquareMatrix> {
    let m = h.matrix(space)?;
    let mu = space.mu();
    for y in 0..space.n() {
        let minus = m.in_sum(y, mu);
        if !((minus - 1.0).abs() <= MATRIX_TOL) {
            return Err(Error::Normalization(format!("{}: h-({y}) = {minus}", h.name())));
        }
    }
    Ok(m)
}

/// Unnormalized Palm atoms `(w_i h(o,z) phi(z), space_i rooted at z)` and
/// their total mass (the intensity).
fn palm_atoms(e: &RootedEnsemble, phi: &MeasureRef, h: &dyn TransportFunction) -> Result<(f64, Vec<Atom>)> {
    let per_atom = e
        .atoms()
        .par_iter()
        .map(|a| {
            let hm = checked_h(&a.space, h)?;
            let ph = phi.values(&a.space)?;
            let o = a.space.root();
            Ok((0..a.space.n())
                .filter_map(|z| {
                    let w = a.weight * hm.get(o, z) * ph[z];
                    (w > 0.0).then(|| Atom { weight: w, space: a.space.rooted_at(z) })
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let atoms: Vec<Atom> = per_atom.into_iter().flatten().collect();
    let lambda = atoms.iter().map(|a| a.weight).sum();
    Ok((lambda, atoms))
}

/// `lambda_phi = E[sum_z h(o,z) phi(z)]`.
pub fn intensity(e: &RootedEnsemble, phi: &MeasureRef, h: &dyn TransportFunction) -> Result<f64> {
    let mut acc = 0.0;
    for a in e.atoms() {
        let hm = checked_h(&a.space, h)?;
        let ph = phi.values(&a.space)?;
        acc += a.weight * hm.out_sum(a.space.root(), ph);
    }
    Ok(acc)
}

fn normalized_palm(e: &RootedEnsemble, phi: &MeasureRef, h: &dyn TransportFunction) -> Result<(f64, RootedEnsemble)> {
    let (lambda, atoms) = palm_atoms(e, phi, h)?;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::PalmUndefined(lambda));
    }
    let atoms = atoms.into_iter().map(|a| (a.weight / lambda, a.space)).collect();
    Ok((lambda, RootedEnsemble::from_weighted(atoms)?))
}

/// Exact Palm law of `phi`, canonically merged.
pub fn palm_ensemble_exact(e: &RootedEnsemble, phi: &MeasureRef, h: &dyn TransportFunction) -> Result<PalmResult> {
    let (intensity, palm) = normalized_palm(e, phi, h)?;
    Ok(PalmResult { intensity, palm: palm.merged()?, h_used: h.name() })
}

/// Refined Campbell: `E[sum_y g(o,y) phi(y)] = lambda E_phi[sum_y g(y,o) mu(y)]`.
pub fn campbell_check(
    e: &RootedEnsemble,
    phi: &MeasureRef,
    g: &dyn TransportFunction,
    h: &dyn TransportFunction,
) -> Result<MtpReport> {
    let mut lhs = 0.0;
    for a in e.atoms() {
        lhs += a.weight * eval_out_in_wrt(&a.space, g, phi)?.0;
    }
    let (lambda, palm) = normalized_palm(e, phi, h)?;
    let mut rhs = 0.0;
    for a in palm.atoms() {
        rhs += a.weight * eval_out_in_wrt(&a.space, g, &MeasureRef::Base)?.1;
    }
    Ok(MtpReport::exact(format!("campbell[{phi},{}]", g.name()), lhs, lambda * rhs, EXACT_TOL))
}

/// Exchange formula:
/// `lambda_phi E_phi[sum_y g(o,y) psi(y)] = lambda_psi E_psi[sum_y g(y,o) phi(y)]`.
pub fn exchange_check(
    e: &RootedEnsemble,
    phi: &MeasureRef,
    psi: &MeasureRef,
    g: &dyn TransportFunction,
    h: &dyn TransportFunction,
) -> Result<MtpReport> {
    let (lphi, pphi) = normalized_palm(e, phi, h)?;
    let (lpsi, ppsi) = normalized_palm(e, psi, h)?;
    let mut lhs = 0.0;
    for a in pphi.atoms() {
        lhs += a.weight * eval_out_in_wrt(&a.space, g, psi)?.0;
    }
    let mut rhs = 0.0;
    for a in ppsi.atoms() {
        rhs += a.weight * eval_out_in_wrt(&a.space, g, phi)?.1;
    }
    Ok(MtpReport::exact(format!("exchange[{phi},{psi},{}]", g.name()), lphi * lhs, lpsi * rhs, EXACT_TOL))
}

/// MTP with integrals against `phi` under the Palm law of `phi`.
pub fn palm_mtp_check(
    e: &RootedEnsemble,
    phi: &MeasureRef,
    h: &dyn TransportFunction,
    g: &dyn TransportFunction,
) -> Result<MtpReport> {
    let (_, palm) = normalized_palm(e, phi, h)?;
    let mut r = mtp_check_exact_wrt(&palm, g, phi, EXACT_TOL)?;
    r.check = format!("palm_mtp[{phi},{}]", g.name());
    Ok(r)
}

/// Palm of `phi`, then Palm of the base measure with `phi` as the new base
/// measure. The round trip returns the original law conditioned on
/// `phi(X) > 0`, and `lambda * lambda'` equals the probability of that
/// event. The report compares the two products and fails as well when
/// canonical-class weights differ by more than `1e-9`.
pub fn palm_inversion_check(e: &RootedEnsemble, phi: &str, h: &dyn TransportFunction) -> Result<MtpReport> {
    let phi_ref = MeasureRef::Named(phi.to_string());
    let (lambda, p1) = normalized_palm(e, &phi_ref, h)?;
    let p1 = p1.merged()?;
    if let Some(a) = p1.atoms().iter().find(|a| a.space.measure(phi).map(|v| v.iter().all(|&x| x == 0.0)).unwrap_or(true)) {
        return Err(Error::InvalidParameter(format!(
            "`{phi}` vanishes on a Palm atom of weight {}; cannot use it as base measure",
            a.weight
        )));
    }
    let swapped = p1.try_map(|s| s.swap_measure(phi))?;
    let (lambda2, p2) = normalized_palm(&swapped, &phi_ref, h)?;
    let back = p2.merged()?.try_map(|s| s.swap_measure(phi))?;
    let mut charged = Vec::new();
    for a in e.atoms() {
        if a.space.measure(phi)?.iter().any(|&x| x > 0.0) {
            charged.push((a.weight, a.space.clone()));
        }
    }
    let p_charged: f64 = charged.iter().map(|a| a.0).sum();
    let conditioned = RootedEnsemble::from_weighted(charged)?;
    let dist = class_weight_distance(&back, &conditioned)?;
    let mut r = MtpReport::exact(format!("palm_inversion[{phi}]"), lambda * lambda2, p_charged, EXACT_TOL)
        .with_flag(format!("class_weight_distance={dist:e}"));
    if dist > EXACT_TOL {
        r.verdict = Verdict::Fail;
    }
    Ok(r)
}

/// Monte-Carlo Palm sample: each draw is re-rooted at `z` chosen with
/// probability proportional to `h(o,z) phi(z)` and carries the
/// self-normalized importance weight `h+_phi(o)`.
#[derive(Clone, Debug, Serialize)]
pub struct PalmSamples {
    pub samples: Vec<(f64, FiniteRmmSpace)>,
    pub intensity: Estimate,
    pub effective_sample_size: f64,
}

impl PalmSamples {
    /// Self-normalized estimate of `E_phi[f(o)]`.
    pub fn expectation<F>(&self, f: F) -> Estimate
    where
        F: Fn(&FiniteRmmSpace) -> f64,
    {
        let num: Vec<f64> = self.samples.iter().map(|(w, s)| w * f(s)).collect();
        let den: Vec<f64> = self.samples.iter().map(|(w, _)| *w).collect();
        Estimate::ratio(&num, &den)
    }
}

pub fn palm_samples_mc(
    sampler: &dyn Sampler,
    phi: &MeasureRef,
    h: &dyn TransportFunction,
    trials: u64,
    seed: u64,
) -> Result<PalmSamples> {
    let samples = (0..trials)
        .into_par_iter()
        .map(|i| {
            let s = sampler.draw(seed, i)?;
            let hm = checked_h(&s, h)?;
            let ph = phi.values(&s)?;
            let o = s.root();
            let w: Vec<f64> = (0..s.n()).map(|z| hm.get(o, z) * ph[z]).collect();
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return Ok((0.0, s));
            }
            let u = rng(derive(derive(seed, i), 0x9A1)).random::<f64>() * total;
            let mut acc = 0.0;
            let mut z = s.n() - 1;
            for (x, wx) in w.iter().enumerate() {
                acc += wx;
                if u < acc {
                    z = x;
                    break;
                }
            }
            Ok((total, s.rooted_at(z)))
        })
        .collect::<Result<Vec<_>>>()?;
    let weights: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let intensity = Estimate::from_samples(&weights);
    if intensity.mean <= 0.0 {
        return Err(Error::PalmUndefined(intensity.mean));
    }
    Ok(PalmSamples { effective_sample_size: effective_sample_size(&weights), samples, intensity })
}
