//! Least-squares BSS-eval decomposition of an estimate against reference stems.

use serde::{Deserialize, Serialize};

use super::{capped_ratio_db, check_lengths, dot, DB_CAP};
use crate::error::{Error, Result};
use crate::signal::Waveform;

/// Relative residual norm below which a reference is considered dependent on
/// the ones before it.
const RANK_TOL: f64 = 1e-10;

/// `estimate = s_target + e_interf + e_noise + e_artif`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BssDecomposition {
    pub s_target: Vec<f64>,
    pub e_interf: Vec<f64>,
    /// Always zero: no noise references exist in this setting.
    pub e_noise: Vec<f64>,
    pub e_artif: Vec<f64>,
}

/// Orthonormal basis of the reference span by modified Gram-Schmidt with one
/// reorthogonalization pass.
fn orthonormal_basis(refs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(refs.len());
    for (k, r) in refs.iter().enumerate() {
        let norm0 = dot(r, r).sqrt();
        let mut v = r.to_vec();
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&v, q);
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm0 == 0.0 || norm <= RANK_TOL * norm0 {
            return Err(Error::Degenerate(format!(
                "reference {k} is linearly dependent on the others"
            )));
        }
        v.iter_mut().for_each(|a| *a /= norm);
        basis.push(v);
    }
    Ok(basis)
}

pub fn bss_decompose(
    estimate: &Waveform,
    references: &[Waveform],
    target_index: usize,
) -> Result<BssDecomposition> {
    if target_index >= references.len() {
        return Err(Error::StreamCountMismatch {
            expected: target_index + 1,
            found: references.len(),
        });
    }
    for r in references {
        check_lengths(estimate.len(), r.len())?;
    }
    let e = estimate.samples();
    let refs: Vec<&[f64]> = references.iter().map(|r| r.samples()).collect();
    let basis = orthonormal_basis(&refs)?;

    let target = refs[target_index];
    let gain = dot(e, target) / dot(target, target);
    let s_target: Vec<f64> = target.iter().map(|r| gain * r).collect();

    let mut projection = vec![0.0; e.len()];
    for q in &basis {
        let c = dot(e, q);
        projection.iter_mut().zip(q).for_each(|(p, b)| *p += c * b);
    }
    let e_interf: Vec<f64> = projection.iter().zip(&s_target).map(|(p, s)| p - s).collect();
    let e_artif: Vec<f64> = e
        .iter()
        .zip(&s_target)
        .zip(&e_interf)
        .map(|((x, s), i)| x - s - i)
        .collect();
    Ok(BssDecomposition {
        e_noise: vec![0.0; e.len()],
        s_target,
        e_interf,
        e_artif,
    })
}

impl BssDecomposition {
    fn energy(v: &[f64]) -> f64 {
        dot(v, v)
    }

    fn target_is_zero(&self) -> bool {
        self.s_target.iter().all(|&v| v == 0.0)
    }

    /// `10 log10 ‖s_target‖² / ‖e_interf + e_noise + e_artif‖²`.
    pub fn sdr(&self) -> f64 {
        if self.target_is_zero() {
            return -DB_CAP;
        }
        let err: Vec<f64> = (0..self.s_target.len())
            .map(|i| self.e_interf[i] + self.e_noise[i] + self.e_artif[i])
            .collect();
        capped_ratio_db(Self::energy(&self.s_target), Self::energy(&err))
    }

    /// `10 log10 ‖s_target‖² / ‖e_interf‖²`.
    pub fn sir(&self) -> f64 {
        if self.target_is_zero() {
            return -DB_CAP;
        }
        capped_ratio_db(Self::energy(&self.s_target), Self::energy(&self.e_interf))
    }

    /// `10 log10 ‖s_target + e_interf + e_noise‖² / ‖e_artif‖²`.
    pub fn sar(&self) -> f64 {
        if self.target_is_zero() {
            return -DB_CAP;
        }
        let num: Vec<f64> = (0..self.s_target.len())
            .map(|i| self.s_target[i] + self.e_interf[i] + self.e_noise[i])
            .collect();
        capped_ratio_db(Self::energy(&num), Self::energy(&self.e_artif))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(v: Vec<f64>) -> Waveform {
        Waveform::new(v, 8000).unwrap()
    }

    #[test]
    fn identity_case_hits_caps() {
        let r1 = w((0..500).map(|i| (i as f64 * 0.1).sin()).collect());
        let r2 = w((0..500).map(|i| (i as f64 * 0.37).cos()).collect());
        let d = bss_decompose(&r1, &[r1.clone(), r2], 0).unwrap();
        assert_eq!(d.sdr(), DB_CAP);
        assert_eq!(d.sir(), DB_CAP);
        assert_eq!(d.sar(), DB_CAP);
    }

    #[test]
    fn equal_power_orthogonal_interference() {
        // cosine pair over whole periods: exactly orthogonal, equal power
        let n = 400;
        let r1: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * 4.0 * i as f64 / n as f64).sin()).collect();
        let r2: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * 4.0 * i as f64 / n as f64).cos()).collect();
        let est: Vec<f64> = r1.iter().zip(&r2).map(|(a, b)| a + b).collect();
        let d = bss_decompose(&w(est), &[w(r1), w(r2)], 0).unwrap();
        assert!(d.sir().abs() < 1e-9, "{}", d.sir());
        assert!(d.e_artif.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(d.sar(), DB_CAP);
    }

    #[test]
    fn zero_target_floor_and_rank_deficiency() {
        let r1 = w((0..100).map(|i| (i as f64).sin()).collect());
        let twice = r1.scaled(2.0);
        assert!(matches!(bss_decompose(&r1, &[r1.clone(), twice], 0), Err(Error::Degenerate(_))));
        let zero = Waveform::zeros(100, 8000).unwrap();
        let r2 = w((0..100).map(|i| (i as f64 * 0.3).cos()).collect());
        let d = bss_decompose(&zero, &[r1, r2], 0).unwrap();
        assert_eq!(d.sdr(), -DB_CAP);
    }
}
