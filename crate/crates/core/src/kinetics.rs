//! Reaction kinetics, coupling sources and diffusion tensors.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::mesh::Side;

/// Smallest inhibitor concentration accepted by the Gierer-Meinhardt terms.
pub const GM_INHIBITOR_FLOOR: f64 = 1e-12;

/// Gierer-Meinhardt rates `rho0..rho5`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GMParams {
    pub rho: [f64; 6],
}

impl GMParams {
    pub fn new(rho: [f64; 6]) -> Self {
        GMParams { rho }
    }
}

fn check_inhibitor(w2: f64) -> Result<()> {
    if !(w2 >= GM_INHIBITOR_FLOOR) {
        bail!(State, "inhibitor concentration {w2:e} is not positive");
    }
    Ok(())
}

pub fn gm_reaction(w: [f64; 2], p: &GMParams) -> Result<[f64; 2]> {
    check_inhibitor(w[1])?;
    let r = &p.rho;
    Ok([r[2] * (r[0] + r[1] * w[0] * w[0] / w[1]) - r[3] * w[0], r[4] * w[0] * w[0] - r[5] * w[1]])
}

/// Row-major 2x2 Jacobian of [`gm_reaction`].
pub fn gm_jacobian(w: [f64; 2], p: &GMParams) -> Result<[[f64; 2]; 2]> {
    check_inhibitor(w[1])?;
    let r = &p.rho;
    let q = w[0] / w[1];
    Ok([[2.0 * r[1] * r[2] * q - r[3], -r[1] * r[2] * q * q], [2.0 * r[4] * w[0], -r[5]]])
}

/// Spatially uniform equilibrium of the Gierer-Meinhardt system.
pub fn gm_steady_state(p: &GMParams) -> Result<[f64; 2]> {
    let r = &p.rho;
    if r[3] <= 0.0 || r[4] <= 0.0 || r[5] <= 0.0 {
        bail!(Argument, "steady state needs rho3, rho4, rho5 > 0 (got {:?})", r);
    }
    let w1 = r[2] / r[3] * (r[0] + r[1] * r[5] / r[4]);
    if w1 <= 0.0 {
        bail!(Argument, "steady activator level {w1} is not positive");
    }
    Ok([w1, r[4] / r[5] * w1 * w1])
}

/// Four-species skin kinetics rates `r0..r7`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skin4Params {
    pub r: [f64; 8],
}

pub fn skin4_reaction(w: [f64; 4], side: Side, p: &Skin4Params) -> [f64; 4] {
    let r = &p.r;
    match side {
        Side::D => [r[1] * w[0] * (r[0] - w[0]), 0.0, r[2] * w[0] - r[3] * w[2], -r[4] * w[0] * w[3]],
        Side::E => [0.0, 0.0, -r[5] * w[0] * w[2], r[6] * w[0] - r[7] * w[3]],
    }
}

pub fn skin4_jacobian(w: [f64; 4], side: Side, p: &Skin4Params) -> [[f64; 4]; 4] {
    let r = &p.r;
    match side {
        Side::D => [
            [r[1] * (r[0] - 2.0 * w[0]), 0.0, 0.0, 0.0],
            [0.0; 4],
            [r[2], 0.0, -r[3], 0.0],
            [-r[4] * w[3], 0.0, 0.0, -r[4] * w[0]],
        ],
        Side::E => [[0.0; 4], [0.0; 4], [-r[5] * w[2], 0.0, -r[5] * w[0], 0.0], [r[6], 0.0, 0.0, -r[7]]],
    }
}

/// Reaction model of one subdomain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum Kinetics {
    /// No reaction for `species` species.
    None {
        species: usize,
    },
    Gm(GMParams),
    Skin4(Skin4Params),
}

impl Kinetics {
    pub fn num_species(&self) -> usize {
        match self {
            Kinetics::None { species } => *species,
            Kinetics::Gm(_) => 2,
            Kinetics::Skin4(_) => 4,
        }
    }

    pub fn eval(&self, w: &[f64], side: Side, out: &mut [f64]) -> Result<()> {
        match self {
            Kinetics::None { .. } => out.fill(0.0),
            Kinetics::Gm(p) => out.copy_from_slice(&gm_reaction([w[0], w[1]], p)?),
            Kinetics::Skin4(p) => out.copy_from_slice(&skin4_reaction([w[0], w[1], w[2], w[3]], side, p)),
        }
        Ok(())
    }

    /// Row-major `m x m` Jacobian.
    pub fn jacobian(&self, w: &[f64], side: Side, out: &mut [f64]) -> Result<()> {
        match self {
            Kinetics::None { .. } => out.fill(0.0),
            Kinetics::Gm(p) => {
                let j = gm_jacobian([w[0], w[1]], p)?;
                out.copy_from_slice(&[j[0][0], j[0][1], j[1][0], j[1][1]]);
            }
            Kinetics::Skin4(p) => {
                let j = skin4_jacobian([w[0], w[1], w[2], w[3]], side, p);
                for (i, row) in j.iter().enumerate() {
                    out[4 * i..4 * i + 4].copy_from_slice(row);
                }
            }
        }
        Ok(())
    }
}

/// Species diffusion tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CrossDiffusion {
    /// Constant `m x m` matrix (row-major rows).
    Linear { matrix: Vec<Vec<f64>> },
    /// Diagonal `M_ii (1 + sum_k eta[i][k] w_k)`.
    Nonlinear { diag: Vec<f64>, eta: Vec<Vec<f64>> },
}

impl CrossDiffusion {
    pub fn diagonal(d: &[f64]) -> Self {
        let m = d.len();
        let matrix = (0..m).map(|i| (0..m).map(|j| if i == j { d[i] } else { 0.0 }).collect()).collect();
        CrossDiffusion::Linear { matrix }
    }

    pub fn num_species(&self) -> usize {
        match self {
            CrossDiffusion::Linear { matrix } => matrix.len(),
            CrossDiffusion::Nonlinear { diag, .. } => diag.len(),
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            CrossDiffusion::Linear { .. } => true,
            CrossDiffusion::Nonlinear { eta, .. } => eta.iter().flatten().all(|&e| e == 0.0),
        }
    }

    /// Shape and sign checks independent of the state.
    pub fn validate(&self) -> Result<()> {
        let m = self.num_species();
        if m == 0 {
            bail!(Config, "diffusion tensor is empty");
        }
        match self {
            CrossDiffusion::Linear { matrix } => {
                if matrix.iter().any(|r| r.len() != m) {
                    bail!(Config, "diffusion matrix must be {m}x{m}");
                }
                check_positive_definite(&matrix.iter().flatten().copied().collect::<Vec<_>>(), m)?;
            }
            CrossDiffusion::Nonlinear { diag, eta } => {
                if eta.len() != m || eta.iter().any(|r| r.len() != m) {
                    bail!(Config, "nonlinear slopes must be {m}x{m}");
                }
                if diag.iter().any(|&d| d <= 0.0) {
                    bail!(Config, "diagonal diffusivities must be positive");
                }
            }
        }
        Ok(())
    }

    /// Row-major `m x m` tensor at a state.
    pub fn eval_into(&self, w: &[f64], out: &mut [f64]) -> Result<()> {
        let m = self.num_species();
        match self {
            CrossDiffusion::Linear { matrix } => {
                for (i, row) in matrix.iter().enumerate() {
                    out[i * m..(i + 1) * m].copy_from_slice(row);
                }
            }
            CrossDiffusion::Nonlinear { diag, eta } => {
                out.fill(0.0);
                for i in 0..m {
                    let s: f64 = eta[i].iter().zip(w).map(|(e, x)| e * x).sum();
                    out[i * m + i] = diag[i] * (1.0 + s);
                }
                check_positive_definite(out, m)?;
            }
        }
        Ok(())
    }
}

pub fn crossdiff_eval(w: &[f64], cd: &CrossDiffusion) -> Result<Vec<f64>> {
    let m = cd.num_species();
    let mut out = vec![0.0; m * m];
    cd.eval_into(w, &mut out)?;
    if matches!(cd, CrossDiffusion::Linear { .. }) {
        check_positive_definite(&out, m)?;
    }
    Ok(out)
}

/// Positive definiteness of the symmetric part via Cholesky.
pub fn check_positive_definite(a: &[f64], m: usize) -> Result<()> {
    let mut l = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            let mut s = 0.5 * (a[i * m + j] + a[j * m + i]);
            for k in 0..j {
                s -= l[i * m + k] * l[j * m + k];
            }
            if i == j {
                if !(s > 0.0) {
                    bail!(Model, "diffusion tensor is not positive definite");
                }
                l[i * m + i] = s.sqrt();
            } else {
                l[i * m + j] = s / l[j * m + j];
            }
        }
    }
    Ok(())
}

/// Body force `c_f sum_i grad w_i` and dilation source `c_g div u (1, .., 1)`.
pub fn coupling_sources(grad_w: &[[f64; 2]], div_u: f64, c_f: f64, c_g: f64) -> ([f64; 2], Vec<f64>) {
    let mut f = [0.0; 2];
    for g in grad_w {
        f[0] += g[0];
        f[1] += g[1];
    }
    ([c_f * f[0], c_f * f[1]], vec![c_g * div_u; grad_w.len()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EX2: GMParams = GMParams { rho: [0.0, 1.0, 1.0, 0.35, 1.0, 1.0] };

    #[test]
    fn gm_steady_state_example_two() {
        let s = gm_steady_state(&EX2).unwrap();
        assert!((s[0] - 2.857142857).abs() < 1e-9);
        assert!((s[1] - 8.163265306).abs() < 1e-9);
        let r = gm_reaction(s, &EX2).unwrap();
        assert!(r[0].abs() < 1e-12 && r[1].abs() < 1e-12);
        let j = gm_jacobian(s, &EX2).unwrap();
        assert!((j[0][0] + j[1][1] + 0.65).abs() < 1e-9);
    }

    #[test]
    fn gm_special_states() {
        let p = GMParams::new([0.7, 1.3, 1.1, 0.4, 0.9, 1.7]);
        let r = gm_reaction([0.0, 1.0], &p).unwrap();
        assert!((r[0] - 1.1 * 0.7).abs() < 1e-15 && (r[1] + 1.7).abs() < 1e-15);
        let q = GMParams::new([0.7, 0.0, 1.1, 0.4, 0.9, 1.7]);
        let r = gm_reaction([1.0, 1.0], &q).unwrap();
        assert!((r[0] - (1.1 * 0.7 - 0.4)).abs() < 1e-15 && (r[1] - (0.9 - 1.7)).abs() < 1e-15);
        assert_eq!(gm_jacobian([2.0, 3.0], &q).unwrap()[0], [-0.4, 0.0]);
        let lin = GMParams::new([1.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert!((gm_steady_state(&lin).unwrap()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gm_guards() {
        assert!(matches!(gm_reaction([1.0, 0.0], &EX2), Err(crate::Error::State(_))));
        assert!(matches!(gm_jacobian([1.0, -1.0], &EX2), Err(crate::Error::State(_))));
        assert!(matches!(gm_steady_state(&GMParams::new([1.0; 6].map(|_| 0.0))), Err(crate::Error::Argument(_))));
    }

    fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, w: &[f64]) -> Vec<Vec<f64>> {
        let m = w.len();
        let mut out = vec![vec![0.0; m]; m];
        for k in 0..m {
            let h = 1e-6 * w[k].abs().max(1.0);
            let mut wp = w.to_vec();
            let mut wm = w.to_vec();
            wp[k] += h;
            wm[k] -= h;
            let (fp, fm) = (f(&wp), f(&wm));
            for i in 0..m {
                out[i][k] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        out
    }

    #[test]
    fn gm_jacobian_matches_finite_differences() {
        let w = [1.0, 2.0];
        let j = gm_jacobian(w, &EX2).unwrap();
        let fd = fd_jacobian(|x| gm_reaction([x[0], x[1]], &EX2).unwrap().to_vec(), &w);
        for i in 0..2 {
            for k in 0..2 {
                assert!((j[i][k] - fd[i][k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn skin4_behaviour() {
        let p = Skin4Params { r: [2.0, 0.5, 1.0, 0.3, 0.2, 0.7, 0.4, 0.9] };
        assert_eq!(skin4_reaction([0.0, 1.0, 1.0, 1.0], Side::D, &p)[0], 0.0);
        assert_eq!(skin4_reaction([2.0, 1.0, 1.0, 1.0], Side::D, &p)[0], 0.0);
        assert_eq!(skin4_reaction([0.0; 4], Side::E, &p), [0.0; 4]);
        for side in Side::BOTH {
            let w = [1.0; 4];
            let j = skin4_jacobian(w, side, &p);
            let fd = fd_jacobian(|x| skin4_reaction([x[0], x[1], x[2], x[3]], side, &p).to_vec(), &w);
            for i in 0..4 {
                for k in 0..4 {
                    assert!((j[i][k] - fd[i][k]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn crossdiff_cases() {
        let lin = CrossDiffusion::diagonal(&[1.0, 30.0]);
        assert_eq!(crossdiff_eval(&[0.3, 0.2], &lin).unwrap(), vec![1.0, 0.0, 0.0, 30.0]);
        let nl0 = CrossDiffusion::Nonlinear { diag: vec![1.0, 30.0], eta: vec![vec![0.0; 2]; 2] };
        assert_eq!(crossdiff_eval(&[5.0, 7.0], &nl0).unwrap(), vec![1.0, 0.0, 0.0, 30.0]);
        let nl = CrossDiffusion::Nonlinear { diag: vec![1.5, 30.0], eta: vec![vec![1.0, 0.0], vec![0.0, 0.0]] };
        assert_eq!(crossdiff_eval(&[1.0, 0.0], &nl).unwrap()[0], 3.0);
        let bad = CrossDiffusion::Nonlinear { diag: vec![1.0, 1.0], eta: vec![vec![-1.0, 0.0], vec![0.0, 0.0]] };
        assert!(matches!(crossdiff_eval(&[2.0, 0.0], &bad), Err(crate::Error::Model(_))));
    }

    #[test]
    fn crossdiff_sweep_box() {
        // the symmetric part of [[1, a], [b, 30]] is PD iff (a + b)^2 / 4 < 30
        for a in [0.0, 0.5, 1.0] {
            for b in [0.0, 5.0, 10.0, 15.0] {
                let cd = CrossDiffusion::Linear { matrix: vec![vec![1.0, a], vec![b, 30.0]] };
                let pd = (a + b) * (a + b) / 4.0 < 30.0;
                assert_eq!(crossdiff_eval(&[1.0, 1.0], &cd).is_ok(), pd, "a={a} b={b}");
            }
        }
    }

    #[test]
    fn coupling_source_formulas() {
        let (f, _) = coupling_sources(&[[1.0, 0.0], [-1.0, 0.0]], 0.0, 5.0, 1.0);
        assert_eq!(f, [0.0, 0.0]);
        let (_, s) = coupling_sources(&[[0.0; 2]; 2], 2.0, 0.0, 1.0);
        assert_eq!(s, vec![2.0, 2.0]);
    }

    #[test]
    fn kinetics_dispatch() {
        let k = Kinetics::Gm(EX2);
        assert_eq!(k.num_species(), 2);
        let mut out = [0.0; 2];
        k.eval(&[1.0, 2.0], Side::D, &mut out).unwrap();
        assert_eq!(out, gm_reaction([1.0, 2.0], &EX2).unwrap());
        let mut j = [0.0; 4];
        k.jacobian(&[1.0, 2.0], Side::E, &mut j).unwrap();
        let jj = gm_jacobian([1.0, 2.0], &EX2).unwrap();
        assert_eq!(j, [jj[0][0], jj[0][1], jj[1][0], jj[1][1]]);
    }

    proptest! {
        #[test]
        fn steady_state_is_fixed_point(r in proptest::array::uniform6(0.05f64..5.0), zero_rho0 in any::<bool>()) {
            let mut rho = r;
            if zero_rho0 { rho[0] = 0.0; }
            let p = GMParams::new(rho);
            let s = gm_steady_state(&p).unwrap();
            let g = gm_reaction(s, &p).unwrap();
            let scale = 1.0 + s[0].abs() + s[1].abs();
            prop_assert!(g[0].abs() < 1e-12 * scale * scale && g[1].abs() < 1e-12 * scale * scale * scale);
        }

        #[test]
        fn gm_jacobian_random_states(w1 in 0.1f64..5.0, w2 in 0.1f64..5.0, r in proptest::array::uniform6(0.0f64..2.0)) {
            let p = GMParams::new(r);
            let j = gm_jacobian([w1, w2], &p).unwrap();
            let fd = fd_jacobian(|x| gm_reaction([x[0], x[1]], &p).unwrap().to_vec(), &[w1, w2]);
            for i in 0..2 {
                for k in 0..2 {
                    let scale = j[i][k].abs().max(1.0);
                    prop_assert!((j[i][k] - fd[i][k]).abs() < 1e-5 * scale);
                }
            }
        }
    }
}
