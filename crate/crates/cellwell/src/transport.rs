//! Mass transport: electrolyte diffusion along the cell and solid diffusion
//! inside the representative particles.
//!
//! Electrolyte, finite volume over the macro mesh with zero flux ends:
//!
//!   eps_e dc/dt - d/dx(eps_e^p D_e dc/dx) = (1 - t_plus) / F * j
//!
//! Solid, finite volume over spherical shells for each electrode cell:
//!
//!   dc/dt = (D_s / r^2) d/dr(r^2 dc/dr),  -D_s dc/dr(R_s) = R_s j / (3 eps_s F)
//!
//! Both steps are backward Euler and reduce to tridiagonal solves. Face
//! diffusivities use harmonic means of the half cell resistances, which
//! keeps fluxes continuous across the region seams, and summing any
//! discrete equation set telescopes the fluxes away, so the mass ledgers in
//! the tests hold to round-off.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::solve_tridiagonal;
use crate::mesh::{MacroMesh, RadialMesh};
use crate::params::{CellParameters, Region};

/// Electrolyte concentration per macro cell, mol/m^3, plus the time it
/// belongs to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElectrolyteField {
    pub values: Vec<f64>,
    pub time: f64,
}

impl ElectrolyteField {
    pub fn uniform(value: f64, n: usize, time: f64) -> Self {
        ElectrolyteField {
            values: vec![value; n],
            time,
        }
    }
}

/// Radial concentration profiles, one per electrode macro cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolidProfiles {
    pub neg: Vec<Vec<f64>>,
    pub pos: Vec<Vec<f64>>,
}

impl SolidProfiles {
    pub fn uniform(mesh: &MacroMesh, n_r: usize, cs0_neg: f64, cs0_pos: f64) -> Self {
        SolidProfiles {
            neg: vec![vec![cs0_neg; n_r]; mesh.n_neg],
            pos: vec![vec![cs0_pos; n_r]; mesh.n_pos],
        }
    }

    pub fn profiles(&self, region: Region) -> Result<&Vec<Vec<f64>>> {
        match region {
            Region::Negative => Ok(&self.neg),
            Region::Positive => Ok(&self.pos),
            Region::Separator => Err(Error::Domain("no solid phase in the separator".into())),
        }
    }
}

/// Face transmissibility between two cells: the harmonic combination of the
/// two half cell resistances, so that flux = t * (c_right - c_left).
fn face_transmissibility(w_l: f64, beta_l: f64, w_r: f64, beta_r: f64) -> f64 {
    1.0 / (w_l / (2.0 * beta_l) + w_r / (2.0 * beta_r))
}

/// One backward Euler step of electrolyte diffusion with an arbitrary
/// volumetric source s, mol/(m^3 s), per cell:
///
///   eps_e (c' - c) / dt - div(eps_e^p D_e grad c') = s
///
/// Exposed separately from [`electrolyte_step`] so convergence studies can
/// drive the solver with manufactured sources.
pub fn electrolyte_step_with_source(
    ce: &ElectrolyteField,
    source: &[f64],
    dt: f64,
    params: &CellParameters,
    mesh: &MacroMesh,
) -> Result<ElectrolyteField> {
    let n = mesh.n_total();
    if ce.values.len() != n || source.len() != n {
        return Err(Error::Step(format!(
            "electrolyte field of {} and source of {} do not fit a mesh of {n} cells",
            ce.values.len(),
            source.len()
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::Step(format!("dt must be positive, got {dt}")));
    }

    let beta: Vec<f64> = (0..n)
        .map(|i| params.brug_factor(mesh.regions[i]) * params.d_e)
        .collect();
    let mut trans = vec![0.0; n + 1];
    for f in 1..n {
        trans[f] = face_transmissibility(
            mesh.widths[f - 1],
            beta[f - 1],
            mesh.widths[f],
            beta[f],
        );
    }

    let mut lower = vec![0.0; n - 1];
    let mut upper = vec![0.0; n - 1];
    let mut diag = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for i in 0..n {
        let storage = params.eps_e(mesh.regions[i]) * mesh.widths[i] / dt;
        diag[i] = storage + trans[i] + trans[i + 1];
        rhs[i] = storage * ce.values[i] + mesh.widths[i] * source[i];
        if i > 0 {
            lower[i - 1] = -trans[i];
        }
        if i + 1 < n {
            upper[i] = -trans[i + 1];
        }
    }
    let values = solve_tridiagonal(&lower, &diag, &upper, &rhs)?;
    Ok(ElectrolyteField {
        values,
        time: ce.time + dt,
    })
}

/// One backward Euler electrolyte step driven by the reaction current field
/// j (A/m^3 per cell): the source is (1 - t_plus) / F * j. Errors if the
/// step depletes any cell, since the charge problem needs ln(c_e).
pub fn electrolyte_step(
    ce: &ElectrolyteField,
    j_field: &[f64],
    dt: f64,
    params: &CellParameters,
    mesh: &MacroMesh,
) -> Result<ElectrolyteField> {
    for i in mesh.sep_range() {
        debug_assert!(
            j_field[i].abs() < 1e-30,
            "reaction current in the separator (cell {i})"
        );
    }
    let factor = (1.0 - params.t_plus) / params.faraday;
    let source: Vec<f64> = j_field.iter().map(|j| factor * j).collect();
    let next = electrolyte_step_with_source(ce, &source, dt, params, mesh)?;
    if let Some((i, &c)) = next
        .values
        .iter()
        .enumerate()
        .find(|(_, &c)| !(c > 0.0) || !c.is_finite())
    {
        return Err(Error::Domain(format!(
            "electrolyte depleted: c_e = {c} in cell {i} after the step to t = {}",
            next.time
        )));
    }
    Ok(next)
}

/// Total dissolved lithium, integral of eps_e * c_e over the cell, mol/m^2
/// of plate area.
pub fn electrolyte_mass(ce: &ElectrolyteField, params: &CellParameters, mesh: &MacroMesh) -> f64 {
    (0..mesh.n_total())
        .map(|i| params.eps_e(mesh.regions[i]) * mesh.widths[i] * ce.values[i])
        .sum()
}

/// One backward Euler step of radial diffusion in a single particle. The
/// local volumetric reaction current j (A/m^3) sets the surface flux
/// -D_s dc/dr(R_s) = R_s j / (3 eps_s F); positive j pulls lithium out.
pub fn solid_step(
    profile: &[f64],
    j_local: f64,
    dt: f64,
    region: Region,
    params: &CellParameters,
    rmesh: &RadialMesh,
) -> Result<Vec<f64>> {
    let n = rmesh.n_r();
    if profile.len() != n {
        return Err(Error::Step(format!(
            "radial profile of {} does not fit a mesh of {n} shells",
            profile.len()
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::Step(format!("dt must be positive, got {dt}")));
    }
    let d_s = params.d_s(region)?;
    let eps_s = params.eps_s(region)?;
    let r_s = rmesh.radius();
    let four_pi = 4.0 * std::f64::consts::PI;

    // Interior boundary conductances D_s * 4 pi r^2 / dr; both end
    // boundaries carry no conductance, the surface flux enters as data.
    let mut cond = vec![0.0; n + 1];
    for f in 1..n {
        let r = rmesh.boundaries[f];
        cond[f] = d_s * four_pi * r * r / rmesh.dr;
    }
    let surface_influx = -four_pi * r_s * r_s * r_s * j_local / (3.0 * eps_s * params.faraday);

    let mut lower = vec![0.0; n - 1];
    let mut upper = vec![0.0; n - 1];
    let mut diag = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for jdx in 0..n {
        let storage = rmesh.shell_volumes[jdx] / dt;
        diag[jdx] = storage + cond[jdx] + cond[jdx + 1];
        rhs[jdx] = storage * profile[jdx];
        if jdx > 0 {
            lower[jdx - 1] = -cond[jdx];
        }
        if jdx + 1 < n {
            upper[jdx] = -cond[jdx + 1];
        }
    }
    rhs[n - 1] += surface_influx;

    let next = solve_tridiagonal(&lower, &diag, &upper, &rhs)?;
    let cs_max = params.cs_max(region)?;
    let slack = 1e-9 * cs_max;
    if let Some((jdx, &c)) = next
        .iter()
        .enumerate()
        .find(|(_, &c)| !c.is_finite() || c < -slack || c > cs_max + slack)
    {
        return Err(Error::Domain(format!(
            "solid concentration {c} in shell {jdx} left [0, {cs_max}] ({region} electrode)"
        )));
    }
    Ok(next)
}

/// Concentration at the particle surface, linear extrapolation from the two
/// outermost shell centers. Exact for profiles linear in r.
pub fn surface_concentration(profile: &[f64], rmesh: &RadialMesh) -> f64 {
    let n = rmesh.n_r();
    let c1 = profile[n - 1];
    let c0 = profile[n - 2];
    let r1 = rmesh.centers[n - 1];
    let r0 = rmesh.centers[n - 2];
    c1 + (c1 - c0) * (rmesh.radius() - r1) / (r1 - r0)
}

/// Volume average concentration over the particle.
pub fn mean_concentration(profile: &[f64], rmesh: &RadialMesh) -> f64 {
    let total: f64 = rmesh
        .shell_volumes
        .iter()
        .zip(profile)
        .map(|(v, c)| v * c)
        .sum();
    total / rmesh.shell_volumes.iter().sum::<f64>()
}
