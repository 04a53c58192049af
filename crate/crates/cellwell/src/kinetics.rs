//! Interfacial reaction kinetics.
//!
//! The volumetric reaction current density in an electrode is
//!
//!   j = (3 eps_s / r_s) * i0 * (exp(alpha_a F eta / R T) - exp(-alpha_c F eta / R T))
//!
//! with the exchange current density
//!
//!   i0 = k * c_e^alpha_a * (c_max - c_s)^alpha_a * c_s^alpha_c
//!
//! and the overpotential eta = phi_s - phi_e - U(c_s / c_max, T). The open
//! circuit potential carries a linear temperature correction through dU/dT.
//! A linearized mode replaces the exponential difference by its tangent at
//! eta = 0, which is useful near equilibrium and gives a symmetric charge
//! problem.
//!
//! All concentration arguments are clamped before the fractional powers are
//! taken: tiny excursions past the physical range (round-off from the
//! transport step) are snapped back, larger ones are reported as domain
//! errors. Exact zeros are preserved so that a fully depleted or fully
//! saturated particle has i0 = 0 exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{CellParameters, Region};

/// Largest Butler-Volmer exponent argument before the evaluation is refused.
/// exp(500) is already far past f64 overflow; hitting this limit means the
/// iteration has left the physical regime.
pub const EXPONENT_LIMIT: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KineticsMode {
    #[default]
    ButlerVolmer,
    Linearized,
}

impl std::str::FromStr for KineticsMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "butler-volmer" => Ok(KineticsMode::ButlerVolmer),
            "linearized" => Ok(KineticsMode::Linearized),
            other => Err(format!(
                "unknown kinetics mode '{other}' (expected 'butler-volmer' or 'linearized')"
            )),
        }
    }
}

impl std::fmt::Display for KineticsMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KineticsMode::ButlerVolmer => write!(f, "butler-volmer"),
            KineticsMode::Linearized => write!(f, "linearized"),
        }
    }
}

/// Everything the kinetics need at one point of an electrode.
#[derive(Debug, Clone, Copy)]
pub struct LocalKineticState {
    pub region: Region,
    pub phi_s: f64,
    pub phi_e: f64,
    /// Solid concentration at the particle surface, mol/m^3.
    pub cs_surf: f64,
    /// Electrolyte concentration, mol/m^3.
    pub ce: f64,
    pub temperature: f64,
}

/// Snap a solid concentration back into [0, cs_max]. Excursions within
/// slack = 1e-9 * cs_max are treated as round-off; beyond that the state is
/// rejected. Values strictly inside the range but closer than slack to either
/// end are pulled to the slack boundary so the fractional powers in i0 stay
/// away from the singular corners, while exact 0 and exact cs_max pass
/// through untouched.
fn clamp_cs(cs: f64, cs_max: f64) -> Result<f64> {
    let slack = 1e-9 * cs_max;
    if !cs.is_finite() {
        return Err(Error::Domain(format!("non-finite solid concentration {cs}")));
    }
    if cs < -slack || cs > cs_max + slack {
        return Err(Error::Domain(format!(
            "solid concentration {cs} outside [0, {cs_max}] by more than round-off"
        )));
    }
    let clamped = if cs <= 0.0 {
        0.0
    } else if cs < slack {
        slack
    } else if cs >= cs_max {
        cs_max
    } else if cs > cs_max - slack {
        cs_max - slack
    } else {
        cs
    };
    if clamped != cs {
        log::debug!("clamped cs {cs} to {clamped} (cs_max = {cs_max})");
    }
    Ok(clamped)
}

/// Electrolyte concentrations must stay positive for both the kinetics and
/// the logarithmic drift term; a small absolute floor guards the powers.
fn clamp_ce(ce: f64) -> Result<f64> {
    if !ce.is_finite() || ce <= 0.0 {
        return Err(Error::Domain(format!(
            "electrolyte concentration {ce} is not positive"
        )));
    }
    if ce < 1e-9 {
        log::debug!("clamped ce {ce} to 1e-9");
        Ok(1e-9)
    } else {
        Ok(ce)
    }
}

/// U(y, T) = U_ref(y) + dU/dT(y) * (T - T_ref) at y = cs_surf / cs_max.
pub fn equilibrium_potential(state: &LocalKineticState, params: &CellParameters) -> Result<f64> {
    let curve = params.ocv(state.region)?;
    let y = state.cs_surf / params.cs_max(state.region)?;
    Ok(curve.u_at(y) + curve.dudt_at(y) * (state.temperature - params.t_ref))
}

/// dU/dT at the local stoichiometry, V/K. Feeds the reversible heat source.
pub fn entropy_coefficient(state: &LocalKineticState, params: &CellParameters) -> Result<f64> {
    let curve = params.ocv(state.region)?;
    let y = state.cs_surf / params.cs_max(state.region)?;
    Ok(curve.dudt_at(y))
}

/// i0 = k * c_e^alpha_a * (c_max - c_s)^alpha_a * c_s^alpha_c, A/m^2.
pub fn exchange_current_density(
    state: &LocalKineticState,
    params: &CellParameters,
) -> Result<f64> {
    let cs_max = params.cs_max(state.region)?;
    let k = params.k_rate(state.region)?;
    let cs = clamp_cs(state.cs_surf, cs_max)?;
    let ce = clamp_ce(state.ce)?;
    Ok(k * ce.powf(params.alpha_a) * (cs_max - cs).powf(params.alpha_a) * cs.powf(params.alpha_c))
}

/// eta = phi_s - phi_e - U(y, T).
pub fn overpotential(state: &LocalKineticState, params: &CellParameters) -> Result<f64> {
    Ok(state.phi_s - state.phi_e - equilibrium_potential(state, params)?)
}

/// The Butler-Volmer driving function E(eta) = exp(a eta) - exp(-c eta) and
/// its derivative, where a = alpha_a F / (R T) and c = alpha_c F / (R T) are
/// passed in already divided by R T. Refuses arguments that would overflow.
pub fn bv_driving(eta: f64, a_coef: f64, c_coef: f64) -> Result<(f64, f64)> {
    let xa = a_coef * eta;
    let xc = c_coef * eta;
    let worst = xa.abs().max(xc.abs());
    if !worst.is_finite() || worst > EXPONENT_LIMIT {
        return Err(Error::KineticOverflow {
            context: String::new(),
            exponent: worst,
        });
    }
    let ea = xa.exp();
    let ec = (-xc).exp();
    Ok((ea - ec, a_coef * ea + c_coef * ec))
}

/// Volumetric reaction current j, A/m^3, under the chosen kinetics mode.
/// Zero in the separator.
pub fn reaction_current(
    state: &LocalKineticState,
    mode: KineticsMode,
    params: &CellParameters,
) -> Result<f64> {
    Ok(reaction_current_with_derivative(state, mode, params)?.0)
}

/// Reaction current and its partial derivative with respect to the
/// overpotential, (j, dj/deta). The derivative is what Newton's method needs
/// because cs_surf and ce are frozen while the charge problem is solved.
pub fn reaction_current_with_derivative(
    state: &LocalKineticState,
    mode: KineticsMode,
    params: &CellParameters,
) -> Result<(f64, f64)> {
    if state.region == Region::Separator {
        return Ok((0.0, 0.0));
    }
    let i0 = exchange_current_density(state, params)?;
    let a_sp = params.specific_area(state.region)?;
    let eta = overpotential(state, params)?;
    let f_over_rt = params.faraday / (params.r_gas * state.temperature);
    let a_coef = params.alpha_a * f_over_rt;
    let c_coef = params.alpha_c * f_over_rt;
    match mode {
        KineticsMode::ButlerVolmer => {
            let (e, de) = bv_driving(eta, a_coef, c_coef)?;
            Ok((a_sp * i0 * e, a_sp * i0 * de))
        }
        KineticsMode::Linearized => {
            let slope = a_coef + c_coef;
            Ok((a_sp * i0 * slope * eta, a_sp * i0 * slope))
        }
    }
}
