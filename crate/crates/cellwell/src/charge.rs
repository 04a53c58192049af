//! The coupled conservation-of-charge problem for the potential pair
//! (phi_e, phi_s) at one instant, with the transport state frozen.
//!
//! Electrolyte, over the whole cell, with zero ionic current at both ends:
//!
//!   -d/dx(eps_e^p kappa phi_e') + nu d/dx(eps_e^p kappa (ln c_e)') = j,
//!   nu = (1 - 2 t_plus) R T / F
//!
//! Solid, per electrode, with the applied current entering at the
//! collectors and no electronic current across the separator seams:
//!
//!   -eps_s sigma phi_s'' = -j,
//!   eps_s sigma phi_s'(0) = eps_s sigma phi_s'(L) = -I/A,  phi_s' = 0 at the seams
//!
//! After scaling, the reaction couples the two fields through
//! j = k b E(phi_s - phi_e - f), where b collects the concentration factors
//! of the exchange current, f is the local open circuit potential, and E is
//! the Butler-Volmer driving function (or its tangent in linearized mode).
//!
//! Summing the discrete solid equations over one electrode telescopes the
//! internal fluxes away and leaves the boundary data, which is how the
//! compatibility condition k_- d_- / q_- = k_+ d_+ / q_+ shows up at the
//! discrete level: it holds exactly in Correct mode and fails by 2|I|/A
//! under either of the sign conventions this module can audit. Both fields
//! are determined only up to one shared additive constant, fixed by pinning
//! phi_s at one reference cell.
//!
//! Unknowns are interleaved (u, v per electrode cell, u alone in the
//! separator) so the Jacobian is banded with two off-diagonals on each side
//! regardless of mesh size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::{self, KineticsMode, LocalKineticState};
use crate::linalg::BandMatrix;
use crate::mesh::{MacroMesh, Meshes};
use crate::params::{CellParameters, Region};
use crate::simulate::CellState;
use crate::transport::surface_concentration;

/// Which encoding of the collector boundary data to audit. The two wrong
/// modes flip the sign of the boundary derivative at one collector, the way
/// two published variants of the model state it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BcMode {
    Correct,
    /// Sign of the x = L collector datum flipped.
    WrongSmith,
    /// Sign of the x = 0 collector datum flipped.
    WrongGomadam,
}

impl std::str::FromStr for BcMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "correct" => Ok(BcMode::Correct),
            "wrong-smith" => Ok(BcMode::WrongSmith),
            "wrong-gomadam" => Ok(BcMode::WrongGomadam),
            other => Err(format!(
                "unknown bc mode '{other}' (expected 'correct', 'wrong-smith' or 'wrong-gomadam')"
            )),
        }
    }
}

impl std::fmt::Display for BcMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BcMode::Correct => write!(f, "correct"),
            BcMode::WrongSmith => write!(f, "wrong-smith"),
            BcMode::WrongGomadam => write!(f, "wrong-gomadam"),
        }
    }
}

/// Pin phi_s to `value` at the electrode cell center nearest `x`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Gauge {
    pub x: f64,
    pub value: f64,
}

impl Default for Gauge {
    fn default() -> Self {
        Gauge { x: 0.0, value: 0.0 }
    }
}

/// One assembled instance of the charge problem: geometry, face
/// coefficients, frozen concentration data, boundary data and gauge.
#[derive(Debug, Clone)]
pub struct ChargeProblem {
    pub n_neg: usize,
    pub n_sep: usize,
    pub n_pos: usize,
    pub widths: Vec<f64>,
    /// Center to center spacing per face, zero at the two outer faces.
    pub center_dx: Vec<f64>,
    /// Electrolyte face conductance per face: harmonic eps_e^p kappa over
    /// the spacing, so that flux = r_face * (u_right - u_left). Zero at the
    /// outer faces.
    pub r_face: Vec<f64>,
    /// nu = (1 - 2 t_plus) R T / F at the assembly temperature.
    pub nu: f64,
    /// Logarithmic drift flux per face, nu * r_face * (ln c_r - ln c_l).
    pub log_drift: Vec<f64>,
    /// Concentration factor b of the exchange current per electrode cell,
    /// so that j = k b E.
    pub b_neg: Vec<f64>,
    pub b_pos: Vec<f64>,
    /// Local open circuit potential f = U(y_surf, T) per electrode cell.
    pub f_neg: Vec<f64>,
    pub f_pos: Vec<f64>,
    pub k_neg: f64,
    pub k_pos: f64,
    /// q = k / (eps_s sigma) per electrode.
    pub q_neg: f64,
    pub q_pos: f64,
    /// Collector boundary data d = I / (A eps_s sigma), sign-flipped by the
    /// wrong modes.
    pub d_neg: f64,
    pub d_pos: f64,
    pub sigma_eff_neg: f64,
    pub sigma_eff_pos: f64,
    pub temperature: f64,
    pub current_over_area: f64,
    pub bc_mode: BcMode,
    pub gauge: Gauge,
    /// Index of the pinned phi_s unknown in the interleaved vector.
    pub pin_unknown: usize,
}

impl ChargeProblem {
    pub fn n_total(&self) -> usize {
        self.n_neg + self.n_sep + self.n_pos
    }

    pub fn n_unknowns(&self) -> usize {
        2 * (self.n_neg + self.n_pos) + self.n_sep
    }

    /// Index of the phi_e unknown of a macro cell.
    pub fn u_index(&self, cell: usize) -> usize {
        if cell < self.n_neg {
            2 * cell
        } else if cell < self.n_neg + self.n_sep {
            2 * self.n_neg + (cell - self.n_neg)
        } else {
            2 * self.n_neg + self.n_sep + 2 * (cell - self.n_neg - self.n_sep)
        }
    }

    /// Index of the phi_s unknown of an electrode cell, None in the
    /// separator.
    pub fn v_index(&self, cell: usize) -> Option<usize> {
        if cell < self.n_neg || cell >= self.n_neg + self.n_sep {
            Some(self.u_index(cell) + 1)
        } else {
            None
        }
    }

    pub fn region(&self, cell: usize) -> Region {
        if cell < self.n_neg {
            Region::Negative
        } else if cell < self.n_neg + self.n_sep {
            Region::Separator
        } else {
            Region::Positive
        }
    }

    /// (k, b, f, sigma_eff) of an electrode cell.
    fn electrode_data(&self, cell: usize) -> Option<(f64, f64, f64, f64)> {
        match self.region(cell) {
            Region::Negative => Some((
                self.k_neg,
                self.b_neg[cell],
                self.f_neg[cell],
                self.sigma_eff_neg,
            )),
            Region::Positive => {
                let jp = cell - self.n_neg - self.n_sep;
                Some((self.k_pos, self.b_pos[jp], self.f_pos[jp], self.sigma_eff_pos))
            }
            Region::Separator => None,
        }
    }

    fn f_at_pin(&self) -> f64 {
        let cell = (0..self.n_total())
            .find(|&c| self.v_index(c) == Some(self.pin_unknown))
            .expect("pin always points at an electrode cell");
        self.electrode_data(cell).unwrap().2
    }
}

/// The potential pair on the mesh, plus solver diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PotentialSolution {
    /// phi_e per macro cell.
    pub phi_e: Vec<f64>,
    /// phi_s per negative electrode cell.
    pub phi_s_neg: Vec<f64>,
    /// phi_s per positive electrode cell.
    pub phi_s_pos: Vec<f64>,
    pub newton_iters: usize,
    pub final_residual_norm: f64,
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

impl PotentialSolution {
    fn from_vector(problem: &ChargeProblem, z: &[f64]) -> Self {
        let n = problem.n_total();
        let phi_e = (0..n).map(|c| z[problem.u_index(c)]).collect();
        let phi_s_neg = (0..problem.n_neg)
            .map(|c| z[problem.v_index(c).unwrap()])
            .collect();
        let phi_s_pos = (0..problem.n_pos)
            .map(|jp| z[problem.v_index(problem.n_neg + problem.n_sep + jp).unwrap()])
            .collect();
        PotentialSolution {
            phi_e,
            phi_s_neg,
            phi_s_pos,
            newton_iters: 0,
            final_residual_norm: f64::NAN,
            residual_history: Vec::new(),
            converged: false,
        }
    }

    fn to_vector(&self, problem: &ChargeProblem) -> Vec<f64> {
        let mut z = vec![0.0; problem.n_unknowns()];
        for (c, &u) in self.phi_e.iter().enumerate() {
            z[problem.u_index(c)] = u;
        }
        for (c, &v) in self.phi_s_neg.iter().enumerate() {
            z[problem.v_index(c).unwrap()] = v;
        }
        for (jp, &v) in self.phi_s_pos.iter().enumerate() {
            z[problem.v_index(problem.n_neg + problem.n_sep + jp).unwrap()] = v;
        }
        z
    }

    /// phi_s of an electrode cell by global cell index.
    pub fn phi_s_at(&self, problem: &ChargeProblem, cell: usize) -> Option<f64> {
        match problem.region(cell) {
            Region::Negative => Some(self.phi_s_neg[cell]),
            Region::Positive => Some(self.phi_s_pos[cell - problem.n_neg - problem.n_sep]),
            Region::Separator => None,
        }
    }
}

/// Add the same constant to every potential. Leaves every overpotential,
/// current and residual unchanged.
pub fn gauge_shift(sol: &mut PotentialSolution, gamma: f64) {
    for v in sol
        .phi_e
        .iter_mut()
        .chain(sol.phi_s_neg.iter_mut())
        .chain(sol.phi_s_pos.iter_mut())
    {
        *v += gamma;
    }
}

/// Electrolyte face coefficients shared with the heat computation:
/// conductances r_face and logarithmic drift fluxes, both zero at the outer
/// faces.
pub(crate) fn electrolyte_face_coefficients(
    ce: &[f64],
    temperature: f64,
    params: &CellParameters,
    mesh: &MacroMesh,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = mesh.n_total();
    let nu = (1.0 - 2.0 * params.t_plus) * params.r_gas * temperature / params.faraday;
    let kappa_eff: Vec<f64> = (0..n)
        .map(|i| {
            let c = ce[i];
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::Domain(format!(
                    "electrolyte concentration {c} in cell {i} is not positive"
                )));
            }
            let k = params.brug_factor(mesh.regions[i]) * params.kappa_at(c, temperature);
            if !(k > 0.0) || !k.is_finite() {
                return Err(Error::Domain(format!(
                    "effective conductivity {k} in cell {i} is not positive (c_e = {c})"
                )));
            }
            Ok(k)
        })
        .collect::<Result<_>>()?;

    let mut r_face = vec![0.0; n + 1];
    let mut log_drift = vec![0.0; n + 1];
    for f in 1..n {
        let resistance = mesh.widths[f - 1] / (2.0 * kappa_eff[f - 1])
            + mesh.widths[f] / (2.0 * kappa_eff[f]);
        r_face[f] = 1.0 / resistance;
        log_drift[f] = nu * r_face[f] * (ce[f].ln() - ce[f - 1].ln());
    }
    Ok((r_face, log_drift))
}

/// Freeze the transport state into a solvable instance of the charge
/// problem under the requested boundary encoding and gauge.
pub fn assemble_charge_problem(
    state: &CellState,
    current: f64,
    params: &CellParameters,
    meshes: &Meshes,
    bc_mode: BcMode,
    gauge: Gauge,
) -> Result<ChargeProblem> {
    let mesh = &meshes.macro_mesh;
    let n = mesh.n_total();
    if state.ce.values.len() != n {
        return Err(Error::Step(format!(
            "electrolyte field of {} does not fit a mesh of {n} cells",
            state.ce.values.len()
        )));
    }
    if state.cs.neg.len() != mesh.n_neg || state.cs.pos.len() != mesh.n_pos {
        return Err(Error::Step(
            "solid profiles do not match the electrode cell counts".into(),
        ));
    }
    let temperature = state.temperature;
    let (r_face, log_drift) =
        electrolyte_face_coefficients(&state.ce.values, temperature, params, mesh)?;
    let nu = (1.0 - 2.0 * params.t_plus) * params.r_gas * temperature / params.faraday;

    let mut center_dx = vec![0.0; n + 1];
    for f in 1..n {
        center_dx[f] = mesh.center_spacing(f);
    }

    let mut electrode_bf = |cells: std::ops::Range<usize>,
                            profiles: &Vec<Vec<f64>>,
                            region: Region|
     -> Result<(Vec<f64>, Vec<f64>)> {
        let rmesh = meshes.radial(region)?;
        let a_sp = params.specific_area(region)?;
        let k = params.k_rate(region)?;
        let mut b = Vec::with_capacity(cells.len());
        let mut f_vals = Vec::with_capacity(cells.len());
        for (local, cell) in cells.enumerate() {
            let cs_surf = surface_concentration(&profiles[local], rmesh);
            let local_state = LocalKineticState {
                region,
                phi_s: 0.0,
                phi_e: 0.0,
                cs_surf,
                ce: state.ce.values[cell],
                temperature,
            };
            let i0 = kinetics::exchange_current_density(&local_state, params)
                .map_err(|e| annotate_cell(e, cell))?;
            b.push(a_sp * i0 / k);
            f_vals.push(
                kinetics::equilibrium_potential(&local_state, params)
                    .map_err(|e| annotate_cell(e, cell))?,
            );
        }
        Ok((b, f_vals))
    };
    let (b_neg, f_neg) = electrode_bf(mesh.neg_range(), &state.cs.neg, Region::Negative)?;
    let (b_pos, f_pos) = electrode_bf(mesh.pos_range(), &state.cs.pos, Region::Positive)?;

    let sigma_eff_neg = params.sigma_eff(Region::Negative)?;
    let sigma_eff_pos = params.sigma_eff(Region::Positive)?;
    let current_over_area = current / params.area;
    let mut d_neg = current_over_area / sigma_eff_neg;
    let mut d_pos = current_over_area / sigma_eff_pos;
    match bc_mode {
        BcMode::Correct => {}
        BcMode::WrongSmith => d_pos = -d_pos,
        BcMode::WrongGomadam => d_neg = -d_neg,
    }

    let mut problem = ChargeProblem {
        n_neg: mesh.n_neg,
        n_sep: mesh.n_sep,
        n_pos: mesh.n_pos,
        widths: mesh.widths.clone(),
        center_dx,
        r_face,
        nu,
        log_drift,
        b_neg,
        b_pos,
        f_neg,
        f_pos,
        k_neg: params.k_neg,
        k_pos: params.k_pos,
        q_neg: params.k_neg / sigma_eff_neg,
        q_pos: params.k_pos / sigma_eff_pos,
        d_neg,
        d_pos,
        sigma_eff_neg,
        sigma_eff_pos,
        temperature,
        current_over_area,
        bc_mode,
        gauge,
        pin_unknown: 0,
    };

    let mut best = None;
    for cell in 0..n {
        if problem.region(cell) == Region::Separator {
            continue;
        }
        let dist = (mesh.centers[cell] - gauge.x).abs();
        if best.map_or(true, |(d, _)| dist < d) {
            best = Some((dist, cell));
        }
    }
    let (_, pin_cell) = best.expect("electrodes always contain cells");
    problem.pin_unknown = problem.v_index(pin_cell).unwrap();
    Ok(problem)
}

fn annotate_cell(e: Error, cell: usize) -> Error {
    match e {
        Error::KineticOverflow { exponent, .. } => Error::KineticOverflow {
            context: format!(" at cell {cell}"),
            exponent,
        },
        Error::Domain(msg) => Error::Domain(format!("{msg} (cell {cell})")),
        other => other,
    }
}

/// The scalar whose vanishing is necessary for the problem to have any
/// solution: |k_- d_- / q_- - k_+ d_+ / q_+| in A/m^2. Zero in Correct
/// mode, 2 |I| / A under either wrong encoding.
pub fn compatibility_defect(problem: &ChargeProblem) -> f64 {
    (problem.k_neg * problem.d_neg / problem.q_neg
        - problem.k_pos * problem.d_pos / problem.q_pos)
        .abs()
}

/// Reaction current j = k b E(v - u - f) and its derivative with respect to
/// the argument, per cell coefficients supplied by the problem.
fn cell_current(
    problem: &ChargeProblem,
    params: &CellParameters,
    mode: KineticsMode,
    cell: usize,
    w: f64,
) -> Result<(f64, f64)> {
    let (k, b, _, _) = problem
        .electrode_data(cell)
        .expect("no reaction current in the separator");
    let f_over_rt = params.faraday / (params.r_gas * problem.temperature);
    match mode {
        KineticsMode::ButlerVolmer => {
            let (e, de) = kinetics::bv_driving(w, params.alpha_a * f_over_rt, params.alpha_c * f_over_rt)
                .map_err(|err| annotate_cell(err, cell))?;
            Ok((k * b * e, k * b * de))
        }
        KineticsMode::Linearized => {
            let lambda = k * (params.alpha_a + params.alpha_c) * f_over_rt;
            Ok((lambda * b * w, lambda * b))
        }
    }
}

/// Residuals of the physical equations, in A/m^2 throughout, with no gauge
/// row replacement. Electrolyte rows read
/// -(a_next - a_prev) + (g_next - g_prev) - w j, solid rows
/// -sigma_eff (h_next - h_prev) + w j, with boundary faces carrying the
/// collector data.
fn physical_residual(
    problem: &ChargeProblem,
    params: &CellParameters,
    mode: KineticsMode,
    z: &[f64],
) -> Result<Vec<f64>> {
    let n = problem.n_total();
    let mut r = vec![0.0; problem.n_unknowns()];

    let mut j_cell = vec![0.0; n];
    for cell in 0..n {
        if let Some(vi) = problem.v_index(cell) {
            let (_, _, f, _) = problem.electrode_data(cell).unwrap();
            let w = z[vi] - z[problem.u_index(cell)] - f;
            j_cell[cell] = cell_current(problem, params, mode, cell, w)?.0;
        }
    }

    let mut a_prev = 0.0;
    let mut g_prev = 0.0;
    for cell in 0..n {
        let (a_next, g_next) = if cell + 1 < n {
            let face = cell + 1;
            let du = z[problem.u_index(cell + 1)] - z[problem.u_index(cell)];
            (problem.r_face[face] * du, problem.log_drift[face])
        } else {
            (0.0, 0.0)
        };
        r[problem.u_index(cell)] =
            -(a_next - a_prev) + (g_next - g_prev) - problem.widths[cell] * j_cell[cell];
        a_prev = a_next;
        g_prev = g_next;
    }

    for cell in 0..n {
        let Some(vi) = problem.v_index(cell) else {
            continue;
        };
        let (_, _, _, sigma_eff) = problem.electrode_data(cell).unwrap();
        let first_neg = cell == 0;
        let last_neg = cell == problem.n_neg - 1;
        let first_pos = cell == problem.n_neg + problem.n_sep;
        let last_pos = cell == n - 1;
        let h_prev = if first_neg {
            -problem.d_neg
        } else if first_pos {
            0.0
        } else {
            let face = cell;
            (z[vi] - z[problem.v_index(cell - 1).unwrap()]) / problem.center_dx[face]
        };
        let h_next = if last_pos {
            -problem.d_pos
        } else if last_neg {
            0.0
        } else {
            let face = cell + 1;
            (z[problem.v_index(cell + 1).unwrap()] - z[vi]) / problem.center_dx[face]
        };
        r[vi] = -sigma_eff * (h_next - h_prev) + problem.widths[cell] * j_cell[cell];
    }
    Ok(r)
}

/// Residual of the assembled equations at a given solution, physical rows
/// only (no pinning row). Lets tests and examples verify a solution against
/// the discrete system it claims to solve.
pub fn charge_residual(
    problem: &ChargeProblem,
    sol: &PotentialSolution,
    params: &CellParameters,
    mode: KineticsMode,
) -> Result<Vec<f64>> {
    physical_residual(problem, params, mode, &sol.to_vector(problem))
}

/// Reaction current field per macro cell (zero in the separator) implied by
/// a solution.
pub fn reaction_field(
    problem: &ChargeProblem,
    sol: &PotentialSolution,
    params: &CellParameters,
    mode: KineticsMode,
) -> Result<Vec<f64>> {
    let z = sol.to_vector(problem);
    let n = problem.n_total();
    let mut j = vec![0.0; n];
    for cell in 0..n {
        if let Some(vi) = problem.v_index(cell) {
            let (_, _, f, _) = problem.electrode_data(cell).unwrap();
            let w = z[vi] - z[problem.u_index(cell)] - f;
            j[cell] = cell_current(problem, params, mode, cell, w)?.0;
        }
    }
    Ok(j)
}

fn residual_with_pin(
    problem: &ChargeProblem,
    params: &CellParameters,
    mode: KineticsMode,
    z: &[f64],
) -> Result<Vec<f64>> {
    let mut r = physical_residual(problem, params, mode, z)?;
    r[problem.pin_unknown] = z[problem.pin_unknown] - problem.gauge.value;
    Ok(r)
}

fn jacobian_with_pin(
    problem: &ChargeProblem,
    params: &CellParameters,
    mode: KineticsMode,
    z: &[f64],
) -> Result<BandMatrix> {
    let n = problem.n_total();
    let m = problem.n_unknowns();
    let mut jac = BandMatrix::new(m, 2, 2);

    for cell in 0..n {
        let ui = problem.u_index(cell);
        if cell + 1 < n {
            let t = problem.r_face[cell + 1];
            let un = problem.u_index(cell + 1);
            jac.add(ui, ui, t);
            jac.add(ui, un, -t);
            jac.add(un, un, t);
            jac.add(un, ui, -t);
        }
        if let Some(vi) = problem.v_index(cell) {
            let (_, _, f, sigma_eff) = problem.electrode_data(cell).unwrap();
            let w = z[vi] - z[ui] - f;
            let dj = cell_current(problem, params, mode, cell, w)?.1;
            let wdj = problem.widths[cell] * dj;
            // Electrolyte row: -w * j term.
            jac.add(ui, ui, wdj);
            jac.add(ui, vi, -wdj);
            // Solid row: +w * j term.
            jac.add(vi, vi, wdj);
            jac.add(vi, ui, -wdj);
            // Solid stiffness across faces interior to the electrode.
            let left_face_interior = cell != 0 && cell != problem.n_neg + problem.n_sep;
            let right_face_interior = cell != problem.n_neg - 1 && cell != n - 1;
            if left_face_interior {
                let t = sigma_eff / problem.center_dx[cell];
                let vp = problem.v_index(cell - 1).unwrap();
                jac.add(vi, vi, t);
                jac.add(vi, vp, -t);
            }
            if right_face_interior {
                let t = sigma_eff / problem.center_dx[cell + 1];
                let vn = problem.v_index(cell + 1).unwrap();
                jac.add(vi, vi, t);
                jac.add(vi, vn, -t);
            }
        }
    }

    jac.clear_row(problem.pin_unknown);
    jac.set(problem.pin_unknown, problem.pin_unknown, 1.0);
    Ok(jac)
}

fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
}

/// Solve the assembled problem with damped Newton iterations under
/// Butler-Volmer kinetics. Refuses the wrong boundary encodings up front:
/// their systems have no solution for I != 0, so iterating on them would
/// only manufacture a spurious answer.
pub fn solve_charge_newton(
    problem: &ChargeProblem,
    params: &CellParameters,
    tol: f64,
    max_iters: usize,
) -> Result<PotentialSolution> {
    solve_newton_with_mode(problem, params, KineticsMode::ButlerVolmer, tol, max_iters)
}

pub(crate) fn solve_newton_with_mode(
    problem: &ChargeProblem,
    params: &CellParameters,
    mode: KineticsMode,
    tol: f64,
    max_iters: usize,
) -> Result<PotentialSolution> {
    if problem.bc_mode != BcMode::Correct {
        return Err(Error::IllPosed {
            mode: problem.bc_mode,
            defect: compatibility_defect(problem),
        });
    }
    let m = problem.n_unknowns();
    let n = problem.n_total();

    // Start from the local equilibrium: u constant, v = f + u, with the
    // constant chosen so the pinned value already holds. Every overpotential
    // is then exactly zero, so at I = 0 with uniform concentrations the
    // initial guess is the solution and Newton performs zero iterations.
    let c0 = problem.gauge.value - problem.f_at_pin();
    let mut z = vec![0.0; m];
    for cell in 0..n {
        z[problem.u_index(cell)] = c0;
        if let Some(vi) = problem.v_index(cell) {
            let (_, _, f, _) = problem.electrode_data(cell).unwrap();
            z[vi] = f + c0;
        }
    }

    let scale = tol * problem.current_over_area.abs().max(1.0);
    let mut r = residual_with_pin(problem, params, mode, &z)?;
    let mut norm = max_abs(&r);
    let mut history = vec![norm];
    let mut iters = 0;

    while norm > scale {
        if iters >= max_iters {
            return Err(Error::NonConvergence {
                iterations: iters,
                history,
            });
        }
        let jac = jacobian_with_pin(problem, params, mode, &z)?;
        let neg_r: Vec<f64> = r.iter().map(|v| -v).collect();
        let dz = jac.solve(&neg_r)?;

        let mut lambda = 1.0;
        let mut accepted = false;
        let mut fallback: Option<(Vec<f64>, Vec<f64>, f64)> = None;
        for _ in 0..9 {
            let z_try: Vec<f64> = z
                .iter()
                .zip(&dz)
                .map(|(zi, di)| zi + lambda * di)
                .collect();
            match residual_with_pin(problem, params, mode, &z_try) {
                Ok(r_try) => {
                    let n_try = max_abs(&r_try);
                    if n_try.is_finite() {
                        if n_try < norm {
                            z = z_try;
                            r = r_try;
                            norm = n_try;
                            accepted = true;
                            break;
                        }
                        if fallback.as_ref().map_or(true, |(_, _, fb)| n_try < *fb) {
                            fallback = Some((z_try, r_try, n_try));
                        }
                    }
                }
                Err(Error::KineticOverflow { .. }) => {}
                Err(other) => return Err(other),
            }
            lambda *= 0.5;
        }
        if !accepted {
            match fallback {
                Some((z_f, r_f, n_f)) => {
                    z = z_f;
                    r = r_f;
                    norm = n_f;
                }
                None => {
                    return Err(Error::NonConvergence {
                        iterations: iters + 1,
                        history,
                    })
                }
            }
        }
        iters += 1;
        history.push(norm);
    }

    // The pinned row is solved to round-off by the linear algebra; shift the
    // whole pair so it holds bitwise. Residuals are invariant under this.
    let gamma = problem.gauge.value - z[problem.pin_unknown];
    for v in z.iter_mut() {
        *v += gamma;
    }

    let mut sol = PotentialSolution::from_vector(problem, &z);
    sol.newton_iters = iters;
    sol.final_residual_norm = norm;
    sol.residual_history = history;
    sol.converged = true;
    Ok(sol)
}

/// The linearized problem as a dense symmetric system K z = rhs together
/// with the width weights of the mean-zero constraint on phi_e. Exposed so
/// tests can cross-check the constrained solve against an independent
/// least-squares route.
pub fn linearized_system(
    problem: &ChargeProblem,
    params: &CellParameters,
) -> (
    nalgebra::DMatrix<f64>,
    nalgebra::DVector<f64>,
    nalgebra::DVector<f64>,
) {
    let n = problem.n_total();
    let m = problem.n_unknowns();
    let f_over_rt = params.faraday / (params.r_gas * problem.temperature);
    let alpha_sum = params.alpha_a + params.alpha_c;
    let mut k_mat = nalgebra::DMatrix::zeros(m, m);
    let mut rhs = nalgebra::DVector::zeros(m);
    let mut weights = nalgebra::DVector::zeros(m);

    for cell in 0..n {
        let ui = problem.u_index(cell);
        weights[ui] = problem.widths[cell];
        if cell + 1 < n {
            let t = problem.r_face[cell + 1];
            let un = problem.u_index(cell + 1);
            k_mat[(ui, ui)] += t;
            k_mat[(ui, un)] -= t;
            k_mat[(un, un)] += t;
            k_mat[(un, ui)] -= t;
        }
        let g_prev = problem.log_drift[cell];
        let g_next = if cell + 1 < n {
            problem.log_drift[cell + 1]
        } else {
            0.0
        };
        rhs[ui] += -(g_next - g_prev);

        if let Some(vi) = problem.v_index(cell) {
            let (k, b, f, sigma_eff) = problem.electrode_data(cell).unwrap();
            let lambda = k * alpha_sum * f_over_rt;
            let coupling = problem.widths[cell] * lambda * b;
            k_mat[(ui, ui)] += coupling;
            k_mat[(ui, vi)] -= coupling;
            k_mat[(vi, vi)] += coupling;
            k_mat[(vi, ui)] -= coupling;
            rhs[ui] -= coupling * f;
            rhs[vi] += coupling * f;

            let left_face_interior = cell != 0 && cell != problem.n_neg + problem.n_sep;
            let right_face_interior = cell != problem.n_neg - 1 && cell != n - 1;
            if left_face_interior {
                let t = sigma_eff / problem.center_dx[cell];
                let vp = problem.v_index(cell - 1).unwrap();
                k_mat[(vi, vi)] += t;
                k_mat[(vi, vp)] -= t;
            }
            if right_face_interior {
                let t = sigma_eff / problem.center_dx[cell + 1];
                let vn = problem.v_index(cell + 1).unwrap();
                k_mat[(vi, vi)] += t;
                k_mat[(vi, vn)] -= t;
            }
            if cell == 0 {
                rhs[vi] += problem.sigma_eff_neg * problem.d_neg;
            }
            if cell == n - 1 {
                rhs[vi] -= problem.sigma_eff_pos * problem.d_pos;
            }
        }
    }
    (k_mat, rhs, weights)
}

/// Solve the linearized problem on the mean-zero phi_e subspace via one
/// scalar Lagrange multiplier, then shift so the gauge holds. The
/// multiplier vanishes (up to round-off) exactly because the boundary data
/// is compatible; with incompatible data the solve is refused instead, as
/// no amount of shifting would make the result solve the equations.
pub fn solve_charge_linearized(
    problem: &ChargeProblem,
    params: &CellParameters,
) -> Result<PotentialSolution> {
    if problem.bc_mode != BcMode::Correct {
        return Err(Error::IllPosed {
            mode: problem.bc_mode,
            defect: compatibility_defect(problem),
        });
    }
    let m = problem.n_unknowns();
    let (k_mat, rhs, weights) = linearized_system(problem, params);

    let mut bordered = nalgebra::DMatrix::zeros(m + 1, m + 1);
    bordered.view_mut((0, 0), (m, m)).copy_from(&k_mat);
    for i in 0..m {
        bordered[(i, m)] = weights[i];
        bordered[(m, i)] = weights[i];
    }
    let mut rhs_b = nalgebra::DVector::zeros(m + 1);
    rhs_b.rows_mut(0, m).copy_from(&rhs);

    let solved = bordered
        .lu()
        .solve(&rhs_b)
        .ok_or_else(|| Error::Singular("bordered linearized system".into()))?;
    let mut z: Vec<f64> = solved.rows(0, m).iter().copied().collect();
    let multiplier = solved[m];
    log::debug!("linearized solve multiplier = {multiplier:.3e}");

    let gamma = problem.gauge.value - z[problem.pin_unknown];
    for v in z.iter_mut() {
        *v += gamma;
    }

    let norm = max_abs(&physical_residual(
        problem,
        params,
        KineticsMode::Linearized,
        &z,
    )?);
    let mut sol = PotentialSolution::from_vector(problem, &z);
    sol.final_residual_norm = norm;
    sol.residual_history = vec![norm];
    sol.converged = norm <= 1e-10 * problem.current_over_area.abs().max(1.0);
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_mesh;
    use crate::simulate::CellState;
    use crate::transport::{ElectrolyteField, SolidProfiles};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn demo_setup(
        n_neg: usize,
        n_sep: usize,
        n_pos: usize,
    ) -> (CellParameters, Meshes, CellState) {
        let params = CellParameters::demo_cell();
        let meshes = build_mesh(&params, n_neg, n_sep, n_pos, 8).unwrap();
        let state = CellState {
            time: 0.0,
            ce: ElectrolyteField::uniform(1000.0, meshes.macro_mesh.n_total(), 0.0),
            cs: SolidProfiles::uniform(&meshes.macro_mesh, 8, 8000.0, 3600.0),
            phi: None,
            temperature: 298.15,
        };
        (params, meshes, state)
    }

    fn assemble(
        current: f64,
        bc_mode: BcMode,
        gauge: Gauge,
    ) -> (CellParameters, ChargeProblem) {
        let (params, meshes, state) = demo_setup(6, 4, 6);
        let problem =
            assemble_charge_problem(&state, current, &params, &meshes, bc_mode, gauge).unwrap();
        (params, problem)
    }

    #[test]
    fn interleaved_indexing_is_contiguous_and_banded() {
        let (_, problem) = assemble(1.0, BcMode::Correct, Gauge::default());
        let m = problem.n_unknowns();
        let mut seen = vec![false; m];
        for cell in 0..problem.n_total() {
            seen[problem.u_index(cell)] = true;
            if let Some(vi) = problem.v_index(cell) {
                seen[vi] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        for cell in 0..problem.n_total() - 1 {
            let gap = problem.u_index(cell + 1) - problem.u_index(cell);
            assert!(gap <= 2, "u neighbours {cell} further than the band");
        }
    }

    #[test]
    fn defect_is_zero_correct_and_two_i_over_a_wrong() {
        for &current in &[0.1, 1.0, 10.0] {
            let (_, ok) = assemble(current, BcMode::Correct, Gauge::default());
            assert!(compatibility_defect(&ok).abs() <= 1e-14 * current.max(1.0));
            for mode in [BcMode::WrongSmith, BcMode::WrongGomadam] {
                let (_, bad) = assemble(current, mode, Gauge::default());
                let defect = compatibility_defect(&bad);
                let expected = 2.0 * current;
                assert!(
                    (defect - expected).abs() <= 1e-12 * expected,
                    "{mode}: defect {defect} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn newton_refuses_wrong_boundary_encodings() {
        for mode in [BcMode::WrongSmith, BcMode::WrongGomadam] {
            let (params, problem) = assemble(1.0, mode, Gauge::default());
            let err = solve_charge_newton(&problem, &params, 1e-10, 30).unwrap_err();
            match err {
                Error::IllPosed { mode: m, defect } => {
                    assert_eq!(m, mode);
                    assert!((defect - 2.0).abs() < 1e-12);
                }
                other => panic!("expected IllPosed, got {other:?}"),
            }
            let err = solve_charge_linearized(&problem, &params).unwrap_err();
            assert!(matches!(err, Error::IllPosed { .. }));
        }
    }

    #[test]
    fn equilibrium_solves_in_zero_iterations() {
        let (params, problem) = assemble(0.0, BcMode::Correct, Gauge { x: 0.0, value: 0.3 });
        let sol = solve_charge_newton(&problem, &params, 1e-12, 30).unwrap();
        assert_eq!(sol.newton_iters, 0);
        assert_eq!(sol.final_residual_norm, 0.0);
        assert_eq!(sol.phi_s_neg[0], 0.3);
        // phi_e constant, phi_s = f + that constant per electrode.
        let u0 = sol.phi_e[0];
        for &u in &sol.phi_e {
            assert_eq!(u, u0);
        }
        for (c, &v) in sol.phi_s_neg.iter().enumerate() {
            assert_eq!(v, problem.f_neg[c] + u0);
        }
    }

    #[test]
    fn converged_solution_satisfies_the_divergence_identities() {
        let (params, problem) = assemble(2.0, BcMode::Correct, Gauge::default());
        let sol = solve_charge_newton(&problem, &params, 1e-10, 30).unwrap();
        assert!(sol.converged);
        let scale = problem.current_over_area.abs().max(1.0);

        let z = sol.to_vector(&problem);
        let f_over_rt = params.faraday / (params.r_gas * problem.temperature);
        let e_at = |cell: usize| {
            let (_, _, f, _) = problem.electrode_data(cell).unwrap();
            let w = z[problem.v_index(cell).unwrap()] - z[problem.u_index(cell)] - f;
            kinetics::bv_driving(w, params.alpha_a * f_over_rt, params.alpha_c * f_over_rt)
                .unwrap()
                .0
        };
        let sum_neg: f64 = (0..problem.n_neg)
            .map(|c| problem.b_neg[c] * e_at(c) * problem.widths[c])
            .sum();
        let start_pos = problem.n_neg + problem.n_sep;
        let sum_pos: f64 = (0..problem.n_pos)
            .map(|jp| {
                let c = start_pos + jp;
                problem.b_pos[jp] * e_at(c) * problem.widths[c]
            })
            .sum();

        assert!(
            (problem.q_neg * sum_neg - problem.d_neg).abs() <= 1e-9 * scale,
            "negative electrode identity off by {}",
            problem.q_neg * sum_neg - problem.d_neg
        );
        assert!(
            (problem.q_pos * sum_pos + problem.d_pos).abs() <= 1e-9 * scale,
            "positive electrode identity off by {}",
            problem.q_pos * sum_pos + problem.d_pos
        );
        assert!(
            (problem.k_neg * sum_neg + problem.k_pos * sum_pos).abs() <= 1e-9 * scale,
            "combined identity off"
        );
    }

    #[test]
    fn two_gauges_differ_by_exactly_the_constant() {
        let (params, problem_a) = assemble(1.5, BcMode::Correct, Gauge { x: 0.0, value: 0.0 });
        let (_, problem_b) = assemble(1.5, BcMode::Correct, Gauge { x: 0.0, value: 0.7 });
        let a = solve_charge_newton(&problem_a, &params, 1e-10, 30).unwrap();
        let b = solve_charge_newton(&problem_b, &params, 1e-10, 30).unwrap();
        let mut max_dev: f64 = 0.0;
        for (x, y) in a.phi_e.iter().zip(&b.phi_e) {
            max_dev = max_dev.max(((y - x) - 0.7).abs());
        }
        for (x, y) in a
            .phi_s_neg
            .iter()
            .chain(&a.phi_s_pos)
            .zip(b.phi_s_neg.iter().chain(&b.phi_s_pos))
        {
            max_dev = max_dev.max(((y - x) - 0.7).abs());
        }
        assert!(max_dev <= 1e-9, "offset deviation {max_dev}");
    }

    #[test]
    fn reaction_field_is_gauge_invariant() {
        let (params, problem_a) = assemble(3.0, BcMode::Correct, Gauge { x: 0.0, value: 0.0 });
        let (_, problem_b) =
            assemble(3.0, BcMode::Correct, Gauge { x: 0.025, value: -0.4 });
        let a = solve_charge_newton(&problem_a, &params, 1e-10, 30).unwrap();
        let b = solve_charge_newton(&problem_b, &params, 1e-10, 30).unwrap();
        let ja = reaction_field(&problem_a, &a, &params, KineticsMode::ButlerVolmer).unwrap();
        let jb = reaction_field(&problem_b, &b, &params, KineticsMode::ButlerVolmer).unwrap();
        for (x, y) in ja.iter().zip(&jb) {
            assert!((x - y).abs() <= 1e-6 * (x.abs().max(1.0)), "{x} vs {y}");
        }
    }

    #[test]
    fn jacobian_matches_directional_finite_differences() {
        let (params, problem) = assemble(1.0, BcMode::Correct, Gauge::default());
        let m = problem.n_unknowns();
        let mut rng = StdRng::seed_from_u64(3);
        // A generic point away from the solution, potentials of order 0.1 V.
        let z: Vec<f64> = (0..m).map(|_| rng.gen_range(-0.05..0.05)).collect();
        let dir: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eps = 1e-7;
        let z_p: Vec<f64> = z.iter().zip(&dir).map(|(a, d)| a + eps * d).collect();
        let z_m: Vec<f64> = z.iter().zip(&dir).map(|(a, d)| a - eps * d).collect();
        let r_p = residual_with_pin(&problem, &params, KineticsMode::ButlerVolmer, &z_p).unwrap();
        let r_m = residual_with_pin(&problem, &params, KineticsMode::ButlerVolmer, &z_m).unwrap();
        let jac = jacobian_with_pin(&problem, &params, KineticsMode::ButlerVolmer, &z).unwrap();
        let dense = jac.to_dense();
        let jd = dense * nalgebra::DVector::from_column_slice(&dir);
        let mut scale: f64 = 1.0;
        for i in 0..m {
            scale = scale.max(jd[i].abs());
        }
        for i in 0..m {
            let fd = (r_p[i] - r_m[i]) / (2.0 * eps);
            assert!(
                (fd - jd[i]).abs() <= 1e-5 * scale,
                "row {i}: fd {fd} vs analytic {}",
                jd[i]
            );
        }
    }

    #[test]
    fn linearized_matches_newton_for_small_currents() {
        let (params, problem) = assemble(0.01, BcMode::Correct, Gauge::default());
        let lin = solve_charge_linearized(&problem, &params).unwrap();
        assert!(lin.converged, "residual {}", lin.final_residual_norm);
        let newton = solve_charge_newton(&problem, &params, 1e-12, 40).unwrap();
        for (a, b) in lin.phi_e.iter().zip(&newton.phi_e) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        for (a, b) in lin
            .phi_s_neg
            .iter()
            .chain(&lin.phi_s_pos)
            .zip(newton.phi_s_neg.iter().chain(&newton.phi_s_pos))
        {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn linearized_solution_has_tiny_unconstrained_residual() {
        let (params, problem) = assemble(1.0, BcMode::Correct, Gauge { x: 0.0, value: 0.2 });
        let sol = solve_charge_linearized(&problem, &params).unwrap();
        assert!(
            sol.final_residual_norm <= 1e-10,
            "residual {}",
            sol.final_residual_norm
        );
        assert_eq!(sol.phi_s_neg[0], 0.2);
    }

    #[test]
    fn nonuniform_concentrations_still_converge() {
        let (params, meshes, mut state) = demo_setup(8, 3, 8);
        let n = meshes.macro_mesh.n_total();
        for (i, c) in state.ce.values.iter_mut().enumerate() {
            *c = 900.0 + 250.0 * (i as f64 / n as f64);
        }
        for profile in state.cs.neg.iter_mut() {
            for (jdx, c) in profile.iter_mut().enumerate() {
                *c = 7800.0 + 40.0 * jdx as f64;
            }
        }
        let problem = assemble_charge_problem(
            &state,
            4.0,
            &params,
            &meshes,
            BcMode::Correct,
            Gauge::default(),
        )
        .unwrap();
        let sol = solve_charge_newton(&problem, &params, 1e-10, 40).unwrap();
        assert!(sol.converged);
        let r = charge_residual(&problem, &sol, &params, KineticsMode::ButlerVolmer).unwrap();
        assert!(max_abs(&r) <= 1e-10 * 4.0_f64.max(1.0));
    }

    #[test]
    fn pin_tracks_the_gauge_location() {
        let (_, problem) = assemble(1.0, BcMode::Correct, Gauge { x: 0.03, value: 0.0 });
        // Nearest electrode center to x = L is the last positive cell.
        let last = problem.n_total() - 1;
        assert_eq!(problem.pin_unknown, problem.v_index(last).unwrap());
        // A gauge point inside the separator still pins an electrode cell.
        let (_, problem) = assemble(1.0, BcMode::Correct, Gauge { x: 0.015, value: 0.0 });
        let cell = (0..problem.n_total())
            .find(|&c| problem.v_index(c) == Some(problem.pin_unknown))
            .unwrap();
        assert_ne!(problem.region(cell), Region::Separator);
    }
}
