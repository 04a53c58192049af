//! Cell parameters, run protocol, and configuration loading.
//!
//! A cell is described by three regions along the through thickness
//! coordinate x: the negative electrode on (0, l1), the separator on
//! (l1, l1 + delta), and the positive electrode on (l1 + delta, l). Each
//! electrode additionally carries a spherical particle of radius r_s whose
//! radial diffusion sets the surface stoichiometry seen by the kinetics.
//!
//! Open circuit potentials are tabulated against stoichiometry y = c_s / c_max
//! and interpolated with a shape preserving cubic by default, so monotone
//! input data stays monotone and the curve passes through every knot exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::KineticsMode;

/// Which part of the sandwich a point or cell belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Negative,
    Separator,
    Positive,
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Region::Negative => write!(f, "negative"),
            Region::Separator => write!(f, "separator"),
            Region::Positive => write!(f, "positive"),
        }
    }
}

/// Interpolation rule for tabulated open circuit data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OcvInterpolation {
    /// Shape preserving piecewise cubic (Fritsch and Carlson slopes).
    #[default]
    MonotoneCubic,
    Linear,
}

/// Tabulated open circuit potential U(y) and its temperature sensitivity
/// dU/dT(y), both against stoichiometry y in [0, 1].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OcvCurve {
    pub knots: Vec<f64>,
    pub u_values: Vec<f64>,
    pub dudt_values: Vec<f64>,
    #[serde(default)]
    pub interpolation: OcvInterpolation,
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Interior knot slope: weighted harmonic mean of the two secants, zero when
/// the secants disagree in sign so the interpolant cannot overshoot.
fn pchip_interior_slope(h_left: f64, h_right: f64, m_left: f64, m_right: f64) -> f64 {
    if m_left == 0.0 || m_right == 0.0 || sgn(m_left) != sgn(m_right) {
        0.0
    } else {
        let w1 = 2.0 * h_right + h_left;
        let w2 = h_right + 2.0 * h_left;
        (w1 + w2) / (w1 / m_left + w2 / m_right)
    }
}

/// One sided three point slope estimate for the boundary knots, limited so
/// the first interval stays monotone.
fn pchip_edge_slope(h0: f64, h1: f64, m0: f64, m1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
    if sgn(d) != sgn(m0) {
        0.0
    } else if sgn(m0) != sgn(m1) && d.abs() > 3.0 * m0.abs() {
        3.0 * m0
    } else {
        d
    }
}

impl OcvCurve {
    pub fn u_at(&self, y: f64) -> f64 {
        self.eval(&self.u_values, y)
    }

    pub fn dudt_at(&self, y: f64) -> f64 {
        self.eval(&self.dudt_values, y)
    }

    fn eval(&self, values: &[f64], y: f64) -> f64 {
        let n = self.knots.len();
        if y <= self.knots[0] {
            return values[0];
        }
        if y >= self.knots[n - 1] {
            return values[n - 1];
        }
        let k = self.knots.partition_point(|&t| t <= y) - 1;
        match self.interpolation {
            OcvInterpolation::Linear => {
                let h = self.knots[k + 1] - self.knots[k];
                let t = (y - self.knots[k]) / h;
                values[k] + t * (values[k + 1] - values[k])
            }
            OcvInterpolation::MonotoneCubic => {
                let h = self.knots[k + 1] - self.knots[k];
                let t = (y - self.knots[k]) / h;
                let d0 = self.knot_slope(values, k);
                let d1 = self.knot_slope(values, k + 1);
                let t2 = t * t;
                let t3 = t2 * t;
                let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
                let h10 = t3 - 2.0 * t2 + t;
                let h01 = -2.0 * t3 + 3.0 * t2;
                let h11 = t3 - t2;
                h00 * values[k] + h10 * h * d0 + h01 * values[k + 1] + h11 * h * d1
            }
        }
    }

    /// Derivative dU/dy of the interpolant, used by Newton's method for the
    /// surface stoichiometry coupling and by tests against finite differences.
    pub fn u_slope_at(&self, y: f64) -> f64 {
        let values = &self.u_values;
        let n = self.knots.len();
        if y <= self.knots[0] || y >= self.knots[n - 1] {
            return 0.0;
        }
        let k = self.knots.partition_point(|&t| t <= y) - 1;
        let h = self.knots[k + 1] - self.knots[k];
        let t = (y - self.knots[k]) / h;
        match self.interpolation {
            OcvInterpolation::Linear => (values[k + 1] - values[k]) / h,
            OcvInterpolation::MonotoneCubic => {
                let d0 = self.knot_slope(values, k);
                let d1 = self.knot_slope(values, k + 1);
                let t2 = t * t;
                let dh00 = 6.0 * t2 - 6.0 * t;
                let dh10 = 3.0 * t2 - 4.0 * t + 1.0;
                let dh01 = -6.0 * t2 + 6.0 * t;
                let dh11 = 3.0 * t2 - 2.0 * t;
                (dh00 * values[k] + dh01 * values[k + 1]) / h + dh10 * d0 + dh11 * d1
            }
        }
    }

    fn knot_slope(&self, values: &[f64], j: usize) -> f64 {
        let n = self.knots.len();
        let secant = |i: usize| (values[i + 1] - values[i]) / (self.knots[i + 1] - self.knots[i]);
        if n == 2 {
            return secant(0);
        }
        if j == 0 {
            let h0 = self.knots[1] - self.knots[0];
            let h1 = self.knots[2] - self.knots[1];
            pchip_edge_slope(h0, h1, secant(0), secant(1))
        } else if j == n - 1 {
            let h0 = self.knots[n - 1] - self.knots[n - 2];
            let h1 = self.knots[n - 2] - self.knots[n - 3];
            pchip_edge_slope(h0, h1, secant(n - 2), secant(n - 3))
        } else {
            let h_left = self.knots[j] - self.knots[j - 1];
            let h_right = self.knots[j + 1] - self.knots[j];
            pchip_interior_slope(h_left, h_right, secant(j - 1), secant(j))
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let n = self.knots.len();
        if n < 2 {
            return Err(Error::InvalidParameters(format!(
                "{name}: need at least 2 knots, got {n}"
            )));
        }
        if self.u_values.len() != n || self.dudt_values.len() != n {
            return Err(Error::InvalidParameters(format!(
                "{name}: knots, u_values and dudt_values must have equal length"
            )));
        }
        for w in self.knots.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::InvalidParameters(format!(
                    "{name}: knots must be strictly increasing"
                )));
            }
        }
        for &v in self
            .knots
            .iter()
            .chain(self.u_values.iter())
            .chain(self.dudt_values.iter())
        {
            if !v.is_finite() {
                return Err(Error::InvalidParameters(format!(
                    "{name}: non-finite table entry"
                )));
            }
        }
        Ok(())
    }
}

/// Electrolyte conductivity kappa(c_e, T) as a polynomial in concentration
/// with a linear temperature correction:
///
///   kappa = (sum_k coeffs[k] * c_e^k) * (1 + temp_coeff * (T - T_ref))
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KappaModel {
    pub coeffs: Vec<f64>,
    #[serde(default)]
    pub temp_coeff: f64,
}

impl KappaModel {
    pub fn evaluate(&self, ce: f64, delta_t: f64) -> f64 {
        let mut poly = 0.0;
        for &c in self.coeffs.iter().rev() {
            poly = poly * ce + c;
        }
        poly * (1.0 + self.temp_coeff * delta_t)
    }
}

/// Everything that is a property of the cell itself, independent of how it
/// is driven or discretized. Lengths in m, concentrations in mol/m^3,
/// currents in A, temperatures in K.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellParameters {
    /// Negative electrode thickness.
    pub l1: f64,
    /// Separator thickness.
    pub delta: f64,
    /// Positive electrode thickness.
    pub l2: f64,
    /// Total thickness. May be left at 0 in configs, in which case it is
    /// filled in as l1 + delta + l2 when the config is loaded.
    #[serde(default)]
    pub l: f64,
    /// Electrode plate area, m^2.
    pub area: f64,

    /// Electrolyte volume fractions per region.
    pub eps_e_neg: f64,
    pub eps_e_sep: f64,
    pub eps_e_pos: f64,
    /// Active material volume fractions per electrode.
    pub eps_s_neg: f64,
    pub eps_s_pos: f64,
    /// Bruggeman exponent p in the effective transport factor eps_e^p.
    pub bruggeman: f64,

    /// Electrolyte diffusivity, m^2/s.
    pub d_e: f64,
    /// Solid phase diffusivities, m^2/s.
    pub d_s_neg: f64,
    pub d_s_pos: f64,
    /// Particle radii, m.
    pub r_s_neg: f64,
    pub r_s_pos: f64,
    /// Solid phase electronic conductivities, S/m.
    pub sigma_neg: f64,
    pub sigma_pos: f64,
    /// Cation transference number.
    pub t_plus: f64,
    /// Electrolyte conductivity model.
    pub kappa: KappaModel,

    /// Reaction rate constants, units chosen so that
    /// k * c_e^alpha_a * (c_max - c_s)^alpha_a * c_s^alpha_c is A/m^2.
    pub k_neg: f64,
    pub k_pos: f64,
    /// Transfer coefficients.
    pub alpha_a: f64,
    pub alpha_c: f64,
    /// Saturation concentrations of the host lattices, mol/m^3.
    pub cs_max_neg: f64,
    pub cs_max_pos: f64,

    #[serde(default = "default_faraday")]
    pub faraday: f64,
    #[serde(default = "default_r_gas")]
    pub r_gas: f64,

    /// Lumped film plus contact resistance, Ohm m^2, applied to the terminal
    /// voltage as r_f * I / area.
    pub r_f: f64,

    /// Thermal lump: cell mass (kg), specific heat (J/(kg K)), convective
    /// film coefficient (W/(m^2 K)) and exchange surface area (m^2).
    pub mass: f64,
    pub c_p: f64,
    pub h_conv: f64,
    pub a_surf: f64,
    /// Ambient and reference temperatures, K.
    pub t_amb: f64,
    pub t_ref: f64,

    pub ocv_neg: OcvCurve,
    pub ocv_pos: OcvCurve,

    /// Cells in series for the reported pack voltage.
    #[serde(default = "default_n_series")]
    pub n_series: u32,
}

fn default_faraday() -> f64 {
    96485.33212
}

fn default_r_gas() -> f64 {
    8.314462618
}

fn default_n_series() -> u32 {
    1
}

/// Non fatal observations from parameter validation.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub warnings: Vec<String>,
}

impl CellParameters {
    /// Fill in derived quantities that configs may leave at their defaults.
    pub fn normalize(&mut self) {
        if self.l == 0.0 {
            self.l = self.l1 + self.delta + self.l2;
        }
    }

    pub fn region_of(&self, x: f64) -> Result<Region> {
        if !(0.0..=self.l).contains(&x) {
            return Err(Error::Domain(format!(
                "x = {x} outside the cell [0, {}]",
                self.l
            )));
        }
        if x < self.l1 {
            Ok(Region::Negative)
        } else if x < self.l1 + self.delta {
            Ok(Region::Separator)
        } else {
            Ok(Region::Positive)
        }
    }

    pub fn eps_e(&self, region: Region) -> f64 {
        match region {
            Region::Negative => self.eps_e_neg,
            Region::Separator => self.eps_e_sep,
            Region::Positive => self.eps_e_pos,
        }
    }

    fn electrode_only<T>(&self, region: Region, neg: T, pos: T, what: &str) -> Result<T> {
        match region {
            Region::Negative => Ok(neg),
            Region::Positive => Ok(pos),
            Region::Separator => Err(Error::Domain(format!(
                "{what} is not defined in the separator"
            ))),
        }
    }

    pub fn eps_s(&self, region: Region) -> Result<f64> {
        self.electrode_only(region, self.eps_s_neg, self.eps_s_pos, "eps_s")
    }

    pub fn d_s(&self, region: Region) -> Result<f64> {
        self.electrode_only(region, self.d_s_neg, self.d_s_pos, "d_s")
    }

    pub fn r_s(&self, region: Region) -> Result<f64> {
        self.electrode_only(region, self.r_s_neg, self.r_s_pos, "r_s")
    }

    pub fn sigma(&self, region: Region) -> Result<f64> {
        self.electrode_only(region, self.sigma_neg, self.sigma_pos, "sigma")
    }

    pub fn k_rate(&self, region: Region) -> Result<f64> {
        self.electrode_only(region, self.k_neg, self.k_pos, "reaction rate constant")
    }

    pub fn cs_max(&self, region: Region) -> Result<f64> {
        self.electrode_only(region, self.cs_max_neg, self.cs_max_pos, "cs_max")
    }

    pub fn ocv(&self, region: Region) -> Result<&OcvCurve> {
        self.electrode_only(region, &self.ocv_neg, &self.ocv_pos, "open circuit curve")
    }

    pub fn d_s_eff(&self, region: Region) -> Result<f64> {
        self.d_s(region)
    }

    /// Effective electronic conductivity eps_s * sigma.
    pub fn sigma_eff(&self, region: Region) -> Result<f64> {
        Ok(self.eps_s(region)? * self.sigma(region)?)
    }

    /// Porosity correction eps_e^p applied to electrolyte transport.
    pub fn brug_factor(&self, region: Region) -> f64 {
        self.eps_e(region).powf(self.bruggeman)
    }

    /// Interfacial area per volume, 3 eps_s / r_s, 1/m.
    pub fn specific_area(&self, region: Region) -> Result<f64> {
        Ok(3.0 * self.eps_s(region)? / self.r_s(region)?)
    }

    pub fn kappa_at(&self, ce: f64, temperature: f64) -> f64 {
        self.kappa.evaluate(ce, temperature - self.t_ref)
    }

    pub fn validate(&self) -> Result<ValidationReport> {
        let mut report = ValidationReport::default();
        let positive = [
            ("l1", self.l1),
            ("delta", self.delta),
            ("l2", self.l2),
            ("area", self.area),
            ("d_e", self.d_e),
            ("d_s_neg", self.d_s_neg),
            ("d_s_pos", self.d_s_pos),
            ("r_s_neg", self.r_s_neg),
            ("r_s_pos", self.r_s_pos),
            ("sigma_neg", self.sigma_neg),
            ("sigma_pos", self.sigma_pos),
            ("k_neg", self.k_neg),
            ("k_pos", self.k_pos),
            ("cs_max_neg", self.cs_max_neg),
            ("cs_max_pos", self.cs_max_pos),
            ("faraday", self.faraday),
            ("r_gas", self.r_gas),
            ("mass", self.mass),
            ("c_p", self.c_p),
            ("t_amb", self.t_amb),
            ("t_ref", self.t_ref),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameters(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        let nonnegative = [
            ("r_f", self.r_f),
            ("h_conv", self.h_conv),
            ("a_surf", self.a_surf),
            ("bruggeman", self.bruggeman),
        ];
        for (name, v) in nonnegative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameters(format!(
                    "{name} must be nonnegative and finite, got {v}"
                )));
            }
        }
        let total = self.l1 + self.delta + self.l2;
        if (self.l - total).abs() > 1e-9 * total {
            return Err(Error::InvalidParameters(format!(
                "total length l = {} does not match l1 + delta + l2 = {total}",
                self.l
            )));
        }
        let fractions = [
            ("eps_e_neg", self.eps_e_neg),
            ("eps_e_sep", self.eps_e_sep),
            ("eps_e_pos", self.eps_e_pos),
            ("eps_s_neg", self.eps_s_neg),
            ("eps_s_pos", self.eps_s_pos),
            ("t_plus", self.t_plus),
        ];
        for (name, v) in fractions {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidParameters(format!(
                    "{name} must lie strictly inside (0, 1), got {v}"
                )));
            }
        }
        if self.eps_e_neg + self.eps_s_neg > 1.0 {
            return Err(Error::InvalidParameters(
                "negative electrode volume fractions exceed 1".into(),
            ));
        }
        if self.eps_e_pos + self.eps_s_pos > 1.0 {
            return Err(Error::InvalidParameters(
                "positive electrode volume fractions exceed 1".into(),
            ));
        }
        for (name, v) in [("alpha_a", self.alpha_a), ("alpha_c", self.alpha_c)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidParameters(format!(
                    "{name} must lie in (0, 1], got {v}"
                )));
            }
        }
        if self.kappa.coeffs.is_empty() {
            return Err(Error::InvalidParameters(
                "kappa.coeffs must not be empty".into(),
            ));
        }
        if self.kappa.coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameters(
                "kappa.coeffs contains a non-finite entry".into(),
            ));
        }
        if self.n_series < 1 {
            return Err(Error::InvalidParameters("n_series must be at least 1".into()));
        }
        self.ocv_neg.validate("ocv_neg")?;
        self.ocv_pos.validate("ocv_pos")?;

        if !(1.0..=2.5).contains(&self.bruggeman) {
            report.warnings.push(format!(
                "bruggeman exponent {} is outside the usual range [1, 2.5]",
                self.bruggeman
            ));
        }
        if (self.alpha_a + self.alpha_c - 1.0).abs() > 1e-12 {
            report.warnings.push(format!(
                "alpha_a + alpha_c = {} (most published fits use 1)",
                self.alpha_a + self.alpha_c
            ));
        }
        if self.h_conv == 0.0 || self.a_surf == 0.0 {
            report
                .warnings
                .push("h_conv * a_surf is zero, the thermal lump is adiabatic".into());
        }
        Ok(report)
    }

    /// Small, well conditioned cell used by the examples and the test suite.
    /// The numbers are not a fit to any real chemistry; they are chosen so
    /// that every quantity is O(1) to O(1e4) and the charge problem is far
    /// from the round-off floor, which makes tight tolerance checks
    /// meaningful.
    pub fn demo_cell() -> Self {
        CellParameters {
            l1: 0.01,
            delta: 0.01,
            l2: 0.01,
            l: 0.03,
            area: 1.0,
            eps_e_neg: 0.4,
            eps_e_sep: 0.5,
            eps_e_pos: 0.35,
            eps_s_neg: 0.55,
            eps_s_pos: 0.45,
            bruggeman: 1.5,
            d_e: 2e-5,
            d_s_neg: 1e-7,
            d_s_pos: 8e-8,
            r_s_neg: 5e-3,
            r_s_pos: 4e-3,
            sigma_neg: 100.0,
            sigma_pos: 110.0,
            t_plus: 0.363,
            kappa: KappaModel {
                coeffs: vec![1.0],
                temp_coeff: 0.0,
            },
            k_neg: 5e-4,
            k_pos: 5e-4,
            alpha_a: 0.5,
            alpha_c: 0.5,
            cs_max_neg: 10_000.0,
            cs_max_pos: 12_000.0,
            faraday: default_faraday(),
            r_gas: default_r_gas(),
            r_f: 1e-4,
            mass: 20.0,
            c_p: 1000.0,
            h_conv: 5.0,
            a_surf: 2.0,
            t_amb: 298.15,
            t_ref: 298.15,
            ocv_neg: OcvCurve {
                knots: vec![0.0, 0.5, 1.0],
                u_values: vec![0.30, 0.22, 0.15],
                dudt_values: vec![-8e-5, -6e-5, -4e-5],
                interpolation: OcvInterpolation::MonotoneCubic,
            },
            ocv_pos: OcvCurve {
                knots: vec![0.0, 0.5, 1.0],
                u_values: vec![1.05, 0.92, 0.78],
                dudt_values: vec![2e-5, 1e-5, -1.5e-5],
                interpolation: OcvInterpolation::MonotoneCubic,
            },
            n_series: 1,
        }
    }
}

/// Applied current specification inside one protocol segment. Positive
/// current discharges the cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CurrentSpec {
    /// Constant current in amperes.
    Constant(f64),
    /// Piecewise linear table over segment local time. Times before the
    /// first or after the last entry use the nearest tabulated value.
    Table { times: Vec<f64>, currents: Vec<f64> },
}

impl CurrentSpec {
    fn at(&self, local_t: f64) -> f64 {
        match self {
            CurrentSpec::Constant(i) => *i,
            CurrentSpec::Table { times, currents } => {
                let n = times.len();
                if local_t <= times[0] {
                    return currents[0];
                }
                if local_t >= times[n - 1] {
                    return currents[n - 1];
                }
                let k = times.partition_point(|&t| t <= local_t) - 1;
                let frac = (local_t - times[k]) / (times[k + 1] - times[k]);
                currents[k] + frac * (currents[k + 1] - currents[k])
            }
        }
    }

    fn validate(&self, idx: usize) -> Result<()> {
        if let CurrentSpec::Table { times, currents } = self {
            if times.is_empty() || times.len() != currents.len() {
                return Err(Error::InvalidParameters(format!(
                    "segment {idx}: current table must be nonempty with matching lengths"
                )));
            }
            for w in times.windows(2) {
                if !(w[1] > w[0]) {
                    return Err(Error::InvalidParameters(format!(
                        "segment {idx}: table times must be strictly increasing"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Segment {
    /// Segment length in seconds.
    pub duration: f64,
    pub current: CurrentSpec,
}

/// The drive cycle: a sequence of segments plus optional terminal voltage
/// cutoffs that end the run early.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Protocol {
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub cutoff_voltage_low: Option<f64>,
    #[serde(default)]
    pub cutoff_voltage_high: Option<f64>,
}

impl Protocol {
    pub fn constant_current(current: f64, duration: f64) -> Self {
        Protocol {
            segments: vec![Segment {
                duration,
                current: CurrentSpec::Constant(current),
            }],
            cutoff_voltage_low: None,
            cutoff_voltage_high: None,
        }
    }

    pub fn t_end(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    /// Applied current at absolute time t. Beyond the last segment the final
    /// segment keeps applying.
    pub fn current_at(&self, t: f64) -> f64 {
        let mut start = 0.0;
        for (i, seg) in self.segments.iter().enumerate() {
            let end = start + seg.duration;
            if t < end || i == self.segments.len() - 1 {
                return seg.current.at(t - start);
            }
            start = end;
        }
        0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::InvalidParameters(
                "protocol needs at least one segment".into(),
            ));
        }
        for (i, seg) in self.segments.iter().enumerate() {
            if !(seg.duration > 0.0) || !seg.duration.is_finite() {
                return Err(Error::InvalidParameters(format!(
                    "segment {i}: duration must be positive, got {}",
                    seg.duration
                )));
            }
            seg.current.validate(i)?;
        }
        if let (Some(lo), Some(hi)) = (self.cutoff_voltage_low, self.cutoff_voltage_high) {
            if lo >= hi {
                return Err(Error::InvalidParameters(format!(
                    "cutoff_voltage_low {lo} must be below cutoff_voltage_high {hi}"
                )));
            }
        }
        Ok(())
    }
}

/// Initial electrolyte concentration: a single value everywhere or one value
/// per macro cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CeSpec {
    Uniform(f64),
    Profile(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitialConditions {
    pub ce0: CeSpec,
    /// Uniform initial solid concentrations per electrode, mol/m^3.
    pub cs0_neg: f64,
    pub cs0_pos: f64,
    /// Initial temperature, K.
    pub t0: f64,
}

impl InitialConditions {
    pub fn validate(&self, cell: &CellParameters) -> Result<ValidationReport> {
        let mut report = ValidationReport::default();
        match &self.ce0 {
            CeSpec::Uniform(c) => {
                if !(*c > 0.0) || !c.is_finite() {
                    return Err(Error::InvalidParameters(format!(
                        "ce0 must be positive, got {c}"
                    )));
                }
            }
            CeSpec::Profile(values) => {
                if values.is_empty() {
                    return Err(Error::InvalidParameters("ce0 profile is empty".into()));
                }
                if values.iter().any(|c| !(*c > 0.0) || !c.is_finite()) {
                    return Err(Error::InvalidParameters(
                        "ce0 profile contains a nonpositive or non-finite entry".into(),
                    ));
                }
            }
        }
        for (name, c0, cmax) in [
            ("cs0_neg", self.cs0_neg, cell.cs_max_neg),
            ("cs0_pos", self.cs0_pos, cell.cs_max_pos),
        ] {
            if !(c0 >= 0.0 && c0 <= cmax) {
                return Err(Error::InvalidParameters(format!(
                    "{name} = {c0} outside [0, {cmax}]"
                )));
            }
            if c0 > 0.99 * cmax {
                report
                    .warnings
                    .push(format!("{name} starts above 99 percent of saturation"));
            }
        }
        if !(self.t0 > 0.0) || !self.t0.is_finite() {
            return Err(Error::InvalidParameters(format!(
                "t0 must be positive kelvin, got {}",
                self.t0
            )));
        }
        Ok(report)
    }
}

/// Cell counts for the macro mesh and the radial particle mesh.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MeshSpec {
    #[serde(default = "default_n_macro")]
    pub n_neg: usize,
    #[serde(default = "default_n_macro")]
    pub n_sep: usize,
    #[serde(default = "default_n_macro")]
    pub n_pos: usize,
    #[serde(default = "default_n_r")]
    pub n_r: usize,
}

fn default_n_macro() -> usize {
    10
}

fn default_n_r() -> usize {
    20
}

impl Default for MeshSpec {
    fn default() -> Self {
        MeshSpec {
            n_neg: default_n_macro(),
            n_sep: default_n_macro(),
            n_pos: default_n_macro(),
            n_r: default_n_r(),
        }
    }
}

/// Time stepping and nonlinear solver settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolverSpec {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub kinetics: KineticsMode,
    /// Newton stops when the max norm of the residual, in A/m^2, drops below
    /// newton_tol * max(1, |I|/A).
    #[serde(default = "default_newton_tol")]
    pub newton_tol: f64,
    #[serde(default = "default_newton_max_iters")]
    pub newton_max_iters: usize,
    /// Location and value pinning the additive constant of the potential
    /// pair. The solid potential at the electrode cell center nearest
    /// gauge_x is set to gauge_value.
    #[serde(default)]
    pub gauge_x: f64,
    #[serde(default)]
    pub gauge_value: f64,
    /// Fixed point sweeps per time step between transport and the charge
    /// problem. One sweep is a conventional sequential split.
    #[serde(default = "default_coupling_sweeps")]
    pub coupling_sweeps: usize,
}

fn default_dt() -> f64 {
    1.0
}

fn default_newton_tol() -> f64 {
    1e-10
}

fn default_newton_max_iters() -> usize {
    30
}

fn default_coupling_sweeps() -> usize {
    1
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec {
            dt: default_dt(),
            kinetics: KineticsMode::default(),
            newton_tol: default_newton_tol(),
            newton_max_iters: default_newton_max_iters(),
            gauge_x: 0.0,
            gauge_value: 0.0,
            coupling_sweeps: default_coupling_sweeps(),
        }
    }
}

/// A full run description: cell, drive, initial state, mesh and solver.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub cell: CellParameters,
    pub protocol: Protocol,
    pub initial: InitialConditions,
    #[serde(default)]
    pub mesh: MeshSpec,
    #[serde(default)]
    pub solver: SolverSpec,
}

impl SimulationConfig {
    /// Load from a .toml or .json file, fill derived fields, but do not
    /// validate; call [`SimulationConfig::validate`] next.
    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let ext = path
            .extension()
            .and_then(|s| s.to_str())
            .unwrap_or("")
            .to_ascii_lowercase();
        let mut config: SimulationConfig = match ext.as_str() {
            "toml" => toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            "json" => serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            other => {
                return Err(Error::Config(format!(
                    "unsupported config extension '{other}' (use .toml or .json)"
                )))
            }
        };
        config.normalize();
        Ok(config)
    }

    pub fn normalize(&mut self) {
        self.cell.normalize();
    }

    pub fn validate(&self) -> Result<ValidationReport> {
        let mut report = self.cell.validate()?;
        self.protocol.validate()?;
        let init_report = self.initial.validate(&self.cell)?;
        report.warnings.extend(init_report.warnings);
        if let CeSpec::Profile(values) = &self.initial.ce0 {
            let n_total = self.mesh.n_neg + self.mesh.n_sep + self.mesh.n_pos;
            if values.len() != n_total {
                return Err(Error::InvalidParameters(format!(
                    "ce0 profile has {} entries but the mesh has {n_total} cells",
                    values.len()
                )));
            }
        }
        for (name, n) in [
            ("n_neg", self.mesh.n_neg),
            ("n_sep", self.mesh.n_sep),
            ("n_pos", self.mesh.n_pos),
        ] {
            if n < 2 {
                return Err(Error::InvalidParameters(format!(
                    "{name} must be at least 2, got {n}"
                )));
            }
        }
        if self.mesh.n_r < 3 {
            return Err(Error::InvalidParameters(format!(
                "n_r must be at least 3, got {}",
                self.mesh.n_r
            )));
        }
        if !(self.solver.dt > 0.0) || !self.solver.dt.is_finite() {
            return Err(Error::InvalidParameters(format!(
                "dt must be positive, got {}",
                self.solver.dt
            )));
        }
        if !(self.solver.newton_tol > 0.0) {
            return Err(Error::InvalidParameters(format!(
                "newton_tol must be positive, got {}",
                self.solver.newton_tol
            )));
        }
        if self.solver.newton_max_iters < 1 {
            return Err(Error::InvalidParameters(
                "newton_max_iters must be at least 1".into(),
            ));
        }
        if self.solver.coupling_sweeps < 1 {
            return Err(Error::InvalidParameters(
                "coupling_sweeps must be at least 1".into(),
            ));
        }
        if !(0.0..=self.cell.l).contains(&self.solver.gauge_x) {
            return Err(Error::InvalidParameters(format!(
                "gauge_x = {} outside the cell [0, {}]",
                self.solver.gauge_x, self.cell.l
            )));
        }
        Ok(report)
    }

    /// The demo cell under a gentle constant current discharge. Used by the
    /// examples and as a starting point for tests that tweak one knob.
    pub fn demo() -> Self {
        SimulationConfig {
            cell: CellParameters::demo_cell(),
            protocol: Protocol::constant_current(0.5, 600.0),
            initial: InitialConditions {
                ce0: CeSpec::Uniform(1000.0),
                cs0_neg: 8000.0,
                cs0_pos: 3600.0,
                t0: 298.15,
            },
            mesh: MeshSpec::default(),
            solver: SolverSpec::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotone_cubic_hits_every_knot_exactly() {
        let curve = CellParameters::demo_cell().ocv_neg;
        for (i, &y) in curve.knots.iter().enumerate() {
            assert_eq!(curve.u_at(y), curve.u_values[i]);
            assert_eq!(curve.dudt_at(y), curve.dudt_values[i]);
        }
    }

    #[test]
    fn monotone_cubic_matches_hand_computed_midpoint() {
        // Three knot curve, slopes worked out by hand from the weighted
        // harmonic mean rule: d0 = -0.17, d1 = -56/375, d2 = -0.13, then a
        // Hermite evaluation at y = 0.25.
        let curve = OcvCurve {
            knots: vec![0.0, 0.5, 1.0],
            u_values: vec![0.30, 0.22, 0.15],
            dudt_values: vec![0.0, 0.0, 0.0],
            interpolation: OcvInterpolation::MonotoneCubic,
        };
        let u = curve.u_at(0.25);
        assert!((u - 0.2587083333333333).abs() < 1e-15, "u = {u}");
    }

    #[test]
    fn monotone_cubic_preserves_monotone_data() {
        let curve = OcvCurve {
            knots: vec![0.0, 0.1, 0.3, 0.55, 0.8, 1.0],
            u_values: vec![1.2, 0.9, 0.85, 0.5, 0.49, 0.1],
            dudt_values: vec![0.0; 6],
            interpolation: OcvInterpolation::MonotoneCubic,
        };
        let mut prev = f64::INFINITY;
        for i in 0..=2000 {
            let y = i as f64 / 2000.0;
            let u = curve.u_at(y);
            assert!(
                u <= prev + 1e-14,
                "interpolant not monotone at y = {y}: {u} > {prev}"
            );
            prev = u;
        }
    }

    #[test]
    fn monotone_cubic_is_flat_outside_the_table() {
        let curve = CellParameters::demo_cell().ocv_pos;
        assert_eq!(curve.u_at(-0.2), curve.u_values[0]);
        assert_eq!(curve.u_at(1.7), *curve.u_values.last().unwrap());
        assert_eq!(curve.u_slope_at(-0.2), 0.0);
        assert_eq!(curve.u_slope_at(1.7), 0.0);
    }

    #[test]
    fn u_slope_matches_finite_differences() {
        let curve = CellParameters::demo_cell().ocv_neg;
        let h = 1e-7;
        for i in 1..40 {
            let y = i as f64 / 40.0;
            if curve.knots.iter().any(|&k| (k - y).abs() < 2.0 * h) {
                continue;
            }
            let fd = (curve.u_at(y + h) - curve.u_at(y - h)) / (2.0 * h);
            let an = curve.u_slope_at(y);
            assert!((fd - an).abs() < 1e-6, "y = {y}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn linear_interpolation_mode() {
        let curve = OcvCurve {
            knots: vec![0.0, 1.0, 3.0],
            u_values: vec![2.0, 4.0, 0.0],
            dudt_values: vec![0.0; 3],
            interpolation: OcvInterpolation::Linear,
        };
        assert!((curve.u_at(0.5) - 3.0).abs() < 1e-15);
        assert!((curve.u_at(2.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn region_lookup_uses_half_open_intervals() {
        let cell = CellParameters::demo_cell();
        assert_eq!(cell.region_of(0.0).unwrap(), Region::Negative);
        assert_eq!(cell.region_of(0.0099).unwrap(), Region::Negative);
        assert_eq!(cell.region_of(0.01).unwrap(), Region::Separator);
        assert_eq!(cell.region_of(0.02).unwrap(), Region::Positive);
        assert_eq!(cell.region_of(0.03).unwrap(), Region::Positive);
        assert!(cell.region_of(0.031).is_err());
        assert!(cell.region_of(-1e-9).is_err());
    }

    #[test]
    fn demo_cell_validates_cleanly() {
        let report = CellParameters::demo_cell().validate().unwrap();
        assert!(report.warnings.is_empty(), "warnings: {:?}", report.warnings);
        SimulationConfig::demo().validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_fractions() {
        let mut cell = CellParameters::demo_cell();
        cell.t_plus = 1.2;
        assert!(matches!(
            cell.validate(),
            Err(Error::InvalidParameters(_))
        ));
        let mut cell = CellParameters::demo_cell();
        cell.eps_e_neg = 0.7;
        cell.eps_s_neg = 0.5;
        assert!(cell.validate().is_err());
    }

    #[test]
    fn protocol_segment_lookup_and_table_interpolation() {
        let protocol = Protocol {
            segments: vec![
                Segment {
                    duration: 10.0,
                    current: CurrentSpec::Constant(2.0),
                },
                Segment {
                    duration: 10.0,
                    current: CurrentSpec::Table {
                        times: vec![0.0, 10.0],
                        currents: vec![0.0, 5.0],
                    },
                },
            ],
            cutoff_voltage_low: None,
            cutoff_voltage_high: None,
        };
        protocol.validate().unwrap();
        assert_eq!(protocol.t_end(), 20.0);
        assert_eq!(protocol.current_at(3.0), 2.0);
        assert!((protocol.current_at(15.0) - 2.5).abs() < 1e-15);
        assert_eq!(protocol.current_at(25.0), 5.0);
    }

    #[test]
    fn kappa_polynomial_and_temperature_factor() {
        let model = KappaModel {
            coeffs: vec![0.5, 2.0e-3, -1.0e-7],
            temp_coeff: 0.01,
        };
        let c = 1200.0;
        let expected = 0.5 + 2.0e-3 * c - 1.0e-7 * c * c;
        assert!((model.evaluate(c, 0.0) - expected).abs() < 1e-14);
        assert!((model.evaluate(c, 10.0) - expected * 1.1).abs() < 1e-13);
    }

    #[test]
    fn config_roundtrip_toml_and_json() {
        let config = SimulationConfig::demo();
        let toml_text = toml::to_string(&config).unwrap();
        let back: SimulationConfig = toml::from_str(&toml_text).unwrap();
        assert_eq!(back.cell.cs_max_pos, config.cell.cs_max_pos);
        let json_text = serde_json::to_string(&config).unwrap();
        let back: SimulationConfig = serde_json::from_str(&json_text).unwrap();
        assert_eq!(back.solver.newton_tol, config.solver.newton_tol);
        assert!(matches!(back.initial.ce0, CeSpec::Uniform(v) if v == 1000.0));
    }

    #[test]
    fn total_length_is_derived_when_omitted() {
        let mut cell = CellParameters::demo_cell();
        cell.l = 0.0;
        cell.normalize();
        assert_eq!(cell.l, 0.03);
        let mut cell = CellParameters::demo_cell();
        cell.l = 0.05;
        cell.normalize();
        assert!(cell.validate().is_err());
    }
}
