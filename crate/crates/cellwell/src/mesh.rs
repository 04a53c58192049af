//! Finite volume meshes.
//!
//! The macro mesh covers the through thickness coordinate with uniform cells
//! inside each region. Region interfaces always coincide with cell faces,
//! and the seam coordinates l1 and l1 + delta are computed the same way on
//! both sides so the shared face is bitwise identical. Cell k owns the
//! interval between faces k and k + 1.
//!
//! Each electrode also carries a radial mesh over its representative
//! spherical particle, with shells of equal thickness and exact shell
//! volumes 4 pi (r_out^3 - r_in^3) / 3. Radial unknowns live at shell
//! midpoints.

use crate::error::{Error, Result};
use crate::params::{CellParameters, Region};

#[derive(Debug, Clone)]
pub struct MacroMesh {
    /// Cell faces, length n_total + 1. faces[0] = 0, faces[n_total] = l.
    pub faces: Vec<f64>,
    /// Cell centers, length n_total.
    pub centers: Vec<f64>,
    /// Cell widths, length n_total.
    pub widths: Vec<f64>,
    /// Region of each cell.
    pub regions: Vec<Region>,
    pub n_neg: usize,
    pub n_sep: usize,
    pub n_pos: usize,
}

impl MacroMesh {
    pub fn n_total(&self) -> usize {
        self.n_neg + self.n_sep + self.n_pos
    }

    pub fn neg_range(&self) -> std::ops::Range<usize> {
        0..self.n_neg
    }

    pub fn sep_range(&self) -> std::ops::Range<usize> {
        self.n_neg..self.n_neg + self.n_sep
    }

    pub fn pos_range(&self) -> std::ops::Range<usize> {
        self.n_neg + self.n_sep..self.n_total()
    }

    pub fn is_electrode(&self, cell: usize) -> bool {
        self.regions[cell] != Region::Separator
    }

    /// Center to center distance across interior face f (between cells f - 1
    /// and f), of which there are n_total - 1.
    pub fn center_spacing(&self, face: usize) -> f64 {
        self.centers[face] - self.centers[face - 1]
    }
}

#[derive(Debug, Clone)]
pub struct RadialMesh {
    /// Shell boundaries, length n_r + 1, from 0 to r_s.
    pub boundaries: Vec<f64>,
    /// Shell midpoints, length n_r.
    pub centers: Vec<f64>,
    /// Exact shell volumes 4 pi (r_out^3 - r_in^3) / 3, length n_r.
    pub shell_volumes: Vec<f64>,
    pub dr: f64,
}

impl RadialMesh {
    pub fn n_r(&self) -> usize {
        self.centers.len()
    }

    pub fn radius(&self) -> f64 {
        *self.boundaries.last().unwrap()
    }

    /// Total particle volume, equals the sum of the shell volumes exactly
    /// because the r^3 differences telescope.
    pub fn volume(&self) -> f64 {
        let r = self.radius();
        4.0 * std::f64::consts::PI * r * r * r / 3.0
    }
}

#[derive(Debug, Clone)]
pub struct Meshes {
    pub macro_mesh: MacroMesh,
    pub radial_neg: RadialMesh,
    pub radial_pos: RadialMesh,
}

impl Meshes {
    pub fn radial(&self, region: Region) -> Result<&RadialMesh> {
        match region {
            Region::Negative => Ok(&self.radial_neg),
            Region::Positive => Ok(&self.radial_pos),
            Region::Separator => Err(Error::Domain(
                "no particle mesh in the separator".into(),
            )),
        }
    }
}

fn build_radial(r_s: f64, n_r: usize) -> RadialMesh {
    let mut boundaries = Vec::with_capacity(n_r + 1);
    for j in 0..=n_r {
        boundaries.push(r_s * j as f64 / n_r as f64);
    }
    let centers: Vec<f64> = (0..n_r)
        .map(|j| 0.5 * (boundaries[j] + boundaries[j + 1]))
        .collect();
    let four_pi_thirds = 4.0 * std::f64::consts::PI / 3.0;
    let shell_volumes: Vec<f64> = (0..n_r)
        .map(|j| {
            let r0 = boundaries[j];
            let r1 = boundaries[j + 1];
            four_pi_thirds * (r1 * r1 * r1 - r0 * r0 * r0)
        })
        .collect();
    RadialMesh {
        boundaries,
        centers,
        shell_volumes,
        dr: r_s / n_r as f64,
    }
}

pub fn build_mesh(
    params: &CellParameters,
    n_neg: usize,
    n_sep: usize,
    n_pos: usize,
    n_r: usize,
) -> Result<Meshes> {
    for (name, n) in [("n_neg", n_neg), ("n_sep", n_sep), ("n_pos", n_pos)] {
        if n < 2 {
            return Err(Error::Mesh(format!("{name} must be at least 2, got {n}")));
        }
    }
    if n_r < 3 {
        return Err(Error::Mesh(format!("n_r must be at least 3, got {n_r}")));
    }
    for (name, len) in [
        ("l1", params.l1),
        ("delta", params.delta),
        ("l2", params.l2),
    ] {
        if !(len > 0.0) || !len.is_finite() {
            return Err(Error::Mesh(format!(
                "{name} must be positive to mesh, got {len}"
            )));
        }
    }

    let n_total = n_neg + n_sep + n_pos;
    let mut faces = Vec::with_capacity(n_total + 1);
    for k in 0..=n_neg {
        faces.push(params.l1 * k as f64 / n_neg as f64);
    }
    for k in 1..=n_sep {
        faces.push(params.l1 + params.delta * k as f64 / n_sep as f64);
    }
    let l1d = params.l1 + params.delta;
    for k in 1..=n_pos {
        faces.push(l1d + params.l2 * k as f64 / n_pos as f64);
    }

    let centers: Vec<f64> = (0..n_total)
        .map(|i| 0.5 * (faces[i] + faces[i + 1]))
        .collect();
    let widths: Vec<f64> = (0..n_total).map(|i| faces[i + 1] - faces[i]).collect();
    if widths.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::Mesh("degenerate cell width".into()));
    }
    let mut regions = Vec::with_capacity(n_total);
    regions.extend(std::iter::repeat(Region::Negative).take(n_neg));
    regions.extend(std::iter::repeat(Region::Separator).take(n_sep));
    regions.extend(std::iter::repeat(Region::Positive).take(n_pos));

    Ok(Meshes {
        macro_mesh: MacroMesh {
            faces,
            centers,
            widths,
            regions,
            n_neg,
            n_sep,
            n_pos,
        },
        radial_neg: build_radial(params.r_s_neg, n_r),
        radial_pos: build_radial(params.r_s_pos, n_r),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seam_faces_are_bitwise_exact() {
        let params = CellParameters::demo_cell();
        let meshes = build_mesh(&params, 7, 3, 5, 8).unwrap();
        let m = &meshes.macro_mesh;
        assert_eq!(m.faces[0], 0.0);
        assert_eq!(m.faces[7], params.l1);
        assert_eq!(m.faces[10], params.l1 + params.delta);
        assert_eq!(m.faces[15], params.l1 + params.delta + params.l2);
        assert_eq!(m.faces.len(), 16);
        assert_eq!(m.n_total(), 15);
    }

    #[test]
    fn widths_sum_to_the_region_thicknesses() {
        let params = CellParameters::demo_cell();
        let meshes = build_mesh(&params, 9, 4, 11, 5).unwrap();
        let m = &meshes.macro_mesh;
        let sum_neg: f64 = m.neg_range().map(|i| m.widths[i]).sum();
        let sum_sep: f64 = m.sep_range().map(|i| m.widths[i]).sum();
        let sum_pos: f64 = m.pos_range().map(|i| m.widths[i]).sum();
        assert!((sum_neg - params.l1).abs() < 1e-15);
        assert!((sum_sep - params.delta).abs() < 1e-15);
        assert!((sum_pos - params.l2).abs() < 1e-15);
        for i in m.neg_range() {
            assert_eq!(m.regions[i], Region::Negative);
        }
        for i in m.sep_range() {
            assert_eq!(m.regions[i], Region::Separator);
        }
        for i in m.pos_range() {
            assert_eq!(m.regions[i], Region::Positive);
        }
    }

    #[test]
    fn centers_sit_between_their_faces() {
        let params = CellParameters::demo_cell();
        let meshes = build_mesh(&params, 4, 2, 4, 5).unwrap();
        let m = &meshes.macro_mesh;
        for i in 0..m.n_total() {
            assert!(m.faces[i] < m.centers[i] && m.centers[i] < m.faces[i + 1]);
            assert!((m.widths[i] - (m.faces[i + 1] - m.faces[i])).abs() == 0.0);
        }
    }

    #[test]
    fn radial_shell_volumes_fill_the_sphere() {
        let mesh = build_radial(5e-3, 13);
        let total: f64 = mesh.shell_volumes.iter().sum();
        let exact = mesh.volume();
        assert!((total - exact).abs() < 1e-12 * exact);
        assert_eq!(mesh.boundaries[0], 0.0);
        assert_eq!(mesh.radius(), 5e-3);
        assert_eq!(mesh.n_r(), 13);
    }

    #[test]
    fn counts_below_the_minimum_are_rejected() {
        let params = CellParameters::demo_cell();
        assert!(matches!(
            build_mesh(&params, 1, 4, 4, 5),
            Err(Error::Mesh(_))
        ));
        assert!(matches!(
            build_mesh(&params, 4, 4, 4, 2),
            Err(Error::Mesh(_))
        ));
    }

    #[test]
    fn mesh_regions_agree_with_point_lookup() {
        let params = CellParameters::demo_cell();
        let meshes = build_mesh(&params, 6, 5, 7, 4).unwrap();
        let m = &meshes.macro_mesh;
        for i in 0..m.n_total() {
            assert_eq!(m.regions[i], params.region_of(m.centers[i]).unwrap());
        }
    }
}
