//! Aggregation of molecular-surface vertex features onto residues.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Contact distance used to map surface vertices to residues, in Å.
pub const DEFAULT_VERTEX_THRESHOLD: f64 = 2.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceVertex {
    pub position: [f64; 3],
    pub shape_index: f64,
    pub charge: f64,
    pub hbond: f64,
    pub hydrophobicity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ResidueSurfaceFeatures {
    pub n_vertices: usize,
    pub shape_index: Option<f64>,
    pub charge: Option<f64>,
    pub hbond: Option<f64>,
    pub hydrophobicity: Option<f64>,
}

impl ResidueSurfaceFeatures {
    pub fn channels(&self) -> [Option<f64>; 4] {
        [self.shape_index, self.charge, self.hbond, self.hydrophobicity]
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Maps each vertex to every residue with an atom within `threshold` Å and
/// aggregates per residue: mean shape index and hydrophobicity, summed charge
/// and hydrogen bonding. Residues without vertices get missing features.
pub fn aggregate_surface_vertices(
    vertices: &[SurfaceVertex],
    residue_atoms: &[Vec<[f64; 3]>],
    threshold: f64,
) -> Result<Vec<ResidueSurfaceFeatures>> {
    if residue_atoms.is_empty() {
        return Err(Error::Empty("residue list"));
    }
    if !threshold.is_finite() || threshold < 0.0 {
        return Err(invalid("vertex threshold must be a finite non-negative distance"));
    }
    if vertices.iter().any(|v| v.position.iter().any(|c| !c.is_finite())) {
        return Err(Error::NonFinite {
            where_: "surface vertex coordinates".into(),
        });
    }
    let t2 = threshold * threshold;
    residue_atoms
        .iter()
        .map(|atoms| {
            let mut n = 0usize;
            let (mut si, mut ch, mut hb, mut hy) = (0.0, 0.0, 0.0, 0.0);
            for v in vertices {
                if atoms.iter().any(|a| dist2(a, &v.position) <= t2) {
                    n += 1;
                    si += v.shape_index;
                    ch += v.charge;
                    hb += v.hbond;
                    hy += v.hydrophobicity;
                }
            }
            Ok(if n == 0 {
                ResidueSurfaceFeatures::default()
            } else {
                ResidueSurfaceFeatures {
                    n_vertices: n,
                    shape_index: Some(si / n as f64),
                    charge: Some(ch),
                    hbond: Some(hb),
                    hydrophobicity: Some(hy / n as f64),
                }
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn vertex(x: f64, si: f64, ch: f64) -> SurfaceVertex {
        SurfaceVertex {
            position: [x, 0.0, 0.0],
            shape_index: si,
            charge: ch,
            hbond: 1.0,
            hydrophobicity: si * 2.0,
        }
    }

    #[test]
    fn threshold_boundary() {
        let atoms = vec![vec![[0.0, 0.0, 0.0]]];
        let near = aggregate_surface_vertices(&[vertex(2.7, 0.1, 0.0)], &atoms, DEFAULT_VERTEX_THRESHOLD).unwrap();
        assert_eq!(near[0].n_vertices, 1);
        let far = aggregate_surface_vertices(&[vertex(2.9, 0.1, 0.0)], &atoms, DEFAULT_VERTEX_THRESHOLD).unwrap();
        assert_eq!(far[0].n_vertices, 0);
    }

    #[test]
    fn mean_and_sum_rules() {
        let atoms = vec![vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], vec![[100.0, 0.0, 0.0]]];
        let vs = [vertex(0.5, 0.2, 1.0), vertex(1.5, 0.4, -0.5)];
        let out = aggregate_surface_vertices(&vs, &atoms, 2.8).unwrap();
        let r = out[0];
        assert_eq!(r.n_vertices, 2);
        assert!((r.shape_index.unwrap() - 0.3).abs() < 1e-15);
        assert!((r.charge.unwrap() - 0.5).abs() < 1e-15);
        assert!((r.hbond.unwrap() - 2.0).abs() < 1e-15);
        assert!((r.hydrophobicity.unwrap() - 0.6).abs() < 1e-15);
        // buried residue
        assert_eq!(out[1], ResidueSurfaceFeatures::default());
        assert!(out[1].channels().iter().all(Option::is_none));
    }

    #[test]
    fn zero_threshold_maps_nothing_off_atom() {
        let atoms = vec![vec![[0.0, 0.0, 0.0]], vec![[3.0, 1.0, 0.0]]];
        let vs = [vertex(0.5, 0.2, 1.0), vertex(2.0, 0.4, -0.5)];
        let out = aggregate_surface_vertices(&vs, &atoms, 0.0).unwrap();
        assert!(out.iter().all(|r| r.n_vertices == 0));
    }

    #[test]
    fn errors() {
        assert!(aggregate_surface_vertices(&[], &[], 2.8).is_err());
        assert!(aggregate_surface_vertices(&[], &[vec![]], -1.0).is_err());
        let bad = vertex(f64::NAN, 0.0, 0.0);
        assert!(aggregate_surface_vertices(&[bad], &[vec![]], 2.8).is_err());
    }
}
