//! Shelving masks, interaction-graph rewiring, and target lattice patterns on
//! idealized triangular arrays.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coupling::CouplingMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("invalid mask character {0:?} (expected 'Q' or 'S')")]
    MaskChar(char),
    #[error("mask length {mask} does not match {ions} ions")]
    SizeMismatch { mask: usize, ions: usize },
    #[error("unknown lattice pattern {0:?}")]
    UnknownPattern(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SiteState {
    Qubit,
    Shelved,
}

/// Per-ion qubit/shelved flags, written as a `Q`/`S` string ("QSQ" = ion 2 shelved).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ShelveMask(Vec<SiteState>);

impl ShelveMask {
    pub fn all_qubit(n: usize) -> Self {
        Self(vec![SiteState::Qubit; n])
    }

    pub fn from_states(states: Vec<SiteState>) -> Self {
        Self(states)
    }

    pub fn from_shelved(n: usize, shelved: &[usize]) -> Self {
        let mut m = Self::all_qubit(n);
        for &i in shelved {
            m.0[i] = SiteState::Shelved;
        }
        m
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn states(&self) -> &[SiteState] {
        &self.0
    }

    pub fn is_shelved(&self, i: usize) -> bool {
        self.0[i] == SiteState::Shelved
    }

    pub fn survivors(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&i| !self.is_shelved(i)).collect()
    }

    pub fn shelved(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&i| self.is_shelved(i)).collect()
    }

    pub fn shelved_count(&self) -> usize {
        self.0.iter().filter(|s| **s == SiteState::Shelved).count()
    }

    /// Ion is shelved if shelved in either mask.
    pub fn union(&self, other: &Self) -> Self {
        Self(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| if *a == SiteState::Shelved || *b == SiteState::Shelved { SiteState::Shelved } else { SiteState::Qubit })
                .collect(),
        )
    }
}

impl fmt::Display for ShelveMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.0 {
            f.write_str(match s {
                SiteState::Qubit => "Q",
                SiteState::Shelved => "S",
            })?;
        }
        Ok(())
    }
}

impl FromStr for ShelveMask {
    type Err = LatticeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.chars()
            .map(|c| match c {
                'Q' | 'q' => Ok(SiteState::Qubit),
                'S' | 's' => Ok(SiteState::Shelved),
                other => Err(LatticeError::MaskChar(other)),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Self)
    }
}

impl Serialize for ShelveMask {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ShelveMask {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionGraph {
    /// Original labels of the ions that remain in the qubit subspace.
    pub survivors: Vec<usize>,
    /// Couplings among survivors, rad/s, in survivor order.
    pub couplings: DMatrix<f64>,
    pub threshold: Option<f64>,
}

impl InteractionGraph {
    pub fn n_spins(&self) -> usize {
        self.survivors.len()
    }

    pub fn from_couplings(j: &CouplingMatrix) -> Self {
        Self { survivors: (0..j.n_ions).collect(), couplings: j.j.clone(), threshold: None }
    }

    pub fn with_threshold(self, threshold: f64) -> Self {
        Self { threshold: Some(threshold), ..self }
    }

    /// Reduced index of an original ion label, if it survived.
    pub fn position_of(&self, ion: usize) -> Option<usize> {
        self.survivors.iter().position(|&s| s == ion)
    }
}

pub fn apply_mask(j: &CouplingMatrix, mask: &ShelveMask) -> Result<InteractionGraph, LatticeError> {
    if mask.len() != j.n_ions {
        return Err(LatticeError::SizeMismatch { mask: mask.len(), ions: j.n_ions });
    }
    let survivors = mask.survivors();
    let couplings = j.j.select_rows(&survivors).select_columns(&survivors);
    Ok(InteractionGraph { survivors, couplings, threshold: None })
}

/// Sites of a triangular lattice in lattice units with primitive vectors
/// `a₁ = (1, 0)` and `a₂ = (½, √3/2)`. Each site carries its integer
/// coordinates `(i, j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangularArray {
    pub cells: Vec<(i64, i64)>,
    pub coordinates: Vec<[f64; 2]>,
    /// Nearest-neighbour pairs `(a, b)`, `a < b`.
    pub adjacency: Vec<(usize, usize)>,
}

const NEIGHBOUR_OFFSETS: [(i64, i64); 6] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, -1), (-1, 1)];

impl TriangularArray {
    pub fn from_cells(cells: Vec<(i64, i64)>) -> Self {
        let index: BTreeMap<(i64, i64), usize> = cells.iter().enumerate().map(|(k, &c)| (c, k)).collect();
        let coordinates = cells
            .iter()
            .map(|&(i, j)| [i as f64 + 0.5 * j as f64, 0.5 * 3f64.sqrt() * j as f64])
            .collect();
        let mut adjacency = Vec::new();
        for (a, &(i, j)) in cells.iter().enumerate() {
            for (di, dj) in NEIGHBOUR_OFFSETS {
                if let Some(&b) = index.get(&(i + di, j + dj)) {
                    if a < b {
                        adjacency.push((a, b));
                    }
                }
            }
        }
        adjacency.sort_unstable();
        Self { cells, coordinates, adjacency }
    }

    /// `rows × cols` rhombus, site index `i + cols·j`.
    pub fn rhombus(cols: usize, rows: usize) -> Self {
        let cells = (0..rows as i64).flat_map(|j| (0..cols as i64).map(move |i| (i, j))).collect();
        Self::from_cells(cells)
    }

    /// Triangular patch with `side` sites along each edge.
    pub fn triangle(side: usize) -> Self {
        let s = side as i64;
        let cells = (0..s).flat_map(|j| (0..(s - j)).map(move |i| (i, j))).collect();
        Self::from_cells(cells)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn neighbours(&self, site: usize) -> Vec<usize> {
        self.adjacency
            .iter()
            .filter_map(|&(a, b)| if a == site { Some(b) } else if b == site { Some(a) } else { None })
            .collect()
    }

    /// A site is interior when all six lattice neighbours belong to the array.
    pub fn is_interior(&self, site: usize) -> bool {
        self.neighbours(site).len() == 6
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let (p, q) = (self.coordinates[a], self.coordinates[b]);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
    }

    /// Power-law couplings `J_ab = nn_coupling / r_ab^alpha` over all pairs.
    pub fn power_law_couplings(&self, nn_coupling: f64, alpha: f64) -> CouplingMatrix {
        CouplingMatrix::from_fn(self.len(), |a, b| nn_coupling / self.distance(a, b).powf(alpha))
    }
}

/// Shelves the `(i − j) ≡ 0 (mod 3)` sublattice of the √3×√3 superstructure.
pub fn honeycomb_mask(array: &TriangularArray) -> ShelveMask {
    ShelveMask(
        array
            .cells
            .iter()
            .map(|&(i, j)| if (i - j).rem_euclid(3) == 0 { SiteState::Shelved } else { SiteState::Qubit })
            .collect(),
    )
}

/// Shelves the sites with both coordinates even (one per 2×2 cell).
pub fn kagome_mask(array: &TriangularArray) -> ShelveMask {
    ShelveMask(
        array
            .cells
            .iter()
            .map(|&(i, j)| if i.rem_euclid(2) == 0 && j.rem_euclid(2) == 0 { SiteState::Shelved } else { SiteState::Qubit })
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Triangular,
    Honeycomb,
    Kagome,
}

impl Pattern {
    pub fn interior_degree(self) -> usize {
        match self {
            Pattern::Triangular => 6,
            Pattern::Honeycomb => 3,
            Pattern::Kagome => 4,
        }
    }

    pub fn mask(self, array: &TriangularArray) -> ShelveMask {
        match self {
            Pattern::Triangular => ShelveMask::all_qubit(array.len()),
            Pattern::Honeycomb => honeycomb_mask(array),
            Pattern::Kagome => kagome_mask(array),
        }
    }
}

impl FromStr for Pattern {
    type Err = LatticeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "triangular" => Ok(Pattern::Triangular),
            "honeycomb" => Ok(Pattern::Honeycomb),
            "kagome" | "kagomé" => Ok(Pattern::Kagome),
            _ => Err(LatticeError::UnknownPattern(s.to_string())),
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pattern::Triangular => "triangular",
            Pattern::Honeycomb => "honeycomb",
            Pattern::Kagome => "kagome",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub pattern: Pattern,
    pub pass: bool,
    pub threshold: f64,
    /// Degree → number of interior survivors with that degree.
    pub interior_degrees: BTreeMap<usize, usize>,
    pub boundary_degrees: BTreeMap<usize, usize>,
    /// Interior survivors (original labels) whose degree differs from the pattern.
    pub violating_sites: Vec<usize>,
}

/// Half the median nearest-neighbour |J| among survivors.
pub fn default_threshold(graph: &InteractionGraph, array: &TriangularArray) -> f64 {
    let mut nn: Vec<f64> = array
        .adjacency
        .iter()
        .filter_map(|&(a, b)| Some(graph.couplings[(graph.position_of(a)?, graph.position_of(b)?)].abs()))
        .collect();
    if nn.is_empty() {
        return 0.0;
    }
    nn.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = nn.len();
    let median = if m % 2 == 1 { nn[m / 2] } else { 0.5 * (nn[m / 2 - 1] + nn[m / 2]) };
    0.5 * median
}

/// Check the surviving nearest-neighbour graph against a lattice pattern.
///
/// An edge exists between surviving nearest neighbours whose |J| reaches
/// `threshold` (falling back to the graph's own threshold, then to
/// [`default_threshold`]). Only interior sites decide pass/fail.
pub fn verify_geometry(
    graph: &InteractionGraph,
    array: &TriangularArray,
    pattern: &str,
    threshold: Option<f64>,
) -> Result<GeometryReport, LatticeError> {
    let pattern: Pattern = pattern.parse()?;
    let threshold = threshold.or(graph.threshold).unwrap_or_else(|| default_threshold(graph, array));
    let mut degree = vec![0usize; array.len()];
    for &(a, b) in &array.adjacency {
        let (Some(ra), Some(rb)) = (graph.position_of(a), graph.position_of(b)) else { continue };
        if graph.couplings[(ra, rb)].abs() >= threshold {
            degree[a] += 1;
            degree[b] += 1;
        }
    }
    let mut interior_degrees = BTreeMap::new();
    let mut boundary_degrees = BTreeMap::new();
    let mut violating_sites = Vec::new();
    for &site in &graph.survivors {
        if array.is_interior(site) {
            *interior_degrees.entry(degree[site]).or_insert(0) += 1;
            if degree[site] != pattern.interior_degree() {
                violating_sites.push(site);
            }
        } else {
            *boundary_degrees.entry(degree[site]).or_insert(0) += 1;
        }
    }
    Ok(GeometryReport {
        pattern,
        pass: violating_sites.is_empty(),
        threshold,
        interior_degrees,
        boundary_degrees,
        violating_sites,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangle_couplings() -> CouplingMatrix {
        CouplingMatrix::from_fn(3, |i, j| [[0.0, 1.0, 2.0], [1.0, 0.0, 3.0], [2.0, 3.0, 0.0]][i][j])
    }

    #[test]
    fn mask_string_round_trip() {
        let m: ShelveMask = "QSQ".parse().unwrap();
        assert_eq!(m.shelved(), vec![1]);
        assert_eq!(m.to_string(), "QSQ");
        assert_eq!("QXQ".parse::<ShelveMask>(), Err(LatticeError::MaskChar('X')));
    }

    #[test]
    fn all_qubit_mask_is_identity() {
        let j = triangle_couplings();
        let g = apply_mask(&j, &ShelveMask::all_qubit(3)).unwrap();
        assert_eq!(g.couplings, j.j);
        assert_eq!(g.survivors, vec![0, 1, 2]);
    }

    #[test]
    fn shelving_third_ion_leaves_single_edge() {
        let j = triangle_couplings();
        let g = apply_mask(&j, &"QQS".parse().unwrap()).unwrap();
        assert_eq!(g.survivors, vec![0, 1]);
        assert_eq!(g.couplings[(0, 1)], 1.0);
        assert_eq!(g.couplings[(0, 0)], 0.0);
    }

    #[test]
    fn shelve_all_gives_empty_graph() {
        let g = apply_mask(&triangle_couplings(), &"SSS".parse().unwrap()).unwrap();
        assert_eq!(g.n_spins(), 0);
        assert_eq!(g.couplings.nrows(), 0);
    }

    #[test]
    fn size_mismatch() {
        assert!(matches!(
            apply_mask(&triangle_couplings(), &"QQ".parse().unwrap()),
            Err(LatticeError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn bulk_sites_have_six_neighbours() {
        let a = TriangularArray::rhombus(5, 5);
        assert!(a.is_interior(2 + 5 * 2));
        assert_eq!(a.neighbours(0).len(), 2);
        for &(x, y) in &a.adjacency {
            assert!((a.distance(x, y) - 1.0).abs() < 1e-12);
        }
    }

    fn surviving_nn_degree(array: &TriangularArray, mask: &ShelveMask, site: usize) -> usize {
        array.neighbours(site).into_iter().filter(|&n| !mask.is_shelved(n)).count()
    }

    #[test]
    fn honeycomb_nine_site_patch() {
        let a = TriangularArray::rhombus(3, 3);
        let m = honeycomb_mask(&a);
        assert_eq!(m.shelved_count(), 3);
        for s in m.survivors() {
            if a.is_interior(s) {
                assert_eq!(surviving_nn_degree(&a, &m, s), 3);
            }
        }
        let g = apply_mask(&a.power_law_couplings(1.0, 3.0), &m).unwrap();
        assert!(verify_geometry(&g, &a, "honeycomb", None).unwrap().pass);
    }

    #[test]
    fn honeycomb_smallest_triangle() {
        let a = TriangularArray::triangle(2);
        assert_eq!(a.len(), 3);
        let m = honeycomb_mask(&a);
        assert_eq!(m.shelved_count(), 1);
        let survivors = m.survivors();
        assert_eq!(survivors.len(), 2);
        assert!(a.adjacency.contains(&(survivors[0], survivors[1])));
    }

    #[test]
    fn kagome_patches() {
        let a = TriangularArray::rhombus(4, 4);
        let m = kagome_mask(&a);
        assert_eq!(m.shelved_count(), 4);
        for s in m.survivors() {
            if a.is_interior(s) {
                assert_eq!(surviving_nn_degree(&a, &m, s), 4);
            }
        }
        assert_eq!(kagome_mask(&TriangularArray::rhombus(2, 2)).shelved_count(), 1);
    }

    #[test]
    fn empty_array_gives_empty_masks() {
        let a = TriangularArray::rhombus(0, 0);
        assert!(honeycomb_mask(&a).is_empty());
        assert!(kagome_mask(&a).is_empty());
    }

    #[test]
    fn full_triangular_passes() {
        let a = TriangularArray::rhombus(6, 6);
        let g = InteractionGraph::from_couplings(&a.power_law_couplings(1.0, 1.5));
        let r = verify_geometry(&g, &a, "triangular", None).unwrap();
        assert!(r.pass);
        assert_eq!(r.interior_degrees.get(&6), Some(&16));
    }

    #[test]
    fn unknown_pattern_is_input_error() {
        let a = TriangularArray::rhombus(2, 2);
        let g = InteractionGraph::from_couplings(&a.power_law_couplings(1.0, 1.0));
        assert_eq!(
            verify_geometry(&g, &a, "square", None).unwrap_err(),
            LatticeError::UnknownPattern("square".into())
        );
    }
}
