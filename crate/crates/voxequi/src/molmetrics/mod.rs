//! Chemistry-free molecular evaluation.
//!
//! Bonds are re-inferred from interatomic distances against a shipped band
//! table; stability, validity, and uniqueness follow the bonded graph;
//! distribution distances (TV, W1, KL) and natively computable properties
//! feed the generation-quality reports. "Valid" here is a connectivity plus
//! max-valency proxy, deliberately weaker than toolkit sanitization.

pub mod canon;
pub mod dist;

use crate::error::{Result, VoxError};
use crate::geom::{sym_eigenvalues, Mat3, Vec3};
use crate::mol_io::{Element, Molecule};
use std::collections::HashMap;

/// Distance band for one (element pair, order).
#[derive(Clone, Copy, Debug)]
pub struct BondBand {
    pub order: u8,
    pub length: f64,
    pub tolerance: f64,
}

/// Per-pair bond bands and per-element allowed valencies, loaded from a
/// plain-text data file so the chemistry is auditable and swappable.
#[derive(Clone, Debug)]
pub struct BondTable {
    bands: HashMap<(Element, Element), Vec<BondBand>>,
    valencies: HashMap<Element, Vec<u32>>,
}

impl BondTable {
    /// The table shipped with the crate.
    pub fn shipped() -> BondTable {
        BondTable::parse(include_str!("../../data/bond_table.txt"))
            .expect("shipped bond table must parse")
    }

    pub fn parse(text: &str) -> Result<BondTable> {
        let mut bands: HashMap<(Element, Element), Vec<BondBand>> = HashMap::new();
        let mut valencies = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut tok = line.split_whitespace();
            let kind = tok.next().unwrap();
            let bad = |msg: &str| VoxError::Parse { line: lineno + 1, msg: msg.into() };
            match kind {
                "VALENCE" => {
                    let el = Element::from_symbol(tok.next().ok_or(bad("missing element"))?)?;
                    let vals: Vec<u32> = tok
                        .map(|t| t.parse().map_err(|_| bad("bad valency")))
                        .collect::<Result<_>>()?;
                    if vals.is_empty() {
                        return Err(bad("empty valency list"));
                    }
                    valencies.insert(el, vals);
                }
                "BOND" => {
                    let a = Element::from_symbol(tok.next().ok_or(bad("missing element"))?)?;
                    let b = Element::from_symbol(tok.next().ok_or(bad("missing element"))?)?;
                    let order: u8 = tok
                        .next()
                        .ok_or(bad("missing order"))?
                        .parse()
                        .map_err(|_| bad("bad order"))?;
                    let length: f64 = tok
                        .next()
                        .ok_or(bad("missing length"))?
                        .parse()
                        .map_err(|_| bad("bad length"))?;
                    let tolerance: f64 = tok
                        .next()
                        .ok_or(bad("missing tolerance"))?
                        .parse()
                        .map_err(|_| bad("bad tolerance"))?;
                    if length <= 0.0 || tolerance <= 0.0 {
                        return Err(bad("length and tolerance must be positive"));
                    }
                    bands
                        .entry(pair_key(a, b))
                        .or_default()
                        .push(BondBand { order, length, tolerance });
                }
                other => return Err(bad(&format!("unknown record `{other}`"))),
            }
        }
        for (pair, list) in &mut bands {
            list.sort_by(|x, y| x.length.partial_cmp(&y.length).unwrap());
            for w in list.windows(2) {
                if w[0].length + w[0].tolerance >= w[1].length - w[1].tolerance {
                    return Err(VoxError::Argument(format!(
                        "overlapping bond bands for {:?} orders {} and {}",
                        pair, w[0].order, w[1].order
                    )));
                }
            }
        }
        Ok(BondTable { bands, valencies })
    }

    /// Highest bond order whose band contains the distance, if any.
    pub fn classify(&self, a: Element, b: Element, distance: f64) -> Option<u8> {
        self.bands.get(&pair_key(a, b)).and_then(|list| {
            list.iter()
                .filter(|band| (distance - band.length).abs() <= band.tolerance)
                .map(|band| band.order)
                .max()
        })
    }

    pub fn allowed_valencies(&self, e: Element) -> &[u32] {
        self.valencies.get(&e).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn max_valency(&self, e: Element) -> u32 {
        self.allowed_valencies(e).iter().copied().max().unwrap_or(0)
    }
}

fn pair_key(a: Element, b: Element) -> (Element, Element) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Bonded molecular graph: typed nodes, ordered bonds.
#[derive(Clone, Debug, PartialEq)]
pub struct MolGraph {
    pub elements: Vec<Element>,
    /// (i, j, order) with i < j, unique pairs.
    pub bonds: Vec<(usize, usize, u8)>,
}

impl MolGraph {
    pub fn n_atoms(&self) -> usize {
        self.elements.len()
    }

    /// Sum of bond orders at each atom.
    pub fn valencies(&self) -> Vec<u32> {
        let mut v = vec![0u32; self.elements.len()];
        for &(i, j, order) in &self.bonds {
            v[i] += order as u32;
            v[j] += order as u32;
        }
        v
    }

    pub fn adjacency(&self) -> Vec<Vec<(usize, u8)>> {
        let mut adj = vec![Vec::new(); self.elements.len()];
        for &(i, j, order) in &self.bonds {
            adj[i].push((j, order));
            adj[j].push((i, order));
        }
        adj
    }

    pub fn n_components(&self) -> usize {
        let adj = self.adjacency();
        let n = self.elements.len();
        let mut seen = vec![false; n];
        let mut comps = 0;
        for start in 0..n {
            if seen[start] {
                continue;
            }
            comps += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(u) = stack.pop() {
                for &(v, _) in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
        }
        comps
    }

    /// Induced subgraph on non-hydrogen atoms (indices remapped).
    pub fn heavy_subgraph(&self) -> MolGraph {
        let mut map = vec![usize::MAX; self.elements.len()];
        let mut elements = Vec::new();
        for (i, e) in self.elements.iter().enumerate() {
            if e.is_heavy() {
                map[i] = elements.len();
                elements.push(*e);
            }
        }
        let bonds = self
            .bonds
            .iter()
            .filter(|(i, j, _)| map[*i] != usize::MAX && map[*j] != usize::MAX)
            .map(|&(i, j, order)| (map[i], map[j], order))
            .collect();
        MolGraph { elements, bonds }
    }
}

/// Assign each atom pair the highest bond order whose band contains the
/// interatomic distance.
pub fn infer_bonds(mol: &Molecule, table: &BondTable) -> MolGraph {
    let n = mol.atoms.len();
    let mut bonds = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (mol.atoms[i].position - mol.atoms[j].position).norm();
            if let Some(order) = table.classify(mol.atoms[i].element, mol.atoms[j].element, d) {
                bonds.push((i, j, order));
            }
        }
    }
    MolGraph { elements: mol.atoms.iter().map(|a| a.element).collect(), bonds }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StabilityReport {
    /// Fraction of atoms whose valency is in the allowed set.
    pub atom_stable_fraction: f64,
    pub molecule_stable: bool,
    /// Connectivity + max-valency proxy; weaker than toolkit sanitization.
    pub valid: bool,
}

pub fn stability_and_validity(g: &MolGraph, table: &BondTable) -> StabilityReport {
    let valencies = g.valencies();
    let stable_atoms = g
        .elements
        .iter()
        .zip(&valencies)
        .filter(|(e, v)| table.allowed_valencies(**e).contains(*v))
        .count();
    let none_over_max = g
        .elements
        .iter()
        .zip(&valencies)
        .all(|(e, v)| *v <= table.max_valency(*e));
    let connected = g.n_components() == 1;
    StabilityReport {
        atom_stable_fraction: stable_atoms as f64 / g.n_atoms().max(1) as f64,
        molecule_stable: stable_atoms == g.n_atoms(),
        valid: connected && none_over_max,
    }
}

/// Natively computable molecular descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct PropertyVector {
    pub heavy_atom_count: usize,
    /// Cycle rank of the heavy-atom graph.
    pub ring_count: usize,
    /// N or O atoms with at least one bonded hydrogen.
    pub hbond_donors: usize,
    /// Carbons with exactly four single bonds, over all carbons.
    pub sp3_carbon_fraction: f64,
    /// Gyration-tensor anisotropy of heavy atoms in [0, 1].
    pub asphericity: f64,
    /// False when fewer than two heavy atoms leave the gyration tensor
    /// trivially rank-deficient (asphericity reported as 0).
    pub asphericity_defined: bool,
    pub radius_of_gyration: f64,
}

impl PropertyVector {
    /// Named scalar views, for histogramming and reports.
    pub fn named(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("heavy_atoms", self.heavy_atom_count as f64),
            ("ring_count", self.ring_count as f64),
            ("hbond_donors", self.hbond_donors as f64),
            ("sp3_carbon_fraction", self.sp3_carbon_fraction),
            ("asphericity", self.asphericity),
            ("radius_of_gyration", self.radius_of_gyration),
        ]
    }
}

pub fn molecular_properties(mol: &Molecule, g: &MolGraph) -> Result<PropertyVector> {
    if mol.atoms.len() != g.n_atoms() {
        return Err(VoxError::Shape("graph does not match molecule".into()));
    }
    let heavy: Vec<Vec3> = mol
        .atoms
        .iter()
        .filter(|a| a.element.is_heavy())
        .map(|a| a.position)
        .collect();
    let heavy_atom_count = heavy.len();

    // cycle rank of the heavy-atom graph: |E| - |V| + components
    let hg = g.heavy_subgraph();
    let ring_count = (hg.bonds.len() + hg.n_components()).saturating_sub(hg.n_atoms());

    let adj = g.adjacency();
    let mut hbond_donors = 0usize;
    for (i, e) in g.elements.iter().enumerate() {
        if matches!(e, Element::N | Element::O)
            && adj[i].iter().any(|&(j, _)| g.elements[j] == Element::H)
        {
            hbond_donors += 1;
        }
    }

    let mut carbons = 0usize;
    let mut sp3 = 0usize;
    for (i, e) in g.elements.iter().enumerate() {
        if *e == Element::C {
            carbons += 1;
            let all_single = adj[i].iter().all(|&(_, order)| order == 1);
            let order_sum: u32 = adj[i].iter().map(|&(_, o)| o as u32).sum();
            if all_single && order_sum == 4 {
                sp3 += 1;
            }
        }
    }
    let sp3_carbon_fraction = if carbons > 0 { sp3 as f64 / carbons as f64 } else { 0.0 };

    let (asphericity, asphericity_defined, radius_of_gyration) = gyration_shape(&heavy);

    Ok(PropertyVector {
        heavy_atom_count,
        ring_count,
        hbond_donors,
        sp3_carbon_fraction,
        asphericity,
        asphericity_defined,
        radius_of_gyration,
    })
}

/// Asphericity and radius of gyration from the gyration tensor
/// eigenvalues l1 >= l2 >= l3:
/// `A = [(l1-l2)^2 + (l2-l3)^2 + (l3-l1)^2] / (2 (l1+l2+l3)^2)`.
fn gyration_shape(points: &[Vec3]) -> (f64, bool, f64) {
    if points.len() < 2 {
        return (0.0, false, 0.0);
    }
    let n = points.len() as f64;
    let mut c = Vec3::ZERO;
    for p in points {
        c = c + *p;
    }
    c = c * (1.0 / n);
    let mut s = [[0.0f64; 3]; 3];
    for p in points {
        let d = *p - c;
        let v = [d.x, d.y, d.z];
        for i in 0..3 {
            for j in 0..3 {
                s[i][j] += v[i] * v[j] / n;
            }
        }
    }
    let ev = sym_eigenvalues(&Mat3(s));
    let trace = ev[0] + ev[1] + ev[2];
    if trace <= 0.0 {
        return (0.0, false, 0.0);
    }
    let num = (ev[0] - ev[1]).powi(2) + (ev[1] - ev[2]).powi(2) + (ev[2] - ev[0]).powi(2);
    let asph = num / (2.0 * trace * trace);
    (asph.clamp(0.0, 1.0), true, trace.sqrt())
}
