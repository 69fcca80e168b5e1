//! Molecule parsing, writing, and synthetic dataset generation.
//!
//! Formats: XYZ (read/write) and SDF V2000 (read-only; the bond block is
//! retained as a reference graph but metrics always re-infer bonds).
//! Synthetic datasets cover chain, ring, and rigid-template motifs, with an
//! optional closure pass that adds all 24 octahedral rotations of every
//! molecule so exact-equivariance oracles have symmetric data to stand on.

use crate::error::{Result, VoxError};
use crate::geom::{octahedral_group, rotate_points, sample_haar_rotation, RotationCenter, Vec3};
use rand::Rng as _;

/// The eight atom channels, in grid-channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Element {
    C,
    H,
    O,
    N,
    F,
    S,
    Cl,
    Br,
}

impl Element {
    pub const ALL: [Element; 8] = [
        Element::C,
        Element::H,
        Element::O,
        Element::N,
        Element::F,
        Element::S,
        Element::Cl,
        Element::Br,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            Element::C => "C",
            Element::H => "H",
            Element::O => "O",
            Element::N => "N",
            Element::F => "F",
            Element::S => "S",
            Element::Cl => "Cl",
            Element::Br => "Br",
        }
    }

    pub fn from_symbol(s: &str) -> Result<Element> {
        match s {
            "C" => Ok(Element::C),
            "H" => Ok(Element::H),
            "O" => Ok(Element::O),
            "N" => Ok(Element::N),
            "F" => Ok(Element::F),
            "S" => Ok(Element::S),
            "Cl" => Ok(Element::Cl),
            "Br" => Ok(Element::Br),
            other => Err(VoxError::Element(other.to_string())),
        }
    }

    /// Index into the canonical channel order.
    pub fn channel(self) -> usize {
        match self {
            Element::C => 0,
            Element::H => 1,
            Element::O => 2,
            Element::N => 3,
            Element::F => 4,
            Element::S => 5,
            Element::Cl => 6,
            Element::Br => 7,
        }
    }

    pub fn is_heavy(self) -> bool {
        self != Element::H
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Atom {
    pub element: Element,
    /// Position in Angstroms.
    pub position: Vec3,
}

/// A chemistry-free geometric molecule: typed atoms at 3D positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Molecule {
    pub atoms: Vec<Atom>,
    pub name: Option<String>,
    /// Bond block from an SDF source, kept for reference only; metrics
    /// never read it.
    pub reference_bonds: Option<Vec<(usize, usize, u8)>>,
}

impl Molecule {
    pub fn new(atoms: Vec<Atom>) -> Result<Molecule> {
        if atoms.is_empty() {
            return Err(VoxError::Argument("molecule must have at least one atom".into()));
        }
        if atoms.iter().any(|a| !a.position.is_finite()) {
            return Err(VoxError::Argument("atom positions must be finite".into()));
        }
        Ok(Molecule { atoms, name: None, reference_bonds: None })
    }

    pub fn centroid(&self) -> Vec3 {
        let mut c = Vec3::ZERO;
        for a in &self.atoms {
            c = c + a.position;
        }
        c * (1.0 / self.atoms.len() as f64)
    }

    /// Translate the centroid to the origin (the voxel-grid center).
    pub fn centered(&self) -> Molecule {
        self.translated(-self.centroid())
    }

    pub fn translated(&self, offset: Vec3) -> Molecule {
        let mut out = self.clone();
        for a in &mut out.atoms {
            a.position = a.position + offset;
        }
        out
    }

    /// Largest atom distance from the origin.
    pub fn max_radius(&self) -> f64 {
        self.atoms.iter().map(|a| a.position.norm()).fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MolFormat {
    Xyz,
    SdfV2000,
}

/// Parse one molecule from text in the declared format.
pub fn parse_molecule(text: &str, format: MolFormat) -> Result<Molecule> {
    match format {
        MolFormat::Xyz => parse_xyz(text),
        MolFormat::SdfV2000 => parse_sdf(text),
    }
}

fn parse_xyz(text: &str) -> Result<Molecule> {
    let mut lines = text.lines();
    let count_line = lines
        .next()
        .ok_or(VoxError::Parse { line: 1, msg: "empty input".into() })?;
    let count: usize = count_line.trim().parse().map_err(|_| VoxError::Parse {
        line: 1,
        msg: format!("expected atom count, found `{}`", count_line.trim()),
    })?;
    if count == 0 {
        return Err(VoxError::Parse { line: 1, msg: "atom count must be >= 1".into() });
    }
    let comment = lines
        .next()
        .ok_or(VoxError::Parse { line: 2, msg: "missing comment line".into() })?;
    let mut atoms = Vec::with_capacity(count);
    for i in 0..count {
        let lineno = 3 + i;
        let line = lines.next().ok_or(VoxError::Parse {
            line: lineno,
            msg: format!("expected {count} atom lines, found {i}"),
        })?;
        let mut tok = line.split_whitespace();
        let sym = tok.next().ok_or(VoxError::Parse {
            line: lineno,
            msg: "empty atom line".into(),
        })?;
        let element = Element::from_symbol(sym)?;
        let mut coord = [0.0f64; 3];
        for c in &mut coord {
            let t = tok.next().ok_or(VoxError::Parse {
                line: lineno,
                msg: "atom line needs element and 3 coordinates".into(),
            })?;
            *c = t.parse().map_err(|_| VoxError::Parse {
                line: lineno,
                msg: format!("bad coordinate `{t}`"),
            })?;
        }
        atoms.push(Atom { element, position: Vec3::new(coord[0], coord[1], coord[2]) });
    }
    let mut mol = Molecule::new(atoms)?;
    if !comment.trim().is_empty() {
        mol.name = Some(comment.trim().to_string());
    }
    Ok(mol)
}

fn parse_sdf(text: &str) -> Result<Molecule> {
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() < 4 {
        return Err(VoxError::Parse { line: lines.len().max(1), msg: "truncated SDF header".into() });
    }
    let name = lines[0].trim();
    let counts = lines[3];
    if !counts.contains("V2000") {
        return Err(VoxError::Parse { line: 4, msg: "only V2000 counts lines are supported".into() });
    }
    let mut tok = counts.split_whitespace();
    let natoms: usize = tok
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or(VoxError::Parse { line: 4, msg: "bad atom count in counts line".into() })?;
    let nbonds: usize = tok
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or(VoxError::Parse { line: 4, msg: "bad bond count in counts line".into() })?;
    if natoms == 0 {
        return Err(VoxError::Parse { line: 4, msg: "atom count must be >= 1".into() });
    }
    let mut atoms = Vec::with_capacity(natoms);
    for i in 0..natoms {
        let lineno = 5 + i;
        let line = lines.get(4 + i).ok_or(VoxError::Parse {
            line: lineno,
            msg: format!("atom block ended after {i} of {natoms} atoms"),
        })?;
        let mut tok = line.split_whitespace();
        let mut coord = [0.0f64; 3];
        for c in &mut coord {
            let t = tok.next().ok_or(VoxError::Parse {
                line: lineno,
                msg: format!("atom block ended after {i} of {natoms} atoms"),
            })?;
            *c = t.parse().map_err(|_| VoxError::Parse {
                line: lineno,
                msg: format!("bad coordinate `{t}` in atom block"),
            })?;
        }
        let sym = tok.next().ok_or(VoxError::Parse {
            line: lineno,
            msg: "missing element symbol in atom block".into(),
        })?;
        let element = Element::from_symbol(sym)?;
        atoms.push(Atom { element, position: Vec3::new(coord[0], coord[1], coord[2]) });
    }
    let mut bonds = Vec::with_capacity(nbonds);
    for i in 0..nbonds {
        let lineno = 5 + natoms + i;
        let line = lines.get(4 + natoms + i).ok_or(VoxError::Parse {
            line: lineno,
            msg: format!("bond block ended after {i} of {nbonds} bonds"),
        })?;
        let mut tok = line.split_whitespace();
        let mut idx = [0usize; 3];
        for v in &mut idx {
            let t = tok.next().ok_or(VoxError::Parse {
                line: lineno,
                msg: "bond line needs two indices and an order".into(),
            })?;
            *v = t.parse().map_err(|_| VoxError::Parse {
                line: lineno,
                msg: format!("bad bond field `{t}`"),
            })?;
        }
        if idx[0] == 0 || idx[1] == 0 || idx[0] > natoms || idx[1] > natoms {
            return Err(VoxError::Parse { line: lineno, msg: "bond index out of range".into() });
        }
        bonds.push((idx[0] - 1, idx[1] - 1, idx[2] as u8));
    }
    let mut mol = Molecule::new(atoms)?;
    if !name.is_empty() {
        mol.name = Some(name.to_string());
    }
    mol.reference_bonds = Some(bonds);
    Ok(mol)
}

/// Serialize a molecule as XYZ. Coordinates round-trip to <= 1e-6 A.
pub fn write_molecule(mol: &Molecule) -> String {
    let mut out = String::new();
    out.push_str(&mol.atoms.len().to_string());
    out.push('\n');
    if let Some(name) = &mol.name {
        out.push_str(name);
    }
    for atom in &mol.atoms {
        out.push('\n');
        let p = atom.position;
        out.push_str(&format!("{} {:.6} {:.6} {:.6}", atom.element.symbol(), p.x, p.y, p.z));
    }
    out
}

/// A list of molecules, optionally closed under the octahedral group.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub molecules: Vec<Molecule>,
    pub group_closed: bool,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.molecules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.molecules.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Motif {
    Chain,
    Ring,
    Template,
}

/// Parameters for synthetic dataset generation.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub n_molecules: usize,
    pub atoms_min: usize,
    pub atoms_max: usize,
    pub motif: Motif,
    /// Consecutive-atom distance for chains; edge length for rings.
    pub bond_length: f64,
    pub jitter: f64,
    /// Element palette for chain/ring atoms; templates carry their own.
    pub elements: Vec<Element>,
    /// Add all 24 octahedral rotations of every molecule.
    pub group_closed: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_molecules: 10,
            atoms_min: 3,
            atoms_max: 6,
            motif: Motif::Chain,
            bond_length: 1.54,
            jitter: 0.0,
            elements: vec![Element::C, Element::O, Element::N],
            group_closed: false,
        }
    }
}

/// The shipped rigid-fragment template library.
pub fn template_library() -> Vec<Molecule> {
    const RAW: [(&str, &str); 10] = [
        ("methane", include_str!("../data/templates/methane.xyz")),
        ("water", include_str!("../data/templates/water.xyz")),
        ("ammonia", include_str!("../data/templates/ammonia.xyz")),
        ("ring6", include_str!("../data/templates/ring6.xyz")),
        ("ethane", include_str!("../data/templates/ethane.xyz")),
        ("formaldehyde", include_str!("../data/templates/formaldehyde.xyz")),
        ("methanethiol", include_str!("../data/templates/methanethiol.xyz")),
        ("chloromethane", include_str!("../data/templates/chloromethane.xyz")),
        ("fluoromethane", include_str!("../data/templates/fluoromethane.xyz")),
        ("bromomethane", include_str!("../data/templates/bromomethane.xyz")),
    ];
    RAW.iter()
        .map(|(name, text)| {
            let mut m = parse_xyz(text).expect("template library must parse");
            m.name = Some((*name).to_string());
            m
        })
        .collect()
}

/// Deterministically generate a synthetic dataset from `(spec, seed)`.
pub fn gen_synthetic_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    if spec.bond_length <= 0.0 {
        return Err(VoxError::Argument("bond_length must be positive".into()));
    }
    if spec.atoms_min > spec.atoms_max || spec.atoms_min == 0 {
        return Err(VoxError::Argument("bad atoms_per_molecule range".into()));
    }
    match spec.motif {
        Motif::Chain if spec.atoms_min < 2 => {
            return Err(VoxError::Argument("chain motif needs at least 2 atoms".into()))
        }
        Motif::Ring if spec.atoms_min < 3 => {
            return Err(VoxError::Argument("infeasible ring geometry: need at least 3 atoms".into()))
        }
        _ => {}
    }
    if spec.elements.is_empty() && spec.motif != Motif::Template {
        return Err(VoxError::Argument("element palette must be non-empty".into()));
    }

    let templates = if spec.motif == Motif::Template { template_library() } else { Vec::new() };
    let mut molecules = Vec::with_capacity(spec.n_molecules);
    for idx in 0..spec.n_molecules {
        let mut rng = crate::rng::stream(seed, &[0x6d6f /* synth */, idx as u64]);
        let natoms = rng.gen_range(spec.atoms_min..=spec.atoms_max);
        let mut mol = match spec.motif {
            Motif::Chain => gen_chain(natoms, spec, &mut rng)?,
            Motif::Ring => gen_ring(natoms, spec, &mut rng)?,
            Motif::Template => {
                let t = &templates[rng.gen_range(0..templates.len())];
                let mut m = t.clone();
                for a in &mut m.atoms {
                    let j = Vec3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    );
                    a.position = a.position + j * spec.jitter;
                }
                let rot = sample_haar_rotation(&mut rng);
                rotate_points(&rot, &m, RotationCenter::Centroid)
            }
        };
        mol = mol.centered();
        mol.name = Some(format!("synth_{idx}"));
        molecules.push(mol);
    }

    if spec.group_closed {
        let group = octahedral_group();
        let mut closed = Vec::with_capacity(molecules.len() * 24);
        for m in &molecules {
            for r in &group {
                closed.push(rotate_points(r, m, RotationCenter::Centroid));
            }
        }
        molecules = closed;
    }

    Ok(Dataset { molecules, group_closed: spec.group_closed })
}

fn random_unit<R: rand::Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v * (1.0 / n);
        }
    }
}

fn gen_chain<R: rand::Rng>(natoms: usize, spec: &SynthSpec, rng: &mut R) -> Result<Molecule> {
    let min_sep = 0.9 * spec.bond_length;
    let mut positions: Vec<Vec3> = vec![Vec3::ZERO];
    let mut dir = random_unit(rng);
    for _ in 1..natoms {
        let step = spec.bond_length
            + if spec.jitter > 0.0 { rng.gen_range(-spec.jitter..spec.jitter) } else { 0.0 };
        let prev = *positions.last().unwrap();
        let mut placed = None;
        for _ in 0..100 {
            // bend by at most 60 degrees from the previous direction
            let perturbed = (dir + random_unit(rng) * 0.6).normalized();
            let cand = prev + perturbed * step;
            let clash = positions[..positions.len() - 1]
                .iter()
                .any(|p| (*p - cand).norm() < min_sep);
            if !clash {
                placed = Some((cand, perturbed));
                break;
            }
        }
        let (pos, d) = placed.unwrap_or((prev + dir * step, dir));
        positions.push(pos);
        dir = d;
    }
    let atoms = positions
        .into_iter()
        .map(|p| Atom {
            element: spec.elements[rng.gen_range(0..spec.elements.len())],
            position: p,
        })
        .collect();
    Molecule::new(atoms)
}

fn gen_ring<R: rand::Rng>(natoms: usize, spec: &SynthSpec, rng: &mut R) -> Result<Molecule> {
    let radius = spec.bond_length / (2.0 * (std::f64::consts::PI / natoms as f64).sin());
    let mut atoms = Vec::with_capacity(natoms);
    for i in 0..natoms {
        let a = 2.0 * std::f64::consts::PI * i as f64 / natoms as f64;
        let mut p = Vec3::new(radius * a.cos(), radius * a.sin(), 0.0);
        if spec.jitter > 0.0 {
            p = p + Vec3::new(
                rng.gen_range(-spec.jitter..spec.jitter),
                rng.gen_range(-spec.jitter..spec.jitter),
                rng.gen_range(-spec.jitter..spec.jitter),
            );
        }
        atoms.push(Atom {
            element: spec.elements[rng.gen_range(0..spec.elements.len())],
            position: p,
        });
    }
    let mol = Molecule::new(atoms)?;
    let rot = sample_haar_rotation(rng);
    Ok(rotate_points(&rot, &mol, RotationCenter::Centroid))
}

/// Check that every octahedral rotation of every member is itself a member
/// (coordinate match within `tol` after centroid alignment).
pub fn verify_group_closure(ds: &Dataset, tol: f64) -> bool {
    let group = octahedral_group();
    let centered: Vec<Molecule> = ds.molecules.iter().map(|m| m.centered()).collect();
    for m in &centered {
        for r in &group {
            let rotated = rotate_points(r, m, RotationCenter::Centroid);
            let found = centered.iter().any(|cand| molecules_match(cand, &rotated, tol));
            if !found {
                return false;
            }
        }
    }
    true
}

fn molecules_match(a: &Molecule, b: &Molecule, tol: f64) -> bool {
    a.atoms.len() == b.atoms.len()
        && a.atoms.iter().zip(&b.atoms).all(|(x, y)| {
            x.element == y.element && (x.position - y.position).norm() <= tol
        })
}
