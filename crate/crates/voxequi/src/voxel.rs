//! Voxel grids: molecule -> density, density -> molecule, and Gaussian
//! noising.
//!
//! A molecule is drawn as unit-height Gaussian densities on a per-element
//! channel grid; peak finding inverts the map with sub-voxel Gauss-Newton
//! refinement.

use crate::error::{Result, VoxError};
use crate::geom::Vec3;
use crate::mol_io::{Atom, Element, Molecule};

use rand_distr::StandardNormal;
use std::io::{Read, Write};
use std::path::Path;

/// Contributions beyond this many gaussian widths are below 1e-17 and are
/// skipped; flipping one at a rotation boundary stays under the 1e-12
/// commutation tolerance.
const CUTOFF_WIDTHS: f64 = 9.0;

#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    /// Edge length in voxels (cubic grid).
    pub edge_voxels: usize,
    /// Angstroms per voxel.
    pub resolution: f64,
    /// Ordered element channels.
    pub channels: Vec<Element>,
    /// Gaussian width w in Angstroms; density is exp(-d^2 / (2 w^2)).
    pub gaussian_width: f64,
}

impl GridSpec {
    pub fn new(edge_voxels: usize, resolution: f64, channels: Vec<Element>, gaussian_width: f64) -> Result<GridSpec> {
        if edge_voxels < 8 {
            return Err(VoxError::Argument("edge_voxels must be >= 8".into()));
        }
        if resolution <= 0.0 {
            return Err(VoxError::Argument("resolution must be positive".into()));
        }
        if channels.is_empty() {
            return Err(VoxError::Argument("channel list must be non-empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if !channels.iter().all(|c| seen.insert(*c)) {
            return Err(VoxError::Argument("channel list must be unique".into()));
        }
        if gaussian_width <= 0.0 {
            return Err(VoxError::Argument("gaussian_width must be positive".into()));
        }
        Ok(GridSpec { edge_voxels, resolution, channels, gaussian_width })
    }

    /// Paper-scale default: 64 voxels at 0.25 A, all 8 channels, w = 0.5 A.
    pub fn paper_default() -> GridSpec {
        GridSpec::new(64, 0.25, Element::ALL.to_vec(), 0.5).unwrap()
    }

    /// Desk-scale default: 32 voxels at 0.25 A.
    pub fn desk_default() -> GridSpec {
        GridSpec::new(32, 0.25, Element::ALL.to_vec(), 0.5).unwrap()
    }

    pub fn voxels_per_channel(&self) -> usize {
        self.edge_voxels.pow(3)
    }

    pub fn total_voxels(&self) -> usize {
        self.channels.len() * self.voxels_per_channel()
    }

    /// Position of a voxel center relative to the grid center, in Angstroms.
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let half = (self.edge_voxels as f64 - 1.0) / 2.0;
        Vec3::new(
            (i as f64 - half) * self.resolution,
            (j as f64 - half) * self.resolution,
            (k as f64 - half) * self.resolution,
        )
    }

    /// Radius within which a centered molecule must fit.
    pub fn fit_radius(&self) -> f64 {
        self.edge_voxels as f64 / 2.0 * self.resolution - 3.0 * self.gaussian_width
    }

    pub fn channel_of(&self, e: Element) -> Option<usize> {
        self.channels.iter().position(|c| *c == e)
    }
}

/// Dense [c, l, l, l] tensor of f64 densities.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    pub data: Vec<f64>,
    /// Set when Gaussian noise has been added; noisy grids are exempt from
    /// the [0, 1] range invariant.
    pub noise_sigma: Option<f64>,
}

impl VoxelGrid {
    pub fn zeros(spec: GridSpec) -> VoxelGrid {
        let n = spec.total_voxels();
        VoxelGrid { spec, data: vec![0.0; n], noise_sigma: None }
    }

    #[inline]
    pub fn index(&self, ch: usize, i: usize, j: usize, k: usize) -> usize {
        let l = self.spec.edge_voxels;
        ((ch * l + i) * l + j) * l + k
    }

    pub fn at(&self, ch: usize, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(ch, i, j, k)]
    }

    pub fn channel(&self, ch: usize) -> &[f64] {
        let n = self.spec.voxels_per_channel();
        &self.data[ch * n..(ch + 1) * n]
    }

    /// Mean squared difference per voxel, ||a-b||^2 / D.
    pub fn mean_sq_diff(&self, other: &VoxelGrid) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        let mut s = 0.0;
        for (a, b) in self.data.iter().zip(&other.data) {
            let d = a - b;
            s += d * d;
        }
        s / self.data.len() as f64
    }

    pub fn sq_norm_diff(&self, other: &VoxelGrid) -> f64 {
        self.mean_sq_diff(other) * self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &VoxelGrid) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Draw a molecule as clamped Gaussian densities.
///
/// Channel value at voxel center v is `min(1, sum_a exp(-|v-p_a|^2/(2 w^2)))`
/// over same-element atoms. The molecule must already be centered: every
/// atom has to lie within the inscribed sphere minus a 3 w margin.
pub fn voxelize(mol: &Molecule, spec: &GridSpec) -> Result<VoxelGrid> {
    let limit = spec.fit_radius();
    let mut worst = (0usize, 0.0f64);
    for (i, a) in mol.atoms.iter().enumerate() {
        let r = a.position.norm();
        if r > worst.1 {
            worst = (i, r);
        }
    }
    if worst.1 > limit {
        return Err(VoxError::Extent { atom: worst.0, dist: worst.1, limit });
    }
    for a in &mol.atoms {
        if spec.channel_of(a.element).is_none() {
            return Err(VoxError::Element(a.element.symbol().to_string()));
        }
    }

    let l = spec.edge_voxels;
    let half = (l as f64 - 1.0) / 2.0;
    let w2x2 = 2.0 * spec.gaussian_width * spec.gaussian_width;
    let cutoff = CUTOFF_WIDTHS * spec.gaussian_width;
    let cutoff_sq = cutoff * cutoff;
    let mut grid = VoxelGrid::zeros(spec.clone());

    for atom in &mol.atoms {
        let ch = spec.channel_of(atom.element).unwrap();
        let p = atom.position;
        // bounding box of the cutoff sphere, in voxel indices
        let lo = |x: f64| (((x - cutoff) / spec.resolution + half).floor().max(0.0)) as usize;
        let hi = |x: f64| ((((x + cutoff) / spec.resolution + half).ceil()) as usize).min(l - 1);
        for i in lo(p.x)..=hi(p.x) {
            let dx = (i as f64 - half) * spec.resolution - p.x;
            for j in lo(p.y)..=hi(p.y) {
                let dy = (j as f64 - half) * spec.resolution - p.y;
                for k in lo(p.z)..=hi(p.z) {
                    let dz = (k as f64 - half) * spec.resolution - p.z;
                    let d2 = dx * dx + dy * dy + dz * dz;
                    if d2 <= cutoff_sq {
                        let idx = grid.index(ch, i, j, k);
                        grid.data[idx] += (-d2 / w2x2).exp();
                    }
                }
            }
        }
    }
    for v in &mut grid.data {
        if *v > 1.0 {
            *v = 1.0;
        }
    }
    Ok(grid)
}

/// Per-voxel Gaussian noise level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    pub sigma: f64,
}

impl NoiseModel {
    pub fn new(sigma: f64) -> Result<NoiseModel> {
        if sigma < 0.0 || !sigma.is_finite() {
            return Err(VoxError::Argument("sigma must be >= 0".into()));
        }
        Ok(NoiseModel { sigma })
    }

    /// The paper's training noise level.
    pub fn paper_default() -> NoiseModel {
        NoiseModel { sigma: 0.9 }
    }
}

/// Add i.i.d. N(0, sigma^2) to every voxel, in linear-index order.
pub fn add_gaussian_noise<R: rand::Rng>(grid: &VoxelGrid, noise: NoiseModel, rng: &mut R) -> VoxelGrid {
    let mut out = grid.clone();
    if noise.sigma > 0.0 {
        for v in &mut out.data {
            let z: f64 = rng.sample(StandardNormal);
            *v += noise.sigma * z;
        }
    }
    out.noise_sigma = Some(noise.sigma);
    out
}

/// Sample a noise field of the grid's shape (zero mean), used where the
/// noise must be handled separately from the signal.
pub fn sample_noise_field<R: rand::Rng>(spec: &GridSpec, sigma: f64, rng: &mut R) -> VoxelGrid {
    let mut out = VoxelGrid::zeros(spec.clone());
    for v in &mut out.data {
        let z: f64 = rng.sample(StandardNormal);
        *v = sigma * z;
    }
    out.noise_sigma = Some(sigma);
    out
}

pub fn grid_add(a: &VoxelGrid, b: &VoxelGrid) -> VoxelGrid {
    debug_assert_eq!(a.data.len(), b.data.len());
    let mut out = a.clone();
    for (x, y) in out.data.iter_mut().zip(&b.data) {
        *x += y;
    }
    out.noise_sigma = match (a.noise_sigma, b.noise_sigma) {
        (None, None) => None,
        (s, None) | (None, s) => s,
        (Some(x), Some(y)) => Some((x * x + y * y).sqrt()),
    };
    out
}

/// Peak-finding parameters.
#[derive(Clone, Copy, Debug)]
pub struct PeakParams {
    /// Candidate threshold on voxel value.
    pub threshold: f64,
    /// Minimum peak separation in voxels; closer candidates merge.
    pub min_separation: f64,
    /// Gauss-Newton iteration cap.
    pub refine_iters: usize,
}

impl Default for PeakParams {
    fn default() -> Self {
        PeakParams { threshold: 0.3, min_separation: 2.0, refine_iters: 50 }
    }
}

/// Atoms recovered from a density grid. May be empty (flagged, not an
/// error); `refine_fallbacks` counts peaks that fell back to the quadratic
/// sub-voxel estimate.
#[derive(Clone, Debug)]
pub struct PeakFindResult {
    pub atoms: Vec<Atom>,
    pub refine_fallbacks: usize,
}

impl PeakFindResult {
    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn molecule(&self) -> Option<Molecule> {
        if self.atoms.is_empty() {
            None
        } else {
            Some(Molecule::new(self.atoms.clone()).expect("non-empty finite atoms"))
        }
    }
}

/// Recover atom positions from a (denoised) grid.
///
/// Per channel: 26-neighborhood local maxima above the threshold, merged by
/// distance keeping the larger value, then refined by a Gauss-Newton fit of
/// the unit-amplitude, fixed-width Gaussian on the surrounding 5^3 patch.
pub fn find_peaks(grid: &VoxelGrid, params: &PeakParams) -> PeakFindResult {
    let spec = &grid.spec;
    let l = spec.edge_voxels;
    let mut atoms = Vec::new();
    let mut fallbacks = 0usize;

    for (ch, &element) in spec.channels.iter().enumerate() {
        let field = grid.channel(ch);
        let mut candidates: Vec<(usize, usize, usize, f64)> = Vec::new();
        for i in 0..l {
            for j in 0..l {
                for k in 0..l {
                    let v = field[(i * l + j) * l + k];
                    if v < params.threshold {
                        continue;
                    }
                    let mut is_max = true;
                    'nb: for di in -1i64..=1 {
                        for dj in -1i64..=1 {
                            for dk in -1i64..=1 {
                                if di == 0 && dj == 0 && dk == 0 {
                                    continue;
                                }
                                let (ni, nj, nk) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                                if ni < 0 || nj < 0 || nk < 0
                                    || ni >= l as i64 || nj >= l as i64 || nk >= l as i64
                                {
                                    continue;
                                }
                                let nv = field[((ni as usize) * l + nj as usize) * l + nk as usize];
                                if nv > v {
                                    is_max = false;
                                    break 'nb;
                                }
                            }
                        }
                    }
                    if is_max {
                        candidates.push((i, j, k, v));
                    }
                }
            }
        }

        // merge candidates closer than min_separation, keeping the larger
        candidates.sort_by(|a, b| {
            b.3.partial_cmp(&a.3)
                .unwrap()
                .then_with(|| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)))
        });
        let mut accepted: Vec<(usize, usize, usize, f64)> = Vec::new();
        for c in candidates {
            let far_enough = accepted.iter().all(|a| {
                let dx = a.0 as f64 - c.0 as f64;
                let dy = a.1 as f64 - c.1 as f64;
                let dz = a.2 as f64 - c.2 as f64;
                (dx * dx + dy * dy + dz * dz).sqrt() >= params.min_separation
            });
            if far_enough {
                accepted.push(c);
            }
        }

        for (i, j, k, _) in accepted {
            let (pos, converged) = refine_peak(field, spec, i, j, k, params.refine_iters);
            let pos = match pos {
                Some(p) if converged => p,
                _ => {
                    fallbacks += 1;
                    quadratic_subvoxel(field, spec, i, j, k)
                }
            };
            atoms.push(Atom { element, position: pos });
        }
    }

    PeakFindResult { atoms, refine_fallbacks: fallbacks }
}

/// Gauss-Newton position fit of `exp(-|v-p|^2/(2 w^2))` (amplitude and width
/// frozen) on the 5^3 patch around the candidate voxel.
fn refine_peak(
    field: &[f64],
    spec: &GridSpec,
    ci: usize,
    cj: usize,
    ck: usize,
    iters: usize,
) -> (Option<Vec3>, bool) {
    let l = spec.edge_voxels;
    let w2 = spec.gaussian_width * spec.gaussian_width;
    let start = spec.voxel_center(ci, cj, ck);
    let mut p = start;

    let lo = |c: usize| c.saturating_sub(2);
    let hi = |c: usize| (c + 2).min(l - 1);

    for _ in 0..iters {
        // accumulate J^T J (symmetric 3x3) and J^T r
        let mut jtj = [[0.0f64; 3]; 3];
        let mut jtr = [0.0f64; 3];
        for i in lo(ci)..=hi(ci) {
            for j in lo(cj)..=hi(cj) {
                for k in lo(ck)..=hi(ck) {
                    let v = spec.voxel_center(i, j, k);
                    let d = v - p;
                    let g = (-d.dot(d) / (2.0 * w2)).exp();
                    let r = g - field[(i * l + j) * l + k];
                    // dg/dp = g * (v - p) / w^2
                    let jac = [g * d.x / w2, g * d.y / w2, g * d.z / w2];
                    for a in 0..3 {
                        jtr[a] += jac[a] * r;
                        for b in 0..3 {
                            jtj[a][b] += jac[a] * jac[b];
                        }
                    }
                }
            }
        }
        let delta = match solve3(&jtj, &[-jtr[0], -jtr[1], -jtr[2]]) {
            Some(d) => d,
            None => return (None, false),
        };
        p = p + Vec3::new(delta[0], delta[1], delta[2]);
        if !p.is_finite() || (p - start).norm() > 2.0 * spec.resolution {
            return (None, false);
        }
        if (delta[0] * delta[0] + delta[1] * delta[1] + delta[2] * delta[2]).sqrt() < 1e-10 {
            return (Some(p), true);
        }
    }
    (Some(p), false)
}

fn solve3(a: &[[f64; 3]; 3], b: &[f64; 3]) -> Option<[f64; 3]> {
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    if det.abs() < 1e-300 {
        return None;
    }
    let mut x = [0.0f64; 3];
    for col in 0..3 {
        let mut m = *a;
        for row in 0..3 {
            m[row][col] = b[row];
        }
        let d = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        x[col] = d / det;
    }
    Some(x)
}

/// Three-point parabola estimate per axis, clamped to half a voxel.
fn quadratic_subvoxel(field: &[f64], spec: &GridSpec, ci: usize, cj: usize, ck: usize) -> Vec3 {
    let l = spec.edge_voxels;
    let get = |i: i64, j: i64, k: i64| -> f64 {
        if i < 0 || j < 0 || k < 0 || i >= l as i64 || j >= l as i64 || k >= l as i64 {
            0.0
        } else {
            field[((i as usize) * l + j as usize) * l + k as usize]
        }
    };
    let (i, j, k) = (ci as i64, cj as i64, ck as i64);
    let f0 = get(i, j, k);
    let axis_offset = |fm: f64, fp: f64| -> f64 {
        let denom = fm - 2.0 * f0 + fp;
        if denom.abs() < 1e-300 {
            0.0
        } else {
            (0.5 * (fm - fp) / denom).clamp(-0.5, 0.5)
        }
    };
    let off = Vec3::new(
        axis_offset(get(i - 1, j, k), get(i + 1, j, k)),
        axis_offset(get(i, j - 1, k), get(i, j + 1, k)),
        axis_offset(get(i, j, k - 1), get(i, j, k + 1)),
    );
    spec.voxel_center(ci, cj, ck) + off * spec.resolution
}

const GRID_MAGIC: &[u8; 8] = b"VOXGRID1";

/// Write the grid as a 32-byte header (magic, c, l, resolution, width)
/// followed by little-endian f64 voxel data, plus a JSON sidecar manifest.
pub fn write_grid(grid: &VoxelGrid, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(GRID_MAGIC)?;
    f.write_all(&(grid.spec.channels.len() as u32).to_le_bytes())?;
    f.write_all(&(grid.spec.edge_voxels as u32).to_le_bytes())?;
    f.write_all(&grid.spec.resolution.to_le_bytes())?;
    f.write_all(&grid.spec.gaussian_width.to_le_bytes())?;
    let mut buf = Vec::with_capacity(grid.data.len() * 8);
    for v in &grid.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf)?;

    let manifest = serde_json::json!({
        "format": "voxgrid-v1",
        "channels": grid.spec.channels.iter().map(|c| c.symbol()).collect::<Vec<_>>(),
        "edge_voxels": grid.spec.edge_voxels,
        "resolution_angstrom": grid.spec.resolution,
        "gaussian_width_angstrom": grid.spec.gaussian_width,
        "noise_sigma": grid.noise_sigma,
    });
    let sidecar = sidecar_path(path);
    std::fs::write(sidecar, serde_json::to_string_pretty(&manifest).unwrap())?;
    Ok(())
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".manifest.json");
    std::path::PathBuf::from(os)
}

pub fn read_grid(path: &Path) -> Result<VoxelGrid> {
    let mut f = std::fs::File::open(path)?;
    let mut header = [0u8; 32];
    f.read_exact(&mut header)?;
    if &header[0..8] != GRID_MAGIC {
        return Err(VoxError::Parse { line: 0, msg: "bad grid magic".into() });
    }
    let c = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let l = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let resolution = f64::from_le_bytes(header[16..24].try_into().unwrap());
    let width = f64::from_le_bytes(header[24..32].try_into().unwrap());

    let mut noise_sigma = None;
    let mut channels: Vec<Element> = Element::ALL[..c.min(8)].to_vec();
    if let Ok(text) = std::fs::read_to_string(sidecar_path(path)) {
        if let Ok(doc) = serde_json::from_str::<serde_json::Value>(&text) {
            if let Some(arr) = doc.get("channels").and_then(|v| v.as_array()) {
                let parsed: Result<Vec<Element>> = arr
                    .iter()
                    .map(|v| Element::from_symbol(v.as_str().unwrap_or("?")))
                    .collect();
                channels = parsed?;
            }
            noise_sigma = doc.get("noise_sigma").and_then(|v| v.as_f64());
        }
    }
    if channels.len() != c {
        return Err(VoxError::Shape(format!(
            "sidecar lists {} channels, header says {c}",
            channels.len()
        )));
    }
    let spec = GridSpec::new(l, resolution, channels, width)?;
    let n = spec.total_voxels();
    let mut buf = vec![0u8; n * 8];
    f.read_exact(&mut buf)?;
    let data: Vec<f64> = buf
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(VoxelGrid { spec, data, noise_sigma })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mol_io::{gen_synthetic_dataset, Motif, SynthSpec};
    use rand::Rng as _;

    fn two_channel_spec(l: usize) -> GridSpec {
        GridSpec::new(l, 0.25, vec![Element::C, Element::H], 0.5).unwrap()
    }

    #[test]
    fn centered_atom_peaks_at_exactly_one() {
        // odd grid edge puts a voxel center exactly at the origin
        let spec = GridSpec::new(17, 0.25, vec![Element::C, Element::H], 0.5).unwrap();
        let m = Molecule::new(vec![Atom { element: Element::C, position: Vec3::ZERO }]).unwrap();
        let g = voxelize(&m, &spec).unwrap();
        assert_eq!(g.at(0, 8, 8, 8), 1.0);
        assert!(g.channel(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn neighbor_voxel_matches_density_formula() {
        let spec = GridSpec::new(17, 0.25, vec![Element::C], 0.5).unwrap();
        let m = Molecule::new(vec![Atom { element: Element::C, position: Vec3::ZERO }]).unwrap();
        let g = voxelize(&m, &spec).unwrap();
        // distance 0.25 A, w = 0.5: exp(-0.0625/0.5)
        let expect = (-0.0625f64 / 0.5).exp();
        assert!((g.at(0, 9, 8, 8) - expect).abs() < 1e-12);
        assert!((expect - 0.8825).abs() < 1e-4);
    }

    #[test]
    fn distant_atoms_superpose_without_interaction() {
        let spec = GridSpec::new(56, 0.25, vec![Element::C, Element::H], 0.5).unwrap();
        let a = Atom { element: Element::H, position: Vec3::new(-5.0, 0.0, 0.0) };
        let b = Atom { element: Element::H, position: Vec3::new(5.0, 0.0, 0.0) };
        let both = voxelize(&Molecule::new(vec![a, b]).unwrap(), &spec).unwrap();
        let only_a = voxelize(&Molecule::new(vec![a]).unwrap(), &spec).unwrap();
        let only_b = voxelize(&Molecule::new(vec![b]).unwrap(), &spec).unwrap();
        let l = spec.edge_voxels;
        let half = (l as f64 - 1.0) / 2.0;
        for i in 0..l {
            for j in 0..l {
                for k in 0..l {
                    let v = Vec3::new(
                        (i as f64 - half) * 0.25,
                        (j as f64 - half) * 0.25,
                        (k as f64 - half) * 0.25,
                    );
                    let idx = both.index(1, i, j, k);
                    if (v - a.position).norm() < 2.0 {
                        assert!((both.data[idx] - only_a.data[idx]).abs() < 1e-12);
                    }
                    if (v - b.position).norm() < 2.0 {
                        assert!((both.data[idx] - only_b.data[idx]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn oversized_molecule_names_worst_atom() {
        let spec = two_channel_spec(16);
        let m = Molecule::new(vec![
            Atom { element: Element::C, position: Vec3::ZERO },
            Atom { element: Element::C, position: Vec3::new(9.0, 0.0, 0.0) },
        ])
        .unwrap();
        match voxelize(&m, &spec) {
            Err(VoxError::Extent { atom, .. }) => assert_eq!(atom, 1),
            other => panic!("expected extent error, got {other:?}"),
        }
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let spec = two_channel_spec(16);
        let g = VoxelGrid::zeros(spec);
        let mut rng = crate::rng::stream(1, &[0]);
        let noisy = add_gaussian_noise(&g, NoiseModel::new(0.0).unwrap(), &mut rng);
        assert_eq!(g.data, noisy.data);
        assert_eq!(noisy.noise_sigma, Some(0.0));
    }

    #[test]
    fn noise_is_deterministic_per_stream() {
        let spec = two_channel_spec(16);
        let g = VoxelGrid::zeros(spec);
        let na = add_gaussian_noise(&g, NoiseModel::paper_default(), &mut crate::rng::stream(4, &[2]));
        let nb = add_gaussian_noise(&g, NoiseModel::paper_default(), &mut crate::rng::stream(4, &[2]));
        assert_eq!(na.data, nb.data);
    }

    #[test]
    fn noise_moments_match_law_of_large_numbers() {
        let spec = GridSpec::new(32, 0.25, Element::ALL.to_vec(), 0.5).unwrap();
        let g = VoxelGrid::zeros(spec);
        let mut rng = crate::rng::stream(12, &[9]);
        let sigma = 0.9;
        let noisy = add_gaussian_noise(&g, NoiseModel::new(sigma).unwrap(), &mut rng);
        let n = noisy.data.len() as f64;
        let mean = noisy.data.iter().sum::<f64>() / n;
        let var = noisy.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 4.0 * sigma / n.sqrt(), "mean {mean}");
        assert!((var.sqrt() - sigma).abs() < 0.01 * sigma, "std {}", var.sqrt());
    }

    #[test]
    fn peaks_round_trip_three_atoms() {
        let spec = GridSpec::new(32, 0.25, Element::ALL.to_vec(), 0.5).unwrap();
        let synth = SynthSpec {
            n_molecules: 1,
            atoms_min: 3,
            atoms_max: 3,
            bond_length: 2.2,
            jitter: 0.0,
            motif: Motif::Chain,
            ..Default::default()
        };
        let m = gen_synthetic_dataset(&synth, 17).unwrap().molecules[0].clone();
        let g = voxelize(&m, &spec).unwrap();
        let found = find_peaks(&g, &PeakParams::default());
        assert_eq!(found.atoms.len(), 3);
        for orig in &m.atoms {
            let best = found
                .atoms
                .iter()
                .filter(|a| a.element == orig.element)
                .map(|a| (a.position - orig.position).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(best <= 0.05, "recovered coordinate off by {best}");
        }
    }

    #[test]
    fn all_zero_grid_yields_empty_flagged_result() {
        let spec = two_channel_spec(16);
        let g = VoxelGrid::zeros(spec);
        let found = find_peaks(&g, &PeakParams::default());
        assert!(found.is_empty());
        assert!(found.molecule().is_none());
    }

    #[test]
    fn mid_edge_atom_is_refined_below_nearest_voxel_error() {
        let spec = GridSpec::new(32, 0.25, vec![Element::C], 0.5).unwrap();
        // halfway between two voxel centers along x: offset 0.125 A
        let half = (spec.edge_voxels as f64 - 1.0) / 2.0;
        let x = (16.0 - half) * 0.25 + 0.125;
        let truth = Vec3::new(x, 0.0, 0.0);
        let m = Molecule::new(vec![Atom { element: Element::C, position: truth }]).unwrap();
        let g = voxelize(&m, &spec).unwrap();
        let found = find_peaks(&g, &PeakParams::default());
        assert_eq!(found.atoms.len(), 1);
        let err = (found.atoms[0].position - truth).norm();
        assert!(err <= 0.05, "refined error {err}");
    }

    #[test]
    fn density_is_monotone_in_distance_from_lone_atom() {
        let spec = GridSpec::new(17, 0.25, vec![Element::C], 0.5).unwrap();
        let m = Molecule::new(vec![Atom { element: Element::C, position: Vec3::ZERO }]).unwrap();
        let g = voxelize(&m, &spec).unwrap();
        let mut prev = f64::INFINITY;
        for i in 8..17 {
            let v = g.at(0, i, 8, 8);
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn voxelization_commutes_with_exact_rotation() {
        use crate::geom::{octahedral_group, rotate_grid, rotate_points, RotationCenter};
        let spec = GridSpec::new(32, 0.25, Element::ALL.to_vec(), 0.5).unwrap();
        let synth = SynthSpec {
            n_molecules: 3,
            atoms_min: 3,
            atoms_max: 4,
            bond_length: 1.0,
            jitter: 0.05,
            ..Default::default()
        };
        let ds = gen_synthetic_dataset(&synth, 23).unwrap();
        for m in &ds.molecules {
            let g = voxelize(m, &spec).unwrap();
            for r in octahedral_group() {
                let a = rotate_grid(&g, &r).unwrap();
                let b = voxelize(&rotate_points(&r, m, RotationCenter::GridCenter), &spec).unwrap();
                assert!(a.max_abs_diff(&b) <= 1e-12);
            }
        }
    }

    #[test]
    fn grid_file_round_trips() {
        let spec = two_channel_spec(8);
        let mut g = VoxelGrid::zeros(spec);
        let mut rng = crate::rng::stream(5, &[5]);
        for v in &mut g.data {
            *v = rng.gen_range(0.0..1.0);
        }
        g.noise_sigma = Some(0.9);
        let dir = std::env::temp_dir().join("voxequi_grid_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("g.vox");
        write_grid(&g, &path).unwrap();
        let back = read_grid(&path).unwrap();
        assert_eq!(back.data, g.data);
        assert_eq!(back.spec, g.spec);
        assert_eq!(back.noise_sigma, Some(0.9));
    }
}
