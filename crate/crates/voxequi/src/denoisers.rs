//! Denoiser interface and implementations.
//!
//! Three kinds share one behavioral interface: the closed-form
//! empirical-Bayes posterior mean (exact MSE-optimal denoiser for a finite
//! reference set), trained networks (see `tinynet`), and a group-averaged
//! wrapper that is exactly equivariant by construction. Tweedie's relation
//! turns any denoiser into a score field for sampling.

use crate::error::{Result, VoxError};
use crate::geom::{rotate_grid, GridAction, RotationOp};
use crate::mol_io::Dataset;
use crate::voxel::{voxelize, GridSpec, VoxelGrid};
use rayon::prelude::*;
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DenoiserKind {
    EmpiricalBayes,
    Neural,
    GroupAveraged,
}

/// Behavioral interface: map a noisy grid to a clean grid, and expose a
/// latent embedding of fixed length.
pub trait Denoiser: Send + Sync {
    fn denoise(&self, noisy: &VoxelGrid, sigma: f64) -> Result<VoxelGrid>;
    fn embed(&self, noisy: &VoxelGrid) -> Result<Vec<f64>>;
    fn embed_len(&self) -> usize;
    fn kind(&self) -> DenoiserKind;
}

/// Default cap on the empirical-Bayes reference set; each grid costs
/// `total_voxels * 8` bytes and every query is O(n_ref * D).
pub const DEFAULT_REFERENCE_CAP: usize = 256;

/// Exact posterior-mean denoiser under a finite reference distribution and
/// Gaussian noise: `x_hat(y) = sum_i w_i x_i`, `w_i ∝ exp(-|y-x_i|^2/(2 s^2))`,
/// computed with the max log-weight subtracted so it is always normalizable.
pub struct EmpiricalBayesDenoiser {
    reference: Vec<VoxelGrid>,
    /// Sigma used by `embed` (the denoise call takes sigma explicitly).
    pub sigma: f64,
}

impl EmpiricalBayesDenoiser {
    pub fn from_grids(reference: Vec<VoxelGrid>, sigma: f64) -> Result<Self> {
        Self::from_grids_with_cap(reference, sigma, DEFAULT_REFERENCE_CAP)
    }

    pub fn from_grids_with_cap(reference: Vec<VoxelGrid>, sigma: f64, cap: usize) -> Result<Self> {
        if reference.is_empty() {
            return Err(VoxError::Argument("reference set must be non-empty".into()));
        }
        if reference.len() > cap {
            return Err(VoxError::Argument(format!(
                "reference set of {} grids exceeds cap {cap} ({} MiB)",
                reference.len(),
                reference.len() * reference[0].data.len() * 8 / (1 << 20),
            )));
        }
        if sigma <= 0.0 {
            return Err(VoxError::Argument("sigma must be positive".into()));
        }
        let len = reference[0].data.len();
        if reference.iter().any(|g| g.data.len() != len) {
            return Err(VoxError::Shape("reference grids must share one shape".into()));
        }
        Ok(EmpiricalBayesDenoiser { reference, sigma })
    }

    /// Voxelize a dataset into the reference set.
    pub fn from_dataset(ds: &Dataset, spec: &GridSpec, sigma: f64) -> Result<Self> {
        let grids: Result<Vec<VoxelGrid>> =
            ds.molecules.iter().map(|m| voxelize(m, spec)).collect();
        Self::from_grids(grids?, sigma)
    }

    pub fn reference_len(&self) -> usize {
        self.reference.len()
    }

    pub fn memory_bytes(&self) -> usize {
        self.reference.iter().map(|g| g.data.len() * 8).sum()
    }

    fn log_weights(&self, y: &VoxelGrid, sigma: f64) -> Vec<f64> {
        let s2x2 = 2.0 * sigma * sigma;
        self.reference
            .par_iter()
            .map(|x| {
                let mut d2 = 0.0;
                for (a, b) in y.data.iter().zip(&x.data) {
                    let d = a - b;
                    d2 += d * d;
                }
                -d2 / s2x2
            })
            .collect()
    }

    /// Normalized posterior weights over the reference set.
    pub fn posterior_weights(&self, y: &VoxelGrid, sigma: f64) -> Vec<f64> {
        let lw = self.log_weights(y, sigma);
        let m = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = lw.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = w.iter().sum();
        for v in &mut w {
            *v /= z;
        }
        w
    }

    /// `log p_sigma(y)` up to an additive constant in y (exact otherwise):
    /// `logsumexp_i(-|y-x_i|^2/(2 s^2)) - log n`.
    pub fn log_marginal(&self, y: &VoxelGrid, sigma: f64) -> f64 {
        let lw = self.log_weights(y, sigma);
        let m = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = lw.iter().map(|l| (l - m).exp()).sum();
        m + s.ln() - (self.reference.len() as f64).ln()
    }
}

impl Denoiser for EmpiricalBayesDenoiser {
    fn denoise(&self, noisy: &VoxelGrid, sigma: f64) -> Result<VoxelGrid> {
        if sigma <= 0.0 {
            return Err(VoxError::Argument("sigma must be positive".into()));
        }
        if noisy.data.len() != self.reference[0].data.len() {
            return Err(VoxError::Shape("query grid shape differs from reference".into()));
        }
        let w = self.posterior_weights(noisy, sigma);
        let mut out = self.reference[0].clone();
        out.noise_sigma = None;
        for v in &mut out.data {
            *v = 0.0;
        }
        for (wi, x) in w.iter().zip(&self.reference) {
            if *wi == 0.0 {
                continue;
            }
            for (o, v) in out.data.iter_mut().zip(&x.data) {
                *o += wi * v;
            }
        }
        Ok(out)
    }

    /// The posterior weight vector is the embedding.
    fn embed(&self, noisy: &VoxelGrid) -> Result<Vec<f64>> {
        Ok(self.posterior_weights(noisy, self.sigma))
    }

    fn embed_len(&self) -> usize {
        self.reference.len()
    }

    fn kind(&self) -> DenoiserKind {
        DenoiserKind::EmpiricalBayes
    }
}

/// Exactly G-equivariant wrapper: `D_eq(y) = (1/|G|) sum_R R^-1 D(R y)`.
///
/// Only exact-permutation group actions are accepted; trilinear resampling
/// would break the exactness the wrapper exists to provide. The embedding
/// averages the base embeddings of all rotated inputs and is therefore
/// G-invariant.
pub struct GroupAveragedDenoiser {
    base: Arc<dyn Denoiser>,
    group: Vec<RotationOp>,
}

impl GroupAveragedDenoiser {
    pub fn new(base: Arc<dyn Denoiser>, group: Vec<RotationOp>) -> Result<Self> {
        if group.is_empty() {
            return Err(VoxError::Argument("group must be non-empty".into()));
        }
        if group.iter().any(|r| r.grid_action != GridAction::ExactPermutation) {
            return Err(VoxError::Argument(
                "group averaging requires exact_permutation grid actions".into(),
            ));
        }
        let key = |m: &crate::geom::Mat3| -> [i64; 9] {
            let mut k = [0i64; 9];
            for (n, v) in m.0.iter().flatten().enumerate() {
                k[n] = *v as i64;
            }
            k
        };
        let members: std::collections::HashSet<_> = group.iter().map(|r| key(&r.matrix)).collect();
        for a in &group {
            for b in &group {
                if !members.contains(&key(&a.matrix.mul(&b.matrix))) {
                    return Err(VoxError::Argument("group is not closed under composition".into()));
                }
            }
        }
        Ok(GroupAveragedDenoiser { base, group })
    }

    pub fn group_len(&self) -> usize {
        self.group.len()
    }
}

impl Denoiser for GroupAveragedDenoiser {
    fn denoise(&self, noisy: &VoxelGrid, sigma: f64) -> Result<VoxelGrid> {
        let parts: Result<Vec<VoxelGrid>> = self
            .group
            .par_iter()
            .map(|r| {
                let rotated = rotate_grid(noisy, r)?;
                let den = self.base.denoise(&rotated, sigma)?;
                rotate_grid(&den, &r.inverse())
            })
            .collect();
        let parts = parts?;
        let mut out = parts[0].clone();
        for p in &parts[1..] {
            for (o, v) in out.data.iter_mut().zip(&p.data) {
                *o += v;
            }
        }
        let inv = 1.0 / self.group.len() as f64;
        for o in &mut out.data {
            *o *= inv;
        }
        Ok(out)
    }

    fn embed(&self, noisy: &VoxelGrid) -> Result<Vec<f64>> {
        let parts: Result<Vec<Vec<f64>>> = self
            .group
            .par_iter()
            .map(|r| self.base.embed(&rotate_grid(noisy, r)?))
            .collect();
        let parts = parts?;
        let mut out = vec![0.0; self.base.embed_len()];
        for p in &parts {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        let inv = 1.0 / self.group.len() as f64;
        for o in &mut out {
            *o *= inv;
        }
        Ok(out)
    }

    fn embed_len(&self) -> usize {
        self.base.embed_len()
    }

    fn kind(&self) -> DenoiserKind {
        DenoiserKind::GroupAveraged
    }
}

/// Tweedie score: `s(y) = (D(y) - y) / sigma^2`. For the empirical-Bayes
/// denoiser this equals the gradient of `log p_sigma` exactly.
pub fn tweedie_score(d: &dyn Denoiser, y: &VoxelGrid, sigma: f64) -> Result<VoxelGrid> {
    if sigma <= 0.0 {
        return Err(VoxError::Argument("tweedie score requires sigma > 0".into()));
    }
    let mut out = d.denoise(y, sigma)?;
    let inv = 1.0 / (sigma * sigma);
    for (o, v) in out.data.iter_mut().zip(&y.data) {
        *o = (*o - v) * inv;
    }
    out.noise_sigma = None;
    Ok(out)
}

/// A denoiser-backed score function at a fixed smoothing level.
pub struct ScoreField<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub sigma: f64,
}

impl<'a> ScoreField<'a> {
    pub fn new(denoiser: &'a dyn Denoiser, sigma: f64) -> Result<Self> {
        if sigma <= 0.0 {
            return Err(VoxError::Argument("score field requires sigma > 0".into()));
        }
        Ok(ScoreField { denoiser, sigma })
    }

    pub fn eval(&self, y: &VoxelGrid) -> Result<VoxelGrid> {
        tweedie_score(self.denoiser, y, self.sigma)
    }
}

/// Convenience: latent embedding of any denoiser.
pub fn embed_latent(d: &dyn Denoiser, g: &VoxelGrid) -> Result<Vec<f64>> {
    d.embed(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::octahedral_group;
    use crate::mol_io::{gen_synthetic_dataset, Element, SynthSpec};
    use rand::Rng as _;

    fn small_spec() -> GridSpec {
        GridSpec::new(8, 0.25, vec![Element::C, Element::H], 0.5).unwrap()
    }

    fn random_grid(spec: &GridSpec, seed: u64) -> VoxelGrid {
        let mut g = VoxelGrid::zeros(spec.clone());
        let mut rng = crate::rng::stream(seed, &[77]);
        for v in &mut g.data {
            *v = rng.gen_range(0.0..1.0);
        }
        g
    }

    fn reference_set(n: usize) -> Vec<VoxelGrid> {
        (0..n).map(|i| random_grid(&small_spec(), 100 + i as u64)).collect()
    }

    #[test]
    fn singleton_reference_returns_the_reference() {
        let refs = reference_set(1);
        let x0 = refs[0].clone();
        let eb = EmpiricalBayesDenoiser::from_grids(refs, 0.9).unwrap();
        let y = random_grid(&small_spec(), 999);
        let out = eb.denoise(&y, 0.9).unwrap();
        assert_eq!(out.data, x0.data);
    }

    #[test]
    fn small_sigma_collapses_to_nearest_reference() {
        let refs = reference_set(4);
        let target = refs[2].clone();
        let eb = EmpiricalBayesDenoiser::from_grids(refs, 0.9).unwrap();
        let out = eb.denoise(&target, 1e-3).unwrap();
        assert!(out.max_abs_diff(&target) <= 1e-9);
    }

    #[test]
    fn equidistant_query_averages_two_references() {
        let refs = reference_set(2);
        let mut mid = refs[0].clone();
        for (m, (a, b)) in mid.data.iter_mut().zip(refs[0].data.iter().zip(&refs[1].data)) {
            *m = 0.5 * (a + b);
        }
        let eb = EmpiricalBayesDenoiser::from_grids(refs.clone(), 0.9).unwrap();
        let out = eb.denoise(&mid, 0.7).unwrap();
        assert!(out.max_abs_diff(&mid) <= 1e-12);
    }

    #[test]
    fn posterior_mean_matches_direct_normalization_oracle() {
        // independent route: plain exp weights without the log-sum-exp shift
        let refs = reference_set(5);
        let eb = EmpiricalBayesDenoiser::from_grids(refs.clone(), 0.9).unwrap();
        let y = random_grid(&small_spec(), 5000);
        let sigma = 0.8;
        let mut direct = vec![0.0f64; 5];
        for (i, x) in refs.iter().enumerate() {
            let d2: f64 = y.data.iter().zip(&x.data).map(|(a, b)| (a - b) * (a - b)).sum();
            direct[i] = (-d2 / (2.0 * sigma * sigma)).exp();
        }
        let z: f64 = direct.iter().sum();
        assert!(z > 0.0, "direct weights underflowed; pick a milder case");
        let mut expect = VoxelGrid::zeros(small_spec());
        for (w, x) in direct.iter().zip(&refs) {
            for (o, v) in expect.data.iter_mut().zip(&x.data) {
                *o += (w / z) * v;
            }
        }
        let got = eb.denoise(&y, sigma).unwrap();
        assert!(got.max_abs_diff(&expect) <= 1e-9);

        // the posterior mean minimizes expected squared error among candidates
        let w = eb.posterior_weights(&y, sigma);
        let risk = |c: &VoxelGrid| -> f64 {
            w.iter()
                .zip(&refs)
                .map(|(wi, x)| wi * c.sq_norm_diff(x))
                .sum()
        };
        let base_risk = risk(&got);
        let mut rng = crate::rng::stream(1, &[42]);
        for _ in 0..8 {
            let mut c = got.clone();
            for v in &mut c.data {
                *v += rng.gen_range(-0.05..0.05);
            }
            assert!(risk(&c) >= base_risk - 1e-12);
        }
        for x in &refs {
            assert!(risk(x) >= base_risk - 1e-12);
        }
    }

    #[test]
    fn group_closed_reference_makes_eb_exactly_equivariant() {
        // executable form of the denoised-distribution equivariance argument:
        // data symmetry alone yields an equivariant optimal denoiser
        let spec = GridSpec::new(16, 0.25, vec![Element::C, Element::O], 0.25).unwrap();
        let synth = SynthSpec {
            n_molecules: 2,
            atoms_min: 3,
            atoms_max: 3,
            bond_length: 0.9,
            jitter: 0.05,
            elements: vec![Element::C, Element::O],
            group_closed: true,
            ..Default::default()
        };
        let ds = gen_synthetic_dataset(&synth, 3).unwrap();
        let eb = EmpiricalBayesDenoiser::from_dataset(&ds, &spec, 0.9).unwrap();
        assert_eq!(eb.reference_len(), 48);
        let y = random_grid(&spec, 31);
        let dy = eb.denoise(&y, 0.9).unwrap();
        for r in octahedral_group() {
            let lhs = rotate_grid(&dy, &r).unwrap();
            let rhs = eb.denoise(&rotate_grid(&y, &r).unwrap(), 0.9).unwrap();
            assert!(lhs.max_abs_diff(&rhs) <= 1e-9);
        }
    }

    #[test]
    fn group_averaging_is_idempotent_on_equivariant_base() {
        let spec = GridSpec::new(12, 0.25, vec![Element::C], 0.25).unwrap();
        let synth = SynthSpec {
            n_molecules: 1,
            atoms_min: 2,
            atoms_max: 2,
            bond_length: 0.8,
            elements: vec![Element::C],
            group_closed: true,
            ..Default::default()
        };
        let ds = gen_synthetic_dataset(&synth, 8).unwrap();
        let eb = Arc::new(EmpiricalBayesDenoiser::from_dataset(&ds, &spec, 0.9).unwrap());
        let ga = GroupAveragedDenoiser::new(eb.clone(), octahedral_group()).unwrap();
        let y = random_grid(&spec, 77);
        let a = eb.denoise(&y, 0.9).unwrap();
        let b = ga.denoise(&y, 0.9).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-9);
    }

    #[test]
    fn group_averaged_wrapper_is_exactly_equivariant() {
        let refs = reference_set(3);
        let eb = Arc::new(EmpiricalBayesDenoiser::from_grids(refs, 0.9).unwrap());
        let ga = GroupAveragedDenoiser::new(eb, octahedral_group()).unwrap();
        let y = random_grid(&small_spec(), 4242);
        let dy = ga.denoise(&y, 0.9).unwrap();
        for r in octahedral_group() {
            let lhs = rotate_grid(&dy, &r).unwrap();
            let rhs = ga.denoise(&rotate_grid(&y, &r).unwrap(), 0.9).unwrap();
            assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
        }
    }

    #[test]
    fn trivial_group_wrapper_is_bit_identical_to_base() {
        let refs = reference_set(3);
        let eb = Arc::new(EmpiricalBayesDenoiser::from_grids(refs, 0.9).unwrap());
        let ga = GroupAveragedDenoiser::new(eb.clone(), vec![RotationOp::identity()]).unwrap();
        let y = random_grid(&small_spec(), 8);
        let a = eb.denoise(&y, 0.9).unwrap();
        let b = ga.denoise(&y, 0.9).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn trilinear_group_members_are_rejected() {
        let refs = reference_set(1);
        let eb = Arc::new(EmpiricalBayesDenoiser::from_grids(refs, 0.9).unwrap());
        let tri = crate::geom::rot_axis_angle(crate::geom::Vec3::new(1.0, 1.0, 0.0), 0.3).unwrap();
        assert!(GroupAveragedDenoiser::new(eb, vec![RotationOp::identity(), tri]).is_err());
    }

    #[test]
    fn tweedie_score_of_zero_singleton_is_gaussian_score() {
        let spec = small_spec();
        let zero = VoxelGrid::zeros(spec.clone());
        let eb = EmpiricalBayesDenoiser::from_grids(vec![zero], 0.9).unwrap();
        let y = random_grid(&spec, 3030);
        let sigma = 0.7;
        let s = tweedie_score(&eb, &y, sigma).unwrap();
        for (sv, yv) in s.data.iter().zip(&y.data) {
            assert!((sv + yv / (sigma * sigma)).abs() <= 1e-12);
        }
    }

    #[test]
    fn tweedie_score_matches_log_marginal_finite_differences() {
        let refs = reference_set(4);
        let eb = EmpiricalBayesDenoiser::from_grids(refs, 0.9).unwrap();
        let y = random_grid(&small_spec(), 606);
        let sigma = 0.8;
        let score = tweedie_score(&eb, &y, sigma).unwrap();
        let mut rng = crate::rng::stream(2, &[6]);
        let mut dir = VoxelGrid::zeros(small_spec());
        let mut norm = 0.0;
        for v in &mut dir.data {
            *v = rng.gen_range(-1.0..1.0);
            norm += *v * *v;
        }
        let norm = norm.sqrt();
        for v in &mut dir.data {
            *v /= norm;
        }
        let h = 1e-5;
        let mut yp = y.clone();
        let mut ym = y.clone();
        for ((p, m), d) in yp.data.iter_mut().zip(ym.data.iter_mut()).zip(&dir.data) {
            *p += h * d;
            *m -= h * d;
        }
        let fd = (eb.log_marginal(&yp, sigma) - eb.log_marginal(&ym, sigma)) / (2.0 * h);
        let dot: f64 = score.data.iter().zip(&dir.data).map(|(a, b)| a * b).sum();
        let rel = (fd - dot).abs() / fd.abs().max(dot.abs()).max(1e-12);
        assert!(rel <= 1e-5, "fd {fd} vs analytic {dot}, rel {rel}");
    }

    #[test]
    fn score_vanishes_at_modes_for_small_sigma() {
        let refs = reference_set(3);
        let mode = refs[1].clone();
        let eb = EmpiricalBayesDenoiser::from_grids(refs, 0.9).unwrap();
        let sigma = 0.05;
        let s = tweedie_score(&eb, &mode, sigma).unwrap();
        let norm: f64 = s.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm * sigma * sigma <= 1e-6, "score norm {norm}");
    }

    #[test]
    fn zero_sigma_score_is_an_argument_error() {
        let refs = reference_set(1);
        let eb = EmpiricalBayesDenoiser::from_grids(refs, 0.9).unwrap();
        let y = random_grid(&small_spec(), 11);
        assert!(tweedie_score(&eb, &y, 0.0).is_err());
    }

    #[test]
    fn log_marginal_integrates_the_score_along_a_path() {
        let refs = reference_set(4);
        let eb = EmpiricalBayesDenoiser::from_grids(refs, 0.9).unwrap();
        let sigma = 0.9;
        let y0 = random_grid(&small_spec(), 21);
        let mut y1 = y0.clone();
        let mut rng = crate::rng::stream(3, &[9]);
        for v in &mut y1.data {
            *v += rng.gen_range(-0.02..0.02);
        }
        let steps = 100;
        let mut integral = 0.0;
        let mut prev: Option<f64> = None;
        for t in 0..=steps {
            let alpha = t as f64 / steps as f64;
            let mut y = y0.clone();
            for ((yv, a), b) in y.data.iter_mut().zip(&y0.data).zip(&y1.data) {
                *yv = a + alpha * (b - a);
            }
            let s = tweedie_score(&eb, &y, sigma).unwrap();
            let d: f64 = s
                .data
                .iter()
                .zip(y0.data.iter().zip(&y1.data))
                .map(|(sv, (a, b))| sv * (b - a))
                .sum();
            if let Some(p) = prev {
                integral += 0.5 * (p + d) / steps as f64;
            }
            prev = Some(d);
        }
        let exact = eb.log_marginal(&y1, sigma) - eb.log_marginal(&y0, sigma);
        assert!((integral - exact).abs() <= 1e-4, "integral {integral} vs exact {exact}");
    }

    #[test]
    fn eb_embedding_is_the_weight_vector() {
        let refs = reference_set(1);
        let eb = EmpiricalBayesDenoiser::from_grids(refs, 0.9).unwrap();
        let y = random_grid(&small_spec(), 66);
        assert_eq!(eb.embed(&y).unwrap(), vec![1.0]);
    }

    #[test]
    fn group_averaged_embedding_is_invariant() {
        let refs = reference_set(3);
        let eb = Arc::new(EmpiricalBayesDenoiser::from_grids(refs, 0.9).unwrap());
        let ga = GroupAveragedDenoiser::new(eb, octahedral_group()).unwrap();
        let y = random_grid(&small_spec(), 3131);
        let e0 = ga.embed(&y).unwrap();
        for r in octahedral_group() {
            let er = ga.embed(&rotate_grid(&y, &r).unwrap()).unwrap();
            let dev = e0.iter().zip(&er).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(dev <= 1e-10);
        }
    }

    #[test]
    fn reference_cap_is_enforced() {
        let refs = reference_set(5);
        assert!(EmpiricalBayesDenoiser::from_grids_with_cap(refs, 0.9, 4).is_err());
    }
}
