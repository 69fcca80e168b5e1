//! Walk-jump sampling.
//!
//! The walk is discretized underdamped Langevin dynamics on the smoothed
//! (noisy) density,
//!
//! ```text
//! dv = -gamma v dt + u s(y) dt + sqrt(2 gamma u) dB
//! dy = v dt
//! ```
//!
//! integrated with BAOAB splitting; `s` is the denoiser-derived score, so
//! the drift moves `y` up the smoothed log-density and the stationary law is
//! `p_sigma(y) * N(v; 0, u I)`. The jump maps any walk state to a molecule
//! with one denoiser pass plus peak finding. Seeded generation runs the
//! rotated-seed and matched-noise protocols from the same RNG streams so
//! the two arms are comparable draw by draw.

use crate::denoisers::{Denoiser, ScoreField};
use crate::error::{Result, VoxError};
use crate::geom::{rot_axis_angle, rotate_grid, rotate_points, RotationCenter, RotationOp, Vec3};
use crate::mol_io::Molecule;
use crate::voxel::{find_peaks, sample_noise_field, voxelize, GridSpec, PeakFindResult, PeakParams, VoxelGrid};
use rayon::prelude::*;

#[derive(Clone, Copy, Debug)]
pub struct WalkParams {
    /// Friction gamma (>= 0; zero only makes sense with noise disabled).
    pub gamma: f64,
    /// Inverse mass u.
    pub u: f64,
    /// Step size in voxel-density units.
    pub dt: f64,
    pub steps: usize,
    pub save_every: usize,
    /// Smoothing level of the walked density; must match the score field.
    pub sigma: f64,
}

impl Default for WalkParams {
    fn default() -> Self {
        WalkParams { gamma: 1.0, u: 1.0, dt: 0.25, steps: 100, save_every: 10, sigma: 0.9 }
    }
}

impl WalkParams {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 || self.u <= 0.0 || self.dt <= 0.0 {
            return Err(VoxError::Argument("gamma >= 0, u > 0, dt > 0 required".into()));
        }
        if self.steps == 0 {
            return Err(VoxError::Argument("steps must be >= 1".into()));
        }
        if self.save_every == 0 || self.steps % self.save_every != 0 {
            return Err(VoxError::Argument("save_every must divide steps".into()));
        }
        if self.sigma <= 0.0 {
            return Err(VoxError::Argument("sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Position/velocity pair of one chain.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub y: VoxelGrid,
    pub v: VoxelGrid,
    pub step: usize,
}

impl ChainState {
    /// Start at `y` with zero velocity.
    pub fn at_rest(y: VoxelGrid) -> ChainState {
        let mut v = y.clone();
        for x in &mut v.data {
            *x = 0.0;
        }
        v.noise_sigma = None;
        ChainState { y, v, step: 0 }
    }

    fn check_finite(&self, step: usize) -> Result<()> {
        let bad = self.y.data.iter().chain(&self.v.data).any(|x| !x.is_finite());
        if bad {
            let max_y = self.y.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            return Err(VoxError::Divergence { step, diag: format!("max|y| = {max_y}") });
        }
        Ok(())
    }
}

/// BAOAB walk with a caller-supplied unit-variance noise field per step.
///
/// The closure seam is what lets the rotated-seed protocol feed
/// grid-rotated Brownian increments, and lets tests force `dB = 0`.
pub fn langevin_walk_with<F>(
    score: &ScoreField,
    init: ChainState,
    params: &WalkParams,
    mut xi: F,
) -> Result<Vec<ChainState>>
where
    F: FnMut(usize) -> Result<VoxelGrid>,
{
    params.validate()?;
    if (score.sigma - params.sigma).abs() > 1e-12 {
        return Err(VoxError::Argument(format!(
            "score sigma {} differs from walk sigma {}",
            score.sigma, params.sigma
        )));
    }
    init.check_finite(0)?;

    let mut y = init.y;
    let mut v = init.v;
    let half_dt = 0.5 * params.dt;
    let c1 = (-params.gamma * params.dt).exp();
    let c2 = (params.u * (1.0 - c1 * c1)).sqrt();

    let mut force = score.eval(&y)?; // u * s(y) applied with the half step
    let mut saved = Vec::with_capacity(params.steps / params.save_every);

    for step in 1..=params.steps {
        // B: v += dt/2 * u * s(y)
        for (vv, f) in v.data.iter_mut().zip(&force.data) {
            *vv += half_dt * params.u * f;
        }
        // A: y += dt/2 * v
        for (yy, vv) in y.data.iter_mut().zip(&v.data) {
            *yy += half_dt * vv;
        }
        // O: v = c1 v + sqrt(u (1 - c1^2)) xi
        if c2 > 0.0 {
            let noise = xi(step)?;
            if noise.data.len() != v.data.len() {
                return Err(VoxError::Shape("noise field shape mismatch".into()));
            }
            for (vv, n) in v.data.iter_mut().zip(&noise.data) {
                *vv = c1 * *vv + c2 * n;
            }
        } else if c1 != 1.0 {
            for vv in &mut v.data {
                *vv *= c1;
            }
        }
        // A: y += dt/2 * v
        for (yy, vv) in y.data.iter_mut().zip(&v.data) {
            *yy += half_dt * vv;
        }
        // B: v += dt/2 * u * s(y)
        force = score.eval(&y)?;
        for (vv, f) in v.data.iter_mut().zip(&force.data) {
            *vv += half_dt * params.u * f;
        }

        if y.data.iter().chain(&v.data).any(|x| !x.is_finite()) {
            let max_y = y.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            return Err(VoxError::Divergence { step, diag: format!("max|y| = {max_y}") });
        }
        if step % params.save_every == 0 {
            saved.push(ChainState { y: y.clone(), v: v.clone(), step });
        }
    }
    Ok(saved)
}

/// BAOAB walk drawing Brownian increments from the given RNG stream.
pub fn langevin_walk<R: rand::Rng>(
    score: &ScoreField,
    init: ChainState,
    params: &WalkParams,
    rng: &mut R,
) -> Result<Vec<ChainState>> {
    let spec = init.y.spec.clone();
    langevin_walk_with(score, init, params, |_| Ok(sample_noise_field(&spec, 1.0, rng)))
}

/// Jump: one denoiser pass followed by peak finding.
pub fn jump_denoise(
    d: &dyn Denoiser,
    y: &VoxelGrid,
    sigma: f64,
    peaks: &PeakParams,
) -> Result<PeakFindResult> {
    let clean = d.denoise(y, sigma)?;
    Ok(find_peaks(&clean, peaks))
}

/// The paper-style rotation schedule: 0, 90, 180, 270 and 360 degrees
/// about +z (all exact grid actions; the last coincides with the first).
pub fn z_rotation_schedule() -> Vec<RotationOp> {
    (0..5)
        .map(|k| {
            rot_axis_angle(Vec3::new(0.0, 0.0, 1.0), k as f64 * std::f64::consts::FRAC_PI_2)
                .expect("z axis is valid")
        })
        .collect()
}

/// Seeded-generation protocol.
#[derive(Clone)]
pub struct SeedProtocol {
    pub seed_molecule: Molecule,
    pub rotations: Vec<RotationOp>,
    /// Chains per rotation.
    pub chains: usize,
    pub steps: usize,
    pub save_every: usize,
    /// Reuse the rotated-arm RNG streams for the unrotated arm.
    pub matched_noise: bool,
}

impl SeedProtocol {
    pub fn paper_default(seed_molecule: Molecule) -> SeedProtocol {
        SeedProtocol {
            seed_molecule,
            rotations: z_rotation_schedule(),
            chains: 5,
            steps: 100,
            save_every: 10,
            matched_noise: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(VoxError::Argument("chains must be >= 1".into()));
        }
        if self.rotations.is_empty() {
            return Err(VoxError::Argument("rotation list must be non-empty".into()));
        }
        Ok(())
    }

    pub fn molecules_per_arm(&self) -> usize {
        self.rotations.len() * self.chains * (self.steps / self.save_every)
    }
}

/// Which controlled experiment a run belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenerationArm {
    /// Experiment A: chains start from the rotated seed, with the shared
    /// noise fields rotated alongside.
    RotatedSeed,
    /// Experiment B: chains start from the unrotated seed with the shared
    /// (unrotated) noise fields.
    MatchedNoise,
}

impl GenerationArm {
    pub fn label(self) -> &'static str {
        match self {
            GenerationArm::RotatedSeed => "rotated_seed",
            GenerationArm::MatchedNoise => "matched_noise",
        }
    }
}

/// One generated molecule with full provenance.
#[derive(Clone, Debug)]
pub struct GenRecord {
    pub seed_index: usize,
    pub rotation_index: usize,
    pub chain_index: usize,
    pub step: usize,
    pub result: PeakFindResult,
}

/// All molecules generated by one protocol arm.
#[derive(Clone)]
pub struct GenerationRun {
    pub arm: GenerationArm,
    pub records: Vec<GenRecord>,
}

impl GenerationRun {
    pub fn molecules(&self) -> Vec<Molecule> {
        self.records.iter().filter_map(|r| r.result.molecule()).collect()
    }
}

/// Run one protocol arm for one seed molecule.
///
/// RNG streams are keyed by `(master, seed_index, rotation, chain)` and are
/// identical in both arms; the rotated arm applies the rotation to the seed,
/// the initial noise, and every Brownian increment, so an exactly
/// equivariant denoiser produces rotated copies of the matched-noise arm's
/// trajectories.
pub fn seeded_generate(
    d: &dyn Denoiser,
    protocol: &SeedProtocol,
    params: &WalkParams,
    spec: &GridSpec,
    peaks: &PeakParams,
    arm: GenerationArm,
    master_seed: u64,
    seed_index: usize,
) -> Result<GenerationRun> {
    protocol.validate()?;
    let mut walk_params = *params;
    walk_params.steps = protocol.steps;
    walk_params.save_every = protocol.save_every;
    walk_params.validate()?;

    let seed_mol = protocol.seed_molecule.centered();
    // the fit check is rotation-invariant, but fail early with the worst atom
    voxelize(&seed_mol, spec)?;
    let clean = voxelize(&seed_mol, spec)?;

    let jobs: Vec<(usize, usize)> = (0..protocol.rotations.len())
        .flat_map(|ri| (0..protocol.chains).map(move |ci| (ri, ci)))
        .collect();

    let score = ScoreField::new(d, walk_params.sigma)?;
    let mut records: Vec<Vec<GenRecord>> = jobs
        .par_iter()
        .map(|&(ri, ci)| -> Result<Vec<GenRecord>> {
            let rot = &protocol.rotations[ri];
            let stream_path = |tag: u64| {
                let mut path = vec![seed_index as u64, ri as u64, ci as u64, tag];
                if !protocol.matched_noise {
                    path.push(match arm {
                        GenerationArm::RotatedSeed => 1,
                        GenerationArm::MatchedNoise => 2,
                    });
                }
                path
            };
            let mut init_rng = crate::rng::stream(master_seed, &stream_path(0));
            let eps = sample_noise_field(spec, walk_params.sigma, &mut init_rng);

            let y0 = match arm {
                GenerationArm::RotatedSeed => {
                    let rotated_clean = voxelize(
                        &rotate_points(rot, &seed_mol, RotationCenter::GridCenter),
                        spec,
                    )?;
                    crate::voxel::grid_add(&rotated_clean, &rotate_grid(&eps, rot)?)
                }
                GenerationArm::MatchedNoise => crate::voxel::grid_add(&clean, &eps),
            };

            let mut walk_rng = crate::rng::stream(master_seed, &stream_path(1));
            let saved = langevin_walk_with(
                &score,
                ChainState::at_rest(y0),
                &walk_params,
                |_| {
                    let field = sample_noise_field(spec, 1.0, &mut walk_rng);
                    match arm {
                        GenerationArm::RotatedSeed => rotate_grid(&field, rot),
                        GenerationArm::MatchedNoise => Ok(field),
                    }
                },
            )
            .map_err(|e| match e {
                VoxError::Divergence { step, diag } => VoxError::Divergence {
                    step,
                    diag: format!("{diag} (rotation {ri}, chain {ci})"),
                },
                other => other,
            })?;

            saved
                .into_iter()
                .map(|state| {
                    Ok(GenRecord {
                        seed_index,
                        rotation_index: ri,
                        chain_index: ci,
                        step: state.step,
                        result: jump_denoise(d, &state.y, walk_params.sigma, peaks)?,
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut flat = Vec::with_capacity(protocol.molecules_per_arm());
    for chunk in records.drain(..) {
        flat.extend(chunk);
    }
    Ok(GenerationRun { arm, records: flat })
}

/// Line-delimited record serialization: provenance + XYZ payload.
pub fn write_generation_run(run: &GenerationRun, path: &std::path::Path) -> Result<()> {
    use std::io::Write as _;
    let mut f = std::fs::File::create(path)?;
    for r in &run.records {
        let xyz = r.result.molecule().map(|m| crate::mol_io::write_molecule(&m));
        let rec = serde_json::json!({
            "arm": run.arm.label(),
            "seed": r.seed_index,
            "rotation": r.rotation_index,
            "chain": r.chain_index,
            "step": r.step,
            "refine_fallbacks": r.result.refine_fallbacks,
            "xyz": xyz,
        });
        writeln!(f, "{rec}")?;
    }
    Ok(())
}
