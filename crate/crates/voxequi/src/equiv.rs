//! Equivariance measurement.
//!
//! The reconstruction-equivariance error compares the rotated reconstruction
//! of an unrotated input against the reconstruction of the rotated input.
//! The MSE loss decomposition splits the rotation-augmented loss into a
//! prediction term (loss of the rotation-averaged, back-rotated output) and
//! an equivariance term (per-coordinate variance of back-rotated outputs),
//! an identity that holds exactly for squared error. Matched-rotated noise
//! is the default convention: the rotated branch sees exactly the rotated
//! noisy input, so an exactly equivariant model scores identically zero.

use crate::denoisers::Denoiser;
use crate::error::{Result, VoxError};
use crate::geom::{rotate_grid, rotate_points, GridAction, RotationCenter, RotationOp, Vec3};
use crate::mol_io::{Dataset, Molecule};
use crate::voxel::{sample_noise_field, voxelize, GridSpec};
use rayon::prelude::*;

/// Noise handling for rotated branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseConvention {
    /// The rotated branch sees the grid-rotated copy of the same noisy
    /// input. Requires an exact grid action.
    MatchedRotated,
    /// The rotated branch draws its own noise realization.
    Fresh,
}

/// Mean squared voxel difference between `R(x_hat_0)` and `x_hat_n`.
pub fn recon_equivariance_error<R: rand::Rng>(
    d: &dyn Denoiser,
    mol: &Molecule,
    rot: &RotationOp,
    spec: &GridSpec,
    sigma: f64,
    rng: &mut R,
    convention: NoiseConvention,
) -> Result<f64> {
    let x = voxelize(&mol.centered(), spec)?;
    let eps = sample_noise_field(spec, sigma, rng);
    let noisy = crate::voxel::grid_add(&x, &eps);
    let x_hat_0 = d.denoise(&noisy, sigma)?;

    let rotated_input = match convention {
        NoiseConvention::MatchedRotated => {
            if rot.grid_action != GridAction::ExactPermutation {
                return Err(VoxError::Convention(
                    "matched_rotated noise requires an exact grid action".into(),
                ));
            }
            rotate_grid(&noisy, rot)?
        }
        NoiseConvention::Fresh => {
            let eps2 = sample_noise_field(spec, sigma, rng);
            crate::voxel::grid_add(&rotate_grid(&x, rot)?, &eps2)
        }
    };
    let x_hat_n = d.denoise(&rotated_input, sigma)?;
    let rotated_recon = rotate_grid(&x_hat_0, rot)?;
    Ok(rotated_recon.mean_sq_diff(&x_hat_n))
}

/// Core bias-variance split over a set of back-rotated outputs.
///
/// Returns `(total, prediction, equivariance)` where
/// `total = mean_R |z_R - y|^2 / D`, `prediction = |mean_R z_R - y|^2 / D`,
/// and `equivariance = (1/D) sum_i Var_R(z_R[i])` with population variance.
/// `total = prediction + equivariance` holds exactly for MSE.
pub fn decompose_outputs(outputs: &[Vec<f64>], target: &[f64]) -> (f64, f64, f64) {
    let n = outputs.len() as f64;
    let dim = target.len();
    let df = dim as f64;

    let mut total = 0.0;
    for z in outputs {
        let mut s = 0.0;
        for (zi, yi) in z.iter().zip(target) {
            let d = zi - yi;
            s += d * d;
        }
        total += s / df;
    }
    total /= n;

    let mut mean = vec![0.0f64; dim];
    for z in outputs {
        for (m, zi) in mean.iter_mut().zip(z) {
            *m += zi;
        }
    }
    for m in &mut mean {
        *m /= n;
    }

    let mut prediction = 0.0;
    for (m, yi) in mean.iter().zip(target) {
        let d = m - yi;
        prediction += d * d;
    }
    prediction /= df;

    let mut variance = 0.0;
    for z in outputs {
        for (zi, m) in z.iter().zip(&mean) {
            let d = zi - m;
            variance += d * d;
        }
    }
    variance /= n * df;

    (total, prediction, variance)
}

#[derive(Clone, Debug)]
pub struct MoleculeDecomposition {
    pub index: usize,
    pub total: f64,
    pub prediction: f64,
    pub equivariance: f64,
}

/// Dataset-level decomposition report.
#[derive(Clone, Debug)]
pub struct DecompositionReport {
    pub total_loss: f64,
    pub prediction_error: f64,
    pub equivariance_error: f64,
    /// `total - (prediction + equivariance)`; vanishes for MSE.
    pub residual: f64,
    pub per_molecule: Vec<MoleculeDecomposition>,
    pub rotation_set: String,
}

/// Order-independent mean: sort by value before reduction so parallel and
/// permuted inputs reduce to bit-identical sums.
fn stable_mean(values: &[f64]) -> f64 {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.iter().sum::<f64>() / sorted.len().max(1) as f64
}

/// Exact MSE decomposition of the rotation-augmented denoising loss.
///
/// Per molecule, with matched-rotated noise: `z_R = R^-1 D(R (x + eps))`
/// over the rotation set, decomposed against the clean target `x`.
pub fn mse_loss_decomposition(
    d: &dyn Denoiser,
    dataset: &Dataset,
    rotation_set: &[RotationOp],
    spec: &GridSpec,
    sigma: f64,
    master_seed: u64,
) -> Result<DecompositionReport> {
    if rotation_set.is_empty() {
        return Err(VoxError::Argument("rotation set must be non-empty".into()));
    }
    if rotation_set.iter().any(|r| r.grid_action != GridAction::ExactPermutation) {
        return Err(VoxError::Argument(
            "loss decomposition requires exact grid actions".into(),
        ));
    }
    if dataset.is_empty() {
        return Err(VoxError::Argument("dataset must be non-empty".into()));
    }

    let per_molecule: Result<Vec<MoleculeDecomposition>> = dataset
        .molecules
        .par_iter()
        .enumerate()
        .map(|(idx, mol)| {
            let x = voxelize(&mol.centered(), spec)?;
            let mut rng = crate::rng::stream(master_seed, &[0xdec0, idx as u64]);
            let eps = sample_noise_field(spec, sigma, &mut rng);
            let noisy = crate::voxel::grid_add(&x, &eps);
            let outputs: Result<Vec<Vec<f64>>> = rotation_set
                .iter()
                .map(|r| {
                    let den = d.denoise(&rotate_grid(&noisy, r)?, sigma)?;
                    Ok(rotate_grid(&den, &r.inverse())?.data)
                })
                .collect();
            let (total, prediction, equivariance) = decompose_outputs(&outputs?, &x.data);
            Ok(MoleculeDecomposition { index: idx, total, prediction, equivariance })
        })
        .collect();
    let per_molecule = per_molecule?;

    let total_loss = stable_mean(&per_molecule.iter().map(|m| m.total).collect::<Vec<_>>());
    let prediction_error =
        stable_mean(&per_molecule.iter().map(|m| m.prediction).collect::<Vec<_>>());
    let equivariance_error =
        stable_mean(&per_molecule.iter().map(|m| m.equivariance).collect::<Vec<_>>());

    Ok(DecompositionReport {
        total_loss,
        prediction_error,
        equivariance_error,
        residual: total_loss - (prediction_error + equivariance_error),
        per_molecule,
        rotation_set: format!("{} exact rotations", rotation_set.len()),
    })
}

/// Second-order (Hessian) decomposition diagnostic for the per-voxel Huber
/// loss. No exactness holds; the Taylor remainder is reported as-is.
#[derive(Clone, Debug)]
pub struct HuberDecomposition {
    pub total: f64,
    pub prediction: f64,
    pub equivariance_second_order: f64,
    pub taylor_remainder: f64,
    pub delta: f64,
}

pub fn huber_loss_decomposition(
    d: &dyn Denoiser,
    dataset: &Dataset,
    rotation_set: &[RotationOp],
    spec: &GridSpec,
    sigma: f64,
    delta: f64,
    master_seed: u64,
) -> Result<HuberDecomposition> {
    if rotation_set.is_empty() || dataset.is_empty() {
        return Err(VoxError::Argument("need a rotation set and a dataset".into()));
    }
    let huber = |r: f64| -> f64 {
        if r.abs() <= delta {
            0.5 * r * r
        } else {
            delta * (r.abs() - 0.5 * delta)
        }
    };
    let mut totals = Vec::new();
    let mut preds = Vec::new();
    let mut equivs = Vec::new();
    for (idx, mol) in dataset.molecules.iter().enumerate() {
        let x = voxelize(&mol.centered(), spec)?;
        let mut rng = crate::rng::stream(master_seed, &[0x4875, idx as u64]);
        let eps = sample_noise_field(spec, sigma, &mut rng);
        let noisy = crate::voxel::grid_add(&x, &eps);
        let mut outputs = Vec::with_capacity(rotation_set.len());
        for r in rotation_set {
            let den = d.denoise(&rotate_grid(&noisy, r)?, sigma)?;
            outputs.push(rotate_grid(&den, &r.inverse())?.data);
        }
        let dim = x.data.len() as f64;
        let n = outputs.len() as f64;
        let total: f64 = outputs
            .iter()
            .map(|z| z.iter().zip(&x.data).map(|(zi, yi)| huber(zi - yi)).sum::<f64>() / dim)
            .sum::<f64>()
            / n;
        let mut mean = vec![0.0f64; x.data.len()];
        for z in &outputs {
            for (m, zi) in mean.iter_mut().zip(z) {
                *m += zi / n;
            }
        }
        let pred: f64 =
            mean.iter().zip(&x.data).map(|(m, yi)| huber(m - yi)).sum::<f64>() / dim;
        // 0.5 * h''(mu - y) * Var_R, with h'' = 1 inside the quadratic zone
        let mut equiv = 0.0;
        for (i, m) in mean.iter().enumerate() {
            let hpp = if (m - x.data[i]).abs() <= delta { 1.0 } else { 0.0 };
            if hpp > 0.0 {
                let var: f64 =
                    outputs.iter().map(|z| (z[i] - m) * (z[i] - m)).sum::<f64>() / n;
                equiv += 0.5 * hpp * var;
            }
        }
        equiv /= dim;
        totals.push(total);
        preds.push(pred);
        equivs.push(equiv);
    }
    let total = stable_mean(&totals);
    let prediction = stable_mean(&preds);
    let equivariance_second_order = stable_mean(&equivs);
    Ok(HuberDecomposition {
        total,
        prediction,
        equivariance_second_order,
        taylor_remainder: total - (prediction + equivariance_second_order),
        delta,
    })
}

/// Mean over molecules of `|D(x + eps) - x|^2 / D` — the ground-truth
/// reconstruction error the equivariance error is compared against.
pub fn baseline_recon_error(
    d: &dyn Denoiser,
    dataset: &Dataset,
    spec: &GridSpec,
    sigma: f64,
    master_seed: u64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(VoxError::Argument("dataset must be non-empty".into()));
    }
    let errs: Result<Vec<f64>> = dataset
        .molecules
        .par_iter()
        .enumerate()
        .map(|(idx, mol)| {
            let x = voxelize(&mol.centered(), spec)?;
            let mut rng = crate::rng::stream(master_seed, &[0xba5e, idx as u64]);
            let noisy = crate::voxel::grid_add(&x, &sample_noise_field(spec, sigma, &mut rng));
            let den = d.denoise(&noisy, sigma)?;
            Ok(den.mean_sq_diff(&x))
        })
        .collect();
    Ok(stable_mean(&errs?))
}

/// One point of an equivariance-vs-angle curve.
#[derive(Clone, Debug)]
pub struct CurvePoint {
    pub angle_deg: f64,
    pub mean_error: f64,
    pub std_error: f64,
    pub convention: NoiseConvention,
    /// Identity-function error of the grid action itself (zero for exact
    /// actions, the measured interpolation floor for trilinear ones).
    pub interpolation_floor: f64,
}

#[derive(Clone, Debug)]
pub struct EquivCurve {
    pub axis: Vec3,
    pub points: Vec<CurvePoint>,
    pub baseline: f64,
}

/// Mean reconstruction-equivariance error per angle about one axis,
/// with the ground-truth reconstruction error as the reference line.
pub fn equiv_error_curve(
    d: &dyn Denoiser,
    dataset: &Dataset,
    axis: Vec3,
    angles_deg: &[f64],
    spec: &GridSpec,
    sigma: f64,
    master_seed: u64,
) -> Result<EquivCurve> {
    let baseline = baseline_recon_error(d, dataset, spec, sigma, master_seed)?;
    let mut points = Vec::with_capacity(angles_deg.len());
    for (ai, &deg) in angles_deg.iter().enumerate() {
        let rot = crate::geom::rot_axis_angle(axis, deg.to_radians())?;
        let convention = if rot.grid_action == GridAction::ExactPermutation {
            NoiseConvention::MatchedRotated
        } else {
            NoiseConvention::Fresh
        };
        let errs: Result<Vec<f64>> = dataset
            .molecules
            .par_iter()
            .enumerate()
            .map(|(idx, mol)| {
                let mut rng =
                    crate::rng::stream(master_seed, &[0xc04e, ai as u64, idx as u64]);
                recon_equivariance_error(d, mol, &rot, spec, sigma, &mut rng, convention)
            })
            .collect();
        let errs = errs?;
        let mean = stable_mean(&errs);
        let var = stable_mean(&errs.iter().map(|e| (e - mean) * (e - mean)).collect::<Vec<_>>());
        let floor = if convention == NoiseConvention::Fresh {
            let floors: Result<Vec<f64>> = dataset
                .molecules
                .par_iter()
                .map(|mol| {
                    let x = voxelize(&mol.centered(), spec)?;
                    let via_grid = rotate_grid(&x, &rot)?;
                    let via_points =
                        voxelize(&rotate_points(&rot, &mol.centered(), RotationCenter::GridCenter), spec)?;
                    Ok(via_grid.mean_sq_diff(&via_points))
                })
                .collect();
            stable_mean(&floors?)
        } else {
            0.0
        };
        points.push(CurvePoint {
            angle_deg: deg,
            mean_error: mean,
            std_error: var.sqrt(),
            convention,
            interpolation_floor: floor,
        });
    }
    Ok(EquivCurve { axis, points, baseline })
}

/// Cosine-similarity matrix between latent embeddings of one molecule under
/// a set of rotations about one axis.
#[derive(Clone, Debug)]
pub struct CosineMatrix {
    pub angles_deg: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    /// Angles whose grid action forced fresh (unmatched) noise.
    pub fresh_noise: Vec<bool>,
    /// Cells with an all-zero embedding on either side (similarity NaN).
    pub undefined: Vec<(usize, usize)>,
}

impl CosineMatrix {
    pub fn mean_off_diagonal(&self) -> f64 {
        let n = self.values.len();
        let mut s = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += self.values[i][j];
                    count += 1;
                }
            }
        }
        s / count.max(1) as f64
    }
}

pub fn latent_cosine_matrix(
    d: &dyn Denoiser,
    mol: &Molecule,
    angles_deg: &[f64],
    axis: Vec3,
    spec: &GridSpec,
    sigma: f64,
    master_seed: u64,
) -> Result<CosineMatrix> {
    let x = voxelize(&mol.centered(), spec)?;
    let mut base_rng = crate::rng::stream(master_seed, &[0xe4b3]);
    let eps = sample_noise_field(spec, sigma, &mut base_rng);
    let noisy = crate::voxel::grid_add(&x, &eps);

    let mut embeddings = Vec::with_capacity(angles_deg.len());
    let mut fresh_noise = Vec::with_capacity(angles_deg.len());
    for (ai, &deg) in angles_deg.iter().enumerate() {
        let rot = crate::geom::rot_axis_angle(axis, deg.to_radians())?;
        let input = if rot.grid_action == GridAction::ExactPermutation {
            fresh_noise.push(false);
            rotate_grid(&noisy, &rot)?
        } else {
            fresh_noise.push(true);
            let mut rng = crate::rng::stream(master_seed, &[0xe4b3, 1 + ai as u64]);
            crate::voxel::grid_add(&rotate_grid(&x, &rot)?, &sample_noise_field(spec, sigma, &mut rng))
        };
        embeddings.push(d.embed(&input)?);
    }

    let n = embeddings.len();
    let norms: Vec<f64> = embeddings
        .iter()
        .map(|e| e.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut values = vec![vec![0.0f64; n]; n];
    let mut undefined = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if j < i {
                values[i][j] = values[j][i];
                continue;
            }
            if i == j {
                values[i][j] = if norms[i] > 0.0 { 1.0 } else { f64::NAN };
                if norms[i] == 0.0 {
                    undefined.push((i, j));
                }
                continue;
            }
            if norms[i] == 0.0 || norms[j] == 0.0 {
                values[i][j] = f64::NAN;
                undefined.push((i, j));
                continue;
            }
            let dot: f64 = embeddings[i].iter().zip(&embeddings[j]).map(|(a, b)| a * b).sum();
            values[i][j] = dot / (norms[i] * norms[j]);
        }
    }
    Ok(CosineMatrix { angles_deg: angles_deg.to_vec(), values, fresh_noise, undefined })
}
