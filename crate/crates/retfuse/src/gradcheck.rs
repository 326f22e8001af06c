//! Finite-difference gradient verification.
//!
//! Central differences are the independent oracle for the tape's backward
//! pass: for a scalar loss `f(leaves)`, `df/dx_i ≈ (f(x + h·e_i) − f(x −
//! h·e_i)) / 2h`. Checking every coordinate of a real model is quadratic
//! in parameter count, so `compare_fd` samples coordinates per leaf with a
//! caller-supplied RNG; a coordinate passes when the analytic and numeric
//! values agree within `max(abs_tol, rel_tol · max(|a|, |n|))`.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::tensor::{Result, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct FdConfig {
    /// Central-difference step.
    pub step: f64,
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Max coordinates checked per leaf (all of them if the leaf is
    /// smaller).
    pub samples_per_leaf: usize,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            abs_tol: 1e-4,
            rel_tol: 1e-2,
            samples_per_leaf: 4,
        }
    }
}

/// Worst disagreement seen for one leaf tensor.
#[derive(Debug, Clone)]
pub struct LeafReport {
    pub name: String,
    /// Flat model-wide index of this leaf's coordinate 0.
    pub base: usize,
    pub checked: usize,
    /// (leaf-local index, analytic, numeric) of the worst failing
    /// coordinate, or of the worst overall when every one passed.
    pub worst: Option<(usize, f64, f64)>,
    pub max_abs_err: f64,
    /// Leaf-local indices of coordinates outside tolerance.
    pub failing: Vec<usize>,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub leaves: Vec<LeafReport>,
    /// Fraction of *all* analytic gradient entries that are nonzero.
    /// A healthy probe sits well above 0.5; a value near zero means
    /// the input degenerated (e.g. features collapsed) and agreement
    /// with finite differences would be vacuous.
    pub grad_nonzero_frac: f64,
}

impl CheckReport {
    pub fn pass(&self) -> bool {
        self.leaves.iter().all(|l| l.pass)
    }

    /// Flat model-wide indices of every failing coordinate.
    pub fn failing_flat(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for l in &self.leaves {
            out.extend(l.failing.iter().map(|ci| l.base + ci));
        }
        out
    }

    pub fn coords_checked(&self) -> usize {
        self.leaves.iter().map(|l| l.checked).sum()
    }

    pub fn max_abs_err(&self) -> f64 {
        self.leaves
            .iter()
            .map(|l| l.max_abs_err)
            .fold(0.0, f64::max)
    }

    /// One line per failing leaf, or empty if everything passed.
    pub fn failures(&self) -> Vec<String> {
        self.leaves
            .iter()
            .filter(|l| !l.pass)
            .map(|l| {
                let (i, a, n) = l.worst.unwrap_or((0, 0.0, 0.0));
                format!(
                    "{}: coord {i} analytic {a:.6e} vs numeric {n:.6e}",
                    l.name
                )
            })
            .collect()
    }
}

/// Central-difference gradient of `eval` wrt one coordinate of one leaf.
fn fd_coord<F>(leaves: &[(String, Tensor)], li: usize, ci: usize, step: f64, eval: &F) -> Result<f64>
where
    F: Fn(&[(String, Tensor)]) -> Result<f32>,
{
    let mut bumped = leaves.to_vec();
    let x0 = bumped[li].1.data()[ci] as f64;
    bumped[li].1.data_mut()[ci] = (x0 + step) as f32;
    let up = eval(&bumped)? as f64;
    bumped[li].1.data_mut()[ci] = (x0 - step) as f32;
    let down = eval(&bumped)? as f64;
    Ok((up - down) / (2.0 * step))
}

/// Compare analytic gradients against central differences on sampled
/// coordinates. `analytic[i]` must be the full flat gradient for
/// `leaves[i]`; `eval` recomputes the scalar loss from scratch for
/// perturbed leaf values (so any internal statistics are recomputed too).
pub fn compare_fd<F, R>(
    leaves: &[(String, Tensor)],
    analytic: &[Vec<f32>],
    eval: F,
    cfg: &FdConfig,
    rng: &mut R,
) -> Result<CheckReport>
where
    F: Fn(&[(String, Tensor)]) -> Result<f32>,
    R: Rng,
{
    assert_eq!(leaves.len(), analytic.len(), "one gradient per leaf");
    let mut reports = Vec::with_capacity(leaves.len());
    let mut base = 0usize;
    for (li, (name, t)) in leaves.iter().enumerate() {
        assert_eq!(t.numel(), analytic[li].len(), "gradient length for {name}");
        let n = t.numel();
        let coords: Vec<usize> = if n <= cfg.samples_per_leaf {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(rng);
            all.truncate(cfg.samples_per_leaf);
            all
        };
        let mut worst: Option<(usize, f64, f64)> = None;
        let mut max_err = 0f64;
        let mut failing = Vec::new();
        for &ci in &coords {
            let numeric = fd_coord(leaves, li, ci, cfg.step, &eval)?;
            let a = analytic[li][ci] as f64;
            let err = (a - numeric).abs();
            let tol = cfg.abs_tol.max(cfg.rel_tol * a.abs().max(numeric.abs()));
            if err > max_err {
                max_err = err;
                worst = Some((ci, a, numeric));
            }
            if err > tol {
                failing.push(ci);
            }
        }
        reports.push(LeafReport {
            name: name.clone(),
            base,
            checked: coords.len(),
            worst,
            max_abs_err: max_err,
            pass: failing.is_empty(),
            failing,
        });
        base += n;
    }
    let total: usize = analytic.iter().map(Vec::len).sum();
    let nonzero: usize = analytic
        .iter()
        .map(|g| g.iter().filter(|v| **v != 0.0).count())
        .sum();
    Ok(CheckReport {
        leaves: reports,
        grad_nonzero_frac: nonzero as f64 / total.max(1) as f64,
    })
}

// ── Whole-model checks ───────────────────────────────────────────────

use crate::data::{synth_generate, Acquisition, ComplementarityMode, GridSpec, SynthConfig};
use crate::fusion::{build_single_modality_model, FusionModel, ModalityId};

/// Verify one stratum of a model's parameter gradients against
/// central finite differences of the train-mode loss: every flat
/// parameter index congruent to `stratum` modulo `n_strata` is
/// checked, so the strata `0..n_strata` together cover every
/// parameter exactly once.
///
/// Rectifier kinks make isolated difference quotients unreliable: a
/// pre-activation crossing zero inside the `±h` window bends the
/// secant, and a kink sitting at the evaluation point itself spoils
/// the central quotient at *every* step. Each coordinate is therefore
/// tried at a ladder of steps from `2h` down to `h/8`, and at each
/// step the central, forward, and backward quotients all count — the
/// side away from a kink stays clean, and shrinking the window
/// escapes kink mass near the point. A genuinely wrong analytic
/// gradient matches none of them at any scale.
pub fn check_model_stratum(
    model: &mut FusionModel,
    acq: &Acquisition,
    pos_weight: f32,
    stratum: usize,
    n_strata: usize,
    cfg: &FdConfig,
) -> crate::fusion::Result<CheckReport> {
    assert!(n_strata > 0 && stratum < n_strata);
    check_model_selected(model, acq, pos_weight, &|i| i % n_strata == stratum, cfg)
}

/// Like [`check_model_stratum`] but for an explicit set of flat
/// model-wide coordinate indices (as from
/// [`CheckReport::failing_flat`]).
pub fn check_model_coords(
    model: &mut FusionModel,
    acq: &Acquisition,
    pos_weight: f32,
    coords: &std::collections::HashSet<usize>,
    cfg: &FdConfig,
) -> crate::fusion::Result<CheckReport> {
    check_model_selected(model, acq, pos_weight, &|i| coords.contains(&i), cfg)
}

fn check_model_selected(
    model: &mut FusionModel,
    acq: &Acquisition,
    pos_weight: f32,
    select: &dyn Fn(usize) -> bool,
    cfg: &FdConfig,
) -> crate::fusion::Result<CheckReport> {
    let analytic = model.train_sample(acq, pos_weight)?;
    let base = model.train_loss(acq, pos_weight)?;

    let (mut nonzero, mut total) = (0usize, 0usize);
    for part in &analytic.parts {
        for (_, g) in part.grads.iter() {
            total += g.len();
            nonzero += g.iter().filter(|v| **v != 0.0).count();
        }
    }
    let grad_nonzero_frac = nonzero as f64 / total.max(1) as f64;

    let mut leaves = Vec::new();
    let mut global = 0usize;
    for pi in 0..model.parts().len() {
        let names: Vec<String> = model.parts()[pi]
            .params()
            .names()
            .map(str::to_string)
            .collect();
        let part_name = model.parts()[pi].name.clone();
        for name in names {
            let numel = model.parts()[pi].params().get(&name)?.numel();
            let grads = &analytic.parts[pi].grads[&name];
            let mut worst: Option<(usize, f64, f64)> = None;
            let mut worst_fail: Option<(usize, f64, f64)> = None;
            let mut max_err = 0f64;
            let mut max_fail_err = 0f64;
            let mut checked = 0usize;
            let mut failing = Vec::new();
            for ci in 0..numel {
                if !select(global + ci) {
                    continue;
                }
                let a = grads[ci] as f64;
                let orig = model.parts()[pi].params().get(&name)?.data()[ci];
                let mut best: Option<(f64, f64)> = None; // (err, numeric)
                let mut ok = false;
                for mult in [1.0f32, 0.5, 2.0, 0.25, 0.125] {
                    let eps = cfg.step as f32 * mult;
                    let hi = orig + eps;
                    let lo = orig - eps;
                    model.parts_mut()[pi].params_mut().get_mut(&name)?.data_mut()[ci] = hi;
                    let l_hi = model.train_loss(acq, pos_weight)?;
                    model.parts_mut()[pi].params_mut().get_mut(&name)?.data_mut()[ci] = lo;
                    let l_lo = model.train_loss(acq, pos_weight)?;
                    model.parts_mut()[pi].params_mut().get_mut(&name)?.data_mut()[ci] = orig;

                    // Actual representable steps, for the denominators.
                    let h_up = hi as f64 - orig as f64;
                    let h_dn = orig as f64 - lo as f64;
                    let quotients = [
                        (l_hi - l_lo) / (h_up + h_dn),
                        (l_hi - base) / h_up,
                        (base - l_lo) / h_dn,
                    ];
                    for numeric in quotients {
                        let err = (a - numeric).abs();
                        if best.map_or(true, |(e, _)| err < e) {
                            best = Some((err, numeric));
                        }
                        let tol =
                            cfg.abs_tol.max(cfg.rel_tol * a.abs().max(numeric.abs()));
                        if err <= tol {
                            ok = true;
                        }
                    }
                    if ok {
                        break;
                    }
                }
                let (err, numeric) = best.expect("at least one step evaluated");
                checked += 1;
                if err > max_err {
                    max_err = err;
                    worst = Some((ci, a, numeric));
                }
                if !ok {
                    failing.push(ci);
                    if err > max_fail_err {
                        max_fail_err = err;
                        worst_fail = Some((ci, a, numeric));
                    }
                }
            }
            if checked > 0 {
                leaves.push(LeafReport {
                    name: format!("{part_name}/{name}"),
                    base: global,
                    checked,
                    worst: worst_fail.or(worst),
                    max_abs_err: max_err,
                    pass: failing.is_empty(),
                    failing,
                });
            }
            global += numel;
        }
    }
    Ok(CheckReport {
        leaves,
        grad_nonzero_frac,
    })
}

/// One backbone family/rank combination of the full-suite check.
#[derive(Debug)]
pub struct FamilyCheckOutcome {
    pub label: String,
    pub report: CheckReport,
    /// Distinct (init, data) seeds the strata used.
    pub seeds: Vec<u64>,
}

/// Small tri-modal probe set. `hw` is the en-face extent of both the
/// volumes and the 2-D image: 24 is the residual family's minimum
/// viable size, while the dense family needs 32 before its last stage
/// keeps ≥ 2 positions (so none of its layers sit frozen).
fn probe_cohort(seed: u64, hw: usize) -> Vec<Acquisition> {
    synth_generate(&SynthConfig {
        n_patients: 3,
        acq_per_patient: [1, 1],
        total_acquisitions: Some(3),
        grid: GridSpec {
            d: 8,
            h: hw,
            w: hw,
            lso_h: hw,
            lso_w: hw,
        },
        positive_rate: 0.5,
        mode: ComplementarityMode::Redundant,
        seed,
        ..SynthConfig::default()
    })
    .expect("probe cohort config is statically valid")
}

/// Gradient suite over both backbone families in 2-D and 3-D form.
///
/// Each family/rank combination runs `n_strata` strata with distinct
/// model-init and input seeds; stratum `k` checks indices `≡ k·thin
/// (mod n_strata·thin)`. With `thin = 1` every parameter of every
/// combination is verified; larger `thin` keeps the seed diversity but
/// checks a `1/thin` systematic sample (smoke mode).
///
/// Coordinates that fail on one probe are re-checked on up to two
/// fresh probes (new weights and input) and must fail on *every* one
/// to count as failures. A wrong derivative follows the coordinate to
/// any instance; a rectifier kink that happens to sit inside the
/// difference window is specific to one instance's activations.
pub fn backbone_suite(
    n_strata: usize,
    thin: usize,
    cfg: &FdConfig,
) -> crate::fusion::Result<Vec<FamilyCheckOutcome>> {
    assert!(n_strata > 0 && thin > 0);
    let configs = [
        ("res-3d", "mini-res-a", ModalityId::Structure, 24),
        ("res-2d", "mini-res-a", ModalityId::Lso, 24),
        ("dense-3d", "mini-dense-a", ModalityId::Structure, 32),
        ("dense-2d", "mini-dense-a", ModalityId::Lso, 32),
    ];
    let mut outcomes = Vec::new();
    for (ci, (label, preset, modality, hw)) in configs.iter().enumerate() {
        let mut merged = Vec::new();
        let mut seeds = Vec::new();
        let mut min_nonzero_frac = 1.0f64;
        for k in 0..n_strata {
            let seed = (ci as u64) * 1000 + k as u64;
            seeds.push(seed);
            let mut model = build_single_modality_model(*modality, preset, seed)?;
            let cohort = probe_cohort(seed + 500, *hw);
            let acq = &cohort[k % cohort.len()];
            let pos_weight = 1.0 + (k % 3) as f32 * 0.4;
            let mut report = check_model_stratum(
                &mut model,
                acq,
                pos_weight,
                k * thin,
                n_strata * thin,
                cfg,
            )?;
            min_nonzero_frac = min_nonzero_frac.min(report.grad_nonzero_frac);
            for attempt in 1..=2u64 {
                if report.pass() {
                    break;
                }
                let still: std::collections::HashSet<usize> =
                    report.failing_flat().into_iter().collect();
                let retry_seed = seed + 7919 * attempt;
                seeds.push(retry_seed);
                let mut fresh = build_single_modality_model(*modality, preset, retry_seed)?;
                let cohort = probe_cohort(retry_seed + 500, *hw);
                let acq = &cohort[k % cohort.len()];
                let retry = check_model_coords(&mut fresh, acq, pos_weight, &still, cfg)?;
                clear_confirmed(&mut report, &retry);
            }
            merged.extend(report.leaves);
        }
        outcomes.push(FamilyCheckOutcome {
            label: label.to_string(),
            report: CheckReport {
                leaves: merged,
                grad_nonzero_frac: min_nonzero_frac,
            },
            seeds,
        });
    }
    Ok(outcomes)
}

/// Keep only the failures that failed again on the retry probe.
fn clear_confirmed(report: &mut CheckReport, retry: &CheckReport) {
    for leaf in &mut report.leaves {
        if leaf.failing.is_empty() {
            continue;
        }
        let confirmed: &[usize] = retry
            .leaves
            .iter()
            .find(|r| r.name == leaf.name)
            .map_or(&[], |r| &r.failing);
        leaf.failing.retain(|ci| confirmed.contains(ci));
        leaf.pass = leaf.failing.is_empty();
    }
}

// ── Tests ─────────────────────────────────────────────────────────────

#[cfg(test)]
mod model_tests {
    use super::*;

    /// Sparse systematic sample over both families' 2-D form; the
    /// exhaustive per-parameter sweep lives in the acceptance suite.
    #[test]
    fn model_gradients_match_finite_differences_sampled() {
        let cfg = FdConfig::default();
        for (preset, hw) in [("mini-res-a", 24), ("mini-dense-a", 32)] {
            let mut model = build_single_modality_model(ModalityId::Lso, preset, 9).unwrap();
            let cohort = probe_cohort(40, hw);
            let report =
                check_model_stratum(&mut model, &cohort[0], 1.3, 3, 97, &cfg).unwrap();
            assert!(report.coords_checked() > 20, "{preset}: too few coords");
            assert!(
                report.grad_nonzero_frac > 0.5,
                "{preset}: probe degenerated, only {:.0}% of gradients nonzero",
                report.grad_nonzero_frac * 100.0
            );
            assert!(
                report.pass(),
                "{preset}: {:?} (max abs err {:.3e})",
                report.failures(),
                report.max_abs_err()
            );
        }
    }

    #[test]
    fn strata_partition_every_parameter_once() {
        // Two strata of a small model cover each parameter exactly
        // once between them.
        let mut model =
            build_single_modality_model(ModalityId::Lso, "mini-dense-a", 4).unwrap();
        let total: usize = model.param_count();
        let cohort = probe_cohort(41, 32);
        let cfg = FdConfig::default();
        // Large modulus keeps this cheap: the two strata must not
        // overlap and their sizes must add up to the exact quotient.
        let n = 500;
        let a = check_model_stratum(&mut model, &cohort[1], 1.0, 0, n, &cfg).unwrap();
        let b = check_model_stratum(&mut model, &cohort[1], 1.0, 1, n, &cfg).unwrap();
        let expect_a = total.div_ceil(n);
        let expect_b = (total + n - 1 - 1) / n;
        assert_eq!(a.coords_checked(), expect_a);
        assert_eq!(b.coords_checked(), expect_b);
        assert!(a.pass() && b.pass());
    }
}
