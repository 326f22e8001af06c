//! Synthetic tri-modal dataset generator.
//!
//! Each positive acquisition carries planted, modality-specific signals
//! on a Gaussian noise floor: a bright ellipsoidal blob in the
//! structural volume, a tubular streak in the flow volume, and a bright
//! disc in the planar projection. In `redundant` mode every positive
//! expresses all three signals; in `complementary` mode each positive
//! expresses a random two-modality subset, so no single modality can
//! separate the classes on its own while any pair-aware fusion can.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Acquisition, DataError, Result};
use crate::rng;
use crate::tensor::Tensor;

// ── Configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    /// Volume depth (structure and flow).
    pub d: usize,
    /// Volume height.
    pub h: usize,
    /// Volume width.
    pub w: usize,
    /// Planar image height.
    pub lso_h: usize,
    /// Planar image width.
    pub lso_w: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            d: 16,
            h: 64,
            w: 64,
            lso_h: 64,
            lso_w: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComplementarityMode {
    /// Positives express all three modality signals.
    Redundant,
    /// Positives express a uniformly chosen two-modality subset.
    Complementary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Inclusive [min, max] acquisitions per patient.
    pub acq_per_patient: [usize; 2],
    /// Optional exact total acquisition count, reached by bumping
    /// per-patient counts within the allowed range. Left out of a
    /// parsed config, it stays unconstrained rather than inheriting
    /// the default cohort's count.
    #[serde(default)]
    pub total_acquisitions: Option<usize>,
    pub grid: GridSpec,
    /// Fraction of patients carrying the positive (grade 4) label.
    pub positive_rate: f64,
    pub s_structure: f32,
    pub s_flow: f32,
    pub s_lso: f32,
    pub noise_sigma: f32,
    pub mode: ComplementarityMode,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 64,
            acq_per_patient: [2, 3],
            total_acquisitions: Some(151),
            grid: GridSpec::default(),
            positive_rate: 0.2,
            s_structure: 1.0,
            s_flow: 1.0,
            s_lso: 1.0,
            noise_sigma: 0.25,
            mode: ComplementarityMode::Complementary,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DataError::BadConfig(msg));
        if self.n_patients < 3 {
            return bad(format!("n_patients must be >= 3, got {}", self.n_patients));
        }
        let [lo, hi] = self.acq_per_patient;
        if lo < 1 || hi < lo {
            return bad(format!("acq_per_patient must satisfy 1 <= min <= max, got [{lo}, {hi}]"));
        }
        if let Some(t) = self.total_acquisitions {
            let (min_t, max_t) = (self.n_patients * lo, self.n_patients * hi);
            if t < min_t || t > max_t {
                return bad(format!(
                    "total_acquisitions {t} outside feasible range [{min_t}, {max_t}] \
                     for {} patients x [{lo}, {hi}]",
                    self.n_patients
                ));
            }
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return bad(format!("positive_rate must lie in (0, 1), got {}", self.positive_rate));
        }
        for (name, v) in [
            ("s_structure", self.s_structure),
            ("s_flow", self.s_flow),
            ("s_lso", self.s_lso),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        let g = &self.grid;
        for (name, extent) in [
            ("grid.d", g.d),
            ("grid.h", g.h),
            ("grid.w", g.w),
            ("grid.lso_h", g.lso_h),
            ("grid.lso_w", g.lso_w),
        ] {
            // Signal radii are drawn as fractions of the extent; below 8
            // voxels the largest admissible radius collapses under the
            // 1.5-voxel floor and the planted shapes degenerate.
            if extent < 8 {
                return bad(format!(
                    "{name} = {extent} too small for planted signal radii (minimum 8)"
                ));
            }
        }
        Ok(())
    }
}

// ── Generation ───────────────────────────────────────────────────────

fn uniform(r: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * r.gen::<f64>()
}

/// Additive ellipsoidal blob `s * exp(-sum(((x-c)/r)^2))`.
fn add_blob(data: &mut [f32], shape: &[usize], s: f32, r: &mut impl Rng) {
    let nd = shape.len();
    let centers: Vec<f64> = shape
        .iter()
        .map(|&e| uniform(r, 0.30 * e as f64, 0.70 * e as f64))
        .collect();
    let radii: Vec<f64> = shape
        .iter()
        .map(|&e| uniform(r, 0.12 * e as f64, 0.22 * e as f64).max(1.5))
        .collect();
    let mut idx = vec![0usize; nd];
    for v in data.iter_mut() {
        let mut q = 0.0;
        for a in 0..nd {
            let t = (idx[a] as f64 - centers[a]) / radii[a];
            q += t * t;
        }
        *v += s * (-q).exp() as f32;
        for a in (0..nd).rev() {
            idx[a] += 1;
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

/// Additive tubular streak: Gaussian falloff from a random 3-D line.
fn add_tube(data: &mut [f32], shape: &[usize], s: f32, r: &mut impl Rng) {
    let c: Vec<f64> = shape
        .iter()
        .map(|&e| uniform(r, 0.30 * e as f64, 0.70 * e as f64))
        .collect();
    // Random direction via normalized Gaussian triple.
    let dir = loop {
        let v = [rng::gaussian(r) as f64, rng::gaussian(r) as f64, rng::gaussian(r) as f64];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            break [v[0] / n, v[1] / n, v[2] / n];
        }
    };
    let planar = shape[1].min(shape[2]) as f64;
    let radius = uniform(r, 0.06 * planar, 0.12 * planar).max(1.2);
    let r2 = radius * radius;
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    let mut i = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64 - c[0], y as f64 - c[1], x as f64 - c[2]];
                let along = p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2];
                let dist2 = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) - along * along;
                data[i] += s * (-dist2 / r2).exp() as f32;
                i += 1;
            }
        }
    }
}

struct Plan {
    /// Per-patient acquisition counts.
    counts: Vec<usize>,
    /// Per-patient positive flag.
    positive: Vec<bool>,
}

fn plan(cfg: &SynthConfig) -> Plan {
    let tag = rng::str_tag("synth");

    // Patient disease status: fixed count, shuffled assignment.
    let mut n_pos = (cfg.positive_rate * cfg.n_patients as f64).round() as usize;
    n_pos = n_pos.clamp(1, cfg.n_patients - 1);
    let mut order: Vec<usize> = (0..cfg.n_patients).collect();
    {
        use rand::seq::SliceRandom;
        let mut r = rng::stream(cfg.seed, &[tag, 1]);
        order.shuffle(&mut r);
    }
    let mut positive = vec![false; cfg.n_patients];
    for &p in order.iter().take(n_pos) {
        positive[p] = true;
    }

    // Acquisition counts, optionally forced to an exact total.
    let [lo, hi] = cfg.acq_per_patient;
    let mut r = rng::stream(cfg.seed, &[tag, 2]);
    let mut counts: Vec<usize> = (0..cfg.n_patients).map(|_| r.gen_range(lo..=hi)).collect();
    if let Some(target) = cfg.total_acquisitions {
        use rand::seq::SliceRandom;
        let mut visit: Vec<usize> = (0..cfg.n_patients).collect();
        visit.shuffle(&mut r);
        let total = |c: &[usize]| c.iter().sum::<usize>();
        let mut k = 0;
        while total(&counts) > target {
            let p = visit[k % visit.len()];
            if counts[p] > lo {
                counts[p] -= 1;
            }
            k += 1;
        }
        while total(&counts) < target {
            let p = visit[k % visit.len()];
            if counts[p] < hi {
                counts[p] += 1;
            }
            k += 1;
        }
    }
    Plan { counts, positive }
}

/// Generate the full synthetic dataset in memory.
///
/// Deterministic for a given config: every random decision draws from a
/// stream keyed by `(seed, patient, acquisition, purpose)`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<Acquisition>> {
    cfg.validate()?;
    let tag = rng::str_tag("synth");
    let plan = plan(cfg);
    let g = cfg.grid;
    let vol_shape = [g.d, g.h, g.w];
    let lso_shape = [g.lso_h, g.lso_w];

    let mut out = Vec::new();
    let mut global = 0usize;
    for p in 0..cfg.n_patients {
        for a in 0..plan.counts[p] {
            let pu = p as u64;
            let au = a as u64;
            let positive = plan.positive[p];

            // Grade: positives are grade 4; negatives draw 0-3.
            let mut meta_rng = rng::stream(cfg.seed, &[tag, 3, pu, au]);
            let grade: u8 = if positive { 4 } else { meta_rng.gen_range(0..=3) };

            // Expressed modalities: (structure, flow, lso).
            let expressed = if !positive {
                (false, false, false)
            } else {
                match cfg.mode {
                    ComplementarityMode::Redundant => (true, true, true),
                    ComplementarityMode::Complementary => match meta_rng.gen_range(0..3u8) {
                        0 => (true, true, false),
                        1 => (true, false, true),
                        _ => (false, true, true),
                    },
                }
            };

            let fill = |data: &mut Vec<f32>, n: usize, r: &mut rand_chacha::ChaCha8Rng| {
                data.extend((0..n).map(|_| cfg.noise_sigma * rng::gaussian(r)));
            };
            let jitter = |r: &mut rand_chacha::ChaCha8Rng| uniform(r, 0.8, 1.2) as f32;

            let mut structure = Vec::with_capacity(g.d * g.h * g.w);
            let mut r = rng::stream(cfg.seed, &[tag, 4, pu, au]);
            fill(&mut structure, g.d * g.h * g.w, &mut r);
            if expressed.0 {
                let s = cfg.s_structure * jitter(&mut r);
                add_blob(&mut structure, &vol_shape, s, &mut r);
            }

            let mut flow = Vec::with_capacity(g.d * g.h * g.w);
            let mut r = rng::stream(cfg.seed, &[tag, 5, pu, au]);
            fill(&mut flow, g.d * g.h * g.w, &mut r);
            if expressed.1 {
                let s = cfg.s_flow * jitter(&mut r);
                add_tube(&mut flow, &vol_shape, s, &mut r);
            }

            let mut lso = Vec::with_capacity(g.lso_h * g.lso_w);
            let mut r = rng::stream(cfg.seed, &[tag, 6, pu, au]);
            fill(&mut lso, g.lso_h * g.lso_w, &mut r);
            if expressed.2 {
                let s = cfg.s_lso * jitter(&mut r);
                add_blob(&mut lso, &lso_shape, s, &mut r);
            }

            out.push(Acquisition {
                acquisition_id: format!("a{global:04}"),
                patient_id: format!("p{p:03}"),
                icdr_grade: grade,
                structure: Tensor::from_vec(vol_shape.to_vec(), structure)?,
                flow: Tensor::from_vec(vol_shape.to_vec(), flow)?,
                lso: Tensor::from_vec(lso_shape.to_vec(), lso)?,
            });
            global += 1;
        }
    }
    Ok(out)
}

// ── Diagnostics ──────────────────────────────────────────────────────

/// Crude planted-signal detector: mean of the brightest `frac` of
/// values minus the median. Useful as an architecture-free baseline
/// when sanity-checking generated data.
pub fn contrast_score(t: &Tensor, frac: f64) -> f32 {
    let mut v: Vec<f32> = t.data().to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    let k = ((n as f64 * frac).ceil() as usize).clamp(1, n);
    let top: f64 = v[n - k..].iter().map(|&x| x as f64).sum::<f64>() / k as f64;
    let median = v[n / 2] as f64;
    (top - median) as f32
}

// ── Tests ────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    /// Pair-counting AUC: P(score_pos > score_neg) with half credit
    /// for ties. Quadratic, independent of the evaluation module.
    fn auc(scores: &[f32], labels: &[bool]) -> f64 {
        let (mut wins, mut pairs) = (0.0f64, 0.0f64);
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    fn small(seed: u64, mode: ComplementarityMode) -> SynthConfig {
        SynthConfig {
            n_patients: 24,
            acq_per_patient: [2, 3],
            total_acquisitions: None,
            grid: GridSpec {
                d: 8,
                h: 24,
                w: 24,
                lso_h: 24,
                lso_w: 24,
            },
            positive_rate: 0.4,
            mode,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_matches_expected_cardinalities() {
        let cfg = SynthConfig::default();
        let acqs = synth_generate(&cfg).unwrap();
        assert_eq!(acqs.len(), 151);
        let patients: std::collections::HashSet<_> =
            acqs.iter().map(|a| a.patient_id.clone()).collect();
        assert_eq!(patients.len(), 64);
        let pos = acqs.iter().filter(|a| a.label()).count();
        let rate = pos as f64 / acqs.len() as f64;
        assert!(
            (rate - 0.2).abs() <= 0.05,
            "positive rate {rate} outside 0.2 +/- 0.05"
        );
        for a in &acqs {
            assert_eq!(a.structure.shape(), &[16, 64, 64]);
            assert_eq!(a.flow.shape(), &[16, 64, 64]);
            assert_eq!(a.lso.shape(), &[64, 64]);
            assert!(a.icdr_grade <= 4);
            assert_eq!(a.label(), a.icdr_grade == 4);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = small(9, ComplementarityMode::Complementary);
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.acquisition_id, y.acquisition_id);
            assert_eq!(x.structure.data(), y.structure.data());
            assert_eq!(x.flow.data(), y.flow.data());
            assert_eq!(x.lso.data(), y.lso.data());
        }
        let c = synth_generate(&small(10, ComplementarityMode::Complementary)).unwrap();
        assert!(a[0].structure.data() != c[0].structure.data());
    }

    #[test]
    fn structure_only_signal_is_structure_detectable() {
        // Zero flow/lso strengths: the structural channel separates the
        // classes nearly perfectly, the other two stay near chance.
        let cfg = SynthConfig {
            s_flow: 0.0,
            s_lso: 0.0,
            mode: ComplementarityMode::Redundant,
            ..small(3, ComplementarityMode::Redundant)
        };
        let acqs = synth_generate(&cfg).unwrap();
        let labels: Vec<bool> = acqs.iter().map(|a| a.label()).collect();
        let score = |f: &dyn Fn(&Acquisition) -> f32| -> f64 {
            let scores: Vec<f32> = acqs.iter().map(|a| f(a)).collect();
            auc(&scores, &labels)
        };
        let s_auc = score(&|a| contrast_score(&a.structure, 0.005));
        let f_auc = score(&|a| contrast_score(&a.flow, 0.005));
        let l_auc = score(&|a| contrast_score(&a.lso, 0.005));
        assert!(s_auc >= 0.99, "structure AUC {s_auc} should be ~1");
        assert!((0.2..=0.8).contains(&f_auc), "flow AUC {f_auc} should be ~chance");
        assert!((0.2..=0.8).contains(&l_auc), "lso AUC {l_auc} should be ~chance");
    }

    #[test]
    fn complementary_mode_needs_fusion() {
        let cfg = SynthConfig {
            n_patients: 220,
            acq_per_patient: [2, 3],
            total_acquisitions: Some(520),
            ..small(5, ComplementarityMode::Complementary)
        };
        let acqs = synth_generate(&cfg).unwrap();
        assert!(acqs.len() >= 500);
        let labels: Vec<bool> = acqs.iter().map(|a| a.label()).collect();
        let per_modality: Vec<Vec<f32>> = vec![
            acqs.iter().map(|a| contrast_score(&a.structure, 0.005)).collect(),
            acqs.iter().map(|a| contrast_score(&a.flow, 0.005)).collect(),
            acqs.iter().map(|a| contrast_score(&a.lso, 0.005)).collect(),
        ];
        // z-score each modality, fuse by summing the top two scores so
        // the unexpressed modality cannot drag a positive down.
        let z: Vec<Vec<f64>> = per_modality
            .iter()
            .map(|s| {
                let n = s.len() as f64;
                let m = s.iter().map(|&x| x as f64).sum::<f64>() / n;
                let var = s.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt().max(1e-9);
                s.iter().map(|&x| (x as f64 - m) / sd).collect()
            })
            .collect();
        let fused: Vec<f64> = (0..acqs.len())
            .map(|i| {
                let mut v = [z[0][i], z[1][i], z[2][i]];
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                v[1] + v[2]
            })
            .collect();
        let fused_auc = {
            let s: Vec<f32> = fused.iter().map(|&x| x as f32).collect();
            auc(&s, &labels)
        };
        let single_aucs: Vec<f64> =
            per_modality.iter().map(|s| auc(s, &labels)).collect();
        let best_single = single_aucs.iter().cloned().fold(0.0, f64::max);
        assert!(fused_auc >= 0.95, "fused oracle AUC {fused_auc} should be >= 0.95");
        for (i, s) in single_aucs.iter().enumerate() {
            assert!(
                *s < fused_auc,
                "modality {i} AUC {s} should be strictly below fused {fused_auc}"
            );
        }
        // Single-modality ceiling: each signal is absent in about a
        // third of positives.
        assert!(
            best_single <= 0.90,
            "best single-modality AUC {best_single} should be capped well below fused"
        );
    }

    #[test]
    fn exact_total_and_per_patient_bounds() {
        let cfg = SynthConfig {
            n_patients: 10,
            acq_per_patient: [1, 4],
            total_acquisitions: Some(23),
            ..small(2, ComplementarityMode::Redundant)
        };
        let acqs = synth_generate(&cfg).unwrap();
        assert_eq!(acqs.len(), 23);
        let mut per: std::collections::HashMap<&str, usize> = Default::default();
        for a in &acqs {
            *per.entry(a.patient_id.as_str()).or_default() += 1;
        }
        assert!(per.values().all(|&c| (1..=4).contains(&c)));
    }

    #[test]
    fn config_validation_errors() {
        let bad_total = SynthConfig {
            n_patients: 4,
            acq_per_patient: [2, 3],
            total_acquisitions: Some(30),
            ..SynthConfig::default()
        };
        assert!(synth_generate(&bad_total).is_err());
        let bad_grid = SynthConfig {
            grid: GridSpec {
                d: 4,
                ..GridSpec::default()
            },
            ..SynthConfig::default()
        };
        let err = synth_generate(&bad_grid).unwrap_err();
        assert!(err.to_string().contains("too small"), "{err}");
        let bad_rate = SynthConfig {
            positive_rate: 0.0,
            ..SynthConfig::default()
        };
        assert!(synth_generate(&bad_rate).is_err());
    }
}
