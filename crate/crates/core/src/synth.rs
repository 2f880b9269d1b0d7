//! Synthetic layered-stack generation and dataset persistence.
//!
//! Each stack is a depth-ordered sequence of feature vectors labeled
//! epidermis (0), dermal-epidermal junction (1), or dermis (2). Labels are
//! non-decreasing with depth and every adjacent pair is an allowed
//! transition. Features blend the three class prototypes with sigmoid
//! weights around the segment boundaries, so slices near a boundary look
//! genuinely ambiguous when the transition softness is nonzero.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EPIDERMIS: usize = 0;
pub const DEJ: usize = 1;
pub const DERMIS: usize = 2;

/// Generator configuration.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SynthConfig {
    pub t_min: usize,
    pub t_max: usize,
    pub f_raw: usize,
    /// Class prototype feature vectors, indexed epidermis / DEJ / dermis.
    pub prototypes: [Vec<f64>; 3],
    /// Standard deviation of the Gaussian feature noise.
    pub noise_sigma: f64,
    /// Sigmoid temperature (in slices) of the boundary blend; 0 means hard
    /// steps, larger values smear the class mixture across more slices.
    pub transition_softness: f64,
    /// Minimum slices per layer segment.
    pub min_segment: usize,
    /// Permit stacks whose DEJ segment is empty (robustness testing only;
    /// such stacks contain a direct epidermis-to-dermis step).
    pub allow_empty_dej: bool,
}

impl SynthConfig {
    /// Defaults for a given raw feature dimension.
    pub fn with_f_raw(f_raw: usize) -> Self {
        SynthConfig {
            t_min: 20,
            t_max: 40,
            f_raw,
            prototypes: default_prototypes(f_raw),
            noise_sigma: 0.35,
            transition_softness: 1.0,
            min_segment: 1,
            allow_empty_dej: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_min < 3 {
            return Err(Error::Validation("t_min must be at least 3".into()));
        }
        if self.t_min > self.t_max {
            return Err(Error::Validation(format!(
                "t_min {} exceeds t_max {}",
                self.t_min, self.t_max
            )));
        }
        if self.f_raw == 0 {
            return Err(Error::Validation("f_raw must be positive".into()));
        }
        if self.min_segment == 0 {
            return Err(Error::Validation("min_segment must be at least 1".into()));
        }
        let needed = if self.allow_empty_dej { 2 * self.min_segment } else { 3 * self.min_segment };
        if self.t_min < needed {
            return Err(Error::Validation(format!(
                "t_min {} cannot fit the layer segments (need at least {needed})",
                self.t_min
            )));
        }
        for (i, p) in self.prototypes.iter().enumerate() {
            if p.len() != self.f_raw {
                return Err(Error::Validation(format!(
                    "prototype {i} has dimension {}, expected {}",
                    p.len(),
                    self.f_raw
                )));
            }
        }
        for a in 0..3 {
            for b in a + 1..3 {
                if self.prototypes[a] == self.prototypes[b] {
                    return Err(Error::Validation(format!(
                        "prototypes {a} and {b} are identical"
                    )));
                }
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Validation("noise_sigma must be finite and non-negative".into()));
        }
        if !(self.transition_softness.is_finite() && self.transition_softness >= 0.0) {
            return Err(Error::Validation(
                "transition_softness must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig::with_f_raw(8)
    }
}

/// Three distinct prototypes laid out on interleaved one-hot triplets.
pub fn default_prototypes(f_raw: usize) -> [Vec<f64>; 3] {
    let mut protos = [vec![0.0; f_raw], vec![0.0; f_raw], vec![0.0; f_raw]];
    for i in 0..f_raw {
        protos[i % 3][i] = 1.0;
    }
    // Very small dimensions could leave two prototypes identical (all-zero);
    // separate them on the first coordinate instead.
    if f_raw < 3 {
        protos[0][0] = 1.0;
        protos[1][0] = if f_raw >= 2 { 0.0 } else { 0.5 };
        protos[2][0] = -1.0;
        if f_raw >= 2 {
            protos[1][1] = 1.0;
            protos[2][1] = -1.0;
        }
    }
    protos
}

/// One stack: per-slice feature vectors plus per-slice layer labels.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StackSample {
    pub id: String,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl StackSample {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Structural checks: consistent lengths, in-range labels, finite values.
    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Validation(format!("stack {} is empty", self.id)));
        }
        if self.features.len() != self.labels.len() {
            return Err(Error::Validation(format!(
                "stack {}: {} feature rows vs {} labels",
                self.id,
                self.features.len(),
                self.labels.len()
            )));
        }
        let width = self.features[0].len();
        if width == 0 {
            return Err(Error::Validation(format!("stack {}: empty feature rows", self.id)));
        }
        for (t, row) in self.features.iter().enumerate() {
            if row.len() != width {
                return Err(Error::Validation(format!(
                    "stack {}: feature row {t} has width {}, expected {width}",
                    self.id,
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "stack {}: non-finite feature at slice {t}",
                    self.id
                )));
            }
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l > DERMIS) {
            return Err(Error::Validation(format!(
                "stack {}: label {bad} outside 0..=2",
                self.id
            )));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Features as a `[T, F_raw]` tensor.
    pub fn features_tensor(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.features)
    }
}

/// SplitMix64 finalizer; the documented seed-splitting rule is
/// `stack_seed = splitmix64(master ^ (index + 1) * 0x9E3779B97F4A7C15)`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ (index.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate a single stack, deterministic in `seed`.
pub fn generate_stack(cfg: &SynthConfig, seed: u64) -> Result<StackSample> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let t = rng.gen_range(cfg.t_min..=cfg.t_max);
    let m = cfg.min_segment;

    // b1 = first DEJ slice, b2 = first dermis slice.
    let b1 = rng.gen_range(m..=t - m - if cfg.allow_empty_dej { 0 } else { m });
    let b2_lo = if cfg.allow_empty_dej { b1 } else { b1 + m };
    let b2 = rng.gen_range(b2_lo..=t - m);

    let labels: Vec<usize> = (0..t)
        .map(|i| if i < b1 { EPIDERMIS } else if i < b2 { DEJ } else { DERMIS })
        .collect();

    let mut features = Vec::with_capacity(t);
    for (i, _) in labels.iter().enumerate() {
        let s1 = boundary_blend(i as f64, b1 as f64 - 0.5, cfg.transition_softness);
        let s2 = boundary_blend(i as f64, b2 as f64 - 0.5, cfg.transition_softness);
        let mut w = [1.0 - s1, s1 - s2, s2];
        let total: f64 = w.iter().sum();
        for v in w.iter_mut() {
            *v /= total;
        }
        let mut row = Vec::with_capacity(cfg.f_raw);
        for d in 0..cfg.f_raw {
            let mean: f64 = (0..3).map(|c| w[c] * cfg.prototypes[c][d]).sum();
            let z: f64 = StandardNormal.sample(&mut rng);
            row.push(mean + cfg.noise_sigma * z);
        }
        features.push(row);
    }

    Ok(StackSample { id: format!("stack-{seed:016x}"), features, labels })
}

/// Sigmoid step from 0 to 1 centered on `center`; hard step when softness is 0.
fn boundary_blend(x: f64, center: f64, softness: f64) -> f64 {
    if softness == 0.0 {
        if x > center {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 / (1.0 + (-(x - center) / softness).exp())
    }
}

/// Generate `n` stacks with per-stack seeds derived from `master_seed`.
pub fn generate_dataset(cfg: &SynthConfig, n: usize, master_seed: u64) -> Result<Vec<StackSample>> {
    if n == 0 {
        return Err(Error::Validation("dataset size must be at least 1".into()));
    }
    (0..n)
        .map(|i| generate_stack(cfg, derive_seed(master_seed, i as u64)))
        .collect()
}

/// Write one self-describing JSON record per line; floats keep full
/// round-trip precision.
pub fn save_dataset(samples: &[StackSample], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut buf, s)
            .map_err(|e| Error::Validation(format!("cannot serialize stack {}: {e}", s.id)))?;
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Load a line-delimited dataset. Any malformed record fails the whole load
/// with the offending line number; an empty file is an empty dataset.
pub fn load_dataset(path: &Path) -> Result<Vec<StackSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: StackSample = serde_json::from_str(line)
            .map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        sample
            .validate()
            .map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        samples.push(sample);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::count_impossible;

    #[test]
    fn degenerate_blend_hits_prototypes_exactly() {
        let mut cfg = SynthConfig::default();
        cfg.noise_sigma = 0.0;
        cfg.transition_softness = 0.0;
        let s = generate_stack(&cfg, 42).unwrap();
        for (row, &label) in s.features.iter().zip(&s.labels) {
            assert_eq!(row, &cfg.prototypes[label]);
        }
    }

    #[test]
    fn labels_are_monotone_and_transition_clean() {
        let cfg = SynthConfig::default();
        for seed in 0..200 {
            let s = generate_stack(&cfg, seed).unwrap();
            assert!(s.labels.windows(2).all(|w| w[0] <= w[1]));
            let counts = count_impossible(&s.labels).unwrap();
            assert_eq!(counts.total(), 0, "seed {seed}");
            // all three layers present under the default config
            for class in 0..3 {
                assert!(s.labels.contains(&class), "seed {seed} missing class {class}");
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SynthConfig::default();
        let a = generate_stack(&cfg, 7).unwrap();
        let b = generate_stack(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let bits_a: Vec<u64> = a.features.iter().flatten().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = b.features.iter().flatten().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn dataset_first_element_matches_derived_seed() {
        let cfg = SynthConfig::default();
        let ds = generate_dataset(&cfg, 1, 99).unwrap();
        let single = generate_stack(&cfg, derive_seed(99, 0)).unwrap();
        assert_eq!(ds[0], single);
    }

    #[test]
    fn disjoint_master_seeds_give_disjoint_ids() {
        let cfg = SynthConfig::default();
        let a = generate_dataset(&cfg, 20, 1).unwrap();
        let b = generate_dataset(&cfg, 20, 2).unwrap();
        let ids_a: std::collections::BTreeSet<_> = a.iter().map(|s| s.id.clone()).collect();
        assert_eq!(ids_a.len(), 20);
        assert!(b.iter().all(|s| !ids_a.contains(&s.id)));
    }

    #[test]
    fn class_balance_is_sane_over_many_stacks() {
        let cfg = SynthConfig::default();
        let mut counts = [0usize; 3];
        let mut total = 0usize;
        for s in generate_dataset(&cfg, 1000, 5).unwrap() {
            for &l in &s.labels {
                counts[l] += 1;
            }
            total += s.labels.len();
        }
        for (c, &n) in counts.iter().enumerate() {
            let frac = n as f64 / total as f64;
            assert!(
                (0.15..=0.60).contains(&frac),
                "class {c} occupies {frac:.3} of slices"
            );
        }
    }

    #[test]
    fn infeasible_config_is_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.t_min = 5;
        cfg.t_max = 6;
        cfg.min_segment = 2;
        assert!(matches!(generate_stack(&cfg, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let cfg = SynthConfig::default();
        let ds = generate_dataset(&cfg, 10, 3).unwrap();
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(ds, back);
        let bits: Vec<u64> = ds.iter().flat_map(|s| s.features.iter().flatten().map(|v| v.to_bits())).collect();
        let bits_back: Vec<u64> =
            back.iter().flat_map(|s| s.features.iter().flatten().map(|v| v.to_bits())).collect();
        assert_eq!(bits, bits_back);
    }

    #[test]
    fn truncated_line_fails_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let cfg = SynthConfig::default();
        let ds = generate_dataset(&cfg, 3, 3).unwrap();
        save_dataset(&ds, &path).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text.truncate(text.len() - 30);
        fs::write(&path, text).unwrap();
        match load_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn empty_dej_flag_permits_two_segment_stacks() {
        let mut cfg = SynthConfig::default();
        cfg.allow_empty_dej = true;
        let found_empty = (0..500).any(|seed| {
            let s = generate_stack(&cfg, seed).unwrap();
            !s.labels.contains(&DEJ)
        });
        assert!(found_empty, "no empty-DEJ stack in 500 draws");
    }
}
