//! Synthetic shifted domains, drifting streams, and the big-endian image
//! container loader.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseError, Result};
use crate::estimate::ClassDistribution;
use crate::numgrad::Matrix;
use crate::sampling::{
    largest_remainder_counts, make_divergent_distribution, LabeledDataset, TargetBatch,
};
use crate::seed::derive_seed;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Affine map `x -> scale · R(x) + translation`, where `R` rotates by
/// `angle` within the coordinate plane `plane`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shift {
    pub angle: f64,
    pub plane: (usize, usize),
    pub translation: Vec<f64>,
    pub scale: f64,
}

impl Shift {
    pub fn identity(input_dim: usize) -> Self {
        Shift {
            angle: 0.0,
            plane: (0, input_dim.min(2).saturating_sub(1)),
            translation: vec![0.0; input_dim],
            scale: 1.0,
        }
    }

    /// Picks two distinct coordinates from `seed`.
    pub fn random_plane(input_dim: usize, seed: u64) -> (usize, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rng.random_range(0..input_dim);
        let mut b = rng.random_range(0..input_dim - 1);
        if b >= a {
            b += 1;
        }
        (a.min(b), a.max(b))
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::contract("shift scale must be > 0"));
        }
        if self.translation.len() != input_dim {
            return Err(Error::contract(format!(
                "translation has {} entries for input dim {input_dim}",
                self.translation.len()
            )));
        }
        let (a, b) = self.plane;
        if self.angle != 0.0 && (a == b || a >= input_dim || b >= input_dim) {
            return Err(Error::contract(
                "rotation plane must be two distinct coordinates",
            ));
        }
        Ok(())
    }

    pub fn apply(&self, x: &mut [f64]) {
        if self.angle != 0.0 {
            let (a, b) = self.plane;
            let (s, c) = self.angle.sin_cos();
            let (xa, xb) = (x[a], x[b]);
            x[a] = c * xa - s * xb;
            x[b] = s * xa + c * xb;
        }
        for (v, t) in x.iter_mut().zip(&self.translation) {
            *v = self.scale * *v + t;
        }
    }
}

/// Gaussian class clusters followed by an affine shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    /// `num_classes × input_dim`
    pub means: Matrix,
    pub sigma: f64,
    pub shift: Shift,
}

impl DomainSpec {
    /// Class means drawn uniformly on the sphere of the given radius, with no
    /// shift.
    pub fn random(
        num_classes: usize,
        input_dim: usize,
        sigma: f64,
        radius: f64,
        seed: u64,
    ) -> Result<Self> {
        if num_classes == 0 || input_dim == 0 {
            return Err(Error::contract(
                "need at least one class and one input dimension",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(num_classes * input_dim);
        for _ in 0..num_classes {
            let v: Vec<f64> = (0..input_dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            data.extend(v.iter().map(|x| radius * x / norm));
        }
        let spec = DomainSpec {
            num_classes,
            input_dim,
            means: Matrix::new(num_classes, input_dim, data)?,
            sigma,
            shift: Shift::identity(input_dim),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_shift(&self, shift: Shift) -> Self {
        DomainSpec {
            shift,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::contract("sigma must be > 0"));
        }
        if self.means.shape() != (self.num_classes, self.input_dim) {
            return Err(Error::contract(
                "class means do not match classes x input_dim",
            ));
        }
        self.shift.validate(self.input_dim)
    }
}

/// Draws `n` labeled samples with class counts from largest-remainder
/// rounding of `n · dist`.
pub fn gen_domain(
    spec: &DomainSpec,
    n: usize,
    dist: &ClassDistribution,
    seed: u64,
) -> Result<LabeledDataset> {
    spec.validate()?;
    if dist.num_classes() != spec.num_classes {
        return Err(Error::contract("distribution does not match class count"));
    }
    let counts = largest_remainder_counts(dist, n);
    if let Some(c) = counts.iter().position(|&k| k == 0) {
        return Err(Error::contract(format!(
            "degenerate distribution: class {c} gets no samples out of {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
        .collect();
    labels.shuffle(&mut rng);
    let features = sample_points(spec, &labels, &mut rng);
    LabeledDataset::new(features, labels, spec.num_classes)
}

fn sample_points(spec: &DomainSpec, labels: &[usize], rng: &mut ChaCha8Rng) -> Matrix {
    let d = spec.input_dim;
    let mut data = Vec::with_capacity(labels.len() * d);
    let mut x = vec![0.0; d];
    for &c in labels {
        for (k, v) in x.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *v = spec.means.get(c, k) + spec.sigma * z;
        }
        spec.shift.apply(&mut x);
        data.extend_from_slice(&x);
    }
    Matrix::new(labels.len(), d, data).expect("sized above")
}

/// Shift and class mix for one stream batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftStep {
    pub shift: Shift,
    pub distribution: ClassDistribution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub batch_size: usize,
    pub schedule: Vec<DriftStep>,
}

/// Per-batch increments for [`StreamSpec::linear`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftRates {
    pub angle_step: f64,
    pub translation_step: Vec<f64>,
    /// Multiplicative: batch τ uses `(1 + scale_step)^τ`.
    pub scale_step: f64,
    pub plane: (usize, usize),
}

impl StreamSpec {
    pub fn num_batches(&self) -> usize {
        self.schedule.len()
    }

    /// Compounding drift: batch τ (1-based) has `base` followed by
    /// rotation `τ·angle_step`, translation `τ·translation_step` and scale
    /// `(1 + scale_step)^τ`; its class mix sits at `kl_schedule[τ-1]` from
    /// uniform.
    pub fn linear(
        base: &Shift,
        rates: &DriftRates,
        kl_schedule: &[f64],
        num_classes: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if kl_schedule.is_empty() {
            return Err(Error::contract("stream needs at least one batch"));
        }
        let schedule = kl_schedule
            .iter()
            .enumerate()
            .map(|(i, &kl)| {
                let tau = (i + 1) as f64;
                let shift = Shift {
                    angle: base.angle + tau * rates.angle_step,
                    plane: if rates.angle_step != 0.0 {
                        rates.plane
                    } else {
                        base.plane
                    },
                    translation: base
                        .translation
                        .iter()
                        .zip(&rates.translation_step)
                        .map(|(b, s)| b + tau * s)
                        .collect(),
                    scale: base.scale * (1.0 + rates.scale_step).powf(tau),
                };
                let distribution =
                    make_divergent_distribution(num_classes, kl, derive_seed(seed, i as u64))?
                        .distribution;
                Ok(DriftStep {
                    shift,
                    distribution,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(StreamSpec {
            batch_size,
            schedule,
        })
    }
}

/// Generates every batch of the stream. Batch τ depends only on the
/// schedule entry and a seed derived from `(seed, τ)`.
pub fn gen_stream(domain: &DomainSpec, stream: &StreamSpec, seed: u64) -> Result<Vec<TargetBatch>> {
    if stream.schedule.is_empty() {
        return Err(Error::contract("stream needs at least one batch"));
    }
    (0..stream.schedule.len())
        .map(|tau| gen_stream_batch(domain, stream, tau, seed))
        .collect()
}

/// Batch `tau` (0-based) of the stream.
pub fn gen_stream_batch(
    domain: &DomainSpec,
    stream: &StreamSpec,
    tau: usize,
    seed: u64,
) -> Result<TargetBatch> {
    let step = stream
        .schedule
        .get(tau)
        .ok_or_else(|| Error::contract(format!("stream has no batch {tau}")))?;
    let spec = domain.with_shift(step.shift.clone());
    spec.validate()?;
    let counts = largest_remainder_counts(&step.distribution, stream.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tau as u64));
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
        .collect();
    labels.shuffle(&mut rng);
    let features = sample_points(&spec, &labels, &mut rng);
    TargetBatch::new(features, labels)
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, ParseError> {
    let end = offset + 4;
    let slice = bytes.get(offset..end).ok_or(ParseError::Truncated {
        needed: end,
        found: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(slice.try_into().expect("4 bytes")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), ParseError> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(ParseError::BadMagic { expected, found });
    }
    Ok(())
}

/// Decodes an image container into an `n × (rows·cols)` matrix scaled to
/// `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Matrix, ParseError> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let width = rows * cols;
    let needed = 16 + n * width;
    if bytes.len() < needed {
        return Err(ParseError::Truncated {
            needed,
            found: bytes.len(),
        });
    }
    let data = bytes[16..needed]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Ok(Matrix::new(n, width, data).expect("sized above"))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, ParseError> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let needed = 8 + n;
    if bytes.len() < needed {
        return Err(ParseError::Truncated {
            needed,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..needed].iter().map(|&b| b as usize).collect())
}

/// Loads an image/label container pair. The class count is one more than the
/// largest label, and every class in between must occur.
pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let img = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let features = parse_idx_images(&img)?;
    let labels = parse_idx_labels(&lab)?;
    if features.rows() != labels.len() {
        return Err(ParseError::CountMismatch {
            images: features.rows(),
            labels: labels.len(),
        }
        .into());
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    LabeledDataset::new(features, labels, num_classes)
}

/// `x0,..,x{d-1},label` rows with a header.
pub fn dataset_csv(ds: &LabeledDataset) -> String {
    let d = ds.input_dim();
    let mut out = String::new();
    let header: Vec<String> = (0..d)
        .map(|k| format!("x{k}"))
        .chain(["label".to_string()])
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for (i, &l) in ds.labels().iter().enumerate() {
        for v in ds.features().row(i) {
            out.push_str(&format!("{v:?},"));
        }
        out.push_str(&format!("{l}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DomainSpec {
        DomainSpec::random(3, 4, 0.5, 2.0, 7).unwrap()
    }

    #[test]
    fn identity_shift_is_source_domain() {
        let s = spec();
        let shifted = s.with_shift(Shift::identity(4));
        let u = ClassDistribution::uniform(3);
        assert_eq!(
            gen_domain(&s, 30, &u, 1).unwrap(),
            gen_domain(&shifted, 30, &u, 1).unwrap()
        );
    }

    #[test]
    fn translation_moves_means() {
        let mut s = spec();
        s.sigma = 1e-9;
        let v = vec![1.0, -2.0, 0.5, 3.0];
        let moved = s.with_shift(Shift {
            translation: v.clone(),
            ..Shift::identity(4)
        });
        let u = ClassDistribution::uniform(3);
        let a = gen_domain(&s, 9, &u, 3).unwrap();
        let b = gen_domain(&moved, 9, &u, 3).unwrap();
        for i in 0..9 {
            for (k, vk) in v.iter().enumerate() {
                let diff = b.features().get(i, k) - a.features().get(i, k);
                assert!((diff - vk).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn half_turn_twice_is_identity() {
        let shift = Shift {
            angle: std::f64::consts::PI,
            plane: (1, 3),
            ..Shift::identity(4)
        };
        let orig = [0.3, -1.2, 2.0, 0.7];
        let mut x = orig;
        shift.apply(&mut x);
        assert!((x[1] - 1.2).abs() < 1e-12 && (x[3] + 0.7).abs() < 1e-12);
        shift.apply(&mut x);
        for (a, b) in x.iter().zip(orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gen_domain_is_deterministic() {
        let u = ClassDistribution::uniform(3);
        assert_eq!(
            gen_domain(&spec(), 20, &u, 5).unwrap(),
            gen_domain(&spec(), 20, &u, 5).unwrap()
        );
        assert_ne!(
            gen_domain(&spec(), 20, &u, 5).unwrap(),
            gen_domain(&spec(), 20, &u, 6).unwrap()
        );
    }

    #[test]
    fn gen_domain_rejects_degenerate() {
        let d = ClassDistribution::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert!(gen_domain(&spec(), 10, &d, 0).is_err());
        let mut bad = spec();
        bad.sigma = 0.0;
        assert!(gen_domain(&bad, 10, &ClassDistribution::uniform(3), 0).is_err());
    }

    #[test]
    fn random_plane_is_distinct() {
        for seed in 0..50 {
            let (a, b) = Shift::random_plane(5, seed);
            assert!(a < b && b < 5);
        }
    }

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for w in [IDX_IMAGES_MAGIC, n, rows, cols] {
            v.extend_from_slice(&w.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn parses_hand_built_images() {
        let bytes = idx_images(2, 2, 2, &[0, 1, 2, 255, 10, 20, 30, 40]);
        let m = parse_idx_images(&bytes).unwrap();
        assert_eq!(m.shape(), (2, 4));
        assert_eq!(m.row(0), &[0.0, 1.0 / 255.0, 2.0 / 255.0, 1.0]);
        assert_eq!(m.get(1, 3), 40.0 / 255.0);
    }

    #[test]
    fn idx_errors() {
        assert!(matches!(
            parse_idx_images(&[]),
            Err(ParseError::Truncated { .. })
        ));
        let mut bad = idx_images(1, 1, 1, &[0]);
        bad[3] = 0x01;
        assert!(matches!(
            parse_idx_images(&bad),
            Err(ParseError::BadMagic { found: 0x801, .. })
        ));
        let short = idx_images(2, 2, 2, &[0; 5]);
        assert!(matches!(
            parse_idx_images(&short),
            Err(ParseError::Truncated {
                needed: 24,
                found: 21
            })
        ));
        assert!(matches!(
            parse_idx_labels(&idx_labels(&[1])[..6]),
            Err(ParseError::Truncated { .. })
        ));
    }

    #[test]
    fn load_idx_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        std::fs::write(&img, idx_images(2, 2, 2, &[0, 1, 2, 3, 4, 5, 6, 7])).unwrap();
        std::fs::write(&lab, idx_labels(&[1, 0])).unwrap();
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!(ds.labels(), &[1, 0]);
        assert_eq!(ds.num_classes(), 2);

        std::fs::write(&lab, idx_labels(&[1, 0, 1])).unwrap();
        let err = load_idx(&img, &lab).unwrap_err();
        assert!(matches!(
            err,
            Error::Parse(ParseError::CountMismatch {
                images: 2,
                labels: 3
            })
        ));

        std::fs::write(&img, b"").unwrap();
        assert!(matches!(
            load_idx(&img, &lab),
            Err(Error::Parse(ParseError::Truncated { .. }))
        ));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let ds = gen_domain(&spec(), 6, &ClassDistribution::uniform(3), 0).unwrap();
        let csv = dataset_csv(&ds);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "x0,x1,x2,x3,label");
        assert_eq!(lines.len(), 7);
    }
}
