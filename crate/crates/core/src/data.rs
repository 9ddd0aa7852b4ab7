//! Descriptor datasets: the `DTEN` binary container and a seeded generator of
//! synthetic orderless classification tasks.
//!
//! `DTEN` layout, all integers little-endian:
//!
//! ```text
//! magic "DTEN" | version u16 = 1 | n_classes u32 | D u32 | sample_count u64
//! per sample: label u32 | N u32 | N*D f32, row-major
//! ```
//!
//! Values are stored as `f32` and widened to `f64` on load.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoding::DescriptorSet;
use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::rng;

pub const DATASET_MAGIC: &[u8; 4] = b"DTEN";
pub const DATASET_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: DescriptorSet,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorDataset {
    samples: Vec<Sample>,
    n_classes: usize,
    dim: usize,
}

impl DescriptorDataset {
    pub fn new(samples: Vec<Sample>, n_classes: usize, dim: usize) -> Result<Self> {
        if n_classes == 0 || dim == 0 {
            return Err(Error::Argument(format!(
                "dataset needs n_classes >= 1 and D >= 1, got {n_classes} and {dim}"
            )));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.label >= n_classes {
                return Err(Error::Argument(format!(
                    "sample {i}: label {} out of range for {n_classes} classes",
                    s.label
                )));
            }
            if s.x.dim() != dim {
                return Err(Error::Argument(format!(
                    "sample {i}: descriptor dim {} differs from dataset D={dim}",
                    s.x.dim()
                )));
            }
        }
        Ok(DescriptorDataset {
            samples,
            n_classes,
            dim,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The same dataset with every value rounded through `f32`, i.e. what a
    /// save/load round trip returns.
    pub fn quantized(&self) -> Self {
        let samples = self
            .samples
            .iter()
            .map(|s| Sample {
                x: DescriptorSet::new(s.x.as_mat().map(|v| v as f32 as f64))
                    .expect("rounding keeps finite values finite"),
                label: s.label,
            })
            .collect();
        DescriptorDataset {
            samples,
            n_classes: self.n_classes,
            dim: self.dim,
        }
    }

    /// Serializes to the `DTEN` byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let floats: usize = self.samples.iter().map(|s| s.x.as_mat().len()).sum();
        let mut out = Vec::with_capacity(22 + 8 * self.samples.len() + 4 * floats);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        for s in &self.samples {
            out.extend_from_slice(&(s.label as u32).to_le_bytes());
            out.extend_from_slice(&(s.x.len() as u32).to_le_bytes());
            for &v in s.x.as_mat().as_slice() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Parses the `DTEN` byte layout. `origin` names the source in errors.
    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut rd = ByteReader::new(bytes, origin);
        let magic = rd.take(4, "magic")?;
        if magic != DATASET_MAGIC {
            return Err(rd.error_at(0, format!("bad magic {magic:?}, expected \"DTEN\"")));
        }
        let version = rd.u16("version")?;
        if version != DATASET_VERSION {
            return Err(Error::Version {
                path: origin.to_string(),
                kind: "dataset",
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let n_classes = rd.u32("n_classes")? as usize;
        let dim = rd.u32("D")? as usize;
        if n_classes == 0 || dim == 0 {
            return Err(rd.error_at(6, format!("n_classes={n_classes} and D={dim} must both be >= 1")));
        }
        let count = rd.u64("sample_count")?;
        let mut samples = Vec::new();
        for idx in 0..count {
            let start = rd.pos;
            let label = rd.u32("label")? as usize;
            if label >= n_classes {
                return Err(rd.error_at(start, format!("sample {idx}: label {label} >= n_classes {n_classes}")));
            }
            let n = rd.u32("descriptor count")? as usize;
            if n == 0 {
                return Err(rd.error_at(start + 4, format!("sample {idx}: empty descriptor set")));
            }
            let body_start = rd.pos;
            let raw = rd.take(n * dim * 4, "descriptor values")?;
            let mut data = Vec::with_capacity(n * dim);
            for (j, chunk) in raw.chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4")) as f64;
                if !v.is_finite() {
                    return Err(rd.error_at(body_start + 4 * j, format!("sample {idx}: non-finite value")));
                }
                data.push(v);
            }
            let x = DescriptorSet::new(Mat::from_vec(n, dim, data)?)?;
            samples.push(Sample { x, label });
        }
        if rd.pos != bytes.len() {
            return Err(rd.error_at(rd.pos, format!("{} trailing bytes", bytes.len() - rd.pos)));
        }
        Ok(DescriptorDataset {
            samples,
            n_classes,
            dim,
        })
    }
}

pub fn save_dataset(ds: &DescriptorDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ds.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DescriptorDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    DescriptorDataset::from_bytes(&bytes, &path.display().to_string())
}

/// Bounds-checked little-endian cursor that reports the failing offset.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
    origin: &'a str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], origin: &'a str) -> Self {
        ByteReader { bytes, pos: 0, origin }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn error_at(&self, offset: usize, detail: String) -> Error {
        Error::Format {
            path: self.origin.to_string(),
            offset: offset as u64,
            detail,
        }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error_at(
                self.pos,
                format!("truncated reading {what}: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// One isotropic Gaussian component of a class mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub mean: Vec<f64>,
    pub stddev: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassMixture {
    pub components: Vec<Component>,
}

/// Optional shared linear map from the mixture space to the stored
/// descriptor space, `x = z P + noise`, with `P` uniform in
/// `+-1/sqrt(dim)` (so descriptor scale is roughly preserved) drawn from its
/// own seed. Two specs with the same projection describe tasks that
/// share a feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerativeProjection {
    pub out_dim: usize,
    pub seed: u64,
    #[serde(default)]
    pub noise_stddev: f64,
}

impl GenerativeProjection {
    pub fn matrix(&self, in_dim: usize) -> Result<Mat> {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        Mat::seeded_uniform(in_dim, self.out_dim, -bound, bound, self.seed)
    }
}

/// A synthetic task in which every class is a distribution over descriptors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_classes: usize,
    /// Dimension of the mixture means.
    pub dim: usize,
    pub classes: Vec<ClassMixture>,
    pub descriptors_min: usize,
    pub descriptors_max: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    #[serde(default)]
    pub projection: Option<GenerativeProjection>,
}

impl SynthSpec {
    /// The mixture-weights task: four classes over one shared set of eight
    /// components at `±3 e_j` (`j < 4`) in 8-D. Class `c` puts weight 0.35 on
    /// each of `±3 e_c` and 0.05 on each other component, so every class has
    /// the same expected descriptor mean (zero) and only the shape of the
    /// distribution identifies it.
    pub fn mixture_weights(seed: u64) -> Self {
        let classes = axis_mixtures(8, 0, 0.0, |c, axis| if axis == c { 0.35 } else { 0.05 });
        SynthSpec {
            n_classes: 4,
            dim: 8,
            classes,
            descriptors_min: 50,
            descriptors_max: 100,
            train_per_class: 50,
            test_per_class: 25,
            seed,
            projection: None,
        }
    }

    /// Two four-class tasks over one 6-D latent space, both seen through the
    /// same random projection to 32-D with noise 0.5.
    ///
    /// Latent axes 0..4 carry class information through mixture weights (as
    /// in [`SynthSpec::mixture_weights`]); axes 4 and 5 carry a
    /// class-independent offset of `±4` that a useful projection has to
    /// discard. Task A weights `±3 e_c` by 0.35 and has 200 training samples
    /// per class of 50 to 100 descriptors; task B weights both `±3 e_c` and
    /// `±3 e_(c+1)` by 0.2 and has 20 samples per class of only 10 to 20
    /// descriptors. Test splits hold 25 (A) and 50 (B) samples per class.
    pub fn transfer_pair(seed: u64) -> (Self, Self) {
        let projection = GenerativeProjection {
            out_dim: 32,
            seed: rng::derive_seed(seed, 3),
            noise_stddev: 0.5,
        };
        let task = |classes, (descriptors_min, descriptors_max), train, test, stream| SynthSpec {
            n_classes: 4,
            dim: 6,
            classes,
            descriptors_min,
            descriptors_max,
            train_per_class: train,
            test_per_class: test,
            seed: rng::derive_seed(seed, stream),
            projection: Some(projection.clone()),
        };
        let a = axis_mixtures(6, 2, 4.0, |c, axis| if axis == c { 0.35 } else { 0.05 });
        let b = axis_mixtures(
            6,
            2,
            4.0,
            |c, axis| {
                if axis == c || axis == (c + 1) % 4 {
                    0.2
                } else {
                    0.05
                }
            },
        );
        (task(a, (50, 100), 200, 25, 1), task(b, (10, 20), 20, 50, 2))
    }

    /// Output descriptor dimension (after the optional projection).
    pub fn out_dim(&self) -> usize {
        self.projection.as_ref().map_or(self.dim, |p| p.out_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.n_classes == 0 || self.dim == 0 {
            return bad("synth spec needs n_classes >= 1 and dim >= 1".into());
        }
        if self.classes.len() != self.n_classes {
            return bad(format!(
                "{} class mixtures for n_classes={}",
                self.classes.len(),
                self.n_classes
            ));
        }
        if self.descriptors_min == 0 || self.descriptors_min > self.descriptors_max {
            return bad(format!(
                "descriptor range [{}, {}] must satisfy 1 <= min <= max",
                self.descriptors_min, self.descriptors_max
            ));
        }
        for (c, mix) in self.classes.iter().enumerate() {
            if mix.components.is_empty() {
                return bad(format!("class {c} has no components"));
            }
            let mut total = 0.0;
            for (j, comp) in mix.components.iter().enumerate() {
                if comp.mean.len() != self.dim {
                    return bad(format!(
                        "class {c} component {j}: mean has {} entries, dim is {}",
                        comp.mean.len(),
                        self.dim
                    ));
                }
                if !(comp.stddev > 0.0) || !comp.stddev.is_finite() {
                    return bad(format!("class {c} component {j}: stddev must be > 0"));
                }
                if !(comp.weight >= 0.0) || comp.mean.iter().any(|v| !v.is_finite()) {
                    return bad(format!("class {c} component {j}: weight must be >= 0 and mean finite"));
                }
                total += comp.weight;
            }
            if (total - 1.0).abs() > 1e-9 {
                return bad(format!("class {c}: component weights sum to {total}, not 1"));
            }
        }
        if let Some(p) = &self.projection {
            if p.out_dim == 0 || !(p.noise_stddev >= 0.0) {
                return bad("projection needs out_dim >= 1 and noise_stddev >= 0".into());
            }
        }
        Ok(())
    }
}

/// Four classes over components at `±3 e_axis` for `axis < 4`, weighted by
/// `weight(class, axis)` per sign. Each component is split evenly over every
/// sign pattern `±nuisance` on the `nuisance_axes` axes that follow.
fn axis_mixtures(
    dim: usize,
    nuisance_axes: usize,
    nuisance: f64,
    weight: impl Fn(usize, usize) -> f64,
) -> Vec<ClassMixture> {
    let patterns = 1usize << nuisance_axes;
    (0..4)
        .map(|c| {
            let mut components = Vec::new();
            for axis in 0..4 {
                for sign in [1.0, -1.0] {
                    for mask in 0..patterns {
                        let mut mean = vec![0.0; dim];
                        mean[axis] = 3.0 * sign;
                        for j in 0..nuisance_axes {
                            mean[4 + j] = if mask >> j & 1 == 1 { nuisance } else { -nuisance };
                        }
                        components.push(Component {
                            mean,
                            stddev: 1.0,
                            weight: weight(c, axis) / patterns as f64,
                        });
                    }
                }
            }
            ClassMixture { components }
        })
        .collect()
}

/// Draws the train and test splits of a synthetic task.
///
/// Each sample takes `N ~ uniform[descriptors_min, descriptors_max]` i.i.d.
/// descriptors from its class mixture, so descriptor order carries no
/// information. Samples are emitted class by class.
pub fn synth_generate(spec: &SynthSpec) -> Result<(DescriptorDataset, DescriptorDataset)> {
    spec.validate()?;
    let projection = match &spec.projection {
        Some(p) => Some((p.matrix(spec.dim)?, p.noise_stddev)),
        None => None,
    };
    let mut r = rng::seeded(spec.seed);
    let mut split = |per_class: usize| -> Result<DescriptorDataset> {
        let mut samples = Vec::with_capacity(per_class * spec.n_classes);
        for (label, mix) in spec.classes.iter().enumerate() {
            for _ in 0..per_class {
                let n = r.random_range(spec.descriptors_min..=spec.descriptors_max);
                let z = draw_descriptors(&mut r, mix, n, spec.dim);
                let x = match &projection {
                    Some((p, noise)) => {
                        let mut x = z.matmul(p)?;
                        if *noise > 0.0 {
                            for v in x.as_mut_slice() {
                                let g: f64 = StandardNormal.sample(&mut r);
                                *v += noise * g;
                            }
                        }
                        x
                    }
                    None => z,
                };
                samples.push(Sample {
                    x: DescriptorSet::new(x)?,
                    label,
                });
            }
        }
        DescriptorDataset::new(samples, spec.n_classes, spec.out_dim())
    };
    let train = split(spec.train_per_class)?;
    let test = split(spec.test_per_class)?;
    Ok((train, test))
}

fn draw_descriptors(r: &mut rng::SeededRng, mix: &ClassMixture, n: usize, dim: usize) -> Mat {
    let mut x = Mat::zeros(n, dim);
    for i in 0..n {
        let u = rng::unit_f64(r);
        let mut acc = 0.0;
        let mut pick = mix.components.len() - 1;
        for (j, c) in mix.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                pick = j;
                break;
            }
        }
        let comp = &mix.components[pick];
        for (o, m) in x.row_mut(i).iter_mut().zip(&comp.mean) {
            let g: f64 = StandardNormal.sample(r);
            *o = m + comp.stddev * g;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::avg_pool;

    fn small() -> DescriptorDataset {
        let mut spec = SynthSpec::mixture_weights(3);
        spec.train_per_class = 2;
        spec.test_per_class = 1;
        spec.descriptors_min = 3;
        spec.descriptors_max = 6;
        synth_generate(&spec).unwrap().0
    }

    #[test]
    fn bytes_round_trip_after_quantization() {
        let ds = small();
        let back = DescriptorDataset::from_bytes(&ds.to_bytes(), "mem").unwrap();
        assert_eq!(back, ds.quantized());
        assert_eq!(back.to_bytes(), ds.to_bytes());
    }

    #[test]
    fn truncation_is_reported_with_offset() {
        let bytes = small().to_bytes();
        for cut in [0, 3, 5, 13, 22, 27, bytes.len() - 1] {
            match DescriptorDataset::from_bytes(&bytes[..cut], "mem") {
                Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = small().to_bytes();
        bytes[4..6].copy_from_slice(&2u16.to_le_bytes());
        assert!(matches!(
            DescriptorDataset::from_bytes(&bytes, "mem"),
            Err(Error::Version { found: 2, .. })
        ));
    }

    #[test]
    fn bad_magic_and_labels_are_rejected() {
        let mut bytes = small().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            DescriptorDataset::from_bytes(&bytes, "mem"),
            Err(Error::Format { offset: 0, .. })
        ));

        let mut bytes = small().to_bytes();
        bytes[22..26].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            DescriptorDataset::from_bytes(&bytes, "mem"),
            Err(Error::Format { offset: 22, .. })
        ));

        let mut bytes = small().to_bytes();
        bytes.push(0);
        assert!(DescriptorDataset::from_bytes(&bytes, "mem").is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec::mixture_weights(11);
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&spec).unwrap();
        assert_eq!(a.0.to_bytes(), b.0.to_bytes());
        assert_eq!(a.1.to_bytes(), b.1.to_bytes());
        assert_eq!(a.0.len(), 200);
        assert_eq!(a.1.len(), 100);
        assert!(a.0.samples().iter().all(|s| (50..=100).contains(&s.x.len())));
    }

    #[test]
    fn degenerate_mixture_pools_to_class_mean() {
        let spec = SynthSpec {
            n_classes: 2,
            dim: 3,
            classes: vec![
                ClassMixture {
                    components: vec![Component {
                        mean: vec![1.0, 2.0, 3.0],
                        stddev: 1e-9,
                        weight: 1.0,
                    }],
                },
                ClassMixture {
                    components: vec![Component {
                        mean: vec![-1.0, 0.0, 0.5],
                        stddev: 1e-9,
                        weight: 1.0,
                    }],
                },
            ],
            descriptors_min: 5,
            descriptors_max: 9,
            train_per_class: 3,
            test_per_class: 0,
            seed: 1,
            projection: None,
        };
        let (train, test) = synth_generate(&spec).unwrap();
        assert!(test.is_empty());
        for s in train.samples() {
            let mean = &spec.classes[s.label].components[0].mean;
            let pooled = avg_pool(&s.x);
            for (p, m) in pooled.as_slice().iter().zip(mean) {
                assert!((p - m).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn shared_means_with_swapped_weights() {
        let comps = |w0: f64| ClassMixture {
            components: vec![
                Component {
                    mean: vec![2.0, 0.0],
                    stddev: 0.5,
                    weight: w0,
                },
                Component {
                    mean: vec![-2.0, 0.0],
                    stddev: 0.5,
                    weight: 1.0 - w0,
                },
            ],
        };
        let spec = SynthSpec {
            n_classes: 2,
            dim: 2,
            classes: vec![comps(0.8), comps(0.2)],
            descriptors_min: 200,
            descriptors_max: 200,
            train_per_class: 1,
            test_per_class: 0,
            seed: 4,
            projection: None,
        };
        let (train, _) = synth_generate(&spec).unwrap();
        let p0 = avg_pool(&train.samples()[0].x);
        let p1 = avg_pool(&train.samples()[1].x);
        assert!(p0[(0, 0)] > 0.5 && p1[(0, 0)] < -0.5);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = SynthSpec::mixture_weights(0);
        s.classes[0].components[0].weight = 0.5;
        assert!(matches!(synth_generate(&s), Err(Error::Argument(_))));
        let mut s = SynthSpec::mixture_weights(0);
        s.classes[1].components[0].stddev = 0.0;
        assert!(synth_generate(&s).is_err());
        let mut s = SynthSpec::mixture_weights(0);
        s.descriptors_min = 0;
        assert!(synth_generate(&s).is_err());
    }

    #[test]
    fn projection_changes_output_dim() {
        let mut s = SynthSpec::mixture_weights(0);
        s.train_per_class = 1;
        s.test_per_class = 1;
        s.projection = Some(GenerativeProjection {
            out_dim: 12,
            seed: 5,
            noise_stddev: 0.1,
        });
        let (train, _) = synth_generate(&s).unwrap();
        assert_eq!(train.dim(), 12);
    }
}
