//! Synthetic Gaussian-kernel image benchmark.
//!
//! Each 32×32 image is a sum of four Gaussian blobs of fixed spatial width.
//! The two diagonal blobs share peak amplitude `sigma_a`; the two off-diagonal
//! blobs share peak amplitude `sigma_b`, which plays the role of the protected
//! attribute. Labels decide the sampling interval of both amplitudes: `U(1,4)`
//! for label 0, `U(3,7)` for label 1, so only the `(3,4)` overlap is ambiguous.
//!
//! Blob centers sit at the exact quadrant midpoints (7.5 and 23.5 in 0-based
//! pixel coordinates), which makes transposition and 90° rotation map the
//! kernel set onto itself, so the symmetry identities below hold bitwise.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::{ArrayData, Container, NamedArray};
use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 32;
pub const IMAGE_PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;

/// Spatial standard deviation of every blob, in pixels.
pub const KERNEL_STD: f64 = 4.0;

/// Maximum possible amplitude; images divided by this lie in [0, 1].
pub const PIXEL_SCALE: f64 = 7.0;

const CENTER_LO: f64 = 7.5;
const CENTER_HI: f64 = 23.5;
// Diagonal centers carry sigma_a, off-diagonal centers carry sigma_b.
const DIAG_CENTERS: [(f64, f64); 2] = [(CENTER_LO, CENTER_LO), (CENTER_HI, CENTER_HI)];
const OFF_CENTERS: [(f64, f64); 2] = [(CENTER_LO, CENTER_HI), (CENTER_HI, CENTER_LO)];

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Independent reproducible random stream derived from a master seed.
/// Distinct `stream` tags give uncorrelated streams for the same seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

/// Deterministic sub-seed derivation for independent components.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// Dataset split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn stream_tag(&self) -> u64 {
        match self {
            Split::Train => 0x7261_696e,
            Split::Val => 0x0076_616c,
            Split::Test => 0x7465_7374,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid("split", format!("unknown split `{other}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A 32×32 image stored row-major as `f32`, matching the on-disk encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Image32 {
    data: Vec<f32>,
}

impl Image32 {
    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        if data.len() != IMAGE_PIXELS {
            return Err(Error::ShapeMismatch(format!(
                "image must have {IMAGE_PIXELS} pixels, got {}",
                data.len()
            )));
        }
        Ok(Image32 { data })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * IMAGE_SIZE + col]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn transpose(&self) -> Image32 {
        let mut out = vec![0f32; IMAGE_PIXELS];
        for r in 0..IMAGE_SIZE {
            for c in 0..IMAGE_SIZE {
                out[c * IMAGE_SIZE + r] = self.data[r * IMAGE_SIZE + c];
            }
        }
        Image32 { data: out }
    }

    /// Clockwise quarter turn: `out[r][c] = in[N-1-c][r]`.
    pub fn rotate90(&self) -> Image32 {
        let n = IMAGE_SIZE;
        let mut out = vec![0f32; IMAGE_PIXELS];
        for r in 0..n {
            for c in 0..n {
                out[r * n + c] = self.data[(n - 1 - c) * n + r];
            }
        }
        Image32 { data: out }
    }
}

/// One synthetic sample: pixels plus the generating parameters and label.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub pixels: Image32,
    pub sigma_a: f64,
    /// Off-diagonal amplitude; the protected attribute.
    pub sigma_b: f64,
    pub label: u8,
}

/// A labelled split of synthetic images, reproducible from its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub images: Vec<SynthImage>,
    pub split: Split,
    pub seed: u64,
}

/// Draw `(sigma_a, sigma_b)` independently and uniformly from the interval
/// prescribed by the label: `[1,4)` for label 0, `[3,7)` for label 1.
pub fn sample_sigmas<R: Rng>(label: bool, rng: &mut R) -> (f64, f64) {
    let (lo, hi) = if label { (3.0, 7.0) } else { (1.0, 4.0) };
    let a = rng.gen_range(lo..hi);
    let b = rng.gen_range(lo..hi);
    (a, b)
}

/// Render the four-blob image for the given amplitudes.
pub fn render_image(sigma_a: f64, sigma_b: f64) -> Result<Image32> {
    if !(sigma_a > 0.0) {
        return Err(Error::invalid("sigma_a", "must be > 0"));
    }
    if !(sigma_b > 0.0) {
        return Err(Error::invalid("sigma_b", "must be > 0"));
    }
    let inv = 1.0 / (2.0 * KERNEL_STD * KERNEL_STD);
    let mut data = vec![0f32; IMAGE_PIXELS];
    for r in 0..IMAGE_SIZE {
        for c in 0..IMAGE_SIZE {
            let mut diag = 0.0f64;
            for (cr, cc) in DIAG_CENTERS {
                let dr = r as f64 - cr;
                let dc = c as f64 - cc;
                diag += (-(dr * dr + dc * dc) * inv).exp();
            }
            let mut off = 0.0f64;
            for (cr, cc) in OFF_CENTERS {
                let dr = r as f64 - cr;
                let dc = c as f64 - cc;
                off += (-(dr * dr + dc * dc) * inv).exp();
            }
            data[r * IMAGE_SIZE + c] = (sigma_a * diag + sigma_b * off) as f32;
        }
    }
    Ok(Image32 { data })
}

/// Generate `n` images (half per label, alternating), deterministic in
/// `(n, split, seed)`. `n` must be even and nonzero.
pub fn generate_dataset(n: usize, split: Split, seed: u64) -> Result<SynthDataset> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::invalid("n", "dataset size must be even and nonzero"));
    }
    let mut rng = stream_rng(seed, split.stream_tag());
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2 == 1;
        let (sigma_a, sigma_b) = sample_sigmas(label, &mut rng);
        let pixels = render_image(sigma_a, sigma_b)?;
        images.push(SynthImage {
            pixels,
            sigma_a,
            sigma_b,
            label: label as u8,
        });
    }
    Ok(SynthDataset { images, split, seed })
}

/// Best achievable accuracy of the support-threshold decision rules.
///
/// Unconstrained, the rule "predict 1 iff both amplitudes exceed 3" errs only
/// on label-0 draws landing in the (3,4)² overlap: accuracy 1 − ½(1/3)².
/// Restricted to `sigma_a`, the rule "predict 1 iff sigma_a > 3" errs on
/// label-0 draws with sigma_a in (3,4): accuracy 1 − ½(1/3).
pub fn bayes_accuracy(constrained: bool) -> f64 {
    if constrained {
        1.0 - 0.5 * (1.0 / 3.0)
    } else {
        1.0 - 0.5 * (1.0 / 3.0) * (1.0 / 3.0)
    }
}

/// Monte-Carlo counterpart of [`bayes_accuracy`]: simulates label and sigma
/// draws and applies the matching threshold rule.
pub fn bayes_accuracy_monte_carlo(constrained: bool, samples: usize, seed: u64) -> f64 {
    let mut rng = stream_rng(seed, 0x6261_7965_73);
    let mut correct = 0usize;
    for _ in 0..samples {
        let label: bool = rng.gen();
        let (sigma_a, sigma_b) = sample_sigmas(label, &mut rng);
        let pred = if constrained {
            sigma_a > 3.0
        } else {
            sigma_a > 3.0 && sigma_b > 3.0
        };
        if pred == label {
            correct += 1;
        }
    }
    correct as f64 / samples as f64
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.images.iter().map(|im| im.label).collect()
    }

    pub fn sigma_bs(&self) -> Vec<f64> {
        self.images.iter().map(|im| im.sigma_b).collect()
    }

    fn to_container(&self) -> Result<Container> {
        let n = self.images.len();
        let mut pixels = Vec::with_capacity(n * IMAGE_PIXELS);
        let mut sigma_a = Vec::with_capacity(n);
        let mut sigma_b = Vec::with_capacity(n);
        let mut label = Vec::with_capacity(n);
        for im in &self.images {
            pixels.extend_from_slice(im.pixels.as_slice());
            sigma_a.push(im.sigma_a);
            sigma_b.push(im.sigma_b);
            label.push(im.label as i8);
        }
        let mut c = Container::new("dataset");
        c.set_meta(
            "format_version",
            serde_json::json!(crate::container::FORMAT_VERSION),
        );
        c.set_meta("seed", serde_json::json!(self.seed));
        c.set_meta("split", serde_json::json!(self.split.as_str()));
        c.push(NamedArray::new(
            "pixels",
            vec![n, IMAGE_SIZE, IMAGE_SIZE],
            ArrayData::F32(pixels),
        )?);
        c.push(NamedArray::new("sigma_a", vec![n], ArrayData::F64(sigma_a))?);
        c.push(NamedArray::new("sigma_b", vec![n], ArrayData::F64(sigma_b))?);
        c.push(NamedArray::new("label", vec![n], ArrayData::I8(label))?);
        Ok(c)
    }

    fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "dataset" {
            return Err(Error::Format(format!(
                "expected a dataset container, found kind `{}`",
                c.kind
            )));
        }
        let seed = c.meta_u64("seed")?;
        let split: Split = c.meta_str("split")?.parse()?;
        let pixels = c.get("pixels")?;
        let n = *pixels.shape.first().unwrap_or(&0);
        if pixels.shape != vec![n, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::ShapeMismatch(format!(
                "pixels shape {:?} is not [n, {IMAGE_SIZE}, {IMAGE_SIZE}]",
                pixels.shape
            )));
        }
        let pix = pixels.data.as_f32()?;
        let sigma_a = c.get("sigma_a")?.data.as_f64()?;
        let sigma_b = c.get("sigma_b")?.data.as_f64()?;
        let label = c.get("label")?.data.as_i8()?;
        if sigma_a.len() != n || sigma_b.len() != n || label.len() != n {
            return Err(Error::ShapeMismatch(
                "sigma/label arrays disagree with pixel count".into(),
            ));
        }
        let mut images = Vec::with_capacity(n);
        for i in 0..n {
            images.push(SynthImage {
                pixels: Image32::from_vec(pix[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS].to_vec())?,
                sigma_a: sigma_a[i],
                sigma_b: sigma_b[i],
                label: label[i] as u8,
            });
        }
        Ok(SynthDataset { images, split, seed })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sigma_supports_match_labels() {
        let mut rng = stream_rng(7, 1);
        for _ in 0..2000 {
            let (a, b) = sample_sigmas(false, &mut rng);
            assert!((1.0..4.0).contains(&a) && (1.0..4.0).contains(&b));
            let (a, b) = sample_sigmas(true, &mut rng);
            assert!((3.0..7.0).contains(&a) && (3.0..7.0).contains(&b));
        }
    }

    #[test]
    fn sigma_mean_matches_uniform_law() {
        // Monte-Carlo estimate of E[U(1,4)] = 2.5 at 1e5 draws.
        let mut rng = stream_rng(11, 2);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| sample_sigmas(false, &mut rng).0)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 2.5).abs() < 0.03, "mean {mean}");
    }

    #[test]
    fn render_rejects_nonpositive_sigma() {
        assert!(render_image(0.0, 1.0).is_err());
        assert!(render_image(1.0, -2.0).is_err());
        assert!(render_image(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn rendered_pixel_matches_four_term_sum() {
        // Independent evaluation of the blob sum at pixel (8,8) for render(2,5).
        let img = render_image(2.0, 5.0).unwrap();
        let g = |r: f64, c: f64, cr: f64, cc: f64| -> f64 {
            (-((r - cr).powi(2) + (c - cc).powi(2)) / (2.0 * 4.0 * 4.0)).exp()
        };
        let oracle = 2.0 * (g(8.0, 8.0, 7.5, 7.5) + g(8.0, 8.0, 23.5, 23.5))
            + 5.0 * (g(8.0, 8.0, 7.5, 23.5) + g(8.0, 8.0, 23.5, 7.5));
        let got = img.get(8, 8) as f64;
        assert!((got - oracle).abs() < 1e-6, "got {got}, oracle {oracle}");
        assert!(
            (got - 2.0).abs() < 0.04,
            "peak should sit near sigma_a=2, got {got}"
        );
    }

    #[test]
    fn all_pixels_nonnegative() {
        let img = render_image(1.0, 7.0).unwrap();
        assert!(img.as_slice().iter().all(|&p| p >= 0.0));
    }

    proptest! {
        #[test]
        fn transpose_symmetry_is_exact(a in 0.05f64..10.0, b in 0.05f64..10.0) {
            let img = render_image(a, b).unwrap();
            let t = img.transpose();
            prop_assert_eq!(t.as_slice(), img.as_slice());
        }

        #[test]
        fn rotation_swaps_amplitudes_exactly(a in 0.05f64..10.0, b in 0.05f64..10.0) {
            let rotated = render_image(a, b).unwrap().rotate90();
            let swapped = render_image(b, a).unwrap();
            prop_assert_eq!(rotated.as_slice(), swapped.as_slice());
        }

        #[test]
        fn equal_amplitudes_are_rotation_invariant(s in 0.05f64..10.0) {
            let img = render_image(s, s).unwrap();
            let rot = img.rotate90();
            prop_assert_eq!(rot.as_slice(), img.as_slice());
        }
    }

    #[test]
    fn dataset_is_half_per_label_and_deterministic() {
        let d1 = generate_dataset(1000, Split::Train, 3).unwrap();
        let d2 = generate_dataset(1000, Split::Train, 3).unwrap();
        assert_eq!(d1, d2);
        let zeros = d1.images.iter().filter(|im| im.label == 0).count();
        assert_eq!(zeros, 500);
        assert_eq!(d1.len() - zeros, 500);

        let d3 = generate_dataset(1000, Split::Train, 4).unwrap();
        assert_ne!(d1, d3);
        // Different splits with the same seed get different streams.
        let dv = generate_dataset(1000, Split::Val, 3).unwrap();
        assert_ne!(d1.images[0].sigma_a, dv.images[0].sigma_a);
    }

    #[test]
    fn odd_or_zero_n_is_rejected() {
        assert!(generate_dataset(999, Split::Train, 1).is_err());
        assert!(generate_dataset(0, Split::Train, 1).is_err());
    }

    #[test]
    fn label_conditional_supports_hold_on_generated_data() {
        let d = generate_dataset(2000, Split::Test, 9).unwrap();
        for im in &d.images {
            let (lo, hi) = if im.label == 1 { (3.0, 7.0) } else { (1.0, 4.0) };
            assert!(im.sigma_a >= lo && im.sigma_a < hi);
            assert!(im.sigma_b >= lo && im.sigma_b < hi);
        }
    }

    #[test]
    fn overlap_region_frequency_matches_monte_carlo() {
        // P(label=0 and both sigmas in [3,4]) = 1/2 * (1/3)^2 = 1/18.
        let d = generate_dataset(10_000, Split::Train, 5).unwrap();
        let hits = d
            .images
            .iter()
            .filter(|im| {
                im.label == 0
                    && (3.0..=4.0).contains(&im.sigma_a)
                    && (3.0..=4.0).contains(&im.sigma_b)
            })
            .count();
        let frac = hits as f64 / d.len() as f64;
        assert!((frac - 1.0 / 18.0).abs() < 0.01, "fraction {frac}");
    }

    #[test]
    fn bayes_accuracy_analytic_values() {
        assert!((bayes_accuracy(false) - 17.0 / 18.0).abs() < 1e-15);
        assert!((bayes_accuracy(true) - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn bayes_accuracy_monte_carlo_converges() {
        // 1e6 samples; +-3 standard errors ~ 0.0007 for both rules.
        let mc = bayes_accuracy_monte_carlo(false, 1_000_000, 17);
        assert!(
            (mc - bayes_accuracy(false)).abs() < 0.002,
            "unconstrained {mc}"
        );
        let mc = bayes_accuracy_monte_carlo(true, 1_000_000, 17);
        assert!((mc - bayes_accuracy(true)).abs() < 0.002, "constrained {mc}");
    }

    #[test]
    fn dataset_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.cifd");
        let d = generate_dataset(64, Split::Val, 12).unwrap();
        d.save(&path).unwrap();
        let back = SynthDataset::load(&path).unwrap();
        assert_eq!(d, back);
    }
}
