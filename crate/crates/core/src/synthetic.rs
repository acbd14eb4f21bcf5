//! Synthetic spurious-correlation benchmark and the oracle annotator.
//!
//! Each image holds one class glyph (a square for class 0, a disk for
//! class 1 by default) and, with a class-conditional probability, one
//! context glyph. In the training and validation splits the context glyph
//! co-occurs with `context_attached_class` with probability `p_train` and
//! with the other class with probability `1 − p_train`; the test split uses
//! `p_test` instead. A classifier can therefore shortcut through the context
//! glyph, and the ground-truth masks say where it should have looked.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{binarize, upsample, AttentionMap, BinaryMask, MaskProvenance};
use crate::dataset::{Example, InstanceId, Split};
use crate::error::{Error, Result};
use crate::grid::Image;
use crate::reasonability::{Answer, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Glyph {
    Disk,
    Square,
    Triangle,
    Cross,
}

impl Glyph {
    /// Whether pixel `(dy, dx)` of a `size × size` box belongs to the glyph.
    fn covers(self, dy: usize, dx: usize, size: usize) -> bool {
        let s = size as f64;
        let (y, x) = (dy as f64 + 0.5, dx as f64 + 0.5);
        match self {
            Glyph::Square => true,
            Glyph::Disk => {
                let r = s / 2.0;
                (y - r) * (y - r) + (x - r) * (x - r) <= r * r
            }
            // apex at the top centre, base along the bottom edge
            Glyph::Triangle => {
                let half_width = 0.5 * s * y / s;
                (x - s / 2.0).abs() <= half_width
            }
            Glyph::Cross => {
                let arm = (size / 3).max(1);
                let lo = (size - arm) / 2;
                (lo..lo + arm).contains(&dy) || (lo..lo + arm).contains(&dx)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    pub class0_shape: Glyph,
    pub class1_shape: Glyph,
    pub context_glyph: Glyph,
    /// Inclusive range of glyph side lengths in pixels.
    pub shape_size_range: (usize, usize),
    pub context_cooccurrence_train: f64,
    pub context_cooccurrence_test: f64,
    pub context_attached_class: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            class0_shape: Glyph::Square,
            class1_shape: Glyph::Disk,
            context_glyph: Glyph::Triangle,
            shape_size_range: (10, 16),
            context_cooccurrence_train: 0.9,
            context_cooccurrence_test: 0.5,
            context_attached_class: 1,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("context_cooccurrence_train", self.context_cooccurrence_train),
            ("context_cooccurrence_test", self.context_cooccurrence_test),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        let glyphs = [self.class0_shape, self.class1_shape, self.context_glyph];
        if glyphs[0] == glyphs[1] || glyphs[0] == glyphs[2] || glyphs[1] == glyphs[2] {
            return Err(Error::Config("glyph kinds must be distinct".into()));
        }
        let (lo, hi) = self.shape_size_range;
        if lo < 2 || lo > hi {
            return Err(Error::Config(format!("bad shape size range {lo}..={hi}")));
        }
        if hi > self.image_size {
            return Err(Error::Config(format!(
                "glyphs up to {hi}px do not fit a {}px image",
                self.image_size
            )));
        }
        if self.context_attached_class > 1 {
            return Err(Error::Config("context_attached_class must be 0 or 1".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("bad noise_std {}", self.noise_std)));
        }
        Ok(())
    }

    fn class_glyph(&self, label: usize) -> Glyph {
        if label == 0 {
            self.class0_shape
        } else {
            self.class1_shape
        }
    }

    fn cooccurrence(&self, split: Split) -> f64 {
        match split {
            Split::Train | Split::Validation => self.context_cooccurrence_train,
            Split::Test => self.context_cooccurrence_test,
        }
    }
}

/// Instance counts per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    /// A 70% / 15% / 15% split of `total`.
    pub fn from_total(total: usize) -> Self {
        let train = total * 70 / 100;
        let validation = total * 15 / 100;
        Self {
            train,
            validation,
            test: total - train - validation,
        }
    }

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self::from_total(1000)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticInstance {
    pub id: InstanceId,
    pub image: Image,
    pub label: usize,
    pub intrinsic_mask: BinaryMask,
    pub context_mask: BinaryMask,
    pub split: Split,
}

impl SyntheticInstance {
    pub fn has_context(&self) -> bool {
        !self.context_mask.is_empty()
    }
}

impl Example for SyntheticInstance {
    fn id(&self) -> InstanceId {
        self.id
    }

    fn image(&self) -> &Image {
        &self.image
    }

    fn label(&self) -> usize {
        self.label
    }
}

const MAX_PLACEMENT_TRIES: usize = 200;

/// Generates every split; ids run consecutively through train, validation
/// and test. Each instance draws from its own ChaCha stream, so the output
/// is a pure function of `(spec, counts)`.
pub fn generate_dataset(spec: &SceneSpec, counts: SplitCounts) -> Result<Vec<SyntheticInstance>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(counts.total());
    let mut next_id = 0u32;
    for split in Split::ALL {
        for i in 0..counts.get(split) {
            out.push(generate_instance(spec, InstanceId(next_id), i % 2, split)?);
            next_id += 1;
        }
    }
    Ok(out)
}

fn generate_instance(spec: &SceneSpec, id: InstanceId, label: usize, split: Split) -> Result<SyntheticInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::from(id.0));
    let n = spec.image_size;
    let (lo, hi) = spec.shape_size_range;

    let p = spec.cooccurrence(split);
    let p_context = if label == spec.context_attached_class { p } else { 1.0 - p };
    let with_context = rng.random_bool(p_context);

    let mut intrinsic = BinaryMask::empty(n, n, MaskProvenance::Oracle);
    let mut context = BinaryMask::empty(n, n, MaskProvenance::Oracle);
    let mut image = Image::zeros(1, n, n);

    let size = rng.random_range(lo..=hi);
    let (y0, x0) = (rng.random_range(0..=n - size), rng.random_range(0..=n - size));
    let intensity = rng.random_range(0.6..=1.0);
    draw(spec.class_glyph(label), y0, x0, size, intensity, &mut image, &mut intrinsic);

    if with_context {
        let csize = rng.random_range(lo..=hi);
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let (cy, cx) = (rng.random_range(0..=n - csize), rng.random_range(0..=n - csize));
            // keep a one-pixel gap between the two bounding boxes
            let apart = cy >= y0 + size + 1 || y0 >= cy + csize + 1 || cx >= x0 + size + 1 || x0 >= cx + csize + 1;
            if apart {
                let ci = rng.random_range(0.6..=1.0);
                draw(spec.context_glyph, cy, cx, csize, ci, &mut image, &mut context);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "instance {id}: no room for the context glyph after {MAX_PLACEMENT_TRIES} tries"
            )));
        }
    }

    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(format!("{e}")))?;
        for v in image.as_mut_slice() {
            *v += noise.sample(&mut rng);
        }
    }
    // quantize to 8 bits so stored PNGs reload bit-identically
    for v in image.as_mut_slice() {
        *v = libm::round(v.clamp(0.0, 1.0) * 255.0) / 255.0;
    }
    Ok(SyntheticInstance {
        id,
        image,
        label,
        intrinsic_mask: intrinsic,
        context_mask: context,
        split,
    })
}

fn draw(glyph: Glyph, y0: usize, x0: usize, size: usize, intensity: f64, image: &mut Image, mask: &mut BinaryMask) {
    for dy in 0..size {
        for dx in 0..size {
            if glyph.covers(dy, dx, size) {
                image.set(0, y0 + dy, x0 + dx, intensity);
                mask.set(y0 + dy, x0 + dx, true);
            }
        }
    }
}

/// Coverage thresholds the oracle uses to answer the two questions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub binarize_tau: f64,
    /// Minimum fraction of the class glyph the attention must cover.
    pub q1_coverage_min: f64,
    /// Fraction of the context glyph at which attention counts as contextual.
    pub q2_coverage_max: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            binarize_tau: 0.5,
            q1_coverage_min: 0.25,
            q2_coverage_max: 0.25,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("binarize_tau", self.binarize_tau),
            ("q1_coverage_min", self.q1_coverage_min),
            ("q2_coverage_max", self.q2_coverage_max),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Upsamples and binarizes the map at image resolution.
pub fn binarized_attention(attention: &AttentionMap, height: usize, width: usize, tau: f64) -> Result<BinaryMask> {
    let up = upsample(&attention.grid, height, width)?;
    binarize(&up, tau)
}

/// Answers both questions from ground-truth masks.
pub fn oracle_verdict(attention: &AttentionMap, instance: &SyntheticInstance, cfg: &OracleConfig) -> Result<Verdict> {
    let (h, w) = instance.intrinsic_mask.dims();
    let focus = binarized_attention(attention, h, w, cfg.binarize_tau)?;
    Ok(verdict_from_focus(&focus, instance, cfg))
}

pub(crate) fn verdict_from_focus(focus: &BinaryMask, instance: &SyntheticInstance, cfg: &OracleConfig) -> Verdict {
    let coverage = |mask: &BinaryMask| {
        let n = mask.count();
        if n == 0 {
            0.0
        } else {
            focus.overlap(mask) as f64 / n as f64
        }
    };
    let q1 = coverage(&instance.intrinsic_mask) >= cfg.q1_coverage_min;
    let q2 = instance.has_context() && coverage(&instance.context_mask) >= cfg.q2_coverage_max;
    let mut v = Verdict::new(Answer::from_bool(q1), Answer::from_bool(q2));
    v.annotator_id = "oracle".into();
    v
}

/// The region an annotator should have drawn: the class glyph.
pub fn oracle_mask(instance: &SyntheticInstance) -> BinaryMask {
    instance.intrinsic_mask.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn small() -> Vec<SyntheticInstance> {
        generate_dataset(&SceneSpec::default(), SplitCounts::from_total(60)).unwrap()
    }

    fn as_map(mask: &BinaryMask) -> AttentionMap {
        AttentionMap {
            grid: mask.to_grid(),
            normalized: true,
            class_index: 0,
            instance_id: None,
        }
    }

    #[test]
    fn split_counts_follow_70_15_15() {
        let c = SplitCounts::from_total(1000);
        assert_eq!((c.train, c.validation, c.test), (700, 150, 150));
        let c = SplitCounts::from_total(61);
        assert_eq!(c.total(), 61);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(small(), small());
        let other = generate_dataset(
            &SceneSpec {
                seed: 1,
                ..SceneSpec::default()
            },
            SplitCounts::from_total(60),
        )
        .unwrap();
        assert_ne!(small()[0].image, other[0].image);
    }

    #[test]
    fn instance_invariants_hold() {
        for inst in small() {
            assert!(!inst.intrinsic_mask.is_empty());
            assert_eq!(inst.intrinsic_mask.overlap(&inst.context_mask), 0);
            assert!(inst.image.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn labels_are_balanced_per_split() {
        let data = small();
        for split in Split::ALL {
            let items: Vec<_> = data.iter().filter(|i| i.split == split).collect();
            let ones = items.iter().filter(|i| i.label == 1).count();
            assert!(ones.abs_diff(items.len() - ones) <= 1);
        }
    }

    #[test]
    fn certain_cooccurrence_ties_context_to_class() {
        let spec = SceneSpec {
            context_cooccurrence_train: 1.0,
            ..SceneSpec::default()
        };
        let data = generate_dataset(&spec, SplitCounts::from_total(200)).unwrap();
        for inst in data.iter().filter(|i| i.split == Split::Train) {
            assert_eq!(inst.has_context(), inst.label == 1);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = [
            SceneSpec {
                context_cooccurrence_train: 1.5,
                ..SceneSpec::default()
            },
            SceneSpec {
                context_glyph: Glyph::Disk,
                ..SceneSpec::default()
            },
            SceneSpec {
                shape_size_range: (10, 80),
                ..SceneSpec::default()
            },
        ];
        for spec in bad {
            assert!(matches!(
                generate_dataset(&spec, SplitCounts::from_total(10)),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn crowded_scene_fails_to_place_context() {
        let spec = SceneSpec {
            image_size: 16,
            shape_size_range: (12, 12),
            context_cooccurrence_train: 1.0,
            ..SceneSpec::default()
        };
        let counts = SplitCounts {
            train: 2,
            validation: 0,
            test: 0,
        };
        assert!(matches!(generate_dataset(&spec, counts), Err(Error::Generation(_))));
    }

    #[test]
    fn oracle_examples() {
        let cfg = OracleConfig::default();
        let data = small();
        let inst = data.iter().find(|i| i.has_context()).unwrap();

        let v = oracle_verdict(&as_map(&inst.intrinsic_mask), inst, &cfg).unwrap();
        assert!(v.is_reasonable());
        let v = oracle_verdict(&as_map(&inst.context_mask), inst, &cfg).unwrap();
        assert_eq!((v.q1_sufficient, v.q2_contextual), (Answer::No, Answer::Yes));
        let zero = AttentionMap {
            grid: Grid::zeros(16, 16),
            normalized: true,
            class_index: 0,
            instance_id: None,
        };
        let v = oracle_verdict(&zero, inst, &cfg).unwrap();
        assert_eq!((v.q1_sufficient, v.q2_contextual), (Answer::No, Answer::No));
        assert!(!v.is_reasonable());
    }

    #[test]
    fn oracle_mask_is_the_intrinsic_region() {
        for inst in small() {
            let m = oracle_mask(&inst);
            assert_eq!(m, inst.intrinsic_mask);
            assert_eq!(m.overlap(&inst.context_mask), 0);
            assert!(oracle_verdict(&as_map(&m), &inst, &OracleConfig::default())
                .unwrap()
                .is_reasonable());
        }
    }
}
