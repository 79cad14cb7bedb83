//! Synthetic face-like dataset: rasterized component shapes, ground-truth
//! edge masks, and rotation/scale augmentation.
//!
//! Classes: 0 background, 1 skin, 2 left eye, 3 right eye, 4 left brow,
//! 5 right brow, 6 nose, 7 mouth.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 8;
pub const BACKGROUND: u8 = 0;

/// Per-pixel class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: Vec<u8>) -> Result<Self> {
        if classes.len() != height * width {
            return Err(Error::contract(format!(
                "label buffer of {} entries does not match {height}x{width}",
                classes.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            classes,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        LabelMap {
            height,
            width,
            classes: vec![class; height * width],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.classes[row * self.width + col]
    }

    /// Nearest-neighbor downsampling by an integer factor (top-left pixel
    /// of each block), as used to bring labels onto the decoder grid.
    pub fn downsample_nearest(&self, factor: usize) -> Result<LabelMap> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor)
        {
            return Err(Error::contract(format!(
                "downsample factor {factor} does not divide {}x{}",
                self.height, self.width
            )));
        }
        let (ho, wo) = (self.height / factor, self.width / factor);
        let mut classes = Vec::with_capacity(ho * wo);
        for r in 0..ho {
            for c in 0..wo {
                classes.push(self.at(r * factor, c * factor));
            }
        }
        LabelMap::new(ho, wo, classes)
    }
}

/// Binary edge indicator derived from a label map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<u8>,
}

impl EdgeMask {
    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.bits[row * self.width + col]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }
}

/// A pixel is an edge pixel iff any existing 4-neighbor (up, down, left,
/// right; no wraparound) carries a different class. Missing neighbors at
/// the border are skipped, so a corner of a constant map is not an edge.
pub fn extract_edge_mask(labels: &LabelMap) -> EdgeMask {
    let (h, w) = (labels.height, labels.width);
    let mut bits = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            let me = labels.at(r, c);
            let differs = (r > 0 && labels.at(r - 1, c) != me)
                || (r + 1 < h && labels.at(r + 1, c) != me)
                || (c > 0 && labels.at(r, c - 1) != me)
                || (c + 1 < w && labels.at(r, c + 1) != me);
            bits[r * w + c] = differs as u8;
        }
    }
    EdgeMask {
        height: h,
        width: w,
        bits,
    }
}

/// One image/label pair.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `[H, W, 3]`, values in `[0, 1]`.
    pub image: Tensor,
    pub labels: LabelMap,
}

/// Generator settings. Geometry is expressed as canvas fractions so the
/// same face layout renders at any size.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub size: (usize, usize),
    pub num_classes: usize,
    /// Center jitter, max offset as a fraction of the canvas extent.
    pub center_jitter: f64,
    /// Radius jitter, relative scale range `[1 - j, 1 + j]`.
    pub radius_jitter: f64,
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn with_size(h: usize, w: usize, seed: u64) -> Self {
        SynthConfig {
            size: (h, w),
            num_classes: NUM_CLASSES,
            center_jitter: 0.02,
            radius_jitter: 0.08,
            noise_std: 0.03,
            seed,
        }
    }

    /// Every shape must stay inside the canvas at the jitter extremes.
    pub fn validate(&self) -> Result<()> {
        if self.size.0 < 8 || self.size.1 < 8 {
            return Err(Error::contract("canvas must be at least 8x8"));
        }
        if !(0.0..0.5).contains(&self.center_jitter) || !(0.0..1.0).contains(&self.radius_jitter) {
            return Err(Error::contract("jitter ranges out of bounds"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::contract(format!(
                "noise stddev must be a finite non-negative real, got {}",
                self.noise_std
            )));
        }
        let grow = 1.0 + self.radius_jitter;
        for shape in face_shapes() {
            let (cy, cx, ry, rx) = shape.bounds();
            let top = cy - self.center_jitter - ry * grow;
            let bottom = cy + self.center_jitter + ry * grow;
            let left = cx - self.center_jitter - rx * grow;
            let right = cx + self.center_jitter + rx * grow;
            if top < 0.0 || left < 0.0 || bottom > 1.0 || right > 1.0 {
                return Err(Error::contract(format!(
                    "shape for class {} can leave the canvas under jitter",
                    shape.class
                )));
            }
        }
        Ok(())
    }
}

/// One face component in relative coordinates.
#[derive(Debug, Clone, Copy)]
struct FaceShape {
    class: u8,
    /// Center (row, col) as canvas fractions.
    center: (f64, f64),
    /// Half extents (row, col) as canvas fractions.
    radius: (f64, f64),
    /// Ellipse or axis-aligned rectangle.
    rectangular: bool,
}

impl FaceShape {
    fn bounds(&self) -> (f64, f64, f64, f64) {
        (self.center.0, self.center.1, self.radius.0, self.radius.1)
    }
}

/// Paint order; later shapes cover earlier ones.
fn face_shapes() -> [FaceShape; 7] {
    [
        FaceShape {
            class: 1,
            center: (0.52, 0.50),
            radius: (0.38, 0.33),
            rectangular: false,
        }, // skin
        FaceShape {
            class: 2,
            center: (0.42, 0.35),
            radius: (0.06, 0.08),
            rectangular: false,
        }, // l-eye
        FaceShape {
            class: 3,
            center: (0.42, 0.65),
            radius: (0.06, 0.08),
            rectangular: false,
        }, // r-eye
        FaceShape {
            class: 4,
            center: (0.30, 0.35),
            radius: (0.025, 0.08),
            rectangular: true,
        }, // l-brow
        FaceShape {
            class: 5,
            center: (0.30, 0.65),
            radius: (0.025, 0.08),
            rectangular: true,
        }, // r-brow
        FaceShape {
            class: 6,
            center: (0.54, 0.50),
            radius: (0.085, 0.05),
            rectangular: true,
        }, // nose
        FaceShape {
            class: 7,
            center: (0.72, 0.50),
            radius: (0.05, 0.14),
            rectangular: false,
        }, // mouth
    ]
}

/// Base RGB color per class.
pub const CLASS_COLORS: [[f64; 3]; NUM_CLASSES] = [
    [0.10, 0.15, 0.20], // background
    [0.85, 0.65, 0.50], // skin
    [0.10, 0.30, 0.80], // left eye
    [0.15, 0.75, 0.30], // right eye
    [0.35, 0.20, 0.10], // left brow
    [0.40, 0.25, 0.12], // right brow
    [0.95, 0.55, 0.40], // nose
    [0.80, 0.15, 0.20], // mouth
];

/// Rasterizes the shape stack with the given jitters; pure geometry, no
/// randomness. Jitters are (dy, dx, radius_scale) per shape, in paint
/// order.
fn rasterize(size: (usize, usize), jitters: &[(f64, f64, f64)]) -> LabelMap {
    let (h, w) = size;
    let mut labels = LabelMap::filled(h, w, BACKGROUND);
    for (shape, &(dy, dx, rs)) in face_shapes().iter().zip(jitters) {
        let cy = (shape.center.0 + dy) * h as f64;
        let cx = (shape.center.1 + dx) * w as f64;
        let ry = shape.radius.0 * rs * h as f64;
        let rx = shape.radius.1 * rs * w as f64;
        for r in 0..h {
            for c in 0..w {
                let fy = r as f64 + 0.5 - cy;
                let fx = c as f64 + 0.5 - cx;
                let inside = if shape.rectangular {
                    fy.abs() <= ry && fx.abs() <= rx
                } else {
                    (fy / ry).powi(2) + (fx / rx).powi(2) <= 1.0
                };
                if inside {
                    labels.classes[r * w + c] = shape.class;
                }
            }
        }
    }
    labels
}

/// Deterministic sample generation: the RNG stream is keyed by
/// `(cfg.seed, index)`, so content never depends on generation order.
pub fn synth_sample(cfg: &SynthConfig, index: u64) -> Result<Sample> {
    cfg.validate()?;
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index.wrapping_add(1));

    let shapes = face_shapes();
    let mut jitters = Vec::with_capacity(shapes.len());
    for _ in &shapes {
        let dy = rng.random_range(-cfg.center_jitter..=cfg.center_jitter);
        let dx = rng.random_range(-cfg.center_jitter..=cfg.center_jitter);
        let rs = rng.random_range(1.0 - cfg.radius_jitter..=1.0 + cfg.radius_jitter);
        jitters.push((dy, dx, rs));
    }
    let labels = rasterize(cfg.size, &jitters);

    let (h, w) = cfg.size;
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::contract(format!("bad noise stddev: {e}")))?;
    let mut image = vec![0.0; h * w * 3];
    for (pix, &class) in labels.classes.iter().enumerate() {
        let base = CLASS_COLORS[class as usize];
        for ch in 0..3 {
            let n = if cfg.noise_std > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            image[pix * 3 + ch] = (base[ch] + n).clamp(0.0, 1.0);
        }
    }
    Ok(Sample {
        image: Tensor::new(vec![h, w, 3], image)?,
        labels,
    })
}

/// Rotation/scale augmentation with sampled parameters: angle uniform in
/// (-30, 30) degrees, scale uniform in (0.75, 1.25).
pub fn augment(
    image: &Tensor,
    labels: &LabelMap,
    rng: &mut impl Rng,
) -> Result<(Tensor, LabelMap)> {
    let angle = rng.random_range(-30.0..30.0);
    let scale = rng.random_range(0.75..1.25);
    warp(image, labels, angle, scale)
}

/// The deterministic core of `augment`: rotate by `angle_deg` and scale
/// about the canvas center. Resampling pulls from the inverse map so the
/// output has no holes; images sample bilinearly (black outside), labels
/// by nearest neighbor (background outside).
pub fn warp(
    image: &Tensor,
    labels: &LabelMap,
    angle_deg: f64,
    scale: f64,
) -> Result<(Tensor, LabelMap)> {
    let (h, w) = (labels.height, labels.width);
    if image.shape != [h, w, 3] {
        return Err(Error::dimension("warp", &image.shape, &[h, w, 3]));
    }
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let rad = angle_deg.to_radians();
    let (sin, cos) = rad.sin_cos();

    let mut out_img = vec![0.0; h * w * 3];
    let mut out_lab = vec![BACKGROUND; h * w];
    for r in 0..h {
        for c in 0..w {
            let dr = r as f64 - cy;
            let dc = c as f64 - cx;
            // inverse map: undo the scale, then rotate by -angle
            let sr = (cos * dr + sin * dc) / scale + cy;
            let sc = (-sin * dr + cos * dc) / scale + cx;

            // nearest neighbor for the categorical map
            let nr = sr.round() as isize;
            let nc = sc.round() as isize;
            if nr >= 0 && nr < h as isize && nc >= 0 && nc < w as isize {
                out_lab[r * w + c] = labels.at(nr as usize, nc as usize);
            }

            // bilinear for the image
            let r0 = sr.floor();
            let c0 = sc.floor();
            let fr = sr - r0;
            let fc = sc - c0;
            for ch in 0..3 {
                let mut acc = 0.0;
                for (dy, wy) in [(0.0, 1.0 - fr), (1.0, fr)] {
                    for (dx, wx) in [(0.0, 1.0 - fc), (1.0, fc)] {
                        let rr = r0 + dy;
                        let cc = c0 + dx;
                        let wgt = wy * wx;
                        if wgt == 0.0 {
                            continue;
                        }
                        if rr >= 0.0 && rr < h as f64 && cc >= 0.0 && cc < w as f64 {
                            acc += wgt * image.data[((rr as usize) * w + cc as usize) * 3 + ch];
                        }
                    }
                }
                out_img[(r * w + c) * 3 + ch] = acc;
            }
        }
    }
    Ok((
        Tensor::new(vec![h, w, 3], out_img)?,
        LabelMap::new(h, w, out_lab)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn edge_mask_constant_map_is_empty() {
        let labels = LabelMap::filled(5, 7, 3);
        let mask = extract_edge_mask(&labels);
        assert!(mask.bits.iter().all(|&b| b == 0));
    }

    #[test]
    fn edge_mask_two_column_split() {
        // left two columns class 0, right column class 1: only the pixels
        // adjacent to the class change are edges
        let labels = LabelMap::new(3, 3, vec![0, 0, 1, 0, 0, 1, 0, 0, 1]).unwrap();
        let mask = extract_edge_mask(&labels);
        assert_eq!(mask.bits, vec![0, 1, 1, 0, 1, 1, 0, 1, 1]);
    }

    #[test]
    fn edge_mask_checkerboard_is_full() {
        let mut classes = vec![0u8; 16];
        for r in 0..4 {
            for c in 0..4 {
                classes[r * 4 + c] = ((r + c) % 2) as u8;
            }
        }
        let labels = LabelMap::new(4, 4, classes).unwrap();
        let mask = extract_edge_mask(&labels);
        assert!(mask.bits.iter().all(|&b| b == 1));
    }

    #[test]
    fn edge_mask_matches_brute_force_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let classes: Vec<u8> = (0..64).map(|_| rng.random_range(0..4u8)).collect();
            let labels = LabelMap::new(8, 8, classes).unwrap();
            let mask = extract_edge_mask(&labels);
            for r in 0..8usize {
                for c in 0..8usize {
                    let mut expect = 0u8;
                    for (dr, dc) in [(-1i32, 0i32), (1, 0), (0, -1), (0, 1)] {
                        let (nr, nc) = (r as i32 + dr, c as i32 + dc);
                        if (0..8).contains(&nr)
                            && (0..8).contains(&nc)
                            && labels.at(nr as usize, nc as usize) != labels.at(r, c)
                        {
                            expect = 1;
                        }
                    }
                    assert_eq!(mask.at(r, c), expect);
                }
            }
        }
    }

    #[test]
    fn edge_mask_support_invariant_under_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let perm: [u8; 8] = [5, 2, 7, 0, 6, 1, 4, 3];
        for _ in 0..50 {
            let classes: Vec<u8> = (0..64).map(|_| rng.random_range(0..8u8)).collect();
            let labels = LabelMap::new(8, 8, classes.clone()).unwrap();
            let relabeled =
                LabelMap::new(8, 8, classes.iter().map(|&c| perm[c as usize]).collect()).unwrap();
            assert_eq!(
                extract_edge_mask(&labels).bits,
                extract_edge_mask(&relabeled).bits
            );
        }
    }

    #[test]
    fn synth_is_deterministic_in_seed_and_index() {
        let cfg = SynthConfig::with_size(24, 24, 99);
        let a = synth_sample(&cfg, 5).unwrap();
        let b = synth_sample(&cfg, 5).unwrap();
        assert_eq!(a.labels, b.labels);
        let bits_a: Vec<u64> = a.image.data.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = b.image.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
        let c = synth_sample(&cfg, 6).unwrap();
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn synth_zero_jitter_matches_direct_rasterization() {
        let mut cfg = SynthConfig::with_size(32, 32, 7);
        cfg.center_jitter = 0.0;
        cfg.radius_jitter = 0.0;
        cfg.noise_std = 0.0;
        let sample = synth_sample(&cfg, 0).unwrap();
        // independent oracle: test shapes directly, last paint wins
        let shapes = face_shapes();
        for r in 0..32usize {
            for c in 0..32usize {
                let mut expect = BACKGROUND;
                for s in &shapes {
                    let cy = s.center.0 * 32.0;
                    let cx = s.center.1 * 32.0;
                    let ry = s.radius.0 * 32.0;
                    let rx = s.radius.1 * 32.0;
                    let fy = r as f64 + 0.5 - cy;
                    let fx = c as f64 + 0.5 - cx;
                    let inside = if s.rectangular {
                        fy.abs() <= ry && fx.abs() <= rx
                    } else {
                        (fy / ry).powi(2) + (fx / rx).powi(2) <= 1.0
                    };
                    if inside {
                        expect = s.class;
                    }
                }
                assert_eq!(sample.labels.at(r, c), expect, "pixel ({r},{c})");
            }
        }
        // noiseless image is the exact base color of each label
        for (pix, &class) in sample.labels.classes.iter().enumerate() {
            for ch in 0..3 {
                assert_eq!(
                    sample.image.data[pix * 3 + ch],
                    CLASS_COLORS[class as usize][ch]
                );
            }
        }
    }

    #[test]
    fn synth_contains_all_classes_over_100_samples() {
        let cfg = SynthConfig::with_size(32, 32, 123);
        for idx in 0..100 {
            let sample = synth_sample(&cfg, idx).unwrap();
            let mut seen = [false; NUM_CLASSES];
            for &c in &sample.labels.classes {
                seen[c as usize] = true;
            }
            assert!(
                seen.iter().all(|&s| s),
                "sample {idx} missing a class: {seen:?}"
            );
        }
    }

    #[test]
    fn warp_identity_is_exact() {
        let cfg = SynthConfig::with_size(16, 16, 1);
        let s = synth_sample(&cfg, 0).unwrap();
        let (img, lab) = warp(&s.image, &s.labels, 0.0, 1.0).unwrap();
        assert_eq!(lab, s.labels);
        for (a, b) in img.data.iter().zip(&s.image.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_quarter_turn_permutes_labels() {
        let cfg = SynthConfig::with_size(17, 17, 2);
        let s = synth_sample(&cfg, 3).unwrap();
        let (_, lab) = warp(&s.image, &s.labels, 90.0, 1.0).unwrap();
        // inverse map of a +90 degree turn sends (r, c) to
        // (cy + (c - cx), cx - (r - cy)) on a square canvas
        let n = 17usize;
        let ctr = (n as isize - 1) / 2;
        for r in 0..n {
            for c in 0..n {
                let sr = ctr + (c as isize - ctr);
                let sc = ctr - (r as isize - ctr);
                assert_eq!(lab.at(r, c), s.labels.at(sr as usize, sc as usize));
            }
        }
    }

    #[test]
    fn warp_never_invents_classes() {
        let cfg = SynthConfig::with_size(20, 20, 3);
        let s = synth_sample(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..10 {
            let (_, lab) = augment(&s.image, &s.labels, &mut rng).unwrap();
            let mut allowed: Vec<u8> = s.labels.classes.clone();
            allowed.push(BACKGROUND);
            assert!(lab.classes.iter().all(|c| allowed.contains(c)));
            assert!(lab.classes.iter().all(|&c| (c as usize) < NUM_CLASSES));
        }
    }

    #[test]
    fn label_downsample_takes_block_corners() {
        let labels = LabelMap::new(4, 4, (0..16).map(|v| v as u8).collect()).unwrap();
        let down = labels.downsample_nearest(2).unwrap();
        assert_eq!(down.classes, vec![0, 2, 8, 10]);
    }
}
