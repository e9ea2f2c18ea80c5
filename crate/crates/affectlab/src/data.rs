//! Sample/label data model, augmentation pipeline, patchification and the
//! deterministic synthetic dataset generator.
//!
//! Label conventions follow the challenge encoding: valence/arousal in
//! [-1, 1] with -5.0 marking an invalid annotation, expression in 0..=7
//! (multi-task) or 0..=5 (expression-only) with -1 marking invalid, and a
//! 12-way binary action-unit vector carrying an explicit validity flag.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::derive_rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NUM_AUS: usize = 12;
pub const AU_NAMES: [&str; NUM_AUS] = [
    "AU1", "AU2", "AU4", "AU6", "AU7", "AU10", "AU12", "AU15", "AU23", "AU24", "AU25", "AU26",
];
pub const VA_SENTINEL: f64 = -5.0;
pub const EXP_SENTINEL: i32 = -1;
pub const MTL_CLASSES: usize = 8;
pub const LSD_CLASSES: usize = 6;
/// Spatial size every model input has after augmentation.
pub const INPUT_SIZE: usize = 224;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VAPair {
    pub valence: f64,
    pub arousal: f64,
}

impl VAPair {
    pub fn invalid() -> Self {
        VAPair {
            valence: VA_SENTINEL,
            arousal: VA_SENTINEL,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.valence != VA_SENTINEL && self.arousal != VA_SENTINEL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpressionLabel(pub i32);

impl ExpressionLabel {
    pub fn is_valid(&self) -> bool {
        self.0 >= 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AULabels {
    pub values: [u8; NUM_AUS],
    pub valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Labels {
    pub va: VAPair,
    pub expression: ExpressionLabel,
    pub au: AULabels,
}

/// (va_valid, exp_valid, au_valid)
pub fn label_validity(labels: &Labels) -> (bool, bool, bool) {
    (
        labels.va.is_valid(),
        labels.expression.is_valid(),
        labels.au.valid,
    )
}

/// Channel-major (CHW) float image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ImageTensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[self.channels * self.height * self.width],
            self.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
    }
}

/// A dataset item before augmentation (any square size >= 112).
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub id: String,
    pub image: ImageTensor,
    pub labels: Labels,
}

/// An augmented, model-ready sample: 3 x 224 x 224.
#[derive(Debug, Clone)]
pub struct FaceSample {
    pub id: String,
    pub image: ImageTensor,
    pub labels: Labels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    TrainMtl,
    TrainLsd,
    Eval,
}

/// The multi-task recipe resizes to 232 then random-crops 224; the
/// expression-only recipe resizes to 228; eval resizes straight to 224.
pub fn augment(image: &ImageTensor, mode: AugmentMode, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    if image.channels != 3 {
        return Err(Error::MalformedImage(format!(
            "expected 3 channels, got {}",
            image.channels
        )));
    }
    match mode {
        AugmentMode::Eval => Ok(resize_bilinear(image, INPUT_SIZE, INPUT_SIZE)),
        AugmentMode::TrainMtl | AugmentMode::TrainLsd => {
            let side = if mode == AugmentMode::TrainMtl { 232 } else { 228 };
            let resized = resize_bilinear(image, side, side);
            let limit = side - INPUT_SIZE;
            let oy = crop_origin(rng, limit);
            let ox = crop_origin(rng, limit);
            let mut out = crop(&resized, oy, ox, INPUT_SIZE, INPUT_SIZE);
            if rng.random::<f64>() < 0.5 {
                hflip(&mut out);
            }
            color_jitter(&mut out, rng);
            Ok(out)
        }
    }
}

/// Uniform crop origin in 0..=limit.
pub(crate) fn crop_origin(rng: &mut ChaCha8Rng, limit: usize) -> usize {
    rng.random_range(0..=limit)
}

fn crop(img: &ImageTensor, oy: usize, ox: usize, h: usize, w: usize) -> ImageTensor {
    let mut out = ImageTensor::new(img.channels, h, w);
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                *out.at_mut(c, y, x) = img.at(c, oy + y, ox + x);
            }
        }
    }
    out
}

fn hflip(img: &mut ImageTensor) {
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width / 2 {
                let xr = img.width - 1 - x;
                let a = img.at(c, y, x);
                let b = img.at(c, y, xr);
                *img.at_mut(c, y, x) = b;
                *img.at_mut(c, y, xr) = a;
            }
        }
    }
}

/// Brightness, contrast and saturation factors drawn uniformly from
/// [0.6, 1.4], applied in that order; the result is clamped to [0, 1].
fn color_jitter(img: &mut ImageTensor, rng: &mut ChaCha8Rng) {
    let b = rng.random_range(0.6..1.4) as f32;
    let c = rng.random_range(0.6..1.4) as f32;
    let s = rng.random_range(0.6..1.4) as f32;
    let hw = img.height * img.width;

    for v in img.data.iter_mut() {
        *v *= b;
    }
    let gray: Vec<f32> = (0..hw)
        .map(|i| 0.299 * img.data[i] + 0.587 * img.data[hw + i] + 0.114 * img.data[2 * hw + i])
        .collect();
    let mean: f32 = gray.iter().sum::<f32>() / hw as f32;
    for v in img.data.iter_mut() {
        *v = c * *v + (1.0 - c) * mean;
    }
    for ch in 0..3 {
        for i in 0..hw {
            let v = &mut img.data[ch * hw + i];
            *v = s * *v + (1.0 - s) * gray[i];
        }
    }
    for v in img.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

pub fn resize_bilinear(img: &ImageTensor, oh: usize, ow: usize) -> ImageTensor {
    let mut out = ImageTensor::new(img.channels, oh, ow);
    let sy = img.height as f32 / oh as f32;
    let sx = img.width as f32 / ow as f32;
    for c in 0..img.channels {
        for y in 0..oh {
            let fy = ((y as f32 + 0.5) * sy - 0.5).max(0.0);
            let y0 = (fy as usize).min(img.height - 1);
            let y1 = (y0 + 1).min(img.height - 1);
            let wy = fy - y0 as f32;
            for x in 0..ow {
                let fx = ((x as f32 + 0.5) * sx - 0.5).max(0.0);
                let x0 = (fx as usize).min(img.width - 1);
                let x1 = (x0 + 1).min(img.width - 1);
                let wx = fx - x0 as f32;
                let v = img.at(c, y0, x0) * (1.0 - wy) * (1.0 - wx)
                    + img.at(c, y0, x1) * (1.0 - wy) * wx
                    + img.at(c, y1, x0) * wy * (1.0 - wx)
                    + img.at(c, y1, x1) * wy * wx;
                *out.at_mut(c, y, x) = v;
            }
        }
    }
    out
}

/// Token sequence for one image: all patch vectors in row-major grid order
/// plus the sorted set of indices that survive masking.
#[derive(Debug, Clone)]
pub struct PatchSequence {
    pub patch_size: usize,
    pub grid: (usize, usize),
    /// [n_patches, patch_size^2 * 3] row-major.
    pub tokens: Vec<f32>,
    pub kept: Vec<usize>,
}

impl PatchSequence {
    pub fn n_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn token_len(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn token(&self, idx: usize) -> &[f32] {
        let l = self.token_len();
        &self.tokens[idx * l..(idx + 1) * l]
    }

    /// Replace the kept set (the sequence itself is unchanged).
    pub fn with_kept(mut self, kept: Vec<usize>) -> Self {
        debug_assert!(kept.iter().all(|&i| i < self.n_patches()));
        self.kept = kept;
        self
    }
}

/// Split a 3 x 224 x 224 image into non-overlapping patches, row-major from
/// the top-left. Each token is the (channel, y, x)-ordered flattening of its
/// patch. No masking: all indices are kept.
pub fn patchify(img: &ImageTensor, patch_size: usize) -> Result<PatchSequence> {
    if img.channels != 3 || img.height != INPUT_SIZE || img.width != INPUT_SIZE {
        return Err(Error::Shape(format!(
            "patchify expects 3x{INPUT_SIZE}x{INPUT_SIZE}, got {}x{}x{}",
            img.channels, img.height, img.width
        )));
    }
    if !INPUT_SIZE.is_multiple_of(patch_size) {
        return Err(Error::Config(format!(
            "patch size {patch_size} does not divide {INPUT_SIZE}"
        )));
    }
    let g = INPUT_SIZE / patch_size;
    let token_len = patch_size * patch_size * 3;
    let mut tokens = vec![0.0f32; g * g * token_len];
    for pr in 0..g {
        for pc in 0..g {
            let base = (pr * g + pc) * token_len;
            let mut k = 0;
            for c in 0..3 {
                for y in 0..patch_size {
                    for x in 0..patch_size {
                        tokens[base + k] = img.at(c, pr * patch_size + y, pc * patch_size + x);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(PatchSequence {
        patch_size,
        grid: (g, g),
        tokens,
        kept: (0..g * g).collect(),
    })
}

/// Exact inverse of `patchify` (uses all tokens, ignores the kept set).
pub fn depatchify(seq: &PatchSequence) -> ImageTensor {
    let p = seq.patch_size;
    let (gr, gc) = seq.grid;
    let mut img = ImageTensor::new(3, gr * p, gc * p);
    for pr in 0..gr {
        for pc in 0..gc {
            let tok = seq.token(pr * gc + pc);
            let mut k = 0;
            for c in 0..3 {
                for y in 0..p {
                    for x in 0..p {
                        *img.at_mut(c, pr * p + y, pc * p + x) = tok[k];
                        k += 1;
                    }
                }
            }
        }
    }
    img
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Mtl,
    Lsd,
}

impl Task {
    pub fn classes(&self) -> usize {
        match self {
            Task::Mtl => MTL_CLASSES,
            Task::Lsd => LSD_CLASSES,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::Mtl => "mtl",
            Task::Lsd => "lsd",
        }
    }
}

pub const SYNTH_SIZE: usize = 112;
const SYNTH_NOISE: f32 = 0.05;
/// Per-AU activation probabilities (fixed, slightly varied per unit).
const AU_PROBS: [f64; NUM_AUS] = [
    0.35, 0.38, 0.41, 0.43, 0.46, 0.49, 0.51, 0.54, 0.57, 0.59, 0.62, 0.65,
];
/// Per-class valence/arousal anchors on the affect circumplex; the synthetic
/// VA label is a function of the expression class and AU pattern so that
/// task scores carry VA information (the premise the VA head relies on).
const ANCHOR_V: [f64; MTL_CLASSES] = [0.0, -0.6, -0.45, -0.5, 0.7, -0.55, 0.25, 0.1];
const ANCHOR_A: [f64; MTL_CLASSES] = [-0.1, 0.55, 0.3, 0.65, 0.5, -0.45, 0.7, 0.05];
const AU_SHIFT_V: [f64; NUM_AUS] = [
    0.02, -0.02, -0.02, 0.02, -0.01, 0.01, 0.02, -0.02, -0.01, 0.01, 0.02, -0.01,
];
const AU_SHIFT_A: [f64; NUM_AUS] = [
    0.01, 0.02, -0.02, -0.01, 0.02, -0.02, 0.01, 0.01, -0.02, 0.02, -0.01, 0.02,
];

/// Affine map from a valence/arousal value in [-1, 1] to a channel gain in
/// [0.25, 0.75].
pub fn va_to_gain(v: f64) -> f64 {
    (v + 1.0) / 2.0 * 0.5 + 0.25
}

/// Deterministic synthetic dataset: labels are drawn first, pixels are
/// rendered from them so every label is recoverable from the image.
/// Expression sets the position of a bright blob on an 8-cell grid, valence
/// and arousal set the global red/blue channel gains, each active AU toggles
/// one of 12 fixed horizontal stripe bands; uniform noise of amplitude 0.05
/// is added on top. For the multi-task flavor, 10% of samples independently
/// get a VA sentinel, an invalid expression, or an invalid AU vector.
pub fn synth_dataset(n: usize, task: Task, seed: u64) -> Vec<LabeledImage> {
    assert!(n >= 1);
    let task_tag = match task {
        Task::Mtl => 1,
        Task::Lsd => 2,
    };
    (0..n)
        .map(|i| {
            let mut rng = derive_rng(seed, &[task_tag, i as u64]);
            let exp = rng.random_range(0..task.classes() as i32);
            let mut au = [0u8; NUM_AUS];
            for (j, flag) in au.iter_mut().enumerate() {
                *flag = u8::from(rng.random::<f64>() < AU_PROBS[j]);
            }
            let mut v = ANCHOR_V[exp as usize];
            let mut a = ANCHOR_A[exp as usize];
            for j in 0..NUM_AUS {
                let centered = au[j] as f64 - 0.5;
                v += AU_SHIFT_V[j] * centered;
                a += AU_SHIFT_A[j] * centered;
            }
            v = (v + rng.random_range(-0.05..0.05)).clamp(-1.0, 1.0);
            a = (a + rng.random_range(-0.05..0.05)).clamp(-1.0, 1.0);

            let mut labels = Labels {
                va: VAPair {
                    valence: v,
                    arousal: a,
                },
                expression: ExpressionLabel(exp),
                au: AULabels { values: au, valid: true },
            };

            if task == Task::Mtl {
                // independent 10% invalidation draws, applied to labels only
                if rng.random::<f64>() < 0.1 {
                    labels.va = VAPair::invalid();
                }
                if rng.random::<f64>() < 0.1 {
                    labels.expression = ExpressionLabel(EXP_SENTINEL);
                }
                if rng.random::<f64>() < 0.1 {
                    labels.au.valid = false;
                }
            }

            let image = render_synth(v, a, exp as usize, &au, &mut rng);
            LabeledImage {
                id: format!("{}_{:06}", task.name(), i),
                image,
                labels,
            }
        })
        .collect()
}

fn render_synth(v: f64, a: f64, exp: usize, au: &[u8; NUM_AUS], rng: &mut ChaCha8Rng) -> ImageTensor {
    let s = SYNTH_SIZE;
    let mut img = ImageTensor::new(3, s, s);
    let red = va_to_gain(v) as f32;
    let blue = va_to_gain(a) as f32;
    let hw = s * s;
    img.data[..hw].fill(red);
    img.data[hw..2 * hw].fill(0.1);
    img.data[2 * hw..].fill(blue);

    // bright blob on a 4x2 cell grid selects the expression class
    let cell_w = s / 4;
    let cell_h = s / 2;
    let (cx, cy) = (exp % 4, exp / 4);
    let blob = 20usize;
    let oy = cy * cell_h + (cell_h - blob) / 2;
    let ox = cx * cell_w + (cell_w - blob) / 2;
    for y in oy..oy + blob {
        for x in ox..ox + blob {
            *img.at_mut(1, y, x) += 0.55;
        }
    }

    // one horizontal stripe band per active AU
    for (j, &flag) in au.iter().enumerate() {
        if flag == 1 {
            for y in j * 9..j * 9 + 4 {
                for x in 0..s {
                    *img.at_mut(1, y, x) += 0.3;
                }
            }
        }
    }

    for px in img.data.iter_mut() {
        *px = (*px + rng.random_range(-SYNTH_NOISE..SYNTH_NOISE)).clamp(0.0, 1.0);
    }
    img
}

// ---- on-disk formats ----

pub const LABELS_HEADER: &str =
    "id,valence,arousal,expression,AU1,AU2,AU4,AU6,AU7,AU10,AU12,AU15,AU23,AU24,AU25,AU26,au_valid";
pub const PREDICTIONS_HEADER: &str =
    "id,valence,arousal,expression,AU1,AU2,AU4,AU6,AU7,AU10,AU12,AU15,AU23,AU24,AU25,AU26";

#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub id: String,
    pub labels: Labels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub id: String,
    pub valence: f64,
    pub arousal: f64,
    pub expression: i32,
    pub au: [u8; NUM_AUS],
}

pub fn write_labels_csv(path: &Path, rows: &[LabelRow]) -> Result<()> {
    let mut out = String::new();
    out.push_str(LABELS_HEADER);
    out.push('\n');
    for r in rows {
        let l = &r.labels;
        write!(
            out,
            "{},{:.6},{:.6},{}",
            r.id, l.va.valence, l.va.arousal, l.expression.0
        )
        .unwrap();
        for v in l.au.values {
            write!(out, ",{v}").unwrap();
        }
        writeln!(out, ",{}", u8::from(l.au.valid)).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<LabelRow>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = content.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::data(path, 1, "empty file"))?;
    check_header(path, header, LABELS_HEADER)?;
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 17 {
            return Err(Error::data(
                path,
                lineno,
                format!("expected 17 fields, got {}", fields.len()),
            ));
        }
        let valence = parse_real(path, lineno, fields[1])?;
        let arousal = parse_real(path, lineno, fields[2])?;
        let expression = parse_int(path, lineno, fields[3])?;
        let mut au = [0u8; NUM_AUS];
        for (j, f) in fields[4..16].iter().enumerate() {
            au[j] = parse_flag(path, lineno, f)?;
        }
        let valid = parse_flag(path, lineno, fields[16])? == 1;
        rows.push(LabelRow {
            id: fields[0].to_string(),
            labels: Labels {
                va: VAPair { valence, arousal },
                expression: ExpressionLabel(expression),
                au: AULabels { values: au, valid },
            },
        });
    }
    Ok(rows)
}

pub fn write_predictions_csv(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut out = String::new();
    out.push_str(PREDICTIONS_HEADER);
    out.push('\n');
    for r in rows {
        write!(
            out,
            "{},{:.6},{:.6},{}",
            r.id, r.valence, r.arousal, r.expression
        )
        .unwrap();
        for v in r.au {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<PredictionRow>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = content.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::data(path, 1, "empty file"))?;
    check_header(path, header, PREDICTIONS_HEADER)?;
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 16 {
            return Err(Error::data(
                path,
                lineno,
                format!("expected 16 fields, got {}", fields.len()),
            ));
        }
        let valence = parse_real(path, lineno, fields[1])?;
        let arousal = parse_real(path, lineno, fields[2])?;
        let expression = parse_int(path, lineno, fields[3])?;
        let mut au = [0u8; NUM_AUS];
        for (j, f) in fields[4..16].iter().enumerate() {
            au[j] = parse_flag(path, lineno, f)?;
        }
        rows.push(PredictionRow {
            id: fields[0].to_string(),
            valence,
            arousal,
            expression,
            au,
        });
    }
    Ok(rows)
}

fn check_header(path: &Path, got: &str, expected: &str) -> Result<()> {
    if got.trim_end() == expected {
        return Ok(());
    }
    let got_cols: Vec<&str> = got.trim_end().split(',').collect();
    let want_cols: Vec<&str> = expected.split(',').collect();
    for w in &want_cols {
        if !got_cols.contains(w) {
            return Err(Error::data(path, 1, format!("missing column {w}")));
        }
    }
    for g in &got_cols {
        if !want_cols.contains(g) {
            return Err(Error::data(path, 1, format!("unknown column {g}")));
        }
    }
    Err(Error::data(path, 1, "column order does not match header"))
}

fn parse_real(path: &Path, line: usize, s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::data(path, line, format!("malformed real value '{s}'")))
}

fn parse_int(path: &Path, line: usize, s: &str) -> Result<i32> {
    s.trim()
        .parse::<i32>()
        .map_err(|_| Error::data(path, line, format!("malformed integer value '{s}'")))
}

fn parse_flag(path: &Path, line: usize, s: &str) -> Result<u8> {
    match s.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        _ => Err(Error::data(path, line, format!("malformed flag value '{s}'"))),
    }
}

// ---- dataset directories (PNG images + labels.csv) ----

pub fn write_dataset_dir(dir: &Path, samples: &[LabeledImage]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows: Vec<LabelRow> = samples
        .iter()
        .map(|s| LabelRow {
            id: s.id.clone(),
            labels: s.labels,
        })
        .collect();
    write_labels_csv(&dir.join("labels.csv"), &rows)?;
    for s in samples {
        let path = dir.join(format!("{}.png", s.id));
        let (h, w) = (s.image.height as u32, s.image.width as u32);
        let hw = s.image.height * s.image.width;
        let mut buf = Vec::with_capacity(hw * 3);
        for i in 0..hw {
            for c in 0..3 {
                buf.push((s.image.data[c * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        let img: image::RgbImage = image::ImageBuffer::from_raw(w, h, buf)
            .expect("buffer size matches dimensions");
        img.save(&path)
            .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
    }
    Ok(())
}

pub fn read_dataset_dir(dir: &Path) -> Result<Vec<LabeledImage>> {
    let rows = read_labels_csv(&dir.join("labels.csv"))?;
    rows.into_iter()
        .map(|r| {
            let path = dir.join(format!("{}.png", r.id));
            let img = image::open(&path)
                .map_err(|e| Error::io(&path, std::io::Error::other(e)))?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let hw = h * w;
            let mut data = vec![0.0f32; 3 * hw];
            for (i, px) in img.pixels().enumerate() {
                for c in 0..3 {
                    data[c * hw + i] = px.0[c] as f32 / 255.0;
                }
            }
            Ok(LabeledImage {
                id: r.id,
                image: ImageTensor {
                    channels: 3,
                    height: h,
                    width: w,
                    data,
                },
                labels: r.labels,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(size: usize) -> ImageTensor {
        let mut img = ImageTensor::new(3, size, size);
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    *img.at_mut(c, y, x) = ((c * 31 + y * 7 + x * 3) % 97) as f32 / 96.0;
                }
            }
        }
        img
    }

    #[test]
    fn augment_eval_is_deterministic_224() {
        let img = test_image(112);
        let mut r1 = derive_rng(1, &[0]);
        let mut r2 = derive_rng(2, &[99]);
        let a = augment(&img, AugmentMode::Eval, &mut r1).unwrap();
        let b = augment(&img, AugmentMode::Eval, &mut r2).unwrap();
        assert_eq!(a.height, 224);
        assert_eq!(a.width, 224);
        assert_eq!(a, b);
    }

    #[test]
    fn augment_rejects_non_rgb() {
        let img = ImageTensor::new(1, 112, 112);
        let mut rng = derive_rng(1, &[0]);
        assert!(matches!(
            augment(&img, AugmentMode::Eval, &mut rng),
            Err(Error::MalformedImage(_))
        ));
    }

    #[test]
    fn crop_origin_ranges_match_resize_targets() {
        // 232 - 224 = 8 for the multi-task recipe, 228 - 224 = 4 for LSD
        let mut rng = derive_rng(3, &[1]);
        let mut seen_mtl = [false; 9];
        let mut seen_lsd = [false; 5];
        for _ in 0..2000 {
            let o = crop_origin(&mut rng, 8);
            assert!(o <= 8);
            seen_mtl[o] = true;
            let o = crop_origin(&mut rng, 4);
            assert!(o <= 4);
            seen_lsd[o] = true;
        }
        assert!(seen_mtl.iter().all(|&s| s));
        assert!(seen_lsd.iter().all(|&s| s));
    }

    #[test]
    fn augment_train_outputs_224_in_unit_range() {
        let img = test_image(112);
        for (mode, tag) in [(AugmentMode::TrainMtl, 10u64), (AugmentMode::TrainLsd, 11)] {
            for k in 0..20 {
                let mut rng = derive_rng(5, &[tag, k]);
                let out = augment(&img, mode, &mut rng).unwrap();
                assert_eq!((out.height, out.width), (224, 224));
                assert!(out.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn augment_same_rng_same_output() {
        let img = test_image(112);
        let mut r1 = derive_rng(7, &[4]);
        let mut r2 = derive_rng(7, &[4]);
        let a = augment(&img, AugmentMode::TrainMtl, &mut r1).unwrap();
        let b = augment(&img, AugmentMode::TrainMtl, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn patchify_shapes_and_roundtrip() {
        let img = test_image(224);
        let seq = patchify(&img, 16).unwrap();
        assert_eq!(seq.n_patches(), 196);
        assert_eq!(seq.token_len(), 768);
        assert_eq!(seq.kept.len(), 196);
        let seq32 = patchify(&img, 32).unwrap();
        assert_eq!(seq32.n_patches(), 49);
        let back = depatchify(&seq);
        assert_eq!(back, img);
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let img = test_image(224);
        assert!(matches!(patchify(&img, 15), Err(Error::Config(_))));
    }

    #[test]
    fn patchify_roundtrip_all_divisors() {
        let img = test_image(224);
        for p in [2, 4, 8, 14, 28, 56] {
            let seq = patchify(&img, p).unwrap();
            assert_eq!(depatchify(&seq), img, "patch size {p}");
        }
    }

    #[test]
    fn synth_is_pure_function_of_inputs() {
        let a = synth_dataset(4, Task::Mtl, 7);
        let b = synth_dataset(4, Task::Mtl, 7);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.labels, y.labels);
            assert_eq!(x.image, y.image);
        }
        let c = synth_dataset(4, Task::Mtl, 8);
        assert!(a.iter().zip(&c).any(|(x, y)| x.image != y.image));
    }

    #[test]
    fn valence_gain_map_and_rendering() {
        assert_eq!(va_to_gain(1.0), 0.75);
        assert_eq!(va_to_gain(-1.0), 0.25);
        // find a rendered sample and check the mean red channel is the gain
        // up to the +-0.05 noise (noise has zero mean; allow slack)
        let data = synth_dataset(50, Task::Mtl, 42);
        for s in &data {
            if !s.labels.va.is_valid() {
                continue;
            }
            let hw = SYNTH_SIZE * SYNTH_SIZE;
            let mean_red: f32 = s.image.data[..hw].iter().sum::<f32>() / hw as f32;
            let expect = va_to_gain(s.labels.va.valence) as f32;
            assert!(
                (mean_red - expect).abs() < 0.01,
                "mean red {mean_red} vs gain {expect}"
            );
        }
    }

    #[test]
    fn lsd_labels_have_no_sentinels() {
        let data = synth_dataset(200, Task::Lsd, 3);
        for s in &data {
            assert!((0..6).contains(&s.labels.expression.0));
            assert!(s.labels.va.is_valid());
            assert!(s.labels.au.valid);
        }
    }

    #[test]
    fn mtl_sentinel_rates_are_about_ten_percent() {
        let data = synth_dataset(4000, Task::Mtl, 11);
        let va_bad = data.iter().filter(|s| !s.labels.va.is_valid()).count() as f64;
        let exp_bad = data
            .iter()
            .filter(|s| !s.labels.expression.is_valid())
            .count() as f64;
        let au_bad = data.iter().filter(|s| !s.labels.au.valid).count() as f64;
        for rate in [va_bad, exp_bad, au_bad] {
            let r = rate / 4000.0;
            assert!((0.07..0.13).contains(&r), "sentinel rate {r}");
        }
    }

    #[test]
    fn label_validity_triples() {
        let l = Labels {
            va: VAPair::invalid(),
            expression: ExpressionLabel(-1),
            au: AULabels {
                values: [0; 12],
                valid: false,
            },
        };
        assert_eq!(label_validity(&l), (false, false, false));
        let l2 = Labels {
            va: VAPair {
                valence: 0.3,
                arousal: -0.2,
            },
            expression: ExpressionLabel(4),
            au: AULabels {
                values: [1; 12],
                valid: true,
            },
        };
        assert_eq!(label_validity(&l2), (true, true, true));
        let l3 = Labels {
            va: VAPair::invalid(),
            expression: ExpressionLabel(2),
            au: AULabels {
                values: [0; 12],
                valid: true,
            },
        };
        assert_eq!(label_validity(&l3), (false, true, true));
    }
}
