//! Procedural "toy face world".
//!
//! Every image is a 3×16×16 render of an [`Identity`] under a [`Prompt`]:
//! a background hue, a face box placed in one of four quadrants at one of
//! two scales, and a face glyph whose appearance is a fixed linear readout
//! of the identity vector. Because the renderer is known exactly, identity
//! similarity, prompt alignment and image quality can all be measured
//! without learned encoders.
//!
//! Layout rules the rest of the crate relies on:
//! - the face box is filled entirely by the glyph, so identity only affects
//!   pixels inside the box and the background only pixels outside it;
//! - every glyph pixel stays far (Euclidean > 0.35) from every background
//!   colour, which makes the glyph mask recoverable from a render;
//! - glyph appearance is a smooth function of normalized face coordinates,
//!   so a small face resampled to the canonical crop still looks like the
//!   large face of the same identity.

use std::fmt;
use std::str::FromStr;

use infu_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, InfuError, Result};

pub const IMAGE_SIZE: usize = 16;
pub const CHANNELS: usize = 3;
pub const NUM_HUES: u8 = 6;
pub const NUM_POSITIONS: u8 = 4;
pub const NUM_SCALES: u8 = 2;
/// Side of the canonical face crop fed to the identity encoders.
pub const CROP_SIZE: usize = 8;
pub const CROP_LEN: usize = CHANNELS * CROP_SIZE * CROP_SIZE;
/// Identity seeds at or above this value are held out from training.
pub const HELDOUT_SEED_BASE: u64 = 1 << 32;
/// Number of glyph parameters read out of an identity vector.
pub const GLYPH_PARAMS: usize = 12;

/// Background palette indexed by `bg_hue`.
pub const PALETTE: [[f64; 3]; NUM_HUES as usize] = [
    [0.35, 0.05, 0.05],
    [0.35, 0.35, 0.05],
    [0.05, 0.35, 0.05],
    [0.05, 0.35, 0.35],
    [0.05, 0.05, 0.35],
    [0.35, 0.05, 0.35],
];
const FEATURE_COLOR: [f64; 3] = [0.46, 0.42, 0.52];
const FEATURE_MIX: f64 = 0.7;
/// Euclidean distance from the background colour above which a pixel counts
/// as part of the glyph.
const GLYPH_DISTANCE: f64 = 0.2;
/// Glyph pixel count separating small (36 px) from large (64 px) faces.
const SCALE_THRESHOLD: usize = 50;
/// Glyph masks larger than this are not a face; the classifier falls back.
const MAX_GLYPH_PIXELS: usize = 100;
/// Normalized face coordinates of eyes, nose and mouth corners.
const KEYPOINT_UV: [(f64, f64); 5] = [
    (0.3, 0.38),
    (0.7, 0.38),
    (0.5, 0.58),
    (0.3, 0.78),
    (0.7, 0.78),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Prompt {
    pub bg_hue: u8,
    pub position: u8,
    pub scale: u8,
}

impl Prompt {
    pub fn new(bg_hue: u8, position: u8, scale: u8) -> Result<Self> {
        if bg_hue >= NUM_HUES || position >= NUM_POSITIONS || scale >= NUM_SCALES {
            return Err(invalid(format!(
                "prompt ({bg_hue},{position},{scale}) out of range"
            )));
        }
        Ok(Self {
            bg_hue,
            position,
            scale,
        })
    }

    /// All 48 prompts, hue-major.
    pub fn grid() -> Vec<Prompt> {
        (0..Self::COUNT).map(Self::from_index).collect()
    }

    pub const COUNT: usize = (NUM_HUES * NUM_POSITIONS * NUM_SCALES) as usize;

    pub fn index(&self) -> usize {
        (self.bg_hue as usize * NUM_POSITIONS as usize + self.position as usize)
            * NUM_SCALES as usize
            + self.scale as usize
    }

    pub fn from_index(i: usize) -> Prompt {
        let scale = (i % NUM_SCALES as usize) as u8;
        let position = (i / NUM_SCALES as usize % NUM_POSITIONS as usize) as u8;
        let bg_hue = (i / (NUM_SCALES * NUM_POSITIONS) as usize) as u8;
        Prompt {
            bg_hue,
            position,
            scale,
        }
    }

    pub fn sample<R: Rng>(rng: &mut R) -> Prompt {
        Self::from_index(rng.gen_range(0..Self::COUNT))
    }

    pub fn face_box(&self) -> FaceBox {
        let half = IMAGE_SIZE / 2;
        let (qx, qy) = ((self.position % 2) as usize, (self.position / 2) as usize);
        let (size, inset) = if self.scale == 1 {
            (half, 0)
        } else {
            (half - 2, 1)
        };
        FaceBox {
            x0: qx * half + inset,
            y0: qy * half + inset,
            size,
        }
    }

    /// Number of attributes equal between two prompts.
    pub fn matches(&self, other: &Prompt) -> usize {
        usize::from(self.bg_hue == other.bg_hue)
            + usize::from(self.position == other.position)
            + usize::from(self.scale == other.scale)
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.bg_hue, self.position, self.scale)
    }
}

impl FromStr for Prompt {
    type Err = InfuError;

    /// `"hue,position,scale"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [h, p, sc] = parts[..] else {
            return Err(invalid(format!("prompt {s:?} is not hue,position,scale")));
        };
        let num = |v: &str| {
            v.parse::<u8>()
                .map_err(|_| invalid(format!("prompt field {v:?} is not a number")))
        };
        Prompt::new(num(h)?, num(p)?, num(sc)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FaceBox {
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
}

impl FaceBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x0 + self.size).contains(&x) && (self.y0..self.y0 + self.size).contains(&y)
    }

    pub fn keypoints(&self) -> ControlKeypoints {
        let s = self.size as f64;
        ControlKeypoints(KEYPOINT_UV.map(|(u, v)| {
            (
                self.x0 + (u * s).floor() as usize,
                self.y0 + (v * s).floor() as usize,
            )
        }))
    }

    /// Smallest box inside the image whose keypoints are exactly `kp`.
    pub fn from_keypoints(kp: &ControlKeypoints) -> Result<FaceBox> {
        for size in 3..=IMAGE_SIZE {
            for y0 in 0..=IMAGE_SIZE - size {
                for x0 in 0..=IMAGE_SIZE - size {
                    let b = FaceBox { x0, y0, size };
                    if b.keypoints() == *kp {
                        return Ok(b);
                    }
                }
            }
        }
        Err(invalid(format!(
            "keypoints {:?} do not locate a face box",
            kp.0
        )))
    }
}

/// Two eyes, nose, two mouth corners as `(x, y)` pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ControlKeypoints(pub [(usize, usize); 5]);

/// Keypoint dots on black, or all black when uncontrolled.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlImage {
    pub pixels: Tensor,
}

impl ControlImage {
    pub fn black() -> Self {
        Self {
            pixels: Tensor::zeros([CHANNELS, IMAGE_SIZE, IMAGE_SIZE]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Identity {
    pub seed: u64,
    /// Unit-norm vector of length `id_dim`.
    pub vector: Tensor,
}

impl Identity {
    pub fn is_heldout(&self) -> bool {
        self.seed >= HELDOUT_SEED_BASE
    }
}

/// Face appearance, each field an affine function of the identity readout
/// (clamped to a renderable range).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlyphParams {
    pub skin: [f64; 3],
    pub eye_spacing: f64,
    pub eye_height: f64,
    pub eye_size: f64,
    pub mouth_curvature: f64,
    pub mouth_width: f64,
    pub brow_angle: f64,
    pub brow_height: f64,
    pub shade_u: f64,
    pub shade_v: f64,
}

impl GlyphParams {
    pub fn from_readout(p: &[f64; GLYPH_PARAMS]) -> Self {
        let eye_height = (0.36 + 0.04 * p[4]).clamp(0.28, 0.44);
        Self {
            skin: [0, 1, 2].map(|c| (0.78 + 0.09 * p[c]).clamp(0.6, 1.0)),
            eye_spacing: (0.42 + 0.06 * p[3]).clamp(0.28, 0.56),
            eye_height,
            eye_size: (0.11 + 0.02 * p[5]).clamp(0.08, 0.15),
            mouth_curvature: (0.9 * p[6]).clamp(-1.8, 1.8),
            mouth_width: (0.2 + 0.04 * p[7]).clamp(0.12, 0.28),
            brow_angle: (0.5 * p[8]).clamp(-1.0, 1.0),
            brow_height: eye_height - 0.15 + (0.02 * p[9]).clamp(-0.04, 0.04),
            shade_u: (0.15 * p[10]).clamp(-0.3, 0.3),
            shade_v: (0.15 * p[11]).clamp(-0.3, 0.3),
        }
    }

    /// Colour at normalized face coordinates `(u, v) ∈ [0,1]²`.
    pub fn color(&self, u: f64, v: f64) -> [f64; 3] {
        let gauss = |d2: f64, s: f64| (-d2 / (2.0 * s * s)).exp();
        let soft_window = |excess: f64, s: f64| {
            if excess > 0.0 {
                gauss(excess * excess, s)
            } else {
                1.0
            }
        };

        let eye_x = [0.5 - self.eye_spacing / 2.0, 0.5 + self.eye_spacing / 2.0];
        let mut ink = 0.0;
        for (side, ex) in [-1.0, 1.0].into_iter().zip(eye_x) {
            ink += gauss(
                (u - ex).powi(2) + (v - self.eye_height).powi(2),
                self.eye_size,
            );
            let dxb = u - ex;
            let brow_v = self.brow_height + side * self.brow_angle * dxb;
            ink += gauss((v - brow_v).powi(2), 0.055) * soft_window(dxb.abs() - 0.1, 0.03);
        }
        let dx = u - 0.5;
        let mouth_v = 0.74 + self.mouth_curvature * dx * dx;
        ink += gauss((v - mouth_v).powi(2), 0.065) * soft_window(dx.abs() - self.mouth_width, 0.04);
        let mix = FEATURE_MIX * ink.min(1.0);

        let shade = 1.0 + self.shade_u * (u - 0.5) + self.shade_v * (v - 0.5);
        [0, 1, 2]
            .map(|c| (1.0 - mix) * (self.skin[c] * shade).clamp(0.5, 1.0) + mix * FEATURE_COLOR[c])
    }
}

/// Everything needed to draw one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSpec {
    pub glyph: GlyphParams,
    pub face_box: FaceBox,
    pub background: [f64; 3],
}

/// Subsamples per pixel side when integrating the glyph over a pixel.
const SUPERSAMPLE: usize = 4;

impl RenderSpec {
    /// Glyph colour averaged over the pixel's footprint.
    fn face_pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let size = self.face_box.size as f64;
        let mut acc = [0.0; 3];
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let u = (x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) / size;
                let v = (y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) / size;
                let c = self.glyph.color(u, v);
                for k in 0..3 {
                    acc[k] += c[k];
                }
            }
        }
        acc.map(|a| a / (SUPERSAMPLE * SUPERSAMPLE) as f64)
    }

    pub fn draw(&self) -> Tensor {
        let n = IMAGE_SIZE;
        let mut img = Tensor::zeros([CHANNELS, n, n]);
        let data = img.data_mut();
        let fb = self.face_box;
        for y in 0..n {
            for x in 0..n {
                let rgb = if fb.contains(x, y) {
                    self.face_pixel(x - fb.x0, y - fb.y0)
                } else {
                    self.background
                };
                for c in 0..CHANNELS {
                    data[(c * n + y) * n + x] = rgb[c];
                }
            }
        }
        img
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub id_dim: usize,
    pub eval_dim: usize,
    pub glyph_seed: u64,
    pub cond_encoder_seed: u64,
    pub eval_encoder_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            id_dim: 32,
            eval_dim: 32,
            glyph_seed: 0x6c79_7068,
            cond_encoder_seed: 0x636f_6e64,
            eval_encoder_seed: 0x6576_616c,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.id_dim == 0 || self.eval_dim == 0 {
            return Err(InfuError::Config(
                "id_dim and eval_dim must be positive".into(),
            ));
        }
        if self.cond_encoder_seed == self.eval_encoder_seed {
            return Err(InfuError::Config(
                "conditioning and evaluation encoders need distinct seeds".into(),
            ));
        }
        Ok(())
    }
}

/// One single-person-single-sample record: the target image is also the
/// source of the identity embedding.
#[derive(Clone, Debug)]
pub struct SpssRecord {
    pub id_seed: u64,
    pub prompt: Prompt,
    pub target: Tensor,
    pub id_embedding: Tensor,
    pub control: ControlImage,
    pub keypoints: ControlKeypoints,
}

/// The frozen world: glyph readout and both identity encoders.
#[derive(Clone, Debug)]
pub struct ToyWorld {
    cfg: WorldConfig,
    glyph_readout: Vec<f64>,
    w_cond: Vec<f64>,
    w_eval: Vec<f64>,
    template: Vec<f64>,
}

fn gaussian_matrix(seed: u64, len: usize, std: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit(v: Vec<f64>) -> Result<Tensor> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(invalid("embedding has zero norm"));
    }
    Ok(Tensor::from_vec(v.into_iter().map(|x| x / norm).collect()))
}

impl ToyWorld {
    pub fn new(cfg: WorldConfig) -> Result<Self> {
        cfg.validate()?;
        let glyph_readout = gaussian_matrix(cfg.glyph_seed, GLYPH_PARAMS * cfg.id_dim, 1.0);
        let enc_std = 1.0 / (CROP_LEN as f64).sqrt();
        let w_cond = gaussian_matrix(cfg.cond_encoder_seed, cfg.id_dim * CROP_LEN, enc_std);
        let w_eval = gaussian_matrix(cfg.eval_encoder_seed, cfg.eval_dim * CROP_LEN, enc_std);
        let mut world = Self {
            cfg,
            glyph_readout,
            w_cond,
            w_eval,
            template: Vec::new(),
        };
        let mean_face = RenderSpec {
            glyph: GlyphParams::from_readout(&[0.0; GLYPH_PARAMS]),
            face_box: Prompt::new(0, 0, 1)?.face_box(),
            background: PALETTE[0],
        };
        world.template = smooth_crop(&canonical_crop(&mean_face.draw(), mean_face.face_box));
        Ok(world)
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn cond_matrix(&self) -> &[f64] {
        &self.w_cond
    }

    pub fn eval_matrix(&self) -> &[f64] {
        &self.w_eval
    }

    /// Deterministic identity for a seed: Gaussian draw, L2-normalized.
    pub fn identity(&self, seed: u64) -> Identity {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1d3e_7a11_9c5b_0f27);
        loop {
            let v: Vec<f64> = (0..self.cfg.id_dim)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            if let Ok(vector) = unit(v) {
                return Identity { seed, vector };
            }
        }
    }

    /// Identity from the training seed range.
    pub fn sample_identity<R: Rng>(&self, rng: &mut R) -> Identity {
        self.identity(rng.gen_range(0..HELDOUT_SEED_BASE))
    }

    pub fn sample_heldout_identity<R: Rng>(&self, rng: &mut R) -> Identity {
        self.identity(HELDOUT_SEED_BASE + rng.gen::<u32>() as u64)
    }

    pub fn glyph(&self, id: &Identity) -> GlyphParams {
        let d = self.cfg.id_dim;
        let mut p = [0.0; GLYPH_PARAMS];
        for (k, out) in p.iter_mut().enumerate() {
            *out = self.glyph_readout[k * d..(k + 1) * d]
                .iter()
                .zip(id.vector.data())
                .map(|(a, b)| a * b)
                .sum();
        }
        GlyphParams::from_readout(&p)
    }

    pub fn render_spec(&self, id: &Identity, prompt: Prompt) -> RenderSpec {
        RenderSpec {
            glyph: self.glyph(id),
            face_box: prompt.face_box(),
            background: PALETTE[prompt.bg_hue as usize],
        }
    }

    /// `[3×16×16]` render in `[0, 1]`.
    pub fn render(&self, id: &Identity, prompt: Prompt) -> Tensor {
        self.render_spec(id, prompt).draw()
    }

    /// Control image and keypoints for a prompt's face box; an uncontrolled
    /// request yields a black image (keypoints are still reported).
    pub fn make_control(
        &self,
        prompt: Prompt,
        controlled: bool,
    ) -> (ControlImage, ControlKeypoints) {
        let kp = prompt.face_box().keypoints();
        let mut img = ControlImage::black();
        if controlled {
            let n = IMAGE_SIZE;
            for &(x, y) in &kp.0 {
                for c in 0..CHANNELS {
                    img.pixels.data_mut()[(c * n + y) * n + x] = 1.0;
                }
            }
        }
        (img, kp)
    }

    fn encode(
        &self,
        w: &[f64],
        dim: usize,
        image: &Tensor,
        kp: &ControlKeypoints,
    ) -> Result<Tensor> {
        check_image(image)?;
        let fb = FaceBox::from_keypoints(kp)?;
        let crop = smooth_crop(&canonical_crop(image, fb));
        let feat: Vec<f64> = crop
            .iter()
            .zip(&self.template)
            .map(|(a, b)| a - b)
            .collect();
        let out: Vec<f64> = w
            .chunks_exact(CROP_LEN)
            .take(dim)
            .map(|row| row.iter().zip(&feat).map(|(a, b)| a * b).sum())
            .collect();
        unit(out)
    }

    /// Frozen conditioning encoder: face crop located by the keypoints,
    /// resampled to 8×8, offset from the mean face, projected and normalized.
    pub fn encode_identity_cond(&self, image: &Tensor, kp: &ControlKeypoints) -> Result<Tensor> {
        self.encode(&self.w_cond, self.cfg.id_dim, image, kp)
    }

    /// Metric encoder: same pipeline with an independently seeded projection.
    pub fn encode_identity_eval(&self, image: &Tensor, kp: &ControlKeypoints) -> Result<Tensor> {
        self.encode(&self.w_eval, self.cfg.eval_dim, image, kp)
    }

    /// Recovers the prompt attributes from pixels. Degenerate images (no
    /// glyph, or a glyph mask too large to be a face) fall back to
    /// position 0, scale 0.
    pub fn classify_attributes(&self, image: &Tensor) -> Prompt {
        let n = IMAGE_SIZE;
        let px = |c: usize, x: usize, y: usize| image.data()[(c * n + y) * n + x];
        let mut border: [Vec<f64>; CHANNELS] = Default::default();
        for y in 0..n {
            for x in 0..n {
                if x == 0 || y == 0 || x == n - 1 || y == n - 1 {
                    for (c, b) in border.iter_mut().enumerate() {
                        b.push(px(c, x, y));
                    }
                }
            }
        }
        let median = border.map(|mut v| {
            v.sort_by(f64::total_cmp);
            let m = v.len() / 2;
            0.5 * (v[m - 1] + v[m])
        });
        let dist =
            |a: [f64; 3], b: &[f64; 3]| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>().sqrt();
        let bg_hue = PALETTE
            .iter()
            .enumerate()
            .min_by(|(i, a), (j, b)| dist(median, a).total_cmp(&dist(median, b)).then(i.cmp(j)))
            .map(|(i, _)| i as u8)
            .unwrap();
        let bg = PALETTE[bg_hue as usize];

        let (mut count, mut sx, mut sy) = (0usize, 0.0, 0.0);
        for y in 0..n {
            for x in 0..n {
                if dist([px(0, x, y), px(1, x, y), px(2, x, y)], &bg) > GLYPH_DISTANCE {
                    count += 1;
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                }
            }
        }
        if count == 0 || count > MAX_GLYPH_PIXELS {
            return Prompt {
                bg_hue,
                position: 0,
                scale: 0,
            };
        }
        let half = (n / 2) as f64;
        let qx = u8::from(sx / count as f64 >= half);
        let qy = u8::from(sy / count as f64 >= half);
        Prompt {
            bg_hue,
            position: qy * 2 + qx,
            scale: u8::from(count >= SCALE_THRESHOLD),
        }
    }

    pub fn spss_record(&self, id: &Identity, prompt: Prompt) -> Result<SpssRecord> {
        let target = self.render(id, prompt);
        let (control, keypoints) = self.make_control(prompt, true);
        let id_embedding = self.encode_identity_cond(&target, &keypoints)?;
        Ok(SpssRecord {
            id_seed: id.seed,
            prompt,
            target,
            id_embedding,
            control,
            keypoints,
        })
    }

    /// `n` i.i.d. single-person-single-sample records from the training
    /// identity range.
    pub fn dataset_spss<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<SpssRecord>> {
        if n == 0 {
            return Err(invalid("dataset size must be at least 1"));
        }
        (0..n)
            .map(|_| {
                let id = self.sample_identity(rng);
                let prompt = Prompt::sample(rng);
                self.spss_record(&id, prompt)
            })
            .collect()
    }
}

fn check_image(image: &Tensor) -> Result<()> {
    if image.shape() != [CHANNELS, IMAGE_SIZE, IMAGE_SIZE] {
        return Err(invalid(format!(
            "expected a 3×16×16 image, got {:?}",
            image.shape()
        )));
    }
    Ok(())
}

/// Bilinear resample of the face box to `CROP_SIZE²`, channel-major.
fn canonical_crop(image: &Tensor, fb: FaceBox) -> Vec<f64> {
    let n = IMAGE_SIZE;
    let src = image.data();
    let mut out = Vec::with_capacity(CROP_LEN);
    let coord = |i: usize| {
        let s = ((i as f64 + 0.5) / CROP_SIZE as f64 * fb.size as f64 - 0.5)
            .clamp(0.0, (fb.size - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(fb.size - 1), s - lo as f64)
    };
    for c in 0..CHANNELS {
        for cy in 0..CROP_SIZE {
            let (y0, y1, fy) = coord(cy);
            for cx in 0..CROP_SIZE {
                let (x0, x1, fx) = coord(cx);
                let at = |x: usize, y: usize| src[(c * n + fb.y0 + y) * n + fb.x0 + x];
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bot = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Separable `[1, 2, 1] / 4` blur with clamped edges; suppresses the
/// resampling error between the two face scales.
fn smooth_crop(crop: &[f64]) -> Vec<f64> {
    let n = CROP_SIZE;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for c in 0..CHANNELS {
            for y in 0..n {
                for x in 0..n {
                    let at = |dx: isize| {
                        let (xx, yy) = if horizontal {
                            (x as isize + dx, y as isize)
                        } else {
                            (x as isize, y as isize + dx)
                        };
                        let (xx, yy) = (
                            xx.clamp(0, n as isize - 1) as usize,
                            yy.clamp(0, n as isize - 1) as usize,
                        );
                        src[(c * n + yy) * n + xx]
                    };
                    out[(c * n + y) * n + x] = 0.25 * at(-1) + 0.5 * at(0) + 0.25 * at(1);
                }
            }
        }
        out
    };
    pass(&pass(crop, true), false)
}

pub fn cosine(a: &Tensor, b: &Tensor) -> f64 {
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    dot / (a.norm() * b.norm())
}
