//! Seeded synthetic concealed scenes with exact ground truth.
//!
//! A scene is a textured background with an object cut from the same
//! texture field and lifted by `delta`, so the object differs from its
//! surroundings only by a small intensity offset. A slight per-channel
//! tint and clamped Gaussian noise follow. All randomness comes from
//! ChaCha8 seeded with the scene seed, so a spec always yields the same
//! bytes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::io::{encode_mask, encode_pnm, PnmFormat};
use crate::tensor::{ImageTensor, MaskMap, Tensor};

/// Background base intensity.
pub const BASE_LEVEL: f64 = 0.28;
/// Peak deviation of the texture field around the base.
pub const TEXTURE_AMPLITUDE: f64 = 0.07;
const TINT: f64 = 0.02;
/// Object scale fractions of suite scenes are drawn from this range.
pub const SCALE_RANGE: (f64, f64) = (0.3, 0.5);
pub const DEFAULT_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Ellipse,
    Blob,
    Annulus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Flat,
    ValueNoise,
    Stripes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    /// `(delta, sigma)` of the band.
    pub fn band(self) -> (f64, f64) {
        match self {
            Difficulty::Easy => (0.35, 0.01),
            Difficulty::Medium => (0.2, 0.03),
            Difficulty::Hard => (0.1, 0.05),
        }
    }
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $name:literal),* $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $name),* })
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($ty::$variant),)*
                    _ => Err(format!("unknown {} `{s}`", stringify!($ty).to_lowercase())),
                }
            }
        }
    };
}

text_enum!(Shape { Ellipse => "ellipse", Blob => "blob", Annulus => "annulus" });
text_enum!(Texture { Flat => "flat", ValueNoise => "value-noise", Stripes => "stripes" });
text_enum!(Difficulty { Easy => "easy", Medium => "medium", Hard => "hard" });

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    /// Side length in pixels.
    pub size: usize,
    pub shape: Shape,
    pub texture: Texture,
    /// Intensity lift of the object, in `[0, 0.5]`.
    pub delta: f64,
    pub sigma: f64,
    /// Square root of the object's area fraction, in `(0, 1)`.
    pub scale: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 4 {
            return Err(invalid(format!("scene size {} is below 4", self.size)));
        }
        if !(0.0..=0.5).contains(&self.delta) {
            return Err(invalid(format!("delta {} outside [0, 0.5]", self.delta)));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(invalid(format!("noise sigma {} must be >= 0", self.sigma)));
        }
        if !(self.scale > 0.0 && self.scale < 1.0) {
            return Err(invalid(format!(
                "object scale {} outside (0, 1)",
                self.scale
            )));
        }
        Ok(())
    }
}

/// Object scale assigned to a suite scene with the given seed.
pub fn scale_for_seed(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca1_e000_0000_0000);
    rng.gen_range(SCALE_RANGE.0..SCALE_RANGE.1)
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Texture field in `[-1, 1]`, row-major.
fn texture_field(texture: Texture, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match texture {
        Texture::Flat => vec![0.0; size * size],
        Texture::ValueNoise => {
            let cells = 4;
            let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1))
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let at = |i: usize, j: usize| lattice[i * (cells + 1) + j];
            let step = size as f64 / cells as f64;
            let mut out = Vec::with_capacity(size * size);
            for y in 0..size {
                for x in 0..size {
                    let fy = (y as f64 + 0.5) / step;
                    let fx = (x as f64 + 0.5) / step;
                    let (iy, ix) = ((fy as usize).min(cells - 1), (fx as usize).min(cells - 1));
                    let (ty, tx) = (smoothstep(fy - iy as f64), smoothstep(fx - ix as f64));
                    let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                    let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                    out.push(top * (1.0 - ty) + bottom * ty);
                }
            }
            out
        }
        Texture::Stripes => {
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let period = rng.gen_range(6.0..12.0);
            let (s, c) = angle.sin_cos();
            let mut out = Vec::with_capacity(size * size);
            for y in 0..size {
                for x in 0..size {
                    let u = x as f64 * c + y as f64 * s;
                    out.push((std::f64::consts::TAU * u / period).sin());
                }
            }
            out
        }
    }
}

/// Object indicator, row-major.
fn region(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<bool> {
    use std::f64::consts::PI;
    let n = spec.size as f64;
    let side = spec.scale * n;
    let theta = rng.gen_range(0.0..PI);
    let (st, ct) = theta.sin_cos();

    // polar radius bound and membership test, centred at the origin
    let (reach, inside): (f64, Box<dyn Fn(f64, f64) -> bool>) = match spec.shape {
        Shape::Ellipse => {
            let aspect: f64 = rng.gen_range(0.7..1.4);
            let a = side * (aspect / PI).sqrt();
            let b = side / (aspect * PI).sqrt();
            (
                a.max(b),
                Box::new(move |u, v| (u / a).powi(2) + (v / b).powi(2) <= 1.0),
            )
        }
        Shape::Blob => {
            let r0 = side / PI.sqrt();
            let (p1, p2) = (rng.gen_range(0.0..PI * 2.0), rng.gen_range(0.0..PI * 2.0));
            let radius = move |phi: f64| {
                r0 * (1.0 + 0.2 * (3.0 * phi + p1).sin() + 0.08 * (5.0 * phi + p2).sin())
            };
            (
                r0 * 1.28,
                Box::new(move |u: f64, v: f64| (u * u + v * v).sqrt() <= radius(v.atan2(u))),
            )
        }
        Shape::Annulus => {
            let outer = side / (0.75 * PI).sqrt();
            let inner = 0.5 * outer;
            (
                outer,
                Box::new(move |u: f64, v: f64| {
                    let r = (u * u + v * v).sqrt();
                    r <= outer && r >= inner
                }),
            )
        }
    };
    let margin = reach.min(n / 2.0);
    let cy = if n - 2.0 * margin > 1e-9 {
        rng.gen_range(margin..n - margin)
    } else {
        n / 2.0
    };
    let cx = if n - 2.0 * margin > 1e-9 {
        rng.gen_range(margin..n - margin)
    } else {
        n / 2.0
    };
    let mut out = Vec::with_capacity(spec.size * spec.size);
    for y in 0..spec.size {
        for x in 0..spec.size {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            out.push(inside(dx * ct + dy * st, -dx * st + dy * ct));
        }
    }
    out
}

/// Renders a scene: `(C, GT)` with `C` of shape `size×size×3`.
pub fn generate(spec: &SceneSpec) -> Result<(ImageTensor, MaskMap)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let inside = region(spec, &mut rng);
    if !inside.iter().any(|&b| b) {
        return Err(invalid("object scale produces an empty region"));
    }
    let field = texture_field(spec.texture, spec.size, &mut rng);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-TINT..TINT));
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| invalid(e.to_string()))?;

    let mut data = Vec::with_capacity(spec.size * spec.size * 3);
    for (i, &fg) in inside.iter().enumerate() {
        let level = BASE_LEVEL + TEXTURE_AMPLITUDE * field[i] + if fg { spec.delta } else { 0.0 };
        for t in tint {
            let n = if spec.sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            data.push((level + t + n).clamp(0.0, 1.0));
        }
    }
    let c = Tensor::image(spec.size, spec.size, 3, data)?;
    let gt = MaskMap::new(
        spec.size,
        spec.size,
        inside.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )?;
    Ok((c, gt))
}

/// Specs of an `n`-scene suite: shapes and textures cycle through all
/// variants in a seeded order, per-scene seeds and scales are drawn from
/// the suite seed.
pub fn suite_specs(
    n: usize,
    difficulty: Difficulty,
    seed: u64,
    size: usize,
) -> Result<Vec<SceneSpec>> {
    if n == 0 {
        return Err(invalid("suite needs at least one scene"));
    }
    let (delta, sigma) = difficulty.band();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = [Shape::Ellipse, Shape::Blob, Shape::Annulus];
    let textures = [Texture::Flat, Texture::ValueNoise, Texture::Stripes];
    let specs = (0..n)
        .map(|_| {
            let scene_seed: u64 = rng.gen();
            SceneSpec {
                seed: scene_seed,
                size,
                shape: shapes[rng.gen_range(0..3)],
                texture: textures[rng.gen_range(0..3)],
                delta,
                sigma,
                scale: scale_for_seed(scene_seed),
            }
        })
        .collect();
    Ok(specs)
}

/// Generates a suite in memory.
pub fn suite(
    n: usize,
    difficulty: Difficulty,
    seed: u64,
    size: usize,
) -> Result<Vec<(ImageTensor, MaskMap)>> {
    suite_specs(n, difficulty, seed, size)?
        .iter()
        .map(generate)
        .collect()
}

/// SHA-256 over the encoded image bytes followed by the encoded mask bytes.
pub fn scene_checksum(c: &ImageTensor, gt: &MaskMap) -> Result<String> {
    let mut h = Sha256::new();
    h.update(encode_pnm(c, PnmFormat::P6)?);
    h.update(encode_mask(gt)?);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    /// Image path relative to the manifest's directory.
    pub path: String,
    pub spec: SceneSpec,
    pub checksum: String,
}

impl ManifestEntry {
    /// Ground-truth path next to the image: `x.ppm` → `x_gt.pgm`.
    pub fn gt_path(&self) -> String {
        gt_path_for(&self.path)
    }
}

fn gt_path_for(path: &str) -> String {
    let stem = path.strip_suffix(".ppm").unwrap_or(path);
    format!("{stem}_gt.pgm")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub size: usize,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Manifest text: `# size N` followed by one tab-separated record per
/// scene, `path seed shape texture delta sigma checksum`. The object scale
/// is not stored; it follows from the seed via [`scale_for_seed`].
pub fn render_manifest(m: &Manifest) -> String {
    let mut out = format!("# size {}\n", m.size);
    for e in &m.entries {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:?}\t{:?}\t{}\n",
            e.path,
            e.spec.seed,
            e.spec.shape,
            e.spec.texture,
            e.spec.delta,
            e.spec.sigma,
            e.checksum
        ));
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut size = DEFAULT_SIZE;
    let mut entries = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len();
        let line = line.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            offset: at,
            message: msg,
        };
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(v) = comment.trim().strip_prefix("size ") {
                size = v
                    .trim()
                    .parse()
                    .map_err(|_| bad(format!("bad size `{v}`")))?;
            }
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(bad(format!(
                "expected 7 tab-separated fields, got {}",
                f.len()
            )));
        }
        let seed: u64 = f[1]
            .parse()
            .map_err(|_| bad(format!("bad seed `{}`", f[1])))?;
        let spec = SceneSpec {
            seed,
            size,
            shape: f[2].parse().map_err(bad)?,
            texture: f[3].parse().map_err(bad)?,
            delta: f[4]
                .parse()
                .map_err(|_| bad(format!("bad delta `{}`", f[4])))?,
            sigma: f[5]
                .parse()
                .map_err(|_| bad(format!("bad sigma `{}`", f[5])))?,
            scale: scale_for_seed(seed),
        };
        entries.push(ManifestEntry {
            path: f[0].to_string(),
            spec,
            checksum: f[6].to_string(),
        });
    }
    Ok(Manifest { size, entries })
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    parse_manifest(&fs::read_to_string(path)?)
}

/// Writes `n` scenes (`scene_XXXX.ppm` with `scene_XXXX_gt.pgm`) and
/// [`MANIFEST_NAME`] into `out_dir`, returning the manifest path.
pub fn make_suite(
    n: usize,
    difficulty: Difficulty,
    seed: u64,
    size: usize,
    out_dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(n);
    for (i, spec) in suite_specs(n, difficulty, seed, size)?
        .into_iter()
        .enumerate()
    {
        let (c, gt) = generate(&spec)?;
        let path = format!("scene_{i:04}.ppm");
        let image_bytes = encode_pnm(&c, PnmFormat::P6)?;
        let mask_bytes = encode_mask(&gt)?;
        fs::write(dir.join(&path), &image_bytes)?;
        fs::write(dir.join(gt_path_for(&path)), &mask_bytes)?;
        entries.push(ManifestEntry {
            checksum: scene_checksum(&c, &gt)?,
            path,
            spec,
        });
    }
    let manifest_path = dir.join(MANIFEST_NAME);
    fs::write(&manifest_path, render_manifest(&Manifest { size, entries }))?;
    Ok(manifest_path)
}

/// Regenerates every entry from its spec and compares checksums.
pub fn verify_manifest(m: &Manifest) -> Result<()> {
    for e in &m.entries {
        let (c, gt) = generate(&e.spec)?;
        if scene_checksum(&c, &gt)? != e.checksum {
            return Err(Error::Checksum(e.path.clone()));
        }
    }
    Ok(())
}
