//! Dataset manifests, PPM decoding, query/gallery splits and the procedural
//! synthetic-vehicle corpus.

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub key: String,
    /// Relative to the manifest's directory unless absolute.
    pub image_path: String,
    pub id: usize,
    pub camera: usize,
    pub viewpoint: usize,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    /// Directory relative image paths are resolved against.
    pub root: PathBuf,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_path(&self, s: &Sample) -> PathBuf {
        let p = Path::new(&s.image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn subset(&self, split: Split) -> Dataset {
        Dataset {
            root: self.root.clone(),
            samples: self.samples.iter().filter(|s| s.split == split).cloned().collect(),
        }
    }
}

/// Reads a JSON-lines manifest. Blank lines are ignored; image files are
/// only opened when decoded.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening manifest {}", path.display()), e))?;
    let mut samples = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample =
            serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {lineno}: {e}")))?;
        if let Some(prev) = seen.insert(s.key.clone(), lineno) {
            return Err(Error::format(path, format!("duplicate key `{}` on lines {prev} and {lineno}", s.key)));
        }
        samples.push(s);
    }
    Ok(Dataset {
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        samples,
    })
}

pub fn write_manifest(samples: &[Sample], path: &Path) -> Result<()> {
    let ctx = || format!("writing manifest {}", path.display());
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(ctx(), e))?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

/// 8-bit RGB raster in row-major interleaved order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Rgb8 {
    /// `3×H×W` tensor with values `v / 255`.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0; 3 * h * w];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = f64::from(px[c]) / 255.0;
            }
        }
        Tensor::new(vec![3, h, w], data).expect("rgb layout")
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

fn ppm_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn parse_ppm(bytes: &[u8], path: &Path) -> Result<Rgb8> {
    let mut pos = 0;
    if ppm_token(bytes, &mut pos).as_deref() != Some("P6") {
        return Err(Error::format(path, "not a binary PPM (expected magic P6)"));
    }
    let mut field = |what: &str| -> Result<usize> {
        ppm_token(bytes, &mut pos)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::format(path, format!("bad or missing {what} in PPM header")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if maxval != 255 {
        return Err(Error::format(path, format!("maxval {maxval} unsupported, need 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let need = width * height * 3;
    if bytes.len() < start + need {
        return Err(Error::format(
            path,
            format!("truncated payload: {} of {need} bytes", bytes.len().saturating_sub(start)),
        ));
    }
    Ok(Rgb8 {
        width,
        height,
        pixels: bytes[start..start + need].to_vec(),
    })
}

pub fn read_ppm(path: &Path) -> Result<Rgb8> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading image {}", path.display()), e))?;
    parse_ppm(&bytes, path)
}

/// Reads the images of `samples` in parallel; the result keeps sample order.
pub fn read_images(dataset: &Dataset, samples: &[Sample]) -> Result<Vec<Rgb8>> {
    use rayon::prelude::*;
    samples.par_iter().map(|s| read_ppm(&dataset.image_path(s))).collect()
}

/// Decodes a P6 file to a `3×H×W` tensor in `[0, 1]`.
pub fn decode_image(path: &Path) -> Result<Tensor> {
    Ok(read_ppm(path)?.to_tensor())
}

/// Query and gallery samples in manifest order.
pub fn split_query_gallery(dataset: &Dataset) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let query: Vec<Sample> = dataset.samples.iter().filter(|s| s.split == Split::Query).cloned().collect();
    let gallery: Vec<Sample> = dataset.samples.iter().filter(|s| s.split == Split::Gallery).cloned().collect();
    let gallery_ids: BTreeSet<usize> = gallery.iter().map(|s| s.id).collect();
    if let Some(q) = query.iter().find(|q| !gallery_ids.contains(&q.id)) {
        return Err(Error::invalid(format!(
            "query id {} (key `{}`) has no gallery sample",
            q.id, q.key
        )));
    }
    Ok((query, gallery))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_ids: usize,
    pub images_per_id: usize,
    pub image_size: usize,
    pub num_cameras: usize,
    pub num_viewpoints: usize,
    pub palette_size: usize,
    /// Distinct motif shapes available to identity signatures.
    pub motif_count: usize,
    /// 0 gives clean renders; 1 gives heavy noise, jitter and lighting change.
    pub noise_level: f64,
    pub query_per_id: usize,
    pub gallery_per_id: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_ids: 200,
            images_per_id: 12,
            image_size: 64,
            num_cameras: 4,
            num_viewpoints: 2,
            palette_size: 12,
            motif_count: 4,
            noise_level: 0.5,
            query_per_id: 1,
            gallery_per_id: 3,
            seed: 3407,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: String| Err(Error::Config(format!("synth.{f} {m}")));
        if self.num_ids < 2 {
            return bad("num_ids", format!("must be >= 2, got {}", self.num_ids));
        }
        if self.images_per_id < 2 {
            return bad("images_per_id", format!("must be >= 2, got {}", self.images_per_id));
        }
        if self.image_size < 16 {
            return bad("image_size", format!("must be >= 16, got {}", self.image_size));
        }
        if self.num_cameras == 0 || self.num_viewpoints == 0 {
            return bad("num_cameras", "and num_viewpoints must be >= 1".into());
        }
        if self.palette_size < 2 || self.palette_size > PALETTE.len() {
            return bad("palette_size", format!("must be in 2..={}, got {}", PALETTE.len(), self.palette_size));
        }
        if self.motif_count == 0 || self.motif_count > MOTIFS {
            return bad("motif_count", format!("must be in 1..={MOTIFS}, got {}", self.motif_count));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return bad("noise_level", format!("must be in [0, 1], got {}", self.noise_level));
        }
        if self.query_per_id + self.gallery_per_id > self.images_per_id {
            return bad(
                "images_per_id",
                format!(
                    "{} cannot hold {} query + {} gallery images",
                    self.images_per_id, self.query_per_id, self.gallery_per_id
                ),
            );
        }
        if self.query_per_id > 0 && (self.gallery_per_id == 0 || self.num_cameras < 2) {
            return Err(Error::Config(
                "impossible split: each query needs a gallery image from a different camera \
                 (synth.gallery_per_id >= 1 and synth.num_cameras >= 2)"
                    .into(),
            ));
        }
        Ok(())
    }
}

const PALETTE: [[u8; 3]; 16] = [
    [220, 40, 40],
    [40, 90, 220],
    [240, 200, 40],
    [30, 160, 70],
    [245, 245, 245],
    [25, 25, 25],
    [150, 60, 190],
    [250, 130, 30],
    [60, 200, 210],
    [140, 90, 50],
    [240, 120, 180],
    [120, 130, 140],
    [170, 220, 60],
    [90, 20, 40],
    [20, 60, 90],
    [210, 180, 140],
];

const MOTIFS: usize = 4;
/// Motif anchor slots on the body, as fractions of the image size.
const SLOTS: [(f64, f64); 6] = [(0.25, 0.5), (0.42, 0.5), (0.58, 0.5), (0.75, 0.5), (0.33, 0.64), (0.67, 0.64)];

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Motif {
    shape: usize,
    slot: usize,
    color: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Signature {
    body: usize,
    motifs: Vec<Motif>,
}

fn draw_signature(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Signature {
    let body = rng.random_range(0..cfg.palette_size);
    let count = rng.random_range(2..=4);
    let mut slots: Vec<usize> = (0..SLOTS.len()).collect();
    slots.shuffle(rng);
    let mut motifs: Vec<Motif> = slots[..count]
        .iter()
        .map(|&slot| {
            let mut color = rng.random_range(0..cfg.palette_size - 1);
            if color >= body {
                color += 1;
            }
            Motif {
                shape: rng.random_range(0..cfg.motif_count),
                slot,
                color,
            }
        })
        .collect();
    motifs.sort_by_key(|m| m.slot);
    Signature { body, motifs }
}

/// Whether the canonical (viewpoint 0, unjittered) point lies on the vehicle.
fn body_mask(u: f64, v: f64) -> bool {
    let body = (0.12..=0.88).contains(&u) && (0.40..=0.72).contains(&v);
    let cabin = (0.30..=0.70).contains(&u) && (0.26..=0.40).contains(&v);
    body || cabin
}

fn wheel(u: f64, v: f64) -> bool {
    [(0.28, 0.74), (0.72, 0.74)]
        .iter()
        .any(|&(cu, cv)| (u - cu).powi(2) + (v - cv).powi(2) <= 0.075f64.powi(2))
}

fn motif_hit(shape: usize, du: f64, dv: f64) -> bool {
    let r = 0.06;
    match shape {
        0 => du.abs() <= r && dv.abs() <= r,
        1 => du * du + dv * dv <= r * r,
        2 => dv <= r && dv >= -r && du.abs() <= (dv + r) / 2.0,
        _ => du.abs() <= 1.4 * r && dv.abs() <= 0.35 * r,
    }
}

struct View {
    mirror: bool,
    shear: f64,
    dx: f64,
    dy: f64,
}

impl View {
    fn new(viewpoint: usize, jitter: (f64, f64)) -> Self {
        // Odd viewpoints mirror; every pair beyond the first adds shear.
        Self {
            mirror: viewpoint % 2 == 1,
            shear: 0.15 * (viewpoint / 2) as f64,
            dx: jitter.0,
            dy: jitter.1,
        }
    }

    /// Image coordinates to canonical body coordinates.
    fn canonical(&self, x: f64, y: f64) -> (f64, f64) {
        let mut u = x - self.dx;
        let v = y - self.dy;
        u -= self.shear * (v - 0.5);
        if self.mirror {
            u = 1.0 - u;
        }
        (u, v)
    }
}

fn camera_tint(camera: usize) -> [f64; 3] {
    const TINTS: [[f64; 3]; 6] = [
        [0.45, 0.45, 0.50],
        [0.55, 0.50, 0.35],
        [0.30, 0.42, 0.38],
        [0.50, 0.38, 0.45],
        [0.38, 0.38, 0.30],
        [0.30, 0.35, 0.52],
    ];
    let t = TINTS[camera % TINTS.len()];
    // Cameras beyond the table are dimmed versions of earlier ones.
    let dim = 1.0 - 0.1 * (camera / TINTS.len()) as f64;
    t.map(|c| c * dim)
}

struct Variation {
    jitter: (f64, f64),
    brightness: f64,
    noise_std: f64,
}

fn render(sig: &Signature, camera: usize, viewpoint: usize, var: &Variation, size: usize, rng: &mut ChaCha8Rng) -> Rgb8 {
    let view = View::new(viewpoint, var.jitter);
    let tint = camera_tint(camera);
    let body = PALETTE[sig.body].map(|c| f64::from(c) / 255.0);
    let noise = (var.noise_std > 0.0).then(|| Normal::new(0.0, var.noise_std).expect("finite std"));
    let mut pixels = Vec::with_capacity(size * size * 3);
    for py in 0..size {
        for px in 0..size {
            let x = (px as f64 + 0.5) / size as f64;
            let y = (py as f64 + 0.5) / size as f64;
            let (u, v) = view.canonical(x, y);
            let mut rgb = if wheel(u, v) {
                [0.08, 0.08, 0.08]
            } else if body_mask(u, v) {
                let mut c = body;
                for m in &sig.motifs {
                    let (su, sv) = SLOTS[m.slot];
                    if motif_hit(m.shape, u - su, v - sv) {
                        c = PALETTE[m.color].map(|c| f64::from(c) / 255.0);
                    }
                }
                c.map(|c| c * var.brightness)
            } else {
                // Mild vertical gradient so backgrounds are not flat.
                let shade = 0.85 + 0.3 * y;
                tint.map(|c| c * shade)
            };
            if let Some(n) = &noise {
                for c in &mut rgb {
                    *c += n.sample(rng);
                }
            }
            pixels.extend(rgb.iter().map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }
    Rgb8 {
        width: size,
        height: size,
        pixels,
    }
}

/// Generates the corpus under `out` (`manifest.jsonl` plus `images/`) and
/// returns the written samples.
pub fn synth_generate(cfg: &SynthConfig, out: &Path) -> Result<Dataset> {
    cfg.validate()?;
    let images_dir = out.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(format!("creating {}", images_dir.display()), e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut signatures: Vec<Signature> = Vec::with_capacity(cfg.num_ids);
    let mut seen = std::collections::HashSet::new();
    while signatures.len() < cfg.num_ids {
        let sig = draw_signature(cfg, &mut rng);
        if seen.insert(sig.clone()) {
            signatures.push(sig);
        }
    }
    let nl = cfg.noise_level;
    let mut samples = Vec::with_capacity(cfg.num_ids * cfg.images_per_id);
    for (id, sig) in signatures.iter().enumerate() {
        for j in 0..cfg.images_per_id {
            // Query images come first; cameras rotate so every gallery image of an
            // id sits on a different camera than its first query.
            let camera = (id + j) % cfg.num_cameras;
            let viewpoint = rng.random_range(0..cfg.num_viewpoints);
            let split = if j < cfg.query_per_id {
                Split::Query
            } else if j < cfg.query_per_id + cfg.gallery_per_id {
                Split::Gallery
            } else {
                Split::Train
            };
            let shift = 0.03 * nl;
            let var = Variation {
                jitter: (rng.random_range(-1.0..=1.0) * shift, rng.random_range(-1.0..=1.0) * shift),
                brightness: 1.0 + rng.random_range(-1.0..=1.0) * 0.125 * nl,
                noise_std: 0.06 * nl,
            };
            let img = render(sig, camera, viewpoint, &var, cfg.image_size, &mut rng);
            let key = format!("id{id:04}_{j:02}");
            let rel = format!("images/{key}.ppm");
            let path = out.join(&rel);
            fs::write(&path, img.to_ppm()).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
            samples.push(Sample {
                key,
                image_path: rel,
                id,
                camera,
                viewpoint,
                split,
            });
        }
    }
    if cfg.query_per_id > 0 {
        for id in 0..cfg.num_ids {
            let mine = &samples[id * cfg.images_per_id..(id + 1) * cfg.images_per_id];
            let qcam = mine[0].camera;
            if !mine.iter().any(|s| s.split == Split::Gallery && s.camera != qcam) {
                return Err(Error::Config(format!("impossible split for id {id}: no cross-camera gallery image")));
            }
        }
    }
    write_manifest(&samples, &out.join("manifest.jsonl"))?;
    Ok(Dataset {
        root: out.to_path_buf(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_red_pixel() {
        let bytes = b"P6\n1 1\n255\n\xff\x00\x00";
        let t = parse_ppm(bytes, Path::new("x.ppm")).unwrap().to_tensor();
        assert_eq!(t.shape(), &[3, 1, 1]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P6 # c\n# another\n2 1 255\n\x00\x00\x00\x00\x00\x00";
        let img = parse_ppm(bytes, Path::new("x.ppm")).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert!(img.to_tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ppm_errors() {
        let p = Path::new("x.ppm");
        assert!(parse_ppm(b"P5\n1 1\n255\n\x00", p).unwrap_err().to_string().contains("P6"));
        assert!(parse_ppm(b"P6\n1 1\n65535\n\x00\x00", p).unwrap_err().to_string().contains("maxval"));
        assert!(parse_ppm(b"P6\n2 2\n255\n\x00\x00", p).unwrap_err().to_string().contains("truncated"));
    }

    #[test]
    fn mask_and_view_geometry() {
        assert!(body_mask(0.5, 0.5));
        assert!(!body_mask(0.05, 0.05));
        let v = View::new(1, (0.0, 0.0));
        assert_eq!(v.canonical(0.2, 0.5), (0.8, 0.5));
    }

    #[test]
    fn config_validation_names_fields() {
        let cfg = SynthConfig {
            num_ids: 1,
            ..Default::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("synth.num_ids"));
        let cfg = SynthConfig {
            num_cameras: 1,
            ..Default::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("impossible split"));
    }
}
