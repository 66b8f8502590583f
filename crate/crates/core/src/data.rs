//! Image containers, the procedural identity-image generator, and the
//! Market-style directory loader.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One RGB image with identity metadata. Pixels are f64 in [0, 1], stored
/// channel-major as [3, height, width].
#[derive(Debug, Clone)]
pub struct Image {
    pub id: String,
    pub identity: u32,
    pub camera: u32,
    pub domain: String,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Mirror left-right (the one augmentation used in training).
    pub fn flipped_horizontal(&self) -> Image {
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.data[(c * self.height + y) * self.width + x] =
                        self.pixel(c, y, self.width - 1 - x);
                }
            }
        }
        out
    }

    /// Mean RGB color, used by the raw-pixel separability oracle and the
    /// class graph fallback.
    pub fn mean_color(&self) -> [f64; 3] {
        let n = (self.height * self.width) as f64;
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
                .iter()
                .sum::<f64>()
                / n;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn identities(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.images.iter().map(|i| i.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Per-domain rendering parameters. Different domains shift the palette and
/// nuisance ranges, which is what makes cross-domain evaluation non-trivial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    pub tag: String,
    pub background: [f64; 3],
    /// Channel-wise gain applied to all body colors.
    pub palette_gain: [f64; 3],
    pub brightness_range: (f64, f64),
    pub noise_sigma: f64,
    /// Max translation in pixels, both axes.
    pub translation_max: i32,
    pub occlusion_prob: f64,
}

impl DomainSpec {
    pub fn easy(tag: &str) -> Self {
        DomainSpec {
            tag: tag.to_string(),
            background: [0.15, 0.15, 0.18],
            palette_gain: [1.0, 1.0, 1.0],
            brightness_range: (0.92, 1.08),
            noise_sigma: 0.01,
            translation_max: 1,
            occlusion_prob: 0.0,
        }
    }

    /// A shifted domain: brighter background, tinted palette, more noise.
    pub fn shifted(tag: &str) -> Self {
        DomainSpec {
            tag: tag.to_string(),
            background: [0.35, 0.30, 0.22],
            palette_gain: [1.1, 0.9, 0.85],
            brightness_range: (0.8, 1.2),
            noise_sigma: 0.03,
            translation_max: 2,
            occlusion_prob: 0.2,
        }
    }

    pub fn noiseless(tag: &str) -> Self {
        DomainSpec {
            tag: tag.to_string(),
            background: [0.15, 0.15, 0.18],
            palette_gain: [1.0, 1.0, 1.0],
            brightness_range: (1.0, 1.0),
            noise_sigma: 0.0,
            translation_max: 1,
            occlusion_prob: 0.0,
        }
    }
}

/// Recipe for a deterministic synthetic identity dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub height: usize,
    pub width: usize,
    pub domain: DomainSpec,
    pub seed: u64,
    /// Offset into each identity's image stream; disjoint offsets give
    /// disjoint query/gallery/train images of the same identities.
    pub index_offset: usize,
}

impl SyntheticSpec {
    pub fn easy(n_identities: usize, images_per_identity: usize, seed: u64) -> Self {
        SyntheticSpec {
            n_identities,
            images_per_identity,
            height: 48,
            width: 16,
            domain: DomainSpec::easy("synth_a"),
            seed,
            index_offset: 0,
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

struct IdentityLatent {
    head: [f64; 3],
    torso: [f64; 3],
    legs: [f64; 3],
    torso_width: f64,
    leg_height: f64,
}

fn identity_latent(seed: u64, identity: usize) -> IdentityLatent {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ (identity as u64).wrapping_mul(0xA24B)));
    // Golden-ratio hue spacing keeps identities apart in color space even
    // for small rosters.
    let base_hue = (identity as f64 * 0.618_033_988_75 + rng.gen_range(-0.02..0.02)).fract();
    let torso = hsv_to_rgb(base_hue, 0.95, 0.95);
    let legs = hsv_to_rgb(base_hue + 0.37 + rng.gen_range(-0.03..0.03), 0.9, 0.8);
    let head = hsv_to_rgb(0.08 + rng.gen_range(-0.02..0.02), 0.5, 0.9);
    IdentityLatent {
        head,
        torso,
        legs,
        torso_width: rng.gen_range(0.5..0.75),
        leg_height: rng.gen_range(0.3..0.42),
    }
}

fn fill_rect(img: &mut [f64], h: usize, w: usize, y0: i32, y1: i32, x0: i32, x1: i32, color: [f64; 3]) {
    for y in y0.max(0)..y1.min(h as i32) {
        for x in x0.max(0)..x1.min(w as i32) {
            for c in 0..3 {
                img[(c * h + y as usize) * w + x as usize] = color[c];
            }
        }
    }
}

/// Deterministic rendering of one identity instance with per-image nuisances.
fn render_image(spec: &SyntheticSpec, identity: usize, index: usize) -> Image {
    let latent = identity_latent(spec.seed, identity);
    let dom = &spec.domain;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(
        spec.seed
            .wrapping_mul(31)
            .wrapping_add(identity as u64)
            .wrapping_mul(1_000_003)
            .wrapping_add((index + spec.index_offset) as u64),
    ));
    let (h, w) = (spec.height, spec.width);
    let mut data = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for p in 0..h * w {
            data[c * h * w + p] = dom.background[c];
        }
    }
    let tmax = dom.translation_max;
    let dx = if tmax > 0 { rng.gen_range(-tmax..=tmax) } else { 0 };
    let dy = if tmax > 0 { rng.gen_range(-tmax..=tmax) } else { 0 };
    let gain = |color: [f64; 3]| {
        [
            color[0] * dom.palette_gain[0],
            color[1] * dom.palette_gain[1],
            color[2] * dom.palette_gain[2],
        ]
    };
    let cx = w as i32 / 2 + dx;
    let head_h = (0.15 * h as f64) as i32;
    let head_w = (0.3 * w as f64).max(2.0) as i32;
    let torso_h = (0.35 * h as f64) as i32;
    let torso_w = (latent.torso_width * w as f64) as i32;
    let leg_h = (latent.leg_height * h as f64) as i32;
    let leg_w = (0.18 * w as f64).max(1.0) as i32;
    let top = (0.05 * h as f64) as i32 + dy;
    fill_rect(&mut data, h, w, top, top + head_h, cx - head_w / 2, cx + head_w / 2, gain(latent.head));
    let torso_top = top + head_h + 1;
    fill_rect(&mut data, h, w, torso_top, torso_top + torso_h, cx - torso_w / 2, cx + torso_w / 2, gain(latent.torso));
    let leg_top = torso_top + torso_h + 1;
    let gap = (0.08 * w as f64).max(1.0) as i32;
    fill_rect(&mut data, h, w, leg_top, leg_top + leg_h, cx - gap / 2 - leg_w, cx - gap / 2, gain(latent.legs));
    fill_rect(&mut data, h, w, leg_top, leg_top + leg_h, cx + gap / 2, cx + gap / 2 + leg_w, gain(latent.legs));

    let brightness = if dom.brightness_range.0 < dom.brightness_range.1 {
        rng.gen_range(dom.brightness_range.0..dom.brightness_range.1)
    } else {
        dom.brightness_range.0
    };
    for v in &mut data {
        *v *= brightness;
    }
    if dom.occlusion_prob > 0.0 && rng.gen::<f64>() < dom.occlusion_prob {
        let oy = rng.gen_range(0..h as i32);
        let ox = rng.gen_range(0..w as i32);
        let oh = (h as i32 / 4).max(1);
        let ow = (w as i32 / 3).max(1);
        fill_rect(&mut data, h, w, oy, oy + oh, ox, ox + ow, [0.5, 0.5, 0.5]);
    }
    if dom.noise_sigma > 0.0 {
        // Box-Muller; two uniforms per normal draw, fixed order.
        for v in data.iter_mut() {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen::<f64>();
            let n = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            *v += dom.noise_sigma * n;
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    let frame = index + spec.index_offset;
    Image {
        id: format!("{:04}_c0s1_{:06}_00", identity, frame),
        identity: identity as u32,
        camera: 0,
        domain: dom.tag.clone(),
        height: h,
        width: w,
        data,
    }
}

/// Generate a full synthetic dataset. Byte-deterministic given the spec.
pub fn generate_synthetic(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    if spec.n_identities == 0 {
        return Err(Error::Config("synthetic spec needs at least one identity".into()));
    }
    let mut images = Vec::with_capacity(spec.n_identities * spec.images_per_identity);
    for identity in 0..spec.n_identities {
        for index in 0..spec.images_per_identity {
            images.push(render_image(spec, identity, index));
        }
    }
    Ok(Dataset {
        name: spec.domain.tag.clone(),
        split,
        images,
    })
}

/// Train / query / gallery datasets over the same identity roster with
/// disjoint per-identity image indices.
pub struct SyntheticSuite {
    pub train: Dataset,
    pub query: Dataset,
    pub gallery: Dataset,
}

pub fn generate_suite(
    spec: &SyntheticSpec,
    query_per_id: usize,
    gallery_per_id: usize,
) -> Result<SyntheticSuite> {
    let train = generate_synthetic(spec, Split::Train)?;
    let mut qspec = spec.clone();
    qspec.images_per_identity = query_per_id;
    qspec.index_offset = spec.index_offset + spec.images_per_identity;
    let query = generate_synthetic(&qspec, Split::Query)?;
    let mut gspec = spec.clone();
    gspec.images_per_identity = gallery_per_id;
    gspec.index_offset = qspec.index_offset + query_per_id;
    let gallery = generate_synthetic(&gspec, Split::Gallery)?;
    Ok(SyntheticSuite {
        train,
        query,
        gallery,
    })
}

// ---- disk I/O --------------------------------------------------------------

/// Write the dataset as 8-bit PNGs with Market-style names.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for img in &ds.images {
        let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
        for y in 0..img.height {
            for x in 0..img.width {
                let px = [
                    (img.pixel(0, y, x) * 255.0).round().clamp(0.0, 255.0) as u8,
                    (img.pixel(1, y, x) * 255.0).round().clamp(0.0, 255.0) as u8,
                    (img.pixel(2, y, x) * 255.0).round().clamp(0.0, 255.0) as u8,
                ];
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        buf.save(dir.join(format!("{}.png", img.id)))?;
    }
    Ok(())
}

#[derive(Debug, Default)]
pub struct LoadReport {
    pub skipped: Vec<String>,
    pub warnings: Vec<String>,
}

/// Parse `0001_c1s1_000151_00` into (identity, camera).
fn parse_market_name(stem: &str) -> Option<(u32, u32)> {
    let mut parts = stem.split('_');
    let identity: u32 = parts.next()?.parse().ok()?;
    let cam_seq = parts.next()?;
    let rest = cam_seq.strip_prefix('c')?;
    let s_pos = rest.find('s')?;
    let camera: u32 = rest[..s_pos].parse().ok()?;
    let _seq: u32 = rest[s_pos + 1..].parse().ok()?;
    Some((identity, camera))
}

/// Load a directory of Market-style-named PNG/JPG images.
pub fn load_directory(path: &Path, split: Split) -> Result<(Dataset, LoadReport)> {
    let mut report = LoadReport::default();
    let mut images = Vec::new();
    let mut seen = std::collections::HashSet::new();
    if !path.is_dir() {
        return Err(Error::Data(format!("not a directory: {}", path.display())));
    }
    let mut entries: Vec<_> = std::fs::read_dir(path)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .collect();
    entries.sort();
    let mut duplicates = Vec::new();
    for file in entries {
        let ext = file
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .to_ascii_lowercase();
        if ext != "png" && ext != "jpg" && ext != "jpeg" {
            continue;
        }
        let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let Some((identity, camera)) = parse_market_name(stem) else {
            report.skipped.push(stem.to_string());
            continue;
        };
        if !seen.insert(stem.to_string()) {
            duplicates.push(stem.to_string());
            continue;
        }
        let rgb = image::open(&file)?.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let px = rgb.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    data[(c * h + y) * w + x] = px[c] as f64 / 255.0;
                }
            }
        }
        images.push(Image {
            id: stem.to_string(),
            identity,
            camera,
            domain: path.display().to_string(),
            height: h,
            width: w,
            data,
        });
    }
    if !duplicates.is_empty() {
        return Err(Error::Data(format!(
            "duplicate filenames: {}",
            duplicates.join(", ")
        )));
    }
    if images.is_empty() {
        report
            .warnings
            .push(format!("no images loaded from {}", path.display()));
    }
    if !report.skipped.is_empty() {
        report.warnings.push(format!(
            "skipped {} unparseable filenames",
            report.skipped.len()
        ));
    }
    Ok((
        Dataset {
            name: path
                .file_name()
                .and_then(|s| s.to_str())
                .unwrap_or("dataset")
                .to_string(),
            split,
            images,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec::easy(4, 3, 7);
        let a = generate_synthetic(&spec, Split::Train).unwrap();
        let b = generate_synthetic(&spec, Split::Train).unwrap();
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.data, y.data);
            assert_eq!(x.id, y.id);
        }
    }

    #[test]
    fn noiseless_images_identical_up_to_translation() {
        let mut spec = SyntheticSpec::easy(1, 2, 3);
        spec.domain = DomainSpec::noiseless("flat");
        spec.domain.translation_max = 0;
        let ds = generate_synthetic(&spec, Split::Train).unwrap();
        assert_eq!(ds.images[0].data, ds.images[1].data);
    }

    #[test]
    fn mean_color_nearest_neighbor_separates_easy_preset() {
        // Raw-pixel oracle: classify held-out images by nearest class mean
        // color; the easy preset must be > 90% separable.
        let spec = SyntheticSpec::easy(16, 6, 11);
        let suite = generate_suite(&spec, 2, 2).unwrap();
        let mut class_means: Vec<(u32, [f64; 3])> = Vec::new();
        for id in suite.train.identities() {
            let imgs: Vec<&Image> = suite
                .train
                .images
                .iter()
                .filter(|i| i.identity == id)
                .collect();
            let mut m = [0.0; 3];
            for img in &imgs {
                let c = img.mean_color();
                for k in 0..3 {
                    m[k] += c[k] / imgs.len() as f64;
                }
            }
            class_means.push((id, m));
        }
        let mut correct = 0;
        let total = suite.query.len();
        for img in &suite.query.images {
            let c = img.mean_color();
            let best = class_means
                .iter()
                .min_by(|a, b| {
                    let da: f64 = (0..3).map(|k| (a.1[k] - c[k]).powi(2)).sum();
                    let db: f64 = (0..3).map(|k| (b.1[k] - c[k]).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best.0 == img.identity {
                correct += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc > 0.9, "mean-color NN accuracy {acc}");
    }

    #[test]
    fn market_names_parse() {
        assert_eq!(parse_market_name("0001_c1s1_000151_00"), Some((1, 1)));
        assert_eq!(parse_market_name("garbage"), None);
    }

    #[test]
    fn png_roundtrip_and_empty_dir() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::easy(2, 2, 5);
        let ds = generate_synthetic(&spec, Split::Train).unwrap();
        save_dataset(&ds, tmp.path()).unwrap();
        let (loaded, report) = load_directory(tmp.path(), Split::Train).unwrap();
        assert_eq!(loaded.len(), 4);
        assert!(report.warnings.is_empty());
        for (a, b) in ds.images.iter().zip(&loaded.images) {
            assert_eq!(a.identity, b.identity);
            // 8-bit quantization on the way out.
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1.0 / 255.0 + 1e-9);
            }
        }

        let empty = tempfile::tempdir().unwrap();
        let (ds2, report2) = load_directory(empty.path(), Split::Query).unwrap();
        assert!(ds2.is_empty());
        assert!(!report2.warnings.is_empty());
    }

    #[test]
    fn flip_is_an_involution() {
        let spec = SyntheticSpec::easy(1, 1, 9);
        let ds = generate_synthetic(&spec, Split::Train).unwrap();
        let img = &ds.images[0];
        assert_eq!(img.flipped_horizontal().flipped_horizontal().data, img.data);
    }
}
